use rand::Rng;

use super::{ModelError, NetworkConfig};
use crate::tensor::Tensor;

/// Names of the two bidirectional layers and the two linear layers, in
/// forward order.
pub(crate) const DECODER: [(&str, bool); 4] = [
    ("blstm1", true),
    ("linear1", false),
    ("blstm2", true),
    ("linear2", false),
];

/// Every parameter name and shape, in the order the forward pass consumes
/// them.
pub fn param_shapes(config: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut depth = config.tiled_depth();
    for (k, c) in config.convs.iter().enumerate() {
        let name = format!("conv{}", k + 1);
        out.push((
            format!("{name}.weight"),
            vec![c.out_depth, depth, c.filter.0, c.filter.1],
        ));
        out.push((format!("{name}.bias"), vec![c.out_depth]));
        depth = c.out_depth;
    }
    let width = config.decoder_width;
    for (name, recurrent) in DECODER {
        if recurrent {
            let h = width / 2;
            for dir in ["fwd", "bwd"] {
                out.push((format!("{name}.{dir}.w_ih"), vec![4 * h, depth]));
                out.push((format!("{name}.{dir}.w_hh"), vec![4 * h, h]));
                out.push((format!("{name}.{dir}.bias"), vec![4 * h]));
            }
        } else {
            out.push((format!("{name}.weight"), vec![width, depth]));
            out.push((format!("{name}.bias"), vec![width]));
        }
        depth = width;
    }
    out.push(("output.weight".into(), vec![config.num_classes(), depth]));
    out.push(("output.bias".into(), vec![config.num_classes()]));
    out
}

/// `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fans of a weight tensor: `[out, in, kh, kw]` or `[out, in]`.
fn fans(shape: &[usize]) -> (usize, usize) {
    let receptive: usize = shape[2..].iter().product();
    (shape[1] * receptive, shape[0] * receptive)
}

/// Named parameter tensors in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases (including LSTM gate biases).
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Self {
        let (names, tensors) = param_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let (fi, fo) = fans(&shape);
                    let b = glorot_bound(fi, fo);
                    (0..n).map(|_| rng.gen_range(-b..=b)).collect()
                };
                (name, Tensor::new(shape, data).expect("shape from table"))
            })
            .unzip();
        Self { names, tensors }
    }

    /// Wraps tensors after checking them against the config's table.
    pub fn from_named(
        config: &NetworkConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let expected = param_shapes(config);
        if expected.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {en} {es:?}, found {n} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
