//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in exact reverse
//! order. Gradients of leaf nodes accumulate across backward calls until
//! [`Tape::zero_grads`]; gradients of interior nodes are recomputed on every
//! call.
//!
//! ```
//! use ctcmix_core::autodiff::Tape;
//! use ctcmix_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(2.0));
//! let y = tape.variable(Tensor::scalar(5.0));
//! let loss = tape.mul(x, y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[5.0]);
//! assert_eq!(tape.grad(y).unwrap(), &[2.0]);
//! ```

mod conv;
pub(crate) mod gemm;
mod recurrent;

pub use conv::{conv_extent, Padding};
pub use recurrent::LstmParams;

use crate::tensor::{Tensor, TensorError};
use conv::ConvGeometry;
use recurrent::LstmCache;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Tile {
        input: Var,
        factor: (usize, usize),
    },
    ToSequence(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Lstm {
        input: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        cache: LstmCache,
    },
    Concat(Var, Var),
    Mix {
        input: Var,
        partners: Vec<Vec<usize>>,
        weights: Vec<Vec<f64>>,
    },
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    External {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let value = if value.requires_grad() {
            Tensor::new(value.shape().to_vec(), value.into_data()).expect("valid tensor")
        } else {
            value
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `tensor`; it is differentiated iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let needs = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("valid tensor");
        self.push(value, Op::Leaf, needs)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).mul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, factor), needs)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a);
        self.push(out, op, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over the last dimension, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let width = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        if width > 0 {
            for row in data.chunks_mut(width) {
                softmax_in_place(row);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a);
        self.push(out, Op::Softmax(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let v = self.value(a);
        if mask.len() != v.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                v.shape()
            )));
        }
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a);
        Ok(self.push(out, Op::Mask { input: a, mask }, needs))
    }

    /// Concatenation of two tensors along their last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::ShapeMismatch(format!(
                "concat: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let rows = self.value(a).len() / da.max(1);
        let mut data = Vec::with_capacity(rows * (da + db));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            data.extend_from_slice(&va[r * da..(r + 1) * da]);
            data.extend_from_slice(&vb[r * db..(r + 1) * db]);
        }
        let out = Tensor::new(shape, data).expect("concat shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    /// Per-sample convex mixing along the batch axis:
    /// `out[b] = weights[b][0] * x[b] + Σ_m weights[b][m+1] * x[partners[m][b]]`.
    ///
    /// Terms with a zero weight are skipped entirely, so a weight vector of
    /// `[1, 0, ..]` reproduces `x[b]` bit for bit.
    pub fn mix(
        &mut self,
        a: Var,
        partners: &[Vec<usize>],
        weights: &[Vec<f64>],
    ) -> Result<Var, TensorError> {
        let v = self.value(a);
        let batch = *v.shape().first().unwrap_or(&0);
        if weights.len() != batch
            || weights.iter().any(|w| w.len() != partners.len() + 1)
            || partners
                .iter()
                .any(|p| p.len() != batch || p.iter().any(|&j| j >= batch))
        {
            return Err(TensorError::ShapeMismatch(format!(
                "mix plan does not fit batch of {batch}"
            )));
        }
        let item = v.len() / batch.max(1);
        let src = v.data();
        let mut data = vec![0.0; v.len()];
        for b in 0..batch {
            let out = &mut data[b * item..(b + 1) * item];
            let mut first = true;
            for (m, &w) in weights[b].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let j = if m == 0 { b } else { partners[m - 1][b] };
                let x = &src[j * item..(j + 1) * item];
                if first {
                    // Assign rather than add so signed zeros survive.
                    out.iter_mut().zip(x).for_each(|(o, x)| *o = w * x);
                    first = false;
                } else {
                    out.iter_mut().zip(x).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(a);
        Ok(self.push(
            out,
            Op::Mix {
                input: a,
                partners: partners.to_vec(),
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    /// A scalar whose value and gradient with respect to `input` were
    /// computed outside the tape (e.g. by the CTC dynamic program).
    pub fn external_loss(
        &mut self,
        input: Var,
        value: f64,
        grad: Vec<f64>,
    ) -> Result<Var, TensorError> {
        if grad.len() != self.value(input).len() {
            return Err(TensorError::ShapeMismatch(format!(
                "external gradient of length {} for tensor {:?}",
                grad.len(),
                self.shape(input)
            )));
        }
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(value), Op::External { input, grad }, needs))
    }

    /// Fully connected layer over the last dimension: `x · Wᵀ + b` with
    /// `W` of shape `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let d_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != d_in || self.shape(bias) != [ws[0]] {
            return Err(TensorError::ShapeMismatch(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                self.shape(bias)
            )));
        }
        let d_out = ws[0];
        let rows = self.value(input).len() / d_in.max(1);
        let mut data = Vec::with_capacity(rows * d_out);
        let b = self.value(bias).data();
        for _ in 0..rows {
            data.extend_from_slice(b);
        }
        gemm::gemm(
            1.0,
            gemm::Mat::new(self.value(input).data(), rows, d_in),
            gemm::Mat::t(self.value(weight).data(), d_in, d_out),
            1.0,
            &mut data,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let out = Tensor::new(shape, data).expect("linear shape");
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Populates gradients of every differentiable node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(grads, nodes, v, |d| add_into(d, g));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    let vb = val(b);
                    acc(grads, nodes, a, |d| {
                        d.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (g, y))| *d += g * y)
                    });
                }
                if needs(b) {
                    let va = val(a);
                    acc(grads, nodes, b, |d| {
                        d.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (g, x))| *d += g * x)
                    });
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                acc(grads, nodes, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, nodes, *a, |d| {
                    d.iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (g, y))| *d += g * y * (1.0 - y))
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(grads, nodes, *a, |d| {
                    d.iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (g, y))| *d += g * (1.0 - y * y))
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                acc(grads, nodes, *a, |d| {
                    for ((d, g), y) in d
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(y.chunks(width))
                    {
                        let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        d.iter_mut()
                            .zip(g.iter().zip(y))
                            .for_each(|(d, (g, y))| *d += y * (g - dot));
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(grads, nodes, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mask { input, mask } => {
                acc(grads, nodes, *input, |d| {
                    d.iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(d, (g, m))| *d += g * m)
                });
            }
            Op::External { input, grad } => {
                let g0 = g[0];
                acc(grads, nodes, *input, |d| {
                    d.iter_mut().zip(grad).for_each(|(d, e)| *d += g0 * e)
                });
            }
            Op::Concat(a, b) => {
                let da = *nodes[a.0].value.shape().last().unwrap();
                let db = *nodes[b.0].value.shape().last().unwrap();
                let w = da + db;
                if needs(*a) {
                    acc(grads, nodes, *a, |d| {
                        for (d, g) in d.chunks_mut(da).zip(g.chunks(w)) {
                            add_into(d, &g[..da]);
                        }
                    });
                }
                if needs(*b) {
                    acc(grads, nodes, *b, |d| {
                        for (d, g) in d.chunks_mut(db).zip(g.chunks(w)) {
                            add_into(d, &g[da..]);
                        }
                    });
                }
            }
            Op::Mix {
                input,
                partners,
                weights,
            } => {
                let batch = weights.len();
                let item = g.len() / batch.max(1);
                acc(grads, nodes, *input, |d| {
                    for b in 0..batch {
                        let gb = &g[b * item..(b + 1) * item];
                        for (m, &w) in weights[b].iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let j = if m == 0 { b } else { partners[m - 1][b] };
                            d[j * item..(j + 1) * item]
                                .iter_mut()
                                .zip(gb)
                                .for_each(|(d, g)| *d += w * g);
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = nodes[weight.0].value.shape();
                let (d_out, d_in) = (ws[0], ws[1]);
                let rows = g.len() / d_out.max(1);
                if needs(*input) {
                    let w = val(*weight);
                    acc(grads, nodes, *input, |d| {
                        gemm::gemm(
                            1.0,
                            gemm::Mat::new(g, rows, d_out),
                            gemm::Mat::new(w, d_out, d_in),
                            1.0,
                            d,
                        )
                    });
                }
                if needs(*weight) {
                    let x = val(*input);
                    acc(grads, nodes, *weight, |d| {
                        gemm::gemm(
                            1.0,
                            gemm::Mat::t(g, d_out, rows),
                            gemm::Mat::new(x, rows, d_in),
                            1.0,
                            d,
                        )
                    });
                }
                if needs(*bias) {
                    acc(grads, nodes, *bias, |d| {
                        for row in g.chunks(d_out) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => conv::conv2d_backward(self, grads, g, *input, *kernel, *bias, geom, cols),
            Op::MaxPool { input, argmax } => {
                acc(grads, nodes, *input, |d| {
                    for (&idx, g) in argmax.iter().zip(g) {
                        d[idx] += g;
                    }
                });
            }
            Op::Tile { input, factor } => {
                let shape = nodes[input.0].value.shape().to_vec();
                acc(grads, nodes, *input, |d| conv::untile_add(&shape, *factor, g, d));
            }
            Op::ToSequence(a) => {
                let s = nodes[a.0].value.shape();
                let (b, depth, w) = (s[0], s[1], s[3]);
                acc(grads, nodes, *a, |d| {
                    for bi in 0..b {
                        for t in 0..w {
                            for c in 0..depth {
                                d[(bi * depth + c) * w + t] += g[(bi * w + t) * depth + c];
                            }
                        }
                    }
                });
            }
            Op::Lstm {
                input,
                w_ih,
                w_hh,
                bias,
                cache,
            } => recurrent::lstm_backward(self, grads, g, node.value.data(), *input, *w_ih, *w_hh, *bias, cache),
        }
    }
}

/// Adds into the gradient slot of `v`, allocating it on first use.
fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf);
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of one row with max-subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests;
