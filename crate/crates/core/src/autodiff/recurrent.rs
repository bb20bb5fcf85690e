//! Single-direction LSTM with exact backpropagation through time, and the
//! bidirectional wrapper built from two of them.
//!
//! Gate blocks in the `4H` axis are ordered input, forget, cell, output.

use super::gemm::{gemm, Mat};
use super::{acc, sigmoid, Op, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub(crate) struct LstmCache {
    reverse: bool,
    batch: usize,
    steps: usize,
    hidden: usize,
    /// Activated gates `[B, T, 4H]`.
    gates: Vec<f64>,
    /// Cell states `[B, T, H]`.
    cells: Vec<f64>,
    /// `tanh` of the cell states `[B, T, H]`.
    cell_tanh: Vec<f64>,
}

/// Parameters of one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    /// `[4H, D]`
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

impl Tape {
    /// Runs an LSTM over `input` (`[B, T, D]`), returning hidden states
    /// `[B, T, H]`. With `reverse` the sequence is consumed from the last
    /// frame to the first and outputs stay aligned with input frames.
    pub fn lstm(
        &mut self,
        input: Var,
        params: LstmParams,
        reverse: bool,
    ) -> Result<Var, TensorError> {
        let LstmParams { w_ih, w_hh, bias } = params;
        let xs = self.shape(input).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        if xs.len() != 3 || wi.len() != 2 || wh.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "lstm: input {:?}, w_ih {:?}, w_hh {:?}",
                xs, wi, wh
            )));
        }
        let (batch, steps, d_in) = (xs[0], xs[1], xs[2]);
        let hidden = wh[1];
        let g4 = 4 * hidden;
        if wi != [g4, d_in] || wh != [g4, hidden] || self.shape(bias) != [g4] {
            return Err(TensorError::ShapeMismatch(format!(
                "lstm: input {:?}, w_ih {:?}, w_hh {:?}, bias {:?}",
                xs,
                wi,
                wh,
                self.shape(bias)
            )));
        }
        if steps == 0 {
            return Err(TensorError::EmptyOutput("lstm over zero frames".into()));
        }

        let rows = batch * steps;
        let mut pre = Vec::with_capacity(rows * g4);
        let b = self.value(bias).data();
        for _ in 0..rows {
            pre.extend_from_slice(b);
        }
        gemm(
            1.0,
            Mat::new(self.value(input).data(), rows, d_in),
            Mat::t(self.value(w_ih).data(), d_in, g4),
            1.0,
            &mut pre,
        );

        let whh = self.value(w_hh).data();
        let mut gates = pre;
        let mut cells = vec![0.0; rows * hidden];
        let mut cell_tanh = vec![0.0; rows * hidden];
        let mut out = vec![0.0; rows * hidden];
        let mut h_prev = vec![0.0; batch * hidden];
        let mut step_pre = vec![0.0; batch * g4];
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            for bi in 0..batch {
                let r = bi * steps + t;
                step_pre[bi * g4..(bi + 1) * g4].copy_from_slice(&gates[r * g4..(r + 1) * g4]);
            }
            if step > 0 {
                gemm(
                    1.0,
                    Mat::new(&h_prev, batch, hidden),
                    Mat::t(whh, hidden, g4),
                    1.0,
                    &mut step_pre,
                );
            }
            for bi in 0..batch {
                let r = bi * steps + t;
                let prev_r = if step > 0 {
                    let tp = if reverse { t + 1 } else { t - 1 };
                    Some(bi * steps + tp)
                } else {
                    None
                };
                let a = &step_pre[bi * g4..(bi + 1) * g4];
                let gate = &mut gates[r * g4..(r + 1) * g4];
                for j in 0..hidden {
                    let i_ = sigmoid(a[j]);
                    let f_ = sigmoid(a[hidden + j]);
                    let g_ = a[2 * hidden + j].tanh();
                    let o_ = sigmoid(a[3 * hidden + j]);
                    gate[j] = i_;
                    gate[hidden + j] = f_;
                    gate[2 * hidden + j] = g_;
                    gate[3 * hidden + j] = o_;
                    let c_prev = prev_r.map_or(0.0, |pr| cells[pr * hidden + j]);
                    let c = f_ * c_prev + i_ * g_;
                    let tc = c.tanh();
                    cells[r * hidden + j] = c;
                    cell_tanh[r * hidden + j] = tc;
                    let h = o_ * tc;
                    out[r * hidden + j] = h;
                    h_prev[bi * hidden + j] = h;
                }
            }
        }

        let value = Tensor::new(vec![batch, steps, hidden], out).expect("lstm shape");
        let needs =
            self.needs(input) || self.needs(w_ih) || self.needs(w_hh) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Lstm {
                input,
                w_ih,
                w_hh,
                bias,
                cache: LstmCache {
                    reverse,
                    batch,
                    steps,
                    hidden,
                    gates,
                    cells,
                    cell_tanh,
                },
            },
            needs,
        ))
    }

    /// Bidirectional LSTM: forward and reverse directions concatenated along
    /// depth, giving `[B, T, H_fwd + H_bwd]`.
    pub fn bilstm(
        &mut self,
        input: Var,
        forward: LstmParams,
        backward: LstmParams,
    ) -> Result<Var, TensorError> {
        let f = self.lstm(input, forward, false)?;
        let b = self.lstm(input, backward, true)?;
        self.concat_last(f, b)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward(
    tape: &Tape,
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    out: &[f64],
    input: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    cache: &LstmCache,
) {
    let nodes = &tape.nodes;
    let LstmCache {
        reverse,
        batch,
        steps,
        hidden,
        ref gates,
        ref cells,
        ref cell_tanh,
    } = *cache;
    let g4 = 4 * hidden;
    let rows = batch * steps;
    let whh = nodes[w_hh.0].value.data();

    let mut dpre = vec![0.0; rows * g4];
    let mut dh_rec = vec![0.0; batch * hidden];
    let mut dc_next = vec![0.0; batch * hidden];
    let mut step_d = vec![0.0; batch * g4];
    let mut h_prev = vec![0.0; batch * hidden];
    let mut dwhh = if nodes[w_hh.0].needs_grad {
        Some(vec![0.0; g4 * hidden])
    } else {
        None
    };

    for step in (0..steps).rev() {
        let t = if reverse { steps - 1 - step } else { step };
        let tp = (step > 0).then(|| if reverse { t + 1 } else { t - 1 });
        for bi in 0..batch {
            let r = bi * steps + t;
            let gate = &gates[r * g4..(r + 1) * g4];
            let d = &mut step_d[bi * g4..(bi + 1) * g4];
            for j in 0..hidden {
                let (i_, f_, g_, o_) = (
                    gate[j],
                    gate[hidden + j],
                    gate[2 * hidden + j],
                    gate[3 * hidden + j],
                );
                let tc = cell_tanh[r * hidden + j];
                let dh = g[r * hidden + j] + dh_rec[bi * hidden + j];
                let dc = dc_next[bi * hidden + j] + dh * o_ * (1.0 - tc * tc);
                let c_prev = tp.map_or(0.0, |tp| cells[(bi * steps + tp) * hidden + j]);
                d[j] = dc * g_ * i_ * (1.0 - i_);
                d[hidden + j] = dc * c_prev * f_ * (1.0 - f_);
                d[2 * hidden + j] = dc * i_ * (1.0 - g_ * g_);
                d[3 * hidden + j] = dh * tc * o_ * (1.0 - o_);
                dc_next[bi * hidden + j] = dc * f_;
            }
            dpre[r * g4..(r + 1) * g4].copy_from_slice(d);
        }
        match tp {
            Some(tp) => {
                gemm(
                    1.0,
                    Mat::new(&step_d, batch, g4),
                    Mat::new(whh, g4, hidden),
                    0.0,
                    &mut dh_rec,
                );
                if let Some(dw) = dwhh.as_mut() {
                    for bi in 0..batch {
                        let pr = bi * steps + tp;
                        h_prev[bi * hidden..(bi + 1) * hidden]
                            .copy_from_slice(&out[pr * hidden..(pr + 1) * hidden]);
                    }
                    gemm(
                        1.0,
                        Mat::t(&step_d, g4, batch),
                        Mat::new(&h_prev, batch, hidden),
                        1.0,
                        dw,
                    );
                }
            }
            None => dh_rec.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    if let Some(dw) = dwhh {
        acc(grads, nodes, w_hh, |d| {
            d.iter_mut().zip(&dw).for_each(|(d, v)| *d += v)
        });
    }
    if nodes[bias.0].needs_grad {
        acc(grads, nodes, bias, |d| {
            for row in dpre.chunks(g4) {
                d.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        });
    }
    let x = nodes[input.0].value.data();
    let d_in = nodes[input.0].value.shape()[2];
    if nodes[w_ih.0].needs_grad {
        acc(grads, nodes, w_ih, |d| {
            gemm(
                1.0,
                Mat::t(&dpre, g4, rows),
                Mat::new(x, rows, d_in),
                1.0,
                d,
            )
        });
    }
    if nodes[input.0].needs_grad {
        let wih = nodes[w_ih.0].value.data();
        acc(grads, nodes, input, |d| {
            gemm(
                1.0,
                Mat::new(&dpre, rows, g4),
                Mat::new(wih, g4, d_in),
                1.0,
                d,
            )
        });
    }
}
