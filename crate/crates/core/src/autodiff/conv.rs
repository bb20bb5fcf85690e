//! Convolution, max-pooling, tiling and the height-collapse reshape.

use super::gemm::{gemm, Mat};
use super::{acc, Op, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent and leading pad along one axis.
pub fn conv_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
        Padding::Same => {
            if input == 0 {
                return None;
            }
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let out = &mut cols[row * p..(row + 1) * p];
                for y in 0..g.out_h {
                    let iy = (y * g.sh + i) as isize - g.pad_top as isize;
                    let seg = &mut out[y * g.out_w..(y + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.in_h {
                        seg.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (x, v) in seg.iter_mut().enumerate() {
                        let ix = (x * g.sw + j) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix as usize >= g.in_w {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for y in 0..g.out_h {
                    let iy = (y * g.sh + i) as isize - g.pad_top as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for x in 0..g.out_w {
                        let ix = (x * g.sw + j) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[y * g.out_w + x];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-D cross-correlation. `input` is `[B, D, H, W]`, `kernel` is
    /// `[D_out, D, kh, kw]`, `bias` is `[D_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d expects 4-D input and kernel, got {:?} and {:?}",
                xs, ks
            )));
        }
        if xs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d depth: input {:?}, kernel {:?}",
                xs, ks
            )));
        }
        if self.shape(bias) != [ks[0]] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias {:?} for {} output channels",
                self.shape(bias),
                ks[0]
            )));
        }
        let (out_h, pad_top) = conv_extent(xs[2], ks[2], stride.0, padding).ok_or_else(|| {
            TensorError::EmptyOutput(format!("conv2d height {} with kernel {}", xs[2], ks[2]))
        })?;
        let (out_w, pad_left) = conv_extent(xs[3], ks[3], stride.1, padding).ok_or_else(|| {
            TensorError::EmptyOutput(format!("conv2d width {} with kernel {}", xs[3], ks[3]))
        })?;
        let geom = ConvGeometry {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ks[0],
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
            pad_top,
            pad_left,
            out_h,
            out_w,
        };
        let (r, p) = (geom.rows(), geom.positions());
        let in_item = geom.in_c * geom.in_h * geom.in_w;
        let out_item = geom.out_c * p;
        let mut cols = vec![0.0; geom.batch * r * p];
        let mut out = vec![0.0; geom.batch * out_item];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let b = self.value(bias).data();
            for bi in 0..geom.batch {
                let col = &mut cols[bi * r * p..(bi + 1) * r * p];
                im2col(&x[bi * in_item..(bi + 1) * in_item], &geom, col);
                let o = &mut out[bi * out_item..(bi + 1) * out_item];
                for (c, row) in o.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = b[c]);
                }
                gemm(1.0, Mat::new(k, geom.out_c, r), Mat::new(col, r, p), 1.0, o);
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.out_c, out_h, out_w], out)
            .expect("conv output shape");
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            needs,
        ))
    }

    /// Valid max-pooling over `window` with `stride`. Gradients route to the
    /// first maximum in row-major window order (lowest linear index).
    pub fn max_pool(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "max_pool expects 4-D input, got {:?}",
                s
            )));
        }
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, _) = conv_extent(h, window.0, stride.0, Padding::Valid).ok_or_else(|| {
            TensorError::EmptyOutput(format!("max_pool height {h} with window {}", window.0))
        })?;
        let (ow, _) = conv_extent(w, window.1, stride.1, Padding::Valid).ok_or_else(|| {
            TensorError::EmptyOutput(format!("max_pool width {w} with window {}", window.1))
        })?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * d * oh * ow);
        let mut argmax = Vec::with_capacity(b * d * oh * ow);
        for plane in 0..b * d {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + (y * stride.0) * w + xo * stride.1;
                    for i in 0..window.0 {
                        for j in 0..window.1 {
                            let idx = base + (y * stride.0 + i) * w + xo * stride.1 + j;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, d, oh, ow], out).expect("pool shape");
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, needs))
    }

    /// Space-to-depth tiling: each `fh × fw` block of a channel becomes
    /// `fh·fw` channels (channel `c·fh·fw + dy·fw + dx`). Trailing rows or
    /// columns that do not fill a block are dropped.
    pub fn tile(&mut self, input: Var, factor: (usize, usize)) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "tile expects 4-D input, got {:?}",
                s
            )));
        }
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let (fh, fw) = factor;
        let (oh, ow) = (h / fh, w / fw);
        if oh == 0 || ow == 0 {
            return Err(TensorError::EmptyOutput(format!(
                "tiling {h}×{w} by {fh}×{fw}"
            )));
        }
        let x = self.value(input).data();
        let od = d * fh * fw;
        let mut out = vec![0.0; b * od * oh * ow];
        for bi in 0..b {
            for c in 0..d {
                for dy in 0..fh {
                    for dx in 0..fw {
                        let oc = c * fh * fw + dy * fw + dx;
                        for y in 0..oh {
                            let src = ((bi * d + c) * h + y * fh + dy) * w;
                            let dst = ((bi * od + oc) * oh + y) * ow;
                            for xo in 0..ow {
                                out[dst + xo] = x[src + xo * fw + dx];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, od, oh, ow], out).expect("tile shape");
        let needs = self.needs(input);
        Ok(self.push(value, Op::Tile { input, factor }, needs))
    }

    /// `[B, D, 1, W]` feature map to a `[B, W, D]` frame sequence.
    pub fn to_sequence(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "to_sequence expects [B, D, 1, W], got {:?}",
                s
            )));
        }
        let (b, d, w) = (s[0], s[1], s[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0; b * w * d];
        for bi in 0..b {
            for c in 0..d {
                for t in 0..w {
                    out[(bi * w + t) * d + c] = x[(bi * d + c) * w + t];
                }
            }
        }
        let value = Tensor::new(vec![b, w, d], out).expect("sequence shape");
        let needs = self.needs(input);
        Ok(self.push(value, Op::ToSequence(input), needs))
    }
}

pub(crate) fn untile_add(shape: &[usize], factor: (usize, usize), g: &[f64], dx: &mut [f64]) {
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (fh, fw) = factor;
    let (oh, ow) = (h / fh, w / fw);
    let od = d * fh * fw;
    for bi in 0..b {
        for c in 0..d {
            for dy in 0..fh {
                for dx_ in 0..fw {
                    let oc = c * fh * fw + dy * fw + dx_;
                    for y in 0..oh {
                        let dst = ((bi * d + c) * h + y * fh + dy) * w;
                        let src = ((bi * od + oc) * oh + y) * ow;
                        for xo in 0..ow {
                            dx[dst + xo * fw + dx_] += g[src + xo];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    tape: &Tape,
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    input: Var,
    kernel: Var,
    bias: Var,
    geom: &ConvGeometry,
    cols: &[f64],
) {
    let nodes = &tape.nodes;
    let (r, p) = (geom.rows(), geom.positions());
    let in_item = geom.in_c * geom.in_h * geom.in_w;
    let out_item = geom.out_c * p;
    if nodes[bias.0].needs_grad {
        acc(grads, nodes, bias, |d| {
            for bi in 0..geom.batch {
                for (c, row) in g[bi * out_item..(bi + 1) * out_item].chunks(p).enumerate() {
                    d[c] += row.iter().sum::<f64>();
                }
            }
        });
    }
    if nodes[kernel.0].needs_grad {
        acc(grads, nodes, kernel, |d| {
            for bi in 0..geom.batch {
                gemm(
                    1.0,
                    Mat::new(&g[bi * out_item..(bi + 1) * out_item], geom.out_c, p),
                    Mat::t(&cols[bi * r * p..(bi + 1) * r * p], p, r),
                    1.0,
                    d,
                );
            }
        });
    }
    if nodes[input.0].needs_grad {
        let k = nodes[kernel.0].value.data();
        let mut dcol = vec![0.0; r * p];
        acc(grads, nodes, input, |d| {
            for bi in 0..geom.batch {
                gemm(
                    1.0,
                    Mat::t(k, r, geom.out_c),
                    Mat::new(&g[bi * out_item..(bi + 1) * out_item], geom.out_c, p),
                    0.0,
                    &mut dcol,
                );
                col2im_add(&dcol, geom, &mut d[bi * in_item..(bi + 1) * in_item]);
            }
        });
    }
}
