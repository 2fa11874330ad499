//! Forward and backward kernels for each layer kind.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use super::NnetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Flatten,
    LogSoftmax,
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    /// Shapes of `[weight, bias]`, empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::Linear { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => Vec::new(),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Linear { inputs, .. } => inputs,
            _ => 0,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), NnetError> {
        let bad = |msg: &str| Err(NnetError::InvalidLayer(format!("{self:?}: {msg}")));
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 => {
                bad("sizes must be positive")
            }
            LayerSpec::MaxPool { kernel, stride } if kernel == 0 || stride == 0 => {
                bad("sizes must be positive")
            }
            LayerSpec::Linear { inputs, outputs } if inputs == 0 || outputs == 0 => {
                bad("sizes must be positive")
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad("rate must lie in [0, 1)")
            }
            _ => Ok(()),
        }
    }

    /// Output shape for a given input shape (including the batch axis).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnetError> {
        let mismatch = |what: &str| {
            Err(NnetError::ShapeMismatch(format!(
                "{self:?} cannot take input {input:?}: {what}"
            )))
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 4 || input[1] != in_ch {
                    return mismatch("expected [B, in_ch, H, W]");
                }
                let (h, w) = (input[2] + 2 * pad, input[3] + 2 * pad);
                if h < kernel || w < kernel {
                    return mismatch("kernel larger than padded input");
                }
                Ok(vec![
                    input[0],
                    out_ch,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool { kernel, stride } => {
                if input.len() != 4 || input[2] < kernel || input[3] < kernel {
                    return mismatch("expected [B, C, H, W] with H, W >= kernel");
                }
                Ok(vec![
                    input[0],
                    input[1],
                    (input[2] - kernel) / stride + 1,
                    (input[3] - kernel) / stride + 1,
                ])
            }
            LayerSpec::Linear { inputs, outputs } => {
                if input.len() != 2 || input[1] != inputs {
                    return mismatch("expected [B, inputs]");
                }
                Ok(vec![input[0], outputs])
            }
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return mismatch("empty shape");
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::LogSoftmax => {
                if input.len() != 2 {
                    return mismatch("expected [B, classes]");
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        }
    }
}

/// Values a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Conv { cols: Vec<f64>, input_shape: Vec<usize> },
    Relu { output: Tensor },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Linear { input: Tensor },
    Flatten { input_shape: Vec<usize> },
    LogSoftmax { output: Tensor },
    Dropout { mask: Option<Vec<f64>> },
}

pub(crate) struct LayerOutput {
    pub output: Tensor,
    pub cache: Cache,
}

/// `rng` is `Some` in training mode.
pub(crate) fn forward(
    spec: &LayerSpec,
    params: &[Tensor],
    input: Tensor,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<LayerOutput, NnetError> {
    let out_shape = spec.output_shape(input.shape())?;
    match *spec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => {
            let geo = ConvGeometry::new(input.shape(), &out_shape, in_ch, kernel, stride, pad);
            let cols = im2col(input.data(), &geo);
            let (b, l) = (geo.batch, geo.out_h * geo.out_w);
            let ckk = in_ch * kernel * kernel;
            let mut mat = vec![0.0; out_ch * b * l];
            gemm(out_ch, ckk, b * l, params[0].data(), false, &cols, false, 0.0, &mut mat);
            let bias = params[1].data();
            let mut out = vec![0.0; b * out_ch * l];
            for oc in 0..out_ch {
                for bi in 0..b {
                    let src = &mat[oc * b * l + bi * l..oc * b * l + (bi + 1) * l];
                    let dst = &mut out[(bi * out_ch + oc) * l..(bi * out_ch + oc + 1) * l];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bias[oc];
                    }
                }
            }
            Ok(LayerOutput {
                output: Tensor::new(out_shape, out)?,
                cache: Cache::Conv {
                    cols,
                    input_shape: input.shape().to_vec(),
                },
            })
        }
        LayerSpec::Relu => {
            let mut out = input;
            out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            Ok(LayerOutput {
                cache: Cache::Relu { output: out.clone() },
                output: out,
            })
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let s = input.shape();
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let x = input.data();
            let mut out = Vec::with_capacity(b * c * oh * ow);
            let mut argmax = Vec::with_capacity(b * c * oh * ow);
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = base + oy * stride * w + ox * stride;
                        for ky in 0..kernel {
                            let row = base + (oy * stride + ky) * w + ox * stride;
                            for kx in 0..kernel {
                                if x[row + kx] > best {
                                    best = x[row + kx];
                                    best_i = row + kx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
            Ok(LayerOutput {
                output: Tensor::new(out_shape, out)?,
                cache: Cache::MaxPool {
                    argmax,
                    input_shape: input.shape().to_vec(),
                },
            })
        }
        LayerSpec::Linear { inputs, outputs } => {
            let b = input.batch();
            let mut out = vec![0.0; b * outputs];
            for row in out.chunks_exact_mut(outputs) {
                row.copy_from_slice(params[1].data());
            }
            gemm(b, inputs, outputs, input.data(), false, params[0].data(), true, 1.0, &mut out);
            Ok(LayerOutput {
                output: Tensor::new(out_shape, out)?,
                cache: Cache::Linear { input },
            })
        }
        LayerSpec::Flatten => {
            let input_shape = input.shape().to_vec();
            Ok(LayerOutput {
                output: input.reshaped(out_shape)?,
                cache: Cache::Flatten { input_shape },
            })
        }
        LayerSpec::LogSoftmax => {
            let mut out = input;
            let n = out.shape()[1];
            for row in out.data_mut().chunks_exact_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Ok(LayerOutput {
                cache: Cache::LogSoftmax { output: out.clone() },
                output: out,
            })
        }
        LayerSpec::Dropout { rate } => match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..input.len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut out = input;
                out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                Ok(LayerOutput {
                    output: out,
                    cache: Cache::Dropout { mask: Some(mask) },
                })
            }
            _ => Ok(LayerOutput {
                output: input,
                cache: Cache::Dropout { mask: None },
            }),
        },
    }
}

/// Returns the input gradient and the parameter gradients.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: &[Tensor],
    cache: &Cache,
    grad_out: Tensor,
) -> Result<(Tensor, Vec<Tensor>), NnetError> {
    match (*spec, cache) {
        (
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            },
            Cache::Conv { cols, input_shape },
        ) => {
            let out_shape = spec.output_shape(input_shape)?;
            check_grad_shape(grad_out.shape(), &out_shape)?;
            let geo = ConvGeometry::new(input_shape, &out_shape, in_ch, kernel, stride, pad);
            let (b, l) = (geo.batch, geo.out_h * geo.out_w);
            let ckk = in_ch * kernel * kernel;
            // [B, OC, L] -> [OC, B·L]
            let g = grad_out.data();
            let mut gm = vec![0.0; out_ch * b * l];
            for bi in 0..b {
                for oc in 0..out_ch {
                    gm[oc * b * l + bi * l..oc * b * l + (bi + 1) * l]
                        .copy_from_slice(&g[(bi * out_ch + oc) * l..(bi * out_ch + oc + 1) * l]);
                }
            }
            let mut dw = vec![0.0; out_ch * ckk];
            gemm(out_ch, b * l, ckk, &gm, false, cols, true, 0.0, &mut dw);
            let db: Vec<f64> = gm.chunks_exact(b * l).map(|r| r.iter().sum()).collect();
            let mut dcols = vec![0.0; ckk * b * l];
            gemm(ckk, out_ch, b * l, params[0].data(), true, &gm, false, 0.0, &mut dcols);
            let dx = col2im(&dcols, &geo);
            Ok((
                Tensor::new(input_shape.clone(), dx)?,
                vec![
                    Tensor::new(params[0].shape().to_vec(), dw)?,
                    Tensor::new(vec![out_ch], db)?,
                ],
            ))
        }
        (LayerSpec::Relu, Cache::Relu { output }) => {
            check_grad_shape(grad_out.shape(), output.shape())?;
            let mut g = grad_out;
            g.data_mut()
                .iter_mut()
                .zip(output.data())
                .for_each(|(gv, &o)| {
                    if o <= 0.0 {
                        *gv = 0.0
                    }
                });
            Ok((g, Vec::new()))
        }
        (LayerSpec::MaxPool { .. }, Cache::MaxPool { argmax, input_shape }) => {
            if grad_out.len() != argmax.len() {
                return Err(NnetError::ShapeMismatch(
                    "max-pool gradient does not match recorded output".into(),
                ));
            }
            let mut dx = vec![0.0; input_shape.iter().product()];
            for (&i, &gv) in argmax.iter().zip(grad_out.data()) {
                dx[i] += gv;
            }
            Ok((Tensor::new(input_shape.clone(), dx)?, Vec::new()))
        }
        (LayerSpec::Linear { inputs, outputs }, Cache::Linear { input }) => {
            let b = input.batch();
            check_grad_shape(grad_out.shape(), &[b, outputs])?;
            let g = grad_out.data();
            let mut dw = vec![0.0; outputs * inputs];
            gemm(outputs, b, inputs, g, true, input.data(), false, 0.0, &mut dw);
            let mut db = vec![0.0; outputs];
            for row in g.chunks_exact(outputs) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            let mut dx = vec![0.0; b * inputs];
            gemm(b, outputs, inputs, g, false, params[0].data(), false, 0.0, &mut dx);
            Ok((
                Tensor::new(input.shape().to_vec(), dx)?,
                vec![
                    Tensor::new(vec![outputs, inputs], dw)?,
                    Tensor::new(vec![outputs], db)?,
                ],
            ))
        }
        (LayerSpec::Flatten, Cache::Flatten { input_shape }) => {
            Ok((grad_out.reshaped(input_shape.clone())?, Vec::new()))
        }
        (LayerSpec::LogSoftmax, Cache::LogSoftmax { output }) => {
            check_grad_shape(grad_out.shape(), output.shape())?;
            let n = output.shape()[1];
            let mut g = grad_out;
            for (grow, orow) in g.data_mut().chunks_exact_mut(n).zip(output.data().chunks_exact(n)) {
                let total: f64 = grow.iter().sum();
                grow.iter_mut()
                    .zip(orow)
                    .for_each(|(gv, &o)| *gv -= o.exp() * total);
            }
            Ok((g, Vec::new()))
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
            let mut g = grad_out;
            if let Some(mask) = mask {
                if mask.len() != g.len() {
                    return Err(NnetError::ShapeMismatch(
                        "dropout gradient does not match recorded mask".into(),
                    ));
                }
                g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
            }
            Ok((g, Vec::new()))
        }
        _ => Err(NnetError::NoRecordedForward),
    }
}

fn check_grad_shape(got: &[usize], want: &[usize]) -> Result<(), NnetError> {
    if got != want {
        return Err(NnetError::ShapeMismatch(format!(
            "gradient shape {got:?} does not match layer output {want:?}"
        )));
    }
    Ok(())
}

pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    fn new(
        input: &[usize],
        output: &[usize],
        in_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            batch: input[0],
            in_ch,
            in_h: input[2],
            in_w: input[3],
            out_h: output[2],
            out_w: output[3],
            kernel,
            stride,
            pad,
        }
    }
}

/// Unfolds `[B, C, H, W]` into `[C·k·k, B·OH·OW]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let l = g.out_h * g.out_w;
    let n = g.batch * l;
    let rows = g.in_ch * g.kernel * g.kernel;
    let mut cols = vec![0.0; rows * n];
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[r * n..(r + 1) * n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.in_w..][..g.in_w];
                        let dst = &mut dst_row[b * l + oy * g.out_w..][..g.out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let l = g.out_h * g.out_w;
    let n = g.batch * l;
    let mut x = vec![0.0; g.batch * g.in_ch * g.in_h * g.in_w];
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[r * n..(r + 1) * n];
                for b in 0..g.batch {
                    let base = (b * g.in_ch + c) * g.in_h * g.in_w;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &src_row[b * l + oy * g.out_w..][..g.out_w];
                        let row = base + iy as usize * g.in_w;
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                x[row + ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
