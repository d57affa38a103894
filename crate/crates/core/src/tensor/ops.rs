use super::Tensor;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    LeakyRelu,
    Add,
    Mul,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Sigmoid | Elementwise::Tanh | Elementwise::LeakyRelu => 1,
            Elementwise::Add | Elementwise::Mul => 2,
        }
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Pointwise application of `op` to tensors of identical shape.
pub fn elementwise(op: Elementwise, args: &[&Tensor]) -> Result<Tensor> {
    if args.len() != op.arity() {
        return Err(Error::contract(format!(
            "{op:?} takes {} argument(s), got {}",
            op.arity(),
            args.len()
        )));
    }
    match op {
        Elementwise::Sigmoid => Ok(args[0].map(sigmoid_scalar)),
        Elementwise::Tanh => Ok(args[0].map(f64::tanh)),
        Elementwise::LeakyRelu => Ok(args[0].map(leaky_relu_scalar)),
        Elementwise::Add => zip(args[0], args[1], |a, b| a + b),
        Elementwise::Mul => zip(args[0], args[1], |a, b| a * b),
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(leaky_relu_scalar)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, |x, y| x * y)
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "elementwise operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Output spatial size of a convolution along one axis.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.chw()?;
        let (c_out, kc, kh, kw) = match kernels.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(format!(
                    "kernels must be [C_out,C_in,kh,kw], got {:?}",
                    kernels.shape()
                )))
            }
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "input has {c_in} channels but kernels expect {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("stride must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!("kernel {kh}x{kw} is not odd")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh: conv_output_size(h, kh, stride, padding),
            ow: conv_output_size(w, kw, stride, padding),
            stride,
            pad: padding,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn valid_range(&self, k: usize, out: usize, size: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= size-1
        let hi_num = size as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Direct 2-D cross-correlation of a `[C_in,H,W]` input with
/// `[C_out,C_in,kh,kw]` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernels, stride, padding)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        let out_c = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &x_c[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_c[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let base = kx as isize - g.pad as isize;
                            for ox in ox0..ox1 {
                                row_out[ox] += wv * row_in[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernels, stride, padding)?;
    let k = kernels.data();
    let go = grad_out.data();
    let mut gin = vec![0.0; g.c_in * g.h * g.w];
    for co in 0..g.c_out {
        let go_c = &go[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let gin_c = &mut gin[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_go = &go_c[oy * g.ow..(oy + 1) * g.ow];
                        let row_in = &mut gin_c[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            row_in[ox * g.stride + kx - g.pad] += wv * row_go[ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_in, g.h, g.w], gin)
}

/// Gradient of `conv2d` with respect to its kernels.
pub fn conv2d_grad_kernels(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernels, stride, padding)?;
    let x = input.data();
    let go = grad_out.data();
    let mut gk = vec![0.0; kernels.len()];
    for co in 0..g.c_out {
        let go_c = &go[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_go = &go_c[oy * g.ow..(oy + 1) * g.ow];
                        let row_in = &x_c[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            acc += row_go[ox] * row_in[ox * g.stride + kx - g.pad];
                        }
                    }
                    gk[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(kernels.shape().to_vec(), gk)
}

/// Adds a per-channel bias `[C]` to a `[C,H,W]` map.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if bias.shape() != [c] {
        return Err(Error::shape(format!(
            "bias {:?} does not match {c} channels",
            bias.shape()
        )));
    }
    let mut out = x.clone();
    let hw = h * w;
    for (ch, b) in bias.data().iter().enumerate() {
        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
            *v += b;
        }
    }
    Ok(out)
}

/// Sums a `[C,H,W]` map over its spatial axes.
pub fn channel_sums(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let sums = (0..c)
        .map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().sum())
        .collect();
    Tensor::new(vec![c], sums)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c1, h1, w1) = a.chw()?;
    let (c2, h2, w2) = b.chw()?;
    if (h1, w1) != (h2, w2) {
        return Err(Error::shape(format!(
            "cannot concat {h1}x{w1} with {h2}x{w2} maps"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![c1 + c2, h1, w1], data)
}

/// Channels `[start, end)` of a `[C,H,W]` map.
pub fn slice_channels(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if start > end || end > c {
        return Err(Error::shape(format!(
            "channel slice {start}..{end} out of range for {c} channels"
        )));
    }
    let hw = h * w;
    Tensor::new(vec![end - start, h, w], x.data()[start * hw..end * hw].to_vec())
}
