//! Non-causal 1-D convolution with "same" zero padding.
//!
//! For width `w` the window for output frame `t` is `[t - (w-1)/2, t + w/2]`, so even widths
//! put the extra tap on the right.

use super::gemm::gemm;
use super::{Param, Parameterized, SeededRng};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn left_pad(width: usize) -> usize {
    (width - 1) / 2
}

/// Unfolds `x: T x C` into `T x (width * C)` windows, tap-major.
fn im2col(x: &Tensor, width: usize) -> Tensor {
    let (t, c) = (x.rows(), x.cols());
    let left = left_pad(width) as isize;
    let mut cols = Tensor::zeros(&[t, width * c]);
    for r in 0..t {
        let dst = cols.row_mut(r);
        for j in 0..width {
            let src = r as isize - left + j as isize;
            if src >= 0 && (src as usize) < t {
                dst[j * c..(j + 1) * c].copy_from_slice(x.row(src as usize));
            }
        }
    }
    cols
}

fn col2im(dcols: &Tensor, width: usize, c: usize) -> Tensor {
    let t = dcols.rows();
    let left = left_pad(width) as isize;
    let mut dx = Tensor::zeros(&[t, c]);
    for r in 0..t {
        let src = dcols.row(r);
        for j in 0..width {
            let dst = r as isize - left + j as isize;
            if dst >= 0 && (dst as usize) < t {
                for (d, s) in dx.row_mut(dst as usize).iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *d += s;
                }
            }
        }
    }
    dx
}

/// Convolves `x: T x Cin` with `kernel: width x Cin x Cout` and adds `bias: Cout`.
pub fn conv1d_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (y, _) = conv_with_cols(x, kernel, bias)?;
    Ok(y)
}

fn conv_with_cols(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
    if kernel.shape().len() != 3 {
        return Err(Error::dim("conv kernel rank", &[3], &[kernel.shape().len()]));
    }
    let (width, cin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if width < 1 {
        return Err(Error::Config("convolution width must be at least 1".into()));
    }
    x.expect_cols(cin, "conv1d input")?;
    bias.expect_shape(&[cout], "conv1d bias")?;
    let t = x.rows();
    let cols = im2col(x, width);
    let mut y = Tensor::zeros(&[t, cout]);
    for r in 0..t {
        y.row_mut(r).copy_from_slice(bias.data());
    }
    gemm(t, width * cin, cout, cols.data(), false, kernel.data(), false, y.data_mut(), true);
    Ok((y, cols))
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Param,
    /// Absent when a batch norm follows (its shift would be cancelled by the normalization).
    pub bias: Option<Param>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Tensor,
}

impl Conv1d {
    pub fn new(name: &str, width: usize, input: usize, output: usize, rng: &mut SeededRng) -> Result<Self> {
        if width < 1 {
            return Err(Error::Config(format!("{name}: convolution width must be at least 1")));
        }
        let limit = (6.0 / (width * input + output) as f64).sqrt();
        Ok(Conv1d {
            weight: Param::uniform(format!("{name}.weight"), &[width, input, output], limit, rng),
            bias: Some(Param::zeros(format!("{name}.bias"), &[output])),
        })
    }

    pub fn without_bias(name: &str, width: usize, input: usize, output: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut conv = Conv1d::new(name, width, input, output, rng)?;
        conv.bias = None;
        Ok(conv)
    }

    pub fn width(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let zero;
        let bias = match &self.bias {
            Some(b) => &b.value,
            None => {
                zero = Tensor::zeros(&[self.output_dim()]);
                &zero
            }
        };
        let (y, cols) = conv_with_cols(x, &self.weight.value, bias)?;
        Ok((y, ConvCache { cols }))
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor) -> Tensor {
        let (w, cin, cout) = (self.width(), self.input_dim(), self.output_dim());
        let t = dy.rows();
        let k = w * cin;
        gemm(k, t, cout, cache.cols.data(), true, dy.data(), false, self.weight.grad.data_mut(), true);
        if let Some(bias) = &mut self.bias {
            let db = bias.grad.data_mut();
            for r in 0..t {
                for (g, d) in db.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        let mut dcols = Tensor::zeros(&[t, k]);
        gemm(t, cout, k, dy.data(), false, self.weight.value.data(), true, dcols.data_mut(), false);
        col2im(&dcols, w, cin)
    }
}

impl Parameterized for Conv1d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
