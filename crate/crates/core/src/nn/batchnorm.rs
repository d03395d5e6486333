use super::{Buffer, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over the time axis.
///
/// Train mode normalizes with the population mean/variance of the sequence; the running
/// averages are only touched by [`BatchNorm::commit`], which keeps `forward` free of side
/// effects.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    mode: Mode,
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(&[channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full(&[channels], 1.0),
            },
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let c = self.channels();
        x.expect_cols(c, "batch norm input")?;
        let t = x.rows();
        if t == 0 {
            return Err(Error::EmptySequence("batch norm over zero frames".into()));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..t {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= t as f64);
                let mut var = vec![0.0; c];
                for r in 0..t {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= t as f64);
                (mean, var)
            }
            Mode::Infer => (
                self.running_mean.value.data().to_vec(),
                self.running_var.value.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&[t, c]);
        let mut y = Tensor::zeros(&[t, c]);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in 0..t {
            let xr = x.row(r);
            let hr = xhat.row_mut(r);
            for ch in 0..c {
                hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
            }
            let yr = y.row_mut(r);
            for ch in 0..c {
                yr[ch] = g[ch] * xhat.get(r, ch) + b[ch];
            }
        }
        Ok((
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn commit(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.value.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.value.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let c = self.channels();
        let t = dy.rows();
        let xhat = &cache.xhat;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for r in 0..t {
            for ch in 0..c {
                let d = dy.get(r, ch);
                sum_dy[ch] += d;
                sum_dy_xhat[ch] += d * xhat.get(r, ch);
            }
        }
        for (g, s) in self.gamma.grad.data_mut().iter_mut().zip(&sum_dy_xhat) {
            *g += s;
        }
        for (g, s) in self.beta.grad.data_mut().iter_mut().zip(&sum_dy) {
            *g += s;
        }
        let gamma = self.gamma.value.data();
        let mut dx = Tensor::zeros(&[t, c]);
        match cache.mode {
            Mode::Infer => {
                for r in 0..t {
                    for ch in 0..c {
                        dx.set(r, ch, dy.get(r, ch) * gamma[ch] * cache.inv_std[ch]);
                    }
                }
            }
            Mode::Train => {
                let n = t as f64;
                for r in 0..t {
                    for ch in 0..c {
                        // dxhat = dy * gamma, summed terms scale the same way
                        let dxhat = dy.get(r, ch) * gamma[ch];
                        let v = (n * dxhat
                            - gamma[ch] * sum_dy[ch]
                            - xhat.get(r, ch) * gamma[ch] * sum_dy_xhat[ch])
                            * cache.inv_std[ch]
                            / n;
                        dx.set(r, ch, v);
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
