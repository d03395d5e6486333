use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride-1 max pooling over `[t, t + width - 1]`, right-padded with negative infinity so the
/// output keeps the input length.
pub fn maxpool1d_same(x: &Tensor, width: usize) -> Result<Tensor> {
    Ok(MaxPool1d::new(width)?.forward(x).0)
}

#[derive(Debug, Clone, Copy)]
pub struct MaxPool1d {
    width: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    /// Source row of the maximum for every output element.
    argmax: Vec<usize>,
    cols: usize,
}

impl MaxPool1d {
    pub fn new(width: usize) -> Result<Self> {
        if width < 1 {
            return Err(Error::Config("pooling width must be at least 1".into()));
        }
        Ok(MaxPool1d { width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, PoolCache) {
        let (t, c) = (x.rows(), x.cols());
        let mut y = Tensor::zeros(&[t, c]);
        let mut argmax = vec![0; t * c];
        for r in 0..t {
            let end = (r + self.width).min(t);
            for ch in 0..c {
                let mut best = r;
                let mut value = x.get(r, ch);
                for s in r + 1..end {
                    let v = x.get(s, ch);
                    if v > value {
                        value = v;
                        best = s;
                    }
                }
                y.set(r, ch, value);
                argmax[r * c + ch] = best;
            }
        }
        (y, PoolCache { argmax, cols: c })
    }

    pub fn backward(&self, cache: &PoolCache, dy: &Tensor) -> Tensor {
        let c = cache.cols;
        let t = dy.rows();
        let mut dx = Tensor::zeros(&[t, c]);
        for r in 0..t {
            for ch in 0..c {
                let src = cache.argmax[r * c + ch];
                let g = dy.get(r, ch);
                let d = dx.get(src, ch);
                dx.set(src, ch, d + g);
            }
        }
        dx
    }
}
