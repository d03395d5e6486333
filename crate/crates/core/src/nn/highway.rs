use super::linear::{Linear, LinearCache};
use super::{relu_backward, relu_inplace, sigmoid, Param, Parameterized, SeededRng};
use crate::error::Result;
use crate::tensor::Tensor;

/// Initial transform-gate bias; negative values start the layer close to a carry.
pub const GATE_BIAS_INIT: f64 = -1.0;

/// `y = T * relu(x Wh + bh) + (1 - T) * x` with `T = sigmoid(x Wt + bt)`.
#[derive(Debug, Clone)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
}

#[derive(Debug, Clone)]
pub struct HighwayCache {
    input: Tensor,
    transform: LinearCache,
    gate: LinearCache,
    h: Tensor,
    t: Tensor,
}

impl Highway {
    pub fn new(name: &str, dim: usize, rng: &mut SeededRng) -> Self {
        let transform = Linear::new(&format!("{name}.transform"), dim, dim, rng);
        let mut gate = Linear::new(&format!("{name}.gate"), dim, dim, rng);
        gate.bias.value.fill(GATE_BIAS_INIT);
        Highway { transform, gate }
    }

    pub fn dim(&self) -> usize {
        self.transform.input_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, HighwayCache)> {
        let (mut h, tc) = self.transform.forward(x)?;
        relu_inplace(&mut h);
        let (mut t, gc) = self.gate.forward(x)?;
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut y = x.clone();
        for ((yv, &hv), &tv) in y.data_mut().iter_mut().zip(h.data()).zip(t.data()) {
            *yv = tv * hv + (1.0 - tv) * *yv;
        }
        Ok((
            y,
            HighwayCache {
                input: x.clone(),
                transform: tc,
                gate: gc,
                h,
                t,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HighwayCache, dy: &Tensor) -> Tensor {
        let mut dh = dy.clone();
        let mut dt = dy.clone();
        let mut dx = dy.clone();
        let it = cache.h.data().iter().zip(cache.t.data()).zip(cache.input.data());
        for (i, ((&h, &t), &x)) in it.enumerate() {
            let g = dy.data()[i];
            dh.data_mut()[i] = g * t;
            dt.data_mut()[i] = g * (h - x) * t * (1.0 - t);
            dx.data_mut()[i] = g * (1.0 - t);
        }
        let dh = relu_backward(&cache.h, &dh);
        dx.add_assign(&self.transform.backward(&cache.transform, &dh));
        dx.add_assign(&self.gate.backward(&cache.gate, &dt));
        dx
    }
}

impl Parameterized for Highway {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.transform.visit(f);
        self.gate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.transform.visit_mut(f);
        self.gate.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Tensor {
        Tensor::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]])
    }

    #[test]
    fn closed_gate_carries_input() {
        let mut rng = SeededRng::seed_from_u64(5);
        let mut hw = Highway::new("hw", 3, &mut rng);
        hw.gate.bias.value.fill(-1e6);
        let (y, _) = hw.forward(&sample()).unwrap();
        assert_eq!(y, sample());
    }

    #[test]
    fn open_gate_outputs_transform_branch() {
        let mut rng = SeededRng::seed_from_u64(5);
        let mut hw = Highway::new("hw", 3, &mut rng);
        hw.gate.bias.value.fill(1e6);
        let (y, _) = hw.forward(&sample()).unwrap();
        let (mut h, _) = hw.transform.forward(&sample()).unwrap();
        relu_inplace(&mut h);
        assert_eq!(y, h);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = SeededRng::seed_from_u64(5);
        let hw = Highway::new("hw", 3, &mut rng);
        assert!(hw.forward(&Tensor::zeros(&[2, 4])).is_err());
    }
}
