use super::gemm::gemm;
use super::{xavier_limit, Param, Parameterized, SeededRng};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y[t] = x[t] . W + b` with `W: in x out`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::dim("linear weight rank", &[2], &[w.shape().len()]));
    }
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.expect_cols(cin, "linear input")?;
    b.expect_shape(&[cout], "linear bias")?;
    let t = x.rows();
    let mut y = Tensor::zeros(&[t, cout]);
    for r in 0..t {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm(t, cin, cout, x.data(), false, w.data(), false, y.data_mut(), true);
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Tensor,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut SeededRng) -> Self {
        Linear {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[input, output],
                xavier_limit(input, output),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let y = linear_forward(x, &self.weight.value, &self.bias.value)?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Tensor) -> Tensor {
        let x = &cache.input;
        let (t, cin, cout) = (x.rows(), self.input_dim(), self.output_dim());
        gemm(cin, t, cout, x.data(), true, dy.data(), false, self.weight.grad.data_mut(), true);
        let db = self.bias.grad.data_mut();
        for r in 0..t {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[t, cin]);
        gemm(t, cout, cin, dy.data(), false, self.weight.value.data(), true, dx.data_mut(), false);
        dx
    }
}

impl Parameterized for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_passes_input_through() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]);
        let w = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn hand_computed_sum_with_bias() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]);
        let w = Tensor::from_rows(&[[1.0], [1.0]]);
        let b = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shape_mismatch_reports_expected_and_actual() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[2, 4]);
        let b = Tensor::zeros(&[4]);
        match linear_forward(&x, &w, &b) {
            Err(Error::Dimension { expected, actual, .. }) => {
                assert_eq!(expected, vec![2, 2]);
                assert_eq!(actual, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn homogeneous_without_bias() {
        use rand::SeedableRng;
        let mut rng = SeededRng::seed_from_u64(3);
        let lin = Linear::new("l", 4, 3, &mut rng);
        let x = Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.5], [1.5, 0.1, -0.2, 0.0]]);
        let (y, _) = lin.forward(&x).unwrap();
        let (y2, _) = lin.forward(&x.map(|v| 2.5 * v)).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }
}
