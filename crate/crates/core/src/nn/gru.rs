//! Gated recurrent units.
//!
//! Gate convention (fixed, checkpoints depend on it):
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! h~ = tanh(x Wh + (r * h) Uh + bh)
//! h' = (1 - z) * h + z * h~
//! ```
//!
//! `W` is stored as `Cin x 3H` and `U` as `H x 3H` with column blocks `[z | r | h]`; the
//! initial state is zero.

use super::gemm::{gemm, mat_vec_t_acc, vec_mat_acc};
use super::{sigmoid, xavier_limit, Param, Parameterized, SeededRng};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone)]
pub struct Gru {
    pub w: Param,
    pub u: Param,
    pub b: Param,
    pub direction: Direction,
}

/// Per-step activations in processing order (time-reversed for backward cells).
#[derive(Debug, Clone)]
pub struct GruCache {
    x: Tensor,
    h_prev: Tensor,
    z: Tensor,
    r: Tensor,
    cand: Tensor,
}

impl Gru {
    pub fn new(name: &str, input: usize, hidden: usize, direction: Direction, rng: &mut SeededRng) -> Self {
        let lim_u = 1.0 / (hidden as f64).sqrt();
        Gru {
            w: Param::uniform(format!("{name}.w"), &[input, 3 * hidden], xavier_limit(input, hidden), rng),
            u: Param::uniform(format!("{name}.u"), &[hidden, 3 * hidden], lim_u, rng),
            b: Param::zeros(format!("{name}.b"), &[3 * hidden]),
            direction,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.u.value.shape()[0]
    }

    /// Returns the hidden state at every step, in input order.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GruCache)> {
        let (cin, h) = (self.input_dim(), self.hidden());
        x.expect_cols(cin, "gru input")?;
        let xs = match self.direction {
            Direction::Forward => x.clone(),
            Direction::Backward => x.reversed_rows(),
        };
        let t = xs.rows();
        let h3 = 3 * h;
        let mut pre = Tensor::zeros(&[t, h3]);
        for r in 0..t {
            pre.row_mut(r).copy_from_slice(self.b.value.data());
        }
        gemm(t, cin, h3, xs.data(), false, self.w.value.data(), false, pre.data_mut(), true);

        let u = self.u.value.data();
        let mut out = Tensor::zeros(&[t, h]);
        let mut h_prev = Tensor::zeros(&[t, h]);
        let mut zs = Tensor::zeros(&[t, h]);
        let mut rs = Tensor::zeros(&[t, h]);
        let mut cand = Tensor::zeros(&[t, h]);
        let mut state = vec![0.0; h];
        let mut acc_zr = vec![0.0; 2 * h];
        let mut acc_h = vec![0.0; h];
        let mut rh = vec![0.0; h];
        for step in 0..t {
            h_prev.row_mut(step).copy_from_slice(&state);
            let p = pre.row(step);
            acc_zr.copy_from_slice(&p[..2 * h]);
            vec_mat_acc(&state, u, h3, 0, &mut acc_zr);
            let z: Vec<f64> = acc_zr[..h].iter().map(|&v| sigmoid(v)).collect();
            let r: Vec<f64> = acc_zr[h..].iter().map(|&v| sigmoid(v)).collect();
            for i in 0..h {
                rh[i] = r[i] * state[i];
            }
            acc_h.copy_from_slice(&p[2 * h..]);
            vec_mat_acc(&rh, u, h3, 2 * h, &mut acc_h);
            let c: Vec<f64> = acc_h.iter().map(|v| v.tanh()).collect();
            for i in 0..h {
                state[i] = (1.0 - z[i]) * state[i] + z[i] * c[i];
            }
            zs.row_mut(step).copy_from_slice(&z);
            rs.row_mut(step).copy_from_slice(&r);
            cand.row_mut(step).copy_from_slice(&c);
            out.row_mut(step).copy_from_slice(&state);
        }
        let out = match self.direction {
            Direction::Forward => out,
            Direction::Backward => out.reversed_rows(),
        };
        Ok((
            out,
            GruCache {
                x: xs,
                h_prev,
                z: zs,
                r: rs,
                cand,
            },
        ))
    }

    pub fn backward(&mut self, cache: &GruCache, dy: &Tensor) -> Tensor {
        let (cin, h) = (self.input_dim(), self.hidden());
        let h3 = 3 * h;
        let dys = match self.direction {
            Direction::Forward => dy.clone(),
            Direction::Backward => dy.reversed_rows(),
        };
        let t = dys.rows();
        let u = self.u.value.data();
        // Pre-activation gradients for every step, blocks [z | r | h].
        let mut da = Tensor::zeros(&[t, h3]);
        let mut dh = vec![0.0; h];
        let mut drh = vec![0.0; h];
        for step in (0..t).rev() {
            for (d, g) in dh.iter_mut().zip(dys.row(step)) {
                *d += g;
            }
            let hp = cache.h_prev.row(step);
            let z = cache.z.row(step);
            let r = cache.r.row(step);
            let c = cache.cand.row(step);
            let row = da.row_mut(step);
            let mut dh_prev = vec![0.0; h];
            for i in 0..h {
                let dz = dh[i] * (c[i] - hp[i]);
                let dc = dh[i] * z[i];
                dh_prev[i] = dh[i] * (1.0 - z[i]);
                row[i] = dz * z[i] * (1.0 - z[i]);
                row[2 * h + i] = dc * (1.0 - c[i] * c[i]);
            }
            drh.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_t_acc(u, h3, 2 * h, &row[2 * h..], &mut drh);
            for i in 0..h {
                let dr = drh[i] * hp[i];
                dh_prev[i] += drh[i] * r[i];
                row[h + i] = dr * r[i] * (1.0 - r[i]);
            }
            mat_vec_t_acc(u, h3, 0, &row[..2 * h], &mut dh_prev);
            dh = dh_prev;
        }

        gemm(cin, t, h3, cache.x.data(), true, da.data(), false, self.w.grad.data_mut(), true);
        // dU[:, z|r] += h_prevᵀ da[:, z|r];  dU[:, h] += (r * h_prev)ᵀ da[:, h]
        let mut rh = cache.h_prev.clone();
        for (v, r) in rh.data_mut().iter_mut().zip(cache.r.data()) {
            *v *= r;
        }
        let da_zr = da.slice_cols(0, 2 * h);
        let da_h = da.slice_cols(2 * h, h);
        let mut du_zr = Tensor::zeros(&[h, 2 * h]);
        gemm(h, t, 2 * h, cache.h_prev.data(), true, da_zr.data(), false, du_zr.data_mut(), false);
        let mut du_h = Tensor::zeros(&[h, h]);
        gemm(h, t, h, rh.data(), true, da_h.data(), false, du_h.data_mut(), false);
        let gu = self.u.grad.data_mut();
        for i in 0..h {
            for j in 0..2 * h {
                gu[i * h3 + j] += du_zr.get(i, j);
            }
            for j in 0..h {
                gu[i * h3 + 2 * h + j] += du_h.get(i, j);
            }
        }
        let gb = self.b.grad.data_mut();
        for step in 0..t {
            for (g, d) in gb.iter_mut().zip(da.row(step)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[t, cin]);
        gemm(t, h3, cin, da.data(), false, self.w.value.data(), true, dx.data_mut(), false);
        match self.direction {
            Direction::Forward => dx,
            Direction::Backward => dx.reversed_rows(),
        }
    }
}

impl Parameterized for Gru {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.u);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.u);
        f(&mut self.b);
    }
}

/// Forward and backward cells over the same input; outputs concatenated `[fwd | bwd]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

#[derive(Debug, Clone)]
pub struct BiGruCache {
    fwd: GruCache,
    bwd: GruCache,
}

impl BiGru {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        BiGru {
            fwd: Gru::new(&format!("{name}.fwd"), input, hidden, Direction::Forward, rng),
            bwd: Gru::new(&format!("{name}.bwd"), input, hidden, Direction::Backward, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BiGruCache)> {
        let (yf, cf) = self.fwd.forward(x)?;
        let (yb, cb) = self.bwd.forward(x)?;
        Ok((Tensor::concat_cols(&[&yf, &yb])?, BiGruCache { fwd: cf, bwd: cb }))
    }

    pub fn backward(&mut self, cache: &BiGruCache, dy: &Tensor) -> Tensor {
        let h = self.hidden();
        let mut dx = self.fwd.backward(&cache.fwd, &dy.slice_cols(0, h));
        dx.add_assign(&self.bwd.backward(&cache.bwd, &dy.slice_cols(h, h)));
        dx
    }
}

impl Parameterized for BiGru {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.fwd.visit(f);
        self.bwd.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fwd.visit_mut(f);
        self.bwd.visit_mut(f);
    }
}

/// Stacked bidirectional layers; layer `i > 0` reads the `2H` output of layer `i - 1`.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub layers: Vec<BiGru>,
}

#[derive(Debug, Clone)]
pub struct GruStackCache {
    layers: Vec<BiGruCache>,
}

impl GruStack {
    pub fn new(name: &str, input: usize, hidden: usize, layers: usize, rng: &mut SeededRng) -> Self {
        let layers = (0..layers)
            .map(|i| {
                let cin = if i == 0 { input } else { 2 * hidden };
                BiGru::new(&format!("{name}.layer{i}"), cin, hidden, rng)
            })
            .collect();
        GruStack { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| 2 * l.hidden())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GruStackCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&cur)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, GruStackCache { layers: caches }))
    }

    pub fn backward(&mut self, cache: &GruStackCache, dy: &Tensor) -> Tensor {
        let mut grad = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            grad = layer.backward(c, &grad);
        }
        grad
    }
}

impl Parameterized for GruStack {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zeroed(direction: Direction) -> Gru {
        let mut rng = SeededRng::seed_from_u64(0);
        let mut g = Gru::new("g", 3, 4, direction, &mut rng);
        g.visit_mut(&mut |p| p.value.fill(0.0));
        g
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let g = zeroed(Direction::Forward);
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
        let (y, cache) = g.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(cache.z.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_step_is_direction_independent() {
        let mut rng = SeededRng::seed_from_u64(9);
        let f = Gru::new("g", 3, 5, Direction::Forward, &mut rng);
        let mut b = f.clone();
        b.direction = Direction::Backward;
        let x = Tensor::from_rows(&[[0.3, -0.7, 1.1]]);
        assert_eq!(f.forward(&x).unwrap().0, b.forward(&x).unwrap().0);
    }

    #[test]
    fn backward_direction_equals_forward_on_reversed_input() {
        let mut rng = SeededRng::seed_from_u64(4);
        let f = Gru::new("g", 2, 3, Direction::Forward, &mut rng);
        let mut b = f.clone();
        b.direction = Direction::Backward;
        let x = Tensor::from_rows(&[[0.1, 0.2], [0.9, -0.4], [-1.0, 0.3], [0.0, 0.5]]);
        let yb = b.forward(&x).unwrap().0;
        let yf_rev = f.forward(&x.reversed_rows()).unwrap().0.reversed_rows();
        assert_eq!(yb, yf_rev);
    }

    #[test]
    fn stack_shapes() {
        let mut rng = SeededRng::seed_from_u64(2);
        let s = GruStack::new("s", 7, 6, 2, &mut rng);
        assert_eq!(s.layers[1].fwd.input_dim(), 12);
        let (y, _) = s.forward(&Tensor::full(&[5, 7], 0.2)).unwrap();
        assert_eq!(y.shape(), &[5, 12]);
    }
}
