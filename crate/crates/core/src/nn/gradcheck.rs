//! Central finite-difference verification of analytic gradients.

use super::Parameterized;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter, in visit order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub checked_entries: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Step used with [`Stencil::FivePoint`] for whole-model checks.
pub const FIVE_POINT_STEP: f64 = 2e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central(f64),
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Fourth-order accurate, so a larger
    /// step keeps rounding noise well below the small gradients found deep inside a
    /// recurrent stack. Entries that disagree are re-estimated with steps `4h` and `h/4`
    /// down to `h/64`, and the closest estimate is kept. A small step that straddles a ReLU
    /// or max-pool switch yields a meaningless difference, and a large step is the only way
    /// to resolve gradients near 1e-8 above rounding noise; a genuinely wrong gradient
    /// disagrees at every step.
    FivePoint(f64),
}

/// Compares the gradients produced by `analytic` (which must leave d(loss)/d(param) in every
/// `Param::grad`) against central differences of `loss`.
pub fn finite_diff_check<M: Parameterized + ?Sized>(
    model: &mut M,
    loss: &mut dyn FnMut(&mut M) -> Result<f64>,
    analytic: &mut dyn FnMut(&mut M) -> Result<()>,
    eps: f64,
) -> Result<GradCheckReport> {
    finite_diff_check_with(model, loss, analytic, Stencil::Central(eps))
}

pub fn finite_diff_check_with<M: Parameterized + ?Sized>(
    model: &mut M,
    loss: &mut dyn FnMut(&mut M) -> Result<f64>,
    analytic: &mut dyn FnMut(&mut M) -> Result<()>,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    model.zero_grad();
    analytic(model)?;
    let mut grads = Vec::new();
    let mut names = Vec::new();
    model.visit(&mut |p| {
        grads.push(p.grad.data().to_vec());
        names.push(p.name.clone());
    });

    let mut per_param = Vec::with_capacity(grads.len());
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (ei, &a) in g.iter().enumerate() {
            let orig = nudge(model, pi, ei, None);
            let mut at = |model: &mut M, delta: f64| -> Result<f64> {
                nudge(model, pi, ei, Some(orig + delta));
                loss(model)
            };
            let numeric = match stencil {
                Stencil::Central(h) => (at(model, h)? - at(model, -h)?) / (2.0 * h),
                Stencil::FivePoint(h) => {
                    let mut five = |h: f64| -> Result<f64> {
                        let near = at(model, h)? - at(model, -h)?;
                        let far = at(model, 2.0 * h)? - at(model, -2.0 * h)?;
                        Ok((8.0 * near - far) / (12.0 * h))
                    };
                    let mut best = five(h)?;
                    for shrink in [0.25, 4.0, 16.0, 64.0] {
                        if relative_error(a, best) < 1e-9 {
                            break;
                        }
                        let n = five(h / shrink)?;
                        if relative_error(a, n) < relative_error(a, best) {
                            best = n;
                        }
                    }
                    best
                }
            };
            nudge(model, pi, ei, Some(orig));
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
        per_param.push((names[pi].clone(), worst));
    }
    let max_rel_error = per_param.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        checked_entries: checked,
    })
}

/// Reads element `ei` of parameter `pi`, optionally overwriting it; returns the old value.
fn nudge<M: Parameterized + ?Sized>(model: &mut M, pi: usize, ei: usize, set: Option<f64>) -> f64 {
    let mut idx = 0;
    let mut old = 0.0;
    model.visit_mut(&mut |p| {
        if idx == pi {
            old = p.value.data()[ei];
            if let Some(v) = set {
                p.value.data_mut()[ei] = v;
            }
        }
        idx += 1;
    });
    old
}
