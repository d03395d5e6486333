use serde::{Deserialize, Serialize};

use crate::codec::AcousticFrames;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BCE_CLAMP: f64 = 1e-7;

/// Root mean square error and its gradient with respect to `pred`. At zero error the
/// gradient is taken as zero.
pub fn rmse_with_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::dim("RMSE operands", &[target.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Err(Error::EmptySequence("RMSE over zero elements".into()));
    }
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = (diff.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let grad = if loss > 0.0 {
        diff.iter().map(|d| d / (n * loss)).collect()
    } else {
        vec![0.0; diff.len()]
    };
    Ok((loss, grad))
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(rmse_with_grad(pred, target)?.0)
}

/// `sqrt(mean((pred - target)^2))` over log-domain durations.
pub fn duration_loss(pred_log: &[f64], target_log: &[f64]) -> Result<f64> {
    rmse(pred_log, target_log)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(prob: &[f64], target: &[bool]) -> Result<f64> {
    if prob.len() != target.len() {
        return Err(Error::dim("cross-entropy operands", &[target.len()], &[prob.len()]));
    }
    if prob.is_empty() {
        return Err(Error::EmptySequence("cross-entropy over zero frames".into()));
    }
    let sum: f64 = prob
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / prob.len() as f64)
}

/// Gradient of [`bce`] with respect to the pre-sigmoid logits (zero where the clamp is
/// active).
fn bce_logit_grad(prob: &[f64], target: &[bool]) -> Vec<f64> {
    let n = prob.len() as f64;
    prob.iter()
        .zip(target)
        .map(|(&p, &y)| {
            if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                0.0
            } else {
                (p - if y { 1.0 } else { 0.0 }) / n
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub spec: f64,
    pub energy: f64,
    pub cap: f64,
    pub lf0: f64,
    pub uv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { spec: 1.0, energy: 1.0, cap: 1.0, lf0: 1.0, uv: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.spec, self.energy, self.cap, self.lf0, self.uv];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }

    /// Only one stream weighted (by 1), the rest zero.
    pub fn only(stream: Stream) -> Self {
        let mut w = LossWeights { spec: 0.0, energy: 0.0, cap: 0.0, lf0: 0.0, uv: 0.0 };
        *w.get_mut(stream) = 1.0;
        w
    }

    pub fn get(&self, stream: Stream) -> f64 {
        match stream {
            Stream::Spec => self.spec,
            Stream::Energy => self.energy,
            Stream::Cap => self.cap,
            Stream::Lf0 => self.lf0,
            Stream::Uv => self.uv,
        }
    }

    fn get_mut(&mut self, stream: Stream) -> &mut f64 {
        match stream {
            Stream::Spec => &mut self.spec,
            Stream::Energy => &mut self.energy,
            Stream::Cap => &mut self.cap,
            Stream::Lf0 => &mut self.lf0,
            Stream::Uv => &mut self.uv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Spec,
    Energy,
    Cap,
    Lf0,
    Uv,
}

impl Stream {
    pub const ALL: [Stream; 5] = [Stream::Spec, Stream::Energy, Stream::Cap, Stream::Lf0, Stream::Uv];
}

/// Network outputs for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticPrediction {
    pub spec: Tensor,
    pub energy: Vec<f64>,
    pub cap: Tensor,
    pub lf0: Vec<f64>,
    /// Voicing probability in `(0, 1)`.
    pub uv_prob: Vec<f64>,
}

impl AcousticPrediction {
    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }
}

/// Unweighted per-stream losses and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcousticLoss {
    pub total: f64,
    pub spec: f64,
    pub energy: f64,
    pub cap: f64,
    pub lf0: f64,
    pub uv: f64,
}

impl AcousticLoss {
    pub fn stream(&self, s: Stream) -> f64 {
        match s {
            Stream::Spec => self.spec,
            Stream::Energy => self.energy,
            Stream::Cap => self.cap,
            Stream::Lf0 => self.lf0,
            Stream::Uv => self.uv,
        }
    }

    /// `w_s * loss_s`.
    pub fn weighted(&self, s: Stream, w: &LossWeights) -> f64 {
        w.get(s) * self.stream(s)
    }
}

/// Gradients of the weighted total with respect to each output (the U/V entry is with
/// respect to the pre-sigmoid logit).
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticGrad {
    pub spec: Tensor,
    pub energy: Vec<f64>,
    pub cap: Tensor,
    pub lf0: Vec<f64>,
    pub uv_logit: Vec<f64>,
}

fn check_frames(pred: &AcousticPrediction, target: &AcousticFrames) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dim("predicted vs target frames", &[target.len()], &[pred.len()]));
    }
    pred.spec.expect_shape(target.spec.shape(), "spectrogram prediction")?;
    pred.cap.expect_shape(target.cap.shape(), "CAP prediction")?;
    if pred.is_empty() {
        return Err(Error::EmptySequence("acoustic loss over zero frames".into()));
    }
    Ok(())
}

pub fn acoustic_loss(pred: &AcousticPrediction, target: &AcousticFrames, w: &LossWeights) -> Result<AcousticLoss> {
    Ok(acoustic_loss_with_grad(pred, target, w)?.0)
}

/// RMSE for every continuous stream (LF0 over all frames), cross-entropy for U/V.
pub fn acoustic_loss_with_grad(
    pred: &AcousticPrediction,
    target: &AcousticFrames,
    w: &LossWeights,
) -> Result<(AcousticLoss, AcousticGrad)> {
    check_frames(pred, target)?;
    let (spec, mut g_spec) = rmse_with_grad(pred.spec.data(), target.spec.data())?;
    let (energy, mut g_energy) = rmse_with_grad(&pred.energy, &target.energy)?;
    let (cap, mut g_cap) = rmse_with_grad(pred.cap.data(), target.cap.data())?;
    let (lf0, mut g_lf0) = rmse_with_grad(&pred.lf0, &target.lf0)?;
    let uv = bce(&pred.uv_prob, &target.uv)?;
    let mut g_uv = bce_logit_grad(&pred.uv_prob, &target.uv);
    for (g, s) in [
        (&mut g_spec, w.spec),
        (&mut g_energy, w.energy),
        (&mut g_cap, w.cap),
        (&mut g_lf0, w.lf0),
        (&mut g_uv, w.uv),
    ] {
        g.iter_mut().for_each(|v| *v *= s);
    }
    let total = w.spec * spec + w.energy * energy + w.cap * cap + w.lf0 * lf0 + w.uv * uv;
    let t = pred.len();
    Ok((
        AcousticLoss { total, spec, energy, cap, lf0, uv },
        AcousticGrad {
            spec: Tensor::from_vec(pred.spec.shape(), g_spec)?,
            energy: g_energy,
            cap: Tensor::from_vec(&[t, pred.cap.cols()], g_cap)?,
            lf0: g_lf0,
            uv_logit: g_uv,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(t: usize) -> AcousticFrames {
        AcousticFrames::new(
            Tensor::from_vec(&[t, 3], (0..3 * t).map(|i| i as f64 * 0.1).collect()).unwrap(),
            (0..t).map(|i| -(i as f64)).collect(),
            Tensor::full(&[t, 2], 0.4),
            (0..t).map(|i| 4.5 + 0.01 * i as f64).collect(),
            (0..t).map(|i| i % 2 == 0).collect(),
        )
        .unwrap()
    }

    fn perfect(f: &AcousticFrames, uv_prob: Vec<f64>) -> AcousticPrediction {
        AcousticPrediction {
            spec: f.spec.clone(),
            energy: f.energy.clone(),
            cap: f.cap.clone(),
            lf0: f.lf0.clone(),
            uv_prob,
        }
    }

    #[test]
    fn duration_loss_examples() {
        assert_eq!(duration_loss(&[0.3, 1.0], &[0.3, 1.0]).unwrap(), 0.0);
        assert_eq!(duration_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((duration_loss(&[0.0, 2.0], &[0.0, 0.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(duration_loss(&[], &[]), Err(Error::EmptySequence(_))));
        assert!(matches!(duration_loss(&[1.0], &[]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn half_probability_costs_ln_two() {
        let f = target(4);
        let w = LossWeights { uv: 2.5, ..Default::default() };
        let l = acoustic_loss(&perfect(&f, vec![0.5; 4]), &f, &w).unwrap();
        assert!((l.total - 2.5 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.spec, 0.0);
    }

    #[test]
    fn near_perfect_prediction_has_near_zero_loss() {
        let f = target(4);
        let probs = f.uv.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let l = acoustic_loss(&perfect(&f, probs), &f, &LossWeights::default()).unwrap();
        assert!(l.total < 1e-6);
        assert!(l.total >= 0.0);
    }

    #[test]
    fn weights_act_linearly_per_stream() {
        let f = target(5);
        let mut p = perfect(&f, vec![0.3; 5]);
        p.spec.data_mut().iter_mut().for_each(|v| *v += 0.2);
        p.energy[1] += 1.0;
        let base = LossWeights::default();
        let doubled = LossWeights { spec: 2.0, ..base };
        let a = acoustic_loss(&p, &f, &base).unwrap();
        let b = acoustic_loss(&p, &f, &doubled).unwrap();
        assert_eq!(b.weighted(Stream::Spec, &doubled), 2.0 * a.weighted(Stream::Spec, &base));
        for s in [Stream::Energy, Stream::Cap, Stream::Lf0, Stream::Uv] {
            assert_eq!(a.weighted(s, &base), b.weighted(s, &doubled));
        }
        let sum: f64 = Stream::ALL.iter().map(|&s| b.weighted(s, &doubled)).sum();
        assert!((sum - b.total).abs() < 1e-12);
    }

    #[test]
    fn frame_mismatch_is_dimension_error() {
        let f = target(4);
        let p = perfect(&target(3), vec![0.5; 3]);
        assert!(matches!(acoustic_loss(&p, &f, &LossWeights::default()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rmse_gradient_matches_differences() {
        let pred = [0.3, -1.2, 2.0];
        let target = [0.0, 0.5, 1.0];
        let (_, g) = rmse_with_grad(&pred, &target).unwrap();
        for i in 0..3 {
            let mut p = pred;
            p[i] += 1e-6;
            let mut m = pred;
            m[i] -= 1e-6;
            let num = (rmse(&p, &target).unwrap() - rmse(&m, &target).unwrap()) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8);
        }
    }
}
