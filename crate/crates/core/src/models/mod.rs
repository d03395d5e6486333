//! The two cascade networks (phoneme durations, then frame-level acoustics), their losses,
//! prediction post-processing and checkpoint files.

pub mod checkpoint;
pub mod loss;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cbhg::{Cbhg, CbhgConfig, CbhgTrace, GroupedInput};
use crate::codec::{AcousticFrames, AnalysisConfig};
use crate::error::{Error, Result};
use crate::frontend::{duration_decode, upsample_to_frames, DurationSeq, LinguisticSchema};
use crate::nn::{sigmoid, Buffer, Linear, LinearCache, Mode, Param, Parameterized, SeededRng};
use crate::tensor::Tensor;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_acoustic, load_duration, load_model, quantize_f32, save_checkpoint,
    LoadedModel, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{
    acoustic_loss, acoustic_loss_with_grad, bce, duration_loss, rmse, rmse_with_grad, AcousticGrad, AcousticLoss,
    AcousticPrediction, LossWeights, Stream,
};

/// Names of the four recurrent acoustic heads, in output order.
pub const ACOUSTIC_HEADS: [&str; 4] = ["spec", "energy", "cap", "lf0"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationConfig {
    pub schema: LinguisticSchema,
    pub trunk: CbhgConfig,
    pub seed: u64,
}

impl DurationConfig {
    pub fn new(schema: LinguisticSchema, seed: u64) -> Self {
        DurationConfig { schema, trunk: CbhgConfig::duration(), seed }
    }

    pub fn tiny(schema: LinguisticSchema, seed: u64) -> Self {
        DurationConfig { schema, trunk: CbhgConfig::tiny_duration(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if self.trunk.heads.len() != 1 {
            return Err(Error::Config(format!(
                "duration trunk needs exactly one GRU head, got {}",
                self.trunk.heads.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub schema: LinguisticSchema,
    pub trunk: CbhgConfig,
    /// Append the relative position inside the current phoneme to the phoneme group.
    pub position_feature: bool,
    pub analysis: AnalysisConfig,
    pub seed: u64,
}

impl AcousticConfig {
    pub fn new(schema: LinguisticSchema, seed: u64) -> Self {
        AcousticConfig {
            schema,
            trunk: CbhgConfig::acoustic(),
            position_feature: true,
            analysis: AnalysisConfig::default(),
            seed,
        }
    }

    /// Tiny trunk and a 9-bin analysis, for gradient checks.
    pub fn tiny(schema: LinguisticSchema, seed: u64) -> Self {
        AcousticConfig {
            trunk: CbhgConfig::tiny_acoustic(),
            analysis: AnalysisConfig::tiny(),
            ..AcousticConfig::new(schema, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.analysis.validate()?;
        let names: Vec<&str> = self.trunk.heads.iter().map(|h| h.name.as_str()).collect();
        if names != ACOUSTIC_HEADS {
            return Err(Error::Config(format!(
                "acoustic trunk heads must be {ACOUSTIC_HEADS:?} in that order, got {names:?}"
            )));
        }
        Ok(())
    }

    /// Column counts of the frame-level input groups.
    pub fn input_dims(&self) -> (usize, usize) {
        (self.schema.dp() + usize::from(self.position_feature), self.schema.de())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Duration(DurationConfig),
    Acoustic(AcousticConfig),
}

/// Phoneme-level CBHG followed by a scalar projection predicting `ln(frames)`.
#[derive(Debug, Clone)]
pub struct DurationModel {
    pub config: DurationConfig,
    pub trunk: Cbhg,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct DurationTrace {
    trunk: CbhgTrace,
    out: LinearCache,
}

impl DurationModel {
    pub fn new(config: DurationConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::seed_from_u64(config.seed);
        let trunk = Cbhg::new("duration", &config.trunk, config.schema.dp(), config.schema.de(), &mut rng)?;
        let out = Linear::new("duration.out", config.trunk.heads[0].output_dim(), 1, &mut rng);
        Ok(DurationModel { config, trunk, out })
    }

    /// One log-duration per phoneme.
    pub fn forward(&self, g: &GroupedInput, mode: Mode) -> Result<(Vec<f64>, DurationTrace)> {
        let (h, trunk) = self.trunk.forward(g, mode)?;
        let (y, out) = self.out.forward(&h.heads[0])?;
        Ok((y.into_data(), DurationTrace { trunk, out }))
    }

    /// Accumulates parameter gradients for upstream gradient `d` (one entry per phoneme).
    pub fn backward(&mut self, trace: &DurationTrace, d: &[f64]) -> Result<GroupedInput> {
        let dy = Tensor::column(d);
        let dh = self.out.backward(&trace.out, &dy);
        self.trunk.backward(&trace.trunk, None, &[Some(dh)])
    }

    pub fn commit(&mut self, trace: &DurationTrace) {
        self.trunk.commit(&trace.trunk);
    }

    /// Train-mode forward, loss, backward and running-statistic update. Returns the loss.
    pub fn train_step(&mut self, g: &GroupedInput, target_log: &[f64]) -> Result<f64> {
        let (pred, trace) = self.forward(g, Mode::Train)?;
        let (loss, grad) = rmse_with_grad(&pred, target_log)?;
        self.backward(&trace, &grad)?;
        self.commit(&trace);
        Ok(loss)
    }

    pub fn predict_log(&self, g: &GroupedInput) -> Result<Vec<f64>> {
        Ok(self.forward(g, Mode::Infer)?.0)
    }

    pub fn predict_durations(&self, g: &GroupedInput) -> Result<DurationSeq> {
        let y = self.predict_log(g)?;
        if let Some(p) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite duration prediction at phoneme {p}")));
        }
        DurationSeq::new(y.into_iter().map(duration_decode).collect())
    }
}

impl Parameterized for DurationModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.trunk.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.trunk.visit_mut(f);
        self.out.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.trunk.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.trunk.visit_buffers_mut(f);
    }
}

/// Frame-level CBHG with four recurrent heads (spectrogram, energy, CAP, LF0), each with its
/// own linear output, plus a voicing projection taken directly from the highway output.
#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub config: AcousticConfig,
    pub trunk: Cbhg,
    /// Output projections in [`ACOUSTIC_HEADS`] order.
    pub outs: Vec<Linear>,
    pub uv: Linear,
}

#[derive(Debug, Clone)]
pub struct AcousticTrace {
    trunk: CbhgTrace,
    outs: Vec<LinearCache>,
    uv: LinearCache,
}

impl AcousticModel {
    pub fn new(config: AcousticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::seed_from_u64(config.seed);
        let (dp, de) = config.input_dims();
        let trunk = Cbhg::new("acoustic", &config.trunk, dp, de, &mut rng)?;
        let widths = [config.analysis.bins(), 1, config.analysis.cap_bands(), 1];
        let outs = config
            .trunk
            .heads
            .iter()
            .zip(widths)
            .map(|(h, w)| Linear::new(&format!("acoustic.out_{}", h.name), h.output_dim(), w, &mut rng))
            .collect();
        let uv = Linear::new("acoustic.uv", config.trunk.highway_dim, 1, &mut rng);
        Ok(AcousticModel { config, trunk, outs, uv })
    }

    /// Upsamples phoneme-level features to frames the way this model expects.
    pub fn frame_input(&self, g: &GroupedInput, durations: &DurationSeq) -> Result<GroupedInput> {
        upsample_to_frames(g, durations.frames(), self.config.position_feature)
    }

    pub fn forward(&self, g: &GroupedInput, mode: Mode) -> Result<(AcousticPrediction, AcousticTrace)> {
        let (h, trunk) = self.trunk.forward(g, mode)?;
        let mut ys = Vec::with_capacity(4);
        let mut outs = Vec::with_capacity(4);
        for (lin, x) in self.outs.iter().zip(&h.heads) {
            let (y, c) = lin.forward(x)?;
            ys.push(y);
            outs.push(c);
        }
        let (logit, uv) = self.uv.forward(&h.highway)?;
        let mut ys = ys.into_iter();
        let (spec, energy, cap, lf0) = (
            ys.next().expect("four heads"),
            ys.next().expect("four heads"),
            ys.next().expect("four heads"),
            ys.next().expect("four heads"),
        );
        Ok((
            AcousticPrediction {
                spec,
                energy: energy.into_data(),
                cap,
                lf0: lf0.into_data(),
                uv_prob: logit.data().iter().map(|&z| sigmoid(z)).collect(),
            },
            AcousticTrace { trunk, outs, uv },
        ))
    }

    /// Backpropagates a loss gradient. Streams whose weight is zero are skipped so their
    /// heads receive no gradient at all.
    pub fn backward(&mut self, trace: &AcousticTrace, grad: &AcousticGrad, w: &LossWeights) -> Result<GroupedInput> {
        let upstream = [
            (w.spec, grad.spec.clone()),
            (w.energy, Tensor::column(&grad.energy)),
            (w.cap, grad.cap.clone()),
            (w.lf0, Tensor::column(&grad.lf0)),
        ];
        let mut d_heads = Vec::with_capacity(4);
        for ((lin, cache), (weight, dy)) in self.outs.iter_mut().zip(&trace.outs).zip(upstream) {
            d_heads.push((weight != 0.0).then(|| lin.backward(cache, &dy)));
        }
        let d_highway = (w.uv != 0.0).then(|| self.uv.backward(&trace.uv, &Tensor::column(&grad.uv_logit)));
        self.trunk.backward(&trace.trunk, d_highway.as_ref(), &d_heads)
    }

    pub fn commit(&mut self, trace: &AcousticTrace) {
        self.trunk.commit(&trace.trunk);
    }

    /// Train-mode forward, loss, backward and running-statistic update.
    pub fn train_step(&mut self, g: &GroupedInput, target: &AcousticFrames, w: &LossWeights) -> Result<AcousticLoss> {
        let (pred, trace) = self.forward(g, Mode::Train)?;
        let (loss, grad) = acoustic_loss_with_grad(&pred, target, w)?;
        self.backward(&trace, &grad, w)?;
        self.commit(&trace);
        Ok(loss)
    }

    pub fn predict_raw(&self, g: &GroupedInput) -> Result<AcousticPrediction> {
        Ok(self.forward(g, Mode::Infer)?.0)
    }

    pub fn predict_acoustics(&self, g: &GroupedInput) -> Result<AcousticFrames> {
        postprocess(self.predict_raw(g)?)
    }
}

/// Voicing decision `prob > 0.5` (ties are unvoiced) and CAP clamped to `[0, 1]`.
pub fn postprocess(pred: AcousticPrediction) -> Result<AcousticFrames> {
    let uv = pred.uv_prob.iter().map(|&p| p > 0.5).collect();
    let cap = pred.cap.map(|c| c.clamp(0.0, 1.0));
    AcousticFrames::new(pred.spec, pred.energy, cap, pred.lf0, uv)
}

impl Parameterized for AcousticModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.trunk.visit(f);
        self.outs.iter().for_each(|o| o.visit(f));
        self.uv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.trunk.visit_mut(f);
        self.outs.iter_mut().for_each(|o| o.visit_mut(f));
        self.uv.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.trunk.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.trunk.visit_buffers_mut(f);
    }
}
