//! Gradient-check suites: every layer type on its own, and the two full models at tiny size.
//!
//! Layer checks score `sum(R * layer(x))` for a fixed random `R` and include the layer input
//! among the checked tensors, so input gradients are verified too (the only gradient a
//! pooling layer has). Layers use central differences; whole models use the five-point
//! stencil, whose smaller truncation error resolves the tiny gradients deep in the GRUs.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cbhg::{Cbhg, CbhgConfig, GroupedInput};
use crate::codec::AcousticFrames;
use crate::error::{Error, Result};
use crate::frontend::LinguisticSchema;
use crate::models::{
    acoustic_loss, acoustic_loss_with_grad, duration_loss, rmse_with_grad, AcousticConfig, AcousticModel, DurationConfig,
    DurationModel, LossWeights,
};
use crate::nn::{
    finite_diff_check_with, BatchNorm, Buffer, Conv1d, Direction, Gru, Highway, Linear, MaxPool1d,
    Mode, Param, Parameterized, SeededRng, Stencil, DEFAULT_EPS, FIVE_POINT_STEP,
};
use crate::tensor::Tensor;

pub const LAYER_THRESHOLD: f64 = 1e-5;
pub const MODEL_THRESHOLD: f64 = 1e-4;
pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Layers,
    Models,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(Level::Layers),
            "models" => Ok(Level::Models),
            other => Err(Error::Argument(format!("unknown grad-check level `{other}` (layers|models)"))),
        }
    }
}

/// Every component a suite covers, in report order.
pub fn components(level: Level) -> &'static [&'static str] {
    match level {
        Level::Layers => &[
            "linear",
            "conv1d",
            "batchnorm_train",
            "batchnorm_infer",
            "maxpool",
            "highway",
            "gru_forward",
            "gru_backward",
        ],
        Level::Models => &["cbhg_trunk", "duration_model", "acoustic_model"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub threshold: f64,
    pub checked_entries: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub version: u32,
    pub level: Level,
    pub components: Vec<ComponentReport>,
    pub passed: bool,
}

impl GradCheckSummary {
    pub fn failing(&self) -> Vec<&str> {
        self.components.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// A layer with its input promoted to a parameter.
struct Probe<L> {
    layer: L,
    input: Param,
    probe: Tensor,
}

impl<L: Parameterized> Parameterized for Probe<L> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layer.visit(f);
        f(&self.input);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layer.visit_mut(f);
        f(&mut self.input);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.layer.visit_buffers(f);
    }
}

/// Pooling has no parameters; this lets it ride in a [`Probe`].
struct Stateless<T>(T);

impl<T> Parameterized for Stateless<T> {
    fn visit(&self, _f: &mut dyn FnMut(&Param)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs one layer check. `fwd` maps (layer, input) to output; `bwd` receives the upstream
/// gradient and returns the input gradient, accumulating parameter gradients.
fn layer_check<L: Parameterized>(
    layer: L,
    input: Tensor,
    out_cols: usize,
    seed: u64,
    fwd: impl Fn(&L, &Tensor) -> Result<Tensor>,
    bwd: impl Fn(&mut L, &Tensor, &Tensor) -> Result<Tensor>,
    fault: bool,
) -> Result<crate::nn::GradCheckReport> {
    // Separate stream from the one that drew the input: a probe equal to the input gives the
    // loss a symmetric structure with cancelling gradient entries.
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(1);
    let probe = random(input.rows(), out_cols, &mut rng);
    let mut p = Probe { layer, input: Param::new("input", input), probe };
    finite_diff_check_with(
        &mut p,
        &mut |p: &mut Probe<L>| Ok(dot(&fwd(&p.layer, &p.input.value)?, &p.probe)),
        &mut |p: &mut Probe<L>| {
            let x = p.input.value.clone();
            let dx = bwd(&mut p.layer, &x, &p.probe)?;
            p.input.grad.add_assign(&dx);
            if fault {
                p.layer.visit_mut(&mut |q| q.grad.scale(1.01));
                p.input.grad.scale(1.01);
            }
            Ok(())
        },
        Stencil::Central(DEFAULT_EPS),
    )
}

fn check_layer(name: &str, seed: u64, fault: bool) -> Result<crate::nn::GradCheckReport> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let t = 7;
    match name {
        "linear" => {
            let mut l = Linear::new("linear", 5, 4, &mut rng);
            l.bias.value = Tensor::from_vec(&[4], random(1, 4, &mut rng).into_data())?;
            layer_check(l, random(t, 5, &mut rng), 4, seed, |l, x| Ok(l.forward(x)?.0), |l, x, dy| {
                let (_, c) = l.forward(x)?;
                Ok(l.backward(&c, dy))
            }, fault)
        }
        "conv1d" => {
            let c = Conv1d::new("conv1d", 4, 3, 5, &mut rng)?;
            layer_check(c, random(t, 3, &mut rng), 5, seed, |c, x| Ok(c.forward(x)?.0), |c, x, dy| {
                let (_, cache) = c.forward(x)?;
                Ok(c.backward(&cache, dy))
            }, fault)
        }
        "batchnorm_train" | "batchnorm_infer" => {
            let mode = if name == "batchnorm_train" { Mode::Train } else { Mode::Infer };
            let mut bn = BatchNorm::new(name, 4);
            bn.gamma.value = Tensor::from_vec(&[4], vec![1.2, 0.7, -0.4, 2.0])?;
            bn.beta.value = Tensor::from_vec(&[4], vec![0.1, -0.3, 0.0, 0.5])?;
            bn.running_mean.value = Tensor::from_vec(&[4], vec![0.2, -0.1, 0.4, 0.0])?;
            bn.running_var.value = Tensor::from_vec(&[4], vec![0.5, 1.5, 0.9, 2.2])?;
            layer_check(bn, random(t, 4, &mut rng), 4, seed, move |b, x| Ok(b.forward(x, mode)?.0), move |b, x, dy| {
                let (_, c) = b.forward(x, mode)?;
                Ok(b.backward(&c, dy))
            }, fault)
        }
        "maxpool" => {
            let pool = Stateless(MaxPool1d::new(3)?);
            layer_check(pool, random(t, 4, &mut rng), 4, seed, |p, x| Ok(p.0.forward(x).0), |p, x, dy| {
                let (_, c) = p.0.forward(x);
                Ok(p.0.backward(&c, dy))
            }, fault)
        }
        "highway" => {
            let h = Highway::new("highway", 4, &mut rng);
            layer_check(h, random(t, 4, &mut rng), 4, seed, |h, x| Ok(h.forward(x)?.0), |h, x, dy| {
                let (_, c) = h.forward(x)?;
                Ok(h.backward(&c, dy))
            }, fault)
        }
        "gru_forward" | "gru_backward" => {
            let dir = if name == "gru_forward" { Direction::Forward } else { Direction::Backward };
            let g = Gru::new(name, 3, 4, dir, &mut rng);
            layer_check(g, random(t, 3, &mut rng), 4, seed, |g, x| Ok(g.forward(x)?.0), |g, x, dy| {
                let (_, c) = g.forward(x)?;
                Ok(g.backward(&c, dy))
            }, fault)
        }
        other => Err(Error::Argument(format!("unknown layer component `{other}`"))),
    }
}

fn random_frames(t: usize, model: &AcousticModel, rng: &mut SeededRng) -> Result<AcousticFrames> {
    let a = &model.config.analysis;
    let (bins, bands) = (a.bins(), a.cap_bands());
    AcousticFrames::new(
        random(t, bins, rng),
        (0..t).map(|_| rng.gen_range(-4.0..-1.0)).collect(),
        random(t, bands, rng).map(|v| 0.5 + 0.5 * v),
        (0..t).map(|_| rng.gen_range(4.6..5.6)).collect(),
        (0..t).map(|i| i % 3 != 0).collect(),
    )
}

fn check_model(name: &str, seed: u64, fault: bool) -> Result<crate::nn::GradCheckReport> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let schema = LinguisticSchema::default_toy();
    let stencil = Stencil::FivePoint(FIVE_POINT_STEP);
    let corrupt = |m: &mut dyn Parameterized| {
        if fault {
            m.visit_mut(&mut |q| q.grad.scale(1.01));
        }
    };
    match name {
        "cbhg_trunk" => {
            let cfg = CbhgConfig::tiny_acoustic();
            let mut trunk = Cbhg::new("trunk", &cfg, 4, 3, &mut rng)?;
            let g = GroupedInput::new(random(6, 4, &mut rng), random(6, 3, &mut rng))?;
            let probes: Vec<Tensor> = cfg.heads.iter().map(|h| random(6, h.output_dim(), &mut rng)).collect();
            let hw_probe = random(6, cfg.highway_dim, &mut rng);
            finite_diff_check_with(
                &mut trunk,
                &mut |m: &mut Cbhg| {
                    let (out, _) = m.forward(&g, Mode::Train)?;
                    Ok(dot(&out.highway, &hw_probe) + out.heads.iter().zip(&probes).map(|(h, p)| dot(h, p)).sum::<f64>())
                },
                &mut |m: &mut Cbhg| {
                    let (_, trace) = m.forward(&g, Mode::Train)?;
                    let d: Vec<Option<Tensor>> = probes.iter().cloned().map(Some).collect();
                    m.backward(&trace, Some(&hw_probe), &d)?;
                    corrupt(m);
                    Ok(())
                },
                stencil,
            )
        }
        "duration_model" => {
            let mut m = DurationModel::new(DurationConfig::tiny(schema.clone(), seed))?;
            let g = GroupedInput::new(random(6, schema.dp(), &mut rng), random(6, schema.de(), &mut rng))?;
            let target: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..3.0)).collect();
            finite_diff_check_with(
                &mut m,
                &mut |m: &mut DurationModel| duration_loss(&m.forward(&g, Mode::Train)?.0, &target),
                &mut |m: &mut DurationModel| {
                    let (pred, trace) = m.forward(&g, Mode::Train)?;
                    let (_, grad) = rmse_with_grad(&pred, &target)?;
                    m.backward(&trace, &grad)?;
                    corrupt(m);
                    Ok(())
                },
                stencil,
            )
        }
        "acoustic_model" => {
            let mut m = AcousticModel::new(AcousticConfig::tiny(schema, seed))?;
            let (dp, de) = m.config.input_dims();
            let g = GroupedInput::new(random(6, dp, &mut rng), random(6, de, &mut rng))?;
            let target = random_frames(6, &m, &mut rng)?;
            let w = LossWeights::default();
            finite_diff_check_with(
                &mut m,
                &mut |m: &mut AcousticModel| Ok(acoustic_loss(&m.forward(&g, Mode::Train)?.0, &target, &w)?.total),
                &mut |m: &mut AcousticModel| {
                    let (pred, trace) = m.forward(&g, Mode::Train)?;
                    let (_, grad) = acoustic_loss_with_grad(&pred, &target, &w)?;
                    m.backward(&trace, &grad, &w)?;
                    corrupt(m);
                    Ok(())
                },
                stencil,
            )
        }
        other => Err(Error::Argument(format!("unknown model component `{other}`"))),
    }
}

/// Runs a suite. Components named in `faults` get their analytic gradients scaled by 1.01
/// after backward, which any working check must catch.
pub fn run_suite(level: Level, seed: u64, faults: &[String]) -> Result<GradCheckSummary> {
    for f in faults {
        if !components(level).contains(&f.as_str()) {
            return Err(Error::Argument(format!("cannot inject a fault into unknown component `{f}`")));
        }
    }
    let threshold = match level {
        Level::Layers => LAYER_THRESHOLD,
        Level::Models => MODEL_THRESHOLD,
    };
    let mut reports = Vec::new();
    for (i, &name) in components(level).iter().enumerate() {
        let fault = faults.iter().any(|f| f == name);
        let s = seed.wrapping_add(i as u64);
        let r = match level {
            Level::Layers => check_layer(name, s, fault)?,
            Level::Models => check_model(name, s, fault)?,
        };
        let worst = r.worst().map(|w| w.0.clone()).unwrap_or_default();
        reports.push(ComponentReport {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            worst_param: worst,
            threshold,
            checked_entries: r.checked_entries,
            passed: r.max_rel_error < threshold,
        });
    }
    let passed = reports.iter().all(|c| c.passed);
    Ok(GradCheckSummary { version: SUMMARY_VERSION, level, components: reports, passed })
}
