//! The CBHG trunk used by both cascade models.
//!
//! Pipeline: per-group convolution banks (concatenated) -> stride-1 max pooling ->
//! projection convolutions with batch norm -> highway stack -> one stack of bidirectional GRU
//! layers per named head. Banks carry no batch norm, and nothing in the trunk has a residual
//! path around a stage; the only skip-like path is the highway carry gate.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_inplace, Buffer, BatchNorm, BnCache, Conv1d, ConvCache, GruStack, GruStackCache,
    Highway, HighwayCache, Linear, LinearCache, MaxPool1d, Mode, Param, Parameterized, PoolCache,
    SeededRng,
};
use crate::tensor::Tensor;

/// Linguistic features split into the two groups that enter separate banks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedInput {
    /// `T x Dp`: phoneme identity, tone, stress (and the optional position column).
    pub phoneme: Tensor,
    /// `T x De`: prosodic, syntactic and emotion features.
    pub emo_prosodic: Tensor,
}

impl GroupedInput {
    pub fn new(phoneme: Tensor, emo_prosodic: Tensor) -> Result<Self> {
        if phoneme.rows() != emo_prosodic.rows() {
            return Err(Error::dim(
                "grouped input row counts",
                &[phoneme.rows()],
                &[emo_prosodic.rows()],
            ));
        }
        Ok(GroupedInput { phoneme, emo_prosodic })
    }

    pub fn len(&self) -> usize {
        self.phoneme.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Both groups side by side, `T x (Dp + De)`.
    pub fn concatenated(&self) -> Tensor {
        Tensor::concat_cols(&[&self.phoneme, &self.emo_prosodic]).expect("row counts checked")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionLayer {
    pub width: usize,
    pub channels: usize,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruHeadConfig {
    pub name: String,
    pub layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
}

impl GruHeadConfig {
    pub fn bi(name: &str, layers: usize, hidden: usize) -> Self {
        GruHeadConfig {
            name: name.to_string(),
            layers,
            hidden,
            bidirectional: true,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// How the input groups reach the convolution banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BankLayout {
    /// One bank per feature group, concatenated afterwards.
    Grouped,
    /// A single bank over the concatenated feature vector (ablation baseline).
    Single { channels_per_filter: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbhgConfig {
    /// Filter widths of each group's bank.
    pub bank_widths: Vec<usize>,
    pub channels_per_filter: usize,
    pub bank_layout: BankLayout,
    pub pool_width: usize,
    pub projection: Vec<ProjectionLayer>,
    pub highway_layers: usize,
    pub highway_dim: usize,
    pub heads: Vec<GruHeadConfig>,
}

fn two_projections(channels: usize) -> Vec<ProjectionLayer> {
    vec![
        ProjectionLayer { width: 3, channels, batch_norm: true },
        ProjectionLayer { width: 3, channels, batch_norm: true },
    ]
}

impl CbhgConfig {
    /// Duration trunk: widths 1..8, pool 2, one highway layer, a 2 x 32 x 2 GRU head.
    pub fn duration() -> Self {
        CbhgConfig {
            bank_widths: (1..=8).collect(),
            channels_per_filter: 16,
            bank_layout: BankLayout::Grouped,
            pool_width: 2,
            projection: two_projections(64),
            highway_layers: 1,
            highway_dim: 64,
            heads: vec![GruHeadConfig::bi("duration", 2, 32)],
        }
    }

    /// Acoustic trunk: widths 5, 10, ..., 40, pool 10, two highway layers and four GRU heads.
    pub fn acoustic() -> Self {
        CbhgConfig {
            bank_widths: (1..=8).map(|k| 5 * k).collect(),
            channels_per_filter: 32,
            bank_layout: BankLayout::Grouped,
            pool_width: 10,
            projection: two_projections(128),
            highway_layers: 2,
            highway_dim: 128,
            heads: vec![
                GruHeadConfig::bi("spec", 2, 128),
                GruHeadConfig::bi("energy", 2, 16),
                GruHeadConfig::bi("cap", 2, 16),
                GruHeadConfig::bi("lf0", 2, 32),
            ],
        }
    }

    /// Same topology as [`CbhgConfig::duration`] at gradient-check scale.
    pub fn tiny_duration() -> Self {
        CbhgConfig {
            bank_widths: vec![1, 2, 3],
            channels_per_filter: 2,
            bank_layout: BankLayout::Grouped,
            pool_width: 2,
            projection: two_projections(4),
            highway_layers: 1,
            highway_dim: 4,
            heads: vec![GruHeadConfig::bi("duration", 2, 3)],
        }
    }

    /// Same topology as [`CbhgConfig::acoustic`] at gradient-check scale.
    pub fn tiny_acoustic() -> Self {
        CbhgConfig {
            bank_widths: vec![2, 4, 6],
            channels_per_filter: 2,
            bank_layout: BankLayout::Grouped,
            pool_width: 3,
            projection: two_projections(4),
            highway_layers: 2,
            highway_dim: 4,
            heads: vec![
                GruHeadConfig::bi("spec", 2, 3),
                GruHeadConfig::bi("energy", 2, 2),
                GruHeadConfig::bi("cap", 2, 2),
                GruHeadConfig::bi("lf0", 2, 2),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bank_widths.is_empty() {
            return Err(Error::Config("bank widths must not be empty".into()));
        }
        if self.bank_widths[0] < 1 || self.bank_widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "bank widths must be positive and strictly increasing, got {:?}",
                self.bank_widths
            )));
        }
        if self.channels_per_filter < 1 {
            return Err(Error::Config("channels per bank filter must be at least 1".into()));
        }
        if let BankLayout::Single { channels_per_filter: 0 } = self.bank_layout {
            return Err(Error::Config("single-bank channels must be at least 1".into()));
        }
        if self.pool_width < 1 {
            return Err(Error::Config("pool width must be at least 1".into()));
        }
        if self.projection.is_empty() || self.projection.iter().any(|p| p.width < 1 || p.channels < 1) {
            return Err(Error::Config("projection needs at least one layer with width, channels >= 1".into()));
        }
        if self.highway_layers < 1 || self.highway_dim < 1 {
            return Err(Error::Config("highway stack needs at least one layer of width >= 1".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("at least one GRU head is required".into()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if !h.bidirectional || h.layers < 1 || h.hidden < 1 {
                return Err(Error::Config(format!(
                    "GRU head `{}` must be bidirectional with layers, hidden >= 1",
                    h.name
                )));
            }
            if self.heads[..i].iter().any(|o| o.name == h.name) {
                return Err(Error::Config(format!("duplicate GRU head `{}`", h.name)));
            }
        }
        Ok(())
    }

    /// Channel count after the banks are concatenated.
    pub fn bank_output_dim(&self) -> usize {
        match self.bank_layout {
            BankLayout::Grouped => 2 * self.bank_widths.len() * self.channels_per_filter,
            BankLayout::Single { channels_per_filter } => self.bank_widths.len() * channels_per_filter,
        }
    }

    pub fn head(&self, name: &str) -> Option<&GruHeadConfig> {
        self.heads.iter().find(|h| h.name == name)
    }
}

/// Parallel convolutions of increasing width, each followed by ReLU, outputs stacked along
/// channels in width order.
#[derive(Debug, Clone)]
pub struct ConvBank {
    pub convs: Vec<Conv1d>,
}

#[derive(Debug, Clone)]
pub struct ConvBankCache {
    convs: Vec<(ConvCache, Tensor)>,
}

impl ConvBank {
    pub fn new(name: &str, widths: &[usize], input: usize, channels: usize, rng: &mut SeededRng) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config(format!("{name}: convolution bank needs at least one width")));
        }
        let convs = widths
            .iter()
            .map(|&w| Conv1d::new(&format!("{name}.k{w}"), w, input, channels, rng))
            .collect::<Result<_>>()?;
        Ok(ConvBank { convs })
    }

    pub fn output_dim(&self) -> usize {
        self.convs.iter().map(|c| c.output_dim()).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvBankCache)> {
        let mut outs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(x)?;
            relu_inplace(&mut y);
            outs.push((cache, y));
        }
        let refs: Vec<&Tensor> = outs.iter().map(|(_, y)| y).collect();
        let y = Tensor::concat_cols(&refs)?;
        Ok((y, ConvBankCache { convs: outs }))
    }

    pub fn backward(&mut self, cache: &ConvBankCache, dy: &Tensor) -> Tensor {
        let mut offset = 0;
        let mut dx: Option<Tensor> = None;
        for (conv, (cc, out)) in self.convs.iter_mut().zip(&cache.convs) {
            let c = conv.output_dim();
            let g = relu_backward(out, &dy.slice_cols(offset, c));
            offset += c;
            let d = conv.backward(cc, &g);
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&d),
                None => dx = Some(d),
            }
        }
        dx.expect("bank has at least one convolution")
    }
}

impl Parameterized for ConvBank {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.convs.iter().for_each(|c| c.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
    }
}

/// `ReLU(conv1d(x, k))` for every width `k`, concatenated.
pub fn conv_bank_forward(x: &Tensor, widths: &[usize], channels: usize, rng: &mut SeededRng) -> Result<Tensor> {
    Ok(ConvBank::new("bank", widths, x.cols(), channels, rng)?.forward(x)?.0)
}

#[derive(Debug, Clone)]
pub enum InputBank {
    Grouped { phoneme: ConvBank, emo_prosodic: ConvBank },
    Single(ConvBank),
}

#[derive(Debug, Clone)]
pub enum InputBankCache {
    Grouped { phoneme: ConvBankCache, emo_prosodic: ConvBankCache },
    Single(ConvBankCache),
}

impl InputBank {
    pub fn new(prefix: &str, cfg: &CbhgConfig, dp: usize, de: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(match cfg.bank_layout {
            BankLayout::Grouped => InputBank::Grouped {
                phoneme: ConvBank::new(&format!("{prefix}.bank_phoneme"), &cfg.bank_widths, dp, cfg.channels_per_filter, rng)?,
                emo_prosodic: ConvBank::new(&format!("{prefix}.bank_emo"), &cfg.bank_widths, de, cfg.channels_per_filter, rng)?,
            },
            BankLayout::Single { channels_per_filter } => {
                InputBank::Single(ConvBank::new(&format!("{prefix}.bank"), &cfg.bank_widths, dp + de, channels_per_filter, rng)?)
            }
        })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            InputBank::Grouped { phoneme, emo_prosodic } => phoneme.output_dim() + emo_prosodic.output_dim(),
            InputBank::Single(b) => b.output_dim(),
        }
    }

    /// Grouped layout: `[bank_p(phoneme) | bank_e(emo_prosodic)]`.
    pub fn forward(&self, g: &GroupedInput) -> Result<(Tensor, InputBankCache)> {
        if g.phoneme.rows() != g.emo_prosodic.rows() {
            return Err(Error::dim("grouped input row counts", &[g.phoneme.rows()], &[g.emo_prosodic.rows()]));
        }
        match self {
            InputBank::Grouped { phoneme, emo_prosodic } => {
                let (yp, cp) = phoneme.forward(&g.phoneme)?;
                let (ye, ce) = emo_prosodic.forward(&g.emo_prosodic)?;
                Ok((
                    Tensor::concat_cols(&[&yp, &ye])?,
                    InputBankCache::Grouped { phoneme: cp, emo_prosodic: ce },
                ))
            }
            InputBank::Single(bank) => {
                let (y, c) = bank.forward(&g.concatenated())?;
                Ok((y, InputBankCache::Single(c)))
            }
        }
    }

    pub fn backward(&mut self, cache: &InputBankCache, dy: &Tensor, dp: usize) -> (Tensor, Tensor) {
        match (self, cache) {
            (InputBank::Grouped { phoneme, emo_prosodic }, InputBankCache::Grouped { phoneme: cp, emo_prosodic: ce }) => {
                let np = phoneme.output_dim();
                let dxp = phoneme.backward(cp, &dy.slice_cols(0, np));
                let dxe = emo_prosodic.backward(ce, &dy.slice_cols(np, emo_prosodic.output_dim()));
                (dxp, dxe)
            }
            (InputBank::Single(bank), InputBankCache::Single(c)) => {
                let dx = bank.backward(c, dy);
                let de = dx.cols() - dp;
                (dx.slice_cols(0, dp), dx.slice_cols(dp, de))
            }
            _ => unreachable!("bank cache does not match bank layout"),
        }
    }
}

impl Parameterized for InputBank {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            InputBank::Grouped { phoneme, emo_prosodic } => {
                phoneme.visit(f);
                emo_prosodic.visit(f);
            }
            InputBank::Single(b) => b.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            InputBank::Grouped { phoneme, emo_prosodic } => {
                phoneme.visit_mut(f);
                emo_prosodic.visit_mut(f);
            }
            InputBank::Single(b) => b.visit_mut(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionConv {
    pub conv: Conv1d,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    conv: ConvCache,
    bn: Option<BnCache>,
    out: Tensor,
}

/// Projection convolutions; every layer but the last is followed by ReLU.
#[derive(Debug, Clone)]
pub struct Projection {
    pub layers: Vec<ProjectionConv>,
}

impl Projection {
    pub fn new(prefix: &str, input: usize, spec: &[ProjectionLayer], rng: &mut SeededRng) -> Result<Self> {
        let mut cin = input;
        let mut layers = Vec::with_capacity(spec.len());
        for (i, p) in spec.iter().enumerate() {
            let name = format!("{prefix}.projection{i}");
            layers.push(ProjectionConv {
                conv: if p.batch_norm {
                    Conv1d::without_bias(&name, p.width, cin, p.channels, rng)?
                } else {
                    Conv1d::new(&name, p.width, cin, p.channels, rng)?
                },
                bn: p.batch_norm.then(|| BatchNorm::new(&format!("{name}.bn"), p.channels)),
                relu: i + 1 < spec.len(),
            });
            cin = p.channels;
        }
        Ok(Projection { layers })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.output_dim())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<ProjectionCache>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cc) = layer.conv.forward(&cur)?;
            let (mut y, bc) = match &layer.bn {
                Some(bn) => {
                    let (y, c) = bn.forward(&y, mode)?;
                    (y, Some(c))
                }
                None => (y, None),
            };
            if layer.relu {
                relu_inplace(&mut y);
            }
            caches.push(ProjectionCache { conv: cc, bn: bc, out: y.clone() });
            cur = y;
        }
        Ok((cur, caches))
    }

    pub fn commit(&mut self, caches: &[ProjectionCache]) {
        for (layer, c) in self.layers.iter_mut().zip(caches) {
            if let (Some(bn), Some(bc)) = (layer.bn.as_mut(), c.bn.as_ref()) {
                bn.commit(bc);
            }
        }
    }

    pub fn backward(&mut self, caches: &[ProjectionCache], dy: &Tensor) -> Tensor {
        let mut grad = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(caches).rev() {
            if layer.relu {
                grad = relu_backward(&c.out, &grad);
            }
            if let (Some(bn), Some(bc)) = (layer.bn.as_mut(), c.bn.as_ref()) {
                grad = bn.backward(bc, &grad);
            }
            grad = layer.conv.backward(&c.conv, &grad);
        }
        grad
    }
}

impl Parameterized for Projection {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            l.conv.visit(f);
            if let Some(bn) = &l.bn {
                bn.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.conv.visit_mut(f);
            if let Some(bn) = &mut l.bn {
                bn.visit_mut(f);
            }
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        for l in &self.layers {
            if let Some(bn) = &l.bn {
                bn.visit_buffers(f);
            }
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for l in &mut self.layers {
            if let Some(bn) = &mut l.bn {
                bn.visit_buffers_mut(f);
            }
        }
    }
}

/// Kinds of layer reported by [`Cbhg::structure`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv { width: usize, input: usize, output: usize },
    BatchNorm { channels: usize },
    MaxPool { width: usize },
    Linear { input: usize, output: usize },
    Highway { dim: usize },
    BiGru { input: usize, hidden: usize },
}

#[derive(Debug, Clone)]
pub struct Cbhg {
    pub config: CbhgConfig,
    pub input_dims: (usize, usize),
    pub bank: InputBank,
    pub pool: MaxPool1d,
    pub projection: Projection,
    /// Only present when the projection output width differs from the highway width.
    pub bridge: Option<Linear>,
    pub highway: Vec<Highway>,
    pub heads: Vec<GruStack>,
}

#[derive(Debug, Clone)]
pub struct CbhgOutput {
    /// Output of the last highway layer (the last representation shared by all heads).
    pub highway: Tensor,
    /// One `T x 2H` tensor per head, in configuration order.
    pub heads: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct CbhgTrace {
    rows: usize,
    bank: InputBankCache,
    pool: PoolCache,
    projection: Vec<ProjectionCache>,
    bridge: Option<LinearCache>,
    highway: Vec<HighwayCache>,
    heads: Vec<GruStackCache>,
}

impl Cbhg {
    pub fn new(prefix: &str, config: &CbhgConfig, dp: usize, de: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if dp == 0 || de == 0 {
            return Err(Error::Config("both input groups need at least one column".into()));
        }
        let bank = InputBank::new(prefix, config, dp, de, rng)?;
        let pool = MaxPool1d::new(config.pool_width)?;
        let projection = Projection::new(prefix, bank.output_dim(), &config.projection, rng)?;
        let bridge = (projection.output_dim() != config.highway_dim)
            .then(|| Linear::new(&format!("{prefix}.bridge"), projection.output_dim(), config.highway_dim, rng));
        let highway = (0..config.highway_layers)
            .map(|i| Highway::new(&format!("{prefix}.highway{i}"), config.highway_dim, rng))
            .collect();
        let heads = config
            .heads
            .iter()
            .map(|h| GruStack::new(&format!("{prefix}.head_{}", h.name), config.highway_dim, h.hidden, h.layers, rng))
            .collect();
        Ok(Cbhg {
            config: config.clone(),
            input_dims: (dp, de),
            bank,
            pool,
            projection,
            bridge,
            highway,
            heads,
        })
    }

    /// Convenience constructor with its own seeded generator.
    pub fn seeded(prefix: &str, config: &CbhgConfig, dp: usize, de: usize, seed: u64) -> Result<Self> {
        Cbhg::new(prefix, config, dp, de, &mut SeededRng::seed_from_u64(seed))
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.config.heads.iter().position(|h| h.name == name)
    }

    pub fn forward(&self, g: &GroupedInput, mode: Mode) -> Result<(CbhgOutput, CbhgTrace)> {
        let (dp, de) = self.input_dims;
        g.phoneme.expect_cols(dp, "phoneme-group input")?;
        g.emo_prosodic.expect_cols(de, "emotional/prosodic-group input")?;
        if g.is_empty() {
            return Err(Error::EmptySequence("CBHG input has zero rows".into()));
        }
        let (banked, bank_cache) = self.bank.forward(g)?;
        let (pooled, pool_cache) = self.pool.forward(&banked);
        let (mut x, proj_cache) = self.projection.forward(&pooled, mode)?;
        let bridge_cache = match &self.bridge {
            Some(l) => {
                let (y, c) = l.forward(&x)?;
                x = y;
                Some(c)
            }
            None => None,
        };
        let mut hw_caches = Vec::with_capacity(self.highway.len());
        for hw in &self.highway {
            let (y, c) = hw.forward(&x)?;
            hw_caches.push(c);
            x = y;
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut head_caches = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (y, c) = head.forward(&x)?;
            outs.push(y);
            head_caches.push(c);
        }
        Ok((
            CbhgOutput { highway: x, heads: outs },
            CbhgTrace {
                rows: g.len(),
                bank: bank_cache,
                pool: pool_cache,
                projection: proj_cache,
                bridge: bridge_cache,
                highway: hw_caches,
                heads: head_caches,
            },
        ))
    }

    /// Applies batch-norm running-statistic updates recorded by a train-mode forward.
    pub fn commit(&mut self, trace: &CbhgTrace) {
        self.projection.commit(&trace.projection);
    }

    /// Backpropagates head gradients (heads without a gradient are skipped entirely) plus an
    /// optional gradient arriving directly at the highway output. Returns input gradients.
    pub fn backward(
        &mut self,
        trace: &CbhgTrace,
        d_highway: Option<&Tensor>,
        d_heads: &[Option<Tensor>],
    ) -> Result<GroupedInput> {
        if d_heads.len() != self.heads.len() {
            return Err(Error::dim("head gradients", &[self.heads.len()], &[d_heads.len()]));
        }
        let t = trace.rows;
        let mut grad = Tensor::zeros(&[t, self.config.highway_dim]);
        if let Some(d) = d_highway {
            d.expect_shape(&[t, self.config.highway_dim], "highway gradient")?;
            grad.add_assign(d);
        }
        for ((head, cache), d) in self.heads.iter_mut().zip(&trace.heads).zip(d_heads) {
            if let Some(d) = d {
                d.expect_shape(&[t, head.output_dim()], "head gradient")?;
                grad.add_assign(&head.backward(cache, d));
            }
        }
        for (hw, c) in self.highway.iter_mut().zip(&trace.highway).rev() {
            grad = hw.backward(c, &grad);
        }
        if let (Some(l), Some(c)) = (self.bridge.as_mut(), trace.bridge.as_ref()) {
            grad = l.backward(c, &grad);
        }
        let grad = self.projection.backward(&trace.projection, &grad);
        let grad = self.pool.backward(&trace.pool, &grad);
        let (dp, de) = self.bank.backward(&trace.bank, &grad, self.input_dims.0);
        GroupedInput::new(dp, de)
    }

    /// Flat, ordered description of every layer, for structural checks.
    pub fn structure(&self) -> Vec<(String, LayerKind)> {
        let mut out = Vec::new();
        let mut push_bank = |path: &str, bank: &ConvBank| {
            for c in &bank.convs {
                out.push((
                    format!("{path}.k{}", c.width()),
                    LayerKind::Conv { width: c.width(), input: c.input_dim(), output: c.output_dim() },
                ));
            }
        };
        match &self.bank {
            InputBank::Grouped { phoneme, emo_prosodic } => {
                push_bank("bank_phoneme", phoneme);
                push_bank("bank_emo", emo_prosodic);
            }
            InputBank::Single(b) => push_bank("bank", b),
        }
        out.push(("pool".into(), LayerKind::MaxPool { width: self.pool.width() }));
        for (i, l) in self.projection.layers.iter().enumerate() {
            let c = &l.conv;
            out.push((
                format!("projection{i}"),
                LayerKind::Conv { width: c.width(), input: c.input_dim(), output: c.output_dim() },
            ));
            if let Some(bn) = &l.bn {
                out.push((format!("projection{i}.bn"), LayerKind::BatchNorm { channels: bn.channels() }));
            }
        }
        if let Some(b) = &self.bridge {
            out.push(("bridge".into(), LayerKind::Linear { input: b.input_dim(), output: b.output_dim() }));
        }
        for (i, h) in self.highway.iter().enumerate() {
            out.push((format!("highway{i}"), LayerKind::Highway { dim: h.dim() }));
        }
        for (cfg, head) in self.config.heads.iter().zip(&self.heads) {
            for (i, l) in head.layers.iter().enumerate() {
                out.push((
                    format!("head_{}.layer{i}", cfg.name),
                    LayerKind::BiGru { input: l.fwd.input_dim(), hidden: l.hidden() },
                ));
            }
        }
        out
    }
}

impl Parameterized for Cbhg {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.bank.visit(f);
        self.projection.visit(f);
        if let Some(b) = &self.bridge {
            b.visit(f);
        }
        self.highway.iter().for_each(|h| h.visit(f));
        self.heads.iter().for_each(|h| h.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bank.visit_mut(f);
        self.projection.visit_mut(f);
        if let Some(b) = &mut self.bridge {
            b.visit_mut(f);
        }
        self.highway.iter_mut().for_each(|h| h.visit_mut(f));
        self.heads.iter_mut().for_each(|h| h.visit_mut(f));
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.projection.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.projection.visit_buffers_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_check, DEFAULT_EPS};
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    fn grouped(t: usize, dp: usize, de: usize, rng: &mut SeededRng) -> GroupedInput {
        GroupedInput::new(random(t, dp, rng), random(t, de, rng)).unwrap()
    }

    #[test]
    fn bank_shapes() {
        let mut rng = SeededRng::seed_from_u64(1);
        let x = random(7, 3, &mut rng);
        assert_eq!(conv_bank_forward(&x, &[1, 2], 4, &mut rng).unwrap().shape(), &[7, 8]);
        let widths: Vec<usize> = (1..=8).collect();
        assert_eq!(conv_bank_forward(&x, &widths, 16, &mut rng).unwrap().shape(), &[7, 128]);
        assert!(conv_bank_forward(&x, &[], 4, &mut rng).is_err());
    }

    #[test]
    fn zero_bank_outputs_zero() {
        let mut rng = SeededRng::seed_from_u64(2);
        let mut bank = ConvBank::new("b", &[1, 3], 2, 3, &mut rng).unwrap();
        bank.visit_mut(&mut |p| p.value.fill(0.0));
        let (y, _) = bank.forward(&random(5, 2, &mut rng)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grouped_bank_width_and_length() {
        let mut rng = SeededRng::seed_from_u64(3);
        let cfg = CbhgConfig::duration();
        let bank = InputBank::new("m", &cfg, 5, 4, &mut rng).unwrap();
        assert_eq!(bank.output_dim(), 2 * 8 * 16);
        let (y, _) = bank.forward(&grouped(1, 5, 4, &mut rng)).unwrap();
        assert_eq!(y.shape(), &[1, 256]);
        let bad = GroupedInput { phoneme: random(3, 5, &mut rng), emo_prosodic: random(2, 4, &mut rng) };
        assert!(matches!(bank.forward(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn group_banks_are_independent() {
        let mut rng = SeededRng::seed_from_u64(4);
        let cfg = CbhgConfig::tiny_acoustic();
        let bank = InputBank::new("m", &cfg, 6, 5, &mut rng).unwrap();
        let half = cfg.bank_widths.len() * cfg.channels_per_filter;
        for _ in 0..5 {
            let g = grouped(9, 6, 5, &mut rng);
            let (y, _) = bank.forward(&g).unwrap();

            let mut other = g.clone();
            other.emo_prosodic = random(9, 5, &mut rng);
            let (y2, _) = bank.forward(&other).unwrap();
            assert_eq!(y.slice_cols(0, half), y2.slice_cols(0, half));

            let mut other = g.clone();
            other.phoneme = random(9, 6, &mut rng);
            let (y3, _) = bank.forward(&other).unwrap();
            assert_eq!(y.slice_cols(half, half), y3.slice_cols(half, half));
        }
    }

    #[test]
    fn full_size_head_widths() {
        let mut rng = SeededRng::seed_from_u64(5);
        let dur = Cbhg::new("d", &CbhgConfig::duration(), 33, 24, &mut rng).unwrap();
        let (out, _) = dur.forward(&grouped(4, 33, 24, &mut rng), Mode::Infer).unwrap();
        assert_eq!(out.heads.len(), 1);
        assert_eq!(out.heads[0].shape(), &[4, 64]);
        assert_eq!(out.highway.shape(), &[4, 64]);

        let ac = Cbhg::new("a", &CbhgConfig::acoustic(), 34, 24, &mut rng).unwrap();
        let (out, _) = ac.forward(&grouped(3, 34, 24, &mut rng), Mode::Infer).unwrap();
        let widths: Vec<usize> = out.heads.iter().map(|h| h.cols()).collect();
        assert_eq!(widths, vec![256, 32, 32, 64]);
        assert!(out.heads.iter().all(|h| h.rows() == 3));
    }

    #[test]
    fn every_stage_preserves_length() {
        let mut rng = SeededRng::seed_from_u64(6);
        let m = Cbhg::new("d", &CbhgConfig::tiny_acoustic(), 3, 2, &mut rng).unwrap();
        for t in [1, 2, 7] {
            let (out, _) = m.forward(&grouped(t, 3, 2, &mut rng), Mode::Train).unwrap();
            assert!(out.heads.iter().all(|h| h.rows() == t));
        }
        let empty = GroupedInput::new(Tensor::zeros(&[0, 3]), Tensor::zeros(&[0, 2])).unwrap();
        assert!(matches!(m.forward(&empty, Mode::Infer), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn zeroing_one_head_leaves_others() {
        let mut rng = SeededRng::seed_from_u64(7);
        let mut m = Cbhg::new("a", &CbhgConfig::tiny_acoustic(), 3, 2, &mut rng).unwrap();
        let g = grouped(6, 3, 2, &mut rng);
        let (before, _) = m.forward(&g, Mode::Infer).unwrap();
        let e = m.head_index("energy").unwrap();
        m.heads[e].visit_mut(&mut |p| p.value.fill(0.0));
        let (after, _) = m.forward(&g, Mode::Infer).unwrap();
        for i in 0..before.heads.len() {
            if i == e {
                assert_ne!(before.heads[i], after.heads[i]);
            } else {
                assert_eq!(before.heads[i], after.heads[i]);
            }
        }
    }

    #[test]
    fn cross_head_gradients_are_exactly_zero() {
        let mut rng = SeededRng::seed_from_u64(8);
        let mut m = Cbhg::new("a", &CbhgConfig::tiny_acoustic(), 3, 2, &mut rng).unwrap();
        let g = grouped(5, 3, 2, &mut rng);
        for src in 0..m.heads.len() {
            m.zero_grad();
            let (out, trace) = m.forward(&g, Mode::Train).unwrap();
            let d: Vec<Option<Tensor>> = (0..m.heads.len())
                .map(|i| (i == src).then(|| random(5, out.heads[i].cols(), &mut rng)))
                .collect();
            m.backward(&trace, None, &d).unwrap();
            for (i, head) in m.heads.iter().enumerate() {
                let mut nonzero = false;
                head.visit(&mut |p| nonzero |= p.grad.data().iter().any(|&v| v != 0.0));
                assert_eq!(nonzero, i == src, "source head {src}, head {i}");
            }
        }
    }

    #[test]
    fn structure_has_no_bank_norm_and_expected_shapes() {
        let mut rng = SeededRng::seed_from_u64(9);
        let m = Cbhg::new("d", &CbhgConfig::duration(), 33, 24, &mut rng).unwrap();
        let s = m.structure();
        let banks: Vec<_> = s.iter().filter(|(n, _)| n.starts_with("bank")).collect();
        assert_eq!(banks.len(), 16);
        assert!(banks.iter().all(|(_, k)| matches!(k, LayerKind::Conv { .. })));
        assert!(s.contains(&("pool".into(), LayerKind::MaxPool { width: 2 })));
        assert_eq!(s.iter().filter(|(_, k)| matches!(k, LayerKind::Highway { .. })).count(), 1);
        assert_eq!(s.iter().filter(|(_, k)| matches!(k, LayerKind::BatchNorm { .. })).count(), 2);
        let grus: Vec<_> = s.iter().filter(|(_, k)| matches!(k, LayerKind::BiGru { .. })).collect();
        assert_eq!(grus.len(), 2);
        assert_eq!(grus[0].1, LayerKind::BiGru { input: 64, hidden: 32 });
        assert_eq!(grus[1].1, LayerKind::BiGru { input: 64, hidden: 32 });
    }

    #[test]
    fn output_is_not_shifted_by_the_input() {
        // With zero projection weights nothing downstream can see the input unless some path
        // skips around the projection.
        let mut rng = SeededRng::seed_from_u64(10);
        let mut m = Cbhg::new("d", &CbhgConfig::tiny_duration(), 3, 2, &mut rng).unwrap();
        for l in &mut m.projection.layers {
            l.conv.weight.value.fill(0.0);
        }
        let a = m.forward(&grouped(4, 3, 2, &mut rng), Mode::Infer).unwrap().0;
        let b = m.forward(&grouped(4, 3, 2, &mut rng), Mode::Infer).unwrap().0;
        assert_eq!(a.heads, b.heads);
    }

    #[test]
    fn tiny_trunk_gradients_match_central_differences() {
        let mut rng = SeededRng::seed_from_u64(11);
        let mut m = Cbhg::new("d", &CbhgConfig::tiny_duration(), 3, 2, &mut rng).unwrap();
        let g = grouped(4, 3, 2, &mut rng);
        let w_head = random(4, 6, &mut rng);
        let w_hw = random(4, 4, &mut rng);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let report = finite_diff_check(
            &mut m,
            &mut |m: &mut Cbhg| {
                let (out, _) = m.forward(&g, Mode::Train)?;
                Ok(dot(&out.heads[0], &w_head) + dot(&out.highway, &w_hw))
            },
            &mut |m: &mut Cbhg| {
                let (_, trace) = m.forward(&g, Mode::Train)?;
                m.backward(&trace, Some(&w_hw), &[Some(w_head.clone())])?;
                Ok(())
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn input_gradients_match_central_differences() {
        let mut rng = SeededRng::seed_from_u64(12);
        let mut m = Cbhg::new("d", &CbhgConfig::tiny_duration(), 3, 2, &mut rng).unwrap();
        let g = grouped(4, 3, 2, &mut rng);
        let w = random(4, 6, &mut rng);
        let loss = |m: &Cbhg, g: &GroupedInput| {
            let (out, _) = m.forward(g, Mode::Infer).unwrap();
            out.heads[0].data().iter().zip(w.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let (_, trace) = m.forward(&g, Mode::Infer).unwrap();
        let dg = m.backward(&trace, None, &[Some(w.clone())]).unwrap();
        for (r, c) in [(0, 0), (2, 1), (3, 2)] {
            let mut plus = g.clone();
            plus.phoneme.set(r, c, g.phoneme.get(r, c) + 1e-5);
            let mut minus = g.clone();
            minus.phoneme.set(r, c, g.phoneme.get(r, c) - 1e-5);
            let numeric = (loss(&m, &plus) - loss(&m, &minus)) / 2e-5;
            assert!(crate::nn::relative_error(dg.phoneme.get(r, c), numeric) < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = CbhgConfig::duration();
        c.bank_widths = vec![2, 2];
        assert!(c.validate().is_err());
        let mut c = CbhgConfig::duration();
        c.highway_layers = 0;
        assert!(c.validate().is_err());
        let mut c = CbhgConfig::duration();
        c.heads[0].bidirectional = false;
        assert!(c.validate().is_err());
        assert!(CbhgConfig::acoustic().validate().is_ok());
    }
}
