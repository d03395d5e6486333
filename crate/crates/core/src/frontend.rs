//! Linguistic feature schema, one-hot encoding, frame-level upsampling and the log-duration
//! transform.
//!
//! Each phoneme carries only its own features; there are no context windows over neighbouring
//! phonemes (the convolution banks supply context).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cbhg::GroupedInput;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PHONEME_ID: &str = "phoneme_id";
pub const TONE: &str = "tone";
pub const STRESS: &str = "stress";
pub const BREAK_LEVEL: &str = "break_level";
pub const PROSODIC_LEVEL: &str = "prosodic_level";
pub const SYNTACTIC_LEVEL: &str = "syntactic_level";
pub const POS_TAG: &str = "pos_tag";
pub const EMOTION_TYPE: &str = "emotion_type";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    PhonemeRelated,
    EmotionalProsodic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub cardinality: usize,
    pub group: FeatureGroup,
}

/// Sentence type, stored as the `emotion_type` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Declarative,
    Interrogative,
    Exclamatory,
}

impl Emotion {
    pub const ALL: [Emotion; 3] = [Emotion::Declarative, Emotion::Interrogative, Emotion::Exclamatory];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Emotion::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Declarative => "declarative",
            Emotion::Interrogative => "interrogative",
            Emotion::Exclamatory => "exclamatory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinguisticSchema {
    features: Vec<FeatureDef>,
}

impl LinguisticSchema {
    pub fn new(features: Vec<FeatureDef>) -> Result<Self> {
        for (i, f) in features.iter().enumerate() {
            if f.cardinality < 2 {
                return Err(Error::Config(format!("feature `{}` needs cardinality >= 2", f.name)));
            }
            if features[..i].iter().any(|o| o.name == f.name) {
                return Err(Error::Config(format!("duplicate feature `{}`", f.name)));
            }
        }
        for g in [FeatureGroup::PhonemeRelated, FeatureGroup::EmotionalProsodic] {
            if !features.iter().any(|f| f.group == g) {
                return Err(Error::Config(format!("schema has no {g:?} feature")));
            }
        }
        Ok(LinguisticSchema { features })
    }

    /// The toy-language feature set: 33 phoneme-related and 24 emotional/prosodic columns.
    pub fn default_toy() -> Self {
        use FeatureGroup::*;
        let f = |name: &str, cardinality, group| FeatureDef { name: name.into(), cardinality, group };
        LinguisticSchema::new(vec![
            f(PHONEME_ID, 24, PhonemeRelated),
            f(TONE, 6, PhonemeRelated),
            f(STRESS, 3, PhonemeRelated),
            f(BREAK_LEVEL, 5, EmotionalProsodic),
            f(PROSODIC_LEVEL, 4, EmotionalProsodic),
            f(SYNTACTIC_LEVEL, 4, EmotionalProsodic),
            f(POS_TAG, 8, EmotionalProsodic),
            f(EMOTION_TYPE, 3, EmotionalProsodic),
        ])
        .expect("toy schema is valid")
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    fn group_width(&self, group: FeatureGroup) -> usize {
        self.features.iter().filter(|f| f.group == group).map(|f| f.cardinality).sum()
    }

    /// One-hot width of the phoneme-related group.
    pub fn dp(&self) -> usize {
        self.group_width(FeatureGroup::PhonemeRelated)
    }

    /// One-hot width of the emotional & prosodic group.
    pub fn de(&self) -> usize {
        self.group_width(FeatureGroup::EmotionalProsodic)
    }
}

/// One categorical value per schema feature, in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhonemeLabel {
    pub values: Vec<usize>,
}

impl PhonemeLabel {
    pub fn get(&self, schema: &LinguisticSchema, name: &str) -> Option<usize> {
        schema.index_of(name).and_then(|i| self.values.get(i).copied())
    }
}

/// Per-phoneme frame counts, all at least one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationSeq(Vec<u32>);

impl DurationSeq {
    pub fn new(frames: Vec<u32>) -> Result<Self> {
        if let Some(p) = frames.iter().position(|&d| d < 1) {
            return Err(Error::Duration(format!("phoneme {p} has zero frames")));
        }
        Ok(DurationSeq(frames))
    }

    pub fn frames(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }
}

/// Concatenated one-hot blocks per group, schema order within each group.
pub fn encode_sequence(labels: &[PhonemeLabel], schema: &LinguisticSchema) -> Result<GroupedInput> {
    let n = labels.len();
    let (dp, de) = (schema.dp(), schema.de());
    let mut p = Tensor::zeros(&[n, dp]);
    let mut e = Tensor::zeros(&[n, de]);
    for (pos, label) in labels.iter().enumerate() {
        if label.values.len() != schema.features().len() {
            return Err(Error::dim("phoneme label", &[schema.features().len()], &[label.values.len()]));
        }
        let (mut op, mut oe) = (0, 0);
        for (f, &v) in schema.features().iter().zip(&label.values) {
            if v >= f.cardinality {
                return Err(Error::Encoding {
                    feature: f.name.clone(),
                    position: pos,
                    value: v,
                    cardinality: f.cardinality,
                });
            }
            match f.group {
                FeatureGroup::PhonemeRelated => {
                    p.set(pos, op + v, 1.0);
                    op += f.cardinality;
                }
                FeatureGroup::EmotionalProsodic => {
                    e.set(pos, oe + v, 1.0);
                    oe += f.cardinality;
                }
            }
        }
    }
    GroupedInput::new(p, e)
}

/// Inverse of [`encode_sequence`] by per-block argmax.
pub fn decode_sequence(g: &GroupedInput, schema: &LinguisticSchema) -> Vec<PhonemeLabel> {
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    (0..g.len())
        .map(|r| {
            let (mut op, mut oe) = (0, 0);
            let values = schema
                .features()
                .iter()
                .map(|f| match f.group {
                    FeatureGroup::PhonemeRelated => {
                        let v = argmax(&g.phoneme.row(r)[op..op + f.cardinality]);
                        op += f.cardinality;
                        v
                    }
                    FeatureGroup::EmotionalProsodic => {
                        let v = argmax(&g.emo_prosodic.row(r)[oe..oe + f.cardinality]);
                        oe += f.cardinality;
                        v
                    }
                })
                .collect();
            PhonemeLabel { values }
        })
        .collect()
}

/// Repeats phoneme row `p` `d[p]` times. With `position_feature`, appends `(i + 0.5) / d[p]`
/// to the phoneme group for the `i`-th frame of each phoneme.
pub fn upsample_to_frames(g: &GroupedInput, d: &[u32], position_feature: bool) -> Result<GroupedInput> {
    if d.len() != g.len() {
        return Err(Error::dim("durations vs phonemes", &[g.len()], &[d.len()]));
    }
    if let Some(p) = d.iter().position(|&x| x < 1) {
        return Err(Error::Duration(format!("phoneme {p} has zero frames")));
    }
    let total: usize = d.iter().map(|&x| x as usize).sum();
    let dp = g.phoneme.cols() + usize::from(position_feature);
    let de = g.emo_prosodic.cols();
    let mut p = Tensor::zeros(&[total, dp]);
    let mut e = Tensor::zeros(&[total, de]);
    let mut t = 0;
    for (row, &n) in d.iter().enumerate() {
        for i in 0..n as usize {
            let dst = p.row_mut(t);
            dst[..g.phoneme.cols()].copy_from_slice(g.phoneme.row(row));
            if position_feature {
                dst[dp - 1] = (i as f64 + 0.5) / n as f64;
            }
            e.row_mut(t).copy_from_slice(g.emo_prosodic.row(row));
            t += 1;
        }
    }
    GroupedInput::new(p, e)
}

/// `ln(frames)`.
pub fn duration_encode(frames: u32) -> Result<f64> {
    if frames < 1 {
        return Err(Error::Domain("duration must be at least one frame".into()));
    }
    Ok((frames as f64).ln())
}

/// `max(1, round(exp(y)))`, rounding half away from zero.
pub fn duration_decode(y: f64) -> u32 {
    let v = y.exp().round();
    if v.is_nan() || v < 1.0 {
        1
    } else if v >= u32::MAX as f64 {
        u32::MAX
    } else {
        v as u32
    }
}

/// One entry of a label file: features by name for every phoneme, plus optional ground-truth
/// frame counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelUtterance {
    pub id: String,
    pub phonemes: Vec<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<u32>>,
}

impl LabelUtterance {
    pub fn from_labels(id: &str, labels: &[PhonemeLabel], schema: &LinguisticSchema, frames: Option<&DurationSeq>) -> Self {
        let phonemes = labels
            .iter()
            .map(|l| {
                schema
                    .features()
                    .iter()
                    .zip(&l.values)
                    .map(|(f, &v)| (f.name.clone(), v))
                    .collect()
            })
            .collect();
        LabelUtterance {
            id: id.to_string(),
            phonemes,
            frames: frames.map(|d| d.frames().to_vec()),
        }
    }

    /// Resolves named features against `schema`. Unknown or missing features are schema
    /// mismatches; out-of-range values are encoding errors.
    pub fn to_labels(&self, schema: &LinguisticSchema) -> Result<Vec<PhonemeLabel>> {
        self.phonemes
            .iter()
            .enumerate()
            .map(|(pos, rec)| {
                if let Some(unknown) = rec.keys().find(|k| schema.index_of(k).is_none()) {
                    return Err(Error::SchemaMismatch {
                        feature: unknown.clone(),
                        detail: format!("phoneme {pos} of `{}` uses a feature the model does not know", self.id),
                    });
                }
                let values = schema
                    .features()
                    .iter()
                    .map(|f| {
                        let v = *rec.get(&f.name).ok_or_else(|| Error::SchemaMismatch {
                            feature: f.name.clone(),
                            detail: format!("missing at phoneme {pos} of `{}`", self.id),
                        })?;
                        if v >= f.cardinality {
                            return Err(Error::Encoding {
                                feature: f.name.clone(),
                                position: pos,
                                value: v,
                                cardinality: f.cardinality,
                            });
                        }
                        Ok(v)
                    })
                    .collect::<Result<_>>()?;
                Ok(PhonemeLabel { values })
            })
            .collect()
    }

    pub fn durations(&self) -> Result<Option<DurationSeq>> {
        match &self.frames {
            None => Ok(None),
            Some(f) => {
                if f.len() != self.phonemes.len() {
                    return Err(Error::dim("label frames vs phonemes", &[self.phonemes.len()], &[f.len()]));
                }
                DurationSeq::new(f.clone()).map(Some)
            }
        }
    }
}

pub fn read_label_file(path: &Path) -> Result<Vec<LabelUtterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_label_file(path: &Path, utterances: &[LabelUtterance]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(utterances).expect("labels serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
