//! Binary checkpoint files: `EMPHCKPT`, a little-endian u32 version, the model configuration
//! as length-prefixed JSON, then one record per parameter (visit order) followed by one per
//! batch-norm buffer. Each record is a u16-length name, a u8 rank, u32 dimensions and f32
//! values.

use std::path::Path;

use super::{AcousticModel, DurationModel, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMPHCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum LoadedModel {
    Duration(DurationModel),
    Acoustic(AcousticModel),
}

/// Rounds every parameter and buffer to the nearest f32, i.e. to exactly what a checkpoint
/// stores.
pub fn quantize_f32<M: Parameterized + ?Sized>(model: &mut M) {
    model.visit_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64));
    model.visit_buffers_mut(&mut |b| b.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64));
}

fn push_record(out: &mut Vec<u8>, name: &str, value: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(value.shape().len() as u8);
    for &d in value.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in value.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn checkpoint_to_bytes<M: Parameterized + ?Sized>(config: &ModelConfig, model: &M) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    model.visit(&mut |p| push_record(&mut out, &p.name, &p.value));
    model.visit_buffers(&mut |b| push_record(&mut out, &b.name, &b.value));
    Ok(out)
}

pub fn save_checkpoint<M: Parameterized + ?Sized>(path: &Path, config: &ModelConfig, model: &M) -> Result<()> {
    let bytes = checkpoint_to_bytes(config, model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let n = u16::from_le_bytes(self.take(2, "record name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(self.take(n, "record name")?.to_vec())
            .map_err(|_| Error::format(self.path, "record name is not UTF-8"))?;
        let rank = self.take(1, "record rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("record dimensions")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok((name, shape, data))
    }
}

fn fill_model<M: Parameterized + ?Sized>(model: &mut M, r: &mut Reader) -> Result<()> {
    let mut expected = Vec::new();
    model.visit(&mut |p| expected.push((p.name.clone(), p.value.shape().to_vec())));
    model.visit_buffers(&mut |b| expected.push((b.name.clone(), b.value.shape().to_vec())));
    let mut values = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let (got_name, got_shape, data) = r.record()?;
        if &got_name != name {
            return Err(Error::format(r.path, format!("expected record `{name}`, found `{got_name}`")));
        }
        if &got_shape != shape {
            return Err(Error::format(
                r.path,
                format!("record `{name}` has shape {got_shape:?}, configuration implies {shape:?}"),
            ));
        }
        values.push(data);
    }
    if r.pos != r.bytes.len() {
        return Err(Error::format(r.path, format!("{} trailing bytes after last record", r.bytes.len() - r.pos)));
    }
    let mut it = values.into_iter();
    model.visit_mut(&mut |p| p.value.data_mut().copy_from_slice(&it.next().expect("counted")));
    model.visit_buffers_mut(&mut |b| b.value.data_mut().copy_from_slice(&it.next().expect("counted")));
    Ok(())
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<LoadedModel> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::format(path, format!("bad config JSON: {e}")))?;
    match config {
        ModelConfig::Duration(c) => {
            let mut m = DurationModel::new(c)?;
            fill_model(&mut m, &mut r)?;
            Ok(LoadedModel::Duration(m))
        }
        ModelConfig::Acoustic(c) => {
            let mut m = AcousticModel::new(c)?;
            fill_model(&mut m, &mut r)?;
            Ok(LoadedModel::Acoustic(m))
        }
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}

pub fn load_duration(path: &Path) -> Result<DurationModel> {
    match load_model(path)? {
        LoadedModel::Duration(m) => Ok(m),
        LoadedModel::Acoustic(_) => Err(Error::format(path, "expected a duration checkpoint, found acoustic")),
    }
}

pub fn load_acoustic(path: &Path) -> Result<AcousticModel> {
    match load_model(path)? {
        LoadedModel::Acoustic(m) => Ok(m),
        LoadedModel::Duration(_) => Err(Error::format(path, "expected an acoustic checkpoint, found duration")),
    }
}

impl DurationModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &ModelConfig::Duration(self.config.clone()), self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_to_bytes(&ModelConfig::Duration(self.config.clone()), self)
    }
}

impl AcousticModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &ModelConfig::Acoustic(self.config.clone()), self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_to_bytes(&ModelConfig::Acoustic(self.config.clone()), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::LinguisticSchema;
    use crate::models::{AcousticConfig, DurationConfig};

    fn values<M: Parameterized>(m: &M) -> Vec<f64> {
        let mut v = Vec::new();
        m.visit(&mut |p| v.extend_from_slice(p.value.data()));
        m.visit_buffers(&mut |b| v.extend_from_slice(b.value.data()));
        v
    }

    #[test]
    fn round_trip_restores_quantized_state() {
        let mut m = AcousticModel::new(AcousticConfig::tiny(LinguisticSchema::default_toy(), 3)).unwrap();
        m.trunk.visit_buffers_mut(&mut |b| b.value.fill(0.3));
        let bytes = m.to_bytes().unwrap();
        let loaded = match checkpoint_from_bytes(&bytes, Path::new("mem")).unwrap() {
            LoadedModel::Acoustic(a) => a,
            other => panic!("{other:?}"),
        };
        quantize_f32(&mut m);
        assert_eq!(values(&m), values(&loaded));
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let m = DurationModel::new(DurationConfig::tiny(LinguisticSchema::default_toy(), 1)).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"EMPHCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let cfg: ModelConfig = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        assert_eq!(cfg, ModelConfig::Duration(m.config.clone()));
        let name_len = u16::from_le_bytes(bytes[16 + n..18 + n].try_into().unwrap()) as usize;
        let first = std::str::from_utf8(&bytes[18 + n..18 + n + name_len]).unwrap();
        assert_eq!(first, m.param_names()[0]);
    }

    #[test]
    fn rejects_bad_magic_version_and_shapes() {
        let m = DurationModel::new(DurationConfig::tiny(LinguisticSchema::default_toy(), 1)).unwrap();
        let good = m.to_bytes().unwrap();
        let p = Path::new("x.ckpt");

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad, p), Err(Error::Format { .. })));

        let mut bad = good.clone();
        bad[8] = 9;
        assert!(matches!(checkpoint_from_bytes(&bad, p), Err(Error::Format { .. })));

        // same parameters under a config with a wider highway: shapes disagree
        let mut cfg = m.config.clone();
        cfg.trunk.highway_dim += 1;
        let mut other = DurationModel::new(cfg.clone()).unwrap();
        other.config = m.config.clone();
        let mismatched = other.to_bytes().unwrap();
        assert!(matches!(checkpoint_from_bytes(&mismatched, p), Err(Error::Format { .. })));

        assert!(matches!(checkpoint_from_bytes(&good[..good.len() - 3], p), Err(Error::Format { .. })));
    }

    #[test]
    fn kind_mismatch_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let m = DurationModel::new(DurationConfig::tiny(LinguisticSchema::default_toy(), 1)).unwrap();
        m.save(&path).unwrap();
        assert!(load_duration(&path).is_ok());
        assert!(matches!(load_acoustic(&path), Err(Error::Format { .. })));
        assert!(matches!(load_model(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
