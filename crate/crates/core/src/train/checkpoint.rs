//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MDF3DCKP`, `u32` version, `u64` length +
//! UTF-8 config text, `u64` blob count, then per blob `u32` name length,
//! name, `u32` rank, `u64` dims and `f64` values. Blobs are parameters
//! (`param/<name>`), running statistics (`norm/<layer>/<dataset>/{mean,var}`)
//! and optimizer state (`adam/step`, `adam/m/<name>`, `adam/v/<name>`).

use super::model::{Model, ModelConfig};
use super::{Adam, TrainConfig};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MDF3DCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    pub train: TrainConfig,
}

fn slot_label(model: &Model, slot: usize, layer: usize) -> String {
    if model.encoder.norms[layer].dataset_specific {
        model.cfg.datasets[slot].name.clone()
    } else {
        "pooled".into()
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let text = format!(
        "{}{}",
        ck.model.cfg.to_config_text(),
        ck.train
            .to_config_text()
            .lines()
            .map(|l| format!("train.{l}\n"))
            .collect::<String>()
    );
    let mut blobs: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in ck.model.params.iter() {
        blobs.push((format!("param/{name}"), t.clone()));
    }
    for (layer, norm) in ck.model.encoder.norms.iter().enumerate() {
        for (slot, s) in norm.stats.iter().enumerate() {
            let label = slot_label(&ck.model, slot, layer);
            let vec = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).expect("1-d");
            blobs.push((format!("norm/{layer}/{label}/mean"), vec(&s.mean)));
            blobs.push((format!("norm/{layer}/{label}/var"), vec(&s.var)));
        }
    }
    blobs.push(("adam/step".into(), Tensor::scalar(ck.optimizer.step as f64)));
    for ((name, _), (m, v)) in ck.model.params.iter().zip(ck.optimizer.m.iter().zip(&ck.optimizer.v)) {
        blobs.push((format!("adam/m/{name}"), m.clone()));
        blobs.push((format!("adam/v/{name}"), v.clone()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for (name, t) in &blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} too large")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let len = r.u64("config length")?;
    let text = r.string(len, "config text")?;
    let count = r.u64("blob count")?;
    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = r.string(n, "blob name")?;
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| Error::Format(format!("blob `{name}`: implausible shape {dims:?}")))?;
        let raw = r.take(numel * 8, "blob values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        blobs.insert(name, Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }

    let config = Config::parse(&text)?;
    let cfg = ModelConfig::from_config(&config)?;
    let train = TrainConfig::from_config(&config.section("train"))?;
    let mut model = Model::new(cfg, 0)?;
    let mut take = |key: &str, shape: &[usize]| -> Result<Option<Tensor>> {
        match blobs.remove(key) {
            None => Ok(None),
            Some(t) if t.shape() == shape => Ok(Some(t)),
            Some(t) => Err(Error::Format(format!("blob `{key}`: shape {:?}, expected {shape:?}", t.shape()))),
        }
    };
    let missing = |key: &str| Error::Format(format!("checkpoint lacks `{key}`"));
    let ids: Vec<_> = model.params.ids().collect();
    let mut optimizer = Adam::new(&model.params, train.weight_decay);
    for (i, &id) in ids.iter().enumerate() {
        let name = model.params.name(id).to_string();
        let shape = model.params.get(id).shape().to_vec();
        let key = format!("param/{name}");
        let value = take(&key, &shape)?.ok_or_else(|| missing(&key))?;
        model.params.set(id, value)?;
        for (prefix, slot) in [("m", &mut optimizer.m[i]), ("v", &mut optimizer.v[i])] {
            let key = format!("adam/{prefix}/{name}");
            *slot = take(&key, &shape)?.ok_or_else(|| missing(&key))?;
        }
    }
    let step = take("adam/step", Tensor::scalar(0.0).shape())?.ok_or_else(|| missing("adam/step"))?.item();
    if !(step >= 0.0 && step.fract() == 0.0) {
        return Err(Error::Format(format!("adam/step {step} is not a count")));
    }
    optimizer.step = step as u64;
    for layer in 0..model.encoder.norms.len() {
        for slot in 0..model.encoder.norms[layer].stats.len() {
            let label = slot_label(&model, slot, layer);
            let c = model.encoder.norms[layer].channels;
            let mut get = |what: &str| -> Result<Vec<f64>> {
                let key = format!("norm/{layer}/{label}/{what}");
                take(&key, &[c])?.map(Tensor::into_data).ok_or_else(|| {
                    Error::Registry(format!("checkpoint has no running statistics for dataset `{label}` (layer {layer})"))
                })
            };
            let mean = get("mean")?;
            let var = get("var")?;
            model.encoder.norms[layer].stats[slot].mean = mean;
            model.encoder.norms[layer].stats[slot].var = var;
        }
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Format(format!("unexpected blob `{extra}` in checkpoint")));
    }
    Ok(Checkpoint { model, optimizer, train })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::geometry::Range3D;
    use crate::train::experiment::{preset_spec, DomainPreset};
    use crate::train::Toggles;

    fn checkpoint(toggles: Toggles) -> Checkpoint {
        let mut cfg = ModelConfig::new(
            vec![preset_spec(DomainPreset::A), preset_spec(DomainPreset::B)],
            Range3D::new([-3.2, 3.2], [-3.2, 3.2], [-3.0, 3.0]).unwrap(),
            0.8,
        );
        cfg.encoder = EncoderConfig {
            pillar_channels: 4,
            channels: 4,
        };
        cfg.se_reduction = 2;
        cfg.toggles = toggles;
        let mut model = Model::new(cfg, 5).unwrap();
        model.encoder.norms[1].stats[0].mean[2] = 0.125;
        let mut optimizer = Adam::new(&model.params, 0.01);
        optimizer.step = 7;
        optimizer.m[3].data_mut()[0] = -1.5;
        Checkpoint {
            model,
            optimizer,
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for t in [Toggles::full(), Toggles::direct_merge()] {
            let ck = checkpoint(t);
            let bytes = to_bytes(&ck);
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn version_and_truncation_are_format_errors() {
        let bytes = to_bytes(&checkpoint(Toggles::full()));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn missing_norm_state_is_a_registry_error() {
        let mut ck = checkpoint(Toggles::full());
        // register a third dataset in the config only: its statistics are absent
        let mut c = preset_spec(DomainPreset::A);
        c.name = "c".into();
        let bytes = to_bytes(&ck);
        ck.model.cfg.datasets.push(c);
        let grown = Model::new(ck.model.cfg.clone(), 5).unwrap();
        let mut with_c = ck.clone();
        with_c.model = grown;
        with_c.optimizer = Adam::new(&with_c.model.params, 0.01);
        let full = to_bytes(&with_c);
        // splice: new config + heads, but the old (two-dataset) statistics
        let stripped = strip_blobs(&full, |n| n.starts_with("norm/") && n.contains("/c/"));
        let err = from_bytes(&stripped);
        assert!(matches!(err, Err(Error::Registry(_))), "{err:?}");
        assert!(from_bytes(&bytes).is_ok());
    }

    fn strip_blobs(bytes: &[u8], drop: impl Fn(&str) -> bool) -> Vec<u8> {
        let mut r = Reader { bytes, pos: 0 };
        r.take(12, "").unwrap();
        let len = r.u64("").unwrap();
        r.take(len, "").unwrap();
        let header_end = r.pos;
        let count = r.u64("").unwrap();
        let mut kept = Vec::new();
        let mut n_kept = 0u64;
        for _ in 0..count {
            let start = r.pos;
            let n = r.u32("").unwrap() as usize;
            let name = r.string(n, "").unwrap();
            let rank = r.u32("").unwrap() as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64("").unwrap()).collect();
            r.take(dims.iter().product::<usize>() * 8, "").unwrap();
            if !drop(&name) {
                kept.extend_from_slice(&bytes[start..r.pos]);
                n_kept += 1;
            }
        }
        let mut out = bytes[..header_end].to_vec();
        out.extend_from_slice(&n_kept.to_le_bytes());
        out.extend(kept);
        out
    }
}
