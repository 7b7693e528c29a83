//! Checkpoint directories: a JSON manifest plus one little-endian blob per
//! tensor group (parameters, EMA, optimizer moments), each CRC-32 checked.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::DatasetStats;
use crate::error::{integrity, invalid, Result};
use crate::nn::ParamStore;
use crate::objectives::optim::{AdamW, AdamWConfig};
use crate::objectives::PolicyModel;
use crate::schedule::Schedule;

const FORMAT: &str = "crossway-ckpt";
const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: u64,
    pub m: TensorMap,
    pub v: TensorMap,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub stats: DatasetStats,
    pub betas: Vec<f64>,
    pub params: TensorMap,
    pub ema: TensorMap,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Group {
    file: String,
    crc32: u32,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    config: RunConfig,
    epoch: usize,
    step: u64,
    stats: DatasetStats,
    betas: Vec<f64>,
    optimizer_t: Option<u64>,
    groups: BTreeMap<String, Group>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:03}")
}

/// Latest `ckpt_epoch{NNN}` directory under `dir` that has a manifest.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(epoch) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("ckpt_epoch")).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        if path.join("manifest.json").exists() && best.as_ref().is_none_or(|(e, _)| epoch > *e) {
            best = Some((epoch, path));
        }
    }
    Ok(best)
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32le"),
        DType::F64 => Ok("f64le"),
        other => invalid(format!("cannot checkpoint {other:?} tensors")),
    }
}

fn encode(map: &TensorMap, dtype: DType) -> Result<(Vec<u8>, Vec<Entry>)> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(map.len());
    for (name, t) in map {
        entries.push(Entry { name: name.clone(), shape: t.dims().to_vec(), offset: bytes.len() });
        let flat = t.flatten_all()?;
        match dtype {
            DType::F32 => bytes.extend(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes())),
            _ => bytes.extend(flat.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes())),
        }
    }
    Ok((bytes, entries))
}

fn decode(bytes: &[u8], entries: &[Entry], dtype: DType) -> Result<TensorMap> {
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let mut map = TensorMap::new();
    let mut expected = 0;
    for e in entries {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n * width > bytes.len() {
            return integrity(format!("tensor `{}` lies outside its blob", e.name));
        }
        let raw = &bytes[e.offset..e.offset + n * width];
        let t = if dtype == DType::F32 {
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        } else {
            let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        };
        map.insert(e.name.clone(), t);
        expected = e.offset + n * width;
    }
    if expected != bytes.len() {
        return integrity("blob has trailing bytes");
    }
    Ok(map)
}

pub fn store_tensors(store: &ParamStore) -> TensorMap {
    store.vars().into_iter().map(|(n, v)| (n, v.as_tensor().detach())).collect()
}

impl Checkpoint {
    pub fn capture(model: &PolicyModel, opt: Option<&AdamW>, epoch: usize, step: u64, stats: &DatasetStats) -> Self {
        Self {
            config: model.config().clone(),
            epoch,
            step,
            stats: stats.clone(),
            betas: model.schedule().betas().to_vec(),
            params: store_tensors(model.params()),
            ema: store_tensors(model.ema_params()),
            optimizer: opt.map(|o| OptimizerState { t: o.t, m: o.m.clone(), v: o.v.clone() }),
        }
    }

    pub fn dtype(&self) -> DType {
        if self.config.train.f64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let dtype = self.dtype();
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let mut groups = BTreeMap::new();
        let mut sets: Vec<(&str, &TensorMap)> = vec![("params", &self.params), ("ema", &self.ema)];
        if let Some(o) = &self.optimizer {
            sets.push(("adam_m", &o.m));
            sets.push(("adam_v", &o.v));
        }
        for (name, map) in sets {
            let (bytes, entries) = encode(map, dtype)?;
            let file = format!("{name}.bin");
            fs::write(tmp.join(&file), &bytes)?;
            groups.insert(name.to_string(), Group { file, crc32: crc32fast::hash(&bytes), entries });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            dtype: dtype_name(dtype)?.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            stats: self.stats.clone(),
            betas: self.betas.clone(),
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            groups,
        };
        fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| crate::Error::Integrity(format!("checkpoint manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return integrity(format!("unsupported checkpoint format {} v{}", m.format, m.version));
        }
        let dtype = match m.dtype.as_str() {
            "f32le" => DType::F32,
            "f64le" => DType::F64,
            other => return integrity(format!("unsupported checkpoint dtype {other}")),
        };
        if (dtype == DType::F64) != m.config.train.f64 {
            return integrity("checkpoint dtype disagrees with its configuration");
        }
        let read = |name: &str| -> Result<Option<TensorMap>> {
            let Some(g) = m.groups.get(name) else { return Ok(None) };
            let bytes = fs::read(dir.join(&g.file))?;
            let crc = crc32fast::hash(&bytes);
            if crc != g.crc32 {
                return integrity(format!("{}: checksum {crc:08x} does not match manifest {:08x}", g.file, g.crc32));
            }
            decode(&bytes, &g.entries, dtype).map(Some)
        };
        let params = read("params")?.ok_or_else(|| crate::Error::Integrity("checkpoint has no parameters".into()))?;
        let ema = read("ema")?.ok_or_else(|| crate::Error::Integrity("checkpoint has no EMA parameters".into()))?;
        if params.keys().ne(ema.keys()) {
            return integrity("EMA parameter names differ from the model's");
        }
        let optimizer = match (m.optimizer_t, read("adam_m")?, read("adam_v")?) {
            (Some(t), Some(m1), Some(v)) => Some(OptimizerState { t, m: m1, v }),
            (None, None, None) => None,
            _ => return integrity("incomplete optimizer state"),
        };
        Ok(Self { config: m.config, epoch: m.epoch, step: m.step, stats: m.stats, betas: m.betas, params, ema, optimizer })
    }

    pub fn to_model(&self) -> Result<PolicyModel> {
        let dtype = self.dtype();
        let params = ParamStore::from_tensors(dtype, self.params.clone())?;
        let ema = ParamStore::from_tensors(dtype, self.ema.clone())?;
        let sched = Schedule::from_betas(self.config.model.schedule, self.betas.clone())?;
        PolicyModel::from_stores(&self.config, params, ema, sched).map_err(|e| match e {
            crate::Error::Integrity(msg) => crate::Error::Integrity(msg),
            other => crate::Error::Integrity(format!("checkpoint does not match its configuration: {other}")),
        })
    }

    pub fn to_optimizer(&self) -> Result<AdamW> {
        let t = &self.config.train;
        let cfg = AdamWConfig { lr: t.lr, beta1: t.betas.0, beta2: t.betas.1, eps: t.adam_eps, weight_decay: t.weight_decay };
        match &self.optimizer {
            Some(o) => AdamW::restore(cfg, o.t, o.m.clone(), o.v.clone()),
            None => Ok(AdamW::new(cfg)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::NormStats;
    use crate::objectives::model::tests_support::tiny;

    fn stats() -> DatasetStats {
        DatasetStats { actions: NormStats::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), lowdim: NormStats::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap() }
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let m = PolicyModel::new(&tiny(Variant::Crossway)).unwrap();
        let ck = Checkpoint::capture(&m, None, 3, 17, &stats());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(checkpoint_name(3));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!((back.epoch, back.step), (3, 17));
        assert_eq!(back.config, ck.config);
        assert_eq!(back.betas, ck.betas);
        for (name, t) in &ck.params {
            let a = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = back.params[name].flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b, "{name}");
        }
        let model = back.to_model().unwrap();
        assert_eq!(model.params().names(), m.params().names());
        assert_eq!(latest_checkpoint(dir.path()).unwrap().unwrap().0, 3);
    }

    #[test]
    fn baseline_checkpoint_has_no_state_decoder() {
        let m = PolicyModel::new(&tiny(Variant::Baseline)).unwrap();
        let ck = Checkpoint::capture(&m, None, 1, 1, &stats());
        assert!(ck.params.keys().all(|k| !k.starts_with("dec_state")));
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let m = PolicyModel::new(&tiny(Variant::Baseline)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(checkpoint_name(1));
        Checkpoint::capture(&m, None, 1, 1, &stats()).save(&path).unwrap();
        let blob = path.join("params.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[10] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(crate::Error::Integrity(_))));
    }
}
