//! Safetensors checkpoint holding student params, EMA params and AdamW
//! moments. One metadata entry carries the JSON header
//! (format version, model config, step, seed, optimizer update count).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmformer::{MmFormer, ModelConfig, ParamStore, TensorModel};
use crate::trainer::{AdamW, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "textsr";

const PARAM: &str = "param/";
const EMA: &str = "ema/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub adam_updates: u64,
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: state.student.config().clone(),
        step: state.step,
        seed: state.seed,
        adam_updates: state.optimizer.updates,
    };
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in state.student.store().iter() {
        tensors.insert(format!("{PARAM}{name}"), var.as_tensor().clone());
    }
    for (name, var) in state.teacher.store().iter() {
        tensors.insert(format!("{EMA}{name}"), var.as_tensor().clone());
    }
    for (name, t) in &state.optimizer.first {
        tensors.insert(format!("{ADAM_M}{name}"), t.clone());
    }
    for (name, t) in &state.optimizer.second {
        tensors.insert(format!("{ADAM_V}{name}"), t.clone());
    }
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), json)]);
    safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

/// A decoded checkpoint before it is bound to a particular config.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

pub fn from_bytes(bytes: &[u8], dtype: DType, device: &Device) -> Result<Checkpoint> {
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(bad)?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let st = SafeTensors::deserialize(bytes).map_err(bad)?;
    let mut params = ParamStore::new(dtype, device.clone());
    let mut ema = ParamStore::new(dtype, device.clone());
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    let mut names: Vec<String> = st.names().into_iter().map(str::to_string).collect();
    names.sort();
    for name in names {
        let view = st.tensor(&name).map_err(bad)?;
        let t = view.load(device)?.to_dtype(dtype)?;
        if let Some(n) = name.strip_prefix(PARAM) {
            params.insert(n, &t)?;
        } else if let Some(n) = name.strip_prefix(EMA) {
            ema.insert(n, &t)?;
        } else if let Some(n) = name.strip_prefix(ADAM_M) {
            adam_m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            adam_v.insert(n.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unexpected array {name}")));
        }
    }
    Ok(Checkpoint {
        header,
        params,
        ema,
        adam_m,
        adam_v,
    })
}

pub fn read(path: &Path, dtype: DType, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&bytes, dtype, device)
}

impl Checkpoint {
    fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.header.model != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config {:?} does not match requested config {:?}",
                self.header.model, expected
            )));
        }
        Ok(())
    }

    /// Full training state; fails if the stored config differs from `expected`.
    pub fn into_train_state(self, expected: &ModelConfig) -> Result<TrainState> {
        self.check_config(expected)?;
        let student = MmFormer::from_store(expected.clone(), self.params)?;
        let teacher = MmFormer::from_store(expected.clone(), self.ema)?;
        Ok(TrainState {
            student,
            teacher,
            optimizer: AdamW {
                first: self.adam_m,
                second: self.adam_v,
                updates: self.header.adam_updates,
            },
            step: self.header.step,
            seed: self.header.seed,
        })
    }

    /// The EMA weights (`use_ema`) or the raw student weights.
    pub fn into_model(self, expected: &ModelConfig, use_ema: bool) -> Result<MmFormer> {
        self.check_config(expected)?;
        let store = if use_ema { self.ema } else { self.params };
        MmFormer::from_store(expected.clone(), store)
    }
}
