//! Checkpoint archive.
//!
//! A checkpoint is a safetensors file. Parameters are stored under their
//! stable names (`input.conv1.weight`, `blocks.0.freq.attn.qkv.weight`, ...,
//! `head.bias`); any extra state (optimizer moments) uses other prefixes.
//! The header carries a single metadata key, `ifcorrnet`, whose value is the
//! JSON form of [`CheckpointMeta`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::config::{InputVariant, ModelConfig};
use super::net::{IfCorrNet, InitOptions};
use crate::error::{Error, Result};
use crate::features::InputLayout;

pub const FORMAT: &str = "ifcorrnet-checkpoint";
pub const VERSION: u32 = 1;
const META_KEY: &str = "ifcorrnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub input_layout: String,
    pub head_layout: String,
    /// Free-form training state (step counters and the like).
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        let layout = match cfg.input {
            InputVariant::IfCorr => InputLayout::RealBlockThenImagBlock,
            InputVariant::SfRaw => InputLayout::RawRealImag,
        };
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: cfg.clone(),
            input_layout: layout.descriptor().into(),
            head_layout: "real parts of all taps, then imaginary parts".into(),
            train_state: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            StDtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::InvalidArgument(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Data(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut encoded = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let (dtype, bytes) = to_bytes(t)?;
        encoded.push((name.clone(), dtype, t.dims().to_vec(), bytes));
    }
    let views: Vec<(String, TensorView<'_>)> = encoded
        .iter()
        .map(|(n, d, s, b)| Ok((n.clone(), TensorView::new(*d, s.clone(), b)?)))
        .collect::<Result<_>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    safetensors::serialize_to_file(views, Some(info), path.as_ref())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Data(format!("{}: not an ifcorrnet checkpoint", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    if meta.format != FORMAT || meta.version > VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    let st = SafeTensors::deserialize(&bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, from_view(&view)?);
    }
    Ok(Checkpoint { meta, tensors })
}

impl IfCorrNet {
    pub fn parameter_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params()
            .iter()
            .map(|(n, v)| (n.clone(), v.as_detached_tensor()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(path, &CheckpointMeta::for_model(self.config()), &self.parameter_tensors())
    }

    /// Rebuilds a model from a checkpoint, keeping the stored precision.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dtype = ckpt
            .tensors
            .get("head.weight")
            .map(|t| t.dtype())
            .ok_or_else(|| Error::Data("checkpoint has no head.weight".into()))?;
        Self::from_checkpoint_as(ckpt, dtype)
    }

    pub fn from_checkpoint_as(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let net = IfCorrNet::new(
            &ckpt.meta.model,
            InitOptions {
                seed: 0,
                dtype,
                zero_head: true,
            },
        )?;
        let names: Vec<String> = net.params().names().cloned().collect();
        for name in names {
            let t = ckpt
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing parameter {name}")))?;
            net.params().set(&name, t)?;
        }
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load(path)?)
    }
}
