//! Self-describing checkpoints in the safetensors container.
//!
//! Tensors: `<layer>.weight` with shape `[out, in, taps]` and `<layer>.bias`
//! with shape `[out]`, all little-endian `f32`. When optimizer state is
//! saved, the Adam moments follow as `adam.m.<layer>.*` and `adam.v.<layer>.*`.
//! The header metadata carries the network config, the training metadata,
//! and the Adam hyper-parameters as JSON strings.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::bsn::{Bsn, BsnConfig};
use crate::error::{Error, Result};

pub const FORMAT: &str = "sdap-bsn/1";

/// Where in training a checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub phase: usize,
    pub step: u64,
    pub master_seed: u64,
    pub loss: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AdamHyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Bsn<f32>,
    pub meta: TrainingMeta,
    pub optimizer: Option<Adam<f32>>,
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(view: &TensorView<'_>, expected: usize, name: &str) -> Result<Vec<f32>> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("{name}: expected F32, found {:?}", view.dtype())));
    }
    let data = view.data();
    if data.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "{name}: {} bytes, expected {}",
            data.len(),
            expected * 4
        )));
    }
    Ok(data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Parameter slice names aligned with `Bsn::parameter_slices_mut`.
fn slice_names(model: &Bsn<f32>) -> Vec<(String, Vec<usize>)> {
    model
        .named_layers()
        .into_iter()
        .flat_map(|(name, l)| {
            [
                (
                    format!("{name}.weight"),
                    vec![l.out_channels, l.in_channels, l.taps().len()],
                ),
                (format!("{name}.bias"), vec![l.out_channels]),
            ]
        })
        .collect()
}

impl Checkpoint {
    pub fn new(model: Bsn<f32>, meta: TrainingMeta, optimizer: Option<Adam<f32>>) -> Self {
        Self { model, meta, optimizer }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = slice_names(&self.model);
        let mut model = self.model.clone();
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = model
            .parameter_slices_mut()
            .into_iter()
            .zip(&names)
            .map(|(s, (name, shape))| (name.clone(), shape.clone(), to_bytes(s)))
            .collect();

        let mut metadata = HashMap::new();
        metadata.insert("format".to_string(), FORMAT.to_string());
        metadata.insert("config".to_string(), serde_json::to_string(self.model.config())?);
        metadata.insert("training".to_string(), serde_json::to_string(&self.meta)?);
        if let Some(adam) = &self.optimizer {
            let hyper = AdamHyper {
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                step: adam.step,
            };
            metadata.insert("adam".to_string(), serde_json::to_string(&hyper)?);
            let (m, v) = adam.moments();
            for ((name, shape), (mm, vv)) in names.iter().zip(m.iter().zip(v)) {
                owned.push((format!("adam.m.{name}"), shape.clone(), to_bytes(mm)));
                owned.push((format!("adam.v.{name}"), shape.clone(), to_bytes(vv)));
            }
        }

        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, &Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta_map = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let field = |key: &str| {
            meta_map
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata field `{key}`")))
        };
        if field("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", field("format")?)));
        }
        let config: BsnConfig = serde_json::from_str(field("config")?)?;
        let meta: TrainingMeta = serde_json::from_str(field("training")?)?;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut model = Bsn::<f32>::new(config)?;
        let names = slice_names(&model);
        let load = |name: &str, len: usize| -> Result<Vec<f32>> {
            let view = tensors
                .tensor(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            from_view(&view, len, name)
        };
        for (slot, (name, shape)) in model.parameter_slices_mut().into_iter().zip(&names) {
            slot.copy_from_slice(&load(name, shape.iter().product())?);
        }

        let optimizer = match meta_map.get("adam") {
            None => None,
            Some(raw) => {
                let hyper: AdamHyper = serde_json::from_str(raw)?;
                let mut adam = Adam::new(hyper.lr, &model);
                adam.beta1 = hyper.beta1;
                adam.beta2 = hyper.beta2;
                adam.eps = hyper.eps;
                adam.step = hyper.step;
                for (i, (name, shape)) in names.iter().enumerate() {
                    let len = shape.iter().product();
                    adam.m[i] = load(&format!("adam.m.{name}"), len)?;
                    adam.v[i] = load(&format!("adam.v.{name}"), len)?;
                }
                Some(adam)
            }
        };
        Ok(Self { model, meta, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
