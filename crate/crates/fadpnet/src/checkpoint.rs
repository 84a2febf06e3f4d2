//! Versioned checkpoint files: named f32 arrays in a safetensors container
//! plus string metadata (configs, counters, rng position).

use std::collections::HashMap;
use std::path::Path;

use fadpnet_core::net::{Fadpnet, ModelConfig};
use fadpnet_core::nn::ParamStore;
use fadpnet_core::optim::Adam;
use fadpnet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};

pub const FORMAT_VERSION: u32 = 1;
const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    rng: RngState,
    step: u64,
    epoch: u64,
    adam_t: Option<u64>,
    adam_betas: Option<[f64; 2]>,
}

/// Everything needed to rebuild the model and continue training.
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam<f32>>,
    pub rng: RngState,
    pub step: u64,
    pub epoch: u64,
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (id, name, t) in self.params.iter() {
            arrays.push((format!("{PARAM}{name}"), t.shape().to_vec(), le_bytes(t)));
            if let Some(adam) = &self.adam {
                arrays.push((format!("{ADAM_M}{name}"), t.shape().to_vec(), le_bytes(&adam.m[id.index()])));
                arrays.push((format!("{ADAM_V}{name}"), t.shape().to_vec(), le_bytes(&adam.v[id.index()])));
            }
        }
        let views: Vec<(String, TensorView<'_>)> = arrays
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(st_err)?)))
            .collect::<Result<_>>()?;
        let meta = Meta {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            rng: self.rng.clone(),
            step: self.step,
            epoch: self.epoch,
            adam_t: self.adam.as_ref().map(|a| a.t),
            adam_betas: self.adam.as_ref().map(|a| [a.beta1, a.beta2]),
        };
        let mut info = HashMap::new();
        info.insert("fadpnet".to_string(), serde_json::to_string(&meta).expect("metadata serializes"));
        safetensors::serialize(views, Some(info)).map_err(st_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("fadpnet"))
            .ok_or_else(|| HarnessError::Data("checkpoint lacks its metadata block".into()))?;
        let meta: Meta =
            serde_json::from_str(raw).map_err(|e| HarnessError::Data(format!("checkpoint metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(HarnessError::Data(format!(
                "checkpoint format {} unsupported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
        // Construction fixes names and shapes; values are then replaced.
        let mut sink = ChaCha8Rng::seed_from_u64(0);
        let (_, mut params) = Fadpnet::init::<f32>(&meta.model, &mut sink)?;
        let read = |key: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let v = st.tensor(key).map_err(|_| HarnessError::Data(format!("checkpoint lacks `{key}`")))?;
            if v.dtype() != Dtype::F32 || v.shape() != shape {
                return Err(HarnessError::Data(format!(
                    "checkpoint array `{key}` is {:?} {:?}, expected F32 {:?}",
                    v.dtype(),
                    v.shape(),
                    shape
                )));
            }
            let data = v.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            Ok(Tensor::from_vec(shape, data)?)
        };
        let ids: Vec<_> = params.ids().collect();
        let mut adam = meta.adam_t.map(|t| {
            let [b1, b2] = meta.adam_betas.unwrap_or([0.9, 0.99]);
            let mut a = Adam::new(&params, b1, b2);
            a.t = t;
            a
        });
        for id in ids {
            let name = params.name(id).to_string();
            let shape = params.value(id).shape().to_vec();
            *params.value_mut(id) = read(&format!("{PARAM}{name}"), &shape)?;
            if let Some(a) = adam.as_mut() {
                a.m[id.index()] = read(&format!("{ADAM_M}{name}"), &shape)?;
                a.v[id.index()] = read(&format!("{ADAM_V}{name}"), &shape)?;
            }
        }
        let expected = params.len() * if adam.is_some() { 3 } else { 1 };
        if st.len() != expected {
            return Err(HarnessError::Data(format!(
                "checkpoint holds {} arrays, the configured model needs {expected}",
                st.len()
            )));
        }
        Ok(Self {
            model: meta.model,
            train: meta.train,
            params,
            adam,
            rng: meta.rng,
            step: meta.step,
            epoch: meta.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network skeleton for these parameters.
    pub fn network(&self) -> Result<Fadpnet> {
        let mut scratch = ParamStore::<f32>::new();
        let mut sink = ChaCha8Rng::seed_from_u64(0);
        Ok(Fadpnet::new(&self.model, &mut scratch, &mut sink)?)
    }
}

fn st_err(e: safetensors::SafeTensorError) -> HarnessError {
    HarnessError::Data(format!("checkpoint container: {e}"))
}
