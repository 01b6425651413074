use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::Schedule;
use super::stage::Stage;
use super::{Result, TrainError};
use crate::ctc::Vocab;
use crate::model::{Backbone, Group, ModelConfig, ParamStore};
use crate::ssl::{KMeansModel, Objective};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSLCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const KMEANS_TENSOR: &str = "kmeans.centroids";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub objective: Option<String>,
    pub corpus: String,
    pub steps: u64,
    pub schedule: Schedule,
    pub seed: u64,
}

/// How many stages have updated each parameter group. `asr_head` marks a
/// generator that was replaced by a CTC head (θ_g′).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub stage_index: u32,
    pub backbone: u32,
    pub adapter: Option<u32>,
    pub generator: u32,
    pub asr_head: bool,
    pub history: Vec<StageRecord>,
}

fn superscript(n: u32) -> String {
    const DIGITS: [char; 10] = ['⁰', '¹', '²', '³', '⁴', '⁵', '⁶', '⁷', '⁸', '⁹'];
    n.to_string()
        .chars()
        .map(|c| DIGITS[c as usize - '0' as usize])
        .collect()
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{θ_f{}", superscript(self.backbone))?;
        if let Some(a) = self.adapter {
            write!(f, ", θ_ada{}", superscript(a))?;
        }
        let g = if self.asr_head { "θ_g′" } else { "θ_g" };
        write!(f, ", {g}{}}}", superscript(self.generator))
    }
}

impl Provenance {
    /// Componentwise `self ≤ later`, with a strictly larger stage index.
    pub fn precedes(&self, later: &Provenance) -> bool {
        let ada_ok = match (self.adapter, later.adapter) {
            (Some(a), Some(b)) => a <= b,
            (Some(_), None) => false,
            _ => true,
        };
        let gen_ok = match (self.asr_head, later.asr_head) {
            (false, true) => true,
            (true, false) => false,
            _ => self.generator <= later.generator,
        };
        self.stage_index < later.stage_index && self.backbone <= later.backbone && ada_ok && gen_ok
    }
}

/// ChaCha8 position, enough to resume the exact stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || TrainError::Header("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Backbone,
    pub provenance: Provenance,
    /// The self-supervised loss the model was trained with, reused by
    /// later adaptation stages.
    pub objective: Option<Objective>,
    pub kmeans: Option<KMeansModel>,
    pub vocab: Option<Vocab>,
    pub rng: RngState,
    pub stage_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Option<Group>,
    trainable: bool,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    provenance: Provenance,
    config: ModelConfig,
    objective: Option<Objective>,
    vocab: Option<Vocab>,
    rng: RngState,
    stage_config: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

fn push_payload(buf: &mut Vec<u8>, t: &Tensor) {
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend((v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| buf.extend(v.to_le_bytes())),
    }
}

fn read_payload(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut add = |name: &str, t: &Tensor, group: Option<Group>, trainable: bool| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group,
                trainable,
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            push_payload(&mut payload, t);
        };
        for (name, p) in self.model.params.iter() {
            add(name, &p.tensor, Some(p.group), p.trainable);
        }
        if let Some(km) = &self.kmeans {
            add(KMEANS_TENSOR, &km.to_tensor(), None, false);
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            provenance: self.provenance.clone(),
            config: self.model.config.clone(),
            objective: self.objective.clone(),
            vocab: self.vocab.clone(),
            rng: self.rng.clone(),
            stage_config: self.stage_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| TrainError::Header("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(len.to_le_bytes());
        out.extend(json);
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(TrainError::Truncated);
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(TrainError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(TrainError::Truncated);
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(TrainError::Truncated);
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| TrainError::Header(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(TrainError::Version(header.version));
        }
        let payload = &body[len..];
        let expected = Backbone::build(&header.config, 0)?;
        let mut params = ParamStore::new();
        let mut kmeans = None;
        let mut end = 0u64;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let stop = start + numel * e.dtype.byte_width();
            if stop > payload.len() {
                return Err(TrainError::Truncated);
            }
            end = end.max(stop as u64);
            let t = Tensor::with_dtype(
                &e.shape,
                read_payload(&payload[start..stop], e.dtype),
                e.dtype,
            )?;
            if e.name == KMEANS_TENSOR && e.group.is_none() {
                kmeans = Some(KMeansModel::from_tensor(&t)?);
                continue;
            }
            let want = expected
                .params
                .get(&e.name)
                .ok_or_else(|| TrainError::UnexpectedTensor(e.name.clone()))?;
            if want.tensor.shape() != e.shape.as_slice()
                || Some(want.group) != e.group
                || e.dtype != header.config.dtype
            {
                return Err(TrainError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: want.tensor.shape().to_vec(),
                    found: e.shape.clone(),
                });
            }
            params.insert(e.name.clone(), t, want.group);
            params.get_mut(&e.name).expect("just inserted").trainable = e.trainable;
        }
        if end as usize != payload.len() {
            return Err(TrainError::Header(format!(
                "{} trailing payload bytes",
                payload.len() - end as usize
            )));
        }
        if let Some(missing) = expected.params.names().find(|n| !params.contains(n)) {
            return Err(TrainError::MissingTensor(missing.to_string()));
        }
        Ok(Checkpoint {
            model: Backbone {
                config: header.config,
                params,
            },
            provenance: header.provenance,
            objective: header.objective,
            kmeans,
            vocab: header.vocab,
            rng: header.rng,
            stage_config: header.stage_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Per-group tensor checksums, handy for freeze checks.
    pub fn checksums(&self) -> BTreeMap<Group, [u8; 32]> {
        Group::ALL
            .into_iter()
            .map(|g| (g, self.model.params.checksum(g)))
            .collect()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
