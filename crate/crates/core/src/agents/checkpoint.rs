use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentKind, ModelBundle, ModelConfig, Optimizers};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::objectives::{ObjectiveConfig, TrainConfig};
use crate::quasimetric::StateNorm;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EQRLCK01";

/// Complete, resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: AgentKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub norm: StateNorm,
    pub bundle: ModelBundle,
    pub optim: Optimizers,
    pub lambda: f64,
    pub step: u64,
    /// Position of the sampling stream, which is seeded from `train.seed`.
    pub rng_word_pos: u128,
    /// False when the dataset had no transitions; acting then follows `−∇d`.
    pub policies_trained: bool,
}

/// Everything except the parameter blocks.
#[derive(Serialize, Deserialize)]
struct Header {
    kind: AgentKind,
    model: ModelConfig,
    train: TrainConfig,
    objective: ObjectiveConfig,
    norm: StateNorm,
    step: u64,
    rng_word_pos: String,
    policies_trained: bool,
    adam_steps: [u64; 4],
}

impl Checkpoint {
    fn adams(&self) -> [(&'static str, &Adam); 4] {
        [
            ("quasimetric", &self.optim.quasimetric),
            ("value", &self.optim.value),
            ("policy_high", &self.optim.policy_high),
            ("policy_low", &self.optim.policy_low),
        ]
    }

    fn named_blocks(&self) -> Vec<(String, Array2<f64>)> {
        let mut out: Vec<(String, Array2<f64>)> = self
            .bundle
            .named_blocks()
            .into_iter()
            .map(|(n, b)| (n, b.clone()))
            .collect();
        out.push(("dual.lambda".into(), Array2::from_elem((1, 1), self.lambda)));
        for (name, adam) in self.adams() {
            out.push((
                format!("adam.{name}.lr"),
                Array2::from_elem((1, 1), adam.lr),
            ));
            for (i, m) in adam.m.iter().enumerate() {
                out.push((format!("adam.{name}.m.{i}"), m.clone()));
            }
            for (i, v) in adam.v.iter().enumerate() {
                out.push((format!("adam.{name}.v.{i}"), v.clone()));
            }
        }
        out
    }

    /// Configuration echo as JSON.
    pub fn config_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "model": self.model,
            "train": self.train,
            "objective": self.objective,
            "norm": self.norm,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            kind: self.kind,
            model: self.model.clone(),
            train: self.train.clone(),
            objective: self.objective.clone(),
            norm: self.norm,
            step: self.step,
            rng_word_pos: self.rng_word_pos.to_string(),
            policies_trained: self.policies_trained,
            adam_steps: [
                self.optim.quasimetric.t,
                self.optim.value.t,
                self.optim.policy_high.t,
                self.optim.policy_low.t,
            ],
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        let blocks = self.named_blocks();
        w.write_u64::<LittleEndian>(blocks.len() as u64)?;
        for (name, b) in blocks {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u64::<LittleEndian>(b.nrows() as u64)?;
            w.write_u64::<LittleEndian>(b.ncols() as u64)?;
            for &x in b.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to memory cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        if len > 1 << 24 {
            return Err(Error::Format("oversized checkpoint header".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json)?;
        let n_blocks = r.read_u64::<LittleEndian>()? as usize;
        let mut blocks = std::collections::BTreeMap::new();
        for _ in 0..n_blocks {
            let nl = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; nl];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let rows = r.read_u64::<LittleEndian>()? as usize;
            let cols = r.read_u64::<LittleEndian>()? as usize;
            if rows.saturating_mul(cols) > 1 << 28 {
                return Err(Error::Format(format!("block {name} is implausibly large")));
            }
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            blocks.insert(
                name,
                Array2::from_shape_vec((rows, cols), data).expect("shape"),
            );
        }

        // rebuild the architecture, then overwrite every block
        let mut bundle =
            ModelBundle::new(h.kind, &h.model, h.norm, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = bundle.named_blocks().into_iter().map(|(n, _)| n).collect();
        let mut take = |name: &str, want: (usize, usize)| -> Result<Array2<f64>> {
            let b = blocks
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing block {name}")))?;
            if b.dim() != want {
                return Err(Error::Format(format!(
                    "block {name} has shape {:?}, expected {:?}",
                    b.dim(),
                    want
                )));
            }
            Ok(b)
        };
        for (name, slot) in names.iter().zip(bundle.blocks_mut()) {
            *slot = take(name, slot.dim())?;
        }
        let lambda = take("dual.lambda", (1, 1))?[[0, 0]];
        let mut optim = bundle.optimizers(h.train.lr);
        let adams: [(&str, &mut Adam); 4] = [
            ("quasimetric", &mut optim.quasimetric),
            ("value", &mut optim.value),
            ("policy_high", &mut optim.policy_high),
            ("policy_low", &mut optim.policy_low),
        ];
        for ((name, adam), t) in adams.into_iter().zip(h.adam_steps) {
            adam.t = t;
            adam.lr = take(&format!("adam.{name}.lr"), (1, 1))?[[0, 0]];
            for (i, m) in adam.m.iter_mut().enumerate() {
                *m = take(&format!("adam.{name}.m.{i}"), m.dim())?;
            }
            for (i, v) in adam.v.iter_mut().enumerate() {
                *v = take(&format!("adam.{name}.v.{i}"), v.dim())?;
            }
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Format(format!("unexpected block {extra}")));
        }
        let rng_word_pos = h
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format("bad RNG position".into()))?;
        Ok(Self {
            kind: h.kind,
            model: h.model,
            train: h.train,
            objective: h.objective,
            norm: h.norm,
            bundle,
            optim,
            lambda,
            step: h.step,
            rng_word_pos,
            policies_trained: h.policies_trained,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }
}
