//! Versioned JSON checkpoint container.

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, FusionWeights, Param, ParamStore, SegModel, FUSION_PARAM};
use crate::scalar::Scalar;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "ikd-mil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training stage that produced a checkpoint: `mil` or `distill-cycle-k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageTag {
    Mil,
    DistillCycle(usize),
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageTag::Mil => f.write_str("mil"),
            StageTag::DistillCycle(k) => write!(f, "distill-cycle-{k}"),
        }
    }
}

impl std::str::FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mil" {
            return Ok(StageTag::Mil);
        }
        s.strip_prefix("distill-cycle-")
            .and_then(|k| k.parse().ok())
            .map(StageTag::DistillCycle)
            .ok_or_else(|| Error::Checkpoint(format!("unknown stage tag `{s}`")))
    }
}

impl Serialize for StageTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StageTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Scalar type the values were produced with.
    pub scalar: String,
    pub stage: StageTag,
    pub backbone: BackboneSpec,
    pub tensors: Vec<NamedTensor>,
    pub fusion_logits: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &SegModel<T>, stage: StageTag) -> Self {
        let tensors = model
            .params()
            .iter()
            .filter(|p| p.name != FUSION_PARAM)
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.data.iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            stage,
            backbone: model.spec().clone(),
            tensors,
            fusion_logits: model.fusion().logits.iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Rebuilds a model; every tensor must match the backbone's layout.
    pub fn to_model<T: Scalar>(&self) -> Result<SegModel<T>> {
        self.check_header()?;
        let mut model = SegModel::<T>::build(&self.backbone, 0)?;
        let mut params = Vec::with_capacity(self.tensors.len() + 1);
        for t in &self.tensors {
            if t.values.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor `{}` has a wrong value count", t.name)));
            }
            params.push(Param {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.values.iter().map(|&v| T::lit(v)).collect(),
            });
        }
        params.push(Param {
            name: FUSION_PARAM.to_string(),
            shape: vec![self.fusion_logits.len()],
            data: self.fusion_logits.iter().map(|&v| T::lit(v)).collect(),
        });
        model.set_params(ParamStore { params })?;
        Ok(model)
    }

    pub fn fusion<T: Scalar>(&self) -> FusionWeights<T> {
        FusionWeights {
            logits: self.fusion_logits.iter().map(|&v| T::lit(v)).collect(),
        }
    }

    fn check_header(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "checkpoint not found".into(),
            });
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        ckpt.check_header()?;
        Ok(ckpt)
    }
}
