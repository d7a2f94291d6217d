//! Checkpoint container.
//!
//! ```text
//! DILNET-CKPT\n
//! {single-line JSON header}\n
//! payload: little-endian f32 tensors, concatenated in header order
//! ```
//!
//! The header lists every tensor with its name, role and shape; the payload
//! must hold exactly the sum of their element counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::graph::RunningMoments;
use crate::network::{NetStructure, Variant};
use crate::params::{BnStore, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"DILNET-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    BnMean,
    BnVar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub final_metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberHeader {
    pub variant: Variant,
    pub structure: NetStructure,
    pub structure_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHeader {
    pub spec: FusionSpec,
    pub members: Vec<MemberHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelHeader {
    DilationNet {
        variant: Variant,
        structure: NetStructure,
        structure_hash: String,
    },
    Fusion(FusionHeader),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelHeader,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelHeader,
    pub provenance: Provenance,
    pub params: ParamStore,
    pub bn: BnStore,
}

impl Checkpoint {
    pub fn dilation_net(structure: &NetStructure, params: ParamStore, bn: BnStore, provenance: Provenance) -> Self {
        Self {
            model: ModelHeader::DilationNet {
                variant: structure.variant,
                structure: structure.clone(),
                structure_hash: structure.structure_hash(),
            },
            provenance,
            params,
            bn,
        }
    }

    pub fn structure(&self) -> Option<&NetStructure> {
        match &self.model {
            ModelHeader::DilationNet { structure, .. } => Some(structure),
            ModelHeader::Fusion(_) => None,
        }
    }

    fn entries(&self) -> Vec<(TensorEntry, &[f32])> {
        let mut out = Vec::new();
        for (name, t) in self.params.iter() {
            out.push((TensorEntry { name: name.clone(), role: TensorRole::Param, shape: t.shape().to_vec() }, t.data()));
        }
        for (name, m) in self.bn.iter() {
            let shape = vec![m.channels()];
            out.push((TensorEntry { name: name.clone(), role: TensorRole::BnMean, shape: shape.clone() }, &m.mean[..]));
            out.push((TensorEntry { name: name.clone(), role: TensorRole::BnVar, shape }, &m.var[..]));
        }
        out
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            provenance: self.provenance.clone(),
            tensors: self.entries().into_iter().map(|(e, _)| e).collect(),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, data) in self.entries() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&self.header())?);
        out.push(b'\n');
        out.extend(self.payload());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::Checkpoint("missing DILNET-CKPT magic line".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&rest[..nl])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &rest[nl + 1..];
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes but the header describes {expected}",
                payload.len()
            )));
        }

        let mut params = ParamStore::new();
        let mut means: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut vars: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut offset = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data: Vec<f32> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            match e.role {
                TensorRole::Param => params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?),
                TensorRole::BnMean => {
                    means.insert(e.name.clone(), data);
                }
                TensorRole::BnVar => {
                    vars.insert(e.name.clone(), data);
                }
            }
        }
        let mut bn = BnStore::new();
        for (name, mean) in means {
            let var = vars
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("running mean for `{name}` has no variance")))?;
            bn.insert(name, RunningMoments { mean, var });
        }
        if let Some(name) = vars.keys().next() {
            return Err(Error::Checkpoint(format!("running variance for `{name}` has no mean")));
        }
        let ckpt = Checkpoint { model: header.model, provenance: header.provenance, params, bn };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Check that the stored tensors are exactly the ones the model header
    /// describes, and that structure hashes match their structures.
    pub fn validate(&self) -> Result<()> {
        match &self.model {
            ModelHeader::DilationNet { structure, structure_hash, variant } => {
                if structure.variant != *variant {
                    return Err(Error::Checkpoint("variant tag disagrees with structure".into()));
                }
                if &structure.structure_hash() != structure_hash {
                    return Err(Error::Checkpoint(format!("structure hash mismatch for variant {variant}")));
                }
                check_tensors(structure, &self.params, &self.bn, "")
            }
            ModelHeader::Fusion(fh) => {
                for m in &fh.members {
                    if m.structure.structure_hash() != m.structure_hash {
                        return Err(Error::Checkpoint(format!("structure hash mismatch for member {}", m.variant)));
                    }
                    let prefix = member_prefix(m.variant);
                    let backbone = m.structure.backbone_only();
                    check_tensors(&backbone, &self.params.strip_prefix(&prefix), &self.bn.strip_prefix(&prefix), &prefix)?;
                }
                let width: usize = fh.members.iter().map(|m| m.structure.feature_width()).sum();
                for (name, shape) in fh.spec.head(width).param_shapes() {
                    let t = self.params.get(&name)?;
                    if t.shape() != shape {
                        return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn member_prefix(v: Variant) -> String {
    format!("{v}/")
}

fn check_tensors(structure: &NetStructure, params: &ParamStore, bn: &BnStore, prefix: &str) -> Result<()> {
    let shapes = structure.param_shapes();
    for (name, shape) in &shapes {
        let t = params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor `{prefix}{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{prefix}{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    if params.len() != shapes.len() {
        let known: std::collections::HashSet<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = params.names().find(|n| !known.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{prefix}{extra}`")));
        }
    }
    for (name, c) in structure.bn_layers() {
        let m = bn
            .get(&name)
            .map_err(|_| Error::Checkpoint(format!("missing running moments `{prefix}{name}`")))?;
        if m.channels() != c || m.var.len() != c {
            return Err(Error::Checkpoint(format!("running moments `{prefix}{name}` have wrong width")));
        }
    }
    Ok(())
}
