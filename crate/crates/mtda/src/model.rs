//! The trainable parameter bundle (extractor, dual heads, discriminator) and
//! its checkpoint format.
//!
//! Checkpoints are versioned JSON with every tensor keyed by a stable layer
//! name (`backbone.conv1.w`, `mlp.fc.w`, `edge.l1.w`, `node.l2.b`,
//! `disc.l1.w`, ...). Values are stored as f64 regardless of the training
//! precision, so checkpoints written by an `f32` run load into an `f64` model
//! and vice versa.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayViewMutD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::Discriminator;
use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{Error, Result};
use crate::heads::{EdgeNet, MlpHead, NodeNet};
use crate::nnet::{c, to_f64, Real};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// One serialized tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub backbone: BackboneSpec,
    pub n_c: usize,
    pub img_side: usize,
    pub params: BTreeMap<String, ParamRecord>,
    pub buffers: BTreeMap<String, ParamRecord>,
}

/// All trainable pieces of the pipeline: extractor `F` (theta), MLP head
/// (phi), edge + node nets forming the graph head (phi'), discriminator (psi).
#[derive(Debug, Clone)]
pub struct ModelBundle<F: Real> {
    pub backbone: Backbone<F>,
    pub mlp: MlpHead<F>,
    pub edge: EdgeNet<F>,
    pub node: NodeNet<F>,
    pub disc: Discriminator<F>,
    pub spec: BackboneSpec,
    pub n_c: usize,
    pub img_side: usize,
}

impl<F: Real> ModelBundle<F> {
    pub fn init(spec: &BackboneSpec, n_c: usize, img_side: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if n_c < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        Ok(Self {
            backbone: Backbone::init(spec, seed, img_side)?,
            mlp: MlpHead::init(spec.d_f, n_c, seed),
            edge: EdgeNet::init(spec.d_f, seed),
            node: NodeNet::init(spec.d_f, n_c, seed),
            disc: Discriminator::init(spec.d_f, seed),
            spec: spec.clone(),
            n_c,
            img_side,
        })
    }

    /// Every trainable tensor with its stable name.
    pub fn param_entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = self.backbone.param_entries_mut();
        out.extend(self.mlp.param_entries_mut());
        out.extend(self.edge.param_entries_mut());
        out.extend(self.node.param_entries_mut());
        out.extend(self.disc.param_entries_mut());
        out
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn param_entries_for<'a>(
        &'a mut self,
        prefixes: &[&str],
    ) -> Vec<(String, ArrayViewMutD<'a, F>)> {
        let keep: Vec<String> = prefixes.iter().map(|p| p.to_string()).collect();
        self.param_entries_mut()
            .into_iter()
            .filter(|(n, _)| keep.iter().any(|p| n.starts_with(p.as_str())))
            .collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.param_entries_mut().iter().map(|(_, v)| v.len()).sum()
    }

    /// Copy of parameter values under one name prefix, for before/after
    /// comparisons in tests and phase-isolation assertions.
    pub fn snapshot(&mut self, prefix: &str) -> BTreeMap<String, Vec<f64>> {
        self.param_entries_mut()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n, v.iter().map(|&x| to_f64(x)).collect()))
            .collect()
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut params = BTreeMap::new();
        for (name, view) in self.param_entries_mut() {
            params.insert(
                name,
                ParamRecord {
                    shape: view.shape().to_vec(),
                    data: view.iter().map(|&v| to_f64(v)).collect(),
                },
            );
        }
        let mut buffers = BTreeMap::new();
        for (name, shape, data) in self.backbone.buffer_entries() {
            buffers.insert(name, ParamRecord { shape, data });
        }
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            backbone: self.spec.clone(),
            n_c: self.n_c,
            img_side: self.img_side,
            params,
            buffers,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::CheckpointVersion {
                found: ckpt.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        let mut spec = ckpt.backbone.clone();
        // weights come from the checkpoint itself
        spec.pretrained_weights = None;
        let mut model = Self::init(&spec, ckpt.n_c, ckpt.img_side, 0)?;
        for (name, mut view) in model.param_entries_mut() {
            let rec = ckpt.params.get(&name).ok_or_else(|| {
                Error::Contract(format!("checkpoint is missing parameter {name}"))
            })?;
            if rec.shape != view.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    rec.shape,
                    view.shape()
                )));
            }
            for (dst, &src) in view.iter_mut().zip(rec.data.iter()) {
                *dst = c(src);
            }
        }
        let buffers: BTreeMap<String, (Vec<usize>, Vec<f64>)> = ckpt
            .buffers
            .iter()
            .map(|(k, r)| (k.clone(), (r.shape.clone(), r.data.clone())))
            .collect();
        model.backbone.load_buffers(&buffers);
        Ok(model)
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = self.to_checkpoint();
        let json = serde_json::to_string(&ckpt).expect("checkpoint serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        Self::from_checkpoint(&ckpt)
    }

    /// SHA-256 over the canonical encoding of all parameters.
    pub fn fingerprint(&mut self) -> String {
        let mut entries: Vec<(String, Vec<f64>)> = self
            .param_entries_mut()
            .into_iter()
            .map(|(n, v)| (n, v.iter().map(|&x| to_f64(x)).collect()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (name, data) in entries {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // surface a version mismatch as such, not as a decode failure
    if let Ok(head) = serde_json::from_str::<serde_json::Value>(&raw) {
        if let Some(v) = head.get("schema_version").and_then(|v| v.as_u64()) {
            if v as u32 != CHECKPOINT_SCHEMA_VERSION {
                return Err(Error::CheckpointVersion {
                    found: v as u32,
                    expected: CHECKPOINT_SCHEMA_VERSION,
                });
            }
        }
    }
    serde_json::from_str(&raw).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Parameter map of a checkpoint file, for initializing a backbone from
/// pretrained weights.
pub fn read_param_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let ckpt = read_checkpoint(path)?;
    Ok(ckpt
        .params
        .into_iter()
        .map(|(k, r)| (k, (r.shape, r.data)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;

    fn small() -> BackboneSpec {
        BackboneSpec::small(32, [4, 8, 12])
    }

    #[test]
    fn init_is_deterministic() {
        let mut a = ModelBundle::<f32>::init(&small(), 4, 32, 7).unwrap();
        let mut b = ModelBundle::<f32>::init(&small(), 4, 32, 7).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = ModelBundle::<f32>::init(&small(), 4, 32, 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.json");
        let mut m = ModelBundle::<f32>::init(&small(), 3, 32, 5).unwrap();
        let fp = m.fingerprint();
        m.save(&path).unwrap();
        let mut back = ModelBundle::<f32>::load(&path).unwrap();
        assert_eq!(back.fingerprint(), fp);
        assert_eq!(back.n_c, 3);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.json");
        let mut m = ModelBundle::<f32>::init(&small(), 3, 32, 5).unwrap();
        let mut ckpt = m.to_checkpoint();
        ckpt.schema_version = 99;
        fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        let err = ModelBundle::<f32>::load(&path).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 99, .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let err = ModelBundle::<f32>::load("/nope/missing.json").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn param_groups_are_prefixed() {
        let mut m = ModelBundle::<f32>::init(&small(), 4, 32, 7).unwrap();
        let names: Vec<String> = m.param_entries_mut().into_iter().map(|(n, _)| n).collect();
        for prefix in ["backbone.", "mlp.", "edge.", "node.", "disc."] {
            assert!(names.iter().any(|n| n.starts_with(prefix)), "{prefix}");
        }
        let heads_only = m.param_entries_for(&["mlp.", "disc."]);
        assert!(heads_only.iter().all(|(n, _)| !n.starts_with("backbone.")));
    }

    #[test]
    fn hybrid_checkpoint_roundtrip() {
        let spec = BackboneSpec {
            kind: BackboneKind::HybridConvAttention,
            d_f: 16,
            d_model: 16,
            encoder_blocks: 1,
            attn_heads: 2,
            mlp_dim: 24,
            stem_channels: 8,
            ..BackboneSpec::default()
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("hybrid.json");
        let mut m = ModelBundle::<f64>::init(&spec, 4, 32, 7).unwrap();
        let fp = m.fingerprint();
        m.save(&path).unwrap();
        let mut back = ModelBundle::<f64>::load(&path).unwrap();
        assert_eq!(back.fingerprint(), fp);
    }
    }
