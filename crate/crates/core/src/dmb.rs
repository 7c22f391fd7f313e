//! DMB container: `"DMB1"`, a little-endian `u64` manifest length, a UTF-8
//! JSON manifest, then raw little-endian `f64` blobs at the offsets the
//! manifest lists (relative to the end of the manifest).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{
    GradientBundle, LayerGradient, LayerKind, LayerRecord, ModelBundle, PruneMask, SampleMatrix,
    Tensor,
};
use crate::refnet::CalibrationSet;

pub const MAGIC: &[u8; 4] = b"DMB1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Model,
    Gradient,
    Calibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    AvgGrad,
    PerSampleGrads,
    Mask,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub role: Role,
    pub layer_id: usize,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_per_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<LayerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prunable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub bundle: BundleKind,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_used: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bundle {
    Model(ModelBundle),
    Gradient(GradientBundle),
    Calibration(CalibrationSet),
}

impl Bundle {
    pub fn kind(&self) -> BundleKind {
        match self {
            Bundle::Model(_) => BundleKind::Model,
            Bundle::Gradient(_) => BundleKind::Gradient,
            Bundle::Calibration(_) => BundleKind::Calibration,
        }
    }
}

struct Writer {
    entries: Vec<Entry>,
    blob: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            blob: Vec::new(),
        }
    }

    fn push(&mut self, mut entry: Entry, values: impl IntoIterator<Item = f64>) {
        let start = self.blob.len();
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        entry.byte_offset = start as u64;
        entry.byte_length = (self.blob.len() - start) as u64;
        self.entries.push(entry);
    }

    fn finish(self, mut manifest: Manifest) -> Result<Vec<u8>> {
        manifest.entries = self.entries;
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }
}

fn entry(name: String, role: Role, layer_id: usize, shape: Vec<usize>) -> Entry {
    Entry {
        name,
        role,
        layer_id,
        shape,
        dtype: "f64".into(),
        byte_offset: 0,
        byte_length: 0,
        flops_per_weight: None,
        kind: None,
        prunable: None,
    }
}

fn manifest(bundle: BundleKind, meta: BTreeMap<String, String>) -> Manifest {
    Manifest {
        version: VERSION,
        bundle,
        meta,
        lambda_used: None,
        n_samples: None,
        seed: None,
        entries: Vec::new(),
    }
}

pub fn encode(bundle: &Bundle) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    match bundle {
        Bundle::Model(model) => {
            model.validate()?;
            for layer in &model.layers {
                let mut e = entry(
                    layer.name.clone(),
                    Role::Weight,
                    layer.layer_id,
                    layer.weight.shape().to_vec(),
                );
                e.flops_per_weight = Some(layer.flops_per_weight);
                e.kind = Some(layer.kind);
                e.prunable = Some(layer.prunable);
                w.push(e, layer.weight.data().iter().copied());
            }
            for mask in &model.masks {
                let name = format!("{}.mask", model.layers[mask.layer_id].name);
                let e = entry(name, Role::Mask, mask.layer_id, mask.shape.clone());
                w.push(e, mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
            w.finish(manifest(BundleKind::Model, model.meta.clone()))
        }
        Bundle::Gradient(grads) => {
            grads.validate()?;
            for lg in &grads.layers {
                let e = entry(
                    format!("layer{}.avg_grad", lg.layer_id),
                    Role::AvgGrad,
                    lg.layer_id,
                    lg.avg_grad.shape().to_vec(),
                );
                w.push(e, lg.avg_grad.data().iter().copied());
                if let Some(ps) = &lg.per_sample {
                    let e = entry(
                        format!("layer{}.per_sample_grads", lg.layer_id),
                        Role::PerSampleGrads,
                        lg.layer_id,
                        vec![ps.rows(), ps.cols()],
                    );
                    w.push(e, ps.data().iter().copied());
                }
            }
            let mut m = manifest(BundleKind::Gradient, grads.meta.clone());
            m.lambda_used = Some([grads.lambda_used.0, grads.lambda_used.1]);
            m.n_samples = Some(grads.n_samples);
            w.finish(m)
        }
        Bundle::Calibration(calib) => {
            calib.validate()?;
            let mut shape = vec![calib.inputs.len()];
            shape.extend_from_slice(calib.inputs[0].shape());
            let e = entry("inputs".into(), Role::Input, 0, shape);
            w.push(e, calib.inputs.iter().flat_map(|t| t.data().iter().copied()));
            let mut m = manifest(BundleKind::Calibration, BTreeMap::new());
            m.n_samples = Some(calib.inputs.len());
            m.seed = Some(calib.seed);
            w.finish(m)
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Bundle> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotDmb);
    }
    let len_bytes: [u8; 8] = bytes
        .get(4..12)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::MalformedManifest("truncated header".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(12..12usize.saturating_add(manifest_len))
        .ok_or_else(|| Error::MalformedManifest("manifest extends past end of file".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    let blob = &bytes[12 + manifest_len..];

    let read = |e: &Entry| -> Result<Vec<f64>> {
        if e.dtype != "f64" {
            return Err(Error::MalformedManifest(format!(
                "entry `{}` has unsupported dtype `{}`",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start.checked_add(e.byte_length as usize);
        match end {
            Some(end) if e.byte_length as usize == numel * 8 && end <= blob.len() => Ok(blob
                [start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()),
            _ => Err(Error::ByteLengthMismatch(e.name.clone())),
        }
    };

    let bundle = match manifest.bundle {
        BundleKind::Model => {
            let mut layers = Vec::new();
            let mut masks = Vec::new();
            for e in &manifest.entries {
                match e.role {
                    Role::Weight => {
                        let missing =
                            |f: &str| Error::MalformedManifest(format!("entry `{}` lacks {f}", e.name));
                        layers.push(LayerRecord {
                            layer_id: e.layer_id,
                            name: e.name.clone(),
                            kind: e.kind.ok_or_else(|| missing("kind"))?,
                            weight: Tensor::new(e.shape.clone(), read(e)?)?,
                            flops_per_weight: e
                                .flops_per_weight
                                .ok_or_else(|| missing("flops_per_weight"))?,
                            prunable: e.prunable.ok_or_else(|| missing("prunable"))?,
                        });
                    }
                    Role::Mask => {
                        let values = read(e)?;
                        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
                            return Err(Error::MalformedManifest(format!(
                                "mask `{}` holds non-binary values",
                                e.name
                            )));
                        }
                        let bits = values.iter().map(|&v| v == 1.0).collect();
                        masks.push(PruneMask::from_bits(e.layer_id, e.shape.clone(), bits));
                    }
                    other => {
                        return Err(Error::MalformedManifest(format!(
                            "role {other:?} not allowed in a model bundle"
                        )))
                    }
                }
            }
            let model = ModelBundle {
                layers,
                meta: manifest.meta,
                masks,
            };
            model.validate()?;
            Bundle::Model(model)
        }
        BundleKind::Gradient => {
            let n_samples = manifest
                .n_samples
                .ok_or_else(|| Error::MalformedManifest("gradient bundle lacks n_samples".into()))?;
            let [lb, lc] = manifest
                .lambda_used
                .ok_or_else(|| Error::MalformedManifest("gradient bundle lacks lambda_used".into()))?;
            let mut layers: Vec<LayerGradient> = Vec::new();
            for e in &manifest.entries {
                match e.role {
                    Role::AvgGrad => layers.push(LayerGradient {
                        layer_id: e.layer_id,
                        avg_grad: Tensor::new(e.shape.clone(), read(e)?)?,
                        per_sample: None,
                    }),
                    Role::PerSampleGrads => {
                        if e.shape.len() != 2 {
                            return Err(Error::MalformedManifest(format!(
                                "per_sample_grads `{}` must be 2-D",
                                e.name
                            )));
                        }
                        let m = SampleMatrix::new(e.shape[0], e.shape[1], read(e)?)?;
                        let lg = layers
                            .iter_mut()
                            .find(|g| g.layer_id == e.layer_id)
                            .ok_or_else(|| {
                                Error::MalformedManifest(format!(
                                    "per_sample_grads `{}` precedes its avg_grad",
                                    e.name
                                ))
                            })?;
                        lg.per_sample = Some(m);
                    }
                    other => {
                        return Err(Error::MalformedManifest(format!(
                            "role {other:?} not allowed in a gradient bundle"
                        )))
                    }
                }
            }
            let grads = GradientBundle {
                layers,
                lambda_used: (lb, lc),
                n_samples,
                meta: manifest.meta,
            };
            grads.validate()?;
            Bundle::Gradient(grads)
        }
        BundleKind::Calibration => {
            let e = match manifest.entries.as_slice() {
                [e] if e.role == Role::Input && e.shape.len() >= 2 => e,
                _ => {
                    return Err(Error::MalformedManifest(
                        "calibration bundle needs exactly one input entry".into(),
                    ))
                }
            };
            let values = read(e)?;
            let sample_shape = e.shape[1..].to_vec();
            let per: usize = sample_shape.iter().product();
            let inputs = values
                .chunks_exact(per)
                .map(|c| Tensor::new(sample_shape.clone(), c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let calib = CalibrationSet {
                inputs,
                seed: manifest.seed.unwrap_or(0),
            };
            calib.validate()?;
            Bundle::Calibration(calib)
        }
    };
    Ok(bundle)
}

/// Validates and writes a bundle to `path`.
pub fn save_bundle(bundle: &Bundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn wrong_kind(expected: BundleKind, found: BundleKind) -> Error {
    Error::InvalidBundle(format!("expected a {expected:?} bundle, found {found:?}"))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    match load_bundle(path)? {
        Bundle::Model(m) => Ok(m),
        other => Err(wrong_kind(BundleKind::Model, other.kind())),
    }
}

pub fn load_gradients(path: impl AsRef<Path>) -> Result<GradientBundle> {
    match load_bundle(path)? {
        Bundle::Gradient(g) => Ok(g),
        other => Err(wrong_kind(BundleKind::Gradient, other.kind())),
    }
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    match load_bundle(path)? {
        Bundle::Calibration(c) => Ok(c),
        other => Err(wrong_kind(BundleKind::Calibration, other.kind())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelBundle {
        let layer = LayerRecord {
            layer_id: 0,
            name: "fc".into(),
            kind: LayerKind::Dense,
            weight: Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.1]).unwrap(),
            flops_per_weight: 2.0,
            prunable: true,
        };
        ModelBundle::new(vec![layer], BTreeMap::from([("model".into(), "tiny".into())])).unwrap()
    }

    fn blob_len(bytes: &[u8]) -> usize {
        let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        bytes.len() - 12 - n
    }

    #[test]
    fn single_layer_layout() {
        let bytes = encode(&Bundle::Model(tiny_model())).unwrap();
        assert_eq!(&bytes[..4], b"DMB1");
        assert_eq!(blob_len(&bytes), 32);
        let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let m: Manifest = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].byte_length, 32);
        assert_eq!(decode(&bytes).unwrap(), Bundle::Model(tiny_model()));
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut bytes = encode(&Bundle::Model(tiny_model())).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("tensor byte-length mismatch"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = encode(&Bundle::Model(tiny_model())).unwrap();
        bytes[3] = b'2';
        assert_eq!(decode(&bytes).unwrap_err().to_string(), "not a DMB file");
        assert!(matches!(decode(b"DM"), Err(Error::NotDmb)));
    }

    #[test]
    fn unsupported_version_rejected() {
        let bytes = encode(&Bundle::Model(tiny_model())).unwrap();
        let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let mut m: Manifest = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        m.version = 7;
        let json = serde_json::to_vec(&m).unwrap();
        let mut out = b"DMB1".to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + n..]);
        assert!(matches!(decode(&out), Err(Error::UnsupportedVersion(7))));
    }

    #[test]
    fn malformed_manifest_rejected() {
        let mut out = b"DMB1".to_vec();
        out.extend_from_slice(&5u64.to_le_bytes());
        out.extend_from_slice(b"{oops");
        assert!(matches!(decode(&out), Err(Error::MalformedManifest(_))));
    }

    #[test]
    fn nan_rejected_before_write() {
        let mut m = tiny_model();
        m.layers[0].weight.data_mut()[2] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dmb");
        let err = save_bundle(&Bundle::Model(m), &path).unwrap_err();
        assert!(err.to_string().contains("non-finite tensor"));
        assert!(!path.exists());
    }

    #[test]
    fn empty_layers_rejected() {
        let m = ModelBundle {
            layers: vec![],
            meta: BTreeMap::new(),
            masks: vec![],
        };
        assert_eq!(
            encode(&Bundle::Model(m)).unwrap_err().to_string(),
            "no prunable layers"
        );
    }

    #[test]
    fn masks_round_trip() {
        let mut m = tiny_model();
        m.masks
            .push(PruneMask::from_bits(0, vec![2, 2], vec![true, false, true, false]));
        let back = decode(&encode(&Bundle::Model(m.clone())).unwrap()).unwrap();
        assert_eq!(back, Bundle::Model(m));
    }
}
