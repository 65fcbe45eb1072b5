//! `.tsmn` checkpoint files.
//!
//! Layout: the magic `TSMN`, a little-endian `u32` version, a little-endian
//! `u64` header length, a JSON header, then raw little-endian `f32` arrays
//! in index order. Array offsets are relative to the first byte after the
//! header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{DiscriminatorConfig, MultiScaleDiscriminator};
use crate::error::{Error, Result};
use crate::model::{check_shapes, Autoencoder, ModelConfig};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSMN";
pub const VERSION: u32 = 1;

/// Prefix of optimizer moment arrays.
pub const OPTIMIZER_PREFIX: &str = "opt.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    discriminator: Option<DiscriminatorConfig>,
    step: u64,
    #[serde(default)]
    state: Option<serde_json::Value>,
    arrays: Vec<ArrayEntry>,
}

/// Everything persisted in a checkpoint. `arrays` holds generator
/// parameters under their own names, discriminator parameters under
/// `disc.`, and optional optimizer state under `opt.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub discriminator: Option<DiscriminatorConfig>,
    pub step: u64,
    /// Opaque training state (seeds, RNG position, optimizer counters).
    pub state: Option<serde_json::Value>,
    pub arrays: ParamStore<f32>,
}

impl Checkpoint {
    /// Checkpoint holding only a model.
    pub fn from_model<T: Scalar>(model: &Autoencoder<T>, step: u64) -> Self {
        Self {
            config: model.config().clone(),
            discriminator: None,
            step,
            state: None,
            arrays: model.params().cast(),
        }
    }

    pub fn with_discriminator<T: Scalar>(mut self, disc: &MultiScaleDiscriminator<T>) -> Self {
        self.discriminator = Some(disc.config().clone());
        for (name, t) in disc.params().iter() {
            self.arrays.insert(name, t.cast());
        }
        self
    }

    fn select(&self, keep: impl Fn(&str) -> bool) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (name, t) in self.arrays.iter().filter(|(n, _)| keep(n)) {
            out.insert(name, t.clone());
        }
        out
    }

    fn is_model_array(name: &str) -> bool {
        !name.starts_with("disc.") && !name.starts_with(OPTIMIZER_PREFIX)
    }

    /// Arrays with the given prefix, prefix stripped.
    pub fn arrays_with_prefix(&self, prefix: &str) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (name, t) in self.arrays.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Checks every array against the embedded configurations.
    pub fn validate(&self) -> Result<()> {
        let expected = Autoencoder::<f32>::param_shapes(&self.config);
        check_shapes(&expected, &self.select(Self::is_model_array))
            .map_err(|e| Error::Checkpoint(format!("model arrays inconsistent with config: {e}")))?;
        let disc = self.select(|n| n.starts_with("disc."));
        match &self.discriminator {
            Some(cfg) => check_shapes(&MultiScaleDiscriminator::<f32>::param_shapes(cfg), &disc)
                .map_err(|e| Error::Checkpoint(format!("discriminator arrays inconsistent with config: {e}")))?,
            None if !disc.is_empty() => {
                return Err(Error::Checkpoint("discriminator arrays without a discriminator config".into()))
            }
            None => {}
        }
        Ok(())
    }

    pub fn model<T: Scalar>(&self) -> Result<Autoencoder<T>> {
        Autoencoder::from_params(self.config.clone(), self.select(Self::is_model_array).cast())
    }

    /// Model, refusing a checkpoint whose architecture differs from `expected`.
    pub fn model_for<T: Scalar>(&self, expected: &ModelConfig) -> Result<Autoencoder<T>> {
        if &self.config != expected {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds a CR={} model with strides {:?}, expected CR={} with strides {:?}",
                self.config.compression_ratio(),
                self.config.stride_schedule,
                expected.compression_ratio(),
                expected.stride_schedule
            )));
        }
        self.model()
    }

    pub fn discriminator_model<T: Scalar>(&self) -> Result<Option<MultiScaleDiscriminator<T>>> {
        match &self.discriminator {
            None => Ok(None),
            Some(cfg) => {
                let params = self.select(|n| n.starts_with("disc.")).cast();
                MultiScaleDiscriminator::from_params(cfg.clone(), params).map(Some)
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut arrays = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, t) in self.arrays.iter() {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            discriminator: self.discriminator.clone(),
            step: self.step,
            state: self.state.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.arrays.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a TSMN checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body_start = 16usize
            .checked_add(usize::try_from(hlen).map_err(|_| corrupt("header length overflow".into()))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| corrupt(format!("malformed header: {e}")))?;
        let blob = &bytes[body_start..];
        let mut arrays = ParamStore::new();
        for entry in &header.arrays {
            if entry.dtype != "f32" {
                return Err(corrupt(format!("array {} has unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let start = usize::try_from(entry.offset).map_err(|_| corrupt("offset overflow".into()))?;
            let end = start
                .checked_add(4 * n)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| corrupt(format!("truncated data for array {}", entry.name)))?;
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if arrays.contains(&entry.name) {
                return Err(corrupt(format!("array {} appears twice", entry.name)));
            }
            arrays.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?);
        }
        let ckpt = Self {
            config: header.config,
            discriminator: header.discriminator,
            step: header.step,
            state: header.state,
            arrays,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tsmn.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cr: usize) -> ModelConfig {
        ModelConfig::preset(cr).unwrap().with_channels(2, 4, 2)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Autoencoder::<f32>::new(small(512), 4).unwrap();
        let d = MultiScaleDiscriminator::<f32>::new(DiscriminatorConfig::default().with_channels(vec![4; 5]), 5).unwrap();
        let mut c = Checkpoint::from_model(&m, 17).with_discriminator(&d);
        c.state = Some(serde_json::json!({"seed": 3}));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        for (name, t) in c.arrays.iter() {
            let u = back.arrays.get(name).unwrap();
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(back.discriminator_model::<f32>().unwrap().is_some());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Autoencoder::<f32>::new(small(256), 4).unwrap();
        let bytes = Checkpoint::from_model(&m, 0).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn architecture_mismatch_is_refused() {
        let m = Autoencoder::<f32>::new(small(512), 4).unwrap();
        let c = Checkpoint::from_model(&m, 0);
        assert!(c.model_for::<f32>(&small(512)).is_ok());
        assert!(c.model_for::<f32>(&small(1024)).is_err());
        let mut wrong = c.clone();
        wrong.config = small(1024);
        assert!(wrong.to_bytes().is_err());
    }
}
