//! Checkpoints: the flat parameter vector as a rank-1 f32 SPHT tensor plus a
//! JSON sidecar holding the network config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{UNet, UNetConfig, UNetParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::storage::Tensor;

pub const CHECKPOINT_FORMAT: &str = "sphseg-unet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: UNetConfig,
    pub param_count: usize,
    /// File name of the tensor, relative to the sidecar.
    pub tensor: String,
    /// Epoch the parameters come from, when known.
    #[serde(default)]
    pub epoch: Option<usize>,
}

/// Sidecar path for a tensor path: `model.spht` -> `model.json`.
pub fn sidecar_path(tensor: &Path) -> PathBuf {
    tensor.with_extension("json")
}

/// Writes `path` (the tensor) and its sidecar. Parameters are stored as f32.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, net: &UNet, params: &UNetParams<T>, epoch: Option<usize>) -> Result<()> {
    let path = path.as_ref();
    if params.data.len() != net.param_count() {
        return Err(Error::Shape(format!("{} parameters, network needs {}", params.data.len(), net.param_count())));
    }
    Tensor::from_scalars(vec![params.data.len()], &params.data)?.save(path)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: *net.config(),
        param_count: net.param_count(),
        tensor: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        epoch,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Reads a checkpoint given either the tensor or the sidecar path.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(UNet, UNetParams<T>, CheckpointMeta)> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&side)?)?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", meta.format, meta.version)));
    }
    let net = UNet::new(meta.config)?;
    if net.param_count() != meta.param_count {
        return Err(Error::Format(format!("sidecar lists {} parameters, config implies {}", meta.param_count, net.param_count())));
    }
    let tensor_path = side.with_file_name(&meta.tensor);
    let t = Tensor::load(&tensor_path)?;
    t.expect_dims(&[net.param_count()])?;
    let params = UNetParams::<T> { data: t.to_scalars()? };
    if params.data.iter().any(|v: &T| !v.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok((net, params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::Attention;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = UNetConfig { in_channels: 3, base_filters: 2, depth: 2, image_side: 8, attention: Attention::Both, seed: 5, ..UNetConfig::default() };
        let net = UNet::new(cfg).unwrap();
        let p = net.init::<f32>();
        let path = dir.path().join("m.spht");
        save_checkpoint(&path, &net, &p, Some(3)).unwrap();
        for given in [path.clone(), sidecar_path(&path)] {
            let (n2, p2, meta) = load_checkpoint::<f32>(&given).unwrap();
            assert_eq!(n2.config(), net.config());
            assert_eq!(p2, p);
            assert_eq!(meta.epoch, Some(3));
        }
        // a sidecar whose config disagrees with the tensor is rejected
        let mut meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        meta.config.base_filters = 3;
        meta.param_count = UNet::new(meta.config).unwrap().param_count();
        std::fs::write(sidecar_path(&path), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
