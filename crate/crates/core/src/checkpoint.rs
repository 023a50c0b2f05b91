//! Checkpoints are single safetensors archives. Every parameter and
//! normalization buffer of the four parts is stored as little-endian `F32`
//! under its dotted name (`backbone.enc0.conv1.conv.weight`,
//! `discriminator.out.bias`, ...). Convolution weights are flattened to
//! `[out, in * k * k]`. The training configuration is stored as JSON under
//! the metadata key `train_config`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::Module;
use crate::tensor::Real;
use crate::trainer::TrainConfig;

pub const CONFIG_KEY: &str = "train_config";

pub fn save_checkpoint<F: Real>(bundle: &ModelBundle<F>, config: &TrainConfig, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    bundle.visit("", &mut |name, _, t| {
        let bytes = t
            .iter()
            .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
            .collect::<Vec<u8>>();
        tensors.push((name, t.shape().to_vec(), bytes));
    });
    let views = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let config_json = serde_json::to_string(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata = Some(HashMap::from([(CONFIG_KEY.to_string(), config_json)]));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::write(parent, e))?;
        }
    }
    safetensors::serialize_to_file(views, &metadata, path).map_err(|e| Error::write(path, e))
}

/// Reads only the stored training configuration.
pub fn read_checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::read(path, e))?;
    config_from_bytes(&bytes, path)
}

fn config_from_bytes(bytes: &[u8], path: &Path) -> Result<TrainConfig> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::read(path, e))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no {CONFIG_KEY} metadata", path.display())))?;
    serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad {CONFIG_KEY}: {e}")))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(ModelBundle<F>, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::read(path, e))?;
    let config = config_from_bytes(&bytes, path)?;
    let archive = SafeTensors::deserialize(&bytes).map_err(|e| Error::read(path, e))?;
    // The segmentation head weight is [1, D]; its width is the feature dimension.
    if let Ok(seg) = archive.tensor("seg_head.weight") {
        let stored = seg.shape().get(1).copied().unwrap_or(0);
        if stored != config.model.feature_dim() {
            return Err(Error::FeatureDim {
                checkpoint: stored,
                config: config.model.feature_dim(),
            });
        }
    }
    let mut bundle = ModelBundle::<F>::new(&config.model, config.seed)?;
    let mut failure: Option<Error> = None;
    let mut fill = |name: String, dst: &mut ndarray::ArrayD<F>| {
        if failure.is_some() {
            return;
        }
        let view = match archive.tensor(&name) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(Error::Checkpoint(format!("missing tensor {name}: {e}")));
                return;
            }
        };
        if view.dtype() != Dtype::F32 || view.shape() != dst.shape() {
            failure = Some(Error::Checkpoint(format!(
                "tensor {name}: stored {:?} {:?}, model expects F32 {:?}",
                view.dtype(),
                view.shape(),
                dst.shape()
            )));
            return;
        }
        for (d, chunk) in dst.iter_mut().zip(view.data().chunks_exact(4)) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            *d = F::lit(v as f64);
        }
    };
    bundle.visit_params_mut("", &mut |name, p| fill(name, &mut p.value));
    bundle.visit_buffers_mut("", &mut |name, b| fill(name, b));
    match failure {
        Some(e) => Err(e),
        None => Ok((bundle, config)),
    }
}
