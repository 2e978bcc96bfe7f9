//! Checkpoint directories: an architecture descriptor (`arch.json`), a
//! parameter blob keyed by layer id (`params.bin`, packed array format),
//! and a metadata record (`meta.json`). Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::{ArchSpec, DownstreamModel};
use crate::packed::{PackedArray, PackedFile};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn save_checkpoint(dir: &Path, model: &DownstreamModel, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let arch_path = dir.join("arch.json");
    let arch_json = serde_json::to_string_pretty(model.arch())
        .map_err(|e| Error::io(arch_path.display().to_string(), e))?;
    fs::write(&arch_path, arch_json).map_err(|e| Error::io(arch_path.display().to_string(), e))?;

    let mut arrays = Vec::new();
    for layer in model.layers() {
        for (name, t) in layer.param_names().iter().zip(&layer.params) {
            arrays.push(PackedArray::from_tensor(
                &format!("{}.{}", layer.id, name),
                t,
            ));
        }
        for (name, t) in layer.buffer_names().iter().zip(&layer.buffers) {
            arrays.push(PackedArray::from_tensor(
                &format!("{}.{}", layer.id, name),
                t,
            ));
        }
    }
    PackedFile { arrays, meta: None }.write(&dir.join("params.bin"))?;

    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    fs::write(&meta_path, meta_json).map_err(|e| Error::io(meta_path.display().to_string(), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(DownstreamModel, CheckpointMeta)> {
    let arch_path = dir.join("arch.json");
    let arch_json = fs::read_to_string(&arch_path)
        .map_err(|e| Error::io(arch_path.display().to_string(), e))?;
    let arch: ArchSpec = serde_json::from_str(&arch_json)
        .map_err(|e| Error::Config(format!("invalid architecture descriptor: {e}")))?;
    let mut model = DownstreamModel::new(arch, 0)?;

    let blob = PackedFile::read(&dir.join("params.bin"))?;
    for layer in model.layers_mut() {
        let id = layer.id.clone();
        let names: Vec<String> = layer
            .param_names()
            .iter()
            .map(|n| format!("{id}.{n}"))
            .collect();
        let bufnames: Vec<String> = layer
            .buffer_names()
            .iter()
            .map(|n| format!("{id}.{n}"))
            .collect();
        for (tensor, name) in layer
            .params
            .iter_mut()
            .chain(layer.buffers.iter_mut())
            .zip(names.iter().chain(&bufnames))
        {
            let arr = blob
                .array(name)
                .map_err(|_| Error::Config(format!("checkpoint blob missing tensor '{name}'")))?;
            let loaded = arr.as_tensor()?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::Config(format!(
                    "tensor '{name}' shape {:?} does not match architecture descriptor {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            *tensor = loaded;
        }
    }

    let meta_path = dir.join("meta.json");
    let meta_json = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_json)
        .map_err(|e| Error::Config(format!("invalid checkpoint metadata: {e}")))?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageBatch;
    use crate::model::ArchSpec;
    use crate::tensor::Tensor;
    use tempfile::tempdir;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: "stage1".into(),
            epoch: 3,
            seed: 42,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn roundtrip_is_bitwise_and_preserves_logits() {
        let dir = tempdir().unwrap();
        let mut model = DownstreamModel::new(ArchSpec::tiny(2), 5).unwrap();
        // Move running stats away from init so buffers are covered too.
        model.layers_mut()[1].buffers[0].data_mut()[0] = 0.123456789;
        let pixels = Tensor::from_vec(&[2, 1, 8, 8], vec![0.25; 128]);
        let batch = ImageBatch::new(pixels, vec![0, 1]).unwrap();
        let before = model.forward(&batch).unwrap();

        save_checkpoint(dir.path(), &model, &meta()).unwrap();
        let (loaded, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.model_hash(), model.model_hash());
        let after = loaded.forward(&batch).unwrap();
        assert_eq!(before.logits.data(), after.logits.data());
    }

    #[test]
    fn mismatched_descriptor_is_config_error() {
        let dir = tempdir().unwrap();
        let model = DownstreamModel::new(ArchSpec::tiny(2), 5).unwrap();
        save_checkpoint(dir.path(), &model, &meta()).unwrap();
        // Tamper: claim a different feature dimension.
        let mut arch: ArchSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("arch.json")).unwrap())
                .unwrap();
        arch.feature_dim += 1;
        std::fs::write(
            dir.path().join("arch.json"),
            serde_json::to_string(&arch).unwrap(),
        )
        .unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn missing_checkpoint_is_io_error_with_path() {
        let dir = tempdir().unwrap();
        match load_checkpoint(&dir.path().join("nope")) {
            Err(Error::Io { path, .. }) => assert!(path.contains("nope")),
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
