//! Network checkpoints as safetensors archives.
//!
//! Every tensor of the parameter store is stored as little-endian `F64`
//! under its parameter name. The header metadata carries the format
//! version, the network config, the list of buffer names and a free-form
//! JSON payload (training config, metrics).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use cisod_tensor::nn::ParamStore;
use cisod_tensor::Tensor;
use safetensors::{Dtype, SafeTensors};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{NetworkConfig, SodNet};

pub const CHECKPOINT_VERSION: &str = "1";

/// Metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub extra: Value,
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn save_checkpoint(path: &Path, net: &SodNet, extra: Value) -> Result<()> {
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut buffers = Vec::new();
    for (name, t) in net.store.params() {
        blobs.push((name.clone(), t.shape().to_vec(), encode(t)));
    }
    for (name, t) in net.store.buffers() {
        blobs.push((name.clone(), t.shape().to_vec(), encode(t)));
        buffers.push(name.clone());
    }
    let views = blobs
        .iter()
        .map(|(n, s, d)| Ok((n.clone(), safetensors::tensor::TensorView::new(Dtype::F64, s.clone(), d).map_err(st_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format_version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("network".to_string(), serde_json::to_string(&net.config)?),
        ("buffers".to_string(), serde_json::to_string(&buffers)?),
        ("extra".to_string(), serde_json::to_string(&extra)?),
    ]);
    let bytes = safetensors::serialize(views, &Some(metadata)).map_err(st_err)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode(view: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let data: Vec<f64> = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Tensor::new(view.shape().to_vec(), data)?)
}

fn read_meta(bytes: &[u8]) -> Result<HashMap<String, String>> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_meta(&read_meta(&bytes)?)
}

fn parse_meta(meta: &HashMap<String, String>) -> Result<CheckpointMeta> {
    match meta.get("format_version").map(String::as_str) {
        Some(CHECKPOINT_VERSION) => {}
        other => return Err(Error::Checkpoint(format!("unsupported checkpoint version {other:?}"))),
    }
    let network = serde_json::from_str(meta.get("network").ok_or_else(|| Error::Checkpoint("missing network config".into()))?)?;
    let extra = meta
        .get("extra")
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .unwrap_or(Value::Null);
    Ok(CheckpointMeta { network, extra })
}

/// Loads weights into an existing network. Every parameter and buffer must
/// be present with the same shape, and the file must not hold extra keys.
pub fn load_weights(net: &mut SodNet, path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta_map = read_meta(&bytes)?;
    let meta = parse_meta(&meta_map)?;
    let buffers: BTreeSet<String> = meta_map
        .get("buffers")
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .unwrap_or_default();
    let st = SafeTensors::deserialize(&bytes).map_err(st_err)?;
    let mut file = ParamStore::new();
    for (name, view) in st.tensors() {
        let t = decode(&view)?;
        if buffers.contains(&name) {
            file.insert_buffer(name, t)?;
        } else {
            file.insert_param(name, t)?;
        }
    }
    let mismatched = net.store.mismatched_keys(&file);
    if !mismatched.is_empty() {
        return Err(Error::IncompatibleCheckpoint(mismatched));
    }
    net.store.copy_from(&file)?;
    Ok(meta)
}

/// Rebuilds the network recorded in the checkpoint and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(SodNet, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let config = NetworkConfig {
        pretrained_weights_path: None,
        ..meta.network.clone()
    };
    let mut net = SodNet::new(&config)?;
    load_weights(&mut net, path)?;
    Ok((net, meta))
}

/// Loads torchvision-named ResNet-50 weights (`conv1.weight`,
/// `layer1.0.bn1.running_mean`, ...) into the `backbone.` namespace.
/// Classifier weights and batch counters are ignored; every backbone
/// tensor must be provided.
pub fn load_backbone_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(st_err)?;
    let mut loaded = BTreeSet::new();
    let mut problems = Vec::new();
    for (name, view) in st.tensors() {
        if name.starts_with("fc.") || name.ends_with("num_batches_tracked") {
            continue;
        }
        let key = format!("backbone.{name}");
        let t = decode(&view)?;
        let result = if store.param(&key).is_some() {
            store.set_param(&key, t)
        } else if store.buffer(&key).is_some() {
            store.set_buffer(&key, t)
        } else {
            problems.push(format!("{key} (unexpected)"));
            continue;
        };
        if let Err(e) = result {
            problems.push(format!("{key} ({e})"));
        } else {
            loaded.insert(key);
        }
    }
    let expected: Vec<String> = store
        .keys()
        .into_iter()
        .filter(|k| k.starts_with("backbone."))
        .collect();
    problems.extend(
        expected
            .into_iter()
            .filter(|k| !loaded.contains(k))
            .map(|k| format!("{k} (missing)")),
    );
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::IncompatibleCheckpoint(problems))
    }
}

/// Hex SHA-256 of a file, used to identify checkpoints in reports.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
