//! Versioned named-tensor container: a safetensors file whose metadata holds
//! a JSON manifest.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::netzoo::{Generator, GeneratorSpec};
use crate::nn::{Net, ParamInit};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "gandistill.manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    /// Full training state: every network, optimizer and counter.
    TrainState,
    /// Student generator weights only.
    Student,
    /// Written when training aborts on a non-finite loss.
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: ContainerKind,
    pub student_spec: GeneratorSpec,
    /// Free-form state (run config, counters, RNG, step counts).
    #[serde(default)]
    pub state: serde_json::Value,
}

impl Manifest {
    pub fn new(kind: ContainerKind, student_spec: GeneratorSpec) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind,
            student_spec,
            state: serde_json::Value::Null,
        }
    }
}

pub fn save(path: &Path, tensors: &[(String, Tensor)], manifest: &Manifest) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    if let Some((dup, _)) = tensors.iter().find(|(n, _)| !seen.insert(n.as_str())) {
        return Err(Error::checkpoint(path, format!("duplicate tensor name `{dup}`")));
    }
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?)]);
    let contiguous = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(contiguous.iter().map(|(n, t)| (n.as_str(), t)), Some(meta), &tmp)
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::checkpoint(path, format!("corrupt container: {e}")))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::checkpoint(path, "no manifest"))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| Error::checkpoint(path, format!("bad manifest: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::checkpoint(
            path,
            format!("format version {version:?} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::checkpoint(path, format!("bad manifest: {e}")))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| Error::checkpoint(path, format!("corrupt container: {e}")))?;
    Ok((tensors, manifest))
}

/// Writes the student generator and its spec; nothing else.
pub fn export_student(student: &Generator, path: &Path) -> Result<()> {
    let manifest = Manifest::new(ContainerKind::Student, student.spec().clone());
    save(path, &student.state_tensors(), &manifest)
}

/// Rebuilds a generator from an exported student file (or any container
/// holding `student.`-prefixed or unprefixed student tensors).
pub fn import_student(path: &Path, device: &Device) -> Result<Generator> {
    let (tensors, manifest) = load(path, device)?;
    let prefix = match manifest.kind {
        ContainerKind::Student => "",
        _ => "student.",
    };
    let dtype = tensors
        .values()
        .next()
        .map(|t| t.dtype())
        .ok_or_else(|| Error::checkpoint(path, "container holds no tensors"))?;
    let g = Generator::build(&manifest.student_spec, &mut ParamInit::new(0, dtype, device))?;
    g.load_state(&tensors, prefix)
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    Ok(g)
}
