//! Parameter checkpoints: `<stem>.json` metadata plus `<stem>.bin`, the
//! entries as little-endian f32 arrays concatenated in metadata order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::models::{Architecture, StudentModel, TeacherModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// `student` or `teacher`.
    pub kind: String,
    pub arch: serde_json::Value,
    /// Free-form training configuration.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub seed: u64,
    pub entries: Vec<EntryMeta>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Accepts either the stem or a path ending in `.json`/`.bin`.
pub fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub fn write_params<F: Scalar>(
    stem: &Path,
    meta: &CheckpointMeta,
    params: &ParamSet<F>,
) -> Result<()> {
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.entries = params
        .iter()
        .map(|(name, t)| EntryMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let mut bytes = Vec::with_capacity(params.num_scalars() * 4);
    for (_, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json_path = with_ext(stem, "json");
    let bin_path = with_ext(stem, "bin");
    fs::write(&json_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

pub fn read_params<F: Scalar>(stem: &Path) -> Result<(CheckpointMeta, ParamSet<F>)> {
    let json_path = with_ext(stem, "json");
    let bin_path = with_ext(stem, "bin");
    for p in [&json_path, &bin_path] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} is not supported (expected {FORMAT_VERSION})",
            json_path.display(),
            meta.format_version
        )));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected: usize = meta
        .entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, metadata lists {} floats",
            bin_path.display(),
            bytes.len(),
            expected
        )));
    }
    let mut params = ParamSet::new();
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| F::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    for e in &meta.entries {
        let len = e.shape.iter().product();
        let data: Vec<F> = floats.by_ref().take(len).collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((meta, params))
}

fn check_kind(meta: &CheckpointMeta, kind: &str) -> Result<()> {
    if meta.kind == kind {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found `{}`",
            meta.kind
        )))
    }
}

/// Metadata for a model checkpoint; `entries` are filled in on write.
pub fn model_meta<A: Architecture>(
    kind: &str,
    arch: &A,
    config: serde_json::Value,
    epoch: usize,
    seed: u64,
) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        arch: serde_json::to_value(arch)?,
        config,
        epoch,
        seed,
        entries: Vec::new(),
    })
}

pub fn save_student<A: Architecture, F: Scalar>(
    stem: &Path,
    model: &StudentModel<A, F>,
    config: serde_json::Value,
    epoch: usize,
    seed: u64,
) -> Result<()> {
    write_params(
        stem,
        &model_meta("student", &model.arch, config, epoch, seed)?,
        &model.params,
    )
}

pub fn save_teacher<A: Architecture, F: Scalar>(
    stem: &Path,
    model: &TeacherModel<A, F>,
    config: serde_json::Value,
    epoch: usize,
    seed: u64,
) -> Result<()> {
    write_params(
        stem,
        &model_meta("teacher", &model.arch, config, epoch, seed)?,
        &model.params,
    )
}

fn load_model<A: Architecture + DeserializeOwned, F: Scalar>(
    stem: &Path,
    kind: &str,
    with_head: bool,
) -> Result<(CheckpointMeta, A, ParamSet<F>)> {
    let (meta, params) = read_params::<F>(stem)?;
    check_kind(&meta, kind)?;
    let arch: A = serde_json::from_value(meta.arch.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad architecture: {e}", stem.display())))?;
    // Compare the entry layout against a freshly built model of this architecture.
    let fresh = crate::models::init_student::<A, F>(&arch, 0)?.params;
    let expected: ParamSet<F> = fresh
        .iter()
        .filter(|(k, _)| with_head || k.starts_with(crate::models::ENC_PREFIX))
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    if !expected.congruent(&params) {
        return Err(Error::Checkpoint(format!(
            "{}: parameter layout does not match its architecture",
            stem.display()
        )));
    }
    Ok((meta, arch, params))
}

pub fn load_student<A: Architecture, F: Scalar>(
    stem: &Path,
) -> Result<(CheckpointMeta, StudentModel<A, F>)> {
    let (meta, arch, params) = load_model(stem, "student", true)?;
    Ok((meta, StudentModel { arch, params }))
}

pub fn load_teacher<A: Architecture, F: Scalar>(
    stem: &Path,
) -> Result<(CheckpointMeta, TeacherModel<A, F>)> {
    let (meta, arch, params) = load_model(stem, "teacher", false)?;
    Ok((meta, TeacherModel { arch, params }))
}
