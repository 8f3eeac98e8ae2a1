//! Artifact serialization: the factor/model archive container, training
//! checkpoints, metrics reports, and line-delimited training logs. All
//! files are written atomically (temp file + rename).
//!
//! Archive byte layout: 8-byte magic `SDTNARC\0`, a little-endian u64
//! manifest length, the JSON manifest, then the raw array payloads as
//! little-endian 64-bit reals concatenated in manifest order.

use crate::error::{Result, SdtnError};
use crate::metrics::ConfusionMatrix;
use crate::sdtn::{Classifier, GradLowRankPair, SdtnState};
use crate::tensor::{DenseTensor, FactorSet, RankMatrix};
use crate::trn::{TrainRecord, TrnConfig, TrnModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const ARCHIVE_MAGIC: &[u8; 8] = b"SDTNARC\0";

/// Write `bytes` to `path` atomically: a temp file in the same directory is
/// renamed over the target, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .ok_or_else(|| SdtnError::Io(std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp-{}", stem.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a config document's raw bytes; stamped into every
/// artifact so checkpoints and reports can be matched to their config.
pub fn config_digest(config_bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub dims: Vec<usize>,
}

/// JSON manifest at the head of every archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    /// "factors" for decomposition archives, "checkpoint" for model state.
    pub kind: String,
    pub config_digest: String,
    pub seed: u64,
    pub iteration: usize,
    /// Kind-specific structured metadata.
    pub extra: serde_json::Value,
    pub arrays: Vec<ArrayMeta>,
}

pub fn write_archive(
    path: &Path,
    mut manifest: ArchiveManifest,
    arrays: &[(&str, &DenseTensor)],
) -> Result<()> {
    manifest.arrays = arrays
        .iter()
        .map(|(name, t)| ArrayMeta {
            name: name.to_string(),
            dims: t.dims().to_vec(),
        })
        .collect();
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| SdtnError::Parse(format!("manifest serialization: {e}")))?;
    let mut bytes = ARCHIVE_MAGIC.to_vec();
    bytes.extend((manifest_json.len() as u64).to_le_bytes());
    bytes.extend(manifest_json);
    for (_, t) in arrays {
        for v in t.data() {
            bytes.extend(v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

pub fn read_archive(path: &Path) -> Result<(ArchiveManifest, Vec<DenseTensor>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| SdtnError::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != ARCHIVE_MAGIC {
        return Err(SdtnError::Parse(format!(
            "{} is not an archive (bad magic)",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(SdtnError::Parse(format!("{} is truncated", path.display())));
    }
    let manifest: ArchiveManifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| SdtnError::Parse(format!("manifest: {e}")))?;
    let mut offset = 16 + mlen;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for meta in &manifest.arrays {
        let count: usize = meta.dims.iter().product();
        let end = offset + count * 8;
        if bytes.len() < end {
            return Err(SdtnError::Parse(format!(
                "{}: array {} truncated",
                path.display(),
                meta.name
            )));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(DenseTensor::from_dims(&meta.dims, data)?);
        offset = end;
    }
    Ok((manifest, arrays))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    data_dims: Vec<usize>,
    rank_table: Vec<usize>,
    glr_ranks: Vec<usize>,
    iter: usize,
    has_classifier: bool,
}

fn state_meta(state: &SdtnState) -> StateMeta {
    StateMeta {
        data_dims: state.factors.data_dims().to_vec(),
        rank_table: state.factors.ranks().table().to_vec(),
        glr_ranks: state.glr_ranks(),
        iter: state.iter,
        has_classifier: state.classifier.is_some(),
    }
}

fn push_state_arrays<'a>(state: &'a SdtnState, out: &mut Vec<(&'a str, &'a DenseTensor)>) {
    for f in state.factors.factors() {
        out.push(("factor", f));
    }
    for pair in &state.glr {
        out.push(("u", &pair.u));
    }
    for pair in &state.glr {
        out.push(("v", &pair.v));
    }
    if let Some(c) = &state.classifier {
        out.push(("classifier.weight", &c.weight));
        out.push(("classifier.bias", &c.bias));
    }
}

fn state_from_arrays(meta: &StateMeta, arrays: &[DenseTensor]) -> Result<SdtnState> {
    let n = meta.data_dims.len();
    let expect = 3 * n + if meta.has_classifier { 2 } else { 0 };
    if arrays.len() != expect {
        return Err(SdtnError::Parse(format!(
            "state expects {expect} arrays, found {}",
            arrays.len()
        )));
    }
    let ranks = RankMatrix::new(n, meta.rank_table.clone())?;
    let factors = FactorSet::new(ranks, arrays[..n].to_vec())?;
    if factors.data_dims() != meta.data_dims {
        return Err(SdtnError::Parse("factor dims disagree with manifest".into()));
    }
    let mut glr = Vec::with_capacity(n);
    for k in 0..n {
        glr.push(GradLowRankPair {
            mode: k,
            u: arrays[n + k].clone(),
            v: arrays[2 * n + k].clone(),
            rank: meta.glr_ranks[k],
        });
    }
    let classifier = if meta.has_classifier {
        Some(Classifier {
            weight: arrays[3 * n].clone(),
            bias: arrays[3 * n + 1].clone(),
        })
    } else {
        None
    };
    Ok(SdtnState {
        factors,
        glr,
        classifier,
        iter: meta.iter,
        loss_history: Vec::new(),
    })
}

/// Write a fitted decomposition (one state) plus free-form report metadata.
pub fn save_factors(
    path: &Path,
    state: &SdtnState,
    report: serde_json::Value,
    digest: &str,
    seed: u64,
) -> Result<()> {
    let extra = serde_json::json!({
        "state": state_meta(state),
        "report": report,
    });
    let mut arrays = Vec::new();
    push_state_arrays(state, &mut arrays);
    write_archive(
        path,
        ArchiveManifest {
            kind: "factors".to_string(),
            config_digest: digest.to_string(),
            seed,
            iteration: state.iter,
            extra,
            arrays: Vec::new(),
        },
        &arrays,
    )
}

pub fn load_factors(path: &Path) -> Result<(SdtnState, serde_json::Value)> {
    let (manifest, arrays) = read_archive(path)?;
    if manifest.kind != "factors" {
        return Err(SdtnError::Parse(format!(
            "{}: expected a factors archive, found {:?}",
            path.display(),
            manifest.kind
        )));
    }
    let meta: StateMeta = serde_json::from_value(manifest.extra["state"].clone())
        .map_err(|e| SdtnError::Parse(format!("state metadata: {e}")))?;
    Ok((
        state_from_arrays(&meta, &arrays)?,
        manifest.extra["report"].clone(),
    ))
}

/// Everything `evaluate` needs: the trained network, the per-training-patch
/// decompositions (for warm-started inference), and their pixel coordinates.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TrnModel,
    pub states: Vec<SdtnState>,
    pub train_coords: Vec<(usize, usize)>,
    pub config_digest: String,
    pub seed: u64,
    pub iteration: usize,
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let extra = serde_json::json!({
        "trn_config": cp.model.config,
        "param_names": cp.model.param_names(),
        "train_coords": cp.train_coords,
        "states": cp.states.iter().map(state_meta).collect::<Vec<_>>(),
    });
    let names = cp.model.param_names();
    let mut arrays: Vec<(&str, &DenseTensor)> = cp
        .model
        .params
        .iter()
        .enumerate()
        .map(|(i, t)| (names[i], t))
        .collect();
    for state in &cp.states {
        push_state_arrays(state, &mut arrays);
    }
    write_archive(
        path,
        ArchiveManifest {
            kind: "checkpoint".to_string(),
            config_digest: cp.config_digest.clone(),
            seed: cp.seed,
            iteration: cp.iteration,
            extra,
            arrays: Vec::new(),
        },
        &arrays,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (manifest, arrays) = read_archive(path)?;
    if manifest.kind != "checkpoint" {
        return Err(SdtnError::Parse(format!(
            "{}: expected a checkpoint, found {:?}",
            path.display(),
            manifest.kind
        )));
    }
    let config: TrnConfig = serde_json::from_value(manifest.extra["trn_config"].clone())
        .map_err(|e| SdtnError::Parse(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let train_coords: Vec<(usize, usize)> =
        serde_json::from_value(manifest.extra["train_coords"].clone())
            .map_err(|e| SdtnError::Parse(format!("train coords: {e}")))?;
    let metas: Vec<StateMeta> = serde_json::from_value(manifest.extra["states"].clone())
        .map_err(|e| SdtnError::Parse(format!("state metadata: {e}")))?;
    // parameters come first, in param_names order
    let template = TrnModel::init(config.clone(), 0)?;
    let n_params = template.params.len();
    if arrays.len() < n_params {
        return Err(SdtnError::Parse("checkpoint is missing parameters".into()));
    }
    let params = arrays[..n_params].to_vec();
    for (have, want) in params.iter().zip(&template.params) {
        if have.dims() != want.dims() {
            return Err(SdtnError::CheckpointMismatch(format!(
                "parameter dims {:?} do not match configured {:?}",
                have.dims(),
                want.dims()
            )));
        }
    }
    let model = TrnModel { config, params };
    let mut states = Vec::with_capacity(metas.len());
    let mut offset = n_params;
    for meta in &metas {
        let n = meta.data_dims.len();
        let take = 3 * n + if meta.has_classifier { 2 } else { 0 };
        if arrays.len() < offset + take {
            return Err(SdtnError::Parse("checkpoint is missing state arrays".into()));
        }
        states.push(state_from_arrays(meta, &arrays[offset..offset + take])?);
        offset += take;
    }
    Ok(Checkpoint {
        model,
        states,
        train_coords,
        config_digest: manifest.config_digest,
        seed: manifest.seed,
        iteration: manifest.iteration,
    })
}

/// Percentage display with 2 decimals, rounded half away from zero (the
/// convention used for reported accuracies).
pub fn display_pct(v: f64) -> String {
    let scaled = v * 100.0 * 100.0;
    let rounded = if scaled >= 0.0 {
        (scaled + 0.5).floor()
    } else {
        (scaled - 0.5).ceil()
    };
    format!("{:.2}", rounded / 100.0)
}

/// The metrics report document. JSON carries full precision; the `_display`
/// fields are the x100 two-decimal presentation forms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    /// Kappa in [−1, 1].
    pub kappa: f64,
    pub oa_display: String,
    pub aa_display: String,
    /// Kappa x100 presentation form.
    pub kappa_display: String,
    pub per_class: Vec<f64>,
    pub per_class_display: Vec<String>,
    /// Confusion counts, rows = true class, cols = predicted.
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
    pub config_digest: String,
    pub seed: u64,
}

pub fn metrics_report(cm: &ConfusionMatrix, digest: &str, seed: u64) -> Result<MetricsReport> {
    let per_class = cm.per_class()?;
    let counts = (1..=cm.n_classes())
        .map(|a| (1..=cm.n_classes()).map(|p| cm.count(a, p)).collect())
        .collect();
    Ok(MetricsReport {
        oa: cm.oa()?,
        aa: cm.aa()?,
        kappa: cm.kappa()?,
        oa_display: display_pct(cm.oa()?),
        aa_display: display_pct(cm.aa()?),
        kappa_display: display_pct(cm.kappa()?),
        per_class_display: per_class.iter().map(|&v| display_pct(v)).collect(),
        per_class,
        counts,
        total: cm.total(),
        config_digest: digest.to_string(),
        seed,
    })
}

/// Canonical JSON bytes for any serializable report: pretty-printed with a
/// trailing newline, no timestamps, byte-stable across reruns.
pub fn report_bytes<T: Serialize>(report: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)
        .map_err(|e| SdtnError::Parse(format!("report serialization: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Line-delimited JSON training log.
pub fn training_log_bytes(records: &[TrainRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)
            .map_err(|e| SdtnError::Parse(format!("log serialization: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}
