//! The experiment configuration: one strict JSON document drives every
//! command. Unknown keys are rejected; defaults are documented on each
//! field. The experiment `seed` governs the split, the model
//! initialization, and the optimizer seed.

use crate::data::NormalizeMethod;
use crate::error::{Result, SdtnError};
use crate::nn::{Conv2dSpec, Conv3dSpec, Padding};
use crate::sdtn::{Hyperparams, RankPolicy};
use crate::trn::{Mode, TrnConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Network architecture knobs; the defaults suit real scenes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrnArch {
    pub conv3d_filters: usize,
    /// Kernel extents (spectral, height, width).
    pub conv3d_kernel: [usize; 3],
    pub conv2d_filters: usize,
    pub conv2d_kernel: [usize; 2],
    pub dw_kernel: [usize; 2],
    pub fused_channels: usize,
    pub attention_reduction: usize,
}

impl Default for TrnArch {
    fn default() -> Self {
        TrnArch {
            conv3d_filters: 8,
            conv3d_kernel: [7, 3, 3],
            conv2d_filters: 16,
            conv2d_kernel: [3, 3],
            dw_kernel: [3, 3],
            fused_channels: 32,
            attention_reduction: 4,
        }
    }
}

fn default_patch_size() -> usize {
    9
}

fn default_fctn_rank() -> usize {
    2
}

fn default_glr_rank() -> usize {
    1
}

fn default_train_iters() -> usize {
    200
}

fn default_infer_iters() -> usize {
    20
}

fn default_normalization() -> NormalizeMethod {
    NormalizeMethod::MinMax
}

/// One experiment, fully specified.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// NPY cube [H, W, B], little-endian f32 or f64.
    pub cube: PathBuf,
    /// NPY label image [H, W], little-endian u16, 0 = unlabeled.
    pub labels: PathBuf,
    pub mode: Mode,
    /// Training pixels sampled per class.
    pub n_per_class: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_normalization")]
    pub normalization: NormalizeMethod,
    /// Uniform bond rank of the decomposition.
    #[serde(default = "default_fctn_rank")]
    pub fctn_rank: usize,
    /// Rank of each gradient-domain low-rank pair.
    #[serde(default = "default_glr_rank")]
    pub glr_rank: usize,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub rank_policy: RankPolicy,
    /// Fit-then-adapt rounds for `decompose` (0 disables adaptation).
    #[serde(default)]
    pub adapt_rounds: usize,
    /// Joint training iterations.
    #[serde(default = "default_train_iters")]
    pub train_iters: usize,
    /// Warm-started refit iterations per inference pixel.
    #[serde(default = "default_infer_iters")]
    pub infer_iters: usize,
    #[serde(default)]
    pub arch: TrnArch,
    /// Patch centers for `decompose`; defaults to the scene center.
    #[serde(default)]
    pub decompose_centers: Option<Vec<(usize, usize)>>,
}

impl ExperimentConfig {
    /// Parse and validate a config file; returns the config together with
    /// the SHA-256 digest of the file's bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)
            .map_err(|e| SdtnError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| SdtnError::Config(format!("{}: {e}", path.display())))?;
        config.hyperparams.seed = config.seed;
        config.validate()?;
        Ok((config, crate::io::config_digest(&bytes)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(SdtnError::Config(format!(
                "patch_size {} must be odd",
                self.patch_size
            )));
        }
        if self.n_per_class == 0 {
            return Err(SdtnError::Config("n_per_class must be positive".into()));
        }
        if self.fctn_rank == 0 || self.glr_rank == 0 {
            return Err(SdtnError::Config("ranks must be positive".into()));
        }
        self.hyperparams.validate()?;
        Ok(())
    }

    /// Concrete network architecture once the scene's band and class counts
    /// are known.
    pub fn trn_config(&self, bands: usize, n_classes: usize) -> Result<TrnConfig> {
        let a = &self.arch;
        let cfg = TrnConfig {
            patch_size: self.patch_size,
            bands,
            n_classes,
            mode: self.mode,
            conv3d: Conv3dSpec {
                in_channels: 1,
                out_channels: a.conv3d_filters,
                kernel: a.conv3d_kernel,
                stride: 1,
                padding: Padding::Same,
            },
            conv2d: Conv2dSpec {
                in_channels: bands,
                out_channels: a.conv2d_filters,
                kernel: a.conv2d_kernel,
                stride: 1,
                padding: Padding::Same,
            },
            dw_kernel: a.dw_kernel,
            fused_channels: a.fused_channels,
            attention_reduction: a.attention_reduction,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "cube": "cube.npy",
            "labels": "labels.npy",
            "mode": "trn",
            "n_per_class": 10,
            "seed": 7,
            "output_dir": "out"
        })
    }

    fn load_value(v: &serde_json::Value) -> Result<(ExperimentConfig, String)> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
        ExperimentConfig::load(&path)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let (cfg, digest) = load_value(&minimal_json()).unwrap();
        assert_eq!(cfg.patch_size, 9);
        assert_eq!(cfg.fctn_rank, 2);
        assert_eq!(cfg.normalization, NormalizeMethod::MinMax);
        assert_eq!(cfg.arch, TrnArch::default());
        assert_eq!(cfg.hyperparams.seed, 7);
        assert_eq!(digest.len(), 64);
        let trn = cfg.trn_config(16, 3).unwrap();
        assert_eq!(trn.conv3d.out_channels, 8);
        assert_eq!(trn.conv2d.in_channels, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal_json();
        v["nonsense"] = serde_json::json!(1);
        let err = load_value(&v).unwrap_err();
        assert!(matches!(err, SdtnError::Config(_)), "{err}");
    }

    #[test]
    fn invalid_mode_rejected() {
        let mut v = minimal_json();
        v["mode"] = serde_json::json!("magic");
        assert!(load_value(&v).is_err());
    }

    #[test]
    fn invariants_enforced() {
        let mut v = minimal_json();
        v["patch_size"] = serde_json::json!(4);
        assert!(load_value(&v).is_err());
        let mut v = minimal_json();
        v["n_per_class"] = serde_json::json!(0);
        assert!(load_value(&v).is_err());
        let mut v = minimal_json();
        v["hyperparams"] = serde_json::json!({"lr0": -1.0});
        assert!(load_value(&v).is_err());
    }

    #[test]
    fn digest_tracks_file_bytes() {
        let (_, d1) = load_value(&minimal_json()).unwrap();
        let mut v = minimal_json();
        v["seed"] = serde_json::json!(8);
        let (_, d2) = load_value(&v).unwrap();
        assert_ne!(d1, d2);
    }
}
