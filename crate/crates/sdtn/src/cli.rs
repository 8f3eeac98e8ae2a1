//! The experiment driver behind the `sdtn` binary.
//!
//! Commands: `decompose` (fit the tensor network on designated patches),
//! `train` (joint training over an n-per-class split), `evaluate` (metrics
//! and classification map from a checkpoint), `gradcheck` (the
//! finite-difference verification suites).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! divergence, 5 checkpoint/config mismatch.

use crate::config::ExperimentConfig;
use crate::data::{extract_patch, load_scene, make_split, normalize, HsiScene, Split};
use crate::error::{Result, SdtnError};
use crate::io;
use crate::metrics::{render_map, ConfusionMatrix};
use crate::sdtn::{fit, fit_adaptive, sdtn_loss};
use crate::tensor::{DenseTensor, RankMatrix};
use crate::trn::{
    fit_patch_states, predict_map, train, Mode, TrainRecord, TrnBatch, TrnModel,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sdtn",
    about = "Tensor-network feature extraction and classification for hyperspectral images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (strict JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path (evaluate; defaults to <output_dir>/checkpoint.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the decomposition on designated patches; write a factor archive
    /// and a per-term loss report.
    Decompose(Common),
    /// Joint training over the n-per-class split; write a checkpoint and a
    /// line-delimited training log.
    Train(Common),
    /// Evaluate a checkpoint on the split's test pixels; write a metrics
    /// report and a P6 classification map.
    Evaluate(Common),
    /// Run every finite-difference gradient suite and report per-component
    /// maximum relative errors.
    Gradcheck(Common),
}

fn exit_code(err: &SdtnError) -> i32 {
    match err {
        SdtnError::Config(_) | SdtnError::Value(_) | SdtnError::Shape(_)
        | SdtnError::ModeOutOfRange { .. } => 2,
        SdtnError::Data(_) | SdtnError::Parse(_) | SdtnError::Io(_) => 3,
        SdtnError::Divergence { .. } => 4,
        SdtnError::CheckpointMismatch(_) => 5,
    }
}

/// Parse arguments from the process environment and run; returns the exit
/// code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

struct Setup {
    config: ExperimentConfig,
    digest: String,
    out_dir: PathBuf,
}

fn setup(common: &Common) -> Result<Setup> {
    let (mut config, digest) = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
        config.hyperparams.seed = seed;
    }
    let out_dir = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out_dir)?;
    Ok(Setup {
        config,
        digest,
        out_dir,
    })
}

fn load_normalized(config: &ExperimentConfig) -> Result<HsiScene> {
    let scene = load_scene(&config.cube, &config.labels)?;
    normalize(&scene, config.normalization)
}

fn training_inputs(
    config: &ExperimentConfig,
    scene: &HsiScene,
) -> Result<(Split, TrnBatch)> {
    let split = make_split(scene, config.n_per_class, config.seed)?;
    let patches: Vec<DenseTensor> = split
        .train
        .iter()
        .map(|&(r, c)| extract_patch(scene, r, c, config.patch_size))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = split
        .train
        .iter()
        .map(|&(r, c)| scene.label_at(r, c) as usize)
        .collect();
    let batch = TrnBatch::new(patches, labels, scene.n_classes)?;
    Ok((split, batch))
}

fn cmd_decompose(common: &Common) -> Result<i32> {
    let s = setup(common)?;
    let scene = load_normalized(&s.config)?;
    let centers = s.config.decompose_centers.clone().unwrap_or_else(|| {
        vec![(scene.height() / 2, scene.width() / 2)]
    });
    let ranks = RankMatrix::uniform(3, s.config.fctn_rank)?;
    let glr_ranks = vec![s.config.glr_rank; 3];
    let mut reports = Vec::new();
    for &(row, col) in &centers {
        let patch = extract_patch(&scene, row, col, s.config.patch_size)?;
        let state = if s.config.adapt_rounds > 0 {
            fit_adaptive(
                &patch,
                &ranks,
                &glr_ranks,
                &s.config.hyperparams,
                &s.config.rank_policy,
                s.config.adapt_rounds,
            )?
        } else {
            fit(&patch, &ranks, &glr_ranks, &s.config.hyperparams)?
        };
        let terms = sdtn_loss(&state, &patch, None, &s.config.hyperparams)?;
        let recon = state.factors.reconstruct()?;
        let norm = patch.frobenius_norm();
        let rel_err = if norm > 0.0 {
            recon.sub(&patch)?.frobenius_norm() / norm
        } else {
            0.0
        };
        let report = serde_json::json!({
            "center": [row, col],
            "ranks": state.factors.ranks().table(),
            "glr_ranks": state.glr_ranks(),
            "iterations": state.iter,
            "loss": {
                "reconstruction": terms.reconstruction,
                "gradient_penalty": terms.gradient_penalty,
                "regularization": terms.regularization,
                "total": terms.total(),
            },
            "relative_error": rel_err,
        });
        let archive = s.out_dir.join(format!("factors_{row}_{col}.arc"));
        io::save_factors(&archive, &state, report.clone(), &s.digest, s.config.seed)?;
        println!("wrote {}", archive.display());
        reports.push(report);
    }
    let report_path = s.out_dir.join("decompose_report.json");
    let doc = serde_json::json!({
        "config_digest": s.digest,
        "seed": s.config.seed,
        "patches": reports,
    });
    io::atomic_write(&report_path, &io::report_bytes(&doc)?)?;
    println!("wrote {}", report_path.display());
    Ok(0)
}

fn cmd_train(common: &Common) -> Result<i32> {
    let s = setup(common)?;
    let scene = load_normalized(&s.config)?;
    let (split, batch) = training_inputs(&s.config, &scene)?;
    let trn_config = s.config.trn_config(scene.bands(), scene.n_classes)?;
    let mut model = TrnModel::init(trn_config, s.config.seed)?;
    let mut states = if s.config.mode == Mode::CnnBaseline {
        Vec::new()
    } else {
        let ranks = RankMatrix::uniform(3, s.config.fctn_rank)?;
        fit_patch_states(
            &batch.patches,
            &ranks,
            &vec![s.config.glr_rank; 3],
            &s.config.hyperparams,
        )?
    };
    let mut records: Vec<TrainRecord> = Vec::new();
    train(
        &mut model,
        &mut states,
        &batch,
        &s.config.hyperparams,
        s.config.train_iters,
        |r| records.push(*r),
    )?;
    let correct = batch
        .patches
        .iter()
        .enumerate()
        .filter(|&(i, patch)| {
            let features = if s.config.mode == Mode::CnnBaseline {
                patch.clone()
            } else {
                states[i].factors.reconstruct().expect("trained state")
            };
            model.predict(&features).map(|p| p == batch.labels[i]).unwrap_or(false)
        })
        .count();
    let train_accuracy = correct as f64 / batch.len() as f64;
    let log_path = s.out_dir.join("train_log.jsonl");
    io::atomic_write(&log_path, &io::training_log_bytes(&records)?)?;
    let ckpt_path = s.out_dir.join("checkpoint.ckpt");
    io::save_checkpoint(
        &ckpt_path,
        &io::Checkpoint {
            model,
            states,
            train_coords: split.train.clone(),
            config_digest: s.digest.clone(),
            seed: s.config.seed,
            iteration: records.len(),
        },
    )?;
    let report = serde_json::json!({
        "config_digest": s.digest,
        "seed": s.config.seed,
        "iterations": records.len(),
        "final_loss": records.last().map(|r| r.total),
        "train_accuracy": train_accuracy,
        "train_pixels": split.train.len(),
        "test_pixels": split.test.len(),
    });
    let report_path = s.out_dir.join("train_report.json");
    io::atomic_write(&report_path, &io::report_bytes(&report)?)?;
    println!("wrote {}", log_path.display());
    println!("wrote {}", ckpt_path.display());
    println!("wrote {} (train accuracy {train_accuracy})", report_path.display());
    Ok(0)
}

fn cmd_evaluate(common: &Common) -> Result<i32> {
    let s = setup(common)?;
    let ckpt_path = common
        .checkpoint
        .clone()
        .unwrap_or_else(|| s.out_dir.join("checkpoint.ckpt"));
    let checkpoint = io::load_checkpoint(&ckpt_path)?;
    if checkpoint.config_digest != s.digest {
        return Err(SdtnError::CheckpointMismatch(format!(
            "checkpoint {} was trained under config digest {}, current config digests to {}",
            ckpt_path.display(),
            checkpoint.config_digest,
            s.digest
        )));
    }
    let scene = load_normalized(&s.config)?;
    let split = make_split(&scene, s.config.n_per_class, s.config.seed)?;
    let map = predict_map(
        &checkpoint.model,
        &scene,
        &checkpoint.train_coords,
        &checkpoint.states,
        &s.config.hyperparams,
        s.config.infer_iters,
    )?;
    let map_path = s.out_dir.join("map.ppm");
    io::atomic_write(&map_path, &render_map(&map, scene.height(), scene.width())?)?;
    let mut cm = ConfusionMatrix::new(scene.n_classes)?;
    for &(r, c) in &split.test {
        cm.record(scene.label_at(r, c) as usize, map[r * scene.width() + c] as usize)?;
    }
    let report = io::metrics_report(&cm, &s.digest, s.config.seed)?;
    let report_path = s.out_dir.join("metrics.json");
    io::atomic_write(&report_path, &io::report_bytes(&report)?)?;
    println!("wrote {}", map_path.display());
    println!(
        "wrote {} (oa {} aa {} kappa {})",
        report_path.display(),
        report.oa_display,
        report.aa_display,
        report.kappa_display
    );
    Ok(0)
}

fn cmd_gradcheck(common: &Common) -> Result<i32> {
    // the config supplies only the seed here; --seed overrides as elsewhere
    let (config, _) = ExperimentConfig::load(&common.config)?;
    let seed = common.seed.unwrap_or(config.seed);
    let report = crate::gradcheck::run_all(seed)?;
    for c in &report.components {
        println!(
            "{} {} (instances {}, max rel error {:.3e})",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.instances,
            c.max_rel_error
        );
    }
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        let path = out.join("gradcheck.json");
        io::atomic_write(&path, &io::report_bytes(&report)?)?;
        println!("wrote {}", path.display());
    }
    Ok(if report.all_passed() { 0 } else { 1 })
}

/// Entry point used by integration tests to drive commands without a
/// subprocess.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => {
            let result = match &cli.command {
                Command::Decompose(c) => cmd_decompose(c),
                Command::Train(c) => cmd_train(c),
                Command::Evaluate(c) => cmd_evaluate(c),
                Command::Gradcheck(c) => cmd_gradcheck(c),
            };
            match result {
                Ok(code) => code,
                Err(err) => {
                    eprintln!("error: {err}");
                    exit_code(&err)
                }
            }
        }
        Err(e) => {
            eprintln!("{e}");
            2
        }
    }
}
