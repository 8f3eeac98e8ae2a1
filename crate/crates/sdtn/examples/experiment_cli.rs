//! Drive the experiment commands programmatically.
//!
//! Writes a scene and a config to a temporary directory, then runs the same
//! `train` and `evaluate` entry points the `sdtn` binary uses, showing the
//! artifact layout and the exit-code convention.
//!
//! Run with: cargo run --example experiment_cli

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtn::data::{write_npy_f64, write_npy_u16};

fn main() -> sdtn::Result<()> {
    let dir = std::env::temp_dir().join("sdtn_experiment_example");
    std::fs::create_dir_all(&dir)?;

    // Two-class 8x8x4 scene, written in the NPY format the loader expects.
    let (h, w, b) = (8usize, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut data = vec![0.0f64; h * w * b];
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let class = if c < w / 2 { 1u16 } else { 2 };
            labels[r * w + c] = class;
            for band in 0..b {
                let base = if band == (class - 1) as usize { 1.0 } else { 0.1 };
                data[(r * w + c) * b + band] = base + rng.gen_range(-0.02..0.02);
            }
        }
    }
    let cube_path = dir.join("cube.npy");
    let labels_path = dir.join("labels.npy");
    write_npy_f64(&cube_path, &[h, w, b], &data)?;
    write_npy_u16(&labels_path, &[h, w], &labels)?;

    let out_dir = dir.join("out");
    let config = serde_json::json!({
        "cube": cube_path,
        "labels": labels_path,
        "mode": "sdtn-only",
        "n_per_class": 3,
        "seed": 11,
        "output_dir": out_dir,
        "patch_size": 3,
        "train_iters": 40,
        "infer_iters": 5,
        "hyperparams": {
            "lr0": 0.05,
            "backtracking": true,
            "max_iters": 40,
            "tol": 1e-12
        },
    });
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).unwrap())?;

    for command in ["train", "evaluate"] {
        let code = sdtn::cli::run_from([
            "sdtn",
            command,
            "--config",
            config_path.to_str().unwrap(),
        ]);
        println!("{command} exited with code {code}");
        assert_eq!(code, 0);
    }
    println!("artifacts under {}", out_dir.display());
    Ok(())
}
