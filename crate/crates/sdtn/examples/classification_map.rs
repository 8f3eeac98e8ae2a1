//! End-to-end pipeline: train, classify every pixel, render a map.
//!
//! Uses the gap-pooled head over decomposition features (the "sdtn-only"
//! mode), classifies the full scene by warm-started per-pixel refits, writes
//! a P6 classification map, and prints overall/average accuracy and kappa
//! over the held-out pixels.
//!
//! Run with: cargo run --example classification_map

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtn::data::{extract_patch, make_split, HsiScene};
use sdtn::metrics::{render_map, ConfusionMatrix};
use sdtn::sdtn::Hyperparams;
use sdtn::tensor::{DenseTensor, RankMatrix};
use sdtn::trn::{fit_patch_states, predict_map, train, Mode, TrnBatch, TrnConfig, TrnModel};

fn main() -> sdtn::Result<()> {
    // Three vertical strips with distinct spectra plus mild noise.
    let (h, w, b) = (12usize, 12, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = vec![0.0f64; h * w * b];
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let class = (c / 4 + 1) as u16;
            labels[r * w + c] = class;
            for band in 0..b {
                let base = if band / 2 == (class - 1) as usize { 1.0 } else { 0.1 };
                data[(r * w + c) * b + band] = base + rng.gen_range(-0.02..0.02);
            }
        }
    }
    let scene = HsiScene::new(DenseTensor::from_dims(&[h, w, b], data)?, labels)?;
    let split = make_split(&scene, 5, 2)?;

    let patch_size = 3;
    let patches: Vec<DenseTensor> = split
        .train
        .iter()
        .map(|&(r, c)| extract_patch(&scene, r, c, patch_size))
        .collect::<sdtn::Result<_>>()?;
    let train_labels: Vec<usize> = split
        .train
        .iter()
        .map(|&(r, c)| scene.label_at(r, c) as usize)
        .collect();
    let batch = TrnBatch::new(patches, train_labels, scene.n_classes)?;

    let hp = Hyperparams {
        alpha: 0.1,
        beta: 1.0,
        gamma: 0.01,
        lr0: 0.02,
        backtracking: true,
        max_iters: 100,
        tol: 1e-16,
        seed: 2,
        ..Hyperparams::default()
    };
    let mut states = fit_patch_states(
        &batch.patches,
        &RankMatrix::uniform(3, 2)?,
        &[1, 1, 1],
        &hp,
    )?;
    let config = TrnConfig::defaults(patch_size, b, scene.n_classes, Mode::SdtnOnly);
    let mut model = TrnModel::init(config, 2)?;
    train(&mut model, &mut states, &batch, &hp, 200, |_| {})?;

    // Every pixel gets a warm-started refit from its nearest training state.
    let map = predict_map(&model, &scene, &split.train, &states, &hp, 20)?;

    let out = std::env::temp_dir().join("classification_map.ppm");
    std::fs::write(&out, render_map(&map, h, w)?)?;
    println!("wrote {}", out.display());

    let mut cm = ConfusionMatrix::new(scene.n_classes)?;
    for &(r, c) in &split.test {
        cm.record(scene.label_at(r, c) as usize, map[r * w + c] as usize)?;
    }
    println!(
        "held-out pixels: oa {:.4}  aa {:.4}  kappa {:.4}",
        cm.oa()?,
        cm.aa()?,
        cm.kappa()?
    );
    Ok(())
}
