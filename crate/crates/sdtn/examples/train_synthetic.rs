//! Joint training on a small synthetic scene.
//!
//! Builds a 16x16x8 cube with two spectrally distinct regions, decomposes a
//! patch per training pixel, and trains the dual-pathway classifier jointly
//! with the per-patch tensor networks, printing the loss terms as it goes.
//!
//! Run with: cargo run --example train_synthetic

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtn::data::{extract_patch, make_split, HsiScene};
use sdtn::sdtn::Hyperparams;
use sdtn::tensor::{DenseTensor, RankMatrix};
use sdtn::trn::{fit_patch_states, train, Mode, TrnBatch, TrnConfig, TrnModel};

fn synthetic_scene() -> sdtn::Result<HsiScene> {
    let (h, w, b) = (16usize, 16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut data = vec![0.0f64; h * w * b];
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let class = if c < w / 2 { 1u16 } else { 2 };
            labels[r * w + c] = class;
            for band in 0..b {
                let base = if band / 4 == (class - 1) as usize { 1.0 } else { 0.1 };
                data[(r * w + c) * b + band] = base + rng.gen_range(-0.02..0.02);
            }
        }
    }
    HsiScene::new(DenseTensor::from_dims(&[h, w, b], data)?, labels)
}

fn main() -> sdtn::Result<()> {
    let scene = synthetic_scene()?;
    let split = make_split(&scene, 8, 1)?;
    println!(
        "{} training pixels, {} held out",
        split.train.len(),
        split.test.len()
    );

    let patch_size = 5;
    let patches: Vec<DenseTensor> = split
        .train
        .iter()
        .map(|&(r, c)| extract_patch(&scene, r, c, patch_size))
        .collect::<sdtn::Result<_>>()?;
    let labels: Vec<usize> = split
        .train
        .iter()
        .map(|&(r, c)| scene.label_at(r, c) as usize)
        .collect();
    let batch = TrnBatch::new(patches, labels, scene.n_classes)?;

    let hp = Hyperparams {
        alpha: 0.1,
        beta: 1.0,
        gamma: 0.01,
        lr0: 0.01,
        backtracking: true,
        max_iters: 150,
        tol: 1e-16,
        seed: 1,
        ..Hyperparams::default()
    };

    // One tensor network per training patch, fitted before joint training.
    let mut states = fit_patch_states(
        &batch.patches,
        &RankMatrix::uniform(3, 2)?,
        &[1, 1, 1],
        &hp,
    )?;

    let mut config = TrnConfig::defaults(patch_size, scene.bands(), scene.n_classes, Mode::Trn);
    config.conv3d.out_channels = 4;
    config.conv3d.kernel = [5, 3, 3];
    config.conv2d.out_channels = 8;
    config.fused_channels = 16;
    let mut model = TrnModel::init(config, 1)?;

    train(&mut model, &mut states, &batch, &hp, 200, |r| {
        if r.iter % 25 == 0 {
            println!(
                "iter {:>3}  classification {:.4}  reconstruction {:.4}  consistency {:.4}",
                r.iter, r.classification, r.reconstruction, r.consistency
            );
        }
    })?;

    let correct = (0..batch.len())
        .filter(|&i| {
            let features = states[i].factors.reconstruct().expect("trained state");
            model.predict(&features).map(|p| p == batch.labels[i]).unwrap_or(false)
        })
        .count();
    println!("training accuracy {}/{}", correct, batch.len());
    Ok(())
}
