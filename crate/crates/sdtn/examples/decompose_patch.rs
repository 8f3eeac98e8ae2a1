//! Fit the decomposition on a single synthetic patch.
//!
//! Generates a patch from a known low-rank network, fits a fresh network to
//! it by gradient descent with backtracking, and prints the per-term loss
//! breakdown along the way.
//!
//! Run with: cargo run --example decompose_patch

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtn::sdtn::{extract_features, fit, sdtn_loss, Hyperparams};
use sdtn::tensor::{DenseTensor, FactorSet, RankMatrix};

fn main() -> sdtn::Result<()> {
    // Ground truth: a rank-2 network over a 5x5x8 "patch".
    let dims = [5usize, 5, 8];
    let ranks = RankMatrix::uniform(3, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let factors: Vec<DenseTensor> = (0..3)
        .map(|k| {
            let fd = ranks.factor_dims(k, &dims);
            let data = (0..fd.iter().product())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            DenseTensor::from_dims(&fd, data)
        })
        .collect::<sdtn::Result<_>>()?;
    let patch = FactorSet::new(ranks.clone(), factors)?.reconstruct()?;

    let hp = Hyperparams {
        alpha: 0.1,   // gradient-domain low-rank penalty
        beta: 0.0,    // no classification term here
        lambda1: 1e-6,
        lambda2: 1e-6,
        lambda3: 1e-6,
        lr0: 0.05,
        backtracking: true,
        max_iters: 4000,
        tol: 1e-12,
        seed: 3,
        ..Hyperparams::default()
    };
    let state = fit(&patch, &ranks, &[1, 1, 1], &hp)?;

    let terms = sdtn_loss(&state, &patch, None, &hp)?;
    println!("stopped after {} iterations", state.iter);
    println!("  reconstruction     {:.3e}", terms.reconstruction);
    println!("  gradient penalty   {:.3e}", terms.gradient_penalty);
    println!("  regularization     {:.3e}", terms.regularization);
    println!("  total              {:.3e}", terms.total());

    let recon = extract_features(&state)?;
    let rel = recon.sub(&patch)?.frobenius_norm() / patch.frobenius_norm();
    println!("relative reconstruction error {rel:.3e}");
    Ok(())
}
