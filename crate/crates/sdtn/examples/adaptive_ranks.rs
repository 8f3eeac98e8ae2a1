//! Rank adaptation: shrink overprovisioned bonds, grow underprovisioned
//! ones.
//!
//! First fits a rank-1 matrix at bond rank 4 and truncates back to rank 1
//! via the energy threshold. Then starts a full-rank target at rank 1 and
//! lets fit-adapt rounds grow the bond until the error target is met.
//!
//! Run with: cargo run --example adaptive_ranks

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtn::sdtn::{adapt_ranks, extract_features, fit, fit_adaptive, Hyperparams, RankPolicy};
use sdtn::tensor::{DenseTensor, RankMatrix};

fn main() -> sdtn::Result<()> {
    let hp = Hyperparams {
        alpha: 0.0,
        beta: 0.0,
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lr0: 0.2,
        backtracking: true,
        max_iters: 6000,
        tol: 1e-14,
        seed: 5,
        ..Hyperparams::default()
    };

    // Shrink: an exactly rank-1 6x5 matrix, deliberately fitted at rank 4.
    let u = [1.0, -0.5, 2.0, 0.3, -1.2, 0.8];
    let v = [0.9, 1.1, -0.7, 0.4, 2.0];
    let mut x = DenseTensor::zeros_dims(&[6, 5])?;
    for i in 0..6 {
        for j in 0..5 {
            x.data_mut()[i * 5 + j] = u[i] * v[j];
        }
    }
    let state = fit(&x, &RankMatrix::uniform(2, 4)?, &[1, 1], &hp)?;
    let policy = RankPolicy {
        eps_trunc: 1e-6,
        ..RankPolicy::default()
    };
    let truncated = adapt_ranks(&state, &x, &policy)?;
    println!(
        "shrink: started at rank 4, truncated to rank {}",
        truncated.factors.ranks().get(0, 1)
    );

    // Grow: a random (full-rank) 4x4 matrix, started at rank 1.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let y = DenseTensor::from_dims(&[4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let grow_policy = RankPolicy {
        eps_trunc: 1e-10,
        eps_grow: 1e-3,
        rank_max: 4,
    };
    let state = fit_adaptive(&y, &RankMatrix::uniform(2, 1)?, &[1, 1], &hp, &grow_policy, 6)?;
    let rel = extract_features(&state)?.sub(&y)?.frobenius_norm() / y.frobenius_norm();
    println!(
        "grow: reached rank {} with relative error {rel:.2e}",
        state.factors.ranks().get(0, 1)
    );
    Ok(())
}
