//! Dense tensors and the fully-connected tensor network (FCTN).
//!
//! Builds a small order-3 network, reconstructs the dense tensor it
//! represents, and shows the mode-k unfolding convention.
//!
//! Run with: cargo run --example tensor_basics

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtn::tensor::{DenseTensor, FactorSet, RankMatrix};

fn main() -> sdtn::Result<()> {
    // A 2x3x4 tensor counting up from zero.
    let x = DenseTensor::from_dims(&[2, 3, 4], (0..24).map(f64::from).collect())?;
    println!("x has dims {:?} and {} entries", x.dims(), x.count());
    println!("x[1, 2, 3] = {}", x.get(&[1, 2, 3]));

    // Mode-1 unfolding: rows indexed by the middle mode, columns by the
    // remaining modes in ascending order, last fastest.
    let m = x.unfold(1)?;
    println!("mode-1 unfolding has dims {:?}", m.dims());
    println!("first row: {:?}", &m.data()[..m.dims()[1]]);

    // An FCTN over dims [3, 4, 5] where every mode pair shares bond rank 2.
    // Factor k is itself order-3: axis j is the bond to mode j (or the data
    // index when j == k).
    let dims = [3usize, 4, 5];
    let ranks = RankMatrix::uniform(3, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let factors: Vec<DenseTensor> = (0..3)
        .map(|k| {
            let fd = ranks.factor_dims(k, &dims);
            let data = (0..fd.iter().product())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            DenseTensor::from_dims(&fd, data)
        })
        .collect::<sdtn::Result<_>>()?;
    for (k, f) in factors.iter().enumerate() {
        println!("factor {k} has dims {:?}", f.dims());
    }

    let net = FactorSet::new(ranks, factors)?;
    let dense = net.reconstruct()?;
    println!(
        "reconstructed dense tensor: dims {:?}, Frobenius norm {:.4}",
        dense.dims(),
        dense.frobenius_norm()
    );
    Ok(())
}
