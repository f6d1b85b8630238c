//! Recovers a hidden rotation from paired activations, then fits maps
//! between spaces of different width.

use bico::align::{procrustes, Direction};
use bico::linalg::{gaussian, random_orthogonal, Rng};

fn main() -> bico::Result<()> {
    let mut rng = Rng::new(42);
    let x = gaussian(200, 8, &mut rng);
    let q = random_orthogonal(8, &mut rng)?;
    let y = x.matmul(&q)?;

    let fit = procrustes(&x, &y)?;
    println!(
        "square: rank {}, |R - Q|max = {:.2e}",
        fit.rank,
        fit.map.max_abs_diff(&q)
    );

    for (da, db) in [(8, 12), (12, 8)] {
        let a = gaussian(200, da, &mut rng);
        let b = gaussian(200, db, &mut rng);
        let fit = procrustes(&a, &b)?;
        let err = fit.direction.orthonormality_error(&fit.map);
        let kind = match fit.direction {
            Direction::Expansion => "expansion (R Rᵀ = I)",
            Direction::Reduction => "reduction (Rᵀ R = I)",
        };
        println!("{da} -> {db}: {kind}, orthonormality error {err:.2e}");
    }
    Ok(())
}
