//! Fit k-means across a range of k and pick k at the elbow of the WCSS curve.
//!
//!     cargo run --example elbow_clustering

use keydyn::clustering::{self, DEFAULT_MAX_ITER, DEFAULT_RESTARTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let centres = [[0.15, 0.2], [0.8, 0.25], [0.5, 0.85]];
    let points: Vec<Vec<f64>> = centres
        .iter()
        .flat_map(|c| {
            (0..12)
                .map(|_| {
                    vec![
                        c[0] + rng.random_range(-0.05..0.05),
                        c[1] + rng.random_range(-0.05..0.05),
                    ]
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let (model, report) =
        clustering::elbow_fit(&points, 1, 8, 42, DEFAULT_RESTARTS, DEFAULT_MAX_ITER)?;
    print!("{}", report.to_csv());
    println!("second differences: {:?}", report.second_differences);
    println!(
        "chosen k = {} (wcss {:.4}, {} Lloyd iterations)",
        model.k, model.wcss, model.iterations
    );
    for (i, c) in model.centroids.iter().enumerate() {
        println!(
            "  centroid {i}: ({:.3}, {:.3}) with {} points",
            c[0],
            c[1],
            model.cluster_sizes()[i]
        );
    }
    Ok(())
}
