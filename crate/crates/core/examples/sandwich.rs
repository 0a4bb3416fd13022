//! Weighted logistic regression with cluster-robust standard errors.
//! Repeated rows from the same person are correlated, so the model-based
//! errors understate the uncertainty.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use trialforge::glm::{cluster_sandwich_covariance, coefficient_table, fit_weighted_logistic, logistic, FitOptions};

fn main() -> trialforge::error::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let (people, visits) = (300, 8);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut clusters = Vec::new();
    for id in 0..people {
        // a shared frailty makes outcomes within a person correlated
        let frailty = rng.random_range(-1.5..1.5);
        let exposed = rng.random_bool(0.5) as u8 as f64;
        for t in 0..visits {
            let x = t as f64 / visits as f64;
            rows.push([1.0, exposed, x]);
            y.push(rng.random_bool(logistic(-1.0 + 0.5 * exposed + x + frailty)) as u8 as f64);
            clusters.push(id as i64);
        }
    }
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let w = vec![1.0; y.len()];
    let names = ["(Intercept)", "exposed", "time"].map(String::from).to_vec();

    let fit = fit_weighted_logistic(&x, &y, &w, &names, &FitOptions::default())?;
    let robust = cluster_sandwich_covariance(&fit, &x, &y, &w, &clusters)?;
    let naive = coefficient_table(&fit, &fit.model_covariance);
    let sandwich = coefficient_table(&fit, &robust.matrix);
    println!(
        "{} rows in {} clusters, {} IRLS iterations",
        y.len(),
        robust.cluster_count,
        fit.iterations
    );
    println!("{:<12} {:>9} {:>9} {:>9}", "term", "estimate", "model se", "robust se");
    for (a, b) in naive.iter().zip(&sandwich) {
        println!(
            "{:<12} {:>9.4} {:>9.4} {:>9.4}",
            a.name,
            a.estimate.unwrap(),
            a.std_error.unwrap(),
            b.std_error.unwrap()
        );
    }
    Ok(())
}
