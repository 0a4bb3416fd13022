// Oracles index explicitly to mirror the formulas they check.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use trialforge::data::{ColumnMap, LongitudinalDataset, LongitudinalRecord};
use trialforge::expansion::ExpansionOptions;
use trialforge::msm::MsmSpec;
use trialforge::weights::{PoolCense, WeightSpec};

/// Rows of individuals 1, 2 and 4 from the illustration data:
/// `(id, t, A, X1, X2, X3, X4, age, age_s, Y, C, eligible)`.
pub const GOLDEN_ROWS: [(i64, i64, u8, f64, f64, f64, f64, f64, f64, u8, u8, u8); 14] = [
    (1, 0, 1, 0.0, -0.35, 0.0, 0.96, 49.0, 1.17, 0, 1, 1),
    (2, 0, 1, 1.0, -1.15, 1.0, 1.70, 30.0, -0.42, 0, 0, 1),
    (2, 1, 1, 1.0, 1.45, 1.0, 1.70, 31.0, -0.33, 0, 0, 0),
    (2, 2, 1, 0.0, 1.27, 1.0, 1.70, 32.0, -0.25, 0, 1, 0),
    (4, 0, 0, 0.0, -1.01, 0.0, -0.31, 53.0, 1.50, 0, 0, 1),
    (4, 1, 0, 0.0, 0.38, 0.0, -0.31, 54.0, 1.58, 0, 0, 1),
    (4, 2, 1, 1.0, -0.44, 0.0, -0.31, 55.0, 1.67, 0, 0, 1),
    (4, 3, 1, 1.0, 0.20, 0.0, -0.31, 56.0, 1.75, 0, 0, 0),
    (4, 4, 1, 0.0, -0.45, 0.0, -0.31, 57.0, 1.83, 0, 0, 0),
    (4, 5, 1, 0.0, 0.24, 0.0, -0.31, 58.0, 1.92, 0, 0, 0),
    (4, 6, 1, 1.0, 0.20, 0.0, -0.31, 59.0, 2.00, 0, 0, 0),
    (4, 7, 0, 0.0, -0.19, 0.0, -0.31, 60.0, 2.08, 0, 0, 0),
    (4, 8, 1, 1.0, -0.50, 0.0, -0.31, 61.0, 2.17, 0, 0, 0),
    (4, 9, 1, 0.0, 0.43, 0.0, -0.31, 62.0, 2.25, 0, 0, 0),
];

pub fn golden_dataset() -> LongitudinalDataset {
    let records = GOLDEN_ROWS
        .iter()
        .map(|&(id, t, a, x1, x2, x3, x4, age, age_s, y, c, e)| LongitudinalRecord {
            id,
            period: t,
            treatment: a,
            outcome: y,
            eligible: e,
            censored: c,
            covariates: vec![x1, x2, x3, x4, age, age_s],
            time_on_regime: None,
        })
        .collect();
    LongitudinalDataset::new(records, ColumnMap::simulated()).unwrap()
}

pub const COVARIATES: &str = "X1 + X2 + X3 + X4 + age_s";

pub fn analysis_expansion() -> ExpansionOptions {
    ExpansionOptions {
        outcome_covariates: ["X1", "X2", "X3", "X4", "age_s"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ..Default::default()
    }
}

pub fn analysis_msm() -> MsmSpec {
    MsmSpec {
        outcome_covariates: COVARIATES.into(),
        ..Default::default()
    }
}

/// Censoring and switching models used for the per-protocol analysis.
pub fn pp_weights() -> WeightSpec {
    WeightSpec {
        switch_d_cov: format!("{COVARIATES} + time_on_regime + pow(time_on_regime,2)"),
        switch_n_cov: "X3 + X4 + time_on_regime + pow(time_on_regime,2)".into(),
        cense_d_cov: COVARIATES.into(),
        cense_n_cov: "X3 + X4".into(),
        pool_cense: PoolCense::None,
        ..Default::default()
    }
}

/// Censoring models for the intention-to-treat analysis (pooled numerator).
pub fn itt_weights() -> WeightSpec {
    WeightSpec {
        pool_cense: PoolCense::Numerator,
        ..pp_weights()
    }
}

/// A random weighted logistic problem: rows of `x` (first column 1), `y`, `w`.
pub struct Problem {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub clusters: Vec<i64>,
}

pub fn random_problem(seed: u64) -> Problem {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.random_range(60..=200);
    let p = rng.random_range(1..=5);
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n_clusters = rng.random_range(5..=n / 3);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![1.0];
        for _ in 1..p {
            row.push(StandardNormal.sample(&mut rng));
        }
        let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        let prob = 1.0 / (1.0 + (-eta).exp());
        y.push((rng.random::<f64>() < prob) as u8 as f64);
        w.push(rng.random_range(0.2..3.0));
        clusters.push(rng.random_range(0..n_clusters as i64));
        x.push(row);
    }
    // keep both outcome values present
    y[0] = 0.0;
    y[1] = 1.0;
    Problem { x, y, w, clusters }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    let p = rows[0].len();
    nalgebra::DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

fn sigmoid(e: f64) -> f64 {
    1.0 / (1.0 + (-e).exp())
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| (i == j) as u8 as f64));
            row
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        assert!(d.abs() > 1e-300, "singular matrix in oracle");
        for v in m[c].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn oracle_score(pb: &Problem, beta: &[f64]) -> Vec<f64> {
    let p = beta.len();
    let mut g = vec![0.0; p];
    for i in 0..pb.y.len() {
        let eta: f64 = pb.x[i].iter().zip(beta).map(|(a, b)| a * b).sum();
        let r = pb.w[i] * (pb.y[i] - sigmoid(eta));
        for j in 0..p {
            g[j] += r * pb.x[i][j];
        }
    }
    g
}

fn information(pb: &Problem, beta: &[f64]) -> Vec<Vec<f64>> {
    let p = beta.len();
    let mut h = vec![vec![0.0; p]; p];
    for i in 0..pb.y.len() {
        let eta: f64 = pb.x[i].iter().zip(beta).map(|(a, b)| a * b).sum();
        let mu = sigmoid(eta);
        let v = pb.w[i] * mu * (1.0 - mu);
        for a in 0..p {
            for b in 0..p {
                h[a][b] += v * pb.x[i][a] * pb.x[i][b];
            }
        }
    }
    h
}

/// Plain Newton-Raphson from zero, iterated until the score vanishes.
pub fn newton_oracle(pb: &Problem) -> Vec<f64> {
    let p = pb.x[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..200 {
        let g = oracle_score(pb, &beta);
        if g.iter().all(|v| v.abs() < 1e-13) {
            break;
        }
        let hinv = invert(&information(pb, &beta));
        for a in 0..p {
            beta[a] += (0..p).map(|b| hinv[a][b] * g[b]).sum::<f64>();
        }
    }
    beta
}

/// Sandwich covariance summing `s_i s_j'` over every pair of rows sharing a cluster.
pub fn sandwich_oracle(pb: &Problem, beta: &[f64]) -> Vec<Vec<f64>> {
    let p = beta.len();
    let n = pb.y.len();
    let bread = invert(&information(pb, beta));
    let s: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let eta: f64 = pb.x[i].iter().zip(beta).map(|(a, b)| a * b).sum();
            let r = pb.w[i] * (pb.y[i] - sigmoid(eta));
            pb.x[i].iter().map(|v| r * v).collect()
        })
        .collect();
    let mut meat = vec![vec![0.0; p]; p];
    for i in 0..n {
        for j in 0..n {
            if pb.clusters[i] == pb.clusters[j] {
                for a in 0..p {
                    for b in 0..p {
                        meat[a][b] += s[i][a] * s[j][b];
                    }
                }
            }
        }
    }
    let mul = |l: &Vec<Vec<f64>>, r: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..p)
            .map(|a| (0..p).map(|b| (0..p).map(|k| l[a][k] * r[k][b]).sum()).collect())
            .collect()
    };
    mul(&mul(&bread, &meat), &bread)
}
