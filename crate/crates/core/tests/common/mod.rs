//! Oracles shared by the integration tests.
#![allow(dead_code)]

use diffcore::{grad_check, SeededRng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-6;

/// Hyperbolic distance written out from the textbook formula.
pub fn hdist(x: &[f64], y: &[f64]) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    (1.0 + 2.0 * sq(&diff) / ((1.0 - sq(x)) * (1.0 - sq(y)))).acosh()
}

pub fn to_ball(f: &[f64]) -> Vec<f64> {
    let n = f.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        return f.to_vec();
    }
    f.iter().map(|a| a * n.tanh() / n).collect()
}

/// Nearest token by a full scan, lowest index on ties.
pub fn scan(f: &[f64], tokens: &Tensor) -> usize {
    let p = to_ball(f);
    let mut best = (f64::INFINITY, 0);
    for u in 0..tokens.rows() {
        let d = hdist(&p, tokens.row(u));
        if d < best.0 {
            best = (d, u);
        }
    }
    best.1
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes its own gradient.
pub fn probe(t: &mut Tape, y: Var, seed: u64) -> diffcore::Result<Var> {
    let w = SeededRng::new(seed).uniform_tensor(t.value(y).shape(), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Rows with norms drawn in `[lo, hi)`.
pub fn rows_with_norms(rng: &mut SeededRng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    let mut t = rng.normal_tensor(&[n, d], 1.0);
    for r in 0..n {
        let target = lo + (hi - lo) * rng.uniform();
        let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|x| *x *= target / norm);
    }
    t
}

/// Largest finite-difference error of `f` over `points`.
pub fn worst<F: FnMut(&mut Tape, Var) -> actionlm::Result<Var>>(
    points: &[Tensor],
    mut f: F,
) -> f64 {
    points
        .iter()
        .map(|p| {
            grad_check(
                |t, x| {
                    f(t, x).map_err(|e| diffcore::DiffError::Contract {
                        op: "test",
                        msg: e.to_string(),
                    })
                },
                p,
                STEP,
            )
            .expect("finite")
        })
        .fold(0.0, f64::max)
}

/// Every count vector of `u` non-negative integers summing to `w`.
pub fn compositions(u: usize, w: usize) -> Vec<Vec<f64>> {
    if u == 1 {
        return vec![vec![w as f64]];
    }
    (0..=w)
        .flat_map(|k| {
            compositions(u - 1, w - k).into_iter().map(move |mut rest| {
                rest.insert(0, k as f64);
                rest
            })
        })
        .collect()
}
