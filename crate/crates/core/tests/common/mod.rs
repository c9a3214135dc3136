//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error; below this magnitude central
/// differences at step 1e-6 are dominated by rounding.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + FD_STEP;
    let up = f(&probe);
    probe[i] = x[i] - FD_STEP;
    let down = f(&probe);
    (up - down) / (2.0 * FD_STEP)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst relative error over the probed coordinates.
pub fn fd_worst(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize]) -> f64 {
    coords
        .iter()
        .map(|&i| relative_error(analytic[i], central_difference(f, x, i)))
        .fold(0.0, f64::max)
}

/// `count` coordinates drawn uniformly (with replacement when the pool is small)
/// from `pool`.
pub fn probe_coords(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Naive triple-loop `W^T E` with E stored row-major M x N.
pub fn naive_project(w: &[f64], e: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..w.len() {
            acc += w[i] * e[i * n + j];
        }
        out[j] = acc;
    }
    out
}

/// `C(n, k)` by Pascal's triangle in u128.
pub fn binomial(n: u64, k: u64) -> u128 {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row.get(k as usize).copied().unwrap_or(0)
}

/// Probability that a uniformly random N-bit string is within Hamming
/// distance `eps` of a fixed string, by enumerating all 2^N strings.
pub fn enumerate_pass_probability(n: u32, eps: u32) -> f64 {
    let pass = (0u64..1 << n).filter(|s| s.count_ones() <= eps).count();
    pass as f64 / (1u64 << n) as f64
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Brute-force sign-feasibility oracles over a column matrix `u` (columns
/// are the signed extractor columns).
pub mod feasible {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand_distr::StandardNormal;

    pub const DIRECTIONS: usize = 1_000_000;

    /// Some random unit direction with strictly positive inner product with
    /// every column.
    pub fn random_direction_witness(u: &DMatrix<f64>, draws: usize, rng: &mut ChaCha8Rng) -> Option<DVector<f64>> {
        let m = u.nrows();
        let cols: Vec<Vec<f64>> = u.column_iter().map(|c| c.iter().cloned().collect()).collect();
        let mut w = vec![0.0; m];
        for _ in 0..draws {
            for v in w.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            if cols
                .iter()
                .all(|c| c.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() > 0.0)
            {
                return Some(DVector::from_vec(w));
            }
        }
        None
    }

    /// Exact search for `y >= 0, y != 0` with `u y = 0`: a minimal-support
    /// solution has a one-dimensional null space on its support and a
    /// strictly one-signed null vector there, so enumerating supports of
    /// size at most `rows + 1` is complete.
    pub fn simplex_residual_witness(u: &DMatrix<f64>) -> Option<DVector<f64>> {
        let (m, n) = u.shape();
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|j| mask >> j & 1 == 1).collect();
            if support.len() > m + 1 {
                continue;
            }
            let sub = DMatrix::from_fn(m, support.len(), |i, k| u[(i, support[k])]);
            let Some(v) = null_vector(&sub) else { continue };
            let positive = v.iter().all(|x| *x > 1e-9);
            let negative = v.iter().all(|x| *x < -1e-9);
            if positive || negative {
                let mut y = DVector::zeros(n);
                let total: f64 = v.iter().sum();
                for (k, &j) in support.iter().enumerate() {
                    y[j] = v[k] / total;
                }
                return Some(y);
            }
        }
        None
    }

    /// The unique null direction of `a`, if its null space is a line.
    fn null_vector(a: &DMatrix<f64>) -> Option<DVector<f64>> {
        let k = a.ncols();
        // Pad to at least k rows so the SVD exposes all k right vectors.
        let padded = if a.nrows() < k {
            let mut p = DMatrix::zeros(k, k);
            p.view_mut((0, 0), a.shape()).copy_from(a);
            p
        } else {
            a.clone()
        };
        let svd = padded.svd(false, true);
        let top = svd.singular_values.max();
        let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
        let null: Vec<usize> = (0..k).filter(|&i| svd.singular_values[i] <= tol).collect();
        if top == 0.0 {
            return (k == 1).then(|| DVector::from_element(1, 1.0));
        }
        if null.len() != 1 {
            return None;
        }
        let vt = svd.v_t.expect("requested");
        Some(vt.row(null[0]).transpose())
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Verdict {
        Feasible,
        Infeasible,
    }

    /// Exhaustive support enumeration decides; a random direction found
    /// alongside a simplex witness would be a contradiction.
    pub fn oracle_verdict(u: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Verdict {
        let witness = simplex_residual_witness(u);
        let direction = random_direction_witness(u, DIRECTIONS, rng);
        assert!(witness.is_none() || direction.is_none(), "oracles disagree on {u}");
        if witness.is_some() {
            Verdict::Infeasible
        } else {
            Verdict::Feasible
        }
    }

    /// Numerical rank from singular values.
    pub fn svd_rank(u: &DMatrix<f64>) -> usize {
        let s = u.clone().svd(false, false).singular_values;
        let top = s.max();
        s.iter().filter(|v| **v > 1e-10 * top && top > 0.0).count()
    }

    /// The three sufficient conditions evaluated by definition.
    pub fn conditions(u: &DMatrix<f64>) -> [bool; 3] {
        let (m, n) = u.shape();
        let rank = svd_rank(u) == n;
        let row = (0..m).any(|i| (0..n).all(|j| u[(i, j)] > 0.0));
        let mut gram = true;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..m).map(|i| u[(i, a)] * u[(i, b)]).sum();
                gram &= dot > 0.0;
            }
        }
        [rank, row, gram]
    }

    pub fn gaussian(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
    }

    /// Small random instance: Gaussian columns, a third of them with a
    /// column forced into the negative cone of the others.
    pub fn random_instance(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = rng.random_range(3..=6);
        let n = rng.random_range(2..=6);
        let mut u = gaussian(m, n, rng);
        if rng.random_bool(1.0 / 3.0) {
            let mut combo = DVector::zeros(m);
            for j in 0..n - 1 {
                combo += u.column(j) * rng.random_range(0.1..1.0);
            }
            u.set_column(n - 1, &(-combo));
        }
        u
    }

    /// Instance satisfying condition `which` (0 rank, 1 positive row,
    /// 2 positive Gram) and neither of the others.
    pub fn exactly_one(which: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        loop {
            let u = match which {
                0 => {
                    let m = rng.random_range(3..=6);
                    let n = rng.random_range(2..=m);
                    gaussian(m, n, rng)
                }
                1 => {
                    // More columns than rows, one row forced positive.
                    let m = rng.random_range(2..=5);
                    let n = rng.random_range(m + 1..=m + 3);
                    let mut u = gaussian(m, n, rng);
                    let r = rng.random_range(0..m);
                    for j in 0..n {
                        u[(r, j)] = u[(r, j)].abs() + 0.05;
                    }
                    u
                }
                _ => {
                    // Columns in a random plane within a 90 degree arc.
                    let m = rng.random_range(3..=6);
                    let n = rng.random_range(3..=6);
                    let basis = gaussian(m, 2, rng).qr().q();
                    let centre: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let mut u = DMatrix::zeros(m, n);
                    for j in 0..n {
                        let a = centre + rng.random_range(-0.78..0.78);
                        let len = rng.random_range(0.5..2.0);
                        u.set_column(j, &((basis.column(0) * a.cos() + basis.column(1) * a.sin()) * len));
                    }
                    u
                }
            };
            let c = conditions(&u);
            if c[which] && c.iter().filter(|x| **x).count() == 1 {
                return u;
            }
        }
    }
}
