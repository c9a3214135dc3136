//! Joint sign-feasibility of several clients' feature signatures.
//!
//! Stacking every client's extraction matrix gives `U`; flipping each
//! column by its target bit gives `Ũ`. A shared parameter vector `W`
//! realizes every signature iff `WᵀŨ > 0`, and by Gordan's alternative
//! this fails iff `Ũy = 0` for some `y ≥ 0, y ≠ 0`. `decide` searches for a
//! certificate of either side.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{Architecture, ParamKey};
use crate::watermark::{selection_for, EmbedMode, WatermarkKey};

/// Relative floor for a strictly positive margin.
pub const MARGIN_TOL: f64 = 1e-9;
/// Relative bound on `‖Ũy‖∞` for an infeasibility certificate.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Relative pivot tolerance for the rank test.
pub const RANK_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Column `(k, j)` of `u` is client `k`'s extractor column `j`; `u_signed`
/// multiplies it by the target bit `t_kj`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedExtractors {
    pub u: DMatrix<f64>,
    pub u_signed: DMatrix<f64>,
    /// `(client_id, bit index)` for every column.
    pub columns: Vec<(usize, usize)>,
}

impl StackedExtractors {
    /// From an unsigned matrix and one sign per column.
    pub fn from_parts(u: DMatrix<f64>, signs: &[i8]) -> Result<Self> {
        if signs.len() != u.ncols() {
            return Err(Error::input(format!("{} signs for {} columns", signs.len(), u.ncols())));
        }
        if signs.iter().any(|s| s.abs() != 1) {
            return Err(Error::input("column signs must be +1 or -1"));
        }
        let mut u_signed = u.clone();
        for (j, &s) in signs.iter().enumerate() {
            u_signed.column_mut(j).scale_mut(f64::from(s));
        }
        Ok(Self {
            columns: (0..u.ncols()).map(|j| (0, j)).collect(),
            u,
            u_signed,
        })
    }

    /// Treats `u_signed` as both matrices, as if every bit were +1.
    pub fn from_signed(u_signed: DMatrix<f64>) -> Self {
        Self {
            columns: (0..u_signed.ncols()).map(|j| (0, j)).collect(),
            u: u_signed.clone(),
            u_signed,
        }
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.u.ncols()
    }
}

/// Stacks the feature keys of `keys` in ascending client order. Keys
/// without a feature part are skipped.
pub fn stack(keys: &[WatermarkKey], arch: &Architecture) -> Result<StackedExtractors> {
    let mut features: Vec<_> = keys
        .iter()
        .filter_map(|k| k.feature.as_ref().map(|f| (k.client_id, f)))
        .collect();
    if features.is_empty() {
        return Err(Error::input("no feature signatures to stack"));
    }
    features.sort_by_key(|(id, _)| *id);
    let selector: &[ParamKey] = &features[0].1.extraction.selector;
    if features.iter().any(|(_, f)| f.extraction.selector != selector) {
        return Err(Error::key("keys select different parameters and cannot be stacked"));
    }
    let m = features[0].1.extraction.check_arch(arch)?;
    let total: usize = features.iter().map(|(_, f)| f.n_bits()).sum();
    let mut u = DMatrix::zeros(m, total);
    let mut signs = Vec::with_capacity(total);
    let mut columns = Vec::with_capacity(total);
    let mut col = 0;
    for (id, f) in features {
        f.extraction.check_arch(arch)?;
        let e = f.extraction.extractor.to_dense(m);
        let n = f.n_bits();
        for j in 0..n {
            for i in 0..m {
                u[(i, col)] = e.data()[i * n + j];
            }
            columns.push((id, j));
            col += 1;
        }
        signs.extend_from_slice(f.bits.signs());
    }
    let mut se = StackedExtractors::from_parts(u, &signs)?;
    se.columns = columns;
    Ok(se)
}

/// Numerical rank by column-pivoted QR, counting pivots above
/// `RANK_TOL * |R_00|`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let r = m.clone().col_piv_qr().r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    diag.iter().filter(|d| **d > RANK_TOL * top).count()
}

/// The three sufficient conditions: full column rank of `U`, a strictly
/// positive row of `Ũ`, and an entrywise positive Gram matrix `ŨᵀŨ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conditions {
    pub rank: bool,
    pub positive_row: bool,
    pub gram_positive: bool,
}

impl Conditions {
    pub fn any(&self) -> bool {
        self.rank || self.positive_row || self.gram_positive
    }

    pub fn count(&self) -> usize {
        [self.rank, self.positive_row, self.gram_positive]
            .iter()
            .filter(|c| **c)
            .count()
    }
}

pub fn check_conditions(se: &StackedExtractors) -> Conditions {
    let us = &se.u_signed;
    let positive_row = us.ncols() > 0 && us.row_iter().any(|r| r.iter().all(|v| *v > 0.0));
    let gram = us.transpose() * us;
    Conditions {
        rank: us.ncols() > 0 && rank(&se.u) == se.cols(),
        positive_row,
        gram_positive: us.ncols() > 0 && gram.iter().all(|v| *v > 0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    /// `w` with `wᵀŨ > 0`.
    Feasible {
        w: DVector<f64>,
    },
    /// `y` on the simplex with `Ũy ≈ 0`.
    Infeasible {
        y: DVector<f64>,
    },
    Unknown,
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Feasible { .. } => "feasible",
            Status::Infeasible { .. } => "infeasible",
            Status::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub conditions: Conditions,
    pub status: Status,
    /// `min_j (wᵀŨ)_j / (‖w‖ max_j ‖ũ_j‖)` of the feasible certificate.
    pub margin: Option<f64>,
    /// `‖Ũy‖₂` at the minimum-norm point of the column hull.
    pub hull_distance: f64,
    pub perceptron_updates: usize,
    pub perceptron_converged: bool,
}

/// Relative margin of `w`; `None` if `w` or `Ũ` vanishes.
pub fn relative_margin(u_signed: &DMatrix<f64>, w: &DVector<f64>) -> Option<f64> {
    let scale = w.norm() * max_col_norm(u_signed);
    if scale == 0.0 || u_signed.ncols() == 0 {
        return None;
    }
    Some((u_signed.transpose() * w).min() / scale)
}

/// Whether `y` is a valid infeasibility certificate for `Ũ`.
pub fn certifies_infeasible(u_signed: &DMatrix<f64>, y: &DVector<f64>) -> bool {
    let l1: f64 = y.iter().sum();
    if y.len() != u_signed.ncols() || y.iter().any(|v| *v < 0.0) || !(l1 > 0.0) {
        return false;
    }
    let scale = u_signed.amax() * l1;
    (u_signed * y).amax() <= RESIDUAL_TOL * scale
}

fn max_col_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Cyclic perceptron on the columns of `Ũ`. Returns `(w, updates,
/// converged)`; `max_iters` bounds the number of updates.
pub fn perceptron(u_signed: &DMatrix<f64>, max_iters: usize) -> (DVector<f64>, usize, bool) {
    let n = u_signed.ncols();
    let mut w = DVector::zeros(u_signed.nrows());
    let mut updates = 0;
    if n == 0 {
        return (w, 0, true);
    }
    let tol = MARGIN_TOL * max_col_norm(u_signed);
    let mut clean = 0;
    let mut j = 0;
    while clean < n {
        let col = u_signed.column(j);
        if col.dot(&w) <= tol * w.norm() {
            if updates == max_iters {
                return (w, updates, false);
            }
            w += col;
            updates += 1;
            clean = 0;
        } else {
            clean += 1;
        }
        j = (j + 1) % n;
    }
    (w, updates, true)
}

/// Minimum-norm point of the convex hull of the columns of `p` by Wolfe's
/// algorithm. Returns the barycentric weights.
pub fn min_norm_point(p: &DMatrix<f64>, max_iters: usize) -> DVector<f64> {
    let n = p.ncols();
    let mut lambda = DVector::zeros(n);
    if n == 0 {
        return lambda;
    }
    let norms: Vec<f64> = p.column_iter().map(|c| c.norm_squared()).collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    if scale == 0.0 {
        lambda[0] = 1.0;
        return lambda;
    }
    let first = (0..n).min_by(|a, b| norms[*a].total_cmp(&norms[*b])).expect("n > 0");
    let mut support = vec![first];
    lambda[first] = 1.0;
    let tol = 1e-14 * scale;
    for _ in 0..max_iters {
        let x = p * &lambda;
        let xx = x.norm_squared();
        if xx <= tol * 1e-10 {
            break;
        }
        let dots = p.transpose() * &x;
        let j = dots.imin();
        if dots[j] > xx - tol || support.contains(&j) {
            break;
        }
        support.push(j);
        loop {
            let mu = affine_min_norm(p, &support);
            if mu.iter().all(|v| *v > 1e-15) {
                lambda.fill(0.0);
                for (k, &s) in support.iter().enumerate() {
                    lambda[s] = mu[k];
                }
                break;
            }
            // Step from lambda towards mu until a weight hits zero.
            let mut theta = 1.0;
            for (k, &s) in support.iter().enumerate() {
                if mu[k] <= 1e-15 {
                    let d = lambda[s] - mu[k];
                    if d > 0.0 {
                        theta = f64::min(theta, lambda[s] / d);
                    }
                }
            }
            for (k, &s) in support.iter().enumerate() {
                lambda[s] += theta * (mu[k] - lambda[s]);
            }
            support.retain(|&s| {
                if lambda[s] <= 1e-15 {
                    lambda[s] = 0.0;
                    false
                } else {
                    true
                }
            });
            if support.is_empty() {
                break;
            }
        }
        if support.is_empty() {
            break;
        }
    }
    let total: f64 = lambda.iter().sum();
    if total > 0.0 {
        lambda /= total;
    }
    lambda
}

/// Weights summing to one that minimize `‖P_S μ‖` over the affine hull of
/// the support columns.
fn affine_min_norm(p: &DMatrix<f64>, support: &[usize]) -> Vec<f64> {
    let k = support.len();
    let mut a = DMatrix::zeros(k + 1, k + 1);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[(r, c)] = p.column(i).dot(&p.column(j));
        }
        a[(r, k)] = 1.0;
        a[(k, r)] = 1.0;
    }
    let mut b = DVector::zeros(k + 1);
    b[k] = 1.0;
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-13)
        .unwrap_or_else(|_| DVector::from_element(k + 1, 1.0 / k as f64));
    sol.iter().take(k).cloned().collect()
}

/// Searches for a certificate of either alternative. The perceptron runs
/// first; the minimum-norm point of the column hull gives the infeasibility
/// certificate, or a feasible direction when it is bounded away from zero.
/// Contradictory certificates report `Unknown`.
pub fn decide(se: &StackedExtractors, max_iters: usize) -> FeasibilityReport {
    let us = &se.u_signed;
    let conditions = check_conditions(se);
    let (pw, updates, converged) = perceptron(us, max_iters);
    let lambda = min_norm_point(us, max_iters);
    let x = us * &lambda;
    let hull_distance = x.norm();

    let valid = |w: &DVector<f64>| relative_margin(us, w).filter(|m| *m > MARGIN_TOL);
    let feasible = valid(&pw)
        .map(|m| (pw.clone(), m))
        .or_else(|| valid(&x).map(|m| (x.clone(), m)));
    let infeasible = certifies_infeasible(us, &lambda);

    let (status, margin) = match (feasible, infeasible) {
        (Some((w, m)), false) => (Status::Feasible { w }, Some(m)),
        (None, true) => (Status::Infeasible { y: lambda }, None),
        _ => (Status::Unknown, None),
    };
    FeasibilityReport {
        conditions,
        status,
        margin,
        hull_distance,
        perceptron_updates: updates,
        perceptron_converged: converged,
    }
}

/// Total bits that disjoint embedding can hold: the selected channel count
/// in scale-norm mode, or the selected weight count in kernel mode.
pub fn capacity_bound(arch: &Architecture, mode: EmbedMode, layers: Option<&[usize]>) -> Result<usize> {
    let selector = selection_for(arch, mode, layers)?;
    Ok(selector
        .iter()
        .map(|k| arch.param_len(k).expect("selection is in the architecture"))
        .sum())
}

/// Machine-readable single-row report.
pub const FEASIBILITY_CSV_HEADER: &str =
    "cond_rank,cond_positive_row,cond_gram_positive,status,margin,hull_distance,perceptron_updates";

pub fn report_csv_row(r: &FeasibilityReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.conditions.rank,
        r.conditions.positive_row,
        r.conditions.gram_positive,
        r.status.name(),
        r.margin.map(|m| m.to_string()).unwrap_or_default(),
        r.hull_distance,
        r.perceptron_updates
    )
}
