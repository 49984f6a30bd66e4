//! Inverse optimization of the one-step problem: given demonstrations
//! `(x_i, w_i)`, find `P >= 0` and multipliers `lambda_i >= 0` that make the
//! KKT conditions of
//!
//! ```text
//! min_w  l(x, w) + (f(x, w) - c)' P (f(x, w) - c)
//! s.t.   lo <= w <= hi,   f(x, w) >= state_lb
//! ```
//!
//! hold as closely as possible at every demonstration. Residuals are affine
//! in `(svec(P), lambda)`, so the fit is a least squares over the PSD cone
//! times the nonnegative orthant, solved here by ADMM.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dynamics::{DecisionVec, DiscreteModel, StateVec};
use crate::error::{Error, Result};
use crate::linalg::{self, smat, svec, svec_len};

#[derive(Clone, Debug, PartialEq)]
pub struct DemoRecord {
    pub x: StateVec,
    pub w: DecisionVec,
    pub traj_id: usize,
    pub step: usize,
    /// Set when the expert hit its node limit on this step.
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemoDataset {
    pub records: Vec<DemoRecord>,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records not flagged by the expert.
    pub fn usable(&self) -> DemoDataset {
        DemoDataset {
            records: self.records.iter().filter(|r| !r.flagged).cloned().collect(),
        }
    }

    pub fn concat(&self, other: &DemoDataset) -> DemoDataset {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        DemoDataset { records }
    }
}

/// Where the quadratic value is centered and which state bound enters `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualOptions {
    pub center: StateVec,
    pub state_lb: f64,
}

/// Affine residual maps of one record:
/// `r_stat = a + p_map * svec(P) + g_jac' * lambda`, `r_comp = g .* lambda`.
#[derive(Clone, Debug)]
pub struct RecordResidual {
    pub a: DVector<f64>,
    pub p_map: DMatrix<f64>,
    /// Row `j` is the gradient of constraint `j` with respect to `w`.
    pub g_jac: DMatrix<f64>,
    pub g: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct KktResidualSystem {
    pub n_x: usize,
    pub n_w: usize,
    pub n_g: usize,
    pub records: Vec<RecordResidual>,
}

impl KktResidualSystem {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn r_stat(&self, i: usize, p: &DMatrix<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let rec = &self.records[i];
        &rec.a + &rec.p_map * DVector::from_vec(svec(p)) + rec.g_jac.transpose() * lambda
    }

    pub fn r_comp(&self, i: usize, lambda: &DVector<f64>) -> DVector<f64> {
        self.records[i].g.component_mul(lambda)
    }

    /// `sum_i |r_stat_i|^2 + |r_comp_i|^2`.
    pub fn objective(&self, p: &DMatrix<f64>, lambda: &[DVector<f64>]) -> f64 {
        (0..self.len())
            .map(|i| self.r_stat(i, p, &lambda[i]).norm_squared() + self.r_comp(i, &lambda[i]).norm_squared())
            .sum()
    }

    /// Infinity norms of the stationarity and complementarity residuals.
    pub fn residual_inf_norms(&self, p: &DMatrix<f64>, lambda: &[DVector<f64>]) -> (f64, f64) {
        (0..self.len()).fold((0.0, 0.0), |(s, c), i| {
            (
                s.max(self.r_stat(i, p, &lambda[i]).amax()),
                c.max(self.r_comp(i, &lambda[i]).amax()),
            )
        })
    }
}

/// Builds the stationarity and complementarity maps for every record.
///
/// Constraints per record, in order: `lo - w <= 0`, `w - hi <= 0` for each
/// decision entry, then `state_lb - f(x, w) <= 0` for each state entry.
pub fn assemble_residual_system(
    dataset: &DemoDataset,
    model: &DiscreteModel,
    options: &ResidualOptions,
) -> Result<KktResidualSystem> {
    if dataset.is_empty() {
        return Err(Error::Validation {
            record: 0,
            reason: "dataset is empty".into(),
        });
    }
    let (n_x, n_w) = (model.n_x(), model.n_w());
    if options.center.len() != n_x {
        return Err(Error::dim("value center", n_x, options.center.len()));
    }
    let n_g = 2 * n_w + n_x;
    let n_p = svec_len(n_x);
    let (lo, hi) = model.decision_bounds();
    let mut records = Vec::with_capacity(dataset.len());

    for (idx, rec) in dataset.records.iter().enumerate() {
        let invalid = |reason: String| Error::Validation { record: idx, reason };
        if rec.x.len() != n_x {
            return Err(invalid(format!("state has {} entries, expected {n_x}", rec.x.len())));
        }
        let w = rec.w.stacked();
        if w.len() != n_w {
            return Err(invalid(format!("decision has {} entries, expected {n_w}", w.len())));
        }
        if let Some(j) = (0..n_w).find(|&j| !(w[j] >= lo[j] && w[j] <= hi[j])) {
            return Err(invalid(format!(
                "decision entry {j} = {} outside [{}, {}]",
                w[j], lo[j], hi[j]
            )));
        }

        let lin = model.linearize(&rec.x, &w)?;
        let d = &lin.next - &options.center;
        let b = &lin.b;

        let a = DVector::from_vec(model.params.stage_cost_grad_w(n_w));
        // d/dw of (f - c)' P (f - c) = 2 B' P d, expanded on the svec basis
        let mut p_map = DMatrix::zeros(n_w, n_p);
        for j in 0..n_w {
            let mut col = 0;
            for r in 0..n_x {
                for c in r..n_x {
                    p_map[(j, col)] = if r == c {
                        2.0 * b[(r, j)] * d[r]
                    } else {
                        std::f64::consts::SQRT_2 * (b[(r, j)] * d[c] + b[(c, j)] * d[r])
                    };
                    col += 1;
                }
            }
        }

        let mut g_jac = DMatrix::zeros(n_g, n_w);
        let mut g = DVector::zeros(n_g);
        for j in 0..n_w {
            g_jac[(j, j)] = -1.0;
            g[j] = lo[j] - w[j];
            g_jac[(n_w + j, j)] = 1.0;
            g[n_w + j] = w[j] - hi[j];
        }
        for s in 0..n_x {
            g[2 * n_w + s] = options.state_lb - lin.next[s];
            for j in 0..n_w {
                g_jac[(2 * n_w + s, j)] = -b[(s, j)];
            }
        }
        records.push(RecordResidual { a, p_map, g_jac, g });
    }
    Ok(KktResidualSystem {
        n_x,
        n_w,
        n_g,
        records,
    })
}

/// Nearest PSD matrix in Frobenius norm: clamp negative eigenvalues.
pub fn psd_project(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut eig = linalg::sym_eigen(s)?;
    eig.values.apply(|v| *v = v.max(0.0));
    let p = eig.reassemble();
    Ok((&p + p.transpose()) * 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmSettings {
    /// Penalty parameter. Residuals at benchmark scale are ~1e-3, and a
    /// penalty near 1 makes the iteration crawl; 0.01 converges ~50x faster.
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            rho: 0.01,
            tol: 1e-9,
            max_iter: 20_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImputedValue {
    pub p: DMatrix<f64>,
    pub lambda: Vec<DVector<f64>>,
    pub objective: f64,
    pub r_stat_inf: f64,
    pub r_comp_inf: f64,
    pub min_eigenvalue: f64,
    pub admm_iterations: usize,
    pub converged: bool,
    /// Tikhonov ridge added to a singular normal-equation block, if any.
    pub ridge: Option<f64>,
}

const RIDGE: f64 = 1e-10;

fn factor(m: DMatrix<f64>, ridge: &mut Option<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    *ridge = Some(RIDGE);
    let n = m.nrows();
    Cholesky::new(m + DMatrix::identity(n, n) * RIDGE)
        .ok_or_else(|| Error::Eigen("normal equations remain singular after ridge".into()))
}

/// Per-record blocks of the normal equations `(2 A'A + rho I) v = rhs`,
/// eliminated onto the `svec(P)` block by a Schur complement.
struct NormalSolver {
    /// `2 A_l' A_l + rho I` per record, factored.
    lam_blocks: Vec<Cholesky<f64, Dyn>>,
    /// `2 A_l' A_p` per record.
    coupling: Vec<DMatrix<f64>>,
    schur: Cholesky<f64, Dyn>,
    /// `-2 A' b`, split as `(p, [lambda_i])`.
    lin_p: DVector<f64>,
    lin_lam: Vec<DVector<f64>>,
}

/// Row blocks of one record: `[A_p | A_l] v + b` over stationarity then
/// complementarity rows.
fn record_rows(rec: &RecordResidual, n_g: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n_w = rec.a.len();
    let n_p = rec.p_map.ncols();
    let rows = n_w + n_g;
    let mut ap = DMatrix::zeros(rows, n_p);
    let mut al = DMatrix::zeros(rows, n_g);
    let mut b = DVector::zeros(rows);
    ap.view_mut((0, 0), (n_w, n_p)).copy_from(&rec.p_map);
    al.view_mut((0, 0), (n_w, n_g)).copy_from(&rec.g_jac.transpose());
    b.rows_mut(0, n_w).copy_from(&rec.a);
    for j in 0..n_g {
        al[(n_w + j, j)] = rec.g[j];
    }
    (ap, al, b)
}

impl NormalSolver {
    fn new(system: &KktResidualSystem, rho: f64, ridge: &mut Option<f64>) -> Result<Self> {
        let n_p = svec_len(system.n_x);
        let mut hpp = DMatrix::identity(n_p, n_p) * rho;
        let mut lin_p = DVector::zeros(n_p);
        let mut lam_blocks = Vec::with_capacity(system.len());
        let mut coupling = Vec::with_capacity(system.len());
        let mut lin_lam = Vec::with_capacity(system.len());
        for rec in &system.records {
            let (ap, al, b) = record_rows(rec, system.n_g);
            hpp += ap.transpose() * &ap * 2.0;
            lin_p -= ap.transpose() * &b * 2.0;
            let hll = al.transpose() * &al * 2.0 + DMatrix::identity(system.n_g, system.n_g) * rho;
            lam_blocks.push(factor(hll, ridge)?);
            coupling.push(al.transpose() * &ap * 2.0);
            lin_lam.push(-(al.transpose() * &b) * 2.0);
        }
        let mut schur = hpp;
        for (blk, c) in lam_blocks.iter().zip(&coupling) {
            schur -= c.transpose() * blk.solve(c);
        }
        let schur = factor((&schur + schur.transpose()) * 0.5, ridge)?;
        Ok(NormalSolver {
            lam_blocks,
            coupling,
            schur,
            lin_p,
            lin_lam,
        })
    }

    /// Solves for `v` given the extra right-hand side `rho (z - y)`.
    fn solve(&self, extra_p: &DVector<f64>, extra_lam: &[DVector<f64>]) -> (DVector<f64>, Vec<DVector<f64>>) {
        let rhs_lam: Vec<DVector<f64>> = self
            .lin_lam
            .iter()
            .zip(extra_lam)
            .map(|(a, b)| a + b)
            .collect();
        let mut rhs_p = &self.lin_p + extra_p;
        for ((blk, c), r) in self.lam_blocks.iter().zip(&self.coupling).zip(&rhs_lam) {
            rhs_p -= c.transpose() * blk.solve(r);
        }
        let p = self.schur.solve(&rhs_p);
        let lam = self
            .lam_blocks
            .iter()
            .zip(&self.coupling)
            .zip(rhs_lam)
            .map(|((blk, c), r)| blk.solve(&(r - c * &p)))
            .collect();
        (p, lam)
    }
}

/// PSD-constrained least squares over `(P, lambda)` by ADMM.
///
/// The x-update solves the regularized normal equations exactly; the
/// z-update projects the `P` block onto the PSD cone and clamps the
/// multipliers at zero. The returned `P` is always the projected iterate.
pub fn admm_solve_sdp(system: &KktResidualSystem, settings: &AdmmSettings) -> Result<ImputedValue> {
    if system.is_empty() {
        return Err(Error::Validation {
            record: 0,
            reason: "residual system is empty".into(),
        });
    }
    let rho = settings.rho;
    let n = system.n_x;
    let n_p = svec_len(n);
    let m = system.len();
    let mut ridge = None;
    let solver = NormalSolver::new(system, rho, &mut ridge)?;

    let mut z_p = DVector::<f64>::zeros(n_p);
    let mut z_l = vec![DVector::<f64>::zeros(system.n_g); m];
    let mut y_p = DVector::<f64>::zeros(n_p);
    let mut y_l = vec![DVector::<f64>::zeros(system.n_g); m];

    let objective_at = |zp: &DVector<f64>, zl: &[DVector<f64>]| system.objective(&smat(zp.as_slice(), n), zl);
    let mut best = (objective_at(&z_p, &z_l), z_p.clone(), z_l.clone());
    let mut converged = false;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        iterations += 1;
        let extra_p = (&z_p - &y_p) * rho;
        let extra_l: Vec<DVector<f64>> = z_l.iter().zip(&y_l).map(|(z, y)| (z - y) * rho).collect();
        let (v_p, v_l) = solver.solve(&extra_p, &extra_l);

        let new_p = DVector::from_vec(svec(&psd_project(&smat((&v_p + &y_p).as_slice(), n))?));
        let new_l: Vec<DVector<f64>> = v_l
            .iter()
            .zip(&y_l)
            .map(|(v, y)| (v + y).map(|e| e.max(0.0)))
            .collect();

        let mut primal = (&v_p - &new_p).norm_squared();
        let mut dual = (&new_p - &z_p).norm_squared();
        for i in 0..m {
            primal += (&v_l[i] - &new_l[i]).norm_squared();
            dual += (&new_l[i] - &z_l[i]).norm_squared();
        }
        let (primal, dual) = (primal.sqrt(), rho * dual.sqrt());

        y_p += &v_p - &new_p;
        for i in 0..m {
            y_l[i] += &v_l[i] - &new_l[i];
        }
        z_p = new_p;
        z_l = new_l;

        if primal <= settings.tol && dual <= settings.tol {
            converged = true;
            break;
        }
        if iterations % 50 == 0 {
            let obj = objective_at(&z_p, &z_l);
            if obj < best.0 {
                best = (obj, z_p.clone(), z_l.clone());
            }
        }
    }

    let (zp, zl) = if converged {
        (z_p, z_l)
    } else {
        let obj = objective_at(&z_p, &z_l);
        if obj < best.0 {
            (z_p, z_l)
        } else {
            (best.1, best.2)
        }
    };
    let p = smat(zp.as_slice(), n);
    let (r_stat_inf, r_comp_inf) = system.residual_inf_norms(&p, &zl);
    Ok(ImputedValue {
        objective: system.objective(&p, &zl),
        min_eigenvalue: linalg::min_eigenvalue(&p)?,
        p,
        lambda: zl,
        r_stat_inf,
        r_comp_inf,
        admm_iterations: iterations,
        converged,
        ridge,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyThresholds {
    pub residual: f64,
    pub min_eigenvalue: f64,
}

impl Default for ConsistencyThresholds {
    fn default() -> Self {
        ConsistencyThresholds {
            residual: 1e-3,
            min_eigenvalue: -1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConsistencyReport {
    /// `(|r_stat_i|_inf, |r_comp_i|_inf)` per record.
    pub per_record: Vec<(f64, f64)>,
    pub r_stat_inf: f64,
    pub r_comp_inf: f64,
    pub min_eigenvalue: f64,
    pub passed: bool,
    pub reasons: Vec<String>,
}

/// Re-evaluates the KKT residuals of `value` on `dataset` and checks them
/// against `thresholds`.
pub fn verify_consistency(
    dataset: &DemoDataset,
    model: &DiscreteModel,
    options: &ResidualOptions,
    value: &ImputedValue,
    thresholds: &ConsistencyThresholds,
) -> Result<ConsistencyReport> {
    let system = assemble_residual_system(dataset, model, options)?;
    if value.lambda.len() != system.len() {
        return Err(Error::dim("multiplier vectors", system.len(), value.lambda.len()));
    }
    let per_record: Vec<(f64, f64)> = (0..system.len())
        .map(|i| {
            (
                system.r_stat(i, &value.p, &value.lambda[i]).amax(),
                system.r_comp(i, &value.lambda[i]).amax(),
            )
        })
        .collect();
    let r_stat_inf = per_record.iter().fold(0.0_f64, |m, r| m.max(r.0));
    let r_comp_inf = per_record.iter().fold(0.0_f64, |m, r| m.max(r.1));
    let min_eigenvalue = linalg::min_eigenvalue(&value.p)?;

    let mut reasons = Vec::new();
    if !linalg::is_symmetric(&value.p, 1e-12) {
        reasons.push("P is not symmetric".to_string());
    }
    if !(min_eigenvalue >= thresholds.min_eigenvalue) {
        reasons.push(format!("not PSD: min eigenvalue {min_eigenvalue:e}"));
    }
    if value.lambda.iter().flat_map(|l| l.iter()).any(|&v| v < -1e-10) {
        reasons.push("negative multiplier".to_string());
    }
    if !(r_stat_inf <= thresholds.residual) {
        reasons.push(format!("stationarity residual {r_stat_inf:e} above {:e}", thresholds.residual));
    }
    if !(r_comp_inf <= thresholds.residual) {
        reasons.push(format!("complementarity residual {r_comp_inf:e} above {:e}", thresholds.residual));
    }
    Ok(ConsistencyReport {
        per_record,
        r_stat_inf,
        r_comp_inf,
        min_eigenvalue,
        passed: reasons.is_empty(),
        reasons,
    })
}
