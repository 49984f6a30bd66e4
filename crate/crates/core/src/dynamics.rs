//! Controlled dynamics, the Lotka-Volterra fishing benchmark, its RK4
//! discretization and the exact sensitivities of one discrete step.
//!
//! A decision `w` is always the stacked vector `[u; z]` of continuous
//! controls followed by (possibly relaxed) discrete controls. The discrete
//! set is binary, `Z = {0, 1}` per entry.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateVec = DVector<f64>;

/// Continuous and discrete parts of one control decision.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionVec {
    pub continuous: Vec<f64>,
    pub discrete: Vec<f64>,
    /// When set, discrete entries may take any value in `[0, 1]`.
    pub relaxed: bool,
}

impl DecisionVec {
    /// Integral decision with no continuous part.
    pub fn binary(bits: &[u8]) -> Self {
        DecisionVec {
            continuous: Vec::new(),
            discrete: bits.iter().map(|&b| f64::from(b)).collect(),
            relaxed: false,
        }
    }

    /// Single binary control, the benchmark's fish / don't-fish decision.
    pub fn fishing(fish: bool) -> Self {
        Self::binary(&[u8::from(fish)])
    }

    pub fn relaxed(continuous: Vec<f64>, discrete: Vec<f64>) -> Self {
        DecisionVec {
            continuous,
            discrete,
            relaxed: true,
        }
    }

    /// Splits a stacked `[u; z]` slice.
    pub fn from_stacked(w: &[f64], n_u: usize, relaxed: bool) -> Self {
        DecisionVec {
            continuous: w[..n_u].to_vec(),
            discrete: w[n_u..].to_vec(),
            relaxed,
        }
    }

    pub fn len(&self) -> usize {
        self.continuous.len() + self.discrete.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.len());
        w.extend_from_slice(&self.continuous);
        w.extend_from_slice(&self.discrete);
        w
    }

    pub fn is_integral(&self) -> bool {
        self.discrete.iter().all(|&z| z == 0.0 || z == 1.0)
    }

    /// Checks the membership invariant implied by `relaxed`.
    pub fn check_membership(&self) -> std::result::Result<(), String> {
        for (j, &z) in self.discrete.iter().enumerate() {
            let ok = if self.relaxed {
                (0.0..=1.0).contains(&z)
            } else {
                z == 0.0 || z == 1.0
            };
            if !ok {
                return Err(format!("discrete entry {j} = {z} outside the admissible set"));
            }
        }
        Ok(())
    }
}

/// Continuous-time vector field `dx/dt = F(x, w)` with its partial Jacobians.
pub trait VectorField: Send + Sync + fmt::Debug {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_z(&self) -> usize;

    fn eval(&self, x: &StateVec, w: &[f64]) -> StateVec;

    /// `(dF/dx, dF/dw)` at `(x, w)`.
    fn jacobians(&self, x: &StateVec, w: &[f64]) -> (DMatrix<f64>, DMatrix<f64>);

    /// Box on the continuous controls, `(lower, upper)`.
    fn continuous_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.n_u()], vec![1.0; self.n_u()])
    }

    fn n_w(&self) -> usize {
        self.n_u() + self.n_z()
    }
}

/// Predator-prey populations with a binary fishing control.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LotkaVolterra {
    pub c1: f64,
    pub c2: f64,
}

impl VectorField for LotkaVolterra {
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        0
    }
    fn n_z(&self) -> usize {
        1
    }

    fn eval(&self, x: &StateVec, w: &[f64]) -> StateVec {
        let (x1, x2, u) = (x[0], x[1], w[0]);
        StateVec::from_vec(vec![
            x1 - x1 * x2 - self.c1 * x1 * u,
            -x2 + x1 * x2 - self.c2 * x2 * u,
        ])
    }

    fn jacobians(&self, x: &StateVec, w: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (x1, x2, u) = (x[0], x[1], w[0]);
        let fx = DMatrix::from_row_slice(
            2,
            2,
            &[1.0 - x2 - self.c1 * u, -x1, x2, -1.0 + x1 - self.c2 * u],
        );
        let fw = DMatrix::from_row_slice(2, 1, &[-self.c1 * x1, -self.c2 * x2]);
        (fx, fw)
    }
}

/// Benchmark coefficients, sampling time and the tracking cost weights.
///
/// Stage cost `l(x, w) = (x - x_ref)' Q (x - x_ref) + r_u * sum(w)`,
/// terminal cost `l_N(x) = (x - x_ref)' Q_N (x - x_ref)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemParams {
    pub c1: f64,
    pub c2: f64,
    pub ts: f64,
    pub x_ref: StateVec,
    pub q: DMatrix<f64>,
    pub r_u: f64,
    pub q_n: DMatrix<f64>,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            c1: 0.4,
            c2: 0.2,
            ts: 0.1,
            x_ref: StateVec::from_vec(vec![1.0, 1.0]),
            q: DMatrix::identity(2, 2),
            r_u: 3e-4,
            q_n: DMatrix::identity(2, 2),
        }
    }
}

impl SystemParams {
    /// Returns `(key, rule)` of the first violated invariant.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.ts > 0.0) || !self.ts.is_finite() {
            return Err(("ts", "sampling interval must be positive".into()));
        }
        if !(self.c1 > 0.0) {
            return Err(("c1", "fishing coefficient must be positive".into()));
        }
        if !(self.c2 > 0.0) {
            return Err(("c2", "fishing coefficient must be positive".into()));
        }
        if !(self.r_u >= 0.0) {
            return Err(("r_u", "control penalty must be nonnegative".into()));
        }
        let n = self.x_ref.len();
        for (key, m) in [("q", &self.q), ("q_n", &self.q_n)] {
            if m.nrows() != n || m.ncols() != n {
                return Err((key, format!("weight must be {n}x{n}")));
            }
            if !crate::linalg::is_symmetric(m, 1e-12) {
                return Err((key, "weight must be symmetric".into()));
            }
            match crate::linalg::sym_eigen(m) {
                Ok(eig) if eig.values.min() >= -1e-12 => {}
                _ => return Err((key, "weight must be positive semidefinite".into())),
            }
        }
        Ok(())
    }

    pub fn stage_cost(&self, x: &StateVec, w: &[f64]) -> f64 {
        let d = x - &self.x_ref;
        d.dot(&(&self.q * &d)) + self.r_u * w.iter().sum::<f64>()
    }

    pub fn stage_cost_grad_x(&self, x: &StateVec) -> StateVec {
        let d = x - &self.x_ref;
        (&self.q + self.q.transpose()) * d
    }

    pub fn stage_cost_grad_w(&self, n_w: usize) -> Vec<f64> {
        vec![self.r_u; n_w]
    }

    pub fn terminal_cost(&self, x: &StateVec) -> f64 {
        let d = x - &self.x_ref;
        d.dot(&(&self.q_n * &d))
    }

    pub fn terminal_cost_grad(&self, x: &StateVec) -> StateVec {
        let d = x - &self.x_ref;
        (&self.q_n + self.q_n.transpose()) * d
    }
}

/// The sampled system `x+ = f(x, w)`: one RK4 step of length `ts` with the
/// decision held constant over the interval.
#[derive(Clone, Debug)]
pub struct DiscreteModel {
    pub params: SystemParams,
    field: Arc<dyn VectorField>,
}

/// One RK4 step together with its Jacobians.
#[derive(Clone, Debug)]
pub struct StepLinearization {
    pub next: StateVec,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl DiscreteModel {
    /// The fishing benchmark with coefficients taken from `params`.
    pub fn fishing(params: SystemParams) -> Result<Self> {
        let field = LotkaVolterra {
            c1: params.c1,
            c2: params.c2,
        };
        Self::new(params, Arc::new(field))
    }

    pub fn new(params: SystemParams, field: Arc<dyn VectorField>) -> Result<Self> {
        if let Err((key, reason)) = params.check() {
            return Err(Error::Config {
                line: 0,
                key: key.into(),
                reason,
            });
        }
        if params.x_ref.len() != field.n_x() {
            return Err(Error::dim("reference state", field.n_x(), params.x_ref.len()));
        }
        Ok(DiscreteModel { params, field })
    }

    pub fn field(&self) -> &dyn VectorField {
        self.field.as_ref()
    }

    pub fn n_x(&self) -> usize {
        self.field.n_x()
    }
    pub fn n_u(&self) -> usize {
        self.field.n_u()
    }
    pub fn n_z(&self) -> usize {
        self.field.n_z()
    }
    pub fn n_w(&self) -> usize {
        self.field.n_w()
    }

    /// Box `(lower, upper)` on the stacked decision, discrete entries relaxed to `[0, 1]`.
    pub fn decision_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = self.field.continuous_bounds();
        lo.extend(std::iter::repeat_n(0.0, self.n_z()));
        hi.extend(std::iter::repeat_n(1.0, self.n_z()));
        (lo, hi)
    }

    fn check_dims(&self, x: &StateVec, w: &[f64]) -> Result<()> {
        if x.len() != self.n_x() {
            return Err(Error::dim("state", self.n_x(), x.len()));
        }
        if w.len() != self.n_w() {
            return Err(Error::dim("decision", self.n_w(), w.len()));
        }
        Ok(())
    }

    /// Continuous-time derivative `F(x, w)`.
    pub fn rhs(&self, x: &StateVec, w: &DecisionVec) -> Result<StateVec> {
        let w = w.stacked();
        self.check_dims(x, &w)?;
        Ok(self.field.eval(x, &w))
    }

    pub fn step(&self, x: &StateVec, w: &DecisionVec) -> Result<StateVec> {
        self.step_flat(x, &w.stacked())
    }

    /// RK4 step on a stacked decision slice.
    pub fn step_flat(&self, x: &StateVec, w: &[f64]) -> Result<StateVec> {
        self.check_dims(x, w)?;
        let h = self.params.ts;
        let f = &self.field;
        let k1 = finite(f.eval(x, w), 1)?;
        let k2 = finite(f.eval(&(x + &k1 * (0.5 * h)), w), 2)?;
        let k3 = finite(f.eval(&(x + &k2 * (0.5 * h)), w), 3)?;
        let k4 = finite(f.eval(&(x + &k3 * h), w), 4)?;
        Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }

    pub fn step_jacobians(
        &self,
        x: &StateVec,
        w: &DecisionVec,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let lin = self.linearize(x, &w.stacked())?;
        Ok((lin.a, lin.b))
    }

    /// Next state plus exact Jacobians of the RK4 map, obtained by
    /// differentiating each stage through the chain rule.
    pub fn linearize(&self, x: &StateVec, w: &[f64]) -> Result<StepLinearization> {
        self.check_dims(x, w)?;
        let h = self.params.ts;
        let f = &self.field;
        let n = self.n_x();
        let eye = DMatrix::<f64>::identity(n, n);

        let k1 = finite(f.eval(x, w), 1)?;
        let (fx1, fw1) = f.jacobians(x, w);
        let dk1x = fx1;
        let dk1w = fw1;

        let x2 = x + &k1 * (0.5 * h);
        let k2 = finite(f.eval(&x2, w), 2)?;
        let (fx2, fw2) = f.jacobians(&x2, w);
        let dk2x = &fx2 * (&eye + &dk1x * (0.5 * h));
        let dk2w = &fx2 * &dk1w * (0.5 * h) + fw2;

        let x3 = x + &k2 * (0.5 * h);
        let k3 = finite(f.eval(&x3, w), 3)?;
        let (fx3, fw3) = f.jacobians(&x3, w);
        let dk3x = &fx3 * (&eye + &dk2x * (0.5 * h));
        let dk3w = &fx3 * &dk2w * (0.5 * h) + fw3;

        let x4 = x + &k3 * h;
        let k4 = finite(f.eval(&x4, w), 4)?;
        let (fx4, fw4) = f.jacobians(&x4, w);
        let dk4x = &fx4 * (&eye + &dk3x * h);
        let dk4w = &fx4 * &dk3w * h + fw4;

        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let a = eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);
        let b = (dk1w + dk2w * 2.0 + dk3w * 2.0 + dk4w) * (h / 6.0);
        Ok(StepLinearization { next, a, b })
    }

    /// States `x_1..x_N` under the given decisions.
    pub fn rollout(&self, x0: &StateVec, decisions: &[DecisionVec]) -> Result<Vec<StateVec>> {
        if decisions.is_empty() {
            return Err(Error::dim("decision sequence (nonempty)", 1, 0));
        }
        let flat: Vec<f64> = decisions.iter().flat_map(|d| d.stacked()).collect();
        if flat.len() != decisions.len() * self.n_w() {
            return Err(Error::dim("decision", self.n_w(), flat.len() / decisions.len()));
        }
        self.rollout_flat(x0, &flat)
    }

    /// Rollout over a flat `N * n_w` decision vector.
    pub fn rollout_flat(&self, x0: &StateVec, w: &[f64]) -> Result<Vec<StateVec>> {
        let n_w = self.n_w();
        let mut states = Vec::with_capacity(w.len() / n_w.max(1));
        let mut x = x0.clone();
        for (k, wk) in w.chunks(n_w).enumerate() {
            x = self.step_flat(&x, wk).map_err(|e| at_step(e, k))?;
            states.push(x.clone());
        }
        Ok(states)
    }
}

fn finite(v: StateVec, stage: usize) -> Result<StateVec> {
    if v.iter().all(|e| e.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Integration { stage, step: None })
    }
}

pub(crate) fn at_step(e: Error, k: usize) -> Error {
    match e {
        Error::Integration { stage, .. } => Error::Integration {
            stage,
            step: Some(k),
        },
        other => other,
    }
}
