//! One-step lookahead controller `min_w l(x, w) + V(f(x, w))` with a
//! quadratic cost-to-go, solved by enumerating the discrete candidates.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::dynamics::{DecisionVec, DiscreteModel, StateVec};
use crate::error::{Error, Result};

/// `V(x) = (x - center)' P (x - center)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostToGo {
    pub p: DMatrix<f64>,
    pub center: StateVec,
}

impl CostToGo {
    pub fn new(p: DMatrix<f64>, center: StateVec) -> Result<Self> {
        if p.nrows() != center.len() || p.ncols() != center.len() {
            return Err(Error::dim("cost-to-go matrix", center.len(), p.nrows()));
        }
        Ok(CostToGo { p, center })
    }

    pub fn value(&self, x: &StateVec) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.p * &d))
    }

    pub fn gradient(&self, x: &StateVec) -> StateVec {
        let d = x - &self.center;
        (&self.p + self.p.transpose()) * d
    }

    /// The same value scaled by `alpha`.
    pub fn scaled(&self, alpha: f64) -> CostToGo {
        CostToGo {
            p: &self.p * alpha,
            center: self.center.clone(),
        }
    }
}

pub fn value_eval(v: &CostToGo, x: &StateVec) -> f64 {
    v.value(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MyopicSettings {
    pub state_lb: f64,
    pub penalty_weight: f64,
    pub feasibility_tol: f64,
    /// Inner projected-gradient budget for continuous controls.
    pub inner_max_iter: usize,
    pub inner_tol: f64,
}

impl Default for MyopicSettings {
    fn default() -> Self {
        MyopicSettings {
            state_lb: 0.0,
            penalty_weight: 1e4,
            feasibility_tol: 1e-8,
            inner_max_iter: 200,
            inner_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MyopicDecision {
    pub decision: DecisionVec,
    /// `(discrete candidate, cost)` in enumeration order.
    pub candidate_costs: Vec<(Vec<u8>, f64)>,
    pub wall_time: f64,
}

fn penalty(settings: &MyopicSettings, x: &StateVec) -> f64 {
    let lb = settings.state_lb;
    settings.penalty_weight * x.iter().map(|&v| (lb - v).max(0.0).powi(2)).sum::<f64>()
}

fn candidate_cost(x: &StateVec, w: &[f64], model: &DiscreteModel, v: &CostToGo, s: &MyopicSettings) -> Result<f64> {
    let next = model.step_flat(x, w)?;
    Ok(model.params.stage_cost(x, w) + v.value(&next) + penalty(s, &next))
}

/// `l(x, w) + V(f(x, w))` plus the soft state-bound penalty.
pub fn evaluate_candidate(
    x: &StateVec,
    w: &DecisionVec,
    model: &DiscreteModel,
    v: &CostToGo,
    settings: &MyopicSettings,
) -> Result<f64> {
    candidate_cost(x, &w.stacked(), model, v, settings)
}

/// Discrete candidates in lexicographic order.
pub fn discrete_candidates(n_z: usize) -> Vec<Vec<u8>> {
    (0..1usize << n_z)
        .map(|m| (0..n_z).map(|j| ((m >> (n_z - 1 - j)) & 1) as u8).collect())
        .collect()
}

/// Projected gradient on the continuous controls with the discrete part fixed.
fn optimize_continuous(
    x: &StateVec,
    z: &[f64],
    model: &DiscreteModel,
    v: &CostToGo,
    s: &MyopicSettings,
) -> Result<Vec<f64>> {
    let n_u = model.n_u();
    let (lo, hi) = model.decision_bounds();
    let mut w: Vec<f64> = (0..n_u).map(|j| 0.5 * (lo[j] + hi[j])).chain(z.iter().copied()).collect();
    let grad = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
        let lin = model.linearize(x, w)?;
        let lb = s.state_lb;
        let dpen = lin.next.map(|e| -2.0 * s.penalty_weight * (lb - e).max(0.0));
        let g = lin.b.transpose() * (v.gradient(&lin.next) + dpen);
        let lw = model.params.stage_cost_grad_w(w.len());
        let f = model.params.stage_cost(x, w) + v.value(&lin.next) + penalty(s, &lin.next);
        Ok((f, (0..n_u).map(|j| lw[j] + g[j]).collect()))
    };
    let (mut f, mut g) = grad(&w)?;
    let mut step = 1.0;
    for _ in 0..s.inner_max_iter {
        let pg: f64 = (0..n_u).map(|j| ((w[j] - g[j]).clamp(lo[j], hi[j]) - w[j]).powi(2)).sum::<f64>().sqrt();
        if pg <= s.inner_tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..50 {
            let mut trial = w.clone();
            for j in 0..n_u {
                trial[j] = (w[j] - step * g[j]).clamp(lo[j], hi[j]);
            }
            let dec: f64 = (0..n_u).map(|j| g[j] * (trial[j] - w[j])).sum();
            let ft = candidate_cost(x, &trial, model, v, s)?;
            if ft <= f + 1e-4 * dec {
                w = trial;
                (f, g) = grad(&w)?;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(w)
}

/// Enumerates every discrete candidate and returns the cheapest feasible
/// one; ties go to the lexicographically smallest candidate.
pub fn myopic_policy_step(
    x: &StateVec,
    model: &DiscreteModel,
    v: &CostToGo,
    settings: &MyopicSettings,
) -> Result<MyopicDecision> {
    let started = Instant::now();
    if x.len() != model.n_x() {
        return Err(Error::dim("state", model.n_x(), x.len()));
    }
    if x.iter().any(|e| !e.is_finite()) {
        return Err(Error::Controller("measured state is not finite".into()));
    }
    let n_u = model.n_u();
    let lb = settings.state_lb - settings.feasibility_tol;
    let mut candidate_costs = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut diagnostics = Vec::new();
    for cand in discrete_candidates(model.n_z()) {
        let z: Vec<f64> = cand.iter().map(|&b| f64::from(b)).collect();
        let w = if n_u == 0 {
            z.clone()
        } else {
            optimize_continuous(x, &z, model, v, settings)?
        };
        let next = model.step_flat(x, &w)?;
        let cost = model.params.stage_cost(x, &w) + v.value(&next) + penalty(settings, &next);
        let feasible = next.iter().all(|&e| e >= lb);
        if !feasible {
            diagnostics.push(format!("{cand:?}: predicted state {:?} violates the bound", next.as_slice()));
        }
        candidate_costs.push((cand, cost));
        if feasible && best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, w));
        }
    }
    let Some((_, w)) = best else {
        return Err(Error::Controller(format!("no feasible candidate: {}", diagnostics.join("; "))));
    };
    Ok(MyopicDecision {
        decision: DecisionVec::from_stacked(&w, n_u, false),
        candidate_costs,
        wall_time: started.elapsed().as_secs_f64(),
    })
}
