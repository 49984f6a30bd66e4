//! Full-horizon mixed-integer MPC solved by best-first branch-and-bound over
//! the binary control sequence. Node bounds come from a box-constrained
//! continuous relaxation solved by projected gradient with Armijo
//! backtracking; gradients are exact, from a discrete adjoint sweep through
//! the RK4 rollout.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use crate::dynamics::{at_step, DecisionVec, DiscreteModel, StateVec};
use crate::error::{Error, Result};

/// Solver knobs for the expert controller.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSettings {
    pub horizon: usize,
    pub state_lb: f64,
    /// Weight of the soft quadratic penalty on `state_lb - x`.
    pub penalty_weight: f64,
    pub node_limit: usize,
    pub relax_tol: f64,
    pub relax_max_iter: usize,
    /// Nodes with `bound >= incumbent - prune_tol` are discarded.
    pub prune_tol: f64,
    /// Integral leaves with a state entry below `state_lb - feasibility_tol` are rejected.
    pub feasibility_tol: f64,
    /// Keep a record of every expanded node (for diagnostics and tests).
    pub record_nodes: bool,
}

impl Default for ExpertSettings {
    fn default() -> Self {
        ExpertSettings {
            horizon: 20,
            state_lb: 0.0,
            penalty_weight: 1e4,
            node_limit: 200_000,
            relax_tol: 1e-8,
            relax_max_iter: 2000,
            prune_tol: 1e-9,
            feasibility_tol: 1e-8,
            record_nodes: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fixing {
    Free,
    Zero,
    One,
}

impl Fixing {
    fn value(self) -> Option<f64> {
        match self {
            Fixing::Free => None,
            Fixing::Zero => Some(0.0),
            Fixing::One => Some(1.0),
        }
    }
}

/// One instance of the horizon problem started from `x0`.
#[derive(Clone, Debug)]
pub struct HorizonProblem {
    pub model: DiscreteModel,
    pub x0: StateVec,
    /// Per discrete entry of the flattened sequence, `horizon * n_z` long.
    pub fixings: Vec<Fixing>,
    pub settings: ExpertSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    NodeLimit,
}

#[derive(Clone, Debug)]
pub struct NodeRecord {
    pub fixings: Vec<Fixing>,
    pub bound: f64,
}

#[derive(Clone, Debug)]
pub struct ExpertSolution {
    pub decisions: Vec<DecisionVec>,
    pub objective: f64,
    pub node_count: usize,
    pub wall_time: f64,
    pub status: SolveStatus,
    /// Incumbent value after each improvement, in discovery order.
    pub incumbent_history: Vec<f64>,
    pub explored: Vec<NodeRecord>,
}

#[derive(Clone, Debug)]
pub struct RelaxedSolution {
    pub decisions: Vec<DecisionVec>,
    pub flat: Vec<f64>,
    pub objective: f64,
    pub kkt_norm: f64,
    pub iterations: usize,
}

impl HorizonProblem {
    pub fn new(model: DiscreteModel, x0: StateVec, settings: ExpertSettings) -> Result<Self> {
        if settings.horizon == 0 {
            return Err(Error::Config {
                line: 0,
                key: "expert_horizon".into(),
                reason: "horizon must be at least 1".into(),
            });
        }
        if x0.len() != model.n_x() {
            return Err(Error::dim("initial state", model.n_x(), x0.len()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation {
                record: 0,
                reason: "initial state is not finite".into(),
            });
        }
        let fixings = vec![Fixing::Free; settings.horizon * model.n_z()];
        Ok(HorizonProblem {
            model,
            x0,
            fixings,
            settings,
        })
    }

    pub fn horizon(&self) -> usize {
        self.settings.horizon
    }

    fn n_w(&self) -> usize {
        self.model.n_w()
    }

    /// Flat index of discrete entry `j` in the stacked decision vector.
    fn discrete_slot(&self, j: usize) -> usize {
        let n_z = self.model.n_z();
        let (k, i) = (j / n_z, j % n_z);
        k * self.n_w() + self.model.n_u() + i
    }

    /// Per-entry box of the flat decision, with fixed entries collapsed.
    fn flat_bounds(&self, fixings: &[Fixing]) -> (Vec<f64>, Vec<f64>) {
        let (lo1, hi1) = self.model.decision_bounds();
        let mut lo: Vec<f64> = lo1.iter().copied().cycle().take(self.horizon() * self.n_w()).collect();
        let mut hi: Vec<f64> = hi1.iter().copied().cycle().take(self.horizon() * self.n_w()).collect();
        for (j, f) in fixings.iter().enumerate() {
            if let Some(v) = f.value() {
                let s = self.discrete_slot(j);
                lo[s] = v;
                hi[s] = v;
            }
        }
        (lo, hi)
    }

    fn penalty(&self, x: &StateVec) -> f64 {
        let lb = self.settings.state_lb;
        self.settings.penalty_weight * x.iter().map(|&v| (lb - v).max(0.0).powi(2)).sum::<f64>()
    }

    /// Horizon objective on a flat decision vector.
    pub fn cost_flat(&self, w: &[f64]) -> Result<f64> {
        self.check_len(w)?;
        let p = &self.model.params;
        let n_w = self.n_w();
        let mut x = self.x0.clone();
        let mut total = 0.0;
        for (k, wk) in w.chunks(n_w).enumerate() {
            total += p.stage_cost(&x, wk);
            x = self.model.step_flat(&x, wk).map_err(|e| at_step(e, k))?;
            total += self.penalty(&x);
        }
        Ok(total + p.terminal_cost(&x))
    }

    /// Exact gradient of [`Self::cost_flat`] by one forward rollout and one
    /// backward adjoint sweep.
    pub fn gradient_flat(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(w)?;
        let p = &self.model.params;
        let n_w = self.n_w();
        let n = self.horizon();
        let lb = self.settings.state_lb;
        let pw = self.settings.penalty_weight;

        let mut states = Vec::with_capacity(n + 1);
        let mut lins = Vec::with_capacity(n);
        states.push(self.x0.clone());
        let mut total = 0.0;
        for (k, wk) in w.chunks(n_w).enumerate() {
            total += p.stage_cost(&states[k], wk);
            let lin = self.model.linearize(&states[k], wk).map_err(|e| at_step(e, k))?;
            total += self.penalty(&lin.next);
            states.push(lin.next.clone());
            lins.push(lin);
        }
        total += p.terminal_cost(&states[n]);

        let penalty_grad =
            |x: &StateVec| x.map(|v| -2.0 * pw * (lb - v).max(0.0));
        let mut adj = p.terminal_cost_grad(&states[n]) + penalty_grad(&states[n]);
        let mut grad = vec![0.0; w.len()];
        let lw = p.stage_cost_grad_w(n_w);
        for k in (0..n).rev() {
            let gk = lins[k].b.transpose() * &adj;
            for i in 0..n_w {
                grad[k * n_w + i] = lw[i] + gk[i];
            }
            let mut next_adj = p.stage_cost_grad_x(&states[k]) + lins[k].a.transpose() * &adj;
            if k > 0 {
                next_adj += penalty_grad(&states[k]);
            }
            adj = next_adj;
        }
        Ok((total, grad))
    }

    fn check_len(&self, w: &[f64]) -> Result<()> {
        let want = self.horizon() * self.n_w();
        if w.len() != want {
            return Err(Error::dim("flattened decision sequence", want, w.len()));
        }
        Ok(())
    }

    /// Whether every predicted state respects the hard state bound.
    pub fn is_feasible(&self, w: &[f64]) -> Result<bool> {
        let lb = self.settings.state_lb - self.settings.feasibility_tol;
        let states = self.model.rollout_flat(&self.x0, w)?;
        Ok(states.iter().all(|x| x.iter().all(|&v| v >= lb)))
    }

    pub fn to_decisions(&self, w: &[f64], relaxed: bool) -> Vec<DecisionVec> {
        w.chunks(self.n_w())
            .map(|c| DecisionVec::from_stacked(c, self.model.n_u(), relaxed))
            .collect()
    }
}

fn flatten(problem: &HorizonProblem, decisions: &[DecisionVec]) -> Result<Vec<f64>> {
    if decisions.len() != problem.horizon() {
        return Err(Error::dim("decision sequence", problem.horizon(), decisions.len()));
    }
    let flat: Vec<f64> = decisions.iter().flat_map(|d| d.stacked()).collect();
    problem.check_len(&flat)?;
    Ok(flat)
}

/// Stage costs along the rollout, terminal cost and soft state penalty.
pub fn eval_horizon_cost(problem: &HorizonProblem, decisions: &[DecisionVec]) -> Result<f64> {
    problem.cost_flat(&flatten(problem, decisions)?)
}

pub fn objective_gradient(problem: &HorizonProblem, decisions: &[DecisionVec]) -> Result<Vec<f64>> {
    Ok(problem.gradient_flat(&flatten(problem, decisions)?)?.1)
}

fn project(w: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in w.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn projected_gradient_norm(w: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    w.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&v, &gv), (&l, &h))| ((v - gv).clamp(l, h) - v).powi(2))
        .sum::<f64>()
        .sqrt()
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Projected gradient with Armijo backtracking on the decision box. Trial
/// steps start from a Barzilai-Borwein estimate; accepted steps never
/// increase the objective.
pub fn solve_relaxation(
    problem: &HorizonProblem,
    warm_start: Option<&[f64]>,
) -> Result<RelaxedSolution> {
    solve_relaxation_with(problem, &problem.fixings, warm_start)
}

fn solve_relaxation_with(
    problem: &HorizonProblem,
    fixings: &[Fixing],
    warm_start: Option<&[f64]>,
) -> Result<RelaxedSolution> {
    let (lo, hi) = problem.flat_bounds(fixings);
    let mut w: Vec<f64> = match warm_start {
        Some(ws) => {
            problem.check_len(ws)?;
            ws.to_vec()
        }
        None => lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect(),
    };
    project(&mut w, &lo, &hi);
    let finish = |w: Vec<f64>, objective: f64, kkt_norm: f64, iterations: usize| RelaxedSolution {
        decisions: problem.to_decisions(&w, true),
        flat: w,
        objective,
        kkt_norm,
        iterations,
    };

    if lo == hi {
        let objective = problem.cost_flat(&w)?;
        return Ok(finish(w, objective, 0.0, 0));
    }

    let (mut f, mut g) = problem
        .gradient_flat(&w)
        .map_err(|e| Error::Relaxation(format!("initial point: {e}")))?;
    if !f.is_finite() {
        return Err(Error::Relaxation("non-finite objective at the initial point".into()));
    }
    let mut alpha = 1.0 / g.iter().fold(1e-12_f64, |m, v| m.max(v.abs()));
    let mut kkt = projected_gradient_norm(&w, &g, &lo, &hi);
    let mut iterations = 0;
    while kkt > problem.settings.relax_tol && iterations < problem.settings.relax_max_iter {
        iterations += 1;
        let mut accepted = None;
        let mut step = alpha;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = w.iter().zip(&g).map(|(v, gv)| v - step * gv).collect();
            project(&mut trial, &lo, &hi);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&w)).map(|(gv, (t, v))| gv * (t - v)).sum();
            match problem.cost_flat(&trial) {
                Ok(ft) if ft.is_finite() && ft <= f + ARMIJO_C * decrease => {
                    accepted = Some((trial, ft));
                    break;
                }
                Ok(ft) if !ft.is_finite() => {}
                Err(Error::Integration { .. }) => {}
                Err(e) => return Err(e),
                Ok(_) => {}
            }
            step *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            // no descent at machine precision: stationary for our purposes
            break;
        };
        let (_, gt) = problem.gradient_flat(&trial)?;
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..w.len() {
            let s = trial[i] - w[i];
            ss += s * s;
            sy += s * (gt[i] - g[i]);
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { step * 2.0 };
        w = trial;
        f = ft;
        g = gt;
        kkt = projected_gradient_norm(&w, &g, &lo, &hi);
    }
    Ok(finish(w, f, kkt, iterations))
}

struct Node {
    bound: f64,
    seq: usize,
    fixings: Vec<Fixing>,
    relaxed: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap: smallest bound first, then oldest node.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Incumbent {
    value: f64,
    w: Option<Vec<f64>>,
    history: Vec<f64>,
}

impl Incumbent {
    fn offer(&mut self, problem: &HorizonProblem, w: Vec<f64>) -> Result<()> {
        let value = problem.cost_flat(&w)?;
        if value < self.value && problem.is_feasible(&w)? {
            self.value = value;
            self.w = Some(w);
            self.history.push(value);
        }
        Ok(())
    }
}

fn round_free(problem: &HorizonProblem, relaxed: &[f64]) -> Vec<f64> {
    let mut w = relaxed.to_vec();
    for j in 0..problem.fixings.len() {
        let s = problem.discrete_slot(j);
        w[s] = if w[s] > 0.5 { 1.0 } else { 0.0 };
    }
    w
}

/// Free discrete entry whose relaxed value is nearest 0.5, lowest index on ties.
fn branching_entry(problem: &HorizonProblem, fixings: &[Fixing], relaxed: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, f) in fixings.iter().enumerate() {
        if *f != Fixing::Free {
            continue;
        }
        let v = relaxed[problem.discrete_slot(j)];
        if v == 0.0 || v == 1.0 {
            continue;
        }
        let dist = (v - 0.5).abs();
        if best.is_none_or(|(_, d)| dist < d) {
            best = Some((j, dist));
        }
    }
    best.map(|(j, _)| j)
}

/// Certified-optimal integral control sequence for the horizon problem.
pub fn branch_and_bound(problem: &HorizonProblem) -> Result<ExpertSolution> {
    let started = Instant::now();
    let s = &problem.settings;
    let mut incumbent = Incumbent {
        value: f64::INFINITY,
        w: None,
        history: Vec::new(),
    };
    let mut explored = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0;

    let root = solve_relaxation(problem, None)?;
    incumbent.offer(problem, round_free(problem, &root.flat))?;
    heap.push(Node {
        bound: root.objective,
        seq,
        fixings: problem.fixings.clone(),
        relaxed: root.flat,
    });

    let mut node_count = 0;
    let mut status = SolveStatus::Optimal;
    while let Some(node) = heap.pop() {
        if node.bound >= incumbent.value - s.prune_tol {
            continue;
        }
        if node_count >= s.node_limit {
            status = SolveStatus::NodeLimit;
            break;
        }
        node_count += 1;
        if s.record_nodes {
            explored.push(NodeRecord {
                fixings: node.fixings.clone(),
                bound: node.bound,
            });
        }

        let branch = match branching_entry(problem, &node.fixings, &node.relaxed) {
            Some(j) => j,
            None => {
                // relaxation is integral on all free entries
                let w = round_free(problem, &node.relaxed);
                if problem.is_feasible(&w)? {
                    incumbent.offer(problem, w)?;
                    continue;
                }
                match node.fixings.iter().position(|f| *f == Fixing::Free) {
                    Some(j) => j,
                    None => continue,
                }
            }
        };

        for value in [Fixing::Zero, Fixing::One] {
            let mut fixings = node.fixings.clone();
            fixings[branch] = value;
            let mut warm = node.relaxed.clone();
            warm[problem.discrete_slot(branch)] = value.value().unwrap_or(0.5);
            let bound = match solve_relaxation_with(problem, &fixings, Some(&warm)) {
                Ok(child) => {
                    incumbent.offer(problem, round_free(problem, &child.flat))?;
                    warm = child.flat;
                    child.objective.max(node.bound)
                }
                Err(Error::Relaxation(_)) | Err(Error::Integration { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if bound < incumbent.value - s.prune_tol {
                seq += 1;
                heap.push(Node {
                    bound,
                    seq,
                    fixings,
                    relaxed: warm,
                });
            }
        }
    }

    let Some(w) = incumbent.w else {
        return Err(Error::Infeasible);
    };
    Ok(ExpertSolution {
        decisions: problem.to_decisions(&w, false),
        objective: incumbent.value,
        node_count,
        wall_time: started.elapsed().as_secs_f64(),
        status,
        incumbent_history: incumbent.history,
        explored,
    })
}

/// First move of the expert plan from `x`.
#[derive(Clone, Debug)]
pub struct PolicyStep {
    pub decision: DecisionVec,
    pub wall_time: f64,
    pub status: SolveStatus,
    pub node_count: usize,
    pub objective: f64,
}

pub fn expert_policy_step(
    model: &DiscreteModel,
    settings: &ExpertSettings,
    x: &StateVec,
) -> Result<PolicyStep> {
    let started = Instant::now();
    let problem = HorizonProblem::new(model.clone(), x.clone(), settings.clone())?;
    let sol = branch_and_bound(&problem)?;
    Ok(PolicyStep {
        decision: sol.decisions[0].clone(),
        wall_time: started.elapsed().as_secs_f64(),
        status: sol.status,
        node_count: sol.node_count,
        objective: sol.objective,
    })
}
