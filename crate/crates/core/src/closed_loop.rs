//! Closed-loop simulation against a plant with perturbed fishing
//! coefficients and Gaussian measurement noise.
//!
//! Noise is drawn from ChaCha8, seeded with the 64-bit run seed; state entry
//! `j` uses stream `j` of that seed, one standard-normal draw per step.
//! The sequence therefore does not depend on which controller runs.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{DecisionVec, DiscreteModel, StateVec, SystemParams};
use crate::error::{Error, Result};
use crate::expert::{expert_policy_step, ExpertSettings, SolveStatus};
use crate::ioc::{DemoDataset, DemoRecord};
use crate::myopic::{myopic_policy_step, CostToGo, MyopicSettings};

#[derive(Clone, Debug)]
pub enum Controller {
    Expert(ExpertSettings),
    Myopic { value: CostToGo, settings: MyopicSettings },
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub steps: usize,
    pub x0: StateVec,
    pub controller: Controller,
    /// Plant-side multipliers on `(c1, c2)`.
    pub mismatch: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
    /// Nominal parameters used by the controller.
    pub params: SystemParams,
}

impl SimConfig {
    fn check(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                line: 0,
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be nonnegative");
        }
        if !(self.mismatch.0 > 0.0) || !(self.mismatch.1 > 0.0) {
            return bad("mismatch_factor", "must be positive");
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("x0", "must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub k: usize,
    pub true_state: StateVec,
    pub measured_state: StateVec,
    pub decision: DecisionVec,
    pub stage_cost: f64,
    pub wall_time: f64,
    /// Expert stopped on its node limit for this decision.
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
}

impl TrajectoryLog {
    pub fn cumulative_cost(&self) -> f64 {
        closed_loop_cost(self)
    }

    pub fn max_wall_time(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.wall_time))
    }

    pub fn mean_wall_time(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.rows.iter().map(|r| r.wall_time).sum::<f64>() / self.rows.len() as f64
        }
    }
}

/// Simulation aborted by a controller failure; `partial` holds rows `0..row`.
#[derive(Debug)]
pub struct SimError {
    pub partial: TrajectoryLog,
    pub row: usize,
    pub source: Error,
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "simulation stopped at step {}: {}", self.row, self.source)
    }
}

impl std::error::Error for SimError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Per-entry measurement noise streams.
pub struct NoiseSource {
    streams: Vec<ChaCha8Rng>,
    std: f64,
}

impl NoiseSource {
    pub fn new(seed: u64, n_x: usize, std: f64) -> Self {
        let streams = (0..n_x)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                rng
            })
            .collect();
        NoiseSource { streams, std }
    }

    pub fn sample(&mut self) -> StateVec {
        let std = self.std;
        StateVec::from_iterator(
            self.streams.len(),
            self.streams.iter_mut().map(|rng| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            }),
        )
    }
}

/// Runs the feedback loop: measure, decide on the nominal model, advance the
/// mismatched plant.
pub fn simulate(config: &SimConfig) -> std::result::Result<TrajectoryLog, SimError> {
    let fail = |log: TrajectoryLog, row: usize, source: Error| SimError {
        partial: log,
        row,
        source,
    };
    let mut log = TrajectoryLog::default();
    if let Err(e) = config.check() {
        return Err(fail(log, 0, e));
    }
    let nominal = DiscreteModel::fishing(config.params.clone()).map_err(|e| fail(TrajectoryLog::default(), 0, e))?;
    let plant_params = SystemParams {
        c1: config.params.c1 * config.mismatch.0,
        c2: config.params.c2 * config.mismatch.1,
        ..config.params.clone()
    };
    let plant = DiscreteModel::fishing(plant_params).map_err(|e| fail(TrajectoryLog::default(), 0, e))?;
    if config.x0.len() != nominal.n_x() {
        return Err(fail(log, 0, Error::dim("initial state", nominal.n_x(), config.x0.len())));
    }

    let mut noise = NoiseSource::new(config.seed, nominal.n_x(), config.noise_std);
    let mut x = config.x0.clone();
    for k in 0..config.steps {
        let measured = (&x + noise.sample()).map(|v| v.max(0.0));
        let started = Instant::now();
        let outcome = match &config.controller {
            Controller::Expert(settings) => {
                expert_policy_step(&nominal, settings, &measured).map(|s| (s.decision, s.status == SolveStatus::NodeLimit))
            }
            Controller::Myopic { value, settings } => {
                myopic_policy_step(&measured, &nominal, value, settings).map(|d| (d.decision, false))
            }
        };
        let wall_time = started.elapsed().as_secs_f64();
        let (decision, flagged) = match outcome {
            Ok(v) => v,
            Err(e) => return Err(fail(log, k, e)),
        };
        let stage_cost = nominal.params.stage_cost(&x, &decision.stacked());
        let next = match plant.step(&x, &decision) {
            Ok(n) => n,
            Err(e) => return Err(fail(log, k, e)),
        };
        log.rows.push(LogRow {
            k,
            true_state: x,
            measured_state: measured,
            decision,
            stage_cost,
            wall_time,
            flagged,
        });
        x = next;
    }
    Ok(log)
}

/// Sum of stage costs, evaluated on the true states.
pub fn closed_loop_cost(log: &TrajectoryLog) -> f64 {
    log.rows.iter().map(|r| r.stage_cost).sum()
}

/// Initial states of the default demonstration trajectories.
pub fn default_demo_states() -> Vec<StateVec> {
    [(0.5, 0.7), (1.2, 0.9), (0.8, 1.3)]
        .iter()
        .map(|&(a, b)| StateVec::from_vec(vec![a, b]))
        .collect()
}

/// Expert runs without noise or mismatch; one record per closed-loop step.
pub fn demo_generate(
    params: &SystemParams,
    settings: &ExpertSettings,
    initial_states: &[StateVec],
    steps_per_traj: usize,
) -> Result<DemoDataset> {
    if steps_per_traj == 0 {
        return Err(Error::Config {
            line: 0,
            key: "demo_steps".into(),
            reason: "must be at least 1".into(),
        });
    }
    let mut records = Vec::with_capacity(initial_states.len() * steps_per_traj);
    for (traj_id, x0) in initial_states.iter().enumerate() {
        let config = SimConfig {
            steps: steps_per_traj,
            x0: x0.clone(),
            controller: Controller::Expert(settings.clone()),
            mismatch: (1.0, 1.0),
            noise_std: 0.0,
            seed: 0,
            params: params.clone(),
        };
        let log = simulate(&config).map_err(|e| e.source)?;
        records.extend(log.rows.into_iter().map(|row| DemoRecord {
            x: row.true_state,
            w: row.decision,
            traj_id,
            step: row.k,
            flagged: row.flagged,
        }));
    }
    Ok(DemoDataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn sv(a: f64, b: f64) -> StateVec {
        StateVec::from_vec(vec![a, b])
    }

    fn myopic_config(steps: usize, seed: u64) -> SimConfig {
        SimConfig {
            steps,
            x0: sv(0.8, 1.3),
            controller: Controller::Myopic {
                value: CostToGo::new(DMatrix::from_row_slice(2, 2, &[6e-3, -1e-3, -1e-3, 1.3e-2]), sv(0.0, 0.0))
                    .unwrap(),
                settings: MyopicSettings::default(),
            },
            mismatch: (1.1, 1.1),
            noise_std: 0.01,
            seed,
            params: SystemParams::default(),
        }
    }

    #[test]
    fn zero_steps_is_empty() {
        let log = simulate(&myopic_config(0, 1)).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(closed_loop_cost(&log), 0.0);
        assert_eq!(log.max_wall_time(), 0.0);
    }

    #[test]
    fn cost_is_sum_of_rows() {
        let mut log = simulate(&myopic_config(3, 1)).unwrap();
        for (row, c) in log.rows.iter_mut().zip([1.0, 2.0, 3.0]) {
            row.stage_cost = c;
        }
        assert_eq!(closed_loop_cost(&log), 6.0);
    }

    #[test]
    fn same_seed_same_log() {
        let strip = |mut l: TrajectoryLog| {
            l.rows.iter_mut().for_each(|r| r.wall_time = 0.0);
            l
        };
        let a = strip(simulate(&myopic_config(25, 9)).unwrap());
        let b = strip(simulate(&myopic_config(25, 9)).unwrap());
        assert_eq!(a, b);
        let c = strip(simulate(&myopic_config(25, 10)).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn measurements_are_clamped() {
        let mut cfg = myopic_config(5, 3);
        cfg.x0 = sv(1e-4, 1e-4);
        cfg.noise_std = 0.5;
        let log = simulate(&cfg).unwrap();
        assert!(log.rows.iter().all(|r| r.measured_state.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn noise_streams_are_independent_of_controller() {
        let mut a = NoiseSource::new(42, 2, 1.0);
        let mut b = NoiseSource::new(42, 2, 1.0);
        let first: Vec<StateVec> = (0..4).map(|_| a.sample()).collect();
        let second: Vec<StateVec> = (0..4).map(|_| b.sample()).collect();
        assert_eq!(first, second);
        assert_ne!(first[0][0], first[0][1]);
    }

    #[test]
    fn failing_controller_keeps_partial_log() {
        let mut cfg = myopic_config(60, 1);
        if let Controller::Myopic { settings, .. } = &mut cfg.controller {
            settings.state_lb = 0.9;
        }
        cfg.noise_std = 0.0;
        cfg.mismatch = (1.0, 1.0);
        cfg.x0 = sv(1.3, 1.0);
        let err = simulate(&cfg).unwrap_err();
        assert_eq!(err.partial.rows.len(), err.row);
        assert!(matches!(err.source, Error::Controller(_)));
    }

    #[test]
    fn one_step_demo_matches_policy_step() {
        let params = SystemParams::default();
        let settings = ExpertSettings {
            horizon: 8,
            ..ExpertSettings::default()
        };
        let x0 = sv(1.2, 0.9);
        let data = demo_generate(&params, &settings, std::slice::from_ref(&x0), 1).unwrap();
        assert_eq!(data.len(), 1);
        let model = DiscreteModel::fishing(params).unwrap();
        let step = expert_policy_step(&model, &settings, &x0).unwrap();
        assert_eq!(data.records[0].w, step.decision);
        assert_eq!(data.records[0].x, x0);
        assert!(demo_generate(&SystemParams::default(), &settings, &[x0], 0).is_err());
    }
}
