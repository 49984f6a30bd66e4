//! Flat `key=value` pipeline configuration.
//!
//! One pair per line, `#` starts a comment, keys are order-insensitive and
//! unknown or repeated keys are rejected. Every key has a default, so an
//! empty file is a valid configuration.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::dynamics::{StateVec, SystemParams};
use crate::error::{Error, Result};
use crate::expert::ExpertSettings;
use crate::ioc::{AdmmSettings, ConsistencyThresholds, ResidualOptions};
use crate::myopic::MyopicSettings;

/// Where the imputed quadratic is centered.
#[derive(Clone, Debug, PartialEq)]
pub enum ValueCenter {
    Origin,
    Reference,
    At(StateVec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub params: SystemParams,
    pub expert: ExpertSettings,
    pub value_center: ValueCenter,
    pub admm: AdmmSettings,
    pub verify_tol: f64,
    pub demo_initial_states: Vec<StateVec>,
    pub demo_steps: usize,
    pub steps: usize,
    pub x0: StateVec,
    /// Plant-side multipliers on `(c1, c2)`.
    pub mismatch: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
    /// When false, trajectory files carry zero wall times so that repeated
    /// runs are byte-identical.
    pub record_wall_time: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            params: SystemParams::default(),
            expert: ExpertSettings::default(),
            value_center: ValueCenter::Origin,
            admm: AdmmSettings::default(),
            verify_tol: 1e-3,
            demo_initial_states: crate::closed_loop::default_demo_states(),
            demo_steps: 40,
            steps: 40,
            x0: StateVec::from_vec(vec![0.5, 0.7]),
            mismatch: (1.10, 1.10),
            noise_std: 0.01,
            seed: 0,
            record_wall_time: true,
        }
    }
}

const KEYS: &[&str] = &[
    "c1",
    "c2",
    "ts",
    "x_ref",
    "q",
    "r_u",
    "q_n",
    "expert_horizon",
    "node_limit",
    "penalty_weight",
    "state_lb",
    "relax_tol",
    "relax_max_iter",
    "value_center",
    "admm_rho",
    "admm_tol",
    "admm_max_iter",
    "verify_tol",
    "demo_initial_states",
    "demo_steps",
    "steps",
    "x0",
    "mismatch_factor",
    "mismatch_c1",
    "mismatch_c2",
    "noise_std",
    "seed",
    "record_wall_time",
];

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|e| format!("{e:?}")).collect::<Vec<_>>().join(",")
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    // row-major
    let rows: Vec<f64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    fmt_vec(&rows)
}

impl PipelineConfig {
    pub fn residual_options(&self) -> ResidualOptions {
        ResidualOptions {
            center: self.center(),
            state_lb: self.expert.state_lb,
        }
    }

    pub fn center(&self) -> StateVec {
        match &self.value_center {
            ValueCenter::Origin => StateVec::zeros(self.params.x_ref.len()),
            ValueCenter::Reference => self.params.x_ref.clone(),
            ValueCenter::At(c) => c.clone(),
        }
    }

    pub fn myopic_settings(&self) -> MyopicSettings {
        MyopicSettings {
            state_lb: self.expert.state_lb,
            penalty_weight: self.expert.penalty_weight,
            feasibility_tol: self.expert.feasibility_tol,
            ..MyopicSettings::default()
        }
    }

    pub fn thresholds(&self) -> ConsistencyThresholds {
        ConsistencyThresholds {
            residual: self.verify_tol,
            ..ConsistencyThresholds::default()
        }
    }

    /// Effective configuration as ordered `(key, value)` pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        let p = &self.params;
        let center = match &self.value_center {
            ValueCenter::Origin => "origin".to_string(),
            ValueCenter::Reference => "reference".to_string(),
            ValueCenter::At(c) => fmt_vec(c.as_slice()),
        };
        let states = self
            .demo_initial_states
            .iter()
            .map(|s| fmt_vec(s.as_slice()))
            .collect::<Vec<_>>()
            .join(";");
        let e = &self.expert;
        vec![
            ("c1", format!("{:?}", p.c1)),
            ("c2", format!("{:?}", p.c2)),
            ("ts", format!("{:?}", p.ts)),
            ("x_ref", fmt_vec(p.x_ref.as_slice())),
            ("q", fmt_matrix(&p.q)),
            ("r_u", format!("{:?}", p.r_u)),
            ("q_n", fmt_matrix(&p.q_n)),
            ("expert_horizon", e.horizon.to_string()),
            ("node_limit", e.node_limit.to_string()),
            ("penalty_weight", format!("{:?}", e.penalty_weight)),
            ("state_lb", format!("{:?}", e.state_lb)),
            ("relax_tol", format!("{:?}", e.relax_tol)),
            ("relax_max_iter", e.relax_max_iter.to_string()),
            ("value_center", center),
            ("admm_rho", format!("{:?}", self.admm.rho)),
            ("admm_tol", format!("{:?}", self.admm.tol)),
            ("admm_max_iter", self.admm.max_iter.to_string()),
            ("verify_tol", format!("{:?}", self.verify_tol)),
            ("demo_initial_states", states),
            ("demo_steps", self.demo_steps.to_string()),
            ("steps", self.steps.to_string()),
            ("x0", fmt_vec(self.x0.as_slice())),
            ("mismatch_c1", format!("{:?}", self.mismatch.0)),
            ("mismatch_c2", format!("{:?}", self.mismatch.1)),
            ("noise_std", format!("{:?}", self.noise_std)),
            ("seed", self.seed.to_string()),
            ("record_wall_time", self.record_wall_time.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

struct Raw {
    values: BTreeMap<&'static str, (usize, String)>,
}

impl Raw {
    fn err(&self, key: &str, reason: impl Into<String>) -> Error {
        let line = self.values.get(key).map(|v| v.0).unwrap_or(0);
        Error::Config {
            line,
            key: key.into(),
            reason: reason.into(),
        }
    }

    fn get<T>(&self, key: &'static str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some((_, text)) => parse(text).map(Some).map_err(|r| self.err(key, r)),
        }
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("malformed number `{s}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite number `{s}`"))
    }
}

fn parse_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("malformed integer `{s}`"))
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|t| parse_f64(t.trim())).collect()
}

fn parse_state(s: &str) -> std::result::Result<StateVec, String> {
    parse_list(s).map(StateVec::from_vec)
}

fn parse_square(s: &str) -> std::result::Result<DMatrix<f64>, String> {
    let v = parse_list(s)?;
    let n = (v.len() as f64).sqrt().round() as usize;
    if n * n != v.len() || n == 0 {
        return Err(format!("expected n*n row-major entries, got {}", v.len()));
    }
    Ok(DMatrix::from_row_slice(n, n, &v))
}

pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut raw = Raw { values: BTreeMap::new() };
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(Error::Config {
                line: lineno,
                key: body.to_string(),
                reason: "expected key=value".into(),
            });
        };
        let key = key.trim();
        let Some(&known) = KEYS.iter().find(|k| **k == key) else {
            return Err(Error::Config {
                line: lineno,
                key: key.to_string(),
                reason: "unknown key".into(),
            });
        };
        if raw.values.insert(known, (lineno, value.trim().to_string())).is_some() {
            return Err(Error::Config {
                line: lineno,
                key: key.to_string(),
                reason: "key given more than once".into(),
            });
        }
    }

    let mut cfg = PipelineConfig::default();
    let p = &mut cfg.params;
    if let Some(v) = raw.get("c1", parse_f64)? {
        p.c1 = v;
    }
    if let Some(v) = raw.get("c2", parse_f64)? {
        p.c2 = v;
    }
    if let Some(v) = raw.get("ts", parse_f64)? {
        p.ts = v;
    }
    if let Some(v) = raw.get("x_ref", parse_state)? {
        p.x_ref = v;
    }
    if let Some(v) = raw.get("q", parse_square)? {
        p.q = v;
    }
    if let Some(v) = raw.get("r_u", parse_f64)? {
        p.r_u = v;
    }
    if let Some(v) = raw.get("q_n", parse_square)? {
        p.q_n = v;
    }
    if let Err((key, reason)) = p.check() {
        return Err(raw.err(key, reason));
    }
    if p.x_ref.len() != 2 {
        return Err(raw.err("x_ref", "the fishing benchmark has two states"));
    }

    let e = &mut cfg.expert;
    if let Some(v) = raw.get("expert_horizon", parse_usize)? {
        e.horizon = v;
    }
    if let Some(v) = raw.get("node_limit", parse_usize)? {
        e.node_limit = v;
    }
    if let Some(v) = raw.get("penalty_weight", parse_f64)? {
        e.penalty_weight = v;
    }
    if let Some(v) = raw.get("state_lb", parse_f64)? {
        e.state_lb = v;
    }
    if let Some(v) = raw.get("relax_tol", parse_f64)? {
        e.relax_tol = v;
    }
    if let Some(v) = raw.get("relax_max_iter", parse_usize)? {
        e.relax_max_iter = v;
    }
    if e.horizon == 0 {
        return Err(raw.err("expert_horizon", "horizon must be at least 1"));
    }
    if e.node_limit == 0 {
        return Err(raw.err("node_limit", "must be at least 1"));
    }
    if e.penalty_weight < 0.0 {
        return Err(raw.err("penalty_weight", "must be nonnegative"));
    }
    if !(e.relax_tol > 0.0) {
        return Err(raw.err("relax_tol", "must be positive"));
    }

    if let Some(v) = raw.get("value_center", |s| match s {
        "origin" => Ok(ValueCenter::Origin),
        "reference" => Ok(ValueCenter::Reference),
        other => parse_state(other).map(ValueCenter::At),
    })? {
        cfg.value_center = v;
    }
    if let ValueCenter::At(c) = &cfg.value_center {
        if c.len() != 2 {
            return Err(raw.err("value_center", "center must have two entries"));
        }
    }

    if let Some(v) = raw.get("admm_rho", parse_f64)? {
        cfg.admm.rho = v;
    }
    if let Some(v) = raw.get("admm_tol", parse_f64)? {
        cfg.admm.tol = v;
    }
    if let Some(v) = raw.get("admm_max_iter", parse_usize)? {
        cfg.admm.max_iter = v;
    }
    if !(cfg.admm.rho > 0.0) {
        return Err(raw.err("admm_rho", "must be positive"));
    }
    if !(cfg.admm.tol > 0.0) {
        return Err(raw.err("admm_tol", "must be positive"));
    }
    if let Some(v) = raw.get("verify_tol", parse_f64)? {
        cfg.verify_tol = v;
    }

    if let Some(v) = raw.get("demo_initial_states", |s| {
        s.split(';').map(|t| parse_state(t.trim())).collect::<std::result::Result<Vec<_>, _>>()
    })? {
        cfg.demo_initial_states = v;
    }
    if cfg.demo_initial_states.iter().any(|s| s.len() != 2) {
        return Err(raw.err("demo_initial_states", "each state must have two entries"));
    }
    if let Some(v) = raw.get("demo_steps", parse_usize)? {
        cfg.demo_steps = v;
    }
    if cfg.demo_steps == 0 {
        return Err(raw.err("demo_steps", "must be at least 1"));
    }
    if let Some(v) = raw.get("steps", parse_usize)? {
        cfg.steps = v;
    }
    if let Some(v) = raw.get("x0", parse_state)? {
        cfg.x0 = v;
    }
    if cfg.x0.len() != 2 {
        return Err(raw.err("x0", "initial state must have two entries"));
    }

    if let Some(v) = raw.get("mismatch_factor", parse_f64)? {
        cfg.mismatch = (v, v);
    }
    if let Some(v) = raw.get("mismatch_c1", parse_f64)? {
        cfg.mismatch.0 = v;
    }
    if let Some(v) = raw.get("mismatch_c2", parse_f64)? {
        cfg.mismatch.1 = v;
    }
    for (key, v) in [("mismatch_c1", cfg.mismatch.0), ("mismatch_c2", cfg.mismatch.1)] {
        if !(v > 0.0) {
            let key = if raw.values.contains_key(key) { key } else { "mismatch_factor" };
            return Err(raw.err(key, "mismatch factor must be positive"));
        }
    }
    if let Some(v) = raw.get("noise_std", parse_f64)? {
        cfg.noise_std = v;
    }
    if cfg.noise_std < 0.0 {
        return Err(raw.err("noise_std", "must be nonnegative"));
    }
    if let Some(v) = raw.get("seed", |s| s.parse::<u64>().map_err(|_| format!("malformed seed `{s}`")))? {
        cfg.seed = v;
    }
    if let Some(v) = raw.get("record_wall_time", |s| s.parse::<bool>().map_err(|_| format!("expected true or false, got `{s}`")))? {
        cfg.record_wall_time = v;
    }
    Ok(cfg)
}
