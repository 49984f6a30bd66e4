//! Quick internal consistency checks, run by `ctg selftest`.

use nalgebra::DMatrix;

use crate::dynamics::{DecisionVec, DiscreteModel, StateVec, SystemParams};
use crate::expert::{branch_and_bound, ExpertSettings, HorizonProblem};
use crate::ioc::{admm_solve_sdp, assemble_residual_system, psd_project, AdmmSettings, DemoDataset, DemoRecord, ResidualOptions};
use crate::myopic::{myopic_policy_step, CostToGo, MyopicSettings};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn sv(a: f64, b: f64) -> StateVec {
    StateVec::from_vec(vec![a, b])
}

fn check(name: &'static str, f: impl FnOnce() -> crate::Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn model_with_ts(ts: f64) -> crate::Result<DiscreteModel> {
    DiscreteModel::fishing(SystemParams {
        ts,
        ..SystemParams::default()
    })
}

/// Fourth-order convergence: halving the step cuts the error ~16x.
fn rk4_order() -> crate::Result<(bool, String)> {
    let x0 = sv(0.8, 1.3);
    let w = DecisionVec::fishing(true);
    let run = |ts: f64, n: usize| -> crate::Result<StateVec> {
        let m = model_with_ts(ts)?;
        let mut x = x0.clone();
        for _ in 0..n {
            x = m.step(&x, &w)?;
        }
        Ok(x)
    };
    let fine = run(0.4 / 64.0, 64)?;
    let e1 = (run(0.4, 1)? - &fine).norm();
    let e2 = (run(0.2, 2)? - &fine).norm();
    let ratio = e1 / e2;
    Ok(((10.0..=40.0).contains(&ratio), format!("error ratio {ratio:.2}")))
}

fn jacobians_match_differences() -> crate::Result<(bool, String)> {
    let m = DiscreteModel::fishing(SystemParams::default())?;
    let (x, w) = (sv(0.9, 1.2), [0.3]);
    let lin = m.linearize(&x, &w)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..2 {
        let mut e = StateVec::zeros(2);
        e[j] = h;
        let fd = (m.step_flat(&(&x + &e), &w)? - m.step_flat(&(&x - &e), &w)?) / (2.0 * h);
        worst = worst.max((fd - lin.a.column(j)).amax());
    }
    let fd = (m.step_flat(&x, &[w[0] + h])? - m.step_flat(&x, &[w[0] - h])?) / (2.0 * h);
    worst = worst.max((fd - lin.b.column(0)).amax());
    Ok((worst < 1e-7, format!("max deviation {worst:.2e}")))
}

fn branch_and_bound_matches_enumeration() -> crate::Result<(bool, String)> {
    let n = 6;
    let settings = ExpertSettings {
        horizon: n,
        ..ExpertSettings::default()
    };
    let p = HorizonProblem::new(DiscreteModel::fishing(SystemParams::default())?, sv(1.2, 0.9), settings)?;
    let sol = branch_and_bound(&p)?;
    let mut best = f64::INFINITY;
    for mask in 0..1usize << n {
        let w: Vec<f64> = (0..n).map(|k| ((mask >> k) & 1) as f64).collect();
        if p.is_feasible(&w)? {
            best = best.min(p.cost_flat(&w)?);
        }
    }
    let gap = (sol.objective - best).abs();
    Ok((gap <= 1e-9 * best.max(1.0), format!("objective {:.6e}, enumeration {best:.6e}", sol.objective)))
}

fn psd_projection() -> crate::Result<(bool, String)> {
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    let p = psd_project(&s)?;
    let err = (p - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax();
    Ok((err < 1e-14, format!("deviation {err:.2e}")))
}

/// Labels states with a known quadratic and checks the imputation recovers
/// a value with the same decisions.
fn imputation_reproduces_policy() -> crate::Result<(bool, String)> {
    let model = DiscreteModel::fishing(SystemParams::default())?;
    let truth = CostToGo::new(DMatrix::from_row_slice(2, 2, &[6e-3, -1e-3, -1e-3, 1.3e-2]), sv(0.0, 0.0))?;
    let settings = MyopicSettings::default();
    let mut records = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let x = sv(0.4 + 0.25 * f64::from(i), 0.4 + 0.25 * f64::from(j));
            let w = myopic_policy_step(&x, &model, &truth, &settings)?.decision;
            records.push(DemoRecord {
                x,
                w,
                traj_id: 0,
                step: records.len(),
                flagged: false,
            });
        }
    }
    let data = DemoDataset { records };
    let options = ResidualOptions {
        center: sv(0.0, 0.0),
        state_lb: 0.0,
    };
    let value = admm_solve_sdp(&assemble_residual_system(&data, &model, &options)?, &AdmmSettings::default())?;
    let learned = CostToGo::new(value.p.clone(), options.center)?;
    let mut agree = 0;
    for r in &data.records {
        agree += usize::from(myopic_policy_step(&r.x, &model, &learned, &settings)?.decision == r.w);
    }
    Ok((
        agree == data.len(),
        format!("{agree}/{} decisions reproduced, residual {:.2e}", data.len(), value.r_stat_inf.max(value.r_comp_inf)),
    ))
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("rk4_order", rk4_order),
        check("jacobians", jacobians_match_differences),
        check("branch_and_bound", branch_and_bound_matches_enumeration),
        check("psd_projection", psd_projection),
        check("imputation", imputation_reproduces_policy),
    ]
}
