//! CSV and JSON files exchanged between the subcommands.
//!
//! Floats are written with 17 significant digits so every value reads back
//! bit-for-bit. Binary decisions are written as the integers `0` and `1`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde_json::Value;

use crate::closed_loop::TrajectoryLog;
use crate::dynamics::{DecisionVec, StateVec};
use crate::error::{Error, Result};
use crate::ioc::{DemoDataset, DemoRecord, ImputedValue};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn schema(file: &str, row: usize, reason: impl Into<String>) -> Error {
    Error::Schema {
        file: file.to_string(),
        row,
        reason: reason.into(),
    }
}

fn decision_headers(n: usize) -> Vec<String> {
    if n == 1 {
        vec!["u".into()]
    } else {
        (1..=n).map(|j| format!("u{j}")).collect()
    }
}

fn fmt_bits(w: &DecisionVec) -> Vec<String> {
    w.stacked().iter().map(|&v| format!("{}", v as u8)).collect()
}

fn csv_text(rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.write_record(r).map_err(csv_io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Header plus data records; each record carries its line number.
fn csv_rows(text: &str, file: &str) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line() as usize);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| schema(file, line_of(&e), e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(schema(file, 1, "missing header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| schema(file, line_of(&e), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(String::from).collect()));
    }
    Ok((header, rows))
}

/// Demonstration records with purely binary decisions.
pub fn write_demo_csv(data: &DemoDataset) -> Result<String> {
    let n_x = data.records.first().map_or(2, |r| r.x.len());
    let n_w = data.records.first().map_or(1, |r| r.w.len());
    let mut header = vec!["traj_id".to_string(), "k".to_string()];
    header.extend((1..=n_x).map(|j| format!("x{j}")));
    header.extend(decision_headers(n_w));
    let mut rows = vec![header];
    for (i, r) in data.records.iter().enumerate() {
        if r.x.len() != n_x || r.w.len() != n_w {
            return Err(Error::Validation {
                record: i,
                reason: "records have differing dimensions".into(),
            });
        }
        if !r.w.continuous.is_empty() || !r.w.is_integral() {
            return Err(Error::Validation {
                record: i,
                reason: "demo files hold binary decisions only".into(),
            });
        }
        let mut fields = vec![r.traj_id.to_string(), r.step.to_string()];
        fields.extend(r.x.iter().map(|&v| fmt_f64(v)));
        fields.extend(fmt_bits(&r.w));
        rows.push(fields);
    }
    csv_text(&rows)
}

/// Parses a demo file. `file` names the source in error messages; rows are
/// counted from the header line as row 1.
pub fn read_demo_csv(text: &str, file: &str) -> Result<DemoDataset> {
    let (cols, rows) = csv_rows(text, file)?;
    if cols.len() < 4 || cols[0] != "traj_id" || cols[1] != "k" {
        return Err(schema(file, 1, "header must start with traj_id,k"));
    }
    let n_x = cols[2..].iter().take_while(|c| c.starts_with('x')).count();
    let n_w = cols.len() - 2 - n_x;
    let expected: Vec<String> = ["traj_id".to_string(), "k".to_string()]
        .into_iter()
        .chain((1..=n_x).map(|j| format!("x{j}")))
        .chain(decision_headers(n_w))
        .collect();
    if n_x == 0 || n_w == 0 || cols != expected {
        return Err(schema(file, 1, format!("expected header {}", expected.join(","))));
    }

    let mut records = Vec::with_capacity(rows.len());
    for (row, fields) in rows {
        if fields.len() != cols.len() {
            return Err(schema(file, row, format!("expected {} fields, got {}", cols.len(), fields.len())));
        }
        let int = |s: &str, name: &str| s.parse::<usize>().map_err(|_| schema(file, row, format!("malformed {name} `{s}`")));
        let traj_id = int(&fields[0], "traj_id")?;
        let step = int(&fields[1], "k")?;
        let mut x = Vec::with_capacity(n_x);
        for (j, s) in fields[2..2 + n_x].iter().enumerate() {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => x.push(v),
                _ => return Err(schema(file, row, format!("malformed x{} `{s}`", j + 1))),
            }
        }
        let mut bits = Vec::with_capacity(n_w);
        for (s, name) in fields[2 + n_x..].iter().zip(&expected[2 + n_x..]) {
            match s.parse::<f64>() {
                Ok(v) if v == 0.0 => bits.push(0),
                Ok(v) if v == 1.0 => bits.push(1),
                _ => return Err(schema(file, row, format!("{name} must be 0 or 1, got `{s}`"))),
            }
        }
        records.push(DemoRecord {
            x: StateVec::from_vec(x),
            w: DecisionVec::binary(&bits),
            traj_id,
            step,
            flagged: false,
        });
    }
    Ok(DemoDataset { records })
}

/// Closed-loop log. With `record_wall_time` false the wall-time column is
/// written as zero.
pub fn write_trajectory_csv(log: &TrajectoryLog, record_wall_time: bool) -> Result<String> {
    let n_x = log.rows.first().map_or(2, |r| r.true_state.len());
    let n_w = log.rows.first().map_or(1, |r| r.decision.len());
    let mut header = vec!["k".to_string()];
    header.extend((1..=n_x).map(|j| format!("x{j}_true")));
    header.extend((1..=n_x).map(|j| format!("x{j}_meas")));
    header.extend(decision_headers(n_w));
    header.push("stage_cost".into());
    header.push("wall_time_s".into());
    let mut rows = vec![header];
    for r in &log.rows {
        let mut fields = vec![r.k.to_string()];
        fields.extend(r.true_state.iter().map(|&v| fmt_f64(v)));
        fields.extend(r.measured_state.iter().map(|&v| fmt_f64(v)));
        if r.decision.continuous.is_empty() && r.decision.is_integral() {
            fields.extend(fmt_bits(&r.decision));
        } else {
            fields.extend(r.decision.stacked().iter().map(|&v| fmt_f64(v)));
        }
        fields.push(fmt_f64(r.stage_cost));
        fields.push(fmt_f64(if record_wall_time { r.wall_time } else { 0.0 }));
        rows.push(fields);
    }
    csv_text(&rows)
}

/// The columns of a trajectory file that `compare` needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySummary {
    pub stage_costs: Vec<f64>,
    pub wall_times: Vec<f64>,
}

impl TrajectorySummary {
    pub fn cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn max_wall(&self) -> f64 {
        self.wall_times.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn mean_wall(&self) -> f64 {
        if self.wall_times.is_empty() {
            0.0
        } else {
            self.wall_times.iter().sum::<f64>() / self.wall_times.len() as f64
        }
    }
}

pub fn read_trajectory_csv(text: &str, file: &str) -> Result<TrajectorySummary> {
    let (cols, rows) = csv_rows(text, file)?;
    let find = |name: &str| cols.iter().position(|c| c == name).ok_or_else(|| schema(file, 1, format!("missing column {name}")));
    let cost_col = find("stage_cost")?;
    let wall_col = find("wall_time_s")?;
    let mut summary = TrajectorySummary {
        stage_costs: Vec::with_capacity(rows.len()),
        wall_times: Vec::with_capacity(rows.len()),
    };
    for (row, fields) in rows {
        if fields.len() != cols.len() {
            return Err(schema(file, row, format!("expected {} fields, got {}", cols.len(), fields.len())));
        }
        let num = |c: usize| {
            fields[c]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| schema(file, row, format!("malformed {} `{}`", cols[c], fields[c])))
        };
        summary.stage_costs.push(num(cost_col)?);
        summary.wall_times.push(num(wall_col)?);
    }
    Ok(summary)
}

/// Contents of an imputation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationReport {
    pub p: DMatrix<f64>,
    /// Absent in hand-written reports; readers then fall back to the config.
    pub center: Option<StateVec>,
    pub r_stat_inf: f64,
    pub r_comp_inf: f64,
    pub min_eigenvalue: f64,
    pub objective: Option<f64>,
    pub admm_iterations: usize,
    pub converged: bool,
    pub ridge: Option<f64>,
    pub config_echo: BTreeMap<String, String>,
}

impl ImputationReport {
    pub fn from_value(value: &ImputedValue, center: &StateVec, config_echo: BTreeMap<String, String>) -> Self {
        ImputationReport {
            p: value.p.clone(),
            center: Some(center.clone()),
            r_stat_inf: value.r_stat_inf,
            r_comp_inf: value.r_comp_inf,
            min_eigenvalue: value.min_eigenvalue,
            objective: Some(value.objective),
            admm_iterations: value.admm_iterations,
            converged: value.converged,
            ridge: value.ridge,
            config_echo,
        }
    }
}

fn json_f64(v: f64) -> String {
    if v.is_finite() {
        fmt_f64(v)
    } else {
        "null".into()
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn json_vec(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|&e| json_f64(e)).collect::<Vec<_>>().join(", "))
}

fn json_echo(echo: &BTreeMap<String, String>, indent: &str) -> String {
    if echo.is_empty() {
        return "{}".into();
    }
    let body: Vec<String> = echo
        .iter()
        .map(|(k, v)| format!("{indent}  {}: {}", json_str(k), json_str(v)))
        .collect();
    format!("{{\n{}\n{indent}}}", body.join(",\n"))
}

pub fn write_report_json(report: &ImputationReport) -> String {
    let p = &report.p;
    let rows: Vec<String> = (0..p.nrows())
        .map(|i| json_vec(&(0..p.ncols()).map(|j| p[(i, j)]).collect::<Vec<_>>()))
        .collect();
    let mut fields = vec![format!("  \"P\": [{}]", rows.join(", "))];
    if let Some(c) = &report.center {
        fields.push(format!("  \"center\": {}", json_vec(c.as_slice())));
    }
    fields.push(format!("  \"r_stat_inf\": {}", json_f64(report.r_stat_inf)));
    fields.push(format!("  \"r_comp_inf\": {}", json_f64(report.r_comp_inf)));
    fields.push(format!("  \"min_eigenvalue\": {}", json_f64(report.min_eigenvalue)));
    if let Some(o) = report.objective {
        fields.push(format!("  \"objective\": {}", json_f64(o)));
    }
    fields.push(format!("  \"admm_iterations\": {}", report.admm_iterations));
    fields.push(format!("  \"converged\": {}", report.converged));
    fields.push(format!("  \"ridge\": {}", report.ridge.map_or("null".into(), json_f64)));
    fields.push(format!("  \"config_echo\": {}", json_echo(&report.config_echo, "  ")));
    format!("{{\n{}\n}}\n", fields.join(",\n"))
}

pub fn read_report_json(text: &str, file: &str) -> Result<ImputationReport> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema(file, e.line(), e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| schema(file, 1, "top level must be an object"))?;
    let field = |name: &str| obj.get(name).ok_or_else(|| schema(file, 0, format!("missing field `{name}`")));
    let number = |name: &str| {
        field(name)?
            .as_f64()
            .ok_or_else(|| schema(file, 0, format!("field `{name}` must be a number")))
    };
    let numbers = |v: &Value, name: &str| -> Result<Vec<f64>> {
        v.as_array()
            .ok_or_else(|| schema(file, 0, format!("field `{name}` must be an array")))?
            .iter()
            .map(|e| e.as_f64().ok_or_else(|| schema(file, 0, format!("field `{name}` must hold numbers"))))
            .collect()
    };

    let rows = field("P")?
        .as_array()
        .ok_or_else(|| schema(file, 0, "field `P` must be an array of rows"))?
        .iter()
        .map(|r| numbers(r, "P"))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(schema(file, 0, "field `P` must be a nonempty square matrix"));
    }
    let p = DMatrix::from_row_iterator(n, n, rows.into_iter().flatten());
    let center = match obj.get("center") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let c = numbers(v, "center")?;
            if c.len() != n {
                return Err(schema(file, 0, "field `center` must match the size of `P`"));
            }
            Some(StateVec::from_vec(c))
        }
    };
    let admm_iterations = field("admm_iterations")?
        .as_u64()
        .ok_or_else(|| schema(file, 0, "field `admm_iterations` must be a nonnegative integer"))? as usize;
    let converged = field("converged")?
        .as_bool()
        .ok_or_else(|| schema(file, 0, "field `converged` must be a boolean"))?;
    let config_echo = match field("config_echo")? {
        Value::Object(m) => m
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => Ok((k.clone(), s.clone())),
                other => Ok((k.clone(), other.to_string())),
            })
            .collect::<Result<BTreeMap<_, _>>>()?,
        _ => return Err(schema(file, 0, "field `config_echo` must be an object")),
    };
    Ok(ImputationReport {
        p,
        center,
        r_stat_inf: number("r_stat_inf")?,
        r_comp_inf: number("r_comp_inf")?,
        min_eigenvalue: number("min_eigenvalue")?,
        objective: obj.get("objective").and_then(Value::as_f64),
        admm_iterations,
        converged,
        ridge: obj.get("ridge").and_then(Value::as_f64),
        config_echo,
    })
}

/// Cost and timing comparison of two trajectories; ratios are `b / a`.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub steps: (usize, usize),
    pub cost: (f64, f64),
    pub max_wall: (f64, f64),
    pub mean_wall: (f64, f64),
}

/// `b / a`, with `1` when both are equal (including both zero).
pub fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        b / a
    }
}

impl Comparison {
    pub fn new(a: &TrajectorySummary, b: &TrajectorySummary) -> Self {
        Comparison {
            steps: (a.stage_costs.len(), b.stage_costs.len()),
            cost: (a.cost(), b.cost()),
            max_wall: (a.max_wall(), b.max_wall()),
            mean_wall: (a.mean_wall(), b.mean_wall()),
        }
    }

    pub fn cost_ratio(&self) -> f64 {
        ratio(self.cost.0, self.cost.1)
    }

    pub fn to_json(&self, echo: &BTreeMap<String, String>) -> String {
        let fields = [
            format!("  \"steps_a\": {}", self.steps.0),
            format!("  \"steps_b\": {}", self.steps.1),
            format!("  \"cost_a\": {}", json_f64(self.cost.0)),
            format!("  \"cost_b\": {}", json_f64(self.cost.1)),
            format!("  \"cost_difference\": {}", json_f64(self.cost.1 - self.cost.0)),
            format!("  \"cost_ratio\": {}", json_f64(self.cost_ratio())),
            format!("  \"max_wall_a\": {}", json_f64(self.max_wall.0)),
            format!("  \"max_wall_b\": {}", json_f64(self.max_wall.1)),
            format!("  \"max_wall_ratio\": {}", json_f64(ratio(self.max_wall.0, self.max_wall.1))),
            format!("  \"mean_wall_a\": {}", json_f64(self.mean_wall.0)),
            format!("  \"mean_wall_b\": {}", json_f64(self.mean_wall.1)),
            format!("  \"mean_wall_ratio\": {}", json_f64(ratio(self.mean_wall.0, self.mean_wall.1))),
            format!("  \"config_echo\": {}", json_echo(echo, "  ")),
        ];
        format!("{{\n{}\n}}\n", fields.join(",\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(traj_id: usize, step: usize, x: [f64; 2], u: u8) -> DemoRecord {
        DemoRecord {
            x: StateVec::from_vec(x.to_vec()),
            w: DecisionVec::binary(&[u]),
            traj_id,
            step,
            flagged: false,
        }
    }

    #[test]
    fn demo_round_trip_is_exact() {
        let data = DemoDataset {
            records: vec![record(0, 0, [0.1, 1.0 / 3.0], 1), record(2, 7, [1e-300, 12345.678], 0)],
        };
        let text = write_demo_csv(&data).unwrap();
        assert!(text.starts_with("traj_id,k,x1,x2,u\n"));
        assert!(text.lines().nth(1).unwrap().ends_with(",1"));
        assert_eq!(read_demo_csv(&text, "d.csv").unwrap(), data);
    }

    #[test]
    fn fractional_decision_names_row() {
        let text = "traj_id,k,x1,x2,u\n0,0,0.5,0.7,1\n0,1,0.5,0.7,0.5\n";
        match read_demo_csv(text, "d.csv") {
            Err(Error::Schema { row, reason, .. }) => {
                assert_eq!(row, 3);
                assert!(reason.contains("0 or 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_demo_csv("traj_id,k,x1,x2\n", "d.csv").is_err());
        assert!(read_demo_csv("traj_id,k,x1,x2,u\n0,0,0.5,1\n", "d.csv").is_err());
    }

    #[test]
    fn report_round_trip_is_exact() {
        let report = ImputationReport {
            p: DMatrix::identity(2, 2),
            center: Some(StateVec::from_vec(vec![1.0, 1.0])),
            r_stat_inf: 0.0,
            r_comp_inf: 0.0,
            min_eigenvalue: 1.0,
            objective: Some(0.0),
            admm_iterations: 3,
            converged: true,
            ridge: None,
            config_echo: [("c1".to_string(), "0.4".to_string())].into(),
        };
        let back = read_report_json(&write_report_json(&report), "r.json").unwrap();
        assert_eq!(back, report);

        let awkward = ImputationReport {
            p: DMatrix::from_row_slice(2, 2, &[3.07e-4, 2.13e-5 / 3.0, 2.13e-5 / 3.0, 0.1 + 0.2]),
            r_stat_inf: 1.0 / 7.0,
            ridge: Some(1e-10),
            ..report
        };
        assert_eq!(read_report_json(&write_report_json(&awkward), "r.json").unwrap(), awkward);
    }

    #[test]
    fn report_missing_field_is_schema_error() {
        let text = "{\"P\": [[1, 0], [0, 1]], \"r_stat_inf\": 0, \"r_comp_inf\": 0, \"admm_iterations\": 1, \"converged\": true, \"config_echo\": {}}";
        match read_report_json(text, "r.json") {
            Err(Error::Schema { reason, .. }) => assert!(reason.contains("min_eigenvalue")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_report_json("not json", "r.json").is_err());
        assert!(read_report_json("{\"P\": [[1, 0]]}", "r.json").is_err());
    }

    #[test]
    fn ratio_conventions() {
        assert_eq!(ratio(0.0, 0.0), 1.0);
        assert_eq!(ratio(2.0, 3.0), 1.5);
        assert!(ratio(0.0, 1.0).is_infinite());
        assert_eq!(json_f64(ratio(0.0, 1.0)), "null");
    }
}
