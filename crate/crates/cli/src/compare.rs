use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vhj_core::stats::Estimate;

use crate::pipeline::Report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub name: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub combined_stderr: f64,
    /// `|delta| <= 3 combined_stderr`
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed_mismatch: bool,
    /// Config paths that differ, apart from the seed and output directory.
    pub config_diffs: Vec<String>,
    /// Differences that make metrics incomparable (schedules, points).
    pub structural: Vec<String>,
    pub metrics: Vec<MetricDelta>,
    pub all_consistent: bool,
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                diff_values(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

fn metric(name: String, a: Estimate, b: Estimate) -> MetricDelta {
    let delta = b.value - a.value;
    let se = a.combined(&b);
    MetricDelta { name, a: a.value, b: b.value, delta, combined_stderr: se, consistent: delta.abs() <= 3.0 * se }
}

pub fn compare(a: &Report, b: &Report) -> Result<Comparison> {
    if a.schema_version != b.schema_version {
        bail!("schema mismatch: version {} vs {}", a.schema_version, b.schema_version);
    }
    let seed_mismatch = a.config.monte_carlo.seed != b.config.monte_carlo.seed;
    let mut config_diffs = Vec::new();
    diff_values("", &serde_json::to_value(&a.config)?, &serde_json::to_value(&b.config)?, &mut config_diffs);
    config_diffs.retain(|p| p != "monte_carlo.seed" && p != "out");

    let mut structural = Vec::new();
    if a.problem != b.problem {
        structural.push(format!("problem {} vs {}", a.problem, b.problem));
    }
    if a.config.points != b.config.points {
        structural.push(format!("{} vs {} evaluation points, or different coordinates", a.config.points.len(), b.config.points.len()));
    }
    let mut metrics = Vec::new();
    for la in &a.ladders {
        let Some(lb) = b.ladders.iter().find(|l| l.point == la.point) else {
            structural.push(format!("point {}: ladder only in the first report", la.point));
            continue;
        };
        if la.report.schedule != lb.report.schedule {
            structural.push(format!("point {}: schedule {:?} vs {:?}", la.point, la.report.schedule, lb.report.schedule));
        }
        for lev in &la.report.levels {
            if let Some(other) = lb.report.level(lev.n) {
                metrics.push(metric(format!("point{}.u[n={}]", la.point, lev.n), lev.u, other.u));
                metrics.push(metric(format!("point{}.constraint_mass[n={}]", la.point, lev.n), lev.constraint_mass, other.constraint_mass));
            }
        }
        metrics.push(metric(format!("point{}.final_u", la.point), la.report.final_u, lb.report.final_u));
    }
    for lb in &b.ladders {
        if !a.ladders.iter().any(|l| l.point == lb.point) {
            structural.push(format!("point {}: ladder only in the second report", lb.point));
        }
    }
    match (&a.dual, &b.dual) {
        (Some(x), Some(y)) => {
            for ea in &x.entries {
                if let Some(eb) = y.entries.iter().find(|e| e.label == ea.label) {
                    metrics.push(metric(format!("dual.{}", ea.label), ea.estimate.estimate, eb.estimate.estimate));
                }
            }
        }
        (None, None) => {}
        _ => structural.push("dual sandwich present in one report only".into()),
    }
    for oa in &a.oracle {
        if let Some(ob) = b.oracle.iter().find(|o| o.point == oa.point && o.kind == oa.kind) {
            metrics.push(metric(format!("oracle[{}].value", oa.point), Estimate::exact(oa.value), Estimate::exact(ob.value)));
        }
    }
    let all_consistent = metrics.iter().all(|m| m.consistent);
    Ok(Comparison { seed_mismatch, config_diffs, structural, metrics, all_consistent })
}
