//! Ablation sweeps over score dimension, KL weight or fusion rule.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::metrics::{evaluate, records, MetricsReport};
use crate::model::{predict_cohort, Fusion};
use crate::trainer::{converged_kl, train, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Dim,
    Beta,
    Fusion,
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dim" | "d" | "dimension" => Ok(Self::Dim),
            "beta" => Ok(Self::Beta),
            "fusion" => Ok(Self::Fusion),
            other => Err(format!("unknown axis `{other}` (expected dim, beta or fusion)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dim => "dim",
            Self::Beta => "beta",
            Self::Fusion => "fusion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum SweepValue {
    Dim(usize),
    Beta(f64),
    Fusion(Fusion),
}

impl SweepValue {
    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self, String> {
        let s = s.trim();
        match axis {
            SweepAxis::Dim => match s.parse::<usize>() {
                Ok(d) if d > 0 => Ok(Self::Dim(d)),
                _ => Err(format!("dimension `{s}` is not a positive integer")),
            },
            SweepAxis::Beta => match s.parse::<f64>() {
                Ok(b) if b >= 0.0 && b.is_finite() => Ok(Self::Beta(b)),
                _ => Err(format!("beta `{s}` is not a nonnegative number")),
            },
            SweepAxis::Fusion => s.parse().map(Self::Fusion),
        }
    }

    pub fn parse_list(axis: SweepAxis, list: &str) -> Result<Vec<Self>, String> {
        list.split(',').map(|v| Self::parse(axis, v)).collect()
    }

    pub fn apply(&self, config: &mut TrainConfig) {
        match *self {
            Self::Dim(d) => config.model.d = d,
            Self::Beta(b) => config.model.beta = b,
            Self::Fusion(f) => config.model.fusion = f,
        }
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dim(d) => write!(f, "{d}"),
            Self::Beta(b) => write!(f, "{b}"),
            Self::Fusion(x) => write!(f, "{x}"),
        }
    }
}

/// One trained and evaluated cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: SweepValue,
    pub seed: u64,
    pub report: MetricsReport,
    pub final_kl: f64,
    pub final_loss: f64,
    pub wall_seconds: f64,
}

pub const METRIC_COLUMNS: [&str; 9] = [
    "r_pol",
    "auc0",
    "auc1",
    "acc0",
    "acc1",
    "pehe",
    "final_kl",
    "final_loss",
    "wall_seconds",
];

impl SweepRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        let r = &self.report;
        match name {
            "r_pol" => Some(r.r_pol),
            "auc0" => r.auc0,
            "auc1" => r.auc1,
            "acc0" => r.acc0,
            "acc1" => r.acc1,
            "pehe" => r.pehe,
            "final_kl" => Some(self.final_kl),
            "final_loss" => Some(self.final_loss),
            "wall_seconds" => Some(self.wall_seconds),
            _ => None,
        }
    }
}

/// Mean and sample standard deviation of a metric over the seeds of one value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            sd,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub value: SweepValue,
    pub runs: usize,
    pub metrics: Vec<(String, Option<Summary>)>,
}

impl AggregateRow {
    pub fn get(&self, name: &str) -> Option<Summary> {
        self.metrics.iter().find(|(n, _)| n == name).and_then(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut values: Vec<SweepValue> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value) {
                values.push(r.value);
            }
        }
        values
            .into_iter()
            .map(|value| {
                let cell: Vec<&SweepRow> = self.rows.iter().filter(|r| r.value == value).collect();
                let metrics = METRIC_COLUMNS
                    .iter()
                    .map(|&m| {
                        let xs: Vec<f64> = cell.iter().filter_map(|r| r.metric(m)).collect();
                        (m.to_owned(), Summary::of(&xs))
                    })
                    .collect();
                AggregateRow {
                    value,
                    runs: cell.len(),
                    metrics,
                }
            })
            .collect()
    }

    /// One line per (value, seed).
    pub fn rows_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.axis.to_string(), "seed".into()];
        header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        header.push("flags".into());
        w.write_record(&header).expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![r.value.to_string(), r.seed.to_string()];
            rec.extend(METRIC_COLUMNS.iter().map(|m| fmt_opt(r.metric(m))));
            rec.push(r.report.flags.join(";"));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    /// One line per value with `<metric>_mean` and `<metric>_sd` columns.
    pub fn aggregate_csv(&self) -> String {
        aggregate_csv(&self.axis.to_string(), &self.aggregate())
    }
}

/// Header and records of an aggregate table keyed by `key`.
pub fn aggregate_records(key: &str, rows: &[AggregateRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec![key.to_owned(), "runs".into()];
    for m in METRIC_COLUMNS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    let records = rows
        .iter()
        .map(|a| {
            let mut rec = vec![a.value.to_string(), a.runs.to_string()];
            for m in METRIC_COLUMNS {
                let s = a.get(m);
                rec.push(fmt_opt(s.map(|s| s.mean)));
                rec.push(fmt_opt(s.map(|s| s.sd)));
            }
            rec
        })
        .collect();
    (header, records)
}

pub fn aggregate_csv(key: &str, rows: &[AggregateRow]) -> String {
    let (header, records) = aggregate_records(key, rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory csv");
    for rec in records {
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Trains and evaluates `config` with `seed` on one split.
pub fn run_cell(
    train_set: &Cohort,
    test_set: &Cohort,
    config: &TrainConfig,
) -> Result<(MetricsReport, f64, f64, f64), TrainError> {
    let start = Instant::now();
    let ck = train(train_set, config)?;
    let preds = predict_cohort(test_set, &ck.params, &config.model)?;
    let report = evaluate(&records(test_set, &preds))?;
    let wall = start.elapsed().as_secs_f64();
    let last = ck.history.last().map_or(f64::NAN, |h| h.loss);
    Ok((report, converged_kl(&ck.history), last, wall))
}

/// Trains one model per `(value, seed)` on `train_set` and evaluates it on
/// `test_set`. Cells run in parallel unless `parallel` is false.
pub fn sweep(
    train_set: &Cohort,
    test_set: &Cohort,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[SweepValue],
    seeds: &[u64],
    parallel: bool,
) -> Result<SweepTable, TrainError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value and one seed".into()));
    }
    let cells: Vec<(SweepValue, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(value, seed): &(SweepValue, u64)| {
        let mut cfg = base.clone();
        value.apply(&mut cfg);
        cfg.seed = seed;
        let (report, final_kl, final_loss, wall_seconds) = run_cell(train_set, test_set, &cfg)?;
        Ok(SweepRow {
            value,
            seed,
            report,
            final_kl,
            final_loss,
            wall_seconds,
        })
    };
    let rows: Result<Vec<SweepRow>, TrainError> = if parallel {
        cells.par_iter().map(run).collect()
    } else {
        cells.iter().map(run).collect()
    };
    Ok(SweepTable { axis, rows: rows? })
}
