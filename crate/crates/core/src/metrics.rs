//! Policy risk, per-arm AUC and accuracy, and oracle PEHE.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cohort, OracleInfo};
use crate::model::PotentialOutcomes;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub outcomes: PotentialOutcomes,
    pub t: u8,
    pub y: u8,
    pub oracle: Option<OracleInfo>,
}

impl EvalRecord {
    /// Recommended arm; ties go to the conservative arm 0.
    pub fn policy(&self) -> u8 {
        u8::from(self.outcomes.y1_hat > self.outcomes.y0_hat)
    }
}

/// Pairs predictions with the factual data (and oracle, when present) of a cohort.
pub fn records(cohort: &Cohort, predictions: &[PotentialOutcomes]) -> Vec<EvalRecord> {
    cohort
        .samples
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(i, (s, &outcomes))| EvalRecord {
            outcomes,
            t: s.t,
            y: s.y,
            oracle: cohort.oracle.as_ref().map(|o| o[i].clone()),
        })
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    Empty,
    #[error("no records factually in arm {0}")]
    EmptyArm(u8),
    #[error("AUC undefined for arm {arm}: factual outcomes are all {label}")]
    UndefinedAuc { arm: u8, label: u8 },
    #[error("record {0} has no oracle information")]
    MissingOracle(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRisk {
    pub value: f64,
    /// `(policy, treatment)` cells with no records.
    pub empty_cells: Vec<(u8, u8)>,
    pub n_pi1: usize,
    pub n_pi0: usize,
}

pub fn policy_risk_detailed(records: &[EvalRecord]) -> Result<PolicyRisk, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len() as f64;
    let n_pi1 = records.iter().filter(|r| r.policy() == 1).count();
    let n_pi0 = records.len() - n_pi1;
    // 1 - sum of P(pi) E[y | t = pi, pi], written as a sum of nonnegative terms
    let mut empty_cells = Vec::new();
    let mut value = 0.0;
    for (arm, n_pi) in [(1u8, n_pi1), (0u8, n_pi0)] {
        let (count, favorable) = records
            .iter()
            .filter(|r| r.policy() == arm && r.t == arm)
            .fold((0usize, 0usize), |(c, f), r| (c + 1, f + usize::from(r.y)));
        if count == 0 {
            empty_cells.push((arm, arm));
            value += n_pi as f64;
        } else {
            value += n_pi as f64 * ((count - favorable) as f64 / count as f64);
        }
    }
    value /= n;
    Ok(PolicyRisk {
        value,
        empty_cells,
        n_pi1,
        n_pi0,
    })
}

pub fn policy_risk(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    Ok(policy_risk_detailed(records)?.value)
}

fn arm_subset(records: &[EvalRecord], arm: u8) -> Result<Vec<(f64, u8)>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let subset: Vec<(f64, u8)> = records
        .iter()
        .filter(|r| r.t == arm)
        .map(|r| (r.outcomes.arm(arm), r.y))
        .collect();
    if subset.is_empty() {
        return Err(MetricsError::EmptyArm(arm));
    }
    Ok(subset)
}

/// Mann-Whitney AUC of the arm's prediction over records factually in that arm.
pub fn auc_per_arm(records: &[EvalRecord], arm: u8) -> Result<f64, MetricsError> {
    let mut subset = arm_subset(records, arm)?;
    let n_pos = subset.iter().filter(|(_, y)| *y == 1).count();
    let n_neg = subset.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc {
            arm,
            label: u8::from(n_pos > 0),
        });
    }
    subset.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks (1-based) give ties half credit
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < subset.len() {
        let mut j = i;
        while j + 1 < subset.len() && subset[j + 1].0 == subset[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let positives = subset[i..=j].iter().filter(|(_, y)| *y == 1).count();
        rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Accuracy of thresholding the arm's prediction at 0.5 over records factually in that arm.
pub fn acc_per_arm(records: &[EvalRecord], arm: u8) -> Result<f64, MetricsError> {
    let subset = arm_subset(records, arm)?;
    let correct = subset.iter().filter(|(p, y)| u8::from(*p >= 0.5) == *y).count();
    Ok(correct as f64 / subset.len() as f64)
}

/// Root mean squared error of the predicted effect against the oracle effect.
pub fn pehe(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut acc = 0.0;
    for (i, r) in records.iter().enumerate() {
        let o = r.oracle.as_ref().ok_or(MetricsError::MissingOracle(i))?;
        let err = (r.outcomes.y1_hat - r.outcomes.y0_hat) - o.effect();
        acc += err * err;
    }
    Ok((acc / records.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_pol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pehe: Option<f64>,
    pub n: usize,
    pub n_pi1: usize,
    pub n_pi0: usize,
    pub n_t0: usize,
    pub n_t1: usize,
    pub flags: Vec<String>,
}

/// All metrics; undefined ones are omitted and explained in `flags`.
pub fn evaluate(records: &[EvalRecord]) -> Result<MetricsReport, MetricsError> {
    let pr = policy_risk_detailed(records)?;
    let mut flags: Vec<String> = pr
        .empty_cells
        .iter()
        .map(|(pi, t)| format!("empty_cell_pi{pi}_t{t}"))
        .collect();
    let mut per_arm = |arm: u8, f: fn(&[EvalRecord], u8) -> Result<f64, MetricsError>, name: &str| match f(records, arm)
    {
        Ok(v) => Some(v),
        Err(e) => {
            flags.push(format!("{name}{arm}_undefined: {e}"));
            None
        }
    };
    let auc0 = per_arm(0, auc_per_arm, "auc");
    let auc1 = per_arm(1, auc_per_arm, "auc");
    let acc0 = per_arm(0, acc_per_arm, "acc");
    let acc1 = per_arm(1, acc_per_arm, "acc");
    let pehe = if records.iter().all(|r| r.oracle.is_some()) {
        Some(pehe(records)?)
    } else {
        None
    };
    let n_t1 = records.iter().filter(|r| r.t == 1).count();
    Ok(MetricsReport {
        r_pol: pr.value,
        auc0,
        auc1,
        acc0,
        acc1,
        pehe,
        n: records.len(),
        n_pi1: pr.n_pi1,
        n_pi0: pr.n_pi0,
        n_t0: records.len() - n_t1,
        n_t1,
        flags,
    })
}
