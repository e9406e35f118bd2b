//! Post-fingerprinting extraction campaign and the naive baseline.
//!
//! The extraction itself (training a copy on the collected labels) is
//! replaced by two surrogates: the PMF-weighted accuracy of whichever models
//! produced the labels, and the closed-form agreement rate between two
//! independent classifiers of known accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::endpoint::{InferReply, Metered, QueryEndpoint};
use crate::error::{Error, Result};
use crate::fingerprint::{fingerprint_with, FingerprintOptions, FrontierEstimate};
use crate::router::{Phase, TelemetrySummary};
use crate::zoo::{GranularityConfig, ModelProfile, ParetoFrontier, CMP_TOL};

/// Query budget used throughout the evaluation.
pub const DEFAULT_QUERY_BUDGET: u64 = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub latency_budget: f64,
    pub query_budget: u64,
}

impl AttackBudget {
    pub fn new(latency_budget: f64, query_budget: u64) -> Result<Self> {
        if !(latency_budget.is_finite() && latency_budget > 0.0) {
            return Err(Error::InvalidQuery(format!(
                "latency budget must be positive, got {latency_budget}"
            )));
        }
        if query_budget == 0 {
            return Err(Error::InvalidQuery(
                "query budget must be at least 1".into(),
            ));
        }
        Ok(Self {
            latency_budget,
            query_budget,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VictimSpec {
    pub acc_spec: f64,
    pub lat_spec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignMode {
    Fingerprint,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub mode: CampaignMode,
    pub estimate: Option<FrontierEstimate>,
    pub victim: Option<VictimSpec>,
    pub labeled_examples: Vec<(u64, u32)>,
    /// Served labeling queries per model id. Empty when the server exposes no
    /// telemetry.
    pub trigger_histogram: BTreeMap<String, u64>,
    pub queries_fingerprinting: u64,
    pub queries_labeling: u64,
    pub queries_successful: u64,
    pub queries_failed: u64,
    /// Labeling queries answered by a model meeting the sent specs, when
    /// telemetry is available.
    pub labeling_satisfied: Option<u64>,
}

impl CampaignResult {
    pub fn trigger_pmf(&self) -> BTreeMap<String, f64> {
        normalize(&self.trigger_histogram)
    }

    pub fn labeling_goodput(&self) -> Option<f64> {
        let satisfied = self.labeling_satisfied?;
        (self.queries_labeling > 0).then(|| satisfied as f64 / self.queries_labeling as f64)
    }
}

/// Row with the largest latency within the budget. Among rows sharing that
/// latency the first discovered (highest accuracy) wins.
pub fn select_victim(estimate: &FrontierEstimate, budget: &AttackBudget) -> Result<VictimSpec> {
    let mut best: Option<VictimSpec> = None;
    for row in &estimate.rows {
        if row.latency_ms > budget.latency_budget + CMP_TOL {
            continue;
        }
        if best.is_none_or(|b| row.latency_ms > b.lat_spec) {
            best = Some(VictimSpec {
                acc_spec: row.accuracy,
                lat_spec: row.latency_ms,
            });
        }
    }
    best.ok_or(Error::NoFeasibleVictim {
        latency_budget: budget.latency_budget,
    })
}

/// The frontier model an attacker with this latency budget is after.
pub fn true_victim(frontier: &ParetoFrontier, latency_budget: f64) -> Option<&ModelProfile> {
    frontier
        .entries()
        .iter()
        .rev()
        .find(|m| m.latency <= latency_budget + CMP_TOL)
}

pub fn run_campaign<E: QueryEndpoint>(
    ep: &mut E,
    budget: &AttackBudget,
    g: &GranularityConfig,
    mode: CampaignMode,
) -> Result<CampaignResult> {
    run_campaign_with(ep, budget, g, mode, FingerprintOptions::default())
}

pub fn run_campaign_with<E: QueryEndpoint>(
    ep: &mut E,
    budget: &AttackBudget,
    g: &GranularityConfig,
    mode: CampaignMode,
    opts: FingerprintOptions,
) -> Result<CampaignResult> {
    let mut ep = Metered::with_limit(ep, budget.query_budget);

    let (estimate, acc_spec, lat_spec) = match mode {
        CampaignMode::Fingerprint => {
            ep.begin_phase(Phase::Fingerprinting);
            let estimate = fingerprint_with(&mut ep, g, opts)?;
            if ep.remaining() == Some(0) {
                return Err(Error::BudgetExhausted {
                    spent: ep.spent(),
                    budget: budget.query_budget,
                });
            }
            let victim = select_victim(&estimate, budget)?;
            (Some(estimate), Some(victim.acc_spec), victim.lat_spec)
        }
        // No accuracy spec: the server falls back to 0.
        CampaignMode::Naive => (None, None, budget.latency_budget),
    };
    let queries_fingerprinting = ep.spent();

    ep.begin_phase(Phase::Labeling);
    let before = telemetry_snapshot(&mut ep)?;
    let mut labeled_examples = Vec::new();
    let mut queries_failed = 0;
    let remaining = budget.query_budget - queries_fingerprinting;
    for i in 0..remaining {
        let input = i + 1;
        match ep.infer(acc_spec, lat_spec, input)? {
            InferReply::Label(label) => labeled_examples.push((input, label)),
            InferReply::Infeasible => queries_failed += 1,
        }
    }
    let after = telemetry_snapshot(&mut ep)?;
    let delta = match (after, before) {
        (Some(a), Some(b)) => Some(a.since(&b)),
        _ => None,
    };

    Ok(CampaignResult {
        mode,
        victim: estimate.as_ref().map(|_| VictimSpec {
            acc_spec: acc_spec.unwrap_or(0.0),
            lat_spec,
        }),
        estimate,
        queries_successful: labeled_examples.len() as u64,
        labeled_examples,
        trigger_histogram: delta
            .as_ref()
            .map(|d| d.per_model.clone())
            .unwrap_or_default(),
        labeling_satisfied: delta.map(|d| d.satisfied),
        queries_fingerprinting,
        queries_labeling: remaining,
        queries_failed,
    })
}

fn telemetry_snapshot<E: QueryEndpoint>(ep: &mut E) -> Result<Option<TelemetrySummary>> {
    match ep.telemetry() {
        Ok(t) => Ok(Some(t)),
        Err(Error::TelemetryUnavailable) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn normalize(hist: &BTreeMap<String, u64>) -> BTreeMap<String, f64> {
    let total: u64 = hist.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    hist.iter()
        .map(|(id, &n)| (id.clone(), n as f64 / total as f64))
        .collect()
}

/// PMF-weighted accuracy of the models that produced the labels. Ids missing
/// from the frontier contribute nothing; an empty PMF yields 0.
pub fn expected_label_accuracy(pmf: &BTreeMap<String, f64>, frontier: &ParetoFrontier) -> f64 {
    pmf.iter()
        .filter_map(|(id, p)| frontier.get(id).map(|m| p * m.accuracy))
        .sum()
}

/// Probability that two independent `k`-way classifiers with accuracies
/// `a_v` and `a_e` agree, when each errs uniformly over the wrong classes.
pub fn expected_agreement(a_v: f64, a_e: f64, k: u32) -> Result<f64> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least two classes, got {k}")));
    }
    for a in [a_v, a_e] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Domain(format!("accuracy {a} outside [0, 1]")));
        }
    }
    Ok(a_v * a_e + (1.0 - a_v) * (1.0 - a_e) / (k - 1) as f64)
}
