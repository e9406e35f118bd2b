//! Synthetic zoos, brute-force oracles and the experiment suites.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    expected_label_accuracy, run_campaign, true_victim, AttackBudget, CampaignMode,
    DEFAULT_QUERY_BUDGET,
};
use crate::endpoint::{LocalEndpoint, QueryEndpoint};
use crate::error::{Error, Result};
use crate::fingerprint::{fingerprint, worst_case_queries, EstimateRow, FrontierEstimate};
use crate::router::{goodput, DefenseConfig, Phase, Router, RouterConfig};
use crate::seeds::derive_seed;
use crate::zoo::{build_frontier, GranularityConfig, ModelProfile, ParetoFrontier, ZooFile};

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZooGenSpec {
    pub n: usize,
    pub acc_range: (f64, f64),
    pub lat_range: (f64, f64),
    pub granularity: GranularityConfig,
    pub seed: u64,
}

impl ZooGenSpec {
    /// Spans the whole grid: accuracies in `[acc_g, 1]`, latencies in
    /// `[lat_g, l_up]`.
    pub fn full_range(n: usize, granularity: GranularityConfig, seed: u64) -> Self {
        Self {
            n,
            acc_range: (granularity.acc_g, 1.0),
            lat_range: (granularity.lat_g, granularity.l_up),
            granularity,
            seed,
        }
    }
}

/// Draws `n` distinct indices from `lo..=hi` with consecutive gaps of at least
/// two steps, in ascending order.
fn separated_indices(rng: &mut ChaCha8Rng, lo: i64, hi: i64, n: usize) -> Option<Vec<i64>> {
    if n == 0 {
        return Some(Vec::new());
    }
    // Choosing n distinct values from a range shortened by n - 1 and then
    // shifting the i-th smallest by i spreads them at least two apart.
    let span = hi - lo + 1 - (n as i64 - 1);
    if span < n as i64 {
        return None;
    }
    let mut picked: Vec<i64> = index::sample(rng, span as usize, n)
        .into_iter()
        .map(|i| i as i64)
        .collect();
    picked.sort_unstable();
    Some(
        picked
            .into_iter()
            .enumerate()
            .map(|(i, v)| lo + v + i as i64)
            .collect(),
    )
}

/// Random grid-aligned frontier of exactly `spec.n` models.
pub fn gen_random_zoo(spec: &ZooGenSpec) -> Result<Vec<ModelProfile>> {
    let g = &spec.granularity;
    g.validate()?;
    let acc_lo = ((spec.acc_range.0 / g.acc_g) - 1e-9).ceil().max(1.0) as i64;
    let acc_hi = ((spec.acc_range.1.min(1.0) / g.acc_g) + 1e-9).floor() as i64;
    let lat_lo = ((spec.lat_range.0 / g.lat_g) - 1e-9).ceil().max(1.0) as i64;
    let lat_hi = ((spec.lat_range.1.min(g.l_up) / g.lat_g) + 1e-9).floor() as i64;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let infeasible = |axis: &str| {
        Error::InfeasibleSpec(format!(
            "cannot place {} grid-separated {axis} values in the requested range",
            spec.n
        ))
    };
    let accs = separated_indices(&mut rng, acc_lo, acc_hi, spec.n)
        .ok_or_else(|| infeasible("accuracy"))?;
    let lats =
        separated_indices(&mut rng, lat_lo, lat_hi, spec.n).ok_or_else(|| infeasible("latency"))?;
    Ok(accs
        .into_iter()
        .zip(lats)
        .enumerate()
        .map(|(i, (a, l))| ModelProfile {
            id: format!("m{i:04}"),
            name: format!("synthetic-{i}"),
            accuracy: g.acc_at(a),
            latency: g.lat_at(l),
            num_classes: 10,
        })
        .collect())
}

/// Brute-force frontier discovery. For every grid accuracy, from the top
/// down, latencies are tried in ascending order until one succeeds; a new
/// row is recorded whenever that minimum latency drops.
///
/// Only meaningful against an undefended server.
pub fn grid_scan_oracle<E: QueryEndpoint>(
    ep: &mut E,
    g: &GranularityConfig,
) -> Result<FrontierEstimate> {
    let mut rows: Vec<EstimateRow> = Vec::new();
    let mut queries = 0u64;
    for a in (1..=g.max_acc_steps()).rev() {
        let acc = g.acc_at(a);
        let mut found = None;
        for l in 1..=g.max_lat_steps() {
            queries += 1;
            if ep.infer(Some(acc), g.lat_at(l), 0)?.is_success() {
                found = Some(g.lat_at(l));
                break;
            }
        }
        if let Some(lat) = found {
            if rows.last().is_none_or(|r| lat < r.latency_ms) {
                rows.push(EstimateRow {
                    accuracy: acc,
                    latency_ms: lat,
                });
            }
        }
    }
    Ok(FrontierEstimate {
        rows,
        queries_spent: queries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Some(LinearFit {
        slope,
        intercept,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityConfig {
    pub sizes: Vec<usize>,
    pub trials: u32,
    pub granularity: GranularityConfig,
    pub seed: u64,
}

impl ComplexityConfig {
    /// Grid fine enough to hold a 1000-model frontier.
    pub fn default_granularity() -> GranularityConfig {
        GranularityConfig {
            acc_g: 1e-4,
            lat_g: 0.01,
            l_up: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub n: usize,
    pub trial: u32,
    pub queries: u64,
    pub acc_g: f64,
    pub lat_g: f64,
    pub seed: u64,
    /// Fingerprint output matched the generated frontier exactly.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub config: ComplexityConfig,
    pub rows: Vec<ComplexityRow>,
    pub means: Vec<(usize, f64)>,
    pub fit: Option<LinearFit>,
    pub bound_violations: u64,
}

impl ComplexityReport {
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let g = &c.granularity;
        let mut out = String::new();
        let sizes: Vec<String> = c.sizes.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(
            out,
            "# zoolab complexity schema_version={CSV_SCHEMA_VERSION}"
        );
        let _ = writeln!(
            out,
            "# seed={} sizes={} trials={} acc_g={} lat_g={} l_up_ms={}",
            c.seed,
            sizes.join(";"),
            c.trials,
            g.acc_g,
            g.lat_g,
            g.l_up
        );
        out.push_str("n,trial,queries,acc_g,lat_g,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.n, r.trial, r.queries, r.acc_g, r.lat_g, r.seed
            );
        }
        for (n, mean) in &self.means {
            let _ = writeln!(out, "# mean n={n} queries={mean}");
        }
        if let Some(fit) = &self.fit {
            let _ = writeln!(
                out,
                "# fit slope={} intercept={} r2={}",
                fit.slope, fit.intercept, fit.r2
            );
        }
        out
    }
}

/// Fingerprints `trials` random zoos of every size against an undefended
/// router and regresses mean query count on frontier size.
pub fn complexity_experiment(config: &ComplexityConfig) -> Result<ComplexityReport> {
    if config.sizes.is_empty() {
        return Err(Error::InfeasibleSpec("sizes must not be empty".into()));
    }
    let g = config.granularity;
    let jobs: Vec<(usize, u32)> = config
        .sizes
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let rows: Vec<ComplexityRow> = jobs
        .par_iter()
        .map(|&(n, trial)| -> Result<ComplexityRow> {
            let seed = derive_seed(config.seed, &[n as u64, trial as u64]);
            let zoo = gen_random_zoo(&ZooGenSpec::full_range(n, g, seed))?;
            let frontier = build_frontier(&zoo, &g)?;
            let mut ep =
                LocalEndpoint::new(Router::new(frontier.clone(), RouterConfig::plain(seed))?);
            let est = fingerprint(&mut ep, &g)?;
            let truth: Vec<(f64, f64)> = frontier
                .entries()
                .iter()
                .rev()
                .map(|m| (m.accuracy, m.latency))
                .collect();
            Ok(ComplexityRow {
                n,
                trial,
                queries: est.queries_spent,
                acc_g: g.acc_g,
                lat_g: g.lat_g,
                seed,
                exact: est.pairs() == truth,
            })
        })
        .collect::<Result<_>>()?;

    let means: Vec<(usize, f64)> = config
        .sizes
        .iter()
        .map(|&n| {
            let qs: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n)
                .map(|r| r.queries as f64)
                .collect();
            (n, qs.iter().sum::<f64>() / qs.len().max(1) as f64)
        })
        .collect();
    let xs: Vec<f64> = means.iter().map(|m| m.0 as f64).collect();
    let ys: Vec<f64> = means.iter().map(|m| m.1).collect();
    let bound_violations = rows
        .iter()
        .filter(|r| r.queries > worst_case_queries(r.n, &g))
        .count() as u64;
    Ok(ComplexityReport {
        config: config.clone(),
        fit: linear_fit(&xs, &ys),
        rows,
        means,
        bound_violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffConfig {
    pub budgets: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub trials: u32,
    pub query_budget: u64,
    pub seed: u64,
}

impl TradeoffConfig {
    pub fn new(budgets: Vec<f64>, epsilons: Vec<f64>, trials: u32, seed: u64) -> Self {
        Self {
            budgets,
            epsilons,
            trials,
            query_budget: DEFAULT_QUERY_BUDGET,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub latency_budget: f64,
    pub epsilon: f64,
    pub trial: u32,
    /// Served-and-satisfied fraction of the labeling queries.
    pub goodput: f64,
    pub victim_pmf: f64,
    pub expected_label_acc: f64,
    pub q_fingerprint: u64,
    pub q_label: u64,
    pub q_success: u64,
    pub q_fail: u64,
    pub seed: u64,
    /// Queries answered by a model slower than the query's own latency cap,
    /// over both phases. Always zero for a correct router.
    pub latency_violations: u64,
    pub served_total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffMean {
    pub latency_budget: f64,
    pub epsilon: f64,
    pub trials: u32,
    pub goodput: f64,
    pub victim_pmf: f64,
    pub expected_label_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub config: TradeoffConfig,
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffReport {
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        let mut out = String::new();
        let _ = writeln!(out, "# zoolab tradeoff schema_version={CSV_SCHEMA_VERSION}");
        let _ = writeln!(
            out,
            "# seed={} budgets={} epsilons={} trials={} query_budget={}",
            c.seed,
            join(&c.budgets),
            join(&c.epsilons),
            c.trials,
            c.query_budget
        );
        out.push_str("L,epsilon,trial,goodput,victim_pmf,expected_label_acc,q_fingerprint,q_label,q_success,q_fail,seed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.latency_budget,
                r.epsilon,
                r.trial,
                r.goodput,
                r.victim_pmf,
                r.expected_label_acc,
                r.q_fingerprint,
                r.q_label,
                r.q_success,
                r.q_fail,
                r.seed
            );
        }
        for m in self.means() {
            let _ = writeln!(
                out,
                "# mean L={} epsilon={} goodput={} victim_pmf={} expected_label_acc={}",
                m.latency_budget, m.epsilon, m.goodput, m.victim_pmf, m.expected_label_acc
            );
        }
        out
    }

    /// Per-(L, epsilon) means over trials, in configuration order.
    pub fn means(&self) -> Vec<TradeoffMean> {
        let c = &self.config;
        let mut out = Vec::new();
        for &l in &c.budgets {
            for &e in &c.epsilons {
                let rows: Vec<&TradeoffRow> = self.rows_for(l, e).collect();
                if rows.is_empty() {
                    continue;
                }
                let n = rows.len() as f64;
                let mean = |f: fn(&TradeoffRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                out.push(TradeoffMean {
                    latency_budget: l,
                    epsilon: e,
                    trials: rows.len() as u32,
                    goodput: mean(|r| r.goodput),
                    victim_pmf: mean(|r| r.victim_pmf),
                    expected_label_acc: mean(|r| r.expected_label_acc),
                });
            }
        }
        out
    }

    pub fn rows_for(
        &self,
        latency_budget: f64,
        epsilon: f64,
    ) -> impl Iterator<Item = &TradeoffRow> {
        self.rows
            .iter()
            .filter(move |r| r.latency_budget == latency_budget && r.epsilon == epsilon)
    }
}

/// One defended fingerprint campaign. A campaign whose fingerprinting finds
/// no victim within the budget, or runs out of queries, collects no labels:
/// it is recorded with zero labeling queries and zero goodput.
pub fn tradeoff_trial(
    frontier: &ParetoFrontier,
    g: &GranularityConfig,
    latency_budget: f64,
    epsilon: f64,
    query_budget: u64,
    seed: u64,
    trial: u32,
) -> Result<TradeoffRow> {
    let defense = DefenseConfig::for_frontier(frontier, epsilon)?;
    let router = Router::new(frontier.clone(), RouterConfig::defended(seed, defense))?;
    let mut ep = LocalEndpoint::new(router);
    let budget = AttackBudget::new(latency_budget, query_budget)?;
    let victim = true_victim(frontier, latency_budget);

    let campaign = run_campaign(&mut ep, &budget, g, CampaignMode::Fingerprint);
    let router = ep.into_router();
    let all = router.telemetry();
    let mut row = TradeoffRow {
        latency_budget,
        epsilon,
        trial,
        goodput: 0.0,
        victim_pmf: 0.0,
        expected_label_acc: 0.0,
        q_fingerprint: router.log().len() as u64,
        q_label: 0,
        q_success: 0,
        q_fail: 0,
        seed,
        latency_violations: all.latency_violations,
        served_total: all.served,
    };
    match campaign {
        Ok(res) => {
            let pmf = res.trigger_pmf();
            row.goodput = goodput(&router.log().phase(Phase::Labeling)).unwrap_or(0.0);
            row.victim_pmf = victim.and_then(|v| pmf.get(&v.id).copied()).unwrap_or(0.0);
            row.expected_label_acc = expected_label_accuracy(&pmf, frontier);
            row.q_fingerprint = res.queries_fingerprinting;
            row.q_label = res.queries_labeling;
            row.q_success = res.queries_successful;
            row.q_fail = res.queries_failed;
        }
        Err(Error::NoFeasibleVictim { .. } | Error::BudgetExhausted { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Defended campaigns for every (latency budget, epsilon, trial).
pub fn tradeoff_experiment(
    frontier: &ParetoFrontier,
    g: &GranularityConfig,
    config: &TradeoffConfig,
) -> Result<TradeoffReport> {
    let jobs: Vec<(f64, f64, u32)> = config
        .budgets
        .iter()
        .flat_map(|&l| {
            config
                .epsilons
                .iter()
                .flat_map(move |&e| (0..config.trials).map(move |t| (l, e, t)))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(l, e, t)| {
            let seed = derive_seed(config.seed, &[l.to_bits(), e.to_bits(), t as u64]);
            tradeoff_trial(frontier, g, l, e, config.query_budget, seed, t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TradeoffReport {
        config: config.clone(),
        rows,
    })
}

/// Floor on the agreement rate of two classifiers with accuracies `a_v` and
/// `a_e`: both are right on at least `a_v + a_e - 1` of the inputs.
pub fn min_fidelity(a_v: f64, a_e: f64) -> Result<f64> {
    for a in [a_v, a_e] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Domain(format!("accuracy {a} outside [0, 1]")));
        }
    }
    Ok((a_v + a_e - 1.0).max(0.0))
}

/// A hand-profiled 12-model image-classification zoo. Latencies span 18.271 ms
/// and the 13 ms budget lands on the seventh-fastest model.
pub fn reference_zoo() -> ZooFile {
    const MODELS: [(&str, f64, f64); 12] = [
        ("mobilenet_v3_small", 0.603, 2.300),
        ("mobilenet_v2", 0.655, 5.480),
        ("resnet18", 0.712, 6.925),
        ("resnet34", 0.748, 8.410),
        ("resnet50", 0.781, 10.150),
        ("resnet101", 0.822, 12.640),
        ("resnet152", 0.846, 14.220),
        ("wide_resnet50_2", 0.868, 15.870),
        ("densenet121", 0.884, 17.050),
        ("densenet169", 0.897, 18.330),
        ("wide_resnet101_2", 0.909, 19.610),
        ("densenet161", 0.921, 20.571),
    ];
    ZooFile {
        models: MODELS
            .iter()
            .enumerate()
            .map(|(i, &(name, accuracy, latency))| ModelProfile {
                id: format!("z{:02}", i + 1),
                name: name.to_string(),
                accuracy,
                latency,
                num_classes: 10,
            })
            .collect(),
        granularity: GranularityConfig {
            acc_g: 0.001,
            lat_g: 0.001,
            l_up: 32.0,
        },
    }
}
