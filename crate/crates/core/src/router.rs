//! The model-less serving engine.
//!
//! Clients describe what they need (minimum accuracy, maximum latency) and
//! the router picks uniformly among the frontier models that qualify. With
//! the defense enabled, both specs are perturbed with fresh Laplace noise per
//! query before the feasibility set is formed, while the client's original
//! latency cap stays a hard constraint.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{LaplaceParams, NoiseSource};
use crate::seeds::{derive_seed, fnv1a, splitmix64, unit_interval};
use crate::zoo::{ModelProfile, ParetoFrontier, CMP_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    /// Minimum accuracy; absent means 0.
    pub acc_req: Option<f64>,
    pub lat_req: f64,
    pub input: u64,
}

impl QuerySpec {
    pub fn new(acc_req: Option<f64>, lat_req: f64, input: u64) -> Self {
        Self {
            acc_req,
            lat_req,
            input,
        }
    }

    pub fn acc_min(&self) -> f64 {
        self.acc_req.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.acc_req {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidQuery(format!("acc_req {a} outside [0, 1]")));
            }
        }
        if self.lat_req.is_nan() || self.lat_req <= 0.0 {
            return Err(Error::InvalidQuery(format!(
                "lat_req must be positive, got {}",
                self.lat_req
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta_acc: f64,
    pub delta_lat: f64,
}

impl DefenseConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            epsilon: f64::INFINITY,
            delta_acc: 1.0,
            delta_lat: 1.0,
        }
    }

    /// Defense with sensitivities taken from the frontier itself.
    pub fn for_frontier(frontier: &ParetoFrontier, epsilon: f64) -> Result<Self> {
        let (delta_acc, delta_lat) = compute_sensitivities(frontier)?;
        let d = Self {
            enabled: true,
            epsilon,
            delta_acc,
            delta_lat,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.epsilon) {
            return Err(Error::InvalidDefense(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !positive(self.delta_acc) || !positive(self.delta_lat) {
            return Err(Error::InvalidDefense(format!(
                "sensitivities must be positive, got ({}, {})",
                self.delta_acc, self.delta_lat
            )));
        }
        Ok(())
    }

    fn acc_noise(&self) -> LaplaceParams {
        LaplaceParams::from_sensitivity(self.delta_acc, self.epsilon)
            .expect("validated defense config")
    }

    fn lat_noise(&self) -> LaplaceParams {
        LaplaceParams::from_sensitivity(self.delta_lat, self.epsilon)
            .expect("validated defense config")
    }
}

/// Accuracy sensitivity is the whole [0, 1] range; latency sensitivity is the
/// frontier's latency span.
pub fn compute_sensitivities(frontier: &ParetoFrontier) -> Result<(f64, f64)> {
    let (lo, hi) = frontier.latency_range().ok_or(Error::EmptyFrontier)?;
    Ok((1.0, hi - lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fingerprinting,
    Labeling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServeStatus {
    Served,
    InfeasibleSetError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeOutcome {
    pub status: ServeStatus,
    pub served_model_id: Option<String>,
    pub served_latency: Option<f64>,
    pub label: Option<u32>,
    pub spec_satisfied: bool,
    /// Perturbed specs actually used for routing. Telemetry only.
    pub noisy_acc: Option<f64>,
    pub noisy_lat: Option<f64>,
}

impl ServeOutcome {
    fn infeasible(noisy: Option<(f64, f64)>) -> Self {
        Self {
            status: ServeStatus::InfeasibleSetError,
            served_model_id: None,
            served_latency: None,
            label: None,
            spec_satisfied: false,
            noisy_acc: noisy.map(|n| n.0),
            noisy_lat: noisy.map(|n| n.1),
        }
    }

    pub fn is_served(&self) -> bool {
        self.status == ServeStatus::Served
    }
}

/// Stand-in for running a real network: the model answers the ground-truth
/// class with probability equal to its accuracy and otherwise a uniformly
/// chosen wrong class. Predictions are a fixed function of (model, input).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulatedOracle {
    pub dataset_seed: u64,
}

impl SimulatedOracle {
    pub fn new(dataset_seed: u64) -> Self {
        Self { dataset_seed }
    }

    pub fn ground_truth(&self, input: u64, num_classes: u32) -> u32 {
        (derive_seed(self.dataset_seed, &[input]) % num_classes as u64) as u32
    }

    pub fn predict(&self, model: &ModelProfile, input: u64) -> u32 {
        let k = model.num_classes.max(2);
        let truth = self.ground_truth(input, k);
        let h = derive_seed(self.dataset_seed, &[fnv1a(&model.id), input]);
        if unit_interval(h) < model.accuracy {
            truth
        } else {
            let offset = 1 + (splitmix64(h) % (k as u64 - 1)) as u32;
            (truth + offset) % k
        }
    }
}

fn pick<'a>(
    frontier: &'a ParetoFrontier,
    range: std::ops::Range<usize>,
    rng: &mut impl Rng,
) -> Option<&'a ModelProfile> {
    if range.is_empty() {
        return None;
    }
    Some(&frontier.entries()[range.start + rng.random_range(0..range.len())])
}

fn served(
    model: &ModelProfile,
    label: u32,
    satisfied: bool,
    noisy: Option<(f64, f64)>,
) -> ServeOutcome {
    ServeOutcome {
        status: ServeStatus::Served,
        served_model_id: Some(model.id.clone()),
        served_latency: Some(model.latency),
        label: Some(label),
        spec_satisfied: satisfied,
        noisy_acc: noisy.map(|n| n.0),
        noisy_lat: noisy.map(|n| n.1),
    }
}

/// Undefended routing: uniform pick from the feasibility set.
pub fn serve_plain(
    frontier: &ParetoFrontier,
    q: &QuerySpec,
    oracle: &SimulatedOracle,
    rng: &mut impl Rng,
) -> ServeOutcome {
    let range = frontier.feasible_range(q.acc_min(), q.lat_req);
    match pick(frontier, range, rng) {
        Some(m) => served(m, oracle.predict(m, q.input), true, None),
        None => ServeOutcome::infeasible(None),
    }
}

/// Defended routing with the noise realisations supplied by the caller.
///
/// Perturbed specs are snapped to the frontier's grid (when it has one)
/// before use. Members must satisfy the perturbed accuracy, the perturbed
/// latency, and the original latency cap.
pub fn serve_with_noise(
    frontier: &ParetoFrontier,
    q: &QuerySpec,
    y_acc: f64,
    y_lat: f64,
    oracle: &SimulatedOracle,
    rng: &mut impl Rng,
) -> ServeOutcome {
    let mut noisy_acc = q.acc_min() + y_acc;
    let mut noisy_lat = q.lat_req + y_lat;
    if let Some(g) = frontier.granularity() {
        if noisy_acc.is_finite() {
            noisy_acc = g.snap_acc(noisy_acc);
        }
        if noisy_lat.is_finite() {
            noisy_lat = g.snap_lat(noisy_lat);
        }
    }
    let noisy = Some((noisy_acc, noisy_lat));
    let range = frontier.feasible_range(noisy_acc, noisy_lat.min(q.lat_req));
    match pick(frontier, range, rng) {
        Some(m) => {
            let satisfied = m.accuracy >= q.acc_min() - CMP_TOL;
            served(m, oracle.predict(m, q.input), satisfied, noisy)
        }
        None => ServeOutcome::infeasible(noisy),
    }
}

/// Defended routing drawing one accuracy and one latency sample from `noise`.
pub fn serve_defended(
    frontier: &ParetoFrontier,
    q: &QuerySpec,
    d: &DefenseConfig,
    noise: &mut NoiseSource,
    oracle: &SimulatedOracle,
    rng: &mut impl Rng,
) -> ServeOutcome {
    let y_acc = noise.sample(&d.acc_noise());
    let y_lat = noise.sample(&d.lat_noise());
    serve_with_noise(frontier, q, y_acc, y_lat, oracle, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeRecord {
    pub query: QuerySpec,
    pub outcome: ServeOutcome,
    pub phase: Phase,
}

/// Append-only record of every query the router answered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServeLog {
    records: Vec<ServeRecord>,
}

impl ServeLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ServeRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[ServeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phase(&self, phase: Phase) -> ServeLog {
        ServeLog {
            records: self
                .records
                .iter()
                .filter(|r| r.phase == phase)
                .cloned()
                .collect(),
        }
    }

    pub fn summary(&self) -> TelemetrySummary {
        let mut s = TelemetrySummary::default();
        for r in &self.records {
            s.total += 1;
            match r.outcome.status {
                ServeStatus::Served => {
                    s.served += 1;
                    if r.outcome.spec_satisfied {
                        s.satisfied += 1;
                    }
                    if r.outcome.served_latency.unwrap_or(0.0) > r.query.lat_req + CMP_TOL {
                        s.latency_violations += 1;
                    }
                    if let Some(id) = &r.outcome.served_model_id {
                        *s.per_model.entry(id.clone()).or_default() += 1;
                    }
                }
                ServeStatus::InfeasibleSetError => s.failed += 1,
            }
        }
        s
    }
}

/// Served-and-satisfied queries over all queries, failures included.
pub fn goodput(log: &ServeLog) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let s = log.summary();
    Ok(s.satisfied as f64 / s.total as f64)
}

/// Aggregate counters exposed to experiment clients.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetrySummary {
    pub total: u64,
    pub served: u64,
    pub satisfied: u64,
    pub failed: u64,
    pub latency_violations: u64,
    pub per_model: BTreeMap<String, u64>,
}

impl TelemetrySummary {
    /// Counters accumulated since `earlier`.
    pub fn since(&self, earlier: &TelemetrySummary) -> TelemetrySummary {
        let per_model = self
            .per_model
            .iter()
            .map(|(id, &n)| {
                (
                    id.clone(),
                    n - earlier.per_model.get(id).copied().unwrap_or(0),
                )
            })
            .filter(|&(_, n)| n > 0)
            .collect();
        TelemetrySummary {
            total: self.total - earlier.total,
            served: self.served - earlier.served,
            satisfied: self.satisfied - earlier.satisfied,
            failed: self.failed - earlier.failed,
            latency_violations: self.latency_violations - earlier.latency_violations,
            per_model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterConfig {
    pub seed: u64,
    pub dataset_seed: u64,
    pub defense: DefenseConfig,
}

impl RouterConfig {
    pub fn plain(seed: u64) -> Self {
        Self {
            seed,
            dataset_seed: 0,
            defense: DefenseConfig::disabled(),
        }
    }

    pub fn defended(seed: u64, defense: DefenseConfig) -> Self {
        Self {
            seed,
            dataset_seed: 0,
            defense,
        }
    }
}

/// Stateful router: owns the selection stream, the per-query noise streams
/// and the serve log.
#[derive(Debug, Clone)]
pub struct Router {
    frontier: ParetoFrontier,
    config: RouterConfig,
    oracle: SimulatedOracle,
    select_rng: ChaCha8Rng,
    noise_seed: u64,
    counter: u64,
    phase: Phase,
    log: ServeLog,
}

impl Router {
    pub fn new(frontier: ParetoFrontier, config: RouterConfig) -> Result<Self> {
        config.defense.validate()?;
        Ok(Self {
            frontier,
            oracle: SimulatedOracle::new(config.dataset_seed),
            select_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0])),
            noise_seed: derive_seed(config.seed, &[1]),
            counter: 0,
            phase: Phase::Labeling,
            log: ServeLog::new(),
            config,
        })
    }

    pub fn frontier(&self) -> &ParetoFrontier {
        &self.frontier
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn log(&self) -> &ServeLog {
        &self.log
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn telemetry(&self) -> TelemetrySummary {
        self.log.summary()
    }

    /// Request specs rounded onto the grid, in the direction that never
    /// loosens them.
    pub fn snap_query(&self, q: &QuerySpec) -> QuerySpec {
        let Some(g) = self.frontier.granularity() else {
            return *q;
        };
        let lat_req = if q.lat_req.is_finite() {
            g.snap_lat_down(q.lat_req)
        } else {
            q.lat_req
        };
        QuerySpec {
            acc_req: q.acc_req.map(|a| g.snap_acc_up(a).min(1.0)),
            lat_req,
            input: q.input,
        }
    }

    pub fn serve(&mut self, q: &QuerySpec) -> Result<ServeOutcome> {
        q.validate()?;
        let q = self.snap_query(q);
        let outcome = if self.config.defense.enabled {
            let mut noise = NoiseSource::new(self.noise_seed, self.counter);
            serve_defended(
                &self.frontier,
                &q,
                &self.config.defense,
                &mut noise,
                &self.oracle,
                &mut self.select_rng,
            )
        } else {
            serve_plain(&self.frontier, &q, &self.oracle, &mut self.select_rng)
        };
        self.counter += 1;
        self.log.push(ServeRecord {
            query: q,
            outcome: outcome.clone(),
            phase: self.phase,
        });
        Ok(outcome)
    }
}
