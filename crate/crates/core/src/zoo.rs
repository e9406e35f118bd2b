//! Model zoo registry, Pareto frontier construction and feasibility sets.
//!
//! A frontier is the set of models that no other model beats on both axes at
//! once (strictly higher accuracy *and* strictly lower latency). Everything
//! downstream, routing, fingerprinting and the defense, only ever looks at
//! frontier entries.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack used when comparing specs against profiled values. Grid
/// values such as `822 * 0.001` are not always bit-identical to a parsed
/// `0.822`.
pub const CMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub id: String,
    pub name: String,
    pub accuracy: f64,
    #[serde(rename = "latency_ms")]
    pub latency: f64,
    pub num_classes: u32,
}

impl ModelProfile {
    pub fn new(id: impl Into<String>, accuracy: f64, latency: f64) -> Self {
        let id = id.into();
        Self {
            name: id.clone(),
            id,
            accuracy,
            latency,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidProfile {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(bad("accuracy must lie in [0, 1]"));
        }
        if !(self.latency.is_finite() && self.latency > 0.0) {
            return Err(bad("latency must be a positive finite number"));
        }
        if self.num_classes < 2 {
            return Err(bad("num_classes must be at least 2"));
        }
        Ok(())
    }
}

/// Smallest spec increments the serving system distinguishes, plus the
/// latency ceiling `l_up`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GranularityConfig {
    pub acc_g: f64,
    pub lat_g: f64,
    #[serde(rename = "l_up_ms")]
    pub l_up: f64,
}

impl GranularityConfig {
    pub fn new(acc_g: f64, lat_g: f64, l_up: f64) -> Result<Self> {
        let g = Self { acc_g, lat_g, l_up };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(positive(self.acc_g) && positive(self.lat_g) && positive(self.l_up)) {
            return Err(Error::InvalidGranularity(
                "acc_g, lat_g and l_up must be positive".into(),
            ));
        }
        if self.acc_g > 1.0 {
            return Err(Error::InvalidGranularity("acc_g must be at most 1".into()));
        }
        if self.lat_g > self.l_up {
            return Err(Error::InvalidGranularity(
                "lat_g must not exceed l_up".into(),
            ));
        }
        Ok(())
    }

    /// Nearest accuracy grid index.
    pub fn acc_steps(&self, acc: f64) -> i64 {
        (acc / self.acc_g).round() as i64
    }

    pub fn lat_steps(&self, lat: f64) -> i64 {
        (lat / self.lat_g).round() as i64
    }

    pub fn acc_at(&self, steps: i64) -> f64 {
        grid_value(steps, self.acc_g)
    }

    pub fn lat_at(&self, steps: i64) -> f64 {
        grid_value(steps, self.lat_g)
    }

    pub fn snap_acc(&self, acc: f64) -> f64 {
        self.acc_at(self.acc_steps(acc))
    }

    pub fn snap_lat(&self, lat: f64) -> f64 {
        self.lat_at(self.lat_steps(lat))
    }

    /// Smallest grid accuracy not below `acc`. Client minimums are rounded
    /// this way so snapping never loosens a request.
    pub fn snap_acc_up(&self, acc: f64) -> f64 {
        self.acc_at((acc / self.acc_g - 1e-6).ceil() as i64)
    }

    /// Largest grid latency not above `lat`.
    pub fn snap_lat_down(&self, lat: f64) -> f64 {
        self.lat_at((lat / self.lat_g + 1e-6).floor() as i64)
    }

    /// Grid index of accuracy 1.
    pub fn max_acc_steps(&self) -> i64 {
        self.acc_steps(1.0)
    }

    /// Grid index of `l_up`.
    pub fn max_lat_steps(&self) -> i64 {
        self.lat_steps(self.l_up)
    }
}

// When the step is the reciprocal of an integer (0.001, 0.25, ...) divide by
// that integer: `822.0 / 1000.0` is the correctly rounded 0.822, while
// `822.0 * 0.001` is not.
fn grid_value(steps: i64, step: f64) -> f64 {
    let inv = 1.0 / step;
    if (inv - inv.round()).abs() < 1e-9 * inv.max(1.0) {
        steps as f64 / inv.round()
    } else {
        steps as f64 * step
    }
}

/// `a` strictly beats `b` on both axes.
pub fn dominates(a: &ModelProfile, b: &ModelProfile) -> bool {
    a.accuracy > b.accuracy && a.latency < b.latency
}

/// Dominance-maximal subset of `models`, sorted by latency then accuracy.
///
/// Exact duplicates in (accuracy, latency) collapse onto the entry with the
/// smallest id. No granularity checks are applied here.
pub fn pareto_set(models: &[ModelProfile]) -> Vec<ModelProfile> {
    let mut sorted: Vec<&ModelProfile> = models.iter().collect();
    sorted.sort_by(|a, b| {
        a.latency
            .total_cmp(&b.latency)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(a.id.cmp(&b.id))
    });

    let mut out: Vec<ModelProfile> = Vec::new();
    // Best accuracy among models with strictly smaller latency.
    let mut best_before = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let lat = sorted[i].latency;
        let mut j = i;
        let mut group_best = f64::NEG_INFINITY;
        while j < sorted.len() && sorted[j].latency == lat {
            let m = sorted[j];
            group_best = group_best.max(m.accuracy);
            let dominated = best_before > m.accuracy;
            // Same (accuracy, latency) as its sort predecessor, which has the smaller id.
            let duplicate = j > i && sorted[j - 1].accuracy == m.accuracy;
            if !dominated && !duplicate {
                out.push(m.clone());
            }
            j += 1;
        }
        best_before = best_before.max(group_best);
        i = j;
    }
    out.sort_by(|a, b| {
        a.latency
            .total_cmp(&b.latency)
            .then(a.accuracy.total_cmp(&b.accuracy))
    });
    out
}

/// Validated Pareto frontier: strictly ascending in latency and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    entries: Vec<ModelProfile>,
    granularity: Option<GranularityConfig>,
}

impl ParetoFrontier {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            granularity: None,
        }
    }

    pub fn entries(&self) -> &[ModelProfile] {
        &self.entries
    }

    pub fn granularity(&self) -> Option<&GranularityConfig> {
        self.granularity.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ModelProfile> {
        self.entries.iter().find(|m| m.id == id)
    }

    /// Index range of the members satisfying `accuracy >= acc_min` and
    /// `latency <= lat_max`. Both axes increase together, so the members
    /// always form a contiguous run.
    pub fn feasible_range(&self, acc_min: f64, lat_max: f64) -> std::ops::Range<usize> {
        let lo = self
            .entries
            .partition_point(|m| m.accuracy < acc_min - CMP_TOL);
        let hi = self
            .entries
            .partition_point(|m| m.latency <= lat_max + CMP_TOL);
        lo..hi.max(lo)
    }

    /// Latency span of the frontier.
    pub fn latency_range(&self) -> Option<(f64, f64)> {
        Some((self.entries.first()?.latency, self.entries.last()?.latency))
    }
}

/// Builds the frontier of `models` and checks it against `g`.
pub fn build_frontier(models: &[ModelProfile], g: &GranularityConfig) -> Result<ParetoFrontier> {
    g.validate()?;
    let mut seen = HashSet::new();
    for m in models {
        m.validate()?;
        if !seen.insert(m.id.as_str()) {
            return Err(Error::DuplicateId(m.id.clone()));
        }
    }
    let entries = pareto_set(models);
    for m in &entries {
        if m.latency > g.l_up + CMP_TOL {
            return Err(Error::GranularityViolation(format!(
                "model `{}` latency {} ms exceeds l_up {} ms",
                m.id, m.latency, g.l_up
            )));
        }
    }
    for pair in entries.windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        // A gap of exactly one step is a violation; the factor absorbs float
        // noise in differences of grid values.
        let sep = 1.0 + 1e-6;
        if hi.accuracy - lo.accuracy <= g.acc_g * sep {
            return Err(Error::GranularityViolation(format!(
                "models `{}` and `{}` are within acc_g = {} in accuracy",
                lo.id, hi.id, g.acc_g
            )));
        }
        if hi.latency - lo.latency <= g.lat_g * sep {
            return Err(Error::GranularityViolation(format!(
                "models `{}` and `{}` are within lat_g = {} ms in latency",
                lo.id, hi.id, g.lat_g
            )));
        }
    }
    Ok(ParetoFrontier {
        entries,
        granularity: Some(*g),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilitySet {
    pub members: Vec<ModelProfile>,
}

impl FeasibilitySet {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.id.as_str()).collect()
    }
}

pub fn feasibility_set(frontier: &ParetoFrontier, acc_req: f64, lat_req: f64) -> FeasibilitySet {
    FeasibilitySet {
        members: frontier.entries[frontier.feasible_range(acc_req, lat_req)].to_vec(),
    }
}

/// On-disk zoo description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooFile {
    pub models: Vec<ModelProfile>,
    pub granularity: GranularityConfig,
}

impl ZooFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn frontier(&self) -> Result<ParetoFrontier> {
        build_frontier(&self.models, &self.granularity)
    }
}
