//! Frontier fingerprinting by nested binary search over the grid.
//!
//! Starting from the most permissive box `[0, 1] x (0, l_up]`, each round
//! finds the highest accuracy still servable under the current latency cap,
//! then the smallest latency at which that accuracy is servable. Both values
//! belong to one frontier model; the box is then shrunk to just below that
//! model and the search repeats. Only success/error bits are used.
//!
//! Searches run on integer grid indices. This is the same procedure as a
//! continuous bisection whose midpoints are snapped down to the grid, minus
//! the floating-point drift.

use serde::{Deserialize, Serialize};

use crate::endpoint::{Metered, QueryEndpoint};
use crate::error::Result;
use crate::zoo::GranularityConfig;

/// Input id sent with every probe; probe labels are discarded.
pub const PROBE_INPUT_ID: u64 = 0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintOptions {
    /// Bound the latency search by the current round's cap instead of `l_up`.
    pub tight_latency_search: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub accuracy: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierEstimate {
    /// Discovery order: highest accuracy first.
    pub rows: Vec<EstimateRow>,
    pub queries_spent: u64,
}

impl FrontierEstimate {
    /// Whether rows strictly decrease in both coordinates, as they always do
    /// against an undefended server.
    pub fn is_consistent(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].accuracy < w[0].accuracy && w[1].latency_ms < w[0].latency_ms)
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .map(|r| (r.accuracy, r.latency_ms))
            .collect()
    }
}

fn probe<E: QueryEndpoint>(
    ep: &mut E,
    g: &GranularityConfig,
    acc_steps: i64,
    lat_steps: i64,
) -> Result<bool> {
    Ok(ep
        .infer(
            Some(g.acc_at(acc_steps)),
            g.lat_at(lat_steps),
            PROBE_INPUT_ID,
        )?
        .is_success())
}

/// Largest servable accuracy index in `[0, acc_up]` under latency index
/// `lat_up`; -1 when nothing is servable.
fn max_acc_steps<E: QueryEndpoint>(
    ep: &mut E,
    g: &GranularityConfig,
    acc_up: i64,
    lat_up: i64,
) -> Result<i64> {
    let (mut low, mut hi) = (0i64, acc_up + 1);
    while hi - low >= 1 {
        let mid = (low + hi).div_euclid(2);
        if probe(ep, g, mid, lat_up)? {
            low = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(low - 1)
}

/// Smallest servable latency index in `[1, lat_up]` for accuracy index
/// `acc`; `lat_up + 1` when no probe succeeds.
fn min_lat_steps<E: QueryEndpoint>(
    ep: &mut E,
    g: &GranularityConfig,
    acc: i64,
    lat_up: i64,
) -> Result<i64> {
    // Latencies are strictly positive, so the smallest candidate is one step.
    let (mut low, mut hi) = (1i64, lat_up + 1);
    while hi - low >= 1 {
        let mid = (low + hi).div_euclid(2);
        if probe(ep, g, acc, mid)? {
            hi = mid;
        } else {
            low = mid + 1;
        }
    }
    Ok(low)
}

/// Highest frontier accuracy among models with latency at most `lat_up`,
/// searched below `acc_up`. Returns a value below `acc_g` (namely `-acc_g`)
/// when no such model exists.
pub fn find_max_acc<E: QueryEndpoint>(
    ep: &mut E,
    acc_up: f64,
    lat_up: f64,
    g: &GranularityConfig,
) -> Result<f64> {
    let acc_up = g.acc_steps(acc_up).min(g.max_acc_steps());
    let steps = max_acc_steps(ep, g, acc_up, g.lat_steps(lat_up))?;
    Ok(g.acc_at(steps))
}

/// Latency of the fastest model with accuracy at least `acc`, searched over
/// `(0, l_up]`.
pub fn find_lat<E: QueryEndpoint>(ep: &mut E, acc: f64, g: &GranularityConfig) -> Result<f64> {
    let steps = min_lat_steps(ep, g, g.acc_steps(acc), g.max_lat_steps())?;
    Ok(g.lat_at(steps))
}

pub fn fingerprint<E: QueryEndpoint>(
    ep: &mut E,
    g: &GranularityConfig,
) -> Result<FrontierEstimate> {
    fingerprint_with(ep, g, FingerprintOptions::default())
}

pub fn fingerprint_with<E: QueryEndpoint>(
    ep: &mut E,
    g: &GranularityConfig,
    opts: FingerprintOptions,
) -> Result<FrontierEstimate> {
    let mut ep = Metered::new(ep);
    let mut rows = Vec::new();
    let mut acc_up = g.max_acc_steps();
    let mut lat_up = g.max_lat_steps();
    while acc_up >= 1 && lat_up >= 1 {
        let acc = max_acc_steps(&mut ep, g, acc_up, lat_up)?;
        if acc < 1 {
            break;
        }
        let lat_bound = if opts.tight_latency_search {
            lat_up
        } else {
            g.max_lat_steps()
        };
        let lat = min_lat_steps(&mut ep, g, acc, lat_bound)?;
        rows.push(EstimateRow {
            accuracy: g.acc_at(acc),
            latency_ms: g.lat_at(lat),
        });
        acc_up = acc - 1;
        lat_up = lat - 1;
    }
    Ok(FrontierEstimate {
        rows,
        queries_spent: ep.spent(),
    })
}

/// Upper bound on queries for an undefended frontier of `n` models.
pub fn worst_case_queries(n: usize, g: &GranularityConfig) -> u64 {
    let acc_bits = ((1.0 + g.acc_g) / g.acc_g).log2().ceil() as u64;
    let lat_bits = ((g.l_up + g.lat_g) / g.lat_g).log2().ceil() as u64;
    (n as u64 + 1) * (acc_bits + lat_bits + 2)
}
