//! The attacker's view of a serving system: send (accuracy, latency) specs,
//! get back a label or an infeasible-set error.

use crate::error::{Error, Result};
use crate::router::{Phase, QuerySpec, Router, TelemetrySummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferReply {
    Label(u32),
    Infeasible,
}

impl InferReply {
    pub fn is_success(&self) -> bool {
        matches!(self, InferReply::Label(_))
    }
}

pub trait QueryEndpoint {
    fn infer(&mut self, acc_min: Option<f64>, lat_max: f64, input: u64) -> Result<InferReply>;

    /// Server-side counters; only experiment deployments expose them.
    fn telemetry(&mut self) -> Result<TelemetrySummary> {
        Err(Error::TelemetryUnavailable)
    }

    /// Hint for in-process routers that tag their log by campaign phase.
    fn begin_phase(&mut self, _phase: Phase) {}
}

impl<E: QueryEndpoint + ?Sized> QueryEndpoint for &mut E {
    fn infer(&mut self, acc_min: Option<f64>, lat_max: f64, input: u64) -> Result<InferReply> {
        (**self).infer(acc_min, lat_max, input)
    }

    fn telemetry(&mut self) -> Result<TelemetrySummary> {
        (**self).telemetry()
    }

    fn begin_phase(&mut self, phase: Phase) {
        (**self).begin_phase(phase)
    }
}

/// In-process endpoint wrapping a router. Telemetry is always available.
#[derive(Debug)]
pub struct LocalEndpoint {
    router: Router,
}

impl LocalEndpoint {
    pub fn new(router: Router) -> Self {
        Self { router }
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn into_router(self) -> Router {
        self.router
    }
}

impl QueryEndpoint for LocalEndpoint {
    fn infer(&mut self, acc_min: Option<f64>, lat_max: f64, input: u64) -> Result<InferReply> {
        let outcome = self
            .router
            .serve(&QuerySpec::new(acc_min, lat_max, input))?;
        Ok(match outcome.label {
            Some(label) => InferReply::Label(label),
            None => InferReply::Infeasible,
        })
    }

    fn telemetry(&mut self) -> Result<TelemetrySummary> {
        Ok(self.router.telemetry())
    }

    fn begin_phase(&mut self, phase: Phase) {
        self.router.set_phase(phase);
    }
}

/// Counts every invocation and refuses to exceed an optional limit.
pub struct Metered<E> {
    inner: E,
    spent: u64,
    limit: Option<u64>,
}

impl<E: QueryEndpoint> Metered<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            spent: 0,
            limit: None,
        }
    }

    pub fn with_limit(inner: E, limit: u64) -> Self {
        Self {
            inner,
            spent: 0,
            limit: Some(limit),
        }
    }

    pub fn spent(&self) -> u64 {
        self.spent
    }

    pub fn remaining(&self) -> Option<u64> {
        self.limit.map(|l| l - self.spent)
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<E: QueryEndpoint> QueryEndpoint for Metered<E> {
    fn infer(&mut self, acc_min: Option<f64>, lat_max: f64, input: u64) -> Result<InferReply> {
        if let Some(limit) = self.limit {
            if self.spent >= limit {
                return Err(Error::BudgetExhausted {
                    spent: self.spent,
                    budget: limit,
                });
            }
        }
        self.spent += 1;
        self.inner.infer(acc_min, lat_max, input)
    }

    fn telemetry(&mut self) -> Result<TelemetrySummary> {
        self.inner.telemetry()
    }

    fn begin_phase(&mut self, phase: Phase) {
        self.inner.begin_phase(phase)
    }
}
