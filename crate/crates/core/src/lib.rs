//! Model-less inference serving lab.
//!
//! * [`zoo`]: model profiles, Pareto frontiers, feasibility sets.
//! * [`router`]: spec-based routing with optional Laplace spec perturbation.
//! * [`fingerprint`]: binary-search recovery of a frontier through the
//!   success/error bit of the serving API.
//! * [`attack`]: victim selection and labeling campaigns.
//! * [`simlab`]: synthetic zoos, brute-force oracles, experiment suites.
//! * [`wire`]: newline-delimited JSON transport.

pub mod attack;
pub mod endpoint;
pub mod error;
pub mod fingerprint;
pub mod noise;
pub mod router;
pub mod seeds;
pub mod simlab;
pub mod wire;
pub mod zoo;

pub use attack::{AttackBudget, CampaignMode, CampaignResult, VictimSpec};
pub use endpoint::{InferReply, LocalEndpoint, QueryEndpoint};
pub use error::{Error, Result};
pub use fingerprint::{fingerprint, FrontierEstimate};
pub use router::{DefenseConfig, QuerySpec, Router, RouterConfig, ServeLog, ServeOutcome};
pub use zoo::{build_frontier, GranularityConfig, ModelProfile, ParetoFrontier, ZooFile};
