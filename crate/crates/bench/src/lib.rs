//! Fixtures shared by the criterion benches.

use zoolab_core::simlab::{gen_random_zoo, ZooGenSpec};
use zoolab_core::{
    build_frontier, GranularityConfig, LocalEndpoint, ParetoFrontier, Router, RouterConfig,
};

pub fn bench_granularity() -> GranularityConfig {
    GranularityConfig {
        acc_g: 1e-4,
        lat_g: 0.01,
        l_up: 200.0,
    }
}

pub fn synthetic_frontier(n: usize, seed: u64) -> ParetoFrontier {
    let g = bench_granularity();
    let zoo = gen_random_zoo(&ZooGenSpec::full_range(n, g, seed)).expect("zoo fits the grid");
    build_frontier(&zoo, &g).expect("generated zoo is a valid frontier")
}

pub fn plain_endpoint(frontier: ParetoFrontier, seed: u64) -> LocalEndpoint {
    LocalEndpoint::new(Router::new(frontier, RouterConfig::plain(seed)).expect("plain router"))
}
