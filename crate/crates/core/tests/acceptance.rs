//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use rayon::prelude::*;

use zoolab_core::attack::{
    expected_agreement, run_campaign, true_victim, AttackBudget, CampaignMode, CampaignResult,
};
use zoolab_core::endpoint::InferReply;
use zoolab_core::fingerprint::fingerprint;
use zoolab_core::noise::{LaplaceParams, NoiseSource};
use zoolab_core::router::{Phase, TelemetrySummary};
use zoolab_core::seeds::derive_seed;
use zoolab_core::simlab::{
    complexity_experiment, gen_random_zoo, grid_scan_oracle, min_fidelity, reference_zoo,
    tradeoff_experiment, ComplexityConfig, TradeoffConfig, TradeoffReport, ZooGenSpec,
};
use zoolab_core::wire::{RemoteEndpoint, ServeMode, Server, ServerConfig};
use zoolab_core::{
    build_frontier, DefenseConfig, GranularityConfig, LocalEndpoint, ModelProfile, ParetoFrontier,
    QueryEndpoint, Result, Router, RouterConfig,
};

const SEED: u64 = 20240607;
const LATENCY_BUDGET: f64 = 13.0;
const EPSILONS: [f64; 4] = [1000.0, 100.0, 50.0, 10.0];
const NO_NOISE: f64 = 1e9;
const TRIALS: u32 = 30;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn f3() -> Vec<ModelProfile> {
    vec![
        ModelProfile::new("a", 0.7, 5.0),
        ModelProfile::new("b", 0.8, 10.0),
        ModelProfile::new("c", 0.9, 20.0),
    ]
}

fn f3_grid() -> GranularityConfig {
    GranularityConfig::new(0.001, 1.0, 32.0).unwrap()
}

fn plain(frontier: ParetoFrontier, seed: u64) -> LocalEndpoint {
    LocalEndpoint::new(Router::new(frontier, RouterConfig::plain(seed)).unwrap())
}

fn defended(frontier: ParetoFrontier, epsilon: f64, seed: u64) -> LocalEndpoint {
    let defense = DefenseConfig::for_frontier(&frontier, epsilon).unwrap();
    LocalEndpoint::new(Router::new(frontier, RouterConfig::defended(seed, defense)).unwrap())
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn fingerprint_exactness() -> Verdict {
    let start = Instant::now();
    let grids = [
        GranularityConfig::new(0.005, 0.25, 64.0).unwrap(),
        GranularityConfig::new(0.004, 0.5, 80.0).unwrap(),
    ];
    let mismatches: Vec<String> = (0..200u64)
        .into_par_iter()
        .filter_map(|i| {
            let seed = derive_seed(SEED, &[1, i]);
            let g = grids[(i % 2) as usize];
            let n = 1 + (seed % 60) as usize;
            let zoo = gen_random_zoo(&ZooGenSpec::full_range(n, g, seed)).unwrap();
            let frontier = build_frontier(&zoo, &g).unwrap();
            let fast = fingerprint(&mut plain(frontier.clone(), seed), &g).unwrap();
            let slow = grid_scan_oracle(&mut plain(frontier.clone(), seed), &g).unwrap();
            let truth: Vec<(f64, f64)> = frontier
                .entries()
                .iter()
                .rev()
                .map(|m| (m.accuracy, m.latency))
                .collect();
            (fast.pairs() != slow.pairs() || fast.pairs() != truth)
                .then(|| format!("zoo {i} (n={n})"))
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatches.is_empty() && secs < 30.0,
        format!(
            "200 zoos, n <= 60, {} mismatches {:?}, {secs:.1} s (limit 30 s)",
            mismatches.len(),
            mismatches
        ),
    )
}

fn worst_case(n: usize, g: &GranularityConfig) -> u64 {
    let a = ((1.0 + g.acc_g) / g.acc_g).log2().ceil() as u64;
    let l = ((g.l_up + g.lat_g) / g.lat_g).log2().ceil() as u64;
    (n as u64 + 1) * (a + l + 2)
}

fn ols_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

fn linear_complexity() -> Verdict {
    let start = Instant::now();
    let sizes = vec![10usize, 50, 100, 250, 500, 1000];
    let config = ComplexityConfig {
        sizes: sizes.clone(),
        trials: 10,
        granularity: ComplexityConfig::default_granularity(),
        seed: SEED,
    };
    let report = complexity_experiment(&config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let g = config.granularity;
    let violations = report
        .rows
        .iter()
        .filter(|r| r.queries > worst_case(r.n, &g))
        .count();
    let inexact = report.rows.iter().filter(|r| !r.exact).count();
    let means: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            let q: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.n == n)
                .map(|r| r.queries as f64)
                .collect();
            q.iter().sum::<f64>() / q.len() as f64
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let r2 = ols_r2(&xs, &means);
    verdict(
        report.rows.len() == 60 && r2 >= 0.99 && violations == 0 && inexact == 0 && secs < 120.0,
        format!(
            "R^2 = {r2:.5} (>= 0.99), {violations} bound violations, {inexact} inexact runs, means {:?}, {secs:.1} s (limit 120 s)",
            means.iter().map(|m| m.round() as u64).collect::<Vec<_>>()
        ),
    )
}

fn exact_targeting() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    for (name, models, g) in [
        (
            "reference",
            reference_zoo().models,
            reference_zoo().granularity,
        ),
        ("F3", f3(), f3_grid()),
    ] {
        let frontier = build_frontier(&models, &g).unwrap();
        let victim = true_victim(&frontier, LATENCY_BUDGET).unwrap().id.clone();
        let probe = fingerprint(&mut plain(frontier.clone(), SEED), &g).unwrap();
        let budget = AttackBudget::new(LATENCY_BUDGET, probe.queries_spent + 10_000).unwrap();
        let mut ep = plain(frontier.clone(), SEED);
        let res = run_campaign(&mut ep, &budget, &g, CampaignMode::Fingerprint).unwrap();
        let router = ep.into_router();
        let on_victim = router
            .log()
            .phase(Phase::Labeling)
            .records()
            .iter()
            .filter(|r| r.outcome.served_model_id.as_deref() == Some(victim.as_str()))
            .count();
        let ok = res.queries_labeling == 10_000
            && on_victim == 10_000
            && res.trigger_histogram == BTreeMap::from([(victim.clone(), 10_000)]);
        pass &= ok;
        notes.push(format!(
            "{name}: {on_victim}/{} labeling queries on {victim}",
            res.queries_labeling
        ));
    }

    let frontier = build_frontier(&f3(), &f3_grid()).unwrap();
    let budget = AttackBudget::new(LATENCY_BUDGET, 10_000).unwrap();
    let mut ep = plain(frontier, SEED);
    let res = run_campaign(&mut ep, &budget, &f3_grid(), CampaignMode::Naive).unwrap();
    let pmf = res.trigger_pmf();
    let p = |id: &str| pmf.get(id).copied().unwrap_or(0.0);
    let naive_ok = res.queries_labeling == 10_000
        && (p("a") - 0.5).abs() <= 0.02
        && (p("b") - 0.5).abs() <= 0.02
        && p("c") == 0.0;
    pass &= naive_ok;
    notes.push(format!(
        "naive F3 L=13 PMF = ({:.4}, {:.4}, {:.4})",
        p("a"),
        p("b"),
        p("c")
    ));
    verdict(pass, notes.join("; "))
}

fn tradeoff_sweep() -> (ParetoFrontier, TradeoffReport) {
    let zoo = reference_zoo();
    let frontier = zoo.frontier().unwrap();
    let mut epsilons = vec![NO_NOISE];
    epsilons.extend(EPSILONS);
    let config = TradeoffConfig::new(vec![LATENCY_BUDGET], epsilons, TRIALS, SEED);
    let report = tradeoff_experiment(&frontier, &zoo.granularity, &config).unwrap();
    (frontier, report)
}

fn column(
    report: &TradeoffReport,
    epsilon: f64,
    f: fn(&zoolab_core::simlab::TradeoffRow) -> f64,
) -> Vec<f64> {
    report.rows_for(LATENCY_BUDGET, epsilon).map(f).collect()
}

/// Checks means are nonincreasing along `EPSILONS`; each step may rise by at
/// most `slack_se` pooled standard errors.
fn ordered(
    report: &TradeoffReport,
    f: fn(&zoolab_core::simlab::TradeoffRow) -> f64,
    slack_se: f64,
) -> (bool, String) {
    let stats: Vec<(f64, f64)> = EPSILONS
        .iter()
        .map(|&e| mean_se(&column(report, e, f)))
        .collect();
    let mut ok = true;
    for w in stats.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let pooled = (hi.1.powi(2) + lo.1.powi(2)).sqrt();
        ok &= lo.0 <= hi.0 + slack_se * pooled;
    }
    let text = EPSILONS
        .iter()
        .zip(&stats)
        .map(|(e, (m, se))| format!("eps={e}: {m:.4}+-{se:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, text)
}

fn defense_effect(report: &TradeoffReport) -> Verdict {
    let (pmf_ok, pmf) = ordered(report, |r| r.victim_pmf, 1.0);
    let (ela_ok, ela) = ordered(report, |r| r.expected_label_acc, 1.0);
    verdict(
        pmf_ok && ela_ok,
        format!("victim PMF [{pmf}]; label accuracy [{ela}]"),
    )
}

fn goodput_tradeoff(report: &TradeoffReport) -> Verdict {
    let (mono_ok, gp) = ordered(report, |r| r.goodput, 0.0);
    let witness: Vec<f64> = EPSILONS
        .iter()
        .copied()
        .filter(|&e| {
            let g = mean_se(&column(report, e, |r| r.goodput)).0;
            let v = mean_se(&column(report, e, |r| r.victim_pmf)).0;
            g > 0.8 && v < 0.9
        })
        .collect();
    let limit = mean_se(&column(report, NO_NOISE, |r| r.goodput)).0;
    verdict(
        mono_ok && !witness.is_empty() && limit >= 0.999,
        format!(
            "goodput [{gp}] nonincreasing: {mono_ok}; eps with goodput > 0.8 and victim PMF < 0.9: {witness:?}; eps=1e9 goodput {limit:.4}"
        ),
    )
}

/// Remembers every spec exactly as the attacker sent it.
struct Recording<E> {
    inner: E,
    sent: Vec<f64>,
}

impl<E: QueryEndpoint> QueryEndpoint for Recording<E> {
    fn infer(&mut self, acc_min: Option<f64>, lat_max: f64, input: u64) -> Result<InferReply> {
        self.sent.push(lat_max);
        self.inner.infer(acc_min, lat_max, input)
    }

    fn telemetry(&mut self) -> Result<TelemetrySummary> {
        self.inner.telemetry()
    }

    fn begin_phase(&mut self, phase: Phase) {
        self.inner.begin_phase(phase)
    }
}

/// Served count and violations for one defended campaign, judged against
/// the latency each query was sent with.
fn audited_campaign(
    frontier: &ParetoFrontier,
    g: &GranularityConfig,
    epsilon: f64,
    seed: u64,
) -> (u64, u64) {
    let mut ep = Recording {
        inner: defended(frontier.clone(), epsilon, seed),
        sent: Vec::new(),
    };
    let budget = AttackBudget::new(LATENCY_BUDGET, 4000).unwrap();
    // Campaigns that find no victim still served their probes.
    let _ = run_campaign(&mut ep, &budget, g, CampaignMode::Fingerprint);
    let records = ep.inner.router().log().records();
    assert_eq!(records.len(), ep.sent.len());
    let mut served = 0;
    let mut violations = 0;
    for (rec, &lat) in records.iter().zip(&ep.sent) {
        if let Some(id) = &rec.outcome.served_model_id {
            served += 1;
            if frontier.get(id).unwrap().latency > lat {
                violations += 1;
            }
        }
    }
    (served, violations)
}

fn latency_safety(report: &TradeoffReport, frontier: &ParetoFrontier) -> Verdict {
    let g = reference_zoo().granularity;
    let sweep_served: u64 = report.rows.iter().map(|r| r.served_total).sum();
    let sweep_violations: u64 = report.rows.iter().map(|r| r.latency_violations).sum();

    // Replicates of the same sweep, audited query by query, until at least a
    // million responses have been checked.
    let mut audited = 0u64;
    let mut audit_violations = 0u64;
    let mut round = 0u64;
    while audited < 1_000_000 {
        let jobs: Vec<(f64, u64)> = [NO_NOISE]
            .iter()
            .chain(&EPSILONS)
            .flat_map(|&e| (0..TRIALS as u64).map(move |t| (e, t)))
            .collect();
        let (s, v) = jobs
            .par_iter()
            .map(|&(e, t)| {
                audited_campaign(
                    frontier,
                    &g,
                    e,
                    derive_seed(SEED, &[6, round, e.to_bits(), t]),
                )
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        audited += s;
        audit_violations += v;
        round += 1;
    }
    verdict(
        sweep_violations == 0 && audit_violations == 0,
        format!(
            "{sweep_violations} violations in {sweep_served} served sweep queries; {audit_violations} in {audited} audited replicate queries ({round} replicate sweeps)"
        ),
    )
}

fn laplace_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * x.exp()
    } else {
        1.0 - 0.5 * (-x).exp()
    }
}

fn laplace_sampler() -> Verdict {
    let params = LaplaceParams::new(1.0).unwrap();
    let mut src = NoiseSource::new(SEED, 7);
    let n = 1_000_000usize;
    let mut xs: Vec<f64> = (0..n).map(|_| src.sample(&params)).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    xs.sort_by(f64::total_cmp);
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = laplace_cdf(x);
            (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    verdict(
        (-0.01..=0.01).contains(&mean) && (1.95..=2.05).contains(&var) && ks < 0.005,
        format!("mean {mean:.5}, variance {var:.5}, KS {ks:.5}"),
    )
}

fn fidelity_bound() -> Verdict {
    let exact = min_fidelity(0.9, 0.9).unwrap();
    let mut violations = 0;
    let mut checked = 0;
    for i in 0..=100 {
        for j in 0..=100 {
            let (a_v, a_e) = (i as f64 / 100.0, j as f64 / 100.0);
            let floor = (a_v + a_e - 1.0).max(0.0);
            let lib_floor = min_fidelity(a_v, a_e).unwrap();
            for k in 2..=100u32 {
                checked += 1;
                let agree = expected_agreement(a_v, a_e, k).unwrap();
                // Equality holds when either accuracy is 1; allow rounding there.
                if agree < floor - 1e-12
                    || agree < lib_floor - 1e-12
                    || (lib_floor - floor).abs() > 1e-12
                {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        exact == 0.8 && violations == 0,
        format!(
            "min_fidelity(0.9, 0.9) = {exact}; {violations} violations over {checked} grid points"
        ),
    )
}

/// Forwards one client connection to `upstream` and keeps a copy of every
/// byte the server sends back.
fn capturing_proxy(
    upstream: std::net::SocketAddr,
) -> (
    std::net::SocketAddr,
    Arc<Mutex<Vec<u8>>>,
    thread::JoinHandle<()>,
) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let captured = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&captured);
    let handle = thread::spawn(move || {
        let (client, _) = listener.accept().unwrap();
        let server = TcpStream::connect(upstream).unwrap();
        let (mut c_read, mut s_write) = (client.try_clone().unwrap(), server.try_clone().unwrap());
        let up = thread::spawn(move || {
            let _ = std::io::copy(&mut c_read, &mut s_write);
            let _ = s_write.shutdown(std::net::Shutdown::Write);
        });
        let mut s_read = server;
        let mut c_write = client;
        let mut buf = [0u8; 8192];
        loop {
            match s_read.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(k) => {
                    sink.lock().unwrap().extend_from_slice(&buf[..k]);
                    if c_write.write_all(&buf[..k]).is_err() {
                        break;
                    }
                }
            }
        }
        let _ = up.join();
    });
    (addr, captured, handle)
}

fn transport_transparency() -> Verdict {
    let zoo = reference_zoo();
    let g = zoo.granularity;
    let epsilon = 50.0;
    let budget = AttackBudget::new(LATENCY_BUDGET, 4000).unwrap();

    let server = Server::bind(
        "127.0.0.1:0",
        ServerConfig::new(g, ServeMode::Experiment, SEED).with_epsilon(Some(epsilon)),
    )
    .unwrap();
    for m in &zoo.models {
        server.register(m.clone()).unwrap();
    }
    server.start_serving().unwrap();
    let handle = server.spawn().unwrap();
    let (proxy, captured, proxy_thread) = capturing_proxy(handle.addr());

    let remote: CampaignResult = {
        let mut ep = RemoteEndpoint::connect(proxy).unwrap().with_granularity(g);
        run_campaign(&mut ep, &budget, &g, CampaignMode::Fingerprint).unwrap()
    };
    proxy_thread.join().unwrap();
    handle.shutdown();

    let mut local_ep = defended(zoo.frontier().unwrap(), epsilon, SEED);
    let local = run_campaign(&mut local_ep, &budget, &g, CampaignMode::Fingerprint).unwrap();
    let identical = remote == local;

    let bytes = captured.lock().unwrap().clone();
    let mut leaks = Vec::new();
    let mut lines = 0;
    for line in BufReader::new(bytes.as_slice()).lines() {
        let line = line.unwrap();
        lines += 1;
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let allowed = match v["type"].as_str() {
            Some("infer_response") => BTreeSet::from(["type", "request_id", "label"]),
            Some("infer_error") => BTreeSet::from(["type", "request_id", "code"]),
            Some("telemetry_response") => continue,
            _ => BTreeSet::new(),
        };
        if keys != allowed {
            leaks.push(format!("unexpected reply shape: {line}"));
        }
    }
    let inference_text: String = String::from_utf8(bytes)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("telemetry_response"))
        .collect::<Vec<_>>()
        .join("\n");
    // Floats are searched for as JSON would print them.
    let json_num = |x: f64| serde_json::to_string(&x).unwrap();
    let mut needles: Vec<String> = zoo
        .models
        .iter()
        .flat_map(|m| [m.id.clone(), m.name.clone(), json_num(m.latency)])
        .collect();
    for rec in local_ep.router().log().records() {
        needles.extend(rec.outcome.noisy_acc.map(json_num));
        needles.extend(rec.outcome.noisy_lat.map(json_num));
    }
    needles.sort();
    needles.dedup();
    leaks.extend(
        needles
            .iter()
            .filter(|n| inference_text.contains(n.as_str()))
            .map(|n| format!("found {n:?}")),
    );

    verdict(
        identical && leaks.is_empty() && lines as u64 >= remote.queries_fingerprinting + remote.queries_labeling,
        format!(
            "campaign results identical: {identical}; {lines} reply lines captured, {} needles checked, leaks: {:?}",
            needles.len(),
            leaks
        ),
    )
}

fn check(results: &mut Vec<bool>, id: u32, name: &str, f: impl FnOnce() -> Verdict) {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let status = if v.pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} {name}: {status} ({}) [{:.1} s]",
        v.detail,
        start.elapsed().as_secs_f64()
    );
    let _ = std::io::stdout().flush();
    results.push(v.pass);
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored.
    let mut results = Vec::new();
    check(
        &mut results,
        1,
        "fingerprint exactness",
        fingerprint_exactness,
    );
    check(
        &mut results,
        2,
        "linear query complexity",
        linear_complexity,
    );
    check(&mut results, 3, "exact targeting", exact_targeting);

    let sweep_start = Instant::now();
    let (frontier, report) = tradeoff_sweep();
    println!(
        "tradeoff sweep: {} campaigns in {:.1} s",
        report.rows.len(),
        sweep_start.elapsed().as_secs_f64()
    );
    check(&mut results, 4, "defense effect", || {
        defense_effect(&report)
    });
    check(&mut results, 5, "goodput tradeoff", || {
        goodput_tradeoff(&report)
    });
    check(&mut results, 6, "latency safety", || {
        latency_safety(&report, &frontier)
    });
    check(&mut results, 7, "laplace sampler", laplace_sampler);
    check(&mut results, 8, "fidelity bound", fidelity_bound);
    check(
        &mut results,
        9,
        "transport transparency",
        transport_transparency,
    );

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
