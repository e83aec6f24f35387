//! `rrc` — command-line harness for recursive route choice estimation:
//! generate a synthetic network, simulate trips from known coefficients,
//! corrupt them by random link removal, estimate with the exact (dc), EM,
//! or nested-fixed-point baselines, evaluate estimates on complete data,
//! and run the full removal-probability sweep.
//!
//! Exit codes: 0 success, 1 computational failure, 2 usage error.

mod config;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::prelude::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rrc_core::choice::{FeatureSpec, Model, ParamVector, Problem, SolveOptions};
use rrc_core::dc::SplitObs;
use rrc_core::em::{em_estimate, EmOptions};
use rrc_core::mle::{
    dc_estimate, evaluate_complete_ll, nfxp_estimate, EstimateOptions, EstimationResult,
    MaximizeOptions, NfxpMode,
};
use rrc_core::network::{load_network, save_network, write_id_sidecar, Network, NodeId};
use rrc_core::obs::{corrupt_trips, load_trips, save_manifest, save_trips, MultiSimPlan};
use rrc_core::synth::grid_network;

use config::{parse_f64_list, parse_name_list, Config};

#[derive(Parser)]
#[command(name = "rrc", version, about = "Recursive route choice estimation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a rectangular grid network (links, nodes, id sidecar).
    GenerateNetwork(GenerateArgs),
    /// Simulate trips from a ground-truth parameter vector.
    Simulate(SimulateArgs),
    /// Remove interior link observations with a given probability.
    Corrupt(CorruptArgs),
    /// Estimate model parameters from (possibly incomplete) trips.
    Estimate(EstimateArgs),
    /// Evaluate an estimate's log-likelihood on complete trips.
    Evaluate(EvaluateArgs),
    /// Run the full corrupt/estimate/evaluate sweep over p and seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 5)]
    rows: usize,
    #[arg(long, default_value_t = 6)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Choice model: rl or nrl.
    #[arg(long, default_value = "rl")]
    model: String,
    /// Link attribute columns used as utility features (default: all).
    #[arg(long)]
    utility_attrs: Option<String>,
    /// Link attribute columns driving the NRL scales (default: none).
    #[arg(long)]
    scale_attrs: Option<String>,
    /// Fixed global scale mu (RL).
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Ground-truth utility coefficients, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    theta: String,
    /// Ground-truth scale coefficients (NRL), comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    omega: Option<String>,
    #[arg(long, default_value_t = 1000)]
    n_trips: usize,
    /// Number of destination nodes to sample (ignored with --dest-nodes).
    #[arg(long, default_value_t = 5)]
    n_dests: usize,
    /// Explicit destination node ids, comma-separated.
    #[arg(long)]
    dest_nodes: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    min_links: usize,
    #[arg(long, default_value_t = 20000)]
    step_cap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    trips: PathBuf,
    /// Removal probability in [0, 1].
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON manifest of removed positions.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    trips: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Estimator: dc, em, nfxp-i or nfxp-c.
    #[arg(long)]
    algo: String,
    #[arg(long)]
    out: PathBuf,
    /// Optimizer gradient tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// EM path samples per unconnected pair.
    #[arg(long)]
    samples: Option<usize>,
    /// EM fixed-point threshold on the parameter step.
    #[arg(long)]
    xi: Option<f64>,
    /// Enumerate connecting paths exactly in the EM E step.
    #[arg(long)]
    exact_e: bool,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting utility coefficients (default: zeros with feasibility backoff).
    #[arg(long, allow_hyphen_values = true)]
    theta0: Option<String>,
    /// Compute inverse-Hessian standard errors (diagnostic).
    #[arg(long)]
    std_errors: bool,
    /// Write the EM iteration trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// EstimationResult JSON produced by `estimate`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    network: PathBuf,
    /// Complete (fully connected) trips.
    #[arg(long)]
    trips: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    exact_e: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Usage-shaped failures (bad config keys, unknown attributes)
            // exit 2; computational and IO failures exit 1.
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Marker for argument/config-level failures (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateNetwork(a) => cmd_generate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Estimate(a) => with_threads(a.threads, || cmd_estimate(a)),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => {
            let threads = a.threads;
            with_threads(threads, || sweep::cmd_sweep(a))
        }
    }
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match threads {
        None | Some(0) => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")?
            .install(f),
    }
}

fn load_net(path: &Path) -> Result<Arc<Network>> {
    let net = load_network(path).map_err(|e| anyhow!("{e}"))?;
    // id mapping sidecar for round-tripping; best effort on read-only dirs
    if let Err(e) = write_id_sidecar(&net, path) {
        eprintln!("warning: could not write id sidecar: {e}");
    }
    Ok(Arc::new(net))
}

fn resolve_attr_cols(net: &Network, raw: Option<&str>, what: &str) -> Result<Option<Vec<usize>>> {
    let Some(raw) = raw else { return Ok(None) };
    let mut cols = Vec::new();
    for name in parse_name_list(raw) {
        let idx = net
            .link_attr_names
            .iter()
            .position(|n| n == &name)
            .ok_or_else(|| {
                usage_err(format!(
                    "{what} attribute `{name}` not found (have: {})",
                    net.link_attr_names.join(", ")
                ))
            })?;
        cols.push(idx);
    }
    Ok(Some(cols))
}

fn build_spec(net: &Network, margs: &ModelArgs) -> Result<(Model, FeatureSpec)> {
    let model: Model = margs
        .model
        .parse()
        .map_err(|e| usage_err(format!("{e}")))?;
    let utility = resolve_attr_cols(net, margs.utility_attrs.as_deref(), "utility")?
        .unwrap_or_else(|| (0..net.n_link_attrs()).collect());
    let scale = resolve_attr_cols(net, margs.scale_attrs.as_deref(), "scale")?.unwrap_or_default();
    if model == Model::Nrl && scale.is_empty() {
        eprintln!("note: nrl with no scale attributes degenerates to rl");
    }
    Ok((
        model,
        FeatureSpec {
            utility_link_cols: utility,
            scale_cols: scale,
        },
    ))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if a.rows < 2 || a.cols < 2 {
        return Err(usage_err("grid needs at least 2 rows and 2 columns"));
    }
    let net = grid_network(a.rows, a.cols, a.seed);
    save_network(&net, &a.out).map_err(|e| anyhow!("{e}"))?;
    write_id_sidecar(&net, &a.out).map_err(|e| anyhow!("{e}"))?;
    eprintln!(
        "wrote {} ({} links, {} nodes)",
        a.out.display(),
        net.n_links(),
        net.n_nodes()
    );
    Ok(())
}

/// Seeded choice of destination nodes among nodes with incoming links.
pub fn pick_destinations(net: &Network, n: usize, seed: u64) -> Result<Vec<NodeId>> {
    let candidates: Vec<NodeId> = (0..net.n_nodes())
        .map(NodeId)
        .filter(|&v| !net.links_entering(v).is_empty())
        .collect();
    if candidates.len() < n {
        bail!(
            "requested {n} destinations but only {} nodes have incoming links",
            candidates.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdeed);
    let mut picked: Vec<NodeId> = candidates.choose_multiple(&mut rng, n).copied().collect();
    picked.sort();
    Ok(picked)
}

fn parse_theta(net: &Network, spec: &FeatureSpec, raw: &str, omega: Option<&str>, mu: f64) -> Result<ParamVector> {
    let theta = parse_f64_list(raw).map_err(|e| usage_err(format!("--theta: {e}")))?;
    let omega = match omega {
        None => vec![0.0; spec.n_omega()],
        Some(raw) => parse_f64_list(raw).map_err(|e| usage_err(format!("--omega: {e}")))?,
    };
    if theta.len() != spec.n_theta(net) {
        return Err(usage_err(format!(
            "--theta has {} coefficients, the feature specification needs {} ({} link cols + {} pair attrs)",
            theta.len(),
            spec.n_theta(net),
            spec.utility_link_cols.len(),
            net.n_pair_attrs()
        )));
    }
    if omega.len() != spec.n_omega() {
        return Err(usage_err(format!(
            "--omega has {} coefficients, the scale specification needs {}",
            omega.len(),
            spec.n_omega()
        )));
    }
    ParamVector::new(theta, omega, mu).map_err(|e| usage_err(format!("{e}")))
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let net = load_net(&a.network)?;
    let (model, spec) = build_spec(&net, &a.model)?;
    let truth = parse_theta(&net, &spec, &a.theta, a.omega.as_deref(), a.model.mu)?;
    let dests = match &a.dest_nodes {
        Some(raw) => parse_name_list(raw)
            .iter()
            .map(|n| {
                net.node_id(n)
                    .ok_or_else(|| usage_err(format!("unknown node `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => pick_destinations(&net, a.n_dests, a.seed)?,
    };
    let problem = Problem::for_destinations(
        Arc::clone(&net),
        model,
        spec,
        &dests,
        SolveOptions::default(),
    )
    .map_err(|e| anyhow!("{e}"))?;
    let plan = MultiSimPlan {
        dests,
        n_trips: a.n_trips,
        min_links: a.min_links,
        step_cap: a.step_cap,
        seed: a.seed,
    };
    let obs = rrc_core::obs::simulate_multi(&problem, &truth, &plan).map_err(|e| anyhow!("{e}"))?;
    save_trips(&obs, &net, &a.out).map_err(|e| anyhow!("{e}"))?;
    eprintln!("wrote {} ({} trips)", a.out.display(), obs.len());
    Ok(())
}

fn cmd_corrupt(a: CorruptArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.p) {
        return Err(usage_err(format!("--p {} outside [0, 1]", a.p)));
    }
    let net = load_net(&a.network)?;
    let obs = load_trips(&net, &a.trips).map_err(|e| anyhow!("{e}"))?;
    let (corrupted, manifest) = corrupt_trips(&obs, a.p, a.seed).map_err(|e| anyhow!("{e}"))?;
    save_trips(&corrupted, &net, &a.out).map_err(|e| anyhow!("{e}"))?;
    if let Some(path) = &a.manifest {
        save_manifest(&manifest, path).map_err(|e| anyhow!("{e}"))?;
    }
    let removed: usize = manifest.trips.iter().map(|t| t.removed_positions.len()).sum();
    eprintln!("wrote {} ({} links removed)", a.out.display(), removed);
    Ok(())
}

/// Run report written by `estimate`: the estimation result plus the
/// effective configuration (defaults echoed for provenance).
#[derive(serde::Serialize)]
struct RunReport {
    #[serde(flatten)]
    result: EstimationResult,
    config: std::collections::BTreeMap<String, String>,
}

pub struct EstimateSetup {
    pub problem: Problem,
    pub split: SplitObs,
    pub est_opts: EstimateOptions,
    pub em_opts: EmOptions,
}

pub fn run_algorithm(
    setup: &EstimateSetup,
    algo: &str,
) -> Result<(EstimationResult, Option<Vec<rrc_core::em::EmTraceRecord>>)> {
    let out = match algo {
        "dc" => (
            dc_estimate(&setup.problem, &setup.split, &setup.est_opts)
                .map_err(|e| anyhow!("{e}"))?,
            None,
        ),
        "em" => {
            let (r, trace) = em_estimate(
                &setup.problem,
                &setup.split,
                &setup.em_opts,
                setup.est_opts.start.clone(),
            )
            .map_err(|e| anyhow!("{e}"))?;
            (r, Some(trace))
        }
        "nfxp-i" => (
            nfxp_estimate(
                &setup.problem,
                &setup.split,
                NfxpMode::IgnoreUnconnected,
                &setup.est_opts,
            )
            .map_err(|e| anyhow!("{e}"))?,
            None,
        ),
        "nfxp-c" => (
            nfxp_estimate(
                &setup.problem,
                &setup.split,
                NfxpMode::Complete,
                &setup.est_opts,
            )
            .map_err(|e| anyhow!("{e}"))?,
            None,
        ),
        other => return Err(usage_err(format!("unknown algorithm `{other}`"))),
    };
    Ok(out)
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let mut cfg = Config::load(a.config.as_deref()).map_err(|e| usage_err(format!("{e}")))?;
    cfg.set_override("tol", a.tol);
    cfg.set_override("samples", a.samples);
    cfg.set_override("xi", a.xi);
    if a.exact_e {
        cfg.set_override("exact_e", Some(true));
    }

    let net = load_net(&a.network)?;
    let (model, spec) = build_spec(&net, &a.model)?;
    let obs = load_trips(&net, &a.trips).map_err(|e| anyhow!("{e}"))?;
    if obs.is_empty() {
        return Err(usage_err("trips file contains no trips"));
    }

    let grad_tol: f64 = cfg.get("tol", 1e-6).map_err(|e| usage_err(format!("{e}")))?;
    let value_tol: f64 = cfg.get("value_tol", 1e-10).map_err(|e| usage_err(format!("{e}")))?;
    let samples: usize = cfg.get("samples", 5).map_err(|e| usage_err(format!("{e}")))?;
    let xi: f64 = cfg.get("xi", 1e-4).map_err(|e| usage_err(format!("{e}")))?;
    let exact_e: bool = cfg.get("exact_e", false).map_err(|e| usage_err(format!("{e}")))?;
    let em_seed: u64 = cfg.get("em_seed", 0).map_err(|e| usage_err(format!("{e}")))?;
    let max_iter: usize = cfg.get("max_iter", 500).map_err(|e| usage_err(format!("{e}")))?;

    let start = match &a.theta0 {
        None => None,
        Some(raw) => Some(parse_theta(&net, &spec, raw, None, a.model.mu)?),
    };

    let solve_opts = SolveOptions {
        tol: value_tol,
        ..SolveOptions::default()
    };
    let problem = Problem::for_destinations(
        Arc::clone(&net),
        model,
        spec,
        &obs.dest_nodes(),
        solve_opts,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let split = SplitObs::build(&problem, &obs).map_err(|e| anyhow!("{e}"))?;

    let setup = EstimateSetup {
        problem,
        split,
        est_opts: EstimateOptions {
            maximize: MaximizeOptions {
                grad_tol,
                max_iter,
                ..MaximizeOptions::default()
            },
            start,
            std_errors: a.std_errors,
        },
        em_opts: EmOptions {
            xi,
            samples,
            exact: exact_e,
            seed: em_seed,
            m_step: MaximizeOptions {
                grad_tol,
                ..MaximizeOptions::default()
            },
            ..EmOptions::default()
        },
    };
    let (result, trace) = run_algorithm(&setup, &a.algo)?;

    if let (Some(trace), Some(path)) = (&trace, &a.trace) {
        let mut lines = String::new();
        for rec in trace {
            lines.push_str(&serde_json::to_string(rec)?);
            lines.push('\n');
        }
        std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    }

    let report = RunReport {
        result,
        config: cfg.echo(),
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "wrote {} (ll {:.6}, {} iterations, converged: {})",
        a.out.display(),
        report.result.ll_at_solution,
        report.result.iterations,
        report.result.converged
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.params)
        .with_context(|| format!("reading {}", a.params.display()))?;
    let result: EstimationResult =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.params.display()))?;
    let net = load_net(&a.network)?;
    let mut margs = a.model;
    // the estimate's own model tag wins unless explicitly overridden
    if margs.model == "rl" {
        margs.model = result.model.to_string();
    }
    let (model, spec) = build_spec(&net, &margs)?;
    let obs = load_trips(&net, &a.trips).map_err(|e| anyhow!("{e}"))?;
    let problem = Problem::for_destinations(
        Arc::clone(&net),
        model,
        spec,
        &obs.dest_nodes(),
        SolveOptions::default(),
    )
    .map_err(|e| anyhow!("{e}"))?;
    let ll = evaluate_complete_ll(&problem, &obs, &result.params()).map_err(|e| anyhow!("{e}"))?;
    println!("{ll}");
    Ok(())
}
