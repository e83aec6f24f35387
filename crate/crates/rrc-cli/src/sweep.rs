//! The removal-probability sweep: simulate a complete dataset once, then for
//! every (p, seed) corrupt it, estimate with each selected algorithm, and
//! score the estimates on the pre-corruption complete data. Completed cells
//! are written atomically and skipped on rerun, so an interrupted sweep
//! resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rrc_core::choice::{Model, ParamVector, Problem, SolveOptions};
use rrc_core::dc::SplitObs;
use rrc_core::em::EmOptions;
use rrc_core::mle::{
    evaluate_complete_ll, nfxp_estimate, EstimateOptions, EstimationResult, MaximizeOptions,
    NfxpMode,
};
use rrc_core::obs::{corrupt_trips, load_trips, save_trips, MultiSimPlan, ObservationSet};

use crate::config::{parse_name_list, Config};
use crate::{build_spec, load_net, pick_destinations, run_algorithm, usage_err, EstimateSetup, ModelArgs, SweepArgs};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub model: String,
    pub algorithm: String,
    pub p: f64,
    pub seed_index: usize,
    pub dataset_seed: u64,
    pub complete_ll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_l2_error_vs_truth: Option<f64>,
    pub result: EstimationResult,
}

#[derive(Debug, Serialize)]
struct SweepReport {
    config: BTreeMap<String, String>,
    n_cells: usize,
    computed: usize,
    skipped: usize,
    failed: Vec<FailedCell>,
    destinations: Vec<String>,
    true_theta: Vec<f64>,
    true_omega: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct FailedCell {
    cell: String,
    error: String,
}

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn cell_path(dir: &Path, model: Model, algo: &str, p: f64, seed_index: usize) -> PathBuf {
    dir.join(format!("cell_{model}_{algo}_p{p}_s{seed_index}.json"))
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = Config::load(args.config.as_deref()).map_err(|e| usage_err(format!("{e}")))?;
    cfg.set_override("network", args.network.as_ref().map(|p| p.display()));
    cfg.set_override("out", args.out.as_ref().map(|p| p.display()));
    cfg.set_override("tol", args.tol);
    cfg.set_override("samples", args.samples);
    if args.exact_e {
        cfg.set_override("exact_e", Some(true));
    }

    let network_path = cfg
        .get_opt_string("network")
        .ok_or_else(|| usage_err("sweep needs a `network` (config key or --network)"))?;
    let out_dir = PathBuf::from(cfg.get_string("out", "sweep-out"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let model_raw = cfg.get_string("model", "rl");
    let algos: Vec<String> = parse_name_list(&cfg.get_string("algos", "dc,em,nfxp-i"));
    for a in &algos {
        if !matches!(a.as_str(), "dc" | "em" | "nfxp-i") {
            return Err(usage_err(format!(
                "unknown sweep algorithm `{a}` (dc, em, nfxp-i; nfxp-c runs implicitly at p=0)"
            )));
        }
    }
    let p_grid = cfg.get_f64_list(
        "p_grid",
        &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    )?;
    if p_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(usage_err("p_grid values must lie in [0, 1]"));
    }
    let n_seeds: usize = cfg.get("seeds", 10)?;
    if n_seeds < 1 {
        return Err(usage_err("seeds must be >= 1"));
    }
    let n_trips: usize = cfg.get("n_trips", 2000)?;
    let min_links: usize = cfg.get("min_links", 5)?;
    let step_cap: usize = cfg.get("step_cap", 20_000)?;
    let sim_seed: u64 = cfg.get("sim_seed", 42)?;
    let base_seed: u64 = cfg.get("base_seed", 1000)?;
    let grad_tol: f64 = cfg.get("tol", 1e-6)?;
    let value_tol: f64 = cfg.get("value_tol", 1e-10)?;
    let samples: usize = cfg.get("samples", 5)?;
    let xi: f64 = cfg.get("xi", 1e-4)?;
    let exact_e: bool = cfg.get("exact_e", false)?;
    let max_iter: usize = cfg.get("max_iter", 500)?;

    let net = load_net(Path::new(&network_path))?;
    let margs = ModelArgs {
        model: model_raw.clone(),
        utility_attrs: cfg.get_opt_string("utility_attrs"),
        scale_attrs: cfg.get_opt_string("scale_attrs"),
        mu: cfg.get("mu", 1.0)?,
    };
    let (model, spec) = build_spec(&net, &margs)?;

    let true_theta = cfg.get_f64_list("true_theta", &[])?;
    if true_theta.is_empty() {
        return Err(usage_err("sweep needs `true_theta` to simulate the complete dataset"));
    }
    let true_omega = cfg.get_f64_list("true_omega", &vec![0.0; spec.n_omega()])?;
    if true_theta.len() != spec.n_theta(&net) || true_omega.len() != spec.n_omega() {
        return Err(usage_err(format!(
            "true parameter shape ({}, {}) does not match the feature specification ({}, {})",
            true_theta.len(),
            true_omega.len(),
            spec.n_theta(&net),
            spec.n_omega()
        )));
    }
    let truth = ParamVector::new(true_theta.clone(), true_omega.clone(), margs.mu)
        .map_err(|e| usage_err(format!("{e}")))?;

    let dests = match cfg.get_opt_string("dest_nodes") {
        Some(raw) => parse_name_list(&raw)
            .iter()
            .map(|n| {
                net.node_id(n)
                    .ok_or_else(|| usage_err(format!("unknown node `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => pick_destinations(&net, cfg.get("n_dests", 5)?, sim_seed)?,
    };
    let solve_opts = SolveOptions {
        tol: value_tol,
        ..SolveOptions::default()
    };
    let problem = Problem::for_destinations(
        Arc::clone(&net),
        model,
        spec.clone(),
        &dests,
        solve_opts.clone(),
    )
    .map_err(|e| anyhow!("{e}"))?;

    // Complete dataset: simulate once, reuse the on-disk copy on rerun.
    let complete_path = out_dir.join("complete_trips.csv");
    let complete: ObservationSet = if complete_path.exists() {
        eprintln!("reusing {}", complete_path.display());
        load_trips(&net, &complete_path).map_err(|e| anyhow!("{e}"))?
    } else {
        let plan = MultiSimPlan {
            dests: dests.clone(),
            n_trips,
            min_links,
            step_cap,
            seed: sim_seed,
        };
        let obs = rrc_core::obs::simulate_multi(&problem, &truth, &plan).map_err(|e| anyhow!("{e}"))?;
        save_trips(&obs, &net, &complete_path).map_err(|e| anyhow!("{e}"))?;
        eprintln!("simulated {} complete trips", obs.len());
        obs
    };
    let complete_split = SplitObs::build(&problem, &complete).map_err(|e| anyhow!("{e}"))?;

    let est_opts = EstimateOptions {
        maximize: MaximizeOptions {
            grad_tol,
            max_iter,
            ..MaximizeOptions::default()
        },
        start: None,
        std_errors: false,
    };

    // p = 0 row: the complete-data baseline, one run, shared by all columns.
    let nfxpc_path = cell_path(&out_dir, model, "nfxp-c", 0.0, 0);
    if !nfxpc_path.exists() {
        let result = nfxp_estimate(&problem, &complete_split, NfxpMode::Complete, &est_opts)
            .map_err(|e| anyhow!("{e}"))?;
        let complete_ll = evaluate_complete_ll(&problem, &complete, &result.params())
            .map_err(|e| anyhow!("{e}"))?;
        let rec = CellRecord {
            model: model.to_string(),
            algorithm: "nfxp-c".into(),
            p: 0.0,
            seed_index: 0,
            dataset_seed: sim_seed,
            complete_ll,
            theta_l2_error_vs_truth: Some(l2_err(&result.theta, &truth.theta)),
            result,
        };
        atomic_write(&nfxpc_path, &serde_json::to_string_pretty(&rec)?)?;
        eprintln!("p=0.0 nfxp-c: complete ll {complete_ll:.4}");
    }

    // Sweep cells.
    struct CellSpec {
        p: f64,
        p_idx: usize,
        seed_index: usize,
        algo: String,
    }
    let mut specs = Vec::new();
    for (p_idx, &p) in p_grid.iter().enumerate() {
        for seed_index in 0..n_seeds {
            for algo in &algos {
                specs.push(CellSpec {
                    p,
                    p_idx,
                    seed_index,
                    algo: algo.clone(),
                });
            }
        }
    }
    let n_cells = specs.len();
    let outcomes: Vec<(String, Option<String>, bool)> = specs
        .par_iter()
        .map(|spec| {
            let name = format!("{model}/{}/p{}/s{}", spec.algo, spec.p, spec.seed_index);
            let path = cell_path(&out_dir, model, &spec.algo, spec.p, spec.seed_index);
            if path.exists() {
                return (name, None, true);
            }
            let dataset_index = (spec.p_idx * n_seeds + spec.seed_index) as u64;
            let dataset_seed = base_seed + dataset_index;
            let run = || -> Result<CellRecord> {
                let (corrupted, _) =
                    corrupt_trips(&complete, spec.p, dataset_seed).map_err(|e| anyhow!("{e}"))?;
                let split = SplitObs::build(&problem, &corrupted).map_err(|e| anyhow!("{e}"))?;
                let setup = EstimateSetup {
                    problem: problem.clone(),
                    split,
                    est_opts: est_opts.clone(),
                    em_opts: EmOptions {
                        xi,
                        samples,
                        exact: exact_e,
                        seed: dataset_seed ^ 0xe,
                        track_marginal_ll: false,
                        m_step: MaximizeOptions {
                            grad_tol,
                            ..MaximizeOptions::default()
                        },
                        ..EmOptions::default()
                    },
                };
                let (result, _) = run_algorithm(&setup, &spec.algo)?;
                let complete_ll = evaluate_complete_ll(&problem, &complete, &result.params())
                    .map_err(|e| anyhow!("{e}"))?;
                Ok(CellRecord {
                    model: model.to_string(),
                    algorithm: spec.algo.clone(),
                    p: spec.p,
                    seed_index: spec.seed_index,
                    dataset_seed,
                    complete_ll,
                    theta_l2_error_vs_truth: Some(l2_err(&result.theta, &truth.theta)),
                    result,
                })
            };
            match run() {
                Ok(rec) => {
                    let json = serde_json::to_string_pretty(&rec).expect("serializable record");
                    if let Err(e) = atomic_write(&path, &json) {
                        return (name, Some(format!("{e:#}")), false);
                    }
                    eprintln!("done {name}: complete ll {:.4}", rec.complete_ll);
                    (name, None, false)
                }
                Err(e) => {
                    eprintln!("FAILED {name}: {e:#}");
                    (name, Some(format!("{e:#}")), false)
                }
            }
        })
        .collect();

    let skipped = outcomes.iter().filter(|(_, err, sk)| err.is_none() && *sk).count();
    let failed: Vec<FailedCell> = outcomes
        .iter()
        .filter_map(|(name, err, _)| {
            err.as_ref().map(|e| FailedCell {
                cell: name.clone(),
                error: e.clone(),
            })
        })
        .collect();
    let computed = n_cells - skipped - failed.len();

    // Aggregate from the per-run files on disk.
    let cells = read_cells(&out_dir)?;
    write_results_csv(&out_dir, &cells, &algos)?;
    write_plotdata_csv(&out_dir, &cells, &algos)?;

    let report = SweepReport {
        config: cfg.echo(),
        n_cells,
        computed,
        skipped,
        failed,
        destinations: dests
            .iter()
            .map(|d| net.node_names[d.0].clone())
            .collect(),
        true_theta,
        true_omega,
    };
    atomic_write(
        &out_dir.join("sweep_report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    eprintln!(
        "sweep finished: {computed} computed, {skipped} skipped, {} failed; tables in {}",
        report.failed.len(),
        out_dir.display()
    );
    if !report.failed.is_empty() {
        eprintln!("note: failed cells are retried on rerun");
    }
    Ok(())
}

fn l2_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn read_cells(dir: &Path) -> Result<Vec<CellRecord>> {
    let mut cells = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("cell_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    for path in names {
        let text = fs::read_to_string(&path)?;
        let rec: CellRecord =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cells.push(rec);
    }
    Ok(cells)
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct AggRow {
    model: String,
    p: f64,
    algorithm: String,
    n_runs: usize,
    ll: (f64, f64),
    iter_time: (f64, f64),
    total_time: (f64, f64),
}

fn aggregate(cells: &[CellRecord], algos: &[String]) -> Vec<AggRow> {
    let mut keys: Vec<(String, f64, String)> = Vec::new();
    for c in cells {
        let key = (c.model.clone(), c.p, c.algorithm.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort_by(|a, b| {
        (a.0.as_str(), a.1, a.2.as_str())
            .partial_cmp(&(b.0.as_str(), b.1, b.2.as_str()))
            .unwrap()
    });
    let mut rows = Vec::new();
    for (model, p, algo) in keys {
        let group: Vec<&CellRecord> = cells
            .iter()
            .filter(|c| c.model == model && c.p == p && c.algorithm == algo)
            .collect();
        let lls: Vec<f64> = group.iter().map(|c| c.complete_ll).collect();
        let iters: Vec<f64> = group.iter().map(|c| c.result.per_iteration_time_s).collect();
        let totals: Vec<f64> = group.iter().map(|c| c.result.total_time_s).collect();
        let row = AggRow {
            model: model.clone(),
            p,
            algorithm: algo.clone(),
            n_runs: group.len(),
            ll: mean_stderr(&lls),
            iter_time: mean_stderr(&iters),
            total_time: mean_stderr(&totals),
        };
        // The p = 0 baseline is a single shared value: mirror it across
        // every algorithm column, as in the reported tables.
        if p == 0.0 && algo == "nfxp-c" {
            for a in algos {
                rows.push(AggRow {
                    model: model.clone(),
                    p,
                    algorithm: a.clone(),
                    n_runs: row.n_runs,
                    ll: row.ll,
                    iter_time: row.iter_time,
                    total_time: row.total_time,
                });
            }
        }
        rows.push(row);
    }
    rows
}

fn write_results_csv(dir: &Path, cells: &[CellRecord], algos: &[String]) -> Result<()> {
    let rows = aggregate(cells, algos);
    let mut out = String::from(
        "model,p,algorithm,n_runs,ll_mean,ll_stderr,iter_time_mean,iter_time_stderr,total_time_mean,total_time_stderr\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.model,
            r.p,
            r.algorithm,
            r.n_runs,
            r.ll.0,
            r.ll.1,
            r.iter_time.0,
            r.iter_time.1,
            r.total_time.0,
            r.total_time.1
        ));
    }
    fs::write(dir.join("results.csv"), out)?;
    Ok(())
}

fn write_plotdata_csv(dir: &Path, cells: &[CellRecord], algos: &[String]) -> Result<()> {
    let rows = aggregate(cells, algos);
    let mut out = String::from("quantity,model,algorithm,p,mean,stderr\n");
    for r in &rows {
        out.push_str(&format!(
            "complete_ll,{},{},{},{:.6},{:.6}\n",
            r.model, r.algorithm, r.p, r.ll.0, r.ll.1
        ));
    }
    for r in &rows {
        out.push_str(&format!(
            "per_iteration_time_s,{},{},{},{:.6},{:.6}\n",
            r.model, r.algorithm, r.p, r.iter_time.0, r.iter_time.1
        ));
    }
    for r in &rows {
        out.push_str(&format!(
            "total_time_s,{},{},{},{:.6},{:.6}\n",
            r.model, r.algorithm, r.p, r.total_time.0, r.total_time.1
        ));
    }
    fs::write(dir.join("plotdata.csv"), out)?;
    Ok(())
}
