//! The EM estimator: the E step fills each unconnected pair with sampled
//! connecting paths (random walks following the current link probabilities,
//! accepted on first arrival), the M step maximizes the resulting weighted
//! expected log-likelihood, and the loop runs to a fixed point in the
//! parameters.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{
    pair_log_likelihood, solve_value, DestModel, ParamVector, Problem, ValueField,
};
use crate::dc::{dc_log_likelihood, enumerate_connecting_paths, PairQuery, SplitObs};
use crate::error::{Error, Result};
use crate::mle::{
    maximize, resolve_start, Diagnostics, EstimationResult, MaximizeOptions,
};
use crate::network::LinkId;

/// One sampled (or enumerated) connecting path for an unconnected pair.
/// Weights over one pair's samples sum to 1; dummy fillers carry weight 0.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub path: Vec<LinkId>,
    pub weight: f64,
    /// ln P(path) at the sampling snapshot.
    pub log_prob: f64,
    pub is_dummy: bool,
}

/// EM configuration. `step_cap: None` derives a per-destination cap of four
/// times the longest hop distance to absorption.
#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Fixed-point tolerance on the parameter step (infinity norm).
    pub xi: f64,
    /// Path samples per unconnected pair occurrence.
    pub samples: usize,
    pub max_iter: usize,
    pub step_cap: Option<usize>,
    /// Walk attempts per requested sample before a pair is declared
    /// unsampleable.
    pub retry_cap: usize,
    /// Enumerate connecting paths exactly instead of sampling (small
    /// networks; removes sampling noise).
    pub exact: bool,
    /// Path-count budget for exact enumeration and for the fallback.
    pub exact_cap: usize,
    pub seed: u64,
    pub m_step: MaximizeOptions,
    /// Record the exact incomplete-data log-likelihood each iteration.
    pub track_marginal_ll: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            xi: 1e-4,
            samples: 5,
            max_iter: 100,
            step_cap: None,
            retry_cap: 50,
            exact: false,
            exact_cap: 10_000,
            seed: 0,
            m_step: MaximizeOptions::default(),
            track_marginal_ll: true,
        }
    }
}

/// E-step accounting.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EStepStats {
    pub occurrences: u64,
    pub accepted_walks: u64,
    pub attempted_walks: u64,
    pub exact_fallbacks: u64,
    pub guided_fallbacks: u64,
    pub dummy_samples: u64,
}

impl EStepStats {
    fn absorb(&mut self, o: EStepStats) {
        self.occurrences += o.occurrences;
        self.accepted_walks += o.accepted_walks;
        self.attempted_walks += o.attempted_walks;
        self.exact_fallbacks += o.exact_fallbacks;
        self.guided_fallbacks += o.guided_fallbacks;
        self.dummy_samples += o.dummy_samples;
    }
}

/// Samples up to `s` connecting paths for one pair by random walks from `u`
/// following the snapshot probabilities, accepted on first arrival at `v`,
/// rejected on absorption or at the step cap. Shortfalls are padded with
/// zero-weight dummies; weights are normalized over the pair.
///
/// Errors with `Unsampleable` when no walk is accepted within
/// `retry_cap * s` attempts.
pub fn sample_connecting_paths(
    dm: &DestModel,
    vf: &ValueField,
    pair: PairQuery,
    s: usize,
    step_cap: usize,
    retry_cap: usize,
    rng: &mut impl Rng,
    stats: &mut EStepStats,
) -> Result<Vec<PathSample>> {
    let ext = &dm.ext;
    let (u, v) = (pair.u, pair.v);
    if !vf.feasible[u.0] {
        return Err(Error::PrunedLink(u.0));
    }
    if !vf.feasible[v.0] {
        return Err(Error::PrunedLink(v.0));
    }
    let mut accepted: Vec<(Vec<LinkId>, f64)> = Vec::with_capacity(s);
    let max_attempts = retry_cap.saturating_mul(s).max(1);
    let mut attempts = 0usize;
    while accepted.len() < s && attempts < max_attempts {
        attempts += 1;
        stats.attempted_walks += 1;
        if u == v {
            accepted.push((vec![u], 0.0));
            stats.accepted_walks += 1;
            continue;
        }
        let mut cur = u;
        let mut logp = 0.0f64;
        let mut path = vec![u];
        let mut ok = None;
        for _ in 0..step_cap {
            let range = ext.pair_range(cur.0);
            let total: f64 = range.clone().map(|p| vf.probs[p]).sum();
            if total <= 0.0 {
                ok = Some(false);
                break;
            }
            let mut draw = rng.random::<f64>() * total;
            let mut pick = range.end - 1;
            for p in range.clone() {
                draw -= vf.probs[p];
                if draw <= 0.0 {
                    pick = p;
                    break;
                }
            }
            let next = ext.succ_at(pick);
            logp += vf.probs[pick].ln();
            path.push(next);
            if next == v {
                ok = Some(true);
                break;
            }
            if next == ext.dummy {
                ok = Some(false); // absorbed before reaching v
                break;
            }
            cur = next;
        }
        if ok == Some(true) {
            accepted.push((path, logp));
            stats.accepted_walks += 1;
        }
    }
    if accepted.is_empty() {
        return Err(Error::Unsampleable {
            u: u.0,
            v: v.0,
            reason: format!("no accepted walk in {max_attempts} attempts"),
        });
    }
    // Self-normalized weights w_s = P(gamma_s) / sum_s' P(gamma_s').
    let maxlog = accepted
        .iter()
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = accepted.iter().map(|(_, l)| (l - maxlog).exp()).sum();
    let mut out: Vec<PathSample> = accepted
        .into_iter()
        .map(|(path, logp)| PathSample {
            path,
            weight: (logp - maxlog).exp() / norm,
            log_prob: logp,
            is_dummy: false,
        })
        .collect();
    while out.len() < s {
        stats.dummy_samples += 1;
        out.push(PathSample {
            path: Vec::new(),
            weight: 0.0,
            log_prob: f64::NEG_INFINITY,
            is_dummy: true,
        });
    }
    Ok(out)
}

/// Exact E step for one pair: every connecting path becomes a "sample" with
/// its true conditional weight.
pub fn exact_connecting_paths(
    dm: &DestModel,
    vf: &ValueField,
    pair: PairQuery,
    max_len: usize,
    cap: usize,
) -> Result<Vec<PathSample>> {
    let paths = enumerate_connecting_paths(dm, vf, pair.u, pair.v, max_len, cap)?;
    if paths.is_empty() {
        return Err(Error::Unsampleable {
            u: pair.u.0,
            v: pair.v.0,
            reason: "no connecting path exists".into(),
        });
    }
    let total: f64 = paths.iter().map(|(_, p)| p).sum();
    Ok(paths
        .into_iter()
        .map(|(path, p)| PathSample {
            path,
            weight: p / total,
            log_prob: p.ln(),
            is_dummy: false,
        })
        .collect())
}

/// Last-resort sampler for pairs that defeat both plain acceptance walks and
/// exact enumeration: walks guided by the reach probabilities of `v`. Each
/// step reweights the link probabilities by the chance of still hitting `v`
/// first (`P(a|k) * reach(a) / reach(k)`), which is exactly the conditional
/// law of connecting paths, so every walk arrives and no rejection is
/// needed. `reach` is the single-target solution for `v`.
pub fn guided_connecting_paths(
    dm: &DestModel,
    vf: &ValueField,
    pair: PairQuery,
    reach: &[f64],
    s: usize,
    step_cap: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PathSample>> {
    let ext = &dm.ext;
    let (u, v) = (pair.u, pair.v);
    if reach[u.0] <= 0.0 {
        return Err(Error::Unsampleable {
            u: u.0,
            v: v.0,
            reason: "no connecting path exists (zero reach probability)".into(),
        });
    }
    let mut accepted: Vec<(Vec<LinkId>, f64)> = Vec::with_capacity(s);
    'sample: for _ in 0..s {
        if u == v {
            accepted.push((vec![u], 0.0));
            continue;
        }
        let mut cur = u;
        let mut logp = 0.0f64;
        let mut path = vec![u];
        // conditioned walks terminate almost surely; the cap is a guard
        for _ in 0..step_cap.saturating_mul(64).max(1024) {
            let range = ext.pair_range(cur.0);
            let total: f64 = range
                .clone()
                .map(|p| {
                    let a = ext.succ_at(p);
                    let r = if a == v { 1.0 } else { reach[a.0] };
                    vf.probs[p] * r
                })
                .sum();
            if total <= 0.0 {
                continue 'sample; // numerically dead; drop this walk
            }
            let mut draw = rng.random::<f64>() * total;
            let mut pick = range.end - 1;
            for p in range.clone() {
                let a = ext.succ_at(p);
                let r = if a == v { 1.0 } else { reach[a.0] };
                draw -= vf.probs[p] * r;
                if draw <= 0.0 {
                    pick = p;
                    break;
                }
            }
            let next = ext.succ_at(pick);
            logp += vf.probs[pick].ln();
            path.push(next);
            if next == v {
                accepted.push((path, logp));
                continue 'sample;
            }
            cur = next;
        }
        // cap exhausted: drop the walk (padded below)
    }
    if accepted.is_empty() {
        return Err(Error::Unsampleable {
            u: u.0,
            v: v.0,
            reason: "guided walks did not terminate within the step budget".into(),
        });
    }
    let maxlog = accepted
        .iter()
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = accepted.iter().map(|(_, l)| (l - maxlog).exp()).sum();
    let mut out: Vec<PathSample> = accepted
        .into_iter()
        .map(|(path, logp)| PathSample {
            path,
            weight: (logp - maxlog).exp() / norm,
            log_prob: logp,
            is_dummy: false,
        })
        .collect();
    while out.len() < s {
        out.push(PathSample {
            path: Vec::new(),
            weight: 0.0,
            log_prob: f64::NEG_INFINITY,
            is_dummy: true,
        });
    }
    Ok(out)
}

/// The weighted expected log-likelihood R(theta | theta_t), stored as
/// per-destination weighted connected-pair counts: sigma-1 pairs at weight
/// 1 per occurrence plus every sampled path's pairs at the sample weight.
/// The weights are constants in theta, so the function and its gradient are
/// evaluable at any parameter point with the ordinary choice machinery.
#[derive(Debug, Clone)]
pub struct ExpectedLL {
    pub weighted: Vec<Vec<(usize, f64)>>,
    pub theta_t: Vec<f64>,
    /// Per-occurrence samples, kept for bookkeeping checks and traces.
    pub samples: Vec<Vec<PathSample>>,
}

/// Runs one E step at the snapshot parameters and assembles R-hat.
pub fn build_expected_ll(
    problem: &Problem,
    split: &SplitObs,
    params_t: &ParamVector,
    opts: &EmOptions,
    em_iter: usize,
) -> Result<(ExpectedLL, EStepStats)> {
    // Global occurrence index assigns each occurrence its own RNG stream.
    let mut occ_offset = vec![0usize; problem.dests.len()];
    let mut acc = 0usize;
    for (slot, d) in split.per_dest.iter().enumerate() {
        occ_offset[slot] = acc;
        acc += d.occurrences.len();
    }
    let seed = opts.seed.wrapping_add((em_iter as u64).wrapping_mul(0x9e3779b97f4a7c15));

    let per_dest: Vec<Result<(Vec<(usize, f64)>, Vec<Vec<PathSample>>, EStepStats)>> = problem
        .dests
        .par_iter()
        .zip(split.per_dest.par_iter())
        .enumerate()
        .map(|(slot, (dm, dobs))| {
            let mut stats = EStepStats::default();
            let mut weights: std::collections::BTreeMap<usize, f64> =
                dobs.connected.iter().cloned().collect();
            let mut sample_sets = Vec::with_capacity(dobs.occurrences.len());
            if dobs.occurrences.is_empty() {
                return Ok((weights.into_iter().collect(), sample_sets, stats));
            }
            let vf = solve_value(dm, params_t, problem.model, &problem.opts)?;
            let step_cap = opts.step_cap.unwrap_or(4 * dm.ext.max_depth.max(2));
            // Exact enumerations are identical across occurrences of the
            // same query; compute once per query. Reach vectors for the
            // guided fallback are shared across pairs with the same target.
            let mut exact_cache: Vec<Option<Vec<PathSample>>> = vec![None; dobs.queries.len()];
            let mut reach_cache: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
            for (i, &q) in dobs.occurrences.iter().enumerate() {
                let query = dobs.queries[q];
                stats.occurrences += 1;
                let samples = if opts.exact {
                    if exact_cache[q].is_none() {
                        exact_cache[q] = Some(exact_connecting_paths(
                            dm,
                            &vf,
                            query,
                            step_cap.max(dm.ext.n_ext()),
                            opts.exact_cap,
                        )?);
                    }
                    exact_cache[q].clone().unwrap()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((occ_offset[slot] + i) as u64);
                    match sample_connecting_paths(
                        dm,
                        &vf,
                        query,
                        opts.samples,
                        step_cap,
                        opts.retry_cap,
                        &mut rng,
                        &mut stats,
                    ) {
                        Ok(s) => s,
                        Err(Error::Unsampleable { .. }) => {
                            // Unsampleable pair: exact enumeration when the
                            // path set is small, otherwise reach-guided
                            // walks (the exact conditional, no rejection).
                            stats.exact_fallbacks += 1;
                            match exact_connecting_paths(
                                dm,
                                &vf,
                                query,
                                step_cap.max(dm.ext.n_ext()),
                                opts.exact_cap,
                            ) {
                                Ok(s) => s,
                                Err(Error::EnumerationOverflow { .. }) => {
                                    stats.guided_fallbacks += 1;
                                    if let std::collections::btree_map::Entry::Vacant(e) =
                                        reach_cache.entry(query.v.0)
                                    {
                                        e.insert(crate::dc::solve_reach_single(dm, &vf, query.v)?);
                                    }
                                    guided_connecting_paths(
                                        dm,
                                        &vf,
                                        query,
                                        &reach_cache[&query.v.0],
                                        opts.samples,
                                        step_cap,
                                        &mut rng,
                                    )?
                                }
                                Err(e) => return Err(e),
                            }
                        }
                        Err(e) => return Err(e),
                    }
                };
                for s in &samples {
                    if s.is_dummy {
                        continue;
                    }
                    for w in s.path.windows(2) {
                        let p = dm
                            .ext
                            .pair_index(w[0], w[1])
                            .expect("sampled paths follow adjacency");
                        *weights.entry(p).or_insert(0.0) += s.weight;
                    }
                }
                sample_sets.push(samples);
            }
            Ok((weights.into_iter().collect(), sample_sets, stats))
        })
        .collect();

    let mut weighted = Vec::with_capacity(problem.dests.len());
    let mut samples = Vec::new();
    let mut stats = EStepStats::default();
    for r in per_dest {
        let (w, s, st) = r?;
        weighted.push(w);
        samples.extend(s);
        stats.absorb(st);
    }
    Ok((
        ExpectedLL {
            weighted,
            theta_t: params_t.flat(),
            samples,
        },
        stats,
    ))
}

/// Evaluates R-hat (and gradient) at an arbitrary parameter point.
pub fn expected_ll(
    problem: &Problem,
    r_hat: &ExpectedLL,
    params: &ParamVector,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (v, g, _) = pair_log_likelihood(problem, &r_hat.weighted, params, with_grad)?;
    Ok((v, g))
}

/// One EM iteration record, emitted as a JSON line by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmTraceRecord {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marginal_ll: Option<f64>,
    pub wall_time_s: f64,
    pub m_step_iterations: usize,
}

/// Runs the EM loop: resample at the current parameters, maximize the
/// expected log-likelihood, stop when the parameter step drops below `xi`.
pub fn em_estimate(
    problem: &Problem,
    split: &SplitObs,
    opts: &EmOptions,
    start: Option<ParamVector>,
) -> Result<(EstimationResult, Vec<EmTraceRecord>)> {
    let t_total = Instant::now();
    let mu = start.as_ref().map(|p| p.mu).unwrap_or(1.0);
    let params0 = resolve_start(problem, start, |p| {
        // Feasibility probe: marginal likelihood value only.
        dc_log_likelihood(problem, split, p, false).map(|(ll, _, _)| ll)
    })?;

    let mut params = params0.clone();
    let mut trace: Vec<EmTraceRecord> = Vec::new();
    let mut marginal = if opts.track_marginal_ll {
        Some(dc_log_likelihood(problem, split, &params, false)?.0)
    } else {
        None
    };
    trace.push(EmTraceRecord {
        iter: 0,
        theta: params.theta.clone(),
        omega: params.omega.clone(),
        step_norm: None,
        r_hat: None,
        marginal_ll: marginal,
        wall_time_s: 0.0,
        m_step_iterations: 0,
    });

    let mut e_stats = EStepStats::default();
    let mut m_iters_total = 0u64;
    let mut converged = false;
    let mut m_step_failed = false;
    let mut iterations = 0usize;
    let t_loop = Instant::now();

    for it in 0..opts.max_iter {
        let t_iter = Instant::now();
        let (r_hat, st) = build_expected_ll(problem, split, &params, opts, it)?;
        e_stats.absorb(st);

        let mut obj = |x: &[f64]| -> (f64, Vec<f64>) {
            let p = problem.params_from_flat(x, mu);
            match expected_ll(problem, &r_hat, &p, true) {
                Ok((v, g)) => (v, g),
                Err(_) => (f64::NEG_INFINITY, vec![0.0; x.len()]),
            }
        };
        let m = maximize(&mut obj, &params.flat(), &opts.m_step)?;
        m_iters_total += m.iterations as u64;
        if m.line_search_failed && m.iterations == 0 {
            m_step_failed = true;
        }
        let next = problem.params_from_flat(&m.x, mu);
        let step_norm = next
            .flat()
            .iter()
            .zip(params.flat().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        params = next;
        iterations = it + 1;

        marginal = if opts.track_marginal_ll {
            Some(dc_log_likelihood(problem, split, &params, false)?.0)
        } else {
            None
        };
        trace.push(EmTraceRecord {
            iter: iterations,
            theta: params.theta.clone(),
            omega: params.omega.clone(),
            step_norm: Some(step_norm),
            r_hat: Some(m.value),
            marginal_ll: marginal,
            wall_time_s: t_iter.elapsed().as_secs_f64(),
            m_step_iterations: m.iterations,
        });

        if m_step_failed {
            break;
        }
        if step_norm < opts.xi {
            converged = true;
            break;
        }
    }

    let loop_time = t_loop.elapsed().as_secs_f64();
    let ll_final = match marginal {
        Some(v) => v,
        None => dc_log_likelihood(problem, split, &params, false)?.0,
    };
    let total = t_total.elapsed().as_secs_f64();
    let result = EstimationResult {
        algorithm: "em".into(),
        model: problem.model,
        theta: params.theta.clone(),
        omega: params.omega.clone(),
        mu: params.mu,
        ll_at_solution: ll_final,
        iterations,
        total_time_s: total,
        // E/M loop wall time over EM iterations
        per_iteration_time_s: loop_time / iterations.max(1) as f64,
        converged,
        diagnostics: Diagnostics {
            em_occurrences: Some(e_stats.occurrences),
            em_accepted_walks: Some(e_stats.accepted_walks),
            em_attempted_walks: Some(e_stats.attempted_walks),
            em_exact_fallbacks: Some(e_stats.exact_fallbacks),
            em_guided_fallbacks: Some(e_stats.guided_fallbacks),
            em_m_step_iterations: Some(m_iters_total),
            em_m_step_failed: if m_step_failed { Some(true) } else { None },
            ..Diagnostics::default()
        },
    };
    Ok((result, trace))
}
