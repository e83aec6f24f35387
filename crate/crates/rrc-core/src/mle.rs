//! Maximum-likelihood driver: a limited-memory quasi-Newton ascent with
//! backtracking line search, the two nested-fixed-point baselines (complete
//! data / connected pairs only), the exact incomplete-data estimator, and
//! complete-data evaluation of parameter estimates.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::choice::{pair_log_likelihood, Model, ParamVector, Problem};
use crate::dc::{dc_log_likelihood, DcStats, SplitObs};
use crate::error::{Error, Result};
use crate::linalg::invert_small;
use crate::obs::ObservationSet;

/// Options for [`maximize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaximizeOptions {
    /// Stop when the gradient infinity norm drops below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Curvature pairs kept by the limited-memory update.
    pub memory: usize,
    /// Sufficient-increase constant of the backtracking line search.
    pub c1: f64,
    /// Step shrink factor.
    pub shrink: f64,
    /// Backtracking attempts per iteration.
    pub max_ls: usize,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        MaximizeOptions {
            grad_tol: 1e-6,
            max_iter: 500,
            memory: 10,
            c1: 1e-4,
            shrink: 0.5,
            max_ls: 60,
        }
    }
}

/// Why the ascent stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    GradTol,
    StepStagnation,
    LineSearchFailed,
    MaxIter,
}

/// Outcome of [`maximize`].
#[derive(Debug, Clone)]
pub struct MaximizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub fn_evals: u64,
    pub converged: bool,
    pub reason: StopReason,
    pub line_search_failed: bool,
    /// Objective value after each accepted step (starts with f(x0)).
    pub values: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Maximizes `obj` by L-BFGS ascent with a backtracking (sufficient
/// increase) line search. The objective returns `-inf` for infeasible
/// points; the line search backs away from them, and an infeasible start is
/// an error. Accepted steps never decrease the objective.
pub fn maximize<F>(obj: &mut F, x0: &[f64], opts: &MaximizeOptions) -> Result<MaximizeResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fn_evals = 1u64;
    let (mut f, mut g) = obj(&x);
    if !f.is_finite() {
        return Err(Error::Infeasible(format!(
            "objective is {f} at the starting point"
        )));
    }
    let mut values = vec![f];
    // Curvature history in minimization convention (phi = -f):
    // s = x_{k+1} - x_k, y = grad_phi_{k+1} - grad_phi_k = -(g_{k+1} - g_k).
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut ls_failures = 0u32;

    let mut reason = StopReason::MaxIter;
    let mut iterations = 0usize;
    for _ in 0..opts.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm <= opts.grad_tol {
            reason = StopReason::GradTol;
            break;
        }

        // Two-loop recursion on grad_phi = -g gives the descent direction
        // for phi, i.e. an ascent direction for f.
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let ys = dot(y, s);
            let yy = dot(y, y);
            if yy > 0.0 {
                let gamma = ys / yy;
                for qi in q.iter_mut() {
                    *qi *= gamma;
                }
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += (a - b) * s[i];
            }
        }
        // q is now the descent direction for phi; ascent direction for f.
        let p: Vec<f64> = q.iter().map(|v| -v).collect();
        let slope = dot(&g, &p); // d f / d alpha at alpha = 0
        let p = if slope <= 0.0 {
            // History produced a non-ascent direction; reset to gradient.
            hist.clear();
            g.clone()
        } else {
            p
        };
        let slope = dot(&g, &p);

        let mut line_search = |p: &[f64], slope: f64, fn_evals: &mut u64| {
            let mut alpha = 1.0;
            for _ in 0..opts.max_ls {
                let xt: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + alpha * b).collect();
                *fn_evals += 1;
                let (ft, gt) = obj(&xt);
                if ft.is_finite() && ft >= f + opts.c1 * alpha * slope {
                    return Some((xt, ft, gt));
                }
                alpha *= opts.shrink;
            }
            None
        };
        let mut accepted = line_search(&p, slope, &mut fn_evals);
        if accepted.is_none() && !hist.is_empty() {
            // Stale curvature can produce a direction the objective rejects
            // even at tiny steps; drop the history and retry with the plain
            // gradient before giving up.
            ls_failures += 1;
            hist.clear();
            let gdir = g.clone();
            let slope = dot(&gdir, &gdir);
            accepted = line_search(&gdir, slope, &mut fn_evals);
        }
        let Some((xt, ft, gt)) = accepted else {
            ls_failures += 1;
            reason = StopReason::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = xt.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(gt.iter()).map(|(old, new)| old - new).collect();
        let sy = dot(&s, &y);
        let s_norm = inf_norm(&s);
        if sy > 1e-12 * inf_norm(&y).max(1e-300) * s_norm.max(1e-300) {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            let rho = 1.0 / sy;
            hist.push_back((s.clone(), y, rho));
        }
        x = xt;
        f = ft;
        g = gt;
        values.push(f);
        iterations += 1;
        if s_norm <= 1e-14 * (1.0 + inf_norm(&x)) {
            reason = StopReason::StepStagnation;
            break;
        }
    }
    if reason == StopReason::MaxIter && inf_norm(&g) <= opts.grad_tol {
        reason = StopReason::GradTol;
    }

    let grad_norm = inf_norm(&g);
    Ok(MaximizeResult {
        x,
        value: f,
        grad_norm,
        grad: g,
        iterations,
        fn_evals,
        converged: reason == StopReason::GradTol,
        reason,
        line_search_failed: reason == StopReason::LineSearchFailed || ls_failures > 0,
        values,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Free-form run diagnostics carried by every estimation result.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fn_evals: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flat_objective: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line_search_failed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_backoff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_destinations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composed_solves_total: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composed_solves_last_eval: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_composed_solves_per_eval: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve_count_audit_ok: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_value_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_composed_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_occurrences: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_accepted_walks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_attempted_walks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_exact_fallbacks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_guided_fallbacks: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_m_step_iterations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_m_step_failed: Option<bool>,
}

/// Final state of one estimation run. Serialized as the run-report JSON; the
/// timing fields are the only parts that vary across identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub algorithm: String,
    pub model: Model,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub mu: f64,
    pub ll_at_solution: f64,
    pub iterations: usize,
    pub total_time_s: f64,
    pub per_iteration_time_s: f64,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    pub fn params(&self) -> ParamVector {
        ParamVector {
            theta: self.theta.clone(),
            omega: self.omega.clone(),
            mu: self.mu,
        }
    }
}

/// Estimator configuration shared by DC and the NFXP baselines.
#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    pub maximize: MaximizeOptions,
    /// Explicit start; `None` starts from zero with automatic feasibility
    /// backoff.
    pub start: Option<ParamVector>,
    /// Compute inverse-Hessian standard errors at the solution (diagnostic).
    pub std_errors: bool,
}

impl EstimateOptions {
    pub fn new() -> Self {
        EstimateOptions {
            maximize: MaximizeOptions::default(),
            start: None,
            std_errors: false,
        }
    }
}

/// Resolves the starting point. Zero coefficients keep utilities at the
/// feature-free baseline, but on cyclic networks the value system can be
/// infeasible there; in that case the utility coefficients back off along
/// `-c * 1` until the probe succeeds. An explicitly supplied start is used
/// as-is (the optimizer reports infeasibility if it is bad).
pub fn resolve_start<F>(
    problem: &Problem,
    explicit: Option<ParamVector>,
    mut probe: F,
) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if let Some(p) = explicit {
        if p.theta.len() != problem.n_theta() || p.omega.len() != problem.n_omega() {
            return Err(Error::Dimension(format!(
                "start has shape ({}, {}), problem needs ({}, {})",
                p.theta.len(),
                p.omega.len(),
                problem.n_theta(),
                problem.n_omega()
            )));
        }
        return Ok(p);
    }
    let mut params = ParamVector::zeros(problem.n_theta(), problem.n_omega());
    let mut backoff = 0.5;
    loop {
        let feasible = match probe(&params) {
            Ok(v) => v.is_finite(),
            Err(e) if e.is_infeasible() => false,
            Err(e) => return Err(e),
        };
        if feasible {
            return Ok(params);
        }
        if backoff > 1024.0 {
            return Err(Error::Infeasible(
                "no feasible starting point found (do zero-utility cycles exist?)".into(),
            ));
        }
        params.theta = vec![-backoff; problem.n_theta()];
        backoff *= 2.0;
    }
}

fn backoff_magnitude(p: &ParamVector) -> Option<f64> {
    let c = -p.theta.first().copied().unwrap_or(0.0);
    if c > 0.0 && p.theta.iter().all(|&t| t == -c) {
        Some(c)
    } else {
        None
    }
}

/// Which pairs the nested-fixed-point baseline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfxpMode {
    /// All pairs; requires fully connected trips.
    Complete,
    /// Connected pairs only; unconnected ones are ignored.
    IgnoreUnconnected,
}

/// Nested-fixed-point baseline: maximizes the connected-pair likelihood,
/// solving the value systems per destination inside every objective
/// evaluation.
pub fn nfxp_estimate(
    problem: &Problem,
    split: &SplitObs,
    mode: NfxpMode,
    opts: &EstimateOptions,
) -> Result<EstimationResult> {
    if mode == NfxpMode::Complete && !split.is_complete() {
        return Err(Error::InvalidInput(format!(
            "complete-data estimation requires fully connected trips ({} unconnected pairs found)",
            split.n_unconnected()
        )));
    }
    let t0 = Instant::now();
    let weighted = split.connected_weights();
    let mu = opts.start.as_ref().map(|p| p.mu).unwrap_or(1.0);
    let start = resolve_start(problem, opts.start.clone(), |p| {
        pair_log_likelihood(problem, &weighted, p, false).map(|(v, _, _)| v)
    })?;
    let backoff = backoff_magnitude(&start);

    let mut obj = |x: &[f64]| -> (f64, Vec<f64>) {
        let p = problem.params_from_flat(x, mu);
        match pair_log_likelihood(problem, &weighted, &p, true) {
            Ok((v, g, _)) => (v, g),
            Err(_) => (f64::NEG_INFINITY, vec![0.0; x.len()]),
        }
    };
    let t_opt = Instant::now();
    let m = maximize(&mut obj, &start.flat(), &opts.maximize)?;
    let opt_time = t_opt.elapsed().as_secs_f64();
    let std_errors = if opts.std_errors {
        std_errors_fd(&mut obj, &m.x)
    } else {
        None
    };
    let total = t0.elapsed().as_secs_f64();
    let params = problem.params_from_flat(&m.x, mu);
    Ok(EstimationResult {
        algorithm: match mode {
            NfxpMode::Complete => "nfxp-c".into(),
            NfxpMode::IgnoreUnconnected => "nfxp-i".into(),
        },
        model: problem.model,
        theta: params.theta,
        omega: params.omega,
        mu,
        ll_at_solution: m.value,
        iterations: m.iterations,
        total_time_s: total,
        // optimizer wall time over outer iterations
        per_iteration_time_s: opt_time / m.iterations.max(1) as f64,
        converged: m.converged,
        diagnostics: Diagnostics {
            grad_norm: Some(m.grad_norm),
            fn_evals: Some(m.fn_evals),
            stop_reason: Some(format!("{:?}", m.reason)),
            flat_objective: if m.iterations == 0 && m.grad_norm == 0.0 {
                Some(true)
            } else {
                None
            },
            line_search_failed: if m.line_search_failed { Some(true) } else { None },
            start_backoff: backoff,
            n_destinations: Some(problem.dests.len()),
            std_errors,
            ..Diagnostics::default()
        },
    })
}

/// Exact incomplete-data estimator: maximizes [`dc_log_likelihood`].
///
/// The per-evaluation composed-solve count is audited against
/// `(n_params + 1) * n_dest_with_queries`.
pub fn dc_estimate(
    problem: &Problem,
    split: &SplitObs,
    opts: &EstimateOptions,
) -> Result<EstimationResult> {
    let t0 = Instant::now();
    let mu = opts.start.as_ref().map(|p| p.mu).unwrap_or(1.0);
    let start = resolve_start(problem, opts.start.clone(), |p| {
        dc_log_likelihood(problem, split, p, false).map(|(v, _, _)| v)
    })?;
    let backoff = backoff_magnitude(&start);

    let n_params = problem.n_params() as u64;
    let mut total_stats = DcStats::default();
    let mut last_eval = DcStats::default();
    let mut audit_ok = true;
    let mut obj = |x: &[f64]| -> (f64, Vec<f64>) {
        let p = problem.params_from_flat(x, mu);
        match dc_log_likelihood(problem, split, &p, true) {
            Ok((v, g, stats)) => {
                total_stats.absorb(stats);
                last_eval = stats;
                let expected = (n_params + 1) * stats.n_dest_with_queries;
                if stats.composed_solves != expected {
                    audit_ok = false;
                }
                (v, g)
            }
            Err(_) => (f64::NEG_INFINITY, vec![0.0; x.len()]),
        }
    };
    let t_opt = Instant::now();
    let m = maximize(&mut obj, &start.flat(), &opts.maximize)?;
    let opt_time = t_opt.elapsed().as_secs_f64();
    let std_errors = if opts.std_errors {
        std_errors_fd(&mut obj, &m.x)
    } else {
        None
    };
    let expected = (n_params + 1) * last_eval.n_dest_with_queries;
    let total = t0.elapsed().as_secs_f64();
    let params = problem.params_from_flat(&m.x, mu);
    Ok(EstimationResult {
        algorithm: "dc".into(),
        model: problem.model,
        theta: params.theta,
        omega: params.omega,
        mu,
        ll_at_solution: m.value,
        iterations: m.iterations,
        total_time_s: total,
        // optimizer wall time over outer iterations
        per_iteration_time_s: opt_time / m.iterations.max(1) as f64,
        converged: m.converged,
        diagnostics: Diagnostics {
            grad_norm: Some(m.grad_norm),
            fn_evals: Some(m.fn_evals),
            stop_reason: Some(format!("{:?}", m.reason)),
            line_search_failed: if m.line_search_failed { Some(true) } else { None },
            start_backoff: backoff,
            n_destinations: Some(problem.dests.len()),
            composed_solves_total: Some(total_stats.composed_solves),
            composed_solves_last_eval: Some(last_eval.composed_solves),
            expected_composed_solves_per_eval: Some(expected),
            solve_count_audit_ok: Some(audit_ok),
            max_value_residual: Some(total_stats.max_value_residual),
            max_composed_residual: Some(total_stats.max_composed_residual),
            std_errors,
            ..Diagnostics::default()
        },
    })
}

/// Standard complete-path log-likelihood of an estimate on fully connected
/// observations.
pub fn evaluate_complete_ll(
    problem: &Problem,
    obs: &ObservationSet,
    params: &ParamVector,
) -> Result<f64> {
    let split = SplitObs::build(problem, obs)?;
    if !split.is_complete() {
        return Err(Error::InvalidInput(format!(
            "evaluation data must be fully connected ({} unconnected pairs found)",
            split.n_unconnected()
        )));
    }
    let (ll, _, _) = pair_log_likelihood(problem, &split.connected_weights(), params, false)?;
    Ok(ll)
}

/// Inverse-numeric-Hessian standard errors at the solution (diagnostic
/// only). Central differences of the analytic gradient; `None` when the
/// Hessian is singular or not negative-definite.
fn std_errors_fd<F>(obj: &mut F, x: &[f64]) -> Option<Vec<f64>>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x.len();
    if n == 0 {
        return None;
    }
    let h = 1e-5;
    let mut hess = vec![0.0; n * n];
    for j in 0..n {
        let mut xp = x.to_vec();
        xp[j] += h;
        let (_, gp) = obj(&xp);
        let mut xm = x.to_vec();
        xm[j] -= h;
        let (_, gm) = obj(&xm);
        if !gp.iter().all(|v| v.is_finite()) || !gm.iter().all(|v| v.is_finite()) {
            return None;
        }
        for i in 0..n {
            hess[i * n + j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    // Symmetrize, negate (information matrix), invert.
    let mut info = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            info[i * n + j] = -0.5 * (hess[i * n + j] + hess[j * n + i]);
        }
    }
    let inv = invert_small(&info, n)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let v = inv[i * n + i];
        if v <= 0.0 {
            return None;
        }
        out.push(v.sqrt());
    }
    Some(out)
}
