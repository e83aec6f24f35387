//! Exact reach probabilities for unconnected observation pairs.
//!
//! For an unconnected pair `(u, v)` the probability of the missing segment
//! is the probability of reaching `v` from `u` under the current link
//! choice probabilities. Three routes to that number live here:
//!
//! * [`brute_force_reach`] enumerates connecting paths and sums their
//!   probabilities — the oracle, exact on acyclic networks;
//! * [`solve_reach_single`] solves one absorbing linear system per target
//!   link, with the target's row zeroed (true first-arrival probability);
//! * the composed system: all pairs sharing a destination are answered by
//!   one factorization of `(I - Q0)` applied to a block of right-hand
//!   sides, one column per pair. `Q0` holds `P(s|s')` at entry `(s, s')`
//!   with an extra all-zero last row and column for the artificial start
//!   link, and column `j` of `H` has ones at `u_j` and the artificial link.
//!
//! On networks where `v` can be revisited the composed solution is an
//! expected visit count rather than a probability; the two solvers agree on
//! acyclic networks and [`reach_discrepancy`] measures the gap elsewhere.
//!
//! The incomplete-data log-likelihood assembled from these pieces is
//! [`dc_log_likelihood`]; its per-evaluation cost is one composed
//! factorization and `n_params + 1` composed solves per destination that
//! has unconnected pairs, independent of how many pairs there are.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{
    solve_value, solve_value_and_gradients, DestModel, ParamVector, Problem, ValueField,
};
use crate::error::{Error, Result};
use crate::linalg::{Coo, Mat, SparseLu};
use crate::network::LinkId;
use crate::obs::{split_trip, ObservationSet};

/// Probabilities at or below this floor make a parameter point infeasible
/// (log-of-zero); they are reported, never clamped.
pub const PROB_FLOOR: f64 = 1e-300;

/// Residual tolerance for the reach linear systems.
pub const REACH_RESID_TOL: f64 = 1e-12;

/// Path enumeration budget for the brute-force oracle.
pub const ENUM_CAP: usize = 1_000_000;

/// An unconnected observation pair for one destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairQuery {
    pub u: LinkId,
    pub v: LinkId,
}

/// Enumerates paths from `u` to `v` following positive-probability pairs,
/// stopping each path at its first arrival at `v`. Returns `(links, prob)`
/// per path. `u == v` yields the single empty path with probability 1.
///
/// Exact on acyclic networks; on cyclic ones `max_len` truncates. Errors
/// when more than `cap` paths (or path-extension steps) are needed.
pub fn enumerate_connecting_paths(
    dm: &DestModel,
    vf: &ValueField,
    u: LinkId,
    v: LinkId,
    max_len: usize,
    cap: usize,
) -> Result<Vec<(Vec<LinkId>, f64)>> {
    let ext = &dm.ext;
    if !vf.feasible[u.0] {
        return Err(Error::PrunedLink(u.0));
    }
    if !vf.feasible[v.0] {
        return Err(Error::PrunedLink(v.0));
    }
    if u == v {
        return Ok(vec![(vec![u], 1.0)]);
    }
    let mut out: Vec<(Vec<LinkId>, f64)> = Vec::new();
    let mut work = 0usize;
    // Iterative DFS over (link, pair-iterator position, prob so far).
    let mut path: Vec<LinkId> = vec![u];
    let mut probs: Vec<f64> = vec![1.0];
    let mut cursors: Vec<std::ops::Range<usize>> = vec![ext.pair_range(u.0)];
    while let Some(top) = cursors.last_mut() {
        match top.next() {
            None => {
                cursors.pop();
                path.pop();
                probs.pop();
            }
            Some(p) => {
                let prob = vf.probs[p];
                if prob <= 0.0 {
                    continue;
                }
                work += 1;
                if work > cap.saturating_mul(64) {
                    return Err(Error::EnumerationOverflow { cap });
                }
                let a = ext.succ_at(p);
                let acc = probs.last().unwrap() * prob;
                if a == v {
                    let mut full = path.clone();
                    full.push(a);
                    out.push((full, acc));
                    if out.len() > cap {
                        return Err(Error::EnumerationOverflow { cap });
                    }
                    continue; // first arrival: do not extend past v
                }
                if a == ext.dummy {
                    continue; // absorbed before reaching v
                }
                if path.len() >= max_len {
                    continue;
                }
                path.push(a);
                probs.push(acc);
                cursors.push(ext.pair_range(a.0));
            }
        }
    }
    Ok(out)
}

/// Oracle reach probability by full path enumeration (Eq.-(4)-style sum).
pub fn brute_force_reach(
    dm: &DestModel,
    vf: &ValueField,
    u: LinkId,
    v: LinkId,
    max_len: usize,
) -> Result<f64> {
    let paths = enumerate_connecting_paths(dm, vf, u, v, max_len, ENUM_CAP)?;
    Ok(paths.iter().map(|(_, p)| p).sum())
}

/// Solves the single-target absorbing system: the probability of reaching
/// `target` from every link, with the target's own row zeroed so arrival is
/// absorbing. Entries lie in [0, 1].
pub fn solve_reach_single(dm: &DestModel, vf: &ValueField, target: LinkId) -> Result<Vec<f64>> {
    let ext = &dm.ext;
    if !vf.feasible[target.0] {
        return Err(Error::PrunedLink(target.0));
    }
    let n = ext.n_ext();
    let mut q = Coo::new(n);
    for (p, k, a) in ext.pairs() {
        if k == target {
            continue;
        }
        let prob = vf.probs[p];
        if prob > 0.0 {
            q.push(k.0, a.0, prob);
        }
    }
    let lu = SparseLu::identity_minus(&q)?;
    let mut h = vec![0.0; n];
    h[target.0] = 1.0;
    let pi = lu.solve_vec(&h);
    let qpi = q.mul_vec(&pi);
    let mut resid = 0.0f64;
    for s in 0..n {
        resid = resid.max((pi[s] - qpi[s] - h[s]).abs());
    }
    if resid > REACH_RESID_TOL {
        return Err(Error::LinearSolve(format!(
            "per-pair reach residual {resid:.3e} exceeds {REACH_RESID_TOL:.1e}"
        )));
    }
    for (s, &x) in pi.iter().enumerate() {
        if vf.feasible[s] && !(-1e-9..=1.0 + 1e-9).contains(&x) {
            return Err(Error::LinearSolve(format!(
                "reach probability pi[{s}] = {x} outside [0, 1]"
            )));
        }
    }
    Ok(pi)
}

/// The composed multi-pair system for one destination.
pub struct ComposedSystem {
    /// System size: extended links plus the artificial start link.
    pub n: usize,
    pub queries: Vec<PairQuery>,
    q0: Coo,
    h: Mat<f64>,
    lu: Option<SparseLu>,
    /// Multi-RHS solve applications performed on this factorization.
    pub solves: u64,
}

impl ComposedSystem {
    fn factorize(&mut self) -> Result<&SparseLu> {
        if self.lu.is_none() {
            self.lu = Some(SparseLu::identity_minus(&self.q0)?);
        }
        Ok(self.lu.as_ref().unwrap())
    }

    /// Applies the cached factorization to a block of right-hand sides.
    fn solve_block(&mut self, rhs: &Mat<f64>) -> Result<Mat<f64>> {
        let lu = self.factorize()?;
        let x = lu.solve_mat(rhs);
        self.solves += 1;
        Ok(x)
    }

    fn residual(&self, x: &Mat<f64>, rhs: &Mat<f64>) -> f64 {
        let qx = self.q0.mul_mat(x);
        let mut worst = 0.0f64;
        for j in 0..x.ncols() {
            for i in 0..self.n {
                worst = worst.max((x[(i, j)] - qx[(i, j)] - rhs[(i, j)]).abs());
            }
        }
        worst
    }

    #[cfg(test)]
    fn from_parts(n: usize, q0: Coo, h: Mat<f64>, queries: Vec<PairQuery>) -> Self {
        ComposedSystem {
            n,
            queries,
            q0,
            h,
            lu: None,
            solves: 0,
        }
    }
}

/// Builds the composed system for a set of pair queries sharing this
/// destination. Column `j` of the solution carries the reach values of
/// query `j`; duplicate queries simply produce identical columns.
pub fn build_composed_system(
    dm: &DestModel,
    vf: &ValueField,
    queries: &[PairQuery],
) -> Result<ComposedSystem> {
    if queries.is_empty() {
        return Err(Error::InvalidInput(
            "composed system needs at least one pair query".into(),
        ));
    }
    let ext = &dm.ext;
    let n = ext.n_ext() + 1;
    for q in queries {
        for link in [q.u, q.v] {
            if link.0 >= ext.n_ext() {
                return Err(Error::InvalidInput(format!(
                    "query link {} out of range",
                    link.0
                )));
            }
            if !vf.feasible[link.0] {
                return Err(Error::PrunedLink(link.0));
            }
        }
    }
    // Column-stochastic orientation: entry (s, s') = P(s|s'), so column s'
    // spreads the probability mass of s' onto its successors. The last row
    // and column (the artificial start link) stay zero.
    let mut q0 = Coo::new(n);
    for (p, k, a) in ext.pairs() {
        let prob = vf.probs[p];
        if prob > 0.0 {
            q0.push(a.0, k.0, prob);
        }
    }
    let mut h = Mat::zeros(n, queries.len());
    for (j, q) in queries.iter().enumerate() {
        h[(q.u.0, j)] = 1.0;
        h[(n - 1, j)] = 1.0;
    }
    Ok(ComposedSystem {
        n,
        queries: queries.to_vec(),
        q0,
        h,
        lu: None,
        solves: 0,
    })
}

/// Reach values for all queries of a composed system.
pub struct ReachMatrix {
    /// `(n_ext + 1) x J`; entry `(v_j, j)` is the reach value of query `j`.
    pub pi: Mat<f64>,
    pub residual: f64,
}

impl ReachMatrix {
    pub fn query_value(&self, sys: &ComposedSystem, j: usize) -> f64 {
        self.pi[(sys.queries[j].v.0, j)]
    }
}

/// Solves `(I - Q0) Pi = H` once for all columns, caching the factorization
/// on the system for later gradient solves.
pub fn solve_reach_matrix(sys: &mut ComposedSystem) -> Result<ReachMatrix> {
    let rhs = sys.h.clone();
    let pi = sys.solve_block(&rhs)?;
    let residual = sys.residual(&pi, &rhs);
    if !residual.is_finite() || residual > REACH_RESID_TOL {
        return Err(Error::LinearSolve(format!(
            "composed reach residual {residual:.3e} exceeds {REACH_RESID_TOL:.1e}"
        )));
    }
    Ok(ReachMatrix { pi, residual })
}

/// Parameter Jacobians of the reach matrix: for each parameter `t`,
/// `dPi_t = (I - Q0)^{-1} dQ0_t Pi`, one multi-RHS solve per parameter on
/// the cached factorization.
pub fn reach_jacobian(
    sys: &mut ComposedSystem,
    pi: &ReachMatrix,
    dq0: &[Coo],
) -> Result<Vec<Mat<f64>>> {
    let mut out = Vec::with_capacity(dq0.len());
    for d in dq0 {
        let rhs = d.mul_mat(&pi.pi);
        out.push(sys.solve_block(&rhs)?);
    }
    Ok(out)
}

/// Max distance between composed and per-pair reach values over a query
/// set. Zero (to solver precision) on acyclic networks; on cyclic networks
/// this surfaces the expected-visits vs probability gap.
pub fn reach_discrepancy(dm: &DestModel, vf: &ValueField, queries: &[PairQuery]) -> Result<f64> {
    let mut sys = build_composed_system(dm, vf, queries)?;
    let rm = solve_reach_matrix(&mut sys)?;
    let mut worst = 0.0f64;
    for (j, q) in queries.iter().enumerate() {
        let single = solve_reach_single(dm, vf, q.v)?;
        worst = worst.max((rm.pi[(q.v.0, j)] - single[q.u.0]).abs());
    }
    Ok(worst)
}

/// Observations split once against the extended networks and grouped by
/// destination slot, ready for repeated likelihood evaluations.
#[derive(Debug, Clone)]
pub struct SplitObs {
    pub per_dest: Vec<DestObs>,
    pub n_trips: usize,
}

/// Per-destination split data.
#[derive(Debug, Clone, Default)]
pub struct DestObs {
    /// Connected-pair terms `(pair_idx, count)`.
    pub connected: Vec<(usize, f64)>,
    /// Distinct unconnected queries, deterministically ordered.
    pub queries: Vec<PairQuery>,
    /// Occurrence count per query.
    pub query_mult: Vec<usize>,
    /// Every unconnected occurrence in trip order, as an index into `queries`.
    pub occurrences: Vec<usize>,
    pub n_trips: usize,
}

impl SplitObs {
    pub fn build(problem: &Problem, obs: &ObservationSet) -> Result<SplitObs> {
        let mut per_dest: Vec<DestObs> = vec![DestObs::default(); problem.dests.len()];
        let mut conn: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); problem.dests.len()];
        let mut qmap: Vec<BTreeMap<(usize, usize), usize>> =
            vec![BTreeMap::new(); problem.dests.len()];
        for trip in &obs.trips {
            let slot = problem.slot_of(trip.dest).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "trip {} has destination node {} with no prepared extended network",
                    trip.id, trip.dest.0
                ))
            })?;
            let dm = &problem.dests[slot];
            for &l in &trip.links {
                if l.0 >= dm.ext.n_ext() {
                    return Err(Error::InvalidInput(format!(
                        "trip {} references link index {} out of range",
                        trip.id, l.0
                    )));
                }
            }
            let split = split_trip(trip, &dm.ext);
            for (g, h) in split.connected {
                let p = dm.ext.pair_index(g, h).expect("connected pair must index");
                *conn[slot].entry(p).or_insert(0.0) += 1.0;
            }
            let d = &mut per_dest[slot];
            for (u, v) in split.unconnected {
                let next = qmap[slot].len();
                let q = *qmap[slot].entry((u.0, v.0)).or_insert(next);
                if q == d.queries.len() {
                    d.queries.push(PairQuery { u, v });
                    d.query_mult.push(0);
                }
                d.query_mult[q] += 1;
                d.occurrences.push(q);
            }
            d.n_trips += 1;
        }
        for (slot, c) in conn.into_iter().enumerate() {
            per_dest[slot].connected = c.into_iter().collect();
        }
        Ok(SplitObs {
            per_dest,
            n_trips: obs.len(),
        })
    }

    /// Total unconnected occurrences across destinations.
    pub fn n_unconnected(&self) -> usize {
        self.per_dest.iter().map(|d| d.occurrences.len()).sum()
    }

    /// True when no trip has any unconnected pair.
    pub fn is_complete(&self) -> bool {
        self.n_unconnected() == 0
    }

    /// Connected-pair weights per destination (the sigma-1 terms).
    pub fn connected_weights(&self) -> Vec<Vec<(usize, f64)>> {
        self.per_dest.iter().map(|d| d.connected.clone()).collect()
    }
}

/// Solve and assembly accounting for one or more likelihood evaluations.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct DcStats {
    /// Multi-RHS solves on composed factorizations.
    pub composed_solves: u64,
    /// Value-system solve passes (one per destination per evaluation).
    pub value_solves: u64,
    /// Destinations that actually had unconnected pairs.
    pub n_dest_with_queries: u64,
    pub n_queries: u64,
    pub max_composed_residual: f64,
    pub max_value_residual: f64,
}

impl DcStats {
    pub fn absorb(&mut self, o: DcStats) {
        self.composed_solves += o.composed_solves;
        self.value_solves += o.value_solves;
        self.n_dest_with_queries += o.n_dest_with_queries;
        self.n_queries += o.n_queries;
        self.max_composed_residual = self.max_composed_residual.max(o.max_composed_residual);
        self.max_value_residual = self.max_value_residual.max(o.max_value_residual);
    }
}

/// Exact incomplete-data log-likelihood (and gradient) under the
/// reach-probability semantics: connected pairs contribute `ln P(a|k)`;
/// each unconnected pair contributes the log of its first-arrival reach
/// probability, obtained from one composed system per destination as the
/// visit-count ratio `Pi[v_j, j] / Pi[v_j, self(v_j)]`.
pub fn dc_log_likelihood(
    problem: &Problem,
    split: &SplitObs,
    params: &ParamVector,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, DcStats)> {
    assert_eq!(split.per_dest.len(), problem.dests.len());
    let n_params = problem.n_params();
    let per_dest: Vec<Result<(f64, Vec<f64>, DcStats)>> = problem
        .dests
        .par_iter()
        .zip(split.per_dest.par_iter())
        .map(|(dm, dobs)| dest_log_likelihood(problem, dm, dobs, params, with_grad))
        .collect();

    let mut ll = 0.0;
    let mut grad = vec![0.0; n_params];
    let mut stats = DcStats::default();
    for r in per_dest {
        let (l, g, s) = r?;
        ll += l;
        for t in 0..n_params {
            grad[t] += g[t];
        }
        stats.absorb(s);
    }
    Ok((ll, grad, stats))
}

fn dest_log_likelihood(
    problem: &Problem,
    dm: &DestModel,
    dobs: &DestObs,
    params: &ParamVector,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, DcStats)> {
    let n_params = problem.n_params();
    let mut stats = DcStats::default();
    if dobs.connected.is_empty() && dobs.queries.is_empty() {
        return Ok((0.0, vec![0.0; n_params], stats));
    }
    stats.value_solves = 1;
    let (vf, vg) = if with_grad {
        let (vf, vg) = solve_value_and_gradients(dm, params, problem.model, &problem.opts)?;
        (vf, Some(vg))
    } else {
        (solve_value(dm, params, problem.model, &problem.opts)?, None)
    };
    stats.max_value_residual = vf.residual;

    let mut ll = 0.0;
    let mut grad = vec![0.0; n_params];
    for &(pair, w) in &dobs.connected {
        let p = vf.probs[pair];
        if p <= PROB_FLOOR {
            return Err(Error::Infeasible(format!(
                "connected pair {pair} has probability {p:.3e} at this parameter point"
            )));
        }
        ll += w * p.ln();
        if let Some(vg) = &vg {
            for t in 0..n_params {
                grad[t] += w * vg.dprobs[(pair, t)] / p;
            }
        }
    }

    if !dobs.queries.is_empty() {
        stats.n_dest_with_queries = 1;
        stats.n_queries = dobs.queries.len() as u64;
        // One extra column per distinct target: the self-query (v, v) gives
        // the expected visit count N_vv of v started at v, and the
        // first-arrival probability of any pair is the ratio
        // P(v|u) = N_uv / N_vv. On acyclic networks N_vv = 1 and the ratio
        // is the raw composed value; on cyclic networks the ratio stays the
        // exact reach probability (the raw value counts revisits, which
        // makes a likelihood built on it unbounded). Same factorization,
        // same solve count, just more right-hand-side columns.
        let mut all_queries = dobs.queries.clone();
        let mut self_col: BTreeMap<usize, usize> = BTreeMap::new();
        for q in &dobs.queries {
            if !self_col.contains_key(&q.v.0) {
                self_col.insert(q.v.0, all_queries.len());
                all_queries.push(PairQuery { u: q.v, v: q.v });
            }
        }
        let mut sys = build_composed_system(dm, &vf, &all_queries)?;
        let rm = solve_reach_matrix(&mut sys)?;
        stats.max_composed_residual = rm.residual;
        let visits = |j: usize, q: &PairQuery| rm.pi[(q.v.0, j)];
        for (j, q) in dobs.queries.iter().enumerate() {
            let n_uv = visits(j, q);
            let n_vv = visits(self_col[&q.v.0], q);
            let val = n_uv / n_vv;
            let mult = dobs.query_mult[j] as f64;
            if val.is_nan() || !val.is_finite() || val <= PROB_FLOOR {
                return Err(Error::Infeasible(format!(
                    "reach probability of pair ({} -> {}) is {val:.3e} at this parameter point",
                    q.u.0, q.v.0
                )));
            }
            ll += mult * val.ln();
        }
        if let Some(vg) = &vg {
            // dQ0 per parameter, oriented (successor, predecessor) like Q0.
            let n = sys.n;
            let mut dq0: Vec<Coo> = (0..n_params).map(|_| Coo::new(n)).collect();
            for (p, k, a) in dm.ext.pairs() {
                if vf.probs[p] <= 0.0 {
                    continue;
                }
                for t in 0..n_params {
                    let d = vg.dprobs[(p, t)];
                    if d != 0.0 {
                        dq0[t].push(a.0, k.0, d);
                    }
                }
            }
            let dpi = reach_jacobian(&mut sys, &rm, &dq0)?;
            for (j, q) in dobs.queries.iter().enumerate() {
                let jv = self_col[&q.v.0];
                let n_uv = visits(j, q);
                let n_vv = visits(jv, q);
                let mult = dobs.query_mult[j] as f64;
                for t in 0..n_params {
                    // d ln(N_uv / N_vv)
                    grad[t] +=
                        mult * (dpi[t][(q.v.0, j)] / n_uv - dpi[t][(q.v.0, jv)] / n_vv);
                }
            }
        }
        stats.composed_solves = sys.solves;
    }
    Ok((ll, grad, stats))
}

/// Spec-shaped convenience: splits the observations and evaluates once.
pub fn dc_log_likelihood_obs(
    problem: &Problem,
    obs: &ObservationSet,
    params: &ParamVector,
) -> Result<(f64, Vec<f64>, DcStats)> {
    let split = SplitObs::build(problem, obs)?;
    dc_log_likelihood(problem, &split, params, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    #[test]
    fn zero_rhs_column_gives_zero_solution_column() {
        // Degenerate guard: not produced by the builder, but linearity must hold.
        let mut q0 = Coo::new(3);
        q0.push(1, 0, 0.5);
        let mut h = Mat::zeros(3, 2);
        h[(0, 0)] = 1.0;
        // column 1 all zero
        let mut sys = ComposedSystem::from_parts(
            3,
            q0,
            h,
            vec![
                PairQuery {
                    u: LinkId(0),
                    v: LinkId(1),
                },
                PairQuery {
                    u: LinkId(0),
                    v: LinkId(1),
                },
            ],
        );
        let rm = solve_reach_matrix(&mut sys).unwrap();
        for i in 0..3 {
            assert_eq!(rm.pi[(i, 1)], 0.0);
        }
        assert!((rm.pi[(1, 0)] - 0.5).abs() < 1e-14);
    }
}

#[cfg(test)]
mod oracle_tests {
    use super::*;
    use crate::choice::{
        solve_value_and_gradients, FeatureSpec, Model, SolveOptions,
    };
    use crate::network::{LinkRecord, Network};
    use crate::obs::Trip;
    use crate::synth::{diamond_network, random_acyclic_network};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn diamond_problem(tt: [f64; 5]) -> Problem {
        let net = diamond_network(tt);
        let dest = net.node_id("t").unwrap();
        Problem::for_destinations(
            Arc::clone(&net),
            Model::Rl,
            FeatureSpec::all_link_attrs(&net),
            &[dest],
            SolveOptions::default(),
        )
        .unwrap()
    }

    fn random_problem(n_links: usize, seed: u64) -> (Problem, ParamVector) {
        let (net, dest) = random_acyclic_network(n_links, seed);
        let net = Arc::new(net);
        let spec = FeatureSpec::all_link_attrs(&net);
        let problem = Problem::for_destinations(
            Arc::clone(&net),
            Model::Rl,
            spec,
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let theta: Vec<f64> = (0..problem.n_theta())
            .map(|_| -(0.2 + 2.3 * rng.random::<f64>()))
            .collect();
        let params = ParamVector::new(theta, vec![], 1.0).unwrap();
        (problem, params)
    }

    fn lid(p: &Problem, name: &str) -> LinkId {
        p.net.link_id(name).unwrap()
    }

    #[test]
    fn brute_force_diamond_values() {
        let problem = diamond_problem([1.0; 5]);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let (u, v) = (lid(&problem, "s-o"), lid(&problem, "a-t"));
        assert_relative_eq!(
            brute_force_reach(dm, &vf, u, v, 32).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        // u == v: the empty path
        assert_relative_eq!(brute_force_reach(dm, &vf, u, u, 32).unwrap(), 1.0);
        // both branches absorb
        assert_relative_eq!(
            brute_force_reach(dm, &vf, u, dm.ext.dummy, 32).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn enumeration_overflow_is_reported() {
        // 21 two-way stages: 2^21 paths from the entry link to the exit.
        let mut links = Vec::new();
        for i in 0..21 {
            links.push(LinkRecord {
                name: format!("a{i}"),
                from: format!("c{i}"),
                to: format!("c{}", i + 1),
                attrs: vec![1.0],
            });
            links.push(LinkRecord {
                name: format!("b{i}"),
                from: format!("c{i}"),
                to: format!("c{}", i + 1),
                attrs: vec![1.0],
            });
        }
        links.push(LinkRecord {
            name: "entry".into(),
            from: "s".into(),
            to: "c0".into(),
            attrs: vec![1.0],
        });
        links.push(LinkRecord {
            name: "exit".into(),
            from: "c21".into(),
            to: "t".into(),
            attrs: vec![1.0],
        });
        let net = Arc::new(Network::build(links, vec!["travel_time".into()], None, None).unwrap());
        let dest = net.node_id("t").unwrap();
        let problem = Problem::for_destinations(
            Arc::clone(&net),
            Model::Rl,
            FeatureSpec::all_link_attrs(&net),
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-0.5], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let err = brute_force_reach(dm, &vf, lid(&problem, "entry"), lid(&problem, "exit"), 64);
        match err {
            Err(Error::EnumerationOverflow { .. }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn single_target_system_on_the_diamond() {
        let problem = diamond_problem([1.0; 5]);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        // everything reaches the dummy
        let pi_d = solve_reach_single(dm, &vf, dm.ext.dummy).unwrap();
        for k in 0..dm.ext.n_ext() {
            if vf.feasible[k] {
                assert_relative_eq!(pi_d[k], 1.0, epsilon = 1e-10);
            }
        }
        // target a-t: 0.5 from the origin, 1 from o-a, 0 from o-b
        let pi = solve_reach_single(dm, &vf, lid(&problem, "a-t")).unwrap();
        assert_relative_eq!(pi[lid(&problem, "s-o").0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(pi[lid(&problem, "o-a").0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(pi[lid(&problem, "o-b").0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn asymmetric_single_target_matches_binary_logit() {
        let problem = diamond_problem([1.0, 1.0, 2.0, 1.0, 1.0]);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let pi = solve_reach_single(dm, &vf, lid(&problem, "a-t")).unwrap();
        assert_relative_eq!(pi[lid(&problem, "s-o").0], 0.7310585786300049, epsilon = 1e-10);
    }

    #[test]
    fn composed_system_matches_single_and_brute_force() {
        let problem = diamond_problem([1.0; 5]);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let queries = vec![
            PairQuery { u: lid(&problem, "s-o"), v: lid(&problem, "a-t") },
            PairQuery { u: lid(&problem, "o-a"), v: dm.ext.dummy },
            PairQuery { u: lid(&problem, "s-o"), v: lid(&problem, "a-t") }, // duplicate
        ];
        let mut sys = build_composed_system(dm, &vf, &queries).unwrap();
        let rm = solve_reach_matrix(&mut sys).unwrap();
        assert_relative_eq!(rm.query_value(&sys, 0), 0.5, epsilon = 1e-12);
        // absorption column: P(d|o-a) = 1
        assert_relative_eq!(rm.query_value(&sys, 1), 1.0, epsilon = 1e-12);
        // duplicate queries give identical columns
        for i in 0..sys.n {
            assert_eq!(rm.pi[(i, 0)], rm.pi[(i, 2)]);
        }
        // and agree with the per-pair solver
        let single = solve_reach_single(dm, &vf, lid(&problem, "a-t")).unwrap();
        assert_relative_eq!(rm.query_value(&sys, 0), single[lid(&problem, "s-o").0], epsilon = 1e-12);
    }

    #[test]
    fn randomized_acyclic_oracle_suite() {
        // Composed reach values match brute-force enumeration and the
        // per-pair systems on random acyclic networks.
        let mut worst_bf = 0.0f64;
        let mut worst_single = 0.0f64;
        for seed in 0..20u64 {
            let (problem, params) = random_problem(12, seed);
            let dm = &problem.dests[0];
            let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
            let feasible: Vec<LinkId> = (0..dm.ext.n_ext())
                .filter(|&k| vf.feasible[k])
                .map(LinkId)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let queries: Vec<PairQuery> = (0..6)
                .map(|_| PairQuery {
                    u: feasible[rng.random_range(0..feasible.len())],
                    v: feasible[rng.random_range(0..feasible.len())],
                })
                .collect();
            let mut sys = build_composed_system(dm, &vf, &queries).unwrap();
            let rm = solve_reach_matrix(&mut sys).unwrap();
            for (j, q) in queries.iter().enumerate() {
                let bf = brute_force_reach(dm, &vf, q.u, q.v, 64).unwrap();
                worst_bf = worst_bf.max((rm.query_value(&sys, j) - bf).abs());
                let single = solve_reach_single(dm, &vf, q.v).unwrap();
                worst_single = worst_single.max((rm.query_value(&sys, j) - single[q.u.0]).abs());
            }
        }
        assert!(worst_bf <= 1e-10, "max |composed - brute force| = {worst_bf:.3e}");
        assert!(worst_single <= 1e-10, "max |composed - per-pair| = {worst_single:.3e}");
    }

    #[test]
    fn reach_jacobian_matches_finite_differences() {
        let problem = diamond_problem([1.0, 0.8, 1.7, 1.1, 0.6]);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.2], vec![], 1.0).unwrap();
        let queries = vec![
            PairQuery { u: lid(&problem, "s-o"), v: lid(&problem, "a-t") },
            PairQuery { u: lid(&problem, "s-o"), v: dm.ext.dummy },
        ];
        let (vf, vg) =
            solve_value_and_gradients(dm, &params, Model::Rl, &problem.opts).unwrap();
        let mut sys = build_composed_system(dm, &vf, &queries).unwrap();
        let rm = solve_reach_matrix(&mut sys).unwrap();
        let n = sys.n;
        let mut dq0 = vec![Coo::new(n)];
        for (p, k, a) in dm.ext.pairs() {
            if vf.probs[p] > 0.0 && vg.dprobs[(p, 0)] != 0.0 {
                dq0[0].push(a.0, k.0, vg.dprobs[(p, 0)]);
            }
        }
        let dpi = reach_jacobian(&mut sys, &rm, &dq0).unwrap();
        for (j, q) in queries.iter().enumerate() {
            let fd = crate::gradcheck::central_diff(
                |x| {
                    let p = ParamVector::new(x.to_vec(), vec![], 1.0).unwrap();
                    let vf = solve_value(dm, &p, Model::Rl, &problem.opts).unwrap();
                    let mut sys = build_composed_system(dm, &vf, &queries).unwrap();
                    let rm = solve_reach_matrix(&mut sys).unwrap();
                    rm.query_value(&sys, j)
                },
                &params.theta,
                0,
                1e-6,
            );
            let analytic = dpi[0][(q.v.0, j)];
            assert!(
                crate::gradcheck::rel_err(analytic, fd) <= 1e-5,
                "query {j}: analytic {analytic} vs fd {fd}"
            );
        }
        // The certain-absorption column has zero gradient on acyclic networks.
        assert!(dpi[0][(dm.ext.dummy.0, 1)].abs() <= 1e-12);
    }

    #[test]
    fn complete_observations_need_no_composed_solves() {
        let problem = diamond_problem([1.0; 5]);
        let dm = &problem.dests[0];
        let trip = Trip {
            id: "t0".into(),
            dest: dm.ext.dest,
            links: vec![
                lid(&problem, "s-o"),
                lid(&problem, "o-a"),
                lid(&problem, "a-t"),
                dm.ext.dummy,
            ],
        };
        let obs = ObservationSet::new(vec![trip]);
        let split = SplitObs::build(&problem, &obs).unwrap();
        assert!(split.is_complete());
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let (ll, _, stats) = dc_log_likelihood(&problem, &split, &params, true).unwrap();
        assert_eq!(stats.composed_solves, 0);
        // equals the product of link probabilities: 0.5 * 1 * 1
        assert_relative_eq!(ll, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn missing_link_likelihood_on_the_diamond() {
        // trip (s-o, a-t, d) with o-a removed: LL = ln 0.5 + ln 1.
        let problem = diamond_problem([1.0; 5]);
        let dm = &problem.dests[0];
        let trip = Trip {
            id: "t0".into(),
            dest: dm.ext.dest,
            links: vec![lid(&problem, "s-o"), lid(&problem, "a-t"), dm.ext.dummy],
        };
        let obs = ObservationSet::new(vec![trip]);
        let split = SplitObs::build(&problem, &obs).unwrap();
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let (ll, _, stats) = dc_log_likelihood(&problem, &split, &params, true).unwrap();
        assert_relative_eq!(ll, -std::f64::consts::LN_2, epsilon = 1e-10);
        // audit: (T+1) composed solves for the single destination
        assert_eq!(stats.composed_solves, (problem.n_params() as u64) + 1);
        assert_eq!(stats.n_dest_with_queries, 1);
    }

    #[test]
    fn dc_gradient_matches_finite_differences_on_random_networks() {
        for seed in 0..5u64 {
            let (problem, params) = random_problem(10, seed);
            let dm = &problem.dests[0];
            let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
            // simulate a couple of trips, then knock out interior links
            let opts = crate::obs::SimOptions {
                n_trips: 6,
                min_links: 1,
                step_cap: 500,
                seed,
                origin: crate::obs::OriginDist::UniformFeasible,
            };
            let obs = crate::obs::simulate_trips(dm, &vf, &opts, 0).unwrap();
            let (obs, _) = crate::obs::corrupt_trips(&obs, 0.5, seed).unwrap();
            let split = SplitObs::build(&problem, &obs).unwrap();
            let (_, grad, _) = dc_log_likelihood(&problem, &split, &params, true).unwrap();
            let flat = params.flat();
            for t in 0..problem.n_params() {
                let fd = crate::gradcheck::central_diff(
                    |x| {
                        let p = problem.params_from_flat(x, 1.0);
                        dc_log_likelihood(&problem, &split, &p, false).unwrap().0
                    },
                    &flat,
                    t,
                    1e-6,
                );
                assert!(
                    crate::gradcheck::rel_err(grad[t], fd) <= 1e-5,
                    "seed {seed} param {t}: analytic {} vs fd {fd}",
                    grad[t]
                );
            }
        }
    }

    #[test]
    fn log_of_zero_reach_is_reported_infeasible() {
        // A pair (u, v) with v upstream of u on an acyclic network has
        // reach probability 0; the likelihood reports the point infeasible.
        let problem = diamond_problem([1.0; 5]);
        let dm = &problem.dests[0];
        let trip = Trip {
            id: "t0".into(),
            dest: dm.ext.dest,
            links: vec![lid(&problem, "a-t"), lid(&problem, "s-o"), dm.ext.dummy],
        };
        let obs = ObservationSet::new(vec![trip]);
        let split = SplitObs::build(&problem, &obs).unwrap();
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let err = dc_log_likelihood(&problem, &split, &params, true).unwrap_err();
        assert!(err.is_infeasible(), "got {err:?}");
    }

    #[test]
    fn solve_count_is_independent_of_query_count() {
        // More unconnected pairs must not change the solve count.
        let (problem, params) = random_problem(12, 42);
        let dm = &problem.dests[0];
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let opts = crate::obs::SimOptions {
            n_trips: 40,
            min_links: 1,
            step_cap: 500,
            seed: 1,
            origin: crate::obs::OriginDist::UniformFeasible,
        };
        let obs = crate::obs::simulate_trips(dm, &vf, &opts, 0).unwrap();
        let mut counts = Vec::new();
        for p in [0.3, 0.9] {
            let (corrupted, _) = crate::obs::corrupt_trips(&obs, p, 3).unwrap();
            let split = SplitObs::build(&problem, &corrupted).unwrap();
            if split.is_complete() {
                continue;
            }
            let (_, _, stats) = dc_log_likelihood(&problem, &split, &params, true).unwrap();
            counts.push(stats.composed_solves);
            assert_eq!(
                stats.composed_solves,
                (problem.n_params() as u64 + 1) * stats.n_dest_with_queries
            );
        }
        if counts.len() == 2 {
            assert_eq!(counts[0], counts[1]);
        }
    }
}
