//! Instantaneous utilities, value functions, link choice probabilities and
//! their analytic parameter gradients, for the recursive logit (RL) model
//! and its nested generalization (NRL) with link-specific scales.
//!
//! Conventions used throughout:
//!
//! * utilities are linear in the coefficient vector, `v(a|k) = theta' x(a|k)`,
//!   with nonnegative features, so nonpositive coefficients keep `v <= 0`;
//!   pairs into the dummy have all-zero features, hence `v(d|k) = 0`;
//! * the exponentiated value `Z_k = exp(V(k)/mu_k)` solves `Z = M Z + b`
//!   (RL, linear) or `Z_k = sum_a M_ka Z_a^{phi_ka} + b_k` (NRL), with
//!   `b` the indicator of the dummy, so `Z_d = 1` and `V(d) = 0`;
//! * NRL scales are `mu_k = exp(omega' s_k)` with `s_k` nonnegative link
//!   attributes (zero for the dummy, so `mu_d = 1`), and
//!   `phi_ka = mu_a / mu_k`.
//!
//! A parameter point is *infeasible* when some utility turns positive or the
//! value system has no positive solution (transition weights admit too much
//! cyclic mass); estimation treats such points as `-inf` likelihood.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Coo, Mat, SparseLu};
use crate::network::{extend_for_destination, ExtendedNetwork, LinkId, Network, NodeId};

/// Floor below which a positive value-function entry is treated as "this
/// link cannot meaningfully reach the destination" and pruned.
pub const Z_FLOOR: f64 = 1e-250;

/// Utilities strictly above this are rejected as infeasible (v must be <= 0).
const UTILITY_POS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Rl,
    Nrl,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Rl => write!(f, "rl"),
            Model::Nrl => write!(f, "nrl"),
        }
    }
}

impl FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Model> {
        match s.to_ascii_lowercase().as_str() {
            "rl" => Ok(Model::Rl),
            "nrl" => Ok(Model::Nrl),
            other => Err(Error::InvalidInput(format!("unknown model `{other}`"))),
        }
    }
}

/// Utility coefficients `theta`, scale coefficients `omega` (NRL only) and
/// the fixed global scale `mu` (RL only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub mu: f64,
}

impl ParamVector {
    pub fn new(theta: Vec<f64>, omega: Vec<f64>, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::InvalidInput(format!("mu must be positive, got {mu}")));
        }
        Ok(ParamVector { theta, omega, mu })
    }

    pub fn zeros(n_theta: usize, n_omega: usize) -> Self {
        ParamVector {
            theta: vec![0.0; n_theta],
            omega: vec![0.0; n_omega],
            mu: 1.0,
        }
    }

    /// Total number of free parameters (theta then omega in flat order).
    pub fn n_params(&self) -> usize {
        self.theta.len() + self.omega.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut x = self.theta.clone();
        x.extend_from_slice(&self.omega);
        x
    }

    /// Same shape and `mu`, coefficients replaced by `x`.
    pub fn with_flat(&self, x: &[f64]) -> ParamVector {
        assert_eq!(x.len(), self.n_params());
        ParamVector {
            theta: x[..self.theta.len()].to_vec(),
            omega: x[self.theta.len()..].to_vec(),
            mu: self.mu,
        }
    }
}

/// Which attribute columns feed the utility features and which feed the NRL
/// scales. Pair attributes (turn dummies etc.) always enter the utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub utility_link_cols: Vec<usize>,
    pub scale_cols: Vec<usize>,
}

impl FeatureSpec {
    /// All link attributes as utility features, no scale attributes (RL).
    pub fn all_link_attrs(net: &Network) -> Self {
        FeatureSpec {
            utility_link_cols: (0..net.n_link_attrs()).collect(),
            scale_cols: Vec::new(),
        }
    }

    pub fn n_theta(&self, net: &Network) -> usize {
        self.utility_link_cols.len() + net.n_pair_attrs()
    }

    pub fn n_omega(&self) -> usize {
        self.scale_cols.len()
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        for &c in self.utility_link_cols.iter().chain(self.scale_cols.iter()) {
            if c >= net.n_link_attrs() {
                return Err(Error::Dimension(format!(
                    "attribute column {c} out of range ({} link attributes)",
                    net.n_link_attrs()
                )));
            }
        }
        Ok(())
    }
}

/// Per-destination model context: the extended network plus materialized
/// feature rows. Immutable; shared freely across workers.
#[derive(Debug, Clone)]
pub struct DestModel {
    pub ext: ExtendedNetwork,
    pub n_theta: usize,
    pub n_omega: usize,
    /// Utility features per extended pair, row-major `n_pairs x n_theta`;
    /// all-zero rows for pairs into the dummy.
    features: Vec<f64>,
    /// Scale attributes per extended link, row-major `(n_ext) x n_omega`;
    /// zero row for the dummy.
    scale_attrs: Vec<f64>,
}

impl DestModel {
    pub fn feature_row(&self, pair_idx: usize) -> &[f64] {
        &self.features[pair_idx * self.n_theta..(pair_idx + 1) * self.n_theta]
    }

    pub fn scale_row(&self, k: usize) -> &[f64] {
        &self.scale_attrs[k * self.n_omega..(k + 1) * self.n_omega]
    }

    pub fn n_params(&self) -> usize {
        self.n_theta + self.n_omega
    }
}

/// Builds the per-destination context for `dest`.
pub fn prepare_destination(
    net: &Arc<Network>,
    dest: NodeId,
    spec: &FeatureSpec,
) -> Result<DestModel> {
    spec.validate(net)?;
    let ext = extend_for_destination(net, dest)?;
    let n_theta = spec.n_theta(net);
    let n_omega = spec.n_omega();
    let n_pair_attrs = net.n_pair_attrs();
    let mut features = vec![0.0; ext.n_pairs() * n_theta];
    for (p, _k, a) in ext.pairs() {
        if let Some(bp) = ext.base_pair(p) {
            let row = &mut features[p * n_theta..(p + 1) * n_theta];
            for (i, &c) in spec.utility_link_cols.iter().enumerate() {
                row[i] = ext.net.link_attrs(a)[c];
            }
            let pa = ext.net.pair_attrs_at(bp);
            row[spec.utility_link_cols.len()..spec.utility_link_cols.len() + n_pair_attrs]
                .copy_from_slice(pa);
        }
    }
    let n_ext = ext.n_ext();
    let mut scale_attrs = vec![0.0; n_ext * n_omega];
    for k in 0..net.n_links() {
        for (j, &c) in spec.scale_cols.iter().enumerate() {
            scale_attrs[k * n_omega + j] = net.link_attrs(LinkId(k))[c];
        }
    }
    Ok(DestModel {
        ext,
        n_theta,
        n_omega,
        features,
        scale_attrs,
    })
}

/// `z^phi` with a fast path for the RL case (`phi == 1`).
#[inline]
fn zpow(z: f64, phi: f64) -> f64 {
    if phi == 1.0 {
        z
    } else {
        z.powf(phi)
    }
}

/// Numerical knobs for the value solvers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Residual tolerance (infinity norm) for the value system.
    pub tol: f64,
    /// Iteration cap for the NRL fixed point.
    pub max_iter: usize,
    /// Damping factor for the NRL fixed point: x <- (1-a) x + a F(x).
    pub damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: 5000,
            damping: 1.0,
        }
    }
}

/// Per-pair transition weights and scale data at a parameter point.
#[derive(Debug, Clone)]
pub struct TransitionWeights {
    /// Deterministic utilities per extended pair.
    pub util: Vec<f64>,
    /// M_ka = exp(v(a|k)/mu_k), zeroed on pruned rows/columns.
    pub m: Vec<f64>,
    /// phi_ka = mu_a / mu_k (1 everywhere for RL).
    pub phi: Vec<f64>,
    /// Per extended link scale (RL: the global mu everywhere).
    pub mu: Vec<f64>,
}

/// Computes utilities and transition weights; rejects parameter points with
/// any positive non-dummy utility.
pub fn build_transition_weights(
    dm: &DestModel,
    params: &ParamVector,
    model: Model,
) -> Result<TransitionWeights> {
    if params.theta.len() != dm.n_theta || params.omega.len() != dm.n_omega {
        return Err(Error::Dimension(format!(
            "parameter shape ({}, {}) does not match features ({}, {})",
            params.theta.len(),
            params.omega.len(),
            dm.n_theta,
            dm.n_omega
        )));
    }
    let ext = &dm.ext;
    let n_ext = ext.n_ext();
    let mut mu = vec![params.mu; n_ext];
    if model == Model::Nrl {
        for k in 0..n_ext {
            let s = dm.scale_row(k);
            let lin: f64 = s
                .iter()
                .zip(params.omega.iter())
                .map(|(si, wi)| si * wi)
                .sum();
            let m = lin.exp();
            if !m.is_finite() || m <= 0.0 {
                return Err(Error::Infeasible(format!(
                    "scale mu_{k} = exp({lin}) is not a positive finite number"
                )));
            }
            mu[k] = m;
        }
    }

    let n_pairs = ext.n_pairs();
    let mut util = vec![0.0; n_pairs];
    let mut m = vec![0.0; n_pairs];
    let mut phi = vec![1.0; n_pairs];
    for (p, k, a) in ext.pairs() {
        let x = dm.feature_row(p);
        let v: f64 = x
            .iter()
            .zip(params.theta.iter())
            .map(|(xi, ti)| xi * ti)
            .sum();
        if v > UTILITY_POS_TOL && a != ext.dummy {
            return Err(Error::Infeasible(format!(
                "utility v({}|{}) = {v} is positive",
                a.0, k.0
            )));
        }
        util[p] = v;
        if !ext.reachable[k.0] || !ext.reachable[a.0] {
            continue; // pruned rows/columns carry no weight
        }
        let mu_k = mu[k.0];
        let mu_a = if a == ext.dummy { 1.0 } else { mu[a.0] };
        m[p] = (v / mu_k).exp();
        phi[p] = match model {
            Model::Rl => 1.0,
            Model::Nrl => mu_a / mu_k,
        };
        if !m[p].is_finite() {
            return Err(Error::Infeasible(format!(
                "transition weight overflow at pair ({}, {})",
                k.0, a.0
            )));
        }
    }
    Ok(TransitionWeights { util, m, phi, mu })
}

/// Value-function solution for one destination at one parameter point.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub dest: NodeId,
    pub model: Model,
    /// Z_k = exp(V(k)/mu_k); 0 on pruned links, 1 at the dummy.
    pub z: Vec<f64>,
    /// V(k) = mu_k ln Z_k; -inf on pruned links, 0 at the dummy.
    pub v: Vec<f64>,
    /// Link feasible for this destination: reachable and Z above the floor.
    pub feasible: Vec<bool>,
    /// Link choice probabilities per extended pair (0 on pruned pairs).
    pub probs: Vec<f64>,
    pub weights: TransitionWeights,
    pub residual: f64,
    pub iterations: usize,
}

impl ValueField {
    pub fn prob(&self, pair_idx: usize) -> f64 {
        self.probs[pair_idx]
    }
}

/// Low-level RL solve of `Z = M Z + b` by sparse LU of `I - M`, on raw
/// transition weights. `entries` holds `(k, a, M_ka)` over extended indices;
/// rows of pruned links are replaced by identities. Returns `(z, residual)`.
pub fn solve_value_rl_raw(
    n_ext: usize,
    entries: &[(usize, usize, f64)],
    dummy: usize,
    reachable: &[bool],
    tol: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut q = Coo::new(n_ext);
    for &(k, a, w) in entries {
        if reachable[k] && reachable[a] && k != dummy {
            q.push(k, a, w);
        }
    }
    let lu = SparseLu::identity_minus(&q)
        .map_err(|e| Error::LinearSolve(format!("value system: {e}")))?;
    let mut b = vec![0.0; n_ext];
    b[dummy] = 1.0;
    let z = lu.solve_vec(&b);
    // residual of Z - (M Z + b) on retained rows
    let mz = q.mul_vec(&z);
    let mut resid = 0.0f64;
    for k in 0..n_ext {
        if reachable[k] {
            let r = z[k] - mz[k] - b[k];
            resid = resid.max(r.abs());
        }
    }
    if !resid.is_finite() || resid > tol {
        return Err(Error::LinearSolve(format!(
            "value residual {resid:.3e} exceeds tolerance {tol:.1e} (path utilities too large / cyclic mass dominant)"
        )));
    }
    Ok((z, resid))
}

/// Low-level NRL solve of `Z_k = sum_a M_ka Z_a^{phi_ka} + b_k` by damped
/// fixed-point iteration from `Z^0 = b`. Returns `(z, residual, iterations)`.
pub fn solve_value_nrl_raw(
    ext: &ExtendedNetwork,
    tw: &TransitionWeights,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, f64, usize)> {
    let n_ext = ext.n_ext();
    let dummy = ext.dummy.0;
    let mut z = vec![0.0f64; n_ext];
    z[dummy] = 1.0;
    let alpha = opts.damping;
    let mut resid = f64::INFINITY;
    for it in 0..opts.max_iter {
        let mut max_delta = 0.0f64;
        let mut next = z.clone();
        for k in 0..n_ext {
            if k == dummy || !ext.reachable[k] {
                continue;
            }
            let mut f = 0.0;
            for p in ext.pair_range(k) {
                let a = ext.succ_at(p);
                if !ext.reachable[a.0] {
                    continue;
                }
                f += tw.m[p] * zpow(z[a.0], tw.phi[p]);
            }
            if !f.is_finite() {
                return Err(Error::ValueSolve {
                    dest: ext.dest.0,
                    reason: "nonlinear value iteration diverged".into(),
                });
            }
            let upd = (1.0 - alpha) * z[k] + alpha * f;
            max_delta = max_delta.max((f - z[k]).abs());
            next[k] = upd;
        }
        resid = max_delta;
        z = next;
        if resid <= opts.tol {
            return Ok((z, resid, it + 1));
        }
    }
    Err(Error::ValueSolve {
        dest: ext.dest.0,
        reason: format!(
            "nonlinear value iteration did not converge in {} iterations (residual {resid:.3e})",
            opts.max_iter
        ),
    })
}

/// Solves the value field for one destination.
pub fn solve_value(
    dm: &DestModel,
    params: &ParamVector,
    model: Model,
    opts: &SolveOptions,
) -> Result<ValueField> {
    let (vf, _) = solve_value_impl(dm, params, model, opts, false)?;
    Ok(vf)
}

/// Solves the value field and keeps the factorization for gradient reuse.
fn solve_value_impl(
    dm: &DestModel,
    params: &ParamVector,
    model: Model,
    opts: &SolveOptions,
    keep_lu: bool,
) -> Result<(ValueField, Option<SparseLu>)> {
    let tw = build_transition_weights(dm, params, model)?;
    let ext = &dm.ext;
    let n_ext = ext.n_ext();
    let dummy = ext.dummy.0;

    let (mut z, residual, iterations, lu) = match model {
        Model::Rl => {
            let entries: Vec<(usize, usize, f64)> = ext
                .pairs()
                .filter(|&(p, _, _)| tw.m[p] != 0.0)
                .map(|(p, k, a)| (k.0, a.0, tw.m[p]))
                .collect();
            let mut q = Coo::new(n_ext);
            for &(k, a, w) in &entries {
                if ext.reachable[k] && ext.reachable[a] && k != dummy {
                    q.push(k, a, w);
                }
            }
            let lu = SparseLu::identity_minus(&q).map_err(|e| Error::ValueSolve {
                dest: ext.dest.0,
                reason: format!("{e}"),
            })?;
            let mut b = vec![0.0; n_ext];
            b[dummy] = 1.0;
            let z = lu.solve_vec(&b);
            let mz = q.mul_vec(&z);
            let mut resid = 0.0f64;
            for k in 0..n_ext {
                if ext.reachable[k] {
                    resid = resid.max((z[k] - mz[k] - b[k]).abs());
                }
            }
            if !resid.is_finite() || resid > opts.tol {
                return Err(Error::ValueSolve {
                    dest: ext.dest.0,
                    reason: format!(
                        "linear value residual {resid:.3e} exceeds {:.1e} (feasibility condition violated)",
                        opts.tol
                    ),
                });
            }
            (z, resid, 1, Some(lu))
        }
        Model::Nrl => {
            let (z, resid, iters) = solve_value_nrl_raw(ext, &tw, opts)?;
            (z, resid, iters, None)
        }
    };

    // Positivity contract: negative entries mean the Bellman system has no
    // valid solution at this point; tiny entries are pruned.
    let mut feasible = vec![false; n_ext];
    for k in 0..n_ext {
        if !ext.reachable[k] {
            z[k] = 0.0;
            continue;
        }
        if !z[k].is_finite() || (z[k] <= 0.0 && k != dummy) {
            return Err(Error::ValueSolve {
                dest: ext.dest.0,
                reason: format!(
                    "value entry Z_{k} = {} is not positive (feasibility condition violated)",
                    z[k]
                ),
            });
        }
        if z[k] > Z_FLOOR {
            feasible[k] = true;
        } else {
            z[k] = 0.0;
        }
    }
    z[dummy] = 1.0;
    feasible[dummy] = true;

    let mut v = vec![f64::NEG_INFINITY; n_ext];
    for k in 0..n_ext {
        if feasible[k] {
            v[k] = tw.mu[k] * z[k].ln();
        }
    }
    v[dummy] = 0.0;

    let mut probs = vec![0.0; ext.n_pairs()];
    for (p, k, a) in ext.pairs() {
        if feasible[k.0] && feasible[a.0] {
            probs[p] = tw.m[p] * zpow(z[a.0], tw.phi[p]) / z[k.0];
        }
    }

    // The cached factorization spans all reachable links; if the floor
    // pruned any of them the gradient system has a different sparsity and
    // must be refactored.
    let floor_pruned = (0..n_ext).any(|k| ext.reachable[k] && !feasible[k]);

    let vf = ValueField {
        dest: ext.dest,
        model,
        z,
        v,
        feasible,
        probs,
        weights: tw,
        residual,
        iterations,
    };
    Ok((vf, if keep_lu && !floor_pruned { lu } else { None }))
}

/// Parameter Jacobians of the value field and of the link probabilities,
/// columns ordered theta then omega.
#[derive(Debug, Clone)]
pub struct ValueGradients {
    /// dZ/dparam, `n_ext x n_params`.
    pub dz: Mat<f64>,
    /// dV/dparam, `n_ext x n_params`.
    pub dv: Mat<f64>,
    /// dP/dparam per extended pair, `n_pairs x n_params`.
    pub dprobs: Mat<f64>,
}

/// Computes the value-field Jacobian by implicit differentiation of the
/// fixed point; one factorization shared by all parameter columns.
pub fn value_jacobian(
    dm: &DestModel,
    vf: &ValueField,
    params: &ParamVector,
    opts: &SolveOptions,
) -> Result<ValueGradients> {
    let _ = opts;
    value_jacobian_with_lu(dm, vf, params, None)
}

fn value_jacobian_with_lu(
    dm: &DestModel,
    vf: &ValueField,
    _params: &ParamVector,
    rl_lu: Option<&SparseLu>,
) -> Result<ValueGradients> {
    let ext = &dm.ext;
    let n_ext = ext.n_ext();
    let n_params = dm.n_params();
    let n_theta = dm.n_theta;
    let tw = &vf.weights;
    let dummy = ext.dummy.0;

    // d(log mu_k)/d(param): zero for theta columns, s_k[j] for omega columns.
    let dlogmu = |k: usize, t: usize| -> f64 {
        if t < n_theta || k == dummy {
            0.0
        } else {
            dm.scale_row(k)[t - n_theta]
        }
    };

    // Coefficient matrix of the linearized system: for RL this is M itself,
    // for NRL the derivative of the fixed-point map w.r.t. Z.
    let mut j = Coo::new(n_ext);
    for (p, k, a) in ext.pairs() {
        if !vf.feasible[k.0] || !vf.feasible[a.0] || k.0 == dummy {
            continue;
        }
        let entry = match vf.model {
            Model::Rl => tw.m[p],
            Model::Nrl => tw.m[p] * tw.phi[p] * vf.z[a.0].powf(tw.phi[p] - 1.0),
        };
        // Extreme scale spreads blow these coefficients up long before they
        // overflow; past this point the linearized system only returns
        // noise, so the point is rejected rather than differentiated.
        if !entry.is_finite() || entry.abs() > 1e12 {
            return Err(Error::ValueSolve {
                dest: ext.dest.0,
                reason: format!(
                    "gradient system ill-conditioned at pair ({}, {}) (coefficient {entry:.2e})",
                    k.0, a.0
                ),
            });
        }
        j.push(k.0, a.0, entry);
    }

    // Right-hand side, one column per parameter.
    let mut rhs = Mat::zeros(n_ext, n_params);
    for (p, k, a) in ext.pairs() {
        if !vf.feasible[k.0] || !vf.feasible[a.0] || k.0 == dummy {
            continue;
        }
        let x = dm.feature_row(p);
        let mu_k = tw.mu[k.0];
        let mzphi = tw.m[p] * zpow(vf.z[a.0], tw.phi[p]);
        let ln_za = if vf.z[a.0] > 0.0 { vf.z[a.0].ln() } else { 0.0 };
        for t in 0..n_params {
            let dv_dt = if t < n_theta { x[t] } else { 0.0 };
            let dlm_k = dlogmu(k.0, t);
            let dlm_a = if a.0 == dummy { 0.0 } else { dlogmu(a.0, t) };
            // d/dt [ M_ka Z_a^phi ] holding Z fixed
            let dm_term = dv_dt / mu_k - tw.util[p] * dlm_k / mu_k;
            let dphi_term = (dlm_a - dlm_k) * tw.phi[p] * ln_za;
            let val = mzphi * (dm_term + dphi_term);
            if val != 0.0 {
                rhs[(k.0, t)] += val;
            }
        }
    }

    let owned_lu;
    let lu = match (vf.model, rl_lu) {
        (Model::Rl, Some(lu)) => lu,
        _ => {
            owned_lu = SparseLu::identity_minus(&j).map_err(|e| Error::ValueSolve {
                dest: ext.dest.0,
                reason: format!("gradient system: {e}"),
            })?;
            &owned_lu
        }
    };
    let dz = lu.solve_mat(&rhs);
    for t in 0..n_params {
        for k in 0..n_ext {
            if !dz[(k, t)].is_finite() {
                return Err(Error::ValueSolve {
                    dest: ext.dest.0,
                    reason: "value Jacobian is not finite".into(),
                });
            }
        }
    }

    let mut dv = Mat::zeros(n_ext, n_params);
    for k in 0..n_ext {
        if !vf.feasible[k] || k == dummy {
            continue;
        }
        let ln_zk = vf.z[k].ln();
        for t in 0..n_params {
            dv[(k, t)] = tw.mu[k] * (dlogmu(k, t) * ln_zk + dz[(k, t)] / vf.z[k]);
        }
    }

    let mut dprobs = Mat::zeros(ext.n_pairs(), n_params);
    for (p, k, a) in ext.pairs() {
        let pk = vf.probs[p];
        if pk == 0.0 {
            continue;
        }
        let x = dm.feature_row(p);
        let mu_k = tw.mu[k.0];
        // v + V(a) - V(k) = mu_k ln P(a|k)
        let vdiff = tw.util[p] + vf.v[a.0] - vf.v[k.0];
        for t in 0..n_params {
            let dv_dt = if t < n_theta { x[t] } else { 0.0 };
            let dlm_k = dlogmu(k.0, t);
            dprobs[(p, t)] = pk
                * ((dv_dt + dv[(a.0, t)] - dv[(k.0, t)]) / mu_k - dlm_k / mu_k * vdiff);
        }
    }

    Ok(ValueGradients { dz, dv, dprobs })
}

/// Solves the value field and its gradients, reusing one factorization for
/// the value and all parameter columns (RL).
pub fn solve_value_and_gradients(
    dm: &DestModel,
    params: &ParamVector,
    model: Model,
    opts: &SolveOptions,
) -> Result<(ValueField, ValueGradients)> {
    let (vf, lu) = solve_value_impl(dm, params, model, opts, true)?;
    let vg = value_jacobian_with_lu(dm, &vf, params, lu.as_ref())?;
    Ok((vf, vg))
}

/// Probability of choosing link `a` after link `k`.
pub fn link_choice_prob(dm: &DestModel, vf: &ValueField, k: LinkId, a: LinkId) -> Result<f64> {
    if !vf.feasible[k.0] {
        return Err(Error::PrunedLink(k.0));
    }
    let p = dm
        .ext
        .pair_index(k, a)
        .ok_or_else(|| Error::InvalidInput(format!("link {} is not a successor of {}", a.0, k.0)))?;
    Ok(vf.probs[p])
}

/// Gradient of `P(a|k)` w.r.t. all parameters (theta then omega).
pub fn link_prob_gradient(
    dm: &DestModel,
    vf: &ValueField,
    vg: &ValueGradients,
    k: LinkId,
    a: LinkId,
) -> Result<Vec<f64>> {
    if !vf.feasible[k.0] {
        return Err(Error::PrunedLink(k.0));
    }
    let p = dm
        .ext
        .pair_index(k, a)
        .ok_or_else(|| Error::InvalidInput(format!("link {} is not a successor of {}", a.0, k.0)))?;
    Ok((0..dm.n_params()).map(|t| vg.dprobs[(p, t)]).collect())
}

/// Largest deviation of an outgoing-probability row sum from 1 over feasible
/// links. Diagnostic for the normalization invariant.
pub fn max_row_sum_error(dm: &DestModel, vf: &ValueField) -> f64 {
    let ext = &dm.ext;
    let mut worst = 0.0f64;
    for k in 0..ext.net.n_links() {
        if !vf.feasible[k] {
            continue;
        }
        let mut s = 0.0;
        for p in ext.pair_range(k) {
            s += vf.probs[p];
        }
        worst = worst.max((s - 1.0).abs());
    }
    worst
}

/// Estimation context: one prepared [`DestModel`] per destination of
/// interest, over a shared network.
#[derive(Debug, Clone)]
pub struct Problem {
    pub net: Arc<Network>,
    pub model: Model,
    pub spec: FeatureSpec,
    pub opts: SolveOptions,
    pub dests: Vec<DestModel>,
    node_to_slot: BTreeMap<NodeId, usize>,
}

impl Problem {
    pub fn for_destinations(
        net: Arc<Network>,
        model: Model,
        spec: FeatureSpec,
        dest_nodes: &[NodeId],
        opts: SolveOptions,
    ) -> Result<Problem> {
        let mut dests = Vec::with_capacity(dest_nodes.len());
        let mut node_to_slot = BTreeMap::new();
        for &d in dest_nodes {
            if node_to_slot.contains_key(&d) {
                continue;
            }
            node_to_slot.insert(d, dests.len());
            dests.push(prepare_destination(&net, d, &spec)?);
        }
        Ok(Problem {
            net,
            model,
            spec,
            opts,
            dests,
            node_to_slot,
        })
    }

    pub fn slot_of(&self, dest: NodeId) -> Option<usize> {
        self.node_to_slot.get(&dest).copied()
    }

    pub fn n_theta(&self) -> usize {
        self.spec.n_theta(&self.net)
    }

    pub fn n_omega(&self) -> usize {
        self.spec.n_omega()
    }

    pub fn n_params(&self) -> usize {
        self.n_theta() + self.n_omega()
    }

    pub fn params_from_flat(&self, x: &[f64], mu: f64) -> ParamVector {
        ParamVector {
            theta: x[..self.n_theta()].to_vec(),
            omega: x[self.n_theta()..].to_vec(),
            mu,
        }
    }
}

/// Value-solve accounting for run reports.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ValueSolveStats {
    pub solves: u64,
    pub max_residual: f64,
}

impl ValueSolveStats {
    pub fn absorb(&mut self, other: ValueSolveStats) {
        self.solves += other.solves;
        self.max_residual = self.max_residual.max(other.max_residual);
    }
}

/// Log-likelihood of weighted connected pairs: `sum_d sum_i w_i ln P(pair_i)`
/// with optional gradient. This is the shared objective core behind the
/// complete-data likelihood, the ignore-unconnected baseline and the EM
/// expected likelihood; the exact incomplete-data likelihood adds reach
/// terms on top.
///
/// `weighted[slot]` lists `(pair_idx, weight)` terms for that destination.
/// Destinations with no terms are skipped entirely.
pub fn pair_log_likelihood(
    problem: &Problem,
    weighted: &[Vec<(usize, f64)>],
    params: &ParamVector,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, ValueSolveStats)> {
    assert_eq!(weighted.len(), problem.dests.len());
    let n_params = problem.n_params();
    let per_dest: Vec<Result<(f64, Vec<f64>, ValueSolveStats)>> = problem
        .dests
        .par_iter()
        .zip(weighted.par_iter())
        .map(|(dm, terms)| {
            if terms.is_empty() {
                return Ok((0.0, vec![0.0; n_params], ValueSolveStats::default()));
            }
            let mut stats = ValueSolveStats {
                solves: 1,
                max_residual: 0.0,
            };
            let (vf, vg) = if with_grad {
                let (vf, vg) = solve_value_and_gradients(dm, params, problem.model, &problem.opts)?;
                (vf, Some(vg))
            } else {
                (solve_value(dm, params, problem.model, &problem.opts)?, None)
            };
            stats.max_residual = vf.residual;
            let mut ll = 0.0;
            let mut grad = vec![0.0; n_params];
            for &(pair, w) in terms {
                let p = vf.probs[pair];
                if p <= 0.0 {
                    return Err(Error::Infeasible(format!(
                        "connected pair {pair} has zero probability"
                    )));
                }
                ll += w * p.ln();
                if let Some(vg) = &vg {
                    for t in 0..n_params {
                        grad[t] += w * vg.dprobs[(pair, t)] / p;
                    }
                }
            }
            Ok((ll, grad, stats))
        })
        .collect();

    // Fixed-order reduction keeps results bit-stable across thread counts.
    let mut ll = 0.0;
    let mut grad = vec![0.0; n_params];
    let mut stats = ValueSolveStats::default();
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{diamond_network, diamond_network_with, random_acyclic_network};
    use approx::assert_relative_eq;

    fn diamond_problem(tt: [f64; 5], model: Model) -> Problem {
        let net = diamond_network(tt);
        let dest = net.node_id("t").unwrap();
        Problem::for_destinations(
            net,
            model,
            FeatureSpec {
                utility_link_cols: vec![0],
                scale_cols: vec![],
            },
            &[dest],
            SolveOptions::default(),
        )
        .unwrap()
    }

    fn link(net: &Network, name: &str) -> LinkId {
        net.link_id(name).unwrap()
    }

    #[test]
    fn transition_weights_on_the_diamond() {
        // all v = -1, mu = 1: every real pair weight is e^-1, dummy pairs 1.
        let problem = diamond_problem([1.0; 5], Model::Rl);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let tw = build_transition_weights(dm, &params, Model::Rl).unwrap();
        for (p, _k, a) in dm.ext.pairs() {
            if a == dm.ext.dummy {
                assert_relative_eq!(tw.m[p], 1.0, max_relative = 1e-15);
            } else {
                assert_relative_eq!(tw.m[p], (-1.0f64).exp(), max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn nrl_weights_halve_the_exponent() {
        // mu_k = 2 everywhere, v = -1: M_ka = e^{-1/2}.
        let net = diamond_network_with(
            vec!["travel_time".into(), "s".into()],
            vec![vec![1.0, 1.0]; 5],
        );
        let dest = net.node_id("t").unwrap();
        let problem = Problem::for_destinations(
            net,
            Model::Nrl,
            FeatureSpec {
                utility_link_cols: vec![0],
                scale_cols: vec![1],
            },
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![2.0f64.ln()], 1.0).unwrap();
        let tw = build_transition_weights(dm, &params, Model::Nrl).unwrap();
        for (p, k, a) in dm.ext.pairs() {
            assert_relative_eq!(tw.mu[k.0], 2.0, max_relative = 1e-15);
            if a != dm.ext.dummy {
                assert_relative_eq!(tw.m[p], (-0.5f64).exp(), max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn positive_utility_is_infeasible() {
        let problem = diamond_problem([1.0; 5], Model::Rl);
        let params = ParamVector::new(vec![0.3], vec![], 1.0).unwrap();
        let err = build_transition_weights(&problem.dests[0], &params, Model::Rl).unwrap_err();
        assert!(err.is_infeasible());
    }

    #[test]
    fn rl_raw_solve_matches_hand_backsubstitution() {
        // Hand-built diamond weights with every entry e^-1, including the
        // transitions into the dummy: Z_d = 1, Z_3 = Z_4 = e^-1,
        // Z_1 = Z_2 = e^-2, Z_0 = 2 e^-3.
        let w = (-1.0f64).exp();
        let entries = vec![
            (0usize, 1usize, w),
            (0, 2, w),
            (1, 3, w),
            (2, 4, w),
            (3, 5, w),
            (4, 5, w),
        ];
        let reachable = vec![true; 6];
        let (z, resid) = solve_value_rl_raw(6, &entries, 5, &reachable, 1e-10).unwrap();
        assert!(resid <= 1e-10);
        assert_relative_eq!(z[5], 1.0, epsilon = 1e-14);
        assert_relative_eq!(z[3], (-1.0f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(z[4], (-1.0f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(z[1], (-2.0f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(z[0], 2.0 * (-3.0f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(z[0], 0.09957413673572789, epsilon = 1e-14);
    }

    #[test]
    fn single_link_absorbs_in_one_step() {
        // k -> d with v(d|k) = 0: Z_k = 1, V(k) = 0.
        let entries = vec![(0usize, 1usize, 1.0)];
        let (z, _) = solve_value_rl_raw(2, &entries, 1, &[true, true], 1e-12).unwrap();
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_utility_two_cycle_fails_to_converge() {
        // k <-> a cycle with unit weights and an exit e -> d: the linear
        // system is singular (spectral radius >= 1).
        let entries = vec![
            (0usize, 1usize, 1.0), // k -> a
            (1, 0, 1.0),           // a -> k
            (0, 2, 1.0),           // k -> e
            (2, 3, 1.0),           // e -> d
        ];
        let err = solve_value_rl_raw(4, &entries, 3, &[true; 4], 1e-10);
        assert!(err.is_err());
    }

    #[test]
    fn symmetric_diamond_probabilities() {
        let problem = diamond_problem([1.0; 5], Model::Rl);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let net = &dm.ext.net;
        let p1 = link_choice_prob(dm, &vf, link(net, "s-o"), link(net, "o-a")).unwrap();
        let p2 = link_choice_prob(dm, &vf, link(net, "s-o"), link(net, "o-b")).unwrap();
        assert_relative_eq!(p1, 0.5, epsilon = 1e-12);
        assert_relative_eq!(p2, 0.5, epsilon = 1e-12);
        // single-successor links are degenerate choices
        let p3 = link_choice_prob(dm, &vf, link(net, "o-a"), link(net, "a-t")).unwrap();
        assert_relative_eq!(p3, 1.0, epsilon = 1e-12);
        assert!(max_row_sum_error(dm, &vf) <= 1e-8);
    }

    #[test]
    fn asymmetric_diamond_is_binary_logit() {
        // v(1|0) = -1, v(2|0) = -2, identical downstream:
        // P(1|0) = 1 / (1 + e^-1).
        let problem = diamond_problem([1.0, 1.0, 2.0, 1.0, 1.0], Model::Rl);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let net = &dm.ext.net;
        let p1 = link_choice_prob(dm, &vf, link(net, "s-o"), link(net, "o-a")).unwrap();
        assert_relative_eq!(p1, 0.7310585786300049, epsilon = 1e-12);
    }

    #[test]
    fn nrl_with_unit_scales_equals_rl() {
        for seed in 0..5u64 {
            let (net, dest) = random_acyclic_network(9, seed);
            let net = Arc::new(net);
            let spec = FeatureSpec {
                utility_link_cols: vec![0, 1],
                scale_cols: vec![0],
            };
            let n_theta = spec.n_theta(&net);
            let rl = Problem::for_destinations(
                Arc::clone(&net),
                Model::Rl,
                spec.clone(),
                &[dest],
                SolveOptions::default(),
            )
            .unwrap();
            let mut theta = vec![-0.2; n_theta];
            theta[0] = -1.3;
            theta[1] = -0.4;
            let params_rl = ParamVector::new(theta, vec![0.0], 1.0).unwrap();
            let (vf_rl, vg_rl) =
                solve_value_and_gradients(&rl.dests[0], &params_rl, Model::Rl, &rl.opts).unwrap();
            let (vf_nrl, vg_nrl) =
                solve_value_and_gradients(&rl.dests[0], &params_rl, Model::Nrl, &rl.opts).unwrap();
            for k in 0..vf_rl.z.len() {
                assert_relative_eq!(vf_rl.z[k], vf_nrl.z[k], epsilon = 1e-10);
            }
            for p in 0..vf_rl.probs.len() {
                assert_relative_eq!(vf_rl.probs[p], vf_nrl.probs[p], epsilon = 1e-10);
                for t in 0..rl.n_params() {
                    assert_relative_eq!(
                        vg_rl.dprobs[(p, t)],
                        vg_nrl.dprobs[(p, t)],
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn nrl_matches_topological_backsubstitution() {
        // mu = 2 on link o-a only; direct substitution in reverse
        // topological order is the oracle.
        let net = diamond_network_with(
            vec!["travel_time".into(), "branch".into()],
            vec![
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 0.0],
                vec![1.0, 0.0],
            ],
        );
        let dest = net.node_id("t").unwrap();
        let problem = Problem::for_destinations(
            net,
            Model::Nrl,
            FeatureSpec {
                utility_link_cols: vec![0],
                scale_cols: vec![1],
            },
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![2.0f64.ln()], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Nrl, &problem.opts).unwrap();
        let tw = build_transition_weights(dm, &params, Model::Nrl).unwrap();

        // Reverse topological order over links: 3, 4, 1, 2, 0 (dummy = 5).
        let mut z = vec![0.0f64; 6];
        z[5] = 1.0;
        for &k in &[3usize, 4, 1, 2, 0] {
            let mut f = 0.0;
            for p in dm.ext.pair_range(k) {
                let a = dm.ext.succ_at(p);
                f += tw.m[p] * z[a.0].powf(tw.phi[p]);
            }
            z[k] = f;
        }
        for k in 0..6 {
            assert_relative_eq!(vf.z[k], z[k], epsilon = 1e-9);
        }
        assert!(max_row_sum_error(dm, &vf) <= 1e-8);
    }

    #[test]
    fn nrl_iterates_increase_monotonically_on_acyclic_networks() {
        // Fixed-point trace from Z^0 = b: on acyclic networks the map is
        // monotone, so undamped iterates only grow.
        let (net, dest) = random_acyclic_network(10, 3);
        let net = Arc::new(net);
        let spec = FeatureSpec {
            utility_link_cols: vec![0],
            scale_cols: vec![1],
        };
        let n_theta = spec.n_theta(&net);
        let problem = Problem::for_destinations(
            net,
            Model::Nrl,
            spec,
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let dm = &problem.dests[0];
        let mut theta = vec![-0.1; n_theta];
        theta[0] = -0.8;
        let params = ParamVector::new(theta, vec![0.2], 1.0).unwrap();
        let tw = build_transition_weights(dm, &params, Model::Nrl).unwrap();
        let ext = &dm.ext;
        let n_ext = ext.n_ext();
        let mut z = vec![0.0f64; n_ext];
        z[ext.dummy.0] = 1.0;
        let mut prev = z.clone();
        for _ in 0..50 {
            let mut next = z.clone();
            for k in 0..n_ext {
                if k == ext.dummy.0 || !ext.reachable[k] {
                    continue;
                }
                let mut f = 0.0;
                for p in ext.pair_range(k) {
                    let a = ext.succ_at(p);
                    f += tw.m[p] * z[a.0].powf(tw.phi[p]);
                }
                next[k] = f;
            }
            for k in 0..n_ext {
                assert!(next[k] >= prev[k] - 1e-15, "iterate decreased at {k}");
            }
            prev = next.clone();
            z = next;
        }
        // and the trace limit agrees with the solver
        let vf = solve_value(dm, &params, Model::Nrl, &problem.opts).unwrap();
        for k in 0..n_ext {
            assert_relative_eq!(vf.z[k], z[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn value_jacobian_matches_finite_differences() {
        let problem = diamond_problem([1.0, 0.7, 1.9, 1.2, 0.4], Model::Rl);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.1], vec![], 1.0).unwrap();
        let (vf, vg) = solve_value_and_gradients(dm, &params, Model::Rl, &problem.opts).unwrap();
        let h = 1e-6;
        for k in 0..vf.z.len() {
            let fd = crate::gradcheck::central_diff(
                |x| {
                    let p = ParamVector::new(x.to_vec(), vec![], 1.0).unwrap();
                    solve_value(dm, &p, Model::Rl, &problem.opts).unwrap().z[k]
                },
                &params.theta,
                0,
                h,
            );
            assert!(
                crate::gradcheck::rel_err(vg.dz[(k, 0)], fd) <= 1e-5,
                "dZ[{k}] analytic {} vs fd {fd}",
                vg.dz[(k, 0)]
            );
        }
        // dummy row gradient is identically zero
        assert_eq!(vg.dz[(dm.ext.dummy.0, 0)], 0.0);
    }

    #[test]
    fn zero_features_give_zero_jacobian() {
        let problem = diamond_problem([0.0; 5], Model::Rl);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let (_vf, vg) = solve_value_and_gradients(dm, &params, Model::Rl, &problem.opts).unwrap();
        for k in 0..dm.ext.n_ext() {
            assert_eq!(vg.dz[(k, 0)], 0.0);
        }
        for p in 0..dm.ext.n_pairs() {
            assert_eq!(vg.dprobs[(p, 0)], 0.0);
        }
    }

    #[test]
    fn prob_gradients_sum_to_zero_and_match_fd() {
        let problem = diamond_problem([1.0, 0.7, 1.9, 1.2, 0.4], Model::Rl);
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-0.9], vec![], 1.0).unwrap();
        let (vf, vg) = solve_value_and_gradients(dm, &params, Model::Rl, &problem.opts).unwrap();
        // normalization derivative: rows sum to a constant
        for k in 0..dm.ext.net.n_links() {
            let mut s = 0.0;
            for p in dm.ext.pair_range(k) {
                s += vg.dprobs[(p, 0)];
            }
            assert!(s.abs() <= 1e-8, "row {k} gradient sum {s}");
        }
        // binary-choice gradient against finite differences
        let net = &dm.ext.net;
        let (k, a) = (link(net, "s-o"), link(net, "o-a"));
        let g = link_prob_gradient(dm, &vf, &vg, k, a).unwrap();
        let fd = crate::gradcheck::central_diff(
            |x| {
                let p = ParamVector::new(x.to_vec(), vec![], 1.0).unwrap();
                let vf = solve_value(dm, &p, Model::Rl, &problem.opts).unwrap();
                link_choice_prob(dm, &vf, k, a).unwrap()
            },
            &params.theta,
            0,
            1e-6,
        );
        assert!(crate::gradcheck::rel_err(g[0], fd) <= 1e-5);
        // single-successor gradient is zero
        let g1 = link_prob_gradient(dm, &vf, &vg, link(net, "o-a"), link(net, "a-t")).unwrap();
        assert!(g1[0].abs() <= 1e-12);
    }

    #[test]
    fn nrl_gradients_match_finite_differences() {
        let net = diamond_network_with(
            vec!["travel_time".into(), "w".into()],
            vec![
                vec![1.0, 0.3],
                vec![0.7, 1.0],
                vec![1.9, 0.2],
                vec![1.2, 0.5],
                vec![0.4, 0.9],
            ],
        );
        let dest = net.node_id("t").unwrap();
        let problem = Problem::for_destinations(
            net,
            Model::Nrl,
            FeatureSpec {
                utility_link_cols: vec![0],
                scale_cols: vec![1],
            },
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let dm = &problem.dests[0];
        let params = ParamVector::new(vec![-1.1], vec![0.3], 1.0).unwrap();
        let (vf, vg) = solve_value_and_gradients(dm, &params, Model::Nrl, &problem.opts).unwrap();
        let flat = params.flat();
        for t in 0..2 {
            for k in 0..vf.z.len() {
                let fd = crate::gradcheck::central_diff(
                    |x| {
                        let p = ParamVector::new(vec![x[0]], vec![x[1]], 1.0).unwrap();
                        solve_value(dm, &p, Model::Nrl, &problem.opts).unwrap().z[k]
                    },
                    &flat,
                    t,
                    1e-6,
                );
                assert!(
                    crate::gradcheck::rel_err(vg.dz[(k, t)], fd) <= 1e-5,
                    "dZ[{k}]/dp{t}: analytic {} vs fd {fd}",
                    vg.dz[(k, t)]
                );
            }
            for p in 0..dm.ext.n_pairs() {
                let fd = crate::gradcheck::central_diff(
                    |x| {
                        let pv = ParamVector::new(vec![x[0]], vec![x[1]], 1.0).unwrap();
                        solve_value(dm, &pv, Model::Nrl, &problem.opts).unwrap().probs[p]
                    },
                    &flat,
                    t,
                    1e-6,
                );
                assert!(
                    crate::gradcheck::rel_err(vg.dprobs[(p, t)], fd) <= 1e-5,
                    "dP[{p}]/dp{t}: analytic {} vs fd {fd}",
                    vg.dprobs[(p, t)]
                );
            }
        }
    }

    #[test]
    fn row_sums_normalize_on_random_networks() {
        for seed in 0..10u64 {
            let (net, dest) = random_acyclic_network(12, seed);
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
            let dm = &problem.dests[0];
            let mut theta = vec![-0.3; problem.n_theta()];
            theta[0] = -1.0;
            let params = ParamVector::new(theta, vec![], 1.0).unwrap();
            let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
            assert!(max_row_sum_error(dm, &vf) <= 1e-8);
        }
    }

    #[test]
    fn pruned_link_queries_error() {
        // Add a link that cannot reach the destination.
        let links = vec![
            crate::network::LinkRecord {
                name: "s-o".into(),
                from: "s".into(),
                to: "o".into(),
                attrs: vec![1.0],
            },
            crate::network::LinkRecord {
                name: "o-t".into(),
                from: "o".into(),
                to: "t".into(),
                attrs: vec![1.0],
            },
            crate::network::LinkRecord {
                name: "o-x".into(),
                from: "o".into(),
                to: "x".into(),
                attrs: vec![1.0],
            },
        ];
        let net = Arc::new(
            Network::build(links, vec!["travel_time".into()], None, None).unwrap(),
        );
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
        assert!(dm.ext.is_pruned(net.link_id("o-x").unwrap()));
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let err = link_choice_prob(dm, &vf, net.link_id("o-x").unwrap(), dm.ext.dummy);
        assert!(err.is_err());
    }
}
