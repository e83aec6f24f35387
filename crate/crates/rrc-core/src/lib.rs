//! Estimation of recursive route choice models (recursive logit and nested
//! recursive logit) from trip observations that may contain unconnected
//! link pairs.
//!
//! The crate provides:
//!
//! * [`network`] — the directed link graph, per-destination extension with
//!   an absorbing dummy link, and the CSV formats;
//! * [`choice`] — utilities, value functions, link choice probabilities and
//!   their analytic gradients for the RL and NRL models;
//! * [`obs`] — trip observations: splitting into connected/unconnected
//!   pairs, forward simulation, and the link-removal corruption protocol;
//! * [`dc`] — exact reach probabilities for unconnected pairs via composed
//!   linear systems, the brute-force enumeration oracle, and the exact
//!   incomplete-data log-likelihood;
//! * [`em`] — the EM estimator with sampled (or enumerated) connecting
//!   paths;
//! * [`mle`] — the L-BFGS driver, the two nested-fixed-point baselines,
//!   and complete-data evaluation;
//! * [`synth`] — synthetic grid and random test networks.

pub mod choice;
pub mod dc;
pub mod em;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod mle;
pub mod network;
pub mod obs;
pub mod synth;

pub use choice::{
    link_choice_prob, link_prob_gradient, solve_value, solve_value_and_gradients, value_jacobian,
    FeatureSpec, Model, ParamVector, Problem, SolveOptions, ValueField,
};
pub use dc::{
    brute_force_reach, build_composed_system, dc_log_likelihood, solve_reach_matrix,
    solve_reach_single, PairQuery, SplitObs,
};
pub use em::{em_estimate, EmOptions};
pub use error::{Error, Result};
pub use mle::{
    dc_estimate, evaluate_complete_ll, maximize, nfxp_estimate, EstimateOptions, EstimationResult,
    MaximizeOptions, NfxpMode,
};
pub use network::{extend_for_destination, load_network, LinkId, Network, NodeId};
pub use obs::{corrupt_trips, simulate_trips, split_trip, ObservationSet, Trip};
