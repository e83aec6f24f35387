//! Trip observations: parsing and writing, splitting into connected and
//! unconnected link pairs, forward simulation from a ground-truth model, and
//! the link-removal corruption protocol used to manufacture incomplete data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::choice::{solve_value, DestModel, ParamVector, Problem, ValueField};
use crate::error::{Error, Result};
use crate::network::{ExtendedNetwork, LinkId, Network, NodeId};

/// One observed trip: an ordered link sequence ending at the destination
/// dummy (appended on load, since raw observations never record it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trip {
    pub id: String,
    pub dest: NodeId,
    pub links: Vec<LinkId>,
}

impl Trip {
    /// Number of observed links excluding the trailing dummy.
    pub fn n_real_links(&self) -> usize {
        self.links.len().saturating_sub(1)
    }
}

/// Partition of a trip's consecutive link pairs into connected pairs (the
/// successor is an outgoing link of the predecessor) and unconnected pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitTrip {
    pub connected: Vec<(LinkId, LinkId)>,
    pub unconnected: Vec<(LinkId, LinkId)>,
}

/// Splits a trip against the extended network of its destination. Order is
/// preserved within each part; an entirely disconnected sequence is legal.
pub fn split_trip(trip: &Trip, ext: &ExtendedNetwork) -> SplitTrip {
    let mut connected = Vec::new();
    let mut unconnected = Vec::new();
    for w in trip.links.windows(2) {
        let (g, h) = (w[0], w[1]);
        if ext.pair_index(g, h).is_some() {
            connected.push((g, h));
        } else {
            unconnected.push((g, h));
        }
    }
    SplitTrip {
        connected,
        unconnected,
    }
}

/// A set of trips, grouping derived on demand.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObservationSet {
    pub trips: Vec<Trip>,
}

impl ObservationSet {
    pub fn new(trips: Vec<Trip>) -> Self {
        ObservationSet { trips }
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    /// Trip indices grouped by destination node, deterministically ordered.
    pub fn by_dest(&self) -> BTreeMap<NodeId, Vec<usize>> {
        let mut map: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.trips.iter().enumerate() {
            map.entry(t.dest).or_default().push(i);
        }
        map
    }

    pub fn dest_nodes(&self) -> Vec<NodeId> {
        self.by_dest().into_keys().collect()
    }
}

/// Distribution of trip start links.
#[derive(Debug, Clone)]
pub enum OriginDist {
    /// Uniform over links that are feasible for the destination.
    UniformFeasible,
    /// Explicit weights (need not be normalized).
    Weighted(Vec<(LinkId, f64)>),
}

/// Simulation settings. `min_links` counts real links (the dummy excluded);
/// trips shorter than that are discarded and resampled.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub n_trips: usize,
    pub min_links: usize,
    pub step_cap: usize,
    pub seed: u64,
    pub origin: OriginDist,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            n_trips: 1000,
            min_links: 5,
            step_cap: 10_000,
            seed: 0,
            origin: OriginDist::UniformFeasible,
        }
    }
}

/// Samples one walk from `start` following the link choice probabilities
/// until absorption at the dummy. Returns the full link sequence including
/// the dummy, or None when the step cap is hit.
fn sample_walk(
    dm: &DestModel,
    vf: &ValueField,
    start: LinkId,
    step_cap: usize,
    rng: &mut impl Rng,
) -> Option<Vec<LinkId>> {
    let ext = &dm.ext;
    let mut path = vec![start];
    let mut cur = start;
    for _ in 0..step_cap {
        if cur == ext.dummy {
            return Some(path);
        }
        let range = ext.pair_range(cur.0);
        let total: f64 = range.clone().map(|p| vf.probs[p]).sum();
        if total <= 0.0 {
            return None; // dead end at this parameter point
        }
        let mut u = rng.random::<f64>() * total;
        let mut chosen = None;
        for p in range.clone() {
            u -= vf.probs[p];
            if u <= 0.0 {
                chosen = Some(ext.succ_at(p));
                break;
            }
        }
        let next = chosen.unwrap_or_else(|| ext.succ_at(range.end - 1));
        path.push(next);
        cur = next;
    }
    None
}

/// Simulates trips toward one destination, link by link from the model's
/// choice probabilities. Deterministic given the seed: trip `i` draws from
/// its own RNG stream, so resampling one trip never shifts another.
pub fn simulate_trips(
    dm: &DestModel,
    vf: &ValueField,
    opts: &SimOptions,
    id_offset: usize,
) -> Result<ObservationSet> {
    let ext = &dm.ext;
    let origins: Vec<(LinkId, f64)> = match &opts.origin {
        OriginDist::UniformFeasible => (0..ext.net.n_links())
            .filter(|&k| vf.feasible[k])
            .map(|k| (LinkId(k), 1.0))
            .collect(),
        OriginDist::Weighted(w) => {
            for &(k, wt) in w {
                if !(wt >= 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "negative origin weight for link {}",
                        k.0
                    )));
                }
                if k.0 >= ext.net.n_links() {
                    return Err(Error::InvalidInput(format!(
                        "origin link {} out of range",
                        k.0
                    )));
                }
            }
            w.clone()
        }
    };
    let total_w: f64 = origins.iter().map(|&(_, w)| w).sum();
    if origins.is_empty() || total_w <= 0.0 {
        return Err(Error::InvalidInput(
            "no feasible origin links to sample from".into(),
        ));
    }

    let mut trips = Vec::with_capacity(opts.n_trips);
    for i in 0..opts.n_trips {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(id_offset as u64 + i as u64);
        let mut accepted = None;
        // Resample within the trip's own stream until long enough.
        for _attempt in 0..10_000 {
            let mut u = rng.random::<f64>() * total_w;
            let mut start = origins[origins.len() - 1].0;
            for &(k, w) in &origins {
                u -= w;
                if u <= 0.0 {
                    start = k;
                    break;
                }
            }
            match sample_walk(dm, vf, start, opts.step_cap, &mut rng) {
                None => {
                    return Err(Error::InvalidInput(format!(
                        "walk from link {} did not reach absorption within {} steps",
                        start.0, opts.step_cap
                    )))
                }
                Some(path) => {
                    if path.len() - 1 >= opts.min_links {
                        accepted = Some(path);
                        break;
                    }
                }
            }
        }
        let path = accepted.ok_or_else(|| {
            Error::InvalidInput(format!(
                "could not sample a trip with at least {} links (origins too close to the destination?)",
                opts.min_links
            ))
        })?;
        trips.push(Trip {
            id: format!("t{}", id_offset + i),
            dest: ext.dest,
            links: path,
        });
    }
    Ok(ObservationSet::new(trips))
}

/// Multi-destination simulation plan used by the experiment harness: each
/// trip picks a destination uniformly, then walks from a uniform feasible
/// origin.
#[derive(Debug, Clone)]
pub struct MultiSimPlan {
    pub dests: Vec<NodeId>,
    pub n_trips: usize,
    pub min_links: usize,
    pub step_cap: usize,
    pub seed: u64,
}

/// Simulates a mixed-destination observation set at the true parameters.
pub fn simulate_multi(problem: &Problem, params: &ParamVector, plan: &MultiSimPlan) -> Result<ObservationSet> {
    // Assign destinations per trip first so trip ids are stable.
    let mut assign_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xd1b54a32d192ed03);
    let mut counts = vec![0usize; problem.dests.len()];
    let mut order = Vec::with_capacity(plan.n_trips);
    for _ in 0..plan.n_trips {
        let slot_pick = plan.dests[assign_rng.random_range(0..plan.dests.len())];
        let slot = problem
            .slot_of(slot_pick)
            .ok_or_else(|| Error::InvalidInput(format!("destination {} not prepared", slot_pick.0)))?;
        counts[slot] += 1;
        order.push(slot);
    }
    let mut per_dest: Vec<ObservationSet> = Vec::with_capacity(problem.dests.len());
    let mut offset = 0usize;
    for (slot, dm) in problem.dests.iter().enumerate() {
        if counts[slot] == 0 {
            per_dest.push(ObservationSet::default());
            continue;
        }
        let vf = solve_value(dm, params, problem.model, &problem.opts)?;
        let opts = SimOptions {
            n_trips: counts[slot],
            min_links: plan.min_links,
            step_cap: plan.step_cap,
            seed: plan.seed,
            origin: OriginDist::UniformFeasible,
        };
        per_dest.push(simulate_trips(dm, &vf, &opts, offset)?);
        offset += counts[slot];
    }
    // Interleave back in assignment order for a stable, mixed sequence.
    let mut cursors = vec![0usize; problem.dests.len()];
    let mut trips = Vec::with_capacity(plan.n_trips);
    for slot in order {
        let t = per_dest[slot].trips[cursors[slot]].clone();
        cursors[slot] += 1;
        trips.push(t);
    }
    // Re-id in final order.
    for (i, t) in trips.iter_mut().enumerate() {
        t.id = format!("t{i}");
    }
    Ok(ObservationSet::new(trips))
}

/// Per-trip record of removed positions, for auditability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripRemoval {
    pub trip_id: String,
    /// Positions (indices into the pre-corruption link sequence) removed.
    pub removed_positions: Vec<usize>,
}

/// Audit record of one corruption pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub p: f64,
    pub seed: u64,
    pub trips: Vec<TripRemoval>,
}

/// Removes each interior link observation independently with probability
/// `p`. The first link (origin) and the trailing dummy (destination) are
/// always retained. Deterministic given the seed.
pub fn corrupt_trips(
    obs: &ObservationSet,
    p: f64,
    seed: u64,
) -> Result<(ObservationSet, CorruptionManifest)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "removal probability {p} outside [0, 1]"
        )));
    }
    let mut out = Vec::with_capacity(obs.trips.len());
    let mut manifest = CorruptionManifest {
        p,
        seed,
        trips: Vec::with_capacity(obs.trips.len()),
    };
    for (i, trip) in obs.trips.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut links = Vec::with_capacity(trip.links.len());
        let mut removed = Vec::new();
        for (pos, &l) in trip.links.iter().enumerate() {
            let interior = pos > 0 && pos + 1 < trip.links.len();
            if interior && rng.random_bool(p) {
                removed.push(pos);
            } else {
                links.push(l);
            }
        }
        manifest.trips.push(TripRemoval {
            trip_id: trip.id.clone(),
            removed_positions: removed,
        });
        out.push(Trip {
            id: trip.id.clone(),
            dest: trip.dest,
            links,
        });
    }
    Ok((ObservationSet::new(out), manifest))
}

// --- Trips CSV ---------------------------------------------------------------
//
// trip_id,dest_node,link_sequence     (sequence space-separated, real links
// only; the destination dummy is appended on load)

/// Writes trips to CSV, dropping the trailing dummy from each sequence.
pub fn save_trips(obs: &ObservationSet, net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dummy = LinkId(net.n_links());
    let mut out = String::from("trip_id,dest_node,link_sequence\n");
    for t in &obs.trips {
        let seq = t
            .links
            .iter()
            .filter(|&&l| l != dummy)
            .map(|l| net.link_names[l.0].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{},{},{}\n",
            t.id, net.node_names[t.dest.0], seq
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads trips from CSV and appends the destination dummy to each sequence.
pub fn load_trips(net: &Arc<Network>, path: impl AsRef<Path>) -> Result<ObservationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let dummy = LinkId(net.n_links());
    let mut trips = Vec::new();
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    msg: "file is empty".into(),
                })
            }
            Some((_, l)) if l.trim().is_empty() || l.trim_start().starts_with('#') => continue,
            Some((i, l)) => break (i + 1, l.trim().to_string()),
        }
    };
    if header.1 != "trip_id,dest_node,link_sequence" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: header.0,
            msg: "expected header `trip_id,dest_node,link_sequence`".into(),
        });
    }
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, ',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected 3 fields".into(),
            });
        }
        let dest = net.node_id(fields[1]).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("unknown destination node `{}`", fields[1]),
        })?;
        let mut links = Vec::new();
        for name in fields[2].split_whitespace() {
            let l = net.link_id(name).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("unknown link `{name}`"),
            })?;
            links.push(l);
        }
        if links.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "empty link sequence".into(),
            });
        }
        links.push(dummy);
        trips.push(Trip {
            id: fields[0].to_string(),
            dest,
            links,
        });
    }
    Ok(ObservationSet::new(trips))
}

/// Writes the corruption manifest JSON.
pub fn save_manifest(manifest: &CorruptionManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidInput(format!("serializing manifest: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{FeatureSpec, Model, SolveOptions};
    use crate::network::extend_for_destination;
    use crate::synth::diamond_network;

    fn diamond_setup(tt: [f64; 5]) -> (Problem, ValueField) {
        let net = diamond_network(tt);
        let dest = net.node_id("t").unwrap();
        let problem = Problem::for_destinations(
            Arc::clone(&net),
            Model::Rl,
            FeatureSpec::all_link_attrs(&net),
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let params = ParamVector::new(vec![-1.0], vec![], 1.0).unwrap();
        let vf = solve_value(&problem.dests[0], &params, Model::Rl, &problem.opts).unwrap();
        (problem, vf)
    }

    fn lid(problem: &Problem, name: &str) -> LinkId {
        problem.net.link_id(name).unwrap()
    }

    #[test]
    fn split_complete_trip_has_no_unconnected_pairs() {
        let (problem, _) = diamond_setup([1.0; 5]);
        let ext = &problem.dests[0].ext;
        let trip = Trip {
            id: "t0".into(),
            dest: ext.dest,
            links: vec![
                lid(&problem, "s-o"),
                lid(&problem, "o-a"),
                lid(&problem, "a-t"),
                ext.dummy,
            ],
        };
        let s = split_trip(&trip, ext);
        assert_eq!(s.unconnected, vec![]);
        assert_eq!(s.connected.len(), 3);
    }

    #[test]
    fn split_detects_missing_interior_link() {
        // (s-o, a-t, d) with o-a removed: connected {(a-t, d)}, unconnected {(s-o, a-t)}.
        let (problem, _) = diamond_setup([1.0; 5]);
        let ext = &problem.dests[0].ext;
        let trip = Trip {
            id: "t0".into(),
            dest: ext.dest,
            links: vec![lid(&problem, "s-o"), lid(&problem, "a-t"), ext.dummy],
        };
        let s = split_trip(&trip, ext);
        assert_eq!(s.connected, vec![(lid(&problem, "a-t"), ext.dummy)]);
        assert_eq!(
            s.unconnected,
            vec![(lid(&problem, "s-o"), lid(&problem, "a-t"))]
        );
    }

    #[test]
    fn split_fully_disconnected_trip_is_legal() {
        let (problem, _) = diamond_setup([1.0; 5]);
        let ext = &problem.dests[0].ext;
        let trip = Trip {
            id: "t0".into(),
            dest: ext.dest,
            links: vec![lid(&problem, "s-o"), ext.dummy],
        };
        let s = split_trip(&trip, ext);
        assert!(s.connected.is_empty());
        assert_eq!(s.unconnected, vec![(lid(&problem, "s-o"), ext.dummy)]);
    }

    #[test]
    fn symmetric_diamond_simulation_frequencies() {
        let (problem, vf) = diamond_setup([1.0; 5]);
        let dm = &problem.dests[0];
        let opts = SimOptions {
            n_trips: 10_000,
            min_links: 1,
            step_cap: 100,
            seed: 11,
            origin: OriginDist::Weighted(vec![(lid(&problem, "s-o"), 1.0)]),
        };
        let obs = simulate_trips(dm, &vf, &opts, 0).unwrap();
        let through_1 = obs
            .trips
            .iter()
            .filter(|t| t.links.contains(&lid(&problem, "o-a")))
            .count();
        let frac = through_1 as f64 / obs.len() as f64;
        assert!((frac - 0.5).abs() <= 0.015, "fraction {frac}");
    }

    #[test]
    fn asymmetric_diamond_simulation_matches_choice_probability() {
        // v(o-a|s-o) = -1, v(o-b|s-o) = -2 => P = 0.731.
        let (problem, vf) = diamond_setup([1.0, 1.0, 2.0, 1.0, 1.0]);
        let dm = &problem.dests[0];
        let opts = SimOptions {
            n_trips: 10_000,
            min_links: 1,
            step_cap: 100,
            seed: 5,
            origin: OriginDist::Weighted(vec![(lid(&problem, "s-o"), 1.0)]),
        };
        let obs = simulate_trips(dm, &vf, &opts, 0).unwrap();
        let through_1 = obs
            .trips
            .iter()
            .filter(|t| t.links.contains(&lid(&problem, "o-a")))
            .count();
        let frac = through_1 as f64 / obs.len() as f64;
        assert!((frac - 0.7310585786300049).abs() <= 0.015, "fraction {frac}");
    }

    #[test]
    fn simulation_is_deterministic_given_seed() {
        let (problem, vf) = diamond_setup([1.0; 5]);
        let dm = &problem.dests[0];
        let opts = SimOptions {
            n_trips: 200,
            min_links: 1,
            step_cap: 100,
            seed: 7,
            origin: OriginDist::UniformFeasible,
        };
        let a = simulate_trips(dm, &vf, &opts, 0).unwrap();
        let b = simulate_trips(dm, &vf, &opts, 0).unwrap();
        assert_eq!(a, b);
        // byte-identical on disk too
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.csv");
        let pb = dir.path().join("b.csv");
        save_trips(&a, &problem.net, &pa).unwrap();
        save_trips(&b, &problem.net, &pb).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    }

    #[test]
    fn corrupt_p0_is_identity_and_p1_keeps_endpoints() {
        let (problem, vf) = diamond_setup([1.0; 5]);
        let dm = &problem.dests[0];
        let opts = SimOptions {
            n_trips: 50,
            min_links: 1,
            step_cap: 100,
            seed: 3,
            origin: OriginDist::UniformFeasible,
        };
        let obs = simulate_trips(dm, &vf, &opts, 0).unwrap();
        let (same, m0) = corrupt_trips(&obs, 0.0, 9).unwrap();
        assert_eq!(same, obs);
        assert!(m0.trips.iter().all(|t| t.removed_positions.is_empty()));
        let (gone, _) = corrupt_trips(&obs, 1.0, 9).unwrap();
        for (orig, cor) in obs.trips.iter().zip(gone.trips.iter()) {
            assert_eq!(cor.links.len(), 2);
            assert_eq!(cor.links[0], orig.links[0]);
            assert_eq!(*cor.links.last().unwrap(), dm.ext.dummy);
            assert_eq!(cor.id, orig.id);
            assert_eq!(cor.dest, orig.dest);
        }
    }

    #[test]
    fn corruption_removal_count_is_binomial() {
        // 12 interior links at p = 0.5 over 10k seeds: mean removed 6 +- 0.1.
        let links: Vec<LinkId> = (0..14).map(LinkId).collect();
        let obs = ObservationSet::new(vec![Trip {
            id: "t".into(),
            dest: NodeId(0),
            links,
        }]);
        let mut total = 0usize;
        let n_seeds = 10_000u64;
        for seed in 0..n_seeds {
            let (_, m) = corrupt_trips(&obs, 0.5, seed).unwrap();
            total += m.trips[0].removed_positions.len();
        }
        let mean = total as f64 / n_seeds as f64;
        assert!((mean - 6.0).abs() <= 0.1, "mean removed {mean}");
    }

    #[test]
    fn trips_roundtrip_through_csv() {
        let (problem, vf) = diamond_setup([1.0; 5]);
        let dm = &problem.dests[0];
        let opts = SimOptions {
            n_trips: 25,
            min_links: 1,
            step_cap: 100,
            seed: 2,
            origin: OriginDist::UniformFeasible,
        };
        let obs = simulate_trips(dm, &vf, &opts, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trips.csv");
        save_trips(&obs, &problem.net, &p).unwrap();
        let back = load_trips(&problem.net, &p).unwrap();
        assert_eq!(obs, back);
    }

    #[test]
    fn unknown_link_in_trips_file_is_a_parse_error() {
        let net = diamond_network([1.0; 5]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trips.csv");
        fs::write(&p, "trip_id,dest_node,link_sequence\nt0,t,s-o nope\n").unwrap();
        assert!(load_trips(&net, &p).is_err());
    }

    #[test]
    fn min_length_filter_is_honored() {
        // On a chain long enough, min_links = 5 only keeps long trips.
        let net = crate::synth::grid_network(4, 4, 0);
        let net = Arc::new(net);
        let dest = net.node_id("n3_3").unwrap();
        let spec = FeatureSpec::all_link_attrs(&net);
        let problem = Problem::for_destinations(
            Arc::clone(&net),
            Model::Rl,
            spec,
            &[dest],
            SolveOptions::default(),
        )
        .unwrap();
        let mut theta = vec![-0.5; problem.n_theta()];
        theta[0] = -2.0;
        let params = ParamVector::new(theta, vec![], 1.0).unwrap();
        let dm = &problem.dests[0];
        let vf = solve_value(dm, &params, Model::Rl, &problem.opts).unwrap();
        let opts = SimOptions {
            n_trips: 100,
            min_links: 5,
            step_cap: 10_000,
            seed: 1,
            origin: OriginDist::UniformFeasible,
        };
        let obs = simulate_trips(dm, &vf, &opts, 0).unwrap();
        assert!(obs.trips.iter().all(|t| t.n_real_links() >= 5));
        let _ = extend_for_destination(&net, dest).unwrap();
    }
}
