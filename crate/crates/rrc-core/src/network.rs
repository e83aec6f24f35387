//! Directed link-graph representation.
//!
//! The travel network is modelled as a graph over *links*: a traveller
//! occupies a link and chooses among the outgoing links of its sink node.
//! Estimation additionally needs, per destination, an absorbing dummy link
//! appended behind every link that enters the destination node; that
//! per-destination view is [`ExtendedNetwork`].

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index of a link. The dummy link of an [`ExtendedNetwork`] uses
/// index `n_links`, one past the base links.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub usize);

/// Dense index of a node.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl fmt::Debug for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

/// Turn-angle thresholds, in degrees. A left turn is a signed turn angle in
/// (40, 177]; a U-turn is any turn sharper than 177 degrees in either
/// direction.
pub const LEFT_TURN_MIN_DEG: f64 = 40.0;
pub const LEFT_TURN_MAX_DEG: f64 = 177.0;

/// One row of a links file, before index assignment.
#[derive(Debug, Clone)]
pub struct LinkRecord {
    pub name: String,
    pub from: String,
    pub to: String,
    pub attrs: Vec<f64>,
}

/// Raw pair-attribute rows keyed by link names.
#[derive(Debug, Clone, Default)]
pub struct PairRecords {
    pub attr_names: Vec<String>,
    pub rows: Vec<(String, String, Vec<f64>)>,
}

/// Immutable directed link graph with per-link and per-link-pair attributes.
///
/// Adjacency is stored in CSR form: the successors of link `k` are
/// `succ[succ_start[k.0]..succ_start[k.0 + 1]]`, sorted by id. Pair
/// attributes are stored row-major, aligned with the CSR pair index.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub link_names: Vec<String>,
    pub node_names: Vec<String>,
    pub from_node: Vec<NodeId>,
    pub to_node: Vec<NodeId>,
    pub link_attr_names: Vec<String>,
    link_attrs: Vec<f64>,
    pub pair_attr_names: Vec<String>,
    pair_attrs: Vec<f64>,
    succ: Vec<LinkId>,
    succ_start: Vec<usize>,
    /// Links entering each node, sorted.
    entering: Vec<Vec<LinkId>>,
    pub coords: Option<Vec<(f64, f64)>>,
}

impl Network {
    pub fn n_links(&self) -> usize {
        self.link_names.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn n_link_attrs(&self) -> usize {
        self.link_attr_names.len()
    }

    pub fn n_pair_attrs(&self) -> usize {
        self.pair_attr_names.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.succ.len()
    }

    /// Outgoing links A(k), sorted by id.
    pub fn outgoing(&self, k: LinkId) -> &[LinkId] {
        &self.succ[self.succ_start[k.0]..self.succ_start[k.0 + 1]]
    }

    /// CSR index of the pair `(k, a)`, if `a` is a successor of `k`.
    pub fn pair_index(&self, k: LinkId, a: LinkId) -> Option<usize> {
        let row = self.outgoing(k);
        let off = row.binary_search(&a).ok()?;
        Some(self.succ_start[k.0] + off)
    }

    pub fn link_attrs(&self, k: LinkId) -> &[f64] {
        let w = self.n_link_attrs();
        &self.link_attrs[k.0 * w..(k.0 + 1) * w]
    }

    pub fn pair_attrs_at(&self, pair_idx: usize) -> &[f64] {
        let w = self.n_pair_attrs();
        &self.pair_attrs[pair_idx * w..(pair_idx + 1) * w]
    }

    /// Links whose sink is `node`, sorted.
    pub fn links_entering(&self, node: NodeId) -> &[LinkId] {
        &self.entering[node.0]
    }

    pub fn link_id(&self, name: &str) -> Option<LinkId> {
        self.link_names.iter().position(|n| n == name).map(LinkId)
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.node_names.iter().position(|n| n == name).map(NodeId)
    }

    /// Assembles a validated network from raw records.
    ///
    /// When `nodes` is given, every link endpoint must be declared in it and
    /// turn-angle pair features (`left_turn`, `u_turn`) are derived from the
    /// coordinates. Otherwise nodes are registered in order of first
    /// appearance. Attribute values must be finite and nonnegative: the
    /// choice model keeps utilities nonpositive by construction.
    pub fn build(
        links: Vec<LinkRecord>,
        link_attr_names: Vec<String>,
        nodes: Option<(Vec<String>, Vec<(f64, f64)>)>,
        pairs: Option<PairRecords>,
    ) -> Result<Network> {
        if links.is_empty() {
            return Err(Error::InvalidInput("network has no links".into()));
        }
        let n_attrs = link_attr_names.len();

        let mut node_names: Vec<String> = Vec::new();
        let mut node_index: HashMap<String, usize> = HashMap::new();
        let mut coords: Option<Vec<(f64, f64)>> = None;
        let strict_nodes = nodes.is_some();
        if let Some((names, xy)) = nodes {
            if names.len() != xy.len() {
                return Err(Error::Dimension("node names/coords length mismatch".into()));
            }
            for (i, name) in names.iter().enumerate() {
                if node_index.insert(name.clone(), i).is_some() {
                    return Err(Error::InvalidInput(format!("duplicate node id `{name}`")));
                }
            }
            node_names = names;
            coords = Some(xy);
        }

        let mut link_names = Vec::with_capacity(links.len());
        let mut link_index: HashMap<String, usize> = HashMap::new();
        let mut from_node = Vec::with_capacity(links.len());
        let mut to_node = Vec::with_capacity(links.len());
        let mut link_attrs = Vec::with_capacity(links.len() * n_attrs);

        let register_node = |name: &str,
                                 node_names: &mut Vec<String>,
                                 node_index: &mut HashMap<String, usize>|
         -> Result<usize> {
            if let Some(&i) = node_index.get(name) {
                return Ok(i);
            }
            if strict_nodes {
                return Err(Error::Topology(format!(
                    "link references unknown node `{name}`"
                )));
            }
            let i = node_names.len();
            node_names.push(name.to_string());
            node_index.insert(name.to_string(), i);
            Ok(i)
        };

        for rec in &links {
            if rec.attrs.len() != n_attrs {
                return Err(Error::Dimension(format!(
                    "link `{}` has {} attributes, expected {}",
                    rec.name,
                    rec.attrs.len(),
                    n_attrs
                )));
            }
            for (ai, &a) in rec.attrs.iter().enumerate() {
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "link `{}` attribute `{}` = {} (must be finite and nonnegative)",
                        rec.name, link_attr_names[ai], a
                    )));
                }
            }
            if link_index.insert(rec.name.clone(), link_names.len()).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate link id `{}`",
                    rec.name
                )));
            }
            link_names.push(rec.name.clone());
            from_node.push(NodeId(register_node(
                &rec.from,
                &mut node_names,
                &mut node_index,
            )?));
            to_node.push(NodeId(register_node(
                &rec.to,
                &mut node_names,
                &mut node_index,
            )?));
            link_attrs.extend_from_slice(&rec.attrs);
        }

        // Adjacency by shared node: a follows k iff to_node(k) == from_node(a).
        let n_links = link_names.len();
        let n_nodes = node_names.len();
        let mut starting_at: Vec<Vec<LinkId>> = vec![Vec::new(); n_nodes];
        let mut entering: Vec<Vec<LinkId>> = vec![Vec::new(); n_nodes];
        for k in 0..n_links {
            starting_at[from_node[k].0].push(LinkId(k));
            entering[to_node[k].0].push(LinkId(k));
        }
        let mut succ: Vec<LinkId> = Vec::new();
        let mut succ_start: Vec<usize> = Vec::with_capacity(n_links + 1);
        succ_start.push(0);
        for k in 0..n_links {
            let row = &starting_at[to_node[k].0];
            succ.extend_from_slice(row); // already sorted: filled in id order
            succ_start.push(succ.len());
        }

        // Pair attributes: file-supplied columns first, then turn dummies
        // when coordinates are available.
        let mut pair_attr_names: Vec<String> = Vec::new();
        let mut file_cols = 0usize;
        let mut file_rows: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        if let Some(p) = &pairs {
            file_cols = p.attr_names.len();
            pair_attr_names.extend(p.attr_names.iter().cloned());
            for (fname, tname, vals) in &p.rows {
                let f = *link_index.get(fname).ok_or_else(|| {
                    Error::Topology(format!("pair file references unknown link `{fname}`"))
                })?;
                let t = *link_index.get(tname).ok_or_else(|| {
                    Error::Topology(format!("pair file references unknown link `{tname}`"))
                })?;
                if to_node[f] != from_node[t] {
                    return Err(Error::Topology(format!(
                        "pair file row ({fname}, {tname}) is not an adjacent link pair"
                    )));
                }
                if vals.len() != file_cols {
                    return Err(Error::Dimension(format!(
                        "pair ({fname}, {tname}) has {} attributes, expected {file_cols}",
                        vals.len()
                    )));
                }
                for &v in vals {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "pair ({fname}, {tname}) attribute {v} must be finite and nonnegative"
                        )));
                    }
                }
                file_rows.insert((f, t), vals.clone());
            }
        }
        let with_turns = coords.is_some();
        if with_turns {
            pair_attr_names.push("left_turn".into());
            pair_attr_names.push("u_turn".into());
        }
        let n_pair_attrs = pair_attr_names.len();
        let mut pair_attrs = vec![0.0; succ.len() * n_pair_attrs];
        for k in 0..n_links {
            for (off, &a) in succ[succ_start[k]..succ_start[k + 1]].iter().enumerate() {
                let p = succ_start[k] + off;
                let row = &mut pair_attrs[p * n_pair_attrs..(p + 1) * n_pair_attrs];
                if let Some(vals) = file_rows.get(&(k, a.0)) {
                    row[..file_cols].copy_from_slice(vals);
                }
                if with_turns {
                    let xy = coords.as_ref().unwrap();
                    let deg = turn_angle_deg(
                        xy[from_node[k].0],
                        xy[to_node[k].0],
                        xy[from_node[a.0].0],
                        xy[to_node[a.0].0],
                    );
                    let lt = (deg > LEFT_TURN_MIN_DEG && deg <= LEFT_TURN_MAX_DEG) as u8;
                    let ut = (deg.abs() > LEFT_TURN_MAX_DEG) as u8;
                    row[file_cols] = lt as f64;
                    row[file_cols + 1] = ut as f64;
                }
            }
        }

        Ok(Network {
            link_names,
            node_names,
            from_node,
            to_node,
            link_attr_names,
            link_attrs,
            pair_attr_names,
            pair_attrs,
            succ,
            succ_start,
            entering,
            coords,
        })
    }
}

/// Signed turn angle in degrees between the directions of two consecutive
/// links, positive to the left, in (-180, 180]. Degenerate (zero-length)
/// links yield 0.
pub fn turn_angle_deg(
    k_from: (f64, f64),
    k_to: (f64, f64),
    a_from: (f64, f64),
    a_to: (f64, f64),
) -> f64 {
    let (ux, uy) = (k_to.0 - k_from.0, k_to.1 - k_from.1);
    let (vx, vy) = (a_to.0 - a_from.0, a_to.1 - a_from.1);
    if (ux == 0.0 && uy == 0.0) || (vx == 0.0 && vy == 0.0) {
        return 0.0;
    }
    let cross = ux * vy - uy * vx;
    let dot = ux * vx + uy * vy;
    let mut deg = cross.atan2(dot).to_degrees();
    if deg <= -180.0 {
        deg += 360.0;
    }
    deg
}

/// Per-destination view of a [`Network`]: an absorbing dummy link is
/// appended, the outgoing set of every link entering the destination gains
/// the dummy, and links from which the dummy is unreachable are pruned.
///
/// Construction never mutates the base network; many destinations can share
/// one `Arc<Network>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedNetwork {
    pub net: Arc<Network>,
    pub dest: NodeId,
    pub dummy: LinkId,
    succ: Vec<LinkId>,
    succ_start: Vec<usize>,
    /// Base CSR pair index per extended pair; None for pairs into the dummy.
    base_pair: Vec<Option<usize>>,
    /// reachable[k]: the dummy is reachable from extended link k.
    pub reachable: Vec<bool>,
    pub n_pruned: usize,
    /// Longest hop distance to the dummy over non-pruned links.
    pub max_depth: usize,
}

impl ExtendedNetwork {
    /// Number of extended links, base links plus the dummy.
    pub fn n_ext(&self) -> usize {
        self.net.n_links() + 1
    }

    pub fn n_pairs(&self) -> usize {
        self.succ.len()
    }

    pub fn outgoing(&self, k: LinkId) -> &[LinkId] {
        &self.succ[self.succ_start[k.0]..self.succ_start[k.0 + 1]]
    }

    pub fn pair_index(&self, k: LinkId, a: LinkId) -> Option<usize> {
        if k.0 >= self.n_ext() {
            return None;
        }
        let row = self.outgoing(k);
        let off = row.binary_search(&a).ok()?;
        Some(self.succ_start[k.0] + off)
    }

    /// Iterates `(pair_idx, k, a)` over all extended pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, LinkId, LinkId)> + '_ {
        (0..self.n_ext()).flat_map(move |k| {
            let s = self.succ_start[k];
            self.succ[s..self.succ_start[k + 1]]
                .iter()
                .enumerate()
                .map(move |(off, &a)| (s + off, LinkId(k), a))
        })
    }

    /// Base-network pair index behind an extended pair (None for dummy pairs).
    pub fn base_pair(&self, pair_idx: usize) -> Option<usize> {
        self.base_pair[pair_idx]
    }

    /// CSR slice of pair indices for the row of link `k`.
    pub fn pair_range(&self, k: usize) -> std::ops::Range<usize> {
        self.succ_start[k]..self.succ_start[k + 1]
    }

    /// Successor link of the pair at `pair_idx`.
    pub fn succ_at(&self, pair_idx: usize) -> LinkId {
        self.succ[pair_idx]
    }

    pub fn is_pruned(&self, k: LinkId) -> bool {
        !self.reachable[k.0]
    }
}

/// Extends `net` for a destination node.
///
/// Errors when the destination has no incoming link. Links from which the
/// dummy is unreachable are kept in the topology but flagged pruned; solvers
/// exclude them.
pub fn extend_for_destination(net: &Arc<Network>, dest: NodeId) -> Result<ExtendedNetwork> {
    if dest.0 >= net.n_nodes() {
        return Err(Error::InvalidInput(format!(
            "destination node index {} out of range",
            dest.0
        )));
    }
    let entering = net.links_entering(dest);
    if entering.is_empty() {
        return Err(Error::IsolatedDestination(
            net.node_names[dest.0].clone(),
        ));
    }
    let n = net.n_links();
    let dummy = LinkId(n);
    let n_ext = n + 1;

    let mut succ: Vec<LinkId> = Vec::with_capacity(net.n_pairs() + entering.len());
    let mut succ_start: Vec<usize> = Vec::with_capacity(n_ext + 1);
    let mut base_pair: Vec<Option<usize>> = Vec::with_capacity(net.n_pairs() + entering.len());
    succ_start.push(0);
    for k in 0..n {
        let row = net.outgoing(LinkId(k));
        for (off, &a) in row.iter().enumerate() {
            succ.push(a);
            base_pair.push(Some(net.succ_start[k] + off));
        }
        if net.to_node[k] == dest {
            // dummy has the largest id, so the row stays sorted
            succ.push(dummy);
            base_pair.push(None);
        }
        succ_start.push(succ.len());
    }
    // dummy row: absorbing, no successors
    succ_start.push(succ.len());

    // Backward BFS from the dummy over the extended link graph.
    let mut preds: Vec<Vec<u32>> = vec![Vec::new(); n_ext];
    for k in 0..n {
        for &a in &succ[succ_start[k]..succ_start[k + 1]] {
            preds[a.0].push(k as u32);
        }
    }
    let mut reachable = vec![false; n_ext];
    let mut depth = vec![0usize; n_ext];
    let mut queue = VecDeque::new();
    reachable[dummy.0] = true;
    queue.push_back(dummy.0);
    let mut max_depth = 0;
    while let Some(x) = queue.pop_front() {
        for &p in &preds[x] {
            let p = p as usize;
            if !reachable[p] {
                reachable[p] = true;
                depth[p] = depth[x] + 1;
                max_depth = max_depth.max(depth[p]);
                queue.push_back(p);
            }
        }
    }
    let n_pruned = reachable.iter().filter(|r| !**r).count();

    Ok(ExtendedNetwork {
        net: Arc::clone(net),
        dest,
        dummy,
        succ,
        succ_start,
        base_pair,
        reachable,
        n_pruned,
        max_depth,
    })
}

// --- CSV formats -----------------------------------------------------------
//
// Links:  link_id,from_node,to_node,travel_time[,extra attrs...]
// Nodes:  node_id,x,y                       (optional, enables turn dummies)
// Pairs:  from_link,to_link[,attrs...]      (optional)
//
// Ids are arbitrary strings; they are mapped to dense indices on load and the
// mapping can be written to a JSON sidecar for round-tripping.

fn read_csv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push((i + 1, line.split(',').map(|s| s.trim().to_string()).collect()));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "file is empty".into(),
        });
    }
    Ok(rows)
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("`{field}` is not a number"),
    })
}

/// Loads a network from a links CSV, picking up `<stem>.nodes.csv` and
/// `<stem>.pairs.csv` next to it when they exist.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let nodes = sibling(path, "nodes.csv");
    let pairs = sibling(path, "pairs.csv");
    load_network_with(
        path,
        nodes.as_deref().filter(|p| p.exists()),
        pairs.as_deref().filter(|p| p.exists()),
    )
}

fn sibling(path: &Path, suffix: &str) -> Option<std::path::PathBuf> {
    let stem = path.file_stem()?.to_string_lossy();
    Some(path.with_file_name(format!("{stem}.{suffix}")))
}

/// Loads a network from explicit file paths.
pub fn load_network_with(
    links_path: &Path,
    nodes_path: Option<&Path>,
    pairs_path: Option<&Path>,
) -> Result<Network> {
    let rows = read_csv(links_path)?;
    let (hline, header) = &rows[0];
    if header.len() < 4
        || header[0] != "link_id"
        || header[1] != "from_node"
        || header[2] != "to_node"
        || header[3] != "travel_time"
    {
        return Err(Error::Parse {
            path: links_path.display().to_string(),
            line: *hline,
            msg: "expected header `link_id,from_node,to_node,travel_time[,...]`".into(),
        });
    }
    let attr_names: Vec<String> = header[3..].to_vec();
    let mut links = Vec::with_capacity(rows.len() - 1);
    for (line, row) in &rows[1..] {
        if row.len() != header.len() {
            return Err(Error::Parse {
                path: links_path.display().to_string(),
                line: *line,
                msg: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        let attrs = row[3..]
            .iter()
            .map(|f| parse_f64(links_path, *line, f))
            .collect::<Result<Vec<f64>>>()?;
        links.push(LinkRecord {
            name: row[0].clone(),
            from: row[1].clone(),
            to: row[2].clone(),
            attrs,
        });
    }

    let nodes = match nodes_path {
        None => None,
        Some(p) => {
            let rows = read_csv(p)?;
            let (hl, h) = &rows[0];
            if h.len() != 3 || h[0] != "node_id" || h[1] != "x" || h[2] != "y" {
                return Err(Error::Parse {
                    path: p.display().to_string(),
                    line: *hl,
                    msg: "expected header `node_id,x,y`".into(),
                });
            }
            let mut names = Vec::new();
            let mut xy = Vec::new();
            for (line, row) in &rows[1..] {
                if row.len() != 3 {
                    return Err(Error::Parse {
                        path: p.display().to_string(),
                        line: *line,
                        msg: "expected 3 fields".into(),
                    });
                }
                names.push(row[0].clone());
                xy.push((parse_f64(p, *line, &row[1])?, parse_f64(p, *line, &row[2])?));
            }
            Some((names, xy))
        }
    };

    let pairs = match pairs_path {
        None => None,
        Some(p) => {
            let rows = read_csv(p)?;
            let (hl, h) = &rows[0];
            if h.len() < 2 || h[0] != "from_link" || h[1] != "to_link" {
                return Err(Error::Parse {
                    path: p.display().to_string(),
                    line: *hl,
                    msg: "expected header `from_link,to_link[,...]`".into(),
                });
            }
            let attr_names: Vec<String> = h[2..].to_vec();
            let mut prs = PairRecords {
                attr_names,
                rows: Vec::new(),
            };
            for (line, row) in &rows[1..] {
                if row.len() != h.len() {
                    return Err(Error::Parse {
                        path: p.display().to_string(),
                        line: *line,
                        msg: format!("expected {} fields, found {}", h.len(), row.len()),
                    });
                }
                let vals = row[2..]
                    .iter()
                    .map(|f| parse_f64(p, *line, f))
                    .collect::<Result<Vec<f64>>>()?;
                prs.rows.push((row[0].clone(), row[1].clone(), vals));
            }
            Some(prs)
        }
    };

    Network::build(links, attr_names, nodes, pairs)
}

/// Writes the links CSV (and the nodes CSV when coordinates are present).
pub fn save_network(net: &Network, links_path: impl AsRef<Path>) -> Result<()> {
    let links_path = links_path.as_ref();
    let mut out = String::new();
    out.push_str("link_id,from_node,to_node,");
    out.push_str(&net.link_attr_names.join(","));
    out.push('\n');
    for k in 0..net.n_links() {
        let attrs = net
            .link_attrs(LinkId(k))
            .iter()
            .map(|a| format!("{a}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "{},{},{},{}\n",
            net.link_names[k],
            net.node_names[net.from_node[k].0],
            net.node_names[net.to_node[k].0],
            attrs
        ));
    }
    fs::write(links_path, out).map_err(|e| Error::io(links_path.display().to_string(), e))?;
    if let Some(xy) = &net.coords {
        let nodes_path = sibling(links_path, "nodes.csv").unwrap();
        let mut out = String::from("node_id,x,y\n");
        for (i, name) in net.node_names.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", name, xy[i].0, xy[i].1));
        }
        fs::write(&nodes_path, out).map_err(|e| Error::io(nodes_path.display().to_string(), e))?;
    }
    Ok(())
}

/// String-id-to-dense-index mapping, written next to loaded inputs so other
/// tools can round-trip indices.
#[derive(Debug, Serialize, Deserialize)]
pub struct IdSidecar {
    pub link_ids: Vec<String>,
    pub node_ids: Vec<String>,
}

/// Writes the id mapping sidecar (`<stem>.ids.json`) for a loaded network.
pub fn write_id_sidecar(net: &Network, links_path: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let links_path = links_path.as_ref();
    let sidecar = IdSidecar {
        link_ids: net.link_names.clone(),
        node_ids: net.node_names.clone(),
    };
    let path = sibling(links_path, "ids.json").unwrap();
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::InvalidInput(format!("serializing id sidecar: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}
