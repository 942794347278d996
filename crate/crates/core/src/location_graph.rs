//! Cell-keyed location graph and keyword propagation.
//!
//! Every location carries a 3 x K keyword matrix with one row per evidence
//! source: the neighborhood (`n`), visit-weighted neighbors (`v`), and the
//! keywords of visitors (`u`). Each propagation step is an exponential
//! smoothing of those rows against the previous step's values of the node's
//! direct neighbors. Updates are synchronous: every node reads the frozen
//! step `s - 1` snapshot.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_grid::{distance, CellIndex, GeoPoint, GridConfig};

/// Number of keywords used when nothing else is configured.
pub const DEFAULT_KEYWORDS: usize = 25;

/// A length-K vector of keyword probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeywordVector(Vec<f64>);

impl KeywordVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("keyword value {bad} outside [0, 1]")));
        }
        Ok(KeywordVector(values))
    }

    pub fn zeros(k: usize) -> Self {
        KeywordVector(vec![0.0; k])
    }

    /// Clamps every entry into `[0, 1]`; NaN becomes 0.
    pub fn clamped(values: Vec<f64>) -> Self {
        KeywordVector(values.into_iter().map(clamp_unit).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for KeywordVector {
    type Output = f64;

    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

pub(crate) fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Keyword count plus the groups of mutually exclusive keywords (for
/// example a gender pair) whose values must sum to at most 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSchema {
    pub keywords: usize,
    #[serde(default)]
    pub exclusive_groups: Vec<Vec<usize>>,
}

impl KeywordSchema {
    pub fn new(keywords: usize, exclusive_groups: Vec<Vec<usize>>) -> Result<Self> {
        if keywords == 0 {
            return Err(Error::config("keyword count must be positive"));
        }
        let mut seen = vec![false; keywords];
        for group in &exclusive_groups {
            if group.len() < 2 {
                return Err(Error::config("exclusive groups need at least two keywords"));
            }
            for &k in group {
                if k >= keywords {
                    return Err(Error::config(format!("keyword index {k} out of range")));
                }
                if seen[k] {
                    return Err(Error::config(format!("keyword {k} in two exclusive groups")));
                }
                seen[k] = true;
            }
        }
        Ok(KeywordSchema {
            keywords,
            exclusive_groups,
        })
    }

    pub fn plain(keywords: usize) -> Self {
        KeywordSchema {
            keywords,
            exclusive_groups: Vec::new(),
        }
    }

    /// The exclusive group containing `k`, if any.
    pub fn group_of(&self, k: usize) -> Option<&[usize]> {
        self.exclusive_groups
            .iter()
            .find(|g| g.contains(&k))
            .map(Vec::as_slice)
    }

    /// Clamps a row into `[0, 1]` and rescales every exclusive group whose
    /// sum exceeds 1. Entries listed in `pinned` keep their value and the
    /// remaining members of their group share what is left.
    pub fn normalize_row(&self, row: &mut [f64], pinned: &BTreeMap<usize, f64>) {
        for (k, x) in row.iter_mut().enumerate() {
            *x = match pinned.get(&k) {
                Some(p) => clamp_unit(*p),
                None => clamp_unit(*x),
            };
        }
        for group in &self.exclusive_groups {
            let fixed: f64 = group.iter().filter(|k| pinned.contains_key(k)).map(|&k| row[k]).sum();
            let free: f64 = group.iter().filter(|k| !pinned.contains_key(k)).map(|&k| row[k]).sum();
            if fixed + free <= 1.0 {
                continue;
            }
            if fixed >= 1.0 {
                for &k in group {
                    if pinned.contains_key(&k) {
                        row[k] /= fixed;
                    } else {
                        row[k] = 0.0;
                    }
                }
            } else if free > 0.0 {
                let scale = (1.0 - fixed) / free;
                for &k in group.iter().filter(|k| !pinned.contains_key(k)) {
                    row[k] *= scale;
                }
            }
        }
    }
}

/// The keyword matrix of one location at propagation step `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordState {
    pub n: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub step: u64,
}

impl KeywordState {
    pub fn zeros(k: usize) -> Self {
        KeywordState {
            n: vec![0.0; k],
            v: vec![0.0; k],
            u: vec![0.0; k],
            step: 0,
        }
    }

    /// Initial state: every row starts at the prior (zero where unset).
    pub fn from_prior(k: usize, prior: &BTreeMap<usize, f64>) -> Self {
        let mut s = KeywordState::zeros(k);
        for (&kw, &val) in prior {
            s.n[kw] = val;
            s.v[kw] = val;
            s.u[kw] = val;
        }
        s
    }

    fn rows_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.n, &mut self.v, &mut self.u]
    }
}

/// Clamp every row into `[0, 1]` and rescale exclusive groups to sum to at
/// most 1.
pub fn normalize_keywords(state: &KeywordState, schema: &KeywordSchema) -> KeywordState {
    normalize_pinned(state, schema, &BTreeMap::new())
}

fn normalize_pinned(
    state: &KeywordState,
    schema: &KeywordSchema,
    pinned: &BTreeMap<usize, f64>,
) -> KeywordState {
    let mut out = state.clone();
    for row in out.rows_mut() {
        schema.normalize_row(row, pinned);
    }
    out
}

/// How the neighbor term of the `n` row is normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborNormalization {
    /// `(1 - lambda) / D * sum n_j / (1 + d_j)` with `D = sum 1 / (1 + d_j)`:
    /// a distance-weighted neighbor average, whose fixed point under constant
    /// neighbors is that constant.
    #[default]
    DistanceWeighted,
    /// `(1 - lambda) * D / N * sum n_j / (1 + d_j)`, kept for compatibility.
    Printed,
}

/// Per-keyword smoothing factors for the three rows, plus the weights used
/// when device profiles mix impression and visit evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub gamma_f: Vec<f64>,
    pub gamma_g: Vec<f64>,
    #[serde(default)]
    pub neighbor_normalization: NeighborNormalization,
}

impl SmoothingParams {
    /// All smoothing factors 0.5 and equal profile weights.
    pub fn uniform(k: usize) -> Self {
        SmoothingParams {
            lambda: vec![0.5; k],
            mu: vec![0.5; k],
            nu: vec![0.5; k],
            gamma_f: vec![0.5; k],
            gamma_g: vec![0.5; k],
            neighbor_normalization: NeighborNormalization::DistanceWeighted,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda.iter_mut().for_each(|x| *x = lambda);
        self
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let smoothing = [("lambda", &self.lambda), ("mu", &self.mu), ("nu", &self.nu)];
        for (name, xs) in smoothing {
            if xs.len() != k {
                return Err(Error::config(format!("{name} has {} entries, expected {k}", xs.len())));
            }
            if xs.iter().any(|x| !(0.0..1.0).contains(x)) {
                return Err(Error::config(format!("{name} entries must lie in [0, 1)")));
            }
        }
        for (name, xs) in [("gamma_f", &self.gamma_f), ("gamma_g", &self.gamma_g)] {
            if xs.len() != k {
                return Err(Error::config(format!("{name} has {} entries, expected {k}", xs.len())));
            }
            if xs.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::config(format!("{name} entries must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A business or prior location. `prior` maps 0-based keyword indices to
/// fixed values; prior nodes (for example area centroids) never change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub pid: String,
    #[serde(flatten)]
    pub point: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<BTreeMap<usize, f64>>,
    #[serde(default, rename = "prior_node", skip_serializing_if = "std::ops::Not::not")]
    pub is_prior_node: bool,
}

impl Location {
    pub fn new(pid: impl Into<String>, point: GeoPoint) -> Self {
        Location {
            pid: pid.into(),
            point,
            prior: None,
            is_prior_node: false,
        }
    }

    pub fn with_prior(mut self, prior: BTreeMap<usize, f64>) -> Self {
        self.prior = Some(prior);
        self
    }

    pub fn prior_node(mut self) -> Self {
        self.is_prior_node = true;
        self
    }

    fn prior_or_empty(&self) -> BTreeMap<usize, f64> {
        self.prior.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    location: Location,
    cell: CellIndex,
    state: KeywordState,
    /// (node index, meters), sorted by index
    edges: Vec<(usize, f64)>,
}

/// Per-step inputs: visit counts per location and the keyword distribution
/// of each location's visitors. Missing entries count as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PropagationInput {
    pub visits: HashMap<String, f64>,
    pub visitor_keywords: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationGraph {
    grid: GridConfig,
    edge_threshold_m: f64,
    schema: KeywordSchema,
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    cells: BTreeMap<CellIndex, Vec<usize>>,
}

/// A neighbor as seen from a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub pid: String,
    pub distance_m: f64,
}

impl LocationGraph {
    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn edge_threshold_m(&self) -> f64 {
        self.edge_threshold_m
    }

    pub fn schema(&self) -> &KeywordSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, pid: &str) -> bool {
        self.index.contains_key(pid)
    }

    /// Pids in ascending order.
    pub fn pids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.location.pid.as_str())
    }

    pub fn locations(&self) -> impl Iterator<Item = &Location> {
        self.nodes.iter().map(|n| &n.location)
    }

    pub fn location(&self, pid: &str) -> Option<&Location> {
        self.index.get(pid).map(|&i| &self.nodes[i].location)
    }

    pub fn state(&self, pid: &str) -> Option<&KeywordState> {
        self.index.get(pid).map(|&i| &self.nodes[i].state)
    }

    pub fn set_state(&mut self, pid: &str, state: KeywordState) -> Result<()> {
        let &i = self
            .index
            .get(pid)
            .ok_or_else(|| Error::UnknownPid(pid.to_string()))?;
        if [&state.n, &state.v, &state.u]
            .iter()
            .any(|r| r.len() != self.schema.keywords)
        {
            return Err(Error::data("keyword state has the wrong width"));
        }
        self.nodes[i].state = state;
        Ok(())
    }

    pub fn edges(&self, pid: &str) -> Option<Vec<Edge>> {
        self.index.get(pid).map(|&i| {
            self.nodes[i]
                .edges
                .iter()
                .map(|&(j, d)| Edge {
                    pid: self.nodes[j].location.pid.clone(),
                    distance_m: d,
                })
                .collect()
        })
    }

    /// Every directed edge as `(from, to, meters)`, sorted.
    pub fn edge_list(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            for &(j, d) in &node.edges {
                out.push((node.location.pid.clone(), self.nodes[j].location.pid.clone(), d));
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.edges.len()).sum::<usize>() / 2
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellIndex, Vec<&str>)> {
        self.cells.iter().map(move |(c, idx)| {
            (
                c,
                idx.iter()
                    .map(|&i| self.nodes[i].location.pid.as_str())
                    .collect(),
            )
        })
    }

    /// Pids of the nodes stored in the 3x3 window around `cell`.
    pub fn window_pids(&self, cell: CellIndex) -> Vec<&str> {
        self.window_nodes(cell)
            .map(|i| self.nodes[i].location.pid.as_str())
            .collect()
    }

    fn window_nodes(&self, cell: CellIndex) -> impl Iterator<Item = usize> + '_ {
        self.grid
            .window(cell)
            .into_iter()
            .filter_map(move |c| self.cells.get(&c))
            .flat_map(|v| v.iter().copied())
    }
}

fn check_threshold(grid: &GridConfig, threshold: f64, locations: &[&Location]) -> Result<()> {
    if !threshold.is_finite() || threshold <= 0.0 {
        return Err(Error::config(format!("edge threshold must be > 0, got {threshold}")));
    }
    let max_lat = locations
        .iter()
        .map(|l| l.point.lat().abs())
        .fold(0.0, f64::max);
    let limit = grid.max_window_radius_m(max_lat);
    if threshold > limit {
        return Err(Error::config(format!(
            "edge threshold {threshold} m exceeds the {limit:.1} m the grid window guarantees; \
             use larger cells"
        )));
    }
    Ok(())
}

fn validate_location(loc: &Location, schema: &KeywordSchema) -> Result<()> {
    if let Some(prior) = &loc.prior {
        for (&k, &v) in prior {
            if k >= schema.keywords {
                return Err(Error::data(format!(
                    "location `{}` has prior keyword {k} beyond K = {}",
                    loc.pid, schema.keywords
                )));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!(
                    "location `{}` has prior value {v} outside [0, 1]",
                    loc.pid
                )));
            }
        }
    }
    Ok(())
}

/// Normalized copy of a location's prior, so fixed values never violate the
/// exclusive-group constraint.
fn normalized_prior(loc: &Location, schema: &KeywordSchema) -> BTreeMap<usize, f64> {
    let prior = loc.prior_or_empty();
    if prior.is_empty() {
        return prior;
    }
    let mut row = vec![0.0; schema.keywords];
    for (&k, &v) in &prior {
        row[k] = v;
    }
    schema.normalize_row(&mut row, &BTreeMap::new());
    prior.keys().map(|&k| (k, row[k])).collect()
}

fn new_node(location: Location, grid: &GridConfig, schema: &KeywordSchema) -> Node {
    let prior = normalized_prior(&location, schema);
    let state = KeywordState::from_prior(schema.keywords, &prior);
    Node {
        cell: grid.cell_of(&location.point),
        location,
        state,
        edges: Vec::new(),
    }
}

/// Builds the graph: each location is broadcast to its 3x3 window, pairs in
/// each window closer than `edge_threshold_m` become symmetric edges, and
/// every node is stored under its own cell.
pub fn build_graph(
    locations: Vec<Location>,
    grid: GridConfig,
    edge_threshold_m: f64,
    schema: KeywordSchema,
) -> Result<LocationGraph> {
    check_threshold(&grid, edge_threshold_m, &locations.iter().collect::<Vec<_>>())?;
    let mut locations = locations;
    locations.sort_by(|a, b| a.pid.cmp(&b.pid));
    for pair in locations.windows(2) {
        if pair[0].pid == pair[1].pid {
            return Err(Error::DuplicatePid(pair[0].pid.clone()));
        }
    }
    for loc in &locations {
        validate_location(loc, &schema)?;
    }
    let nodes: Vec<Node> = locations
        .into_iter()
        .map(|l| new_node(l, &grid, &schema))
        .collect();
    let mut graph = LocationGraph {
        grid,
        edge_threshold_m,
        schema,
        nodes,
        index: HashMap::new(),
        cells: BTreeMap::new(),
    };
    graph.reindex();
    graph.connect_all();
    Ok(graph)
}

impl LocationGraph {
    fn reindex(&mut self) {
        self.index = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.location.pid.clone(), i))
            .collect();
        self.cells.clear();
        for (i, n) in self.nodes.iter().enumerate() {
            self.cells.entry(n.cell).or_default().push(i);
        }
    }

    fn connect_all(&mut self) {
        for n in &mut self.nodes {
            n.edges.clear();
        }
        // each unordered pair is visited once, from the smaller index
        let found: Vec<(usize, usize, f64)> = self
            .cells
            .par_iter()
            .flat_map_iter(|(&cell, own)| {
                let window: Vec<usize> = self.window_nodes(cell).collect();
                let mut pairs = Vec::new();
                for &a in own {
                    for &b in &window {
                        if b <= a {
                            continue;
                        }
                        let d = distance(&self.nodes[a].location.point, &self.nodes[b].location.point);
                        if d < self.edge_threshold_m {
                            pairs.push((a, b, d));
                        }
                    }
                }
                pairs
            })
            .collect();
        for (a, b, d) in found {
            self.nodes[a].edges.push((b, d));
            self.nodes[b].edges.push((a, d));
        }
        for n in &mut self.nodes {
            n.edges.sort_by(|x, y| x.0.cmp(&y.0));
        }
    }
}

/// Applies deletions then additions. Only edges touching the changed nodes
/// are recomputed (within their 3x3 windows); surviving nodes keep their
/// keyword state.
pub fn update_graph(graph: &LocationGraph, adds: Vec<Location>, deletes: &[String]) -> Result<LocationGraph> {
    let mut removed = vec![false; graph.nodes.len()];
    for pid in deletes {
        let &i = graph
            .index
            .get(pid)
            .ok_or_else(|| Error::UnknownPid(pid.clone()))?;
        removed[i] = true;
    }
    let mut fresh: BTreeMap<&str, &Location> = BTreeMap::new();
    for loc in &adds {
        let taken = graph.index.get(&loc.pid).is_some_and(|&i| !removed[i]);
        if taken || fresh.insert(&loc.pid, loc).is_some() {
            return Err(Error::DuplicatePid(loc.pid.clone()));
        }
        validate_location(loc, &graph.schema)?;
    }
    let surviving: Vec<&Location> = graph
        .nodes
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(n, _)| &n.location)
        .chain(adds.iter())
        .collect();
    check_threshold(&graph.grid, graph.edge_threshold_m, &surviving)?;

    // old index -> new index, keeping pid order
    let mut all: Vec<(String, Option<usize>, Option<Location>)> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed[*i])
        .map(|(i, n)| (n.location.pid.clone(), Some(i), None))
        .chain(adds.into_iter().map(|l| (l.pid.clone(), None, Some(l))))
        .collect();
    all.sort_by(|a, b| a.0.cmp(&b.0));
    let mut remap = vec![usize::MAX; graph.nodes.len()];
    let mut added = Vec::new();
    let mut nodes = Vec::with_capacity(all.len());
    for (new_i, (_, old, loc)) in all.into_iter().enumerate() {
        match (old, loc) {
            (Some(old), _) => {
                remap[old] = new_i;
                nodes.push(graph.nodes[old].clone());
            }
            (None, Some(loc)) => {
                added.push(new_i);
                nodes.push(new_node(loc, &graph.grid, &graph.schema));
            }
            (None, None) => unreachable!(),
        }
    }
    for n in &mut nodes {
        n.edges = n
            .edges
            .iter()
            .filter(|(j, _)| !removed[*j])
            .map(|&(j, d)| (remap[j], d))
            .collect();
    }
    let mut out = LocationGraph {
        grid: graph.grid,
        edge_threshold_m: graph.edge_threshold_m,
        schema: graph.schema.clone(),
        nodes,
        index: HashMap::new(),
        cells: BTreeMap::new(),
    };
    out.reindex();
    let is_added: Vec<bool> = {
        let mut v = vec![false; out.nodes.len()];
        added.iter().for_each(|&i| v[i] = true);
        v
    };
    for &a in &added {
        let cell = out.nodes[a].cell;
        let window: Vec<usize> = out.window_nodes(cell).collect();
        for b in window {
            // pairs of two new nodes are handled from the smaller index
            if b == a || (is_added[b] && b < a) {
                continue;
            }
            let d = distance(&out.nodes[a].location.point, &out.nodes[b].location.point);
            if d < out.edge_threshold_m {
                out.nodes[a].edges.push((b, d));
                out.nodes[b].edges.push((a, d));
            }
        }
    }
    for n in &mut out.nodes {
        n.edges.sort_by(|x, y| x.0.cmp(&y.0));
    }
    Ok(out)
}

/// One synchronous smoothing step over all three rows. Values are not
/// normalized here; see [`iterate`].
pub fn propagate_step(
    graph: &LocationGraph,
    input: &PropagationInput,
    params: &SmoothingParams,
) -> Result<LocationGraph> {
    let k = graph.schema.keywords;
    params.validate(k)?;
    for (pid, &count) in &input.visits {
        if !count.is_finite() || count < 0.0 {
            return Err(Error::data(format!("visit count {count} for `{pid}` is not >= 0")));
        }
    }
    for (pid, kw) in &input.visitor_keywords {
        if kw.len() != k {
            return Err(Error::data(format!("visitor keywords for `{pid}` have the wrong width")));
        }
    }
    let visits: Vec<f64> = graph
        .nodes
        .iter()
        .map(|n| input.visits.get(&n.location.pid).copied().unwrap_or(0.0))
        .collect();
    let visitor_kw: Vec<Option<&Vec<f64>>> = graph
        .nodes
        .iter()
        .map(|n| input.visitor_keywords.get(&n.location.pid))
        .collect();

    let states: Vec<KeywordState> = (0..graph.nodes.len())
        .into_par_iter()
        .map(|i| step_node(graph, i, &visits, &visitor_kw, params))
        .collect();

    let mut out = graph.clone();
    for (node, state) in out.nodes.iter_mut().zip(states) {
        node.state = state;
    }
    Ok(out)
}

fn step_node(
    graph: &LocationGraph,
    i: usize,
    visits: &[f64],
    visitor_kw: &[Option<&Vec<f64>>],
    params: &SmoothingParams,
) -> KeywordState {
    let node = &graph.nodes[i];
    let prev = &node.state;
    let k = prev.n.len();
    let mut next = prev.clone();
    next.step = prev.step + 1;
    if node.location.is_prior_node {
        return next;
    }
    let edges = &node.edges;
    let n_neighbors = edges.len();

    if n_neighbors > 0 {
        let dsum: f64 = edges.iter().map(|&(_, d)| 1.0 / (1.0 + d)).sum();
        let coef = match params.neighbor_normalization {
            NeighborNormalization::DistanceWeighted => 1.0 / dsum,
            NeighborNormalization::Printed => dsum / n_neighbors as f64,
        };
        for kw in 0..k {
            let acc: f64 = edges
                .iter()
                .map(|&(j, d)| graph.nodes[j].state.n[kw] / (1.0 + d))
                .sum();
            let lambda = params.lambda[kw];
            next.n[kw] = lambda * prev.n[kw] + (1.0 - lambda) * coef * acc;
        }
    }

    let own_visits = visits[i];
    let total: f64 = own_visits + edges.iter().map(|&(j, _)| visits[j]).sum::<f64>();
    if total > 0.0 {
        if n_neighbors > 0 {
            for kw in 0..k {
                let acc: f64 = edges
                    .iter()
                    .map(|&(j, _)| visits[j] / total * graph.nodes[j].state.v[kw])
                    .sum();
                let mu = params.mu[kw];
                next.v[kw] = own_visits / total * mu * prev.v[kw]
                    + (1.0 - mu) / n_neighbors as f64 * acc;
            }
        }
        let denom = total * (n_neighbors as f64 + 1.0);
        for kw in 0..k {
            let mut acc = own_visits * visitor_kw[i].map_or(0.0, |u| u[kw]);
            for &(j, _) in edges {
                acc += visits[j] * visitor_kw[j].map_or(0.0, |u| u[kw]);
            }
            let nu = params.nu[kw];
            next.u[kw] = nu * prev.u[kw] + (1.0 - nu) / denom * acc;
        }
    }

    if node.location.prior.is_some() {
        for (kw, val) in normalized_prior(&node.location, &graph.schema) {
            next.n[kw] = val;
            next.v[kw] = val;
            next.u[kw] = val;
        }
    }
    next
}

/// Runs `inputs.len()` steps, normalizing after each one.
pub fn iterate(
    graph: &LocationGraph,
    inputs: &[PropagationInput],
    params: &SmoothingParams,
) -> Result<LocationGraph> {
    if inputs.is_empty() {
        return Err(Error::config("iterate needs at least one step"));
    }
    let mut g = graph.clone();
    for input in inputs {
        g = propagate_step(&g, input, params)?;
        g.normalize();
    }
    Ok(g)
}

impl LocationGraph {
    /// Normalizes every node's state, keeping prior entries fixed.
    pub fn normalize(&mut self) {
        let schema = self.schema.clone();
        for node in &mut self.nodes {
            let pinned = normalized_prior(&node.location, &schema);
            node.state = normalize_pinned(&node.state, &schema, &pinned);
        }
    }
}

/// Masked average of the three rows: for each keyword, the mean over the
/// rows that are non-zero at that keyword (0 when all are zero).
pub fn combine_state(state: &KeywordState) -> Vec<f64> {
    (0..state.n.len())
        .map(|kw| {
            let vals = [state.n[kw], state.v[kw], state.u[kw]];
            let nonzero = vals.iter().filter(|x| **x != 0.0).count();
            if nonzero == 0 {
                0.0
            } else {
                vals.iter().sum::<f64>() / nonzero as f64
            }
        })
        .collect()
}

/// Combined keyword vector of every node.
pub fn combine(graph: &LocationGraph) -> BTreeMap<String, KeywordVector> {
    graph
        .nodes
        .iter()
        .map(|n| {
            (
                n.location.pid.clone(),
                KeywordVector::clamped(combine_state(&n.state)),
            )
        })
        .collect()
}

/// On-disk form of a graph: cells, their nodes, edges and keyword state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub version: u32,
    pub grid: GridConfig,
    pub edge_threshold_m: f64,
    pub schema: KeywordSchema,
    pub cells: Vec<CellSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSnapshot {
    pub cell: CellIndex,
    pub nodes: Vec<NodeSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub location: Location,
    pub state: KeywordState,
    pub edges: Vec<Edge>,
}

pub const SNAPSHOT_VERSION: u32 = 1;

impl LocationGraph {
    pub fn to_snapshot(&self) -> GraphSnapshot {
        let cells = self
            .cells
            .iter()
            .map(|(&cell, idx)| CellSnapshot {
                cell,
                nodes: idx
                    .iter()
                    .map(|&i| {
                        let n = &self.nodes[i];
                        NodeSnapshot {
                            location: n.location.clone(),
                            state: n.state.clone(),
                            edges: n
                                .edges
                                .iter()
                                .map(|&(j, d)| Edge {
                                    pid: self.nodes[j].location.pid.clone(),
                                    distance_m: d,
                                })
                                .collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        GraphSnapshot {
            version: SNAPSHOT_VERSION,
            grid: self.grid,
            edge_threshold_m: self.edge_threshold_m,
            schema: self.schema.clone(),
            cells,
        }
    }

    /// Restores a snapshot, checking that cells, edges and state widths are
    /// consistent with the stored grid.
    pub fn from_snapshot(snap: GraphSnapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::data(format!("unsupported graph snapshot version {}", snap.version)));
        }
        let k = snap.schema.keywords;
        let mut entries = Vec::new();
        for cell in snap.cells {
            for node in cell.nodes {
                if snap.grid.cell_of(&node.location.point) != cell.cell {
                    return Err(Error::data(format!(
                        "node `{}` stored outside its own cell",
                        node.location.pid
                    )));
                }
                if [&node.state.n, &node.state.v, &node.state.u]
                    .iter()
                    .any(|r| r.len() != k)
                {
                    return Err(Error::data("keyword state has the wrong width"));
                }
                validate_location(&node.location, &snap.schema)?;
                entries.push(node);
            }
        }
        entries.sort_by(|a, b| a.location.pid.cmp(&b.location.pid));
        for pair in entries.windows(2) {
            if pair[0].location.pid == pair[1].location.pid {
                return Err(Error::DuplicatePid(pair[0].location.pid.clone()));
            }
        }
        let index: HashMap<String, usize> = entries
            .iter()
            .enumerate()
            .map(|(i, n)| (n.location.pid.clone(), i))
            .collect();
        let mut nodes = Vec::with_capacity(entries.len());
        for e in &entries {
            let mut edges = Vec::with_capacity(e.edges.len());
            for edge in &e.edges {
                let &j = index
                    .get(&edge.pid)
                    .ok_or_else(|| Error::UnknownPid(edge.pid.clone()))?;
                if !(edge.distance_m < snap.edge_threshold_m) {
                    return Err(Error::data("edge longer than the threshold"));
                }
                edges.push((j, edge.distance_m));
            }
            edges.sort_by(|x, y| x.0.cmp(&y.0));
            nodes.push(Node {
                cell: snap.grid.cell_of(&e.location.point),
                location: e.location.clone(),
                state: e.state.clone(),
                edges,
            });
        }
        for (i, n) in nodes.iter().enumerate() {
            for &(j, d) in &n.edges {
                if !nodes[j].edges.iter().any(|&(back, bd)| back == i && bd == d) {
                    return Err(Error::data("graph snapshot has an asymmetric edge"));
                }
            }
        }
        let mut g = LocationGraph {
            grid: snap.grid,
            edge_threshold_m: snap.edge_threshold_m,
            schema: snap.schema,
            nodes,
            index: HashMap::new(),
            cells: BTreeMap::new(),
        };
        g.reindex();
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn grid() -> GridConfig {
        GridConfig::square(0.01).unwrap()
    }

    fn brute_force_edges(locs: &[Location], threshold: f64) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for a in locs {
            for b in locs {
                if a.pid != b.pid && distance(&a.point, &b.point) < threshold {
                    out.insert((a.pid.clone(), b.pid.clone()));
                }
            }
        }
        out
    }

    fn edge_set(g: &LocationGraph) -> BTreeSet<(String, String)> {
        g.edge_list().into_iter().map(|(a, b, _)| (a, b)).collect()
    }

    fn random_locations(n: usize, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                Location::new(
                    format!("p{i:05}"),
                    pt(40.0 + rng.random::<f64>() * 0.05, -74.0 + rng.random::<f64>() * 0.05),
                )
            })
            .collect()
    }

    #[test]
    fn pair_within_threshold_gets_symmetric_edges() {
        let a = pt(40.0, -74.0);
        let b = a.offset_m(10.0, 0.0);
        let g = build_graph(
            vec![Location::new("a", a), Location::new("b", b)],
            grid(),
            50.0,
            KeywordSchema::plain(3),
        )
        .unwrap();
        let ea = g.edges("a").unwrap();
        let eb = g.edges("b").unwrap();
        assert_eq!(ea.len(), 1);
        assert_eq!(eb.len(), 1);
        assert_eq!(ea[0].distance_m, eb[0].distance_m);
        assert!((ea[0].distance_m - 10.0).abs() < 0.01);
    }

    #[test]
    fn pair_beyond_threshold_has_no_edge() {
        let a = pt(40.0, -74.0);
        let b = a.offset_m(100.0, 0.0);
        let g = build_graph(
            vec![Location::new("a", a), Location::new("b", b)],
            grid(),
            50.0,
            KeywordSchema::plain(3),
        )
        .unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn build_matches_brute_force() {
        let locs = random_locations(1000, 7);
        let g = build_graph(locs.clone(), grid(), 300.0, KeywordSchema::plain(2)).unwrap();
        assert_eq!(g.len(), 1000);
        assert_eq!(edge_set(&g), brute_force_edges(&locs, 300.0));
        for (a, b, d) in g.edge_list() {
            assert!(d < 300.0);
            let back = g.edges(&b).unwrap();
            assert!(back.iter().any(|e| e.pid == a && e.distance_m == d));
        }
    }

    #[test]
    fn rejects_duplicates_and_oversized_thresholds() {
        let locs = vec![Location::new("x", pt(1.0, 1.0)), Location::new("x", pt(1.0, 1.001))];
        assert!(matches!(
            build_graph(locs, grid(), 10.0, KeywordSchema::plain(1)),
            Err(Error::DuplicatePid(_))
        ));
        let locs = vec![Location::new("x", pt(1.0, 1.0))];
        assert!(matches!(
            build_graph(locs, grid(), 5_000.0, KeywordSchema::plain(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn delete_removes_incident_edges() {
        let locs = random_locations(200, 3);
        let g = build_graph(locs, grid(), 500.0, KeywordSchema::plain(2)).unwrap();
        let victim = g
            .pids()
            .find(|p| !g.edges(p).unwrap().is_empty())
            .unwrap()
            .to_string();
        let h = update_graph(&g, vec![], &[victim.clone()]).unwrap();
        assert!(!h.contains(&victim));
        assert!(h.edge_list().iter().all(|(a, b, _)| *a != victim && *b != victim));
        assert!(matches!(
            update_graph(&h, vec![], &[victim]),
            Err(Error::UnknownPid(_))
        ));
    }

    #[test]
    fn add_then_delete_restores_the_graph() {
        let locs = random_locations(150, 4);
        let g = build_graph(locs, grid(), 500.0, KeywordSchema::plain(2)).unwrap();
        let extra = Location::new("zz-new", pt(40.02, -73.98));
        let added = update_graph(&g, vec![extra], &[]).unwrap();
        assert_eq!(added.len(), g.len() + 1);
        let back = update_graph(&added, vec![], &["zz-new".to_string()]).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn update_matches_rebuild_and_keeps_state() {
        let mut locs = random_locations(400, 5);
        let adds = locs.split_off(350);
        let g = build_graph(locs.clone(), grid(), 400.0, KeywordSchema::plain(2)).unwrap();
        let mut g = g;
        let marked = KeywordState {
            n: vec![0.3, 0.7],
            v: vec![0.1, 0.2],
            u: vec![0.0, 0.9],
            step: 4,
        };
        g.set_state("p00010", marked.clone()).unwrap();
        let deletes: Vec<String> = locs.iter().step_by(7).map(|l| l.pid.clone()).collect();
        let updated = update_graph(&g, adds.clone(), &deletes).unwrap();
        let final_set: Vec<Location> = locs
            .into_iter()
            .filter(|l| !deletes.contains(&l.pid))
            .chain(adds)
            .collect();
        let rebuilt = build_graph(final_set, grid(), 400.0, KeywordSchema::plain(2)).unwrap();
        assert_eq!(updated.edge_list(), rebuilt.edge_list());
        assert_eq!(updated.state("p00010"), Some(&marked));
        assert!(matches!(
            update_graph(&g, vec![Location::new("p00011", pt(40.0, -74.0))], &[]),
            Err(Error::DuplicatePid(_))
        ));
    }

    #[test]
    fn isolated_node_keeps_its_state() {
        let mut g = build_graph(
            vec![Location::new("solo", pt(40.0, -74.0))],
            grid(),
            50.0,
            KeywordSchema::plain(2),
        )
        .unwrap();
        let s = KeywordState {
            n: vec![0.4, 0.2],
            v: vec![0.3, 0.3],
            u: vec![0.1, 0.0],
            step: 0,
        };
        g.set_state("solo", s.clone()).unwrap();
        let next = propagate_step(&g, &PropagationInput::default(), &SmoothingParams::uniform(2)).unwrap();
        let got = next.state("solo").unwrap();
        assert_eq!(got.n, s.n);
        assert_eq!(got.v, s.v);
        assert_eq!(got.u, s.u);
        assert_eq!(got.step, 1);
    }

    /// 3-node path a - b - c with hand-evaluated one-step values.
    #[test]
    fn path_graph_one_step_matches_manual_evaluation() {
        let a = pt(40.0, -74.0);
        let b = a.offset_m(0.0, 10.0);
        let c = b.offset_m(0.0, 10.0);
        let mut g = build_graph(
            vec![Location::new("a", a), Location::new("b", b), Location::new("c", c)],
            grid(),
            15.0,
            KeywordSchema::plain(1),
        )
        .unwrap();
        let dab = distance(&a, &b);
        let dbc = distance(&b, &c);
        assert_eq!(g.edge_count(), 2);
        let set = |g: &mut LocationGraph, p: &str, n: f64, v: f64, u: f64| {
            g.set_state(p, KeywordState { n: vec![n], v: vec![v], u: vec![u], step: 0 })
                .unwrap()
        };
        set(&mut g, "a", 1.0, 0.8, 0.2);
        set(&mut g, "b", 0.0, 0.4, 0.6);
        set(&mut g, "c", 0.5, 0.0, 0.0);
        let mut input = PropagationInput::default();
        input.visits.insert("a".into(), 2.0);
        input.visits.insert("b".into(), 1.0);
        input.visits.insert("c".into(), 3.0);
        input.visitor_keywords.insert("a".into(), vec![0.9]);
        input.visitor_keywords.insert("c".into(), vec![0.3]);
        let next = propagate_step(&g, &input, &SmoothingParams::uniform(1)).unwrap();

        // n_b = 0.5 * 0 + 0.5 * (1/(1+dab) * 1.0 + 1/(1+dbc) * 0.5) / (1/(1+dab) + 1/(1+dbc))
        let wa = 1.0 / (1.0 + dab);
        let wc = 1.0 / (1.0 + dbc);
        let nb = 0.5 * (wa * 1.0 + wc * 0.5) / (wa + wc);
        // v_b: Upsilon = 1 + 2 + 3 = 6, two neighbors
        let vb = 1.0 / 6.0 * 0.5 * 0.4 + 0.5 / 2.0 * (2.0 / 6.0 * 0.8 + 3.0 / 6.0 * 0.0);
        // u_b = 0.5 * 0.6 + 0.5 / (6 * 3) * (1 * 0 + 2 * 0.9 + 3 * 0.3)
        let ub = 0.5 * 0.6 + 0.5 / 18.0 * (2.0 * 0.9 + 3.0 * 0.3);
        let sb = next.state("b").unwrap();
        assert!((sb.n[0] - nb).abs() < 1e-15);
        assert!((sb.v[0] - vb).abs() < 1e-15);
        assert!((sb.u[0] - ub).abs() < 1e-15);

        // endpoint a has the single neighbor b
        let sa = next.state("a").unwrap();
        assert!((sa.n[0] - 0.5).abs() < 1e-15);
        let va = 2.0 / 3.0 * 0.5 * 0.8 + 0.5 * (1.0 / 3.0 * 0.4);
        assert!((sa.v[0] - va).abs() < 1e-15);
        let ua = 0.5 * 0.2 + 0.5 / (3.0 * 2.0) * (2.0 * 0.9);
        assert!((sa.u[0] - ua).abs() < 1e-15);
    }

    #[test]
    fn printed_normalization_is_selectable() {
        let a = pt(40.0, -74.0);
        let b = a.offset_m(0.0, 3.0);
        let mut g = build_graph(
            vec![Location::new("a", a), Location::new("b", b)],
            grid(),
            15.0,
            KeywordSchema::plain(1),
        )
        .unwrap();
        g.set_state("b", KeywordState { n: vec![1.0], v: vec![0.0], u: vec![0.0], step: 0 })
            .unwrap();
        let mut params = SmoothingParams::uniform(1);
        params.neighbor_normalization = NeighborNormalization::Printed;
        let next = propagate_step(&g, &PropagationInput::default(), &params).unwrap();
        let w = 1.0 / (1.0 + distance(&a, &b));
        // (1 - lambda) * (D / N) * n_b / (1 + d) with D = w, N = 1
        assert!((next.state("a").unwrap().n[0] - 0.5 * w * w).abs() < 1e-15);
    }

    #[test]
    fn prior_entries_and_prior_nodes_stay_fixed() {
        let a = pt(40.0, -74.0);
        let prior: BTreeMap<usize, f64> = [(0, 0.9)].into_iter().collect();
        let locs = vec![
            Location::new("biz", a).with_prior(prior.clone()),
            Location::new("zip", a.offset_m(5.0, 0.0)).with_prior([(1, 0.7)].into_iter().collect()).prior_node(),
            Location::new("other", a.offset_m(0.0, 5.0)),
        ];
        let g = build_graph(locs, grid(), 20.0, KeywordSchema::plain(2)).unwrap();
        let mut input = PropagationInput::default();
        input.visits.insert("other".into(), 5.0);
        input.visitor_keywords.insert("other".into(), vec![0.1, 0.1]);
        let out = iterate(&g, &vec![input; 6], &SmoothingParams::uniform(2)).unwrap();
        let biz = out.state("biz").unwrap();
        assert_eq!((biz.n[0], biz.v[0], biz.u[0]), (0.9, 0.9, 0.9));
        let zip = out.state("zip").unwrap();
        assert_eq!(zip.n, vec![0.0, 0.7]);
        assert_eq!(zip.v, vec![0.0, 0.7]);
        assert!(out.state("other").unwrap().n[1] > 0.0);
    }

    #[test]
    fn combine_examples() {
        let s = KeywordState {
            n: vec![0.6, 0.0, 0.4],
            v: vec![0.0, 0.0, 0.8],
            u: vec![0.0, 0.0, 0.0],
            step: 1,
        };
        let w = combine_state(&s);
        assert_eq!(w[0], 0.6);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let schema = KeywordSchema::new(3, vec![vec![0, 1]]).unwrap();
        let s = KeywordState {
            n: vec![0.8, 0.6, 1.3],
            v: vec![0.2, 0.3, 0.5],
            u: vec![0.0, 0.0, -0.2],
            step: 0,
        };
        let out = normalize_keywords(&s, &schema);
        assert!((out.n[0] - 0.8 / 1.4).abs() < 1e-15);
        assert!((out.n[1] - 0.6 / 1.4).abs() < 1e-15);
        assert_eq!(out.n[2], 1.0);
        assert_eq!(out.v, s.v);
        assert_eq!(out.u[2], 0.0);
        assert_eq!(normalize_keywords(&out, &schema), out);
    }

    #[test]
    fn pinned_group_members_keep_their_value() {
        let schema = KeywordSchema::new(2, vec![vec![0, 1]]).unwrap();
        let mut row = vec![0.9, 0.5];
        let pinned: BTreeMap<usize, f64> = [(0, 0.9)].into_iter().collect();
        schema.normalize_row(&mut row, &pinned);
        assert_eq!(row[0], 0.9);
        assert!((row[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn schema_validation() {
        assert!(KeywordSchema::new(0, vec![]).is_err());
        assert!(KeywordSchema::new(3, vec![vec![0]]).is_err());
        assert!(KeywordSchema::new(3, vec![vec![0, 3]]).is_err());
        assert!(KeywordSchema::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(SmoothingParams::uniform(3).validate(3).is_ok());
        assert!(SmoothingParams::uniform(3).validate(2).is_err());
        assert!(SmoothingParams::uniform(3).with_lambda(1.0).validate(3).is_err());
    }

    #[test]
    fn iterate_needs_steps() {
        let g = build_graph(vec![], grid(), 10.0, KeywordSchema::plain(1)).unwrap();
        assert!(iterate(&g, &[], &SmoothingParams::uniform(1)).is_err());
    }

    #[test]
    fn iterate_one_step_is_step_plus_normalize() {
        let locs = random_locations(60, 9);
        let mut g = build_graph(locs, grid(), 800.0, KeywordSchema::new(2, vec![vec![0, 1]]).unwrap()).unwrap();
        let pids: Vec<String> = g.pids().map(String::from).collect();
        for (i, p) in pids.iter().enumerate() {
            let x = (i % 10) as f64 / 10.0;
            g.set_state(p, KeywordState { n: vec![x, 1.0 - x], v: vec![x, x], u: vec![0.0, x], step: 0 })
                .unwrap();
        }
        let params = SmoothingParams::uniform(2);
        let once = iterate(&g, &[PropagationInput::default()], &params).unwrap();
        let mut manual = propagate_step(&g, &PropagationInput::default(), &params).unwrap();
        manual.normalize();
        assert_eq!(once, manual);
    }

    #[test]
    fn snapshot_round_trip_and_validation() {
        let locs = random_locations(120, 11);
        let g = build_graph(locs, grid(), 600.0, KeywordSchema::plain(3)).unwrap();
        let snap = g.to_snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back = LocationGraph::from_snapshot(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, g);

        let mut broken = snap.clone();
        let victim = broken
            .cells
            .iter_mut()
            .flat_map(|c| c.nodes.iter_mut())
            .find(|n| !n.edges.is_empty())
            .unwrap();
        victim.edges[0].distance_m += 1e-3;
        assert!(LocationGraph::from_snapshot(broken).is_err());

        let mut wrong_version = snap;
        wrong_version.version = 99;
        assert!(LocationGraph::from_snapshot(wrong_version).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_locations() -> impl Strategy<Value = Vec<Location>> {
            prop::collection::vec((0.0..0.03f64, 0.0..0.03f64), 1..60).prop_map(|xs| {
                xs.into_iter()
                    .enumerate()
                    .map(|(i, (a, b))| Location::new(format!("q{i}"), pt(51.0 + a, 0.5 + b)))
                    .collect()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn edges_symmetric_without_self_loops(locs in arb_locations(), t in 50.0..650.0f64) {
                let g = build_graph(locs.clone(), grid(), t, KeywordSchema::plain(1)).unwrap();
                prop_assert_eq!(edge_set(&g), brute_force_edges(&locs, t));
                for (a, b, d) in g.edge_list() {
                    prop_assert!(a != b);
                    prop_assert!(d < t);
                    prop_assert!(g.edges(&b).unwrap().iter().any(|e| e.pid == a && e.distance_m == d));
                }
            }

            #[test]
            fn published_keywords_stay_in_range(
                locs in arb_locations(),
                seeds in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 9), 60),
                visits in prop::collection::vec(0.0..20.0f64, 60),
                steps in 1usize..5,
            ) {
                let schema = KeywordSchema::new(3, vec![vec![0, 1]]).unwrap();
                let mut g = build_graph(locs, grid(), 600.0, schema.clone()).unwrap();
                let pids: Vec<String> = g.pids().map(String::from).collect();
                let mut input = PropagationInput::default();
                for (i, p) in pids.iter().enumerate() {
                    let s = &seeds[i];
                    g.set_state(p, KeywordState {
                        n: s[0..3].to_vec(), v: s[3..6].to_vec(), u: s[6..9].to_vec(), step: 0,
                    }).unwrap();
                    input.visits.insert(p.clone(), visits[i]);
                    input.visitor_keywords.insert(p.clone(), s[3..6].to_vec());
                }
                let out = iterate(&g, &vec![input; steps], &SmoothingParams::uniform(3)).unwrap();
                for p in &pids {
                    let s = out.state(p).unwrap();
                    for row in [&s.n, &s.v, &s.u] {
                        prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
                        prop_assert!(row[0] + row[1] <= 1.0 + 1e-12);
                    }
                }
                for w in combine(&out).values() {
                    prop_assert!(w.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
                }
            }
        }
    }
}
