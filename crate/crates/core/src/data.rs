//! Panel-of-groups data model and CSV exchange formats.
//!
//! A panel holds `G` independent groups. Each group has `n_g` individuals
//! with a binary outcome, a covariate row, and a directed influence network:
//! entry `(i, j)` true means `i` is influenced by `j`. Networks are stored as
//! row-indexed neighbor lists since empirical friendship networks are sparse.
//!
//! Exchange formats (UTF-8, comma separated, `.` decimal point):
//!
//! ```text
//! nodes CSV:  group_id,individual_id,y,x_1,...,x_p
//! edges CSV:  group_id,from_id,to_id      # from is influenced by to
//! ```
//!
//! Groups may have different sizes; all groups share the covariate dimension.
//! Missing values are rejected, never imputed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One group: outcomes, covariates and the directed influence network.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupData {
    group_id: String,
    individual_ids: Vec<String>,
    y: Vec<u8>,
    x: DMatrix<f64>,
    /// Sorted, deduplicated influencer lists; no self links.
    neighbors: Vec<Vec<usize>>,
    degree: Vec<usize>,
}

impl GroupData {
    /// Validate and construct a group.
    pub fn new(
        group_id: String,
        individual_ids: Vec<String>,
        y: Vec<u8>,
        x: DMatrix<f64>,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = individual_ids.len();
        if n == 0 {
            return Err(Error::Data(format!("group '{group_id}' has no individuals")));
        }
        if y.len() != n || x.nrows() != n || neighbors.len() != n {
            return Err(Error::Dimension(format!(
                "group '{group_id}': inconsistent lengths (ids {n}, y {}, x rows {}, neighbor lists {})",
                y.len(),
                x.nrows(),
                neighbors.len()
            )));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for id in &individual_ids {
                if !seen.insert(id) {
                    return Err(Error::Data(format!(
                        "group '{group_id}': duplicate individual id '{id}'"
                    )));
                }
            }
        }
        for (i, &yi) in y.iter().enumerate() {
            if yi > 1 {
                return Err(Error::Data(format!(
                    "group '{group_id}', individual '{}': outcome must be 0 or 1",
                    individual_ids[i]
                )));
            }
        }
        for v in x.iter() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "group '{group_id}': non-finite covariate value"
                )));
            }
        }
        let mut neighbors = neighbors;
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            for &j in list.iter() {
                if j == i {
                    return Err(Error::Data(format!(
                        "group '{group_id}', individual '{}': self link",
                        individual_ids[i]
                    )));
                }
                if j >= n {
                    return Err(Error::Data(format!(
                        "group '{group_id}': neighbor index {j} out of range"
                    )));
                }
            }
        }
        let degree = neighbors.iter().map(Vec::len).collect();
        Ok(Self { group_id, individual_ids, y, x, neighbors, degree })
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn individual_ids(&self) -> &[String] {
        &self.individual_ids
    }

    /// Number of individuals.
    pub fn n(&self) -> usize {
        self.individual_ids.len()
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    /// Covariate matrix, `n` rows by `p` columns.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Influencers of individual `i` (sorted indices).
    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Cached influencer count of individual `i`.
    pub fn degree(&self, i: usize) -> usize {
        self.degree[i]
    }

    /// Same group with outcomes replaced (used by the bootstrap).
    pub fn with_outcomes(&self, y: Vec<u8>) -> Result<Self> {
        Self::new(
            self.group_id.clone(),
            self.individual_ids.clone(),
            y,
            self.x.clone(),
            self.neighbors.clone(),
        )
    }

    #[cfg(test)]
    pub(crate) fn set_group_id_for_tests(&mut self, id: &str) {
        self.group_id = id.to_string();
    }
}

/// An ordered collection of groups sharing the covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    groups: Vec<GroupData>,
    p: usize,
}

impl Panel {
    pub fn new(groups: Vec<GroupData>) -> Result<Self> {
        let p = groups.first().map_or(0, GroupData::p);
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            if g.p() != p {
                return Err(Error::Dimension(format!(
                    "group '{}' has {} covariates, expected {}",
                    g.group_id(),
                    g.p(),
                    p
                )));
            }
            if !seen.insert(g.group_id().to_string()) {
                return Err(Error::Data(format!("duplicate group id '{}'", g.group_id())));
            }
        }
        Ok(Self { groups, p })
    }

    /// Empty panel with a declared covariate dimension (headers only on save).
    pub fn empty(p: usize) -> Self {
        Self { groups: Vec::new(), p }
    }

    pub fn groups(&self) -> &[GroupData] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &GroupData {
        &self.groups[g]
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Shared covariate dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn total_individuals(&self) -> usize {
        self.groups.iter().map(GroupData::n).sum()
    }

    pub fn mean_group_size(&self) -> f64 {
        if self.groups.is_empty() {
            0.0
        } else {
            self.total_individuals() as f64 / self.n_groups() as f64
        }
    }

    /// New panel consisting of the scope groups with outcomes replaced.
    pub fn with_outcomes(&self, scope: &[usize], outcomes: &[Vec<u8>]) -> Result<Panel> {
        if scope.len() != outcomes.len() {
            return Err(Error::Dimension(format!(
                "{} scope groups but {} outcome vectors",
                scope.len(),
                outcomes.len()
            )));
        }
        let groups = scope
            .iter()
            .zip(outcomes)
            .map(|(&g, y)| self.groups[g].with_outcomes(y.clone()))
            .collect::<Result<Vec<_>>>()?;
        Panel::new(groups)
    }
}

/// Mean influencer belief for every individual.
///
/// Entry `i` is the average of `ccp[j]` over `i`'s influencers, and exactly
/// zero for individuals without influencers.
pub fn mean_peer_belief(group: &GroupData, ccp: &[f64]) -> Result<Vec<f64>> {
    if ccp.len() != group.n() {
        return Err(Error::Dimension(format!(
            "belief profile has length {}, group has {} individuals",
            ccp.len(),
            group.n()
        )));
    }
    let mut out = Vec::with_capacity(group.n());
    for i in 0..group.n() {
        let nb = group.neighbors_of(i);
        if nb.is_empty() {
            out.push(0.0);
        } else {
            let sum: f64 = nb.iter().map(|&j| ccp[j]).sum();
            out.push(sum / nb.len() as f64);
        }
    }
    Ok(out)
}

/// Ground truth attached to a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    /// group_id -> true cluster index.
    pub cluster_of_group: BTreeMap<String, usize>,
    /// Per-cluster slope coefficients.
    pub coefficients: Vec<TrueCoefficients>,
    /// group_id -> composite fixed effect (cluster intercept plus group draw).
    pub fixed_effects: BTreeMap<String, f64>,
    /// group_id -> true equilibrium choice probabilities.
    pub equilibrium_ccp: BTreeMap<String, Vec<f64>>,
}

/// True slope block of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCoefficients {
    pub peer_effect: f64,
    pub covariate_slopes: Vec<f64>,
}

impl DgpTruth {
    /// Check the simulated-truth invariants (probabilities strictly interior).
    pub fn validate(&self) -> Result<()> {
        for (gid, ccp) in &self.equilibrium_ccp {
            for &v in ccp {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::Data(format!(
                        "group '{gid}': equilibrium probability {v} not in (0,1)"
                    )));
                }
            }
        }
        Ok(())
    }
}

struct NodeRow {
    group_id: String,
    individual_id: String,
    y: u8,
    x: Vec<f64>,
}

/// Read a panel from nodes and edges CSV streams.
///
/// Individuals are ordered by first appearance within each group; groups by
/// first appearance in the nodes stream. An edge row `(g, a, b)` records that
/// `a` is influenced by `b`. Duplicate edges collapse to one link.
pub fn load_panel<R1: Read, R2: Read>(nodes: R1, edges: R2) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(nodes);
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "group_id" || &headers[1] != "individual_id" || &headers[2] != "y" {
        return Err(Error::Data(
            "nodes header must start with group_id,individual_id,y".into(),
        ));
    }
    let p = headers.len() - 3;
    for (j, name) in headers.iter().skip(3).enumerate() {
        let expected = format!("x_{}", j + 1);
        if name != expected {
            return Err(Error::Data(format!(
                "nodes header column {} is '{name}', expected '{expected}'",
                j + 4
            )));
        }
    }

    let mut group_order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<NodeRow>> = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let rowno = line + 2; // header is line 1
        if rec.len() != headers.len() {
            return Err(Error::Data(format!(
                "nodes row {rowno}: expected {} fields, found {}",
                headers.len(),
                rec.len()
            )));
        }
        let y: u8 = match &rec[2] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!(
                    "nodes row {rowno}: outcome '{other}' is not 0 or 1"
                )));
            }
        };
        let mut x = Vec::with_capacity(p);
        for j in 0..p {
            let raw = &rec[3 + j];
            let v: f64 = raw.parse().map_err(|_| {
                Error::Data(format!("nodes row {rowno}: non-numeric covariate '{raw}'"))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "nodes row {rowno}: non-finite covariate '{raw}'"
                )));
            }
            x.push(v);
        }
        let gid = rec[0].to_string();
        if !rows.contains_key(&gid) {
            group_order.push(gid.clone());
        }
        rows.entry(gid).or_default().push(NodeRow {
            group_id: rec[0].to_string(),
            individual_id: rec[1].to_string(),
            y,
            x,
        });
    }

    // Index individuals per group before reading edges.
    let mut index_of: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (gid, list) in &rows {
        for (i, row) in list.iter().enumerate() {
            if index_of.insert((gid.clone(), row.individual_id.clone()), i).is_some() {
                return Err(Error::Data(format!(
                    "group '{gid}': duplicate individual id '{}'",
                    row.individual_id
                )));
            }
        }
    }

    let mut neighbor_map: BTreeMap<String, Vec<Vec<usize>>> = rows
        .iter()
        .map(|(gid, list)| (gid.clone(), vec![Vec::new(); list.len()]))
        .collect();

    let mut ereader = csv::ReaderBuilder::new().has_headers(true).from_reader(edges);
    let eheaders = ereader.headers()?.clone();
    if eheaders.len() != 3
        || &eheaders[0] != "group_id"
        || &eheaders[1] != "from_id"
        || &eheaders[2] != "to_id"
    {
        return Err(Error::Data("edges header must be group_id,from_id,to_id".into()));
    }
    for (line, rec) in ereader.records().enumerate() {
        let rec = rec?;
        let rowno = line + 2;
        if rec.len() != 3 {
            return Err(Error::Data(format!(
                "edges row {rowno}: expected 3 fields, found {}",
                rec.len()
            )));
        }
        let gid = rec[0].to_string();
        let from = rec[1].to_string();
        let to = rec[2].to_string();
        if from == to {
            return Err(Error::Data(format!(
                "edges row {rowno}: self link '{from}' in group '{gid}'"
            )));
        }
        let fi = *index_of.get(&(gid.clone(), from.clone())).ok_or_else(|| {
            Error::Data(format!("edges row {rowno}: unknown individual '{from}' in group '{gid}'"))
        })?;
        let ti = *index_of.get(&(gid.clone(), to.clone())).ok_or_else(|| {
            Error::Data(format!("edges row {rowno}: unknown individual '{to}' in group '{gid}'"))
        })?;
        neighbor_map
            .get_mut(&gid)
            .expect("group exists for indexed individual")[fi]
            .push(ti);
    }

    let mut groups = Vec::with_capacity(group_order.len());
    for gid in group_order {
        let list = rows.remove(&gid).expect("ordered group present");
        let neighbors = neighbor_map.remove(&gid).expect("ordered group present");
        let n = list.len();
        let ids: Vec<String> = list.iter().map(|r| r.individual_id.clone()).collect();
        let y: Vec<u8> = list.iter().map(|r| r.y).collect();
        let x = DMatrix::from_fn(n, p, |i, j| list[i].x[j]);
        debug_assert!(list.iter().all(|r| r.group_id == gid));
        groups.push(GroupData::new(gid, ids, y, x, neighbors)?);
    }
    Panel::new(groups)
}

/// Write a panel to nodes and edges CSV sinks in the format accepted by
/// [`load_panel`]; loading the output reproduces the panel exactly.
pub fn save_panel<W1: Write, W2: Write>(panel: &Panel, nodes: W1, edges: W2) -> Result<()> {
    let mut nw = csv::Writer::from_writer(nodes);
    let mut header = vec!["group_id".to_string(), "individual_id".to_string(), "y".to_string()];
    for j in 1..=panel.p() {
        header.push(format!("x_{j}"));
    }
    nw.write_record(&header)?;
    for g in panel.groups() {
        for i in 0..g.n() {
            let mut rec = vec![g.group_id().to_string(), g.individual_ids()[i].clone(), g.y()[i].to_string()];
            for j in 0..g.p() {
                // Shortest round-trip float formatting keeps load(save(p)) exact.
                rec.push(format!("{}", g.x()[(i, j)]));
            }
            nw.write_record(&rec)?;
        }
    }
    nw.flush()?;

    let mut ew = csv::Writer::from_writer(edges);
    ew.write_record(["group_id", "from_id", "to_id"])?;
    for g in panel.groups() {
        for i in 0..g.n() {
            for &j in g.neighbors_of(i) {
                ew.write_record([g.group_id(), &g.individual_ids()[i], &g.individual_ids()[j]])?;
            }
        }
    }
    ew.flush()?;
    Ok(())
}

/// [`load_panel`] reading from file paths.
pub fn load_panel_from_paths(nodes: &Path, edges: &Path) -> Result<Panel> {
    let nf = std::fs::File::open(nodes)
        .map_err(|e| Error::Data(format!("cannot open nodes file '{}': {e}", nodes.display())))?;
    let ef = std::fs::File::open(edges)
        .map_err(|e| Error::Data(format!("cannot open edges file '{}': {e}", edges.display())))?;
    load_panel(std::io::BufReader::new(nf), std::io::BufReader::new(ef))
}

/// [`save_panel`] writing to file paths.
pub fn save_panel_to_paths(panel: &Panel, nodes: &Path, edges: &Path) -> Result<()> {
    let nf = std::fs::File::create(nodes)?;
    let ef = std::fs::File::create(edges)?;
    save_panel(panel, std::io::BufWriter::new(nf), std::io::BufWriter::new(ef))
}


#[cfg(test)]
mod tests {
    use super::*;

    fn nodes_csv(body: &str) -> String {
        format!("group_id,individual_id,y,x_1\n{body}")
    }

    const EDGES_EMPTY: &str = "group_id,from_id,to_id\n";

    #[test]
    fn load_two_individuals_empty_network() {
        let nodes = nodes_csv("a,1,0,0.5\na,2,1,-0.25\n");
        let panel = load_panel(nodes.as_bytes(), EDGES_EMPTY.as_bytes()).unwrap();
        assert_eq!(panel.n_groups(), 1);
        let g = panel.group(0);
        assert_eq!(g.n(), 2);
        assert_eq!(g.degree(0), 0);
        assert_eq!(g.degree(1), 0);
        assert_eq!(g.y(), &[0, 1]);
    }

    #[test]
    fn self_link_rejected() {
        let nodes = nodes_csv("a,1,0,0.5\na,2,1,-0.25\n");
        let edges = "group_id,from_id,to_id\na,1,1\n";
        let err = load_panel(nodes.as_bytes(), edges.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("self link"), "{err}");
    }

    #[test]
    fn unknown_individual_rejected() {
        let nodes = nodes_csv("a,1,0,0.5\na,2,1,-0.25\n");
        let edges = "group_id,from_id,to_id\na,1,9\n";
        let err = load_panel(nodes.as_bytes(), edges.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("unknown individual"), "{err}");
    }

    #[test]
    fn duplicate_individual_rejected() {
        let nodes = nodes_csv("a,1,0,0.5\na,1,1,-0.25\n");
        let err = load_panel(nodes.as_bytes(), EDGES_EMPTY.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate individual"), "{err}");
    }

    #[test]
    fn non_binary_outcome_rejected() {
        let nodes = nodes_csv("a,1,2,0.5\n");
        let err = load_panel(nodes.as_bytes(), EDGES_EMPTY.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("not 0 or 1"), "{err}");
    }

    #[test]
    fn non_numeric_covariate_rejected() {
        let nodes = nodes_csv("a,1,0,abc\n");
        let err = load_panel(nodes.as_bytes(), EDGES_EMPTY.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("non-numeric covariate"), "{err}");
    }

    #[test]
    fn inconsistent_field_count_rejected() {
        let nodes = "group_id,individual_id,y,x_1\na,1,0,0.5,9.0\n";
        let err = load_panel(nodes.as_bytes(), EDGES_EMPTY.as_bytes());
        assert!(err.is_err());
    }

    #[test]
    fn three_groups_round_trip() {
        let nodes = nodes_csv("a,1,0,0.5\na,2,1,1.5\nb,7,1,-2.0\nb,8,0,0.0\nc,1,1,3.25\nc,2,0,-0.125\n");
        let edges = "group_id,from_id,to_id\na,1,2\nb,7,8\nb,8,7\nc,2,1\n";
        let panel = load_panel(nodes.as_bytes(), edges.as_bytes()).unwrap();
        assert_eq!(panel.n_groups(), 3);
        for g in panel.groups() {
            assert_eq!(g.n(), 2);
        }
        assert_eq!(panel.group(0).individual_ids(), &["1".to_string(), "2".to_string()]);

        let mut nbuf = Vec::new();
        let mut ebuf = Vec::new();
        save_panel(&panel, &mut nbuf, &mut ebuf).unwrap();
        let reloaded = load_panel(nbuf.as_slice(), ebuf.as_slice()).unwrap();
        assert_eq!(panel, reloaded);
    }

    #[test]
    fn empty_panel_saves_headers_only() {
        let panel = Panel::empty(2);
        let mut nbuf = Vec::new();
        let mut ebuf = Vec::new();
        save_panel(&panel, &mut nbuf, &mut ebuf).unwrap();
        assert_eq!(String::from_utf8(nbuf).unwrap(), "group_id,individual_id,y,x_1,x_2\n");
        assert_eq!(String::from_utf8(ebuf).unwrap(), "group_id,from_id,to_id\n");
    }

    #[test]
    fn duplicate_edges_collapse() {
        let nodes = nodes_csv("a,1,0,0.5\na,2,1,-0.25\n");
        let edges = "group_id,from_id,to_id\na,1,2\na,1,2\n";
        let panel = load_panel(nodes.as_bytes(), edges.as_bytes()).unwrap();
        assert_eq!(panel.group(0).degree(0), 1);
    }

    #[test]
    fn mean_peer_belief_examples() {
        // i = 0 influenced by {1, 2}; beliefs (0.2, 0.4, 0.6).
        let g = GroupData::new(
            "a".into(),
            vec!["1".into(), "2".into(), "3".into()],
            vec![0, 0, 0],
            DMatrix::zeros(3, 1),
            vec![vec![1, 2], vec![], vec![]],
        )
        .unwrap();
        let pb = mean_peer_belief(&g, &[0.2, 0.4, 0.6]).unwrap();
        assert!((pb[0] - 0.5).abs() < 1e-15);
        assert_eq!(pb[1], 0.0); // no influencers
        assert_eq!(pb[2], 0.0);

        // Complete 3-node network: hand enumeration.
        let g = GroupData::new(
            "b".into(),
            vec!["1".into(), "2".into(), "3".into()],
            vec![0, 0, 0],
            DMatrix::zeros(3, 1),
            vec![vec![1, 2], vec![0, 2], vec![0, 1]],
        )
        .unwrap();
        let pb = mean_peer_belief(&g, &[0.1, 0.5, 0.9]).unwrap();
        assert!((pb[0] - 0.7).abs() < 1e-15);
        assert!((pb[1] - 0.5).abs() < 1e-15);
        assert!((pb[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mean_peer_belief_length_mismatch() {
        let g = GroupData::new(
            "a".into(),
            vec!["1".into()],
            vec![0],
            DMatrix::zeros(1, 1),
            vec![vec![]],
        )
        .unwrap();
        assert!(mean_peer_belief(&g, &[0.5, 0.5]).is_err());
    }
}
