//! Road graph, deterministic shortest paths and the route-derived quantities
//! used by the choice model and the QoS estimators.
//!
//! All distances are network distances in km. Dijkstra ties are broken toward
//! the lexicographically smallest node-id sequence so that routes are stable
//! across runs and platforms.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// km
    pub x: f64,
    /// km
    pub y: f64,
}

/// Undirected road segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    /// km, strictly positive
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetworkData {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// Weighted undirected road graph. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "NetworkData", into = "NetworkData")]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: HashMap<NodeId, usize>,
    /// Neighbours sorted by node id, then by edge length.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl TryFrom<NetworkData> for RoadNetwork {
    type Error = Error;

    fn try_from(data: NetworkData) -> Result<Self> {
        RoadNetwork::new(data.nodes, data.edges)
    }
}

impl From<RoadNetwork> for NetworkData {
    fn from(net: RoadNetwork) -> Self {
        NetworkData { nodes: net.nodes, edges: net.edges }
    }
}

/// Ordered node path with its total length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub nodes: Vec<NodeId>,
    /// km
    pub length: f64,
}

/// Binary amenity indicators of a candidate site: restaurant, shopping centre, supermarket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Amenities {
    pub r: u8,
    pub g: u8,
    pub m: u8,
}

/// Candidate charging-station location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub road_node: NodeId,
    pub bus: u32,
    #[serde(default)]
    pub amenities: Amenities,
    /// When set, only this provider may build here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_owner: Option<usize>,
}

#[derive(Copy, Clone, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then node index
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn same_length(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl RoadNetwork {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let problems = Self::problems(&nodes, &edges);
        if !problems.is_empty() {
            return Err(Error::Validation { problems });
        }
        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for e in &edges {
            let (a, b) = (index[&e.u], index[&e.v]);
            adjacency[a].push((b, e.length));
            if a != b {
                adjacency[b].push((a, e.length));
            }
        }
        for list in &mut adjacency {
            list.sort_by(|x, y| nodes[x.0].id.cmp(&nodes[y.0].id).then(x.1.total_cmp(&y.1)));
        }
        Ok(Self { nodes, edges, index, adjacency })
    }

    /// Every invariant violation of a node/edge list, empty when valid.
    pub fn problems(nodes: &[Node], edges: &[Edge]) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if seen.insert(n.id, i).is_some() {
                problems.push(format!("road node id {} is duplicated", n.id));
            }
            if !(n.x.is_finite() && n.y.is_finite()) {
                problems.push(format!("road node {} has non-finite coordinates", n.id));
            }
        }
        for (i, e) in edges.iter().enumerate() {
            if !(e.length > 0.0 && e.length.is_finite()) {
                problems.push(format!("edge #{i} ({}-{}) has non-positive length {}", e.u, e.v, e.length));
            }
            for end in [e.u, e.v] {
                if !seen.contains_key(&end) {
                    problems.push(format!("edge #{i} references unknown node {end}"));
                }
            }
        }
        problems
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn index_of(&self, id: NodeId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownNode(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        Ok(&self.nodes[self.index_of(id)?])
    }

    /// Single-source Dijkstra from several sources at distance 0. Unreachable nodes get `+inf`.
    fn dijkstra(&self, sources: &[usize]) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            dist[s] = 0.0;
            heap.push(Entry { dist: 0.0, node: s });
        }
        while let Some(Entry { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &(next, w) in &self.adjacency[node] {
                let nd = d + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    heap.push(Entry { dist: nd, node: next });
                }
            }
        }
        dist
    }

    /// Network distances from `origin` to every node, indexed like [`RoadNetwork::nodes`].
    pub fn distances_from(&self, origin: NodeId) -> Result<Vec<f64>> {
        Ok(self.dijkstra(&[self.index_of(origin)?]))
    }

    pub fn distance(&self, from: NodeId, to: NodeId) -> Result<f64> {
        let d = self.distances_from(from)?[self.index_of(to)?];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::NoPath { from, to })
        }
    }

    /// Minimum-length route; among equal-length routes the lexicographically
    /// smallest node-id sequence.
    pub fn shortest_path(&self, origin: NodeId, dest: NodeId) -> Result<Route> {
        let o = self.index_of(origin)?;
        let d = self.index_of(dest)?;
        let from_origin = self.dijkstra(&[o]);
        let total = from_origin[d];
        if !total.is_finite() {
            return Err(Error::NoPath { from: origin, to: dest });
        }
        let to_dest = self.dijkstra(&[d]);
        let mut nodes = vec![origin];
        let mut length = 0.0;
        let mut at = o;
        while at != d {
            let (next, w) = self.adjacency[at]
                .iter()
                .copied()
                .find(|&(v, w)| {
                    same_length(from_origin[at] + w, from_origin[v]) && same_length(from_origin[v] + to_dest[v], total)
                })
                .expect("a shortest-path successor exists for every node on a shortest path");
            nodes.push(self.nodes[next].id);
            length += w;
            at = next;
        }
        Ok(Route { nodes, length })
    }

    /// Distance from each node to the nearest node of `route`.
    pub fn distances_to_route(&self, route: &Route) -> Result<Vec<f64>> {
        let sources = route.nodes.iter().map(|&n| self.index_of(n)).collect::<Result<Vec<_>>>()?;
        Ok(self.dijkstra(&sources))
    }

    /// All-pairs distance table, computed with one Dijkstra per node.
    pub fn distance_table(&self) -> DistanceTable {
        let rows = (0..self.nodes.len()).into_par_iter().map(|i| self.dijkstra(&[i])).collect();
        DistanceTable { index: self.index.clone(), rows }
    }
}

/// Cached all-pairs network distances.
#[derive(Clone, Debug)]
pub struct DistanceTable {
    index: HashMap<NodeId, usize>,
    rows: Vec<Vec<f64>>,
}

impl DistanceTable {
    pub fn get(&self, from: NodeId, to: NodeId) -> Result<f64> {
        let i = *self.index.get(&from).ok_or(Error::UnknownNode(from))?;
        let j = *self.index.get(&to).ok_or(Error::UnknownNode(to))?;
        let d = self.rows[i][j];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::NoPath { from, to })
        }
    }

    /// Like [`DistanceTable::get`] but unreachable pairs yield `+inf`.
    pub fn get_or_inf(&self, from: NodeId, to: NodeId) -> Result<f64> {
        let i = *self.index.get(&from).ok_or(Error::UnknownNode(from))?;
        let j = *self.index.get(&to).ok_or(Error::UnknownNode(to))?;
        Ok(self.rows[i][j])
    }

    pub fn deviating_distance(&self, origin: NodeId, dest: NodeId, site_node: NodeId) -> Result<f64> {
        let detour = self.get(origin, site_node)? + self.get(site_node, dest)?;
        Ok((detour - self.get(origin, dest)?).max(0.0))
    }

    pub fn destination_indicator(&self, dest: NodeId, site_node: NodeId, d_th: f64) -> Result<bool> {
        Ok(self.get_or_inf(site_node, dest)? <= d_th)
    }

    pub fn route_coverage_count<'a>(
        &self,
        route: &Route,
        sites: impl IntoIterator<Item = &'a Site>,
        d_th: f64,
    ) -> Result<usize> {
        let mut count = 0;
        for site in sites {
            let mut nearest = f64::INFINITY;
            for &n in &route.nodes {
                nearest = nearest.min(self.get_or_inf(site.road_node, n)?);
            }
            if nearest <= d_th {
                count += 1;
            }
        }
        Ok(count)
    }
}

pub fn shortest_path(net: &RoadNetwork, origin: NodeId, dest: NodeId) -> Result<Route> {
    net.shortest_path(origin, dest)
}

/// Extra distance of the detour origin → site → dest over the direct shortest route.
pub fn deviating_distance(net: &RoadNetwork, origin: NodeId, dest: NodeId, site: &Site) -> Result<f64> {
    let from_site = net.distances_from(site.road_node)?;
    let to_origin = from_site[net.index_of(origin)?];
    let to_dest = from_site[net.index_of(dest)?];
    if !to_origin.is_finite() {
        return Err(Error::NoPath { from: origin, to: site.road_node });
    }
    if !to_dest.is_finite() {
        return Err(Error::NoPath { from: site.road_node, to: dest });
    }
    let direct = net.distance(origin, dest)?;
    Ok((to_origin + to_dest - direct).max(0.0))
}

/// 1 when the site is within `d_th` km of the destination by road; unreachable counts as far.
pub fn destination_indicator(net: &RoadNetwork, dest: NodeId, site: &Site, d_th: f64) -> Result<bool> {
    let d = net.distances_from(site.road_node)?[net.index_of(dest)?];
    Ok(d <= d_th)
}

/// Number of sites whose road distance to the nearest route node is at most `d_th`.
pub fn route_coverage_count(net: &RoadNetwork, route: &Route, sites: &[Site], d_th: f64) -> Result<usize> {
    if sites.is_empty() {
        return Ok(0);
    }
    let to_route = net.distances_to_route(route)?;
    let mut count = 0;
    for site in sites {
        if to_route[net.index_of(site.road_node)?] <= d_th {
            count += 1;
        }
    }
    Ok(count)
}
