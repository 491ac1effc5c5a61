//! Static covariates: POI entropy, metro-network indicators, geographic
//! distance, and assembly of the per-station static matrix.
//!
//! Summation orders are part of the contract here: pair-level quantities
//! (efficiency, average distance, betweenness contributions) accumulate over
//! unordered pairs in lexicographic index order, so independent
//! reimplementations that follow the same order reproduce results bit for bit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::StationSet;
use crate::error::{Error, Result};
use crate::io::{PoiTable, StationAttrs, TopologyTable};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Fixed slot order of the static covariate vector.
pub const STATIC_SLOTS: [&str; 18] = [
    "population",
    "per_capita_gdp",
    "population_density",
    "bus_network_density",
    "network_efficiency",
    "network_avg_distance",
    "network_density",
    "poi_entropy",
    "nighttime_light",
    "degree",
    "closeness",
    "betweenness",
    "is_terminal",
    "is_transfer",
    "connecting_bus_count",
    "distance_to_center_km",
    "reserved_1",
    "reserved_2",
];

pub const A_DIM: usize = STATIC_SLOTS.len();

/// Undirected physical-adjacency graph over one city's stations.
#[derive(Clone, Debug)]
pub struct MetroGraph {
    stations: StationSet,
    adj: Vec<Vec<usize>>,
    n_edges: usize,
}

impl MetroGraph {
    pub fn new(stations: StationSet, edges: &[(String, String)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); stations.len()];
        let mut seen = std::collections::BTreeSet::new();
        for (a, b) in edges {
            let ia = stations
                .index_of(a)
                .ok_or_else(|| Error::Data(format!("edge references unknown station {a}")))?;
            let ib = stations
                .index_of(b)
                .ok_or_else(|| Error::Data(format!("edge references unknown station {b}")))?;
            if ia == ib {
                return Err(Error::Data(format!("self-loop at station {a}")));
            }
            let key = (ia.min(ib), ia.max(ib));
            if !seen.insert(key) {
                return Err(Error::Data(format!("duplicate edge {a}-{b}")));
            }
            adj[ia].push(ib);
            adj[ib].push(ia);
        }
        for nbrs in &mut adj {
            nbrs.sort_unstable();
        }
        Ok(MetroGraph {
            stations,
            adj,
            n_edges: seen.len(),
        })
    }

    pub fn from_topology(stations: StationSet, topo: &TopologyTable) -> Result<Self> {
        MetroGraph::new(stations, &topo.edges)
    }

    pub fn stations(&self) -> &StationSet {
        &self.stations
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    /// BFS distances and shortest-path counts from `src`. Unreachable nodes
    /// keep u32::MAX / 0 counts.
    fn bfs(&self, src: usize) -> (Vec<u32>, Vec<f64>) {
        let n = self.adj.len();
        let mut dist = vec![u32::MAX; n];
        let mut sigma = vec![0.0; n];
        dist[src] = 0;
        sigma[src] = 1.0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adj[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
                if dist[v] == dist[u] + 1 {
                    sigma[v] += sigma[u];
                }
            }
        }
        (dist, sigma)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.adj.len();
        if n < 2 {
            return Err(Error::Data("graph needs at least 2 nodes".into()));
        }
        let (dist, _) = self.bfs(0);
        if dist.iter().all(|&d| d != u32::MAX) {
            return Ok(());
        }
        let mut comp = vec![usize::MAX; n];
        let mut sizes = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0usize;
            let mut stack = vec![start];
            comp[start] = id;
            while let Some(u) = stack.pop() {
                size += 1;
                for &v in &self.adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = id;
                        stack.push(v);
                    }
                }
            }
            sizes.push(size);
        }
        Err(Error::Disconnected {
            component_count: sizes.len(),
            sizes,
        })
    }
}

/// Shannon entropy (natural log) over positive-count categories, iterated in
/// index order.
pub fn poi_entropy(category_counts: &[f64]) -> Result<f64> {
    if category_counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::InvalidValue("negative or non-finite POI count".into()));
    }
    let total: f64 = category_counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidValue("all POI counts are zero".into()));
    }
    let mut h = 0.0;
    for &c in category_counts {
        if c > 0.0 {
            let p = c / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkIndicators {
    pub efficiency: f64,
    pub avg_distance: f64,
    pub density: f64,
}

/// Whole-network indicators over hop-count shortest paths. Requires a
/// connected graph with at least 2 nodes.
pub fn network_indicators(g: &MetroGraph) -> Result<NetworkIndicators> {
    g.check_connected()?;
    let n = g.n_nodes();
    let dist: Vec<Vec<u32>> = (0..n).map(|s| g.bfs(s).0).collect();
    let mut sum_d = 0.0;
    let mut sum_inv = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist[i][j] as f64;
            sum_d += d;
            sum_inv += 1.0 / d;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(NetworkIndicators {
        efficiency: sum_inv / pairs,
        avg_distance: sum_d / pairs,
        density: 2.0 * g.n_edges() as f64 / (n as f64 * (n - 1) as f64),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationIndicators {
    pub degree: Vec<f64>,
    pub closeness: Vec<f64>,
    pub betweenness: Vec<f64>,
}

/// Per-station degree, closeness (n−1)/Σd, and shortest-path betweenness with
/// even split across equal-length paths, normalized by (n−1)(n−2)/2.
///
/// Betweenness accumulates per unordered pair (s, t) in lexicographic order:
/// a node v strictly between them contributes σ_sv · σ_vt / σ_st.
pub fn station_indicators(g: &MetroGraph) -> Result<StationIndicators> {
    g.check_connected()?;
    let n = g.n_nodes();
    let per_source: Vec<(Vec<u32>, Vec<f64>)> = (0..n).map(|s| g.bfs(s)).collect();

    let degree: Vec<f64> = (0..n).map(|v| g.degree(v) as f64).collect();
    let closeness: Vec<f64> = (0..n)
        .map(|v| {
            let sum: u64 = per_source[v].0.iter().map(|&d| d as u64).sum();
            (n as f64 - 1.0) / sum as f64
        })
        .collect();

    let mut betweenness = vec![0.0; n];
    if n > 2 {
        for s in 0..n {
            for t in (s + 1)..n {
                let (dist_s, sigma_s) = &per_source[s];
                let (dist_t, sigma_t) = &per_source[t];
                let d_st = dist_s[t];
                let total = sigma_s[t];
                for v in 0..n {
                    if v == s || v == t {
                        continue;
                    }
                    if dist_s[v] + dist_t[v] == d_st {
                        betweenness[v] += sigma_s[v] * sigma_t[v] / total;
                    }
                }
            }
        }
        let norm = ((n - 1) * (n - 2)) as f64 / 2.0;
        for b in &mut betweenness {
            *b /= norm;
        }
    }
    Ok(StationIndicators {
        degree,
        closeness,
        betweenness,
    })
}

/// Great-circle distance between two lat/lon points in degrees.
pub fn distance_to_center(lat: f64, lon: f64, center_lat: f64, center_lon: f64) -> Result<f64> {
    for (v, lo, hi, name) in [
        (lat, -90.0, 90.0, "lat"),
        (center_lat, -90.0, 90.0, "center_lat"),
        (lon, -180.0, 180.0, "lon"),
        (center_lon, -180.0, 180.0, "center_lon"),
    ] {
        if !v.is_finite() || v < lo || v > hi {
            return Err(Error::InvalidValue(format!("{name} {v} out of range [{lo}, {hi}]")));
        }
    }
    let (phi1, phi2) = (lat.to_radians(), center_lat.to_radians());
    let dphi = (center_lat - lat).to_radians();
    let dlambda = (center_lon - lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let c = 2.0 * a.sqrt().atan2((1.0 - a).sqrt());
    Ok(EARTH_RADIUS_KM * c)
}

/// City-level scalars broadcast into every station's static vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityScalars {
    pub population: f64,
    pub per_capita_gdp: f64,
    pub population_density: f64,
    pub bus_network_density: f64,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Values for the two reserved slots (default zero).
    #[serde(default)]
    pub reserved: [f64; 2],
}

/// Assembles the stations × A_DIM static matrix in `STATIC_SLOTS` order.
/// Row order follows `graph.stations()`; attrs and POI rows are matched by id.
///
/// A station is terminal when it has exactly one incident edge and a transfer
/// station when it has three or more.
pub fn assemble_static_vectors(
    graph: &MetroGraph,
    poi: &PoiTable,
    attrs: &StationAttrs,
    scalars: &CityScalars,
) -> Result<Array2<f64>> {
    let stations = graph.stations();
    let net = network_indicators(graph)?;
    let st = station_indicators(graph)?;

    let attr_row: std::collections::BTreeMap<&str, usize> = attrs
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let poi_row: std::collections::BTreeMap<&str, usize> = poi
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut missing = Vec::new();
    for id in stations.ids() {
        if !attr_row.contains_key(id.as_str()) {
            missing.push(format!("stations.csv row for {id}"));
        }
        if !poi_row.contains_key(id.as_str()) {
            missing.push(format!("poi.csv row for {id}"));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing static inputs: {}", missing.join(", "))));
    }

    let n = stations.len();
    let mut out = Array2::zeros((n, A_DIM));
    for (i, id) in stations.ids().iter().enumerate() {
        let ai = attr_row[id.as_str()];
        let pi = poi_row[id.as_str()];
        let entropy = poi_entropy(poi.counts.row(pi).as_slice().expect("contiguous row"))
            .map_err(|e| Error::InvalidValue(format!("station {id}: {e}")))?;
        let dist = distance_to_center(
            attrs.lat[ai],
            attrs.lon[ai],
            scalars.center_lat,
            scalars.center_lon,
        )?;
        let deg = st.degree[i];
        let row = [
            scalars.population,
            scalars.per_capita_gdp,
            scalars.population_density,
            scalars.bus_network_density,
            net.efficiency,
            net.avg_distance,
            net.density,
            entropy,
            attrs.nighttime_light[ai],
            deg,
            st.closeness[i],
            st.betweenness[i],
            if deg == 1.0 { 1.0 } else { 0.0 },
            if deg >= 3.0 { 1.0 } else { 0.0 },
            attrs.connecting_bus_count[ai],
            dist,
            scalars.reserved[0],
            scalars.reserved[1],
        ];
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}
