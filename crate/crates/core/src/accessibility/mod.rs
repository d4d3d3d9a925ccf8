//! Utilization-adjusted travel-cost accessibility.
//!
//! For a community with sample points `u_1..u_B` the accessibility in year
//! `t` is `Y(U, t) = (1/B) Σ_b C(u_b, t)^β · W(u_b, t)`, where `C` is the mean
//! distance to the `Q` nearest service sites open that year and
//! `W = P / R` is the ratio of population rate to service rate.

mod beta;
mod rates;

use std::collections::HashMap;

use petgraph::graph::{NodeIndex, UnGraph};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dist2d, Scalar};

pub use beta::{estimate_beta, estimate_beta_ols, BetaEstimate, HuberOptions};
pub use rates::{silverman_bandwidth, smooth_rate, Raster, RateField, RateSurface, WeightedPoint};

/// Time label of the service network (a calendar year in practice).
pub type Year = i32;

/// Default number of nearest sites averaged into the travel cost.
pub const DEFAULT_Q: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum AccessError {
    #[error("year {0} is not part of the service network")]
    UnknownYear(Year),
    #[error("year {year} has {available} sites, fewer than the {q} requested")]
    InsufficientSites { year: Year, available: usize, q: usize },
    #[error("point ({x}, {y}) cannot reach every site of year {year} in the network")]
    Unreachable { x: f64, y: f64, year: Year },
    #[error("point ({x}, {y}) has no row in the distance matrix")]
    UnknownPoint { x: f64, y: f64 },
    #[error("service rate is zero at point {point} of community {community} in year {year}")]
    ZeroServiceRate {
        community: String,
        point: usize,
        year: Year,
    },
    #[error("rate surface has no data for year {0}")]
    MissingRateYear(Year),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid kernel bandwidth {0}")]
    InvalidBandwidth(f64),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("community {0} is invalid: {1}")]
    InvalidCommunity(String, String),
    #[error("q must be at least 1")]
    ZeroQ,
    #[error("{costs} costs but {weights} weights")]
    LengthMismatch { costs: usize, weights: usize },
    #[error("cost {index} is not strictly positive")]
    NonPositiveCost { index: usize },
    #[error("travel costs are constant, the log-log regression is rank deficient")]
    DegenerateCosts,
}

fn point_key<T: Scalar>(p: &[T; 2]) -> [u64; 2] {
    [p[0].as_f64().to_bits(), p[1].as_f64().to_bits()]
}

/// Precomputed distances from sample points to the sites of every year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DistanceMatrix<T> {
    pub points: Vec<[T; 2]>,
    /// `by_year[k][i][j]`: point `i` to site `j` of `network.years[k]`.
    pub by_year: Vec<Vec<Vec<T>>>,
}

/// Undirected road graph; sample points and sites snap to their nearest vertex.
#[derive(Debug, Clone)]
pub struct RoadGraph<T> {
    graph: UnGraph<[T; 2], T>,
}

impl<T: Scalar> RoadGraph<T> {
    pub fn new(vertices: Vec<[T; 2]>, edges: &[(usize, usize, T)]) -> Result<Self, AccessError> {
        if vertices.is_empty() {
            return Err(AccessError::InvalidNetwork("graph has no vertices".into()));
        }
        let mut graph = UnGraph::with_capacity(vertices.len(), edges.len());
        for v in vertices {
            graph.add_node(v);
        }
        for &(a, b, w) in edges {
            if a >= graph.node_count() || b >= graph.node_count() {
                return Err(AccessError::InvalidNetwork(format!(
                    "edge ({a}, {b}) names a missing vertex"
                )));
            }
            if !w.is_finite() || w < T::zero() {
                return Err(AccessError::InvalidNetwork(format!(
                    "edge ({a}, {b}) has invalid weight"
                )));
            }
            graph.add_edge(NodeIndex::new(a), NodeIndex::new(b), w);
        }
        Ok(Self { graph })
    }

    pub fn vertex_count(&self) -> usize {
        self.graph.node_count()
    }

    /// Nearest vertex; ties go to the lowest index.
    pub fn snap(&self, p: &[T; 2]) -> NodeIndex {
        let mut best = NodeIndex::new(0);
        let mut best_d = dist2d(p, &self.graph[best]);
        for idx in self.graph.node_indices().skip(1) {
            let d = dist2d(p, &self.graph[idx]);
            if d < best_d {
                best = idx;
                best_d = d;
            }
        }
        best
    }

    fn shortest_from(&self, p: &[T; 2]) -> HashMap<NodeIndex, T> {
        petgraph::algo::dijkstra(&self.graph, self.snap(p), None, |e| *e.weight())
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum DistanceSource<T> {
    /// Straight-line planar distance.
    Euclidean,
    Matrix(DistanceMatrix<T>),
    Graph(RoadGraph<T>),
}

/// Service sites per year together with the way distances are resolved.
#[derive(Debug, Clone)]
pub struct ServiceNetwork<T> {
    years: Vec<Year>,
    sites_by_year: Vec<Vec<[T; 2]>>,
    source: DistanceSource<T>,
    matrix_rows: HashMap<[u64; 2], usize>,
}

/// Distances from one point to every site, resolved once and reused across
/// years.
enum Resolved<T> {
    Point([T; 2]),
    Row(usize),
    Graph([T; 2], HashMap<NodeIndex, T>),
}

impl<T: Scalar> ServiceNetwork<T> {
    pub fn new(
        years: Vec<Year>,
        sites_by_year: Vec<Vec<[T; 2]>>,
        source: DistanceSource<T>,
    ) -> Result<Self, AccessError> {
        if years.is_empty() {
            return Err(AccessError::InvalidNetwork("no years".into()));
        }
        if years.len() != sites_by_year.len() {
            return Err(AccessError::InvalidNetwork(format!(
                "{} years but {} site lists",
                years.len(),
                sites_by_year.len()
            )));
        }
        if years.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AccessError::InvalidNetwork("years must be strictly increasing".into()));
        }
        let mut matrix_rows = HashMap::new();
        if let DistanceSource::Matrix(m) = &source {
            if m.by_year.len() != years.len() {
                return Err(AccessError::InvalidNetwork(
                    "distance matrix does not cover every year".into(),
                ));
            }
            for (k, rows) in m.by_year.iter().enumerate() {
                if rows.len() != m.points.len() {
                    return Err(AccessError::InvalidNetwork(format!(
                        "year {} has {} rows",
                        years[k],
                        rows.len()
                    )));
                }
                for row in rows {
                    if row.len() != sites_by_year[k].len() {
                        return Err(AccessError::InvalidNetwork(format!(
                            "year {} rows must have one entry per site",
                            years[k]
                        )));
                    }
                    if row.iter().any(|d| !d.is_finite() || *d < T::zero()) {
                        return Err(AccessError::InvalidNetwork(
                            "distances must be finite and nonnegative".into(),
                        ));
                    }
                }
            }
            for (i, p) in m.points.iter().enumerate() {
                matrix_rows.insert(point_key(p), i);
            }
        }
        Ok(Self {
            years,
            sites_by_year,
            source,
            matrix_rows,
        })
    }

    pub fn years(&self) -> &[Year] {
        &self.years
    }

    pub fn sites(&self, year: Year) -> Result<&[[T; 2]], AccessError> {
        let k = self.year_index(year)?;
        Ok(&self.sites_by_year[k])
    }

    fn year_index(&self, year: Year) -> Result<usize, AccessError> {
        self.years
            .iter()
            .position(|y| *y == year)
            .ok_or(AccessError::UnknownYear(year))
    }

    fn resolve(&self, point: &[T; 2]) -> Result<Resolved<T>, AccessError> {
        match &self.source {
            DistanceSource::Euclidean => Ok(Resolved::Point(*point)),
            DistanceSource::Matrix(_) => self
                .matrix_rows
                .get(&point_key(point))
                .map(|&i| Resolved::Row(i))
                .ok_or(AccessError::UnknownPoint {
                    x: point[0].as_f64(),
                    y: point[1].as_f64(),
                }),
            DistanceSource::Graph(g) => Ok(Resolved::Graph(*point, g.shortest_from(point))),
        }
    }

    fn site_distances(&self, resolved: &Resolved<T>, k: usize) -> Result<Vec<T>, AccessError> {
        let sites = &self.sites_by_year[k];
        match (resolved, &self.source) {
            (Resolved::Point(p), _) => Ok(sites.iter().map(|s| dist2d(p, s)).collect()),
            (Resolved::Row(i), DistanceSource::Matrix(m)) => Ok(m.by_year[k][*i].clone()),
            (Resolved::Graph(p, reach), DistanceSource::Graph(g)) => sites
                .iter()
                .map(|s| {
                    reach.get(&g.snap(s)).copied().ok_or(AccessError::Unreachable {
                        x: p[0].as_f64(),
                        y: p[1].as_f64(),
                        year: self.years[k],
                    })
                })
                .collect(),
            _ => unreachable!("resolution always matches the distance source"),
        }
    }

    fn cost_from(&self, resolved: &Resolved<T>, k: usize, q: usize) -> Result<T, AccessError> {
        if q == 0 {
            return Err(AccessError::ZeroQ);
        }
        let available = self.sites_by_year[k].len();
        if available < q {
            return Err(AccessError::InsufficientSites {
                year: self.years[k],
                available,
                q,
            });
        }
        let mut d = self.site_distances(resolved, k)?;
        mean_of_smallest(&mut d, q)
    }
}

fn mean_of_smallest<T: Scalar>(d: &mut [T], q: usize) -> Result<T, AccessError> {
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let sum = d[..q].iter().fold(T::zero(), |a, &v| a + v);
    Ok(sum / T::from_count(q))
}

/// Mean of the `q` smallest distances from `point` to the sites open in `year`.
pub fn travel_cost<T: Scalar>(
    network: &ServiceNetwork<T>,
    point: &[T; 2],
    year: Year,
    q: usize,
) -> Result<T, AccessError> {
    let k = network.year_index(year)?;
    if q == 0 {
        return Err(AccessError::ZeroQ);
    }
    let available = network.sites_by_year[k].len();
    if available < q {
        return Err(AccessError::InsufficientSites { year, available, q });
    }
    let resolved = network.resolve(point)?;
    network.cost_from(&resolved, k, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Community<T> {
    pub id: String,
    pub sample_points: Vec<[T; 2]>,
}

impl<T: Scalar> Community<T> {
    pub fn new(id: impl Into<String>, sample_points: Vec<[T; 2]>) -> Result<Self, AccessError> {
        let id = id.into();
        if sample_points.is_empty() {
            return Err(AccessError::InvalidCommunity(id, "no sample points".into()));
        }
        for i in 0..sample_points.len() {
            for j in 0..i {
                if sample_points[i] == sample_points[j] {
                    return Err(AccessError::InvalidCommunity(
                        id,
                        format!("sample points {j} and {i} coincide"),
                    ));
                }
            }
        }
        Ok(Self { id, sample_points })
    }
}

/// Travel cost and utilization weight at one sample point in one year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeight<T> {
    pub cost: T,
    pub weight: T,
}

/// `terms[b][k]` for sample point `b` and year index `k`.
fn community_terms<T: Scalar>(
    network: &ServiceNetwork<T>,
    community: &Community<T>,
    rates: &RateField<T>,
    q: usize,
) -> Result<Vec<Vec<CostWeight<T>>>, AccessError> {
    let mut out = Vec::with_capacity(community.sample_points.len());
    for (b, p) in community.sample_points.iter().enumerate() {
        let resolved = network.resolve(p)?;
        let mut row = Vec::with_capacity(network.years.len());
        for (k, &year) in network.years.iter().enumerate() {
            let cost = network.cost_from(&resolved, k, q)?;
            let pop = rates.population.rate(p, year)?;
            let svc = rates.service.rate(p, year)?;
            if !(svc > T::zero()) {
                return Err(AccessError::ZeroServiceRate {
                    community: community.id.clone(),
                    point: b,
                    year,
                });
            }
            row.push(CostWeight {
                cost,
                weight: pop / svc,
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Every `(C, W)` pair over communities, sample points and years, in that
/// nesting order; the input to [`estimate_beta`].
pub fn cost_weight_pairs<T: Scalar>(
    network: &ServiceNetwork<T>,
    communities: &[Community<T>],
    rates: &RateField<T>,
    q: usize,
) -> Result<Vec<CostWeight<T>>, AccessError> {
    let per: Result<Vec<_>, _> = communities
        .par_iter()
        .map(|c| community_terms(network, c, rates, q))
        .collect();
    Ok(per?.into_iter().flatten().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AccessibilityPanel<T> {
    pub community_ids: Vec<String>,
    pub years: Vec<Year>,
    /// `values[s][k]` for community `s` and year `years[k]`.
    pub values: Vec<Vec<T>>,
    pub q_nearest: usize,
    pub beta: T,
}

impl<T: Scalar> AccessibilityPanel<T> {
    pub fn value(&self, community: usize, year_index: usize) -> T {
        self.values[community][year_index]
    }
}

/// Accessibility of every community in every network year.
pub fn accessibility_panel<T: Scalar>(
    network: &ServiceNetwork<T>,
    communities: &[Community<T>],
    rates: &RateField<T>,
    q: usize,
    beta: T,
) -> Result<AccessibilityPanel<T>, AccessError> {
    if q == 0 {
        return Err(AccessError::ZeroQ);
    }
    if communities.is_empty() {
        return Err(AccessError::EmptyInput("communities"));
    }
    let values: Result<Vec<Vec<T>>, AccessError> = communities
        .par_iter()
        .map(|c| {
            let terms = community_terms(network, c, rates, q)?;
            let b = T::from_count(terms.len());
            Ok((0..network.years.len())
                .map(|k| {
                    let mut acc = T::zero();
                    for row in &terms {
                        let cw = row[k];
                        acc += cw.cost.powf(beta) * cw.weight;
                    }
                    acc / b
                })
                .collect())
        })
        .collect();
    Ok(AccessibilityPanel {
        community_ids: communities.iter().map(|c| c.id.clone()).collect(),
        years: network.years.clone(),
        values: values?,
        q_nearest: q,
        beta,
    })
}
