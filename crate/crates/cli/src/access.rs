//! Input files of the `access` command.

use std::collections::BTreeMap;
use std::path::Path;

use stvcm::accessibility::{
    Community, DistanceSource, Raster, RateSurface, RoadGraph, ServiceNetwork, WeightedPoint, Year,
};

use crate::error::{CliError, Result};
use crate::io::{parse_f64, read_text};

/// Header and `(line number, fields)` rows of a CSV file.
type Records = (Vec<String>, Vec<(usize, Vec<String>)>);

fn records(path: &Path) -> Result<Records> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

fn columns<const K: usize>(header: &[String], names: [&str; K], path: &Path) -> Result<[usize; K]> {
    let mut out = [0; K];
    for (o, n) in out.iter_mut().zip(names) {
        *o = header
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| CliError::data(format!("{}: missing column '{n}'", path.display())))?;
    }
    Ok(out)
}

fn year(s: &str, path: &Path, line: usize) -> Result<Year> {
    s.parse()
        .map_err(|_| CliError::data(format!("{}:{line}: year '{s}' is not an integer", path.display())))
}

pub type SitesByYear = (Vec<Year>, Vec<Vec<[f64; 2]>>);

/// Sites CSV `year,x,y`: the sites open in each year.
pub fn read_sites(path: &Path) -> Result<SitesByYear> {
    let (h, rows) = records(path)?;
    let [y, x, yy] = columns(&h, ["year", "x", "y"], path)?;
    let mut by_year: BTreeMap<Year, Vec<[f64; 2]>> = BTreeMap::new();
    for (line, r) in &rows {
        let at = [
            parse_f64(&r[x], "x", path, *line)?,
            parse_f64(&r[yy], "y", path, *line)?,
        ];
        by_year.entry(year(&r[y], path, *line)?).or_default().push(at);
    }
    Ok(by_year.into_iter().unzip())
}

/// Communities CSV `community_id,point_index,x,y`, ordered by first
/// appearance of the id and then by point index.
pub fn read_communities(path: &Path) -> Result<Vec<Community<f64>>> {
    let (h, rows) = records(path)?;
    let [id, idx, x, y] = columns(&h, ["community_id", "point_index", "x", "y"], path)?;
    let mut order: Vec<String> = Vec::new();
    let mut points: BTreeMap<String, Vec<(usize, [f64; 2])>> = BTreeMap::new();
    for (line, r) in &rows {
        let k: usize = r[idx].parse().map_err(|_| {
            CliError::data(format!(
                "{}:{line}: point_index must be a non-negative integer",
                path.display()
            ))
        })?;
        let at = [parse_f64(&r[x], "x", path, *line)?, parse_f64(&r[y], "y", path, *line)?];
        if !points.contains_key(&r[id]) {
            order.push(r[id].clone());
        }
        points.entry(r[id].clone()).or_default().push((k, at));
    }
    order
        .into_iter()
        .map(|c| {
            let mut pts = points.remove(&c).unwrap();
            pts.sort_by_key(|p| p.0);
            if pts.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(CliError::data(format!(
                    "{}: community '{c}' repeats a point index",
                    path.display()
                )));
            }
            Community::new(c, pts.into_iter().map(|p| p.1).collect()).map_err(CliError::from)
        })
        .collect()
}

/// A rate given as a constant, a raster CSV (`year,x,y,value` on a full
/// regular lattice) or a point CSV (`year,x,y` with optional `weight`)
/// smoothed with a Gaussian kernel.
pub fn read_rate(spec: Option<&str>, bandwidth: Option<f64>) -> Result<RateSurface<f64>> {
    let Some(spec) = spec else {
        return Ok(RateSurface::Constant(1.0));
    };
    if let Ok(v) = spec.parse::<f64>() {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CliError::usage(format!(
                "rate constant {spec} must be finite and non-negative"
            )));
        }
        return Ok(RateSurface::Constant(v));
    }
    let path = Path::new(spec);
    let (h, rows) = records(path)?;
    let [y, x, yy] = columns(&h, ["year", "x", "y"], path)?;
    if let Some(vc) = h.iter().position(|c| c == "value") {
        let mut by_year: BTreeMap<Year, Vec<([f64; 2], f64)>> = BTreeMap::new();
        for (line, r) in &rows {
            let at = [
                parse_f64(&r[x], "x", path, *line)?,
                parse_f64(&r[yy], "y", path, *line)?,
            ];
            let v = parse_f64(&r[vc], "value", path, *line)?;
            by_year.entry(year(&r[y], path, *line)?).or_default().push((at, v));
        }
        let rasters = by_year
            .into_iter()
            .map(|(yr, cells)| lattice(&cells, path).map(|r| (yr, r)))
            .collect::<Result<Vec<_>>>()?;
        return Ok(RateSurface::Raster(rasters));
    }
    let wc = h.iter().position(|c| c == "weight");
    let mut by_year: BTreeMap<Year, Vec<WeightedPoint<f64>>> = BTreeMap::new();
    for (line, r) in &rows {
        let at = [
            parse_f64(&r[x], "x", path, *line)?,
            parse_f64(&r[yy], "y", path, *line)?,
        ];
        let weight = match wc {
            Some(c) => parse_f64(&r[c], "weight", path, *line)?,
            None => 1.0,
        };
        by_year
            .entry(year(&r[y], path, *line)?)
            .or_default()
            .push(WeightedPoint { at, weight });
    }
    Ok(RateSurface::Kernel {
        points: by_year.into_iter().collect(),
        bandwidth,
    })
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

fn lattice(cells: &[([f64; 2], f64)], path: &Path) -> Result<Raster<f64>> {
    let xs = sorted_unique(cells.iter().map(|c| c.0[0]).collect());
    let ys = sorted_unique(cells.iter().map(|c| c.0[1]).collect());
    let (nx, ny) = (xs.len(), ys.len());
    if nx * ny != cells.len() {
        return Err(CliError::data(format!(
            "{}: raster cells do not form a complete lattice",
            path.display()
        )));
    }
    let step = |v: &[f64]| if v.len() > 1 { v[1] - v[0] } else { 1.0 };
    let spacing = [step(&xs), step(&ys)];
    let uniform = |v: &[f64], d: f64| {
        v.windows(2)
            .all(|w| ((w[1] - w[0]) - d).abs() <= 1e-9 * d.abs().max(1.0))
    };
    if !uniform(&xs, spacing[0]) || !uniform(&ys, spacing[1]) {
        return Err(CliError::data(format!(
            "{}: raster spacing is not uniform",
            path.display()
        )));
    }
    let mut values = vec![0.0; nx * ny];
    for (at, v) in cells {
        let i = xs.iter().position(|x| *x == at[0]).unwrap();
        let j = ys.iter().position(|y| *y == at[1]).unwrap();
        values[j * nx + i] = *v;
    }
    Raster::new([xs[0], ys[0]], spacing, nx, ny, values).map_err(CliError::from)
}

/// Euclidean distances, or shortest paths on a road graph given as a node
/// CSV (`node,x,y`) and an edge CSV (`from,to,length`).
pub fn read_network(
    sites: (Vec<Year>, Vec<Vec<[f64; 2]>>),
    nodes: Option<&Path>,
    edges: Option<&Path>,
) -> Result<ServiceNetwork<f64>> {
    let source = match (nodes, edges) {
        (None, None) => DistanceSource::Euclidean,
        (Some(np), Some(ep)) => {
            let (h, rows) = records(np)?;
            let [id, x, y] = columns(&h, ["node", "x", "y"], np)?;
            let mut ids = Vec::new();
            let mut vertices = Vec::new();
            for (line, r) in &rows {
                ids.push(r[id].clone());
                vertices.push([parse_f64(&r[x], "x", np, *line)?, parse_f64(&r[y], "y", np, *line)?]);
            }
            let (h, rows) = records(ep)?;
            let [a, b, len] = columns(&h, ["from", "to", "length"], ep)?;
            let find = |s: &str, line: usize| {
                ids.iter()
                    .position(|v| v == s)
                    .ok_or_else(|| CliError::data(format!("{}:{line}: unknown node '{s}'", ep.display())))
            };
            let mut list = Vec::new();
            for (line, r) in &rows {
                list.push((
                    find(&r[a], *line)?,
                    find(&r[b], *line)?,
                    parse_f64(&r[len], "length", ep, *line)?,
                ));
            }
            DistanceSource::Graph(RoadGraph::new(vertices, &list)?)
        }
        _ => return Err(CliError::usage("--road-nodes and --road-edges must be given together")),
    };
    ServiceNetwork::new(sites.0, sites.1, source).map_err(CliError::from)
}
