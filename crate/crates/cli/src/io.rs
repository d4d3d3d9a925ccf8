//! File formats: panel CSVs, metadata headers and provenance.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use stvcm::multilevel::MultilevelPanel;
use stvcm::panel::SpaceTimePanel;

use crate::error::{code, CliError, Result};

pub const PANEL_FORMAT: &str = "stvcm.panel";
pub const MULTILEVEL_PANEL_FORMAT: &str = "stvcm.multilevel_panel";
pub const CSV_VERSION: u32 = 1;

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Identity of a run: hash of the command, its settings and the contents of
/// every input file, plus the seed.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub format: &'static str,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn meta(&self, extra: &[(&str, String)]) -> Vec<(String, String)> {
        let mut m = vec![
            ("format".to_string(), self.format.to_string()),
            ("version".to_string(), self.version.to_string()),
            ("config_hash".to_string(), self.config_hash.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        m.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        m
    }

    /// Adds `config_hash` and `seed` as the first members of a JSON object.
    pub fn stamp_json(&self, json: &str) -> String {
        debug_assert!(json.starts_with('{'));
        if let Some(rest) = json.strip_prefix("{\n") {
            format!(
                "{{\n  \"config_hash\": \"{}\",\n  \"seed\": {},\n{rest}",
                self.config_hash, self.seed
            )
        } else {
            format!(
                "{{\"config_hash\":\"{}\",\"seed\":{},{}",
                self.config_hash,
                self.seed,
                &json[1..]
            )
        }
    }
}

pub fn meta_header(meta: &[(String, String)]) -> String {
    meta.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

/// `# key=value` lines at the top of a CSV file.
pub fn leading_meta(text: &str) -> Vec<(String, String)> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.trim_start_matches('#').trim().split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Rejects a declared format or version other than the expected one.
pub fn check_format(meta: &[(String, String)], format: &str, version: u32, path: &Path) -> Result<()> {
    for (k, v) in meta {
        let bad = match k.as_str() {
            "format" => v != format,
            "version" => v.parse::<u32>() != Ok(version),
            _ => false,
        };
        if bad {
            return Err(CliError::new(
                code::VERSION,
                format!("{}: expected {format} version {version}, found {k}={v}", path.display()),
            ));
        }
    }
    Ok(())
}

/// Version check for JSON artifacts before full parsing.
pub fn json_head(text: &str, path: &Path) -> Result<(String, u32)> {
    #[derive(serde::Deserialize)]
    struct Head {
        format: String,
        version: u32,
    }
    let h: Head = serde_json::from_str(text)
        .map_err(|e| CliError::data(format!("{}: not a versioned artifact: {e}", path.display())))?;
    Ok((h.format, h.version))
}

struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(text: &str, path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
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
    Ok(Table { header, rows })
}

impl Table {
    fn column(&self, name: &str, path: &Path) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(format!("{}: missing column '{name}'", path.display())))
    }
}

pub fn parse_f64(s: &str, what: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| CliError::data(format!("{}:{line}: {what} '{s}' is not a number", path.display())))?;
    if !v.is_finite() {
        return Err(CliError::data(format!(
            "{}:{line}: {what} must be finite",
            path.display()
        )));
    }
    Ok(v)
}

fn parse_response(s: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        Ok(None)
    } else {
        parse_f64(s, "response", path, line).map(Some)
    }
}

/// Grid shared by the panel formats.
struct GridIndex {
    location_ids: Vec<String>,
    locations: Vec<[f64; 2]>,
    times: Vec<f64>,
    loc: HashMap<String, usize>,
}

impl GridIndex {
    fn build(table: &Table, cols: [usize; 4], path: &Path) -> Result<Self> {
        let [id, s1, s2, t] = cols;
        let mut g = GridIndex {
            location_ids: Vec::new(),
            locations: Vec::new(),
            times: Vec::new(),
            loc: HashMap::new(),
        };
        for (line, r) in &table.rows {
            let at = [
                parse_f64(&r[s1], "s1", path, *line)?,
                parse_f64(&r[s2], "s2", path, *line)?,
            ];
            match g.loc.get(&r[id]) {
                Some(&j) if g.locations[j] != at => {
                    return Err(CliError::data(format!(
                        "{}:{line}: location '{}' has inconsistent coordinates",
                        path.display(),
                        r[id]
                    )))
                }
                Some(_) => {}
                None => {
                    g.loc.insert(r[id].clone(), g.location_ids.len());
                    g.location_ids.push(r[id].clone());
                    g.locations.push(at);
                }
            }
            let tv = parse_f64(&r[t], "time", path, *line)?;
            if !g.times.contains(&tv) {
                g.times.push(tv);
            }
        }
        g.times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if g.location_ids.is_empty() {
            return Err(CliError::data(format!("{}: no rows", path.display())));
        }
        Ok(g)
    }

    fn cell(&self, id: &str, t: f64) -> usize {
        let i = self.times.iter().position(|v| *v == t).unwrap();
        i * self.locations.len() + self.loc[id]
    }

    fn n_cells(&self) -> usize {
        self.times.len() * self.locations.len()
    }
}

fn covariate_columns(table: &Table, skip: &[usize]) -> Vec<usize> {
    (0..table.header.len()).filter(|c| !skip.contains(c)).collect()
}

/// Panel CSV: `location_id,s1,s2,time,y` followed by one column per
/// covariate; every (location, time) pair exactly once; empty `y` is missing.
pub fn read_panel(path: &Path) -> Result<SpaceTimePanel<f64>> {
    let text = read_text(path)?;
    check_format(&leading_meta(&text), PANEL_FORMAT, CSV_VERSION, path)?;
    let table = read_table(&text, path)?;
    let mut idx = Vec::new();
    for c in ["location_id", "s1", "s2", "time", "y"] {
        idx.push(table.column(c, path)?);
    }
    let (id, s1, s2, t, y) = (idx[0], idx[1], idx[2], idx[3], idx[4]);
    let xcols = covariate_columns(&table, &idx);
    if xcols.is_empty() {
        return Err(CliError::data(format!("{}: no covariate columns", path.display())));
    }
    let grid = GridIndex::build(&table, [id, s1, s2, t], path)?;
    let n = grid.n_cells();
    let mut response = vec![None; n];
    let mut covariates = vec![vec![f64::NAN; n]; xcols.len()];
    let mut seen = vec![false; n];
    for (line, r) in &table.rows {
        let c = grid.cell(&r[id], r[t].parse().unwrap());
        if std::mem::replace(&mut seen[c], true) {
            return Err(CliError::data(format!(
                "{}:{line}: duplicate (location, time) row",
                path.display()
            )));
        }
        response[c] = parse_response(&r[y], path, *line)?;
        for (k, &xc) in xcols.iter().enumerate() {
            covariates[k][c] = parse_f64(&r[xc], &table.header[xc], path, *line)?;
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(CliError::data(format!(
            "{}: no row for location '{}' at time {}",
            path.display(),
            grid.location_ids[c % grid.locations.len()],
            grid.times[c / grid.locations.len()]
        )));
    }
    SpaceTimePanel::new(grid.location_ids, grid.locations, grid.times, response, covariates)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Multilevel panel CSV: `provider` first, then the panel columns.
/// Covariates must agree across providers.
pub fn read_multilevel_panel(path: &Path) -> Result<MultilevelPanel<f64>> {
    let text = read_text(path)?;
    check_format(&leading_meta(&text), MULTILEVEL_PANEL_FORMAT, CSV_VERSION, path)?;
    let table = read_table(&text, path)?;
    let mut idx = Vec::new();
    for c in ["provider", "location_id", "s1", "s2", "time", "y"] {
        idx.push(table.column(c, path)?);
    }
    let (pc, id, s1, s2, t, y) = (idx[0], idx[1], idx[2], idx[3], idx[4], idx[5]);
    let xcols = covariate_columns(&table, &idx);
    if xcols.is_empty() {
        return Err(CliError::data(format!("{}: no covariate columns", path.display())));
    }
    let grid = GridIndex::build(&table, [id, s1, s2, t], path)?;
    let n = grid.n_cells();
    let mut providers: Vec<String> = Vec::new();
    for (_, r) in &table.rows {
        if !providers.contains(&r[pc]) {
            providers.push(r[pc].clone());
        }
    }
    let np = providers.len();
    let mut responses = vec![vec![None; n]; np];
    let mut covariates = vec![vec![f64::NAN; n]; xcols.len()];
    let mut seen = vec![vec![false; n]; np];
    for (line, r) in &table.rows {
        let p = providers.iter().position(|v| *v == r[pc]).unwrap();
        let c = grid.cell(&r[id], r[t].parse().unwrap());
        if std::mem::replace(&mut seen[p][c], true) {
            return Err(CliError::data(format!(
                "{}:{line}: duplicate (provider, location, time) row",
                path.display()
            )));
        }
        responses[p][c] = parse_response(&r[y], path, *line)?;
        for (k, &xc) in xcols.iter().enumerate() {
            let v = parse_f64(&r[xc], &table.header[xc], path, *line)?;
            if covariates[k][c].is_nan() {
                covariates[k][c] = v;
            } else if covariates[k][c] != v {
                return Err(CliError::data(format!(
                    "{}:{line}: covariate '{}' differs between providers",
                    path.display(),
                    table.header[xc]
                )));
            }
        }
    }
    for (p, s) in seen.iter().enumerate() {
        if let Some(c) = s.iter().position(|v| !v) {
            return Err(CliError::data(format!(
                "{}: provider '{}' has no row for location '{}' at time {}",
                path.display(),
                providers[p],
                grid.location_ids[c % grid.locations.len()],
                grid.times[c / grid.locations.len()]
            )));
        }
    }
    MultilevelPanel::new(
        providers,
        grid.location_ids,
        grid.locations,
        grid.times,
        responses,
        covariates,
    )
    .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn covariate_header(r: usize) -> String {
    (1..=r).map(|k| format!(",x{k}")).collect()
}

pub fn panel_csv(panel: &SpaceTimePanel<f64>, meta: &[(String, String)]) -> String {
    let mut out = meta_header(meta);
    writeln!(
        out,
        "location_id,s1,s2,time,y{}",
        covariate_header(panel.n_predictors())
    )
    .unwrap();
    for c in 0..panel.n_cells() {
        let (i, j) = panel.cell_coords(c);
        let s = panel.locations[j];
        write!(
            out,
            "{},{},{},{},{}",
            panel.location_ids[j],
            s[0],
            s[1],
            panel.times[i],
            opt(panel.response[c])
        )
        .unwrap();
        for x in &panel.covariates {
            write!(out, ",{}", x[c]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn multilevel_panel_csv(panel: &MultilevelPanel<f64>, meta: &[(String, String)]) -> String {
    let mut out = meta_header(meta);
    writeln!(
        out,
        "provider,location_id,s1,s2,time,y{}",
        covariate_header(panel.n_predictors())
    )
    .unwrap();
    let s = panel.locations.len();
    for (p, name) in panel.providers.iter().enumerate() {
        for c in 0..s * panel.times.len() {
            let (i, j) = (c / s, c % s);
            let at = panel.locations[j];
            write!(
                out,
                "{name},{},{},{},{},{}",
                panel.location_ids[j],
                at[0],
                at[1],
                panel.times[i],
                opt(panel.responses[p][c])
            )
            .unwrap();
            for x in &panel.covariates {
                write!(out, ",{}", x[c]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}
