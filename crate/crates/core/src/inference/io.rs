//! CSV renderings of bands and significance maps.
//!
//! Numbers use Rust's shortest round-trip formatting. Optional metadata is
//! written first as `# key=value` comment lines.

use std::fmt::Write;

use super::band::{BandGrid, ConfidenceBand};
use super::shape::significance_map;

fn header(meta: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        writeln!(out, "# {k}={v}").unwrap();
    }
    out
}

/// `t|s1,s2|t,s1,s2` columns followed by `center,lower,upper`.
pub fn band_csv(band: &ConfidenceBand, meta: &[(String, String)]) -> String {
    let mut out = header(meta);
    match &band.grid {
        BandGrid::Times(t) => {
            out.push_str("t,center,lower,upper\n");
            for (g, t) in t.iter().enumerate() {
                writeln!(out, "{t},{},{},{}", band.center[g], band.lower[g], band.upper[g]).unwrap();
            }
        }
        BandGrid::Locations(s) => {
            out.push_str("s1,s2,center,lower,upper\n");
            for (g, s) in s.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    s[0], s[1], band.center[g], band.lower[g], band.upper[g]
                )
                .unwrap();
            }
        }
        BandGrid::SpaceTime(p) => {
            out.push_str("t,s1,s2,center,lower,upper\n");
            for (g, (t, s)) in p.iter().enumerate() {
                writeln!(
                    out,
                    "{t},{},{},{},{},{}",
                    s[0], s[1], band.center[g], band.lower[g], band.upper[g]
                )
                .unwrap();
            }
        }
    }
    out
}

/// `location_id,label` for a band over locations.
pub fn significance_csv(ids: &[String], band: &ConfidenceBand, meta: &[(String, String)]) -> String {
    let mut out = header(meta);
    out.push_str("location_id,label\n");
    for (id, lab) in ids.iter().zip(significance_map(band)) {
        writeln!(out, "{id},{}", lab.label()).unwrap();
    }
    out
}
