//! Knot placement and knot layouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BasisError;
use crate::rng::{stream, Domain};
use crate::scalar::{dist2d, Scalar};

pub const KNOTS_FORMAT: &str = "stvcm.knots";
pub const KNOTS_VERSION: u32 = 1;

/// Knots of one provider-deviation family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KnotFamily<T> {
    pub temporal: Vec<T>,
    pub spatial: Vec<[T; 2]>,
}

/// A cross-family knot pair closer than the required separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotConflict {
    pub family_a: usize,
    pub knot_a: usize,
    pub family_b: usize,
    pub knot_b: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Separation {
    pub temporal: Vec<KnotConflict>,
    pub spatial: Vec<KnotConflict>,
}

impl Separation {
    pub fn is_clear(&self) -> bool {
        self.temporal.is_empty() && self.spatial.is_empty()
    }
}

/// Temporal and spatial knots. Family 0 is the global family
/// (`temporal`, `spatial`); `providers[p - 1]` is family `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KnotLayout<T> {
    pub temporal: Vec<T>,
    pub spatial: Vec<[T; 2]>,
    #[serde(default)]
    pub providers: Vec<KnotFamily<T>>,
    pub min_temporal_sep: Option<T>,
    pub min_spatial_sep: Option<T>,
    pub seed: Option<u64>,
}

fn check_family<T: Scalar>(temporal: &[T], spatial: &[[T; 2]]) -> Result<(), BasisError> {
    if temporal.is_empty() || spatial.is_empty() {
        return Err(BasisError::InvalidKnots(
            "need at least one temporal and one spatial knot".into(),
        ));
    }
    if temporal.iter().any(|t| !t.is_finite()) || spatial.iter().any(|s| !s[0].is_finite() || !s[1].is_finite()) {
        return Err(BasisError::InvalidKnots("knots must be finite".into()));
    }
    if temporal.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BasisError::InvalidKnots(
            "temporal knots must be strictly increasing".into(),
        ));
    }
    for i in 0..spatial.len() {
        for j in 0..i {
            if spatial[i] == spatial[j] {
                return Err(BasisError::InvalidKnots(format!("spatial knots {j} and {i} coincide")));
            }
        }
    }
    Ok(())
}

impl<T: Scalar> KnotLayout<T> {
    /// Single-level layout.
    pub fn new(temporal: Vec<T>, spatial: Vec<[T; 2]>) -> Result<Self, BasisError> {
        check_family(&temporal, &spatial)?;
        Ok(Self {
            temporal,
            spatial,
            providers: Vec::new(),
            min_temporal_sep: None,
            min_spatial_sep: None,
            seed: None,
        })
    }

    /// Layout with provider families; rejected unless every cross-family
    /// pair is separated by more than `d_t` (time) and `d_s` (space).
    pub fn with_providers(
        temporal: Vec<T>,
        spatial: Vec<[T; 2]>,
        providers: Vec<KnotFamily<T>>,
        d_t: T,
        d_s: T,
    ) -> Result<Self, BasisError> {
        check_family(&temporal, &spatial)?;
        for f in &providers {
            check_family(&f.temporal, &f.spatial)?;
            if f.temporal.len() != temporal.len() || f.spatial.len() != spatial.len() {
                return Err(BasisError::InvalidKnots(
                    "every family must have the same knot counts".into(),
                ));
            }
        }
        if !(d_t > T::zero()) || !(d_s > T::zero()) {
            return Err(BasisError::InvalidKnots("separation distances must be positive".into()));
        }
        let layout = Self {
            temporal,
            spatial,
            providers,
            min_temporal_sep: Some(d_t),
            min_spatial_sep: Some(d_s),
            seed: None,
        };
        let sep = layout.separation();
        if !sep.is_clear() {
            return Err(BasisError::Identifiability(sep));
        }
        Ok(layout)
    }

    pub fn m(&self) -> usize {
        self.temporal.len()
    }

    pub fn n(&self) -> usize {
        self.spatial.len()
    }

    pub fn n_families(&self) -> usize {
        1 + self.providers.len()
    }

    pub fn family_temporal(&self, family: usize) -> &[T] {
        if family == 0 {
            &self.temporal
        } else {
            &self.providers[family - 1].temporal
        }
    }

    pub fn family_spatial(&self, family: usize) -> &[[T; 2]] {
        if family == 0 {
            &self.spatial
        } else {
            &self.providers[family - 1].spatial
        }
    }

    /// Exhaustive check of every cross-family knot pair.
    pub fn separation(&self) -> Separation {
        let mut out = Separation::default();
        let (Some(dt), Some(ds)) = (self.min_temporal_sep, self.min_spatial_sep) else {
            return out;
        };
        let fam = self.n_families();
        for a in 0..fam {
            for b in (a + 1)..fam {
                for (i, ta) in self.family_temporal(a).iter().enumerate() {
                    for (j, tb) in self.family_temporal(b).iter().enumerate() {
                        let gap = (*ta - *tb).abs();
                        if !(gap > dt) {
                            out.temporal.push(KnotConflict {
                                family_a: a,
                                knot_a: i,
                                family_b: b,
                                knot_b: j,
                                gap: gap.as_f64(),
                            });
                        }
                    }
                }
                for (i, sa) in self.family_spatial(a).iter().enumerate() {
                    for (j, sb) in self.family_spatial(b).iter().enumerate() {
                        let gap = dist2d(sa, sb);
                        if !(gap > ds) {
                            out.spatial.push(KnotConflict {
                                family_a: a,
                                knot_a: i,
                                family_b: b,
                                knot_b: j,
                                gap: gap.as_f64(),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// True when the provider families (if any) are pairwise separated.
    pub fn identifiable(&self) -> bool {
        self.providers.is_empty() || (self.min_temporal_sep.is_some() && self.separation().is_clear())
    }

    pub fn to_json(&self) -> String {
        let doc = KnotDocument {
            format: KNOTS_FORMAT.to_string(),
            version: KNOTS_VERSION,
            layout: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("knot layout serializes")
    }

    /// Parses and re-validates a versioned knot document.
    pub fn from_json(text: &str) -> Result<Self, BasisError> {
        let doc: KnotDocument<T> = serde_json::from_str(text).map_err(|e| BasisError::Format(e.to_string()))?;
        if doc.format != KNOTS_FORMAT || doc.version != KNOTS_VERSION {
            return Err(BasisError::Version {
                found: format!("{} v{}", doc.format, doc.version),
                expected: format!("{KNOTS_FORMAT} v{KNOTS_VERSION}"),
            });
        }
        let l = doc.layout;
        let mut out = if l.providers.is_empty() {
            KnotLayout::new(l.temporal, l.spatial)?
        } else {
            let dt = l
                .min_temporal_sep
                .ok_or_else(|| BasisError::InvalidKnots("missing temporal separation".into()))?;
            let ds = l
                .min_spatial_sep
                .ok_or_else(|| BasisError::InvalidKnots("missing spatial separation".into()))?;
            KnotLayout::with_providers(l.temporal, l.spatial, l.providers, dt, ds)?
        };
        out.seed = l.seed;
        if out.providers.is_empty() {
            out.min_temporal_sep = l.min_temporal_sep;
            out.min_spatial_sep = l.min_spatial_sep;
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct KnotDocument<T> {
    format: String,
    version: u32,
    layout: KnotLayout<T>,
}

/// Sorted distinct values.
fn distinct_sorted<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut v: Vec<T> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

/// `m` knots at the sample quantiles `k / (m + 1)` of the distinct times
/// (linear interpolation between order statistics).
pub fn select_temporal_knots<T: Scalar>(times: &[T], m: usize) -> Result<Vec<T>, BasisError> {
    if m == 0 {
        return Err(BasisError::InvalidKnots("need at least one temporal knot".into()));
    }
    let v = distinct_sorted(times);
    if v.len() < m {
        return Err(BasisError::InsufficientDistinct {
            needed: m,
            available: v.len(),
        });
    }
    if v.len() == 1 {
        return Ok(v);
    }
    let last = T::from_count(v.len() - 1);
    let knots = (1..=m)
        .map(|k| {
            let pos = T::from_count(k) / T::from_count(m + 1) * last;
            let lo = pos.floor().as_f64() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            let frac = pos - T::from_count(lo);
            v[lo] + (v[hi] - v[lo]) * frac
        })
        .collect();
    Ok(knots)
}

/// Distinct locations in first-seen order.
fn distinct_points<T: Scalar>(points: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut out: Vec<[T; 2]> = Vec::new();
    for p in points {
        if !out.contains(p) {
            out.push(*p);
        }
    }
    out
}

/// Largest distance from any point to its nearest knot.
pub fn coverage_radius<T: Scalar>(points: &[[T; 2]], knots: &[[T; 2]]) -> T {
    points.iter().fold(T::zero(), |worst, p| {
        let near = knots.iter().fold(T::max_value().unwrap(), |m, k| m.min(dist2d(p, k)));
        worst.max(near)
    })
}

/// `n` spatial knots chosen among the distinct locations: k-means++ seeding,
/// Lloyd iterations snapped back to locations, then single-knot swaps that
/// reduce the coverage radius (ties broken by the summed squared coverage).
pub fn select_spatial_knots<T: Scalar>(locations: &[[T; 2]], n: usize, seed: u64) -> Result<Vec<[T; 2]>, BasisError> {
    let cand = distinct_points(locations);
    if n == 0 {
        return Err(BasisError::InvalidKnots("need at least one spatial knot".into()));
    }
    if n > cand.len() {
        return Err(BasisError::InsufficientDistinct {
            needed: n,
            available: cand.len(),
        });
    }
    let c = cand.len();
    if n == c {
        return Ok(cand);
    }
    let d: Vec<T> = (0..c * c).map(|k| dist2d(&cand[k / c], &cand[k % c])).collect();
    let dist = |a: usize, b: usize| d[a * c + b];

    // k-means++ seeding
    let mut rng = stream(seed, Domain::Knots, 0);
    let mut chosen = vec![rng.random_range(0..c)];
    let mut near: Vec<T> = (0..c).map(|i| dist(i, chosen[0])).collect();
    while chosen.len() < n {
        let total: f64 = near.iter().map(|v| v.as_f64().powi(2)).sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = c - 1;
            for (i, v) in near.iter().enumerate() {
                target -= v.as_f64().powi(2);
                if target <= 0.0 && !chosen.contains(&i) {
                    pick = i;
                    break;
                }
            }
            if chosen.contains(&pick) {
                (0..c).find(|i| !chosen.contains(i)).unwrap()
            } else {
                pick
            }
        } else {
            (0..c).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, d) in near.iter_mut().enumerate() {
            *d = d.min(dist(i, next));
        }
    }

    // Lloyd iterations with centers snapped to candidate locations
    for _ in 0..25 {
        let mut sums = vec![[T::zero(), T::zero()]; n];
        let mut counts = vec![0usize; n];
        for (i, p) in cand.iter().enumerate() {
            let k = (0..n)
                .min_by(|&a, &b| dist(i, chosen[a]).partial_cmp(&dist(i, chosen[b])).unwrap())
                .unwrap();
            sums[k][0] += p[0];
            sums[k][1] += p[1];
            counts[k] += 1;
        }
        let mut next: Vec<usize> = Vec::with_capacity(n);
        for k in 0..n {
            if counts[k] == 0 {
                next.push(chosen[k]);
                continue;
            }
            let cnt = T::from_count(counts[k]);
            let centroid = [sums[k][0] / cnt, sums[k][1] / cnt];
            let snapped = (0..c)
                .filter(|i| !next.contains(i))
                .min_by(|&a, &b| {
                    dist2d(&cand[a], &centroid)
                        .partial_cmp(&dist2d(&cand[b], &centroid))
                        .unwrap()
                })
                .unwrap();
            next.push(snapped);
        }
        if next == chosen {
            break;
        }
        chosen = next;
    }

    minimax_swaps(&d, c, &mut chosen);
    Ok(chosen.into_iter().map(|i| cand[i]).collect())
}

/// Greedy best-improvement swap search on the coverage radius.
fn minimax_swaps<T: Scalar>(d: &[T], c: usize, chosen: &mut [usize]) {
    let n = chosen.len();
    let dist = |a: usize, b: usize| d[a * c + b];
    let score = |knots: &[usize]| -> (T, T) {
        let mut worst = T::zero();
        let mut sum = T::zero();
        for i in 0..c {
            let m = knots.iter().fold(T::max_value().unwrap(), |m, &k| m.min(dist(i, k)));
            worst = worst.max(m);
            sum += m * m;
        }
        (worst, sum)
    };
    let better = |a: (T, T), b: (T, T)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    let mut current = score(chosen);
    for _ in 0..200 {
        // nearest and second-nearest knot slot for each location
        let mut first = vec![(T::max_value().unwrap(), 0usize); c];
        let mut second = vec![T::max_value().unwrap(); c];
        for i in 0..c {
            for (slot, &k) in chosen.iter().enumerate() {
                let v = dist(i, k);
                if v < first[i].0 {
                    second[i] = first[i].0;
                    first[i] = (v, slot);
                } else if v < second[i] {
                    second[i] = v;
                }
            }
        }
        let mut best: Option<(usize, usize, (T, T))> = None;
        for slot in 0..n {
            for cand in 0..c {
                if chosen.contains(&cand) {
                    continue;
                }
                let mut worst = T::zero();
                let mut sum = T::zero();
                for i in 0..c {
                    let keep = if first[i].1 == slot { second[i] } else { first[i].0 };
                    let m = keep.min(dist(i, cand));
                    worst = worst.max(m);
                    sum += m * m;
                }
                let s = (worst, sum);
                let target = best.map(|b| b.2).unwrap_or(current);
                if better(s, target) {
                    best = Some((slot, cand, s));
                }
            }
        }
        match best {
            Some((slot, cand, s)) => {
                chosen[slot] = cand;
                current = s;
            }
            None => break,
        }
    }
}

/// Certified provider knot families around `base`.
///
/// Family `f` (0 = global) is `base` shifted by `f` steps: in time by `f·step_t`,
/// in space by `f·step_s` along a seed-chosen direction. Steps are `2 d`
/// when that keeps neighbouring base knots apart, otherwise the spacing is
/// split evenly across the `P + 1` families.
pub fn separate_knots<T: Scalar>(
    base: &KnotLayout<T>,
    providers: usize,
    d_t: T,
    d_s: T,
    seed: u64,
) -> Result<KnotLayout<T>, BasisError> {
    if providers == 0 {
        return Err(BasisError::InvalidKnots("need at least one provider".into()));
    }
    if !(d_t > T::zero()) || !(d_s > T::zero()) {
        return Err(BasisError::InvalidKnots("separation distances must be positive".into()));
    }
    let fams = T::from_count(providers + 1);
    let p = T::from_count(providers);
    let two = T::lit(2.0);

    let spacing_t = base
        .temporal
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.min(v))));
    let step_t = match spacing_t {
        None => two * d_t,
        Some(sp) => {
            if !(d_t < sp / fams) {
                return Err(BasisError::InfeasibleSeparation(format!(
                    "temporal separation {} needs knot spacing above {} for {} families; use fewer temporal knots or a smaller separation",
                    d_t.as_f64(),
                    (d_t * fams).as_f64(),
                    providers + 1
                )));
            }
            if sp - p * two * d_t > d_t {
                two * d_t
            } else {
                sp / fams
            }
        }
    };

    let mut spacing_s: Option<T> = None;
    for i in 0..base.spatial.len() {
        for j in 0..i {
            let v = dist2d(&base.spatial[i], &base.spatial[j]);
            spacing_s = Some(spacing_s.map_or(v, |m: T| m.min(v)));
        }
    }
    let step_s = match spacing_s {
        None => two * d_s,
        Some(sp) => {
            if !(d_s < sp / fams) {
                return Err(BasisError::InfeasibleSeparation(format!(
                    "spatial separation {} needs knot spacing above {} for {} families; use fewer spatial knots or a smaller separation",
                    d_s.as_f64(),
                    (d_s * fams).as_f64(),
                    providers + 1
                )));
            }
            if sp - p * two * d_s > d_s {
                two * d_s
            } else {
                sp / fams
            }
        }
    };

    let angle: f64 = stream(seed, Domain::Knots, 1).random::<f64>() * std::f64::consts::TAU;
    let dir = [T::lit(angle.cos()), T::lit(angle.sin())];
    let families = (1..=providers)
        .map(|f| {
            let ft = T::from_count(f);
            KnotFamily {
                temporal: base.temporal.iter().map(|t| *t + ft * step_t).collect(),
                spatial: base
                    .spatial
                    .iter()
                    .map(|s| [s[0] + ft * step_s * dir[0], s[1] + ft * step_s * dir[1]])
                    .collect(),
            }
        })
        .collect();
    let mut layout = KnotLayout::with_providers(base.temporal.clone(), base.spatial.clone(), families, d_t, d_s)
        .map_err(|e| match e {
            BasisError::Identifiability(sep) => BasisError::InfeasibleSeparation(format!(
                "{} temporal and {} spatial knot pairs too close; use fewer knots or a smaller separation",
                sep.temporal.len(),
                sep.spatial.len()
            )),
            other => other,
        })?;
    layout.seed = Some(seed);
    Ok(layout)
}

/// Separation defaults: a quarter of the knot spacing split across the
/// `P + 1` families (nearest-neighbour spacing in space).
pub fn default_separation<T: Scalar>(base: &KnotLayout<T>, providers: usize) -> (T, T) {
    let fams = T::from_count(providers + 1);
    let quarter = T::lit(0.25);
    let sp_t = base
        .temporal
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.min(v))))
        .unwrap_or(T::one());
    let mut sp_s: Option<T> = None;
    for i in 0..base.spatial.len() {
        for j in 0..i {
            let v = dist2d(&base.spatial[i], &base.spatial[j]);
            sp_s = Some(sp_s.map_or(v, |m: T| m.min(v)));
        }
    }
    (quarter * sp_t / fams, quarter * sp_s.unwrap_or(T::one()) / fams)
}
