//! Fixed and random design matrices.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kernels::{BasisConfig, SpatialKernel, TemporalKernel};
use super::knots::KnotLayout;
use super::BasisError;
use crate::panel::SpaceTimePanel;
use crate::scalar::Scalar;

/// Fixed-effect columns per predictor: `1, t, s1, s2`, each scaled by `X_r`.
pub const FIXED_PER_PREDICTOR: usize = 4;
pub const FIXED_NAMES: [&str; FIXED_PER_PREDICTOR] = ["tau0", "tau1", "delta11", "delta12"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Temporal,
    Spatial,
    Interaction,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Temporal, BlockKind::Spatial, BlockKind::Interaction];

    pub fn label(self) -> &'static str {
        match self {
            BlockKind::Temporal => "temporal",
            BlockKind::Spatial => "spatial",
            BlockKind::Interaction => "interaction",
        }
    }
}

/// A contiguous range of random-effect columns sharing one variance component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomBlock {
    pub predictor: usize,
    pub kind: BlockKind,
    /// Knot family (0 = global, `p + 1` = provider `p`).
    pub family: usize,
    /// Index of the variance component the block draws from.
    pub component: usize,
    pub columns: Range<usize>,
}

/// Design of a fitted panel with rows for the observed cells only.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices<T: Scalar> {
    pub fixed: DMatrix<T>,
    pub random: DMatrix<T>,
    pub response: DVector<T>,
    pub fixed_names: Vec<String>,
    pub blocks: Vec<RandomBlock>,
    /// Names of the variance components, indexed by `RandomBlock::component`.
    pub components: Vec<String>,
    /// Panel cell of each row.
    pub rows: Vec<usize>,
    /// Cells without an observed response.
    pub dropped: Vec<usize>,
    pub knots: KnotLayout<T>,
    pub config: BasisConfig,
}

impl<T: Scalar> DesignMatrices<T> {
    pub fn n_rows(&self) -> usize {
        self.fixed.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.ncols()
    }

    pub fn n_random(&self) -> usize {
        self.random.ncols()
    }

    /// Column range of a global block.
    pub fn block_index(&self, predictor: usize, kind: BlockKind) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|b| b.predictor == predictor && b.kind == kind && b.family == 0)
            .map(|b| b.columns.clone())
    }

    /// Range of the fixed columns of a predictor.
    pub fn fixed_index(&self, predictor: usize) -> Range<usize> {
        predictor * FIXED_PER_PREDICTOR..(predictor + 1) * FIXED_PER_PREDICTOR
    }

    /// Columns belonging to each variance component.
    pub fn component_columns(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.components.len()];
        for b in &self.blocks {
            out[b.component].extend(b.columns.clone());
        }
        out
    }
}

/// `times × knots` matrix of temporal kernel values.
pub fn temporal_matrix<T: Scalar>(times: &[T], knots: &[T], kernel: TemporalKernel) -> DMatrix<T> {
    DMatrix::from_fn(times.len(), knots.len(), |i, m| kernel.eval(times[i], knots[m]))
}

/// `locations × knots` matrix of spatial kernel values.
pub fn spatial_matrix<T: Scalar>(locations: &[[T; 2]], knots: &[[T; 2]], kernel: SpatialKernel) -> DMatrix<T> {
    DMatrix::from_fn(locations.len(), knots.len(), |j, n| {
        kernel.eval(&locations[j], &knots[n])
    })
}

/// Writes `x · [kt ⊗ ks]` into `out` (length `M·N`, index `m·N + n`).
#[inline]
pub fn interaction_row<T: Scalar>(kt: &[T], ks: &[T], x: T, out: &mut [T]) {
    let n = ks.len();
    for (m, a) in kt.iter().enumerate() {
        let a = *a * x;
        for (o, b) in out[m * n..(m + 1) * n].iter_mut().zip(ks) {
            *o = a * *b;
        }
    }
}

/// Column layout of the random part for `R` predictors with `M`, `N` knots
/// and the global knot family only.
pub fn single_level_blocks(r: usize, m: usize, n: usize) -> (Vec<RandomBlock>, Vec<String>) {
    let mut blocks = Vec::with_capacity(3 * r);
    let mut names = Vec::with_capacity(3 * r);
    let mut col = 0;
    for p in 0..r {
        for kind in BlockKind::ALL {
            let width = match kind {
                BlockKind::Temporal => m,
                BlockKind::Spatial => n,
                BlockKind::Interaction => m * n,
            };
            blocks.push(RandomBlock {
                predictor: p,
                kind,
                family: 0,
                component: names.len(),
                columns: col..col + width,
            });
            names.push(format!("{}[{}]", kind.label(), p + 1));
            col += width;
        }
    }
    (blocks, names)
}

pub fn fixed_names(r: usize) -> Vec<String> {
    (0..r)
        .flat_map(|p| FIXED_NAMES.iter().map(move |n| format!("{n}[{}]", p + 1)))
        .collect()
}

/// Builds the design with the default cubic and thin-plate kernels.
pub fn assemble_design<T: Scalar>(
    panel: &SpaceTimePanel<T>,
    knots: &KnotLayout<T>,
) -> Result<DesignMatrices<T>, BasisError> {
    assemble_design_with(panel, knots, &BasisConfig::default())
}

/// Builds `𝒳` and `𝒵` over the observed cells of `panel`.
///
/// Per predictor `r` the fixed columns are `X_r·[1, t, s1, s2]` and the
/// random columns are `X_r·K_T`, `X_r·K_S` and the row-wise product
/// `X_r·(K_T ⊙ K_S)` ordered `m·N + n`.
pub fn assemble_design_with<T: Scalar>(
    panel: &SpaceTimePanel<T>,
    knots: &KnotLayout<T>,
    config: &BasisConfig,
) -> Result<DesignMatrices<T>, BasisError> {
    let cells = panel.n_cells();
    if panel.response.len() != cells || panel.covariates.iter().any(|c| c.len() != cells) {
        return Err(BasisError::Dimension(format!(
            "panel has {} cells but the response or a covariate has a different length",
            cells
        )));
    }
    let rows = panel.observed_cells();
    if rows.is_empty() {
        return Err(BasisError::NoObservations);
    }
    let dropped: Vec<usize> = (0..cells).filter(|c| rows.binary_search(c).is_err()).collect();
    let r = panel.n_predictors();
    let (m, n) = (knots.m(), knots.n());
    let kt = temporal_matrix(&panel.times, &knots.temporal, config.temporal);
    let ks = spatial_matrix(&panel.locations, &knots.spatial, config.spatial);
    let (blocks, components) = single_level_blocks(r, m, n);
    let q = r * (m + n + m * n);
    let nrow = rows.len();

    let mut fixed = DMatrix::zeros(nrow, FIXED_PER_PREDICTOR * r);
    // filled row-major then transposed into column-major storage
    let mut z_t = DMatrix::zeros(q, nrow);
    let mut kt_row = vec![T::zero(); m];
    let mut ks_row = vec![T::zero(); n];
    for (row, &cell) in rows.iter().enumerate() {
        let (i, j) = panel.cell_coords(cell);
        let t = panel.times[i];
        let s = panel.locations[j];
        for (a, v) in kt_row.iter_mut().enumerate() {
            *v = kt[(i, a)];
        }
        for (a, v) in ks_row.iter_mut().enumerate() {
            *v = ks[(j, a)];
        }
        let zc = z_t.column_mut(row);
        let zc = zc.data.into_slice_mut();
        for p in 0..r {
            let x = panel.covariates[p][cell];
            let f = p * FIXED_PER_PREDICTOR;
            fixed[(row, f)] = x;
            fixed[(row, f + 1)] = x * t;
            fixed[(row, f + 2)] = x * s[0];
            fixed[(row, f + 3)] = x * s[1];
            let base = p * (m + n + m * n);
            for a in 0..m {
                zc[base + a] = x * kt_row[a];
            }
            for b in 0..n {
                zc[base + m + b] = x * ks_row[b];
            }
            interaction_row(&kt_row, &ks_row, x, &mut zc[base + m + n..base + m + n + m * n]);
        }
    }
    let random = z_t.transpose();
    if fixed.iter().chain(random.iter()).any(|v| !v.is_finite()) {
        return Err(BasisError::NonFinite);
    }
    let response = DVector::from_iterator(nrow, rows.iter().map(|&c| panel.response[c].unwrap()));
    Ok(DesignMatrices {
        fixed,
        random,
        response,
        fixed_names: fixed_names(r),
        blocks,
        components,
        rows,
        dropped,
        knots: knots.clone(),
        config: *config,
    })
}

/// Rows of `[1, t, s1, s2]` and of the unit-covariate random columns
/// `[K_T(t), K_S(s), K_T(t) ⊗ K_S(s)]` for one predictor at each grid point.
pub fn coefficient_rows<T: Scalar>(
    temporal_knots: &[T],
    spatial_knots: &[[T; 2]],
    config: &BasisConfig,
    grid: &[(T, [T; 2])],
) -> (DMatrix<T>, DMatrix<T>) {
    let (m, n) = (temporal_knots.len(), spatial_knots.len());
    let fixed = DMatrix::from_fn(grid.len(), FIXED_PER_PREDICTOR, |g, c| match c {
        0 => T::one(),
        1 => grid[g].0,
        2 => grid[g].1[0],
        _ => grid[g].1[1],
    });
    let mut z_t = DMatrix::zeros(m + n + m * n, grid.len());
    let mut kt = vec![T::zero(); m];
    let mut ks = vec![T::zero(); n];
    for (g, (t, s)) in grid.iter().enumerate() {
        for (v, k) in kt.iter_mut().zip(temporal_knots) {
            *v = config.temporal.eval(*t, *k);
        }
        for (v, k) in ks.iter_mut().zip(spatial_knots) {
            *v = config.spatial.eval(s, k);
        }
        let col = z_t.column_mut(g);
        let col = col.data.into_slice_mut();
        col[..m].copy_from_slice(&kt);
        col[m..m + n].copy_from_slice(&ks);
        interaction_row(&kt, &ks, T::one(), &mut col[m + n..]);
    }
    (fixed, z_t.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::kernels::{spatial_kernel, temporal_kernel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_panel(seed: u64, s: usize, t: usize, r: usize) -> SpaceTimePanel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locations: Vec<[f64; 2]> = (0..s).map(|_| [rng.random(), rng.random()]).collect();
        let times: Vec<f64> = (1..=t).map(|v| v as f64).collect();
        let response = (0..s * t).map(|_| Some(rng.random::<f64>())).collect();
        let covariates = (0..r)
            .map(|_| (0..s * t).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        SpaceTimePanel::new(
            (0..s).map(|j| format!("L{j}")).collect(),
            locations,
            times,
            response,
            covariates,
        )
        .unwrap()
    }

    fn naive(panel: &SpaceTimePanel<f64>, knots: &KnotLayout<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (s, t, r) = (panel.n_locations(), panel.n_times(), panel.n_predictors());
        let (m, n) = (knots.m(), knots.n());
        let mut x = DMatrix::zeros(s * t, 4 * r);
        let mut z = DMatrix::zeros(s * t, r * (m + n + m * n));
        for i in 0..t {
            for j in 0..s {
                let row = i * s + j;
                let (tt, ss) = (panel.times[i], panel.locations[j]);
                for p in 0..r {
                    let xv = panel.covariates[p][row];
                    x[(row, 4 * p)] = xv;
                    x[(row, 4 * p + 1)] = xv * tt;
                    x[(row, 4 * p + 2)] = xv * ss[0];
                    x[(row, 4 * p + 3)] = xv * ss[1];
                    let base = p * (m + n + m * n);
                    for a in 0..m {
                        z[(row, base + a)] = xv * temporal_kernel(tt, knots.temporal[a]);
                    }
                    for b in 0..n {
                        z[(row, base + m + b)] = xv * spatial_kernel(&ss, &knots.spatial[b]);
                    }
                    for a in 0..m {
                        for b in 0..n {
                            z[(row, base + m + n + a * n + b)] =
                                xv * temporal_kernel(tt, knots.temporal[a]) * spatial_kernel(&ss, &knots.spatial[b]);
                        }
                    }
                }
            }
        }
        (x, z)
    }

    #[test]
    fn smallest_case() {
        let panel = SpaceTimePanel::new(
            vec!["a".into(), "b".into()],
            vec![[0.0, 0.0], [2.0, 1.0]],
            vec![1.0, 2.0],
            vec![Some(1.0); 4],
            vec![vec![1.0; 4]],
        )
        .unwrap();
        let knots = KnotLayout::new(vec![1.5], vec![[0.5, 0.5]]).unwrap();
        let d = assemble_design(&panel, &knots).unwrap();
        assert_eq!(d.n_random(), 3);
        for row in 0..4 {
            assert_eq!(d.random[(row, 2)], d.random[(row, 0)] * d.random[(row, 1)]);
        }
    }

    #[test]
    fn matches_naive_builder() {
        let panel = random_panel(3, 5, 4, 2);
        let knots = KnotLayout::new(vec![1.7, 3.2], vec![[0.2, 0.3], [0.8, 0.1], [0.5, 0.9]]).unwrap();
        let d = assemble_design(&panel, &knots).unwrap();
        assert_eq!(d.n_random(), 22);
        assert_eq!(d.n_fixed(), 8);
        let (x, z) = naive(&panel, &knots);
        assert!((&d.fixed - x).amax() <= 1e-12);
        assert!((&d.random - z).amax() <= 1e-12);
    }

    #[test]
    fn interaction_columns_are_hadamard_products() {
        let panel = random_panel(4, 6, 5, 1);
        let knots = KnotLayout::new(vec![2.0, 4.0], vec![[0.2, 0.3], [0.8, 0.1]]).unwrap();
        let d = assemble_design(&panel, &knots).unwrap();
        let t = d.block_index(0, BlockKind::Temporal).unwrap();
        let s = d.block_index(0, BlockKind::Spatial).unwrap();
        let inter = d.block_index(0, BlockKind::Interaction).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let col = d.random.column(inter.start + a * 2 + b);
                let x = DVector::from_iterator(d.n_rows(), d.rows.iter().map(|&c| panel.covariates[0][c]));
                let want = d
                    .random
                    .column(t.start + a)
                    .component_mul(&d.random.column(s.start + b))
                    .component_div(&x);
                assert!((col - want).amax() <= 1e-10);
            }
        }
    }

    #[test]
    fn row_permutation_invariance() {
        let panel = random_panel(5, 5, 3, 2);
        let knots = KnotLayout::new(vec![2.0], vec![[0.2, 0.3], [0.6, 0.6]]).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let s = panel.n_locations();
        let remap = |v: &Vec<f64>| -> Vec<f64> { (0..v.len()).map(|c| v[(c / s) * s + perm[c % s]]).collect() };
        let permuted = SpaceTimePanel::new(
            perm.iter().map(|&j| panel.location_ids[j].clone()).collect(),
            perm.iter().map(|&j| panel.locations[j]).collect(),
            panel.times.clone(),
            (0..panel.n_cells())
                .map(|c| panel.response[(c / s) * s + perm[c % s]])
                .collect(),
            panel.covariates.iter().map(remap).collect(),
        )
        .unwrap();
        let a = assemble_design(&panel, &knots).unwrap();
        let b = assemble_design(&permuted, &knots).unwrap();
        for c in 0..panel.n_cells() {
            let src = (c / s) * s + perm[c % s];
            assert_eq!(b.fixed.row(c), a.fixed.row(src));
            assert_eq!(b.random.row(c), a.random.row(src));
        }
    }

    #[test]
    fn missing_cells_are_dropped() {
        let mut panel = random_panel(6, 3, 3, 1);
        panel.response[4] = None;
        panel.response[7] = Some(f64::NAN);
        let knots = KnotLayout::new(vec![2.0], vec![[0.2, 0.3]]).unwrap();
        let d = assemble_design(&panel, &knots).unwrap();
        assert_eq!(d.dropped, vec![4, 7]);
        assert_eq!(d.n_rows(), 7);
        assert!(!d.rows.contains(&4));
    }

    #[test]
    fn coefficient_rows_match_design_for_unit_covariate() {
        let mut panel = random_panel(8, 4, 3, 1);
        panel.covariates[0] = vec![1.0; 12];
        let knots = KnotLayout::new(vec![1.5, 2.5], vec![[0.2, 0.3], [0.6, 0.6]]).unwrap();
        let d = assemble_design(&panel, &knots).unwrap();
        let grid: Vec<(f64, [f64; 2])> = (0..12).map(|c| (panel.times[c / 4], panel.locations[c % 4])).collect();
        let (f, z) = coefficient_rows(&knots.temporal, &knots.spatial, &BasisConfig::default(), &grid);
        assert!((f - &d.fixed).amax() == 0.0);
        assert!((z - &d.random).amax() <= 1e-14);
    }
}
