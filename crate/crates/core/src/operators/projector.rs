use std::sync::OnceLock;

use super::geometry::{Geometry, ImageGrid, Ray};
use super::LinearOperator;
use crate::error::{Error, Result};
use crate::real::Real;

/// Measurement array of shape `(n_angles, n_detectors)`, angle-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub n_angles: usize,
    pub n_detectors: usize,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_detectors: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_angles * n_detectors {
            return Err(Error::shape("sinogram", &[n_angles, n_detectors], &[values.len()]));
        }
        Ok(Self {
            n_angles,
            n_detectors,
            values,
        })
    }

    pub fn zeros(geometry: &Geometry) -> Self {
        Self {
            n_angles: geometry.n_angles(),
            n_detectors: geometry.n_detectors,
            values: vec![0.0; geometry.sinogram_len()],
        }
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.n_detectors..(a + 1) * self.n_detectors]
    }

    pub fn check(&self, geometry: &Geometry, context: &'static str) -> Result<()> {
        if self.n_angles != geometry.n_angles() || self.n_detectors != geometry.n_detectors {
            return Err(Error::shape(
                context,
                &[geometry.n_angles(), geometry.n_detectors],
                &[self.n_angles, self.n_detectors],
            ));
        }
        Ok(())
    }
}

/// Discrete Radon transform stored as a CSR matrix (rows = angle × detector bin).
///
/// Row weights come from Joseph's method: the ray is sampled once per slab of
/// its dominant axis and the sample is split between the two neighbouring
/// pixels by linear interpolation. Each slab's weight is the exact length of
/// the ray inside that slab and inside the grid, so the weights of a row sum to
/// the ray's chord length through the grid.
#[derive(Debug)]
pub struct ProjectionOperator {
    grid: ImageGrid,
    geometry: Geometry,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    // transposed copy for gather-style adjoints
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    t_weights: Vec<f64>,
    norm_sq: OnceLock<f64>,
}

impl ProjectionOperator {
    pub fn new(grid: ImageGrid, geometry: Geometry) -> Result<Self> {
        let n_rows = geometry.sinogram_len();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        let mut buf = Vec::new();
        for a in 0..geometry.n_angles() {
            for j in 0..geometry.n_detectors {
                buf.clear();
                joseph_row(&grid, &geometry.ray(a, j), &mut buf);
                buf.sort_unstable_by_key(|&(c, _)| c);
                for &(c, w) in &buf {
                    cols.push(c as u32);
                    weights.push(w);
                }
                row_ptr.push(cols.len());
            }
        }
        if weights.is_empty() {
            return Err(Error::Config("every ray of the geometry misses the image grid".into()));
        }
        let mut col_ptr = vec![0usize; grid.len() + 1];
        for &c in &cols {
            col_ptr[c as usize + 1] += 1;
        }
        for j in 0..grid.len() {
            col_ptr[j + 1] += col_ptr[j];
        }
        let mut next = col_ptr.clone();
        let mut rows = vec![0u32; cols.len()];
        let mut t_weights = vec![0.0; cols.len()];
        for r in 0..n_rows {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = cols[k] as usize;
                rows[next[c]] = r as u32;
                t_weights[next[c]] = weights[k];
                next[c] += 1;
            }
        }
        Ok(Self {
            grid,
            geometry,
            row_ptr,
            cols,
            weights,
            col_ptr,
            rows,
            t_weights,
            norm_sq: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn geometry_hash(&self) -> u64 {
        self.geometry.hash_with(&self.grid)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    /// Nonzero `(column, weight)` pairs of a row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&c, &w)| (c as usize, w))
    }

    pub fn forward(&self, image: &[f64]) -> Result<Sinogram> {
        self.grid.check_image(image.len(), "forward projection")?;
        let mut out = vec![0.0; self.n_rows()];
        self.forward_into(image, &mut out);
        Sinogram::new(self.geometry.n_angles(), self.geometry.n_detectors, out)
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<Vec<f64>> {
        sino.check(&self.geometry, "adjoint projection")?;
        let mut out = vec![0.0; self.grid.len()];
        self.adjoint_into(&sino.values, &mut out);
        Ok(out)
    }

    /// `out = A x` for any real type; accumulation is in double precision.
    pub fn forward_into<T: Real>(&self, x: &[T], out: &mut [T]) {
        assert_eq!(x.len(), self.grid.len());
        assert_eq!(out.len(), self.n_rows());
        for (o, span) in out.iter_mut().zip(self.row_ptr.windows(2)) {
            let (cols, ws) = (&self.cols[span[0]..span[1]], &self.weights[span[0]..span[1]]);
            let mut acc = 0.0f64;
            for (&c, &w) in cols.iter().zip(ws) {
                acc += w * x[c as usize].to_f64_lossy();
            }
            *o = T::lit(acc);
        }
    }

    /// `out = Aᵀ y`, the exact transpose of [`forward_into`](Self::forward_into).
    pub fn adjoint_into<T: Real>(&self, y: &[T], out: &mut [T]) {
        assert_eq!(y.len(), self.n_rows());
        assert_eq!(out.len(), self.grid.len());
        for (o, span) in out.iter_mut().zip(self.col_ptr.windows(2)) {
            let (rows, ws) = (&self.rows[span[0]..span[1]], &self.t_weights[span[0]..span[1]]);
            let mut acc = 0.0f64;
            for (&r, &w) in rows.iter().zip(ws) {
                acc += w * y[r as usize].to_f64_lossy();
            }
            *o = T::lit(acc);
        }
    }

    /// Sum of weights of every row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.row(r).map(|(_, w)| w).sum()).collect()
    }

    /// `Σ_r a_rj` for every pixel `j`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (&c, &w) in self.cols.iter().zip(&self.weights) {
            out[c as usize] += w;
        }
        out
    }

    /// `‖A e_j‖²` for every pixel `j`.
    pub fn column_norms_sq(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (&c, &w) in self.cols.iter().zip(&self.weights) {
            out[c as usize] += w * w;
        }
        out
    }

    /// Dense row-major copy; for small test problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows())
            .map(|r| {
                let mut row = vec![0.0; self.grid.len()];
                for (c, w) in self.row(r) {
                    row[c] += w;
                }
                row
            })
            .collect()
    }

    /// Cached power-method estimate of `‖A‖²`.
    pub fn norm_sq(&self) -> f64 {
        *self.norm_sq.get_or_init(|| {
            let n = super::operator_norm(self, 100, 0x5eed);
            n * n
        })
    }
}

impl LinearOperator for ProjectionOperator {
    fn domain_len(&self) -> usize {
        self.grid.len()
    }

    fn range_len(&self) -> usize {
        self.n_rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.forward_into(x, out);
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.adjoint_into(y, out);
    }
}

/// Parameter interval `[lo, hi]` of the line where `lo_b <= origin + t·dir <= hi_b`.
fn slab_interval(origin: f64, dir: f64, lo_b: f64, hi_b: f64) -> Option<(f64, f64)> {
    if dir.abs() < 1e-15 {
        if origin >= lo_b && origin <= hi_b {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            None
        }
    } else {
        let t0 = (lo_b - origin) / dir;
        let t1 = (hi_b - origin) / dir;
        Some((t0.min(t1), t0.max(t1)))
    }
}

/// Appends the Joseph weights of one ray to `out`.
pub(crate) fn joseph_row(grid: &ImageGrid, ray: &Ray, out: &mut Vec<(usize, f64)>) {
    let ps = grid.pixel_size;
    let y_dominant = ray.dir[1].abs() >= ray.dir[0].abs();
    // Work in (major, minor) coordinates so one loop handles both orientations.
    let (n_major, n_minor, o_major, o_minor, d_major, d_minor, ext_minor) = if y_dominant {
        (
            grid.ny,
            grid.nx,
            ray.origin[1],
            ray.origin[0],
            ray.dir[1],
            ray.dir[0],
            grid.width(),
        )
    } else {
        (
            grid.nx,
            grid.ny,
            ray.origin[0],
            ray.origin[1],
            ray.dir[0],
            ray.dir[1],
            grid.height(),
        )
    };
    let Some(minor_span) = slab_interval(o_minor, d_minor, -ext_minor / 2.0, ext_minor / 2.0) else {
        return;
    };
    let half_major = (n_major as f64 - 1.0) / 2.0;
    let half_minor = (n_minor as f64 - 1.0) / 2.0;
    for i in 0..n_major {
        let c = (i as f64 - half_major) * ps;
        let Some((ta, tb)) = slab_interval(o_major, d_major, c - ps / 2.0, c + ps / 2.0) else {
            continue;
        };
        let len = tb.min(minor_span.1) - ta.max(minor_span.0);
        if len <= 0.0 {
            continue;
        }
        let tc = (c - o_major) / d_major;
        let m = o_minor + tc * d_minor;
        let f = (m / ps + half_minor).clamp(0.0, n_minor as f64 - 1.0);
        let j0 = (f.floor() as usize).min(n_minor - 2);
        let frac = f - j0 as f64;
        let index = |j: usize| {
            if y_dominant {
                i * grid.nx + j
            } else {
                j * grid.nx + i
            }
        };
        if frac < 1.0 {
            out.push((index(j0), len * (1.0 - frac)));
        }
        if frac > 0.0 {
            out.push((index(j0 + 1), len * frac));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{Beam, Geometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn two_by_two_vertical_rays_hit_one_column_each() {
        let grid = ImageGrid::new(2, 2, 1.0).unwrap();
        let geom = Geometry::parallel_with_angles(vec![0.0], 2, 1.0).unwrap();
        let op = ProjectionOperator::new(grid, geom).unwrap();
        for (r, col) in [(0usize, 0usize), (1, 1)] {
            let row: Vec<_> = op.row(r).collect();
            assert_eq!(row.len(), 2);
            for (c, w) in row {
                assert_eq!(c % 2, col);
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let grid = ImageGrid::new(8, 8, 1.0).unwrap();
        let op = ProjectionOperator::new(grid, Geometry::parallel(6, 12, 1.0).unwrap()).unwrap();
        let s = op.forward(&vec![0.0; 64]).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        let b = op.adjoint(&Sinogram::zeros(op.geometry())).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_linear() {
        let grid = ImageGrid::new(12, 12, 1.0).unwrap();
        let op = ProjectionOperator::new(grid, Geometry::fan(9, 24, 1.5, 500.0, 500.0).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..144).map(|_| rng.random::<f64>()).collect();
        let z: Vec<f64> = (0..144).map(|_| rng.random::<f64>() - 0.5).collect();
        let (alpha, beta) = (1.7, -0.3);
        let comb: Vec<f64> = x.iter().zip(&z).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = op.forward(&comb).unwrap().values;
        let ax = op.forward(&x).unwrap().values;
        let az = op.forward(&z).unwrap().values;
        let scale = lhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..lhs.len() {
            assert!((lhs[i] - (alpha * ax[i] + beta * az[i])).abs() <= 1e-12 * scale);
        }
        let twice: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a2 = op.forward(&twice).unwrap().values;
        for i in 0..a2.len() {
            assert!((a2[i] - 2.0 * ax[i]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn adjoint_identity_on_both_beams() {
        let grid = ImageGrid::new(16, 16, 1.0).unwrap();
        for geom in [
            Geometry::parallel(12, 24, 1.0).unwrap(),
            Geometry::fan(12, 32, 1.5, 500.0, 500.0).unwrap(),
        ] {
            let op = ProjectionOperator::new(grid, geom).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..20 {
                let x: Vec<f64> = (0..grid.len()).map(|_| rng.random::<f64>() - 0.5).collect();
                let y: Vec<f64> = (0..op.n_rows()).map(|_| rng.random::<f64>() - 0.5).collect();
                let ax = op.forward(&x).unwrap();
                let aty = op
                    .adjoint(&Sinogram::new(ax.n_angles, ax.n_detectors, y.clone()).unwrap())
                    .unwrap();
                let lhs = dot(&ax.values, &y);
                let rhs = dot(&x, &aty);
                let norm = dot(&ax.values, &ax.values).sqrt() * dot(&y, &y).sqrt();
                assert!((lhs - rhs).abs() / norm < 1e-10);
            }
        }
    }

    #[test]
    fn all_ones_adjoint_equals_column_sums() {
        let grid = ImageGrid::new(10, 10, 1.0).unwrap();
        let op = ProjectionOperator::new(grid, Geometry::parallel(7, 16, 1.0).unwrap()).unwrap();
        let ones = Sinogram::new(7, 16, vec![1.0; 7 * 16]).unwrap();
        let back = op.adjoint(&ones).unwrap();
        let dense = op.to_dense();
        for j in 0..grid.len() {
            let col: f64 = dense.iter().map(|row| row[j]).sum();
            assert!((back[j] - col).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_nonnegative_and_rays_outside_are_empty() {
        let grid = ImageGrid::new(8, 8, 1.0).unwrap();
        // detectors far wider than the grid: outer rays must miss
        let op = ProjectionOperator::new(grid, Geometry::parallel(5, 40, 1.0).unwrap()).unwrap();
        assert!(op.weights.iter().all(|&w| w > 0.0));
        assert_eq!(op.row(0).count(), 0);
        assert_eq!(op.geometry().beam, Beam::Parallel);
    }

    #[test]
    fn geometry_missing_the_grid_is_rejected() {
        let grid = ImageGrid::new(4, 4, 1.0).unwrap();
        let far = Geometry::parallel_with_angles(vec![0.0, 1.0], 2, 100.0).unwrap();
        assert!(matches!(ProjectionOperator::new(grid, far), Err(Error::Config(_))));
    }
}
