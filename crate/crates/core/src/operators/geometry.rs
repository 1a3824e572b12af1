use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Square-pixel image grid centred on the rotation axis.
///
/// Images are stored row-major with `iy` as the slow index; pixel `(ix, iy)`
/// has its centre at `((ix - (nx-1)/2)·ps, (iy - (ny-1)/2)·ps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size: f64,
}

impl ImageGrid {
    pub fn new(nx: usize, ny: usize, pixel_size: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config(format!("grid must be at least 2x2, got {nx}x{ny}")));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::Config(format!("pixel_size must be positive, got {pixel_size}")));
        }
        Ok(Self { nx, ny, pixel_size })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.pixel_size
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.pixel_size
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        (ix as f64 - (self.nx as f64 - 1.0) / 2.0) * self.pixel_size
    }

    pub fn y_center(&self, iy: usize) -> f64 {
        (iy as f64 - (self.ny as f64 - 1.0) / 2.0) * self.pixel_size
    }

    pub fn check_image(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.len() {
            return Err(Error::shape(context, &[self.ny, self.nx], &[len]));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Beam {
    Parallel,
    Fan,
}

impl Beam {
    pub fn name(self) -> &'static str {
        match self {
            Beam::Parallel => "parallel",
            Beam::Fan => "fan",
        }
    }
}

/// Acquisition geometry with a flat detector centred on the central ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub beam: Beam,
    pub angles: Vec<f64>,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    /// Source to rotation axis (fan only).
    pub d_source_axis: f64,
    /// Rotation axis to detector (fan only).
    pub d_axis_detector: f64,
}

/// A straight line `origin + t·dir`, `dir` of unit length.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f64; 2],
    pub dir: [f64; 2],
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 2] {
        [self.origin[0] + t * self.dir[0], self.origin[1] + t * self.dir[1]]
    }
}

impl Geometry {
    /// Parallel beam, angles uniform over `[0, π)`.
    pub fn parallel(n_angles: usize, n_detectors: usize, detector_spacing: f64) -> Result<Self> {
        let angles = (0..n_angles).map(|i| i as f64 * PI / n_angles as f64).collect();
        Self::validated(Geometry {
            beam: Beam::Parallel,
            angles,
            n_detectors,
            detector_spacing,
            d_source_axis: 0.0,
            d_axis_detector: 0.0,
        })
    }

    /// Fan beam, source angles uniform over `[0, 2π)`.
    pub fn fan(
        n_angles: usize,
        n_detectors: usize,
        detector_spacing: f64,
        d_source_axis: f64,
        d_axis_detector: f64,
    ) -> Result<Self> {
        let angles = (0..n_angles).map(|i| i as f64 * 2.0 * PI / n_angles as f64).collect();
        Self::validated(Geometry {
            beam: Beam::Fan,
            angles,
            n_detectors,
            detector_spacing,
            d_source_axis,
            d_axis_detector,
        })
    }

    /// Parallel geometry with explicit angles (test configurations).
    pub fn parallel_with_angles(angles: Vec<f64>, n_detectors: usize, detector_spacing: f64) -> Result<Self> {
        Self::validated(Geometry {
            beam: Beam::Parallel,
            angles,
            n_detectors,
            detector_spacing,
            d_source_axis: 0.0,
            d_axis_detector: 0.0,
        })
    }

    fn validated(g: Geometry) -> Result<Self> {
        if g.angles.is_empty() {
            return Err(Error::Config("geometry needs at least one angle".into()));
        }
        if g.n_detectors == 0 {
            return Err(Error::Config("geometry needs at least one detector".into()));
        }
        if !(g.detector_spacing > 0.0) {
            return Err(Error::Config("detector spacing must be positive".into()));
        }
        if g.beam == Beam::Fan && !(g.d_source_axis > 0.0 && g.d_axis_detector > 0.0) {
            return Err(Error::Config(
                "fan beam needs positive source-axis and axis-detector distances".into(),
            ));
        }
        Ok(g)
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn sinogram_len(&self) -> usize {
        self.n_angles() * self.n_detectors
    }

    /// Signed detector coordinate of bin `j`, centred on the central ray.
    pub fn detector_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// Unit vectors (detector axis, central ray direction) at angle `a`.
    pub(crate) fn frame(&self, a: usize) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.angles[a].sin_cos();
        ([c, s], [-s, c])
    }

    pub fn ray(&self, a: usize, j: usize) -> Ray {
        let (e_u, e_c) = self.frame(a);
        let u = self.detector_offset(j);
        match self.beam {
            Beam::Parallel => Ray {
                origin: [u * e_u[0], u * e_u[1]],
                dir: e_c,
            },
            Beam::Fan => {
                let d = self.d_source_axis;
                let src = [-d * e_c[0], -d * e_c[1]];
                let det = [
                    self.d_axis_detector * e_c[0] + u * e_u[0],
                    self.d_axis_detector * e_c[1] + u * e_u[1],
                ];
                let v = [det[0] - src[0], det[1] - src[1]];
                let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
                Ray {
                    origin: src,
                    dir: [v[0] / n, v[1] / n],
                }
            }
        }
    }

    /// Stable 64-bit identity of (grid, geometry), used to pair data with checkpoints.
    pub fn hash_with(&self, grid: &ImageGrid) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&(grid.nx as u64).to_le_bytes());
        h.write(&(grid.ny as u64).to_le_bytes());
        h.write(&grid.pixel_size.to_le_bytes());
        h.write(self.beam.name().as_bytes());
        h.write(&(self.angles.len() as u64).to_le_bytes());
        for a in &self.angles {
            h.write(&a.to_le_bytes());
        }
        h.write(&(self.n_detectors as u64).to_le_bytes());
        h.write(&self.detector_spacing.to_le_bytes());
        h.write(&self.d_source_axis.to_le_bytes());
        h.write(&self.d_axis_detector.to_le_bytes());
        h.finish()
    }
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(ImageGrid::new(1, 4, 1.0).is_err());
        assert!(ImageGrid::new(4, 4, 0.0).is_err());
        assert!(Geometry::parallel(0, 4, 1.0).is_err());
        assert!(Geometry::parallel(4, 0, 1.0).is_err());
        assert!(Geometry::fan(4, 4, 1.0, 0.0, 500.0).is_err());
    }

    #[test]
    fn fan_central_ray_passes_through_axis() {
        let g = Geometry::fan(8, 5, 1.0, 500.0, 500.0).unwrap();
        for a in 0..8 {
            let r = g.ray(a, 2);
            // distance of the origin point from the line through the source
            let cross = r.origin[0] * r.dir[1] - r.origin[1] * r.dir[0];
            assert!(cross.abs() < 1e-9);
        }
    }

    #[test]
    fn hash_distinguishes_geometries() {
        let grid = ImageGrid::new(8, 8, 1.0).unwrap();
        let a = Geometry::parallel(4, 8, 1.0).unwrap();
        let b = Geometry::parallel(5, 8, 1.0).unwrap();
        assert_ne!(a.hash_with(&grid), b.hash_with(&grid));
        assert_eq!(a.hash_with(&grid), a.clone().hash_with(&grid));
    }
}
