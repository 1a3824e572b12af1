use std::path::Path;

use rayon::prelude::*;

use super::noise::{linearize, simulate_counts, NoiseModel};
use super::shapes::{sample_ellipse_phantom, sample_ood_phantom};
use crate::error::{Error, Result};
use crate::formats::{read_tensor, write_tensor, ByteReader, ByteWriter};
use crate::operators::{fbp, Filter, ImageGrid, ProjectionOperator, Sinogram};
use crate::seed::{child_seed, rng_from};

pub const DATASET_MAGIC: &[u8; 4] = b"BDGD";
pub const DATASET_VERSION: u32 = 1;
pub const MIN_ELLIPSES: usize = 3;
pub const MAX_ELLIPSES: usize = 10;
pub const FBP_INIT_CUTOFF: f64 = 0.6;

const FLAG_GROUND_TRUTH: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    SupervisedEllipses,
    UnsupervisedOod,
    /// Out-of-distribution phantoms with their ground truth, for evaluation only.
    SupervisedOod,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "supervised-ellipses" => Some(Self::SupervisedEllipses),
            "unsupervised-ood" => Some(Self::UnsupervisedOod),
            "supervised-ood" => Some(Self::SupervisedOod),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SupervisedEllipses => "supervised-ellipses",
            Self::UnsupervisedOod => "unsupervised-ood",
            Self::SupervisedOod => "supervised-ood",
        }
    }

    fn code(self) -> u8 {
        match self {
            Self::SupervisedEllipses => 0,
            Self::UnsupervisedOod => 1,
            Self::SupervisedOod => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::SupervisedEllipses, Self::UnsupervisedOod, Self::SupervisedOod]
            .into_iter()
            .find(|k| k.code() == c)
    }

    pub fn has_ground_truth(self) -> bool {
        self != Self::UnsupervisedOod
    }
}

/// One measurement. Arrays are stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub ground_truth: Option<Vec<f32>>,
    pub sinogram: Vec<f32>,
    pub fbp_init: Vec<f32>,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn sinogram(&self, n_angles: usize, n_detectors: usize) -> Result<Sinogram> {
        Sinogram::new(n_angles, n_detectors, self.sinogram.iter().map(|&v| v as f64).collect())
    }

    pub fn fbp_init_f64(&self) -> Vec<f64> {
        self.fbp_init.iter().map(|&v| v as f64).collect()
    }

    pub fn ground_truth_f64(&self) -> Option<Vec<f64>> {
        self.ground_truth
            .as_ref()
            .map(|g| g.iter().map(|&v| v as f64).collect())
    }

    /// Drops the ground truth so that downstream code cannot read it.
    pub fn without_ground_truth(&self) -> Self {
        Self {
            ground_truth: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub grid: ImageGrid,
    pub n_angles: usize,
    pub n_detectors: usize,
    pub geometry_hash: u64,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn check_operator(&self, op: &ProjectionOperator) -> Result<()> {
        if self.geometry_hash != op.geometry_hash() {
            return Err(Error::GeometryMismatch {
                expected_from: "configured",
                got_from: "dataset",
                expected: op.geometry_hash(),
                got: self.geometry_hash,
            });
        }
        Ok(())
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Simulates one record from its own seed: phantom, Poisson counts, linearisation, FBP.
pub fn simulate_record(
    kind: DatasetKind,
    record_seed: u64,
    op: &ProjectionOperator,
    noise: &NoiseModel,
) -> Result<DatasetRecord> {
    let mut rng = rng_from(record_seed);
    let grid = op.grid();
    let phantom = match kind {
        DatasetKind::SupervisedEllipses => sample_ellipse_phantom(&mut rng, MIN_ELLIPSES, MAX_ELLIPSES, grid)?,
        DatasetKind::UnsupervisedOod | DatasetKind::SupervisedOod => sample_ood_phantom(&mut rng, grid),
    };
    let clean = op.forward(&phantom)?;
    let counts = simulate_counts(&clean, noise, &mut rng);
    let y = linearize(&counts, clean.n_angles, clean.n_detectors, noise)?;
    let x0 = fbp(op, &y, Filter::Hann, FBP_INIT_CUTOFF)?;
    Ok(DatasetRecord {
        ground_truth: kind.has_ground_truth().then(|| to_f32(&phantom)),
        sinogram: to_f32(&y.values),
        fbp_init: to_f32(&x0),
        seed: record_seed,
    })
}

/// Generates `n` records; record `i` uses `child_seed(seed, i)`, so the result
/// does not depend on the size of the worker pool.
pub fn generate_records(
    kind: DatasetKind,
    n: usize,
    op: &ProjectionOperator,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let records = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_record(kind, child_seed(seed, i), op, noise))
        .collect::<Result<Vec<_>>>()?;
    let g = op.geometry();
    Ok(Dataset {
        kind,
        grid: *op.grid(),
        n_angles: g.n_angles(),
        n_detectors: g.n_detectors,
        geometry_hash: op.geometry_hash(),
        records,
    })
}

pub fn generate_dataset(
    kind: DatasetKind,
    n: usize,
    op: &ProjectionOperator,
    noise: &NoiseModel,
    seed: u64,
    out_path: &Path,
) -> Result<Dataset> {
    let ds = generate_records(kind, n, op, noise, seed)?;
    write_dataset(&ds, out_path)?;
    Ok(ds)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u8(ds.kind.code());
    w.u64(ds.records.len() as u64);
    w.u32(ds.grid.nx as u32);
    w.u32(ds.grid.ny as u32);
    w.f64(ds.grid.pixel_size);
    w.u32(ds.n_angles as u32);
    w.u32(ds.n_detectors as u32);
    w.u64(ds.geometry_hash);
    let image_dims = [ds.grid.ny, ds.grid.nx];
    let sino_dims = [ds.n_angles, ds.n_detectors];
    for rec in &ds.records {
        w.u8(if rec.ground_truth.is_some() {
            FLAG_GROUND_TRUTH
        } else {
            0
        });
        w.u64(rec.seed);
        if let Some(gt) = &rec.ground_truth {
            write_tensor(&mut w, &image_dims, gt);
        }
        write_tensor(&mut w, &sino_dims, &rec.sinogram);
        write_tensor(&mut w, &image_dims, &rec.fbp_init);
    }
    w.buf
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    crate::formats::write_file_atomic(path, &encode_dataset(ds))
}

fn read_f32(r: &mut ByteReader<'_>, dims: &[usize]) -> Result<Vec<f32>> {
    let t = read_tensor(r)?;
    if t.dims() != dims {
        return Err(r.malformed(&format!("tensor dims {:?}, expected {:?}", t.dims(), dims)));
    }
    match t {
        crate::formats::AnyTensor::F32 { data, .. } => Ok(data),
        _ => Err(r.malformed("dataset tensors must be single precision")),
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = crate::formats::read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let kind = DatasetKind::from_code(r.u8()?).ok_or_else(|| r.malformed("unknown dataset kind"))?;
    let count = r.u64()? as usize;
    let nx = r.u32()? as usize;
    let ny = r.u32()? as usize;
    let pixel_size = r.f64()?;
    let grid = ImageGrid::new(nx, ny, pixel_size).map_err(|_| r.malformed("invalid grid"))?;
    let n_angles = r.u32()? as usize;
    let n_detectors = r.u32()? as usize;
    let geometry_hash = r.u64()?;
    let image_dims = [ny, nx];
    let sino_dims = [n_angles, n_detectors];
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let flags = r.u8()?;
        let seed = r.u64()?;
        let ground_truth = if flags & FLAG_GROUND_TRUTH != 0 {
            Some(read_f32(&mut r, &image_dims)?)
        } else {
            None
        };
        let sinogram = read_f32(&mut r, &sino_dims)?;
        let fbp_init = read_f32(&mut r, &image_dims)?;
        records.push(DatasetRecord {
            ground_truth,
            sinogram,
            fbp_init,
            seed,
        });
    }
    if r.remaining() != 0 {
        return Err(r.malformed("trailing bytes after the last record"));
    }
    Ok(Dataset {
        kind,
        grid,
        n_angles,
        n_detectors,
        geometry_hash,
        records,
    })
}
