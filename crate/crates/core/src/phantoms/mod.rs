//! Training and test phantoms, the photon-count corruption model and dataset files.

mod dataset;
mod noise;
mod shapes;

pub use dataset::{
    encode_dataset, generate_dataset, generate_records, read_dataset, simulate_record, write_dataset, Dataset,
    DatasetKind, DatasetRecord, DATASET_MAGIC, DATASET_VERSION, FBP_INIT_CUTOFF, MAX_ELLIPSES, MIN_ELLIPSES,
};
pub use noise::{linearize, poisson, simulate_counts, NoiseModel};
pub use shapes::{
    rasterize_ellipses, rasterize_ood, sample_ellipse_phantom, sample_ellipses, sample_ood_phantom, sample_ood_shapes,
    Ellipse, OodShapes, Rect, MAX_OOD_RECTS,
};
