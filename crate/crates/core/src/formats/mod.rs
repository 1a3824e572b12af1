//! On-disk formats: TNSR tensor framing, 16-bit PGM images and the metrics CSV.

mod bytes;
mod metrics_csv;
mod pgm;
mod tensor_file;

pub(crate) use bytes::{read_file, write_file_atomic};
pub use bytes::{ByteReader, ByteWriter};
pub use metrics_csv::{metrics_csv_append, MetricsRow, METRICS_HEADER};
pub use pgm::{read_image_pgm, write_image_pgm};
pub use tensor_file::{
    read_tensor, read_tensor_file, write_tensor, write_tensor_file, AnyTensor, TENSOR_MAGIC, TENSOR_VERSION,
};
