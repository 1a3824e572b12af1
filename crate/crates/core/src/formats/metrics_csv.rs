use std::path::Path;

use super::bytes::write_file_atomic;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "sample_id,method,psnr_db,ssim,wall_ms,seed,config_hash";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub sample_id: String,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub wall_ms: u64,
    pub seed: u64,
    pub config_hash: u64,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{:016x}",
            self.sample_id.replace(',', ";"),
            self.method.replace(',', ";"),
            self.psnr_db,
            self.ssim,
            self.wall_ms,
            self.seed,
            self.config_hash
        )
    }
}

/// Appends one row, writing the header when the file is new. The whole file is
/// rewritten through a temporary sibling and renamed, so a reader never sees a
/// partial row.
pub fn metrics_csv_append(path: &Path, row: &MetricsRow) -> Result<()> {
    let mut content = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    if content.is_empty() {
        content.push_str(METRICS_HEADER);
        content.push('\n');
    }
    content.push_str(&row.to_line());
    content.push('\n');
    write_file_atomic(path, content.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize) -> MetricsRow {
        MetricsRow {
            sample_id: format!("s{i}"),
            method: "fbp".into(),
            psnr_db: 30.0 + i as f64,
            ssim: 0.9,
            wall_ms: 3,
            seed: 7,
            config_hash: 0xabc,
        }
    }

    #[test]
    fn header_once_and_constant_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        metrics_csv_append(&p, &row(0)).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert_eq!(s.lines().next().unwrap(), METRICS_HEADER);
        for i in 1..4 {
            metrics_csv_append(&p, &row(i)).unwrap();
        }
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().count(), 5);
        assert!(s.lines().all(|l| l.split(',').count() == 7));
    }

    #[test]
    fn interrupted_write_leaves_previous_rows_intact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        metrics_csv_append(&p, &row(0)).unwrap();
        // a crash between writing the temporary file and the rename
        let tmp = p.with_extension("csv.tmp");
        std::fs::write(&tmp, "sample_id,method\ns9,tv,3").unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.lines().all(|l| l.split(',').count() == 7));
        metrics_csv_append(&p, &row(1)).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(!tmp.exists());
    }
}
