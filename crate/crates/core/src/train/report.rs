use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub const REPORT_HEADER: &str =
    "epoch,train_loss,val_mssim_camera,val_mssim_no_camera,lr,elapsed_s,digest";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Full-image validation MSSIM with camera features.
    pub val_mssim_camera: f64,
    /// Same, with exactly-zero camera tokens.
    pub val_mssim_no_camera: f64,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    /// Wall time since the run (or resume) started.
    pub elapsed_s: f64,
}

impl EpochRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.train_loss,
            self.val_mssim_camera,
            self.val_mssim_no_camera,
            self.lr,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn to_csv(&self, digest: &str) -> String {
        // `{}` on f64 prints the shortest string that parses back exactly
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_mssim_camera,
            self.val_mssim_no_camera,
            self.lr,
            self.elapsed_s,
            digest
        )
    }

    /// Same record ignoring wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_mssim_camera.to_bits() == other.val_mssim_camera.to_bits()
            && self.val_mssim_no_camera.to_bits() == other.val_mssim_no_camera.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub wall_time_s: f64,
    pub digest: String,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.to_csv(&self.digest));
            s.push('\n');
        }
        s
    }

    /// Parses report CSV. Rows must carry one digest and contiguous epochs
    /// starting at 0.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Format("report.csv: unexpected header".into()));
        }
        let mut report = TrainReport::default();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Format(format!("report.csv: malformed row {}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let rec = EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                val_mssim_camera: num(f[2])?,
                val_mssim_no_camera: num(f[3])?,
                lr: num(f[4])?,
                elapsed_s: num(f[5])?,
            };
            if rec.epoch != i {
                return Err(Error::Format(format!(
                    "report.csv: epoch {} where {i} expected",
                    rec.epoch
                )));
            }
            if i == 0 {
                report.digest = f[6].to_string();
            } else if report.digest != f[6] {
                return Err(Error::Format(
                    "report.csv: rows carry different digests".into(),
                ));
            }
            report.wall_time_s = rec.elapsed_s;
            report.records.push(rec);
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rewrites `path` with the header and the first `keep` rows.
    pub(crate) fn write_prefix(&self, path: &Path, keep: usize) -> Result<()> {
        let prefix = TrainReport {
            records: self.records[..keep.min(self.records.len())].to_vec(),
            ..self.clone()
        };
        fs::write(path, prefix.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub(crate) fn append(path: &Path, record: &EpochRecord, digest: &str) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", record.to_csv(digest)).map_err(|e| Error::io(path, e))
    }
}
