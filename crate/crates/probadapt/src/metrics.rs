//! Metrics output: a fixed-column training CSV and a JSON evaluation
//! report. Numbers are written with Rust's shortest round-trip `f64`
//! formatting, so identical runs produce byte-identical files.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_unsupervised: f64,
    pub kl: f64,
    /// Fraction of pseudo-label pixels whose weight is exactly zero.
    pub masked_fraction: f64,
    pub mean_consensus: f64,
    /// Present only on validation iterations.
    pub val_dice: Option<f64>,
    pub learning_rate: f64,
}

pub const CSV_HEADER: &str =
    "iteration,loss_total,loss_sup,loss_unsup,kl,masked_frac,mean_consensus,val_dice,lr";

impl StepRecord {
    fn to_csv_row(&self) -> String {
        let val = match self.val_dice {
            Some(d) => format!("{d}"),
            None => String::new(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.loss_total,
            self.loss_supervised,
            self.loss_unsupervised,
            self.kl,
            self.masked_fraction,
            self.mean_consensus,
            val,
            self.learning_rate
        )
    }
}

/// Streaming CSV writer; the header goes out on creation.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_csv_row())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a training CSV written by [`MetricsWriter`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, detail: &str| {
        Error::InvalidInput(format!("{}:{line}: {detail}", path.display()))
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        _ => return Err(bad(1, "missing or unexpected header")),
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(bad(idx + 1, "expected 9 columns"));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| bad(idx + 1, &format!("bad number {:?}", fields[i])))
        };
        records.push(StepRecord {
            iteration: fields[0]
                .parse()
                .map_err(|_| bad(idx + 1, "bad iteration"))?,
            loss_total: num(1)?,
            loss_supervised: num(2)?,
            loss_unsupervised: num(3)?,
            kl: num(4)?,
            masked_fraction: num(5)?,
            mean_consensus: num(6)?,
            val_dice: if fields[7].is_empty() {
                None
            } else {
                Some(num(7)?)
            },
            learning_rate: num(8)?,
        });
    }
    Ok(records)
}

/// Evaluation result over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub split: String,
    pub n_images: usize,
    pub mean_dice: f64,
    pub per_image_dice: Vec<f64>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_records() -> Vec<StepRecord> {
        vec![
            StepRecord {
                iteration: 1,
                loss_total: 0.75,
                loss_supervised: 0.5,
                loss_unsupervised: 0.25,
                kl: 0.125,
                masked_fraction: 0.0,
                mean_consensus: 1.0,
                val_dice: None,
                learning_rate: 1e-3,
            },
            StepRecord {
                iteration: 2,
                loss_total: 0.1 + 0.2, // deliberately not exactly 0.3
                loss_supervised: f64::MIN_POSITIVE,
                loss_unsupervised: 1.0 / 3.0,
                kl: 12345.6789,
                masked_fraction: 0.015625,
                mean_consensus: 0.875,
                val_dice: Some(0.901234567890123),
                learning_rate: 5e-4,
            },
        ]
    }

    #[test]
    fn csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let records = sample_records();
        let mut writer = MetricsWriter::create(&path).unwrap();
        for r in &records {
            writer.write(r).unwrap();
        }
        writer.finish().unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), records);
    }

    #[test]
    fn identical_records_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        for path in [&a, &b] {
            let mut writer = MetricsWriter::create(path).unwrap();
            for r in sample_records() {
                writer.write(&r).unwrap();
            }
            writer.finish().unwrap();
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn header_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "iteration,loss\n1,0.5\n").unwrap();
        assert!(read_metrics_csv(&path).is_err());
    }

    #[test]
    fn eval_report_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.json");
        let report = EvalReport {
            domain: "target".into(),
            split: "test".into(),
            n_images: 3,
            mean_dice: 0.5,
            per_image_dice: vec![0.25, 0.5, 0.75],
        };
        report.write_json(&path).unwrap();
        assert_eq!(EvalReport::read_json(&path).unwrap(), report);
    }

    proptest! {
        /// Shortest round-trip formatting must restore the exact bits,
        /// otherwise re-runs could not be compared byte for byte.
        #[test]
        fn float_formatting_roundtrips(bits in any::<i64>()) {
            let value = f64::from_bits(bits as u64);
            prop_assume!(value.is_finite());
            let text = format!("{value}");
            prop_assert_eq!(text.parse::<f64>().unwrap().to_bits(), value.to_bits());
        }
    }
}
