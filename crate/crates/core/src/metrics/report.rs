use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Mean and sample standard deviation of a set of fold values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// `None` when no value is present.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, std, n })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// `mean±std`, or `N/A`.
pub fn format_cell(v: &Option<MeanStd>) -> String {
    match v {
        Some(m) => m.to_string(),
        None => "N/A".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetricRow {
    pub name: String,
    pub acc: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    pub auc: Option<MeanStd>,
    pub ap: Option<MeanStd>,
}

/// Per-concept rows followed by `Top10` and `Mean` summary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetricTable {
    pub rows: Vec<ConceptMetricRow>,
    pub top10: ConceptMetricRow,
    pub mean: ConceptMetricRow,
    /// Concept-fold cells where a metric was undefined.
    pub undefined: usize,
}

impl ConceptMetricTable {
    pub fn all_rows(&self) -> impl Iterator<Item = &ConceptMetricRow> {
        self.rows.iter().chain([&self.top10, &self.mean])
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "concept\tACC\tF1\tAUC\tAP")?;
        for row in self.all_rows() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                row.name,
                format_cell(&row.acc),
                format_cell(&row.f1),
                format_cell(&row.auc),
                format_cell(&row.ap)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample_definition() {
        let m = MeanStd::from_values(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::from_values(&[0.5]).unwrap().std, 0.0);
        assert!(MeanStd::from_values(&[]).is_none());
        assert_eq!(format_cell(&None), "N/A");
        assert_eq!(format_cell(&Some(m)), "2.0000±1.0000");
    }
}
