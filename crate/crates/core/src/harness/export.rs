use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concepts::AttentionPoint;
use crate::error::Result;
use crate::metrics::{format_cell, ConceptMetricTable, DynamicAuc};
use crate::survival::KmCurve;

use super::pipeline::{SurvivalSetting, SurvivalSummary};
use super::stratify::RiskFactor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub slide_id: String,
    pub concept: String,
    pub points: Vec<AttentionPoint>,
}

/// Results gathered for plotting; every part is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    /// `(group, curve)`.
    pub km_curves: Vec<(String, KmCurve)>,
    /// `(setting, fold, series)`.
    pub auc_series: Vec<(String, usize, DynamicAuc)>,
    /// `(setting, ranking)`.
    pub risk_factors: Vec<(String, Vec<RiskFactor>)>,
    pub concept_table: Option<ConceptMetricTable>,
    pub subtype_table: Option<ConceptMetricTable>,
    pub survival: Vec<(SurvivalSetting, SurvivalSummary)>,
    /// Grid points used for C-AUC and IBS, recorded in the survival header.
    pub grid_points: usize,
    pub attention: Vec<AttentionExport>,
}

fn create(dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> Result<impl Write> {
    let path = dir.join(name);
    let w = BufWriter::new(fs::File::create(&path)?);
    written.push(path);
    Ok(w)
}

/// Writes one tab-separated file per present component and returns their
/// paths. Output bytes depend only on `data`.
///
/// | file                  | columns                                          |
/// |-----------------------|--------------------------------------------------|
/// | `km_curves.tsv`       | `time survival at_risk events group`             |
/// | `time_auc.tsv`        | `setting fold time auc`                          |
/// | `risk_factors.tsv`    | `setting rank concept coefficient`               |
/// | `concept_metrics.tsv` | `concept ACC F1 AUC AP`                          |
/// | `subtype_metrics.tsv` | `concept ACC F1 AUC AP`                          |
/// | `survival_metrics.tsv`| `setting C-Index C-IPCW C-AUC IBS KM-IBS`        |
/// | `attention.tsv`       | `slide_id concept x y weight`                    |
pub fn export_plot_data(data: &PlotData, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if !data.km_curves.is_empty() {
        let mut w = create(out_dir, "km_curves.tsv", &mut written)?;
        writeln!(w, "time\tsurvival\tat_risk\tevents\tgroup")?;
        for (group, km) in &data.km_curves {
            for i in 0..km.times.len() {
                writeln!(w, "{}\t{}\t{}\t{}\t{group}", km.times[i], km.survival[i], km.at_risk[i], km.events[i])?;
            }
        }
        w.flush()?;
    }
    if !data.auc_series.is_empty() {
        let mut w = create(out_dir, "time_auc.tsv", &mut written)?;
        writeln!(w, "setting\tfold\ttime\tauc")?;
        for (setting, fold, series) in &data.auc_series {
            for (t, a) in series.defined_points() {
                writeln!(w, "{setting}\t{fold}\t{t}\t{a}")?;
            }
        }
        w.flush()?;
    }
    if !data.risk_factors.is_empty() {
        let mut w = create(out_dir, "risk_factors.tsv", &mut written)?;
        writeln!(w, "setting\trank\tconcept\tcoefficient")?;
        for (setting, factors) in &data.risk_factors {
            for f in factors {
                writeln!(w, "{setting}\t{}\t{}\t{}", f.rank, f.feature, f.coefficient)?;
            }
        }
        w.flush()?;
    }
    for (name, table) in [("concept_metrics.tsv", &data.concept_table), ("subtype_metrics.tsv", &data.subtype_table)] {
        if let Some(table) = table {
            let mut w = create(out_dir, name, &mut written)?;
            table.write_tsv(&mut w)?;
            w.flush()?;
        }
    }
    if !data.survival.is_empty() {
        let mut w = create(out_dir, "survival_metrics.tsv", &mut written)?;
        writeln!(
            w,
            "# C-IPCW tau: 90th percentile of test times; C-AUC and IBS grid: {} points from the 10th to the 90th percentile",
            data.grid_points
        )?;
        writeln!(w, "setting\tC-Index\tC-IPCW\tC-AUC\tIBS\tKM-IBS")?;
        for (setting, s) in &data.survival {
            writeln!(
                w,
                "{setting}\t{}\t{}\t{}\t{}\t{}",
                format_cell(&s.cindex),
                format_cell(&s.cipcw),
                format_cell(&s.cauc),
                format_cell(&s.ibs),
                format_cell(&s.km_ibs)
            )?;
        }
        w.flush()?;
    }
    if !data.attention.is_empty() {
        let mut w = create(out_dir, "attention.tsv", &mut written)?;
        writeln!(w, "slide_id\tconcept\tx\ty\tweight")?;
        for a in &data.attention {
            for p in &a.points {
                writeln!(w, "{}\t{}\t{}\t{}\t{}", a.slide_id, a.concept, p.x, p.y, p.weight)?;
            }
        }
        w.flush()?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SurvivalRecord;
    use crate::survival::km_fit;

    fn sample() -> PlotData {
        let recs: Vec<SurvivalRecord> = [(1.0, true), (2.0, false), (3.0, true)]
            .iter()
            .enumerate()
            .map(|(i, &(t, e))| SurvivalRecord::new(format!("p{i}"), t, e))
            .collect();
        PlotData {
            km_curves: vec![("low".into(), km_fit(&recs))],
            auc_series: vec![(
                "cbm".into(),
                0,
                DynamicAuc {
                    times: vec![1.0, 2.0, 3.0],
                    auc: vec![Some(0.7), None, Some(0.8)],
                    integrated: 0.75,
                    undefined: 1,
                    clipped: 0,
                },
            )],
            grid_points: 3,
            ..PlotData::default()
        }
    }

    #[test]
    fn km_columns_and_auc_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_plot_data(&sample(), dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let km = fs::read_to_string(dir.path().join("km_curves.tsv")).unwrap();
        assert_eq!(km.lines().next().unwrap(), "time\tsurvival\tat_risk\tevents\tgroup");
        let auc = fs::read_to_string(dir.path().join("time_auc.tsv")).unwrap();
        assert_eq!(auc.lines().count(), 1 + 2);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        export_plot_data(&sample(), a.path()).unwrap();
        export_plot_data(&sample(), b.path()).unwrap();
        for name in ["km_curves.tsv", "time_auc.tsv"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn unwritable_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(export_plot_data(&sample(), &file.join("sub")).is_err());
    }
}
