use serde::{Deserialize, Serialize};

use super::cv::{run_cv, CvReport};
use super::dataset::Dataset;
use crate::classifier::LossKind;
use crate::error::{Error, Result};
use crate::pipeline::{Resources, TrainConfig};

/// The six configurations, full model first.
pub const VARIANTS: [&str; 6] = ["full", "-keywords", "-synonyms", "-focal", "-keywords-synonyms", "baseline"];

pub fn variant_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    c.enable_keywords = true;
    c.enable_synonyms = true;
    c.loss_kind = LossKind::Focal;
    match variant {
        "full" => {}
        "-keywords" => c.enable_keywords = false,
        "-synonyms" => c.enable_synonyms = false,
        "-focal" => c.loss_kind = LossKind::CrossEntropy,
        "-keywords-synonyms" => {
            c.enable_keywords = false;
            c.enable_synonyms = false;
        }
        "baseline" => {
            c.enable_keywords = false;
            c.enable_synonyms = false;
            c.loss_kind = LossKind::CrossEntropy;
        }
        other => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// F1 minus the full model's F1, in the same units.
    pub delta_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<CvReport>,
}

impl AblationTable {
    /// Aligned columns; metrics in percent.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<20} {:>8} {:>8} {:>8} {:>8}\n", "variant", "P", "R", "F1", "dF1");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>8.2} {:>8.2} {:>8.2} {:>+8.2}\n",
                r.variant,
                100.0 * r.precision,
                100.0 * r.recall,
                100.0 * r.f1,
                100.0 * r.delta_f1
            ));
        }
        out
    }

    /// Same numbers as [`Self::to_text`], as CSV.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Internal(e.to_string());
        w.write_record(["variant", "precision", "recall", "f1", "delta_f1"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                format!("{:.2}", 100.0 * r.precision),
                format!("{:.2}", 100.0 * r.recall),
                format!("{:.2}", 100.0 * r.f1),
                format!("{:.2}", 100.0 * r.delta_f1),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }
}

pub fn run_ablation(
    cfg: &TrainConfig,
    resources: &Resources,
    dataset: &Dataset,
    k: usize,
    jobs: Option<usize>,
) -> Result<AblationTable> {
    let mut reports = Vec::with_capacity(VARIANTS.len());
    for v in VARIANTS {
        log::info!("ablation variant {v}");
        reports.push(run_cv(&variant_config(cfg, v)?, resources, dataset, k, jobs)?);
    }
    let full_f1 = reports[0].mean.f1;
    let rows = VARIANTS
        .iter()
        .zip(&reports)
        .map(|(v, r)| AblationRow {
            variant: v.to_string(),
            precision: r.mean.precision,
            recall: r.mean.recall,
            f1: r.mean.f1,
            delta_f1: r.mean.f1 - full_f1,
        })
        .collect();
    Ok(AblationTable { rows, reports })
}
