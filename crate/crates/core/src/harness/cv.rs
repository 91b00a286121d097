use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::folds::stratified_kfold;
use super::metrics::{mean_metrics, MeanMetrics, Metrics};
use crate::error::{Error, Result};
use crate::pipeline::{train, EpochRecord, Resources, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

impl CvReport {
    /// Aligned columns, percentages.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<6} {:>6} {:>6} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9}\n",
            "fold", "train", "test", "tp", "fp", "fn", "tn", "P", "R", "F1"
        );
        for f in &self.folds {
            let m = &f.metrics;
            out.push_str(&format!(
                "{:<6} {:>6} {:>6} {:>5} {:>5} {:>5} {:>5} {:>9.2} {:>9.2} {:>9.2}\n",
                f.fold + 1,
                f.train_size,
                f.test_size,
                m.tp,
                m.fp,
                m.fn_,
                m.tn,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1
            ));
        }
        out.push_str(&format!(
            "{:<6} {:>6} {:>6} {:>5} {:>5} {:>5} {:>5} {:>9.2} {:>9.2} {:>9.2}\n",
            "mean",
            "",
            "",
            "",
            "",
            "",
            "",
            100.0 * self.mean.precision,
            100.0 * self.mean.recall,
            100.0 * self.mean.f1
        ));
        out
    }
}

/// Fails if a training-side artifact depends on text outside the training
/// portion.
pub fn leakage_guard(outcome: &TrainOutcome, test: &Dataset) -> Result<()> {
    let f = &outcome.model.featurizer;
    f.assert_fitted_on(&outcome.train_tokens)?;
    let train: BTreeSet<&str> = outcome.train_tokens.iter().flatten().map(String::as_str).collect();
    for ex in &test.examples {
        for tok in f.tokens(&ex.text) {
            if train.contains(tok.as_str()) {
                continue;
            }
            if f.vocab.get(&tok).is_some() || f.synonym_map.contains_key(&tok) {
                return Err(Error::Leakage(format!("test-only token {tok:?} reached a training artifact")));
            }
        }
    }
    Ok(())
}

fn run_fold(cfg: &TrainConfig, resources: &Resources, dataset: &Dataset, train_idx: &[usize], test_idx: &[usize], fold: usize) -> Result<FoldResult> {
    let train_set = dataset.subset(train_idx, format!("{}-fold{fold}-train", dataset.name));
    let test_set = dataset.subset(test_idx, format!("{}-fold{fold}-test", dataset.name));
    let outcome = train(cfg, resources, &train_set, None)?;
    leakage_guard(&outcome, &test_set)?;
    let metrics = outcome.model.evaluate(&test_set)?;
    log::info!("fold {}: F1 {:.4}", fold + 1, metrics.f1);
    Ok(FoldResult {
        fold,
        train_size: train_set.len(),
        test_size: test_set.len(),
        metrics,
        history: outcome.history,
    })
}

/// Stratified k-fold cross-validation. Folds run on `jobs` threads (all
/// cores when `None`); results do not depend on the thread count.
pub fn run_cv(cfg: &TrainConfig, resources: &Resources, dataset: &Dataset, k: usize, jobs: Option<usize>) -> Result<CvReport> {
    cfg.validate()?;
    let plan = stratified_kfold(&dataset.labels(), k, cfg.seed)?;
    let work = || -> Result<Vec<FoldResult>> {
        (0..k)
            .into_par_iter()
            .map(|f| run_fold(cfg, resources, dataset, &plan.train_indices(f), &plan.test_indices(f), f))
            .collect()
    };
    let folds = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let metrics: Vec<Metrics> = folds.iter().map(|f| f.metrics).collect();
    Ok(CvReport {
        k,
        mean: mean_metrics(&metrics),
        folds,
    })
}
