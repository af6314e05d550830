use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{
    predict_concepts, predict_risks, train_cbm, train_risk_model, CbmModel, ConceptPrediction, ModelConfig, RiskModel,
    TrainConfig, TrainReport,
};
use crate::error::{Error, Result};
use crate::graph::WsiGraph;
use crate::ingest::{StudyDataset, Subtype, SurvivalRecord};
use crate::metrics::{
    average_precision, balanced_accuracy, concept_summary, cumulative_dynamic_auc, default_evaluation_grid, f1_score,
    harrell_cindex, integrated_brier_score, roc_auc, uno_cindex_ipcw, ConceptMetricRow, ConceptMetricTable, DynamicAuc,
    MeanStd, DEFAULT_GRID_POINTS,
};
use crate::nn::DenseMatrix;
use crate::rng::SeedStream;
use crate::survival::{
    default_lambda_grid, fit_coxph_with, km_fit, predict_risk, predict_survival_matrix, select_lambda_with, CoxModel,
    CoxOptions, SelectionRule,
};

use super::folds::FoldPlan;

/// Everything a cross-validated run needs besides the data and the folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub model: ModelConfig,
    /// `seed` is replaced by a per-fold substream.
    pub train: TrainConfig,
    pub lambda_grid: Vec<f64>,
    pub selection_rule: SelectionRule,
    pub inner_folds: usize,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lambda_grid: default_lambda_grid(),
            selection_rule: SelectionRule::default(),
            inner_folds: 5,
            grid_points: DEFAULT_GRID_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldCbm {
    pub model: CbmModel,
    pub report: TrainReport,
    /// Predictions for every sample of the dataset.
    pub predictions: Vec<ConceptPrediction>,
}

#[derive(Debug, Clone)]
pub struct FoldRisk {
    pub model: RiskModel,
    pub report: TrainReport,
    pub risks: Vec<f64>,
    pub pooled: Vec<Vec<f64>>,
}

/// Cross-validation over one dataset, caching the per-fold neural models so
/// that several settings can share them.
pub struct CvSession<'a> {
    dataset: &'a StudyDataset,
    plan: FoldPlan,
    options: CvOptions,
    cbm: Vec<Option<FoldCbm>>,
    risk: Vec<Option<FoldRisk>>,
}

fn fold_seed(root: u64, what: &str, fold: usize) -> u64 {
    SeedStream::new(root).derive(what).derive(&format!("fold{fold}")).root()
}

impl<'a> CvSession<'a> {
    pub fn new(dataset: &'a StudyDataset, plan: FoldPlan, options: CvOptions) -> Result<Self> {
        if plan.n != dataset.len() {
            return Err(Error::Shape {
                op: "CvSession::new",
                detail: format!("fold plan covers {} samples, dataset has {}", plan.n, dataset.len()),
            });
        }
        for i in 0..dataset.len() {
            dataset.graph(i)?;
        }
        let k = plan.k();
        Ok(Self {
            dataset,
            plan,
            options,
            cbm: vec![None; k],
            risk: vec![None; k],
        })
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    pub fn options(&self) -> &CvOptions {
        &self.options
    }

    pub fn dataset(&self) -> &StudyDataset {
        self.dataset
    }

    fn graphs(&self) -> Vec<&'a WsiGraph> {
        let ds = self.dataset;
        (0..ds.len()).map(|i| ds.graph(i).expect("checked in new")).collect()
    }

    fn input_dim(&self) -> usize {
        self.dataset.graph(0).map(|g| g.dim()).unwrap_or(0)
    }

    /// Trains the concept model of every fold not yet trained.
    pub fn ensure_cbm(&mut self) -> Result<()> {
        let missing: Vec<usize> = (0..self.plan.k()).filter(|&f| self.cbm[f].is_none()).collect();
        let graphs = self.graphs();
        let trained: Vec<(usize, FoldCbm)> = missing
            .par_iter()
            .map(|&f| {
                let train_idx = self.plan.train(f);
                let train = self.dataset.subset(&train_idx);
                let seed = fold_seed(self.options.seed, "cbm", f);
                let mut model =
                    CbmModel::new(self.options.model.clone(), self.dataset.vocabulary.clone(), self.input_dim(), seed)?;
                let config = TrainConfig {
                    seed,
                    ..self.options.train.clone()
                };
                let report = train_cbm(&mut model, &train, &config)?;
                let predictions = predict_concepts(&model, &graphs)?;
                info!("fold {f}: concept model trained, final loss {:.4}", report.loss_trace.last().copied().unwrap_or(f64::NAN));
                Ok((f, FoldCbm { model, report, predictions }))
            })
            .collect::<Result<_>>()?;
        for (f, m) in trained {
            self.cbm[f] = Some(m);
        }
        Ok(())
    }

    /// Trains the end-to-end risk model of every fold not yet trained.
    pub fn ensure_risk(&mut self) -> Result<()> {
        let missing: Vec<usize> = (0..self.plan.k()).filter(|&f| self.risk[f].is_none()).collect();
        let graphs = self.graphs();
        let k = self.dataset.num_concepts();
        let trained: Vec<(usize, FoldRisk)> = missing
            .par_iter()
            .map(|&f| {
                let train = self.dataset.subset(&self.plan.train(f));
                let seed = fold_seed(self.options.seed, "risk", f);
                let mut model = RiskModel::new(self.options.model.clone(), self.input_dim(), k, seed)?;
                let config = TrainConfig {
                    seed,
                    ..self.options.train.clone()
                };
                let report = train_risk_model(&mut model, &train, &config)?;
                let risks = predict_risks(&model, &graphs)?;
                let pooled = graphs.iter().map(|g| model.pooled_features(g)).collect::<Result<_>>()?;
                info!("fold {f}: risk model trained");
                Ok((f, FoldRisk { model, report, risks, pooled }))
            })
            .collect::<Result<_>>()?;
        for (f, m) in trained {
            self.risk[f] = Some(m);
        }
        Ok(())
    }

    /// Installs previously trained concept models, one per fold.
    pub fn set_cbm_models(&mut self, models: Vec<CbmModel>) -> Result<()> {
        if models.len() != self.plan.k() {
            return Err(Error::Shape {
                op: "CvSession::set_cbm_models",
                detail: format!("{} models for {} folds", models.len(), self.plan.k()),
            });
        }
        let graphs = self.graphs();
        for (f, model) in models.into_iter().enumerate() {
            if model.input_dim() != self.input_dim() || model.vocabulary != self.dataset.vocabulary {
                return Err(Error::InvalidInput(format!("concept model of fold {f} does not match the dataset")));
            }
            let predictions = predict_concepts(&model, &graphs)?;
            self.cbm[f] = Some(FoldCbm {
                model,
                report: TrainReport::default(),
                predictions,
            });
        }
        Ok(())
    }

    pub fn cbm_fold(&mut self, fold: usize) -> Result<&FoldCbm> {
        self.ensure_cbm()?;
        Ok(self.cbm[fold].as_ref().expect("trained above"))
    }

    /// Concept predictions of each sample from the model of the fold in
    /// which it was held out.
    pub fn out_of_fold_predictions(&mut self) -> Result<Vec<ConceptPrediction>> {
        self.ensure_cbm()?;
        let mut out = vec![None; self.dataset.len()];
        for f in 0..self.plan.k() {
            let fold = self.cbm[f].as_ref().expect("trained above");
            for &i in self.plan.test(f) {
                out[i] = Some(fold.predictions[i].clone());
            }
        }
        Ok(out.into_iter().map(|p| p.expect("folds cover every sample")).collect())
    }

    pub fn concept_benchmark(&mut self) -> Result<ConceptBenchmark> {
        self.ensure_cbm()?;
        let k = self.dataset.num_concepts();
        let mut fold_metrics = Vec::with_capacity(self.plan.k());
        for f in 0..self.plan.k() {
            let preds = &self.cbm[f].as_ref().expect("trained above").predictions;
            let test = self.plan.test(f);
            let metrics: Vec<ConceptFoldMetrics> = (0..k)
                .map(|c| {
                    let mut labels = Vec::new();
                    let mut soft = Vec::new();
                    let mut hard = Vec::new();
                    for &i in test {
                        if let Some(y) = self.dataset.samples[i].labels.labels[c] {
                            labels.push(y);
                            soft.push(preds[i].soft[c]);
                            hard.push(preds[i].hard[c]);
                        }
                    }
                    ConceptFoldMetrics {
                        acc: balanced_accuracy(&hard, &labels).ok(),
                        f1: (!labels.is_empty()).then(|| f1_score(&hard, &labels).ok()).flatten(),
                        auc: roc_auc(&soft, &labels).ok(),
                        ap: average_precision(&soft, &labels).ok(),
                    }
                })
                .collect();
            fold_metrics.push(metrics);
        }
        let names = self.dataset.vocabulary.names();
        let all: Vec<usize> = (0..k).collect();
        let subtypes: Vec<usize> = (0..k)
            .filter(|&c| matches!(names[c].parse::<Subtype>(), Ok(s) if s != Subtype::Unknown))
            .collect();
        Ok(ConceptBenchmark {
            table: summarise(names, &all, &fold_metrics),
            subtype_table: (!subtypes.is_empty()).then(|| summarise(names, &subtypes, &fold_metrics)),
            fold_metrics,
        })
    }

    /// Covariates for a Cox-based setting, one row per sample, using the
    /// models of `fold`.
    fn covariates(&mut self, setting: SurvivalSetting, fold: usize) -> Result<(DenseMatrix, Vec<String>)> {
        let n = self.dataset.len();
        match setting {
            SurvivalSetting::EndToEndCox => Err(Error::InvalidInput("end-to-end setting has no covariates".into())),
            SurvivalSetting::BinaryConceptsCoxPH => Ok((binary_design(self.dataset), self.dataset.vocabulary.names().to_vec())),
            SurvivalSetting::CbmLogitsCoxPH => {
                self.ensure_cbm()?;
                let preds = &self.cbm[fold].as_ref().expect("trained above").predictions;
                let rows: Vec<Vec<f64>> = preds.iter().map(|p| p.soft.clone()).collect();
                Ok((DenseMatrix::from_rows(&rows)?, self.dataset.vocabulary.names().to_vec()))
            }
            SurvivalSetting::AggFeaturesCoxPH => {
                self.ensure_risk()?;
                let pooled = &self.risk[fold].as_ref().expect("trained above").pooled;
                let m = DenseMatrix::from_rows(pooled)?;
                debug_assert_eq!(m.rows(), n);
                let names = (0..m.cols()).map(|j| format!("h{j}")).collect();
                Ok((m, names))
            }
        }
    }

    fn fit_cox(&self, x: &DenseMatrix, records: &[SurvivalRecord], names: &[String], seed: u64) -> Result<CoxModel> {
        let selection = select_lambda_with(
            x,
            records,
            &self.options.lambda_grid,
            self.options.inner_folds,
            seed,
            self.options.selection_rule,
        )?;
        fit_coxph_with(x, records, selection.lambda, names, &CoxOptions::default())
    }

    pub fn survival_setting(&mut self, setting: SurvivalSetting) -> Result<SettingResult> {
        let records = self.dataset.outcomes();
        let n = records.len();
        let mut folds = Vec::new();
        let mut dropped = Vec::new();
        let mut oof_risk = vec![None; n];
        for f in 0..self.plan.k() {
            let train_idx = self.plan.train(f);
            let test_idx = self.plan.test(f).to_vec();
            let train: Vec<SurvivalRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
            let test: Vec<SurvivalRecord> = test_idx.iter().map(|&i| records[i].clone()).collect();
            if !test.iter().any(|r| r.event) {
                warn!("{setting}: fold {f} has no test events; dropped");
                dropped.push(f);
                continue;
            }
            let (risks, model) = match setting {
                SurvivalSetting::EndToEndCox => {
                    self.ensure_risk()?;
                    let all = &self.risk[f].as_ref().expect("trained above").risks;
                    (test_idx.iter().map(|&i| all[i]).collect::<Vec<f64>>(), None)
                }
                _ => {
                    let (x, names) = self.covariates(setting, f)?;
                    let model = self.fit_cox(&x.select_rows(&train_idx), &train, &names, fold_seed(self.options.seed, "lambda", f))?;
                    let xte = x.select_rows(&test_idx);
                    (predict_risk(&model, &xte)?, Some((model, xte)))
                }
            };
            for (&i, &r) in test_idx.iter().zip(&risks) {
                oof_risk[i] = Some(r);
            }
            let grid = default_evaluation_grid(&test, self.options.grid_points)?;
            let train_max = train.iter().map(|r| r.time).fold(0.0, f64::max);
            let times: Vec<f64> = grid.times.iter().copied().filter(|&t| t <= train_max).collect();
            let cindex = harrell_cindex(&risks, &test)?;
            let cipcw = uno_cindex_ipcw(&risks, &train, &test, grid.tau).ok().map(|c| c.value);
            let cauc = cumulative_dynamic_auc(&risks, &train, &test, &times).ok();
            let (ibs, lambda) = match &model {
                Some((m, xte)) if times.len() >= 2 => {
                    let s = predict_survival_matrix(m, xte, &times)?;
                    (Some(integrated_brier_score(&s, &train, &test, &times)?.integrated), Some(m.ridge_lambda))
                }
                Some((m, _)) => (None, Some(m.ridge_lambda)),
                None => (None, None),
            };
            let km_ibs = if times.len() >= 2 {
                let km = km_fit(&train);
                let row: Vec<f64> = times.iter().map(|&t| km.survival_at(t)).collect();
                let mut s = DenseMatrix::zeros(test.len(), times.len());
                for i in 0..test.len() {
                    s.row_mut(i).copy_from_slice(&row);
                }
                Some(integrated_brier_score(&s, &train, &test, &times)?.integrated)
            } else {
                None
            };
            folds.push(FoldSurvival {
                fold: f,
                lambda,
                tau: grid.tau,
                cindex,
                cipcw,
                cauc,
                ibs,
                km_ibs,
            });
        }
        if folds.is_empty() {
            return Err(Error::NoEvents);
        }
        let collect = |g: &dyn Fn(&FoldSurvival) -> Option<f64>| MeanStd::from_values(&folds.iter().filter_map(g).collect::<Vec<_>>());
        let summary = SurvivalSummary {
            cindex: collect(&|f| Some(f.cindex)),
            cipcw: collect(&|f| f.cipcw),
            cauc: collect(&|f| f.cauc.as_ref().map(|a| a.integrated)),
            ibs: if setting == SurvivalSetting::EndToEndCox { None } else { collect(&|f| f.ibs) },
            km_ibs: collect(&|f| f.km_ibs),
        };
        let final_model = match setting {
            SurvivalSetting::EndToEndCox => None,
            _ => {
                let (x, names) = self.out_of_fold_covariates(setting)?;
                Some(self.fit_cox(&x, &records, &names, fold_seed(self.options.seed, "lambda", usize::MAX))?)
            }
        };
        Ok(SettingResult {
            setting,
            summary,
            folds,
            dropped_folds: dropped,
            oof_risk,
            final_model,
        })
    }

    /// Covariates where each sample's row comes from the fold that held it out.
    pub fn out_of_fold_covariates(&mut self, setting: SurvivalSetting) -> Result<(DenseMatrix, Vec<String>)> {
        if setting == SurvivalSetting::BinaryConceptsCoxPH {
            return self.covariates(setting, 0);
        }
        let mut out: Option<(DenseMatrix, Vec<String>)> = None;
        for f in 0..self.plan.k() {
            let (x, names) = self.covariates(setting, f)?;
            let (m, _) = out.get_or_insert_with(|| (DenseMatrix::zeros(x.rows(), x.cols()), names));
            for &i in self.plan.test(f) {
                m.row_mut(i).copy_from_slice(x.row(i));
            }
        }
        out.ok_or_else(|| Error::EmptyInput("fold plan".into()))
    }
}

/// Ground-truth labels as a 0/1 design matrix; missing labels become 0.
pub fn binary_design(dataset: &StudyDataset) -> DenseMatrix {
    let k = dataset.num_concepts();
    let mut m = DenseMatrix::zeros(dataset.len(), k);
    for (i, s) in dataset.samples.iter().enumerate() {
        for (c, l) in s.labels.labels.iter().enumerate() {
            if *l == Some(true) {
                m.set(i, c, 1.0);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptFoldMetrics {
    pub acc: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBenchmark {
    pub table: ConceptMetricTable,
    /// Rows for concepts named after a tumour subtype, if any.
    pub subtype_table: Option<ConceptMetricTable>,
    /// `[fold][concept]`.
    pub fold_metrics: Vec<Vec<ConceptFoldMetrics>>,
}

fn summarise(names: &[String], concepts: &[usize], folds: &[Vec<ConceptFoldMetrics>]) -> ConceptMetricTable {
    type Pick = fn(&ConceptFoldMetrics) -> Option<f64>;
    let picks: [Pick; 4] = [|m| m.acc, |m| m.f1, |m| m.auc, |m| m.ap];
    let mut undefined = 0;
    let rows = concepts
        .iter()
        .map(|&c| {
            let cell = |p: Pick| MeanStd::from_values(&folds.iter().filter_map(|f| p(&f[c])).collect::<Vec<_>>());
            ConceptMetricRow {
                name: names[c].clone(),
                acc: cell(picks[0]),
                f1: cell(picks[1]),
                auc: cell(picks[2]),
                ap: cell(picks[3]),
            }
        })
        .collect();
    for f in folds {
        for &c in concepts {
            undefined += picks.iter().filter(|p| p(&f[c]).is_none()).count();
        }
    }
    let summary_row = |name: &str, top: bool| {
        let cell = |p: Pick| {
            let per_fold: Vec<f64> = folds
                .iter()
                .map(|f| {
                    let s = concept_summary(&concepts.iter().map(|&c| p(&f[c])).collect::<Vec<_>>());
                    if top {
                        s.top10_mean
                    } else {
                        s.mean
                    }
                })
                .filter(|v| v.is_finite())
                .collect();
            MeanStd::from_values(&per_fold)
        };
        ConceptMetricRow {
            name: name.to_string(),
            acc: cell(picks[0]),
            f1: cell(picks[1]),
            auc: cell(picks[2]),
            ap: cell(picks[3]),
        }
    };
    ConceptMetricTable {
        rows,
        top10: summary_row("Top10", true),
        mean: summary_row("Mean", false),
        undefined,
    }
}

/// Trains and evaluates the concept model under cross-validation.
pub fn run_concept_benchmark(
    dataset: &StudyDataset,
    model: &ModelConfig,
    train: &TrainConfig,
    folds: &FoldPlan,
) -> Result<ConceptBenchmark> {
    let options = CvOptions {
        model: model.clone(),
        train: train.clone(),
        seed: train.seed,
        ..CvOptions::default()
    };
    CvSession::new(dataset, folds.clone(), options)?.concept_benchmark()
}

/// Cross-validated evaluation of one survival setting.
pub fn run_survival_setting(
    dataset: &StudyDataset,
    setting: SurvivalSetting,
    folds: &FoldPlan,
    options: &CvOptions,
) -> Result<SettingResult> {
    CvSession::new(dataset, folds.clone(), options.clone())?.survival_setting(setting)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurvivalSetting {
    EndToEndCox,
    AggFeaturesCoxPH,
    CbmLogitsCoxPH,
    BinaryConceptsCoxPH,
}

impl SurvivalSetting {
    pub const ALL: [SurvivalSetting; 4] = [
        SurvivalSetting::EndToEndCox,
        SurvivalSetting::AggFeaturesCoxPH,
        SurvivalSetting::CbmLogitsCoxPH,
        SurvivalSetting::BinaryConceptsCoxPH,
    ];

    /// Short name used on the command line.
    pub fn key(self) -> &'static str {
        match self {
            SurvivalSetting::EndToEndCox => "e2e",
            SurvivalSetting::AggFeaturesCoxPH => "agg",
            SurvivalSetting::CbmLogitsCoxPH => "cbm",
            SurvivalSetting::BinaryConceptsCoxPH => "binary",
        }
    }
}

impl fmt::Display for SurvivalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SurvivalSetting::EndToEndCox => "EndToEndCox",
            SurvivalSetting::AggFeaturesCoxPH => "AggFeaturesCoxPH",
            SurvivalSetting::CbmLogitsCoxPH => "CbmLogitsCoxPH",
            SurvivalSetting::BinaryConceptsCoxPH => "BinaryConceptsCoxPH",
        };
        f.write_str(s)
    }
}

impl FromStr for SurvivalSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.key().eq_ignore_ascii_case(s) || x.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown survival setting {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSurvival {
    pub fold: usize,
    /// Ridge penalty chosen inside the training fold; `None` for end-to-end.
    pub lambda: Option<f64>,
    pub tau: f64,
    pub cindex: f64,
    pub cipcw: Option<f64>,
    pub cauc: Option<DynamicAuc>,
    /// `None` when the setting has no survival function.
    pub ibs: Option<f64>,
    /// IBS of the training Kaplan-Meier curve used for every test subject.
    pub km_ibs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSummary {
    pub cindex: Option<MeanStd>,
    pub cipcw: Option<MeanStd>,
    pub cauc: Option<MeanStd>,
    pub ibs: Option<MeanStd>,
    pub km_ibs: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub setting: SurvivalSetting,
    pub summary: SurvivalSummary,
    pub folds: Vec<FoldSurvival>,
    pub dropped_folds: Vec<usize>,
    /// Held-out risk of each sample; `None` if its fold was dropped.
    pub oof_risk: Vec<Option<f64>>,
    /// Cox model refitted on all samples' out-of-fold covariates.
    pub final_model: Option<CoxModel>,
}
