//! `pathconcept` command-line driver.
//!
//! Every stage reads and writes state under the `--out` directory:
//!
//! ```text
//! <out>/dataset/          joined study tables
//! <out>/ingest.json       join and validation report
//! <out>/graphs.bin        slide graph cache
//! <out>/concepts/         fold checkpoints, benchmark, manifest
//! <out>/survival/<s>.json per-setting cross-validation results
//! <out>/stratify/<s>.json risk groups and log-rank test
//! <out>/fairness/<s>-<attribute>.json
//! <out>/export/           plot-ready tables
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pathconcept::concepts::{attention_map, load_cbm, save_cbm, CbmModel};
use pathconcept::graph::{build_slide_graph, graph_stats, load_graph_cache, save_graph_cache, KnnOptions};
use pathconcept::harness::{
    export_plot_data, fairness_report, make_folds, make_folds_stratified, stratify_and_test, synth_generate,
    top_risk_factors, AttentionExport, ConceptBenchmark, CvOptions, CvSession, FairnessAttribute, FoldPlan,
    PipelineConfig, PlotData, SettingResult, Stratification, SurvivalSetting,
};
use pathconcept::ingest::{
    join_study, validate_dataset, JoinReport, LoadedStudy, SlidePatches, StudyPaths, ValidationReport,
};
use pathconcept::{StudyDataset, SurvivalRecord};

#[derive(Parser, Debug)]
#[command(name = "pathconcept", version, about = "Concept bottleneck models and survival analysis on slide graphs")]
struct Cli {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory holding all state.
    #[arg(long, global = true, default_value = "pathconcept-run")]
    out: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Join and validate input tables into a dataset bundle.
    Ingest(IngestArgs),
    /// Build and cache the k-NN slide graphs.
    Graph {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Cross-validated concept model training and benchmark.
    TrainConcepts {
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Cross-validated survival analysis.
    Survival {
        /// e2e, agg, cbm or binary; all settings when omitted.
        #[arg(long)]
        setting: Vec<SurvivalSetting>,
        /// Comma-separated ridge penalties.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Split patients at the mean out-of-fold risk and compare survival.
    Stratify {
        #[arg(long, default_value = "cbm")]
        setting: SurvivalSetting,
    },
    /// Survival comparisons across demographic groups within each risk group.
    Fairness {
        #[arg(long)]
        attribute: FairnessAttribute,
        #[arg(long)]
        min_group: Option<usize>,
        #[arg(long, default_value = "cbm")]
        setting: SurvivalSetting,
    },
    /// Generate a synthetic study with planted concepts and hazards.
    Synth,
    /// Write plot-ready tables from the results present in the run directory.
    Export,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Directory with patches.tsv, concepts.tsv, outcomes.tsv,
    /// vocabulary.txt and optionally demographics.tsv.
    #[arg(long, conflicts_with_all = ["patches", "concepts", "outcomes", "vocabulary"])]
    study_dir: Option<PathBuf>,
    #[arg(long)]
    patches: Option<PathBuf>,
    #[arg(long)]
    concepts: Option<PathBuf>,
    #[arg(long)]
    outcomes: Option<PathBuf>,
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    #[arg(long)]
    demographics: Option<PathBuf>,
    /// Explicit slide to patient mapping; barcode prefixes are used otherwise.
    #[arg(long)]
    mapping: Option<PathBuf>,
}

/// An input problem that should exit with status 1.
#[derive(Debug)]
struct ValidationFailure(String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

#[derive(Debug, Serialize, Deserialize)]
struct IngestState {
    join: JoinReport,
    validation: ValidationReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphState {
    k: usize,
    graphs: usize,
    mean_nodes: f64,
    mean_degree: f64,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ConceptManifest {
    plan: FoldPlan,
    options: CvOptions,
}

struct Run {
    out: PathBuf,
    config: PipelineConfig,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn dataset_dir(&self) -> PathBuf {
        self.path("dataset")
    }

    fn load_study(&self) -> anyhow::Result<(StudyDataset, Vec<SlidePatches>)> {
        let dir = self.dataset_dir();
        if !dir.exists() {
            return Err(ValidationFailure(format!("no dataset in {}; run `ingest` or `synth` first", self.out.display())).into());
        }
        let mut paths = StudyPaths::in_dir(&dir);
        let mapping = dir.join("mapping.tsv");
        if mapping.exists() {
            paths.mapping = Some(mapping);
        }
        let loaded = LoadedStudy::load(&paths)?;
        let (dataset, _) = join_study(&loaded.vocabulary, &loaded.sources)?;
        Ok((dataset, loaded.patches))
    }

    /// The dataset with graphs attached, building them if no cache exists.
    fn load_dataset(&self) -> anyhow::Result<StudyDataset> {
        let (mut dataset, patches) = self.load_study()?;
        let cache = self.path("graphs.bin");
        let graphs = if cache.exists() {
            load_graph_cache(&cache)?
        } else {
            warn!("no graph cache; building graphs with k = {}", self.config.knn_k);
            build_graphs(&patches, self.config.knn_k)?
        };
        let attached = dataset.attach_graphs(graphs);
        if attached != dataset.len() {
            return Err(ValidationFailure(format!(
                "{} of {} samples have no graph; rerun `graph`",
                dataset.len() - attached,
                dataset.len()
            ))
            .into());
        }
        Ok(dataset)
    }

    fn fold_plan(&self, n: usize, dataset: &StudyDataset) -> anyhow::Result<FoldPlan> {
        let seed = self.config.seed;
        Ok(if self.config.stratify_folds {
            let events: Vec<bool> = dataset.samples.iter().map(|s| s.outcome.event).collect();
            make_folds_stratified(&events, self.config.folds, seed)?
        } else {
            make_folds(n, self.config.folds, seed)?
        })
    }
}

fn build_graphs(patches: &[SlidePatches], k: usize) -> anyhow::Result<Vec<pathconcept::WsiGraph>> {
    use rayon::prelude::*;
    let options = KnnOptions {
        k,
        ..KnnOptions::default()
    };
    Ok(patches
        .par_iter()
        .map(|s| build_slide_graph(s, options))
        .collect::<pathconcept::Result<Vec<_>>>()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn ingest(run: &Run, args: &IngestArgs) -> anyhow::Result<()> {
    let paths = match &args.study_dir {
        Some(dir) => {
            let mut p = StudyPaths::in_dir(dir);
            p.mapping = args.mapping.clone();
            if let Some(d) = &args.demographics {
                p.demographics = Some(d.clone());
            }
            p
        }
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone()
                    .ok_or_else(|| ValidationFailure(format!("--{flag} is required without --study-dir")))
            };
            StudyPaths {
                patches: need(&args.patches, "patches")?,
                concepts: need(&args.concepts, "concepts")?,
                outcomes: need(&args.outcomes, "outcomes")?,
                vocabulary: need(&args.vocabulary, "vocabulary")?,
                demographics: args.demographics.clone(),
                mapping: args.mapping.clone(),
            }
        }
    };
    let loaded = LoadedStudy::load(&paths)?;
    let (dataset, join) = join_study(&loaded.vocabulary, &loaded.sources)?;
    let validation = validate_dataset(&dataset, false);
    let valid = validation.is_valid();
    write_json(&run.path("ingest.json"), &IngestState { join: join.clone(), validation })?;
    if !valid {
        return Err(ValidationFailure(format!("dataset failed validation; see {}", run.path("ingest.json").display())).into());
    }
    pathconcept::ingest::write_study(&run.dataset_dir(), &dataset, &loaded.patches)?;
    if paths.mapping.is_some() {
        let rows: String = dataset
            .samples
            .iter()
            .map(|s| format!("{}\t{}\n", s.slide_id, s.patient_id))
            .collect();
        fs::write(run.dataset_dir().join("mapping.tsv"), format!("slide_id\tpatient_id\n{rows}"))?;
    }
    println!(
        "ingested {} patients ({} dropped, {} without demographics)",
        join.matched,
        join.dropped.len(),
        join.missing_demographics
    );
    Ok(())
}

fn graph(run: &Run, k: Option<usize>) -> anyhow::Result<()> {
    let k = k.unwrap_or(run.config.knn_k);
    let (dataset, patches) = run.load_study()?;
    let keep: std::collections::BTreeSet<&str> = dataset.samples.iter().map(|s| s.slide_id.as_str()).collect();
    let kept: Vec<SlidePatches> = patches.into_iter().filter(|s| keep.contains(s.slide_id.as_str())).collect();
    let graphs = build_graphs(&kept, k)?;
    save_graph_cache(&run.path("graphs.bin"), &graphs)?;
    let stats: Vec<_> = graphs.iter().map(graph_stats).collect();
    let n = stats.len().max(1) as f64;
    let state = GraphState {
        k,
        graphs: graphs.len(),
        mean_nodes: stats.iter().map(|s| s.n as f64).sum::<f64>() / n,
        mean_degree: stats.iter().map(|s| s.mean_degree).sum::<f64>() / n,
    };
    write_json(&run.path("graph.json"), &state)?;
    println!(
        "built {} graphs (k = {k}, mean {:.1} nodes, mean degree {:.2})",
        state.graphs, state.mean_nodes, state.mean_degree
    );
    Ok(())
}

fn train_concepts(run: &Run) -> anyhow::Result<()> {
    let dataset = run.load_dataset()?;
    let plan = run.fold_plan(dataset.len(), &dataset)?;
    let options = run.config.cv_options();
    let mut session = CvSession::new(&dataset, plan.clone(), options.clone())?;
    let bench = session.concept_benchmark()?;
    let dir = run.path("concepts");
    fs::create_dir_all(&dir)?;
    for f in 0..plan.k() {
        let fold = session.cbm_fold(f)?;
        save_cbm(&fold.model, BufWriter::new(File::create(dir.join(format!("fold{f}.cbm")))?))?;
    }
    write_json(&dir.join("benchmark.json"), &bench)?;
    write_json(&dir.join("manifest.json"), &ConceptManifest { plan, options })?;
    println!("concept\tACC\tF1\tAUC\tAP");
    for row in bench.table.all_rows() {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            row.name,
            pathconcept::metrics::format_cell(&row.acc),
            pathconcept::metrics::format_cell(&row.f1),
            pathconcept::metrics::format_cell(&row.auc),
            pathconcept::metrics::format_cell(&row.ap)
        );
    }
    Ok(())
}

/// Saved fold checkpoints, when they were trained under the same plan and
/// options.
fn saved_cbm_models(run: &Run, plan: &FoldPlan, options: &CvOptions) -> anyhow::Result<Option<Vec<CbmModel>>> {
    let dir = run.path("concepts");
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest: ConceptManifest = read_json(&manifest_path)?;
    let same = manifest.plan == *plan
        && manifest.options.model == options.model
        && manifest.options.train == options.train
        && manifest.options.seed == options.seed;
    if !same {
        info!("concept checkpoints were trained with other settings; retraining");
        return Ok(None);
    }
    let models = (0..plan.k())
        .map(|f| Ok(load_cbm(BufReader::new(File::open(dir.join(format!("fold{f}.cbm")))?))?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Some(models))
}

fn survival(run: &Run, settings: &[SurvivalSetting]) -> anyhow::Result<()> {
    let dataset = run.load_dataset()?;
    let plan = run.fold_plan(dataset.len(), &dataset)?;
    let options = run.config.cv_options();
    let mut session = CvSession::new(&dataset, plan.clone(), options.clone())?;
    let settings = if settings.is_empty() {
        SurvivalSetting::ALL.to_vec()
    } else {
        settings.to_vec()
    };
    if settings.contains(&SurvivalSetting::CbmLogitsCoxPH) {
        if let Some(models) = saved_cbm_models(run, &plan, &options)? {
            session.set_cbm_models(models)?;
        }
    }
    println!("setting\tC-Index\tC-IPCW\tC-AUC\tIBS\tKM-IBS");
    for setting in settings {
        let result = session.survival_setting(setting)?;
        for f in &result.dropped_folds {
            warn!("{setting}: fold {f} dropped");
        }
        write_json(&run.path(&format!("survival/{}.json", setting.key())), &result)?;
        let s = &result.summary;
        let cell = pathconcept::metrics::format_cell;
        println!(
            "{setting}\t{}\t{}\t{}\t{}\t{}",
            cell(&s.cindex),
            cell(&s.cipcw),
            cell(&s.cauc),
            cell(&s.ibs),
            cell(&s.km_ibs)
        );
    }
    Ok(())
}

fn load_setting(run: &Run, setting: SurvivalSetting) -> anyhow::Result<SettingResult> {
    let path = run.path(&format!("survival/{}.json", setting.key()));
    if !path.exists() {
        return Err(ValidationFailure(format!("no results for {setting}; run `survival --setting {}` first", setting.key())).into());
    }
    read_json(&path)
}

/// Out-of-fold risks with the matching records; samples of dropped folds
/// are left out.
fn scored_cohort(result: &SettingResult, records: &[SurvivalRecord]) -> (Vec<usize>, Vec<f64>, Vec<SurvivalRecord>) {
    let mut idx = Vec::new();
    let mut risks = Vec::new();
    let mut recs = Vec::new();
    for (i, r) in result.oof_risk.iter().enumerate() {
        if let Some(r) = r {
            idx.push(i);
            risks.push(*r);
            recs.push(records[i].clone());
        }
    }
    (idx, risks, recs)
}

fn stratify(run: &Run, setting: SurvivalSetting) -> anyhow::Result<()> {
    let (dataset, _) = run.load_study()?;
    let result = load_setting(run, setting)?;
    if result.oof_risk.len() != dataset.len() {
        bail!(ValidationFailure(format!("{setting} results do not match the dataset")));
    }
    let (_, risks, records) = scored_cohort(&result, &dataset.outcomes());
    let strat = stratify_and_test(&risks, &records)?;
    write_json(&run.path(&format!("stratify/{}.json", setting.key())), &strat)?;
    println!(
        "{setting}: threshold {:.6}, low {}, high {}",
        strat.groups.threshold,
        strat.groups.low.len(),
        strat.groups.high.len()
    );
    match (&strat.test, &strat.note) {
        (Some(t), _) => println!("log-rank chi2 = {:.4}, p = {:.3e}", t.chi_square, t.p_value),
        (None, Some(note)) => println!("no test: {note}"),
        (None, None) => {}
    }
    if let Some(model) = &result.final_model {
        println!("top risk factors:");
        for f in top_risk_factors(model, 10) {
            println!("{:>3}  {:<32} {:+.4}", f.rank, f.feature, f.coefficient);
        }
    }
    Ok(())
}

fn fairness(run: &Run, setting: SurvivalSetting, attribute: FairnessAttribute, min_group: Option<usize>) -> anyhow::Result<()> {
    let (dataset, _) = run.load_study()?;
    let result = load_setting(run, setting)?;
    if result.oof_risk.len() != dataset.len() {
        bail!(ValidationFailure(format!("{setting} results do not match the dataset")));
    }
    let (idx, risks, records) = scored_cohort(&result, &dataset.outcomes());
    let demographics: Vec<_> = idx.iter().map(|&i| dataset.samples[i].demographics.clone()).collect();
    let strat = stratify_and_test(&risks, &records)?;
    let min_group = min_group.unwrap_or(run.config.min_group);
    let report = fairness_report(&strat.groups, &records, &demographics, attribute, min_group)?;
    write_json(&run.path(&format!("fairness/{}-{attribute}.json", setting.key())), &report)?;
    for s in &report.strata {
        let groups: Vec<String> = s.subgroups.iter().map(|g| format!("{}={}", g.value, g.size)).collect();
        let excluded: Vec<String> = s.excluded.iter().map(|e| format!("{}={}", e.value, e.size)).collect();
        let result = match (&s.test, &s.note) {
            (Some(t), _) => format!("p = {:.3e}", t.p_value),
            (None, Some(n)) => format!("no test: {n}"),
            (None, None) => String::new(),
        };
        println!("{} risk ({}): [{}] excluded [{}] {result}", s.stratum, s.size, groups.join(", "), excluded.join(", "));
    }
    Ok(())
}

fn synth(run: &Run) -> anyhow::Result<()> {
    let study = synth_generate(&run.config.synth)?;
    study.write(&run.dataset_dir())?;
    let truth = serde_json::json!({
        "config": study.config,
        "concepts": study.config.concept_names(),
        "true_concepts": study.true_concepts,
    });
    write_json(&run.path("synth.json"), &truth)?;
    let events = study.dataset.samples.iter().filter(|s| s.outcome.event).count();
    println!(
        "generated {} patients ({} events) with {} concepts in {}",
        study.dataset.len(),
        events,
        study.dataset.num_concepts(),
        run.dataset_dir().display()
    );
    Ok(())
}

fn export(run: &Run) -> anyhow::Result<()> {
    let mut data = PlotData {
        grid_points: run.config.cv.grid_points,
        ..PlotData::default()
    };
    let mut any = false;
    for setting in SurvivalSetting::ALL {
        let key = setting.key();
        let path = run.path(&format!("survival/{key}.json"));
        if path.exists() {
            any = true;
            let result: SettingResult = read_json(&path)?;
            for f in &result.folds {
                if let Some(series) = &f.cauc {
                    data.auc_series.push((key.to_string(), f.fold, series.clone()));
                }
            }
            if let Some(model) = &result.final_model {
                data.risk_factors.push((key.to_string(), top_risk_factors(model, 10)));
            }
            data.survival.push((setting, result.summary));
        }
        let path = run.path(&format!("stratify/{key}.json"));
        if path.exists() {
            any = true;
            let strat: Stratification = read_json(&path)?;
            for (group, km) in [("low", strat.km_low), ("high", strat.km_high)] {
                if let Some(km) = km {
                    data.km_curves.push((format!("{key}-{group}"), km));
                }
            }
        }
    }
    let bench_path = run.path("concepts/benchmark.json");
    if bench_path.exists() {
        any = true;
        let bench: ConceptBenchmark = read_json(&bench_path)?;
        data.concept_table = Some(bench.table);
        data.subtype_table = bench.subtype_table;
        let manifest: ConceptManifest = read_json(&run.path("concepts/manifest.json"))?;
        let dataset = run.load_dataset()?;
        if let Some(&i) = manifest.plan.folds.first().and_then(|f| f.first()) {
            let model = load_cbm(BufReader::new(File::open(run.path("concepts/fold0.cbm"))?))?;
            let graph = dataset.graph(i)?;
            for k in 0..model.num_concepts() {
                data.attention.push(AttentionExport {
                    slide_id: dataset.samples[i].slide_id.clone(),
                    concept: model.vocabulary.name(k).to_string(),
                    points: attention_map(&model, graph, k)?,
                });
            }
        }
    }
    if !any {
        return Err(ValidationFailure(format!("no results to export in {}", run.out.display())).into());
    }
    let files = export_plot_data(&data, &run.path("export"))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!(ValidationFailure("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| ValidationFailure(format!("config {}: {e}", path.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.synth.seed = seed;
    }
    match &cli.command {
        Command::TrainConcepts { folds: Some(f) } | Command::Survival { folds: Some(f), .. } => config.folds = *f,
        Command::Graph { k: Some(k) } => config.knn_k = *k,
        _ => {}
    }
    if let Command::Survival {
        lambda_grid: Some(grid), ..
    } = &cli.command
    {
        config.cv.lambda_grid = grid.clone();
    }
    config.validate()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let run = Run { out: cli.out.clone(), config };
    match &cli.command {
        Command::Ingest(args) => ingest(&run, args),
        Command::Graph { k } => graph(&run, *k),
        Command::TrainConcepts { .. } => train_concepts(&run),
        Command::Survival { setting, .. } => survival(&run, setting),
        Command::Stratify { setting } => stratify(&run, *setting),
        Command::Fairness {
            attribute,
            min_group,
            setting,
        } => fairness(&run, *setting, *attribute, *min_group),
        Command::Synth => synth(&run),
        Command::Export => export(&run),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationFailure>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<pathconcept::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
