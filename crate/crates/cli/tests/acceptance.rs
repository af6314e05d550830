//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use pathconcept::concepts::CbmLossProbe;
use pathconcept::graph::{build_knn_graph, KnnOptions};
use pathconcept::harness::{
    make_folds, stratify_and_test, synth_generate, top_risk_factors, CvOptions, CvSession, SettingResult,
    SurvivalSetting, SynthConfig,
};
use pathconcept::ingest::PatchRecord;
use pathconcept::metrics::{
    brier_score_at, dynamic_auc_at, harrell_cindex, harrell_cindex_truncated, roc_auc, uno_cindex_ipcw,
    CensoringWeights,
};
use pathconcept::nn::gradcheck::{BceProbe, CoxLossProbe, GatProbe, LinearProbe, PoolProbe, ReluProbe};
use pathconcept::nn::{grad_check, Differentiable};
use pathconcept::rng::SeedStream;
use pathconcept::survival::{censoring_km, fit_coxph, km_fit, logrank_test};
use pathconcept::{CbmModel, ConceptVocabulary, DenseMatrix, ModelConfig, SurvivalRecord, TrainConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, format!("{name}: got {got}, want {want}"))
}

fn recs(times: &[f64], events: &[bool]) -> Vec<SurvivalRecord> {
    times
        .iter()
        .zip(events)
        .enumerate()
        .map(|(i, (&t, &e))| SurvivalRecord::new(format!("p{i:02}"), t, e))
        .collect()
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst = [0.0f64; 7];
    let vocab = ConceptVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).map_err(|e| e.to_string())?;
    for seed in 0..10u64 {
        let mut rng = SeedStream::new(seed).rng("acceptance-grad");
        let probes: Vec<(usize, Box<dyn Differentiable>, f64)> = vec![
            (0, Box::new(LinearProbe::random(&mut rng, 4, 5, 3)), 1e-5),
            (1, Box::new(ReluProbe::random(&mut rng, 4, 5)), 1e-5),
            (2, Box::new(GatProbe::random_path(&mut rng, 5, 3, 4)), 1e-4),
            (3, Box::new(PoolProbe::random(&mut rng, 6, 5, 3)), 1e-4),
            (4, Box::new(BceProbe::random(&mut rng, 8)), 1e-5),
            (5, Box::new(CoxLossProbe::random(&mut rng, 12)), 1e-5),
        ];
        for (slot, mut probe, tol) in probes {
            let r = grad_check(probe.as_mut(), tol).map_err(|e| e.to_string())?;
            worst[slot] = worst[slot].max(r.max_rel_error);
            ensure(r.passed, format!("probe {slot} seed {seed}: {r:?}"))?;
        }
        let patches: Vec<PatchRecord> = (0..6)
            .map(|i| PatchRecord {
                patch_id: i.to_string(),
                x: (i % 3) as f64,
                y: (i / 3) as f64,
                features: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let graph = build_knn_graph("s", &patches, KnnOptions { k: 2, ..KnnOptions::default() }).map_err(|e| e.to_string())?;
        let config = ModelConfig {
            hidden_dim: 4,
            attention_dim: 3,
            output_dim: None,
        };
        let model = CbmModel::new(config, vocab.clone(), 3, seed).map_err(|e| e.to_string())?;
        let mut probe = CbmLossProbe {
            model,
            graph,
            labels: vec![Some(true), None, Some(false)],
        };
        let r = grad_check(&mut probe, 1e-4).map_err(|e| e.to_string())?;
        worst[6] = worst[6].max(r.max_rel_error);
        ensure(r.passed, format!("whole model seed {seed}: {r:?}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "10 seeds; max rel err linear {:.1e} relu {:.1e} gat {:.1e} pool {:.1e} bce {:.1e} cox {:.1e} model {:.1e}; {:.2?}",
        worst[0], worst[1], worst[2], worst[3], worst[4], worst[5], worst[6], elapsed
    ))
}

// ---------------------------------------------------------------- 2

/// Breslow log partial likelihood minus the ridge term, written out
/// pair by pair.
fn breslow_objective(x: &[Vec<f64>], r: &[SurvivalRecord], beta: &[f64], lambda: f64) -> f64 {
    let eta: Vec<f64> = x.iter().map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let mut ll = 0.0;
    for i in 0..r.len() {
        if r[i].event {
            let denom: f64 = (0..r.len()).filter(|&j| r[j].time >= r[i].time).map(|j| eta[j].exp()).sum();
            ll += eta[i] - denom.ln();
        }
    }
    ll - 0.5 * lambda * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Nelder-Mead minimisation with restarts.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, start: &[f64]) -> Vec<f64> {
    let p = start.len();
    let mut best = start.to_vec();
    for _restart in 0..6 {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for j in 0..p {
            let mut v = best.clone();
            v[j] += if v[j].abs() > 1e-3 { 0.2 * v[j].abs() } else { 0.25 };
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        for _ in 0..20_000 {
            let mut order: Vec<usize> = (0..=p).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();
            if (values[p] - values[0]).abs() < 1e-15 {
                break;
            }
            let centroid: Vec<f64> = (0..p).map(|j| simplex[..p].iter().map(|v| v[j]).sum::<f64>() / p as f64).collect();
            let along = |t: f64| -> Vec<f64> { (0..p).map(|j| centroid[j] + t * (simplex[p][j] - centroid[j])).collect() };
            let reflected = along(-1.0);
            let fr = f(&reflected);
            if fr < values[0] {
                let expanded = along(-2.0);
                let fe = f(&expanded);
                if fe < fr {
                    simplex[p] = expanded;
                    values[p] = fe;
                } else {
                    simplex[p] = reflected;
                    values[p] = fr;
                }
            } else if fr < values[p - 1] {
                simplex[p] = reflected;
                values[p] = fr;
            } else {
                let contracted = if fr < values[p] { along(-0.5) } else { along(0.5) };
                let fc = f(&contracted);
                if fc < values[p].min(fr) {
                    simplex[p] = contracted;
                    values[p] = fc;
                } else {
                    for i in 1..=p {
                        simplex[i] = (0..p).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                        values[i] = f(&simplex[i]);
                    }
                }
            }
        }
        let i = (0..=p).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
        best = simplex[i].clone();
    }
    best
}

fn cox_oracle() -> Check {
    let fixtures: Vec<(&str, Vec<Vec<f64>>, Vec<SurvivalRecord>, f64)> = vec![
        (
            "one covariate, no penalty",
            vec![vec![0.5], vec![-1.2], vec![1.1], vec![0.3], vec![-0.4], vec![2.0], vec![-0.9], vec![0.8]],
            recs(&[2.0, 9.0, 3.0, 4.0, 6.0, 7.0, 5.0, 1.0], &[true, true, true, false, true, true, false, true]),
            0.0,
        ),
        (
            "two covariates with ties",
            vec![
                vec![0.2, 1.0],
                vec![1.5, 0.0],
                vec![-0.7, 1.0],
                vec![0.9, 0.0],
                vec![-1.1, 1.0],
                vec![0.4, 0.0],
                vec![1.2, 1.0],
                vec![-0.3, 0.0],
                vec![0.0, 1.0],
                vec![-1.6, 0.0],
            ],
            recs(
                &[3.0, 1.0, 5.0, 3.0, 8.0, 6.0, 2.0, 7.0, 3.0, 9.0],
                &[true, true, false, true, true, false, true, true, true, false],
            ),
            0.0,
        ),
        (
            "three covariates, ridge 0.5",
            vec![
                vec![1.0, -0.5, 0.3],
                vec![0.2, 0.4, -1.0],
                vec![-0.8, 1.2, 0.5],
                vec![1.5, 0.1, 0.0],
                vec![-0.3, -0.9, 0.8],
                vec![0.6, 0.7, -0.4],
                vec![-1.2, 0.3, 1.1],
                vec![0.9, -1.1, -0.6],
                vec![0.1, 0.5, 0.2],
            ],
            recs(
                &[1.0, 4.0, 7.0, 2.0, 6.0, 3.0, 9.0, 5.0, 8.0],
                &[true, true, false, true, true, true, false, true, true],
            ),
            0.5,
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, rows, r, lambda) in &fixtures {
        let x = DenseMatrix::from_rows(rows).map_err(|e| e.to_string())?;
        let model = fit_coxph(&x, r, *lambda).map_err(|e| format!("{name}: {e}"))?;
        let neg = |b: &[f64]| -breslow_objective(rows, r, b, *lambda);
        let oracle = nelder_mead(&neg, &vec![0.0; rows[0].len()]);
        for (j, (a, b)) in model.beta.iter().zip(&oracle).enumerate() {
            worst = worst.max((a - b).abs());
            close(&format!("{name} beta[{j}]"), *a, *b, 1e-4)?;
        }
    }
    let rows: Vec<Vec<f64>> = fixtures[2].1.iter().map(|r| vec![r[0], 4.2, r[1]]).collect();
    let x = DenseMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
    let model = fit_coxph(&x, &fixtures[2].2, 0.5).map_err(|e| e.to_string())?;
    ensure(model.beta[1] == 0.0, format!("constant column got {}", model.beta[1]))?;
    Ok(format!("3 fixtures, max |beta - oracle| {worst:.2e}; constant column beta = 0"))
}

// ---------------------------------------------------------------- 3

fn hand_checks() -> Check {
    let tol = 1e-10;
    // KM: 1 d, 2 d, 2 c, 3 d, 4 c, 5 d.
    let km_recs = recs(&[1.0, 2.0, 2.0, 3.0, 4.0, 5.0], &[true, true, false, true, false, true]);
    let km = km_fit(&km_recs);
    let expect = [(1.0, 5.0 / 6.0), (2.0, 2.0 / 3.0), (3.0, 4.0 / 9.0), (5.0, 0.0)];
    ensure(km.times.len() == expect.len(), format!("km steps {:?}", km.times))?;
    for (i, (t, s)) in expect.iter().enumerate() {
        close(&format!("km time {i}"), km.times[i], *t, 0.0)?;
        close(&format!("km S({t})"), km.survival[i], *s, tol)?;
    }
    let g = censoring_km(&km_recs);
    close("G(2)", g.survival_at(2.0), 4.0 / 5.0, tol)?;
    close("G(4)", g.survival_at(4.0), 2.0 / 5.0, tol)?;
    close("G(1.5)", g.survival_at(1.5), 1.0, tol)?;

    // Log-rank: A = 1 d, 3 d, 5 c; B = 2 d, 4 d, 6 d.
    let a = recs(&[1.0, 3.0, 5.0], &[true, true, false]);
    let b = recs(&[2.0, 4.0, 6.0], &[true, true, true]);
    let lr = logrank_test(&[&a, &b]).map_err(|e| e.to_string())?;
    let o_minus_e = 2.0 - 26.0 / 15.0;
    let v = 0.25 + 6.0 / 25.0 + 0.25 + 2.0 / 9.0;
    let stat = o_minus_e * o_minus_e / v;
    close("log-rank statistic", lr.chi_square, stat, tol)?;
    let p = 1.0 - ChiSquared::new(1.0).map_err(|e| e.to_string())?.cdf(stat);
    close("log-rank p", lr.p_value, p, tol)?;
    let same = logrank_test(&[&km_recs, &km_recs]).map_err(|e| e.to_string())?;
    ensure(same.chi_square == 0.0 && same.p_value == 1.0, format!("self test {same:?}"))?;

    // Times 1 d, 2 c, 3 d, 4 d with risks 0.5, 0.5, 0.2, 0.4.
    let r = recs(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]);
    let risks = [0.5, 0.5, 0.2, 0.4];
    close("Harrell", harrell_cindex(&risks, &r).map_err(|e| e.to_string())?, 2.5 / 4.0, tol)?;
    // G = 1 before 2 and 2/3 from 2 on; the pair from t = 3 weighs 9/4.
    let uno = uno_cindex_ipcw(&risks, &r, &r, 4.0).map_err(|e| e.to_string())?;
    close("Uno", uno.value, 2.5 / 5.25, tol)?;
    let weights = CensoringWeights::fit(&r);
    let (auc, _) = dynamic_auc_at(&risks, &r, &weights, 3.0);
    close("AUC(3)", auc.ok_or("AUC(3) undefined")?, 1.0 / 2.5, tol)?;
    let s = DenseMatrix::from_rows(&[vec![0.2], vec![0.6], vec![0.7], vec![0.9]]).map_err(|e| e.to_string())?;
    let (bs, _) = brier_score_at(&s, &r, &weights, 0, 2.5);
    close("BS(2.5)", bs, (0.04 + 0.09 * 1.5 + 0.01 * 1.5) / 4.0, tol)?;
    Ok("KM, censoring KM, log-rank, Harrell, Uno, AUC(t), BS(t) within 1e-10; self log-rank is 0 with p = 1".into())
}

// ---------------------------------------------------------------- 4

fn invariances() -> Check {
    let mut checked = 0;
    for seed in 0..50u64 {
        let mut rng = SeedStream::new(seed).rng("acceptance-inv");
        let n = rng.random_range(6..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.random_bool(0.3)).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..40) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let mut r = recs(&times, &events);
        r[0].event = true;
        r[0].time = 0.5;
        let transforms: [fn(f64) -> f64; 3] = [|s| s.exp(), |s| 2.0 * s + 7.0, |s| s * s * s + s];
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let c = harrell_cindex(&scores, &r).map_err(|e| e.to_string())?;
        for f in transforms {
            let moved: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            ensure(roc_auc(&moved, &labels).map_err(|e| e.to_string())? == auc, format!("AUC changed, seed {seed}"))?;
            ensure(harrell_cindex(&moved, &r).map_err(|e| e.to_string())? == c, format!("C changed, seed {seed}"))?;
        }
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc + roc_auc(&neg, &labels).map_err(|e| e.to_string())?;
        ensure(sum == 1.0, format!("AUC(s) + AUC(-s) = {sum}, seed {seed}"))?;
        let all_events: Vec<SurvivalRecord> = r.iter().map(|x| SurvivalRecord { event: true, ..x.clone() }).collect();
        let tau = 30.0;
        let h = harrell_cindex_truncated(&scores, &all_events, tau).map_err(|e| e.to_string())?;
        let u = uno_cindex_ipcw(&scores, &all_events, &all_events, tau).map_err(|e| e.to_string())?;
        ensure(h == u.value, format!("Uno {} vs restricted Harrell {h}, seed {seed}", u.value))?;
        checked += 1;
    }
    Ok(format!("{checked} random fixtures, all equalities exact"))
}

// ---------------------------------------------------------------- 5 and 6

struct SynthRun {
    auc: f64,
    results: Vec<SettingResult>,
    strat_p: f64,
    top: String,
    largest: String,
    elapsed: Duration,
}

fn acceptance_options(seed: u64, steps: usize) -> CvOptions {
    CvOptions {
        model: ModelConfig {
            hidden_dim: 32,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            steps,
            base_lr: 1e-2,
            ..TrainConfig::default()
        },
        seed,
        ..CvOptions::default()
    }
}

fn synth_run() -> Result<SynthRun, String> {
    let start = Instant::now();
    let config = SynthConfig::default();
    let study = synth_generate(&config).map_err(|e| e.to_string())?;
    let ds = &study.dataset;
    let plan = make_folds(ds.len(), 5, 0).map_err(|e| e.to_string())?;
    let mut session = CvSession::new(ds, plan, acceptance_options(0, 40)).map_err(|e| e.to_string())?;
    let bench = session.concept_benchmark().map_err(|e| e.to_string())?;
    let auc = bench.table.mean.auc.ok_or("mean AUC undefined")?.mean;
    let mut results = Vec::new();
    for s in SurvivalSetting::ALL {
        results.push(session.survival_setting(s).map_err(|e| format!("{s}: {e}"))?);
    }
    let cbm = &results[2];
    let risks: Vec<f64> = cbm.oof_risk.iter().map(|r| r.ok_or("dropped fold")).collect::<Result<_, _>>()?;
    let strat = stratify_and_test(&risks, &ds.outcomes()).map_err(|e| e.to_string())?;
    let strat_p = strat.test.ok_or("no stratification test")?.p_value;
    let top = top_risk_factors(cbm.final_model.as_ref().ok_or("no final model")?, 10)
        .first()
        .map(|f| f.feature.clone())
        .unwrap_or_default();
    let largest = (0..config.num_concepts)
        .max_by(|&a, &b| config.hazard_coefficients[a].abs().total_cmp(&config.hazard_coefficients[b].abs()))
        .map(|k| config.concept_names()[k].clone())
        .unwrap_or_default();
    Ok(SynthRun {
        auc,
        results,
        strat_p,
        top,
        largest,
        elapsed: start.elapsed(),
    })
}

fn cindex(r: &SettingResult) -> f64 {
    r.summary.cindex.map_or(f64::NAN, |m| m.mean)
}

fn synthetic_recovery(run: &SynthRun) -> Check {
    let c_cbm = cindex(&run.results[2]);
    let c_bin = cindex(&run.results[3]);
    let detail = format!(
        "CBM AUC {:.4}; C e2e {:.4} agg {:.4} cbm {:.4} binary {:.4}; log-rank p {:.2e}; top factor {} (planted {}); {:.1?}",
        run.auc,
        cindex(&run.results[0]),
        cindex(&run.results[1]),
        c_cbm,
        c_bin,
        run.strat_p,
        run.top,
        run.largest,
        run.elapsed
    );
    ensure(run.auc > 0.9, format!("(a) failed: {detail}"))?;
    ensure(c_cbm > 0.7 && c_cbm >= c_bin - 0.02, format!("(b) failed: {detail}"))?;
    ensure(run.strat_p < 0.005, format!("(c) failed: {detail}"))?;
    ensure(run.top == run.largest, format!("(d) failed: {detail}"))?;
    ensure(run.elapsed < Duration::from_secs(15 * 60), format!("runtime: {detail}"))?;
    Ok(detail)
}

fn ibs_ordering(run: &SynthRun) -> Check {
    let mut parts = Vec::new();
    for r in &run.results {
        let km = r.summary.km_ibs.ok_or(format!("{}: no KM IBS", r.setting))?.mean;
        match (r.setting, r.summary.ibs) {
            (SurvivalSetting::EndToEndCox, None) => parts.push(format!("{} N/A (KM {km:.4})", r.setting)),
            (SurvivalSetting::EndToEndCox, Some(_)) => return Err("end-to-end row reports an IBS".into()),
            (s, Some(m)) => {
                ensure(m.mean < km, format!("{s}: IBS {:.4} >= KM {km:.4}", m.mean))?;
                parts.push(format!("{s} {:.4} < KM {km:.4}", m.mean));
            }
            (s, None) => return Err(format!("{s}: IBS missing")),
        }
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 7

fn cli_determinism() -> Check {
    let bin = env!("CARGO_BIN_EXE_pathconcept");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "folds = 3\n[model]\nhidden_dim = 8\n[train]\nsteps = 3\nbase_lr = 1e-2\n[cv]\ninner_folds = 3\n\
         [synth]\nn_patients = 80\nmin_patches = 10\nmax_patches = 16\n",
    )
    .map_err(|e| e.to_string())?;
    let stages: [&[&str]; 7] = [
        &["synth"],
        &["graph"],
        &["train-concepts"],
        &["survival"],
        &["stratify", "--setting", "cbm"],
        &["fairness", "--attribute", "gender", "--min-group", "5"],
        &["export"],
    ];
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for stage in stages {
            let status = Command::new(bin)
                .args(["--seed", "11", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .args(stage)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(
                status.status.success(),
                format!("{run} {stage:?}: {}", String::from_utf8_lossy(&status.stderr)),
            )?;
        }
    }
    let files = compare_dirs(&dir.path().join("a/export"), &dir.path().join("b/export"))?;
    ensure(files >= 6, format!("only {files} export files"))?;
    Ok(format!("{files} exported files byte-identical across two runs"))
}

fn compare_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    names.sort();
    let count_b = std::fs::read_dir(b).map_err(|e| e.to_string())?.count();
    ensure(names.len() == count_b, "different file sets")?;
    for name in &names {
        let x = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        ensure(x == y, format!("{} differs", name.to_string_lossy()))?;
    }
    Ok(names.len())
}

// ---------------------------------------------------------------- 8

fn null_control() -> Check {
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let config = SynthConfig {
            n_patients: 200,
            hazard_coefficients: vec![0.0; 8],
            shuffle_labels: true,
            seed: 1000 + seed,
            ..SynthConfig::default()
        };
        let study = synth_generate(&config).map_err(|e| e.to_string())?;
        let ds = &study.dataset;
        let plan = make_folds(ds.len(), 5, seed).map_err(|e| e.to_string())?;
        let mut session = CvSession::new(ds, plan, acceptance_options(seed, 20)).map_err(|e| e.to_string())?;
        let bench = session.concept_benchmark().map_err(|e| e.to_string())?;
        let auc = bench.table.mean.auc.ok_or("mean AUC undefined")?.mean;
        ensure((0.4..=0.6).contains(&auc), format!("seed {seed}: concept AUC {auc:.4}"))?;
        let mut cs = Vec::new();
        for s in SurvivalSetting::ALL {
            let c = cindex(&session.survival_setting(s).map_err(|e| format!("{s}: {e}"))?);
            ensure((0.4..=0.6).contains(&c), format!("seed {seed}: {s} C {c:.4}"))?;
            cs.push(format!("{c:.3}"));
        }
        lines.push(format!("seed {seed}: AUC {auc:.3} C [{}]", cs.join(", ")));
    }
    Ok(lines.join("; "))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u8, name: &str, r: Check| {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id} [{tag}] {name}: {detail}");
    };
    report(1, "gradient suite", guarded(gradient_suite));
    report(2, "Cox oracle", guarded(cox_oracle));
    report(3, "estimator hand checks", guarded(hand_checks));
    report(4, "metric invariances", guarded(invariances));
    match catch_unwind(synth_run) {
        Ok(Ok(run)) => {
            report(5, "synthetic recovery", synthetic_recovery(&run));
            report(6, "IBS ordering", ibs_ordering(&run));
        }
        Ok(Err(e)) => {
            report(5, "synthetic recovery", Err(e.clone()));
            report(6, "IBS ordering", Err(e));
        }
        Err(_) => {
            report(5, "synthetic recovery", Err("panicked".into()));
            report(6, "IBS ordering", Err("panicked".into()));
        }
    }
    report(7, "CLI determinism", guarded(cli_determinism));
    report(8, "null control", guarded(null_control));
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
