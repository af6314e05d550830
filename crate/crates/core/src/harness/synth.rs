use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_slide_graph, KnnOptions, DEFAULT_K};
use crate::ingest::{
    write_study, ConceptLabels, ConceptVocabulary, DemographicRecord, Gender, PatchRecord, Race, Sample, SlidePatches,
    StudyDataset, StudyPaths, Subtype, SurvivalRecord,
};
use crate::rng::{Rng, SeedStream};

/// Spacing of the patch lattice in pixels.
pub const PATCH_SIZE: f64 = 256.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub feature_dim: usize,
    pub num_concepts: usize,
    /// Probability that each concept is present; one value or one per concept.
    pub prevalence: Vec<f64>,
    /// Share of a slide's patches that form a present concept's cluster.
    pub cluster_fraction: f64,
    /// Length of the feature shift applied inside a cluster.
    pub signal_strength: f64,
    /// Log-hazard coefficient per concept.
    pub hazard_coefficients: Vec<f64>,
    /// Baseline hazard per day.
    pub baseline_hazard: f64,
    pub censoring_rate: f64,
    /// Share of concept labels replaced by the missing marker.
    pub missing_label_rate: f64,
    /// Permute label rows across patients after survival is drawn.
    pub shuffle_labels: bool,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 400,
            min_patches: 30,
            max_patches: 60,
            feature_dim: 16,
            num_concepts: 8,
            prevalence: vec![0.4],
            cluster_fraction: 0.25,
            signal_strength: 4.0,
            hazard_coefficients: vec![0.0, 1.0, -1.2, 2.0, 0.6, -0.8, 0.0, 1.2],
            baseline_hazard: 1e-3,
            censoring_rate: 0.3,
            missing_label_rate: 0.0,
            shuffle_labels: false,
            knn_k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth config: {m}")));
        if self.n_patients == 0 || self.feature_dim == 0 || self.num_concepts == 0 {
            return bad("n_patients, feature_dim and num_concepts must be positive");
        }
        if self.min_patches == 0 || self.min_patches > self.max_patches {
            return bad("need 1 <= min_patches <= max_patches");
        }
        if !(self.prevalence.len() == 1 || self.prevalence.len() == self.num_concepts) {
            return bad("prevalence needs one value or one per concept");
        }
        if self.prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("prevalence must lie in [0, 1]");
        }
        if self.hazard_coefficients.len() != self.num_concepts {
            return bad("hazard_coefficients needs one value per concept");
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad("censoring_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.missing_label_rate) {
            return bad("missing_label_rate must lie in [0, 1)");
        }
        if !(self.cluster_fraction > 0.0 && self.cluster_fraction <= 1.0) {
            return bad("cluster_fraction must lie in (0, 1]");
        }
        if !(self.baseline_hazard > 0.0) || self.knn_k == 0 {
            return bad("baseline_hazard and knn_k must be positive");
        }
        Ok(())
    }

    pub fn prevalence_of(&self, k: usize) -> f64 {
        if self.prevalence.len() == 1 {
            self.prevalence[0]
        } else {
            self.prevalence[k]
        }
    }

    pub fn concept_names(&self) -> Vec<String> {
        (0..self.num_concepts).map(|k| format!("concept_{k:02}")).collect()
    }
}

/// A generated cohort with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthStudy {
    pub config: SynthConfig,
    /// Graphs attached.
    pub dataset: StudyDataset,
    pub slides: Vec<SlidePatches>,
    /// Unit feature direction per concept.
    pub directions: Vec<Vec<f64>>,
    /// `clusters[i][k]`: node indices of concept `k`'s cluster in sample `i`
    /// (empty when absent).
    pub clusters: Vec<Vec<Vec<usize>>>,
    /// Concept presence before any label shuffling or masking.
    pub true_concepts: Vec<Vec<bool>>,
}

impl SynthStudy {
    pub fn write(&self, dir: &Path) -> Result<StudyPaths> {
        write_study(dir, &self.dataset, &self.slides)
    }
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Rate `μ` of exponential censoring with `mean_i μ/(μ + h_i) = rate`.
fn censoring_rate_for(hazards: &[f64], rate: f64) -> f64 {
    let share = |mu: f64| hazards.iter().map(|h| mu / (mu + h)).sum::<f64>() / hazards.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while share(hi) < rate {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if share(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Patch positions: `n` distinct cells of a roughly square lattice.
fn lattice_positions(rng: &mut Rng, n: usize) -> Vec<(f64, f64)> {
    let side = ((n as f64) * 1.5).sqrt().ceil() as usize;
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells.sort_unstable();
    cells
        .into_iter()
        .map(|c| ((c % side) as f64 * PATCH_SIZE, (c / side) as f64 * PATCH_SIZE))
        .collect()
}

/// The `m` patches nearest to `centre`, ties by index.
fn nearest(positions: &[(f64, f64)], centre: usize, m: usize) -> Vec<usize> {
    let (cx, cy) = positions[centre];
    let mut idx: Vec<usize> = (0..positions.len()).collect();
    idx.sort_by(|&a, &b| {
        let da = (positions[a].0 - cx).powi(2) + (positions[a].1 - cy).powi(2);
        let db = (positions[b].0 - cx).powi(2) + (positions[b].1 - cy).powi(2);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Generates a cohort; identical configs give identical studies.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthStudy> {
    config.validate()?;
    let root = SeedStream::new(config.seed).derive("synth");
    let (n, d, k) = (config.n_patients, config.feature_dim, config.num_concepts);
    let mut dir_rng = root.rng("directions");
    let directions: Vec<Vec<f64>> = (0..k).map(|_| unit_vector(&mut dir_rng, d)).collect();

    let mut concept_rng = root.rng("concepts");
    let true_concepts: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..k).map(|c| concept_rng.random::<f64>() < config.prevalence_of(c)).collect())
        .collect();

    let mut patch_rng = root.rng("patches");
    let mut slides = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    let ids: Vec<String> = (0..n).map(|i| format!("SYNT-{:02}-{:04}", i / 10_000, i % 10_000)).collect();
    for (i, present) in true_concepts.iter().enumerate() {
        let m = patch_rng.random_range(config.min_patches..=config.max_patches);
        let positions = lattice_positions(&mut patch_rng, m);
        let mut features: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| patch_rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let size = ((config.cluster_fraction * m as f64).round() as usize).clamp(1, m);
        let mut slide_clusters = vec![Vec::new(); k];
        for c in 0..k {
            if !present[c] {
                continue;
            }
            let centre = patch_rng.random_range(0..m);
            let members = nearest(&positions, centre, size);
            for &j in &members {
                for (f, dir) in features[j].iter_mut().zip(&directions[c]) {
                    *f += config.signal_strength * dir;
                }
            }
            slide_clusters[c] = members;
        }
        let slide_id = format!("{}-01Z-00-DX1", ids[i]);
        let patches = positions
            .iter()
            .zip(features)
            .enumerate()
            .map(|(j, (&(x, y), features))| PatchRecord {
                patch_id: format!("p{j:03}"),
                x,
                y,
                features,
            })
            .collect();
        slides.push(SlidePatches { slide_id, patches });
        clusters.push(slide_clusters);
    }

    let hazards: Vec<f64> = true_concepts
        .iter()
        .map(|y| {
            let lp: f64 = y
                .iter()
                .zip(&config.hazard_coefficients)
                .map(|(&p, b)| if p { *b } else { 0.0 })
                .sum();
            config.baseline_hazard * lp.exp()
        })
        .collect();
    let mut surv_rng = root.rng("survival");
    let mu = (config.censoring_rate > 0.0).then(|| censoring_rate_for(&hazards, config.censoring_rate));
    let outcomes: Vec<SurvivalRecord> = hazards
        .iter()
        .zip(&ids)
        .map(|(&h, id)| {
            let t: f64 = Exp::new(h).expect("positive rate").sample(&mut surv_rng);
            let c = match mu {
                Some(mu) => Exp::new(mu).expect("positive rate").sample(&mut surv_rng),
                None => f64::INFINITY,
            };
            let time = t.min(c).max(f64::MIN_POSITIVE);
            SurvivalRecord::new(id.clone(), time, t <= c)
        })
        .collect();

    let mut label_rows: Vec<Vec<Option<bool>>> = true_concepts
        .iter()
        .map(|y| y.iter().map(|&b| Some(b)).collect())
        .collect();
    let mut label_rng = root.rng("labels");
    if config.shuffle_labels {
        label_rows.shuffle(&mut label_rng);
    }
    if config.missing_label_rate > 0.0 {
        for row in &mut label_rows {
            for l in row.iter_mut() {
                if label_rng.random::<f64>() < config.missing_label_rate {
                    *l = None;
                }
            }
        }
    }

    let mut demo_rng = root.rng("demographics");
    let age = Normal::new(60.0_f64, 10.0).expect("valid normal");
    let options = KnnOptions {
        k: config.knn_k,
        ..KnnOptions::default()
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = demo_rng.random();
        let race = if u < 0.7 {
            Race::White
        } else if u < 0.9 {
            Race::Black
        } else if u < 0.95 {
            Race::Asian
        } else {
            Race::Unknown
        };
        let demographics = DemographicRecord {
            patient_id: ids[i].clone(),
            age: Some(age.sample(&mut demo_rng).clamp(18.0, 95.0).round()),
            gender: if demo_rng.random::<bool>() { Gender::Female } else { Gender::Male },
            race,
            subtype: [Subtype::Ccrcc, Subtype::Prcc, Subtype::Chrcc][demo_rng.random_range(0..3)],
        };
        let graph = build_slide_graph(&slides[i], options)?;
        samples.push(Sample {
            patient_id: ids[i].clone(),
            slide_id: slides[i].slide_id.clone(),
            labels: ConceptLabels {
                slide_id: slides[i].slide_id.clone(),
                labels: label_rows[i].clone(),
            },
            outcome: outcomes[i].clone(),
            demographics,
            graph: Some(Arc::new(graph)),
        });
    }
    Ok(SynthStudy {
        config: config.clone(),
        dataset: StudyDataset {
            vocabulary: ConceptVocabulary::new(config.concept_names())?,
            samples,
        },
        slides,
        directions,
        clusters,
        true_concepts,
    })
}
