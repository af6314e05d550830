//! On-disk formats and the study join.
//!
//! All tables are UTF-8 and delimited; files ending in `.csv` use commas,
//! everything else tabs. Lines starting with `#` are comments.
//!
//! | table        | columns                                              |
//! |--------------|------------------------------------------------------|
//! | patches      | `slide_id patch_id x y f_1 … f_d` (header optional)  |
//! | concepts     | `slide_id <concept names…>`; `1`, `0`, or `-1`/`NA`/empty for missing |
//! | outcomes     | `patient_id time event` (`event` is `1`/`0`)         |
//! | demographics | `patient_id age gender race subtype`                 |
//! | vocabulary   | one concept name per line                            |
//! | mapping      | `slide_id patient_id`                                |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WsiGraph;

/// Sentinel written for a missing concept label.
pub const MISSING_LABEL: &str = "-1";

/// Length of the patient prefix of a TCGA-style slide barcode.
pub const PATIENT_PREFIX_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub x: f64,
    pub y: f64,
    pub features: Vec<f64>,
}

/// The patches of one slide; all share one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePatches {
    pub slide_id: String,
    pub patches: Vec<PatchRecord>,
}

impl SlidePatches {
    pub fn dim(&self) -> usize {
        self.patches.first().map_or(0, |p| p.features.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    names: Vec<String>,
}

impl ConceptVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyInput("concept vocabulary".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::InvalidInput("empty concept name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateId(n.clone()));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptLabels {
    pub slide_id: String,
    /// `None` is a missing label.
    pub labels: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Days; strictly positive in a valid dataset.
    pub time: f64,
    /// `true` when death was observed, `false` when censored.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool) -> Self {
        Self {
            patient_id: patient_id.into(),
            time,
            event,
        }
    }
}

macro_rules! label_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal $(| $alt:literal)*),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let lower = s.trim().to_ascii_lowercase();
                $(
                    if lower == $text.to_ascii_lowercase() $(|| lower == $alt)* {
                        return Ok($name::$variant);
                    }
                )+
                Err(Error::InvalidInput(format!("unknown {} {s:?}", stringify!($name))))
            }
        }
    };
}

label_enum!(Gender {
    Female => "female" | "f",
    Male => "male" | "m",
    Unknown => "unknown" | "" | "na",
});

label_enum!(Race {
    White => "white",
    Black => "black" | "black or african american",
    Asian => "asian",
    Unknown => "unknown",
    NotAvailable => "na" | "" | "n/a" | "not available",
});

label_enum!(Subtype {
    Ccrcc => "ccRCC" | "kirc",
    Prcc => "pRCC" | "kirp",
    Chrcc => "chRCC" | "kich",
    Unknown => "unknown" | "" | "na",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicRecord {
    pub patient_id: String,
    pub age: Option<f64>,
    pub gender: Gender,
    pub race: Race,
    pub subtype: Subtype,
}

impl DemographicRecord {
    pub fn unknown(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            age: None,
            gender: Gender::Unknown,
            race: Race::NotAvailable,
            subtype: Subtype::Unknown,
        }
    }
}

/// How slide identifiers map to patients.
#[derive(Debug, Clone, Default)]
pub enum SlideMapping {
    /// First [`PATIENT_PREFIX_LEN`] characters of the slide id.
    #[default]
    Prefix,
    Explicit(BTreeMap<String, String>),
}

impl SlideMapping {
    pub fn patient_of(&self, slide_id: &str) -> Option<String> {
        match self {
            SlideMapping::Prefix => Some(slide_id.chars().take(PATIENT_PREFIX_LEN).collect()),
            SlideMapping::Explicit(m) => m.get(slide_id).cloned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub patient_id: String,
    pub slide_id: String,
    pub labels: ConceptLabels,
    pub outcome: SurvivalRecord,
    pub demographics: DemographicRecord,
    pub graph: Option<Arc<WsiGraph>>,
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.patient_id == other.patient_id
            && self.slide_id == other.slide_id
            && self.labels == other.labels
            && self.outcome == other.outcome
            && self.demographics == other.demographics
            && self.graph.as_deref() == other.graph.as_deref()
    }
}

/// Joined, patient-level study data. Samples are ordered by patient id.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    pub vocabulary: ConceptVocabulary,
    pub samples: Vec<Sample>,
}

impl StudyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_concepts(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn outcomes(&self) -> Vec<SurvivalRecord> {
        self.samples.iter().map(|s| s.outcome.clone()).collect()
    }

    pub fn graph(&self, i: usize) -> Result<&WsiGraph> {
        self.samples[i]
            .graph
            .as_deref()
            .ok_or_else(|| Error::InvalidInput(format!("sample {} has no graph", self.samples[i].patient_id)))
    }

    /// Attaches graphs by slide id; returns how many samples received one.
    pub fn attach_graphs<I: IntoIterator<Item = WsiGraph>>(&mut self, graphs: I) -> usize {
        let by_slide: BTreeMap<String, Arc<WsiGraph>> =
            graphs.into_iter().map(|g| (g.slide_id.clone(), Arc::new(g))).collect();
        let mut attached = 0;
        for s in &mut self.samples {
            if let Some(g) = by_slide.get(&s.slide_id) {
                s.graph = Some(Arc::clone(g));
                attached += 1;
            }
        }
        attached
    }

    /// A dataset over a subset of samples, in the given order.
    pub fn subset(&self, idx: &[usize]) -> StudyDataset {
        StudyDataset {
            vocabulary: self.vocabulary.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// The per-source inputs that would reproduce this dataset under
    /// [`join_study`] with an explicit mapping.
    pub fn sources(&self) -> StudySources {
        StudySources {
            slides: self.samples.iter().map(|s| s.slide_id.clone()).collect(),
            concepts: self.samples.iter().map(|s| s.labels.clone()).collect(),
            outcomes: self.outcomes(),
            demographics: self.samples.iter().map(|s| s.demographics.clone()).collect(),
            mapping: SlideMapping::Explicit(
                self.samples
                    .iter()
                    .map(|s| (s.slide_id.clone(), s.patient_id.clone()))
                    .collect(),
            ),
        }
    }
}

/// Unjoined inputs, keyed by their own identifiers.
#[derive(Debug, Clone, Default)]
pub struct StudySources {
    pub slides: Vec<String>,
    pub concepts: Vec<ConceptLabels>,
    pub outcomes: Vec<SurvivalRecord>,
    pub demographics: Vec<DemographicRecord>,
    pub mapping: SlideMapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DropReason {
    NoSlide,
    NoConcepts,
    NoOutcome,
    /// A second slide for a patient that already has one.
    ExtraSlide,
    UnmappedSlide,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::NoSlide => "no slide",
            DropReason::NoConcepts => "no concepts",
            DropReason::NoOutcome => "no outcome",
            DropReason::ExtraSlide => "extra slide",
            DropReason::UnmappedSlide => "unmapped slide",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JoinReport {
    pub slides: usize,
    pub concepts: usize,
    pub outcomes: usize,
    pub demographics: usize,
    pub matched: usize,
    /// Matched patients without a demographics row (filled as unknown).
    pub missing_demographics: usize,
    /// `(id, reason)`, sorted.
    pub dropped: Vec<(String, DropReason)>,
}

impl JoinReport {
    pub fn dropped_by(&self, reason: DropReason) -> usize {
        self.dropped.iter().filter(|(_, r)| *r == reason).count()
    }
}

/// Keeps only patients that have a slide, concept labels and an outcome.
///
/// Concept rows are keyed by slide id and mapped to patients like slides.
/// A patient with several slides keeps the lexicographically first one.
pub fn join_study(
    vocabulary: &ConceptVocabulary,
    sources: &StudySources,
) -> Result<(StudyDataset, JoinReport)> {
    let mut report = JoinReport {
        slides: sources.slides.len(),
        concepts: sources.concepts.len(),
        outcomes: sources.outcomes.len(),
        demographics: sources.demographics.len(),
        ..JoinReport::default()
    };

    let mut slide_of: BTreeMap<String, String> = BTreeMap::new();
    let mut sorted_slides: Vec<&String> = sources.slides.iter().collect();
    sorted_slides.sort();
    for slide in sorted_slides {
        let Some(patient) = sources.mapping.patient_of(slide) else {
            report.dropped.push((slide.clone(), DropReason::UnmappedSlide));
            continue;
        };
        if slide_of.contains_key(&patient) {
            report.dropped.push((slide.clone(), DropReason::ExtraSlide));
        } else {
            slide_of.insert(patient, slide.clone());
        }
    }

    let mut concepts_of: BTreeMap<String, &ConceptLabels> = BTreeMap::new();
    for c in &sources.concepts {
        if c.labels.len() != vocabulary.len() {
            return Err(Error::InvalidInput(format!(
                "concept row {} has {} labels, vocabulary has {}",
                c.slide_id,
                c.labels.len(),
                vocabulary.len()
            )));
        }
        let patient = sources.mapping.patient_of(&c.slide_id).unwrap_or_else(|| c.slide_id.clone());
        if concepts_of.insert(patient.clone(), c).is_some() {
            return Err(Error::DuplicateId(patient));
        }
    }
    let mut outcome_of: BTreeMap<&str, &SurvivalRecord> = BTreeMap::new();
    for o in &sources.outcomes {
        if outcome_of.insert(&o.patient_id, o).is_some() {
            return Err(Error::DuplicateId(o.patient_id.clone()));
        }
    }
    let mut demo_of: BTreeMap<&str, &DemographicRecord> = BTreeMap::new();
    for d in &sources.demographics {
        if demo_of.insert(&d.patient_id, d).is_some() {
            return Err(Error::DuplicateId(d.patient_id.clone()));
        }
    }

    let all_ids: BTreeSet<&str> = slide_of
        .keys()
        .map(String::as_str)
        .chain(concepts_of.keys().map(String::as_str))
        .chain(outcome_of.keys().copied())
        .collect();

    let mut samples = Vec::new();
    for id in all_ids {
        let slide = slide_of.get(id);
        let concepts = concepts_of.get(id);
        let outcome = outcome_of.get(id);
        match (slide, concepts, outcome) {
            (Some(slide), Some(c), Some(o)) => {
                let demographics = match demo_of.get(id) {
                    Some(d) => (*d).clone(),
                    None => {
                        report.missing_demographics += 1;
                        DemographicRecord::unknown(id)
                    }
                };
                samples.push(Sample {
                    patient_id: id.to_string(),
                    slide_id: slide.clone(),
                    labels: (*c).clone(),
                    outcome: (*o).clone(),
                    demographics,
                    graph: None,
                });
            }
            _ => {
                let reason = if slide.is_none() {
                    DropReason::NoSlide
                } else if concepts.is_none() {
                    DropReason::NoConcepts
                } else {
                    DropReason::NoOutcome
                };
                report.dropped.push((id.to_string(), reason));
            }
        }
    }
    report.dropped.sort();
    if samples.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    report.matched = samples.len();
    Ok((
        StudyDataset {
            vocabulary: vocabulary.clone(),
            samples,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    NonPositiveTime,
    LabelLength { found: usize, expected: usize },
    AllLabelsMissing,
    MissingGraph,
    FeatureDimension { found: usize, expected: usize },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::NonPositiveTime => f.write_str("survival time is not positive"),
            ViolationKind::LabelLength { found, expected } => {
                write!(f, "{found} concept labels, vocabulary has {expected}")
            }
            ViolationKind::AllLabelsMissing => f.write_str("every concept label is missing"),
            ViolationKind::MissingGraph => f.write_str("no slide graph"),
            ViolationKind::FeatureDimension { found, expected } => {
                write!(f, "feature dimension {found}, dataset uses {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub patient_id: String,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Per-sample checks. Graph checks run only when `require_graphs` is set.
pub fn validate_dataset(dataset: &StudyDataset, require_graphs: bool) -> ValidationReport {
    let k = dataset.num_concepts();
    let dim = dataset
        .samples
        .iter()
        .find_map(|s| s.graph.as_ref().map(|g| g.dim()));
    let mut violations = Vec::new();
    let mut flag = |s: &Sample, kind| {
        violations.push(Violation {
            patient_id: s.patient_id.clone(),
            kind,
        })
    };
    for s in &dataset.samples {
        if !(s.outcome.time > 0.0 && s.outcome.time.is_finite()) {
            flag(s, ViolationKind::NonPositiveTime);
        }
        if s.labels.labels.len() != k {
            flag(
                s,
                ViolationKind::LabelLength {
                    found: s.labels.labels.len(),
                    expected: k,
                },
            );
        } else if s.labels.labels.iter().all(Option::is_none) {
            flag(s, ViolationKind::AllLabelsMissing);
        }
        if require_graphs {
            match (&s.graph, dim) {
                (None, _) => flag(s, ViolationKind::MissingGraph),
                (Some(g), Some(d)) if g.dim() != d => flag(
                    s,
                    ViolationKind::FeatureDimension {
                        found: g.dim(),
                        expected: d,
                    },
                ),
                _ => {}
            }
        }
    }
    ValidationReport { violations }
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => b',',
        _ => b'\t',
    }
}

fn reader(path: &Path, has_headers: bool) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path))
        .has_headers(has_headers)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?)
}

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new()
        .delimiter(delimiter_for(path))
        .flexible(true)
        .from_path(path)?)
}

fn parse_err(path: &Path, record: &csv::StringRecord, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: record.position().map_or(0, |p| p.line() as usize),
        message: message.into(),
    }
}

fn parse_f64(path: &Path, record: &csv::StringRecord, field: usize, what: &str) -> Result<f64> {
    let raw = record
        .get(field)
        .ok_or_else(|| parse_err(path, record, format!("missing {what}")))?;
    raw.parse::<f64>()
        .map_err(|_| parse_err(path, record, format!("{what} {raw:?} is not a number")))
}

/// Loads a patch table, grouped by slide id (sorted).
pub fn load_patch_table(path: &Path) -> Result<Vec<SlidePatches>> {
    let mut rdr = reader(path, false)?;
    let mut slides: BTreeMap<String, SlidePatches> = BTreeMap::new();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0) == Some("slide_id") {
            continue;
        }
        if rec.len() < 5 {
            return Err(parse_err(
                path,
                &rec,
                format!("expected slide_id, patch_id, x, y and at least one feature; found {} fields", rec.len()),
            ));
        }
        let x = parse_f64(path, &rec, 2, "x")?;
        let y = parse_f64(path, &rec, 3, "y")?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err(path, &rec, "non-finite centroid"));
        }
        let features = (4..rec.len())
            .map(|f| parse_f64(path, &rec, f, "feature"))
            .collect::<Result<Vec<_>>>()?;
        let slide_id = rec[0].to_string();
        let entry = slides.entry(slide_id.clone()).or_insert_with(|| SlidePatches {
            slide_id: slide_id.clone(),
            patches: Vec::new(),
        });
        if let Some(first) = entry.patches.first() {
            if first.features.len() != features.len() {
                return Err(Error::DimensionMismatch {
                    slide: slide_id,
                    expected: first.features.len(),
                    found: features.len(),
                });
            }
        }
        entry.patches.push(PatchRecord {
            patch_id: rec[1].to_string(),
            x,
            y,
            features,
        });
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(slides.into_values().collect())
}

pub fn write_patch_table(path: &Path, slides: &[SlidePatches]) -> Result<()> {
    let mut w = writer(path)?;
    let d = slides.first().map_or(0, SlidePatches::dim);
    let mut header = vec!["slide_id".to_string(), "patch_id".into(), "x".into(), "y".into()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in slides {
        for p in &s.patches {
            let mut row = vec![s.slide_id.clone(), p.patch_id.clone(), format!("{:?}", p.x), format!("{:?}", p.y)];
            row.extend(p.features.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

const PATCH_MAGIC: &[u8; 4] = b"PCHB";
const PATCH_VERSION: u32 = 1;

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Compact binary container for patch tables.
///
/// Layout (little endian): magic `PCHB`, `u32` version, `u64` slide count;
/// per slide: string id, `u64` patches, `u64` d; per patch: string id,
/// `f64` x, `f64` y, d × `f64` features. Strings are `u32` length + UTF-8.
pub fn write_patch_binary(path: &Path, slides: &[SlidePatches]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PATCH_MAGIC)?;
    w.write_u32::<LittleEndian>(PATCH_VERSION)?;
    w.write_u64::<LittleEndian>(slides.len() as u64)?;
    for s in slides {
        write_str(&mut w, &s.slide_id)?;
        w.write_u64::<LittleEndian>(s.patches.len() as u64)?;
        w.write_u64::<LittleEndian>(s.dim() as u64)?;
        for p in &s.patches {
            write_str(&mut w, &p.patch_id)?;
            w.write_f64::<LittleEndian>(p.x)?;
            w.write_f64::<LittleEndian>(p.y)?;
            for &v in &p.features {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_patch_binary(path: &Path) -> Result<Vec<SlidePatches>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PATCH_MAGIC {
        return Err(Error::Format(format!("{} is not a patch container", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != PATCH_VERSION {
        return Err(Error::Format(format!("unsupported patch container version {version}")));
    }
    let n_slides = r.read_u64::<LittleEndian>()? as usize;
    let mut slides = Vec::with_capacity(n_slides);
    for _ in 0..n_slides {
        let slide_id = read_str(&mut r)?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let d = r.read_u64::<LittleEndian>()? as usize;
        let mut patches = Vec::with_capacity(n);
        for _ in 0..n {
            let patch_id = read_str(&mut r)?;
            let x = r.read_f64::<LittleEndian>()?;
            let y = r.read_f64::<LittleEndian>()?;
            let mut features = vec![0.0; d];
            r.read_f64_into::<LittleEndian>(&mut features)?;
            patches.push(PatchRecord { patch_id, x, y, features });
        }
        slides.push(SlidePatches { slide_id, patches });
    }
    Ok(slides)
}

pub fn load_vocabulary(path: &Path) -> Result<ConceptVocabulary> {
    let text = std::fs::read_to_string(path)?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    ConceptVocabulary::new(names)
}

pub fn write_vocabulary(path: &Path, vocab: &ConceptVocabulary) -> Result<()> {
    let mut text = vocab.names().join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_label(raw: &str) -> Option<Option<bool>> {
    match raw.trim() {
        "1" | "1.0" | "true" => Some(Some(true)),
        "0" | "0.0" | "false" => Some(Some(false)),
        "" | "-1" | "NA" | "na" | "nan" => Some(None),
        _ => None,
    }
}

/// Loads concept labels; columns are matched to the vocabulary by name.
pub fn load_concepts(path: &Path, vocab: &ConceptVocabulary) -> Result<Vec<ConceptLabels>> {
    let mut rdr = reader(path, true)?;
    let headers = rdr.headers()?.clone();
    let column_of: Vec<usize> = vocab
        .names()
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("no column for concept {name:?}"),
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let labels = column_of
            .iter()
            .map(|&c| {
                let raw = rec.get(c).unwrap_or("");
                parse_label(raw).ok_or_else(|| parse_err(path, &rec, format!("bad concept label {raw:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ConceptLabels {
            slide_id: rec.get(0).unwrap_or_default().to_string(),
            labels,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

pub fn write_concepts(path: &Path, vocab: &ConceptVocabulary, rows: &[ConceptLabels]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["slide_id".to_string()];
    header.extend(vocab.names().iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.slide_id.clone()];
        row.extend(r.labels.iter().map(|l| match l {
            Some(true) => "1".to_string(),
            Some(false) => "0".to_string(),
            None => MISSING_LABEL.to_string(),
        }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_outcomes(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let mut rdr = reader(path, true)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let time = parse_f64(path, &rec, 1, "time")?;
        let event = match rec.get(2).map(str::trim) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            other => return Err(parse_err(path, &rec, format!("bad event flag {other:?}"))),
        };
        out.push(SurvivalRecord::new(&rec[0], time, event));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

pub fn write_outcomes(path: &Path, rows: &[SurvivalRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["patient_id", "time", "event"])?;
    for r in rows {
        w.write_record([r.patient_id.clone(), format!("{:?}", r.time), u8::from(r.event).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_demographics(path: &Path) -> Result<Vec<DemographicRecord>> {
    let mut rdr = reader(path, true)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let age = match field(1) {
            "" | "NA" | "na" | "unknown" => None,
            raw => {
                let a: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(path, &rec, format!("bad age {raw:?}")))?;
                if !(0.0..=130.0).contains(&a) {
                    return Err(parse_err(path, &rec, format!("age {a} outside [0, 130]")));
                }
                Some(a)
            }
        };
        let wrap = |e: Error| parse_err(path, &rec, e.to_string());
        out.push(DemographicRecord {
            patient_id: field(0).to_string(),
            age,
            gender: field(2).parse().map_err(wrap)?,
            race: field(3).parse().map_err(wrap)?,
            subtype: field(4).parse().map_err(wrap)?,
        });
    }
    Ok(out)
}

pub fn write_demographics(path: &Path, rows: &[DemographicRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["patient_id", "age", "gender", "race", "subtype"])?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            r.age.map_or_else(|| "NA".to_string(), |a| format!("{a:?}")),
            r.gender.to_string(),
            r.race.to_string(),
            r.subtype.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mapping(path: &Path) -> Result<SlideMapping> {
    let mut rdr = reader(path, true)?;
    let mut map = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(parse_err(path, &rec, "expected slide_id and patient_id"));
        }
        if map.insert(rec[0].to_string(), rec[1].to_string()).is_some() {
            return Err(Error::DuplicateId(rec[0].to_string()));
        }
    }
    Ok(SlideMapping::Explicit(map))
}

/// File locations of a study on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyPaths {
    pub patches: PathBuf,
    pub concepts: PathBuf,
    pub outcomes: PathBuf,
    pub demographics: Option<PathBuf>,
    pub vocabulary: PathBuf,
    pub mapping: Option<PathBuf>,
}

impl StudyPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            patches: dir.join("patches.tsv"),
            concepts: dir.join("concepts.tsv"),
            outcomes: dir.join("outcomes.tsv"),
            demographics: Some(dir.join("demographics.tsv")),
            vocabulary: dir.join("vocabulary.txt"),
            mapping: None,
        }
    }
}

/// A loaded but unjoined study.
#[derive(Debug, Clone)]
pub struct LoadedStudy {
    pub vocabulary: ConceptVocabulary,
    pub patches: Vec<SlidePatches>,
    pub sources: StudySources,
}

impl LoadedStudy {
    pub fn load(paths: &StudyPaths) -> Result<Self> {
        let vocabulary = load_vocabulary(&paths.vocabulary)?;
        let patches = if paths.patches.extension().and_then(|e| e.to_str()) == Some("bin") {
            read_patch_binary(&paths.patches)?
        } else {
            load_patch_table(&paths.patches)?
        };
        let sources = StudySources {
            slides: patches.iter().map(|s| s.slide_id.clone()).collect(),
            concepts: load_concepts(&paths.concepts, &vocabulary)?,
            outcomes: load_outcomes(&paths.outcomes)?,
            demographics: match &paths.demographics {
                Some(p) if p.exists() => load_demographics(p)?,
                _ => Vec::new(),
            },
            mapping: match &paths.mapping {
                Some(p) => load_mapping(p)?,
                None => SlideMapping::Prefix,
            },
        };
        Ok(Self {
            vocabulary,
            patches,
            sources,
        })
    }
}

/// Writes the joined samples as a self-contained study directory.
pub fn write_study(dir: &Path, dataset: &StudyDataset, patches: &[SlidePatches]) -> Result<StudyPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = StudyPaths::in_dir(dir);
    let keep: BTreeSet<&str> = dataset.samples.iter().map(|s| s.slide_id.as_str()).collect();
    let kept: Vec<SlidePatches> = patches
        .iter()
        .filter(|s| keep.contains(s.slide_id.as_str()))
        .cloned()
        .collect();
    write_vocabulary(&paths.vocabulary, &dataset.vocabulary)?;
    write_patch_table(&paths.patches, &kept)?;
    let labels: Vec<ConceptLabels> = dataset.samples.iter().map(|s| s.labels.clone()).collect();
    write_concepts(&paths.concepts, &dataset.vocabulary, &labels)?;
    write_outcomes(&paths.outcomes, &dataset.outcomes())?;
    let demo: Vec<DemographicRecord> = dataset.samples.iter().map(|s| s.demographics.clone()).collect();
    if let Some(p) = &paths.demographics {
        write_demographics(p, &demo)?;
    }
    Ok(paths)
}
