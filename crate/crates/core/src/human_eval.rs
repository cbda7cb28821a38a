//! Human evaluation studies: item sampling with mismatched-interpretation
//! controls, score sheet I/O, and per-dimension summary statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetKind;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("insufficient pool for {dataset}: need {needed}, have {available}")]
    InsufficientPool {
        dataset: DatasetKind,
        needed: usize,
        available: usize,
    },
    #[error("pool is empty")]
    EmptyPool,
    #[error("need at least two distinct interpretations to build control items")]
    NoControlSource,
    #[error("items without any score: {}", .0.join(", "))]
    Unscored(Vec<String>),
    #[error("score refers to unknown item {0}")]
    UnknownItem(String),
    #[error("score out of range for item {item_id} ({dimension}): {value}")]
    OutOfRange {
        item_id: String,
        dimension: Dimension,
        value: u8,
    },
    #[error("score sheet: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// A generated interpretation eligible for a study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyCandidate {
    pub meme_id: String,
    pub dataset: DatasetKind,
    pub interpretation_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyItem {
    pub item_id: String,
    pub meme_id: String,
    pub dataset: DatasetKind,
    pub interpretation_text: String,
    pub is_control: bool,
    pub control_source_meme_id: Option<String>,
}

/// Samples `n_items` candidates evenly across the datasets present in the
/// pool, adds `n_controls` items whose interpretation is taken from another
/// meme, and shuffles the result by `seed`.
pub fn build_study(
    pool: &[StudyCandidate],
    n_items: usize,
    n_controls: usize,
    seed: u64,
) -> Result<Vec<StudyItem>, StudyError> {
    if pool.is_empty() {
        return Err(StudyError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_dataset: BTreeMap<DatasetKind, Vec<&StudyCandidate>> = BTreeMap::new();
    for c in pool {
        by_dataset.entry(c.dataset).or_default().push(c);
    }
    let k = by_dataset.len();
    let mut chosen: Vec<&StudyCandidate> = Vec::with_capacity(n_items);
    for (i, (dataset, candidates)) in by_dataset.iter().enumerate() {
        // Remainders go to the first datasets in sorted order.
        let needed = n_items / k + usize::from(i < n_items % k);
        if candidates.len() < needed {
            return Err(StudyError::InsufficientPool {
                dataset: *dataset,
                needed,
                available: candidates.len(),
            });
        }
        chosen.extend(candidates.choose_multiple(&mut rng, needed).copied());
    }

    let mut items: Vec<StudyItem> = chosen
        .iter()
        .map(|c| StudyItem {
            item_id: String::new(),
            meme_id: c.meme_id.clone(),
            dataset: c.dataset,
            interpretation_text: c.interpretation_text.clone(),
            is_control: false,
            control_source_meme_id: None,
        })
        .collect();

    if n_controls > 0 {
        if n_controls > pool.len() {
            return Err(StudyError::InsufficientPool {
                dataset: pool[0].dataset,
                needed: n_controls,
                available: pool.len(),
            });
        }
        for target in pool.choose_multiple(&mut rng, n_controls) {
            let sources: Vec<&StudyCandidate> = pool
                .iter()
                .filter(|s| s.meme_id != target.meme_id && s.interpretation_text != target.interpretation_text)
                .collect();
            let source = sources.choose(&mut rng).ok_or(StudyError::NoControlSource)?;
            items.push(StudyItem {
                item_id: String::new(),
                meme_id: target.meme_id.clone(),
                dataset: target.dataset,
                interpretation_text: source.interpretation_text.clone(),
                is_control: true,
                control_source_meme_id: Some(source.meme_id.clone()),
            });
        }
    }

    items.shuffle(&mut rng);
    for (i, item) in items.iter_mut().enumerate() {
        item.item_id = format!("q{:03}", i + 1);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Clarity,
    Accuracy,
    CulturalRelevance,
    Helpfulness,
    Recognition,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Clarity,
        Dimension::Accuracy,
        Dimension::CulturalRelevance,
        Dimension::Helpfulness,
        Dimension::Recognition,
    ];

    /// Column abbreviation used in the summary table.
    pub fn short(self) -> &'static str {
        match self {
            Dimension::Clarity => "Cl.",
            Dimension::Accuracy => "Acc.",
            Dimension::CulturalRelevance => "Rel.",
            Dimension::Helpfulness => "Help.",
            Dimension::Recognition => "Rec.",
        }
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dimension::Clarity => "clarity",
            Dimension::Accuracy => "accuracy",
            Dimension::CulturalRelevance => "cultural_relevance",
            Dimension::Helpfulness => "helpfulness",
            Dimension::Recognition => "recognition",
        })
    }
}

/// One annotator's Likert ratings (1 to 5) for one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratings {
    pub clarity: u8,
    pub accuracy: u8,
    pub cultural_relevance: u8,
    pub helpfulness: u8,
    pub recognition: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScore {
    pub item_id: String,
    pub annotator_id: String,
    pub clarity: u8,
    pub accuracy: u8,
    pub cultural_relevance: u8,
    pub helpfulness: u8,
    pub recognition: u8,
}

impl RubricScore {
    pub fn new(item_id: &str, annotator_id: &str, r: Ratings) -> Self {
        Self {
            item_id: item_id.into(),
            annotator_id: annotator_id.into(),
            clarity: r.clarity,
            accuracy: r.accuracy,
            cultural_relevance: r.cultural_relevance,
            helpfulness: r.helpfulness,
            recognition: r.recognition,
        }
    }

    pub fn get(&self, d: Dimension) -> u8 {
        match d {
            Dimension::Clarity => self.clarity,
            Dimension::Accuracy => self.accuracy,
            Dimension::CulturalRelevance => self.cultural_relevance,
            Dimension::Helpfulness => self.helpfulness,
            Dimension::Recognition => self.recognition,
        }
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        for d in Dimension::ALL {
            let value = self.get(d);
            if !(1..=5).contains(&value) {
                return Err(StudyError::OutOfRange {
                    item_id: self.item_id.clone(),
                    dimension: d,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Fixed header: item_id, annotator_id, then the five dimensions.
pub fn read_scores(reader: impl io::Read) -> Result<Vec<RubricScore>, StudyError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let score: RubricScore = row?;
        score.validate()?;
        out.push(score);
    }
    Ok(out)
}

pub fn write_scores(writer: impl io::Write, scores: &[RubricScore]) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// A blank sheet for one annotator: one row per item with empty score cells.
/// Control flags are not exported.
pub fn export_sheet(writer: impl io::Write, annotator_id: &str, items: &[StudyItem]) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "item_id",
        "annotator_id",
        "meme_id",
        "interpretation",
        "clarity",
        "accuracy",
        "cultural_relevance",
        "helpfulness",
        "recognition",
    ])?;
    for item in items {
        w.write_record([
            item.item_id.as_str(),
            annotator_id,
            item.meme_id.as_str(),
            item.interpretation_text.as_str(),
            "",
            "",
            "",
            "",
            "",
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a filled-in sheet produced by `export_sheet`.
pub fn read_sheet(reader: impl io::Read) -> Result<Vec<RubricScore>, StudyError> {
    #[derive(Deserialize)]
    struct Row {
        item_id: String,
        annotator_id: String,
        clarity: u8,
        accuracy: u8,
        cultural_relevance: u8,
        helpfulness: u8,
        recognition: u8,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: Row = row?;
        let score = RubricScore {
            item_id: r.item_id,
            annotator_id: r.annotator_id,
            clarity: r.clarity,
            accuracy: r.accuracy,
            cultural_relevance: r.cultural_relevance,
            helpfulness: r.helpfulness,
            recognition: r.recognition,
        };
        score.validate()?;
        out.push(score);
    }
    Ok(out)
}

/// Annotator-averaged score held as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Avg {
    num: u32,
    den: u32,
}

impl Avg {
    fn new(num: u32, den: u32) -> Self {
        let g = gcd(num, den);
        Self { num: num / g, den: den / g }
    }

    fn value(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

impl Ord for Avg {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (u64::from(self.num) * u64::from(other.den)).cmp(&(u64::from(other.num) * u64::from(self.den)))
    }
}

impl PartialOrd for Avg {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 { a.max(1) } else { gcd(b, a % b) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionStats {
    pub mean: f64,
    pub median: f64,
    /// Most frequent per-item average; ties resolve to the smallest value.
    pub mode: f64,
    pub n_at_most_3: usize,
    pub n_at_least_4: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n_items: usize,
    pub dimensions: BTreeMap<Dimension, DimensionStats>,
}

impl StudySummary {
    pub fn get(&self, d: Dimension) -> &DimensionStats {
        &self.dimensions[&d]
    }
}

fn dimension_stats(mut avgs: Vec<Avg>) -> DimensionStats {
    avgs.sort();
    let n = avgs.len();
    // Sum of exact fractions, accumulated in f64 only at the end of each term.
    let mean = avgs.iter().map(|a| a.value()).sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        avgs[n / 2].value()
    } else {
        (avgs[n / 2 - 1].value() + avgs[n / 2].value()) / 2.0
    };
    let mut counts: BTreeMap<Avg, usize> = BTreeMap::new();
    for a in &avgs {
        *counts.entry(*a).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let mode = counts
        .iter()
        .find(|(_, c)| **c == top)
        .map(|(a, _)| a.value())
        .unwrap_or(f64::NAN);
    DimensionStats {
        mean,
        median,
        mode,
        n_at_most_3: avgs.iter().filter(|a| a.num <= 3 * a.den).count(),
        n_at_least_4: avgs.iter().filter(|a| a.num >= 4 * a.den).count(),
    }
}

/// Per-item mean over annotators, then study-level statistics per dimension.
/// Control items are excluded.
pub fn summarize(scores: &[RubricScore], items: &[StudyItem]) -> Result<StudySummary, StudyError> {
    let index: HashMap<&str, &StudyItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut per_item: BTreeMap<&str, Vec<&RubricScore>> = items
        .iter()
        .filter(|i| !i.is_control)
        .map(|i| (i.item_id.as_str(), Vec::new()))
        .collect();
    for s in scores {
        s.validate()?;
        let item = index
            .get(s.item_id.as_str())
            .ok_or_else(|| StudyError::UnknownItem(s.item_id.clone()))?;
        if !item.is_control {
            per_item.get_mut(item.item_id.as_str()).unwrap().push(s);
        }
    }
    let unscored: Vec<String> = per_item
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(k, _)| k.to_string())
        .collect();
    if !unscored.is_empty() {
        return Err(StudyError::Unscored(unscored));
    }
    let mut dimensions = BTreeMap::new();
    if !per_item.is_empty() {
        for d in Dimension::ALL {
            let avgs = per_item
                .values()
                .map(|v| Avg::new(v.iter().map(|s| u32::from(s.get(d))).sum(), v.len() as u32))
                .collect();
            dimensions.insert(d, dimension_stats(avgs));
        }
    }
    Ok(StudySummary {
        n_items: per_item.len(),
        dimensions,
    })
}

pub const DEFAULT_CONTROL_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorCheck {
    pub annotator_id: String,
    pub n_controls_scored: usize,
    /// Mean accuracy-dimension score over control items.
    pub mean_control_accuracy: Option<f64>,
    pub passed: bool,
}

/// An annotator passes when their mean accuracy score on control items is at
/// most `threshold`. Annotators who scored no controls fail.
pub fn control_check(scores: &[RubricScore], items: &[StudyItem], threshold: f64) -> Vec<AnnotatorCheck> {
    let controls: BTreeSet<&str> = items
        .iter()
        .filter(|i| i.is_control)
        .map(|i| i.item_id.as_str())
        .collect();
    let mut by_annotator: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for s in scores {
        let entry = by_annotator.entry(s.annotator_id.as_str()).or_default();
        if controls.contains(s.item_id.as_str()) {
            entry.push(s.accuracy);
        }
    }
    by_annotator
        .into_iter()
        .map(|(annotator, values)| {
            let mean = (!values.is_empty())
                .then(|| values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64);
            AnnotatorCheck {
                annotator_id: annotator.to_string(),
                n_controls_scored: values.len(),
                mean_control_accuracy: mean,
                passed: mean.is_some_and(|m| m <= threshold),
            }
        })
        .collect()
}

/// Text table with threshold counts on top and mean/median/mode below.
pub fn render_summary(summary: &StudySummary) -> String {
    let label_width = "#. Avg Score <= 3".len();
    let col = 7;
    let mut out = String::new();
    let _ = write!(out, "{:label_width$}", "");
    for d in Dimension::ALL {
        let _ = write!(out, "{:>col$}", d.short());
    }
    out.push('\n');
    let rule = "-".repeat(label_width + col * Dimension::ALL.len());
    let row = |out: &mut String, label: &str, cell: &dyn Fn(&DimensionStats) -> String| {
        let _ = write!(out, "{label:label_width$}");
        for d in Dimension::ALL {
            let text = summary.dimensions.get(&d).map_or_else(|| "-".to_string(), cell);
            let _ = write!(out, "{text:>col$}");
        }
        out.push('\n');
    };
    out.push_str(&rule);
    out.push('\n');
    row(&mut out, "#. Avg Score <= 3", &|s| s.n_at_most_3.to_string());
    row(&mut out, "#. Avg Score >= 4", &|s| s.n_at_least_4.to_string());
    out.push_str(&rule);
    out.push('\n');
    row(&mut out, "Mean", &|s| format!("{:.2}", s.mean));
    row(&mut out, "Median", &|s| format!("{:.2}", s.median));
    row(&mut out, "Mode", &|s| format!("{:.2}", s.mode));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, control: bool) -> StudyItem {
        StudyItem {
            item_id: id.into(),
            meme_id: format!("m-{id}"),
            dataset: DatasetKind::Fhm,
            interpretation_text: format!("text {id}"),
            is_control: control,
            control_source_meme_id: control.then(|| "other".into()),
        }
    }

    fn uniform(item: &str, annotator: &str, v: u8) -> RubricScore {
        RubricScore::new(item, annotator, Ratings {
            clarity: v,
            accuracy: v,
            cultural_relevance: v,
            helpfulness: v,
            recognition: v,
        })
    }

    fn pool(per_dataset: usize) -> Vec<StudyCandidate> {
        [DatasetKind::Fhm, DatasetKind::HarMeme, DatasetKind::Mami]
            .iter()
            .flat_map(|&d| {
                (0..per_dataset).map(move |i| StudyCandidate {
                    meme_id: format!("{d}-{i}"),
                    dataset: d,
                    interpretation_text: format!("interpretation of {d} meme {i}"),
                })
            })
            .collect()
    }

    #[test]
    fn study_composition() {
        let items = build_study(&pool(100), 150, 15, 1).unwrap();
        assert_eq!(items.len(), 165);
        let regular: Vec<_> = items.iter().filter(|i| !i.is_control).collect();
        for d in [DatasetKind::Fhm, DatasetKind::HarMeme, DatasetKind::Mami] {
            assert_eq!(regular.iter().filter(|i| i.dataset == d).count(), 50);
        }
        let by_meme: HashMap<String, String> = pool(100)
            .into_iter()
            .map(|c| (c.meme_id, c.interpretation_text))
            .collect();
        for c in items.iter().filter(|i| i.is_control) {
            assert_ne!(c.interpretation_text, by_meme[&c.meme_id]);
            assert_ne!(c.control_source_meme_id.as_deref(), Some(c.meme_id.as_str()));
        }
        assert_eq!(items, build_study(&pool(100), 150, 15, 1).unwrap());
        assert!(build_study(&pool(100), 150, 0, 1).unwrap().iter().all(|i| !i.is_control));
    }

    #[test]
    fn insufficient_pool_is_an_error() {
        assert!(matches!(
            build_study(&pool(10), 150, 0, 1),
            Err(StudyError::InsufficientPool { needed: 50, available: 10, .. })
        ));
    }

    #[test]
    fn all_fives() {
        let items: Vec<_> = (0..4).map(|i| item(&format!("i{i}"), false)).collect();
        let scores: Vec<_> = items
            .iter()
            .flat_map(|it| ["a", "b", "c"].map(|a| uniform(&it.item_id, a, 5)))
            .collect();
        let s = summarize(&scores, &items).unwrap();
        let c = s.get(Dimension::Clarity);
        assert_eq!((c.mean, c.n_at_least_4, c.n_at_most_3), (5.0, 4, 0));
    }

    #[test]
    fn two_items_three_and_four() {
        let items = vec![item("x", false), item("y", false)];
        let scores = vec![uniform("x", "a", 3), uniform("y", "a", 4)];
        let s = summarize(&scores, &items).unwrap();
        let c = s.get(Dimension::Accuracy);
        assert_eq!((c.mean, c.median, c.n_at_most_3, c.n_at_least_4), (3.5, 3.5, 1, 1));
    }

    #[test]
    fn controls_are_excluded_and_unscored_items_reported() {
        let items = vec![item("x", false), item("ctl", true)];
        let base = vec![uniform("x", "a", 4)];
        let mut with_ctl = base.clone();
        with_ctl.push(uniform("ctl", "a", 1));
        assert_eq!(summarize(&base, &items).unwrap(), summarize(&with_ctl, &items).unwrap());

        let items = vec![item("x", false), item("y", false)];
        match summarize(&base, &items) {
            Err(StudyError::Unscored(ids)) => assert_eq!(ids, vec!["y".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn control_check_threshold() {
        let items = vec![item("c1", true), item("c2", true), item("c3", true), item("x", false)];
        let mut scores = Vec::new();
        for (annotator, vals) in [("ones", [1, 1, 1]), ("fives", [5, 5, 5]), ("mixed", [2, 2, 3])] {
            for (c, v) in ["c1", "c2", "c3"].iter().zip(vals) {
                scores.push(uniform(c, annotator, v));
            }
        }
        let checks = control_check(&scores, &items, DEFAULT_CONTROL_THRESHOLD);
        let passed: BTreeMap<_, _> = checks.iter().map(|c| (c.annotator_id.as_str(), c.passed)).collect();
        assert!(passed["ones"]);
        assert!(!passed["fives"]);
        assert!(!passed["mixed"]);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let scores = vec![uniform("x", "a", 3), uniform("y", "b", 5)];
        let mut buf = Vec::new();
        write_scores(&mut buf, &scores).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("item_id,annotator_id,clarity,accuracy,cultural_relevance,helpfulness,recognition"));
        assert_eq!(read_scores(buf.as_slice()).unwrap(), scores);
        let bad = "item_id,annotator_id,clarity,accuracy,cultural_relevance,helpfulness,recognition\nx,a,6,1,1,1,1\n";
        assert!(matches!(read_scores(bad.as_bytes()), Err(StudyError::OutOfRange { value: 6, .. })));
    }

    #[test]
    fn sheet_export_and_read_back() {
        let items = vec![item("x", false), item("c", true)];
        let mut buf = Vec::new();
        export_sheet(&mut buf, "ann1", &items).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("true"));
        let filled: String = text
            .lines()
            .enumerate()
            .map(|(i, l)| match i {
                0 => format!("{l}\n"),
                _ => format!("{}4,4,4,4,4\n", l.strip_suffix(",,,,").unwrap()),
            })
            .collect();
        let scores = read_sheet(filled.as_bytes()).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| s.annotator_id == "ann1" && s.clarity == 4));
    }

    #[test]
    fn table_shape() {
        let items = vec![item("x", false)];
        let s = summarize(&[uniform("x", "a", 4)], &items).unwrap();
        let text = render_summary(&s);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].contains("Cl.") && lines[0].contains("Rec."));
        assert!(lines[2].starts_with("#. Avg Score <= 3"));
        assert!(lines[5].starts_with("Mean") && lines[5].contains("4.00"));
        assert!(lines[7].starts_with("Mode"));
    }
}
