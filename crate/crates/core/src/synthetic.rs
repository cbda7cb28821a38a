//! Synthetic memes: colored-shape PNGs with templated overlay text. Used for
//! fixtures and for corpora where the label lives in exactly one modality.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetKind, Label, MemeRecord, Split};

const IMAGE_SIZE: u32 = 32;

const OVERLAYS: &[&str] = &[
    "when the weekend finally arrives",
    "me explaining my plans to my friends",
    "nobody: absolutely nobody:",
    "that feeling on a monday morning",
    "look at this new neighbor",
    "how it started versus how it is going",
    "when someone says they never watched it",
    "my face when the wifi drops",
];

const FILLER: &[&str] = &[
    "the picture shows a person standing near a wall",
    "the caption refers to an everyday situation",
    "the text is written in bold white letters",
    "the scene appears to be taken outdoors",
    "the image uses a simple flat background",
    "the author pairs the words with a familiar format",
    "the layout follows a common internet template",
    "the meme relies on a short written punchline",
];

const HATEFUL_CUES: &[&str] = &["demeaning", "hostile", "dehumanizing", "bigoted", "contemptuous"];
const BENIGN_CUES: &[&str] = &["playful", "wholesome", "friendly", "lighthearted", "affectionate"];

/// Where the label signal lives in a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Only the interpretation text carries the label.
    Interpretation,
    /// Only the image background color carries the label.
    Image,
}

#[derive(Debug, Clone, Copy)]
enum Background {
    Warm,
    Cool,
    Any,
}

fn jitter(rng: &mut ChaCha8Rng, base: u8, spread: u8) -> u8 {
    let lo = base.saturating_sub(spread);
    let hi = base.saturating_add(spread);
    rng.random_range(lo..=hi)
}

fn draw_image(rng: &mut ChaCha8Rng, background: Background) -> RgbImage {
    let bg = match background {
        Background::Warm => Rgb([jitter(rng, 210, 30), jitter(rng, 60, 40), jitter(rng, 50, 40)]),
        Background::Cool => Rgb([jitter(rng, 50, 40), jitter(rng, 70, 40), jitter(rng, 210, 30)]),
        Background::Any => Rgb([rng.random(), rng.random(), rng.random()]),
    };
    let fg = Rgb([rng.random(), rng.random(), rng.random()]);
    let mut img = RgbImage::from_pixel(IMAGE_SIZE, IMAGE_SIZE, bg);
    let size = rng.random_range(6..12u32);
    let cx = rng.random_range(size..IMAGE_SIZE - size);
    let cy = rng.random_range(size..IMAGE_SIZE - size);
    let circle = rng.random_bool(0.5);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let dx = x.abs_diff(cx);
        let dy = y.abs_diff(cy);
        let inside = if circle {
            dx * dx + dy * dy <= size * size / 2
        } else {
            dx <= size / 2 && dy <= size / 2
        };
        if inside {
            *px = fg;
        }
    }
    img
}

fn write_png(path: &Path, img: &RgbImage) -> io::Result<()> {
    img.save(path).map_err(io::Error::other)
}

fn neutral_interpretation(rng: &mut ChaCha8Rng) -> String {
    let picks: Vec<&&str> = FILLER.choose_multiple(rng, 3).collect();
    format!("{}. {}. {}.", capitalize(picks[0]), capitalize(picks[1]), capitalize(picks[2]))
}

fn cued_interpretation(rng: &mut ChaCha8Rng, label: Label) -> String {
    let cues = match label {
        Label::Hateful => HATEFUL_CUES,
        Label::NonHateful => BENIGN_CUES,
    };
    let cue = cues.choose(rng).unwrap();
    let picks: Vec<&&str> = FILLER.choose_multiple(rng, 2).collect();
    format!(
        "{}. The message is {cue} toward the people shown. {}.",
        capitalize(picks[0]),
        capitalize(picks[1])
    )
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Balanced labels in a seed-shuffled order.
fn balanced_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Label> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i % 2 == 0 { Label::Hateful } else { Label::NonHateful })
        .collect();
    labels.shuffle(rng);
    labels
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<MemeRecord>,
    pub test: Vec<MemeRecord>,
    pub interpretations: HashMap<String, String>,
}

/// Writes a balanced corpus whose label is recoverable from one modality only.
pub fn signal_corpus(
    dir: &Path,
    signal: Signal,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> io::Result<SyntheticCorpus> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SyntheticCorpus {
        train: Vec::with_capacity(n_train),
        test: Vec::with_capacity(n_test),
        interpretations: HashMap::new(),
    };
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for (i, label) in balanced_labels(&mut rng, n).into_iter().enumerate() {
            let id = format!("{split}-{i:05}");
            let (background, interpretation) = match signal {
                Signal::Interpretation => (Background::Any, cued_interpretation(&mut rng, label)),
                Signal::Image => {
                    let bg = match label {
                        Label::Hateful => Background::Warm,
                        Label::NonHateful => Background::Cool,
                    };
                    (bg, neutral_interpretation(&mut rng))
                }
            };
            let path = image_dir.join(format!("{id}.png"));
            write_png(&path, &draw_image(&mut rng, background))?;
            let record = MemeRecord {
                id: id.clone(),
                image_ref: path,
                overlay_text: OVERLAYS.choose(&mut rng).unwrap().to_string(),
                label,
                split,
                dataset: DatasetKind::Synthetic,
            };
            corpus.interpretations.insert(id, interpretation);
            match split {
                Split::Train => corpus.train.push(record),
                Split::Test => corpus.test.push(record),
            }
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_records: usize,
    pub n_hateful: usize,
    /// Number of records, taken from the end, whose image file is not written.
    pub n_missing_images: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureCounts {
    pub loaded_hateful: usize,
    pub loaded_non_hateful: usize,
    pub missing_images: usize,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest_path: PathBuf,
    pub annotation_path: PathBuf,
    pub counts: FixtureCounts,
}

/// Writes an annotation file, images and a manifest for a small labeled set.
/// Hateful records come first; missing images are taken from the tail.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> io::Result<Fixture> {
    assert!(spec.n_hateful <= spec.n_records && spec.n_missing_images <= spec.n_records);
    let image_dir = dir.join("img");
    fs::create_dir_all(&image_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lines = String::new();
    let mut counts = FixtureCounts {
        loaded_hateful: 0,
        loaded_non_hateful: 0,
        missing_images: spec.n_missing_images,
    };
    for i in 0..spec.n_records {
        let label = if i < spec.n_hateful { Label::Hateful } else { Label::NonHateful };
        let id = format!("syn{i:03}");
        let file = format!("{id}.png");
        let missing = i >= spec.n_records - spec.n_missing_images;
        if !missing {
            let bg = if label == Label::Hateful { Background::Warm } else { Background::Cool };
            write_png(&image_dir.join(&file), &draw_image(&mut rng, bg))?;
            match label {
                Label::Hateful => counts.loaded_hateful += 1,
                Label::NonHateful => counts.loaded_non_hateful += 1,
            }
        }
        let line = serde_json::json!({
            "id": id,
            "img": file,
            "text": OVERLAYS[i % OVERLAYS.len()],
            "label": u8::from(label),
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    let annotation_path = dir.join("annotations.jsonl");
    fs::write(&annotation_path, lines)?;
    let manifest_path = dir.join("manifest.toml");
    fs::write(
        &manifest_path,
        "dataset = \"SYNTHETIC\"\nsplit = \"train\"\nroot_dir = \".\"\nannotation_file = \"annotations.jsonl\"\nimage_dir = \"img\"\n",
    )?;
    Ok(Fixture {
        manifest_path,
        annotation_path,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_split_stats, load_dataset, DatasetManifest};

    #[test]
    fn fixture_loads_with_expected_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { n_records: 10, n_hateful: 6, n_missing_images: 1, seed: 3 };
        let fx = write_fixture(dir.path(), &spec).unwrap();
        let manifest = DatasetManifest::from_toml_file(&fx.manifest_path).unwrap();
        let out = load_dataset(&manifest).unwrap();
        assert_eq!(out.records.len(), 9);
        assert_eq!(out.errors.len(), 1);
        let stats = compute_split_stats(&out.records);
        assert_eq!(stats[0].n_hateful, 6);
        assert_eq!(stats[0].n_non_hateful, 3);
        assert_eq!(fx.counts, FixtureCounts { loaded_hateful: 6, loaded_non_hateful: 3, missing_images: 1 });
    }

    #[test]
    fn corpora_are_balanced_and_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = signal_corpus(a.path(), Signal::Interpretation, 20, 10, 9).unwrap();
        let cb = signal_corpus(b.path(), Signal::Interpretation, 20, 10, 9).unwrap();
        let hateful = ca.train.iter().filter(|r| r.label == Label::Hateful).count();
        assert_eq!(hateful, 10);
        assert_eq!(ca.interpretations, cb.interpretations);
        for (x, y) in ca.train.iter().zip(&cb.train) {
            assert_eq!(fs::read(&x.image_ref).unwrap(), fs::read(&y.image_ref).unwrap());
        }
    }

    #[test]
    fn image_corpus_interpretations_carry_no_cue() {
        let dir = tempfile::tempdir().unwrap();
        let c = signal_corpus(dir.path(), Signal::Image, 30, 0, 1).unwrap();
        for text in c.interpretations.values() {
            assert!(!HATEFUL_CUES.iter().chain(BENIGN_CUES).any(|cue| text.contains(cue)));
        }
    }
}
