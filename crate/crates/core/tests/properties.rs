use memeguard_core::dataset::Label;
use memeguard_core::encoding::{
    encode_interpretations_batch, TextEncoder, TextEncoderConfig, VisionLanguageEncoder, VisionLanguageEncoderConfig,
};
use memeguard_core::evaluation::{accuracy, auroc};
use memeguard_core::human_eval::{summarize, Dimension, Ratings, RubricScore, StudyItem};
use memeguard_core::dataset::DatasetKind;
use memeguard_core::interpret::PromptBundle;
use memeguard_core::training::run_schedule;
use proptest::prelude::*;

/// Pairwise Mann-Whitney count, O(n²).
fn auroc_oracle(scores: &[f64], labels: &[Label]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li == Label::Hateful && *lj == Label::NonHateful {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    (2usize..50)
        .prop_flat_map(|n| (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|b| *b) && l.iter().any(|b| !*b))
        .prop_map(|(s, l)| {
            (
                s.into_iter().map(|v| f64::from(v) / 11.0).collect(),
                l.into_iter().map(|b| if b { Label::Hateful } else { Label::NonHateful }).collect(),
            )
        })
}

/// First epoch whose distance from the running best reaches patience.
fn stop_oracle(curve: &[f64], patience: usize) -> (usize, usize) {
    let mut best_epoch = 1;
    for e in 1..=curve.len() {
        if curve[e - 1] > curve[best_epoch - 1] {
            best_epoch = e;
        }
        if e - best_epoch >= patience {
            return (best_epoch, e);
        }
    }
    (best_epoch, curve.len())
}

fn score(item: &str, annotator: &str, v: [u8; 5]) -> RubricScore {
    RubricScore::new(item, annotator, Ratings {
        clarity: v[0],
        accuracy: v[1],
        cultural_relevance: v[2],
        helpfulness: v[3],
        recognition: v[4],
    })
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_count((scores, labels) in labeled_scores()) {
        prop_assert!((auroc(&scores, &labels).unwrap() - auroc_oracle(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn auroc_ignores_monotone_transforms((scores, labels) in labeled_scores()) {
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&squashed, &labels).unwrap());
    }

    #[test]
    fn accuracy_and_error_rate_sum_to_one(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let to = |b: bool| if b { Label::Hateful } else { Label::NonHateful };
        let preds: Vec<Label> = pairs.iter().map(|p| to(p.0)).collect();
        let labels: Vec<Label> = pairs.iter().map(|p| to(p.1)).collect();
        let errors = pairs.iter().filter(|p| p.0 != p.1).count() as f64 / pairs.len() as f64;
        prop_assert!((accuracy(&preds, &labels).unwrap() + errors - 1.0).abs() < 1e-12);
    }

    #[test]
    fn early_stop_epoch_follows_patience_rule(curve in prop::collection::vec(0.0f64..1.0, 30), patience in 1usize..10) {
        let s = run_schedule::<()>(30, patience, |e| Ok(curve[e - 1]), |_| {}).unwrap();
        prop_assert_eq!((s.best_epoch, s.last_epoch), stop_oracle(&curve, patience));
    }

    #[test]
    fn prompts_are_injective_without_quotes(
        a in "[a-z ]{0,12}", b in "[a-z ]{0,12}", c in "[a-z ]{0,12}", d in "[a-z ]{0,12}"
    ) {
        let bundle = PromptBundle::default();
        let same = bundle.render_interpretation_prompt(&a, &b) == bundle.render_interpretation_prompt(&c, &d);
        prop_assert_eq!(same, a == c && b == d);
    }

    #[test]
    fn text_encoder_shape_and_finiteness(text in "[a-zA-Z ,.!']{1,200}", dim in 1usize..24, seed in any::<u64>()) {
        prop_assume!(text.chars().any(|c| c.is_alphabetic()));
        let enc = TextEncoder::new(TextEncoderConfig::tiny(dim, seed)).unwrap();
        let e = enc.encode("m", &text).unwrap();
        prop_assert_eq!(e.vector.len(), dim);
        prop_assert!(e.vector.iter().all(|v| v.is_finite()));
        prop_assert_eq!(&e, &enc.encode("m", &text).unwrap());
    }

    #[test]
    fn summary_is_order_invariant_and_bounded(
        raw in prop::collection::vec(prop::array::uniform5(1u8..=5), 3..30),
        rotation in 0usize..30,
    ) {
        let items: Vec<StudyItem> = (0..raw.len() / 3)
            .map(|i| StudyItem {
                item_id: format!("q{i}"),
                meme_id: format!("m{i}"),
                dataset: DatasetKind::Fhm,
                interpretation_text: String::new(),
                is_control: false,
                control_source_meme_id: None,
            })
            .collect();
        let mut scores: Vec<RubricScore> = raw
            .iter()
            .take(items.len() * 3)
            .enumerate()
            .map(|(i, v)| score(&format!("q{}", i / 3), &format!("a{}", i % 3), *v))
            .collect();
        let a = summarize(&scores, &items).unwrap();
        let k = rotation % scores.len();
        scores.rotate_left(k);
        scores.reverse();
        let b = summarize(&scores, &items).unwrap();
        prop_assert_eq!(&a, &b);
        for d in Dimension::ALL {
            let s = a.get(d);
            for v in [s.mean, s.median, s.mode] {
                prop_assert!((1.0..=5.0).contains(&v));
            }
        }
    }
}

#[test]
fn two_hundred_randomized_auroc_instances() {
    let mut runner = proptest::test_runner::TestRunner::new(proptest::test_runner::Config::with_cases(200));
    runner
        .run(&labeled_scores(), |(s, l)| {
            prop_assert!((auroc(&s, &l).unwrap() - auroc_oracle(&s, &l)).abs() < 1e-9);
            Ok(())
        })
        .unwrap();
}

#[test]
fn meme_encoder_sweep_over_random_images() {
    use image::{Rgb, RgbImage};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let enc = VisionLanguageEncoder::new(VisionLanguageEncoderConfig::tiny(8, 0)).unwrap();
    for case in 0..100 {
        let (w, h) = (rng.random_range(1..64u32), rng.random_range(1..64u32));
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
        let text = if case % 3 == 0 { String::new() } else { format!("overlay {case}") };
        let e = enc.encode(&format!("m{case}"), &png, &text).unwrap();
        assert_eq!(e.vector.len(), 8);
        assert!(e.vector.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn batched_encoding_matches_single() {
    let enc = TextEncoder::new(TextEncoderConfig::tiny(8, 4)).unwrap();
    let items: Vec<(String, String)> = (0..32).map(|i| (format!("m{i}"), format!("text number {i} about a meme"))).collect();
    for (batched, (id, text)) in encode_interpretations_batch(&enc, &items).into_iter().zip(&items) {
        let single = enc.encode(id, text).unwrap();
        for (a, b) in batched.unwrap().vector.iter().zip(&single.vector) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}
