mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use overthink::analysis::{
    generate_synthetic, parse_vocab, propagation_rate, scene_labels, scene_prior_filter, semantic_alignment_of,
    AlignedSample, ClassProfile, LogitNormal, SynthConfig,
};
use overthink::config::{parse_config, RunConfig};
use overthink::dataset::{build_examples, parse_feature_csv, write_feature_csv};
use overthink::detectors::{decode_detector, encode_detector, train_gb_with_history, DetectorKind, TrainConfig};
use overthink::evaluation::{average_precision, roc_auc};
use overthink::features::{extract_features, FeatureOptions};
use overthink::trace::{
    decode_embedding_table, decode_trace, encode_embedding_table, encode_trace, parse_labels, EmbeddingTable,
    Labels, Trace,
};

use common::*;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_invariant_under_monotone_maps((scores, labels) in scored_labels()) {
        let a = roc_auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 50.0).tanh() * 3.0 + 1.0).collect();
        prop_assert!((a - roc_auc(&mapped, &labels).unwrap()).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&negated, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn average_precision_bounds((scores, labels) in scored_labels()) {
        let ap = average_precision(&scores, &labels).unwrap();
        let (p, n) = (labels.iter().filter(|&&l| l).count() as f64, labels.len() as f64);
        prop_assert!(ap > 0.0 && ap <= 1.0);
        // Perfect ranking gives 1.
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(average_precision(&perfect, &labels).unwrap(), 1.0);
        // All positives ranked last is the worst case.
        prop_assert!(ap >= (p + 1.0) / (2.0 * n) - 1e-12);
    }

    #[test]
    fn gb_loss_never_rises(
        x in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 12..60),
        flips in prop::collection::vec(any::<bool>(), 60),
    ) {
        let mut y: Vec<bool> = x.iter().zip(&flips).map(|(r, &f)| (r[0] + r[1] * r[2] > 0.0) != f).collect();
        y[0] = true;
        y[1] = false;
        let cfg = TrainConfig { gb_estimators: 15, gb_max_depth: 4, ..TrainConfig::with_kind(DetectorKind::Gb) };
        let (_, history) = train_gb_with_history(x, y, &cfg).unwrap();
        prop_assert!(history.windows(2).all(|w| w[1] <= w[0]), "{history:?}");
    }

    #[test]
    fn alignment_ignores_earlier_layer_order(seed in any::<u64>(), tokens in prop::collection::vec(0u32..12, 2..10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let mut table = EmbeddingTable::new(5).unwrap();
        for w in &vocab {
            table.insert(w.clone(), unit_vector(&mut rng, 5)).unwrap();
        }
        let a = semantic_alignment_of("s", &tokens, &table, &vocab).unwrap();
        let (last, earlier) = tokens.split_last().unwrap();
        let mut shuffled: Vec<u32> = earlier.iter().rev().copied().collect();
        shuffled.push(*last);
        let b = semantic_alignment_of("s", &shuffled, &table, &vocab).unwrap();
        prop_assert_eq!(a.s_align, b.s_align);
        prop_assert!(a.s_align >= 0.0 && a.s_align <= 1.0 + 1e-12);
    }

    #[test]
    fn propagation_monotone_in_threshold(seed in any::<u64>(), t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let mut table = EmbeddingTable::new(4).unwrap();
        for w in &vocab {
            table.insert(w.clone(), unit_vector(&mut rng, 4)).unwrap();
        }
        let aligned: Vec<AlignedSample> = (0..30u32)
            .map(|i| {
                let tokens = [i % 10, (i * 3 + 1) % 10, (i * 7 + 2) % 10, (i / 3) % 10];
                AlignedSample {
                    label: i % 2 == 0,
                    unique_tokens: 0,
                    alignment: semantic_alignment_of("s", &tokens, &table, &vocab).unwrap(),
                }
            })
            .collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(propagation_rate(&aligned, hi).unwrap() <= propagation_rate(&aligned, lo).unwrap());
    }

    #[test]
    fn scene_filter_subset_and_idempotent(seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes = scene_labels();
        let dim = 6;
        let mut table = EmbeddingTable::new(dim).unwrap();
        for label in &scenes {
            table.insert(*label, unit_vector(&mut rng, dim)).unwrap();
        }
        let mut samples = Vec::new();
        let mut descriptions = HashMap::new();
        let head = random_head(&mut rng, true);
        for k in 0..15 {
            let mut s = random_sample(&mut rng, &head, &format!("s{k}"));
            s.final_token_string = format!("obj{k}");
            table.insert(format!("obj{k}"), unit_vector(&mut rng, dim)).unwrap();
            table.insert(format!("desc{k}"), unit_vector(&mut rng, dim)).unwrap();
            descriptions.insert(s.sample_id.clone(), format!("desc{k}"));
            samples.push(s);
        }
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let low = scene_prior_filter(&samples, &descriptions, &table, &table, lo).unwrap();
        let high = scene_prior_filter(&samples, &descriptions, &table, &table, hi).unwrap();
        prop_assert!(high.iter().all(|m| low.contains(m)));
        prop_assert!(low.iter().all(|m| m.similarity > lo));
        let kept: Vec<_> = samples.iter().filter(|s| low.iter().any(|m| m.sample_id == s.sample_id)).collect();
        let again = scene_prior_filter(kept, &descriptions, &table, &table, lo).unwrap();
        prop_assert_eq!(again, low);
    }

    #[test]
    fn trace_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (head, samples) = random_trace(&mut rng);
        let bytes = encode_trace(&head, &samples).unwrap();
        let back = decode_trace(&bytes).unwrap();
        prop_assert_eq!(&back.head, &head);
        prop_assert_eq!(&back.samples, &samples);
    }

    #[test]
    fn embedding_and_detector_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random_table(&mut rng);
        prop_assert_eq!(decode_embedding_table(&encode_embedding_table(&table).unwrap()).unwrap(), table);
        let d = random_detector(&mut rng);
        prop_assert_eq!(decode_detector(&encode_detector(&d).unwrap(), None).unwrap(), d);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_trace(&bytes);
        let _ = decode_embedding_table(&bytes);
        let _ = decode_detector(&bytes, None);
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_labels(&text);
        let _ = parse_vocab(&text);
        let _ = parse_config(&text);
        let _ = parse_feature_csv(bytes.as_slice());
    }

    #[test]
    fn accepted_mutations_reencode_canonically(seed in any::<u64>(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (head, samples) = random_trace(&mut rng);
        let encodings = [
            encode_trace(&head, &samples).unwrap(),
            encode_embedding_table(&random_table(&mut rng)).unwrap(),
            encode_detector(&random_detector(&mut rng)).unwrap(),
        ];
        for (kind, good) in encodings.iter().enumerate() {
            let mut bytes = good.clone();
            for (at, v) in &flips {
                let i = at.index(bytes.len());
                bytes[i] = *v;
            }
            let again = match kind {
                0 => decode_trace(&bytes).ok().map(|t| encode_trace(&t.head, &t.samples).unwrap()),
                1 => {
                    // Near-unit vectors are renormalized once, so the first re-encode is the fixed point.
                    if let Ok(t) = decode_embedding_table(&bytes) {
                        bytes = encode_embedding_table(&t).unwrap();
                    }
                    decode_embedding_table(&bytes).ok().map(|t| encode_embedding_table(&t).unwrap())
                }
                _ => decode_detector(&bytes, None).ok().map(|d| encode_detector(&d).unwrap()),
            };
            if let Some(again) = again {
                prop_assert_eq!(again, bytes);
            }
        }
    }

    #[test]
    fn labels_round_trip(entries in prop::collection::btree_map("[a-z0-9_./-]{1,12}", any::<bool>(), 0..20)) {
        let text: String = entries.iter().map(|(k, v)| format!("{k}\t{}\n", u8::from(*v))).collect();
        let labels = parse_labels(&text).unwrap();
        prop_assert_eq!(labels.len(), entries.len());
        for (k, v) in &entries {
            prop_assert_eq!(labels.get(k), Some(*v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_unique_latent_drives_sot(seed in any::<u64>(), shift in 1.0f64..3.0) {
        let base = LogitNormal::new(0.0, 1.0);
        let cfg = SynthConfig {
            n_samples: 200,
            noise: 0.0,
            real_profile: ClassProfile { unique: LogitNormal::new(-shift, 0.3), entropy: base, attention: base },
            hallu_profile: ClassProfile { unique: LogitNormal::new(shift, 0.3), entropy: base, attention: base },
            seed,
            ..SynthConfig::default()
        };
        let (head, samples, labels) = generate_synthetic(&cfg).unwrap();
        let mean = |want: bool| {
            let v: Vec<f64> = samples
                .iter()
                .filter(|s| labels.get(&s.sample_id) == Some(want))
                .map(|s| extract_features(s, Some(&head)).unwrap().s_ot)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        prop_assert!(mean(true) > mean(false));
    }

    #[test]
    fn feature_table_round_trip(seed in any::<u64>()) {
        let cfg = SynthConfig { n_samples: 20, num_layers: 3, seed, ..SynthConfig::default() };
        let (head, samples, labels) = generate_synthetic(&cfg).unwrap();
        let trace = Trace { head, samples };
        let (examples, _) = build_examples(&trace, &labels, FeatureOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_feature_csv(&examples, &mut buf).unwrap();
        let back = parse_feature_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), examples.len());
        for (a, b) in back.iter().zip(&examples) {
            prop_assert_eq!(&a.sample_id, &b.sample_id);
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.features.to_vec(), b.features.to_vec());
        }
    }

    #[test]
    fn config_round_trip(seed in any::<u64>(), frac in 0.01f64..0.99, topk in 1usize..50) {
        let config = RunConfig { seed, test_fraction: frac, topk, ..RunConfig::default() };
        prop_assert_eq!(parse_config(&config.to_toml()).unwrap(), config);
    }
}

#[test]
fn labels_reject_bad_rows() {
    assert!(parse_labels("a\t2\n").is_err());
    assert!(parse_labels("a\t1\na\t0\n").is_err());
    assert!(parse_labels("\t1\n").is_err());
    let empty: Labels = parse_labels("").unwrap();
    assert!(empty.is_empty());
}
