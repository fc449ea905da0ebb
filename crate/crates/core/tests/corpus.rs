use camgen::corpus::synth::synthesize_marker_corpus;
use camgen::corpus::{
    bucketize, filter_corpus, lda_topics, load_jsonl, save_jsonl, synthesize_corpus, ControlClass, Document,
    FilterConfig, LdaConfig, SynthConfig,
};
use camgen::features::{tokenize, Feature};
use proptest::prelude::*;

#[test]
fn lda_separates_disjoint_vocabularies() {
    let group_a = ["apple", "pear", "plum", "fig", "kiwi", "lime"];
    let group_b = ["oak", "pine", "elm", "ash", "birch", "cedar"];
    let docs: Vec<Vec<String>> = (0..20)
        .map(|i| {
            let pool = if i % 2 == 0 { &group_a } else { &group_b };
            (0..80).map(|j| pool[(i * 7 + j * 5) % pool.len()].to_string()).collect()
        })
        .collect();
    let cfg = LdaConfig { topics: 2, sweeps: 200, ..Default::default() };
    let topics = lda_topics(&docs, &cfg).unwrap();
    let even: Vec<_> = topics.iter().step_by(2).collect();
    let odd: Vec<_> = topics.iter().skip(1).step_by(2).collect();
    assert!(even.iter().all(|t| *t == even[0]), "{topics:?}");
    assert!(odd.iter().all(|t| *t == odd[0]), "{topics:?}");
    assert_ne!(even[0], odd[0]);
    assert_eq!(lda_topics(&docs, &cfg).unwrap(), topics);
}

#[test]
fn synthetic_corpus_round_trips_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { samples: 200, bucket_thresholds: Some((600, 900)), ..Default::default() };
    let (docs, truth) = synthesize_corpus(&cfg).unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    save_jsonl(&a, &docs).unwrap();
    assert_eq!(load_jsonl(&a).unwrap(), docs);
    let (again, truth_again) = synthesize_corpus(&cfg).unwrap();
    save_jsonl(&b, &again).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(truth, truth_again);

    let sidecar = dir.path().join("truth.json");
    truth.save(&sidecar).unwrap();
    assert_eq!(camgen::corpus::GroundTruth::load(&sidecar).unwrap(), truth);
}

#[test]
fn planted_effect_is_recorded() {
    let cfg = SynthConfig { samples: 5, ..Default::default() }.with_effect(Feature::ParagraphCount, 2.0);
    let (_, truth) = synthesize_corpus(&cfg).unwrap();
    assert_eq!(truth.effects["paragraph_count"], 2.0);
    assert_eq!(truth.thresholds["paragraph_count"], 2.0);
}

#[test]
fn null_verb_knob_shows_only_confounder_gap() {
    let cfg = SynthConfig { samples: 4000, ..Default::default() }.with_effect(Feature::ParagraphCount, 0.0);
    let (docs, truth) = synthesize_corpus(&cfg).unwrap();
    let mean = |level: u64| {
        let ys: Vec<f64> = docs
            .iter()
            .filter(|d| d.metadata["verb_count_level"].as_u64() == Some(level))
            .map(|d| d.metrics["participation"] as f64 / cfg.outcome_scale)
            .collect();
        ys.iter().sum::<f64>() / ys.len() as f64
    };
    let gap = mean(1) - mean(0);
    let expected = truth.naive_bias["verb_count"];
    assert!((gap - expected).abs() < 0.15, "naive gap {gap} vs confounder-only {expected}");
}

#[test]
fn marker_corpus_is_balanced() {
    let docs = synthesize_marker_corpus(90, "participation", 3);
    for class in ControlClass::ALL {
        assert_eq!(docs.iter().filter(|d| d.buckets["participation"] == class).count(), 30);
    }
}

fn doc(id: usize, words: usize, participation: u64) -> Document {
    let mut d = Document { id: id.to_string(), text: vec!["w"; words].join(" "), ..Default::default() };
    d.metrics.insert("participation".into(), participation);
    d
}

proptest! {
    #[test]
    fn bucketize_partitions_the_line(value in 0u64..1000, lo in 0u64..500, gap in 1u64..500) {
        let class = bucketize(value, lo, lo + gap).unwrap();
        let hits = [value <= lo, value > lo && value <= lo + gap, value > lo + gap];
        prop_assert_eq!(hits.iter().filter(|h| **h).count(), 1);
        prop_assert!(hits[class.index()]);
    }

    #[test]
    fn filter_keeps_an_ordered_subset(spec in prop::collection::vec((0usize..80, 0u64..4), 0..30)) {
        let docs: Vec<Document> = spec.iter().enumerate().map(|(i, (w, p))| doc(i, *w, *p)).collect();
        let kept = filter_corpus(docs.clone(), &FilterConfig::default());
        let ids: Vec<usize> = kept.iter().map(|d| d.id.parse().unwrap()).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        for d in &kept {
            let n = tokenize(&d.text).len();
            prop_assert!(n > 30 && n < 5000 && d.metrics["participation"] > 1);
        }
    }
}
