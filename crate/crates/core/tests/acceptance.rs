//! End-to-end acceptance checks. Runs as a plain binary so each criterion
//! prints one PASS/FAIL line in the test output; exits nonzero on any failure.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use camgen::autodiff::check::check_params;
use camgen::autodiff::{init, Graph, ParamStore, Tensor, Var};
use camgen::causal::{ate_report_for_corpus, NetConfig, response_with_treatment, response_without_treatment, AteConfig};
use camgen::classifier::{
    train_bag_classifier, train_feature_classifier, BagClassifier, BagConfig, FeatureClassifier,
    FeatureClassifierConfig,
};
use camgen::corpus::synth::{synthesize_control_corpus, synthesize_marker_corpus, SynthConfig, MARKERS};
use camgen::corpus::{split, synthesize_corpus, ControlClass, Document};
use camgen::cvae::{
    categorical_kl, elbo_causal, elbo_noncausal, gaussian_kl, pairs_from_document, train_cvae, Cvae, CvaeConfig,
    CvaePair, CvaeTrainConfig, CvaeVariant, ElboNoise, ElboWeights, TreatmentSpec,
};
use camgen::eval::{
    control_accuracy, feature_distribution_report, perplexity, rouge, EvalReport, RougeVariant, UniformScorer,
};
use camgen::features::{extract_features, extract_text_features, soft_expected_features, Feature, PosLexicon, TokenKind};
use camgen::transformer::{
    loss_causal, loss_lm, loss_metric, loss_topic, train_transformer, CausalMode, Decode, Example, Feedback,
    FeedbackMode, LossWeights, TrainConfig, Transformer, TransformerConfig,
};
use camgen::vocab::Vocab;
use rand::Rng;

const METRIC: &str = "participation";

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn class_names() -> Vec<String> {
    ControlClass::ALL.iter().map(|c| c.name().to_string()).collect()
}

fn bucket(doc: &Document) -> usize {
    doc.buckets[METRIC].index()
}

fn build_vocab(docs: &[Document], topics: usize, size: usize) -> Vocab {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    Vocab::build(&texts, topics, size).expect("vocabulary")
}

fn examples(docs: &[Document], vocab: &Vocab, max_len: usize) -> Vec<Example> {
    docs.iter().map(|d| Example::from_document(d, METRIC, vocab, PosLexicon::bundled(), max_len).unwrap()).collect()
}

fn bag_on(data: &[(String, usize)], classes: Vec<String>, epochs: usize, seed: u64) -> BagClassifier {
    let cfg = BagConfig { buckets: 1 << 14, dim: 16, orders: vec![1], epochs, holdout: 0.1, seed, ..Default::default() };
    train_bag_classifier(data, classes, &cfg).expect("bag classifier").0
}

fn metric_bag(docs: &[Document], epochs: usize, seed: u64) -> BagClassifier {
    let data: Vec<(String, usize)> = docs.iter().map(|d| (d.text.clone(), bucket(d))).collect();
    bag_on(&data, class_names(), epochs, seed)
}

fn feature_clf(docs: &[Document], features: Vec<Feature>, epochs: usize) -> FeatureClassifier {
    let lex = PosLexicon::bundled();
    let rows: Vec<_> = docs.iter().map(|d| extract_features(d, lex)).collect();
    let labels: Vec<usize> = docs.iter().map(bucket).collect();
    let cfg = FeatureClassifierConfig { features, hidden: vec![16], epochs, ..Default::default() };
    train_feature_classifier(&rows, &labels, class_names(), &cfg).expect("feature classifier").0
}

fn one_hot(ids: &[usize], width: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[ids.len(), width]);
    for (r, id) in ids.iter().enumerate() {
        t.data_mut()[r * width + id] = 1.0;
    }
    t
}

fn doubly_robust_identities() -> Outcome {
    let mut rng = init::rng(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (y, y0, y1): (f64, f64, f64) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let p: f64 = rng.gen_range(0.01..0.99);
        let r0 = response_without_treatment(y, true, y0, p).map_err(fail)?;
        let r1 = response_with_treatment(y, false, y1, p).map_err(fail)?;
        if r0 != y0 || r1 != y1 {
            return Err(format!("counterfactual arm not exact: ({r0}, {y0}) ({r1}, {y1})"));
        }
        worst = worst.max((response_without_treatment(y, false, y, p).map_err(fail)? - y).abs());
        worst = worst.max((response_with_treatment(y, true, y, p).map_err(fail)? - y).abs());
    }
    check(worst <= 1e-12, format!("10^4 tuples, counterfactual arms exact, perfect-model error {worst:.1e}"))
}

fn ate_recovery() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for tau in [0.0, 0.3, 2.0] {
        let synth = SynthConfig { samples: 5000, seed: 17, ..Default::default() }.with_effect(Feature::ParagraphCount, tau);
        let (docs, truth) = synthesize_corpus(&synth).map_err(fail)?;
        // The default nets (batch 5, 10 epochs) leave 0.02 to 0.05 of bias on null effects at this size.
        let net = NetConfig { epochs: 80, batch_size: 32, learning_rate: 3e-3, ..Default::default() };
        let mut cfg = AteConfig { outcome_scale: truth.outcome_scale, seed: 3, net, ..Default::default() };
        for (name, threshold) in &truth.thresholds {
            cfg.thresholds.insert(name.parse().map_err(fail)?, *threshold);
        }
        let features = [Feature::ParagraphCount, Feature::VerbCount];
        let report = ate_report_for_corpus(&docs, METRIC, &features, PosLexicon::bundled(), &cfg).map_err(fail)?;
        for f in features {
            let row = report.row(f).expect("row per feature");
            let planted = truth.effects[f.name()];
            let bound = 0.1 * planted.abs() + 0.02;
            let (err, naive_err) = ((row.ate - planted).abs(), (row.naive_difference - planted).abs());
            ok &= err <= bound && naive_err >= 3.0 * bound;
            lines.push(format!("{}@τ={planted}: dr {:.3} naive {:.3} bound {bound:.3}", f.name(), row.ate, row.naive_difference));
        }
    }
    check(ok, lines.join("; "))
}

fn gradient_suite() -> Outcome {
    let lex = PosLexicon::bundled();
    let docs = synthesize_marker_corpus(60, METRIC, 2);
    let vocab = build_vocab(&docs, 2, 200);
    let metric = metric_bag(&docs, 3, 1);
    // Marker documents carry no topic; alternating labels give the topic head two classes.
    let topic_data: Vec<(String, usize)> = docs.iter().enumerate().map(|(i, d)| (d.text.clone(), i % 2)).collect();
    let topic = bag_on(&topic_data, vec!["t0".into(), "t1".into()], 3, 2);
    let causal = feature_clf(&docs, vec![Feature::WordCount, Feature::VerbCount, Feature::NounCount], 3);
    let words = || vocab.entries().map(|(t, k)| (t, k == TokenKind::Word));
    let (metric_vocab, topic_vocab) = (metric.soft_vocabulary(words()), topic.soft_vocabulary(words()));
    let classes = vocab.feature_classes(lex);
    let ex = examples(&docs[..1], &vocab, 40).remove(0);
    let n = ex.ids.len();
    let cfg = TransformerConfig { layers: 1, heads: 2, model_dim: 8, max_len: 40, control_dim: 4, ff_mult: 2, seed: 3, ..Default::default() };
    let mut model = Transformer::new(cfg, vocab.clone()).map_err(fail)?;
    let mut rng = init::rng(9);
    for p in model.params_mut().iter_mut().filter(|p| p.name.contains("_map")) {
        let shape = p.value.shape().to_vec();
        p.value = init::normal(&mut rng, &shape, 0.3);
    }
    let frozen = model.clone();

    type LossFn<'a> = Box<dyn Fn(&mut Graph<f64>, Var, Var) -> camgen::Result<Var> + 'a>;
    let losses: Vec<(&str, LossFn)> = vec![
        ("L_G", Box::new(|g, text, _| loss_lm(g, text, &ex.ids[ex.text_start + 1..]))),
        ("L_metric", Box::new(|g, _, d| loss_metric(g, d, ex.class.index(), &metric, &metric_vocab))),
        ("L_T", Box::new(|g, _, d| loss_topic(g, d, 1, &topic, &topic_vocab))),
        ("L_causal(full)", Box::new(|g, _, d| Ok(loss_causal(g, &ex.real_features, d, ex.class.index(), &causal, &classes, CausalMode::Full)?.loss))),
        ("L_causal(literal)", Box::new(|g, _, d| Ok(loss_causal(g, &ex.real_features, d, ex.class.index(), &causal, &classes, CausalMode::Literal)?.loss))),
    ];
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (name, loss) in &losses {
        let report = check_params(model.params_mut(), 1e-5, 4, |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let logits = frozen.forward_with(&mut g, store, &ex.ids[..n - 1], ex.class)?;
            let rows: Vec<usize> = (ex.text_start..n - 1).collect();
            let text = g.gather(logits, &rows)?;
            let dists = g.softmax(text)?;
            let out = loss(&mut g, text, dists)?;
            Ok((g, out))
        })
        .map_err(fail)?;
        worst = worst.max(report.relative_error);
        lines.push(format!("{name} {:.1e}", report.relative_error));
    }

    let cvae_docs = synthesize_marker_corpus(3, METRIC, 2);
    let cvae_vocab = build_vocab(&cvae_docs, 1, 120);
    let cvae_cfg = CvaeConfig { embed_dim: 6, sentence_dim: 8, context_dim: 10, decoder_dim: 8, latent_dim: 4, class_dim: 3, hidden: 6, max_context: 2, max_sentence_len: 12, seed: 1 };
    let specs = vec![TreatmentSpec { feature: Feature::VerbCount, threshold: 2.0 }];
    let pair = pairs_from_document(&cvae_docs[0], METRIC, &cvae_vocab, lex, &specs, &cvae_cfg).map_err(fail)?.remove(1);
    let mut cvae = Cvae::new(cvae_cfg, cvae_vocab, specs).map_err(fail)?;
    let noise = ElboNoise::draw(&mut init::rng(5), cvae.config().latent_dim, pair.target.len(), 0.0);
    for variant in [CvaeVariant::NonCausal, CvaeVariant::Causal] {
        let frozen = cvae.clone();
        let report = check_params(cvae.params_mut(), 1e-5, 4, |store| {
            let mut g = Graph::new();
            let terms = match variant {
                CvaeVariant::NonCausal => elbo_noncausal(&mut g, &frozen, store, &pair, 0.7, &noise)?,
                CvaeVariant::Causal => elbo_causal(&mut g, &frozen, store, &pair, 0.7, &noise)?,
            };
            Ok((g, terms.total))
        })
        .map_err(fail)?;
        worst = worst.max(report.relative_error);
        lines.push(format!("ELBO({variant}) {:.1e}", report.relative_error));
    }
    check(worst <= 1e-4, format!("h=1e-5, worst {worst:.1e}: {}", lines.join(", ")))
}

fn control_injection() -> Outcome {
    let docs = synthesize_marker_corpus(800, METRIC, 11);
    let vocab = build_vocab(&docs, 2, 200);
    let data = examples(&docs, &vocab, 48);
    let cfg = TransformerConfig { layers: 2, heads: 2, model_dim: 32, max_len: 48, control_dim: 4, ff_mult: 2, seed: 12, ..Default::default() };
    let probe = &data[0].ids;
    let bits = |m: &Transformer, c| m.logits(probe, c).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let plain = Transformer::new(cfg.uncontrolled(), vocab.clone()).map_err(fail)?;
    let mut model = Transformer::new(cfg, vocab.clone()).map_err(fail)?;
    let identity = ControlClass::ALL.iter().all(|c| bits(&model, *c) == bits(&plain, ControlClass::Low));

    let train = TrainConfig { epochs: 1, batch_size: 8, learning_rate: 1e-2, weights: LossWeights::lm_only(), ..Default::default() };
    let steps = data.len().div_ceil(train.batch_size);
    train_transformer(&mut model, &data, &Feedback::none(), &train, PosLexicon::bundled()).map_err(fail)?;
    let sensitive = bits(&model, ControlClass::Low) != bits(&model, ControlClass::High);
    let high_marker = vocab.id(MARKERS[ControlClass::High.index()]).expect("marker in vocabulary");
    let frequency = |class: ControlClass| -> camgen::Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for seed in 0..100 {
            let prompt = vocab.format_prompt(class, 0, &[])?;
            let out = model.generate(&prompt, class, Decode::Sample { temperature: 1.0, seed }, 24)?;
            hits += out.iter().filter(|id| **id == high_marker).count();
            total += out.len().max(1);
        }
        Ok(hits as f64 / total as f64)
    };
    let gap = frequency(ControlClass::High).map_err(fail)? - frequency(ControlClass::Low).map_err(fail)?;
    check(
        identity && sensitive && gap > 0.0 && steps == 100,
        format!("identity bitwise {identity}; after {steps} steps logits differ {sensitive}, marker gap {gap:.3}"),
    )
}

/// Bucket judged from the total verb count, which decides the class in the control corpus.
fn verb_rule(text: &str) -> ControlClass {
    let verbs = extract_text_features(text, PosLexicon::bundled()).get(Feature::VerbCount);
    if verbs < 3.5 {
        ControlClass::Low
    } else if verbs < 8.5 {
        ControlClass::Medium
    } else {
        ControlClass::High
    }
}

fn control_ordering() -> Outcome {
    let lex = PosLexicon::bundled();
    let docs = synthesize_control_corpus(900, METRIC, 1);
    let (train, _, test) = split(&docs, [0.8, 0.0, 0.2], 2).map_err(fail)?;
    let vocab = build_vocab(&train, 2, 400);
    let metric = metric_bag(&train, 20, 3);
    let ate_cfg = AteConfig { outcome_scale: 10.0, ..Default::default() };
    let treatments = [Feature::WordCount, Feature::NounCount, Feature::VerbCount, Feature::AdjectiveCount];
    let report = ate_report_for_corpus(&train, METRIC, &treatments, lex, &ate_cfg).map_err(fail)?;
    let significant = report.significant_features();
    if significant.is_empty() {
        return Err("no significant causal feature".into());
    }
    let causal = feature_clf(&train, significant.clone(), 40);
    let data = examples(&train, &vocab, 48);
    let base = TransformerConfig { layers: 2, heads: 2, model_dim: 32, max_len: 48, control_dim: 8, ff_mult: 2, seed: 6, ..Default::default() };
    let no_topic = |causal_weight| LossWeights { lm: 1.0, metric: 1.0, topic: 0.0, causal: causal_weight };
    let variants = [
        (base.uncontrolled(), LossWeights::lm_only()),
        (base.clone(), no_topic(0.0)),
        (base.clone(), no_topic(1.0)),
    ];
    let feedback = Feedback::new(&vocab, Some(&metric), None, Some(&causal), lex);
    let replicates = 3u64;
    let mut sums = [0.0; 3];
    for rep in 0..replicates {
        for (slot, (cfg, weights)) in variants.iter().enumerate() {
            let cfg = TransformerConfig { seed: cfg.seed + 100 * rep, ..cfg.clone() };
            let mut model = Transformer::new(cfg, vocab.clone()).map_err(fail)?;
            let train_cfg = TrainConfig {
                epochs: 3,
                batch_size: 8,
                learning_rate: 3e-3,
                weights: *weights,
                causal_mode: CausalMode::Literal,
                feedback: FeedbackMode::SoftSampled,
                seed: rep,
                ..Default::default()
            };
            train_transformer(&mut model, &data, &feedback, &train_cfg, lex).map_err(fail)?;
            let mut gens = Vec::new();
            for (i, doc) in test.iter().enumerate() {
                let y = doc.buckets[METRIC];
                let prompt = vocab.format_prompt(y, doc.topic.unwrap_or(0), &doc.keywords).map_err(fail)?;
                for k in 0..2u64 {
                    let decode = Decode::Sample { temperature: 1.0, seed: 1000 * k + i as u64 };
                    let out = model.generate(&prompt, y, decode, 40).map_err(fail)?;
                    gens.push((vocab.decode_text(&out), y));
                }
            }
            sums[slot] += control_accuracy(&gens, &verb_rule).map_err(fail)?.accuracy;
        }
    }
    let [baseline, noncausal, causal_acc] = sums.map(|s| s / replicates as f64);
    let features: Vec<&str> = significant.iter().map(|f| f.name()).collect();
    check(
        causal_acc >= noncausal && noncausal >= baseline && causal_acc - baseline >= 0.10,
        format!(
            "causal {causal_acc:.3} ≥ non-causal {noncausal:.3} ≥ baseline {baseline:.3} (mean of {replicates}), causal features [{}]",
            features.join(", ")
        ),
    )
}

fn cvae_reduction() -> Outcome {
    let lex = PosLexicon::bundled();
    let docs = synthesize_marker_corpus(6, METRIC, 3);
    let vocab = build_vocab(&docs, 1, 120);
    let cfg = CvaeConfig { embed_dim: 6, sentence_dim: 8, context_dim: 10, decoder_dim: 8, latent_dim: 4, class_dim: 3, hidden: 6, max_context: 2, max_sentence_len: 12, seed: 1 };
    let specs = vec![
        TreatmentSpec { feature: Feature::VerbCount, threshold: 2.0 },
        TreatmentSpec { feature: Feature::NounCount, threshold: 3.0 },
    ];
    let pairs: Vec<CvaePair> =
        docs.iter().flat_map(|d| pairs_from_document(d, METRIC, &vocab, lex, &specs, &cfg).unwrap()).collect();
    let model = Cvae::new(cfg, vocab, specs).map_err(fail)?;
    let mut worst = 0.0f64;
    for (i, pair) in pairs.iter().enumerate() {
        let noise = ElboNoise::draw(&mut init::rng(i as u64), model.config().latent_dim, pair.target.len(), 0.25);
        let mut g = Graph::new();
        let plain = elbo_noncausal(&mut g, &model, model.params(), pair, 0.5, &noise).map_err(fail)?;
        let muted = ElboWeights { metric_kl: 0.0, treatment: 0.0, ..ElboWeights::for_variant(CvaeVariant::Causal, 0.5) };
        let causal = model.elbo(&mut g, model.params(), pair, &muted, &noise).map_err(fail)?;
        let (a, b) = (g.value(plain.total).item().map_err(fail)?, g.value(causal.total).item().map_err(fail)?);
        worst = worst.max((a - b).abs());
    }
    check(worst <= 1e-12, format!("{} pairs, max |causal − non-causal| {worst:.1e}", pairs.len()))
}

fn closed_forms() -> Outcome {
    let mut rng = init::rng(7);
    let dim = 3;
    let mut draw = |s: f64| (0..dim).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
    let (mq, lq, mp, lp) = (draw(1.0), draw(0.5), draw(1.0), draw(0.5));
    let exact = gaussian_kl(&mq, &lq, &mp, &lp).map_err(fail)?;
    let log_density = |x: &[f64], m: &[f64], lv: &[f64]| -> f64 {
        (0..dim).map(|i| -0.5 * (lv[i] + (x[i] - m[i]).powi(2) / lv[i].exp() + (2.0 * std::f64::consts::PI).ln())).sum()
    };
    let samples = 200_000;
    let eps = init::normal::<f64>(&mut init::rng(8), &[samples, dim], 1.0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for row in eps.data().chunks(dim) {
        let x: Vec<f64> = (0..dim).map(|i| mq[i] + (0.5 * lq[i]).exp() * row[i]).collect();
        let r = log_density(&x, &mq, &lq) - log_density(&x, &mp, &lp);
        sum += r;
        sum_sq += r * r;
    }
    let mean = sum / samples as f64;
    let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
    let gaussian_ok = (mean - exact).abs() <= 3.0 * se;

    let mut rng = init::rng(3);
    let mut simplex = || {
        let w: Vec<f64> = (0..3).map(|_| rng.gen::<f64>().powi(3)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let (q, p) = (simplex(), simplex());
        min_kl = min_kl.min(categorical_kl(&q, &p).map_err(fail)?);
    }
    let items: Vec<Vec<usize>> = (1..30).map(|n| vec![0; n]).collect();
    let ppl = perplexity(&UniformScorer { size: 512 }, &items).map_err(fail)?;
    let r = |v| rouge("the cat ran", &["the cat sat"], v).map(|s| s.f1).map_err(fail);
    let triple = (r(RougeVariant::Unigram)?, r(RougeVariant::Bigram)?, r(RougeVariant::LongestCommonSubsequence)?);
    check(
        gaussian_ok && min_kl >= 0.0 && (ppl - 512.0).abs() <= 1e-6 && triple == (2.0 / 3.0, 0.5, 2.0 / 3.0),
        format!(
            "Gaussian KL {exact:.4} vs MC {mean:.4} ± {se:.4}; min categorical KL {min_kl:.1e}; uniform perplexity {ppl}; ROUGE {triple:?}"
        ),
    )
}

fn soft_hard_consistency() -> Outcome {
    let lex = PosLexicon::bundled();
    let docs = synthesize_control_corpus(120, METRIC, 4);
    let vocab = build_vocab(&docs, 2, 400);
    let metric = metric_bag(&docs, 3, 1);
    let causal = feature_clf(&docs, vec![Feature::WordCount, Feature::VerbCount, Feature::AdjectiveCount], 5);
    let soft_vocab = metric.soft_vocabulary(vocab.entries().map(|(t, k)| (t, k == TokenKind::Word)));
    let classes = vocab.feature_classes(lex);
    let mut checked = 0;
    for doc in docs.iter().take(20) {
        let ids = vocab.encode_text(&doc.text);
        let text = vocab.decode_text(&ids);
        let y = bucket(doc);
        let mut g = Graph::new();
        let dists = g.constant(one_hot(&ids, vocab.len()));
        let soft = soft_expected_features(&mut g, dists, &classes).map_err(fail)?.to_vector(&g);
        let hard = extract_text_features(&text, lex);
        if let Some(f) = Feature::TEXTUAL.iter().find(|f| soft.get(**f) != hard.get(**f)) {
            return Err(format!("{f} soft {} vs hard {} on {}", soft.get(*f), hard.get(*f), doc.id));
        }
        let probs = metric.predict_soft(&mut g, dists, &soft_vocab).map_err(fail)?;
        if g.value(probs).data() != metric.predict_unigram(&text).as_slice() {
            return Err(format!("soft classifier prediction differs on {}", doc.id));
        }
        let term = loss_causal(&mut g, &extract_features(doc, lex), dists, y, &causal, &classes, CausalMode::Literal)
            .map_err(fail)?;
        if g.value(term.q).data() != causal.predict(&hard).map_err(fail)?.as_slice() {
            return Err(format!("causal q differs on {}", doc.id));
        }
        checked += 1;
    }
    Ok(format!("{checked} documents: feature counts, classifier probabilities and causal q bitwise equal"))
}

/// Library-level pipeline writing every artifact under `dir`.
fn pipeline(dir: &Path) -> camgen::Result<()> {
    let lex = PosLexicon::bundled();
    let docs = synthesize_control_corpus(120, METRIC, 9);
    let (train, _, test) = split(&docs, [0.8, 0.0, 0.2], 9)?;
    let report = ate_report_for_corpus(&train, METRIC, &[Feature::WordCount, Feature::VerbCount], lex, &AteConfig { outcome_scale: 10.0, seed: 9, ..Default::default() })?;
    report.write_json(&dir.join("ate.json"))?;
    report.write_csv(&dir.join("ate.csv"))?;
    let metric = metric_bag(&train, 3, 9);
    metric.save(&dir.join("metric.clf"))?;
    let causal = feature_clf(&train, report.rows.iter().map(|r| r.feature).collect(), 5);
    causal.save(&dir.join("causal.clf"))?;

    let vocab = build_vocab(&train, 2, 300);
    let cfg = TransformerConfig { layers: 1, heads: 2, model_dim: 16, max_len: 48, control_dim: 4, ff_mult: 2, seed: 9, ..Default::default() };
    let mut model = Transformer::new(cfg, vocab.clone())?;
    let feedback = Feedback::new(&vocab, Some(&metric), None, Some(&causal), lex);
    let weights = LossWeights { lm: 1.0, metric: 1.0, topic: 0.0, causal: 1.0 };
    let train_cfg = TrainConfig { epochs: 1, weights, seed: 9, ..Default::default() };
    train_transformer(&mut model, &examples(&train, &vocab, 48), &feedback, &train_cfg, lex)?;
    model.save(&dir.join("model.ckpt"))?;

    let cvae_cfg = CvaeConfig { embed_dim: 8, sentence_dim: 8, context_dim: 8, decoder_dim: 8, latent_dim: 4, class_dim: 3, hidden: 8, seed: 9, ..Default::default() };
    let specs = vec![TreatmentSpec { feature: Feature::VerbCount, threshold: report.row(Feature::VerbCount).unwrap().threshold }];
    let mut pairs = Vec::new();
    for d in &train {
        pairs.extend(pairs_from_document(d, METRIC, &vocab, lex, &specs, &cvae_cfg)?);
    }
    let mut cvae = Cvae::new(cvae_cfg, vocab.clone(), specs)?;
    train_cvae(&mut cvae, &pairs, &CvaeTrainConfig { epochs: 1, seed: 9, ..Default::default() })?;
    cvae.save(&dir.join("cvae.ckpt"))?;

    let mut gens = Vec::new();
    for (i, d) in test.iter().enumerate() {
        let y = d.buckets[METRIC];
        let prompt = vocab.format_prompt(y, d.topic.unwrap_or(0), &d.keywords)?;
        let out = model.generate(&prompt, y, Decode::Sample { temperature: 1.0, seed: i as u64 }, 30)?;
        gens.push((vocab.decode_text(&out), y));
    }
    let score = control_accuracy(&gens, &metric)?;
    let mean_rouge = |v| -> camgen::Result<f64> {
        let mut s = 0.0;
        for ((text, _), d) in gens.iter().zip(&test) {
            s += rouge(text, &[&d.text], v)?.f1;
        }
        Ok(s / gens.len() as f64)
    };
    let eval = EvalReport {
        model: "transformer".into(),
        judge: "metric bag classifier".into(),
        samples: gens.len(),
        control_accuracy: score.accuracy,
        perplexity: perplexity(&model, &examples(&test, &vocab, 48))?,
        rouge_1: mean_rouge(RougeVariant::Unigram)?,
        rouge_2: mean_rouge(RougeVariant::Bigram)?,
        rouge_l: mean_rouge(RougeVariant::LongestCommonSubsequence)?,
        bleurt: None,
        confusion: score.confusion,
        features: feature_distribution_report("transformer", &gens, &[Feature::VerbCount, Feature::WordCount], lex)?,
    };
    eval.emit(&camgen::eval::ReportPaths::under(&dir.join("eval")))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(fail)?, tempfile::tempdir().map_err(fail)?);
    pipeline(a.path()).map_err(fail)?;
    pipeline(b.path()).map_err(fail)?;
    let files = [
        "ate.json", "ate.csv", "metric.clf", "causal.clf", "model.ckpt", "cvae.ckpt", "eval/report.json",
        "eval/tables/summary.csv", "eval/tables/features.csv", "eval/figures/confusion.svg",
    ];
    for rel in files {
        let (x, y) = (fs::read(a.path().join(rel)).map_err(fail)?, fs::read(b.path().join(rel)).map_err(fail)?);
        if x != y {
            return Err(format!("{rel} differs between identical runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn main() {
    let secs = Duration::from_secs;
    // (name, check, wall-clock budget)
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("doubly-robust identities", doubly_robust_identities, secs(1)),
        ("ATE recovery on the planted corpus (n=5000)", ate_recovery, secs(300)),
        ("gradient suite", gradient_suite, secs(120)),
        ("control-injection identity and sensitivity", control_injection, secs(600)),
        ("end-to-end control ordering", control_ordering, secs(1800)),
        ("causal CVAE reduces to the non-causal bound", cvae_reduction, secs(60)),
        ("closed-form checks", closed_forms, secs(60)),
        ("soft/hard consistency", soft_hard_consistency, secs(60)),
        ("determinism", determinism, secs(600)),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > budget => Err(format!("{d}; exceeded the {}s budget", budget.as_secs())),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("acceptance {} {tag} {name} [{:.1}s]: {detail}", i + 1, elapsed.as_secs_f64());
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
