//! The acceptance suite. Each criterion prints one PASS/FAIL line; run with
//! `cargo test --test acceptance -- --nocapture` to see them. The end-to-end
//! criteria share one seed-0 synthetic training run.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use scgsp::corpus::{
    build_concept_vocabulary, generate_synthetic_corpus, label_corpus, tagged_captions,
    tokenize, ConceptVocabulary, Corpus, EmbeddingTable, PredictionSet, SyntheticSpec,
};
use scgsp::detector::{detect_concepts, top_concepts, train_detector, DetectorConfig, DetectorParams};
use scgsp::harness::{self, split_corpus, RunConfig, TrainState};
use scgsp::metrics::{self, CorpusStats};
use scgsp::model::{forward_set, CaptionModel, HeadType};
use scgsp::nn::seeded_rng;
use scgsp::setloss::{brute_force_min_cost, focal_loss_value, hungarian};
use scgsp::tape::Tape;

fn report(criterion: &str, ok: bool, detail: &str) {
    println!(
        "ACCEPTANCE {}: {} ({})",
        criterion,
        if ok { "PASS" } else { "FAIL" },
        detail
    );
    assert!(ok, "criterion {} failed: {}", criterion, detail);
}

// ---------------------------------------------------------------------------
// 1. Matching oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_matching_oracle() {
    let start = Instant::now();
    let mut rng = seeded_rng(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = rng.gen_range(1..=6);
        let m_prime = rng.gen_range(m..=8);
        let cost = Array2::from_shape_fn((m, m_prime), |_| rng.gen_range(-5.0..5.0));
        let (_, total) = hungarian(&cost);
        let exact = brute_force_min_cost(&cost);
        worst = worst.max((total - exact).abs());
    }
    let elapsed = start.elapsed();
    report(
        "1 matching oracle",
        worst < 1e-9 && elapsed.as_secs_f64() < 10.0,
        &format!("max deviation {:.2e}, {:.2}s", worst, elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------------------
// 2. Focal loss
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_focal_loss() {
    // single concept, target 1, p = 0.5, gamma = 2, alpha = 0.25:
    // 0.25 * 0.5^2 * -ln(0.5) = 0.25 * 0.25 * ln 2 = 0.04332...
    let hand = 0.25 * 0.25 * std::f64::consts::LN_2;
    let got = focal_loss_value(&[1.0], &[0.5], 2.0, 0.25).unwrap();
    let hand_ok = (got - hand).abs() < 1e-9 && (got - 0.04332).abs() < 5e-6;

    // gamma = 0, alpha = 0.5 reduces to 0.5 x BCE
    let mut rng = seeded_rng(102);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let target: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u32))).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let fl = focal_loss_value(&target, &probs, 0.0, 0.5).unwrap();
        let bce: f64 = target
            .iter()
            .zip(&probs)
            .map(|(&t, &p)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum();
        worst = worst.max((fl - 0.5 * bce).abs());
    }
    report(
        "2 focal loss",
        hand_ok && worst < 1e-9,
        &format!("hand value {:.6}, max BCE deviation {:.2e}", got, worst),
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient suite
// ---------------------------------------------------------------------------

// The full finite-difference suite lives in tests/gradcheck.rs; this
// criterion re-runs its two pillars: loss gradients on a fixed 2-video batch
// and the frozen-LM zero-gradient guarantee.
#[test]
fn criterion_3_gradient_suite() {
    let spec = SyntheticSpec {
        num_videos: 2,
        n_frames: 3,
        d_f: 6,
        concept_pool_size: 6,
        concepts_per_video: 2,
        captions_per_video: 3,
        noise_scale: 0.05,
    };
    let mut corpus = generate_synthetic_corpus(&spec, 11).unwrap();
    let emb = EmbeddingTable::random(11);
    let vocab = build_concept_vocabulary(&tagged_captions(&corpus), 6, &emb).unwrap();
    label_corpus(&mut corpus, &vocab).unwrap();
    let n_c = vocab.size();
    let detector = DetectorParams::init(DetectorConfig {
        d_f: 6,
        d_h: 8,
        n_c,
        ..DetectorConfig::default()
    });
    let mut cfg = RunConfig {
        d: 8,
        d_f: 6,
        n_c,
        m: 2,
        m_prime: 2,
        heads: 2,
        temporal_layers: 1,
        refine_layers: 1,
        ffn_mult: 2,
        cls_hidden: 6,
        prefix_len: 2,
        lm_layers: 1,
        lm_context: 24,
        t_max: 8,
        seed: 11,
        ..RunConfig::default()
    };
    let wv = scgsp::model::WordVocab::from_corpus(&corpus);
    let builder =
        scgsp::corpus::GtSetBuilder::new(&corpus, &vocab, cfg.m_prime, cfg.seed).unwrap();
    let gts: Vec<_> = corpus
        .videos
        .iter()
        .map(|v| builder.sample(v, 17).unwrap())
        .collect();
    let d_e = vocab.embeddings.ncols();

    let batch_loss = |model: &CaptionModel, cfg: &RunConfig| -> f64 {
        corpus
            .videos
            .iter()
            .zip(&gts)
            .map(|(video, gt)| {
                let mut tape = Tape::new();
                let (loss, ..) = harness::video_loss(
                    model, &mut tape, &video.features, gt, &wv, &detector, &vocab, cfg, 23,
                )
                .unwrap();
                tape.scalar_value(loss)
            })
            .sum()
    };
    let batch_grads = |model: &CaptionModel, cfg: &RunConfig| {
        let mut total: std::collections::HashMap<usize, Array2<f64>> = Default::default();
        for (video, gt) in corpus.videos.iter().zip(&gts) {
            let mut tape = Tape::new();
            let (loss, ..) = harness::video_loss(
                model, &mut tape, &video.features, gt, &wv, &detector, &vocab, cfg, 23,
            )
            .unwrap();
            let grads = tape.backward(loss);
            for (id, g) in tape.param_grads(&grads) {
                total.entry(id).and_modify(|acc| *acc += &g).or_insert(g);
            }
        }
        total
    };

    // recurrent head, full loss: spot-check every parameter
    let mut model = CaptionModel::init(cfg.model_config(d_e, wv.len())).unwrap();
    let analytic = batch_grads(&model, &cfg);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<usize> = model.store.ids().collect();
    for id in ids {
        let len = model.store.value(id).len();
        for k in [0, len / 2] {
            let orig = model.store.value(id).as_slice().unwrap()[k];
            model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let up = batch_loss(&model, &cfg);
            model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let down = batch_loss(&model, &cfg);
            model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic
                .get(&id)
                .map(|g| g.as_slice().unwrap()[k])
                .unwrap_or(0.0);
            // near-zero entries are dominated by finite-difference roundoff;
            // hold them to an absolute bound instead
            let scale = g.abs().max(fd.abs());
            if scale > 1e-5 {
                worst = worst.max((g - fd).abs() / scale);
            } else {
                assert!((g - fd).abs() < 1e-8, "tiny-gradient deviation");
            }
        }
    }

    // frozen-LM prefix mode: LM parameters receive exactly-zero gradients
    cfg.head_type = HeadType::Prefix;
    let prefix_model = CaptionModel::init(cfg.model_config(d_e, wv.len())).unwrap();
    let grads = batch_grads(&prefix_model, &cfg);
    let mut frozen_zero = true;
    let mut saw_lm = false;
    for id in prefix_model.store.ids() {
        if prefix_model.store.name(id).starts_with("lm.") {
            saw_lm = true;
            if let Some(g) = grads.get(&id) {
                frozen_zero &= g.iter().all(|&x| x == 0.0);
            }
        }
    }
    report(
        "3 gradient suite",
        worst < 1e-3 && saw_lm && frozen_zero,
        &format!("max relative error {:.2e}, frozen LM grads zero: {}", worst, frozen_zero),
    );
}

// ---------------------------------------------------------------------------
// 4. Metric oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_metric_oracles() {
    let caption = tokenize("a dog runs fast");
    let dup = vec![caption.clone(), caption.clone()];
    let div1 = metrics::div_n(&dup, 1);
    let div_ok = (div1 - 0.5).abs() < 1e-12;

    let mut all_ok = div_ok;
    let mut details = format!("Div-1 dup {:.3}", div1);
    for m in [2usize, 5, 20] {
        let identical: Vec<Vec<String>> = vec![caption.clone(); m];
        let disjoint: Vec<Vec<String>> = (0..m)
            .map(|i| (0..4).map(|j| format!("w{}x{}", i, j)).collect())
            .collect();
        let stats_docs: Vec<Vec<Vec<String>>> =
            vec![identical.clone(), disjoint.clone()];
        let stats = CorpusStats::from_reference_sets(&stats_docs);

        let mb_same = metrics::m_bleu(&identical).unwrap();
        let mb_disj = metrics::m_bleu(&disjoint).unwrap();
        let (sc_same, _) = metrics::self_cider(&identical, &stats).unwrap();
        let (sc_disj, _) = metrics::self_cider(&disjoint, &stats).unwrap();
        let ok = (mb_same - 1.0).abs() < 1e-12
            && mb_disj <= 1e-6
            && sc_same.abs() < 1e-12
            && (sc_disj - 1.0).abs() < 1e-6;
        all_ok &= ok;
        details.push_str(&format!(
            "; M={}: mBLEU {:.1}/{:.1e} selfCIDEr {:.1}/{:.4}",
            m, mb_same, mb_disj, sc_same, sc_disj
        ));
    }

    // mixed fixtures against the independent reference script
    let fixture_dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let fixture: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fixture_dir.join("metric_fixture.json")).unwrap(),
    )
    .unwrap();
    let golden: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fixture_dir.join("metric_golden.json")).unwrap(),
    )
    .unwrap();
    let docs: Vec<Vec<Vec<String>>> = fixture["stats_docs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|doc| {
            doc.as_array()
                .unwrap()
                .iter()
                .map(|c| tokenize(c.as_str().unwrap()))
                .collect()
        })
        .collect();
    let stats = CorpusStats::from_reference_sets(&docs);
    let mut golden_worst = 0.0f64;
    for (case, expect) in fixture["relevance_cases"]
        .as_array()
        .unwrap()
        .iter()
        .zip(golden["relevance"].as_array().unwrap())
    {
        let cand = tokenize(case["candidate"].as_str().unwrap());
        let refs: Vec<Vec<String>> = case["references"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| tokenize(r.as_str().unwrap()))
            .collect();
        let got = metrics::relevance_scores(&cand, &refs, &stats).unwrap();
        golden_worst = golden_worst
            .max((got.bleu4 - expect["bleu4"].as_f64().unwrap()).abs())
            .max((got.rouge_l - expect["rouge_l"].as_f64().unwrap()).abs())
            .max((got.cider - expect["cider"].as_f64().unwrap()).abs());
    }
    all_ok &= golden_worst < 1e-6;
    details.push_str(&format!("; script deviation {:.2e}", golden_worst));
    report("4 metric oracles", all_ok, &details);
}

// ---------------------------------------------------------------------------
// 5. Set-capacity invariant
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_set_capacity() {
    let spec = SyntheticSpec {
        num_videos: 6,
        n_frames: 4,
        d_f: 8,
        concept_pool_size: 8,
        concepts_per_video: 3,
        captions_per_video: 4,
        noise_scale: 0.05,
    };
    let mut corpus = generate_synthetic_corpus(&spec, 5).unwrap();
    let emb = EmbeddingTable::random(5);
    let vocab = build_concept_vocabulary(&tagged_captions(&corpus), 8, &emb).unwrap();
    label_corpus(&mut corpus, &vocab).unwrap();
    let n_c = vocab.size();
    let detector = DetectorParams::init(DetectorConfig {
        d_f: 8,
        d_h: 8,
        n_c,
        ..DetectorConfig::default()
    });
    let cfg = RunConfig {
        epochs: 1,
        lr: 1e-3,
        batch: 4,
        d: 16,
        d_f: 8,
        n_c,
        m: 3,
        m_prime: 4,
        heads: 2,
        temporal_layers: 1,
        refine_layers: 1,
        ffn_mult: 2,
        cls_hidden: 8,
        beam: 1,
        t_max: 6,
        val_fraction: 0.0,
        ..RunConfig::default()
    };
    let d_e = vocab.embeddings.ncols();
    let wv = scgsp::model::WordVocab::from_corpus(&corpus);
    let model = CaptionModel::init(cfg.model_config(d_e, wv.len())).unwrap();

    // randomized frame counts N in 1..=16 all produce exactly M encodings
    let mut rng = seeded_rng(55);
    let mut shapes_ok = true;
    let mut varied = corpus.clone();
    for (i, video) in varied.videos.iter_mut().enumerate() {
        let n = rng.gen_range(1..=16);
        video.features = Array2::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let fs = forward_set(&model, &mut tape, &video.features, &detector, &vocab, 0.0, i as u64)
            .unwrap();
        shapes_ok &= tape.value(fs.encodings).nrows() == cfg.m;
    }

    // and infer emits exactly M captions per video
    let out = harness::train(&cfg, &corpus, &vocab, &detector, None, None).unwrap();
    let preds = harness::infer(&out.last, &varied, &detector, &vocab, 1).unwrap();
    let infer_ok = preds.iter().all(|p| p.captions.len() == cfg.m);
    report(
        "5 set capacity",
        shapes_ok && infer_ok,
        &format!("M = {} over N in 1..=16", cfg.m),
    );
}

// ---------------------------------------------------------------------------
// 6 + 7. End-to-end synthetic run (shared)
// ---------------------------------------------------------------------------

struct EndToEnd {
    corpus: Corpus,
    val: Corpus,
    vocab: ConceptVocabulary,
    detector: DetectorParams,
    base: TrainState,
    base_report: metrics::MetricReport,
    base_preds: Vec<PredictionSet>,
    train_seconds: f64,
    detector_recall: f64,
}

fn e2e_config(n_c: usize) -> RunConfig {
    RunConfig {
        seed: 0,
        epochs: 40,
        lr: 1e-3,
        batch: 32,
        d: 128,
        d_f: 64,
        n_c,
        m: 6,
        m_prime: 6,
        heads: 4,
        temporal_layers: 1,
        refine_layers: 1,
        ffn_mult: 2,
        cls_hidden: 64,
        beam: 3,
        t_max: 12,
        val_fraction: 0.1,
        val_every: 10,
        ..RunConfig::default()
    }
}

fn evaluate_on(
    preds: &[PredictionSet],
    refs: &Corpus,
) -> metrics::MetricReport {
    metrics::evaluate(preds, refs, BTreeMap::new()).unwrap()
}

fn end_to_end() -> &'static EndToEnd {
    static CELL: OnceLock<EndToEnd> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SyntheticSpec {
            num_videos: 500,
            n_frames: 8,
            d_f: 64,
            concept_pool_size: 30,
            concepts_per_video: 4,
            captions_per_video: 6,
            noise_scale: 0.1,
        };
        let mut corpus = generate_synthetic_corpus(&spec, 0).unwrap();
        let emb = EmbeddingTable::random(0);
        let vocab = build_concept_vocabulary(&tagged_captions(&corpus), 30, &emb).unwrap();
        label_corpus(&mut corpus, &vocab).unwrap();
        let cfg = e2e_config(vocab.size());
        let (train_c, val_c) = split_corpus(&corpus, cfg.val_fraction);

        // the concept detector is trained offline on the training split only
        let detector = train_detector(
            &train_c,
            DetectorConfig {
                d_f: 64,
                d_h: 128,
                n_c: vocab.size(),
                epochs: 30,
                batch: 32,
                ..DetectorConfig::default()
            },
        )
        .unwrap();

        // top-M recall of planted concepts on held-out videos
        let mut recall = 0.0;
        for video in &val_c.videos {
            let scores = detect_concepts(&video.features, &detector).unwrap();
            let top: std::collections::HashSet<usize> =
                top_concepts(&scores, cfg.m).unwrap().into_iter().collect();
            let planted: Vec<usize> = video
                .planted_concepts
                .as_ref()
                .unwrap()
                .iter()
                .filter_map(|w| vocab.index_of(w))
                .collect();
            let hit = planted.iter().filter(|i| top.contains(i)).count();
            recall += hit as f64 / planted.len() as f64;
        }
        recall /= val_c.videos.len() as f64;

        let start = Instant::now();
        let out = harness::train(&cfg, &corpus, &vocab, &detector, None, None).unwrap();
        let train_seconds = start.elapsed().as_secs_f64();
        let preds = harness::infer(&out.best, &val_c, &detector, &vocab, cfg.beam).unwrap();
        let base_report = evaluate_on(&preds, &val_c);
        EndToEnd {
            corpus,
            val: val_c,
            vocab,
            detector,
            base: out.best,
            base_report,
            base_preds: preds,
            train_seconds,
            detector_recall: recall,
        }
    })
}

#[test]
fn criterion_6_end_to_end() {
    let e2e = end_to_end();

    // (a) detector recall
    let a_ok = e2e.detector_recall >= 0.9;

    // runtime budget: the base training run itself
    let time_ok = e2e.train_seconds < 900.0;

    // (b) oracle CIDEr vs shuffled-caption baseline
    let real = e2e.base_report.mean.oracle_cider;
    let n = e2e.base_preds.len();
    let shuffled: Vec<PredictionSet> = (0..n)
        .map(|i| PredictionSet {
            video_id: e2e.base_preds[(i + 1) % n].video_id.clone(),
            captions: e2e.base_preds[i].captions.clone(),
        })
        .collect();
    let shuf = evaluate_on(&shuffled, &e2e.val).mean.oracle_cider;
    let b_ok = real >= 3.0 * shuf;

    // (c) lambda_d = 0.5 (base) vs 0: strictly higher Div-1 and self-CIDEr
    let mut cfg_ld0 = e2e.base.run.clone();
    cfg_ld0.lambda_d = 0.0;
    let out_ld0 = harness::train(&cfg_ld0, &e2e.corpus, &e2e.vocab, &e2e.detector, None, None)
        .unwrap();
    let preds_ld0 =
        harness::infer(&out_ld0.best, &e2e.val, &e2e.detector, &e2e.vocab, cfg_ld0.beam).unwrap();
    let rep_ld0 = evaluate_on(&preds_ld0, &e2e.val);
    let c_ok = e2e.base_report.mean.div1 > rep_ld0.mean.div1
        && e2e.base_report.mean.self_cider > rep_ld0.mean.self_cider;

    // (d) removing the classification head degrades oracle CIDEr and self-CIDEr
    let mut cfg_nocls = e2e.base.run.clone();
    cfg_nocls.use_cls_head = false;
    let out_nocls =
        harness::train(&cfg_nocls, &e2e.corpus, &e2e.vocab, &e2e.detector, None, None).unwrap();
    let preds_nocls =
        harness::infer(&out_nocls.best, &e2e.val, &e2e.detector, &e2e.vocab, cfg_nocls.beam)
            .unwrap();
    let rep_nocls = evaluate_on(&preds_nocls, &e2e.val);
    let d_ok = e2e.base_report.mean.oracle_cider > rep_nocls.mean.oracle_cider
        && e2e.base_report.mean.self_cider > rep_nocls.mean.self_cider;

    report(
        "6 end-to-end",
        a_ok && time_ok && b_ok && c_ok && d_ok,
        &format!(
            "recall {:.3}; train {:.0}s; CIDEr {:.3} vs shuffled {:.3}; \
             Div-1 {:.4}>{:.4} selfCIDEr {:.4}>{:.4} (lambda_d); \
             CIDEr {:.3}>{:.3} selfCIDEr {:.4}>{:.4} (cls head)",
            e2e.detector_recall,
            e2e.train_seconds,
            real,
            shuf,
            e2e.base_report.mean.div1,
            rep_ld0.mean.div1,
            e2e.base_report.mean.self_cider,
            rep_ld0.mean.self_cider,
            real,
            rep_nocls.mean.oracle_cider,
            e2e.base_report.mean.self_cider,
            rep_nocls.mean.self_cider
        ),
    );
}

#[test]
fn criterion_7_random_query_ablation() {
    let e2e = end_to_end();
    let mut ciders = Vec::new();
    for fraction in [0.0, 0.5, 1.0] {
        let mut state = e2e.base.clone();
        state.run.random_query_fraction = fraction;
        let preds =
            harness::infer(&state, &e2e.val, &e2e.detector, &e2e.vocab, state.run.beam).unwrap();
        ciders.push(evaluate_on(&preds, &e2e.val).mean.oracle_cider);
    }
    let monotone = ciders.windows(2).all(|w| w[0] >= w[1]);
    report(
        "7 random-query ablation",
        monotone,
        &format!("oracle CIDEr {:.4} / {:.4} / {:.4}", ciders[0], ciders[1], ciders[2]),
    );
}

// ---------------------------------------------------------------------------
// 8. Determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism() {
    let spec = SyntheticSpec {
        num_videos: 20,
        n_frames: 4,
        d_f: 8,
        concept_pool_size: 8,
        concepts_per_video: 3,
        captions_per_video: 4,
        noise_scale: 0.05,
    };
    let run_once = || -> Vec<u8> {
        let mut corpus = generate_synthetic_corpus(&spec, 3).unwrap();
        let emb = EmbeddingTable::random(3);
        let vocab = build_concept_vocabulary(&tagged_captions(&corpus), 8, &emb).unwrap();
        label_corpus(&mut corpus, &vocab).unwrap();
        let detector = train_detector(
            &corpus,
            DetectorConfig {
                d_f: 8,
                d_h: 16,
                n_c: vocab.size(),
                epochs: 3,
                batch: 4,
                ..DetectorConfig::default()
            },
        )
        .unwrap();
        let cfg = RunConfig {
            epochs: 3,
            lr: 1e-3,
            batch: 4,
            d: 16,
            d_f: 8,
            n_c: vocab.size(),
            m: 2,
            m_prime: 3,
            heads: 2,
            temporal_layers: 1,
            refine_layers: 1,
            ffn_mult: 2,
            cls_hidden: 8,
            beam: 2,
            t_max: 8,
            val_fraction: 0.2,
            val_every: 1,
            ..RunConfig::default()
        };
        let out = harness::train(&cfg, &corpus, &vocab, &detector, None, None).unwrap();
        let preds = harness::infer(&out.best, &corpus, &detector, &vocab, cfg.beam).unwrap();
        let report = metrics::evaluate(&preds, &corpus, cfg.to_map()).unwrap();
        serde_json::to_vec(&report).unwrap()
    };
    let a = run_once();
    let b = run_once();
    report(
        "8 determinism",
        a == b,
        &format!("report bytes {} == {}", a.len(), b.len()),
    );
}
