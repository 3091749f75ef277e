//! Offline-trained concept detector: an MLP over mean-pooled frame features
//! predicting per-video concept probabilities, plus construction of the M
//! conceptual queries from the top-scoring concepts.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptVocabulary, Corpus};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, AdamW, Mlp, ParamStore};
use crate::setloss::focal_loss;
use crate::tape::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub d_f: usize,
    pub d_h: usize,
    pub n_c: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            d_f: 64,
            d_h: 256,
            n_c: 1000,
            epochs: 30,
            lr: 1e-3,
            batch: 32,
            seed: 0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

pub struct DetectorParams {
    pub store: ParamStore,
    pub mlp: Mlp,
    pub config: DetectorConfig,
    pub final_loss: f64,
}

/// Per-video (or per-element) concept probabilities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConceptScores {
    pub probs: Vec<f64>,
}

/// The M conceptual queries with their source vocabulary indices. A `None`
/// id marks a query replaced by a random vector.
#[derive(Clone, Debug)]
pub struct ConceptQuerySet {
    /// M x d query matrix.
    pub queries: Array2<f64>,
    pub concept_ids: Vec<Option<usize>>,
}

impl DetectorParams {
    pub fn init(config: DetectorConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let mlp = Mlp::new(
            &mut store,
            &mut rng,
            "detector",
            config.d_f,
            config.d_h,
            config.n_c,
        );
        DetectorParams {
            store,
            mlp,
            config,
            final_loss: f64::NAN,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        #[derive(Serialize)]
        struct File<'a> {
            config: &'a DetectorConfig,
            final_loss: f64,
            params: Vec<(String, Vec<usize>, Vec<f64>)>,
        }
        let f = File {
            config: &self.config,
            final_loss: self.final_loss,
            params: self.store.to_named(),
        };
        std::fs::write(path, serde_json::to_string(&f)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            config: DetectorConfig,
            final_loss: f64,
            params: Vec<(String, Vec<usize>, Vec<f64>)>,
        }
        let text = std::fs::read_to_string(path)?;
        let f: File = serde_json::from_str(&text)?;
        let mut out = DetectorParams::init(f.config);
        out.store.load_named(&f.params)?;
        out.final_loss = f.final_loss;
        Ok(out)
    }
}

fn mean_pool(features: &Array2<f64>) -> Array2<f64> {
    let n = features.nrows() as f64;
    let mut out = Array2::zeros((1, features.ncols()));
    for row in features.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(row) {
            *o += x / n;
        }
    }
    out
}

/// sigmoid(mlp(mean over frames)). Order-invariant in the frame axis.
pub fn detect_concepts(features: &Array2<f64>, params: &DetectorParams) -> Result<ConceptScores> {
    if features.ncols() != params.config.d_f {
        return Err(Error::Shape(format!(
            "feature dim {} vs detector d_f {}",
            features.ncols(),
            params.config.d_f
        )));
    }
    let pooled = mean_pool(features);
    let mut tape = Tape::new();
    let x = tape.leaf(pooled);
    let logits = params.mlp.forward(&mut tape, &params.store, x);
    let probs = tape.sigmoid(logits);
    Ok(ConceptScores {
        probs: tape.value(probs).row(0).to_vec(),
    })
}

/// Offline focal-loss training of the detector against video concept labels.
pub fn train_detector(corpus: &Corpus, config: DetectorConfig) -> Result<DetectorParams> {
    if corpus.videos.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    for v in &corpus.videos {
        if v.video_concept_label.len() != config.n_c {
            return Err(Error::Data(format!(
                "video {} label length {} vs n_c {}",
                v.video_id,
                v.video_concept_label.len(),
                config.n_c
            )));
        }
    }
    let mut params = DetectorParams::init(config.clone());
    let mut opt = AdamW::new(&params.store, config.lr, 0.01);
    let pooled: Vec<Array2<f64>> = corpus.videos.iter().map(|v| mean_pool(&v.features)).collect();
    let mut order: Vec<usize> = (0..corpus.videos.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let mut rng = seeded_rng(config.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(epoch as u64 + 1)));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch.max(1)) {
            let b = chunk.len();
            let mut x = Array2::zeros((b, config.d_f));
            let mut y = Array2::zeros((b, config.n_c));
            for (r, &vi) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&pooled[vi].row(0));
                for (c, &l) in corpus.videos[vi].video_concept_label.iter().enumerate() {
                    y[[r, c]] = l;
                }
            }
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let yv = tape.leaf(y);
            let logits = params.mlp.forward(&mut tape, &params.store, xv);
            let probs = tape.sigmoid(logits);
            let loss = focal_loss(&mut tape, yv, probs, config.focal_gamma, config.focal_alpha);
            let loss = tape.scale(loss, 1.0 / b as f64);
            epoch_loss += tape.scalar_value(loss) * b as f64;
            let grads = tape.backward(loss);
            let pg = tape.param_grads(&grads);
            opt.apply(&mut params.store, &pg);
        }
        final_loss = epoch_loss / corpus.videos.len() as f64;
        log::debug!("detector epoch {} loss {:.6}", epoch, final_loss);
    }
    params.final_loss = final_loss;
    Ok(params)
}

/// Indices of the `m` concepts with the highest probability, descending,
/// ties broken by smaller vocabulary index.
pub fn top_concepts(scores: &ConceptScores, m: usize) -> Result<Vec<usize>> {
    if m > scores.probs.len() {
        return Err(Error::Config(format!(
            "m = {} exceeds vocabulary size {}",
            m,
            scores.probs.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.probs.len()).collect();
    idx.sort_by(|&a, &b| {
        scores.probs[b]
            .partial_cmp(&scores.probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    Ok(idx)
}

/// Linear-projected embeddings of the top-m concepts, descending probability.
/// `projection` is d_e x d.
pub fn conceptual_queries(
    scores: &ConceptScores,
    vocab: &ConceptVocabulary,
    projection: &Array2<f64>,
    m: usize,
) -> Result<ConceptQuerySet> {
    if scores.probs.len() != vocab.size() {
        return Err(Error::Shape(format!(
            "scores length {} vs vocabulary size {}",
            scores.probs.len(),
            vocab.size()
        )));
    }
    let ids = top_concepts(scores, m)?;
    let d = projection.ncols();
    let mut queries = Array2::zeros((m, d));
    for (row, &cid) in ids.iter().enumerate() {
        let emb = vocab.embeddings.row(cid);
        let projected = emb.dot(projection);
        queries.row_mut(row).assign(&projected);
    }
    Ok(ConceptQuerySet {
        queries,
        concept_ids: ids.into_iter().map(Some).collect(),
    })
}

/// Replaces floor(fraction * M) queries (seeded draw) with random vectors of
/// comparable norm; replaced entries lose their concept id.
pub fn randomize_queries(qs: &ConceptQuerySet, fraction: f64, seed: u64) -> ConceptQuerySet {
    assert!((0.0..=1.0).contains(&fraction), "fraction in [0, 1]");
    let m = qs.queries.nrows();
    let d = qs.queries.ncols();
    let count = (fraction * m as f64).floor() as usize;
    let mut out = qs.clone();
    if count == 0 {
        return out;
    }
    let mean_norm = {
        let total: f64 = qs
            .queries
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum();
        (total / m as f64).max(1e-12)
    };
    let mut rng = seeded_rng(seed);
    let mut rows: Vec<usize> = (0..m).collect();
    rows.shuffle(&mut rng);
    for &r in rows.iter().take(count) {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x *= mean_norm / norm);
        for (c, &x) in v.iter().enumerate() {
            out.queries[[r, c]] = x;
        }
        out.concept_ids[r] = None;
    }
    out
}
