//! Training loop, run configuration, checkpointing, inference, ablation
//! runner, and encoding-projection plumbing.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Corpus, GroundTruthSet, GtSetBuilder, PredictedCaption, PredictionSet, ConceptVocabulary,
};
use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::metrics::{self, CorpusStats};
use crate::model::{forward_set, CaptionModel, HeadType, LmMode, ModelConfig, WordVocab};
use crate::nn::{seeded_rng, AdamW};
use crate::setloss::{set_prediction_loss, LossBreakdown, MatchAssignment};
use crate::tape::{Tape, Var};

/// Every knob of a training/inference run. Flat `key = value` files map
/// one-to-one onto the field names.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub d: usize,
    pub d_f: usize,
    pub n_c: usize,
    pub m: usize,
    pub m_prime: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub refine_layers: usize,
    pub ffn_mult: usize,
    pub use_positions: bool,
    pub head_type: HeadType,
    pub lm_mode: LmMode,
    pub prefix_len: usize,
    pub lm_layers: usize,
    pub lm_context: usize,
    pub cls_hidden: usize,
    pub use_cls_head: bool,
    pub lambda: f64,
    pub lambda_d: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beam: usize,
    pub t_max: usize,
    pub random_query_fraction: f64,
    pub val_fraction: f64,
    pub val_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 40,
            lr: 8e-5,
            batch: 32,
            weight_decay: 0.01,
            d: 512,
            d_f: 64,
            n_c: 1000,
            m: 20,
            m_prime: 20,
            heads: 8,
            temporal_layers: 2,
            refine_layers: 2,
            ffn_mult: 4,
            use_positions: true,
            head_type: HeadType::Recurrent,
            lm_mode: LmMode::Frozen,
            prefix_len: 10,
            lm_layers: 2,
            lm_context: 64,
            cls_hidden: 256,
            use_cls_head: true,
            lambda: 1.0,
            lambda_d: 0.5,
            gamma: 2.0,
            alpha: 0.25,
            beam: 3,
            t_max: 20,
            random_query_fraction: 0.0,
            val_fraction: 0.1,
            val_every: 5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m > self.m_prime {
            return Err(Error::Config(format!(
                "predicted set capacity m = {} exceeds ground-truth capacity m_prime = {}",
                self.m, self.m_prime
            )));
        }
        if self.lambda < 0.0 || self.lambda_d < 0.0 {
            return Err(Error::Config("lambda and lambda_d must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.random_query_fraction) {
            return Err(Error::Config("random_query_fraction must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.beam < 1 || self.batch < 1 || self.m < 1 || self.val_every < 1 {
            return Err(Error::Config("beam, batch, m, val_every must be >= 1".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config("d must be divisible by heads".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` config file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set one field by name. Setting `head_type` also resets `lr` and
    /// `batch` to that head's defaults, so override those afterwards.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {:?} for {}", value, key)))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "d_f" => self.d_f = parse(key, value)?,
            "n_c" => self.n_c = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "m_prime" => self.m_prime = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "temporal_layers" => self.temporal_layers = parse(key, value)?,
            "refine_layers" => self.refine_layers = parse(key, value)?,
            "ffn_mult" => self.ffn_mult = parse(key, value)?,
            "use_positions" => self.use_positions = parse(key, value)?,
            "head_type" => {
                self.head_type = match value {
                    "recurrent" => HeadType::Recurrent,
                    "prefix" => HeadType::Prefix,
                    _ => return Err(Error::Config(format!("unknown head_type {:?}", value))),
                };
                match self.head_type {
                    HeadType::Recurrent => {
                        self.lr = 8e-5;
                        self.batch = 32;
                    }
                    HeadType::Prefix => {
                        self.lr = 1e-5;
                        self.batch = 8;
                    }
                }
            }
            "lm_mode" => {
                self.lm_mode = match value {
                    "frozen" => LmMode::Frozen,
                    "fine-tune" => LmMode::FineTune,
                    "from-scratch" => LmMode::FromScratch,
                    _ => return Err(Error::Config(format!("unknown lm_mode {:?}", value))),
                }
            }
            "prefix_len" => self.prefix_len = parse(key, value)?,
            "lm_layers" => self.lm_layers = parse(key, value)?,
            "lm_context" => self.lm_context = parse(key, value)?,
            "cls_hidden" => self.cls_hidden = parse(key, value)?,
            "use_cls_head" => self.use_cls_head = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lambda_d" => self.lambda_d = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "random_query_fraction" => self.random_query_fraction = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "val_every" => self.val_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {:?}", key))),
        }
        Ok(())
    }

    pub fn model_config(&self, d_e: usize, word_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_f: self.d_f,
            d_e,
            n_c: self.n_c,
            m: self.m,
            heads: self.heads,
            temporal_layers: self.temporal_layers,
            refine_layers: self.refine_layers,
            ffn_mult: self.ffn_mult,
            use_positions: self.use_positions,
            head_type: self.head_type,
            word_vocab_size,
            cls_hidden: self.cls_hidden,
            use_cls_head: self.use_cls_head,
            prefix_len: self.prefix_len,
            lm_layers: self.lm_layers,
            lm_context: self.lm_context,
            lm_mode: self.lm_mode,
            t_max: self.t_max,
            seed: self.seed,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let json = serde_json::to_value(self).expect("config serializes");
        json.as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }
}

/// Everything needed to restore or resume a run exactly.
#[derive(Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub word_vocab: Vec<String>,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub best_val_cider: f64,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }

    pub fn restore_model(&self) -> Result<(CaptionModel, WordVocab)> {
        let mut model = CaptionModel::init(self.model.clone())?;
        model.store.load_named(&self.params)?;
        Ok((model, WordVocab::from_words(self.word_vocab.clone())))
    }
}

pub fn derive_epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a, matching the corpus module's stable hash
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic split: the last `floor(val_fraction * len)` videos become
/// the validation set.
pub fn split_corpus(corpus: &Corpus, val_fraction: f64) -> (Corpus, Corpus) {
    let n = corpus.videos.len();
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let cut = n - n_val;
    (
        Corpus {
            videos: corpus.videos[..cut].to_vec(),
        },
        Corpus {
            videos: corpus.videos[cut..].to_vec(),
        },
    )
}

/// One optimizer-step log line.
#[derive(Serialize)]
struct StepLog<'a> {
    epoch: usize,
    step: usize,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

fn truncate_targets(gt: &GroundTruthSet, wv: &WordVocab, t_max: usize) -> Vec<Vec<usize>> {
    gt.members
        .iter()
        .map(|c| {
            let mut toks = c.tokens.clone();
            toks.truncate(t_max.saturating_sub(1).max(1));
            wv.encode_target(&toks)
        })
        .collect()
}

/// Forward pass plus the full set-prediction loss for one video.
#[allow(clippy::too_many_arguments)]
pub fn video_loss(
    model: &CaptionModel,
    tape: &mut Tape,
    features: &Array2<f64>,
    gt: &GroundTruthSet,
    wv: &WordVocab,
    detector: &DetectorParams,
    vocab: &ConceptVocabulary,
    cfg: &RunConfig,
    query_seed: u64,
) -> Result<(Var, LossBreakdown, MatchAssignment)> {
    let fs = forward_set(
        model,
        tape,
        features,
        detector,
        vocab,
        cfg.random_query_fraction,
        query_seed,
    )?;
    let gt_labels: Vec<Vec<f64>> = gt.members.iter().map(|c| c.concept_label.clone()).collect();
    let gt_tokens = truncate_targets(gt, wv, cfg.t_max);
    let (pred_scores, lambda) = if cfg.use_cls_head {
        (fs.cls_scores, cfg.lambda)
    } else {
        // without the classification head every element matches identically;
        // matching degenerates to a fixed assignment and L_cls drops out
        let half = tape.leaf(Array2::from_elem((model.config.m, cfg.n_c), 0.5));
        (half, 0.0)
    };
    let encodings = fs.encodings;
    let (loss, breakdown, assignment) = set_prediction_loss(
        tape,
        &gt_labels,
        &gt_tokens,
        pred_scores,
        |tape, sigma| {
            let matched: Vec<Vec<usize>> =
                sigma.iter().map(|&i| gt_tokens[i].clone()).collect();
            model
                .teacher_forced(tape, encodings, &matched)
                .expect("teacher forcing failed on validated targets")
        },
        lambda,
        cfg.lambda_d,
        cfg.gamma,
        cfg.alpha,
    )?;
    Ok((loss, breakdown, assignment))
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_oracle_cider: Option<f64>,
}

pub struct TrainOutput {
    pub best: TrainState,
    pub last: TrainState,
    pub history: Vec<EpochRecord>,
}

/// The training loop. `resume` continues an interrupted run bit-exactly;
/// `step_log` receives one JSON line per optimizer step.
pub fn train(
    cfg: &RunConfig,
    corpus: &Corpus,
    vocab: &ConceptVocabulary,
    detector: &DetectorParams,
    resume: Option<TrainState>,
    mut step_log: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if detector.config.n_c != cfg.n_c {
        return Err(Error::Config(format!(
            "detector has n_c = {} but run config says {}",
            detector.config.n_c, cfg.n_c
        )));
    }
    if vocab.size() != cfg.n_c {
        return Err(Error::Config(format!(
            "vocabulary has {} concepts but run config says {}",
            vocab.size(),
            cfg.n_c
        )));
    }
    for v in &corpus.videos {
        if v.features.ncols() != cfg.d_f {
            return Err(Error::Data(format!(
                "video {} has feature dim {} but run config says {}",
                v.video_id,
                v.features.ncols(),
                cfg.d_f
            )));
        }
    }
    let (train_c, val_c) = split_corpus(corpus, cfg.val_fraction);
    if train_c.videos.is_empty() {
        return Err(Error::Data("no training videos after split".into()));
    }
    let wv = WordVocab::from_corpus(corpus);
    let d_e = vocab.embeddings.ncols();

    let (mut model, mut opt, start_epoch, mut best_val) = match resume {
        Some(state) => {
            if state.run != *cfg {
                return Err(Error::Config(
                    "resume checkpoint was produced by a different config".into(),
                ));
            }
            let (model, _) = state.restore_model()?;
            (model, state.optimizer, state.epoch, state.best_val_cider)
        }
        None => {
            let model = CaptionModel::init(cfg.model_config(d_e, wv.len()))?;
            let opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
            (model, opt, 0, f64::NEG_INFINITY)
        }
    };

    let builder = GtSetBuilder::new(&train_c, vocab, cfg.m_prime, cfg.seed)?;
    let stats = CorpusStats::from_corpus(corpus);
    let mut best_state: Option<TrainState> = None;
    let mut history = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let epoch_seed = derive_epoch_seed(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_c.videos.len()).collect();
        order.shuffle(&mut seeded_rng(epoch_seed));

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            // per-video gradients in parallel, summed in deterministic order
            let results: Vec<Result<(HashMap<usize, Array2<f64>>, LossBreakdown)>> = chunk
                .par_iter()
                .map(|&vi| {
                    let video = &train_c.videos[vi];
                    let gt = builder.sample(video, epoch_seed)?;
                    let mut tape = Tape::new();
                    let (loss, bd, _) = video_loss(
                        &model,
                        &mut tape,
                        &video.features,
                        &gt,
                        &wv,
                        detector,
                        vocab,
                        cfg,
                        epoch_seed ^ stable_hash(&video.video_id),
                    )?;
                    let grads = tape.backward(loss);
                    Ok((tape.param_grads(&grads), bd))
                })
                .collect();

            let mut total: HashMap<usize, Array2<f64>> = HashMap::new();
            let mut mean_bd = LossBreakdown {
                l_cap: 0.0,
                l_cls: 0.0,
                l_div: 0.0,
                l_sp: 0.0,
                lambda: cfg.lambda,
                lambda_d: cfg.lambda_d,
            };
            let scale = 1.0 / chunk.len() as f64;
            for r in results {
                let (grads, bd) = r?;
                for (id, g) in grads {
                    total
                        .entry(id)
                        .and_modify(|acc| *acc += &g)
                        .or_insert(g);
                }
                mean_bd.l_cap += bd.l_cap * scale;
                mean_bd.l_cls += bd.l_cls * scale;
                mean_bd.l_div += bd.l_div * scale;
                mean_bd.l_sp += bd.l_sp * scale;
            }
            for g in total.values_mut() {
                *g *= scale;
            }
            opt.apply(&mut model.store, &total);
            epoch_loss += mean_bd.l_sp;
            steps += 1;
            if let Some(log) = step_log.as_deref_mut() {
                serde_json::to_writer(&mut *log, &StepLog { epoch, step, loss: &mean_bd })?;
                writeln!(log)?;
            }
        }
        let mean_loss = epoch_loss / steps.max(1) as f64;

        let snapshot = |best: f64| TrainState {
            run: cfg.clone(),
            model: model.config.clone(),
            word_vocab: wv.words.clone(),
            params: model.store.to_named(),
            optimizer: opt.clone(),
            epoch: epoch + 1,
            best_val_cider: best,
        };

        let mut val_cider = None;
        let validate_now = !val_c.videos.is_empty()
            && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs);
        if validate_now {
            let state = snapshot(best_val);
            let preds = infer(&state, &val_c, detector, vocab, cfg.beam)?;
            let mut sum = 0.0;
            for (pred, video) in preds.iter().zip(&val_c.videos) {
                let refs: Vec<Vec<String>> =
                    video.captions.iter().map(|c| c.tokens.clone()).collect();
                let cands: Vec<Vec<String>> = pred
                    .captions
                    .iter()
                    .map(|c| crate::corpus::tokenize(&c.text))
                    .collect();
                sum += metrics::oracle_scores(&cands, &refs, &stats)?.cider;
            }
            let mean_cider = sum / val_c.videos.len() as f64;
            val_cider = Some(mean_cider);
            if mean_cider > best_val {
                best_val = mean_cider;
                best_state = Some(snapshot(best_val));
            }
            log::info!("epoch {} loss {:.4} val oracle CIDEr {:.4}", epoch, mean_loss, mean_cider);
        } else {
            log::info!("epoch {} loss {:.4}", epoch, mean_loss);
        }
        history.push(EpochRecord {
            epoch,
            mean_loss,
            val_oracle_cider: val_cider,
        });
    }

    let last = TrainState {
        run: cfg.clone(),
        model: model.config.clone(),
        word_vocab: wv.words.clone(),
        params: model.store.to_named(),
        optimizer: opt,
        epoch: cfg.epochs,
        best_val_cider: best_val,
    };
    let best = best_state.unwrap_or_else(|| last.clone());
    Ok(TrainOutput { best, last, history })
}

/// Decode M captions per video with the classification head's thresholded
/// concept combination attached to each.
pub fn infer(
    state: &TrainState,
    corpus: &Corpus,
    detector: &DetectorParams,
    vocab: &ConceptVocabulary,
    beam: usize,
) -> Result<Vec<PredictionSet>> {
    let (model, wv) = state.restore_model()?;
    for v in &corpus.videos {
        if v.features.ncols() != model.config.d_f {
            return Err(Error::Config(format!(
                "video {} has feature dim {} but checkpoint expects {}",
                v.video_id,
                v.features.ncols(),
                model.config.d_f
            )));
        }
    }
    let cfg = &state.run;
    corpus
        .videos
        .par_iter()
        .map(|video| {
            let mut tape = Tape::new();
            let fs = forward_set(
                &model,
                &mut tape,
                &video.features,
                detector,
                vocab,
                cfg.random_query_fraction,
                cfg.seed ^ stable_hash(&video.video_id),
            )?;
            let encodings = tape.value(fs.encodings).clone();
            let probs = tape.value(fs.cls_scores).clone();
            let mut captions = Vec::with_capacity(model.config.m);
            for j in 0..model.config.m {
                let row = encodings.row(j).to_owned().insert_axis(ndarray::Axis(0));
                let decoded = model.beam_search_decode(&row, j, beam, cfg.t_max)?;
                let text = wv.decode(&decoded.token_ids).join(" ");
                let concepts: Vec<String> = (0..cfg.n_c)
                    .filter(|&k| probs[[j, k]] > 0.5)
                    .map(|k| vocab.words[k].clone())
                    .collect();
                captions.push(PredictedCaption {
                    text,
                    concepts,
                    score: decoded.normalized_score(),
                });
            }
            Ok(PredictionSet {
                video_id: video.video_id.clone(),
                captions,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Lambda,
    LambdaD,
    PrefixLength,
    RandomQueryFraction,
    ClsHead,
}

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "lambda" => AblationAxis::Lambda,
            "lambda_d" => AblationAxis::LambdaD,
            "prefix_length" => AblationAxis::PrefixLength,
            "random_query_fraction" => AblationAxis::RandomQueryFraction,
            "cls_head" => AblationAxis::ClsHead,
            _ => return Err(Error::Config(format!("unknown ablation axis {:?}", name))),
        })
    }

    pub fn grid(&self) -> Vec<String> {
        let values: &[&str] = match self {
            AblationAxis::Lambda => &["0.1", "0.5", "1", "2", "10"],
            AblationAxis::LambdaD => &["0", "0.05", "0.5", "5"],
            AblationAxis::PrefixLength => &["1", "5", "10", "20"],
            AblationAxis::RandomQueryFraction => &["0", "0.25", "0.5", "0.75", "1.0"],
            AblationAxis::ClsHead => &["true", "false"],
        };
        values.iter().map(|s| s.to_string()).collect()
    }

    fn apply(&self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let key = match self {
            AblationAxis::Lambda => "lambda",
            AblationAxis::LambdaD => "lambda_d",
            AblationAxis::PrefixLength => "prefix_len",
            AblationAxis::RandomQueryFraction => "random_query_fraction",
            AblationAxis::ClsHead => "use_cls_head",
        };
        cfg.set_key(key, value)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub oracle_cider: f64,
    pub m_bleu: f64,
    pub self_cider: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>12} {:>12} {:>12}\n",
            self.axis, "oracle-CIDEr", "m-BLEU", "self-CIDEr"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>12.4} {:>12.4} {:>12.4}\n",
                r.value, r.oracle_cider, r.m_bleu, r.self_cider
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{},oracle_cider,m_bleu,self_cider", self.axis)?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.value, r.oracle_cider, r.m_bleu, r.self_cider)?;
        }
        Ok(())
    }

    /// Line plot of the three metrics over the axis values, as SVG.
    pub fn write_plot(&self, path: &Path) -> Result<()> {
        let series = [
            ("oracle-CIDEr", "#d62728", self.rows.iter().map(|r| r.oracle_cider).collect::<Vec<_>>()),
            ("m-BLEU", "#1f77b4", self.rows.iter().map(|r| r.m_bleu).collect()),
            ("self-CIDEr", "#2ca02c", self.rows.iter().map(|r| r.self_cider).collect()),
        ];
        let labels: Vec<&str> = self.rows.iter().map(|r| r.value.as_str()).collect();
        let svg = line_plot_svg(&self.axis, &labels, &series);
        std::fs::write(path, svg)?;
        Ok(())
    }
}

/// Summarize one evaluated run for the ablation table.
fn summarize(
    preds: &[PredictionSet],
    eval_corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<(f64, f64, f64)> {
    let report = metrics::evaluate(preds, eval_corpus, cfg.to_map())?;
    Ok((
        report.mean.oracle_cider,
        report.mean.m_bleu,
        report.mean.self_cider,
    ))
}

/// Train/evaluate the grid of one ablation axis with a shared seed and
/// corpus. The random-query axis reuses one trained checkpoint and varies
/// the fraction at inference only.
pub fn ablate(
    base: &RunConfig,
    axis_name: &str,
    corpus: &Corpus,
    vocab: &ConceptVocabulary,
    detector: &DetectorParams,
) -> Result<AblationReport> {
    let axis = AblationAxis::parse(axis_name)?;
    let grid = axis.grid();
    let (_, val_c) = split_corpus(corpus, base.val_fraction);
    let eval_corpus = if val_c.videos.is_empty() { corpus } else { &val_c };
    let mut rows = Vec::new();
    if axis == AblationAxis::RandomQueryFraction {
        let out = train(base, corpus, vocab, detector, None, None)?;
        for value in grid {
            let mut state = out.best.clone();
            state.run.random_query_fraction = value.parse().unwrap();
            let preds = infer(&state, eval_corpus, detector, vocab, state.run.beam)?;
            let (cider, mb, sc) = summarize(&preds, eval_corpus, &state.run)?;
            rows.push(AblationRow {
                value,
                oracle_cider: cider,
                m_bleu: mb,
                self_cider: sc,
            });
        }
    } else {
        for value in grid {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, &value)?;
            cfg.validate()?;
            let out = train(&cfg, corpus, vocab, detector, None, None)?;
            let preds = infer(&out.best, eval_corpus, detector, vocab, cfg.beam)?;
            let (cider, mb, sc) = summarize(&preds, eval_corpus, &cfg)?;
            rows.push(AblationRow {
                value,
                oracle_cider: cider,
                m_bleu: mb,
                self_cider: sc,
            });
        }
    }
    Ok(AblationReport {
        axis: axis_name.to_string(),
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProjectionPoint {
    pub x: f64,
    pub y: f64,
    pub video_id: String,
    pub element_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Projection {
    pub points: Vec<ProjectionPoint>,
    pub mean_intra_set_distance: f64,
    pub mean_inter_set_distance: f64,
}

impl Projection {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x,y,video_id,element_index")?;
        for p in &self.points {
            writeln!(f, "{},{},{},{}", p.x, p.y, p.video_id, p.element_index)?;
        }
        Ok(())
    }

    pub fn write_plot(&self, path: &Path) -> Result<()> {
        let svg = scatter_svg(&self.points);
        std::fs::write(path, svg)?;
        Ok(())
    }
}

/// Project every video's semantics-specific encodings to 2-D with a
/// deterministic principal-component projection.
pub fn project_encodings(
    state: &TrainState,
    corpus: &Corpus,
    detector: &DetectorParams,
    vocab: &ConceptVocabulary,
) -> Result<Projection> {
    if corpus.videos.len() < 2 {
        return Err(Error::Config("projection needs at least 2 videos".into()));
    }
    let (model, _) = state.restore_model()?;
    let cfg = &state.run;
    let mut sets: Vec<Array2<f64>> = Vec::new();
    for video in &corpus.videos {
        let mut tape = Tape::new();
        let fs = forward_set(
            &model,
            &mut tape,
            &video.features,
            detector,
            vocab,
            cfg.random_query_fraction,
            cfg.seed ^ stable_hash(&video.video_id),
        )?;
        sets.push(tape.value(fs.encodings).clone());
    }

    // distances in the full encoding space
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let (mut intra, mut n_intra) = (0.0, 0usize);
    for s in &sets {
        for a in 0..s.nrows() {
            for b in (a + 1)..s.nrows() {
                intra += dist(s.row(a), s.row(b));
                n_intra += 1;
            }
        }
    }
    let (mut inter, mut n_inter) = (0.0, 0usize);
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            for a in 0..sets[i].nrows() {
                for b in 0..sets[j].nrows() {
                    inter += dist(sets[i].row(a), sets[j].row(b));
                    n_inter += 1;
                }
            }
        }
    }

    let total_rows: usize = sets.iter().map(|s| s.nrows()).sum();
    let d = model.config.d;
    let mut stacked = Array2::zeros((total_rows, d));
    let mut r = 0;
    for s in &sets {
        for row in s.rows() {
            stacked.row_mut(r).assign(&row);
            r += 1;
        }
    }
    let coords = pca_2d(&stacked);

    let mut points = Vec::with_capacity(total_rows);
    let mut r = 0;
    for (video, s) in corpus.videos.iter().zip(&sets) {
        for j in 0..s.nrows() {
            points.push(ProjectionPoint {
                x: coords[[r, 0]],
                y: coords[[r, 1]],
                video_id: video.video_id.clone(),
                element_index: j,
            });
            r += 1;
        }
    }
    Ok(Projection {
        points,
        mean_intra_set_distance: if n_intra > 0 { intra / n_intra as f64 } else { 0.0 },
        mean_inter_set_distance: if n_inter > 0 { inter / n_inter as f64 } else { 0.0 },
    })
}

/// Center the rows and project onto the top-2 principal components, with a
/// sign convention making the result deterministic.
pub fn pca_2d(data: &Array2<f64>) -> Array2<f64> {
    let (n, d) = data.dim();
    let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = data - &mean.insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let cov_na = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(cov_na);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut proj = Array2::zeros((d, 2));
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        // sign convention: largest-magnitude component positive
        let lead = v
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            proj[[i, k]] = v[i] * sign;
        }
    }
    centered.dot(&proj)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const SVG_PAD: f64 = 50.0;

fn svg_scale(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, lo + 0.5)
    } else {
        (lo, hi)
    }
}

fn line_plot_svg(axis: &str, labels: &[&str], series: &[(&str, &str, Vec<f64>)]) -> String {
    let (lo, hi) = svg_scale(series.iter().flat_map(|(_, _, v)| v.iter().cloned()));
    let n = labels.len().max(2);
    let x_at = |i: usize| SVG_PAD + (SVG_W - 2.0 * SVG_PAD) * i as f64 / (n - 1) as f64;
    let y_at = |v: f64| SVG_H - SVG_PAD - (SVG_H - 2.0 * SVG_PAD) * (v - lo) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-size=\"14\">{} ablation</text>\n",
        SVG_PAD, axis
    );
    for (i, label) in labels.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            x_at(i),
            SVG_H - SVG_PAD / 2.0,
            label
        ));
    }
    for (si, (name, color, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_at(i), y_at(v)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            color,
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{}</text>\n",
            SVG_W - SVG_PAD - 110.0,
            30.0 + 16.0 * si as f64,
            color,
            name
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn scatter_svg(points: &[ProjectionPoint]) -> String {
    const PALETTE: [&str; 8] = [
        "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
    ];
    let (x_lo, x_hi) = svg_scale(points.iter().map(|p| p.x));
    let (y_lo, y_hi) = svg_scale(points.iter().map(|p| p.y));
    let x_at = |x: f64| SVG_PAD + (SVG_W - 2.0 * SVG_PAD) * (x - x_lo) / (x_hi - x_lo);
    let y_at = |y: f64| SVG_H - SVG_PAD - (SVG_H - 2.0 * SVG_PAD) * (y - y_lo) / (y_hi - y_lo);
    let mut color_of: HashMap<&str, &str> = HashMap::new();
    let mut next = 0usize;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for p in points {
        let color = *color_of.entry(p.video_id.as_str()).or_insert_with(|| {
            let c = PALETTE[next % PALETTE.len()];
            next += 1;
            c
        });
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\" fill-opacity=\"0.8\"/>\n",
            x_at(p.x),
            y_at(p.y),
            color
        ));
    }
    s.push_str("</svg>\n");
    s
}
