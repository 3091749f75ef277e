//! The trainable network: temporal encoder, concept-driven encoder producing
//! semantics-specific encodings, classification head, and two interchangeable
//! captioning heads (recurrent LSTM and prefix-prompted LM) with beam-search
//! decoding.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptVocabulary, Corpus};
use crate::detector::{detect_concepts, randomize_queries, top_concepts, ConceptQuerySet, DetectorParams};
use crate::error::{Error, Result};
use crate::nn::{
    seeded_rng, sinusoidal_positions, Linear, LstmCell, Mlp, ParamId, ParamStore,
    TransformerBlock,
};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadType {
    Recurrent,
    Prefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmMode {
    Frozen,
    FineTune,
    FromScratch,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model dimension d.
    pub d: usize,
    /// Input frame-feature dimension.
    pub d_f: usize,
    /// Concept embedding dimension.
    pub d_e: usize,
    /// Concept vocabulary size.
    pub n_c: usize,
    /// Predicted set capacity / conceptual query count M.
    pub m: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    /// Refinement self-attention layers after the cross-attention (L_r).
    pub refine_layers: usize,
    pub ffn_mult: usize,
    pub use_positions: bool,
    pub head_type: HeadType,
    pub word_vocab_size: usize,
    pub cls_hidden: usize,
    pub use_cls_head: bool,
    pub prefix_len: usize,
    pub lm_layers: usize,
    pub lm_context: usize,
    pub lm_mode: LmMode,
    pub t_max: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 512,
            d_f: 64,
            d_e: 300,
            n_c: 1000,
            m: 20,
            heads: 8,
            temporal_layers: 2,
            refine_layers: 2,
            ffn_mult: 4,
            use_positions: true,
            head_type: HeadType::Recurrent,
            word_vocab_size: 0,
            cls_hidden: 256,
            use_cls_head: true,
            prefix_len: 10,
            lm_layers: 2,
            lm_context: 64,
            lm_mode: LmMode::Frozen,
            t_max: 20,
            seed: 0,
        }
    }
}

/// Caption word vocabulary with reserved PAD/BOS/EOS/UNK slots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WordVocab {
    pub words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

impl WordVocab {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut freq: HashMap<String, u64> = HashMap::new();
        for v in &corpus.videos {
            for c in &v.captions {
                for t in &c.tokens {
                    *freq.entry(t.to_lowercase()).or_insert(0) += 1;
                }
            }
        }
        let mut entries: Vec<(String, u64)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut words = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        words.extend(entries.into_iter().map(|(w, _)| w));
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        WordVocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Token ids followed by EOS (the teacher-forcing target sequence).
    pub fn encode_target(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.id(&t.to_lowercase())).collect();
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.words[i].clone())
            .collect()
    }
}

struct PrefixLm {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: crate::nn::LayerNorm,
    out: Linear,
}

/// The full concept-guided caption-set network over one video.
pub struct CaptionModel {
    pub store: ParamStore,
    pub config: ModelConfig,
    input_proj: Linear,
    temporal: Vec<TransformerBlock>,
    /// d_e x d linear projection of concept embeddings into query space.
    query_proj: ParamId,
    cde_self: TransformerBlock,
    cde_cross: TransformerBlock,
    cde_refine: Vec<TransformerBlock>,
    cls_head: Mlp,
    word_emb: ParamId,
    lstm: Option<LstmCell>,
    lstm_out: Option<Linear>,
    prefix_map: Option<Mlp>,
    lm: Option<PrefixLm>,
}

impl CaptionModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        if config.word_vocab_size < 4 {
            return Err(Error::Config("word vocabulary too small".into()));
        }
        if config.d % config.heads != 0 {
            return Err(Error::Config("model dim must divide head count".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let d = config.d;
        let input_proj = Linear::new(&mut store, &mut rng, "input_proj", config.d_f, d);
        let temporal = (0..config.temporal_layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("temporal.{}", i),
                    d,
                    config.heads,
                    config.ffn_mult,
                )
            })
            .collect();
        let query_proj = store.add("query_proj", crate::nn::xavier(&mut rng, config.d_e, d));
        let cde_self = TransformerBlock::new(&mut store, &mut rng, "cde.self", d, config.heads, config.ffn_mult);
        let cde_cross = TransformerBlock::new(&mut store, &mut rng, "cde.cross", d, config.heads, config.ffn_mult);
        let cde_refine = (0..config.refine_layers)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("cde.refine.{}", i),
                    d,
                    config.heads,
                    config.ffn_mult,
                )
            })
            .collect();
        let cls_head = Mlp::new(&mut store, &mut rng, "cls_head", d, config.cls_hidden, config.n_c);
        let word_emb = store.add(
            "word_emb",
            crate::nn::xavier(&mut rng, config.word_vocab_size, d),
        );
        let (mut lstm, mut lstm_out, mut prefix_map, mut lm) = (None, None, None, None);
        match config.head_type {
            HeadType::Recurrent => {
                lstm = Some(LstmCell::new(&mut store, &mut rng, "lstm", 2 * d, d));
                lstm_out = Some(Linear::new(&mut store, &mut rng, "lstm_out", d, config.word_vocab_size));
            }
            HeadType::Prefix => {
                prefix_map = Some(Mlp::new(
                    &mut store,
                    &mut rng,
                    "prefix_map",
                    d,
                    d * 2,
                    config.prefix_len * d,
                ));
                let tok_emb = store.add(
                    "lm.tok_emb",
                    crate::nn::xavier(&mut rng, config.word_vocab_size, d),
                );
                let pos_emb = store.add(
                    "lm.pos_emb",
                    crate::nn::xavier(&mut rng, config.lm_context, d),
                );
                let blocks = (0..config.lm_layers)
                    .map(|i| {
                        TransformerBlock::new(
                            &mut store,
                            &mut rng,
                            &format!("lm.block.{}", i),
                            d,
                            config.heads,
                            config.ffn_mult,
                        )
                    })
                    .collect();
                let ln_f = crate::nn::LayerNorm::new(&mut store, "lm.ln_f", d);
                let out = Linear::new(&mut store, &mut rng, "lm.out", d, config.word_vocab_size);
                lm = Some(PrefixLm {
                    tok_emb,
                    pos_emb,
                    blocks,
                    ln_f,
                    out,
                });
                if config.lm_mode == LmMode::Frozen {
                    store.freeze_prefix("lm.");
                }
            }
        }
        Ok(CaptionModel {
            store,
            config,
            input_proj,
            temporal,
            query_proj,
            cde_self,
            cde_cross,
            cde_refine,
            cls_head,
            word_emb,
            lstm,
            lstm_out,
            prefix_map,
            lm,
        })
    }

    /// Project frame features to d, add the sinusoidal position signal, and
    /// run the temporal self-attention stack. Output has N rows.
    pub fn temporal_encode(&self, tape: &mut Tape, features: Var) -> Var {
        let n = tape.value(features).nrows();
        let mut x = self.input_proj.forward(tape, &self.store, features);
        if self.config.use_positions {
            let pos = tape.leaf(sinusoidal_positions(n, self.config.d));
            x = tape.add(x, pos);
        }
        for block in &self.temporal {
            x = block.forward(tape, &self.store, x, false);
        }
        x
    }

    /// Self-attention over the M queries, cross-attention against the frame
    /// encodings, then the refinement stack. Output has M rows.
    pub fn concept_driven_encode(&self, tape: &mut Tape, queries: Var, frames: Var) -> Var {
        assert_eq!(
            tape.value(queries).ncols(),
            tape.value(frames).ncols(),
            "query dim must equal frame dim"
        );
        let mut x = self.cde_self.forward(tape, &self.store, queries, false);
        x = self.cde_cross.forward_cross(tape, &self.store, x, frames);
        for block in &self.cde_refine {
            x = block.forward(tape, &self.store, x, false);
        }
        x
    }

    /// Per-element concept probabilities: MLP then sigmoid, M x N_c.
    pub fn classify(&self, tape: &mut Tape, encodings: Var) -> Var {
        let logits = self.cls_head.forward(tape, &self.store, encodings);
        tape.sigmoid(logits)
    }

    /// Trainable projection of the selected concept embeddings into query
    /// space (gradients flow into `query_proj`).
    pub fn project_queries(&self, tape: &mut Tape, vocab: &ConceptVocabulary, ids: &[usize]) -> Var {
        let emb = tape.leaf(vocab.embeddings.clone());
        let sel = tape.select_rows(emb, ids);
        let w = self.store.var(tape, self.query_proj);
        tape.matmul(sel, w)
    }

    /// One recurrent-head step: concat [encoding, Emb(prev)], advance the
    /// LSTM, project to the vocabulary, log-softmax. Batched over rows.
    pub fn caption_step_recurrent(
        &self,
        tape: &mut Tape,
        encodings: Var,
        prev_ids: &[usize],
        hidden: (Var, Var),
    ) -> Result<(Var, (Var, Var))> {
        let lstm = self.lstm.as_ref().expect("recurrent head not constructed");
        let out = self.lstm_out.as_ref().unwrap();
        for &id in prev_ids {
            if id >= self.config.word_vocab_size {
                return Err(Error::Data(format!("unknown token id {}", id)));
            }
        }
        let emb = self.store.var(tape, self.word_emb);
        let prev = tape.select_rows(emb, prev_ids);
        let x = tape.concat_cols(encodings, prev);
        let (h, c) = lstm.step(tape, &self.store, x, hidden.0, hidden.1);
        let logits = out.forward(tape, &self.store, h);
        let logp = tape.log_softmax_rows(logits);
        Ok((logp, (h, c)))
    }

    fn zero_state(&self, tape: &mut Tape, rows: usize) -> (Var, Var) {
        let h = tape.leaf(Array2::zeros((rows, self.config.d)));
        let c = tape.leaf(Array2::zeros((rows, self.config.d)));
        (h, c)
    }

    /// Teacher-forced log-probabilities for the recurrent head. Returns one
    /// T_j x V log-softmax matrix per element.
    pub fn recurrent_teacher_forced(
        &self,
        tape: &mut Tape,
        encodings: Var,
        targets: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let m = tape.value(encodings).nrows();
        assert_eq!(m, targets.len());
        let max_t = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut state = self.zero_state(tape, m);
        let mut rows: Vec<Vec<Var>> = vec![Vec::new(); m];
        for t in 0..max_t {
            let prev: Vec<usize> = targets
                .iter()
                .map(|tgt| {
                    if t == 0 {
                        BOS
                    } else if t - 1 < tgt.len() {
                        tgt[t - 1]
                    } else {
                        PAD
                    }
                })
                .collect();
            let (logp, next) = self.caption_step_recurrent(tape, encodings, &prev, state)?;
            state = next;
            for (j, tgt) in targets.iter().enumerate() {
                if t < tgt.len() {
                    rows[j].push(tape.slice_rows(logp, j, j + 1));
                }
            }
        }
        Ok(rows.into_iter().map(|r| tape.concat_rows(&r)).collect())
    }

    fn lm_forward(&self, tape: &mut Tape, prefix: Var, token_ids: &[usize]) -> Result<Var> {
        let lm = self.lm.as_ref().expect("prefix head not constructed");
        let p = tape.value(prefix).nrows();
        let total = p + token_ids.len();
        if total > self.config.lm_context {
            return Err(Error::Config(format!(
                "prefix + tokens = {} exceeds LM context {}",
                total, self.config.lm_context
            )));
        }
        let tok_emb = self.store.var(tape, lm.tok_emb);
        let seq = if token_ids.is_empty() {
            prefix
        } else {
            let toks = tape.select_rows(tok_emb, token_ids);
            tape.concat_rows(&[prefix, toks])
        };
        let pos_emb = self.store.var(tape, lm.pos_emb);
        let pos = tape.slice_rows(pos_emb, 0, total);
        let mut x = tape.add(seq, pos);
        for block in &lm.blocks {
            x = block.forward(tape, &self.store, x, true);
        }
        let x = lm.ln_f.forward(tape, &self.store, x);
        let logits = lm.out.forward(tape, &self.store, x);
        Ok(tape.log_softmax_rows(logits))
    }

    /// Expand one encoding into P prefix pseudo-embeddings.
    pub fn prefix_embeddings(&self, tape: &mut Tape, encoding: Var) -> Var {
        let map = self.prefix_map.as_ref().expect("prefix head not constructed");
        let flat = map.forward(tape, &self.store, encoding);
        tape.reshape(flat, self.config.prefix_len, self.config.d)
    }

    /// Next-word log-distribution after the given token prefix:
    /// the P pseudo-embeddings are concatenated before the token embeddings.
    pub fn caption_prefix(&self, tape: &mut Tape, encoding: Var, token_prefix: &[usize]) -> Result<Var> {
        let prefix = self.prefix_embeddings(tape, encoding);
        let logp = self.lm_forward(tape, prefix, token_prefix)?;
        let last = tape.value(logp).nrows() - 1;
        Ok(tape.slice_rows(logp, last, last + 1))
    }

    /// Teacher-forced log-probabilities for the prefix head.
    pub fn prefix_teacher_forced(
        &self,
        tape: &mut Tape,
        encodings: Var,
        targets: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let m = tape.value(encodings).nrows();
        assert_eq!(m, targets.len());
        let p = self.config.prefix_len;
        let mut out = Vec::with_capacity(m);
        for (j, tgt) in targets.iter().enumerate() {
            let enc = tape.slice_rows(encodings, j, j + 1);
            let prefix = self.prefix_embeddings(tape, enc);
            // input tokens: BOS, y_1 .. y_{T-1}
            let mut input = vec![BOS];
            input.extend_from_slice(&tgt[..tgt.len() - 1]);
            let logp = self.lm_forward(tape, prefix, &input)?;
            // rows p-1 .. p+T-2 predict y_1 .. y_T
            out.push(tape.slice_rows(logp, p - 1, p + tgt.len() - 1));
        }
        Ok(out)
    }

    /// Teacher-forced log-probabilities with the configured head.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        encodings: Var,
        targets: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        match self.config.head_type {
            HeadType::Recurrent => self.recurrent_teacher_forced(tape, encodings, targets),
            HeadType::Prefix => self.prefix_teacher_forced(tape, encodings, targets),
        }
    }
}

/// A decoded caption with its raw log-probability and source element index.
#[derive(Clone, Debug)]
pub struct DecodedCaption {
    pub token_ids: Vec<usize>,
    pub log_prob: f64,
    pub source_index: usize,
}

impl DecodedCaption {
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.token_ids.len().max(1) as f64
    }
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl CaptionModel {
    /// Length-normalized beam search over the configured head for one
    /// encoding (given as a plain 1 x d row). Deterministic tie-break by
    /// token-id sequence.
    pub fn beam_search_decode(
        &self,
        encoding: &Array2<f64>,
        source_index: usize,
        beam: usize,
        t_max: usize,
    ) -> Result<DecodedCaption> {
        assert!(beam >= 1);
        assert_eq!(encoding.nrows(), 1);
        let mut hyps = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }];
        for _ in 0..t_max {
            if hyps.iter().all(|h| h.finished) {
                break;
            }
            let mut next: Vec<Hypothesis> = Vec::new();
            for h in &hyps {
                if h.finished {
                    next.push(h.clone());
                    continue;
                }
                let dist = self.next_log_probs(encoding, &h.tokens)?;
                for (tok, &lp) in dist.iter().enumerate() {
                    if tok == PAD || tok == BOS {
                        continue;
                    }
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    next.push(Hypothesis {
                        tokens,
                        log_prob: h.log_prob + lp,
                        finished: tok == EOS,
                    });
                }
            }
            next.sort_by(|a, b| {
                normalized(b)
                    .partial_cmp(&normalized(a))
                    .unwrap()
                    .then(a.tokens.cmp(&b.tokens))
            });
            next.truncate(beam);
            hyps = next;
        }
        let best = hyps
            .into_iter()
            .max_by(|a, b| {
                normalized(a)
                    .partial_cmp(&normalized(b))
                    .unwrap()
                    .then(b.tokens.cmp(&a.tokens))
            })
            .unwrap();
        Ok(DecodedCaption {
            log_prob: best.log_prob,
            token_ids: best.tokens,
            source_index,
        })
    }

    /// Log-distribution over the next token given generated tokens so far.
    fn next_log_probs(&self, encoding: &Array2<f64>, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = tape.leaf(encoding.clone());
        match self.config.head_type {
            HeadType::Recurrent => {
                let mut state = self.zero_state(&mut tape, 1);
                let mut prev = BOS;
                let mut logp = None;
                let steps: Vec<usize> = std::iter::once(BOS)
                    .chain(tokens.iter().cloned())
                    .collect();
                for &p in &steps {
                    let _ = prev;
                    prev = p;
                    let (lp, next) = self.caption_step_recurrent(&mut tape, enc, &[prev], state)?;
                    state = next;
                    logp = Some(lp);
                }
                Ok(tape.value(logp.unwrap()).row(0).to_vec())
            }
            HeadType::Prefix => {
                let mut input = vec![BOS];
                input.extend_from_slice(tokens);
                let lp = self.caption_prefix(&mut tape, enc, &input)?;
                Ok(tape.value(lp).row(0).to_vec())
            }
        }
    }
}

fn normalized(h: &Hypothesis) -> f64 {
    h.log_prob / h.tokens.len().max(1) as f64
}

/// Output of one full forward pass over a video.
pub struct ForwardSet {
    pub encodings: Var,
    pub cls_scores: Var,
    pub query_ids: Vec<Option<usize>>,
}

/// Composition of detector, query construction, temporal encoding, and
/// concept-driven encoding. `random_query_fraction` > 0 replaces part of the
/// projected queries with seeded random vectors.
#[allow(clippy::too_many_arguments)]
pub fn forward_set(
    model: &CaptionModel,
    tape: &mut Tape,
    features: &Array2<f64>,
    detector: &DetectorParams,
    vocab: &ConceptVocabulary,
    random_query_fraction: f64,
    query_seed: u64,
) -> Result<ForwardSet> {
    let scores = detect_concepts(features, detector)?;
    let ids = top_concepts(&scores, model.config.m)?;
    let feat = tape.leaf(features.clone());
    let frames = model.temporal_encode(tape, feat);
    let mut queries = model.project_queries(tape, vocab, &ids);
    let mut query_ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
    if random_query_fraction > 0.0 {
        let plain = ConceptQuerySet {
            queries: tape.value(queries).clone(),
            concept_ids: query_ids.clone(),
        };
        let randomized = randomize_queries(&plain, random_query_fraction, query_seed);
        // keep gradient flow for surviving rows, constants for replaced rows
        let parts: Vec<Var> = (0..model.config.m)
            .map(|r| {
                if randomized.concept_ids[r].is_some() {
                    tape.slice_rows(queries, r, r + 1)
                } else {
                    tape.leaf(
                        randomized
                            .queries
                            .row(r)
                            .to_owned()
                            .insert_axis(ndarray::Axis(0)),
                    )
                }
            })
            .collect();
        queries = tape.concat_rows(&parts);
        query_ids = randomized.concept_ids;
    }
    let encodings = model.concept_driven_encode(tape, queries, frames);
    let cls_scores = model.classify(tape, encodings);
    Ok(ForwardSet {
        encodings,
        cls_scores,
        query_ids,
    })
}
