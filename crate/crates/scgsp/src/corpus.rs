//! Corpus construction and loading: synthetic generation with planted
//! concepts, JSONL ingestion, concept vocabulary building, concept labeling,
//! and ground-truth caption-set construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 300;

/// Multi-hot concept vector; entries are exactly 0.0 or 1.0.
pub type MultiHot = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Verb,
    Other,
}

impl PosTag {
    pub fn parse(s: &str) -> PosTag {
        match s.to_ascii_lowercase().as_str() {
            "noun" | "n" | "nn" | "nns" => PosTag::Noun,
            "verb" | "v" | "vb" | "vbz" | "vbd" | "vbg" => PosTag::Verb,
            _ => PosTag::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PosTag::Noun => "noun",
            PosTag::Verb => "verb",
            PosTag::Other => "other",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub tokens: Vec<String>,
    pub concept_label: MultiHot,
    pub pos_tags: Option<Vec<PosTag>>,
}

#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub video_id: String,
    /// N x d_f frame features.
    pub features: Array2<f64>,
    pub captions: Vec<CaptionRecord>,
    pub video_concept_label: MultiHot,
    pub planted_concepts: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub videos: Vec<VideoRecord>,
}

#[derive(Clone, Debug)]
pub struct GroundTruthSet {
    pub members: Vec<CaptionRecord>,
    pub source_video: String,
}

/// The N_c most frequent noun/verb word types with their embeddings.
#[derive(Clone, Debug)]
pub struct ConceptVocabulary {
    pub words: Vec<String>,
    pub frequencies: Vec<u64>,
    /// N_c x d_e embedding rows, aligned with `words`.
    pub embeddings: Array2<f64>,
}

impl ConceptVocabulary {
    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

/// Word-embedding source: entries loaded from a text file, with a
/// deterministic seeded random unit vector for any missing word.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    seed: u64,
}

fn stable_word_hash(word: &str) -> u64 {
    // FNV-1a, stable across platforms and runs
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl EmbeddingTable {
    pub fn random(seed: u64) -> Self {
        EmbeddingTable {
            dim: EMBED_DIM,
            table: HashMap::new(),
            seed,
        }
    }

    /// Whitespace-separated text: one word per line followed by `dim` floats.
    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts
                .next()
                .ok_or_else(|| Error::Data(format!("embeddings line {}: empty", lineno + 1)))?
                .to_string();
            let vec: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| {
                        Error::Data(format!("embeddings line {}: bad float {:?}", lineno + 1, p))
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(Error::Data(format!(
                        "embeddings line {}: dimension {} differs from {}",
                        lineno + 1,
                        vec.len(),
                        d
                    )))
                }
                _ => {}
            }
            table.insert(word, vec);
        }
        Ok(EmbeddingTable {
            dim: dim.unwrap_or(EMBED_DIM),
            table,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Vec<f64> {
        if let Some(v) = self.table.get(word) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_word_hash(word));
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Selects the `n_c` noun-or-verb word types with the highest corpus
/// frequency, descending frequency with lexicographic tie-break.
pub fn build_concept_vocabulary(
    corpus_captions: &[(Vec<String>, Vec<PosTag>)],
    n_c: usize,
    embeddings: &EmbeddingTable,
) -> Result<ConceptVocabulary> {
    if n_c < 1 {
        return Err(Error::Config("n_c must be >= 1".into()));
    }
    if corpus_captions.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for (tokens, tags) in corpus_captions {
        if tokens.len() != tags.len() {
            return Err(Error::Data(format!(
                "caption has {} tokens but {} pos tags",
                tokens.len(),
                tags.len()
            )));
        }
        for (tok, tag) in tokens.iter().zip(tags) {
            if matches!(tag, PosTag::Noun | PosTag::Verb) {
                *freq.entry(tok.to_lowercase()).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(String, u64)> = freq.into_iter().collect();
    // descending frequency, ties lexicographic (BTreeMap already sorted by word)
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.truncate(n_c);
    if entries.is_empty() {
        log::warn!("no noun/verb candidates in corpus; vocabulary is empty");
    }
    let words: Vec<String> = entries.iter().map(|(w, _)| w.clone()).collect();
    let frequencies: Vec<u64> = entries.iter().map(|(_, f)| *f).collect();
    let mut emb = Array2::zeros((words.len(), embeddings.dim()));
    for (i, w) in words.iter().enumerate() {
        let v = embeddings.get(w);
        for (j, &x) in v.iter().enumerate() {
            emb[[i, j]] = x;
        }
    }
    Ok(ConceptVocabulary {
        words,
        frequencies,
        embeddings: emb,
    })
}

/// Bit k set iff vocabulary word k occurs among the (case-folded) tokens.
pub fn label_caption(tokens: &[String], vocab: &ConceptVocabulary) -> MultiHot {
    let set: HashSet<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    vocab
        .words
        .iter()
        .map(|w| if set.contains(w) { 1.0 } else { 0.0 })
        .collect()
}

/// Element-wise OR of multi-hot labels.
pub fn video_concept_label(labels: &[MultiHot]) -> Result<MultiHot> {
    let first = labels
        .first()
        .ok_or_else(|| Error::Data("video_concept_label: empty label list".into()))?;
    let mut out = vec![0.0; first.len()];
    for l in labels {
        if l.len() != first.len() {
            return Err(Error::Shape(format!(
                "label length {} differs from {}",
                l.len(),
                first.len()
            )));
        }
        for (o, &b) in out.iter_mut().zip(l) {
            if b != 0.0 {
                *o = 1.0;
            }
        }
    }
    Ok(out)
}

/// Fill caption and video concept labels for the whole corpus.
pub fn label_corpus(corpus: &mut Corpus, vocab: &ConceptVocabulary) -> Result<()> {
    for video in &mut corpus.videos {
        for cap in &mut video.captions {
            cap.concept_label = label_caption(&cap.tokens, vocab);
        }
        let labels: Vec<MultiHot> = video.captions.iter().map(|c| c.concept_label.clone()).collect();
        video.video_concept_label = video_concept_label(&labels)?;
    }
    Ok(())
}

/// Mean of vocabulary embeddings over the tokens; unknown words contribute
/// a zero vector.
pub fn sentence_embedding(tokens: &[String], vocab: &ConceptVocabulary) -> Vec<f64> {
    let d = vocab.embeddings.ncols();
    let mut out = vec![0.0; d];
    if tokens.is_empty() {
        return out;
    }
    for tok in tokens {
        if let Some(i) = vocab.index_of(&tok.to_lowercase()) {
            for (o, &e) in out.iter_mut().zip(vocab.embeddings.row(i)) {
                *o += e;
            }
        }
    }
    out.iter_mut().for_each(|x| *x /= tokens.len() as f64);
    out
}

/// Lloyd's k-means with seeded k-means++ init. Returns cluster per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    assert!(k >= 1 && k <= points.len());
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(points[rng.gen_range(0..points.len())].clone());
            continue;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut chosen = 0;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        centers.push(points[chosen].clone());
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    dist2(p, &centers[a])
                        .partial_cmp(&dist2(p, &centers[b]))
                        .unwrap()
                })
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Per-corpus caption clustering, computed once; per-epoch sampling draws one
/// caption per cluster.
pub struct GtSetBuilder {
    pub m_prime: usize,
    /// video_id -> cluster index of each caption.
    pub assignments: HashMap<String, Vec<usize>>,
}

impl GtSetBuilder {
    pub fn new(
        corpus: &Corpus,
        vocab: &ConceptVocabulary,
        m_prime: usize,
        seed: u64,
    ) -> Result<Self> {
        if m_prime < 1 {
            return Err(Error::Config("m_prime must be >= 1".into()));
        }
        let mut assignments = HashMap::new();
        for video in &corpus.videos {
            let points: Vec<Vec<f64>> = video
                .captions
                .iter()
                .map(|c| sentence_embedding(&c.tokens, vocab))
                .collect();
            if points.is_empty() {
                return Err(Error::Data(format!(
                    "video {} has no captions",
                    video.video_id
                )));
            }
            let k = m_prime.min(points.len());
            let assign = kmeans(&points, k, seed ^ stable_word_hash(&video.video_id));
            assignments.insert(video.video_id.clone(), assign);
        }
        Ok(GtSetBuilder {
            m_prime,
            assignments,
        })
    }

    /// One caption per cluster; pools smaller than M' are padded by sampling
    /// with replacement.
    pub fn sample(&self, video: &VideoRecord, epoch_seed: u64) -> Result<GroundTruthSet> {
        let assign = self.assignments.get(&video.video_id).ok_or_else(|| {
            Error::Data(format!("video {} not in clustering", video.video_id))
        })?;
        let k = assign.iter().max().map(|&m| m + 1).unwrap_or(0);
        let mut rng =
            ChaCha8Rng::seed_from_u64(epoch_seed ^ stable_word_hash(&video.video_id));
        let mut members = Vec::with_capacity(self.m_prime);
        for cluster in 0..k {
            let pool: Vec<usize> = assign
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == cluster)
                .map(|(i, _)| i)
                .collect();
            if pool.is_empty() {
                continue;
            }
            let pick = pool[rng.gen_range(0..pool.len())];
            members.push(video.captions[pick].clone());
        }
        while members.len() < self.m_prime {
            let pick = rng.gen_range(0..video.captions.len());
            members.push(video.captions[pick].clone());
        }
        members.truncate(self.m_prime);
        Ok(GroundTruthSet {
            members,
            source_video: video.video_id.clone(),
        })
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub n_frames: usize,
    pub d_f: usize,
    pub concept_pool_size: usize,
    pub concepts_per_video: usize,
    pub captions_per_video: usize,
    pub noise_scale: f64,
}

const BASE_NOUNS: &[&str] = &[
    "dog", "cat", "bird", "horse", "car", "ball", "tree", "river", "guitar", "child", "robot",
    "boat", "mountain", "camera", "flower", "train", "monkey", "turtle", "piano", "kite",
];
const BASE_VERBS: &[&str] = &[
    "runs", "jumps", "sings", "flies", "swims", "dances", "climbs", "rolls", "spins", "sleeps",
    "eats", "drives", "paints", "throws", "catches", "slides", "waves", "digs", "reads", "kicks",
];

fn concept_word(index: usize) -> (String, PosTag) {
    // even indices are nouns, odd indices verbs
    if index % 2 == 0 {
        let i = index / 2;
        let base = BASE_NOUNS[i % BASE_NOUNS.len()];
        let word = if i < BASE_NOUNS.len() {
            base.to_string()
        } else {
            format!("{}{}", base, i / BASE_NOUNS.len())
        };
        (word, PosTag::Noun)
    } else {
        let i = index / 2;
        let base = BASE_VERBS[i % BASE_VERBS.len()];
        let word = if i < BASE_VERBS.len() {
            base.to_string()
        } else {
            format!("{}{}", base, i / BASE_VERBS.len())
        };
        (word, PosTag::Verb)
    }
}

/// Generates a corpus whose planted concepts are recoverable from both the
/// frame features (noisy prototype mixtures) and the templated captions.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    if spec.num_videos == 0
        || spec.n_frames == 0
        || spec.d_f == 0
        || spec.concept_pool_size == 0
        || spec.concepts_per_video == 0
        || spec.captions_per_video == 0
    {
        return Err(Error::Config("all synthetic counts must be positive".into()));
    }
    if spec.concepts_per_video > spec.concept_pool_size {
        return Err(Error::Config(
            "concepts_per_video exceeds concept_pool_size".into(),
        ));
    }
    if spec.concept_pool_size < 2 {
        return Err(Error::Config(
            "concept pool needs at least one noun and one verb".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concepts: Vec<(String, PosTag)> =
        (0..spec.concept_pool_size).map(concept_word).collect();
    // fixed random prototype per concept
    let prototypes: Vec<Vec<f64>> = (0..spec.concept_pool_size)
        .map(|_| {
            let v: Vec<f64> = (0..spec.d_f).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let noun_ids: Vec<usize> = (0..spec.concept_pool_size).filter(|i| i % 2 == 0).collect();
    let verb_ids: Vec<usize> = (0..spec.concept_pool_size).filter(|i| i % 2 == 1).collect();

    let mut videos = Vec::with_capacity(spec.num_videos);
    for vidx in 0..spec.num_videos {
        // pick planted concepts with at least one noun and one verb
        let mut planted: Vec<usize> = Vec::new();
        planted.push(*noun_ids.choose(&mut rng).unwrap());
        if spec.concepts_per_video >= 2 {
            planted.push(*verb_ids.choose(&mut rng).unwrap());
        }
        while planted.len() < spec.concepts_per_video {
            let c = rng.gen_range(0..spec.concept_pool_size);
            if !planted.contains(&c) {
                planted.push(c);
            }
        }
        planted.sort_unstable();
        let p_nouns: Vec<usize> = planted.iter().cloned().filter(|i| i % 2 == 0).collect();
        let p_verbs: Vec<usize> = planted.iter().cloned().filter(|i| i % 2 == 1).collect();

        // frames: average of planted prototypes plus noise
        let mut features = Array2::zeros((spec.n_frames, spec.d_f));
        for f in 0..spec.n_frames {
            for d in 0..spec.d_f {
                let avg: f64 = planted.iter().map(|&c| prototypes[c][d]).sum::<f64>()
                    / planted.len() as f64;
                let noise: f64 = if spec.noise_scale > 0.0 {
                    spec.noise_scale * rng.sample::<f64, _>(rand_distr_standard_normal())
                } else {
                    0.0
                };
                features[[f, d]] = avg + noise;
            }
        }

        // templated captions, round-robin so every planted concept appears
        let mut captions = Vec::with_capacity(spec.captions_per_video);
        for c in 0..spec.captions_per_video {
            let mut tokens: Vec<String> = Vec::new();
            let mut tags: Vec<PosTag> = Vec::new();
            let subj = if p_nouns.is_empty() {
                None
            } else {
                Some(p_nouns[c % p_nouns.len()])
            };
            let verb = if p_verbs.is_empty() {
                None
            } else {
                Some(p_verbs[c % p_verbs.len()])
            };
            if let Some(s) = subj {
                tokens.push("a".into());
                tags.push(PosTag::Other);
                tokens.push(concepts[s].0.clone());
                tags.push(PosTag::Noun);
            }
            if let Some(v) = verb {
                tokens.push(concepts[v].0.clone());
                tags.push(PosTag::Verb);
            }
            // optional object from the remaining planted nouns
            if p_nouns.len() >= 2 && rng.gen_bool(0.5) {
                let obj = p_nouns[(c + 1) % p_nouns.len()];
                if Some(obj) != subj {
                    tokens.push("a".into());
                    tags.push(PosTag::Other);
                    tokens.push(concepts[obj].0.clone());
                    tags.push(PosTag::Noun);
                }
            }
            if tokens.is_empty() {
                tokens.push(concepts[planted[c % planted.len()]].0.clone());
                tags.push(concepts[planted[c % planted.len()]].1);
            }
            captions.push(CaptionRecord {
                tokens,
                concept_label: Vec::new(),
                pos_tags: Some(tags),
            });
        }
        // coverage fix-up: append any planted concept missing from captions
        let mut present: HashSet<String> = captions
            .iter()
            .flat_map(|c| c.tokens.iter().cloned())
            .collect();
        for &c in &planted {
            if !present.contains(&concepts[c].0) {
                let slot = vidx % captions.len();
                let (w, t) = concepts[c].clone();
                if t == PosTag::Noun {
                    captions[slot].tokens.push("a".into());
                    captions[slot].pos_tags.as_mut().unwrap().push(PosTag::Other);
                }
                captions[slot].tokens.push(w.clone());
                captions[slot].pos_tags.as_mut().unwrap().push(t);
                present.insert(w);
            }
        }

        videos.push(VideoRecord {
            video_id: format!("video{:05}", vidx),
            features,
            captions,
            video_concept_label: Vec::new(),
            planted_concepts: Some(
                planted.iter().map(|&c| concepts[c].0.clone()).collect(),
            ),
        });
    }
    Ok(Corpus { videos })
}

// rand's StandardNormal lives in rand_distr; a Box-Muller draw keeps the
// dependency list short.
struct BoxMuller;
impl rand::distributions::Distribution<f64> for BoxMuller {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
fn rand_distr_standard_normal() -> BoxMuller {
    BoxMuller
}

// ---------------------------------------------------------------------------
// File formats (JSON lines)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VideoLine {
    video_id: String,
    features: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    planted_concepts: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    video_id: String,
    captions: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pos_tags: Option<Vec<Vec<String>>>,
}

pub fn save_corpus(corpus: &Corpus, videos_path: &Path, captions_path: &Path) -> Result<()> {
    let mut vf = std::io::BufWriter::new(std::fs::File::create(videos_path)?);
    let mut cf = std::io::BufWriter::new(std::fs::File::create(captions_path)?);
    for video in &corpus.videos {
        let line = VideoLine {
            video_id: video.video_id.clone(),
            features: video
                .features
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            planted_concepts: video.planted_concepts.clone(),
        };
        writeln!(vf, "{}", serde_json::to_string(&line)?)?;
        let cline = CaptionLine {
            video_id: video.video_id.clone(),
            captions: video.captions.iter().map(|c| c.tokens.join(" ")).collect(),
            pos_tags: {
                let all: Option<Vec<Vec<String>>> = video
                    .captions
                    .iter()
                    .map(|c| {
                        c.pos_tags
                            .as_ref()
                            .map(|t| t.iter().map(|p| p.as_str().to_string()).collect())
                    })
                    .collect();
                all
            },
        };
        writeln!(cf, "{}", serde_json::to_string(&cline)?)?;
    }
    Ok(())
}

/// Loads a corpus from the videos and captions JSONL files. Concept labels
/// are left empty until [`label_corpus`] is applied with a vocabulary.
pub fn load_corpus(videos_path: &Path, captions_path: &Path) -> Result<Corpus> {
    let vfile = std::fs::File::open(videos_path)?;
    let mut videos: Vec<VideoRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in BufReader::new(vfile).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: VideoLine = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {}", videos_path.display(), lineno + 1, e))
        })?;
        let n = parsed.features.len();
        if n == 0 {
            return Err(Error::Data(format!(
                "{} line {}: video {} has no feature rows",
                videos_path.display(),
                lineno + 1,
                parsed.video_id
            )));
        }
        let d = parsed.features[0].len();
        let mut features = Array2::zeros((n, d));
        for (i, row) in parsed.features.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Data(format!(
                    "{} line {}: feature row {} has length {} expected {}",
                    videos_path.display(),
                    lineno + 1,
                    i,
                    row.len(),
                    d
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                features[[i, j]] = x;
            }
        }
        index.insert(parsed.video_id.clone(), videos.len());
        videos.push(VideoRecord {
            video_id: parsed.video_id,
            features,
            captions: Vec::new(),
            video_concept_label: Vec::new(),
            planted_concepts: parsed.planted_concepts,
        });
    }
    let cfile = std::fs::File::open(captions_path)?;
    for (lineno, line) in BufReader::new(cfile).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptionLine = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{} line {}: {}",
                captions_path.display(),
                lineno + 1,
                e
            ))
        })?;
        let vi = *index.get(&parsed.video_id).ok_or_else(|| {
            Error::Data(format!(
                "{} line {}: unknown video {}",
                captions_path.display(),
                lineno + 1,
                parsed.video_id
            ))
        })?;
        for (ci, text) in parsed.captions.iter().enumerate() {
            let tokens = tokenize(text);
            if tokens.is_empty() {
                return Err(Error::Data(format!(
                    "{} line {}: caption {} is empty",
                    captions_path.display(),
                    lineno + 1,
                    ci
                )));
            }
            let pos_tags = parsed.pos_tags.as_ref().map(|all| {
                all[ci].iter().map(|t| PosTag::parse(t)).collect::<Vec<_>>()
            });
            if let Some(tags) = &pos_tags {
                if tags.len() != tokens.len() {
                    return Err(Error::Data(format!(
                        "{} line {}: caption {} has {} tokens but {} tags",
                        captions_path.display(),
                        lineno + 1,
                        ci,
                        tokens.len(),
                        tags.len()
                    )));
                }
            }
            videos[vi].captions.push(CaptionRecord {
                tokens,
                concept_label: Vec::new(),
                pos_tags,
            });
        }
    }
    Ok(Corpus { videos })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub words: Vec<String>,
    pub frequencies: Vec<u64>,
}

pub fn save_vocabulary(vocab: &ConceptVocabulary, path: &Path) -> Result<()> {
    let file = VocabularyFile {
        words: vocab.words.clone(),
        frequencies: vocab.frequencies.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_vocabulary(path: &Path, embeddings: &EmbeddingTable) -> Result<ConceptVocabulary> {
    let text = std::fs::read_to_string(path)?;
    let file: VocabularyFile = serde_json::from_str(&text)?;
    let mut emb = Array2::zeros((file.words.len(), embeddings.dim()));
    for (i, w) in file.words.iter().enumerate() {
        for (j, &x) in embeddings.get(w).iter().enumerate() {
            emb[[i, j]] = x;
        }
    }
    Ok(ConceptVocabulary {
        words: file.words,
        frequencies: file.frequencies,
        embeddings: emb,
    })
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictedCaption {
    pub text: String,
    pub concepts: Vec<String>,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictionSet {
    pub video_id: String,
    pub captions: Vec<PredictedCaption>,
}

pub fn save_predictions(path: &Path, preds: &[PredictionSet]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionSet = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {}", path.display(), lineno + 1, e))
        })?;
        out.push(p);
    }
    Ok(out)
}

/// (tokens, tags) pairs for vocabulary building; synthesized tags fall back
/// to Other when a caption carries none.
pub fn tagged_captions(corpus: &Corpus) -> Vec<(Vec<String>, Vec<PosTag>)> {
    corpus
        .videos
        .iter()
        .flat_map(|v| {
            v.captions.iter().map(|c| {
                let tags = c
                    .pos_tags
                    .clone()
                    .unwrap_or_else(|| vec![PosTag::Other; c.tokens.len()]);
                (c.tokens.clone(), tags)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_embed() -> EmbeddingTable {
        EmbeddingTable::random(42)
    }

    #[test]
    fn vocabulary_hand_counted_order() {
        // 10-caption toy corpus, 5 distinct nouns with known frequencies
        let caps: Vec<(Vec<String>, Vec<PosTag>)> = vec![
            ("a dog runs", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a dog jumps", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a dog sleeps", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a cat runs", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a cat jumps", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a bird sings", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a bird flies", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a horse runs", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a fish swims", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
            ("a fish swims", vec![PosTag::Other, PosTag::Noun, PosTag::Verb]),
        ]
        .into_iter()
        .map(|(s, t)| (tokenize(s), t))
        .collect();
        let vocab = build_concept_vocabulary(&caps, 5, &toy_embed()).unwrap();
        // dog 3, runs 3, cat 2, jumps 2, bird 2, ... -> top 5 by freq then lex
        assert_eq!(vocab.words, vec!["dog", "runs", "bird", "cat", "fish"]);
    }

    #[test]
    fn vocabulary_empty_corpus_errors() {
        assert!(build_concept_vocabulary(&[], 10, &toy_embed()).is_err());
    }

    #[test]
    fn vocabulary_no_candidates_is_empty_with_warning() {
        let caps = vec![(tokenize("the of and"), vec![PosTag::Other; 3])];
        let vocab = build_concept_vocabulary(&caps, 10, &toy_embed()).unwrap();
        assert_eq!(vocab.size(), 0);
    }

    #[test]
    fn label_caption_examples() {
        let caps = vec![
            (tokenize("dog runs"), vec![PosTag::Noun, PosTag::Verb]),
            (tokenize("cat runs"), vec![PosTag::Noun, PosTag::Verb]),
        ];
        let mut vocab = build_concept_vocabulary(&caps, 3, &toy_embed()).unwrap();
        vocab.words = vec!["dog".into(), "cat".into(), "runs".into()];
        let l = label_caption(&tokenize("a dog runs"), &vocab);
        assert_eq!(l, vec![1.0, 0.0, 1.0]);
        // repeated word same as single occurrence
        let l2 = label_caption(&tokenize("dog dog runs"), &vocab);
        assert_eq!(l2, l);
        // no overlap -> zeros
        let l3 = label_caption(&tokenize("a fish swims"), &vocab);
        assert_eq!(l3, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn or_examples() {
        assert_eq!(
            video_concept_label(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            video_concept_label(&[vec![1.0, 0.0]]).unwrap(),
            vec![1.0, 0.0]
        );
        assert!(video_concept_label(&[vec![1.0], vec![1.0, 0.0]]).is_err());
        assert!(video_concept_label(&[]).is_err());
    }

    #[test]
    fn or_associativity_and_permutation() {
        let mut rng = crate::nn::seeded_rng(13);
        let labels: Vec<MultiHot> = (0..20)
            .map(|_| (0..8).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect())
            .collect();
        let direct = video_concept_label(&labels).unwrap();
        // OR of OR-prefixes
        let mut acc = labels[0].clone();
        for l in &labels[1..] {
            acc = video_concept_label(&[acc, l.clone()]).unwrap();
        }
        assert_eq!(direct, acc);
        let mut shuffled = labels.clone();
        shuffled.reverse();
        assert_eq!(direct, video_concept_label(&shuffled).unwrap());
        // duplication
        let mut dup = labels.clone();
        dup.push(labels[3].clone());
        assert_eq!(direct, video_concept_label(&dup).unwrap());
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 6,
            n_frames: 4,
            d_f: 8,
            concept_pool_size: 10,
            concepts_per_video: 3,
            captions_per_video: 5,
            noise_scale: 0.05,
        }
    }

    #[test]
    fn synthetic_deterministic() {
        let a = generate_synthetic_corpus(&small_spec(), 7).unwrap();
        let b = generate_synthetic_corpus(&small_spec(), 7).unwrap();
        for (va, vb) in a.videos.iter().zip(&b.videos) {
            assert_eq!(va.features, vb.features);
            assert_eq!(
                va.captions.iter().map(|c| c.tokens.clone()).collect::<Vec<_>>(),
                vb.captions.iter().map(|c| c.tokens.clone()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn synthetic_zero_noise_frames_are_prototype_average() {
        let mut spec = small_spec();
        spec.noise_scale = 0.0;
        let corpus = generate_synthetic_corpus(&spec, 3).unwrap();
        for v in &corpus.videos {
            let first = v.features.row(0).to_owned();
            for row in v.features.rows() {
                for (a, b) in row.iter().zip(first.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn synthetic_planted_equals_caption_union() {
        let corpus = generate_synthetic_corpus(&small_spec(), 19).unwrap();
        for v in &corpus.videos {
            let planted: HashSet<String> =
                v.planted_concepts.clone().unwrap().into_iter().collect();
            let mut seen: HashSet<String> = HashSet::new();
            for c in &v.captions {
                for t in &c.tokens {
                    if planted.contains(t) {
                        seen.insert(t.clone());
                    }
                }
            }
            assert_eq!(planted, seen, "video {}", v.video_id);
        }
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let mut spec = small_spec();
        spec.concepts_per_video = 100;
        assert!(generate_synthetic_corpus(&spec, 0).is_err());
    }

    #[test]
    fn corpus_roundtrip() {
        let corpus = generate_synthetic_corpus(&small_spec(), 23).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("videos.jsonl");
        let cp = dir.path().join("captions.jsonl");
        save_corpus(&corpus, &vp, &cp).unwrap();
        let loaded = load_corpus(&vp, &cp).unwrap();
        assert_eq!(corpus.videos.len(), loaded.videos.len());
        for (a, b) in corpus.videos.iter().zip(&loaded.videos) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.features, b.features);
            assert_eq!(a.planted_concepts, b.planted_concepts);
            assert_eq!(
                a.captions.iter().map(|c| &c.tokens).collect::<Vec<_>>(),
                b.captions.iter().map(|c| &c.tokens).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn load_corpus_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("videos.jsonl");
        let cp = dir.path().join("captions.jsonl");
        std::fs::write(&vp, "{\"video_id\": \"v0\", \"features\": [[1.0], [2.0]]}\nnot json\n")
            .unwrap();
        std::fs::write(&cp, "").unwrap();
        let err = load_corpus(&vp, &cp).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{}", err);
    }

    #[test]
    fn load_fixture_corpus() {
        // 2-video hand-written fixture with known field values
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("videos.jsonl");
        let cp = dir.path().join("captions.jsonl");
        std::fs::write(
            &vp,
            concat!(
                "{\"video_id\": \"a\", \"features\": [[1.0, 2.0]], \"planted_concepts\": [\"dog\"]}\n",
                "{\"video_id\": \"b\", \"features\": [[3.0, 4.0], [5.0, 6.0]]}\n"
            ),
        )
        .unwrap();
        std::fs::write(
            &cp,
            concat!(
                "{\"video_id\": \"a\", \"captions\": [\"A dog runs.\"], \"pos_tags\": [[\"other\", \"noun\", \"verb\"]]}\n",
                "{\"video_id\": \"b\", \"captions\": [\"the cat sleeps\", \"a cat jumps\"]}\n"
            ),
        )
        .unwrap();
        let corpus = load_corpus(&vp, &cp).unwrap();
        assert_eq!(corpus.videos[0].video_id, "a");
        assert_eq!(corpus.videos[0].features[[0, 1]], 2.0);
        assert_eq!(corpus.videos[0].captions[0].tokens, tokenize("a dog runs"));
        assert_eq!(
            corpus.videos[0].captions[0].pos_tags,
            Some(vec![PosTag::Other, PosTag::Noun, PosTag::Verb])
        );
        assert_eq!(corpus.videos[1].captions.len(), 2);
        assert_eq!(corpus.videos[1].planted_concepts, None);
    }

    #[test]
    fn label_corpus_or_invariant() {
        let mut corpus = generate_synthetic_corpus(&small_spec(), 31).unwrap();
        let caps = tagged_captions(&corpus);
        let vocab = build_concept_vocabulary(&caps, 50, &toy_embed()).unwrap();
        label_corpus(&mut corpus, &vocab).unwrap();
        for v in &corpus.videos {
            let labels: Vec<MultiHot> =
                v.captions.iter().map(|c| label_caption(&c.tokens, &vocab)).collect();
            assert_eq!(
                v.video_concept_label,
                video_concept_label(&labels).unwrap()
            );
        }
    }

    #[test]
    fn gt_set_exact_pool() {
        let mut corpus = generate_synthetic_corpus(&small_spec(), 47).unwrap();
        let vocab =
            build_concept_vocabulary(&tagged_captions(&corpus), 50, &toy_embed()).unwrap();
        label_corpus(&mut corpus, &vocab).unwrap();
        let m_prime = corpus.videos[0].captions.len();
        let builder = GtSetBuilder::new(&corpus, &vocab, m_prime, 0).unwrap();
        let set = builder.sample(&corpus.videos[0], 5).unwrap();
        assert_eq!(set.members.len(), m_prime);
        // pool of exactly m_prime: every caption appears exactly once
        let mut seen: Vec<String> = set.members.iter().map(|c| c.tokens.join(" ")).collect();
        seen.sort();
        let mut pool: Vec<String> = corpus.videos[0]
            .captions
            .iter()
            .map(|c| c.tokens.join(" "))
            .collect();
        pool.sort();
        assert_eq!(seen, pool);
    }

    #[test]
    fn gt_set_transversal_of_fixed_clustering() {
        let mut corpus = generate_synthetic_corpus(
            &SyntheticSpec {
                captions_per_video: 12,
                ..small_spec()
            },
            53,
        )
        .unwrap();
        let vocab =
            build_concept_vocabulary(&tagged_captions(&corpus), 50, &toy_embed()).unwrap();
        label_corpus(&mut corpus, &vocab).unwrap();
        let builder = GtSetBuilder::new(&corpus, &vocab, 4, 0).unwrap();
        let video = &corpus.videos[0];
        let assign = &builder.assignments[&video.video_id];
        for epoch in [1u64, 2] {
            let set = builder.sample(video, epoch).unwrap();
            assert_eq!(set.members.len(), 4);
            // each member maps back to a distinct cluster
            let mut clusters_seen = HashSet::new();
            for m in &set.members {
                let idx = video
                    .captions
                    .iter()
                    .position(|c| c.tokens == m.tokens)
                    .unwrap();
                clusters_seen.insert(assign[idx]);
            }
            assert_eq!(clusters_seen.len(), 4);
        }
    }

    #[test]
    fn gt_set_small_pool_pads_with_replacement() {
        let mut corpus = generate_synthetic_corpus(&small_spec(), 61).unwrap();
        let vocab =
            build_concept_vocabulary(&tagged_captions(&corpus), 50, &toy_embed()).unwrap();
        label_corpus(&mut corpus, &vocab).unwrap();
        let m_prime = corpus.videos[0].captions.len() + 3;
        let builder = GtSetBuilder::new(&corpus, &vocab, m_prime, 0).unwrap();
        let set = builder.sample(&corpus.videos[0], 9).unwrap();
        assert_eq!(set.members.len(), m_prime);
    }

    #[test]
    fn predictions_roundtrip() {
        let preds = vec![PredictionSet {
            video_id: "v0".into(),
            captions: vec![PredictedCaption {
                text: "a dog runs".into(),
                concepts: vec!["dog".into(), "runs".into()],
                score: -1.25,
            }],
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.jsonl");
        save_predictions(&p, &preds).unwrap();
        assert_eq!(load_predictions(&p).unwrap(), preds);
    }
}
