//! Relevance metrics (BLEU@4, ROUGE-L, CIDEr), diversity metrics (Div-n,
//! m-BLEU, self-CIDEr), oracle selection, and consensus reranking.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PredictionSet};
use crate::error::{Error, Result};

pub const BLEU_EPS: f64 = 1e-9;
pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

type Ngram = String;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram, u64> {
    let mut out = HashMap::new();
    if tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.join(" ")).or_insert(0) += 1;
    }
    out
}

/// Per-n-gram document frequencies over the reference corpus. One document
/// per video (its full reference set).
#[derive(Clone, Debug, Default)]
pub struct CorpusStats {
    /// df[n-1][ngram] = number of documents containing the n-gram.
    pub doc_freq: [HashMap<Ngram, u64>; 4],
    pub num_docs: usize,
}

impl CorpusStats {
    pub fn from_reference_sets(sets: &[Vec<Vec<String>>]) -> Self {
        let mut stats = CorpusStats {
            num_docs: sets.len(),
            ..Default::default()
        };
        for doc in sets {
            for n in 1..=4 {
                let mut seen: HashMap<Ngram, bool> = HashMap::new();
                for caption in doc {
                    for g in ngram_counts(caption, n).into_keys() {
                        seen.entry(g).or_insert(true);
                    }
                }
                for g in seen.into_keys() {
                    *stats.doc_freq[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        stats
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        let sets: Vec<Vec<Vec<String>>> = corpus
            .videos
            .iter()
            .map(|v| v.captions.iter().map(|c| c.tokens.clone()).collect())
            .collect();
        Self::from_reference_sets(&sets)
    }

    fn idf(&self, n: usize, gram: &str) -> f64 {
        let df = self.doc_freq[n - 1].get(gram).copied().unwrap_or(0).max(1);
        ((self.num_docs.max(1) as f64) / df as f64).ln()
    }
}

/// BLEU@4 with brevity penalty and add-epsilon smoothing for zero counts.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> f64 {
    assert!(!references.is_empty());
    if candidate.is_empty() {
        return 0.0;
    }
    let c_len = candidate.len();
    // closest reference length, ties toward the shorter
    let r_len = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| {
            (
                (l as i64 - c_len as i64).abs(),
                l,
            )
        })
        .unwrap();
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let total: u64 = cand.values().sum();
        if total == 0 {
            // candidate shorter than n: treat as fully smoothed
            log_sum += 0.25 * BLEU_EPS.ln();
            continue;
        }
        let mut max_ref: HashMap<Ngram, u64> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                if c > *e {
                    *e = c;
                }
            }
        }
        let matched: u64 = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            BLEU_EPS
        } else {
            matched as f64 / total as f64
        };
        log_sum += 0.25 * p.ln();
    }
    bp * log_sum.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS-based F-measure (beta = 1.2), max over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    assert!(!references.is_empty());
    if candidate.is_empty() {
        return 0.0;
    }
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let prec = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + beta2) * prec * rec / (rec + beta2 * prec)
        })
        .fold(0.0, f64::max)
}

fn tfidf_vector(tokens: &[String], n: usize, stats: &CorpusStats) -> HashMap<Ngram, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let w = c as f64 * stats.idf(n, &g);
            (g, w)
        })
        .collect()
}

fn cosine(a: &HashMap<Ngram, f64>, b: &HashMap<Ngram, f64>) -> f64 {
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    dot / (na * nb)
}

/// CIDEr: mean over n = 1..4 of the length-penalized cosine similarity of
/// tf-idf n-gram vectors, averaged over references, scaled by 10.
pub fn cider(candidate: &[String], references: &[Vec<String>], stats: &CorpusStats) -> f64 {
    assert!(!references.is_empty());
    if candidate.is_empty() {
        return 0.0;
    }
    let mut score = 0.0;
    for n in 1..=4 {
        let cand_vec = tfidf_vector(candidate, n, stats);
        let mut sim = 0.0;
        for r in references {
            let ref_vec = tfidf_vector(r, n, stats);
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            sim += penalty * cosine(&cand_vec, &ref_vec);
        }
        score += sim / references.len() as f64;
    }
    10.0 * score / 4.0
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct RelevanceScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

pub fn relevance_scores(
    candidate: &[String],
    references: &[Vec<String>],
    stats: &CorpusStats,
) -> Result<RelevanceScores> {
    if references.is_empty() {
        return Err(Error::Data("relevance_scores: no references".into()));
    }
    if candidate.is_empty() {
        log::warn!("empty candidate caption; all relevance scores are zero");
        return Ok(RelevanceScores::default());
    }
    Ok(RelevanceScores {
        bleu4: bleu4(candidate, references),
        rouge_l: rouge_l(candidate, references),
        cider: cider(candidate, references, stats),
    })
}

/// Per-metric maximum over the prediction set against the full reference list.
pub fn oracle_scores(
    predictions: &[Vec<String>],
    references: &[Vec<String>],
    stats: &CorpusStats,
) -> Result<RelevanceScores> {
    if predictions.is_empty() {
        return Err(Error::Data("oracle_scores: empty prediction set".into()));
    }
    let mut best = RelevanceScores::default();
    for p in predictions {
        let s = relevance_scores(p, references, stats)?;
        best.bleu4 = best.bleu4.max(s.bleu4);
        best.rouge_l = best.rouge_l.max(s.rouge_l);
        best.cider = best.cider.max(s.cider);
    }
    Ok(best)
}

/// Distinct n-grams over total n-gram tokens across the set.
pub fn div_n(captions: &[Vec<String>], n: usize) -> f64 {
    assert!(n == 1 || n == 2, "Div-n defined for n in {{1, 2}}");
    let mut distinct: HashMap<Ngram, ()> = HashMap::new();
    let mut total = 0u64;
    for c in captions {
        if c.len() < n {
            log::warn!("div_n: caption shorter than {} skipped", n);
            continue;
        }
        for (g, cnt) in ngram_counts(c, n) {
            total += cnt;
            distinct.entry(g).or_insert(());
        }
    }
    if total == 0 {
        return 1.0;
    }
    distinct.len() as f64 / total as f64
}

/// Mean BLEU@4 of each caption against the rest of the set. Lower means
/// more diverse.
pub fn m_bleu(captions: &[Vec<String>]) -> Result<f64> {
    if captions.len() < 2 {
        return Err(Error::Data("m_bleu needs at least 2 captions".into()));
    }
    let mut total = 0.0;
    for (j, c) in captions.iter().enumerate() {
        let rest: Vec<Vec<String>> = captions
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .map(|(_, r)| r.clone())
            .collect();
        total += bleu4(c, &rest);
    }
    Ok(total / captions.len() as f64)
}

/// Diversity from the eigenvalue spectrum of the pairwise-CIDEr kernel.
/// Returns (score in [0, 1], raw eigenvalue ratio r).
pub fn self_cider(captions: &[Vec<String>], stats: &CorpusStats) -> Result<(f64, f64)> {
    let m = captions.len();
    if m < 2 {
        return Err(Error::Data("self_cider needs at least 2 captions".into()));
    }
    let mut k = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            k[(a, b)] = cider(&captions[a], &[captions[b].clone()], stats);
        }
    }
    // normalize to unit diagonal, then symmetrize
    let mut kn = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            let denom = (k[(a, a)] * k[(b, b)]).sqrt();
            kn[(a, b)] = if a == b {
                1.0
            } else if denom > 0.0 {
                k[(a, b)] / denom
            } else {
                0.0
            };
        }
    }
    let sym = (&kn + kn.transpose()) * 0.5;
    let eigen = sym.symmetric_eigenvalues();
    let clamped: Vec<f64> = eigen.iter().map(|&l| l.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    let max = clamped.iter().cloned().fold(0.0, f64::max);
    if sum <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let r = max / sum;
    let score = (-r.ln() / (m as f64).ln()).clamp(0.0, 1.0);
    // avoid serializing -0.0 when r == 1
    Ok((score + 0.0, r))
}

/// Rerank a prediction set by CIDEr against consensus references; returns
/// the reordered caption indices and the mean CIDEr of the top_k.
pub fn consensus_rerank(
    predictions: &[Vec<String>],
    consensus_refs: &[Vec<String>],
    stats: &CorpusStats,
    top_k: usize,
) -> Result<(Vec<usize>, f64)> {
    if consensus_refs.is_empty() {
        return Err(Error::Data("consensus_rerank: no consensus references".into()));
    }
    if top_k > predictions.len() {
        return Err(Error::Config(format!(
            "top_k {} exceeds set size {}",
            top_k,
            predictions.len()
        )));
    }
    let scores: Vec<f64> = predictions
        .iter()
        .map(|p| cider(p, consensus_refs, stats))
        .collect();
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    // stable sort keeps original order on ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mean = order.iter().take(top_k).map(|&i| scores[i]).sum::<f64>() / top_k as f64;
    Ok((order, mean))
}

/// Rank training videos by cosine similarity of concept vectors against the
/// query vector, returning all captions of the top matches.
pub fn retrieve_consensus(
    query: &[f64],
    training_corpus: &Corpus,
    top_videos: usize,
) -> Vec<Vec<String>> {
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na <= 0.0 || nb <= 0.0 {
            return 0.0;
        }
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    };
    let mut ranked: Vec<(usize, f64)> = training_corpus
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| (i, cos(query, &v.video_concept_label)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
        .iter()
        .take(top_videos)
        .flat_map(|&(i, _)| {
            training_corpus.videos[i]
                .captions
                .iter()
                .map(|c| c.tokens.clone())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub oracle_bleu4: f64,
    pub oracle_rouge_l: f64,
    pub oracle_cider: f64,
    pub div1: f64,
    pub div2: f64,
    pub m_bleu: f64,
    pub self_cider: f64,
    pub self_cider_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus_cider: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub oracle_bleu4: f64,
    pub oracle_rouge_l: f64,
    pub oracle_cider: f64,
    pub div1: f64,
    pub div2: f64,
    pub m_bleu: f64,
    pub self_cider: f64,
    /// METEOR requires external linguistic resources and is not computed.
    pub meteor: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_video: Vec<VideoMetrics>,
    pub mean: MeanMetrics,
    pub config: BTreeMap<String, String>,
}

/// Score prediction sets against the reference corpus.
pub fn evaluate(
    predictions: &[PredictionSet],
    references: &Corpus,
    config: BTreeMap<String, String>,
) -> Result<MetricReport> {
    let stats = CorpusStats::from_corpus(references);
    let by_id: HashMap<&str, &crate::corpus::VideoRecord> = references
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v))
        .collect();
    let mut per_video = Vec::with_capacity(predictions.len());
    for pred in predictions {
        let video = by_id.get(pred.video_id.as_str()).ok_or_else(|| {
            Error::Data(format!("prediction for unknown video {}", pred.video_id))
        })?;
        let refs: Vec<Vec<String>> = video.captions.iter().map(|c| c.tokens.clone()).collect();
        let cands: Vec<Vec<String>> = pred
            .captions
            .iter()
            .map(|c| crate::corpus::tokenize(&c.text))
            .collect();
        let oracle = oracle_scores(&cands, &refs, &stats)?;
        let (sc, ratio) = if cands.len() >= 2 {
            self_cider(&cands, &stats)?
        } else {
            (0.0, 1.0)
        };
        let mb = if cands.len() >= 2 { m_bleu(&cands)? } else { 1.0 };
        per_video.push(VideoMetrics {
            video_id: pred.video_id.clone(),
            oracle_bleu4: oracle.bleu4,
            oracle_rouge_l: oracle.rouge_l,
            oracle_cider: oracle.cider,
            div1: div_n(&cands, 1),
            div2: div_n(&cands, 2),
            m_bleu: mb,
            self_cider: sc,
            self_cider_ratio: ratio,
            consensus_cider: None,
        });
    }
    let n = per_video.len().max(1) as f64;
    let mean = MeanMetrics {
        oracle_bleu4: per_video.iter().map(|v| v.oracle_bleu4).sum::<f64>() / n,
        oracle_rouge_l: per_video.iter().map(|v| v.oracle_rouge_l).sum::<f64>() / n,
        oracle_cider: per_video.iter().map(|v| v.oracle_cider).sum::<f64>() / n,
        div1: per_video.iter().map(|v| v.div1).sum::<f64>() / n,
        div2: per_video.iter().map(|v| v.div2).sum::<f64>() / n,
        m_bleu: per_video.iter().map(|v| v.m_bleu).sum::<f64>() / n,
        self_cider: per_video.iter().map(|v| v.self_cider).sum::<f64>() / n,
        meteor: "n/a".into(),
    };
    Ok(MetricReport {
        per_video,
        mean,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn stats_from(captions: &[&str]) -> CorpusStats {
        let sets: Vec<Vec<Vec<String>>> = captions.iter().map(|c| vec![toks(c)]).collect();
        CorpusStats::from_reference_sets(&sets)
    }

    #[test]
    fn exact_match_is_maximal() {
        let c = toks("a dog runs in the park");
        let stats = stats_from(&["a dog runs in the park", "a cat sleeps on the mat"]);
        let s = relevance_scores(&c, &[c.clone()], &stats).unwrap();
        assert!((s.bleu4 - 1.0).abs() < 1e-12);
        assert!((s.rouge_l - 1.0).abs() < 1e-12);
        assert!((s.cider - 10.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_vocabulary_near_zero() {
        let c = toks("zebra gallops across savanna today");
        let r = toks("a dog runs in the park");
        let stats = stats_from(&["a dog runs in the park"]);
        let s = relevance_scores(&c, &[r], &stats).unwrap();
        assert!(s.bleu4 < 1e-6);
        assert!(s.cider.abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_all_zeros() {
        let stats = stats_from(&["a dog runs"]);
        let s = relevance_scores(&[], &[toks("a dog runs")], &stats).unwrap();
        assert_eq!(s, RelevanceScores::default());
    }

    #[test]
    fn oracle_max_geq_mean_and_exact_copy() {
        let refs = vec![toks("a dog runs in the park"), toks("the dog is running")];
        let stats = stats_from(&["a dog runs in the park", "the dog is running"]);
        let preds = vec![
            toks("a dog runs in the park"),
            toks("a cat sits quietly here"),
        ];
        let oracle = oracle_scores(&preds, &refs, &stats).unwrap();
        assert!((oracle.bleu4 - 1.0).abs() < 1e-12);
        for p in &preds {
            let s = relevance_scores(p, &refs, &stats).unwrap();
            assert!(oracle.bleu4 >= s.bleu4);
            assert!(oracle.rouge_l >= s.rouge_l);
            assert!(oracle.cider >= s.cider);
        }
    }

    #[test]
    fn div_n_hand_counts() {
        let two_same = vec![toks("a dog runs"), toks("a dog runs")];
        assert!((div_n(&two_same, 1) - 0.5).abs() < 1e-12);
        let disjoint = vec![toks("a dog runs"), toks("the cat sleeps")];
        assert!((div_n(&disjoint, 1) - 1.0).abs() < 1e-12);
        let single = vec![toks("red green blue")];
        assert!((div_n(&single, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn m_bleu_extremes() {
        let same = vec![toks("a dog runs in the park"); 3];
        assert!((m_bleu(&same).unwrap() - 1.0).abs() < 1e-12);
        let disjoint = vec![
            toks("alpha beta gamma delta epsilon"),
            toks("one two three four five"),
            toks("red green blue yellow purple"),
        ];
        assert!(m_bleu(&disjoint).unwrap() <= 1e-6);
        assert!(m_bleu(&[toks("a dog")]).is_err());
    }

    #[test]
    fn self_cider_extremes() {
        let stats = stats_from(&[
            "a dog runs in the park",
            "one two three four five",
            "red green blue yellow purple",
            "alpha beta gamma delta epsilon",
        ]);
        for m in [2usize, 5, 20] {
            let same = vec![toks("a dog runs in the park"); m];
            let (score, r) = self_cider(&same, &stats).unwrap();
            assert!(score.abs() < 1e-9, "identical set, M = {}: {}", m, score);
            assert!((r - 1.0).abs() < 1e-9);
        }
        let disjoint = vec![
            toks("alpha beta gamma delta epsilon"),
            toks("one two three four five"),
            toks("red green blue yellow purple"),
        ];
        let (score, r) = self_cider(&disjoint, &stats).unwrap();
        assert!((score - 1.0).abs() < 1e-6, "disjoint: {}", score);
        assert!((r - 1.0 / 3.0).abs() < 1e-9);
        assert!(self_cider(&[toks("a dog")], &stats).is_err());
    }

    #[test]
    fn self_cider_kernel_properties() {
        // permutation invariance
        let stats = stats_from(&["a dog runs", "a cat sleeps", "a bird flies far"]);
        let caps = vec![
            toks("a dog runs"),
            toks("a cat sleeps"),
            toks("a dog runs fast"),
        ];
        let (a, _) = self_cider(&caps, &stats).unwrap();
        let mut rev = caps.clone();
        rev.reverse();
        let (b, _) = self_cider(&rev, &stats).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn consensus_rerank_behavior() {
        let stats = stats_from(&["a dog runs in the park", "a cat sleeps"]);
        let refs = vec![toks("a dog runs in the park")];
        let preds = vec![
            toks("unrelated words entirely here now"),
            toks("a dog runs in the park"),
            toks("a dog runs in a park"),
        ];
        let (order, mean) = consensus_rerank(&preds, &refs, &stats, 2).unwrap();
        assert_eq!(order[0], 1);
        assert_eq!(order[1], 2);
        assert!(mean > 0.0);
        assert!(consensus_rerank(&preds, &refs, &stats, 4).is_err());
    }

    #[test]
    fn retrieve_consensus_self_first() {
        use crate::corpus::{CaptionRecord, VideoRecord};
        let mut corpus = Corpus::default();
        for (i, label) in [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]
            .into_iter()
            .enumerate()
        {
            corpus.videos.push(VideoRecord {
                video_id: format!("v{}", i),
                features: ndarray::Array2::zeros((1, 2)),
                captions: vec![CaptionRecord {
                    tokens: toks(&format!("caption number {}", i)),
                    concept_label: vec![],
                    pos_tags: None,
                }],
                video_concept_label: label,
                planted_concepts: None,
            });
        }
        let got = retrieve_consensus(&[0.0, 1.0, 0.0], &corpus, 1);
        assert_eq!(got, vec![toks("caption number 1")]);
        // top_videos = corpus size returns everything
        let all = retrieve_consensus(&[1.0, 0.0, 0.0], &corpus, 3);
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let stats = stats_from(&["a dog runs", "a cat sleeps", "the bird flies"]);
        let caps = vec![toks("a dog runs"), toks("a cat sleeps"), toks("the bird flies")];
        let mut rev = caps.clone();
        rev.reverse();
        assert!((div_n(&caps, 1) - div_n(&rev, 1)).abs() < 1e-12);
        assert!((div_n(&caps, 2) - div_n(&rev, 2)).abs() < 1e-12);
        assert!((m_bleu(&caps).unwrap() - m_bleu(&rev).unwrap()).abs() < 1e-12);
        let refs = vec![toks("a dog runs"), toks("a cat sleeps")];
        let mut refs_rev = refs.clone();
        refs_rev.reverse();
        let a = oracle_scores(&caps, &refs, &stats).unwrap();
        let b = oracle_scores(&rev, &refs_rev, &stats).unwrap();
        assert!((a.cider - b.cider).abs() < 1e-12);
    }
}
