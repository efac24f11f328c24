//! Descriptiveness, accuracy and fluency metrics with oracle backends.
//!
//! * Caption length and lexical diversity count every non-special token.
//! * Self-retrieval ranks pool scenes by the cosine between a caption's bag of
//!   concepts and each scene's feature vector.
//! * Oracle precision is the fraction of generated concept words whose concept
//!   is present in the true scene.
//! * The perplexity proxy is an add-one bigram model fit on held-out
//!   ground-truth captions.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptInventory, ConceptKind, Scene, Vocabulary};
use crate::decoder::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::Parameters;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub scene_id: u64,
    pub features: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalPool {
    pub entries: Vec<PoolEntry>,
    /// Near-duplicates of real entries that differ in exactly one attribute.
    pub hard_distractors: Vec<PoolEntry>,
}

impl RetrievalPool {
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Self {
        Self {
            entries: scenes
                .into_iter()
                .map(|s| PoolEntry {
                    scene_id: s.scene_id,
                    features: s.features.clone(),
                })
                .collect(),
            hard_distractors: Vec::new(),
        }
    }

    /// Adds `per_entry` distractors per real entry, each swapping one present
    /// adjective for an absent one.
    pub fn with_hard_distractors<R: Rng + ?Sized>(
        mut self,
        inventory: &ConceptInventory,
        per_entry: usize,
        rng: &mut R,
    ) -> Self {
        let adjectives: Vec<usize> = (0..inventory.len())
            .filter(|&i| inventory.kind(i) == Some(ConceptKind::Adjective))
            .collect();
        let mut next_id = self
            .entries
            .iter()
            .map(|e| e.scene_id)
            .chain(self.hard_distractors.iter().map(|e| e.scene_id))
            .max()
            .map_or(0, |m| m + 1);
        let mut extra = Vec::new();
        for e in &self.entries {
            let present: Vec<usize> = adjectives.iter().copied().filter(|&i| e.features[i] == 1).collect();
            let absent: Vec<usize> = adjectives.iter().copied().filter(|&i| e.features[i] == 0).collect();
            for _ in 0..per_entry {
                let (Some(&drop), Some(&add)) = (present.choose(rng), absent.choose(rng)) else {
                    break;
                };
                let mut features = e.features.clone();
                features[drop] = 0;
                features[add] = 1;
                extra.push(PoolEntry {
                    scene_id: next_id,
                    features,
                });
                next_id += 1;
            }
        }
        self.hard_distractors.extend(extra);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len() + self.hard_distractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn all(&self) -> impl Iterator<Item = &PoolEntry> {
        self.entries.iter().chain(&self.hard_distractors)
    }
}

/// Token-id → concept-index lookup for a vocabulary.
#[derive(Clone, Debug)]
pub struct ConceptMap {
    concept_of: Vec<Option<usize>>,
    n_concepts: usize,
}

impl ConceptMap {
    pub fn new(inventory: &ConceptInventory, vocab: &Vocabulary) -> Self {
        Self {
            concept_of: inventory.concept_of_tokens(vocab),
            n_concepts: inventory.len(),
        }
    }

    pub fn concept(&self, id: u32) -> Option<usize> {
        self.concept_of.get(id as usize).copied().flatten()
    }

    pub fn bag(&self, caption: &[u32]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_concepts];
        for &id in caption {
            if let Some(c) = self.concept(id) {
                v[c] += 1.0;
            }
        }
        v
    }
}

fn cosine(bag: &[f64], features: &[u8]) -> f64 {
    let dot: f64 = bag.iter().zip(features).map(|(a, &b)| a * b as f64).sum();
    let na = bag.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = (features.iter().filter(|&&b| b != 0).count() as f64).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub r_at_1: f64,
    pub r_at_5: f64,
    /// 0-based rank of each caption's true scene.
    pub ranks: Vec<usize>,
}

/// Rank of the true scene counts every other entry scoring at least as high,
/// so ties never favour the true scene.
pub fn self_retrieval(
    captions: &[(u64, Vec<u32>)],
    pool: &RetrievalPool,
    concepts: &ConceptMap,
) -> Result<RetrievalResult> {
    let mut ranks = Vec::with_capacity(captions.len());
    for (scene_id, caption) in captions {
        let truth = pool
            .entries
            .iter()
            .find(|e| e.scene_id == *scene_id)
            .ok_or_else(|| Error::Config(format!("scene {scene_id} not in retrieval pool")))?;
        let bag = concepts.bag(caption);
        let target = cosine(&bag, &truth.features);
        let rank = pool
            .all()
            .filter(|e| e.scene_id != *scene_id && cosine(&bag, &e.features) >= target)
            .count();
        ranks.push(rank);
    }
    let n = ranks.len().max(1) as f64;
    let recall = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n;
    Ok(RetrievalResult {
        r_at_1: recall(1),
        r_at_5: recall(5),
        ranks,
    })
}

/// Add-one smoothed bigram model over token ids, including BOS/EOS transitions.
#[derive(Clone, Debug)]
pub struct BigramModel {
    vocab_size: usize,
    pairs: HashMap<(u32, u32), usize>,
    context: HashMap<u32, usize>,
}

impl BigramModel {
    pub fn fit<'a>(captions: impl IntoIterator<Item = &'a [u32]>, vocab_size: usize) -> Self {
        let mut pairs = HashMap::new();
        let mut context = HashMap::new();
        for c in captions {
            for w in c.windows(2) {
                *pairs.entry((w[0], w[1])).or_insert(0) += 1;
                *context.entry(w[0]).or_insert(0) += 1;
            }
        }
        Self {
            vocab_size,
            pairs,
            context,
        }
    }

    pub fn log_prob(&self, prev: u32, next: u32) -> f64 {
        let num = self.pairs.get(&(prev, next)).copied().unwrap_or(0) as f64 + 1.0;
        let den = self.context.get(&prev).copied().unwrap_or(0) as f64 + self.vocab_size as f64;
        (num / den).ln()
    }

    pub fn perplexity<'a>(&self, captions: impl IntoIterator<Item = &'a [u32]>) -> f64 {
        let (mut nll, mut n) = (0.0, 0usize);
        for c in captions {
            for w in c.windows(2) {
                nll -= self.log_prob(w[0], w[1]);
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            (nll / n as f64).exp()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_caption_length: f64,
    pub lexical_diversity: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub oracle_precision: f64,
    pub ppl_proxy: f64,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 6] = [
        "mean_caption_length",
        "lexical_diversity",
        "r_at_1",
        "r_at_5",
        "oracle_precision",
        "ppl_proxy",
    ];

    pub fn csv_row(&self) -> [String; 6] {
        [
            self.mean_caption_length.to_string(),
            self.lexical_diversity.to_string(),
            self.r_at_1.to_string(),
            self.r_at_5.to_string(),
            self.oracle_precision.to_string(),
            self.ppl_proxy.to_string(),
        ]
    }
}

fn words<'a>(caption: &'a [u32], vocab: &'a Vocabulary) -> impl Iterator<Item = u32> + 'a {
    caption.iter().copied().filter(|&id| !vocab.is_special(id))
}

pub fn mean_caption_length(captions: &[Vec<u32>], vocab: &Vocabulary) -> f64 {
    if captions.is_empty() {
        return 0.0;
    }
    captions.iter().map(|c| words(c, vocab).count()).sum::<usize>() as f64 / captions.len() as f64
}

/// Distinct non-special tokens across all captions.
pub fn lexical_diversity(captions: &[Vec<u32>], vocab: &Vocabulary) -> usize {
    captions
        .iter()
        .flat_map(|c| words(c, vocab))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Micro-averaged fraction of concept words present in their caption's scene.
/// Zero when no caption contains a concept word.
pub fn oracle_precision(captions: &[(Vec<u32>, &[u8])], concepts: &ConceptMap) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (caption, features) in captions {
        for &id in caption {
            if let Some(c) = concepts.concept(id) {
                total += 1;
                hit += usize::from(features[c] == 1);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Everything needed to score captions against scenes.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub vocab: Vocabulary,
    pub concepts: ConceptMap,
    pub bigram: BigramModel,
}

impl EvalContext {
    /// `reference` is the held-out ground-truth caption set for the bigram proxy.
    pub fn new<'a>(
        inventory: &ConceptInventory,
        vocab: &Vocabulary,
        reference: impl IntoIterator<Item = &'a [u32]>,
    ) -> Self {
        Self {
            vocab: vocab.clone(),
            concepts: ConceptMap::new(inventory, vocab),
            bigram: BigramModel::fit(reference, vocab.len()),
        }
    }

    /// Maps rare aliases back to the token they stand for.
    pub fn canonical(&self, caption: &[u32]) -> Vec<u32> {
        caption
            .iter()
            .map(|&id| {
                self.vocab
                    .rare_alias()
                    .iter()
                    .find(|(_, &alias)| alias == id)
                    .map_or(id, |(&base, _)| base)
            })
            .collect()
    }

    /// Scores one caption per pool scene.
    pub fn caption_report(&self, captions: &[(u64, Vec<u32>)], pool: &RetrievalPool) -> Result<EvalReport> {
        let captions: Vec<(u64, Vec<u32>)> = captions.iter().map(|(id, c)| (*id, self.canonical(c))).collect();
        let captions = captions.as_slice();
        let retrieval = self_retrieval(captions, pool, &self.concepts)?;
        let texts: Vec<Vec<u32>> = captions.iter().map(|(_, c)| c.clone()).collect();
        let with_features: Vec<(Vec<u32>, &[u8])> = captions
            .iter()
            .map(|(id, c)| {
                let f = pool
                    .entries
                    .iter()
                    .find(|e| e.scene_id == *id)
                    .map(|e| e.features.as_slice())
                    .expect("checked by self_retrieval");
                (c.clone(), f)
            })
            .collect();
        Ok(EvalReport {
            mean_caption_length: mean_caption_length(&texts, &self.vocab),
            lexical_diversity: lexical_diversity(&texts, &self.vocab),
            r_at_1: retrieval.r_at_1,
            r_at_5: retrieval.r_at_5,
            oracle_precision: oracle_precision(&with_features, &self.concepts),
            ppl_proxy: self.bigram.perplexity(texts.iter().map(Vec::as_slice)),
        })
    }
}

/// Decodes one caption for every real pool entry.
pub fn generate_captions(
    params: &Parameters,
    pool: &RetrievalPool,
    vocab: &Vocabulary,
    decode_config: &DecodeConfig,
) -> Result<Vec<(u64, Vec<u32>)>> {
    pool.entries
        .iter()
        .map(|e| {
            let f = ndarray::Array1::from_iter(e.features.iter().map(|&b| b as f64));
            let d = decode(params, f.view(), vocab.bos(), vocab.eos(), decode_config)?;
            Ok((e.scene_id, d.tokens))
        })
        .collect()
}

/// Generates captions for every real pool entry and scores them.
pub fn descriptiveness_report(
    params: &Parameters,
    pool: &RetrievalPool,
    decode_config: &DecodeConfig,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let captions = generate_captions(params, pool, &ctx.vocab, decode_config)?;
    ctx.caption_report(&captions, pool)
}

pub const VIZ_SCHEMA: &str = "viz_v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub id: u32,
    pub token: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionViz {
    pub position: usize,
    pub label: u32,
    pub label_token: String,
    pub admitted_count: usize,
    pub mle_loss: f64,
    pub smile_loss: f64,
    pub top_full: Vec<TokenProb>,
    pub top_admitted: Vec<TokenProb>,
}

/// Token-level predictive distribution and penalization for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenViz {
    pub schema: String,
    pub positions: Vec<PositionViz>,
}

fn softmax_over(z: &[f64], admit: &[bool]) -> Vec<f64> {
    let m = z
        .iter()
        .zip(admit)
        .filter(|(_, &a)| a)
        .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
    let e: Vec<f64> = z
        .iter()
        .zip(admit)
        .map(|(&v, &a)| if a { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn top_k(probs: &[f64], admit: &[bool], k: usize, vocab: &Vocabulary) -> Vec<TokenProb> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&j| admit[j]).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|j| TokenProb {
            id: j as u32,
            token: vocab.token(j as u32).unwrap_or("<?>").to_string(),
            prob: probs[j],
        })
        .collect()
}

/// `logits` and `admit` are `positions × vocab` for a single sequence whose
/// labels are `labels` (PAD positions are skipped).
pub fn export_token_viz(
    logits: ArrayView2<'_, f64>,
    labels: &[u32],
    admit: ArrayView2<'_, bool>,
    vocab: &Vocabulary,
) -> Result<TokenViz> {
    if logits.dim() != admit.dim() || logits.nrows() < labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?}, mask {:?}, {} labels",
            logits.shape(),
            admit.shape(),
            labels.len()
        )));
    }
    let v = logits.ncols();
    let everything = vec![true; v];
    let mut positions = Vec::with_capacity(labels.len());
    for (t, &label) in labels.iter().enumerate() {
        if label == vocab.pad() {
            continue;
        }
        let z: Vec<f64> = logits.row(t).to_vec();
        let a: Vec<bool> = admit.row(t).to_vec();
        let full = softmax_over(&z, &everything);
        let sub = softmax_over(&z, &a);
        let l = label as usize;
        positions.push(PositionViz {
            position: t,
            label,
            label_token: vocab.token(label).unwrap_or("<?>").to_string(),
            admitted_count: a.iter().filter(|&&x| x).count(),
            mle_loss: -full[l].ln(),
            smile_loss: if a[l] { -sub[l].ln() } else { f64::INFINITY },
            top_full: top_k(&full, &everything, 5, vocab),
            top_admitted: top_k(&sub, &a, 5, vocab),
        });
    }
    Ok(TokenViz {
        schema: VIZ_SCHEMA.to_string(),
        positions,
    })
}

/// Convenience for a one-row admission mask built from a label set.
pub fn admit_rows(positions: usize, vocab_size: usize, admitted: &[Vec<u32>]) -> Array2<bool> {
    let mut a = Array2::from_elem((positions, vocab_size), false);
    for (t, ids) in admitted.iter().enumerate() {
        for &id in ids {
            a[[t, id as usize]] = true;
        }
    }
    a
}
