//! Autoregressive inference over the full vocabulary.
//!
//! There is no mask argument anywhere in this module: subset restriction is a
//! training-time device only.

use std::cmp::Ordering;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IncrementalState, Parameters};

/// Anything that scores the next token given a growing prefix.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Longest sequence (BOS and EOS included) the model can score.
    fn max_len(&self) -> usize;

    fn start(&self, features: ArrayView1<'_, f64>) -> Result<Self::State>;

    /// Consumes `token` and returns logits for the next one.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Array1<f64>>;
}

impl StepModel for Parameters {
    type State = IncrementalState;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn start(&self, features: ArrayView1<'_, f64>) -> Result<IncrementalState> {
        Parameters::start(self, features)
    }

    fn step(&self, state: &mut IncrementalState, token: u32) -> Result<Array1<f64>> {
        Parameters::step(self, state, token)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub max_len: usize,
    /// Exponent `α` of the length normalizer `log p / len^α` (beam only).
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam { width: 3 },
            max_len: 32,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_len,
            length_penalty: 1.0,
        }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        Self {
            mode: DecodeMode::Beam { width },
            max_len,
            length_penalty: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// `BOS ... EOS`, or `BOS ...` when truncated.
    pub tokens: Vec<u32>,
    pub truncated: bool,
    pub log_prob: f64,
    /// Length-normalized log probability (equals `log_prob` for greedy).
    pub score: f64,
}

fn log_softmax(z: &Array1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

/// Index of the largest logit; the lowest id wins ties.
fn argmax(z: &Array1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = j;
        }
    }
    best
}

fn normalized(log_prob: f64, generated: usize, alpha: f64) -> f64 {
    log_prob / (generated.max(1) as f64).powf(alpha)
}

pub fn decode<M: StepModel>(
    model: &M,
    features: ArrayView1<'_, f64>,
    bos: u32,
    eos: u32,
    config: &DecodeConfig,
) -> Result<Decoded> {
    if config.max_len < 2 || config.max_len > model.max_len() {
        return Err(Error::Config(format!(
            "decode max_len {} must lie in [2, {}]",
            config.max_len,
            model.max_len()
        )));
    }
    match config.mode {
        DecodeMode::Greedy => greedy(model, features, bos, eos, config.max_len),
        DecodeMode::Beam { width } if width >= 1 => beam(model, features, bos, eos, width, config),
        DecodeMode::Beam { .. } => Err(Error::Config("beam width must be at least 1".into())),
    }
}

fn greedy<M: StepModel>(model: &M, features: ArrayView1<'_, f64>, bos: u32, eos: u32, max_len: usize) -> Result<Decoded> {
    let mut state = model.start(features)?;
    let mut tokens = vec![bos];
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let z = model.step(&mut state, *tokens.last().expect("non-empty"))?;
        let next = argmax(&z);
        log_prob += log_softmax(&z)[next];
        tokens.push(next as u32);
        if next as u32 == eos {
            return Ok(Decoded {
                tokens,
                truncated: false,
                log_prob,
                score: log_prob,
            });
        }
    }
    Ok(Decoded {
        tokens,
        truncated: true,
        log_prob,
        score: log_prob,
    })
}

struct Hypothesis<S> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: S,
    logits: Array1<f64>,
}

struct Candidate {
    score: f64,
    logit: f64,
    token: u32,
    parent: usize,
}

fn beam<M: StepModel>(
    model: &M,
    features: ArrayView1<'_, f64>,
    bos: u32,
    eos: u32,
    width: usize,
    config: &DecodeConfig,
) -> Result<Decoded> {
    let mut state = model.start(features)?;
    let logits = model.step(&mut state, bos)?;
    let mut alive = vec![Hypothesis {
        tokens: vec![bos],
        log_prob: 0.0,
        state,
        logits,
    }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut cut: Vec<(Vec<u32>, f64)> = Vec::new();
    while !alive.is_empty() && finished.len() < width {
        let mut candidates = Vec::with_capacity(alive.len() * model.vocab_size());
        for (parent, h) in alive.iter().enumerate() {
            let lp = log_softmax(&h.logits);
            candidates.extend(lp.iter().enumerate().map(|(j, &l)| Candidate {
                score: h.log_prob + l,
                logit: h.logits[j],
                token: j as u32,
                parent,
            }));
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(b.logit.partial_cmp(&a.logit).unwrap_or(Ordering::Equal))
                .then(a.token.cmp(&b.token))
                .then(a.parent.cmp(&b.parent))
        });
        let mut next = Vec::with_capacity(width);
        for c in candidates.into_iter().take(width) {
            let parent = &alive[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            if c.token == eos {
                finished.push((tokens, c.score));
            } else if tokens.len() >= config.max_len {
                cut.push((tokens, c.score));
            } else {
                let mut state = parent.state.clone();
                let logits = model.step(&mut state, c.token)?;
                next.push(Hypothesis {
                    tokens,
                    log_prob: c.score,
                    state,
                    logits,
                });
            }
        }
        alive = next;
    }
    let pick = |pool: &[(Vec<u32>, f64)]| {
        pool.iter()
            .map(|(t, lp)| (t, *lp, normalized(*lp, t.len() - 1, config.length_penalty)))
            .max_by(|a, b| {
                a.2.partial_cmp(&b.2)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| b.0.cmp(a.0))
            })
            .map(|(t, lp, s)| (t.clone(), lp, s))
    };
    if let Some((tokens, log_prob, score)) = pick(&finished) {
        return Ok(Decoded {
            tokens,
            truncated: false,
            log_prob,
            score,
        });
    }
    // Every surviving hypothesis hit the length cap; `alive` is empty here.
    let (tokens, log_prob, score) = pick(&cut).expect("beam keeps at least one hypothesis");
    Ok(Decoded {
        tokens,
        truncated: true,
        log_prob,
        score,
    })
}
