//! Token-level training objectives as pure functions of
//! `(logits, labels, mask)` returning the loss and its gradient on the logits.
//!
//! Every loss is a cross-entropy whose softmax normalizer runs over the
//! admitted tokens of a [`SubsetMask`]. The full mask gives ordinary maximum
//! likelihood; the per-sequence label set gives the subset-restricted variant
//! in which tokens outside the set neither receive gradient nor take
//! probability from the label.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const DEFAULT_RANDOM_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SubsetStrategy {
    /// Whole vocabulary.
    Full,
    /// Unique tokens of the sequence's labels.
    Smile,
    /// Complement of the label set, plus the current label.
    Reverse,
    /// `k` uniform draws from the vocabulary per sequence, plus the current label.
    Random { k: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstToken {
    /// Position 0 is treated like every other position.
    None,
    /// Position 0 admits the full vocabulary.
    #[default]
    Mle,
    /// Position 0's label is replaced by its rare alias before masking.
    Shift,
}

impl FirstToken {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mle" => Ok(Self::Mle),
            "shift" => Ok(Self::Shift),
            other => Err(Error::Config(format!(
                "unknown first-token strategy {other:?} (expected none, mle or shift)"
            ))),
        }
    }
}

/// Per-sequence, per-position admission mask over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetMask {
    pub admit: Array3<bool>,
    pub strategy: SubsetStrategy,
    pub first_token: FirstToken,
    /// Tokens drawn for each sequence under [`SubsetStrategy::Random`].
    pub random_draws: Option<Vec<Vec<u32>>>,
}

impl SubsetMask {
    pub fn full(batch: usize, positions: usize, vocab_size: usize) -> Self {
        Self {
            admit: Array3::from_elem((batch, positions, vocab_size), true),
            strategy: SubsetStrategy::Full,
            first_token: FirstToken::None,
            random_draws: None,
        }
    }

    pub fn admitted(&self, b: usize, t: usize) -> impl Iterator<Item = u32> + '_ {
        self.admit
            .slice(ndarray::s![b, t, ..])
            .into_iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| j as u32)
            .collect::<Vec<_>>()
            .into_iter()
    }
}

/// Pads ragged label sequences into a `batch × width` array.
pub fn pad_labels(labels: &[Vec<u32>], pad: u32) -> Array2<u32> {
    let width = labels.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Array2::from_elem((labels.len(), width), pad);
    for (b, seq) in labels.iter().enumerate() {
        for (t, &id) in seq.iter().enumerate() {
            out[[b, t]] = id;
        }
    }
    out
}

/// Builds the admission mask for a padded label batch. PAD positions admit
/// everything; they are excluded from every loss.
pub fn build_mask<R: Rng + ?Sized>(
    labels: ArrayView2<'_, u32>,
    vocab_size: usize,
    pad: u32,
    strategy: SubsetStrategy,
    first_token: FirstToken,
    rng: &mut R,
) -> SubsetMask {
    let (batch, width) = labels.dim();
    let mut admit = Array3::from_elem((batch, width, vocab_size), true);
    let mut draws = Vec::new();
    for b in 0..batch {
        let row = labels.row(b);
        let present: Vec<bool> = {
            let mut p = vec![false; vocab_size];
            for &id in row.iter().filter(|&&id| id != pad) {
                p[id as usize] = true;
            }
            p
        };
        let drawn: Vec<bool> = match strategy {
            SubsetStrategy::Random { k } => {
                let picked: Vec<u32> = sample(rng, vocab_size, k.min(vocab_size))
                    .into_iter()
                    .map(|i| i as u32)
                    .collect();
                let mut d = vec![false; vocab_size];
                for &i in &picked {
                    d[i as usize] = true;
                }
                draws.push(picked);
                d
            }
            _ => Vec::new(),
        };
        for t in 0..width {
            let label = row[t];
            if label == pad {
                continue;
            }
            let mut cell = admit.slice_mut(ndarray::s![b, t, ..]);
            if t == 0 && first_token == FirstToken::Mle {
                continue;
            }
            match strategy {
                SubsetStrategy::Full => {}
                SubsetStrategy::Smile => {
                    cell.iter_mut().zip(&present).for_each(|(a, &p)| *a = p);
                }
                SubsetStrategy::Reverse => {
                    cell.iter_mut().zip(&present).for_each(|(a, &p)| *a = !p);
                }
                SubsetStrategy::Random { .. } => {
                    cell.iter_mut().zip(&drawn).for_each(|(a, &d)| *a = d);
                }
            }
            cell[label as usize] = true;
        }
    }
    SubsetMask {
        admit,
        strategy,
        first_token,
        random_draws: matches!(strategy, SubsetStrategy::Random { .. }).then_some(draws),
    }
}

/// Replaces each sequence's first label with its rare alias. Returns the new
/// labels and, per sequence, whether the first label had no alias (left as is).
pub fn apply_first_token_shift(labels: &[Vec<u32>], vocab: &Vocabulary) -> (Vec<Vec<u32>>, Vec<bool>) {
    let mut flagged = Vec::with_capacity(labels.len());
    let shifted = labels
        .iter()
        .map(|seq| {
            let mut seq = seq.clone();
            let alias = seq.first().and_then(|&id| vocab.alias_of(id));
            match (seq.first_mut(), alias) {
                (Some(first), Some(a)) => {
                    *first = a;
                    flagged.push(false);
                }
                _ => flagged.push(true),
            }
            seq
        })
        .collect();
    (shifted, flagged)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean of `per_token` over non-PAD positions.
    pub total: f64,
    /// `batch × positions`; zero at PAD positions.
    pub per_token: Array2<f64>,
    /// Admitted-softmax probability of the label, when requested.
    pub per_token_probs: Option<Array2<f64>>,
    pub n_tokens: usize,
}

/// Loss report plus the gradient of `total` with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub report: LossReport,
    pub grad: Array3<f64>,
}

fn check_shapes(logits: &ArrayView3<'_, f64>, labels: &ArrayView2<'_, u32>) -> Result<()> {
    let (b, t, _) = logits.dim();
    if labels.dim() != (b, t) {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    Ok(())
}

/// Cross-entropy with the softmax restricted to `admit` (all tokens when `None`).
fn restricted_cross_entropy(
    logits: ArrayView3<'_, f64>,
    labels: ArrayView2<'_, u32>,
    pad: u32,
    admit: Option<&Array3<bool>>,
) -> Result<LossOutput> {
    check_shapes(&logits, &labels)?;
    let (batch, width, vocab) = logits.dim();
    if let Some(a) = admit {
        if a.dim() != logits.dim() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match logits {:?}",
                a.shape(),
                logits.shape()
            )));
        }
    }
    let n_tokens = labels.iter().filter(|&&id| id != pad).count();
    let scale = if n_tokens == 0 { 0.0 } else { 1.0 / n_tokens as f64 };
    let mut per_token = Array2::zeros((batch, width));
    let mut probs_out = Array2::zeros((batch, width));
    let mut grad = Array3::zeros((batch, width, vocab));
    let mut exps = vec![0.0; vocab];
    for b in 0..batch {
        for t in 0..width {
            let label = labels[[b, t]];
            if label == pad {
                continue;
            }
            if label as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: label,
                    vocab_size: vocab,
                });
            }
            let z = logits.slice(ndarray::s![b, t, ..]);
            let is_admitted = |j: usize| admit.is_none_or(|a| a[[b, t, j]]);
            if !is_admitted(label as usize) {
                return Err(Error::LabelNotAdmitted {
                    batch: b,
                    position: t,
                    label,
                });
            }
            let mut m = f64::NEG_INFINITY;
            for (j, &v) in z.iter().enumerate() {
                if is_admitted(j) {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteLogits { batch: b, position: t });
                    }
                    m = m.max(v);
                }
            }
            let mut sum = 0.0;
            for (j, &v) in z.iter().enumerate() {
                exps[j] = if is_admitted(j) { (v - m).exp() } else { 0.0 };
                sum += exps[j];
            }
            let loss = (sum.ln() - (z[label as usize] - m)).max(0.0);
            per_token[[b, t]] = loss;
            probs_out[[b, t]] = exps[label as usize] / sum;
            let mut g = grad.slice_mut(ndarray::s![b, t, ..]);
            for j in 0..vocab {
                if exps[j] != 0.0 {
                    g[j] = exps[j] / sum * scale;
                }
            }
            g[label as usize] -= scale;
        }
    }
    let total = per_token.sum() * scale;
    Ok(LossOutput {
        report: LossReport {
            total,
            per_token,
            per_token_probs: Some(probs_out),
            n_tokens,
        },
        grad,
    })
}

/// Full-vocabulary cross-entropy, averaged over non-PAD positions.
pub fn mle_loss(logits: ArrayView3<'_, f64>, labels: ArrayView2<'_, u32>, pad: u32) -> Result<LossOutput> {
    restricted_cross_entropy(logits, labels, pad, None)
}

/// Cross-entropy whose softmax runs over the tokens admitted by `mask` only.
pub fn smile_loss(
    logits: ArrayView3<'_, f64>,
    labels: ArrayView2<'_, u32>,
    mask: &SubsetMask,
    pad: u32,
) -> Result<LossOutput> {
    restricted_cross_entropy(logits, labels, pad, Some(&mask.admit))
}

/// `lambda * MLE + (1 - lambda) * masked`, with the same affine gradient.
pub fn mixed_loss(
    logits: ArrayView3<'_, f64>,
    labels: ArrayView2<'_, u32>,
    mask: &SubsetMask,
    lambda: f64,
    pad: u32,
) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::MixingWeight(lambda));
    }
    if lambda == 1.0 {
        return mle_loss(logits, labels, pad);
    }
    if lambda == 0.0 {
        return smile_loss(logits, labels, mask, pad);
    }
    let mle = mle_loss(logits, labels, pad)?;
    let sub = smile_loss(logits, labels, mask, pad)?;
    let mix = |a: f64, b: f64| lambda * a + (1.0 - lambda) * b;
    let mut grad = mle.grad;
    grad.zip_mut_with(&sub.grad, |a, &b| *a = mix(*a, b));
    let mut per_token = mle.report.per_token;
    per_token.zip_mut_with(&sub.report.per_token, |a, &b| *a = mix(*a, b));
    Ok(LossOutput {
        report: LossReport {
            total: mix(mle.report.total, sub.report.total),
            per_token,
            per_token_probs: sub.report.per_token_probs,
            n_tokens: mle.report.n_tokens,
        },
        grad,
    })
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    Mle,
    Smile,
    Reverse,
    Random { k: usize },
    Mixed { lambda: f64 },
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown objective {s:?}"));
        match s {
            "mle" => Ok(Self::Mle),
            "smile" => Ok(Self::Smile),
            "reverse" => Ok(Self::Reverse),
            "random" => Ok(Self::Random { k: DEFAULT_RANDOM_K }),
            _ => {
                if let Some(k) = s.strip_prefix("random:") {
                    Ok(Self::Random {
                        k: k.parse().map_err(|_| bad())?,
                    })
                } else if let Some(l) = s.strip_prefix("mixed:") {
                    let lambda: f64 = l.parse().map_err(|_| bad())?;
                    if !(0.0..=1.0).contains(&lambda) {
                        return Err(Error::MixingWeight(lambda));
                    }
                    Ok(Self::Mixed { lambda })
                } else {
                    Err(bad())
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Mle => "mle".into(),
            Self::Smile => "smile".into(),
            Self::Reverse => "reverse".into(),
            Self::Random { k } => format!("random:{k}"),
            Self::Mixed { lambda } => format!("mixed:{lambda}"),
        }
    }

    pub fn strategy(&self) -> SubsetStrategy {
        match self {
            Self::Mle => SubsetStrategy::Full,
            Self::Smile | Self::Mixed { .. } => SubsetStrategy::Smile,
            Self::Reverse => SubsetStrategy::Reverse,
            Self::Random { k } => SubsetStrategy::Random { k: *k },
        }
    }

    /// Loss and gradient for one batch. Labels are shifted first when
    /// `first_token` is [`FirstToken::Shift`].
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        logits: ArrayView3<'_, f64>,
        labels: &[Vec<u32>],
        vocab: &Vocabulary,
        first_token: FirstToken,
        rng: &mut R,
    ) -> Result<LossOutput> {
        let pad = vocab.pad();
        let shifted;
        let labels = if first_token == FirstToken::Shift && *self != Self::Mle {
            shifted = apply_first_token_shift(labels, vocab).0;
            &shifted
        } else {
            labels
        };
        let padded = pad_labels(labels, pad);
        if padded.ncols() != logits.dim().1 {
            return Err(Error::Shape(format!(
                "label width {} does not match logits width {}",
                padded.ncols(),
                logits.dim().1
            )));
        }
        match self {
            Self::Mle => mle_loss(logits, padded.view(), pad),
            _ => {
                let mask = build_mask(padded.view(), vocab.len(), pad, self.strategy(), first_token, rng);
                match self {
                    Self::Mixed { lambda } => mixed_loss(logits, padded.view(), &mask, *lambda, pad),
                    _ => smile_loss(logits, padded.view(), &mask, pad),
                }
            }
        }
    }
}

/// Label-token set of one sequence (set semantics: duplicates count once).
pub fn label_set(labels: &[u32], pad: u32) -> BTreeSet<u32> {
    labels.iter().copied().filter(|&id| id != pad).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PAD: u32 = 99;

    fn row(z: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, 1, z.len()), z.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let out = mle_loss(row(&[0.0; 8]).view(), arr2(&[[3u32]]).view(), PAD).unwrap();
        assert!((out.report.total - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_label_has_negligible_loss() {
        let mut z = vec![0.0; 6];
        z[2] = 30.0;
        let out = mle_loss(row(&z).view(), arr2(&[[2u32]]).view(), PAD).unwrap();
        assert!(out.report.total < 1e-9);
    }

    #[test]
    fn singleton_subset_gives_zero_loss_and_gradient() {
        let z = row(&[2.0, 1.0, 0.0, -1.0, 3.0]);
        let mut mask = SubsetMask::full(1, 1, 5);
        mask.admit.fill(false);
        mask.admit[[0, 0, 1]] = true;
        let out = smile_loss(z.view(), arr2(&[[1u32]]).view(), &mask, PAD).unwrap();
        assert_eq!(out.report.total, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unadmitted_label_is_rejected() {
        let z = row(&[0.0; 4]);
        let mut mask = SubsetMask::full(1, 1, 4);
        mask.admit[[0, 0, 2]] = false;
        assert!(matches!(
            smile_loss(z.view(), arr2(&[[2u32]]).view(), &mask, PAD),
            Err(Error::LabelNotAdmitted { .. })
        ));
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let z = row(&[0.0, f64::NAN, 1.0]);
        assert!(matches!(
            mle_loss(z.view(), arr2(&[[0u32]]).view(), PAD),
            Err(Error::NonFiniteLogits { .. })
        ));
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected() {
        let z = row(&[0.0; 3]);
        let mask = SubsetMask::full(1, 1, 3);
        for l in [-0.1, 1.5, f64::NAN] {
            assert!(mixed_loss(z.view(), arr2(&[[0u32]]).view(), &mask, l, PAD).is_err());
        }
    }

    #[test]
    fn pad_positions_are_excluded_and_admit_everything() {
        let labels = arr2(&[[1u32, 2, PAD]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = build_mask(labels.view(), 5, PAD, SubsetStrategy::Smile, FirstToken::None, &mut rng);
        assert!(mask.admit.slice(ndarray::s![0, 2, ..]).iter().all(|&a| a));
        let z = Array3::from_shape_fn((1, 3, 5), |(_, t, j)| (t * 5 + j) as f64 * 0.1);
        let out = smile_loss(z.view(), labels.view(), &mask, PAD).unwrap();
        assert_eq!(out.report.n_tokens, 2);
        assert_eq!(out.report.per_token[[0, 2]], 0.0);
        assert!(out.grad.slice(ndarray::s![0, 2, ..]).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn first_token_mle_opens_row_zero() {
        let labels = arr2(&[[1u32, 2, 3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = build_mask(labels.view(), 6, PAD, SubsetStrategy::Smile, FirstToken::Mle, &mut rng);
        assert!(mask.admit.slice(ndarray::s![0, 0, ..]).iter().all(|&a| a));
        assert_eq!(mask.admitted(0, 1).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [
            Objective::Mle,
            Objective::Smile,
            Objective::Reverse,
            Objective::Random { k: 10 },
            Objective::Mixed { lambda: 0.05 },
        ] {
            assert_eq!(Objective::parse(&o.name()).unwrap(), o);
        }
        assert!(Objective::parse("mixed:2").is_err());
        assert!(Objective::parse("nope").is_err());
    }
}
