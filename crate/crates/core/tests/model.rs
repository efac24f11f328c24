use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smile_core::decoder::{decode, DecodeConfig};
use smile_core::model::{init, ModelConfig, Parameters};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_len: 7,
        vocab_size: 11,
        n_features: 5,
        seed,
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, c: &ModelConfig, batch: usize) -> (Array2<f64>, Vec<Vec<u32>>) {
    let features = Array2::from_shape_fn((batch, c.n_features), |_| f64::from(rng.gen_range(0..2)));
    let tokens = (0..batch)
        .map(|_| {
            let len = rng.gen_range(1..c.max_len);
            (0..len).map(|_| rng.gen_range(0..c.vocab_size as u32)).collect()
        })
        .collect();
    (features, tokens)
}

/// Scalar objective `sum(w * logits)` for a fixed random weighting `w`.
fn objective(p: &Parameters, features: &Array2<f64>, tokens: &[Vec<u32>], w: &Array3<f64>) -> f64 {
    let (logits, _) = p.forward(features.view(), tokens).unwrap();
    (&logits.values * w).sum()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let c = tiny(4);
    let mut p = init(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Larger weights than the default init so every path carries signal.
    p.as_mut_slice().iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
    let (features, tokens) = random_inputs(&mut rng, &c, 3);
    let width = tokens.iter().map(Vec::len).max().unwrap();
    let mut w = Array3::from_shape_fn((3, width, c.vocab_size), |_| rng.gen_range(-1.0..1.0));
    for (b, seq) in tokens.iter().enumerate() {
        w.slice_mut(ndarray::s![b, seq.len().., ..]).fill(0.0);
    }
    let (_, trace) = p.forward(features.view(), &tokens).unwrap();
    let grad = p.backward(&trace, w.view()).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.gen_range(0..p.len());
        let mut up = p.clone();
        up.as_mut_slice()[i] += h;
        let mut down = p.clone();
        down.as_mut_slice()[i] -= h;
        let fd = (objective(&up, &features, &tokens, &w) - objective(&down, &features, &tokens, &w)) / (2.0 * h);
        let g = grad.as_slice()[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn closed_form_parameter_count() {
    for (d, l, v, f, m) in [(8, 1, 11, 5, 7), (64, 2, 66, 60, 32), (16, 3, 20, 4, 10)] {
        let c = ModelConfig {
            d_model: d,
            n_layers: l,
            n_heads: 2,
            max_len: m,
            vocab_size: v,
            n_features: f,
            seed: 0,
        };
        let per_block = 2 * d + 4 * d * d + d + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let expected = v * d + m * d + f * d + d + l * per_block + 2 * d + d * v + v;
        assert_eq!(c.parameter_count(), expected);
        assert_eq!(init(&c).unwrap().len(), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn suffix_changes_leave_prefix_logits_alone(seed in any::<u64>(), cut in 1usize..6) {
        let c = tiny(seed % 7);
        let p = init(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Array2::from_shape_fn((1, c.n_features), |_| f64::from(rng.gen_range(0..2)));
        let a: Vec<u32> = (0..6).map(|_| rng.gen_range(0..c.vocab_size as u32)).collect();
        let mut b = a.clone();
        for t in b.iter_mut().skip(cut) {
            *t = rng.gen_range(0..c.vocab_size as u32);
        }
        let (la, _) = p.forward(features.view(), &[a]).unwrap();
        let (lb, _) = p.forward(features.view(), &[b]).unwrap();
        for t in 0..cut {
            for j in 0..c.vocab_size {
                prop_assert_eq!(la.values[[0, t, j]].to_bits(), lb.values[[0, t, j]].to_bits());
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Golden {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[test]
fn forward_matches_golden_logits() {
    let c = tiny(123);
    let p = init(&c).unwrap();
    let features = Array2::from_shape_vec((2, 5), vec![1., 0., 1., 0., 0., 0., 1., 1., 0., 1.]).unwrap();
    let tokens = vec![vec![1, 4, 7, 2], vec![1, 9]];
    let (logits, _) = p.forward(features.view(), &tokens).unwrap();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/forward_logits.json");
    if !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let g = Golden {
            shape: logits.values.shape().to_vec(),
            values: logits.values.iter().copied().collect(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&g).unwrap()).unwrap();
    }
    let g: Golden = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(g.shape, logits.values.shape());
    for (a, b) in g.values.iter().zip(logits.values.iter()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

// Vocabulary for the hand-built captioner.
const BOS: u32 = 1;
const EOS: u32 = 2;
const A: usize = 3;
const CAT: usize = 4;
const DOG: usize = 5;

/// One block with uniform attention that copies the feature slot forward, and
/// a readout that acts as a bigram table: BOS -> a, a -> noun, noun -> EOS.
/// The noun is picked by feature bit 0 (cat) or bit 1 (dog).
fn hand_built() -> Parameters {
    let c = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 1,
        max_len: 6,
        vocab_size: 6,
        n_features: 2,
        seed: 0,
    };
    let d = c.d_model;
    let v = c.vocab_size;
    let mut p = Parameters::zeros(&c);
    for g in ["blocks.0.ln1_g", "blocks.0.ln2_g", "lnf_g"] {
        p.tensor_mut(g).unwrap().fill(1.0);
    }
    for m in ["blocks.0.wv", "blocks.0.wo"] {
        let w = p.tensor_mut(m).unwrap();
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
    }
    let emb = p.tensor_mut("tok_emb").unwrap();
    emb[BOS as usize * d] = 1.0;
    emb[A * d + 1] = 1.0;
    emb[CAT * d + 2] = 1.0;
    emb[DOG * d + 2] = 1.0;
    let feat = p.tensor_mut("feat_w").unwrap();
    feat[3] = 1.0;
    feat[d + 4] = 1.0;
    let out = p.tensor_mut("w_out").unwrap();
    let (l, m) = (10.0, 4.0);
    out[A] = l;
    out[v + CAT] = l;
    out[v + DOG] = l;
    out[3 * v + CAT] = m;
    out[4 * v + DOG] = m;
    out[2 * v + EOS as usize] = l;
    p
}

#[test]
fn hand_built_weights_caption_the_feature() {
    let p = hand_built();
    for (bits, noun) in [([1.0, 0.0], CAT), ([0.0, 1.0], DOG)] {
        let f = Array1::from(bits.to_vec());
        for cfg in [DecodeConfig::greedy(6), DecodeConfig::beam(3, 6)] {
            let d = decode(&p, f.view(), BOS, EOS, &cfg).unwrap();
            assert_eq!(d.tokens, vec![BOS, A as u32, noun as u32, EOS], "{cfg:?}");
        }
    }
}
