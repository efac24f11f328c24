use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smile_core::corpus::{generate_corpus, tokenize, Corpus, CorpusConfig, CorpusMode};
use smile_core::eval::{
    admit_rows, export_token_viz, lexical_diversity, mean_caption_length, self_retrieval, BigramModel, ConceptMap,
    RetrievalPool, VIZ_SCHEMA,
};

fn corpus(n: usize) -> Corpus {
    generate_corpus(&CorpusConfig::new(CorpusMode::Full, 31, n)).unwrap()
}

/// Brute-force R@1 over caption strings: cosine between concept-word counts and
/// feature bits, with the true scene ranked below every tie.
fn oracle_r1(c: &Corpus, captions: &[(u64, String)]) -> f64 {
    let score = |text: &str, features: &[u8]| {
        let mut bag = vec![0.0; features.len()];
        for w in text.split_whitespace() {
            if let Some(i) = c.inventory.index_of(w) {
                bag[i] += 1.0;
            }
        }
        let dot: f64 = bag.iter().zip(features).map(|(a, &b)| a * f64::from(b)).sum();
        let na = bag.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = features.iter().map(|&b| f64::from(b)).sum::<f64>().sqrt();
        if na == 0.0 { 0.0 } else { dot / (na * nb) }
    };
    let hits = captions
        .iter()
        .filter(|(id, text)| {
            let truth = score(text, &c.scene(*id).unwrap().features);
            c.scenes.iter().all(|s| s.scene_id == *id || score(text, &s.features) < truth)
        })
        .count();
    hits as f64 / captions.len() as f64
}

fn level_captions(c: &Corpus, level: usize) -> Vec<(u64, String)> {
    c.scenes.iter().map(|s| (s.scene_id, s.caption(level, CorpusMode::Full))).collect()
}

#[test]
fn detailed_captions_retrieve_better() {
    let c = corpus(100);
    let pool = RetrievalPool::from_scenes(&c.scenes);
    let concepts = ConceptMap::new(&c.inventory, &c.vocab);
    let mut r1 = [0.0; 2];
    for (slot, level) in [(0, 0), (1, 3)] {
        let texts = level_captions(&c, level);
        let ids: Vec<(u64, Vec<u32>)> = texts.iter().map(|(id, t)| (*id, tokenize(t, &c.vocab))).collect();
        let got = self_retrieval(&ids, &pool, &concepts).unwrap().r_at_1;
        assert!((got - oracle_r1(&c, &texts)).abs() < 1e-12);
        r1[slot] = got;
    }
    assert!(r1[1] > r1[0], "{r1:?}");
}

#[test]
fn distractors_only_lower_recall() {
    let c = corpus(60);
    let concepts = ConceptMap::new(&c.inventory, &c.vocab);
    let caps: Vec<(u64, Vec<u32>)> = level_captions(&c, 3)
        .into_iter()
        .map(|(id, t)| (id, tokenize(&t, &c.vocab)))
        .collect();
    let base = RetrievalPool::from_scenes(&c.scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hard = base.clone().with_hard_distractors(&c.inventory, 3, &mut rng);
    let ids: BTreeSet<u64> = hard.entries.iter().chain(&hard.hard_distractors).map(|e| e.scene_id).collect();
    assert_eq!(ids.len(), hard.len());
    let a = self_retrieval(&caps, &base, &concepts).unwrap();
    let b = self_retrieval(&caps, &hard, &concepts).unwrap();
    for (x, y) in a.ranks.iter().zip(&b.ranks) {
        assert!(y >= x);
    }
    assert!(b.r_at_1 <= a.r_at_1 && b.r_at_5 <= a.r_at_5);
}

#[test]
fn bigram_perplexity_by_hand() {
    // Vocabulary of 4; training pairs (0,1) twice and (1,2) once.
    let m = BigramModel::fit([&[0u32, 1, 2][..], &[0, 1]], 4);
    let p01: f64 = (2.0 + 1.0) / (2.0 + 4.0);
    let p12: f64 = (1.0 + 1.0) / (1.0 + 4.0);
    let p23: f64 = 1.0 / 4.0;
    assert!((m.log_prob(0, 1) - f64::ln(p01)).abs() < 1e-12);
    let ppl = m.perplexity([&[0u32, 1, 2, 3][..]]);
    let expected = (-(p01.ln() + p12.ln() + p23.ln()) / 3.0).exp();
    assert!((ppl - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn diversity_ignores_order_and_duplicates(
        caps in prop::collection::vec(prop::collection::vec(0u32..70, 0..8), 1..10),
        perm_seed in any::<u64>(),
    ) {
        let c = corpus(5);
        let mut shuffled = caps.clone();
        shuffled.extend(caps.iter().take(3).cloned());
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        prop_assert_eq!(lexical_diversity(&caps, &c.vocab), lexical_diversity(&shuffled, &c.vocab));
        prop_assert!(mean_caption_length(&caps, &c.vocab) >= 0.0);
    }
}

#[test]
fn viz_export_is_well_formed() {
    let c = corpus(5);
    let s = &c.samples[0];
    let labels = &s.caption[1..];
    let v = c.vocab.len();
    let logits = Array2::from_shape_fn((labels.len(), v), |(t, j)| ((t * 7 + j * 3) % 11) as f64 / 3.0);
    let words: Vec<u32> = labels.to_vec();
    let admit = admit_rows(labels.len(), v, &vec![words; labels.len()]);
    let viz = export_token_viz(logits.view(), labels, admit.view(), &c.vocab).unwrap();
    let json: serde_json::Value = serde_json::to_value(&viz).unwrap();
    assert_eq!(json["schema"], VIZ_SCHEMA);
    let positions = json["positions"].as_array().unwrap();
    assert_eq!(positions.len(), labels.len());
    for (t, p) in positions.iter().enumerate() {
        assert_eq!(p["position"].as_u64().unwrap() as usize, t);
        assert_eq!(p["label"].as_u64().unwrap() as u32, labels[t]);
        assert_eq!(p["label_token"].as_str().unwrap(), c.vocab.token(labels[t]).unwrap());
        let mle = p["mle_loss"].as_f64().unwrap();
        let smile = p["smile_loss"].as_f64().unwrap();
        assert!(smile <= mle + 1e-12 && smile >= 0.0);
        for key in ["top_full", "top_admitted"] {
            let top = p[key].as_array().unwrap();
            assert!(!top.is_empty() && top.len() <= 5);
            let probs: Vec<f64> = top.iter().map(|e| e["prob"].as_f64().unwrap()).collect();
            assert!(probs.windows(2).all(|w| w[0] >= w[1]));
            assert!(probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
            assert!(top.iter().all(|e| e["token"].is_string() && e["id"].is_u64()));
        }
        let admitted = p["admitted_count"].as_u64().unwrap() as usize;
        assert_eq!(admitted, labels.iter().collect::<BTreeSet<_>>().len());
    }
}
