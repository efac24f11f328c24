//! Synthetic scene/caption corpora, vocabulary and tokenization.
//!
//! A scene is a small set of entities (an agent noun with adjectives, a verb
//! and an optional object). Its "image" is the multi-hot vector of concepts
//! present. Captions are templated at four detail levels:
//!
//! | level | template                                           |
//! |-------|----------------------------------------------------|
//! | 0     | `a <noun>`                                         |
//! | 1     | `a <noun> <verb>`                                  |
//! | 2     | `a <adj> <noun> <verb>`                            |
//! | 3     | every adjective, the object clause, further entities joined by `and` |
//!
//! The `simplest` mode keeps only the subject (`a girl`); the `simpler` mode
//! mixes subject-only captions with the subject-verb-object constituent
//! (`a man holds a box`).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Function words emitted by the caption templates.
pub const ARTICLE: &str = "a";
pub const CONJUNCTION: &str = "and";

/// Words that never count as concepts, whatever the vocabulary.
pub const STOP_WORDS: [&str; 3] = ["a", "the", "and"];

const AGENT_NOUNS: [&str; 28] = [
    "cat", "dog", "man", "woman", "girl", "boy", "horse", "bird", "cow", "goat", "sheep", "pig",
    "bear", "fox", "wolf", "duck", "rabbit", "mouse", "tiger", "lion", "monkey", "zebra", "deer",
    "frog", "chef", "baby", "puppy", "kitten",
];
const THING_NOUNS: [&str; 14] = [
    "box", "ball", "cup", "kite", "bag", "hat", "book", "toy", "stick", "bottle", "cake", "plate",
    "rope", "bucket",
];
const ADJECTIVES: [&str; 28] = [
    "red", "blue", "green", "small", "big", "tall", "tiny", "black", "white", "brown", "pink",
    "gray", "dark", "fat", "thin", "young", "wet", "dry", "soft", "shiny", "fluffy", "spotted",
    "striped", "happy", "sleepy", "noisy", "bright", "pale",
];
const VERBS: [&str; 14] = [
    "holds", "watches", "pulls", "carries", "pushes", "kicks", "bites", "finds", "drops", "lifts",
    "sniffs", "guards", "drags", "taps",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

/// Dense token ↔ id map with special tokens and first-token aliases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    specials: Specials,
    rare_alias: BTreeMap<u32, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    specials: Specials,
    rare_alias: BTreeMap<u32, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from specials, then `words` in order. Each entry of
    /// `aliased` gets a reserved alias token `##<word>` appended after the words.
    pub fn new<S: AsRef<str>>(words: &[S], aliased: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        let mut rare_alias = BTreeMap::new();
        let mut pending = Vec::new();
        for &word in aliased {
            let source = tokens
                .iter()
                .position(|t| t == word)
                .ok_or_else(|| Error::Config(format!("alias source {word:?} not in vocabulary")))?;
            tokens.push(format!("##{word}"));
            pending.push((source as u32, (tokens.len() - 1) as u32));
        }
        rare_alias.extend(pending);
        Self::from_parts(
            tokens,
            Specials {
                pad: 0,
                bos: 1,
                eos: 2,
                unk: 3,
            },
            rare_alias,
        )
    }

    fn from_parts(
        tokens: Vec<String>,
        specials: Specials,
        rare_alias: BTreeMap<u32, u32>,
    ) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        let n = tokens.len() as u32;
        let s = [specials.pad, specials.bos, specials.eos, specials.unk];
        if s.iter().any(|&id| id >= n) {
            return Err(Error::Config("special id out of range".into()));
        }
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                if s[i] == s[j] {
                    return Err(Error::Config("special ids must be distinct".into()));
                }
            }
        }
        for (&from, &to) in &rare_alias {
            if from >= n || to >= n || from == to {
                return Err(Error::Config(format!("invalid alias {from} -> {to}")));
            }
        }
        Ok(Self {
            tokens,
            id_of,
            specials,
            rare_alias,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn pad(&self) -> u32 {
        self.specials.pad
    }

    pub fn bos(&self) -> u32 {
        self.specials.bos
    }

    pub fn eos(&self) -> u32 {
        self.specials.eos
    }

    pub fn unk(&self) -> u32 {
        self.specials.unk
    }

    pub fn is_special(&self, id: u32) -> bool {
        let s = self.specials;
        id == s.pad || id == s.bos || id == s.eos || id == s.unk
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn rare_alias(&self) -> &BTreeMap<u32, u32> {
        &self.rare_alias
    }

    pub fn alias_of(&self, id: u32) -> Option<u32> {
        self.rare_alias.get(&id).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabularyFile {
            tokens: self.tokens.clone(),
            specials: self.specials,
            rare_alias: self.rare_alias.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        Self::from_parts(file.tokens, file.specials, file.rare_alias)
    }
}

/// Whitespace tokenization framed with BOS/EOS; unknown words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() / 3 + 2);
    ids.push(vocab.bos());
    ids.extend(
        text.split_whitespace()
            .map(|w| vocab.id(w).unwrap_or(vocab.unk())),
    );
    ids.push(vocab.eos());
    ids
}

/// Inverse of [`tokenize`] for in-vocabulary text: drops BOS/EOS/PAD.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    let s = vocab.specials();
    ids.iter()
        .filter(|&&id| id != s.bos && id != s.eos && id != s.pad)
        .map(|&id| vocab.token(id).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Full,
    Simplest,
    Simpler,
}

impl CorpusMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "simplest" => Ok(Self::Simplest),
            "simpler" => Ok(Self::Simpler),
            other => Err(Error::Config(format!(
                "unknown corpus mode {other:?} (expected full, simplest or simpler)"
            ))),
        }
    }

    /// Highest detail level the mode may emit.
    pub fn max_level(self) -> usize {
        match self {
            Self::Full => 3,
            Self::Simplest => 0,
            Self::Simpler => 1,
        }
    }

    /// Detail distribution used when none is given.
    pub fn default_distribution(self) -> [f64; 4] {
        match self {
            Self::Full => [0.2, 0.5, 0.2, 0.1],
            Self::Simplest => [1.0, 0.0, 0.0, 0.0],
            // 80% subject-only, 20% subject-verb-object: mean length 2.5 words.
            Self::Simpler => [0.8, 0.2, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCounts {
    pub nouns: usize,
    pub adjectives: usize,
    pub verbs: usize,
}

impl Default for ConceptCounts {
    fn default() -> Self {
        Self {
            nouns: 30,
            adjectives: 20,
            verbs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub detail_distribution: [f64; 4],
    pub mode: CorpusMode,
    pub vocab_concepts: ConceptCounts,
    /// Captions drawn per scene, each at an independently sampled level.
    pub paraphrases: usize,
    /// Probability that an entity's action has an object.
    pub object_prob: f64,
    /// Probability that a scene holds a second entity.
    pub two_entity_prob: f64,
}

impl CorpusConfig {
    pub fn new(mode: CorpusMode, seed: u64, n_scenes: usize) -> Self {
        Self {
            seed,
            n_scenes,
            detail_distribution: mode.default_distribution(),
            mode,
            vocab_concepts: ConceptCounts::default(),
            paraphrases: 1,
            object_prob: 0.75,
            two_entity_prob: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.detail_distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "detail_distribution sums to {sum}, expected 1"
            )));
        }
        if self.detail_distribution.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("detail_distribution entries must lie in [0, 1]".into()));
        }
        let max = self.mode.max_level();
        if let Some(level) = (max + 1..4).find(|&l| self.detail_distribution[l] > 0.0) {
            return Err(Error::Config(format!(
                "mode {:?} cannot emit level {level} captions but detail_distribution gives it mass {}",
                self.mode, self.detail_distribution[level]
            )));
        }
        if self.n_scenes == 0 || self.paraphrases == 0 {
            return Err(Error::Config("n_scenes and paraphrases must be positive".into()));
        }
        let c = self.vocab_concepts;
        if c.nouns < 6 || c.adjectives < 4 || c.verbs < 2 {
            return Err(Error::Config(
                "need at least 6 nouns, 4 adjectives and 2 verbs".into(),
            ));
        }
        let (agents, things) = split_nouns(c.nouns);
        if agents > AGENT_NOUNS.len() || things > THING_NOUNS.len() {
            return Err(Error::Config(format!(
                "at most {} nouns available",
                AGENT_NOUNS.len() + THING_NOUNS.len()
            )));
        }
        if c.adjectives > ADJECTIVES.len() || c.verbs > VERBS.len() {
            return Err(Error::Config(format!(
                "at most {} adjectives and {} verbs available",
                ADJECTIVES.len(),
                VERBS.len()
            )));
        }
        for p in [self.object_prob, self.two_entity_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Two thirds of the nouns are agents (subjects), the rest objects.
fn split_nouns(nouns: usize) -> (usize, usize) {
    let things = nouns / 3;
    (nouns - things, things)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Noun,
    Adjective,
    Verb,
}

/// Fixed, ordered concept inventory: nouns, then adjectives, then verbs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptInventory {
    pub agents: Vec<String>,
    pub things: Vec<String>,
    pub adjectives: Vec<String>,
    pub verbs: Vec<String>,
}

impl ConceptInventory {
    pub fn new(counts: ConceptCounts) -> Self {
        let (agents, things) = split_nouns(counts.nouns);
        let own = |words: &[&str], n: usize| words[..n].iter().map(|s| s.to_string()).collect();
        Self {
            agents: own(&AGENT_NOUNS, agents),
            things: own(&THING_NOUNS, things),
            adjectives: own(&ADJECTIVES, counts.adjectives),
            verbs: own(&VERBS, counts.verbs),
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len() + self.things.len() + self.adjectives.len() + self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concept words in feature-index order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.agents
            .iter()
            .chain(&self.things)
            .chain(&self.adjectives)
            .chain(&self.verbs)
            .map(String::as_str)
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words().position(|w| w == word)
    }

    pub fn kind(&self, index: usize) -> Option<ConceptKind> {
        let nouns = self.agents.len() + self.things.len();
        let adjs = nouns + self.adjectives.len();
        match index {
            i if i < nouns => Some(ConceptKind::Noun),
            i if i < adjs => Some(ConceptKind::Adjective),
            i if i < self.len() => Some(ConceptKind::Verb),
            _ => None,
        }
    }

    /// Maps every vocabulary id to its concept index, if any.
    pub fn concept_of_tokens(&self, vocab: &Vocabulary) -> Vec<Option<usize>> {
        vocab
            .tokens()
            .iter()
            .map(|t| {
                if STOP_WORDS.contains(&t.as_str()) {
                    None
                } else {
                    self.index_of(t)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectPhrase {
    pub noun: String,
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub noun: String,
    pub attributes: Vec<String>,
    pub action: Option<String>,
    pub object: Option<ObjectPhrase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub entities: Vec<Entity>,
    pub features: Vec<u8>,
}

impl Scene {
    /// All concept words mentioned by the entity structure.
    pub fn concept_words(&self) -> Vec<&str> {
        let mut words = Vec::new();
        for e in &self.entities {
            words.push(e.noun.as_str());
            words.extend(e.attributes.iter().map(String::as_str));
            if let Some(v) = &e.action {
                words.push(v.as_str());
            }
            if let Some(o) = &e.object {
                words.push(o.noun.as_str());
                words.extend(o.attributes.iter().map(String::as_str));
            }
        }
        words
    }

    pub fn compute_features(&self, inventory: &ConceptInventory) -> Vec<u8> {
        let mut bits = vec![0u8; inventory.len()];
        for w in self.concept_words() {
            if let Some(i) = inventory.index_of(w) {
                bits[i] = 1;
            }
        }
        bits
    }

    /// Caption text at the given detail level for the given corpus mode.
    pub fn caption(&self, level: usize, mode: CorpusMode) -> String {
        let e = &self.entities[0];
        let mut words: Vec<&str> = vec![ARTICLE];
        match (mode, level) {
            (_, 0) => words.push(&e.noun),
            (CorpusMode::Simpler, _) => {
                words.push(&e.noun);
                if let Some(v) = &e.action {
                    words.push(v);
                    if let Some(o) = &e.object {
                        words.extend([ARTICLE, o.noun.as_str()]);
                    }
                }
            }
            (_, 1) => {
                words.push(&e.noun);
                words.extend(e.action.as_deref());
            }
            (_, 2) => {
                words.extend(e.attributes.first().map(String::as_str));
                words.push(&e.noun);
                words.extend(e.action.as_deref());
            }
            _ => {
                for (i, e) in self.entities.iter().enumerate() {
                    if i > 0 {
                        words.extend([CONJUNCTION, ARTICLE]);
                    }
                    words.extend(e.attributes.iter().map(String::as_str));
                    words.push(&e.noun);
                    if let Some(v) = &e.action {
                        words.push(v);
                        if let Some(o) = &e.object {
                            words.push(ARTICLE);
                            words.extend(o.attributes.iter().map(String::as_str));
                            words.push(&o.noun);
                        }
                    }
                }
            }
        }
        words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub scene_id: u64,
    pub features: Vec<u8>,
    pub caption: Vec<u32>,
    pub detail_level: u8,
}

/// Output of [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub inventory: ConceptInventory,
    pub vocab: Vocabulary,
    pub scenes: Vec<Scene>,
    pub samples: Vec<Sample>,
}

/// Builds the vocabulary for an inventory: function words, concept words and
/// the `##a` alias used for first-token shifting.
pub fn build_vocabulary(inventory: &ConceptInventory) -> Result<Vocabulary> {
    let mut words = vec![ARTICLE.to_string(), CONJUNCTION.to_string()];
    words.extend(inventory.words().map(str::to_string));
    Vocabulary::new(&words, &[ARTICLE])
}

fn pick_distinct<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], n: usize) -> Vec<&'a str> {
    pool.choose_multiple(rng, n).copied().collect()
}

fn pick_sorted<'a>(rng: &mut ChaCha8Rng, inventory: &ConceptInventory, pool: &[&'a str], n: usize) -> Vec<&'a str> {
    let mut picked = pick_distinct(rng, pool, n.min(pool.len()));
    picked.sort_by_key(|w| inventory.index_of(w));
    picked
}

fn sample_level(rng: &mut ChaCha8Rng, dist: &[f64; 4]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (level, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return level;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn generate_scene(
    rng: &mut ChaCha8Rng,
    scene_id: u64,
    inventory: &ConceptInventory,
    config: &CorpusConfig,
) -> Scene {
    let agents: Vec<&str> = inventory.agents.iter().map(String::as_str).collect();
    let things: Vec<&str> = inventory.things.iter().map(String::as_str).collect();
    let adjectives: Vec<&str> = inventory.adjectives.iter().map(String::as_str).collect();
    let verbs: Vec<&str> = inventory.verbs.iter().map(String::as_str).collect();

    let n_entities = if rng.gen_bool(config.two_entity_prob) { 2 } else { 1 };
    let mut nouns = pick_distinct(rng, &agents, n_entities);
    // Canonical order lets the caption's leading entity be read off the features.
    nouns.sort_by_key(|n| inventory.index_of(n));
    // Draw the shape of each entity first, then hand out sorted concepts in
    // entity order so every binding is recoverable from the feature bits.
    let shapes: Vec<(usize, bool)> = nouns
        .iter()
        .map(|_| (if rng.gen_bool(0.5) { 2 } else { 1 }, rng.gen_bool(config.object_prob)))
        .collect();
    let n_adj = shapes.iter().map(|&(a, o)| a + usize::from(o)).sum::<usize>().min(adjectives.len());
    let n_obj = shapes.iter().filter(|s| s.1).count().min(things.len());
    let mut adj_pool = pick_sorted(rng, inventory, &adjectives, n_adj).into_iter();
    let mut verb_pool = pick_sorted(rng, inventory, &verbs, n_entities).into_iter();
    let mut thing_pool = pick_sorted(rng, inventory, &things, n_obj).into_iter();

    let mut entities = Vec::with_capacity(n_entities);
    for (noun, (n_attrs, has_object)) in nouns.into_iter().zip(shapes) {
        let attributes: Vec<String> = adj_pool.by_ref().take(n_attrs).map(str::to_string).collect();
        let action = verb_pool.next().map(str::to_string);
        let object = if has_object {
            match (thing_pool.next(), adj_pool.next()) {
                (Some(noun), Some(adj)) => Some(ObjectPhrase {
                    noun: noun.to_string(),
                    attributes: vec![adj.to_string()],
                }),
                _ => None,
            }
        } else {
            None
        };
        entities.push(Entity {
            noun: noun.to_string(),
            attributes,
            action,
            object,
        });
    }
    let mut scene = Scene {
        scene_id,
        entities,
        features: Vec::new(),
    };
    scene.features = scene.compute_features(inventory);
    scene
}

/// Deterministic corpus generation from `(seed, config)`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let inventory = ConceptInventory::new(config.vocab_concepts);
    let vocab = build_vocabulary(&inventory)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(config.n_scenes);
    let mut samples = Vec::with_capacity(config.n_scenes * config.paraphrases);
    for scene_id in 0..config.n_scenes as u64 {
        let scene = generate_scene(&mut rng, scene_id, &inventory, config);
        for _ in 0..config.paraphrases {
            let level = sample_level(&mut rng, &config.detail_distribution);
            let text = scene.caption(level, config.mode);
            samples.push(Sample {
                scene_id,
                features: scene.features.clone(),
                caption: tokenize(&text, &vocab),
                detail_level: level as u8,
            });
        }
        scenes.push(scene);
    }
    Ok(Corpus {
        config: config.clone(),
        inventory,
        vocab,
        scenes,
        samples,
    })
}

impl Corpus {
    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        self.scenes
            .get(scene_id as usize)
            .filter(|s| s.scene_id == scene_id)
            .or_else(|| self.scenes.iter().find(|s| s.scene_id == scene_id))
    }

    pub fn max_caption_len(&self) -> usize {
        self.samples.iter().map(|s| s.caption.len()).max().unwrap_or(0)
    }

    /// Writes `corpus.jsonl`, `scenes.jsonl`, `vocab.json` and `corpus_config.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&dir.join("corpus.jsonl"), &self.samples)?;
        write_jsonl(&dir.join("scenes.jsonl"), &self.scenes)?;
        write_text(&dir.join("vocab.json"), &self.vocab.to_json()?)?;
        write_text(
            &dir.join("corpus_config.json"),
            &serde_json::to_string_pretty(&self.config)?,
        )
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let config_path = dir.join("corpus_config.json");
        let config: CorpusConfig = serde_json::from_str(&read_text(&config_path)?)?;
        let vocab = Vocabulary::from_json(&read_text(&dir.join("vocab.json"))?)?;
        Ok(Self {
            inventory: ConceptInventory::new(config.vocab_concepts),
            config,
            vocab,
            scenes: read_jsonl(&dir.join("scenes.jsonl"))?,
            samples: read_corpus(&dir.join("corpus.jsonl"))?,
        })
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// One JSON object per line: `{"scene_id", "features", "caption", "detail_level"}`.
pub fn write_corpus(path: &Path, samples: &[Sample]) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Sample>> {
    read_jsonl(path)
}
