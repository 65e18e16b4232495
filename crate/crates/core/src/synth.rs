//! Synthetic benchmark: scenes of uniquely categorized boxes, template
//! relational captions, an image caption that mentions the most salient
//! objects, and importance flags recovered by aligning the two.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng::{gaussian, rng_for};
use crate::types::{BBox, RelationalCaption, SceneObject, SceneRecord, Vocabulary, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Prep,
    Det,
    Conj,
}

impl Pos {
    pub fn is_noun(self) -> bool {
        self == Pos::Noun
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pos::Noun => "noun",
            Pos::Verb => "verb",
            Pos::Adj => "adj",
            Pos::Prep => "prep",
            Pos::Det => "det",
            Pos::Conj => "conj",
        })
    }
}

impl FromStr for Pos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noun" => Pos::Noun,
            "verb" => Pos::Verb,
            "adj" => Pos::Adj,
            "prep" => Pos::Prep,
            "det" => Pos::Det,
            "conj" => Pos::Conj,
            _ => return Err(Error::Config(format!("unknown part of speech `{s}`"))),
        })
    }
}

/// A category noun and how likely captions are to mention it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub noun: String,
    pub salience: f64,
    /// Relative rate at which the category occurs in scenes.
    pub frequency: f64,
    /// Whether the category can hold or ride things.
    pub agent: bool,
    pub rideable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub categories: Vec<Category>,
    pub attributes: Vec<String>,
    /// Predicates, possibly multi-word (`"next to"`).
    pub predicates: Vec<(String, Pos)>,
    pub function_words: Vec<(String, Pos)>,
}

fn cat(noun: &str, salience: f64, frequency: f64, agent: bool, rideable: bool) -> Category {
    Category {
        noun: noun.into(),
        salience,
        frequency,
        agent,
        rideable,
    }
}

impl Default for VocabSpec {
    fn default() -> Self {
        let categories = vec![
            cat("man", 1.6, 1.0, true, false),
            cat("woman", 1.6, 1.0, true, false),
            cat("child", 1.5, 0.6, true, false),
            cat("dog", 1.4, 0.6, true, false),
            cat("cat", 1.3, 0.5, true, false),
            cat("horse", 1.3, 0.4, false, true),
            cat("bus", 1.0, 0.4, false, true),
            cat("car", 0.9, 0.7, false, false),
            cat("bike", 0.8, 0.5, false, true),
            cat("kite", 0.8, 0.3, false, false),
            cat("umbrella", 0.6, 0.4, false, false),
            cat("ball", 0.6, 0.4, false, false),
            cat("table", 0.4, 1.2, false, false),
            cat("bench", 0.3, 1.0, false, false),
            cat("chair", 0.2, 1.2, false, false),
            cat("tree", 0.1, 2.5, false, false),
            cat("building", 0.0, 2.5, false, false),
            cat("cup", -0.1, 0.8, false, false),
            cat("plate", -0.2, 0.8, false, false),
            cat("bottle", -0.3, 0.8, false, false),
            cat("lamp", -0.4, 1.2, false, false),
            cat("door", -0.6, 1.5, false, false),
            cat("window", -0.8, 2.5, false, false),
            cat("sign", -1.0, 2.0, false, false),
        ];
        let attributes = [
            "red", "blue", "green", "white", "black", "small", "large", "wooden", "old", "young",
        ]
        .map(String::from)
        .to_vec();
        let predicates = [
            ("on", Pos::Prep),
            ("under", Pos::Prep),
            ("above", Pos::Prep),
            ("below", Pos::Prep),
            ("near", Pos::Prep),
            ("beside", Pos::Prep),
            ("behind", Pos::Prep),
            ("next to", Pos::Prep),
            ("in front of", Pos::Prep),
            ("holding", Pos::Verb),
            ("riding", Pos::Verb),
        ]
        .map(|(w, p)| (w.to_string(), p))
        .to_vec();
        let function_words = [
            ("a", Pos::Det),
            ("and", Pos::Conj),
            ("picture", Pos::Noun),
            ("with", Pos::Prep),
        ]
        .map(|(w, p)| (w.to_string(), p))
        .to_vec();
        Self {
            categories,
            attributes,
            predicates,
            function_words,
        }
    }
}

impl VocabSpec {
    /// Every token with its label, in vocabulary order. Multi-word
    /// predicates contribute each word once.
    pub fn labeled_tokens(&self) -> Result<Vec<(String, Pos)>> {
        let mut out: Vec<(String, Pos)> = Vec::new();
        let mut add = |w: &str, p: Pos| -> Result<()> {
            match out.iter().find(|(t, _)| t == w) {
                Some((_, q)) if *q != p => Err(Error::Config(format!(
                    "token `{w}` labeled both {q} and {p}"
                ))),
                Some(_) => Ok(()),
                None => {
                    out.push((w.to_string(), p));
                    Ok(())
                }
            }
        };
        for c in &self.categories {
            add(&c.noun, Pos::Noun)?;
        }
        for a in &self.attributes {
            add(a, Pos::Adj)?;
        }
        for (phrase, p) in &self.predicates {
            for w in phrase.split_whitespace() {
                add(w, *p)?;
            }
        }
        for (w, p) in &self.function_words {
            add(w, *p)?;
        }
        Ok(out)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.labeled_tokens()?.into_iter().map(|(w, _)| w))
    }
}

/// Noun flags for every vocabulary index.
#[derive(Clone, Debug, PartialEq)]
pub struct PosLexicon {
    nouns: Vec<bool>,
}

impl PosLexicon {
    pub fn is_noun(&self, token: usize) -> bool {
        self.nouns.get(token).copied().unwrap_or(false)
    }

    /// Noun positions of a tokenized caption.
    pub fn noun_mask(&self, tokens: &[usize]) -> Vec<bool> {
        tokens.iter().map(|&t| self.is_noun(t)).collect()
    }
}

/// Builds the noun lookup; every non-reserved token must carry a label.
pub fn pos_labels(vocab: &Vocabulary, labels: &BTreeMap<String, Pos>) -> Result<PosLexicon> {
    let mut nouns = vec![false; vocab.len()];
    for (idx, tok) in vocab.tokens().iter().enumerate() {
        if Vocabulary::is_reserved(idx) {
            continue;
        }
        let pos = labels
            .get(tok)
            .ok_or_else(|| Error::Config(format!("token `{tok}` has no part-of-speech label")))?;
        nouns[idx] = pos.is_noun();
    }
    Ok(PosLexicon { nouns })
}

/// Vocabulary file: one `token<TAB>pos` line per non-reserved token.
pub fn write_vocab_file(path: &Path, labeled: &[(String, Pos)]) -> Result<()> {
    let mut text = String::new();
    for (w, p) in labeled {
        text.push_str(&format!("{w}\t{p}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_vocab_file(path: &Path) -> Result<(Vocabulary, PosLexicon)> {
    let text = fs::read_to_string(path)?;
    let mut words = Vec::new();
    let mut labels = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (w, p) = line.split_once('\t').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected `token<TAB>pos`",
                path.display(),
                k + 1
            ))
        })?;
        labels.insert(w.to_string(), p.trim().parse()?);
        words.push(w.to_string());
    }
    let vocab = Vocabulary::new(words)?;
    let lex = pos_labels(&vocab, &labels)?;
    Ok((vocab, lex))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub objects: (usize, usize),
    pub relations: (usize, usize),
    pub mentions: (usize, usize),
    pub attribute_prob: f64,
    pub image_size: (f64, f64),
    pub seed: u64,
    pub vocab: VocabSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_train: 500,
            num_val: 50,
            num_test: 100,
            objects: (8, 12),
            relations: (6, 20),
            mentions: (2, 4),
            attribute_prob: 0.3,
            image_size: (640.0, 480.0),
            seed: 7,
            vocab: VocabSpec::default(),
        }
    }
}

impl GenConfig {
    pub const KEYS: &'static [&'static str] = &[
        "num_train",
        "num_val",
        "num_test",
        "objects_min",
        "objects_max",
        "relations_min",
        "relations_max",
        "mentions_min",
        "mentions_max",
        "attribute_prob",
        "seed",
    ];

    pub fn num_scenes(&self) -> usize {
        self.num_train + self.num_val + self.num_test
    }

    pub fn validate(&self) -> Result<()> {
        let (n_min, n_max) = self.objects;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if n_min < 2 {
            return bad("objects_min must be at least 2");
        }
        if n_min > n_max || self.relations.0 > self.relations.1 || self.mentions.0 > self.mentions.1
        {
            return bad("every range needs min <= max");
        }
        if self.mentions.1 > n_max {
            return bad("mentions_max cannot exceed objects_max");
        }
        if !(0.0..=1.0).contains(&self.attribute_prob) {
            return bad("attribute_prob must lie in [0, 1]");
        }
        if n_max > self.vocab.categories.len() {
            return Err(Error::Config(format!(
                "{} categories cannot fill scenes of {n_max} uniquely categorized objects",
                self.vocab.categories.len()
            )));
        }
        if self
            .vocab
            .categories
            .iter()
            .any(|c| !(c.frequency > 0.0 && c.frequency.is_finite()))
        {
            return bad("category frequencies must be positive");
        }
        if self.image_size.0 < 64.0 || self.image_size.1 < 64.0 {
            return bad("image must be at least 64x64");
        }
        self.vocab.labeled_tokens()?;
        Ok(())
    }

    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!("num_train", self.num_train);
        set!("num_val", self.num_val);
        set!("num_test", self.num_test);
        set!("objects_min", self.objects.0);
        set!("objects_max", self.objects.1);
        set!("relations_min", self.relations.0);
        set!("relations_max", self.relations.1);
        set!("mentions_min", self.mentions.0);
        set!("mentions_max", self.mentions.1);
        set!("attribute_prob", self.attribute_prob);
        set!("seed", self.seed);
        self.validate()
    }

    /// Split name and local index of a global scene index.
    pub fn split_of(&self, index: usize) -> (&'static str, usize) {
        if index < self.num_train {
            ("train", index)
        } else if index < self.num_train + self.num_val {
            ("val", index - self.num_train)
        } else {
            ("test", index - self.num_train - self.num_val)
        }
    }
}

struct Lookup {
    vocab: Vocabulary,
}

impl Lookup {
    fn tok(&self, w: &str) -> usize {
        self.vocab
            .get(w)
            .expect("generator words are in the vocabulary")
    }

    fn phrase(&self, p: &str) -> Vec<usize> {
        p.split_whitespace().map(|w| self.tok(w)).collect()
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

/// Generates scene `index`. Deterministic in `(config.seed, index)`.
pub fn generate_scene(config: &GenConfig, index: usize) -> Result<SceneRecord> {
    config.validate()?;
    let lookup = Lookup {
        vocab: config.vocab.vocabulary()?,
    };
    Ok(generate_with(config, &lookup, index))
}

fn generate_with(config: &GenConfig, lx: &Lookup, index: usize) -> SceneRecord {
    let mut rng = rng_for(&[config.seed, index as u64, 0x5CE7E]);
    let spec = &config.vocab;
    let (img_w, img_h) = config.image_size;
    let n = uniform_in(&mut rng, config.objects);

    // weighted sampling without replacement: smallest exponential race times
    let mut race: Vec<(f64, usize)> = spec
        .categories
        .iter()
        .enumerate()
        .map(|(c, cat)| (-(1.0 - rng.gen::<f64>()).ln() / cat.frequency, c))
        .collect();
    race.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let cats: Vec<usize> = race[..n].iter().map(|&(_, c)| c).collect();

    let mut objects = Vec::with_capacity(n);
    let mut salience = Vec::with_capacity(n);
    for (k, &c) in cats.iter().enumerate() {
        let w = rng.gen_range(0.06..0.4) * img_w;
        let h = rng.gen_range(0.08..0.45) * img_h;
        let cx = rng.gen_range(w / 2.0..img_w - w / 2.0);
        let cy = rng.gen_range(h / 2.0..img_h - h / 2.0);
        let attribute_words = if rng.gen::<f64>() < config.attribute_prob {
            vec![lx.tok(
                spec.attributes
                    .choose(&mut rng)
                    .expect("attributes present"),
            )]
        } else {
            vec![]
        };
        let area_frac = (w * h) / (img_w * img_h);
        salience
            .push(spec.categories[c].salience + 3.0 * area_frac.sqrt() + 0.3 * gaussian(&mut rng));
        objects.push(SceneObject {
            id: k + 1,
            bbox: BBox::new(cx, cy, w, h).expect("positive size"),
            category: lx.tok(&spec.categories[c].noun),
            attribute_words,
        });
    }

    let mut by_salience: Vec<usize> = (0..n).collect();
    by_salience.sort_by(|&a, &b| salience[b].total_cmp(&salience[a]).then(a.cmp(&b)));
    let k = uniform_in(&mut rng, config.mentions).min(n);
    let mentioned = &by_salience[..k];

    let mut relations = Vec::new();
    let m = uniform_in(&mut rng, config.relations).min(n * (n - 1));
    let mut pool: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    pool.shuffle(&mut rng);
    for &(i, j) in &pool[..m] {
        let pred = predicate(&mut rng, spec, &cats, &objects, i, j);
        let mut words = objects[i].attribute_words.clone();
        words.push(objects[i].category);
        words.extend(lx.phrase(pred));
        words.extend(&objects[j].attribute_words);
        words.push(objects[j].category);
        words.push(EOS);
        relations.push(RelationalCaption {
            subject_id: objects[i].id,
            object_id: objects[j].id,
            words,
        });
    }

    let a = lx.tok("a");
    let mut caption = Vec::new();
    if mentioned.is_empty() {
        caption.extend([a, lx.tok("picture")]);
    } else {
        caption.extend([a, objects[mentioned[0]].category]);
        if let Some(&second) = mentioned.get(1) {
            let pred = predicate(&mut rng, spec, &cats, &objects, mentioned[0], second);
            caption.extend(lx.phrase(pred));
            caption.extend([a, objects[second].category]);
        }
        for &rest in mentioned.iter().skip(2) {
            caption.extend([lx.tok("and"), a, objects[rest].category]);
        }
    }
    caption.push(EOS);

    let important_flags = important_flags(&caption, &relations, &objects);
    let (split, local) = config.split_of(index);
    SceneRecord {
        image_id: format!("{split}_{local:04}"),
        objects,
        relations,
        image_caption: caption,
        important_flags,
    }
}

fn predicate<'a>(
    rng: &mut ChaCha8Rng,
    spec: &'a VocabSpec,
    cats: &[usize],
    objects: &[SceneObject],
    i: usize,
    j: usize,
) -> &'a str {
    let (ci, cj) = (&spec.categories[cats[i]], &spec.categories[cats[j]]);
    let name = |w: &str| -> &'a str {
        spec.predicates
            .iter()
            .find(|(p, _)| p == w)
            .map_or("near", |(p, _)| p.as_str())
    };
    if ci.agent && rng.gen::<f64>() < 0.4 {
        return if cj.rideable {
            name("riding")
        } else {
            name("holding")
        };
    }
    let (bi, bj) = (&objects[i].bbox, &objects[j].bbox);
    let (dx, dy) = (bj.cx - bi.cx, bj.cy - bi.cy);
    let choices: &[&str] = if dy.abs() > dx.abs() {
        if dy > 0.0 {
            &["above", "on"]
        } else {
            &["under", "below"]
        }
    } else {
        &["next to", "near", "beside", "behind", "in front of"]
    };
    name(choices.choose(rng).expect("non-empty"))
}

/// Relation `k` is important iff both endpoint categories occur in the
/// caption.
pub fn important_flags(
    caption: &[usize],
    relations: &[RelationalCaption],
    objects: &[SceneObject],
) -> Vec<bool> {
    let category = |id: usize| objects.iter().find(|o| o.id == id).map(|o| o.category);
    relations
        .iter()
        .map(|r| match (category(r.subject_id), category(r.object_id)) {
            (Some(a), Some(b)) => caption.contains(&a) && caption.contains(&b),
            _ => false,
        })
        .collect()
}

/// A generated corpus split three ways.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub vocab: Vocabulary,
    pub labels: Vec<(String, Pos)>,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

pub fn generate_dataset(config: &GenConfig) -> Result<SynthDataset> {
    config.validate()?;
    let labels = config.vocab.labeled_tokens()?;
    let lookup = Lookup {
        vocab: config.vocab.vocabulary()?,
    };
    let mut scenes: Vec<SceneRecord> = (0..config.num_scenes())
        .map(|i| generate_with(config, &lookup, i))
        .collect();
    let test = scenes.split_off(config.num_train + config.num_val);
    let val = scenes.split_off(config.num_train);
    Ok(SynthDataset {
        vocab: lookup.vocab,
        labels,
        train: scenes,
        val,
        test,
    })
}

pub const VOCAB_FILE: &str = "vocab.tsv";

pub fn split_file(split: &str) -> String {
    format!("{split}.jsonl")
}

impl SynthDataset {
    /// Writes `vocab.tsv` and one JSON-lines file per split.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_vocab_file(&dir.join(VOCAB_FILE), &self.labels)?;
        for (name, recs) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            crate::dataset::save_dataset(recs, &self.vocab, &dir.join(split_file(name)))?;
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Result<PosLexicon> {
        let labels: BTreeMap<String, Pos> = self.labels.iter().cloned().collect();
        pos_labels(&self.vocab, &labels)
    }
}
