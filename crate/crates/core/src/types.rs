//! Domain vocabulary shared by every other module: boxes, tokens, scenes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Axis-aligned box in center form, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Usage(format!(
                "invalid box ({cx}, {cy}, {w}, {h}): width and height must be positive"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union. Boxes that only share an edge have zero overlap.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Token table. Indices 0-3 are `<bos>`, `<eos>`, `<pad>`, `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string())?;
        }
        for w in words {
            v.push(w.into())?;
        }
        Ok(v)
    }

    fn push(&mut self, tok: String) -> Result<usize> {
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid token `{tok}`")));
        }
        if self.index.contains_key(&tok) {
            return Err(Error::Config(format!("duplicate token `{tok}`")));
        }
        let i = self.tokens.len();
        self.index.insert(tok.clone(), i);
        self.tokens.push(tok);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: usize) -> &str {
        self.tokens.get(idx).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved tokens in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn is_reserved(idx: usize) -> bool {
        idx < RESERVED.len()
    }
}

/// Lowercases and strips `.,!?;:`.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .filter(|c| !matches!(c, '.' | ',' | '!' | '?' | ';' | ':'))
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized, whitespace-split, unknown words mapped to `<unk>`, `<eos>`
/// appended.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let mut out: Vec<usize> = norm
        .split(' ')
        .map(|w| vocab.get(w).unwrap_or(UNK))
        .collect();
    out.push(EOS);
    Ok(out)
}

/// Inverse of [`tokenize`] for in-vocabulary text. Stops at the first
/// `<eos>`; skips `<bos>`/`<pad>`.
pub fn detokenize(tokens: &[usize], vocab: &Vocabulary) -> String {
    content_words(tokens, vocab).join(" ")
}

pub fn content_words(tokens: &[usize], vocab: &Vocabulary) -> Vec<String> {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t != BOS && t != PAD)
        .map(|&t| vocab.token(t).to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub id: usize,
    pub bbox: BBox,
    pub category: usize,
    pub attribute_words: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationalCaption {
    pub subject_id: usize,
    pub object_id: usize,
    /// Token indices ending in `<eos>`.
    pub words: Vec<usize>,
}

/// One image: objects, relational captions, image caption and the
/// caption-derived importance flags (evaluation and upper-bound training
/// only).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<RelationalCaption>,
    pub image_caption: Vec<usize>,
    pub important_flags: Vec<bool>,
}

impl SceneRecord {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Position of object `id` in `objects`.
    pub fn object_index(&self, id: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        let rec = &self.image_id;
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if !seen.insert(o.id) {
                return Err(Error::schema(
                    rec,
                    "objects.id",
                    format!("duplicate object id {}", o.id),
                ));
            }
            if o.category >= vocab_len || Vocabulary::is_reserved(o.category) {
                return Err(Error::schema(
                    rec,
                    "objects.category",
                    format!("invalid category index {}", o.category),
                ));
            }
        }
        for r in &self.relations {
            if r.subject_id == r.object_id {
                return Err(Error::schema(
                    rec,
                    "relations",
                    format!("subject equals object ({})", r.subject_id),
                ));
            }
            for id in [r.subject_id, r.object_id] {
                if !seen.contains(&id) {
                    return Err(Error::schema(
                        rec,
                        "relations",
                        format!("unknown object id {id}"),
                    ));
                }
            }
            if r.words.last() != Some(&EOS) {
                return Err(Error::schema(rec, "relations.words", "not EOS-terminated"));
            }
        }
        if self.image_caption.len() < 2 || self.image_caption.last() != Some(&EOS) {
            return Err(Error::schema(rec, "caption", "empty or not EOS-terminated"));
        }
        if self.important_flags.len() != self.relations.len() {
            return Err(Error::schema(
                rec,
                "relations.important",
                "flag count differs from relation count",
            ));
        }
        Ok(())
    }
}

/// A scene as seen by weakly supervised training: identical to
/// [`SceneRecord`] minus the importance flags, which this type cannot carry.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakScene {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<RelationalCaption>,
    pub image_caption: Vec<usize>,
}

impl From<&SceneRecord> for WeakScene {
    fn from(r: &SceneRecord) -> Self {
        Self {
            image_id: r.image_id.clone(),
            objects: r.objects.clone(),
            relations: r.relations.clone(),
            image_caption: r.image_caption.clone(),
        }
    }
}

impl WeakScene {
    pub fn object_index(&self, id: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }
}
