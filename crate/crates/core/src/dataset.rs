//! JSON-lines scene files.
//!
//! One record per line:
//! `{"image_id", "objects": [{id, box: [cx, cy, w, h], category, attributes}],
//!   "relations": [{sub, obj, words, important}], "caption"}`.
//! Words and categories are stored as text and resolved against a
//! [`Vocabulary`] on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    content_words, tokenize, BBox, RelationalCaption, SceneObject, SceneRecord, Vocabulary, UNK,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectLine {
    id: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    category: String,
    #[serde(default)]
    attributes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationLine {
    sub: usize,
    obj: usize,
    words: String,
    important: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    image_id: String,
    objects: Vec<ObjectLine>,
    relations: Vec<RelationLine>,
    caption: String,
}

fn to_line(r: &SceneRecord, vocab: &Vocabulary) -> SceneLine {
    SceneLine {
        image_id: r.image_id.clone(),
        objects: r
            .objects
            .iter()
            .map(|o| ObjectLine {
                id: o.id,
                bbox: [o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h],
                category: vocab.token(o.category).to_string(),
                attributes: o
                    .attribute_words
                    .iter()
                    .map(|&a| vocab.token(a).to_string())
                    .collect(),
            })
            .collect(),
        relations: r
            .relations
            .iter()
            .zip(&r.important_flags)
            .map(|(rel, &important)| RelationLine {
                sub: rel.subject_id,
                obj: rel.object_id,
                words: content_words(&rel.words, vocab).join(" "),
                important,
            })
            .collect(),
        caption: content_words(&r.image_caption, vocab).join(" "),
    }
}

fn from_line(line: SceneLine, vocab: &Vocabulary) -> Result<SceneRecord> {
    let rec = line.image_id.clone();
    let known = |field: &str, w: &str| {
        vocab
            .get(w)
            .ok_or_else(|| Error::schema(&rec, field, format!("token `{w}` not in vocabulary")))
    };
    let mut objects = Vec::with_capacity(line.objects.len());
    for o in line.objects {
        let [cx, cy, w, h] = o.bbox;
        let bbox = BBox::new(cx, cy, w, h)
            .map_err(|e| Error::schema(&rec, "objects.box", e.to_string()))?;
        let category = known("objects.category", &o.category)?;
        let attribute_words = o
            .attributes
            .iter()
            .map(|a| known("objects.attributes", a))
            .collect::<Result<Vec<_>>>()?;
        objects.push(SceneObject {
            id: o.id,
            bbox,
            category,
            attribute_words,
        });
    }
    let mut relations = Vec::with_capacity(line.relations.len());
    let mut important_flags = Vec::with_capacity(line.relations.len());
    for r in line.relations {
        let words = tokenize(&r.words, vocab)
            .map_err(|e| Error::schema(&rec, "relations.words", e.to_string()))?;
        if words.contains(&UNK) {
            return Err(Error::schema(
                &rec,
                "relations.words",
                format!("out-of-vocabulary word in `{}`", r.words),
            ));
        }
        relations.push(RelationalCaption {
            subject_id: r.sub,
            object_id: r.obj,
            words,
        });
        important_flags.push(r.important);
    }
    let image_caption = tokenize(&line.caption, vocab)
        .map_err(|e| Error::schema(&rec, "caption", e.to_string()))?;
    if image_caption.contains(&UNK) {
        return Err(Error::schema(&rec, "caption", "out-of-vocabulary word"));
    }
    let record = SceneRecord {
        image_id: line.image_id,
        objects,
        relations,
        image_caption,
        important_flags,
    };
    record.validate(vocab.len())?;
    Ok(record)
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_json(r: &SceneRecord, vocab: &Vocabulary) -> Result<String> {
    Ok(serde_json::to_string(&to_line(r, vocab))?)
}

pub fn record_from_json(s: &str, vocab: &Vocabulary) -> Result<SceneRecord> {
    let line: SceneLine = serde_json::from_str(s).map_err(|e| {
        let id = serde_json::from_str::<serde_json::Value>(s)
            .ok()
            .and_then(|v| {
                v.get("image_id")
                    .and_then(|x| x.as_str())
                    .map(str::to_string)
            })
            .unwrap_or_else(|| "?".to_string());
        Error::schema(id, "record", e.to_string())
    })?;
    from_line(line, vocab)
}

pub fn save_dataset(records: &[SceneRecord], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        w.write_all(record_to_json(r, vocab)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<SceneRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = record_from_json(&line, vocab).map_err(|e| match e {
            Error::Schema { record, field, msg } => Error::Schema {
                record,
                field,
                msg: format!("line {}: {msg}", lineno + 1),
            },
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EOS;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "dog", "cat", "on", "mat", "red"]).unwrap()
    }

    fn record(v: &Vocabulary) -> SceneRecord {
        SceneRecord {
            image_id: "img-1".into(),
            objects: vec![
                SceneObject {
                    id: 0,
                    bbox: BBox::new(10.5, 20.25, 4.0, 3.0).unwrap(),
                    category: v.get("dog").unwrap(),
                    attribute_words: vec![v.get("red").unwrap()],
                },
                SceneObject {
                    id: 7,
                    bbox: BBox::new(1.0 / 3.0, 2.0, 0.1, 9.0).unwrap(),
                    category: v.get("mat").unwrap(),
                    attribute_words: vec![],
                },
            ],
            relations: vec![RelationalCaption {
                subject_id: 0,
                object_id: 7,
                words: vec![
                    v.get("dog").unwrap(),
                    v.get("on").unwrap(),
                    v.get("mat").unwrap(),
                    EOS,
                ],
            }],
            image_caption: vec![v.get("a").unwrap(), v.get("dog").unwrap(), EOS],
            important_flags: vec![true],
        }
    }

    #[test]
    fn save_then_load_is_identity() {
        let v = vocab();
        let recs = vec![record(&v), record(&v)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&recs, &v, &p).unwrap();
        let back = load_dataset(&p, &v).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn schema_errors_name_record_and_field() {
        let v = vocab();
        let bad = r#"{"image_id":"x9","objects":[{"id":0,"box":[0,0,1,1],"category":"unicorn","attributes":[]}],"relations":[],"caption":"a dog"}"#;
        match record_from_json(bad, &v) {
            Err(Error::Schema { record, field, .. }) => {
                assert_eq!(record, "x9");
                assert_eq!(field, "objects.category");
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_rel = r#"{"image_id":"x1","objects":[{"id":0,"box":[0,0,1,1],"category":"dog","attributes":[]}],"relations":[{"sub":0,"obj":5,"words":"dog on mat","important":false}],"caption":"a dog"}"#;
        assert!(
            matches!(record_from_json(bad_rel, &v), Err(Error::Schema { field, .. }) if field == "relations")
        );
        let missing = r#"{"image_id":"x2","objects":[],"relations":[]}"#;
        assert!(
            matches!(record_from_json(missing, &v), Err(Error::Schema { record, .. }) if record == "x2")
        );
        let bad_box = r#"{"image_id":"x3","objects":[{"id":0,"box":[0,0,0,1],"category":"dog","attributes":[]}],"relations":[],"caption":"a dog"}"#;
        assert!(
            matches!(record_from_json(bad_box, &v), Err(Error::Schema { field, .. }) if field == "objects.box")
        );
    }
}
