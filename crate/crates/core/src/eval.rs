//! Caption and relationship metrics: METEOR-lite, corpus BLEU, dense
//! relational mAP, image-level recall and important-relationship recall.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{box_iou, content_words, BBox, SceneRecord, Vocabulary};

/// Language thresholds for METEOR-lite matching.
pub const LANGUAGE_THRESHOLDS: [f64; 6] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25];
/// Localization thresholds for mAP.
pub const IOU_THRESHOLDS: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.6];
/// Localization threshold for the recall metrics.
pub const RECALL_IOU: f64 = 0.5;
pub const RECALL_KS: [usize; 3] = [20, 50, 100];

/// Exact-match METEOR: harmonic mean weighted towards recall, times a
/// fragmentation penalty.
pub fn meteor_lite<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        log::debug!("meteor_lite: empty candidate or reference scores 0");
        return 0.0;
    }
    let (matches, chunks) = align(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f * (1.0 - penalty)
}

/// Greedy alignment: repeatedly links the longest common run of unaligned
/// words (earliest candidate position, then earliest reference position,
/// on ties). Returns `(matches, chunks)`.
fn align<T: PartialEq>(cand: &[T], refr: &[T]) -> (usize, usize) {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; refr.len()];
    let mut links: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut best = (0, 0, 0);
        for i in 0..cand.len() {
            for j in 0..refr.len() {
                let mut len = 0;
                while i + len < cand.len()
                    && j + len < refr.len()
                    && !used_c[i + len]
                    && !used_r[j + len]
                    && cand[i + len] == refr[j + len]
                {
                    len += 1;
                }
                if len > best.2 {
                    best = (i, j, len);
                }
            }
        }
        let (i, j, len) = best;
        if len == 0 {
            break;
        }
        for k in 0..len {
            used_c[i + k] = true;
            used_r[j + k] = true;
            links.push((i + k, j + k));
        }
    }
    links.sort_unstable();
    let mut chunks = 0;
    for (k, &(c, r)) in links.iter().enumerate() {
        if k == 0 || links[k - 1].0 + 1 != c || links[k - 1].1 + 1 != r {
            chunks += 1;
        }
    }
    (links.len(), chunks)
}

/// Corpus BLEU-n with uniform weights and brevity penalty.
pub fn bleu<T: PartialEq + std::hash::Hash + Eq + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    n: usize,
) -> f64 {
    assert_eq!(
        candidates.len(),
        references.len(),
        "one reference per candidate"
    );
    if n == 0 {
        return 0.0;
    }
    let mut clipped = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for k in 1..=n {
            if c.len() < k {
                continue;
            }
            let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
            for g in r.windows(k) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
            for g in c.windows(k) {
                *cand_counts.entry(g).or_default() += 1;
            }
            for (g, cnt) in cand_counts {
                clipped[k - 1] += cnt.min(ref_counts.get(g).copied().unwrap_or(0));
            }
            total[k - 1] += c.len() + 1 - k;
        }
    }
    if c_len == 0 || clipped.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = clipped
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * log_p.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedRelation {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub words: Vec<String>,
    pub score: f64,
}

/// One image's topic scene graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub caption: Vec<String>,
    /// Sorted by descending score.
    pub relations: Vec<PredictedRelation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtRelation {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub words: Vec<String>,
    pub important: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtImage {
    pub image_id: String,
    pub caption: Vec<String>,
    pub relations: Vec<GtRelation>,
}

impl GtImage {
    pub fn from_record(r: &SceneRecord, vocab: &Vocabulary) -> Self {
        let bbox = |id: usize| r.object(id).map(|o| o.bbox).expect("validated record");
        Self {
            image_id: r.image_id.clone(),
            caption: content_words(&r.image_caption, vocab),
            relations: r
                .relations
                .iter()
                .zip(&r.important_flags)
                .map(|(rel, &important)| GtRelation {
                    sub_box: bbox(rel.subject_id),
                    obj_box: bbox(rel.object_id),
                    words: content_words(&rel.words, vocab),
                    important,
                })
                .collect(),
        }
    }
}

fn by_image(preds: &[Prediction]) -> HashMap<&str, &Prediction> {
    preds.iter().map(|p| (p.image_id.as_str(), p)).collect()
}

/// Prediction indices by descending score, ties by position.
fn sorted_indices(rels: &[PredictedRelation]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rels.len()).collect();
    idx.sort_by(|&a, &b| rels[b].score.total_cmp(&rels[a].score).then(a.cmp(&b)));
    idx
}

fn localization(p: &PredictedRelation, g: &GtRelation) -> f64 {
    box_iou(&p.sub_box, &g.sub_box).min(box_iou(&p.obj_box, &g.obj_box))
}

/// Mean AP over the 6 x 5 grid of language and IoU thresholds.
pub fn relational_map(predictions: &[Prediction], ground_truth: &[GtImage]) -> Result<f64> {
    let total_gt: usize = ground_truth.iter().map(|g| g.relations.len()).sum();
    if total_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let preds = by_image(predictions);
    // (score, image_id, index, image position) over all predictions
    let mut pooled: Vec<(f64, &str, usize, usize)> = Vec::new();
    // Per image: localization and METEOR of every (prediction, gt) pair.
    let mut tables: Vec<Vec<Vec<(f64, f64)>>> = Vec::new();
    for (gi, gt) in ground_truth.iter().enumerate() {
        let rels: &[PredictedRelation] = preds
            .get(gt.image_id.as_str())
            .map_or(&[], |p| &p.relations);
        tables.push(
            rels.iter()
                .map(|p| {
                    gt.relations
                        .iter()
                        .map(|g| (localization(p, g), meteor_lite(&p.words, &g.words)))
                        .collect()
                })
                .collect(),
        );
        for (k, p) in rels.iter().enumerate() {
            pooled.push((p.score, gt.image_id.as_str(), k, gi));
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));

    let mut sum_ap = 0.0;
    for &theta in &LANGUAGE_THRESHOLDS {
        for &t_iou in &IOU_THRESHOLDS {
            let mut taken: Vec<Vec<bool>> = ground_truth
                .iter()
                .map(|g| vec![false; g.relations.len()])
                .collect();
            let (mut tp, mut ap) = (0usize, 0.0);
            for (rank, &(_, _, k, gi)) in pooled.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (j, &(loc, met)) in tables[gi][k].iter().enumerate() {
                    if taken[gi][j] || loc <= t_iou || met <= theta {
                        continue;
                    }
                    if best.is_none_or(|(_, b)| loc > b) {
                        best = Some((j, loc));
                    }
                }
                if let Some((j, _)) = best {
                    taken[gi][j] = true;
                    tp += 1;
                    ap += tp as f64 / (rank + 1) as f64;
                }
            }
            sum_ap += ap / total_gt as f64;
        }
    }
    Ok(sum_ap / (LANGUAGE_THRESHOLDS.len() * IOU_THRESHOLDS.len()) as f64)
}

/// Recall of important relationships among each image's top-`k`
/// predictions, averaged over images that have any. With `with_language`
/// a match also needs METEOR above each language threshold and the result
/// is averaged over thresholds.
pub fn important_recall_at_k(
    predictions: &[Prediction],
    ground_truth: &[GtImage],
    k: usize,
    with_language: bool,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::Usage("K must be at least 1".into()));
    }
    let preds = by_image(predictions);
    let thresholds: &[f64] = if with_language {
        &LANGUAGE_THRESHOLDS
    } else {
        &[f64::NEG_INFINITY]
    };
    let mut per_threshold = vec![0.0; thresholds.len()];
    let mut images = 0usize;
    for gt in ground_truth {
        let important: Vec<&GtRelation> = gt.relations.iter().filter(|r| r.important).collect();
        if important.is_empty() {
            continue;
        }
        images += 1;
        let rels: &[PredictedRelation] = preds
            .get(gt.image_id.as_str())
            .map_or(&[], |p| &p.relations);
        let top: Vec<&PredictedRelation> = sorted_indices(rels)
            .into_iter()
            .take(k)
            .map(|i| &rels[i])
            .collect();
        for (ti, &theta) in thresholds.iter().enumerate() {
            let hit = important
                .iter()
                .filter(|g| {
                    top.iter().any(|p| {
                        localization(p, g) > RECALL_IOU
                            && (!with_language || meteor_lite(&p.words, &g.words) > theta)
                    })
                })
                .count();
            per_threshold[ti] += hit as f64 / important.len() as f64;
        }
    }
    if images == 0 {
        return Ok(0.0);
    }
    Ok(per_threshold.iter().map(|v| v / images as f64).sum::<f64>() / thresholds.len() as f64)
}

/// Fraction of ground-truth relational captions matched by any predicted
/// caption of the same image (boxes ignored), averaged over the language
/// thresholds.
pub fn image_level_recall(predictions: &[Prediction], ground_truth: &[GtImage]) -> f64 {
    let preds = by_image(predictions);
    let total: usize = ground_truth.iter().map(|g| g.relations.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for &theta in &LANGUAGE_THRESHOLDS {
        let mut hit = 0usize;
        for gt in ground_truth {
            let rels: &[PredictedRelation] = preds
                .get(gt.image_id.as_str())
                .map_or(&[], |p| &p.relations);
            hit += gt
                .relations
                .iter()
                .filter(|g| rels.iter().any(|p| meteor_lite(&p.words, &g.words) > theta))
                .count();
        }
        sum += hit as f64 / total as f64;
    }
    sum / LANGUAGE_THRESHOLDS.len() as f64
}

/// All metrics as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub img_level_recall: f64,
    pub recall_at_20: f64,
    pub recall_at_50: f64,
    pub recall_at_100: f64,
    pub recall_ns_at_20: f64,
    pub recall_ns_at_50: f64,
    pub recall_ns_at_100: f64,
    pub mean_recall: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub meteor: f64,
}

impl MetricReport {
    /// Values times 100, rounded to two decimals.
    pub fn to_table_json(&self) -> serde_json::Value {
        let r = |v: f64| (v * 10000.0).round() / 100.0;
        serde_json::json!({
            "map": r(self.map),
            "img_level_recall": r(self.img_level_recall),
            "recall_at_20": r(self.recall_at_20),
            "recall_at_50": r(self.recall_at_50),
            "recall_at_100": r(self.recall_at_100),
            "recall_ns_at_20": r(self.recall_ns_at_20),
            "recall_ns_at_50": r(self.recall_ns_at_50),
            "recall_ns_at_100": r(self.recall_ns_at_100),
            "mean_recall": r(self.mean_recall),
            "bleu1": r(self.bleu1),
            "bleu4": r(self.bleu4),
            "meteor": r(self.meteor),
        })
    }
}

pub fn evaluate(predictions: &[Prediction], ground_truth: &[GtImage]) -> Result<MetricReport> {
    let r = |k, lang| important_recall_at_k(predictions, ground_truth, k, lang);
    let (r20, r50, r100) = (r(20, true)?, r(50, true)?, r(100, true)?);
    let (n20, n50, n100) = (r(20, false)?, r(50, false)?, r(100, false)?);
    let preds = by_image(predictions);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for gt in ground_truth {
        cands.push(
            preds
                .get(gt.image_id.as_str())
                .map_or_else(Vec::new, |p| p.caption.clone()),
        );
        refs.push(gt.caption.clone());
    }
    let meteor = if cands.is_empty() {
        0.0
    } else {
        cands
            .iter()
            .zip(&refs)
            .map(|(c, r)| meteor_lite(c, r))
            .sum::<f64>()
            / cands.len() as f64
    };
    Ok(MetricReport {
        map: relational_map(predictions, ground_truth)?,
        img_level_recall: image_level_recall(predictions, ground_truth),
        recall_at_20: r20,
        recall_at_50: r50,
        recall_at_100: r100,
        recall_ns_at_20: n20,
        recall_ns_at_50: n50,
        recall_ns_at_100: n100,
        mean_recall: (r20 + r50 + r100 + n20 + n50 + n100) / 6.0,
        bleu1: bleu(&cands, &refs, 1),
        bleu4: bleu(&cands, &refs, 4),
        meteor,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationLine {
    sub_box: [f64; 4],
    obj_box: [f64; 4],
    words: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    image_id: String,
    caption: String,
    relations: Vec<RelationLine>,
}

fn box_array(b: &BBox) -> [f64; 4] {
    [b.cx, b.cy, b.w, b.h]
}

pub fn prediction_to_json(p: &Prediction) -> Result<String> {
    let line = PredictionLine {
        image_id: p.image_id.clone(),
        caption: p.caption.join(" "),
        relations: p
            .relations
            .iter()
            .map(|r| RelationLine {
                sub_box: box_array(&r.sub_box),
                obj_box: box_array(&r.obj_box),
                words: r.words.join(" "),
                score: r.score,
            })
            .collect(),
    };
    Ok(serde_json::to_string(&line)?)
}

pub fn prediction_from_json(s: &str, line_no: usize) -> Result<Prediction> {
    let line: PredictionLine = serde_json::from_str(s)
        .map_err(|e| Error::schema(format!("line {line_no}"), "prediction", e.to_string()))?;
    let rec = line.image_id.clone();
    let mk = |b: [f64; 4], field: &str| {
        BBox::new(b[0], b[1], b[2], b[3])
            .map_err(|e| Error::schema(rec.as_str(), field, e.to_string()))
    };
    let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let mut relations = Vec::with_capacity(line.relations.len());
    for r in &line.relations {
        if !r.score.is_finite() {
            return Err(Error::schema(
                rec.as_str(),
                "relations.score",
                "score must be finite",
            ));
        }
        relations.push(PredictedRelation {
            sub_box: mk(r.sub_box, "relations.sub_box")?,
            obj_box: mk(r.obj_box, "relations.obj_box")?,
            words: split(&r.words),
            score: r.score,
        });
    }
    Ok(Prediction {
        image_id: line.image_id,
        caption: split(&line.caption),
        relations,
    })
}

pub fn save_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        writeln!(out, "{}", prediction_to_json(p)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(prediction_from_json(&line, k + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
