//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers or strings and returns a JSON string, so
//! the page needs no glue beyond what wasm-bindgen generates. The `*_json`
//! functions hold the logic and are what the tests call.

use serde::Serialize;
use tsg_core::distill::{assemble_second_order, pool_alpha, Pooling};
use tsg_core::eval::{meteor_lite, LANGUAGE_THRESHOLDS};
use tsg_core::features::{all_ordered_pairs, geometry_feature};
use tsg_core::linalg::Mat;
use tsg_core::types::{box_iou, BBox};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct RankedPair {
    subject: usize,
    object: usize,
    delta: f64,
    beta: f64,
}

#[derive(Serialize)]
struct Importance {
    gamma: Vec<f64>,
    /// Every ordered pair, highest `beta` first.
    pairs: Vec<RankedPair>,
}

/// Pools an `objects x steps` attention matrix (row-major) and ranks every
/// ordered object pair by second-order attention.
pub fn importance_json(
    alpha: &[f64],
    objects: usize,
    steps: usize,
    pooling: &str,
) -> Result<String, String> {
    if objects < 2 || steps == 0 {
        return Err("need at least two objects and one step".into());
    }
    if alpha.len() != objects * steps {
        return Err(format!(
            "expected {} attention values, got {}",
            objects * steps,
            alpha.len()
        ));
    }
    let pooling: Pooling = pooling
        .parse()
        .map_err(|e: tsg_core::Error| e.to_string())?;
    let alpha = Mat::from_vec(objects, steps, alpha.to_vec());
    let pooled = pool_alpha(&alpha, pooling, None).map_err(|e| e.to_string())?;
    let pairs = all_ordered_pairs(objects);
    let (delta, beta) = assemble_second_order(&pooled, &pairs).map_err(|e| e.to_string())?;
    let mut ranked: Vec<RankedPair> = pairs
        .iter()
        .zip(delta.iter().zip(&beta))
        .map(|(&(subject, object), (&delta, &beta))| RankedPair {
            subject,
            object,
            delta,
            beta,
        })
        .collect();
    ranked.sort_by(|a, b| b.beta.total_cmp(&a.beta));
    serde_json::to_string(&Importance {
        gamma: pooled.gamma,
        pairs: ranked,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Geometry {
    iou: f64,
    /// `[dx, dy, scale, aspect_i, aspect_j, iou]` of `j` seen from `i`.
    feature: [f64; 6],
}

/// IoU and relative geometry of two corner-form boxes.
pub fn geometry_json(a: [f64; 4], b: [f64; 4]) -> Result<String, String> {
    let bi = BBox::from_corners(a[0], a[1], a[2], a[3]).map_err(|e| e.to_string())?;
    let bj = BBox::from_corners(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string())?;
    serde_json::to_string(&Geometry {
        iou: box_iou(&bi, &bj),
        feature: geometry_feature(&bi, &bj),
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Meteor {
    score: f64,
    /// Language thresholds the score clears (strictly).
    passes: Vec<f64>,
}

pub fn meteor_json(candidate: &str, reference: &str) -> String {
    let words = |s: &str| {
        s.to_lowercase()
            .split_whitespace()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let score = meteor_lite(&words(candidate), &words(reference));
    let passes = LANGUAGE_THRESHOLDS
        .iter()
        .copied()
        .filter(|&t| score > t)
        .collect();
    serde_json::to_string(&Meteor { score, passes }).expect("plain numbers serialize")
}

#[wasm_bindgen]
pub fn importance(
    alpha: &[f64],
    objects: usize,
    steps: usize,
    pooling: &str,
) -> Result<String, JsError> {
    importance_json(alpha, objects, steps, pooling).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn geometry(
    ax1: f64,
    ay1: f64,
    ax2: f64,
    ay2: f64,
    bx1: f64,
    by1: f64,
    bx2: f64,
    by2: f64,
) -> Result<String, JsError> {
    geometry_json([ax1, ay1, ax2, ay2], [bx1, by1, bx2, by2]).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn meteor(candidate: &str, reference: &str) -> String {
    meteor_json(candidate, reference)
}
