//! Visual, geometry and union features.
//!
//! Raw per-object features come either from [`synth_features`] (a
//! deterministic stand-in for detector ROI features) or from a precomputed
//! little-endian `f32` blob. Projections into the shared `d_l` space are
//! parameterized by the captioner and exist in two forms: plain matrix
//! functions and [`Graph`] builders used during training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::params::{ParamId, ParamStore};
use crate::rng::{gaussian, hash_str, rng_for};
use crate::types::{box_iou, BBox, SceneObject, SceneRecord};

/// Width of the projected geometry branch.
pub const GEOM_PROJ_DIM: usize = 64;
pub const GEOM_DIM: usize = 6;

const CATEGORY_NOISE: f64 = 0.5;
const UNION_NOISE: f64 = 0.1;

/// Relative-position feature of `b_j` seen from `b_i`:
/// `[dx/sqrt(A_i), dy/sqrt(A_i), sqrt(A_j/A_i), w_i/h_i, w_j/h_j, IoU]`.
pub fn geometry_feature(bi: &BBox, bj: &BBox) -> [f64; GEOM_DIM] {
    let si = (bi.w * bi.h).sqrt();
    [
        (bj.cx - bi.cx) / si,
        (bj.cy - bi.cy) / si,
        ((bj.w * bj.h) / (bi.w * bi.h)).sqrt(),
        bi.w / bi.h,
        bj.w / bj.h,
        box_iou(bi, bj),
    ]
}

/// `V' = W_v V + b_v`, column per object.
pub fn project_visual(v: &Mat, w_v: &Mat, b_v: &Mat) -> Result<Mat> {
    if w_v.cols() != v.rows() || b_v.shape() != (w_v.rows(), 1) {
        return Err(Error::Config(format!(
            "project_visual: W_v {:?}, b_v {:?}, V {:?}",
            w_v.shape(),
            b_v.shape(),
            v.shape()
        )));
    }
    Ok(w_v.matmul(v).add_col(b_v))
}

/// `v'_ij = W_u [v_ij ; W_g g_ij + b_g] + b_u`.
pub fn union_feature(
    v_ij: &[f64],
    g_ij: &[f64; GEOM_DIM],
    w_u: &Mat,
    b_u: &Mat,
    w_g: &Mat,
    b_g: &Mat,
) -> Result<Vec<f64>> {
    if w_g.shape() != (GEOM_PROJ_DIM, GEOM_DIM)
        || b_g.shape() != (GEOM_PROJ_DIM, 1)
        || w_u.cols() != v_ij.len() + GEOM_PROJ_DIM
        || b_u.shape() != (w_u.rows(), 1)
    {
        return Err(Error::Config(format!(
            "union_feature: W_u {:?}, b_u {:?}, W_g {:?}, b_g {:?}, |v_ij| = {}",
            w_u.shape(),
            b_u.shape(),
            w_g.shape(),
            b_g.shape(),
            v_ij.len()
        )));
    }
    let g = w_g.matmul(&Mat::col_vec(g_ij.to_vec())).add(b_g);
    let mut x = v_ij.to_vec();
    x.extend_from_slice(g.data());
    Ok(w_u.matmul(&Mat::col_vec(x)).add(b_u).into_vec())
}

/// Raw detector-side features for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub image_id: String,
    pub object_ids: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub categories: Vec<usize>,
    /// `d_v x n`
    pub visual: Mat,
    d_u: usize,
    union_seed: u64,
}

impl RawFeatures {
    pub fn n(&self) -> usize {
        self.object_ids.len()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.object_ids.iter().position(|&o| o == id)
    }

    /// Raw union feature for the ordered pair of object positions `(i, j)`:
    /// a fixed asymmetric mix of both endpoint features plus pair noise.
    pub fn union_raw(&self, i: usize, j: usize) -> Vec<f64> {
        let d_v = self.visual.rows();
        let mut rng = rng_for(&[
            self.union_seed,
            self.object_ids[i] as u64,
            self.object_ids[j] as u64,
        ]);
        (0..self.d_u)
            .map(|k| {
                let a = self.visual.get(k % d_v, i);
                let b = self.visual.get((k + d_v / 2) % d_v, j);
                0.6 * a + 0.4 * b + UNION_NOISE * gaussian(&mut rng)
            })
            .collect()
    }

    pub fn geometry(&self, i: usize, j: usize) -> [f64; GEOM_DIM] {
        geometry_feature(&self.boxes[i], &self.boxes[j])
    }

    /// Wraps externally computed visual features (`d_v x n`, columns in
    /// object order).
    pub fn with_visual(
        image_id: &str,
        objects: &[SceneObject],
        visual: Mat,
        config: &ModelConfig,
    ) -> Result<Self> {
        if visual.shape() != (config.d_v, objects.len()) {
            return Err(Error::Config(format!(
                "precomputed features for `{image_id}` have shape {:?}, expected ({}, {})",
                visual.shape(),
                config.d_v,
                objects.len()
            )));
        }
        Ok(Self {
            image_id: image_id.to_string(),
            object_ids: objects.iter().map(|o| o.id).collect(),
            boxes: objects.iter().map(|o| o.bbox).collect(),
            categories: objects.iter().map(|o| o.category).collect(),
            visual,
            d_u: config.d_u,
            union_seed: union_seed(config.seed, image_id),
        })
    }
}

fn union_seed(seed: u64, image_id: &str) -> u64 {
    crate::rng::mix(&[seed, hash_str(image_id), 0x0417])
}

/// Deterministic synthetic features: a per-category prototype plus
/// per-object noise, with the first two coordinates carrying box scale and
/// aspect.
pub fn synth_features_for(
    image_id: &str,
    objects: &[SceneObject],
    config: &ModelConfig,
) -> RawFeatures {
    let d_v = config.d_v;
    let img = hash_str(image_id);
    let mut visual = Mat::zeros(d_v, objects.len());
    for (j, o) in objects.iter().enumerate() {
        let mut proto_rng = rng_for(&[config.seed, 0xCA7, o.category as u64]);
        let mut noise_rng = rng_for(&[config.seed, img, o.id as u64]);
        for i in 0..d_v {
            let p = gaussian(&mut proto_rng);
            let e = gaussian(&mut noise_rng);
            visual.set(i, j, p + CATEGORY_NOISE * e);
        }
        if d_v >= 2 {
            visual.set(0, j, (o.bbox.w * o.bbox.h).sqrt() / 100.0);
            visual.set(1, j, (o.bbox.w / o.bbox.h).ln());
        }
    }
    RawFeatures::with_visual(image_id, objects, visual, config)
        .expect("shape is constructed to match")
}

pub fn synth_features(record: &SceneRecord, config: &ModelConfig) -> RawFeatures {
    synth_features_for(&record.image_id, &record.objects, config)
}

/// Where raw visual features come from.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum FeatureSource {
    #[default]
    Synthetic,
    /// Per-image `d_v x n` matrices keyed by image id.
    Precomputed(BTreeMap<String, Mat>),
}

impl FeatureSource {
    pub fn raw(&self, record: &SceneRecord, config: &ModelConfig) -> Result<RawFeatures> {
        match self {
            FeatureSource::Synthetic => Ok(synth_features(record, config)),
            FeatureSource::Precomputed(map) => {
                let visual = map.get(&record.image_id).ok_or_else(|| {
                    Error::schema(
                        record.image_id.as_str(),
                        "features",
                        "no precomputed features for this image",
                    )
                })?;
                RawFeatures::with_visual(&record.image_id, &record.objects, visual.clone(), config)
            }
        }
    }
}

/// Projection parameters (`W_v`, `b_v`, `W_g`, `b_g`, `W_u`, `b_u`).
#[derive(Clone, Copy, Debug)]
pub struct FeatureParams {
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
}

impl FeatureParams {
    pub fn init(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = crate::captioner::INIT_SCALE;
        Self {
            w_v: store.insert_uniform("proj.w_v", config.d_l, config.d_v, s, rng),
            b_v: store.insert_zeros("proj.b_v", config.d_l, 1),
            w_g: store.insert_uniform("union.w_g", GEOM_PROJ_DIM, GEOM_DIM, s, rng),
            b_g: store.insert_zeros("union.b_g", GEOM_PROJ_DIM, 1),
            w_u: store.insert_uniform("union.w_u", config.d_l, config.d_u + GEOM_PROJ_DIM, s, rng),
            b_u: store.insert_zeros("union.b_u", config.d_l, 1),
        }
    }

    pub fn resolve(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_v: store.require("proj.w_v")?,
            b_v: store.require("proj.b_v")?,
            w_g: store.require("union.w_g")?,
            b_g: store.require("union.b_g")?,
            w_u: store.require("union.w_u")?,
            b_u: store.require("union.b_u")?,
        })
    }

    /// `V'` as a graph node (`d_l x n`).
    pub fn project_graph(&self, g: &mut Graph, raw: &RawFeatures) -> Var {
        let v = g.constant(raw.visual.clone());
        let (w, b) = (g.param(self.w_v), g.param(self.b_v));
        g.affine(w, v, b)
    }

    /// Projected union features for a list of ordered position pairs
    /// (`d_l x m`).
    pub fn union_graph(&self, g: &mut Graph, raw: &RawFeatures, pairs: &[(usize, usize)]) -> Var {
        let unions: Vec<Vec<f64>> = pairs.iter().map(|&(i, j)| raw.union_raw(i, j)).collect();
        let geoms: Vec<Vec<f64>> = pairs
            .iter()
            .map(|&(i, j)| raw.geometry(i, j).to_vec())
            .collect();
        let u = g.constant(Mat::from_cols(&unions));
        let geo = g.constant(Mat::from_cols(&geoms));
        let (wg, bg, wu, bu) = (
            g.param(self.w_g),
            g.param(self.b_g),
            g.param(self.w_u),
            g.param(self.b_u),
        );
        let gp = g.affine(wg, geo, bg);
        let x = g.concat_rows(&[u, gp]);
        g.affine(wu, x, bu)
    }
}

/// Per-pair features.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures {
    /// Positions of subject and object in the image's object list.
    pub subject: usize,
    pub object: usize,
    pub raw_union: Vec<f64>,
    pub geometry: [f64; GEOM_DIM],
    pub projected_union: Vec<f64>,
}

/// Raw and projected features of one image, for a chosen set of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub object_ids: Vec<usize>,
    pub categories: Vec<usize>,
    /// `V`, `d_v x n`
    pub raw: Mat,
    /// `V'`, `d_l x n`
    pub projected: Mat,
    /// Mean of the columns of `V'`.
    pub global: Vec<f64>,
    pub pairs: Vec<PairFeatures>,
}

impl FeatureSet {
    pub fn compute(
        raw: &RawFeatures,
        store: &ParamStore,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let fp = FeatureParams::resolve(store)?;
        let projected = project_visual(&raw.visual, store.get(fp.w_v), store.get(fp.b_v))?;
        let global = projected.mean_cols().into_vec();
        let mut out_pairs = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= raw.n() || j >= raw.n() {
                return Err(Error::Usage(format!(
                    "pair ({i}, {j}) out of range for {} objects",
                    raw.n()
                )));
            }
            let raw_union = raw.union_raw(i, j);
            let geometry = raw.geometry(i, j);
            let projected_union = union_feature(
                &raw_union,
                &geometry,
                store.get(fp.w_u),
                store.get(fp.b_u),
                store.get(fp.w_g),
                store.get(fp.b_g),
            )?;
            out_pairs.push(PairFeatures {
                subject: i,
                object: j,
                raw_union,
                geometry,
                projected_union,
            });
        }
        Ok(Self {
            object_ids: raw.object_ids.clone(),
            categories: raw.categories.clone(),
            raw: raw.visual.clone(),
            projected,
            global,
            pairs: out_pairs,
        })
    }

    pub fn n(&self) -> usize {
        self.object_ids.len()
    }
}

/// All ordered pairs of distinct positions `0..n`, row-major.
pub fn all_ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct PrecomputedEntry {
    image_id: String,
    n: usize,
    d_v: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrecomputedManifest {
    blob: String,
    images: Vec<PrecomputedEntry>,
}

/// Writes per-image visual features (`d_v x n` each) as a manifest plus a
/// little-endian `f32` blob. Each image is stored object-major.
pub fn write_precomputed(dir: &Path, features: &BTreeMap<String, Mat>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut images = Vec::new();
    for (id, m) in features {
        images.push(PrecomputedEntry {
            image_id: id.clone(),
            n: m.cols(),
            d_v: m.rows(),
            offset: blob.len() as u64,
        });
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                blob.extend_from_slice(&(m.get(i, j) as f32).to_le_bytes());
            }
        }
    }
    let manifest = PrecomputedManifest {
        blob: "features.bin".into(),
        images,
    };
    fs::write(dir.join("features.bin"), blob)?;
    fs::write(
        dir.join("features.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_precomputed(manifest_path: &Path) -> Result<BTreeMap<String, Mat>> {
    let manifest: PrecomputedManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = fs::read(base.join(&manifest.blob))?;
    let mut out = BTreeMap::new();
    for e in manifest.images {
        let len = e.n * e.d_v * 4;
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + len)
            .ok_or_else(|| Error::schema(&e.image_id, "offset", "feature blob too short"))?;
        let mut m = Mat::zeros(e.d_v, e.n);
        for (k, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            m.set(k % e.d_v, k / e.d_v, f64::from(v));
        }
        out.insert(e.image_id, m);
    }
    Ok(out)
}
