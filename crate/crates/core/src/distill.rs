//! Attention distillation: pooled first-order attention, assembled
//! second-order targets, the query-key importance head and the KL
//! objective between them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::captioner::AttentionTrace;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::linalg::{self, Mat};
use crate::params::{ParamId, ParamStore};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!(
                "unknown pooling `{s}` (expected max or mean)"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
        })
    }
}

/// Which features form the importance query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// union only
    U,
    /// subject and object
    SO,
    SOU,
    /// subject, object, union and both category embeddings
    #[default]
    SOUS,
}

impl FeatureMode {
    pub fn uses_embeddings(self) -> bool {
        self == FeatureMode::SOUS
    }

    pub fn query_dim(self, d_l: usize, d_sem: usize) -> usize {
        match self {
            FeatureMode::U => d_l,
            FeatureMode::SO => 2 * d_l,
            FeatureMode::SOU => 3 * d_l,
            FeatureMode::SOUS => 3 * d_l + 2 * d_sem,
        }
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "U" => Ok(FeatureMode::U),
            "SO" => Ok(FeatureMode::SO),
            "SOU" => Ok(FeatureMode::SOU),
            "SOUS" => Ok(FeatureMode::SOUS),
            _ => Err(Error::Config(format!(
                "unknown feature mode `{s}` (expected U, SO, SOU or SOUS)"
            ))),
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledAttention {
    pub gamma: Vec<f64>,
    pub pooling: Pooling,
    pub mask_applied: bool,
}

/// Pools each row of the trace over the unmasked timesteps.
pub fn pool_attention(
    trace: &AttentionTrace,
    pooling: Pooling,
    noun_mask: Option<&[bool]>,
) -> Result<PooledAttention> {
    pool_alpha(&trace.alpha, pooling, noun_mask)
}

pub fn pool_alpha(
    alpha: &Mat,
    pooling: Pooling,
    noun_mask: Option<&[bool]>,
) -> Result<PooledAttention> {
    let steps: Vec<usize> = match noun_mask {
        Some(mask) => {
            if mask.len() != alpha.cols() {
                return Err(Error::Usage(format!(
                    "mask has {} entries for {} timesteps",
                    mask.len(),
                    alpha.cols()
                )));
            }
            (0..alpha.cols()).filter(|&t| mask[t]).collect()
        }
        None => (0..alpha.cols()).collect(),
    };
    if steps.is_empty() {
        return Err(Error::EmptyPoolingWindow);
    }
    let gamma = (0..alpha.rows())
        .map(|i| {
            let row = alpha.row(i);
            match pooling {
                Pooling::Max => steps
                    .iter()
                    .map(|&t| row[t])
                    .fold(f64::NEG_INFINITY, f64::max),
                Pooling::Mean => steps.iter().map(|&t| row[t]).sum::<f64>() / steps.len() as f64,
            }
        })
        .collect();
    Ok(PooledAttention {
        gamma,
        pooling,
        mask_applied: noun_mask.is_some(),
    })
}

/// `delta_ij = gamma_i + gamma_j` over the listed position pairs and
/// `beta = softmax(delta)`.
pub fn assemble_second_order(
    pooled: &PooledAttention,
    pairs: &[(usize, usize)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = pooled.gamma.len();
    let delta = pairs
        .iter()
        .map(|&(i, j)| {
            if i >= n || j >= n {
                Err(Error::Usage(format!(
                    "pair ({i}, {j}) references an unknown object (n = {n})"
                )))
            } else {
                Ok(pooled.gamma[i] + pooled.gamma[j])
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let beta = linalg::softmax(&delta);
    Ok((delta, beta))
}

/// Scores and targets over one image's pair set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceDistributions {
    /// `(subject_id, object_id)`
    pub pairs: Vec<(usize, usize)>,
    pub s: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
}

/// `KL(eta || beta)` in natural log.
pub fn kl_loss(eta: &[f64], beta: &[f64]) -> Result<f64> {
    if eta.len() != beta.len() {
        return Err(Error::Usage(format!(
            "distributions differ in length ({} vs {})",
            eta.len(),
            beta.len()
        )));
    }
    Ok(eta
        .iter()
        .zip(beta)
        .filter(|(&e, _)| e > 0.0)
        .map(|(&e, &b)| e * (e.ln() - b.ln()))
        .sum())
}

/// KL of `softmax(s)` against `beta` and its gradient with respect to `s`:
/// `eta_j (c_j - KL)` with `c_j = log eta_j - log beta_j`.
pub fn kl_loss_with_grad(s: &[f64], beta: &[f64]) -> Result<(f64, Vec<f64>)> {
    if s.len() != beta.len() {
        return Err(Error::Usage(format!(
            "distributions differ in length ({} vs {})",
            s.len(),
            beta.len()
        )));
    }
    let log_eta = linalg::log_softmax(s);
    let c: Vec<f64> = log_eta
        .iter()
        .zip(beta)
        .map(|(le, b)| le - b.ln())
        .collect();
    let eta: Vec<f64> = log_eta.iter().map(|l| l.exp()).collect();
    let kl: f64 = eta.iter().zip(&c).map(|(e, c)| e * c).sum();
    let grad = eta.iter().zip(&c).map(|(e, c)| e * (c - kl)).collect();
    Ok((kl, grad))
}

/// Query-key importance head.
#[derive(Clone, Debug)]
pub struct ImportanceHead {
    mode: FeatureMode,
    d_l: usize,
    d_s: usize,
    params: ParamStore,
    f_w: ParamId,
    f_b: ParamId,
    g_w: ParamId,
    g_b: ParamId,
    sem: Option<ParamId>,
}

impl ImportanceHead {
    /// Fresh head. The category table is only created when the feature
    /// mode needs it.
    pub fn new(
        mode: FeatureMode,
        d_l: usize,
        d_s: usize,
        d_sem: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if d_l == 0 || d_s == 0 || (mode.uses_embeddings() && d_sem == 0) {
            return Err(Error::Config(
                "importance head dimensions must be positive".into(),
            ));
        }
        let mut rng = rng_for(&[seed, 0x4EAD]);
        let s = crate::captioner::INIT_SCALE;
        let mut params = ParamStore::new();
        let q = mode.query_dim(d_l, d_sem);
        let f_w = params.insert_uniform("head.f.w", d_s, q, s, &mut rng);
        let f_b = params.insert_zeros("head.f.b", d_s, 1);
        let g_w = params.insert_uniform("head.g.w", d_s, d_l, s, &mut rng);
        let g_b = params.insert_zeros("head.g.b", d_s, 1);
        let sem = mode
            .uses_embeddings()
            .then(|| params.insert_uniform("head.sem", d_sem, vocab_size, s, &mut rng));
        Ok(Self {
            mode,
            d_l,
            d_s,
            params,
            f_w,
            f_b,
            g_w,
            g_b,
            sem,
        })
    }

    /// Rebuilds a head around stored weights, validating shapes.
    pub fn from_params(mode: FeatureMode, params: ParamStore) -> Result<Self> {
        let f_w = params.require("head.f.w")?;
        let f_b = params.require("head.f.b")?;
        let g_w = params.require("head.g.w")?;
        let g_b = params.require("head.g.b")?;
        let sem = params.id("head.sem");
        if mode.uses_embeddings() && sem.is_none() {
            return Err(Error::Config(format!(
                "feature mode {mode} needs a category embedding table"
            )));
        }
        let (d_s, d_l) = params.get(g_w).shape();
        let d_sem = sem.map_or(0, |id| params.get(id).rows());
        let q = mode.query_dim(d_l, d_sem);
        let ok = params.get(f_w).shape() == (d_s, q)
            && params.get(f_b).shape() == (d_s, 1)
            && params.get(g_b).shape() == (d_s, 1);
        if !ok {
            return Err(Error::Config(format!(
                "importance head weights do not match feature mode {mode}"
            )));
        }
        Ok(Self {
            mode,
            d_l,
            d_s,
            params,
            f_w,
            f_b,
            g_w,
            g_b,
            sem: if mode.uses_embeddings() { sem } else { None },
        })
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Score column `s` (`m x 1`) as a graph node over this head's params.
    pub(crate) fn scores_graph(&self, g: &mut Graph, inputs: &HeadInputs) -> Result<Var> {
        if inputs.projected.rows() != self.d_l {
            return Err(Error::Config(format!(
                "head expects {}-dim features, got {}",
                self.d_l,
                inputs.projected.rows()
            )));
        }
        let subj: Vec<usize> = inputs.pairs.iter().map(|p| p.0).collect();
        let obj: Vec<usize> = inputs.pairs.iter().map(|p| p.1).collect();
        let proj = g.constant(inputs.projected.clone());
        let unions = g.constant(inputs.unions.clone());
        let mut parts = Vec::new();
        if self.mode != FeatureMode::U {
            parts.push(g.gather_cols(proj, &subj));
            parts.push(g.gather_cols(proj, &obj));
        }
        if self.mode != FeatureMode::SO {
            parts.push(unions);
        }
        if self.mode.uses_embeddings() {
            let sem = self.sem.ok_or_else(|| {
                Error::Config("feature mode SOUS needs a category embedding table".into())
            })?;
            let table = g.param(sem);
            let vocab = g.value(table).cols();
            let cat = |p: usize| inputs.categories[p];
            if subj.iter().chain(&obj).any(|&p| cat(p) >= vocab) {
                return Err(Error::Config(
                    "category index outside the embedding table".into(),
                ));
            }
            let ci: Vec<usize> = subj.iter().map(|&p| cat(p)).collect();
            let cj: Vec<usize> = obj.iter().map(|&p| cat(p)).collect();
            parts.push(g.gather_cols(table, &ci));
            parts.push(g.gather_cols(table, &cj));
        }
        let query_in = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)
        };
        let (fw, fb) = (g.param(self.f_w), g.param(self.f_b));
        let q = g.affine(fw, query_in, fb);
        let global = g.constant(Mat::col_vec(inputs.global.clone()));
        let (gw, gb) = (g.param(self.g_w), g.param(self.g_b));
        let k = g.affine(gw, global, gb);
        let qt = g.transpose(q);
        let s = g.matmul(qt, k);
        Ok(g.scale(s, 1.0 / (self.d_s as f64).sqrt()))
    }

    /// `(s, eta)` over the pairs of `inputs`.
    pub fn scores(&self, inputs: &HeadInputs) -> Result<(Vec<f64>, Vec<f64>)> {
        if inputs.pairs.is_empty() {
            return Ok((vec![], vec![]));
        }
        let mut g = Graph::untracked(&self.params);
        let s = self.scores_graph(&mut g, inputs)?;
        let s = g.value(s).data().to_vec();
        let eta = linalg::softmax(&s);
        Ok((s, eta))
    }
}

/// Frozen features the importance head reads for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInputs {
    /// `V'` (`d_l x n`)
    pub projected: Mat,
    pub global: Vec<f64>,
    /// Projected union features (`d_l x m`), one per pair.
    pub unions: Mat,
    pub categories: Vec<usize>,
    /// Position pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl HeadInputs {
    pub fn from_feature_set(fs: &FeatureSet) -> Self {
        let cols: Vec<Vec<f64>> = fs.pairs.iter().map(|p| p.projected_union.clone()).collect();
        let unions = if cols.is_empty() {
            Mat::zeros(fs.projected.rows(), 0)
        } else {
            Mat::from_cols(&cols)
        };
        Self {
            projected: fs.projected.clone(),
            global: fs.global.clone(),
            unions,
            categories: fs.categories.clone(),
            pairs: fs.pairs.iter().map(|p| (p.subject, p.object)).collect(),
        }
    }
}

/// `(s, eta)` for the pairs carried by `features`.
pub fn importance_scores(
    features: &FeatureSet,
    head: &ImportanceHead,
) -> Result<(Vec<f64>, Vec<f64>)> {
    head.scores(&HeadInputs::from_feature_set(features))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankStrategy {
    #[default]
    Eta,
    Likelihood,
    /// Evaluation tooling only: ranks by the assembled target itself.
    BetaOracle,
}

impl FromStr for RankStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(RankStrategy::Eta),
            "likelihood" => Ok(RankStrategy::Likelihood),
            "beta_oracle" | "beta-oracle" => Ok(RankStrategy::BetaOracle),
            _ => Err(Error::Config(format!(
                "unknown ranking `{s}` (expected eta, likelihood or beta_oracle)"
            ))),
        }
    }
}

impl fmt::Display for RankStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankStrategy::Eta => "eta",
            RankStrategy::Likelihood => "likelihood",
            RankStrategy::BetaOracle => "beta_oracle",
        })
    }
}

/// Indices of `pairs` sorted by descending score, ties broken by
/// `(subject_id, object_id)`.
pub fn rank_order(pairs: &[(usize, usize)], scores: &[f64]) -> Vec<usize> {
    assert_eq!(pairs.len(), scores.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(pairs[a].cmp(&pairs[b]))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(alpha: Mat) -> AttentionTrace {
        let t = alpha.cols();
        AttentionTrace {
            alpha,
            words: vec![4; t],
            attended: vec![],
        }
    }

    #[test]
    fn pooling_examples() {
        let a = Mat::from_vec(2, 2, vec![0.9, 0.1, 0.2, 0.8]).transpose();
        // columns: [0.9, 0.1] and [0.2, 0.8]
        let tr = trace(a);
        let max = pool_attention(&tr, Pooling::Max, None).unwrap();
        assert_eq!(max.gamma, vec![0.9, 0.8]);
        let mean = pool_attention(&tr, Pooling::Mean, None).unwrap();
        assert!((mean.gamma[0] - 0.55).abs() < 1e-15 && (mean.gamma[1] - 0.45).abs() < 1e-15);
        let only2 = pool_attention(&tr, Pooling::Mean, Some(&[false, true])).unwrap();
        assert_eq!(only2.gamma, tr.alpha.col(1));
        assert!(only2.mask_applied);
        assert!(matches!(
            pool_attention(&tr, Pooling::Max, Some(&[false, false])),
            Err(Error::EmptyPoolingWindow)
        ));
        let single = trace(Mat::col_vec(vec![0.3, 0.7]));
        for p in [Pooling::Max, Pooling::Mean] {
            assert_eq!(
                pool_attention(&single, p, None).unwrap().gamma,
                vec![0.3, 0.7]
            );
        }
    }

    #[test]
    fn assembly_examples() {
        let pooled = PooledAttention {
            gamma: vec![0.7, 0.2, 0.1],
            pooling: Pooling::Max,
            mask_applied: false,
        };
        let pairs = crate::features::all_ordered_pairs(3);
        let (delta, beta) = assemble_second_order(&pooled, &pairs).unwrap();
        let want = [0.9, 0.8, 0.9, 0.3, 0.8, 0.3];
        for (d, w) in delta.iter().zip(want) {
            assert!((d - w).abs() < 1e-15);
        }
        let z: f64 = want.iter().map(|v: &f64| v.exp()).sum();
        for (b, w) in beta.iter().zip(want) {
            assert!((b - w.exp() / z).abs() < 1e-12);
        }
        let (_, one) = assemble_second_order(&pooled, &[(2, 0)]).unwrap();
        assert_eq!(one, vec![1.0]);
        let uniform = PooledAttention {
            gamma: vec![0.25; 4],
            ..pooled.clone()
        };
        let (_, b) =
            assemble_second_order(&uniform, &crate::features::all_ordered_pairs(4)).unwrap();
        assert!(b.iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-15));
        assert!(matches!(
            assemble_second_order(&pooled, &[(0, 3)]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let v = kl_loss(&[0.8, 0.2], &[0.5, 0.5]).unwrap();
        assert!((v - (0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln())).abs() < 1e-15);
        assert!((v - 0.19274).abs() < 1e-5);
        assert_eq!(kl_loss(&[0.25; 4], &[0.25; 4]).unwrap(), 0.0);
        assert!(matches!(kl_loss(&[1.0], &[0.5, 0.5]), Err(Error::Usage(_))));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = rng_for(&[5]);
        for m in 1..=10 {
            let s: Vec<f64> = (0..m)
                .map(|_| 2.0 * crate::rng::gaussian(&mut rng))
                .collect();
            let d: Vec<f64> = (0..m).map(|_| crate::rng::gaussian(&mut rng)).collect();
            let beta = linalg::softmax(&d);
            let (_, grad) = kl_loss_with_grad(&s, &beta).unwrap();
            for k in 0..m {
                let f = |h: f64| {
                    let mut sp = s.clone();
                    sp[k] += h;
                    kl_loss(&linalg::softmax(&sp), &beta).unwrap()
                };
                let num = (f(1e-5) - f(-1e-5)) / 2e-5;
                let rel = (num - grad[k]).abs() / num.abs().max(grad[k].abs()).max(1e-8);
                assert!(rel < 1e-4, "m={m} k={k} {num} vs {}", grad[k]);
            }
        }
    }

    fn head_inputs(n: usize, d_l: usize, seed: u64) -> HeadInputs {
        let mut rng = rng_for(&[seed]);
        let pairs = crate::features::all_ordered_pairs(n);
        let projected = Mat::from_fn(d_l, n, |_, _| crate::rng::gaussian(&mut rng));
        let unions = Mat::from_fn(d_l, pairs.len(), |_, _| crate::rng::gaussian(&mut rng));
        HeadInputs {
            global: projected.mean_cols().into_vec(),
            projected,
            unions,
            categories: (0..n).map(|k| 4 + k).collect(),
            pairs,
        }
    }

    #[test]
    fn scores_match_scalar_oracle() {
        let (d_l, d_s, d_sem) = (4, 3, 2);
        for mode in [
            FeatureMode::U,
            FeatureMode::SO,
            FeatureMode::SOU,
            FeatureMode::SOUS,
        ] {
            let head = ImportanceHead::new(mode, d_l, d_s, d_sem, 10, 3).unwrap();
            let mut inputs = head_inputs(3, d_l, 7);
            inputs.pairs.truncate(3);
            inputs.unions = inputs.unions.select_cols(&[0, 1, 2]);
            let (s, eta) = head.scores(&inputs).unwrap();
            let p = |n: &str| head.params().by_name(n).unwrap().clone();
            let (fw, fb, gw, gb) = (p("head.f.w"), p("head.f.b"), p("head.g.w"), p("head.g.b"));
            let k: Vec<f64> = (0..d_s)
                .map(|r| {
                    gb.get(r, 0)
                        + (0..d_l)
                            .map(|c| gw.get(r, c) * inputs.global[c])
                            .sum::<f64>()
                })
                .collect();
            for (m, &(i, j)) in inputs.pairs.iter().enumerate() {
                let mut x = Vec::new();
                if mode != FeatureMode::U {
                    x.extend(inputs.projected.col(i));
                    x.extend(inputs.projected.col(j));
                }
                if mode != FeatureMode::SO {
                    x.extend(inputs.unions.col(m));
                }
                if mode == FeatureMode::SOUS {
                    let sem = p("head.sem");
                    x.extend(sem.col(inputs.categories[i]));
                    x.extend(sem.col(inputs.categories[j]));
                }
                let q: Vec<f64> = (0..d_s)
                    .map(|r| {
                        fb.get(r, 0)
                            + x.iter()
                                .enumerate()
                                .map(|(c, v)| fw.get(r, c) * v)
                                .sum::<f64>()
                    })
                    .collect();
                let want = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d_s as f64).sqrt();
                assert!((s[m] - want).abs() < 1e-7, "{mode}");
            }
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for (e, v) in eta.iter().zip(&s) {
                assert!((e - v.exp() / z).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn identical_queries_or_zero_key_give_uniform_eta() {
        let head = ImportanceHead::new(FeatureMode::U, 4, 3, 2, 10, 1).unwrap();
        let mut inputs = head_inputs(3, 4, 2);
        let col = inputs.unions.col(0);
        inputs.unions = Mat::from_cols(&vec![col; inputs.pairs.len()]);
        let (_, eta) = head.scores(&inputs).unwrap();
        assert!(eta.iter().all(|e| (e - 1.0 / 6.0).abs() < 1e-12));

        let mut head = ImportanceHead::new(FeatureMode::SOUS, 4, 3, 2, 10, 1).unwrap();
        let gw = head.params.require("head.g.w").unwrap();
        head.params_mut().get_mut(gw).data_mut().fill(0.0);
        let (s, eta) = head.scores(&head_inputs(3, 4, 2)).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(eta.iter().all(|e| (e - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn sous_without_table_is_a_config_error() {
        let head = ImportanceHead::new(FeatureMode::SO, 4, 3, 2, 10, 1).unwrap();
        let err =
            ImportanceHead::from_params(FeatureMode::SOUS, head.params().clone()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ImportanceHead::from_params(FeatureMode::SO, head.params().clone()).is_ok());
    }

    #[test]
    fn rank_order_sorts_and_breaks_ties() {
        let pairs = [(2, 1), (1, 2), (0, 1)];
        assert_eq!(rank_order(&pairs, &[0.5, 0.5, 0.1]), vec![1, 0, 2]);
        assert_eq!(rank_order(&[(3, 4)], &[-9.0]), vec![0]);
    }

    #[test]
    fn rank_order_agrees_with_brute_force_on_random_scenes() {
        for scene in 0..100u64 {
            let head = ImportanceHead::new(FeatureMode::SOUS, 4, 3, 2, 12, scene).unwrap();
            let inputs = head_inputs(2 + (scene % 5) as usize, 4, scene + 1000);
            let (s, eta) = head.scores(&inputs).unwrap();
            let order = rank_order(&inputs.pairs, &eta);
            // brute force: repeatedly pick the maximum remaining
            let mut left: Vec<usize> = (0..eta.len()).collect();
            let mut brute = Vec::new();
            while !left.is_empty() {
                let mut best = 0;
                for k in 1..left.len() {
                    let (a, b) = (left[k], left[best]);
                    if eta[a] > eta[b] || (eta[a] == eta[b] && inputs.pairs[a] < inputs.pairs[b]) {
                        best = k;
                    }
                }
                brute.push(left.remove(best));
            }
            assert_eq!(order, brute);
            assert_eq!(rank_order(&inputs.pairs, &s), order);
        }
    }

    proptest! {
        #[test]
        fn beta_is_shift_invariant(gamma in prop::collection::vec(0.0f64..1.0, 2..8), c in -3.0f64..3.0) {
            let pairs = crate::features::all_ordered_pairs(gamma.len());
            let a = PooledAttention { gamma: gamma.clone(), pooling: Pooling::Max, mask_applied: false };
            let b = PooledAttention { gamma: gamma.iter().map(|g| g + c).collect(), ..a.clone() };
            let (da, ba) = assemble_second_order(&a, &pairs).unwrap();
            let (_, bb) = assemble_second_order(&b, &pairs).unwrap();
            for (x, y) in ba.iter().zip(&bb) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let back = pairs.iter().position(|&p| p == (j, i)).unwrap();
                prop_assert_eq!(da[k], da[back]);
            }
        }

        #[test]
        fn max_pooling_is_monotone(vals in prop::collection::vec(0.0f64..1.0, 12), row in 0usize..3, t in 0usize..4, bump in 0.0f64..1.0) {
            let alpha = Mat::from_vec(3, 4, vals);
            let before = pool_alpha(&alpha, Pooling::Max, None).unwrap();
            let mut bumped = alpha.clone();
            bumped.set(row, t, alpha.get(row, t) + bump);
            let after = pool_alpha(&bumped, Pooling::Max, None).unwrap();
            for i in 0..3 {
                if i == row {
                    prop_assert!(after.gamma[i] >= before.gamma[i]);
                } else {
                    prop_assert_eq!(after.gamma[i], before.gamma[i]);
                }
            }
        }

        #[test]
        fn kl_is_nonnegative(a in prop::collection::vec(-3.0f64..3.0, 1..10), shift in -1.0f64..1.0) {
            let eta = linalg::softmax(&a);
            let b: Vec<f64> = a.iter().enumerate().map(|(k, v)| v * shift + k as f64 * 0.1).collect();
            let beta = linalg::softmax(&b);
            prop_assert!(kl_loss(&eta, &beta).unwrap() >= -1e-15);
            prop_assert!(kl_loss(&eta, &eta).unwrap().abs() < 1e-12);
        }

        #[test]
        fn ranking_is_invariant_to_key_scaling(seed in 0u64..1000, factor in 0.1f64..10.0) {
            let mut head = ImportanceHead::new(FeatureMode::SOU, 4, 3, 2, 12, seed).unwrap();
            let inputs = head_inputs(4, 4, seed);
            let (s, _) = head.scores(&inputs).unwrap();
            for name in ["head.g.w", "head.g.b"] {
                let id = head.params.require(name).unwrap();
                for v in head.params_mut().get_mut(id).data_mut() {
                    *v *= factor;
                }
            }
            let (s2, _) = head.scores(&inputs).unwrap();
            prop_assert_eq!(rank_order(&inputs.pairs, &s), rank_order(&inputs.pairs, &s2));
        }
    }
}
