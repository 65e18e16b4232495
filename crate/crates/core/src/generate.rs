//! Topic scene graph generation: caption the image, caption every ordered
//! object pair and rank the pairs.

use serde::{Deserialize, Serialize};

use crate::captioner::{Captioner, DecodeMode, Decoded};
use crate::checkpoint::Checkpoint;
use crate::distill::{self, HeadInputs, ImportanceHead, Pooling, RankStrategy};
use crate::error::{Error, Result};
use crate::eval::{PredictedRelation, Prediction};
use crate::features::{all_ordered_pairs, FeatureSet, FeatureSource, RawFeatures};
use crate::synth::PosLexicon;
use crate::types::{content_words, SceneRecord, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub rank: RankStrategy,
    /// Keep only the best `topk` relations; `None` keeps all.
    pub topk: Option<usize>,
    /// Pooling and masking used for the attention-derived target.
    pub pooling: Pooling,
    pub mask_non_nouns: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            rank: RankStrategy::Eta,
            topk: None,
            pooling: Pooling::Max,
            mask_non_nouns: false,
        }
    }
}

/// Everything computed for one image before ranking.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub image_id: String,
    pub caption: Decoded,
    /// Ordered `(subject_id, object_id)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub relational: Vec<Decoded>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    /// Head outputs, when the checkpoint has a head.
    pub s: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
}

impl Analysis {
    pub fn likelihoods(&self) -> Vec<f64> {
        self.relational.iter().map(|d| d.log_likelihood).collect()
    }

    pub fn scores(&self, rank: RankStrategy) -> Result<Vec<f64>> {
        match rank {
            RankStrategy::Eta => self.eta.clone().ok_or_else(|| {
                Error::Usage("ranking by eta needs a checkpoint with an importance head".into())
            }),
            RankStrategy::Likelihood => Ok(self.likelihoods()),
            RankStrategy::BetaOracle => Ok(self.beta.clone()),
        }
    }
}

pub fn analyze(
    captioner: &Captioner,
    head: Option<&ImportanceHead>,
    raw: &RawFeatures,
    options: &GenerateOptions,
    lexicon: Option<&PosLexicon>,
) -> Result<Analysis> {
    let caption = captioner.decode_image_caption(raw, DecodeMode::Greedy)?;
    let positions = all_ordered_pairs(raw.n());
    let pairs: Vec<(usize, usize)> = positions
        .iter()
        .map(|&(i, j)| (raw.object_ids[i], raw.object_ids[j]))
        .collect();
    let relational = captioner.decode_relational_many(raw, &pairs, DecodeMode::Greedy)?;
    let mask = if options.mask_non_nouns {
        let lex = lexicon
            .ok_or_else(|| Error::Config("noun masking needs part-of-speech labels".into()))?;
        Some(lex.noun_mask(&caption.words))
    } else {
        None
    };
    let pooled = distill::pool_attention(&caption.trace, options.pooling, mask.as_deref());
    let gamma = match pooled {
        Ok(p) => p.gamma,
        // nothing left to pool: treat every object alike
        Err(Error::EmptyPoolingWindow) => vec![0.0; raw.n()],
        Err(e) => return Err(e),
    };
    let (delta, beta) = if positions.is_empty() {
        (vec![], vec![])
    } else {
        let pooled = distill::PooledAttention {
            gamma: gamma.clone(),
            pooling: options.pooling,
            mask_applied: mask.is_some(),
        };
        distill::assemble_second_order(&pooled, &positions)?
    };
    let (s, eta) = match head {
        Some(h) if !positions.is_empty() => {
            let fs = FeatureSet::compute(raw, captioner.params(), &positions)?;
            let (s, eta) = h.scores(&HeadInputs::from_feature_set(&fs))?;
            (Some(s), Some(eta))
        }
        Some(_) => (Some(vec![]), Some(vec![])),
        None => (None, None),
    };
    Ok(Analysis {
        image_id: raw.image_id.clone(),
        caption,
        pairs,
        relational,
        gamma,
        delta,
        beta,
        s,
        eta,
    })
}

/// Ranks an analysis into a prediction.
pub fn to_prediction(
    analysis: &Analysis,
    raw: &RawFeatures,
    vocab: &Vocabulary,
    options: &GenerateOptions,
) -> Result<Prediction> {
    let scores = analysis.scores(options.rank)?;
    let order = distill::rank_order(&analysis.pairs, &scores);
    let keep = options.topk.unwrap_or(order.len()).min(order.len());
    let relations = order[..keep]
        .iter()
        .map(|&k| {
            let (s, o) = analysis.pairs[k];
            let bbox =
                |id: usize| raw.boxes[raw.index_of(id).expect("pair ids come from the scene")];
            PredictedRelation {
                sub_box: bbox(s),
                obj_box: bbox(o),
                words: content_words(&analysis.relational[k].words, vocab),
                score: scores[k],
            }
        })
        .collect();
    Ok(Prediction {
        image_id: analysis.image_id.clone(),
        caption: content_words(&analysis.caption.words, vocab),
        relations,
    })
}

/// Predictions for every record, in record order.
pub fn predict(
    checkpoint: &Checkpoint,
    records: &[SceneRecord],
    vocab: &Vocabulary,
    options: &GenerateOptions,
    lexicon: Option<&PosLexicon>,
    source: &FeatureSource,
) -> Result<Vec<Prediction>> {
    if options.rank == RankStrategy::Eta && checkpoint.head.is_none() {
        return Err(Error::Usage(
            "ranking by eta needs a checkpoint with an importance head".into(),
        ));
    }
    if options.topk == Some(0) {
        return Err(Error::Usage("topk must be positive".into()));
    }
    let cap = &checkpoint.captioner;
    records
        .iter()
        .map(|r| {
            let raw = source.raw(r, cap.config())?;
            let a = analyze(cap, checkpoint.head.as_ref(), &raw, options, lexicon)?;
            to_prediction(&a, &raw, vocab, options)
        })
        .collect()
}
