//! Shared captioning module for image captions and relational captions.
//!
//! Image captioning attends over every detected object. Relational
//! captioning for a pair `(i, j)` attends over exactly three entries: the
//! subject, the object and their union feature. With the transformer
//! backbone all objects are still encoded together; only the decoder's
//! memory is restricted to the three entries.

mod transformer;
mod updown;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureParams, RawFeatures};
use crate::linalg::{self, Mat};
use crate::params::ParamStore;
use crate::rng::rng_for;
use crate::types::{WeakScene, BOS, EOS};

use transformer::TrIds;
use updown::{UdContext, UdIds, UdState};

/// Half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.1;
/// Longest free-running decode, in words.
pub const MAX_DECODE_LEN: usize = 20;
pub const DEFAULT_BEAM_WIDTH: usize = 3;

/// What a row of an attention trace refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attended {
    Object(usize),
    Union { subject: usize, object: usize },
}

/// Per-step attention over the attended entries (`rows x T`) and the words
/// emitted at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub alpha: Mat,
    pub words: Vec<usize>,
    pub attended: Vec<Attended>,
}

impl AttentionTrace {
    /// Largest deviation of any column from a probability vector.
    pub fn max_column_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.alpha.cols() {
            let col = self.alpha.col(j);
            let neg = col.iter().fold(0.0f64, |m, &v| m.max(-v));
            let sum: f64 = col.iter().sum();
            worst = worst.max(neg).max((sum - 1.0).abs());
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode<'a> {
    /// Score the given words (ending in `<eos>`).
    TeacherForced(&'a [usize]),
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub words: Vec<usize>,
    pub trace: AttentionTrace,
    /// `sum_t log p(w_t | w_<t)`
    pub log_likelihood: f64,
    pub step_log_probs: Vec<f64>,
}

/// Explicit decoder state for single-step use.
#[derive(Clone, Debug, PartialEq)]
pub enum DecodeState {
    UpDown {
        h1: Vec<f64>,
        c1: Vec<f64>,
        h2: Vec<f64>,
        c2: Vec<f64>,
    },
    Transformer {
        /// Decoder memory (`d_tr x k`).
        memory: Mat,
        /// Inputs consumed so far, starting with `<bos>`.
        prefix: Vec<usize>,
    },
}

impl DecodeState {
    /// A recurrent state with no hidden vectors; stepping it is an error.
    pub fn uninitialized() -> Self {
        DecodeState::UpDown {
            h1: vec![],
            c1: vec![],
            h2: vec![],
            c2: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub state: DecodeState,
    pub word_distribution: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Attention-weighted feature (recurrent backbone only).
    pub attended_feature: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum Backend {
    UpDown(UdIds),
    Transformer(TrIds),
}

/// Captioner weights plus the resolved parameter layout.
#[derive(Clone, Debug)]
pub struct Captioner {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore,
    features: FeatureParams,
    backend: Backend,
}

#[derive(Clone, Copy)]
pub(crate) enum Ctx {
    Ud(UdContext),
    Tr { memory: Var },
}

/// Graph-side per-image inputs shared by every sequence of the image.
pub(crate) struct SceneInputs {
    pub projected: Var,
    encoded: Option<Var>,
}

#[derive(Clone)]
enum Hyp {
    Ud(UdState),
    Tr(Vec<usize>),
}

pub(crate) struct SeqOut {
    pub nll: Var,
    pub step_log_probs: Vec<f64>,
    pub alpha: Mat,
}

impl Captioner {
    /// Fresh weights: uniform(-0.1, 0.1) from `config.seed`, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(&[config.seed, 0xCA9]);
        let mut params = ParamStore::new();
        let features = FeatureParams::init(&mut params, &config, &mut rng);
        let backend = match config.backbone {
            Backbone::UpDown => {
                Backend::UpDown(UdIds::init(&mut params, &config, vocab_size, &mut rng))
            }
            Backbone::Transformer => {
                Backend::Transformer(TrIds::init(&mut params, &config, vocab_size, &mut rng))
            }
        };
        Ok(Self {
            config,
            vocab_size,
            params,
            features,
            backend,
        })
    }

    /// Rebuilds a captioner around existing weights, checking the layout.
    pub fn from_params(config: ModelConfig, vocab_size: usize, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), vocab_size)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (_, name, m) in reference.params.iter() {
            let got = params
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    m.shape()
                )));
            }
        }
        let features = FeatureParams::resolve(&params)?;
        let backend = match config.backbone {
            Backbone::UpDown => Backend::UpDown(UdIds::resolve(&params)?),
            Backbone::Transformer => {
                Backend::Transformer(TrIds::resolve(&params, &config, vocab_size)?)
            }
        };
        Ok(Self {
            config,
            vocab_size,
            params,
            features,
            backend,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_params(&self) -> FeatureParams {
        self.features
    }

    fn attn_layer(&self) -> usize {
        self.config.attn_layer.unwrap_or(self.config.dec_layers - 1)
    }

    pub(crate) fn scene_inputs(&self, g: &mut Graph, raw: &RawFeatures) -> SceneInputs {
        let projected = self.features.project_graph(g, raw);
        let encoded = match &self.backend {
            Backend::UpDown(_) => None,
            Backend::Transformer(ids) => {
                let x = transformer::input_projection(g, ids, projected);
                Some(transformer::encode(g, ids, self.config.heads, x))
            }
        };
        SceneInputs { projected, encoded }
    }

    pub(crate) fn image_context(&self, g: &mut Graph, si: &SceneInputs) -> Ctx {
        match &self.backend {
            Backend::UpDown(ids) => Ctx::Ud(updown::context(g, ids, si.projected)),
            Backend::Transformer(_) => Ctx::Tr {
                memory: si.encoded.expect("transformer inputs are encoded"),
            },
        }
    }

    /// One context per ordered pair of object positions.
    pub(crate) fn relational_contexts(
        &self,
        g: &mut Graph,
        raw: &RawFeatures,
        si: &SceneInputs,
        pairs: &[(usize, usize)],
    ) -> Vec<Ctx> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let unions = self.features.union_graph(g, raw, pairs);
        pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| {
                let u = g.gather_cols(unions, &[k]);
                match &self.backend {
                    Backend::UpDown(ids) => {
                        let ends = g.gather_cols(si.projected, &[i, j]);
                        let feats = g.concat_cols(&[ends, u]);
                        Ctx::Ud(updown::context(g, ids, feats))
                    }
                    Backend::Transformer(ids) => {
                        let enc = si.encoded.expect("transformer inputs are encoded");
                        let ends = g.gather_cols(enc, &[i, j]);
                        let up = transformer::input_projection(g, ids, u);
                        Ctx::Tr {
                            memory: g.concat_cols(&[ends, up]),
                        }
                    }
                }
            })
            .collect()
    }

    fn init_hyp(&self, g: &mut Graph) -> Hyp {
        match &self.backend {
            Backend::UpDown(_) => Hyp::Ud(updown::zero_state(g, self.config.d_h)),
            Backend::Transformer(_) => Hyp::Tr(Vec::new()),
        }
    }

    /// One decoding step: returns the next hypothesis state, the log word
    /// distribution and the attention column.
    fn step(&self, g: &mut Graph, ctx: &Ctx, hyp: &Hyp, prev: usize) -> (Hyp, Vec<f64>, Vec<f64>) {
        match (&self.backend, ctx, hyp) {
            (Backend::UpDown(ids), Ctx::Ud(c), Hyp::Ud(state)) => {
                let out = updown::step(g, ids, self.config.d_h, c, *state, prev);
                let lp = linalg::log_softmax(g.value(out.logits).data());
                let alpha = g.value(out.alpha).data().to_vec();
                (Hyp::Ud(out.state), lp, alpha)
            }
            (Backend::Transformer(ids), Ctx::Tr { memory }, Hyp::Tr(prefix)) => {
                let mut inputs = prefix.clone();
                inputs.push(prev);
                let out = transformer::decode(
                    g,
                    ids,
                    self.config.heads,
                    self.attn_layer(),
                    *memory,
                    &inputs,
                );
                let logits = g.value(out.logits);
                let last = logits.cols() - 1;
                let lp = linalg::log_softmax(&logits.col(last));
                let alpha = out.alpha.col(last);
                (Hyp::Tr(inputs), lp, alpha)
            }
            _ => unreachable!("context and hypothesis built for a different backbone"),
        }
    }

    /// Teacher-forced pass over `words`; `nll` is the summed negative
    /// log-likelihood node.
    pub(crate) fn teacher_forced(&self, g: &mut Graph, ctx: &Ctx, words: &[usize]) -> SeqOut {
        match (&self.backend, ctx) {
            (Backend::UpDown(ids), Ctx::Ud(c)) => {
                let mut state = updown::zero_state(g, self.config.d_h);
                let mut prev = BOS;
                let mut logits = Vec::with_capacity(words.len());
                let mut alpha_cols = Vec::with_capacity(words.len());
                for &w in words {
                    let out = updown::step(g, ids, self.config.d_h, c, state, prev);
                    state = out.state;
                    logits.push(out.logits);
                    alpha_cols.push(g.value(out.alpha).data().to_vec());
                    prev = w;
                }
                let all = g.concat_cols(&logits);
                let nll = g.cross_entropy_cols(all, words);
                let step_log_probs = step_log_probs(g.value(all), words);
                SeqOut {
                    nll,
                    step_log_probs,
                    alpha: Mat::from_cols(&alpha_cols),
                }
            }
            (Backend::Transformer(ids), Ctx::Tr { memory }) => {
                let mut inputs = Vec::with_capacity(words.len());
                inputs.push(BOS);
                inputs.extend_from_slice(&words[..words.len().saturating_sub(1)]);
                let out = transformer::decode(
                    g,
                    ids,
                    self.config.heads,
                    self.attn_layer(),
                    *memory,
                    &inputs,
                );
                let nll = g.cross_entropy_cols(out.logits, words);
                let step_log_probs = step_log_probs(g.value(out.logits), words);
                SeqOut {
                    nll,
                    step_log_probs,
                    alpha: out.alpha,
                }
            }
            _ => unreachable!("context built for a different backbone"),
        }
    }

    fn run(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        mode: DecodeMode<'_>,
        attended: Vec<Attended>,
    ) -> Result<Decoded> {
        match mode {
            DecodeMode::TeacherForced(words) => {
                if words.is_empty() {
                    return Err(Error::Usage(
                        "teacher forcing needs at least one word".into(),
                    ));
                }
                let out = self.teacher_forced(g, ctx, words);
                Ok(Decoded {
                    words: words.to_vec(),
                    log_likelihood: out.step_log_probs.iter().sum(),
                    step_log_probs: out.step_log_probs,
                    trace: AttentionTrace {
                        alpha: out.alpha,
                        words: words.to_vec(),
                        attended,
                    },
                })
            }
            DecodeMode::Greedy => Ok(self.greedy(g, ctx, attended)),
            DecodeMode::Beam(k) => {
                if k < 1 {
                    return Err(Error::Usage("beam width must be at least 1".into()));
                }
                Ok(self.beam(g, ctx, k, attended))
            }
        }
    }

    fn greedy(&self, g: &mut Graph, ctx: &Ctx, attended: Vec<Attended>) -> Decoded {
        let mut hyp = self.init_hyp(g);
        let mut prev = BOS;
        let mut words = Vec::new();
        let mut lps = Vec::new();
        let mut cols = Vec::new();
        for _ in 0..MAX_DECODE_LEN {
            let (next, lp, alpha) = self.step(g, ctx, &hyp, prev);
            hyp = next;
            let w = linalg::argmax(&lp);
            words.push(w);
            lps.push(lp[w]);
            cols.push(alpha);
            if w == EOS {
                break;
            }
            prev = w;
        }
        Decoded {
            log_likelihood: lps.iter().sum(),
            step_log_probs: lps,
            trace: AttentionTrace {
                alpha: Mat::from_cols(&cols),
                words: words.clone(),
                attended,
            },
            words,
        }
    }

    fn beam(&self, g: &mut Graph, ctx: &Ctx, width: usize, attended: Vec<Attended>) -> Decoded {
        struct Beam {
            hyp: Hyp,
            words: Vec<usize>,
            lps: Vec<f64>,
            cols: Vec<Vec<f64>>,
            score: f64,
            done: bool,
        }
        let mut beams = vec![Beam {
            hyp: self.init_hyp(g),
            words: vec![],
            lps: vec![],
            cols: vec![],
            score: 0.0,
            done: false,
        }];
        for _ in 0..MAX_DECODE_LEN {
            if beams.iter().all(|b| b.done) {
                break;
            }
            // (score, source beam, token or None for a finished beam, step data)
            let mut cands: Vec<(f64, usize, Option<usize>)> = Vec::new();
            let mut expansions: Vec<Option<(Hyp, Vec<f64>, Vec<f64>)>> = Vec::new();
            for (bi, b) in beams.iter().enumerate() {
                if b.done {
                    cands.push((b.score, bi, None));
                    expansions.push(None);
                    continue;
                }
                let prev = b.words.last().copied().unwrap_or(BOS);
                let (next, lp, alpha) = self.step(g, ctx, &b.hyp, prev);
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&x, &y| lp[y].total_cmp(&lp[x]).then(x.cmp(&y)));
                for &w in order.iter().take(width) {
                    cands.push((b.score + lp[w], bi, Some(w)));
                }
                expansions.push(Some((next, lp, alpha)));
            }
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.2.unwrap_or(0).cmp(&b.2.unwrap_or(0)))
                    .then(a.1.cmp(&b.1))
            });
            let mut next_beams = Vec::with_capacity(width);
            for (score, bi, tok) in cands.into_iter().take(width) {
                let src = &beams[bi];
                match tok {
                    None => next_beams.push(Beam {
                        hyp: src.hyp.clone(),
                        words: src.words.clone(),
                        lps: src.lps.clone(),
                        cols: src.cols.clone(),
                        score,
                        done: true,
                    }),
                    Some(w) => {
                        let (hyp, lp, alpha) = expansions[bi].as_ref().expect("expanded beam");
                        let mut words = src.words.clone();
                        words.push(w);
                        let mut lps = src.lps.clone();
                        lps.push(lp[w]);
                        let mut cols = src.cols.clone();
                        cols.push(alpha.clone());
                        next_beams.push(Beam {
                            hyp: hyp.clone(),
                            words,
                            lps,
                            cols,
                            score,
                            done: w == EOS,
                        });
                    }
                }
            }
            beams = next_beams;
        }
        let best = beams
            .into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .expect("beam is never empty");
        Decoded {
            log_likelihood: best.lps.iter().sum(),
            step_log_probs: best.lps,
            trace: AttentionTrace {
                alpha: Mat::from_cols(&best.cols),
                words: best.words.clone(),
                attended,
            },
            words: best.words,
        }
    }

    /// Decodes the image caption, attending over every object.
    pub fn decode_image_caption(&self, raw: &RawFeatures, mode: DecodeMode<'_>) -> Result<Decoded> {
        if raw.n() == 0 {
            return Err(Error::Usage("image has no objects".into()));
        }
        let mut g = Graph::untracked(&self.params);
        let si = self.scene_inputs(&mut g, raw);
        let ctx = self.image_context(&mut g, &si);
        let attended = raw
            .object_ids
            .iter()
            .map(|&id| Attended::Object(id))
            .collect();
        self.run(&mut g, &ctx, mode, attended)
    }

    /// Decodes the relational caption of `(subject_id, object_id)`.
    pub fn decode_relational_caption(
        &self,
        raw: &RawFeatures,
        subject_id: usize,
        object_id: usize,
        mode: DecodeMode<'_>,
    ) -> Result<Decoded> {
        let mut out = self.decode_relational_many(raw, &[(subject_id, object_id)], mode)?;
        Ok(out.pop().expect("one pair in, one result out"))
    }

    /// Decodes several pairs (given as object ids) with one shared encoding
    /// of the image.
    pub fn decode_relational_many(
        &self,
        raw: &RawFeatures,
        pairs: &[(usize, usize)],
        mode: DecodeMode<'_>,
    ) -> Result<Vec<Decoded>> {
        let positions = pair_positions(raw, pairs)?;
        let mut g = Graph::untracked(&self.params);
        let si = self.scene_inputs(&mut g, raw);
        let ctxs = self.relational_contexts(&mut g, raw, &si, &positions);
        pairs
            .iter()
            .zip(&ctxs)
            .map(|(&(s, o), ctx)| {
                let attended = vec![
                    Attended::Object(s),
                    Attended::Object(o),
                    Attended::Union {
                        subject: s,
                        object: o,
                    },
                ];
                self.run(&mut g, ctx, mode, attended)
            })
            .collect()
    }

    /// Initial single-step state over `attended` projected features
    /// (`d_l x k`).
    pub fn initial_state(&self, attended: &Mat) -> Result<DecodeState> {
        match &self.backend {
            Backend::UpDown(_) => {
                let z = vec![0.0; self.config.d_h];
                Ok(DecodeState::UpDown {
                    h1: z.clone(),
                    c1: z.clone(),
                    h2: z.clone(),
                    c2: z,
                })
            }
            Backend::Transformer(ids) => {
                self.check_attended(attended)?;
                let mut g = Graph::untracked(&self.params);
                let x = g.constant(attended.clone());
                let x = transformer::input_projection(&mut g, ids, x);
                let enc = transformer::encode(&mut g, ids, self.config.heads, x);
                Ok(DecodeState::Transformer {
                    memory: g.value(enc).clone(),
                    prefix: Vec::new(),
                })
            }
        }
    }

    fn check_attended(&self, attended: &Mat) -> Result<()> {
        if attended.rows() != self.config.d_l || attended.cols() == 0 {
            return Err(Error::Usage(format!(
                "attended features must be {} x k with k >= 1, got {:?}",
                self.config.d_l,
                attended.shape()
            )));
        }
        Ok(())
    }

    /// Advances `state` by one word. `attended` holds the projected
    /// features the recurrent decoder attends over (ignored by the
    /// transformer, whose memory lives in the state).
    pub fn step_once(
        &self,
        state: &DecodeState,
        prev_word: usize,
        attended: &Mat,
    ) -> Result<StepOutput> {
        if prev_word >= self.vocab_size {
            return Err(Error::Usage(format!("word index {prev_word} out of range")));
        }
        match (&self.backend, state) {
            (Backend::UpDown(ids), DecodeState::UpDown { h1, c1, h2, c2 }) => {
                let d = self.config.d_h;
                if [h1, c1, h2, c2].iter().any(|v| v.len() != d) {
                    return Err(Error::Usage("decoder state is not initialized".into()));
                }
                self.check_attended(attended)?;
                let mut g = Graph::untracked(&self.params);
                let feats = g.constant(attended.clone());
                let ctx = updown::context(&mut g, ids, feats);
                let st = updown::state_from_values(&mut g, h1, c1, h2, c2);
                let out = updown::step(&mut g, ids, d, &ctx, st, prev_word);
                let v = |x: Var| g.value(x).data().to_vec();
                Ok(StepOutput {
                    state: DecodeState::UpDown {
                        h1: v(out.state.h1),
                        c1: v(out.state.c1),
                        h2: v(out.state.h2),
                        c2: v(out.state.c2),
                    },
                    word_distribution: linalg::softmax(g.value(out.logits).data()),
                    alpha: v(out.alpha),
                    attended_feature: Some(v(out.attended)),
                })
            }
            (Backend::Transformer(ids), DecodeState::Transformer { memory, prefix }) => {
                let mut g = Graph::untracked(&self.params);
                let mem = g.constant(memory.clone());
                let mut inputs = prefix.clone();
                inputs.push(prev_word);
                let out = transformer::decode(
                    &mut g,
                    ids,
                    self.config.heads,
                    self.attn_layer(),
                    mem,
                    &inputs,
                );
                let logits = g.value(out.logits);
                let last = logits.cols() - 1;
                Ok(StepOutput {
                    state: DecodeState::Transformer {
                        memory: memory.clone(),
                        prefix: inputs,
                    },
                    word_distribution: linalg::softmax(&logits.col(last)),
                    alpha: out.alpha.col(last),
                    attended_feature: None,
                })
            }
            _ => Err(Error::Usage(
                "decoder state belongs to a different backbone".into(),
            )),
        }
    }

    /// Recurrent-backbone single step.
    pub fn ud_step(
        &self,
        state: &DecodeState,
        prev_word: usize,
        attended: &Mat,
    ) -> Result<StepOutput> {
        if !matches!(self.backend, Backend::UpDown(_)) {
            return Err(Error::Usage(
                "ud_step requires the recurrent backbone".into(),
            ));
        }
        self.step_once(state, prev_word, attended)
    }

    /// Cross-attention of decoder layer `layer` between memory `V*`
    /// (`d_tr x n`) and decoder states `E*` (`d_tr x T`). Returns the
    /// head-averaged attention (`n x T`) and the per-head matrices.
    pub fn transformer_cross_attention(
        &self,
        layer: usize,
        memory: &Mat,
        e_star: &Mat,
    ) -> Result<(Mat, Vec<Mat>)> {
        let Backend::Transformer(ids) = &self.backend else {
            return Err(Error::Usage(
                "cross-attention requires the transformer backbone".into(),
            ));
        };
        let d = self.config.d_tr;
        if self.config.heads == 0 || !d.is_multiple_of(self.config.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_tr ({d})",
                self.config.heads
            )));
        }
        if memory.rows() != d || e_star.rows() != d {
            return Err(Error::Usage(format!("inputs must have {d} rows")));
        }
        let layer_ids = ids
            .dec
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("no decoder layer {layer}")))?;
        let mut g = Graph::untracked(&self.params);
        let m = g.constant(memory.clone());
        let e = g.constant(e_star.clone());
        let (_, alphas) =
            transformer::multi_head(&mut g, &layer_ids.cross, e, m, self.config.heads, None);
        let heads: Vec<Mat> = alphas.iter().map(|&a| g.value(a).clone()).collect();
        Ok((transformer::mean_of(&heads), heads))
    }

    /// Mixed cross-entropy as a graph node: image term plus `lambda` times
    /// the mean relational term. Also returns the two parts' values.
    pub(crate) fn mixed_ce_graph(
        &self,
        g: &mut Graph,
        scene: &WeakScene,
        raw: &RawFeatures,
        lambda: f64,
    ) -> Result<(Var, f64, f64)> {
        let si = self.scene_inputs(g, raw);
        let img_ctx = self.image_context(g, &si);
        let img = self.teacher_forced(g, &img_ctx, &scene.image_caption).nll;
        if scene.relations.is_empty() {
            let v = g.scalar(img);
            return Ok((img, v, 0.0));
        }
        let ids: Vec<(usize, usize)> = scene
            .relations
            .iter()
            .map(|r| (r.subject_id, r.object_id))
            .collect();
        let positions = pair_positions(raw, &ids)?;
        let ctxs = self.relational_contexts(g, raw, &si, &positions);
        let m = scene.relations.len() as f64;
        let mut terms = vec![(img, 1.0)];
        let mut rel_sum = 0.0;
        for (rel, ctx) in scene.relations.iter().zip(&ctxs) {
            let nll = self.teacher_forced(g, ctx, &rel.words).nll;
            rel_sum += g.scalar(nll);
            terms.push((nll, lambda / m));
        }
        let img_v = g.scalar(img);
        Ok((g.weighted_sum(&terms), img_v, rel_sum / m))
    }
}

fn step_log_probs(logits: &Mat, words: &[usize]) -> Vec<f64> {
    words
        .iter()
        .enumerate()
        .map(|(t, &w)| linalg::log_softmax(&logits.col(t))[w])
        .collect()
}

/// Maps object-id pairs to positions, rejecting self-pairs and unknown ids.
pub(crate) fn pair_positions(
    raw: &RawFeatures,
    pairs: &[(usize, usize)],
) -> Result<Vec<(usize, usize)>> {
    pairs
        .iter()
        .map(|&(s, o)| {
            if s == o {
                return Err(Error::Usage(format!(
                    "subject and object are the same object ({s})"
                )));
            }
            let i = raw
                .index_of(s)
                .ok_or_else(|| Error::Usage(format!("unknown subject id {s}")))?;
            let j = raw
                .index_of(o)
                .ok_or_else(|| Error::Usage(format!("unknown object id {o}")))?;
            Ok((i, j))
        })
        .collect()
}
