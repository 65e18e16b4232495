//! Two-layer recurrent decoder: an attention LSTM that reads the previous
//! language state, the mean feature and the previous word; additive
//! attention over the attended features; and a language LSTM that emits
//! the word distribution.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::linalg::Mat;
use crate::params::{ParamId, ParamStore};

use super::INIT_SCALE;

#[derive(Clone, Copy, Debug)]
pub(crate) struct UdIds {
    pub w_e: ParamId,
    pub att_w: ParamId,
    pub att_b: ParamId,
    pub w_va: ParamId,
    pub w_ha: ParamId,
    pub w_a: ParamId,
    pub lang_w: ParamId,
    pub lang_b: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl UdIds {
    pub fn init(
        store: &mut ParamStore,
        c: &ModelConfig,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let s = INIT_SCALE;
        let att_in = c.d_h + c.d_l + c.d_e + c.d_h;
        let lang_in = c.d_l + c.d_h + c.d_h;
        Self {
            w_e: store.insert_uniform("embed.w_e", c.d_e, vocab, s, rng),
            att_w: store.insert_uniform("ud.att_lstm.w", 4 * c.d_h, att_in, s, rng),
            att_b: store.insert_zeros("ud.att_lstm.b", 4 * c.d_h, 1),
            w_va: store.insert_uniform("ud.attn.w_va", c.d_a, c.d_l, s, rng),
            w_ha: store.insert_uniform("ud.attn.w_ha", c.d_a, c.d_h, s, rng),
            w_a: store.insert_uniform("ud.attn.w_a", c.d_a, 1, s, rng),
            lang_w: store.insert_uniform("ud.lang_lstm.w", 4 * c.d_h, lang_in, s, rng),
            lang_b: store.insert_zeros("ud.lang_lstm.b", 4 * c.d_h, 1),
            w_o: store.insert_uniform("ud.out.w_o", vocab, c.d_h, s, rng),
            b_o: store.insert_zeros("ud.out.b_o", vocab, 1),
        }
    }

    pub fn resolve(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_e: store.require("embed.w_e")?,
            att_w: store.require("ud.att_lstm.w")?,
            att_b: store.require("ud.att_lstm.b")?,
            w_va: store.require("ud.attn.w_va")?,
            w_ha: store.require("ud.attn.w_ha")?,
            w_a: store.require("ud.attn.w_a")?,
            lang_w: store.require("ud.lang_lstm.w")?,
            lang_b: store.require("ud.lang_lstm.b")?,
            w_o: store.require("ud.out.w_o")?,
            b_o: store.require("ud.out.b_o")?,
        })
    }
}

/// Per-sequence constants: the attended features, their mean and their
/// attention projection.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UdContext {
    pub feats: Var,
    pub global: Var,
    pub proj_att: Var,
    pub w_a_t: Var,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct UdState {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

pub(crate) struct UdStepOut {
    pub state: UdState,
    pub logits: Var,
    pub alpha: Var,
    pub attended: Var,
}

pub(crate) fn context(g: &mut Graph, ids: &UdIds, feats: Var) -> UdContext {
    let global = g.mean_cols(feats);
    let w_va = g.param(ids.w_va);
    let proj_att = g.matmul(w_va, feats);
    let w_a = g.param(ids.w_a);
    let w_a_t = g.transpose(w_a);
    UdContext {
        feats,
        global,
        proj_att,
        w_a_t,
    }
}

pub(crate) fn zero_state(g: &mut Graph, d_h: usize) -> UdState {
    let z = g.constant(Mat::zeros(d_h, 1));
    UdState {
        h1: z,
        c1: z,
        h2: z,
        c2: z,
    }
}

pub(crate) fn state_from_values(
    g: &mut Graph,
    h1: &[f64],
    c1: &[f64],
    h2: &[f64],
    c2: &[f64],
) -> UdState {
    UdState {
        h1: g.constant(Mat::col_vec(h1.to_vec())),
        c1: g.constant(Mat::col_vec(c1.to_vec())),
        h2: g.constant(Mat::col_vec(h2.to_vec())),
        c2: g.constant(Mat::col_vec(c2.to_vec())),
    }
}

fn lstm_cell(g: &mut Graph, gates: Var, c: Var, d: usize) -> (Var, Var) {
    let i = g.slice_rows(gates, 0, d);
    let f = g.slice_rows(gates, d, d);
    let cand = g.slice_rows(gates, 2 * d, d);
    let o = g.slice_rows(gates, 3 * d, d);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let fc = g.mul(f, c);
    let ic = g.mul(i, cand);
    let c_new = g.add(fc, ic);
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc);
    (h_new, c_new)
}

pub(crate) fn step(
    g: &mut Graph,
    ids: &UdIds,
    d_h: usize,
    ctx: &UdContext,
    state: UdState,
    prev_word: usize,
) -> UdStepOut {
    let w_e = g.param(ids.w_e);
    let e_prev = g.gather_cols(w_e, &[prev_word]);
    let x1 = g.concat_rows(&[state.h2, ctx.global, e_prev, state.h1]);
    let (aw, ab) = (g.param(ids.att_w), g.param(ids.att_b));
    let gates1 = g.affine(aw, x1, ab);
    let (h1, c1) = lstm_cell(g, gates1, state.c1, d_h);

    let w_ha = g.param(ids.w_ha);
    let wh = g.matmul(w_ha, h1);
    let pre = g.add_col(ctx.proj_att, wh);
    let act = g.tanh(pre);
    let z = g.matmul(ctx.w_a_t, act);
    let z = g.transpose(z);
    let alpha = g.softmax_cols(z);
    let attended = g.matmul(ctx.feats, alpha);

    let x2 = g.concat_rows(&[attended, h1, state.h2]);
    let (lw, lb) = (g.param(ids.lang_w), g.param(ids.lang_b));
    let gates2 = g.affine(lw, x2, lb);
    let (h2, c2) = lstm_cell(g, gates2, state.c2, d_h);

    let (wo, bo) = (g.param(ids.w_o), g.param(ids.b_o));
    let logits = g.affine(wo, h2, bo);
    UdStepOut {
        state: UdState { h1, c1, h2, c2 },
        logits,
        alpha,
        attended,
    }
}
