//! Encoder-decoder transformer backbone (post-norm). Object features are
//! encoded as an unordered set; the decoder uses causal self-attention
//! over words and multi-head cross-attention over the memory. The
//! head-averaged cross-attention of one decoder layer is the exported
//! object attention.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::params::{ParamId, ParamStore};

use super::INIT_SCALE;

const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    attn: AttnIds,
    ln1: NormIds,
    ff: FfIds,
    ln2: NormIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayer {
    self_attn: AttnIds,
    ln1: NormIds,
    pub(crate) cross: AttnIds,
    ln2: NormIds,
    ff: FfIds,
    ln3: NormIds,
}

#[derive(Clone, Debug)]
pub(crate) struct TrIds {
    in_w: ParamId,
    in_b: ParamId,
    embed: ParamId,
    enc: Vec<EncLayer>,
    pub(crate) dec: Vec<DecLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

enum Mode<'a> {
    Init(&'a mut ParamStore, &'a mut ChaCha8Rng),
    Resolve(&'a ParamStore),
}

impl Mode<'_> {
    fn mat(&mut self, name: &str, r: usize, c: usize) -> Result<ParamId> {
        match self {
            Mode::Init(store, rng) => Ok(store.insert_uniform(name, r, c, INIT_SCALE, rng)),
            Mode::Resolve(store) => check(store, name, r, c),
        }
    }

    fn zeros(&mut self, name: &str, r: usize, c: usize) -> Result<ParamId> {
        match self {
            Mode::Init(store, _) => Ok(store.insert_zeros(name, r, c)),
            Mode::Resolve(store) => check(store, name, r, c),
        }
    }

    fn ones(&mut self, name: &str, r: usize) -> Result<ParamId> {
        match self {
            Mode::Init(store, _) => Ok(store.insert(name, Mat::filled(r, 1, 1.0))),
            Mode::Resolve(store) => check(store, name, r, 1),
        }
    }

    fn attn(&mut self, p: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.mat(&format!("{p}.wq"), d, d)?,
            bq: self.zeros(&format!("{p}.bq"), d, 1)?,
            wk: self.mat(&format!("{p}.wk"), d, d)?,
            bk: self.zeros(&format!("{p}.bk"), d, 1)?,
            wv: self.mat(&format!("{p}.wv"), d, d)?,
            bv: self.zeros(&format!("{p}.bv"), d, 1)?,
            wo: self.mat(&format!("{p}.wo"), d, d)?,
            bo: self.zeros(&format!("{p}.bo"), d, 1)?,
        })
    }

    fn norm(&mut self, p: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            g: self.ones(&format!("{p}.g"), d)?,
            b: self.zeros(&format!("{p}.b"), d, 1)?,
        })
    }

    fn ff(&mut self, p: &str, d: usize) -> Result<FfIds> {
        let hidden = 2 * d;
        Ok(FfIds {
            w1: self.mat(&format!("{p}.w1"), hidden, d)?,
            b1: self.zeros(&format!("{p}.b1"), hidden, 1)?,
            w2: self.mat(&format!("{p}.w2"), d, hidden)?,
            b2: self.zeros(&format!("{p}.b2"), d, 1)?,
        })
    }
}

fn check(store: &ParamStore, name: &str, r: usize, c: usize) -> Result<ParamId> {
    let id = store.require(name)?;
    if store.get(id).shape() != (r, c) {
        return Err(Error::Config(format!(
            "parameter `{name}` has shape {:?}, expected ({r}, {c})",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

impl TrIds {
    fn build(mut m: Mode<'_>, c: &ModelConfig, vocab: usize) -> Result<Self> {
        let d = c.d_tr;
        let in_w = m.mat("tr.in.w", d, c.d_l)?;
        let in_b = m.zeros("tr.in.b", d, 1)?;
        let embed = m.mat("tr.embed", d, vocab)?;
        let mut enc = Vec::new();
        for l in 0..c.enc_layers {
            enc.push(EncLayer {
                attn: m.attn(&format!("tr.enc{l}.attn"), d)?,
                ln1: m.norm(&format!("tr.enc{l}.ln1"), d)?,
                ff: m.ff(&format!("tr.enc{l}.ff"), d)?,
                ln2: m.norm(&format!("tr.enc{l}.ln2"), d)?,
            });
        }
        let mut dec = Vec::new();
        for l in 0..c.dec_layers {
            dec.push(DecLayer {
                self_attn: m.attn(&format!("tr.dec{l}.self"), d)?,
                ln1: m.norm(&format!("tr.dec{l}.ln1"), d)?,
                cross: m.attn(&format!("tr.dec{l}.cross"), d)?,
                ln2: m.norm(&format!("tr.dec{l}.ln2"), d)?,
                ff: m.ff(&format!("tr.dec{l}.ff"), d)?,
                ln3: m.norm(&format!("tr.dec{l}.ln3"), d)?,
            });
        }
        let out_w = m.mat("tr.out.w", vocab, d)?;
        let out_b = m.zeros("tr.out.b", vocab, 1)?;
        Ok(Self {
            in_w,
            in_b,
            embed,
            enc,
            dec,
            out_w,
            out_b,
        })
    }

    pub fn init(
        store: &mut ParamStore,
        c: &ModelConfig,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::build(Mode::Init(store, rng), c, vocab).expect("initialization cannot fail")
    }

    pub fn resolve(store: &ParamStore, c: &ModelConfig, vocab: usize) -> Result<Self> {
        Self::build(Mode::Resolve(store), c, vocab)
    }
}

/// Multi-head attention. Queries are the columns of `q_in`, keys/values the
/// columns of `kv_in`. Returns the output and each head's attention matrix
/// (`keys x queries`, columns sum to one).
pub(crate) fn multi_head(
    g: &mut Graph,
    p: &AttnIds,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<&Mat>,
) -> (Var, Vec<Var>) {
    let d = g.value(q_in).rows();
    let dh = d / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (wq, bq, wk, bk, wv, bv) = (
        g.param(p.wq),
        g.param(p.bq),
        g.param(p.wk),
        g.param(p.bk),
        g.param(p.wv),
        g.param(p.bv),
    );
    let q = g.affine(wq, q_in, bq);
    let k = g.affine(wk, kv_in, bk);
    let v = g.affine(wv, kv_in, bv);
    let mut outs = Vec::with_capacity(heads);
    let mut alphas = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_rows(q, h * dh, dh);
        let kh = g.slice_rows(k, h * dh, dh);
        let vh = g.slice_rows(v, h * dh, dh);
        let kt = g.transpose(kh);
        let s = g.matmul(kt, qh);
        let mut s = g.scale(s, scale);
        if let Some(m) = mask {
            s = g.add_const(s, m);
        }
        let a = g.softmax_cols(s);
        outs.push(g.matmul(vh, a));
        alphas.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_rows(&outs)
    };
    let (wo, bo) = (g.param(p.wo), g.param(p.bo));
    (g.affine(wo, cat, bo), alphas)
}

fn feed_forward(g: &mut Graph, p: &FfIds, x: Var) -> Var {
    let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
    let h = g.affine(w1, x, b1);
    let h = g.relu(h);
    g.affine(w2, h, b2)
}

fn add_norm(g: &mut Graph, p: &NormIds, x: Var, y: Var) -> Var {
    let s = g.add(x, y);
    let (gain, bias) = (g.param(p.g), g.param(p.b));
    g.layer_norm_cols(s, gain, bias)
}

/// Maps `d_l` features into the model width.
pub(crate) fn input_projection(g: &mut Graph, ids: &TrIds, feats: Var) -> Var {
    let (w, b) = (g.param(ids.in_w), g.param(ids.in_b));
    g.affine(w, feats, b)
}

pub(crate) fn encode(g: &mut Graph, ids: &TrIds, heads: usize, x: Var) -> Var {
    let mut x = x;
    for layer in &ids.enc {
        let (a, _) = multi_head(g, &layer.attn, x, x, heads, None);
        x = add_norm(g, &layer.ln1, x, a);
        let f = feed_forward(g, &layer.ff, x);
        x = add_norm(g, &layer.ln2, x, f);
    }
    x
}

fn positional(d: usize, t: usize) -> Mat {
    Mat::from_fn(d, t, |i, pos| {
        let k = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn causal_mask(t: usize) -> Mat {
    Mat::from_fn(t, t, |key, query| if key > query { MASKED } else { 0.0 })
}

pub(crate) struct DecodeOut {
    /// `|V| x T`
    pub logits: Var,
    /// Head-averaged cross-attention of the exported layer (`k x T`).
    pub alpha: Mat,
}

/// Runs the decoder over `inputs` (starting with `<bos>`) against `memory`.
pub(crate) fn decode(
    g: &mut Graph,
    ids: &TrIds,
    heads: usize,
    attn_layer: usize,
    memory: Var,
    inputs: &[usize],
) -> DecodeOut {
    let embed = g.param(ids.embed);
    let e = g.gather_cols(embed, inputs);
    let d = g.value(e).rows();
    let t = inputs.len();
    let mut y = g.add_const(e, &positional(d, t));
    let mask = causal_mask(t);
    let mut exported = Vec::new();
    for (l, layer) in ids.dec.iter().enumerate() {
        let (s, _) = multi_head(g, &layer.self_attn, y, y, heads, Some(&mask));
        let e_star = add_norm(g, &layer.ln1, y, s);
        let (c, alphas) = multi_head(g, &layer.cross, e_star, memory, heads, None);
        if l == attn_layer {
            exported = alphas;
        }
        let y2 = add_norm(g, &layer.ln2, e_star, c);
        let f = feed_forward(g, &layer.ff, y2);
        y = add_norm(g, &layer.ln3, y2, f);
    }
    let (ow, ob) = (g.param(ids.out_w), g.param(ids.out_b));
    let logits = g.affine(ow, y, ob);
    let head_alphas: Vec<Mat> = exported.iter().map(|&a| g.value(a).clone()).collect();
    let alpha = mean_of(&head_alphas);
    DecodeOut { logits, alpha }
}

pub(crate) fn mean_of(mats: &[Mat]) -> Mat {
    let mut acc = Mat::zeros(mats[0].rows(), mats[0].cols());
    for m in mats {
        acc.add_assign(m);
    }
    acc.scale(1.0 / mats.len() as f64)
}
