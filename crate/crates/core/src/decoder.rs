//! Branch decoder: query self-attention, dense cross-attention to image
//! tokens and to guidance tokens, cosine classification and iterative box
//! refinement.

use crate::enhancer::{sinusoidal_var, QuerySeeds};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{inverse_sigmoid, sigmoid, Backward, Graph, Rng, Tensor, Var};
use crate::params::{ParamStore, Session};

/// Minimum width/height of a refined box.
pub const BOX_MIN_EXTENT: f64 = 1e-4;
const LOGIT_EPS: f64 = 1e-6;

fn refine_coord(b: f64, delta: f64, k: usize) -> (f64, f64) {
    // returns (value, d value / d delta)
    let z = inverse_sigmoid(b, LOGIT_EPS) + delta;
    let o = sigmoid(z);
    if k >= 2 && o < BOX_MIN_EXTENT {
        (BOX_MIN_EXTENT, 0.0)
    } else {
        (o, o * (1.0 - o))
    }
}

/// One refinement update in inverse-sigmoid space.
pub fn box_refine_step(b: BBox, delta: [f64; 4]) -> BBox {
    let a = b.to_array();
    BBox::from_array([0, 1, 2, 3].map(|k| refine_coord(a[k], delta[k], k).0))
}

struct BoxRefineBackward;

impl Backward for BoxRefineBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64], grads_in: &mut [Vec<f64>]) {
        let (b, d) = (inputs[0].data(), inputs[1].data());
        for i in 0..b.len() {
            let (_, dz) = refine_coord(b[i], d[i], i % 4);
            let go = grad_out[i] * dz;
            grads_in[1][i] += go;
            let p = b[i];
            if p > LOGIT_EPS && p < 1.0 - LOGIT_EPS {
                grads_in[0][i] += go / (p * (1.0 - p));
            }
        }
    }
}

/// Refines every row of an n×4 box matrix by an n×4 delta matrix.
pub fn box_refine_var(g: &mut Graph, boxes: Var, delta: Var) -> Var {
    assert_eq!(g.shape(boxes), g.shape(delta), "box/delta shape mismatch");
    let (b, d) = (g.value(boxes).data(), g.value(delta).data());
    let out: Vec<f64> = (0..b.len()).map(|i| refine_coord(b[i], d[i], i % 4).0).collect();
    let shape = g.shape(boxes).to_vec();
    g.custom(&[boxes, delta], Tensor::new(&shape, out), Box::new(BoxRefineBackward))
}

/// `(alpha / tau) · cos(W_cls q_i, p_c)` for every query/prototype pair.
pub fn compute_logits(s: &mut Session, queries: Var, protos: Var, w_cls: &Linear, alpha: f64, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::BadConfig(format!("temperature must be positive, got {tau}")));
    }
    let proj = w_cls.forward(s, queries);
    let cos = s.g.cosine_sim(proj, protos)?;
    Ok(s.g.scale(cos, alpha / tau))
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_img: LayerNorm,
    cross_img: MultiHeadAttention,
    ln_guid: LayerNorm,
    cross_guid: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn new(p: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        DecoderLayer {
            ln_self: LayerNorm::new(format!("{p}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(&format!("{p}.self"), dim, heads),
            ln_img: LayerNorm::new(format!("{p}.ln_img"), dim),
            cross_img: MultiHeadAttention::new(&format!("{p}.cross_img"), dim, heads),
            ln_guid: LayerNorm::new(format!("{p}.ln_guid"), dim),
            cross_guid: MultiHeadAttention::new(&format!("{p}.cross_guid"), dim, heads),
            ln_ffn: LayerNorm::new(format!("{p}.ln_ffn"), dim),
            ffn: FeedForward::new(&format!("{p}.ffn"), dim, ffn),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for ln in [&self.ln_self, &self.ln_img, &self.ln_guid, &self.ln_ffn] {
            ln.init(store);
        }
        for a in [&self.self_attn, &self.cross_img, &self.cross_guid] {
            a.init(store, rng);
        }
        self.ffn.init(store, rng);
    }

    fn forward(&self, s: &mut Session, q: Var, pos: Var, memory_key: Var, memory: Var, guidance: Var) -> Var {
        let h = self.ln_self.forward(s, q);
        let hp = s.g.add(h, pos);
        let a = self.self_attn.forward(s, hp, hp, h);
        let q = s.g.add(q, a);
        let h = self.ln_img.forward(s, q);
        let hp = s.g.add(h, pos);
        let a = self.cross_img.forward(s, hp, memory_key, memory);
        let q = s.g.add(q, a);
        let h = self.ln_guid.forward(s, q);
        let hp = s.g.add(h, pos);
        let a = self.cross_guid.forward(s, hp, guidance, guidance);
        let q = s.g.add(q, a);
        let h = self.ln_ffn.forward(s, q);
        let f = self.ffn.forward(s, h);
        s.g.add(q, f)
    }
}

#[derive(Clone, Debug)]
struct Heads {
    cls: Linear,
    box_hidden: Linear,
    box_out: Linear,
}

impl Heads {
    fn new(p: &str, dim: usize) -> Self {
        Heads {
            cls: Linear::new(format!("{p}.cls"), dim, dim),
            box_hidden: Linear::new(format!("{p}.box0"), dim, dim),
            box_out: Linear::new(format!("{p}.box1"), dim, 4),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.cls.init(store, rng);
        self.box_hidden.init(store, rng);
        self.box_out.init_zero(store);
    }

    fn deltas(&self, s: &mut Session, h: Var) -> Var {
        let t = self.box_hidden.forward(s, h);
        let t = s.g.gelu(t);
        self.box_out.forward(s, t)
    }
}

/// Decoder layers plus prediction heads of one branch, under `{prefix}.dec`
/// and `{prefix}.head`.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    heads: Vec<Heads>,
    pub dim: usize,
    pub alpha: f64,
    pub tau: f64,
}

/// Per-layer predictions on the tape.
#[derive(Clone, Debug)]
pub struct BranchVars {
    /// n_q×C per layer.
    pub logits: Vec<Var>,
    /// n_q×4 per layer, after that layer's refinement.
    pub boxes: Vec<Var>,
}

/// Plain per-layer predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub logits: Vec<Tensor>,
    pub boxes: Vec<Vec<BBox>>,
}

impl BranchOutput {
    pub fn from_vars(g: &Graph, v: &BranchVars) -> Self {
        BranchOutput {
            logits: v.logits.iter().map(|&l| g.value(l).clone()).collect(),
            boxes: v.boxes.iter().map(|&b| boxes_of(g.value(b))).collect(),
        }
    }

    pub fn final_layer(&self) -> usize {
        self.logits.len() - 1
    }
}

pub fn boxes_of(t: &Tensor) -> Vec<BBox> {
    t.rows().map(|r| BBox::from_array([r[0], r[1], r[2], r[3]])).collect()
}

impl DecoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        per_layer_heads: bool,
        alpha: f64,
        tau: f64,
    ) -> Self {
        let layers = (0..n_layers).map(|i| DecoderLayer::new(&format!("{prefix}.dec.l{i}"), dim, heads, ffn)).collect();
        let heads = if per_layer_heads {
            (0..n_layers).map(|i| Heads::new(&format!("{prefix}.head.l{i}"), dim)).collect()
        } else {
            vec![Heads::new(&format!("{prefix}.head"), dim)]
        };
        DecoderStack { layers, ln_out: LayerNorm::new(format!("{prefix}.dec.ln_out"), dim), heads, dim, alpha, tau }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
        self.ln_out.init(store);
        for h in &self.heads {
            h.init(store, rng);
        }
    }

    /// Runs all layers. `tokens`/`token_pos` are the enhanced image tokens
    /// and their positions, `guidance` the enhanced guidance, `protos` the C
    /// unit rows that define the logit columns.
    pub fn decode_branch(
        &self,
        s: &mut Session,
        seeds: &QuerySeeds,
        tokens: Var,
        token_pos: Var,
        guidance: Var,
        protos: Var,
    ) -> Result<BranchVars> {
        let memory_key = s.g.add(tokens, token_pos);
        let mut q = seeds.query;
        let mut reference = seeds.anchors;
        let mut pos = seeds.pos;
        let mut out = BranchVars { logits: Vec::new(), boxes: Vec::new() };
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                pos = sinusoidal_var(&mut s.g, reference, self.dim);
            }
            q = layer.forward(s, q, pos, memory_key, tokens, guidance);
            let h = self.ln_out.forward(s, q);
            let heads = &self.heads[i.min(self.heads.len() - 1)];
            out.logits.push(compute_logits(s, h, protos, &heads.cls, self.alpha, self.tau)?);
            let delta = heads.deltas(s, h);
            reference = box_refine_var(&mut s.g, reference, delta);
            out.boxes.push(reference);
        }
        Ok(out)
    }
}

/// Copies every `text.*` parameter onto its `visual.*` twin.
pub fn clone_weights(store: &mut ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
    store.copy_prefix(src_prefix, dst_prefix)
}
