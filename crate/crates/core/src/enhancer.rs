//! Bidirectional token/guidance enhancement, top-N query selection and
//! query seeds with dynamic anchors.

use std::f64::consts::TAU;

use crate::backbone::TokenIndex;
use crate::decoder::box_refine_var;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{cosine_sim_matrix, Backward, Graph, Rng, Tensor, Var};
use crate::params::{ParamStore, Session};

const POS_TEMPERATURE: f64 = 20.0;

/// Frequencies used per coordinate: `width/8` sin/cos pairs.
fn pos_freqs(width: usize) -> Vec<f64> {
    let per = width / 4;
    (0..per / 2).map(|i| TAU / POS_TEMPERATURE.powf(2.0 * i as f64 / per as f64)).collect()
}

fn check_pos_width(width: usize) {
    assert!(width.is_multiple_of(8) && width > 0, "positional width {width} must be a positive multiple of 8");
}

/// Sinusoidal embedding of a single box, width `width`.
pub fn sinusoidal_embedding(b: BBox, width: usize) -> Vec<f64> {
    check_pos_width(width);
    let freqs = pos_freqs(width);
    let mut out = Vec::with_capacity(width);
    for v in b.to_array() {
        for f in &freqs {
            out.push((v * f).sin());
            out.push((v * f).cos());
        }
    }
    out
}

struct SinusoidalBackward {
    freqs: Vec<f64>,
}

impl Backward for SinusoidalBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64], grads_in: &mut [Vec<f64>]) {
        let boxes = inputs[0].data();
        let width = 8 * self.freqs.len();
        let n = boxes.len() / 4;
        for i in 0..n {
            for k in 0..4 {
                let v = boxes[i * 4 + k];
                let mut acc = 0.0;
                for (p, f) in self.freqs.iter().enumerate() {
                    let o = i * width + k * 2 * self.freqs.len() + 2 * p;
                    acc += grad_out[o] * f * (v * f).cos() - grad_out[o + 1] * f * (v * f).sin();
                }
                grads_in[0][i * 4 + k] += acc;
            }
        }
    }
}

/// Row-wise sinusoidal embedding of an n×4 box matrix, differentiable.
pub fn sinusoidal_var(g: &mut Graph, boxes: Var, width: usize) -> Var {
    check_pos_width(width);
    let (n, four) = g.value(boxes).dims2();
    assert_eq!(four, 4, "box matrix must be n×4");
    let data: Vec<f64> =
        g.value(boxes).rows().flat_map(|r| sinusoidal_embedding(BBox::from_array([r[0], r[1], r[2], r[3]]), width)).collect();
    g.custom(&[boxes], Tensor::new(&[n, width], data), Box::new(SinusoidalBackward { freqs: pos_freqs(width) }))
}

#[derive(Clone, Debug)]
struct EnhancerLayer {
    ln_x1: LayerNorm,
    self_x: MultiHeadAttention,
    ln_v1: LayerNorm,
    self_v: MultiHeadAttention,
    ln_x2: LayerNorm,
    ln_v2: LayerNorm,
    cross_xv: MultiHeadAttention,
    cross_vx: MultiHeadAttention,
    ln_x3: LayerNorm,
    ffn_x: FeedForward,
    ln_v3: LayerNorm,
    ffn_v: FeedForward,
}

impl EnhancerLayer {
    fn new(p: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        EnhancerLayer {
            ln_x1: LayerNorm::new(format!("{p}.ln_x1"), dim),
            self_x: MultiHeadAttention::new(&format!("{p}.self_x"), dim, heads),
            ln_v1: LayerNorm::new(format!("{p}.ln_v1"), dim),
            self_v: MultiHeadAttention::new(&format!("{p}.self_v"), dim, heads),
            ln_x2: LayerNorm::new(format!("{p}.ln_x2"), dim),
            ln_v2: LayerNorm::new(format!("{p}.ln_v2"), dim),
            cross_xv: MultiHeadAttention::new(&format!("{p}.cross_xv"), dim, heads),
            cross_vx: MultiHeadAttention::new(&format!("{p}.cross_vx"), dim, heads),
            ln_x3: LayerNorm::new(format!("{p}.ln_x3"), dim),
            ffn_x: FeedForward::new(&format!("{p}.ffn_x"), dim, ffn),
            ln_v3: LayerNorm::new(format!("{p}.ln_v3"), dim),
            ffn_v: FeedForward::new(&format!("{p}.ffn_v"), dim, ffn),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for ln in [&self.ln_x1, &self.ln_v1, &self.ln_x2, &self.ln_v2, &self.ln_x3, &self.ln_v3] {
            ln.init(store);
        }
        for a in [&self.self_x, &self.self_v, &self.cross_xv, &self.cross_vx] {
            a.init(store, rng);
        }
        self.ffn_x.init(store, rng);
        self.ffn_v.init(store, rng);
    }

    fn forward(&self, s: &mut Session, x: Var, v: Var, pos: Var) -> (Var, Var) {
        // token self-attention, positions on queries and keys
        let h = self.ln_x1.forward(s, x);
        let hp = s.g.add(h, pos);
        let a = self.self_x.forward(s, hp, hp, h);
        let x = s.g.add(x, a);
        // guidance self-attention
        let h = self.ln_v1.forward(s, v);
        let a = self.self_v.forward(s, h, h, h);
        let v = s.g.add(v, a);
        // bidirectional cross-attention, both directions read the pre-update streams
        let hx = self.ln_x2.forward(s, x);
        let hv = self.ln_v2.forward(s, v);
        let hxp = s.g.add(hx, pos);
        let ax = self.cross_xv.forward(s, hxp, hv, hv);
        let av = self.cross_vx.forward(s, hv, hxp, hx);
        let x = s.g.add(x, ax);
        let v = s.g.add(v, av);
        let h = self.ln_x3.forward(s, x);
        let f = self.ffn_x.forward(s, h);
        let x = s.g.add(x, f);
        let h = self.ln_v3.forward(s, v);
        let f = self.ffn_v.forward(s, h);
        let v = s.g.add(v, f);
        (x, v)
    }
}

/// Stack of enhancer layers under `{prefix}.enh.l{i}`.
#[derive(Clone, Debug)]
pub struct EnhancerStack {
    layers: Vec<EnhancerLayer>,
    pub dim: usize,
}

impl EnhancerStack {
    pub fn new(prefix: &str, n_layers: usize, dim: usize, heads: usize, ffn: usize) -> Self {
        let layers = (0..n_layers).map(|i| EnhancerLayer::new(&format!("{prefix}.enh.l{i}"), dim, heads, ffn)).collect();
        EnhancerStack { layers, dim }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    /// Returns `(X'_I, V')`. `pos` is the N_I×D positional embedding of the
    /// image tokens.
    pub fn enhance(&self, s: &mut Session, tokens: Var, guidance: Var, pos: Var) -> Result<(Var, Var)> {
        let (n_v, dv) = s.g.value(guidance).dims2();
        if n_v == 0 {
            return Err(Error::EmptyGuidance);
        }
        let (_, dx) = s.g.value(tokens).dims2();
        if dx != self.dim || dv != self.dim {
            return Err(Error::BadShape(format!("enhancer width {} got tokens {dx}, guidance {dv}", self.dim)));
        }
        let (mut x, mut v) = (tokens, guidance);
        for l in &self.layers {
            (x, v) = l.forward(s, x, v, pos);
        }
        Ok((x, v))
    }
}

/// Positional embeddings of every image token, from its pyramid cell box.
pub fn token_positions(index: &TokenIndex, width: usize) -> Tensor {
    let data: Vec<f64> = (0..index.len()).flat_map(|i| sinusoidal_embedding(index.cell_box(i), width)).collect();
    Tensor::new(&[index.len(), width], data)
}

/// Per-token score `s_i = max_v cos(x_i, v)`.
pub fn token_scores(tokens: &Tensor, guidance: &Tensor) -> Result<Vec<f64>> {
    let sim = cosine_sim_matrix(tokens, guidance)?;
    Ok(sim.rows().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect())
}

/// Indices of the `n_q` highest scores, best first, ties to the lower index.
pub fn top_indices(scores: &[f64], n_q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n_q.min(scores.len()));
    idx
}

pub fn select_queries(tokens: &Tensor, guidance: &Tensor, n_q: usize) -> Result<Vec<usize>> {
    assert!(n_q >= 1, "n_q must be at least 1");
    Ok(top_indices(&token_scores(tokens, guidance)?, n_q))
}

/// Anchor head plus the learnable content embedding of one branch.
#[derive(Clone, Debug)]
pub struct QueryInit {
    pub anchor_head: Linear,
    pub content_name: String,
    pub dim: usize,
    /// Content rows: 1 when shared, otherwise one per query slot.
    pub content_rows: usize,
}

/// Query seeds on the tape.
#[derive(Clone, Debug)]
pub struct QuerySeeds {
    /// n_q×4 anchors.
    pub anchors: Var,
    /// n_q×D sinusoidal embedding of the anchors.
    pub pos: Var,
    /// n_q×D content part.
    pub content: Var,
    /// `pos + content`.
    pub query: Var,
    pub source_tokens: Vec<usize>,
}

/// Plain view of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySeed {
    pub anchor: BBox,
    pub content: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub source_token: usize,
}

impl QuerySeeds {
    pub fn to_seeds(&self, g: &Graph) -> Vec<QuerySeed> {
        let a = g.value(self.anchors);
        let c = g.value(self.content);
        let p = g.value(self.pos);
        self.source_tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| QuerySeed {
                anchor: BBox::from_array([a.row(i)[0], a.row(i)[1], a.row(i)[2], a.row(i)[3]]),
                content: c.row(i).to_vec(),
                pos_embed: p.row(i).to_vec(),
                source_token: t,
            })
            .collect()
    }
}

/// Extent of the base box the anchor head refines from.
pub const ANCHOR_BASE_EXTENT: f64 = 0.5;

impl QueryInit {
    pub fn new(prefix: &str, dim: usize, shared_content: bool, n_q: usize) -> Self {
        QueryInit {
            anchor_head: Linear::new(format!("{prefix}.anchor_head"), dim, 4),
            content_name: format!("{prefix}.e_cnt"),
            dim,
            content_rows: if shared_content { 1 } else { n_q },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.anchor_head.init_zero(store);
        let data = (0..self.content_rows * self.dim).map(|_| 0.1 * rng.normal()).collect();
        store.insert(self.content_name.clone(), Tensor::new(&[self.content_rows, self.dim], data));
    }

    /// Seeds for the selected tokens: anchors refine the token's cell center
    /// (with extent 0.5) by the anchor head's output.
    pub fn init_query_seeds(&self, s: &mut Session, enhanced: Var, index: &TokenIndex, selected: &[usize]) -> Result<QuerySeeds> {
        if selected.is_empty() {
            return Err(Error::BadConfig("no tokens selected for queries".into()));
        }
        let base: Vec<f64> = selected
            .iter()
            .flat_map(|&t| {
                let c = index.cell_box(t);
                [c.cx, c.cy, ANCHOR_BASE_EXTENT, ANCHOR_BASE_EXTENT]
            })
            .collect();
        let base = s.g.constant(Tensor::new(&[selected.len(), 4], base));
        let feats = s.g.gather_rows(enhanced, selected);
        let delta = self.anchor_head.forward(s, feats);
        let anchors = box_refine_var(&mut s.g, base, delta);
        let pos = sinusoidal_var(&mut s.g, anchors, self.dim);
        let e = s.param(&self.content_name);
        let content = if self.content_rows == 1 {
            s.g.gather_rows(e, &vec![0; selected.len()])
        } else {
            let rows: Vec<usize> = (0..selected.len()).map(|i| i % self.content_rows).collect();
            s.g.gather_rows(e, &rows)
        };
        let query = s.g.add(pos, content);
        Ok(QuerySeeds { anchors, pos, content, query, source_tokens: selected.to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::zero_output_projections;
    use crate::numeric::grad_check;
    use crate::params::Trainable;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.normal()).collect())
    }

    #[test]
    fn selection_examples() {
        assert_eq!(top_indices(&[0.9, 0.2, 0.5], 2), vec![0, 2]);
        assert_eq!(top_indices(&[0.1, 0.7, 0.5], 10), vec![1, 2, 0]);
        assert_eq!(top_indices(&[0.5, 0.5], 1), vec![0]);
    }

    #[test]
    fn selection_is_guidance_order_invariant() {
        let mut rng = Rng::new(4);
        let x = random(&mut rng, 20, 8);
        let v = random(&mut rng, 5, 8);
        let rows: Vec<Vec<f64>> = (0..5).rev().map(|i| v.row(i).to_vec()).collect();
        let vr = Tensor::from_rows(&rows);
        assert_eq!(select_queries(&x, &v, 7).unwrap(), select_queries(&x, &vr, 7).unwrap());
        let sel = select_queries(&x, &v, 7).unwrap();
        let scores = token_scores(&x, &v).unwrap();
        let min_sel = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..20).filter(|i| !sel.contains(i)) {
            assert!(scores[i] <= min_sel);
        }
    }

    fn stack_store(n_layers: usize, dim: usize, seed: u64) -> (EnhancerStack, ParamStore) {
        let st = EnhancerStack::new("text", n_layers, dim, 2, 16);
        let mut store = ParamStore::new();
        st.init(&mut store, &mut Rng::new(seed));
        (st, store)
    }

    #[test]
    fn zeroed_outputs_make_identity() {
        let (st, mut store) = stack_store(2, 8, 1);
        zero_output_projections(&mut store, "text.enh");
        let mut rng = Rng::new(2);
        let xt = random(&mut rng, 6, 8);
        let vt = random(&mut rng, 3, 8);
        let mut s = Session::inference(&store);
        let x = s.g.constant(xt.clone());
        let v = s.g.constant(vt.clone());
        let pos = s.g.constant(random(&mut rng, 6, 8));
        let (xo, vo) = st.enhance(&mut s, x, v, pos).unwrap();
        assert_eq!(s.g.value(xo), &xt);
        assert_eq!(s.g.value(vo), &vt);
    }

    #[test]
    fn updates_both_streams_and_keeps_shapes() {
        let (st, store) = stack_store(1, 8, 1);
        let mut rng = Rng::new(3);
        let mut s = Session::inference(&store);
        let x = s.g.constant(random(&mut rng, 6, 8));
        let v = s.g.constant(random(&mut rng, 1, 8));
        let pos = s.g.constant(Tensor::zeros(&[6, 8]));
        let (xo, vo) = st.enhance(&mut s, x, v, pos).unwrap();
        assert_eq!(s.g.shape(xo), &[6, 8]);
        assert_eq!(s.g.shape(vo), &[1, 8]);
        assert!(s.g.value(xo).max_abs_diff(s.g.value(x)) > 1e-6);
        assert!(s.g.value(vo).max_abs_diff(s.g.value(v)) > 1e-6);
    }

    #[test]
    fn empty_guidance_rejected() {
        let (st, store) = stack_store(1, 8, 1);
        let mut s = Session::inference(&store);
        let x = s.g.constant(Tensor::zeros(&[2, 8]));
        let v = s.g.constant(Tensor::new(&[0, 8], vec![]));
        let pos = s.g.constant(Tensor::zeros(&[2, 8]));
        assert!(matches!(st.enhance(&mut s, x, v, pos), Err(Error::EmptyGuidance)));
    }

    #[test]
    fn enhance_gradients() {
        let (st, store) = stack_store(1, 8, 5);
        let mut rng = Rng::new(6);
        let vt = random(&mut rng, 3, 8);
        let pt = random(&mut rng, 4, 8);
        let wt = random(&mut rng, 7, 8);
        let xt = random(&mut rng, 4, 8);
        let err = grad_check(
            |g, x| {
                let mut s = Session::new(&store, Trainable::None);
                std::mem::swap(&mut s.g, g);
                let v = s.g.constant(vt.clone());
                let pos = s.g.constant(pt.clone());
                let (xo, vo) = st.enhance(&mut s, x, v, pos)?;
                let both = s.g.concat_rows(&[xo, vo]);
                let w = s.g.constant(wt.clone());
                let p = s.g.mul(both, w);
                let y = s.g.sum(p);
                std::mem::swap(&mut s.g, g);
                Ok(y)
            },
            &xt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sinusoidal_gradient_and_determinism() {
        let b = BBox::new(0.3, 0.6, 0.2, 0.4);
        assert_eq!(sinusoidal_embedding(b, 16), sinusoidal_embedding(b, 16));
        let x = Tensor::from_rows(&[vec![0.3, 0.6, 0.2, 0.4], vec![0.9, 0.1, 0.5, 0.05]]);
        let w = random(&mut Rng::new(1), 2, 16);
        let err = grad_check(
            |g, x| {
                let e = sinusoidal_var(g, x, 16);
                let wv = g.constant(w.clone());
                let p = g.mul(e, wv);
                Ok(g.sum(p))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn zero_anchor_head_gives_cell_centred_anchors() {
        let dim = 8;
        let qi = QueryInit::new("text", dim, true, 4);
        let mut store = ParamStore::new();
        qi.init(&mut store, &mut Rng::new(1));
        let index = TokenIndex::new(&[(2, 2), (1, 1)]);
        let mut s = Session::inference(&store);
        let x = s.g.constant(random(&mut Rng::new(2), 5, dim));
        let seeds = qi.init_query_seeds(&mut s, x, &index, &[3, 4, 3]).unwrap();
        let plain = seeds.to_seeds(&s.g);
        let c3 = index.cell_box(3);
        assert!((plain[0].anchor.cx - c3.cx).abs() < 1e-12);
        assert!((plain[0].anchor.cy - c3.cy).abs() < 1e-12);
        assert!((plain[0].anchor.w - 0.5).abs() < 1e-12);
        assert!((plain[1].anchor.h - 0.5).abs() < 1e-12);
        assert_eq!(plain[0], plain[2]);
        assert_eq!(plain[0].content, plain[1].content);
        assert_eq!(plain[0].pos_embed, sinusoidal_embedding(plain[0].anchor, dim));
    }
}
