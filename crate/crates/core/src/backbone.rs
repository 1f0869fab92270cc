//! Toy multi-scale image encoder and the frozen class-name embedding
//! stand-in with its learnable projection.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numeric::{l2_normalize, Backward, Graph, Rng, Tensor, Var};
use crate::params::{init_uniform, ParamStore, Session};

/// Number of pyramid levels (strides 8, 16, 32, 64).
pub const PYRAMID_LEVELS: usize = 4;
pub const STEM_STRIDE: usize = 8;

/// Spatial size of each level for an `h`×`w` input.
pub fn level_sizes(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut sizes = vec![(h.div_ceil(STEM_STRIDE), w.div_ceil(STEM_STRIDE))];
    for _ in 1..PYRAMID_LEVELS {
        let (ph, pw) = *sizes.last().unwrap();
        sizes.push((ph.div_ceil(2), pw.div_ceil(2)));
    }
    sizes
}

struct PatchifyBackward {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    out_w: usize,
}

/// Maps output element `(cell, c*s*s + ky*s + kx)` to the flat input index,
/// `None` for zero padding.
fn patch_source(
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    out_w: usize,
    cell: usize,
    col: usize,
) -> Option<usize> {
    let (oy, ox) = (cell / out_w, cell % out_w);
    let c = col / (stride * stride);
    let (ky, kx) = ((col / stride) % stride, col % stride);
    let (y, x) = (oy * stride + ky, ox * stride + kx);
    debug_assert!(c < channels);
    (y < height && x < width).then(|| (c * height + y) * width + x)
}

impl Backward for PatchifyBackward {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad_out: &[f64], grads_in: &mut [Vec<f64>]) {
        let cols = output.shape()[1];
        for (i, go) in grad_out.iter().enumerate() {
            if let Some(src) =
                patch_source(self.channels, self.height, self.width, self.stride, self.out_w, i / cols, i % cols)
            {
                grads_in[0][src] += go;
            }
        }
    }
}

/// Rearranges a C×H×W map into non-overlapping `stride`×`stride` patches:
/// `(⌈H/s⌉·⌈W/s⌉) × (C·s·s)`, zero-padding the ragged border.
pub fn patchify(g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
    let (channels, height, width) = match g.shape(x) {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::BadShape(format!("patchify expects C×H×W, got {s:?}"))),
    };
    let (out_h, out_w) = (height.div_ceil(stride), width.div_ceil(stride));
    let cols = channels * stride * stride;
    let src = g.value(x).data();
    let mut out = vec![0.0; out_h * out_w * cols];
    for (i, o) in out.iter_mut().enumerate() {
        if let Some(s) = patch_source(channels, height, width, stride, out_w, i / cols, i % cols) {
            *o = src[s];
        }
    }
    let rule = PatchifyBackward { channels, height, width, stride, out_w };
    Ok(g.custom(&[x], Tensor::new(&[out_h * out_w, cols], out), Box::new(rule)))
}

/// Feature maps on the tape, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// D×H_ℓ×W_ℓ maps.
    pub levels: Vec<Var>,
    /// The same maps as (H_ℓ·W_ℓ)×D token matrices.
    pub tokens: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
    pub d_model: usize,
}

/// Where a flattened image token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCell {
    pub level: usize,
    pub y: usize,
    pub x: usize,
}

/// Inverse of pyramid tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenIndex {
    pub cells: Vec<TokenCell>,
    pub sizes: Vec<(usize, usize)>,
}

impl TokenIndex {
    pub fn new(sizes: &[(usize, usize)]) -> Self {
        let cells = sizes
            .iter()
            .enumerate()
            .flat_map(|(level, &(h, w))| (0..h).flat_map(move |y| (0..w).map(move |x| TokenCell { level, y, x })))
            .collect();
        TokenIndex { cells, sizes: sizes.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Token position of `(level, y, x)`.
    pub fn token_of(&self, cell: TokenCell) -> usize {
        let offset: usize = self.sizes[..cell.level].iter().map(|(h, w)| h * w).sum();
        offset + cell.y * self.sizes[cell.level].1 + cell.x
    }

    /// Normalized box covering the token's pyramid cell.
    pub fn cell_box(&self, token: usize) -> BBox {
        let c = self.cells[token];
        let (h, w) = self.sizes[c.level];
        BBox::new((c.x as f64 + 0.5) / w as f64, (c.y as f64 + 0.5) / h as f64, 1.0 / w as f64, 1.0 / h as f64)
    }

    /// Cell boxes of every token as an N×4 tensor.
    pub fn cell_boxes(&self) -> Tensor {
        let rows: Vec<f64> = (0..self.len()).flat_map(|i| self.cell_box(i).to_array()).collect();
        Tensor::new(&[self.len(), 4], rows)
    }
}

/// Strided patch-embedding encoder: an 8×8 stem followed by three 2×2
/// downsampling stages, each with a tanh nonlinearity.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub d_model: usize,
}

impl Backbone {
    pub fn new(d_model: usize) -> Self {
        Backbone { d_model }
    }

    fn stage_name(level: usize) -> String {
        if level == 0 {
            "backbone.stem".into()
        } else {
            format!("backbone.down{level}")
        }
    }

    fn fan_in(&self, level: usize) -> usize {
        if level == 0 {
            3 * STEM_STRIDE * STEM_STRIDE
        } else {
            self.d_model * 4
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for level in 0..PYRAMID_LEVELS {
            let name = Self::stage_name(level);
            let fan_in = self.fan_in(level);
            // gain keeps tanh activations away from saturation at init
            let mut w = init_uniform(rng, &[fan_in, self.d_model], fan_in);
            w.data_mut().iter_mut().for_each(|v| *v *= 1.5);
            store.insert(format!("{name}.w"), w);
            store.insert(format!("{name}.b"), Tensor::zeros(&[self.d_model]));
        }
    }

    /// Runs the encoder on a 3×H×W image.
    pub fn extract_pyramid(&self, s: &mut Session, image: Var) -> Result<FeaturePyramid> {
        let (h, w) = match s.g.shape(image) {
            &[3, h, w] => (h, w),
            other => return Err(Error::BadShape(format!("expected a 3×H×W image, got {other:?}"))),
        };
        let sizes = level_sizes(h, w);
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        let mut tokens = Vec::with_capacity(PYRAMID_LEVELS);
        let mut prev = image;
        for (level, &(lh, lw)) in sizes.iter().enumerate() {
            let stride = if level == 0 { STEM_STRIDE } else { 2 };
            let patches = patchify(&mut s.g, prev, stride)?;
            let name = Self::stage_name(level);
            let wv = s.param(&format!("{name}.w"));
            let bv = s.param(&format!("{name}.b"));
            let t = s.g.matmul(patches, wv);
            let t = s.g.add_row(t, bv);
            let t = s.g.tanh(t);
            let map = s.g.transpose(t);
            let map = s.g.reshape(map, &[self.d_model, lh, lw]);
            tokens.push(t);
            levels.push(map);
            prev = map;
        }
        Ok(FeaturePyramid { levels, tokens, sizes, d_model: self.d_model })
    }
}

/// Level-major, row-major concatenation of all pyramid tokens.
pub fn tokenize_pyramid(g: &mut Graph, p: &FeaturePyramid) -> (Var, TokenIndex) {
    (g.concat_rows(&p.tokens), TokenIndex::new(&p.sizes))
}

/// Class-name embeddings: frozen raw vectors and their learnable projection.
#[derive(Clone, Debug)]
pub struct TextPrototypes {
    pub raw: Tensor,
    /// C×D unit rows on the tape.
    pub projected: Var,
    pub class_names: Vec<String>,
    pub tau_t: f64,
}

pub const TEXT_PROJ: &str = "text_embed.w_t";

/// Deterministic stand-in embedding for a class name: a unit-variance
/// Gaussian vector seeded from a hash of `(salt, name)`.
pub fn raw_text_embedding(name: &str, salt: &str, d_text: usize) -> Tensor {
    let digest = Sha256::digest(format!("{salt}\u{0}{name}").as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = Rng::new(seed);
    Tensor::new(&[d_text], (0..d_text).map(|_| rng.normal()).collect())
}

pub fn init_text_projection(store: &mut ParamStore, rng: &mut Rng, d_text: usize, d_model: usize) {
    store.insert(TEXT_PROJ, init_uniform(rng, &[d_text, d_model], d_text));
}

/// Embeds, projects with `W_t`, scales by `1/tau_t` and normalizes.
pub fn embed_text(s: &mut Session, class_names: &[String], tau_t: f64, salt: &str) -> Result<TextPrototypes> {
    if class_names.is_empty() {
        return Err(Error::BadConfig("no class names".into()));
    }
    for (i, n) in class_names.iter().enumerate() {
        if class_names[..i].contains(n) {
            return Err(Error::DuplicateClass(n.clone()));
        }
    }
    let w_t = s.param(TEXT_PROJ);
    let d_text = s.g.shape(w_t)[0];
    let rows: Vec<Vec<f64>> =
        class_names.iter().map(|n| raw_text_embedding(n, salt, d_text).into_data()).collect();
    let raw = Tensor::from_rows(&rows);
    let rv = s.g.constant(raw.clone());
    let proj = s.g.matmul(rv, w_t);
    let proj = s.g.scale(proj, 1.0 / tau_t);
    let projected = s.g.l2_normalize(proj)?;
    Ok(TextPrototypes { raw, projected, class_names: class_names.to_vec(), tau_t })
}

/// Forward-only text prototypes as plain tensors.
pub fn project_text(raw: &Tensor, w_t: &Tensor, tau_t: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let r = g.constant(raw.clone());
    let w = g.constant(w_t.clone());
    let p = g.matmul(r, w);
    let p = g.scale(p, 1.0 / tau_t);
    l2_normalize(g.value(p))
}
