//! Building blocks shared by the enhancer and the decoders.

use crate::numeric::{Rng, Tensor, Var};
use crate::params::{init_uniform, ParamStore, Session};

#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear { prefix: prefix.into(), d_in, d_out }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        store.insert(self.weight_name(), init_uniform(rng, &[self.d_in, self.d_out], self.d_in));
        store.insert(self.bias_name(), Tensor::zeros(&[self.d_out]));
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(self.weight_name(), Tensor::zeros(&[self.d_in, self.d_out]));
        store.insert(self.bias_name(), Tensor::zeros(&[self.d_out]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(&self.weight_name());
        let b = s.param(&self.bias_name());
        let y = s.g.matmul(x, w);
        s.g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        LayerNorm { prefix: prefix.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.g", self.prefix), Tensor::filled(&[self.dim], 1.0));
        store.insert(format!("{}.b", self.prefix), Tensor::zeros(&[self.dim]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let g = s.param(&format!("{}.g", self.prefix));
        let b = s.param(&format!("{}.b", self.prefix));
        s.g.layer_norm(x, g, b)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "d_model {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(format!("{prefix}.q"), dim, dim),
            k: Linear::new(format!("{prefix}.k"), dim, dim),
            v: Linear::new(format!("{prefix}.v"), dim, dim),
            out: Linear::new(format!("{prefix}.o"), dim, dim),
            heads,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, s: &mut Session, query: Var, key: Var, value: Var) -> Var {
        let q = self.q.forward(s, query);
        let k = self.k.forward(s, key);
        let v = self.v.forward(s, value);
        let a = s.g.attention(q, k, v, self.heads);
        self.out.forward(s, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(format!("{prefix}.up"), dim, hidden),
            down: Linear::new(format!("{prefix}.down"), hidden, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.up.init(store, rng);
        self.down.init(store, rng);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.up.forward(s, x);
        let h = s.g.gelu(h);
        self.down.forward(s, h)
    }
}

/// Sets every output projection (attention `o`, feed-forward `down`) under
/// `prefix` to zero, which turns residual blocks into the identity.
pub fn zero_output_projections(store: &mut ParamStore, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if name.starts_with(prefix) && (name.contains(".o.") || name.contains(".down.")) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
