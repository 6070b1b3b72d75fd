//! Layers built on the autograd graph. Each layer owns parameter ids only;
//! values live in a [`ParamStore`].

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{trunc_normal, Graph, LrGroup, ParamId, ParamStore, Real, Var};
use crate::error::{McrError, Result};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: LrGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(in_dim, out_dim, INIT_STD, rng),
            group,
            true,
        );
        let bias = Some(store.add(
            format!("{name}.bias"),
            Array2::zeros((1, out_dim)),
            group,
            false,
        ));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, group: LrGroup) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim)), group, false),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim)), group, false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        group: LrGroup,
        rng: &mut R,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, group),
            q: Linear::new(store, &format!("{name}.attn.q"), dim, dim, group, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), dim, dim, group, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), dim, dim, group, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), dim, dim, group, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, group),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, group, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, group, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        seq_len: usize,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let h = self.ln1.forward(g, store, x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let a = g.attention(q, k, v, seq_len, self.heads, key_valid);
        let a = self.out.forward(g, store, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }
}

/// Stack of blocks followed by a final layer norm. Zero blocks is the identity.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        group: LrGroup,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), dim, heads, mlp_ratio, group, rng))
            .collect();
        let norm = (depth > 0).then(|| LayerNorm::new(store, &format!("{name}.norm"), dim, group));
        Self { blocks, norm }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs every block, failing fast with the layer index on non-finite activations.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        seq_len: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, store, x, seq_len, key_valid);
            if !g.value(x).iter().all(|v| v.is_finite()) {
                return Err(McrError::Numerical(format!(
                    "non-finite activation after transformer layer {i}"
                )));
            }
        }
        Ok(match &self.norm {
            Some(n) => n.forward(g, store, x),
            None => x,
        })
    }
}

/// Two-layer perceptron `affine -> GELU -> affine`, or a single affine map when
/// `hidden == 0`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Option<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        group: LrGroup,
        rng: &mut R,
    ) -> Self {
        if hidden == 0 {
            Self {
                first: Linear::new(store, &format!("{name}.fc1"), in_dim, out_dim, group, rng),
                second: None,
            }
        } else {
            Self {
                first: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, group, rng),
                second: Some(Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, group, rng)),
            }
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.as_ref().unwrap_or(&self.first).out_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.first.forward(g, store, x);
        match &self.second {
            Some(second) => {
                let h = g.gelu(h);
                second.forward(g, store, h)
            }
            None => h,
        }
    }
}
