//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f32 = 0.02;
pub const LN_EPS: f32 = 1e-6;

pub fn normal_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0f32, INIT_STD).expect("valid deviation");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Normal(0, 0.02) resampled outside two deviations.
pub fn trunc_normal_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0f32, INIT_STD).expect("valid deviation");
    Tensor::from_fn(shape, |_| loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal_init(&[fan_in, fan_out], rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// `x: [.., fan_in]` → `[.., fan_out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, Some(gamma), Some(beta), LN_EPS)
    }
}

/// Two-layer GELU perceptron `d → e·d → d`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1.params(), self.fc2.params()].concat()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// `[B, T, H·dh]` → `[B, H, T, dh]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// `[B, H, T, dh]` → `[B, T, H·dh]`.
fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, t, dh) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, h * dh])
}

/// Intermediate values of one self-attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// `[B, H, T, T]`.
    pub attn: Var,
    /// Attention-weighted values before the output projection, `[B, T, d]`.
    pub mix: Var,
    /// Value vectors, `[B, T, d]`.
    pub values: Var,
}

/// Pre-LN transformer block: `x + MHSA(LN x)`, then `+ FFN(LN ·)`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl SelfAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, true, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, hidden, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.ln1.params(),
            self.qkv.params(),
            self.proj.params(),
            self.ln2.params(),
            self.ffn.params(),
        ]
        .concat()
    }

    /// `x: [B, T, d]`. With `uniform_attention` every attention row is forced
    /// to `1/T`, a test hook for checking the value mix.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        uniform_attention: bool,
    ) -> Result<(Var, AttentionTrace)> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let h = self.ln1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let q = g.slice(qkv, 2, 0, d)?;
        let k = g.slice(qkv, 2, d, d)?;
        let values = g.slice(qkv, 2, 2 * d, d)?;
        let (qh, kh, vh) = (
            split_heads(g, q, self.heads)?,
            split_heads(g, k, self.heads)?,
            split_heads(g, values, self.heads)?,
        );
        let attn = if uniform_attention {
            g.constant(Tensor::full(&[b, self.heads, t, t], 1.0 / t as f32))
        } else {
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, 1.0 / ((d / self.heads) as f32).sqrt());
            g.softmax(scores, 3)?
        };
        let mixed = g.matmul(attn, vh)?;
        let mix = merge_heads(g, mixed)?;
        let out = self.proj.forward(g, store, mix)?;
        let x = g.add(x, out)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let x = g.add(x, f)?;
        Ok((x, AttentionTrace { attn, mix, values }))
    }
}

/// Pose-to-patch cross-attention: queries from pose tokens, keys from patch
/// tokens, both through parameter-free layer norm. Produces only the map.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            w_q: store.add(format!("{name}.w_q"), trunc_normal_init(&[d, d], rng)),
            w_k: store.add(format!("{name}.w_k"), trunc_normal_init(&[d, d], rng)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_q, self.w_k]
    }

    /// `pose: [B, P, d]`, `patches: [B, N, d]` → `[B, H, P, N]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pose: Var, patches: Var) -> Result<Var> {
        let d = g.shape(pose)[2];
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let zn = g.layer_norm(pose, None, None, LN_EPS)?;
        let pn = g.layer_norm(patches, None, None, LN_EPS)?;
        let q = g.matmul(zn, wq)?;
        let k = g.matmul(pn, wk)?;
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / ((d / self.heads) as f32).sqrt());
        g.softmax(scores, 3)
    }
}

/// Head-averaged attention `[B, H, P, N]` mixed directly into patch values:
/// `a = mean_h(attn) · patches`, `[B, P, d]`. No parameters on this path.
pub fn aggregate(g: &mut Graph, attn: Var, patches: Var) -> Result<(Var, Var)> {
    let avg = g.mean_axis(attn, 1)?;
    let a = g.matmul(avg, patches)?;
    Ok((a, avg))
}
