//! Pose-token transformer.
//!
//! Each block runs, in order: patch self-attention over `[CLS; patches]`,
//! self-attention among the P pose tokens, pose→patch cross-attention, and
//! the aggregation update `z ← z + Ā·patches`, `z ← z + FFN(LN z)`.
//! The pose stream `z` starts as the learnable pose tokens themselves.
//!
//! Parameter names are stable and used as checkpoint keys.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassifierHeads, VisibilityHead};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorFile, Var};
use layers::{aggregate, normal_init, CrossAttention, Ffn, LayerNorm, Linear, SelfAttentionBlock};

/// Image channels; inputs are RGB.
pub const CHANNELS: usize = 3;
/// Pixels in [0, 1] are standardized with these before patch embedding.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_parts: usize,
    pub num_classes: usize,
    pub num_cameras: usize,
    pub sie_coefficient: f32,
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
}

fn default_ffn_expansion() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 32,
            patch_size: 8,
            stride: 4,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            num_parts: 5,
            num_classes: 40,
            num_cameras: 2,
            sie_coefficient: 1.0,
            ffn_expansion: 4,
        }
    }
}

impl ModelConfig {
    /// Patch grid `(N_h, N_w)`.
    pub fn grid(&self) -> (usize, usize) {
        let n = |len: usize| {
            if len < self.patch_size || self.stride == 0 {
                0
            } else {
                (len - self.patch_size) / self.stride + 1
            }
        };
        (n(self.image_h), n(self.image_w))
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (nh, nw) = self.grid();
        if nh == 0 || nw == 0 {
            return bad(format!(
                "patch {} / stride {} leave no patches on a {}x{} image",
                self.patch_size, self.stride, self.image_h, self.image_w
            ));
        }
        if nh * nw < self.num_parts {
            return bad(format!("{} patches cannot host {} parts", nh * nw, self.num_parts));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim < 2 || self.num_layers == 0 || self.num_parts == 0 {
            return bad("embed_dim ≥ 2, num_layers ≥ 1 and num_parts ≥ 1 required".into());
        }
        if self.num_classes == 0 || self.num_cameras == 0 || self.ffn_expansion == 0 {
            return bad("num_classes, num_cameras and ffn_expansion must be positive".into());
        }
        if !self.sie_coefficient.is_finite() {
            return bad("sie_coefficient must be finite".into());
        }
        Ok(())
    }

    /// Closed-form learnable scalar count, heads included.
    pub fn expected_param_count(&self) -> usize {
        let d = self.embed_dim;
        let hid = self.ffn_expansion * d;
        let (n, p, c) = (self.num_patches(), self.num_parts, self.num_classes);
        let ln = 2 * d;
        let ffn = d * hid + hid + hid * d + d;
        let sa = ln + (d * 3 * d + 3 * d) + (d * d + d) + ln + ffn;
        let cross = 2 * d * d;
        let pose_update = ln + ffn;
        let embed = self.patch_dim() * d + d + n * d + d + p * d + self.num_cameras * d;
        let finals = 2 * ln;
        let vis = d * (d / 2) + d / 2 + d / 2 + 1;
        let cls_heads = (1 + p) * (d * c + c);
        embed + self.num_layers * (2 * sa + cross + pose_update) + finals + vis + cls_heads
    }
}

/// Cuts every `patch × patch` window at the configured stride, row-major over
/// the grid; each window is flattened channel-major. `[B, C, H, W]` → `[B, N, C·p·p]`.
pub fn extract_patches(images: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != CHANNELS || s[2] != cfg.image_h || s[3] != cfg.image_w {
        return Err(Error::shape(
            "extract_patches",
            s,
            &[0, CHANNELS, cfg.image_h, cfg.image_w],
        ));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let (nh, nw) = cfg.grid();
    let (ps, st) = (cfg.patch_size, cfg.stride);
    let k = cfg.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * nh * nw * k);
    for bi in 0..b {
        for i in 0..nh {
            for j in 0..nw {
                for c in 0..CHANNELS {
                    for y in 0..ps {
                        let row = ((bi * CHANNELS + c) * h + i * st + y) * w + j * st;
                        out.extend_from_slice(&src[row..row + ps]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, nh * nw, k], out)
}

/// Switches that only tests use.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Forces uniform rows in every patch self-attention map.
    pub uniform_patch_attention: bool,
}

/// Graph handles produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, d]`.
    pub cls: Var,
    /// `[B, P, d]`.
    pub parts: Var,
    /// Per layer `[B, H, P, N]`.
    pub ca_attn: Vec<Var>,
    /// Per layer head-averaged map `[B, P, N]`, as used by aggregation.
    pub layer_avg_attn: Vec<Var>,
    /// Mean over layers and heads, `[B, P, N]`.
    pub avg_attn: Var,
    /// `[B, P]` in (0, 1).
    pub visibility: Var,
    /// `[B, C]`.
    pub cls_logits: Var,
    /// `[B, P, C]`.
    pub part_logits: Var,
}

/// Per-sample inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// `[d]`.
    pub cls_feature: Tensor,
    /// `[P, d]`.
    pub part_features: Tensor,
    /// `[L, H, P, N]`.
    pub ca_attn: Tensor,
    /// `[P]`.
    pub visibility: Tensor,
}

/// Mean over the first two axes of `[L, H, P, N]` → `[P, N]`.
pub fn averaged_attention(ca_attn: &Tensor) -> Result<Tensor> {
    let s = ca_attn.shape();
    if s.len() != 4 {
        return Err(Error::shape("averaged_attention", s, &[0, 0, 0, 0]));
    }
    let maps = s[0] * s[1];
    let plane = s[2] * s[3];
    let mut acc = vec![0.0f64; plane];
    for m in ca_attn.data().chunks(plane) {
        for (a, &v) in acc.iter_mut().zip(m) {
            *a += v as f64;
        }
    }
    Tensor::new(
        &[s[2], s[3]],
        acc.into_iter().map(|v| (v / maps as f64) as f32).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Block {
    pub patch_sa: SelfAttentionBlock,
    pub pose_sa: SelfAttentionBlock,
    pub cross: CrossAttention,
    pub pose_ln: LayerNorm,
    pub pose_ffn: Ffn,
}

/// Handles of one block's outputs.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub tokens: Var,
    pub pose: Var,
    pub attn: Var,
    pub avg_attn: Var,
    /// Raw aggregate `Ā·patches` before the residual update.
    pub aggregate: Var,
}

impl Block {
    fn new(store: &mut ParamStore, l: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.num_heads);
        let hid = cfg.ffn_expansion * d;
        let name = format!("blocks.{l}");
        Self {
            patch_sa: SelfAttentionBlock::new(store, &format!("{name}.patch_sa"), d, h, hid, rng),
            pose_sa: SelfAttentionBlock::new(store, &format!("{name}.pose_sa"), d, h, hid, rng),
            cross: CrossAttention::new(store, &format!("{name}.cross"), d, h, rng),
            pose_ln: LayerNorm::new(store, &format!("{name}.pose_ln"), d),
            pose_ffn: Ffn::new(store, &format!("{name}.pose_ffn"), d, hid, rng),
        }
    }

    /// `tokens: [B, 1+N, d]`, `pose: [B, P, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        pose: Var,
        opts: &ForwardOptions,
    ) -> Result<BlockOutput> {
        let (tokens, _) = self
            .patch_sa
            .forward(g, store, tokens, opts.uniform_patch_attention)?;
        let (pose, _) = self.pose_sa.forward(g, store, pose, false)?;
        let n = g.shape(tokens)[1] - 1;
        let patches = g.slice(tokens, 1, 1, n)?;
        let attn = self.cross.forward(g, store, pose, patches)?;
        let (agg, avg_attn) = aggregate(g, attn, patches)?;
        let pose = g.add(pose, agg)?;
        let h = self.pose_ln.forward(g, store, pose)?;
        let f = self.pose_ffn.forward(g, store, h)?;
        let pose = g.add(pose, f)?;
        Ok(BlockOutput {
            tokens,
            pose,
            attn,
            avg_attn,
            aggregate: agg,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PoseTokenTransformer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub cls_token: ParamId,
    pub pose_tokens: ParamId,
    pub sie: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub part_norm: LayerNorm,
    pub visibility_head: VisibilityHead,
    pub heads: ClassifierHeads,
}

impl PoseTokenTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let n = config.num_patches();
        let patch_embed = Linear::new(&mut store, "patch_embed", config.patch_dim(), d, true, &mut rng);
        let pos_embed = store.add("pos_embed", normal_init(&[n, d], &mut rng));
        let cls_token = store.add("cls_token", normal_init(&[1, d], &mut rng));
        let pose_tokens = store.add("pose_tokens", normal_init(&[config.num_parts, d], &mut rng));
        let sie = store.add("sie", normal_init(&[config.num_cameras, d], &mut rng));
        let blocks = (0..config.num_layers)
            .map(|l| Block::new(&mut store, l, &config, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "norm", d);
        let part_norm = LayerNorm::new(&mut store, "part_norm", d);
        let visibility_head = VisibilityHead::new(&mut store, "visibility", d, &mut rng);
        let heads = ClassifierHeads::new(&mut store, d, config.num_parts, config.num_classes, &mut rng);
        Ok(Self {
            config,
            store,
            patch_embed,
            pos_embed,
            cls_token,
            pose_tokens,
            sie,
            blocks,
            norm,
            part_norm,
            visibility_head,
            heads,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `patches: [B, N, C·p·p]` → tokens `[B, 1+N, d]`.
    pub fn embed(&self, g: &mut Graph, patches: Var, cameras: &[usize]) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        let (b, n, d) = (s[0], s[1], self.config.embed_dim);
        if cameras.len() != b {
            return Err(Error::shape("embed cameras", &s, &[cameras.len()]));
        }
        if let Some(&c) = cameras.iter().find(|&&c| c >= self.config.num_cameras) {
            return Err(Error::OutOfRange {
                what: "camera id",
                index: c,
                size: self.config.num_cameras,
            });
        }
        let store = &self.store;
        let x = self.patch_embed.forward(g, store, patches)?;
        let pos = g.param(store, self.pos_embed);
        let x = g.add(x, pos)?;
        let cls_table = g.param(store, self.cls_token);
        let cls = g.embedding(cls_table, &vec![0; b])?;
        let cls = g.reshape(cls, &[b, 1, d])?;
        let x = g.concat(&[cls, x], 1)?;
        if self.config.sie_coefficient == 0.0 {
            return Ok(x);
        }
        let table = g.param(store, self.sie);
        let ids: Vec<usize> = cameras.iter().flat_map(|&c| std::iter::repeat(c).take(n + 1)).collect();
        let side = g.embedding(table, &ids)?;
        let side = g.reshape(side, &[b, n + 1, d])?;
        let side = g.scale(side, self.config.sie_coefficient);
        g.add(x, side)
    }

    /// Initial pose stream `[B, P, d]`.
    pub fn initial_pose(&self, g: &mut Graph, batch: usize) -> Result<Var> {
        let (p, d) = (self.config.num_parts, self.config.embed_dim);
        let table = g.param(&self.store, self.pose_tokens);
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..p).collect();
        let z = g.embedding(table, &idx)?;
        g.reshape(z, &[batch, p, d])
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        cameras: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let patches = extract_patches(images, &self.config)?.map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
        let patches = g.constant(patches);
        self.forward_patches(g, patches, cameras, opts)
    }

    /// Forward pass from pre-extracted patch vectors `[B, N, C·p·p]`.
    pub fn forward_patches(
        &self,
        g: &mut Graph,
        patches: Var,
        cameras: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[1] != self.config.num_patches() || s[2] != self.config.patch_dim() {
            return Err(Error::shape(
                "forward_patches",
                &s,
                &[0, self.config.num_patches(), self.config.patch_dim()],
            ));
        }
        let b = s[0];
        let store = &self.store;
        let mut tokens = self.embed(g, patches, cameras)?;
        let mut pose = self.initial_pose(g, b)?;
        let mut ca_attn = Vec::with_capacity(self.blocks.len());
        let mut layer_avg_attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(g, store, tokens, pose, opts)?;
            tokens = out.tokens;
            pose = out.pose;
            ca_attn.push(out.attn);
            layer_avg_attn.push(out.avg_attn);
        }
        let mut avg = layer_avg_attn[0];
        for &a in &layer_avg_attn[1..] {
            avg = g.add(avg, a)?;
        }
        let avg_attn = g.scale(avg, 1.0 / layer_avg_attn.len() as f32);

        let d = self.config.embed_dim;
        let cls = g.slice(tokens, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, d])?;
        let cls = self.norm.forward(g, store, cls)?;
        let parts = self.part_norm.forward(g, store, pose)?;
        let visibility = self.visibility_head.forward(g, store, parts)?;
        let (cls_logits, part_logits) = self.heads.forward(g, store, cls, parts)?;
        Ok(ForwardOutput {
            cls,
            parts,
            ca_attn,
            layer_avg_attn,
            avg_attn,
            visibility,
            cls_logits,
            part_logits,
        })
    }

    /// Inference over a batch; returns one record per image.
    pub fn infer(&self, images: &Tensor, cameras: &[usize]) -> Result<Vec<ModelOutput>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, cameras, &ForwardOptions::default())?;
        let b = cameras.len();
        let (l, h, p, n) = (
            self.config.num_layers,
            self.config.num_heads,
            self.config.num_parts,
            self.config.num_patches(),
        );
        let per_layer: Vec<&Tensor> = out.ca_attn.iter().map(|&v| g.value(v)).collect();
        let plane = h * p * n;
        let mut records = Vec::with_capacity(b);
        for i in 0..b {
            let mut attn = Vec::with_capacity(l * plane);
            for t in &per_layer {
                attn.extend_from_slice(&t.data()[i * plane..(i + 1) * plane]);
            }
            records.push(ModelOutput {
                cls_feature: g.value(out.cls).index_leading(i)?,
                part_features: g.value(out.parts).index_leading(i)?,
                ca_attn: Tensor::new(&[l, h, p, n], attn)?,
                visibility: g.value(out.visibility).index_leading(i)?,
            });
        }
        Ok(records)
    }

    /// Parameters that the cross-attention / aggregation path of one block can
    /// reach between the patch tokens and the aggregate `a`.
    pub fn aggregation_path_params(&self, block: usize) -> Vec<ParamId> {
        self.blocks[block].cross.params()
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::default();
        file.meta.insert(
            "model_config".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        for p in self.store.iter() {
            file.push(p.name.clone(), p.value.clone());
        }
        file
    }

    /// Copies parameter values from a container; every parameter must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, file: &TensorFile) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let t = file
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape() != self.store.value(id).shape() {
                return Err(Error::shape("load parameter", self.store.value(id).shape(), t.shape()));
            }
            *self.store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}
