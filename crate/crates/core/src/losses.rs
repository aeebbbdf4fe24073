//! Classifier and visibility heads plus every training objective.
//!
//! All losses are recorded on the graph and return scalar [`Var`]s. Masks and
//! labels are plain data; they never carry gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::model::ForwardOutput;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const BCE_LOG_CLAMP: f32 = 1e-7;

/// `d → d/2 → 1` perceptron with GELU and a sigmoid output, shared across parts.
#[derive(Clone, Debug)]
pub struct VisibilityHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VisibilityHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d / 2, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), d / 2, 1, true, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.fc1.params(), self.fc2.params()].concat()
    }

    /// `[B, P, d]` → `[B, P]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, parts: Var) -> Result<Var> {
        let s = g.shape(parts).to_vec();
        let h = self.fc1.forward(g, store, parts)?;
        let h = g.gelu(h);
        let logit = self.fc2.forward(g, store, h)?;
        let v = g.sigmoid(logit);
        g.reshape(v, &s[..s.len() - 1])
    }
}

/// One linear identity classifier on the CLS feature and one per part. Each
/// classifier sees its feature standardized over the batch (no affine terms);
/// the triplet terms use the raw features.
#[derive(Clone, Debug)]
pub struct ClassifierHeads {
    pub cls: Linear,
    pub parts: Vec<Linear>,
}

impl ClassifierHeads {
    pub fn new(store: &mut ParamStore, d: usize, parts: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            cls: Linear::new(store, "heads.cls", d, classes, true, rng),
            parts: (0..parts)
                .map(|p| Linear::new(store, &format!("heads.part{p}"), d, classes, true, rng))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.cls.params();
        for h in &self.parts {
            ids.extend(h.params());
        }
        ids
    }

    /// `cls: [B, d]`, `parts: [B, P, d]` → `([B, C], [B, P, C])`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cls: Var, parts: Var) -> Result<(Var, Var)> {
        let s = g.shape(parts).to_vec();
        let (b, d) = (s[0], s[2]);
        let cls = batch_standardize(g, cls)?;
        let cls_logits = self.cls.forward(g, store, cls)?;
        let mut per_part = Vec::with_capacity(self.parts.len());
        for (p, head) in self.parts.iter().enumerate() {
            let f = g.slice(parts, 1, p, 1)?;
            let f = g.reshape(f, &[b, d])?;
            let f = batch_standardize(g, f)?;
            let logits = head.forward(g, store, f)?;
            let c = g.shape(logits)[1];
            per_part.push(g.reshape(logits, &[b, 1, c])?);
        }
        let part_logits = g.concat(&per_part, 1)?;
        Ok((cls_logits, part_logits))
    }
}

pub const BATCH_NORM_EPS: f32 = 1e-5;

/// Zero mean, unit variance per channel across the batch: `[B, d]` → `[B, d]`.
pub fn batch_standardize(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.transpose(x)?;
    let n = g.layer_norm(t, None, None, BATCH_NORM_EPS)?;
    g.transpose(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the pose-attention term.
    pub lambda_pose: f32,
    pub margin: f32,
    pub label_smoothing: f32,
    /// Multiplier applied to distances to occluded negatives.
    pub big: f32,
    /// Mask part ID / triplet terms with the visibility labels.
    pub teacher_forcing: bool,
    /// Train the visibility head.
    pub visibility_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pose: 10.0,
            margin: 0.3,
            label_smoothing: 0.0,
            big: 1e6,
            teacher_forcing: true,
            visibility_loss: true,
        }
    }
}

/// Per-batch supervision.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    pub identity: Vec<usize>,
    /// `[B, P]` in {0, 1}.
    pub v_gt: Tensor,
    /// `[B, P, N]` ground-truth heatmaps.
    pub heatmaps: Tensor,
}

/// Mean cross-entropy over rows of `logits: [R, C]`.
pub fn id_loss(g: &mut Graph, logits: Var, labels: &[usize], smoothing: f32) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels, smoothing)?;
    Ok(g.mean(ce))
}

/// Hardest positive / negative for each anchor of a `[B, B]` distance matrix.
///
/// `mask[i]` flags samples whose feature is usable; `None` means all usable.
/// With a mask, pairs involving an unusable sample have their positive
/// distance multiplied by 0 and their negative distance by `big` before
/// mining, and anchors that are themselves unusable are skipped. Positives
/// exclude the anchor itself. Ties resolve to the lowest index. Anchors
/// without a usable positive or negative yield `None`.
pub fn batch_hard_pairs(
    dist: &[f32],
    identity: &[usize],
    mask: Option<&[bool]>,
    big: f32,
) -> Vec<Option<(usize, usize)>> {
    let b = identity.len();
    let ok = |i: usize| mask.map_or(true, |m| m[i]);
    (0..b)
        .map(|a| {
            if !ok(a) {
                return None;
            }
            let mut pos: Option<(usize, f32)> = None;
            let mut neg: Option<(usize, f32)> = None;
            let mut any_pos = false;
            let mut any_neg = false;
            for j in 0..b {
                if j == a {
                    continue;
                }
                let d = dist[a * b + j];
                if identity[j] == identity[a] {
                    let v = if ok(j) { d } else { 0.0 };
                    any_pos |= ok(j);
                    if pos.map_or(true, |(_, best)| v > best) {
                        pos = Some((j, v));
                    }
                } else {
                    let v = if ok(j) { d } else { d * big };
                    any_neg |= ok(j);
                    if neg.map_or(true, |(_, best)| v < best) {
                        neg = Some((j, v));
                    }
                }
            }
            match (pos, neg) {
                (Some((p, _)), Some((n, _))) if any_pos && any_neg => Some((p, n)),
                _ => None,
            }
        })
        .collect()
}

/// Hinge over mined pairs, averaged over valid anchors. Returns the loss and
/// the number of anchors that contributed.
fn mined_triplet(
    g: &mut Graph,
    features: Var,
    identity: &[usize],
    mask: Option<&[bool]>,
    margin: f32,
    big: f32,
) -> Result<(Var, usize)> {
    let dist = g.pairwise_distance(features)?;
    let b = identity.len();
    let pairs = batch_hard_pairs(g.value(dist).data(), identity, mask, big);
    let usable = |i: usize| mask.map_or(true, |m| m[i]);
    let (mut ap, mut an, mut mp, mut mn) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (a, pair) in pairs.iter().enumerate() {
        if let Some((p, n)) = *pair {
            ap.push(a * b + p);
            an.push(a * b + n);
            mp.push(if usable(p) { 1.0 } else { 0.0 });
            mn.push(if usable(n) { 1.0 } else { big });
        }
    }
    if ap.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let mut dap = g.gather(dist, &ap)?;
    let mut dan = g.gather(dist, &an)?;
    if mp.iter().any(|&m| m != 1.0) {
        let m = g.constant(Tensor::new(&[mp.len()], mp)?);
        dap = g.mul(dap, m)?;
    }
    if mn.iter().any(|&m| m != 1.0) {
        let m = g.constant(Tensor::new(&[mn.len()], mn)?);
        dan = g.mul(dan, m)?;
    }
    let diff = g.sub(dap, dan)?;
    let diff = g.add_scalar(diff, margin);
    let hinge = g.relu(diff);
    Ok((g.mean(hinge), ap.len()))
}

/// Batch-hard triplet loss on `features: [B, d]` with Euclidean distance.
pub fn triplet_loss_batch_hard(g: &mut Graph, features: Var, identity: &[usize], margin: f32) -> Result<Var> {
    check_rows(g, features, identity.len(), "triplet features")?;
    let (loss, used) = mined_triplet(g, features, identity, None, margin, 1.0)?;
    if used == 0 {
        log::warn!("triplet loss: no anchor has both a positive and a negative");
    }
    Ok(loss)
}

/// Visibility-masked batch-hard triplet over part features `[B, P, d]`,
/// averaged over parts (each part: mean over its valid anchors).
pub fn masked_triplet(
    g: &mut Graph,
    parts: Var,
    identity: &[usize],
    v_gt: &Tensor,
    margin: f32,
    big: f32,
) -> Result<Var> {
    let s = g.shape(parts).to_vec();
    let (b, p, d) = (s[0], s[1], s[2]);
    check_rows(g, parts, identity.len(), "part features")?;
    check_mask(v_gt, b, p)?;
    let mut total: Option<Var> = None;
    for part in 0..p {
        let mask: Vec<bool> = (0..b).map(|i| v_gt.data()[i * p + part] > 0.5).collect();
        let f = g.slice(parts, 1, part, 1)?;
        let f = g.reshape(f, &[b, d])?;
        let (loss, _) = mined_triplet(g, f, identity, Some(&mask), margin, big)?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.expect("at least one part");
    Ok(g.scale(total, 1.0 / p as f32))
}

/// Cross-entropy per (sample, part), averaged over visible pairs.
pub fn masked_part_id_loss(
    g: &mut Graph,
    part_logits: Var,
    identity: &[usize],
    v_gt: &Tensor,
    smoothing: f32,
) -> Result<Var> {
    let s = g.shape(part_logits).to_vec();
    let (b, p, c) = (s[0], s[1], s[2]);
    check_rows(g, part_logits, identity.len(), "part logits")?;
    check_mask(v_gt, b, p)?;
    let visible = v_gt.data().iter().filter(|&&v| v > 0.5).count();
    if visible == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let flat = g.reshape(part_logits, &[b * p, c])?;
    let labels: Vec<usize> = identity.iter().flat_map(|&y| std::iter::repeat(y).take(p)).collect();
    let ce = g.cross_entropy(flat, &labels, smoothing)?;
    let w = v_gt.map(|v| if v > 0.5 { 1.0 / visible as f32 } else { 0.0 });
    let w = g.constant(w.reshape(&[b * p])?);
    let weighted = g.mul(ce, w)?;
    Ok(g.sum(weighted))
}

/// Mean squared error between averaged attention and ground truth over the
/// visible parts of each sample, normalized by the visible-part count and
/// averaged over the batch. `avg_attn, gt: [B, P, N]`, `v_gt: [B, P]`.
pub fn pose_loss(g: &mut Graph, avg_attn: Var, gt: &Tensor, v_gt: &Tensor) -> Result<Var> {
    let s = g.shape(avg_attn).to_vec();
    if gt.shape() != s.as_slice() || s.len() != 3 {
        return Err(Error::shape("pose_loss", &s, gt.shape()));
    }
    let (b, p, n) = (s[0], s[1], s[2]);
    check_mask(v_gt, b, p)?;
    let mut w = vec![0.0f32; b * p * n];
    for i in 0..b {
        let row = &v_gt.data()[i * p..(i + 1) * p];
        let vis = row.iter().filter(|&&v| v > 0.5).count();
        if vis == 0 {
            continue;
        }
        let weight = 1.0 / (n * vis * b) as f32;
        for (part, &v) in row.iter().enumerate() {
            if v > 0.5 {
                w[(i * p + part) * n..(i * p + part + 1) * n].fill(weight);
            }
        }
    }
    let target = g.constant(gt.clone());
    let diff = g.sub(avg_attn, target)?;
    let sq = g.mul(diff, diff)?;
    let w = g.constant(Tensor::new(&s, w)?);
    let weighted = g.mul(sq, w)?;
    Ok(g.sum(weighted))
}

/// Binary cross-entropy with logarithms clamped at `BCE_LOG_CLAMP`, mean over entries.
pub fn visibility_loss(g: &mut Graph, v: Var, v_gt: &Tensor) -> Result<Var> {
    if g.shape(v) != v_gt.shape() {
        return Err(Error::shape("visibility_loss", g.shape(v), v_gt.shape()));
    }
    let y = g.constant(v_gt.clone());
    let not_y = g.constant(v_gt.map(|t| 1.0 - t));
    let log_v = g.log_clamped(v, BCE_LOG_CLAMP);
    let neg = g.scale(v, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_not = g.log_clamped(one_minus, BCE_LOG_CLAMP);
    let a = g.mul(y, log_v)?;
    let b = g.mul(not_y, log_not)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll);
    Ok(g.scale(m, -1.0))
}

/// Scalar handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls_id: Var,
    pub cls_triplet: Var,
    pub part_id: Var,
    pub part_triplet: Var,
    /// Unweighted; the total uses `lambda_pose · pose`.
    pub pose: Var,
    pub visibility: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f32,
    pub cls_id: f32,
    pub cls_triplet: f32,
    pub part_id: f32,
    pub part_triplet: f32,
    pub pose: f32,
    pub visibility: f32,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            total: v(self.total),
            cls_id: v(self.cls_id),
            cls_triplet: v(self.cls_triplet),
            part_id: v(self.part_id),
            part_triplet: v(self.part_triplet),
            pose: v(self.pose),
            visibility: v(self.visibility),
        }
    }
}

impl LossBreakdown {
    /// Terms by name, total last.
    pub fn named(&self) -> [(&'static str, f32); 7] {
        [
            ("cls_id", self.cls_id),
            ("cls_triplet", self.cls_triplet),
            ("part_id", self.part_id),
            ("part_triplet", self.part_triplet),
            ("pose", self.pose),
            ("visibility", self.visibility),
            ("total", self.total),
        ]
    }
}

/// `L = L_id(cls) + L_tri(cls) + L_id(parts) + L_tri(parts) + λ·L_pose + L_vis`.
pub fn total_loss(g: &mut Graph, out: &ForwardOutput, t: &BatchTargets, cfg: &LossConfig) -> Result<LossTerms> {
    let b = t.identity.len();
    let p = g.shape(out.parts)[1];
    let mask = if cfg.teacher_forcing {
        t.v_gt.clone()
    } else {
        Tensor::full(&[b, p], 1.0)
    };
    let cls_id = id_loss(g, out.cls_logits, &t.identity, cfg.label_smoothing)?;
    let cls_triplet = triplet_loss_batch_hard(g, out.cls, &t.identity, cfg.margin)?;
    let part_id = masked_part_id_loss(g, out.part_logits, &t.identity, &mask, cfg.label_smoothing)?;
    let part_triplet = masked_triplet(g, out.parts, &t.identity, &mask, cfg.margin, cfg.big)?;
    let pose = pose_loss(g, out.avg_attn, &t.heatmaps, &t.v_gt)?;
    let visibility = if cfg.visibility_loss {
        visibility_loss(g, out.visibility, &t.v_gt)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let mut total = g.add(cls_id, cls_triplet)?;
    total = g.add(total, part_id)?;
    total = g.add(total, part_triplet)?;
    let weighted = g.scale(pose, cfg.lambda_pose);
    total = g.add(total, weighted)?;
    total = g.add(total, visibility)?;
    Ok(LossTerms {
        total,
        cls_id,
        cls_triplet,
        part_id,
        part_triplet,
        pose,
        visibility,
    })
}

fn check_rows(g: &Graph, x: Var, rows: usize, what: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.first() != Some(&rows) {
        return Err(Error::shape(what, s, &[rows]));
    }
    Ok(())
}

fn check_mask(v_gt: &Tensor, b: usize, p: usize) -> Result<()> {
    if v_gt.shape() != [b, p] {
        return Err(Error::shape("visibility mask", v_gt.shape(), &[b, p]));
    }
    Ok(())
}
