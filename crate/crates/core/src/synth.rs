//! Procedural person re-identification data with exact part geometry.
//!
//! A "person" is a stack of horizontal bands, one per body part, painted with
//! an identity-specific color and pattern per part. Cameras multiply the image
//! by a fixed channel tint. Occluders are textured rectangles. Each part band
//! carries a Gaussian confidence blob (optionally split into left/right
//! fragments) whose peak drops with the fraction of the band that is covered.
//!
//! Every random draw comes from a per-sample stream derived from the `SynthSpec` seed,
//! so generation is reproducible sample by sample. The occluded evaluation
//! split shares its base images with the clean one and only adds occluders.
//!
//! On disk a split is a directory of PNG images, one tensor container per
//! sample holding `fragments: [F, H, W]`, and a tab-separated manifest
//! `<split>.tsv` with the header
//! `image_path  identity  camera  fragments_path  rects`, where `rects` lists
//! occluders as `y,x,h,w` joined by `;` (or `-` when there are none) and paths
//! are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{downsample_to_grid, GridRect, PartConfig, ThetaPreset};
use crate::imageio::{load_rgb_png, quantize, save_rgb_png};
use crate::tensor::{Tensor, TensorFile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    fn parse(s: &str) -> Option<Self> {
        let v: Vec<usize> = s.split(',').map(|t| t.trim().parse().ok()).collect::<Option<_>>()?;
        match v[..] {
            [y, x, h, w] => Some(Self { y, x, h, w }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_train_ids: usize,
    pub train_images_per_id: usize,
    pub num_eval_ids: usize,
    pub eval_images_per_id: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub num_parts: usize,
    /// Relative band heights, top to bottom; empty means the built-in layout.
    pub band_fractions: Vec<f32>,
    /// Maximum figure displacement in pixels.
    pub jitter: usize,
    pub camera_count: usize,
    /// Per-camera RGB multipliers; empty means evenly spread defaults.
    pub tint_per_camera: Vec<[f32; 3]>,
    pub occlusion_probability: f32,
    /// Occlusion rate of the occluded evaluation split.
    pub eval_occlusion_probability: f32,
    /// Occluder height as a fraction of the image height.
    pub occluder_size_range: [f32; 2],
    /// Occluder width as a fraction of the image width.
    pub occluder_width_range: [f32; 2],
    pub noise_std: f32,
    /// Two fragments (left and right half) per part instead of one.
    pub split_fragments: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_train_ids: 40,
            train_images_per_id: 8,
            num_eval_ids: 10,
            eval_images_per_id: 6,
            image_h: 64,
            image_w: 32,
            num_parts: 5,
            band_fractions: Vec::new(),
            jitter: 2,
            camera_count: 2,
            tint_per_camera: Vec::new(),
            occlusion_probability: 0.3,
            eval_occlusion_probability: 0.5,
            occluder_size_range: [0.25, 0.5],
            occluder_width_range: [0.6, 1.0],
            noise_std: 0.03,
            split_fragments: false,
            seed: 0,
        }
    }
}

const MARGIN_Y: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_images_per_id < 2 {
            return bad(format!(
                "train_images_per_id = {} leaves no triplet positives; need at least 2",
                self.train_images_per_id
            ));
        }
        if self.num_train_ids < 2 || self.num_eval_ids == 0 {
            return bad("need at least 2 training identities and 1 evaluation identity".into());
        }
        if self.camera_count == 0 || self.eval_images_per_id <= self.camera_count {
            return bad(format!(
                "eval_images_per_id ({}) must exceed camera_count ({}) so every query has a gallery",
                self.eval_images_per_id, self.camera_count
            ));
        }
        if !self.tint_per_camera.is_empty() && self.tint_per_camera.len() != self.camera_count {
            return bad("tint_per_camera needs one entry per camera".into());
        }
        if self.num_parts == 0 || self.image_h < 2 * MARGIN_Y + 2 * self.num_parts || self.image_w < 8 {
            return bad(format!(
                "{}x{} image too small for {} parts",
                self.image_h, self.image_w, self.num_parts
            ));
        }
        if !self.band_fractions.is_empty() && self.band_fractions.len() != self.num_parts {
            return bad("band_fractions needs one entry per part".into());
        }
        for (name, p) in [
            ("occlusion_probability", self.occlusion_probability),
            ("eval_occlusion_probability", self.eval_occlusion_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        for r in [self.occluder_size_range, self.occluder_width_range] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return bad(format!("occluder range {r:?} must satisfy 0 < lo ≤ hi ≤ 1"));
            }
        }
        Ok(())
    }

    pub fn num_fragments(&self) -> usize {
        if self.split_fragments {
            2 * self.num_parts
        } else {
            self.num_parts
        }
    }

    /// Part config matching this generator's fragment layout.
    pub fn part_config(&self, preset: ThetaPreset) -> Result<PartConfig> {
        let mut cfg = PartConfig::from_preset(self.num_parts, preset)?;
        if self.split_fragments {
            cfg.fragment_to_part = (0..self.num_parts).flat_map(|p| [p, p]).collect();
        }
        Ok(cfg)
    }

    fn fractions(&self) -> Vec<f32> {
        if !self.band_fractions.is_empty() {
            return self.band_fractions.clone();
        }
        if self.num_parts == 5 {
            return vec![0.14, 0.24, 0.2, 0.26, 0.16];
        }
        vec![1.0; self.num_parts]
    }

    pub fn tint(&self, camera: usize) -> [f32; 3] {
        if let Some(t) = self.tint_per_camera.get(camera) {
            return *t;
        }
        let phase = std::f32::consts::TAU * camera as f32 / self.camera_count as f32;
        std::array::from_fn(|k| 1.0 + 0.15 * (phase + k as f32 * std::f32::consts::TAU / 3.0).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in [0, 1], quantized to 8-bit levels.
    pub image: Tensor,
    pub identity: usize,
    pub camera: usize,
    /// `[F, H, W]` pixel-grid confidence maps.
    pub fragments: Tensor,
    pub occluders: Vec<PixelRect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    pub query_occluded: Vec<Sample>,
    pub gallery_occluded: Vec<Sample>,
}

pub const SPLITS: [&str; 5] = ["train", "query", "gallery", "query_occluded", "gallery_occluded"];

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        Ok(match name {
            "train" => &self.train,
            "query" => &self.query,
            "gallery" => &self.gallery,
            "query_occluded" => &self.query_occluded,
            "gallery_occluded" => &self.gallery_occluded,
            other => return Err(Error::Config(format!("unknown split `{other}`"))),
        })
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tag, a, b)`.
fn stream(seed: u64, tag: u64, a: usize, b: usize) -> ChaCha8Rng {
    let s = mix(mix(mix(seed ^ 0x5eed).wrapping_add(tag)).wrapping_add(a as u64)).wrapping_add(b as u64);
    ChaCha8Rng::seed_from_u64(mix(s))
}

const TAG_LOOK: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_OCCLUDER: u64 = 4;
const TAG_NOISE: u64 = 5;

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Solid,
    HStripes,
    VStripes,
    Checker,
}

#[derive(Clone, Copy, Debug)]
struct PartLook {
    base: [f32; 3],
    accent: [f32; 3],
    pattern: Pattern,
}

fn identity_look(spec: &SynthSpec, identity: usize) -> Vec<PartLook> {
    let mut rng = stream(spec.seed, TAG_LOOK, identity, 0);
    (0..spec.num_parts)
        .map(|_| {
            let base = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
            let accent = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
            let pattern = match rng.gen_range(0..4) {
                0 => Pattern::Solid,
                1 => Pattern::HStripes,
                2 => Pattern::VStripes,
                _ => Pattern::Checker,
            };
            PartLook { base, accent, pattern }
        })
        .collect()
}

/// Band boxes `(row0, row1, col0, col1)`, half-open, one per part.
fn layout(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<[usize; 4]> {
    let j = spec.jitter as isize;
    let dy = rng.gen_range(-j..=j);
    let dx = rng.gen_range(-j..=j);
    let shift = |v: usize, d: isize, hi: usize| (v as isize + d).clamp(0, hi as isize) as usize;
    let top = shift(MARGIN_Y, dy, spec.image_h);
    let bottom = shift(spec.image_h - MARGIN_Y, dy, spec.image_h);
    let margin_x = spec.image_w / 8;
    let left = shift(margin_x, dx, spec.image_w);
    let right = shift(spec.image_w - margin_x, dx, spec.image_w);
    let fr = spec.fractions();
    let total: f32 = fr.iter().sum();
    let height = (bottom - top) as f32;
    let mut edges = vec![top];
    let mut acc = 0.0;
    for f in &fr[..fr.len() - 1] {
        acc += f / total;
        let e = top + (acc * height).round() as usize;
        let e = (e as isize + rng.gen_range(-1..=1)) as usize;
        edges.push(e.clamp(edges.last().unwrap() + 1, bottom - 1));
    }
    edges.push(bottom);
    edges
        .windows(2)
        .map(|w| [w[0], w[1], left, right])
        .collect()
}

fn draw_occluder(spec: &SynthSpec, rng: &mut impl Rng) -> PixelRect {
    let (h_img, w_img) = (spec.image_h as f32, spec.image_w as f32);
    let h = ((rng.gen_range(spec.occluder_size_range[0]..=spec.occluder_size_range[1]) * h_img).round() as usize)
        .clamp(1, spec.image_h);
    let w = ((rng.gen_range(spec.occluder_width_range[0]..=spec.occluder_width_range[1]) * w_img).round() as usize)
        .clamp(1, spec.image_w);
    PixelRect {
        y: rng.gen_range(0..=spec.image_h - h),
        x: rng.gen_range(0..=spec.image_w - w),
        h,
        w,
    }
}

/// Fragment boxes for a part band.
fn fragment_boxes(spec: &SynthSpec, band: [usize; 4]) -> Vec<[usize; 4]> {
    let [r0, r1, c0, c1] = band;
    if spec.split_fragments {
        let mid = (c0 + c1) / 2;
        vec![[r0, r1, c0, mid], [r0, r1, mid, c1]]
    } else {
        vec![band]
    }
}

/// Gaussian blob truncated to `bx`, zeroed under occluders and scaled so its
/// peak equals the uncovered fraction of the box.
fn fragment_map(spec: &SynthSpec, bx: [usize; 4], occluders: &[PixelRect]) -> Vec<f32> {
    let (h, w) = (spec.image_h, spec.image_w);
    let [r0, r1, c0, c1] = bx;
    let mut map = vec![0.0f32; h * w];
    if r1 <= r0 || c1 <= c0 {
        return map;
    }
    let cy = (r0 + r1 - 1) as f32 / 2.0;
    let cx = (c0 + c1 - 1) as f32 / 2.0;
    let sy = ((r1 - r0) as f32 / 4.0).max(0.5);
    let sx = ((c1 - c0) as f32 / 4.0).max(0.5);
    let mut covered = 0usize;
    for y in r0..r1 {
        for x in c0..c1 {
            if occluders.iter().any(|o| o.contains(y, x)) {
                covered += 1;
                continue;
            }
            let (u, v) = ((y as f32 - cy) / sy, (x as f32 - cx) / sx);
            map[y * w + x] = (-(u * u + v * v) / 2.0).exp();
        }
    }
    let confidence = 1.0 - covered as f32 / ((r1 - r0) * (c1 - c0)) as f32;
    let peak = map.iter().copied().fold(0.0, f32::max);
    if peak > 0.0 {
        map.iter_mut().for_each(|m| *m *= confidence / peak);
    }
    map
}

/// Renders one sample. `base_seed` drives layout jitter and noise.
pub fn render(
    spec: &SynthSpec,
    identity: usize,
    camera: usize,
    base: &mut ChaCha8Rng,
    noise: &mut ChaCha8Rng,
    occluders: Vec<PixelRect>,
) -> Sample {
    let (h, w) = (spec.image_h, spec.image_w);
    let look = identity_look(spec, identity);
    let bands = layout(spec, base);
    let bg: f32 = base.gen_range(0.15..0.45);
    let mut img = vec![0.0f32; 3 * h * w];
    let set = |img: &mut Vec<f32>, y: usize, x: usize, rgb: [f32; 3]| {
        for c in 0..3 {
            img[(c * h + y) * w + x] = rgb[c];
        }
    };
    for y in 0..h {
        for x in 0..w {
            set(&mut img, y, x, [bg; 3]);
        }
    }
    for (p, &[r0, r1, c0, c1]) in bands.iter().enumerate() {
        let lk = look[p];
        for y in r0..r1 {
            for x in c0..c1 {
                let (ly, lx) = (y - r0, x - c0);
                let accent = match lk.pattern {
                    Pattern::Solid => false,
                    Pattern::HStripes => (ly / 2) % 2 == 1,
                    Pattern::VStripes => (lx / 2) % 2 == 1,
                    Pattern::Checker => (ly / 3 + lx / 3) % 2 == 1,
                };
                set(&mut img, y, x, if accent { lk.accent } else { lk.base });
            }
        }
    }
    for o in &occluders {
        // texture draws come from the occluder's own geometry, not a stream
        let mut orng = ChaCha8Rng::seed_from_u64(mix((o.y * 131 + o.x * 17 + o.h * 7 + o.w) as u64 ^ spec.seed));
        let a: [f32; 3] = std::array::from_fn(|_| orng.gen_range(0.0..1.0));
        let b: [f32; 3] = std::array::from_fn(|_| orng.gen_range(0.0..1.0));
        let checker = orng.gen_bool(0.5);
        for y in o.y..o.y + o.h {
            for x in o.x..o.x + o.w {
                let on = if checker {
                    ((y - o.y) / 4 + (x - o.x) / 4) % 2 == 0
                } else {
                    ((x - o.x) / 3) % 2 == 0
                };
                set(&mut img, y, x, if on { a } else { b });
            }
        }
    }
    let tint = spec.tint(camera);
    let gauss = Normal::new(0.0f32, spec.noise_std.max(0.0)).expect("finite deviation");
    for c in 0..3 {
        for v in &mut img[c * h * w..(c + 1) * h * w] {
            let n = if spec.noise_std > 0.0 { gauss.sample(noise) } else { 0.0 };
            *v = (*v * tint[c] + n).clamp(0.0, 1.0);
        }
    }
    let mut image = Tensor::new(&[3, h, w], img).expect("sized above");
    quantize(&mut image);

    let mut frag = Vec::with_capacity(spec.num_fragments() * h * w);
    for band in &bands {
        for bx in fragment_boxes(spec, *band) {
            frag.extend(fragment_map(spec, bx, &occluders));
        }
    }
    Sample {
        image,
        identity,
        camera,
        fragments: Tensor::new(&[spec.num_fragments(), h, w], frag).expect("sized above"),
        occluders,
    }
}

fn make_sample(spec: &SynthSpec, tag: u64, identity: usize, index: usize, occlusion: f32) -> Sample {
    let mut base = stream(spec.seed, tag, identity, index);
    let mut noise = stream(spec.seed, tag + TAG_NOISE * 16, identity, index);
    let mut occ = stream(spec.seed, tag + TAG_OCCLUDER * 16, identity, index);
    let occluders = if occ.gen::<f32>() < occlusion {
        vec![draw_occluder(spec, &mut occ)]
    } else {
        Vec::new()
    };
    render(spec, identity, index % spec.camera_count, &mut base, &mut noise, occluders)
}

/// Generates all splits. Training identities are `0..num_train_ids` and double
/// as class labels; evaluation identities follow them. For each evaluation
/// identity the first image of every camera is a query and the rest form the
/// gallery.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train = Vec::new();
    for id in 0..spec.num_train_ids {
        for k in 0..spec.train_images_per_id {
            train.push(make_sample(spec, TAG_TRAIN, id, k, spec.occlusion_probability));
        }
    }
    let (mut query, mut gallery, mut query_occ, mut gallery_occ) = (vec![], vec![], vec![], vec![]);
    for e in 0..spec.num_eval_ids {
        let id = spec.num_train_ids + e;
        for k in 0..spec.eval_images_per_id {
            let clean = make_sample(spec, TAG_EVAL, id, k, 0.0);
            let occluded = make_sample(spec, TAG_EVAL, id, k, spec.eval_occlusion_probability);
            if k < spec.camera_count {
                query.push(clean);
                query_occ.push(occluded);
            } else {
                gallery.push(clean);
                gallery_occ.push(occluded);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        query,
        gallery,
        query_occluded: query_occ,
        gallery_occluded: gallery_occ,
    })
}

/// Explicit augmentation operations, applied in the order flip → shift →
/// grayscale → erase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentOps {
    pub flip: bool,
    /// Translation `(dy, dx)` in pixels; vacated pixels are zero padding.
    pub shift: (isize, isize),
    pub grayscale: bool,
    /// Rectangle and its replacement values `[3, h, w]`.
    pub erase: Option<(PixelRect, Tensor)>,
}

/// Random augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_probability: f32,
    /// Maximum crop/pad displacement in pixels.
    pub pad: usize,
    pub grayscale_probability: f32,
    pub erase_probability: f32,
    /// Erased area as a fraction of the image.
    pub erase_area: [f32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            pad: 4,
            grayscale_probability: 0.05,
            erase_probability: 0.3,
            erase_area: [0.02, 0.15],
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_probability: 0.0,
            pad: 0,
            grayscale_probability: 0.0,
            erase_probability: 0.0,
            erase_area: [0.02, 0.15],
        }
    }

    pub fn sample_ops(&self, h: usize, w: usize, rng: &mut impl Rng) -> AugmentOps {
        let flip = rng.gen::<f32>() < self.flip_probability;
        let p = self.pad as isize;
        let shift = (rng.gen_range(-p..=p), rng.gen_range(-p..=p));
        let grayscale = rng.gen::<f32>() < self.grayscale_probability;
        let erase = (rng.gen::<f32>() < self.erase_probability).then(|| {
            let area = rng.gen_range(self.erase_area[0]..=self.erase_area[1]) * (h * w) as f32;
            let aspect: f32 = rng.gen_range(0.3f32.ln()..=3.3f32.ln()).exp();
            let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
            let rect = PixelRect {
                y: rng.gen_range(0..=h - eh),
                x: rng.gen_range(0..=w - ew),
                h: eh,
                w: ew,
            };
            let fill = Tensor::from_fn(&[3, eh, ew], |_| rng.gen_range(0.0..1.0));
            (rect, fill)
        });
        AugmentOps {
            flip,
            shift,
            grayscale,
            erase,
        }
    }
}

/// An augmented view: image and pixel fragments stay registered; the erased
/// rectangle is forwarded so ground truth can be zeroed there.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: Tensor,
    pub fragments: Tensor,
    pub erase: Option<PixelRect>,
    pub identity: usize,
    pub camera: usize,
}

fn flip_planes(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[2];
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        for (x, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - x];
        }
    }
    out
}

fn shift_planes(t: &Tensor, dy: isize, dx: isize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let mut out = Tensor::zeros(s);
    for k in 0..c {
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if sx < 0 || sx >= w {
                    continue;
                }
                out.data_mut()[((k as isize * h + y) * w + x) as usize] =
                    t.data()[((k as isize * h + sy) * w + sx) as usize];
            }
        }
    }
    out
}

pub fn augment(sample: &Sample, ops: &AugmentOps) -> AugmentedSample {
    let (mut image, mut fragments) = (sample.image.clone(), sample.fragments.clone());
    if ops.flip {
        image = flip_planes(&image);
        fragments = flip_planes(&fragments);
    }
    if ops.shift != (0, 0) {
        image = shift_planes(&image, ops.shift.0, ops.shift.1);
        fragments = shift_planes(&fragments, ops.shift.0, ops.shift.1);
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if ops.grayscale {
        let d = image.data().to_vec();
        for i in 0..h * w {
            let l = 0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i];
            for c in 0..3 {
                image.data_mut()[c * h * w + i] = l;
            }
        }
    }
    let mut erase = None;
    if let Some((r, fill)) = &ops.erase {
        let r = PixelRect {
            h: r.h.min(h.saturating_sub(r.y)),
            w: r.w.min(w.saturating_sub(r.x)),
            ..*r
        };
        for c in 0..3 {
            for y in 0..r.h {
                for x in 0..r.w {
                    image.data_mut()[(c * h + r.y + y) * w + r.x + x] = fill.at(&[c, y, x]);
                }
            }
        }
        erase = Some(r);
    }
    AugmentedSample {
        image,
        fragments,
        erase,
        identity: sample.identity,
        camera: sample.camera,
    }
}

/// `[F, H, W]` pixel maps → `[F, N_h, N_w]` patch-grid maps.
pub fn grid_fragments(fragments: &Tensor, patch: usize, stride: usize) -> Result<Tensor> {
    let s = fragments.shape();
    let mut maps = Vec::with_capacity(s[0]);
    for f in 0..s[0] {
        maps.push(downsample_to_grid(&fragments.index_leading(f)?, patch, stride)?);
    }
    Tensor::stack(&maps)
}

/// Patch-grid cells covered by an erased pixel rectangle.
pub fn erase_cells(erase: Option<PixelRect>, patch: usize, stride: usize, grid: (usize, usize)) -> Vec<GridRect> {
    erase
        .and_then(|r| GridRect::from_pixels((r.y, r.x, r.h, r.w), patch, stride, grid))
        .into_iter()
        .collect()
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Writes one split as PNGs, fragment containers and `<name>.tsv`.
pub fn write_split(dir: &Path, name: &str, samples: &[Sample]) -> Result<PathBuf> {
    let split_dir = dir.join(name);
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    let mut manifest = String::from("image_path\tidentity\tcamera\tfragments_path\trects\n");
    for (k, s) in samples.iter().enumerate() {
        let img = split_dir.join(format!("{k:05}.png"));
        let frag = split_dir.join(format!("{k:05}.frag"));
        save_rgb_png(&img, &s.image)?;
        let mut file = TensorFile::default();
        file.meta.insert("identity".into(), s.identity.into());
        file.push("fragments", s.fragments.clone());
        file.save(&frag)?;
        let rects = if s.occluders.is_empty() {
            "-".to_string()
        } else {
            s.occluders
                .iter()
                .map(|r| format!("{},{},{},{}", r.y, r.x, r.h, r.w))
                .collect::<Vec<_>>()
                .join(";")
        };
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            rel(&img, dir),
            s.identity,
            s.camera,
            rel(&frag, dir),
            rects
        ));
    }
    let path = dir.join(format!("{name}.tsv"));
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec_path = dir.join("spec.json");
    let spec = serde_json::to_string_pretty(&data.spec).expect("spec serializes");
    fs::write(&spec_path, spec).map_err(|e| Error::io(&spec_path, e))?;
    for name in SPLITS {
        write_split(dir, name, data.split(name)?)?;
    }
    Ok(())
}

/// Reads samples listed in a manifest; paths resolve relative to `dir`.
pub fn load_external(dir: &Path, manifest: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let malformed = |line: usize, why: &str| Error::Container {
        path: manifest.to_path_buf(),
        reason: format!("line {line}: {why}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(malformed(n + 1, "expected 5 tab-separated columns"));
        }
        let identity = cols[1].parse().map_err(|_| malformed(n + 1, "bad identity"))?;
        let camera = cols[2].parse().map_err(|_| malformed(n + 1, "bad camera"))?;
        let image = load_rgb_png(&dir.join(cols[0]))?;
        let frag_path = dir.join(cols[3]);
        let fragments = TensorFile::load(&frag_path)?
            .get("fragments")
            .cloned()
            .ok_or_else(|| Error::Container {
                path: frag_path.clone(),
                reason: "no `fragments` tensor".into(),
            })?;
        if fragments.rank() != 3 || fragments.shape()[1..] != image.shape()[1..] {
            return Err(Error::Container {
                path: frag_path,
                reason: format!(
                    "fragment shape {:?} does not match image {:?}",
                    fragments.shape(),
                    image.shape()
                ),
            });
        }
        let occluders = if cols[4] == "-" {
            Vec::new()
        } else {
            cols[4]
                .split(';')
                .map(|r| PixelRect::parse(r).ok_or_else(|| malformed(n + 1, "bad rectangle")))
                .collect::<Result<_>>()?
        };
        out.push(Sample {
            image,
            identity,
            camera,
            fragments,
            occluders,
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join("spec.json");
    let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Container {
        path: spec_path.clone(),
        reason: e.to_string(),
    })?;
    let load = |name: &str| load_external(dir, &dir.join(format!("{name}.tsv")));
    Ok(Dataset {
        spec,
        train: load("train")?,
        query: load("query")?,
        gallery: load("gallery")?,
        query_occluded: load("query_occluded")?,
        gallery_occluded: load("gallery_occluded")?,
    })
}
