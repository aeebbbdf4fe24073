//! Ground-truth part heatmaps and visibility pseudo-labels built from
//! fragment (keypoint / joint) confidence maps.
//!
//! Pipeline for one sample, in fixed order:
//!
//! 1. `combine_fragments`: per part, elementwise max over the fragments whose
//!    peak confidence reaches the part threshold θ_p; weaker fragments are noise.
//! 2. `apply_erasure`: zero the cells hidden by random-erasing augmentation.
//! 3. `binarize_normalize`: every nonzero cell becomes `1/K`, then the row is
//!    divided by its sum.
//!
//! Visibility labels come from the fragment peaks before erasure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Body-part grouping strategies by part count.
pub fn grouping(num_parts: usize) -> Result<&'static [&'static str]> {
    Ok(match num_parts {
        3 => &["Head", "Upper", "Lower"],
        4 => &["Head", "Upper", "Legs", "Feet"],
        5 => &["Head", "Torso", "Arms", "Legs", "Feet"],
        6 => &["Head", "Upper torso", "Lower torso", "Arms", "Legs", "Feet"],
        p => return Err(Error::Config(format!("no grouping defined for {p} parts"))),
    })
}

/// Per-dataset threshold tables for {Head, Torso, Arms, Legs, Feet}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaPreset {
    Market1501,
    DukeReid,
    OccludedDuke,
}

impl ThetaPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "market1501" | "market-1501" | "market" => Ok(Self::Market1501),
            "duke" | "duke-reid" | "dukemtmc-reid" => Ok(Self::DukeReid),
            "occ-duke" | "occluded-duke" => Ok(Self::OccludedDuke),
            other => Err(Error::Config(format!("unknown theta preset `{other}`"))),
        }
    }

    /// Thresholds in the order Head, Torso, Arms, Legs, Feet.
    pub fn base(self) -> [f32; 5] {
        match self {
            Self::Market1501 => [0.6, 0.7, 0.85, 0.8, 0.7],
            Self::DukeReid | Self::OccludedDuke => [0.6, 0.8, 0.85, 0.85, 0.75],
        }
    }

    /// Threshold for a named part. Coarser or finer groupings borrow the value
    /// of the five-part group they overlap most: torso halves and "Upper" use
    /// Torso, "Lower" uses Legs.
    pub fn theta_for(self, part: &str) -> Result<f32> {
        let [head, torso, arms, legs, feet] = self.base();
        Ok(match part {
            "Head" => head,
            "Torso" | "Upper torso" | "Lower torso" | "Upper" => torso,
            "Arms" => arms,
            "Legs" | "Lower" => legs,
            "Feet" => feet,
            other => return Err(Error::Config(format!("no threshold for part `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartConfig {
    pub part_names: Vec<String>,
    /// `fragment_to_part[f]` is the part that fragment `f` belongs to.
    pub fragment_to_part: Vec<usize>,
    /// Per-part confidence threshold θ_p.
    pub theta: Vec<f32>,
    /// When set, a part whose whole support is erased is also labelled invisible.
    #[serde(default)]
    pub visibility_after_erasure: bool,
}

impl PartConfig {
    /// One fragment per part with the thresholds of `preset`.
    pub fn from_preset(num_parts: usize, preset: ThetaPreset) -> Result<Self> {
        let names = grouping(num_parts)?;
        let theta = names
            .iter()
            .map(|n| preset.theta_for(n))
            .collect::<Result<_>>()?;
        Ok(Self {
            part_names: names.iter().map(|s| s.to_string()).collect(),
            fragment_to_part: (0..num_parts).collect(),
            theta,
            visibility_after_erasure: false,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn num_fragments(&self) -> usize {
        self.fragment_to_part.len()
    }

    /// Fragments belonging to `part`, in index order.
    pub fn fragments_of(&self, part: usize) -> impl Iterator<Item = usize> + '_ {
        self.fragment_to_part
            .iter()
            .enumerate()
            .filter(move |(_, &p)| p == part)
            .map(|(f, _)| f)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.num_parts();
        if p == 0 {
            return Err(Error::Config("part config has no parts".into()));
        }
        if self.theta.len() != p {
            return Err(Error::Config(format!(
                "{} thresholds given for {p} parts",
                self.theta.len()
            )));
        }
        if let Some(t) = self.theta.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
        }
        if let Some(&bad) = self.fragment_to_part.iter().find(|&&q| q >= p) {
            return Err(Error::Config(format!("fragment mapped to missing part {bad}")));
        }
        for part in 0..p {
            if self.fragments_of(part).next().is_none() {
                return Err(Error::Config(format!(
                    "part `{}` has no fragments",
                    self.part_names[part]
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned rectangle on the patch grid, in cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl GridRect {
    /// Grid cells whose patch window centre falls inside the pixel rectangle
    /// `[y, y+h) × [x, x+w)`.
    pub fn from_pixels(
        (y, x, h, w): (usize, usize, usize, usize),
        patch: usize,
        stride: usize,
        grid: (usize, usize),
    ) -> Option<Self> {
        let centre = |i: usize| 2 * i * stride + patch; // doubled to stay integral
        let cells = |lo: usize, len: usize, n: usize| {
            let inside: Vec<usize> = (0..n)
                .filter(|&i| centre(i) >= 2 * lo && centre(i) < 2 * (lo + len))
                .collect();
            Some((*inside.first()?, inside.len()))
        };
        let (row, height) = cells(y, h, grid.0)?;
        let (col, width) = cells(x, w, grid.1)?;
        Some(Self {
            row,
            col,
            height,
            width,
        })
    }
}

/// Ground truth for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PartGroundTruth {
    /// `[P, N]`: each row is all zero or uniform over its support.
    pub heatmaps: Tensor,
    /// `[P]` in {0, 1}.
    pub visibility: Tensor,
}

fn check_fragments(frags: &Tensor, cfg: &PartConfig) -> Result<(usize, usize)> {
    let s = frags.shape();
    if s.len() != 3 || s[0] != cfg.num_fragments() {
        return Err(Error::shape(
            "fragment heatmaps",
            s,
            &[cfg.num_fragments(), 0, 0],
        ));
    }
    Ok((s[1], s[2]))
}

fn peak(values: &[f32]) -> f32 {
    values.iter().copied().fold(0.0, f32::max)
}

/// `[F, Nh, Nw]` fragment maps → `[P, Nh, Nw]` part maps.
pub fn combine_fragments(frags: &Tensor, cfg: &PartConfig) -> Result<Tensor> {
    let (nh, nw) = check_fragments(frags, cfg)?;
    let cells = nh * nw;
    let mut out = Tensor::zeros(&[cfg.num_parts(), nh, nw]);
    for (f, &part) in cfg.fragment_to_part.iter().enumerate() {
        let src = &frags.data()[f * cells..(f + 1) * cells];
        if peak(src) < cfg.theta[part] {
            continue;
        }
        let dst = &mut out.data_mut()[part * cells..(part + 1) * cells];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = d.max(s);
        }
    }
    Ok(out)
}

/// Zeros every cell covered by any rectangle (clipped to the grid).
pub fn apply_erasure(part_maps: &Tensor, rects: &[GridRect]) -> Tensor {
    let mut out = part_maps.clone();
    let s = part_maps.shape();
    let (parts, nh, nw) = (s[0], s[1], s[2]);
    for r in rects {
        for p in 0..parts {
            for i in r.row..(r.row + r.height).min(nh) {
                for j in r.col..(r.col + r.width).min(nw) {
                    out.data_mut()[(p * nh + i) * nw + j] = 0.0;
                }
            }
        }
    }
    out
}

/// `[P, Nh, Nw]` (or `[P, N]`) → `[P, N]` rows uniform over their support.
pub fn binarize_normalize(part_maps: &Tensor) -> Tensor {
    let parts = part_maps.shape()[0];
    let n = part_maps.numel() / parts.max(1);
    let mut out = vec![0.0f32; parts * n];
    for (src, dst) in part_maps.data().chunks(n).zip(out.chunks_mut(n)) {
        let k = src.iter().filter(|&&v| v > 0.0).count();
        if k == 0 {
            continue;
        }
        let level = 1.0 / k as f32;
        for (d, &s) in dst.iter_mut().zip(src) {
            if s > 0.0 {
                *d = level;
            }
        }
        let sum: f32 = dst.iter().sum();
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    Tensor::new(&[parts, n], out).expect("shape matches construction")
}

/// Part `p` is visible iff the peak over its fragments is at least θ_p.
pub fn visibility_label(frags: &Tensor, cfg: &PartConfig) -> Result<Tensor> {
    let (nh, nw) = check_fragments(frags, cfg)?;
    let cells = nh * nw;
    let mut peaks = vec![0.0f32; cfg.num_parts()];
    for (f, &part) in cfg.fragment_to_part.iter().enumerate() {
        peaks[part] = peaks[part].max(peak(&frags.data()[f * cells..(f + 1) * cells]));
    }
    let labels = peaks
        .iter()
        .zip(&cfg.theta)
        .map(|(&m, &t)| if m >= t { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[cfg.num_parts()], labels)
}

pub fn build_ground_truth(
    frags: &Tensor,
    cfg: &PartConfig,
    erase: &[GridRect],
) -> Result<PartGroundTruth> {
    let combined = combine_fragments(frags, cfg)?;
    let erased = apply_erasure(&combined, erase);
    let heatmaps = binarize_normalize(&erased);
    let mut visibility = visibility_label(frags, cfg)?;
    if cfg.visibility_after_erasure {
        let n = heatmaps.shape()[1];
        for (p, v) in visibility.data_mut().iter_mut().enumerate() {
            if heatmaps.data()[p * n..(p + 1) * n].iter().all(|&x| x == 0.0) {
                *v = 0.0;
            }
        }
    }
    Ok(PartGroundTruth {
        heatmaps,
        visibility,
    })
}

/// Resamples a pixel-grid confidence map onto the patch grid by averaging
/// each patch window, then rescales so the peak confidence is preserved.
pub fn downsample_to_grid(pixels: &Tensor, patch: usize, stride: usize) -> Result<Tensor> {
    let s = pixels.shape();
    if s.len() != 2 || s[0] < patch || s[1] < patch || stride == 0 {
        return Err(Error::shape("downsample_to_grid", s, &[patch, stride]));
    }
    let (h, w) = (s[0], s[1]);
    let (nh, nw) = ((h - patch) / stride + 1, (w - patch) / stride + 1);
    let mut out = Tensor::zeros(&[nh, nw]);
    let area = (patch * patch) as f32;
    for i in 0..nh {
        for j in 0..nw {
            let mut acc = 0.0;
            for y in i * stride..i * stride + patch {
                for x in j * stride..j * stride + patch {
                    acc += pixels.data()[y * w + x];
                }
            }
            out.data_mut()[i * nw + j] = acc / area;
        }
    }
    let src_peak = peak(pixels.data());
    let dst_peak = peak(out.data());
    if dst_peak > 0.0 {
        for v in out.data_mut() {
            *v = *v * src_peak / dst_peak;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(theta: &[f32], fragment_to_part: &[usize]) -> PartConfig {
        PartConfig {
            part_names: (0..theta.len()).map(|i| format!("p{i}")).collect(),
            fragment_to_part: fragment_to_part.to_vec(),
            theta: theta.to_vec(),
            visibility_after_erasure: false,
        }
    }

    fn frag(peak_value: f32, cells: &[usize], nh: usize, nw: usize) -> Vec<f32> {
        let mut v = vec![0.0; nh * nw];
        for (i, &c) in cells.iter().enumerate() {
            v[c] = peak_value * (1.0 - 0.1 * i as f32);
        }
        v
    }

    #[test]
    fn strong_fragment_passes_through() {
        let f = Tensor::new(&[1, 2, 2], frag(0.9, &[0, 3], 2, 2)).unwrap();
        let out = combine_fragments(&f, &cfg(&[0.6], &[0])).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn weak_fragment_is_noise() {
        let f = Tensor::new(&[1, 2, 2], frag(0.5, &[0, 3], 2, 2)).unwrap();
        let out = combine_fragments(&f, &cfg(&[0.6], &[0])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_fragments_keep_only_strong_one() {
        let mut data = frag(0.9, &[0, 1], 2, 3);
        data.extend(frag(0.3, &[4, 5], 2, 3));
        let f = Tensor::new(&[2, 2, 3], data.clone()).unwrap();
        let out = combine_fragments(&f, &cfg(&[0.6], &[0, 0])).unwrap();
        // brute force: filter then max, cell by cell
        let expected: Vec<f32> = (0..6)
            .map(|c| {
                [0usize, 1]
                    .iter()
                    .filter(|&&fi| data[fi * 6..fi * 6 + 6].iter().cloned().fold(0.0, f32::max) >= 0.6)
                    .map(|&fi| data[fi * 6 + c])
                    .fold(0.0, f32::max)
            })
            .collect();
        assert_eq!(out.data(), &expected[..]);
        assert_eq!(out.data(), &data[..6]);
    }

    #[test]
    fn erasure_cases() {
        let maps = Tensor::from_fn(&[2, 3, 4], |i| (i % 5) as f32 * 0.2 + 0.1);
        assert_eq!(apply_erasure(&maps, &[]), maps);
        let all = GridRect {
            row: 0,
            col: 0,
            height: 3,
            width: 4,
        };
        assert!(apply_erasure(&maps, &[all]).data().iter().all(|&v| v == 0.0));

        // part 0 supported on rows 0..2 cols 1..3 only, part 1 elsewhere
        let mut data = vec![0.0; 24];
        for i in 0..2 {
            for j in 1..3 {
                data[i * 4 + j] = 0.8;
            }
        }
        for c in [2 * 4, 2 * 4 + 3] {
            data[12 + c] = 0.7;
        }
        let maps = Tensor::new(&[2, 3, 4], data.clone()).unwrap();
        let rect = GridRect {
            row: 0,
            col: 1,
            height: 2,
            width: 2,
        };
        let out = apply_erasure(&maps, &[rect]);
        assert!(out.data()[..12].iter().all(|&v| v == 0.0));
        assert_eq!(&out.data()[12..], &data[12..]);
    }

    #[test]
    fn binarize_examples() {
        let maps = Tensor::new(&[3, 4], vec![
            0.9, 0.1, 0.5, 2.0, //
            0.0, 0.0, 0.0, 0.0, //
            0.3, 0.0, 0.2, 0.7,
        ])
        .unwrap();
        let out = binarize_normalize(&maps);
        assert_eq!(&out.data()[..4], &[0.25; 4]);
        assert!(out.data()[4..8].iter().all(|&v| v == 0.0));
        for &v in &[out.data()[8], out.data()[10], out.data()[11]] {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(out.data()[9], 0.0);
    }

    #[test]
    fn visibility_threshold_is_inclusive() {
        let f = Tensor::new(&[2, 1, 2], vec![0.85, 0.1, 0.0, 0.0]).unwrap();
        let v = visibility_label(&f, &cfg(&[0.85, 0.3], &[0, 1])).unwrap();
        assert_eq!(v.data(), &[1.0, 0.0]);
    }

    #[test]
    fn market_thresholds_apply_per_part() {
        let c = PartConfig::from_preset(5, ThetaPreset::Market1501).unwrap();
        assert_eq!(c.part_names, ["Head", "Torso", "Arms", "Legs", "Feet"]);
        assert_eq!(c.theta, [0.6, 0.7, 0.85, 0.8, 0.7]);
        // peaks of 0.75 everywhere: visible where θ ≤ 0.75
        let f = Tensor::full(&[5, 2, 2], 0.75);
        let v = visibility_label(&f, &c).unwrap();
        assert_eq!(v.data(), &[1.0, 1.0, 0.0, 0.0, 1.0]);
        let duke = PartConfig::from_preset(5, ThetaPreset::DukeReid).unwrap();
        assert_eq!(duke.theta, [0.6, 0.8, 0.85, 0.85, 0.75]);
    }

    #[test]
    fn groupings_cover_three_to_six_parts() {
        for p in 3..=6 {
            let c = PartConfig::from_preset(p, ThetaPreset::OccludedDuke).unwrap();
            c.validate().unwrap();
            assert_eq!(c.num_parts(), p);
        }
        assert!(grouping(7).is_err());
    }

    #[test]
    fn validation_rejects_orphans_and_bad_thresholds() {
        assert!(cfg(&[0.5, 0.5], &[0, 0]).validate().is_err());
        assert!(cfg(&[1.0], &[0]).validate().is_err());
        assert!(cfg(&[0.5], &[1]).validate().is_err());
        assert!(cfg(&[0.5], &[0]).validate().is_ok());
    }

    #[test]
    fn clean_sample_gives_uniform_visible_rows() {
        let (nh, nw) = (4, 3);
        let mut data = Vec::new();
        for p in 0..2 {
            data.extend(frag(1.0, &[p * 6, p * 6 + 1, p * 6 + 4], nh, nw));
        }
        let f = Tensor::new(&[2, nh, nw], data).unwrap();
        let gt = build_ground_truth(&f, &cfg(&[0.7, 0.7], &[0, 1]), &[]).unwrap();
        assert_eq!(gt.visibility.data(), &[1.0, 1.0]);
        for row in gt.heatmaps.data().chunks(nh * nw) {
            let nz: Vec<f32> = row.iter().copied().filter(|&v| v > 0.0).collect();
            assert_eq!(nz.len(), 3);
            assert!(nz.iter().all(|&v| v == nz[0]));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn erased_part_keeps_its_label_unless_flagged() {
        let f = Tensor::new(&[2, 2, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let rect = GridRect {
            row: 0,
            col: 0,
            height: 1,
            width: 2,
        };
        let mut c = cfg(&[0.5, 0.5], &[0, 1]);
        let gt = build_ground_truth(&f, &c, &[rect]).unwrap();
        assert!(gt.heatmaps.data()[..4].iter().all(|&v| v == 0.0));
        assert_eq!(gt.visibility.data(), &[1.0, 1.0]);
        c.visibility_after_erasure = true;
        let gt = build_ground_truth(&f, &c, &[rect]).unwrap();
        assert_eq!(gt.visibility.data(), &[0.0, 1.0]);
    }

    #[test]
    fn five_part_grouping_yields_five_rows() {
        let c = PartConfig::from_preset(5, ThetaPreset::Market1501).unwrap();
        let f = Tensor::full(&[5, 3, 3], 0.9);
        let gt = build_ground_truth(&f, &c, &[]).unwrap();
        assert_eq!(gt.heatmaps.shape(), &[5, 9]);
    }

    #[test]
    fn downsample_preserves_peak() {
        let px = Tensor::from_fn(&[12, 8], |i| if i == 45 { 0.8 } else { 0.0 });
        let grid = downsample_to_grid(&px, 4, 2).unwrap();
        assert_eq!(grid.shape(), &[5, 3]);
        let peak = grid.data().iter().cloned().fold(0.0, f32::max);
        assert!((peak - 0.8).abs() < 1e-6);
    }

    #[test]
    fn pixel_rect_maps_to_cells_by_window_centre() {
        // patch 8, stride 4: centres at 4, 8, 12, ...
        let r = GridRect::from_pixels((6, 0, 8, 32), 8, 4, (15, 7)).unwrap();
        assert_eq!((r.row, r.height), (1, 2)); // centres 8 and 12
        assert_eq!((r.col, r.width), (0, 7));
        assert!(GridRect::from_pixels((0, 0, 1, 1), 8, 4, (15, 7)).is_none());
    }

    fn arb_maps() -> impl Strategy<Value = Tensor> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(p, h, w)| {
            prop::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..1.0], p * h * w)
                .prop_map(move |d| Tensor::new(&[p, h, w], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent_and_uniform(maps in arb_maps()) {
            let once = binarize_normalize(&maps);
            let twice = binarize_normalize(&once);
            prop_assert_eq!(&once, &twice);
            let n = once.shape()[1];
            for row in once.data().chunks(n) {
                let k = row.iter().filter(|&&v| v > 0.0).count();
                if k > 0 {
                    let max = row.iter().cloned().fold(0.0, f32::max);
                    prop_assert!((max * k as f32 - 1.0).abs() <= 1e-6);
                    prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn raising_theta_never_adds_visibility(
            peaks in prop::collection::vec(0.0f32..1.0, 3),
            theta in prop::collection::vec(0.05f32..0.9, 3),
            bump in 0.0f32..0.09,
        ) {
            let f = Tensor::from_fn(&[3, 1, 1], |i| peaks[i]);
            let low = cfg(&theta, &[0, 1, 2]);
            let high = cfg(&theta.iter().map(|t| t + bump).collect::<Vec<_>>(), &[0, 1, 2]);
            let vl = visibility_label(&f, &low).unwrap();
            let vh = visibility_label(&f, &high).unwrap();
            for (a, b) in vl.data().iter().zip(vh.data()) {
                prop_assert!(b <= a);
            }
        }

        #[test]
        fn erasure_commutes_with_combination_on_disjoint_supports(
            vals in prop::collection::vec(0.5f32..1.0, 4),
            row in 0usize..4, height in 1usize..4,
        ) {
            // fragment 0 lives in column 0, fragment 1 in column 2
            let (nh, nw) = (4, 3);
            let mut data = vec![0.0; 2 * nh * nw];
            for i in 0..nh {
                data[i * nw] = vals[i];
                data[nh * nw + i * nw + 2] = vals[3 - i];
            }
            let f = Tensor::new(&[2, nh, nw], data).unwrap();
            let c = cfg(&[0.3], &[0, 0]);
            let rect = GridRect { row, col: 0, height, width: 1 };
            let a = apply_erasure(&combine_fragments(&f, &c).unwrap(), &[rect]);
            let pre = apply_erasure(&f, &[rect]);
            let b = combine_fragments(&pre, &c).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
