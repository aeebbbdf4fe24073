//! Visibility-weighted retrieval distance and mAP / CMC evaluation.
//!
//! Distance between samples `a` and `b`:
//!
//! ```text
//! d(a, b) = d_cls + Σ_p d_p · v_p^a · v_p^b / Σ_p v_p^a · v_p^b
//! ```
//!
//! where every base distance is Euclidean between L2-normalized features. When
//! no part is co-visible (denominator below `1e-6`) only `d_cls` is used.
//!
//! Ranking is ascending by distance with ties broken by gallery index.
//! Gallery entries sharing both identity and camera with the query are
//! skipped, and queries left without any positive are excluded from every
//! metric and counted in [`EvalReport::skipped_queries`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutput;

/// Indexed features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub cls_feature: Vec<f32>,
    /// One vector per part.
    pub part_features: Vec<Vec<f32>>,
    pub visibility: Vec<f32>,
    pub identity: usize,
    pub camera: usize,
}

impl GalleryEntry {
    pub fn from_output(out: &ModelOutput, identity: usize, camera: usize) -> Self {
        let d = out.cls_feature.numel();
        Self {
            cls_feature: out.cls_feature.data().to_vec(),
            part_features: out.part_features.data().chunks(d).map(<[f32]>::to_vec).collect(),
            visibility: out.visibility.data().to_vec(),
            identity,
            camera,
        }
    }

    pub fn num_parts(&self) -> usize {
        self.part_features.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityMode {
    /// Predicted scores used as weights.
    AsIs,
    /// Every score treated as 1.
    Off,
    /// Scores at or above the threshold become 1, the rest 0.
    Round { threshold: f32 },
}

impl VisibilityMode {
    pub const ROUND: Self = Self::Round { threshold: 0.5 };

    pub fn name(self) -> &'static str {
        match self {
            Self::AsIs => "as-is",
            Self::Off => "off",
            Self::Round { .. } => "round",
        }
    }

    fn weight(self, v: f32) -> f64 {
        match self {
            Self::AsIs => v as f64,
            Self::Off => 1.0,
            Self::Round { threshold } => {
                if v >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub const DEGENERATE_DENOMINATOR: f64 = 1e-6;

/// Euclidean distance between `a/|a|` and `b/|b|`.
pub fn normalized_euclidean(a: &[f32], b: &[f32]) -> f64 {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    let (na, nb) = (norm(a), norm(b));
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn pair_distance(a: &GalleryEntry, b: &GalleryEntry, mode: VisibilityMode) -> f64 {
    debug_assert_eq!(a.num_parts(), b.num_parts());
    let d_cls = normalized_euclidean(&a.cls_feature, &b.cls_feature);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for p in 0..a.num_parts() {
        let w = mode.weight(a.visibility[p]) * mode.weight(b.visibility[p]);
        if w == 0.0 {
            continue;
        }
        num += w * normalized_euclidean(&a.part_features[p], &b.part_features[p]);
        den += w;
    }
    if den < DEGENERATE_DENOMINATOR {
        d_cls
    } else {
        d_cls + num / den
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// `cmc[k - 1]` is Rank-k.
    pub cmc: Vec<f64>,
    /// `None` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Identity and camera of one query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Label {
    pub identity: usize,
    pub camera: usize,
}

impl From<&GalleryEntry> for Label {
    fn from(e: &GalleryEntry) -> Self {
        Self {
            identity: e.identity,
            camera: e.camera,
        }
    }
}

pub fn distance_matrix(queries: &[GalleryEntry], gallery: &[GalleryEntry], mode: VisibilityMode) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| gallery.iter().map(|g| pair_distance(q, g, mode)).collect())
        .collect()
}

/// Metrics from a precomputed `[Q][G]` distance matrix, CMC up to `k`.
pub fn evaluate_distances(dist: &[Vec<f64>], queries: &[Label], gallery: &[Label], k: usize) -> Result<EvalReport> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Config("evaluation needs nonempty query and gallery sets".into()));
    }
    let mut hits = vec![0usize; k];
    let mut per_query_ap = Vec::with_capacity(queries.len());
    let (mut ap_sum, mut evaluated) = (0.0, 0usize);
    for (qi, q) in queries.iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery[g].identity == q.identity && gallery[g].camera == q.camera))
            .collect();
        order.sort_by(|&x, &y| dist[qi][x].total_cmp(&dist[qi][y]).then(x.cmp(&y)));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (rank, &g) in order.iter().enumerate() {
            if gallery[g].identity == q.identity {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
                first.get_or_insert(rank);
            }
        }
        let Some(first) = first else {
            per_query_ap.push(None);
            continue;
        };
        let ap = precision_sum / found as f64;
        per_query_ap.push(Some(ap));
        ap_sum += ap;
        evaluated += 1;
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    let n = evaluated.max(1) as f64;
    Ok(EvalReport {
        map: ap_sum / n,
        cmc: hits.iter().map(|&h| h as f64 / n).collect(),
        per_query_ap,
        skipped_queries: queries.len() - evaluated,
    })
}

pub fn evaluate(queries: &[GalleryEntry], gallery: &[GalleryEntry], mode: VisibilityMode, k: usize) -> Result<EvalReport> {
    let dist = distance_matrix(queries, gallery, mode);
    let ql: Vec<Label> = queries.iter().map(Label::from).collect();
    let gl: Vec<Label> = gallery.iter().map(Label::from).collect();
    evaluate_distances(&dist, &ql, &gl, k)
}

/// Reports for the as-is, off and round (at 0.5) modes, in that order.
pub fn ablate_visibility(
    queries: &[GalleryEntry],
    gallery: &[GalleryEntry],
    k: usize,
) -> Result<Vec<(VisibilityMode, EvalReport)>> {
    [VisibilityMode::AsIs, VisibilityMode::Off, VisibilityMode::ROUND]
        .into_iter()
        .map(|m| Ok((m, evaluate(queries, gallery, m, k)?)))
        .collect()
}

#[cfg(test)]
mod tests;
