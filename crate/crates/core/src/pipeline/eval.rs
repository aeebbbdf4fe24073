use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use crate::error::Result;
use crate::heatmap::{build_ground_truth, PartConfig};
use crate::model::{averaged_attention, ModelOutput, PoseTokenTransformer};
use crate::retrieval::{ablate_visibility, evaluate, EvalReport, GalleryEntry, VisibilityMode};
use crate::synth::{grid_fragments, Dataset, Sample};
use crate::tensor::Tensor;

/// Runs inference over `samples` in chunks.
pub fn infer_samples(model: &PoseTokenTransformer, samples: &[Sample], batch: usize) -> Result<Vec<ModelOutput>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let cameras: Vec<usize> = chunk.iter().map(|s| s.camera).collect();
        out.extend(model.infer(&Tensor::stack(&images)?, &cameras)?);
    }
    Ok(out)
}

pub fn entries(outputs: &[ModelOutput], samples: &[Sample]) -> Vec<GalleryEntry> {
    outputs
        .iter()
        .zip(samples)
        .map(|(o, s)| GalleryEntry::from_output(o, s.identity, s.camera))
        .collect()
}

/// Metrics written to the training log at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map: f64,
    pub rank1: f64,
    pub occluded_map: f64,
    pub occluded_rank1: f64,
}

pub fn evaluate_model(
    model: &PoseTokenTransformer,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    let run = |q: &[Sample], g: &[Sample]| -> Result<EvalReport> {
        let qe = entries(&infer_samples(model, q, cfg.batch_size)?, q);
        let ge = entries(&infer_samples(model, g, cfg.batch_size)?, g);
        evaluate(&qe, &ge, VisibilityMode::AsIs, cfg.cmc_k)
    };
    let clean = run(&data.query, &data.gallery)?;
    let occ = run(&data.query_occluded, &data.gallery_occluded)?;
    Ok(EvalSummary {
        map: clean.map,
        rank1: clean.rank1(),
        occluded_map: occ.map,
        occluded_rank1: occ.rank1(),
    })
}

/// How well the averaged cross-attention of each visible part lands on its
/// ground-truth support (the nonzero cells of its clean heatmap).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// Mean attention mass inside the support.
    pub mass_in_band: f64,
    /// Fraction of parts whose attention argmax lies in the support.
    pub argmax_in_band: f64,
    pub visible_parts: usize,
    /// Per-part mean mass, in part order.
    pub per_part_mass: Vec<f64>,
}

pub fn localization(
    outputs: &[ModelOutput],
    samples: &[Sample],
    model: &PoseTokenTransformer,
    parts: &PartConfig,
) -> Result<LocalizationReport> {
    let (patch, stride) = (model.config.patch_size, model.config.stride);
    let p = parts.num_parts();
    let (mut mass, mut hits, mut count) = (0.0, 0usize, 0usize);
    let (mut part_mass, mut part_count) = (vec![0.0; p], vec![0usize; p]);
    for (o, s) in outputs.iter().zip(samples) {
        let gt = build_ground_truth(&grid_fragments(&s.fragments, patch, stride)?, parts, &[])?;
        let attn = averaged_attention(&o.ca_attn)?;
        let n = attn.shape()[1];
        for q in 0..p {
            if gt.visibility.data()[q] == 0.0 {
                continue;
            }
            let row = &attn.data()[q * n..(q + 1) * n];
            let band = &gt.heatmaps.data()[q * n..(q + 1) * n];
            let m: f64 = row.iter().zip(band).filter(|(_, &b)| b > 0.0).map(|(&a, _)| a as f64).sum();
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &a)| if a > best.1 { (i, a) } else { best })
                .0;
            mass += m;
            part_mass[q] += m;
            part_count[q] += 1;
            hits += (band[argmax] > 0.0) as usize;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(LocalizationReport {
        mass_in_band: mass / c,
        argmax_in_band: hits as f64 / c,
        visible_parts: count,
        per_part_mass: part_mass
            .iter()
            .zip(&part_count)
            .map(|(m, &k)| m / k.max(1) as f64)
            .collect(),
    })
}

/// Agreement of thresholded visibility predictions with the pseudo-labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisibilityReport {
    pub accuracy: f64,
    pub parts: usize,
    pub occluded_parts: usize,
}

pub fn visibility_accuracy(
    outputs: &[ModelOutput],
    samples: &[Sample],
    model: &PoseTokenTransformer,
    parts: &PartConfig,
) -> Result<VisibilityReport> {
    let (patch, stride) = (model.config.patch_size, model.config.stride);
    let (mut right, mut total, mut occluded) = (0usize, 0usize, 0usize);
    for (o, s) in outputs.iter().zip(samples) {
        let gt = build_ground_truth(&grid_fragments(&s.fragments, patch, stride)?, parts, &[])?;
        for (&v, &label) in o.visibility.data().iter().zip(gt.visibility.data()) {
            right += ((v >= 0.5) == (label == 1.0)) as usize;
            occluded += (label == 0.0) as usize;
            total += 1;
        }
    }
    Ok(VisibilityReport {
        accuracy: right as f64 / total.max(1) as f64,
        parts: total,
        occluded_parts: occluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: VisibilityMode,
    pub report: EvalReport,
}

/// Everything `eval` reports for one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub clean: Vec<ModeReport>,
    pub occluded: Vec<ModeReport>,
    pub localization: LocalizationReport,
    pub visibility: VisibilityReport,
}

/// Retrieval under every visibility mode (only `as-is` unless `ablate`),
/// localization on the clean evaluation images and visibility accuracy on the
/// occluded ones.
pub fn full_report(
    model: &PoseTokenTransformer,
    data: &Dataset,
    parts: &PartConfig,
    cfg: &EvalConfig,
    ablate: bool,
) -> Result<FullReport> {
    let embed = |s: &[Sample]| infer_samples(model, s, cfg.batch_size);
    let (q, g) = (embed(&data.query)?, embed(&data.gallery)?);
    let (qo, go) = (embed(&data.query_occluded)?, embed(&data.gallery_occluded)?);
    let modes = |q: &[GalleryEntry], g: &[GalleryEntry]| -> Result<Vec<ModeReport>> {
        let reports = if ablate {
            ablate_visibility(q, g, cfg.cmc_k)?
        } else {
            vec![(VisibilityMode::AsIs, evaluate(q, g, VisibilityMode::AsIs, cfg.cmc_k)?)]
        };
        Ok(reports.into_iter().map(|(mode, report)| ModeReport { mode, report }).collect())
    };
    let clean = modes(&entries(&q, &data.query), &entries(&g, &data.gallery))?;
    let occluded = modes(
        &entries(&qo, &data.query_occluded),
        &entries(&go, &data.gallery_occluded),
    )?;
    let clean_samples: Vec<Sample> = data.query.iter().chain(&data.gallery).cloned().collect();
    let clean_out: Vec<ModelOutput> = q.into_iter().chain(g).collect();
    let occ_samples: Vec<Sample> = data.query_occluded.iter().chain(&data.gallery_occluded).cloned().collect();
    let occ_out: Vec<ModelOutput> = qo.into_iter().chain(go).collect();
    Ok(FullReport {
        clean,
        occluded,
        localization: localization(&clean_out, &clean_samples, model, parts)?,
        visibility: visibility_accuracy(&occ_out, &occ_samples, model, parts)?,
    })
}

impl FullReport {
    /// Plain-text table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, rows) in [("clean", &self.clean), ("occluded", &self.occluded)] {
            for r in rows {
                s.push_str(&format!(
                    "{name:<9} {:<6} mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  skipped {}\n",
                    r.mode.name(),
                    r.report.map,
                    r.report.rank1(),
                    r.report.cmc.get(4).copied().unwrap_or(f64::NAN),
                    r.report.skipped_queries
                ));
            }
        }
        s.push_str(&format!(
            "localization mass {:.4}  argmax {:.4}  over {} visible parts\n",
            self.localization.mass_in_band, self.localization.argmax_in_band, self.localization.visible_parts
        ));
        s.push_str(&format!(
            "visibility accuracy {:.4}  over {} parts ({} occluded)\n",
            self.visibility.accuracy, self.visibility.parts, self.visibility.occluded_parts
        ));
        s
    }
}
