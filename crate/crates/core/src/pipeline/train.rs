use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::eval::{evaluate_model, EvalSummary};
use crate::error::{Error, Result};
use crate::heatmap::{build_ground_truth, PartConfig};
use crate::losses::{total_loss, BatchTargets, LossBreakdown};
use crate::model::{ForwardOptions, ModelConfig, PoseTokenTransformer};
use crate::synth::{augment, erase_cells, grid_fragments, load_dataset, AugmentConfig, Dataset, Sample};
use crate::tensor::{cosine_lr, Graph, Sgd, Tensor, TensorFile};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// One mini-batch after augmentation and ground-truth construction.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub cameras: Vec<usize>,
    pub targets: BatchTargets,
}

/// Per-epoch index batches: `ids_per_batch` identities × `instances_per_id`
/// images each. Every identity's images are shuffled and cut into groups;
/// leftover images that do not fill a group are dropped for the epoch.
pub fn pk_batches(train: &[Sample], ids_per_batch: usize, instances: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let max_id = train.iter().map(|s| s.identity).max().map_or(0, |m| m + 1);
    let mut by_id = vec![Vec::new(); max_id];
    for (i, s) in train.iter().enumerate() {
        by_id[s.identity].push(i);
    }
    let mut queues: Vec<Vec<Vec<usize>>> = by_id
        .into_iter()
        .map(|mut imgs| {
            imgs.shuffle(rng);
            imgs.chunks_exact(instances).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let mut batches = Vec::new();
    loop {
        let mut available: Vec<usize> = (0..queues.len()).filter(|&i| !queues[i].is_empty()).collect();
        if available.len() < ids_per_batch {
            break;
        }
        available.shuffle(rng);
        // identities with the most groups left go first so none is stranded
        available.sort_by_key(|&i| std::cmp::Reverse(queues[i].len()));
        let mut batch = Vec::with_capacity(ids_per_batch * instances);
        for &id in &available[..ids_per_batch] {
            batch.extend(queues[id].pop().expect("nonempty"));
        }
        batches.push(batch);
    }
    batches
}

/// Augments samples and builds their targets.
pub fn make_batch(
    samples: &[&Sample],
    model: &ModelConfig,
    parts: &PartConfig,
    aug: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let (patch, stride) = (model.patch_size, model.stride);
    let grid = model.grid();
    let mut images = Vec::with_capacity(samples.len());
    let (mut heatmaps, mut v_gt) = (Vec::new(), Vec::new());
    for s in samples {
        let ops = aug.sample_ops(model.image_h, model.image_w, rng);
        let a = augment(s, &ops);
        let frags = grid_fragments(&a.fragments, patch, stride)?;
        let gt = build_ground_truth(&frags, parts, &erase_cells(a.erase, patch, stride, grid))?;
        images.push(a.image);
        heatmaps.push(gt.heatmaps);
        v_gt.push(gt.visibility);
    }
    Ok(Batch {
        images: Tensor::stack(&images)?,
        cameras: samples.iter().map(|s| s.camera).collect(),
        targets: BatchTargets {
            identity: samples.iter().map(|s| s.identity).collect(),
            v_gt: Tensor::stack(&v_gt)?,
            heatmaps: Tensor::stack(&heatmaps)?,
        },
    })
}

/// One optimizer step; returns the loss breakdown. Non-finite terms abort
/// before the parameters change.
pub fn train_step(
    model: &mut PoseTokenTransformer,
    sgd: &mut Sgd,
    batch: &Batch,
    cfg: &RunConfig,
    lr: f32,
    step: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.images, &batch.cameras, &ForwardOptions::default())?;
    let terms = total_loss(&mut g, &out, &batch.targets, &cfg.loss)?;
    let values = terms.values(&g);
    if let Some((term, _)) = values.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Diverged { term, step });
    }
    let grads = g.backward(terms.total)?;
    model.store.zero_grad();
    model.store.accumulate_grads(&g, &grads);
    sgd.step(&mut model.store, lr)?;
    Ok(values)
}

/// Learning rate at `step`: linear warm-up, then half-cosine decay.
pub fn lr_at(cfg: &RunConfig, step: usize, steps_per_epoch: usize) -> f32 {
    let o = &cfg.optim;
    let warm = o.warmup_epochs * steps_per_epoch;
    let total = o.epochs * steps_per_epoch;
    if step < warm {
        return o.lr * (step + 1) as f32 / warm as f32;
    }
    cosine_lr(step - warm, total - warm, o.lr)
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f32,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Eval {
        epoch: usize,
        step: usize,
        #[serde(flatten)]
        metrics: EvalSummary,
    },
}

/// Training state persisted with every checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PoseTokenTransformer,
    pub velocity: Vec<Vec<f32>>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: usize,
    pub best_map: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = self.model.to_tensor_file();
        file.meta.insert("epoch".into(), self.epoch.into());
        file.meta.insert("step".into(), self.step.into());
        file.meta.insert("best_map".into(), self.best_map.into());
        for (i, v) in self.velocity.iter().enumerate() {
            file.push(format!("optim.velocity.{i}"), Tensor::new(&[v.len()], v.clone())?);
        }
        // write then rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("tmp");
        file.save(&tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::load(path)?;
        let bad = |reason: &str| Error::Container {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let config: ModelConfig = serde_json::from_value(
            file.meta.get("model_config").cloned().ok_or_else(|| bad("missing model_config"))?,
        )
        .map_err(|e| bad(&e.to_string()))?;
        let mut model = PoseTokenTransformer::new(config, 0)?;
        model.load_tensors(&file)?;
        let meta_usize = |k: &str| file.meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let velocity = (0..)
            .map_while(|i| file.get(&format!("optim.velocity.{i}")))
            .map(|t| t.data().to_vec())
            .collect();
        Ok(Self {
            model,
            velocity,
            epoch: meta_usize("epoch").unwrap_or(0),
            step: meta_usize("step").unwrap_or(0),
            best_map: file.meta.get("best_map").and_then(|v| v.as_f64()).unwrap_or(f64::NEG_INFINITY),
        })
    }
}

pub struct TrainOutcome {
    pub model: PoseTokenTransformer,
    pub evals: Vec<(usize, EvalSummary)>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: PathBuf,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

struct Logger(BufWriter<File>);

impl Logger {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self(BufWriter::new(file)))
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.0, "{line}").and_then(|_| self.0.flush()).map_err(|e| Error::io("train log", e))
    }
}

/// Trains on `data`. With `resume`, training continues from
/// `output_dir/last.ckpt` and the log is appended to.
pub fn train(cfg: &RunConfig, data: &Dataset, resume: bool) -> Result<TrainOutcome> {
    train_until(cfg, data, resume, cfg.optim.epochs)
}

/// [`train`] that stops once `stop_after` epochs are complete, leaving a
/// checkpoint a later `resume` continues from as if never interrupted.
pub fn train_until(cfg: &RunConfig, data: &Dataset, resume: bool, stop_after: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut sgd = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let (mut model, mut epoch, mut step, mut best_map) = if resume {
        let ck = Checkpoint::load(&last_path)?;
        if ck.model.config != cfg.model {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        sgd.set_velocity(ck.velocity);
        (ck.model, ck.epoch, ck.step, ck.best_map)
    } else {
        cfg.save(&out_dir.join("config.toml"))?;
        (PoseTokenTransformer::new(cfg.model.clone(), cfg.seed)?, 0, 0, f64::NEG_INFINITY)
    };
    let mut log = Logger::open(&out_dir.join(LOG_FILE), resume)?;
    let steps_per_epoch = pk_batches(
        &data.train,
        cfg.optim.ids_per_batch,
        cfg.optim.instances_per_id,
        &mut epoch_rng(cfg.seed, 0),
    )
    .len();
    if steps_per_epoch == 0 {
        return Err(Error::Config("training split cannot fill a single batch".into()));
    }
    let mut evals = Vec::new();
    while epoch < cfg.optim.epochs.min(stop_after) {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = pk_batches(&data.train, cfg.optim.ids_per_batch, cfg.optim.instances_per_id, &mut rng);
        for idx in batches {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = make_batch(&samples, &cfg.model, &cfg.parts, &cfg.augment, &mut rng)?;
            let lr = lr_at(cfg, step, steps_per_epoch);
            let loss = train_step(&mut model, &mut sgd, &batch, cfg, lr, step)?;
            log.write(&LogRecord::Step { epoch, step, lr, loss })?;
            step += 1;
        }
        epoch += 1;
        if epoch % cfg.optim.eval_every == 0 || epoch == cfg.optim.epochs {
            let metrics = evaluate_model(&model, data, &cfg.eval)?;
            info!("epoch {epoch}: mAP {:.4} rank-1 {:.4}", metrics.map, metrics.rank1);
            log.write(&LogRecord::Eval {
                epoch,
                step,
                metrics: metrics.clone(),
            })?;
            if metrics.map > best_map {
                best_map = metrics.map;
                Checkpoint {
                    model: model.clone(),
                    velocity: sgd.velocity().to_vec(),
                    epoch,
                    step,
                    best_map,
                }
                .save(&best_path)?;
            }
            evals.push((epoch, metrics));
        }
        Checkpoint {
            model: model.clone(),
            velocity: sgd.velocity().to_vec(),
            epoch,
            step,
            best_map,
        }
        .save(&last_path)?;
    }
    Ok(TrainOutcome {
        model,
        evals,
        best_checkpoint: best_path.exists().then_some(best_path),
        last_checkpoint: last_path,
    })
}

/// Loads the dataset named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let root = &cfg.data.root;
    if !root.join("spec.json").exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run `generate` first",
            root.display()
        )));
    }
    load_dataset(root)
}
