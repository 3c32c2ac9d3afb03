//! Training with truncated backpropagation through time over fixed-length
//! chunks, Adam updates and early stopping on the validation loss.

pub mod loss;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{standardize_frame, ChannelStats, Dataset, SplitAssignment, SplitScheme, TrajectoryData};
use crate::error::{Error, Result};
use crate::metrics::LossCombo;
use crate::net::{param_count, save_model, ModelConfig, PairBatch, PoseNet, OUTPUTS};
use crate::pose::DeltaPose;
use crate::seed;
use crate::tensor::{Adam, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossCombo,
    pub lr: f64,
    /// Chunks per optimizer step.
    pub batch_chunks: usize,
    pub chunk_len: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub split: SplitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossCombo::MseCe,
            lr: 1e-4,
            batch_chunks: 32,
            chunk_len: 10,
            max_epochs: 30,
            patience: 5,
            dropout_rate: 0.1,
            seed: 0,
            split: SplitScheme::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.chunk_len == 0 || self.batch_chunks == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "chunk_len, batch_chunks and max_epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub model: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub dataset_hash: String,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_s: f64,
    pub seeds: RunSeeds,
    pub stats: ChannelStats,
    /// Every trajectory that contributed a chunk to some training batch.
    pub train_trajectories: Vec<String>,
    pub val_trajectories: Vec<String>,
}

impl RunRecord {
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

/// Best-validation weights and the run record.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: PoseNet,
    pub store: ParamStore<f32>,
    pub record: RunRecord,
}

/// Standardized frames and ground-truth deltas of one trajectory.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub traj_id: String,
    pub frames: Vec<Vec<f32>>,
    pub deltas: Vec<DeltaPose>,
}

impl Prepared {
    pub fn new(traj: &TrajectoryData, stats: &ChannelStats) -> Result<Self> {
        let frames = traj
            .frames
            .iter()
            .map(|f| Ok(standardize_frame(f, stats)?.into_iter().map(|v| v as f32).collect()))
            .collect::<Result<Vec<Vec<f32>>>>()?;
        Ok(Self {
            traj_id: traj.entry.traj_id.clone(),
            frames,
            deltas: traj.deltas(),
        })
    }

    pub fn pairs(&self) -> usize {
        self.deltas.len()
    }
}

/// A run of `len` consecutive pairs starting at pair `start` of trajectory `traj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkRef {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

/// Non-overlapping chunks of every trajectory; trailing remainders are dropped.
pub fn chunk_refs(data: &[Prepared], len: usize) -> Vec<ChunkRef> {
    let mut out = Vec::new();
    for (traj, p) in data.iter().enumerate() {
        for k in 0..p.pairs() / len {
            out.push(ChunkRef {
                traj,
                start: k * len,
                len,
            });
        }
    }
    out
}

/// Inputs and `(B * L, 6)` targets for chunks of equal length.
pub fn assemble(data: &[Prepared], chunks: &[ChunkRef], cam: [usize; 3]) -> Result<(PairBatch<f32>, Tensor<f32>)> {
    let seqs: Vec<Vec<&[f32]>> = chunks
        .iter()
        .map(|c| (c.start..=c.start + c.len).map(|i| data[c.traj].frames[i].as_slice()).collect())
        .collect();
    let batch = PairBatch::sequences(&seqs, cam[0], cam[1], cam[2])?;
    let mut t = Vec::with_capacity(chunks.len() * chunks[0].len * OUTPUTS);
    for c in chunks {
        for d in &data[c.traj].deltas[c.start..c.start + c.len] {
            t.extend(d.to_array().iter().map(|&v| v as f32));
        }
    }
    let targets = Tensor::new(&[t.len() / OUTPUTS, OUTPUTS], t)?;
    Ok((batch, targets))
}

/// Groups shuffled chunks into batches of `size`; a trailing single chunk is
/// merged into the previous batch since batch norm needs two samples.
fn batches(chunks: &[ChunkRef], size: usize) -> Vec<Vec<ChunkRef>> {
    let mut out: Vec<Vec<ChunkRef>> = chunks.chunks(size).map(<[ChunkRef]>::to_vec).collect();
    if out.len() > 1 && out[out.len() - 1].len() == 1 {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Mean combined loss over chunks in eval mode.
pub fn evaluate_loss(
    net: &PoseNet,
    store: &ParamStore<f32>,
    data: &[Prepared],
    chunks: &[ChunkRef],
    combo: LossCombo,
    batch_size: usize,
) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let cam = frame_dims(&net.config);
    let mut store = store.clone();
    let mut total = 0.0;
    for batch in chunks.chunks(batch_size.max(1)) {
        let (input, targets) = assemble(data, batch, cam)?;
        let mut tape = Tape::<f32>::new(false);
        let pred = net.forward(&mut tape, &mut store, &input, 0)?;
        let pred = tape.reshape(pred, &[input.batch * input.steps, OUTPUTS])?;
        let target = tape.constant(targets);
        let l = loss::combined(&mut tape, combo, pred, target)?;
        total += tape.value(l).item() as f64 * batch.len() as f64;
    }
    Ok(total / chunks.len() as f64)
}

fn frame_dims(cfg: &ModelConfig) -> [usize; 3] {
    [cfg.input_channels, cfg.input_size[0], cfg.input_size[1]]
}

/// Normalization statistics for a split, reusing the manifest's when the scheme matches.
pub fn split_stats(dataset: &Dataset, split: &SplitAssignment) -> Result<ChannelStats> {
    if split.scheme == dataset.manifest.split.scheme {
        Ok(dataset.manifest.stats)
    } else {
        dataset.manifest.stats_for(split)
    }
}

/// Trains `model_cfg` on `dataset` and returns the best-validation weights.
/// With `out_dir`, writes `model.ckpt` (+ `model.json`), `run.json` and `loss_curve.csv`.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    let started = Instant::now();
    let mut model_cfg = model_cfg.clone();
    model_cfg.dropout_rate = cfg.dropout_rate;
    let cam = &dataset.manifest.config.camera;
    if model_cfg.input_size != [cam.height, cam.width] || model_cfg.input_channels != 3 {
        return Err(Error::Config(format!(
            "model input {:?}x{} does not match dataset frames {}x{}x3",
            model_cfg.input_size, model_cfg.input_channels, cam.height, cam.width
        )));
    }
    let split = dataset.split(cfg.split)?;
    let stats = split_stats(dataset, &split)?;
    let load = |ids: &[String]| -> Result<Vec<Prepared>> {
        ids.iter()
            .map(|id| {
                let i = dataset
                    .index_of(id)
                    .ok_or_else(|| Error::Config(format!("split names unknown trajectory {id}")))?;
                Prepared::new(&dataset.trajectories[i], &stats)
            })
            .collect()
    };
    let train_data = load(&split.train)?;
    let val_data = load(&split.val)?;
    let train_chunks = chunk_refs(&train_data, cfg.chunk_len);
    let val_chunks = chunk_refs(&val_data, cfg.chunk_len);
    if train_chunks.len() < 2 {
        return Err(Error::Config(format!(
            "training set yields {} chunks of length {}; at least 2 are needed",
            train_chunks.len(),
            cfg.chunk_len
        )));
    }
    if val_chunks.is_empty() {
        return Err(Error::EmptyValidation);
    }

    let seeds = RunSeeds {
        model: model_cfg.seed,
        shuffle: seed::derive(cfg.seed, "shuffle", 0),
        dropout: seed::derive(cfg.seed, "dropout", 0),
    };
    let (net, mut store) = PoseNet::new::<f32>(&model_cfg)?;
    let mut adam = Adam::new(&store, cfg.lr);
    let dims = frame_dims(&model_cfg);
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut seen = vec![false; train_data.len()];
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let mut order = train_chunks.clone();
        order.shuffle(&mut seed::rng(seed::derive(seeds.shuffle, "epoch", epoch as u64)));
        let mut total = 0.0;
        for batch in batches(&order, cfg.batch_chunks) {
            for c in &batch {
                seen[c.traj] = true;
            }
            log::trace!(
                "epoch {epoch} batch: {:?}",
                batch.iter().map(|c| &train_data[c.traj].traj_id).collect::<Vec<_>>()
            );
            let (input, targets) = assemble(&train_data, &batch, dims)?;
            let mut tape = Tape::<f32>::new(true);
            let pred = net.forward(&mut tape, &mut store, &input, seed::derive(seeds.dropout, "step", step))?;
            step += 1;
            let pred = tape.reshape(pred, &[input.batch * input.steps, OUTPUTS])?;
            let target = tape.constant(targets);
            let l = loss::combined(&mut tape, cfg.loss, pred, target)?;
            let lv = tape.value(l).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, loss: lv });
            }
            tape.backward_into(l, &mut store)?;
            adam.step(&mut store);
            total += lv * batch.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = evaluate_loss(&net, &store, &val_data, &val_chunks, cfg.loss, cfg.batch_chunks)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, store) = best;
    let mut record = RunRecord {
        train_config: cfg.clone(),
        model_config: model_cfg.clone(),
        dataset_hash: dataset.manifest.config_hash.clone(),
        param_count: param_count(&store),
        stopped_early: epochs.len() < cfg.max_epochs,
        epochs,
        best_epoch,
        best_val_loss,
        checkpoint: None,
        wall_clock_s: 0.0,
        seeds,
        stats,
        train_trajectories: train_data
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| s)
            .map(|(p, _)| p.traj_id.clone())
            .collect(),
        val_trajectories: split.val.clone(),
    };
    record.wall_clock_s = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join("model.ckpt");
        save_model(&model_cfg, &store, &ckpt)?;
        record.checkpoint = Some(ckpt);
        write_text(&dir.join("run.json"), &crate::json::to_pretty(&record)?)?;
        write_text(&dir.join("loss_curve.csv"), &record.loss_curve_csv())?;
    }
    Ok(Trained { net, store, record })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_run_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(n: usize) -> Vec<ChunkRef> {
        (0..n).map(|i| ChunkRef { traj: i, start: 0, len: 2 }).collect()
    }

    #[test]
    fn trailing_single_chunk_is_merged() {
        let b = batches(&refs(9), 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&refs(10), 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(batches(&refs(1), 4).len(), 1);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
