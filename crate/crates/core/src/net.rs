//! Pairwise pose regression networks: a shared convolutional backbone, a
//! pair fusion block and one of four temporal heads, each emitting a
//! six-component pose difference per step.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{
    load_checkpoint, save_checkpoint, Conv2dLayer, Conv3dLayer, ConvLstmCell, Linear, LstmCell, NormLayer, ParamStore,
    Scalar, Tape, Tensor, Var,
};

pub const OUTPUTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Static,
    Recurrent,
    ConvRecurrent,
    Temporal3d,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Static,
        HeadKind::Recurrent,
        HeadKind::ConvRecurrent,
        HeadKind::Temporal3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Static => "static",
            HeadKind::Recurrent => "recurrent",
            HeadKind::ConvRecurrent => "conv-recurrent",
            HeadKind::Temporal3d => "temporal3d",
        }
    }

    /// Whether an output at step `t` can depend on inputs after `t`.
    pub fn is_causal(self) -> bool {
        self != HeadKind::Temporal3d
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head '{s}' (static, recurrent, conv-recurrent, temporal3d)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `(height, width)` of the input frames.
    pub input_size: [usize; 2],
    pub input_channels: usize,
    /// One stride-2 block per entry.
    pub backbone_channels: Vec<usize>,
    pub fused_channels: usize,
    pub shuffle_groups: usize,
    pub dropout_rate: f64,
    pub head: HeadKind,
    /// LSTM hidden width (recurrent head) or hidden channels (conv-recurrent head).
    pub hidden_size: usize,
    /// Temporal kernel extent of the 3-D head; odd so that padding keeps the length.
    pub time_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: [64, 64],
            input_channels: 3,
            backbone_channels: vec![8, 16, 32],
            fused_channels: 16,
            shuffle_groups: 4,
            dropout_rate: 0.1,
            head: HeadKind::Static,
            hidden_size: 32,
            time_kernel: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        let div = 1usize << self.backbone_channels.len();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by {div} for {} stride-2 blocks",
                self.backbone_channels.len()
            )));
        }
        if self.input_channels == 0 || self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.shuffle_groups == 0 || self.fused_channels == 0 || self.fused_channels % self.shuffle_groups != 0 {
            return Err(Error::Config(format!(
                "fused_channels {} not divisible by shuffle_groups {}",
                self.fused_channels, self.shuffle_groups
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        if self.time_kernel == 0 || self.time_kernel % 2 == 0 {
            return Err(Error::Config(format!("time_kernel must be odd, got {}", self.time_kernel)));
        }
        Ok(())
    }

    /// Spatial size of the backbone output.
    pub fn feature_size(&self) -> [usize; 2] {
        let div = 1usize << self.backbone_channels.len();
        [self.input_size[0] / div, self.input_size[1] / div]
    }
}

/// Frames of a batch of sequences and the frame pairs forming each step.
/// `pairs` is ordered sequence-major, `batch * steps` entries.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    pub frames: Tensor<T>,
    pub pairs: Vec<[usize; 2]>,
    pub batch: usize,
    pub steps: usize,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(frames: Tensor<T>, pairs: Vec<[usize; 2]>, batch: usize, steps: usize) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(Error::Shape(format!("frames must be (N, C, H, W), got {:?}", frames.shape())));
        }
        if batch == 0 || steps == 0 || pairs.len() != batch * steps {
            return Err(Error::Shape(format!(
                "{} pairs for batch {batch} x steps {steps}",
                pairs.len()
            )));
        }
        let n = frames.shape()[0];
        if let Some(p) = pairs.iter().find(|p| p[0] >= n || p[1] >= n) {
            return Err(Error::Shape(format!("pair {p:?} indexes beyond {n} frames")));
        }
        Ok(Self {
            frames,
            pairs,
            batch,
            steps,
        })
    }

    /// Sequences of `steps + 1` consecutive standardized frames (each `(C, H, W)`
    /// flattened); step `t` pairs frames `t` and `t + 1`.
    pub fn sequences(seqs: &[Vec<&[T]>], channels: usize, height: usize, width: usize) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        if len < 2 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("sequences must share a length of at least 2 frames".into()));
        }
        let per = channels * height * width;
        let mut data = Vec::with_capacity(seqs.len() * len * per);
        for s in seqs {
            for f in s {
                if f.len() != per {
                    return Err(Error::Shape(format!(
                        "frame has {} values, expected {channels}x{height}x{width}",
                        f.len()
                    )));
                }
                data.extend_from_slice(f);
            }
        }
        let frames = Tensor::new(&[seqs.len() * len, channels, height, width], data)?;
        let mut pairs = Vec::with_capacity(seqs.len() * (len - 1));
        for b in 0..seqs.len() {
            for t in 0..len - 1 {
                pairs.push([b * len + t, b * len + t + 1]);
            }
        }
        Self::new(frames, pairs, seqs.len(), len - 1)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2dLayer,
    norm: NormLayer,
}

impl ConvBlock {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.norm.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone)]
struct Conv3dBlock {
    conv: Conv3dLayer,
    norm: NormLayer,
}

#[derive(Debug, Clone)]
enum Head {
    Static { fc: Linear },
    Recurrent { cell: LstmCell, fc: Linear },
    ConvRecurrent { cell: ConvLstmCell, fc: Linear },
    Temporal3d { blocks: [Conv3dBlock; 2], fc: Linear },
}

/// Layer layout of a model; the weights live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PoseNet {
    pub config: ModelConfig,
    backbone: Vec<ConvBlock>,
    fuse: ConvBlock,
    shuffle: ConvBlock,
    head: Head,
}

impl PoseNet {
    /// Builds the layer layout and freshly initialized weights.
    pub fn new<T: Scalar>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed::derive(config.seed, "init", 0));
        let mut backbone = Vec::new();
        let mut ch = config.input_channels;
        for (i, &out) in config.backbone_channels.iter().enumerate() {
            let name = format!("backbone.{i}");
            backbone.push(ConvBlock {
                conv: Conv2dLayer::new(&mut store, &format!("{name}.conv"), ch, out, 3, 2, 1, 1, false, &mut rng),
                norm: NormLayer::new(&mut store, &format!("{name}.norm"), out),
            });
            ch = out;
        }
        let fc_ch = config.fused_channels;
        let fuse = ConvBlock {
            conv: Conv2dLayer::new(&mut store, "fuse.conv", 2 * ch, fc_ch, 3, 1, 1, 1, false, &mut rng),
            norm: NormLayer::new(&mut store, "fuse.norm", fc_ch),
        };
        let shuffle = ConvBlock {
            conv: Conv2dLayer::new(
                &mut store,
                "shuffle.conv",
                fc_ch,
                fc_ch,
                3,
                1,
                1,
                config.shuffle_groups,
                false,
                &mut rng,
            ),
            norm: NormLayer::new(&mut store, "shuffle.norm", fc_ch),
        };
        let [fh, fw] = config.feature_size();
        let flat = fc_ch * fh * fw;
        let head = match config.head {
            HeadKind::Static => Head::Static {
                fc: Linear::new(&mut store, "head.fc", flat, OUTPUTS, &mut rng),
            },
            HeadKind::Recurrent => Head::Recurrent {
                cell: LstmCell::new(&mut store, "head.lstm", flat, config.hidden_size, &mut rng),
                fc: Linear::new(&mut store, "head.fc", config.hidden_size, OUTPUTS, &mut rng),
            },
            HeadKind::ConvRecurrent => Head::ConvRecurrent {
                cell: ConvLstmCell::new(&mut store, "head.convlstm", fc_ch, config.hidden_size, 3, &mut rng),
                fc: Linear::new(&mut store, "head.fc", config.hidden_size * fh * fw, OUTPUTS, &mut rng),
            },
            HeadKind::Temporal3d => {
                let k = [config.time_kernel, 3, 3];
                let pad = [config.time_kernel / 2, 1, 1];
                let mut block = |i: usize, rng: &mut _| Conv3dBlock {
                    conv: Conv3dLayer::new(&mut store, &format!("head.conv3d.{i}"), fc_ch, fc_ch, k, pad, false, rng),
                    norm: NormLayer::new(&mut store, &format!("head.conv3d.{i}.norm"), fc_ch),
                };
                let blocks = [block(0, &mut rng), block(1, &mut rng)];
                Head::Temporal3d {
                    blocks,
                    fc: Linear::new(&mut store, "head.fc", flat, OUTPUTS, &mut rng),
                }
            }
        };
        Ok((
            Self {
                config: config.clone(),
                backbone,
                fuse,
                shuffle,
                head,
            },
            store,
        ))
    }

    /// `(N, C, H, W)` frames to `(N, C', H / 2^k, W / 2^k)` features.
    pub fn backbone_features<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, frames: Var) -> Result<Var> {
        let s = tape.shape(frames).to_vec();
        let [h, w] = self.config.input_size;
        if s.len() != 4 || s[1] != self.config.input_channels || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "backbone expects (N, {}, {h}, {w}), got {s:?}",
                self.config.input_channels
            )));
        }
        let mut x = frames;
        for block in &self.backbone {
            x = block.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// Concatenates the two feature maps of each pair along channels and
    /// applies the fusion and grouped/shuffled blocks.
    pub fn pair_fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        f1: Var,
        f2: Var,
        dropout_seed: u64,
    ) -> Result<Var> {
        if tape.shape(f1) != tape.shape(f2) {
            return Err(Error::Shape(format!(
                "pair feature maps differ: {:?} vs {:?}",
                tape.shape(f1),
                tape.shape(f2)
            )));
        }
        let x = tape.concat(&[f1, f2], 1)?;
        let x = self.fuse.forward(tape, store, x)?;
        let x = self.shuffle.forward(tape, store, x)?;
        let x = tape.channel_shuffle(x, self.config.shuffle_groups)?;
        tape.dropout(x, self.config.dropout_rate, dropout_seed)
    }

    /// Predictions of shape `(batch, steps, 6)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        input: &PairBatch<T>,
        dropout_seed: u64,
    ) -> Result<Var> {
        let frames = tape.input(input.frames.clone());
        let feats = self.backbone_features(tape, store, frames)?;
        let a: Vec<usize> = input.pairs.iter().map(|p| p[0]).collect();
        let b: Vec<usize> = input.pairs.iter().map(|p| p[1]).collect();
        let f1 = tape.index_select(feats, &a)?;
        let f2 = tape.index_select(feats, &b)?;
        let fused = self.pair_fuse(tape, store, f1, f2, dropout_seed)?;
        self.head_forward(tape, store, fused, input.batch, input.steps)
    }

    /// Runs the head on fused maps `(batch * steps, F, h, w)`, sequence-major.
    pub fn head_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        fused: Var,
        batch: usize,
        steps: usize,
    ) -> Result<Var> {
        let s = tape.shape(fused).to_vec();
        if s.len() != 4 || s[0] != batch * steps {
            return Err(Error::Shape(format!(
                "head expects ({}, F, h, w) fused maps, got {s:?}",
                batch * steps
            )));
        }
        let (f, h, w) = (s[1], s[2], s[3]);
        match &self.head {
            Head::Static { fc } => {
                let x = tape.flatten(fused)?;
                let y = fc.forward(tape, store, x)?;
                tape.reshape(y, &[batch, steps, OUTPUTS])
            }
            Head::Recurrent { cell, fc } => {
                let seq = tape.reshape(fused, &[batch, steps, f * h * w])?;
                let mut state = cell.zero_state(tape, batch);
                let mut outs = Vec::with_capacity(steps);
                for t in 0..steps {
                    let x = tape.slice(seq, 1, t, 1)?;
                    let x = tape.reshape(x, &[batch, f * h * w])?;
                    state = cell.step(tape, store, x, state)?;
                    let y = fc.forward(tape, store, state.h)?;
                    outs.push(tape.reshape(y, &[batch, 1, OUTPUTS])?);
                }
                tape.concat(&outs, 1)
            }
            Head::ConvRecurrent { cell, fc } => {
                let seq = tape.reshape(fused, &[batch, steps, f * h * w])?;
                let mut state = cell.zero_state(tape, batch, h, w);
                let mut outs = Vec::with_capacity(steps);
                for t in 0..steps {
                    let x = tape.slice(seq, 1, t, 1)?;
                    let x = tape.reshape(x, &[batch, f, h, w])?;
                    state = cell.step(tape, store, x, state)?;
                    let flat = tape.flatten(state.h)?;
                    let y = fc.forward(tape, store, flat)?;
                    outs.push(tape.reshape(y, &[batch, 1, OUTPUTS])?);
                }
                tape.concat(&outs, 1)
            }
            Head::Temporal3d { blocks, fc } => {
                let x = tape.reshape(fused, &[batch, steps, f, h, w])?;
                let mut x = tape.permute(x, &[0, 2, 1, 3, 4])?;
                for blk in blocks {
                    x = blk.conv.forward(tape, store, x)?;
                    x = blk.norm.forward(tape, store, x)?;
                    x = tape.relu(x);
                }
                let c = tape.shape(x)[1];
                let x = tape.permute(x, &[0, 2, 1, 3, 4])?;
                let x = tape.reshape(x, &[batch * steps, c * h * w])?;
                let y = fc.forward(tape, store, x)?;
                tape.reshape(y, &[batch, steps, OUTPUTS])
            }
        }
    }
}

/// Number of trainable scalars.
pub fn param_count<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count()
}

/// Sidecar path holding the model configuration of a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn save_model<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>, checkpoint: &Path) -> Result<()> {
    save_checkpoint(store, checkpoint)?;
    let side = sidecar_path(checkpoint);
    std::fs::write(&side, crate::json::to_pretty(config)?).map_err(|e| Error::io(&side, e))
}

pub fn load_model<T: Scalar>(checkpoint: &Path) -> Result<(PoseNet, ParamStore<T>)> {
    let side = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: side.clone(),
        msg: e.to_string(),
    })?;
    let (net, mut store) = PoseNet::new::<T>(&config)?;
    load_checkpoint(&mut store, checkpoint)?;
    Ok((net, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_names_round_trip() {
        for h in HeadKind::ALL {
            assert_eq!(h.name().parse::<HeadKind>().unwrap(), h);
            assert_eq!(serde_json::to_string(&h).unwrap(), format!("\"{}\"", h.name()));
        }
        assert!("lstm".parse::<HeadKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::default();
        ok.validate().unwrap();
        assert_eq!(ok.feature_size(), [8, 8]);
        let odd = ModelConfig {
            input_size: [60, 64],
            ..ok.clone()
        };
        assert!(odd.validate().is_err());
        let groups = ModelConfig {
            fused_channels: 18,
            ..ok.clone()
        };
        assert!(groups.validate().is_err());
        let even = ModelConfig {
            time_kernel: 2,
            ..ok
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn pair_batch_from_sequences() {
        let f = vec![0.0; 3 * 8 * 8];
        let seq: Vec<&[f64]> = vec![&f, &f, &f];
        let b = PairBatch::<f64>::sequences(&[seq.clone(), seq], 3, 8, 8).unwrap();
        assert_eq!((b.batch, b.steps), (2, 2));
        assert_eq!(b.pairs, vec![[0, 1], [1, 2], [3, 4], [4, 5]]);
        assert_eq!(b.frames.shape(), &[6, 3, 8, 8]);
    }
}
