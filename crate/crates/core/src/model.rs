//! Instrumented toy video classifier.
//!
//! Each 16-frame view is cut into non-overlapping `patch x patch` tiles per
//! frame. A stack of blocks (shared linear projection, fixed-statistics
//! normalization with a trainable per-channel affine, relu) maps every tile
//! to a feature vector. Block outputs are recorded as `[c, t, gh, gw]` maps.
//! The last feature map is averaged over time and fed to a linear head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ops, Gradients, NodeId, Tape, Tensor, Var};

/// Frames per view.
pub const SEGMENTS: usize = 16;

const NORM_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT: &str = "avtta-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub layer_widths: Vec<usize>,
    pub input_shape: InputShape,
    #[serde(default = "default_patch")]
    pub patch: usize,
    pub seed: u64,
}

fn default_patch() -> usize {
    2
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::config("model.layer_widths", "need at least one layer, all widths >= 1"));
        }
        let s = self.input_shape;
        if s.t != SEGMENTS {
            return Err(Error::config("model.input_shape.t", format!("views have {SEGMENTS} frames")));
        }
        if s.c_in == 0 || self.patch == 0 || !s.h.is_multiple_of(self.patch) || !s.w.is_multiple_of(self.patch) {
            return Err(Error::config(
                "model.patch",
                format!("patch {} must tile a {}x{} frame", self.patch, s.h, s.w),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_shape.h / self.patch, self.input_shape.w / self.patch)
    }

    /// Declared `(c, t, h, w)` of every instrumented layer.
    pub fn activation_shapes(&self) -> Vec<[usize; 4]> {
        let (gh, gw) = self.grid();
        self.layer_widths.iter().map(|&c| [c, SEGMENTS, gh, gw]).collect()
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.input_shape.c_in
    }
}

/// A clip with values in `[0, 1]`, shaped `[t_total, h, w, c_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub sample_id: String,
    /// Hidden from adaptation; only used for accuracy accounting.
    pub ground_truth: Option<usize>,
}

impl VideoClip {
    /// Validates the frame layout and clamps pixel values into `[0, 1]`.
    pub fn new(frames: Tensor, sample_id: impl Into<String>, ground_truth: Option<usize>) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "clip frames must be [t, h, w, c], got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[0] < SEGMENTS {
            return Err(Error::Input(format!(
                "clip has {} frames, sampling needs at least {SEGMENTS}",
                frames.shape()[0]
            )));
        }
        let mut frames = frames;
        frames.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self { frames, sample_id: sample_id.into(), ground_truth })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Copies out the frames at `indices` as a `[len, h, w, c]` stack.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let s = self.frames.shape();
        let frame_len = s[1] * s[2] * s[3];
        let src = self.frames.data();
        let mut data = Vec::with_capacity(indices.len() * frame_len);
        for &i in indices {
            data.extend_from_slice(&src[i * frame_len..(i + 1) * frame_len]);
        }
        Tensor::from_parts(vec![indices.len(), s[1], s[2], s[3]], data)
    }
}

/// `M` frame samplings of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<Tensor>,
    pub frame_indices: Vec<Vec<usize>>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Segment-based frame indices: the clip is split into 16 equal segments of
/// `floor(t_total / 16)` frames and frames are taken at a fixed stride from
/// `start`.
pub fn segment_indices(t_total: usize, start: usize) -> Vec<usize> {
    let seg = t_total / SEGMENTS;
    (0..SEGMENTS).map(|k| start + k * seg).collect()
}

/// Draws `m` independent views, each with its own uniformly drawn start
/// inside the first segment.
pub fn sample_views<R: Rng + ?Sized>(clip: &VideoClip, m: usize, rng: &mut R) -> Result<ViewSet> {
    let t_total = clip.num_frames();
    if t_total < SEGMENTS {
        return Err(Error::Input(format!("clip has {t_total} frames, need at least {SEGMENTS}")));
    }
    if m < 2 {
        return Err(Error::Input(format!("need at least 2 views, got {m}")));
    }
    let seg = t_total / SEGMENTS;
    let mut views = Vec::with_capacity(m);
    let mut frame_indices = Vec::with_capacity(m);
    for _ in 0..m {
        let start = rng.random_range(0..seg);
        let idx = segment_indices(t_total, start);
        views.push(clip.gather(&idx));
        frame_indices.push(idx);
    }
    Ok(ViewSet { views, frame_indices })
}

/// The inference view: first frame of every segment.
pub fn deterministic_view(clip: &VideoClip) -> Tensor {
    clip.gather(&segment_indices(clip.num_frames(), 0))
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub prediction: Tensor,
    /// One `[c_l, t_l, h_l, w_l]` map per instrumented layer.
    pub layer_activations: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Projection,
    Norm,
    Head,
}

/// Which parameters a gradient step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    #[default]
    All,
    NormOnly,
    AllButHead,
}

impl ParamSubset {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            ParamSubset::All => true,
            ParamSubset::NormOnly => group == ParamGroup::Norm,
            ParamSubset::AllButHead => group != ParamGroup::Head,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    weight: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
    /// Frozen normalization statistics of the pre-norm activations.
    norm_mean: Vec<f64>,
    norm_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<Block>,
    head_weight: Tensor,
    head_bias: Tensor,
}

/// Parameters of a model recorded on a tape, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn ids(&self) -> Vec<NodeId> {
        self.vars.iter().map(|v| v.id()).collect()
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Forward-pass nodes on a tape.
#[derive(Debug, Clone)]
pub struct ForwardVars<'t> {
    pub logits: Var<'t>,
    pub prediction: Var<'t>,
    /// `[c, t, gh, gw]` maps after each block's relu.
    pub activations: Vec<Var<'t>>,
}

impl<'t> ForwardVars<'t> {
    pub fn record(&self) -> ForwardRecord {
        ForwardRecord {
            prediction: self.prediction.to_tensor(),
            layer_activations: self.activations.iter().map(|a| a.to_tensor()).collect(),
        }
    }
}

/// Result of [`train_source`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

impl Model {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// with zero biases, unit gammas and identity normalization statistics.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let mut blocks = Vec::with_capacity(config.layer_widths.len());
        let mut fan_in = config.patch_dim();
        for &width in &config.layer_widths {
            blocks.push(Block {
                weight: uniform(width, fan_in),
                bias: Tensor::zeros(vec![width]),
                gamma: Tensor::filled(vec![width], 1.0),
                beta: Tensor::zeros(vec![width]),
                norm_mean: vec![0.0; width],
                norm_var: vec![1.0; width],
            });
            fan_in = width;
        }
        let (gh, gw) = config.grid();
        let head_in = gh * gw * fan_in;
        let head_weight = uniform(config.num_classes, head_in);
        let head_bias = Tensor::zeros(vec![config.num_classes]);
        Ok(Self { config, blocks, head_weight, head_bias })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Parameters in a fixed order: per block weight, bias, gamma, beta; then
    /// head weight and head bias.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.weight"), ParamGroup::Projection, &b.weight));
            out.push((format!("block{l}.bias"), ParamGroup::Projection, &b.bias));
            out.push((format!("block{l}.gamma"), ParamGroup::Norm, &b.gamma));
            out.push((format!("block{l}.beta"), ParamGroup::Norm, &b.beta));
        }
        out.push(("head.weight".into(), ParamGroup::Head, &self.head_weight));
        out.push(("head.bias".into(), ParamGroup::Head, &self.head_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push((ParamGroup::Projection, &mut b.weight));
            out.push((ParamGroup::Projection, &mut b.bias));
            out.push((ParamGroup::Norm, &mut b.gamma));
            out.push((ParamGroup::Norm, &mut b.beta));
        }
        out.push((ParamGroup::Head, &mut self.head_weight));
        out.push((ParamGroup::Head, &mut self.head_bias));
        out
    }

    /// Zeroes the classifier head so every prediction is uniform.
    pub fn zero_head(&mut self) {
        self.head_weight.data_mut().fill(0.0);
        self.head_bias.data_mut().fill(0.0);
    }

    /// Flat copy of all parameter values, in [`Model::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, _, t)| t.data().to_vec()).collect()
    }

    /// Overwrites all parameters from a flat buffer in [`Model::params`] order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params().iter().map(|(_, _, t)| t.len()).sum();
        if flat.len() != total {
            return Err(Error::Dimension(format!("expected {total} parameters, got {}", flat.len())));
        }
        let mut offset = 0;
        for (_, t) in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams { vars: self.params().into_iter().map(|(_, _, t)| tape.param(t.clone())).collect() }
    }

    /// Rearranges a `[16, h, w, c]` view into `[16 * gh * gw, patch * patch * c]`
    /// rows ordered by (frame, tile row, tile column).
    fn patchify(&self, view: &Tensor) -> Result<Tensor> {
        let s = self.config.input_shape;
        if view.shape() != [s.t, s.h, s.w, s.c_in] {
            return Err(Error::Dimension(format!(
                "view shape {:?} does not match model input [{}, {}, {}, {}]",
                view.shape(),
                s.t,
                s.h,
                s.w,
                s.c_in
            )));
        }
        let p = self.config.patch;
        let (gh, gw) = self.config.grid();
        let d = view.data();
        let mut data = Vec::with_capacity(view.len());
        for t in 0..s.t {
            for gy in 0..gh {
                for gx in 0..gw {
                    for py in 0..p {
                        let y = gy * p + py;
                        let row = ((t * s.h + y) * s.w + gx * p) * s.c_in;
                        data.extend_from_slice(&d[row..row + p * s.c_in]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![s.t * gh * gw, self.config.patch_dim()], data))
    }

    /// Records a forward pass of one view on `tape` using already bound parameters.
    pub fn forward_bound<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        view: &Tensor,
    ) -> Result<ForwardVars<'t>> {
        let (mut x, activations) = self.features(tape, params, view, None)?;
        let (gh, gw) = self.config.grid();
        let c_last = *self.config.layer_widths.last().unwrap();
        x = ops::reshape(x, vec![SEGMENTS, gh * gw * c_last])?;
        let pooled = ops::mean_rows(x)?;
        let n = params.vars.len();
        let logits = ops::linear(pooled, params.vars[n - 2], params.vars[n - 1])?;
        let prediction = ops::softmax(logits)?;
        Ok(ForwardVars { logits, prediction, activations })
    }

    /// Runs the blocks. When `stop_before_norm` is `Some(l)`, returns the
    /// pre-normalization activations of block `l` as rows instead.
    fn features<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        view: &Tensor,
        stop_before_norm: Option<usize>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let mut x = tape.constant(self.patchify(view)?);
        let (gh, gw) = self.config.grid();
        let mut activations = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let p = &params.vars[4 * l..4 * l + 4];
            let z = ops::linear(x, p[0], p[1])?;
            if stop_before_norm == Some(l) {
                return Ok((z, activations));
            }
            let inv_std: Vec<f64> = block.norm_var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let shift: Vec<f64> = block.norm_mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
            let z = ops::channel_affine(z, tape.constant(Tensor::vector(inv_std)), tape.constant(Tensor::vector(shift)))?;
            let z = ops::channel_affine(z, p[2], p[3])?;
            let a = ops::relu(z);
            let width = self.config.layer_widths[l];
            let map = ops::reshape(ops::transpose(a)?, vec![width, SEGMENTS, gh, gw])?;
            activations.push(map);
            x = a;
        }
        Ok((x, activations))
    }

    pub fn forward(&self, view: &Tensor) -> Result<ForwardRecord> {
        let tape = Tape::new();
        let params = self.bind(&tape);
        Ok(self.forward_bound(&tape, &params, view)?.record())
    }

    /// Class probabilities on the deterministic view.
    pub fn predict_proba(&self, clip: &VideoClip) -> Result<Tensor> {
        Ok(self.forward(&deterministic_view(clip))?.prediction)
    }

    /// Visual-only prediction on the deterministic view; ties go to the lowest class.
    pub fn predict(&self, clip: &VideoClip) -> Result<usize> {
        Ok(self.predict_proba(clip)?.argmax())
    }

    /// Gradient-descent update `p -= lr * grad` on the parameters in `subset`.
    /// `ids` are the node ids returned by [`BoundParams::ids`].
    pub fn apply_gradients(&mut self, grads: &Gradients, ids: &[NodeId], lr: f64, subset: ParamSubset) {
        for ((group, tensor), &id) in self.params_mut().into_iter().zip(ids) {
            if !subset.includes(group) {
                continue;
            }
            let g = grads.get_id(id, tensor.len());
            for (p, g) in tensor.data_mut().iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
    }

    /// Re-estimates every block's normalization statistics from the
    /// deterministic views of `clips`, one layer at a time.
    pub fn calibrate(&mut self, clips: &[VideoClip]) -> Result<()> {
        if clips.is_empty() {
            return Err(Error::Input("calibration needs at least one clip".into()));
        }
        for l in 0..self.blocks.len() {
            let width = self.config.layer_widths[l];
            let mut sum = vec![0.0; width];
            let mut count = 0usize;
            let mut rows_cache = Vec::with_capacity(clips.len());
            for clip in clips {
                let tape = Tape::new();
                let params = self.bind(&tape);
                let (z, _) = self.features(&tape, &params, &deterministic_view(clip), Some(l))?;
                let z = z.to_tensor();
                for row in z.data().chunks_exact(width) {
                    sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    count += 1;
                }
                rows_cache.push(z);
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut var = vec![0.0; width];
            for z in &rows_cache {
                for row in z.data().chunks_exact(width) {
                    for c in 0..width {
                        let d = row[c] - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            self.blocks[l].norm_mean = mean;
            self.blocks[l].norm_var = var;
        }
        Ok(())
    }

    /// SHA-256 over the checkpoint encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.to_checkpoint()).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params()
            .into_iter()
            .map(|(name, _, t)| NamedArray { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        let mut buffers = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            buffers.push(NamedArray { name: format!("block{l}.norm_mean"), shape: vec![b.norm_mean.len()], data: b.norm_mean.clone() });
            buffers.push(NamedArray { name: format!("block{l}.norm_var"), shape: vec![b.norm_var.len()], data: b.norm_var.clone() });
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params,
            buffers,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = Model::new(ckpt.config)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.params().iter().map(|(n, _, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected.len() != ckpt.params.len() {
            return Err(Error::Integrity("parameter count mismatch".into()));
        }
        let mut flat = Vec::new();
        for ((name, shape), arr) in expected.iter().zip(&ckpt.params) {
            if &arr.name != name || &arr.shape != shape || arr.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Integrity(format!("parameter {} does not match config", arr.name)));
            }
            flat.extend_from_slice(&arr.data);
        }
        model.set_flat_params(&flat)?;
        if ckpt.buffers.len() != 2 * model.blocks.len() {
            return Err(Error::Integrity("normalization buffer count mismatch".into()));
        }
        for (l, pair) in ckpt.buffers.chunks(2).enumerate() {
            let width = model.config.layer_widths[l];
            if pair[0].data.len() != width || pair[1].data.len() != width {
                return Err(Error::Integrity(format!("block{l} buffers have wrong width")));
            }
            model.blocks[l].norm_mean = pair[0].data.clone();
            model.blocks[l].norm_var = pair[1].data.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON checkpoint: config plus flat parameter and buffer arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    pub buffers: Vec<NamedArray>,
}

/// Per-sample gradient descent on cross-entropy over labeled clean clips.
///
/// Each epoch recalibrates the normalization statistics, then visits the
/// clips in a shuffled order using one randomly sampled view per clip.
/// Training accuracy is measured on deterministic views after a final
/// calibration.
pub fn train_source<R: Rng + ?Sized>(
    model: &mut Model,
    data: &[VideoClip],
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let c = model.config.num_classes;
    let labels = data
        .iter()
        .map(|clip| match clip.ground_truth {
            Some(y) if y < c => Ok(y),
            other => Err(Error::Input(format!("clip {} has label {other:?}, need one in [0, {c})", clip.sample_id))),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = 0.0;
    for _ in 0..epochs {
        model.calibrate(data)?;
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let seg = data[i].num_frames() / SEGMENTS;
            let start = rng.random_range(0..seg);
            let view = data[i].gather(&segment_indices(data[i].num_frames(), start));
            let tape = Tape::new();
            let params = model.bind(&tape);
            let out = model.forward_bound(&tape, &params, &view)?;
            let loss = ops::cross_entropy(out.prediction, labels[i])?;
            epoch_loss += loss.item();
            let grads = loss.backward()?;
            model.apply_gradients(&grads, &params.ids(), lr, ParamSubset::All);
        }
        final_loss = epoch_loss / data.len() as f64;
    }
    model.calibrate(data)?;

    let mut correct = 0;
    for (clip, &y) in data.iter().zip(&labels) {
        if model.predict(clip)? == y {
            correct += 1;
        }
    }
    Ok(TrainReport { epochs, final_accuracy: correct as f64 / data.len() as f64, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            layer_widths: vec![4, 3],
            input_shape: InputShape { t: 16, h: 4, w: 4, c_in: 2 },
            patch: 2,
            seed: 7,
        }
    }

    fn clip_with(t_total: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t_total * 4 * 4 * 2;
        let data = (0..n).map(|_| rng.random::<f64>()).collect();
        VideoClip::new(Tensor::new(vec![t_total, 4, 4, 2], data).unwrap(), format!("clip{seed}"), Some(1)).unwrap()
    }

    #[test]
    fn views_with_sixteen_frames_are_forced() {
        let clip = clip_with(16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs = sample_views(&clip, 3, &mut rng).unwrap();
        for idx in &vs.frame_indices {
            assert_eq!(idx, &(0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn stride_two_indices_from_start_one() {
        assert_eq!(segment_indices(32, 1), (0..16).map(|k| 1 + 2 * k).collect::<Vec<_>>());
        let clip = clip_with(32, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vs = sample_views(&clip, 4, &mut rng).unwrap();
        for idx in &vs.frame_indices {
            assert!(idx[0] < 2);
            assert!(idx.iter().all(|&i| i < 32));
            assert!(idx.windows(2).all(|w| w[1] - w[0] == 2));
        }
    }

    #[test]
    fn view_sampling_is_seed_deterministic() {
        let clip = clip_with(40, 2);
        let a = sample_views(&clip, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_views(&clip, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_clips_and_single_views_are_rejected() {
        let frames = Tensor::zeros(vec![15, 4, 4, 2]);
        assert!(matches!(VideoClip::new(frames, "x", None), Err(Error::Input(_))));
        let clip = clip_with(16, 1);
        assert!(sample_views(&clip, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn clip_values_are_clamped() {
        let frames = Tensor::new(vec![16, 1, 1, 1], (0..16).map(|i| i as f64 - 4.0).collect()).unwrap();
        let clip = VideoClip::new(frames, "c", None).unwrap();
        assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn forward_shapes_and_probabilities() {
        let model = Model::new(small_config()).unwrap();
        let clip = clip_with(16, 4);
        let rec = model.forward(&deterministic_view(&clip)).unwrap();
        assert!((rec.prediction.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let declared = model.config().activation_shapes();
        assert_eq!(rec.layer_activations.len(), declared.len());
        for (a, d) in rec.layer_activations.iter().zip(&declared) {
            assert_eq!(a.shape(), d);
        }
    }

    #[test]
    fn zero_head_gives_uniform_prediction_and_class_zero() {
        let mut model = Model::new(small_config()).unwrap();
        model.zero_head();
        let clip = clip_with(16, 4);
        let p = model.predict_proba(&clip).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(model.predict(&clip).unwrap(), 0);
    }

    #[test]
    fn identical_views_give_identical_records() {
        let model = Model::new(small_config()).unwrap();
        let clip = clip_with(16, 9);
        let v = deterministic_view(&clip);
        assert_eq!(model.forward(&v).unwrap(), model.forward(&v.clone()).unwrap());
        assert_eq!(model.predict(&clip).unwrap(), model.predict(&clip).unwrap());
    }

    #[test]
    fn predict_is_argmax_of_forward() {
        let model = Model::new(small_config()).unwrap();
        for s in 0..5 {
            let clip = clip_with(32, s);
            let rec = model.forward(&deterministic_view(&clip)).unwrap();
            assert_eq!(model.predict(&clip).unwrap(), rec.prediction.argmax());
        }
    }

    #[test]
    fn wrong_view_shape_is_rejected() {
        let model = Model::new(small_config()).unwrap();
        assert!(matches!(model.forward(&Tensor::zeros(vec![16, 4, 4, 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = Model::new(small_config()).unwrap();
        let before = model.flat_params();
        let data: Vec<_> = (0..4).map(|s| clip_with(32, s)).collect();
        train_source(&mut model, &data, 2, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(before, model.flat_params());
    }

    #[test]
    fn empty_training_set_is_an_input_error() {
        let mut model = Model::new(small_config()).unwrap();
        assert!(matches!(
            train_source(&mut model, &[], 1, 0.1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut model = Model::new(small_config()).unwrap();
        let data: Vec<_> = (0..4).map(|s| clip_with(32, s)).collect();
        train_source(&mut model, &data, 1, 0.05, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded, model);
        for clip in &data {
            assert_eq!(
                loaded.predict_proba(clip).unwrap().data(),
                model.predict_proba(clip).unwrap().data()
            );
        }
        assert_eq!(loaded.fingerprint(), model.fingerprint());
    }
}
