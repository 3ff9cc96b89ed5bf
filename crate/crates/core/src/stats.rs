//! Feature statistics: pooled training statistics, a running test-time
//! estimate, and the L1 alignment loss between the two.

use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{deterministic_view, ForwardRecord, Model, VideoClip};
use crate::tensor::ops::{self, channel_moments};
use crate::tensor::{Tape, Tensor, Var};

/// Per-channel mean and population variance of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Layer id used in serialized statistics.
pub fn layer_id(index: usize) -> String {
    format!("layer{index}")
}

fn parse_layer_id(id: &str) -> Option<usize> {
    id.strip_prefix("layer")?.parse().ok()
}

/// Statistics pooled over every `(t, h, w)` position of every training clip,
/// for an ordered set of instrumented layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub layers: Vec<usize>,
    pub stats: Vec<LayerStats>,
}

impl TrainStats {
    pub fn get(&self, layer: usize) -> Option<&LayerStats> {
        self.layers.iter().position(|&l| l == layer).map(|i| &self.stats[i])
    }

    pub fn validate_against(&self, model: &Model) -> Result<()> {
        let widths = &model.config().layer_widths;
        for (&l, s) in self.layers.iter().zip(&self.stats) {
            let Some(&w) = widths.get(l) else {
                return Err(Error::Contract(format!("{} is not a model layer", layer_id(l))));
            };
            if s.mean.len() != w || s.var.len() != w {
                return Err(Error::Contract(format!("{} has {w} channels", layer_id(l))));
            }
            if s.var.iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(format!("{} has a negative variance", layer_id(l))));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

impl Serialize for TrainStats {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.layers.len()))?;
        for (&l, s) in self.layers.iter().zip(&self.stats) {
            map.serialize_entry(&layer_id(l), s)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for TrainStats {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct OrderedLayers;

        impl<'de> Visitor<'de> for OrderedLayers {
            type Value = TrainStats;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of layer ids to {mean, var}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<TrainStats, A::Error> {
                let mut layers = Vec::new();
                let mut stats = Vec::new();
                while let Some((key, value)) = access.next_entry::<String, LayerStats>()? {
                    let index = parse_layer_id(&key)
                        .ok_or_else(|| serde::de::Error::custom(format!("bad layer id {key:?}")))?;
                    if layers.contains(&index) {
                        return Err(serde::de::Error::custom(format!("duplicate layer id {key:?}")));
                    }
                    if value.mean.len() != value.var.len() {
                        return Err(serde::de::Error::custom(format!("{key}: mean/var lengths differ")));
                    }
                    layers.push(index);
                    stats.push(value);
                }
                Ok(TrainStats { layers, stats })
            }
        }

        deserializer.deserialize_map(OrderedLayers)
    }
}

/// Pools the deterministic-view activations of `clips` per layer.
pub fn compute_train_stats(model: &Model, clips: &[VideoClip], layers: &[usize]) -> Result<TrainStats> {
    if clips.is_empty() {
        return Err(Error::Input("cannot compute training statistics of an empty dataset".into()));
    }
    check_layers(model, layers)?;
    let records = clips
        .iter()
        .map(|clip| model.forward(&deterministic_view(clip)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainStats { layers: layers.to_vec(), stats: pooled_stats(&records, layers) })
}

fn check_layers(model: &Model, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Contract("layer set is empty".into()));
    }
    for &l in layers {
        if l >= model.num_layers() {
            return Err(Error::Contract(format!("{} is not a model layer", layer_id(l))));
        }
    }
    Ok(())
}

/// Per-layer moments over all positions of all records, as if their
/// activations were concatenated.
pub fn pooled_stats(records: &[ForwardRecord], layers: &[usize]) -> Vec<LayerStats> {
    layers
        .iter()
        .map(|&l| {
            let c = records[0].layer_activations[l].shape()[0];
            let mut joined: Vec<Vec<f64>> = vec![Vec::new(); c];
            for r in records {
                let a = &r.layer_activations[l];
                let n = a.len() / c;
                for (ch, dst) in joined.iter_mut().enumerate() {
                    dst.extend_from_slice(&a.data()[ch * n..(ch + 1) * n]);
                }
            }
            let flat: Vec<f64> = joined.concat();
            let (mean, var) = channel_moments(&flat, c);
            LayerStats { mean, var }
        })
        .collect()
}

/// Exponential moving average of test-time batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatsTracker {
    momentum: f64,
    layers: Vec<usize>,
    count: usize,
    running: Option<Vec<LayerStats>>,
}

impl TestStatsTracker {
    pub fn new(layers: Vec<usize>, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::config("momentum_stats", format!("must lie in (0, 1], got {momentum}")));
        }
        Ok(Self { momentum, layers, count: 0, running: None })
    }

    pub fn for_train_stats(train: &TrainStats, momentum: f64) -> Result<Self> {
        Self::new(train.layers.clone(), momentum)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Number of batches folded in so far.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn running(&self) -> Option<&[LayerStats]> {
        self.running.as_deref()
    }

    /// Folds in the pooled statistics of the current views.
    pub fn update(&mut self, records: &[ForwardRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::Contract("no forward records to update statistics from".into()));
        }
        for r in records {
            if let Some(&l) = self.layers.iter().find(|&&l| l >= r.layer_activations.len()) {
                return Err(Error::Contract(format!("record has no {}", layer_id(l))));
            }
        }
        let batch = pooled_stats(records, &self.layers);
        self.commit(batch)
    }

    /// `running <- (1 - m) running + m batch`; the first batch is copied.
    pub fn commit(&mut self, batch: Vec<LayerStats>) -> Result<()> {
        if batch.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "batch has {} layers, tracker has {}",
                batch.len(),
                self.layers.len()
            )));
        }
        let m = self.momentum;
        match &mut self.running {
            None => self.running = Some(batch),
            Some(running) => {
                for (r, b) in running.iter_mut().zip(&batch) {
                    if r.mean.len() != b.mean.len() {
                        return Err(Error::Contract("channel count changed between batches".into()));
                    }
                    for (x, y) in r.mean.iter_mut().zip(&b.mean) {
                        *x = (1.0 - m) * *x + m * y;
                    }
                    for (x, y) in r.var.iter_mut().zip(&b.var) {
                        *x = (1.0 - m) * *x + m * y;
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Differentiable batch statistics: per tracked layer, the activations of
    /// all views are pooled and reduced to channel mean and variance.
    /// `activations[v][l]` is view `v`'s map for model layer `l`.
    pub fn batch_stats_on_tape<'t>(&self, activations: &[Vec<Var<'t>>]) -> Result<Vec<(Var<'t>, Var<'t>)>> {
        if activations.is_empty() {
            return Err(Error::Contract("no views".into()));
        }
        self.layers
            .iter()
            .map(|&l| {
                let parts = activations
                    .iter()
                    .map(|view| {
                        view.get(l)
                            .copied()
                            .ok_or_else(|| Error::Contract(format!("view has no {}", layer_id(l))))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let joined = ops::concat_channels(&parts)?;
                ops::mean_var(joined)
            })
            .collect()
    }

    /// The running estimate the loss sees once `batch` is folded in: the
    /// batch term carries gradient, the history is a constant.
    pub fn blend_on_tape<'t>(&self, tape: &'t Tape, batch: &[(Var<'t>, Var<'t>)]) -> Result<Vec<(Var<'t>, Var<'t>)>> {
        if batch.len() != self.layers.len() {
            return Err(Error::Contract("batch/tracker layer mismatch".into()));
        }
        let Some(running) = &self.running else {
            return Ok(batch.to_vec());
        };
        let m = self.momentum;
        batch
            .iter()
            .zip(running)
            .map(|(&(bm, bv), r)| {
                let hist_m = tape.constant(Tensor::vector(r.mean.iter().map(|x| (1.0 - m) * x).collect()));
                let hist_v = tape.constant(Tensor::vector(r.var.iter().map(|x| (1.0 - m) * x).collect()));
                Ok((ops::add(ops::scale(bm, m), hist_m)?, ops::add(ops::scale(bv, m), hist_v)?))
            })
            .collect()
    }
}

/// `sum_l |mu_l - mu_hat_l|_1 + |var_l - var_hat_l|_1` on the tape.
pub fn align_loss<'t>(tape: &'t Tape, current: &[(Var<'t>, Var<'t>)], layers: &[usize], train: &TrainStats) -> Result<Var<'t>> {
    if current.len() != layers.len() || layers != train.layers.as_slice() {
        return Err(Error::Contract(format!(
            "aligned layers {layers:?} do not match training statistics {:?}",
            train.layers
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (&(m, v), s) in current.iter().zip(&train.stats) {
        let dm = ops::l1_distance(m, tape.constant(Tensor::vector(s.mean.clone())))?;
        let dv = ops::l1_distance(v, tape.constant(Tensor::vector(s.var.clone())))?;
        let term = ops::add(dm, dv)?;
        total = Some(match total {
            None => term,
            Some(t) => ops::add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::Contract("no layers to align".into()))
}

/// Plain-value version of [`align_loss`].
pub fn align_distance(current: &[LayerStats], train: &TrainStats) -> Result<f64> {
    if current.len() != train.stats.len() {
        return Err(Error::Contract("layer count mismatch".into()));
    }
    let mut total = 0.0;
    for (c, t) in current.iter().zip(&train.stats) {
        if c.mean.len() != t.mean.len() || c.var.len() != t.var.len() {
            return Err(Error::Contract("channel count mismatch".into()));
        }
        total += c.mean.iter().zip(&t.mean).map(|(a, b)| (a - b).abs()).sum::<f64>();
        total += c.var.iter().zip(&t.var).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total)
}
