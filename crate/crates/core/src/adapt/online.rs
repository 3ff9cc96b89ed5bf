use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ensemble_predict, select_filter, AdaptationRecord, Adapter};
use crate::audiomap::{AudioTopK, LabelMapper, Mailbox};
use crate::error::{Error, Result};
use crate::model::{sample_views, VideoClip};

/// Supplies pseudo labels in stream order. `next` is called exactly once
/// per sample, whether or not the label ends up being used.
pub trait PseudoSource {
    fn next(&mut self, clip: &VideoClip) -> Result<Option<usize>>;
}

/// Never provides a label.
pub struct NoLabels;

impl PseudoSource for NoLabels {
    fn next(&mut self, _: &VideoClip) -> Result<Option<usize>> {
        Ok(None)
    }
}

/// Uses the clip's ground truth.
pub struct OracleLabels;

impl PseudoSource for OracleLabels {
    fn next(&mut self, clip: &VideoClip) -> Result<Option<usize>> {
        Ok(clip.ground_truth)
    }
}

/// Precomputed labels keyed by sample id; unknown ids get none.
pub struct FixedLabels(pub BTreeMap<String, Option<usize>>);

impl PseudoSource for FixedLabels {
    fn next(&mut self, clip: &VideoClip) -> Result<Option<usize>> {
        Ok(self.0.get(&clip.sample_id).copied().flatten())
    }
}

/// Maps each sample's audio tags synchronously.
pub struct MapperLabels<'a> {
    pub mapper: &'a dyn LabelMapper,
    pub audio: &'a BTreeMap<String, AudioTopK>,
}

impl PseudoSource for MapperLabels<'_> {
    fn next(&mut self, clip: &VideoClip) -> Result<Option<usize>> {
        Ok(self.audio.get(&clip.sample_id).and_then(|a| self.mapper.map(a).label()))
    }
}

/// Reads labels resolved ahead of time on a background thread.
pub struct MailboxLabels(pub Mailbox);

impl PseudoSource for MailboxLabels {
    fn next(&mut self, clip: &VideoClip) -> Result<Option<usize>> {
        Ok(self.0.take(&clip.sample_id)?.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineMetrics {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Samples that received a usable pseudo label.
    pub pseudo_used: usize,
    /// Of those, how many matched the ground truth.
    pub pseudo_correct: usize,
    pub aborted: usize,
    pub mean_steps: f64,
    /// `steps_histogram[n]` counts samples adapted for `n` steps.
    pub steps_histogram: Vec<usize>,
    pub records: Vec<AdaptationRecord>,
}

impl OnlineMetrics {
    fn from_records(records: Vec<AdaptationRecord>, tau: usize) -> Result<Self> {
        let mut correct = 0;
        let mut hist = vec![0; tau + 1];
        let (mut pseudo_used, mut pseudo_correct, mut aborted) = (0, 0, 0);
        for r in &records {
            let gt = r
                .ground_truth
                .ok_or_else(|| Error::Input(format!("sample {:?} has no ground truth", r.sample_id)))?;
            correct += usize::from(r.final_prediction == gt);
            hist[r.steps_used.min(tau)] += 1;
            if let Some(p) = r.pseudo_label {
                pseudo_used += 1;
                pseudo_correct += usize::from(p == gt);
            }
            aborted += usize::from(r.aborted);
        }
        let total = records.len();
        let steps: usize = records.iter().map(|r| r.steps_used).sum();
        Ok(Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            pseudo_used,
            pseudo_correct,
            aborted,
            mean_steps: if total == 0 { 0.0 } else { steps as f64 / total as f64 },
            steps_histogram: hist,
            records,
        })
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const VIEW_STREAM: u64 = 1;
const AVAILABILITY_STREAM: u64 = 2;

struct Gate<'a> {
    labels: &'a mut dyn PseudoSource,
    availability: f64,
    rng: ChaCha8Rng,
}

impl Gate<'_> {
    /// One availability draw per sample keeps the random stream aligned
    /// across runs that differ only in `availability`.
    fn next(&mut self, clip: &VideoClip) -> Result<Option<usize>> {
        let label = self.labels.next(clip)?;
        let u: f64 = self.rng.random();
        Ok(label.filter(|_| u < self.availability))
    }
}

fn check_availability(availability: f64) -> Result<()> {
    if (0.0..=1.0).contains(&availability) {
        Ok(())
    } else {
        Err(Error::config("availability", format!("must lie in [0, 1], got {availability}")))
    }
}

fn select(adapter: &Adapter, pseudo: Option<usize>, probs: &[f64]) -> Option<usize> {
    let cfg = adapter.config();
    let k = cfg.effective_k(probs.len());
    pseudo.filter(|&p| !cfg.use_select || select_filter(p, probs, k))
}

/// Adapts on each sample, then predicts it.
///
/// Each label is kept with probability `availability`. Views and
/// availability draws come from separate streams seeded by `seed`.
pub fn run_online(
    adapter: &mut Adapter,
    stream: &[VideoClip],
    labels: &mut dyn PseudoSource,
    availability: f64,
    seed: u64,
) -> Result<OnlineMetrics> {
    check_availability(availability)?;
    if adapter.config().reset_per_run {
        adapter.reset();
    }
    let mut view_rng = stream_rng(seed, VIEW_STREAM);
    let mut gate = Gate { labels, availability, rng: stream_rng(seed, AVAILABILITY_STREAM) };
    let m = adapter.config().m_views;
    let mut records = Vec::with_capacity(stream.len());
    for clip in stream {
        let available = gate.next(clip)?;
        let pseudo = if adapter.config().use_select && available.is_some() {
            select(adapter, available, adapter.model().predict_proba(clip)?.data())
        } else {
            available
        };
        let views = sample_views(clip, m, &mut view_rng)?;
        let mut record = adapter.adapt_sample(clip, &views, pseudo)?;
        if adapter.config().use_ensemble {
            let cfg = adapter.config();
            let probs = adapter.model().predict_proba(clip)?;
            record.final_prediction =
                ensemble_predict(probs.data(), available, cfg.theta, cfg.effective_k(probs.len()));
        }
        records.push(record);
    }
    OnlineMetrics::from_records(records, adapter.config().tau)
}

/// Predicts each sample on arrival and adapts on buffered samples every
/// `s` arrivals. Samples left in the buffer at the end are adapted but
/// affect no prediction.
pub fn run_delayed(
    adapter: &mut Adapter,
    stream: &[VideoClip],
    labels: &mut dyn PseudoSource,
    availability: f64,
    seed: u64,
) -> Result<OnlineMetrics> {
    check_availability(availability)?;
    let s = adapter.config().s;
    if s == 0 {
        return Err(Error::config("s", "delayed updates need a window of at least 1"));
    }
    if adapter.config().reset_per_run {
        adapter.reset();
    }
    let mut view_rng = stream_rng(seed, VIEW_STREAM);
    let mut gate = Gate { labels, availability, rng: stream_rng(seed, AVAILABILITY_STREAM) };
    let m = adapter.config().m_views;
    let mut records = Vec::with_capacity(stream.len());
    let mut buffer: Vec<(&VideoClip, Vec<f64>)> = Vec::with_capacity(s);

    let mut flush = |adapter: &mut Adapter, buffer: &mut Vec<(&VideoClip, Vec<f64>)>| -> Result<()> {
        for (clip, probs) in buffer.drain(..) {
            let arrival = crate::tensor::argmax(&probs);
            let pseudo = select(adapter, gate.next(clip)?, &probs);
            let views = sample_views(clip, m, &mut view_rng)?;
            let mut record = adapter.adapt_sample(clip, &views, pseudo)?;
            record.pred_before = arrival;
            record.final_prediction = arrival;
            records.push(record);
        }
        Ok(())
    };

    for clip in stream {
        let probs = adapter.model().predict_proba(clip)?.into_data();
        buffer.push((clip, probs));
        if buffer.len() == s {
            flush(adapter, &mut buffer)?;
        }
    }
    flush(adapter, &mut buffer)?;
    OnlineMetrics::from_records(records, adapter.config().tau)
}
