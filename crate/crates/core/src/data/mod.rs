//! Synthetic paired audio-video benchmark.
//!
//! Each class owns a random spatial prototype and a sinusoidal brightness
//! modulation over time. Clips add per-sample phase jitter and pixel noise.
//! Every test clip gets simulated audio tags whose informativeness is set by
//! `audio_quality`.

mod corrupt;
mod io;

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audiomap::{default_audio_vocab, synth_audio_oracle, AudioTopK, AudioVocab, VideoLabelSpace, DEFAULT_TOPK};
use crate::error::{Error, Result};
use crate::model::{VideoClip, SEGMENTS};
use crate::tensor::Tensor;

pub use corrupt::{corrupt, corrupt_stream, corrupt_with_param, severity_param, CorruptionKind, CorruptionSpec};
pub use io::{load_dataset, save_dataset};

const SEPARATION_ATTEMPTS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipShape {
    pub t_total: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
}

impl ClipShape {
    pub fn len(&self) -> usize {
        self.t_total * self.h * self.w * self.c_in
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t_total, self.h, self.w, self.c_in]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub clip: ClipShape,
    /// Spread of prototype pixel values around 0.5.
    pub prototype_scale: f64,
    /// Standard deviation of per-pixel noise.
    pub noise_scale: f64,
    /// Relative amplitude of the temporal modulation.
    pub modulation: f64,
    /// Standard deviation of the per-clip modulation phase, in radians.
    pub phase_jitter: f64,
    /// Class names; defaults to the built-in vocabulary.
    pub class_names: Option<Vec<String>>,
    /// Audio tags per class; defaults to the built-in vocabulary.
    pub audio_vocab: Option<AudioVocab>,
    /// Probability that a clip's audio tags describe its true class.
    pub audio_quality: f64,
    pub topk: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 16,
            test_per_class: 16,
            clip: ClipShape { t_total: 32, h: 8, w: 8, c_in: 3 },
            prototype_scale: 0.6,
            noise_scale: 0.1,
            modulation: 0.3,
            phase_jitter: 0.5,
            class_names: None,
            audio_vocab: None,
            audio_quality: 0.8,
            topk: DEFAULT_TOPK,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("dataset.num_classes", "must be at least 2"));
        }
        if self.train_per_class < 1 || self.test_per_class < 1 {
            return Err(Error::config("dataset.train_per_class", "train and test counts must be at least 1"));
        }
        let c = self.clip;
        if c.t_total < SEGMENTS || c.h == 0 || c.w == 0 || c.c_in == 0 {
            return Err(Error::config("dataset.clip", format!("need t_total >= {SEGMENTS} and nonzero h, w, c_in")));
        }
        for (name, v) in [
            ("dataset.prototype_scale", self.prototype_scale),
            ("dataset.noise_scale", self.noise_scale),
            ("dataset.modulation", self.modulation),
            ("dataset.phase_jitter", self.phase_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.audio_quality) {
            return Err(Error::config("dataset.audio_quality", "must lie in [0, 1]"));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::config("dataset.class_names", "need one name per class"));
            }
            VideoLabelSpace::new(names.iter().cloned())
                .map_err(|e| Error::config("dataset.class_names", e.to_string()))?;
        }
        if let Some(v) = &self.audio_vocab {
            v.validate(self.num_classes)?;
        }
        if self.class_names.is_none() || self.audio_vocab.is_none() {
            default_audio_vocab(self.num_classes)?;
        }
        Ok(())
    }

    /// Class names and audio vocabulary, falling back to the built-in ones.
    pub fn resolved_vocab(&self) -> Result<(Vec<String>, AudioVocab)> {
        let defaults = default_audio_vocab(self.num_classes);
        let names = match &self.class_names {
            Some(n) => n.clone(),
            None => defaults.as_ref().map_err(|e| Error::config("dataset.class_names", e.to_string()))?.0.clone(),
        };
        let vocab = match &self.audio_vocab {
            Some(v) => v.clone(),
            None => defaults.map_err(|e| Error::config("dataset.audio_vocab", e.to_string()))?.1,
        };
        Ok((names, vocab))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub train: Vec<VideoClip>,
    /// Test clips in stream order.
    pub test: Vec<VideoClip>,
    /// Audio tags of every test clip, keyed by sample id.
    pub audio: BTreeMap<String, AudioTopK>,
}

impl Dataset {
    pub fn label_space(&self) -> Result<VideoLabelSpace> {
        VideoLabelSpace::new(self.class_names.iter().cloned())
    }
}

struct ClassPattern {
    prototype: Vec<f64>,
    freq: f64,
    phase: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn min_separation(patterns: &[ClassPattern]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in patterns.iter().enumerate() {
        for b in &patterns[i + 1..] {
            let d = a.prototype.iter().zip(&b.prototype).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

fn class_patterns(spec: &DatasetSpec, seed: u64) -> Vec<ClassPattern> {
    let mut rng = stream(seed, 0);
    let frame = spec.clip.h * spec.clip.w * spec.clip.c_in;
    (0..spec.num_classes)
        .map(|_| ClassPattern {
            prototype: (0..frame).map(|_| 0.5 + spec.prototype_scale * (rng.random::<f64>() - 0.5)).collect(),
            freq: rng.random_range(1..=3) as f64,
            phase: rng.random::<f64>() * TAU,
        })
        .collect()
}

fn make_clip<R: Rng + ?Sized>(spec: &DatasetSpec, p: &ClassPattern, id: String, label: usize, rng: &mut R) -> Result<VideoClip> {
    let s = spec.clip;
    let frame = s.h * s.w * s.c_in;
    let jitter = if spec.phase_jitter > 0.0 {
        Normal::new(0.0, spec.phase_jitter).expect("positive std").sample(rng)
    } else {
        0.0
    };
    let noise = (spec.noise_scale > 0.0).then(|| Normal::new(0.0, spec.noise_scale).expect("positive std"));
    let mut data = Vec::with_capacity(s.len());
    for t in 0..s.t_total {
        let m = 1.0 + spec.modulation * (TAU * p.freq * t as f64 / s.t_total as f64 + p.phase + jitter).sin();
        for &v in &p.prototype {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            data.push(v * m + n);
        }
    }
    debug_assert_eq!(data.len(), s.t_total * frame);
    VideoClip::new(Tensor::new(s.dims().to_vec(), data)?, id, Some(label))
}

/// Generates train and test splits plus test-clip audio tags.
///
/// If two class prototypes lie closer than `4 * noise_scale`, generation is
/// retried with the next seed, up to ten times.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (class_names, vocab) = spec.resolved_vocab()?;
    let mut found = None;
    for attempt in 0..SEPARATION_ATTEMPTS {
        let seed = spec.seed.wrapping_add(attempt);
        let patterns = class_patterns(spec, seed);
        if min_separation(&patterns) > 4.0 * spec.noise_scale {
            found = Some((seed, patterns));
            break;
        }
        log::debug!("class prototypes too close with seed {seed}; retrying");
    }
    let (seed, patterns) = found.ok_or_else(|| {
        Error::Validation(format!("class prototypes not separated after {SEPARATION_ATTEMPTS} attempts"))
    })?;

    let mut clip_rng = stream(seed, 1);
    let mut order_rng = stream(seed, 2);
    let mut audio_rng = stream(seed, 3);

    let mut train = Vec::with_capacity(spec.num_classes * spec.train_per_class);
    for i in 0..spec.train_per_class {
        for (c, p) in patterns.iter().enumerate() {
            let id = format!("train-{:05}", i * spec.num_classes + c);
            train.push(make_clip(spec, p, id, c, &mut clip_rng)?);
        }
    }
    let mut labels: Vec<usize> = (0..spec.test_per_class).flat_map(|_| 0..spec.num_classes).collect();
    labels.shuffle(&mut order_rng);
    let mut test = Vec::with_capacity(labels.len());
    let mut audio = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        let id = format!("test-{i:05}");
        let tags = synth_audio_oracle(&id, c, spec.audio_quality, &vocab, spec.topk, &mut audio_rng)?;
        audio.insert(id.clone(), tags);
        test.push(make_clip(spec, &patterns[c], id, c, &mut clip_rng)?);
    }
    Ok(Dataset { spec: spec.clone(), class_names, train, test, audio })
}
