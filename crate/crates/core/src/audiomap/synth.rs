use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AudioTopK, MAX_TOPK};
use crate::error::{Error, Result};

/// Uninformative tags used to pad a synthetic top-K list.
pub const GENERIC_AUDIO_LABELS: [&str; 5] = ["Speech", "Inside, small room", "Sound effect", "Music", "Noise"];

// Stems are disjoint across classes and from the generic tags.
const DEFAULT_CLASSES: [(&str, &[&str]); 16] = [
    ("dog barking", &["Bark", "Dog", "Domestic animals, pets", "Bow-wow"]),
    ("lawn mowing", &["Lawn mower", "Mowing", "Grass cutter"]),
    ("drumming", &["Drum", "Drum kit", "Snare drum", "Percussion"]),
    ("wood sanding", &["Sanding", "Wood", "Rub", "Sawing", "Filing (rasp)"]),
    ("frying food", &["Frying (food)", "Sizzle", "Cooking"]),
    ("baby giggling", &["Baby laughter", "Giggle", "Chuckle, chortle"]),
    ("raining", &["Rain", "Raindrop", "Rain on surface"]),
    ("car driving", &["Car", "Vehicle", "Driving"]),
    ("keyboard typing", &["Typing", "Computer keyboard", "Clicking"]),
    ("water diving", &["Splash, splatter", "Water", "Diving"]),
    ("wolf howling", &["Howl", "Wolf", "Canidae, wolves"]),
    ("guitar strumming", &["Guitar", "Strum", "Acoustic guitar"]),
    ("bird singing", &["Bird vocalization", "Bird", "Chirp, tweet"]),
    ("door knocking", &["Knock", "Door", "Tap"]),
    ("crowd cheering", &["Cheering", "Crowd", "Applause"]),
    ("engine idling", &["Idling", "Engine", "Engine starting"]),
];

/// Audio tags associated with each video class, indexed by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioVocab {
    pub classes: Vec<Vec<String>>,
    #[serde(default = "default_generic")]
    pub generic: Vec<String>,
}

fn default_generic() -> Vec<String> {
    GENERIC_AUDIO_LABELS.iter().map(|s| s.to_string()).collect()
}

impl AudioVocab {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.classes.len() < num_classes {
            return Err(Error::config(
                "audio_vocab",
                format!("covers {} classes, need {num_classes}", self.classes.len()),
            ));
        }
        if let Some(c) = self.classes.iter().take(num_classes).position(|v| v.is_empty()) {
            return Err(Error::config("audio_vocab", format!("class {c} has no audio labels")));
        }
        Ok(())
    }
}

/// Built-in class names and tag lists for up to 16 classes.
pub fn default_audio_vocab(num_classes: usize) -> Result<(Vec<String>, AudioVocab)> {
    if num_classes < 2 || num_classes > DEFAULT_CLASSES.len() {
        return Err(Error::config(
            "num_classes",
            format!("built-in vocabulary supports 2..={} classes", DEFAULT_CLASSES.len()),
        ));
    }
    let names = DEFAULT_CLASSES[..num_classes].iter().map(|(n, _)| n.to_string()).collect();
    let classes = DEFAULT_CLASSES[..num_classes]
        .iter()
        .map(|(_, tags)| tags.iter().map(|s| s.to_string()).collect())
        .collect();
    Ok((names, AudioVocab { classes, generic: default_generic() }))
}

/// Simulated audio tagger output for a clip of class `ground_truth`.
///
/// With probability `quality` the leading tags come from the true class,
/// otherwise from a uniformly chosen other class. Generic tags fill the
/// list to `k`. Scores are sorted and normalized to sum to one.
pub fn synth_audio_oracle<R: Rng + ?Sized>(
    sample_id: &str,
    ground_truth: usize,
    quality: f64,
    vocab: &AudioVocab,
    k: usize,
    rng: &mut R,
) -> Result<AudioTopK> {
    let c = vocab.classes.len();
    if ground_truth >= c {
        return Err(Error::config("audio_vocab", format!("no audio labels for class {ground_truth}")));
    }
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::config("audio_quality", format!("must lie in [0, 1], got {quality}")));
    }
    if k == 0 || k > MAX_TOPK {
        return Err(Error::config("topk", format!("must lie in 1..={MAX_TOPK}")));
    }
    let source = if c < 2 || rng.random::<f64>() < quality {
        ground_truth
    } else {
        let other = rng.random_range(0..c - 1);
        if other >= ground_truth { other + 1 } else { other }
    };
    let mut tags = vocab.classes[source].clone();
    if tags.is_empty() {
        return Err(Error::config("audio_vocab", format!("class {source} has no audio labels")));
    }
    tags.shuffle(rng);
    tags.truncate(k);
    let mut generic = vocab.generic.clone();
    generic.shuffle(rng);
    for g in generic {
        if tags.len() == k {
            break;
        }
        if !tags.contains(&g) {
            tags.push(g);
        }
    }
    let mut probs: Vec<f64> = (0..tags.len()).map(|_| rng.random_range(0.05..1.0)).collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = probs.iter().sum();
    let entries = tags.into_iter().zip(probs.into_iter().map(|p| (p / total).min(1.0))).collect();
    AudioTopK::new(sample_id, entries)
}
