//! Mapping top-K audio tags onto a video label space.
//!
//! Three mappers are provided: a chat-completion backed mapper, a
//! deterministic lexical mapper that needs no network, and replay from a
//! mapping cache. All of them resolve free text through [`resolve_label`].

mod labeler;
mod lexical;
mod llm;
mod prompt;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use labeler::{LabelMapper, LexicalMapper, LlmMapper, Mailbox, ReplayMapper};
pub use lexical::{map_via_lexical, similarity, stems};
pub use llm::{map_via_llm, prompt_hash, CacheEntry, ChatClient, FixtureClient, HttpChatClient, LlmConfig, MappingCache};
pub use prompt::{build_prompt, build_prompt_with, PromptBundle, PromptTemplate};
pub use synth::{default_audio_vocab, synth_audio_oracle, AudioVocab, GENERIC_AUDIO_LABELS};

/// Largest supported K.
pub const MAX_TOPK: usize = 10;
/// Default number of audio tags passed to a mapper.
pub const DEFAULT_TOPK: usize = 5;

/// One audio tag and its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEntry {
    pub label: String,
    pub prob: f64,
}

/// The K highest-scoring audio tags of one sample, sorted by score.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTopK {
    sample_id: String,
    entries: Vec<AudioEntry>,
}

impl AudioTopK {
    pub fn new(sample_id: impl Into<String>, entries: Vec<(String, f64)>) -> Result<Self> {
        let sample_id = sample_id.into();
        let entries: Vec<AudioEntry> = entries.into_iter().map(|(label, prob)| AudioEntry { label, prob }).collect();
        validate_entries(&entries).map_err(|m| Error::Validation(format!("sample {sample_id:?}: {m}")))?;
        Ok(Self { sample_id, entries })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn entries(&self) -> &[AudioEntry] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    /// Keeps the first `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.clamp(1, self.entries.len());
        Self { sample_id: self.sample_id.clone(), entries: self.entries[..k].to_vec() }
    }
}

fn validate_entries(entries: &[AudioEntry]) -> std::result::Result<(), String> {
    if entries.is_empty() || entries.len() > MAX_TOPK {
        return Err(format!("K must lie in 1..={MAX_TOPK}, got {}", entries.len()));
    }
    let mut seen = HashSet::new();
    for (i, e) in entries.iter().enumerate() {
        if e.label.trim().is_empty() {
            return Err(format!("entry {i} has an empty label"));
        }
        if !seen.insert(e.label.as_str()) {
            return Err(format!("duplicate label {:?}", e.label));
        }
        if !(0.0..=1.0).contains(&e.prob) {
            return Err(format!("probability {} of {:?} is outside [0, 1]", e.prob, e.label));
        }
        if i > 0 && e.prob > entries[i - 1].prob {
            return Err(format!("probabilities are not sorted at entry {i}"));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AudioLine {
    sample_id: String,
    topk: Vec<(String, f64)>,
}

/// Reads `{"sample_id": ..., "topk": [[label, prob], ...]}` lines.
pub fn load_audio_predictions(path: &Path) -> Result<BTreeMap<String, AudioTopK>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let raw: AudioLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let topk = AudioTopK::new(raw.sample_id, raw.topk)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if out.contains_key(topk.sample_id()) {
            return Err(parse_err(format!("duplicate sample_id {:?}", topk.sample_id())));
        }
        out.insert(topk.sample_id().to_string(), topk);
    }
    Ok(out)
}

pub fn save_audio_predictions<'a>(path: &Path, items: impl IntoIterator<Item = &'a AudioTopK>) -> Result<()> {
    let mut buf = Vec::new();
    for a in items {
        let line = AudioLine {
            sample_id: a.sample_id.clone(),
            topk: a.entries.iter().map(|e| (e.label.clone(), e.prob)).collect(),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Case-fold, trim, collapse internal whitespace.
pub fn normalize_label(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Ordered set of video class names.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLabelSpace {
    labels: Vec<String>,
    normalized: Vec<String>,
    index: HashMap<String, usize>,
}

impl VideoLabelSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Input("video label space is empty".into()));
        }
        let mut index = HashMap::new();
        let mut normalized = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let n = normalize_label(l);
            if n.is_empty() {
                return Err(Error::Input(format!("label {i} is blank")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate label {l:?}")));
            }
            normalized.push(n);
        }
        Ok(Self { labels, normalized, index })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_label(name)).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingSource {
    Llm,
    Lexical,
    Fixture,
}

/// Outcome of mapping one sample. `valid` holds exactly when `class_index`
/// points into the label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingResult {
    pub raw_reply: String,
    pub resolved_label: Option<String>,
    pub class_index: Option<usize>,
    pub valid: bool,
    pub source: MappingSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MappingResult {
    pub fn resolved(raw_reply: String, space: &VideoLabelSpace, source: MappingSource) -> Self {
        let class_index = resolve_label(&raw_reply, space);
        Self {
            resolved_label: class_index.map(|i| space.labels[i].clone()),
            class_index,
            valid: class_index.is_some(),
            raw_reply,
            source,
            note: None,
        }
    }

    pub fn invalid(raw_reply: String, source: MappingSource, note: impl Into<String>) -> Self {
        Self { raw_reply, resolved_label: None, class_index: None, valid: false, source, note: Some(note.into()) }
    }

    pub fn label(&self) -> Option<usize> {
        if self.valid {
            self.class_index
        } else {
            None
        }
    }
}

fn strip_wrapping(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '(' && c != ')') || "“”‘’«»".contains(c))
}

/// Resolves free text to a class index.
///
/// Exact match after normalization first. Otherwise, the reply resolves
/// only if exactly one label occurs in it on token boundaries.
pub fn resolve_label(reply: &str, space: &VideoLabelSpace) -> Option<usize> {
    let cleaned = normalize_label(strip_wrapping(&reply.to_lowercase()));
    if cleaned.is_empty() {
        return None;
    }
    if let Some(&i) = space.index.get(&cleaned) {
        return Some(i);
    }
    let tokens: Vec<&str> = cleaned.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
    let mut found = None;
    for (i, label) in space.normalized.iter().enumerate() {
        let lt: Vec<&str> = label.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        if lt.is_empty() || lt.len() > tokens.len() {
            continue;
        }
        if tokens.windows(lt.len()).any(|w| w == lt.as_slice()) {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        }
    }
    found
}
