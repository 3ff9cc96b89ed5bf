//! Dataset directory layout:
//!
//! ```text
//! manifest.json   spec, class names, per-split ids/labels, SHA-256 of each file
//! train.bin       clip tensors
//! test.bin        clip tensors, in stream order
//! audio.jsonl     audio tags of the test clips
//! ```
//!
//! A `.bin` file is the magic `AVTCLIP1`, a little-endian `u64` clip count,
//! then per clip four `u64` dims `(t, h, w, c)` followed by the `f64` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetSpec};
use crate::audiomap::{load_audio_predictions, save_audio_predictions};
use crate::error::{Error, Result};
use crate::model::VideoClip;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AVTCLIP1";
const FORMAT: &str = "avtta-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitEntry {
    file: String,
    sha256: String,
    sample_ids: Vec<String>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    spec: DatasetSpec,
    class_names: Vec<String>,
    train: SplitEntry,
    test: SplitEntry,
    audio_file: String,
    audio_sha256: String,
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_clips(clips: &[VideoClip]) -> Vec<u8> {
    let payload: usize = clips.iter().map(|c| 32 + 8 * c.frames.len()).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(clips.len() as u64).to_le_bytes());
    for c in clips {
        for &d in c.frames.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in c.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("{} is truncated at byte {}", self.name, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_clips(bytes: &[u8], name: &str, split: &SplitEntry, dims: [usize; 4]) -> Result<Vec<VideoClip>> {
    let mut r = Reader { bytes, pos: 0, name };
    if r.take(8)? != MAGIC {
        return Err(Error::Integrity(format!("{name} has a bad magic header")));
    }
    let count = r.u64()? as usize;
    if count != split.sample_ids.len() || count != split.labels.len() {
        return Err(Error::Integrity(format!("{name} holds {count} clips, manifest lists {}", split.sample_ids.len())));
    }
    let mut clips = Vec::with_capacity(count);
    for (id, &label) in split.sample_ids.iter().zip(&split.labels) {
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            *d = r.u64()? as usize;
        }
        if shape != dims {
            return Err(Error::Integrity(format!("{name}: clip {id} has dims {shape:?}, spec says {dims:?}")));
        }
        let n = dims.iter().product::<usize>();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("clip size overflows".into()))?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Integrity(format!("{name}: clip {id} has values outside [0, 1]")));
        }
        let frames = Tensor::new(shape.to_vec(), data).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
        clips.push(VideoClip::new(frames, id.clone(), Some(label))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{name} has {} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(clips)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_entry(file: &str, bytes: &[u8], clips: &[VideoClip]) -> Result<SplitEntry> {
    Ok(SplitEntry {
        file: file.into(),
        sha256: sha256(bytes),
        sample_ids: clips.iter().map(|c| c.sample_id.clone()).collect(),
        labels: clips
            .iter()
            .map(|c| c.ground_truth.ok_or_else(|| Error::Input(format!("clip {} has no label", c.sample_id))))
            .collect::<Result<_>>()?,
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = encode_clips(&dataset.train);
    let test = encode_clips(&dataset.test);
    write(&dir.join("train.bin"), &train)?;
    write(&dir.join("test.bin"), &test)?;
    let audio_path = dir.join("audio.jsonl");
    save_audio_predictions(&audio_path, dataset.audio.values())?;
    let audio_bytes = std::fs::read(&audio_path).map_err(|e| Error::io(&audio_path, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        spec: dataset.spec.clone(),
        class_names: dataset.class_names.clone(),
        train: split_entry("train.bin", &train, &dataset.train)?,
        test: split_entry("test.bin", &test, &dataset.test)?,
        audio_file: "audio.jsonl".into(),
        audio_sha256: sha256(&audio_bytes),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write(&dir.join("manifest.json"), &json)
}

fn read_checked(dir: &Path, file: &str, expected: &str) -> Result<Vec<u8>> {
    if file.contains(['/', '\\']) || file == ".." {
        return Err(Error::Integrity(format!("manifest file name {file:?} is not a plain name")));
    }
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256(&bytes) != expected {
        return Err(Error::Integrity(format!("checksum mismatch for {file}")));
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Integrity(format!("unsupported dataset format {} v{}", m.format, m.version)));
    }
    m.spec.validate()?;
    if m.class_names.len() != m.spec.num_classes {
        return Err(Error::Integrity("class name count differs from spec".into()));
    }
    let dims = m.spec.clip.dims();
    let train = decode_clips(&read_checked(dir, &m.train.file, &m.train.sha256)?, &m.train.file, &m.train, dims)?;
    let test = decode_clips(&read_checked(dir, &m.test.file, &m.test.sha256)?, &m.test.file, &m.test, dims)?;
    for c in train.iter().chain(&test) {
        if c.ground_truth.is_some_and(|y| y >= m.spec.num_classes) {
            return Err(Error::Integrity(format!("clip {} has an out-of-range label", c.sample_id)));
        }
    }
    read_checked(dir, &m.audio_file, &m.audio_sha256)?;
    let audio = load_audio_predictions(&dir.join(&m.audio_file))?;
    Ok(Dataset { spec: m.spec, class_names: m.class_names, train, test, audio })
}
