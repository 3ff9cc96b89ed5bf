use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::{
    build_prompt_with, map_via_lexical, prompt_hash, AudioTopK, CacheEntry, ChatClient, MappingCache, MappingResult,
    MappingSource, PromptTemplate, VideoLabelSpace,
};
use crate::error::{Error, Result};

/// Maps one sample's audio tags to a pseudo label.
pub trait LabelMapper: Send + Sync {
    fn map(&self, audio: &AudioTopK) -> MappingResult;
}

pub struct LexicalMapper {
    space: VideoLabelSpace,
}

impl LexicalMapper {
    pub fn new(space: VideoLabelSpace) -> Self {
        Self { space }
    }
}

impl LabelMapper for LexicalMapper {
    fn map(&self, audio: &AudioTopK) -> MappingResult {
        map_via_lexical(&self.space, audio)
    }
}

/// Chat-completion mapper. Replies that arrive are recorded in the cache,
/// and cached replies are reused when the prompt hash still matches.
pub struct LlmMapper {
    space: VideoLabelSpace,
    template: PromptTemplate,
    client: Box<dyn ChatClient>,
    cache: Mutex<MappingCache>,
}

impl LlmMapper {
    pub fn new(space: VideoLabelSpace, template: PromptTemplate, client: Box<dyn ChatClient>, cache: MappingCache) -> Self {
        Self { space, template, client, cache: Mutex::new(cache) }
    }
}

impl LabelMapper for LlmMapper {
    fn map(&self, audio: &AudioTopK) -> MappingResult {
        let prompt = match build_prompt_with(&self.template, &self.space, audio) {
            Ok(p) => p,
            Err(e) => return MappingResult::invalid(String::new(), MappingSource::Llm, e.to_string()),
        };
        let hash = prompt_hash(&prompt);
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(hit) = cache.lookup(audio.sample_id(), &hash) {
            return MappingResult::resolved(hit.raw_reply.clone(), &self.space, MappingSource::Llm);
        }
        drop(cache);
        match self.client.complete(&prompt.render()) {
            Ok(reply) => {
                let result = MappingResult::resolved(reply.trim().to_string(), &self.space, MappingSource::Llm);
                let entry = CacheEntry {
                    sample_id: audio.sample_id().to_string(),
                    prompt_hash: hash,
                    raw_reply: result.raw_reply.clone(),
                    resolved_label: result.resolved_label.clone(),
                };
                cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
                if let Err(e) = cache.append(entry) {
                    log::warn!("mapping cache write failed: {e}");
                }
                result
            }
            Err(e) => MappingResult::invalid(String::new(), MappingSource::Llm, e.to_string()),
        }
    }
}

/// Offline replay of a mapping cache. Missing or stale entries are invalid.
pub struct ReplayMapper {
    space: VideoLabelSpace,
    template: PromptTemplate,
    cache: MappingCache,
}

impl ReplayMapper {
    pub fn new(space: VideoLabelSpace, template: PromptTemplate, cache: MappingCache) -> Self {
        Self { space, template, cache }
    }
}

impl LabelMapper for ReplayMapper {
    fn map(&self, audio: &AudioTopK) -> MappingResult {
        let hash = match build_prompt_with(&self.template, &self.space, audio) {
            Ok(p) => prompt_hash(&p),
            Err(e) => return MappingResult::invalid(String::new(), MappingSource::Fixture, e.to_string()),
        };
        match self.cache.lookup(audio.sample_id(), &hash) {
            Some(hit) => MappingResult::resolved(hit.raw_reply.clone(), &self.space, MappingSource::Fixture),
            None => MappingResult::invalid(String::new(), MappingSource::Fixture, "no cached reply for this prompt"),
        }
    }
}

/// Maps samples on a background thread ahead of the consumer. Results come
/// out in submission order.
pub struct Mailbox {
    rx: Receiver<(String, MappingResult)>,
    worker: Option<JoinHandle<()>>,
}

impl Mailbox {
    /// `jobs` pairs each sample id with its audio tags, if any.
    pub fn spawn(mapper: Arc<dyn LabelMapper>, jobs: Vec<(String, Option<AudioTopK>)>) -> Self {
        let (tx, rx) = mpsc::channel();
        let worker = std::thread::spawn(move || {
            for (id, audio) in jobs {
                let result = match audio {
                    Some(a) => mapper.map(&a),
                    None => MappingResult::invalid(String::new(), MappingSource::Fixture, "no audio for sample"),
                };
                if tx.send((id, result)).is_err() {
                    break;
                }
            }
        });
        Self { rx, worker: Some(worker) }
    }

    /// Blocks until the next result arrives; it must belong to `sample_id`.
    pub fn take(&self, sample_id: &str) -> Result<MappingResult> {
        let (id, result) = self
            .rx
            .recv()
            .map_err(|_| Error::Contract(format!("mailbox closed before {sample_id:?}")))?;
        if id != sample_id {
            return Err(Error::Contract(format!("mailbox delivered {id:?}, expected {sample_id:?}")));
        }
        Ok(result)
    }
}

impl Drop for Mailbox {
    fn drop(&mut self) {
        // Unblocks a worker waiting on send.
        let (_, dead) = mpsc::channel();
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiomap::FixtureClient;

    fn space() -> VideoLabelSpace {
        VideoLabelSpace::new(["dog barking", "wood sanding"]).unwrap()
    }

    fn audio(id: &str, tag: &str) -> AudioTopK {
        AudioTopK::new(id, vec![(tag.to_string(), 0.8)]).unwrap()
    }

    #[test]
    fn llm_mapper_caches_replies() {
        let client = Arc::new(FixtureClient::constant("wood sanding"));
        struct Shared(Arc<FixtureClient>);
        impl ChatClient for Shared {
            fn complete(&self, p: &str) -> Result<String> {
                self.0.complete(p)
            }
        }
        let m = LlmMapper::new(space(), PromptTemplate::default(), Box::new(Shared(client.clone())), MappingCache::in_memory());
        let a = audio("s1", "Wood");
        assert_eq!(m.map(&a).class_index, Some(1));
        assert_eq!(m.map(&a).class_index, Some(1));
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn replay_uses_matching_hash_only() {
        let mut cache = MappingCache::in_memory();
        let a = audio("s1", "Bark");
        let p = build_prompt_with(&PromptTemplate::default(), &space(), &a).unwrap();
        cache
            .append(CacheEntry {
                sample_id: "s1".into(),
                prompt_hash: prompt_hash(&p),
                raw_reply: "dog barking".into(),
                resolved_label: Some("dog barking".into()),
            })
            .unwrap();
        let r = ReplayMapper::new(space(), PromptTemplate::default(), cache);
        assert_eq!(r.map(&a).class_index, Some(0));
        assert!(!r.map(&audio("s1", "Dog")).valid);
        assert!(!r.map(&audio("s2", "Bark")).valid);
    }

    #[test]
    fn mailbox_preserves_order() {
        let mapper: Arc<dyn LabelMapper> = Arc::new(LexicalMapper::new(space()));
        let jobs = vec![
            ("a".to_string(), Some(audio("a", "Bark"))),
            ("b".to_string(), None),
            ("c".to_string(), Some(audio("c", "Sanding"))),
        ];
        let mb = Mailbox::spawn(mapper.clone(), jobs.clone());
        assert_eq!(mb.take("a").unwrap().class_index, Some(0));
        assert!(!mb.take("b").unwrap().valid);
        assert_eq!(mb.take("c").unwrap().class_index, Some(1));
        assert!(mb.take("d").is_err());

        let mb = Mailbox::spawn(mapper, jobs);
        assert!(mb.take("b").is_err());
    }
}
