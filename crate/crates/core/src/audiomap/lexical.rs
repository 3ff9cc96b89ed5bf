use std::collections::BTreeSet;

use super::{AudioTopK, MappingResult, MappingSource, VideoLabelSpace};

const STEM_LEN: usize = 4;

/// Lowercased alphanumeric tokens cut to their first four characters.
pub fn stems(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().take(STEM_LEN).collect())
        .collect()
}

/// Jaccard overlap of the stem sets of `a` and `b`.
pub fn similarity(a: &str, b: &str) -> f64 {
    jaccard(&stems(a), &stems(b))
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Scores each video label by `sum_k prob_k * sim(audio_k, label)` and picks
/// the best. Ties go to the lexicographically smaller label; a best score of
/// zero is unresolved.
pub fn map_via_lexical(space: &VideoLabelSpace, audio: &AudioTopK) -> MappingResult {
    let mut entries: Vec<(&str, f64)> = audio.entries().iter().map(|e| (e.label.as_str(), e.prob)).collect();
    // Fixed summation order keeps the score independent of how equal-score entries arrived.
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let audio_stems: Vec<(BTreeSet<String>, f64)> = entries.iter().map(|(l, p)| (stems(l), *p)).collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, label) in space.labels().iter().enumerate() {
        let target = stems(label);
        let score: f64 = audio_stems.iter().map(|(s, p)| p * jaccard(s, &target)).sum();
        let better = match best {
            None => true,
            Some((j, b)) => score > b || (score == b && label.as_str() < space.labels()[j].as_str()),
        };
        if better {
            best = Some((i, score));
        }
    }
    match best {
        Some((i, score)) if score > 0.0 => {
            let label = space.labels()[i].clone();
            MappingResult {
                raw_reply: label.clone(),
                resolved_label: Some(label),
                class_index: Some(i),
                valid: true,
                source: MappingSource::Lexical,
                note: None,
            }
        }
        _ => MappingResult::invalid(String::new(), MappingSource::Lexical, "no audio tag shares a stem with any label"),
    }
}
