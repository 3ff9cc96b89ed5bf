use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AudioTopK, VideoLabelSpace};
use crate::error::{Error, Result};

const DEFAULT_TEMPLATE: &str = include_str!("../../assets/prompt_template.txt");
const SECTIONS: [&str; 5] = ["background", "task", "examples", "requirements", "inputs"];

/// Five-section prompt template. The `inputs` section must contain the
/// `{video_labels}` and `{audio_predictions}` placeholders; `{k}` is optional.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    sections: [String; 5],
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled prompt template is valid")
    }
}

impl PromptTemplate {
    /// Parses `[section]` headed blocks. Every section must appear once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: [Option<String>; 5] = Default::default();
        let mut current: Option<usize> = None;
        let mut body = String::new();
        let flush = |current: Option<usize>, body: &mut String, sections: &mut [Option<String>; 5]| -> Result<()> {
            if let Some(i) = current {
                if sections[i].is_some() {
                    return Err(Error::config("prompt_template", format!("section [{}] repeated", SECTIONS[i])));
                }
                sections[i] = Some(body.trim().to_string());
            } else if !body.trim().is_empty() {
                return Err(Error::config("prompt_template", "text before the first section header"));
            }
            body.clear();
            Ok(())
        };
        for line in text.lines() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if let Some(i) = SECTIONS.iter().position(|&s| s == name) {
                    flush(current, &mut body, &mut sections)?;
                    current = Some(i);
                    continue;
                }
            }
            body.push_str(line);
            body.push('\n');
        }
        flush(current, &mut body, &mut sections)?;
        let mut out: [String; 5] = Default::default();
        for (i, s) in sections.into_iter().enumerate() {
            match s {
                Some(s) if !s.is_empty() => out[i] = s,
                _ => return Err(Error::config("prompt_template", format!("section [{}] missing or empty", SECTIONS[i]))),
            }
        }
        for ph in ["{video_labels}", "{audio_predictions}"] {
            if out[4].matches(ph).count() != 1 {
                return Err(Error::config("prompt_template", format!("[inputs] must contain {ph} exactly once")));
            }
        }
        Ok(Self { sections: out })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// The rendered sections of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub background: String,
    pub task: String,
    pub examples: String,
    pub requirements: String,
    pub inputs: String,
}

impl PromptBundle {
    /// `"#Human: "`, the sections in order, then `" #Assistant:"`.
    pub fn render(&self) -> String {
        let body = [&self.background, &self.task, &self.examples, &self.requirements, &self.inputs]
            .map(String::as_str)
            .join("\n\n");
        format!("#Human: {body} #Assistant:")
    }
}

/// Formats a score at two decimals.
fn score(p: f64) -> String {
    format!("{p:.2}")
}

pub fn build_prompt(space: &VideoLabelSpace, audio: &AudioTopK) -> Result<PromptBundle> {
    build_prompt_with(&PromptTemplate::default(), space, audio)
}

pub fn build_prompt_with(template: &PromptTemplate, space: &VideoLabelSpace, audio: &AudioTopK) -> Result<PromptBundle> {
    if space.is_empty() {
        return Err(Error::Input("video label space is empty".into()));
    }
    let labels = space.labels().join(", ");
    let preds = audio
        .entries()
        .iter()
        .map(|e| format!("{}({})", e.label, score(e.prob)))
        .collect::<Vec<_>>()
        .join("; ");
    let inputs = template.sections[4]
        .replace("{k}", &audio.k().to_string())
        .replace("{video_labels}", &labels)
        .replace("{audio_predictions}", &preds);
    let [background, task, examples, requirements, _] = template.sections.clone();
    Ok(PromptBundle { background, task, examples, requirements, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_parses() {
        let t = PromptTemplate::default();
        assert!(t.sections.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn template_errors() {
        assert!(PromptTemplate::parse("[background]\nx\n[task]\ny\n").is_err());
        let no_ph = "[background]\na\n[task]\nb\n[examples]\nc\n[requirements]\nd\n[inputs]\ne\n";
        assert!(PromptTemplate::parse(no_ph).is_err());
        let ok = "[background]\na\n[task]\nb\n[examples]\nc\n[requirements]\nd\n[inputs]\n{video_labels} {audio_predictions}\n";
        assert!(PromptTemplate::parse(ok).is_ok());
        let dup = format!("{ok}[task]\nagain\n");
        assert!(PromptTemplate::parse(&dup).is_err());
    }

    #[test]
    fn scores_round_to_two_places() {
        assert_eq!(score(0.634999), "0.63");
        assert_eq!(score(1.0), "1.00");
        assert_eq!(score(0.02), "0.02");
    }
}
