use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clip::CaptionTokens;
use crate::error::{Error, Result};

/// The six procedural base actions of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionTemplate {
    Walk,
    Run,
    Jump,
    Wave,
    Kick,
    Squat,
}

impl ActionTemplate {
    pub const ALL: [ActionTemplate; 6] = [
        ActionTemplate::Walk,
        ActionTemplate::Run,
        ActionTemplate::Jump,
        ActionTemplate::Wave,
        ActionTemplate::Kick,
        ActionTemplate::Squat,
    ];

    pub fn verb(self) -> &'static str {
        match self {
            ActionTemplate::Walk => "walks",
            ActionTemplate::Run => "runs",
            ActionTemplate::Jump => "jumps",
            ActionTemplate::Wave => "waves",
            ActionTemplate::Kick => "kicks",
            ActionTemplate::Squat => "squats",
        }
    }

    fn phrasings(self) -> &'static [&'static [&'static str]] {
        match self {
            ActionTemplate::Walk => &[&["walks"], &["walks", "forward"], &["walks", "slowly"]],
            ActionTemplate::Run => &[&["runs"], &["runs", "forward"], &["runs", "quickly"]],
            ActionTemplate::Jump => &[&["jumps"], &["jumps", "up"], &["jumps", "high"]],
            ActionTemplate::Wave => &[&["waves"], &["waves", "their", "hand"], &["waves", "quickly"]],
            ActionTemplate::Kick => &[&["kicks"], &["kicks", "their", "leg"], &["kicks", "once"]],
            ActionTemplate::Squat => &[&["squats"], &["squats", "down"], &["squats", "slowly"]],
        }
    }

    pub fn from_verb(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.verb() == word)
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const DEFAULT_WORDS: [&str; 32] = [
    "<pad>", "<bos>", "<eos>", "<unk>", "a", "person", "someone", "the", "walks", "runs", "jumps", "waves", "kicks",
    "squats", "then", "and", "after", "that", ",", ".", "forward", "slowly", "quickly", "up", "high", "their",
    "hand", "leg", "once", "down", "in", "place",
];

const SUBJECTS: [&[&str]; 3] = [&["a", "person"], &["someone"], &["the", "person"]];
const CONNECTORS: [&[&str]; 4] = [&["then"], &["and", "then"], &[",", "then"], &["after", "that"]];

/// Ordered token list; the id of a word is its index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { words: DEFAULT_WORDS.iter().map(|s| s.to_string()).collect() }
    }
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let v = Vocabulary { words };
        for (id, w) in [(PAD, "<pad>"), (BOS, "<bos>"), (EOS, "<eos>"), (UNK, "<unk>")] {
            if v.words.get(id).map(String::as_str) != Some(w) {
                return Err(Error::invalid(format!("vocabulary must start with special token {w} at id {id}")));
            }
        }
        for t in ActionTemplate::ALL {
            if v.id(t.verb()).is_none() {
                return Err(Error::invalid(format!("vocabulary lacks the verb `{}`", t.verb())));
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    /// Space-separated words to ids, wrapped in BOS/EOS; unknown words map to UNK.
    pub fn encode_text(&self, text: &str) -> CaptionTokens {
        let mut tokens = vec![BOS];
        for raw in text.split_whitespace() {
            let mut word = raw.to_lowercase();
            let trailing = match word.chars().last() {
                Some(c @ (',' | '.')) if word.len() > 1 => {
                    word.pop();
                    Some(c.to_string())
                }
                _ => None,
            };
            tokens.push(self.id(&word).unwrap_or(UNK));
            if let Some(p) = trailing {
                tokens.push(self.id(&p).unwrap_or(UNK));
            }
        }
        tokens.push(EOS);
        CaptionTokens::new(tokens)
    }

    pub fn decode_text(&self, caption: &CaptionTokens) -> String {
        caption
            .valid()
            .iter()
            .filter(|&&t| t != BOS && t != EOS && t != PAD)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Builds a caption naming `templates` in order; wording varies with `rng`.
    pub fn caption_for<R: Rng>(&self, templates: &[ActionTemplate], rng: &mut R) -> Result<CaptionTokens> {
        let mut words: Vec<&str> = SUBJECTS[rng.random_range(0..SUBJECTS.len())].to_vec();
        for (i, t) in templates.iter().enumerate() {
            if i > 0 {
                words.extend_from_slice(CONNECTORS[rng.random_range(0..CONNECTORS.len())]);
            }
            let ph = t.phrasings();
            words.extend_from_slice(ph[rng.random_range(0..ph.len())]);
        }
        words.push(".");
        let mut tokens = vec![BOS];
        for w in words {
            tokens.push(self.id(w).ok_or_else(|| Error::invalid(format!("vocabulary lacks `{w}`")))?);
        }
        tokens.push(EOS);
        Ok(CaptionTokens::new(tokens))
    }

    /// Recovers the template sequence named by a caption.
    pub fn decode_templates(&self, caption: &CaptionTokens) -> Vec<ActionTemplate> {
        caption.valid().iter().filter_map(|&t| ActionTemplate::from_verb(self.word(t))).collect()
    }
}
