//! Word-level vocabulary over the task bank plus structural tokens.

use std::collections::{BTreeSet, HashMap};

use crate::annotator::{
    action_bin_token, gripper_token, loc_x_token, loc_y_token, ReasoningFormat, LOC_BINS, NUM_BINS,
};
use crate::geometry::Direction;
use crate::simenv::{ObjectClass, TaskBank};

use super::ModelError;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
/// Format tag used when the action expert is conditioned without reasoning.
pub const NO_REASONING: &str = "<act>";

pub const MAX_VOCAB: usize = 1024;

/// Fixed words of the chain templates and the compact grammar.
const TEMPLATE_WORDS: &str = "the user says needs should go put i will for summary . \
                              move to hold ee box act";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self, ModelError> {
        if words.len() >= MAX_VOCAB {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary of {} tokens exceeds {MAX_VOCAB}",
                words.len()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(ModelError::InvalidConfig(format!("duplicate token {w}")));
            }
        }
        for special in [PAD, BOS, EOS, SEP] {
            if !index.contains_key(special) {
                return Err(ModelError::InvalidConfig(format!("missing {special}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Specials, location and action tokens, then every word used by the
    /// task bank and templates in sorted order. Extra texts (for example
    /// completions from an external backend) contribute their words too.
    pub fn build(bank: &TaskBank, extra_texts: &[&str]) -> Result<Self, ModelError> {
        let mut words: Vec<String> = [PAD, BOS, EOS, SEP]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(ReasoningFormat::ALL.iter().map(|f| f.tag().to_string()));
        words.push(NO_REASONING.to_string());
        words.extend((0..LOC_BINS as u8).map(loc_x_token));
        words.extend((0..LOC_BINS as u8).map(loc_y_token));
        for d in 0..6 {
            words.extend((0..NUM_BINS as u8).map(|b| action_bin_token(d, b)));
        }
        words.extend((0..2).map(gripper_token));

        let mut plain = BTreeSet::new();
        let mut add = |text: &str| {
            for w in text.split_whitespace() {
                plain.insert(w.to_lowercase());
            }
        };
        add(TEMPLATE_WORDS);
        for d in Direction::ALL {
            add(d.as_str());
        }
        for c in ObjectClass::ALL {
            add(c.display());
        }
        for t in &bank.tasks {
            add(&t.relation);
            add(&t.direct_instruction);
            t.intention_instructions.iter().for_each(|s| add(s));
            t.heldout_instructions.iter().for_each(|s| add(s));
        }
        for t in extra_texts {
            add(t);
        }
        words.extend(plain.into_iter().filter(|w| !w.starts_with('<')));
        Self::from_words(words)
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

    pub fn id(&self, word: &str) -> Result<u32, ModelError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| ModelError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    pub fn sep(&self) -> u32 {
        self.index[SEP]
    }

    /// Words of `text` followed by the end-of-sequence token, the form in
    /// which targets are generated.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        let mut ids = self.tokenize_words(text)?;
        ids.push(self.eos());
        Ok(ids)
    }

    /// Words of `text` only, as used inside prompts.
    pub fn tokenize_words(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Text up to (excluding) the first end-of-sequence token.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let eos = self.eos();
        ids.iter()
            .take_while(|&&i| i != eos)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
