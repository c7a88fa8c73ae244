//! Templated descriptions over a closed vocabulary.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::attributes::{AdmissibleSet, Direction, MotionType, Receiver, SemanticAttributes};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// A description and its token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Text {
    pub text: String,
    pub tokens: Vec<TokenId>,
}

/// Per-instance description built from the four attributes.
pub type FineGrainedText = Text;
/// Shared description of a whole category.
pub type CategoryText = Text;

const FIXED_WORDS: &[&str] = &["the", "moves", "and", "a", "person", "performing", "with", "moving", "left", "right", "hand"];

/// The closed vocabulary every template draws from.
#[derive(Debug)]
pub struct Vocabulary {
    words: Vec<&'static str>,
    index: HashMap<&'static str, TokenId>,
}

impl Vocabulary {
    fn build() -> Self {
        let mut words: Vec<&'static str> = FIXED_WORDS.to_vec();
        words.extend(["head", "shoulder"]);
        words.extend(Receiver::ALL.iter().map(|r| r.slug()));
        words.extend(Direction::ALL.iter().map(|d| d.slug()));
        words.extend(MotionType::ALL.iter().map(|m| m.third_person()));
        words.extend(MotionType::ALL.iter().map(|m| m.gerund()));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, i as TokenId))
            .collect();
        Self { words, index }
    }

    pub fn global() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&'static str> {
        self.words.get(id as usize).copied()
    }

    /// Whitespace tokenization; out-of-vocabulary words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Text> {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidArgument(format!("word {w:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Text {
            text: text.to_owned(),
            tokens,
        })
    }
}

/// `"the {initiator} moves {direction} and {motion}s the {receiver}"`.
pub fn compose_fg_text(a: &SemanticAttributes) -> FineGrainedText {
    let text = format!(
        "the {} moves {} and {} the {}",
        a.initiator.phrase(),
        a.direction.slug(),
        a.motion_type.third_person(),
        a.receiver.slug()
    );
    Vocabulary::global()
        .tokenize(&text)
        .expect("template words are in the vocabulary")
}

/// Canonical name of a category, e.g. "rubbing the nose with the right hand".
///
/// The direction is appended ("... moving upward") only when another tuple
/// in the map shares initiator, receiver and motion type, which keeps names
/// unique over any admissible set.
pub fn category_name(category_id: usize, map: &AdmissibleSet) -> Result<String> {
    let a = map.get(category_id).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "category id {category_id} out of range [0, {})",
            map.len()
        ))
    })?;
    let ambiguous = map.tuples().iter().any(|b| {
        b != a && b.initiator == a.initiator && b.receiver == a.receiver && b.motion_type == a.motion_type
    });
    let mut name = format!(
        "{} the {} with the {}",
        a.motion_type.gerund(),
        a.receiver.slug(),
        a.initiator.phrase()
    );
    if ambiguous {
        name.push_str(" moving ");
        name.push_str(a.direction.slug());
    }
    Ok(name)
}

/// `"a person performing {category name}"`.
pub fn compose_category_text(category_id: usize, map: &AdmissibleSet) -> Result<CategoryText> {
    let name = category_name(category_id, map)?;
    Vocabulary::global().tokenize(&format!("a person performing {name}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::attributes::Direction::*;
    use crate::synth::attributes::Initiator;
    use crate::synth::attributes::Initiator::*;
    use crate::synth::attributes::MotionType::*;
    use crate::synth::attributes::Receiver::*;

    fn words(t: &Text) -> Vec<&'static str> {
        t.tokens.iter().map(|&id| Vocabulary::global().word(id).unwrap()).collect()
    }

    #[test]
    fn fine_grained_template_examples() {
        let t = compose_fg_text(&SemanticAttributes::new(RightHand, Nose, Upward, Rub));
        assert_eq!(t.text, "the right hand moves upward and rubs the nose");
        assert_eq!(words(&t).join(" "), t.text);

        let t = compose_fg_text(&SemanticAttributes::new(LeftHand, Neck, Toward, Touch));
        assert_eq!(t.text, "the left hand moves toward and touches the neck");
        assert_eq!(Vocabulary::global().tokenize(&t.text).unwrap(), t);
    }

    #[test]
    fn fine_grained_text_is_injective_over_every_tuple() {
        let mut seen = std::collections::HashSet::new();
        for &i in Initiator::ALL {
            for &r in Receiver::ALL {
                for &d in Direction::ALL {
                    for &m in MotionType::ALL {
                        let t = compose_fg_text(&SemanticAttributes::new(i, r, d, m));
                        assert!(seen.insert(t.tokens), "collision at {i} {r} {d} {m}");
                    }
                }
            }
        }
    }

    #[test]
    fn category_text_examples() {
        let map = AdmissibleSet::default_set();
        assert_eq!(category_name(0, &map).unwrap(), "rubbing the nose with the right hand");
        let t = compose_category_text(0, &map).unwrap();
        assert_eq!(t.text, "a person performing rubbing the nose with the right hand");
        assert_eq!(compose_category_text(0, &map).unwrap(), t);

        let all: std::collections::HashSet<_> = (0..map.len())
            .map(|c| compose_category_text(c, &map).unwrap().tokens)
            .collect();
        assert_eq!(all.len(), map.len());
    }

    #[test]
    fn category_names_disambiguate_by_direction() {
        let map = AdmissibleSet::new(vec![
            SemanticAttributes::new(RightHand, Nose, Upward, Rub),
            SemanticAttributes::new(RightHand, Nose, Downward, Rub),
        ])
        .unwrap();
        assert_eq!(
            category_name(1, &map).unwrap(),
            "rubbing the nose with the right hand moving downward"
        );
        assert_ne!(compose_category_text(0, &map).unwrap(), compose_category_text(1, &map).unwrap());
    }

    #[test]
    fn out_of_range_category_is_invalid() {
        let map = AdmissibleSet::default_set();
        assert!(matches!(compose_category_text(16, &map), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unknown_words_are_rejected() {
        assert!(Vocabulary::global().tokenize("the hand waves").is_err());
    }
}
