use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::grammar::parse_numeral;
use crate::scene::{Category, Color, Material, OcrWord};

/// The eight hallucination categories used to structure hard negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Taxonomy {
    SpatialRelationship,
    VisualAttribute,
    AttributeBinding,
    ObjectIdentification,
    Counting,
    SmallObject,
    TextOcr,
    Counterfactual,
}

impl Taxonomy {
    pub const ALL: [Taxonomy; 8] = [
        Taxonomy::SpatialRelationship,
        Taxonomy::VisualAttribute,
        Taxonomy::AttributeBinding,
        Taxonomy::ObjectIdentification,
        Taxonomy::Counting,
        Taxonomy::SmallObject,
        Taxonomy::TextOcr,
        Taxonomy::Counterfactual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Taxonomy::SpatialRelationship => "spatial-relationship",
            Taxonomy::VisualAttribute => "visual-attribute",
            Taxonomy::AttributeBinding => "attribute-binding",
            Taxonomy::ObjectIdentification => "object-identification",
            Taxonomy::Counting => "counting",
            Taxonomy::SmallObject => "small-object",
            Taxonomy::TextOcr => "text-ocr",
            Taxonomy::Counterfactual => "counterfactual",
        }
    }

    pub fn roman(self) -> &'static str {
        ["I", "II", "III", "IV", "V", "VI", "VII", "VIII"][self as usize]
    }

    /// Whether `word` may be changed by an edit of this taxonomy.
    pub fn allows_word(self, word: &str) -> bool {
        let attribute = Color::from_word(word).is_some() || Material::from_word(word).is_some();
        let category = Category::from_word(word).is_some();
        match self {
            Taxonomy::SpatialRelationship => matches!(word, "left" | "right" | "above" | "below"),
            Taxonomy::VisualAttribute | Taxonomy::AttributeBinding => attribute,
            Taxonomy::ObjectIdentification => category,
            Taxonomy::Counting => {
                parse_numeral(word).is_some()
                    || matches!(word, "is" | "are" | "one" | "a")
                    || category
                    || Category::from_plural(word).is_some()
            }
            Taxonomy::SmallObject => attribute || category,
            Taxonomy::TextOcr => OcrWord::from_word(word).is_some(),
            Taxonomy::Counterfactual => {
                matches!(word, "there" | "is" | "no" | "small" | ".") || attribute || category
            }
        }
    }

    /// Counterfactual edits only insert; every other taxonomy substitutes.
    pub fn insertion_only(self) -> bool {
        self == Taxonomy::Counterfactual
    }
}

impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Taxonomy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Taxonomy::ALL
            .into_iter()
            .find(|t| t.name() == s || t.roman() == s)
            .ok_or_else(|| Error::Vocabulary(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_back() {
        for t in Taxonomy::ALL {
            assert_eq!(t.name().parse::<Taxonomy>().unwrap(), t);
            assert_eq!(t.roman().parse::<Taxonomy>().unwrap(), t);
        }
        assert!("spatial".parse::<Taxonomy>().is_err());
    }

    #[test]
    fn word_classes() {
        assert!(Taxonomy::SpatialRelationship.allows_word("left"));
        assert!(!Taxonomy::SpatialRelationship.allows_word("next"));
        assert!(Taxonomy::Counting.allows_word("ducks"));
        assert!(!Taxonomy::TextOcr.allows_word("red"));
    }
}
