use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSeq;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    pub generator: String,
    pub seed: u64,
}

/// Prompt with a preferred (`chosen`) and dispreferred (`rejected`) completion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub id: u64,
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    /// 0-based position of the first differing completion token.
    pub first_edit_index: Option<usize>,
    pub meta: PairMeta,
}

/// First position where the two sequences differ, or the shorter length
/// when one is a prefix of the other. `None` for equal sequences.
pub fn first_difference(a: &TokenSeq, b: &TokenSeq) -> Option<usize> {
    let (a, b) = (a.tokens(), b.tokens());
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

impl PreferencePair {
    pub fn new(
        id: u64,
        prompt: TokenSeq,
        chosen: TokenSeq,
        rejected: TokenSeq,
        first_edit_index: Option<usize>,
        meta: PairMeta,
    ) -> Result<Self> {
        let pair = Self {
            id,
            prompt,
            chosen,
            rejected,
            first_edit_index,
            meta,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::Contract(format!(
                "pair {}: prompt and completions must be non-empty",
                self.id
            )));
        }
        if self.chosen == self.rejected {
            return Err(Error::Contract(format!(
                "pair {}: chosen and rejected are identical",
                self.id
            )));
        }
        if let Some(m) = self.first_edit_index {
            let (c, r) = (self.chosen.tokens(), self.rejected.tokens());
            let ok = m < c.len() && m < r.len() && c[..m] == r[..m] && c[m] != r[m];
            if !ok {
                return Err(Error::Contract(format!(
                    "pair {}: first_edit_index {m} is not the first differing position",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn is_same_length(&self) -> bool {
        self.chosen.len() == self.rejected.len()
    }
}
