use crate::error::{Error, Result};
use crate::model::TokenSeq;

/// Number of positions where equal-length sequences differ.
pub fn hamming_distance(a: &TokenSeq, b: &TokenSeq) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "hamming distance needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x != y).count())
}

pub fn levenshtein(a: &TokenSeq, b: &TokenSeq) -> usize {
    strsim::generic_levenshtein(&a.0, &b.0)
}

/// Levenshtein distance over the longer length, in `[0, 1]`.
pub fn normalized_edit_distance(a: &TokenSeq, b: &TokenSeq) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("edit distance of an empty sequence".into()));
    }
    Ok(levenshtein(a, b) as f64 / a.len().max(b.len()) as f64)
}
