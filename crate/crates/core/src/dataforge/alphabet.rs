use crate::error::{Error, Result};
use crate::model::TokenSeq;

/// Fixed character vocabulary shared by every generator and the model.
///
/// Id 0 is the BOS marker. It has no printable form: prompts are encoded
/// with a leading BOS and rendered without it.
#[derive(Clone, Copy, Debug, Default)]
pub struct Alphabet;

const CHARS: [char; 23] = [
    ' ', '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '+', '−', '×', '=', ';', '?', ':', 'Q',
    'A', 'a', 'n', 's',
];

impl Alphabet {
    pub const BOS: u32 = 0;
    pub const SIZE: usize = CHARS.len() + 1;

    pub fn chars() -> &'static [char] {
        &CHARS
    }

    pub fn id(c: char) -> Option<u32> {
        CHARS.iter().position(|&x| x == c).map(|i| i as u32 + 1)
    }

    pub fn char_of(id: u32) -> Option<char> {
        if id == Self::BOS {
            return None;
        }
        CHARS.get(id as usize - 1).copied()
    }

    /// Encodes text with no BOS. Unknown characters are all reported together.
    pub fn encode(text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(text.len());
        let mut bad = Vec::new();
        for c in text.chars() {
            match Self::id(c) {
                Some(id) => ids.push(id),
                None if !bad.contains(&c) => bad.push(c),
                None => {}
            }
        }
        if !bad.is_empty() {
            return Err(Error::Tokenize(bad));
        }
        Ok(TokenSeq(ids))
    }

    pub fn encode_prompt(text: &str) -> Result<TokenSeq> {
        let mut seq = Self::encode(text)?;
        seq.0.insert(0, Self::BOS);
        Ok(seq)
    }

    /// Renders ids back to text, skipping BOS markers.
    pub fn decode(seq: &TokenSeq) -> Result<String> {
        seq.tokens()
            .iter()
            .filter(|&&t| t != Self::BOS)
            .map(|&t| {
                Self::char_of(t)
                    .ok_or_else(|| Error::Contract(format!("token id {t} is not in the alphabet")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijective_and_small() {
        assert!(Alphabet::SIZE <= 64);
        for (i, &c) in Alphabet::chars().iter().enumerate() {
            let id = Alphabet::id(c).unwrap();
            assert_eq!(id as usize, i + 1);
            assert_eq!(Alphabet::char_of(id), Some(c));
        }
        assert_eq!(Alphabet::char_of(Alphabet::BOS), None);
    }

    #[test]
    fn prompt_round_trip_drops_bos() {
        let s = "Q: 03 + 04 = ?";
        let seq = Alphabet::encode_prompt(s).unwrap();
        assert_eq!(seq.tokens()[0], Alphabet::BOS);
        assert_eq!(Alphabet::decode(&seq).unwrap(), s);
    }

    #[test]
    fn unknown_characters_are_listed() {
        match Alphabet::encode("2+2=4 é ü é") {
            Err(Error::Tokenize(bad)) => assert_eq!(bad, vec!['é', 'ü']),
            other => panic!("{other:?}"),
        }
    }
}
