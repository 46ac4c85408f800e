//! Exhaustive enumeration of the responses a task admits.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on the number of enumerated responses.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// Token id type.
pub type Token = u32;

/// How responses terminate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// Every response has exactly `max_len` tokens.
    #[default]
    FixedLength,
    /// Responses carry 1..=`max_len` content tokens. Shorter responses end with
    /// the end token (id `vocab_size`); full-length ones are truncated.
    EndToken,
}

/// All token sequences of a task in lexicographic order of token ids.
///
/// Response index `i` names the same sequence in every policy and reward table
/// built over this space.
#[derive(Debug, Clone)]
pub struct ResponseSpace {
    vocab_size: usize,
    max_len: usize,
    mode: SequenceMode,
    responses: Vec<Vec<Token>>,
    index: HashMap<Vec<Token>, usize>,
}

impl PartialEq for ResponseSpace {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.max_len == other.max_len
            && self.mode == other.mode
    }
}

/// Number of responses without enumerating them.
pub fn response_count(vocab_size: usize, max_len: usize, mode: SequenceMode) -> u128 {
    let v = vocab_size as u128;
    match mode {
        SequenceMode::FixedLength => v.checked_pow(max_len as u32).unwrap_or(u128::MAX),
        SequenceMode::EndToken => (1..=max_len as u32).fold(0u128, |acc, l| {
            acc.saturating_add(v.checked_pow(l).unwrap_or(u128::MAX))
        }),
    }
}

/// Enumerates all responses with the default cap.
pub fn enumerate_responses(
    vocab_size: usize,
    max_len: usize,
    mode: SequenceMode,
) -> Result<ResponseSpace> {
    ResponseSpace::new(vocab_size, max_len, mode, DEFAULT_ENUMERATION_CAP)
}

impl ResponseSpace {
    pub fn new(vocab_size: usize, max_len: usize, mode: SequenceMode, cap: usize) -> Result<Self> {
        if vocab_size == 0 || max_len == 0 {
            return Err(Error::Parameter(format!(
                "vocab_size and max_len must be >= 1 (got {vocab_size}, {max_len})"
            )));
        }
        let size = response_count(vocab_size, max_len, mode);
        if size > cap as u128 {
            return Err(Error::EnumerationTooLarge { size, cap });
        }
        let mut responses = Vec::with_capacity(size as usize);
        let mut prefix = Vec::with_capacity(max_len + 1);
        visit(vocab_size, max_len, mode, &mut prefix, &mut responses);
        debug_assert_eq!(responses.len() as u128, size);
        let index = responses
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        Ok(ResponseSpace {
            vocab_size,
            max_len,
            mode,
            responses,
            index,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn mode(&self) -> SequenceMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// The end token id, present only in [`SequenceMode::EndToken`].
    pub fn end_token(&self) -> Option<Token> {
        match self.mode {
            SequenceMode::FixedLength => None,
            SequenceMode::EndToken => Some(self.vocab_size as Token),
        }
    }

    pub fn responses(&self) -> &[Vec<Token>] {
        &self.responses
    }

    pub fn tokens(&self, response: usize) -> Result<&[Token]> {
        self.responses
            .get(response)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::index("response", response, self.responses.len()))
    }

    pub fn index_of(&self, tokens: &[Token]) -> Option<usize> {
        self.index.get(tokens).copied()
    }

    /// Number of content tokens (the end token excluded).
    pub fn content_len(&self, response: usize) -> usize {
        let toks = &self.responses[response];
        match self.end_token() {
            Some(eos) if toks.last() == Some(&eos) => toks.len() - 1,
            _ => toks.len(),
        }
    }

    /// True when an end-token response ran to `max_len` without emitting the end token.
    pub fn is_truncated(&self, response: usize) -> bool {
        self.mode == SequenceMode::EndToken && self.content_len(response) == self.max_len
    }
}

fn visit(
    vocab: usize,
    max_len: usize,
    mode: SequenceMode,
    prefix: &mut Vec<Token>,
    out: &mut Vec<Vec<Token>>,
) {
    if prefix.len() == max_len {
        out.push(prefix.clone());
        return;
    }
    for t in 0..vocab as Token {
        prefix.push(t);
        visit(vocab, max_len, mode, prefix, out);
        prefix.pop();
    }
    // The end token has the largest id, so it sorts after every continuation.
    if mode == SequenceMode::EndToken && !prefix.is_empty() {
        let mut done = prefix.clone();
        done.push(vocab as Token);
        out.push(done);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_length_counts_and_order() {
        let s = enumerate_responses(2, 1, SequenceMode::FixedLength).unwrap();
        assert_eq!(s.len(), 2);
        let s = enumerate_responses(2, 2, SequenceMode::FixedLength).unwrap();
        assert_eq!(s.responses(), &[vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        let s = enumerate_responses(4, 3, SequenceMode::FixedLength).unwrap();
        assert_eq!(s.len(), 64);
    }

    #[test]
    fn end_token_mode_is_lexicographic_and_complete() {
        let s = enumerate_responses(2, 2, SequenceMode::EndToken).unwrap();
        assert_eq!(s.len(), 2 + 4);
        let mut sorted = s.responses().to_vec();
        sorted.sort();
        assert_eq!(sorted, s.responses());
        assert_eq!(s.responses()[2], vec![0, 2]);
        assert!(s.is_truncated(0));
        assert!(!s.is_truncated(2));
        assert_eq!(s.content_len(2), 1);
    }

    #[test]
    fn enumeration_is_duplicate_free() {
        let s = enumerate_responses(3, 4, SequenceMode::EndToken).unwrap();
        let set: std::collections::HashSet<_> = s.responses().iter().collect();
        assert_eq!(set.len(), s.len());
        assert_eq!(s.len() as u128, response_count(3, 4, SequenceMode::EndToken));
        for (i, r) in s.responses().iter().enumerate() {
            assert_eq!(s.index_of(r), Some(i));
        }
    }

    #[test]
    fn cap_is_enforced() {
        let err = ResponseSpace::new(10, 7, SequenceMode::FixedLength, DEFAULT_ENUMERATION_CAP)
            .unwrap_err();
        match err {
            Error::EnumerationTooLarge { size, cap } => {
                assert_eq!(size, 10_000_000);
                assert_eq!(cap, 1_000_000);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(ResponseSpace::new(2, 3, SequenceMode::FixedLength, 7).is_err());
    }

    #[test]
    fn rejects_empty_vocab() {
        assert!(enumerate_responses(0, 2, SequenceMode::FixedLength).is_err());
        assert!(enumerate_responses(2, 0, SequenceMode::FixedLength).is_err());
    }
}
