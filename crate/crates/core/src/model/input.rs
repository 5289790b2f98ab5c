use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::RerankRequest;
use crate::error::{bail, Result};
use crate::tokenizer::{SidTable, TokenVocabulary};
use crate::TokenId;

/// What an encoder token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    /// Token `offset` of the candidate stored at position `index`.
    Candidate { index: usize, offset: usize },
    /// Token `offset` of the `index`-th retained history item (oldest first).
    History { index: usize, offset: usize },
    Special,
}

impl Segment {
    pub(crate) fn kind_id(self) -> usize {
        match self {
            Segment::Candidate { .. } => 0,
            Segment::History { .. } => 1,
            Segment::Special => 2,
        }
    }
}

pub(crate) const SEGMENT_KINDS: usize = 3;

/// Encoder input: `S(C) SEP S(H) SEP RANK`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSequence {
    pub request_id: u64,
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub n_candidates: usize,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Serialize a request with the candidates in stored order and the
/// `history_cap` most recent history items.
pub fn serialize_input(
    request: &RerankRequest,
    table: &SidTable,
    vocab: &TokenVocabulary,
    history_cap: usize,
    max_len: usize,
) -> Result<InputSequence> {
    let mut tokens = Vec::new();
    let mut segments = Vec::new();
    for (index, &item) in request.candidates.iter().enumerate() {
        for (offset, t) in vocab.item_tokens(table, item)?.into_iter().enumerate() {
            tokens.push(t);
            segments.push(Segment::Candidate { index, offset });
        }
    }
    tokens.push(vocab.sep());
    segments.push(Segment::Special);
    let start = request.history.len().saturating_sub(history_cap);
    for (index, &item) in request.history[start..].iter().enumerate() {
        for (offset, t) in vocab.item_tokens(table, item)?.into_iter().enumerate() {
            tokens.push(t);
            segments.push(Segment::History { index, offset });
        }
    }
    tokens.push(vocab.sep());
    segments.push(Segment::Special);
    tokens.push(vocab.rank());
    segments.push(Segment::Special);
    if tokens.len() > max_len {
        bail!(
            Length,
            "request {} serializes to {} tokens, more than max_enc_len = {max_len}",
            request.request_id,
            tokens.len()
        );
    }
    Ok(InputSequence { request_id: request.request_id, tokens, segments, n_candidates: request.candidates.len() })
}
