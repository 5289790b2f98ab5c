#![allow(dead_code)]

use std::collections::BTreeMap;

use sidrank_core::corpus::RerankRequest;
use sidrank_core::model::{serialize_input, InputSequence, ModelConfig, PositionalMode, RerankerModel};
use sidrank_core::tokenizer::{SemanticId, SidTable, TokenVocabulary};

/// `n` items with ids `100..100+n` and depth-2 codes over a codebook of 4;
/// every item is distinct.
pub fn small_table(n: usize) -> SidTable {
    assert!(n <= 16);
    SidTable::from_entries(
        2,
        4,
        (0..n).map(|i| (100 + i as u64, SemanticId { codes: vec![i / 4, i % 4], disamb: 0 })),
    )
    .unwrap()
}

pub fn request(id: u64, candidates: &[u64], history: &[u64], relevant: &[u64]) -> RerankRequest {
    RerankRequest {
        request_id: id,
        user_id: 1,
        window: 0,
        history: history.to_vec(),
        candidates: candidates.to_vec(),
        relevance: candidates.iter().map(|&c| (c, relevant.contains(&c))).collect::<BTreeMap<_, _>>(),
    }
}

pub fn tiny_config(vocab: &TokenVocabulary, local_slots: Option<usize>, positional: PositionalMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        vocab_size: vocab.size(),
        max_enc_len: 48,
        max_dec_len: 12,
        dropout: 0.0,
        positional,
        item_token_len: vocab.item_token_len(),
        tie_output: false,
        local_slots,
    }
}

pub struct Fixture {
    pub table: SidTable,
    pub vocab: TokenVocabulary,
    pub request: RerankRequest,
    pub input: InputSequence,
    pub model: RerankerModel,
}

/// Tiny model over `n` candidates drawn from a 12-item table with a
/// two-item history.
pub fn fixture(n: usize, local: bool, positional: PositionalMode, seed: u64) -> Fixture {
    let table = small_table(12);
    let vocab = TokenVocabulary::for_table(&table);
    let candidates: Vec<u64> = (0..n as u64).map(|i| 100 + i).collect();
    let request = request(seed, &candidates, &[110, 111], &candidates[..1.min(n)]);
    let input = serialize_input(&request, &table, &vocab, 10, 48).unwrap();
    let model = RerankerModel::new(tiny_config(&vocab, local.then_some(n), positional), seed).unwrap();
    Fixture { table, vocab, request, input, model }
}

/// All ordered `k`-subsets of `items`.
pub fn k_permutations(items: &[u64], k: usize) -> Vec<Vec<u64>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        let rest: Vec<u64> = items.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &x)| x).collect();
        for mut tail in k_permutations(&rest, k - 1) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

/// Token string of `list` and, per step, the outputs that keep at least one
/// unused candidate reachable; computed from the remaining candidate set
/// without any trie.
pub fn brute_force_trace(strings: &BTreeMap<u64, Vec<usize>>, list: &[u64]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut tokens = Vec::new();
    let mut legal = Vec::new();
    let mut used: Vec<u64> = Vec::new();
    for item in list {
        let s = &strings[item];
        for d in 0..s.len() {
            let mut set: Vec<usize> = strings
                .iter()
                .filter(|(id, other)| !used.contains(id) && other[..d] == s[..d])
                .map(|(_, other)| other[d])
                .collect();
            set.sort_unstable();
            set.dedup();
            legal.push(set);
            tokens.push(s[d]);
        }
        used.push(*item);
    }
    (tokens, legal)
}
