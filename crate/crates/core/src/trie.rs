//! Per-request prefix trees over candidate token strings.
//!
//! The tree itself is immutable and can be shared between decoding
//! hypotheses. Pruning lives in a separate [`TrieState`] owned by exactly one
//! hypothesis: live counts are the static subtree sizes minus the number of
//! pruned terminals below each node, so cloning a state is all a beam needs
//! when it branches.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{bail, Error, Result};
use crate::tokenizer::{SidTable, TokenVocabulary};
use crate::{ItemId, TokenId};

#[derive(Debug, Clone)]
struct Node {
    /// Sorted by token.
    children: Vec<(TokenId, usize)>,
    parent: Option<usize>,
    terminal_item: Option<ItemId>,
    /// Terminals below this node, pruning ignored.
    size: u32,
}

#[derive(Debug, Clone)]
pub struct CandidateTrie {
    nodes: Vec<Node>,
    item_token_len: usize,
    terminals: BTreeMap<ItemId, usize>,
}

/// Position of a decoder inside the item currently being generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrieCursor {
    pub node: usize,
    pub depth: usize,
}

/// Pruning state of one hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrieState {
    pruned_below: Vec<u32>,
    pruned: BTreeSet<ItemId>,
}

impl TrieState {
    pub fn pruned(&self) -> &BTreeSet<ItemId> {
        &self.pruned
    }
}

const ROOT: usize = 0;

impl CandidateTrie {
    /// Build from `(item, token string)` pairs. Every string must have the
    /// same length.
    pub fn build(entries: &[(ItemId, Vec<TokenId>)]) -> Result<Self> {
        let Some(first) = entries.first() else {
            bail!(Argument, "cannot build a trie without candidates");
        };
        let len = first.1.len();
        if len == 0 {
            bail!(Argument, "item token strings must be non-empty");
        }
        let mut trie = CandidateTrie {
            nodes: vec![Node { children: Vec::new(), parent: None, terminal_item: None, size: 0 }],
            item_token_len: len,
            terminals: BTreeMap::new(),
        };
        for (item, tokens) in entries {
            if tokens.len() != len {
                bail!(Argument, "item {item} has {} tokens, expected {len}", tokens.len());
            }
            if trie.terminals.contains_key(item) {
                bail!(Argument, "duplicate candidate {item}");
            }
            let mut node = ROOT;
            for &t in tokens {
                node = match trie.nodes[node].children.binary_search_by_key(&t, |c| c.0) {
                    Ok(i) => trie.nodes[node].children[i].1,
                    Err(i) => {
                        let id = trie.nodes.len();
                        trie.nodes.push(Node { children: Vec::new(), parent: Some(node), terminal_item: None, size: 0 });
                        trie.nodes[node].children.insert(i, (t, id));
                        id
                    }
                };
            }
            if let Some(other) = trie.nodes[node].terminal_item {
                bail!(Integrity, "items {other} and {item} have the same token string");
            }
            trie.nodes[node].terminal_item = Some(*item);
            trie.terminals.insert(*item, node);
            let mut walk = Some(node);
            while let Some(n) = walk {
                trie.nodes[n].size += 1;
                walk = trie.nodes[n].parent;
            }
        }
        Ok(trie)
    }

    /// Trie over the semantic-ID token strings of `candidates`.
    pub fn from_candidates(candidates: &[ItemId], table: &SidTable, vocab: &TokenVocabulary) -> Result<Self> {
        let mut entries = Vec::with_capacity(candidates.len());
        for &c in candidates {
            let sid = table.get(c).ok_or(Error::MissingSid(c))?;
            entries.push((c, vocab.tokens_of(sid)?));
        }
        Self::build(&entries)
    }

    /// Trie whose "token string" for the candidate at position `j` is `[j]`;
    /// drives the local-index head.
    pub fn over_positions(candidates: &[ItemId]) -> Result<Self> {
        let entries: Vec<_> = candidates.iter().enumerate().map(|(j, &c)| (c, vec![j])).collect();
        Self::build(&entries)
    }

    pub fn item_token_len(&self) -> usize {
        self.item_token_len
    }

    pub fn num_items(&self) -> usize {
        self.terminals.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.terminals.keys().copied()
    }

    pub fn root(&self) -> TrieCursor {
        TrieCursor { node: ROOT, depth: 0 }
    }

    pub fn new_state(&self) -> TrieState {
        TrieState { pruned_below: vec![0; self.nodes.len()], pruned: BTreeSet::new() }
    }

    pub fn live_count(&self, state: &TrieState, node: usize) -> u32 {
        self.nodes[node].size - state.pruned_below[node]
    }

    /// Child node reached from `node` by `token`, if any.
    pub fn child(&self, node: usize, token: TokenId) -> Option<usize> {
        let children = &self.nodes[node].children;
        children.binary_search_by_key(&token, |c| c.0).ok().map(|i| children[i].1)
    }

    /// Tokens that continue at least one unpruned candidate, ascending.
    pub fn legal_tokens(&self, state: &TrieState, cursor: TrieCursor) -> Result<Vec<TokenId>> {
        if self.live_count(state, cursor.node) == 0 {
            bail!(State, "cursor sits on node {} whose subtree is fully pruned", cursor.node);
        }
        Ok(self.nodes[cursor.node]
            .children
            .iter()
            .filter(|(_, child)| self.live_count(state, *child) > 0)
            .map(|(t, _)| *t)
            .collect())
    }

    /// Step the cursor along `token`. When an item's last token is consumed
    /// the cursor returns to the root and the item is reported; pruning it is
    /// left to the caller.
    pub fn advance(&self, state: &TrieState, cursor: TrieCursor, token: TokenId) -> Result<(TrieCursor, Option<ItemId>)> {
        let next = match self.child(cursor.node, token) {
            Some(n) if self.live_count(state, n) > 0 => n,
            _ => return Err(Error::Constraint { token, legal: self.legal_tokens(state, cursor)? }),
        };
        let depth = cursor.depth + 1;
        if depth == self.item_token_len {
            let item = self.nodes[next].terminal_item.expect("leaf depth holds a terminal");
            Ok((self.root(), Some(item)))
        } else {
            Ok((TrieCursor { node: next, depth }, None))
        }
    }

    pub fn prune(&self, state: &mut TrieState, item: ItemId) -> Result<()> {
        let Some(&leaf) = self.terminals.get(&item) else {
            bail!(State, "item {item} is not a candidate of this trie");
        };
        if !state.pruned.insert(item) {
            bail!(State, "item {item} was already pruned");
        }
        let mut walk = Some(leaf);
        while let Some(n) = walk {
            state.pruned_below[n] += 1;
            walk = self.nodes[n].parent;
        }
        Ok(())
    }

    /// Token string of a candidate, recovered by walking up from its leaf.
    pub fn token_string(&self, item: ItemId) -> Option<Vec<TokenId>> {
        let mut node = *self.terminals.get(&item)?;
        let mut out = Vec::with_capacity(self.item_token_len);
        while let Some(parent) = self.nodes[node].parent {
            let (t, _) = self.nodes[parent].children.iter().find(|(_, c)| *c == node)?;
            out.push(*t);
            node = parent;
        }
        out.reverse();
        Some(out)
    }

    /// Graphviz rendering with live counts, for debugging.
    pub fn to_dot(&self, state: &TrieState) -> String {
        let mut s = String::from("digraph trie {\n  node [fontname=\"monospace\"];\n");
        for (i, node) in self.nodes.iter().enumerate() {
            let live = self.live_count(state, i);
            let label = match node.terminal_item {
                Some(item) => format!("item {item} ({live})"),
                None if i == ROOT => format!("root ({live})"),
                None => format!("({live})"),
            };
            let style = if live == 0 { ", style=dashed" } else { "" };
            let shape = if node.terminal_item.is_some() { ", shape=box" } else { "" };
            let _ = writeln!(s, "  n{i} [label=\"{label}\"{shape}{style}];");
            for (t, c) in &node.children {
                let _ = writeln!(s, "  n{i} -> n{c} [label=\"{t}\"];");
            }
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: ItemId = 10;
    const B: ItemId = 20;

    fn ab() -> CandidateTrie {
        CandidateTrie::build(&[(A, vec![5, 7, 2, 9]), (B, vec![5, 7, 3, 1])]).unwrap()
    }

    fn walk(trie: &CandidateTrie, state: &TrieState, tokens: &[TokenId]) -> Result<(TrieCursor, Option<ItemId>)> {
        let mut cur = trie.root();
        let mut done = None;
        for &t in tokens {
            let (c, item) = trie.advance(state, cur, t)?;
            cur = c;
            done = item;
        }
        Ok((cur, done))
    }

    #[test]
    fn shared_prefix_construction() {
        let trie = ab();
        let st = trie.new_state();
        assert_eq!(trie.legal_tokens(&st, trie.root()).unwrap(), vec![5]);
        let (cur, none) = walk(&trie, &st, &[5, 7]).unwrap();
        assert_eq!(none, None);
        assert_eq!(cur.depth, 2);
        assert_eq!(trie.legal_tokens(&st, cur).unwrap(), vec![2, 3]);
        assert_eq!(trie.live_count(&st, 0), 2);
    }

    #[test]
    fn full_walk_completes_and_resets() {
        let trie = ab();
        let st = trie.new_state();
        let (cur, item) = walk(&trie, &st, &[5, 7, 2, 9]).unwrap();
        assert_eq!(item, Some(A));
        assert_eq!(cur, trie.root());
    }

    #[test]
    fn illegal_token_reports_legal_set() {
        let trie = ab();
        let st = trie.new_state();
        match trie.advance(&st, trie.root(), 9) {
            Err(Error::Constraint { token: 9, legal }) => assert_eq!(legal, vec![5]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pruning_hides_consumed_items() {
        let trie = ab();
        let mut st = trie.new_state();
        trie.prune(&mut st, A).unwrap();
        assert_eq!(trie.legal_tokens(&st, trie.root()).unwrap(), vec![5]);
        let (cur, _) = walk(&trie, &st, &[5, 7]).unwrap();
        assert_eq!(trie.legal_tokens(&st, cur).unwrap(), vec![3]);
        assert!(matches!(walk(&trie, &st, &[5, 7, 2]), Err(Error::Constraint { .. })));
        assert!(matches!(trie.prune(&mut st, A), Err(Error::State(_))));
        trie.prune(&mut st, B).unwrap();
        assert_eq!(trie.live_count(&st, 0), 0);
        assert!(matches!(trie.legal_tokens(&st, trie.root()), Err(Error::State(_))));
    }

    #[test]
    fn singleton_is_a_single_path() {
        let trie = CandidateTrie::build(&[(1, vec![4, 4, 4])]).unwrap();
        let st = trie.new_state();
        assert_eq!(trie.live_count(&st, 0), 1);
        assert_eq!(trie.num_nodes(), 4);
        assert_eq!(trie.token_string(1), Some(vec![4, 4, 4]));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CandidateTrie::build(&[]).is_err());
        assert!(CandidateTrie::build(&[(1, vec![1, 2]), (2, vec![1])]).is_err());
        assert!(CandidateTrie::build(&[(1, vec![1, 2]), (1, vec![1, 3])]).is_err());
        assert!(CandidateTrie::build(&[(1, vec![1, 2]), (2, vec![1, 2])]).is_err());
    }

    #[test]
    fn dot_dump_mentions_every_item() {
        let trie = ab();
        let mut st = trie.new_state();
        trie.prune(&mut st, B).unwrap();
        let dot = trie.to_dot(&st);
        assert!(dot.starts_with("digraph trie"));
        assert!(dot.contains("item 10 (1)"));
        assert!(dot.contains("item 20 (0)"));
    }
}
