//! Semantic IDs via residual k-means quantization, and the global token
//! vocabulary the reranker generates over.
//!
//! Token layout, for `M` levels of `S` codes each:
//!
//! ```text
//! [0, S)            level-1 codes
//! [S, 2S)           level-2 codes
//! ...
//! [M·S, M·S + Z)    disambiguation tokens (Z = 0 when the corpus is collision free)
//! M·S + Z + 0..4    PAD, BOS, SEP, RANK
//! ```

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{bail, Error, Result};
use crate::kmeans::{self, KMeansParams};
use crate::rng;
use crate::tensor::Matrix;
use crate::{ItemId, TokenId};

/// Residual quantizer: one codebook per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqCodebooks {
    pub codebook_size: usize,
    pub dim: usize,
    /// `levels[m]` is the `codebook_size × dim` centroid matrix of level `m + 1`.
    pub levels: Vec<Matrix>,
    /// Mean squared norm of the residual left after each level.
    pub mean_sq_residual: Vec<f64>,
}

impl RqCodebooks {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Greedy residual encoding; returns the codes and the final residual.
    pub fn encode(&self, embedding: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let mut residual = embedding.to_vec();
        let mut codes = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let (c, _) = kmeans::nearest(&residual, level);
            for (r, v) in residual.iter_mut().zip(level.row(c)) {
                *r -= v;
            }
            codes.push(c);
        }
        (codes, residual)
    }

    pub fn reconstruct(&self, codes: &[usize]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dim];
        for (level, &c) in self.levels.iter().zip(codes) {
            for (o, v) in out.iter_mut().zip(level.row(c)) {
                *o += v;
            }
        }
        out
    }
}

/// Fit `m` residual k-means levels over the corpus embeddings.
pub fn fit_rq_kmeans(corpus: &Corpus, m: usize, codebook_size: usize, iters: usize, seed: u64) -> Result<RqCodebooks> {
    let Some(dim) = corpus.dim() else {
        bail!(Argument, "cannot fit codebooks on an empty corpus");
    };
    if m == 0 || codebook_size == 0 {
        bail!(Argument, "need at least one level and one code per level");
    }
    if iters == 0 {
        bail!(Argument, "iters must be at least 1");
    }
    let n = corpus.len();
    let keys: Vec<u64> = corpus.items().iter().map(|i| i.item_id).collect();
    let mut residuals = Matrix::from_fn(n, dim, |i, j| corpus.items()[i].embedding[j]);
    let mut levels = Vec::with_capacity(m);
    let mut msr = Vec::with_capacity(m);
    for level in 0..m {
        let fit = kmeans::kmeans(
            &residuals,
            &keys,
            KMeansParams { k: codebook_size, iters, seed: rng::derive(seed, level as u64) },
        )?;
        for i in 0..n {
            let c = fit.assignments[i];
            for j in 0..dim {
                residuals.data[i * dim + j] -= fit.centroids.get(c, j);
            }
        }
        msr.push(fit.mean_sq_error);
        levels.push(fit.centroids);
    }
    Ok(RqCodebooks { codebook_size, dim, levels, mean_sq_residual: msr })
}

/// An item's global identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<usize>,
    #[serde(default)]
    pub disamb: usize,
}

/// Semantic IDs of every item in a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SidTable {
    pub depth: usize,
    pub codebook_size: usize,
    sids: BTreeMap<ItemId, SemanticId>,
}

impl SidTable {
    /// Build a table from explicit ids, checking ranges and uniqueness.
    pub fn from_entries(
        depth: usize,
        codebook_size: usize,
        entries: impl IntoIterator<Item = (ItemId, SemanticId)>,
    ) -> Result<Self> {
        let sids: BTreeMap<ItemId, SemanticId> = entries.into_iter().collect();
        let mut seen = BTreeMap::new();
        for (&item, sid) in &sids {
            if sid.codes.len() != depth {
                bail!(Integrity, "item {item} has {} codes, expected {depth}", sid.codes.len());
            }
            if let Some(c) = sid.codes.iter().find(|&&c| c >= codebook_size) {
                bail!(Integrity, "item {item} has code {c} outside codebook of size {codebook_size}");
            }
            if let Some(other) = seen.insert(sid.clone(), item) {
                bail!(Integrity, "items {other} and {item} share semantic id {:?}", sid);
            }
        }
        Ok(Self { depth, codebook_size, sids })
    }

    pub fn get(&self, item: ItemId) -> Option<&SemanticId> {
        self.sids.get(&item)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &SemanticId)> + '_ {
        self.sids.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.sids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sids.is_empty()
    }

    /// Largest disambiguation index in use; 0 when no codes collide.
    pub fn max_disamb(&self) -> usize {
        self.sids.values().map(|s| s.disamb).max().unwrap_or(0)
    }

    pub fn has_collisions(&self) -> bool {
        self.max_disamb() > 0
    }

    /// Items sharing a code tuple with at least one other item, beyond the
    /// first of each group.
    pub fn collision_count(&self) -> usize {
        self.sids.values().filter(|s| s.disamb > 0).count()
    }
}

/// Greedy residual assignment of every corpus item. Items whose code tuples
/// collide get `disamb = 0, 1, 2, …` in ascending item id order.
pub fn assign_sids(corpus: &Corpus, codebooks: &RqCodebooks) -> Result<SidTable> {
    if corpus.dim().is_some_and(|d| d != codebooks.dim) {
        bail!(Argument, "corpus dimension differs from codebook dimension {}", codebooks.dim);
    }
    let mut by_codes: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(corpus.len());
    // corpus.ids() is ascending, which fixes the disambiguation order
    for id in corpus.ids() {
        let item = corpus.get(id).expect("id from corpus");
        let (codes, _) = codebooks.encode(&item.embedding);
        let slot = by_codes.entry(codes.clone()).or_insert(0);
        entries.push((id, SemanticId { codes, disamb: *slot }));
        *slot += 1;
    }
    SidTable::from_entries(codebooks.depth(), codebooks.codebook_size, entries)
}

/// One atomic token per item (ascending id order). Used by the atomic-ID
/// control in cold-start experiments.
pub fn atomic_sids(corpus: &Corpus) -> Result<SidTable> {
    let n = corpus.len().max(1);
    SidTable::from_entries(1, n, corpus.ids().enumerate().map(|(i, id)| (id, SemanticId { codes: alloc::vec![i], disamb: 0 })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// `level` is 0-based.
    Code { level: usize, code: usize },
    Disamb(usize),
    Pad,
    Bos,
    Sep,
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub depth: usize,
    pub codebook_size: usize,
    /// Number of disambiguation tokens; 0 for a collision-free corpus.
    pub disamb_size: usize,
}

impl TokenVocabulary {
    pub fn for_table(table: &SidTable) -> Self {
        let disamb_size = if table.has_collisions() { table.max_disamb() + 1 } else { 0 };
        Self { depth: table.depth, codebook_size: table.codebook_size, disamb_size }
    }

    fn specials_base(&self) -> usize {
        self.depth * self.codebook_size + self.disamb_size
    }

    pub fn pad(&self) -> TokenId {
        self.specials_base()
    }

    pub fn bos(&self) -> TokenId {
        self.specials_base() + 1
    }

    pub fn sep(&self) -> TokenId {
        self.specials_base() + 2
    }

    pub fn rank(&self) -> TokenId {
        self.specials_base() + 3
    }

    pub fn size(&self) -> usize {
        self.specials_base() + 4
    }

    /// Tokens per item: the depth, plus one when disambiguation is in use.
    pub fn item_token_len(&self) -> usize {
        self.depth + usize::from(self.disamb_size > 0)
    }

    pub fn kind(&self, token: TokenId) -> Result<TokenKind> {
        let codes = self.depth * self.codebook_size;
        let base = self.specials_base();
        Ok(if token < codes {
            TokenKind::Code { level: token / self.codebook_size, code: token % self.codebook_size }
        } else if token < base {
            TokenKind::Disamb(token - codes)
        } else {
            match token - base {
                0 => TokenKind::Pad,
                1 => TokenKind::Bos,
                2 => TokenKind::Sep,
                3 => TokenKind::Rank,
                _ => bail!(Argument, "token {token} is outside the vocabulary of size {}", self.size()),
            }
        })
    }

    pub fn token(&self, kind: TokenKind) -> Result<TokenId> {
        Ok(match kind {
            TokenKind::Code { level, code } => {
                if level >= self.depth || code >= self.codebook_size {
                    bail!(Argument, "code {code} at level {level} is out of range");
                }
                level * self.codebook_size + code
            }
            TokenKind::Disamb(d) => {
                if d >= self.disamb_size {
                    bail!(Argument, "disambiguation index {d} is out of range");
                }
                self.depth * self.codebook_size + d
            }
            TokenKind::Pad => self.pad(),
            TokenKind::Bos => self.bos(),
            TokenKind::Sep => self.sep(),
            TokenKind::Rank => self.rank(),
        })
    }

    pub fn tokens_of(&self, sid: &SemanticId) -> Result<Vec<TokenId>> {
        if sid.codes.len() != self.depth {
            bail!(Argument, "semantic id has {} codes, vocabulary depth is {}", sid.codes.len(), self.depth);
        }
        let mut out = Vec::with_capacity(self.item_token_len());
        for (level, &code) in sid.codes.iter().enumerate() {
            out.push(self.token(TokenKind::Code { level, code })?);
        }
        if self.disamb_size > 0 {
            out.push(self.token(TokenKind::Disamb(sid.disamb))?);
        } else if sid.disamb != 0 {
            bail!(Argument, "vocabulary has no disambiguation tokens but disamb = {}", sid.disamb);
        }
        Ok(out)
    }

    pub fn sid_of(&self, tokens: &[TokenId]) -> Result<SemanticId> {
        if tokens.len() != self.item_token_len() {
            bail!(Argument, "expected {} tokens per item, got {}", self.item_token_len(), tokens.len());
        }
        let mut codes = Vec::with_capacity(self.depth);
        for (pos, &t) in tokens[..self.depth].iter().enumerate() {
            match self.kind(t)? {
                TokenKind::Code { level, code } if level == pos => codes.push(code),
                other => bail!(Argument, "token {t} ({other:?}) cannot appear at item position {pos}"),
            }
        }
        let disamb = match tokens.get(self.depth) {
            None => 0,
            Some(&t) => match self.kind(t)? {
                TokenKind::Disamb(d) => d,
                other => bail!(Argument, "token {t} ({other:?}) is not a disambiguation token"),
            },
        };
        Ok(SemanticId { codes, disamb })
    }

    pub fn item_tokens(&self, table: &SidTable, item: ItemId) -> Result<Vec<TokenId>> {
        let sid = table.get(item).ok_or(Error::MissingSid(item))?;
        self.tokens_of(sid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Item};
    use alloc::vec;

    fn corpus_of(points: &[Vec<f64>]) -> Corpus {
        Corpus::from_items(
            points.iter().enumerate().map(|(i, p)| Item { item_id: i as u64, embedding: p.clone(), text: None }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn depth_four_with_256_codes() {
        let data = generate_synthetic(1, 300, 1, 8, 8).unwrap();
        let cb = fit_rq_kmeans(&data.corpus, 4, 256, 5, 0).unwrap();
        assert_eq!(cb.depth(), 4);
        assert!(cb.levels.iter().all(|l| l.shape() == (256, 8)));
    }

    #[test]
    fn one_code_per_point_leaves_no_residual() {
        let points: Vec<Vec<f64>> =
            (0..256).map(|i| vec![(i % 16) as f64, (i / 16) as f64, libm::sin(i as f64)]).collect();
        let corpus = corpus_of(&points);
        let cb = fit_rq_kmeans(&corpus, 2, 256, 3, 4).unwrap();
        assert_eq!(cb.mean_sq_residual[0], 0.0);
        for it in corpus.items() {
            let (_, res) = cb.encode(&it.embedding);
            assert!(res.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn exact_centroid_match_selects_zero_residual_entries() {
        let l1 = Matrix::from_vec(2, 2, vec![1.0, 2.0, -3.0, 0.5]);
        let l2 = Matrix::from_vec(2, 2, vec![0.7, 0.7, 0.0, 0.0]);
        let cb = RqCodebooks { codebook_size: 2, dim: 2, levels: vec![l1, l2], mean_sq_residual: vec![0.0; 2] };
        let (codes, res) = cb.encode(&[-3.0, 0.5]);
        assert_eq!(codes, vec![1, 1]);
        assert_eq!(res, vec![0.0, 0.0]);
    }

    #[test]
    fn identical_embeddings_are_disambiguated_by_id() {
        let corpus = corpus_of(&[vec![1.0, 1.0], vec![5.0, 5.0], vec![1.0, 1.0]]);
        let cb = fit_rq_kmeans(&corpus, 1, 2, 5, 1).unwrap();
        let table = assign_sids(&corpus, &cb).unwrap();
        assert_eq!(table.get(0).unwrap().codes, table.get(2).unwrap().codes);
        assert_eq!(table.get(0).unwrap().disamb, 0);
        assert_eq!(table.get(2).unwrap().disamb, 1);
        assert_eq!(table.collision_count(), 1);
        let vocab = TokenVocabulary::for_table(&table);
        assert_eq!(vocab.item_token_len(), 2);
        for (_, sid) in table.iter() {
            assert_eq!(vocab.tokens_of(sid).unwrap().len(), 2);
        }
    }

    #[test]
    fn offset_construction() {
        let vocab = TokenVocabulary { depth: 4, codebook_size: 256, disamb_size: 0 };
        let sid = SemanticId { codes: vec![3, 0, 255, 17], disamb: 0 };
        assert_eq!(vocab.tokens_of(&sid).unwrap(), vec![3, 256, 767, 785]);
        assert_eq!(vocab.sid_of(&[3, 256, 767, 785]).unwrap(), sid);
        let bad = SemanticId { codes: vec![3, 0, 256, 17], disamb: 0 };
        assert!(vocab.tokens_of(&bad).is_err());
        assert_eq!(vocab.size(), 1024 + 4);
    }

    #[test]
    fn specials_and_kinds_form_a_bijection() {
        let vocab = TokenVocabulary { depth: 3, codebook_size: 5, disamb_size: 2 };
        for t in 0..vocab.size() {
            let kind = vocab.kind(t).unwrap();
            assert_eq!(vocab.token(kind).unwrap(), t);
        }
        assert!(vocab.kind(vocab.size()).is_err());
        assert_eq!(vocab.kind(vocab.sep()).unwrap(), TokenKind::Sep);
    }

    #[test]
    fn atomic_table_is_one_token_per_item() {
        let data = generate_synthetic(2, 20, 1, 3, 2).unwrap();
        let table = atomic_sids(&data.corpus).unwrap();
        let vocab = TokenVocabulary::for_table(&table);
        assert_eq!(vocab.item_token_len(), 1);
        assert_eq!(vocab.size(), 24);
    }
}
