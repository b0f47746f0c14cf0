//! Prompt templates and their embedding-space representation.
//!
//! A template is an ordered list of slots framed by start/end markers. Fixed
//! slots hold vocabulary tokens; learnable slots hold free embedding rows
//! that the optimizers update.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Token table with fixed embeddings. Frozen after construction.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    table: Arc<Array2<f64>>,
    sos: usize,
    eos: usize,
    neutral: usize,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, table: Array2<f64>, sos: usize, eos: usize, neutral: usize) -> Self {
        assert_eq!(words.len(), table.nrows());
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index, table: Arc::new(table), sos, eos, neutral }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn neutral(&self) -> usize {
        self.neutral
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn token_id(&self, text: &str) -> Result<usize> {
        self.index
            .get(text)
            .copied()
            .ok_or_else(|| Error::UnknownToken { token: text.to_string() })
    }

    pub fn embedding(&self, id: usize) -> Array1<f64> {
        self.table.row(id).to_owned()
    }

    pub fn table(&self) -> Arc<Array2<f64>> {
        self.table.clone()
    }

    /// Per-coordinate mean and standard deviation over the whole table.
    pub fn coordinate_stats(&self) -> (Array1<f64>, Array1<f64>) {
        let v = self.size() as f64;
        let mut mean = Array1::<f64>::zeros(self.dim());
        for row in self.table.rows() {
            mean += &row;
        }
        mean.mapv_inplace(|x| x / v);
        let mut var = Array1::<f64>::zeros(self.dim());
        for row in self.table.rows() {
            let d = &row.to_owned() - &mean;
            var += &d.mapv(|x| x * x);
        }
        var.mapv_inplace(|x| (x / v).sqrt());
        (mean, var)
    }
}

/// A token sequence with start/end framing, every index inside `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Contract("token sequence needs at least SOS and EOS".into()));
        }
        if tokens[0] != vocab.sos() {
            return Err(Error::Contract("token sequence must start with the SOS marker".into()));
        }
        if *tokens.last().unwrap() != vocab.eos() {
            return Err(Error::Contract("token sequence must end with the EOS marker".into()));
        }
        if let Some(bad) = tokens.iter().find(|t| **t >= vocab.size()) {
            return Err(Error::Contract(format!(
                "token index {bad} outside vocabulary range [0, {})",
                vocab.size()
            )));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Inner tokens rendered as text (markers stripped).
    pub fn text(&self, vocab: &Vocabulary) -> String {
        self.tokens[1..self.tokens.len() - 1]
            .iter()
            .map(|t| vocab.word(*t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One template position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    /// A fixed vocabulary token.
    Fixed(usize),
    /// A learnable embedding row, identified by slot index.
    Learnable(usize),
}

/// Ordered slots, always framed `[SOS, ..., EOS]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    slots: Vec<Slot>,
}

impl PromptTemplate {
    /// `[SOS, prefix tokens..., learnable slots..., EOS]`. The prefix is
    /// whitespace-split and looked up verbatim; unknown words are rejected
    /// with the offending text.
    pub fn from_prefix(vocab: &Vocabulary, prefix: &str, learnable_slots: usize) -> Result<Self> {
        let mut slots = vec![Slot::Fixed(vocab.sos())];
        for word in prefix.split_whitespace() {
            slots.push(Slot::Fixed(vocab.token_id(word)?));
        }
        for k in 0..learnable_slots {
            slots.push(Slot::Learnable(k));
        }
        slots.push(Slot::Fixed(vocab.eos()));
        Ok(PromptTemplate { slots })
    }

    /// A fully fixed template from text, no learnable slots.
    pub fn fixed_text(vocab: &Vocabulary, text: &str) -> Result<Self> {
        Self::from_prefix(vocab, text, 0)
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn learnable_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Learnable(_)))
            .count()
    }

    /// Template positions of learnable slots, ordered by slot index.
    pub fn learnable_positions(&self) -> Vec<usize> {
        let mut pos: Vec<(usize, usize)> = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(p, s)| match s {
                Slot::Learnable(k) => Some((*k, p)),
                Slot::Fixed(_) => None,
            })
            .collect();
        pos.sort();
        pos.into_iter().map(|(_, p)| p).collect()
    }

    /// The frozen part of the embedding matrix: vocabulary embeddings at
    /// fixed positions, zero rows at learnable positions.
    pub fn frozen_rows(&self, vocab: &Vocabulary) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((self.slots.len(), vocab.dim()));
        for (p, slot) in self.slots.iter().enumerate() {
            if let Slot::Fixed(t) = slot {
                m.row_mut(p).assign(&vocab.embedding(*t));
            }
        }
        m
    }

    /// Fill learnable slots with the given token choices and render tokens.
    pub fn token_sequence(&self, vocab: &Vocabulary, hard_choices: &[usize]) -> Result<TokenSequence> {
        if hard_choices.len() != self.learnable_count() {
            return Err(Error::Contract(format!(
                "expected {} hard token choices, got {}",
                self.learnable_count(),
                hard_choices.len()
            )));
        }
        let tokens = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Fixed(t) => *t,
                Slot::Learnable(k) => hard_choices[*k],
            })
            .collect();
        TokenSequence::new(tokens, vocab)
    }

    /// Human-readable description, learnable slots rendered as `<slotN>`.
    pub fn describe(&self, vocab: &Vocabulary) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Fixed(t) => vocab.word(*t).to_string(),
                Slot::Learnable(k) => format!("<slot{k}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Row provenance in an [`EmbeddingSequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Frozen,
    Learnable(usize),
}

/// Concrete `N x d` embedding matrix with per-row provenance.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    rows: Array2<f64>,
    provenance: Vec<Provenance>,
}

impl EmbeddingSequence {
    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn from_rows(rows: Array2<f64>, provenance: Vec<Provenance>) -> Self {
        assert_eq!(rows.nrows(), provenance.len());
        EmbeddingSequence { rows, provenance }
    }

    /// The learnable rows as a matrix in slot order.
    pub fn learnable_rows(&self) -> Array2<f64> {
        let mut slots: Vec<(usize, usize)> = self
            .provenance
            .iter()
            .enumerate()
            .filter_map(|(p, pr)| match pr {
                Provenance::Learnable(k) => Some((*k, p)),
                Provenance::Frozen => None,
            })
            .collect();
        slots.sort();
        let mut out = Array2::<f64>::zeros((slots.len(), self.dim()));
        for (i, (_, p)) in slots.iter().enumerate() {
            out.row_mut(i).assign(&self.rows.row(*p));
        }
        out
    }
}

/// Fill a template: frozen slots from the vocabulary table, learnable slots
/// from `learnable` (row k at slot k). Positions are preserved.
pub fn encode_prompt(
    template: &PromptTemplate,
    vocab: &Vocabulary,
    learnable: &Array2<f64>,
) -> Result<EmbeddingSequence> {
    if learnable.nrows() != template.learnable_count() {
        return Err(Error::Contract(format!(
            "learnable row count {} does not match template slot count {}",
            learnable.nrows(),
            template.learnable_count()
        )));
    }
    if template.learnable_count() > 0 && learnable.ncols() != vocab.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("learnable rows of width {}", vocab.dim()),
            got: format!("width {}", learnable.ncols()),
        });
    }
    let mut rows = template.frozen_rows(vocab);
    let mut provenance = vec![Provenance::Frozen; template.len()];
    for (p, slot) in template.slots().iter().enumerate() {
        if let Slot::Learnable(k) = slot {
            rows.row_mut(p).assign(&learnable.row(*k));
            provenance[p] = Provenance::Learnable(*k);
        }
    }
    Ok(EmbeddingSequence { rows, provenance })
}

/// Build the embedding matrix inside a graph, with one leaf per learnable row.
/// Returns the assembled `N x d` node plus the row leaves in slot order.
pub fn assemble_prompt_node(
    g: &mut Graph,
    template: &PromptTemplate,
    vocab: &Vocabulary,
    learnable: &Array2<f64>,
) -> Result<(NodeId, Vec<NodeId>)> {
    if learnable.nrows() != template.learnable_count() {
        return Err(Error::Contract(format!(
            "learnable row count {} does not match template slot count {}",
            learnable.nrows(),
            template.learnable_count()
        )));
    }
    let frozen = Arc::new(template.frozen_rows(vocab));
    let positions = template.learnable_positions();
    let leaves: Vec<NodeId> = (0..learnable.nrows())
        .map(|k| g.leaf_vec(learnable.row(k).to_owned()))
        .collect();
    let emb = g.assemble_rows(frozen, positions, &leaves);
    Ok((emb, leaves))
}

/// Same assembly but with caller-provided row nodes (used by the hard-prompt
/// path where rows come from relaxed vocabulary selections).
pub fn assemble_prompt_node_from_rows(
    g: &mut Graph,
    template: &PromptTemplate,
    vocab: &Vocabulary,
    rows: &[NodeId],
) -> Result<NodeId> {
    if rows.len() != template.learnable_count() {
        return Err(Error::Contract(format!(
            "row node count {} does not match template slot count {}",
            rows.len(),
            template.learnable_count()
        )));
    }
    let frozen = Arc::new(template.frozen_rows(vocab));
    let positions = template.learnable_positions();
    Ok(g.assemble_rows(frozen, positions, rows))
}

/// Initialization strategy for learnable rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Every row copies the designated neutral token's embedding.
    NeutralTokenCopy,
    /// Rows are i.i.d. normal with the table's per-coordinate mean/std.
    GaussianMatched,
}

/// Initial learnable rows for a template.
pub fn init_learnable(
    template: &PromptTemplate,
    vocab: &Vocabulary,
    strategy: InitStrategy,
    seed: u64,
) -> Array2<f64> {
    let n = template.learnable_count();
    let d = vocab.dim();
    match strategy {
        InitStrategy::NeutralTokenCopy => {
            let row = vocab.embedding(vocab.neutral());
            let mut out = Array2::<f64>::zeros((n, d));
            for k in 0..n {
                out.row_mut(k).assign(&row);
            }
            out
        }
        InitStrategy::GaussianMatched => {
            let (mean, std) = vocab.coordinate_stats();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_fn((n, d), |(_, j)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean[j] + std[j] * z
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocabulary {
        let words: Vec<String> = ["<sos>", "<eos>", "thing", "the", "shape", "of", "circle", "square"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let table = Array2::from_shape_fn((8, 4), |(i, j)| ((i * 4 + j) as f64 * 0.17).sin());
        Vocabulary::new(words, table, 0, 1, 2)
    }

    #[test]
    fn minimal_template_has_learnable_middle_row() {
        let vocab = tiny_vocab();
        let t = PromptTemplate::from_prefix(&vocab, "", 1).unwrap();
        assert_eq!(t.len(), 3);
        let learnable = Array2::from_elem((1, 4), 0.25);
        let seq = encode_prompt(&t, &vocab, &learnable).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.provenance()[0], Provenance::Frozen);
        assert_eq!(seq.provenance()[1], Provenance::Learnable(0));
        assert_eq!(seq.provenance()[2], Provenance::Frozen);
        assert_eq!(seq.rows().row(1).to_vec(), vec![0.25; 4]);
    }

    #[test]
    fn zero_learnable_equals_plain_vocabulary_embedding() {
        let vocab = tiny_vocab();
        let t = PromptTemplate::fixed_text(&vocab, "the shape of").unwrap();
        let seq = encode_prompt(&t, &vocab, &Array2::zeros((0, 4))).unwrap();
        let expect = [vocab.sos(), 3, 4, 5, vocab.eos()];
        for (p, tok) in expect.iter().enumerate() {
            assert_eq!(
                seq.rows().row(p).to_vec(),
                vocab.embedding(*tok).to_vec(),
                "row {p} must be the plain table embedding"
            );
        }
    }

    #[test]
    fn prefix_rows_bit_equal_table_lookup() {
        // brute-force oracle: fetch each prefix word's row straight from the table
        let vocab = tiny_vocab();
        let t = PromptTemplate::from_prefix(&vocab, "the shape of", 1).unwrap();
        let learnable = Array2::from_elem((1, 4), -1.5);
        let seq = encode_prompt(&t, &vocab, &learnable).unwrap();
        let oracle: Vec<Array1<f64>> = ["the", "shape", "of"]
            .iter()
            .map(|w| {
                let id = vocab.token_id(w).unwrap();
                vocab.table().row(id).to_owned()
            })
            .collect();
        for (i, row) in oracle.iter().enumerate() {
            let got = seq.rows().row(i + 1).to_owned();
            assert!(
                got.iter().zip(row.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "prefix row {i} must be bit-identical to the table row"
            );
        }
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let vocab = tiny_vocab();
        let t = PromptTemplate::from_prefix(&vocab, "", 2).unwrap();
        let err = encode_prompt(&t, &vocab, &Array2::zeros((1, 4))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unknown_token_rejected_with_text() {
        let vocab = tiny_vocab();
        let err = PromptTemplate::from_prefix(&vocab, "the blorp of", 1).unwrap_err();
        match err {
            Error::UnknownToken { token } => assert_eq!(token, "blorp"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn neutral_copy_is_bit_identical() {
        let vocab = tiny_vocab();
        let t = PromptTemplate::from_prefix(&vocab, "", 3).unwrap();
        let init = init_learnable(&t, &vocab, InitStrategy::NeutralTokenCopy, 9);
        let neutral = vocab.embedding(vocab.neutral());
        for k in 0..3 {
            assert!(init
                .row(k)
                .iter()
                .zip(neutral.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn gaussian_matched_is_reproducible() {
        let vocab = tiny_vocab();
        let t = PromptTemplate::from_prefix(&vocab, "", 2).unwrap();
        let a = init_learnable(&t, &vocab, InitStrategy::GaussianMatched, 1234);
        let b = init_learnable(&t, &vocab, InitStrategy::GaussianMatched, 1234);
        assert_eq!(a, b);
        let c = init_learnable(&t, &vocab, InitStrategy::GaussianMatched, 1235);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_matched_statistics_track_table() {
        // oracle: the table's own per-coordinate statistics
        let vocab = tiny_vocab();
        let (mean, std) = vocab.coordinate_stats();
        // 10^4 sampled rows via a template with many slots
        let mut slots = vec![Slot::Fixed(vocab.sos())];
        for k in 0..10_000 {
            slots.push(Slot::Learnable(k));
        }
        slots.push(Slot::Fixed(vocab.eos()));
        let t = PromptTemplate { slots };
        let init = init_learnable(&t, &vocab, InitStrategy::GaussianMatched, 77);
        for j in 0..vocab.dim() {
            let col: Vec<f64> = init.column(j).to_vec();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64).sqrt();
            // 5% of the coordinate scale
            let tol = 0.05 * (std[j].abs() + mean[j].abs()).max(0.1);
            assert!((m - mean[j]).abs() < tol, "coord {j}: mean {m} vs {}", mean[j]);
            assert!((s - std[j]).abs() / std[j] < 0.05, "coord {j}: std {s} vs {}", std[j]);
        }
    }

    #[test]
    fn token_sequence_validates_framing() {
        let vocab = tiny_vocab();
        assert!(TokenSequence::new(vec![0, 6, 1], &vocab).is_ok());
        assert!(TokenSequence::new(vec![6, 1], &vocab).is_err());
        assert!(TokenSequence::new(vec![0, 6], &vocab).is_err());
        assert!(TokenSequence::new(vec![0, 99, 1], &vocab).is_err());
    }
}
