use std::io::Write;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use super::KbError;
use crate::scalar::Scalar;

/// PPMI co-occurrence rows, one per vocabulary id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    rows: Vec<Vec<f64>>,
    window: usize,
    /// Non-reserved ids that never took part in a co-occurrence pair. Their rows are zero.
    degenerate: Vec<TokenId>,
}

impl EmbeddingTable {
    pub fn row(&self, id: TokenId) -> &[f64] {
        &self.rows[id]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn degenerate(&self) -> &[TokenId] {
        &self.degenerate
    }

    /// Dumps the table as CSV: a header of column tokens, then one row per token.
    pub fn write_csv<W: Write>(&self, vocab: &Vocabulary, out: W) -> Result<(), KbError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["token".to_string()];
        header.extend(vocab.tokens().iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.rows.iter().enumerate() {
            let mut rec = vec![vocab.token(id).to_string()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts symmetric-window co-occurrences and converts them to PPMI rows.
///
/// Pairs of identical tokens are not counted, so the diagonal is always zero.
pub fn build_cooccurrence_embeddings<S: AsRef<str>>(
    corpus: &[Vec<S>],
    vocab: &Vocabulary,
    window: usize,
) -> Result<EmbeddingTable, KbError> {
    if window == 0 {
        return Err(KbError::InvalidWindow(window));
    }
    let v = vocab.len();
    let mut counts = vec![0u64; v * v];
    for sentence in corpus {
        let ids = vocab.encode(sentence)?;
        for (i, &u) in ids.iter().enumerate() {
            for &w in ids.iter().skip(i + 1).take(window) {
                if u != w {
                    counts[u * v + w] += 1;
                    counts[w * v + u] += 1;
                }
            }
        }
    }

    let marginal: Vec<u64> = counts.chunks(v).map(|r| r.iter().sum()).collect();
    let total: u64 = marginal.iter().sum();
    let mut rows = vec![vec![0.0; v]; v];
    for u in 0..v {
        for w in 0..v {
            let c = counts[u * v + w];
            if c == 0 {
                continue;
            }
            let pmi = ((c as f64 * total as f64) / (marginal[u] as f64 * marginal[w] as f64)).ln();
            rows[u][w] = pmi.max(0.0);
        }
    }

    let degenerate: Vec<TokenId> = (0..v)
        .filter(|&id| !Vocabulary::is_reserved(id) && marginal[id] == 0)
        .collect();
    for &id in &degenerate {
        log::warn!(
            "token '{}' has no co-occurrence pairs; its embedding row is zero",
            vocab.token(id)
        );
    }
    Ok(EmbeddingTable {
        rows,
        window,
        degenerate,
    })
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T, KbError> {
    if u.len() != v.len() {
        return Err(KbError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu: T = u.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nv: T = v.iter().map(|&b| b * b).sum::<T>().sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Ok(T::zero());
    }
    // Rounding can push the ratio a hair outside [-1, 1].
    Ok((dot / (nu * nv)).max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::kb::build_vocabulary;

    fn corpus(sentences: &[&[&str]]) -> Vec<Vec<String>> {
        sentences
            .iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn cosine_examples() {
        assert!(
            (cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0f64).abs() < 1e-15
        );
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0f64);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0f64);
        assert!(matches!(
            cosine_similarity(&[1.0f64], &[1.0, 2.0]),
            Err(KbError::DimensionMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn smallest_pair() {
        let c = corpus(&[&["a", "b"]]);
        let vocab = build_vocabulary(&c, &BTreeMap::new()).unwrap();
        let t = build_cooccurrence_embeddings(&c, &vocab, 1).unwrap();
        let (a, b) = (vocab.id("a").unwrap(), vocab.id("b").unwrap());
        // one pair each way: total 2, marginals 1, PMI = ln 2
        assert!((t.row(a)[b] - 2f64.ln()).abs() < 1e-15);
        assert!((t.row(b)[a] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t.row(a)[a], 0.0);
        assert_eq!(t.row(b)[b], 0.0);
        assert!(t.degenerate().is_empty());
    }

    #[test]
    fn lone_token_has_no_pairs() {
        let c = corpus(&[&["x"]]);
        let vocab = build_vocabulary(&c, &BTreeMap::new()).unwrap();
        let t = build_cooccurrence_embeddings(&c, &vocab, 2).unwrap();
        assert!(t.rows().iter().flatten().all(|&x| x == 0.0));
        assert_eq!(t.degenerate(), &[vocab.id("x").unwrap()]);
    }

    #[test]
    fn shared_frames_give_identical_direction() {
        let c = corpus(&[
            &["a", "man", "sits"],
            &["a", "boy", "sits"],
            &["a", "man", "sits"],
            &["a", "boy", "sits"],
        ]);
        let vocab = build_vocabulary(&c, &BTreeMap::new()).unwrap();
        let t = build_cooccurrence_embeddings(&c, &vocab, 2).unwrap();
        let (m, b) = (vocab.id("man").unwrap(), vocab.id("boy").unwrap());
        let sim = cosine_similarity(t.row(m), t.row(b)).unwrap();
        assert!((sim - 1.0).abs() < 1e-12, "sim = {sim}");
    }

    #[test]
    fn zero_window_rejected() {
        let c = corpus(&[&["a", "b"]]);
        let vocab = build_vocabulary(&c, &BTreeMap::new()).unwrap();
        assert!(matches!(
            build_cooccurrence_embeddings(&c, &vocab, 0),
            Err(KbError::InvalidWindow(0))
        ));
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let c = corpus(&[&["a", "b"]]);
        let vocab = build_vocabulary(&c, &BTreeMap::new()).unwrap();
        let t = build_cooccurrence_embeddings(&c, &vocab, 1).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), vocab.len() + 1);
        assert!(text.starts_with("token,<s>,</s>,a,b"));
    }
}
