//! Binarization, packed Hamming-distance search, and retrieval metrics:
//! mean average precision over the Hamming ranking and precision within a
//! Hamming radius.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Binary codes packed 64 bits per word, with an optional class label per
/// item. Bit `j` of an item is `1` when the real-valued code entry `j` is
/// `>= 0` (exact zeros count as positive).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeIndex {
    bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
    labels: Vec<Option<usize>>,
}

/// Borrowed view of one packed code.
#[derive(Debug, Clone, Copy)]
pub struct CodeRef<'a> {
    pub words: &'a [u64],
    pub bits: usize,
}

impl CodeIndex {
    fn empty(bits: usize) -> Self {
        CodeIndex {
            bits,
            words_per_code: bits.div_ceil(64),
            words: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn code(&self, i: usize) -> CodeRef<'_> {
        CodeRef {
            words: &self.words[i * self.words_per_code..(i + 1) * self.words_per_code],
            bits: self.bits,
        }
    }

    /// Hamming distance between item `i` here and item `j` in `other`.
    pub fn distance(&self, i: usize, other: &CodeIndex, j: usize) -> Result<usize> {
        hamming(self.code(i), other.code(j))
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Data(format!(
                "{} labels for {} codes",
                labels.len(),
                self.len()
            )));
        }
        self.labels = labels.into_iter().map(Some).collect();
        Ok(self)
    }

    pub fn bitstring(&self, i: usize) -> String {
        let code = self.code(i);
        (0..self.bits)
            .map(|j| {
                if code.words[j / 64] >> (j % 64) & 1 == 1 {
                    '1'
                } else {
                    '0'
                }
            })
            .collect()
    }

    pub fn from_bitstrings(codes: &[&str], labels: Vec<Option<usize>>) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::Data("label count does not match code count".into()));
        }
        let bits = codes.first().map_or(0, |c| c.len());
        let mut index = CodeIndex::empty(bits);
        for (i, code) in codes.iter().enumerate() {
            if code.len() != bits {
                return Err(Error::Data(format!(
                    "code {i} has {} bits, expected {bits}",
                    code.len()
                )));
            }
            let mut words = vec![0u64; index.words_per_code];
            for (j, ch) in code.chars().enumerate() {
                match ch {
                    '1' => words[j / 64] |= 1 << (j % 64),
                    '0' => {}
                    other => {
                        return Err(Error::Data(format!("code {i} has invalid bit {other:?}")))
                    }
                }
            }
            index.words.extend_from_slice(&words);
            index.labels.push(labels[i]);
        }
        Ok(index)
    }

    /// One item per line: `<label> <bitstring>`, label `?` when absent.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for i in 0..self.len() {
            match self.labels[i] {
                Some(l) => writeln!(w, "{l} {}", self.bitstring(i))?,
                None => writeln!(w, "? {}", self.bitstring(i))?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open codes {}: {e}", path.display())))?;
        let mut codes: Vec<String> = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message,
            };
            let mut parts = line.split_whitespace();
            let label = match parts.next() {
                Some("?") => None,
                Some(t) => Some(
                    t.parse::<usize>()
                        .map_err(|_| parse_err(format!("bad label {t:?}")))?,
                ),
                None => return Err(parse_err("empty line".into())),
            };
            let code = parts
                .next()
                .ok_or_else(|| parse_err("missing bitstring".into()))?;
            if let Some(first) = codes.first() {
                if code.len() != first.len() {
                    return Err(parse_err(format!(
                        "bitstring has {} bits, expected {}",
                        code.len(),
                        first.len()
                    )));
                }
            }
            codes.push(code.to_string());
            labels.push(label);
        }
        let refs: Vec<&str> = codes.iter().map(|s| s.as_str()).collect();
        Self::from_bitstrings(&refs, labels).map_err(|e| match e {
            Error::Data(message) => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message,
            },
            other => other,
        })
    }
}

/// Packs the sign pattern of real-valued codes: bit 1 where the entry is
/// `>= 0`, bit 0 otherwise. Labels start out absent.
pub fn binarize(h: &Tensor2) -> CodeIndex {
    let mut index = CodeIndex::empty(h.cols());
    index.labels = vec![None; h.rows()];
    index.words.reserve(h.rows() * index.words_per_code);
    for i in 0..h.rows() {
        let mut words = vec![0u64; index.words_per_code];
        for (j, &v) in h.row(i).iter().enumerate() {
            if v >= 0.0 {
                words[j / 64] |= 1 << (j % 64);
            }
        }
        index.words.extend_from_slice(&words);
    }
    index
}

/// Popcount of the XOR of two packed codes.
pub fn hamming(a: CodeRef<'_>, b: CodeRef<'_>) -> Result<usize> {
    if a.bits != b.bits {
        return Err(Error::Dimension(format!(
            "hamming distance between {}-bit and {}-bit codes",
            a.bits, b.bits
        )));
    }
    Ok(a.words
        .iter()
        .zip(b.words)
        .map(|(&x, &y)| (x ^ y).count_ones() as usize)
        .sum())
}

fn require_labels(index: &CodeIndex, what: &str) -> Result<()> {
    if index.labels.iter().any(|l| l.is_none()) {
        return Err(Error::Data(format!("{what} codes must all carry labels")));
    }
    Ok(())
}

/// Result of a mean-average-precision evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MapResult {
    pub value: f64,
    pub evaluated_queries: usize,
    /// Queries without a single same-label item in the database; these are
    /// excluded from the mean.
    pub skipped_queries: usize,
}

/// MAP of the Hamming ranking over the full database. Items are ranked by
/// ascending distance with ties broken by database position; average
/// precision is the mean of precision-at-rank over the relevant ranks,
/// with same-label items relevant.
pub fn mean_average_precision(queries: &CodeIndex, db: &CodeIndex) -> Result<MapResult> {
    if db.is_empty() {
        return Err(Error::Data("empty database".into()));
    }
    if queries.bits() != db.bits() {
        return Err(Error::Dimension(format!(
            "query codes have {} bits, database {}",
            queries.bits(),
            db.bits()
        )));
    }
    require_labels(queries, "query")?;
    require_labels(db, "database")?;

    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(db.len());
    for q in 0..queries.len() {
        let q_label = queries.label(q).expect("checked above");
        order.clear();
        for j in 0..db.len() {
            order.push((queries.distance(q, db, j)?, j));
        }
        order.sort_unstable();
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &(_, j)) in order.iter().enumerate() {
            if db.label(j) == Some(q_label) {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits == 0 {
            skipped += 1;
            continue;
        }
        sum += ap / hits as f64;
        evaluated += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} query(ies) had no relevant database item and were excluded from MAP");
    }
    if evaluated == 0 {
        return Err(Error::Data(
            "no query has a relevant item in the database".into(),
        ));
    }
    Ok(MapResult {
        value: sum / evaluated as f64,
        evaluated_queries: evaluated,
        skipped_queries: skipped,
    })
}

/// Mean over queries of the precision among database items within Hamming
/// distance `radius`. A query whose ball is empty contributes zero.
pub fn precision_at_radius(queries: &CodeIndex, db: &CodeIndex, radius: usize) -> Result<f64> {
    if db.is_empty() {
        return Err(Error::Data("empty database".into()));
    }
    if queries.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    if queries.bits() != db.bits() {
        return Err(Error::Dimension(format!(
            "query codes have {} bits, database {}",
            queries.bits(),
            db.bits()
        )));
    }
    require_labels(queries, "query")?;
    require_labels(db, "database")?;

    let mut sum = 0.0;
    for q in 0..queries.len() {
        let q_label = queries.label(q).expect("checked above");
        let mut within = 0usize;
        let mut relevant = 0usize;
        for j in 0..db.len() {
            if queries.distance(q, db, j)? <= radius {
                within += 1;
                if db.label(j) == Some(q_label) {
                    relevant += 1;
                }
            }
        }
        if within > 0 {
            sum += relevant as f64 / within as f64;
        }
    }
    Ok(sum / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(codes: &[&str], labels: &[usize]) -> CodeIndex {
        CodeIndex::from_bitstrings(codes, labels.iter().map(|&l| Some(l)).collect()).unwrap()
    }

    #[test]
    fn binarize_signs() {
        let h = Tensor2::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let idx = binarize(&h);
        assert_eq!(idx.bitstring(0), "10");
    }

    #[test]
    fn binarize_zero_row_is_all_ones() {
        let idx = binarize(&Tensor2::zeros(1, 5));
        assert_eq!(idx.bitstring(0), "11111");
    }

    #[test]
    fn negation_flips_all_bits_except_zeros() {
        let h = Tensor2::from_rows(&[vec![0.5, -1.0, 0.0, 2.0]]).unwrap();
        let mut neg = h.clone();
        neg.scale(-1.0);
        let a = binarize(&h);
        let b = binarize(&neg);
        // entries 0, 1, 3 flip; the exact zero stays 1 in both
        assert_eq!(a.bitstring(0), "1011");
        assert_eq!(b.bitstring(0), "0110");
    }

    #[test]
    fn hamming_identical_and_complementary() {
        let idx = index(&["10110", "01001"], &[0, 1]);
        assert_eq!(idx.distance(0, &idx, 0).unwrap(), 0);
        assert_eq!(idx.distance(0, &idx, 1).unwrap(), 5);
    }

    #[test]
    fn hamming_hand_value() {
        let idx = index(&["1011", "1110"], &[0, 1]);
        assert_eq!(idx.distance(0, &idx, 1).unwrap(), 2);
    }

    #[test]
    fn hamming_length_mismatch_errors() {
        let a = index(&["101"], &[0]);
        let b = index(&["10"], &[0]);
        assert!(matches!(
            hamming(a.code(0), b.code(0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn map_is_one_when_everything_is_relevant() {
        let queries = index(&["1010"], &[7]);
        let db = index(&["1010", "1111", "0000"], &[7, 7, 7]);
        let r = mean_average_precision(&queries, &db).unwrap();
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn map_hand_ranking() {
        // ranked db: relevant, irrelevant, relevant -> AP = (1/1 + 2/3) / 2
        let queries = index(&["1111"], &[1]);
        let db = index(&["1111", "1110", "1100"], &[1, 0, 1]);
        let r = mean_average_precision(&queries, &db).unwrap();
        assert!((r.value - 5.0 / 6.0).abs() < 1e-12, "{}", r.value);
    }

    #[test]
    fn map_skips_queries_without_relevant_items() {
        let queries = index(&["1111", "0000"], &[1, 9]);
        let db = index(&["1111", "1110"], &[1, 0]);
        let r = mean_average_precision(&queries, &db).unwrap();
        assert_eq!(r.evaluated_queries, 1);
        assert_eq!(r.skipped_queries, 1);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn precision_at_full_radius_is_label_frequency() {
        let queries = index(&["1111"], &[1]);
        let db = index(&["0000", "0001", "1111", "1000"], &[1, 0, 1, 0]);
        let p = precision_at_radius(&queries, &db, 4).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn precision_with_empty_ball_is_zero() {
        let queries = index(&["1111"], &[1]);
        let db = index(&["0000"], &[1]);
        let p = precision_at_radius(&queries, &db, 2).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn codes_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.txt");
        let idx = CodeIndex::from_bitstrings(&["10101", "01010"], vec![Some(3), None]).unwrap();
        idx.save(&path).unwrap();
        let loaded = CodeIndex::load(&path).unwrap();
        assert_eq!(loaded, idx);
    }

    #[test]
    fn codes_file_mixed_width_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.txt");
        std::fs::write(&path, "1 1010\n2 101\n").unwrap();
        let err = CodeIndex::load(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn random_index(rows: &[u64], bits: usize) -> CodeIndex {
            let strings: Vec<String> = rows
                .iter()
                .map(|&w| {
                    (0..bits)
                        .map(|j| if w >> (j % 64) & 1 == 1 { '1' } else { '0' })
                        .collect()
                })
                .collect();
            let refs: Vec<&str> = strings.iter().map(|s| s.as_str()).collect();
            CodeIndex::from_bitstrings(&refs, vec![Some(0); rows.len()]).unwrap()
        }

        proptest! {
            #[test]
            fn hamming_is_a_metric(a: u64, b: u64, c: u64) {
                let idx = random_index(&[a, b, c], 64);
                let d = |x: usize, y: usize| idx.distance(x, &idx, y).unwrap();
                prop_assert_eq!(d(0, 0), 0);
                prop_assert_eq!(d(0, 1), d(1, 0));
                prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2));
                prop_assert!(d(0, 1) <= 64);
            }

            // with all pairwise distances distinct, MAP does not depend on
            // database order
            #[test]
            fn map_invariant_under_db_permutation(seed in 0u64..1000) {
                use rand::seq::SliceRandom;
                use rand::{Rng as _, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut words: Vec<u64> = Vec::new();
                while words.len() < 8 {
                    let w = rng.gen::<u64>() & 0xff;
                    // keep distances to the all-ones query distinct
                    if words.iter().all(|&x| (x ^ 0xffu64).count_ones() != (w ^ 0xffu64).count_ones()) {
                        words.push(w);
                    }
                }
                let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
                let queries = CodeIndex::from_bitstrings(&["11111111"], vec![Some(0)]).unwrap();

                let strings: Vec<String> = words
                    .iter()
                    .map(|&w| (0..8).map(|j| if w >> j & 1 == 1 { '1' } else { '0' }).collect())
                    .collect();
                let mut paired: Vec<(String, usize)> =
                    strings.into_iter().zip(labels).collect();
                let refs: Vec<&str> = paired.iter().map(|(s, _)| s.as_str()).collect();
                let lab: Vec<Option<usize>> = paired.iter().map(|&(_, l)| Some(l)).collect();
                let db = CodeIndex::from_bitstrings(&refs, lab).unwrap();
                let base = mean_average_precision(&queries, &db).unwrap().value;

                paired.shuffle(&mut rng);
                let refs: Vec<&str> = paired.iter().map(|(s, _)| s.as_str()).collect();
                let lab: Vec<Option<usize>> = paired.iter().map(|&(_, l)| Some(l)).collect();
                let shuffled = CodeIndex::from_bitstrings(&refs, lab).unwrap();
                let permuted = mean_average_precision(&queries, &shuffled).unwrap().value;
                prop_assert!((base - permuted).abs() < 1e-12);
            }
        }
    }
}
