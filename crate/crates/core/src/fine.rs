//! Fine similarity mining: an n_y-way head over the coarse-selected rows
//! and the source batch. Source rows get soft labels from class-name word
//! vector similarities; among the selected rows, each novel class picks
//! the row with the highest probability for that class.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::diff::{self, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

pub const WEIGHT: &str = "fine.w";
pub const BIAS: &str = "fine.b";

pub fn init_params<R: rand::Rng>(store: &mut ParamStore, d_f: usize, n_y: usize, rng: &mut R) {
    store.insert(WEIGHT, diff::xavier_uniform(d_f, n_y, rng));
    store.insert(BIAS, Tensor2::zeros(1, n_y));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    Seen,
    Novel,
}

/// Class names with their word vectors, partitioned into seen and novel.
/// Class ids are positions in the vocabulary; the partition is disjoint by
/// construction because each class has exactly one kind.
#[derive(Debug, Clone)]
pub struct ClassVocabulary {
    names: Vec<String>,
    kinds: Vec<ClassKind>,
    vectors: Vec<Vec<f64>>,
    seen: Vec<usize>,
    novel: Vec<usize>,
    dim: usize,
}

impl ClassVocabulary {
    pub fn new(entries: Vec<(String, ClassKind, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Vocabulary("empty vocabulary".into()));
        }
        let dim = entries[0].2.len();
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        let mut vectors = Vec::new();
        let mut seen = Vec::new();
        let mut novel = Vec::new();
        for (id, (name, kind, vector)) in entries.into_iter().enumerate() {
            if vector.len() != dim {
                return Err(Error::Vocabulary(format!(
                    "class {name:?} has a {}-d word vector, expected {dim}-d",
                    vector.len()
                )));
            }
            if !vector.iter().all(|v| v.is_finite()) {
                return Err(Error::Vocabulary(format!(
                    "class {name:?} has a non-finite word vector"
                )));
            }
            if norm(&vector) == 0.0 {
                return Err(Error::Vocabulary(format!(
                    "class {name:?} has a zero-norm word vector"
                )));
            }
            if names.contains(&name) {
                return Err(Error::Vocabulary(format!("duplicate class name {name:?}")));
            }
            match kind {
                ClassKind::Seen => seen.push(id),
                ClassKind::Novel => novel.push(id),
            }
            names.push(name);
            kinds.push(kind);
            vectors.push(vector);
        }
        if seen.is_empty() || novel.is_empty() {
            return Err(Error::Vocabulary(
                "vocabulary needs at least one seen and one novel class".into(),
            ));
        }
        Ok(ClassVocabulary {
            names,
            kinds,
            vectors,
            seen,
            novel,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_seen(&self) -> usize {
        self.seen.len()
    }

    pub fn n_novel(&self) -> usize {
        self.novel.len()
    }

    /// Ids of the seen classes, in vocabulary order.
    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    /// Ids of the novel classes, in vocabulary order. Position k in this
    /// list is column k of the fine head.
    pub fn novel(&self) -> &[usize] {
        &self.novel
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn kind(&self, id: usize) -> ClassKind {
        self.kinds[id]
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id]
    }

    pub fn is_seen(&self, id: usize) -> bool {
        id < self.kinds.len() && self.kinds[id] == ClassKind::Seen
    }

    /// One class per line: `<name> <seen|novel> <v1> ... <vD>`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open vocabulary {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message,
            };
            let name = parts
                .next()
                .ok_or_else(|| parse_err("missing class name".into()))?;
            let kind = match parts.next() {
                Some("seen") => ClassKind::Seen,
                Some("novel") => ClassKind::Novel,
                other => {
                    return Err(parse_err(format!(
                        "expected 'seen' or 'novel', got {other:?}"
                    )))
                }
            };
            let vector = parts
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| parse_err(format!("bad number {t:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if vector.is_empty() {
                return Err(parse_err("missing word vector".into()));
            }
            entries.push((name.to_string(), kind, vector));
        }
        ClassVocabulary::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for id in 0..self.len() {
            let kind = match self.kinds[id] {
                ClassKind::Seen => "seen",
                ClassKind::Novel => "novel",
            };
            write!(w, "{} {}", self.names[id], kind)?;
            for v in &self.vectors[id] {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two word vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of {}-d and {}-d vectors",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Vocabulary("zero-norm word vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Soft labels for source rows: row i holds the cosine similarities of the
/// row's class to every novel class, negatives clamped to zero, normalized
/// to sum 1. A row with no positive similarity falls back to the uniform
/// distribution and a warning is emitted.
pub fn soft_labels(source_labels: &[usize], vocab: &ClassVocabulary) -> Result<Tensor2> {
    let n_y = vocab.n_novel();
    let mut out = Tensor2::zeros(source_labels.len(), n_y);
    let mut fallback_rows = 0usize;
    for (i, &label) in source_labels.iter().enumerate() {
        if label >= vocab.len() || !vocab.is_seen(label) {
            return Err(Error::Vocabulary(format!(
                "source label {label} is not a seen class"
            )));
        }
        let row = out.row_mut(i);
        let mut sum = 0.0;
        for (k, &novel_id) in vocab.novel().iter().enumerate() {
            let sim = cosine_sim(vocab.vector(label), vocab.vector(novel_id))?.max(0.0);
            row[k] = sim;
            sum += sim;
        }
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        } else {
            fallback_rows += 1;
            row.fill(1.0 / n_y as f64);
        }
    }
    if fallback_rows > 0 {
        log::warn!(
            "{fallback_rows} source row(s) had no positive similarity to any novel class; using uniform soft labels"
        );
    }
    Ok(out)
}

/// Independent argmax per class column over the selected-row probability
/// matrix: class k picks the row with the highest probability in column k.
/// Ties go to the lowest row; the same row may serve several classes.
pub fn assign(p_u: &Tensor2) -> Vec<usize> {
    let mut picks = Vec::with_capacity(p_u.cols());
    for k in 0..p_u.cols() {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..p_u.rows() {
            let v = p_u.get(j, k);
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        picks.push(best);
    }
    picks
}

/// Fine loss value and gradients w.r.t. the probability matrices.
#[derive(Debug)]
pub struct FineLoss {
    pub loss: f64,
    /// Gradient w.r.t. the source probabilities (dense).
    pub wrt_source: Tensor2,
    /// Gradient w.r.t. the selected-row probabilities; rows that were not
    /// assigned to any class are never written and stay exactly zero.
    pub wrt_selected: Tensor2,
}

/// Mean soft-label cross entropy over the source rows; returns the value
/// and the gradient w.r.t. the probabilities. Probabilities are floored at
/// `PROB_FLOOR` inside the logs; floored entries carry zero gradient.
pub fn soft_cross_entropy(p_s: &Tensor2, soft: &Tensor2) -> Result<(f64, Tensor2)> {
    let (r_s, n_y) = (p_s.rows(), p_s.cols());
    if soft.rows() != r_s || soft.cols() != n_y {
        return Err(Error::Dimension(format!(
            "soft labels are {}x{}, expected {}x{}",
            soft.rows(),
            soft.cols(),
            r_s,
            n_y
        )));
    }
    if r_s == 0 || n_y == 0 {
        return Err(Error::Data("fine loss over empty batch".into()));
    }
    let mut loss = 0.0;
    let mut wrt_source = Tensor2::zeros(r_s, n_y);
    for i in 0..r_s {
        for j in 0..n_y {
            let s = soft.get(i, j);
            let p = p_s.get(i, j);
            loss -= s * p.max(PROB_FLOOR).ln() / r_s as f64;
            if p >= PROB_FLOOR {
                wrt_source.set(i, j, -s / (r_s as f64 * p));
            }
        }
    }
    Ok((loss, wrt_source))
}

/// Mean negative log probability of each class's assigned row: class `k`
/// reads entry `(assignment[k], k)`. Rows no class picked are never
/// written and keep an exactly-zero gradient.
pub fn assigned_log_loss(p_u: &Tensor2, assignment: &[usize]) -> Result<(f64, Tensor2)> {
    let n_y = p_u.cols();
    if assignment.len() != n_y {
        return Err(Error::Dimension(format!(
            "assignment of {} rows over a {}-way head",
            assignment.len(),
            n_y
        )));
    }
    if assignment.iter().any(|&j| j >= p_u.rows()) {
        return Err(Error::Dimension("assigned row out of range".into()));
    }
    if n_y == 0 {
        return Err(Error::Data("fine loss over empty batch".into()));
    }
    let mut loss = 0.0;
    let mut wrt_selected = Tensor2::zeros(p_u.rows(), n_y);
    for (k, &j) in assignment.iter().enumerate() {
        let p = p_u.get(j, k);
        loss -= p.max(PROB_FLOOR).ln() / n_y as f64;
        if p >= PROB_FLOOR {
            let g = wrt_selected.get(j, k) - 1.0 / (n_y as f64 * p);
            wrt_selected.set(j, k, g);
        }
    }
    Ok((loss, wrt_selected))
}

/// Soft-label cross entropy over the source rows plus mean negative log
/// probability of each class's assigned row.
pub fn fine_loss(
    p_s: &Tensor2,
    p_u: &Tensor2,
    assignment: &[usize],
    soft: &Tensor2,
) -> Result<FineLoss> {
    if p_u.cols() != p_s.cols() {
        return Err(Error::Dimension(format!(
            "source head is {}-way, selected head {}-way",
            p_s.cols(),
            p_u.cols()
        )));
    }
    let (source_term, wrt_source) = soft_cross_entropy(p_s, soft)?;
    let (target_term, wrt_selected) = assigned_log_loss(p_u, assignment)?;
    Ok(FineLoss {
        loss: source_term + target_term,
        wrt_source,
        wrt_selected,
    })
}
