//! Synthetic zero-shot benchmark generator plus feature-file ingestion.
//!
//! Classes are isotropic Gaussians in feature space. Each novel class is
//! paired with a seen class: its word vector hits a target cosine against
//! the paired class exactly, and its feature mean is the matching convex
//! combination of the paired mean and a fresh one, so word-space
//! similarity tracks feature-space proximity. Ground-truth labels of the
//! unlabeled split live in a dedicated [`EvalLabels`] value that no
//! training interface accepts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::FeatureBatch;
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::fine::{ClassKind, ClassVocabulary};
use crate::tensor::Tensor2;

pub const SOURCE_FILE: &str = "source.feat";
pub const UNLABELED_FILE: &str = "unlabeled.feat";
pub const QUERIES_FILE: &str = "queries.feat";
pub const DB_FILE: &str = "db.feat";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRUTH_DIR: &str = "truth";
pub const TRUTH_LABELS_FILE: &str = "unlabeled.labels";

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_seen: usize,
    pub n_novel: usize,
    pub d_in: usize,
    pub word_dim: usize,
    /// Scale of the class means.
    pub sigma_between: f64,
    /// Within-class standard deviation.
    pub sigma_within: f64,
    /// Target cosine between each novel class's word vector and its paired
    /// seen class, one entry per novel class.
    pub rho: Vec<f64>,
    pub source_n: usize,
    pub unlabeled_n: usize,
    pub query_n: usize,
    pub db_n: usize,
    /// Fraction of the unlabeled split drawn from novel classes.
    pub novel_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_seen: 8,
            n_novel: 2,
            d_in: 16,
            word_dim: 16,
            sigma_between: 5.0,
            sigma_within: 0.6,
            rho: vec![0.92, 0.92],
            source_n: 800,
            unlabeled_n: 1600,
            query_n: 200,
            db_n: 1000,
            novel_fraction: 0.5,
            seed: 11,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen < 2 {
            return Err(Error::Config(
                "need at least two seen classes to learn hash functions".into(),
            ));
        }
        if self.n_novel == 0 {
            return Err(Error::Config("need at least one novel class".into()));
        }
        if self.rho.len() != self.n_novel {
            return Err(Error::Config(format!(
                "rho has {} entries for {} novel classes",
                self.rho.len(),
                self.n_novel
            )));
        }
        if self.rho.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config("rho entries must lie in [0, 1]".into()));
        }
        if self.sigma_within <= 0.0 {
            return Err(Error::Config("sigma_within must be positive".into()));
        }
        if self.sigma_between <= 0.0 {
            return Err(Error::Config("sigma_between must be positive".into()));
        }
        if self.word_dim < self.n_seen + self.n_novel {
            return Err(Error::Config(format!(
                "word_dim {} too small for {} classes; exact target cosines need one dimension per class",
                self.word_dim,
                self.n_seen + self.n_novel
            )));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.novel_fraction) {
            return Err(Error::Config("novel_fraction must lie in [0, 1]".into()));
        }
        if self.source_n == 0 || self.unlabeled_n == 0 || self.query_n == 0 || self.db_n == 0 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut kv = KvFile::load(path)?;
        let mut spec = SynthSpec::default();
        if let Some(v) = kv.take("n_seen")? {
            spec.n_seen = v;
        }
        if let Some(v) = kv.take("n_novel")? {
            spec.n_novel = v;
            // keep the default pairing strength unless rho is given
            if spec.rho.len() != spec.n_novel {
                spec.rho = vec![0.92; spec.n_novel];
            }
        }
        if let Some(v) = kv.take("d_in")? {
            spec.d_in = v;
        }
        if let Some(v) = kv.take("word_dim")? {
            spec.word_dim = v;
        }
        if let Some(v) = kv.take("sigma_between")? {
            spec.sigma_between = v;
        }
        if let Some(v) = kv.take("sigma_within")? {
            spec.sigma_within = v;
        }
        if let Some(v) = kv.take_list::<f64>("rho")? {
            spec.rho = if v.len() == 1 {
                vec![v[0]; spec.n_novel]
            } else {
                v
            };
        }
        if let Some(v) = kv.take("source_n")? {
            spec.source_n = v;
        }
        if let Some(v) = kv.take("unlabeled_n")? {
            spec.unlabeled_n = v;
        }
        if let Some(v) = kv.take("query_n")? {
            spec.query_n = v;
        }
        if let Some(v) = kv.take("db_n")? {
            spec.db_n = v;
        }
        if let Some(v) = kv.take("novel_fraction")? {
            spec.novel_fraction = v;
        }
        if let Some(v) = kv.take("seed")? {
            spec.seed = v;
        }
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Ground-truth labels of the unlabeled split. Only evaluation code should
/// call [`EvalLabels::for_evaluation`]; no training interface takes this
/// type.
#[derive(Debug, Clone)]
pub struct EvalLabels {
    labels: Vec<usize>,
}

impl EvalLabels {
    pub fn for_evaluation(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A generated benchmark: training inputs, evaluation splits, vocabulary,
/// and the hidden truth for the unlabeled split.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub source: FeatureBatch,
    pub unlabeled: FeatureBatch,
    pub queries: FeatureBatch,
    pub db: FeatureBatch,
    pub vocab: ClassVocabulary,
    pub unlabeled_truth: EvalLabels,
}

fn sample_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(&x, &y)| x * y).sum();
        for (x, &y) in v.iter_mut().zip(b) {
            *x -= dot * y;
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-8 {
        return None;
    }
    for x in &mut v {
        *x /= n;
    }
    Some(v)
}

/// Word vectors: seen classes get random unit vectors; novel class k is
/// `rho_k * paired + sqrt(1 - rho_k^2) * u` with `u` unit and orthogonal
/// to the span of everything built so far, so the cosine against the
/// paired class is exactly `rho_k`.
fn build_word_vectors(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let seen: Vec<Vec<f64>> = (0..spec.n_seen)
        .map(|_| sample_unit(spec.word_dim, rng))
        .collect();

    // orthonormal basis of the running span, for Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for z in &seen {
        let mut v = z.clone();
        project_out(&mut v, &basis);
        if let Some(v) = normalized(v) {
            basis.push(v);
        }
    }

    let mut vectors = seen;
    let mut pairs = Vec::with_capacity(spec.n_novel);
    for k in 0..spec.n_novel {
        let pair = k % spec.n_seen;
        pairs.push(pair);
        let u = loop {
            let mut v = sample_unit(spec.word_dim, rng);
            project_out(&mut v, &basis);
            if let Some(v) = normalized(v) {
                break v;
            }
        };
        let rho = spec.rho[k];
        let s = (1.0 - rho * rho).sqrt();
        let z: Vec<f64> = vectors[pair]
            .iter()
            .zip(&u)
            .map(|(&p, &o)| rho * p + s * o)
            .collect();
        basis.push(u);
        vectors.push(z);
    }
    (vectors, pairs)
}

fn sample_around(mean: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .map(|&m| m + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Deterministic dataset generation: the same spec (seed included) always
/// produces identical values.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (word_vectors, pairs) = build_word_vectors(spec, &mut rng);
    let mut vocab_entries = Vec::new();
    for (i, vector) in word_vectors.iter().enumerate() {
        let entry = if i < spec.n_seen {
            (format!("seen_{i}"), ClassKind::Seen, vector.clone())
        } else {
            let k = i - spec.n_seen;
            (format!("novel_{k}"), ClassKind::Novel, vector.clone())
        };
        vocab_entries.push(entry);
    }
    let vocab = ClassVocabulary::new(vocab_entries)?;

    // feature means: novel means interpolate toward their paired seen mean
    let seen_means: Vec<Vec<f64>> = (0..spec.n_seen)
        .map(|_| {
            (0..spec.d_in)
                .map(|_| spec.sigma_between * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut means = seen_means.clone();
    for k in 0..spec.n_novel {
        let free: Vec<f64> = (0..spec.d_in)
            .map(|_| spec.sigma_between * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let rho = spec.rho[k];
        let mean: Vec<f64> = seen_means[pairs[k]]
            .iter()
            .zip(&free)
            .map(|(&p, &f)| rho * p + (1.0 - rho) * f)
            .collect();
        means.push(mean);
    }

    let mut draw_split = |count: usize, classes: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = classes[i % classes.len()];
            rows.push(sample_around(&means[class], spec.sigma_within, &mut rng));
            labels.push(class);
        }
        (rows, labels)
    };

    let seen_ids: Vec<usize> = (0..spec.n_seen).collect();
    let novel_ids: Vec<usize> = (spec.n_seen..spec.n_seen + spec.n_novel).collect();
    let all_ids: Vec<usize> = (0..spec.n_seen + spec.n_novel).collect();

    let (mut src_rows, mut src_labels) = draw_split(spec.source_n, &seen_ids);

    let novel_rows = (spec.unlabeled_n as f64 * spec.novel_fraction).round() as usize;
    let (unl_novel, unl_novel_labels) = draw_split(novel_rows, &novel_ids);
    let (unl_seen, unl_seen_labels) = draw_split(spec.unlabeled_n - novel_rows, &seen_ids);
    let mut unl_rows = unl_novel;
    unl_rows.extend(unl_seen);
    let mut unl_labels = unl_novel_labels;
    unl_labels.extend(unl_seen_labels);

    let (query_rows, query_labels) = draw_split(spec.query_n, &novel_ids);
    let (db_rows, db_labels) = draw_split(spec.db_n, &all_ids);

    // shuffle the training splits so class blocks are not contiguous
    let mut order: Vec<usize> = (0..src_rows.len()).collect();
    order.shuffle(&mut rng);
    src_rows = order.iter().map(|&i| src_rows[i].clone()).collect();
    src_labels = order.iter().map(|&i| src_labels[i]).collect();

    let mut order: Vec<usize> = (0..unl_rows.len()).collect();
    order.shuffle(&mut rng);
    unl_rows = order.iter().map(|&i| unl_rows[i].clone()).collect();
    unl_labels = order.iter().map(|&i| unl_labels[i]).collect();

    Ok(SynthDataset {
        source: FeatureBatch::source(Tensor2::from_rows(&src_rows)?, src_labels)?,
        unlabeled: FeatureBatch::unlabeled(Tensor2::from_rows(&unl_rows)?)?,
        queries: FeatureBatch::source(Tensor2::from_rows(&query_rows)?, query_labels)?,
        db: FeatureBatch::source(Tensor2::from_rows(&db_rows)?, db_labels)?,
        vocab,
        unlabeled_truth: EvalLabels { labels: unl_labels },
    })
}

/// Writes every split of a generated dataset under `dir`. Ground-truth
/// labels for the unlabeled split go to `truth/`, which training never
/// reads.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_features(&ds.source, &dir.join(SOURCE_FILE))?;
    save_features(&ds.unlabeled, &dir.join(UNLABELED_FILE))?;
    save_features(&ds.queries, &dir.join(QUERIES_FILE))?;
    save_features(&ds.db, &dir.join(DB_FILE))?;
    ds.vocab.save(&dir.join(VOCAB_FILE))?;
    let truth_dir = dir.join(TRUTH_DIR);
    std::fs::create_dir_all(&truth_dir)?;
    let mut w = BufWriter::new(File::create(truth_dir.join(TRUTH_LABELS_FILE))?);
    for label in ds.unlabeled_truth.for_evaluation() {
        writeln!(w, "{label}")?;
    }
    w.flush()?;
    Ok(())
}

/// Feature file: header `d_in n`, then `n` lines `<label|?> v1 .. v_d`.
/// A batch is unlabeled when every row is `?`; mixing is rejected.
pub fn load_features(path: &Path) -> Result<FeatureBatch> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open features {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header = header?;
    let mut parts = header.split_whitespace();
    let d_in: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(1, format!("bad header {header:?}, expected 'd_in n'")))?;
    let n: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(1, format!("bad header {header:?}, expected 'd_in n'")))?;
    if parts.next().is_some() {
        return Err(parse_err(1, format!("bad header {header:?}")));
    }

    let mut rows = Vec::with_capacity(n);
    let mut labels: Vec<Option<usize>> = Vec::with_capacity(n);
    for _ in 0..n {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(n + 1, format!("expected {n} rows, file ended early")))?;
        let lineno = lineno + 1;
        let line = line?;
        let mut parts = line.split_whitespace();
        let label = match parts.next() {
            Some("?") => None,
            Some(t) => Some(
                t.parse::<usize>()
                    .map_err(|_| parse_err(lineno, format!("bad label {t:?}")))?,
            ),
            None => return Err(parse_err(lineno, "empty row".into())),
        };
        let values = parts
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("bad number {t:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != d_in {
            return Err(parse_err(
                lineno,
                format!("row has {} values, expected {d_in}", values.len()),
            ));
        }
        labels.push(label);
        rows.push(values);
    }

    let features = Tensor2::from_rows(&rows)?;
    let labeled: Vec<usize> = labels.iter().flatten().copied().collect();
    if labeled.is_empty() {
        FeatureBatch::unlabeled(features)
    } else if labeled.len() == labels.len() {
        FeatureBatch::source(features, labeled)
    } else {
        Err(Error::Data(format!(
            "{} mixes labeled and unlabeled rows",
            path.display()
        )))
    }
}

pub fn save_features(batch: &FeatureBatch, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let f = batch.features();
    writeln!(w, "{} {}", f.cols(), f.rows())?;
    for i in 0..f.rows() {
        match batch.labels() {
            Some(labels) => write!(w, "{}", labels[i])?,
            None => write!(w, "?")?,
        }
        for v in f.row(i) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
