//! Joint training: one forward pass mines selections, assignments and pair
//! labels with the current parameters, one backward pass accumulates the
//! weighted gradients of the three losses, and plain SGD updates the
//! shared store. Also the epoch loop with checkpointing and metrics.
//!
//! Discrete mining decisions are recomputed every step but held constant
//! by backward; all gradient flow into the unlabeled stream goes through
//! explicit gather/scatter, so embeddings of rows the miners did not pick
//! receive gradient rows that are exactly zero, bit for bit.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{self, BackboneConfig, FeatureBatch};
use crate::coarse::{self, CoarseScores, CoarseSelection};
use crate::config::KvFile;
use crate::diff;
use crate::error::{Error, Result};
use crate::fine::{self, ClassVocabulary};
use crate::hash::{self, HashBatch, PairLabelMatrix, RowOrigin};
use crate::params::ParamStore;
use crate::retrieval::{self, CodeIndex};
use crate::synth::{self, DB_FILE, QUERIES_FILE, SOURCE_FILE, UNLABELED_FILE, VOCAB_FILE};
use crate::tensor::{argmax, Tensor2};

pub const CHECKPOINT_FILE: &str = "checkpoint.tzsh";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// All training knobs. Loaded from a flat `key=value` file; every field
/// has a default, and `eps_margin`, `tau_sim`, `tau_dis` track the code
/// length when not set explicitly.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Source mini-batch size.
    pub r_s: usize,
    /// Unlabeled mini-batch size; must be divisible by `m`.
    pub r_u: usize,
    /// Number of groups (and selected rows) in the coarse stage.
    pub m: usize,
    /// Number of novel classes; must match the vocabulary.
    pub n_y: usize,
    /// Hash code length in bits.
    pub l: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Steps during which only the coarse loss trains.
    pub warmup_steps: usize,
    pub lambda_coarse: f64,
    pub lambda_fine: f64,
    pub lambda_hash: f64,
    /// Contrastive margin on squared distances.
    pub eps_margin: f64,
    pub tau_sim: usize,
    pub tau_dis: usize,
    pub seed: u64,
    /// Hidden layer widths of the backbone.
    pub hidden: Vec<usize>,
    /// Dimension of the common representation.
    pub d_f: usize,
    /// When false, the fine and hash losses use only source rows (the
    /// source-only ablation); mining still runs for the coarse loss.
    pub mine_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            r_s: 128,
            r_u: 256,
            m: 32,
            n_y: 2,
            l: 32,
            lr: 0.01,
            epochs: 600,
            warmup_steps: 0,
            lambda_coarse: 1.0,
            lambda_fine: 0.2,
            lambda_hash: 2.0,
            eps_margin: 64.0,
            tau_sim: 8,
            tau_dis: 16,
            seed: 1,
            hidden: vec![64],
            d_f: 32,
            mine_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if !self.r_u.is_multiple_of(self.m) {
            return Err(Error::Config(format!(
                "r_u = {} is not divisible by m = {}",
                self.r_u, self.m
            )));
        }
        if self.r_s == 0 || self.n_y == 0 || self.l == 0 || self.d_f == 0 {
            return Err(Error::Config("r_s, n_y, l and d_f must all be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.tau_sim > self.tau_dis || self.tau_dis > self.l {
            return Err(Error::Config(format!(
                "need tau_sim <= tau_dis <= l, got {}, {}, {}",
                self.tau_sim, self.tau_dis, self.l
            )));
        }
        if !(self.eps_margin.is_finite() && self.eps_margin > 0.0) {
            return Err(Error::Config(format!("bad margin {}", self.eps_margin)));
        }
        let weights = [self.lambda_coarse, self.lambda_fine, self.lambda_hash];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut kv = KvFile::load(path)?;
        let mut cfg = TrainConfig::default();
        if let Some(v) = kv.take("r_s")? {
            cfg.r_s = v;
        }
        if let Some(v) = kv.take("r_u")? {
            cfg.r_u = v;
        }
        if let Some(v) = kv.take("m")? {
            cfg.m = v;
        }
        if let Some(v) = kv.take("n_y")? {
            cfg.n_y = v;
        }
        let explicit_l: Option<usize> = kv.take("l")?;
        if let Some(v) = explicit_l {
            cfg.l = v;
            // margins and radii track the code length unless overridden
            cfg.eps_margin = 2.0 * v as f64;
            cfg.tau_sim = v / 4;
            cfg.tau_dis = v.div_ceil(2);
        }
        if let Some(v) = kv.take("lr")? {
            cfg.lr = v;
        }
        if let Some(v) = kv.take("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = kv.take("warmup_steps")? {
            cfg.warmup_steps = v;
        }
        if let Some(v) = kv.take("lambda_coarse")? {
            cfg.lambda_coarse = v;
        }
        if let Some(v) = kv.take("lambda_fine")? {
            cfg.lambda_fine = v;
        }
        if let Some(v) = kv.take("lambda_hash")? {
            cfg.lambda_hash = v;
        }
        if let Some(v) = kv.take("eps_margin")? {
            cfg.eps_margin = v;
        }
        if let Some(v) = kv.take("tau_sim")? {
            cfg.tau_sim = v;
        }
        if let Some(v) = kv.take("tau_dis")? {
            cfg.tau_dis = v;
        }
        if let Some(v) = kv.take("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = kv.take_list("hidden")? {
            cfg.hidden = v;
        }
        if let Some(v) = kv.take("d_f")? {
            cfg.d_f = v;
        }
        if let Some(v) = kv.take("mine_targets")? {
            cfg.mine_targets = v;
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Effective weights of the three losses for one step.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
    pub hash: f64,
}

impl LossWeights {
    /// Configured weights, with fine and hash silenced during warmup.
    pub fn effective(cfg: &TrainConfig, step: u64) -> Self {
        let warm = step < cfg.warmup_steps as u64;
        LossWeights {
            coarse: cfg.lambda_coarse,
            fine: if warm { 0.0 } else { cfg.lambda_fine },
            hash: if warm { 0.0 } else { cfg.lambda_hash },
        }
    }
}

/// Frozen discrete decisions of one step: coarse selection, per-class
/// picks with their detected classes, soft labels, and pair labels.
#[derive(Debug, Clone)]
pub struct Mining {
    pub selection: CoarseSelection,
    /// `r_s x n_y` soft labels for the source rows.
    pub soft_labels: Tensor2,
    /// Per novel class: row index into the selected rows. `None` in the
    /// source-only ablation.
    pub target_rows: Option<Vec<usize>>,
    /// Per novel class: vocabulary id of the class its pick most looks
    /// like (row argmax of the fine head).
    pub detected_classes: Vec<usize>,
    pub pair_labels: PairLabelMatrix,
}

/// Loss values of one step. `hash_sum` is the raw pair sum; `hash_mean`
/// divides by the active ordered pairs and is what enters `total`.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub coarse: f64,
    pub coarse_source: f64,
    pub fine: f64,
    pub hash_sum: f64,
    pub hash_pairs: usize,
    pub hash_mean: f64,
    pub total: f64,
}

/// Losses plus the gradients that reached each embedding matrix, kept for
/// inspection of the routing.
#[derive(Debug)]
pub struct StepResult {
    pub losses: StepLosses,
    pub d_embed_source: Tensor2,
    pub d_embed_unlabeled: Tensor2,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    // splitmix64 over (seed, stream) so epochs get independent streams
    // that do not depend on run history; resuming epoch k replays exactly
    // the shuffles a continuous run would use
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH_BASE: u64 = 1;

/// Builds the backbone and all three heads with Xavier-uniform weights.
pub fn init_params(d_in: usize, cfg: &TrainConfig) -> Result<(BackboneConfig, ParamStore)> {
    let mut widths = Vec::with_capacity(cfg.hidden.len() + 2);
    widths.push(d_in);
    widths.extend_from_slice(&cfg.hidden);
    widths.push(cfg.d_f);
    let bb = BackboneConfig::new(widths)?;
    let mut params = ParamStore::new();
    let mut rng = rng_for(cfg.seed, STREAM_INIT);
    bb.init_params(&mut params, &mut rng);
    coarse::init_params(&mut params, cfg.d_f, &mut rng);
    fine::init_params(&mut params, cfg.d_f, cfg.n_y, &mut rng);
    hash::init_params(&mut params, cfg.d_f, cfg.l, &mut rng);
    Ok((bb, params))
}

fn source_origins(src: &FeatureBatch) -> Result<Vec<RowOrigin>> {
    let labels = src
        .labels()
        .ok_or_else(|| Error::Data("source batch without labels".into()))?;
    Ok(labels
        .iter()
        .map(|&class| RowOrigin::Source { class })
        .collect())
}

/// Runs mining with the current parameters: coarse selection, fine picks
/// and detected classes, soft labels, and pair labels over the hash batch
/// the losses will see. Everything here is discrete and gets treated as
/// constant by the backward pass.
pub fn mine(
    params: &ParamStore,
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    vocab: &ClassVocabulary,
    src: &FeatureBatch,
    unl: &FeatureBatch,
) -> Result<Mining> {
    let (f_s, f_u) = backbone::embed_pair(src, unl, params, bb)?;
    let scores = coarse::score(&f_u, &f_s, params)?;
    let selection = coarse::select(&scores, cfg.m)?;
    let soft_labels = fine::soft_labels(
        src.labels()
            .ok_or_else(|| Error::Data("source batch without labels".into()))?,
        vocab,
    )?;

    let h_src = diff::linear(&f_s, params.value(hash::WEIGHT), params.value(hash::BIAS))?;
    let mut origins = source_origins(src)?;

    if cfg.mine_targets {
        let selected = f_u.gather_rows(&selection.indices)?;
        let p_u = diff::softmax_rows(&diff::linear(
            &selected,
            params.value(fine::WEIGHT),
            params.value(fine::BIAS),
        )?);
        let target_rows = fine::assign(&p_u);
        let detected_classes: Vec<usize> = target_rows
            .iter()
            .map(|&row| vocab.novel()[argmax(p_u.row(row))])
            .collect();
        let picked = selected.gather_rows(&target_rows)?;
        let h_tgt = diff::linear(
            &picked,
            params.value(hash::WEIGHT),
            params.value(hash::BIAS),
        )?;
        origins.extend(
            detected_classes
                .iter()
                .map(|&class| RowOrigin::Target { class }),
        );
        let batch = HashBatch::new(Tensor2::vstack(&h_src, &h_tgt)?, origins)?;
        let pair_labels = hash::pair_labels(&batch, cfg.tau_sim, cfg.tau_dis)?;
        Ok(Mining {
            selection,
            soft_labels,
            target_rows: Some(target_rows),
            detected_classes,
            pair_labels,
        })
    } else {
        let batch = HashBatch::new(h_src, origins)?;
        let pair_labels = hash::pair_labels(&batch, cfg.tau_sim, cfg.tau_dis)?;
        Ok(Mining {
            selection,
            soft_labels,
            target_rows: None,
            detected_classes: Vec::new(),
            pair_labels,
        })
    }
}

/// Linear-head backward: accumulates weight and bias gradients scaled by
/// `scale` and returns the (scaled) gradient w.r.t. the head input.
fn head_backward(
    params: &mut ParamStore,
    w: &Tensor2,
    w_name: &str,
    b_name: &str,
    x: &Tensor2,
    d_out: &Tensor2,
    scale: f64,
) -> Result<Tensor2> {
    let grads = diff::linear_backward(x, w, d_out)?;
    params.accumulate(w_name, &grads.wrt_weight, scale)?;
    params.accumulate(b_name, &grads.wrt_bias, scale)?;
    let mut dx = grads.wrt_input;
    dx.scale(scale);
    Ok(dx)
}

/// One forward and backward pass with frozen mining decisions. Gradients
/// accumulate into the store (on top of whatever is there); loss values
/// are always computed, gradient work is skipped for zero-weight terms.
pub fn joint_backward(
    params: &mut ParamStore,
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    src: &FeatureBatch,
    unl: &FeatureBatch,
    mining: &Mining,
    weights: &LossWeights,
) -> Result<StepResult> {
    let (f_s, cache_s) = backbone::embed_with_cache(src, params, bb)?;
    let (f_u, cache_u) = backbone::embed_with_cache(unl, params, bb)?;
    let d_f = f_s.cols();
    let r_s = f_s.rows();
    let mut d_embed_source = Tensor2::zeros(r_s, d_f);
    let mut d_embed_unlabeled = Tensor2::zeros(f_u.rows(), d_f);

    let selected = f_u.gather_rows(&mining.selection.indices)?;
    let m = selected.rows();

    // coarse: the loss touches only the selected rows of the unlabeled
    // stream, so it is evaluated on the gathered matrix and the input
    // gradient is scattered back; untouched rows keep exact zeros
    let w_c = params.value(coarse::WEIGHT).clone();
    let b_c = params.value(coarse::BIAS).clone();
    let c_sel = diff::softmax_rows(&diff::linear(&selected, &w_c, &b_c)?);
    let c_src = diff::softmax_rows(&diff::linear(&f_s, &w_c, &b_c)?);
    let gathered_scores = CoarseScores {
        unlabeled: c_sel.clone(),
        source: c_src.clone(),
    };
    let all_rows = CoarseSelection {
        indices: (0..m).collect(),
        group_size: 1,
    };
    let closs = coarse::coarse_loss(&gathered_scores, &all_rows)?;
    if weights.coarse != 0.0 {
        let d_logits = diff::softmax_rows_backward(&c_sel, &closs.wrt_unlabeled);
        let dx = head_backward(
            params,
            &w_c,
            coarse::WEIGHT,
            coarse::BIAS,
            &selected,
            &d_logits,
            weights.coarse,
        )?;
        d_embed_unlabeled.scatter_add_rows(&mining.selection.indices, &dx, 1.0)?;

        let d_logits = diff::softmax_rows_backward(&c_src, &closs.wrt_source);
        let dx = head_backward(
            params,
            &w_c,
            coarse::WEIGHT,
            coarse::BIAS,
            &f_s,
            &d_logits,
            weights.coarse,
        )?;
        d_embed_source.add_scaled(&dx, 1.0)?;
    }

    // fine: dense soft-label term on the source stream; the target term
    // lives on the per-class picks and is scattered back through both
    // gathers
    let w_f = params.value(fine::WEIGHT).clone();
    let b_f = params.value(fine::BIAS).clone();
    let p_src = diff::softmax_rows(&diff::linear(&f_s, &w_f, &b_f)?);
    let (fine_source, d_p_src) = fine::soft_cross_entropy(&p_src, &mining.soft_labels)?;
    let mut fine_value = fine_source;
    if weights.fine != 0.0 {
        let d_logits = diff::softmax_rows_backward(&p_src, &d_p_src);
        let dx = head_backward(
            params,
            &w_f,
            fine::WEIGHT,
            fine::BIAS,
            &f_s,
            &d_logits,
            weights.fine,
        )?;
        d_embed_source.add_scaled(&dx, 1.0)?;
    }
    let picked = match &mining.target_rows {
        Some(rows) => Some(selected.gather_rows(rows)?),
        None => None,
    };
    if let (Some(rows), Some(picked)) = (&mining.target_rows, &picked) {
        let q = diff::softmax_rows(&diff::linear(picked, &w_f, &b_f)?);
        // row k of the picked matrix is class k's choice
        let diagonal: Vec<usize> = (0..q.rows()).collect();
        let (fine_target, d_q) = fine::assigned_log_loss(&q, &diagonal)?;
        fine_value += fine_target;
        if weights.fine != 0.0 {
            let d_logits = diff::softmax_rows_backward(&q, &d_q);
            let dx = head_backward(
                params,
                &w_f,
                fine::WEIGHT,
                fine::BIAS,
                picked,
                &d_logits,
                weights.fine,
            )?;
            let mut d_selected = Tensor2::zeros(m, d_f);
            d_selected.scatter_add_rows(rows, &dx, 1.0)?;
            d_embed_unlabeled.scatter_add_rows(&mining.selection.indices, &d_selected, 1.0)?;
        }
    }

    // hash: contrastive loss over source rows plus the picks, with the
    // pair labels frozen at mining time
    let w_h = params.value(hash::WEIGHT).clone();
    let b_h = params.value(hash::BIAS).clone();
    let h_src = diff::linear(&f_s, &w_h, &b_h)?;
    let codes = match &picked {
        Some(picked) => {
            let h_tgt = diff::linear(picked, &w_h, &b_h)?;
            Tensor2::vstack(&h_src, &h_tgt)?
        }
        None => h_src,
    };
    let mut origins = source_origins(src)?;
    origins.extend(
        mining
            .detected_classes
            .iter()
            .map(|&class| RowOrigin::Target { class }),
    );
    let batch = HashBatch::new(codes, origins)?;
    let hloss = hash::contrastive_loss(&batch, &mining.pair_labels, cfg.eps_margin)?;
    if weights.hash != 0.0 && hloss.pair_count > 0 {
        let scale = weights.hash / hloss.pair_count as f64;
        let d_h_src = hloss.wrt_codes.sub_rows(0, r_s)?;
        let dx = head_backward(
            params,
            &w_h,
            hash::WEIGHT,
            hash::BIAS,
            &f_s,
            &d_h_src,
            scale,
        )?;
        d_embed_source.add_scaled(&dx, 1.0)?;
        if let (Some(rows), Some(picked)) = (&mining.target_rows, &picked) {
            let d_h_tgt = hloss.wrt_codes.sub_rows(r_s, hloss.wrt_codes.rows())?;
            let dx = head_backward(
                params,
                &w_h,
                hash::WEIGHT,
                hash::BIAS,
                picked,
                &d_h_tgt,
                scale,
            )?;
            let mut d_selected = Tensor2::zeros(m, d_f);
            d_selected.scatter_add_rows(rows, &dx, 1.0)?;
            d_embed_unlabeled.scatter_add_rows(&mining.selection.indices, &d_selected, 1.0)?;
        }
    }

    backbone::embed_backward(&cache_s, &d_embed_source, params, bb)?;
    backbone::embed_backward(&cache_u, &d_embed_unlabeled, params, bb)?;

    let hash_mean = hloss.mean();
    let total = weights.coarse * closs.loss + weights.fine * fine_value + weights.hash * hash_mean;
    Ok(StepResult {
        losses: StepLosses {
            coarse: closs.loss,
            coarse_source: closs.source_term,
            fine: fine_value,
            hash_sum: hloss.sum,
            hash_pairs: hloss.pair_count,
            hash_mean,
            total,
        },
        d_embed_source,
        d_embed_unlabeled,
    })
}

/// Weighted joint loss at the current parameters with frozen mining; pure
/// (evaluates on a scratch copy of the store).
pub fn joint_loss(
    params: &ParamStore,
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    src: &FeatureBatch,
    unl: &FeatureBatch,
    mining: &Mining,
    weights: &LossWeights,
) -> Result<f64> {
    let mut scratch = params.clone();
    Ok(
        joint_backward(&mut scratch, bb, cfg, src, unl, mining, weights)?
            .losses
            .total,
    )
}

/// One optimization step: mine, zero gradients, backward, SGD update.
/// Errors with a diagnostic dump instead of stepping when the loss is not
/// finite.
pub fn train_step(
    params: &mut ParamStore,
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    vocab: &ClassVocabulary,
    src: &FeatureBatch,
    unl: &FeatureBatch,
) -> Result<(StepLosses, Mining)> {
    if src.len() != cfg.r_s {
        return Err(Error::Config(format!(
            "source batch has {} rows, config says r_s = {}",
            src.len(),
            cfg.r_s
        )));
    }
    if unl.len() != cfg.r_u {
        return Err(Error::Config(format!(
            "unlabeled batch has {} rows, config says r_u = {}",
            unl.len(),
            cfg.r_u
        )));
    }
    if vocab.n_novel() != cfg.n_y {
        return Err(Error::Config(format!(
            "vocabulary has {} novel classes, config says n_y = {}",
            vocab.n_novel(),
            cfg.n_y
        )));
    }
    let mining = mine(params, bb, cfg, vocab, src, unl)?;
    params.zero_grads();
    let weights = LossWeights::effective(cfg, params.step());
    let result = joint_backward(params, bb, cfg, src, unl, &mining, &weights)?;
    let losses = result.losses;
    if !losses.total.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss at step {}: coarse {}, fine {}, hash {} ({} pairs)",
            params.step(),
            losses.coarse,
            losses.fine,
            losses.hash_mean,
            losses.hash_pairs
        )));
    }
    params.sgd_step(cfg.lr)?;
    Ok((losses, mining))
}

/// Embeds a batch and emits packed sign codes, carrying the batch labels
/// along when present.
pub fn encode_features(
    params: &ParamStore,
    bb: &BackboneConfig,
    batch: &FeatureBatch,
) -> Result<CodeIndex> {
    let f = backbone::embed(batch, params, bb)?;
    let h = diff::linear(&f, params.value(hash::WEIGHT), params.value(hash::BIAS))?;
    let index = retrieval::binarize(&h);
    match batch.labels() {
        Some(labels) => index.with_labels(labels.to_vec()),
        None => Ok(index),
    }
}

/// Reads the backbone layer widths back out of a checkpoint.
pub fn infer_backbone_config(params: &ParamStore) -> Result<BackboneConfig> {
    let mut widths: Vec<usize> = Vec::new();
    let mut layer = 0;
    while let Some(w) = params.try_value(&BackboneConfig::weight_name(layer)) {
        if layer == 0 {
            widths.push(w.rows());
        } else if w.rows() != *widths.last().expect("nonempty") {
            return Err(Error::Data(
                "checkpoint backbone layers have inconsistent widths".into(),
            ));
        }
        widths.push(w.cols());
        layer += 1;
    }
    if widths.len() < 2 {
        return Err(Error::Data("checkpoint contains no backbone layers".into()));
    }
    BackboneConfig::new(widths)
}

/// The training inputs plus the evaluation splits, as loaded from a data
/// directory.
#[derive(Debug)]
pub struct DataBundle {
    pub source: FeatureBatch,
    pub unlabeled: FeatureBatch,
    pub queries: FeatureBatch,
    pub db: FeatureBatch,
    pub vocab: ClassVocabulary,
}

pub fn load_dataset(dir: &Path) -> Result<DataBundle> {
    let require = |name: &str| -> Result<PathBuf> {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::Data(format!("missing data file {}", path.display())));
        }
        Ok(path)
    };
    let source = synth::load_features(&require(SOURCE_FILE)?)?;
    let unlabeled = synth::load_features(&require(UNLABELED_FILE)?)?;
    let queries = synth::load_features(&require(QUERIES_FILE)?)?;
    let db = synth::load_features(&require(DB_FILE)?)?;
    let vocab = ClassVocabulary::load(&require(VOCAB_FILE)?)?;

    if source.labels().is_none() {
        return Err(Error::Data("source set must be fully labeled".into()));
    }
    if unlabeled.labels().is_some() {
        return Err(Error::Data(
            "unlabeled set must not carry labels; use ? markers".into(),
        ));
    }
    if queries.labels().is_none() || db.labels().is_none() {
        return Err(Error::Data(
            "query and database sets must be fully labeled".into(),
        ));
    }
    for &label in source.labels().expect("checked") {
        if label >= vocab.len() || !vocab.is_seen(label) {
            return Err(Error::Data(format!(
                "source label {label} is not a seen class of the vocabulary"
            )));
        }
    }
    Ok(DataBundle {
        source,
        unlabeled,
        queries,
        db,
        vocab,
    })
}

/// Round-robin over per-class index pools, each shuffled once per epoch,
/// so every batch is stratified by class as far as divisibility allows.
struct StratifiedSampler {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl StratifiedSampler {
    fn new<R: Rng>(labels: &[usize], rng: &mut R) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut pools: Vec<Vec<usize>> = by_class.into_values().collect();
        for pool in &mut pools {
            pool.shuffle(rng);
        }
        let cursors = vec![0; pools.len()];
        StratifiedSampler { pools, cursors }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|i| {
                let c = i % self.pools.len();
                let pool = &self.pools[c];
                let idx = pool[self.cursors[c] % pool.len()];
                self.cursors[c] += 1;
                idx
            })
            .collect()
    }
}

/// One line of the metrics stream. Wall time is reported on the console
/// but not serialized, so metrics files are byte-identical across runs
/// with the same seed and config.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub loss_hash: f64,
    pub loss_total: f64,
    pub map: f64,
    pub precision_at_2: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct RunSummary {
    pub epochs_completed: usize,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_map: f64,
    pub final_precision_at_2: f64,
}

fn count_lines(path: &Path) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().count())
}

fn check_resumable(fresh: &ParamStore, loaded: &ParamStore) -> Result<()> {
    let fresh_names: Vec<&str> = fresh.names().collect();
    let loaded_names: Vec<&str> = loaded.names().collect();
    if fresh_names != loaded_names {
        return Err(Error::Config(format!(
            "checkpoint parameters {loaded_names:?} do not match the configured model {fresh_names:?}"
        )));
    }
    for name in fresh_names {
        let a = fresh.value(name);
        let b = loaded.value(name);
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(Error::Config(format!(
                "checkpoint parameter {name:?} is {}x{}, expected {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs over the data directory, appending one
/// JSON metrics line per epoch and checkpointing after every epoch.
///
/// With `resume` the checkpoint in `out_dir` is loaded and training
/// continues after the epochs already recorded in the metrics file;
/// otherwise any previous outputs are overwritten. Runs are deterministic
/// given (seed, config, data): epoch shuffles are derived from the seed
/// and epoch number alone, so a resumed run replays exactly what a
/// continuous run would have done.
pub fn run(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load_dataset(data_dir)?;
    if data.vocab.n_novel() != cfg.n_y {
        return Err(Error::Config(format!(
            "vocabulary has {} novel classes, config says n_y = {}",
            data.vocab.n_novel(),
            cfg.n_y
        )));
    }
    let steps_per_epoch = data.unlabeled.len() / cfg.r_u;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "unlabeled set has {} rows, smaller than r_u = {}",
            data.unlabeled.len(),
            cfg.r_u
        )));
    }

    let (bb, mut params) = init_params(data.source.dim(), cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let mut start_epoch = 0usize;
    if resume {
        let loaded = ParamStore::load(&checkpoint_path)?;
        check_resumable(&params, &loaded)?;
        params = loaded;
        start_epoch = count_lines(&metrics_path)?;
        params.set_step((start_epoch * steps_per_epoch) as u64);
    }

    let mut metrics_file = if resume {
        OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };

    if start_epoch >= cfg.epochs {
        log::info!(
            "nothing to do: {} epochs already recorded in {}",
            start_epoch,
            metrics_path.display()
        );
        let q = encode_features(&params, &bb, &data.queries)?;
        let db = encode_features(&params, &bb, &data.db)?;
        return Ok(RunSummary {
            epochs_completed: start_epoch,
            checkpoint_path,
            metrics_path,
            final_map: retrieval::mean_average_precision(&q, &db)?.value,
            final_precision_at_2: retrieval::precision_at_radius(&q, &db, 2)?,
        });
    }

    let source_labels = data.source.labels().expect("validated").to_vec();
    let mut final_map = 0.0;
    let mut final_p2 = 0.0;
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let mut rng = rng_for(cfg.seed, STREAM_EPOCH_BASE + epoch as u64);
        let mut unl_order: Vec<usize> = (0..data.unlabeled.len()).collect();
        unl_order.shuffle(&mut rng);
        let mut sampler = StratifiedSampler::new(&source_labels, &mut rng);

        let mut sums = StepLosses {
            coarse: 0.0,
            coarse_source: 0.0,
            fine: 0.0,
            hash_sum: 0.0,
            hash_pairs: 0,
            hash_mean: 0.0,
            total: 0.0,
        };
        for step in 0..steps_per_epoch {
            let unl_rows = &unl_order[step * cfg.r_u..(step + 1) * cfg.r_u];
            let unl_batch = data.unlabeled.gather(unl_rows)?;
            let src_rows = sampler.next_batch(cfg.r_s);
            let src_batch = data.source.gather(&src_rows)?;
            let (losses, _) =
                train_step(&mut params, &bb, cfg, &data.vocab, &src_batch, &unl_batch)?;
            sums.coarse += losses.coarse;
            sums.coarse_source += losses.coarse_source;
            sums.fine += losses.fine;
            sums.hash_mean += losses.hash_mean;
            sums.total += losses.total;
        }
        let inv = 1.0 / steps_per_epoch as f64;

        let q_codes = encode_features(&params, &bb, &data.queries)?;
        let db_codes = encode_features(&params, &bb, &data.db)?;
        let map = retrieval::mean_average_precision(&q_codes, &db_codes)?.value;
        let p2 = retrieval::precision_at_radius(&q_codes, &db_codes, 2)?;

        let record = MetricsRecord {
            epoch: epoch + 1,
            loss_coarse: sums.coarse * inv,
            loss_fine: sums.fine * inv,
            loss_hash: sums.hash_mean * inv,
            loss_total: sums.total * inv,
            map,
            precision_at_2: p2,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&record)?)?;
        params.save(&checkpoint_path)?;
        log::info!(
            "epoch {}/{}: loss {:.4} (coarse {:.4}, fine {:.4}, hash {:.4}), map {:.4}, p@2 {:.4}, {:.2}s",
            record.epoch,
            cfg.epochs,
            record.loss_total,
            record.loss_coarse,
            record.loss_fine,
            record.loss_hash,
            record.map,
            record.precision_at_2,
            record.wall_time_s
        );
        final_map = map;
        final_p2 = p2;
    }
    metrics_file.flush()?;

    Ok(RunSummary {
        epochs_completed: cfg.epochs,
        checkpoint_path,
        metrics_path,
        final_map,
        final_precision_at_2: final_p2,
    })
}
