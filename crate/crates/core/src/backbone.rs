//! Shared two-stream network: one MLP applied to both the labeled source
//! stream and the unlabeled stream. The streams differ only in their data;
//! every layer reads the same parameters, so an input row embeds to the
//! same point regardless of which stream carried it.

use rand::Rng;

use crate::diff;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

/// Which stream a batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    /// Labeled rows from seen classes.
    Source,
    /// Unlabeled rows, mixed seen and novel classes.
    Unlabeled,
}

impl StreamTag {
    fn name(self) -> &'static str {
        match self {
            StreamTag::Source => "source",
            StreamTag::Unlabeled => "unlabeled",
        }
    }
}

/// A batch of input feature vectors. Source batches carry one class id per
/// row; unlabeled batches carry none, which is what keeps ground truth for
/// the unlabeled set out of every training path.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    features: Tensor2,
    labels: Option<Vec<usize>>,
    stream: StreamTag,
}

impl FeatureBatch {
    pub fn source(features: Tensor2, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(FeatureBatch {
            features,
            labels: Some(labels),
            stream: StreamTag::Source,
        })
    }

    pub fn unlabeled(features: Tensor2) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(FeatureBatch {
            features,
            labels: None,
            stream: StreamTag::Unlabeled,
        })
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn stream(&self) -> StreamTag {
        self.stream
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sub-batch with the given rows, keeping stream tag and labels.
    pub fn gather(&self, rows: &[usize]) -> Result<FeatureBatch> {
        let features = self.features.gather_rows(rows)?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        Ok(FeatureBatch {
            features,
            labels,
            stream: self.stream,
        })
    }
}

/// Layer widths of the shared network, input dimension first and the
/// common representation dimension last. ReLU sits between layers; the
/// final layer has no activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    widths: Vec<usize>,
}

impl BackboneConfig {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "backbone needs at least one layer (two widths)".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::Config("backbone widths must be >= 1".into()));
        }
        Ok(BackboneConfig { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Dimension of the common representation.
    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated nonempty")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn weight_name(layer: usize) -> String {
        format!("backbone.w{layer}")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("backbone.b{layer}")
    }

    /// Registers Xavier-initialized weights and zero biases.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.num_layers() {
            let (d_in, d_out) = (self.widths[l], self.widths[l + 1]);
            store.insert(
                &Self::weight_name(l),
                diff::xavier_uniform(d_in, d_out, rng),
            );
            store.insert(&Self::bias_name(l), Tensor2::zeros(1, d_out));
        }
    }
}

/// Per-layer activations needed to run the backward pass.
pub struct EmbedCache {
    /// Input to each linear layer (first entry is the batch itself).
    inputs: Vec<Tensor2>,
    /// Pre-activation values for every layer followed by a ReLU.
    preacts: Vec<Tensor2>,
}

fn check_batch(batch: &FeatureBatch, cfg: &BackboneConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data(format!(
            "empty {} stream",
            batch.stream().name()
        )));
    }
    if batch.dim() != cfg.input_dim() {
        return Err(Error::Dimension(format!(
            "batch width {} does not match backbone input {}",
            batch.dim(),
            cfg.input_dim()
        )));
    }
    Ok(())
}

/// Maps a batch into the common representation space. The stream tag plays
/// no role here beyond validation: both streams share every parameter.
pub fn embed(batch: &FeatureBatch, params: &ParamStore, cfg: &BackboneConfig) -> Result<Tensor2> {
    Ok(embed_with_cache(batch, params, cfg)?.0)
}

pub fn embed_with_cache(
    batch: &FeatureBatch,
    params: &ParamStore,
    cfg: &BackboneConfig,
) -> Result<(Tensor2, EmbedCache)> {
    check_batch(batch, cfg)?;
    let layers = cfg.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut preacts = Vec::with_capacity(layers.saturating_sub(1));
    let mut x = batch.features().clone();
    for l in 0..layers {
        let w = params.value(&BackboneConfig::weight_name(l));
        let b = params.value(&BackboneConfig::bias_name(l));
        let z = diff::linear(&x, w, b)?;
        inputs.push(x);
        if l + 1 < layers {
            preacts.push(z.clone());
            x = diff::relu(&z);
        } else {
            x = z;
        }
    }
    Ok((x, EmbedCache { inputs, preacts }))
}

/// Accumulates gradients for every backbone parameter given the gradient
/// w.r.t. the embeddings, and is additive: calling it once per stream on a
/// shared store realizes the weight sharing.
pub fn embed_backward(
    cache: &EmbedCache,
    d_embed: &Tensor2,
    params: &mut ParamStore,
    cfg: &BackboneConfig,
) -> Result<()> {
    let layers = cfg.num_layers();
    let mut d = d_embed.clone();
    for l in (0..layers).rev() {
        let w_name = BackboneConfig::weight_name(l);
        let w = params.value(&w_name).clone();
        let grads = diff::linear_backward(&cache.inputs[l], &w, &d)?;
        params.accumulate(&w_name, &grads.wrt_weight, 1.0)?;
        params.accumulate(&BackboneConfig::bias_name(l), &grads.wrt_bias, 1.0)?;
        d = grads.wrt_input;
        if l > 0 {
            d = diff::relu_backward(&cache.preacts[l - 1], &d);
        }
    }
    Ok(())
}

/// Embeds the source and unlabeled batches with the single shared
/// parameter store in one step.
pub fn embed_pair(
    src: &FeatureBatch,
    unl: &FeatureBatch,
    params: &ParamStore,
    cfg: &BackboneConfig,
) -> Result<(Tensor2, Tensor2)> {
    if src.stream() != StreamTag::Source {
        return Err(Error::Data("first batch must be source-tagged".into()));
    }
    if unl.stream() != StreamTag::Unlabeled {
        return Err(Error::Data("second batch must be unlabeled-tagged".into()));
    }
    Ok((embed(src, params, cfg)?, embed(unl, params, cfg)?))
}
