//! Hash head and the similarity-preserving contrastive loss.
//!
//! The batch holds real-valued relaxed codes for all source rows plus the
//! fine-assigned target rows. Pair labels come from class labels on the
//! source side and from detected-class agreement combined with Hamming
//! distance on the target side; pairs meeting neither rule are excluded
//! and contribute nothing.

use crate::diff;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::retrieval;
use crate::tensor::Tensor2;

pub const WEIGHT: &str = "hash.w";
pub const BIAS: &str = "hash.b";

pub fn init_params<R: rand::Rng>(store: &mut ParamStore, d_f: usize, code_len: usize, rng: &mut R) {
    store.insert(WEIGHT, diff::xavier_uniform(d_f, code_len, rng));
    store.insert(BIAS, Tensor2::zeros(1, code_len));
}

/// Where a hash-batch row came from. Source rows carry their class label;
/// target rows carry the novel class the fine head detected for them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOrigin {
    Source { class: usize },
    Target { class: usize },
}

/// Real-valued relaxed codes with one origin per row.
#[derive(Debug, Clone)]
pub struct HashBatch {
    codes: Tensor2,
    origins: Vec<RowOrigin>,
}

impl HashBatch {
    pub fn new(codes: Tensor2, origins: Vec<RowOrigin>) -> Result<Self> {
        if origins.len() != codes.rows() {
            return Err(Error::Dimension(format!(
                "{} origins for {} code rows",
                origins.len(),
                codes.rows()
            )));
        }
        if !codes.is_finite() {
            return Err(Error::Data("non-finite code value".into()));
        }
        Ok(HashBatch { codes, origins })
    }

    pub fn codes(&self) -> &Tensor2 {
        &self.codes
    }

    pub fn origins(&self) -> &[RowOrigin] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn code_len(&self) -> usize {
        self.codes.cols()
    }
}

/// Supervision for one ordered pair of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
    /// Neither rule fired; the pair contributes zero loss.
    Excluded,
}

/// Symmetric matrix of pair labels; the diagonal is always excluded.
#[derive(Debug, Clone)]
pub struct PairLabelMatrix {
    n: usize,
    labels: Vec<PairLabel>,
}

impl PairLabelMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, k: usize) -> PairLabel {
        self.labels[i * self.n + k]
    }

    fn set_sym(&mut self, i: usize, k: usize, label: PairLabel) {
        self.labels[i * self.n + k] = label;
        self.labels[k * self.n + i] = label;
    }

    /// Ordered non-excluded pairs (both `(i,k)` and `(k,i)` count).
    pub fn active_pairs(&self) -> usize {
        let mut count = 0;
        for i in 0..self.n {
            for k in 0..self.n {
                if i != k && self.get(i, k) != PairLabel::Excluded {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Builds the pair-label matrix.
///
/// * source/source: similar when the class labels match, else dissimilar;
/// * source/target in either order: always dissimilar;
/// * target/target: similar when the detected classes match and the
///   Hamming distance of the sign codes is at most `tau_sim`; dissimilar
///   when the classes differ and the distance is at least `tau_dis`;
///   excluded otherwise.
pub fn pair_labels(batch: &HashBatch, tau_sim: usize, tau_dis: usize) -> Result<PairLabelMatrix> {
    let l = batch.code_len();
    if tau_sim > tau_dis || tau_dis > l {
        return Err(Error::Config(format!(
            "need tau_sim <= tau_dis <= code length, got {tau_sim}, {tau_dis}, {l}"
        )));
    }
    let n = batch.len();
    let bits = retrieval::binarize(batch.codes());
    let mut labels = PairLabelMatrix {
        n,
        labels: vec![PairLabel::Excluded; n * n],
    };
    for i in 0..n {
        for k in (i + 1)..n {
            let label = match (batch.origins[i], batch.origins[k]) {
                (RowOrigin::Source { class: a }, RowOrigin::Source { class: b }) => {
                    if a == b {
                        PairLabel::Similar
                    } else {
                        PairLabel::Dissimilar
                    }
                }
                (RowOrigin::Source { .. }, RowOrigin::Target { .. })
                | (RowOrigin::Target { .. }, RowOrigin::Source { .. }) => PairLabel::Dissimilar,
                (RowOrigin::Target { class: a }, RowOrigin::Target { class: b }) => {
                    let d = bits.distance(i, &bits, k)?;
                    if a == b && d <= tau_sim {
                        PairLabel::Similar
                    } else if a != b && d >= tau_dis {
                        PairLabel::Dissimilar
                    } else {
                        PairLabel::Excluded
                    }
                }
            };
            labels.set_sym(i, k, label);
        }
    }
    Ok(labels)
}

/// Contrastive loss over all ordered pairs: similar pairs pay the squared
/// Euclidean distance of their codes, dissimilar pairs pay the hinge
/// `max(0, eps - distance^2)`. `sum` is the plain double sum; callers that
/// want a batch-size-independent quantity divide by `pair_count`.
#[derive(Debug)]
pub struct ContrastiveLoss {
    pub sum: f64,
    /// Ordered non-excluded pairs contributing to `sum`.
    pub pair_count: usize,
    /// Gradient of `sum` w.r.t. the codes.
    pub wrt_codes: Tensor2,
}

impl ContrastiveLoss {
    /// `sum` averaged over the non-excluded ordered pairs (zero when no
    /// pair is active).
    pub fn mean(&self) -> f64 {
        if self.pair_count == 0 {
            0.0
        } else {
            self.sum / self.pair_count as f64
        }
    }

    /// Gradient of `mean()` w.r.t. the codes.
    pub fn mean_grad(&self) -> Tensor2 {
        let mut g = self.wrt_codes.clone();
        if self.pair_count > 0 {
            g.scale(1.0 / self.pair_count as f64);
        }
        g
    }
}

pub fn contrastive_loss(
    batch: &HashBatch,
    labels: &PairLabelMatrix,
    eps: f64,
) -> Result<ContrastiveLoss> {
    if labels.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "pair labels for {} rows against a batch of {}",
            labels.len(),
            batch.len()
        )));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("margin must be positive, got {eps}")));
    }
    let n = batch.len();
    let h = batch.codes();
    let mut sum = 0.0;
    let mut pair_count = 0usize;
    let mut wrt_codes = Tensor2::zeros(n, h.cols());
    for i in 0..n {
        for k in 0..n {
            if i == k {
                continue;
            }
            let label = labels.get(i, k);
            if label == PairLabel::Excluded {
                continue;
            }
            pair_count += 1;
            let d2 = diff::squared_row_distance(h.row(i), h.row(k));
            match label {
                PairLabel::Similar => {
                    sum += d2;
                    for ((gi, gk), (&hi, &hk)) in wrt_codes_pair(&mut wrt_codes, i, k, h.cols())
                        .zip(h.row(i).iter().zip(h.row(k)))
                    {
                        let g = 2.0 * (hi - hk);
                        *gi += g;
                        *gk -= g;
                    }
                }
                PairLabel::Dissimilar => {
                    if eps - d2 > 0.0 {
                        sum += eps - d2;
                        for ((gi, gk), (&hi, &hk)) in wrt_codes_pair(&mut wrt_codes, i, k, h.cols())
                            .zip(h.row(i).iter().zip(h.row(k)))
                        {
                            let g = -2.0 * (hi - hk);
                            *gi += g;
                            *gk -= g;
                        }
                    }
                    // inactive hinge: no contribution, subgradient zero
                }
                PairLabel::Excluded => unreachable!(),
            }
        }
    }
    Ok(ContrastiveLoss {
        sum,
        pair_count,
        wrt_codes,
    })
}

/// Mutable access to rows `i` and `k` of the gradient matrix at once.
fn wrt_codes_pair(
    g: &mut Tensor2,
    i: usize,
    k: usize,
    cols: usize,
) -> impl Iterator<Item = (&mut f64, &mut f64)> {
    debug_assert_ne!(i, k);
    let (lo, hi, swap) = if i < k { (i, k, false) } else { (k, i, true) };
    let data = g.data_mut();
    let (head, tail) = data.split_at_mut(hi * cols);
    let row_lo = &mut head[lo * cols..(lo + 1) * cols];
    let row_hi = &mut tail[..cols];
    row_lo
        .iter_mut()
        .zip(row_hi)
        .map(move |(a, b)| if swap { (b, a) } else { (a, b) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(codes: &[Vec<f64>], origins: Vec<RowOrigin>) -> HashBatch {
        HashBatch::new(Tensor2::from_rows(codes).unwrap(), origins).unwrap()
    }

    #[test]
    fn source_rows_with_same_label_are_similar() {
        let b = batch(
            &[vec![1.0, 1.0], vec![-1.0, 1.0]],
            vec![
                RowOrigin::Source { class: 3 },
                RowOrigin::Source { class: 3 },
            ],
        );
        let labels = pair_labels(&b, 0, 2).unwrap();
        assert_eq!(labels.get(0, 1), PairLabel::Similar);
        assert_eq!(labels.get(1, 0), PairLabel::Similar);
        assert_eq!(labels.get(0, 0), PairLabel::Excluded);
    }

    #[test]
    fn source_target_pairs_are_always_dissimilar() {
        let b = batch(
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![
                RowOrigin::Source { class: 3 },
                RowOrigin::Target { class: 3 },
            ],
        );
        let labels = pair_labels(&b, 2, 2).unwrap();
        assert_eq!(labels.get(0, 1), PairLabel::Dissimilar);
    }

    #[test]
    fn target_pair_rule_table() {
        let near = vec![1.0, 1.0, 1.0, 1.0];
        let far = vec![-1.0, -1.0, -1.0, -1.0];
        let same = |class| RowOrigin::Target { class };

        // same class, hamming 0 <= tau_sim: similar
        let b = batch(&[near.clone(), near.clone()], vec![same(0), same(0)]);
        assert_eq!(pair_labels(&b, 1, 3).unwrap().get(0, 1), PairLabel::Similar);

        // same class but hamming 4 > tau_sim: excluded
        let b = batch(&[near.clone(), far.clone()], vec![same(0), same(0)]);
        assert_eq!(
            pair_labels(&b, 1, 3).unwrap().get(0, 1),
            PairLabel::Excluded
        );

        // different classes, hamming 4 >= tau_dis: dissimilar
        let b = batch(&[near.clone(), far], vec![same(0), same(1)]);
        assert_eq!(
            pair_labels(&b, 1, 3).unwrap().get(0, 1),
            PairLabel::Dissimilar
        );

        // different classes but hamming 0 < tau_dis: excluded
        let b = batch(&[near.clone(), near], vec![same(0), same(1)]);
        assert_eq!(
            pair_labels(&b, 1, 3).unwrap().get(0, 1),
            PairLabel::Excluded
        );
    }

    #[test]
    fn pair_labels_reject_bad_thresholds() {
        let b = batch(&[vec![1.0, 1.0]], vec![RowOrigin::Source { class: 0 }]);
        assert!(pair_labels(&b, 2, 1).is_err());
        assert!(pair_labels(&b, 0, 3).is_err());
    }

    #[test]
    fn identical_similar_rows_cost_nothing() {
        let b = batch(
            &[vec![0.5, -0.5], vec![0.5, -0.5]],
            vec![
                RowOrigin::Source { class: 1 },
                RowOrigin::Source { class: 1 },
            ],
        );
        let labels = pair_labels(&b, 0, 2).unwrap();
        let loss = contrastive_loss(&b, &labels, 4.0).unwrap();
        assert_eq!(loss.sum, 0.0);
        assert_eq!(loss.pair_count, 2);
        assert!(loss.wrt_codes.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn similar_pair_hand_value_counts_both_orders() {
        // distance^2 between [1,1] and [-1,1] is 4; two ordered pairs -> 8
        let b = batch(
            &[vec![1.0, 1.0], vec![-1.0, 1.0]],
            vec![
                RowOrigin::Source { class: 1 },
                RowOrigin::Source { class: 1 },
            ],
        );
        let labels = pair_labels(&b, 0, 2).unwrap();
        let loss = contrastive_loss(&b, &labels, 4.0).unwrap();
        assert_eq!(loss.sum, 8.0);
        assert_eq!(loss.mean(), 4.0);
    }

    #[test]
    fn inactive_hinge_contributes_nothing() {
        let b = batch(
            &[vec![2.0, 2.0], vec![-2.0, -2.0]],
            vec![
                RowOrigin::Source { class: 0 },
                RowOrigin::Source { class: 1 },
            ],
        );
        let labels = pair_labels(&b, 0, 2).unwrap();
        // distance^2 = 32 >= eps = 8
        let loss = contrastiv_loss_checked(&b, &labels, 8.0);
        assert_eq!(loss.sum, 0.0);
        assert_eq!(loss.pair_count, 2);
        assert!(loss.wrt_codes.data().iter().all(|&g| g == 0.0));
    }

    fn contrastiv_loss_checked(
        b: &HashBatch,
        labels: &PairLabelMatrix,
        eps: f64,
    ) -> ContrastiveLoss {
        contrastive_loss(b, labels, eps).unwrap()
    }

    #[test]
    fn pair_gradients_are_antisymmetric() {
        let b = batch(
            &[vec![1.0, 0.5], vec![-0.25, 1.5]],
            vec![
                RowOrigin::Source { class: 1 },
                RowOrigin::Source { class: 1 },
            ],
        );
        let labels = pair_labels(&b, 0, 2).unwrap();
        let loss = contrastive_loss(&b, &labels, 4.0).unwrap();
        for c in 0..2 {
            let gi = loss.wrt_codes.get(0, c);
            let gk = loss.wrt_codes.get(1, c);
            assert_eq!(gi, -gk);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let b = batch(
            &[vec![0.1, -0.2], vec![0.3, 0.4], vec![-0.5, 0.6]],
            vec![
                RowOrigin::Source { class: 0 },
                RowOrigin::Source { class: 1 },
                RowOrigin::Target { class: 5 },
            ],
        );
        let labels = pair_labels(&b, 0, 1).unwrap();
        let loss = contrastive_loss(&b, &labels, 3.0).unwrap();
        assert!(loss.sum >= 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // only equality of class ids matters, so relabeling classes by
            // any injective map leaves the label matrix unchanged
            #[test]
            fn pair_labels_invariant_under_relabeling(
                classes in proptest::collection::vec(0usize..4, 5),
                offsets in proptest::collection::vec(-1.0f64..1.0, 5),
            ) {
                let codes: Vec<Vec<f64>> = offsets
                    .iter()
                    .map(|&o| vec![o, -o, o + 0.5, o - 0.5])
                    .collect();
                let origins: Vec<RowOrigin> = classes
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| if i % 2 == 0 {
                        RowOrigin::Source { class: c }
                    } else {
                        RowOrigin::Target { class: c }
                    })
                    .collect();
                let relabeled: Vec<RowOrigin> = origins
                    .iter()
                    .map(|o| match *o {
                        RowOrigin::Source { class } => RowOrigin::Source { class: class * 7 + 13 },
                        RowOrigin::Target { class } => RowOrigin::Target { class: class * 7 + 13 },
                    })
                    .collect();
                let codes_t = Tensor2::from_rows(&codes).unwrap();
                let a = pair_labels(&HashBatch::new(codes_t.clone(), origins).unwrap(), 1, 3).unwrap();
                let b = pair_labels(&HashBatch::new(codes_t, relabeled).unwrap(), 1, 3).unwrap();
                for i in 0..5 {
                    for k in 0..5 {
                        prop_assert_eq!(a.get(i, k), b.get(i, k));
                    }
                }
            }

            // the gradient of every pair term sums to zero over the batch
            #[test]
            fn pair_gradients_sum_to_zero(
                vals in proptest::collection::vec(-2.0f64..2.0, 12),
                classes in proptest::collection::vec(0usize..3, 4),
            ) {
                let codes = Tensor2::from_vec(4, 3, vals).unwrap();
                let origins: Vec<RowOrigin> = classes
                    .iter()
                    .map(|&c| RowOrigin::Source { class: c })
                    .collect();
                let b = HashBatch::new(codes, origins).unwrap();
                let labels = pair_labels(&b, 0, 1).unwrap();
                let loss = contrastive_loss(&b, &labels, 2.5).unwrap();
                for c in 0..3 {
                    let col_sum: f64 = (0..4).map(|i| loss.wrt_codes.get(i, c)).sum();
                    prop_assert!(col_sum.abs() < 1e-12);
                }
            }
        }
    }
}
