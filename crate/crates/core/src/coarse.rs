//! Coarse similarity mining: a binary seen-vs-novel head over the shared
//! representation, plus the cross-images selection layer that keeps one
//! image per group of the unlabeled batch.
//!
//! Column 0 of a score row is the probability of coming from the seen
//! classes, column 1 the probability of being novel. Source rows are
//! trained toward column 0; the selected unlabeled rows toward column 1.
//! Backward routes gradient only to the selected unlabeled rows.

use crate::diff::{self, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

/// Probability column for "comes from a seen class".
pub const COL_SEEN: usize = 0;
/// Probability column for "comes from a novel class".
pub const COL_NOVEL: usize = 1;

pub const WEIGHT: &str = "coarse.w";
pub const BIAS: &str = "coarse.b";

/// Registers the 2-way head parameters.
pub fn init_params<R: rand::Rng>(store: &mut ParamStore, d_f: usize, rng: &mut R) {
    store.insert(WEIGHT, diff::xavier_uniform(d_f, 2, rng));
    store.insert(BIAS, Tensor2::zeros(1, 2));
}

/// Softmax probabilities of the binary head for both streams. One shared
/// set of head weights scores both.
#[derive(Debug, Clone)]
pub struct CoarseScores {
    /// `r_u x 2` probabilities for the unlabeled rows.
    pub unlabeled: Tensor2,
    /// `r_s x 2` probabilities for the source rows.
    pub source: Tensor2,
}

pub fn score(f_u: &Tensor2, f_s: &Tensor2, params: &ParamStore) -> Result<CoarseScores> {
    let w = params.value(WEIGHT);
    let b = params.value(BIAS);
    Ok(CoarseScores {
        unlabeled: diff::softmax_rows(&diff::linear(f_u, w, b)?),
        source: diff::softmax_rows(&diff::linear(f_s, w, b)?),
    })
}

/// One selected row index per contiguous group of the unlabeled batch.
#[derive(Debug, Clone)]
pub struct CoarseSelection {
    /// Selected unlabeled row per group, strictly increasing.
    pub indices: Vec<usize>,
    /// Rows per group.
    pub group_size: usize,
}

/// Splits the unlabeled scores into `m` contiguous groups of equal length
/// and keeps, per group, the row with the highest novel-class probability.
/// Ties go to the lowest row index.
pub fn select(scores: &CoarseScores, m: usize) -> Result<CoarseSelection> {
    let r_u = scores.unlabeled.rows();
    if m == 0 {
        return Err(Error::Config("m must be >= 1".into()));
    }
    if !r_u.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "unlabeled batch size {r_u} is not divisible by m = {m}"
        )));
    }
    let group_size = r_u / m;
    let mut indices = Vec::with_capacity(m);
    for g in 0..m {
        let start = g * group_size;
        let mut best = start;
        let mut best_v = f64::NEG_INFINITY;
        for j in start..start + group_size {
            let v = scores.unlabeled.get(j, COL_NOVEL);
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        indices.push(best);
    }
    Ok(CoarseSelection {
        indices,
        group_size,
    })
}

/// Coarse loss value and its gradient w.r.t. the probability matrices.
#[derive(Debug)]
pub struct CoarseLoss {
    pub loss: f64,
    /// Mean negative log novel-probability of the selected rows.
    pub unlabeled_term: f64,
    /// Mean negative log seen-probability of the source rows.
    pub source_term: f64,
    /// Gradient w.r.t. the unlabeled probabilities; rows other than the
    /// selected ones are never written and stay exactly zero.
    pub wrt_unlabeled: Tensor2,
    /// Gradient w.r.t. the source probabilities.
    pub wrt_source: Tensor2,
}

/// Mean negative log novel-probability of the selected unlabeled rows plus
/// mean negative log seen-probability of all source rows. Probabilities
/// are floored at `PROB_FLOOR` inside the logs; floored entries carry zero
/// gradient.
pub fn coarse_loss(scores: &CoarseScores, selection: &CoarseSelection) -> Result<CoarseLoss> {
    let m = selection.indices.len();
    let r_u = scores.unlabeled.rows();
    let r_s = scores.source.rows();
    if m == 0 || r_s == 0 {
        return Err(Error::Data("coarse loss over empty batch".into()));
    }
    if selection.indices.iter().any(|&j| j >= r_u) {
        return Err(Error::Dimension("selection index out of range".into()));
    }
    let mut unlabeled_term = 0.0;
    let mut wrt_unlabeled = Tensor2::zeros(r_u, 2);
    for &j in &selection.indices {
        let p = scores.unlabeled.get(j, COL_NOVEL);
        unlabeled_term -= p.max(PROB_FLOOR).ln() / m as f64;
        if p >= PROB_FLOOR {
            let g = wrt_unlabeled.get(j, COL_NOVEL) - 1.0 / (m as f64 * p);
            wrt_unlabeled.set(j, COL_NOVEL, g);
        }
    }
    let mut source_term = 0.0;
    let mut wrt_source = Tensor2::zeros(r_s, 2);
    for i in 0..r_s {
        let p = scores.source.get(i, COL_SEEN);
        source_term -= p.max(PROB_FLOOR).ln() / r_s as f64;
        if p >= PROB_FLOOR {
            wrt_source.set(i, COL_SEEN, -1.0 / (r_s as f64 * p));
        }
    }
    Ok(CoarseLoss {
        loss: unlabeled_term + source_term,
        unlabeled_term,
        source_term,
        wrt_unlabeled,
        wrt_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores_from(unl_novel: &[f64], src_seen: &[f64]) -> CoarseScores {
        let unlabeled = Tensor2::from_rows(
            &unl_novel
                .iter()
                .map(|&p| vec![1.0 - p, p])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let source = Tensor2::from_rows(
            &src_seen
                .iter()
                .map(|&p| vec![p, 1.0 - p])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        CoarseScores { unlabeled, source }
    }

    #[test]
    fn zero_weight_head_scores_half() {
        let mut params = ParamStore::new();
        params.insert(WEIGHT, Tensor2::zeros(3, 2));
        params.insert(BIAS, Tensor2::zeros(1, 2));
        let f = Tensor2::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let s = score(&f, &f, &params).unwrap();
        assert_eq!(s.unlabeled.row(0), &[0.5, 0.5]);
        assert_eq!(s.source.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn score_rows_sum_to_one() {
        let mut params = ParamStore::new();
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(11)
        };
        init_params(&mut params, 4, &mut rng);
        let f = diff::xavier_uniform(6, 4, &mut rng);
        let s = score(&f, &f, &params).unwrap();
        for i in 0..s.unlabeled.rows() {
            let sum: f64 = s.unlabeled.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_favoring_novel_column_scores_above_half() {
        let mut params = ParamStore::new();
        params.insert(
            WEIGHT,
            Tensor2::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap(),
        );
        params.insert(BIAS, Tensor2::zeros(1, 2));
        let f = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = score(&f, &f, &params).unwrap();
        assert!(s.unlabeled.get(0, COL_NOVEL) > 0.5);
    }

    #[test]
    fn select_takes_per_group_argmax() {
        let s = scores_from(&[0.1, 0.9, 0.8, 0.2], &[1.0]);
        let sel = select(&s, 2).unwrap();
        assert_eq!(sel.indices, vec![1, 2]);
        assert_eq!(sel.group_size, 2);
    }

    #[test]
    fn select_ties_go_to_lowest_index() {
        let s = scores_from(&[0.5; 8], &[1.0]);
        let sel = select(&s, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 4]);
    }

    #[test]
    fn select_paper_scale_grouping() {
        let novel: Vec<f64> = (0..256).map(|i| (i % 8) as f64 / 8.0).collect();
        let s = scores_from(&novel, &[1.0]);
        let sel = select(&s, 32).unwrap();
        assert_eq!(sel.indices.len(), 32);
        assert_eq!(sel.group_size, 8);
        for (g, &j) in sel.indices.iter().enumerate() {
            assert!(j >= g * 8 && j < (g + 1) * 8);
            assert_eq!(j % 8, 7); // highest score sits last in each block
        }
    }

    #[test]
    fn select_rejects_indivisible_batch() {
        let s = scores_from(&[0.5; 10], &[1.0]);
        assert!(matches!(select(&s, 3), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_scores_give_zero_loss() {
        let s = scores_from(&[0.0, 1.0], &[1.0, 1.0]);
        let sel = select(&s, 1).unwrap();
        assert_eq!(sel.indices, vec![1]);
        let l = coarse_loss(&s, &sel).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn hand_value_two_halves() {
        // one selected row at probability 0.5, one source row at 0.5:
        // loss = -ln(0.5) - ln(0.5) = 2 ln 2
        let s = scores_from(&[0.5], &[0.5]);
        let sel = select(&s, 1).unwrap();
        let l = coarse_loss(&s, &sel).unwrap();
        assert!((l.loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn non_selected_rows_have_exactly_zero_gradient() {
        let s = scores_from(&[0.1, 0.9, 0.8, 0.2], &[0.7]);
        let sel = select(&s, 2).unwrap();
        let l = coarse_loss(&s, &sel).unwrap();
        for j in 0..4 {
            let selected = sel.indices.contains(&j);
            for c in 0..2 {
                let g = l.wrt_unlabeled.get(j, c);
                if !selected {
                    assert_eq!(g.to_bits(), 0, "row {j} col {c} = {g}");
                }
            }
        }
        assert!(l.wrt_unlabeled.get(1, COL_NOVEL) < 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // argmax selection only looks at the order of novel scores, so
            // any strictly increasing transform leaves the pick unchanged
            #[test]
            fn selection_invariant_under_monotone_transform(
                novel in proptest::collection::vec(0.001f64..0.999, 8),
            ) {
                let plain = scores_from(&novel, &[1.0]);
                let warped: Vec<f64> = novel.iter().map(|&p| (3.0 * p).exp() / 30.0).collect();
                let warped = scores_from(&warped, &[1.0]);
                for m in [1usize, 2, 4, 8] {
                    prop_assert_eq!(
                        select(&plain, m).unwrap().indices,
                        select(&warped, m).unwrap().indices
                    );
                }
            }
        }
    }
}
