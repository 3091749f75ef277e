//! Set-prediction loss: focal loss, Hungarian element matching between
//! predicted and ground-truth sets, caption cross-entropy, classification
//! loss, diversity regularizer, and their weighted sum.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const PROB_EPS: f64 = 1e-7;

/// Optimal injection from predicted indices into ground-truth indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// sigma[j] = index of the ground-truth element matched to prediction j.
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

/// The loss terms of one training step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cap: f64,
    pub l_cls: f64,
    pub l_div: f64,
    pub l_sp: f64,
    pub lambda: f64,
    pub lambda_d: f64,
}

/// Focal loss over plain numbers (used for matching costs).
///
/// sum_k -[ t_k * alpha * (1-p_k)^gamma * ln p_k
///        + (1-t_k) * (1-alpha) * p_k^gamma * ln(1-p_k) ]
pub fn focal_loss_value(target: &[f64], probs: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    if target.len() != probs.len() {
        return Err(Error::Shape(format!(
            "focal loss: target length {} vs probs length {}",
            target.len(),
            probs.len()
        )));
    }
    let mut total = 0.0;
    for (&t, &p) in target.iter().zip(probs) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= t * alpha * (1.0 - p).powf(gamma) * p.ln()
            + (1.0 - t) * (1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
    }
    Ok(total)
}

/// Differentiable focal loss; `target` and `probs` are matrices of equal
/// shape, the result is the scalar sum over all entries.
pub fn focal_loss(tape: &mut Tape, target: Var, probs: Var, gamma: f64, alpha: f64) -> Var {
    let dim = tape.value(target).dim();
    assert_eq!(dim, tape.value(probs).dim(), "focal loss shape mismatch");
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let ones = tape.leaf(Array2::from_elem(dim, 1.0));
    let one_minus_p = tape.sub(ones, p);
    let one_minus_t = tape.sub(ones, target);
    let ln_p = tape.ln(p);
    let ln_1p = tape.ln(one_minus_p);
    let w_pos = tape.pow_scalar(one_minus_p, gamma);
    let w_neg = tape.pow_scalar(p, gamma);
    let pos = tape.mul(target, w_pos);
    let pos = tape.mul(pos, ln_p);
    let pos = tape.scale(pos, alpha);
    let neg = tape.mul(one_minus_t, w_neg);
    let neg = tape.mul(neg, ln_1p);
    let neg = tape.scale(neg, 1.0 - alpha);
    let both = tape.add(pos, neg);
    let s = tape.sum(both);
    tape.scale(s, -1.0)
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols).
/// Returns the assigned column per row and the total cost.
pub fn hungarian(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    let m = cost.ncols();
    assert!(n <= m, "hungarian requires rows <= cols");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[[r, c]])
        .sum();
    (assign, total)
}

/// Minimum-cost assignment that is lexicographically smallest among optima.
///
/// Row by row, fixes the smallest column whose forced assignment still
/// achieves the global optimum of the remaining subproblem.
pub fn hungarian_lexicographic(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    let m = cost.ncols();
    let (_, best) = hungarian(cost);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut used = vec![false; m];
    let mut sigma = vec![usize::MAX; n];
    let mut fixed_cost = 0.0;
    for row in 0..n {
        for col in 0..m {
            if used[col] {
                continue;
            }
            // cost of the remaining rows over the remaining columns
            let rest_rows = n - row - 1;
            let rest = if rest_rows == 0 {
                0.0
            } else {
                let free_cols: Vec<usize> = (0..m)
                    .filter(|&c| !used[c] && c != col)
                    .collect();
                let mut sub = Array2::zeros((rest_rows, free_cols.len()));
                for (ri, r) in (row + 1..n).enumerate() {
                    for (ci, &c) in free_cols.iter().enumerate() {
                        sub[[ri, ci]] = cost[[r, c]];
                    }
                }
                hungarian(&sub).1
            };
            if fixed_cost + cost[[row, col]] + rest <= best + tol {
                sigma[row] = col;
                used[col] = true;
                fixed_cost += cost[[row, col]];
                break;
            }
        }
        assert!(sigma[row] != usize::MAX, "no feasible column found");
    }
    (sigma, fixed_cost)
}

/// Set matching: focal cost between every (prediction, ground truth)
/// pair, solved by the rectangular Hungarian algorithm.
pub fn match_sets(
    gt_labels: &[Vec<f64>],
    pred_scores: &[Vec<f64>],
    gamma: f64,
    alpha: f64,
) -> Result<MatchAssignment> {
    let m = pred_scores.len();
    let m_prime = gt_labels.len();
    if m > m_prime {
        return Err(Error::Config(
            "predicted set larger than ground-truth set".into(),
        ));
    }
    let mut cost = Array2::zeros((m, m_prime));
    for (j, pred) in pred_scores.iter().enumerate() {
        for (i, gt) in gt_labels.iter().enumerate() {
            cost[[j, i]] = focal_loss_value(gt, pred, gamma, alpha)?;
        }
    }
    let (sigma, total_cost) = hungarian_lexicographic(&cost);
    Ok(MatchAssignment { sigma, total_cost })
}

/// Caption cross-entropy: `log_probs[j]` holds the T_j x V log-softmax rows
/// for element j under teacher forcing; `targets[j]` the matched caption's
/// token ids. Returns (loss var, total token count).
pub fn caption_loss(tape: &mut Tape, log_probs: &[Var], targets: &[Vec<usize>]) -> (Var, usize) {
    assert_eq!(log_probs.len(), targets.len());
    let mut terms = Vec::with_capacity(log_probs.len());
    let mut tokens = 0usize;
    for (&lp, ids) in log_probs.iter().zip(targets) {
        assert_eq!(
            tape.value(lp).nrows(),
            ids.len(),
            "caption loss: steps vs targets"
        );
        tokens += ids.len();
        let picked = tape.pick_per_row(lp, ids);
        terms.push(tape.sum(picked));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    (tape.scale(acc, -1.0), tokens)
}

/// Classification loss: summed focal loss over the matched pairs. `matched_gt` is the
/// M x N_c matrix of ground-truth labels reordered by the assignment.
pub fn classification_loss(
    tape: &mut Tape,
    matched_gt: Var,
    pred_scores: Var,
    gamma: f64,
    alpha: f64,
) -> Var {
    focal_loss(tape, matched_gt, pred_scores, gamma, alpha)
}

/// Diversity regularizer: negative sum over concepts of the population standard deviation
/// of the M predicted probabilities. Zero when M == 1 or all rows equal.
pub fn diversity_regularizer(tape: &mut Tape, pred_scores: Var) -> Var {
    let m = tape.value(pred_scores).nrows();
    if m == 1 {
        return tape.scalar(0.0);
    }
    let mean = tape.mean_rows(pred_scores);
    let neg_mean = tape.scale(mean, -1.0);
    let centered = tape.add_row(pred_scores, neg_mean);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_rows(sq);
    let std = tape.sqrt(var);
    let s = tape.sum(std);
    tape.scale(s, -1.0)
}

/// Total set-prediction loss L_sp = L_cap + lambda * L_cls + lambda_d * L_div, computed after
/// matching. The assignment is treated as a constant for differentiation.
#[allow(clippy::too_many_arguments)]
pub fn set_prediction_loss(
    tape: &mut Tape,
    gt_labels: &[Vec<f64>],
    gt_token_ids: &[Vec<usize>],
    pred_scores: Var,
    log_probs_fn: impl FnOnce(&mut Tape, &[usize]) -> Vec<Var>,
    lambda: f64,
    lambda_d: f64,
    gamma: f64,
    alpha: f64,
) -> Result<(Var, LossBreakdown, MatchAssignment)> {
    let m = tape.value(pred_scores).nrows();
    let scores: Vec<Vec<f64>> = (0..m)
        .map(|j| tape.value(pred_scores).row(j).to_vec())
        .collect();
    let assignment = match_sets(gt_labels, &scores, gamma, alpha)?;

    let matched_targets: Vec<Vec<usize>> = assignment
        .sigma
        .iter()
        .map(|&i| gt_token_ids[i].clone())
        .collect();
    let log_probs = log_probs_fn(tape, &assignment.sigma);
    let (l_cap, _tokens) = caption_loss(tape, &log_probs, &matched_targets);

    let n_c = gt_labels[0].len();
    let mut matched = Array2::zeros((m, n_c));
    for (j, &i) in assignment.sigma.iter().enumerate() {
        for (k, &b) in gt_labels[i].iter().enumerate() {
            matched[[j, k]] = b;
        }
    }
    let matched_var = tape.leaf(matched);
    let l_cls = classification_loss(tape, matched_var, pred_scores, gamma, alpha);
    let l_div = diversity_regularizer(tape, pred_scores);

    let cls_w = tape.scale(l_cls, lambda);
    let div_w = tape.scale(l_div, lambda_d);
    let partial = tape.add(l_cap, cls_w);
    let l_sp = tape.add(partial, div_w);

    let breakdown = LossBreakdown {
        l_cap: tape.scalar_value(l_cap),
        l_cls: tape.scalar_value(l_cls),
        l_div: tape.scalar_value(l_div),
        l_sp: tape.scalar_value(l_sp),
        lambda,
        lambda_d,
    };
    Ok((l_sp, breakdown, assignment))
}

/// Brute-force minimum over all injections, for oracle tests.
pub fn brute_force_min_cost(cost: &Array2<f64>) -> f64 {
    fn rec(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.nrows() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cost.ncols() {
            if !used[c] {
                used[c] = true;
                let v = cost[[row, c]] + rec(cost, row + 1, used);
                used[c] = false;
                if v < best {
                    best = v;
                }
            }
        }
        best
    }
    let mut used = vec![false; cost.ncols()];
    rec(cost, 0, &mut used)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn focal_hand_value() {
        // target [1], p 0.5, gamma 2, alpha 0.25 -> 0.25 * 0.25 * ln 2
        let v = focal_loss_value(&[1.0], &[0.5], 2.0, 0.25).unwrap();
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((v - expect).abs() < 1e-12);
        assert!((expect - 0.04332).abs() < 5e-6);
    }

    #[test]
    fn focal_perfect_positive_near_zero() {
        let v = focal_loss_value(&[1.0], &[1.0 - PROB_EPS], 2.0, 0.25).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let mut rng = crate::nn::seeded_rng(7);
        for _ in 0..100 {
            let n = rng.gen_range(1..20);
            let t: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let fl = focal_loss_value(&t, &p, 0.0, 0.5).unwrap();
            let bce: f64 = t
                .iter()
                .zip(&p)
                .map(|(&t, &p)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
                .sum();
            assert!((fl - 0.5 * bce).abs() < 1e-9, "{} vs {}", fl, 0.5 * bce);
        }
    }

    #[test]
    fn focal_length_mismatch_errors() {
        assert!(focal_loss_value(&[1.0, 0.0], &[0.5], 2.0, 0.25).is_err());
    }

    #[test]
    fn hungarian_simple() {
        let cost = array![[1.0, 0.0], [0.0, 1.0]];
        let (sigma, total) = hungarian_lexicographic(&cost);
        assert_eq!(sigma, vec![1, 0]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn hungarian_rectangular_derived() {
        // brute force over all 6 injections gives sigma = (1, 0), total 2
        let cost = array![[5.0, 1.0, 9.0], [1.0, 9.0, 9.0]];
        let (sigma, total) = hungarian_lexicographic(&cost);
        assert_eq!(sigma, vec![1, 0]);
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force_small() {
        let mut rng = crate::nn::seeded_rng(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(n..=7);
            let cost = Array2::from_shape_fn((n, m), |_| rng.gen_range(0.0..10.0));
            let (_, total) = hungarian(&cost);
            let bf = brute_force_min_cost(&cost);
            assert!((total - bf).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_lexicographic_prefers_smaller_columns() {
        // all-equal costs: every assignment optimal, expect identity
        let cost = Array2::from_elem((3, 5), 1.0);
        let (sigma, _) = hungarian_lexicographic(&cost);
        assert_eq!(sigma, vec![0, 1, 2]);
    }

    #[test]
    fn match_rejects_oversized_prediction() {
        let gt = vec![vec![1.0, 0.0]];
        let pred = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(match_sets(&gt, &pred, 2.0, 0.25).is_err());
    }

    #[test]
    fn match_cost_invariant_under_gt_permutation() {
        let mut rng = crate::nn::seeded_rng(3);
        let gt: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        let pred: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.gen_range(0.05..0.95)).collect())
            .collect();
        let a = match_sets(&gt, &pred, 2.0, 0.25).unwrap();
        let mut gt_rev = gt.clone();
        gt_rev.reverse();
        let b = match_sets(&gt_rev, &pred, 2.0, 0.25).unwrap();
        assert!((a.total_cost - b.total_cost).abs() < 1e-9);
    }

    #[test]
    fn dominant_diagonal_is_identity() {
        let mut cost = Array2::from_elem((4, 4), 10.0);
        for i in 0..4 {
            cost[[i, i]] = 0.1;
        }
        let (sigma, _) = hungarian_lexicographic(&cost);
        assert_eq!(sigma, vec![0, 1, 2, 3]);
    }

    #[test]
    fn diversity_zero_for_identical_rows() {
        let mut tape = Tape::new();
        let p = tape.leaf(Array2::from_elem((5, 3), 0.4));
        let d = diversity_regularizer(&mut tape, p);
        assert!(tape.scalar_value(d).abs() < 1e-12);
    }

    #[test]
    fn diversity_hand_value() {
        // M = 2, N_c = 1, probs {0, 1}: population stddev 0.5, value -0.5
        let mut tape = Tape::new();
        let p = tape.leaf(array![[0.0], [1.0]]);
        let d = diversity_regularizer(&mut tape, p);
        assert!((tape.scalar_value(d) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn diversity_lower_bound() {
        let mut rng = crate::nn::seeded_rng(5);
        for _ in 0..20 {
            let m = rng.gen_range(2..8);
            let nc = rng.gen_range(1..10);
            let mut tape = Tape::new();
            let p = tape.leaf(Array2::from_shape_fn((m, nc), |_| rng.gen_range(0.0..1.0)));
            let d = diversity_regularizer(&mut tape, p);
            let v = tape.scalar_value(d);
            assert!(v <= 1e-12);
            assert!(v >= -(nc as f64) * 0.5 - 1e-12);
        }
    }

    #[test]
    fn caption_loss_uniform_closed_form() {
        // uniform over V words, n tokens total -> loss = n ln V
        let v_size = 7;
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((4, v_size)));
        let lp = tape.log_softmax_rows(logits);
        let (loss, tokens) = caption_loss(&mut tape, &[lp], &[vec![0, 3, 5, 2]]);
        assert_eq!(tokens, 4);
        let expect = 4.0 * (v_size as f64).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn caption_loss_onehot_is_zero() {
        let mut tape = Tape::new();
        // logits strongly peaked at the target -> log prob ~ 0
        let mut logits = Array2::from_elem((3, 5), -1e4);
        for (r, &c) in [1usize, 4, 2].iter().enumerate() {
            logits[[r, c]] = 0.0;
        }
        let l = tape.leaf(logits);
        let lp = tape.log_softmax_rows(l);
        let (loss, _) = caption_loss(&mut tape, &[lp], &[vec![1, 4, 2]]);
        assert!(tape.scalar_value(loss).abs() < 1e-9);
    }

    #[test]
    fn set_loss_decomposition_identity() {
        let mut rng = crate::nn::seeded_rng(9);
        let n_c = 4;
        let gt_labels: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n_c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        let gt_tokens = vec![vec![0, 1], vec![2], vec![1, 0, 2]];
        let mut tape = Tape::new();
        let pred = tape.leaf(Array2::from_shape_fn((2, n_c), |_| rng.gen_range(0.1..0.9)));
        let (l_sp, bd, _) = set_prediction_loss(
            &mut tape,
            &gt_labels,
            &gt_tokens,
            pred,
            |tape, sigma| {
                sigma
                    .iter()
                    .map(|&i| {
                        let t = gt_tokens[i].len();
                        let logits = tape.leaf(Array2::from_elem((t, 5), 0.3));
                        tape.log_softmax_rows(logits)
                    })
                    .collect()
            },
            1.0,
            0.5,
            2.0,
            0.25,
        )
        .unwrap();
        assert_eq!(
            bd.l_sp,
            bd.l_cap + bd.lambda * bd.l_cls + bd.lambda_d * bd.l_div
        );
        assert_eq!(tape.scalar_value(l_sp), bd.l_sp);
        assert!(bd.l_div <= 0.0);
    }

    #[test]
    fn set_loss_zero_weights_equals_caption_loss() {
        let gt_labels = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let gt_tokens = vec![vec![0], vec![1]];
        let mut tape = Tape::new();
        let pred = tape.leaf(array![[0.8, 0.2], [0.3, 0.7]]);
        let (_, bd, _) = set_prediction_loss(
            &mut tape,
            &gt_labels,
            &gt_tokens,
            pred,
            |tape, sigma| {
                sigma
                    .iter()
                    .map(|&i| {
                        let t = gt_tokens[i].len();
                        let logits = tape.leaf(Array2::zeros((t, 3)));
                        tape.log_softmax_rows(logits)
                    })
                    .collect()
            },
            0.0,
            0.0,
            2.0,
            0.25,
        )
        .unwrap();
        assert_eq!(bd.l_sp, bd.l_cap);
    }
}
