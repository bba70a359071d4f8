//! Closed-form logit gradients of the DPO and DPOP inner terms.
//!
//! All gradients here are of the bracket inside the loss, so a positive
//! entry means gradient *ascent* on that objective raises the logit.
//! The functions work on bare softmax rows and are independent of the
//! model; [`verify_eq2_against_autodiff`] ties them back to the network.

mod report;

pub use report::{wrong_way_report, GradientMode, GradientReport, PositionGrad};

use crate::autodiff::{Graph, Tensor};
use crate::dataforge::{first_difference, PreferencePair};
use crate::error::{Error, Result};
use crate::model::{LMParams, ModelNodes};

const NORM_TOL: f64 = 1e-12;
const SLACK: f64 = 1e-12;

/// Next-token distributions under the preferred and dispreferred contexts
/// at one position, plus the index of the shared target token.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxRowPair {
    pub s_w: Vec<f64>,
    pub s_l: Vec<f64>,
    pub target_index: usize,
}

impl SoftmaxRowPair {
    pub fn new(s_w: Vec<f64>, s_l: Vec<f64>, target_index: usize) -> Result<Self> {
        let rows = Self {
            s_w,
            s_l,
            target_index,
        };
        rows.validate()?;
        Ok(rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_w.len() != self.s_l.len() || self.s_w.is_empty() {
            return Err(Error::Contract(format!(
                "softmax rows have lengths {} and {}",
                self.s_w.len(),
                self.s_l.len()
            )));
        }
        if self.target_index >= self.s_w.len() {
            return Err(Error::Contract(format!(
                "target index {} out of range for {} logits",
                self.target_index,
                self.s_w.len()
            )));
        }
        for (name, row) in [("s_w", &self.s_w), ("s_l", &self.s_l)] {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::Contract(format!("{name} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > NORM_TOL {
                return Err(Error::Contract(format!("{name} sums to {total}, not 1")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.s_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_w.is_empty()
    }
}

/// Gradient of `log π(y_w|x) − log π(y_l|x)` with respect to the position's
/// logits, for a position past the edit where both completions share the
/// target token: `s_l − s_w`.
pub fn dpo_logit_grad(rows: &SoftmaxRowPair) -> Result<Vec<f64>> {
    rows.validate()?;
    Ok(rows.s_l.iter().zip(&rows.s_w).map(|(l, w)| l - w).collect())
}

/// Logit gradient of the DPOP bracket.
///
/// With the preferred ratio below one the penalty is active and adds
/// `λ(e_i − s_w)`; otherwise this is exactly [`dpo_logit_grad`].
pub fn dpop_logit_grad(rows: &SoftmaxRowPair, lambda: f64, ratio_below_one: bool) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Contract(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let mut grad = dpo_logit_grad(rows)?;
    if ratio_below_one {
        for (j, (g, w)) in grad.iter_mut().zip(&rows.s_w).enumerate() {
            if j == rows.target_index {
                *g += lambda * (1.0 - w);
            } else {
                *g -= lambda * w;
            }
        }
    }
    Ok(grad)
}

/// Whether the position looks "well optimised": the target is at least as
/// likely after the correct prefix and every other token at most as likely.
pub fn check_sft_assumption(rows: &SoftmaxRowPair) -> Result<bool> {
    rows.validate()?;
    let i = rows.target_index;
    let target_ok = rows.s_w[i] >= rows.s_l[i] - SLACK;
    let rest_ok = (0..rows.len())
        .filter(|&j| j != i)
        .all(|j| rows.s_w[j] <= rows.s_l[j] + SLACK);
    Ok(target_ok && rest_ok)
}

/// `max_j s_l[j] / s_w[j]`. Any λ strictly above it fixes the DPOP signs:
/// positive at the target, negative everywhere else.
pub fn dpop_sign_threshold(rows: &SoftmaxRowPair) -> Result<f64> {
    rows.validate()?;
    if rows.s_w.iter().any(|&w| w <= 0.0) {
        return Err(Error::Contract("s_w must be strictly positive".into()));
    }
    Ok(rows
        .s_l
        .iter()
        .zip(&rows.s_w)
        .map(|(l, w)| l / w)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Softmax rows of `params` at every completion position of both sides of a
/// pair, aligned on the completion index.
pub fn completion_rows(params: &LMParams, pair: &PreferencePair) -> Result<(Tensor, Tensor)> {
    let side = |completion: &[u32]| -> Result<Tensor> {
        let mut g = Graph::new();
        let m = ModelNodes::bind_constant(params, &mut g)?;
        let input = model_input(pair.prompt.tokens(), completion);
        let logits = m.forward_logits(&mut g, &input)?;
        let lsm = g.log_softmax_rows(logits)?;
        let (rows, cols) = g.value(lsm).as_matrix_dims()?;
        let start = pair.prompt.len() - 1;
        let data: Vec<f64> = g.value(lsm).data()[start * cols..]
            .iter()
            .map(|v| v.exp())
            .collect();
        Tensor::matrix(rows - start, cols, data)
    };
    Ok((side(pair.chosen.tokens())?, side(pair.rejected.tokens())?))
}

fn model_input(prompt: &[u32], completion: &[u32]) -> Vec<u32> {
    let mut input = prompt.to_vec();
    input.extend_from_slice(&completion[..completion.len() - 1]);
    input
}

fn hamming_one_edit(pair: &PreferencePair) -> Result<usize> {
    let (c, r) = (pair.chosen.tokens(), pair.rejected.tokens());
    let diffs = c.iter().zip(r).filter(|(a, b)| a != b).count();
    if c.len() != r.len() || diffs != 1 {
        return Err(Error::Contract(format!(
            "pair {} is not a single-token substitution",
            pair.id
        )));
    }
    first_difference(&pair.chosen, &pair.rejected)
        .ok_or_else(|| Error::Contract(format!("pair {} has identical completions", pair.id)))
}

/// Backward pass of `log π(y_w|x) − log π(y_l|x)` into a logit offset shared
/// by both contexts; returns the offset gradient per completion position,
/// shaped `[K, vocab]`.
pub fn autodiff_logit_grads(theta: &LMParams, pair: &PreferencePair) -> Result<Tensor> {
    let vocab = theta.config().vocab_size;
    let k_len = pair.chosen.len();
    let start = pair.prompt.len() - 1;
    let mut g = Graph::new();
    let m = ModelNodes::bind_constant(theta, &mut g)?;
    let offset = g.leaf(Tensor::zeros(&[start + k_len, vocab]), true)?;
    let mut side = |completion: &[u32]| -> Result<_> {
        let input = model_input(pair.prompt.tokens(), completion);
        let logits = m.forward_logits(&mut g, &input)?;
        let shifted = g.add(logits, offset)?;
        let lsm = g.log_softmax_rows(shifted)?;
        let idx: Vec<(usize, usize)> = completion
            .iter()
            .enumerate()
            .map(|(k, &t)| (start + k, t as usize))
            .collect();
        let picked = g.gather(lsm, &idx)?;
        g.sum(picked)
    };
    let lw = side(pair.chosen.tokens())?;
    let ll = side(pair.rejected.tokens())?;
    let inner = g.sub(lw, ll)?;
    let grads = g.backward(inner)?;
    let full = grads.get_or_zeros(offset, g.value(offset));
    let data = full.data()[start * vocab..].to_vec();
    Tensor::matrix(k_len, vocab, data)
}

/// Compares the autodiff logit gradient at completion position `k` with
/// [`dpo_logit_grad`] built from the model's own softmax rows.
///
/// Requires a single-token substitution at `m` and `k != m`. Before the edit
/// both sides are the same computation and the gradient is exactly zero.
pub fn verify_eq2_against_autodiff(theta: &LMParams, pair: &PreferencePair, k: usize) -> Result<f64> {
    let m = hamming_one_edit(pair)?;
    if k == m || k >= pair.chosen.len() {
        return Err(Error::Contract(format!(
            "position {k} must differ from the edit {m} and lie inside the completion"
        )));
    }
    let auto = autodiff_logit_grads(theta, pair)?;
    let analytic = if k < m {
        vec![0.0; theta.config().vocab_size]
    } else {
        let (sw, sl) = completion_rows(theta, pair)?;
        let rows = SoftmaxRowPair::new(
            sw.row(k).to_vec(),
            sl.row(k).to_vec(),
            pair.chosen.tokens()[k] as usize,
        )?;
        dpo_logit_grad(&rows)?
    };
    Ok(auto
        .row(k)
        .iter()
        .zip(&analytic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Largest autodiff-vs-analytic deviation over every position past the edit.
pub fn max_logit_grad_deviation(theta: &LMParams, pair: &PreferencePair) -> Result<f64> {
    let m = hamming_one_edit(pair)?;
    let auto = autodiff_logit_grads(theta, pair)?;
    let (sw, sl) = completion_rows(theta, pair)?;
    let mut worst: f64 = 0.0;
    for k in m + 1..pair.chosen.len() {
        let rows = SoftmaxRowPair::new(
            sw.row(k).to_vec(),
            sl.row(k).to_vec(),
            pair.chosen.tokens()[k] as usize,
        )?;
        for (a, b) in auto.row(k).iter().zip(dpo_logit_grad(&rows)?) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}
