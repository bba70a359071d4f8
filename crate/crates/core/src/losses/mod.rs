//! Preference losses: SFT, DPO, DPOP, IPO and SLiC, plus Bradley-Terry
//! utilities.
//!
//! Every loss is built on a [`Graph`] from the policy's sequence
//! log-probabilities, so gradients reach the policy parameters through the
//! model. The reference policy only ever contributes constants.

mod config;

pub use config::{LossConfig, LossKind};

use crate::autodiff::{Graph, NodeId};
use crate::dataforge::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{LMParams, ModelNodes, TokenSeq};

/// Reference-model sequence log-probabilities of a pair's two completions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

impl RefLogProbs {
    pub fn compute(reference: &LMParams, pair: &PreferencePair) -> Result<Self> {
        require_frozen(reference)?;
        Ok(Self {
            chosen: reference.completion_log_prob(&pair.prompt, &pair.chosen)?,
            rejected: reference.completion_log_prob(&pair.prompt, &pair.rejected)?,
        })
    }
}

/// Detached per-pair quantities reported alongside a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossDiagnostics {
    pub logp_w: f64,
    pub logp_l: f64,
    pub tokens_w: usize,
    pub tokens_l: usize,
    /// Zero when no reference log-probabilities were supplied.
    pub log_ratio_w: f64,
    pub log_ratio_l: f64,
    /// `λ·max(0, -log_ratio_w)`; zero for every loss except DPOP.
    pub penalty: f64,
    pub implicit_reward_w: f64,
    pub implicit_reward_l: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: NodeId,
    pub value: f64,
    pub diagnostics: LossDiagnostics,
}

fn require_frozen(reference: &LMParams) -> Result<()> {
    if !reference.is_frozen() {
        return Err(Error::Contract(
            "reference parameters must be a frozen snapshot".into(),
        ));
    }
    Ok(())
}

fn require_kind(cfg: &LossConfig, kind: LossKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "{kind} loss called with loss kind {}",
            cfg.kind
        )));
    }
    Ok(())
}

fn same_vocab(theta: &ModelNodes, reference: &LMParams) -> Result<()> {
    if theta.config().vocab_size != reference.config().vocab_size {
        return Err(Error::Config(format!(
            "policy vocabulary {} differs from reference vocabulary {}",
            theta.config().vocab_size,
            reference.config().vocab_size
        )));
    }
    Ok(())
}

/// `log π_θ(y|x) - log π_ref(y|x)` as a scalar node; only the policy term is differentiable.
pub fn log_ratio(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    reference: &LMParams,
    prompt: &TokenSeq,
    completion: &TokenSeq,
) -> Result<NodeId> {
    require_frozen(reference)?;
    same_vocab(theta, reference)?;
    let ref_lp = reference.completion_log_prob(prompt, completion)?;
    let lp = theta.completion_log_prob(g, prompt.tokens(), completion.tokens())?;
    g.add_const(lp, -ref_lp)
}

/// `β · log π_ratio(y|x)`, detached.
pub fn implicit_reward(
    theta: &LMParams,
    reference: &LMParams,
    prompt: &TokenSeq,
    completion: &TokenSeq,
    beta: f64,
) -> Result<f64> {
    require_frozen(reference)?;
    if theta.config().vocab_size != reference.config().vocab_size {
        return Err(Error::Config("policy and reference vocabularies differ".into()));
    }
    let lr = theta.completion_log_prob(prompt, completion)?
        - reference.completion_log_prob(prompt, completion)?;
    Ok(beta * lr)
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`, stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry probability that the first completion is preferred.
pub fn bt_preference_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Mean negative log-likelihood of the preferences under Bradley-Terry.
pub fn reward_nll(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("reward_nll needs at least one pair".into()));
    }
    let total: f64 = pairs.iter().map(|(w, l)| softplus(l - w)).sum();
    Ok(total / pairs.len() as f64)
}

/// `λ · max(0, -log_ratio_w)`.
pub fn dpop_penalty(g: &mut Graph<'_>, log_ratio_w: NodeId, lambda: f64) -> Result<NodeId> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let below = g.neg(log_ratio_w)?;
    let gap = g.max0(below)?;
    g.scale(gap, lambda)
}

/// `-log σ(β (lr_w - lr_l - λ·max(0, -lr_w)))`.
///
/// DPO is exactly this objective at `λ = 0`; both losses go through here.
/// Returns `(loss, penalty)` nodes.
pub fn dpop_objective(
    g: &mut Graph<'_>,
    log_ratio_w: NodeId,
    log_ratio_l: NodeId,
    beta: f64,
    lambda: f64,
) -> Result<(NodeId, NodeId)> {
    let margin = g.sub(log_ratio_w, log_ratio_l)?;
    let penalty = dpop_penalty(g, log_ratio_w, lambda)?;
    let inner = g.sub(margin, penalty)?;
    let z = g.scale(inner, beta)?;
    let ls = g.log_sigmoid(z)?;
    Ok((g.neg(ls)?, penalty))
}

struct PolicyTerms {
    lp_w: NodeId,
    lp_l: NodeId,
    diag: LossDiagnostics,
}

fn policy_terms(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    pair: &PreferencePair,
    reference: Option<RefLogProbs>,
    beta: f64,
) -> Result<PolicyTerms> {
    let lp_w = theta.completion_log_prob(g, pair.prompt.tokens(), pair.chosen.tokens())?;
    let lp_l = theta.completion_log_prob(g, pair.prompt.tokens(), pair.rejected.tokens())?;
    let (vw, vl) = (g.scalar(lp_w)?, g.scalar(lp_l)?);
    if !vw.is_finite() || !vl.is_finite() {
        return Err(Error::Numeric(format!("pair {}: non-finite log-probabilities", pair.id)));
    }
    let mut diag = LossDiagnostics {
        logp_w: vw,
        logp_l: vl,
        tokens_w: pair.chosen.len(),
        tokens_l: pair.rejected.len(),
        ..LossDiagnostics::default()
    };
    if let Some(r) = reference {
        diag.log_ratio_w = vw - r.chosen;
        diag.log_ratio_l = vl - r.rejected;
        diag.implicit_reward_w = beta * diag.log_ratio_w;
        diag.implicit_reward_l = beta * diag.log_ratio_l;
    }
    Ok(PolicyTerms { lp_w, lp_l, diag })
}

fn finish(g: &Graph<'_>, loss: NodeId, diagnostics: LossDiagnostics) -> Result<LossOutput> {
    let value = g.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(LossOutput {
        loss,
        value,
        diagnostics,
    })
}

/// Per-pair loss for any [`LossKind`].
///
/// DPO, DPOP and IPO require `reference`; SFT and SLiC ignore it apart from
/// filling the log-ratio diagnostics.
pub fn pair_loss(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    pair: &PreferencePair,
    reference: Option<RefLogProbs>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let needs_ref = || {
        reference.ok_or_else(|| {
            Error::Contract(format!("{} loss needs reference log-probabilities", cfg.kind))
        })
    };
    match cfg.kind {
        LossKind::Sft => {
            let lp_w = theta.completion_log_prob(g, pair.prompt.tokens(), pair.chosen.tokens())?;
            let vw = g.scalar(lp_w)?;
            let loss = g.scale(lp_w, -1.0 / pair.chosen.len() as f64)?;
            let mut diag = LossDiagnostics {
                logp_w: vw,
                tokens_w: pair.chosen.len(),
                ..LossDiagnostics::default()
            };
            if let Some(r) = reference {
                diag.log_ratio_w = vw - r.chosen;
                diag.implicit_reward_w = cfg.beta * diag.log_ratio_w;
                let vl = theta_value_rejected(theta, g, pair)?;
                diag.logp_l = vl;
                diag.tokens_l = pair.rejected.len();
                diag.log_ratio_l = vl - r.rejected;
                diag.implicit_reward_l = cfg.beta * diag.log_ratio_l;
            }
            finish(g, loss, diag)
        }
        LossKind::Dpo | LossKind::Dpop => {
            let r = needs_ref()?;
            let t = policy_terms(g, theta, pair, Some(r), cfg.beta)?;
            let lr_w = g.add_const(t.lp_w, -r.chosen)?;
            let lr_l = g.add_const(t.lp_l, -r.rejected)?;
            let lambda = if cfg.kind == LossKind::Dpop { cfg.lambda } else { 0.0 };
            let (loss, penalty) = dpop_objective(g, lr_w, lr_l, cfg.beta, lambda)?;
            let mut diag = t.diag;
            diag.penalty = g.scalar(penalty)?;
            finish(g, loss, diag)
        }
        LossKind::Ipo => {
            let r = needs_ref()?;
            let t = policy_terms(g, theta, pair, Some(r), cfg.beta)?;
            let lr_w = g.add_const(t.lp_w, -r.chosen)?;
            let lr_l = g.add_const(t.lp_l, -r.rejected)?;
            let gap = g.sub(lr_w, lr_l)?;
            let resid = g.add_const(gap, -1.0 / (2.0 * cfg.tau))?;
            let loss = g.mul(resid, resid)?;
            finish(g, loss, t.diag)
        }
        LossKind::Slic => {
            let t = policy_terms(g, theta, pair, reference, cfg.beta)?;
            // y_ref is the preferred completion.
            let gap = g.sub(t.lp_l, t.lp_w)?;
            let gap = g.add_const(gap, cfg.beta)?;
            let hinge = g.max0(gap)?;
            let reg = g.scale(t.lp_w, -cfg.slic_reg_weight)?;
            let loss = g.add(hinge, reg)?;
            finish(g, loss, t.diag)
        }
    }
}

fn theta_value_rejected(theta: &ModelNodes, g: &mut Graph<'_>, pair: &PreferencePair) -> Result<f64> {
    // Detached: computed on the graph but never connected to the loss.
    let lp = theta.completion_log_prob(g, pair.prompt.tokens(), pair.rejected.tokens())?;
    g.scalar(lp)
}

fn with_reference(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    reference: &LMParams,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    same_vocab(theta, reference)?;
    let r = RefLogProbs::compute(reference, pair)?;
    pair_loss(g, theta, pair, Some(r), cfg)
}

/// `-log σ(β (log π_ratio(y_w|x) - log π_ratio(y_l|x)))`.
pub fn dpo_loss(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    reference: &LMParams,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    require_kind(cfg, LossKind::Dpo)?;
    with_reference(g, theta, reference, pair, cfg)
}

/// DPO with the penalty `λ·max(0, log π_ref(y_w|x)/π_θ(y_w|x))` inside the sigmoid.
pub fn dpop_loss(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    reference: &LMParams,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    require_kind(cfg, LossKind::Dpop)?;
    with_reference(g, theta, reference, pair, cfg)
}

/// `(log π_ratio(y_w|x) - log π_ratio(y_l|x) - 1/(2τ))²`.
pub fn ipo_loss(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    reference: &LMParams,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    require_kind(cfg, LossKind::Ipo)?;
    with_reference(g, theta, reference, pair, cfg)
}

/// `max(0, β - log π_θ(y_w|x) + log π_θ(y_l|x)) - λ_slic · log π_θ(y_w|x)`.
pub fn slic_loss(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    require_kind(cfg, LossKind::Slic)?;
    pair_loss(g, theta, pair, None, cfg)
}

/// Mean per-token negative log-likelihood of the preferred completion.
pub fn sft_loss(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    require_kind(cfg, LossKind::Sft)?;
    pair_loss(g, theta, pair, None, cfg)
}

#[derive(Clone, Debug)]
pub struct BatchLossOutput {
    pub loss: NodeId,
    pub value: f64,
    /// Per-pair diagnostics in the order the pairs were summed (ascending id).
    pub per_pair: Vec<(u64, LossDiagnostics)>,
}

/// Arithmetic mean of per-pair losses.
///
/// Pairs are summed in ascending id order (stable for equal ids), so any
/// permutation of the batch yields the same value bit for bit.
pub fn batch_loss_with(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    batch: &[(&PreferencePair, Option<RefLogProbs>)],
    cfg: &LossConfig,
) -> Result<BatchLossOutput> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| batch[i].0.id);
    let mut total: Option<NodeId> = None;
    let mut per_pair = Vec::with_capacity(batch.len());
    for i in order {
        let (pair, r) = batch[i];
        let out = pair_loss(g, theta, pair, r, cfg)?;
        per_pair.push((pair.id, out.diagnostics));
        total = Some(match total {
            None => out.loss,
            Some(t) => g.add(t, out.loss)?,
        });
    }
    let loss = g.scale(total.expect("non-empty"), 1.0 / batch.len() as f64)?;
    let value = g.scalar(loss)?;
    Ok(BatchLossOutput {
        loss,
        value,
        per_pair,
    })
}

/// [`batch_loss_with`], computing reference log-probabilities from `reference`.
pub fn batch_loss(
    g: &mut Graph<'_>,
    theta: &ModelNodes,
    reference: &LMParams,
    batch: &[PreferencePair],
    cfg: &LossConfig,
) -> Result<BatchLossOutput> {
    same_vocab(theta, reference)?;
    let refs = batch
        .iter()
        .map(|p| Ok((p, Some(RefLogProbs::compute(reference, p)?))))
        .collect::<Result<Vec<_>>>()?;
    batch_loss_with(g, theta, &refs, cfg)
}
