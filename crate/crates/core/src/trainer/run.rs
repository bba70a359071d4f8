use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamState};
use super::eval::{probe_metrics, MetricsRecord};
use super::TrainConfig;
use crate::autodiff::Graph;
use crate::dataforge::{derive_seed, PreferencePair};
use crate::error::{Error, Result};
use crate::losses::{batch_loss_with, LossConfig, LossKind, RefLogProbs};
use crate::model::{checkpoint, LMParams, ModelNodes};

/// Name of the checkpoint written when a run diverges.
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

/// Endless stream of dataset indices, reshuffled at every epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Indices of the fixed evaluation sample, ascending.
pub fn probe_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    if n <= size {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    idx
}

/// Loss, backward and one optimizer update. Returns the loss and the
/// gradient norm before clipping.
fn train_step(
    policy: &mut LMParams,
    state: &mut AdamState,
    batch: &[(&PreferencePair, Option<RefLogProbs>)],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (value, mut grads) = {
        let mut g = Graph::new();
        let nodes = ModelNodes::bind(policy, &mut g)?;
        let out = batch_loss_with(&mut g, &nodes, batch, loss_cfg)?;
        let grads = g.backward(out.loss)?;
        (out.value, nodes.collect_grads(&g, &grads))
    };
    if !value.is_finite() {
        return Err(Error::Diverged {
            step: state.step + 1,
            reason: format!("loss is {value}"),
            last_good: None,
        });
    }
    let norm = grads.norm();
    if let Some(c) = cfg.grad_clip {
        if norm > c {
            grads.scale(c / norm);
        }
    }
    adamw_step(policy, &grads, state, cfg)?;
    Ok((value, norm))
}

/// Turns a numeric failure into `Diverged`, saving the pre-step parameters.
fn on_failure(err: Error, step: usize, last_good: &LMParams, dir: Option<&Path>) -> Error {
    let reason = match err {
        Error::Diverged { reason, .. } => reason,
        Error::NonFinite { node, op } => format!("non-finite value at node {node} ({op})"),
        other => return other,
    };
    let saved: Option<PathBuf> = dir.and_then(|d| {
        let path = d.join(LAST_GOOD_CHECKPOINT);
        checkpoint::save(last_good, &path).ok().map(|_| path)
    });
    Error::Diverged {
        step,
        reason,
        last_good: saved,
    }
}

/// Supervised warm-up on the chosen completions. Returns the trained
/// parameters and the minibatch loss (mean per-token NLL) of every step.
pub fn run_sft(
    params: &LMParams,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<(LMParams, Vec<f64>)> {
    run_sft_with(params, pairs, cfg, None)
}

pub fn run_sft_with(
    params: &LMParams,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(LMParams, Vec<f64>)> {
    cfg.validate()?;
    let mut policy = params.thawed();
    if cfg.sft_steps == 0 {
        return Ok((policy, Vec::new()));
    }
    if pairs.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let loss_cfg = LossConfig {
        kind: LossKind::Sft,
        ..cfg.loss.clone()
    };
    let mut sampler = EpochSampler::new(pairs.len(), derive_seed(cfg.seed, 0));
    let mut state = AdamState::new(&policy);
    let mut curve = Vec::with_capacity(cfg.sft_steps);
    for step in 1..=cfg.sft_steps {
        let batch: Vec<_> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| (&pairs[i], None))
            .collect();
        let before = policy.clone();
        match train_step(&mut policy, &mut state, &batch, &loss_cfg, cfg) {
            Ok((loss, _)) => curve.push(loss),
            Err(e) => return Err(on_failure(e, step, &before, checkpoint_dir)),
        }
    }
    Ok((policy, curve))
}

/// Outcome of a preference-optimization run.
#[derive(Clone, Debug)]
pub struct PreferenceRun {
    pub policy: LMParams,
    pub reference: LMParams,
    pub metrics: Vec<MetricsRecord>,
}

/// Preference optimization from `params`, which are also snapshotted as the
/// frozen reference. Metrics are taken on a fixed probe sample at step 0,
/// every `eval_every` steps, and at the last step.
pub fn run_preference_opt(
    params: &LMParams,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<PreferenceRun> {
    run_preference_opt_with(params, pairs, cfg, None)
}

pub fn run_preference_opt_with(
    params: &LMParams,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PreferenceRun> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let reference = params.snapshot_reference();
    let mut policy = params.thawed();
    let refs = pairs
        .iter()
        .map(|p| RefLogProbs::compute(&reference, p))
        .collect::<Result<Vec<_>>>()?;
    let probe: Vec<(&PreferencePair, RefLogProbs)> =
        probe_indices(pairs.len(), cfg.probe_size, derive_seed(cfg.seed, 1))
            .into_iter()
            .map(|i| (&pairs[i], refs[i]))
            .collect();

    let mut metrics = vec![probe_metrics(&policy, &probe, &cfg.loss, 0, 0.0)?];
    let mut sampler = EpochSampler::new(pairs.len(), derive_seed(cfg.seed, 2));
    let mut state = AdamState::new(&policy);
    for step in 1..=cfg.max_steps {
        let batch: Vec<_> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| (&pairs[i], Some(refs[i])))
            .collect();
        let before = policy.clone();
        let norm = match train_step(&mut policy, &mut state, &batch, &cfg.loss, cfg) {
            Ok((_, norm)) => norm,
            Err(e) => return Err(on_failure(e, step, &before, checkpoint_dir)),
        };
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let rec = probe_metrics(&policy, &probe, &cfg.loss, step, norm)
                .map_err(|e| on_failure(e, step, &before, checkpoint_dir))?;
            metrics.push(rec);
        }
    }
    Ok(PreferenceRun {
        policy,
        reference,
        metrics,
    })
}

/// β and λ values to sweep. An empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub beta: f64,
    pub lambda: f64,
    pub metrics: Vec<MetricsRecord>,
}

/// One preference run per (β, λ) cell, all from the same starting point and
/// data.
pub fn run_ablation(
    params: &LMParams,
    pairs: &[PreferencePair],
    grid: &AblationGrid,
    base: &TrainConfig,
) -> Result<Vec<AblationCell>> {
    if grid.betas.is_empty() && grid.lambdas.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let betas = if grid.betas.is_empty() {
        vec![base.loss.beta]
    } else {
        grid.betas.clone()
    };
    let lambdas = if grid.lambdas.is_empty() {
        vec![base.loss.lambda]
    } else {
        grid.lambdas.clone()
    };
    let mut cells = Vec::with_capacity(betas.len() * lambdas.len());
    for &beta in &betas {
        for &lambda in &lambdas {
            let cfg = TrainConfig {
                loss: base.loss.clone().with_beta(beta).with_lambda(lambda),
                ..base.clone()
            };
            let run = run_preference_opt(params, pairs, &cfg)?;
            cells.push(AblationCell {
                beta,
                lambda,
                metrics: run.metrics,
            });
        }
    }
    Ok(cells)
}

pub fn write_ablation_csv<W: Write>(cells: &[AblationCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "beta",
        "lambda",
        "step",
        "train_loss",
        "mean_chosen_logprob",
        "mean_rejected_logprob",
        "mean_log_ratio_w",
        "mean_log_ratio_l",
        "preference_accuracy",
        "mean_penalty",
        "grad_norm",
    ])?;
    for c in cells {
        for r in &c.metrics {
            w.serialize((
                c.beta,
                c.lambda,
                r.step,
                r.train_loss,
                r.mean_chosen_logprob,
                r.mean_rejected_logprob,
                r.mean_log_ratio_w,
                r.mean_log_ratio_l,
                r.preference_accuracy,
                r.mean_penalty,
                r.grad_norm,
            ))?;
        }
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}
