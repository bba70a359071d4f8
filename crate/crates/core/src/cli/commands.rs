use std::fs;
use std::path::Path;

use super::artifacts;
use super::gradcheck::{run_suite, save_report_csv, summarize, SuiteOptions};
use super::ExperimentConfig;
use crate::dataforge::{dataset_stats, derive_seed, forge, read_jsonl, write_jsonl, PreferencePair};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{checkpoint, LMParams};
use crate::theory::{wrong_way_report, GradientMode, GradientReport};
use crate::trainer::{
    position_profile, run_ablation, run_preference_opt_with, run_sft_with, save_metrics_csv,
    write_ablation_csv,
};

fn create_out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join(artifacts::RESOLVED);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn check_dataset_path(cfg: &ExperimentConfig) -> Result<()> {
    match &cfg.data.path {
        Some(p) if !p.is_file() => Err(Error::Config(format!(
            "dataset {} does not exist; run `prefopt forge` first or unset data.path",
            p.display()
        ))),
        _ => Ok(()),
    }
}

/// The configured dataset: read from `data.path`, or generated and saved
/// into the output directory.
fn dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PreferencePair>> {
    match &cfg.data.path {
        Some(p) => read_jsonl(p),
        None => {
            let pairs = forge(&cfg.data)?;
            write_jsonl(&pairs, &dir.join(artifacts::DATASET))?;
            Ok(pairs)
        }
    }
}

fn print_plan(cfg: &ExperimentConfig, steps: &[String]) -> Result<()> {
    println!("# resolved configuration");
    print!("{}", cfg.to_toml()?);
    println!("# plan");
    for (i, s) in steps.iter().enumerate() {
        println!("{}. {s}", i + 1);
    }
    Ok(())
}

fn dataset_step(cfg: &ExperimentConfig) -> String {
    match &cfg.data.path {
        Some(p) => format!("read dataset {}", p.display()),
        None => format!(
            "forge {} {} pairs (seed {}) -> {}",
            cfg.data.generator,
            cfg.data.n_pairs,
            cfg.data.seed,
            artifacts::DATASET
        ),
    }
}

/// Fresh initialization from the training seed, or a saved checkpoint
/// whose shape must match the configured model.
fn initial_params(cfg: &ExperimentConfig, init: Option<&Path>) -> Result<LMParams> {
    match init {
        None => LMParams::init(&cfg.model, derive_seed(cfg.train.seed, 3)),
        Some(path) => {
            let p = checkpoint::load(path)?;
            if p.config() != &cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} has model {:?}, config asks for {:?}",
                    path.display(),
                    p.config(),
                    cfg.model
                )));
            }
            Ok(p)
        }
    }
}

/// SFT warm-up; the result is saved as the reference checkpoint.
fn warm_start(
    cfg: &ExperimentConfig,
    init: Option<&Path>,
    pairs: &[PreferencePair],
    dir: &Path,
) -> Result<LMParams> {
    let start = initial_params(cfg, init)?;
    let (sft, curve) = run_sft_with(&start, pairs, &cfg.train, Some(dir))?;
    if let Some(last) = curve.last() {
        println!("sft: {} steps, final minibatch loss {last:.4}", curve.len());
    }
    let reference = sft.snapshot_reference();
    checkpoint::save(&reference, dir.join(artifacts::REFERENCE))?;
    Ok(reference)
}

pub fn cmd_forge(cfg: &ExperimentConfig, dry_run: bool) -> Result<()> {
    if dry_run {
        return print_plan(
            cfg,
            &[
                dataset_step(cfg),
                format!(
                    "write {}, {} and {}",
                    artifacts::STATS,
                    artifacts::PAIR_STATS,
                    artifacts::RESOLVED
                ),
            ],
        );
    }
    let dir = create_out_dir(cfg)?;
    let pairs = forge(&cfg.data)?;
    write_jsonl(&pairs, &dir.join(artifacts::DATASET))?;
    let stats = dataset_stats(&pairs)?;
    stats.save_summary_csv(&dir.join(artifacts::STATS))?;
    stats.save_csv(&dir.join(artifacts::PAIR_STATS))?;
    write_resolved(cfg, dir)?;
    println!("pairs                     {}", stats.n_pairs);
    println!("mean_norm_edit_distance   {:.4}", stats.mean_norm_edit_distance);
    println!("median_norm_edit_distance {:.4}", stats.median_norm_edit_distance);
    println!("mean_completion_length    {:.2}", stats.mean_completion_length);
    println!("fraction_hamming1         {:.4}", stats.fraction_hamming1);
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig, init: Option<&Path>, dry_run: bool) -> Result<()> {
    check_dataset_path(cfg)?;
    if let Some(p) = init.filter(|p| !p.is_file()) {
        return Err(Error::Config(format!("init checkpoint {} does not exist", p.display())));
    }
    if dry_run {
        let t = &cfg.train;
        return print_plan(
            cfg,
            &[
                dataset_step(cfg),
                format!("sft {} steps -> {}", t.sft_steps, artifacts::REFERENCE),
                format!(
                    "{} {} steps, batch {}, eval every {} -> {}, {}",
                    t.loss.kind,
                    t.max_steps,
                    t.batch_size,
                    t.eval_every,
                    artifacts::METRICS,
                    artifacts::POLICY
                ),
                format!("position profiles -> {}", artifacts::PROFILE),
            ],
        );
    }
    let dir = create_out_dir(cfg)?;
    write_resolved(cfg, dir)?;
    let pairs = dataset(cfg, dir)?;
    let reference = warm_start(cfg, init, &pairs, dir)?;
    let run = run_preference_opt_with(&reference, &pairs, &cfg.train, Some(dir))?;
    save_metrics_csv(&run.metrics, &dir.join(artifacts::METRICS))?;
    checkpoint::save(&run.policy, dir.join(artifacts::POLICY))?;

    let (first, last) = (&run.metrics[0], &run.metrics[run.metrics.len() - 1]);
    println!("{:<22}{:>12}{:>12}", "", "step 0", format!("step {}", last.step));
    for (name, a, b) in [
        ("mean_chosen_logprob", first.mean_chosen_logprob, last.mean_chosen_logprob),
        ("mean_rejected_logprob", first.mean_rejected_logprob, last.mean_rejected_logprob),
        ("preference_accuracy", first.preference_accuracy, last.preference_accuracy),
        ("train_loss", first.train_loss, last.train_loss),
    ] {
        println!("{name:<22}{a:>12.4}{b:>12.4}");
    }

    if pairs.iter().all(|p| p.first_edit_index.is_some()) {
        let w = cfg.analyze.window;
        let policy = position_profile(&run.policy, &pairs, w)?;
        let base = position_profile(&reference, &pairs, w)?;
        policy.save_csv(&dir.join(artifacts::PROFILE))?;
        base.save_csv(&dir.join(artifacts::REFERENCE_PROFILE))?;
        print_profile_means(&policy.mean_over(1, w as i64), &base.mean_over(1, w as i64), w);
    }
    Ok(())
}

fn print_profile_means(policy: &Option<f64>, reference: &Option<f64>, w: usize) {
    let show = |v: &Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("after-edit mean +1..+{w}: policy {} reference {}", show(policy), show(reference));
}

/// What `analyze` found for one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeSummary {
    pub after_edit_mean: Option<f64>,
    pub reference_after_edit_mean: Option<f64>,
    /// The checkpoint's profile past the edit sits strictly below the
    /// reference's. `None` without a reference.
    pub after_edit_drop: Option<bool>,
    pub report: GradientReport,
}

/// Logit-gradient report under the configured loss. DPOP needs the
/// reference to gate each pair's penalty.
fn gradient_report(
    cfg: &ExperimentConfig,
    theta: &LMParams,
    reference: Option<&LMParams>,
    pairs: &[PreferencePair],
) -> Result<GradientReport> {
    let (LossKind::Dpop, Some(reference)) = (cfg.train.loss.kind, reference) else {
        return wrong_way_report(theta, pairs, GradientMode::Dpo);
    };
    let mut out = GradientReport::default();
    for pair in pairs {
        let lp = theta.completion_log_prob(&pair.prompt, &pair.chosen)?;
        let lp_ref = reference.completion_log_prob(&pair.prompt, &pair.chosen)?;
        let mode = GradientMode::Dpop {
            lambda: cfg.train.loss.lambda,
            ratio_below_one: lp < lp_ref,
        };
        let r = wrong_way_report(theta, std::slice::from_ref(pair), mode)?;
        out.rows.extend(r.rows);
        out.max_autodiff_deviation = match (out.max_autodiff_deviation, r.max_autodiff_deviation) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
    Ok(out)
}

pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    reference: Option<&Path>,
    dry_run: bool,
) -> Result<AnalyzeSummary> {
    check_dataset_path(cfg)?;
    for p in std::iter::once(ckpt).chain(reference) {
        if !p.is_file() {
            return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let w = cfg.analyze.window;
    if dry_run {
        print_plan(
            cfg,
            &[
                dataset_step(cfg),
                format!("profile of {} over ±{w} -> {}", ckpt.display(), artifacts::PROFILE),
                format!("logit-gradient report -> {}", artifacts::REPORT),
            ],
        )?;
        return Ok(AnalyzeSummary {
            after_edit_mean: None,
            reference_after_edit_mean: None,
            after_edit_drop: None,
            report: GradientReport::default(),
        });
    }
    let theta = checkpoint::load(ckpt)?;
    let base = reference.map(checkpoint::load).transpose()?;
    let dir = create_out_dir(cfg)?;
    write_resolved(cfg, dir)?;
    let pairs = dataset(cfg, dir)?;

    let profile = position_profile(&theta, &pairs, w)?;
    profile.save_csv(&dir.join(artifacts::PROFILE))?;
    let after_edit_mean = profile.mean_over(1, w as i64);
    let mut reference_after_edit_mean = None;
    if let Some(b) = &base {
        let p = position_profile(b, &pairs, w)?;
        p.save_csv(&dir.join(artifacts::REFERENCE_PROFILE))?;
        reference_after_edit_mean = p.mean_over(1, w as i64);
    }
    let after_edit_drop = match (after_edit_mean, reference_after_edit_mean) {
        (Some(a), Some(r)) => Some(a < r),
        _ => None,
    };

    let report = gradient_report(cfg, &theta, base.as_ref(), &pairs)?;
    report.save_csv(&dir.join(artifacts::REPORT))?;

    print_profile_means(&after_edit_mean, &reference_after_edit_mean, w);
    if let Some(drop) = after_edit_drop {
        println!("after_edit_drop: {drop}");
    }
    println!(
        "positions past the edit: {}, assumption holds: {}, wrong-way fraction: {}",
        report.rows.len(),
        report.n_assumption_holds(),
        report
            .wrong_way_fraction()
            .map_or("n/a".to_string(), |f| format!("{f:.4}"))
    );
    Ok(AnalyzeSummary {
        after_edit_mean,
        reference_after_edit_mean,
        after_edit_drop,
        report,
    })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, sign_flip: bool, dry_run: bool) -> Result<()> {
    let opts = SuiteOptions {
        seed: cfg.train.seed,
        sign_flip,
        ..SuiteOptions::default()
    };
    if dry_run {
        return print_plan(
            cfg,
            &[
                format!("finite differences, all losses, {} pairs", opts.loss_pairs),
                format!("closed-form logit gradients, {} pairs", opts.logit_pairs),
                format!("penalty sign check, {} row pairs", opts.sign_rows),
                format!("zero-λ equivalence, {} pairs -> {}", opts.logit_pairs, artifacts::REPORT),
            ],
        );
    }
    let rows = run_suite(&opts)?;
    let dir = create_out_dir(cfg)?;
    save_report_csv(&rows, &dir.join(artifacts::REPORT))?;

    println!(
        "{:<22}{:>7}{:>8}{:>14}{:>11}  status",
        "check", "n", "passed", "worst", "tolerance"
    );
    for s in summarize(&rows) {
        println!(
            "{:<22}{:>7}{:>8}{:>14.3e}{:>11.0e}  {}",
            s.check,
            s.n,
            s.n_passed,
            s.worst,
            s.tolerance,
            if s.n_passed == s.n { "ok" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::ChecksFailed {
            failed,
            total: rows.len(),
        });
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &ExperimentConfig, init: Option<&Path>, dry_run: bool) -> Result<()> {
    check_dataset_path(cfg)?;
    if cfg.ablate.betas.is_empty() && cfg.ablate.lambdas.is_empty() {
        return Err(Error::Config(
            "ablate needs [ablate] betas or lambdas in the config".into(),
        ));
    }
    if dry_run {
        return print_plan(
            cfg,
            &[
                dataset_step(cfg),
                format!("sft {} steps -> {}", cfg.train.sft_steps, artifacts::REFERENCE),
                format!(
                    "{} runs of {} steps over betas {:?} x lambdas {:?} -> {}",
                    cfg.ablate.betas.len().max(1) * cfg.ablate.lambdas.len().max(1),
                    cfg.train.max_steps,
                    cfg.ablate.betas,
                    cfg.ablate.lambdas,
                    artifacts::ABLATION
                ),
            ],
        );
    }
    let dir = create_out_dir(cfg)?;
    write_resolved(cfg, dir)?;
    let pairs = dataset(cfg, dir)?;
    let reference = warm_start(cfg, init, &pairs, dir)?;
    let cells = run_ablation(&reference, &pairs, &cfg.ablate, &cfg.train)?;
    let path = dir.join(artifacts::ABLATION);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_ablation_csv(&cells, std::io::BufWriter::new(file))?;
    println!("{:>8}{:>10}{:>22}{:>12}", "beta", "lambda", "mean_chosen_logprob", "accuracy");
    for c in &cells {
        let last = &c.metrics[c.metrics.len() - 1];
        println!(
            "{:>8}{:>10}{:>22.4}{:>12.4}",
            c.beta, c.lambda, last.mean_chosen_logprob, last.preference_accuracy
        );
    }
    Ok(())
}
