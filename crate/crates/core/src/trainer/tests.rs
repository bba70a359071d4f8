use super::*;
use crate::dataforge::{forge, Alphabet, DataConfig, PairMeta, PreferencePair};
use crate::error::Error;
use crate::losses::{LossConfig, LossKind};
use crate::model::{checkpoint, LMConfig, LMParams, TokenSeq};

fn tiny() -> LMConfig {
    LMConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 64,
        ..LMConfig::default()
    }
}

fn data(n: usize) -> Vec<PreferencePair> {
    forge(&DataConfig {
        n_pairs: n,
        ..DataConfig::default()
    })
    .unwrap()
}

fn quick(kind: LossKind) -> TrainConfig {
    TrainConfig {
        loss: LossConfig::new(kind),
        learning_rate: 3e-3,
        batch_size: 4,
        max_steps: 6,
        eval_every: 4,
        sft_steps: 5,
        probe_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn sft_without_steps_returns_the_input() {
    let p = LMParams::init(&tiny(), 0).unwrap();
    let cfg = TrainConfig {
        sft_steps: 0,
        ..TrainConfig::default()
    };
    let (out, curve) = run_sft(&p, &data(3), &cfg).unwrap();
    assert_eq!(out, p);
    assert!(curve.is_empty());
}

#[test]
fn sft_learns_and_is_deterministic() {
    let p = LMParams::init(&tiny(), 0).unwrap();
    let pairs = data(16);
    let cfg = TrainConfig {
        sft_steps: 30,
        ..quick(LossKind::Sft)
    };
    let (a, curve) = run_sft(&p, &pairs, &cfg).unwrap();
    let (b, _) = run_sft(&p, &pairs, &cfg).unwrap();
    assert_eq!(checkpoint::to_bytes(&a).unwrap(), checkpoint::to_bytes(&b).unwrap());
    assert_eq!(curve.len(), 30);
    let before = mean_chosen_logprob(&p, &pairs, true).unwrap();
    let after = mean_chosen_logprob(&a, &pairs, true).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn step_zero_has_zero_log_ratios_and_schedule_is_regular() {
    let p = LMParams::init(&tiny(), 1).unwrap();
    let run = run_preference_opt(&p, &data(10), &quick(LossKind::Dpo)).unwrap();
    let steps: Vec<usize> = run.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 4, 6]);
    let first = &run.metrics[0];
    assert_eq!(first.mean_log_ratio_w, 0.0);
    assert_eq!(first.mean_log_ratio_l, 0.0);
    assert_eq!(first.grad_norm, 0.0);
    assert!((first.train_loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(run.metrics[1].grad_norm > 0.0);
}

#[test]
fn zero_lambda_dpop_run_matches_dpo_run() {
    let p = LMParams::init(&tiny(), 2).unwrap();
    let pairs = data(12);
    let dpo = run_preference_opt(&p, &pairs, &quick(LossKind::Dpo)).unwrap();
    let mut cfg = quick(LossKind::Dpop);
    cfg.loss.lambda = 0.0;
    let dpop = run_preference_opt(&p, &pairs, &cfg).unwrap();
    assert_eq!(dpo.metrics, dpop.metrics);
    assert_eq!(dpo.policy, dpop.policy);
}

#[test]
fn every_loss_trains_without_error() {
    let p = LMParams::init(&tiny(), 3).unwrap();
    let pairs = data(8);
    for kind in LossKind::ALL {
        let run = run_preference_opt(&p, &pairs, &quick(kind)).unwrap();
        assert_eq!(run.metrics.len(), 3, "{kind}");
        let penalty_seen = run.metrics.iter().any(|r| r.mean_penalty > 0.0);
        if kind != LossKind::Dpop {
            assert!(!penalty_seen, "{kind}");
        }
    }
}

#[test]
fn reference_is_untouched_by_training() {
    let p = LMParams::init(&tiny(), 4).unwrap();
    let before = checkpoint::to_bytes(&p.snapshot_reference()).unwrap();
    let run = run_preference_opt(&p, &data(8), &quick(LossKind::Dpop)).unwrap();
    assert_eq!(checkpoint::to_bytes(&run.reference).unwrap(), before);
    assert_ne!(run.policy, p);
}

#[test]
fn divergence_saves_last_good_parameters() {
    let mut p = LMParams::init(&tiny(), 5).unwrap();
    p.tensors_mut().unwrap()[0].data_mut()[1] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = run_sft_with(&p, &data(4), &quick(LossKind::Sft), Some(dir.path())).unwrap_err();
    match err {
        Error::Diverged {
            step,
            last_good: Some(path),
            ..
        } => {
            assert_eq!(step, 1);
            assert!(path.ends_with(LAST_GOOD_CHECKPOINT));
            assert!(path.exists());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn probe_sample_is_seeded_and_sorted() {
    let a = probe_indices(1000, 900, 7);
    assert_eq!(a, probe_indices(1000, 900, 7));
    assert_eq!(a.len(), 900);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_ne!(a, probe_indices(1000, 900, 8));
    assert_eq!(probe_indices(5, 900, 0), vec![0, 1, 2, 3, 4]);
}

#[test]
fn uniform_model_accuracy_and_logprob() {
    let config = LMConfig {
        vocab_size: 16,
        ..tiny()
    };
    let zero = LMParams::zeros(&config).unwrap();
    let pair = |id, c: Vec<u32>, r: Vec<u32>| {
        PreferencePair::new(id, TokenSeq(vec![0, 3]), TokenSeq(c), TokenSeq(r), None, PairMeta::default())
            .unwrap()
    };
    let pairs = vec![pair(0, vec![1, 2, 3], vec![1, 5, 3]), pair(1, vec![4, 4], vec![9, 4])];
    assert_eq!(eval_preference_accuracy(&zero, &pairs).unwrap(), 0.5);
    let lp = mean_chosen_logprob(&zero, &pairs, true).unwrap();
    assert!((lp + 16f64.ln()).abs() < 1e-12);
    let seq = mean_chosen_logprob(&zero, &pairs, false).unwrap();
    assert!((seq + 2.5 * 16f64.ln()).abs() < 1e-12);
    assert!(eval_preference_accuracy(&zero, &[]).is_err());
}

#[test]
fn accuracy_matches_a_recount() {
    let p = LMParams::init(&tiny(), 6).unwrap();
    let pairs = data(40);
    let mut wins = 0.0;
    for q in &pairs {
        let w = p.completion_log_prob(&q.prompt, &q.chosen).unwrap();
        let l = p.completion_log_prob(&q.prompt, &q.rejected).unwrap();
        wins += if w > l { 1.0 } else if w == l { 0.5 } else { 0.0 };
    }
    assert_eq!(eval_preference_accuracy(&p, &pairs).unwrap(), wins / 40.0);
}

#[test]
fn profile_is_anchored_and_validated() {
    let p = LMParams::init(&tiny(), 7).unwrap();
    let pairs = data(20);
    let prof = position_profile(&p, &pairs, 5).unwrap();
    assert_eq!(prof.value_at(-1), Some(0.0));
    assert!(prof.entries.iter().all(|e| (-5..=5).contains(&e.offset)));
    assert!(prof.entries.iter().all(|e| e.n_pairs == 20));

    let mut buf = Vec::new();
    prof.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("offset,mean_logprob_diff,n_pairs\n"));
    assert!(text.contains("\n-1,0.0,20\n"));

    assert!(position_profile(&p, &pairs, 0).is_err());
    let no_edit = PreferencePair::new(
        0,
        Alphabet::encode_prompt("Q").unwrap(),
        Alphabet::encode("12").unwrap(),
        Alphabet::encode("13").unwrap(),
        None,
        PairMeta::default(),
    )
    .unwrap();
    let msg = position_profile(&p, &[no_edit], 3).unwrap_err().to_string();
    assert!(msg.contains("calc_chain"), "{msg}");
}

#[test]
fn profile_omits_uncovered_offsets() {
    let p = LMParams::init(&tiny(), 7).unwrap();
    let pair = PreferencePair::new(
        0,
        Alphabet::encode_prompt("Q").unwrap(),
        Alphabet::encode("123").unwrap(),
        Alphabet::encode("193").unwrap(),
        Some(1),
        PairMeta::default(),
    )
    .unwrap();
    let prof = position_profile(&p, &[pair], 4).unwrap();
    let offsets: Vec<i64> = prof.entries.iter().map(|e| e.offset).collect();
    assert_eq!(offsets, vec![-1, 0, 1]);
}

#[test]
fn ablation_grid_runs_each_cell() {
    let p = LMParams::init(&tiny(), 8).unwrap();
    let pairs = data(8);
    let base = quick(LossKind::Dpop);
    assert!(run_ablation(&p, &pairs, &AblationGrid::default(), &base).is_err());
    let grid = AblationGrid {
        betas: vec![],
        lambdas: vec![5.0, 50.0],
    };
    let cells = run_ablation(&p, &pairs, &grid, &base).unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!((cells[0].beta, cells[0].lambda), (0.3, 5.0));
    let mut buf = Vec::new();
    write_ablation_csv(&cells, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(text.starts_with("beta,lambda,step,train_loss,"));
}

#[test]
fn metrics_csv_columns() {
    let rec = MetricsRecord {
        step: 0,
        train_loss: 0.5,
        mean_chosen_logprob: -1.0,
        mean_rejected_logprob: -2.0,
        mean_log_ratio_w: 0.0,
        mean_log_ratio_l: 0.0,
        preference_accuracy: 1.0,
        mean_penalty: 0.0,
        grad_norm: 0.0,
    };
    let mut buf = Vec::new();
    write_metrics_csv(&[rec], &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "step,train_loss,mean_chosen_logprob,mean_rejected_logprob,mean_log_ratio_w,\
         mean_log_ratio_l,preference_accuracy,mean_penalty,grad_norm\n\
         0,0.5,-1.0,-2.0,0.0,0.0,1.0,0.0,0.0\n"
    );
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}
