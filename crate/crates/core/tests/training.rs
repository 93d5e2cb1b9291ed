mod common;

use common::{clip_at, features};
use gad_core::assignment::GroupTarget;
use gad_core::model::{ClipInput, GroupingTransformer, ModelConfig, ModelOutput};
use gad_core::numerics::{grad_check, Tape, Tensor};
use gad_core::synth::{generate, SynthSpec};
use gad_core::training::{
    clip_loss, consistency_loss, group_loss, group_targets, individual_action_loss, learning_rate, loss_curve_csv,
    match_groups, membership_loss, train, LossBreakdown, LossConfig, TrainConfig,
};
use proptest::prelude::*;

fn small_config(k: usize, layers: usize, frames: usize, actor_in: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        k_tokens: k,
        layers,
        heads: 2,
        num_classes: 3,
        frames,
        actor_in,
        ..ModelConfig::default()
    }
}

#[test]
fn group_loss_closed_forms() {
    assert!((group_loss(3, &[0.0; 7]) - 7f64.ln()).abs() < 1e-12);
    assert!((group_loss(0, &[0.4; 7]) - 7f64.ln()).abs() < 1e-12);
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 50.0] {
        let l = group_loss(2, &[0.0, 0.0, margin, 0.0]);
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-20);
}

#[test]
fn membership_loss_closed_forms() {
    assert!((membership_loss(&[1.0, 0.0, 1.0], &[0.5; 3]) - 2f64.ln()).abs() < 1e-12);
    assert!((membership_loss(&[0.0, 0.0], &[0.5; 2]) - 2f64.ln()).abs() < 1e-12);
    let l = membership_loss(&[1.0, 0.0], &[0.9, 0.1]);
    assert!((l + 0.9f64.ln()).abs() < 1e-12);
    assert!((l - 0.1054).abs() < 1e-4);
    assert!(membership_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-11);
}

#[test]
fn consistency_loss_closed_forms() {
    // group {0, 1}, outlier 2, identical embeddings: each member sees one
    // group mate out of two others
    let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    let l = consistency_loss(&same, &[vec![0, 1]], 0.2);
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-9);

    let orth = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let l = consistency_loss(&orth, &[vec![0, 1]], 0.2);
    let e5 = 5f64.exp();
    assert!((l + 2.0 * (e5 / (e5 + 1.0)).ln()).abs() < 1e-12);
    assert!((l - 0.0134).abs() < 1e-4);

    let alone = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.7], vec![-1.0, 0.2]]).unwrap();
    assert_eq!(consistency_loss(&alone, &[vec![0, 1, 2]], 0.2), 0.0);
    // single-member groups are skipped
    assert_eq!(consistency_loss(&alone, &[vec![1]], 0.2), 0.0);
}

#[test]
fn individual_action_loss_closed_forms() {
    let uniform = Tensor::zeros(3, 7);
    assert!((individual_action_loss(&uniform, &[0, 3, 6]) - 7f64.ln()).abs() < 1e-12);
    let confident = Tensor::from_rows(&[vec![40.0, 0.0], vec![0.0, 40.0]]).unwrap();
    assert!(individual_action_loss(&confident, &[0, 1]) < 1e-15);
}

fn output_from(class_logits: Vec<Vec<f64>>, membership: Vec<Vec<f64>>) -> ModelOutput {
    let k = class_logits.len();
    let n = membership[0].len();
    let c = class_logits[0].len();
    ModelOutput {
        actor_embeddings: Tensor::zeros(n, 2),
        group_embeddings: Tensor::zeros(k, 2),
        actor_logits: Tensor::zeros(n, c),
        group_logits: Tensor::from_rows(&class_logits).unwrap(),
        membership_logits: Tensor::from_rows(&membership).unwrap(),
        actor_attention: vec![],
    }
}

#[test]
fn matching_examples() {
    // slot 1 predicts the real group perfectly
    let out = output_from(vec![vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 5.0]], vec![vec![-9.0; 3], vec![9.0, 9.0, -9.0]]);
    let targets = vec![
        GroupTarget {
            activity: 2,
            membership: vec![1.0, 1.0, 0.0],
        },
        GroupTarget::empty(3),
    ];
    assert_eq!(match_groups(&targets, &out).unwrap(), vec![1, 0]);

    // all-∅ targets: every assignment costs 0, the identity wins
    let empty = vec![GroupTarget::empty(3); 2];
    assert_eq!(match_groups(&empty, &out).unwrap(), vec![0, 1]);
}

#[test]
fn targets_are_padded() {
    let clip = clip_at(&[(0.1, 0.1), (0.2, 0.2), (0.8, 0.8)], 1, &[(&[1, 2], 2)]);
    let t = group_targets(&clip, 3).unwrap();
    assert_eq!(t.len(), 3);
    assert_eq!(t[0].membership, vec![1.0, 1.0, 0.0]);
    assert!(t[1].is_empty_group() && t[2].is_empty_group());
    assert!(group_targets(&clip, 0).is_err());
}

fn fixture() -> (gad_core::data::Clip, ClipInput) {
    let clip = clip_at(
        &[(0.1, 0.1), (0.15, 0.12), (0.7, 0.7), (0.75, 0.72), (0.72, 0.65), (0.4, 0.4)],
        3,
        &[(&[1, 2], 1), (&[3, 4, 5], 3)],
    );
    let input = ClipInput::new(&clip, &features(&clip, 2, 5, 5)).unwrap();
    (clip, input)
}

#[test]
fn tape_loss_matches_reference_formulas() {
    let (clip, input) = fixture();
    let model = GroupingTransformer::new(small_config(4, 2, 2, 5), 3).unwrap();
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let vars = model.forward(&tape, &input).unwrap();
    let (total, parts) = clip_loss(&vars, &clip, &cfg).unwrap();
    assert_eq!(total.item(), parts.total);

    let out = vars.output();
    let targets = group_targets(&clip, 4).unwrap();
    let slots = match_groups(&targets, &out).unwrap();
    let l_ind = individual_action_loss(&out.actor_logits, &clip.actor_labels());
    let l_group: f64 = targets.iter().zip(&slots).map(|(t, &s)| group_loss(t.activity, out.group_logits.row(s))).sum();
    let scores = out.membership_scores();
    let l_mem: f64 = targets
        .iter()
        .zip(&slots)
        .filter(|(t, _)| !t.is_empty_group())
        .map(|(t, &s)| membership_loss(&t.membership, scores.row(s)))
        .sum();
    let l_con = consistency_loss(&out.actor_embeddings, &[vec![0, 1], vec![2, 3, 4]], 0.2);
    let reference = LossBreakdown::combine(l_ind, l_group, l_mem, l_con, &cfg);
    for (a, b) in [
        (parts.l_ind, reference.l_ind),
        (parts.l_group, reference.l_group),
        (parts.l_mem, reference.l_mem),
        (parts.l_con, reference.l_con),
        (parts.total, reference.total),
    ] {
        assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn zero_coefficients_leave_two_terms() {
    let (clip, input) = fixture();
    let model = GroupingTransformer::new(small_config(3, 1, 2, 5), 4).unwrap();
    let cfg = LossConfig {
        lambda_mem: 0.0,
        lambda_con: 0.0,
        ..LossConfig::default()
    };
    let tape = Tape::new();
    let (_, parts) = clip_loss(&model.forward(&tape, &input).unwrap(), &clip, &cfg).unwrap();
    assert!(parts.l_mem > 0.0 && parts.l_con > 0.0);
    assert_eq!(parts.total, parts.l_ind + parts.l_group);
}

#[test]
fn empty_weight_scales_padding_terms() {
    let (clip, input) = fixture();
    let model = GroupingTransformer::new(small_config(4, 1, 2, 5), 8).unwrap();
    let tape = Tape::new();
    let vars = model.forward(&tape, &input).unwrap();
    let full = clip_loss(&vars, &clip, &LossConfig::default()).unwrap().1;
    let none = clip_loss(
        &vars,
        &clip,
        &LossConfig {
            empty_weight: 0.0,
            ..LossConfig::default()
        },
    )
    .unwrap()
    .1;
    assert!(none.l_group < full.l_group);
    let out = vars.output();
    let targets = group_targets(&clip, 4).unwrap();
    let slots = match_groups(&targets, &out).unwrap();
    let real: f64 = (0..2).map(|i| group_loss(targets[i].activity, out.group_logits.row(slots[i]))).sum();
    assert!((none.l_group - real).abs() < 1e-12);
}

#[test]
fn slot_permutation_leaves_loss_unchanged() {
    let (clip, input) = fixture();
    let model = GroupingTransformer::new(small_config(4, 2, 2, 5), 21).unwrap();
    let mut permuted = model.clone();
    let id = model.group_tokens_id();
    let rows = model.params().value(id).to_rows();
    let perm = [3, 1, 0, 2];
    *permuted.params_mut().value_mut(id) = Tensor::from_rows(&perm.map(|i| rows[i].clone())).unwrap();
    let loss = |m: &GroupingTransformer| {
        let tape = Tape::new();
        clip_loss(&m.forward(&tape, &input).unwrap(), &clip, &LossConfig::default()).unwrap().1.total
    };
    assert!((loss(&model) - loss(&permuted)).abs() < 1e-10);
}

#[test]
fn consistency_loss_is_scale_invariant_on_tape() {
    let e = Tensor::from_rows(&[vec![1.0, 0.3], vec![0.8, 0.1], vec![-0.2, 0.9], vec![0.5, 0.5]]).unwrap();
    let groups = [vec![0, 1], vec![2, 3]];
    let base = consistency_loss(&e, &groups, 0.2);
    for s in [1e-3, 0.5, 7.0, 1e4] {
        assert!((consistency_loss(&e.map(|v| v * s), &groups, 0.2) - base).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn consistency_scale_invariance(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..8),
        scale in 1e-3f64..1e3,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let e = Tensor::from_rows(&rows).unwrap();
        let groups = [vec![0, 1], vec![2, 3]];
        let a = consistency_loss(&e, &groups, 0.2);
        let b = consistency_loss(&e.map(|v| v * scale), &groups, 0.2);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}

#[test]
fn full_graph_gradient_check() {
    // N=3, K=2, D=8, L=1
    let clip = clip_at(&[(0.1, 0.1), (0.15, 0.12), (0.5, 0.5)], 2, &[(&[1, 2], 2)]);
    let input = ClipInput::new(&clip, &features(&clip, 1, 4, 9)).unwrap();
    let model = GroupingTransformer::new(small_config(2, 1, 1, 4), 5).unwrap();
    let mut store = model.params().clone();
    let ids: Vec<_> = store.ids().collect();
    let report = grad_check(&mut store, &ids, 1e-5, 1e-3, |tape, s| {
        let vars = model.forward_with_params(tape, s, &input).unwrap();
        Ok(clip_loss(&vars, &clip, &LossConfig::default()).unwrap().0)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 1000);
}

#[test]
fn schedule_shape() {
    let cfg = TrainConfig {
        epochs: 25,
        ..TrainConfig::default()
    };
    assert_eq!(learning_rate(&cfg, 0), 1e-5);
    assert!((learning_rate(&cfg, 5) - 1e-4).abs() < 1e-18);
    assert!(learning_rate(&cfg, 3) > learning_rate(&cfg, 2));
    assert!(learning_rate(&cfg, 10) < learning_rate(&cfg, 9));
    assert!(learning_rate(&cfg, 24) > 0.0);
}

fn toy() -> (Vec<gad_core::data::Clip>, Vec<ClipInput>, ModelConfig) {
    let spec = SynthSpec {
        num_clips: 3,
        feature_dim: 6,
        feature_frames: 1,
        ..SynthSpec::default()
    };
    let (clips, feats) = generate(&spec).unwrap();
    let inputs = ClipInput::for_dataset(&clips, &feats).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        k_tokens: 3,
        num_classes: spec.num_classes,
        actor_in: 6,
        frames: 1,
        ..ModelConfig::default()
    };
    (clips, inputs, cfg)
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (clips, inputs, cfg) = toy();
    let mut model = GroupingTransformer::new(cfg, 1).unwrap();
    let before = model.params().to_checkpoint_json();
    let tc = TrainConfig {
        epochs: 3,
        lr: 0.0,
        warmup_start_lr: 0.0,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &clips, &inputs, &tc).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(model.params().to_checkpoint_json(), before);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (clips, inputs, cfg) = toy();
    let tc = TrainConfig {
        epochs: 12,
        lr: 3e-3,
        warmup_start_lr: 3e-4,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = GroupingTransformer::new(cfg.clone(), 1).unwrap();
        let report = train(&mut model, &clips, &inputs, &tc).unwrap();
        (loss_curve_csv(&report), model.params().to_checkpoint_json(), report)
    };
    let (csv_a, ckpt_a, report) = run();
    let (csv_b, ckpt_b, _) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(ckpt_a, ckpt_b);
    assert!(csv_a.starts_with("epoch,l_ind,l_group,l_mem,l_con,total\n"));
    assert_eq!(csv_a.lines().count(), 13);
    let first = report.epochs[0].total;
    let last = report.epochs.last().unwrap().total;
    assert!(last < first, "{first} -> {last}");
    for l in &report.epochs {
        let recombined = LossBreakdown::combine(l.l_ind, l.l_group, l.l_mem, l.l_con, &LossConfig::default());
        assert_eq!(recombined.total, l.total);
    }
}

#[test]
fn diverging_loss_is_reported() {
    let (clips, inputs, cfg) = toy();
    let mut model = GroupingTransformer::new(cfg, 1).unwrap();
    let id = model.group_tokens_id();
    model.params_mut().value_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&mut model, &clips, &inputs, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, gad_core::training::TrainError::Divergence { .. }), "{err}");
}
