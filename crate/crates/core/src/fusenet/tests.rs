use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Tape;

fn tiny() -> BackboneSpec {
    BackboneSpec {
        base_channels: 2,
        n_stages: 3,
        dilation_rates: vec![1, 2],
        split_stage: 2,
    }
}

fn random_input(n: usize, c: usize, hw: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * hw * hw).map(|_| rng.gen::<f64>()).collect();
    Tensor::from_vec(&[n, c, hw, hw], data)
}

fn stage_count(cin: usize, cout: usize) -> usize {
    9 * cin * cout + 2 * cout + 2 * (9 * cout * cout + 2 * cout)
}

fn head_count(cin: usize, hw: usize, nd: usize) -> usize {
    nd * (9 * cin * hw + 2 * hw) + (nd * hw * hw + 2 * hw) + 2 * hw + 2
}

fn stack_count(b: &BackboneSpec, range: std::ops::Range<usize>, mut cin: usize) -> usize {
    let mut n = 0;
    for i in range {
        n += stage_count(cin, b.width(i));
        cin = b.width(i);
    }
    n
}

#[test]
fn input_level_first_layer_takes_twenty_channels() {
    let m = FusionModel::build(FusionConfig::input(BackboneSpec::default(), 4, 5), 0).unwrap();
    let first = m.store().ids().next().unwrap();
    assert_eq!(m.store().get(first).shape(), &[16, 20, 3, 3]);
    let y = m.predict(&random_input(1, 20, 16, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 16, 16]);
}

#[test]
fn parameter_counts_follow_backbone_arithmetic() {
    let b = BackboneSpec::default();
    let (n_seq, k) = (4, 5);
    let hw = b.head_width();
    let nd = b.dilation_rates.len();
    let head_in = b.width(b.n_stages - 1);

    let input = FusionModel::build(FusionConfig::input(b.clone(), n_seq, k), 0).unwrap();
    let expect_input = stack_count(&b, 0..b.n_stages, n_seq * k) + head_count(head_in, hw, nd);
    assert_eq!(input.param_count(), expect_input);

    let single = stack_count(&b, 0..b.n_stages, k) + head_count(head_in, hw, nd);
    for sharing in [SharingMode::Independent, SharingMode::Shared, SharingMode::L2Tied] {
        let mid = FusionModel::build(FusionConfig::mid(sharing, b.clone(), n_seq, k), 0).unwrap();
        let end = FusionModel::build(FusionConfig::end(sharing, b.clone(), n_seq, k), 0).unwrap();
        let copies = if sharing == SharingMode::Shared { 1 } else { n_seq };
        let early = stack_count(&b, 0..b.split_stage, k);
        assert_eq!(mid.branch_param_count(), copies * early);
        let fused = b.width(b.split_stage - 1) * n_seq;
        assert_eq!(mid.param_count(), copies * early + head_count(fused, hw, nd));
        assert_eq!(end.param_count(), copies * single);
        if sharing != SharingMode::Shared {
            assert!(input.param_count() < mid.param_count());
            assert!(mid.param_count() <= end.param_count());
        }
    }
}

#[test]
fn mid_shared_to_independent_early_ratio_is_one_to_four() {
    let b = tiny();
    let shared = FusionModel::build(FusionConfig::mid(SharingMode::Shared, b.clone(), 4, 5), 3).unwrap();
    let indep = FusionModel::build(FusionConfig::mid(SharingMode::Independent, b, 4, 5), 3).unwrap();
    assert_eq!(4 * shared.branch_param_count(), indep.branch_param_count());
}

#[test]
fn end_shared_has_one_single_sequence_network_of_parameters() {
    let b = tiny();
    let end = FusionModel::build(FusionConfig::end(SharingMode::Shared, b.clone(), 4, 5), 0).unwrap();
    let single = FusionModel::build(FusionConfig::input(b, 1, 5), 0).unwrap();
    assert_eq!(end.param_count(), single.param_count());
}

#[test]
fn initialisation_modes() {
    let b = tiny();
    let tied = FusionModel::build(FusionConfig::mid(SharingMode::L2Tied, b.clone(), 4, 1), 9).unwrap();
    let g = tied.branch_groups();
    for k in 0..g[0].len() {
        assert_ne!(g[0][k], g[1][k]);
        assert_eq!(tied.store().get(g[0][k]), tied.store().get(g[3][k]));
    }
    assert_eq!(tied.tie_penalty().unwrap(), 0.0);

    let indep = FusionModel::build(FusionConfig::mid(SharingMode::Independent, b.clone(), 4, 1), 9).unwrap();
    let g = indep.branch_groups();
    assert_ne!(indep.store().get(g[0][0]), indep.store().get(g[1][0]));

    let shared = FusionModel::build(FusionConfig::mid(SharingMode::Shared, b.clone(), 4, 1), 9).unwrap();
    let g = shared.branch_groups();
    assert_eq!(g[0], g[2]);

    let again = FusionModel::build(FusionConfig::mid(SharingMode::Independent, b, 4, 1), 9).unwrap();
    assert_eq!(indep, again);
}

#[test]
fn outputs_are_probabilities() {
    for cfg in FusionConfig::experiment_grid(&tiny(), 4, 3, [0, 2]) {
        let m = FusionModel::build(cfg.clone(), 1).unwrap();
        let mut x = random_input(2, 12, 12, 5);
        x.data_mut().iter_mut().for_each(|v| *v = (*v - 0.5) * 40.0);
        let p = m.predict(&x).unwrap();
        assert_eq!(p.shape(), &[2, 1, 12, 12], "{}", cfg.label());
        assert!(p.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let m = FusionModel::build(FusionConfig::input(tiny(), 4, 5), 0).unwrap();
    assert!(matches!(m.predict(&random_input(1, 19, 8, 0)), Err(ModelError::Shape(_))));
}

fn swap_blocks(x: &Tensor, k: usize, a: usize, b: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = x.clone();
    let hw = h * w;
    for s in 0..n {
        for j in 0..k {
            let ia = (s * c + a * k + j) * hw;
            let ib = (s * c + b * k + j) * hw;
            out.data_mut()[ia..ia + hw].copy_from_slice(&x.data()[ib..ib + hw]);
            out.data_mut()[ib..ib + hw].copy_from_slice(&x.data()[ia..ia + hw]);
        }
    }
    out
}

#[test]
fn subtraction_of_identical_inputs_is_zero_and_swap_negates() {
    let cfg = FusionConfig::subtraction(0, 2, tiny(), 4, 3);
    let m = FusionModel::build(cfg, 4).unwrap();
    let x = random_input(1, 12, 12, 8);
    let fused = m.fused_features(&x).unwrap().unwrap();
    let swapped = m.fused_features(&swap_blocks(&x, 3, 0, 2)).unwrap().unwrap();
    let (_, c, h, w) = fused.dims4();
    let width = c / 3;
    let block = width * h * w;
    for i in 0..block {
        assert_eq!(swapped.data()[i], -fused.data()[i]);
    }
    assert_eq!(&swapped.data()[block..], &fused.data()[block..]);

    let mut same = x.clone();
    let plane = 12 * 12;
    let pre: Vec<f64> = same.data()[..3 * plane].to_vec();
    same.data_mut()[6 * plane..9 * plane].copy_from_slice(&pre);
    let f = m.fused_features(&same).unwrap().unwrap();
    assert!(f.data()[..block].iter().all(|&v| v == 0.0));
}

#[test]
fn end_shared_identical_inputs_equal_single_branch() {
    let b = tiny();
    let end = FusionModel::build(FusionConfig::end(SharingMode::Shared, b.clone(), 4, 3), 2).unwrap();
    let single = FusionModel::build(FusionConfig::end(SharingMode::Shared, b, 1, 3), 2).unwrap();
    let one = random_input(1, 3, 12, 6);
    let mut four = Vec::new();
    for _ in 0..4 {
        four.extend_from_slice(one.data());
    }
    let four = Tensor::from_vec(&[1, 12, 12, 12], four);
    let a = end.predict(&four).unwrap();
    let s = single.predict(&one).unwrap();
    assert!(a.max_abs_diff(&s) <= 4.0 * f64::EPSILON);
}

#[test]
fn end_shared_is_permutation_invariant() {
    let m = FusionModel::build(FusionConfig::end(SharingMode::Shared, tiny(), 4, 3), 11).unwrap();
    let x = random_input(2, 12, 12, 12);
    let y = swap_blocks(&swap_blocks(&x, 3, 0, 3), 3, 1, 2);
    for mode in [BnMode::Eval, BnMode::Train] {
        let mut t1 = Tape::new();
        let f1 = m.forward_tape(&mut t1, &x, None, mode, false).unwrap();
        let mut t2 = Tape::new();
        let f2 = m.forward_tape(&mut t2, &y, None, mode, false).unwrap();
        assert!(t1.value(f1.prob).max_abs_diff(t2.value(f2.prob)) < 1e-12);
    }
}

#[test]
fn zeroing_one_sequence_leaves_other_branches_bit_identical() {
    let m = FusionModel::build(FusionConfig::mid(SharingMode::Independent, tiny(), 4, 3), 1).unwrap();
    let x = random_input(1, 12, 12, 2);
    let mut z = x.clone();
    z.data_mut()[3 * 144..6 * 144].fill(0.0);
    let a = m.branch_features(&x).unwrap();
    let b = m.branch_features(&z).unwrap();
    assert_eq!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
    assert_eq!(a[2], b[2]);
    assert_eq!(a[3], b[3]);
}

fn param_grads(m: &FusionModel, x: &Tensor, target: &[f64]) -> Vec<(ParamId, Tensor)> {
    let mut tape = Tape::new();
    let f = m.forward_tape(&mut tape, x, None, BnMode::Train, false).unwrap();
    let loss = tape.bce_logits(f.logits.unwrap(), target);
    tape.backward(loss).params().to_vec()
}

#[test]
fn shared_gradient_is_sum_of_untied_branch_gradients() {
    let b = tiny();
    for level in [IntegrationLevel::Mid, IntegrationLevel::End] {
        let mk = |s| match level {
            IntegrationLevel::Mid => FusionConfig::mid(s, b.clone(), 4, 1),
            _ => FusionConfig {
                fusion_op: FusionOp::Sum,
                ..FusionConfig::end(s, b.clone(), 4, 1)
            },
        };
        let shared = FusionModel::build(mk(SharingMode::Shared), 5).unwrap();
        let tied = FusionModel::build(mk(SharingMode::L2Tied), 5).unwrap();
        let x = random_input(2, 4, 8, 3);
        let target: Vec<f64> = (0..2 * 64).map(|i| ((i * 7) % 5 == 0) as u8 as f64).collect();
        let gs = param_grads(&shared, &x, &target);
        let gt = param_grads(&tied, &x, &target);
        let find = |g: &[(ParamId, Tensor)], id| g.iter().find(|(p, _)| *p == id).map(|(_, t)| t.clone());
        let sg = shared.branch_groups();
        let tg = tied.branch_groups();
        for k in 0..sg[0].len() {
            let s = find(&gs, sg[0][k]).unwrap();
            let mut sum = vec![0.0; s.len()];
            for g in &tg {
                let t = find(&gt, g[k]).unwrap();
                sum.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
            }
            for (a, e) in s.data().iter().zip(&sum) {
                assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()), "{level:?} {a} vs {e}");
            }
        }
    }
}

#[test]
fn tie_penalty_closed_form() {
    let a = [0.0];
    let b = [2.0];
    assert_eq!(tie_penalty_of(&[vec![&a[..]], vec![&b[..]]], 1.0), 2.0);
    let m = FusionModel::build(FusionConfig::mid(SharingMode::Shared, tiny(), 4, 1), 0).unwrap();
    assert!(matches!(m.tie_penalty(), Err(ModelError::Usage(_))));
}

#[test]
fn tie_penalty_gradient_matches_finite_differences() {
    let mut cfg = FusionConfig::mid(
        SharingMode::L2Tied,
        BackboneSpec {
            base_channels: 1,
            n_stages: 1,
            dilation_rates: vec![1],
            split_stage: 1,
        },
        2,
        1,
    );
    cfg.tie_lambda = 0.7;
    let mut m = FusionModel::build(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in m.store().ids().collect::<Vec<_>>() {
        m.store_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    let grad = m.tie_penalty_grad().unwrap();
    let h = 1e-6;
    for (id, g) in &grad {
        for i in 0..g.len() {
            let orig = m.store().get(*id).data()[i];
            m.store_mut().get_mut(*id).data_mut()[i] = orig + h;
            let up = m.tie_penalty().unwrap();
            m.store_mut().get_mut(*id).data_mut()[i] = orig - h;
            let down = m.tie_penalty().unwrap();
            m.store_mut().get_mut(*id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.data()[i];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "{fd} vs {an}");
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let t = vec![true, false, true, false];
    let half = cross_entropy(&[0.5; 4], &t).unwrap();
    assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
    let perfect = cross_entropy(&[1.0, 0.0, 1.0, 0.0], &t).unwrap();
    assert!(perfect <= -(1.0 - CE_EPS).ln() + 1e-18);
    assert!(matches!(cross_entropy(&[0.5; 3], &t), Err(ModelError::Shape(_))));
}

#[test]
fn tied_loss_is_cross_entropy_plus_penalty() {
    let mut m = FusionModel::build(FusionConfig::mid(SharingMode::L2Tied, tiny(), 4, 1), 0).unwrap();
    let id = m.branch_groups()[1][0];
    m.store_mut().get_mut(id).data_mut()[0] += 0.3;
    let x = random_input(1, 4, 8, 0);
    let sample = crate::preprocess::SliceSample {
        stack: x.clone().reshape(&[4, 8, 8]),
        target: (0..64).map(|i| i % 3 == 0).collect(),
        patient_id: "p".into(),
        z_index: 0,
        presence: crate::preprocess::SequencePresence::all(4),
        n_slices: 1,
        applied: None,
    };
    let pred = m.forward(&sample).unwrap();
    let ce = cross_entropy(&pred, &sample.target).unwrap();
    let pen = m.tie_penalty().unwrap();
    assert!(pen > 0.0);
    assert_eq!(m.loss(&sample, &pred).unwrap(), ce + pen);
}

#[test]
fn checkpoint_round_trip_and_config_check() {
    let cfg = FusionConfig::mid(SharingMode::L2Tied, tiny(), 4, 3);
    let mut m = FusionModel::build(cfg.clone(), 2).unwrap();
    let mut tape = Tape::new();
    let f = m.forward_tape(&mut tape, &random_input(2, 12, 8, 1), None, BnMode::Train, false).unwrap();
    m.update_running_stats(&f.bn_records);
    let bytes = m.to_bytes();
    let back = FusionModel::from_bytes(&bytes, Some(&cfg)).unwrap();
    assert_eq!(back, m);
    let other = FusionConfig::mid(SharingMode::Shared, tiny(), 4, 3);
    assert!(matches!(FusionModel::from_bytes(&bytes, Some(&other)), Err(ModelError::Checkpoint(_))));
    assert!(FusionModel::from_bytes(&bytes[..bytes.len() - 1], None).is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.save(&p).unwrap();
    assert_eq!(FusionModel::load(&p, None).unwrap(), m);
}
