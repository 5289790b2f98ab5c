mod common;

use common::{fixture, tiny_config, Fixture};
use sidrank_core::model::{Head, PositionalMode, RerankerModel};
use sidrank_core::rng;
use sidrank_core::Error;

fn global_targets(f: &Fixture) -> Vec<usize> {
    let mut t = f.vocab.item_tokens(&f.table, f.request.candidates[2]).unwrap();
    t.extend(f.vocab.item_tokens(&f.table, f.request.candidates[0]).unwrap());
    t
}

fn log_softmax_sum(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max
}

/// Central differences on every tensor, checking the entry with the largest
/// analytic gradient plus a spread of others.
fn finite_difference_check(model: &mut RerankerModel, f: &Fixture, head: Head, targets: &[usize]) {
    let input = f.input.clone();
    let (_, grads) = model.loss_and_grads(&input, head, targets).unwrap();
    let eps = 1e-4;
    for id in 0..model.params().len() {
        let g = grads.get(id).clone();
        let n = g.data.len();
        let argmax = (0..n).max_by(|&a, &b| g.data[a].abs().total_cmp(&g.data[b].abs())).unwrap();
        let mut probe: Vec<usize> = (0..n).step_by((n / 10).max(1)).collect();
        probe.push(argmax);
        for idx in probe {
            let orig = model.params().get(id).data[idx];
            model.params_mut().get_mut(id).data[idx] = orig + eps;
            let (up, _) = model.loss_and_grads(&input, head, targets).unwrap();
            model.params_mut().get_mut(id).data[idx] = orig - eps;
            let (down, _) = model.loss_and_grads(&input, head, targets).unwrap();
            model.params_mut().get_mut(id).data[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g.data[idx];
            let scale = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= 1e-3 * scale + 1e-7,
                "{} [{idx}] analytic {analytic} numeric {numeric}",
                model.params().name(id)
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_both_heads() {
    for seed in [1, 2, 3] {
        let mut f = fixture(5, true, PositionalMode::Absolute, seed);
        let targets = global_targets(&f);
        let mut model = f.model.clone();
        finite_difference_check(&mut model, &f, Head::Global, &targets);
        finite_difference_check(&mut model, &f, Head::Local, &[3, 0, 4]);
        f.model = model;
    }
}

#[test]
fn gradients_match_finite_differences_with_tied_head_and_setlike_positions() {
    let f = fixture(4, false, PositionalMode::SetLike, 9);
    let mut cfg = f.model.config().clone();
    cfg.tie_output = true;
    let mut model = RerankerModel::new(cfg, 9).unwrap();
    let targets = global_targets(&f);
    finite_difference_check(&mut model, &f, Head::Global, &targets);
}

#[test]
fn every_step_distribution_is_normalized_and_finite() {
    let mut r = rng::seeded(5);
    for trial in 0..1000u64 {
        let f = fixture(1 + (trial % 6) as usize, false, PositionalMode::Absolute, trial);
        let len = rng::index(&mut r, 5);
        let prefix: Vec<usize> = (0..len).map(|_| rng::index(&mut r, f.vocab.size())).collect();
        for step in f.model.forward(&f.input, &prefix).unwrap() {
            assert!(step.logits.iter().chain(&step.hidden).all(|v| v.is_finite()));
            let lse = log_softmax_sum(&step.logits);
            let total: f64 = step.logits.iter().map(|z| (z - lse).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let mut f = fixture(3, false, PositionalMode::Absolute, 4);
    let head = f.model.output_head();
    f.model.params_mut().get_mut(head).data.iter_mut().for_each(|w| *w = 0.0);
    let targets = global_targets(&f);
    let (loss, _) = f.model.loss_and_grads(&f.input, Head::Global, &targets).unwrap();
    assert!((loss - (f.vocab.size() as f64).ln()).abs() < 1e-12);
}

#[test]
fn loss_vanishes_when_the_target_takes_all_mass() {
    let mut f = fixture(3, false, PositionalMode::Absolute, 4);
    let h = f.model.forward(&f.input, &[]).unwrap()[0].hidden.clone();
    let target = 5;
    let head = f.model.output_head();
    let w = f.model.params_mut().get_mut(head);
    w.data.iter_mut().for_each(|x| *x = 0.0);
    w.row_mut(target).iter_mut().zip(&h).for_each(|(dst, hv)| *dst = 1e3 * hv);
    let (loss, _) = f.model.loss_and_grads(&f.input, Head::Global, &[target]).unwrap();
    assert!(loss < 1e-9, "loss {loss}");
}

#[test]
fn output_gradient_is_p_minus_onehot_times_hidden() {
    for seed in 0..20 {
        let f = fixture(4, true, PositionalMode::Absolute, seed);
        for (head, y) in [(Head::Global, 2usize), (Head::Local, 1)] {
            let step = match head {
                Head::Global => f.model.forward(&f.input, &[]).unwrap().remove(0),
                Head::Local => f.model.local_variant_head(&f.input, &[]).unwrap().remove(0),
            };
            let lse = log_softmax_sum(&step.logits);
            let (_, grads) = f.model.loss_and_grads(&f.input, head, &[y]).unwrap();
            let g = grads.get(f.model.head_param(head).unwrap());
            for (j, z) in step.logits.iter().enumerate() {
                let coeff = (z - lse).exp() - if j == y { 1.0 } else { 0.0 };
                for (k, hk) in step.hidden.iter().enumerate() {
                    assert!((g.get(j, k) - coeff * hk).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    for (local, mode) in [(false, PositionalMode::Absolute), (true, PositionalMode::SetLike)] {
        let f = fixture(5, local, mode, 11);
        let (head, outputs): (Head, Vec<usize>) =
            if local { (Head::Local, vec![4, 1, 2]) } else { (Head::Global, global_targets(&f)) };
        let tf = match head {
            Head::Global => f.model.forward(&f.input, &outputs).unwrap(),
            Head::Local => f.model.local_variant_head(&f.input, &outputs).unwrap(),
        };
        let enc = f.model.encode(&f.input).unwrap();
        let mut state = f.model.start_decoder();
        let mut next = f.model.start_input(head);
        for (t, expect) in tf.iter().enumerate() {
            let step = f.model.decode_step(&enc, &mut state, head, next).unwrap();
            for (a, b) in step.logits.iter().zip(&expect.logits).chain(step.hidden.iter().zip(&expect.hidden)) {
                assert!((a - b).abs() < 1e-9);
            }
            if t < outputs.len() {
                next = f.model.feedback_input(head, outputs[t]);
            }
        }
    }
}

#[test]
fn setlike_positions_make_the_first_hidden_state_order_free() {
    let f = fixture(5, false, PositionalMode::SetLike, 21);
    let reversed = f.request.permuted(&[4, 3, 2, 1, 0]);
    let input_r = sidrank_core::model::serialize_input(&reversed, &f.table, &f.vocab, 10, 48).unwrap();
    let a = f.model.forward(&f.input, &[]).unwrap().remove(0);
    let b = f.model.forward(&input_r, &[]).unwrap().remove(0);
    for (x, y) in a.hidden.iter().zip(&b.hidden) {
        assert!((x - y).abs() < 1e-5);
    }

    let g = fixture(5, false, PositionalMode::Absolute, 21);
    let a = g.model.forward(&g.input, &[]).unwrap().remove(0);
    let b = g.model.forward(&input_r, &[]).unwrap().remove(0);
    let diff: f64 = a.hidden.iter().zip(&b.hidden).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "absolute positions should see the order");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let f = fixture(5, false, PositionalMode::Absolute, 3);
    let g = fixture(5, false, PositionalMode::Absolute, 3);
    let a = f.model.forward(&f.input, &[1, 2]).unwrap();
    let b = g.model.forward(&g.input, &[1, 2]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.logits, y.logits);
    }
}

#[test]
fn swapping_output_rows_swaps_logits() {
    let mut f = fixture(3, false, PositionalMode::Absolute, 8);
    let before = f.model.forward(&f.input, &[]).unwrap().remove(0).logits;
    let head = f.model.output_head();
    let w = f.model.params_mut().get_mut(head);
    let (r0, r1) = (w.row(0).to_vec(), w.row(7).to_vec());
    w.row_mut(0).copy_from_slice(&r1);
    w.row_mut(7).copy_from_slice(&r0);
    let after = f.model.forward(&f.input, &[]).unwrap().remove(0).logits;
    assert_eq!(before[0], after[7]);
    assert_eq!(before[7], after[0]);
    assert_eq!(before[3], after[3]);
}

#[test]
fn local_head_width_and_mismatch() {
    let f = fixture(6, true, PositionalMode::Absolute, 2);
    let steps = f.model.local_variant_head(&f.input, &[2]).unwrap();
    assert_eq!(steps.len(), 2);
    assert!(steps.iter().all(|s| s.logits.len() == 6));

    let g = fixture(5, false, PositionalMode::Absolute, 2);
    assert!(matches!(f.model.local_variant_head(&g.input, &[]), Err(Error::Argument(_))));
    assert!(matches!(g.model.local_variant_head(&g.input, &[]), Err(Error::Argument(_))));
}

#[test]
fn out_of_vocabulary_tokens_are_rejected() {
    let f = fixture(3, false, PositionalMode::Absolute, 2);
    let v = f.vocab.size();
    assert!(matches!(f.model.forward(&f.input, &[v]), Err(Error::Argument(_))));
    assert!(matches!(f.model.loss_and_grads(&f.input, Head::Global, &[]), Err(Error::Argument(_))));
    assert!(matches!(f.model.loss_and_grads(&f.input, Head::Global, &[v + 1]), Err(Error::Argument(_))));
}

#[test]
fn parts_round_trip_and_shape_checks() {
    let f = fixture(3, true, PositionalMode::Absolute, 2);
    let cfg = f.model.config().clone();
    let back = RerankerModel::from_parts(cfg.clone(), f.model.params().clone(), 2).unwrap();
    assert_eq!(back, f.model);

    let mut other = cfg.clone();
    other.d_model = 16;
    assert!(RerankerModel::from_parts(other, f.model.params().clone(), 2).is_err());

    let mut bad = tiny_config(&f.vocab, None, PositionalMode::Absolute);
    bad.n_heads = 3;
    assert!(RerankerModel::new(bad, 0).is_err());
}
