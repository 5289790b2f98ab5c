use sidrank_core::model::PositionalMode;
use sidrank_core::variance::{estimate_variance, output_gradient_deviation, LabConfig, Labeling, VarianceLab};

#[test]
fn target_position_is_uniform() {
    let lab = VarianceLab::new(4, PositionalMode::Absolute, &LabConfig::default()).unwrap();
    let s = 8000;
    let probes = lab.probes(0, s, false, 1).unwrap();
    let p = 0.25;
    let sigma = (p * (1.0 - p) / s as f64).sqrt();
    for j in 1..=4 {
        let freq = probes.iter().filter(|q| q.local_label == j).count() as f64 / s as f64;
        assert!((freq - p).abs() < 3.0 * sigma, "row {j}: {freq}");
    }
}

#[test]
fn setlike_hidden_states_ignore_the_permutation() {
    let lab = VarianceLab::new(6, PositionalMode::SetLike, &LabConfig::default()).unwrap();
    let probes = lab.probes(2, 50, false, 3).unwrap();
    for p in &probes[1..] {
        for (a, b) in p.hidden.iter().zip(&probes[0].hidden) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    let abs = VarianceLab::new(6, PositionalMode::Absolute, &LabConfig::default()).unwrap();
    let probes = abs.probes(2, 50, false, 3).unwrap();
    assert!(probes.iter().any(|p| p.hidden != probes[0].hidden));
}

#[test]
fn mapping_term_scales_like_a_bernoulli_variance() {
    for n in [4usize, 8, 16] {
        let lab = VarianceLab::new(n, PositionalMode::SetLike, &LabConfig::default()).unwrap();
        let probes = lab.probes(0, 6000, true, n as u64).unwrap();
        let p = 1.0 / n as f64;
        let closed = p * (1.0 - p);
        let local = estimate_variance(&probes, Labeling::Local, Some(1)).unwrap();
        assert!((local.mapping - closed).abs() < 3.0 * local.se, "N={n}: {} vs {closed}", local.mapping);
        assert!(local.total >= 0.9 * closed);
        assert!(local.within < 1e-9);
        let global = estimate_variance(&probes, Labeling::Global, None).unwrap();
        assert!(global.total < 1e-8);
        assert_eq!(global.mapping, 0.0);
    }
}

#[test]
fn global_variance_is_the_hidden_state_variance() {
    let lab = VarianceLab::new(5, PositionalMode::Absolute, &LabConfig::default()).unwrap();
    let probes = lab.probes(1, 400, false, 9).unwrap();
    let s = probes.len() as f64;
    let d = probes[0].hidden.len();
    let mean: Vec<f64> = (0..d).map(|k| probes.iter().map(|p| p.hidden[k]).sum::<f64>() / s).collect();
    let var: f64 = probes
        .iter()
        .map(|p| p.hidden.iter().zip(&mean).map(|(h, m)| (h - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (s - 1.0);
    let est = estimate_variance(&probes, Labeling::Global, None).unwrap();
    assert!((est.total - var).abs() < 1e-10);
    assert!(est.total > 0.0);
}

#[test]
fn positional_model_respects_the_lower_bound() {
    for n in [4usize, 8] {
        let lab = VarianceLab::new(n, PositionalMode::Absolute, &LabConfig::default()).unwrap();
        let probes = lab.probes(0, 3000, false, 21).unwrap();
        for row in [1, n] {
            let e = estimate_variance(&probes, Labeling::Local, Some(row)).unwrap();
            assert!(e.mu_norm_sq > 0.0);
            assert!(e.total >= e.bound - 3.0 * e.se, "N={n} row {row}: {e:?}");
            assert!(e.mapping > 0.0);
            assert!((e.total - e.within - e.mapping).abs() < 1e-10);
        }
    }
}

#[test]
fn output_gradient_has_the_closed_form_on_probes() {
    let lab = VarianceLab::new(4, PositionalMode::Absolute, &LabConfig::default()).unwrap();
    let target = lab.vocab.item_tokens(&lab.table, 0).unwrap()[0];
    for p in lab.probes(0, 20, false, 4).unwrap() {
        let input = lab.input_for(&p.permutation).unwrap();
        assert!(output_gradient_deviation(&lab.model, &input, target).unwrap() < 1e-6);
    }
}
