mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{brute_force_trace, fixture, k_permutations, Fixture};
use sidrank_core::decode::{prepare, DecodeTask, SampleMode};
use sidrank_core::model::{Head, PositionalMode};

fn strings(f: &Fixture, head: Head) -> BTreeMap<u64, Vec<usize>> {
    f.request
        .candidates
        .iter()
        .enumerate()
        .map(|(j, &c)| match head {
            Head::Global => (c, f.vocab.item_tokens(&f.table, c).unwrap()),
            Head::Local => (c, vec![j]),
        })
        .collect()
}

fn exact_logprob(f: &Fixture, head: Head, list: &[u64]) -> f64 {
    let (tokens, legal) = brute_force_trace(&strings(f, head), list);
    f.model.sequence_log_probs(&f.input, head, &tokens, Some(&legal), 1.0).unwrap().iter().sum()
}

#[test]
fn single_candidate_is_forced() {
    let f = fixture(1, false, PositionalMode::Absolute, 1);
    let p = prepare(Head::Global, &f.request, &f.table, &f.vocab, 10, 48).unwrap();
    let task = DecodeTask::new(&f.model, Head::Global, &p, &f.request, 1).unwrap();
    let out = task.beam_search(1).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].list.items, vec![100]);
    assert!(out[0].logprob.abs() < 1e-12, "forced path has probability one");
}

#[test]
fn wide_beam_enumerates_all_pairs_and_finds_the_exact_argmax() {
    for (seed, head) in [(1, Head::Global), (2, Head::Global), (3, Head::Local)] {
        let f = fixture(4, head == Head::Local, PositionalMode::Absolute, seed);
        let p = prepare(head, &f.request, &f.table, &f.vocab, 10, 48).unwrap();
        let task = DecodeTask::new(&f.model, head, &p, &f.request, 2).unwrap();
        let out = task.beam_search(12).unwrap();
        let got: BTreeSet<Vec<u64>> = out.iter().map(|d| d.list.items.clone()).collect();
        let all: BTreeSet<Vec<u64>> = k_permutations(&f.request.candidates, 2).into_iter().collect();
        assert_eq!(got, all);

        let mut scored: Vec<(f64, Vec<u64>)> =
            all.iter().map(|l| (exact_logprob(&f, head, l), l.clone())).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        assert_eq!(out[0].list.items, scored[0].1);
        for d in &out {
            assert!((d.logprob - exact_logprob(&f, head, &d.list.items)).abs() < 1e-9);
        }
        for w in out.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
        }
    }
}

#[test]
fn sampled_logprobs_agree_with_teacher_forcing() {
    let f = fixture(6, false, PositionalMode::Absolute, 5);
    let p = prepare(Head::Global, &f.request, &f.table, &f.vocab, 10, 48).unwrap();
    let task = DecodeTask::new(&f.model, Head::Global, &p, &f.request, 3).unwrap();
    for (seed, tau) in [(1, 1.0), (2, 0.7), (3, 2.5)] {
        let d = task.sample(SampleMode::Temperature(tau), seed).unwrap();
        let tf = f.model.sequence_log_probs(&f.input, Head::Global, &d.tokens, Some(&d.legal), tau).unwrap();
        for (a, b) in d.step_logprobs.iter().zip(&tf) {
            assert!((a - b).abs() < 1e-5);
        }
        let (_, legal) = brute_force_trace(&strings(&f, Head::Global), &d.list.items);
        assert_eq!(legal, d.legal);
    }
}

#[test]
fn sampling_is_seed_deterministic_and_valid() {
    let f = fixture(6, false, PositionalMode::Absolute, 5);
    let p = prepare(Head::Global, &f.request, &f.table, &f.vocab, 10, 48).unwrap();
    let task = DecodeTask::new(&f.model, Head::Global, &p, &f.request, 4).unwrap();
    for seed in 0..50 {
        let a = task.sample(SampleMode::Temperature(1.0), seed).unwrap();
        let b = task.sample(SampleMode::Temperature(1.0), seed).unwrap();
        assert_eq!(a, b);
        a.list.validate(&f.request).unwrap();
        assert_eq!(a.list.len(), 4);
    }
}

#[test]
fn near_zero_temperature_matches_greedy() {
    for seed in 0..5 {
        let f = fixture(5, false, PositionalMode::Absolute, seed);
        let p = prepare(Head::Global, &f.request, &f.table, &f.vocab, 10, 48).unwrap();
        let task = DecodeTask::new(&f.model, Head::Global, &p, &f.request, 3).unwrap();
        let greedy = task.greedy().unwrap();
        let cold = task.sample(SampleMode::Temperature(1e-6), 17).unwrap();
        assert_eq!(greedy.tokens, cold.tokens);
        let beam1 = task.beam_search(1).unwrap().remove(0);
        assert_eq!(greedy.tokens, beam1.tokens);
    }
}

#[test]
fn uniform_logits_select_each_of_three_equally_often() {
    // candidates 100..103 share their first code, so a flat head is uniform
    // over items
    let mut f = fixture(3, false, PositionalMode::Absolute, 2);
    let head = f.model.output_head();
    f.model.params_mut().get_mut(head).data.iter_mut().for_each(|w| *w = 0.0);
    let p = prepare(Head::Global, &f.request, &f.table, &f.vocab, 10, 48).unwrap();
    let task = DecodeTask::new(&f.model, Head::Global, &p, &f.request, 1).unwrap();
    let draws = 30_000;
    let mut counts = BTreeMap::new();
    for seed in 0..draws {
        *counts.entry(task.sample(SampleMode::Temperature(1.0), seed).unwrap().list.items[0]).or_insert(0u32) += 1;
    }
    let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for c in [100, 101, 102] {
        let n = counts.get(&c).copied().unwrap_or(0) as f64;
        assert!((n - draws as f64 / 3.0).abs() < 3.0 * sigma, "item {c}: {n}");
    }
}

#[test]
fn k_larger_than_n_and_zero_beam_are_rejected() {
    let f = fixture(3, false, PositionalMode::Absolute, 2);
    let p = prepare(Head::Global, &f.request, &f.table, &f.vocab, 10, 48).unwrap();
    assert!(DecodeTask::new(&f.model, Head::Global, &p, &f.request, 4).is_err());
    let task = DecodeTask::new(&f.model, Head::Global, &p, &f.request, 2).unwrap();
    assert!(task.beam_search(0).is_err());
    assert!(task.sample(SampleMode::Temperature(0.0), 1).is_err());
}
