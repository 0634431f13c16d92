// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::{argmax, copy_accuracy};
use mechuq::detect::{probe_sequences, ProbeParams};
use mechuq::instrument::*;
use mechuq::model::*;
use mechuq::synth::{synth_corpus, SynthCorpusSpec};
use mechuq::tensor::entropy;
use mechuq::trace::Label;
use mechuq::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        d_model: 8,
        n_layers: layers,
        n_heads: 2,
        d_head: 4,
        d_mlp: 5,
        max_seq_len: 12,
        activation: Activation::Relu,
        layernorm_eps: 1e-5,
    }
}

fn random_model(layers: usize, seed: u64) -> ModelBundle {
    let mut m = ModelBundle::zeros(config(layers)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.tensors().keys().cloned().collect();
    for name in names {
        let len = m.tensor(&name).data.len();
        m.set_tensor(&name, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    }
    m
}

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<usize> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| rng.gen_range(0..6)).collect()
}

#[test]
fn zero_model_has_zero_head_means() {
    let m = ModelBundle::zeros(config(2)).unwrap();
    let bank = compute_mean_bank(&m, &[vec![0, 3, 2]]).unwrap();
    assert_eq!(bank.head_means.len(), 4);
    assert!(bank.head_means.values().flatten().all(|&v| v == 0.0));
    assert!(!bank.reference_id.is_empty());
}

#[test]
fn duplicating_the_reference_keeps_the_means() {
    let m = random_model(2, 1);
    let reference = vec![vec![1, 2, 3], vec![4, 0]];
    let doubled: Vec<Vec<usize>> = reference.iter().chain(&reference).cloned().collect();
    let a = compute_mean_bank(&m, &reference).unwrap();
    let b = compute_mean_bank(&m, &doubled).unwrap();
    for (h, v) in &a.head_means {
        for (x, y) in v.iter().zip(&b.head_means[h]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for (n, v) in &a.neuron_means {
        assert!((v - b.neuron_means[n]).abs() < 1e-12);
    }
}

#[test]
fn two_single_token_sequences_average() {
    let m = random_model(2, 2);
    let capture = CaptureSpec::none().with_head_outputs();
    let out = |t: usize| forward(&m, &[t], &capture, &InterventionSpec::none()).unwrap().head_outputs;
    let (v1, v2) = (out(1), out(4));
    let bank = compute_mean_bank(&m, &[vec![1], vec![4]]).unwrap();
    for (h, mean) in &bank.head_means {
        for c in 0..4 {
            let want = (v1[h].get(0, c) + v2[h].get(0, c)) / 2.0;
            assert!((mean[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_reference_is_rejected() {
    let m = random_model(1, 3);
    assert!(matches!(compute_mean_bank(&m, &[]), Err(Error::InvalidInput(_))));
}

#[test]
fn empty_intervention_is_bit_identical() {
    let m = random_model(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let capture = CaptureSpec::all().with_final_mlp();
    for _ in 0..100 {
        let toks = random_tokens(&mut rng, 12);
        let a = forward(&m, &toks, &capture, &InterventionSpec::none()).unwrap();
        let b = ablated_forward(&m, &toks, &InterventionSpec::none(), &capture).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn self_referenced_ablation_reproduces_a_single_token() {
    let m = random_model(2, 6);
    let bank = compute_mean_bank(&m, &[vec![3]]).unwrap();
    let spec = InterventionSpec::ablate_heads(bank, m.config.heads());
    let a = forward(&m, &[3], &CaptureSpec::none(), &InterventionSpec::none()).unwrap();
    let b = ablated_forward(&m, &[3], &spec, &CaptureSpec::none()).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn ablated_head_outputs_equal_the_mean_everywhere() {
    let m = random_model(2, 7);
    let bank = compute_mean_bank(&m, &[vec![0, 1, 2, 3], vec![5, 4]]).unwrap();
    let h = HeadId::new(1, 1);
    let spec = InterventionSpec::ablate_heads(bank.clone(), [h]);
    let r = ablated_forward(&m, &[2, 2, 5, 1, 0], &spec, &CaptureSpec::none().with_head_outputs()).unwrap();
    let out = &r.head_outputs[&h];
    for row in 0..out.rows() {
        assert_eq!(out.row(row), bank.head_means[&h].as_slice());
    }
}

#[test]
fn ablating_a_whole_layer_removes_context() {
    // One layer, no MLP: with every head mean-ablated the logits at a
    // position depend only on that position's token.
    let mut m = random_model(1, 8);
    m.set_tensor(&names::w_out(0), vec![0.0; 8 * 5]).unwrap();
    m.set_tensor(&names::b_out(0), vec![0.0; 8]).unwrap();
    let bank = compute_mean_bank(&m, &[vec![1, 2, 3, 4, 5]]).unwrap();
    let spec = InterventionSpec::ablate_heads(bank, m.config.heads());
    let a = ablated_forward(&m, &[0, 1, 4], &spec, &CaptureSpec::none()).unwrap();
    let b = ablated_forward(&m, &[5, 3, 4], &spec, &CaptureSpec::none()).unwrap();
    for (x, y) in a.logits.row(2).iter().zip(b.logits.row(2)) {
        assert!((x - y).abs() < 1e-12);
    }
    let c = forward(&m, &[0, 1, 4], &CaptureSpec::none(), &InterventionSpec::none()).unwrap();
    let d = forward(&m, &[5, 3, 4], &CaptureSpec::none(), &InterventionSpec::none()).unwrap();
    assert!(c.logits.row(2).iter().zip(d.logits.row(2)).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn disjoint_neuron_ablation_and_boost_commute() {
    let m = random_model(1, 9);
    let bank = compute_mean_bank(&m, &[vec![1, 2, 3]]).unwrap();
    let toks = [4, 0, 2, 2];
    let capture = CaptureSpec::none().with_final_mlp();
    let base = forward(&m, &toks, &capture, &InterventionSpec::none()).unwrap();
    let mut spec = InterventionSpec::ablate_neurons(bank.clone(), [1]);
    spec.boost_neurons = BTreeMap::from([(3, 2.5)]);
    let r = ablated_forward(&m, &toks, &spec, &capture).unwrap();
    let (pre0, pre) = (base.final_mlp_preact.unwrap(), r.final_mlp_preact.unwrap());
    for row in 0..toks.len() {
        for n in 0..5 {
            let want = match n {
                1 => bank.neuron_means[&1],
                3 => 2.5 * pre0.get(row, 3),
                _ => pre0.get(row, n),
            };
            assert_eq!(pre.get(row, n), want);
        }
    }
}

#[test]
fn missing_mean_is_rejected() {
    let m = random_model(2, 10);
    let mut bank = compute_mean_bank(&m, &[vec![1, 2]]).unwrap();
    bank.head_means.remove(&HeadId::new(0, 1));
    let spec = InterventionSpec::ablate_heads(bank, [HeadId::new(0, 1)]);
    let err = ablated_forward(&m, &[1], &spec, &CaptureSpec::none()).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)), "{err}");
    let mut no_bank = InterventionSpec::none();
    no_bank.ablate_neurons.insert(0);
    assert!(ablated_forward(&m, &[1], &no_bank, &CaptureSpec::none()).is_err());
}

#[test]
fn wired_head_ablation_breaks_copying() {
    let toy = build_induction_toy(32, 64, 42).unwrap();
    let reference = probe_sequences(32, ProbeParams::new(8, 16, 99));
    let bank = compute_mean_bank(&toy.model, &reference).unwrap();
    let spec = InterventionSpec::ablate_heads(bank, [toy.induction_head]);
    let (mut hit, mut total) = (0, 0);
    for s in probe_sequences(32, ProbeParams::new(8, 16, 7)) {
        let r = ablated_forward(&toy.model, &s, &spec, &CaptureSpec::none()).unwrap();
        for j in 1..8 {
            total += 1;
            hit += usize::from(argmax(r.logits.row(8 + j - 1)) == s[j]);
        }
    }
    let ablated = hit as f64 / total as f64;
    assert!(ablated < 0.2, "ablated copy accuracy {ablated}");
    assert!(copy_accuracy(&toy.model, 8, 16, 7) >= 0.95);
}

#[test]
fn delta_report_identity_and_hand_cases() {
    let toy = build_induction_toy(32, 64, 42).unwrap();
    let trace = generate(&toy.model, &[0, 4, 9, 13, 4], 3, Decoding::Greedy).unwrap();
    let capture = CaptureSpec::none().with_final_mlp();
    let pass = forward(&toy.model, &trace.tokens(), &capture, &InterventionSpec::none()).unwrap();
    let d = delta_report(&trace, &pass, &pass, &[0, 1]).unwrap();
    assert_eq!(d.nll_change.value, 0.0);
    assert_eq!(d.entropy_change.value, 0.0);
    assert_eq!(d.entropy_delta, 0.0);
    assert_eq!(d.neuron_l2_delta, Some(0.0));

    let c = Change::percent(2.0, 3.0);
    assert!((c.value - 50.0).abs() < 1e-12 && !c.absolute);
    let z = Change::percent(0.0, 0.5);
    assert!(z.absolute && z.value == 0.5);

    let other = forward(&toy.model, &[0, 4, 9, 13, 4, 1, 1, 1], &capture, &InterventionSpec::none()).unwrap();
    assert!(delta_report(&trace, &pass, &other, &[]).is_err());
}

#[test]
fn wired_head_ablation_raises_response_nll() {
    let toy = build_induction_toy(32, 64, 42).unwrap();
    let corpus = synth_corpus(&toy.model, &SynthCorpusSpec::new(6, 1, 3)).unwrap();
    let reference: Vec<Vec<usize>> = corpus.iter().map(|t| t.tokens()).collect();
    let bank = compute_mean_bank(&toy.model, &reference).unwrap();
    let spec = InterventionSpec::ablate_heads(bank, [toy.induction_head]);
    for t in corpus.iter().filter(|t| t.label == Some(Label::Grounded)) {
        let pre = forward(&toy.model, &t.tokens(), &CaptureSpec::none(), &InterventionSpec::none()).unwrap();
        let post = ablated_forward(&toy.model, &t.tokens(), &spec, &CaptureSpec::none()).unwrap();
        let d = delta_report(t, &pre, &post, &[]).unwrap();
        assert!(d.nll_change.value > 0.0, "{}: {:?}", t.id, d.nll_change);
    }
}

#[test]
fn ablating_a_boosted_entropy_neuron_lowers_entropy() {
    let toy = build_entropy_neuron_toy(8, 16, 42).unwrap();
    let toks = [3, 1, 4, 1, 5];
    let reference: Vec<Vec<usize>> = (0..8).map(|t| vec![t, (t + 3) % 8]).collect();
    let bank = compute_mean_bank(&toy.model, &reference).unwrap();
    let boosted = forward(&toy.model, &toks, &CaptureSpec::none(), &InterventionSpec::boost(toy.neuron, 100.0)).unwrap();
    let ablated = ablated_forward(
        &toy.model,
        &toks,
        &InterventionSpec::ablate_neurons(bank, [toy.neuron]),
        &CaptureSpec::none(),
    )
    .unwrap();
    for i in 0..toks.len() {
        assert!(entropy(boosted.probabilities.row(i)) - entropy(ablated.probabilities.row(i)) > 0.0);
    }
}

#[test]
fn mean_bank_round_trips() {
    let m = random_model(2, 11);
    let bank = compute_mean_bank(&m, &[vec![1, 2, 3]]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("means.json");
    save_means(&bank, &path).unwrap();
    assert_eq!(load_means(&path).unwrap(), bank);
    let text = std::fs::read_to_string(&path).unwrap().replace("MECHUQ-MEANS-v1", "MECHUQ-MODEL-v1");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_means(&path), Err(Error::Format(_))));
}
