// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::{make_trace, ranking, sink_attention, uniform_causal};
use mechuq::model::{build_induction_toy, HeadId};
use mechuq::synth::{synth_corpus, SynthCorpusSpec};
use mechuq::tensor::Matrix;
use mechuq::trace::{Label, StepData};
use mechuq::uq::*;
use proptest::prelude::*;

const H0: HeadId = HeadId { layer: 0, head: 0 };
const H1: HeadId = HeadId { layer: 0, head: 1 };

fn one_hot(v: usize, i: usize) -> Vec<f64> {
    let mut d = vec![0.0; v];
    d[i] = 1.0;
    d
}

fn with_attention(n_prompt: usize, dists: Vec<Vec<f64>>, heads: &[(HeadId, Matrix)]) -> mechuq::trace::GenerationTrace {
    let response = dists.iter().map(|d| common::argmax(d)).collect();
    make_trace(vec![0; n_prompt], response, dists, heads.iter().cloned().collect(), None, None)
}

#[test]
fn token_entropies_hand_cases() {
    let t = with_attention(1, vec![one_hot(4, 2), vec![0.25; 4]], &[]);
    let e = token_entropies(&t).unwrap();
    assert_eq!(e[0], 0.0);
    assert!((e[1] - 4f64.ln()).abs() < 1e-12);
    let bad = with_attention(1, vec![vec![0.5, 0.6]], &[]);
    assert!(token_entropies(&bad).is_err());
}

#[test]
fn sink_rate_hand_cases() {
    assert!((sink_rate(&sink_attention(6), 3).unwrap() - 1.0).abs() < 1e-15);
    let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![0.2, 0.3, 0.5]]).unwrap();
    assert!((sink_rate(&a, 2).unwrap() - 0.5).abs() < 1e-12);
    assert!((sink_rate(&uniform_causal(2), 1).unwrap() - 0.5).abs() < 1e-15);
    assert!(sink_rate(&a, 3).is_err());
    assert!(sink_rate(&a, 0).is_err());
    assert!(sink_rate(&Matrix::zeros(2, 3), 1).is_err());
}

#[test]
fn head_sink_rates_follow_ranking_order() {
    let t = with_attention(3, vec![one_hot(3, 0); 2], &[(H0, uniform_causal(5)), (H1, sink_attention(5))]);
    let r = ranking(&[(H1, 0.9), (H0, 0.1)]);
    assert_eq!(head_sink_rates(&t, &r, 1).unwrap(), vec![1.0]);
    let both = head_sink_rates(&t, &r, 2).unwrap();
    assert_eq!(both[0], 1.0);
    assert!(both[1] < 1.0);
    assert!(head_sink_rates(&t, &r, 3).is_err());
    let missing = ranking(&[(HeadId { layer: 1, head: 0 }, 1.0)]);
    assert!(head_sink_rates(&t, &missing, 1).is_err());
}

#[test]
fn wired_head_sinks_more_when_hallucinating() {
    let toy = build_induction_toy(32, 64, 42).unwrap();
    let corpus = synth_corpus(&toy.model, &SynthCorpusSpec::new(8, 8, 3)).unwrap();
    let r = ranking(&[(toy.induction_head, 1.0)]);
    let mean = |label: Label| {
        let v: Vec<f64> = corpus
            .iter()
            .filter(|t| t.label == Some(label))
            .map(|t| head_sink_rates(t, &r, 1).unwrap()[0])
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(Label::Grounded) < mean(Label::Hallucinated));
}

#[test]
fn aggregate_and_transform_cases() {
    let v = [0.2, 0.8, 0.5];
    assert!((aggregate(&v, Aggregation::Mean).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(aggregate(&v, Aggregation::Min).unwrap(), 0.2);
    assert_eq!(aggregate(&v, Aggregation::Max).unwrap(), 0.8);
    assert!(aggregate(&[], Aggregation::Mean).is_err());
    assert_eq!(gating_transform(0.3, Transform::Identity), 0.3);
    assert_eq!(gating_transform(0.3, Transform::Trivial), 1.0);
    assert_eq!(gating_transform(1.0, Transform::Tanh), 1f64.tanh());
    assert_eq!(gating_transform(1.0, Transform::Softsign), 0.5);
}

#[test]
fn intrygue_hand_cases() {
    let minmax = intrygue_from_parts(&[0.5, 0.6], &[1.0, 1.2], IntrygueConfig::minmax(2)).unwrap();
    assert!((minmax - 0.6).abs() < 1e-12);
    let mean = intrygue_from_parts(&[0.5, 0.7], &[0.5, 1.5], IntrygueConfig::mean(2)).unwrap();
    assert!((mean - 0.6).abs() < 1e-12);
    assert_eq!(intrygue_from_parts(&[0.0, 0.0], &[2.0, 3.0], IntrygueConfig::mean(2)).unwrap(), 0.0);
    let trivial = IntrygueConfig::mean(2).with_transform(Transform::Trivial);
    assert_eq!(intrygue_from_parts(&[0.0, 0.0], &[2.0, 3.0], trivial).unwrap(), 2.5);
}

#[test]
fn intrygue_on_a_trace_reports_components() {
    let t = with_attention(3, vec![vec![0.25; 4], one_hot(4, 1)], &[(H0, uniform_causal(5)), (H1, sink_attention(5))]);
    let r = ranking(&[(H1, 0.9), (H0, 0.1)]);
    let s = intrygue(&t, &r, IntrygueConfig::minmax(1)).unwrap();
    assert_eq!(s.method, "intrygue-minmax");
    assert!((s.value - 4f64.ln()).abs() < 1e-12);
    assert_eq!(s.components["sink_agg"], 1.0);
    assert!(s.components.contains_key(&format!("sink_{H1}")));
}

#[test]
fn baselines_on_deterministic_responses() {
    let t = with_attention(1, vec![one_hot(3, 1); 3], &[]);
    for (b, want) in [
        (Baseline::MaxEntropy, 0.0),
        (Baseline::LnEntropy, 0.0),
        (Baseline::MaxProb, 0.0),
        (Baseline::Perplexity, 1.0),
    ] {
        let s = baseline_score(&t, b).unwrap();
        assert!((s.value - want).abs() < 1e-12, "{}", b.name());
        assert!(!s.floored);
    }
}

#[test]
fn baselines_hand_cases() {
    let mut t = with_attention(1, vec![vec![0.5, 0.5]; 2], &[]);
    t.chosen_logprobs = vec![-1.0, -1.0];
    assert!((baseline_score(&t, Baseline::Perplexity).unwrap().value - std::f64::consts::E).abs() < 1e-12);
    t.steps = StepData::Compressed { token_entropies: vec![0.5, 1.5] };
    assert_eq!(baseline_score(&t, Baseline::LnEntropy).unwrap().value, 1.0);
    assert_eq!(baseline_score(&t, Baseline::MaxEntropy).unwrap().value, 1.5);
    t.chosen_logprobs = vec![f64::NEG_INFINITY, -1.0];
    let s = baseline_score(&t, Baseline::MaxProb).unwrap();
    assert!(s.floored);
    assert!((s.value - 1.0).abs() < 1e-12);
}

#[test]
fn method_names_parse_back() {
    let mut names: Vec<String> = Baseline::ALL.iter().map(|b| b.name().to_string()).collect();
    names.extend(["intrygue-minmax", "intrygue-mean", "sink-mean", "sink-min"].map(String::from));
    for t in Transform::ALL {
        names.push(IntrygueConfig::mean(3).with_transform(t).name());
        names.push(IntrygueConfig::minmax(3).with_transform(t).name());
    }
    for n in names {
        assert_eq!(Method::parse(&n, 3).unwrap().name(), n);
    }
    assert!(Method::parse("nonsense", 3).is_err());
}

#[test]
fn score_table_round_trips() {
    let t = with_attention(3, vec![vec![0.25; 4], one_hot(4, 1)], &[(H0, uniform_causal(5)), (H1, sink_attention(5))]);
    let r = ranking(&[(H1, 0.9), (H0, 0.1)]);
    let methods = [Method::parse("intrygue-mean", 2).unwrap(), Method::Baseline(Baseline::Perplexity)];
    let rows = score_traces(&[t], &r, &methods).unwrap();
    let parsed = scores_from_csv(&scores_to_csv(&rows).unwrap()).unwrap();
    assert_eq!(parsed.len(), 2);
    for (row, p) in rows.iter().zip(&parsed) {
        assert_eq!(p.method, row.score.method);
        assert_eq!(p.value, row.score.value);
        assert_eq!(p.label, None);
    }
    assert!(scores_from_csv("a,b,c,d\n").is_err());
}

/// Random causal row-stochastic matrix.
fn attention(max_n: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_n).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, n), n).prop_map(move |raw| {
            let rows: Vec<Vec<f64>> = raw
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let s: f64 = r[..=i].iter().sum();
                    (0..r.len()).map(|j| if j <= i { r[j] / s } else { 0.0 }).collect()
                })
                .collect();
            Matrix::from_rows(&rows).unwrap()
        })
    })
}

fn distribution(v: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, v).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn sink_rate_matches_brute_force(a in attention(10), frac in 0.0f64..1.0) {
        let big_n = a.rows();
        let n = 1 + ((big_n - 2) as f64 * frac) as usize;
        let got = sink_rate(&a, n).unwrap();
        let mut best = 0.0f64;
        for j in 0..big_n {
            let rows: Vec<usize> = (big_n - n..big_n).filter(|&i| i >= j).collect();
            let s: f64 = rows.iter().map(|&i| a.get(i, j)).sum();
            best = best.max(s / rows.len() as f64);
        }
        prop_assert!((got - best).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
    }

    #[test]
    fn intrygue_is_monotone_in_sinks(
        s in prop::collection::vec(0.0f64..1.0, 1..6),
        bump in 0.0f64..0.5,
        e in prop::collection::vec(0.0f64..3.0, 1..6),
    ) {
        let higher: Vec<f64> = s.iter().map(|x| x + bump).collect();
        for cfg in [IntrygueConfig::mean(1), IntrygueConfig::minmax(1)] {
            for t in [Transform::Identity, Transform::Tanh, Transform::Softsign] {
                let c = cfg.with_transform(t);
                prop_assert!(intrygue_from_parts(&higher, &e, c).unwrap() >= intrygue_from_parts(&s, &e, c).unwrap() - 1e-12);
            }
        }
    }

    #[test]
    fn trivial_transform_is_the_entropy_aggregate(
        s in prop::collection::vec(0.0f64..1.0, 1..6),
        e in prop::collection::vec(0.0f64..3.0, 1..6),
    ) {
        let c = IntrygueConfig::mean(1).with_transform(Transform::Trivial);
        prop_assert_eq!(intrygue_from_parts(&s, &e, c).unwrap(), aggregate(&e, Aggregation::Mean).unwrap());
    }

    #[test]
    fn head_order_does_not_change_minmax(s in prop::collection::vec(0.0f64..1.0, 1..6), e in prop::collection::vec(0.0f64..3.0, 1..6)) {
        let mut rev = s.clone();
        rev.reverse();
        let c = IntrygueConfig::minmax(1);
        prop_assert_eq!(intrygue_from_parts(&s, &e, c).unwrap(), intrygue_from_parts(&rev, &e, c).unwrap());
    }

    #[test]
    fn entropy_is_bounded(d in distribution(7)) {
        let t = with_attention(1, vec![d], &[]);
        let e = token_entropies(&t).unwrap()[0];
        prop_assert!(e >= -1e-12 && e <= 7f64.ln() + 1e-12);
    }

    #[test]
    fn max_prob_reads_only_chosen_tokens(a in distribution(5), b in distribution(5)) {
        let mut ta = with_attention(1, vec![a.clone()], &[]);
        let mut tb = with_attention(1, vec![b], &[]);
        tb.response_tokens = ta.response_tokens.clone();
        let lp = a[ta.response_tokens[0]].ln();
        ta.chosen_logprobs = vec![lp];
        tb.chosen_logprobs = vec![lp];
        prop_assert_eq!(
            baseline_score(&ta, Baseline::MaxProb).unwrap().value,
            baseline_score(&tb, Baseline::MaxProb).unwrap().value
        );
    }
}

#[test]
fn unused_heads_are_ignored() {
    let mut att = BTreeMap::new();
    att.insert(H0, sink_attention(4));
    att.insert(H1, Matrix::zeros(4, 4));
    let t = make_trace(vec![0, 1], vec![2, 2], vec![one_hot(3, 2); 2], att, None, None);
    assert_eq!(head_sink_rates(&t, &ranking(&[(H0, 1.0)]), 1).unwrap(), vec![1.0]);
}
