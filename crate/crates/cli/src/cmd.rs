// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mechuq::detect::{
    rank_entropy_neurons, rank_induction_heads, HeadRanking, NeuronRanking, ProbeParams,
};
use mechuq::eval::{
    digest, evaluate_method, head_neuron_correlation_study, quadrant_analysis, select_k,
    split_indices, EvalReport, MethodScores,
};
use mechuq::instrument::{
    ablated_forward, compute_mean_bank, delta_report, load_means, save_means, CaptureSpec,
    InterventionSpec,
};
use mechuq::model::{
    build_composite_toy, build_entropy_neuron_toy, build_induction_toy, generate, io::load_model,
    io::save_model, Decoding, HeadId,
};
use mechuq::synth::{synth_corpus, SynthCorpusSpec};
use mechuq::trace::{read_trace, write_trace, GenerationTrace, Label};
use mechuq::uq::{
    score_trace, score_traces, scores_from_csv, scores_to_csv, Aggregation, IntrygueConfig, Method,
    Transform,
};
use mechuq::write_atomic;
use rayon::prelude::*;

use crate::*;

const DEFAULT_SEED: u64 = 42;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("configuring worker pool")?;
    }
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Toy(a) => toy(a, seed),
        Command::DetectHeads(a) => detect_heads(a, seed),
        Command::DetectNeurons(a) => detect_neurons(a),
        Command::Means(a) => means(a),
        Command::Generate(a) => generate_cmd(a, seed),
        Command::Synth(a) => synth(a, seed),
        Command::Score(a) => score(a),
        Command::Ablate(a) => ablate(a),
        Command::Study(s) => study(s),
        Command::Eval(a) => eval(a),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn toy(a: ToyArgs, seed: u64) -> Result<()> {
    let (model, info) = match a.kind {
        ToyKind::Induction | ToyKind::Composite => {
            let t = if matches!(a.kind, ToyKind::Induction) {
                build_induction_toy(a.vocab, a.d_model, seed)?
            } else {
                build_composite_toy(a.vocab, a.d_model, seed)?
            };
            let ids = |v: &[HeadId]| v.iter().map(ToString::to_string).collect::<Vec<_>>();
            let info = serde_json::json!({
                "previous_token_head": t.previous_token_head.to_string(),
                "second_previous_head": t.second_previous_head.to_string(),
                "induction_head": t.induction_head.to_string(),
                "extra_induction_heads": ids(&t.extra_induction_heads),
                "inert_heads": ids(&t.inert_heads),
                "entropy_neuron": t.entropy_neuron,
                "bos_token": t.bos_token,
            });
            (t.model, info)
        }
        ToyKind::EntropyNeuron => {
            let t = build_entropy_neuron_toy(a.vocab, a.d_model, seed)?;
            (t.model, serde_json::json!({ "entropy_neuron": t.neuron }))
        }
    };
    save_model(&model, &a.output)?;
    if let Some(p) = a.info {
        write_json(&p, &info)?;
    }
    Ok(())
}

fn detect_heads(a: DetectHeadsArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model)?;
    let params = ProbeParams {
        l: a.l,
        trials: a.trials,
        seed,
        bos: a.bos,
    };
    let mut ranking = rank_induction_heads(&model, params)?;
    if let Some(k) = a.top_k {
        if k == 0 {
            bail!("--top-k must be at least 1");
        }
        ranking.entries.truncate(k);
    }
    ranking.save(&a.output)?;
    Ok(())
}

fn detect_neurons(a: DetectNeuronsArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    rank_entropy_neurons(&model, a.top_n)?.save(&a.output)?;
    Ok(())
}

/// Trace files of a directory in name order, with a digest of their bytes.
fn load_corpus(dir: &Path) -> Result<(Vec<GenerationTrace>, String)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading trace directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        bail!("no trace files (*.json) in {}", dir.display());
    }
    let mut all = Vec::new();
    for p in &paths {
        all.extend(fs::read(p)?);
    }
    let traces = paths
        .par_iter()
        .map(|p| read_trace(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok((traces, digest(&all)))
}

fn load_heads(path: &Path) -> Result<(HeadRanking, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ranking = HeadRanking::from_json(std::str::from_utf8(&bytes)?)
        .with_context(|| format!("parsing head ranking {}", path.display()))?;
    Ok((ranking, digest(&bytes)))
}

fn means(a: MeansArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (traces, _) = load_corpus(&a.reference)?;
    let reference: Vec<Vec<usize>> = traces.iter().map(GenerationTrace::tokens).collect();
    save_means(&compute_mean_bank(&model, &reference)?, &a.output)?;
    Ok(())
}

fn generate_cmd(a: GenerateArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model)?;
    let decoding = match a.temperature {
        None => Decoding::Greedy,
        Some(t) => Decoding::Temperature { t, seed },
    };
    let mut trace = generate(&model, &a.prompt, a.max_new, decoding)?;
    trace.id = a.id;
    trace.model_id = model.digest();
    trace.label = a.label.map(Label::from_u8).transpose()?;
    write_trace(&trace, &a.output)?;
    Ok(())
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let model = load_model(&a.model)?;
    let spec = SynthCorpusSpec {
        n_grounded: a.grounded,
        n_hallucinated: a.hallucinated,
        context_length: a.context_length,
        seed,
        response_length: a.response_length,
    };
    let corpus = synth_corpus(&model, &spec)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    corpus
        .par_iter()
        .try_for_each(|t| write_trace(t, a.output.join(format!("{}.json", t.id))))?;
    Ok(())
}

fn parse_methods(names: &[String], k: usize) -> Result<Vec<Method>> {
    names.iter().map(|n| Ok(Method::parse(n, k)?)).collect()
}

fn score(a: ScoreArgs) -> Result<()> {
    let (traces, _) = load_corpus(&a.traces)?;
    let (heads, _) = load_heads(&a.heads)?;
    let methods = parse_methods(&a.method, a.k)?;
    let rows = score_traces(&traces, &heads, &methods)?;
    write_atomic(&a.output, scores_to_csv(&rows)?.as_bytes())?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let trace = read_trace(&a.input)?;
    let mut spec = InterventionSpec::none();
    for h in &a.heads {
        spec.ablate_heads.insert(h.parse()?);
    }
    spec.ablate_neurons.extend(a.neurons.iter().copied());
    for b in &a.boost {
        let (n, f) = b
            .split_once(':')
            .with_context(|| format!("--boost expects NEURON:FACTOR, got {b:?}"))?;
        spec.boost_neurons.insert(
            n.parse().context("boost neuron")?,
            f.parse().context("boost factor")?,
        );
    }
    if !spec.ablate_heads.is_empty() || !spec.ablate_neurons.is_empty() {
        let path = a.means.as_ref().context("ablation needs --means")?;
        spec.means = Some(load_means(path)?);
    }
    let capture = if a.track_neurons.is_empty() {
        CaptureSpec::none()
    } else {
        CaptureSpec::none().with_final_mlp()
    };
    let tokens = trace.tokens();
    let pre = ablated_forward(&model, &tokens, &InterventionSpec::none(), &capture)?;
    let post = ablated_forward(&model, &tokens, &spec, &capture)?;
    write_json(
        &a.output,
        &delta_report(&trace, &pre, &post, &a.track_neurons)?,
    )
}

fn fractions(s: &SplitArgs) -> Result<[f64; 3]> {
    match s.fractions.as_slice() {
        &[a, b, c] => Ok([a, b, c]),
        _ => bail!("--fractions needs exactly three values"),
    }
}

fn seeds(s: &SplitArgs) -> Result<Vec<u64>> {
    if s.splits == 0 {
        bail!("--splits must be at least 1");
    }
    Ok((0..s.splits as u64).map(|i| s.seed0 + i).collect())
}

fn labels(traces: &[GenerationTrace]) -> Result<Vec<u8>> {
    Ok(traces
        .iter()
        .map(|t| t.require_label().map(Label::as_u8))
        .collect::<mechuq::Result<_>>()?)
}

fn method_values(traces: &[GenerationTrace], heads: &HeadRanking, m: Method) -> Result<Vec<f64>> {
    Ok(traces
        .par_iter()
        .map(|t| score_trace(t, heads, m).map(|s| s.value))
        .collect::<mechuq::Result<_>>()?)
}

fn study(s: Study) -> Result<()> {
    match s {
        Study::SinkVsLabel {
            corpus,
            split,
            k,
            output,
        } => {
            let (traces, heads, mut report) = open_study(&corpus, &split)?;
            let y = labels(&traces)?;
            let m = Method::SinkRate {
                k,
                f: Aggregation::Mean,
            };
            let v = method_values(&traces, &heads, m)?;
            let e = evaluate_method(&v, &y, report.fractions, &report.seeds)?;
            report.methods.insert(format!("{}@k={k}", m.name()), e);
            write_json(&output, &report)
        }
        Study::HeadNeuronCorr {
            corpus,
            split,
            neurons,
            top_n,
            k,
            output,
        } => {
            let (traces, heads, mut report) = open_study(&corpus, &split)?;
            let text = fs::read_to_string(&neurons)
                .with_context(|| format!("reading {}", neurons.display()))?;
            report
                .input_digests
                .insert("neurons".into(), digest(text.as_bytes()));
            let ranking = NeuronRanking::from_json(&text)?;
            let ids = ranking.top(top_n)?;
            for (n, c) in head_neuron_correlation_study(&traces, &heads, k, &ids)? {
                report
                    .correlations
                    .insert(format!("sink-mean@k={k}~neuron{n}"), c);
            }
            write_json(&output, &report)
        }
        Study::GatingSweep {
            corpus,
            split,
            k,
            output,
        } => {
            let (traces, heads, mut report) = open_study(&corpus, &split)?;
            let y = labels(&traces)?;
            for base in [IntrygueConfig::mean(k), IntrygueConfig::minmax(k)] {
                for t in Transform::ALL {
                    let cfg = base.with_transform(t);
                    let v = method_values(&traces, &heads, Method::Intrygue(cfg))?;
                    report.methods.insert(
                        cfg.name(),
                        evaluate_method(&v, &y, report.fractions, &report.seeds)?,
                    );
                }
            }
            write_json(&output, &report)
        }
        Study::KSweep {
            corpus,
            split,
            ks,
            preset,
            output,
        } => {
            let (traces, heads, mut report) = open_study(&corpus, &split)?;
            let y = labels(&traces)?;
            let base = match Method::parse(&preset, 1)? {
                Method::Intrygue(c) => c,
                _ => bail!("--preset must name a gated method, got {preset:?}"),
            };
            for &k in &ks {
                let v = method_values(
                    &traces,
                    &heads,
                    Method::Intrygue(IntrygueConfig { k, ..base }),
                )?;
                report.methods.insert(
                    format!("{}@k={k}", base.name()),
                    evaluate_method(&v, &y, report.fractions, &report.seeds)?,
                );
            }
            let sp = split_indices(traces.len(), report.fractions, report.seeds[0])?;
            let val: Vec<GenerationTrace> = sp.val.iter().map(|&i| traces[i].clone()).collect();
            report.chosen_k = Some(select_k(&val, &heads, &ks, base)?);
            report.selection_split = Some(format!("validation split of seed {}", report.seeds[0]));
            write_json(&output, &report)
        }
        Study::Quadrant {
            corpus,
            split,
            a,
            b,
            k,
            output,
        } => {
            let (traces, heads, mut report) = open_study(&corpus, &split)?;
            let y = labels(&traces)?;
            let (ma, mb) = (Method::parse(&a, k)?, Method::parse(&b, k)?);
            let va = method_values(&traces, &heads, ma)?;
            let vb = method_values(&traces, &heads, mb)?;
            let sp = split_indices(traces.len(), report.fractions, report.seeds[0])?;
            let pick = |v: &[f64], ix: &[usize]| ix.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let (na, nb) = (ma.name(), mb.name());
            let q = quadrant_analysis(
                MethodScores {
                    name: &na,
                    val: &pick(&va, &sp.val),
                    test: &pick(&va, &sp.test),
                },
                MethodScores {
                    name: &nb,
                    val: &pick(&vb, &sp.val),
                    test: &pick(&vb, &sp.test),
                },
                &pick_u8(&y, &sp.val),
                &pick_u8(&y, &sp.test),
            )?;
            report.methods.insert(
                na,
                evaluate_method(&va, &y, report.fractions, &report.seeds)?,
            );
            report.methods.insert(
                nb,
                evaluate_method(&vb, &y, report.fractions, &report.seeds)?,
            );
            report.quadrant = Some(q);
            report.selection_split = Some(format!(
                "thresholds fit on validation split of seed {}",
                report.seeds[0]
            ));
            write_json(&output, &report)
        }
    }
}

fn pick_u8(v: &[u8], ix: &[usize]) -> Vec<u8> {
    ix.iter().map(|&i| v[i]).collect()
}

fn open_study(
    c: &CorpusArgs,
    split: &SplitArgs,
) -> Result<(Vec<GenerationTrace>, HeadRanking, EvalReport)> {
    let (traces, traces_digest) = load_corpus(&c.traces)?;
    let (heads, heads_digest) = load_heads(&c.heads)?;
    let mut report = EvalReport::new(fractions(split)?, seeds(split)?, traces.len());
    report.input_digests.insert("traces".into(), traces_digest);
    report.input_digests.insert("heads".into(), heads_digest);
    Ok((traces, heads, report))
}

fn eval(a: EvalArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
    let rows = scores_from_csv(&text)?;
    let mut by_method: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for r in rows {
        let label = r.label.with_context(|| {
            format!(
                "trace {} has no label; evaluation needs labelled traces",
                r.trace_id
            )
        })?;
        let e = by_method.entry(r.method).or_default();
        e.0.push(r.value);
        e.1.push(label);
    }
    if by_method.is_empty() {
        bail!("score table {} has no rows", a.scores.display());
    }
    let fr = fractions(&a.split)?;
    let sd = seeds(&a.split)?;
    let n_items = by_method.values().next().map_or(0, |v| v.0.len());
    let mut report = EvalReport::new(fr, sd, n_items);
    report
        .input_digests
        .insert("scores".into(), digest(text.as_bytes()));
    for (m, (v, y)) in by_method {
        if v.len() != n_items {
            bail!("method {m} has {} rows but others have {n_items}", v.len());
        }
        report
            .methods
            .insert(m, evaluate_method(&v, &y, report.fractions, &report.seeds)?);
    }
    report.save(&a.output)?;
    Ok(())
}
