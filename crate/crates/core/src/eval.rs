// SPDX-License-Identifier: MIT OR Apache-2.0

//! Statistics and evaluation protocol.
//!
//! AUROC treats label 1 (hallucinated) as the positive class and larger
//! scores as more uncertain. The split protocol shuffles with a seed and
//! cuts contiguous train/validation/test blocks; results over several seeds
//! are reported as mean ± sample standard deviation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{neuron_activation_score, HeadRanking};
use crate::error::{Error, Result};
use crate::trace::GenerationTrace;
use crate::uq::{aggregate, head_sink_rates, intrygue, Aggregation, IntrygueConfig};

pub const EVAL_SCHEMA: &str = "MECHUQ-EVAL-v1";
/// Default train/validation/test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.4, 0.4, 0.2];
/// Seeds of the five-run protocol.
pub const DEFAULT_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

/// Scores paired with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub method: String,
    pub pairs: Vec<(f64, u8)>,
}

impl LabeledScores {
    pub fn new(method: impl Into<String>, scores: &[f64], labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("labels must be 0 or 1, got {l}")));
        }
        Ok(Self {
            method: method.into(),
            pairs: scores.iter().copied().zip(labels.iter().copied()).collect(),
        })
    }

    pub fn auroc(&self) -> Result<f64> {
        let (s, l): (Vec<f64>, Vec<u8>) = self.pairs.iter().copied().unzip();
        auroc(&s, &l)
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
///
/// ```
/// use mechuq::eval::auroc;
/// let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
/// assert!((a - 0.75).abs() < 1e-12);
/// ```
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("AUROC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = r_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Result of a two-sided Mann-Whitney U test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UTest {
    /// `U` of the first sample.
    pub u: f64,
    pub p_two_sided: f64,
    /// True when the p-value comes from exact enumeration.
    pub exact: bool,
}

/// Largest pooled sample size tested by exact enumeration.
pub const EXACT_LIMIT: usize = 10;

/// Mann-Whitney U test of `a` against `b`.
///
/// `U = R_a − |a|(|a|+1)/2` from average ranks. For `|a|+|b| ≤ 10` the
/// p-value is exact: the fraction of all ways to assign the pooled ranks to
/// a group of size `|a|` whose `U` is at least as far from `|a||b|/2`.
/// Otherwise a normal approximation with tie and continuity corrections is
/// used.
///
/// ```
/// use mechuq::eval::mann_whitney_u;
/// let t = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
/// assert_eq!(t.u, 0.0);
/// assert!((t.p_two_sided - 1.0 / 3.0).abs() < 1e-12);
/// ```
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<UTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("both samples must be nonempty"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let u_of = |ra: f64| ra - (na * (na + 1)) as f64 / 2.0;
    let u = u_of(ranks[..na].iter().sum());
    let mu = (na * nb) as f64 / 2.0;
    let dev = (u - mu).abs();

    if n <= EXACT_LIMIT {
        let mut hits = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != na {
                continue;
            }
            let ra: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            total += 1;
            if (u_of(ra) - mu).abs() >= dev - 1e-9 {
                hits += 1;
            }
        }
        return Ok(UTest {
            u,
            p_two_sided: hits as f64 / total as f64,
            exact: true,
        });
    }

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if !(var > 0.0) {
        return Ok(UTest {
            u,
            p_two_sided: 1.0,
            exact: false,
        });
    }
    let z = (dev - 0.5).max(0.0) / var.sqrt();
    let p = libm::erfc(z / std::f64::consts::SQRT_2);
    Ok(UTest {
        u,
        p_two_sided: p.clamp(f64::MIN_POSITIVE, 1.0),
        exact: false,
    })
}

/// Pearson correlation of average ranks. Constant input is degenerate.
///
/// ```
/// use mechuq::eval::spearman;
/// let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
/// assert!((r - 0.8).abs() < 1e-12);
/// ```
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::invalid("spearman needs at least 3 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("inputs must be finite"));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "spearman is undefined for constant input".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Indices of a train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `0..n` with `seed` and cut contiguous blocks of the given fractions.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must sum to 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let a = ((n as f64) * fractions[0]).round() as usize;
    let b = (((n as f64) * (fractions[0] + fractions[1])).round() as usize).clamp(a, n);
    let test = idx.split_off(b);
    let val = idx.split_off(a.min(b));
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

/// Partition items into three disjoint sets.
pub fn split<T: Clone>(
    items: &[T],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let s = split_indices(items.len(), fractions, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&s.train), pick(&s.val), pick(&s.test)))
}

fn labels_of(traces: &[GenerationTrace]) -> Result<Vec<u8>> {
    traces
        .iter()
        .map(|t| t.require_label().map(|l| l.as_u8()))
        .collect()
}

/// Validation AUROC of a gated score for each candidate k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    /// `(k, validation AUROC)` in candidate order.
    pub aurocs: Vec<(usize, f64)>,
}

/// The candidate `k` with the highest validation AUROC; ties go to the smallest k.
pub fn select_k(
    val_traces: &[GenerationTrace],
    heads: &HeadRanking,
    candidate_ks: &[usize],
    preset: IntrygueConfig,
) -> Result<KSelection> {
    if candidate_ks.is_empty() {
        return Err(Error::invalid("no candidate k values"));
    }
    let labels = labels_of(val_traces)?;
    let mut aurocs = Vec::with_capacity(candidate_ks.len());
    for &k in candidate_ks {
        let cfg = IntrygueConfig { k, ..preset };
        let scores: Vec<f64> = val_traces
            .par_iter()
            .map(|t| intrygue(t, heads, cfg).map(|s| s.value))
            .collect::<Result<_>>()?;
        aurocs.push((k, auroc(&scores, &labels)?));
    }
    let mut best = aurocs[0];
    for &(k, a) in &aurocs[1..] {
        if a > best.1 || (a == best.1 && k < best.0) {
            best = (k, a);
        }
    }
    Ok(KSelection { k: best.0, aurocs })
}

/// Threshold maximizing accuracy of "score > threshold ⇒ hallucinated".
///
/// Candidates are the midpoints between adjacent distinct sorted scores;
/// accuracy ties go to the lower threshold.
pub fn fit_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape(
            "threshold fitting needs equally many nonempty scores and labels",
        ));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Degenerate(
            "threshold fitting needs both classes in the validation set".into(),
        ));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() == 1 {
        return Ok(sorted[0]);
    }
    let mut best = (f64::NAN, -1.0);
    for w in sorted.windows(2) {
        let thr = (w[0] + w[1]) / 2.0;
        let acc = accuracy(scores, labels, thr);
        if acc > best.1 {
            best = (thr, acc);
        }
    }
    Ok(best.0)
}

fn accuracy(scores: &[f64], labels: &[u8], thr: f64) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s > thr) == (**l == 1))
        .count();
    hits as f64 / scores.len() as f64
}

/// One cell of the 2×2 comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantCell {
    pub count: usize,
    /// Accuracy of method a on the items in this cell, if any.
    pub a_accuracy: Option<f64>,
    pub b_accuracy: Option<f64>,
}

/// Test-set agreement of two thresholded methods.
///
/// `cells[r][c]`: row `r` is a's prediction and column `c` is b's
/// prediction, with 0 = grounded and 1 = hallucinated. The bottom-left cell
/// `cells[1][0]` holds items a calls hallucinated and b calls grounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantTable {
    pub method_a: String,
    pub method_b: String,
    pub threshold_a: f64,
    pub threshold_b: f64,
    pub cells: [[QuadrantCell; 2]; 2],
}

impl QuadrantTable {
    pub fn cell(&self, a_says_hallucinated: bool, b_says_hallucinated: bool) -> &QuadrantCell {
        &self.cells[usize::from(a_says_hallucinated)][usize::from(b_says_hallucinated)]
    }
}

/// Scores of one method on the validation and test sets.
#[derive(Debug, Clone, Copy)]
pub struct MethodScores<'a> {
    pub name: &'a str,
    pub val: &'a [f64],
    pub test: &'a [f64],
}

/// Fit each method's threshold on validation data, then tabulate joint
/// predictions on the test data.
pub fn quadrant_analysis(
    a: MethodScores<'_>,
    b: MethodScores<'_>,
    val_labels: &[u8],
    test_labels: &[u8],
) -> Result<QuadrantTable> {
    if a.val.len() != val_labels.len() || b.val.len() != val_labels.len() {
        return Err(Error::shape(
            "validation scores and labels differ in length",
        ));
    }
    if a.test.len() != test_labels.len() || b.test.len() != test_labels.len() {
        return Err(Error::shape("test scores and labels differ in length"));
    }
    let ta = fit_threshold(a.val, val_labels)?;
    let tb = fit_threshold(b.val, val_labels)?;
    let mut members: [[Vec<usize>; 2]; 2] = Default::default();
    for i in 0..test_labels.len() {
        members[usize::from(a.test[i] > ta)][usize::from(b.test[i] > tb)].push(i);
    }
    let cell = |r: usize, c: usize| {
        let m = &members[r][c];
        let acc = |pred: usize| {
            (!m.is_empty()).then(|| {
                m.iter()
                    .filter(|&&i| test_labels[i] as usize == pred)
                    .count() as f64
                    / m.len() as f64
            })
        };
        QuadrantCell {
            count: m.len(),
            a_accuracy: acc(r),
            b_accuracy: acc(c),
        }
    };
    Ok(QuadrantTable {
        method_a: a.name.into(),
        method_b: b.name.into(),
        threshold_a: ta,
        threshold_b: tb,
        cells: [[cell(0, 0), cell(0, 1)], [cell(1, 0), cell(1, 1)]],
    })
}

/// Spearman ρ of one neuron, or a degenerate flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: Option<f64>,
    pub degenerate: bool,
}

impl Correlation {
    fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(rho) => Ok(Correlation {
                rho: Some(rho),
                degenerate: false,
            }),
            Err(e) if e.is_degenerate() => Ok(Correlation {
                rho: None,
                degenerate: true,
            }),
            Err(e) => Err(e),
        }
    }
}

/// For each neuron, Spearman ρ between the per-trace mean top-k sink rate
/// and the per-trace neuron activation score.
pub fn head_neuron_correlation_study(
    traces: &[GenerationTrace],
    heads: &HeadRanking,
    k: usize,
    neurons: &[usize],
) -> Result<BTreeMap<usize, Correlation>> {
    let sinks: Vec<f64> = traces
        .par_iter()
        .map(|t| aggregate(&head_sink_rates(t, heads, k)?, Aggregation::Mean))
        .collect::<Result<_>>()?;
    neurons
        .iter()
        .map(|&n| {
            let acts: Vec<f64> = traces
                .iter()
                .map(|t| neuron_activation_score(t, n))
                .collect::<Result<_>>()?;
            Ok((n, Correlation::from_result(spearman(&sinks, &acts))?))
        })
        .collect()
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Per-method results of the multi-seed protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    /// Test-split AUROC per seed, in seed order.
    pub test_auroc: Vec<f64>,
    pub mean_auroc: f64,
    pub std_auroc: Option<f64>,
    /// Hallucinated vs grounded scores over all items.
    pub u_test: UTest,
}

/// Output of the evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub fractions: [f64; 3],
    pub seeds: Vec<u64>,
    pub n_items: usize,
    pub methods: BTreeMap<String, MethodEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_k: Option<KSelection>,
    /// Which split k-selection and threshold fitting used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrant: Option<QuadrantTable>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub correlations: BTreeMap<String, Correlation>,
    /// SHA-256 of every input artifact, keyed by role.
    pub input_digests: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(fractions: [f64; 3], seeds: Vec<u64>, n_items: usize) -> Self {
        Self {
            schema: EVAL_SCHEMA.into(),
            fractions,
            seeds,
            n_items,
            methods: BTreeMap::new(),
            chosen_k: None,
            selection_split: None,
            quadrant: None,
            correlations: BTreeMap::new(),
            input_digests: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema != EVAL_SCHEMA {
            return Err(Error::format(format!(
                "schema {:?}, expected {EVAL_SCHEMA:?}",
                r.schema
            )));
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }
}

/// Test-split AUROC per seed plus the U test over all items.
pub fn evaluate_method(
    scores: &[f64],
    labels: &[u8],
    fractions: [f64; 3],
    seeds: &[u64],
) -> Result<MethodEval> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let test_auroc = seeds
        .iter()
        .map(|&seed| {
            let s = split_indices(scores.len(), fractions, seed)?;
            let ts: Vec<f64> = s.test.iter().map(|&i| scores[i]).collect();
            let tl: Vec<u8> = s.test.iter().map(|&i| labels[i]).collect();
            auroc(&ts, &tl)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean_auroc, std_auroc) = mean_std(&test_auroc);
    let hal: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(s, _)| *s)
        .collect();
    let gro: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(s, _)| *s)
        .collect();
    Ok(MethodEval {
        test_auroc,
        mean_auroc,
        std_auroc,
        u_test: mann_whitney_u(&hal, &gro)?,
    })
}

/// SHA-256 hex digest of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
