//! Evaluation: capacity statistics, auxiliary-processor probe, surrogate
//! linkage attack with equal error rate, similarity-matrix distinctness,
//! and latency.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::SpeakerCorpus;
use crate::corpus::VectorCorpus;
use crate::error::{Error, Result};
use crate::model::IdmapGenerator;
use crate::sampler::{below, shuffle, stream, StreamDomain};
use crate::vector::IdentityIndex;

/// Rows scaled to unit length; zero rows are an error.
pub fn normalize_rows(x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateVector(format!("row {i} has norm {n}")));
        }
        row /= n;
    }
    Ok(out)
}

/// Anything that can produce batches of fresh pseudo-speaker vectors.
pub trait VectorSource {
    fn generate_fresh(&self, n: usize, rng: &mut dyn rand::Rng) -> Result<Array2<f64>>;
}

/// An identity-index generator under a fixed conditioning vector; fresh
/// indices are drawn uniformly from the index space.
pub struct FixedCondition<'a, G: IdmapGenerator + ?Sized> {
    pub model: &'a G,
    pub phi: Array1<f64>,
    pub chunk: usize,
}

impl<G: IdmapGenerator + ?Sized> VectorSource for FixedCondition<'_, G> {
    fn generate_fresh(&self, n: usize, rng: &mut dyn rand::Rng) -> Result<Array2<f64>> {
        let indices: Vec<IdentityIndex> = (0..n).map(|_| IdentityIndex(rng.next_u64() >> 1)).collect();
        let width = self.model.backbone().aux.net.output_width().unwrap_or(0);
        let mut out = Array2::zeros((n, width));
        let chunk = self.chunk.max(1);
        for (c, idx) in indices.chunks(chunk).enumerate() {
            let block = self.model.generate(idx, &self.phi)?;
            out.slice_mut(ndarray::s![c * chunk..c * chunk + idx.len(), ..]).assign(&block);
        }
        Ok(out)
    }
}

impl VectorSource for crate::gan::GanModel {
    fn generate_fresh(&self, n: usize, rng: &mut dyn rand::Rng) -> Result<Array2<f64>> {
        self.generate(n, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityEntry {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub pairs: u64,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub pair_budget: u64,
    pub entries: Vec<CapacityEntry>,
}

/// Cosine statistics over every pair of rows.
pub fn exhaustive_pair_stats(x: &ArrayView2<f64>) -> Result<CapacityEntry> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::EmptyInput("pairwise statistics need two vectors"));
    }
    let u = normalize_rows(x)?;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    const BLOCK: usize = 512;
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let gram = u.slice(ndarray::s![start..end, ..]).dot(&u.t());
        for (bi, row) in gram.outer_iter().enumerate() {
            let i = start + bi;
            for &c in row.iter().skip(i + 1) {
                sum += c;
                min = min.min(c);
                max = max.max(c);
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as u64;
    Ok(CapacityEntry {
        n,
        mean: sum / pairs as f64,
        min,
        max,
        pairs,
        sampled: false,
    })
}

/// Cosine statistics over `budget` uniformly drawn distinct pairs.
pub fn sampled_pair_stats<R: Rng + ?Sized>(x: &ArrayView2<f64>, budget: u64, rng: &mut R) -> Result<CapacityEntry> {
    let n = x.nrows();
    if n < 2 || budget == 0 {
        return Err(Error::EmptyInput("pairwise statistics need two vectors"));
    }
    let u = normalize_rows(x)?;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for _ in 0..budget {
        let i = below(rng, n as u64) as usize;
        let mut j = below(rng, n as u64 - 1) as usize;
        if j >= i {
            j += 1;
        }
        let c = u.row(i).dot(&u.row(j));
        sum += c;
        min = min.min(c);
        max = max.max(c);
    }
    Ok(CapacityEntry {
        n,
        mean: sum / budget as f64,
        min,
        max,
        pairs: budget,
        sampled: true,
    })
}

/// Pairwise cosine statistics of `N` fresh vectors for every `N` in `ns`;
/// exhaustive up to `pair_budget` pairs, sampled beyond.
pub fn capacity_curve(
    source: &dyn VectorSource,
    ns: &[usize],
    pair_budget: u64,
    seed: u64,
) -> Result<CapacityReport> {
    let mut rng = stream(seed, StreamDomain::Eval);
    let mut entries = Vec::with_capacity(ns.len());
    for &n in ns {
        let x = source.generate_fresh(n, &mut rng)?;
        let all_pairs = (n as u64) * (n as u64).saturating_sub(1) / 2;
        let entry = if all_pairs <= pair_budget {
            exhaustive_pair_stats(&x.view())?
        } else {
            sampled_pair_stats(&x.view(), pair_budget, &mut rng)?
        };
        entries.push(entry);
    }
    Ok(CapacityReport { pair_budget, entries })
}

/// Cross-speaker mean cosine of the speaker-averaged input and of each
/// auxiliary-processor tap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxProbe {
    pub x: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub phi: f64,
}

/// Mean cosine over unordered pairs of rows.
pub fn mean_cross_cosine(rows: &ArrayView2<f64>) -> Result<f64> {
    Ok(exhaustive_pair_stats(rows)?.mean)
}

pub fn aux_probe(model: &dyn IdmapGenerator, corpus: &SpeakerCorpus) -> Result<AuxProbe> {
    if corpus.speakers() < 2 {
        return Err(Error::Corpus("aux probe needs at least two speakers".into()));
    }
    let taps = model.backbone().aux.aux_process(&corpus.vectors().view())?;
    let speaker_means = |m: &Array2<f64>| {
        let mut out = Array2::zeros((corpus.speakers(), m.ncols()));
        for s in 0..corpus.speakers() {
            let rows = corpus.utterances_of(s);
            out.row_mut(s)
                .assign(&(m.select(Axis(0), rows).sum_axis(Axis(0)) / rows.len() as f64));
        }
        out
    };
    Ok(AuxProbe {
        x: mean_cross_cosine(&corpus.means().view())?,
        phi1: mean_cross_cosine(&speaker_means(&taps.phi1).view())?,
        phi2: mean_cross_cosine(&speaker_means(&taps.phi2).view())?,
        phi: mean_cross_cosine(&speaker_means(&taps.phi).view())?,
    })
}

/// Enrollment and trial rows per speaker; scoring pairs every enrollment
/// row with every trial row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub enrollment: BTreeMap<String, Vec<usize>>,
    pub trial: BTreeMap<String, Vec<usize>>,
}

impl TrialSet {
    pub fn target_count(&self) -> usize {
        self.enrollment
            .iter()
            .map(|(s, e)| e.len() * self.trial.get(s).map_or(0, Vec::len))
            .sum()
    }

    pub fn nontarget_count(&self) -> usize {
        let e: usize = self.enrollment.values().map(Vec::len).sum();
        let t: usize = self.trial.values().map(Vec::len).sum();
        e * t - self.target_count()
    }
}

/// Splits each speaker with at least two utterances into up to
/// `max_enroll` enrollment rows (at most half) and up to `max_trial`
/// trial rows from the rest.
pub fn build_trials(corpus: &VectorCorpus, max_enroll: usize, max_trial: usize, seed: u64) -> Result<TrialSet> {
    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row, meta) in corpus.metas().iter().enumerate() {
        by_speaker.entry(meta.speaker_label.clone()).or_default().push(row);
    }
    let mut rng = stream(seed, StreamDomain::Eval);
    let mut enrollment = BTreeMap::new();
    let mut trial = BTreeMap::new();
    for (label, mut rows) in by_speaker {
        if rows.len() < 2 {
            continue;
        }
        shuffle(&mut rng, &mut rows);
        let e = max_enroll.min(rows.len() / 2).max(1);
        let t = max_trial.min(rows.len() - e);
        if t == 0 {
            continue;
        }
        trial.insert(label.clone(), rows[e..e + t].to_vec());
        rows.truncate(e);
        enrollment.insert(label, rows);
    }
    if enrollment.len() < 2 {
        return Err(Error::Corpus(format!(
            "trials need two speakers with at least two utterances, found {}",
            enrollment.len()
        )));
    }
    Ok(TrialSet { enrollment, trial })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

/// Cosine scores of every enrollment × trial pair.
pub fn score_trials(vectors: &ArrayView2<f64>, trials: &TrialSet) -> Result<ScoreSet> {
    let mut enroll_rows = Vec::new();
    let mut enroll_spk = Vec::new();
    for (s, rows) in trials.enrollment.values().enumerate() {
        enroll_rows.extend(rows);
        enroll_spk.extend(std::iter::repeat_n(s, rows.len()));
    }
    let labels: Vec<&String> = trials.enrollment.keys().collect();
    let mut trial_rows = Vec::new();
    let mut trial_spk = Vec::new();
    for (label, rows) in &trials.trial {
        let s = labels.binary_search(&label).map_err(|_| Error::State("trial speaker without enrollment".into()))?;
        trial_rows.extend(rows);
        trial_spk.extend(std::iter::repeat_n(s, rows.len()));
    }
    let e = normalize_rows(&vectors.select(Axis(0), &enroll_rows).view())?;
    let t = normalize_rows(&vectors.select(Axis(0), &trial_rows).view())?;
    let scores = e.dot(&t.t());
    let mut out = ScoreSet::default();
    for (i, row) in scores.outer_iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if enroll_spk[i] == trial_spk[j] {
                out.target.push(c);
            } else {
                out.nontarget.push(c);
            }
        }
    }
    Ok(out)
}

/// Equal error rate: the crossing of `FAR(θ) = P(nontarget ≥ θ)` and
/// `FRR(θ) = P(target < θ)` over thresholds at the pooled scores,
/// interpolated linearly between adjacent thresholds. Can exceed 0.5 when
/// targets score below nontargets.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    if scores.target.is_empty() || scores.nontarget.is_empty() {
        return Err(Error::EmptyInput("equal error rate needs target and nontarget scores"));
    }
    if scores.target.iter().chain(&scores.nontarget).any(|s| !s.is_finite()) {
        return Err(Error::Numerics("non-finite score".into()));
    }
    let mut t = scores.target.clone();
    let mut n = scores.nontarget.clone();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nt, nn) = (t.len() as f64, n.len() as f64);
    // Below every score: everything accepted.
    let mut prev = (1.0, 0.0);
    let (mut ti, mut ni) = (0usize, 0usize);
    for &th in &thresholds {
        while ti < t.len() && t[ti] < th {
            ti += 1;
        }
        while ni < n.len() && n[ni] < th {
            ni += 1;
        }
        let far = (n.len() - ni) as f64 / nn;
        let frr = ti as f64 / nt;
        if far <= frr {
            let d0 = prev.0 - prev.1;
            let d1 = far - frr;
            let lam = if d0 - d1 > 0.0 { d0 / (d0 - d1) } else { 0.0 };
            return Ok(prev.0 + lam * (far - prev.0));
        }
        prev = (far, frr);
    }
    // Above every score: everything rejected.
    let d0 = prev.0 - prev.1;
    let lam = d0 / (d0 + 1.0);
    Ok(prev.0 - lam * prev.0)
}

/// Surrogate linkage attack: cosine scoring of anonymized vectors on trials
/// built from the original speaker labels.
pub fn linkage_attack(anonymized: &VectorCorpus, seed: u64) -> Result<f64> {
    let trials = build_trials(anonymized, 10, 30, seed)?;
    let x = Array2::from_shape_fn((anonymized.len(), anonymized.dim()), |(i, j)| anonymized.row(i)[j] as f64);
    eer(&score_trials(&x.view(), &trials)?)
}

/// Similarity-matrix distinctness of pseudo speakers against originals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distinctness {
    /// `10 log10(DD(M_aa) / DD(M_oo))`, in dB.
    pub gvd: f64,
    /// `100 (1 − DD(M_oa) / DD(M_oo))`, clamped to `[0, 100]`.
    pub deid: f64,
}

fn cosine_matrix(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(normalize_rows(a)?.dot(&normalize_rows(b)?.t()))
}

/// Diagonal dominance: mean over rows of the diagonal entry minus the mean
/// off-diagonal entry.
pub fn diagonal_dominance(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[[i, j]]).sum::<f64>() / (n - 1) as f64;
        acc += m[[i, i]] - off;
    }
    acc / n as f64
}

pub fn distinctness_metrics(original: &ArrayView2<f64>, pseudo: &ArrayView2<f64>) -> Result<Distinctness> {
    if original.dim() != pseudo.dim() {
        return Err(Error::shape(format!("{:?}", original.dim()), format!("{:?}", pseudo.dim())));
    }
    if original.nrows() < 2 {
        return Err(Error::MetricUndefined("need at least two speakers".into()));
    }
    let dd_oo = diagonal_dominance(&cosine_matrix(original, original)?);
    if dd_oo <= 0.0 {
        return Err(Error::MetricUndefined(format!("original diagonal dominance {dd_oo}")));
    }
    let dd_aa = diagonal_dominance(&cosine_matrix(pseudo, pseudo)?);
    if dd_aa <= 0.0 {
        return Err(Error::MetricUndefined(format!("pseudo diagonal dominance {dd_aa}")));
    }
    let dd_oa = diagonal_dominance(&cosine_matrix(original, pseudo)?);
    Ok(Distinctness {
        gvd: 10.0 * (dd_aa / dd_oo).log10(),
        deid: (100.0 * (1.0 - dd_oa / dd_oo)).clamp(0.0, 100.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_micros(mut us: Vec<f64>) -> Option<Self> {
        if us.is_empty() {
            return None;
        }
        us.sort_by(f64::total_cmp);
        let n = us.len();
        let pick = |q: f64| us[((q * (n - 1) as f64).round() as usize).min(n - 1)];
        Some(Self {
            n,
            mean_us: us.iter().sum::<f64>() / n as f64,
            p50_us: pick(0.5),
            p95_us: pick(0.95),
            max_us: us[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rtf: f64,
    pub audio_seconds: f64,
    pub latency: LatencyStats,
}

/// Times `generate` once per utterance for the first `n` utterances (cycling
/// through the corpus if it is shorter) and relates the total to the audio
/// duration.
pub fn bench_latency(
    corpus: &VectorCorpus,
    n: usize,
    generate: &mut dyn FnMut(&[f64]) -> Result<()>,
) -> Result<LatencyReport> {
    if corpus.is_empty() || n == 0 {
        return Err(Error::Metadata("latency benchmark needs utterances".into()));
    }
    let mut durations = Vec::with_capacity(n);
    for i in 0..n {
        let row = i % corpus.len();
        match corpus.meta(row).duration_seconds {
            Some(d) if d > 0.0 => durations.push(d),
            _ => {
                return Err(Error::Metadata(format!(
                    "utterance {:?} has no duration",
                    corpus.meta(row).utterance_id
                )))
            }
        }
    }
    let mut us = Vec::with_capacity(n);
    for i in 0..n {
        let x = corpus.row_f64(i % corpus.len());
        let start = Instant::now();
        generate(&x)?;
        us.push(start.elapsed().as_secs_f64() * 1e6);
    }
    let total_s = us.iter().sum::<f64>() / 1e6;
    let audio: f64 = durations.iter().sum();
    Ok(LatencyReport {
        rtf: total_s / audio,
        audio_seconds: audio,
        latency: LatencyStats::from_micros(us).expect("n > 0"),
    })
}
