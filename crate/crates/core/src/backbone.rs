//! The shared front end: identity-vector pre-processor, auxiliary
//! processor, concatenation, and triplet batch construction.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::corpus::VectorCorpus;
use crate::error::{Error, Result};
use crate::nn::{dense, BatchNorm, Layer, Network};
use crate::sampler::{below, choose_distinct, sample_idv, SamplerConfig};
use crate::scalar::Scalar;
use crate::vector::IdentityIndex;

/// `Dense → ReLU → Dense → ReLU`, identity vector to `u`.
#[derive(Debug, Clone)]
pub struct PreProcessor<T: Scalar = f64> {
    pub net: Network<T>,
}

impl<T: Scalar> PreProcessor<T> {
    pub fn new(idv_dim: usize, width: usize, seed: u64) -> Self {
        let mut net = Network::new(vec![
            dense(idv_dim, width),
            Layer::relu(),
            dense(width, width),
            Layer::relu(),
        ])
        .expect("static architecture");
        net.init(seed);
        Self { net }
    }

    pub fn from_network(net: Network<T>) -> Self {
        Self { net }
    }

    pub fn preprocess(&self, e: &ArrayView2<T>) -> Result<Array2<T>> {
        self.net.infer(e)
    }
}

/// Auxiliary-processor outputs: after block 1, after block 2, and the
/// final output.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTaps<T: Scalar = f64> {
    pub phi1: Array2<T>,
    pub phi2: Array2<T>,
    pub phi: Array2<T>,
}

/// Three `Dense → ReLU → BatchNorm` blocks and an output `Dense`.
#[derive(Debug, Clone)]
pub struct AuxProcessor<T: Scalar = f64> {
    pub net: Network<T>,
}

/// Top-level layer positions of the three taps.
const TAP_LAYERS: [usize; 3] = [2, 5, 9];

impl<T: Scalar> AuxProcessor<T> {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for _ in 0..3 {
            layers.push(dense(width, width));
            layers.push(Layer::relu());
            layers.push(Layer::BatchNorm(BatchNorm::new(width)));
        }
        layers.push(dense(width, width));
        let mut net = Network::new(layers).expect("static architecture");
        net.init(seed);
        Self { net }
    }

    pub fn from_network(net: Network<T>) -> Self {
        Self { net }
    }

    /// Eval-mode taps for every row of `x`.
    pub fn aux_process(&self, x: &ArrayView2<T>) -> Result<AuxTaps<T>> {
        let trace = self.net.trace(x)?;
        if trace.len() != 10 {
            return Err(Error::State("auxiliary processor has an unexpected layout".into()));
        }
        let [a, b, c] = TAP_LAYERS;
        Ok(AuxTaps {
            phi1: trace[a].clone(),
            phi2: trace[b].clone(),
            phi: trace[c].clone(),
        })
    }

    /// Eval-mode `φ` for a single vector.
    pub fn phi(&self, x: &[T]) -> Result<Array1<T>> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(x.len(), e))?;
        Ok(self.net.infer(&row)?.row(0).to_owned())
    }
}

/// `[u | φ]` row by row.
pub fn concat<T: Scalar>(u: &ArrayView2<T>, phi: &ArrayView2<T>) -> Result<Array2<T>> {
    if u.nrows() != phi.nrows() {
        return Err(Error::shape(format!("{} rows", u.nrows()), phi.nrows()));
    }
    concatenate(Axis(1), &[u.view(), phi.view()]).map_err(|e| Error::shape("concatenable", e))
}

/// Inverse of [`concat`] when the first part has `left` columns.
pub fn split<T: Scalar>(z: &ArrayView2<T>, left: usize) -> Result<(Array2<T>, Array2<T>)> {
    if left > z.ncols() {
        return Err(Error::shape(format!("at least {left} columns"), z.ncols()));
    }
    Ok((z.slice(s![.., ..left]).to_owned(), z.slice(s![.., left..]).to_owned()))
}

/// Sequential indices `0..S` by sorted speaker label.
pub fn speaker_identity_assignment(labels: &[String]) -> Result<BTreeMap<String, IdentityIndex>> {
    let mut sorted: Vec<&String> = labels.iter().collect();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::Corpus(format!("duplicate speaker label {:?}", w[0])));
        }
    }
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), IdentityIndex(i as u64)))
        .collect())
}

/// A corpus grouped by speaker, in 64-bit, with per-speaker means.
#[derive(Debug, Clone)]
pub struct SpeakerCorpus {
    labels: Vec<String>,
    utterances: Vec<Vec<usize>>,
    speaker_of: Vec<usize>,
    vectors: Array2<f64>,
    means: Array2<f64>,
    durations: Vec<Option<f64>>,
}

impl SpeakerCorpus {
    pub fn new(corpus: &VectorCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Corpus("corpus has no utterances".into()));
        }
        let d = corpus.dim();
        let mut labels: Vec<String> = corpus.metas().iter().map(|m| m.speaker_label.clone()).collect();
        labels.sort();
        labels.dedup();
        let position: BTreeMap<&str, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut utterances = vec![Vec::new(); labels.len()];
        let mut speaker_of = Vec::with_capacity(corpus.len());
        for (row, meta) in corpus.metas().iter().enumerate() {
            let s = position[meta.speaker_label.as_str()];
            utterances[s].push(row);
            speaker_of.push(s);
        }
        let vectors = Array2::from_shape_fn((corpus.len(), d), |(i, j)| corpus.row(i)[j] as f64);
        let mut means = Array2::zeros((labels.len(), d));
        for (s, rows) in utterances.iter().enumerate() {
            let mut acc = Array1::<f64>::zeros(d);
            for &r in rows {
                acc += &vectors.row(r);
            }
            acc /= rows.len() as f64;
            means.row_mut(s).assign(&acc);
        }
        Ok(Self {
            labels,
            utterances,
            speaker_of,
            vectors,
            means,
            durations: corpus.metas().iter().map(|m| m.duration_seconds).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn speakers(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    /// Sorted speaker labels; position `s` is speaker `s`.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn utterances_of(&self, speaker: usize) -> &[usize] {
        &self.utterances[speaker]
    }

    pub fn speaker_of(&self, row: usize) -> usize {
        self.speaker_of[row]
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn durations(&self) -> &[Option<f64>] {
        &self.durations
    }

    /// Index of speaker `s` under [`speaker_identity_assignment`].
    pub fn identity(&self, speaker: usize) -> IdentityIndex {
        IdentityIndex(speaker as u64)
    }

    pub fn assignment(&self) -> BTreeMap<String, IdentityIndex> {
        speaker_identity_assignment(&self.labels).expect("labels are deduplicated")
    }
}

/// One training example: speaker `speaker` (target its mean, seed its
/// identity index) disturbed by utterance row `aux_row` of another speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub speaker: usize,
    pub index: IdentityIndex,
    pub aux_row: usize,
}

/// `n_id` distinct speakers, each paired with `n_aux` utterances drawn
/// without replacement from the other speakers.
pub fn build_batch<R: Rng + ?Sized>(
    corpus: &SpeakerCorpus,
    n_id: usize,
    n_aux: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let s = corpus.speakers();
    if s < 2 || s < n_id {
        return Err(Error::Corpus(format!(
            "batch needs {} distinct speakers (at least 2), corpus has {s}",
            n_id
        )));
    }
    let n = corpus.len();
    let mut out = Vec::with_capacity(n_id * n_aux);
    for speaker in choose_distinct(rng, s, n_id) {
        let own = corpus.utterances_of(speaker).len();
        if n - own < n_aux {
            return Err(Error::Corpus(format!(
                "speaker {:?} has only {} foreign utterances, need {n_aux}",
                corpus.labels()[speaker],
                n - own
            )));
        }
        let mut taken: Vec<usize> = Vec::with_capacity(n_aux);
        while taken.len() < n_aux {
            let row = below(rng, n as u64) as usize;
            if corpus.speaker_of(row) != speaker && !taken.contains(&row) {
                taken.push(row);
            }
        }
        out.extend(taken.into_iter().map(|aux_row| Triplet {
            speaker,
            index: corpus.identity(speaker),
            aux_row,
        }));
    }
    Ok(out)
}

/// Stacked identity vectors for `indices`.
pub fn idv_batch(indices: &[IdentityIndex], cfg: &SamplerConfig) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), cfg.dimension));
    for (i, &idx) in indices.iter().enumerate() {
        let e = sample_idv(idx, cfg);
        out.row_mut(i)
            .assign(&ndarray::ArrayView1::from(e.as_slice()));
    }
    out
}

/// The pre-processor and auxiliary processor trained as one unit.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub pre: PreProcessor<f64>,
    pub aux: AuxProcessor<f64>,
}

impl Backbone {
    pub fn new(idv_dim: usize, width: usize, seed: u64) -> Self {
        Self {
            pre: PreProcessor::new(idv_dim, width, seed),
            aux: AuxProcessor::new(width, seed.wrapping_add(1)),
        }
    }

    /// Pre-processor outputs for a batch of identity indices.
    pub fn encode(&self, indices: &[IdentityIndex], cfg: &SamplerConfig) -> Result<Array2<f64>> {
        self.pre.preprocess(&idv_batch(indices, cfg).view())
    }

    /// `z` rows for `indices`, all sharing the conditioning vector `phi`.
    pub fn condition(
        &self,
        indices: &[IdentityIndex],
        phi: &Array1<f64>,
        cfg: &SamplerConfig,
    ) -> Result<Array2<f64>> {
        let u = self.encode(indices, cfg)?;
        let phis = phi
            .broadcast((indices.len(), phi.len()))
            .ok_or_else(|| Error::shape("broadcastable phi", phi.len()))?;
        concat(&u.view(), &phis)
    }
}

/// Intermediate results of one backbone forward pass over a triplet batch.
pub(crate) struct BackboneBatch {
    /// Distinct speakers of the batch and, per triplet, its position there.
    pub speakers: Vec<usize>,
    pub slot: Vec<usize>,
    pub z: Array2<f64>,
    pub width: usize,
}

impl Backbone {
    /// Train-mode forward over a triplet batch: the pre-processor runs once
    /// per distinct speaker, the auxiliary processor once per triplet.
    pub(crate) fn forward_batch(
        &mut self,
        corpus: &SpeakerCorpus,
        batch: &[Triplet],
        cfg: &SamplerConfig,
    ) -> Result<BackboneBatch> {
        let mut speakers: Vec<usize> = Vec::new();
        let mut slot = Vec::with_capacity(batch.len());
        for t in batch {
            let pos = match speakers.iter().position(|&s| s == t.speaker) {
                Some(p) => p,
                None => {
                    speakers.push(t.speaker);
                    speakers.len() - 1
                }
            };
            slot.push(pos);
        }
        let indices: Vec<IdentityIndex> = speakers.iter().map(|&s| corpus.identity(s)).collect();
        let e = idv_batch(&indices, cfg);
        let u_unique = self.pre.net.forward(&e, crate::nn::Mode::Train)?;
        let u = u_unique.select(Axis(0), &slot);
        let rows: Vec<usize> = batch.iter().map(|t| t.aux_row).collect();
        let x_aux = corpus.vectors().select(Axis(0), &rows);
        let phi = self.aux.net.forward(&x_aux, crate::nn::Mode::Train)?;
        let width = u.ncols();
        Ok(BackboneBatch {
            speakers,
            slot,
            z: concat(&u.view(), &phi.view())?,
            width,
        })
    }

    /// Backpropagates `dz` through the cached [`Backbone::forward_batch`]
    /// and returns the flat gradient `[pre | aux]`.
    pub(crate) fn backward_batch(&mut self, fwd: &BackboneBatch, dz: &Array2<f64>) -> Result<Vec<f64>> {
        let (du, dphi) = split(&dz.view(), fwd.width)?;
        let mut du_unique = Array2::zeros((fwd.speakers.len(), fwd.width));
        for (row, &pos) in fwd.slot.iter().enumerate() {
            let mut target = du_unique.row_mut(pos);
            target += &du.row(row);
        }
        let mut g_pre = self.pre.net.backward_params(&du_unique)?;
        let g_aux = self.aux.net.backward_params(&dphi)?;
        g_pre.extend(g_aux);
        Ok(g_pre)
    }

    pub fn param_count(&self) -> usize {
        self.pre.net.param_count() + self.aux.net.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::nn::gradcheck::{check_input_gradient, check_param_gradient};
    use crate::nn::Mode;
    use crate::sampler::{stream, Distribution, StreamDomain};
    use crate::vector::mean_vector;
    use crate::vector::SpeakerVector;

    fn small_corpus(speakers: usize, utterances: usize, dim: usize) -> SpeakerCorpus {
        let c = generate_synthetic(&SyntheticSpec {
            speakers,
            utterances,
            dim,
            seed: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        SpeakerCorpus::new(&c).unwrap()
    }

    #[test]
    fn zero_final_dense_gives_zero_u() {
        let mut pre = PreProcessor::<f64>::new(8, 8, 1);
        if let Layer::Dense(d) = &mut pre.net.layers_mut()[2] {
            d.w.fill(0.0);
            d.b.fill(0.0);
        }
        let cfg = SamplerConfig::new(Distribution::StandardNormal, 8).unwrap();
        let e = idv_batch(&[IdentityIndex(3)], &cfg);
        let u = pre.preprocess(&e.view()).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
        assert_eq!(u, pre.preprocess(&e.view()).unwrap());
    }

    #[test]
    fn preprocess_gradient_matches_finite_differences() {
        let mut pre = PreProcessor::<f64>::new(16, 16, 2);
        let cfg = SamplerConfig::new(Distribution::StandardNormal, 16).unwrap();
        let e = idv_batch(&[IdentityIndex(1), IdentityIndex(2)], &cfg);
        let loss = |y: &Array2<f64>| (y.mapv(|v| v * v).sum() * 0.5, y.clone());
        assert!(check_input_gradient(&mut pre.net, &e, Mode::Eval, loss).unwrap() < 1e-4);
        assert!(check_param_gradient(&mut pre.net, &e, Mode::Eval, loss).unwrap() < 1e-4);
    }

    #[test]
    fn aux_taps_eval_deterministic_and_train_differs() {
        let corpus = small_corpus(4, 5, 16);
        let mut aux = AuxProcessor::<f64>::new(16, 3);
        let x = corpus.vectors().slice(s![0..6, ..]).to_owned();
        let a = aux.aux_process(&x.view()).unwrap();
        assert_eq!(a, aux.aux_process(&x.view()).unwrap());
        let train = aux.net.forward(&x, Mode::Train).unwrap();
        assert!(train.iter().zip(a.phi.iter()).any(|(p, q)| (p - q).abs() > 1e-6));
    }

    #[test]
    fn aux_gradient_matches_finite_differences() {
        let corpus = small_corpus(4, 5, 16);
        let mut aux = AuxProcessor::<f64>::new(16, 4);
        let x = corpus.vectors().slice(s![0..8, ..]).to_owned();
        let target = corpus.vectors().slice(s![8..16, ..]).to_owned();
        let loss = |y: &Array2<f64>| {
            let d = y - &target;
            (0.5 * d.mapv(|v| v * v).sum(), d)
        };
        assert!(check_param_gradient(&mut aux.net, &x, Mode::Train, loss).unwrap() < 1e-4);
        assert!(check_input_gradient(&mut aux.net, &x, Mode::Train, loss).unwrap() < 1e-4);
    }

    #[test]
    fn concat_and_split() {
        let u = Array2::<f64>::zeros((2, 3));
        let phi = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j + 1) as f64);
        let z = concat(&u.view(), &phi.view()).unwrap();
        assert!(z.slice(s![.., ..3]).iter().all(|&v| v == 0.0));
        let (a, b) = split(&z.view(), 3).unwrap();
        assert_eq!((a, b), (u.clone(), phi.clone()));
        assert_ne!(z, concat(&phi.view(), &u.view()).unwrap());
        assert!(concat(&u.view(), &phi.slice(s![..1, ..])).is_err());
    }

    #[test]
    fn default_batch_shape_and_constraints() {
        let corpus = small_corpus(20, 6, 8);
        let mut rng = stream(1, StreamDomain::Training);
        let batch = build_batch(&corpus, 16, 16, &mut rng).unwrap();
        assert_eq!(batch.len(), 256);
        let mut speakers: Vec<usize> = batch.iter().map(|t| t.speaker).collect();
        speakers.dedup();
        assert_eq!(speakers.len(), 16);
        for t in &batch {
            assert_ne!(corpus.speaker_of(t.aux_row), t.speaker);
            assert_eq!(t.index, IdentityIndex(t.speaker as u64));
        }
        for chunk in batch.chunks(16) {
            let mut rows: Vec<usize> = chunk.iter().map(|t| t.aux_row).collect();
            rows.sort_unstable();
            rows.dedup();
            assert_eq!(rows.len(), 16);
        }
    }

    #[test]
    fn speaker_mean_matches_mean_vector() {
        let corpus = small_corpus(3, 4, 8);
        for s in 0..3 {
            let vs: Vec<SpeakerVector> = corpus
                .utterances_of(s)
                .iter()
                .map(|&r| SpeakerVector::new(corpus.vectors().row(r).to_vec()).unwrap())
                .collect();
            let m = mean_vector(&vs).unwrap();
            for (a, b) in m.as_slice().iter().zip(corpus.means().row(s).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_speaker_batch_is_corpus_error() {
        let corpus = small_corpus(1, 4, 8);
        let mut rng = stream(1, StreamDomain::Training);
        assert!(matches!(
            build_batch(&corpus, 1, 2, &mut rng),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn assignment_is_sorted_sequential() {
        let labels: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let a = speaker_identity_assignment(&labels).unwrap();
        assert_eq!(a["a"], IdentityIndex(0));
        assert_eq!(a["b"], IdentityIndex(1));
        assert_eq!(a["c"], IdentityIndex(2));
        assert_eq!(a, speaker_identity_assignment(&labels).unwrap());
        let dup: Vec<String> = ["a", "a"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(speaker_identity_assignment(&dup), Err(Error::Corpus(_))));
    }
}
