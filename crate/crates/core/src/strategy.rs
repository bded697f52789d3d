//! Pool-based pseudo-speaker baselines: random selection and averaging of
//! the farthest pool speakers.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::backbone::SpeakerCorpus;
use crate::corpus::VectorCorpus;
use crate::error::{Error, Result};
use crate::sampler::below;
use crate::vector::{cosine, SpeakerVector};

/// Per-speaker mean vectors of a reference corpus, in label order.
#[derive(Debug, Clone)]
pub struct ReferencePool {
    labels: Vec<String>,
    means: Array2<f64>,
}

impl ReferencePool {
    pub fn from_corpus(corpus: &VectorCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Ok(Self {
                labels: Vec::new(),
                means: Array2::zeros((0, corpus.dim())),
            });
        }
        let grouped = SpeakerCorpus::new(corpus)?;
        Ok(Self {
            labels: grouped.labels().to_vec(),
            means: grouped.means().clone(),
        })
    }

    pub fn from_parts(labels: Vec<String>, means: Array2<f64>) -> Result<Self> {
        if labels.len() != means.nrows() {
            return Err(Error::shape(labels.len(), means.nrows()));
        }
        Ok(Self { labels, means })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn vector(&self, i: usize) -> Result<SpeakerVector> {
        SpeakerVector::from_array(self.means.row(i).to_owned())
    }
}

/// One pool speaker's mean, uniformly at random, with its position.
pub fn random_select<R: Rng + ?Sized>(pool: &ReferencePool, rng: &mut R) -> Result<(usize, SpeakerVector)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool { needed: 1, have: 0 });
    }
    let i = below(rng, pool.len() as u64) as usize;
    Ok((i, pool.vector(i)?))
}

/// Mean of the `k` pool vectors least cosine-similar to `x_orig`; ties go
/// to the earlier label.
pub fn average_farthest(pool: &ReferencePool, x_orig: &SpeakerVector, k: usize) -> Result<SpeakerVector> {
    if k == 0 || pool.len() < k {
        return Err(Error::EmptyPool {
            needed: k.max(1),
            have: pool.len(),
        });
    }
    if pool.dim() != x_orig.dim() {
        return Err(Error::shape(pool.dim(), x_orig.dim()));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for i in 0..pool.len() {
        let row = pool.means.row(i);
        scored.push((cosine(row.as_slice().expect("standard layout"), x_orig.as_slice())?, i));
    }
    // Labels are sorted, so position order is label order.
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut acc = Array1::<f64>::zeros(pool.dim());
    for &(_, i) in &scored[..k] {
        acc += &pool.means.row(i);
    }
    acc /= k as f64;
    SpeakerVector::from_array(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{standard_normal, stream, StreamDomain};

    fn pool_of(rows: Vec<Vec<f64>>) -> ReferencePool {
        let n = rows.len();
        let d = rows[0].len();
        let labels = (0..n).map(|i| format!("p{i:03}")).collect();
        let means = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).unwrap();
        ReferencePool::from_parts(labels, means).unwrap()
    }

    #[test]
    fn single_pool_and_empty_pool() {
        let pool = pool_of(vec![vec![1.0, 2.0]]);
        let mut rng = stream(1, StreamDomain::Session);
        assert_eq!(random_select(&pool, &mut rng).unwrap().1.as_slice(), &[1.0, 2.0]);
        let empty = ReferencePool::from_parts(vec![], Array2::zeros((0, 2))).unwrap();
        assert!(matches!(random_select(&empty, &mut rng), Err(Error::EmptyPool { .. })));
    }

    #[test]
    fn selection_is_uniform_and_reproducible() {
        let pool = pool_of((0..10).map(|i| vec![1.0, i as f64]).collect());
        let mut rng = stream(2, StreamDomain::Session);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[random_select(&pool, &mut rng).unwrap().0] += 1;
        }
        assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
        let a = random_select(&pool, &mut stream(3, StreamDomain::Session)).unwrap();
        let b = random_select(&pool, &mut stream(3, StreamDomain::Session)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_k_is_global_mean() {
        let pool = pool_of(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let x = SpeakerVector::new(vec![1.0, 0.2]).unwrap();
        let m = average_farthest(&pool, &x, 3).unwrap();
        for (a, b) in m.as_slice().iter().zip([2.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(average_farthest(&pool, &x, 4), Err(Error::EmptyPool { needed: 4, have: 3 })));
    }

    #[test]
    fn farthest_picks_the_opposite_cluster() {
        let mut rng = stream(4, StreamDomain::Eval);
        let mut rows = Vec::new();
        for c in [1.0, -1.0] {
            for _ in 0..5 {
                rows.push((0..4).map(|j| if j == 0 { 5.0 * c } else { 0.3 * standard_normal(&mut rng) }).collect::<Vec<_>>());
            }
        }
        let pool = pool_of(rows.clone());
        let x = SpeakerVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let got = average_farthest(&pool, &x, 5).unwrap();
        let want: Vec<f64> = (0..4).map(|j| rows[5..].iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
        for (a, b) in got.as_slice().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got, average_farthest(&pool, &x, 5).unwrap());
    }
}
