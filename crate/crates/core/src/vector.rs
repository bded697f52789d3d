//! Domain vector types and the elementary vector operations every other
//! module consumes.

use std::fmt;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Speaker embedding dimension used throughout the framework.
pub const SPEAKER_DIM: usize = 512;

/// Non-negative integer naming a pseudo-speaker, the only seed of generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityIndex(pub u64);

impl IdentityIndex {
    /// Exclusive upper bound of the index universe.
    pub const BOUND: u64 = 1 << 63;

    pub fn new(value: u64) -> Result<Self> {
        if value >= Self::BOUND {
            return Err(Error::Range {
                name: "identity index",
                value: value as f64,
                range: "[0, 2^63)",
            });
        }
        Ok(Self(value))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for IdentityIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A speaker embedding: finite entries, any norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVector<T: Scalar = f64>(Array1<T>);

impl<T: Scalar> SpeakerVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        Self::from_array(Array1::from(values))
    }

    pub fn from_array(values: Array1<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("speaker vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite entry at position {i}")));
        }
        Ok(Self(values))
    }

    /// Builds from a slice of another scalar type (e.g. `f32` storage).
    pub fn convert_from<S: Scalar>(values: &[S]) -> Result<Self> {
        Self::new(values.iter().map(|v| T::of(v.to_f64_lossy())).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, T> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice().expect("owned 1-d array is contiguous")
    }

    pub fn into_array(self) -> Array1<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        norm(self.as_slice())
    }

    pub fn cosine(&self, other: &Self) -> Result<T> {
        cosine(self.as_slice(), other.as_slice())
    }

    pub fn euclidean(&self, other: &Self) -> Result<T> {
        euclidean(self.as_slice(), other.as_slice())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()
    }
}

/// An identity vector after mean-variance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityVector<T: Scalar = f64>(Array1<T>);

impl<T: Scalar> IdentityVector<T> {
    /// Normalizes `raw` and wraps it.
    pub fn normalized(raw: &[T]) -> Result<Self> {
        Ok(Self(Array1::from(mvn(raw)?)))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice().expect("owned 1-d array is contiguous")
    }

    pub fn view(&self) -> ArrayView1<'_, T> {
        self.0.view()
    }
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("length {a}"), format!("length {b}")));
    }
    Ok(())
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_same_len(a.len(), b.len())?;
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == T::zero() || bb == T::zero() {
        return Err(Error::DegenerateVector("zero-norm argument to cosine".into()));
    }
    // √(aa·bb) rounds back to exactly aa when b = ±a, so cos(x, ±x) = ±1;
    // the product of norms does not.
    let joint = (aa * bb).sqrt();
    let denom = if joint.is_normal() { joint } else { aa.sqrt() * bb.sqrt() };
    let c = dot(a, b) / denom;
    Ok(c.max(-T::one()).min(T::one()))
}

/// Euclidean distance `‖a − b‖₂`.
pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_same_len(a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt())
}

/// Mean-variance normalization across the entries of `v`, using the
/// population standard deviation (divisor `D`).
pub fn mvn<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("mvn input"));
    }
    let n = T::of(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if !(std > T::of(1e-9)) {
        return Err(Error::DegenerateVector(format!(
            "standard deviation {std} too small to normalize"
        )));
    }
    Ok(v.iter().map(|&x| (x - mean) / std).collect())
}

/// Per-dimension arithmetic mean of a non-empty list of vectors.
pub fn mean_vector<T: Scalar>(vs: &[SpeakerVector<T>]) -> Result<SpeakerVector<T>> {
    let first = vs.first().ok_or(Error::EmptyInput("mean_vector list"))?;
    let mut acc = Array1::<T>::zeros(first.dim());
    for v in vs {
        check_same_len(first.dim(), v.dim())?;
        acc += &v.view();
    }
    acc /= T::of(vs.len() as f64);
    SpeakerVector::from_array(acc)
}
