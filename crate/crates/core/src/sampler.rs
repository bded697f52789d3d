//! Deterministic identity-index to identity-vector sampling.
//!
//! Every stream in the crate is a PCG64 (XSL-RR 128/64) generator from
//! `rand_pcg`. A 64-bit seed is expanded into the 128-bit state and the
//! 128-bit stream selector with four splitmix64 outputs:
//!
//! ```text
//! s0 = seed ^ domain_key
//! w0..w3 = splitmix64(s0) x4
//! state = w0 | w1 << 64, stream = w2 | w3 << 64
//! ```
//!
//! PCG constants: multiplier `0x2360ED051FC65DA44385DF649FCCF645`, increment
//! `(stream << 1) | 1`. Uniform reals use the top 53 bits of one output,
//! offset by half an ulp so they lie strictly inside `(0, 1)`.

pub mod registry;

use rand::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vector::{IdentityIndex, IdentityVector, SPEAKER_DIM};

pub use registry::IdentityRegistry;

/// PCG64 multiplier, as used by `rand_pcg::Pcg64`.
pub const PCG_MULTIPLIER: u128 = 0x2360_ED05_1FC6_5DA4_4385_DF64_9FCC_F645;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Separates the streams drawn from the same integer seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamDomain {
    /// Identity-vector draws; the key is zero so the index is the seed.
    Idv = 0,
    DiffusionNoise = 1,
    Training = 2,
    Registry = 3,
    GanInput = 4,
    Corpus = 5,
    Eval = 6,
    Session = 7,
}

impl StreamDomain {
    fn key(self) -> u64 {
        (self as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
    }
}

/// One step of splitmix64.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The PCG64 stream for `(seed, domain)`.
pub fn stream(seed: u64, domain: StreamDomain) -> Pcg64 {
    let mut s = seed ^ domain.key();
    let w: [u64; 4] = std::array::from_fn(|_| splitmix64(&mut s));
    let state = (w[0] as u128) | ((w[1] as u128) << 64);
    let select = (w[2] as u128) | ((w[3] as u128) << 64);
    Pcg64::new(state, select)
}

/// Uniform draw in `(0, 1)` from 53 bits of one output.
#[inline]
pub fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
#[inline]
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal draw by inverse CDF.
#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    inverse_normal_cdf(uniform01(rng))
}

/// Uniform integer in `[0, n)` by rejection of the biased tail.
pub fn below<R: Rng + ?Sized>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let zone = u64::MAX - (u64::MAX - n + 1) % n;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % n;
        }
    }
}

/// Fisher-Yates shuffle driven by [`below`].
pub fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// `k` distinct positions of `0..n`, in draw order (partial Fisher-Yates).
pub fn choose_distinct<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot choose {k} of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + below(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Acklam's rational approximation of the standard normal quantile.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    StandardNormal,
    UniformMinus1To1,
}

impl Distribution {
    #[inline]
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Distribution::StandardNormal => standard_normal(rng),
            Distribution::UniformMinus1To1 => 2.0 * uniform01(rng) - 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Distribution::StandardNormal => "standard_normal",
            Distribution::UniformMinus1To1 => "uniform_minus1_to1",
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard_normal" | "normal" | "N" => Ok(Distribution::StandardNormal),
            "uniform_minus1_to1" | "uniform" | "U" => Ok(Distribution::UniformMinus1To1),
            other => Err(Error::Config(format!("unknown distribution {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub distribution: Distribution,
    pub dimension: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            distribution: Distribution::StandardNormal,
            dimension: SPEAKER_DIM,
        }
    }
}

impl SamplerConfig {
    pub fn new(distribution: Distribution, dimension: usize) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::Config(format!(
                "sampler dimension must be at least 2, got {dimension}"
            )));
        }
        Ok(Self {
            distribution,
            dimension,
        })
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        out.extend_from_slice(b"idmap-sampler/1;pcg64-xsl-rr;splitmix64x4;acklam;");
        out.extend_from_slice(self.distribution.tag().as_bytes());
        out.push(b';');
        out.extend_from_slice(&(self.dimension as u64).to_le_bytes());
        out.extend_from_slice(&PCG_MULTIPLIER.to_le_bytes());
        out
    }

    /// SHA-256 of the canonical description.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The `D` pre-normalization draws for `index`.
pub fn raw_draws(index: IdentityIndex, cfg: &SamplerConfig) -> Vec<f64> {
    let mut rng = stream(index.get(), StreamDomain::Idv);
    (0..cfg.dimension)
        .map(|_| cfg.distribution.draw(&mut rng))
        .collect()
}

/// Identity vector for `index`: raw draws, then mean-variance normalization.
pub fn sample_idv(index: IdentityIndex, cfg: &SamplerConfig) -> IdentityVector<f64> {
    IdentityVector::normalized(&raw_draws(index, cfg))
        .expect("continuous draws are never constant")
}
