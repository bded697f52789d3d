//! Binary model bundles.
//!
//! Layout (little-endian):
//!
//! ```text
//! "IDMN" | u16 version | u8 kind | u8 distribution | u32 dimension
//! | 32-byte sampler hash | u32 component count
//! | per component: u16 name length, name, u32 architecture length,
//!   architecture (JSON layer list), u64 parameter count, f64 parameters,
//!   u64 buffer count, f64 buffers
//! | u64 metadata length | metadata (JSON)
//! ```
//!
//! Nothing time- or host-dependent is written, so equal models give equal
//! bytes.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::sampler::{Distribution, SamplerConfig};

const MAGIC: &[u8; 4] = b"IDMN";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp = 1,
    Diffusion = 2,
    Gan = 3,
}

impl ModelKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Mlp),
            2 => Some(Self::Diffusion),
            3 => Some(Self::Gan),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Diffusion => "diffusion",
            Self::Gan => "gan",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub sampler: SamplerConfig,
    pub components: Vec<(String, Network<f64>)>,
    pub metadata: Value,
}

fn distribution_byte(d: Distribution) -> u8 {
    match d {
        Distribution::StandardNormal => 0,
        Distribution::UniformMinus1To1 => 1,
    }
}

impl Checkpoint {
    pub fn component(&self, name: &str) -> Result<&Network<f64>> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::State(format!("checkpoint has no component {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(distribution_byte(self.sampler.distribution));
        out.extend_from_slice(&(self.sampler.dimension as u32).to_le_bytes());
        out.extend_from_slice(&self.sampler.hash());
        out.extend_from_slice(&(self.components.len() as u32).to_le_bytes());
        for (name, net) in &self.components {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let arch = serde_json::to_vec(&net.spec()).expect("layer specs serialize");
            out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
            out.extend_from_slice(&arch);
            for values in [net.params_flat(), net.buffers_flat()] {
                out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let meta = serde_json::to_vec(&self.metadata).expect("json values serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "not a model bundle"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let kind_at = r.pos;
        let kind = ModelKind::from_byte(r.u8("kind")?)
            .ok_or_else(|| Error::format(kind_at as u64, "unknown model kind"))?;
        let dist_at = r.pos;
        let distribution = match r.u8("distribution")? {
            0 => Distribution::StandardNormal,
            1 => Distribution::UniformMinus1To1,
            _ => return Err(Error::format(dist_at as u64, "unknown distribution")),
        };
        let dim_at = r.pos;
        let dimension = r.u32("dimension")? as usize;
        let sampler = SamplerConfig::new(distribution, dimension)
            .map_err(|e| Error::format(dim_at as u64, e.to_string()))?;
        let hash_at = r.pos;
        if r.take(32, "sampler hash")? != sampler.hash() {
            return Err(Error::format(
                hash_at as u64,
                "sampler hash does not match the stored sampler configuration",
            ));
        }
        let count = r.u32("component count")?;
        let mut components = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| Error::format(name_at as u64, "component name is not UTF-8"))?;
            let len = r.u32("architecture length")? as usize;
            let arch_at = r.pos;
            let spec: Vec<LayerSpec> = serde_json::from_slice(r.take(len, "architecture")?)
                .map_err(|e| Error::format(arch_at as u64, format!("bad architecture: {e}")))?;
            let mut net = Network::from_spec(&spec);
            let params_at = r.pos;
            let params = r.f64s("parameters")?;
            net.set_params_flat(&params)
                .map_err(|e| Error::format(params_at as u64, e.to_string()))?;
            let buffers_at = r.pos;
            let buffers = r.f64s("buffers")?;
            net.set_buffers_flat(&buffers)
                .map_err(|e| Error::format(buffers_at as u64, e.to_string()))?;
            components.push((name, net));
        }
        let len = r.u64("metadata length")? as usize;
        let meta_at = r.pos;
        let metadata = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| Error::format(meta_at as u64, format!("bad metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes"));
        }
        Ok(Self {
            kind,
            sampler,
            components,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)? as usize;
        let bytes = self.take(n.saturating_mul(8), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dense, residual_block, BatchNorm, Layer};
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut a = Network::new(vec![
            dense(4, 3),
            Layer::relu(),
            Layer::BatchNorm(BatchNorm::new(3)),
            residual_block(3),
        ])
        .unwrap();
        a.init(9);
        let mut b = Network::new(vec![dense(3, 1)]).unwrap();
        b.init(10);
        Checkpoint {
            kind: ModelKind::Gan,
            sampler: SamplerConfig::new(Distribution::UniformMinus1To1, 4).unwrap(),
            components: vec![("a".into(), a), ("b".into(), b)],
            metadata: json!({"steps": 3, "note": "x"}),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.kind, ModelKind::Gan);
        assert_eq!(back.sampler, c.sampler);
        assert_eq!(back.metadata, c.metadata);
        for ((n1, a), (n2, b)) in c.components.iter().zip(&back.components) {
            assert_eq!(n1, n2);
            assert_eq!(a.spec(), b.spec());
            assert_eq!(a.params_flat(), b.params_flat());
            assert_eq!(a.buffers_flat(), b.buffers_flat());
        }
        assert_eq!(sample().to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn tampered_header_fields() {
        let bytes = sample().to_bytes();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { offset: 4, .. })));
        let mut b = bytes.clone();
        b[7] = 0;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { offset: 12, .. })));
        let mut b = bytes.clone();
        b.push(0);
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_component_is_state_error() {
        assert!(matches!(sample().component("zzz"), Err(Error::State(_))));
        assert!(sample().component("b").is_ok());
    }
}
