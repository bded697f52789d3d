//! What every trained generator shares: the training record stored with
//! it and the inference interface used by the anonymizer.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::backbone::{AuxProcessor, Backbone, PreProcessor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::vector::{IdentityIndex, SpeakerVector};

/// Training provenance kept in the checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    /// Speaker label to identity index; empty for the GAN baseline.
    #[serde(default)]
    pub assignment: BTreeMap<String, u64>,
    /// Path of the training corpus, when it came from a file.
    #[serde(default)]
    pub corpus_path: Option<String>,
    /// Method-specific hyperparameters.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl TrainingRecord {
    pub fn training_indices(&self) -> Vec<IdentityIndex> {
        self.assignment.values().map(|&i| IdentityIndex(i)).collect()
    }

    pub(crate) fn from_metadata(meta: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(meta.clone())
            .map_err(|e| Error::Metadata(format!("checkpoint training record: {e}")))
    }
}

/// Identity-vector-driven generators (the MLP and the diffusion model).
pub trait IdmapGenerator {
    fn sampler(&self) -> &SamplerConfig;
    fn backbone(&self) -> &Backbone;
    fn record(&self) -> &TrainingRecord;

    /// Generator outputs for rows `z = [u | φ]` belonging to `indices`.
    fn generate_from_z(&self, z: &Array2<f64>, indices: &[IdentityIndex]) -> Result<Array2<f64>>;

    /// Conditioning vector `φ` for an auxiliary speaker vector.
    fn condition_on(&self, aux: &SpeakerVector) -> Result<Array1<f64>> {
        self.backbone().aux.phi(aux.as_slice())
    }

    /// Pseudo-speaker vectors for `indices` under a fixed `φ`.
    fn generate(&self, indices: &[IdentityIndex], phi: &Array1<f64>) -> Result<Array2<f64>> {
        let z = self.backbone().condition(indices, phi, self.sampler())?;
        self.generate_from_z(&z, indices)
    }

    /// Fails unless `request` is the configuration the model was trained
    /// with.
    fn check_sampler(&self, request: &SamplerConfig) -> Result<()> {
        let model = self.sampler();
        if model.hash() != request.hash() {
            return Err(Error::ConfigMismatch {
                model: model.hash_hex(),
                request: request.hash_hex(),
            });
        }
        Ok(())
    }

    fn infer(
        &self,
        index: IdentityIndex,
        aux: &SpeakerVector,
        request: &SamplerConfig,
    ) -> Result<SpeakerVector> {
        self.check_sampler(request)?;
        let phi = self.condition_on(aux)?;
        let out = self.generate(&[index], &phi)?;
        SpeakerVector::from_array(out.row(0).to_owned())
    }
}

pub(crate) fn backbone_components(b: &Backbone) -> Vec<(String, crate::nn::Network<f64>)> {
    vec![
        ("preprocessor".into(), b.pre.net.clone()),
        ("aux_processor".into(), b.aux.net.clone()),
    ]
}

pub(crate) fn backbone_from(ck: &Checkpoint) -> Result<Backbone> {
    Ok(Backbone {
        pre: PreProcessor::from_network(ck.component("preprocessor")?.clone()),
        aux: AuxProcessor::from_network(ck.component("aux_processor")?.clone()),
    })
}

/// Fails unless the checkpoint holds the expected kind of model.
pub(crate) fn expect_kind(ck: &Checkpoint, kind: crate::checkpoint::ModelKind) -> Result<()> {
    if ck.kind != kind {
        return Err(Error::Config(format!(
            "checkpoint holds a {} model, expected {}",
            ck.kind.name(),
            kind.name()
        )));
    }
    Ok(())
}
