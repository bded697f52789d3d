//! The MLP generator: a three-layer head on top of the shared backbone,
//! trained on a blend of cosine and Euclidean error.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{build_batch, Backbone, SpeakerCorpus};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::model::{backbone_components, backbone_from, expect_kind, IdmapGenerator, TrainingRecord};
use crate::nn::{dense, Adam, AdamConfig, Layer, Network};
use crate::sampler::{stream, SamplerConfig, StreamDomain};
use crate::vector::{cosine, euclidean, norm, IdentityIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub alpha: f64,
    pub steps: usize,
    pub n_id: usize,
    pub n_aux: usize,
    pub adam: AdamConfig,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            steps: 2000,
            n_id: 16,
            n_aux: 16,
            adam: AdamConfig::default(),
        }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Range {
                name: "alpha",
                value: self.alpha,
                range: "[0, 1]",
            });
        }
        if self.n_id == 0 || self.n_aux == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `α(1 − cos(x, y)) + (1 − α)‖x − y‖`.
pub fn loss_mlp(x: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    Ok(alpha * (1.0 - cosine(x, y)?) + (1.0 - alpha) * euclidean(x, y)?)
}

/// [`loss_mlp`] and its gradient with respect to `y`. The Euclidean term
/// contributes nothing at `y = x`.
pub fn loss_mlp_grad(x: &[f64], y: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let c = cosine(x, y)?;
    let dist = euclidean(x, y)?;
    let (nx, ny) = (norm(x), norm(y));
    let grad = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let dcos = xi / (nx * ny) - c * yi / (ny * ny);
            let deuc = if dist > 0.0 { (yi - xi) / dist } else { 0.0 };
            -alpha * dcos + (1.0 - alpha) * deuc
        })
        .collect();
    Ok((alpha * (1.0 - c) + (1.0 - alpha) * dist, grad))
}

/// Mean loss over the rows and its gradient with respect to `y`.
fn batch_loss(x: &Array2<f64>, y: &Array2<f64>, alpha: f64) -> Result<(f64, Array2<f64>)> {
    let b = y.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(y.raw_dim());
    for (i, (xr, yr)) in x.outer_iter().zip(y.outer_iter()).enumerate() {
        let (l, g) = loss_mlp_grad(
            xr.as_slice().expect("standard layout"),
            &yr.to_vec(),
            alpha,
        )?;
        total += l;
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v / b;
        }
    }
    Ok((total / b, grad))
}

/// `Dense(2d → d) → ReLU → Dense(d → d) → ReLU → Dense(d → d)`.
pub fn mlp_generator(width: usize, seed: u64) -> Network<f64> {
    let mut net = Network::new(vec![
        dense(2 * width, width),
        Layer::relu(),
        dense(width, width),
        Layer::relu(),
        dense(width, width),
    ])
    .expect("static architecture");
    net.init(seed);
    net
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    pub sampler: SamplerConfig,
    pub backbone: Backbone,
    pub generator: Network<f64>,
    pub record: TrainingRecord,
}

impl IdmapGenerator for MlpModel {
    fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn record(&self) -> &TrainingRecord {
        &self.record
    }

    fn generate_from_z(&self, z: &Array2<f64>, _indices: &[IdentityIndex]) -> Result<Array2<f64>> {
        self.generator.infer(&z.view())
    }
}

impl MlpModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut components = backbone_components(&self.backbone);
        components.push(("generator".into(), self.generator.clone()));
        Checkpoint {
            kind: ModelKind::Mlp,
            sampler: self.sampler,
            components,
            metadata: serde_json::to_value(&self.record).expect("record serializes"),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, ModelKind::Mlp)?;
        Ok(Self {
            sampler: ck.sampler,
            backbone: backbone_from(ck)?,
            generator: ck.component("generator")?.clone(),
            record: TrainingRecord::from_metadata(&ck.metadata)?,
        })
    }

    pub fn config(&self) -> Result<MlpConfig> {
        serde_json::from_value(self.record.config.clone())
            .map_err(|e| Error::Metadata(format!("mlp config: {e}")))
    }
}

/// Trains backbone and generator jointly with one optimizer.
pub fn train_mlp(
    corpus: &SpeakerCorpus,
    sampler: &SamplerConfig,
    cfg: &MlpConfig,
    seed: u64,
) -> Result<MlpModel> {
    cfg.validate()?;
    if corpus.speakers() < 2 {
        return Err(Error::Corpus("training needs at least two speakers".into()));
    }
    let width = corpus.dim();
    let mut backbone = Backbone::new(sampler.dimension, width, seed);
    let mut generator = mlp_generator(width, seed.wrapping_add(2));
    let mut adam = Adam::for_networks(
        cfg.adam,
        &[&backbone.pre.net, &backbone.aux.net, &generator],
    );
    let mut rng = stream(seed, StreamDomain::Training);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = build_batch(corpus, cfg.n_id, cfg.n_aux, &mut rng)?;
        let fwd = backbone.forward_batch(corpus, &batch, sampler)?;
        let y = generator.forward(&fwd.z, crate::nn::Mode::Train)?;
        let rows: Vec<usize> = batch.iter().map(|t| t.speaker).collect();
        let x = corpus.means().select(Axis(0), &rows);
        let (loss, gy) = match batch_loss(&x, &y, cfg.alpha) {
            Ok(v) => v,
            Err(e) => {
                return Err(Error::Training {
                    step,
                    message: e.to_string(),
                })
            }
        };
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss is {loss}"),
            });
        }
        curve.push(loss);
        let (g_gen, dz) = generator.backward(&gy)?;
        let mut grads = backbone.backward_batch(&fwd, &dz)?;
        grads.extend(g_gen);
        let Backbone { pre, aux } = &mut backbone;
        adam.step(&mut [&mut pre.net, &mut aux.net, &mut generator], &grads)
            .map_err(|e| Error::Training {
                step,
                message: e.to_string(),
            })?;
    }
    backbone.pre.net.clear_cache();
    backbone.aux.net.clear_cache();
    generator.clear_cache();
    let record = TrainingRecord {
        seed,
        steps: cfg.steps,
        loss_curve: curve,
        assignment: corpus
            .assignment()
            .into_iter()
            .map(|(l, i)| (l, i.get()))
            .collect(),
        corpus_path: None,
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    Ok(MlpModel {
        sampler: *sampler,
        backbone,
        generator,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::nn::gradcheck::{central_differences, max_relative_error, STEP};
    use crate::sampler::Distribution;
    use crate::vector::SpeakerVector;
    use proptest::prelude::*;

    #[test]
    fn unit_values() {
        let x = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(loss_mlp(&x, &x, 0.5).unwrap(), 0.0);
        assert_eq!(loss_mlp(&x, &neg, 1.0).unwrap(), 2.0);
        let v = loss_mlp(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!((v - 1.207_106_781_186_547_5).abs() < 1e-12);
        assert!(matches!(
            loss_mlp(&[0.0, 0.0], &[1.0, 0.0], 0.5),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = [0.4, -0.7, 1.3, 0.2];
        let y = [1.1, 0.5, -0.3, 0.9];
        for alpha in [0.0, 0.5, 1.0] {
            let (_, g) = loss_mlp_grad(&x, &y, alpha).unwrap();
            let fd = central_differences(
                |p| loss_mlp(&x, p, alpha).unwrap(),
                &y,
                &[0, 1, 2, 3],
                STEP,
            );
            assert!(max_relative_error(&fd, &g) < 1e-4, "alpha {alpha}");
        }
    }

    proptest! {
        #[test]
        fn unit_values_are_exact(
            x in proptest::collection::vec(-1e3f64..1e3, 1..600),
            alpha in prop_oneof![Just(0.0), Just(0.5), Just(1.0), 0.0f64..=1.0],
        ) {
            prop_assume!(norm(&x) > 1e-6);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert_eq!(loss_mlp(&x, &x, alpha).unwrap(), 0.0);
            prop_assert_eq!(loss_mlp(&x, &neg, 1.0).unwrap(), 2.0);
        }

        #[test]
        fn loss_is_nonnegative(
            x in proptest::collection::vec(-3.0f64..3.0, 5),
            y in proptest::collection::vec(-3.0f64..3.0, 5),
            alpha in 0.0f64..=1.0,
        ) {
            prop_assume!(norm(&x) > 1e-3 && norm(&y) > 1e-3);
            let l = loss_mlp(&x, &y, alpha).unwrap();
            prop_assert!(l >= -1e-15);
            if x != y {
                prop_assert!(alpha == 1.0 || l > 0.0);
            }
        }
    }

    fn tiny() -> (SpeakerCorpus, SamplerConfig) {
        let c = generate_synthetic(&SyntheticSpec {
            speakers: 6,
            utterances: 4,
            dim: 16,
            seed: 3,
            ..SyntheticSpec::calibrated(3)
        })
        .unwrap();
        (
            SpeakerCorpus::new(&c).unwrap(),
            SamplerConfig::new(Distribution::StandardNormal, 16).unwrap(),
        )
    }

    fn tiny_cfg(alpha: f64, steps: usize) -> MlpConfig {
        MlpConfig {
            alpha,
            steps,
            n_id: 4,
            n_aux: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
        }
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let (corpus, sampler) = tiny();
        let a = train_mlp(&corpus, &sampler, &tiny_cfg(0.5, 20), 1).unwrap();
        let b = train_mlp(&corpus, &sampler, &tiny_cfg(0.5, 20), 1).unwrap();
        let bytes = a.to_checkpoint().to_bytes();
        assert_eq!(bytes, b.to_checkpoint().to_bytes());
        let back = MlpModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        assert_eq!(back.config().unwrap(), tiny_cfg(0.5, 20));
    }

    #[test]
    fn loss_decreases_on_tiny_corpus() {
        let (corpus, sampler) = tiny();
        let m = train_mlp(&corpus, &sampler, &tiny_cfg(0.5, 300), 2).unwrap();
        let c = &m.record.loss_curve;
        let head: f64 = c[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = c[c.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn every_alpha_trains() {
        let (corpus, sampler) = tiny();
        for alpha in [0.0, 0.5, 1.0] {
            let m = train_mlp(&corpus, &sampler, &tiny_cfg(alpha, 10), 4).unwrap();
            assert_eq!(m.record.loss_curve.len(), 10);
        }
        assert!(matches!(
            train_mlp(&corpus, &sampler, &tiny_cfg(1.5, 10), 4),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn single_speaker_is_corpus_error() {
        let c = generate_synthetic(&SyntheticSpec {
            speakers: 1,
            utterances: 4,
            dim: 16,
            seed: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let corpus = SpeakerCorpus::new(&c).unwrap();
        let sampler = SamplerConfig::new(Distribution::StandardNormal, 16).unwrap();
        assert!(matches!(
            train_mlp(&corpus, &sampler, &tiny_cfg(0.5, 1), 1),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn divergence_reports_the_step() {
        let (corpus, sampler) = tiny();
        let mut cfg = tiny_cfg(0.5, 50);
        cfg.adam.lr = 1e150;
        match train_mlp(&corpus, &sampler, &cfg, 1) {
            Err(Error::Training { step, .. }) => assert!(step > 0 && step < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn inference_is_deterministic_and_checks_sampler() {
        let (corpus, sampler) = tiny();
        let m = train_mlp(&corpus, &sampler, &tiny_cfg(0.5, 5), 1).unwrap();
        let aux = SpeakerVector::new(corpus.vectors().row(0).to_vec()).unwrap();
        let a = m.infer(IdentityIndex(77), &aux, &sampler).unwrap();
        let b = m.infer(IdentityIndex(77), &aux, &sampler).unwrap();
        assert_eq!(a, b);
        let other = SamplerConfig::new(Distribution::UniformMinus1To1, 16).unwrap();
        assert!(matches!(
            m.infer(IdentityIndex(77), &aux, &other),
            Err(Error::ConfigMismatch { .. })
        ));
        let phi = m.condition_on(&aux).unwrap();
        let batch = m.generate(&[IdentityIndex(5), IdentityIndex(77)], &phi).unwrap();
        assert_eq!(batch.row(1).to_vec(), a.as_slice().to_vec());
    }
}
