//! The adversarial baseline: a residual generator and critic trained
//! against batch optimal-transport potentials, with rejection-sampling
//! inference.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::VectorCorpus;
use crate::error::{Error, Result};
use crate::model::{expect_kind, TrainingRecord};
use crate::nn::{dense, residual_block, Adam, AdamConfig, Mode, Network};
use crate::ot::{check_duals, quadratic_cost, solve_dual_potentials, DualPotentials};
use crate::sampler::{below, choose_distinct, sample_idv, stream, SamplerConfig, StreamDomain};
use crate::vector::{cosine, IdentityIndex, SpeakerVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcConfig {
    /// Transport cost scale; `None` means `1/d`.
    pub k: Option<f64>,
    pub gamma: f64,
    pub batch: usize,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            k: None,
            gamma: 0.1,
            batch: 64,
        }
    }
}

impl QcConfig {
    pub fn k_for(&self, dim: usize) -> f64 {
        self.k.unwrap_or(1.0 / dim as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub steps: usize,
    pub qc: QcConfig,
    pub adam: AdamConfig,
    /// Steps between dual-certificate checks.
    pub check_every: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            qc: QcConfig::default(),
            adam: AdamConfig::default(),
            check_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionConfig {
    pub delta: f64,
    pub max_attempts: usize,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            delta: 0.3,
            max_attempts: 100,
        }
    }
}

impl RejectionConfig {
    pub fn new(delta: f64, max_attempts: usize) -> Result<Self> {
        if !(-1.0..=1.0).contains(&delta) {
            return Err(Error::Range {
                name: "delta",
                value: delta,
                range: "[-1, 1]",
            });
        }
        if max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(Self { delta, max_attempts })
    }
}

/// `Dense → 3 × residual(Dense → ReLU → Dense) → Dense(width → out)`.
fn residual_stack(width: usize, out: usize, seed: u64) -> Network<f64> {
    let mut net = Network::new(vec![
        dense(width, width),
        residual_block(width),
        residual_block(width),
        residual_block(width),
        dense(width, out),
    ])
    .expect("static architecture");
    net.init(seed);
    net
}

pub fn gan_generator(width: usize, seed: u64) -> Network<f64> {
    residual_stack(width, width, seed)
}

pub fn discriminator(width: usize, seed: u64) -> Network<f64> {
    residual_stack(width, 1, seed)
}

/// Critic loss against potentials `duals` and its parameter gradient.
/// The penalty pairs each generated vector with its matched real vector.
pub fn loss_discriminator(
    d: &mut Network<f64>,
    xs: &Array2<f64>,
    vs: &Array2<f64>,
    duals: &DualPotentials,
    k: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let m = xs.nrows();
    if vs.nrows() != m || duals.hx.len() != m || duals.hv.len() != m {
        return Err(Error::shape(m, format!("{} generated, {} potentials", vs.nrows(), duals.hv.len())));
    }
    let mf = m as f64;
    let weight = gamma / (k.sqrt() * mf);

    let grad_v = d.input_gradient(vs)?;
    let mut penalty = 0.0;
    let mut r = Array2::zeros(grad_v.raw_dim());
    for j in 0..m {
        let g = grad_v.row(j);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x = xs.row(duals.v_to_x[j]);
        let dist = x.iter().zip(vs.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let gap = n - k * dist;
        penalty += gap * gap;
        if n > 0.0 {
            r.row_mut(j).assign(&(&g * (2.0 * weight * gap / n)));
        }
    }
    let mut grads = d.input_gradient_param_grads(&r)?;

    let dx = d.forward(xs, Mode::Train)?;
    let gap_mean = dx.sum() / mf - duals.hx.iter().sum::<f64>() / mf;
    d.backward_accumulate(&Array2::from_elem((m, 1), gap_mean / mf), &mut grads)?;

    let dv = d.forward(vs, Mode::Train)?;
    let resid = Array1::from_iter(dv.iter().zip(&duals.hv).map(|(a, h)| a - h));
    let fit = 0.5 * resid.iter().map(|e| e * e).sum::<f64>() / mf;
    d.backward_accumulate(&(resid / mf).insert_axis(Axis(1)), &mut grads)?;

    Ok((0.5 * gap_mean * gap_mean + fit + weight * penalty, grads))
}

/// `−mean D(v)` and its gradient with respect to the generated rows.
pub fn loss_generator(d: &mut Network<f64>, vs: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let m = vs.nrows() as f64;
    let out = d.forward(vs, Mode::Train)?;
    let (_, dv) = d.backward(&Array2::from_elem(out.raw_dim(), -1.0 / m))?;
    Ok((-out.sum() / m, dv))
}

#[derive(Debug, Clone)]
pub struct GanModel {
    pub sampler: SamplerConfig,
    pub generator: Network<f64>,
    pub discriminator: Network<f64>,
    pub record: TrainingRecord,
}

/// A rejection-sampled output and the number of draws it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Accepted {
    pub vector: SpeakerVector,
    pub attempts: usize,
}

impl GanModel {
    /// Generator inputs: identity vectors at uniformly drawn indices.
    pub fn sample_inputs<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Array2<f64> {
        input_batch(&self.sampler, rows, rng)
    }

    pub fn generate<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Result<Array2<f64>> {
        self.generator.infer(&self.sample_inputs(rows, rng).view())
    }

    /// Draws until the output's cosine to `x_orig` falls below `delta`.
    pub fn infer_reject<R: Rng + ?Sized>(
        &self,
        x_orig: &SpeakerVector,
        cfg: &RejectionConfig,
        rng: &mut R,
    ) -> Result<Accepted> {
        for attempt in 1..=cfg.max_attempts {
            let v = self.generate(1, rng)?.row(0).to_owned();
            if cosine(v.as_slice().expect("owned row"), x_orig.as_slice())? < cfg.delta {
                return Ok(Accepted {
                    vector: SpeakerVector::from_array(v)?,
                    attempts: attempt,
                });
            }
        }
        Err(Error::RejectionExhausted {
            attempts: cfg.max_attempts,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Gan,
            sampler: self.sampler,
            components: vec![
                ("generator".into(), self.generator.clone()),
                ("discriminator".into(), self.discriminator.clone()),
            ],
            metadata: serde_json::to_value(&self.record).expect("record serializes"),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, ModelKind::Gan)?;
        Ok(Self {
            sampler: ck.sampler,
            generator: ck.component("generator")?.clone(),
            discriminator: ck.component("discriminator")?.clone(),
            record: TrainingRecord::from_metadata(&ck.metadata)?,
        })
    }

    pub fn config(&self) -> Result<GanConfig> {
        serde_json::from_value(self.record.config["gan"].clone())
            .map_err(|e| Error::Metadata(format!("gan config: {e}")))
    }
}

fn input_batch<R: Rng + ?Sized>(sampler: &SamplerConfig, rows: usize, rng: &mut R) -> Array2<f64> {
    let mut z = Array2::zeros((rows, sampler.dimension));
    for mut row in z.outer_iter_mut() {
        let e = sample_idv(IdentityIndex(rng.next_u64() >> 1), sampler);
        row.assign(&e.view());
    }
    z
}

/// Potentials in the critic's sign convention: the critic tracks `hx` on
/// real vectors and `−hv` on generated ones, so that raising the critic's
/// value on a generated vector moves it toward the data.
pub fn critic_targets(duals: &DualPotentials) -> DualPotentials {
    DualPotentials {
        hv: duals.hv.iter().map(|h| -h).collect(),
        ..duals.clone()
    }
}

/// Alternating critic and generator steps on utterance-level vectors.
pub fn train_gan(
    corpus: &VectorCorpus,
    sampler: &SamplerConfig,
    cfg: &GanConfig,
    seed: u64,
) -> Result<GanModel> {
    if corpus.is_empty() {
        return Err(Error::Corpus("corpus has no utterances".into()));
    }
    if sampler.dimension != corpus.dim() {
        return Err(Error::Config(format!(
            "generator input width {} differs from corpus dimension {}",
            sampler.dimension,
            corpus.dim()
        )));
    }
    let m = cfg.qc.batch;
    if m < 2 {
        return Err(Error::Config("batch must hold at least two vectors".into()));
    }
    let width = corpus.dim();
    let k = cfg.qc.k_for(width);
    let real = Array2::from_shape_fn((corpus.len(), width), |(i, j)| corpus.row(i)[j] as f64);
    let mut g = gan_generator(width, seed);
    let mut d = discriminator(width, seed.wrapping_add(1));
    let mut adam_g = Adam::for_networks(cfg.adam, &[&g]);
    let mut adam_d = Adam::for_networks(cfg.adam, &[&d]);
    let mut rng = stream(seed, StreamDomain::Training);
    let mut d_curve = Vec::with_capacity(cfg.steps);
    let mut g_curve = Vec::with_capacity(cfg.steps);
    let fail = |step: usize, e: Error| Error::Training {
        step,
        message: e.to_string(),
    };
    for step in 0..cfg.steps {
        let z = input_batch(sampler, m, &mut rng);
        let v = g.forward(&z, Mode::Train)?;
        let rows = if corpus.len() >= m {
            choose_distinct(&mut rng, corpus.len(), m)
        } else {
            (0..m).map(|_| below(&mut rng, corpus.len() as u64) as usize).collect()
        };
        let xs = real.select(Axis(0), &rows);
        let duals = solve_dual_potentials(&xs.view(), &v.view(), k).map_err(|e| fail(step, e))?;
        if cfg.check_every > 0 && step % cfg.check_every == 0 {
            let cost = quadratic_cost(&xs.view(), &v.view(), k)?;
            let scale = cost.iter().fold(1.0f64, |a, &c| a.max(c.abs()));
            check_duals(&cost.view(), &duals, 1e-9 * scale).map_err(|e| fail(step, e))?;
        }
        let (loss_d, grads_d) =
            loss_discriminator(&mut d, &xs, &v, &critic_targets(&duals), k, cfg.qc.gamma)?;
        adam_d.step(&mut [&mut d], &grads_d).map_err(|e| fail(step, e))?;
        let (loss_g, dv) = loss_generator(&mut d, &v)?;
        if !loss_d.is_finite() || !loss_g.is_finite() {
            return Err(fail(step, Error::Numerics(format!("losses {loss_d}, {loss_g}"))));
        }
        d_curve.push(loss_d);
        g_curve.push(loss_g);
        let grads_g = g.backward_params(&dv)?;
        adam_g.step(&mut [&mut g], &grads_g).map_err(|e| fail(step, e))?;
    }
    g.clear_cache();
    d.clear_cache();
    let record = TrainingRecord {
        seed,
        steps: cfg.steps,
        loss_curve: d_curve,
        assignment: Default::default(),
        corpus_path: None,
        config: serde_json::json!({ "gan": cfg, "generator_loss": g_curve }),
    };
    Ok(GanModel {
        sampler: *sampler,
        generator: g,
        discriminator: d,
        record,
    })
}
