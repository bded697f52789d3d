//! The score-based diffusion generator: variance-preserving SDE with a
//! linear `β` schedule, weighted score matching, and a reverse-time solver.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_batch, concat, Backbone, SpeakerCorpus};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::model::{backbone_components, backbone_from, expect_kind, IdmapGenerator, TrainingRecord};
use crate::nn::{dense, Adam, AdamConfig, Layer, Mode, Network};
use crate::sampler::{standard_normal, stream, uniform, SamplerConfig, StreamDomain};
use crate::vector::IdentityIndex;

/// Smallest training time; keeps the perturbation variance away from 0.
pub const T_MIN: f64 = 1e-3;

/// Width of the sinusoidal time embedding.
pub const TIME_EMBEDDING: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range {
            name: "t",
            value: t,
            range: "[0, 1]",
        });
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + t * (self.beta1 - self.beta0)
    }

    /// `∫₀ᵗ β(r) dr`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta0 * t + (self.beta1 - self.beta0) * t * t / 2.0
    }

    /// Signal scale of the perturbation kernel at time `t`.
    pub fn gamma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok((-0.5 * self.integral(t)).exp())
    }

    /// Loss weight `1 − e^{−B(t)}`, the kernel variance.
    pub fn lambda(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(-(-self.integral(t)).exp_m1())
    }

    /// Kernel standard deviation `√(1 − γ²)`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.lambda(t)?.sqrt())
    }

    /// `γ q₀ + √(1 − γ²) ε`.
    pub fn forward_sample(&self, q0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
        if q0.len() != noise.len() {
            return Err(Error::shape(q0.len(), noise.len()));
        }
        let g = self.gamma(t)?;
        let sd = self.sigma(t)?;
        Ok(q0.iter().zip(noise).map(|(q, e)| g * q + sd * e).collect())
    }

    /// Score of the perturbation kernel, `−(q_t − γ q₀)/(1 − γ²)`.
    pub fn score_target(&self, q0: &[f64], qt: &[f64], t: f64) -> Result<Vec<f64>> {
        if q0.len() != qt.len() {
            return Err(Error::shape(q0.len(), qt.len()));
        }
        let var = self.lambda(t)?;
        if var <= 0.0 {
            return Err(Error::Range {
                name: "t",
                value: t,
                range: "(0, 1]",
            });
        }
        let g = self.gamma(t)?;
        Ok(q0.iter().zip(qt).map(|(a, b)| -(b - g * a) / var).collect())
    }
}

/// Anything that estimates `∇ log p_t(q | z)` row by row.
pub trait ScoreModel {
    fn score(&self, q: &Array2<f64>, z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>>;
}

/// Exact score when the data are `N(μ, σ²I)` regardless of `z`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub schedule: NoiseSchedule,
    pub mean: Array1<f64>,
    pub variance: f64,
}

impl ScoreModel for GaussianScore {
    fn score(&self, q: &Array2<f64>, _z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let mut out = q.clone();
        for (mut row, &ti) in out.outer_iter_mut().zip(t) {
            let g = self.schedule.gamma(ti)?;
            let var = g * g * self.variance + self.schedule.lambda(ti)?;
            for (v, m) in row.iter_mut().zip(self.mean.iter()) {
                *v = -(*v - g * m) / var;
            }
        }
        Ok(out)
    }
}

/// Returns the kernel score for known clean rows `q0`.
#[derive(Debug, Clone)]
pub struct OracleScore {
    pub schedule: NoiseSchedule,
    pub q0: Array2<f64>,
}

impl ScoreModel for OracleScore {
    fn score(&self, q: &Array2<f64>, _z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(q.raw_dim());
        for i in 0..q.nrows() {
            let s = self.schedule.score_target(
                &self.q0.row(i).to_vec(),
                &q.row(i).to_vec(),
                t[i],
            )?;
            out.row_mut(i).assign(&Array1::from(s));
        }
        Ok(out)
    }
}

/// Sinusoidal features of `1000 t`, sines then cosines.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBEDDING] {
    let half = TIME_EMBEDDING / 2;
    let mut out = [0.0; TIME_EMBEDDING];
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * w;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

/// Time-conditioned MLP on `[q | z | emb(t)]`. The score is
/// `net / σ(t) − q`: the standard-normal score plus a learned residual, so
/// the network predicts scaled noise relative to that prior and only has to
/// supply what depends on the identity.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    pub net: Network<f64>,
    pub schedule: NoiseSchedule,
    width: usize,
}

impl ScoreNet {
    /// Width `d` of the scored vectors.
    pub fn width(&self) -> usize {
        self.width
    }

    /// `width` is `d`; the conditioning vector is `2d` wide.
    pub fn new(width: usize, hidden: usize, schedule: NoiseSchedule, seed: u64) -> Self {
        let mut net = Network::new(vec![
            dense(3 * width + TIME_EMBEDDING, hidden),
            Layer::relu(),
            dense(hidden, hidden),
            Layer::relu(),
            dense(hidden, width),
        ])
        .expect("static architecture");
        net.init(seed);
        Self {
            net,
            schedule,
            width,
        }
    }

    pub fn from_network(net: Network<f64>, schedule: NoiseSchedule) -> Result<Self> {
        let width = net
            .output_width()
            .ok_or_else(|| Error::State("score network has no output layer".into()))?;
        Ok(Self {
            net,
            schedule,
            width,
        })
    }

    fn input(&self, q: &Array2<f64>, z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let rows = q.nrows();
        if q.ncols() != self.width || z.ncols() != 2 * self.width || z.nrows() != rows || t.len() != rows {
            return Err(Error::shape(
                format!("q {rows}x{}, z {rows}x{}", self.width, 2 * self.width),
                format!("q {:?}, z {:?}, {} times", q.dim(), z.dim(), t.len()),
            ));
        }
        let mut emb = Array2::zeros((rows, TIME_EMBEDDING));
        for (mut row, &ti) in emb.outer_iter_mut().zip(t) {
            row.assign(&ndarray::ArrayView1::from(&time_embedding(ti)));
        }
        let qz = concat(&q.view(), &z.view())?;
        concat(&qz.view(), &emb.view())
    }

    fn sigmas(&self, t: &[f64]) -> Result<Vec<f64>> {
        t.iter().map(|&ti| self.schedule.sigma(ti)).collect()
    }

    fn finish(&self, mut raw: Array2<f64>, q: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        for (mut row, sd) in raw.outer_iter_mut().zip(self.sigmas(t)?) {
            row /= sd;
        }
        raw -= q;
        Ok(raw)
    }

    /// Train-mode forward; caches for [`ScoreNet::backward`].
    pub fn forward(&mut self, q: &Array2<f64>, z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let x = self.input(q, z, t)?;
        let raw = self.net.forward(&x, Mode::Train)?;
        self.finish(raw, q, t)
    }

    /// Parameter gradient and the gradient with respect to `z`.
    pub fn backward(&mut self, grad_score: &Array2<f64>, t: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut g = grad_score.clone();
        for (mut row, sd) in g.outer_iter_mut().zip(self.sigmas(t)?) {
            row /= sd;
        }
        let (grads, dx) = self.net.backward(&g)?;
        let dz = dx.slice(s![.., self.width..3 * self.width]).to_owned();
        Ok((grads, dz))
    }
}

impl ScoreModel for ScoreNet {
    fn score(&self, q: &Array2<f64>, z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let x = self.input(q, z, t)?;
        let raw = self.net.infer(&x.view())?;
        self.finish(raw, q, t)
    }
}

/// Perturbed batch for score matching: one time per row, then that row's
/// noise, drawn in row order.
pub struct PerturbedBatch {
    pub t: Vec<f64>,
    pub qt: Array2<f64>,
    pub target: Array2<f64>,
}

pub fn perturb<R: Rng + ?Sized>(q0: &Array2<f64>, schedule: &NoiseSchedule, rng: &mut R) -> Result<PerturbedBatch> {
    let mut t = Vec::with_capacity(q0.nrows());
    let mut qt = Array2::zeros(q0.raw_dim());
    let mut target = Array2::zeros(q0.raw_dim());
    for (i, row) in q0.outer_iter().enumerate() {
        let ti = uniform(rng, T_MIN, 1.0);
        let noise: Vec<f64> = (0..q0.ncols()).map(|_| standard_normal(rng)).collect();
        let q0i = row.to_vec();
        let qi = schedule.forward_sample(&q0i, ti, &noise)?;
        target.row_mut(i).assign(&Array1::from(schedule.score_target(&q0i, &qi, ti)?));
        qt.row_mut(i).assign(&Array1::from(qi));
        t.push(ti);
    }
    Ok(PerturbedBatch { t, qt, target })
}

/// Weighted score-matching loss and its gradient with respect to the
/// predicted scores.
fn weighted_error(
    schedule: &NoiseSchedule,
    batch: &PerturbedBatch,
    score: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let b = score.nrows() as f64;
    let mut total = 0.0;
    let mut grad = score - &batch.target;
    for (mut row, &ti) in grad.outer_iter_mut().zip(&batch.t) {
        let lam = schedule.lambda(ti)?;
        total += lam * row.iter().map(|v| v * v).sum::<f64>();
        row *= 2.0 * lam / b;
    }
    let loss = total / b;
    if !loss.is_finite() {
        return Err(Error::Numerics(format!("score-matching loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Monte-Carlo weighted score-matching loss for clean rows `q0` and
/// conditioning rows `z`.
pub fn loss_diff<S: ScoreModel, R: Rng + ?Sized>(
    q0: &Array2<f64>,
    z: &Array2<f64>,
    schedule: &NoiseSchedule,
    model: &S,
    rng: &mut R,
) -> Result<f64> {
    let batch = perturb(q0, schedule, rng)?;
    let score = model.score(&batch.qt, z, &batch.t)?;
    Ok(weighted_error(schedule, &batch, &score)?.0)
}

/// Discretizes the reverse-time SDE from `t = 1` to `t = 0`.
pub trait ReverseSolver {
    /// One noise stream per row; each stream supplies the row's starting
    /// point and then its per-step noise.
    fn solve(
        &self,
        model: &dyn ScoreModel,
        z: &Array2<f64>,
        schedule: &NoiseSchedule,
        width: usize,
        rngs: &mut [Pcg64],
    ) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EulerMaruyama {
    pub steps: usize,
}

impl Default for EulerMaruyama {
    fn default() -> Self {
        Self { steps: 5 }
    }
}

impl ReverseSolver for EulerMaruyama {
    fn solve(
        &self,
        model: &dyn ScoreModel,
        z: &Array2<f64>,
        schedule: &NoiseSchedule,
        width: usize,
        rngs: &mut [Pcg64],
    ) -> Result<Array2<f64>> {
        if self.steps == 0 {
            return Err(Error::Config("solver needs at least one step".into()));
        }
        let rows = rngs.len();
        let mut q = Array2::zeros((rows, width));
        for (mut row, rng) in q.outer_iter_mut().zip(rngs.iter_mut()) {
            row.mapv_inplace(|_| standard_normal(rng));
        }
        let h = 1.0 / self.steps as f64;
        for k in 0..self.steps {
            let t = 1.0 - k as f64 * h;
            let s = model.score(&q, z, &vec![t; rows])?;
            let hb = h * schedule.beta(t);
            let sd = hb.sqrt();
            for ((mut row, srow), rng) in q.outer_iter_mut().zip(s.outer_iter()).zip(rngs.iter_mut()) {
                for (v, sv) in row.iter_mut().zip(srow) {
                    *v = *v - hb * (-0.5 * *v - sv) + sd * standard_normal(rng);
                }
            }
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!("reverse state non-finite at step {k}")));
            }
        }
        Ok(q)
    }
}

/// Reverse-generates one row per noise seed.
pub fn reverse_generate(
    model: &dyn ScoreModel,
    z: &Array2<f64>,
    schedule: &NoiseSchedule,
    solver: &dyn ReverseSolver,
    width: usize,
    noise_seeds: &[u64],
) -> Result<Array2<f64>> {
    if noise_seeds.len() != z.nrows() {
        return Err(Error::shape(z.nrows(), noise_seeds.len()));
    }
    let mut rngs: Vec<Pcg64> = noise_seeds
        .iter()
        .map(|&s| stream(s, StreamDomain::DiffusionNoise))
        .collect();
    solver.solve(model, z, schedule, width, &mut rngs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffConfig {
    pub steps: usize,
    pub n_id: usize,
    pub n_aux: usize,
    pub hidden: usize,
    pub schedule: NoiseSchedule,
    pub solver: EulerMaruyama,
    pub adam: AdamConfig,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            n_id: 16,
            n_aux: 16,
            hidden: 1024,
            schedule: NoiseSchedule::default(),
            solver: EulerMaruyama::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffModel {
    pub sampler: SamplerConfig,
    pub backbone: Backbone,
    pub score: ScoreNet,
    pub solver: EulerMaruyama,
    pub record: TrainingRecord,
}

impl IdmapGenerator for DiffModel {
    fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn record(&self) -> &TrainingRecord {
        &self.record
    }

    /// The reverse-process noise of each row is seeded by its identity
    /// index, so an index always maps to the same vector.
    fn generate_from_z(&self, z: &Array2<f64>, indices: &[IdentityIndex]) -> Result<Array2<f64>> {
        let seeds: Vec<u64> = indices.iter().map(|i| i.get()).collect();
        reverse_generate(
            &self.score,
            z,
            &self.score.schedule,
            &self.solver,
            self.score.width,
            &seeds,
        )
    }
}

impl DiffModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut components = backbone_components(&self.backbone);
        components.push(("score_net".into(), self.score.net.clone()));
        Checkpoint {
            kind: ModelKind::Diffusion,
            sampler: self.sampler,
            components,
            metadata: serde_json::to_value(&self.record).expect("record serializes"),
        }
    }

    pub fn config(&self) -> Result<DiffConfig> {
        serde_json::from_value(self.record.config["diffusion"].clone())
            .map_err(|e| Error::Metadata(format!("diffusion config: {e}")))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, ModelKind::Diffusion)?;
        let record = TrainingRecord::from_metadata(&ck.metadata)?;
        let cfg: DiffConfig = serde_json::from_value(record.config["diffusion"].clone())
            .map_err(|e| Error::Metadata(format!("diffusion config: {e}")))?;
        Ok(Self {
            sampler: ck.sampler,
            backbone: backbone_from(ck)?,
            score: ScoreNet::from_network(ck.component("score_net")?.clone(), cfg.schedule)?,
            solver: cfg.solver,
            record,
        })
    }
}

/// Trains backbone and score network jointly on the triplet protocol with
/// `q₀` the target speaker mean.
pub fn train_diff(
    corpus: &SpeakerCorpus,
    sampler: &SamplerConfig,
    cfg: &DiffConfig,
    seed: u64,
) -> Result<DiffModel> {
    if corpus.speakers() < 2 {
        return Err(Error::Corpus("training needs at least two speakers".into()));
    }
    if cfg.solver.steps == 0 {
        return Err(Error::Config("solver needs at least one step".into()));
    }
    let width = corpus.dim();
    let mut backbone = Backbone::new(sampler.dimension, width, seed);
    let mut score = ScoreNet::new(width, cfg.hidden, cfg.schedule, seed.wrapping_add(2));
    let mut adam = Adam::for_networks(cfg.adam, &[&backbone.pre.net, &backbone.aux.net, &score.net]);
    let mut rng = stream(seed, StreamDomain::Training);
    let mut curve = Vec::with_capacity(cfg.steps);
    let fail = |step: usize, e: Error| Error::Training {
        step,
        message: e.to_string(),
    };
    for step in 0..cfg.steps {
        let batch = build_batch(corpus, cfg.n_id, cfg.n_aux, &mut rng)?;
        let fwd = backbone.forward_batch(corpus, &batch, sampler)?;
        let rows: Vec<usize> = batch.iter().map(|t| t.speaker).collect();
        let q0 = corpus.means().select(Axis(0), &rows);
        let pert = perturb(&q0, &cfg.schedule, &mut rng)?;
        let s = score.forward(&pert.qt, &fwd.z, &pert.t)?;
        let (loss, gs) = weighted_error(&cfg.schedule, &pert, &s).map_err(|e| fail(step, e))?;
        curve.push(loss);
        let (g_score, dz) = score.backward(&gs, &pert.t)?;
        let mut grads = backbone.backward_batch(&fwd, &dz)?;
        grads.extend(g_score);
        let Backbone { pre, aux } = &mut backbone;
        adam.step(&mut [&mut pre.net, &mut aux.net, &mut score.net], &grads)
            .map_err(|e| fail(step, e))?;
    }
    backbone.pre.net.clear_cache();
    backbone.aux.net.clear_cache();
    score.net.clear_cache();
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
        config: serde_json::json!({
            "diffusion": cfg,
            "score_network": "time-conditioned MLP on [q | z | sinusoidal(t)]; score = output / sigma(t) - q",
            "solver": "euler-maruyama",
        }),
    };
    Ok(DiffModel {
        sampler: *sampler,
        backbone,
        score,
        solver: cfg.solver,
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

    const SCHED: NoiseSchedule = NoiseSchedule {
        beta0: 0.05,
        beta1: 20.0,
    };

    #[test]
    fn gamma_closed_form_values() {
        assert_eq!(SCHED.gamma(0.0).unwrap(), 1.0);
        assert!((SCHED.gamma(1.0).unwrap() - (-5.0125f64).exp()).abs() < 1e-15);
        assert!((SCHED.gamma(1.0).unwrap() - 6.654_3e-3).abs() < 1e-7);
        assert!(matches!(SCHED.gamma(1.5), Err(Error::Range { .. })));
        assert!(matches!(SCHED.gamma(-0.1), Err(Error::Range { .. })));
    }

    #[test]
    fn gamma_matches_quadrature() {
        for &t in &[0.05, 0.3, 0.61, 0.9, 1.0] {
            // Composite Simpson on the (linear) integrand.
            let n = 1000;
            let h = t / n as f64;
            let mut acc = SCHED.beta(0.0) + SCHED.beta(t);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * SCHED.beta(i as f64 * h);
            }
            let integral = acc * h / 3.0;
            let want = (-0.5 * integral).exp();
            let got = SCHED.gamma(t).unwrap();
            assert!(((got - want) / want).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn gamma_decreasing_lambda_increasing() {
        let mut prev_g = f64::INFINITY;
        let mut prev_l = -1.0;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let g = SCHED.gamma(t).unwrap();
            let l = SCHED.lambda(t).unwrap();
            assert!(g < prev_g && l > prev_l);
            assert!((l - (1.0 - (-SCHED.integral(t)).exp())).abs() < 1e-10);
            prev_g = g;
            prev_l = l;
        }
        assert_eq!(SCHED.lambda(0.0).unwrap(), 0.0);
        assert!((SCHED.lambda(1.0).unwrap() - 0.99996).abs() < 1e-5);
    }

    #[test]
    fn forward_sample_endpoints_and_moments() {
        let q0 = [0.5, -1.0, 2.0];
        let noise = [0.3, 0.1, -0.7];
        assert_eq!(SCHED.forward_sample(&q0, 0.0, &noise).unwrap(), q0.to_vec());
        let mut rng = stream(11, StreamDomain::Eval);
        let n = 10_000;
        let g = SCHED.gamma(1.0).unwrap();
        let var = 1.0 - g * g;
        for (j, &q) in q0.iter().enumerate() {
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    let e: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
                    SCHED.forward_sample(&q0, 1.0, &e).unwrap()[j]
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((mean - g * q).abs() < 4.0 * (var / n as f64).sqrt());
            // Variance of the sample variance is 2σ⁴/(n − 1) for normal data.
            assert!((v - var).abs() < 4.0 * (2.0 * var * var / (n - 1) as f64).sqrt());
        }
    }

    #[test]
    fn score_target_values() {
        let q0 = [0.4, -0.2];
        let g = SCHED.gamma(0.5).unwrap();
        let at_mean = [g * q0[0], g * q0[1]];
        assert!(SCHED.score_target(&q0, &at_mean, 0.5).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(SCHED.score_target(&q0, &q0, 0.0), Err(Error::Range { .. })));
        // Find t with γ² = 0.75, i.e. B(t) = ln(4/3).
        let target = (4.0f64 / 3.0).ln();
        let (a, b) = (SCHED.beta1 - SCHED.beta0, SCHED.beta0);
        let t = (-b + (b * b + 2.0 * a * target).sqrt()) / a;
        let s = SCHED.score_target(&[0.0], &[1.0], t).unwrap()[0];
        assert!((s + 4.0).abs() < 1e-12);
    }

    #[test]
    fn score_target_is_log_density_gradient() {
        let q0 = [0.7, -1.1, 0.2];
        let qt = [0.1, 0.5, -0.4];
        let t = 0.37;
        let g = SCHED.gamma(t).unwrap();
        let var = 1.0 - g * g;
        let log_density = |q: &[f64]| {
            q.iter()
                .zip(&q0)
                .map(|(x, m)| -(x - g * m).powi(2) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln())
                .sum::<f64>()
        };
        let fd = central_differences(log_density, &qt, &[0, 1, 2], STEP);
        let s = SCHED.score_target(&q0, &qt, t).unwrap();
        assert!(max_relative_error(&fd, &s) < 1e-6);
    }

    #[test]
    fn oracle_score_has_zero_loss() {
        let mut rng = stream(4, StreamDomain::Eval);
        let q0 = Array2::from_shape_fn((8, 5), |_| standard_normal(&mut rng));
        let z = Array2::zeros((8, 10));
        let oracle = OracleScore {
            schedule: SCHED,
            q0: q0.clone(),
        };
        let mut a = stream(9, StreamDomain::Training);
        let loss = loss_diff(&q0, &z, &SCHED, &oracle, &mut a).unwrap();
        assert!(loss.abs() < 1e-18, "{loss}");
    }

    fn gaussian_run(steps: usize, seeds: std::ops::Range<u64>, mu: &Array1<f64>) -> Array1<f64> {
        let oracle = GaussianScore {
            schedule: SCHED,
            mean: mu.clone(),
            variance: 0.25,
        };
        let seeds: Vec<u64> = seeds.collect();
        let z = Array2::zeros((seeds.len(), 0));
        let out = reverse_generate(&oracle, &z, &SCHED, &EulerMaruyama { steps }, mu.len(), &seeds).unwrap();
        out.mean_axis(Axis(0)).unwrap()
    }

    #[test]
    fn analytic_score_recovers_gaussian_mean() {
        let mu = Array1::from(vec![1.5, -0.5, 0.8]);
        let n = 10_000u64;
        let mean = gaussian_run(1000, 0..n, &mu);
        // Data standard deviation 0.5 per dimension.
        let se = 0.5 / (n as f64).sqrt();
        for (m, t) in mean.iter().zip(mu.iter()) {
            assert!((m - t).abs() < 4.0 * se, "{m} vs {t}");
        }
    }

    #[test]
    fn more_steps_reduce_mean_error() {
        let mu = Array1::from(vec![1.5, -0.5, 0.8]);
        let err = |steps: usize| {
            (0..20u64)
                .map(|k| {
                    let m = gaussian_run(steps, k * 500..(k + 1) * 500, &mu);
                    (&m - &mu).mapv(|v| v * v).sum().sqrt()
                })
                .sum::<f64>()
                / 20.0
        };
        let (coarse, fine) = (err(5), err(100));
        assert!(fine < coarse, "{coarse} -> {fine}");
    }

    #[test]
    fn reverse_generate_is_deterministic_per_seed() {
        let mu = Array1::from(vec![1.0, 2.0]);
        let oracle = GaussianScore {
            schedule: SCHED,
            mean: mu,
            variance: 1.0,
        };
        let z = Array2::zeros((3, 0));
        let em = EulerMaruyama::default();
        let a = reverse_generate(&oracle, &z, &SCHED, &em, 2, &[1, 2, 3]).unwrap();
        let b = reverse_generate(&oracle, &z, &SCHED, &em, 2, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        let single = reverse_generate(&oracle, &Array2::zeros((1, 0)), &SCHED, &em, 2, &[2]).unwrap();
        assert_eq!(single.row(0), a.row(1));
    }

    #[test]
    fn score_net_gradients_match_finite_differences() {
        let width = 4;
        let mut net = ScoreNet::new(width, 8, SCHED, 3);
        let mut rng = stream(5, StreamDomain::Eval);
        let q = Array2::from_shape_fn((3, width), |_| standard_normal(&mut rng));
        let z = Array2::from_shape_fn((3, 2 * width), |_| standard_normal(&mut rng));
        let t = vec![0.2, 0.5, 0.9];
        let target = Array2::from_shape_fn((3, width), |_| standard_normal(&mut rng));
        let loss_of = |s: &Array2<f64>| 0.5 * (s - &target).mapv(|v| v * v).sum();
        let s = net.forward(&q, &z, &t).unwrap();
        let (grads, dz) = net.backward(&(&s - &target), &t).unwrap();
        let base = net.net.params_flat();
        let which = crate::nn::gradcheck::spread(base.len(), 60);
        let fd = central_differences(
            |p| {
                net.net.set_params_flat(p).unwrap();
                loss_of(&net.score(&q, &z, &t).unwrap())
            },
            &base,
            &which,
            STEP,
        );
        net.net.set_params_flat(&base).unwrap();
        let analytic: Vec<f64> = which.iter().map(|&k| grads[k]).collect();
        assert!(max_relative_error(&fd, &analytic) < 1e-4);
        let zflat: Vec<f64> = z.iter().copied().collect();
        let fd = central_differences(
            |v| {
                let zz = Array2::from_shape_vec(z.dim(), v.to_vec()).unwrap();
                loss_of(&net.score(&q, &zz, &t).unwrap())
            },
            &zflat,
            &(0..zflat.len()).collect::<Vec<_>>(),
            STEP,
        );
        let analytic: Vec<f64> = dz.iter().copied().collect();
        assert!(max_relative_error(&fd, &analytic) < 1e-4);
    }

    fn tiny() -> (SpeakerCorpus, SamplerConfig, DiffConfig) {
        let c = generate_synthetic(&SyntheticSpec {
            speakers: 6,
            utterances: 4,
            dim: 8,
            ..SyntheticSpec::calibrated(3)
        })
        .unwrap();
        let cfg = DiffConfig {
            steps: 20,
            n_id: 4,
            n_aux: 4,
            hidden: 16,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..DiffConfig::default()
        };
        (
            SpeakerCorpus::new(&c).unwrap(),
            SamplerConfig::new(Distribution::StandardNormal, 8).unwrap(),
            cfg,
        )
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let (corpus, sampler, cfg) = tiny();
        let a = train_diff(&corpus, &sampler, &cfg, 1).unwrap();
        let b = train_diff(&corpus, &sampler, &cfg, 1).unwrap();
        let bytes = a.to_checkpoint().to_bytes();
        assert_eq!(bytes, b.to_checkpoint().to_bytes());
        let back = DiffModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        assert_eq!(back.config().unwrap(), cfg);
        let aux = SpeakerVector::new(corpus.vectors().row(1).to_vec()).unwrap();
        assert_eq!(
            a.infer(IdentityIndex(9), &aux, &sampler).unwrap(),
            back.infer(IdentityIndex(9), &aux, &sampler).unwrap()
        );
    }

    #[test]
    fn training_reduces_loss() {
        let (corpus, sampler, mut cfg) = tiny();
        cfg.steps = 400;
        let m = train_diff(&corpus, &sampler, &cfg, 2).unwrap();
        let c = &m.record.loss_curve;
        let head: f64 = c[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = c[c.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail < 0.6 * head, "{head} -> {tail}");
    }
}
