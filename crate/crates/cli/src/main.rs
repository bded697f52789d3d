use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use idmap_core::anonymizer::{
    anonymize_corpus, read_output, resolve_aux, AuxSelection, CorpusOptions, Engine, Mode, RegistryRef, Session,
    SessionOptions, SessionState, Strategy, MANIFEST_FILE, SESSION_FILE,
};
use idmap_core::backbone::SpeakerCorpus;
use idmap_core::corpus::{generate_synthetic, import_external, read_corpus, write_corpus, SyntheticSpec, CALIBRATED_SHARED};
use idmap_core::diffusion::{train_diff, DiffConfig};
use idmap_core::eval::{
    aux_probe, bench_latency, capacity_curve, distinctness_metrics, linkage_attack, FixedCondition, VectorSource,
};
use idmap_core::gan::{train_gan, GanConfig, RejectionConfig};
use idmap_core::mlp::{train_mlp, MlpConfig};
use idmap_core::model::IdmapGenerator;
use idmap_core::sampler::{Distribution, IdentityRegistry, SamplerConfig};
use idmap_core::strategy::ReferencePool;
use idmap_core::vector::SpeakerVector;
use idmap_core::Error;

#[derive(Parser)]
#[command(name = "idmap", version, about = "Pseudo-speaker generation from identity indices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the identity-index MLP generator.
    TrainMlp(TrainArgs),
    /// Train the identity-index diffusion generator.
    TrainDiff(TrainArgs),
    /// Train the quadratic-cost WGAN baseline.
    TrainGan(TrainArgs),
    /// Anonymize a corpus.
    Anonymize(AnonymizeArgs),
    #[command(subcommand)]
    Session(SessionCmd),
    #[command(subcommand)]
    Registry(RegistryCmd),
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// TOML with optional `seed`, `distribution`, and `[mlp]`, `[diff]`,
    /// `[gan]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    distribution: Option<Distribution>,
    #[serde(default)]
    mlp: MlpConfig,
    #[serde(default)]
    diff: DiffConfig,
    #[serde(default)]
    gan: GanConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Utterance,
    Speaker,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Utterance => Mode::Utterance,
            ModeArg::Speaker => Mode::Speaker,
        }
    }
}

#[derive(Args)]
struct AnonymizeArgs {
    /// Trained checkpoint (mlp, diff, gan).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference-pool corpus (rs, avg).
    #[arg(long)]
    pool: Option<PathBuf>,
    /// rs, avg, mlp, diff or gan; defaults to the checkpoint kind.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "utterance")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed for drawing the auxiliary vector from the training corpus.
    #[arg(long)]
    aux_seed: Option<u64>,
    /// Draw the auxiliary vector from this corpus instead.
    #[arg(long)]
    aux_corpus: Option<PathBuf>,
    /// JSON array holding the auxiliary vector.
    #[arg(long)]
    aux_vector: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    delta: f64,
    #[arg(long, default_value_t = 100)]
    max_attempts: usize,
    /// Cohort size of the averaging strategy.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Continue an interrupted run in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Subcommand)]
enum SessionCmd {
    /// Print a session file.
    Show { file: PathBuf },
}

#[derive(Subcommand)]
enum RegistryCmd {
    /// Print the index count and a sample.
    Inspect {
        path: PathBuf,
        #[arg(long, default_value_t = 10)]
        sample: usize,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Write a synthetic Gaussian corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utterances: usize,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = CALIBRATED_SHARED)]
        shared: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print corpus statistics.
    Inspect { path: PathBuf },
    /// Convert raw f32 vectors plus a CSV of metadata.
    Import {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AuxArgs {
    #[arg(long, default_value_t = 0)]
    aux_seed: u64,
    #[arg(long)]
    aux_corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Pairwise cosine of fresh vectors against the number generated.
    Capacity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000,100000")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        pair_budget: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        aux: AuxArgs,
        /// CSV of (n, mean, min, max).
        #[arg(long)]
        emit_curve: Option<PathBuf>,
    },
    /// Cross-speaker cosine at each auxiliary-processor tap.
    AuxProbe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Equal error rate of a cosine attacker on anonymized output.
    Linkage {
        /// Output directory of `idmap anonymize`.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gain of voice distinctiveness and de-identification.
    Distinctness {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Per-vector generation latency and real-time factor.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        aux: AuxArgs,
    },
}

enum Failure {
    Core(Error),
    Config(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 4,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::ConfigMismatch { .. } | Error::Range { .. } | Error::DegenerateVector(_) => 2,
                Error::CapacityExhausted { .. } | Error::RejectionExhausted { .. } => 3,
                Error::Storage { .. } | Error::Format { .. } => 4,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Config(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::TrainMlp(a) => train(Method::Mlp, a),
        Command::TrainDiff(a) => train(Method::Diff, a),
        Command::TrainGan(a) => train(Method::Gan, a),
        Command::Anonymize(a) => anonymize(a),
        Command::Session(SessionCmd::Show { file }) => session_show(&file),
        Command::Registry(RegistryCmd::Inspect { path, sample }) => registry_inspect(&path, sample),
        Command::Corpus(c) => corpus(c),
        Command::Eval(e) => eval(e),
    }
}

fn emit<T: Serialize>(record: &T) {
    println!("{}", serde_json::to_string(record).expect("report serializes"));
}

#[derive(Clone, Copy)]
enum Method {
    Mlp,
    Diff,
    Gan,
}

fn train(method: Method, a: TrainArgs) -> Outcome {
    let cfg: TrainFile = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let corpus = read_corpus(&a.corpus)?;
    if corpus.is_empty() {
        return Err(Failure::Config("training corpus is empty".into()));
    }
    let sampler = SamplerConfig::new(cfg.distribution.unwrap_or(Distribution::StandardNormal), corpus.dim())?;
    let corpus_path = std::fs::canonicalize(&a.corpus).map(|p| p.display().to_string()).ok();
    let start = std::time::Instant::now();
    let (ck, loss) = match method {
        Method::Mlp => {
            let mut m = train_mlp(&SpeakerCorpus::new(&corpus)?, &sampler, &cfg.mlp, cfg.seed)?;
            m.record.corpus_path = corpus_path;
            (m.to_checkpoint(), m.record.loss_curve.last().copied())
        }
        Method::Diff => {
            let mut m = train_diff(&SpeakerCorpus::new(&corpus)?, &sampler, &cfg.diff, cfg.seed)?;
            m.record.corpus_path = corpus_path;
            (m.to_checkpoint(), m.record.loss_curve.last().copied())
        }
        Method::Gan => {
            let mut m = train_gan(&corpus, &sampler, &cfg.gan, cfg.seed)?;
            m.record.corpus_path = corpus_path;
            (m.to_checkpoint(), m.record.loss_curve.last().copied())
        }
    };
    ck.save(&a.out)?;
    emit(&serde_json::json!({
        "kind": ck.kind.name(),
        "out": a.out.display().to_string(),
        "final_loss": loss,
        "seconds": start.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn read_vector(path: &Path) -> Result<SpeakerVector, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let values: Vec<f64> =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(SpeakerVector::new(values)?)
}

fn build_engine(a: &AnonymizeArgs) -> Result<Engine, Failure> {
    let requested = a.strategy.as_deref().map(Strategy::parse).transpose()?;
    let rejection = RejectionConfig::new(a.delta, a.max_attempts)?;
    match (requested, &a.model, &a.pool) {
        (Some(Strategy::RandomSelect | Strategy::AverageFarthest), _, None) => {
            Err(Failure::Config("pool strategies need --pool".into()))
        }
        (Some(s @ (Strategy::RandomSelect | Strategy::AverageFarthest)), _, Some(pool)) => {
            let pool = ReferencePool::from_corpus(&read_corpus(pool)?)?;
            Ok(if s == Strategy::RandomSelect {
                Engine::RandomSelect(pool)
            } else {
                Engine::AverageFarthest(pool, a.k)
            })
        }
        (_, None, _) => Err(Failure::Config("--model is required for mlp, diff and gan".into())),
        (req, Some(model), _) => {
            let engine = Engine::load_model(model, rejection)?;
            if let Some(s) = req {
                if s != engine.strategy() {
                    return Err(Failure::Config(format!(
                        "--strategy {} does not match the {} checkpoint",
                        s.name(),
                        engine.strategy().name()
                    )));
                }
            }
            Ok(engine)
        }
    }
}

fn anonymize(a: AnonymizeArgs) -> Outcome {
    let session_path = a.out.join(SESSION_FILE);
    let started = a.out.join(MANIFEST_FILE).exists();
    let mut session = if started {
        if !a.resume {
            return Err(Failure::Config(format!(
                "{} already holds output; pass --resume to continue it",
                a.out.display()
            )));
        }
        Session::reopen(&session_path)?
    } else {
        let engine = build_engine(&a)?;
        let strategy = engine.strategy();
        if strategy.uses_indices() && a.registry.is_none() {
            return Err(Failure::Config(format!("the {} strategy needs --registry", strategy.name())));
        }
        let aux = if !strategy.uses_indices() {
            if a.aux_seed.is_some() || a.aux_corpus.is_some() || a.aux_vector.is_some() {
                return Err(Failure::Config(format!("the {} strategy takes no auxiliary vector", strategy.name())));
            }
            None
        } else if let Some(p) = &a.aux_vector {
            Some(AuxSelection::Explicit(read_vector(p)?))
        } else {
            Some(AuxSelection::Random {
                seed: a.aux_seed.unwrap_or(a.seed),
                corpus: a.aux_corpus.clone(),
            })
        };
        std::fs::create_dir_all(&a.out).map_err(|e| Failure::Io(format!("{}: {e}", a.out.display())))?;
        Session::open(
            engine,
            SessionOptions {
                registry: a.registry.clone().map_or(RegistryRef::InMemory, RegistryRef::File),
                aux,
                seed: a.seed,
                model_path: a.model.clone(),
                pool_path: a.pool.clone(),
                session_path: Some(session_path),
            },
        )?
    };
    let summary = anonymize_corpus(
        &mut session,
        &a.corpus,
        &a.out,
        &CorpusOptions {
            mode: a.mode.into(),
            stop_after: a.stop_after,
            ..CorpusOptions::default()
        },
    )?;
    emit(&summary);
    Ok(())
}

fn session_show(file: &Path) -> Outcome {
    let s = SessionState::load(file)?;
    println!("session     {}", s.session_id);
    println!("created_at  {}", s.created_at);
    println!("strategy    {}", s.strategy.name());
    if let Some(m) = &s.model_path {
        println!("model       {m}");
    }
    if let Some(p) = &s.pool_path {
        println!("pool        {p}");
    }
    if let Some(r) = &s.registry_path {
        println!("registry    {r}");
    }
    if let Some(h) = &s.sampler_hash {
        println!("sampler     {h}");
    }
    println!("seed        {}", s.seed);
    println!("events      {}", s.events);
    if let Some(aux) = &s.aux {
        println!("aux         {}", serde_json::to_string(&aux.source).expect("aux serializes"));
    }
    println!("speakers    {}", s.speaker_memo.len());
    Ok(())
}

fn registry_inspect(path: &Path, sample: usize) -> Outcome {
    let reg = IdentityRegistry::load(path)?;
    println!("count     {}", reg.len());
    println!("stranded  {}", reg.stranded());
    for idx in reg.indices().take(sample) {
        println!("{}", idx.get());
    }
    Ok(())
}

fn corpus(c: CorpusCmd) -> Outcome {
    match c {
        CorpusCmd::Gen {
            out,
            speakers,
            utterances,
            dim,
            shared,
            seed,
        } => {
            let spec = SyntheticSpec {
                speakers,
                utterances,
                dim,
                shared,
                seed,
                ..SyntheticSpec::default()
            };
            let corpus = generate_synthetic(&spec)?;
            write_corpus(&out, &corpus)?;
            emit(&serde_json::json!({
                "out": out.display().to_string(),
                "rows": corpus.len(),
                "dim": corpus.dim(),
                "expected_cross_speaker_cosine": spec.expected_cross_speaker_cosine(),
            }));
        }
        CorpusCmd::Inspect { path } => {
            let corpus = read_corpus(&path)?;
            let mut speakers = std::collections::BTreeMap::<&str, usize>::new();
            for m in corpus.metas() {
                *speakers.entry(m.speaker_label.as_str()).or_default() += 1;
            }
            let durations: Vec<f64> = corpus.metas().iter().filter_map(|m| m.duration_seconds).collect();
            println!("rows      {}", corpus.len());
            println!("dim       {}", corpus.dim());
            println!("speakers  {}", speakers.len());
            if !durations.is_empty() {
                println!(
                    "duration  {:.1} s total over {} rows",
                    durations.iter().sum::<f64>(),
                    durations.len()
                );
            }
            if corpus.len() > 0 && speakers.len() >= 2 {
                let grouped = SpeakerCorpus::new(&corpus)?;
                let m = idmap_core::eval::mean_cross_cosine(&grouped.means().view())?;
                println!("cross-speaker cosine of means  {m:.4}");
            }
        }
        CorpusCmd::Import { vectors, meta, dim, out } => {
            let corpus = import_external(&vectors, &meta, dim)?;
            write_corpus(&out, &corpus)?;
            emit(&serde_json::json!({"out": out.display().to_string(), "rows": corpus.len()}));
        }
    }
    Ok(())
}

/// A fixed-condition source for identity-index models, or the GAN itself.
fn source_for<'a>(engine: &'a Engine, aux: &AuxArgs) -> Result<Box<dyn VectorSource + 'a>, Failure> {
    let selection = AuxSelection::Random {
        seed: aux.aux_seed,
        corpus: aux.aux_corpus.clone(),
    };
    Ok(match engine {
        Engine::Mlp(m) => Box::new(condition(m, resolve_aux(engine, selection)?.vector)?),
        Engine::Diff(m) => Box::new(condition(m, resolve_aux(engine, selection)?.vector)?),
        Engine::Gan(m, _) => Box::new(m.clone()),
        _ => return Err(Failure::Config("not a trained model".into())),
    })
}

fn condition<G: IdmapGenerator>(m: &G, aux: Vec<f64>) -> Result<FixedCondition<'_, G>, Failure> {
    Ok(FixedCondition {
        model: m,
        phi: m.condition_on(&SpeakerVector::new(aux)?)?,
        chunk: 1000,
    })
}

fn eval(e: EvalCmd) -> Outcome {
    match e {
        EvalCmd::Capacity {
            model,
            n,
            pair_budget,
            seed,
            aux,
            emit_curve,
        } => {
            let engine = Engine::load_model(&model, RejectionConfig::default())?;
            let source = source_for(&engine, &aux)?;
            let report = capacity_curve(source.as_ref(), &n, pair_budget, seed)?;
            for entry in &report.entries {
                emit(entry);
            }
            if let Some(path) = emit_curve {
                let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
                let io = |e: csv::Error| Failure::Io(format!("{}: {e}", path.display()));
                w.write_record(["n", "mean", "min", "max"]).map_err(io)?;
                for entry in &report.entries {
                    w.serialize((entry.n, entry.mean, entry.min, entry.max)).map_err(io)?;
                }
                w.flush().map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            }
            for entry in &report.entries {
                eprintln!(
                    "N={:>7}  mean {:.4}  min {:.4}  max {:.4}{}",
                    entry.n,
                    entry.mean,
                    entry.min,
                    entry.max,
                    if entry.sampled { "  (sampled)" } else { "" }
                );
            }
        }
        EvalCmd::AuxProbe { model, corpus } => {
            let engine = Engine::load_model(&model, RejectionConfig::default())?;
            let grouped = SpeakerCorpus::new(&read_corpus(&corpus)?)?;
            let probe = match &engine {
                Engine::Mlp(m) => aux_probe(m, &grouped)?,
                Engine::Diff(m) => aux_probe(m, &grouped)?,
                _ => return Err(Failure::Config("the aux probe needs an mlp or diff checkpoint".into())),
            };
            emit(&probe);
            eprintln!(
                "x {:.4}  phi1 {:.4}  phi2 {:.4}  phi {:.4}",
                probe.x, probe.phi1, probe.phi2, probe.phi
            );
        }
        EvalCmd::Linkage { output, seed } => {
            let corpus = read_output(&output)?;
            let eer = linkage_attack(&corpus, seed)?;
            emit(&serde_json::json!({ "eer": eer }));
            eprintln!("linkage EER {:.2}%", 100.0 * eer);
        }
        EvalCmd::Distinctness { original, output } => {
            let orig = SpeakerCorpus::new(&read_corpus(&original)?)?;
            let pseudo = SpeakerCorpus::new(&read_output(&output)?)?;
            if orig.labels() != pseudo.labels() {
                return Err(Failure::Config("original and anonymized corpora cover different speakers".into()));
            }
            let d = distinctness_metrics(&orig.means().view(), &pseudo.means().view())?;
            emit(&d);
            eprintln!("gvd {:.3} dB  deid {:.2}%", d.gvd, d.deid);
        }
        EvalCmd::Bench {
            model,
            corpus,
            n,
            seed,
            aux,
        } => {
            let engine = Engine::load_model(&model, RejectionConfig::default())?;
            let corpus = read_corpus(&corpus)?;
            let selection = AuxSelection::Random {
                seed: aux.aux_seed,
                corpus: aux.aux_corpus.clone(),
            };
            let aux = match &engine {
                Engine::Mlp(_) | Engine::Diff(_) => Some(resolve_aux(&engine, selection)?.vector),
                _ => None,
            };
            let mut session = Session::open(
                engine,
                SessionOptions {
                    aux: aux.map(SpeakerVector::new).transpose()?.map(AuxSelection::Explicit),
                    seed,
                    ..SessionOptions::default()
                },
            )?;
            let meta = idmap_core::corpus::UtteranceMeta {
                utterance_id: "bench".into(),
                speaker_label: "bench".into(),
                duration_seconds: None,
            };
            let report = bench_latency(&corpus, n, &mut |x| {
                session.anonymize_utterance(&meta, &SpeakerVector::new(x.to_vec())?)?;
                Ok(())
            })?;
            emit(&report);
            eprintln!(
                "RTF {:.2e}  per-vector mean {:.0} us  p95 {:.0} us",
                report.rtf, report.latency.mean_us, report.latency.p95_us
            );
        }
    }
    Ok(())
}
