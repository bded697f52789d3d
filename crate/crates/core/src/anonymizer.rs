//! Anonymization sessions: a generation strategy, the identity registry,
//! and a fixed auxiliary vector, applied per utterance or per speaker.
//!
//! A corpus run writes into its output directory:
//!
//! ```text
//! pseudo.svec (+ .meta.jsonl)  pseudo vectors under the original metadata
//! manifest.jsonl               one record per row, in input order
//! session.json                 the session, including the speaker memo
//! summary.json                 counts and per-vector latency
//! ```
//!
//! Rows reach `pseudo.svec` before their manifest lines, so the manifest is
//! the resume cursor: a rerun keeps its complete lines and continues after
//! them.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::{Array1, Array2};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::{read_corpus, CorpusReader, CorpusWriter, UtteranceMeta, VectorCorpus};
use crate::diffusion::DiffModel;
use crate::error::{Error, Result};
use crate::eval::LatencyStats;
use crate::gan::{GanModel, RejectionConfig};
use crate::mlp::MlpModel;
use crate::model::IdmapGenerator;
use crate::sampler::{below, splitmix64, stream, IdentityRegistry, StreamDomain};
use crate::strategy::{average_farthest, random_select, ReferencePool};
use crate::vector::{IdentityIndex, SpeakerVector};

pub const PSEUDO_FILE: &str = "pseudo.svec";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SESSION_FILE: &str = "session.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Rows generated together by the in-memory batch path.
const BATCH_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Utterance,
    Speaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "diff")]
    Diff,
    #[serde(rename = "gan")]
    Gan,
    #[serde(rename = "rs")]
    RandomSelect,
    #[serde(rename = "avg")]
    AverageFarthest,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mlp => "mlp",
            Strategy::Diff => "diff",
            Strategy::Gan => "gan",
            Strategy::RandomSelect => "rs",
            Strategy::AverageFarthest => "avg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp" => Strategy::Mlp,
            "diff" => Strategy::Diff,
            "gan" => Strategy::Gan,
            "rs" => Strategy::RandomSelect,
            "avg" => Strategy::AverageFarthest,
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        })
    }

    /// Whether the strategy issues identity indices.
    pub fn uses_indices(self) -> bool {
        matches!(self, Strategy::Mlp | Strategy::Diff)
    }
}

/// The vector-producing half of a session.
#[derive(Debug, Clone)]
pub enum Engine {
    Mlp(MlpModel),
    Diff(DiffModel),
    Gan(GanModel, RejectionConfig),
    RandomSelect(ReferencePool),
    AverageFarthest(ReferencePool, usize),
}

impl Engine {
    pub fn strategy(&self) -> Strategy {
        match self {
            Engine::Mlp(_) => Strategy::Mlp,
            Engine::Diff(_) => Strategy::Diff,
            Engine::Gan(..) => Strategy::Gan,
            Engine::RandomSelect(_) => Strategy::RandomSelect,
            Engine::AverageFarthest(..) => Strategy::AverageFarthest,
        }
    }

    /// Loads a trained model; the checkpoint kind picks the strategy.
    pub fn load_model(path: &Path, rejection: RejectionConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Ok(match ck.kind {
            ModelKind::Mlp => Engine::Mlp(MlpModel::from_checkpoint(&ck)?),
            ModelKind::Diffusion => Engine::Diff(DiffModel::from_checkpoint(&ck)?),
            ModelKind::Gan => Engine::Gan(GanModel::from_checkpoint(&ck)?, rejection),
        })
    }

    fn idmap(&self) -> Option<&dyn IdmapGenerator> {
        match self {
            Engine::Mlp(m) => Some(m),
            Engine::Diff(m) => Some(m),
            _ => None,
        }
    }

    fn sampler_hash(&self) -> Option<String> {
        match self {
            Engine::Mlp(m) => Some(m.sampler.hash_hex()),
            Engine::Diff(m) => Some(m.sampler.hash_hex()),
            Engine::Gan(m, _) => Some(m.sampler.hash_hex()),
            _ => None,
        }
    }

    fn dim(&self) -> usize {
        match self {
            Engine::Mlp(m) => m.sampler.dimension,
            Engine::Diff(m) => m.sampler.dimension,
            Engine::Gan(m, _) => m.sampler.dimension,
            Engine::RandomSelect(p) | Engine::AverageFarthest(p, _) => p.dim(),
        }
    }
}

/// How the auxiliary vector of an identity-index session is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxSelection {
    /// A uniformly drawn utterance of the training corpus (or of `corpus`
    /// when given).
    Random { seed: u64, corpus: Option<PathBuf> },
    Explicit(SpeakerVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AuxSource {
    Random { seed: u64, corpus: String, row: usize, utterance_id: String },
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxRecord {
    pub vector: Vec<f64>,
    pub source: AuxSource,
}

/// A memoized speaker: its index for identity-index strategies, its vector
/// for the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
}

/// Everything persisted about a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub created_at: u64,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<RejectionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub seed: u64,
    /// Generation events so far; each draws from its own stream.
    pub events: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<AuxRecord>,
    #[serde(default)]
    pub speaker_memo: BTreeMap<String, MemoEntry>,
}

impl SessionState {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(e.column() as u64, format!("session file: {e}")))
    }

    /// Atomic replace through a temporary sibling.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("session serializes");
        std::fs::write(&tmp, text).map_err(|e| Error::storage(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
    }
}

/// Where the registry lives.
#[derive(Debug, Clone, PartialEq)]
pub enum RegistryRef {
    InMemory,
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub registry: RegistryRef,
    pub aux: Option<AuxSelection>,
    pub seed: u64,
    pub model_path: Option<PathBuf>,
    pub pool_path: Option<PathBuf>,
    /// Where the session file is kept, if anywhere.
    pub session_path: Option<PathBuf>,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            registry: RegistryRef::InMemory,
            aux: None,
            seed: 0,
            model_path: None,
            pool_path: None,
            session_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizationRecord {
    pub utterance_id: String,
    pub speaker_label: String,
    pub index: Option<IdentityIndex>,
    pub vector: SpeakerVector,
    pub mode: Mode,
}

pub struct Session {
    pub state: SessionState,
    engine: Engine,
    registry: IdentityRegistry,
    phi: Option<Array1<f64>>,
    /// Speaker vectors already generated this process.
    vectors: HashMap<String, SpeakerVector>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("state", &self.state).finish()
    }
}

fn path_string(p: &Path) -> String {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn new_session_id(seed: u64) -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    let mut h = Sha256::new();
    h.update(nanos.to_le_bytes());
    h.update(std::process::id().to_le_bytes());
    h.update(seed.to_le_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// The auxiliary vector an identity-index engine would use under `selection`.
pub fn resolve_aux(engine: &Engine, selection: AuxSelection) -> Result<AuxRecord> {
    let model = engine.idmap().expect("identity-index engine");
    let dim = engine.dim();
    match selection {
        AuxSelection::Explicit(v) => {
            if v.dim() != dim {
                return Err(Error::shape(dim, v.dim()));
            }
            if v.norm() == 0.0 {
                return Err(Error::DegenerateVector("auxiliary vector is zero".into()));
            }
            Ok(AuxRecord {
                vector: v.as_slice().to_vec(),
                source: AuxSource::Explicit,
            })
        }
        AuxSelection::Random { seed, corpus } => {
            let path = match corpus {
                Some(p) => p,
                None => PathBuf::from(model.record().corpus_path.clone().ok_or_else(|| {
                    Error::Metadata("model records no training corpus; pass an auxiliary vector or corpus".into())
                })?),
            };
            let c = read_corpus(&path)?;
            if c.is_empty() {
                return Err(Error::Corpus("auxiliary corpus is empty".into()));
            }
            if c.dim() != dim {
                return Err(Error::shape(dim, c.dim()));
            }
            let row = below(&mut stream(seed, StreamDomain::Session), c.len() as u64) as usize;
            Ok(AuxRecord {
                vector: c.row_f64(row),
                source: AuxSource::Random {
                    seed,
                    corpus: path_string(&path),
                    row,
                    utterance_id: c.meta(row).utterance_id.clone(),
                },
            })
        }
    }
}

impl Session {
    pub fn open(engine: Engine, opts: SessionOptions) -> Result<Self> {
        let strategy = engine.strategy();
        let aux = if strategy.uses_indices() {
            let selection = opts.aux.unwrap_or(AuxSelection::Random {
                seed: opts.seed,
                corpus: None,
            });
            Some(resolve_aux(&engine, selection)?)
        } else if opts.aux.is_some() {
            return Err(Error::Config(format!(
                "the {} strategy takes no auxiliary vector",
                strategy.name()
            )));
        } else {
            None
        };
        let state = SessionState {
            session_id: new_session_id(opts.seed),
            created_at: now_secs(),
            strategy,
            model_path: opts.model_path.as_deref().map(path_string),
            pool_path: opts.pool_path.as_deref().map(path_string),
            registry_path: match &opts.registry {
                RegistryRef::File(p) if strategy.uses_indices() => Some(path_string(p)),
                _ => None,
            },
            sampler_hash: engine.sampler_hash(),
            rejection: match &engine {
                Engine::Gan(_, r) => Some(*r),
                _ => None,
            },
            k: match &engine {
                Engine::AverageFarthest(_, k) => Some(*k),
                _ => None,
            },
            seed: opts.seed,
            events: 0,
            aux,
            speaker_memo: BTreeMap::new(),
        };
        let session = Self::assemble(engine, state, &opts.registry, opts.session_path)?;
        session.save()?;
        Ok(session)
    }

    /// Reopens a saved session, loading its model or pool and registry from
    /// the recorded paths.
    pub fn reopen(path: &Path) -> Result<Self> {
        let state = SessionState::load(path)?;
        let engine = match state.strategy {
            Strategy::Mlp | Strategy::Diff | Strategy::Gan => {
                let model = state
                    .model_path
                    .as_ref()
                    .ok_or_else(|| Error::Metadata("session records no model path".into()))?;
                Engine::load_model(Path::new(model), state.rejection.unwrap_or_default())?
            }
            Strategy::RandomSelect | Strategy::AverageFarthest => {
                let pool = state
                    .pool_path
                    .as_ref()
                    .ok_or_else(|| Error::Metadata("session records no pool path".into()))?;
                let pool = ReferencePool::from_corpus(&read_corpus(pool)?)?;
                if state.strategy == Strategy::RandomSelect {
                    Engine::RandomSelect(pool)
                } else {
                    Engine::AverageFarthest(pool, state.k.unwrap_or(100))
                }
            }
        };
        if engine.strategy() != state.strategy {
            return Err(Error::Config(format!(
                "session strategy {} but model is {}",
                state.strategy.name(),
                engine.strategy().name()
            )));
        }
        Self::reattach(engine, state, Some(path.to_path_buf()))
    }

    /// Reattaches an in-memory engine to a saved state.
    pub fn reattach(engine: Engine, state: SessionState, path: Option<PathBuf>) -> Result<Self> {
        if let (Some(want), Some(have)) = (&state.sampler_hash, engine.sampler_hash()) {
            if *want != have {
                return Err(Error::ConfigMismatch {
                    model: have,
                    request: want.clone(),
                });
            }
        }
        let registry = match &state.registry_path {
            Some(p) => RegistryRef::File(PathBuf::from(p)),
            None => RegistryRef::InMemory,
        };
        Self::assemble(engine, state, &registry, path)
    }

    fn assemble(engine: Engine, state: SessionState, registry: &RegistryRef, path: Option<PathBuf>) -> Result<Self> {
        let mut reg = match registry {
            RegistryRef::File(p) if state.strategy.uses_indices() => IdentityRegistry::open(p)?,
            _ => IdentityRegistry::in_memory(),
        };
        let phi = match (engine.idmap(), &state.aux) {
            (Some(model), Some(aux)) => {
                // Training identities are never handed out.
                reg.reserve(model.record().training_indices())?;
                Some(model.condition_on(&SpeakerVector::new(aux.vector.clone())?)?)
            }
            (Some(_), None) => return Err(Error::State("identity-index session without an auxiliary vector".into())),
            _ => None,
        };
        Ok(Self {
            state,
            engine,
            registry: reg,
            phi,
            vectors: HashMap::new(),
            path,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn registry(&self) -> &IdentityRegistry {
        &self.registry
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.engine.dim()
    }

    pub fn save(&self) -> Result<()> {
        match &self.path {
            Some(p) => self.state.save(p),
            None => Ok(()),
        }
    }

    /// A fresh stream for the next generation event.
    fn event_stream(&mut self, domain: StreamDomain) -> Pcg64 {
        let mut s = self.state.seed ^ self.state.events.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.state.events += 1;
        stream(splitmix64(&mut s), domain)
    }

    fn issue(&mut self) -> Result<IdentityIndex> {
        let mut rng = self.event_stream(StreamDomain::Registry);
        self.registry.next_unused(&mut rng)
    }

    fn generate_indexed(&self, indices: &[IdentityIndex]) -> Result<Array2<f64>> {
        let model = self.engine.idmap().expect("identity-index engine");
        model.generate(indices, self.phi.as_ref().expect("phi cached at open"))
    }

    /// One pseudo vector for `x_orig`, with its index when one is issued.
    fn fresh(&mut self, x_orig: &SpeakerVector) -> Result<(Option<IdentityIndex>, SpeakerVector)> {
        if self.engine.strategy().uses_indices() {
            let idx = self.issue()?;
            let out = self.generate_indexed(&[idx])?;
            return Ok((Some(idx), SpeakerVector::from_array(out.row(0).to_owned())?));
        }
        let mut rng = self.event_stream(StreamDomain::Session);
        let v = match &self.engine {
            Engine::Gan(model, cfg) => model.infer_reject(x_orig, cfg, &mut rng)?.vector,
            Engine::RandomSelect(pool) => random_select(pool, &mut rng)?.1,
            Engine::AverageFarthest(pool, k) => average_farthest(pool, x_orig, *k)?,
            Engine::Mlp(_) | Engine::Diff(_) => unreachable!(),
        };
        Ok((None, v))
    }

    fn check_dim(&self, x: &SpeakerVector) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::shape(self.dim(), x.dim()));
        }
        Ok(())
    }

    pub fn anonymize_utterance(&mut self, meta: &UtteranceMeta, x: &SpeakerVector) -> Result<AnonymizationRecord> {
        self.check_dim(x)?;
        let (index, vector) = self.fresh(x)?;
        Ok(AnonymizationRecord {
            utterance_id: meta.utterance_id.clone(),
            speaker_label: meta.speaker_label.clone(),
            index,
            vector,
            mode: Mode::Utterance,
        })
    }

    /// The speaker's pseudo vector, generating and memoizing it on first
    /// sight. `x_orig` is only evaluated for strategies that condition on
    /// the original.
    fn speaker_pseudo(
        &mut self,
        label: &str,
        x_orig: impl FnOnce() -> Result<SpeakerVector>,
    ) -> Result<(Option<IdentityIndex>, SpeakerVector)> {
        let memo = self.state.speaker_memo.get(label).cloned();
        let index = memo.as_ref().and_then(|m| m.index).map(IdentityIndex);
        if let Some(v) = self.vectors.get(label) {
            return Ok((index, v.clone()));
        }
        if let Some(m) = memo {
            let v = match (m.index, m.vector) {
                (Some(i), _) if self.engine.strategy().uses_indices() => {
                    SpeakerVector::from_array(self.generate_indexed(&[IdentityIndex(i)])?.row(0).to_owned())?
                }
                (_, Some(v)) => SpeakerVector::new(v)?,
                _ => return Err(Error::State(format!("memo for speaker {label:?} is incomplete"))),
            };
            self.vectors.insert(label.to_string(), v.clone());
            return Ok((index, v));
        }
        let needs_orig = matches!(self.engine, Engine::Gan(..) | Engine::AverageFarthest(..));
        let x = if needs_orig {
            let x = x_orig()?;
            self.check_dim(&x)?;
            x
        } else {
            SpeakerVector::new(vec![0.0; self.dim()])?
        };
        let (index, v) = self.fresh(&x)?;
        self.remember(label, index, &v);
        Ok((index, v))
    }

    fn remember(&mut self, label: &str, index: Option<IdentityIndex>, v: &SpeakerVector) {
        let entry = MemoEntry {
            index: index.map(|i| i.get()),
            vector: if index.is_some() { None } else { Some(v.as_slice().to_vec()) },
        };
        self.state.speaker_memo.insert(label.to_string(), entry);
        self.vectors.insert(label.to_string(), v.clone());
    }

    /// Records for all of one speaker's utterances, sharing one pseudo
    /// vector. The original for conditioning strategies is the mean of
    /// the given utterances.
    pub fn anonymize_speaker(
        &mut self,
        label: &str,
        utterances: &[(UtteranceMeta, SpeakerVector)],
    ) -> Result<Vec<AnonymizationRecord>> {
        let (index, vector) = self.speaker_pseudo(label, || {
            let vs: Vec<SpeakerVector> = utterances.iter().map(|(_, v)| v.clone()).collect();
            crate::vector::mean_vector(&vs)
        })?;
        Ok(utterances
            .iter()
            .map(|(meta, _)| AnonymizationRecord {
                utterance_id: meta.utterance_id.clone(),
                speaker_label: label.to_string(),
                index,
                vector: vector.clone(),
                mode: Mode::Speaker,
            })
            .collect())
    }

    /// Anonymizes a loaded corpus in row order. Identity-index strategies
    /// generate in batches; results match row-at-a-time processing.
    pub fn anonymize_all(&mut self, corpus: &VectorCorpus, mode: Mode) -> Result<Vec<AnonymizationRecord>> {
        if corpus.dim() != self.dim() && !corpus.is_empty() {
            return Err(Error::shape(self.dim(), corpus.dim()));
        }
        let means = if mode == Mode::Speaker && !self.engine.strategy().uses_indices() {
            speaker_means(corpus.rows().map(|(m, r)| (m.speaker_label.as_str(), r)), corpus.dim())
        } else {
            HashMap::new()
        };
        let mut out = Vec::with_capacity(corpus.len());
        if mode == Mode::Utterance && self.engine.strategy().uses_indices() {
            let mut indices = Vec::with_capacity(corpus.len());
            for _ in 0..corpus.len() {
                indices.push(self.issue()?);
            }
            for (c, chunk) in indices.chunks(BATCH_ROWS).enumerate() {
                let block = self.generate_indexed(chunk)?;
                for (k, row) in block.outer_iter().enumerate() {
                    let meta = corpus.meta(c * BATCH_ROWS + k);
                    out.push(AnonymizationRecord {
                        utterance_id: meta.utterance_id.clone(),
                        speaker_label: meta.speaker_label.clone(),
                        index: Some(chunk[k]),
                        vector: SpeakerVector::from_array(row.to_owned())?,
                        mode,
                    });
                }
            }
            return Ok(out);
        }
        for (meta, row) in corpus.rows() {
            let record = match mode {
                Mode::Utterance => self.anonymize_utterance(meta, &SpeakerVector::convert_from(row)?)?,
                Mode::Speaker => {
                    let label = meta.speaker_label.clone();
                    let (index, vector) = self.speaker_pseudo(&label, || mean_of(&means, &label))?;
                    AnonymizationRecord {
                        utterance_id: meta.utterance_id.clone(),
                        speaker_label: label,
                        index,
                        vector,
                        mode,
                    }
                }
            };
            out.push(record);
        }
        Ok(out)
    }
}

fn speaker_means<'a>(rows: impl Iterator<Item = (&'a str, &'a [f32])>, dim: usize) -> HashMap<String, (Vec<f64>, usize)> {
    let mut acc: HashMap<String, (Vec<f64>, usize)> = HashMap::new();
    for (label, row) in rows {
        let e = acc.entry(label.to_string()).or_insert_with(|| (vec![0.0; dim], 0));
        for (a, &v) in e.0.iter_mut().zip(row) {
            *a += v as f64;
        }
        e.1 += 1;
    }
    acc
}

fn mean_of(means: &HashMap<String, (Vec<f64>, usize)>, label: &str) -> Result<SpeakerVector> {
    let (sum, n) = means
        .get(label)
        .ok_or_else(|| Error::State(format!("no utterances for speaker {label:?}")))?;
    SpeakerVector::new(sum.iter().map(|s| s / *n as f64).collect())
}

/// Pseudo vectors under the original metadata, in record order.
pub fn records_to_corpus(records: &[AnonymizationRecord], originals: &VectorCorpus) -> Result<VectorCorpus> {
    let dim = records.first().map_or(originals.dim(), |r| r.vector.dim());
    let mut out = VectorCorpus::new(dim);
    for (i, r) in records.iter().enumerate() {
        let meta = originals
            .metas()
            .get(i)
            .filter(|m| m.utterance_id == r.utterance_id)
            .cloned()
            .unwrap_or_else(|| UtteranceMeta {
                utterance_id: r.utterance_id.clone(),
                speaker_label: r.speaker_label.clone(),
                duration_seconds: None,
            });
        out.push(meta, &r.vector.to_f32())?;
    }
    Ok(out)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    pub vector_ref: String,
    pub mode: Mode,
}

/// Reads the complete lines of a manifest; a torn final line is dropped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    Ok(read_manifest_prefix(path)?.0)
}

/// Complete records and the byte length they occupy.
fn read_manifest_prefix(path: &Path) -> Result<(Vec<ManifestRecord>, u64)> {
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut valid = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::storage(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<ManifestRecord>(line.trim_end()) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
        valid += n as u64;
    }
    Ok((out, valid))
}

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub mode: Mode,
    /// Stop cleanly after this many new records, leaving a resumable
    /// output.
    pub stop_after: Option<usize>,
    /// Rows between flushes of the output, manifest, and session.
    pub flush_every: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Utterance,
            stop_after: None,
            flush_every: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub session_id: String,
    pub strategy: Strategy,
    pub mode: Mode,
    /// Records in the manifest.
    pub count: u64,
    /// Records written by this run.
    pub new_records: u64,
    pub resumed_from: u64,
    pub complete: bool,
    pub elapsed_seconds: f64,
    pub latency: Option<LatencyStats>,
}

struct Output {
    pseudo: CorpusWriter,
    manifest: File,
    pending: Vec<String>,
}

impl Output {
    /// Vectors first, then the session, then the manifest lines that
    /// describe them.
    fn flush(&mut self, session: &Session, manifest_path: &Path) -> Result<()> {
        self.pseudo.flush()?;
        session.save()?;
        if !self.pending.is_empty() {
            let text = self.pending.concat();
            self.manifest
                .write_all(text.as_bytes())
                .map_err(|e| Error::storage(manifest_path, e))?;
            self.pending.clear();
        }
        self.manifest.flush().map_err(|e| Error::storage(manifest_path, e))
    }
}

/// Streams `corpus_path` through the session into `out_dir`, resuming
/// after the last complete manifest line if the directory holds a previous
/// run.
pub fn anonymize_corpus(session: &mut Session, corpus_path: &Path, out_dir: &Path, opts: &CorpusOptions) -> Result<CorpusSummary> {
    let start = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::storage(out_dir, e))?;
    let pseudo_path = out_dir.join(PSEUDO_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut reader = CorpusReader::open(corpus_path)?;
    if reader.rows() > 0 && reader.dim() != session.dim() {
        return Err(Error::shape(session.dim(), reader.dim()));
    }
    if session.path.is_none() {
        session.path = Some(out_dir.join(SESSION_FILE));
    }

    let (done, valid_len) = if manifest_path.exists() {
        read_manifest_prefix(&manifest_path)?
    } else {
        (Vec::new(), 0)
    };
    if let Some(r) = done.iter().find(|r| r.mode != opts.mode) {
        return Err(Error::Config(format!(
            "output holds {:?}-level records, requested {:?}",
            r.mode, opts.mode
        )));
    }
    let resumed_from = done.len() as u64;
    let pseudo = if resumed_from > 0 {
        CorpusWriter::resume(&pseudo_path, resumed_from)?
    } else {
        CorpusWriter::create(&pseudo_path, session.dim())?
    };
    let manifest = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&manifest_path)
        .map_err(|e| Error::storage(&manifest_path, e))?;
    manifest.set_len(valid_len).map_err(|e| Error::storage(&manifest_path, e))?;
    let mut manifest = manifest;
    use std::io::Seek;
    manifest
        .seek(std::io::SeekFrom::End(0))
        .map_err(|e| Error::storage(&manifest_path, e))?;
    let mut out = Output {
        pseudo,
        manifest,
        pending: Vec::new(),
    };

    // The manifest and written vectors restore any memo entries the
    // session file missed.
    if opts.mode == Mode::Speaker && resumed_from > 0 {
        out.pseudo.flush()?;
        let written = read_corpus(&pseudo_path)?;
        for (row, r) in done.iter().enumerate() {
            if session.state.speaker_memo.contains_key(&r.speaker_label) {
                continue;
            }
            let v = SpeakerVector::convert_from(written.row(row))?;
            session.remember(&r.speaker_label, r.index.map(IdentityIndex), &v);
        }
    }

    let means = if opts.mode == Mode::Speaker && matches!(session.engine, Engine::Gan(..) | Engine::AverageFarthest(..)) {
        let rows: Vec<(UtteranceMeta, Vec<f32>)> = CorpusReader::open(corpus_path)?.collect::<Result<_>>()?;
        speaker_means(rows.iter().map(|(m, r)| (m.speaker_label.as_str(), r.as_slice())), reader.dim())
    } else {
        HashMap::new()
    };

    let mut latencies = Vec::new();
    let mut row = 0u64;
    let mut new_records = 0u64;
    let mut complete = true;
    for item in &mut reader {
        let (meta, vec) = item?;
        if row < resumed_from {
            let r = &done[row as usize];
            if r.utterance_id != meta.utterance_id {
                return Err(Error::Corpus(format!(
                    "output row {row} is {:?} but the corpus has {:?}; not the same input",
                    r.utterance_id, meta.utterance_id
                )));
            }
            row += 1;
            continue;
        }
        if opts.stop_after.is_some_and(|n| new_records as usize >= n) {
            complete = false;
            break;
        }
        let t0 = Instant::now();
        let record = match opts.mode {
            Mode::Utterance => session.anonymize_utterance(&meta, &SpeakerVector::convert_from(&vec)?)?,
            Mode::Speaker => {
                let label = meta.speaker_label.clone();
                let (index, vector) = session.speaker_pseudo(&label, || mean_of(&means, &label))?;
                AnonymizationRecord {
                    utterance_id: meta.utterance_id.clone(),
                    speaker_label: label,
                    index,
                    vector,
                    mode: Mode::Speaker,
                }
            }
        };
        latencies.push(t0.elapsed().as_secs_f64() * 1e6);
        out.pseudo.append(&meta, &record.vector.to_f32())?;
        let line = ManifestRecord {
            utterance_id: record.utterance_id,
            speaker_label: record.speaker_label,
            index: record.index.map(|i| i.get()),
            vector_ref: format!("{PSEUDO_FILE}#{row}"),
            mode: record.mode,
        };
        out.pending.push(serde_json::to_string(&line).expect("manifest serializes") + "\n");
        row += 1;
        new_records += 1;
        if new_records as usize % opts.flush_every.max(1) == 0 {
            out.flush(session, &manifest_path)?;
        }
    }
    out.flush(session, &manifest_path)?;
    let summary = CorpusSummary {
        session_id: session.state.session_id.clone(),
        strategy: session.state.strategy,
        mode: opts.mode,
        count: resumed_from + new_records,
        new_records,
        resumed_from,
        complete,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        latency: LatencyStats::from_micros(latencies),
    };
    let spath = out_dir.join(SUMMARY_FILE);
    std::fs::write(&spath, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| Error::storage(&spath, e))?;
    Ok(summary)
}

/// The written pseudo vectors under their original labels, for linkage
/// scoring.
pub fn read_output(out_dir: &Path) -> Result<VectorCorpus> {
    let corpus = read_corpus(out_dir.join(PSEUDO_FILE))?;
    let manifest = read_manifest(&out_dir.join(MANIFEST_FILE))?;
    if manifest.len() != corpus.len() {
        return Err(Error::Corpus(format!(
            "manifest has {} records, pseudo corpus {} rows",
            manifest.len(),
            corpus.len()
        )));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SpeakerCorpus;
    use crate::corpus::{generate_synthetic, write_corpus, SyntheticSpec};
    use crate::mlp::{train_mlp, MlpConfig};
    use crate::sampler::{Distribution, SamplerConfig};
    use std::sync::OnceLock;

    fn tiny_corpus() -> VectorCorpus {
        let spec = SyntheticSpec {
            speakers: 6,
            utterances: 5,
            dim: 8,
            ..SyntheticSpec::calibrated(1)
        };
        generate_synthetic(&spec).unwrap()
    }

    fn tiny_mlp() -> &'static MlpModel {
        static MODEL: OnceLock<MlpModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            let c = tiny_corpus();
            let sampler = SamplerConfig::new(Distribution::StandardNormal, 8).unwrap();
            let cfg = MlpConfig {
                steps: 5,
                n_id: 4,
                n_aux: 4,
                ..MlpConfig::default()
            };
            train_mlp(&SpeakerCorpus::new(&c).unwrap(), &sampler, &cfg, 3).unwrap()
        })
    }

    fn explicit_aux() -> Option<AuxSelection> {
        Some(AuxSelection::Explicit(SpeakerVector::new(tiny_corpus().row_f64(0)).unwrap()))
    }

    fn mlp_session(seed: u64) -> Session {
        Session::open(
            Engine::Mlp(tiny_mlp().clone()),
            SessionOptions {
                aux: explicit_aux(),
                seed,
                ..SessionOptions::default()
            },
        )
        .unwrap()
    }

    fn meta(id: &str, spk: &str) -> UtteranceMeta {
        UtteranceMeta {
            utterance_id: id.into(),
            speaker_label: spk.into(),
            duration_seconds: Some(2.0),
        }
    }

    #[test]
    fn utterances_get_distinct_indices_and_vectors() {
        let mut s = mlp_session(1);
        let x = SpeakerVector::new(vec![1.0; 8]).unwrap();
        let a = s.anonymize_utterance(&meta("u1", "A"), &x).unwrap();
        let b = s.anonymize_utterance(&meta("u2", "A"), &x).unwrap();
        assert_ne!(a.index, b.index);
        assert_ne!(a.vector, b.vector);
        // Training identities are reserved.
        for idx in tiny_mlp().record.training_indices() {
            assert!(s.registry().contains(idx));
            assert_ne!(a.index, Some(idx));
        }
    }

    #[test]
    fn thousand_utterances_thousand_indices() {
        let mut s = mlp_session(2);
        let x = SpeakerVector::new(vec![1.0; 8]).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            let r = s.anonymize_utterance(&meta(&format!("u{i}"), "A"), &x).unwrap();
            assert!(seen.insert(r.index.unwrap()));
        }
    }

    #[test]
    fn speaker_memo_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let spath = dir.path().join("s.json");
        let mut s = Session::open(
            Engine::Mlp(tiny_mlp().clone()),
            SessionOptions {
                aux: explicit_aux(),
                seed: 3,
                session_path: Some(spath.clone()),
                registry: RegistryRef::File(dir.path().join("reg.bin")),
                ..SessionOptions::default()
            },
        )
        .unwrap();
        let x = SpeakerVector::new(vec![1.0; 8]).unwrap();
        let utts = vec![(meta("a1", "A"), x.clone()), (meta("a2", "A"), x.clone())];
        let a = s.anonymize_speaker("A", &utts).unwrap();
        assert_eq!(a[0].index, a[1].index);
        assert_eq!(a[0].vector, a[1].vector);
        let again = s.anonymize_speaker("A", &utts[..1]).unwrap();
        assert_eq!(again[0].index, a[0].index);
        let b = s.anonymize_speaker("B", &[(meta("b1", "B"), x.clone())]).unwrap();
        assert_ne!(b[0].index, a[0].index);
        s.save().unwrap();
        drop(s);
        let mut s = Session::reattach(Engine::Mlp(tiny_mlp().clone()), SessionState::load(&spath).unwrap(), Some(spath)).unwrap();
        let replay = s.anonymize_speaker("A", &utts[..1]).unwrap();
        assert_eq!(replay[0].index, a[0].index);
        assert_eq!(replay[0].vector, a[0].vector);
        let c = s.anonymize_speaker("C", &[(meta("c1", "C"), x)]).unwrap();
        assert!(c[0].index != a[0].index && c[0].index != b[0].index);
    }

    #[test]
    fn aux_selection_rules() {
        let dir = tempfile::tempdir().unwrap();
        let cpath = dir.path().join("c.svec");
        write_corpus(&cpath, &tiny_corpus()).unwrap();
        let open = |aux| {
            Session::open(
                Engine::Mlp(tiny_mlp().clone()),
                SessionOptions {
                    aux: Some(aux),
                    ..SessionOptions::default()
                },
            )
        };
        let random = || AuxSelection::Random {
            seed: 1,
            corpus: Some(cpath.clone()),
        };
        let a = open(random()).unwrap();
        let b = open(random()).unwrap();
        assert_eq!(a.state.aux, b.state.aux);
        let zero = SpeakerVector::new(vec![0.0; 8]).unwrap();
        assert!(matches!(open(AuxSelection::Explicit(zero)), Err(Error::DegenerateVector(_))));
        // No corpus recorded in the model and none given.
        assert!(matches!(
            open(AuxSelection::Random { seed: 1, corpus: None }),
            Err(Error::Metadata(_))
        ));
        let pool = ReferencePool::from_corpus(&tiny_corpus()).unwrap();
        let err = Session::open(
            Engine::RandomSelect(pool),
            SessionOptions {
                aux: explicit_aux(),
                ..SessionOptions::default()
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn sampler_mismatch_on_reattach() {
        let s = mlp_session(4);
        let mut state = s.state.clone();
        state.sampler_hash = Some(SamplerConfig::new(Distribution::UniformMinus1To1, 8).unwrap().hash_hex());
        assert!(matches!(
            Session::reattach(Engine::Mlp(tiny_mlp().clone()), state, None),
            Err(Error::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn batch_path_matches_row_at_a_time() {
        let c = tiny_corpus();
        let batch = mlp_session(5).anonymize_all(&c, Mode::Utterance).unwrap();
        let mut s = mlp_session(5);
        for (i, (m, row)) in c.rows().enumerate() {
            let r = s.anonymize_utterance(m, &SpeakerVector::convert_from(row).unwrap()).unwrap();
            assert_eq!(r.index, batch[i].index);
            for (a, b) in r.vector.as_slice().iter().zip(batch[i].vector.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn speaker_level_is_a_function_of_label() {
        let c = tiny_corpus();
        let recs = mlp_session(6).anonymize_all(&c, Mode::Speaker).unwrap();
        let mut by_label: HashMap<&str, &AnonymizationRecord> = HashMap::new();
        for r in &recs {
            let first = by_label.entry(r.speaker_label.as_str()).or_insert(r);
            assert_eq!(first.index, r.index);
            assert_eq!(first.vector, r.vector);
        }
        assert_eq!(by_label.len(), 6);
        assert_eq!(recs, mlp_session(6).anonymize_all(&c, Mode::Speaker).unwrap());
    }

    #[test]
    fn pool_strategies() {
        let c = tiny_corpus();
        let pool = ReferencePool::from_corpus(&c).unwrap();
        let mut rs = Session::open(Engine::RandomSelect(pool.clone()), SessionOptions::default()).unwrap();
        let recs = rs.anonymize_all(&c, Mode::Utterance).unwrap();
        assert!(recs.iter().all(|r| r.index.is_none()));
        // 30 utterances over 6 pool speakers must repeat vectors.
        let distinct: std::collections::HashSet<Vec<u64>> =
            recs.iter().map(|r| r.vector.as_slice().iter().map(|v| v.to_bits()).collect()).collect();
        assert!(distinct.len() <= 6);
        let mut avg = Session::open(Engine::AverageFarthest(pool, 3), SessionOptions::default()).unwrap();
        let recs = avg.anonymize_all(&c, Mode::Speaker).unwrap();
        assert_eq!(recs.len(), c.len());
        assert!(recs.iter().all(|r| r.index.is_none()));
    }

    fn write_tiny(dir: &Path, n_spk: usize, n_utt: usize) -> PathBuf {
        let spec = SyntheticSpec {
            speakers: n_spk,
            utterances: n_utt,
            dim: 8,
            ..SyntheticSpec::calibrated(9)
        };
        let path = dir.join("in.svec");
        write_corpus(&path, &generate_synthetic(&spec).unwrap()).unwrap();
        path
    }

    #[test]
    fn empty_corpus_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.svec");
        write_corpus(&path, &VectorCorpus::new(8)).unwrap();
        let mut s = mlp_session(7);
        let out = dir.path().join("out");
        let sum = anonymize_corpus(&mut s, &path, &out, &CorpusOptions::default()).unwrap();
        assert_eq!(sum.count, 0);
        assert!(sum.complete);
        assert!(read_manifest(&out.join(MANIFEST_FILE)).unwrap().is_empty());
        assert_eq!(read_output(&out).unwrap().len(), 0);
    }

    #[test]
    fn corpus_output_round_trips_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_tiny(dir.path(), 4, 10);
        let out = dir.path().join("out");
        let mut s = mlp_session(8);
        let first = anonymize_corpus(
            &mut s,
            &input,
            &out,
            &CorpusOptions {
                stop_after: Some(17),
                flush_every: 5,
                ..CorpusOptions::default()
            },
        )
        .unwrap();
        assert!(!first.complete);
        assert_eq!(first.count, 17);
        drop(s);
        // A torn line from an interrupted write.
        let mpath = out.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().append(true).open(&mpath).unwrap();
        f.write_all(b"{\"utterance_id\":\"tor").unwrap();
        drop(f);
        let mut s = Session::reattach(
            Engine::Mlp(tiny_mlp().clone()),
            SessionState::load(&out.join(SESSION_FILE)).unwrap(),
            Some(out.join(SESSION_FILE)),
        )
        .unwrap();
        let second = anonymize_corpus(&mut s, &input, &out, &CorpusOptions::default()).unwrap();
        assert!(second.complete);
        assert_eq!(second.resumed_from, 17);
        assert_eq!(second.count, 40);
        let manifest = read_manifest(&mpath).unwrap();
        assert_eq!(manifest.len(), 40);
        let ids: std::collections::HashSet<_> = manifest.iter().map(|r| r.index.unwrap()).collect();
        assert_eq!(ids.len(), 40);
        let written = read_output(&out).unwrap();
        assert_eq!(written.len(), 40);
        let input_corpus = read_corpus(&input).unwrap();
        assert_eq!(written.metas(), input_corpus.metas());
        for (i, r) in manifest.iter().enumerate() {
            assert_eq!(r.vector_ref, format!("pseudo.svec#{i}"));
        }
    }

    #[test]
    fn speaker_mode_resume_keeps_assignments() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_tiny(dir.path(), 3, 6);
        let straight = dir.path().join("straight");
        anonymize_corpus(
            &mut mlp_session(10),
            &input,
            &straight,
            &CorpusOptions {
                mode: Mode::Speaker,
                ..CorpusOptions::default()
            },
        )
        .unwrap();
        let out = dir.path().join("out");
        let opts = CorpusOptions {
            mode: Mode::Speaker,
            stop_after: Some(4),
            flush_every: 1,
        };
        anonymize_corpus(&mut mlp_session(10), &input, &out, &opts).unwrap();
        // Session file lost: the memo is rebuilt from the manifest.
        std::fs::remove_file(out.join(SESSION_FILE)).unwrap();
        let mut s = mlp_session(10);
        s.state.events = 1;
        anonymize_corpus(
            &mut s,
            &input,
            &out,
            &CorpusOptions {
                mode: Mode::Speaker,
                ..CorpusOptions::default()
            },
        )
        .unwrap();
        let m = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
        let mut by_label: HashMap<&str, Option<u64>> = HashMap::new();
        for r in &m {
            assert_eq!(*by_label.entry(&r.speaker_label).or_insert(r.index), r.index);
        }
        assert_eq!(m.len(), 18);
        assert_eq!(read_manifest(&straight.join(MANIFEST_FILE)).unwrap().len(), 18);
    }
}
