//! Speaker-vector corpus files and the synthetic corpus generator.
//!
//! A corpus is two files. The vector file (little-endian):
//!
//! ```text
//! offset 0   magic   "SVEC"
//! offset 4   version u16 = 1
//! offset 6   dim     u32
//! offset 10  count   u64
//! offset 18  count x dim f32, row-major
//! ```
//!
//! and a sidecar `<path>.meta.jsonl` holding one JSON record per row:
//! `{"row": n, "utterance_id": ..., "speaker_label": ..., "duration_seconds": ...}`.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{standard_normal, stream, uniform, StreamDomain};

const MAGIC: &[u8; 4] = b"SVEC";
const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 18;
const COUNT_OFFSET: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub speaker_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    row: u64,
    #[serde(flatten)]
    meta: UtteranceMeta,
}

/// Sidecar path for a vector file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

/// A fully loaded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorCorpus {
    dim: usize,
    data: Vec<f32>,
    meta: Vec<UtteranceMeta>,
    ids: HashSet<String>,
}

impl VectorCorpus {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            meta: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn push(&mut self, meta: UtteranceMeta, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape(self.dim, vector.len()));
        }
        if !self.ids.insert(meta.utterance_id.clone()) {
            return Err(Error::Corpus(format!(
                "duplicate utterance id {:?}",
                meta.utterance_id
            )));
        }
        self.data.extend_from_slice(vector);
        self.meta.push(meta);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn meta(&self, i: usize) -> &UtteranceMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[UtteranceMeta] {
        &self.meta
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = (&UtteranceMeta, &[f32])> {
        self.meta.iter().zip(self.data.chunks_exact(self.dim.max(1)))
    }
}

/// Streaming writer. Rows are appended as they arrive; the header count is
/// updated by [`CorpusWriter::flush`] and [`CorpusWriter::finish`].
pub struct CorpusWriter {
    path: PathBuf,
    dim: usize,
    count: u64,
    vectors: BufWriter<File>,
    sidecar: BufWriter<File>,
    ids: HashSet<String>,
}

impl CorpusWriter {
    pub fn create(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |e| Error::storage(&path, e);
        let mut file = File::create(&path).map_err(io)?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(dim as u32).to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes());
        file.write_all(&header).map_err(io)?;
        let mpath = meta_path(&path);
        let sidecar = File::create(&mpath).map_err(|e| Error::storage(&mpath, e))?;
        Ok(Self {
            path,
            dim,
            count: 0,
            vectors: BufWriter::new(file),
            sidecar: BufWriter::new(sidecar),
            ids: HashSet::new(),
        })
    }

    /// Reopens an existing corpus keeping only its first `keep` rows, so
    /// that writing can continue after an interruption.
    pub fn resume(path: impl AsRef<Path>, keep: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |e| Error::storage(&path, e);
        let mut file = OpenOptions::new().read(true).write(true).open(&path).map_err(io)?;
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)
            .map_err(|_| Error::format(0, "truncated header"))?;
        let (dim, _) = parse_header(&header)?;
        let len = file.metadata().map_err(io)?.len();
        let row_bytes = dim as u64 * 4;
        if len < HEADER_LEN + keep * row_bytes {
            return Err(Error::format(
                len,
                format!("cannot resume at row {keep}: file holds fewer rows"),
            ));
        }
        file.set_len(HEADER_LEN + keep * row_bytes).map_err(io)?;
        file.seek(SeekFrom::Start(COUNT_OFFSET)).map_err(io)?;
        file.write_all(&keep.to_le_bytes()).map_err(io)?;
        file.seek(SeekFrom::End(0)).map_err(io)?;

        let mpath = meta_path(&path);
        let kept = read_meta_lines(&mpath, keep as usize)?;
        if (kept.len() as u64) < keep {
            return Err(Error::format(
                kept.len() as u64,
                format!("sidecar holds {} records, need {keep}", kept.len()),
            ));
        }
        let mut sidecar = BufWriter::new(File::create(&mpath).map_err(|e| Error::storage(&mpath, e))?);
        let mut ids = HashSet::new();
        for line in &kept {
            ids.insert(line.meta.utterance_id.clone());
            write_meta_line(&mut sidecar, line).map_err(|e| Error::storage(&mpath, e))?;
        }
        Ok(Self {
            path,
            dim: dim as usize,
            count: keep,
            vectors: BufWriter::new(file),
            sidecar,
            ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn append(&mut self, meta: &UtteranceMeta, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape(self.dim, vector.len()));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "row {} has a non-finite entry at {i}",
                self.count
            )));
        }
        if !self.ids.insert(meta.utterance_id.clone()) {
            return Err(Error::Corpus(format!(
                "duplicate utterance id {:?}",
                meta.utterance_id
            )));
        }
        let path = &self.path;
        let mut buf = Vec::with_capacity(self.dim * 4);
        for v in vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.vectors
            .write_all(&buf)
            .map_err(|e| Error::storage(path, e))?;
        let line = MetaLine {
            row: self.count,
            meta: meta.clone(),
        };
        write_meta_line(&mut self.sidecar, &line).map_err(|e| Error::storage(meta_path(path), e))?;
        self.count += 1;
        Ok(())
    }

    /// Pushes buffered rows to the OS and records the row count.
    pub fn flush(&mut self) -> Result<()> {
        let path = self.path.clone();
        let io = |e| Error::storage(&path, e);
        self.vectors.flush().map_err(io)?;
        self.sidecar.flush().map_err(io)?;
        let file = self.vectors.get_mut();
        file.seek(SeekFrom::Start(COUNT_OFFSET)).map_err(io)?;
        file.write_all(&self.count.to_le_bytes()).map_err(io)?;
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        self.flush()?;
        Ok(self.count)
    }
}

fn write_meta_line(w: &mut impl Write, line: &MetaLine) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")
}

/// Parses at most `limit` records; anything after them, such as a line torn
/// by a crash, is not read.
fn read_meta_lines(path: &Path, limit: usize) -> Result<Vec<MetaLine>> {
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        if out.len() == limit {
            break;
        }
        let line = line.map_err(|e| Error::storage(path, e))?;
        let len = line.len() as u64 + 1;
        if line.trim().is_empty() {
            offset += len;
            continue;
        }
        let parsed: MetaLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(offset, format!("sidecar record: {e}")))?;
        out.push(parsed);
        offset += len;
    }
    Ok(out)
}

fn parse_header(header: &[u8]) -> Result<(u32, u64)> {
    if header.len() < HEADER_LEN as usize {
        return Err(Error::format(header.len() as u64, "truncated header"));
    }
    if &header[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"SVEC\""));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(header[6..10].try_into().unwrap());
    if dim == 0 {
        return Err(Error::format(6, "dimension is zero"));
    }
    let count = u64::from_le_bytes(header[10..18].try_into().unwrap());
    Ok((dim, count))
}

/// Streaming reader: holds one row buffer and one sidecar line at a time.
pub struct CorpusReader {
    path: PathBuf,
    dim: usize,
    count: u64,
    next: u64,
    vectors: BufReader<File>,
    sidecar: std::io::Lines<BufReader<File>>,
    sidecar_offset: u64,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |e| Error::storage(&path, e);
        let mut file = File::open(&path).map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        let mut header = vec![0u8; HEADER_LEN.min(len) as usize];
        file.read_exact(&mut header).map_err(io)?;
        let (dim, count) = parse_header(&header)?;
        let expected = (dim as u64)
            .checked_mul(4)
            .and_then(|r| r.checked_mul(count))
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::format(10, "row count overflows"))?;
        if len < expected {
            let whole_rows = (len - HEADER_LEN) / (dim as u64 * 4);
            return Err(Error::format(
                HEADER_LEN + whole_rows * dim as u64 * 4,
                format!("header declares {count} rows, payload ends inside row {whole_rows}"),
            ));
        }
        if len > expected {
            return Err(Error::format(expected, "trailing bytes after the last row"));
        }
        let mpath = meta_path(&path);
        let sidecar = File::open(&mpath).map_err(|e| Error::storage(&mpath, e))?;
        Ok(Self {
            path,
            dim: dim as usize,
            count,
            next: 0,
            vectors: BufReader::new(file),
            sidecar: BufReader::new(sidecar).lines(),
            sidecar_offset: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows declared in the header.
    pub fn rows(&self) -> u64 {
        self.count
    }

    fn read_row(&mut self, buf: &mut Vec<f32>) -> Result<UtteranceMeta> {
        let row = self.next;
        let mut bytes = vec![0u8; self.dim * 4];
        self.vectors
            .read_exact(&mut bytes)
            .map_err(|e| Error::storage(&self.path, e))?;
        buf.clear();
        buf.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        let line = loop {
            match self.sidecar.next() {
                None => {
                    return Err(Error::format(
                        self.sidecar_offset,
                        format!("sidecar ends before row {row}"),
                    ))
                }
                Some(Err(e)) => return Err(Error::storage(meta_path(&self.path), e)),
                Some(Ok(l)) if l.trim().is_empty() => self.sidecar_offset += l.len() as u64 + 1,
                Some(Ok(l)) => break l,
            }
        };
        let parsed: MetaLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(self.sidecar_offset, format!("sidecar record: {e}")))?;
        if parsed.row != row {
            return Err(Error::format(
                self.sidecar_offset,
                format!("sidecar record for row {} where row {row} was expected", parsed.row),
            ));
        }
        self.sidecar_offset += line.len() as u64 + 1;
        self.next += 1;
        Ok(parsed.meta)
    }
}

impl Iterator for CorpusReader {
    type Item = Result<(UtteranceMeta, Vec<f32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let mut buf = Vec::with_capacity(self.dim);
        Some(self.read_row(&mut buf).map(|m| (m, buf)))
    }
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<VectorCorpus> {
    let mut reader = CorpusReader::open(path)?;
    let mut corpus = VectorCorpus::new(reader.dim());
    corpus.data.reserve(reader.rows() as usize * reader.dim());
    let mut buf = Vec::with_capacity(reader.dim());
    while reader.next < reader.count {
        let meta = reader.read_row(&mut buf)?;
        corpus.push(meta, &buf)?;
    }
    Ok(corpus)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &VectorCorpus) -> Result<()> {
    let mut w = CorpusWriter::create(path, corpus.dim())?;
    for (meta, row) in corpus.rows() {
        w.append(meta, row)?;
    }
    w.finish()?;
    Ok(())
}

/// Isotropic Gaussian speaker geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub utterances: usize,
    pub dim: usize,
    /// Spread of speaker means.
    pub sigma_b: f64,
    /// Spread of utterances around their speaker mean.
    pub sigma_w: f64,
    /// Scale of a direction shared by every speaker mean. Zero gives
    /// mutually orthogonal speakers in expectation; positive values raise
    /// the cross-speaker cosine.
    #[serde(default)]
    pub shared: f64,
    pub seed: u64,
}

/// Shared scale for which speaker means (averaged over 20 utterances)
/// meet at cosine 0.2 under `sigma_b = sigma_w = 1`:
/// `c² / (c² + 1 + 1/20) = 0.2`.
pub const CALIBRATED_SHARED: f64 = 0.512_347_538_297_980_1;

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            speakers: 50,
            utterances: 20,
            dim: crate::vector::SPEAKER_DIM,
            sigma_b: 1.0,
            sigma_w: 1.0,
            shared: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The desk-scale corpus: 50 speakers, 20 utterances, cross-speaker
    /// cosine near 0.2.
    pub fn calibrated(seed: u64) -> Self {
        Self {
            shared: CALIBRATED_SHARED,
            seed,
            ..Self::default()
        }
    }

    /// Expected cosine between two speakers' utterance-averaged vectors.
    pub fn expected_cross_speaker_cosine(&self) -> f64 {
        let c2 = self.shared * self.shared;
        c2 / (c2 + self.sigma_b * self.sigma_b + self.sigma_w * self.sigma_w / self.utterances as f64)
    }
}

pub fn speaker_label(s: usize) -> String {
    format!("spk{s:04}")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<VectorCorpus> {
    if !(spec.sigma_b > 0.0 && spec.sigma_w > 0.0) || spec.shared < 0.0 || !spec.shared.is_finite() {
        return Err(Error::Config(format!(
            "synthetic scales must be positive (sigma_b {}, sigma_w {}, shared {})",
            spec.sigma_b, spec.sigma_w, spec.shared
        )));
    }
    if spec.dim == 0 {
        return Err(Error::Config("synthetic dimension must be positive".into()));
    }
    let mut rng = stream(spec.seed, StreamDomain::Corpus);
    let d = spec.dim;
    let common: Vec<f64> = (0..d).map(|_| spec.shared * standard_normal(&mut rng)).collect();
    let mut corpus = VectorCorpus::new(d);
    corpus.data.reserve(spec.speakers * spec.utterances * d);
    let mut row = vec![0f32; d];
    for s in 0..spec.speakers {
        let mean: Vec<f64> = common
            .iter()
            .map(|c| c + spec.sigma_b * standard_normal(&mut rng))
            .collect();
        let label = speaker_label(s);
        for u in 0..spec.utterances {
            for (r, m) in row.iter_mut().zip(&mean) {
                *r = (m + spec.sigma_w * standard_normal(&mut rng)) as f32;
            }
            let duration = uniform(&mut rng, 2.0, 15.0);
            corpus.push(
                UtteranceMeta {
                    utterance_id: format!("{label}-u{u:03}"),
                    speaker_label: label.clone(),
                    duration_seconds: Some(duration),
                },
                &row,
            )?;
        }
    }
    Ok(corpus)
}

#[derive(Debug, Deserialize)]
struct ImportRow {
    utterance_id: String,
    speaker_label: String,
    #[serde(default)]
    duration_seconds: Option<f64>,
}

/// Imports a headerless raw little-endian f32 matrix with a CSV metadata
/// table (`utterance_id,speaker_label[,duration_seconds]`, header row
/// required).
pub fn import_external(
    vectors_path: impl AsRef<Path>,
    metadata_csv: impl AsRef<Path>,
    dim: usize,
) -> Result<VectorCorpus> {
    let vpath = vectors_path.as_ref();
    let bytes = std::fs::read(vpath).map_err(|e| Error::storage(vpath, e))?;
    if dim == 0 {
        return Err(Error::Config("import dimension must be positive".into()));
    }
    let stride = dim * 4;
    if bytes.len() % stride != 0 {
        return Err(Error::format(
            (bytes.len() / stride * stride) as u64,
            format!(
                "{} bytes is not a whole number of {dim}-dimensional f32 rows",
                bytes.len()
            ),
        ));
    }
    let rows = bytes.len() / stride;
    let mpath = metadata_csv.as_ref();
    let mut reader = csv::Reader::from_path(mpath).map_err(|e| csv_error(mpath, e))?;
    let meta: Vec<ImportRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(mpath, e))?;
    if meta.len() != rows {
        return Err(Error::format(
            0,
            format!("{rows} vector rows but {} metadata rows", meta.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let bad: Vec<usize> = (0..rows)
        .filter(|&r| values[r * dim..(r + 1) * dim].iter().any(|v| !v.is_finite()))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Numerics(format!("non-finite values in rows {bad:?}")));
    }
    let mut corpus = VectorCorpus::new(dim);
    for (r, m) in meta.into_iter().enumerate() {
        corpus.push(
            UtteranceMeta {
                utterance_id: m.utterance_id,
                speaker_label: m.speaker_label,
                duration_seconds: m.duration_seconds,
            },
            &values[r * dim..(r + 1) * dim],
        )?;
    }
    Ok(corpus)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::storage(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(offset, format!("metadata table: {e}"))
    }
}
