//! The persisted set of consumed identity indices.
//!
//! File layout (all little-endian):
//!
//! ```text
//! offset 0   magic   "IDRG"
//! offset 4   version u16 = 1
//! offset 6   count   u64
//! offset 14  count x u64 indices, in issue order
//! ```
//!
//! Appends write the index word first and the count second. A crash between
//! the two leaves a complete word past `count`; loading adopts such words as
//! used, so a stranded index can never be issued twice.

use std::collections::HashSet;
use std::fs::{File, OpenOptions, TryLockError};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::vector::IdentityIndex;

const MAGIC: &[u8; 4] = b"IDRG";
const VERSION: u16 = 1;
const HEADER_LEN: u64 = 14;
const COUNT_OFFSET: u64 = 6;

/// Proposals rejected before [`IdentityRegistry::next_unused`] gives up.
pub const MAX_PROPOSALS: usize = 1000;

/// Simulated failures for crash-safety tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The next append fails before touching the file.
    FailWrite,
    /// The next append writes its index word and then "crashes" before the
    /// count is updated; the registry refuses further use.
    CrashAfterIndexWord,
}

struct Backing {
    path: PathBuf,
    file: File,
    sync: bool,
}

/// Set of used identity indices, optionally backed by an append-only file
/// held under an exclusive advisory lock.
pub struct IdentityRegistry {
    used: HashSet<u64>,
    order: Vec<u64>,
    /// Words found past the header count on load.
    stranded: usize,
    backing: Option<Backing>,
    fault: Option<Fault>,
    poisoned: bool,
}

impl std::fmt::Debug for IdentityRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityRegistry")
            .field("len", &self.order.len())
            .field("stranded", &self.stranded)
            .field("path", &self.backing.as_ref().map(|b| &b.path))
            .finish()
    }
}

impl Default for IdentityRegistry {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl PartialEq for IdentityRegistry {
    fn eq(&self, other: &Self) -> bool {
        self.used == other.used
    }
}

impl IdentityRegistry {
    pub fn in_memory() -> Self {
        Self {
            used: HashSet::new(),
            order: Vec::new(),
            stranded: 0,
            backing: None,
            fault: None,
            poisoned: false,
        }
    }

    /// Opens `path` for writing under an exclusive lock, creating an empty
    /// registry file if none exists.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| Error::storage(path, e))?;
        match file.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => {
                return Err(Error::storage(
                    path,
                    std::io::Error::new(
                        std::io::ErrorKind::WouldBlock,
                        "registry is locked by another writer",
                    ),
                ))
            }
            Err(TryLockError::Error(e)) => return Err(Error::storage(path, e)),
        }
        let len = file.metadata().map_err(|e| Error::storage(path, e))?.len();
        let mut reg = if len == 0 {
            write_header(&mut file, 0).map_err(|e| Error::storage(path, e))?;
            Self::in_memory()
        } else {
            let mut bytes = Vec::with_capacity(len as usize);
            file.read_to_end(&mut bytes)
                .map_err(|e| Error::storage(path, e))?;
            let reg = parse(&bytes)?;
            // Rewrite the header so the adopted words and any torn tail are
            // settled before the first new append.
            let payload = reg.order.len() as u64 * 8;
            file.set_len(HEADER_LEN + payload)
                .map_err(|e| Error::storage(path, e))?;
            write_count(&mut file, reg.order.len() as u64).map_err(|e| Error::storage(path, e))?;
            reg
        };
        reg.backing = Some(Backing {
            path: path.to_path_buf(),
            file,
            sync: false,
        });
        Ok(reg)
    }

    /// Reads `path` without locking or holding it open.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
        parse(&bytes)
    }

    /// Writes the full registry to `path`, replacing any existing file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::storage(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + 8 * self.order.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u64).to_le_bytes());
        for idx in &self.order {
            out.extend_from_slice(&idx.to_le_bytes());
        }
        out
    }

    /// Calls `fsync` after every append when enabled. Off by default: appends
    /// still reach the OS before an index is returned, which survives a
    /// process crash but not a power loss.
    pub fn set_sync(&mut self, sync: bool) {
        if let Some(b) = self.backing.as_mut() {
            b.sync = sync;
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.backing.as_ref().map(|b| b.path.as_path())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Indices adopted from past the recorded count when the file was loaded.
    pub fn stranded(&self) -> usize {
        self.stranded
    }

    pub fn contains(&self, index: IdentityIndex) -> bool {
        self.used.contains(&index.get())
    }

    /// Used indices in issue order.
    pub fn indices(&self) -> impl Iterator<Item = IdentityIndex> + '_ {
        self.order.iter().map(|&i| IdentityIndex(i))
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Marks `index` used and persists it. Recording an index that is
    /// already present is a no-op.
    pub fn record(&mut self, index: IdentityIndex) -> Result<()> {
        if self.poisoned {
            return Err(Error::State("registry crashed mid-append; reopen it".into()));
        }
        if self.used.contains(&index.get()) {
            return Ok(());
        }
        self.append(index.get())?;
        self.used.insert(index.get());
        self.order.push(index.get());
        Ok(())
    }

    /// Records every index of `indices` not already present.
    pub fn reserve(&mut self, indices: impl IntoIterator<Item = IdentityIndex>) -> Result<()> {
        for idx in indices {
            self.record(idx)?;
        }
        Ok(())
    }

    /// Draws a fresh index uniformly from `[0, 2^63)`, records it, and only
    /// then returns it.
    pub fn next_unused<R: Rng + ?Sized>(&mut self, entropy: &mut R) -> Result<IdentityIndex> {
        for _ in 0..MAX_PROPOSALS {
            let proposal = entropy.next_u64() >> 1;
            if self.used.contains(&proposal) {
                continue;
            }
            let index = IdentityIndex(proposal);
            self.record(index)?;
            return Ok(index);
        }
        Err(Error::CapacityExhausted {
            attempts: MAX_PROPOSALS,
        })
    }

    fn append(&mut self, index: u64) -> Result<()> {
        let fault = self.fault.take();
        let count = self.order.len() as u64;
        let Some(b) = self.backing.as_mut() else {
            return match fault {
                Some(Fault::FailWrite) => Err(Error::storage(
                    "<memory>",
                    std::io::Error::other("injected write failure"),
                )),
                _ => Ok(()),
            };
        };
        let path = b.path.clone();
        if fault == Some(Fault::FailWrite) {
            return Err(Error::storage(path, std::io::Error::other("injected write failure")));
        }
        let io = |e| Error::storage(&path, e);
        b.file
            .seek(SeekFrom::Start(HEADER_LEN + count * 8))
            .map_err(io)?;
        b.file.write_all(&index.to_le_bytes()).map_err(io)?;
        if fault == Some(Fault::CrashAfterIndexWord) {
            self.poisoned = true;
            return Err(Error::storage(
                path,
                std::io::Error::other("injected crash after index word"),
            ));
        }
        write_count(&mut b.file, count + 1).map_err(io)?;
        if b.sync {
            b.file.sync_data().map_err(io)?;
        }
        Ok(())
    }
}

fn write_header(file: &mut File, count: u64) -> std::io::Result<()> {
    file.seek(SeekFrom::Start(0))?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&count.to_le_bytes())
}

fn write_count(file: &mut File, count: u64) -> std::io::Result<()> {
    file.seek(SeekFrom::Start(COUNT_OFFSET))?;
    file.write_all(&count.to_le_bytes())
}

fn parse(bytes: &[u8]) -> Result<IdentityRegistry> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::format(
            bytes.len() as u64,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"IDRG\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let words = (bytes.len() as u64 - HEADER_LEN) / 8;
    if words < count {
        return Err(Error::format(
            HEADER_LEN + words * 8,
            format!("header declares {count} indices, payload holds {words}"),
        ));
    }
    let mut reg = IdentityRegistry::in_memory();
    reg.order.reserve(words as usize);
    reg.used.reserve(words as usize);
    for k in 0..words {
        let off = (HEADER_LEN + k * 8) as usize;
        let value = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if value >= IdentityIndex::BOUND {
            return Err(Error::format(off as u64, format!("index {value} out of range")));
        }
        if !reg.used.insert(value) {
            return Err(Error::format(off as u64, format!("duplicate index {value}")));
        }
        reg.order.push(value);
    }
    reg.stranded = (words - count) as usize;
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{stream, StreamDomain};
    use std::convert::Infallible;

    struct Scripted(Vec<u64>);

    impl rand::TryRng for Scripted {
        type Error = Infallible;
        fn try_next_u32(&mut self) -> Result<u32, Infallible> {
            Ok(self.try_next_u64()? as u32)
        }
        fn try_next_u64(&mut self) -> Result<u64, Infallible> {
            Ok(self.0.remove(0))
        }
        fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), Infallible> {
            unimplemented!()
        }
    }

    #[test]
    fn two_calls_give_distinct_indices() {
        let mut reg = IdentityRegistry::in_memory();
        let mut rng = stream(0, StreamDomain::Registry);
        let a = reg.next_unused(&mut rng).unwrap();
        let b = reg.next_unused(&mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(reg.len(), 2);
    }

    #[test]
    fn used_proposal_is_rejected() {
        let mut reg = IdentityRegistry::in_memory();
        reg.reserve((0..10).map(IdentityIndex)).unwrap();
        let mut rng = Scripted(vec![3 << 1, 12 << 1]);
        assert_eq!(reg.next_unused(&mut rng).unwrap(), IdentityIndex(12));
        assert!(reg.contains(IdentityIndex(12)));
    }

    #[test]
    fn always_colliding_entropy_exhausts() {
        let mut reg = IdentityRegistry::in_memory();
        reg.record(IdentityIndex(5)).unwrap();
        let mut rng = Scripted(vec![5 << 1; MAX_PROPOSALS]);
        assert!(matches!(
            reg.next_unused(&mut rng),
            Err(Error::CapacityExhausted { attempts: MAX_PROPOSALS })
        ));
    }

    #[test]
    fn failed_write_does_not_issue() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = IdentityRegistry::open(dir.path().join("r.idrg")).unwrap();
        reg.inject_fault(Fault::FailWrite);
        let mut rng = Scripted(vec![40 << 1, 40 << 1]);
        assert!(matches!(reg.next_unused(&mut rng), Err(Error::Storage { .. })));
        assert!(!reg.contains(IdentityIndex(40)));
        assert_eq!(reg.next_unused(&mut rng).unwrap(), IdentityIndex(40));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.idrg");
        let mut reg = IdentityRegistry::in_memory();
        reg.reserve([IdentityIndex(3), IdentityIndex(1 << 40), IdentityIndex(0)])
            .unwrap();
        reg.save(&path).unwrap();
        let back = IdentityRegistry::load(&path).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.indices().collect::<Vec<_>>(), reg.indices().collect::<Vec<_>>());
    }

    #[test]
    fn empty_file_is_format_error() {
        assert!(matches!(parse(&[]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn every_truncation_is_format_error() {
        let mut reg = IdentityRegistry::in_memory();
        reg.reserve((100..117).map(IdentityIndex)).unwrap();
        let bytes = reg.to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                matches!(parse(&bytes[..cut]), Err(Error::Format { .. })),
                "truncation to {cut} bytes parsed"
            );
        }
        assert_eq!(parse(&bytes).unwrap().len(), 17);
    }

    #[test]
    fn duplicate_word_is_format_error() {
        let mut bytes = IdentityRegistry::in_memory().to_bytes();
        bytes[6] = 2;
        bytes.extend_from_slice(&9u64.to_le_bytes());
        bytes.extend_from_slice(&9u64.to_le_bytes());
        assert!(matches!(parse(&bytes), Err(Error::Format { offset: 22, .. })));
    }

    #[test]
    fn crash_after_index_word_strands_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.idrg");
        let mut reg = IdentityRegistry::open(&path).unwrap();
        let mut rng = stream(9, StreamDomain::Registry);
        let first = reg.next_unused(&mut rng).unwrap();
        reg.inject_fault(Fault::CrashAfterIndexWord);
        let mut probe = stream(10, StreamDomain::Registry);
        let stranded = IdentityIndex(probe.next_u64() >> 1);
        let mut replay = stream(10, StreamDomain::Registry);
        assert!(reg.next_unused(&mut replay).is_err());
        assert!(matches!(reg.record(IdentityIndex(1)), Err(Error::State(_))));
        drop(reg);

        let mut reg = IdentityRegistry::open(&path).unwrap();
        assert_eq!(reg.stranded(), 1);
        assert!(reg.contains(first));
        assert!(reg.contains(stranded));
        // Same entropy again: the stranded proposal must be skipped.
        let mut replay = stream(10, StreamDomain::Registry);
        let next = reg.next_unused(&mut replay).unwrap();
        assert_ne!(next, stranded);
        drop(reg);
        assert_eq!(IdentityRegistry::load(&path).unwrap().stranded(), 0);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.idrg");
        let _first = IdentityRegistry::open(&path).unwrap();
        assert!(matches!(IdentityRegistry::open(&path), Err(Error::Storage { .. })));
        // read-only inspection still works
        assert!(IdentityRegistry::load(&path).unwrap().is_empty());
    }

    #[test]
    fn reopen_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.idrg");
        let mut rng = stream(2, StreamDomain::Registry);
        let mut issued = Vec::new();
        for _ in 0..3 {
            let mut reg = IdentityRegistry::open(&path).unwrap();
            for _ in 0..50 {
                issued.push(reg.next_unused(&mut rng).unwrap());
            }
        }
        let reg = IdentityRegistry::load(&path).unwrap();
        assert_eq!(reg.indices().collect::<Vec<_>>(), issued);
    }
}
