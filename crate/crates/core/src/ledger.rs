//! File-backed, append-only hash chain standing in for the blockchain.
//!
//! File layout: the 8-byte magic `AFLLEDG1`, then one frame per block:
//!
//! ```text
//! block_len: u64 LE
//! block:     height u64 | timestamp u64 | prev_digest [32] | payload_digest [32]
//!            | payload_len u64 | payload
//! digest:    [32] = SHA-256(block)
//! ```
//!
//! Integers are little-endian. `prev_digest` of block `h` is the digest of
//! block `h - 1` (all zeros for the genesis block) and `block_len` is always
//! `88 + payload_len`.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::crypto::{hash, Digest, Hasher, DIGEST_LEN};

pub const LEDGER_MAGIC: &[u8; 8] = b"AFLLEDG1";

/// Bytes of a block before its payload.
pub const BLOCK_HEADER_LEN: u64 = 8 + 8 + 32 + 32 + 8;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} already exists")]
    Exists(PathBuf),
    #[error("no block {0}")]
    NotFound(String),
    #[error("chain rejected at height {height}: {reason}")]
    Corrupt { height: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, LedgerError>;

/// Source of block timestamps. The fixed clock keeps ledger bytes
/// reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Fixed(u64),
    System,
}

impl Default for Clock {
    fn default() -> Self {
        Clock::Fixed(0)
    }
}

impl Clock {
    fn now(self) -> u64 {
        match self {
            Clock::Fixed(t) => t,
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Everything about a block except its payload bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub height: u64,
    pub timestamp: u64,
    pub prev_digest: Digest,
    pub payload_digest: Digest,
    pub payload_len: u64,
    /// Digest of the whole block; the next block's `prev_digest`.
    pub digest: Digest,
    /// File offset of the first payload byte.
    pub payload_offset: u64,
}

impl BlockHeader {
    fn encode(&self) -> [u8; BLOCK_HEADER_LEN as usize] {
        let mut out = [0u8; BLOCK_HEADER_LEN as usize];
        out[0..8].copy_from_slice(&self.height.to_le_bytes());
        out[8..16].copy_from_slice(&self.timestamp.to_le_bytes());
        out[16..48].copy_from_slice(&self.prev_digest.0);
        out[48..80].copy_from_slice(&self.payload_digest.0);
        out[80..88].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub payload: Vec<u8>,
}

/// Outcome of [`verify_chain`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainVerdict {
    Accept { blocks: u64 },
    Reject { height: u64, reason: String },
}

impl ChainVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, ChainVerdict::Accept { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads exactly `buf.len()` bytes, distinguishing clean EOF from I/O
/// failure.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Walks the file, returning the verified prefix and the first failure.
fn scan(path: &Path) -> Result<(Vec<BlockHeader>, Option<(u64, String)>)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let mut blocks: Vec<BlockHeader> = Vec::new();
    let fail = |blocks: Vec<BlockHeader>, height: u64, reason: String| {
        Ok((blocks, Some((height, reason))))
    };

    let mut magic = [0u8; 8];
    if read_full(&mut r, &mut magic).map_err(io_err(path))? != 8 || &magic != LEDGER_MAGIC {
        return fail(blocks, 0, "bad ledger magic".into());
    }
    let mut offset = 8u64;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let height = blocks.len() as u64;
        let mut len = [0u8; 8];
        match read_full(&mut r, &mut len).map_err(io_err(path))? {
            0 if height > 0 => return Ok((blocks, None)),
            0 => return fail(blocks, 0, "ledger has no genesis block".into()),
            8 => {}
            _ => return fail(blocks, height, "truncated frame length".into()),
        }
        let block_len = u64::from_le_bytes(len);
        if block_len < BLOCK_HEADER_LEN {
            return fail(
                blocks,
                height,
                format!("block length {block_len} too short"),
            );
        }
        let mut head = [0u8; BLOCK_HEADER_LEN as usize];
        if read_full(&mut r, &mut head).map_err(io_err(path))? != head.len() {
            return fail(blocks, height, "truncated block header".into());
        }
        let field = |a: usize| u64::from_le_bytes(head[a..a + 8].try_into().expect("8 bytes"));
        let digest_at = |a: usize| Digest(head[a..a + 32].try_into().expect("32 bytes"));
        let mut header = BlockHeader {
            height: field(0),
            timestamp: field(8),
            prev_digest: digest_at(16),
            payload_digest: digest_at(48),
            payload_len: field(80),
            digest: Digest::ZERO,
            payload_offset: offset + 8 + BLOCK_HEADER_LEN,
        };
        if header.payload_len.checked_add(BLOCK_HEADER_LEN) != Some(block_len) {
            return fail(
                blocks,
                height,
                "block length disagrees with payload length".into(),
            );
        }
        if header.height != height {
            return fail(blocks, height, format!("stored height {}", header.height));
        }
        let expected_prev = blocks.last().map_or(Digest::ZERO, |b| b.digest);
        if header.prev_digest != expected_prev {
            return fail(
                blocks,
                height,
                "previous-block digest does not match".into(),
            );
        }

        let mut block_hash = Hasher::new();
        block_hash.update(&head);
        let mut payload_hash = Hasher::new();
        let mut remaining = header.payload_len;
        while remaining > 0 {
            let want = remaining.min(buf.len() as u64) as usize;
            let got = read_full(&mut r, &mut buf[..want]).map_err(io_err(path))?;
            block_hash.update(&buf[..got]);
            payload_hash.update(&buf[..got]);
            if got < want {
                return fail(blocks, height, "truncated payload".into());
            }
            remaining -= got as u64;
        }
        if payload_hash.finish() != header.payload_digest {
            return fail(
                blocks,
                height,
                "payload digest does not match payload".into(),
            );
        }
        header.digest = block_hash.finish();
        let mut stored = [0u8; DIGEST_LEN];
        if read_full(&mut r, &mut stored).map_err(io_err(path))? != DIGEST_LEN {
            return fail(blocks, height, "truncated block digest".into());
        }
        if Digest(stored) != header.digest {
            return fail(blocks, height, "block digest does not match block".into());
        }
        offset = header.payload_offset + header.payload_len + DIGEST_LEN as u64;
        blocks.push(header);
    }
}

/// Recomputes every link of the chain stored at `path`. I/O failures are
/// errors; any inconsistency is a [`ChainVerdict::Reject`] naming the first
/// bad height.
pub fn verify_chain(path: impl AsRef<Path>) -> Result<ChainVerdict> {
    let (blocks, failure) = scan(path.as_ref())?;
    Ok(match failure {
        None => ChainVerdict::Accept {
            blocks: blocks.len() as u64,
        },
        Some((height, reason)) => ChainVerdict::Reject { height, reason },
    })
}

/// An open, verified ledger. Single writer; readers open their own handle.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    blocks: Vec<BlockHeader>,
    clock: Clock,
}

impl Ledger {
    /// Creates a new ledger file holding only the genesis block.
    pub fn create(path: impl AsRef<Path>, genesis: &[u8], clock: Clock) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                io::ErrorKind::AlreadyExists => LedgerError::Exists(path.clone()),
                _ => LedgerError::Io {
                    path: path.clone(),
                    source: e,
                },
            })?;
        let mut w = BufWriter::new(file);
        w.write_all(LEDGER_MAGIC).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        drop(w);
        let mut ledger = Self {
            path,
            blocks: Vec::new(),
            clock,
        };
        if let Err(e) = ledger.append(genesis) {
            let _ = std::fs::remove_file(&ledger.path);
            return Err(e);
        }
        Ok(ledger)
    }

    /// Opens an existing ledger, refusing one whose chain does not verify.
    pub fn open(path: impl AsRef<Path>, clock: Clock) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let (blocks, failure) = scan(&path)?;
        if let Some((height, reason)) = failure {
            return Err(LedgerError::Corrupt { height, reason });
        }
        Ok(Self {
            path,
            blocks,
            clock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn headers(&self) -> &[BlockHeader] {
        &self.blocks
    }

    pub fn header(&self, height: u64) -> Result<&BlockHeader> {
        self.blocks
            .get(height as usize)
            .ok_or_else(|| LedgerError::NotFound(format!("height {height}")))
    }

    pub fn height_of(&self, digest: &Digest) -> Result<u64> {
        self.blocks
            .iter()
            .position(|b| b.digest == *digest)
            .map(|h| h as u64)
            .ok_or_else(|| LedgerError::NotFound(format!("digest {digest}")))
    }

    /// Re-verifies the file on disk.
    pub fn verify(&self) -> Result<ChainVerdict> {
        verify_chain(&self.path)
    }

    fn ensure_intact(&self) -> Result<()> {
        let (blocks, failure) = scan(&self.path)?;
        if let Some((height, reason)) = failure {
            return Err(LedgerError::Corrupt { height, reason });
        }
        if blocks != self.blocks {
            return Err(LedgerError::Corrupt {
                height: blocks.len().min(self.blocks.len()) as u64,
                reason: "ledger changed on disk".into(),
            });
        }
        Ok(())
    }

    fn next_header(&self, payload_len: u64, payload_digest: Digest) -> BlockHeader {
        let end = self
            .blocks
            .last()
            .map_or(8, |b| b.payload_offset + b.payload_len + DIGEST_LEN as u64);
        BlockHeader {
            height: self.len(),
            timestamp: self.clock.now(),
            prev_digest: self.blocks.last().map_or(Digest::ZERO, |b| b.digest),
            payload_digest,
            payload_len,
            digest: Digest::ZERO,
            payload_offset: end + 8 + BLOCK_HEADER_LEN,
        }
    }

    /// Writes one frame whose payload is produced by `copy`; on any failure
    /// the file is truncated back to its previous length.
    fn write_frame(
        &mut self,
        mut header: BlockHeader,
        copy: impl FnOnce(&mut dyn Write, &mut Hasher) -> io::Result<()>,
    ) -> Result<Digest> {
        let start = header.payload_offset - 8 - BLOCK_HEADER_LEN;
        let path = self.path.clone();
        let file = OpenOptions::new()
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let attempt = (|| -> io::Result<Digest> {
            let mut f = file.try_clone()?;
            f.seek(SeekFrom::Start(start))?;
            let mut w = BufWriter::with_capacity(1 << 20, f);
            let head = header.encode();
            w.write_all(&(BLOCK_HEADER_LEN + header.payload_len).to_le_bytes())?;
            w.write_all(&head)?;
            let mut h = Hasher::new();
            h.update(&head);
            copy(&mut w, &mut h)?;
            let digest = h.finish();
            w.write_all(&digest.0)?;
            w.flush()?;
            w.get_ref().sync_data()?;
            Ok(digest)
        })();
        match attempt {
            Ok(digest) => {
                header.digest = digest;
                self.blocks.push(header);
                Ok(digest)
            }
            Err(e) => {
                let _ = file.set_len(start);
                Err(LedgerError::Io { path, source: e })
            }
        }
    }

    /// Appends a block and returns its digest.
    pub fn append(&mut self, payload: &[u8]) -> Result<Digest> {
        if !self.blocks.is_empty() {
            self.ensure_intact()?;
        }
        let header = self.next_header(payload.len() as u64, hash(payload));
        self.write_frame(header, |w, h| {
            h.update(payload);
            w.write_all(payload)
        })
    }

    /// Appends the contents of a file as one block without buffering it.
    pub fn append_file(&mut self, payload: impl AsRef<Path>) -> Result<Digest> {
        self.ensure_intact()?;
        let src = payload.as_ref();
        let mut file = File::open(src).map_err(io_err(src))?;
        let mut payload_hash = Hasher::new();
        let mut buf = vec![0u8; 1 << 20];
        let mut len = 0u64;
        loop {
            let n = file.read(&mut buf).map_err(io_err(src))?;
            if n == 0 {
                break;
            }
            payload_hash.update(&buf[..n]);
            len += n as u64;
        }
        let header = self.next_header(len, payload_hash.finish());
        file.seek(SeekFrom::Start(0)).map_err(io_err(src))?;
        self.write_frame(header, move |w, h| {
            let mut copied = 0u64;
            loop {
                let n = file.read(&mut buf)?;
                if n == 0 {
                    break;
                }
                h.update(&buf[..n]);
                w.write_all(&buf[..n])?;
                copied += n as u64;
            }
            if copied != len {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "payload changed while appending",
                ));
            }
            Ok(())
        })
    }

    /// Streams the payload of block `height`.
    pub fn payload_reader(&self, height: u64) -> Result<impl Read> {
        let header = *self.header(height)?;
        let mut file = File::open(&self.path).map_err(io_err(&self.path))?;
        file.seek(SeekFrom::Start(header.payload_offset))
            .map_err(io_err(&self.path))?;
        Ok(BufReader::with_capacity(1 << 20, file).take(header.payload_len))
    }

    pub fn get_record(&self, height: u64) -> Result<Vec<u8>> {
        let header = *self.header(height)?;
        let mut out = Vec::with_capacity(header.payload_len as usize);
        self.payload_reader(height)?
            .read_to_end(&mut out)
            .map_err(io_err(&self.path))?;
        if out.len() as u64 != header.payload_len || hash(&out) != header.payload_digest {
            return Err(LedgerError::Corrupt {
                height,
                reason: "payload changed on disk".into(),
            });
        }
        Ok(out)
    }

    pub fn get_record_by_digest(&self, digest: &Digest) -> Result<Vec<u8>> {
        self.get_record(self.height_of(digest)?)
    }

    pub fn block(&self, height: u64) -> Result<Block> {
        Ok(Block {
            header: *self.header(height)?,
            payload: self.get_record(height)?,
        })
    }
}
