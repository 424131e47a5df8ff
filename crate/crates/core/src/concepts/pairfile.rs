use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::numerics::Tensor;
use crate::objective::{PairBatch, PairMode};

pub const PAIR_FILE_MAGIC: [u8; 4] = *b"ILP1";
pub const PAIR_FILE_VERSION: u32 = 1;
/// magic, version, N, rows, concept, mode.
pub const PAIR_FILE_HEADER_LEN: u64 = 4 + 4 + 4 + 8 + 2 + 1;

/// Header of a latent pair file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairFileHeader {
    pub dim: usize,
    pub rows: u64,
    pub concept: u16,
    pub mode: PairMode,
}

impl PairFileHeader {
    fn stream_bytes(&self) -> u64 {
        self.rows * self.dim as u64 * 8
    }

    fn encode(&self) -> Vec<u8> {
        let mut h = Vec::with_capacity(PAIR_FILE_HEADER_LEN as usize);
        h.extend_from_slice(&PAIR_FILE_MAGIC);
        h.extend_from_slice(&PAIR_FILE_VERSION.to_le_bytes());
        h.extend_from_slice(&(self.dim as u32).to_le_bytes());
        h.extend_from_slice(&self.rows.to_le_bytes());
        h.extend_from_slice(&self.concept.to_le_bytes());
        h.push(self.mode.code());
        h
    }

    fn decode(b: &[u8; PAIR_FILE_HEADER_LEN as usize]) -> Result<Self> {
        if b[0..4] != PAIR_FILE_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected \"ILP1\"", &b[0..4])));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
        if version != PAIR_FILE_VERSION {
            return Err(Error::Format(format!("unsupported pair file version {}", version)));
        }
        let dim = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")) as usize;
        let rows = u64::from_le_bytes(b[12..20].try_into().expect("8 bytes"));
        let concept = u16::from_le_bytes(b[20..22].try_into().expect("2 bytes"));
        let mode = PairMode::from_code(b[22])?;
        if dim == 0 {
            return Err(Error::Format("pair file declares N = 0".into()));
        }
        if concept == 0 {
            return Err(Error::Format("pair file declares concept 0 (the residual)".into()));
        }
        Ok(PairFileHeader { dim, rows, concept, mode })
    }
}

/// Writes batches of one concept and mode to `path`. Stream `a` is written
/// in full before stream `b`.
pub fn write_pairs(path: &Path, batches: &[PairBatch]) -> Result<()> {
    let first = batches
        .first()
        .ok_or_else(|| Error::InvalidConfig("no pair batches to write".into()))?;
    for b in batches {
        if b.dim() != first.dim() || b.concept != first.concept || b.mode != first.mode {
            return Err(Error::InvalidConfig(
                "all batches in a pair file must share N, concept and mode".into(),
            ));
        }
    }
    let concept = u16::try_from(first.concept)
        .map_err(|_| Error::InvalidConfig(format!("concept id {} does not fit in u16", first.concept)))?;
    let header = PairFileHeader {
        dim: first.dim(),
        rows: batches.iter().map(|b| b.len() as u64).sum(),
        concept,
        mode: first.mode,
    };
    atomic_write(path, |w| {
        w.write_all(&header.encode())?;
        for b in batches {
            write_f64s(w, b.za.data())?;
        }
        for b in batches {
            write_f64s(w, b.zb.data())?;
        }
        Ok(())
    })
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Streaming reader over a pair file; holds one cursor per stream.
#[derive(Debug)]
pub struct PairReader {
    header: PairFileHeader,
    a: BufReader<File>,
    b: BufReader<File>,
    position: u64,
}

/// Opens `path` for streaming. The file length is checked against the
/// header so truncation is detected before any rows are read.
pub fn read_pairs(path: &Path) -> Result<PairReader> {
    PairReader::open(path)
}

impl PairReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        let mut raw = [0u8; PAIR_FILE_HEADER_LEN as usize];
        f.read_exact(&mut raw).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("file shorter than pair file header".into()),
            _ => Error::Io(e),
        })?;
        let header = PairFileHeader::decode(&raw)?;
        let expected = PAIR_FILE_HEADER_LEN + 2 * header.stream_bytes();
        let actual = f.metadata()?.len();
        if actual < expected {
            return Err(Error::Format(format!(
                "truncated pair file: {} bytes, header implies {}",
                actual, expected
            )));
        }
        if actual > expected {
            return Err(Error::Format(format!(
                "pair file has {} bytes but header implies {}: stream row counts disagree",
                actual, expected
            )));
        }
        let mut b = File::open(path)?;
        b.seek(SeekFrom::Start(PAIR_FILE_HEADER_LEN + header.stream_bytes()))?;
        Ok(PairReader { header, a: BufReader::new(f), b: BufReader::new(b), position: 0 })
    }

    pub fn header(&self) -> &PairFileHeader {
        &self.header
    }

    /// Fails unless the file's `N` equals `dim`.
    pub fn expect_dim(self, dim: usize) -> Result<Self> {
        if self.header.dim != dim {
            return Err(Error::Format(format!(
                "pair file has N = {}, configured layout has N = {}",
                self.header.dim, dim
            )));
        }
        Ok(self)
    }

    pub fn remaining(&self) -> u64 {
        self.header.rows - self.position
    }

    /// Next batch of at most `max_rows` pairs, or `None` at the end.
    pub fn next_batch(&mut self, max_rows: usize) -> Result<Option<PairBatch>> {
        if max_rows == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        let rows = self.remaining().min(max_rows as u64) as usize;
        if rows == 0 {
            return Ok(None);
        }
        let n = self.header.dim;
        let za = read_rows(&mut self.a, rows, n)?;
        let zb = read_rows(&mut self.b, rows, n)?;
        self.position += rows as u64;
        Ok(Some(PairBatch::new(za, zb, self.header.concept as usize, self.header.mode)?))
    }

    /// Moves both cursors back to the first row.
    pub fn rewind(&mut self) -> Result<()> {
        self.a.seek(SeekFrom::Start(PAIR_FILE_HEADER_LEN))?;
        self.b.seek(SeekFrom::Start(PAIR_FILE_HEADER_LEN + self.header.stream_bytes()))?;
        self.position = 0;
        Ok(())
    }

    /// Positions both cursors at row `row` (`row ≤ rows`).
    pub fn seek_row(&mut self, row: u64) -> Result<()> {
        if row > self.header.rows {
            return Err(Error::Format(format!("row {} past end of {}-row pair file", row, self.header.rows)));
        }
        let off = row * self.header.dim as u64 * 8;
        self.a.seek(SeekFrom::Start(PAIR_FILE_HEADER_LEN + off))?;
        self.b.seek(SeekFrom::Start(PAIR_FILE_HEADER_LEN + self.header.stream_bytes() + off))?;
        self.position = row;
        Ok(())
    }

    /// Consumes the reader as an iterator of batches of `size` pairs.
    pub fn batches(self, size: usize) -> PairBatches {
        PairBatches { reader: self, size }
    }
}

fn read_rows<R: Read>(r: &mut R, rows: usize, n: usize) -> Result<Tensor> {
    let mut buf = vec![0u8; rows * n * 8];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("pair file ended early".into()),
        _ => Error::Io(e),
    })?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::matrix(rows, n, data)
}

/// Iterator returned by [`PairReader::batches`].
#[derive(Debug)]
pub struct PairBatches {
    reader: PairReader,
    size: usize,
}

impl Iterator for PairBatches {
    type Item = Result<PairBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.reader.next_batch(self.size).transpose()
    }
}

/// Reads pairs from two headerless CSV files (one row per latent) and a
/// `key=value` sidecar naming `concept` and `mode`.
pub fn read_pairs_csv(a: &Path, b: &Path, meta: &Path) -> Result<PairBatch> {
    let meta = parse_meta(&std::fs::read_to_string(meta)?)?;
    let concept: usize = meta
        .get("concept")
        .ok_or_else(|| Error::Format("metadata lacks concept=".into()))?
        .parse()
        .map_err(|_| Error::Format("metadata concept is not an integer".into()))?;
    let mode: PairMode = meta.get("mode").map(|m| m.parse()).transpose()?.unwrap_or(PairMode::Share);
    let za = read_csv_matrix(a)?;
    let zb = read_csv_matrix(b)?;
    if za.shape() != zb.shape() {
        return Err(Error::Format(format!(
            "CSV streams have shapes {:?} and {:?}",
            za.shape(),
            zb.shape()
        )));
    }
    PairBatch::new(za, zb, concept, mode).map_err(|e| Error::Format(e.to_string()))
}

fn parse_meta(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metadata line {:?} is not key=value", line)))?;
        let k = k.trim();
        if !matches!(k, "concept" | "mode") {
            return Err(Error::Format(format!("unknown metadata key {:?}", k)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn read_csv_matrix(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Format(format!("{}: ragged row {}", path.display(), rows + 1)))
            }
            _ => {}
        }
        for field in rec.iter() {
            data.push(field.parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: {:?} is not a number", path.display(), field))
            })?);
        }
        rows += 1;
    }
    Tensor::matrix(rows, cols.unwrap_or(0), data)
}
