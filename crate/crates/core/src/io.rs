//! File helpers shared by the on-disk formats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Writes `path` through a temporary file in the same directory and renames
/// it into place, so readers never observe a partial file.
pub fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads a headerless numeric CSV with one latent per row.
pub fn read_latents_csv(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).flexible(true).from_path(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for rec in rdr.records() {
        let rec = rec?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Format(format!("{}: ragged row {}", path.display(), rows + 1)));
        }
        for f in rec.iter() {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: {:?} is not a number", path.display(), f)))?,
            );
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Format(format!("{}: no rows", path.display())));
    }
    Tensor::matrix(rows, cols.unwrap_or(0), data)
}

/// Writes the rows of a `[B, n]` tensor as headerless CSV. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_latents_csv(path: &Path, t: &Tensor) -> Result<()> {
    let t = t.as_batch()?;
    atomic_write(path, |w| {
        for r in 0..t.rows() {
            let line: Vec<String> = t.row(r).iter().map(f64::to_string).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    })
}
