//! Observation file formats.
//!
//! Binary layout (all little-endian):
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `b"HDOB"`           |
//! | 4      | 4    | version (`u32`, = 1)      |
//! | 8      | 8    | `n` (`u64`, increments)   |
//! | 16     | 8    | `d` (`u64`, state dim)    |
//! | 24     | 8    | `h` (`f64`)               |
//! | 32     | …    | `(n+1)·d` row-major `f64` |
//!
//! CSV layout: an optional `# h=<step>` comment line, a header row
//! (`y1,…,yd`), then one observation per row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::NoisyObservations;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HDOB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

pub fn write_binary<W: Write>(obs: &NoisyObservations, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(obs.n() as u64).to_le_bytes())?;
    w.write_all(&(obs.d() as u64).to_le_bytes())?;
    w.write_all(&obs.h().to_le_bytes())?;
    for v in obs.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<NoisyObservations> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated observation header".into()))?;
    if header[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not an observation file".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let h = f64::from_le_bytes(header[24..32].try_into().unwrap());
    let count = (n + 1)
        .checked_mul(d)
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("payload truncated: expected {count} values")))?;
    let y = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    NoisyObservations::new(y, d, h)
}

pub fn write_csv<W: Write>(obs: &NoisyObservations, mut w: W) -> Result<()> {
    writeln!(w, "# h={:e}", obs.h())?;
    let mut wtr = csv::Writer::from_writer(w);
    let header: Vec<String> = (1..=obs.d()).map(|i| format!("y{i}")).collect();
    wtr.write_record(&header).map_err(csv_err)?;
    for i in 0..=obs.n() {
        wtr.write_record(obs.row(i).iter().map(|v| format!("{v:e}")))
            .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the CSV layout. `h` overrides (or supplies) the step when the file
/// has no `# h=` line.
pub fn read_csv<R: Read>(r: R, h: Option<f64>) -> Result<NoisyObservations> {
    let mut reader = BufReader::new(r);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let mut file_h = None;
    let mut pending_header = None;
    if let Some(rest) = first.trim().strip_prefix('#') {
        if let Some(v) = rest.trim().strip_prefix("h=") {
            file_h = Some(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad h in CSV comment: {e}")))?,
            );
        }
    } else {
        pending_header = Some(first);
    }
    let h = h
        .or(file_h)
        .ok_or_else(|| Error::Format("CSV has no '# h=' line and no step was given".into()))?;
    let body: Box<dyn Read> = match pending_header {
        Some(line) => Box::new(std::io::Cursor::new(line.into_bytes()).chain(reader)),
        None => Box::new(reader),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(body);
    let d = rdr.headers().map_err(csv_err)?.len();
    let mut y = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != d {
            return Err(Error::Format(format!(
                "row {row} has {} fields, header has {d}",
                rec.len()
            )));
        }
        for field in rec.iter() {
            y.push(
                field.parse::<f64>().map_err(|e| {
                    Error::Format(format!("row {row}: cannot parse '{field}': {e}"))
                })?,
            );
        }
    }
    NoisyObservations::new(y, d, h)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false)
}

/// Writes CSV when the extension is `.csv`, binary otherwise.
pub fn save(obs: &NoisyObservations, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    if is_csv(path) {
        write_csv(obs, w)
    } else {
        write_binary(obs, w)
    }
}

/// Reads CSV when the extension is `.csv`, binary otherwise.
pub fn load(path: &Path, h: Option<f64>) -> Result<NoisyObservations> {
    let r = BufReader::new(File::open(path)?);
    if is_csv(path) {
        read_csv(r, h)
    } else {
        read_binary(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NoisyObservations {
        NoisyObservations::new(vec![0.1, -2.0, 1e-300, 3.5, 7.25, -0.0], 2, 0.004).unwrap()
    }

    #[test]
    fn binary_header_layout() {
        let mut buf = Vec::new();
        write_binary(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"HDOB");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 0.004);
        assert_eq!(buf.len(), 32 + 6 * 8);
        assert_eq!(read_binary(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn binary_rejects_truncation_and_magic() {
        let mut buf = Vec::new();
        write_binary(&sample(), &mut buf).unwrap();
        assert!(read_binary(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_binary(&buf[..]).is_err());
    }

    #[test]
    fn csv_roundtrip_and_override() {
        let mut buf = Vec::new();
        write_csv(&sample(), &mut buf).unwrap();
        assert_eq!(read_csv(&buf[..], None).unwrap(), sample());
        let text = "y1\n1.0\n2.0\n3.0\n";
        let obs = read_csv(text.as_bytes(), Some(0.5)).unwrap();
        assert_eq!(obs.n(), 2);
        assert_eq!(obs.h(), 0.5);
        assert!(read_csv(text.as_bytes(), None).is_err());
    }
}
