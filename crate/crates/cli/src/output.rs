//! Output files. Every file is written to a temporary sibling and renamed
//! into place, and every CSV starts with a `#` provenance line carrying the
//! configuration hash and seed.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

/// `# tweedie-dglm config_hash=<hex> seed=<n>`
pub fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# tweedie-dglm config_hash={hash} seed={seed}")
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Builds a CSV document: provenance line, header, rows.
pub fn csv_document(hash: &str, seed: u64, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut buf = provenance_line(hash, seed).into_bytes();
    buf.push(b'\n');
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

/// Reads a CSV written by [`csv_document`] (or any CSV with `#` comments)
/// into its header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = rdr.headers()?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    Ok((header, rows))
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    x.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn csv_round_trip_skips_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec!["1".to_string(), num(0.1 + 0.2)]];
        atomic_write(&p, &csv_document("ff", 9, &["a", "b"], &rows).unwrap()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# tweedie-dglm config_hash=ff seed=9\n"));
        let (h, r) = read_csv(&p).unwrap();
        assert_eq!(h, ["a", "b"]);
        assert_eq!(r[0][1].parse::<f64>().unwrap(), 0.1 + 0.2);
    }
}
