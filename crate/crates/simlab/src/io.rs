//! Output helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SimError};

/// Write `bytes` to `path` through a temporary file in the same directory and
/// an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| SimError::config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| SimError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| SimError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SimError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| SimError::io(path, e))
}

/// Serialize records with a header into CSV bytes.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| SimError::config(format!("csv buffer: {e}")))
}

/// Shortest round-trip formatting, empty for `None`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
