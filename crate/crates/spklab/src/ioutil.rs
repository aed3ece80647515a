//! Atomic file writes.
//!
//! Every artifact the pipeline produces is written to a temporary file in
//! the destination directory and renamed into place, so a crash mid-write
//! never leaves a truncated artifact behind and reruns either see the old
//! complete file or the new complete file.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

/// Write `path` atomically: `fill` receives a buffered writer to a temp file
/// in the same directory; on success the temp file is persisted over `path`.
pub(crate) fn write_atomic<F>(path: &Path, fill: F) -> io::Result<()>
where
    F: FnOnce(&mut BufWriter<&mut fs::File>) -> io::Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    {
        let mut writer = BufWriter::new(tmp.as_file_mut());
        fill(&mut writer)?;
        writer.flush()?;
    }
    tmp.as_file_mut().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
