//! Deterministic number formatting and atomic file output for reports.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// Formats a float with six significant digits in scientific notation, the
/// fixed width every text report uses so regenerated reports stay
/// byte-stable.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        // Covers -0.0 too; reports never distinguish signed zero.
        return "0.00000e0".to_string();
    }
    format!("{:.5e}", x)
}

/// Writes `contents` to `path` atomically: a temp file in the same
/// directory is renamed over the target, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
    }
    fs::rename(&tmp, path)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = OsString::from(path.as_os_str());
    name.push(".tmp");
    PathBuf::from(name)
}
