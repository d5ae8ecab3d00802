//! Line-delimited JSON containers: one header object, then one object per line.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

pub fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads a header followed by body lines. Blank lines are rejected so a
/// truncated or spliced file reports the first bad line.
pub fn read_lines<R, H, T>(input: R) -> Result<(H, Vec<T>)>
where
    R: BufRead,
    H: DeserializeOwned,
    T: DeserializeOwned,
{
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::format(1, "empty file: missing header line"))?;
    let first = first?;
    check_version(&first, 1)?;
    let header: H = serde_json::from_str(&first).map_err(|e| Error::format(1, format!("bad header: {e}")))?;
    let mut body = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            return Err(Error::format(n, "blank line"));
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::format(n, e.to_string()))?;
        body.push(item);
    }
    Ok((header, body))
}

/// Checks `format_version` on a header line before full parsing so a version
/// mismatch is reported as such rather than as a schema error.
pub fn check_version(line: &str, line_no: usize) -> Result<()> {
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::format(line_no, format!("bad header: {e}")))?;
    match v.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(FORMAT_VERSION) => Ok(()),
        Some(found) => Err(Error::FormatVersion { found, expected: FORMAT_VERSION }),
        None => Err(Error::format(line_no, "header has no integer `format_version`")),
    }
}
