//! Line-delimited record files with a versioned header line.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
}

pub fn write_header<W: Write>(out: &mut W, format: &str, version: u32) -> Result<()> {
    let header = Header { format: format.to_string(), version };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Parse and validate the header line.
pub fn read_header<R: BufRead>(input: &mut R, format: &str, version: u32, what: &'static str) -> Result<()> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(Error::Corrupt { what, reason: "missing header line".into() });
    }
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Corrupt { what, reason: format!("bad header: {e}") })?;
    if header.format != format {
        return Err(Error::Corrupt { what, reason: format!("expected format `{format}`, found `{}`", header.format) });
    }
    if header.version != version {
        return Err(Error::Version { what, expected: version, found: header.version });
    }
    Ok(())
}

/// Read a whole record file. A final line without its newline is treated as
/// truncation, so a partially written file never yields a partial result.
pub fn read_records<T: DeserializeOwned, R: BufRead>(
    mut input: R,
    format: &str,
    version: u32,
    what: &'static str,
) -> Result<Vec<T>> {
    read_header(&mut input, format, version, what)?;
    let mut out = Vec::new();
    let mut line = String::new();
    let mut lineno = 1;
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            return Err(Error::Corrupt { what, reason: format!("line {lineno} is truncated") });
        }
        let record = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Corrupt { what, reason: format!("line {lineno}: {e}") })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records<T: Serialize, W: Write>(mut out: W, format: &str, version: u32, records: &[T]) -> Result<()> {
    write_header(&mut out, format, version)?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
