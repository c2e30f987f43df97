use std::fs;
use std::path::{Path, PathBuf};

use dejavu_core::format::fingerprint;
use serde_json::{json, Map, Value};

use crate::CliResult;

/// Hash of the command line and the bytes of every input file.
pub struct InputsHash {
    buf: Vec<u8>,
}

impl InputsHash {
    pub fn new(command: &str, args: &impl std::fmt::Debug) -> Self {
        InputsHash {
            buf: format!("{command}\n{args:?}\n").into_bytes(),
        }
    }

    pub fn add(&mut self, bytes: &[u8]) {
        self.buf
            .extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(bytes);
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", fingerprint(&self.buf))
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn write_csv(
    path: &Path,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> CliResult<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    write_text(path, &s)
}

/// Writes `{command, inputs_hash, seed, metrics}` to `path`.
pub fn write_summary(
    path: &Path,
    command: &str,
    hash: &InputsHash,
    seed: u64,
    metrics: Map<String, Value>,
) -> CliResult<()> {
    let v = json!({
        "command": command,
        "inputs_hash": hash.hex(),
        "seed": seed,
        "metrics": Value::Object(metrics),
    });
    let text = serde_json::to_string_pretty(&v).expect("json values serialize");
    write_text(path, &(text + "\n"))
}

pub fn summary_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(format!("{command}.json"))
}
