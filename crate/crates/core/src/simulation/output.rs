//! Record CSV and JSON manifest.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EstimatorSummary, RecordRow, SimConfig, SimOutput, Skipped, SlopeSummary};
use crate::Result;

pub const SCHEMA_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HEADER: [&str; 9] = ["sample_id", "k", "estimator", "assignment", "estimate", "p", "M", "bin", "selected_p"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub generator: String,
    pub config: SimConfig,
    pub records: String,
    pub record_count: u64,
    /// `sha256:` followed by the hex digest of the records file hashed as a
    /// git blob (`"blob <len>\0"` + contents).
    pub content_hash: String,
    pub summaries: Vec<EstimatorSummary>,
    pub skipped: Vec<Skipped>,
    pub slopes: Vec<SlopeSummary>,
}

pub fn write_records<W: Write>(rows: &[RecordRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Git-style content hash of a byte stream of known length.
pub fn blob_hash<R: Read>(mut reader: R, len: u64) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format!("blob {len}\0").as_bytes());
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let got = reader.read(&mut buf)?;
        if got == 0 {
            break;
        }
        h.update(&buf[..got]);
    }
    Ok(format!("sha256:{:x}", h.finalize()))
}

pub fn blob_hash_bytes(bytes: &[u8]) -> String {
    blob_hash(bytes, bytes.len() as u64).expect("in-memory read")
}

pub struct WrittenFiles {
    pub records: PathBuf,
    pub manifest: PathBuf,
    pub manifest_data: Manifest,
}

/// Writes `records.csv` and `manifest.json` into `dir`, creating it if needed.
pub fn write_outputs(output: &SimOutput, dir: &Path) -> Result<WrittenFiles> {
    std::fs::create_dir_all(dir)?;
    let records = dir.join(RECORDS_FILE);
    {
        let f = BufWriter::new(File::create(&records)?);
        write_records(&output.rows, f)?;
    }
    let len = std::fs::metadata(&records)?.len();
    let content_hash = blob_hash(File::open(&records)?, len)?;
    let manifest_data = Manifest {
        schema_version: SCHEMA_VERSION,
        generator: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config: output.config.clone(),
        records: RECORDS_FILE.to_string(),
        record_count: output.rows.len() as u64,
        content_hash,
        summaries: output.summaries.clone(),
        skipped: output.skipped.clone(),
        slopes: output.slopes.clone(),
    };
    let manifest = dir.join(MANIFEST_FILE);
    let mut f = BufWriter::new(File::create(&manifest)?);
    serde_json::to_writer_pretty(&mut f, &manifest_data)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(WrittenFiles {
        records,
        manifest,
        manifest_data,
    })
}
