//! `encode` and `decode`: key files to snapshots and back.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use tabtreap::fid::Fid;
use tabtreap::Config;

use crate::report::Report;

#[derive(Args)]
pub struct EncodeArgs {
    /// Key file, one decimal key per line; `-` reads stdin.
    #[arg(long)]
    pub keys: PathBuf,
    /// Snapshot output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Snapshot written by `encode`.
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Key output path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn read_keys(path: &Path) -> Result<Vec<u64>> {
    let reader: Box<dyn Read> = if path.as_os_str() == "-" {
        Box::new(std::io::stdin())
    } else {
        Box::new(std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?)
    };
    let mut keys = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        keys.push(t.parse().with_context(|| format!("line {}: '{t}' is not a key", i + 1))?);
    }
    Ok(keys)
}

pub fn encode(cfg: &Config, args: &EncodeArgs) -> Result<Report> {
    let mut keys = read_keys(&args.keys)?;
    keys.sort_unstable();
    let before = keys.len();
    keys.dedup();
    let fid = Fid::from_sorted(cfg, &keys)?;
    let bytes = fid.snapshot();
    std::fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let mut r = Report::new("encode", cfg);
    r.put("keys_read", before);
    r.put("n", keys.len());
    r.put("snapshot_bytes", bytes.len());
    r.absorb("space", &fid.space_report()?.to_kv());
    Ok(r)
}

pub fn decode(cfg: &Config, args: &DecodeArgs) -> Result<Report> {
    let bytes = std::fs::read(&args.snapshot).with_context(|| format!("reading {}", args.snapshot.display()))?;
    let fid = Fid::load(cfg, &bytes)?;
    let keys = fid.keys()?;
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    for k in &keys {
        writeln!(out, "{k}")?;
    }
    out.flush()?;
    let mut r = Report::new("decode", cfg);
    r.put("n", keys.len());
    r.put("blocks", fid.block_count());
    r.check("canonical", fid.check_invariants(true).is_ok());
    Ok(r)
}
