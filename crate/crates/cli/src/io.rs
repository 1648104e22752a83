//! Result files: the columnar `ESCL1` path dump, CSV tables and JSON
//! payloads, each carrying the manifest hash and seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ergolab_core::state_sim::{PathEnsemble, TimeGrid};
use serde::Serialize;

use crate::error::CliError;

pub const MAGIC: &[u8; 5] = b"ESCL1";

/// Block flags of the columnar layout.
pub const BLOCK_STATES: u64 = 1;
pub const BLOCK_CONTROLS: u64 = 2;
pub const BLOCK_CHANNEL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance<'a> {
    pub manifest_sha256: &'a str,
    pub seed: u64,
}

/// Header: magic, then little-endian `u64` n_paths, n_steps, n_modes, seed,
/// m_controls and block flags, then the 32-byte manifest hash. Blocks follow
/// in flag order as little-endian `f64`, path-major: states
/// `[path][node][mode]`, controls `[path][step][control]`, channel
/// `[path][node][control]`.
pub fn write_escl(path: &Path, ens: &PathEnsemble, channel: Option<&[f64]>, prov: Provenance<'_>) -> Result<(), CliError> {
    let mut buf = Vec::with_capacity(8 * (ens.states.len() + ens.controls.len()) + 128);
    buf.extend_from_slice(MAGIC);
    let flags = BLOCK_STATES | BLOCK_CONTROLS | if channel.is_some() { BLOCK_CHANNEL } else { 0 };
    for v in [ens.n_paths as u64, ens.grid.n_steps as u64, ens.n_modes as u64, prov.seed, ens.m_controls as u64, flags] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let hash = hex::decode(prov.manifest_sha256).map_err(|e| CliError::Format(format!("manifest hash: {e}")))?;
    if hash.len() != 32 {
        return Err(CliError::Format("manifest hash must be 32 bytes".into()));
    }
    buf.extend_from_slice(&hash);
    for block in [Some(&ens.states[..]), Some(&ens.controls[..]), channel].into_iter().flatten() {
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsclFile {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_modes: usize,
    pub m_controls: usize,
    pub seed: u64,
    pub manifest_sha256: String,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    pub channel: Option<Vec<f64>>,
}

pub fn read_escl(path: &Path) -> Result<EsclFile, CliError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| CliError::io(path, e))?;
    let fail = |m: &str| CliError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 5 + 48 + 32 || &bytes[..5] != MAGIC {
        return Err(fail("not an ESCL1 file"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[5 + 8 * i..13 + 8 * i].try_into().unwrap());
    let (n_paths, n_steps, n_modes, seed, m, flags) =
        (word(0) as usize, word(1) as usize, word(2) as usize, word(3), word(4) as usize, word(5));
    let manifest_sha256 = hex::encode(&bytes[53..85]);
    let mut off = 85;
    let mut take = |count: usize| -> Result<Vec<f64>, CliError> {
        let end = off + 8 * count;
        if end > bytes.len() {
            return Err(fail("truncated body"));
        }
        let out = bytes[off..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        off = end;
        Ok(out)
    };
    let states = if flags & BLOCK_STATES != 0 { take(n_paths * (n_steps + 1) * n_modes)? } else { Vec::new() };
    let controls = if flags & BLOCK_CONTROLS != 0 { take(n_paths * n_steps * m)? } else { Vec::new() };
    let channel = if flags & BLOCK_CHANNEL != 0 { Some(take(n_paths * (n_steps + 1) * m)?) } else { None };
    if off != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok(EsclFile { n_paths, n_steps, n_modes, m_controls: m, seed, manifest_sha256, states, controls, channel })
}

/// Per-node CSV dump of an ensemble: `path, t, x_1.., u_1..` (controls are
/// blank on the last node).
pub fn ensemble_csv(ens: &PathEnsemble) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((1..=ens.n_modes).map(|k| format!("x{k}")));
    header.extend((1..=ens.m_controls).map(|k| format!("u{k}")));
    let grid: &TimeGrid = &ens.grid;
    let mut rows = Vec::new();
    for p in 0..ens.n_paths {
        for node in 0..=grid.n_steps {
            let mut row = vec![p.to_string(), fmt(grid.node(node))];
            row.extend(ens.state(p, node).iter().map(|v| fmt(*v)));
            if node < grid.n_steps {
                row.extend(ens.control(p, node).iter().map(|v| fmt(*v)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), ens.m_controls));
            }
            rows.push(row);
        }
    }
    (header, rows)
}

/// Shortest round-trip decimal form.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>], prov: Provenance<'_>) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&format!("# manifest_sha256={} seed={}\n", prov.manifest_sha256, prov.seed));
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn f64_rows(rows: impl IntoIterator<Item = Vec<f64>>) -> Vec<Vec<String>> {
    rows.into_iter().map(|r| r.into_iter().map(fmt).collect()).collect()
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[derive(Serialize)]
struct WithProvenance<'a, T: Serialize> {
    provenance: ProvenanceDoc<'a>,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct ProvenanceDoc<'a> {
    manifest_sha256: &'a str,
    model_sha256: Option<&'a str>,
    seed: u64,
}

pub fn write_json<T: Serialize>(path: &Path, body: &T, prov: Provenance<'_>, model_sha256: Option<&str>) -> Result<(), CliError> {
    let doc = WithProvenance {
        provenance: ProvenanceDoc { manifest_sha256: prov.manifest_sha256, model_sha256, seed: prov.seed },
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Format(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ergolab_core::model::build_desk_model;
    use ergolab_core::state_sim::{simulate_state, ControlPolicy};

    #[test]
    fn escl_round_trip() {
        let m = build_desk_model(0.1).unwrap();
        let grid = TimeGrid::with_step(0.5, 0.1).unwrap();
        let ens = simulate_state(&m, &[0.3], &ControlPolicy::constant(vec![0.2]), &grid, 3, 9).unwrap();
        let dir = std::env::temp_dir().join(format!("ergolab-escl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("e.escl");
        let hash = "ab".repeat(32);
        write_escl(&path, &ens, None, Provenance { manifest_sha256: &hash, seed: 9 }).unwrap();
        let back = read_escl(&path).unwrap();
        assert_eq!((back.n_paths, back.n_steps, back.n_modes, back.m_controls, back.seed), (3, 5, 1, 1, 9));
        assert_eq!(back.states, ens.states);
        assert_eq!(back.controls, ens.controls);
        assert_eq!(back.manifest_sha256, hash);
        assert!(back.channel.is_none());
        std::fs::write(&path, b"ESCL0").unwrap();
        assert!(read_escl(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
