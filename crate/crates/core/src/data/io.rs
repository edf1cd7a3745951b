//! Dataset files: a JSON manifest plus a binary feature blob.
//!
//! `features.bin` starts with a 20-byte header (magic `LRETDSv1`, u32 format
//! version, u64 payload length), followed by one block per case. A block
//! holds, for every patch in manifest order and every scale in `scale_order`,
//! `feature_dim` little-endian f64 values. The manifest records each block's
//! payload offset, byte length and CRC32. See `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Case, Dataset, IhcPattern, Patch, Provenance, Scale, ScaleSet, Subtype};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";
const BLOB_MAGIC: &[u8; 8] = b"LRETDSv1";
const BLOB_HEADER_LEN: usize = 20;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    k: usize,
    l: usize,
    feature_dim: usize,
    scales: ScaleSet,
    scale_order: Vec<Scale>,
    grid_cols: u32,
    provenance: Provenance,
    blob_file: String,
    blob_payload_len: u64,
    cases: Vec<CaseRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseRecord {
    case_id: String,
    subtype: usize,
    ihc: Option<IhcPattern>,
    split_tag: Option<String>,
    patch_ids: Vec<u32>,
    positions: Vec<u32>,
    tumor: Vec<Option<bool>>,
    offset: u64,
    length: u64,
    crc32: u32,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let scales = ds.scales.scales();
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(ds.cases.len());
    for c in &ds.cases {
        let start = payload.len();
        for p in &c.patches {
            for &s in scales {
                for v in p.features(s)? {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let block = &payload[start..];
        records.push(CaseRecord {
            case_id: c.case_id.clone(),
            subtype: c.subtype.class,
            ihc: c.ihc.clone(),
            split_tag: c.split_tag.clone(),
            patch_ids: c.patches.iter().map(|p| p.patch_id).collect(),
            positions: c.patches.iter().map(|p| p.position).collect(),
            tumor: c.patches.iter().map(|p| p.tumor).collect(),
            offset: start as u64,
            length: block.len() as u64,
            crc32: crc32fast::hash(block),
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        k: ds.k,
        l: ds.l,
        feature_dim: ds.feature_dim,
        scales: ds.scales,
        scale_order: scales.to_vec(),
        grid_cols: ds.grid_cols,
        provenance: ds.provenance.clone(),
        blob_file: FEATURES_FILE.into(),
        blob_payload_len: payload.len() as u64,
        cases: records,
    };
    let mut blob = Vec::with_capacity(BLOB_HEADER_LEN + payload.len());
    blob.extend_from_slice(BLOB_MAGIC);
    blob.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    blob.extend_from_slice(&payload);

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(FEATURES_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

/// Checks the blob header and returns the payload slice.
fn blob_payload(blob: &[u8], expected_len: u64) -> Result<&[u8]> {
    if blob.len() < BLOB_MAGIC.len() || &blob[..8] != BLOB_MAGIC {
        return Err(Error::BadMagic(FEATURES_FILE.into()));
    }
    if blob.len() < BLOB_HEADER_LEN {
        return Err(Error::Truncated(format!("{FEATURES_FILE} header")));
    }
    let version = u32::from_le_bytes(blob[8..12].try_into().expect("4 bytes"));
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let declared = u64::from_le_bytes(blob[12..20].try_into().expect("8 bytes"));
    let actual = (blob.len() - BLOB_HEADER_LEN) as u64;
    if declared != actual || declared != expected_len {
        return Err(Error::Truncated(format!(
            "{FEATURES_FILE}: header declares {declared} payload bytes, file holds {actual}, manifest expects {expected_len}"
        )));
    }
    Ok(&blob[BLOB_HEADER_LEN..])
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::Malformed(format!("{}: {e}", mpath.display())))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let m: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::Malformed(format!("{}: {e}", mpath.display())))?;
    if m.scale_order != m.scales.scales() {
        return Err(Error::Malformed("scale order does not match scale set".into()));
    }
    let bpath = dir.join(&m.blob_file);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let payload = blob_payload(&blob, m.blob_payload_len)?;

    let per_patch = m.scale_order.len() * m.feature_dim * 8;
    let mut cases = Vec::with_capacity(m.cases.len());
    for r in m.cases {
        let n = r.patch_ids.len();
        if r.positions.len() != n || r.tumor.len() != n {
            return Err(Error::Malformed(format!("case {} patch columns differ in length", r.case_id)));
        }
        if r.length != (n * per_patch) as u64 {
            return Err(Error::Malformed(format!("case {} block length", r.case_id)));
        }
        let start = usize::try_from(r.offset).map_err(|_| Error::Truncated(r.case_id.clone()))?;
        let end = start
            .checked_add(r.length as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Truncated(format!("case {} block beyond payload", r.case_id)))?;
        let block = &payload[start..end];
        if crc32fast::hash(block) != r.crc32 {
            return Err(Error::Checksum(format!("case {}", r.case_id)));
        }
        let mut values = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut patches = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = Patch::new(r.patch_ids[i], r.positions[i], r.tumor[i]);
            for &s in &m.scale_order {
                p.set_features(s, values.by_ref().take(m.feature_dim).collect());
            }
            patches.push(p);
        }
        cases.push(Case {
            case_id: r.case_id,
            subtype: Subtype::new(r.subtype, m.k)?,
            ihc: r.ihc,
            patches,
            split_tag: r.split_tag,
        });
    }
    let ds = Dataset {
        k: m.k,
        l: m.l,
        feature_dim: m.feature_dim,
        scales: m.scales,
        grid_cols: m.grid_cols,
        provenance: m.provenance,
        cases,
    };
    ds.validate()?;
    Ok(ds)
}
