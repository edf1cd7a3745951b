//! Database file: magic `LRETDBv1`, u32 format version, u64 header length,
//! JSON header (settings and per-entry metadata), the embedding payload as
//! little-endian f64 in entry, patch, scale order, and a CRC32 trailer over
//! everything before it. See `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatabaseEntry, ExtractConfig, SearchDatabase};
use crate::data::ScaleSet;
use crate::{Error, Result};

pub const DATABASE_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LRETDBv1";
const PREFIX_LEN: usize = 20;

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    scales: ScaleSet,
    embed_dim: usize,
    extract: ExtractConfig,
    k: usize,
    l: usize,
    grid_cols: u32,
    entries: Vec<DatabaseEntry>,
}

pub fn database_to_bytes(db: &SearchDatabase) -> Result<Vec<u8>> {
    let n_scales = db.scales.scales().len();
    let header = Header {
        fingerprint: db.fingerprint.clone(),
        scales: db.scales,
        embed_dim: db.embed_dim,
        extract: db.extract,
        k: db.k,
        l: db.l,
        grid_cols: db.grid_cols,
        entries: db.entries.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut buf = Vec::with_capacity(PREFIX_LEN + json.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DATABASE_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in &db.entries {
        for p in &e.patches {
            if p.embeddings.len() != n_scales || p.embeddings.iter().any(|z| z.len() != db.embed_dim) {
                return Err(Error::Shape(format!("entry {} has inconsistent embeddings", e.case_id)));
            }
            for v in p.embeddings.iter().flatten() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn database_from_bytes(buf: &[u8]) -> Result<SearchDatabase> {
    if buf.len() < MAGIC.len() || &buf[..8] != MAGIC {
        return Err(Error::BadMagic("database".into()));
    }
    if buf.len() < PREFIX_LEN + 4 {
        return Err(Error::Truncated("database header".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != DATABASE_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATABASE_FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes"));
    let body_end = buf.len() - 4;
    if header_len > (body_end - PREFIX_LEN) as u64 {
        return Err(Error::Truncated(format!("database header declares {header_len} bytes")));
    }
    let stored = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&buf[..body_end]) != stored {
        return Err(Error::Checksum("database".into()));
    }
    let json_end = PREFIX_LEN + header_len as usize;
    let header: Header =
        serde_json::from_slice(&buf[PREFIX_LEN..json_end]).map_err(|e| Error::Malformed(format!("database header: {e}")))?;
    let n_scales = header.scales.scales().len();
    let per_patch = n_scales * header.embed_dim;
    let n_patches: usize = header.entries.iter().map(|e| e.patches.len()).sum();
    let payload = &buf[json_end..body_end];
    if payload.len() != n_patches * per_patch * 8 {
        return Err(Error::Malformed(format!(
            "database payload holds {} bytes, header implies {}",
            payload.len(),
            n_patches * per_patch * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut entries = header.entries;
    for e in &mut entries {
        for p in &mut e.patches {
            p.embeddings = (0..n_scales)
                .map(|_| values.by_ref().take(header.embed_dim).collect())
                .collect();
        }
    }
    Ok(SearchDatabase {
        fingerprint: header.fingerprint,
        scales: header.scales,
        embed_dim: header.embed_dim,
        extract: header.extract,
        k: header.k,
        l: header.l,
        grid_cols: header.grid_cols,
        entries,
    })
}

pub fn save_database(db: &SearchDatabase, path: &Path) -> Result<()> {
    let bytes = database_to_bytes(db)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_database(path: &Path) -> Result<SearchDatabase> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    database_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IhcPattern, Subtype};
    use crate::retrieval::{Heatmap, StoredPatch};

    fn sample() -> SearchDatabase {
        let entry = |id: &str, off: f64| DatabaseEntry {
            case_id: id.into(),
            subtype: Subtype::new(1, 3).unwrap(),
            ihc: Some(IhcPattern::from_indices(5, &[0, 3])),
            patches: (0..3)
                .map(|i| StoredPatch {
                    patch_id: i,
                    position: 10 + i,
                    attention: 0.1 * f64::from(i) + 1e-17,
                    embeddings: vec![vec![off + f64::from(i), -0.3], vec![1.0 / 3.0, off]],
                })
                .collect(),
            heatmap: Heatmap::from_weights(&[0, 1, 3], &[0.1, 0.4, 0.2], 2),
        };
        SearchDatabase {
            fingerprint: "0123456789abcdef".into(),
            scales: ScaleSet::Hl,
            embed_dim: 2,
            extract: ExtractConfig::default(),
            k: 3,
            l: 5,
            grid_cols: 2,
            entries: vec![entry("a", 0.5), entry("b", -2.25)],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let db = sample();
        let bytes = database_to_bytes(&db).unwrap();
        assert_eq!(database_from_bytes(&bytes).unwrap(), db);
        assert_eq!(database_to_bytes(&database_from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = database_to_bytes(&sample()).unwrap();
        let mut b = bytes.clone();
        b[0] ^= 1;
        assert!(matches!(database_from_bytes(&b), Err(Error::BadMagic(_))));
        let mut b = bytes.clone();
        b[8] = 7;
        assert!(matches!(database_from_bytes(&b), Err(Error::Version { found: 7, .. })));
        let mut b = bytes.clone();
        let n = b.len();
        b[n - 20] ^= 0x40;
        assert!(matches!(database_from_bytes(&b), Err(Error::Checksum(_))));
        assert!(database_from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(matches!(database_from_bytes(&bytes[..12]), Err(Error::Truncated(_))));
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(database_from_bytes(&b).is_err(), "flip at {i} went unnoticed");
        }
    }
}
