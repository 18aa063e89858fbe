//! FPTE tensor files: the on-disk interchange format for embedded sets,
//! artifact matrices, and model parameters.
//!
//! Layout, little-endian throughout:
//!
//! | offset | field   | value                     |
//! |--------|---------|---------------------------|
//! | 0      | magic   | `"FPTE"`                  |
//! | 4      | version | u32, currently 1          |
//! | 8      | dtype   | u32, 1 = binary32         |
//! | 12     | rows    | u64                       |
//! | 20     | dim     | u64                       |
//! | 28     | payload | rows * dim * 4 bytes, row-major |
//!
//! Every tensor travels with a sidecar JSON manifest (`<file>.json`)
//! recording the space tag, source label, shape, and the SHA-256 of the
//! payload bytes. Readers verify all of it; a tensor whose manifest
//! disagrees with its bytes is rejected, not repaired.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingSet, SpaceTag};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

pub const MAGIC: [u8; 4] = *b"FPTE";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 28;

/// Sidecar manifest for one tensor file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorManifest {
    pub space_tag: SpaceTag,
    pub source_label: String,
    pub rows: u64,
    pub dim: u64,
    pub sha256: String,
    /// Set when rows are flattened C*H*W images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// `<file>` -> `<file>.json`.
pub fn manifest_path(tensor_path: &Path) -> PathBuf {
    let mut name = tensor_path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

fn encode(m: &FeatureMatrix) -> Result<Vec<u8>> {
    if let Some((row, col)) = m.first_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes the tensor file alone (no manifest) and returns the payload
/// checksum.
pub fn write_matrix(path: &Path, m: &FeatureMatrix) -> Result<String> {
    let bytes = encode(m)?;
    let checksum = sha256_hex(&bytes[HEADER_LEN..]);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checksum)
}

/// Reads and fully validates a tensor file: magic, version, dtype, exact
/// payload length, finiteness.
pub fn read_matrix(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected_bytes: HEADER_LEN as u64,
            found_bytes: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version });
    }
    let dtype = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype { found: dtype });
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let count = rows.checked_mul(dim).ok_or_else(|| Error::ManifestMismatch {
        detail: format!("shape {rows}x{dim} overflows"),
    })?;
    let expected = count.checked_mul(4).ok_or_else(|| Error::ManifestMismatch {
        detail: format!("shape {rows}x{dim} overflows"),
    })?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(Error::TruncatedPayload {
            expected_bytes: expected,
            found_bytes: found,
        });
    }
    if found > expected {
        return Err(Error::TrailingBytes {
            extra_bytes: found - expected,
        });
    }
    let mut data = Vec::with_capacity(count as usize);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let m = FeatureMatrix::new(rows as usize, dim as usize, data)?;
    if let Some((row, col)) = m.first_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    Ok(m)
}

/// Writes tensor plus sidecar manifest.
pub fn save_set(path: &Path, set: &EmbeddingSet) -> Result<TensorManifest> {
    save_set_with_geometry(path, set, None)
}

/// Same as [`save_set`], recording image geometry when rows are flattened
/// C*H*W planes.
pub fn save_set_with_geometry(
    path: &Path,
    set: &EmbeddingSet,
    geometry: Option<(u32, u32, u32)>,
) -> Result<TensorManifest> {
    let checksum = write_matrix(path, set.points())?;
    let manifest = TensorManifest {
        space_tag: set.space_tag(),
        source_label: set.source_label().to_string(),
        rows: set.len() as u64,
        dim: set.dim() as u64,
        sha256: checksum,
        channels: geometry.map(|g| g.0),
        height: geometry.map(|g| g.1),
        width: geometry.map(|g| g.2),
    };
    write_manifest(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &TensorManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, json.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<TensorManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads tensor plus manifest, verifying shape and checksum agreement.
pub fn load_set(path: &Path) -> Result<EmbeddingSet> {
    let manifest = read_manifest(&manifest_path(path))?;
    load_set_against(path, &manifest)
}

pub fn load_set_against(path: &Path, manifest: &TensorManifest) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = decode(&bytes)?;
    if m.rows() as u64 != manifest.rows || m.dim() as u64 != manifest.dim {
        return Err(Error::ManifestMismatch {
            detail: format!(
                "manifest says {}x{}, tensor is {}x{}",
                manifest.rows,
                manifest.dim,
                m.rows(),
                m.dim()
            ),
        });
    }
    let found = sha256_hex(&bytes[HEADER_LEN..]);
    if found != manifest.sha256 {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
            expected: manifest.sha256.clone(),
            found,
        });
    }
    EmbeddingSet::new(manifest.space_tag, manifest.source_label.clone(), m)
}
