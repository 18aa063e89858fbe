//! Exact nearest-neighbor projection against the reference set.
//!
//! The estimated manifold is the reference embedding set itself, so a
//! projection is an exact argmin over squared Euclidean distance. The
//! scan expands ||q - x||^2 = ||q||^2 - 2 q.x + ||x||^2 with reference
//! norms precomputed once, walks the rows in fixed-size blocks, and
//! accumulates every dot product in f64. Ties break toward the smaller
//! row id. Approximate search is deliberately absent: residuals feed
//! downstream statistics, and a wrong neighbor silently corrupts them.
//!
//! Batch queries fan out across threads, one query per task, and results
//! are assembled in query order, so output is bit-identical whatever the
//! thread count.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, SpaceTag};
use crate::error::{Error, Result};
use crate::fpte;
use crate::matrix::FeatureMatrix;

pub const DEFAULT_BLOCK_SIZE: usize = 4096;

/// One projection result: the reference row holding the nearest point and
/// the squared distance to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub neighbor_id: u64,
    pub distance_sq: f32,
}

#[derive(Debug, Clone)]
pub struct ManifoldIndex {
    reference: EmbeddingSet,
    norms: Vec<f64>,
    block_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    metric: String,
    block_size: usize,
    rows: u64,
    dim: u64,
    norms_sha256: String,
}

const INDEX_HEADER_FILE: &str = "index.json";
const REFERENCE_FILE: &str = "reference.fpte";

fn squared_norms(points: &FeatureMatrix) -> Vec<f64> {
    points
        .iter_rows()
        .map(|row| row.iter().map(|&v| (v as f64) * (v as f64)).sum())
        .collect()
}

fn norms_checksum(norms: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(norms.len() * 8);
    for n in norms {
        bytes.extend_from_slice(&n.to_le_bytes());
    }
    fpte::sha256_hex(&bytes)
}

impl ManifoldIndex {
    /// Builds the index over a non-empty reference set. `block_size`
    /// defaults to 4096 rows per scan block.
    pub fn build(reference: EmbeddingSet, block_size: Option<usize>) -> Result<Self> {
        let block_size = block_size.unwrap_or(DEFAULT_BLOCK_SIZE);
        if block_size == 0 {
            return Err(Error::InvalidConfig("block size must be positive".into()));
        }
        let norms = squared_norms(reference.points());
        Ok(Self {
            reference,
            norms,
            block_size,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.reference.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.reference.dim()
    }

    #[inline]
    pub fn space_tag(&self) -> SpaceTag {
        self.reference.space_tag()
    }

    pub fn reference(&self) -> &EmbeddingSet {
        &self.reference
    }

    /// Stable identifier for audit trails: space, label, shape, and a
    /// short digest of the reference norms.
    pub fn identifier(&self) -> String {
        let digest = norms_checksum(&self.norms);
        format!(
            "{}:{}:{}x{}:{}",
            self.space_tag(),
            self.reference.source_label(),
            self.len(),
            self.dim(),
            &digest[..12]
        )
    }

    /// Reference row by id.
    #[inline]
    pub fn point(&self, id: u64) -> &[f32] {
        self.reference.points().row(id as usize)
    }

    /// Exact nearest neighbor of one query.
    pub fn nearest(&self, query: &[f32]) -> Result<Projection> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        if let Some(col) = query.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        Ok(self.scan(query))
    }

    fn scan(&self, query: &[f32]) -> Projection {
        let dim = self.dim();
        let query_norm: f64 = query.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let points = self.reference.points();

        let mut best_id = 0usize;
        let mut best_d = f64::INFINITY;
        let rows = points.rows();
        let mut block_start = 0usize;
        while block_start < rows {
            let block_end = (block_start + self.block_size).min(rows);
            for i in block_start..block_end {
                let row = points.row(i);
                let mut dot = 0.0f64;
                for j in 0..dim {
                    dot += query[j] as f64 * row[j] as f64;
                }
                let d = (query_norm - 2.0 * dot + self.norms[i]).max(0.0);
                if d < best_d {
                    best_d = d;
                    best_id = i;
                }
            }
            block_start = block_end;
        }
        Projection {
            neighbor_id: best_id as u64,
            distance_sq: best_d as f32,
        }
    }

    /// Projects every row of `queries`. Output order equals input order.
    pub fn nearest_batch(&self, queries: &FeatureMatrix) -> Result<Vec<Projection>> {
        if queries.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: queries.dim(),
            });
        }
        if let Some((row, col)) = queries.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        Ok((0..queries.rows())
            .into_par_iter()
            .map(|i| self.scan(queries.row(i)))
            .collect())
    }

    // -------------------------------------------------------------------
    // Persistence
    // -------------------------------------------------------------------

    /// Writes `reference.fpte` (+ manifest) and `index.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fpte::save_set(&dir.join(REFERENCE_FILE), &self.reference)?;
        let header = IndexHeader {
            metric: "sqeuclidean".into(),
            block_size: self.block_size,
            rows: self.len() as u64,
            dim: self.dim() as u64,
            norms_sha256: norms_checksum(&self.norms),
        };
        let path = dir.join(INDEX_HEADER_FILE);
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads the reference set, recomputes the norms, and checks them
    /// against the stored checksum before serving any query.
    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join(INDEX_HEADER_FILE);
        let bytes = fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: IndexHeader =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: header_path.clone(),
                source,
            })?;
        if header.metric != "sqeuclidean" {
            return Err(Error::InvalidConfig(format!(
                "unsupported metric {:?}",
                header.metric
            )));
        }
        let reference = fpte::load_set(&dir.join(REFERENCE_FILE))?;
        if reference.len() as u64 != header.rows || reference.dim() as u64 != header.dim {
            return Err(Error::ManifestMismatch {
                detail: format!(
                    "index header says {}x{}, reference is {}x{}",
                    header.rows,
                    header.dim,
                    reference.len(),
                    reference.dim()
                ),
            });
        }
        let norms = squared_norms(reference.points());
        let found = norms_checksum(&norms);
        if found != header.norms_sha256 {
            return Err(Error::ChecksumMismatch {
                path: header_path,
                expected: header.norms_sha256,
                found,
            });
        }
        Ok(Self {
            reference,
            norms,
            block_size: header.block_size,
        })
    }
}
