//! Artifacts and fingerprints.
//!
//! An artifact is the residual a = x_G - x* between a generated sample and
//! its exact nearest reference point. The fingerprint of a source is the
//! set of artifacts over all its samples, kept in sample order. Two
//! scalars summarize a fingerprint: `d_fpt`, the largest artifact norm,
//! and `support_coverage`, the fraction of artifacts at or below a norm
//! threshold. Samples that sit exactly on reference points produce
//! exactly-zero artifact vectors, so those summaries hit 0 and 1 without
//! tolerance games.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, SpaceTag};
use crate::error::{Error, Result};
use crate::fpte::{self, TensorManifest};
use crate::index::ManifoldIndex;
use crate::matrix::FeatureMatrix;

/// Residual of one generated sample against the reference manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub query_id: u64,
    pub source_label: String,
    pub vector: Vec<f32>,
    /// Euclidean length of `vector`, accumulated in f64.
    pub norm: f32,
    pub neighbor_id: u64,
}

#[derive(Debug, Clone)]
pub struct Fingerprint {
    pub source_label: String,
    pub space_tag: SpaceTag,
    pub artifacts: Vec<Artifact>,
    /// Identifier of the index the artifacts were computed against.
    pub manifold_ref: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FingerprintManifest {
    source_label: String,
    space_tag: SpaceTag,
    manifold_ref: String,
    norm_min: f64,
    norm_mean: f64,
    norm_max: f64,
    d_fpt: f64,
    query_ids: Vec<u64>,
    neighbor_ids: Vec<u64>,
}

fn vector_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Residual of a single query against the index.
pub fn compute_artifact(
    index: &ManifoldIndex,
    x_g: &[f32],
    id: u64,
    label: &str,
) -> Result<Artifact> {
    let proj = index.nearest(x_g)?;
    let neighbor = index.point(proj.neighbor_id);
    let vector: Vec<f32> = x_g.iter().zip(neighbor).map(|(&q, &r)| q - r).collect();
    let norm = vector_norm(&vector) as f32;
    Ok(Artifact {
        query_id: id,
        source_label: label.to_string(),
        vector,
        norm,
        neighbor_id: proj.neighbor_id,
    })
}

/// One artifact per sample, in sample order. The sample set must live in
/// the same embedding space as the index.
pub fn compute_fingerprint(index: &ManifoldIndex, samples: &EmbeddingSet) -> Result<Fingerprint> {
    if samples.space_tag() != index.space_tag() {
        return Err(Error::InvalidConfig(format!(
            "samples are tagged {} but the index holds {} embeddings",
            samples.space_tag(),
            index.space_tag()
        )));
    }
    let projections = index.nearest_batch(samples.points())?;
    let artifacts = projections
        .iter()
        .enumerate()
        .map(|(i, proj)| {
            let q = samples.points().row(i);
            let neighbor = index.point(proj.neighbor_id);
            let vector: Vec<f32> = q.iter().zip(neighbor).map(|(&a, &b)| a - b).collect();
            let norm = vector_norm(&vector) as f32;
            Artifact {
                query_id: i as u64,
                source_label: samples.source_label().to_string(),
                vector,
                norm,
                neighbor_id: proj.neighbor_id,
            }
        })
        .collect();
    Ok(Fingerprint {
        source_label: samples.source_label().to_string(),
        space_tag: samples.space_tag(),
        artifacts,
        manifold_ref: index.identifier(),
    })
}

/// Largest artifact norm, the finite-sample deviation of the generator
/// support from the reference manifold.
pub fn d_fpt(fp: &Fingerprint) -> Result<f64> {
    if fp.artifacts.is_empty() {
        return Err(Error::EmptySet {
            what: "fingerprint",
        });
    }
    Ok(fp
        .artifacts
        .iter()
        .map(|a| vector_norm(&a.vector))
        .fold(0.0f64, f64::max))
}

/// Fraction of artifacts with norm at or below `eps`.
pub fn support_coverage(fp: &Fingerprint, eps: f64) -> f64 {
    if fp.artifacts.is_empty() {
        return 0.0;
    }
    let hits = fp
        .artifacts
        .iter()
        .filter(|a| vector_norm(&a.vector) <= eps)
        .count();
    hits as f64 / fp.artifacts.len() as f64
}

/// Artifact vectors stacked into a row-major matrix, plus the constant
/// label column, in sample order.
pub fn artifact_matrix(fp: &Fingerprint) -> Result<(FeatureMatrix, Vec<String>)> {
    if fp.artifacts.is_empty() {
        return Err(Error::EmptySet {
            what: "fingerprint",
        });
    }
    let rows: Vec<&[f32]> = fp.artifacts.iter().map(|a| a.vector.as_slice()).collect();
    let dim = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for row in &rows {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        data.extend_from_slice(row);
    }
    let matrix = FeatureMatrix::new(rows.len(), dim, data)?;
    let labels = vec![fp.source_label.clone(); rows.len()];
    Ok((matrix, labels))
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.artifacts.first().map_or(0, |a| a.vector.len())
    }

    /// Writes the artifact vectors as a tensor file (with its own sidecar)
    /// plus a fingerprint manifest next to it at `<path>.fp.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (matrix, _) = artifact_matrix(self)?;
        let checksum = fpte::write_matrix(path, &matrix)?;
        let tensor_manifest = TensorManifest {
            space_tag: self.space_tag,
            source_label: self.source_label.clone(),
            rows: matrix.rows() as u64,
            dim: matrix.dim() as u64,
            sha256: checksum,
            channels: None,
            height: None,
            width: None,
        };
        fpte::write_manifest(&fpte::manifest_path(path), &tensor_manifest)?;

        let norms: Vec<f64> = self.artifacts.iter().map(|a| vector_norm(&a.vector)).collect();
        let manifest = FingerprintManifest {
            source_label: self.source_label.clone(),
            space_tag: self.space_tag,
            manifold_ref: self.manifold_ref.clone(),
            norm_min: norms.iter().cloned().fold(f64::INFINITY, f64::min),
            norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
            norm_max: norms.iter().cloned().fold(0.0, f64::max),
            d_fpt: d_fpt(self)?,
            query_ids: self.artifacts.iter().map(|a| a.query_id).collect(),
            neighbor_ids: self.artifacts.iter().map(|a| a.neighbor_id).collect(),
        };
        let fp_path = fingerprint_manifest_path(path);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&fp_path, json).map_err(|e| Error::io(&fp_path, e))
    }

    /// Reads a fingerprint back. Vectors round-trip bit-exactly; ids come
    /// from the manifest so rebuilt-index audits stay possible.
    pub fn load(path: &Path) -> Result<Self> {
        let matrix = fpte::read_matrix(path)?;
        let fp_path = fingerprint_manifest_path(path);
        let bytes = fs::read(&fp_path).map_err(|e| Error::io(&fp_path, e))?;
        let manifest: FingerprintManifest =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: fp_path.clone(),
                source,
            })?;
        if manifest.query_ids.len() != matrix.rows()
            || manifest.neighbor_ids.len() != matrix.rows()
        {
            return Err(Error::ManifestMismatch {
                detail: format!(
                    "manifest lists {} query ids and {} neighbor ids for {} rows",
                    manifest.query_ids.len(),
                    manifest.neighbor_ids.len(),
                    matrix.rows()
                ),
            });
        }
        let artifacts = (0..matrix.rows())
            .map(|i| {
                let vector = matrix.row(i).to_vec();
                let norm = vector_norm(&vector) as f32;
                Artifact {
                    query_id: manifest.query_ids[i],
                    source_label: manifest.source_label.clone(),
                    vector,
                    norm,
                    neighbor_id: manifest.neighbor_ids[i],
                }
            })
            .collect();
        Ok(Fingerprint {
            source_label: manifest.source_label,
            space_tag: manifest.space_tag,
            artifacts,
            manifold_ref: manifest.manifold_ref,
        })
    }
}

fn fingerprint_manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".fp.json");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(label: &str, rows: &[Vec<f32>]) -> EmbeddingSet {
        EmbeddingSet::new(
            SpaceTag::Other,
            label,
            FeatureMatrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    fn index_from(rows: &[Vec<f32>]) -> ManifoldIndex {
        ManifoldIndex::build(set_from("ref", rows), None).unwrap()
    }

    fn seeded_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
        };
        (0..n).map(|_| (0..d).map(|_| next()).collect()).collect()
    }

    #[test]
    fn single_reference_point_gives_plain_difference() {
        let index = index_from(&[vec![0.0, 0.0]]);
        let a = compute_artifact(&index, &[3.0, 4.0], 0, "g").unwrap();
        assert_eq!(a.vector, vec![3.0, 4.0]);
        assert_eq!(a.norm, 5.0);
        assert_eq!(a.neighbor_id, 0);
    }

    #[test]
    fn nearest_of_two_references_wins() {
        let index = index_from(&[vec![0.0, 0.0], vec![10.0, 0.0]]);
        let a = compute_artifact(&index, &[6.0, 0.0], 0, "g").unwrap();
        assert_eq!(a.neighbor_id, 1);
        assert_eq!(a.vector, vec![-4.0, 0.0]);
        assert_eq!(a.norm, 4.0);
    }

    #[test]
    fn samples_on_the_reference_produce_exact_zeros() {
        let rows = seeded_rows(5, 40, 6);
        let index = index_from(&rows);
        let samples = set_from("ref", &[rows[3].clone(), rows[17].clone(), rows[0].clone()]);
        let fp = compute_fingerprint(&index, &samples).unwrap();
        for a in &fp.artifacts {
            assert!(a.vector.iter().all(|&v| v == 0.0), "vector must be exactly zero");
            assert_eq!(a.norm, 0.0);
        }
        assert_eq!(d_fpt(&fp).unwrap(), 0.0);
        assert_eq!(support_coverage(&fp, 0.0), 1.0);
    }

    #[test]
    fn off_manifold_sample_forces_positive_deviation() {
        let rows = seeded_rows(6, 30, 4);
        let index = index_from(&rows);
        let mut shifted = rows[0].clone();
        shifted[0] += 10.0;
        let samples = set_from("ref", &[rows[1].clone(), shifted]);
        let fp = compute_fingerprint(&index, &samples).unwrap();
        assert!(d_fpt(&fp).unwrap() > 0.0);
        assert_eq!(support_coverage(&fp, 0.0), 0.5);
    }

    #[test]
    fn fingerprint_matches_per_sample_artifacts() {
        let rows = seeded_rows(7, 25, 3);
        let index = index_from(&rows);
        let queries = seeded_rows(8, 2, 3);
        let samples = set_from("gen", &queries);
        // Samples must carry the same space tag as the index.
        let fp = compute_fingerprint(&index, &samples).unwrap();
        assert_eq!(fp.len(), 2);
        for (i, q) in queries.iter().enumerate() {
            let single = compute_artifact(&index, q, i as u64, "gen").unwrap();
            assert_eq!(fp.artifacts[i].vector, single.vector);
            assert_eq!(fp.artifacts[i].neighbor_id, single.neighbor_id);
            assert_eq!(fp.artifacts[i].query_id, i as u64);
        }
    }

    #[test]
    fn fingerprint_norms_equal_oracle_nearest_distances() {
        let rows = seeded_rows(9, 200, 5);
        let index = index_from(&rows);
        let queries = seeded_rows(10, 60, 5);
        let samples = set_from("gen", &queries);
        let fp = compute_fingerprint(&index, &samples).unwrap();
        for (i, q) in queries.iter().enumerate() {
            let mut best = f64::INFINITY;
            for r in &rows {
                let d: f64 = q
                    .iter()
                    .zip(r)
                    .map(|(&a, &b)| {
                        let diff = a as f64 - b as f64;
                        diff * diff
                    })
                    .sum();
                best = best.min(d);
            }
            let want = best.sqrt();
            let got = vector_norm(&fp.artifacts[i].vector);
            assert!(
                (got - want).abs() <= want.max(1.0) * 1e-5,
                "norm {got} vs oracle distance {want}"
            );
        }
    }

    #[test]
    fn stored_norm_field_tracks_vector_norm() {
        let rows = seeded_rows(11, 80, 7);
        let index = index_from(&rows);
        let samples = set_from("gen", &seeded_rows(12, 30, 7));
        let fp = compute_fingerprint(&index, &samples).unwrap();
        for a in &fp.artifacts {
            let direct = vector_norm(&a.vector);
            assert!((a.norm as f64 - direct).abs() <= direct.max(1e-12) * 1e-4);
        }
    }

    #[test]
    fn deviation_is_max_norm_and_coverage_counts_inclusively() {
        let index = index_from(&[vec![0.0, 0.0]]);
        let samples = set_from("g", &[vec![3.0, 4.0], vec![0.0, 1.0]]);
        let fp = compute_fingerprint(&index, &samples).unwrap();
        assert_eq!(d_fpt(&fp).unwrap(), 5.0);
        assert_eq!(support_coverage(&fp, 0.0), 0.0);
        assert_eq!(support_coverage(&fp, 1.0), 0.5);
        assert_eq!(support_coverage(&fp, 5.0), 1.0);

        let halves = set_from("g", &[vec![0.4, 0.0], vec![0.6, 0.0]]);
        let fp = compute_fingerprint(&index, &halves).unwrap();
        assert_eq!(support_coverage(&fp, 0.5), 0.5);
    }

    #[test]
    fn single_unit_artifact_has_unit_deviation() {
        let index = index_from(&[vec![0.0, 0.0]]);
        let samples = set_from("g", &[vec![0.0, 1.0]]);
        let fp = compute_fingerprint(&index, &samples).unwrap();
        assert_eq!(d_fpt(&fp).unwrap(), 1.0);
    }

    #[test]
    fn translation_leaves_artifacts_bit_identical() {
        // Grid-valued coordinates keep every sum exact in f32, so the
        // residuals must not move by even one ulp under a global shift.
        let rows: Vec<Vec<f32>> = seeded_rows(13, 50, 4)
            .iter()
            .map(|r| r.iter().map(|v| (v * 8.0).round() / 8.0).collect())
            .collect();
        let queries: Vec<Vec<f32>> = seeded_rows(14, 20, 4)
            .iter()
            .map(|r| r.iter().map(|v| (v * 8.0).round() / 8.0).collect())
            .collect();
        let shift = 2.5f32;
        let shifted_rows: Vec<Vec<f32>> =
            rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let shifted_queries: Vec<Vec<f32>> =
            queries.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();

        let fp_a = compute_fingerprint(&index_from(&rows), &set_from("g", &queries)).unwrap();
        let fp_b =
            compute_fingerprint(&index_from(&shifted_rows), &set_from("g", &shifted_queries))
                .unwrap();
        for (a, b) in fp_a.artifacts.iter().zip(&fp_b.artifacts) {
            assert_eq!(a.neighbor_id, b.neighbor_id);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn scaling_both_sets_scales_every_norm() {
        let rows = seeded_rows(15, 60, 5);
        let queries = seeded_rows(16, 25, 5);
        let s = 3.0f32;
        let scaled_rows: Vec<Vec<f32>> =
            rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let scaled_queries: Vec<Vec<f32>> =
            queries.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let fp_a = compute_fingerprint(&index_from(&rows), &set_from("g", &queries)).unwrap();
        let fp_b =
            compute_fingerprint(&index_from(&scaled_rows), &set_from("g", &scaled_queries))
                .unwrap();
        for (a, b) in fp_a.artifacts.iter().zip(&fp_b.artifacts) {
            let want = vector_norm(&a.vector) * s as f64;
            let got = vector_norm(&b.vector);
            assert!((got - want).abs() <= want.max(1e-9) * 1e-4);
        }
    }

    #[test]
    fn deviation_dominates_mean_norm() {
        let rows = seeded_rows(17, 100, 6);
        let index = index_from(&rows);
        let samples = set_from("g", &seeded_rows(18, 40, 6));
        let fp = compute_fingerprint(&index, &samples).unwrap();
        let norms: Vec<f64> = fp.artifacts.iter().map(|a| vector_norm(&a.vector)).collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!(d_fpt(&fp).unwrap() >= mean);
        assert!(mean >= 0.0);
    }

    #[test]
    fn matrix_rows_mirror_artifact_vectors() {
        let rows = seeded_rows(19, 70, 4);
        let index = index_from(&rows);
        let samples = set_from("gen-a", &seeded_rows(20, 12, 4));
        let fp = compute_fingerprint(&index, &samples).unwrap();
        let (matrix, labels) = artifact_matrix(&fp).unwrap();
        assert_eq!(matrix.rows(), 12);
        assert_eq!(matrix.dim(), 4);
        assert!(labels.iter().all(|l| l == "gen-a"));
        for (i, a) in fp.artifacts.iter().enumerate() {
            assert_eq!(matrix.row(i), a.vector.as_slice());
        }
    }

    #[test]
    fn save_load_round_trips_vectors_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let rows = seeded_rows(21, 64, 5);
        let index = index_from(&rows);
        let samples = set_from("gen-b", &seeded_rows(22, 10, 5));
        let fp = compute_fingerprint(&index, &samples).unwrap();

        let path = dir.path().join("gen-b.fpte");
        fp.save(&path).unwrap();
        let loaded = Fingerprint::load(&path).unwrap();
        assert_eq!(loaded.source_label, "gen-b");
        assert_eq!(loaded.space_tag, fp.space_tag);
        assert_eq!(loaded.manifold_ref, fp.manifold_ref);
        assert_eq!(loaded.len(), fp.len());
        for (a, b) in fp.artifacts.iter().zip(&loaded.artifacts) {
            assert_eq!(a.query_id, b.query_id);
            assert_eq!(a.neighbor_id, b.neighbor_id);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_fingerprint_is_rejected_by_reducers() {
        let fp = Fingerprint {
            source_label: "g".into(),
            space_tag: SpaceTag::Other,
            artifacts: vec![],
            manifold_ref: "none".into(),
        };
        assert!(matches!(d_fpt(&fp), Err(Error::EmptySet { .. })));
        assert!(matches!(artifact_matrix(&fp), Err(Error::EmptySet { .. })));
    }

    #[test]
    fn mismatched_space_tags_are_rejected() {
        let rows = seeded_rows(23, 10, 3);
        let index = index_from(&rows);
        let samples = EmbeddingSet::new(
            SpaceTag::Freq,
            "gen",
            FeatureMatrix::from_rows(&seeded_rows(24, 4, 3)).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            compute_fingerprint(&index, &samples),
            Err(Error::InvalidConfig(_))
        ));
    }
}
