//! Synthetic benchmark scenarios: known manifolds plus "generators" with
//! controllable artifact signatures.
//!
//! A scenario bundles one reference manifold sample, a fresh holdout of
//! the same law (the real class for attribution), and several generated
//! sets, each a perturbation kind applied to clean manifold draws. On
//! curve manifolds the kinds sample two nearby sectors, and each sector
//! hosts one outward and one inward kind. Deviations normal to the
//! manifold survive the nearest-point
//! subtraction while position along the manifold is the dominant raw
//! variance, so the four kinds end up as four compact deviation lumps
//! at distinct compass directions even though their raw supports stack
//! on top of the same sectors.
//!
//! Arc restriction happens by rejection from the manifold's own sample
//! stream. That detail buys a useful exactness property: a generator
//! with the reference's seed draws a subset of the reference points, so
//! the zero-magnitude limit really does produce (near) zero artifacts.
//!
//! All randomness flows from a single scenario seed through named
//! sub-streams, and every scenario rebuilds bit-identically from its
//! persisted manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{embed_images, EmbeddingSet, Image, SpaceTag, Standardizer};
use crate::error::{Error, Result};
use crate::fpte;
use crate::matrix::FeatureMatrix;
use crate::stream::named_stream;

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Circle2d,
    SwissRoll3d,
    ImageGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    NormalOffset,
    DirectionalBias,
    HighFreqNoise,
    Smoothing,
    Checkerboard,
}

impl PerturbationKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NormalOffset => "normal_offset",
            Self::DirectionalBias => "directional_bias",
            Self::HighFreqNoise => "high_freq_noise",
            Self::Smoothing => "smoothing",
            Self::Checkerboard => "checkerboard",
        }
    }
}

/// Perturbation with its own noise stream, so a generator reproduces its
/// artifact pattern wherever it is instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub kind: ManifoldKind,
    pub n: usize,
    pub noise: f64,
    /// Image side length; ImageGrid only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    /// Coordinate columns kept after generation; SwissRoll3d only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub label: String,
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub n: usize,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingChoice {
    Identity,
    Freq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub embedding: EmbeddingChoice,
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub manifold: ManifoldConfig,
    /// Size of the fresh real-class sample (0 disables it).
    #[serde(default = "default_holdout")]
    pub real_holdout_n: usize,
    pub generators: Vec<GeneratorConfig>,
    pub space: SpaceConfig,
}

fn default_holdout() -> usize {
    1000
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub space_tag: SpaceTag,
    /// Reference manifold sample; the manifold index is built over it.
    pub real: EmbeddingSet,
    /// Fresh draw of the real law, the attribution class 0.
    pub real_holdout: Option<EmbeddingSet>,
    pub generators: Vec<(String, EmbeddingSet)>,
    pub hyperparam_labels: BTreeMap<String, BTreeMap<String, String>>,
    pub config: ScenarioConfig,
}

// ---------------------------------------------------------------------
// Geometry constants of the perturbation kinds
// ---------------------------------------------------------------------

/// Half-width of the sampling arc of each kind on curve manifolds.
const ARC_HALF_WIDTH: f64 = 0.5235987755982988; // 30 degrees
/// Magnitude jitter band for the radial kinds: U(0.7, 1.3), mean 1.
const JITTER_LO: f64 = 0.7;
const JITTER_SPAN: f64 = 0.6;
const HIGH_FREQ_WAVES: f64 = 16.0;
const HIGH_FREQ_DEPTH: f64 = 0.3;
const DEFAULT_GRID: usize = 16;
/// Rejection sampling gives up after this many candidates per sample.
const MAX_REJECTION_FACTOR: usize = 64;

/// Fixed displacement axis of the directional bias and center of the
/// second sampling sector: 70 degrees from the first sector. Far enough
/// that the deviation lumps of the two sectors stay apart, close enough
/// that the sectors' raw bands nearly touch.
const BIAS_AXIS_ANGLE: f64 = 1.2217304763960306;

/// Center of the kind's sampling sector on curve manifolds. Two kinds
/// per sector: the normal-offset pair lives at angle zero (outward and
/// inward), the bias pair a quarter turn away. Stacking kinds on shared
/// sectors keeps the kind identity out of the sampling position; it
/// shows up only in the deviation off the manifold.
fn arc_center(kind: PerturbationKind) -> f64 {
    match kind {
        PerturbationKind::NormalOffset | PerturbationKind::Smoothing => 0.0,
        PerturbationKind::DirectionalBias | PerturbationKind::HighFreqNoise => BIAS_AXIS_ANGLE,
        PerturbationKind::Checkerboard => 0.0,
    }
}

fn wrapped_distance(a: f64, b: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        TAU - d
    } else {
        d
    }
}

// ---------------------------------------------------------------------
// Manifold samplers
// ---------------------------------------------------------------------

/// One candidate point plus the surface angle the perturbation kinds key
/// off (the polar angle on the circle, t mod 2pi on the roll, unused for
/// images).
struct Candidate {
    point: Vec<f64>,
    angle: f64,
}

fn draw_candidate(cfg: &ManifoldConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Candidate {
    use std::f64::consts::{PI, TAU};
    match cfg.kind {
        ManifoldKind::Circle2d => {
            let theta = rng.random::<f64>() * TAU;
            let z: f64 = StandardNormal.sample(rng);
            let r = 1.0 + cfg.noise * z;
            Candidate {
                point: vec![r * theta.cos(), r * theta.sin()],
                angle: theta,
            }
        }
        ManifoldKind::SwissRoll3d => {
            let t = 1.5 * PI + rng.random::<f64>() * 3.0 * PI;
            let y = rng.random::<f64>() * 2.0;
            let z: f64 = StandardNormal.sample(rng);
            let r = t / (3.0 * PI) + cfg.noise * z;
            Candidate {
                point: vec![r * t.cos(), y, r * t.sin()],
                angle: t.rem_euclid(TAU),
            }
        }
        ManifoldKind::ImageGrid => {
            let k = cfg.grid.unwrap_or(DEFAULT_GRID);
            // Smooth random-phase image: a handful of low harmonics with
            // decaying amplitudes, plus optional pixel noise.
            let mut terms = Vec::new();
            for u in 0..=2usize {
                for v in 0..=2usize {
                    if u == 0 && v == 0 {
                        continue;
                    }
                    let amp: f64 = StandardNormal.sample(rng);
                    let amp = amp / (1 + u + v) as f64;
                    let phase = rng.random::<f64>() * TAU;
                    terms.push((u as f64, v as f64, amp, phase));
                }
            }
            let mut pixels = Vec::with_capacity(k * k);
            for y in 0..k {
                for x in 0..k {
                    let mut p = 0.0;
                    for &(u, v, amp, phase) in &terms {
                        p += amp * (TAU * (u * x as f64 + v * y as f64) / k as f64 + phase).cos();
                    }
                    pixels.push(p);
                }
            }
            if cfg.noise > 0.0 {
                for p in pixels.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *p += cfg.noise * z;
                }
            }
            Candidate {
                point: pixels,
                angle: 0.0,
            }
        }
    }
}

fn stream_name(cfg: &ManifoldConfig) -> String {
    match cfg.kind {
        ManifoldKind::Circle2d => "manifold:circle2d".into(),
        ManifoldKind::SwissRoll3d => "manifold:swiss_roll3d".into(),
        ManifoldKind::ImageGrid => "manifold:image_grid".into(),
    }
}

fn rows_to_set(label: &str, tag: SpaceTag, rows: Vec<Vec<f64>>) -> Result<EmbeddingSet> {
    let rows_f32: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect();
    EmbeddingSet::new(tag, label, FeatureMatrix::from_rows(&rows_f32)?)
}

fn raw_tag(kind: ManifoldKind) -> SpaceTag {
    match kind {
        ManifoldKind::ImageGrid => SpaceTag::Rgb,
        _ => SpaceTag::Other,
    }
}

/// Clean manifold sample, deterministic under seed.
pub fn gen_manifold(cfg: &ManifoldConfig, seed: u64) -> Result<EmbeddingSet> {
    validate_manifold(cfg)?;
    let mut rng = named_stream(seed, &stream_name(cfg));
    let rows: Vec<Vec<f64>> = (0..cfg.n)
        .map(|_| draw_candidate(cfg, &mut rng).point)
        .collect();
    rows_to_set("real", raw_tag(cfg.kind), rows)
}

// ---------------------------------------------------------------------
// Perturbation kinds
// ---------------------------------------------------------------------

/// In-plane unit normal of the curve manifolds at surface angle `angle`,
/// expressed in full ambient coordinates.
fn surface_normal(kind: ManifoldKind, angle: f64) -> Vec<f64> {
    match kind {
        ManifoldKind::Circle2d => vec![angle.cos(), angle.sin()],
        // The roll's surface normal has no y component, so displacements
        // along it survive the projection onto the (x, z) plane.
        ManifoldKind::SwissRoll3d => vec![angle.cos(), 0.0, angle.sin()],
        ManifoldKind::ImageGrid => unreachable!("image kinds do not use surface normals"),
    }
}

fn apply_perturbation(
    manifold: &ManifoldConfig,
    spec: &PerturbationSpec,
    candidate: &Candidate,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let m = spec.magnitude;
    let mut x = candidate.point.clone();
    match (manifold.kind, spec.kind) {
        (ManifoldKind::ImageGrid, kind) => {
            let k = manifold.grid.unwrap_or(DEFAULT_GRID);
            match kind {
                PerturbationKind::Checkerboard => {
                    for iy in 0..k {
                        for ix in 0..k {
                            let sign = if (ix + iy) % 2 == 0 { 1.0 } else { -1.0 };
                            x[iy * k + ix] += m * sign;
                        }
                    }
                }
                PerturbationKind::HighFreqNoise => {
                    let scale = m / (x.len() as f64).sqrt();
                    for p in x.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *p += scale * z;
                    }
                }
                PerturbationKind::NormalOffset => {
                    let g: Vec<f64> = (0..x.len())
                        .map(|_| StandardNormal.sample(rng))
                        .collect();
                    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    for (p, gi) in x.iter_mut().zip(&g) {
                        *p += m * gi / norm;
                    }
                }
                PerturbationKind::Smoothing => {
                    let blurred: Vec<f64> = (0..x.len())
                        .map(|i| {
                            let (ix, iy) = (i % k, i / k);
                            let up = x[((iy + k - 1) % k) * k + ix];
                            let down = x[((iy + 1) % k) * k + ix];
                            let left = x[iy * k + (ix + k - 1) % k];
                            let right = x[iy * k + (ix + 1) % k];
                            (up + down + left + right) / 4.0
                        })
                        .collect();
                    for (p, &b) in x.iter_mut().zip(&blurred) {
                        *p = (1.0 - m) * *p + m * b;
                    }
                }
                PerturbationKind::DirectionalBias => {
                    let shift = m / (x.len() as f64).sqrt();
                    for p in x.iter_mut() {
                        *p += shift;
                    }
                }
            }
        }
        (_, PerturbationKind::NormalOffset) => {
            let jitter = JITTER_LO + JITTER_SPAN * rng.random::<f64>();
            let n = surface_normal(manifold.kind, candidate.angle);
            for (p, ni) in x.iter_mut().zip(&n) {
                *p += m * jitter * ni;
            }
        }
        (_, PerturbationKind::Smoothing) => {
            let jitter = JITTER_LO + JITTER_SPAN * rng.random::<f64>();
            let n = surface_normal(manifold.kind, candidate.angle);
            for (p, ni) in x.iter_mut().zip(&n) {
                *p -= m * jitter * ni;
            }
        }
        (_, PerturbationKind::DirectionalBias) => {
            let n = surface_normal(manifold.kind, BIAS_AXIS_ANGLE);
            for (p, ni) in x.iter_mut().zip(&n) {
                *p += m * ni;
            }
        }
        (_, PerturbationKind::HighFreqNoise) => {
            // Inward push whose gain oscillates rapidly with position
            // along the manifold.
            let wave = 1.0 + HIGH_FREQ_DEPTH * (HIGH_FREQ_WAVES * candidate.angle).sin();
            let n = surface_normal(manifold.kind, candidate.angle);
            for (p, ni) in x.iter_mut().zip(&n) {
                *p -= m * wave * ni;
            }
        }
        (_, PerturbationKind::Checkerboard) => {
            unreachable!("validated: checkerboard requires an image manifold")
        }
    }
    x
}

fn kind_uses_arc(manifold: ManifoldKind, kind: PerturbationKind) -> bool {
    !matches!(manifold, ManifoldKind::ImageGrid) && !matches!(kind, PerturbationKind::Checkerboard)
}

fn validate_spec(manifold: &ManifoldConfig, spec: &PerturbationSpec) -> Result<()> {
    if !(spec.magnitude > 0.0) || !spec.magnitude.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "perturbation magnitude must be positive and finite, got {}",
            spec.magnitude
        )));
    }
    if spec.kind == PerturbationKind::Checkerboard && manifold.kind != ManifoldKind::ImageGrid {
        return Err(Error::InvalidConfig(
            "checkerboard perturbation requires an image manifold".into(),
        ));
    }
    Ok(())
}

/// Clean draws plus the kind's perturbation. The clean base replays the
/// manifold stream of `seed`; arc-restricted kinds keep only candidates
/// inside their home arc, so with the reference's seed the base draws
/// are a subset of the reference points.
pub fn gen_biased_samples(
    manifold: &ManifoldConfig,
    spec: &PerturbationSpec,
    n: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    validate_manifold(manifold)?;
    validate_spec(manifold, spec)?;
    if n == 0 {
        return Err(Error::EmptySet {
            what: "generated sample",
        });
    }
    let mut clean_rng = named_stream(seed, &stream_name(manifold));
    let mut perturb_rng = named_stream(spec.seed, &format!("perturb:{}", spec.kind.name()));
    let use_arc = kind_uses_arc(manifold.kind, spec.kind);

    let mut rows = Vec::with_capacity(n);
    let mut candidates = 0usize;
    let budget = n.saturating_mul(MAX_REJECTION_FACTOR).max(1024);
    while rows.len() < n {
        if candidates >= budget {
            return Err(Error::InvalidConfig(format!(
                "sampling arc for {} accepted {} of {} candidates; arc too narrow",
                spec.kind.name(),
                rows.len(),
                candidates
            )));
        }
        let cand = draw_candidate(manifold, &mut clean_rng);
        candidates += 1;
        if use_arc && wrapped_distance(cand.angle, arc_center(spec.kind)) > ARC_HALF_WIDTH {
            continue;
        }
        rows.push(apply_perturbation(manifold, spec, &cand, &mut perturb_rng));
    }
    rows_to_set("generated", raw_tag(manifold.kind), rows)
}

// ---------------------------------------------------------------------
// Scenario assembly
// ---------------------------------------------------------------------

fn validate_manifold(cfg: &ManifoldConfig) -> Result<()> {
    if cfg.n == 0 {
        return Err(Error::InvalidConfig(
            "manifold sample size must be positive".into(),
        ));
    }
    if cfg.noise < 0.0 || !cfg.noise.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "manifold noise must be non-negative, got {}",
            cfg.noise
        )));
    }
    match cfg.kind {
        ManifoldKind::ImageGrid => {
            let k = cfg.grid.unwrap_or(DEFAULT_GRID);
            if k < 2 {
                return Err(Error::InvalidConfig(format!(
                    "image grid side must be at least 2, got {k}"
                )));
            }
            if cfg.projection.is_some() {
                return Err(Error::InvalidConfig(
                    "projection applies to swiss_roll3d manifolds only".into(),
                ));
            }
        }
        ManifoldKind::Circle2d => {
            if cfg.grid.is_some() {
                return Err(Error::InvalidConfig(
                    "grid applies to image_grid manifolds only".into(),
                ));
            }
            if cfg.projection.is_some() {
                return Err(Error::InvalidConfig(
                    "projection applies to swiss_roll3d manifolds only".into(),
                ));
            }
        }
        ManifoldKind::SwissRoll3d => {
            if cfg.grid.is_some() {
                return Err(Error::InvalidConfig(
                    "grid applies to image_grid manifolds only".into(),
                ));
            }
            if let Some(dims) = &cfg.projection {
                if dims.is_empty() {
                    return Err(Error::InvalidConfig("projection must keep at least one dimension".into()));
                }
                let mut seen = [false; 3];
                for &d in dims {
                    if d >= 3 {
                        return Err(Error::InvalidConfig(format!(
                            "projection dimension {d} out of range for a 3-d manifold"
                        )));
                    }
                    if seen[d] {
                        return Err(Error::InvalidConfig(format!(
                            "projection dimension {d} repeated"
                        )));
                    }
                    seen[d] = true;
                }
            }
        }
    }
    Ok(())
}

fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    if cfg.name.is_empty() {
        return Err(Error::InvalidConfig("scenario name must not be empty".into()));
    }
    validate_manifold(&cfg.manifold)?;
    if cfg.generators.is_empty() {
        return Err(Error::EmptySet { what: "generators" });
    }
    let mut labels = Vec::new();
    for g in &cfg.generators {
        if g.label.is_empty() {
            return Err(Error::InvalidConfig("generator label must not be empty".into()));
        }
        if g.label == "real" || g.label == "real_holdout" {
            return Err(Error::InvalidConfig(format!(
                "generator label {:?} is reserved",
                g.label
            )));
        }
        if labels.contains(&g.label) {
            return Err(Error::InvalidConfig(format!(
                "duplicate generator label {:?}",
                g.label
            )));
        }
        if g.n == 0 {
            return Err(Error::InvalidConfig(format!(
                "generator {:?} sample size must be positive",
                g.label
            )));
        }
        labels.push(g.label.clone());
        validate_spec(
            &cfg.manifold,
            &PerturbationSpec {
                kind: g.kind,
                magnitude: g.magnitude,
                seed: 0,
            },
        )?;
    }
    if cfg.space.embedding == EmbeddingChoice::Freq && cfg.manifold.kind != ManifoldKind::ImageGrid
    {
        return Err(Error::InvalidConfig(
            "frequency embedding requires an image manifold".into(),
        ));
    }
    Ok(())
}

fn project_columns(set: &EmbeddingSet, dims: &[usize], label: &str) -> Result<EmbeddingSet> {
    let src = set.points();
    let mut data = Vec::with_capacity(src.rows() * dims.len());
    for i in 0..src.rows() {
        let row = src.row(i);
        for &d in dims {
            data.push(row[d]);
        }
    }
    EmbeddingSet::new(
        set.space_tag(),
        label,
        FeatureMatrix::new(src.rows(), dims.len(), data)?,
    )
}

fn seed_for(scenario_seed: u64, purpose: &str) -> u64 {
    let mut rng = named_stream(scenario_seed, purpose);
    rng.random()
}

/// Applies the scenario's space step (projection, embedding, optional
/// standardization happens at the caller) to one raw set.
fn embed_raw_set(cfg: &ScenarioConfig, set: &EmbeddingSet, label: &str) -> Result<EmbeddingSet> {
    let set = match (&cfg.manifold.projection, cfg.manifold.kind) {
        (Some(dims), ManifoldKind::SwissRoll3d) => project_columns(set, dims, label)?,
        _ => EmbeddingSet::new(set.space_tag(), label, set.points().clone())?,
    };
    match cfg.space.embedding {
        EmbeddingChoice::Identity => Ok(set),
        EmbeddingChoice::Freq => {
            let k = cfg.manifold.grid.unwrap_or(DEFAULT_GRID);
            let images: Vec<Image> = set
                .points()
                .iter_rows()
                .map(|row| Image::new(1, k, k, row.to_vec()))
                .collect::<Result<_>>()?;
            embed_images(&images, SpaceTag::Freq, label)
        }
    }
}

/// Builds all sets of a scenario from its config. Regeneration from the
/// same config is bit-identical.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    validate_config(cfg)?;
    let raw_real = gen_manifold(&cfg.manifold, seed_for(cfg.seed, "reference"))?;
    let raw_holdout = if cfg.real_holdout_n > 0 {
        let holdout_cfg = ManifoldConfig {
            n: cfg.real_holdout_n,
            ..cfg.manifold.clone()
        };
        Some(gen_manifold(&holdout_cfg, seed_for(cfg.seed, "real-holdout"))?)
    } else {
        None
    };

    let mut raw_generators = Vec::with_capacity(cfg.generators.len());
    for g in &cfg.generators {
        let spec = PerturbationSpec {
            kind: g.kind,
            magnitude: g.magnitude,
            seed: seed_for(cfg.seed, &format!("perturbation:{}", g.label)),
        };
        let set = gen_biased_samples(
            &cfg.manifold,
            &spec,
            g.n,
            seed_for(cfg.seed, &format!("generator:{}", g.label)),
        )?;
        raw_generators.push((g.label.clone(), set));
    }

    // Space step: projection and embedding, then one standardizer fit on
    // the reference and applied everywhere.
    let mut real = embed_raw_set(cfg, &raw_real, "real")?;
    let mut real_holdout = raw_holdout
        .as_ref()
        .map(|s| embed_raw_set(cfg, s, "real_holdout"))
        .transpose()?;
    let mut generators = raw_generators
        .iter()
        .map(|(label, s)| Ok((label.clone(), embed_raw_set(cfg, s, label)?)))
        .collect::<Result<Vec<_>>>()?;
    if cfg.space.standardize {
        let standardizer = Standardizer::fit(&real)?;
        real = standardizer.apply(&real)?;
        real_holdout = real_holdout
            .as_ref()
            .map(|s| standardizer.apply(s))
            .transpose()?;
        generators = generators
            .iter()
            .map(|(label, s)| Ok((label.clone(), standardizer.apply(s)?)))
            .collect::<Result<Vec<_>>>()?;
    }

    let mut hyperparam_labels = BTreeMap::new();
    for g in &cfg.generators {
        let mut categories = g.hyperparams.clone();
        categories.insert("kind".to_string(), g.kind.name().to_string());
        hyperparam_labels.insert(g.label.clone(), categories);
    }

    Ok(Scenario {
        name: cfg.name.clone(),
        seed: cfg.seed,
        space_tag: real.space_tag(),
        real,
        real_holdout,
        generators,
        hyperparam_labels,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------
// Canonical configurations
// ---------------------------------------------------------------------

fn canonical_generators(n: usize) -> Vec<GeneratorConfig> {
    let gen = |label: &str, kind: PerturbationKind, extra: &[(&str, &str)]| GeneratorConfig {
        label: label.to_string(),
        kind,
        magnitude: 0.2,
        n,
        hyperparams: extra
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    };
    vec![
        gen(
            "gen-normal-offset",
            PerturbationKind::NormalOffset,
            &[("direction", "outward")],
        ),
        gen(
            "gen-directional-bias",
            PerturbationKind::DirectionalBias,
            &[("direction", "fixed")],
        ),
        gen(
            "gen-smoothing",
            PerturbationKind::Smoothing,
            &[("direction", "inward")],
        ),
        gen(
            "gen-high-freq",
            PerturbationKind::HighFreqNoise,
            &[("direction", "outward")],
        ),
    ]
}

/// The canonical circle scenario: dense unit-circle reference, four
/// perturbation kinds at magnitude 0.2, a thousand samples per class.
pub fn canonical_circle_config(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "circle-canonical".into(),
        seed,
        manifold: ManifoldConfig {
            kind: ManifoldKind::Circle2d,
            n: 10_000,
            noise: 0.01,
            grid: None,
            projection: None,
        },
        real_holdout_n: 1000,
        generators: canonical_generators(1000),
        space: SpaceConfig {
            embedding: EmbeddingChoice::Identity,
            standardize: false,
        },
    }
}

/// The cross-scenario partner: a swiss roll projected to the plane, with
/// the same four perturbation kinds and labels as the circle scenario.
pub fn canonical_swiss_config(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "swiss-roll-canonical".into(),
        seed,
        manifold: ManifoldConfig {
            kind: ManifoldKind::SwissRoll3d,
            n: 10_000,
            noise: 0.01,
            grid: None,
            projection: Some(vec![0, 2]),
        },
        real_holdout_n: 1000,
        generators: canonical_generators(1000),
        space: SpaceConfig {
            embedding: EmbeddingChoice::Identity,
            standardize: false,
        },
    }
}

// ---------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioManifest {
    version: u32,
    config: ScenarioConfig,
    /// Payload checksum of every persisted set, keyed by file name.
    checksums: BTreeMap<String, String>,
}

const SCENARIO_MANIFEST: &str = "manifest.json";
const HYPERPARAMS_FILE: &str = "hyperparams.csv";

fn payload_checksum(set: &EmbeddingSet) -> String {
    let data = set.points().data();
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hex::encode(hasher.finalize())
}

fn set_file(label: &str) -> String {
    format!("{label}.fpte")
}

impl Scenario {
    fn files(&self) -> Vec<(String, &EmbeddingSet)> {
        let mut out = vec![(set_file("real"), &self.real)];
        if let Some(h) = &self.real_holdout {
            out.push((set_file("real_holdout"), h));
        }
        for (label, set) in &self.generators {
            out.push((set_file(label), set));
        }
        out
    }

    /// Writes every set, the manifest, and the hyperparameter table.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut checksums = BTreeMap::new();
        for (file, set) in self.files() {
            let geometry = match self.config.manifold.kind {
                ManifoldKind::ImageGrid if self.config.space.embedding == EmbeddingChoice::Identity => {
                    let k = self.config.manifold.grid.unwrap_or(DEFAULT_GRID);
                    Some((1usize, k, k))
                }
                _ => None,
            };
            let path = dir.join(&file);
            let geometry = geometry.map(|(c, h, w)| (c as u32, h as u32, w as u32));
            fpte::save_set_with_geometry(&path, set, geometry)?;
            checksums.insert(file, payload_checksum(set));
        }
        let manifest = ScenarioManifest {
            version: 1,
            config: self.config.clone(),
            checksums,
        };
        let path = dir.join(SCENARIO_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

        let csv_path = dir.join(HYPERPARAMS_FILE);
        let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| {
            Error::InvalidConfig(format!("cannot write {}: {e}", csv_path.display()))
        })?;
        writer
            .write_record(["source_label", "category_name", "category_value"])
            .and_then(|_| {
                for (label, categories) in &self.hyperparam_labels {
                    for (name, value) in categories {
                        writer.write_record([label.as_str(), name.as_str(), value.as_str()])?;
                    }
                }
                writer.flush()?;
                Ok(())
            })
            .map_err(|e| Error::InvalidConfig(format!("cannot write hyperparams table: {e}")))
    }

    /// Reads a persisted scenario, verifying every payload checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(SCENARIO_MANIFEST);
        let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ScenarioManifest =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: manifest_path.clone(),
                source,
            })?;
        if manifest.version != 1 {
            return Err(Error::UnsupportedVersion {
                found: manifest.version,
            });
        }
        let cfg = manifest.config;
        validate_config(&cfg)?;

        let read_set = |file: &str| -> Result<EmbeddingSet> {
            let set = fpte::load_set(&dir.join(file))?;
            let expected = manifest.checksums.get(file).ok_or_else(|| {
                Error::ManifestMismatch {
                    detail: format!("scenario manifest lists no checksum for {file}"),
                }
            })?;
            let found = payload_checksum(&set);
            if &found != expected {
                return Err(Error::ChecksumMismatch {
                    path: dir.join(file),
                    expected: expected.clone(),
                    found,
                });
            }
            Ok(set)
        };

        let real = read_set(&set_file("real"))?;
        let real_holdout = if cfg.real_holdout_n > 0 {
            Some(read_set(&set_file("real_holdout"))?)
        } else {
            None
        };
        let mut generators = Vec::with_capacity(cfg.generators.len());
        for g in &cfg.generators {
            generators.push((g.label.clone(), read_set(&set_file(&g.label))?));
        }
        let mut hyperparam_labels = BTreeMap::new();
        for g in &cfg.generators {
            let mut categories = g.hyperparams.clone();
            categories.insert("kind".to_string(), g.kind.name().to_string());
            hyperparam_labels.insert(g.label.clone(), categories);
        }
        Ok(Scenario {
            name: cfg.name.clone(),
            seed: cfg.seed,
            space_tag: real.space_tag(),
            real,
            real_holdout,
            generators,
            hyperparam_labels,
            config: cfg,
        })
    }

    /// Regenerates from the persisted config and confirms that every set
    /// matches its stored checksum bit for bit.
    pub fn verify_rebuild(dir: &Path) -> Result<()> {
        let stored = Self::load(dir)?;
        let rebuilt = build_scenario(&stored.config)?;
        for ((file, old), (_, new)) in stored.files().iter().zip(rebuilt.files()) {
            let (a, b) = (payload_checksum(old), payload_checksum(&new));
            if a != b {
                return Err(Error::ChecksumMismatch {
                    path: dir.join(file),
                    expected: a,
                    found: b,
                });
            }
        }
        Ok(())
    }
}
