//! Input decoding shared by the commands: PNG batches, label files, and
//! labeled-dataset assembly from scenario directories or directories of
//! per-class feature files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use fpt_core::attribution::{build_dataset, LabeledDataset};
use fpt_core::embedding::Image;
use fpt_core::fingerprint::compute_fingerprint;
use fpt_core::fpte;
use fpt_core::index::ManifoldIndex;
use fpt_core::synth::Scenario;
use fpt_core::{Error, Result};

/// Which feature route a dataset is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureRoute {
    /// Residual vectors against the reference manifold.
    Artifact,
    /// The sample coordinates themselves.
    Raw,
}

impl FeatureRoute {
    pub fn name(self) -> &'static str {
        match self {
            FeatureRoute::Artifact => "artifact",
            FeatureRoute::Raw => "raw",
        }
    }
}

// ---------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------

/// Expands the positional inputs into an ordered list of PNG files:
/// directories contribute their `*.png` entries sorted by name, explicit
/// files are kept in argument order.
pub fn expand_png_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        let meta = fs::metadata(input).map_err(|e| Error::Io {
            path: input.clone(),
            source: e,
        })?;
        if meta.is_dir() {
            let mut entries = Vec::new();
            let dir = fs::read_dir(input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            for entry in dir {
                let entry = entry.map_err(|e| Error::Io {
                    path: input.clone(),
                    source: e,
                })?;
                let path = entry.path();
                let is_png = path
                    .extension()
                    .is_some_and(|ext| ext.eq_ignore_ascii_case("png"));
                if is_png {
                    entries.push(path);
                }
            }
            entries.sort();
            if entries.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "directory {} contains no .png files",
                    input.display()
                )));
            }
            files.extend(entries);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptySet {
            what: "image inputs",
        });
    }
    Ok(files)
}

/// Decodes one PNG into channel-planar floats in [0, 1]. Grayscale stays
/// single-channel; every other color type lands on 8-bit RGB.
pub fn load_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io {
            path: path.into(),
            source: io,
        },
        other => Error::InvalidConfig(format!("cannot decode {}: {other}", path.display())),
    })?;
    match decoded {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let pixels: Vec<f32> = buf.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            Image::new(1, h as usize, w as usize, pixels)
        }
        other => {
            let buf = other.to_rgb8();
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut pixels = vec![0f32; 3 * h * w];
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    pixels[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
                }
            }
            Image::new(3, h, w, pixels)
        }
    }
}

// ---------------------------------------------------------------------
// Label files
// ---------------------------------------------------------------------

/// Reads a label file: one label per line, surrounding whitespace trimmed,
/// blank lines skipped.
pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let labels: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if labels.is_empty() {
        return Err(Error::EmptySet { what: "label file" });
    }
    Ok(labels)
}

// ---------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------

/// Builds the attribution dataset of a scenario on the requested feature
/// route. Class names are the set source labels (`real_holdout` first,
/// then each generator), identical on both routes, so one label map works
/// across routes in cross-scenario evaluation.
pub fn scenario_dataset(
    scenario: &Scenario,
    route: FeatureRoute,
    seed: u64,
) -> Result<LabeledDataset> {
    let holdout = scenario.real_holdout.as_ref().ok_or_else(|| {
        Error::InvalidConfig(format!(
            "scenario {:?} has no real_holdout set; attribution needs the real class",
            scenario.name
        ))
    })?;
    match route {
        FeatureRoute::Artifact => {
            let index = ManifoldIndex::build(scenario.real.clone(), None)?;
            let real_fp = compute_fingerprint(&index, holdout)?;
            let mut fps = Vec::with_capacity(scenario.generators.len());
            for (_, set) in &scenario.generators {
                fps.push(compute_fingerprint(&index, set)?);
            }
            build_dataset(&fps, &real_fp, seed)
        }
        FeatureRoute::Raw => {
            let mut classes = vec![(
                holdout.source_label().to_string(),
                holdout.points().clone(),
            )];
            for (_, set) in &scenario.generators {
                classes.push((set.source_label().to_string(), set.points().clone()));
            }
            LabeledDataset::from_classes(&classes, seed)
        }
    }
}

/// Builds a dataset from a directory of `<class>.fpte` files: each tensor
/// is one class, named by its manifest's source label, ordered by file
/// name. Also returns every file read, for provenance recording.
pub fn dir_dataset(dir: &Path, seed: u64) -> Result<(LabeledDataset, Vec<PathBuf>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
        let path = entry.path();
        if path.extension().is_some_and(|ext| ext == "fpte") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "directory {} contains no .fpte files",
            dir.display()
        )));
    }
    let mut classes = Vec::with_capacity(files.len());
    let mut read = Vec::with_capacity(files.len() * 2);
    for f in &files {
        let set = fpte::load_set(f)?;
        classes.push((set.source_label().to_string(), set.points().clone()));
        read.push(fpte::manifest_path(f));
        read.push(f.clone());
    }
    let dataset = LabeledDataset::from_classes(&classes, seed)?;
    Ok((dataset, read))
}

/// All files a saved scenario consists of, for provenance recording.
pub fn scenario_files(scenario: &Scenario, dir: &Path) -> Vec<PathBuf> {
    let mut names = vec!["real.fpte".to_string()];
    if scenario.real_holdout.is_some() {
        names.push("real_holdout.fpte".to_string());
    }
    for (label, _) in &scenario.generators {
        names.push(format!("{label}.fpte"));
    }
    let mut out = Vec::new();
    for n in &names {
        let tensor = dir.join(n);
        out.push(fpte::manifest_path(&tensor));
        out.push(tensor);
    }
    out.push(dir.join("manifest.json"));
    out.push(dir.join("hyperparams.csv"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpt_core::matrix::FeatureMatrix;

    #[test]
    fn label_files_are_trimmed_and_blank_lines_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        fs::write(&path, "alpha\n  beta \n\ngamma").unwrap();
        assert_eq!(read_labels(&path).unwrap(), vec!["alpha", "beta", "gamma"]);
    }

    #[test]
    fn empty_label_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        fs::write(&path, "\n\n").unwrap();
        assert!(matches!(
            read_labels(&path).unwrap_err(),
            Error::EmptySet { .. }
        ));
    }

    #[test]
    fn png_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.png");
        let mut buf = image::RgbImage::new(2, 2);
        buf.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        buf.put_pixel(1, 0, image::Rgb([0, 255, 0]));
        buf.put_pixel(0, 1, image::Rgb([0, 0, 255]));
        buf.put_pixel(1, 1, image::Rgb([255, 255, 255]));
        buf.save(&path).unwrap();

        let img = load_png(&path).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 2, 2));
        // Red channel, row-major: pixel (0,0) is 1.0, (1,1) is 1.0.
        assert_eq!(img.channel(0), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(img.channel(2), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn grayscale_pngs_stay_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let buf = image::GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
        buf.save(&path).unwrap();
        let img = load_png(&path).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (1, 1, 2));
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn directory_inputs_expand_sorted_and_reject_non_png_dirs() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "notes.txt"] {
            fs::write(dir.path().join(name), b"x").unwrap();
        }
        let files = expand_png_inputs(&[dir.path().to_path_buf()]).unwrap();
        let names: Vec<_> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["a.png", "b.png"]);

        let empty = tempfile::tempdir().unwrap();
        assert!(expand_png_inputs(&[empty.path().to_path_buf()]).is_err());
    }

    #[test]
    fn dir_datasets_read_one_class_per_tensor() {
        use fpt_core::embedding::{EmbeddingSet, SpaceTag};
        let dir = tempfile::tempdir().unwrap();
        for (name, fill) in [("a", 0.0f32), ("b", 1.0f32)] {
            let m = FeatureMatrix::new(12, 2, vec![fill; 24]).unwrap();
            let set = EmbeddingSet::new(SpaceTag::Other, name, m).unwrap();
            fpte::save_set(&dir.path().join(format!("{name}.fpte")), &set).unwrap();
        }
        let (ds, read) = dir_dataset(dir.path(), 3).unwrap();
        assert_eq!(ds.label_names(), ["a", "b"]);
        assert_eq!(ds.features().rows(), 24);
        assert_eq!(read.len(), 4);
    }
}
