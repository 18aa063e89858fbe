//! Implementations of the eight subcommands.
//!
//! Conventions shared by all commands: machine-readable reports go to
//! stdout (and to `--out` when given), log lines go to stderr, and every
//! command that writes files also writes a run manifest beside its primary
//! output. Numeric results are deterministic given the configuration and
//! seed, independent of thread count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;

use fpt_core::attribution::{
    cross_evaluate, evaluate, train, AttributionModel, LabeledDataset, Split, TrainConfig,
};
use fpt_core::embedding::{embed_images, EmbeddingSet, SpaceTag, Standardizer};
use fpt_core::fingerprint::{compute_fingerprint, d_fpt, support_coverage, Fingerprint};
use fpt_core::fpte;
use fpt_core::index::ManifoldIndex;
use fpt_core::metrics::{
    cluster_alignment, fdr, frechet_distance, knn_precision_recall, nmi, Clustering,
    GaussianSummary,
};
use fpt_core::synth::{build_scenario, canonical_circle_config, canonical_swiss_config, Scenario};
use fpt_core::{Error, Result};

use crate::dataio::{self, FeatureRoute};
use crate::report::Report;
use crate::runfile::{manifest_path_for, Recorder};
use crate::{
    AttributeArgs, CanonicalArg, ClusterAlignArgs, Command, DumpArgs, DumpFormat, EmbedArgs,
    EvalArgs, FdArgs, FdrArgs, FingerprintArgs, MetricsCommand, NmiArgs, PrArgs, SpaceArg,
    SplitArg, SynthArgs,
};

pub fn run(command: Command, started: Instant) -> Result<()> {
    match command {
        Command::Embed(a) => cmd_embed(a, started),
        Command::Fingerprint(a) => cmd_fingerprint(a, started),
        Command::Attribute(a) => cmd_attribute(a, started),
        Command::Eval(a) => cmd_eval(a, started),
        Command::Metrics(m) => cmd_metrics(m, started),
        Command::Synth(a) => cmd_synth(a, started),
        Command::Dump(a) => cmd_dump(a, started),
        Command::Verify(a) => crate::runfile::verify_manifest(&a.manifest).map(|_| ()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

/// `<path><suffix>`, keeping the original extension in place.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(suffix);
    PathBuf::from(os)
}

// ---------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------

fn cmd_embed(args: EmbedArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("embed", started);
    let label = args.label.clone().unwrap_or_else(|| {
        args.out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "embedded".to_string())
    });

    let mut geometry = None;
    let set = match args.space {
        SpaceArg::External => {
            if args.inputs.len() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "--space external expects exactly one .fpte input, got {}",
                    args.inputs.len()
                )));
            }
            let path = &args.inputs[0];
            rec.add_input(&fpte::manifest_path(path));
            rec.add_input(path);
            let loaded = fpte::load_set(path)?;
            let tag = loaded.space_tag();
            EmbeddingSet::new(tag, label.clone(), loaded.into_points())?
        }
        SpaceArg::Rgb | SpaceArg::Freq => {
            let files = dataio::expand_png_inputs(&args.inputs)?;
            let mut images = Vec::with_capacity(files.len());
            for f in &files {
                rec.add_input(f);
                images.push(dataio::load_png(f)?);
            }
            geometry = Some((
                images[0].channels() as u32,
                images[0].height() as u32,
                images[0].width() as u32,
            ));
            let tag = match args.space {
                SpaceArg::Rgb => SpaceTag::Rgb,
                _ => SpaceTag::Freq,
            };
            embed_images(&images, tag, label.clone())?
        }
    };

    let set = if args.standardize {
        Standardizer::fit(&set)?.apply(&set)?
    } else {
        set
    };

    fpte::save_set_with_geometry(&args.out, &set, geometry)?;
    rec.add_output(&args.out);
    rec.add_output(&fpte::manifest_path(&args.out));

    let space_name = match args.space {
        SpaceArg::Rgb => "rgb",
        SpaceArg::Freq => "freq",
        SpaceArg::External => "external",
    };
    rec.set_config(
        serde_json::json!({
            "label": label,
            "space": space_name,
            "standardize": args.standardize,
        })
        .to_string(),
    );

    Report::new()
        .text("space_tag", set.space_tag().to_string())
        .text("source_label", set.source_label())
        .int("rows", set.len() as u64)
        .int("dim", set.dim() as u64)
        .emit(None)?;
    rec.write(&manifest_path_for(&args.out, false))
}

// ---------------------------------------------------------------------
// fingerprint
// ---------------------------------------------------------------------

fn cmd_fingerprint(args: FingerprintArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("fingerprint", started);
    for path in [&args.real, &args.generated] {
        rec.add_input(&fpte::manifest_path(path));
        rec.add_input(path);
    }
    let real = fpte::load_set(&args.real)?;
    let generated = fpte::load_set(&args.generated)?;
    let (reference, queries) = if args.swap {
        (generated, real)
    } else {
        (real, generated)
    };
    let index = ManifoldIndex::build(reference, args.block_size)?;
    let fp = compute_fingerprint(&index, &queries)?;
    fp.save(&args.out)?;

    let metrics = sibling(&args.out, ".metrics.json");
    Report::new()
        .num("d_fpt", d_fpt(&fp)?)
        .num(
            &format!("support_coverage@{}", args.eps),
            support_coverage(&fp, args.eps),
        )
        .int("artifacts", fp.len() as u64)
        .int("dim", fp.dim() as u64)
        .emit(Some(&metrics))?;

    rec.add_output(&args.out);
    rec.add_output(&fpte::manifest_path(&args.out));
    rec.add_output(&sibling(&args.out, ".fp.json"));
    rec.add_output(&metrics);
    rec.set_config(
        serde_json::json!({
            "block_size": args.block_size,
            "eps": args.eps,
            "swap": args.swap,
        })
        .to_string(),
    );
    rec.write(&manifest_path_for(&args.out, false))
}

// ---------------------------------------------------------------------
// attribute
// ---------------------------------------------------------------------

/// Optional training configuration file; explicit flags override fields.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    features: Option<FeatureRoute>,
    arch: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    momentum: Option<f64>,
}

fn parse_arch(text: &str) -> Result<Option<usize>> {
    if text == "linear" {
        return Ok(None);
    }
    if text == "mlp" {
        return Ok(Some(256));
    }
    if let Some(width) = text.strip_prefix("mlp:") {
        let width: usize = width.parse().map_err(|_| {
            Error::InvalidConfig(format!("bad hidden width in architecture {text:?}"))
        })?;
        if width == 0 {
            return Err(Error::InvalidConfig(
                "hidden width must be positive".to_string(),
            ));
        }
        return Ok(Some(width));
    }
    Err(Error::InvalidConfig(format!(
        "unknown architecture {text:?}; expected \"linear\" or \"mlp:<width>\""
    )))
}

fn cmd_attribute(args: AttributeArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("attribute", started);
    let file_cfg: TrainFileConfig = match &args.config {
        Some(path) => {
            rec.add_input(path);
            read_json(path)?
        }
        None => TrainFileConfig::default(),
    };
    let features = args
        .features
        .or(file_cfg.features)
        .unwrap_or(FeatureRoute::Artifact);
    let arch_text = args
        .arch
        .clone()
        .or(file_cfg.arch)
        .unwrap_or_else(|| "mlp:256".to_string());
    let hidden = parse_arch(&arch_text)?;
    let seed = args.seed.or(file_cfg.seed).unwrap_or(0);
    let epochs = args.epochs.or(file_cfg.epochs).unwrap_or(100);
    let lr = args.lr.or(file_cfg.lr).unwrap_or(1e-3);
    let batch = args.batch.or(file_cfg.batch).unwrap_or(64);
    let momentum = args.momentum.or(file_cfg.momentum).unwrap_or(0.9);

    let dataset = load_dataset(
        args.scenario.as_deref(),
        args.train_dir.as_deref(),
        features,
        seed,
        &mut rec,
    )?;

    let cfg = TrainConfig {
        hidden,
        learning_rate: lr,
        momentum,
        batch_size: batch,
        epochs,
        seed,
        class_weights: None,
    };
    let model = train(&dataset, &cfg)?;
    model.save(&args.out)?;

    let best_val = model.val_curve.iter().cloned().fold(0.0, f64::max);
    let metrics = sibling(&args.out, ".metrics.json");
    Report::new()
        .text("features", features.name())
        .text("arch", &arch_text)
        .int("classes", dataset.num_classes() as u64)
        .int("rows", dataset.features().rows() as u64)
        .int("parameters", model.architecture.param_count() as u64)
        .int("best_epoch", model.best_epoch as u64)
        .int("epochs_trained", model.epochs_trained as u64)
        .num("best_val_accuracy", best_val)
        .emit(Some(&metrics))?;

    rec.add_output(&args.out);
    rec.add_output(&sibling(&args.out, ".params.fpte"));
    rec.add_output(&metrics);
    rec.set_seed(seed);
    rec.set_config(
        serde_json::json!({
            "arch": arch_text,
            "batch": batch,
            "epochs": epochs,
            "features": features.name(),
            "lr": lr,
            "momentum": momentum,
            "seed": seed,
        })
        .to_string(),
    );
    rec.write(&manifest_path_for(&args.out, false))
}

/// Shared dataset loader of `attribute` and `eval`: exactly one of a
/// scenario directory or a per-class tensor directory.
fn load_dataset(
    scenario: Option<&Path>,
    data_dir: Option<&Path>,
    features: FeatureRoute,
    seed: u64,
    rec: &mut Recorder,
) -> Result<LabeledDataset> {
    match (scenario, data_dir) {
        (Some(dir), None) => {
            let scenario = Scenario::load(dir)?;
            for f in dataio::scenario_files(&scenario, dir) {
                rec.add_input(&f);
            }
            dataio::scenario_dataset(&scenario, features, seed)
        }
        (None, Some(dir)) => {
            let (ds, files) = dataio::dir_dataset(dir, seed)?;
            for f in &files {
                rec.add_input(f);
            }
            Ok(ds)
        }
        _ => Err(Error::InvalidConfig(
            "pass exactly one data source: --scenario or a tensor directory".to_string(),
        )),
    }
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

fn cmd_eval(args: EvalArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("eval", started);
    rec.add_input(&args.model);
    rec.add_input(&sibling(&args.model, ".params.fpte"));
    let model = AttributionModel::load(&args.model)?;
    let seed = args.seed.unwrap_or(model.seed);
    let features = args.features.unwrap_or(FeatureRoute::Artifact);

    let dataset = load_dataset(
        args.scenario.as_deref(),
        args.data_dir.as_deref(),
        features,
        seed,
        &mut rec,
    )?;

    let report = if args.cross {
        let map_path = args.map.as_ref().expect("clap enforces --map with --cross");
        rec.add_input(map_path);
        let map: BTreeMap<String, String> = read_json(map_path)?;
        if map.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "label map {} is empty",
                map_path.display()
            )));
        }
        let cross = cross_evaluate(&model, &dataset, &map)?;
        Report::new()
            .num("accuracy", cross.accuracy)
            .int("mapped", cross.mapped as u64)
            .int("excluded", cross.excluded as u64)
    } else {
        if dataset.label_names() != model.label_names {
            return Err(Error::InvalidConfig(format!(
                "dataset classes {:?} differ from model classes {:?}; use --cross with a label map",
                dataset.label_names(),
                model.label_names
            )));
        }
        let split = match args.split {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        };
        let eval = evaluate(&model, &dataset, split)?;
        let confusion: Vec<Vec<u64>> = eval
            .confusion
            .iter()
            .map(|row| row.iter().map(|&n| n as u64).collect())
            .collect();
        Report::new()
            .text(
                "split",
                match args.split {
                    SplitArg::Train => "train",
                    SplitArg::Val => "val",
                    SplitArg::Test => "test",
                },
            )
            .num("accuracy", eval.accuracy)
            .num_list("per_class_accuracy", eval.per_class_accuracy.clone())
            .text_list("labels", model.label_names.clone())
            .int_grid("confusion", confusion)
            .int("total", eval.total as u64)
    };

    report.emit(args.out.as_deref())?;
    if let Some(out) = &args.out {
        rec.add_output(out);
        rec.set_seed(seed);
        rec.set_config(
            serde_json::json!({
                "cross": args.cross,
                "features": features.name(),
                "seed": seed,
                "split": match args.split {
                    SplitArg::Train => "train",
                    SplitArg::Val => "val",
                    SplitArg::Test => "test",
                },
            })
            .to_string(),
        );
        rec.write(&manifest_path_for(out, false))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------

fn cmd_metrics(command: MetricsCommand, started: Instant) -> Result<()> {
    match command {
        MetricsCommand::Fdr(a) => metrics_fdr(a, started),
        MetricsCommand::Nmi(a) => metrics_nmi(a, started),
        MetricsCommand::Pr(a) => metrics_pr(a, started),
        MetricsCommand::ClusterAlign(a) => metrics_cluster_align(a, started),
        MetricsCommand::Fd(a) => metrics_fd(a, started),
    }
}

fn emit_metric(
    report: Report,
    out: Option<&Path>,
    mut rec: Recorder,
    config: String,
) -> Result<()> {
    report.emit(out)?;
    if let Some(path) = out {
        rec.add_output(path);
        rec.set_config(config);
        rec.write(&manifest_path_for(path, false))?;
    }
    Ok(())
}

fn metrics_fdr(args: FdrArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("metrics fdr", started);
    rec.add_input(&args.features);
    rec.add_input(&args.labels);
    rec.set_seed(args.seed);
    let features = fpte::read_matrix(&args.features)?;
    let labels = dataio::read_labels(&args.labels)?;
    let value = fdr(&features, &labels, args.seed)?;
    let report = Report::new().num("fdr", value);
    emit_metric(
        report,
        args.out.as_deref(),
        rec,
        serde_json::json!({ "seed": args.seed }).to_string(),
    )
}

fn metrics_nmi(args: NmiArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("metrics nmi", started);
    rec.add_input(&args.labels);
    rec.add_input(&args.labels_b);
    let a = Clustering::from_labels(&dataio::read_labels(&args.labels)?)?;
    let b = Clustering::from_labels(&dataio::read_labels(&args.labels_b)?)?;
    let value = nmi(&a, &b)?;
    let report = Report::new().num("nmi", value);
    emit_metric(report, args.out.as_deref(), rec, "{}".to_string())
}

fn metrics_pr(args: PrArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("metrics pr", started);
    rec.add_input(&args.real);
    rec.add_input(&args.generated);
    let real = fpte::read_matrix(&args.real)?;
    let generated = fpte::read_matrix(&args.generated)?;
    let (precision, recall) = knn_precision_recall(&real, &generated, args.k)?;
    let report = Report::new()
        .num("precision", precision)
        .num("recall", recall)
        .int("k", args.k as u64);
    emit_metric(
        report,
        args.out.as_deref(),
        rec,
        serde_json::json!({ "k": args.k }).to_string(),
    )
}

fn metrics_cluster_align(args: ClusterAlignArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("metrics cluster-align", started);
    rec.add_input(&args.features);
    rec.add_input(&args.labels);
    rec.set_seed(args.seed);
    let features = fpte::read_matrix(&args.features)?;
    let reference = Clustering::from_labels(&dataio::read_labels(&args.labels)?)?;
    let value = cluster_alignment(&features, &reference, args.seed)?;
    let report = Report::new()
        .num("cluster_alignment", value)
        .int("k", reference.k() as u64);
    emit_metric(
        report,
        args.out.as_deref(),
        rec,
        serde_json::json!({ "seed": args.seed }).to_string(),
    )
}

fn metrics_fd(args: FdArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("metrics fd", started);
    rec.add_input(&args.features);
    rec.add_input(&args.features_b);
    let a = GaussianSummary::fit(&fpte::read_matrix(&args.features)?)?;
    let b = GaussianSummary::fit(&fpte::read_matrix(&args.features_b)?)?;
    let value = frechet_distance(&a, &b)?;
    let report = Report::new().num("fd", value);
    emit_metric(report, args.out.as_deref(), rec, "{}".to_string())
}

// ---------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------

fn cmd_synth(args: SynthArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("synth", started);
    let cfg = match (&args.config, args.canonical) {
        (Some(path), None) => {
            rec.add_input(path);
            read_json(path)?
        }
        (None, Some(kind)) => {
            let seed = args.seed.unwrap_or(0);
            match kind {
                CanonicalArg::Circle => canonical_circle_config(seed),
                CanonicalArg::Swiss => canonical_swiss_config(seed),
            }
        }
        _ => {
            return Err(Error::InvalidConfig(
                "pass exactly one of --config or --canonical".to_string(),
            ))
        }
    };
    let scenario = build_scenario(&cfg)?;
    scenario.save(&args.out)?;

    let mut rows_total = scenario.real.len();
    let mut sets = 1u64;
    if let Some(h) = &scenario.real_holdout {
        rows_total += h.len();
        sets += 1;
    }
    for (_, set) in &scenario.generators {
        rows_total += set.len();
        sets += 1;
    }
    for f in dataio::scenario_files(&scenario, &args.out) {
        eprintln!("wrote {}", f.display());
        rec.add_output(&f);
    }

    rec.set_seed(cfg.seed);
    rec.set_config(serde_json::to_string(&cfg).expect("config serializes"));
    Report::new()
        .text("name", &scenario.name)
        .int("seed", scenario.seed)
        .int("sets", sets)
        .int("rows", rows_total as u64)
        .emit(None)?;
    rec.write(&manifest_path_for(&args.out, true))
}

// ---------------------------------------------------------------------
// dump
// ---------------------------------------------------------------------

fn cmd_dump(args: DumpArgs, started: Instant) -> Result<()> {
    let mut rec = Recorder::new("dump", started);
    rec.add_input(&args.fingerprint);
    rec.add_input(&sibling(&args.fingerprint, ".fp.json"));
    let fp = Fingerprint::load(&args.fingerprint)?;
    let DumpFormat::Csv = args.format;

    let dest: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(fs::File::create(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?),
        None => Box::new(std::io::stdout()),
    };
    let mut writer = csv::Writer::from_writer(dest);
    let csv_err = |e: csv::Error| Error::Io {
        path: args.out.clone().unwrap_or_else(|| "stdout".into()),
        source: std::io::Error::other(e),
    };

    let dim = fp.dim();
    let mut header = vec![
        "query_id".to_string(),
        "neighbor_id".to_string(),
        "norm".to_string(),
    ];
    header.extend((0..dim).map(|j| format!("v{j}")));
    writer.write_record(&header).map_err(csv_err)?;
    for artifact in &fp.artifacts {
        let norm = artifact
            .vector
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        let mut record = vec![
            artifact.query_id.to_string(),
            artifact.neighbor_id.to_string(),
            crate::report::sig9(norm),
        ];
        record.extend(artifact.vector.iter().map(|v| format!("{v}")));
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::Io {
        path: args.out.clone().unwrap_or_else(|| "stdout".into()),
        source: e,
    })?;
    drop(writer);

    if let Some(out) = &args.out {
        eprintln!("wrote {} rows to {}", fp.len(), out.display());
        rec.add_output(out);
        rec.set_config(serde_json::json!({ "format": "csv" }).to_string());
        rec.write(&manifest_path_for(out, false))?;
    }
    Ok(())
}
