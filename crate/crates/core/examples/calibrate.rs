//! Calibration harness for the canonical scenario constants. Prints the
//! quantities the scenario design has to balance: separability ratios in
//! raw and deviation space (with their intra/inter decomposition),
//! cluster alignment, and attribution accuracy on both feature routes.

use std::collections::BTreeMap;

use fpt_core::attribution::{build_dataset, evaluate, train, Split, TrainConfig};
use fpt_core::fingerprint::{artifact_matrix, compute_fingerprint, Fingerprint};
use fpt_core::index::ManifoldIndex;
use fpt_core::matrix::FeatureMatrix;
use fpt_core::metrics::{cluster_alignment, fdr, Clustering, GaussianSummary};
use fpt_core::synth::{build_scenario, canonical_circle_config, canonical_swiss_config};

fn stack(mats: &[FeatureMatrix]) -> FeatureMatrix {
    let mut it = mats.iter();
    let first = it.next().unwrap().clone();
    it.fold(first, |acc, m| acc.vstack(m).unwrap())
}

fn mean_norm(m: &FeatureMatrix) -> f64 {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .sum::<f64>()
        / m.rows() as f64
}

fn class_decomposition(features: &FeatureMatrix, labels: &[String], tagline: &str) {
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l.as_str()).or_default().push(i);
    }
    let summaries: Vec<(&str, GaussianSummary)> = classes
        .iter()
        .map(|(l, idx)| (*l, GaussianSummary::fit(&features.select_rows(idx)).unwrap()))
        .collect();
    println!("  [{tagline}] per-class trace of covariance:");
    for (l, s) in &summaries {
        let tr: f64 = s.covariance.diagonal().iter().sum();
        println!("    {l:24} trace {tr:.6}");
    }
    println!("  [{tagline}] pairwise mean-distance^2:");
    for i in 0..summaries.len() {
        for j in (i + 1)..summaries.len() {
            let d = (&summaries[i].1.mean - &summaries[j].1.mean).norm_squared();
            println!(
                "    {:24} vs {:24} {d:.6}",
                summaries[i].0, summaries[j].0
            );
        }
    }
}

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(40);

    let mut fdr_ratios = Vec::new();
    let mut acc_gaps = Vec::new();

    for seed in 0..5u64 {
        let cfg = canonical_circle_config(seed);
        let scenario = build_scenario(&cfg).unwrap();
        let index = ManifoldIndex::build(scenario.real.clone(), None).unwrap();

        let holdout0 = scenario.real_holdout.as_ref().unwrap();
        let fp_holdout = compute_fingerprint(&index, holdout0).unwrap();
        let mut raw_mats = vec![holdout0.points().clone()];
        let mut art_mats = vec![artifact_matrix(&fp_holdout).unwrap().0];
        let mut labels: Vec<String> =
            std::iter::repeat(holdout0.source_label().to_string())
                .take(holdout0.len())
                .collect();
        let mut kind_mats: Vec<FeatureMatrix> = Vec::new();
        let mut kind_of: Vec<String> = Vec::new();
        let mut fps: Vec<Fingerprint> = Vec::new();
        for (label, set) in &scenario.generators {
            let fp = compute_fingerprint(&index, set).unwrap();
            let (arts, _) = artifact_matrix(&fp).unwrap();
            if seed == 0 {
                println!(
                    "{label:24} mean |dev| {:.4}",
                    mean_norm(&arts)
                );
            }
            raw_mats.push(set.points().clone());
            art_mats.push(arts.clone());
            labels.extend(std::iter::repeat(label.clone()).take(set.len()));
            kind_mats.push(arts);
            kind_of.extend(std::iter::repeat(
                scenario.hyperparam_labels[label]["kind"].clone(),
            ).take(set.len()));
            fps.push(fp);
        }
        let raw = stack(&raw_mats);
        let art = stack(&art_mats);

        let fdr_raw = fdr(&raw, &labels, seed).unwrap();
        let fdr_art = fdr(&art, &labels, seed).unwrap();
        fdr_ratios.push(fdr_art / fdr_raw);

        // Cluster alignment of deviation features against kind labels.
        let kind_feats = stack(&kind_mats);
        let reference = Clustering::from_labels(&kind_of).unwrap();
        let nmi = cluster_alignment(&kind_feats, &reference, seed).unwrap();

        // Attribution on both routes with an identical protocol.
        let train_cfg = TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let art_ds = build_dataset(&fps, &fp_holdout, seed).unwrap();
        let art_model = train(&art_ds, &train_cfg).unwrap();
        let art_acc = evaluate(&art_model, &art_ds, Split::Test).unwrap().accuracy;

        // Raw route: same split/protocol, features are the raw samples.
        let mut classes = vec![(
            holdout0.source_label().to_string(),
            holdout0.points().clone(),
        )];
        for (label, set) in &scenario.generators {
            classes.push((label.clone(), set.points().clone()));
        }
        let raw_ds =
            fpt_core::attribution::LabeledDataset::from_classes(&classes, seed).unwrap();
        let raw_model = train(&raw_ds, &train_cfg).unwrap();
        let raw_acc = evaluate(&raw_model, &raw_ds, Split::Test).unwrap().accuracy;
        acc_gaps.push((art_acc, raw_acc));

        println!(
            "seed {seed}: fdr_raw {fdr_raw:10.1} fdr_art {fdr_art:10.1} ratio {:6.2}  nmi {nmi:.3}  acc art {art_acc:.3} raw {raw_acc:.3} gap {:+.3}",
            fdr_art / fdr_raw,
            art_acc - raw_acc,
        );
        if seed == 0 {
            class_decomposition(&raw, &labels, "raw");
            class_decomposition(&art, &labels, "dev");
        }
    }
    let worst_ratio = fdr_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_art = acc_gaps.iter().map(|g| g.0).sum::<f64>() / acc_gaps.len() as f64;
    let mean_raw = acc_gaps.iter().map(|g| g.1).sum::<f64>() / acc_gaps.len() as f64;
    println!(
        "worst fdr ratio {worst_ratio:.2}; mean acc art {mean_art:.3} raw {mean_raw:.3} gap {:+.3}",
        mean_art - mean_raw
    );

    // Cross-scenario transfer: train on the circle, evaluate on the roll,
    // on both feature routes with the identical protocol.
    let mut cross_gaps = Vec::new();
    for seed in 0..5u64 {
        let sc_a = build_scenario(&canonical_circle_config(seed)).unwrap();
        let sc_b = build_scenario(&canonical_swiss_config(seed)).unwrap();
        let label_map: BTreeMap<String, String> = sc_a
            .generators
            .iter()
            .map(|(l, _)| (l.clone(), l.clone()))
            .chain(std::iter::once((
                "real_holdout".to_string(),
                "real_holdout".to_string(),
            )))
            .collect();
        let train_cfg = TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        };

        let datasets = |sc: &fpt_core::synth::Scenario| {
            let index = ManifoldIndex::build(sc.real.clone(), None).unwrap();
            let holdout = sc.real_holdout.as_ref().unwrap();
            let fp_real = compute_fingerprint(&index, holdout).unwrap();
            let fps: Vec<Fingerprint> = sc
                .generators
                .iter()
                .map(|(_, set)| compute_fingerprint(&index, set).unwrap())
                .collect();
            let art_ds = build_dataset(&fps, &fp_real, seed).unwrap();
            let mut classes =
                vec![(holdout.source_label().to_string(), holdout.points().clone())];
            for (label, set) in &sc.generators {
                classes.push((label.clone(), set.points().clone()));
            }
            let raw_ds =
                fpt_core::attribution::LabeledDataset::from_classes(&classes, seed).unwrap();
            (art_ds, raw_ds)
        };
        let (art_a, raw_a) = datasets(&sc_a);
        let (art_b, raw_b) = datasets(&sc_b);

        let art_model = train(&art_a, &train_cfg).unwrap();
        let raw_model = train(&raw_a, &train_cfg).unwrap();
        let art_cross =
            fpt_core::attribution::cross_evaluate(&art_model, &art_b, &label_map).unwrap();
        let raw_cross =
            fpt_core::attribution::cross_evaluate(&raw_model, &raw_b, &label_map).unwrap();
        println!(
            "cross seed {seed}: art {:.3} raw {:.3} gap {:+.3}",
            art_cross.accuracy,
            raw_cross.accuracy,
            art_cross.accuracy - raw_cross.accuracy
        );
        cross_gaps.push(art_cross.accuracy - raw_cross.accuracy);
    }
    let mean_cross = cross_gaps.iter().sum::<f64>() / cross_gaps.len() as f64;
    println!("mean cross gap {mean_cross:+.3}");
}
