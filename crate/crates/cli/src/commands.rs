//! One function per subcommand. Each returns the process exit code on
//! success paths that still need a non-zero status (failed checks).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sonoresnet::data::{
    build_manifest, decode_bmp, load_samples, resize_bilinear, resolve, synth, DatasetManifest, ImageBuffer, Label,
    SampleRecord, Split,
};
use sonoresnet::explain::{gradcam, render_overlay, CamOptions};
use sonoresnet::metrics::{write_scores_csv, DEFAULT_THRESHOLD, FLAG_AUC_UNDEFINED};
use sonoresnet::model::Network;
use sonoresnet::suite::{run_suite, SuiteConfig};
use sonoresnet::tensor::OpKind;
use sonoresnet::train::{run_training, RunOptions};
use sonoresnet::{Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.into(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let samples = synth::write_dataset(&cfg.dataset_root, &cfg.synth)?;
    let subjects: BTreeMap<u32, Label> = samples.iter().map(|s| (s.subject_id, s.label)).collect();
    let positives = subjects.values().filter(|&&l| l == Label::Appendicitis).count();
    println!(
        "wrote {} images of {} subjects ({} positive) to {}",
        samples.len(),
        subjects.len(),
        positives,
        cfg.dataset_root.display()
    );
    Ok(())
}

/// Per-split subject, image and class counts, plus the subject overlap.
pub fn split_summary(m: &DatasetManifest) -> String {
    let mut out = String::new();
    let mut seen: BTreeMap<u32, Split> = BTreeMap::new();
    let mut overlap = 0;
    for r in &m.records {
        if *seen.entry(r.subject_id).or_insert(r.split) != r.split {
            overlap += 1;
        }
    }
    let _ = writeln!(out, "split       subjects  images  positive  negative");
    for split in [Split::Train, Split::Validation, Split::Test] {
        let recs = m.records_in(split);
        let subjects: BTreeMap<u32, Label> = recs.iter().map(|r| (r.subject_id, r.label)).collect();
        let pos = subjects.values().filter(|&&l| l == Label::Appendicitis).count();
        let _ = writeln!(
            out,
            "{:<11} {:>8}  {:>6}  {:>8}  {:>8}",
            split.as_str(),
            subjects.len(),
            recs.len(),
            pos,
            subjects.len() - pos
        );
    }
    let _ = write!(out, "subjects in more than one split: {overlap}");
    out
}

pub fn split(cfg: &RunConfig) -> Result<()> {
    let manifest = build_manifest(&cfg.dataset_root, &cfg.labels_csv, cfg.ratios, cfg.seed)?;
    if let Some(dir) = cfg.manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    manifest.save(&cfg.manifest_path)?;
    println!("{}", split_summary(&manifest));
    println!("manifest written to {}", cfg.manifest_path.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, manifest: &DatasetManifest, split: Split) -> Result<Vec<sonoresnet::data::Sample>> {
    let records = manifest.records_in(split);
    load_samples(&cfg.dataset_root, &records, cfg.network.input_size)
}

pub fn train(cfg: &RunConfig, timestamps: bool) -> Result<()> {
    let manifest = DatasetManifest::load(&cfg.manifest_path)?;
    let train = load_split(cfg, &manifest, Split::Train)?;
    let val = load_split(cfg, &manifest, Split::Validation)?;
    create_dir(&cfg.output_dir)?;
    let resolved = cfg.output_dir.join("config.json");
    std::fs::write(&resolved, cfg.to_json()).map_err(io_err(&resolved))?;
    log::info!("training on {} images, validating on {}", train.len(), val.len());
    let net = Network::build(&cfg.network)?;
    let opts = RunOptions {
        out_dir: Some(cfg.output_dir.clone()),
        timestamps,
        target_val_acc: None,
    };
    let out = run_training(net, &train, &val, &cfg.augment, &cfg.train, &opts)?;
    println!(
        "best epoch {} with validation loss {:.6} ({} epochs run)",
        out.state.best_epoch(),
        out.state.best_val_loss(),
        out.state.history.len()
    );
    println!("best weights: {}", cfg.output_dir.join("best.w").display());
    Ok(())
}

fn load_network(cfg: &RunConfig, weights: Option<&Path>) -> Result<(Network, PathBuf)> {
    let path = weights.map_or_else(|| cfg.output_dir.join("best.w"), Path::to_path_buf);
    let mut net = Network::build(&cfg.network)?;
    net.load_weights(&path)?;
    Ok((net, path))
}

pub fn eval(cfg: &RunConfig, weights: Option<&Path>, split: Split, threshold: Option<f64>) -> Result<()> {
    let (net, _) = load_network(cfg, weights)?;
    let manifest = DatasetManifest::load(&cfg.manifest_path)?;
    let samples = load_split(cfg, &manifest, split)?;
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    create_dir(&cfg.output_dir)?;
    let report_path = cfg.output_dir.join(format!("report_{}.json", split.as_str()));
    let scores_path = cfg.output_dir.join(format!("scores_{}.csv", split.as_str()));
    let (report, scored) = sonoresnet::metrics::evaluate_split(
        &net,
        &samples,
        threshold.unwrap_or(DEFAULT_THRESHOLD),
        cfg.train.batch_size,
        &report_path,
    )?;
    write_scores_csv(&scores_path, &scored)?;
    for flag in &report.flags {
        if flag == FLAG_AUC_UNDEFINED {
            log::warn!("{} split has a single class; AUC is undefined", split.as_str());
        } else {
            log::warn!("{flag}");
        }
    }
    println!("{}", report.headline());
    println!("report: {}", report_path.display());
    Ok(())
}

/// Parses `<subject>.<view>`.
pub fn parse_sample_ref(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("sample `{s}` is not <subject>.<view>"));
    let (a, b) = s.split_once('.').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

pub struct CamArgs<'a> {
    pub weights: Option<&'a Path>,
    pub samples: &'a [String],
    pub split: Option<Split>,
    pub layer: Option<String>,
    pub negate: bool,
}

pub fn gradcam_cmd(cfg: &RunConfig, args: &CamArgs) -> Result<()> {
    let (net, _) = load_network(cfg, args.weights)?;
    let manifest = DatasetManifest::load(&cfg.manifest_path)?;
    let mut records: Vec<&SampleRecord> = Vec::new();
    for s in args.samples {
        let (subject, view) = parse_sample_ref(s)?;
        let r = manifest
            .records
            .iter()
            .find(|r| r.subject_id == subject && r.view_index == view)
            .ok_or_else(|| Error::Config(format!("sample {subject}.{view} is not in the manifest")))?;
        records.push(r);
    }
    if let Some(split) = args.split {
        records.extend(manifest.records_in(split));
    }
    if records.is_empty() {
        return Err(Error::Config("no samples given (use --sample or --split)".into()));
    }
    let size = cfg.network.input_size;
    let samples = load_samples(&cfg.dataset_root, &records, size)?;
    let out_dir = cfg.output_dir.join("gradcam");
    let written = records
        .par_iter()
        .zip(&samples)
        .map(|(r, sample)| {
            let opts = CamOptions {
                target_layer: args.layer.clone(),
                negate: args.negate,
                input_ref: Some((r.subject_id, r.view_index)),
            };
            let hm = gradcam(&net, &sample.input, &opts)?;
            let img = decode_bmp(&resolve(&cfg.dataset_root, r))?;
            let gray = ImageBuffer::new(size, size, resize_bilinear(img.data(), img.height(), img.width(), size, size))?;
            render_overlay(&hm, &gray, &out_dir)?;
            Ok((r.subject_id, r.view_index, hm.predicted_score, hm.source_layer))
        })
        .collect::<Result<Vec<_>>>()?;
    for (s, v, score, layer) in &written {
        println!("{s}.{v}: score {score:.6}, layer {layer}");
    }
    println!("{} heatmaps written to {}", written.len(), out_dir.display());
    Ok(())
}

/// Prints the check table; returns whether every row passed.
pub fn gradcheck(seeds: u64, fault: Option<&str>) -> Result<bool> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?),
    };
    let cfg = SuiteConfig {
        seeds: (0..seeds).collect(),
        fault,
        ..Default::default()
    };
    let rows = run_suite(&cfg)?;
    println!("{:<28} {:>14}  result", "case", "max rel error");
    for r in &rows {
        println!(
            "{:<28} {:>14.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} cases within {:e}", rows.len(), cfg.tolerance);
    } else {
        println!("failed: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}
