use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use patchace_core::pipeline::{
    build_signature, evaluate, fit_model, score_split, FeatureArchive, ScoredSplit,
};
use patchace_core::synth::{build_dataset, Split};
use patchace_core::{
    aggregate_runs, toy_extract, Archive, Dataset, Detector, ModelBundle, SceneParams, SplitConfig,
};
use rayon::prelude::*;

use crate::config::{ConfigArgs, RunConfig};
use crate::{CmdResult, Failure};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset archive.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub n_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub n_anomalous: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Speckle looks L of the Gamma(L, 1/L) background.
    #[arg(long, default_value_t = 4)]
    pub looks: u32,
    /// Targets per anomalous image.
    #[arg(long, default_value_t = 1)]
    pub targets: usize,
    /// Intensity multiplier inside targets.
    #[arg(long, default_value_t = 5.0)]
    pub contrast: f64,
    #[arg(long, default_value_t = 3.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 8.0)]
    pub radius_max: f64,
    /// Percentage of normal images used for training.
    #[arg(long, default_value_t = 80)]
    pub train_percent: u32,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let params = SceneParams {
        height: a.height,
        width: a.width,
        speckle_looks: a.looks,
        target_count: a.targets,
        target_contrast: a.contrast,
        target_radii: (a.radius_min, a.radius_max),
        seed: a.seed,
    };
    params
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if a.n_normal < 5 || a.n_anomalous < 2 {
        return Err(Failure::Usage(
            "need --n-normal ≥ 5 and --n-anomalous ≥ 2".into(),
        ));
    }
    if a.train_percent > 100 {
        return Err(Failure::Usage("--train-percent must be at most 100".into()));
    }
    let cfg = SplitConfig {
        train_percent: a.train_percent,
    };
    let (archive, manifest) = build_dataset(&params, a.n_normal, a.n_anomalous, cfg)?;
    archive.save(&a.out)?;
    let count = |s: Split, label: u8| {
        manifest
            .split(s)
            .iter()
            .filter(|e| e.label == label)
            .count()
    };
    println!(
        "wrote {} images to {}: train {} normal; val {} normal + {} anomalous; test {} normal + {} anomalous",
        a.n_normal + a.n_anomalous,
        a.out.display(),
        count(Split::Train, 0),
        count(Split::Val, 0),
        count(Split::Val, 1),
        count(Split::Test, 0),
        count(Split::Test, 1),
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output feature archive.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
}

pub fn extract(a: ExtractArgs) -> CmdResult {
    let dataset = load_dataset(&a.data)?;
    let m = &dataset.manifest;
    let entries: Vec<_> = m.train.iter().chain(&m.val).chain(&m.test).collect();
    let pyramids = entries
        .par_iter()
        .map(|e| toy_extract(dataset.image(e)?, a.extractor_seed))
        .collect::<patchace_core::Result<Vec<_>>>()?;
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    FeatureArchive::from_pyramids(&ids, &pyramids)?
        .archive()
        .save(&a.out)?;
    println!(
        "wrote features for {} images to {}",
        ids.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pre-extracted feature archive; the toy extractor is used otherwise.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output model bundle.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn fit(a: FitArgs) -> CmdResult {
    let rc = a.config.resolve()?;
    let dataset = load_dataset(&a.data)?;
    let features = load_features(a.features.as_deref())?;
    let bundle = fit_model(&dataset, features.as_ref(), &rc.pipeline)?;
    bundle.save(&a.out)?;
    let m = &bundle.manifest;
    println!(
        "fitted {} {} model on {} images, grid {}×{}, d={}, wrote {}",
        m.cov_type,
        m.aggregation,
        m.sample_count,
        m.grid[0],
        m.grid[1],
        m.d,
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SignatureArgs {
    /// Bundle to update in place.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Split whose anomalous images form the signature.
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn signature(a: SignatureArgs) -> CmdResult {
    let rc = a.config.resolve()?;
    let bundle = ModelBundle::load(&a.bundle)?;
    let dataset = load_dataset(&a.data)?;
    let features = load_features(a.features.as_deref())?;
    let p = &rc.pipeline;
    let bundle = build_signature(
        bundle,
        &dataset,
        features.as_ref(),
        a.split,
        p.signature_mode,
        p.signature_masks,
    )?;
    bundle.save(&a.bundle)?;
    println!(
        "{} signature from {} patch vectors, wrote {}",
        p.signature_mode,
        bundle.manifest.signature_source_count.unwrap_or(0),
        a.bundle.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Output results archive.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each anomaly map as a PGM image, stretched over the split.
    #[arg(long, value_name = "DIR")]
    pub pgm_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn score(a: ScoreArgs) -> CmdResult {
    let rc = a.config.resolve()?;
    let bundle = ModelBundle::load(&a.bundle)?;
    let detector = rc.pipeline.detector;
    if detector == Detector::Ace && bundle.signature.is_none() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "bundle {} has no target signature; run `patchace signature --bundle {} --data <DATA>` first or use --detector mahalanobis",
            a.bundle.display(),
            a.bundle.display()
        )));
    }
    let dataset = load_dataset(&a.data)?;
    let features = load_features(a.features.as_deref())?;
    let results = score_split(
        &bundle,
        &dataset,
        features.as_ref(),
        a.split,
        detector,
        rc.pipeline.sigma,
    )?;
    results.to_archive()?.save(&a.out)?;
    if let Some(dir) = &a.pgm_dir {
        write_pgms(&results, dir)?;
    }
    println!(
        "scored {} images with {detector}, wrote {}",
        results.ids.len(),
        a.out.display()
    );
    Ok(())
}

fn write_pgms(results: &ScoredSplit, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let all = results.maps.iter().flat_map(|m| m.pixels().iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    for (id, map) in results.ids.iter().zip(&results.maps) {
        let path = dir.join(format!("{id}.pgm"));
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        map.write_pgm(&mut BufWriter::new(file), lo, hi)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Results archive from `score`. Without it the full pipeline runs once
    /// per seed.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep each run's bundle and results here.
    #[arg(long, value_name = "DIR", conflicts_with = "results")]
    pub work_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let rc = a.config.resolve()?;
    let dataset = load_dataset(&a.data)?;
    let report = match &a.results {
        Some(path) => {
            let results = ScoredSplit::from_archive(&Archive::load(path)?)?;
            let run = evaluate(&results, &dataset, rc.pipeline.seed)?;
            let config = serde_json::json!({
                "detector": results.detector,
                "sigma": results.sigma,
                "seed": rc.pipeline.seed,
            });
            aggregate_runs(&[run])?.with_config(config)
        }
        None => {
            let features = load_features(a.features.as_deref())?;
            let runs = rc
                .seeds
                .iter()
                .map(|&seed| {
                    run_seed(
                        &rc,
                        seed,
                        &dataset,
                        features.as_ref(),
                        a.work_dir.as_deref(),
                    )
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            aggregate_runs(&runs)?.with_config(rc.to_json())
        }
    };
    write_atomic(&a.out, report.to_json()?.as_bytes())?;
    for r in &report.runs {
        println!(
            "seed {}: {}",
            r.seed,
            metric_line(r.image_auroc, r.pixel_auroc)
        );
    }
    println!(
        "mean±std over {} run(s): image AUROC {:.2}±{:.2}{}",
        report.runs.len(),
        100.0 * report.mean.image_auroc,
        100.0 * report.std.image_auroc,
        match (report.mean.pixel_auroc, report.std.pixel_auroc) {
            (Some(m), Some(s)) => format!(", pixel AUROC {:.2}±{:.2}", 100.0 * m, 100.0 * s),
            _ => String::new(),
        }
    );
    Ok(())
}

fn metric_line(image: f64, pixel: Option<f64>) -> String {
    match pixel {
        Some(p) => format!(
            "image AUROC {:.2}, pixel AUROC {:.2}",
            100.0 * image,
            100.0 * p
        ),
        None => format!("image AUROC {:.2}", 100.0 * image),
    }
}

fn run_seed(
    rc: &RunConfig,
    seed: u64,
    dataset: &Dataset,
    features: Option<&FeatureArchive>,
    work_dir: Option<&Path>,
) -> anyhow::Result<patchace_core::RunMetrics> {
    let cfg = patchace_core::PipelineConfig {
        seed,
        ..rc.pipeline
    };
    let mut bundle =
        fit_model(dataset, features, &cfg).with_context(|| format!("fit, seed {seed}"))?;
    if cfg.detector == Detector::Ace {
        bundle = build_signature(
            bundle,
            dataset,
            features,
            Split::Val,
            cfg.signature_mode,
            cfg.signature_masks,
        )
        .with_context(|| format!("signature, seed {seed}"))?;
    }
    let results = score_split(
        &bundle,
        dataset,
        features,
        Split::Test,
        cfg.detector,
        cfg.sigma,
    )
    .with_context(|| format!("score, seed {seed}"))?;
    if let Some(dir) = work_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        bundle.save(dir.join(format!("bundle-seed{seed}.npz")))?;
        results
            .to_archive()?
            .save(dir.join(format!("results-seed{seed}.npz")))?;
    }
    evaluate(&results, dataset, seed).with_context(|| format!("eval, seed {seed}"))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_features(path: Option<&Path>) -> anyhow::Result<Option<FeatureArchive>> {
    path.map(|p| {
        Archive::load(p)
            .and_then(FeatureArchive::new)
            .with_context(|| format!("loading features {}", p.display()))
    })
    .transpose()
}
