use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use equivae::data::{
    load_idx, make_semi_split, synth_generate, ClassPool, DatasetSplit, LabelledExample,
    Standardizer,
};
use equivae::eval::{
    compute_cluster_means, evaluate_distance_classifier, export_embeddings, generate_prior_samples,
    interpolate, latent_grid, style_transfer_grid, write_pnm, ClassificationReport, ClusterMeans,
    ImageGrid,
};
use equivae::model::{EquiVae, Likelihood, ModelConfig};
use equivae::nn::ImageShape;
use equivae::rng::{self, Stream};
use equivae::training::{load_checkpoint, save_checkpoint, Checkpoint, Mode, Trainer};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{DatasetConfig, ModeConfig, Probe, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const REPORT_FILE: &str = "report.json";

/// Data of one run, split and preprocessed exactly as training saw it.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub image: ImageShape,
    pub num_classes: usize,
    pub split: DatasetSplit,
}

impl PreparedData {
    pub fn split_named(&self, name: SplitName) -> &[LabelledExample] {
        match name {
            SplitName::Train => &self.split.train_labelled,
            SplitName::Unlabelled => &self.split.train_unlabelled,
            SplitName::Validation => &self.split.validation,
            SplitName::Test => &self.split.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    /// Labelled training examples.
    Train,
    /// Training examples whose labels are hidden in semi-supervised mode.
    Unlabelled,
    Validation,
    Test,
}

fn load_raw(config: &RunConfig) -> Result<(DatasetSplit, ImageShape, usize)> {
    match &config.dataset {
        DatasetConfig::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = config.seed;
            let split = synth_generate(&spec)?;
            let (image, k) = config.shape_hint().expect("synthetic geometry is static");
            Ok((split, image, k))
        }
        DatasetConfig::Idx(idx) => {
            let mut train = load_idx(&idx.train_images, &idx.train_labels, 0)?;
            let mut test = load_idx(&idx.test_images, &idx.test_labels, train.len() as u64)?;
            train.truncate(idx.train_limit.unwrap_or(usize::MAX));
            test.truncate(idx.test_limit.unwrap_or(usize::MAX));
            ensure!(
                idx.validation < train.len(),
                "validation = {} leaves no training data",
                idx.validation
            );
            let validation = train.split_off(train.len() - idx.validation);
            let image = match train.first() {
                Some(e) => {
                    let s = e.image.shape();
                    ImageShape {
                        channels: s[0],
                        height: s[1],
                        width: s[2],
                    }
                }
                None => bail!("training split is empty"),
            };
            let split = DatasetSplit {
                train_labelled: train,
                train_unlabelled: Vec::new(),
                validation,
                test,
            };
            Ok((split, image, idx.num_classes))
        }
    }
}

/// Hides labels in semi-supervised mode and standardises pixels for the
/// Gaussian decoder.
fn preprocess(
    config: &RunConfig,
    model: &ModelConfig,
    mut split: DatasetSplit,
    image: ImageShape,
    num_classes: usize,
) -> Result<PreparedData> {
    if let ModeConfig::Semi { n_labelled } = config.mode {
        let mut semi = make_semi_split(
            &split.train_labelled,
            n_labelled,
            num_classes,
            &mut rng::stream(config.seed, Stream::Data),
        )?;
        semi.validation = std::mem::take(&mut split.validation);
        semi.test = std::mem::take(&mut split.test);
        split = semi;
    }
    if model.likelihood == Likelihood::Gaussian {
        let all: Vec<LabelledExample> = split
            .train_labelled
            .iter()
            .chain(&split.train_unlabelled)
            .cloned()
            .collect();
        let standardizer = Standardizer::fit(&all)?;
        for part in [
            &mut split.train_labelled,
            &mut split.train_unlabelled,
            &mut split.validation,
            &mut split.test,
        ] {
            standardizer.apply(part);
        }
    }
    Ok(PreparedData {
        image,
        num_classes,
        split,
    })
}

/// Validates `config`, then loads and preprocesses its data exactly as
/// training sees it. Returns the resolved model configuration alongside.
pub fn resolve(config: &RunConfig) -> Result<(ModelConfig, PreparedData)> {
    config.validate()?;
    let (split, image, k) = load_raw(config)?;
    let model = config.model_config(image, k)?;
    let data = preprocess(config, &model, split, image, k)?;
    Ok((model, data))
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub timing: PathBuf,
    pub resolved_config: PathBuf,
}

#[derive(Serialize)]
struct TimingRecord {
    epoch: usize,
    wall_time_secs: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Trains a model and writes the checkpoint, the per-epoch metrics log,
/// wall-clock timings and the resolved config into `config.output_dir`.
///
/// The metrics log is written as epochs finish, so a diverged run keeps
/// the records of every finite epoch.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutputs> {
    let (model_config, data) = resolve(config)?;
    let resolved = config.resolved(&model_config)?;
    let resolved_json = serde_json::to_value(&resolved)?;
    info!("resolved config: {resolved_json}");

    let dir = &resolved.output_dir;
    create_dir(dir)?;
    let outputs = TrainOutputs {
        checkpoint: dir.join(CHECKPOINT_FILE),
        metrics: dir.join(METRICS_FILE),
        timing: dir.join(TIMING_FILE),
        resolved_config: dir.join(RESOLVED_CONFIG_FILE),
    };
    write_json(&outputs.resolved_config, &resolved)?;

    let seed = resolved.seed;
    let model = EquiVae::new(&model_config, &mut rng::stream(seed, Stream::Init))?;
    let pool = ClassPool::new(data.split.train_labelled.clone(), data.num_classes)?;
    let mode = match resolved.mode {
        ModeConfig::Supervised => Mode::Supervised,
        ModeConfig::Semi { .. } => Mode::Semi,
    };
    let mut trainer = Trainer::new(
        model,
        resolved.training.clone(),
        mode,
        pool,
        data.split.train_unlabelled.clone(),
        data.split.validation.clone(),
        seed,
        resolved.evaluation.m,
    )?;

    let mut metrics = BufWriter::new(File::create(&outputs.metrics)?);
    let mut timing = BufWriter::new(File::create(&outputs.timing)?);
    trainer.fit(|record| {
        serde_json::to_writer(&mut metrics, record).map_err(std::io::Error::from)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        let t = TimingRecord {
            epoch: record.epoch,
            wall_time_secs: record.wall_time_secs,
        };
        serde_json::to_writer(&mut timing, &t).map_err(std::io::Error::from)?;
        timing.write_all(b"\n")?;
        timing.flush()?;
        Ok(())
    })?;

    let means = compute_cluster_means(
        &trainer.model,
        trainer.pool(),
        resolved.evaluation.m,
        &mut rng::stream(seed, Stream::Eval),
    )?;
    let checkpoint = Checkpoint {
        run_config: portable(&resolved_json),
        class_prior: Some(trainer.prior().clone()),
        cluster_means: Some(means),
        model: trainer.model,
    };
    save_checkpoint(&checkpoint, &outputs.checkpoint)?;
    info!("wrote {}", outputs.checkpoint.display());
    Ok(outputs)
}

/// A checkpoint with the run config that produced it and that run's data.
pub struct LoadedRun {
    pub checkpoint: Checkpoint,
    dir: PathBuf,
    pub config: RunConfig,
    pub data: PreparedData,
}

/// Opens a checkpoint. Without `config`, the run config stored inside it is
/// used. Outputs default to the checkpoint's directory.
pub fn load_run(checkpoint: &Path, config: Option<&RunConfig>) -> Result<LoadedRun> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let config = match config {
        Some(c) => c.clone(),
        None => RunConfig::from_value(ckpt.run_config.clone())
            .context("checkpoint holds no usable run config; pass --config")?,
    };
    let (model_config, data) = resolve(&config)?;
    let stored = ckpt.model.config();
    ensure!(
        stored.image == model_config.image && stored.num_classes == model_config.num_classes,
        "checkpoint expects {} classes of {:?} images, the dataset has {} classes of {:?}",
        stored.num_classes,
        stored.image,
        model_config.num_classes,
        model_config.image
    );
    info!("resolved config: {}", serde_json::to_value(&config)?);
    Ok(LoadedRun {
        checkpoint: ckpt,
        dir: checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
        config,
        data,
    })
}

impl LoadedRun {
    /// Per-class invariant means over the labelled training data. The means
    /// stored at training time are reused when `seed` matches the run.
    pub fn cluster_means(&self, seed: u64) -> Result<ClusterMeans> {
        let m = self.config.evaluation.m;
        if let Some(stored) = &self.checkpoint.cluster_means {
            if seed == self.config.seed && stored.m == m {
                return Ok(stored.clone());
            }
        }
        let pool = ClassPool::with_minimum(
            self.data.split.train_labelled.clone(),
            self.data.num_classes,
            1,
        )?;
        Ok(compute_cluster_means(
            &self.checkpoint.model,
            &pool,
            m,
            &mut rng::stream(seed, Stream::Eval),
        )?)
    }

    /// `out` if given, else the directory holding the checkpoint.
    fn output_dir(&self, out: Option<&Path>) -> PathBuf {
        out.map_or_else(|| self.dir.clone(), Path::to_path_buf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Nearest-mean classification with the single-image invariant embedding.
    pub distance: ClassificationReport,
    /// Classification by `argmax q(y|x)`, when the model has that network.
    pub label_posterior: Option<ClassificationReport>,
}

/// Distance-classifies the test split and writes `report.json`.
pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&RunConfig>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let run = load_run(checkpoint, config)?;
    let test = &run.data.split.test;
    ensure!(
        !test.is_empty(),
        "the test split is empty; nothing to evaluate"
    );
    let means = run.cluster_means(seed.unwrap_or(run.config.seed))?;
    let model = &run.checkpoint.model;
    let distance = evaluate_distance_classifier(model, &means, test)?;
    let label_posterior = match model.label_posterior {
        Some(_) => {
            let mut probs = Vec::new();
            for chunk in test.chunks(256) {
                let images = equivae::data::stack_images(chunk).expect("non-empty chunk");
                probs.extend_from_slice(model.predict_label_posterior(&images)?.data());
            }
            let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
            let probs = equivae::Tensor::new(vec![test.len(), model.num_classes()], probs)?;
            Some(ClassificationReport::from_probs(&labels, &probs)?)
        }
        None => None,
    };
    let report = EvalReport {
        distance,
        label_posterior,
    };
    let dir = run.output_dir(out);
    create_dir(&dir)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    info!(
        "test error {:.4} over {} examples",
        report.distance.error_rate, report.distance.n
    );
    Ok(report)
}

/// Options of the generative probes beyond the config's evaluation section.
#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Class for `interpolate` and `latent-grid`; defaults to 0.
    pub class: Option<usize>,
    /// Seed of the probe stream; defaults to the run seed.
    pub seed: Option<u64>,
}

/// Examples the probes draw from: test, else validation, else training.
fn probe_examples(data: &PreparedData) -> &[LabelledExample] {
    [
        &data.split.test,
        &data.split.validation,
        &data.split.train_labelled,
    ]
    .into_iter()
    .find(|s| !s.is_empty())
    .map_or(&[], |s| s.as_slice())
}

fn run_probe(
    run: &LoadedRun,
    means: &ClusterMeans,
    probe: Probe,
    opts: &GenerateOptions,
) -> Result<ImageGrid> {
    let model = &run.checkpoint.model;
    let eval = &run.config.evaluation;
    let class = opts.class.unwrap_or(0);
    let k = model.num_classes();
    ensure!(class < k, "class {class} out of range for {k} classes");
    let examples = probe_examples(&run.data);
    let grid = match probe {
        Probe::PriorSamples => {
            let seed = opts.seed.unwrap_or(run.config.seed);
            generate_prior_samples(
                model,
                means,
                eval.prior_samples,
                &mut rng::stream(seed, Stream::Probe),
            )?
        }
        Probe::Interpolate => {
            let mut same = examples.iter().filter(|e| e.label == class);
            let (a, b) = same
                .next()
                .zip(same.next())
                .ok_or_else(|| anyhow!("interpolate needs two examples of class {class}"))?;
            interpolate(model, means, a, b, eval.interpolation_steps)?
        }
        Probe::StyleGrid => {
            let picks = (0..k)
                .map(|y| {
                    examples
                        .iter()
                        .find(|e| e.label == y)
                        .ok_or_else(|| anyhow!("style-grid needs an example of class {y}"))
                })
                .collect::<Result<Vec<_>>>()?;
            style_transfer_grid(model, means, &picks)?
        }
        Probe::LatentGrid => {
            latent_grid(model, means, class, eval.grid_range, eval.grid_resolution)?
        }
    };
    Ok(grid)
}

/// Writes one image grid per probe into the output directory. With no
/// probes given, runs the config's probe list.
pub fn cmd_generate(
    checkpoint: &Path,
    config: Option<&RunConfig>,
    probes: &[Probe],
    out: Option<&Path>,
    opts: &GenerateOptions,
) -> Result<Vec<PathBuf>> {
    let run = load_run(checkpoint, config)?;
    let probes = if probes.is_empty() {
        run.config.evaluation.probes.clone()
    } else {
        probes.to_vec()
    };
    ensure!(
        !probes.is_empty(),
        "no probe requested; pass --probe or list probes in evaluation.probes"
    );
    let means = run.cluster_means(run.config.seed)?;
    let dir = run.output_dir(out);
    create_dir(&dir)?;
    let mut written = Vec::new();
    for probe in probes {
        let grid = run_probe(&run, &means, probe, opts)?;
        let ext = if grid.channels() == 3 { "ppm" } else { "pgm" };
        let path = dir.join(format!("{}.{ext}", probe.name()));
        write_pnm(&path, &grid)?;
        info!("wrote {}", path.display());
        written.push(path);
    }
    Ok(written)
}

/// Exports invariant embeddings and posterior means of one split as CSV.
pub fn cmd_embed(
    checkpoint: &Path,
    config: Option<&RunConfig>,
    split: SplitName,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let run = load_run(checkpoint, config)?;
    let means = run.cluster_means(run.config.seed)?;
    let dir = run.output_dir(out);
    create_dir(&dir)?;
    let name = format!("{split:?}").to_lowercase();
    let path = dir.join(format!("embeddings-{name}.csv"));
    export_embeddings(
        &run.checkpoint.model,
        &means,
        run.data.split_named(split),
        &path,
    )?;
    info!("wrote {}", path.display());
    Ok(path)
}

/// Run config without its output location, so that identical runs written
/// to different directories produce identical checkpoints.
fn portable(config: &Value) -> Value {
    let mut v = config.clone();
    if let Some(map) = v.as_object_mut() {
        map.remove("output_dir");
    }
    v
}
