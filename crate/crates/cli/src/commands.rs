use std::collections::HashMap;
use std::path::{Path, PathBuf};

use advdet::advgen::{load_checkpoint, save_checkpoint, train_generator, CheckpointManifest, TrainOptions, UeaGenerator};
use advdet::dag::{dag_attack, dag_attack_all};
use advdet::detector::{train_detector_pair, Detector};
use advdet::eval::{evaluate_attack, timing_benchmark, ComparisonRow, ComparisonTable, EvalReport};
use advdet::losses::LossWeights;
use advdet::pipeline::{
    generate_synthetic_dataset, load_detector_pair, load_frames, load_image, load_voc_style, save_detector_pair,
    save_image, synthetic_video, write_frames, write_results, write_voc_style, RunConfig, DEFAULT_FPS,
    IMAGE_EXTENSIONS,
};
use advdet::{FrameSequence, Image, LabeledImage};
use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};

use crate::{Cli, Command, DataArgs, InputKind, Method};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
    }
    match cli.command {
        Command::MakeSynthetic { out, video_frames } => make_synthetic(&config, &out, video_frames),
        Command::TrainDetector { data, out } => train_detectors(&config, &data, &out),
        Command::TrainGenerator {
            data,
            detectors,
            out,
            no_feature_loss,
            weights,
            epochs,
        } => {
            let mut weights = match weights {
                Some(spec) => parse_weights(&spec, &config.weights)?,
                None => config.weights.clone(),
            };
            if no_feature_loss {
                weights = weights.without_feature_loss();
            }
            if let Some(e) = epochs {
                config.generator.epochs = e;
            }
            train_uea(&config, &data, &detectors, &out, &weights)
        }
        Command::Attack {
            method,
            input,
            path,
            out,
            generator,
            detectors,
        } => attack(&config, method, input, &path, &out, generator.as_deref(), detectors.as_deref()),
        Command::Eval {
            data,
            detectors,
            adversarial,
            generator,
            dag,
            results,
        } => {
            let results = results.unwrap_or_else(|| config.output_dir.join("results.jsonl"));
            eval(&config, &data, &detectors, adversarial.as_deref(), generator.as_deref(), dag, &results)
        }
        Command::Bench {
            data,
            detectors,
            generator,
            images,
            warmup,
        } => bench(&config, &data, &detectors, generator.as_deref(), images, warmup),
    }
}

/// Parses `alpha=..,beta=..,epsilon=a:b` on top of `base`.
pub fn parse_weights(spec: &str, base: &LossWeights) -> Result<LossWeights> {
    let mut weights = base.clone();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .with_context(|| format!("weight override `{item}` is not KEY=VALUE"))?;
        let number = |v: &str| v.trim().parse::<f64>().with_context(|| format!("bad number `{v}` for {key}"));
        match key.trim() {
            "alpha" => weights.alpha = number(value)?,
            "beta" => weights.beta = number(value)?,
            "epsilon" => weights.epsilon = value.split(':').map(number).collect::<Result<_>>()?,
            other => bail!("unknown loss weight `{other}` (expected alpha, beta or epsilon)"),
        }
    }
    weights.validate()?;
    Ok(weights)
}

enum Split {
    Train,
    Test,
}

fn load_split(config: &RunConfig, data: &DataArgs, split: Split) -> Result<Vec<LabeledImage>> {
    let root = data.data.as_ref().or(config.data.root.as_ref());
    let samples = match root {
        Some(root) => {
            let name = match split {
                Split::Train => &config.data.train_split,
                Split::Test => &config.data.test_split,
            };
            let report = load_voc_style(root, name, config.data.classes.as_deref())
                .with_context(|| format!("loading split `{name}` from {}", root.display()))?;
            for issue in &report.issues {
                warn!("skipping {}: {}", issue.id, issue.message);
            }
            ensure!(
                report.manifest.classes.len() == config.detector.num_classes,
                "dataset has {} classes but the detector config expects {}",
                report.manifest.classes.len(),
                config.detector.num_classes
            );
            report.manifest.load_images()?
        }
        None => {
            let synthetic = match split {
                Split::Train => config.synthetic.clone(),
                Split::Test => config.synthetic_test(),
            };
            generate_synthetic_dataset(&synthetic, config.execution)?.samples
        }
    };
    ensure!(!samples.is_empty(), "dataset split is empty");
    Ok(samples)
}

fn make_synthetic(config: &RunConfig, out: &Path, video_frames: Option<usize>) -> Result<()> {
    let classes = config.synthetic.class_names();
    let train = generate_synthetic_dataset(&config.synthetic, config.execution)?;
    write_voc_style(out, &config.data.train_split, &classes, &train.samples)?;
    let test = generate_synthetic_dataset(&config.synthetic_test(), config.execution)?;
    write_voc_style(out, &config.data.test_split, &classes, &test.samples)?;
    println!(
        "wrote {} train and {} test images to {}",
        train.samples.len(),
        test.samples.len(),
        out.display()
    );
    if let Some(n) = video_frames {
        ensure!(n > 0, "--video-frames must be positive");
        let (sequence, truth) = synthetic_video(&config.synthetic, n, DEFAULT_FPS)?;
        let video = out.join("video");
        let labeled: Vec<LabeledImage> = sequence
            .frames()
            .iter()
            .zip(truth)
            .map(|(image, objects)| LabeledImage {
                image: image.clone(),
                objects,
            })
            .collect();
        write_voc_style(&video, "frames", &classes, &labeled)?;
        write_frames(&sequence, &video.join("JPEGImages"))?;
        println!("wrote {n} frames to {}", video.display());
    }
    Ok(())
}

fn train_detectors(config: &RunConfig, data: &DataArgs, out: &Path) -> Result<()> {
    let train = load_split(config, data, Split::Train)?;
    let held_out = load_split(config, data, Split::Test)?;
    info!("training detectors on {} images", train.len());
    let (proposal, regression, summaries) =
        train_detector_pair(&train, &held_out, &config.detector, &config.detector_training)?;
    save_detector_pair(out, &proposal, &regression)?;
    config.save(&out.join("run.yaml"))?;
    for s in summaries {
        println!(
            "{}: held-out mAP {:.4} after {} epochs",
            s.family.name(),
            s.held_out_map,
            s.history.len()
        );
    }
    println!("saved detectors to {}", out.display());
    Ok(())
}

fn train_uea(config: &RunConfig, data: &DataArgs, detectors: &Path, out: &Path, weights: &LossWeights) -> Result<()> {
    let (proposal, _) = load_detector_pair(detectors).context("loading detectors")?;
    let train = load_split(config, data, Split::Train)?;
    let options = TrainOptions {
        checkpoint_dir: Some(out.join("checkpoints")),
        log_path: Some(out.join("train_log.jsonl")),
    };
    let trained = train_generator(&proposal, &train, weights, &config.generator, &options)?;
    let manifest = CheckpointManifest {
        epoch: config.generator.epochs,
        config: config.generator.clone(),
        weights: weights.clone(),
        target_seed: trained.targets.seed(),
    };
    save_checkpoint(
        out,
        &manifest,
        trained.generator.params(),
        &trained.discriminator,
        &trained.targets,
    )?;
    if let Some(last) = trained.log.last() {
        println!("final step {}: total loss {:.4}", last.step, last.report.total);
    }
    println!("saved generator to {}", out.display());
    Ok(())
}

fn images_in(path: &Path) -> Result<Vec<Image>> {
    if path.is_file() {
        return Ok(vec![load_image(path)?]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no images in {}", path.display());
    paths.iter().map(|p| Ok(load_image(p)?)).collect()
}

fn load_generator(config: &RunConfig, path: Option<&Path>) -> Result<UeaGenerator> {
    Ok(match path {
        Some(dir) => {
            load_checkpoint(dir)
                .with_context(|| format!("loading generator {}", dir.display()))?
                .generator
        }
        None => UeaGenerator::initialized(&config.generator)?,
    })
}

fn attack(
    config: &RunConfig,
    method: Method,
    input: InputKind,
    path: &Path,
    out: &Path,
    generator: Option<&Path>,
    detectors: Option<&Path>,
) -> Result<()> {
    let frames = match input {
        InputKind::Image => None,
        InputKind::Frames => Some(load_frames(path)?),
    };
    let images = match &frames {
        Some(seq) => seq.frames().to_vec(),
        None => images_in(path)?,
    };
    let artifacts = match method {
        Method::Uea => {
            let dir = generator.context("--method uea needs --generator")?;
            let generator = load_generator(config, Some(dir))?;
            match &frames {
                Some(seq) => {
                    let video = generator.generate_video(seq)?;
                    println!(
                        "{} frames in {:.4}s ({:.1} fps)",
                        seq.len(),
                        video.total_seconds,
                        seq.len() as f64 / video.total_seconds
                    );
                    video.per_frame
                }
                None => images.iter().map(|i| generator.generate(i)).collect::<advdet::Result<_>>()?,
            }
        }
        Method::Dag => {
            let dir = detectors.context("--method dag needs --detectors")?;
            let (victim, _) = load_detector_pair(dir)?;
            let outcomes = images
                .iter()
                .map(|i| dag_attack(&victim, i, None, &config.dag))
                .collect::<advdet::Result<Vec<_>>>()?;
            for (img, o) in images.iter().zip(&outcomes) {
                info!("{}: {} iterations, {} proposals left", img.id(), o.iterations, o.active_at_end);
            }
            outcomes.into_iter().map(|o| o.artifacts).collect()
        }
    };
    for (img, a) in images.iter().zip(&artifacts) {
        println!(
            "{}\t{:.4}s\tL2 {:.5}\tLinf {:.4}",
            img.id(),
            a.seconds,
            a.perceptibility.mean_l2,
            a.perceptibility.linf
        );
    }
    let count = artifacts.len();
    match frames {
        Some(seq) => {
            let adv = FrameSequence::new(artifacts.into_iter().map(|a| a.adversarial).collect(), seq.fps())?;
            write_frames(&adv, out)?;
        }
        None => {
            for a in &artifacts {
                save_image(&a.adversarial, &out.join(format!("{}.png", a.adversarial.id())))?;
            }
        }
    }
    println!("wrote {count} adversarial images to {}", out.display());
    Ok(())
}

fn read_adversarial(dir: &Path, clean: &[LabeledImage]) -> Result<Vec<Image>> {
    clean
        .iter()
        .map(|s| {
            let id = s.image.id();
            let path = IMAGE_EXTENSIONS
                .iter()
                .map(|ext| dir.join(format!("{id}.{ext}")))
                .find(|p| p.exists())
                .with_context(|| format!("no adversarial image for `{id}` in {}", dir.display()))?;
            Ok(load_image(&path)?.with_id(id))
        })
        .collect()
}

fn eval(
    config: &RunConfig,
    data: &DataArgs,
    detectors: &Path,
    adversarial: Option<&Path>,
    generator: Option<&Path>,
    dag: bool,
    results: &Path,
) -> Result<()> {
    ensure!(
        adversarial.is_some() || generator.is_some() || dag,
        "nothing to evaluate: pass --adversarial, --generator or --dag"
    );
    let (proposal, regression) = load_detector_pair(detectors)?;
    let test = load_split(config, data, Split::Test)?;
    let clean: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();

    let mut attacks: Vec<(String, Vec<Image>, Option<Vec<f64>>)> = Vec::new();
    if let Some(dir) = adversarial {
        attacks.push((format!("precomputed ({})", dir.display()), read_adversarial(dir, &test)?, None));
    }
    if let Some(dir) = generator {
        let generator = load_generator(config, Some(dir))?;
        let out = generator.generate_all(&clean, config.execution)?;
        let seconds = out.iter().map(|a| a.seconds).collect();
        attacks.push(("uea".into(), out.into_iter().map(|a| a.adversarial).collect(), Some(seconds)));
    }
    if dag {
        let objects: Vec<_> = test.iter().map(|s| s.objects.clone()).collect();
        let out = dag_attack_all(&proposal, &clean, Some(&objects), &config.dag, config.execution)?;
        let seconds = out.iter().map(|o| o.artifacts.seconds).collect();
        attacks.push(("dag".into(), out.into_iter().map(|o| o.artifacts.adversarial).collect(), Some(seconds)));
    }

    let victims = [&proposal, &regression];
    let mut table = ComparisonTable {
        victims: victims.iter().map(|d| d.family().name().to_string()).collect(),
        rows: Vec::new(),
    };
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (name, adv, seconds) in &attacks {
        let per_victim = victims
            .iter()
            .map(|d| evaluate_attack(d, &test, adv, seconds.as_deref(), &config.eval))
            .collect::<advdet::Result<Vec<_>>>()?;
        if table.rows.is_empty() {
            table.rows.push(ComparisonRow {
                label: "clean".into(),
                maps: per_victim.iter().map(|r| r.clean_map).collect(),
                seconds: None,
            });
        }
        table.rows.push(ComparisonRow {
            label: name.clone(),
            maps: per_victim.iter().map(|r| r.map).collect(),
            seconds: per_victim[0].mean_attack_seconds,
        });
        for r in per_victim {
            println!("{name} on {}: mAP drop {:.4}", r.detector.name(), r.map_drop);
            reports.push((name.clone(), r));
        }
    }
    print!("{table}");
    let refs: Vec<(&str, &EvalReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_results(results, &refs)?;
    println!("results written to {}", results.display());
    Ok(())
}

fn bench(
    config: &RunConfig,
    data: &DataArgs,
    detectors: &Path,
    generator: Option<&Path>,
    count: usize,
    warmup: usize,
) -> Result<()> {
    let (proposal, _): (Detector, Detector) = load_detector_pair(detectors)?;
    let generator = load_generator(config, generator)?;
    let test = load_split(config, data, Split::Test)?;
    ensure!(test.len() >= count, "only {} test images, asked for {count}", test.len());
    let test = &test[..count];
    let images: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
    let objects: HashMap<&str, &[advdet::GroundTruthObject]> =
        test.iter().map(|s| (s.image.id(), s.objects.as_slice())).collect();

    let uea = timing_benchmark(|img| generator.generate(img), &images, warmup)?;
    let dag = timing_benchmark(
        |img| dag_attack(&proposal, img, objects.get(img.id()).copied(), &config.dag),
        &images,
        warmup,
    )?;
    println!("{:<6} | {:>12} | {:>12} | {:>12}", "method", "mean (s)", "median (s)", "stddev (s)");
    println!("{}", "-".repeat(51));
    for (name, s) in [("UEA", &uea), ("DAG", &dag)] {
        println!("{name:<6} | {:>12.6} | {:>12.6} | {:>12.6}", s.mean, s.median, s.stddev);
    }
    let ratio = if uea.mean > 0.0 { dag.mean / uea.mean } else { f64::INFINITY };
    println!("DAG / UEA mean time ratio: {ratio:.1}");
    println!(
        "({} images, {warmup} warmup; DAG at most {} iterations, detector passes included)",
        images.len(),
        config.dag.max_iterations
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_overrides() {
        let base = LossWeights::default();
        let w = parse_weights("alpha=0.5, epsilon=1:2", &base).unwrap();
        assert_eq!(w.alpha, 0.5);
        assert_eq!(w.beta, base.beta);
        assert_eq!(w.epsilon, vec![1.0, 2.0]);
        assert_eq!(parse_weights("", &base).unwrap(), base);
        assert!(parse_weights("gamma=1", &base).is_err());
        assert!(parse_weights("alpha", &base).is_err());
        assert!(parse_weights("alpha=x", &base).is_err());
        assert!(parse_weights("alpha=-1", &base).is_err());
    }
}
