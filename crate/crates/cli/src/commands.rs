//! Command implementations. Every output file lands under the configured
//! output directory and depends only on the inputs, the config and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskfield::attribution::{
    baseline_extremal, compose, extremal_area_search, multi_explain, train_inr, AreaEvaluation, AttributionMask,
    PhiValues, Problem, RbfFilter,
};
use maskfield::eval::{precision, record_from_precisions, threshold_saliency, write_json_lines, EvalRecord};
use maskfield::image::{iou, BinaryMap};
use maskfield::models::{accuracy, gaussian_blur, save_weights, train_toy_cnn, ImagePair};
use maskfield::netpbm;
use maskfield::scene::{generate, load_labeled, read_manifest, write_dataset};
use maskfield::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::input::{read_map, ClassifierSource, Subject};

pub const SUMMARY: &str = "summary.json";
pub const CONFIG_DUMP: &str = "config.txt";

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let dump = config.out.join(CONFIG_DUMP);
    fs::write(&dump, config.dump()).with_context(|| format!("writing {}", dump.display()))
}

fn seed_dir(config: &RunConfig, seed: u64) -> PathBuf {
    config.out.join(format!("seed{seed}"))
}

fn area_stem(area: f64) -> String {
    format!("area_{area}")
}

fn is_divergence(e: &Error) -> bool {
    match e {
        Error::Diverged { .. } => true,
        Error::Iteration { source, .. } => is_divergence(source),
        _ => false,
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Mask-weighted blend of the image and its blurred copy, for viewing.
fn write_overlay(path: &Path, mask: &AttributionMask, original: &ImagePair<f32>, config: &RunConfig) -> Result<()> {
    let blurred = gaussian_blur(original.original(), config.blur_sigma_frac)?;
    let pair = ImagePair::new(original.original().clone(), blurred)?;
    let preview = compose(mask.values(), &pair)?;
    netpbm::write_ppm(path, &preview)?;
    Ok(())
}

fn mask_precision(mask: &AttributionMask, seg: Option<&BinaryMap>) -> Result<Option<f64>> {
    Ok(match seg {
        Some(s) => Some(precision(mask.values(), s, 0.5)?.value),
        None => None,
    })
}

#[derive(Serialize)]
struct Failure {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    iteration: Option<usize>,
    error: String,
}

#[derive(Serialize)]
struct AttributeSeed {
    seed: u64,
    training_seed: u64,
    attempts: usize,
    area: f64,
    insufficient: bool,
    phi_original: f64,
    phi0: f64,
    phi: f64,
    measured_area: f64,
    precision: Option<f64>,
    final_loss: f64,
    table: Vec<AreaEvaluation>,
}

#[derive(Serialize)]
struct AttributeSummary {
    command: &'static str,
    image: String,
    classifier: &'static str,
    class: usize,
    seeds: Vec<AttributeSeed>,
    diverged: Vec<Failure>,
    median_precision: Option<f64>,
}

fn filter_for(subject: &Subject, config: &RunConfig) -> Result<RbfFilter<f32>> {
    let [h, w] = [subject.pair.dims().1, subject.pair.dims().2];
    Ok(config.filter_spec().build(h, w)?)
}

pub fn attribute(image: &Path, source: &ClassifierSource, config: &RunConfig) -> Result<()> {
    config.validate()?;
    let subject = Subject::load(image, source, config)?;
    prepare_out(config)?;
    let problem = Problem::new(&subject.pair, &subject.classifier, subject.class)?;
    let filter = filter_for(&subject, config)?;
    let search = config.search_config();
    let weights = config.loss_weights();
    let mut seeds = Vec::new();
    let mut diverged = Vec::new();
    for &seed in &config.seeds {
        eprintln!("attribute: seed {seed}");
        let trained = match train_inr(&problem, &config.train_config(seed), &weights, &filter, None) {
            Ok(t) => t,
            Err(e) if is_divergence(&e) => {
                eprintln!("seed {seed}: {e}");
                diverged.push(Failure { seed, iteration: None, error: e.to_string() });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let outcome = extremal_area_search(&trained.network, &problem, &search, &filter)?;
        let dir = seed_dir(config, seed);
        let phi_original = outcome.phi_original;
        outcome.mask.save(&dir, "mask", PhiValues { original: phi_original, masked: outcome.phi })?;
        for (mask, row) in outcome.masks.iter().zip(&outcome.table) {
            mask.save(&dir, &area_stem(row.area), PhiValues { original: phi_original, masked: row.phi })?;
        }
        write_overlay(&dir.join("overlay.ppm"), &outcome.mask, &subject.pair, config)?;
        let record = AttributeSeed {
            seed,
            training_seed: trained.seed,
            attempts: trained.attempts,
            area: outcome.area,
            insufficient: outcome.insufficient,
            phi_original,
            phi0: outcome.phi0,
            phi: outcome.phi,
            measured_area: outcome.mask.measured_area(),
            precision: mask_precision(&outcome.mask, subject.segmentation.as_ref())?,
            final_loss: trained.losses.last().copied().unwrap_or(f64::NAN),
            table: outcome.table.clone(),
        };
        write_json(&dir.join(SUMMARY), &record)?;
        seeds.push(record);
    }
    let precisions: Vec<f64> = seeds.iter().filter_map(|s| s.precision).collect();
    let summary = AttributeSummary {
        command: "attribute",
        image: subject.image_path.display().to_string(),
        classifier: subject.classifier.kind(),
        class: subject.class,
        median_precision: median(&precisions),
        seeds,
        diverged,
    };
    write_json(&config.out.join(SUMMARY), &summary)?;
    if summary.seeds.is_empty() {
        bail!("training diverged for every seed");
    }
    Ok(())
}

#[derive(Serialize)]
struct IterationRecord {
    iteration: usize,
    area: f64,
    insufficient: bool,
    phi: f64,
    measured_area: f64,
    precision: Option<f64>,
    /// Precision against each oracle region, in the order given.
    region_precisions: Vec<f64>,
    baseline_dice: Option<f64>,
}

#[derive(Serialize)]
struct MultiSeed {
    seed: u64,
    iterations: Vec<IterationRecord>,
    dice: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct MultiSummary {
    command: &'static str,
    image: String,
    classifier: &'static str,
    class: usize,
    count: usize,
    seeds: Vec<MultiSeed>,
    diverged: Vec<Failure>,
    /// Median over seeds of each iteration's precision.
    median_iteration_precision: Vec<f64>,
}

pub fn multi(image: &Path, source: &ClassifierSource, count: usize, config: &RunConfig) -> Result<()> {
    if count == 0 {
        bail!("the number of explanations must be at least 1");
    }
    config.validate()?;
    let subject = Subject::load(image, source, config)?;
    prepare_out(config)?;
    let problem = Problem::new(&subject.pair, &subject.classifier, subject.class)?;
    let filter = filter_for(&subject, config)?;
    let mut seeds = Vec::new();
    let mut diverged = Vec::new();
    for &seed in &config.seeds {
        eprintln!("multi-explain: seed {seed}");
        let outcome = match multi_explain(
            &problem,
            count,
            &config.train_config(seed),
            &config.loss_weights(),
            &filter,
            &config.search_config(),
        ) {
            Ok(o) => o,
            Err(e) if is_divergence(&e) => {
                eprintln!("seed {seed}: {e}");
                let iteration = match &e {
                    Error::Iteration { iteration, .. } => Some(*iteration),
                    _ => None,
                };
                diverged.push(Failure { seed, iteration, error: e.to_string() });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let dir = seed_dir(config, seed);
        let mut iterations = Vec::new();
        for it in &outcome.iterations {
            let s = &it.search;
            s.mask.save(
                &dir,
                &format!("mask_iter{}", it.iteration),
                PhiValues { original: s.phi_original, masked: s.phi },
            )?;
            iterations.push(IterationRecord {
                iteration: it.iteration,
                area: s.area,
                insufficient: s.insufficient,
                phi: s.phi,
                measured_area: s.mask.measured_area(),
                precision: mask_precision(&s.mask, subject.segmentation.as_ref())?,
                region_precisions: subject
                    .regions
                    .iter()
                    .map(|r| precision(s.mask.values(), r, 0.5).map(|p| p.value))
                    .collect::<maskfield::Result<_>>()?,
                baseline_dice: it.baseline_dice,
            });
        }
        write_json(&dir.join("dice.json"), &outcome.dice)?;
        let record = MultiSeed {
            seed,
            iterations,
            dice: outcome.dice,
        };
        write_json(&dir.join(SUMMARY), &record)?;
        seeds.push(record);
    }
    let median_iteration_precision = (0..count)
        .filter_map(|i| {
            let p: Vec<f64> = seeds.iter().filter_map(|s| s.iterations[i].precision).collect();
            median(&p)
        })
        .collect();
    let summary = MultiSummary {
        command: "multi-explain",
        image: subject.image_path.display().to_string(),
        classifier: subject.classifier.kind(),
        class: subject.class,
        count,
        seeds,
        diverged,
        median_iteration_precision,
    };
    write_json(&config.out.join(SUMMARY), &summary)?;
    if summary.seeds.is_empty() {
        bail!("training diverged for every seed");
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    area: f64,
    inr_measured_area: f64,
    baseline_measured_area: f64,
    inr_phi: f64,
    baseline_phi: f64,
    inr_precision: Option<f64>,
    baseline_precision: Option<f64>,
}

#[derive(Serialize)]
struct CompareSeed {
    seed: u64,
    table: Vec<CompareRow>,
    inr_consecutive_iou: Vec<f64>,
    baseline_consecutive_iou: Vec<f64>,
    inr_mean_iou: f64,
    baseline_mean_iou: f64,
    inr_area_monotone: bool,
}

#[derive(Serialize)]
struct CompareSummary {
    command: &'static str,
    image: String,
    classifier: &'static str,
    class: usize,
    seeds: Vec<CompareSeed>,
    diverged: Vec<Failure>,
    median_inr_iou: Option<f64>,
    median_baseline_iou: Option<f64>,
}

/// IoU of the binarized masks of each consecutive pair.
pub fn consecutive_iou(masks: &[AttributionMask]) -> maskfield::Result<Vec<f64>> {
    let maps = masks
        .iter()
        .map(|m| BinaryMap::from_values(m.values(), 0.5))
        .collect::<maskfield::Result<Vec<_>>>()?;
    maps.windows(2).map(|w| iou(&w[0], &w[1])).collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn compare(image: &Path, source: &ClassifierSource, config: &RunConfig) -> Result<()> {
    config.validate()?;
    let subject = Subject::load(image, source, config)?;
    prepare_out(config)?;
    let problem = Problem::new(&subject.pair, &subject.classifier, subject.class)?;
    let filter = filter_for(&subject, config)?;
    let weights = config.loss_weights();
    let search = config.search_config();
    let seg = subject.segmentation.as_ref();
    let mut seeds = Vec::new();
    let mut diverged = Vec::new();
    for &seed in &config.seeds {
        eprintln!("compare-baseline: seed {seed}");
        let run = (|| -> maskfield::Result<_> {
            let trained = train_inr(&problem, &config.train_config(seed), &weights, &filter, None)?;
            let inr = extremal_area_search(&trained.network, &problem, &search, &filter)?;
            let baseline = search
                .grid
                .iter()
                .map(|&a| baseline_extremal(&problem, a, &config.baseline_config(seed), &weights, &filter))
                .collect::<maskfield::Result<Vec<_>>>()?;
            Ok((inr, baseline))
        })();
        let (inr, baseline) = match run {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                eprintln!("seed {seed}: {e}");
                diverged.push(Failure { seed, iteration: None, error: e.to_string() });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let dir = seed_dir(config, seed);
        let mut table = Vec::new();
        for ((im, bm), row) in inr.masks.iter().zip(&baseline).zip(&inr.table) {
            let baseline_phi = problem.phi_masked(bm.values())?;
            im.save(&dir.join("inr"), &area_stem(row.area), PhiValues { original: inr.phi_original, masked: row.phi })?;
            bm.save(
                &dir.join("baseline"),
                &area_stem(row.area),
                PhiValues { original: inr.phi_original, masked: baseline_phi },
            )?;
            table.push(CompareRow {
                area: row.area,
                inr_measured_area: im.measured_area(),
                baseline_measured_area: bm.measured_area(),
                inr_phi: row.phi,
                baseline_phi,
                inr_precision: mask_precision(im, seg)?,
                baseline_precision: mask_precision(bm, seg)?,
            });
        }
        let inr_iou = consecutive_iou(&inr.masks)?;
        let baseline_iou = consecutive_iou(&baseline)?;
        let record = CompareSeed {
            seed,
            inr_area_monotone: table.windows(2).all(|w| w[0].inr_measured_area <= w[1].inr_measured_area),
            inr_mean_iou: mean(&inr_iou),
            baseline_mean_iou: mean(&baseline_iou),
            inr_consecutive_iou: inr_iou,
            baseline_consecutive_iou: baseline_iou,
            table,
        };
        write_json(&dir.join(SUMMARY), &record)?;
        seeds.push(record);
    }
    let summary = CompareSummary {
        command: "compare-baseline",
        image: subject.image_path.display().to_string(),
        classifier: subject.classifier.kind(),
        class: subject.class,
        median_inr_iou: median(&seeds.iter().map(|s| s.inr_mean_iou).collect::<Vec<_>>()),
        median_baseline_iou: median(&seeds.iter().map(|s| s.baseline_mean_iou).collect::<Vec<_>>()),
        seeds,
        diverged,
    };
    write_json(&config.out.join(SUMMARY), &summary)?;
    if summary.seeds.is_empty() {
        bail!("training diverged for every seed");
    }
    Ok(())
}

pub fn gen_dataset(config: &RunConfig) -> Result<()> {
    let spec = config.dataset_spec(config.seeds.first().copied().unwrap_or(0));
    let scenes = generate(&spec)?;
    prepare_out(config)?;
    let manifest = write_dataset(&config.out, &spec, &scenes)?;
    eprintln!("gen-dataset: wrote {} scenes to {}", manifest.scenes.len(), config.out.display());
    Ok(())
}

/// Every `HOLDOUT_EVERY`-th manifest entry is held out from training.
pub const HOLDOUT_EVERY: usize = 5;

#[derive(Serialize)]
struct ToyReport {
    classes: usize,
    train_count: usize,
    heldout_count: usize,
    train_accuracy: f64,
    heldout_accuracy: f64,
    weights: String,
}

pub fn train_toy(data: &Path, config: &RunConfig) -> Result<()> {
    let manifest = read_manifest(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let labeled = load_labeled(data, &manifest)?;
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, sample) in labeled.into_iter().enumerate() {
        if i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1 {
            heldout.push(sample);
        } else {
            train.push(sample);
        }
    }
    if heldout.is_empty() {
        bail!("dataset too small for a held-out split");
    }
    let seed = config.seeds.first().copied().unwrap_or(0);
    let model = train_toy_cnn(&train, manifest.spec.classes, &config.toy_config(seed))?;
    prepare_out(config)?;
    let weights = config.out.join("toy.weights");
    save_weights(&weights, &model.named_tensors())?;
    let report = ToyReport {
        classes: manifest.spec.classes,
        train_count: train.len(),
        heldout_count: heldout.len(),
        train_accuracy: accuracy(&model, &train)?,
        heldout_accuracy: accuracy(&model, &heldout)?,
        weights: "toy.weights".into(),
    };
    eprintln!("train-toy: held-out accuracy {:.3}", report.heldout_accuracy);
    write_json(&config.out.join("train_report.json"), &report)
}

#[derive(Serialize)]
struct EvalSummary {
    summary: bool,
    images: usize,
    mean_precision: f64,
    hit_rate: f64,
    unmatched_masks: Vec<String>,
    unmatched_segmentations: Vec<String>,
}

fn pgm_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Segmentation files belonging to mask `stem`: `<stem>.pgm` if present,
/// otherwise every per-region file `<stem>.r<k>.pgm`.
fn segmentation_for<'a>(stem: &str, segs: &'a BTreeMap<String, PathBuf>) -> Vec<&'a str> {
    if segs.contains_key(stem) {
        return vec![segs.get_key_value(stem).expect("present").0.as_str()];
    }
    let prefix = format!("{stem}.r");
    segs.keys()
        .filter(|k| k.strip_prefix(&prefix).is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit())))
        .map(String::as_str)
        .collect()
}

pub fn evaluate(masks: &Path, segmentations: &Path, method: &str, config: &RunConfig) -> Result<()> {
    config.validate()?;
    let mask_files = pgm_stems(masks)?;
    let seg_files = pgm_stems(segmentations)?;
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    let mut unmatched_masks = Vec::new();
    for (stem, path) in &mask_files {
        let seg_stems = segmentation_for(stem, &seg_files);
        if seg_stems.is_empty() {
            eprintln!("warning: no segmentation for mask {stem}");
            unmatched_masks.push(stem.clone());
            continue;
        }
        let mut seg: Option<BinaryMap> = None;
        for s in &seg_stems {
            used.insert(s.to_string());
            let m = read_map(&seg_files[*s])?;
            seg = Some(match seg {
                None => m,
                Some(acc) => acc.union(&m)?,
            });
        }
        let seg = seg.expect("at least one segmentation");
        let values = netpbm::read_pgm(path).with_context(|| format!("reading {}", path.display()))?;
        let binary = threshold_saliency(&values, config.cutoff)?.mask;
        let p = maskfield::eval::binary_precision(&binary, &seg)?.value;
        records.push(record_from_precisions(stem, method, &[0], vec![vec![p]]));
    }
    let unmatched_segmentations: Vec<String> = seg_files.keys().filter(|k| !used.contains(*k)).cloned().collect();
    for s in &unmatched_segmentations {
        eprintln!("warning: no mask for segmentation {s}");
    }
    if records.is_empty() {
        bail!("no mask matched a segmentation");
    }
    let precisions: Vec<f64> = records.iter().map(|r| r.precisions[0]).collect();
    let summary = EvalSummary {
        summary: true,
        images: records.len(),
        mean_precision: mean(&precisions),
        hit_rate: maskfield::eval::hit_rate(&precisions)?,
        unmatched_masks,
        unmatched_segmentations,
    };
    prepare_out(config)?;
    let path = config.out.join("report.jsonl");
    let mut buf = Vec::new();
    write_json_lines(&mut buf, &records)?;
    write_json_lines(&mut buf, &[&summary])?;
    fs::write(&path, &buf).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
