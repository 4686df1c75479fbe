use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::RgbImage;
use nhi_core::embedding::{self, EmbeddingStore};
use nhi_core::ensemble::{self, Distribution, PredictionRecord, Strategy, TaskOutputs};
use nhi_core::fsutil::write_atomic;
use nhi_core::heatmap::{self, HeatmapMode};
use nhi_core::mil::{self, BagView, MilModel};
use nhi_core::par::Exec;
use nhi_core::preprocess::{self, ProfileName, TilingProfile};
use nhi_core::synthetic;
use nhi_core::training::{self, Split, SplitAssignment};
use nhi_core::{EmbeddingBag, Error, NhiGrade, TaskKind};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::manifest::{self, RunManifest, SlideManifest, Table, TILES_HEADER};

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Invalid(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(run: &mut RunManifest, path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)?;
    run.output(path)
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
    Ok(img.to_rgb8())
}

fn save_png(run: &mut RunManifest, path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    write(run, path, buf.get_ref())
}

fn save_store(run: &mut RunManifest, store: &EmbeddingStore, manifest: &Path) -> Result<()> {
    store.save(manifest)?;
    let (payload, table) = embedding::store_paths(manifest);
    for p in [manifest, payload.as_path(), table.as_path()] {
        run.output(p)?;
    }
    Ok(())
}

fn load_store(run: &mut RunManifest, manifest: &Path) -> Result<EmbeddingStore> {
    let store = EmbeddingStore::load(manifest)?;
    let (payload, table) = embedding::store_paths(manifest);
    for p in [manifest, payload.as_path(), table.as_path()] {
        run.input(p)?;
    }
    Ok(store)
}

pub const LABELS_HEADER: &str = "slide_id\tcase_id\tlabel\tcenter";

fn labels_tsv(store: &EmbeddingStore) -> String {
    let mut out = format!("{LABELS_HEADER}\n");
    for b in &store.bags {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", b.slide_id, b.case_id, b.label, b.center);
    }
    out
}

pub struct TileArgs<'a> {
    pub slides: &'a Path,
    pub profile: ProfileName,
    pub out: &'a Path,
}

/// Writes `tiles.tsv` (accepted tiles), `qc.tsv` (every planned tile with its
/// QC outcome) and `slides.toml` (the input manifest with absolute paths).
pub fn tile(args: &TileArgs, config: &Config, exec: Exec) -> Result<()> {
    let mut run = RunManifest::start("tile", serde_json::to_value(config)?, None);
    run.input(args.slides)?;
    let slides = SlideManifest::load(args.slides)?;
    let profile = TilingProfile::get(args.profile);
    create_dir(args.out)?;

    let mut tiles = format!(
        "# profile={} microns_per_pixel={}\n{TILES_HEADER}\n",
        profile.name, profile.microns_per_pixel
    );
    let mut qc = String::from("slide_id\tlevel\tx\ty\twidth\theight\ttissue_fraction\tsharpness\treason\n");
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for slide in &slides.slides {
        let level = slide.level(profile.level).ok_or_else(|| {
            invalid(format!(
                "slide {} has no level {} required by profile {}",
                slide.slide_id, profile.level, profile.name
            ))
        })?;
        let mask_level = slide.mask_level(profile.level).expect("the tiling level qualifies");
        let image = open_rgb(&level.path)?;
        run.input(&level.path)?;
        let thumb = if mask_level.level == level.level {
            image.clone()
        } else {
            run.input(&mask_level.path)?;
            open_rgb(&mask_level.path)?
        };
        let result = preprocess::tile_slide(
            &slide.slide_id,
            &image,
            &thumb,
            mask_level.level,
            &profile,
            &config.morph,
            &config.qc,
            exec,
        )?;
        for r in &result.records {
            let t = &r.tile;
            let row = format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.slide_id, t.level, t.x, t.y, t.width, t.height, r.tissue_fraction, r.sharpness
            );
            let _ = writeln!(qc, "{row}\t{}", r.reason);
            *counts.entry(r.reason.to_string()).or_default() += 1;
            if r.accepted() {
                let _ = writeln!(tiles, "{row}");
            }
        }
    }
    write(&mut run, &args.out.join("qc.tsv"), qc.as_bytes())?;
    let accepted = counts.get("ok").copied().unwrap_or(0);
    if accepted == 0 {
        let summary: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        bail!(invalid(format!(
            "no tiles passed QC ({} slides; {})",
            slides.slides.len(),
            if summary.is_empty() {
                "no tiles planned".to_string()
            } else {
                summary.join(", ")
            }
        )));
    }
    write(&mut run, &args.out.join("tiles.tsv"), tiles.as_bytes())?;
    write(&mut run, &args.out.join("slides.toml"), slides.to_toml()?.as_bytes())?;
    run.finish(args.out)
}

/// Encodes every accepted tile of a `tile` output directory.
pub fn embed(tiles_dir: &Path, provider: &str, out: &Path, config: &Config, exec: Exec) -> Result<()> {
    let mut run = RunManifest::start(
        "embed",
        serde_json::json!({ "provider": provider, "config": config }),
        None,
    );
    let (tiles_path, slides_path) = (tiles_dir.join("tiles.tsv"), tiles_dir.join("slides.toml"));
    run.input(&tiles_path)?;
    run.input(&slides_path)?;
    let table = manifest::parse_tile_table(
        &std::fs::read_to_string(&tiles_path).with_context(|| format!("reading {}", tiles_path.display()))?,
        &tiles_path,
    )?;
    let slides = SlideManifest::load(&slides_path)?;
    let provider = embedding::parse_provider(provider)?;

    let mut by_slide: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for t in &table.tiles {
        by_slide.entry(t.slide_id.as_str()).or_default().push(t.clone());
    }
    let mut store = EmbeddingStore::new(provider.dim());
    for (slide_id, refs) in by_slide {
        let slide = slides.get(slide_id).ok_or_else(|| {
            invalid(format!(
                "tile table names slide {slide_id} missing from {}",
                slides_path.display()
            ))
        })?;
        let level = refs[0].level;
        let path = &slide
            .level(level)
            .ok_or_else(|| invalid(format!("slide {slide_id} has no level {level}")))?
            .path;
        let image = open_rgb(path)?;
        run.input(path)?;
        let mut crops = Vec::with_capacity(refs.len());
        for t in refs {
            if !t.fits_within(image.width(), image.height()) {
                bail!(invalid(format!(
                    "tile ({}, {}) lies outside {}",
                    t.x,
                    t.y,
                    path.display()
                )));
            }
            let crop = image::imageops::crop_imm(&image, t.x, t.y, t.width, t.height).to_image();
            crops.push((t, crop));
        }
        let vectors = embedding::encode_bag(&crops, provider.as_ref(), exec)?;
        store.push(EmbeddingBag {
            slide_id: slide.slide_id.clone(),
            case_id: slide.case_id.clone(),
            center: slide.center.clone(),
            label: slide.label,
            profile: table.profile.clone(),
            dim: provider.dim(),
            tiles: crops.into_iter().map(|(t, _)| t).collect(),
            embeddings: vectors.concat(),
        })?;
    }
    create_dir(out)?;
    save_store(&mut run, &store, &out.join("embeddings.json"))?;
    write(&mut run, &out.join("labels.tsv"), labels_tsv(&store).as_bytes())?;
    run.finish(out)
}

/// Synthetic cohort with planted signal tiles.
pub fn synth(out: &Path, config: &Config) -> Result<()> {
    let mut run = RunManifest::start(
        "synth",
        serde_json::to_value(&config.synthetic)?,
        Some(config.synthetic.seed),
    );
    let data = synthetic::generate(&config.synthetic)?;
    create_dir(out)?;
    save_store(&mut run, &data.store, &out.join("embeddings.json"))?;
    write(&mut run, &out.join("labels.tsv"), labels_tsv(&data.store).as_bytes())?;
    write(&mut run, &out.join("signal.tsv"), data.signal_tsv().as_bytes())?;
    run.finish(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldSummary {
    fold: usize,
    checkpoint: String,
    history: String,
    best_epoch: usize,
    best_val_loss: f64,
    val_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    task: TaskKind,
    deployed_fold: usize,
    deployed_checkpoint: String,
    folds: Vec<FoldSummary>,
}

pub const TRAIN_SUMMARY: &str = "summary.json";

/// Cross-validated training of one task: per-fold checkpoints and histories,
/// the case split, and a summary naming the deployed fold.
pub fn train(store_path: &Path, kind: TaskKind, out: &Path, config: &Config, exec: Exec) -> Result<()> {
    let mut run = RunManifest::start("train", serde_json::to_value(config)?, Some(config.train.seed));
    let store = load_store(&mut run, store_path)?;
    let task = training::task_for(kind, &config.train)?;
    let cases: Vec<&str> = store.bags.iter().map(|b| b.case_id.as_str()).collect();
    let splits = training::make_splits(&cases, &config.splits, config.train.folds, config.train.seed)?;
    let outcome = training::train_task(&store, &task, &config.train, &splits, exec)?;

    create_dir(out)?;
    write(
        &mut run,
        &out.join("splits.json"),
        serde_json::to_string_pretty(&splits)?.as_bytes(),
    )?;
    let mut folds = Vec::new();
    for f in &outcome.folds {
        let checkpoint = format!("fold-{}.ckpt", f.fold);
        let history = format!("fold-{}.history.tsv", f.fold);
        write(&mut run, &out.join(&checkpoint), &f.model.checkpoint_bytes())?;
        write(
            &mut run,
            &out.join(&history),
            training::history_tsv(&f.history).as_bytes(),
        )?;
        folds.push(FoldSummary {
            fold: f.fold,
            checkpoint,
            history,
            best_epoch: f.best_epoch,
            best_val_loss: f.best_val_loss,
            val_accuracy: f.val_accuracy,
        });
    }
    let summary = TrainSummary {
        task: kind,
        deployed_fold: outcome.folds[outcome.deployed].fold,
        deployed_checkpoint: folds[outcome.deployed].checkpoint.clone(),
        folds,
    };
    write(
        &mut run,
        &out.join(TRAIN_SUMMARY),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    run.finish(out)
}

/// A checkpoint file, or a `train` output directory (its deployed fold).
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let summary_path = path.join(TRAIN_SUMMARY);
    let text = std::fs::read_to_string(&summary_path).with_context(|| format!("reading {}", summary_path.display()))?;
    let summary: TrainSummary =
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", summary_path.display())))?;
    Ok(path.join(summary.deployed_checkpoint))
}

fn load_model(run: &mut RunManifest, path: &Path, kind: TaskKind, dim: Option<usize>) -> Result<MilModel> {
    let path = resolve_checkpoint(path)?;
    let model =
        MilModel::load(&path).with_context(|| format!("missing or unreadable checkpoint {}", path.display()))?;
    run.input(&path)?;
    if model.task.kind != kind {
        bail!(invalid(format!(
            "{} holds a {} model, expected {kind}",
            path.display(),
            model.task.kind
        )));
    }
    if let Some(d) = dim {
        if model.dim() != d {
            bail!(Error::Shape {
                context: "checkpoint embedding dimension",
                expected: d,
                actual: model.dim(),
            });
        }
    }
    Ok(model)
}

fn slide_distribution(model: &MilModel, bag: &EmbeddingBag) -> Result<Distribution> {
    let data = bag.to_f64();
    let trace = mil::predict(model, &BagView::new(&data, bag.dim)?)?;
    Ok(Distribution::new(&model.task, trace.probs)?)
}

pub enum PredictInput<'a> {
    Models {
        store: &'a Path,
        checkpoints: [&'a Path; 3],
        /// Restrict to slides whose case falls in this split of a saved split file.
        split: Option<(&'a Path, Split)>,
    },
    /// Rows of `slide_id, neutrophil, nancy_low, nancy_high` distributions.
    Fixtures(&'a Path),
}

pub fn predict(input: PredictInput, strategy: Strategy, out: &Path, config: &Config, exec: Exec) -> Result<()> {
    let mut run = RunManifest::start(
        "predict",
        serde_json::json!({ "strategy": strategy, "vote_rule": config.vote_rule }),
        None,
    );
    let outputs: Vec<(String, TaskOutputs)> = match input {
        PredictInput::Fixtures(path) => {
            run.input(path)?;
            let table = Table::parse(
                &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                path,
            )?;
            let col = |c: &str| {
                table
                    .column(c)
                    .ok_or_else(|| invalid(format!("{} lacks column {c}", path.display())))
            };
            let (id, n, lo, hi) = (
                col("slide_id")?,
                col("neutrophil")?,
                col("nancy_low")?,
                col("nancy_high")?,
            );
            let mut rows = Vec::with_capacity(table.rows.len());
            for r in &table.rows {
                let o = TaskOutputs {
                    neutrophil: r[n].parse()?,
                    nancy_low: r[lo].parse()?,
                    nancy_high: r[hi].parse()?,
                };
                o.validate()?;
                rows.push((r[id].clone(), o));
            }
            rows
        }
        PredictInput::Models {
            store,
            checkpoints,
            split,
        } => {
            let store = load_store(&mut run, store)?;
            let mut models = Vec::with_capacity(3);
            for (path, kind) in checkpoints.iter().zip(TaskKind::ALL) {
                models.push(load_model(&mut run, path, kind, Some(store.dim))?);
            }
            let keep: Option<(SplitAssignment, Split)> = match split {
                Some((path, which)) => {
                    run.input(path)?;
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let a: SplitAssignment =
                        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
                    Some((a, which))
                }
                None => None,
            };
            let bags: Vec<&EmbeddingBag> = store
                .bags
                .iter()
                .filter(|b| match &keep {
                    Some((a, which)) => a.get(&b.case_id).is_some_and(|s| s.split == *which),
                    None => true,
                })
                .collect();
            let results = exec.map(&bags, |b| -> Result<TaskOutputs> {
                Ok(TaskOutputs {
                    neutrophil: slide_distribution(&models[0], b)?,
                    nancy_low: slide_distribution(&models[1], b)?,
                    nancy_high: slide_distribution(&models[2], b)?,
                })
            });
            bags.iter()
                .map(|b| b.slide_id.clone())
                .zip(results)
                .map(|(id, r)| r.map(|o| (id, o)))
                .collect::<Result<_>>()?
        }
    };
    let mut records: Vec<PredictionRecord> = outputs
        .into_iter()
        .map(|(slide_id, outputs)| PredictionRecord {
            slide_id,
            prediction: ensemble::combine(&outputs, strategy, config.vote_rule),
            outputs,
            vote_rule: config.vote_rule,
        })
        .collect();
    records.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    create_dir(out)?;
    write(
        &mut run,
        &out.join("predictions.tsv"),
        ensemble::predictions_tsv(&records).as_bytes(),
    )?;
    run.finish(out)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Overall report plus one per center when `center_column` is given.
pub fn evaluate(
    predictions: &Path,
    labels: &Path,
    center_column: Option<&str>,
    out: &Path,
    config: &Config,
) -> Result<()> {
    let mut run = RunManifest::start(
        "evaluate",
        serde_json::json!({ "kappa": config.kappa, "center_column": center_column }),
        None,
    );
    run.input(predictions)?;
    run.input(labels)?;
    let records = ensemble::parse_predictions(
        &std::fs::read_to_string(predictions).with_context(|| format!("reading {}", predictions.display()))?,
    )?;
    let table = Table::parse(
        &std::fs::read_to_string(labels).with_context(|| format!("reading {}", labels.display()))?,
        labels,
    )?;
    let need = |c: &str| {
        table
            .column(c)
            .ok_or_else(|| invalid(format!("{} lacks column {c}", labels.display())))
    };
    let (id_col, label_col) = (need("slide_id")?, need("label")?);
    let center_col = center_column.map(need).transpose()?;

    let mut truth: BTreeMap<&str, (NhiGrade, &str)> = BTreeMap::new();
    for r in &table.rows {
        let grade: NhiGrade = r[label_col].parse()?;
        let center = center_col.map(|c| r[c].as_str()).unwrap_or("");
        truth.insert(r[id_col].as_str(), (grade, center));
    }
    let missing: Vec<&str> = records
        .iter()
        .map(|r| r.slide_id.as_str())
        .filter(|id| !truth.contains_key(id))
        .collect();
    if !missing.is_empty() {
        bail!(invalid(format!("predictions without labels: {}", missing.join(", "))));
    }
    if records.is_empty() {
        bail!(invalid(format!("{} holds no predictions", predictions.display())));
    }

    let mut scopes: BTreeMap<String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for r in &records {
        let (grade, center) = truth[r.slide_id.as_str()];
        let mut add = |scope: String| {
            let e = scopes.entry(scope).or_default();
            e.0.push(grade.index());
            e.1.push(r.prediction.grade.index());
        };
        add("overall".into());
        if center_col.is_some() {
            add(format!("center-{}", file_safe(center)));
        }
    }
    create_dir(out)?;
    let mut summary = String::from("scope\tn\taccuracy\tkappa\tspearman_rho\tspearman_p\n");
    for (scope, (t, p)) in &scopes {
        let report = nhi_core::metrics::evaluate(t, p, nhi_core::metrics::grade_labels(), config.kappa)?;
        write(
            &mut run,
            &out.join(format!("report-{scope}.json")),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        write(
            &mut run,
            &out.join(format!("report-{scope}.tsv")),
            report.to_tsv().as_bytes(),
        )?;
        write(
            &mut run,
            &out.join(format!("confusion-{scope}.tsv")),
            report.confusion.to_tsv().as_bytes(),
        )?;
        save_png(
            &mut run,
            &out.join(format!("confusion-{scope}.png")),
            &heatmap::render_confusion(&report.confusion, 32),
        )?;
        let na = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            summary,
            "{scope}\t{}\t{}\t{}\t{}\t{}",
            report.n,
            report.accuracy,
            na(report.kappa),
            na(report.spearman_rho),
            na(report.spearman_p)
        );
    }
    write(&mut run, &out.join("summary.tsv"), summary.as_bytes())?;
    run.finish(out)
}

pub struct HeatmapArgs<'a> {
    pub store: &'a Path,
    pub checkpoint: &'a Path,
    pub slide: &'a str,
    pub mode: HeatmapMode,
    pub class: Option<&'a str>,
    pub downsample: u32,
    pub out: &'a Path,
}

/// Tile-score table plus a rendered overlay for one slide.
pub fn heatmap(args: &HeatmapArgs) -> Result<()> {
    let mut run = RunManifest::start(
        "heatmap",
        serde_json::json!({
            "slide": args.slide,
            "mode": args.mode.to_string(),
            "class": args.class,
            "downsample": args.downsample,
            "colormap": heatmap::COLORMAP,
            "normalization": "per-slide-min-max",
        }),
        None,
    );
    let store = load_store(&mut run, args.store)?;
    let bag = store
        .get(args.slide)
        .ok_or_else(|| invalid(format!("slide {} is not in {}", args.slide, args.store.display())))?;
    let path = resolve_checkpoint(args.checkpoint)?;
    let model =
        MilModel::load(&path).with_context(|| format!("missing or unreadable checkpoint {}", path.display()))?;
    run.input(&path)?;
    let scores = heatmap::tile_scores(&model, bag, args.mode)?;
    let column = match args.class {
        Some(c) => scores.class_column(c)?,
        None => scores.default_column().to_string(),
    };
    let values = scores.column(&column).expect("column comes from the score table");
    let image = heatmap::render_tiles(&scores.tiles, &heatmap::min_max_normalize(&values), args.downsample)?;

    create_dir(args.out)?;
    let stem = format!("{}.{}", file_safe(args.slide), args.mode);
    write(
        &mut run,
        &args.out.join(format!("{stem}.tsv")),
        scores.to_tsv().as_bytes(),
    )?;
    save_png(&mut run, &args.out.join(format!("{stem}.png")), &image)?;
    run.finish(args.out)
}
