use std::collections::BTreeMap;
use std::path::Path;

use posedet::annotation::{
    box_file_xml, keypoint_file_json, load_image, load_record, manifest_jsonl, parse_box_file, read_manifest,
    standardize_sample, standardize_scale, BoxAnnotation, ImageSample, ManifestRecord,
};
use posedet::evaluation::{evaluate, match_detections, render_aligned, render_class_table, split_of, Split};
use posedet::fsutil::{save_png_atomic, write_atomic};
use posedet::network::checkpoint::load_checkpoint;
use posedet::network::{Network, NetworkError, Normalization};
use posedet::pose::render_heatmaps;
use posedet::postprocess::{detect, Detection, DetectionRecord};
use posedet::render::{heatmap_grid, overlay, target_grid};
use posedet::synth::generate_corpus;
use posedet::targets::{assign_targets, scaled_levels};
use posedet::trainer::{
    ablation_grid, predict_samples, render_ablation_table, run_with_log, standard_grid, tiny_grid, AblationRow,
    TrainConfig, Trainer,
};
use serde::Serialize;

use crate::config::Config;
use crate::error::CliError;
use crate::{AblateArgs, DumpArgs, EvalArgs, GridArg, InferArgs, PrepareArgs, SplitArg, SynthArgs, TrainArgs};

pub struct Context {
    pub cfg: Config,
    pub verbose: u8,
}

impl Context {
    fn info(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    write_file(path, text.as_bytes())
}

fn in_split(id: &str, split: SplitArg) -> bool {
    match split {
        SplitArg::All => true,
        SplitArg::Train => split_of(id) == Split::Train,
        SplitArg::Val => split_of(id) == Split::Val,
    }
}

fn manifest_dir(manifest: &Path) -> &Path {
    manifest.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

/// Load the records of one split, standardized to `size`.
fn load_samples(
    ctx: &Context,
    manifest: &Path,
    split: SplitArg,
    size: (u32, u32),
) -> Result<Vec<ImageSample>, CliError> {
    let dir = manifest_dir(manifest);
    let mut out = Vec::new();
    for rec in read_manifest(manifest)?.iter().filter(|r| in_split(&r.image_id, split)) {
        let sample = load_record(dir, rec, &ctx.cfg.ingest)?;
        out.push(if sample.size() == size { sample } else { standardize_sample(&sample, size)? });
    }
    ctx.info(format!("loaded {} samples from {}", out.len(), manifest.display()));
    Ok(out)
}

fn find_record(manifest: &Path, image_id: Option<&str>) -> Result<ManifestRecord, CliError> {
    let records = read_manifest(manifest)?;
    let found = match image_id {
        Some(id) => records.into_iter().find(|r| r.image_id == id),
        None => records.into_iter().next(),
    };
    found
        .ok_or_else(|| CliError::Config(format!("no image {} in {}", image_id.unwrap_or("at all"), manifest.display())))
}

struct Model {
    network: Network<f32>,
    normalization: Normalization,
    train: TrainConfig,
}

fn load_model(ctx: &Context, path: &Path) -> Result<Model, CliError> {
    let ck = load_checkpoint(path)?;
    // checkpoints written by the trainer carry their training config; others fall back to the active one
    let train: TrainConfig = serde_json::from_value(ck.meta["train_config"].clone())
        .unwrap_or_else(|_| TrainConfig { model: ck.network.config().clone(), ..ctx.cfg.train.clone() });
    let mut network = ck.network;
    network.set_levels(scaled_levels(train.range_scale));
    if network.config().num_classes != ctx.cfg.ingest.classes.len() {
        return Err(NetworkError::ConfigMismatch(format!(
            "checkpoint predicts {} classes, config names {}",
            network.config().num_classes,
            ctx.cfg.ingest.classes.len()
        ))
        .into());
    }
    Ok(Model { network, normalization: ck.normalization, train })
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<(), CliError> {
    let mut spec = ctx.cfg.synth.clone();
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let records = generate_corpus(&spec, args.n, &args.out)?;
    println!("wrote {} images to {}", records.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Rejection {
    image_id: String,
    error: String,
    message: String,
}

pub fn prepare(ctx: &Context, args: &PrepareArgs) -> Result<(), CliError> {
    let size = ctx.cfg.prepare.size;
    let dir = manifest_dir(&args.manifest);
    let classes = &ctx.cfg.ingest.classes;
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for rec in read_manifest(&args.manifest)? {
        let sample = match load_record(dir, &rec, &ctx.cfg.ingest).and_then(|s| standardize_sample(&s, size)) {
            Ok(s) => s,
            Err(e) => {
                let err = CliError::from(e);
                ctx.info(format!("rejected {}: {err}", rec.image_id));
                rejected.push(Rejection {
                    image_id: rec.image_id.clone(),
                    error: err.label(),
                    message: err.to_string(),
                });
                continue;
            }
        };
        let id = &sample.image_id;
        let out = ManifestRecord {
            image_id: id.clone(),
            image: format!("images/{id}.png"),
            boxes: format!("annotations/{id}.xml"),
            keypoints: rec.keypoints.as_ref().map(|_| format!("keypoints/{id}.json")),
            width: size.0,
            height: size.1,
        };
        let img_path = args.out.join(&out.image);
        save_png_atomic(&img_path, &sample.pixels).map_err(CliError::io(&img_path))?;
        let xml = box_file_xml(&format!("{id}.png"), size, &sample.boxes, classes);
        write_file(&args.out.join(&out.boxes), xml.as_bytes())?;
        if let Some(kp) = &out.keypoints {
            write_file(&args.out.join(kp), keypoint_file_json(&sample.keypoints).as_bytes())?;
        }
        accepted.push(out);
    }
    write_file(&args.out.join("manifest.jsonl"), manifest_jsonl(&accepted).as_bytes())?;
    let lines: String = rejected.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    write_file(&args.out.join("rejected.jsonl"), lines.as_bytes())?;
    println!("prepared {} images at {}x{}, rejected {}", accepted.len(), size.0, size.1, rejected.len());
    Ok(())
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let mut trainer = match &args.resume {
        Some(ck) => {
            let ck_cfg = load_model(ctx, ck)?.train;
            let samples = load_samples(ctx, &args.manifest, args.split, ck_cfg.input_size)?;
            Trainer::resume(ck, samples)?
        }
        None => {
            let samples = load_samples(ctx, &args.manifest, args.split, ctx.cfg.train.input_size)?;
            Trainer::new(ctx.cfg.train.clone(), samples)?
        }
    };
    // a resumed run keeps its checkpointed hyperparameters but stops at the active step budget
    let max_steps = ctx.cfg.train.max_steps;
    let chunk = if ctx.verbose > 0 { 50 } else { max_steps.max(1) };
    let mut last = None;
    while trainer.step_count() < max_steps {
        let target = (trainer.step_count() + chunk).min(max_steps);
        let records = run_with_log(&mut trainer, target, &args.out, args.log.as_deref())?;
        if let Some(r) = records.last() {
            ctx.info(format!(
                "step {} lr {:.5} loss {:.4} ({:.1} img/s)",
                r.step, r.lr, r.loss.total, r.images_per_sec
            ));
            last = Some(r.clone());
        }
    }
    if last.is_none() {
        // nothing left to run; still leave a checkpoint at the requested path
        trainer.save(&args.out)?;
    }
    match last {
        Some(r) => println!("trained to step {} (loss {:.4}), checkpoint {}", r.step, r.loss.total, args.out.display()),
        None => println!("already at step {}, checkpoint {}", trainer.step_count(), args.out.display()),
    }
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let bad = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(bad)
    } else {
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(bad)).collect()
    }
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<(), CliError> {
    let classes = &ctx.cfg.ingest.classes;
    let (dets, gts, source, seed) = match (&args.checkpoint, &args.detections) {
        (Some(ck), _) => {
            let model = load_model(ctx, ck)?;
            let samples = load_samples(ctx, &args.manifest, args.split, model.train.input_size)?;
            let dets = predict_samples(&model.network, &model.normalization, &samples, &ctx.cfg.postprocess, 8)?;
            let gts: Vec<Vec<BoxAnnotation>> = samples.iter().map(|s| s.boxes.clone()).collect();
            (dets, gts, ck.clone(), Some(model.train.seed))
        }
        (None, Some(path)) => {
            let dir = manifest_dir(&args.manifest);
            let records: Vec<ManifestRecord> =
                read_manifest(&args.manifest)?.into_iter().filter(|r| in_split(&r.image_id, args.split)).collect();
            let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
            for r in read_detections(path)? {
                let det = r
                    .detection(classes)
                    .ok_or_else(|| CliError::Config(format!("unknown class {:?} in {}", r.class, path.display())))?;
                by_image.entry(r.image_id).or_default().push(det);
            }
            let mut gts = Vec::with_capacity(records.len());
            for r in &records {
                gts.push(parse_box_file(&dir.join(&r.boxes), classes)?);
            }
            let dets = records.iter().map(|r| by_image.remove(&r.image_id).unwrap_or_default()).collect();
            (dets, gts, path.clone(), None)
        }
        (None, None) => return Err(CliError::Config("eval needs --checkpoint or --detections".into())),
    };
    let report = evaluate(&dets, &gts, classes);
    print!("{}", render_class_table(&report));
    println!("mAP {:.4}  AP50 {:.4}  AP75 {:.4}  ({} images)", report.map, report.ap50, report.ap75, report.images);
    if let Some(out) = &args.out {
        let doc = serde_json::json!({
            "source": source,
            "split": format!("{:?}", args.split).to_lowercase(),
            "seed": seed,
            "report": report,
        });
        write_json(out, &doc)?;
    }
    Ok(())
}

pub fn infer(ctx: &Context, args: &InferArgs) -> Result<(), CliError> {
    let model = load_model(ctx, &args.checkpoint)?;
    let size = model.train.input_size;
    let pixels = load_image(&args.image)?;
    let source_size = pixels.dimensions();
    let gts = match &args.boxes {
        Some(p) => parse_box_file(p, &ctx.cfg.ingest.classes)?,
        None => Vec::new(),
    };
    let image_id = args.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let sample =
        ImageSample { image_id: image_id.clone(), pixels, boxes: Vec::new(), keypoints: Vec::new(), source_size };
    let std = standardize_sample(&sample, size)?;
    let outputs = model.network.predict(model.normalization.to_tensor(&[&std.pixels]))?;
    let (sx, sy) = standardize_scale(source_size, size);
    let (w, h) = (source_size.0 as f64, source_size.1 as f64);
    let dets: Vec<Detection> = detect(&outputs, model.network.levels(), 0, size, &ctx.cfg.postprocess)
        .map_err(NetworkError::from)?
        .into_iter()
        .map(|d| Detection { bbox: d.bbox.scale(1.0 / sx, 1.0 / sy).clip(w, h), ..d })
        .filter(|d| d.bbox.is_proper())
        .collect();
    let records: Vec<DetectionRecord> =
        dets.iter().map(|d| DetectionRecord::new(&image_id, d, &ctx.cfg.ingest.classes)).collect();
    let img_path = args.out.join(format!("{image_id}_overlay.png"));
    save_png_atomic(&img_path, &overlay(&sample.pixels, &dets, &gts, args.min_score))
        .map_err(CliError::io(&img_path))?;
    write_json(&args.out.join(format!("{image_id}_detections.json")), &records)?;
    let shown = dets.iter().filter(|d| d.score >= args.min_score).count();
    println!("{} detections ({} at score >= {}), overlay {}", dets.len(), shown, args.min_score, img_path.display());
    if !gts.is_empty() {
        let confident: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= args.min_score).collect();
        let matched = match_detections(&confident, &gts, args.match_iou).iter().filter(|&&m| m).count();
        println!("matched {matched}/{} ground-truth boxes at IoU >= {}", gts.len(), args.match_iou);
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    grid: String,
    seeds: &'a [u64],
    rows: &'a [AblationRow],
}

/// Mean AP50/AP75/mAP per method over seeds, in first-seen order.
fn mean_table(rows: &[AblationRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<&str, ([f64; 3], usize)> = BTreeMap::new();
    for r in rows {
        if !sums.contains_key(r.name.as_str()) {
            order.push(&r.name);
        }
        let e = sums.entry(&r.name).or_insert(([0.0; 3], 0));
        e.0[0] += r.report.ap50;
        e.0[1] += r.report.ap75;
        e.0[2] += r.report.map;
        e.1 += 1;
    }
    let mut table = vec![["Method", "seeds", "AP50", "AP75", "mAP"].map(String::from).to_vec()];
    for name in order {
        let (s, n) = sums[name];
        let mut row = vec![name.to_string(), n.to_string()];
        row.extend(s.iter().map(|v| format!("{:.1}", 100.0 * v / n as f64)));
        table.push(row);
    }
    render_aligned(&table)
}

pub fn ablate(ctx: &Context, args: &AblateArgs) -> Result<(), CliError> {
    let base = &ctx.cfg.train;
    let all = load_samples(ctx, &args.manifest, SplitArg::All, base.input_size)?;
    let (train_set, mut val_set): (Vec<ImageSample>, Vec<ImageSample>) =
        all.into_iter().partition(|s| split_of(&s.image_id) == Split::Train);
    // keypoints are training-only supervision
    for s in &mut val_set {
        s.keypoints.clear();
    }
    ctx.info(format!("ablation on {} train / {} val images", train_set.len(), val_set.len()));
    let mut rows = Vec::new();
    for &seed in &args.seeds {
        let seeded = TrainConfig { seed, ..base.clone() };
        let grid = match args.grid {
            GridArg::Tiny => tiny_grid(&seeded, &args.stacks),
            GridArg::Standard => standard_grid(&seeded),
        };
        for entry in &grid {
            ctx.info(format!("seed {seed}: {}", entry.name));
            let row = ablation_grid(
                std::slice::from_ref(entry),
                &train_set,
                &val_set,
                &ctx.cfg.postprocess,
                &ctx.cfg.ingest.classes,
            )?;
            rows.extend(row);
        }
    }
    let table = format!("{}\n{}", render_ablation_table(&rows), mean_table(&rows));
    print!("{table}");
    write_file(&args.out.join("table.txt"), table.as_bytes())?;
    let grid = format!("{:?}", args.grid).to_lowercase();
    write_json(&args.out.join("rows.json"), &AblationOutput { grid, seeds: &args.seeds, rows: &rows })?;
    Ok(())
}

fn dump_sample(ctx: &Context, args: &DumpArgs) -> Result<ImageSample, CliError> {
    let rec = find_record(&args.manifest, args.image_id.as_deref())?;
    let sample = load_record(manifest_dir(&args.manifest), &rec, &ctx.cfg.ingest)?;
    let size = ctx.cfg.train.input_size;
    Ok(if sample.size() == size { sample } else { standardize_sample(&sample, size)? })
}

pub fn dump_targets(ctx: &Context, args: &DumpArgs) -> Result<(), CliError> {
    let sample = dump_sample(ctx, args)?;
    let size = ctx.cfg.train.input_size;
    let maps = assign_targets(&sample.boxes, &scaled_levels(ctx.cfg.train.range_scale), size)?;
    save_png_atomic(&args.out, &target_grid(&maps, size)).map_err(CliError::io(&args.out))?;
    println!("{}: {} positive locations, wrote {}", sample.image_id, maps.n_pos(), args.out.display());
    Ok(())
}

pub fn dump_heatmaps(ctx: &Context, args: &DumpArgs) -> Result<(), CliError> {
    let sample = dump_sample(ctx, args)?;
    let train = &ctx.cfg.train;
    let stack = render_heatmaps(&sample.keypoints, train.model.num_keypoints, train.input_size, train.heatmap_sigma);
    save_png_atomic(&args.out, &heatmap_grid(&stack, 6, 4)).map_err(CliError::io(&args.out))?;
    println!("{}: {} keypoint channels, wrote {}", sample.image_id, stack.channels, args.out.display());
    Ok(())
}
