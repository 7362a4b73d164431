//! Acceptance run: every criterion in turn, one PASS/FAIL line each.
//!
//! Lines go straight to the process stdout so they show up in plain
//! `cargo test` output. The slow criteria (overfit, ablation) take about
//! an hour together on one CPU core. `ACCEPTANCE_ONLY=gradient,shape` runs
//! only the criteria whose names contain one of the fragments.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{
    center_ness_ref, compare_targets, gradient_check, gradient_fixture, match_ref, nms_ref, oracle_targets,
    random_detections, random_scene, rng,
};
use posedet::annotation::{BoxAnnotation, ClassMap, ImageSample};
use posedet::evaluation::{evaluate, match_detections, render_class_table, split_of, Split};
use posedet::network::{BackboneConfig, BackboneVariant, Network};
use posedet::postprocess::{nms, Detection, PostprocessConfig};
use posedet::synth::{render_scene, SceneSpec};
use posedet::targets::{assign_targets, center_ness, scaled_levels, standard_levels};
use posedet::trainer::{
    ablation_grid, evaluate_network, render_ablation_table, standard_grid, tiny_grid, AblationRow, TrainConfig, Trainer,
};
use posedet::BBox;
use posedet_tensor::Tensor;
use rand::Rng;

type Outcome = Result<String, String>;

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Runner {
    failed: Vec<String>,
    /// Comma-separated name fragments from `ACCEPTANCE_ONLY`; everything runs when unset.
    only: Option<Vec<String>>,
}

impl Runner {
    fn run<T>(
        &mut self,
        name: &str,
        budget: Option<Duration>,
        f: impl FnOnce() -> Result<(String, T), String>,
    ) -> Option<T> {
        if let Some(only) = &self.only {
            if !only.iter().any(|o| name.contains(o.as_str())) {
                emit(&format!("SKIP {name}"));
                return None;
            }
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let timing = match budget {
            Some(b) => format!("{:.1} s of {:.0} s", elapsed.as_secs_f64(), b.as_secs_f64()),
            None => format!("{:.1} s", elapsed.as_secs_f64()),
        };
        let (status, detail, value) = match result {
            Ok((d, v)) if budget.is_none_or(|b| elapsed <= b) => ("PASS", d, Some(v)),
            Ok((d, _)) => ("FAIL", format!("over time budget; {d}"), None),
            Err(e) => ("FAIL", e, None),
        };
        if status == "FAIL" {
            self.failed.push(name.to_string());
        }
        emit(&format!("{status} {name} ({timing}): {detail}"));
        value
    }
}

fn plain(o: Outcome) -> Result<(String, ()), String> {
    o.map(|d| (d, ()))
}

// ---------------------------------------------------------------- center-ness

fn center_ness_suite() -> Outcome {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let v: [f64; 4] = std::array::from_fn(|_| r.random_range(0.01..800.0));
        let got = center_ness(v[0], v[1], v[2], v[3]).map_err(|e| format!("{v:?}: {e}"))?;
        worst = worst.max((got - center_ness_ref(v[0], v[1], v[2], v[3])).abs());
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;

    // 9x9 lattice strictly inside a 10x10 box
    let at = |i: usize, j: usize| {
        let (x, y) = (i as f64 + 1.0, j as f64 + 1.0);
        center_ness(x, y, 10.0 - x, 10.0 - y).unwrap()
    };
    let toward = |k: usize| match k {
        0..4 => k + 1,
        4 => k,
        _ => k - 1,
    };
    let peak = at(4, 4);
    ensure(peak == 1.0, || format!("center value {peak}"))?;
    for i in 0..9 {
        for j in 0..9 {
            let v = at(i, j);
            ensure(v == at(8 - i, j) && v == at(i, 8 - j) && v == at(j, i), || format!("asymmetric at ({i},{j})"))?;
            ensure(v <= peak, || format!("({i},{j}) exceeds the center"))?;
            ensure(at(toward(i), j) >= v && at(i, toward(j)) >= v, || {
                format!("not monotone toward the center at ({i},{j})")
            })?;
        }
    }
    Ok(format!("1000 vectors, max deviation {worst:.1e}; 81 lattice points symmetric, peak 1 at the center"))
}

// ---------------------------------------------------------------- targets

fn target_oracle() -> Outcome {
    let mut r = rng(202);
    let mut positives = 0;
    for case in 0..200 {
        let boxes = random_scene(&mut r, 5, 128.0, 128.0, 3);
        for (label, levels) in [("standard", standard_levels()), ("scaled 1/8", scaled_levels(1.0 / 8.0))] {
            let maps = assign_targets(&boxes, &levels, (128, 128)).map_err(|e| format!("scene {case}: {e}"))?;
            compare_targets(&maps, &oracle_targets(&boxes, &levels, (128, 128)), 1e-9)
                .map_err(|e| format!("scene {case}, {label} ranges: {e}"))?;
            positives += maps.levels.iter().map(|l| l.n_pos()).sum::<usize>();
        }
    }
    Ok(format!("200 scenes x 2 range sets agree, {positives} positive locations"))
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let full = gradient_check(&gradient_fixture(0, 1), |_| true);
    let scales = full.iter().filter(|c| c.name.starts_with("head.scale")).count();
    ensure(scales == 5, || format!("{scales} scale groups checked"))?;
    ensure(full.iter().any(|c| c.name.starts_with("pose.stage0.")), || "no first-stage groups".into())?;
    let staged = gradient_check(&gradient_fixture(3, 2), |n| n.starts_with("pose"));
    ensure(staged.iter().any(|c| c.name.starts_with("pose.stage1.")), || "no second-stage groups".into())?;
    let all: Vec<_> = full.iter().chain(&staged).collect();
    let worst = all.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    ensure(worst.rel_err < 1e-4, || format!("{} relative error {:.2e}", worst.name, worst.rel_err))?;
    Ok(format!(
        "{} groups at T=1 and {} pose groups at T=2, worst {:.1e} ({})",
        full.len(),
        staged.len(),
        worst.rel_err,
        worst.name
    ))
}

// ---------------------------------------------------------------- shapes

fn shape_contract() -> Outcome {
    let with = Network::<f32>::new(BackboneConfig::tiny(4, 17), 0).map_err(|e| e.to_string())?;
    let input = Tensor::<f32>::new(vec![1, 3, 768, 1152], vec![0.1; 3 * 768 * 1152]);
    let out = with.predict(input.clone()).map_err(|e| e.to_string())?;
    let sides = [(96, 144), (48, 72), (24, 36), (12, 18), (6, 9)];
    ensure(out.levels.len() == 5, || format!("{} levels", out.levels.len()))?;
    for (lv, &(h, w)) in out.levels.iter().zip(&sides) {
        let got = (lv.cls_logits.dims4(), lv.reg.dims4(), lv.ctr_logits.dims4());
        ensure(got == ((1, 3, h, w), (1, 4, h, w), (1, 1, h, w)), || format!("level shapes {got:?}, want {h}x{w}"))?;
    }
    ensure(out.heatmaps.len() == 4, || format!("{} heatmap stacks", out.heatmaps.len()))?;
    for hm in &out.heatmaps {
        ensure(hm.dims4() == (1, 17, 96, 144), || format!("heatmap {:?}", hm.dims4()))?;
    }
    let without = Network::<f32>::new(BackboneConfig::tiny(0, 17), 0).map_err(|e| e.to_string())?;
    let bare = without.predict(input).map_err(|e| e.to_string())?;
    ensure(bare.heatmaps.is_empty() && bare.pose_features.is_empty(), || "T=0 still has pose outputs".into())?;
    ensure(without.params().iter().all(|(_, n, _)| !n.starts_with("pose")), || "T=0 has pose parameters".into())?;
    let (a, b) = (with.num_parameters(), without.num_parameters());
    ensure(b < a, || format!("T=0 has {b} parameters, T=4 has {a}"))?;
    Ok(format!("P3 144x96 .. P7 9x6, 4 stacks of 144x96x17; parameters {a} (T=4) vs {b} (T=0)"))
}

// ---------------------------------------------------------------- postprocess and matching

fn nms_and_matcher() -> Outcome {
    let mut r = rng(303);
    let mut kept = 0;
    for case in 0..1000 {
        let n = r.random_range(0..=200);
        let dets = random_detections(&mut r, n, 3, 128.0, 128.0);
        let thr = [0.3, 0.5, 0.6, 0.8][case % 4];
        let got = nms(&dets, thr);
        ensure(got == nms_ref(&dets, thr), || format!("suppression case {case} differs"))?;
        kept += got.len();
    }
    let mut matched = 0;
    for case in 0..1000 {
        let gts = random_scene(&mut r, 6, 64.0, 64.0, 2);
        let n = r.random_range(0..=6);
        let mut dets = random_detections(&mut r, n, 2, 64.0, 64.0);
        for d in dets.iter_mut() {
            if !gts.is_empty() && r.random_bool(0.6) {
                let g = gts[r.random_range(0..gts.len())];
                let mut j = |v: f64| v + r.random_range(-3..=3) as f64;
                d.class_id = g.class_id;
                d.bbox = BBox::normalized(j(g.bbox.x_min), j(g.bbox.y_min), j(g.bbox.x_max), j(g.bbox.y_max));
                if !d.bbox.is_proper() {
                    d.bbox = g.bbox;
                }
            }
        }
        let thr = [0.5, 0.75, 0.3][case % 3];
        let got = match_detections(&dets, &gts, thr);
        ensure(got == match_ref(&dets, &gts, thr), || format!("matching case {case} differs"))?;
        matched += got.iter().filter(|&&m| m).count();
    }
    Ok(format!("1000 suppression cases ({kept} kept), 1000 matching cases ({matched} true positives)"))
}

// ---------------------------------------------------------------- evaluator

fn eval_case(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BoxAnnotation>>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..r.random_range(1..6) {
        let g = random_scene(r, 4, 128.0, 128.0, 3);
        let n = r.random_range(0..6);
        let mut d = random_detections(r, n, 3, 128.0, 128.0);
        for b in &g {
            if r.random_bool(0.7) {
                d.push(Detection { class_id: b.class_id, score: r.random_range(0.01..1.0), bbox: b.bbox });
            }
        }
        gts.push(g);
        dets.push(d);
    }
    (dets, gts)
}

fn evaluator_sanity() -> Outcome {
    let classes = ClassMap::default();
    let mut r = rng(404);
    let mut cases = 0;
    while cases < 100 {
        let (dets, gts) = eval_case(&mut r);
        if gts.iter().all(|g| g.is_empty()) {
            continue;
        }
        cases += 1;
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|b| Detection { class_id: b.class_id, score: 1.0, bbox: b.bbox }).collect())
            .collect();
        let map = evaluate(&perfect, &gts, &classes).map;
        ensure((map - 1.0).abs() <= 1e-9, || format!("case {cases}: perfect detections give {map}"))?;
        let empty = evaluate(&vec![Vec::new(); gts.len()], &gts, &classes).map;
        ensure(empty == 0.0, || format!("case {cases}: empty detections give {empty}"))?;
        let base = evaluate(&dets, &gts, &classes);
        let squashed: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: (3.0 * x.score).tanh() * 0.5 + 0.1, ..*x }).collect())
            .collect();
        let rescaled = evaluate(&squashed, &gts, &classes);
        let same = base.ap == rescaled.ap && base.classes.iter().zip(&rescaled.classes).all(|(a, b)| a.ap == b.ap);
        ensure(same, || format!("case {cases}: rescaling changed AP {:?} -> {:?}", base.ap, rescaled.ap))?;
    }
    Ok("100 cases: perfect = 1, empty = 0, monotone rescaling leaves every AP unchanged".into())
}

// ---------------------------------------------------------------- training

fn corpus(spec: &SceneSpec, n: usize) -> Vec<ImageSample> {
    (0..n).map(|i| render_scene(spec, i).into_sample()).collect()
}

fn overfit() -> Outcome {
    let samples = corpus(&SceneSpec { seed: 1, ..SceneSpec::default() }, 16);
    let steps = 2000;
    let cfg = TrainConfig {
        model: BackboneConfig::tiny(1, 17),
        batch_size: 4,
        base_lr: 0.01,
        max_steps: steps,
        milestones: vec![steps * 3 / 4],
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, samples.clone()).map_err(|e| e.to_string())?;
    let records = trainer.run(steps, None, None).map_err(|e| e.to_string())?;
    let initial = records[0].loss.total;
    let tail = &records[records.len() - 50..];
    let last = tail.iter().map(|r| r.loss.total).sum::<f64>() / tail.len() as f64;
    let report = evaluate_network(
        trainer.network(),
        trainer.normalization(),
        &samples,
        &PostprocessConfig::default(),
        &ClassMap::default(),
    )
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "{steps} steps, training AP50 {:.3} (mAP {:.3}), loss {initial:.3} -> {last:.4} over the last 50 steps ({:.1}x)",
        report.ap50,
        report.map,
        initial / last
    );
    ensure(report.ap50 >= 0.90, || format!("AP50 below 0.90; {detail}"))?;
    ensure(initial / last >= 10.0, || format!("loss reduced less than 10x; {detail}"))?;
    Ok(detail)
}

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn ablation() -> Result<(String, Vec<AblationRow>), String> {
    let spec = SceneSpec { seed: 2024, occlusion_rate: 0.2, keypoint_noise_px: 3.0, ..SceneSpec::default() };
    let all = corpus(&spec, 512);
    let (train, mut val): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| split_of(&s.image_id) == Split::Train);
    for s in &mut val {
        s.keypoints.clear();
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for seed in ABLATION_SEEDS {
        let base = TrainConfig {
            model: BackboneConfig::tiny(0, 17),
            batch_size: 4,
            base_lr: 0.01,
            max_steps: 1500,
            milestones: vec![1200],
            seed,
            ..TrainConfig::default()
        };
        let got = ablation_grid(
            &tiny_grid(&base, &[0, 1]),
            &train,
            &val,
            &PostprocessConfig::default(),
            &ClassMap::default(),
        )
        .map_err(|e| e.to_string())?;
        lines.push(format!("seed {seed}: T=0 {:.3}, T=1 {:.3}", got[0].report.map, got[1].report.map));
        rows.extend(got);
    }
    let mean = |t: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.stacks == t).map(|r| r.report.map).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (m0, m1) = (mean(0), mean(1));
    emit(&format!("  {} train / {} val images", train.len(), val.len()));
    for l in &lines {
        emit(&format!("  {l}"));
    }
    emit(&render_ablation_table(&rows));
    let detail = format!("mean mAP T=1 {m1:.3} vs T=0 {m0:.3} over {} seeds", ABLATION_SEEDS.len());
    ensure(m1 >= m0 - 0.02, || format!("pose branch costs more than 0.02; {detail}"))?;
    Ok((detail, rows))
}

// ---------------------------------------------------------------- tables

fn table_structure(rows: &[AblationRow]) -> Outcome {
    let grid: Vec<_> = standard_grid(&TrainConfig::default())
        .into_iter()
        .map(|e| (e.config.model.variant, e.config.model.has_pose_branch(), e.config.model.hourglass_count))
        .collect();
    use BackboneVariant::{Resnet101, Resnet50};
    let want = vec![
        (Resnet50, false, 0),
        (Resnet50, true, 4),
        (Resnet101, false, 0),
        (Resnet101, true, 4),
        (Resnet50, true, 1),
        (Resnet50, true, 2),
    ];
    ensure(grid == want, || format!("comparison grid {grid:?}"))?;

    let table = render_ablation_table(rows);
    let lines: Vec<&str> = table.lines().collect();
    ensure(lines[0].split_whitespace().eq(["Method", "resnet", "pose", "T", "AP50", "AP75", "mAP"]), || {
        format!("ablation header {}", lines[0])
    })?;
    ensure(lines.len() == rows.len() + 2, || format!("{} table lines for {} rows", lines.len(), rows.len()))?;

    let pose_row = rows.iter().find(|r| r.stacks == 1).ok_or("no pose-T1 row")?;
    let classes = render_class_table(&pose_row.report);
    emit(&classes);
    let lines: Vec<&str> = classes.lines().collect();
    ensure(lines[0].split_whitespace().eq(["Behavior", "fight", "tumble", "squat", "all"]), || {
        format!("class header {}", lines[0])
    })?;
    let heads: Vec<&str> = lines[2..].iter().filter_map(|l| l.split_whitespace().next()).collect();
    ensure(heads == ["Labels", "AP50", "AP75", "mAP"], || format!("class rows {heads:?}"))?;
    Ok(format!("6-row comparison grid; ablation table with {} rows; per-class table for {}", rows.len(), pose_row.name))
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let only = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut runner = Runner { failed: Vec::new(), only };
    runner.run("center-ness", Some(secs(1)), || plain(center_ness_suite()));
    runner.run("target-assignment oracle", Some(secs(30)), || plain(target_oracle()));
    runner.run("gradient check", Some(secs(300)), || plain(gradient_suite()));
    runner.run("shape contract", Some(secs(60)), || plain(shape_contract()));
    runner.run("nms and matcher oracles", Some(secs(60)), || plain(nms_and_matcher()));
    runner.run("evaluator sanity", Some(secs(30)), || plain(evaluator_sanity()));
    runner.run("end-to-end overfit", Some(secs(20 * 60)), || plain(overfit()));
    let rows = runner.run("ablation direction", Some(secs(2 * 3600)), ablation);
    runner.run("table structure", None, || match &rows {
        Some(rows) => plain(table_structure(rows)),
        None => Err("no ablation rows to tabulate".into()),
    });
    assert!(runner.failed.is_empty(), "failed criteria: {:?}", runner.failed);
}
