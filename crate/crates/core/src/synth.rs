//! Procedural stick-figure corpus with exact boxes and keypoints.
//!
//! Every actor is drawn on the 17-joint COCO skeleton. The three behaviors
//! differ in silhouette: `squat` folds the legs with the knees pushed
//! outward, `tumble` lays the body roughly horizontal, and `fight` places two
//! upright actors face to face with arms reaching for each other, labelled
//! by the union of both. Boxes are the tight hulls of the painted pixels.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    box_file_xml, keypoint_file_json, manifest_jsonl, BoxAnnotation, ClassMap, ImageSample, Keypoint, KeypointSet,
    ManifestRecord,
};
use crate::fsutil::{save_png_atomic, write_atomic};
use crate::geometry::BBox;

pub const FIGHT: usize = 0;
pub const TUMBLE: usize = 1;
pub const SQUAT: usize = 2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

impl SynthError {
    pub fn kind(&self) -> &'static str {
        match self {
            SynthError::Io { .. } => "IoError",
            SynthError::InvalidSpec(_) => "InvalidSpec",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// `(width, height)`, both multiples of 128.
    pub image_size: (u32, u32),
    /// Inclusive range of labelled actors (a fighting pair counts once).
    pub actors_per_image: (usize, usize),
    /// Probabilities of fight, tumble, squat.
    pub class_distribution: [f64; 3],
    /// Standing height of an actor in pixels.
    pub scale_range: (f64, f64),
    /// Probability that an actor is partly covered by an occluding block.
    pub occlusion_rate: f64,
    /// Standard deviation of Gaussian noise added to written keypoints.
    pub keypoint_noise_px: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            image_size: (256, 128),
            actors_per_image: (1, 3),
            class_distribution: [1.0 / 3.0; 3],
            scale_range: (45.0, 100.0),
            occlusion_rate: 0.0,
            keypoint_noise_px: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        let (w, h) = self.image_size;
        if w == 0 || h == 0 || w % 128 != 0 || h % 128 != 0 {
            return bad("image_size must be a positive multiple of 128 on both axes");
        }
        if self.actors_per_image.0 == 0 || self.actors_per_image.0 > self.actors_per_image.1 {
            return bad("actors_per_image must be a non-empty range starting at 1 or more");
        }
        let total: f64 = self.class_distribution.iter().sum();
        if self.class_distribution.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return bad("class_distribution must be three probabilities summing to 1");
        }
        if !(self.scale_range.0 >= 8.0 && self.scale_range.0 <= self.scale_range.1) {
            return bad("scale_range must satisfy 8 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(self.keypoint_noise_px >= 0.0) {
            return bad("occlusion_rate must lie in [0, 1] and keypoint_noise_px be non-negative");
        }
        Ok(())
    }
}

/// One generated image with its labels, before serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub pixels: RgbImage,
    pub boxes: Vec<BoxAnnotation>,
    /// Keypoints as written to disk (noise and occlusion applied).
    pub keypoints: Vec<KeypointSet>,
    /// Joint positions used for drawing, one entry per person.
    pub true_joints: Vec<[(f64, f64); 17]>,
}

impl SyntheticImage {
    /// The in-memory sample ingest would produce from this image's files.
    pub fn into_sample(self) -> ImageSample {
        ImageSample {
            image_id: self.image_id,
            source_size: self.pixels.dimensions(),
            pixels: self.pixels,
            boxes: self.boxes,
            keypoints: self.keypoints,
        }
    }
}

type Joints = [(f64, f64); 17];

const L_SHOULDER: usize = 5;
const R_SHOULDER: usize = 6;
const L_ELBOW: usize = 7;
const R_ELBOW: usize = 8;
const L_WRIST: usize = 9;
const R_WRIST: usize = 10;
const L_HIP: usize = 11;
const R_HIP: usize = 12;
const L_KNEE: usize = 13;
const R_KNEE: usize = 14;
const L_ANKLE: usize = 15;
const R_ANKLE: usize = 16;

const LIMBS: [(usize, usize); 12] = [
    (L_SHOULDER, R_SHOULDER),
    (L_HIP, R_HIP),
    (L_SHOULDER, L_HIP),
    (R_SHOULDER, R_HIP),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
];

const UPPER_ARM: f64 = 0.16;
const FOREARM: f64 = 0.14;
const THIGH: f64 = 0.24;
const SHIN: f64 = 0.24;
const HEAD_RADIUS: f64 = 0.075;

/// A figure in unit-height body coordinates: x right, y down, head top at 0.
#[derive(Clone, Debug)]
struct Figure {
    joints: Joints,
    head: (f64, f64),
}

fn polar(from: (f64, f64), len: f64, angle_from_down: f64) -> (f64, f64) {
    (from.0 + len * angle_from_down.sin(), from.1 + len * angle_from_down.cos())
}

fn set_head(j: &mut Joints, head: (f64, f64)) {
    let (hx, hy) = head;
    j[0] = (hx, hy + 0.01);
    j[1] = (hx + 0.025, hy - 0.01);
    j[2] = (hx - 0.025, hy - 0.01);
    j[3] = (hx + 0.06, hy);
    j[4] = (hx - 0.06, hy);
}

/// Upright frontal body; the person's left side is at +x.
fn upright(rng: &mut ChaCha8Rng, hip_y: f64) -> Figure {
    let drop = hip_y - 0.52;
    let mut j = [(0.0, 0.0); 17];
    let head = (0.0, HEAD_RADIUS + drop);
    set_head(&mut j, head);
    j[L_SHOULDER] = (0.11, 0.19 + drop);
    j[R_SHOULDER] = (-0.11, 0.19 + drop);
    j[L_HIP] = (0.075, hip_y);
    j[R_HIP] = (-0.075, hip_y);
    for (side, (sh, el, wr)) in [(1.0, (L_SHOULDER, L_ELBOW, L_WRIST)), (-1.0, (R_SHOULDER, R_ELBOW, R_WRIST))] {
        let a = side * rng.random_range(0.15..0.5);
        j[el] = polar(j[sh], UPPER_ARM, a);
        j[wr] = polar(j[el], FOREARM, a + side * rng.random_range(0.0..0.4));
    }
    Figure { joints: j, head }
}

fn standing_legs(rng: &mut ChaCha8Rng, f: &mut Figure) {
    for (side, (hip, knee, ankle)) in [(1.0, (L_HIP, L_KNEE, L_ANKLE)), (-1.0, (R_HIP, R_KNEE, R_ANKLE))] {
        let a = side * rng.random_range(0.02..0.2);
        f.joints[knee] = polar(f.joints[hip], THIGH, a);
        f.joints[ankle] = polar(f.joints[knee], SHIN, a * 0.5);
    }
}

fn squatting(rng: &mut ChaCha8Rng) -> Figure {
    let hip_y = rng.random_range(0.78..0.84);
    let mut f = upright(rng, hip_y);
    for (side, (hip, knee, ankle)) in [(1.0, (L_HIP, L_KNEE, L_ANKLE)), (-1.0, (R_HIP, R_KNEE, R_ANKLE))] {
        let a = (side * rng.random_range(0.08..0.13), 1.0);
        let h = f.joints[hip];
        // knee at the outward intersection of the thigh and shin circles
        let (dx, dy) = (a.0 - h.0, a.1 - h.1);
        let d = (dx * dx + dy * dy).sqrt();
        let along = (THIGH * THIGH - SHIN * SHIN + d * d) / (2.0 * d);
        let off = (THIGH * THIGH - along * along).max(0.0).sqrt();
        let (mx, my) = (h.0 + along * dx / d, h.1 + along * dy / d);
        let (nx, ny) = (-dy / d, dx / d);
        let s = if nx * side > 0.0 { 1.0 } else { -1.0 };
        f.joints[knee] = (mx + s * off * nx, my + s * off * ny);
        f.joints[ankle] = a;
    }
    // hands rest toward the knees
    for (side, (sh, el, wr, knee)) in
        [(1.0, (L_SHOULDER, L_ELBOW, L_WRIST, L_KNEE)), (-1.0, (R_SHOULDER, R_ELBOW, R_WRIST, R_KNEE))]
    {
        let a = side * rng.random_range(0.3..0.6);
        f.joints[el] = polar(f.joints[sh], UPPER_ARM, a);
        let k = f.joints[knee];
        let e = f.joints[el];
        let ang = (k.0 - e.0).atan2(k.1 - e.1);
        f.joints[wr] = polar(e, FOREARM, ang);
    }
    f
}

fn lying(rng: &mut ChaCha8Rng) -> Figure {
    let mut f = upright(rng, 0.52);
    for (side, (sh, el, wr)) in [(1.0, (L_SHOULDER, L_ELBOW, L_WRIST)), (-1.0, (R_SHOULDER, R_ELBOW, R_WRIST))] {
        let a = side * rng.random_range(0.3..2.2);
        f.joints[el] = polar(f.joints[sh], UPPER_ARM, a);
        f.joints[wr] = polar(f.joints[el], FOREARM, a + side * rng.random_range(-0.3..0.3));
    }
    for (side, (hip, knee, ankle)) in [(1.0, (L_HIP, L_KNEE, L_ANKLE)), (-1.0, (R_HIP, R_KNEE, R_ANKLE))] {
        let a = side * rng.random_range(0.0..0.35);
        f.joints[knee] = polar(f.joints[hip], THIGH, a);
        f.joints[ankle] = polar(f.joints[knee], SHIN, a + rng.random_range(-0.4..0.4));
    }
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let theta: f64 = sign * rng.random_range(1.35..1.8);
    let pivot = (0.0, 0.5);
    let rot = |p: (f64, f64)| {
        let (x, y) = (p.0 - pivot.0, p.1 - pivot.1);
        (pivot.0 + x * theta.cos() - y * theta.sin(), pivot.1 + x * theta.sin() + y * theta.cos())
    };
    f.joints = f.joints.map(rot);
    f.head = rot(f.head);
    f
}

/// Upright actor facing `dir` (+1 right, -1 left) with both arms reaching forward.
fn fighter(rng: &mut ChaCha8Rng, dir: f64) -> Figure {
    let mut f = upright(rng, 0.52);
    standing_legs(rng, &mut f);
    for (sh, el, wr) in [(L_SHOULDER, L_ELBOW, L_WRIST), (R_SHOULDER, R_ELBOW, R_WRIST)] {
        let a = dir * rng.random_range(1.2..1.9);
        f.joints[el] = polar(f.joints[sh], UPPER_ARM, a);
        f.joints[wr] = polar(f.joints[el], FOREARM, a + dir * rng.random_range(-0.2..0.3));
    }
    f
}

/// A figure placed in image pixels.
#[derive(Clone, Debug)]
struct Placed {
    joints: Joints,
    head: (f64, f64),
    head_radius: f64,
    limb_radius: f64,
    color: Rgb<u8>,
}

impl Placed {
    fn new(f: &Figure, scale: f64, offset: (f64, f64), color: Rgb<u8>) -> Self {
        let tf = |p: (f64, f64)| (offset.0 + p.0 * scale, offset.1 + p.1 * scale);
        Placed {
            joints: f.joints.map(tf),
            head: tf(f.head),
            head_radius: HEAD_RADIUS * scale,
            limb_radius: (0.025 * scale).max(1.0),
            color,
        }
    }

    /// Conservative pixel extent of everything this figure paints.
    fn extent(&self) -> BBox {
        let mut b = BBox::new(
            self.head.0 - self.head_radius,
            self.head.1 - self.head_radius,
            self.head.0 + self.head_radius,
            self.head.1 + self.head_radius,
        );
        for &(x, y) in &self.joints[5..] {
            let r = self.limb_radius;
            b = b.union_hull(&BBox::new(x - r, y - r, x + r, y + r));
        }
        b
    }

    fn neck(&self) -> ((f64, f64), (f64, f64)) {
        let s = (
            (self.joints[L_SHOULDER].0 + self.joints[R_SHOULDER].0) / 2.0,
            (self.joints[L_SHOULDER].1 + self.joints[R_SHOULDER].1) / 2.0,
        );
        (self.head, s)
    }
}

/// Painter that records which actor last covered each pixel.
struct Canvas {
    img: RgbImage,
    owner: Vec<i32>,
}

impl Canvas {
    fn paint_if(
        &mut self,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        color: Rgb<u8>,
        owner: i32,
        inside: impl Fn(f64, f64) -> bool,
    ) {
        let (w, h) = self.img.dimensions();
        let xa = x0.floor().max(0.0) as u32;
        let ya = y0.floor().max(0.0) as u32;
        let xb = (x1.ceil().max(0.0) as u32).min(w);
        let yb = (y1.ceil().max(0.0) as u32).min(h);
        for py in ya..yb {
            for px in xa..xb {
                if inside(px as f64 + 0.5, py as f64 + 0.5) {
                    self.img.put_pixel(px, py, color);
                    self.owner[(py * w + px) as usize] = owner;
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), r: f64, color: Rgb<u8>, owner: i32) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let inside = |x: f64, y: f64| {
            let t = if len2 > 0.0 { (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (cx, cy) = (a.0 + t * dx - x, a.1 + t * dy - y);
            cx * cx + cy * cy <= r * r
        };
        self.paint_if(a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r, color, owner, inside);
    }

    fn disc(&mut self, c: (f64, f64), r: f64, color: Rgb<u8>, owner: i32) {
        let inside = |x: f64, y: f64| (x - c.0).powi(2) + (y - c.1).powi(2) <= r * r;
        self.paint_if(c.0 - r, c.1 - r, c.0 + r, c.1 + r, color, owner, inside);
    }

    fn figure(&mut self, p: &Placed, owner: i32) {
        let (h, n) = p.neck();
        self.segment(h, n, p.limb_radius, p.color, owner);
        for (a, b) in LIMBS {
            self.segment(p.joints[a], p.joints[b], p.limb_radius, p.color, owner);
        }
        self.disc(p.head, p.head_radius, p.color, owner);
    }

    /// Tight hull of the pixels owned by `owner`.
    fn hull(&self, owner: i32) -> Option<BBox> {
        let w = self.img.width() as usize;
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, &o) in self.owner.iter().enumerate() {
            if o == owner {
                let (x, y) = (i % w, i / w);
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        b.map(|(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
    }
}

fn figure_color(rng: &mut ChaCha8Rng) -> Rgb<u8> {
    Rgb([rng.random_range(10..100), rng.random_range(10..100), rng.random_range(10..100)])
}

fn sample_class(rng: &mut ChaCha8Rng, dist: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Build the figures of one labelled actor in unit coordinates, with their
/// horizontal offsets.
fn actor_figures(rng: &mut ChaCha8Rng, class: usize) -> Vec<(Figure, f64)> {
    match class {
        FIGHT => {
            let gap = rng.random_range(0.5..0.62);
            vec![(fighter(rng, 1.0), 0.0), (fighter(rng, -1.0), gap)]
        }
        TUMBLE => vec![(lying(rng), 0.0)],
        _ => vec![(squatting(rng), 0.0)],
    }
}

pub fn image_id(seed: u64, index: usize) -> String {
    format!("synth_s{seed}_{index:05}")
}

/// Render image `index` of the corpus described by `spec`.
pub fn render_scene(spec: &SceneSpec, index: usize) -> SyntheticImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let (w, h) = spec.image_size;
    let base = rng.random_range(150..230) as i32;
    let bg = Rgb([0, 1, 2].map(|_| (base + rng.random_range(-15..=15)).clamp(0, 255) as u8));
    let mut canvas = Canvas { img: RgbImage::from_pixel(w, h, bg), owner: vec![-1; (w * h) as usize] };

    let n_actors = rng.random_range(spec.actors_per_image.0..=spec.actors_per_image.1);
    let margin = 2.0;
    let mut actors: Vec<(usize, Vec<Placed>, BBox)> = Vec::new();
    for _ in 0..n_actors {
        let class = sample_class(&mut rng, &spec.class_distribution);
        let figs = actor_figures(&mut rng, class);
        let mut scale = rng.random_range(spec.scale_range.0..=spec.scale_range.1);
        let colors: Vec<Rgb<u8>> = figs.iter().map(|_| figure_color(&mut rng)).collect();
        let build = |scale: f64, at: (f64, f64)| -> Vec<Placed> {
            figs.iter().zip(&colors).map(|((f, dx), &c)| Placed::new(f, scale, (at.0 + dx * scale, at.1), c)).collect()
        };
        let union = |ps: &[Placed]| ps.iter().map(Placed::extent).reduce(|a, b| a.union_hull(&b)).unwrap();
        // shrink until the actor fits the frame
        let mut ext = union(&build(scale, (0.0, 0.0)));
        while ext.width() > w as f64 - 2.0 * margin || ext.height() > h as f64 - 2.0 * margin {
            scale *= 0.9;
            ext = union(&build(scale, (0.0, 0.0)));
        }
        let mut placed = None;
        for _ in 0..50 {
            let x = rng.random_range(margin..=(w as f64 - margin - ext.width()).max(margin)) - ext.x_min;
            let y = rng.random_range(margin..=(h as f64 - margin - ext.height()).max(margin)) - ext.y_min;
            let ps = build(scale, (x, y));
            let e = union(&ps);
            let grown = BBox::new(e.x_min - 4.0, e.y_min - 4.0, e.x_max + 4.0, e.y_max + 4.0);
            if actors.iter().all(|(_, _, other)| grown.intersection(other) == 0.0) {
                placed = Some((ps, e));
                break;
            }
        }
        if let Some((ps, e)) = placed {
            actors.push((class, ps, e));
        }
    }

    let mut boxes = Vec::new();
    let mut true_joints = Vec::new();
    for (ai, (class, ps, _)) in actors.iter().enumerate() {
        for p in ps {
            canvas.figure(p, ai as i32);
            true_joints.push(p.joints);
        }
        boxes.push(BoxAnnotation {
            class_id: *class,
            bbox: canvas.hull(ai as i32).expect("placed actor paints pixels"),
        });
    }

    let mut occluders: Vec<BBox> = Vec::new();
    for (_, _, e) in &actors {
        if rng.random::<f64>() < spec.occlusion_rate {
            let ow = e.width() * rng.random_range(0.3..0.6);
            let oh = e.height() * rng.random_range(0.3..0.6);
            let ox = rng.random_range(e.x_min..=(e.x_max - ow));
            let oy = rng.random_range(e.y_min..=(e.y_max - oh));
            let shade = rng.random_range(110..140);
            let color = Rgb([shade, shade, shade]);
            let o = BBox::new(ox, oy, ox + ow, oy + oh);
            canvas.paint_if(o.x_min, o.y_min, o.x_max, o.y_max, color, -2, |_, _| true);
            occluders.push(o);
        }
    }

    let noise = Normal::new(0.0, spec.keypoint_noise_px.max(1e-12)).expect("valid noise");
    let keypoints = true_joints
        .iter()
        .enumerate()
        .map(|(person_index, joints)| {
            let points = joints
                .iter()
                .map(|&(x, y)| {
                    let confidence: f64 = rng.random_range(0.6..1.0);
                    let (nx, ny) = if spec.keypoint_noise_px > 0.0 {
                        (noise.sample(&mut rng), noise.sample(&mut rng))
                    } else {
                        (0.0, 0.0)
                    };
                    let hidden = occluders.iter().any(|o| o.contains_strictly(x, y));
                    let (x, y) = ((x + nx).clamp(0.0, w as f64), (y + ny).clamp(0.0, h as f64));
                    (!hidden).then_some(Keypoint { x: round3(x), y: round3(y), confidence: round3(confidence) })
                })
                .collect();
            KeypointSet { person_index, points }
        })
        .collect();
    SyntheticImage { image_id: image_id(spec.seed, index), pixels: canvas.img, boxes, keypoints, true_joints }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Write `n_images` scenes under `out_dir` and return the manifest records.
///
/// Layout: `images/<id>.png`, `annotations/<id>.xml`, `keypoints/<id>.json`,
/// `manifest.jsonl` and `corpus.json` with the generating spec.
pub fn generate_corpus(spec: &SceneSpec, n_images: usize, out_dir: &Path) -> Result<Vec<ManifestRecord>, SynthError> {
    spec.validate()?;
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let classes = ClassMap::default();
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let scene = render_scene(spec, i);
        let id = &scene.image_id;
        let rec = ManifestRecord {
            image_id: id.clone(),
            image: format!("images/{id}.png"),
            boxes: format!("annotations/{id}.xml"),
            keypoints: Some(format!("keypoints/{id}.json")),
            width: spec.image_size.0,
            height: spec.image_size.1,
        };
        let img_path = out_dir.join(&rec.image);
        save_png_atomic(&img_path, &scene.pixels).map_err(io(&img_path))?;
        let xml = box_file_xml(&format!("{id}.png"), spec.image_size, &scene.boxes, &classes);
        let box_path = out_dir.join(&rec.boxes);
        write_atomic(&box_path, xml.as_bytes()).map_err(io(&box_path))?;
        let kp_path = out_dir.join(rec.keypoints.as_ref().unwrap());
        write_atomic(&kp_path, keypoint_file_json(&scene.keypoints).as_bytes()).map_err(io(&kp_path))?;
        records.push(rec);
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_atomic(&manifest, manifest_jsonl(&records).as_bytes()).map_err(io(&manifest))?;
    let meta =
        serde_json::json!({ "generator": "posedet-synth", "seed": spec.seed, "n_images": n_images, "spec": spec });
    let meta_path = out_dir.join("corpus.json");
    write_atomic(&meta_path, serde_json::to_string_pretty(&meta).unwrap().as_bytes()).map_err(io(&meta_path))?;
    Ok(records)
}

/// Behavior guess from box shape and keypoints alone: a horizontal torso or
/// a flat box means tumble, short legs relative to box height mean squat,
/// anything else is taken as a fight.
pub fn heuristic_class(bbox: &BBox, persons: &[&KeypointSet]) -> usize {
    let mut torso = Vec::new();
    let mut legs = Vec::new();
    for p in persons {
        let mid = |a: usize, b: usize| match (p.points[a], p.points[b]) {
            (Some(u), Some(v)) => Some(((u.x + v.x) / 2.0, (u.y + v.y) / 2.0)),
            _ => None,
        };
        if let (Some(s), Some(h)) = (mid(L_SHOULDER, R_SHOULDER), mid(L_HIP, R_HIP)) {
            torso.push((h.0 - s.0).abs() > (h.1 - s.1).abs());
        }
        for (hip, ankle) in [(L_HIP, L_ANKLE), (R_HIP, R_ANKLE)] {
            if let (Some(h), Some(a)) = (p.points[hip], p.points[ankle]) {
                legs.push((a.y - h.y) / bbox.height());
            }
        }
    }
    let aspect = bbox.width() / bbox.height();
    if aspect > 1.6 || (!torso.is_empty() && torso.iter().filter(|&&f| f).count() * 2 > torso.len()) {
        return TUMBLE;
    }
    if legs.is_empty() {
        return if aspect > 0.8 { FIGHT } else { SQUAT };
    }
    if legs.iter().sum::<f64>() / (legs.len() as f64) < 0.38 {
        SQUAT
    } else {
        FIGHT
    }
}

/// Angle in radians; exposed for tests of figure orientation.
pub fn torso_angle(joints: &[(f64, f64); 17]) -> f64 {
    let s = ((joints[L_SHOULDER].0 + joints[R_SHOULDER].0) / 2.0, (joints[L_SHOULDER].1 + joints[R_SHOULDER].1) / 2.0);
    let h = ((joints[L_HIP].0 + joints[R_HIP].0) / 2.0, (joints[L_HIP].1 + joints[R_HIP].1) / 2.0);
    let a = (h.0 - s.0).atan2(h.1 - s.1).abs();
    a.min(PI - a)
}
