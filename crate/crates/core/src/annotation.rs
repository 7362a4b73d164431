//! Box and keypoint annotation ingest.
//!
//! Box files are Pascal-VOC-style XML (one `<object>` per labeled behavior),
//! keypoint files are the per-image JSON list written by bottom-up pose
//! estimators (`[{"keypoints": [x, y, c, ...]}, ...]`). Both formats are
//! described byte for byte in `docs/data_formats.md`.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

pub const DEFAULT_NUM_KEYPOINTS: usize = 17;
pub const DEFAULT_ABSENT_THRESHOLD: f64 = 0.1;
/// Network input size `(width, height)` for full-scale models.
pub const STANDARD_SIZE: (u32, u32) = (1152, 768);

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed annotation {path}: {reason}")]
    MalformedAnnotation { path: PathBuf, reason: String },
    #[error("unknown class {name:?} in {path}")]
    UnknownClass { path: PathBuf, name: String },
    #[error("degenerate box #{index} in {path}: zero area after normalization")]
    DegenerateBox { path: PathBuf, index: usize },
    #[error("keypoint entry #{person} in {path} has {got} numbers, expected {expected}")]
    ArityMismatch { path: PathBuf, person: usize, expected: usize, got: usize },
    #[error("box #{index} of image {image_id} lies entirely outside the {width}x{height} frame")]
    EmptyAfterClip { image_id: String, index: usize, width: u32, height: u32 },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

impl AnnotationError {
    pub fn kind(&self) -> &'static str {
        match self {
            AnnotationError::MalformedAnnotation { .. } => "MalformedAnnotation",
            AnnotationError::UnknownClass { .. } => "UnknownClass",
            AnnotationError::DegenerateBox { .. } => "DegenerateBox",
            AnnotationError::ArityMismatch { .. } => "ArityMismatch",
            AnnotationError::EmptyAfterClip { .. } => "EmptyAfterClip",
            AnnotationError::Io { .. } => "IoError",
            AnnotationError::Image { .. } => "IoError",
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> AnnotationError {
    AnnotationError::MalformedAnnotation { path: path.to_path_buf(), reason: reason.into() }
}

fn read_text(path: &Path) -> Result<String, AnnotationError> {
    std::fs::read_to_string(path).map_err(|source| AnnotationError::Io { path: path.to_path_buf(), source })
}

/// Ordered behavior names; a class id is an index into this list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub names: Vec<String>,
}

impl Default for ClassMap {
    fn default() -> Self {
        ClassMap { names: ["fight", "tumble", "squat"].iter().map(|s| s.to_string()).collect() }
    }
}

impl ClassMap {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }
}

/// Knobs of the ingest layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub classes: ClassMap,
    pub num_keypoints: usize,
    /// Keypoints with confidence at or below this value are flagged absent.
    pub absent_threshold: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            classes: ClassMap::default(),
            num_keypoints: DEFAULT_NUM_KEYPOINTS,
            absent_threshold: DEFAULT_ABSENT_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// One person's K keypoints. `None` marks an absent keypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub person_index: usize,
    pub points: Vec<Option<Keypoint>>,
}

impl KeypointSet {
    pub fn present_count(&self) -> usize {
        self.points.iter().flatten().count()
    }

    pub fn map_points(&self, f: impl Fn(&Keypoint) -> Keypoint) -> KeypointSet {
        KeypointSet {
            person_index: self.person_index,
            points: self.points.iter().map(|p| p.as_ref().map(&f)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image_id: String,
    pub pixels: RgbImage,
    pub boxes: Vec<BoxAnnotation>,
    pub keypoints: Vec<KeypointSet>,
    /// `(width, height)` of the image as it was read from disk.
    pub source_size: (u32, u32),
}

impl ImageSample {
    pub fn size(&self) -> (u32, u32) {
        self.pixels.dimensions()
    }
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children().find(|c| c.has_tag_name(tag)).and_then(|c| c.text()).map(str::trim)
}

/// Parse a Pascal-VOC-style box file.
pub fn parse_box_file(path: &Path, classes: &ClassMap) -> Result<Vec<BoxAnnotation>, AnnotationError> {
    parse_box_xml(&read_text(path)?, path, classes)
}

pub fn parse_box_xml(text: &str, path: &Path, classes: &ClassMap) -> Result<Vec<BoxAnnotation>, AnnotationError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| malformed(path, e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(malformed(path, format!("root element is <{}>, expected <annotation>", root.tag_name().name())));
    }
    let mut out = Vec::new();
    for (index, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let name = child_text(obj, "name").ok_or_else(|| malformed(path, format!("object #{index} has no <name>")))?;
        let class_id = classes
            .id(name)
            .ok_or_else(|| AnnotationError::UnknownClass { path: path.to_path_buf(), name: name.to_string() })?;
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| malformed(path, format!("object #{index} has no <bndbox>")))?;
        let coord = |tag: &str| -> Result<f64, AnnotationError> {
            let raw =
                child_text(bnd, tag).ok_or_else(|| malformed(path, format!("object #{index} missing <{tag}>")))?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(path, format!("object #{index} <{tag}> is not a number: {raw:?}")))
        };
        let bbox = BBox::normalized(coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        if !bbox.is_proper() {
            return Err(AnnotationError::DegenerateBox { path: path.to_path_buf(), index });
        }
        out.push(BoxAnnotation { class_id, bbox });
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Serialize boxes in the layout written by common VOC labeling tools.
pub fn box_file_xml(filename: &str, size: (u32, u32), boxes: &[BoxAnnotation], classes: &ClassMap) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    s.push_str("\t<folder>images</folder>\n");
    s.push_str(&format!("\t<filename>{}</filename>\n", xml_escape(filename)));
    s.push_str(&format!(
        "\t<size>\n\t\t<width>{}</width>\n\t\t<height>{}</height>\n\t\t<depth>3</depth>\n\t</size>\n",
        size.0, size.1
    ));
    s.push_str("\t<segmented>0</segmented>\n");
    for b in boxes {
        s.push_str("\t<object>\n");
        s.push_str(&format!("\t\t<name>{}</name>\n", xml_escape(classes.name(b.class_id))));
        s.push_str("\t\t<pose>Unspecified</pose>\n\t\t<truncated>0</truncated>\n\t\t<difficult>0</difficult>\n");
        s.push_str(&format!(
            "\t\t<bndbox>\n\t\t\t<xmin>{}</xmin>\n\t\t\t<ymin>{}</ymin>\n\t\t\t<xmax>{}</xmax>\n\t\t\t<ymax>{}</ymax>\n\t\t</bndbox>\n",
            b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max
        ));
        s.push_str("\t</object>\n");
    }
    s.push_str("</annotation>\n");
    s
}

#[derive(Serialize, Deserialize)]
struct PersonRecord {
    keypoints: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_id: Option<u32>,
}

/// Parse a keypoint file.
pub fn parse_keypoint_file(path: &Path, config: &IngestConfig) -> Result<Vec<KeypointSet>, AnnotationError> {
    parse_keypoint_json(&read_text(path)?, path, config)
}

pub fn parse_keypoint_json(
    text: &str,
    path: &Path,
    config: &IngestConfig,
) -> Result<Vec<KeypointSet>, AnnotationError> {
    let persons: Vec<PersonRecord> = serde_json::from_str(text).map_err(|e| malformed(path, e.to_string()))?;
    let k = config.num_keypoints;
    persons
        .into_iter()
        .enumerate()
        .map(|(person_index, rec)| {
            if rec.keypoints.len() != 3 * k {
                return Err(AnnotationError::ArityMismatch {
                    path: path.to_path_buf(),
                    person: person_index,
                    expected: 3 * k,
                    got: rec.keypoints.len(),
                });
            }
            let nums: Vec<f64> =
                rec.keypoints.iter().map(|v| v.as_f64().filter(|x| x.is_finite())).collect::<Option<_>>().ok_or_else(
                    || malformed(path, format!("person #{person_index} has a non-numeric keypoint value")),
                )?;
            let points = nums
                .chunks_exact(3)
                .map(|c| (c[2] > config.absent_threshold).then_some(Keypoint { x: c[0], y: c[1], confidence: c[2] }))
                .collect();
            Ok(KeypointSet { person_index, points })
        })
        .collect()
}

/// Serialize keypoint sets; absent points are written as `0, 0, 0`.
pub fn keypoint_file_json(sets: &[KeypointSet]) -> String {
    let records: Vec<PersonRecord> = sets
        .iter()
        .map(|set| {
            let mut nums = Vec::with_capacity(set.points.len() * 3);
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            let mut conf_sum = 0.0;
            for p in &set.points {
                match p {
                    Some(kp) => {
                        nums.extend([kp.x, kp.y, kp.confidence]);
                        x0 = x0.min(kp.x);
                        y0 = y0.min(kp.y);
                        x1 = x1.max(kp.x);
                        y1 = y1.max(kp.y);
                        conf_sum += kp.confidence;
                    }
                    None => nums.extend([0.0, 0.0, 0.0]),
                }
            }
            let present = set.present_count();
            PersonRecord {
                keypoints: nums.into_iter().map(serde_json::Value::from).collect(),
                bbox: (present > 0).then(|| [x0, y0, x1 - x0, y1 - y0]),
                score: (present > 0).then(|| conf_sum / set.points.len() as f64),
                category_id: Some(1),
            }
        })
        .collect();
    serde_json::to_string(&records).expect("keypoint records serialize")
}

/// Size after padding bottom/right to the aspect ratio of `target`, never cropping.
pub fn padded_size(size: (u32, u32), target: (u32, u32)) -> (u32, u32) {
    let ((w, h), (tw, th)) = (size, target);
    if (w as u64) * (th as u64) > (h as u64) * (tw as u64) {
        (w, ((w as u64 * th as u64).div_ceil(tw as u64)) as u32)
    } else {
        (((h as u64 * tw as u64).div_ceil(th as u64)) as u32, h)
    }
}

/// Per-axis factors mapping source coordinates to standardized ones.
pub fn standardize_scale(size: (u32, u32), target: (u32, u32)) -> (f64, f64) {
    let (pw, ph) = padded_size(size, target);
    (target.0 as f64 / pw as f64, target.1 as f64 / ph as f64)
}

/// Pad bottom/right with black to the target aspect ratio, resize to
/// `target`, and carry boxes and keypoints through the same affine map.
pub fn standardize_sample(sample: &ImageSample, target: (u32, u32)) -> Result<ImageSample, AnnotationError> {
    let (tw, th) = target;
    let (pw, ph) = padded_size(sample.size(), target);
    let pixels = if (pw, ph) == (tw, th) {
        sample.pixels.clone()
    } else {
        let mut padded = RgbImage::new(pw, ph);
        image::imageops::replace(&mut padded, &sample.pixels, 0, 0);
        image::imageops::resize(&padded, tw, th, image::imageops::FilterType::Triangle)
    };
    let (sx, sy) = standardize_scale(sample.size(), target);
    let mut boxes = Vec::with_capacity(sample.boxes.len());
    for (index, b) in sample.boxes.iter().enumerate() {
        // the padding is not part of the image, so clip to the source frame first
        let (w, h) = sample.size();
        let clipped = b.bbox.clip(w as f64, h as f64).scale(sx, sy).clip(tw as f64, th as f64);
        if !clipped.is_proper() {
            return Err(AnnotationError::EmptyAfterClip {
                image_id: sample.image_id.clone(),
                index,
                width: tw,
                height: th,
            });
        }
        boxes.push(BoxAnnotation { class_id: b.class_id, bbox: clipped });
    }
    let keypoints = sample
        .keypoints
        .iter()
        .map(|s| s.map_points(|p| Keypoint { x: p.x * sx, y: p.y * sy, confidence: p.confidence }))
        .collect();
    Ok(ImageSample { image_id: sample.image_id.clone(), pixels, boxes, keypoints, source_size: sample.source_size })
}

/// One line of the corpus manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub image: String,
    pub boxes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<String>,
    pub width: u32,
    pub height: u32,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, AnnotationError> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn manifest_jsonl(records: &[ManifestRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("manifest record serializes") + "\n").collect()
}

pub fn load_image(path: &Path) -> Result<RgbImage, AnnotationError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| AnnotationError::Image { path: path.to_path_buf(), source })
}

/// Load one manifest record from disk.
pub fn load_record(dir: &Path, rec: &ManifestRecord, config: &IngestConfig) -> Result<ImageSample, AnnotationError> {
    let pixels = load_image(&dir.join(&rec.image))?;
    let boxes = parse_box_file(&dir.join(&rec.boxes), &config.classes)?;
    let keypoints = match &rec.keypoints {
        Some(p) => parse_keypoint_file(&dir.join(p), config)?,
        None => Vec::new(),
    };
    let source_size = pixels.dimensions();
    Ok(ImageSample { image_id: rec.image_id.clone(), pixels, boxes, keypoints, source_size })
}

/// Load every sample listed in a manifest.
pub fn load_corpus(manifest: &Path, config: &IngestConfig) -> Result<Vec<ImageSample>, AnnotationError> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?.iter().map(|r| load_record(dir, r, config)).collect()
}
