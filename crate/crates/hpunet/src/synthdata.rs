//! Synthetic datasets with analytically known output distributions: an
//! ambiguous-grader lesion task, an instance-colorization task, and a masked
//! extrapolation variant of the instance task.
//!
//! Generators are pure functions of (parameters, seed); sample `i` draws from
//! its own derived stream, so datasets regenerate bitwise from a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backend::rng::{RngState, Stream};
use crate::backend::tensor::Tensor;
use crate::io::archive::{self, ArchiveError, Record};

/// Radius range (inclusive) of the lesion disk.
const LESION_RADIUS: (usize, usize) = (5, 9);
/// Per-grader radius offsets, cycled when there are more graders.
pub const DEFAULT_JITTER: [i32; 4] = [-1, 0, 1, 2];
/// Additive Gaussian image noise on a [0, 1] intensity scale.
const NOISE_SIGMA: f64 = 0.1;
/// Blob half-extent range (inclusive) for the instance task.
const BLOB_EXTENT: (usize, usize) = (3, 6);
/// Placement attempts per blob before giving up.
const PLACEMENT_RETRIES: usize = 200;
/// Salt mixed into the seed for the extrapolation re-colorization stream so
/// it never replays the base generator's draws.
const EXTRAP_RECOLOR_SALT: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("probability {p} out of [0, 1]")]
    BadProbability { p: f64 },
    #[error("at least one grader is required")]
    NoGraders,
    #[error("jitter offset list is empty")]
    NoJitter,
    #[error("image size {size} cannot fit a radius-{radius} disk with jitter margin (needs ≥ {need})")]
    DiskDoesNotFit { size: usize, radius: usize, need: usize },
    #[error("class id count {c} out of [2, 64]")]
    BadClassCount { c: usize },
    #[error("blob count range [{lo}, {hi}] is invalid")]
    BadBlobRange { lo: usize, hi: usize },
    #[error("sample {sample}: could not place blob {blob} of {total} in a {size}x{size} image after {retries} attempts")]
    PlacementFailed { sample: usize, blob: usize, total: usize, size: usize, retries: usize },
    #[error("mask fraction {f} out of [0, 1)")]
    BadMaskFraction { f: f64 },
    #[error("extrapolation needs a non-empty base dataset")]
    EmptyBase,
    #[error("sample {sample} has no instance map")]
    MissingInstances { sample: usize },
    #[error("instance map references id {id} but only {count} instances exist")]
    InvalidInstanceMap { id: i32, count: usize },
    #[error("manifest line {line}: unknown key `{key}`")]
    ManifestKey { line: usize, key: String },
    #[error("manifest line {line}: {message}")]
    ManifestValue { line: usize, message: String },
    #[error("manifest is missing field `{field}`")]
    ManifestMissing { field: &'static str },
    #[error("unknown task kind `{value}`")]
    UnknownTask { value: String },
    #[error("archive record `{name}` is missing")]
    MissingRecord { name: String },
    #[error("archive record `{name}` has shape {got:?}, expected {want:?}")]
    RecordShape { name: String, want: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("dataset i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Geometry of the single lesion disk in a grader-task image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiskGeometry {
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
}

/// Per-sample metadata carried alongside the tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub index: usize,
    /// Lesion task: whether the latent mode is "abnormal" (graded nonempty).
    pub abnormal: Option<bool>,
    /// Lesion task: disk placement, for oracle evaluation.
    pub disk: Option<DiskGeometry>,
    /// Instance tasks: number of placed blobs.
    pub instance_count: Option<usize>,
}

/// One dataset element: an image, one or more integer label targets, and
/// task-dependent side information.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    /// [input_channels, H, W] on a [0, 1] intensity scale (plus noise).
    pub image: Tensor<f32>,
    /// [H, W] label maps: one per grader, or a single id-assignment.
    pub targets: Vec<Tensor<i32>>,
    /// Ground-truth instance partition (ids 1..=K, background 0).
    pub instances: Option<Tensor<i32>>,
    /// Extrapolation: 1.0 on hidden columns, 0.0 on visible ones.
    pub mask: Option<Tensor<f32>>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Lesions,
    Instances,
    Extrapolation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Lesions => "lesions",
            TaskKind::Instances => "instances",
            TaskKind::Extrapolation => "extrapolation",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "lesions" => Ok(TaskKind::Lesions),
            "instances" => Ok(TaskKind::Instances),
            "extrapolation" => Ok(TaskKind::Extrapolation),
            other => Err(DataError::UnknownTask { value: other.to_string() }),
        }
    }
}

/// Task-specific generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskParams {
    Lesions { p_abnormal: f64, graders: usize, jitter: Vec<i32> },
    Instances { k_lo: usize, k_hi: usize, class_ids: usize },
    Extrapolation { k_lo: usize, k_hi: usize, class_ids: usize, mask_fraction: f64 },
}

/// Everything needed to regenerate a dataset bitwise, plus the reference to
/// its tensor archive.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub params: TaskParams,
    /// File name of the tensor archive holding the samples.
    pub archive: String,
}

impl DatasetManifest {
    /// Number of segmentation classes including background.
    pub fn num_classes(&self) -> usize {
        match &self.params {
            TaskParams::Lesions { .. } => 2,
            TaskParams::Instances { class_ids, .. }
            | TaskParams::Extrapolation { class_ids, .. } => class_ids + 1,
        }
    }

    /// Number of image channels the prior network consumes.
    pub fn input_channels(&self) -> usize {
        match &self.params {
            TaskParams::Extrapolation { class_ids, .. } => 2 + (class_ids + 1),
            _ => 1,
        }
    }

    /// Regenerates every sample; bitwise identical across calls.
    pub fn generate(&self) -> Result<Vec<TaskSample>, DataError> {
        match &self.params {
            TaskParams::Lesions { p_abnormal, graders, jitter } => Ok(gen_ambiguous_lesions(
                self.count,
                self.size,
                *p_abnormal,
                *graders,
                jitter,
                self.seed,
            )?
            .0),
            TaskParams::Instances { k_lo, k_hi, class_ids } => {
                gen_instances(self.count, self.size, (*k_lo, *k_hi), *class_ids, self.seed)
            }
            TaskParams::Extrapolation { k_lo, k_hi, class_ids, mask_fraction } => {
                let base =
                    gen_instances(self.count, self.size, (*k_lo, *k_hi), *class_ids, self.seed)?;
                gen_extrapolation(&base, *class_ids, *mask_fraction, self.seed ^ EXTRAP_RECOLOR_SALT)
            }
        }
    }

    /// Serializes as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("task = {}\n", self.task.name()));
        out.push_str(&format!("count = {}\n", self.count));
        out.push_str(&format!("size = {}\n", self.size));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("archive = {}\n", self.archive));
        match &self.params {
            TaskParams::Lesions { p_abnormal, graders, jitter } => {
                out.push_str(&format!("p_abnormal = {p_abnormal}\n"));
                out.push_str(&format!("graders = {graders}\n"));
                let j: Vec<String> = jitter.iter().map(|v| v.to_string()).collect();
                out.push_str(&format!("jitter = {}\n", j.join(",")));
            }
            TaskParams::Instances { k_lo, k_hi, class_ids } => {
                out.push_str(&format!("k_lo = {k_lo}\nk_hi = {k_hi}\nclass_ids = {class_ids}\n"));
            }
            TaskParams::Extrapolation { k_lo, k_hi, class_ids, mask_fraction } => {
                out.push_str(&format!("k_lo = {k_lo}\nk_hi = {k_hi}\nclass_ids = {class_ids}\n"));
                out.push_str(&format!("mask_fraction = {mask_fraction}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut fields: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(DataError::ManifestValue {
                    line,
                    message: format!("expected `key = value`, got `{stripped}`"),
                });
            };
            let key = key.trim().to_string();
            if fields.contains_key(&key) {
                return Err(DataError::ManifestValue {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            fields.insert(key, (line, value.trim().to_string()));
        }

        fn take(
            fields: &mut BTreeMap<String, (usize, String)>,
            key: &'static str,
        ) -> Result<(usize, String), DataError> {
            fields.remove(key).ok_or(DataError::ManifestMissing { field: key })
        }
        fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, DataError> {
            v.parse().map_err(|_| DataError::ManifestValue {
                line,
                message: format!("cannot parse `{v}` for `{key}`"),
            })
        }

        let (_, task) = take(&mut fields, "task")?;
        let task = TaskKind::parse(&task)?;
        let (l, v) = take(&mut fields, "count")?;
        let count: usize = parse_num(l, "count", &v)?;
        let (l, v) = take(&mut fields, "size")?;
        let size: usize = parse_num(l, "size", &v)?;
        let (l, v) = take(&mut fields, "seed")?;
        let seed: u64 = parse_num(l, "seed", &v)?;
        let (_, archive) = take(&mut fields, "archive")?;

        let params = match task {
            TaskKind::Lesions => {
                let (l, v) = take(&mut fields, "p_abnormal")?;
                let p_abnormal: f64 = parse_num(l, "p_abnormal", &v)?;
                let (l, v) = take(&mut fields, "graders")?;
                let graders: usize = parse_num(l, "graders", &v)?;
                let (l, v) = take(&mut fields, "jitter")?;
                let jitter = v
                    .split(',')
                    .map(|s| parse_num::<i32>(l, "jitter", s.trim()))
                    .collect::<Result<Vec<i32>, _>>()?;
                TaskParams::Lesions { p_abnormal, graders, jitter }
            }
            TaskKind::Instances | TaskKind::Extrapolation => {
                let (l, v) = take(&mut fields, "k_lo")?;
                let k_lo: usize = parse_num(l, "k_lo", &v)?;
                let (l, v) = take(&mut fields, "k_hi")?;
                let k_hi: usize = parse_num(l, "k_hi", &v)?;
                let (l, v) = take(&mut fields, "class_ids")?;
                let class_ids: usize = parse_num(l, "class_ids", &v)?;
                if task == TaskKind::Extrapolation {
                    let (l, v) = take(&mut fields, "mask_fraction")?;
                    let mask_fraction: f64 = parse_num(l, "mask_fraction", &v)?;
                    TaskParams::Extrapolation { k_lo, k_hi, class_ids, mask_fraction }
                } else {
                    TaskParams::Instances { k_lo, k_hi, class_ids }
                }
            }
        };

        if let Some((key, (line, _))) = fields.into_iter().next() {
            return Err(DataError::ManifestKey { line, key });
        }
        Ok(DatasetManifest { task, count, size, seed, params, archive })
    }
}

/// Oracle for the lesion task: the exact law of a uniformly chosen grader's
/// label map given the disk geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionOracle {
    pub p_abnormal: f64,
    /// Offset used by each grader (jitter list cycled over grader count).
    pub grader_offsets: Vec<i32>,
    pub size: usize,
}

impl LesionOracle {
    /// Probability that a sampled grading is nonempty.
    pub fn nonempty_probability(&self) -> f64 {
        self.p_abnormal
    }

    /// Draws one grading from the exact generative law: with probability
    /// `p_abnormal` a uniformly chosen grader outlines the disk at their
    /// fixed radius offset; otherwise the grading is empty.
    pub fn sample_grading(&self, disk: &DiskGeometry, rng: &mut RngState) -> Tensor<i32> {
        let mut map = Tensor::zeros(&[self.size, self.size]);
        if rng.coin(self.p_abnormal) {
            let offset = self.grader_offsets[rng.below(self.grader_offsets.len())];
            paint_disk(&mut map, disk.cx, disk.cy, offset_radius(disk.radius, offset), 1);
        }
        map
    }
}

fn offset_radius(radius: usize, offset: i32) -> usize {
    (radius as i64 + offset as i64).max(1) as usize
}

fn paint_disk(map: &mut Tensor<i32>, cx: usize, cy: usize, radius: usize, label: i32) {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let r2 = (radius * radius) as i64;
    for y in 0..h {
        for x in 0..w {
            let dy = y as i64 - cy as i64;
            let dx = x as i64 - cx as i64;
            if dy * dy + dx * dx <= r2 {
                let idx = map.idx2(y, x);
                map.data_mut()[idx] = label;
            }
        }
    }
}

/// Generates the ambiguous-grader lesion dataset: every image shows a noisy
/// bright disk; a latent coin (not recoverable from the image) decides
/// whether all graders outline it (each at their fixed radius offset) or all
/// gradings are empty.
pub fn gen_ambiguous_lesions(
    count: usize,
    size: usize,
    p_abnormal: f64,
    graders: usize,
    jitter: &[i32],
    seed: u64,
) -> Result<(Vec<TaskSample>, LesionOracle), DataError> {
    if !(0.0..=1.0).contains(&p_abnormal) {
        return Err(DataError::BadProbability { p: p_abnormal });
    }
    if graders == 0 {
        return Err(DataError::NoGraders);
    }
    if jitter.is_empty() {
        return Err(DataError::NoJitter);
    }
    let max_jitter = jitter.iter().copied().max().unwrap().max(0) as usize;
    let need = 2 * LESION_RADIUS.1 + 2 * max_jitter + 3;
    if size < need {
        return Err(DataError::DiskDoesNotFit { size, radius: LESION_RADIUS.1, need });
    }

    let offsets: Vec<i32> = (0..graders).map(|i| jitter[i % jitter.len()]).collect();
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = RngState::for_stream(seed, Stream::DataSample, index as u64);
        let radius = LESION_RADIUS.0 + rng.below(LESION_RADIUS.1 - LESION_RADIUS.0 + 1);
        let margin = radius + max_jitter + 1;
        let span = size - 2 * margin;
        let cx = margin + rng.below(span + 1);
        let cy = margin + rng.below(span + 1);
        let abnormal = rng.coin(p_abnormal);

        let mut image = Tensor::zeros(&[1, size, size]);
        let r2 = (radius * radius) as i64;
        for y in 0..size {
            for x in 0..size {
                let dy = y as i64 - cy as i64;
                let dx = x as i64 - cx as i64;
                let base = if dy * dy + dx * dx <= r2 { 0.8 } else { 0.2 };
                image.data_mut()[y * size + x] = (base + NOISE_SIGMA * rng.normal_f64()) as f32;
            }
        }

        let targets = offsets
            .iter()
            .map(|&off| {
                let mut map = Tensor::zeros(&[size, size]);
                if abnormal {
                    paint_disk(&mut map, cx, cy, offset_radius(radius, off), 1);
                }
                map
            })
            .collect();

        samples.push(TaskSample {
            image,
            targets,
            instances: None,
            mask: None,
            meta: SampleMeta {
                index,
                abnormal: Some(abnormal),
                disk: Some(DiskGeometry { cx, cy, radius }),
                instance_count: None,
            },
        });
    }
    let oracle = LesionOracle { p_abnormal, grader_offsets: offsets, size };
    Ok((samples, oracle))
}

/// Assigns each instance id in 1..=count a class id drawn uniformly from
/// 1..=class_ids (background stays 0). Used at generation time and for
/// per-step re-colorization during training.
pub fn colorize_instances(
    instances: &Tensor<i32>,
    count: usize,
    class_ids: usize,
    rng: &mut RngState,
) -> Result<Tensor<i32>, DataError> {
    if class_ids < 2 || class_ids > 64 {
        return Err(DataError::BadClassCount { c: class_ids });
    }
    let assignment: Vec<i32> =
        (0..count).map(|_| 1 + rng.below(class_ids) as i32).collect();
    let mut out = instances.clone();
    for v in out.data_mut() {
        if *v != 0 {
            if *v < 0 || *v > count as i32 {
                return Err(DataError::InvalidInstanceMap { id: *v, count });
            }
            *v = assignment[(*v - 1) as usize];
        }
    }
    Ok(out)
}

/// Generates the instance-colorization dataset: K non-overlapping blobs
/// (disks and rectangles) with placement-order intensities; the target maps
/// each blob to a uniformly drawn class id, so identity is pure latent
/// information and the image is identical across valid assignments.
pub fn gen_instances(
    count: usize,
    size: usize,
    k_range: (usize, usize),
    class_ids: usize,
    seed: u64,
) -> Result<Vec<TaskSample>, DataError> {
    let (k_lo, k_hi) = k_range;
    if k_lo == 0 || k_lo > k_hi {
        return Err(DataError::BadBlobRange { lo: k_lo, hi: k_hi });
    }
    if class_ids < 2 || class_ids > 64 {
        return Err(DataError::BadClassCount { c: class_ids });
    }

    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = RngState::for_stream(seed, Stream::DataSample, index as u64);
        let k = k_lo + rng.below(k_hi - k_lo + 1);
        let mut instances: Tensor<i32> = Tensor::zeros(&[size, size]);
        let mut shading = vec![0.05f64; size * size];

        for blob in 0..k {
            let intensity = if k > 1 { 0.25 + 0.7 * blob as f64 / (k - 1) as f64 } else { 0.6 };
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let rect = rng.coin(0.5);
                let hx = BLOB_EXTENT.0 + rng.below(BLOB_EXTENT.1 - BLOB_EXTENT.0 + 1);
                let hy = if rect {
                    BLOB_EXTENT.0 + rng.below(BLOB_EXTENT.1 - BLOB_EXTENT.0 + 1)
                } else {
                    hx
                };
                let margin_x = hx + 1;
                let margin_y = hy + 1;
                if size < 2 * margin_x + 1 || size < 2 * margin_y + 1 {
                    continue;
                }
                let cx = margin_x + rng.below(size - 2 * margin_x);
                let cy = margin_y + rng.below(size - 2 * margin_y);

                let covers = |y: usize, x: usize| -> bool {
                    let dy = y as i64 - cy as i64;
                    let dx = x as i64 - cx as i64;
                    if rect {
                        dx.abs() <= hx as i64 && dy.abs() <= hy as i64
                    } else {
                        dx * dx + dy * dy <= (hx * hx) as i64
                    }
                };
                // A one-pixel halo must also be free so blobs never touch.
                let mut clear = true;
                'scan: for y in cy.saturating_sub(hy + 1)..=(cy + hy + 1).min(size - 1) {
                    for x in cx.saturating_sub(hx + 1)..=(cx + hx + 1).min(size - 1) {
                        if covers(y, x) {
                            for ny in y.saturating_sub(1)..=(y + 1).min(size - 1) {
                                for nx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                                    if instances.data()[ny * size + nx] != 0 {
                                        clear = false;
                                        break 'scan;
                                    }
                                }
                            }
                        }
                    }
                }
                if !clear {
                    continue;
                }
                for y in cy - hy..=cy + hy {
                    for x in cx - hx..=cx + hx {
                        if covers(y, x) {
                            instances.data_mut()[y * size + x] = (blob + 1) as i32;
                            shading[y * size + x] = intensity;
                        }
                    }
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(DataError::PlacementFailed {
                    sample: index,
                    blob,
                    total: k,
                    size,
                    retries: PLACEMENT_RETRIES,
                });
            }
        }

        let mut image = Tensor::zeros(&[1, size, size]);
        for (i, &v) in shading.iter().enumerate() {
            image.data_mut()[i] = (v + NOISE_SIGMA * rng.normal_f64()) as f32;
        }
        let target = colorize_instances(&instances, k, class_ids, &mut rng)?;

        samples.push(TaskSample {
            image,
            targets: vec![target],
            instances: Some(instances),
            mask: None,
            meta: SampleMeta {
                index,
                abnormal: None,
                disk: None,
                instance_count: Some(k),
            },
        });
    }
    Ok(samples)
}

/// One-hot encodes a label map into [num_classes, H, W] floats.
pub fn one_hot(map: &Tensor<i32>, num_classes: usize) -> Tensor<f32> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = Tensor::zeros(&[num_classes, h, w]);
    for (i, &label) in map.data().iter().enumerate() {
        let c = label as usize;
        out.data_mut()[c * h * w + i] = 1.0;
    }
    out
}

/// Derives the masked-extrapolation dataset from an instance dataset: the
/// right `mask_fraction` of columns is hidden, the prior input becomes
/// [masked image, masked one-hot target, mask channel] (mask = 1 on hidden
/// columns), and the loss target stays the full segmentation. Targets are
/// re-colorized from `seed` so the op is reproducible on its own.
pub fn gen_extrapolation(
    base: &[TaskSample],
    class_ids: usize,
    mask_fraction: f64,
    seed: u64,
) -> Result<Vec<TaskSample>, DataError> {
    if !(0.0..1.0).contains(&mask_fraction) {
        return Err(DataError::BadMaskFraction { f: mask_fraction });
    }
    if base.is_empty() {
        return Err(DataError::EmptyBase);
    }
    let num_classes = class_ids + 1;

    let mut samples = Vec::with_capacity(base.len());
    for (index, src) in base.iter().enumerate() {
        let instances = src
            .instances
            .as_ref()
            .ok_or(DataError::MissingInstances { sample: index })?;
        let k = src.meta.instance_count.unwrap_or(0);
        let (h, w) = (instances.shape()[0], instances.shape()[1]);
        let hidden = (w as f64 * mask_fraction).round() as usize;
        let visible = w - hidden;

        let mut rng = RngState::for_stream(seed, Stream::DataSample, index as u64);
        let target = colorize_instances(instances, k, class_ids, &mut rng)?;
        let hot = one_hot(&target, num_classes);

        let channels = 2 + num_classes;
        let mut image = Tensor::zeros(&[channels, h, w]);
        let mut mask_map = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let hidden_here = x >= visible;
                if hidden_here {
                    mask_map.data_mut()[i] = 1.0;
                }
                image.data_mut()[i] = if hidden_here { 0.0 } else { src.image.data()[i] };
                for c in 0..num_classes {
                    image.data_mut()[(1 + c) * h * w + i] =
                        if hidden_here { 0.0 } else { hot.data()[c * h * w + i] };
                }
                image.data_mut()[(1 + num_classes) * h * w + i] = if hidden_here { 1.0 } else { 0.0 };
            }
        }

        samples.push(TaskSample {
            image,
            targets: vec![target],
            instances: Some(instances.clone()),
            mask: Some(mask_map),
            meta: SampleMeta {
                index,
                abnormal: None,
                disk: None,
                instance_count: Some(k),
            },
        });
    }
    Ok(samples)
}

fn meta_record(meta: &SampleMeta) -> Vec<i32> {
    let (cx, cy, r) = match meta.disk {
        Some(d) => (d.cx as i32, d.cy as i32, d.radius as i32),
        None => (-1, -1, -1),
    };
    vec![
        match meta.abnormal {
            None => -1,
            Some(false) => 0,
            Some(true) => 1,
        },
        cx,
        cy,
        r,
        meta.instance_count.map_or(-1, |k| k as i32),
    ]
}

fn meta_from_record(index: usize, v: &[i32]) -> SampleMeta {
    SampleMeta {
        index,
        abnormal: match v[0] {
            0 => Some(false),
            1 => Some(true),
            _ => None,
        },
        disk: if v[1] >= 0 {
            Some(DiskGeometry { cx: v[1] as usize, cy: v[2] as usize, radius: v[3] as usize })
        } else {
            None
        },
        instance_count: if v[4] >= 0 { Some(v[4] as usize) } else { None },
    }
}

fn sample_prefix(index: usize) -> String {
    format!("sample_{index:05}")
}

fn extents(shape: &[usize]) -> Vec<u32> {
    shape.iter().map(|&d| d as u32).collect()
}

/// Packs samples into archive records (names `sample_00000/image`, …).
pub fn dataset_records(samples: &[TaskSample]) -> Result<Vec<Record>, DataError> {
    let mut records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let p = sample_prefix(i);
        records.push(Record::f32(
            format!("{p}/image"),
            extents(s.image.shape()),
            s.image.data().to_vec(),
        )?);
        for (j, t) in s.targets.iter().enumerate() {
            records.push(Record::i32(
                format!("{p}/target_{j:02}"),
                extents(t.shape()),
                t.data().to_vec(),
            )?);
        }
        if let Some(inst) = &s.instances {
            records.push(Record::i32(
                format!("{p}/instances"),
                extents(inst.shape()),
                inst.data().to_vec(),
            )?);
        }
        if let Some(mask) = &s.mask {
            records.push(Record::f32(
                format!("{p}/mask"),
                extents(mask.shape()),
                mask.data().to_vec(),
            )?);
        }
        records.push(Record::i32(format!("{p}/meta"), vec![5], meta_record(&s.meta))?);
    }
    Ok(records)
}

fn f32_record(records: &[Record], name: &str) -> Result<Tensor<f32>, DataError> {
    let rec = archive::find(records, name)
        .ok_or_else(|| DataError::MissingRecord { name: name.into() })?;
    let data = rec.as_f32()?.to_vec();
    let shape = rec.shape();
    let len = data.len();
    Tensor::from_vec(&shape, data)
        .map_err(|_| DataError::RecordShape { name: name.into(), want: shape, got: vec![len] })
}

fn i32_record(records: &[Record], name: &str) -> Result<Tensor<i32>, DataError> {
    let rec = archive::find(records, name)
        .ok_or_else(|| DataError::MissingRecord { name: name.into() })?;
    let data = rec.as_i32()?.to_vec();
    let shape = rec.shape();
    let len = data.len();
    Tensor::from_vec(&shape, data)
        .map_err(|_| DataError::RecordShape { name: name.into(), want: shape, got: vec![len] })
}

/// Reconstructs samples from records written by [`dataset_records`].
pub fn dataset_from_records(
    records: &[Record],
    count: usize,
    graders: usize,
) -> Result<Vec<TaskSample>, DataError> {
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let p = sample_prefix(i);
        let image = f32_record(records, &format!("{p}/image"))?;
        let mut targets = Vec::new();
        for j in 0..graders.max(1) {
            let name = format!("{p}/target_{j:02}");
            if archive::find(records, &name).is_none() && j > 0 {
                break;
            }
            targets.push(i32_record(records, &name)?);
        }
        let instances = archive::find(records, &format!("{p}/instances"))
            .map(|_| i32_record(records, &format!("{p}/instances")))
            .transpose()?;
        let mask = archive::find(records, &format!("{p}/mask"))
            .map(|_| f32_record(records, &format!("{p}/mask")))
            .transpose()?;
        let meta_t = i32_record(records, &format!("{p}/meta"))?;
        samples.push(TaskSample {
            image,
            targets,
            instances,
            mask,
            meta: meta_from_record(i, meta_t.data()),
        });
    }
    Ok(samples)
}

/// Writes `manifest.txt` and the sample archive into `dir`.
pub fn save_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    samples: &[TaskSample],
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    let records = dataset_records(samples)?;
    archive::archive_write(&dir.join(&manifest.archive), &records)?;
    let manifest_path = dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest.to_text())
        .map_err(|e| DataError::Io { path: manifest_path.display().to_string(), source: e })?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<TaskSample>), DataError> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| DataError::Io { path: manifest_path.display().to_string(), source: e })?;
    let manifest = DatasetManifest::from_text(&text)?;
    let records = archive::archive_read(&dir.join(&manifest.archive))?;
    let graders = match &manifest.params {
        TaskParams::Lesions { graders, .. } => *graders,
        _ => 1,
    };
    let samples = dataset_from_records(&records, manifest.count, graders)?;
    Ok((manifest, samples))
}
