//! Instance segmentation from stochastic samples: greedy Hamming clustering
//! of per-pixel one-hot sample vectors, followed by erosion-based
//! post-processing that absorbs spurious fragments into their neighbors.

use crate::backend::rng::RngState;
use crate::backend::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("sample stack is empty")]
    EmptyStack,
    #[error("sample {index} has shape {got:?}, expected {want:?}")]
    ShapeMismatch { index: usize, want: Vec<usize>, got: Vec<usize> },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: i32, num_classes: usize },
    #[error("alpha = {alpha} would merge everything (must be < n*C = {limit})")]
    AlphaTooLarge { alpha: usize, limit: usize },
    #[error("background class {class} out of range for {num_classes} classes")]
    BadBackground { class: usize, num_classes: usize },
    #[error("{which} kernel size {value} must be odd")]
    EvenKernel { which: &'static str, value: usize },
    #[error("labeling contains negative label {label}")]
    NegativeLabel { label: i32 },
}

/// Per-pixel concatenated one-hot vectors of n samples over C classes,
/// packed into 64-bit words for popcount Hamming distances.
pub struct SampleStack {
    bits: Vec<u64>,
    words_per_pixel: usize,
    pub samples: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl SampleStack {
    /// Builds the stack from n label maps of shape [H, W] with labels in
    /// [0, num_classes).
    pub fn from_samples(maps: &[Tensor<i32>], num_classes: usize) -> Result<Self, ClusterError> {
        let first = maps.first().ok_or(ClusterError::EmptyStack)?;
        if num_classes == 0 {
            return Err(ClusterError::LabelOutOfRange { label: 0, num_classes });
        }
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let n = maps.len();
        let words_per_pixel = (n * num_classes).div_ceil(64);
        let mut bits = vec![0u64; h * w * words_per_pixel];
        for (s, m) in maps.iter().enumerate() {
            if m.shape() != first.shape() {
                return Err(ClusterError::ShapeMismatch {
                    index: s,
                    want: first.shape().to_vec(),
                    got: m.shape().to_vec(),
                });
            }
            for (pixel, &label) in m.data().iter().enumerate() {
                if label < 0 || label as usize >= num_classes {
                    return Err(ClusterError::LabelOutOfRange { label, num_classes });
                }
                let bit = s * num_classes + label as usize;
                bits[pixel * words_per_pixel + bit / 64] |= 1u64 << (bit % 64);
            }
        }
        Ok(SampleStack {
            bits,
            words_per_pixel,
            samples: n,
            classes: num_classes,
            height: h,
            width: w,
        })
    }

    fn words(&self, pixel: usize) -> &[u64] {
        &self.bits[pixel * self.words_per_pixel..(pixel + 1) * self.words_per_pixel]
    }

    /// Exact Hamming distance between two pixels' nC-vectors.
    pub fn hamming(&self, a: usize, b: usize) -> u32 {
        self.words(a)
            .iter()
            .zip(self.words(b))
            .map(|(&x, &y)| (x ^ y).count_ones())
            .sum()
    }

    fn hamming_to(&self, pixel: usize, prototype: &[u64]) -> u32 {
        self.words(pixel)
            .iter()
            .zip(prototype)
            .map(|(&x, &y)| (x ^ y).count_ones())
            .sum()
    }

    /// The all-background prototype vector (every sample votes
    /// `background_class`).
    fn background_prototype(&self, background_class: usize) -> Vec<u64> {
        let mut proto = vec![0u64; self.words_per_pixel];
        for s in 0..self.samples {
            let bit = s * self.classes + background_class;
            proto[bit / 64] |= 1u64 << (bit % 64);
        }
        proto
    }
}

/// Greedy Hamming clustering: pixels within `alpha` of the all-background
/// prototype form cluster 0; then random unassigned pixels seed clusters
/// 1, 2, … that absorb every unassigned pixel within `alpha`. Returns a
/// full labeling with consecutive ids from 0.
pub fn greedy_hamming_cluster(
    stack: &SampleStack,
    alpha: usize,
    background_class: usize,
    rng: &mut RngState,
) -> Result<Tensor<i32>, ClusterError> {
    let limit = stack.samples * stack.classes;
    if alpha >= limit {
        return Err(ClusterError::AlphaTooLarge { alpha, limit });
    }
    if background_class >= stack.classes {
        return Err(ClusterError::BadBackground {
            class: background_class,
            num_classes: stack.classes,
        });
    }

    let pixels = stack.height * stack.width;
    let mut labels = vec![-1i32; pixels];
    let bg = stack.background_prototype(background_class);
    let mut unassigned = Vec::new();
    for p in 0..pixels {
        if stack.hamming_to(p, &bg) as usize <= alpha {
            labels[p] = 0;
        } else {
            unassigned.push(p);
        }
    }

    let mut next_cluster = 1i32;
    while !unassigned.is_empty() {
        let pivot = unassigned[rng.below(unassigned.len())];
        let mut rest = Vec::with_capacity(unassigned.len());
        for &p in &unassigned {
            if stack.hamming(pivot, p) as usize <= alpha {
                labels[p] = next_cluster;
            } else {
                rest.push(p);
            }
        }
        unassigned = rest;
        next_cluster += 1;
    }

    Ok(Tensor::from_vec(&[stack.height, stack.width], labels).expect("full labeling"))
}

/// What to do with an eroded pixel whose neighborhood offers no valid label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// Keep the original cluster label (connectomics-style).
    KeepLabel,
    /// Paint it background (street-scene-style).
    Background,
}

/// Returns the set of nonzero cluster ids that survive binary erosion with
/// an n×n square structuring element (out-of-image counts as background).
fn erosion_survivors(map: &Tensor<i32>, n: usize) -> Vec<bool> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let max_label = map.data().iter().copied().max().unwrap_or(0).max(0) as usize;
    let mut survives = vec![false; max_label + 1];
    let half = n / 2;
    for cy in 0..h {
        for cx in 0..w {
            let label = map.data()[cy * w + cx];
            if label <= 0 || survives[label as usize] {
                continue;
            }
            if cy < half || cx < half || cy + half >= h || cx + half >= w {
                continue;
            }
            let mut all = true;
            'win: for y in cy - half..=cy + half {
                for x in cx - half..=cx + half {
                    if map.data()[y * w + x] != label {
                        all = false;
                        break 'win;
                    }
                }
            }
            if all {
                survives[label as usize] = true;
            }
        }
    }
    survives
}

/// Erosion-based cleanup: every cluster erased by n×n erosion has its
/// pixels repainted, in scan order and on the fly, with the majority label
/// of the m×m neighborhood — ignoring the pixel's own cluster and
/// background. Ties pick the smallest label; with no valid neighbor the
/// `fallback` applies. Output ids are re-compacted to be consecutive.
pub fn postprocess(
    labeling: &Tensor<i32>,
    erosion_n: usize,
    majority_m: usize,
    fallback: Fallback,
) -> Result<Tensor<i32>, ClusterError> {
    if erosion_n % 2 == 0 {
        return Err(ClusterError::EvenKernel { which: "erosion", value: erosion_n });
    }
    if majority_m % 2 == 0 {
        return Err(ClusterError::EvenKernel { which: "majority", value: majority_m });
    }
    if let Some(&bad) = labeling.data().iter().find(|&&v| v < 0) {
        return Err(ClusterError::NegativeLabel { label: bad });
    }

    let (h, w) = (labeling.shape()[0], labeling.shape()[1]);
    let survives = erosion_survivors(labeling, erosion_n);
    let mut out = labeling.clone();
    let half = majority_m / 2;
    for y in 0..h {
        for x in 0..w {
            let own = labeling.data()[y * w + x];
            if own == 0 || survives[own as usize] {
                continue;
            }
            let mut counts = std::collections::BTreeMap::new();
            for ny in y.saturating_sub(half)..=(y + half).min(h - 1) {
                for nx in x.saturating_sub(half)..=(x + half).min(w - 1) {
                    let v = out.data()[ny * w + nx];
                    if v != 0 && v != own {
                        *counts.entry(v).or_insert(0u32) += 1;
                    }
                }
            }
            // BTreeMap iteration is ascending, so ties pick the smallest.
            let best = counts.iter().max_by_key(|&(_, &c)| c).map(|(&l, _)| l);
            let idx = out.idx2(y, x);
            out.data_mut()[idx] = match (best, fallback) {
                (Some(label), _) => label,
                (None, Fallback::KeepLabel) => own,
                (None, Fallback::Background) => 0,
            };
        }
    }

    // compact nonzero ids to 1..k in ascending original order
    let mut present: Vec<i32> = out.data().iter().copied().filter(|&v| v > 0).collect();
    present.sort_unstable();
    present.dedup();
    let remap: std::collections::BTreeMap<i32, i32> = present
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i as i32 + 1))
        .collect();
    for v in out.data_mut() {
        if *v > 0 {
            *v = remap[v];
        }
    }
    Ok(out)
}

/// Default post-processing parameters (erosion 5×5, majority 11×11).
pub const DEFAULT_EROSION_N: usize = 5;
pub const DEFAULT_MAJORITY_M: usize = 11;
