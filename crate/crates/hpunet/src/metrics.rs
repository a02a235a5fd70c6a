//! Distribution-agreement and segmentation-quality measures: foreground IoU,
//! generalized energy distance (GED²), Hungarian-matched IoU, foreground-
//! restricted adapted Rand error, and AP at IoU 0.5.

use std::collections::BTreeMap;

use crate::backend::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{context}: shapes {left:?} and {right:?} differ")]
    ShapeMismatch { context: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("sample set `{which}` is empty")]
    EmptySet { which: &'static str },
    #[error("sample sets disagree on {what}")]
    ConfigMismatch { what: &'static str },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: i32, num_classes: usize },
    #[error("no evaluation classes were given")]
    NoClasses,
    #[error("evaluation class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("duplicated set size {lcm} exceeds the cap of {cap}")]
    LcmTooLarge { lcm: usize, cap: usize },
    #[error("distance between samples {i} and {j} is undefined (every class skipped)")]
    UndefinedDistance { i: usize, j: usize },
    #[error("ground truth contains no foreground; adapted Rand error is undefined")]
    AllBackground,
    #[error("confidence {value} out of [0, 1]")]
    BadConfidence { value: f64 },
    #[error("detection mask has {got} pixels, expected {want}")]
    MaskLength { want: usize, got: usize },
    #[error("ignore mask has {got} pixels, expected {want}")]
    IgnoreLength { want: usize, got: usize },
}

/// How a class absent from both maps contributes to the IoU mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbsencePolicy {
    /// Correctly predicted absence scores 1 (grader-style evaluation).
    AbsenceIsOne,
    /// Absent classes are skipped; the mean runs over present classes only
    /// (instance-style "NaN-mean").
    AbsenceExcluded,
}

/// A set of label maps sharing one evaluation configuration.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub maps: Vec<Tensor<i32>>,
    pub num_classes: usize,
    /// The stochastic (foreground) classes the metrics average over.
    pub classes: Vec<usize>,
    pub policy: AbsencePolicy,
}

impl SampleSet {
    pub fn new(
        maps: Vec<Tensor<i32>>,
        num_classes: usize,
        classes: Vec<usize>,
        policy: AbsencePolicy,
    ) -> Result<Self, MetricError> {
        if classes.is_empty() {
            return Err(MetricError::NoClasses);
        }
        for &c in &classes {
            if c >= num_classes {
                return Err(MetricError::ClassOutOfRange { class: c, num_classes });
            }
        }
        if let Some(first) = maps.first() {
            for m in &maps {
                if m.shape() != first.shape() {
                    return Err(MetricError::ShapeMismatch {
                        context: "sample set",
                        left: first.shape().to_vec(),
                        right: m.shape().to_vec(),
                    });
                }
                for &v in m.data() {
                    if v < 0 || v as usize >= num_classes {
                        return Err(MetricError::LabelOutOfRange { label: v, num_classes });
                    }
                }
            }
        }
        Ok(SampleSet { maps, num_classes, classes, policy })
    }
}

/// Mean foreground IoU over `classes`. Returns `Ok(None)` (undefined) iff
/// every class is skipped under [`AbsencePolicy::AbsenceExcluded`]. Ignored
/// pixels leave both the intersection and the union.
pub fn iou_fg(
    a: &Tensor<i32>,
    b: &Tensor<i32>,
    classes: &[usize],
    policy: AbsencePolicy,
    ignore: Option<&[bool]>,
) -> Result<Option<f64>, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch {
            context: "iou_fg",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if classes.is_empty() {
        return Err(MetricError::NoClasses);
    }
    if let Some(ig) = ignore {
        if ig.len() != a.len() {
            return Err(MetricError::IgnoreLength { want: a.len(), got: ig.len() });
        }
    }
    let mut total = 0.0;
    let mut evaluated = 0usize;
    for &class in classes {
        let c = class as i32;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (i, (&va, &vb)) in a.data().iter().zip(b.data()).enumerate() {
            if ignore.is_some_and(|ig| ig[i]) {
                continue;
            }
            let in_a = va == c;
            let in_b = vb == c;
            inter += u64::from(in_a && in_b);
            union += u64::from(in_a || in_b);
        }
        if union == 0 {
            match policy {
                AbsencePolicy::AbsenceIsOne => {
                    total += 1.0;
                    evaluated += 1;
                }
                AbsencePolicy::AbsenceExcluded => {}
            }
        } else {
            total += inter as f64 / union as f64;
            evaluated += 1;
        }
    }
    Ok((evaluated > 0).then(|| total / evaluated as f64))
}

fn check_compatible(a: &SampleSet, b: &SampleSet) -> Result<(), MetricError> {
    if a.maps.is_empty() {
        return Err(MetricError::EmptySet { which: "first" });
    }
    if b.maps.is_empty() {
        return Err(MetricError::EmptySet { which: "second" });
    }
    if a.num_classes != b.num_classes {
        return Err(MetricError::ConfigMismatch { what: "class count" });
    }
    if a.classes != b.classes {
        return Err(MetricError::ConfigMismatch { what: "evaluation classes" });
    }
    if a.policy != b.policy {
        return Err(MetricError::ConfigMismatch { what: "absence policy" });
    }
    if a.maps[0].shape() != b.maps[0].shape() {
        return Err(MetricError::ShapeMismatch {
            context: "sample sets",
            left: a.maps[0].shape().to_vec(),
            right: b.maps[0].shape().to_vec(),
        });
    }
    Ok(())
}

fn distance(
    a: &SampleSet,
    i: usize,
    b: &SampleSet,
    j: usize,
) -> Result<f64, MetricError> {
    let iou = iou_fg(&a.maps[i], &b.maps[j], &a.classes, a.policy, None)?
        .ok_or(MetricError::UndefinedDistance { i, j })?;
    Ok(1.0 - iou)
}

/// Generalized energy distance squared under the kernel d = 1 − IoU:
/// `2 E d(S, Y) − E d(S, S′) − E d(Y, Y′)`. Expectations are empirical
/// means over all ordered pairs (within-set means run over all n² pairs
/// including self-pairs, whose distance is 0; a singleton set therefore
/// contributes 0, matching the convention E d(S,S′) := 0 for one element).
pub fn ged2(model: &SampleSet, gt: &SampleSet) -> Result<f64, MetricError> {
    check_compatible(model, gt)?;
    let (n_s, n_y) = (model.maps.len(), gt.maps.len());
    let mut cross = 0.0;
    for i in 0..n_s {
        for j in 0..n_y {
            cross += distance(model, i, gt, j)?;
        }
    }
    cross /= (n_s * n_y) as f64;

    let mut within_s = 0.0;
    for i in 0..n_s {
        for j in 0..n_s {
            if i != j {
                within_s += distance(model, i, model, j)?;
            }
        }
    }
    within_s /= (n_s * n_s) as f64;

    let mut within_y = 0.0;
    for i in 0..n_y {
        for j in 0..n_y {
            if i != j {
                within_y += distance(gt, i, gt, j)?;
            }
        }
    }
    within_y /= (n_y * n_y) as f64;

    Ok(2.0 * cross - within_s - within_y)
}

/// An optimal one-to-one matching between two duplicated sample sets.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// (index into a, index into b) for every matched pair, in the
    /// duplicated sets' order; indices refer to the original sets.
    pub pairs: Vec<(usize, usize)>,
    pub per_pair_iou: Vec<f64>,
    pub mean_iou: f64,
}

/// Cap on the duplicated (LCM) set size.
pub const LCM_CAP: usize = 64;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Exact minimum-cost assignment (Jonker-Volgenant style shortest
/// augmenting paths with potentials) on a square cost matrix.
/// Returns `assignment[row] = col`.
fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based potentials; p[j] = row matched to column j (0 = none).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Duplicates both sets to their least common multiple size, then finds the
/// assignment maximizing total IoU with an exact solver.
pub fn hungarian_matched_iou(a: &SampleSet, b: &SampleSet) -> Result<MatchResult, MetricError> {
    check_compatible(a, b)?;
    let (na, nb) = (a.maps.len(), b.maps.len());
    let lcm = na / gcd(na, nb) * nb;
    if lcm > LCM_CAP {
        return Err(MetricError::LcmTooLarge { lcm, cap: LCM_CAP });
    }

    let mut iou = vec![vec![0.0; lcm]; lcm];
    for (i, row) in iou.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = iou_fg(&a.maps[i % na], &b.maps[j % nb], &a.classes, a.policy, None)?
                .ok_or(MetricError::UndefinedDistance { i: i % na, j: j % nb })?;
        }
    }
    let cost: Vec<Vec<f64>> = iou.iter().map(|row| row.iter().map(|&x| -x).collect()).collect();
    let assignment = solve_assignment(&cost);

    let mut pairs = Vec::with_capacity(lcm);
    let mut per_pair_iou = Vec::with_capacity(lcm);
    let mut total = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        pairs.push((i % na, j % nb));
        per_pair_iou.push(iou[i][j]);
        total += iou[i][j];
    }
    Ok(MatchResult { pairs, per_pair_iou, mean_iou: total / lcm as f64 })
}

/// Foreground-restricted adapted Rand error: 1 − F₁ over distinct pixel
/// pairs' co-membership, computed on pixels whose ground-truth label is
/// nonzero, via the pred×gt contingency table.
pub fn adapted_rand_error(pred: &Tensor<i32>, gt: &Tensor<i32>) -> Result<f64, MetricError> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch {
            context: "adapted_rand_error",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let mut table: BTreeMap<(i32, i32), u64> = BTreeMap::new();
    let mut pred_sizes: BTreeMap<i32, u64> = BTreeMap::new();
    let mut gt_sizes: BTreeMap<i32, u64> = BTreeMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == 0 {
            continue;
        }
        *table.entry((p, g)).or_insert(0) += 1;
        *pred_sizes.entry(p).or_insert(0) += 1;
        *gt_sizes.entry(g).or_insert(0) += 1;
    }
    if gt_sizes.is_empty() {
        return Err(MetricError::AllBackground);
    }
    let pairs2 = |n: u64| (n * (n - 1) / 2) as f64;
    let tp: f64 = table.values().map(|&n| pairs2(n)).sum();
    let pred_pairs: f64 = pred_sizes.values().map(|&n| pairs2(n)).sum();
    let gt_pairs: f64 = gt_sizes.values().map(|&n| pairs2(n)).sum();
    let precision = if pred_pairs > 0.0 { tp / pred_pairs } else { 0.0 };
    let recall = if gt_pairs > 0.0 { tp / gt_pairs } else { 0.0 };
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(1.0 - f)
}

/// One predicted instance: a binary mask plus a confidence score.
#[derive(Debug, Clone)]
pub struct Detection {
    pub mask: Vec<bool>,
    pub confidence: f64,
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        inter += u64::from(x && y);
        union += u64::from(x || y);
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

/// Average precision at IoU threshold 0.5: detections greedily match the
/// best still-unmatched ground-truth mask in descending-confidence order
/// (TP iff IoU > 0.5); AP is the all-points-interpolated area under the
/// precision-recall curve. No ground truth or no detections → 0.
pub fn ap50(predictions: &[Detection], gt_masks: &[Vec<bool>]) -> Result<f64, MetricError> {
    let pixel_count = predictions
        .first()
        .map(|d| d.mask.len())
        .or_else(|| gt_masks.first().map(Vec::len));
    if let Some(want) = pixel_count {
        for d in predictions {
            if d.mask.len() != want {
                return Err(MetricError::MaskLength { want, got: d.mask.len() });
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(MetricError::BadConfidence { value: d.confidence });
            }
        }
        for m in gt_masks {
            if m.len() != want {
                return Err(MetricError::MaskLength { want, got: m.len() });
            }
        }
    }
    if predictions.is_empty() || gt_masks.is_empty() {
        return Ok(0.0);
    }

    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| {
        predictions[j]
            .confidence
            .total_cmp(&predictions[i].confidence)
            .then(i.cmp(&j))
    });

    let mut matched = vec![false; gt_masks.len()];
    let mut curve = Vec::with_capacity(order.len()); // (recall, precision)
    let mut tp = 0u64;
    let mut fp = 0u64;
    for &idx in &order {
        let mut best = (0.0f64, usize::MAX);
        for (g, gt) in gt_masks.iter().enumerate() {
            if !matched[g] {
                let iou = mask_iou(&predictions[idx].mask, gt);
                if iou > best.0 {
                    best = (iou, g);
                }
            }
        }
        if best.0 > 0.5 {
            matched[best.1] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((
            tp as f64 / gt_masks.len() as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    // All-points interpolation: precision at recall r is the max precision
    // achieved at any recall ≥ r; the area accrues wherever recall steps up.
    let mut ap = 0.0;
    let mut interp = vec![0.0f64; curve.len()];
    let mut running = 0.0f64;
    for i in (0..curve.len()).rev() {
        running = running.max(curve[i].1);
        interp[i] = running;
    }
    let mut last_recall = 0.0;
    for (i, &(recall, _)) in curve.iter().enumerate() {
        if recall > last_recall {
            ap += (recall - last_recall) * interp[i];
            last_recall = recall;
        }
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::rng::{RngState, Stream};

    fn map(shape: &[usize], data: Vec<i32>) -> Tensor<i32> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random_map(rng: &mut RngState, h: usize, w: usize, classes: usize) -> Tensor<i32> {
        let data = (0..h * w).map(|_| rng.below(classes) as i32).collect();
        map(&[h, w], data)
    }

    #[test]
    fn iou_identity_absence_and_shift_examples() {
        let a = map(&[2, 4], vec![1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(
            iou_fg(&a, &a, &[1], AbsencePolicy::AbsenceIsOne, None).unwrap(),
            Some(1.0)
        );
        let empty = map(&[2, 4], vec![0; 8]);
        assert_eq!(
            iou_fg(&empty, &empty, &[1], AbsencePolicy::AbsenceIsOne, None).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            iou_fg(&empty, &empty, &[1], AbsencePolicy::AbsenceExcluded, None).unwrap(),
            None
        );
        // 2x2 block vs the same block shifted by one column on a 2x4 grid:
        // intersection 2, union 6.
        let b = map(&[2, 4], vec![0, 1, 1, 0, 0, 1, 1, 0]);
        assert_eq!(
            iou_fg(&a, &b, &[1], AbsencePolicy::AbsenceIsOne, None).unwrap(),
            Some(2.0 / 6.0)
        );
        // symmetry
        assert_eq!(
            iou_fg(&a, &b, &[1], AbsencePolicy::AbsenceIsOne, None).unwrap(),
            iou_fg(&b, &a, &[1], AbsencePolicy::AbsenceIsOne, None).unwrap()
        );
    }

    #[test]
    fn iou_respects_ignore_mask_and_shape_checks() {
        let a = map(&[1, 4], vec![1, 1, 0, 0]);
        let b = map(&[1, 4], vec![1, 0, 0, 1]);
        // ignoring the two disagreeing pixels leaves intersection 1, union 1
        let ignore = vec![false, true, false, true];
        assert_eq!(
            iou_fg(&a, &b, &[1], AbsencePolicy::AbsenceIsOne, Some(&ignore)).unwrap(),
            Some(1.0)
        );
        let c = map(&[2, 2], vec![0, 0, 0, 0]);
        assert!(matches!(
            iou_fg(&a, &c, &[1], AbsencePolicy::AbsenceIsOne, None),
            Err(MetricError::ShapeMismatch { .. })
        ));
    }

    fn set(maps: Vec<Tensor<i32>>) -> SampleSet {
        SampleSet::new(maps, 2, vec![1], AbsencePolicy::AbsenceIsOne).unwrap()
    }

    #[test]
    fn ged2_pinned_examples() {
        let a = map(&[1, 4], vec![1, 1, 0, 0]);
        // d(a, b) = 0.5: intersection 1, union 3... use b with IoU 0.5
        let b = map(&[1, 4], vec![1, 1, 1, 1]);
        assert_eq!(
            iou_fg(&a, &b, &[1], AbsencePolicy::AbsenceIsOne, None).unwrap(),
            Some(0.5)
        );
        // single identical sample on both sides
        assert_eq!(ged2(&set(vec![a.clone()]), &set(vec![a.clone()])).unwrap(), 0.0);
        // gt = {A, A}, model = {A}
        assert_eq!(
            ged2(&set(vec![a.clone()]), &set(vec![a.clone(), a.clone()])).unwrap(),
            0.0
        );
        // gt = {A, B} with d(A,B) = 0.5, model = {A}:
        // 2*(0.25) - 0 - 0.25 = 0.25
        let g = ged2(&set(vec![a.clone()]), &set(vec![a.clone(), b.clone()])).unwrap();
        assert!((g - 0.25).abs() < 1e-15);
    }

    /// Direct double-sum evaluation of the definition.
    fn ged2_oracle(model: &SampleSet, gt: &SampleSet) -> f64 {
        let d = |x: &Tensor<i32>, y: &Tensor<i32>| {
            1.0 - iou_fg(x, y, &model.classes, model.policy, None)
                .unwrap()
                .unwrap()
        };
        let (ns, ny) = (model.maps.len(), gt.maps.len());
        let mut cross = 0.0;
        for s in &model.maps {
            for y in &gt.maps {
                cross += d(s, y);
            }
        }
        let mut ws = 0.0;
        for i in &model.maps {
            for j in &model.maps {
                ws += d(i, j);
            }
        }
        let mut wy = 0.0;
        for i in &gt.maps {
            for j in &gt.maps {
                wy += d(i, j);
            }
        }
        2.0 * cross / (ns * ny) as f64 - ws / (ns * ns) as f64 - wy / (ny * ny) as f64
    }

    #[test]
    fn ged2_matches_double_sum_oracle_and_permutation_invariance() {
        let mut rng = RngState::for_stream(31, Stream::Evaluation, 0);
        for trial in 0..30 {
            let ns = 1 + rng.below(5);
            let ny = 1 + rng.below(5);
            let model = set((0..ns).map(|_| random_map(&mut rng, 4, 5, 2)).collect());
            let gt = set((0..ny).map(|_| random_map(&mut rng, 4, 5, 2)).collect());
            let got = ged2(&model, &gt).unwrap();
            let want = ged2_oracle(&model, &gt);
            assert!((got - want).abs() < 1e-15, "trial {trial}: {got} vs {want}");
            assert!(got > -1e-12, "GED² should not be materially negative: {got}");
            // permuting samples within a set changes nothing
            let mut reordered = model.maps.clone();
            reordered.reverse();
            let permuted = ged2(&set(reordered), &gt).unwrap();
            assert!((got - permuted).abs() < 1e-15);
        }
    }

    #[test]
    fn ged2_rejects_empty_sets() {
        let a = map(&[1, 4], vec![1, 0, 0, 0]);
        let empty = SampleSet::new(vec![], 2, vec![1], AbsencePolicy::AbsenceIsOne).unwrap();
        assert!(matches!(
            ged2(&empty, &set(vec![a])),
            Err(MetricError::EmptySet { .. })
        ));
    }

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut items: Vec<usize> = (0..n).collect();
        fn heap(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k == 1 {
                out.push(items.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, items, out);
                if k % 2 == 0 {
                    items.swap(i, k - 1);
                } else {
                    items.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut items, &mut out);
        out
    }

    #[test]
    fn hungarian_identity_and_forced_matching() {
        let a = map(&[1, 4], vec![1, 1, 0, 0]);
        let b = map(&[1, 4], vec![0, 1, 1, 0]);
        let same = hungarian_matched_iou(&set(vec![a.clone(), b.clone()]), &set(vec![a.clone(), b.clone()])).unwrap();
        assert_eq!(same.mean_iou, 1.0);
        // |a| = 1 duplicated against two targets: mean of both IoUs
        let one = set(vec![a.clone()]);
        let two = set(vec![a.clone(), b.clone()]);
        let res = hungarian_matched_iou(&one, &two).unwrap();
        let iou_ab = iou_fg(&a, &b, &[1], AbsencePolicy::AbsenceIsOne, None)
            .unwrap()
            .unwrap();
        assert!((res.mean_iou - (1.0 + iou_ab) / 2.0).abs() < 1e-15);
        assert_eq!(res.pairs.len(), 2);
    }

    #[test]
    fn hungarian_equals_brute_force_on_small_sets() {
        let mut rng = RngState::for_stream(77, Stream::Evaluation, 1);
        // size combinations whose LCM stays brute-forceable (≤ 6)
        let sizes = [(1, 1), (2, 2), (3, 3), (2, 4), (2, 6), (3, 6), (1, 5), (6, 6), (4, 4), (5, 5)];
        for (trial, &(na, nb)) in sizes.iter().enumerate() {
            let a = set((0..na).map(|_| random_map(&mut rng, 3, 4, 2)).collect());
            let b = set((0..nb).map(|_| random_map(&mut rng, 3, 4, 2)).collect());
            let got = hungarian_matched_iou(&a, &b).unwrap();
            let sym = hungarian_matched_iou(&b, &a).unwrap();
            assert!((got.mean_iou - sym.mean_iou).abs() < 1e-12, "not symmetric");

            let lcm = na / gcd(na, nb) * nb;
            let iou = |i: usize, j: usize| {
                iou_fg(&a.maps[i % na], &b.maps[j % nb], &[1], AbsencePolicy::AbsenceIsOne, None)
                    .unwrap()
                    .unwrap()
            };
            let mut best = f64::NEG_INFINITY;
            for perm in all_permutations(lcm) {
                let total: f64 = (0..lcm).map(|i| iou(i, perm[i])).sum();
                best = best.max(total);
            }
            assert!(
                (got.mean_iou - best / lcm as f64).abs() < 1e-12,
                "trial {trial} ({na},{nb}): {} vs brute {}",
                got.mean_iou,
                best / lcm as f64
            );
        }
    }

    #[test]
    fn hungarian_rejects_oversized_lcm() {
        let a = map(&[1, 2], vec![0, 1]);
        let maps_a: Vec<_> = (0..13).map(|_| a.clone()).collect();
        let maps_b: Vec<_> = (0..11).map(|_| a.clone()).collect();
        assert!(matches!(
            hungarian_matched_iou(&set(maps_a), &set(maps_b)),
            Err(MetricError::LcmTooLarge { lcm: 143, cap: 64 })
        ));
    }

    /// O(N²) pair-counting oracle over distinct pixel pairs (gt foreground).
    fn rand_error_oracle(pred: &Tensor<i32>, gt: &Tensor<i32>) -> f64 {
        let idx: Vec<usize> =
            (0..gt.len()).filter(|&i| gt.data()[i] != 0).collect();
        let mut tp = 0.0f64;
        let mut pred_pairs = 0.0f64;
        let mut gt_pairs = 0.0f64;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let same_pred = pred.data()[i] == pred.data()[j];
                let same_gt = gt.data()[i] == gt.data()[j];
                if same_pred && same_gt {
                    tp += 1.0;
                }
                if same_pred {
                    pred_pairs += 1.0;
                }
                if same_gt {
                    gt_pairs += 1.0;
                }
            }
        }
        let p = if pred_pairs > 0.0 { tp / pred_pairs } else { 0.0 };
        let r = if gt_pairs > 0.0 { tp / gt_pairs } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        1.0 - f
    }

    #[test]
    fn adapted_rand_zero_for_relabelings_and_pinned_merge_example() {
        let gt = map(&[1, 4], vec![1, 1, 2, 2]);
        let relabeled = map(&[1, 4], vec![7, 7, 3, 3]);
        assert_eq!(adapted_rand_error(&relabeled, &gt).unwrap(), 0.0);
        // all-merged prediction over two 2-pixel segments:
        // TP = 2, pred pairs = 6, gt pairs = 2 -> p = 1/3, r = 1,
        // F = 0.5 -> error 0.5
        let merged = map(&[1, 4], vec![5, 5, 5, 5]);
        let got = adapted_rand_error(&merged, &gt).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
        assert_eq!(got, rand_error_oracle(&merged, &gt));
    }

    #[test]
    fn adapted_rand_matches_pair_counting_oracle_on_random_maps() {
        let mut rng = RngState::for_stream(5, Stream::Evaluation, 2);
        for trial in 0..20 {
            let h = 2 + rng.below(31);
            let w = 2 + rng.below(31);
            let pred = random_map(&mut rng, h, w, 5);
            let gt = random_map(&mut rng, h, w, 4);
            if gt.data().iter().all(|&v| v == 0) {
                continue;
            }
            let got = adapted_rand_error(&pred, &gt).unwrap();
            let want = rand_error_oracle(&pred, &gt);
            assert!((got - want).abs() <= 1e-12, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn adapted_rand_rejects_background_only_gt() {
        let gt = map(&[2, 2], vec![0, 0, 0, 0]);
        let pred = map(&[2, 2], vec![1, 1, 2, 2]);
        assert!(matches!(
            adapted_rand_error(&pred, &gt),
            Err(MetricError::AllBackground)
        ));
    }

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x != 0).collect()
    }

    #[test]
    fn ap50_perfect_empty_and_pinned_pr_table() {
        let gt = vec![bits(&[1, 1, 0, 0]), bits(&[0, 0, 1, 1])];
        let perfect = vec![
            Detection { mask: bits(&[1, 1, 0, 0]), confidence: 0.9 },
            Detection { mask: bits(&[0, 0, 1, 1]), confidence: 0.8 },
        ];
        assert_eq!(ap50(&perfect, &gt).unwrap(), 1.0);
        assert_eq!(ap50(&[], &gt).unwrap(), 0.0);

        // 1 TP at conf 0.9 plus 1 FP at conf 0.1 against a single gt:
        // PR points (r=1, p=1), (r=1, p=0.5) -> all-points AP = 1.0
        let single_gt = vec![bits(&[1, 1, 0, 0])];
        let dets = vec![
            Detection { mask: bits(&[1, 1, 0, 0]), confidence: 0.9 },
            Detection { mask: bits(&[0, 0, 0, 1]), confidence: 0.1 },
        ];
        assert_eq!(ap50(&dets, &single_gt).unwrap(), 1.0);

        // FP first (higher confidence) drags AP below 1: points
        // (r=0, p=0), (r=1, p=0.5) -> AP = 0.5
        let dets_swapped = vec![
            Detection { mask: bits(&[0, 0, 0, 1]), confidence: 0.9 },
            Detection { mask: bits(&[1, 1, 0, 0]), confidence: 0.1 },
        ];
        assert_eq!(ap50(&dets_swapped, &single_gt).unwrap(), 0.5);
    }

    #[test]
    fn ap50_is_invariant_to_monotone_confidence_transforms() {
        let mut rng = RngState::for_stream(9, Stream::Evaluation, 3);
        let gt: Vec<Vec<bool>> = (0..3)
            .map(|_| (0..30).map(|_| rng.coin(0.3)).collect())
            .collect();
        let dets: Vec<Detection> = (0..5)
            .map(|_| Detection {
                mask: (0..30).map(|_| rng.coin(0.3)).collect(),
                confidence: 0.1 + 0.8 * rng.uniform_f64(),
            })
            .collect();
        let base = ap50(&dets, &gt).unwrap();
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { mask: d.mask.clone(), confidence: d.confidence * d.confidence })
            .collect();
        assert_eq!(base, ap50(&squashed, &gt).unwrap());
    }

    #[test]
    fn ap50_validates_masks_and_confidences() {
        let gt = vec![bits(&[1, 0])];
        let bad_len = vec![Detection { mask: bits(&[1, 0, 1]), confidence: 0.5 }];
        assert!(matches!(
            ap50(&bad_len, &gt),
            Err(MetricError::MaskLength { .. })
        ));
        let bad_conf = vec![Detection { mask: bits(&[1, 0]), confidence: 1.5 }];
        assert!(matches!(
            ap50(&bad_conf, &gt),
            Err(MetricError::BadConfidence { .. })
        ));
    }
}
