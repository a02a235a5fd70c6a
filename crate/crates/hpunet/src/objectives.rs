//! Training objectives: analytic Gaussian KL over the latent hierarchy,
//! stochastic top-k reconstruction masking, the ELBO, and the
//! constrained-optimization (GECO) loss with its Lagrange-multiplier state.

use crate::backend::graph::{Graph, Var};
use crate::backend::rng::RngState;
use crate::backend::tensor::Real;
use crate::backend::BackendError;
use crate::model::ScaleDistribution;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("top-k fraction k = {k} out of range (0, 1]")]
    BadFraction { k: f64 },
    #[error("ignore mask has {got} entries, loss map has {want}")]
    IgnoreLength { want: usize, got: usize },
    #[error("mask has {got} entries, loss map has {want}")]
    MaskLength { want: usize, got: usize },
    #[error("posterior list has {q} scales, prior list has {p}")]
    MisalignedScales { q: usize, p: usize },
    #[error("scale {index}: posterior is scale {q}, prior is scale {p}")]
    ScaleIndexMismatch { index: usize, q: usize, p: usize },
    #[error("GECO constraint is not finite ({value}); training must halt")]
    NonFiniteConstraint { value: f64 },
    #[error("top-k selection is empty (no unignored pixels)")]
    EmptySelection,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Per-position `KL(N(mu_q, sigma_q^2) ‖ N(mu_p, sigma_p^2))` in log-sigma
/// form:
/// `(ls_p - ls_q) + exp(2 ls_q - 2 ls_p)/2 + (mu_q - mu_p)^2 exp(-2 ls_p)/2 - 1/2`.
pub fn gaussian_kl_map<F: Real>(
    g: &mut Graph<F>,
    q: &ScaleDistribution,
    p: &ScaleDistribution,
) -> Result<Var, ObjectiveError> {
    let d_ls = g.sub(p.log_sigma, q.log_sigma)?;
    let two_q = g.scale(q.log_sigma, F::of(2.0));
    let two_p = g.scale(p.log_sigma, F::of(2.0));
    let log_ratio = g.sub(two_q, two_p)?;
    let ratio = g.exp(log_ratio);
    let half_ratio = g.scale(ratio, F::of(0.5));
    let dmu = g.sub(q.mu, p.mu)?;
    let dmu2 = g.mul(dmu, dmu)?;
    let neg_two_p = g.scale(p.log_sigma, F::of(-2.0));
    let inv_var = g.exp(neg_two_p);
    let mahal = g.mul(dmu2, inv_var)?;
    let half_mahal = g.scale(mahal, F::of(0.5));
    let t = g.add(d_ls, half_ratio)?;
    let t = g.add(t, half_mahal)?;
    Ok(g.add_const(t, F::of(-0.5)))
}

/// Per-scale KL contributions: each is the analytic KL map summed over
/// positions and averaged over the batch. Returns (total, per-scale terms).
pub fn hierarchical_kl_per_scale<F: Real>(
    g: &mut Graph<F>,
    posteriors: &[ScaleDistribution],
    priors: &[ScaleDistribution],
) -> Result<(Var, Vec<Var>), ObjectiveError> {
    if posteriors.len() != priors.len() {
        return Err(ObjectiveError::MisalignedScales {
            q: posteriors.len(),
            p: priors.len(),
        });
    }
    if posteriors.is_empty() {
        return Ok((g.scalar(F::zero()), Vec::new()));
    }
    let mut per_scale = Vec::with_capacity(posteriors.len());
    for (index, (q, p)) in posteriors.iter().zip(priors).enumerate() {
        if q.scale_index != p.scale_index {
            return Err(ObjectiveError::ScaleIndexMismatch {
                index,
                q: q.scale_index,
                p: p.scale_index,
            });
        }
        let map = gaussian_kl_map(g, q, p)?;
        let batch = g.shape(map)[0];
        let summed = g.sum_all(map);
        per_scale.push(g.scale(summed, F::of(1.0 / batch as f64)));
    }
    let mut total = per_scale[0];
    for &term in &per_scale[1..] {
        total = g.add(total, term)?;
    }
    Ok((total, per_scale))
}

/// Sum over scales of the per-position KL, summed over positions and
/// averaged over the batch (single-sample estimate of the hierarchical KL).
pub fn hierarchical_kl<F: Real>(
    g: &mut Graph<F>,
    posteriors: &[ScaleDistribution],
    priors: &[ScaleDistribution],
) -> Result<Var, ObjectiveError> {
    Ok(hierarchical_kl_per_scale(g, posteriors, priors)?.0)
}

/// Result of a top-k selection over a per-pixel loss map.
pub struct TopkSelection<F: Real> {
    /// 1.0 at selected pixels, 0.0 elsewhere; multiplies the CE map.
    pub mask: Vec<F>,
    /// Number of selected pixels, exactly `ceil(k * M)` over the `M`
    /// non-ignored pixels.
    pub selected: usize,
}

fn topk_core<F: Real>(
    ce: &[F],
    k: f64,
    mut noise: Option<&mut RngState>,
    ignore: Option<&[bool]>,
) -> Result<TopkSelection<F>, ObjectiveError> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(ObjectiveError::BadFraction { k });
    }
    if let Some(ig) = ignore {
        if ig.len() != ce.len() {
            return Err(ObjectiveError::IgnoreLength {
                want: ce.len(),
                got: ig.len(),
            });
        }
    }
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(ce.len());
    for (idx, &v) in ce.iter().enumerate() {
        if ignore.is_some_and(|ig| ig[idx]) {
            continue;
        }
        let mut score = (v.as_f64() + 1e-12).ln();
        if let Some(rng) = noise.as_deref_mut() {
            score += rng.gumbel_f64();
        }
        scored.push((score, idx));
    }
    let m = scored.len();
    if m == 0 {
        return Err(ObjectiveError::EmptySelection);
    }
    let take = ((k * m as f64).ceil() as usize).clamp(1, m);
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut mask = vec![F::zero(); ce.len()];
    for &(_, idx) in &scored[..take] {
        mask[idx] = F::one();
    }
    Ok(TopkSelection {
        mask,
        selected: take,
    })
}

/// Gumbel-top-k selection of the worst fraction `k` of non-ignored pixels:
/// independent Gumbel(0,1) noise is added to `ln(ce + 1e-12)` per pixel and
/// the top `ceil(k * M)` scores win.
pub fn topk_mask<F: Real>(
    ce: &[F],
    k: f64,
    rng: &mut RngState,
    ignore: Option<&[bool]>,
) -> Result<TopkSelection<F>, ObjectiveError> {
    topk_core(ce, k, Some(rng), ignore)
}

/// Test hook: top-k without Gumbel noise, i.e. exactly the argsort-worst
/// pixels.
pub fn topk_mask_noiseless<F: Real>(
    ce: &[F],
    k: f64,
    ignore: Option<&[bool]>,
) -> Result<TopkSelection<F>, ObjectiveError> {
    topk_core(ce, k, None, ignore)
}

/// ELBO-style loss: masked CE summed over pixels, averaged over the batch,
/// plus `beta` times the (already batch-averaged) KL.
pub fn elbo_loss<F: Real>(
    g: &mut Graph<F>,
    ce_map: Var,
    mask: &[F],
    kl_sum: Var,
    beta: f64,
) -> Result<Var, ObjectiveError> {
    let len = g.value(ce_map).len();
    if mask.len() != len {
        return Err(ObjectiveError::MaskLength {
            want: len,
            got: mask.len(),
        });
    }
    let batch = g.shape(ce_map)[0];
    let masked = g.mul_mask(ce_map, mask.to_vec())?;
    let total = g.sum_all(masked);
    let rec = g.scale(total, F::of(1.0 / batch as f64));
    let weighted_kl = g.scale(kl_sum, F::of(beta));
    Ok(g.add(rec, weighted_kl)?)
}

/// Lagrange-multiplier state for the constrained objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GecoState {
    pub lambda: f64,
    pub ema_constraint: f64,
    /// EMA decay gamma in (0, 1).
    pub ema_decay: f64,
    /// Multiplicative step size eta for the lambda update.
    pub step_size: f64,
    pub lambda_bounds: (f64, f64),
    /// Per-pixel reconstruction target kappa.
    pub kappa: f64,
}

impl GecoState {
    /// lambda = 1, gamma = 0.99, eta = 1e-2, bounds [1e-6, 1e6].
    pub fn new(kappa: f64) -> Self {
        GecoState {
            lambda: 1.0,
            ema_constraint: 0.0,
            ema_decay: 0.99,
            step_size: 1e-2,
            lambda_bounds: (1e-6, 1e6),
            kappa,
        }
    }
}

/// Builds the GECO loss `lambda * (ce_sum - kappa * selected) + kl_sum`
/// (lambda enters as a constant, so it carries no gradient) and advances the
/// multiplier state with the per-pixel constraint
/// `ce_sum / selected - kappa`:
/// `ema <- gamma * ema + (1 - gamma) * constraint`,
/// `lambda <- clamp(lambda * exp(eta * ema), bounds)`.
pub fn geco_step<F: Real>(
    g: &mut Graph<F>,
    state: &GecoState,
    ce_sum: Var,
    selected: usize,
    kl_sum: Var,
) -> Result<(Var, GecoState), ObjectiveError> {
    let ce_value = g.scalar_value(ce_sum).as_f64();
    let constraint = ce_value / selected as f64 - state.kappa;
    if !constraint.is_finite() {
        return Err(ObjectiveError::NonFiniteConstraint { value: constraint });
    }
    let shifted = g.add_const(ce_sum, F::of(-state.kappa * selected as f64));
    let rec = g.scale(shifted, F::of(state.lambda));
    let loss = g.add(rec, kl_sum)?;

    let mut next = *state;
    next.ema_constraint =
        state.ema_decay * state.ema_constraint + (1.0 - state.ema_decay) * constraint;
    next.lambda = (state.lambda * (state.step_size * next.ema_constraint).exp())
        .clamp(state.lambda_bounds.0, state.lambda_bounds.1);
    Ok((loss, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tensor::Tensor;

    /// Builds a ScaleDistribution from raw values (shape [n, 1, 1, len]).
    fn dist(g: &mut Graph<f64>, mu: &[f64], log_sigma: &[f64], scale_index: usize) -> ScaleDistribution {
        let shape = [1, 1, 1, mu.len()];
        let m = g.leaf(&Tensor::from_vec(&shape, mu.to_vec()).unwrap());
        let ls = g.leaf(&Tensor::from_vec(&shape, log_sigma.to_vec()).unwrap());
        ScaleDistribution {
            mu: m,
            log_sigma: ls,
            scale_index,
        }
    }

    /// Numerical KL(N(mq, sq^2) ‖ N(mp, sp^2)) by Simpson integration of
    /// q ln(q/p).
    fn kl_by_integration(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
        let lo = (mq - 14.0 * sq).min(mp - 14.0 * sp);
        let hi = (mq + 14.0 * sq).max(mp + 14.0 * sp);
        let n = 80_000; // even
        let h = (hi - lo) / n as f64;
        let ln_q = |x: f64| -((x - mq) * (x - mq)) / (2.0 * sq * sq) - sq.ln();
        let ln_p = |x: f64| -((x - mp) * (x - mp)) / (2.0 * sp * sp) - sp.ln();
        let f = |x: f64| {
            let lq = ln_q(x);
            (lq.exp() / (2.0 * std::f64::consts::PI).sqrt()) * (lq - ln_p(x))
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn kl_closed_form(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
        (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
    }

    #[test]
    fn integration_oracle_matches_closed_form() {
        // Sanity-check the test oracle itself before using it.
        for &(mq, sq, mp, sp) in &[(1.0, 1.0, 0.0, 1.0), (0.0, 2.0, 0.0, 1.0), (0.3, 0.7, -0.4, 1.3)] {
            let a = kl_by_integration(mq, sq, mp, sp);
            let b = kl_closed_form(mq, sq, mp, sp);
            assert!((a - b).abs() < 1e-9, "oracle drift: {a} vs {b}");
        }
    }

    #[test]
    fn kl_map_of_identical_distributions_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let q = dist(&mut g, &[0.3, -1.2, 5.0], &[0.1, -0.5, 1.0], 0);
        let p = dist(&mut g, &[0.3, -1.2, 5.0], &[0.1, -0.5, 1.0], 0);
        let kl = gaussian_kl_map(&mut g, &q, &p).unwrap();
        for &v in g.value(kl) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn kl_map_matches_pinned_values() {
        let mut g: Graph<f64> = Graph::new();
        // (mu_q=1, s_q=1, mu_p=0, s_p=1) -> 0.5; (s_q=2, s_p=1) -> 1.5 - ln 2.
        let q = dist(&mut g, &[1.0, 0.0], &[0.0, 2.0f64.ln()], 0);
        let p = dist(&mut g, &[0.0, 0.0], &[0.0, 0.0], 0);
        let kl = gaussian_kl_map(&mut g, &q, &p).unwrap();
        let v = g.value(kl);
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - (1.5 - 2.0f64.ln())).abs() < 1e-12);
        assert!((v[0] - kl_by_integration(1.0, 1.0, 0.0, 1.0)).abs() < 1e-6);
        assert!((v[1] - kl_by_integration(0.0, 2.0, 0.0, 1.0)).abs() < 1e-6);
    }

    #[test]
    fn kl_matches_numerical_integration_on_100_random_pairs() {
        let mut rng = RngState::new(404);
        for _ in 0..100 {
            let mq = -3.0 + 6.0 * rng.uniform_f64();
            let mp = -3.0 + 6.0 * rng.uniform_f64();
            let sq = 0.3 + 2.7 * rng.uniform_f64();
            let sp = 0.3 + 2.7 * rng.uniform_f64();
            let mut g: Graph<f64> = Graph::new();
            let q = dist(&mut g, &[mq], &[sq.ln()], 0);
            let p = dist(&mut g, &[mp], &[sp.ln()], 0);
            let kl = gaussian_kl_map(&mut g, &q, &p).unwrap();
            let analytic = g.value(kl)[0];
            let numeric = kl_by_integration(mq, sq, mp, sp);
            assert!(
                (analytic - numeric).abs() <= 1e-6,
                "mq={mq} sq={sq} mp={mp} sp={sp}: {analytic} vs {numeric}"
            );
            assert!(analytic >= 0.0);
        }
    }

    #[test]
    fn single_scale_hierarchy_equals_plain_kl_exactly() {
        let mut g: Graph<f64> = Graph::new();
        let q = dist(&mut g, &[0.9, -0.3, 0.2, 1.4], &[0.2, -0.1, 0.0, 0.4], 0);
        let p = dist(&mut g, &[0.1, 0.3, -0.2, 0.0], &[0.0, 0.1, -0.3, 0.2], 0);
        let total = hierarchical_kl(&mut g, &[q], &[p]).unwrap();
        let map = gaussian_kl_map(&mut g, &q, &p).unwrap();
        let summed = g.sum_all(map);
        let manual = g.scale(summed, 1.0); // batch size 1
        assert_eq!(g.scalar_value(total), g.scalar_value(manual));
    }

    #[test]
    fn hierarchical_kl_zero_for_equal_scales_and_checks_alignment() {
        let mut g: Graph<f64> = Graph::new();
        let q0 = dist(&mut g, &[0.5], &[0.1], 0);
        let p0 = dist(&mut g, &[0.5], &[0.1], 0);
        let q1 = dist(&mut g, &[1.5, -0.5], &[0.0, 0.3], 1);
        let p1 = dist(&mut g, &[1.5, -0.5], &[0.0, 0.3], 1);
        let total = hierarchical_kl(&mut g, &[q0, q1], &[p0, p1]).unwrap();
        assert_eq!(g.scalar_value(total), 0.0);
        assert!(matches!(
            hierarchical_kl(&mut g, &[q0, q1], &[p0]),
            Err(ObjectiveError::MisalignedScales { q: 2, p: 1 })
        ));
        assert!(matches!(
            hierarchical_kl(&mut g, &[q0, q1], &[p1, p0]),
            Err(ObjectiveError::ScaleIndexMismatch { .. })
        ));
    }

    #[test]
    fn kl_sum_is_position_order_invariant() {
        let mus = [0.4, -1.0, 2.0, 0.1, -0.7, 1.3];
        let lss = [0.2, -0.4, 0.5, 0.0, -0.2, 0.3];
        let eval = |perm: &[usize]| {
            let mut g: Graph<f64> = Graph::new();
            let mu: Vec<f64> = perm.iter().map(|&i| mus[i]).collect();
            let ls: Vec<f64> = perm.iter().map(|&i| lss[i]).collect();
            let q = dist(&mut g, &mu, &ls, 0);
            let p = dist(&mut g, &vec![0.0; 6], &vec![0.0; 6], 0);
            let kl = hierarchical_kl(&mut g, &[q], &[p]).unwrap();
            g.scalar_value(kl)
        };
        let a = eval(&[0, 1, 2, 3, 4, 5]);
        let b = eval(&[5, 3, 1, 0, 2, 4]);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn two_level_chain_single_sample_estimate_is_unbiased() {
        // Prior: z0 ~ N(0,1), z1 ~ N(a z0, s1p^2).
        // Posterior: z0 ~ N(m0, s0^2), z1 ~ N(b z0 + c, s1q^2).
        let (a, b, c) = (0.7f64, 0.3f64, 0.5f64);
        let (m0, s0, s1q, s1p) = (0.4f64, 0.8f64, 0.6f64, 1.2f64);
        let kl0 = kl_closed_form(m0, s0, 0.0, 1.0);
        // E_{z0~q}[KL(q1(.|z0) ‖ p1(.|z0))] in closed form.
        let e_sq_diff = (b - a) * (b - a) * (s0 * s0 + m0 * m0)
            + 2.0 * (b - a) * c * m0
            + c * c;
        let kl1 = (s1p / s1q).ln() + (s1q * s1q + e_sq_diff) / (2.0 * s1p * s1p) - 0.5;
        let exact = kl0 + kl1;

        let trials = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut rng = RngState::new(777);
        for _ in 0..trials {
            let mut g: Graph<f64> = Graph::new();
            let q0 = dist(&mut g, &[m0], &[s0.ln()], 0);
            let p0 = dist(&mut g, &[0.0], &[0.0], 0);
            let sigma0 = g.exp(q0.log_sigma);
            let z0 = g.reparam_sample(q0.mu, sigma0, &mut rng).unwrap();
            let bz = g.scale(z0, b);
            let mu_q1 = g.add_const(bz, c);
            let mu_p1 = g.scale(z0, a);
            let ls_q1 = g.leaf(&Tensor::from_vec(&[1, 1, 1, 1], vec![s1q.ln()]).unwrap());
            let ls_p1 = g.leaf(&Tensor::from_vec(&[1, 1, 1, 1], vec![s1p.ln()]).unwrap());
            let q1 = ScaleDistribution { mu: mu_q1, log_sigma: ls_q1, scale_index: 1 };
            let p1 = ScaleDistribution { mu: mu_p1, log_sigma: ls_p1, scale_index: 1 };
            let kl = hierarchical_kl(&mut g, &[q0, q1], &[p0, p1]).unwrap();
            let v = g.scalar_value(kl);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / trials as f64;
        let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "mean {mean} vs exact {exact} (3 se = {})",
            3.0 * se
        );
    }

    #[test]
    fn topk_full_fraction_selects_everything() {
        let ce = [0.1f64, 0.2, 0.0, 0.9];
        let mut rng = RngState::new(1);
        let sel = topk_mask(&ce, 1.0, &mut rng, None).unwrap();
        assert_eq!(sel.selected, 4);
        assert!(sel.mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn topk_count_is_exactly_ceil_k_m() {
        let mut rng = RngState::new(2);
        let ce: Vec<f64> = (0..100).map(|i| (i as f64) / 100.0).collect();
        let sel = topk_mask(&ce, 0.02, &mut rng, None).unwrap();
        assert_eq!(sel.selected, 2);
        assert_eq!(sel.mask.iter().filter(|&&m| m == 1.0).count(), 2);
        for k in [0.013, 0.5, 0.731, 0.999] {
            let sel = topk_mask(&ce, k, &mut rng, None).unwrap();
            assert_eq!(sel.selected, (k * 100.0).ceil() as usize);
        }
    }

    #[test]
    fn topk_noiseless_matches_sorting_oracle() {
        let mut rng = RngState::new(3);
        let mut ce = vec![0.0f64; 50];
        rng.fill_uniform(&mut ce, 0.0, 2.0);
        let sel = topk_mask_noiseless(&ce, 0.2, None).unwrap();
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&i, &j| ce[j].total_cmp(&ce[i]));
        let want: std::collections::BTreeSet<usize> = order[..10].iter().copied().collect();
        let got: std::collections::BTreeSet<usize> = sel
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(want, got);
    }

    #[test]
    fn topk_never_selects_ignored_pixels() {
        let mut rng = RngState::new(4);
        for trial in 0..50 {
            let n = 40;
            let mut ce = vec![0.0f64; n];
            rng.fill_uniform(&mut ce, 0.0, 3.0);
            let ignore: Vec<bool> = (0..n).map(|_| rng.coin(0.4)).collect();
            let m = ignore.iter().filter(|&&b| !b).count();
            if m == 0 {
                continue;
            }
            let sel = topk_mask(&ce, 0.25, &mut rng, Some(&ignore)).unwrap();
            assert_eq!(sel.selected, (0.25 * m as f64).ceil() as usize, "trial {trial}");
            for (i, &mask) in sel.mask.iter().enumerate() {
                assert!(!(ignore[i] && mask != 0.0), "ignored pixel selected");
            }
        }
    }

    #[test]
    fn topk_rejects_bad_fractions() {
        let ce = [0.5f64; 4];
        let mut rng = RngState::new(5);
        for k in [0.0, -0.5, 1.0001] {
            assert!(matches!(
                topk_mask(&ce, k, &mut rng, None),
                Err(ObjectiveError::BadFraction { .. })
            ));
        }
    }

    #[test]
    fn elbo_uniform_logits_gives_m_ln2() {
        // 2-class uniform logits over one image of 12 pixels, all kept.
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(&Tensor::zeros(&[1, 2, 3, 4]));
        let target = Tensor::from_vec(&[1, 3, 4], vec![0i32; 12]).unwrap();
        let ce = g.softmax_ce_map(logits, &target, None).unwrap();
        let kl = g.scalar(0.0);
        let loss = elbo_loss(&mut g, ce, &vec![1.0; 12], kl, 1.0).unwrap();
        assert!((g.scalar_value(loss) - 12.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn elbo_beta_zero_is_pure_reconstruction_and_beta_one_recomposes() {
        let mut g: Graph<f64> = Graph::new();
        let ce = g.leaf(&Tensor::from_vec(&[2, 1, 2], vec![0.3, 0.7, 0.1, 0.9]).unwrap());
        let kl = g.leaf(&Tensor::scalar(1.25));
        let mask = vec![1.0, 0.0, 1.0, 1.0];
        let l0 = elbo_loss(&mut g, ce, &mask, kl, 0.0).unwrap();
        // masked sum = 0.3 + 0.1 + 0.9 = 1.3, over batch 2 -> 0.65
        assert!((g.scalar_value(l0) - 0.65).abs() < 1e-12);
        let l1 = elbo_loss(&mut g, ce, &mask, kl, 1.0).unwrap();
        // hand recomposition of the two terms
        let masked = g.mul_mask(ce, mask.clone()).unwrap();
        let total = g.sum_all(masked);
        let rec = g.scale(total, 0.5);
        let manual = g.add(rec, kl).unwrap();
        assert_eq!(g.scalar_value(l1), g.scalar_value(manual));
    }

    #[test]
    fn geco_lambda_dynamics_match_closed_form() {
        let mut state = GecoState::new(0.05);
        // Constant positive constraint c: ema after t steps = c (1 - gamma^t).
        let c = 0.2;
        let gamma = state.ema_decay;
        let mut g: Graph<f64> = Graph::new();
        let mut lambdas = vec![state.lambda];
        for t in 1..=40 {
            let ce = g.scalar((c + state.kappa) * 10.0); // 10 selected pixels
            let kl = g.scalar(0.0);
            let (_, next) = geco_step(&mut g, &state, ce, 10, kl).unwrap();
            let expect_ema = c * (1.0 - gamma.powi(t));
            assert!(
                (next.ema_constraint - expect_ema).abs() < 1e-12,
                "step {t}: ema {} vs {expect_ema}",
                next.ema_constraint
            );
            assert!(next.lambda > state.lambda, "lambda must rise while constraint > 0");
            lambdas.push(next.lambda);
            state = next;
        }
        // Zero constraint leaves lambda untouched only when the EMA is zero.
        let mut fresh = GecoState::new(0.05);
        fresh.ema_constraint = 0.0;
        let ce = g.scalar(0.05 * 7.0);
        let kl = g.scalar(0.0);
        let (_, next) = geco_step(&mut g, &fresh, ce, 7, kl).unwrap();
        assert_eq!(next.lambda, fresh.lambda);
    }

    #[test]
    fn geco_lambda_respects_bounds_and_detaches_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let mut state = GecoState::new(0.05);
        state.lambda = 9.9e5;
        state.ema_constraint = 50.0;
        let ce = g.scalar(100.0);
        let kl = g.scalar(0.0);
        let (_, next) = geco_step(&mut g, &state, ce, 1, kl).unwrap();
        assert!(next.lambda <= state.lambda_bounds.1);
        state.lambda = 2e-6;
        state.ema_constraint = -50.0;
        let (_, down) = geco_step(&mut g, &state, ce, 1, kl).unwrap();
        assert!(down.lambda >= state.lambda_bounds.0);

        // Gradient check: d loss / d ce_sum = lambda, d loss / d kl = 1.
        let mut g: Graph<f64> = Graph::new();
        let ce_leaf = g.leaf(&Tensor::scalar(0.8));
        let kl_leaf = g.leaf(&Tensor::scalar(0.3));
        let mut st = GecoState::new(0.05);
        st.lambda = 3.25;
        let (loss, _) = geco_step(&mut g, &st, ce_leaf, 4, kl_leaf).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(ce_leaf), &[3.25]);
        assert_eq!(g.grad(kl_leaf), &[1.0]);
    }

    #[test]
    fn geco_rejects_non_finite_constraint() {
        let mut g: Graph<f64> = Graph::new();
        let ce = g.scalar(f64::NAN);
        let kl = g.scalar(0.0);
        let state = GecoState::new(0.05);
        assert!(matches!(
            geco_step(&mut g, &state, ce, 5, kl),
            Err(ObjectiveError::NonFiniteConstraint { .. })
        ));
    }
}
