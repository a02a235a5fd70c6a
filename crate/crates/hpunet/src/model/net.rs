//! Forward passes: encoder pyramid, decoder with the interleaved latent
//! hierarchy, the posterior network, and mean reconstruction.

use super::params::{BoundParams, ParameterStore};
use super::{ModelConfig, ModelError};
use crate::backend::graph::{Graph, Var};
use crate::backend::rng::RngState;
use crate::backend::tensor::{Real, Tensor};

/// Per-scale Gaussian over the latent grid: graph handles for mu and the
/// clamped log sigma, each `[N, D, H_i, W_i]`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleDistribution {
    pub mu: Var,
    pub log_sigma: Var,
    pub scale_index: usize,
}

/// How to obtain z at one enabled latent scale during decoding.
#[derive(Debug, Clone)]
pub enum LatentDirective<F: Real> {
    /// Draw z ~ N(mu, sigma^2) from the prior head.
    SamplePrior,
    /// Use z = mu (deterministic).
    PriorMean,
    /// Use the given tensor (shape `[N, D, H_i, W_i]`).
    Inject(Tensor<F>),
}

/// One directive per *enabled* latent scale, ordered global to local.
#[derive(Debug, Clone)]
pub struct LatentPlan<F: Real> {
    pub directives: Vec<LatentDirective<F>>,
}

impl<F: Real> LatentPlan<F> {
    pub fn sample_all(cfg: &ModelConfig) -> Self {
        LatentPlan {
            directives: vec![LatentDirective::SamplePrior; cfg.enabled_latents().len()],
        }
    }

    pub fn mean_all(cfg: &ModelConfig) -> Self {
        LatentPlan {
            directives: vec![LatentDirective::PriorMean; cfg.enabled_latents().len()],
        }
    }
}

/// Result of a decoding pass.
pub struct ForwardOutput {
    /// `[N, C, H, W]` class logits at full resolution.
    pub logits: Var,
    /// Prior distributions, one per enabled latent scale, global to local.
    pub priors: Vec<ScaleDistribution>,
    /// The z actually fed to the decoder at each enabled scale.
    pub latents_used: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorMode {
    Sample,
    Mean,
}

fn conv_layer<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    name: &str,
    input: Var,
) -> Result<Var, ModelError> {
    let kernel = bound.get(&format!("{name}/kernel"))?;
    let bias = bound.get(&format!("{name}/bias"))?;
    Ok(g.conv2d(input, kernel, bias)?)
}

/// Pre-activated residual block (see `params::block_convs` for the layer
/// inventory).
fn res_block<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let a1 = g.relu(x);
    let c1 = conv_layer(g, bound, &format!("{prefix}/conv1"), a1)?;
    let a2 = g.relu(c1);
    let c2 = conv_layer(g, bound, &format!("{prefix}/conv2"), a2)?;
    let a3 = g.relu(c2);
    let c3 = conv_layer(g, bound, &format!("{prefix}/conv3"), a3)?;
    let branch = conv_layer(g, bound, &format!("{prefix}/out"), c3)?;
    let skip = if bound.has(&format!("{prefix}/skip/kernel")) {
        conv_layer(g, bound, &format!("{prefix}/skip"), x)?
    } else {
        x
    };
    Ok(g.add(skip, branch)?)
}

fn encode_with<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    input: Var,
) -> Result<Vec<Var>, ModelError> {
    let mut x = conv_layer(g, bound, &format!("{prefix}/stem"), input)?;
    let mut pyramid = Vec::with_capacity(cfg.total_scales);
    for s in 0..cfg.total_scales {
        for b in 0..cfg.res_blocks_per_scale {
            x = res_block(g, bound, &format!("{prefix}/scale{s}/block{b}"), x)?;
        }
        pyramid.push(x);
        if s + 1 < cfg.total_scales {
            x = g.avg_pool2x2(x)?;
        }
    }
    Ok(pyramid)
}

fn check_image<F: Real>(
    g: &Graph<F>,
    cfg: &ModelConfig,
    image: Var,
) -> Result<(), ModelError> {
    let shape = g.shape(image);
    if shape.len() != 4 {
        return Err(ModelError::BadInput {
            message: format!("image must be rank 4, got shape {shape:?}"),
        });
    }
    if shape[1] != cfg.input_channels {
        return Err(ModelError::InputChannels {
            want: cfg.input_channels,
            got: shape[1],
        });
    }
    let div = 1usize << cfg.halvings();
    if shape[2] == 0 || shape[3] == 0 || shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(ModelError::IndivisibleInput {
            h: shape[2],
            w: shape[3],
            halvings: cfg.halvings(),
        });
    }
    Ok(())
}

/// Runs the deterministic feature extractor, returning one feature map per
/// scale (index 0 = full resolution).
pub fn unet_encode<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Vec<Var>, ModelError> {
    check_image(g, cfg, image)?;
    encode_with(g, bound, cfg, "encoder", image)
}

/// Applies a 1x1 head producing 2*D channels, split into mu and clamped
/// log sigma.
fn latent_head<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    family: &str,
    features: Var,
    scale_index: usize,
) -> Result<ScaleDistribution, ModelError> {
    let out = conv_layer(g, bound, &format!("{family}/scale{scale_index}"), features)?;
    let d = cfg.latents_per_position;
    let mu = g.slice_channels(out, 0, d)?;
    let raw = g.slice_channels(out, d, 2 * d)?;
    let (lo, hi) = cfg.logsigma_clamp;
    let log_sigma = g.clamp(raw, F::of(lo), F::of(hi));
    Ok(ScaleDistribution {
        mu,
        log_sigma,
        scale_index,
    })
}

fn sample_z<F: Real>(
    g: &mut Graph<F>,
    dist: &ScaleDistribution,
    rng: &mut RngState,
) -> Result<Var, ModelError> {
    let sigma = g.exp(dist.log_sigma);
    Ok(g.reparam_sample(dist.mu, sigma, rng)?)
}

enum ZSource<'a, F: Real> {
    Plan(&'a LatentPlan<F>),
    Vars(&'a [Var]),
}

fn next_z<F: Real>(
    g: &mut Graph<F>,
    dist: &ScaleDistribution,
    source: &ZSource<'_, F>,
    j: usize,
    rng: &mut RngState,
) -> Result<Var, ModelError> {
    let check = |g: &Graph<F>, got: &[usize]| -> Result<(), ModelError> {
        let want = g.shape(dist.mu);
        if got != want {
            return Err(ModelError::InjectShape {
                scale: dist.scale_index,
                want: want.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(())
    };
    match source {
        ZSource::Plan(plan) => match &plan.directives[j] {
            LatentDirective::SamplePrior => sample_z(g, dist, rng),
            LatentDirective::PriorMean => Ok(dist.mu),
            LatentDirective::Inject(t) => {
                check(g, t.shape())?;
                Ok(g.leaf(t))
            }
        },
        ZSource::Vars(vars) => {
            let z = vars[j];
            check(g, &g.shape(z).to_vec())?;
            Ok(z)
        }
    }
}

fn decode_core<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    pyramid: &[Var],
    source: ZSource<'_, F>,
    rng: &mut RngState,
) -> Result<ForwardOutput, ModelError> {
    if pyramid.len() != cfg.total_scales {
        return Err(ModelError::BadInput {
            message: format!(
                "pyramid has {} scales, model has {}",
                pyramid.len(),
                cfg.total_scales
            ),
        });
    }
    let enabled = cfg.enabled_latents().len();
    let provided = match &source {
        ZSource::Plan(p) => p.directives.len(),
        ZSource::Vars(v) => v.len(),
    };
    if provided != enabled {
        return Err(ModelError::PlanLength {
            want: enabled,
            got: provided,
        });
    }

    let s_top = cfg.total_scales - 1;
    let mut features = pyramid[s_top];
    let mut priors = Vec::new();
    let mut latents = Vec::new();
    let mut j = 0usize;
    for s in (0..=s_top).rev() {
        if let Some(i) = cfg.latent_at_resolution(s) {
            if cfg.latent_enable[i] {
                let dist = latent_head(g, bound, cfg, "prior_head", features, i)?;
                let z = next_z(g, &dist, &source, j, rng)?;
                features = g.concat_channels(features, z)?;
                priors.push(dist);
                latents.push(z);
                j += 1;
            }
        }
        if s > 0 {
            features = g.upsample_nn2x2(features)?;
            features = g.concat_channels(features, pyramid[s - 1])?;
            for b in 0..cfg.res_blocks_per_scale {
                features = res_block(g, bound, &format!("decoder/scale{}/block{b}", s - 1), features)?;
            }
        }
    }
    let logits = conv_layer(g, bound, "logit_head", features)?;
    Ok(ForwardOutput {
        logits,
        priors,
        latents_used: latents,
    })
}

/// Decodes with latents chosen per `plan` (sampled from the prior, prior
/// means, or injected tensors).
pub fn decode_with_prior<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    pyramid: &[Var],
    plan: &LatentPlan<F>,
    rng: &mut RngState,
) -> Result<ForwardOutput, ModelError> {
    decode_core(g, bound, cfg, pyramid, ZSource::Plan(plan), rng)
}

/// Decodes with in-graph latents (ordinarily the posterior's samples), so
/// gradients flow through them; the returned priors are conditioned on those
/// same latents.
pub fn decode_with_latents<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    pyramid: &[Var],
    latents: &[Var],
) -> Result<ForwardOutput, ModelError> {
    let mut unused = RngState::new(0);
    decode_core(g, bound, cfg, pyramid, ZSource::Vars(latents), &mut unused)
}

/// Runs the posterior network over `concat(image, onehot_y)`. Returns the
/// per-scale posterior distributions and the z values fed forward (samples
/// in `Sample` mode, means in `Mean` mode), so each scale's distribution is
/// conditioned on its own earlier z.
pub fn posterior_forward<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
    onehot_y: Var,
    mode: PosteriorMode,
    rng: &mut RngState,
) -> Result<(Vec<ScaleDistribution>, Vec<Var>), ModelError> {
    check_image(g, cfg, image)?;
    let ts = g.shape(onehot_y).to_vec();
    let is = g.shape(image).to_vec();
    if ts.len() != 4 || ts[1] != cfg.num_classes {
        return Err(ModelError::TargetChannels {
            want: cfg.num_classes,
            got: if ts.len() == 4 { ts[1] } else { 0 },
        });
    }
    if ts[0] != is[0] || ts[2] != is[2] || ts[3] != is[3] {
        return Err(ModelError::BadInput {
            message: format!("one-hot target shape {ts:?} does not match image {is:?}"),
        });
    }
    let x = g.concat_channels(image, onehot_y)?;
    let pyramid = encode_with(g, bound, cfg, "posterior_encoder", x)?;

    let s_top = cfg.total_scales - 1;
    let mut features = pyramid[s_top];
    let mut dists = Vec::new();
    let mut zs = Vec::new();
    for i in 0..cfg.latent_scales {
        let s = cfg.resolution_of_latent(i);
        if i > 0 {
            features = g.upsample_nn2x2(features)?;
            features = g.concat_channels(features, pyramid[s])?;
            for b in 0..cfg.res_blocks_per_scale {
                features = res_block(g, bound, &format!("posterior_decoder/scale{i}/block{b}"), features)?;
            }
        }
        if cfg.latent_enable[i] {
            let dist = latent_head(g, bound, cfg, "posterior_head", features, i)?;
            let z = match mode {
                PosteriorMode::Sample => sample_z(g, &dist, rng)?,
                PosteriorMode::Mean => dist.mu,
            };
            features = g.concat_channels(features, z)?;
            dists.push(dist);
            zs.push(z);
        }
    }
    Ok((dists, zs))
}

/// Posterior-mean reconstruction: encodes the posterior in mean mode (each
/// scale conditioned on the earlier means) and decodes with those means
/// injected.
pub fn reconstruct<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
    onehot_y: Var,
) -> Result<ForwardOutput, ModelError> {
    let mut unused = RngState::new(0);
    let (_posteriors, zs) =
        posterior_forward(g, bound, cfg, image, onehot_y, PosteriorMode::Mean, &mut unused)?;
    let pyramid = unet_encode(g, bound, cfg, image)?;
    decode_with_latents(g, bound, cfg, &pyramid, &zs)
}

/// Host-side argmax over the class dimension: `[N, C, H, W]` logits to
/// `[N, H, W]` labels. Ties resolve to the lowest class id.
pub fn argmax_labels<F: Real>(g: &Graph<F>, logits: Var) -> Tensor<i32> {
    let shape = g.shape(logits);
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = g.value(logits);
    let mut out = Tensor::zeros(&[n, h, w]);
    let plane = h * w;
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[b * c * plane + p];
            for ch in 1..c {
                let v = data[(b * c + ch) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out.data_mut()[b * plane + p] = best as i32;
        }
    }
    out
}

/// One inference call: encodes `image` `[N, C, H, W]`, decodes with `plan`,
/// and returns argmax labels `[N, H, W]`.
pub fn predict_labels<F: Real>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    image: &Tensor<F>,
    plan: &LatentPlan<F>,
    rng: &mut RngState,
) -> Result<Tensor<i32>, ModelError> {
    let mut g: Graph<F> = Graph::new();
    let bound = BoundParams::bind(&mut g, store);
    let image = g.leaf(image);
    let pyramid = unet_encode(&mut g, &bound, cfg, image)?;
    let out = decode_with_prior(&mut g, &bound, cfg, &pyramid, plan, rng)?;
    Ok(argmax_labels(&g, out.logits))
}

/// Posterior-mean reconstruction of `onehot_y` as argmax labels `[N, H, W]`.
pub fn reconstruct_labels<F: Real>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    image: &Tensor<F>,
    onehot_y: &Tensor<F>,
) -> Result<Tensor<i32>, ModelError> {
    let mut g: Graph<F> = Graph::new();
    let bound = BoundParams::bind(&mut g, store);
    let image = g.leaf(image);
    let y = g.leaf(onehot_y);
    let out = reconstruct(&mut g, &bound, cfg, image, y)?;
    Ok(argmax_labels(&g, out.logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::rng::Stream;
    use crate::model::params::build_parameters;
    use crate::model::ParameterStore;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            num_classes: 2,
            total_scales: 3,
            latent_scales: 2,
            base_channels: 4,
            channel_cap_doublings: 4,
            res_blocks_per_scale: 1,
            latents_per_position: 1,
            logsigma_clamp: (-10.0, 5.0),
            latent_enable: vec![true, true],
        }
    }

    fn rand_image<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
        let mut t = Tensor::zeros(shape);
        RngState::new(seed).fill_uniform(t.data_mut(), -1.0, 1.0);
        t
    }

    fn onehot_of<F: Real>(labels: &[usize], classes: usize, n: usize, h: usize, w: usize) -> Tensor<F> {
        let mut t = Tensor::zeros(&[n, classes, h, w]);
        for b in 0..n {
            for p in 0..h * w {
                let c = labels[b * h * w + p];
                t.data_mut()[(b * classes + c) * h * w + p] = F::one();
            }
        }
        t
    }

    fn logits_bits(g: &Graph<f32>, v: Var) -> Vec<u32> {
        g.value(v).iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn pyramid_extents_and_widths_match_config() {
        let cfg = ModelConfig::default();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(5)).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store);
        let img = g.leaf(&rand_image::<f32>(&[1, 1, 32, 32], 9));
        let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
        let extents: Vec<usize> = pyramid.iter().map(|&v| g.shape(v)[2]).collect();
        let widths: Vec<usize> = pyramid.iter().map(|&v| g.shape(v)[1]).collect();
        assert_eq!(extents, vec![32, 16, 8, 4, 2, 1]);
        assert_eq!(widths, vec![8, 16, 32, 64, 128, 128]);
        for &v in &pyramid {
            assert!(g.value(v).iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn indivisible_or_mismatched_inputs_error() {
        let cfg = tiny_cfg();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(5)).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store);
        let odd = g.leaf(&rand_image::<f32>(&[1, 1, 6, 6], 1));
        assert!(matches!(
            unet_encode(&mut g, &bound, &cfg, odd),
            Err(ModelError::IndivisibleInput { .. })
        ));
        let wrong_ch = g.leaf(&rand_image::<f32>(&[1, 3, 8, 8], 1));
        assert!(matches!(
            unet_encode(&mut g, &bound, &cfg, wrong_ch),
            Err(ModelError::InputChannels { .. })
        ));
    }

    #[test]
    fn prior_mean_decode_is_deterministic() {
        let cfg = tiny_cfg();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(11)).unwrap();
        let image = rand_image::<f32>(&[2, 1, 8, 8], 3);
        let run = || {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &store);
            let img = g.leaf(&image);
            let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
            let plan = LatentPlan::mean_all(&cfg);
            let mut rng = RngState::new(42);
            let out = decode_with_prior(&mut g, &bound, &cfg, &pyramid, &plan, &mut rng).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 2, 8, 8]);
            logits_bits(&g, out.logits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampling_is_seed_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(11)).unwrap();
        let image = rand_image::<f32>(&[1, 1, 8, 8], 3);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &store);
            let img = g.leaf(&image);
            let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
            let plan = LatentPlan::sample_all(&cfg);
            let mut rng = RngState::for_stream(seed, Stream::Sampling, 0);
            let out = decode_with_prior(&mut g, &bound, &cfg, &pyramid, &plan, &mut rng).unwrap();
            logits_bits(&g, out.logits)
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn four_latent_scales_give_85_latents_at_extents_1_2_4_8() {
        let cfg = ModelConfig {
            latent_scales: 4,
            latent_enable: vec![true; 4],
            res_blocks_per_scale: 1,
            ..ModelConfig::default()
        };
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(2)).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store);
        let img = g.leaf(&rand_image::<f32>(&[1, 1, 32, 32], 4));
        let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
        let plan = LatentPlan::sample_all(&cfg);
        let mut rng = RngState::new(1);
        let out = decode_with_prior(&mut g, &bound, &cfg, &pyramid, &plan, &mut rng).unwrap();
        assert_eq!(out.priors.len(), 4);
        let extents: Vec<usize> = out.priors.iter().map(|d| g.shape(d.mu)[2]).collect();
        assert_eq!(extents, vec![1, 2, 4, 8]);
        let total: usize = out.latents_used.iter().map(|&z| g.value(z).len()).sum();
        assert_eq!(total, 85);
    }

    #[test]
    fn posterior_mirrors_prior_shapes_and_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(13)).unwrap();
        let image = rand_image::<f32>(&[1, 1, 8, 8], 6);
        let labels: Vec<usize> = (0..64).map(|p| p % 2).collect();
        let onehot = onehot_of::<f32>(&labels, 2, 1, 8, 8);
        let run = |seed: u64| {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &store);
            let img = g.leaf(&image);
            let oh = g.leaf(&onehot);
            let mut rng = RngState::new(seed);
            let (dists, zs) =
                posterior_forward(&mut g, &bound, &cfg, img, oh, PosteriorMode::Sample, &mut rng)
                    .unwrap();
            let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
            let plan = LatentPlan::mean_all(&cfg);
            let mut prior_rng = RngState::new(0);
            let out =
                decode_with_prior(&mut g, &bound, &cfg, &pyramid, &plan, &mut prior_rng).unwrap();
            assert_eq!(dists.len(), out.priors.len());
            for (q, p) in dists.iter().zip(&out.priors) {
                assert_eq!(g.shape(q.mu), g.shape(p.mu));
                assert_eq!(g.shape(q.log_sigma), g.shape(p.log_sigma));
                assert_eq!(q.scale_index, p.scale_index);
            }
            let z_bits: Vec<Vec<u32>> = zs.iter().map(|&z| logits_bits(&g, z)).collect();
            z_bits
        };
        assert_eq!(run(21), run(21));
        assert_ne!(run(21), run(22));
    }

    #[test]
    fn injected_global_latent_changes_next_scale_mu() {
        let cfg = tiny_cfg();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(17)).unwrap();
        let image = rand_image::<f32>(&[1, 1, 8, 8], 8);
        let mu1_for = |z0val: f64| {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &store);
            let img = g.leaf(&image);
            let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
            let z0 = Tensor::full(&[1, 1, 2, 2], z0val as f32);
            let plan = LatentPlan {
                directives: vec![LatentDirective::Inject(z0), LatentDirective::PriorMean],
            };
            let mut rng = RngState::new(0);
            let out = decode_with_prior(&mut g, &bound, &cfg, &pyramid, &plan, &mut rng).unwrap();
            g.value(out.priors[1].mu).to_vec()
        };
        let a = mu1_for(0.0);
        let b = mu1_for(2.5);
        assert_ne!(a, b, "z_0 must influence scale 1's distribution");
    }

    #[test]
    fn injected_latent_shape_is_checked() {
        let cfg = tiny_cfg();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(17)).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store);
        let img = g.leaf(&rand_image::<f32>(&[1, 1, 8, 8], 8));
        let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
        let plan = LatentPlan {
            directives: vec![
                LatentDirective::Inject(Tensor::full(&[1, 1, 4, 4], 0.0f32)),
                LatentDirective::PriorMean,
            ],
        };
        let mut rng = RngState::new(0);
        assert!(matches!(
            decode_with_prior(&mut g, &bound, &cfg, &pyramid, &plan, &mut rng),
            Err(ModelError::InjectShape { scale: 0, .. })
        ));
        let short = LatentPlan {
            directives: vec![LatentDirective::PriorMean],
        };
        assert!(matches!(
            decode_with_prior(&mut g, &bound, &cfg, &pyramid, &short, &mut rng),
            Err(ModelError::PlanLength { want: 2, got: 1 })
        ));
    }

    #[test]
    fn reconstruct_is_bitwise_deterministic_and_finite() {
        let cfg = tiny_cfg();
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(19)).unwrap();
        let image = rand_image::<f32>(&[2, 1, 8, 8], 10);
        let labels: Vec<usize> = (0..128).map(|p| (p / 3) % 2).collect();
        let onehot = onehot_of::<f32>(&labels, 2, 2, 8, 8);
        let run = || {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &store);
            let img = g.leaf(&image);
            let oh = g.leaf(&onehot);
            let out = reconstruct(&mut g, &bound, &cfg, img, oh).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 2, 8, 8]);
            assert!(g.value(out.logits).iter().all(|v| v.is_finite()));
            logits_bits(&g, out.logits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn disabled_scale_is_dropped_from_outputs() {
        let mut cfg = tiny_cfg();
        cfg.latent_enable = vec![true, false];
        let store: ParameterStore<f32> = build_parameters(&cfg, &mut RngState::new(23)).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &store);
        let img = g.leaf(&rand_image::<f32>(&[1, 1, 8, 8], 2));
        let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
        let plan = LatentPlan::sample_all(&cfg);
        assert_eq!(plan.directives.len(), 1);
        let mut rng = RngState::new(5);
        let out = decode_with_prior(&mut g, &bound, &cfg, &pyramid, &plan, &mut rng).unwrap();
        assert_eq!(out.priors.len(), 1);
        assert_eq!(out.priors[0].scale_index, 0);
        let labels: Vec<usize> = vec![0; 64];
        let oh = g.leaf(&onehot_of::<f32>(&labels, 2, 1, 8, 8));
        let mut rng2 = RngState::new(6);
        let (dists, zs) =
            posterior_forward(&mut g, &bound, &cfg, img, oh, PosteriorMode::Sample, &mut rng2)
                .unwrap();
        assert_eq!(dists.len(), 1);
        assert_eq!(zs.len(), 1);
    }

    #[test]
    fn kl_gradient_reaches_posterior_parameters() {
        // Single latent scale; loss = summed analytic KL(q ‖ p). Finite
        // differences on one posterior kernel element must match the
        // analytic gradient (f64, h = 1e-5, tol 1e-5).
        let cfg = ModelConfig {
            latent_scales: 1,
            latent_enable: vec![true],
            ..tiny_cfg()
        };
        let image = rand_image::<f64>(&[1, 1, 8, 8], 30);
        let labels: Vec<usize> = (0..64).map(|p| (p % 5 == 0) as usize).collect();
        let onehot = onehot_of::<f64>(&labels, 2, 1, 8, 8);
        let param = "posterior_head/scale0/kernel";

        let loss_of = |store: &ParameterStore<f64>, want_grad: bool| -> (f64, f64) {
            let mut g: Graph<f64> = Graph::new();
            let bound = BoundParams::bind(&mut g, store);
            let img = g.leaf(&image);
            let oh = g.leaf(&onehot);
            let mut rng = RngState::new(77);
            let (qs, zs) =
                posterior_forward(&mut g, &bound, &cfg, img, oh, PosteriorMode::Sample, &mut rng)
                    .unwrap();
            let pyramid = unet_encode(&mut g, &bound, &cfg, img).unwrap();
            let out = decode_with_latents(&mut g, &bound, &cfg, &pyramid, &zs).unwrap();
            let (q, p) = (&qs[0], &out.priors[0]);
            // KL = (lsp - lsq) + exp(2 lsq - 2 lsp)/2 + (muq - mup)^2 exp(-2 lsp)/2 - 1/2
            let d_ls = g.sub(p.log_sigma, q.log_sigma).unwrap();
            let two_q = g.scale(q.log_sigma, 2.0);
            let two_p = g.scale(p.log_sigma, 2.0);
            let ratio_exp = g.sub(two_q, two_p).unwrap();
            let ratio = g.exp(ratio_exp);
            let half_ratio = g.scale(ratio, 0.5);
            let dmu = g.sub(q.mu, p.mu).unwrap();
            let dmu2 = g.mul(dmu, dmu).unwrap();
            let neg_two_p = g.scale(p.log_sigma, -2.0);
            let inv_var = g.exp(neg_two_p);
            let mahal = g.mul(dmu2, inv_var).unwrap();
            let half_mahal = g.scale(mahal, 0.5);
            let t1 = g.add(d_ls, half_ratio).unwrap();
            let t2 = g.add(t1, half_mahal).unwrap();
            let km = g.add_const(t2, -0.5);
            let loss = g.sum_all(km);
            if want_grad {
                g.backward(loss).unwrap();
                let pk = bound.get(param).unwrap();
                (g.scalar_value(loss), g.grad(pk)[0])
            } else {
                (g.scalar_value(loss), 0.0)
            }
        };

        let store: ParameterStore<f64> = build_parameters(&cfg, &mut RngState::new(31)).unwrap();
        let (_, analytic) = loss_of(&store, true);
        let h = 1e-5;
        let mut plus = store.clone();
        plus.get_mut(param).unwrap().data_mut()[0] += h;
        let mut minus = store.clone();
        minus.get_mut(param).unwrap().data_mut()[0] -= h;
        let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        assert!(
            rel <= 1e-5,
            "posterior kl grad: analytic {analytic}, numeric {numeric}, rel {rel}"
        );
        assert!(analytic != 0.0, "gradient must actually reach the posterior");
    }
}
