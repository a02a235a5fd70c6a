//! Model hyperparameters and their validation.

use super::ModelError;

/// Architecture hyperparameters.
///
/// Scales are indexed 0 (full resolution) to `total_scales - 1` (most
/// downsampled). Latent scales are indexed the other way around, 0 (most
/// global, coarsest grid) to `latent_scales - 1` (most local), so latent
/// scale `i` lives at resolution scale `total_scales - 1 - i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub total_scales: usize,
    pub latent_scales: usize,
    pub base_channels: usize,
    /// Channels double per downsampling until this many doublings, then stay
    /// flat.
    pub channel_cap_doublings: usize,
    pub res_blocks_per_scale: usize,
    /// Latent channels D per spatial grid position.
    pub latents_per_position: usize,
    /// (lo, hi) clamp applied to predicted log sigma before exponentiation.
    pub logsigma_clamp: (f64, f64),
    /// Per latent scale, whether it contributes a distribution and latent
    /// channels (supports global-only / local-only ablations). Length
    /// `latent_scales`.
    pub latent_enable: Vec<bool>,
}

impl Default for ModelConfig {
    /// Toy-scale default: 6 scales over 32x32 inputs, 3 latent scales at
    /// grid extents 1, 2 and 4, channel widths 8,16,32,64,128,128.
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            num_classes: 2,
            total_scales: 6,
            latent_scales: 3,
            base_channels: 8,
            channel_cap_doublings: 4,
            res_blocks_per_scale: 2,
            latents_per_position: 1,
            logsigma_clamp: (-10.0, 5.0),
            latent_enable: vec![true; 3],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |message: String| Err(ModelError::InvalidConfig { message });
        if self.total_scales < 2 || self.total_scales > 12 {
            return fail(format!(
                "total_scales = {} out of range [2, 12]",
                self.total_scales
            ));
        }
        if self.latent_scales < 1 || self.latent_scales > self.total_scales {
            return fail(format!(
                "latent_scales = {} out of range [1, total_scales = {}]",
                self.latent_scales, self.total_scales
            ));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 || self.base_channels > 1024 {
            return fail(format!(
                "base_channels = {} must be even and in [2, 1024]",
                self.base_channels
            ));
        }
        if self.channel_cap_doublings > 12 {
            return fail(format!(
                "channel_cap_doublings = {} out of range [0, 12]",
                self.channel_cap_doublings
            ));
        }
        if self.res_blocks_per_scale < 1 || self.res_blocks_per_scale > 16 {
            return fail(format!(
                "res_blocks_per_scale = {} out of range [1, 16]",
                self.res_blocks_per_scale
            ));
        }
        if self.num_classes < 2 || self.num_classes > 64 {
            return fail(format!(
                "num_classes = {} out of range [2, 64]",
                self.num_classes
            ));
        }
        if self.input_channels < 1 || self.input_channels > 256 {
            return fail(format!(
                "input_channels = {} out of range [1, 256]",
                self.input_channels
            ));
        }
        if self.latents_per_position < 1 || self.latents_per_position > 64 {
            return fail(format!(
                "latents_per_position = {} out of range [1, 64]",
                self.latents_per_position
            ));
        }
        let (lo, hi) = self.logsigma_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return fail(format!("logsigma_clamp = ({lo}, {hi}) must be finite with lo < hi"));
        }
        if self.latent_enable.len() != self.latent_scales {
            return fail(format!(
                "latent_enable has {} entries, expected latent_scales = {}",
                self.latent_enable.len(),
                self.latent_scales
            ));
        }
        Ok(())
    }

    /// Channel width at resolution scale `s`.
    pub fn width(&self, scale: usize) -> usize {
        self.base_channels << scale.min(self.channel_cap_doublings)
    }

    /// Resolution scale carrying latent scale `i` (i = 0 is most global).
    pub fn resolution_of_latent(&self, i: usize) -> usize {
        self.total_scales - 1 - i
    }

    /// Latent scale at resolution scale `s`, if any.
    pub fn latent_at_resolution(&self, s: usize) -> Option<usize> {
        let i = self.total_scales - 1 - s;
        (i < self.latent_scales).then_some(i)
    }

    /// Indices of latent scales that are switched on, global to local.
    pub fn enabled_latents(&self) -> Vec<usize> {
        (0..self.latent_scales)
            .filter(|&i| self.latent_enable[i])
            .collect()
    }

    /// Number of 2x downsamplings between full resolution and the coarsest
    /// scale.
    pub fn halvings(&self) -> usize {
        self.total_scales - 1
    }

    /// Spatial extent of latent scale `i`'s grid for an input extent `e`.
    pub fn latent_extent(&self, i: usize, input_extent: usize) -> usize {
        input_extent >> self.resolution_of_latent(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn channel_widths_double_then_cap() {
        let cfg = ModelConfig::default();
        let widths: Vec<usize> = (0..cfg.total_scales).map(|s| cfg.width(s)).collect();
        assert_eq!(widths, vec![8, 16, 32, 64, 128, 128]);
    }

    #[test]
    fn latent_indexing_is_global_to_local() {
        let cfg = ModelConfig {
            latent_scales: 4,
            latent_enable: vec![true; 4],
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        let extents: Vec<usize> = (0..4).map(|i| cfg.latent_extent(i, 32)).collect();
        assert_eq!(extents, vec![1, 2, 4, 8]);
        assert_eq!(cfg.latent_at_resolution(5), Some(0));
        assert_eq!(cfg.latent_at_resolution(2), Some(3));
        assert_eq!(cfg.latent_at_resolution(1), None);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig {
                latent_scales: 7,
                latent_enable: vec![true; 7],
                ..ModelConfig::default()
            },
            ModelConfig {
                latent_scales: 0,
                latent_enable: vec![],
                ..ModelConfig::default()
            },
            ModelConfig {
                base_channels: 7,
                ..ModelConfig::default()
            },
            ModelConfig {
                num_classes: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                latent_enable: vec![true; 2],
                ..ModelConfig::default()
            },
            ModelConfig {
                logsigma_clamp: (5.0, -10.0),
                ..ModelConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "config should fail: {cfg:?}");
        }
    }
}
