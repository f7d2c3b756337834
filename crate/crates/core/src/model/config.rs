use crate::error::{Error, Result};

/// Shape hyperparameters of the convolutional transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub dec_conv_layers: usize,
    pub dec_conv_channels: usize,
    pub dec_conv_kernel: usize,
    /// Output channels of the two 2-D convolution blocks.
    pub conv_channels: [usize; 2],
    pub conv_kernel: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Full-size settings: 80-dim input, 1k model dim, 16 heads, 10+2 blocks.
    /// "1k"/"4k" are taken as 1024/4096 so the model dim splits evenly over heads.
    pub fn paper() -> Self {
        Self {
            feat_dim: 80,
            model_dim: 1024,
            heads: 16,
            ffn_dim: 4096,
            enc_blocks: 10,
            dec_blocks: 2,
            dec_conv_layers: 4,
            dec_conv_channels: 256,
            dec_conv_kernel: 3,
            conv_channels: [64, 128],
            conv_kernel: 3,
            dropout: 0.15,
            vocab_size: 5000,
        }
    }

    /// Laptop-scale settings used by the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            feat_dim: 16,
            model_dim: 48,
            heads: 4,
            ffn_dim: 96,
            enc_blocks: 2,
            dec_blocks: 1,
            dec_conv_layers: 2,
            dec_conv_channels: 48,
            dec_conv_kernel: 3,
            conv_channels: [8, 16],
            conv_kernel: 5,
            dropout: 0.15,
            vocab_size: 400,
        }
    }

    /// Smallest configuration that still exercises every component.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            feat_dim: 6,
            model_dim: 8,
            heads: 2,
            ffn_dim: 12,
            enc_blocks: 1,
            dec_blocks: 1,
            dec_conv_layers: 2,
            dec_conv_channels: 6,
            dec_conv_kernel: 3,
            conv_channels: [2, 3],
            conv_kernel: 3,
            dropout: 0.0,
            vocab_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Frequency bins left after two 2× poolings.
    pub fn pooled_freq(&self) -> usize {
        self.feat_dim.div_ceil(2).div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feat_dim", self.feat_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("dec_conv_channels", self.dec_conv_channels),
            ("dec_conv_kernel", self.dec_conv_kernel),
            ("conv_channels[0]", self.conv_channels[0]),
            ("conv_channels[1]", self.conv_channels[1]),
            ("conv_kernel", self.conv_kernel),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Stable textual form used for config hashing.
    pub fn canonical(&self) -> String {
        format!(
            "feat_dim={};model_dim={};heads={};ffn_dim={};enc_blocks={};dec_blocks={};\
             dec_conv_layers={};dec_conv_channels={};dec_conv_kernel={};conv_channels={},{};\
             conv_kernel={};dropout={};vocab_size={}",
            self.feat_dim,
            self.model_dim,
            self.heads,
            self.ffn_dim,
            self.enc_blocks,
            self.dec_blocks,
            self.dec_conv_layers,
            self.dec_conv_channels,
            self.dec_conv_kernel,
            self.conv_channels[0],
            self.conv_channels[1],
            self.conv_kernel,
            self.dropout,
            self.vocab_size
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::paper(),
            ModelConfig::desk(),
            ModelConfig::tiny(7),
        ] {
            cfg.validate().unwrap();
        }
        let p = ModelConfig::paper();
        assert_eq!(p.head_dim(), 64);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut c = ModelConfig::tiny(5);
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
