use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetError;

/// One 2D convolution over (time, frequency).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    /// `[time, frequency]`
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvSpec {
    fn out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        (input + 2 * padding).checked_sub(kernel).map(|span| span / stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frequency bins per input frame.
    pub input_dim: usize,
    pub conv: Vec<ConvSpec>,
    /// Number of bidirectional LSTM layers.
    pub recurrent_layers: usize,
    pub hidden: usize,
    /// Sequence-wise batch normalization of the recurrent input projections.
    pub batch_norm: bool,
    pub fc_size: usize,
    /// Output head width, blank included. Chains fill this in per stage.
    #[serde(default)]
    pub alphabet_size: usize,
    /// Ceiling of the clipped ReLU used after convolutions and the dense layer.
    pub clip: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Two convolutions, five bidirectional recurrent layers, a dense layer
    /// and the softmax head, sized after Deep Speech 2 for 161-bin input
    /// (20 ms windows at 16 kHz).
    pub fn deep_speech(alphabet_size: usize) -> Self {
        Self {
            input_dim: 161,
            conv: vec![
                ConvSpec { channels: 32, kernel: [11, 41], stride: [2, 2], padding: [5, 20] },
                ConvSpec { channels: 32, kernel: [11, 21], stride: [1, 2], padding: [5, 10] },
            ],
            recurrent_layers: 5,
            hidden: 800,
            batch_norm: true,
            fc_size: 800,
            alphabet_size,
            clip: 20.0,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    /// Desk-scale layout used for the synthetic experiments.
    pub fn small(input_dim: usize, alphabet_size: usize) -> Self {
        Self {
            input_dim,
            conv: vec![
                ConvSpec { channels: 4, kernel: [3, 5], stride: [2, 2], padding: [1, 2] },
                ConvSpec { channels: 4, kernel: [3, 3], stride: [1, 1], padding: [1, 1] },
            ],
            recurrent_layers: 2,
            hidden: 32,
            batch_norm: true,
            fc_size: 32,
            alphabet_size,
            clip: 20.0,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.input_dim == 0 || self.hidden == 0 || self.fc_size == 0 {
            return bad("input_dim, hidden and fc_size must be positive".into());
        }
        if self.recurrent_layers == 0 {
            return bad("at least one recurrent layer is required".into());
        }
        if self.alphabet_size < 2 {
            return bad("alphabet needs the blank plus at least one symbol".into());
        }
        if !(self.clip > 0.0) {
            return bad("clip ceiling must be positive".into());
        }
        for (i, c) in self.conv.iter().enumerate() {
            if c.channels == 0 || c.kernel.contains(&0) || c.stride.contains(&0) {
                return bad(format!("conv.{i}: channels, kernel and stride must be positive"));
            }
        }
        self.conv_shapes()?;
        Ok(())
    }

    /// `(channels, frequency bins)` after each convolution, input first.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize)>, NetError> {
        let mut shapes = vec![(1, self.input_dim)];
        for (i, c) in self.conv.iter().enumerate() {
            let (_, f) = *shapes.last().expect("nonempty");
            let f_out = ConvSpec::out_len(f, c.kernel[1], c.stride[1], c.padding[1])
                .ok_or_else(|| NetError::Config(format!("conv.{i}: kernel wider than padded frequency axis")))?;
            shapes.push((c.channels, f_out));
        }
        Ok(shapes)
    }

    /// Width of the recurrent stack's input.
    pub fn recurrent_input_dim(&self) -> usize {
        let (c, f) = *self.conv_shapes().expect("validated config").last().expect("nonempty");
        c * f
    }

    /// Output frame count for `frames` input frames:
    /// each convolution maps `T` to `floor((T + 2 p - k) / s) + 1`.
    pub fn output_frames(&self, frames: usize) -> Option<usize> {
        let mut t = frames;
        if t == 0 {
            return None;
        }
        for c in &self.conv {
            t = ConvSpec::out_len(t, c.kernel[0], c.stride[0], c.padding[0])?;
        }
        Some(t)
    }

    /// Digest of everything except the head width, identifying body compatibility.
    pub fn body_digest(&self) -> [u8; 32] {
        let mut body = self.clone();
        body.alphabet_size = 0;
        let json = serde_json::to_vec(&body).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_two_frame_count() {
        let mut cfg = ModelConfig::small(16, 30);
        cfg.conv.truncate(1);
        // (20 + 2 - 3) / 2 + 1 = 10
        assert_eq!(cfg.output_frames(20), Some(10));
        assert_eq!(cfg.output_frames(0), None);
        cfg.conv[0].padding = [0, 2];
        assert_eq!(cfg.output_frames(2), None);
    }

    #[test]
    fn shapes_and_validation() {
        let cfg = ModelConfig::small(16, 30);
        cfg.validate().unwrap();
        assert_eq!(cfg.conv_shapes().unwrap(), vec![(1, 16), (4, 8), (4, 8)]);
        assert_eq!(cfg.recurrent_input_dim(), 32);
        ModelConfig::deep_speech(40).validate().unwrap();
        let mut bad = cfg.clone();
        bad.recurrent_layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn digest_ignores_head_width() {
        let a = ModelConfig::small(16, 30);
        let b = ModelConfig::small(16, 44);
        assert_eq!(a.body_digest(), b.body_digest());
        assert_ne!(a.body_digest(), ModelConfig::small(12, 30).body_digest());
    }
}
