use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Residual network: conv stem, stages of basic blocks with batchnorm, global pooling, dense head.
    SmallResnet,
    /// Plain stack of biased conv + ReLU layers with 2×2 max pooling after each stage.
    PlainCnn,
}

/// Architecture description from which a model's parameters and filter registry are derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Channel count of each stage, shallow to deep.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Input image shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn small_resnet(widths: &[usize], blocks_per_stage: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::SmallResnet,
            widths: widths.to_vec(),
            blocks_per_stage,
            input_shape,
            num_classes,
        }
    }

    pub fn plain_cnn(widths: &[usize], convs_per_stage: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::PlainCnn,
            widths: widths.to_vec(),
            blocks_per_stage: convs_per_stage,
            input_shape,
            num_classes,
        }
    }

    /// The desk-scale default: widths (16, 32, 64), two blocks per stage.
    pub fn default_resnet(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self::small_resnet(&[16, 32, 64], 2, input_shape, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("stage widths must be non-empty and positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::invalid("blocks per stage must be positive"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::invalid("input shape must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.architecture == Architecture::PlainCnn {
            let div = 1usize << self.widths.len();
            if self.input_shape[1] % div != 0 || self.input_shape[2] % div != 0 {
                return Err(Error::invalid(format!(
                    "plain_cnn with {} stages needs input height/width divisible by {div}",
                    self.widths.len()
                )));
            }
        }
        Ok(())
    }
}
