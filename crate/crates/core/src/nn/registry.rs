use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::IndexSets;

/// One element of one named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamElem {
    pub param: usize,
    pub index: usize,
}

/// Parameters tied to a filter's output channel that interventions also touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Companions {
    pub conv_bias: Option<ParamElem>,
    pub bn_gamma: Option<ParamElem>,
    pub bn_beta: Option<ParamElem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerInfo {
    pub layer_id: usize,
    pub name: String,
    /// Index of the kernel weight tensor in the model's parameter list.
    pub param: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stage: usize,
    /// Global id of this layer's first filter.
    pub first_filter: usize,
    /// Offset of this layer's kernel weights in the concatenated kernel-weight vector.
    pub weight_offset: usize,
}

impl ConvLayerInfo {
    pub fn weights_per_filter(&self) -> usize {
        self.in_channels * self.kernel[0] * self.kernel[1]
    }

    pub fn filters(&self) -> Range<usize> {
        self.first_filter..self.first_filter + self.out_channels
    }
}

/// A convolutional filter and the index set α_k of its kernel weights within the
/// concatenated kernel-weight vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterGroup {
    pub id: usize,
    pub layer_id: usize,
    pub channel: usize,
    pub alpha: Range<usize>,
    pub companions: Companions,
}

/// Maps every convolutional filter of a model to its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRegistry {
    layers: Vec<ConvLayerInfo>,
    filters: Vec<FilterGroup>,
    kernel_weight_count: usize,
}

impl FilterRegistry {
    pub(crate) fn new(layers: Vec<ConvLayerInfo>, filters: Vec<FilterGroup>) -> Self {
        let kernel_weight_count = layers.iter().map(|l| l.out_channels * l.weights_per_filter()).sum();
        FilterRegistry { layers, filters, kernel_weight_count }
    }

    pub fn layers(&self) -> &[ConvLayerInfo] {
        &self.layers
    }

    pub fn filters(&self) -> &[FilterGroup] {
        &self.filters
    }

    pub fn filter_count(&self) -> usize {
        self.filters.len()
    }

    /// Total number of conv kernel weights, the length of a parameter saliency vector.
    pub fn kernel_weight_count(&self) -> usize {
        self.kernel_weight_count
    }

    /// Filter-id range of every layer, shallow to deep.
    pub fn layer_boundaries(&self) -> Vec<Range<usize>> {
        self.layers.iter().map(ConvLayerInfo::filters).collect()
    }

    pub fn layer_of(&self, filter: usize) -> Option<&ConvLayerInfo> {
        self.filters.get(filter).map(|f| &self.layers[f.layer_id])
    }

    /// The α_k sets over the concatenated kernel-weight vector.
    pub fn index_sets(&self) -> Arc<IndexSets> {
        let sets = self.filters.iter().map(|f| f.alpha.clone().collect()).collect();
        Arc::new(IndexSets::new(sets, self.kernel_weight_count).expect("registry sets are valid"))
    }
}
