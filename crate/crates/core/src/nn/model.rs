use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::registry::{Companions, ConvLayerInfo, FilterGroup, FilterRegistry, ParamElem};
use super::spec::{Architecture, ModelSpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    DenseWeight,
    DenseBias,
}

impl ParamKind {
    /// Whether the optimizer updates this tensor (running statistics are buffers).
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Stage index, see [`Model::stage_names`].
    pub stage: usize,
    pub value: Arc<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics, treated as constants.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnUnit {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvUnit {
    weight: usize,
    bias: Option<usize>,
    bn: Option<BnUnit>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Resnet { stem: ConvUnit, blocks: Vec<ResBlock> },
    Plain { stages: Vec<Vec<ConvUnit>> },
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    descriptors: Vec<(String, ParamKind, usize, Vec<usize>)>,
    body: Body,
    head: (usize, usize),
    feature_len: usize,
    stage_names: Vec<String>,
    registry: FilterRegistry,
}

struct LayoutBuilder {
    descriptors: Vec<(String, ParamKind, usize, Vec<usize>)>,
    layers: Vec<ConvLayerInfo>,
    filters: Vec<FilterGroup>,
    weight_offset: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, kind: ParamKind, stage: usize, shape: Vec<usize>) -> usize {
        self.descriptors.push((name, kind, stage, shape));
        self.descriptors.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        bn_prefix: Option<&str>,
        stage: usize,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        with_bias: bool,
    ) -> ConvUnit {
        let weight = self.param(format!("{prefix}.weight"), ParamKind::ConvWeight, stage, vec![out_ch, in_ch, k, k]);
        let bias = with_bias.then(|| self.param(format!("{prefix}.bias"), ParamKind::ConvBias, stage, vec![out_ch]));
        let bn = bn_prefix.map(|p| BnUnit {
            gamma: self.param(format!("{p}.gamma"), ParamKind::BnGamma, stage, vec![out_ch]),
            beta: self.param(format!("{p}.beta"), ParamKind::BnBeta, stage, vec![out_ch]),
            mean: self.param(format!("{p}.running_mean"), ParamKind::BnRunningMean, stage, vec![out_ch]),
            var: self.param(format!("{p}.running_var"), ParamKind::BnRunningVar, stage, vec![out_ch]),
        });
        let layer_id = self.layers.len();
        let first_filter = self.filters.len();
        let per = in_ch * k * k;
        for c in 0..out_ch {
            let start = self.weight_offset + c * per;
            self.filters.push(FilterGroup {
                id: first_filter + c,
                layer_id,
                channel: c,
                alpha: start..start + per,
                companions: Companions {
                    conv_bias: bias.map(|param| ParamElem { param, index: c }),
                    bn_gamma: bn.map(|b| ParamElem { param: b.gamma, index: c }),
                    bn_beta: bn.map(|b| ParamElem { param: b.beta, index: c }),
                },
            });
        }
        self.layers.push(ConvLayerInfo {
            layer_id,
            name: prefix.to_string(),
            param: weight,
            in_channels: in_ch,
            out_channels: out_ch,
            kernel: [k, k],
            stage,
            first_filter,
            weight_offset: self.weight_offset,
        });
        self.weight_offset += out_ch * per;
        ConvUnit { weight, bias, bn, stride, pad: k / 2 }
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    // 3×3 / pad 1 and 1×1 / pad 0 both give ceil(n / stride).
    n.div_ceil(stride)
}

impl Layout {
    fn from_spec(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = LayoutBuilder { descriptors: Vec::new(), layers: Vec::new(), filters: Vec::new(), weight_offset: 0 };
        let [c_in, mut h, mut w] = spec.input_shape;
        let mut stage_names = Vec::new();
        let (body, last_width, head_stage) = match spec.architecture {
            Architecture::SmallResnet => {
                stage_names.push("stem".to_string());
                let stem = b.conv("stem.conv", Some("stem.bn"), 0, c_in, spec.widths[0], 3, 1, false);
                let mut blocks = Vec::new();
                let mut in_ch = spec.widths[0];
                for (s, &width) in spec.widths.iter().enumerate() {
                    let stage = s + 1;
                    stage_names.push(format!("stage{stage}"));
                    for blk in 0..spec.blocks_per_stage {
                        let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                        let p = format!("stage{stage}.block{blk}");
                        let conv1 =
                            b.conv(&format!("{p}.conv1"), Some(&format!("{p}.bn1")), stage, in_ch, width, 3, stride, false);
                        let conv2 =
                            b.conv(&format!("{p}.conv2"), Some(&format!("{p}.bn2")), stage, width, width, 3, 1, false);
                        let shortcut = (stride != 1 || in_ch != width).then(|| {
                            b.conv(
                                &format!("{p}.shortcut.conv"),
                                Some(&format!("{p}.shortcut.bn")),
                                stage,
                                in_ch,
                                width,
                                1,
                                stride,
                                false,
                            )
                        });
                        h = conv_out(h, stride);
                        w = conv_out(w, stride);
                        blocks.push(ResBlock { conv1, conv2, shortcut });
                        in_ch = width;
                    }
                }
                (Body::Resnet { stem, blocks }, in_ch, spec.widths.len() + 1)
            }
            Architecture::PlainCnn => {
                let mut stages = Vec::new();
                let mut in_ch = c_in;
                for (s, &width) in spec.widths.iter().enumerate() {
                    stage_names.push(format!("stage{}", s + 1));
                    let mut units = Vec::new();
                    for j in 0..spec.blocks_per_stage {
                        units.push(b.conv(&format!("stage{}.conv{j}", s + 1), None, s, in_ch, width, 3, 1, true));
                        in_ch = width;
                    }
                    stages.push(units);
                    h /= 2;
                    w /= 2;
                }
                (Body::Plain { stages }, in_ch * h * w, spec.widths.len())
            }
        };
        stage_names.push("head".to_string());
        let feature_len = last_width;
        let fc_w = b.param("fc.weight".into(), ParamKind::DenseWeight, head_stage, vec![spec.num_classes, feature_len]);
        let fc_b = b.param("fc.bias".into(), ParamKind::DenseBias, head_stage, vec![spec.num_classes]);
        let _ = (h, w);
        Ok(Layout {
            descriptors: b.descriptors,
            body,
            head: (fc_w, fc_b),
            feature_len,
            stage_names,
            registry: FilterRegistry::new(b.layers, b.filters),
        })
    }
}

/// Rounds to the nearest `f32`, the checkpoint storage precision.
pub(crate) fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws a fresh value for a parameter from the initialization distribution.
pub(crate) fn init_tensor(kind: ParamKind, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    match kind {
        ParamKind::ConvWeight | ParamKind::DenseWeight => {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    to_storage(z * std)
                })
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
        ParamKind::BnGamma | ParamKind::BnRunningVar => Tensor::ones(shape),
        ParamKind::ConvBias | ParamKind::DenseBias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
            Tensor::zeros(shape)
        }
    }
}

/// Softmax output for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub confidences: Vec<f64>,
    pub predicted: usize,
}

impl Prediction {
    fn from_logits(logits: Vec<f64>) -> Self {
        let confidences = softmax_rows(&logits, logits.len());
        let predicted = argmax(&logits);
        Prediction { logits, confidences, predicted }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Output of a forward pass.
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// `(running_mean param, running_var param, batch mean, biased batch var)` per batchnorm in train mode.
    pub bn_batch_stats: Vec<(usize, usize, Tensor, Tensor)>,
    /// Output of every conv unit (after bias / batchnorm, before any residual add or ReLU), in layer order.
    pub unit_outputs: Vec<Var<'t>>,
}

/// A convolutional classifier: its spec, parameters and filter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    layout: Arc<Layout>,
}

impl Model {
    /// Builds a model with He fan-in normal weights (rounded to `f32`),
    /// batchnorm γ = 1 and β = 0, and zero biases.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let layout = Layout::from_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .descriptors
            .iter()
            .map(|(name, kind, stage, shape)| Param {
                name: name.clone(),
                kind: *kind,
                stage: *stage,
                value: Arc::new(init_tensor(*kind, shape, &mut rng)),
            })
            .collect();
        Ok(Model { spec: spec.clone(), params, layout: Arc::new(layout) })
    }

    /// Assembles a model from named tensors in layout order.
    pub fn from_tensors(spec: &ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = Layout::from_spec(spec)?;
        if tensors.len() != layout.descriptors.len() {
            return Err(Error::format(format!(
                "spec expects {} tensors, found {}",
                layout.descriptors.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, kind, stage, shape), (tname, t)) in layout.descriptors.iter().zip(tensors) {
            if *name != tname || t.shape() != shape.as_slice() {
                return Err(Error::format(format!(
                    "tensor {tname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            params.push(Param { name: tname, kind: *kind, stage: *stage, value: Arc::new(t) });
        }
        Ok(Model { spec: spec.clone(), params, layout: Arc::new(layout) })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn registry(&self) -> &FilterRegistry {
        &self.layout.registry
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Stage names, shallow to deep, ending with the dense head.
    pub fn stage_names(&self) -> &[String] {
        &self.layout.stage_names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub(crate) fn set_param(&mut self, index: usize, value: Tensor) {
        debug_assert_eq!(value.shape(), self.params[index].value.shape());
        self.params[index].value = Arc::new(value);
    }

    pub(crate) fn param_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[index].value)
    }

    /// All conv kernel weights concatenated in registry order.
    pub fn kernel_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.registry().kernel_weight_count());
        for layer in self.registry().layers() {
            out.extend_from_slice(self.params[layer.param].value.data());
        }
        out
    }

    /// Copy with the conv kernel weights replaced by `weights` (registry order).
    pub fn with_kernel_weights(&self, weights: &[f64]) -> Result<Model> {
        if weights.len() != self.registry().kernel_weight_count() {
            return Err(Error::shape("with_kernel_weights", format!("{} values", weights.len())));
        }
        let mut out = self.clone();
        let mut off = 0;
        for layer in self.registry().layers() {
            let t = out.param_mut(layer.param);
            let n = t.numel();
            t.data_mut().copy_from_slice(&weights[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    /// Rounds every parameter to `f32` precision so checkpoints round-trip exactly.
    pub fn round_to_storage(&mut self) {
        for p in &mut self.params {
            if p.value.data().iter().any(|&v| to_storage(v) != v) {
                let rounded = p.value.map(to_storage);
                p.value = Arc::new(rounded);
            }
        }
    }

    /// Puts every parameter on `tape`; those selected by `trainable` require grad.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(usize, &Param) -> bool) -> Result<Vec<Var<'t>>> {
        self.params.iter().enumerate().map(|(i, p)| tape.leaf(Arc::clone(&p.value), trainable(i, p))).collect()
    }

    /// Binds with only the conv kernel weights requiring grad.
    pub fn bind_kernel_weights<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.bind(tape, |_, p| p.kind == ParamKind::ConvWeight)
    }

    pub fn bind_constants<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.bind(tape, |_, _| false)
    }

    /// The bound kernel weight variables in registry order.
    pub fn kernel_weight_vars<'t>(&self, vars: &[Var<'t>]) -> Vec<Var<'t>> {
        self.registry().layers().iter().map(|l| vars[l.param]).collect()
    }

    fn unit<'t>(
        &self,
        vars: &[Var<'t>],
        u: &ConvUnit,
        x: Var<'t>,
        mode: BnMode,
        out: &mut ForwardOutput<'t>,
    ) -> Result<Var<'t>> {
        let mut y = x.conv2d(vars[u.weight], u.stride, u.pad)?;
        if let Some(b) = u.bias {
            y = y.add_bias(vars[b])?;
        }
        if let Some(bn) = u.bn {
            y = match mode {
                BnMode::Eval => y.batchnorm2d_eval(
                    vars[bn.gamma],
                    vars[bn.beta],
                    &self.params[bn.mean].value,
                    &self.params[bn.var].value,
                    BN_EPS,
                )?,
                BnMode::Train => {
                    let (y, mean, var) = y.batchnorm2d_train(vars[bn.gamma], vars[bn.beta], BN_EPS)?;
                    out.bn_batch_stats.push((bn.mean, bn.var, mean, var));
                    y
                }
            };
        }
        out.unit_outputs.push(y);
        Ok(y)
    }

    /// Runs the network on an `[N, C, H, W]` batch with parameters `vars` from [`Model::bind`].
    pub fn forward<'t>(&self, vars: &[Var<'t>], x: Var<'t>, mode: BnMode) -> Result<ForwardOutput<'t>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != self.spec.input_shape {
            return Err(Error::shape(
                "forward",
                format!("input {xs:?} does not match [N, {:?}]", self.spec.input_shape),
            ));
        }
        if vars.len() != self.params.len() {
            return Err(Error::invalid("parameter binding does not match model"));
        }
        let n = xs[0];
        let mut out = ForwardOutput { logits: x, bn_batch_stats: Vec::new(), unit_outputs: Vec::new() };
        let features = match &self.layout.body {
            Body::Resnet { stem, blocks } => {
                let mut h = self.unit(vars, stem, x, mode, &mut out)?.relu()?;
                for blk in blocks {
                    let a = self.unit(vars, &blk.conv1, h, mode, &mut out)?.relu()?;
                    let a = self.unit(vars, &blk.conv2, a, mode, &mut out)?;
                    let skip = match &blk.shortcut {
                        Some(sc) => self.unit(vars, sc, h, mode, &mut out)?,
                        None => h,
                    };
                    h = a.add(skip)?.relu()?;
                }
                let s = h.shape();
                h.avg_pool2d(s[2], s[3])?.reshape(&[n, s[1]])?
            }
            Body::Plain { stages } => {
                let mut h = x;
                for units in stages {
                    for u in units {
                        h = self.unit(vars, u, h, mode, &mut out)?.relu()?;
                    }
                    h = h.max_pool2d(2)?;
                }
                h.reshape(&[n, self.layout.feature_len])?
            }
        };
        let (fw, fb) = self.layout.head;
        out.logits = features.dense(vars[fw], vars[fb])?;
        Ok(out)
    }

    /// Eval-mode prediction for a batch of `[C, H, W]` images.
    pub fn predict_batch(&self, images: &[&Tensor]) -> Result<Vec<Prediction>> {
        let tape = Tape::new();
        let vars = self.bind_constants(&tape)?;
        let x = tape.constant(Tensor::stack(images)?)?;
        let logits = self.forward(&vars, x, BnMode::Eval)?.logits.value();
        let k = self.spec.num_classes;
        Ok(logits.data().chunks(k).map(|row| Prediction::from_logits(row.to_vec())).collect())
    }

    /// Eval-mode prediction for one `[C, H, W]` image.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Predictions in chunks of `chunk` images.
    pub fn predict_many(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for c in images.chunks(chunk.max(1)) {
            out.extend(self.predict_batch(c)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Conv filter count by direct enumeration of the residual layout.
    fn enumerate_resnet_filters(widths: &[usize], blocks: usize) -> usize {
        let mut count = widths[0];
        let mut in_ch = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                count += 2 * w;
                if stride != 1 || in_ch != w {
                    count += w;
                }
                in_ch = w;
            }
        }
        count
    }

    #[test]
    fn default_resnet_filter_count_matches_enumeration() {
        let spec = ModelSpec::default_resnet([3, 32, 32], 10);
        let m = Model::build(&spec, 0).unwrap();
        // stem 16; stage1 4×16; stage2 4×32 + 32; stage3 4×64 + 64
        assert_eq!(enumerate_resnet_filters(&[16, 32, 64], 2), 16 + 64 + 160 + 320);
        assert_eq!(m.registry().filter_count(), enumerate_resnet_filters(&[16, 32, 64], 2));
    }

    #[test]
    fn plain_cnn_single_layer_groups() {
        let spec = ModelSpec::plain_cnn(&[8], 1, [1, 28, 28], 10);
        let m = Model::build(&spec, 0).unwrap();
        let reg = m.registry();
        assert_eq!(reg.filter_count(), 8);
        assert!(reg.filters().iter().all(|f| f.alpha.len() == 9));
        assert!(reg.filters().iter().all(|f| f.companions.conv_bias.is_some() && f.companions.bn_gamma.is_none()));
    }

    #[test]
    fn registry_partitions_kernel_weights() {
        for spec in [
            ModelSpec::small_resnet(&[4, 8], 2, [3, 8, 8], 3),
            ModelSpec::plain_cnn(&[4, 6], 2, [1, 8, 8], 3),
        ] {
            let m = Model::build(&spec, 1).unwrap();
            let reg = m.registry();
            let total: usize = reg
                .layers()
                .iter()
                .map(|l| m.params()[l.param].value.numel())
                .sum();
            let mut seen = vec![0u8; total];
            for f in reg.filters() {
                assert_eq!(f.alpha.len(), reg.layer_of(f.id).unwrap().weights_per_filter());
                for i in f.alpha.clone() {
                    seen[i] += 1;
                }
            }
            assert_eq!(total, reg.kernel_weight_count());
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn layer_ids_are_ordered() {
        let m = Model::build(&ModelSpec::default_resnet([3, 16, 16], 10), 0).unwrap();
        for (i, l) in m.registry().layers().iter().enumerate() {
            assert_eq!(l.layer_id, i);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::small_resnet(&[4, 8], 1, [3, 8, 8], 5);
        assert_eq!(Model::build(&spec, 42).unwrap(), Model::build(&spec, 42).unwrap());
        assert_ne!(Model::build(&spec, 42).unwrap(), Model::build(&spec, 43).unwrap());
    }

    #[test]
    fn uniform_logits_give_uniform_confidences() {
        let p = Prediction::from_logits(vec![0.0; 4]);
        assert!(p.confidences.iter().all(|&c| (c - 0.25).abs() < 1e-15));
    }

    #[test]
    fn batch_rows_match_single_predictions() {
        let spec = ModelSpec::small_resnet(&[4, 8], 1, [3, 8, 8], 5);
        let m = Model::build(&spec, 3).unwrap();
        let imgs: Vec<Tensor> = (0..4)
            .map(|s| Tensor::new(vec![3, 8, 8], (0..192).map(|i| ((i * (s + 2)) as f64 * 0.1).sin()).collect()).unwrap())
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let batch = m.predict_batch(&refs).unwrap();
        for (img, row) in imgs.iter().zip(&batch) {
            let single = m.predict(img).unwrap();
            assert_eq!(single.predicted, row.predicted);
            for (a, b) in single.confidences.iter().zip(&row.confidences) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((row.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(argmax(&row.logits), argmax(&row.confidences));
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Model::build(&ModelSpec::small_resnet(&[4], 1, [3, 8, 8], 2), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 8, 8])).is_err());
    }
}
