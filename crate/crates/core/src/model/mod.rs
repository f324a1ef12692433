//! The three-part classifier: backbone `f`, prediction head `g` and projection
//! head `h`.
//!
//! The backbone maps an NCHW image batch to an `n × d` feature matrix, `g` is an
//! affine map `d → C` and `h` an affine map `d → d`. Parameters live in a single
//! [`ParamVector`] tagged by group so that weight decay, the optimizer, the EMA
//! and checkpoints treat them uniformly. Batch-norm running statistics are kept
//! separately in [`NormState`]; they are state, not trainable parameters.

pub mod checkpoint;
pub mod layers;
mod params;

use std::iter::Sum;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Ix1, Ix2, IxDyn, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::augment::Image;
use crate::rng::{stream_rng, Stream};
use layers::{BnCache, ConvShape};
pub use params::{Gradients, Param, ParamGroup, ParamId, ParamVector};

/// Floating-point element type of a model (`f32` for training, `f64` for
/// gradient checks).
pub trait Real: NdFloat + Sum + Default {}
impl<T: NdFloat + Sum + Default> Real for T {}

#[inline]
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from(v).unwrap()
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}` (expected wrn-28-2, wrn-28-8, wrn-37-2 or desk-cnn)")]
    UnknownArch(String),
    #[error("input batch is {got:?} (C,H,W) but the model expects {expected:?}")]
    Resolution {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("feature width {got} does not match the model width {expected}")]
    Width { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Backbone family and size.
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    /// Pre-activation wide residual network: per-group widths and strides,
    /// `blocks` residual blocks per group.
    WideResNet {
        name: &'static str,
        widths: Vec<usize>,
        strides: Vec<usize>,
        blocks: usize,
    },
    /// Four conv-BN-activation layers followed by global average pooling.
    DeskCnn { feature_dim: usize },
}

impl Arch {
    /// `feature_dim` only applies to `desk-cnn`.
    pub fn from_name(name: &str, feature_dim: usize) -> Result<Self, ModelError> {
        Ok(match name {
            "wrn-28-2" => Arch::WideResNet {
                name: "wrn-28-2",
                widths: vec![32, 64, 128],
                strides: vec![1, 2, 2],
                blocks: 4,
            },
            "wrn-28-8" => Arch::WideResNet {
                name: "wrn-28-8",
                widths: vec![128, 256, 512],
                strides: vec![1, 2, 2],
                blocks: 4,
            },
            "wrn-37-2" => Arch::WideResNet {
                name: "wrn-37-2",
                widths: vec![32, 64, 128, 256],
                strides: vec![1, 2, 2, 2],
                blocks: 4,
            },
            "desk-cnn" => Arch::DeskCnn {
                feature_dim: feature_dim.max(4),
            },
            other => return Err(ModelError::UnknownArch(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::WideResNet { name, .. } => name,
            Arch::DeskCnn { .. } => "desk-cnn",
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Arch::WideResNet { widths, .. } => *widths.last().unwrap(),
            Arch::DeskCnn { feature_dim } => *feature_dim,
        }
    }

    /// Native input side length.
    pub fn default_input_size(&self) -> usize {
        match self {
            Arch::WideResNet { name: "wrn-37-2", .. } => 96,
            _ => 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_classes: usize,
    pub input_size: usize,
    pub channels: usize,
    pub projection_bias: bool,
}

impl ModelSpec {
    pub fn new(arch: Arch, num_classes: usize) -> Self {
        let input_size = arch.default_input_size();
        Self {
            arch,
            num_classes,
            input_size,
            channels: 3,
            projection_bias: true,
        }
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T> {
    pub name: String,
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormState<T> {
    pub layers: Vec<NormStats<T>>,
}

/// Running-statistics momentum of batch norm.
pub const BN_MOMENTUM: f64 = 0.001;

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    shape: ConvShape,
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone)]
struct WideBlock {
    bn1: Bn,
    conv1: Conv,
    bn2: Bn,
    conv2: Conv,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone)]
enum Stage {
    Conv(Conv),
    ConvBnAct(Conv, Bn),
    Block(WideBlock),
    BnAct(Bn),
}

struct BnActCache<T> {
    bn: BnCache<T>,
    pre_act: Array4<T>,
}

struct BlockCache<T> {
    act1: BnActCache<T>,
    a: Array4<T>,
    act2: BnActCache<T>,
    h2: Array4<T>,
}

enum StageCache<T> {
    Conv(Array4<T>),
    ConvBnAct(Array4<T>, BnActCache<T>),
    Block(Box<BlockCache<T>>),
    BnAct(BnActCache<T>),
}

/// Intermediate values of a training-mode backbone forward pass.
pub struct FeatureTape<T> {
    stages: Vec<StageCache<T>>,
    pooled_hw: (usize, usize),
}

/// How batch norm behaves in a forward pass.
enum NormMode<'a, T> {
    /// Batch statistics; running estimates updated when present.
    Train(Option<&'a mut NormState<T>>),
    /// Running statistics.
    Eval(&'a NormState<T>),
}

struct Builder<'a, T, R> {
    params: ParamVector<T>,
    norm: NormState<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                real::<T>(z * std)
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| real::<T>(self.rng.random_range(-bound..bound))).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Conv {
        let fan_in = in_ch * kernel * kernel;
        let w = self.normal(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in as f64).sqrt());
        Conv {
            weight: self.params.push(format!("f.{name}.weight"), ParamGroup::Backbone, w),
            shape: ConvShape {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad: kernel / 2,
            },
        }
    }

    fn bn(&mut self, name: &str, ch: usize) -> Bn {
        let gamma = self.params.push(
            format!("f.{name}.gamma"),
            ParamGroup::Backbone,
            ArrayD::from_elem(IxDyn(&[ch]), T::one()),
        );
        let beta = self.params.push(
            format!("f.{name}.beta"),
            ParamGroup::Backbone,
            ArrayD::zeros(IxDyn(&[ch])),
        );
        self.norm.layers.push(NormStats {
            name: format!("f.{name}"),
            mean: Array1::zeros(ch),
            var: Array1::ones(ch),
        });
        Bn {
            gamma,
            beta,
            stats: self.norm.layers.len() - 1,
        }
    }
}

/// Backbone `f` plus heads `g` and `h`, with their parameters and norm state.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub spec: ModelSpec,
    pub params: ParamVector<T>,
    pub norm: NormState<T>,
    stages: Vec<Stage>,
    g_weight: ParamId,
    g_bias: ParamId,
    h_weight: ParamId,
    h_bias: Option<ParamId>,
}

/// Build an architecture preset with default input size and a bias on `h`.
pub fn build_model<T: Real>(arch: &str, num_classes: usize, seed: u64) -> Result<ModelBundle<T>, ModelError> {
    let spec = ModelSpec::new(Arch::from_name(arch, 64)?, num_classes);
    Ok(ModelBundle::build(spec, seed))
}

impl<T: Real> ModelBundle<T> {
    pub fn build(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut b = Builder {
            params: ParamVector::new(),
            norm: NormState::default(),
            rng: &mut rng,
        };
        let mut stages = Vec::new();
        match &spec.arch {
            Arch::WideResNet {
                widths,
                strides,
                blocks,
                ..
            } => {
                stages.push(Stage::Conv(b.conv("stem", spec.channels, 16, 3, 1)));
                let mut in_ch = 16;
                for (gi, (&width, &stride)) in widths.iter().zip(strides).enumerate() {
                    for bi in 0..*blocks {
                        let name = format!("group{gi}.block{bi}");
                        let s = if bi == 0 { stride } else { 1 };
                        let bn1 = b.bn(&format!("{name}.bn1"), in_ch);
                        let conv1 = b.conv(&format!("{name}.conv1"), in_ch, width, 3, s);
                        let bn2 = b.bn(&format!("{name}.bn2"), width);
                        let conv2 = b.conv(&format!("{name}.conv2"), width, width, 3, 1);
                        let shortcut = (in_ch != width || s != 1)
                            .then(|| b.conv(&format!("{name}.shortcut"), in_ch, width, 1, s));
                        stages.push(Stage::Block(WideBlock {
                            bn1,
                            conv1,
                            bn2,
                            conv2,
                            shortcut,
                        }));
                        in_ch = width;
                    }
                }
                stages.push(Stage::BnAct(b.bn("final_bn", in_ch)));
            }
            Arch::DeskCnn { feature_dim } => {
                let d = *feature_dim;
                let widths = [(d / 8).max(4), (d / 4).max(4), (d / 4).max(4), d];
                let strides = [2, 2, 2, 1];
                let mut in_ch = spec.channels;
                for (i, (&w, &s)) in widths.iter().zip(&strides).enumerate() {
                    let conv = b.conv(&format!("conv{i}"), in_ch, w, 3, s);
                    let bn = b.bn(&format!("bn{i}"), w);
                    stages.push(Stage::ConvBnAct(conv, bn));
                    in_ch = w;
                }
            }
        }
        let d = spec.arch.feature_dim();
        let c = spec.num_classes;
        let g_bound = 1.0 / (d as f64).sqrt();
        let gw = b.uniform(&[c, d], g_bound);
        let g_weight = b.params.push("g.weight".into(), ParamGroup::Prediction, gw);
        let g_bias = b.params.push("g.bias".into(), ParamGroup::Prediction, ArrayD::zeros(IxDyn(&[c])));
        let hw = b.uniform(&[d, d], g_bound);
        let h_weight = b.params.push("h.weight".into(), ParamGroup::Projection, hw);
        let h_bias = spec
            .projection_bias
            .then(|| b.params.push("h.bias".into(), ParamGroup::Projection, ArrayD::zeros(IxDyn(&[d]))));
        let Builder { params, norm, .. } = b;
        let bundle = Self {
            spec,
            params,
            norm,
            stages,
            g_weight,
            g_bias,
            h_weight,
            h_bias,
        };
        bundle.assert_partition();
        bundle
    }

    /// Every parameter is referenced by exactly one layer, and group tags agree
    /// with the component that uses it.
    fn assert_partition(&self) {
        let mut owners = vec![None; self.params.len()];
        let mut claim = |id: ParamId, group: ParamGroup| {
            assert!(owners[id.0].is_none(), "parameter used twice");
            owners[id.0] = Some(group);
        };
        let conv = |c: &Conv, claim: &mut dyn FnMut(ParamId, ParamGroup)| claim(c.weight, ParamGroup::Backbone);
        let bn = |b: &Bn, claim: &mut dyn FnMut(ParamId, ParamGroup)| {
            claim(b.gamma, ParamGroup::Backbone);
            claim(b.beta, ParamGroup::Backbone);
        };
        for stage in &self.stages {
            match stage {
                Stage::Conv(c) => conv(c, &mut claim),
                Stage::ConvBnAct(c, b) => {
                    conv(c, &mut claim);
                    bn(b, &mut claim);
                }
                Stage::Block(blk) => {
                    bn(&blk.bn1, &mut claim);
                    conv(&blk.conv1, &mut claim);
                    bn(&blk.bn2, &mut claim);
                    conv(&blk.conv2, &mut claim);
                    if let Some(sc) = &blk.shortcut {
                        conv(sc, &mut claim);
                    }
                }
                Stage::BnAct(b) => bn(b, &mut claim),
            }
        }
        claim(self.g_weight, ParamGroup::Prediction);
        claim(self.g_bias, ParamGroup::Prediction);
        claim(self.h_weight, ParamGroup::Projection);
        if let Some(hb) = self.h_bias {
            claim(hb, ParamGroup::Projection);
        }
        for (p, owner) in self.params.iter().zip(&owners) {
            assert_eq!(Some(p.group), *owner, "parameter {} not covered by its group", p.name);
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.arch.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Expected (C, H, W) of one input image.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.spec.channels, self.spec.input_size, self.spec.input_size)
    }

    fn check_input(&self, x: &Array4<T>) -> Result<(), ModelError> {
        let (n, c, h, w) = x.dim();
        if n == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if (c, h, w) != self.input_shape() {
            return Err(ModelError::Resolution {
                expected: self.input_shape(),
                got: (c, h, w),
            });
        }
        Ok(())
    }

    fn check_width(&self, feats: &Array2<T>) -> Result<(), ModelError> {
        if feats.ncols() != self.feature_dim() {
            return Err(ModelError::Width {
                expected: self.feature_dim(),
                got: feats.ncols(),
            });
        }
        Ok(())
    }

    /// Penultimate-layer features. In train mode batch statistics are used and
    /// the running estimates are updated.
    pub fn forward_features(&mut self, batch: &Array4<T>, train_mode: bool) -> Result<Array2<T>, ModelError> {
        self.check_input(batch)?;
        let (feats, _) = if train_mode {
            let mut norm = std::mem::take(&mut self.norm);
            let out = run_backbone(&self.stages, &self.params, NormMode::Train(Some(&mut norm)), batch, false);
            self.norm = norm;
            out
        } else {
            run_backbone(&self.stages, &self.params, NormMode::Eval(&self.norm), batch, false)
        };
        Ok(feats)
    }

    /// Train-mode forward without a tape. Running statistics are updated only
    /// when `update_stats` is set.
    pub fn forward_features_train(&mut self, batch: &Array4<T>, update_stats: bool) -> Result<Array2<T>, ModelError> {
        self.check_input(batch)?;
        let mut norm = std::mem::take(&mut self.norm);
        let mode = NormMode::Train(update_stats.then_some(&mut norm));
        let (feats, _) = run_backbone(&self.stages, &self.params, mode, batch, false);
        self.norm = norm;
        Ok(feats)
    }

    /// Train-mode forward that records a tape for [`ModelBundle::backward_features`].
    /// Running statistics are updated only when `update_stats` is set.
    pub fn forward_features_tape(
        &mut self,
        batch: &Array4<T>,
        update_stats: bool,
    ) -> Result<(Array2<T>, FeatureTape<T>), ModelError> {
        self.check_input(batch)?;
        let mut norm = std::mem::take(&mut self.norm);
        let mode = NormMode::Train(update_stats.then_some(&mut norm));
        let (feats, tape) = run_backbone(&self.stages, &self.params, mode, batch, true);
        self.norm = norm;
        Ok((feats, tape.expect("tape requested")))
    }

    /// Accumulate parameter gradients of the backbone given `d loss / d features`.
    pub fn backward_features(&self, tape: FeatureTape<T>, dfeats: &Array2<T>, grads: &mut Gradients<T>) {
        backward_backbone(&self.stages, &self.params, tape, dfeats, grads);
    }

    fn matrix(&self, id: ParamId) -> ArrayView2<'_, T> {
        self.params.get(id).view().into_dimensionality::<Ix2>().unwrap()
    }

    fn vector(&self, id: ParamId) -> Array1<T> {
        self.params.get(id).clone().into_dimensionality::<Ix1>().unwrap()
    }

    /// `g`: features → logits.
    pub fn forward_logits(&self, feats: &Array2<T>) -> Result<Array2<T>, ModelError> {
        self.check_width(feats)?;
        let bias = self.vector(self.g_bias);
        Ok(layers::linear_forward(feats, self.matrix(self.g_weight), Some(&bias)))
    }

    /// `h`: features → projected features (same width).
    pub fn project(&self, feats: &Array2<T>) -> Result<Array2<T>, ModelError> {
        self.check_width(feats)?;
        let bias = self.h_bias.map(|id| self.vector(id));
        Ok(layers::linear_forward(feats, self.matrix(self.h_weight), bias.as_ref()))
    }

    fn linear_backward(
        &self,
        weight: ParamId,
        bias: Option<ParamId>,
        feats: &Array2<T>,
        dout: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        let (wslot, bslot) = grads_pair(grads, weight, bias);
        let dweight: ArrayViewMut2<T> = wslot.view_mut().into_dimensionality::<Ix2>().unwrap();
        let mut dbias = bslot.map(|b| std::mem::take(b).into_dimensionality::<Ix1>().unwrap());
        let dx = layers::linear_backward(feats, self.matrix(weight), dout, dweight, dbias.as_mut());
        if let (Some(id), Some(db)) = (bias, dbias) {
            grads.tensors[id.0] = db.into_dyn();
        }
        dx
    }

    /// Accumulate `g` gradients; returns `d loss / d features`.
    pub fn backward_logits(&self, feats: &Array2<T>, dlogits: &Array2<T>, grads: &mut Gradients<T>) -> Array2<T> {
        self.linear_backward(self.g_weight, Some(self.g_bias), feats, dlogits, grads)
    }

    /// Accumulate `h` gradients; returns `d loss / d features`.
    pub fn backward_project(&self, feats: &Array2<T>, dproj: &Array2<T>, grads: &mut Gradients<T>) -> Array2<T> {
        self.linear_backward(self.h_weight, self.h_bias, feats, dproj, grads)
    }

    /// Set `h` to the identity map with zero bias (test fixture).
    pub fn set_projection_identity(&mut self) {
        let d = self.feature_dim();
        *self.params.get_mut(self.h_weight) = Array2::<T>::eye(d).into_dyn();
        if let Some(b) = self.h_bias {
            self.params.get_mut(b).fill(T::zero());
        }
    }

    /// Overwrite `g` with explicit weights `(C, d)` and bias `(C)`.
    pub fn set_prediction_head(&mut self, weight: Array2<T>, bias: Array1<T>) {
        assert_eq!(weight.dim(), (self.num_classes(), self.feature_dim()));
        *self.params.get_mut(self.g_weight) = weight.into_dyn();
        *self.params.get_mut(self.g_bias) = bias.into_dyn();
    }

    /// Eval-mode logits for a batch, with alternate parameters (e.g. the EMA shadow).
    pub fn eval_logits_with(&self, params: &ParamVector<T>, batch: &Array4<T>) -> Result<Array2<T>, ModelError> {
        self.check_input(batch)?;
        assert!(params.same_layout(&self.params), "parameter layout mismatch");
        let (feats, _) = run_backbone(&self.stages, params, NormMode::Eval(&self.norm), batch, false);
        let bias = params.get(self.g_bias).clone().into_dimensionality::<Ix1>().unwrap();
        let w = params.get(self.g_weight).view().into_dimensionality::<Ix2>().unwrap();
        Ok(layers::linear_forward(&feats, w, Some(&bias)))
    }
}

/// Disjoint mutable access to a weight slot and an optional bias slot.
fn grads_pair<T>(
    grads: &mut Gradients<T>,
    weight: ParamId,
    bias: Option<ParamId>,
) -> (&mut ArrayD<T>, Option<&mut ArrayD<T>>) {
    match bias {
        None => (&mut grads.tensors[weight.0], None),
        Some(b) => {
            assert_ne!(weight.0, b.0);
            if weight.0 < b.0 {
                let (lo, hi) = grads.tensors.split_at_mut(b.0);
                (&mut lo[weight.0], Some(&mut hi[0]))
            } else {
                let (lo, hi) = grads.tensors.split_at_mut(weight.0);
                (&mut hi[0], Some(&mut lo[b.0]))
            }
        }
    }
}

fn conv_weight<'a, T: Real>(params: &'a ParamVector<T>, conv: &Conv) -> ArrayView2<'a, T> {
    let s = &conv.shape;
    params
        .get(conv.weight)
        .view()
        .into_shape_with_order((s.out_ch, s.in_ch * s.kernel * s.kernel))
        .unwrap()
}

fn conv_fwd<T: Real>(params: &ParamVector<T>, conv: &Conv, x: &Array4<T>) -> Array4<T> {
    layers::conv_forward(x, conv_weight(params, conv), &conv.shape)
}

fn conv_bwd<T: Real>(
    params: &ParamVector<T>,
    conv: &Conv,
    x: &Array4<T>,
    dy: &Array4<T>,
    grads: &mut Gradients<T>,
    need_input_grad: bool,
) -> Option<Array4<T>> {
    let s = conv.shape;
    let dw = grads.tensors[conv.weight.0]
        .view_mut()
        .into_shape_with_order((s.out_ch, s.in_ch * s.kernel * s.kernel))
        .unwrap();
    layers::conv_backward(x, conv_weight(params, conv), &s, dy, dw, need_input_grad)
}

fn bn_params<T: Real>(params: &ParamVector<T>, bn: &Bn) -> (Array1<T>, Array1<T>) {
    (
        params.get(bn.gamma).clone().into_dimensionality::<Ix1>().unwrap(),
        params.get(bn.beta).clone().into_dimensionality::<Ix1>().unwrap(),
    )
}

/// BN followed by leaky ReLU.
fn bn_act_fwd<T: Real>(
    params: &ParamVector<T>,
    bn: &Bn,
    x: &Array4<T>,
    norm: &mut NormMode<'_, T>,
    record: bool,
) -> (Array4<T>, Option<BnActCache<T>>) {
    let (gamma, beta) = bn_params(params, bn);
    match norm {
        NormMode::Eval(state) => {
            let st = &state.layers[bn.stats];
            let y = layers::bn_forward_eval(x, &gamma, &beta, &st.mean, &st.var);
            (layers::leaky_relu(&y), None)
        }
        NormMode::Train(state) => {
            let (y, cache, mean, var) = layers::bn_forward_train(x, &gamma, &beta);
            if let Some(state) = state.as_deref_mut() {
                let st = &mut state.layers[bn.stats];
                let m = real::<T>(BN_MOMENTUM);
                let keep = T::one() - m;
                st.mean.zip_mut_with(&mean, |r, &b| *r = keep * *r + m * b);
                st.var.zip_mut_with(&var, |r, &b| *r = keep * *r + m * b);
            }
            let out = layers::leaky_relu(&y);
            (out, record.then_some(BnActCache { bn: cache, pre_act: y }))
        }
    }
}

fn bn_act_bwd<T: Real>(
    params: &ParamVector<T>,
    bn: &Bn,
    cache: &BnActCache<T>,
    dy: &Array4<T>,
    grads: &mut Gradients<T>,
) -> Array4<T> {
    let d_pre = layers::leaky_relu_backward(&cache.pre_act, dy);
    let gamma = params.get(bn.gamma).clone().into_dimensionality::<Ix1>().unwrap();
    let mut dgamma = std::mem::take(&mut grads.tensors[bn.gamma.0]).into_dimensionality::<Ix1>().unwrap();
    let mut dbeta = std::mem::take(&mut grads.tensors[bn.beta.0]).into_dimensionality::<Ix1>().unwrap();
    let dx = layers::bn_backward(&cache.bn, &gamma, &d_pre, &mut dgamma, &mut dbeta);
    grads.tensors[bn.gamma.0] = dgamma.into_dyn();
    grads.tensors[bn.beta.0] = dbeta.into_dyn();
    dx
}

fn run_backbone<T: Real>(
    stages: &[Stage],
    params: &ParamVector<T>,
    mut norm: NormMode<'_, T>,
    batch: &Array4<T>,
    record: bool,
) -> (Array2<T>, Option<FeatureTape<T>>) {
    let mut caches = Vec::with_capacity(if record { stages.len() } else { 0 });
    let mut x = batch.clone();
    for stage in stages {
        match stage {
            Stage::Conv(conv) => {
                let y = conv_fwd(params, conv, &x);
                if record {
                    caches.push(StageCache::Conv(x));
                }
                x = y;
            }
            Stage::ConvBnAct(conv, bn) => {
                let h = conv_fwd(params, conv, &x);
                let (y, cache) = bn_act_fwd(params, bn, &h, &mut norm, record);
                if let Some(cache) = cache {
                    caches.push(StageCache::ConvBnAct(x, cache));
                }
                x = y;
            }
            Stage::Block(blk) => {
                let (a, act1) = bn_act_fwd(params, &blk.bn1, &x, &mut norm, record);
                let h1 = conv_fwd(params, &blk.conv1, &a);
                let (h2, act2) = bn_act_fwd(params, &blk.bn2, &h1, &mut norm, record);
                let mut out = conv_fwd(params, &blk.conv2, &h2);
                match &blk.shortcut {
                    Some(sc) => out += &conv_fwd(params, sc, &a),
                    None => out += &x,
                }
                if let (Some(act1), Some(act2)) = (act1, act2) {
                    caches.push(StageCache::Block(Box::new(BlockCache {
                        act1,
                        a,
                        act2,
                        h2,
                    })));
                }
                x = out;
            }
            Stage::BnAct(bn) => {
                let (y, cache) = bn_act_fwd(params, bn, &x, &mut norm, record);
                if let Some(cache) = cache {
                    caches.push(StageCache::BnAct(cache));
                }
                x = y;
            }
        }
    }
    let (_, _, h, w) = x.dim();
    let feats = layers::global_avg_pool(&x);
    let tape = record.then_some(FeatureTape {
        stages: caches,
        pooled_hw: (h, w),
    });
    (feats, tape)
}

fn backward_backbone<T: Real>(
    stages: &[Stage],
    params: &ParamVector<T>,
    tape: FeatureTape<T>,
    dfeats: &Array2<T>,
    grads: &mut Gradients<T>,
) {
    let (h, w) = tape.pooled_hw;
    let mut dx = layers::global_avg_pool_backward(dfeats, h, w);
    for (i, (stage, cache)) in stages.iter().zip(tape.stages).enumerate().rev() {
        // The first stage sees the raw images; its input gradient is not needed.
        let need_input = i > 0;
        dx = match (stage, cache) {
            (Stage::Conv(conv), StageCache::Conv(x)) => {
                match conv_bwd(params, conv, &x, &dx, grads, need_input) {
                    Some(d) => d,
                    None => break,
                }
            }
            (Stage::ConvBnAct(conv, bn), StageCache::ConvBnAct(x, act)) => {
                let dh = bn_act_bwd(params, bn, &act, &dx, grads);
                match conv_bwd(params, conv, &x, &dh, grads, need_input) {
                    Some(d) => d,
                    None => break,
                }
            }
            (Stage::Block(blk), StageCache::Block(c)) => {
                let dout = dx;
                let dh2 = conv_bwd(params, &blk.conv2, &c.h2, &dout, grads, true).unwrap();
                let dh1 = bn_act_bwd(params, &blk.bn2, &c.act2, &dh2, grads);
                let mut da = conv_bwd(params, &blk.conv1, &c.a, &dh1, grads, true).unwrap();
                if let Some(sc) = &blk.shortcut {
                    da += &conv_bwd(params, sc, &c.a, &dout, grads, true).unwrap();
                }
                let mut dxi = bn_act_bwd(params, &blk.bn1, &c.act1, &da, grads);
                if blk.shortcut.is_none() {
                    dxi += &dout;
                }
                dxi
            }
            (Stage::BnAct(bn), StageCache::BnAct(act)) => bn_act_bwd(params, bn, &act, &dx, grads),
            _ => unreachable!("tape does not match the network"),
        };
    }
}

/// Stack HWC images into an NCHW batch.
pub fn images_to_batch<T: Real>(images: &[Image]) -> Array4<T> {
    let first = images.first().expect("empty image list");
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut out = Array4::<T>::zeros((images.len(), c, h, w));
    {
        let dst = out.as_slice_mut().unwrap();
        for (n, img) in images.iter().enumerate() {
            assert_eq!((img.height(), img.width(), img.channels()), (h, w, c), "mixed image sizes");
            let px = img.pixels();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[((n * c + ch) * h + y) * w + x] = real(px[(y * w + x) * c + ch] as f64);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    fn desk(d: usize, c: usize) -> ModelBundle<f64> {
        let mut spec = ModelSpec::new(Arch::DeskCnn { feature_dim: d }, c);
        spec.input_size = 16;
        ModelBundle::build(spec, 3)
    }

    fn batch(n: usize, size: usize, seed: u64) -> Array4<f64> {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        Array4::from_shape_fn((n, 3, size, size), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn preset_widths() {
        for (name, d) in [("wrn-28-2", 128), ("wrn-28-8", 512), ("wrn-37-2", 256)] {
            let arch = Arch::from_name(name, 0).unwrap();
            assert_eq!(arch.feature_dim(), d);
        }
        assert!(matches!(Arch::from_name("resnet-50", 0), Err(ModelError::UnknownArch(_))));
        assert!(matches!(build_model::<f32>("vgg", 10, 0), Err(ModelError::UnknownArch(_))));
    }

    #[test]
    fn wrn_28_2_forward_shape() {
        let mut m = build_model::<f32>("wrn-28-2", 10, 0).unwrap();
        assert_eq!(m.feature_dim(), 128);
        // roughly 1.5M parameters
        let n = m.params.numel();
        assert!((1_400_000..1_600_000).contains(&n), "{n}");
        let x = batch(2, 32, 1).mapv(|v| v as f32);
        let f = m.forward_features(&x, false).unwrap();
        assert_eq!(f.dim(), (2, 128));
        assert_eq!(m.forward_logits(&f).unwrap().dim(), (2, 10));
    }

    #[test]
    fn desk_shapes() {
        let mut m = desk(64, 3);
        let x = batch(5, 16, 2);
        let f = m.forward_features(&x, true).unwrap();
        assert_eq!(f.dim(), (5, 64));
        assert_eq!(m.forward_logits(&f).unwrap().dim(), (5, 3));
        assert_eq!(m.project(&f).unwrap().dim(), (5, 64));
    }

    #[test]
    fn resolution_and_width_errors() {
        let mut m = desk(16, 3);
        assert!(matches!(
            m.forward_features(&batch(1, 32, 0), false),
            Err(ModelError::Resolution { .. })
        ));
        assert!(matches!(m.forward_logits(&Array2::zeros((2, 5))), Err(ModelError::Width { .. })));
        assert!(matches!(m.project(&Array2::zeros((2, 5))), Err(ModelError::Width { .. })));
    }

    #[test]
    fn eval_mode_is_deterministic_per_row() {
        let mut m = desk(16, 3);
        let one = batch(1, 16, 4);
        let dup = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let f = m.forward_features(&dup, false).unwrap();
        assert_eq!(f.row(0), f.row(1));
        let norm_before = m.norm.clone();
        m.forward_features(&dup, false).unwrap();
        assert_eq!(m.norm, norm_before);
        m.forward_features(&batch(4, 16, 5), true).unwrap();
        assert_ne!(m.norm, norm_before);
    }

    #[test]
    fn zero_prediction_head_gives_zero_logits() {
        let mut m = desk(16, 3);
        m.set_prediction_head(Array2::zeros((3, 16)), Array1::zeros(3));
        let f = m.forward_features(&batch(3, 16, 6), false).unwrap();
        assert!(m.forward_logits(&f).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_returns_features() {
        let mut m = desk(16, 3);
        m.set_projection_identity();
        let f = m.forward_features(&batch(3, 16, 7), false).unwrap();
        assert_eq!(m.project(&f).unwrap(), f);
    }

    #[test]
    fn favoured_class_wins_argmax() {
        let mut m = desk(4, 2);
        let w = array![[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
        m.set_prediction_head(w, Array1::zeros(2));
        let feats = array![[0.5, 0.1, 0.2, 0.3], [1.0, 2.0, 0.0, 0.1]];
        let logits = m.forward_logits(&feats).unwrap();
        for row in logits.rows() {
            assert!(row[1] > row[0]);
        }
    }

    #[test]
    fn logits_match_handwritten_product() {
        let mut m = desk(4, 2);
        let w = array![[0.3, -0.2, 0.5, 0.1], [-0.7, 0.4, 0.05, 0.9]];
        let b = array![0.01, -0.02];
        m.set_prediction_head(w.clone(), b.clone());
        let feats = array![[0.12, -1.3, 0.7, 2.2], [0.0, 0.5, -0.25, 1.0], [3.0, 1.0, 0.0, -2.0]];
        let logits = m.forward_logits(&feats).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mut acc = b[c];
                for k in 0..4 {
                    acc += feats[[i, k]] * w[[c, k]];
                }
                assert!((logits[[i, c]] - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let m = desk(16, 3);
        let total: usize = ParamGroup::ALL.iter().map(|&g| m.params.group_numel(g)).sum();
        assert_eq!(total, m.params.numel());
        assert_eq!(m.params.group_numel(ParamGroup::Prediction), 3 * 16 + 3);
        assert_eq!(m.params.group_numel(ParamGroup::Projection), 16 * 16 + 16);
        for p in m.params.iter() {
            assert!(p.name.starts_with(p.group.prefix()));
        }
        let mut spec = m.spec.clone();
        spec.projection_bias = false;
        let nb: ModelBundle<f64> = ModelBundle::build(spec, 0);
        assert_eq!(nb.params.group_numel(ParamGroup::Projection), 16 * 16);
    }

    #[test]
    fn images_convert_to_nchw() {
        let img = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b: Array4<f64> = images_to_batch(&[img]);
        assert_eq!(b.dim(), (1, 3, 1, 2));
        assert!((b[[0, 0, 0, 1]] - 0.4).abs() < 1e-7);
        assert!((b[[0, 2, 0, 0]] - 0.3).abs() < 1e-7);
    }
}
