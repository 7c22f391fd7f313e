//! Miniature two-headed detection-style network used as the ground-truth
//! oracle for the distortion model.
//!
//! A conv trunk (ReLU) feeds two dense heads over the flattened features: a
//! linear box head with `num_boxes * box_dim` outputs and a sigmoid
//! confidence head with `num_boxes * num_classes` outputs. Gradients are
//! hand-derived and checked against central finite differences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{
    GradientBundle, LayerGradient, LayerKind, LayerRecord, ModelBundle, PruneMask, SampleMatrix,
    Tensor,
};

pub const META_MODEL: &str = "model";
pub const META_SPEC: &str = "refnet_spec";
pub const REFNET_MODEL_NAME: &str = "refnet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if self.stride == 0 || hp < self.kh || wp < self.kw {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Linear trunk, used to test the chain rule in isolation.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefNetSpec {
    /// (channels, height, width)
    pub input: [usize; 3],
    pub trunk: Vec<ConvSpec>,
    pub activation: Activation,
    pub num_boxes: usize,
    pub box_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl RefNetSpec {
    /// Input 3x16x16, two stride-2 3x3 convs with 8 channels, heads for
    /// 4 boxes of 7 coordinates and 3 classes (5 912 weights).
    pub fn desk_default(seed: u64) -> Self {
        let conv = |out_ch, in_ch| ConvSpec {
            out_ch,
            in_ch,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 1,
        };
        Self {
            input: [3, 16, 16],
            trunk: vec![conv(8, 3), conv(8, 8)],
            activation: Activation::Relu,
            num_boxes: 4,
            box_dim: 7,
            num_classes: 3,
            seed,
        }
    }

    /// Output (channels, height, width) of every trunk layer.
    fn trunk_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let [mut c, mut h, mut w] = self.input;
        let mut shapes = Vec::with_capacity(self.trunk.len());
        for (i, conv) in self.trunk.iter().enumerate() {
            if conv.in_ch != c {
                return Err(Error::InvalidArgument(format!(
                    "trunk layer {i} expects {} input channels, receives {c}",
                    conv.in_ch
                )));
            }
            (h, w) = conv.out_hw(h, w).ok_or_else(|| {
                Error::InvalidArgument(format!("trunk layer {i} does not fit its input"))
            })?;
            c = conv.out_ch;
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.len() < 2 {
            return Err(Error::InvalidArgument("refnet needs at least 2 trunk layers".into()));
        }
        if self.input.contains(&0)
            || self.num_boxes == 0
            || self.box_dim == 0
            || self.num_classes == 0
            || self.trunk.iter().any(|c| c.out_ch == 0 || c.kh == 0 || c.kw == 0)
        {
            return Err(Error::InvalidArgument("refnet dimensions must be positive".into()));
        }
        self.trunk_shapes().map(|_| ())
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn feature_len(&self) -> usize {
        let (c, h, w) = *self.trunk_shapes().expect("validated spec").last().unwrap();
        c * h * w
    }

    pub fn box_outputs(&self) -> usize {
        self.num_boxes * self.box_dim
    }

    pub fn conf_outputs(&self) -> usize {
        self.num_boxes * self.num_classes
    }

    pub fn num_layers(&self) -> usize {
        self.trunk.len() + 2
    }

    pub fn layer_name(&self, i: usize) -> String {
        let t = self.trunk.len();
        match i {
            _ if i < t => format!("conv{i}"),
            _ if i == t => "box_head".into(),
            _ => "conf_head".into(),
        }
    }

    pub fn weight_shape(&self, i: usize) -> Vec<usize> {
        let t = self.trunk.len();
        if i < t {
            let c = &self.trunk[i];
            vec![c.out_ch, c.in_ch, c.kh, c.kw]
        } else if i == t {
            vec![self.box_outputs(), self.feature_len()]
        } else {
            vec![self.conf_outputs(), self.feature_len()]
        }
    }

    fn bias_len(&self, i: usize) -> usize {
        self.weight_shape(i)[0]
    }

    /// FLOPs per nonzero weight: `2 * H_out * W_out` for convs, 2 for dense.
    pub fn flops_per_weight(&self, i: usize) -> f64 {
        if i < self.trunk.len() {
            let (_, h, w) = self.trunk_shapes().expect("validated spec")[i];
            (2 * h * w) as f64
        } else {
            2.0
        }
    }

    fn bias_flops(&self, i: usize) -> f64 {
        if i < self.trunk.len() {
            let (_, h, w) = self.trunk_shapes().expect("validated spec")[i];
            (h * w) as f64
        } else {
            1.0
        }
    }
}

/// `(lambda_box, lambda_conf)`: weights of the two heads in the scalarized output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaWeights {
    pub box_weight: f64,
    pub conf_weight: f64,
}

impl LambdaWeights {
    pub fn new(box_weight: f64, conf_weight: f64) -> Result<Self> {
        let l = Self {
            box_weight,
            conf_weight,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.box_weight) || !ok(self.conf_weight) {
            return Err(Error::InvalidArgument("lambda weights must be nonnegative".into()));
        }
        if self.box_weight == 0.0 && self.conf_weight == 0.0 {
            return Err(Error::InvalidArgument("lambda weights cannot both be zero".into()));
        }
        Ok(())
    }
}

impl Default for LambdaWeights {
    fn default() -> Self {
        Self {
            box_weight: 1.0,
            conf_weight: 1.0,
        }
    }
}

/// How head outputs are reduced to a scalar before weighting by lambda.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputProbe {
    /// Plain sum over all coordinates.
    #[default]
    Sum,
    /// Fixed Gaussian probe vector drawn from the seed.
    Gaussian { seed: u64 },
}

/// Output weights `u = w_b . p_b + w_c . p_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalarizer {
    box_w: Vec<f64>,
    conf_w: Vec<f64>,
}

impl Scalarizer {
    pub fn new(spec: &RefNetSpec, lambda: LambdaWeights, probe: OutputProbe) -> Result<Self> {
        lambda.validate()?;
        let (nb, nc) = (spec.box_outputs(), spec.conf_outputs());
        let (pb, pc): (Vec<f64>, Vec<f64>) = match probe {
            OutputProbe::Sum => (vec![1.0; nb], vec![1.0; nc]),
            OutputProbe::Gaussian { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut draw = |n| (0..n).map(|_| rng.sample(StandardNormal)).collect();
                (draw(nb), draw(nc))
            }
        };
        Ok(Self {
            box_w: pb.iter().map(|v| v * lambda.box_weight).collect(),
            conf_w: pc.iter().map(|v| v * lambda.conf_weight).collect(),
        })
    }

    pub fn value(&self, out: &Output) -> f64 {
        let b: f64 = self.box_w.iter().zip(&out.p_b).map(|(w, p)| w * p).sum();
        let c: f64 = self.conf_w.iter().zip(&out.p_c).map(|(w, p)| w * p).sum();
        b + c
    }
}

/// `lambda_b * sum(p_b) + lambda_c * sum(p_c)`.
pub fn scalarize(p_b: &[f64], p_c: &[f64], lambda: LambdaWeights) -> f64 {
    lambda.box_weight * p_b.iter().sum::<f64>() + lambda.conf_weight * p_c.iter().sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output {
    /// Box regression, `num_boxes x box_dim`, row-major.
    pub p_b: Vec<f64>,
    /// Class confidences after the sigmoid, `num_boxes x num_classes`.
    pub p_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub inputs: Vec<Tensor>,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .inputs
            .first()
            .ok_or_else(|| Error::InvalidBundle("calibration set is empty".into()))?;
        for (n, x) in self.inputs.iter().enumerate() {
            first.check_same_shape(x, "calibration input")?;
            x.check_finite(&format!("calibration input {n}"))?;
        }
        Ok(())
    }
}

/// Standard-normal inputs drawn from `seed`.
pub fn synth_calibration(spec: &RefNetSpec, n: usize, seed: u64) -> Result<CalibrationSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("calibration set needs N >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = spec.input.to_vec();
    let inputs = (0..n)
        .map(|_| {
            let data = (0..spec.input_len()).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationSet { inputs, seed })
}

/// Parameter-shaped gradients; index `i` follows the layer order
/// `conv0.., box_head, conf_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefNet {
    spec: RefNetSpec,
    weights: Vec<Tensor>,
    biases: Vec<Vec<f64>>,
}

struct Trace {
    /// Input to each trunk layer (index 0 is the network input).
    trunk_in: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    features: Vec<f64>,
    output: Output,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl RefNet {
    /// He-initialized weights and small Gaussian biases from `spec.seed`.
    pub fn init(spec: RefNetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..spec.num_layers() {
            let shape = spec.weight_shape(i);
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(Tensor::new(shape, data)?);
            biases.push(
                (0..spec.bias_len(i))
                    .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn zeros(spec: RefNetSpec) -> Result<Self> {
        spec.validate()?;
        let weights = (0..spec.num_layers())
            .map(|i| Tensor::zeros(spec.weight_shape(i)))
            .collect::<Result<Vec<_>>>()?;
        let biases = (0..spec.num_layers()).map(|i| vec![0.0; spec.bias_len(i)]).collect();
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &RefNetSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Vec<f64> {
        &mut self.biases[layer]
    }

    pub fn apply_masks(&mut self, masks: &[PruneMask]) -> Result<()> {
        for m in masks {
            let w = self.weights.get_mut(m.layer_id).ok_or_else(|| {
                Error::InvalidArgument(format!("mask for unknown refnet layer {}", m.layer_id))
            })?;
            m.apply(w)?;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.spec.input.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "refnet input".into(),
                expected: self.spec.input.to_vec(),
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Output> {
        self.check_input(x)?;
        Ok(self.trace(x.data()).output)
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let spec = &self.spec;
        let [mut c, mut h, mut w] = spec.input;
        let mut current = x.to_vec();
        let mut trunk_in = Vec::with_capacity(spec.trunk.len());
        let mut pre = Vec::with_capacity(spec.trunk.len());
        for (i, conv) in spec.trunk.iter().enumerate() {
            let (ho, wo) = conv.out_hw(h, w).expect("validated spec");
            let z = conv_forward(&current, (c, h, w), conv, self.weights[i].data(), &self.biases[i]);
            let a = match spec.activation {
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            trunk_in.push(std::mem::replace(&mut current, a));
            pre.push(z);
            (c, h, w) = (conv.out_ch, ho, wo);
        }
        let features = current;
        let t = spec.trunk.len();
        let p_b = dense_forward(&features, self.weights[t].data(), &self.biases[t]);
        let z_c = dense_forward(&features, self.weights[t + 1].data(), &self.biases[t + 1]);
        let p_c = z_c.iter().map(|&z| sigmoid(z)).collect();
        Trace {
            trunk_in,
            pre,
            features,
            output: Output { p_b, p_c },
        }
    }

    /// Backpropagates output cotangents `d_box` (w.r.t. `p_b`) and `d_conf`
    /// (w.r.t. `p_c`).
    fn backward(&self, trace: &Trace, d_box: &[f64], d_conf: &[f64]) -> ParamGrads {
        let spec = &self.spec;
        let t = spec.trunk.len();
        let f = trace.features.len();
        let mut weights = vec![Vec::new(); spec.num_layers()];
        let mut biases = vec![Vec::new(); spec.num_layers()];
        let mut d_feat = vec![0.0; f];

        let d_zc: Vec<f64> = d_conf
            .iter()
            .zip(&trace.output.p_c)
            .map(|(d, p)| d * p * (1.0 - p))
            .collect();
        for (layer, d_out) in [(t, d_box), (t + 1, d_zc.as_slice())] {
            let wt = self.weights[layer].data();
            let mut dw = vec![0.0; wt.len()];
            for (o, &g) in d_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &wt[o * f..(o + 1) * f];
                let drow = &mut dw[o * f..(o + 1) * f];
                for j in 0..f {
                    drow[j] = g * trace.features[j];
                    d_feat[j] += row[j] * g;
                }
            }
            weights[layer] = dw;
            biases[layer] = d_out.to_vec();
        }

        let mut d_act = d_feat;
        let mut dims = Vec::with_capacity(t);
        let [mut c, mut h, mut w] = spec.input;
        for conv in &spec.trunk {
            dims.push((c, h, w));
            (h, w) = conv.out_hw(h, w).expect("validated spec");
            c = conv.out_ch;
        }
        for i in (0..t).rev() {
            let d_pre: Vec<f64> = match spec.activation {
                Activation::Relu => d_act
                    .iter()
                    .zip(&trace.pre[i])
                    .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
                    .collect(),
                Activation::Identity => d_act,
            };
            let (dw, db, d_in) = conv_backward(
                &trace.trunk_in[i],
                dims[i],
                &spec.trunk[i],
                self.weights[i].data(),
                &d_pre,
                i > 0,
            );
            weights[i] = dw;
            biases[i] = db;
            d_act = d_in;
        }
        ParamGrads { weights, biases }
    }

    pub fn backward_with(&self, x: &Tensor, scalarizer: &Scalarizer) -> Result<ParamGrads> {
        self.check_input(x)?;
        let trace = self.trace(x.data());
        Ok(self.backward(&trace, &scalarizer.box_w, &scalarizer.conf_w))
    }

    /// Smallest absolute trunk pre-activation on `x`; ReLU kinks sit at 0.
    fn min_abs_preactivation(&self, x: &[f64]) -> f64 {
        if self.spec.activation == Activation::Identity {
            return f64::INFINITY;
        }
        self.trace(x)
            .pre
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

fn dense_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let f = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + w[o * f..(o + 1) * f].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

fn conv_forward(x: &[f64], (c, h, w): (usize, usize, usize), cs: &ConvSpec, wt: &[f64], b: &[f64]) -> Vec<f64> {
    let (ho, wo) = cs.out_hw(h, w).expect("validated spec");
    let mut out = vec![0.0; cs.out_ch * ho * wo];
    for o in 0..cs.out_ch {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for ci in 0..c {
                    for ky in 0..cs.kh {
                        let Some(iy) = (oy * cs.stride + ky).checked_sub(cs.padding).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..cs.kw {
                            let Some(ix) = (ox * cs.stride + kx).checked_sub(cs.padding).filter(|&v| v < w) else {
                                continue;
                            };
                            acc += wt[((o * c + ci) * cs.kh + ky) * cs.kw + kx] * x[(ci * h + iy) * w + ix];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    cs: &ConvSpec,
    wt: &[f64],
    d_out: &[f64],
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = cs.out_hw(h, w).expect("validated spec");
    let mut dw = vec![0.0; cs.weight_len()];
    let mut db = vec![0.0; cs.out_ch];
    let mut dx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    for o in 0..cs.out_ch {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = d_out[(o * ho + oy) * wo + ox];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for ci in 0..c {
                    for ky in 0..cs.kh {
                        let Some(iy) = (oy * cs.stride + ky).checked_sub(cs.padding).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..cs.kw {
                            let Some(ix) = (ox * cs.stride + kx).checked_sub(cs.padding).filter(|&v| v < w) else {
                                continue;
                            };
                            let wi = ((o * c + ci) * cs.kh + ky) * cs.kw + kx;
                            let xi = (ci * h + iy) * w + ix;
                            dw[wi] += g * x[xi];
                            if need_input_grad {
                                dx[xi] += g * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

/// Exact `dU/dW` per layer for `U = lambda_b * sum(p_b) + lambda_c * sum(p_c)`.
pub fn backward_scalarized(net: &RefNet, x: &Tensor, lambda: LambdaWeights) -> Result<Vec<Tensor>> {
    let s = Scalarizer::new(&net.spec, lambda, OutputProbe::Sum)?;
    let grads = net.backward_with(x, &s)?;
    grads
        .weights
        .into_iter()
        .enumerate()
        .map(|(i, g)| Tensor::new(net.spec.weight_shape(i), g))
        .collect()
}

pub fn build_gradient_bundle(net: &RefNet, calib: &CalibrationSet, lambda: LambdaWeights) -> Result<GradientBundle> {
    build_gradient_bundle_with(net, calib, lambda, OutputProbe::Sum)
}

pub fn build_gradient_bundle_with(
    net: &RefNet,
    calib: &CalibrationSet,
    lambda: LambdaWeights,
    probe: OutputProbe,
) -> Result<GradientBundle> {
    calib.validate()?;
    let s = Scalarizer::new(&net.spec, lambda, probe)?;
    let per_sample: Vec<ParamGrads> = calib
        .inputs
        .par_iter()
        .map(|x| net.backward_with(x, &s))
        .collect::<Result<_>>()?;
    let n = calib.len();
    let layers = (0..net.spec.num_layers())
        .map(|i| {
            let d = net.weights[i].len();
            let mut data = Vec::with_capacity(n * d);
            for g in &per_sample {
                data.extend_from_slice(&g.weights[i]);
            }
            let rows = SampleMatrix::new(n, d, data)?;
            let avg = Tensor::new(net.spec.weight_shape(i), rows.row_mean())?;
            Ok(LayerGradient {
                layer_id: i,
                avg_grad: avg,
                per_sample: Some(rows),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = BTreeMap::new();
    meta.insert(META_MODEL.into(), REFNET_MODEL_NAME.into());
    meta.insert("calibration_seed".into(), calib.seed.to_string());
    meta.insert(
        "scalarization".into(),
        match probe {
            OutputProbe::Sum => "sum".into(),
            OutputProbe::Gaussian { seed } => format!("gaussian:{seed}"),
        },
    );
    let bundle = GradientBundle {
        layers,
        lambda_used: (lambda.box_weight, lambda.conf_weight),
        n_samples: n,
        meta,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// `(1/N) * sum_n (U(dense, x_n) - U(pruned, x_n))^2`.
pub fn true_distortion(dense: &RefNet, pruned: &RefNet, calib: &CalibrationSet, lambda: LambdaWeights) -> Result<f64> {
    if dense.spec != pruned.spec {
        return Err(Error::InvalidArgument("dense and pruned refnets differ in spec".into()));
    }
    calib.validate()?;
    let s = Scalarizer::new(&dense.spec, lambda, OutputProbe::Sum)?;
    let diffs: Vec<f64> = calib
        .inputs
        .par_iter()
        .map(|x| Ok(s.value(&dense.forward(x)?) - s.value(&pruned.forward(x)?)))
        .collect::<Result<_>>()?;
    Ok(diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: LambdaWeights,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 8,
            lambda: LambdaWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub net: RefNet,
    /// Training loss before the first epoch, then after each epoch.
    pub losses: Vec<f64>,
    /// Epochs whose update was rejected for raising the loss.
    pub rejected_epochs: usize,
    pub final_learning_rate: f64,
}

/// Self-distillation toward the dense teacher's outputs with the masks held
/// fixed. Loss: `(1/2N) * sum_n lambda_b |p_b - t_b|^2 + lambda_c |p_c - t_c|^2`.
/// An epoch that raises the training loss is rolled back and the step size
/// halved, so the recorded losses never increase.
pub fn finetune(
    student: &RefNet,
    teacher: &RefNet,
    masks: &[PruneMask],
    train: &CalibrationSet,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if student.spec != teacher.spec {
        return Err(Error::InvalidArgument("student and teacher refnets differ in spec".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "finetune needs a positive step size and batch size".into(),
        ));
    }
    config.lambda.validate()?;
    train.validate()?;
    let targets: Vec<Output> = train
        .inputs
        .par_iter()
        .map(|x| teacher.forward(x))
        .collect::<Result<_>>()?;
    let lambda = config.lambda;
    let loss_of = |net: &RefNet| -> Result<f64> {
        let per: Vec<f64> = train
            .inputs
            .par_iter()
            .zip(&targets)
            .map(|(x, t)| {
                let o = net.forward(x)?;
                let b: f64 = o.p_b.iter().zip(&t.p_b).map(|(p, q)| (p - q).powi(2)).sum();
                let c: f64 = o.p_c.iter().zip(&t.p_c).map(|(p, q)| (p - q).powi(2)).sum();
                Ok(lambda.box_weight * b + lambda.conf_weight * c)
            })
            .collect::<Result<_>>()?;
        Ok(0.5 * per.iter().sum::<f64>() / per.len() as f64)
    };

    let mut net = student.clone();
    net.apply_masks(masks)?;
    let initial = loss_of(&net)?;
    let mut losses = vec![initial];
    let mut lr = config.learning_rate;
    let mut rejected = 0;
    for epoch in 1..=config.epochs {
        let before = net.clone();
        for batch in (0..train.len()).collect::<Vec<_>>().chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<ParamGrads> = batch
                .par_iter()
                .map(|&n| {
                    let trace = net.trace(train.inputs[n].data());
                    let t = &targets[n];
                    let d_box: Vec<f64> = trace
                        .output
                        .p_b
                        .iter()
                        .zip(&t.p_b)
                        .map(|(p, q)| lambda.box_weight * (p - q) * scale)
                        .collect();
                    let d_conf: Vec<f64> = trace
                        .output
                        .p_c
                        .iter()
                        .zip(&t.p_c)
                        .map(|(p, q)| lambda.conf_weight * (p - q) * scale)
                        .collect();
                    net.backward(&trace, &d_box, &d_conf)
                })
                .collect();
            for g in &grads {
                for (w, dw) in net.weights.iter_mut().zip(&g.weights) {
                    w.data_mut().iter_mut().zip(dw).for_each(|(a, d)| *a -= lr * d);
                }
                for (b, db) in net.biases.iter_mut().zip(&g.biases) {
                    b.iter_mut().zip(db).for_each(|(a, d)| *a -= lr * d);
                }
            }
            net.apply_masks(masks)?;
        }
        let loss = loss_of(&net)?;
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(Error::Divergence { epoch, loss, initial });
        }
        let prev = *losses.last().unwrap();
        if loss > prev {
            net = before;
            lr *= 0.5;
            rejected += 1;
            losses.push(prev);
        } else {
            losses.push(loss);
        }
    }
    Ok(FinetuneOutcome {
        net,
        losses,
        rejected_epochs: rejected,
        final_learning_rate: lr,
    })
}

/// Per-layer worst `|analytic - fd| / (1 + |fd|)` over every weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub per_layer_max_rel: Vec<f64>,
    pub checked_weights: usize,
    /// Times the input was nudged away from ReLU kinks before checking.
    pub nudges: usize,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.per_layer_max_rel.iter().copied().fold(0.0, f64::max)
    }
}

/// Smallest allowed distance of any pre-activation from the ReLU kink.
pub const KINK_MARGIN: f64 = 1e-4;

/// Central finite-difference check of `backward_scalarized` on every weight.
pub fn gradcheck(net: &RefNet, x: &Tensor, lambda: LambdaWeights, step: f64) -> Result<GradcheckReport> {
    net.check_input(x)?;
    let mut x = x.clone();
    let mut nudges = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    while net.min_abs_preactivation(x.data()) < KINK_MARGIN {
        if nudges == 64 {
            return Err(Error::InvalidArgument(
                "could not move the input away from activation kinks".into(),
            ));
        }
        for v in x.data_mut() {
            *v += 1e-3 * rng.sample::<f64, _>(StandardNormal);
        }
        nudges += 1;
    }
    let analytic = backward_scalarized(net, &x, lambda)?;
    let s = Scalarizer::new(&net.spec, lambda, OutputProbe::Sum)?;
    let mut per_layer = Vec::with_capacity(analytic.len());
    let mut checked = 0;
    for (layer, grad) in analytic.iter().enumerate() {
        let errs: Vec<f64> = (0..grad.len())
            .into_par_iter()
            .map(|j| {
                let mut probe = net.clone();
                let w0 = probe.weights[layer].data()[j];
                probe.weights[layer].data_mut()[j] = w0 + step;
                let up = s.value(&probe.trace(x.data()).output);
                probe.weights[layer].data_mut()[j] = w0 - step;
                let down = s.value(&probe.trace(x.data()).output);
                let fd = (up - down) / (2.0 * step);
                (grad.data()[j] - fd).abs() / (1.0 + fd.abs())
            })
            .collect();
        checked += errs.len();
        per_layer.push(errs.into_iter().fold(0.0, f64::max));
    }
    Ok(GradcheckReport {
        per_layer_max_rel: per_layer,
        checked_weights: checked,
        nudges,
    })
}

/// Exports weights as prunable `conv2d`/`dense` layers followed by the
/// biases as non-prunable `opaque` layers; the spec travels in the metadata.
pub fn to_bundle(net: &RefNet) -> Result<ModelBundle> {
    let spec = &net.spec;
    let t = spec.trunk.len();
    let n = spec.num_layers();
    let mut layers = Vec::with_capacity(2 * n);
    for i in 0..n {
        layers.push(LayerRecord {
            layer_id: i,
            name: spec.layer_name(i),
            kind: if i < t { LayerKind::Conv2d } else { LayerKind::Dense },
            weight: net.weights[i].clone(),
            flops_per_weight: spec.flops_per_weight(i),
            prunable: true,
        });
    }
    for i in 0..n {
        layers.push(LayerRecord {
            layer_id: n + i,
            name: format!("{}.bias", spec.layer_name(i)),
            kind: LayerKind::Opaque,
            weight: Tensor::new(vec![net.biases[i].len()], net.biases[i].clone())?,
            flops_per_weight: spec.bias_flops(i),
            prunable: false,
        });
    }
    let mut meta = BTreeMap::new();
    meta.insert(META_MODEL.into(), REFNET_MODEL_NAME.into());
    meta.insert(META_SPEC.into(), serde_json::to_string(spec)?);
    meta.insert("seed".into(), spec.seed.to_string());
    meta.insert("tool".into(), concat!("dmprune ", env!("CARGO_PKG_VERSION")).into());
    ModelBundle::new(layers, meta)
}

pub fn is_refnet_bundle(bundle: &ModelBundle) -> bool {
    bundle.meta.get(META_MODEL).map(String::as_str) == Some(REFNET_MODEL_NAME)
        && bundle.meta.contains_key(META_SPEC)
}

pub fn from_bundle(bundle: &ModelBundle) -> Result<RefNet> {
    let raw = bundle
        .meta
        .get(META_SPEC)
        .filter(|_| is_refnet_bundle(bundle))
        .ok_or_else(|| Error::InvalidBundle("bundle does not carry a refnet spec".into()))?;
    let spec: RefNetSpec = serde_json::from_str(raw)?;
    spec.validate()?;
    let mut net = RefNet::zeros(spec)?;
    for i in 0..net.spec.num_layers() {
        let name = net.spec.layer_name(i);
        let w = bundle
            .layer_by_name(&name)
            .ok_or_else(|| Error::InvalidBundle(format!("refnet bundle lacks layer `{name}`")))?;
        net.weights[i].check_same_shape(&w.weight, &name)?;
        net.weights[i] = w.weight.clone();
        let bias_name = format!("{name}.bias");
        let b = bundle
            .layer_by_name(&bias_name)
            .ok_or_else(|| Error::InvalidBundle(format!("refnet bundle lacks layer `{bias_name}`")))?;
        if b.weight.len() != net.biases[i].len() {
            return Err(Error::InvalidBundle(format!("bias `{bias_name}` has the wrong length")));
        }
        net.biases[i] = b.weight.data().to_vec();
    }
    Ok(net)
}
