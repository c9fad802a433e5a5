//! The residual CNN family and the MLP baseline, plus network checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, relu_backward, relu_forward, tanh_backward,
    tanh_forward, BatchNormCache, BatchNormState, Conv2d, Linear, Mode, Parameter,
};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dncnn,
    Mlp,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dncnn" | "cnn" => Ok(ModelKind::Dncnn),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::param(format!("unsupported model kind '{other}'"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Dncnn => "dncnn",
            ModelKind::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Architecture description. For `dncnn`, `depth_modules` counts only the
/// middle Conv+BN+ReLU blocks; the leading Conv+ReLU and the output Conv are
/// extra. For `mlp`, the layout is fixed at two hidden layers of
/// `hidden_width` on `patch x patch` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub depth_modules: usize,
    pub in_channels: usize,
    pub feature_channels: usize,
    pub kernel: usize,
    pub residual: bool,
    pub hidden_width: usize,
    pub patch: usize,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn dncnn(depth_modules: usize, in_channels: usize) -> Self {
        Self {
            kind: ModelKind::Dncnn,
            depth_modules,
            in_channels,
            feature_channels: 64,
            kernel: 3,
            residual: true,
            hidden_width: 0,
            patch: 0,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(in_channels: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            depth_modules: 2,
            in_channels,
            feature_channels: 0,
            kernel: 0,
            residual: false,
            hidden_width: 511,
            patch: 13,
            activation: Activation::Tanh,
        }
    }

    pub fn with_features(mut self, feature_channels: usize) -> Self {
        self.feature_channels = feature_channels;
        self
    }

    pub fn with_in_channels(mut self, in_channels: usize) -> Self {
        self.in_channels = in_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::param("in_channels must be at least 1"));
        }
        match self.kind {
            ModelKind::Dncnn => {
                if self.depth_modules == 0 {
                    return Err(Error::param("depth_modules must be at least 1"));
                }
                if self.feature_channels == 0 || self.kernel % 2 == 0 {
                    return Err(Error::param("dncnn needs feature channels and an odd kernel"));
                }
            }
            ModelKind::Mlp => {
                if self.residual {
                    return Err(Error::param("mlp networks are never residual"));
                }
                if self.hidden_width == 0 || self.patch == 0 {
                    return Err(Error::param("mlp needs a hidden width and patch size"));
                }
            }
        }
        Ok(())
    }

    /// Radius of the receptive field in pixels (dncnn only).
    pub fn receptive_radius(&self) -> usize {
        (self.depth_modules + 2) * (self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T = f32> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNormState<T>),
    Relu,
    Tanh,
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::Tanh => "tanh",
            Layer::Linear(_) => "linear",
        }
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Relu | Layer::Tanh => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu | Layer::Tanh => Vec::new(),
        }
    }
}

enum Aux<T> {
    None,
    Output(Tensor<T>),
    Bn(Option<BatchNormCache<T>>),
}

struct Cache<T> {
    inputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    in_shape: crate::tensor::Shape,
}

/// An ordered stack of layers built from a [`NetworkSpec`].
pub struct Network<T = f32> {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer<T>>,
    /// Seed the weights were initialized from.
    pub seed: u64,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            seed: self.seed,
            cache: None,
        }
    }
}

impl<T: Scalar> fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("layers", &self.layers.iter().map(|l| l.kind()).collect::<Vec<_>>())
            .field("seed", &self.seed)
            .finish()
    }
}

/// Builds a network with Xavier weights, zero biases, and BN gamma = 1,
/// beta = 0. Convolutions followed by batch norm carry no bias.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    match spec.kind {
        ModelKind::Dncnn => {
            let (f, k) = (spec.feature_channels, spec.kernel);
            layers.push(Layer::Conv(Conv2d::new(spec.in_channels, f, k, true, &mut rng)?));
            layers.push(Layer::Relu);
            for _ in 0..spec.depth_modules {
                layers.push(Layer::Conv(Conv2d::new(f, f, k, false, &mut rng)?));
                layers.push(Layer::BatchNorm(BatchNormState::new(f)));
                layers.push(Layer::Relu);
            }
            layers.push(Layer::Conv(Conv2d::new(f, 1, k, true, &mut rng)?));
        }
        ModelKind::Mlp => {
            let px = spec.patch * spec.patch;
            let act = || match spec.activation {
                Activation::Tanh => Layer::Tanh,
                Activation::Relu => Layer::Relu,
            };
            layers.push(Layer::Linear(Linear::new(px * spec.in_channels, spec.hidden_width, &mut rng)?));
            layers.push(act());
            layers.push(Layer::Linear(Linear::new(spec.hidden_width, spec.hidden_width, &mut rng)?));
            layers.push(act());
            layers.push(Layer::Linear(Linear::new(spec.hidden_width, px, &mut rng)?));
        }
    }
    Ok(Network {
        spec: spec.clone(),
        layers,
        seed,
        cache: None,
    })
}

impl<T: Scalar> Network<T> {
    fn layer_name(&self, idx: usize) -> String {
        format!("{idx:02}_{}", self.layers[idx].kind())
    }

    /// Parameters in a fixed order, named `<layer>.<param>`.
    pub fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        let names: Vec<String> = (0..self.layers.len()).map(|i| self.layer_name(i)).collect();
        self.layers
            .iter()
            .zip(names)
            .flat_map(|(l, n)| l.params().into_iter().map(move |p| (format!("{n}.{}", p.name), p)))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv(_))).count()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.spec.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                input.channels()
            )));
        }
        if self.spec.kind == ModelKind::Mlp
            && (input.height() != self.spec.patch || input.width() != self.spec.patch)
        {
            return Err(Error::shape(format!(
                "mlp expects {p}x{p} patches, got {}x{}",
                input.height(),
                input.width(),
                p = self.spec.patch
            )));
        }
        Ok(())
    }

    fn finish_output(&self, out: Tensor<T>) -> Result<Tensor<T>> {
        match self.spec.kind {
            ModelKind::Dncnn => Ok(out),
            ModelKind::Mlp => {
                let n = out.batch();
                out.reshape([n, 1, self.spec.patch, self.spec.patch])
            }
        }
    }

    /// Read-only inference pass (batch norm uses running statistics).
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => c.forward(&x)?,
                Layer::Linear(l) => l.forward(&x)?,
                Layer::Relu => relu_forward(&x),
                Layer::Tanh => tanh_forward(&x),
                Layer::BatchNorm(bn) => {
                    // inference never mutates the state
                    let mut view = bn.clone();
                    batchnorm_forward(&x, &mut view, Mode::Inference)?.0
                }
            };
        }
        self.finish_output(x)
    }

    /// Forward pass. Training mode caches what [`Network::backward`] needs
    /// and updates batch-norm running statistics.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Inference {
            self.cache = None;
            return self.infer(input);
        }
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            let (y, a) = match layer {
                Layer::Conv(c) => (c.forward(&x)?, Aux::None),
                Layer::Linear(l) => (l.forward(&x)?, Aux::None),
                Layer::Relu => (relu_forward(&x), Aux::None),
                Layer::Tanh => {
                    let y = tanh_forward(&x);
                    (y.clone(), Aux::Output(y))
                }
                Layer::BatchNorm(bn) => {
                    let (y, c) = batchnorm_forward(&x, bn, Mode::Training)?;
                    (y, Aux::Bn(c))
                }
            };
            inputs.push(std::mem::replace(&mut x, y));
            aux.push(a);
        }
        self.cache = Some(Cache {
            inputs,
            aux,
            in_shape: input.shape(),
        });
        self.finish_output(x)
    }

    /// Backpropagates `upstream` (shaped like the last training-mode output),
    /// accumulating parameter gradients. The gradient with respect to the
    /// network input is not needed for training and comes back as zeros.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_impl(upstream, false)
    }

    /// Like [`Network::backward`] but also computes the true input gradient.
    pub fn backward_with_input_grad(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_impl(upstream, true)
    }

    fn backward_impl(&mut self, upstream: &Tensor<T>, input_grad: bool) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("backward called without a training-mode forward".into()))?;
        let mut g = upstream.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let x = &cache.inputs[idx];
            g = match (layer, &cache.aux[idx]) {
                (Layer::Conv(c), _) => match c.backward(&g, x, idx > 0 || input_grad)? {
                    Some(gx) => gx,
                    None => Tensor::zeros(cache.in_shape),
                },
                (Layer::Linear(l), _) => l.backward(&g, x)?,
                (Layer::Relu, _) => relu_backward(&g.reshape(x.shape())?, x)?,
                (Layer::Tanh, Aux::Output(y)) => tanh_backward(&g.reshape(y.shape())?, y)?,
                (Layer::BatchNorm(bn), Aux::Bn(c)) => batchnorm_backward(&g, c.as_ref(), bn)?.0,
                _ => return Err(Error::Contract("corrupt forward cache".into())),
            };
        }
        Ok(g)
    }

    /// Sign pattern of every ReLU input seen in a training-mode pass; two
    /// points with equal patterns lie in the same linear region.
    pub fn activation_pattern(&mut self, input: &Tensor<T>) -> Result<Vec<bool>> {
        self.forward(input, Mode::Training)?;
        let cache = self.cache.take().unwrap();
        let mut pattern = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                pattern.extend(cache.inputs[idx].data().iter().map(|v| *v > T::zero()));
            }
        }
        Ok(pattern)
    }

    /// Batch-norm layers, in order.
    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        })
    }

    /// Zeroes the output layer so the network predicts exactly zero.
    pub fn zero_output_layer(&mut self) {
        match self.layers.last_mut() {
            Some(Layer::Conv(c)) => {
                c.weight.value.fill(T::zero());
                if let Some(b) = c.bias.as_mut() {
                    b.value.fill(T::zero());
                }
            }
            Some(Layer::Linear(l)) => {
                l.weight.value.fill(T::zero());
                l.bias.value.fill(T::zero());
            }
            _ => {}
        }
    }
}

/// `primary - forward(full_input)` in inference mode. `primary` is the image
/// the residual is subtracted from; `full_input` is the (possibly stacked)
/// network input.
pub fn predict_denoised<T: Scalar>(
    network: &Network<T>,
    primary: &Tensor<T>,
    full_input: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !network.spec.residual || network.spec.kind != ModelKind::Dncnn {
        return Err(Error::Contract(
            "predict_denoised needs a residual network; the mlp predicts directly".into(),
        ));
    }
    let residual = network.infer(full_input)?;
    primary.sub(&residual)
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    momentum: f64,
    epsilon: f64,
    initialized: bool,
    running_mean: String,
    running_var: String,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: String,
    params: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    batch_norm: Option<BnEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    seed: u64,
    spec: NetworkSpec,
    layers: Vec<LayerEntry>,
}

impl Network<f32> {
    /// Writes `manifest.json` and one `<layer>.<param>.ten` blob per parameter
    /// (batch-norm running statistics included) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let name = self.layer_name(idx);
            let mut params = Vec::new();
            for p in layer.params() {
                let file = format!("{name}.{}.ten", p.name);
                p.value.write_ten(&dir.join(&file))?;
                params.push(file);
            }
            let batch_norm = match layer {
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    let mean = format!("{name}.running_mean.ten");
                    let var = format!("{name}.running_var.ten");
                    Tensor::new([1, c, 1, 1], bn.running_mean.clone())?.write_ten(&dir.join(&mean))?;
                    Tensor::new([1, c, 1, 1], bn.running_var.clone())?.write_ten(&dir.join(&var))?;
                    Some(BnEntry {
                        momentum: bn.momentum as f64,
                        epsilon: bn.epsilon as f64,
                        initialized: bn.initialized,
                        running_mean: mean,
                        running_var: var,
                    })
                }
                _ => None,
            };
            entries.push(LayerEntry {
                name,
                kind: layer.kind().into(),
                params,
                batch_norm,
            });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            seed: self.seed,
            spec: self.spec.clone(),
            layers: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(
                dir,
                format!(
                    "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                    manifest.format_version
                ),
            ));
        }
        let mut net = build_network::<f32>(&manifest.spec, manifest.seed)?;
        if net.layers.len() != manifest.layers.len() {
            return Err(Error::format(dir, "layer list does not match the network spec"));
        }
        for (layer, entry) in net.layers.iter_mut().zip(&manifest.layers) {
            if layer.kind() != entry.kind {
                return Err(Error::format(
                    dir,
                    format!("layer {} is '{}', expected '{}'", entry.name, entry.kind, layer.kind()),
                ));
            }
            let params = layer.params_mut();
            if params.len() != entry.params.len() {
                return Err(Error::format(dir, format!("layer {} parameter count mismatch", entry.name)));
            }
            for (p, file) in params.into_iter().zip(&entry.params) {
                let t = Tensor::read_ten(&dir.join(file))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::format(dir.join(file), "parameter shape mismatch"));
                }
                p.value = t;
            }
            if let (Layer::BatchNorm(bn), Some(b)) = (layer, &entry.batch_norm) {
                let mean = Tensor::read_ten(&dir.join(&b.running_mean))?.into_data();
                let var = Tensor::read_ten(&dir.join(&b.running_var))?.into_data();
                bn.set_running_stats(mean, var)
                    .map_err(|e| Error::format(dir, e.to_string()))?;
                bn.initialized = b.initialized;
                bn.momentum = b.momentum as f32;
                bn.epsilon = b.epsilon as f32;
            }
        }
        Ok(net)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cnn5_parameter_count_closed_form() {
        let net = build_network::<f32>(&NetworkSpec::dncnn(5, 1), 0).unwrap();
        assert_eq!(net.conv_count(), 7);
        assert_eq!(net.parameter_count(), 186_177);
    }

    #[test]
    fn layer_and_parameter_counts_for_all_depths() {
        for depth in [5, 10, 15] {
            for in_ch in [1, 2] {
                let net = build_network::<f32>(&NetworkSpec::dncnn(depth, in_ch), 1).unwrap();
                let expected = (in_ch * 9 * 64 + 64) + depth * (64 * 9 * 64 + 2 * 64) + (64 * 9 + 1);
                assert_eq!(net.parameter_count(), expected);
                assert_eq!(net.conv_count(), depth + 2);
                assert_eq!(net.layers.len(), 2 + 3 * depth + 1);
            }
        }
    }

    #[test]
    fn stacked_input_changes_only_first_kernel() {
        let one = build_network::<f32>(&NetworkSpec::dncnn(5, 1), 3).unwrap();
        let two = build_network::<f32>(&NetworkSpec::dncnn(5, 2), 3).unwrap();
        let (p1, p2) = (one.parameters(), two.parameters());
        assert_eq!(p2[0].1.value.shape(), [64, 2, 3, 3]);
        for (a, b) in p1.iter().zip(&p2).skip(1) {
            assert_eq!(a.1.value.shape(), b.1.value.shape());
        }
    }

    #[test]
    fn mlp_layer_widths() {
        let net = build_network::<f32>(&NetworkSpec::mlp(1), 0).unwrap();
        let widths: Vec<(usize, usize)> = net
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(l) => Some((l.inputs(), l.outputs())),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![(169, 511), (511, 511), (511, 169)]);
        let net2 = build_network::<f32>(&NetworkSpec::mlp(2), 0).unwrap();
        assert!(matches!(&net2.layers[0], Layer::Linear(l) if l.inputs() == 338));
    }

    #[test]
    fn biases_start_at_zero_and_bn_at_identity() {
        let net = build_network::<f32>(&NetworkSpec::dncnn(3, 1), 9).unwrap();
        for (name, p) in net.parameters() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") {
                assert!(p.value.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(build_network::<f32>(&NetworkSpec::dncnn(0, 1), 0).is_err());
        assert!(build_network::<f32>(&NetworkSpec::dncnn(3, 0), 0).is_err());
        let mut bad = NetworkSpec::mlp(1);
        bad.residual = true;
        assert!(matches!(build_network::<f32>(&bad, 0), Err(Error::Parameter(_))));
        assert!(matches!("unet".parse::<ModelKind>(), Err(Error::Parameter(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_network::<f32>(&NetworkSpec::dncnn(3, 2), 77).unwrap();
        let b = build_network::<f32>(&NetworkSpec::dncnn(3, 2), 77).unwrap();
        for ((_, p), (_, q)) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn dncnn_preserves_extent_and_is_fully_convolutional() {
        let mut net = build_network::<f32>(&NetworkSpec::dncnn(2, 1).with_features(8), 0).unwrap();
        let y = net.forward(&random_input([4, 1, 40, 40], 1), Mode::Training).unwrap();
        assert_eq!(y.shape(), [4, 1, 40, 40]);
        let full = net.infer(&random_input([1, 1, 64, 48], 2)).unwrap();
        assert_eq!(full.shape(), [1, 1, 64, 48]);
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut net = build_network::<f32>(&NetworkSpec::dncnn(2, 1).with_features(8), 0).unwrap();
        net.zero_output_layer();
        let x = random_input([2, 1, 10, 10], 5);
        let y = net.forward(&x, Mode::Training).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let den = predict_denoised(&net, &x.channel(0).unwrap(), &x).unwrap();
        assert_eq!(den, x);
    }

    #[test]
    fn predict_denoised_recovers_clean_for_exact_residual() {
        let mut net = build_network::<f32>(&NetworkSpec::dncnn(1, 1).with_features(4), 0).unwrap();
        net.zero_output_layer();
        // output = bias; make bias equal to the constant noise
        if let Some(Layer::Conv(c)) = net.layers.last_mut() {
            c.bias.as_mut().unwrap().value.data_mut()[0] = 0.5;
        }
        for bn in net.batch_norms_mut() {
            bn.set_running_stats(vec![0.0; 4], vec![1.0; 4]).unwrap();
        }
        let clean = random_input([1, 1, 6, 6], 3);
        let noisy = clean.map(|v| v + 0.5);
        let den = predict_denoised(&net, &noisy, &noisy).unwrap();
        for (a, b) in den.data().iter().zip(clean.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_denoised_rejects_mlp() {
        let net = build_network::<f32>(&NetworkSpec::mlp(1), 0).unwrap();
        let x = Tensor::zeros([1, 1, 13, 13]);
        assert!(matches!(predict_denoised(&net, &x, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let net = build_network::<f32>(&NetworkSpec::dncnn(1, 2).with_features(4), 0).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros([1, 1, 8, 8])), Err(Error::Shape(_))));
        let mlp = build_network::<f32>(&NetworkSpec::mlp(1), 0).unwrap();
        assert!(matches!(mlp.infer(&Tensor::zeros([1, 1, 12, 13])), Err(Error::Shape(_))));
    }

    #[test]
    fn translation_covariance_in_interior() {
        let spec = NetworkSpec::dncnn(2, 1).with_features(6);
        let mut net = build_network::<f32>(&spec, 4).unwrap();
        net.forward(&random_input([2, 1, 24, 24], 8), Mode::Training).unwrap();
        let (h, w, dy, dx) = (24usize, 24usize, 2usize, 3usize);
        let x = random_input([1, 1, h, w], 6);
        let mut shifted = Tensor::zeros([1, 1, h, w]);
        for y in dy..h {
            for xx in dx..w {
                let o = shifted.offset(0, 0, y, xx);
                shifted.data_mut()[o] = x.at(0, 0, y - dy, xx - dx);
            }
        }
        let a = net.infer(&x).unwrap();
        let b = net.infer(&shifted).unwrap();
        let margin = spec.receptive_radius();
        for y in margin..h - margin - dy {
            for xx in margin..w - margin - dx {
                let va = a.at(0, 0, y, xx);
                let vb = b.at(0, 0, y + dy, xx + dx);
                assert!((va - vb).abs() < 1e-4, "({y},{xx}) {va} vs {vb}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = build_network::<f32>(&NetworkSpec::dncnn(2, 2).with_features(4), 21).unwrap();
        net.forward(&random_input([3, 2, 9, 9], 1), Mode::Training).unwrap();
        net.save(dir.path()).unwrap();
        let back = Network::load(dir.path()).unwrap();
        assert_eq!(back.seed, 21);
        assert_eq!(back.spec, net.spec);
        for ((_, p), (_, q)) in net.parameters().iter().zip(back.parameters()) {
            assert_eq!(p.value.data(), q.value.data());
        }
        let x = random_input([1, 2, 9, 9], 3);
        assert_eq!(net.infer(&x).unwrap(), back.infer(&x).unwrap());
    }

    #[test]
    fn checkpoint_version_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_network::<f32>(&NetworkSpec::dncnn(1, 1).with_features(2), 0).unwrap();
        net.save(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, text).unwrap();
        assert!(matches!(Network::load(dir.path()), Err(Error::Format { .. })));
    }
}
