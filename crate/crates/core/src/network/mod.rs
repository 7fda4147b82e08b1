//! The dense-block 3D classifier: construction, forward/backward and
//! parameter storage.

mod arch;
mod checkpoint;

pub use arch::{stage_shapes, BlockKind, DenseBlockSpec, StageShape};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, bce_loss, conv3d_backward, conv3d_forward, dense_backward, dense_forward,
    global_avg_pool, global_avg_pool_backward, groupnorm_backward, groupnorm_forward,
    maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward, ConvSpec, GroupNormCache,
    GroupNormSpec, PoolCache, PoolSpec,
};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};
use arch::{Step, ARCHITECTURE};

pub const DEFAULT_GROWTH_RATE: usize = 16;
pub const DEFAULT_MAX_GROUPS: usize = 8;
pub const MIN_GROUP_ELEMENTS: usize = 16;
pub const MIN_GROUP_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub growth_rate: usize,
    /// Upper bound on normalization groups; see [`NetworkConfig::groups_for`].
    pub max_groups: usize,
    /// Input (D, H, W).
    pub input_shape: [usize; 3],
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            growth_rate: DEFAULT_GROWTH_RATE,
            max_groups: DEFAULT_MAX_GROUPS,
            input_shape: [16, 32, 32],
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn new(growth_rate: usize, input_shape: [usize; 3], seed: u64) -> Self {
        NetworkConfig { growth_rate, max_groups: DEFAULT_MAX_GROUPS, input_shape, seed }
    }

    pub fn validate(&self) -> Result<Vec<StageShape>> {
        if self.max_groups == 0 {
            return Err(Error::config("max_groups must be at least 1"));
        }
        stage_shapes(self.growth_rate, self.input_shape)
    }

    /// Group count for a normalization over `channels` channels and
    /// `voxels` spatial positions: the largest divisor of
    /// `gcd(max_groups, channels)` whose groups hold at least
    /// [`MIN_GROUP_CHANNELS`] channels and [`MIN_GROUP_ELEMENTS`] values (or
    /// all of them, if fewer exist).
    ///
    /// A group of one value always normalizes to zero, so small late-stage
    /// volumes fall back to coarser groups. A group of one channel removes
    /// any per-channel offset of the layers feeding it, which zeroes the
    /// spatially averaged gradient Grad-CAM weights channels by.
    pub fn groups_for(&self, channels: usize, voxels: usize) -> usize {
        let need = MIN_GROUP_ELEMENTS.min(channels * voxels);
        let need_channels = MIN_GROUP_CHANNELS.min(channels);
        let top = gcd(self.max_groups, channels);
        (1..=top)
            .rev()
            .find(|&d| top % d == 0 && channels / d >= need_channels && (channels / d) * voxels >= need)
            .unwrap_or(1)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Conv + GroupNorm + ReLU whose output replaces the input.
    ConvNormRelu { conv: ConvSpec, norm: GroupNormSpec },
    /// Conv + GroupNorm + ReLU concatenated onto the input.
    DenseBlock { block: DenseBlockSpec, conv: ConvSpec, norm: GroupNormSpec },
    MaxPool(PoolSpec),
    GlobalAvgPool,
    Dense { features: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub output: StageShape,
    /// Index of the layer's first parameter in [`Network::params`].
    param_base: usize,
}

impl Layer {
    pub fn is_convolutional(&self) -> bool {
        matches!(self.kind, LayerKind::ConvNormRelu { .. } | LayerKind::DenseBlock { .. })
    }
}

/// One scan's output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_glaucoma: f64,
    pub logit: f64,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Scalar = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients aligned with [`Parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &Parameters<T>) -> Self {
        Gradients { tensors: params.tensors.iter().map(Tensor::zeros_like).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.scale_in_place(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Per-layer state kept by a training forward pass.
enum LayerCache<T: Scalar> {
    Conv { input: Tensor<T>, norm: GroupNormCache<T>, act: Tensor<T> },
    Pool(PoolCache),
    Gap { input_dims: Vec<usize> },
    Dense { input: Tensor<T> },
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<T: Scalar = f32> {
    layers: Vec<LayerCache<T>>,
}

pub struct ForwardOutput<T: Scalar = f32> {
    /// Logits of shape (B, 1).
    pub logits: Tensor<T>,
    pub predictions: Vec<Prediction>,
    /// Outputs of the requested layers, in request order.
    pub captured: Vec<(String, Tensor<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    layers: Vec<Layer>,
    params: Parameters<T>,
}

impl<T: Scalar> Network<T> {
    /// Build the layer list and initialize parameters from `config.seed`.
    pub fn build(config: NetworkConfig) -> Result<Self> {
        let (layers, names, dims) = Self::layout(&config)?;
        let tensors = init_parameters(&config, &names, &dims)?;
        Ok(Network { config, layers, params: Parameters { names, tensors } })
    }

    /// Layer list plus parameter names and shapes, without allocating values.
    fn layout(config: &NetworkConfig) -> Result<(Vec<Layer>, Vec<String>, Vec<Vec<usize>>)> {
        let shapes = config.validate()?;
        let mut layers = Vec::with_capacity(shapes.len());
        let mut names = Vec::new();
        let mut dims: Vec<Vec<usize>> = Vec::new();
        let mut in_channels = 1;
        for (&(name, step), shape) in ARCHITECTURE.iter().zip(shapes) {
            let param_base = names.len();
            let mut conv_params = |conv: &ConvSpec| {
                names.push(format!("{name}.conv.weight"));
                dims.push(conv.weight_dims().to_vec());
                names.push(format!("{name}.conv.bias"));
                dims.push(vec![conv.out_channels]);
                names.push(format!("{name}.norm.scale"));
                dims.push(vec![conv.out_channels]);
                names.push(format!("{name}.norm.shift"));
                dims.push(vec![conv.out_channels]);
            };
            let kind = match step {
                Step::Conv(mult, kernel) => {
                    let co = mult * config.growth_rate;
                    let conv = ConvSpec::new(in_channels, co, kernel)?;
                    let norm = GroupNormSpec::new(
                        co,
                        config.groups_for(co, shape.extents.iter().product()),
                        layers::DEFAULT_EPSILON,
                    )?;
                    conv_params(&conv);
                    LayerKind::ConvNormRelu { conv, norm }
                }
                Step::Block(kind, mult) => {
                    let co = mult * config.growth_rate;
                    let conv = ConvSpec::new(in_channels, co, kind.kernel())?;
                    let norm = GroupNormSpec::new(
                        co,
                        config.groups_for(co, shape.extents.iter().product()),
                        layers::DEFAULT_EPSILON,
                    )?;
                    conv_params(&conv);
                    LayerKind::DenseBlock {
                        block: DenseBlockSpec { kind, out_channels: co },
                        conv,
                        norm,
                    }
                }
                Step::Pool(window) => LayerKind::MaxPool(PoolSpec::new(window)?),
                Step::GlobalAvgPool => LayerKind::GlobalAvgPool,
                Step::Dense => {
                    names.push(format!("{name}.weight"));
                    dims.push(vec![in_channels, 1]);
                    names.push(format!("{name}.bias"));
                    dims.push(vec![1]);
                    LayerKind::Dense { features: in_channels }
                }
            };
            in_channels = shape.channels;
            layers.push(Layer { name: name.to_string(), kind, output: shape, param_base });
        }
        Ok((layers, names, dims))
    }

    pub(crate) fn from_parts(config: NetworkConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let (layers, expect_names, expect_dims) = Self::layout(&config)?;
        if names != expect_names {
            return Err(Error::format("parameter names do not match the architecture"));
        }
        for ((n, t), d) in names.iter().zip(&tensors).zip(&expect_dims) {
            if t.dims() != d.as_slice() {
                return Err(Error::format(format!(
                    "parameter {n} has shape {:?}, architecture expects {d:?}",
                    t.shape()
                )));
            }
        }
        Ok(Network { config, layers, params: Parameters { names, tensors } })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    /// Channel width after each layer, in order.
    pub fn widths(&self) -> Vec<(String, usize)> {
        self.layers.iter().map(|l| (l.name.clone(), l.output.channels)).collect()
    }

    pub fn final_feature_width(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Dense { features }) => *features,
            _ => unreachable!("architecture ends with a dense layer"),
        }
    }

    /// Deepest convolutional layer whose output still has at least four
    /// voxels along every spatial axis.
    pub fn default_saliency_layer(&self) -> &str {
        self.layers
            .iter()
            .filter(|l| l.is_convolutional() && l.output.extents.iter().all(|&e| e >= 4))
            .last()
            .or_else(|| self.layers.iter().find(|l| l.is_convolutional()))
            .map(|l| l.name.as_str())
            .expect("architecture has convolutional layers")
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: Parameters {
                names: self.params.names.clone(),
                tensors: self.params.tensors.iter().map(Tensor::cast).collect(),
            },
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [d, h, w] = self.config.input_shape;
        if x.rank() != 5 || x.dims()[1..] != [d, h, w, 1] {
            return Err(Error::shape(format!(
                "network expects (B, {d}, {h}, {w}, 1), got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn check_capture(&self, names: &[&str]) -> Result<()> {
        for n in names {
            if self.layer(n).is_none() {
                return Err(Error::config(format!("unknown layer {n}")));
            }
        }
        Ok(())
    }

    fn p(&self, layer: &Layer, k: usize) -> &Tensor<T> {
        &self.params.tensors[layer.param_base + k]
    }

    fn run(
        &self,
        x: &Tensor<T>,
        capture: &[&str],
        keep_cache: bool,
    ) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>, Option<ForwardCache<T>>)> {
        self.check_input(x)?;
        self.check_capture(capture)?;
        let mut caches = Vec::with_capacity(if keep_cache { self.layers.len() } else { 0 });
        let mut captured: Vec<(String, Tensor<T>)> = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            let (out, cache) = match &layer.kind {
                LayerKind::ConvNormRelu { conv, norm } => {
                    let z = conv3d_forward(&h, conv, self.p(layer, 0), self.p(layer, 1))?;
                    let (n, nc) = groupnorm_forward(&z, norm, self.p(layer, 2), self.p(layer, 3))?;
                    let act = relu_forward(&n);
                    let out = act.clone();
                    (out, keep_cache.then(|| LayerCache::Conv { input: h, norm: nc, act }))
                }
                LayerKind::DenseBlock { conv, norm, .. } => {
                    let z = conv3d_forward(&h, conv, self.p(layer, 0), self.p(layer, 1))?;
                    let (n, nc) = groupnorm_forward(&z, norm, self.p(layer, 2), self.p(layer, 3))?;
                    let act = relu_forward(&n);
                    let out = Tensor::concat_channels(&h, &act)?;
                    (out, keep_cache.then(|| LayerCache::Conv { input: h, norm: nc, act }))
                }
                LayerKind::MaxPool(spec) => {
                    let (out, pc) = maxpool3d_forward(&h, spec)?;
                    (out, keep_cache.then_some(LayerCache::Pool(pc)))
                }
                LayerKind::GlobalAvgPool => {
                    let out = global_avg_pool(&h)?;
                    (out, keep_cache.then(|| LayerCache::Gap { input_dims: h.dims().to_vec() }))
                }
                LayerKind::Dense { .. } => {
                    let out = dense_forward(&h, self.p(layer, 0), self.p(layer, 1))?;
                    (out, keep_cache.then_some(LayerCache::Dense { input: h }))
                }
            };
            if let Some(c) = cache {
                caches.push(c);
            }
            if capture.contains(&layer.name.as_str()) {
                captured.push((layer.name.clone(), out.clone()));
            }
            h = out;
        }
        // Preserve the caller's request order.
        captured.sort_by_key(|(n, _)| capture.iter().position(|c| c == n));
        Ok((h, captured, keep_cache.then_some(ForwardCache { layers: caches })))
    }

    pub fn forward(&self, x: &Tensor<T>, capture: &[&str]) -> Result<ForwardOutput<T>> {
        let (logits, captured, _) = self.run(x, capture, false)?;
        Ok(ForwardOutput { predictions: predictions(&logits), logits, captured })
    }

    /// Forward pass that also records what [`Network::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>, capture: &[&str]) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        let (logits, captured, cache) = self.run(x, capture, true)?;
        let cache = cache.expect("cache requested");
        Ok((ForwardOutput { predictions: predictions(&logits), logits, captured }, cache))
    }

    /// Backpropagate `dlogits` (shape (B, 1)). When `capture_grad` names a
    /// layer, the gradient with respect to that layer's output is returned too.
    pub fn backward(
        &self,
        cache: ForwardCache<T>,
        dlogits: &Tensor<T>,
        capture_grad: Option<&str>,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        if let Some(n) = capture_grad {
            self.check_capture(&[n])?;
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let mut captured = None;
        let mut dy = dlogits.clone();
        for (layer, lc) in self.layers.iter().zip(cache.layers).rev() {
            if capture_grad == Some(layer.name.as_str()) {
                captured = Some(dy.clone());
            }
            let base = layer.param_base;
            dy = match (&layer.kind, lc) {
                (LayerKind::ConvNormRelu { conv, .. }, LayerCache::Conv { input, norm, act }) => {
                    let dn = relu_backward(&act, &dy)?;
                    let mut gn = groupnorm_backward(&norm, self.p(layer, 2), &dn)?;
                    let mut gc = conv3d_backward(&input, conv, self.p(layer, 0), &gn.input)?;
                    grads.tensors[base] = gc.take_param("weight").unwrap();
                    grads.tensors[base + 1] = gc.take_param("bias").unwrap();
                    grads.tensors[base + 2] = gn.take_param("scale").unwrap();
                    grads.tensors[base + 3] = gn.take_param("shift").unwrap();
                    gc.input
                }
                (LayerKind::DenseBlock { conv, .. }, LayerCache::Conv { input, norm, act }) => {
                    let (mut dx, dnew) = dy.split_channels(input.dims()[4])?;
                    let dn = relu_backward(&act, &dnew)?;
                    let mut gn = groupnorm_backward(&norm, self.p(layer, 2), &dn)?;
                    let mut gc = conv3d_backward(&input, conv, self.p(layer, 0), &gn.input)?;
                    dx.add_assign(&gc.input)?;
                    grads.tensors[base] = gc.take_param("weight").unwrap();
                    grads.tensors[base + 1] = gc.take_param("bias").unwrap();
                    grads.tensors[base + 2] = gn.take_param("scale").unwrap();
                    grads.tensors[base + 3] = gn.take_param("shift").unwrap();
                    dx
                }
                (LayerKind::MaxPool(_), LayerCache::Pool(pc)) => maxpool3d_backward(&pc, &dy)?,
                (LayerKind::GlobalAvgPool, LayerCache::Gap { input_dims }) => {
                    global_avg_pool_backward(&input_dims, &dy)?
                }
                (LayerKind::Dense { .. }, LayerCache::Dense { input }) => {
                    let mut gd = dense_backward(&input, self.p(layer, 0), &dy)?;
                    grads.tensors[base] = gd.take_param("weight").unwrap();
                    grads.tensors[base + 1] = gd.take_param("bias").unwrap();
                    gd.input
                }
                _ => unreachable!("cache entry does not match layer kind"),
            };
        }
        Ok((grads, captured))
    }

    /// Mean binary cross-entropy of the batch and its parameter gradients.
    pub fn loss_and_gradients(&self, x: &Tensor<T>, labels: &[u8], pos_weight: f64) -> Result<(f64, Gradients<T>)> {
        let (out, cache) = self.forward_train(x, &[])?;
        let bce = bce_loss(&out.logits, labels, pos_weight)?;
        let (grads, _) = self.backward(cache, &bce.grad, None)?;
        Ok((bce.loss, grads))
    }
}

fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<Prediction> {
    logits
        .data()
        .iter()
        .map(|&z| {
            let logit = z.to_f64();
            Prediction { p_glaucoma: layers::sigmoid(logit), logit }
        })
        .collect()
}

/// Fan-in-scaled uniform weights, zero biases, unit norm scale, zero shift.
/// Each tensor draws from its own stream derived from the seed and its index.
pub fn init_parameters<T: Scalar>(
    config: &NetworkConfig,
    names: &[String],
    dims: &[Vec<usize>],
) -> Result<Vec<Tensor<T>>> {
    names
        .iter()
        .zip(dims)
        .enumerate()
        .map(|(i, (name, d))| {
            if name.ends_with(".norm.scale") {
                Tensor::full(d.clone(), T::one())
            } else if name.ends_with("weight") {
                let fan_in: usize = d[..d.len() - 1].iter().product();
                let bound = (3.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[i as u64]));
                let n: usize = d.iter().product();
                let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
                Tensor::from_vec(d.clone(), data)
            } else {
                Tensor::zeros(d.clone())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};

    fn random_input(dims: [usize; 3], batch: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * dims.iter().product::<usize>();
        Tensor::from_vec(vec![batch, dims[0], dims[1], dims[2], 1], (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn widths_and_final_feature_width() {
        for (g, expect) in [(2, 20), (16, 160)] {
            let net: Network = Network::build(NetworkConfig::new(g, [16, 32, 32], 0)).unwrap();
            assert_eq!(net.final_feature_width(), expect);
            assert_eq!(net.widths()[1], ("spconv2".to_string(), 2 * g));
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let mut net: Network = Network::build(NetworkConfig::new(1, [16, 32, 32], 3)).unwrap();
        net.params_mut().get_mut("dense37.weight").unwrap().scale_in_place(0.0);
        let out = net.forward(&random_input([16, 32, 32], 2, 1), &[]).unwrap();
        assert!(out.predictions.iter().all(|p| p.p_glaucoma == 0.5));
    }

    #[test]
    fn identical_samples_identical_predictions_and_captures() {
        let net: Network = Network::build(NetworkConfig::new(2, [16, 32, 32], 4)).unwrap();
        let one = random_input([16, 32, 32], 1, 2);
        let two = Tensor::stack(&[one.clone().reshape(vec![16, 32, 32, 1]).unwrap(), one.clone().reshape(vec![16, 32, 32, 1]).unwrap()])
            .unwrap();
        let out = net.forward(&two, &["dwconv10", "conv35"]).unwrap();
        assert_eq!(out.predictions[0], out.predictions[1]);
        let p = out.predictions[0].p_glaucoma;
        assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        assert_eq!(out.captured[0].0, "dwconv10");
        assert_eq!(out.captured[0].1.dims(), &[2, 16, 15, 15, 74]);
        assert_eq!(out.captured[1].1.dims(), &[2, 1, 1, 1, 20]);
    }

    #[test]
    fn unknown_capture_is_config_error() {
        let net: Network = Network::build(NetworkConfig::new(1, [16, 32, 32], 0)).unwrap();
        let x = random_input([16, 32, 32], 1, 0);
        assert!(matches!(net.forward(&x, &["nope"]), Err(Error::Config(_))));
        let bad = random_input([16, 32, 31], 1, 0);
        assert!(matches!(net.forward(&bad, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a: Network = Network::build(NetworkConfig::new(2, [16, 32, 32], 7)).unwrap();
        let b: Network = Network::build(NetworkConfig::new(2, [16, 32, 32], 7)).unwrap();
        let c: Network = Network::build(NetworkConfig::new(2, [16, 32, 32], 8)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params().tensors[0], c.params().tensors[0]);
        assert!(a.params().get("conv1.norm.scale").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.params().get("conv1.conv.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences_at_g1() {
        let net: Network<f64> = Network::<f32>::build(NetworkConfig::new(1, [16, 32, 32], 11)).unwrap().cast();
        let x = random_input([16, 32, 32], 2, 5).cast::<f64>();
        let labels = [1u8, 0];
        let (_, grads) = net.loss_and_gradients(&x, &labels, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..25 {
            let pi = rng.random_range(0..net.params().tensors.len());
            let ei = rng.random_range(0..net.params().tensors[pi].len());
            let probe = Tensor::scalar(net.params().tensors[pi].data()[ei]);
            let num = finite_diff_grad(
                |v| {
                    let mut n = net.clone();
                    n.params_mut().tensors[pi].data_mut()[ei] = v.data()[0];
                    n.loss_and_gradients(&x, &labels, 1.0).unwrap().0
                },
                &probe,
                1e-6,
            )
            .unwrap();
            let analytic = grads.tensors[pi].data()[ei];
            // Conv biases ahead of a normalization have zero true gradient, so
            // the floor sits above finite-difference round-off.
            worst = worst.max(max_relative_error(num.data(), &[analytic], 1e-6));
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn extreme_correct_logits_give_near_zero_gradients() {
        let mut net: Network = Network::build(NetworkConfig::new(1, [16, 32, 32], 2)).unwrap();
        net.params_mut().get_mut("dense37.bias").unwrap().data_mut()[0] = 40.0;
        let x = random_input([16, 32, 32], 2, 3);
        let (loss, grads) = net.loss_and_gradients(&x, &[1, 1], 1.0).unwrap();
        assert!(loss < 1e-12);
        let biggest = grads.tensors.iter().flat_map(|t| t.data()).fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(biggest < 1e-10, "{biggest}");
    }

    #[test]
    fn duplicated_batch_gives_same_mean_gradient() {
        let net: Network<f64> = Network::<f32>::build(NetworkConfig::new(1, [16, 32, 32], 6)).unwrap().cast();
        let a = random_input([16, 32, 32], 1, 8).cast::<f64>().reshape(vec![16, 32, 32, 1]).unwrap();
        let b = random_input([16, 32, 32], 1, 9).cast::<f64>().reshape(vec![16, 32, 32, 1]).unwrap();
        let pair = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        let doubled = Tensor::stack(&[a.clone(), b.clone(), a, b]).unwrap();
        let (l1, g1) = net.loss_and_gradients(&pair, &[1, 0], 1.0).unwrap();
        let (l2, g2) = net.loss_and_gradients(&doubled, &[1, 0, 1, 0], 1.0).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        // Summation order differs between the two batches, so entries are
        // compared against the largest gradient anywhere in the network.
        let scale = g1.tensors.iter().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in g1.tensors.iter().zip(&g2.tensors) {
            let e = max_relative_error(x.data(), y.data(), 1e-6 * scale);
            assert!(e < 1e-9, "{e}");
        }
    }

    #[test]
    fn permuting_the_batch_permutes_predictions() {
        let net: Network = Network::build(NetworkConfig::new(2, [16, 32, 32], 1)).unwrap();
        let items: Vec<Tensor<f32>> =
            (0..3).map(|s| random_input([16, 32, 32], 1, 40 + s).reshape(vec![16, 32, 32, 1]).unwrap()).collect();
        let fwd = |order: &[usize]| {
            let batch = Tensor::stack(&order.iter().map(|&i| items[i].clone()).collect::<Vec<_>>()).unwrap();
            net.forward(&batch, &[]).unwrap().predictions
        };
        let base = fwd(&[0, 1, 2]);
        let perm = fwd(&[2, 0, 1]);
        assert_eq!(perm, vec![base[2], base[0], base[1]]);
    }

    #[test]
    fn pre_activation_variance_is_moderate() {
        // Mean variance of each convolution output before normalization, over
        // 20 initialization seeds, on standard normal input. Layers whose
        // kernel overhangs the whole volume (the 1x1x1 stage at this input
        // size) lose most of their taps to padding and are skipped.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::from_vec(
            vec![1, 16, 32, 32, 1],
            (0..16 * 32 * 32).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect(),
        )
        .unwrap();
        let seeds = 20;
        let mut means: Vec<(String, f64)> = Vec::new();
        for seed in 0..seeds {
            let net: Network = Network::build(NetworkConfig::new(2, [16, 32, 32], seed)).unwrap();
            let mut h = x.clone();
            let mut k = 0;
            for layer in net.layers() {
                h = match &layer.kind {
                    LayerKind::ConvNormRelu { conv, norm } | LayerKind::DenseBlock { conv, norm, .. } => {
                        let z = conv3d_forward(&h, conv, net.p(layer, 0), net.p(layer, 1)).unwrap();
                        let full_support = conv.kernel.iter().zip(layer.output.extents).all(|(&k, e)| e >= k);
                        if full_support {
                            let n = z.len() as f64;
                            let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
                            let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                            if means.len() <= k {
                                means.push((layer.name.clone(), 0.0));
                            }
                            means[k].1 += var / seeds as f64;
                            k += 1;
                        }
                        let (n, _) = groupnorm_forward(&z, norm, net.p(layer, 2), net.p(layer, 3)).unwrap();
                        let act = relu_forward(&n);
                        if matches!(layer.kind, LayerKind::DenseBlock { .. }) {
                            Tensor::concat_channels(&h, &act).unwrap()
                        } else {
                            act
                        }
                    }
                    LayerKind::MaxPool(spec) => maxpool3d_forward(&h, spec).unwrap().0,
                    _ => break,
                };
            }
        }
        assert!(means.len() >= 25);
        for (name, v) in means {
            assert!((0.2..=5.0).contains(&v), "{name}: {v}");
        }
    }

    #[test]
    fn group_count_coarsens_only_for_tiny_volumes() {
        let c = NetworkConfig::default();
        assert_eq!(c.groups_for(32, 1000), 8);
        assert_eq!(c.groups_for(20, 1000), 4);
        assert_eq!(c.groups_for(16, 1), 1);
        assert_eq!(c.groups_for(32, 1), 2);
        assert_eq!(c.groups_for(16, 8), 8);
        assert_eq!(c.groups_for(3, 1), 1);
        assert_eq!(c.groups_for(8, 27), 4);
        assert_eq!(c.groups_for(1, 1000), 1);
    }
}
