//! Parameter storage and the layer vocabulary shared by the three networks.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Conv2dSpec, Tape, Var};
use crate::tensor::{Real, Tensor};

const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered parameter tensors of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.params.iter().map(|p| tape.variable(Rc::new(p.value.clone()))).collect(), trainable: true }
    }

    /// Record every parameter as a constant (inference, or a frozen network).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(), trainable: false }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect() }
    }
}

impl<T> std::ops::Index<ParamId> for ParamStore<T> {
    type Output = Tensor<T>;
    fn index(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }
}

/// A [`ParamStore`] recorded on a tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
    trainable: bool,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// Builds parameters with a shared RNG and a name prefix stack.
pub struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<U>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T, R>) -> U) -> U {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-bound..=bound))).collect();
        let full = self.full_name(name);
        self.store.add(full, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, Tensor::full(shape, T::lit(value)))
    }
}

/// Multiply-accumulate count and output spatial size of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let (weight, bias) = b.scoped(name, |b| {
            let w = b.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound);
            let bias = bias.then(|| b.constant("bias", &[out_channels], 0.0));
            (w, bias)
        });
        let spec = Conv2dSpec { stride, padding: kernel / 2 };
        Self { weight, bias, in_channels, out_channels, kernel, spec }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.spec)
    }

    pub fn cost(&self, height: usize, width: usize) -> Cost {
        let (oh, ow) = (self.spec.output_size(height, self.kernel), self.spec.output_size(width, self.kernel));
        let macs = (self.kernel * self.kernel * self.in_channels * self.out_channels * oh * ow) as u64;
        Cost { macs, height: oh, width: ow }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, inputs: usize, outputs: usize) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        let (weight, bias) = b.scoped(name, |b| {
            (b.uniform("weight", &[outputs, inputs], bound), b.constant("bias", &[outputs], 0.0))
        });
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn macs(&self) -> u64 {
        (self.inputs * self.outputs) as u64
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, channels: usize) -> Self {
        let groups = (channels / 4).max(1);
        let (gamma, beta) = b.scoped(name, |b| (b.constant("gamma", &[channels], 1.0), b.constant("beta", &[channels], 0.0)));
        Self { gamma, beta, groups }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.group_norm(self.groups, p.var(self.gamma), p.var(self.beta), T::lit(NORM_EPS))
    }
}

/// 3x3 convolution, group normalization, leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        b.scoped(name, |b| Self {
            conv: Conv2d::new(b, "conv", in_channels, out_channels, 3, stride, false, 1.0),
            norm: GroupNorm::new(b, "norm", out_channels),
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.norm.forward(p, self.conv.forward(p, x)).leaky_relu(T::lit(LEAKY_SLOPE))
    }

    pub fn cost(&self, height: usize, width: usize) -> Cost {
        self.conv.cost(height, width)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    reduce: Linear,
    expand: Linear,
}

impl SqueezeExcite {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        b.scoped(name, |b| Self { reduce: Linear::new(b, "reduce", channels, hidden), expand: Linear::new(b, "expand", hidden, channels) })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let squeezed = x.global_avg_pool();
        let gate = self.expand.forward(p, self.reduce.forward(p, squeezed).relu()).sigmoid();
        x.channel_scale(gate)
    }

    pub fn macs(&self) -> u64 {
        self.reduce.macs() + self.expand.macs()
    }
}

/// Residual block: ConvBlock, conv + norm, squeeze-excitation gate, then the
/// shortcut is added and the sum activated. A strided or widening block gets
/// a 1x1 projection shortcut.
#[derive(Debug, Clone)]
pub struct SeResBlock {
    first: ConvBlock,
    second: Conv2d,
    second_norm: GroupNorm,
    gate: SqueezeExcite,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl SeResBlock {
    pub fn new<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        reduction: usize,
    ) -> Self {
        b.scoped(name, |b| Self {
            first: ConvBlock::new(b, "block1", in_channels, out_channels, stride),
            second: Conv2d::new(b, "conv2", out_channels, out_channels, 3, 1, false, 1.0),
            second_norm: GroupNorm::new(b, "norm2", out_channels),
            gate: SqueezeExcite::new(b, "se", out_channels, reduction),
            shortcut: (in_channels != out_channels || stride != 1).then(|| {
                (Conv2d::new(b, "shortcut", in_channels, out_channels, 1, stride, false, 1.0), GroupNorm::new(b, "shortcut_norm", out_channels))
            }),
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let body = self.first.forward(p, x);
        let body = self.second_norm.forward(p, self.second.forward(p, body));
        let body = self.gate.forward(p, body);
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(p, conv.forward(p, x)),
            None => x,
        };
        body.add(skip).leaky_relu(T::lit(LEAKY_SLOPE))
    }

    pub fn cost(&self, height: usize, width: usize) -> Cost {
        let a = self.first.cost(height, width);
        let b = self.second.cost(a.height, a.width);
        let s = self.shortcut.as_ref().map_or(0, |(c, _)| c.cost(height, width).macs);
        Cost { macs: a.macs + b.macs + s + self.gate.macs(), height: b.height, width: b.width }
    }

    pub fn out_channels(&self) -> usize {
        self.second.out_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_param_and_mac_counts_follow_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let conv = Conv2d::new(&mut b, "c", 5, 7, 3, 1, false, 1.0);
        assert_eq!(store.count(), 3 * 3 * 5 * 7);
        assert_eq!(conv.cost(10, 10).macs, (9 * 5 * 7 * 100) as u64);
    }

    #[test]
    fn linear_param_count_includes_bias() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        Linear::new(&mut b, "fc", 152, 256);
        assert_eq!(store.count(), 152 * 256 + 256);
    }

    #[test]
    fn scoped_names_are_dotted_paths() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        b.scoped("enc", |b| SeResBlock::new(b, "res", 4, 8, 2, 16));
        let names: Vec<&str> = store.params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"enc.res.block1.conv.weight"));
        assert!(names.contains(&"enc.res.shortcut.weight"));
        assert!(names.contains(&"enc.res.se.expand.bias"));
    }
}
