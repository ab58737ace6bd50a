//! Backbone MLP, bias-free prototype head and SGD with momentum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// A trainable leaf tensor with a stable name and its momentum buffer.
#[derive(Debug)]
pub struct Parameter {
    pub name: String,
    tensor: Tensor,
    momentum: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let tensor = Tensor::new(shape, values, true)?;
        let momentum = vec![0.0; tensor.numel()];
        Ok(Self { name: name.into(), tensor, momentum })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }

    pub fn momentum(&self) -> &[f64] {
        &self.momentum
    }

    /// Replaces the values with a fresh leaf; any graph built on the old
    /// tensor keeps seeing the old values.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        self.tensor = Tensor::new(&self.tensor.shape().to_vec(), values, true)?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    pub fn reset_momentum(&mut self) {
        self.momentum.iter_mut().for_each(|v| *v = 0.0);
    }
}

// Deep copy: clones never share a gradient slot.
impl Clone for Parameter {
    fn clone(&self) -> Self {
        let tensor = Tensor::new(self.shape(), self.values().to_vec(), true)
            .expect("existing parameter has a valid shape");
        if let Some(g) = self.tensor.grad() {
            tensor.accumulate_grad(&g);
        }
        Self { name: self.name.clone(), tensor, momentum: self.momentum.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, _) = x.dims2()?;
        let (_, inp) = self.weight.tensor().dims2()?;
        if x.shape()[1] != inp {
            return Err(Error::Shape(format!(
                "{}: layer expects {inp} inputs, got {}",
                self.weight.name,
                x.shape()[1]
            )));
        }
        x.matmul_nt(self.weight.tensor())?
            .add(&self.bias.tensor().broadcast_rows(rows)?)
    }
}

/// Feature extractor: linear layers with ReLU between them and no
/// activation after the last one.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub layers: Vec<Linear>,
}

/// Scaled-uniform (He fan-in) initialization bound.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform_values(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn mlp_init(dims: &[usize], seed: u64) -> Result<Backbone> {
    if dims.len() < 2 {
        return Err(Error::Config(format!("backbone needs at least 2 dims, got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("backbone dims must be positive, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (inp, out) = (w[0], w[1]);
            let weight = Parameter::new(
                format!("backbone.{i}.weight"),
                &[out, inp],
                uniform_values(&mut rng, out * inp, he_bound(inp)),
            )?;
            let bias = Parameter::new(format!("backbone.{i}.bias"), &[out], vec![0.0; out])?;
            Ok(Linear { weight, bias })
        })
        .collect::<Result<_>>()?;
    Ok(Backbone { layers })
}

impl Backbone {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0, self.depth())
    }

    /// Runs layers `from..to`. The representation after layer `i` is ReLU'd
    /// unless `i` is the final layer, so ranges compose:
    /// `forward_range(forward_range(x, 0, k), k, L) == forward(x)`.
    pub fn forward_range(&self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        if from > to || to > self.depth() {
            return Err(Error::Contract(format!(
                "layer range {from}..{to} outside backbone of depth {}",
                self.depth()
            )));
        }
        let last = self.depth() - 1;
        let mut h = x.clone();
        for i in from..to {
            h = self.layers[i].forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Representation names in forward order: `input`, `layer1` .. `layerL`.
    /// `layerL` is the backbone output fed to the head.
    pub fn representation_names(&self) -> Vec<String> {
        std::iter::once("input".to_string())
            .chain((1..=self.depth()).map(|i| format!("layer{i}")))
            .collect()
    }

    /// Number of backbone layers applied to produce the named representation.
    pub fn representation_index(&self, name: &str) -> Result<usize> {
        let names = self.representation_names();
        names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown representation '{name}'; valid names: {}",
                names.join(", ")
            ))
        })
    }
}

/// Classifier whose logits are inner products with per-class prototypes.
#[derive(Debug, Clone)]
pub struct PrototypeHead {
    pub prototypes: Parameter,
}

impl PrototypeHead {
    pub fn init(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
        let values = uniform_values(&mut rng, classes * dim, he_bound(dim));
        Ok(Self { prototypes: Parameter::new("head.prototypes", &[classes, dim], values)? })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    /// `logits[b][i] = <P_i, z_b>`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = z.dims2()?;
        if d != self.prototypes.shape()[1] {
            return Err(Error::Shape(format!(
                "head expects {}-dim representations, got {d}",
                self.prototypes.shape()[1]
            )));
        }
        z.matmul_nt(self.prototypes.tensor())
    }
}

/// `h = F ∘ G`.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub head: PrototypeHead,
}

impl Model {
    pub fn init(dims: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let backbone = mlp_init(dims, seed)?;
        let head = PrototypeHead::init(classes, backbone.output_dim(), seed)?;
        Ok(Self { backbone, head })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.backbone.forward(x)?)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.backbone
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(std::iter::once(&self.head.prototypes))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.backbone
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(std::iter::once(&mut self.head.prototypes))
            .collect()
    }

    pub fn zero_grad(&self) {
        self.params().iter().for_each(|p| p.zero_grad());
    }

    /// Clears gradients and momentum buffers.
    pub fn reset_optimizer_state(&mut self) {
        self.zero_grad();
        self.params_mut().into_iter().for_each(Parameter::reset_momentum);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for p in self.params() {
            ckpt.push(p.name.clone(), p.shape().to_vec(), p.values().to_vec());
        }
        ckpt
    }

    /// Rebuilds a model from checkpoint entries named as [`Model::params`]
    /// names them. Structural problems are format errors at offset 0.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let bad = |msg: String| Error::format(0, format!("checkpoint structure: {msg}"));
        let mut layers: Vec<Linear> = Vec::new();
        for i in 0.. {
            let Some(w) = ckpt.get(&format!("backbone.{i}.weight")) else {
                break;
            };
            let b = ckpt.get(&format!("backbone.{i}.bias")).ok_or_else(|| bad(format!("missing backbone.{i}.bias")))?;
            if w.shape.len() != 2 || b.shape != [w.shape[0]] {
                return Err(bad(format!("layer {i} shapes {:?} and {:?}", w.shape, b.shape)));
            }
            if let Some(prev) = layers.last() {
                if prev.weight.shape()[0] != w.shape[1] {
                    return Err(bad(format!("layer {i} input {} does not match previous output", w.shape[1])));
                }
            }
            layers.push(Linear {
                weight: Parameter::new(w.name.clone(), &w.shape, w.values.clone())?,
                bias: Parameter::new(b.name.clone(), &b.shape, b.values.clone())?,
            });
        }
        if layers.is_empty() {
            return Err(bad("no backbone layers".into()));
        }
        let p = ckpt.get("head.prototypes").ok_or_else(|| bad("missing head.prototypes".into()))?;
        let backbone = Backbone { layers };
        if p.shape.len() != 2 || p.shape[1] != backbone.output_dim() || p.shape[0] < 2 {
            return Err(bad(format!("prototype shape {:?}", p.shape)));
        }
        let head = PrototypeHead {
            prototypes: Parameter::new(p.name.clone(), &p.shape, p.values.clone())?,
        };
        Ok(Self { backbone, head })
    }
}

/// SGD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl OptimizerState {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// `v <- momentum*v + (grad + wd*param); param <- param - lr*v`.
/// Gradients are left in place; the caller zeroes them.
pub fn sgd_step(state: &OptimizerState, params: &mut [&mut Parameter]) -> Result<()> {
    for p in params.iter_mut() {
        let grad = p
            .tensor
            .grad()
            .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", p.name)))?;
        let mut values = p.values().to_vec();
        for ((v, w), g) in p.momentum.iter_mut().zip(values.iter_mut()).zip(&grad) {
            *v = state.momentum * *v + (g + state.weight_decay * *w);
            *w -= state.lr * *v;
        }
        let old = p.tensor.clone();
        p.set_values(values)?;
        // carry the accumulated gradient over to the new leaf
        if let Some(g) = old.grad() {
            p.tensor.accumulate_grad(&g);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = mlp_init(&[4, 8, 3], 1).unwrap();
        let b = mlp_init(&[4, 8, 3], 1).unwrap();
        let c = mlp_init(&[4, 8, 3], 2).unwrap();
        assert_eq!(a.layers[0].weight.shape(), &[8, 4]);
        assert_eq!(a.layers[1].weight.shape(), &[3, 8]);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weight.values(), lb.weight.values());
        }
        assert_ne!(a.layers[0].weight.values(), c.layers[0].weight.values());
        assert!(a.layers.iter().all(|l| l.bias.values().iter().all(|&v| v == 0.0)));
        assert!(matches!(mlp_init(&[4], 1), Err(Error::Config(_))));
        assert!(matches!(mlp_init(&[4, 0, 2], 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_and_identity_backbones() {
        let mut g = mlp_init(&[3, 3], 0).unwrap();
        let x = Tensor::constant(&[2, 3], vec![0.5, -1., 2., 3., 0., 1.]).unwrap();
        g.layers[0].weight.set_values(vec![0.0; 9]).unwrap();
        assert!(g.forward(&x).unwrap().values().iter().all(|&v| v == 0.0));
        g.layers[0]
            .weight
            .set_values(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap();
        assert_eq!(g.forward(&x).unwrap().values(), x.values());
        let bad = Tensor::constant(&[1, 2], vec![0., 0.]).unwrap();
        assert!(matches!(g.forward(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn backbone_matches_hand_composition() {
        let g = mlp_init(&[3, 4, 2], 9).unwrap();
        let xs = [0.2, -0.7, 1.1];
        let x = Tensor::constant(&[1, 3], xs.to_vec()).unwrap();
        let out = g.forward(&x).unwrap();

        let dense = |w: &[f64], b: &[f64], inp: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(o, bo)| bo + inp.iter().enumerate().map(|(i, v)| w[o * inp.len() + i] * v).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = dense(g.layers[0].weight.values(), g.layers[0].bias.values(), &xs)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let y = dense(g.layers[1].weight.values(), g.layers[1].bias.values(), &h);
        for (a, b) in out.values().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_ranges_compose() {
        let g = mlp_init(&[5, 6, 4, 3], 3).unwrap();
        let x = Tensor::constant(&[2, 5], (0..10).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let full = g.forward(&x).unwrap();
        for k in 0..=3 {
            let mid = g.forward_range(&x, 0, k).unwrap();
            let rest = g.forward_range(&mid, k, 3).unwrap();
            assert_eq!(rest.values(), full.values());
        }
        assert_eq!(g.representation_index("layer3").unwrap(), 3);
        assert_eq!(g.representation_index("input").unwrap(), 0);
        let err = g.representation_index("layer9").unwrap_err().to_string();
        assert!(err.contains("input, layer1, layer2, layer3"), "{err}");
    }

    #[test]
    fn head_examples() {
        let mut f = PrototypeHead::init(3, 3, 0).unwrap();
        let zero = Tensor::zeros(&[1, 3]).unwrap();
        assert!(f.forward(&zero).unwrap().values().iter().all(|&v| v == 0.0));
        f.prototypes
            .set_values(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap();
        let e1 = Tensor::constant(&[1, 3], vec![0., 1., 0.]).unwrap();
        assert_eq!(f.forward(&e1).unwrap().values(), &[0., 1., 0.]);
        assert!(PrototypeHead::init(1, 3, 0).is_err());
        assert!(f.forward(&Tensor::zeros(&[1, 2]).unwrap()).is_err());
    }

    fn param(v: f64) -> Parameter {
        Parameter::new("p", &[1], vec![v]).unwrap()
    }

    fn step_with_grad(p: &mut Parameter, opt: &OptimizerState, g: f64) {
        p.zero_grad();
        p.tensor().scale(g).sum().backward().unwrap();
        sgd_step(opt, &mut [p]).unwrap();
    }

    #[test]
    fn sgd_examples() {
        let opt = OptimizerState { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut p = param(0.0);
        step_with_grad(&mut p, &opt, 1.0);
        assert!((p.values()[0] + 0.1).abs() < 1e-15);

        let opt = OptimizerState { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut p = param(0.0);
        step_with_grad(&mut p, &opt, 2.0);
        let after_one = p.values()[0];
        step_with_grad(&mut p, &opt, 2.0);
        let second = (p.values()[0] - after_one).abs();
        assert!((second - 1.9 * 0.1 * 2.0).abs() < 1e-12);

        let frozen = OptimizerState { lr: 0.0, ..opt };
        let mut p = param(0.7);
        step_with_grad(&mut p, &frozen, 5.0);
        assert_eq!(p.values()[0], 0.7);
    }

    #[test]
    fn sgd_requires_gradients() {
        let mut p = Parameter {
            name: "x".into(),
            tensor: Tensor::constant(&[1], vec![0.0]).unwrap(),
            momentum: vec![0.0],
        };
        let opt = OptimizerState::default();
        assert!(matches!(sgd_step(&opt, &mut [&mut p]), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_decreases_quadratic() {
        let opt = OptimizerState { lr: 1e-3, momentum: 0.0, weight_decay: 0.0 };
        let mut p = Parameter::new("x", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = |p: &Parameter| p.tensor().mul(p.tensor()).unwrap().sum().scale(0.5);
        let before = loss(&p);
        before.backward().unwrap();
        sgd_step(&opt, &mut [&mut p]).unwrap();
        assert!(loss(&p).item() < before.item());
    }

    #[test]
    fn checkpoint_roundtrip_rebuilds_model() {
        let m = Model::init(&[6, 5, 4], 3, 11).unwrap();
        let back = Model::from_checkpoint(&m.to_checkpoint()).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.values(), b.values());
        }
    }
}
