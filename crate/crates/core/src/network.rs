//! Feed-forward feature extractor, linear classifier head, analytic
//! gradients and SGD with momentum on a polynomial-decay schedule.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::FeatureMatrix;

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

/// Affine layer `x W^T + b` with `W: out x in`. Also used as a gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
        Self {
            weights,
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }
}

/// `phi(x; theta_f)`: a stack of tanh layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub layers: Vec<Dense>,
}

/// `g(f; theta_g)`. Row `c` of `weights` is the classifier prototype for class `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub layer: Dense,
}

impl LinearClassifier {
    /// Classifier prototypes: a view of the weight matrix without the biases.
    pub fn prototypes(&self) -> ArrayView2<'_, f64> {
        self.layer.weights.view()
    }
}

#[derive(Clone, Debug)]
struct ForwardCache {
    input: Array2<f64>,
    /// Post-activation output of every extractor layer; the last is the feature matrix.
    activations: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub extractor: FeatureExtractor,
    pub classifier: LinearClassifier,
    #[serde(skip)]
    cache: Option<ForwardCache>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.extractor == other.extractor && self.classifier == other.classifier
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub extractor: Vec<Dense>,
    pub classifier: Dense,
}

impl Gradients {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.extractor
            .iter()
            .flat_map(Dense::values)
            .chain(self.classifier.values())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

impl Network {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn new(input_dim: usize, hidden: &[usize], class_count: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || class_count == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            layers.push(Dense::init(fan_in, width, &mut rng));
            fan_in = width;
        }
        let classifier = LinearClassifier {
            layer: Dense::init(fan_in, class_count, &mut rng),
        };
        Ok(Self {
            extractor: FeatureExtractor { layers },
            classifier,
            cache: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.layers[0].weights.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.layer.weights.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.layer.weights.nrows()
    }

    fn run(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.extractor.layers.len());
        for layer in &self.extractor.layers {
            let prev = activations.last().map_or(x, |a: &Array2<f64>| a.view());
            activations.push(layer.apply(prev).mapv(f64::tanh));
        }
        Ok(activations)
    }

    /// `(features, logits)` without touching the backward cache.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let mut activations = self.run(x)?;
        let features = activations.pop().unwrap();
        let logits = self.classifier.layer.apply(features.view());
        Ok((features, logits))
    }

    /// Like [`Network::infer`], but keeps the activations for [`Network::backward`].
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let activations = self.run(x)?;
        let features = activations.last().unwrap().clone();
        let logits = self.classifier.layer.apply(features.view());
        self.cache = Some(ForwardCache {
            input: x.to_owned(),
            activations,
        });
        Ok((features, logits))
    }

    /// Backpropagates `dL/dlogits` plus an optional direct `dL/dfeatures`
    /// through the cached forward pass. Consumes the cache.
    pub fn backward(
        &mut self,
        grad_logits: ArrayView2<f64>,
        grad_features: Option<ArrayView2<f64>>,
    ) -> Result<Gradients> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let features = cache.activations.last().unwrap();
        if grad_logits.dim() != (features.nrows(), self.class_count()) {
            return Err(Error::invalid("logit gradient shape does not match the forward pass"));
        }
        let classifier = Dense {
            weights: grad_logits.t().dot(features),
            bias: grad_logits.sum_axis(Axis(0)),
        };
        let mut upstream = grad_logits.dot(&self.classifier.layer.weights);
        if let Some(gf) = grad_features {
            if gf.dim() != upstream.dim() {
                return Err(Error::invalid("feature gradient shape does not match the forward pass"));
            }
            upstream += &gf;
        }
        let n_layers = self.extractor.layers.len();
        let mut extractor = vec![None; n_layers];
        for l in (0..n_layers).rev() {
            let a = &cache.activations[l];
            let dz = upstream * &a.mapv(|v| 1.0 - v * v);
            let input = if l == 0 {
                cache.input.view()
            } else {
                cache.activations[l - 1].view()
            };
            extractor[l] = Some(Dense {
                weights: dz.t().dot(&input),
                bias: dz.sum_axis(Axis(0)),
            });
            upstream = dz.dot(&self.extractor.layers[l].weights);
        }
        Ok(Gradients {
            extractor: extractor.into_iter().map(Option::unwrap).collect(),
            classifier,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            extractor: self.extractor.layers.iter().map(Dense::zeros_like).collect(),
            classifier: self.classifier.layer.zeros_like(),
        }
    }

    /// Pairs every parameter tensor with its gradient and learning-rate group.
    pub fn param_slots<'a>(&'a mut self, grads: &'a Gradients) -> Vec<ParamSlot<'a>> {
        let mut slots = Vec::new();
        for (layer, g) in self.extractor.layers.iter_mut().zip(&grads.extractor) {
            slots.push(ParamSlot::new(&mut layer.weights, &g.weights, ParamGroup::Features));
            slots.push(ParamSlot::new(&mut layer.bias, &g.bias, ParamGroup::Features));
        }
        let head = &mut self.classifier.layer;
        slots.push(ParamSlot::new(&mut head.weights, &grads.classifier.weights, ParamGroup::Head));
        slots.push(ParamSlot::new(&mut head.bias, &grads.classifier.bias, ParamGroup::Head));
        slots
    }

    pub fn parameters_finite(&self) -> bool {
        self.extractor
            .layers
            .iter()
            .flat_map(Dense::values)
            .chain(self.classifier.layer.values())
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Feature extractor layers.
    Features,
    /// Classifier head and learnable embedding prototypes.
    Head,
}

/// One parameter tensor, flattened, with its gradient.
pub struct ParamSlot<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
    pub group: ParamGroup,
}

impl<'a> ParamSlot<'a> {
    pub fn new<D: ndarray::Dimension>(
        values: &'a mut ndarray::Array<f64, D>,
        grads: &'a ndarray::Array<f64, D>,
        group: ParamGroup,
    ) -> Self {
        assert_eq!(values.shape(), grads.shape(), "parameter/gradient shape mismatch");
        Self {
            values: values.as_slice_mut().expect("parameters are contiguous"),
            grads: grads.as_slice().expect("gradients are contiguous"),
            group,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_features: f64,
    pub lr_head: f64,
    pub omega: f64,
    pub alpha: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-3,
            lr_features: 0.001,
            lr_head: 0.01,
            omega: 10.0,
            alpha: 0.75,
        }
    }
}

/// Momentum buffers plus the iteration counter driving
/// `eta_i = eta_0 (1 + omega i / I_max)^(-alpha)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub config: SgdConfig,
    pub iteration: u64,
    pub horizon: u64,
    buffers: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig, horizon: u64) -> Result<Self> {
        let c = &config;
        let positive = [c.lr_features, c.lr_head, c.alpha]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || !(c.omega >= 0.0) || !(0.0..1.0).contains(&c.momentum) || !(c.weight_decay >= 0.0) {
            return Err(Error::invalid("invalid SGD hyperparameters"));
        }
        Ok(Self {
            config,
            iteration: 0,
            horizon: horizon.max(1),
            buffers: Vec::new(),
        })
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Features => self.config.lr_features,
            ParamGroup::Head => self.config.lr_head,
        };
        let progress = self.iteration as f64 / self.horizon as f64;
        base * (1.0 + self.config.omega * progress).powf(-self.config.alpha)
    }

    /// Clears the momentum of slot `index` (used when a parameter is re-initialized).
    pub fn reset_slot(&mut self, index: usize) {
        if let Some(b) = self.buffers.get_mut(index) {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `v <- m v + g + wd p; p <- p - eta_i v`, then advances the iteration counter.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        if let Some((k, _)) = slots
            .iter()
            .enumerate()
            .find(|(_, s)| s.grads.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::TrainingDiverged {
                epoch: 0,
                batch: self.iteration as usize,
                reason: format!("non-finite gradient in parameter slot {k}"),
            });
        }
        // slots may be appended (with fresh momentum) but never removed or resized
        if self.buffers.len() > slots.len()
            || self.buffers.iter().zip(slots.iter()).any(|(b, s)| b.len() != s.values.len())
        {
            return Err(Error::invalid("parameter layout changed between SGD steps"));
        }
        let known = self.buffers.len();
        self.buffers.extend(slots[known..].iter().map(|s| vec![0.0; s.values.len()]));
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        let rates = [self.learning_rate(ParamGroup::Features), self.learning_rate(ParamGroup::Head)];
        for (slot, buf) in slots.iter_mut().zip(&mut self.buffers) {
            let lr = rates[slot.group as usize];
            for ((p, &g), v) in slot.values.iter_mut().zip(slot.grads).zip(buf.iter_mut()) {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_input(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut net = Network::new(3, &[5, 4], 3, 1).unwrap();
        net.classifier.layer.weights.fill(0.0);
        let (_, logits) = net.infer(random_input(4, 3, 2).view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let p = crate::numerics::softmax_rows(logits.view(), 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = Network::new(4, &DEFAULT_HIDDEN, 3, 9).unwrap();
        let x = random_input(1, 4, 3);
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.infer(x.view()).unwrap(), a);
        assert!(net.infer(random_input(1, 5, 3).view()).is_err());
    }

    #[test]
    fn logits_match_naive_matmul() {
        let net = Network::new(4, &[6, 5], 3, 11).unwrap();
        let x = random_input(7, 4, 12);
        let (features, logits) = net.infer(x.view()).unwrap();
        // triple-loop oracle
        let mut act: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
        for layer in &net.extractor.layers {
            act = act
                .iter()
                .map(|row| {
                    (0..layer.weights.nrows())
                        .map(|o| {
                            let mut s = layer.bias[o];
                            for (i, v) in row.iter().enumerate() {
                                s += layer.weights[[o, i]] * v;
                            }
                            s.tanh()
                        })
                        .collect()
                })
                .collect();
        }
        let head = &net.classifier.layer;
        for (j, row) in act.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                assert!((features[[j, k]] - v).abs() < 1e-12);
            }
            for c in 0..3 {
                let mut s = head.bias[c];
                for (k, v) in row.iter().enumerate() {
                    s += head.weights[[c, k]] * v;
                }
                assert!((logits[[j, c]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::new(2, &[3], 2, 0).unwrap();
        assert!(matches!(
            net.backward(Array2::zeros((1, 2)).view(), None),
            Err(Error::State(_))
        ));
        net.forward(random_input(1, 2, 0).view()).unwrap();
        net.backward(Array2::zeros((1, 2)).view(), None).unwrap();
        assert!(net.backward(Array2::zeros((1, 2)).view(), None).is_err());
    }

    /// Scalar test loss: `sum(A * logits) + sum(B * features)`.
    fn probe_loss(net: &Network, x: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let (f, l) = net.infer(x.view()).unwrap();
        (&l * a).sum() + (&f * b).sum()
    }

    fn perturb(net: &mut Network, slot: usize, idx: usize, delta: f64) {
        let zero = net.zero_gradients();
        let mut copy = net.clone();
        {
            let mut slots = copy.param_slots(&zero);
            slots[slot].values[idx] += delta;
        }
        *net = copy;
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut net = Network::new(3, &[4, 3], 2, 21).unwrap();
        let x = random_input(5, 3, 22);
        let a = random_input(5, 2, 23);
        let b = random_input(5, 3, 24);
        net.forward(x.view()).unwrap();
        let grads = net.backward(a.view(), Some(b.view())).unwrap();
        let h = 1e-5;
        let mut probe = net.clone();
        let analytic: Vec<Vec<f64>> = probe.param_slots(&grads).iter().map(|s| s.grads.to_vec()).collect();
        let mut worst: f64 = 0.0;
        for (slot, g) in analytic.iter().enumerate() {
            for idx in 0..g.len() {
                let mut plus = net.clone();
                perturb(&mut plus, slot, idx, h);
                let mut minus = net.clone();
                perturb(&mut minus, slot, idx, -h);
                let fd = (probe_loss(&plus, &x, &a, &b) - probe_loss(&minus, &x, &a, &b)) / (2.0 * h);
                let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut net = Network::new(3, &[4], 2, 5).unwrap();
        let x = random_input(5, 3, 6);
        let a = random_input(5, 2, 7);
        net.forward(x.view()).unwrap();
        let g1 = net.backward(a.view(), None).unwrap();
        net.forward(x.view()).unwrap();
        let g2 = net.backward((&a * 2.0).view(), None).unwrap();
        for (u, v) in g1.values().zip(g2.values()) {
            assert!((2.0 * u - v).abs() < 1e-14);
        }
        net.forward(x.view()).unwrap();
        let g0 = net.backward(Array2::zeros((5, 2)).view(), Some(Array2::zeros((5, 4)).view())).unwrap();
        assert!(g0.values().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_examples() {
        let mut sgd = SgdState::new(SgdConfig::default(), 100).unwrap();
        assert_eq!(sgd.learning_rate(ParamGroup::Features), 0.001);
        assert_eq!(sgd.learning_rate(ParamGroup::Head), 0.01);
        sgd.iteration = 100;
        let oracle = 11f64.powf(-0.75);
        assert!((oracle - 0.16556).abs() < 1e-5);
        assert!((sgd.learning_rate(ParamGroup::Head) - 0.01 * oracle).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..300 {
            sgd.iteration = i;
            let lr = sgd.learning_rate(ParamGroup::Features);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_update_rule() {
        let config = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut sgd = SgdState::new(config.clone(), 10).unwrap();
        let mut p = array![1.0, -2.0];
        let zero = array![0.0, 0.0];
        sgd.step(&mut [ParamSlot::new(&mut p, &zero, ParamGroup::Head)]).unwrap();
        assert_eq!(p, array![1.0, -2.0]);
        assert_eq!(sgd.iteration, 1);

        let mut sgd = SgdState::new(SgdConfig::default(), 10).unwrap();
        let mut p = array![1.0];
        let g = array![0.5];
        sgd.step(&mut [ParamSlot::new(&mut p, &g, ParamGroup::Head)]).unwrap();
        // v = 0.5 + 1e-3 * 1; p = 1 - 0.01 * v
        assert!((p[0] - (1.0 - 0.01 * 0.501)).abs() < 1e-15);
        let lr = sgd.learning_rate(ParamGroup::Head);
        let before = p[0];
        sgd.step(&mut [ParamSlot::new(&mut p, &g, ParamGroup::Head)]).unwrap();
        let v = 0.9 * 0.501 + 0.5 + 1e-3 * before;
        assert!((p[0] - (before - lr * v)).abs() < 1e-15);

        let bad = array![f64::NAN];
        assert!(matches!(
            sgd.step(&mut [ParamSlot::new(&mut p, &bad, ParamGroup::Head)]),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn classifier_prototypes_alias_weights() {
        let mut net = Network::new(3, &[4], 2, 3).unwrap();
        let before = net.classifier.prototypes().to_owned();
        let x = random_input(3, 3, 4);
        net.forward(x.view()).unwrap();
        let grads = net.backward(Array2::ones((3, 2)).view(), None).unwrap();
        let mut sgd = SgdState::new(SgdConfig::default(), 10).unwrap();
        sgd.step(&mut net.param_slots(&grads)).unwrap();
        assert_ne!(net.classifier.prototypes(), before);
        assert_eq!(net.classifier.prototypes(), net.classifier.layer.weights.view());
    }
}
