//! MLP towers whose parameters are the elementwise sum of a shared set, a
//! conversion-type set and a display-scenario set, with hand-derived
//! backpropagation and Adagrad.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TowerArchitecture {
    pub input_dim: usize,
    /// Units of the ReLU layers; a scalar logit head follows the last one.
    pub layer_units: Vec<usize>,
}

impl TowerArchitecture {
    pub fn new(input_dim: usize, layer_units: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || layer_units.is_empty() || layer_units.contains(&0) {
            return Err(Error::Config(format!(
                "tower needs a positive input dim and at least one non-empty layer, got {input_dim} -> {layer_units:?}"
            )));
        }
        Ok(Self {
            input_dim,
            layer_units,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layer_units.len()
    }

    /// `(fan_in, fan_out)` of every dense layer including the head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layer_units.len() + 1);
        let mut fan_in = self.input_dim;
        for &u in &self.layer_units {
            shapes.push((fan_in, u));
            fan_in = u;
        }
        shapes.push((fan_in, 1));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Weights and biases of every layer of one tower, head last.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<Dense>,
}

impl ParamSet {
    pub fn zeros(arch: &TowerArchitecture) -> Self {
        Self {
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Dense {
                    weight: Matrix::zeros(i, o),
                    bias: vec![0.0; o],
                })
                .collect(),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform(arch: &TowerArchitecture, rng: &mut RngState) -> Self {
        let mut set = Self::zeros(arch);
        for layer in &mut set.layers {
            let limit = (6.0 / layer.weight.rows() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.uniform(-limit, limit);
            }
        }
        set
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() || layers.last().is_some_and(|l| l.weight.cols() != 1) {
            return Err(Error::Shape("last layer must be a scalar head".into()));
        }
        for w in layers.windows(2) {
            if w[0].weight.cols() != w[1].weight.rows() {
                return Err(Error::Shape("consecutive layers do not chain".into()));
            }
        }
        if layers.iter().any(|l| l.bias.len() != l.weight.cols()) {
            return Err(Error::Shape("bias length differs from layer width".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Parameter buffers in a fixed order: per layer, weight then bias.
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
    }

    fn locate(&self, mut idx: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            let nw = l.weight.data().len();
            if idx < nw {
                return (li, false, idx);
            }
            idx -= nw;
            if idx < l.bias.len() {
                return (li, true, idx);
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access in [`ParamSet::slices`] order.
    pub fn get(&self, idx: usize) -> f64 {
        match self.locate(idx) {
            (l, false, i) => self.layers[l].weight.data()[i],
            (l, true, i) => self.layers[l].bias[i],
        }
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        match self.locate(idx) {
            (l, false, i) => self.layers[l].weight.data_mut()[i] = value,
            (l, true, i) => self.layers[l].bias[i] = value,
        }
    }

    /// `self += other`, layer by layer.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape("parameter sets differ in shape".into()));
        }
        for (a, b) in self.slices_mut().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.slices().all(|s| s.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Parameters of one domain tower, materialized as `base + type + scenario`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedTowerParams {
    params: ParamSet,
}

impl ComposedTowerParams {
    /// A tower that uses the shared parameters alone.
    pub fn shared(base: &ParamSet) -> Self {
        Self {
            params: base.clone(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }
}

/// Elementwise `(base + type) + scenario` over every layer.
pub fn compose(
    base: &ParamSet,
    type_set: &ParamSet,
    scenario_set: &ParamSet,
) -> Result<ComposedTowerParams> {
    if !base.same_shape(type_set) || !base.same_shape(scenario_set) {
        return Err(Error::Shape(
            "base, type and scenario parameter sets differ in shape".into(),
        ));
    }
    let mut params = base.clone();
    params.add_assign(type_set)?;
    params.add_assign(scenario_set)?;
    Ok(ComposedTowerParams { params })
}

/// Number of stored parameter sets for `N_t` types and `N_s` scenarios.
pub fn stored_param_sets(num_types: usize, num_scenarios: usize) -> usize {
    num_types + num_scenarios + 1
}

/// Number of distinct towers the stored sets compose into.
pub fn composable_towers(num_types: usize, num_scenarios: usize) -> usize {
    num_types * num_scenarios
}

/// Activations kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every dense layer; `inputs[0]` is the tower input.
    inputs: Vec<Matrix>,
    /// Pre-activations of the ReLU layers.
    pre: Vec<Matrix>,
}

/// Runs `x` (`n × input_dim`) through the tower; returns one logit per row.
pub fn forward(x: &Matrix, params: &ParamSet) -> Result<(Vec<f64>, ForwardCache)> {
    let layers = params.layers();
    let (hidden, head) = layers.split_at(layers.len() - 1);
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(hidden.len());
    let mut act = x.clone();
    for layer in hidden {
        let mut z = act.matmul(&layer.weight)?;
        z.add_row_broadcast(&layer.bias)?;
        let a = z.relu();
        inputs.push(act);
        pre.push(z);
        act = a;
    }
    let mut logits = act.matmul(&head[0].weight)?;
    logits.add_row_broadcast(&head[0].bias)?;
    inputs.push(act);
    Ok((logits.into_data(), ForwardCache { inputs, pre }))
}

/// Logits only.
pub fn forward_logits(x: &Matrix, params: &ParamSet) -> Result<Vec<f64>> {
    forward(x, params).map(|(h, _)| h)
}

#[derive(Debug, Clone)]
pub struct TowerGradients {
    /// Gradient w.r.t. the composed parameters. Since the composed set is a
    /// plain sum, this is also the gradient w.r.t. each of its base, type and
    /// scenario summands.
    pub params: ParamSet,
    /// Gradient w.r.t. the tower input.
    pub input: Matrix,
}

/// Backpropagates `d_logits` (one per row) through a cached forward pass.
pub fn backward(cache: &ForwardCache, params: &ParamSet, d_logits: &[f64]) -> Result<TowerGradients> {
    let n = cache.inputs[0].rows();
    if d_logits.len() != n {
        return Err(Error::Shape(format!(
            "{} upstream gradients for {n} rows",
            d_logits.len()
        )));
    }
    let layers = params.layers();
    let mut grads = Vec::with_capacity(layers.len());
    let mut delta = Matrix::new(n, 1, d_logits.to_vec())?;
    for li in (0..layers.len()).rev() {
        if li < layers.len() - 1 {
            let z = &cache.pre[li];
            for (d, &zv) in delta.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let input = &cache.inputs[li];
        let d_weight = input.t_matmul(&delta)?;
        let d_bias = delta.column_sums();
        let d_input = delta.matmul_t(&layers[li].weight)?;
        grads.push(Dense {
            weight: d_weight,
            bias: d_bias,
        });
        delta = d_input;
    }
    grads.reverse();
    Ok(TowerGradients {
        params: ParamSet { layers: grads },
        input: delta,
    })
}

/// Adagrad: `accum += g²; p -= lr · g / (√accum + ε)`.
///
/// Entries whose gradient is exactly zero are skipped, so untouched
/// parameters and their accumulators stay bitwise unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Default for Adagrad {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epsilon: 1e-8,
        }
    }
}

impl Adagrad {
    pub fn new(learning_rate: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            epsilon,
        }
    }

    pub fn step(&self, params: &mut [f64], grads: &[f64], accum: &mut [f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), accum.len());
        for ((p, &g), a) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
            if g == 0.0 {
                continue;
            }
            *a += g * g;
            *p -= self.learning_rate * g / (a.sqrt() + self.epsilon);
        }
    }
}

/// A parameter set together with its Adagrad accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub params: ParamSet,
    pub accum: ParamSet,
}

impl Tower {
    pub fn new(params: ParamSet) -> Self {
        let accum = ParamSet {
            layers: params
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        };
        Self { params, accum }
    }

    pub fn apply(&mut self, grads: &ParamSet, opt: &Adagrad) -> Result<()> {
        if !self.params.same_shape(grads) {
            return Err(Error::Shape("gradient shape differs from parameters".into()));
        }
        for ((p, g), a) in self
            .params
            .slices_mut()
            .zip(grads.slices())
            .zip(self.accum.slices_mut())
        {
            opt.step(p, g, a);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(input: usize, units: &[usize]) -> TowerArchitecture {
        TowerArchitecture::new(input, units.to_vec()).unwrap()
    }

    fn random_set(a: &TowerArchitecture, seed: u64) -> ParamSet {
        let mut rng = RngState::new(seed);
        let mut p = ParamSet::he_uniform(a, &mut rng);
        for s in p.slices_mut() {
            for v in s {
                *v += rng.uniform(-0.1, 0.1);
            }
        }
        p
    }

    fn random_input(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = RngState::new(seed);
        Matrix::new(n, d, (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn compose_identity_and_linearity() {
        let a = arch(3, &[4, 2]);
        let (b, t, s, s2) = (random_set(&a, 1), random_set(&a, 2), random_set(&a, 3), random_set(&a, 4));
        let z = ParamSet::zeros(&a);
        assert_eq!(compose(&b, &z, &z).unwrap().params(), &b);

        let c1 = compose(&b, &t, &s).unwrap();
        let c2 = compose(&b, &t, &s2).unwrap();
        for i in 0..b.num_params() {
            let lhs = c1.params().get(i) - c2.params().get(i);
            let rhs = s.get(i) - s2.get(i);
            assert!((lhs - rhs).abs() < 1e-12);
        }
        assert!(compose(&b, &ParamSet::zeros(&arch(3, &[5, 2])), &s).is_err());
    }

    #[test]
    fn parameter_set_counts() {
        assert_eq!(stored_param_sets(19, 8), 28);
        assert_eq!(composable_towers(19, 8), 152);
        assert_eq!(stored_param_sets(21, 17), 39);
        assert_eq!(composable_towers(21, 17), 357);
    }

    #[test]
    fn zero_network_gives_zero_logit() {
        let a = arch(5, &[4, 3]);
        let (h, _) = forward(&random_input(3, 5, 9), &ParamSet::zeros(&a)).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(crate::tensor::sigmoid(h[0]), 0.5);
    }

    #[test]
    fn one_unit_hand_evaluation() {
        let p = ParamSet::from_layers(vec![
            Dense {
                weight: Matrix::new(1, 1, vec![2.0]).unwrap(),
                bias: vec![0.0],
            },
            Dense {
                weight: Matrix::new(1, 1, vec![1.0]).unwrap(),
                bias: vec![0.0],
            },
        ])
        .unwrap();
        let (h, _) = forward(&Matrix::new(1, 1, vec![3.0]).unwrap(), &p).unwrap();
        assert_eq!(h, vec![6.0]);
    }

    #[test]
    fn forward_depends_only_on_the_sum() {
        let a = arch(4, &[6, 3]);
        let (b, t, s) = (random_set(&a, 11), random_set(&a, 12), random_set(&a, 13));
        let composed = compose(&b, &t, &s).unwrap();
        let x = random_input(5, 4, 14);
        let h1 = forward_logits(&x, composed.params()).unwrap();
        let h2 = forward_logits(&x, compose(composed.params(), &ParamSet::zeros(&a), &ParamSet::zeros(&a)).unwrap().params()).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn rows_are_independent() {
        let a = arch(4, &[6, 3]);
        let p = random_set(&a, 21);
        let x = random_input(7, 4, 22);
        let full = forward_logits(&x, &p).unwrap();
        for (r, expected) in full.iter().enumerate() {
            let one = forward_logits(&x.select_rows(&[r]), &p).unwrap();
            assert_eq!(one[0].to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let a = arch(4, &[5, 3]);
        let p = random_set(&a, 31);
        let (_, cache) = forward(&random_input(3, 4, 32), &p).unwrap();
        let g = backward(&cache, &p, &[0.0; 3]).unwrap();
        assert!(g.params.is_zero());
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    /// Central differences of `Σ_n c_n h_n` w.r.t. every parameter and input.
    #[test]
    fn backward_matches_finite_differences() {
        let a = arch(3, &[5, 4]);
        let mut p = random_set(&a, 41);
        let x = random_input(4, 3, 42);
        let coef = [0.7, -1.3, 0.4, 2.1];
        let objective = |p: &ParamSet, x: &Matrix| -> f64 {
            forward_logits(x, p)
                .unwrap()
                .iter()
                .zip(&coef)
                .map(|(h, c)| h * c)
                .sum()
        };
        let (_, cache) = forward(&x, &p).unwrap();
        let g = backward(&cache, &p, &coef).unwrap();
        let step = 1e-5;
        for i in 0..p.num_params() {
            let orig = p.get(i);
            p.set(i, orig + step);
            let up = objective(&p, &x);
            p.set(i, orig - step);
            let down = objective(&p, &x);
            p.set(i, orig);
            let numeric = (up - down) / (2.0 * step);
            let analytic = g.params.get(i);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel <= 1e-6, "param {i}: analytic {analytic} numeric {numeric}");
        }
        let mut xm = x.clone();
        for i in 0..xm.data().len() {
            let orig = xm.data()[i];
            xm.data_mut()[i] = orig + step;
            let up = objective(&p, &xm);
            xm.data_mut()[i] = orig - step;
            let down = objective(&p, &xm);
            xm.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = g.input.data()[i];
            assert!((numeric - analytic).abs() <= 1e-6 * numeric.abs().max(1e-3));
        }
    }

    #[test]
    fn adagrad_examples() {
        let opt = Adagrad::new(0.1, 0.0);
        let mut p = vec![1.0];
        let mut acc = vec![0.0];
        opt.step(&mut p, &[0.0], &mut acc);
        assert_eq!((p[0], acc[0]), (1.0, 0.0));

        opt.step(&mut p, &[1.0], &mut acc);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-15);
        opt.step(&mut p, &[1.0], &mut acc);
        let expected = 1.0 - 0.1 - 0.1 / 2f64.sqrt();
        assert!((p[0] - expected).abs() < 1e-15);
        assert_eq!(acc[0], 2.0);
    }

    #[test]
    fn tower_apply_skips_zero_gradients() {
        let a = arch(2, &[2]);
        let mut tower = Tower::new(random_set(&a, 51));
        let before = tower.clone();
        tower.apply(&ParamSet::zeros(&a), &Adagrad::default()).unwrap();
        assert_eq!(tower, before);
    }

    #[test]
    fn architecture_validation() {
        assert!(TowerArchitecture::new(0, vec![4]).is_err());
        assert!(TowerArchitecture::new(4, vec![]).is_err());
        assert_eq!(arch(10, &[512, 256, 128, 128]).num_layers(), 4);
        assert_eq!(arch(3, &[4]).layer_shapes(), vec![(3, 4), (4, 1)]);
    }
}
