use rand::Rng;

use super::init::kaiming_init;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Anything that owns trainable tensors.
///
/// `named_params` and `params_mut` must list tensors in the same order as
/// the module's `bind` registers them on a tape.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Dense layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub trainable: bool,
}

/// Tape handles for one [`LinearLayer`].
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.shape()[0] {
            return Err(Error::dim("linear", format!("weight {:?} with bias {:?}", weight.shape(), bias.shape())));
        }
        Ok(LinearLayer { weight, bias, trainable: true })
    }

    /// Kaiming-normal weights, zero bias.
    pub fn kaiming(in_size: usize, out_size: usize, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: kaiming_init(&[in_size, out_size], rng),
            bias: Tensor::zeros(&[out_size]),
            trainable: true,
        }
    }

    pub fn in_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_size(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone(), self.trainable),
            bias: tape.leaf(self.bias.clone(), self.trainable),
        }
    }

    /// Binds to existing handles, taken from `vars` in `named_params` order.
    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<BoundLinear> {
        Ok(BoundLinear { weight: next_var(vars)?, bias: next_var(vars)? })
    }
}

pub(crate) fn next_var(vars: &mut dyn Iterator<Item = Var>) -> Result<Var> {
    vars.next().ok_or_else(|| Error::Contract("fewer handles than parameters".into()))
}

impl Module for LinearLayer {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `x[B, N] · W + b`, bias broadcast over the batch.
pub fn linear_forward(tape: &mut Tape, layer: &BoundLinear, x: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(layer.weight);
    if xs.len() != 2 || xs[1] != ws[0] {
        return Err(Error::dim("linear_forward", format!("input {xs:?} for weight {ws:?}")));
    }
    let xw = tape.matmul(x, layer.weight)?;
    tape.add_bias(xw, layer.bias)
}

/// Linear layer whose weight and bias are supplied per batch element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperLinearLayer {
    pub in_size: usize,
    pub out_size: usize,
}

impl HyperLinearLayer {
    /// Elements in one generated weight matrix.
    pub fn weight_len(&self) -> usize {
        self.in_size * self.out_size
    }
}

/// `ψ_i = x_i · W_i + b_i` for every batch element `i`.
///
/// `w_h` is `[B, N, O]`, `b_h` is `[B, O]`.
pub fn hyper_linear_forward(tape: &mut Tape, layer: &HyperLinearLayer, x: Var, w_h: Var, b_h: Var) -> Result<Var> {
    let (n, o) = (layer.in_size, layer.out_size);
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w_h).to_vec();
    let bs = tape.shape(b_h).to_vec();
    if xs.len() != 2 || xs[1] != n {
        return Err(Error::dim("hyper_linear_forward", format!("input {xs:?} for in_size {n}")));
    }
    let batch = xs[0];
    if ws != [batch, n, o] || bs != [batch, o] {
        return Err(Error::dim(
            "hyper_linear_forward",
            format!("input {xs:?}, weights {ws:?}, biases {bs:?}; expected [{batch}, {n}, {o}] and [{batch}, {o}]"),
        ));
    }
    let x3 = tape.reshape(x, &[batch, 1, n])?;
    let prod = tape.bmm(x3, w_h)?;
    let prod = tape.reshape(prod, &[batch, o])?;
    tape.add(prod, b_h)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MlpLayer {
    Internal(LinearLayer),
    External(HyperLinearLayer),
}

impl MlpLayer {
    pub fn in_size(&self) -> usize {
        match self {
            MlpLayer::Internal(l) => l.in_size(),
            MlpLayer::External(h) => h.in_size,
        }
    }

    pub fn out_size(&self) -> usize {
        match self {
            MlpLayer::Internal(l) => l.out_size(),
            MlpLayer::External(h) => h.out_size,
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self, MlpLayer::External(_))
    }
}

/// Stack of layers with ReLU between them and no activation on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<Option<BoundLinear>>,
}

impl BoundMlp {
    /// Handles of internal layers in order.
    pub fn linear_handles(&self) -> Vec<BoundLinear> {
        self.layers.iter().flatten().copied().collect()
    }
}

impl Mlp {
    pub fn new(layers: Vec<MlpLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_size() != pair[1].in_size() {
                return Err(Error::dim(
                    "mlp",
                    format!("layer widths {} -> {} do not chain", pair[0].out_size(), pair[1].in_size()),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    /// `sizes = [in, h1, ..., out]`; layer `i` is external when `external[i]`.
    pub fn with_mask(sizes: &[usize], external: &[bool], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || external.len() != sizes.len() - 1 {
            return Err(Error::Contract(format!(
                "{} sizes need {} mask entries, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                external.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(external)
            .map(|(w, &ext)| {
                if ext {
                    MlpLayer::External(HyperLinearLayer { in_size: w[0], out_size: w[1] })
                } else {
                    MlpLayer::Internal(LinearLayer::kaiming(w[0], w[1], rng))
                }
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn internal(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::with_mask(sizes, &vec![false; sizes.len().saturating_sub(1)], rng)
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn in_size(&self) -> usize {
        self.layers[0].in_size()
    }

    pub fn out_size(&self) -> usize {
        self.layers[self.layers.len() - 1].out_size()
    }

    pub fn external_mask(&self) -> Vec<bool> {
        self.layers.iter().map(MlpLayer::is_external).collect()
    }

    /// External layers in order, with their position in the stack.
    pub fn external_layers(&self) -> Vec<(usize, HyperLinearLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                MlpLayer::External(h) => Some((i, *h)),
                MlpLayer::Internal(_) => None,
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                MlpLayer::Internal(lin) => Some(lin.bind(tape)),
                MlpLayer::External(_) => None,
            })
            .collect();
        BoundMlp { layers }
    }

    /// Binds to existing handles, taken from `vars` in `named_params` order.
    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<BoundMlp> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                MlpLayer::Internal(lin) => lin.bind_vars(vars).map(Some),
                MlpLayer::External(_) => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(BoundMlp { layers })
    }

    /// Handles of the weight matrices (not biases) of internal layers.
    pub fn bound_weights(bound: &BoundMlp) -> Vec<Var> {
        bound.layers.iter().flatten().map(|b| b.weight).collect()
    }

    /// Runs the stack. `external` supplies `(w_h, b_h)` for each external
    /// layer in order.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var, external: &[(Var, Var)]) -> Result<Var> {
        let n_ext = self.layers.iter().filter(|l| l.is_external()).count();
        if external.len() != n_ext {
            return Err(Error::Contract(format!(
                "MLP has {n_ext} external layers but {} parameter sets were supplied",
                external.len()
            )));
        }
        let mut ext = external.iter();
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (layer, b)) in self.layers.iter().zip(&bound.layers).enumerate() {
            h = match (layer, b) {
                (MlpLayer::Internal(_), Some(b)) => linear_forward(tape, b, h)?,
                (MlpLayer::External(hl), None) => {
                    let &(w, bias) = ext.next().expect("count checked above");
                    hyper_linear_forward(tape, hl, h, w, bias)?
                }
                _ => return Err(Error::Contract("bound MLP does not match its layers".into())),
            };
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let MlpLayer::Internal(l) = layer {
                for (name, t) in l.named_params() {
                    out.push((format!("{i}.{name}"), t));
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                MlpLayer::Internal(lin) => lin.params_mut(),
                MlpLayer::External(_) => Vec::new(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 0);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let layer = LinearLayer::new(Tensor::identity(3), Tensor::zeros(&[3])).unwrap();
        let mut tape = Tape::new();
        let b = layer.bind(&mut tape);
        let x_val = random(&[4, 3], 1);
        let x = tape.constant(x_val.clone());
        let y = linear_forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y), &x_val);
    }

    #[test]
    fn zero_input_yields_bias_rows() {
        let bias = Tensor::vector(vec![0.5, -1.0]);
        let layer = LinearLayer::new(random(&[3, 2], 2), bias).unwrap();
        let mut tape = Tape::new();
        let b = layer.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = linear_forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn linear_matches_scalar_loop() {
        let (w, bias, xv) = (random(&[3, 2], 3), random(&[2], 4), random(&[5, 3], 5));
        let layer = LinearLayer::new(w.clone(), bias.clone()).unwrap();
        let mut tape = Tape::new();
        let b = layer.bind(&mut tape);
        let x = tape.constant(xv.clone());
        let y = linear_forward(&mut tape, &b, x).unwrap();
        for r in 0..5 {
            for o in 0..2 {
                let mut expect = 0.0;
                for k in 0..3 {
                    expect += xv.data()[r * 3 + k] * w.data()[k * 2 + o];
                }
                expect += bias.data()[o];
                assert!((tape.value(y).data()[r * 2 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let layer = LinearLayer::new(Tensor::zeros(&[3, 2]), Tensor::zeros(&[2])).unwrap();
        let mut tape = Tape::new();
        let b = layer.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(linear_forward(&mut tape, &b, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hyper_linear_identity() {
        let layer = HyperLinearLayer { in_size: 3, out_size: 3 };
        let mut eyes = Vec::new();
        for _ in 0..2 {
            eyes.extend(Tensor::identity(3).into_data());
        }
        let mut tape = Tape::new();
        let xv = random(&[2, 3], 6);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::new(vec![2, 3, 3], eyes).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let y = hyper_linear_forward(&mut tape, &layer, x, w, b).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn hyper_linear_rejects_batch_mismatch() {
        let layer = HyperLinearLayer { in_size: 2, out_size: 1 };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 1]));
        let b = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(hyper_linear_forward(&mut tape, &layer, x, w, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mlp_rejects_unchained_widths() {
        let a = MlpLayer::Internal(LinearLayer::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3])).unwrap());
        let b = MlpLayer::External(HyperLinearLayer { in_size: 4, out_size: 1 });
        assert!(Mlp::new(vec![a, b]).is_err());
    }

    #[test]
    fn mlp_forward_requires_matching_external_params() {
        let mut r = rng::stream(9, 0);
        let mlp = Mlp::with_mask(&[2, 3, 1], &[false, true], &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(mlp.forward(&mut tape, &bound, x, &[]), Err(Error::Contract(_))));
        assert_eq!(mlp.named_params().len(), 2);
        assert_eq!(mlp.external_layers(), vec![(1, HyperLinearLayer { in_size: 3, out_size: 1 })]);
    }
}
