use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{relu_inplace, Linear, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Fully connected ReLU network owning its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub store: ParamStore,
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let mut store = ParamStore::new();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { store, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_impl(tape, x, false)
    }

    /// Forward pass with parameters recorded as constants.
    pub fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_impl(tape, x, true)
    }

    fn forward_impl(&self, tape: &mut Tape, x: Var, frozen: bool) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, &self.store, h, frozen)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(&self.store, &h)?;
            if i + 1 < self.layers.len() {
                relu_inplace(&mut h);
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.apply(x)?.argmax_rows())
    }

    /// Mean cross-entropy of the logits against `labels`.
    pub fn nll(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = self.forward_frozen(&mut tape, xv)?;
        let ce = tape.softmax_cross_entropy(logits, labels)?;
        Ok(tape.value(ce).item())
    }
}
