//! Layers built from graph operations.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::random::RandomSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::None => x,
        }
    }
}

/// Affine map `x·W + b`, with `W` stored input-major (in × out).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[input, output], input, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[output], input, rng)?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        linear(g, x, w, b)
    }
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Stack of linear layers; `hidden` activation between layers and `last`
/// after the final one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub last: Activation,
}

impl Mlp {
    /// `widths` lists every layer's output width; the first layer reads `input`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(TensorError::Config(format!("MLP `{name}` needs at least one layer")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), fan_in, w, rng)?);
            fan_in = w;
        }
        Ok(Self {
            layers,
            hidden,
            last,
        })
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            let act = if i + 1 == n { self.last } else { self.hidden };
            h = act.apply(g, h);
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0]));
        let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(Tensor::row(&[1.0, 0.0]));
        let w = g.constant(Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let b = g.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 1.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            linear(&mut g, x, w, b),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn empty_mlp_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = RandomSource::new(0);
        let err = Mlp::new(&mut store, "m", 2, &[], Activation::Relu, Activation::None, &mut rng);
        assert!(matches!(err, Err(TensorError::Config(_))));
    }

    #[test]
    fn zero_weight_mlp_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = RandomSource::new(0);
        let mlp = Mlp::new(&mut store, "m", 2, &[2, 2], Activation::Relu, Activation::None, &mut rng)
            .unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.7, -3.0]));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn tanh_mlp_is_bounded() {
        let mut store = ParamStore::new();
        let mut rng = RandomSource::new(5);
        let mlp = Mlp::new(&mut store, "m", 4, &[16, 3], Activation::Relu, Activation::Tanh, &mut rng)
            .unwrap();
        let mut g = Graph::new();
        let data = (0..400).map(|_| rng.uniform(-50.0, 50.0)).collect();
        let x = g.constant(Tensor::new(&[100, 4], data).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1.0 || v.abs() == 1.0));
        assert!(g.value(y).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn relu_elementwise() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }
}
