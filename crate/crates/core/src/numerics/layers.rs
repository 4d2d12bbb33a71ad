//! Parameterized building blocks recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::numerics::{ParamId, Params, Tape, Tensor, Var};
use crate::rng::Rng;

pub const NORM_EPS: f64 = 1e-5;

/// Row-wise affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = bias.then(|| params.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = self.bias.map(|b| tape.param(params, b));
        linear(tape, x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// `x W (+ bias)` with shape checking that reports both operands.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (xs, ws) = (tape.value(x).shape().to_vec(), tape.value(weight).shape().to_vec());
    if ws.len() != 2 || tape.value(x).cols() != ws[0] {
        return Err(Error::shape("linear", &xs, &ws));
    }
    let y = tape.matmul(x, weight)?;
    match bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Per-feature normalization over the rows of one call, with learnable
/// scale (initialized to 1) and shift (initialized to 0).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.batch_norm(x, g, b, NORM_EPS)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Grouped linear map `R^c -> R^g`: group `l` of the input is projected by
/// its own length-`c/g` weight vector. Holds exactly `c` scalars.
#[derive(Clone, Debug)]
pub struct GroupedLinear {
    pub weight: ParamId,
    pub channels: usize,
    pub groups: usize,
}

impl GroupedLinear {
    pub fn new(
        params: &mut Params,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_groups(channels, groups)?;
        let weight = params.add_uniform(
            format!("{name}.weight"),
            &[channels],
            channels / groups,
            rng,
        );
        Ok(Self {
            weight,
            channels,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        tape.grouped_linear(x, w, self.groups)
    }

    pub fn param_count(&self) -> usize {
        self.channels
    }
}

pub(crate) fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || groups > channels || !channels.is_multiple_of(groups) {
        return Err(Error::GroupMismatch { channels, groups });
    }
    Ok(())
}

/// Fixed, parameter-free encoding that sums each channel group and divides by
/// `sqrt(c/g)`; turns grouped vector attention into multi-head scalar
/// attention when the relation is the elementwise product.
pub fn msa_weight_encoding(tape: &mut Tape, relation: Var, groups: usize) -> Result<Var> {
    let c = tape.value(relation).cols();
    check_groups(c, groups)?;
    let cg = (c / groups) as f64;
    tape.group_sum(relation, groups, 1.0 / cg.sqrt())
}

/// Two-layer perceptron: linear, optional normalization, ReLU, linear.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub norm: Option<BatchNorm>,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        norm: bool,
        rng: &mut Rng,
    ) -> Self {
        let first = Linear::new(params, &format!("{name}.fc1"), in_dim, hidden, true, rng);
        let norm = norm.then(|| BatchNorm::new(params, &format!("{name}.norm"), hidden));
        let second = Linear::new(params, &format!("{name}.fc2"), hidden, out_dim, true, rng);
        Self {
            first,
            norm,
            second,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let in_dim = tape.value(x).cols();
        if in_dim != self.first.in_dim {
            return Err(Error::shape(
                "mlp2",
                tape.value(x).shape(),
                &[self.first.in_dim, self.second.out_dim],
            ));
        }
        let mut h = self.first.forward(tape, params, x)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(tape, params, h)?;
        }
        let h = tape.relu(h);
        self.second.forward(tape, params, h)
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count()
            + self.norm.as_ref().map_or(0, BatchNorm::param_count)
            + self.second.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_scalar_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let w = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![1.0]));
        let y = linear(&mut tape, x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
    }

    #[test]
    fn linear_identity_reproduces_input() {
        let mut tape = Tape::new();
        let data = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let x = tape.leaf(data.clone());
        let w = tape.leaf(Tensor::identity(3));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = linear(&mut tape, x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &data);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 2]));
        let msg = linear(&mut tape, x, w, None).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn grouped_linear_hand_example() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let y = tape.grouped_linear(r, p, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
        assert!(matches!(
            tape.grouped_linear(r, p, 3),
            Err(Error::GroupMismatch { channels: 4, groups: 3 })
        ));
    }

    #[test]
    fn msa_encoding_hand_example() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = msa_weight_encoding(&mut tape, r, 2).unwrap();
        let s = 2f64.sqrt();
        let got = tape.value(y).data();
        assert!((got[0] - 3.0 / s).abs() < 1e-15 && (got[1] - 7.0 / s).abs() < 1e-15);
        let y = msa_weight_encoding(&mut tape, r, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(msa_weight_encoding(&mut tape, r, 3).is_err());
    }

    #[test]
    fn mlp2_zero_weights_give_second_bias() {
        let mut params = Params::new();
        let mut rng = rng::stream(0, rng::STREAM_PARAMS);
        let mlp = Mlp2::new(&mut params, "m", 3, 4, 2, true, &mut rng);
        for id in [mlp.first.weight, mlp.first.bias.unwrap(), mlp.second.weight] {
            params.value_mut(id).data_mut().fill(0.0);
        }
        *params.value_mut(mlp.second.bias.unwrap()) = Tensor::vector(vec![0.5, -1.5]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 3, (0..9).map(f64::from).collect()).unwrap());
        let y = mlp.forward(&mut tape, &params, x).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(y).row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn mlp2_identity_passthrough_without_norm() {
        let mut params = Params::new();
        let mut rng = rng::stream(0, rng::STREAM_PARAMS);
        let mlp = Mlp2::new(&mut params, "m", 3, 3, 3, false, &mut rng);
        *params.value_mut(mlp.first.weight) = Tensor::identity(3);
        *params.value_mut(mlp.second.weight) = Tensor::identity(3);
        params.value_mut(mlp.first.bias.unwrap()).data_mut().fill(0.0);
        params.value_mut(mlp.second.bias.unwrap()).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let input = Tensor::matrix(1, 3, vec![0.25, 1.0, 3.0]).unwrap();
        let x = tape.leaf(input.clone());
        let y = mlp.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn batch_norm_normalizes_columns() {
        let mut params = Params::new();
        let bn = BatchNorm::new(&mut params, "bn", 2);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 60.0]).unwrap());
        let y = bn.forward(&mut tape, &params, x).unwrap();
        let v = tape.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| v.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
