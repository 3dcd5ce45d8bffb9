use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

/// Two-layer perceptron `x -> gelu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let std = 1.0 / (rows as f64).sqrt();
            Tensor::matrix(rows, cols, rng::gaussian_vec(rng, rows * cols, std)).expect("shape")
        };
        Self {
            w1: mat(input, hidden, rng),
            b1: Tensor::vector(vec![0.0; hidden]),
            w2: mat(hidden, output, rng),
            b2: Tensor::vector(vec![0.0; output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub(crate) fn on_tape(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut add = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MlpVars {
            w1: add(&self.w1),
            b1: add(&self.b1),
            w2: add(&self.w2),
            b2: add(&self.b2),
        }
    }

    pub(crate) fn apply(tape: &mut Tape, vars: MlpVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars.w1)?;
        let h = tape.add_bias(h, vars.b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, vars.w2)?;
        tape.add_bias(o, vars.b2)
    }

    /// Row-wise forward pass of `x` (`n x input`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::dim("mlp", x.shape(), self.w1.shape()));
        }
        let mut tape = Tape::new();
        let vars = self.on_tape(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = Self::apply(&mut tape, vars, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("mlp", &[x.len()], self.w1.shape()));
        }
        Ok(self
            .forward(&Tensor::matrix(1, x.len(), x.to_vec())?)?
            .into_data())
    }
}

/// The visual and text projection heads into the shared `D`-dim space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub vis: Mlp,
    pub text: Mlp,
}

impl ProjectionHeads {
    /// Hidden width equals the output dimension `dim`.
    pub fn init(d_v: usize, d_t: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "projection-heads");
        Self {
            vis: Mlp::init(d_v, dim, dim, &mut rng),
            text: Mlp::init(d_t, dim, dim, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.vis.output_dim()
    }

    pub fn project_visual(&self, z_v: &[f64]) -> Result<Vec<f64>> {
        self.vis.forward_one(z_v)
    }

    pub fn project_text(&self, z_t: &[f64]) -> Result<Vec<f64>> {
        self.text.forward_one(z_t)
    }

    pub fn num_params(&self) -> usize {
        self.vis.num_params() + self.text.num_params()
    }

    pub fn round_to_f32(&mut self) {
        for t in self
            .vis
            .tensors_mut()
            .into_iter()
            .chain(self.text.tensors_mut())
        {
            t.round_to_f32();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gelu, grad_check};

    fn heads() -> ProjectionHeads {
        ProjectionHeads::init(3, 4, 5, 7)
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut h = heads();
        h.vis.w2 = Tensor::zeros(h.vis.w2.shape());
        assert_eq!(h.project_visual(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn matches_layer_by_layer_oracle() {
        let h = heads();
        let x = [0.3, -1.2, 2.0];
        let m = &h.vis;
        let hidden: Vec<f64> = (0..m.w1.cols())
            .map(|j| {
                let pre: f64 = (0..3)
                    .map(|i| x[i] * m.w1.data()[i * m.w1.cols() + j])
                    .sum::<f64>()
                    + m.b1.data()[j];
                gelu(pre)
            })
            .collect();
        let out: Vec<f64> = (0..m.w2.cols())
            .map(|k| {
                (0..hidden.len())
                    .map(|j| hidden[j] * m.w2.data()[j * m.w2.cols() + k])
                    .sum::<f64>()
                    + m.b2.data()[k]
            })
            .collect();
        let got = h.project_visual(&x).unwrap();
        for (a, b) in got.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            heads().project_text(&[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn head_gradient_passes_check() {
        let h = heads();
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.2, 1.5, 0.3, -0.7]).unwrap();
        let params: Vec<Tensor> = h.vis.tensors().iter().map(|t| (*t).clone()).collect();
        let err = grad_check(&params, 1e-5, |tape, vars| {
            let mv = MlpVars {
                w1: vars[0],
                b1: vars[1],
                w2: vars[2],
                b2: vars[3],
            };
            let xv = tape.constant(x.clone());
            let out = Mlp::apply(tape, mv, xv)?;
            let out = tape.gelu(out);
            Ok(tape.sum_squares(out))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
