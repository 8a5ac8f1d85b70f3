use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Candidate operation on a cell edge. Every operation maps `ℝ^d → ℝ^d` and
/// sends the zero vector to zero, so a node whose incoming weights are all
/// zero feeds exact zeros downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Identity,
    /// `x W` with a `d×d` matrix.
    Linear,
    LinearTanh,
    LinearRelu,
    /// `x ⊙ s` with a length-`d` scale vector.
    ElementwiseScale,
}

/// The desk-scale search space, in canonical column order.
pub fn toy_op_set() -> Vec<OpKind> {
    vec![
        OpKind::Identity,
        OpKind::Linear,
        OpKind::LinearTanh,
        OpKind::LinearRelu,
        OpKind::ElementwiseScale,
    ]
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::Linear => "linear",
            OpKind::LinearTanh => "linear_tanh",
            OpKind::LinearRelu => "linear_relu",
            OpKind::ElementwiseScale => "elementwise_scale",
        }
    }

    pub fn param_shapes(self, dim: usize) -> Vec<Vec<usize>> {
        match self {
            OpKind::Identity => vec![],
            OpKind::Linear | OpKind::LinearTanh | OpKind::LinearRelu => vec![vec![dim, dim]],
            OpKind::ElementwiseScale => vec![vec![dim]],
        }
    }

    /// Fresh parameters, one vector per shape of [`OpKind::param_shapes`].
    pub fn init_params<R: Rng>(self, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
        match self {
            OpKind::Identity => vec![],
            OpKind::Linear | OpKind::LinearTanh | OpKind::LinearRelu => {
                let bound = 1.0 / (dim as f64).sqrt();
                vec![(0..dim * dim).map(|_| rng.random_range(-bound..bound)).collect()]
            }
            OpKind::ElementwiseScale => vec![vec![1.0; dim]],
        }
    }

    /// Applies the operation to `x` of shape `[batch, d]`.
    pub fn apply(self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        match self {
            OpKind::Identity => Ok(x),
            OpKind::Linear => tape.matmul(x, params[0]),
            OpKind::LinearTanh => {
                let h = tape.matmul(x, params[0])?;
                tape.tanh(h)
            }
            OpKind::LinearRelu => {
                let h = tape.matmul(x, params[0])?;
                tape.relu(h)
            }
            OpKind::ElementwiseScale => tape.mul_row(x, params[0]),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        toy_op_set()
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown operation {s:?}")))
    }
}
