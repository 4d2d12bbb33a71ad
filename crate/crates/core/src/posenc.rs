//! Relative-position encodings folded into the attention relation vector.
//!
//! With the multiplier enabled the argument of the weight encoding becomes
//! `δ_mul(p_i − p_j) ⊙ γ(q_i, k_j) + δ_bias(p_i − p_j)`; without it only the
//! additive bias is applied.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{NeighborTable, Point3};
use crate::numerics::{Mlp2, Params, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncMode {
    BiasOnly,
    MultiplierAndBias,
}

impl FromStr for PosEncMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bias_only" | "bias" => Ok(Self::BiasOnly),
            "multiplier_and_bias" | "multiplier" => Ok(Self::MultiplierAndBias),
            other => Err(Error::InvalidConfig(format!("unknown position encoding mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosEncConfig {
    pub mode: PosEncMode,
    /// Width of the relation vector, and so of both encoders' outputs.
    pub channels: usize,
    pub hidden: usize,
}

impl PosEncConfig {
    pub fn new(mode: PosEncMode, channels: usize) -> Self {
        Self {
            mode,
            channels,
            hidden: channels,
        }
    }
}

/// The two relative-position MLPs, each `3 → hidden → channels`.
#[derive(Clone, Debug)]
pub struct PositionEncoding {
    pub config: PosEncConfig,
    pub bias: Mlp2,
    pub multiplier: Option<Mlp2>,
}

impl PositionEncoding {
    pub fn new(params: &mut Params, name: &str, config: PosEncConfig, rng: &mut Rng) -> Self {
        let bias = Mlp2::new(params, &format!("{name}.bias"), 3, config.hidden, config.channels, true, rng);
        let multiplier = (config.mode == PosEncMode::MultiplierAndBias).then(|| {
            Mlp2::new(params, &format!("{name}.mul"), 3, config.hidden, config.channels, true, rng)
        });
        Self {
            config,
            bias,
            multiplier,
        }
    }

    pub fn encode_bias(&self, tape: &mut Tape, params: &Params, rel_pos: Var) -> Result<Var> {
        check_rel_pos(tape, rel_pos)?;
        self.bias.forward(tape, params, rel_pos)
    }

    pub fn encode_multiplier(&self, tape: &mut Tape, params: &Params, rel_pos: Var) -> Result<Option<Var>> {
        check_rel_pos(tape, rel_pos)?;
        self.multiplier
            .as_ref()
            .map(|m| m.forward(tape, params, rel_pos))
            .transpose()
    }

    /// Composes the relation vector with the position terms. Returns the
    /// composed relation and the bias encoding (reusable on the value path).
    pub fn compose_relation(
        &self,
        tape: &mut Tape,
        params: &Params,
        relation: Var,
        rel_pos: Var,
    ) -> Result<(Var, Var)> {
        let (rs, ps) = (tape.value(relation).shape().to_vec(), tape.value(rel_pos).shape().to_vec());
        if tape.value(relation).rows() != tape.value(rel_pos).rows()
            || tape.value(relation).cols() != self.config.channels
        {
            return Err(Error::shape("compose_relation", &rs, &ps));
        }
        let bias = self.encode_bias(tape, params, rel_pos)?;
        let scaled = match self.encode_multiplier(tape, params, rel_pos)? {
            Some(mul) => tape.mul(mul, relation)?,
            None => relation,
        };
        Ok((tape.add(scaled, bias)?, bias))
    }

    pub fn param_count(&self) -> usize {
        self.bias.param_count() + self.multiplier.as_ref().map_or(0, Mlp2::param_count)
    }
}

fn check_rel_pos(tape: &Tape, rel_pos: Var) -> Result<()> {
    let v = tape.value(rel_pos);
    if v.cols() != 3 {
        return Err(Error::shape("position encoding", v.shape(), &[v.rows(), 3]));
    }
    Ok(())
}

/// `p_i − p_j` for every edge `(i, j)` of the neighbor table, `E × 3`.
pub fn relative_positions(
    queries: &[Point3],
    reference: &[Point3],
    neighbors: &NeighborTable,
) -> Tensor {
    let mut data = Vec::with_capacity(neighbors.num_edges() * 3);
    for (i, q) in queries.iter().enumerate() {
        for &j in neighbors.row(i) {
            let p = reference[j];
            data.extend_from_slice(&[q[0] - p[0], q[1] - p[1], q[2] - p[2]]);
        }
    }
    Tensor::matrix(neighbors.num_edges(), 3, data).expect("E×3 by construction")
}
