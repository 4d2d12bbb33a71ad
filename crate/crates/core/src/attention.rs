//! Local attention over ragged reference sets.
//!
//! Four mechanisms share the query/key/value projections:
//!
//! * scalar attention: one dot-product weight per (point, neighbor);
//! * multi-head scalar attention: scalar attention on `g` channel slices;
//! * vector attention: a `c`-wide weight vector per neighbor from a learned
//!   encoding of the relation `γ(q_i, k_j)`, applied channel by channel;
//! * grouped vector attention: the encoding emits `g` weights and every
//!   channel of a group shares its group's weight.
//!
//! Reference sets come from a [`NeighborTable`] whose rows are the edges of
//! each query point; softmax always runs over one row, per weight column.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{NeighborTable, Point3};
use crate::numerics::layers::check_groups;
use crate::numerics::{msa_weight_encoding, BatchNorm, GroupedLinear, Linear, Params, Tape, Var};
use crate::posenc::{relative_positions, PosEncConfig, PositionEncoding};
use crate::rng::Rng;
use crate::spatial::{GridSpec, DEFAULT_K};

/// How a query and a key combine into a relation vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `q_i − k_j`.
    #[default]
    Subtract,
    /// `q_i ⊙ k_j`; with the fixed group-sum encoding this reproduces scaled
    /// dot-product attention per group.
    Multiply,
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subtract" => Ok(Self::Subtract),
            "multiply" => Ok(Self::Multiply),
            other => Err(Error::InvalidConfig(format!("unknown relation `{other}`"))),
        }
    }
}

/// The ablated weight-encoding functions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightEncodingKind {
    /// Fixed group sum scaled by `1/sqrt(c/g)`.
    #[serde(rename = "MSA")]
    Msa,
    /// Dense linear `c → g`.
    #[serde(rename = "L")]
    Linear,
    /// Grouped linear `c → g`.
    #[serde(rename = "GL")]
    GroupedLinear,
    #[serde(rename = "L+N+A+L")]
    LinearNormActLinear,
    #[default]
    #[serde(rename = "GL+N+A+L")]
    GroupedLinearNormActLinear,
}

impl WeightEncodingKind {
    pub const ALL: [Self; 5] = [
        Self::Msa,
        Self::Linear,
        Self::GroupedLinear,
        Self::LinearNormActLinear,
        Self::GroupedLinearNormActLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Msa => "MSA",
            Self::Linear => "L",
            Self::GroupedLinear => "GL",
            Self::LinearNormActLinear => "L+N+A+L",
            Self::GroupedLinearNormActLinear => "GL+N+A+L",
        }
    }
}

impl fmt::Display for WeightEncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightEncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Where each point's reference set comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReferenceMode {
    /// `k` nearest neighbors, self included.
    Knn { k: usize },
    /// Members of the point's own grid cell. Blocks alternate between the
    /// unshifted lattice and the one shifted by half a cell.
    Grid { grid_size: f64 },
}

impl Default for ReferenceMode {
    fn default() -> Self {
        Self::Knn { k: DEFAULT_K }
    }
}

impl ReferenceMode {
    /// Builds the reference sets of a cloud for the `block`-th block of a
    /// stage. kNN uses `min(k, n)` neighbors so tiny stages still work.
    pub fn build(&self, positions: &[Point3], block: usize) -> Result<NeighborTable> {
        match *self {
            Self::Knn { k } => {
                let k = k.min(positions.len());
                crate::spatial::knn_positions(positions, positions, k)
            }
            Self::Grid { grid_size } => {
                let mut spec = GridSpec::new(grid_size);
                if block % 2 == 1 {
                    spec = spec.shifted_half();
                }
                Ok(crate::spatial::partition_positions(positions, &spec)?.member_table())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub groups: usize,
    pub relation: Relation,
    pub weight_encoding: WeightEncodingKind,
    pub reference_mode: ReferenceMode,
    /// Adds the bias position encoding to gathered values before
    /// aggregation. Off by default.
    pub value_position: bool,
}

impl AttentionConfig {
    pub fn new(channels: usize, groups: usize) -> Self {
        Self {
            channels,
            groups,
            relation: Relation::Subtract,
            weight_encoding: WeightEncodingKind::default(),
            reference_mode: ReferenceMode::default(),
            value_position: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_groups(self.channels, self.groups)?;
        match self.reference_mode {
            ReferenceMode::Knn { k: 0 } => Err(Error::InvalidConfig("k must be positive".into())),
            ReferenceMode::Grid { grid_size } if !(grid_size > 0.0) => {
                Err(Error::InvalidGrid(format!("grid_size must be positive, got {grid_size}")))
            }
            _ => Ok(()),
        }
    }
}

/// A configured weight encoding `ω: R^c → R^out`.
#[derive(Clone, Debug)]
pub enum WeightEncoding {
    Msa { groups: usize },
    Linear(Linear),
    GroupedLinear(GroupedLinear),
    LinearNormActLinear {
        first: Linear,
        norm: BatchNorm,
        second: Linear,
    },
    GroupedLinearNormActLinear {
        first: GroupedLinear,
        norm: BatchNorm,
        second: Linear,
    },
}

/// Builds `ω` for `c` input channels and `g` output weights.
pub fn make_weight_encoding(
    params: &mut Params,
    name: &str,
    kind: WeightEncodingKind,
    channels: usize,
    groups: usize,
    rng: &mut Rng,
) -> Result<WeightEncoding> {
    check_groups(channels, groups)?;
    Ok(match kind {
        WeightEncodingKind::Msa => WeightEncoding::Msa { groups },
        WeightEncodingKind::Linear => {
            WeightEncoding::Linear(Linear::new(params, name, channels, groups, true, rng))
        }
        WeightEncodingKind::GroupedLinear => {
            WeightEncoding::GroupedLinear(GroupedLinear::new(params, name, channels, groups, rng)?)
        }
        WeightEncodingKind::LinearNormActLinear => WeightEncoding::LinearNormActLinear {
            first: Linear::new(params, &format!("{name}.fc1"), channels, groups, true, rng),
            norm: BatchNorm::new(params, &format!("{name}.norm"), groups),
            second: Linear::new(params, &format!("{name}.fc2"), groups, groups, true, rng),
        },
        WeightEncodingKind::GroupedLinearNormActLinear => WeightEncoding::GroupedLinearNormActLinear {
            first: GroupedLinear::new(params, &format!("{name}.gl"), channels, groups, rng)?,
            norm: BatchNorm::new(params, &format!("{name}.norm"), groups),
            second: Linear::new(params, &format!("{name}.fc"), groups, groups, true, rng),
        },
    })
}

impl WeightEncoding {
    pub fn kind(&self) -> WeightEncodingKind {
        match self {
            Self::Msa { .. } => WeightEncodingKind::Msa,
            Self::Linear(_) => WeightEncodingKind::Linear,
            Self::GroupedLinear(_) => WeightEncodingKind::GroupedLinear,
            Self::LinearNormActLinear { .. } => WeightEncodingKind::LinearNormActLinear,
            Self::GroupedLinearNormActLinear { .. } => WeightEncodingKind::GroupedLinearNormActLinear,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Msa { groups } => *groups,
            Self::Linear(l) => l.out_dim,
            Self::GroupedLinear(g) => g.groups,
            Self::LinearNormActLinear { second, .. } | Self::GroupedLinearNormActLinear { second, .. } => {
                second.out_dim
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, relation: Var) -> Result<Var> {
        match self {
            Self::Msa { groups } => msa_weight_encoding(tape, relation, *groups),
            Self::Linear(l) => l.forward(tape, params, relation),
            Self::GroupedLinear(g) => g.forward(tape, params, relation),
            Self::LinearNormActLinear { first, norm, second } => {
                let h = first.forward(tape, params, relation)?;
                let h = norm.forward(tape, params, h)?;
                let h = tape.relu(h);
                second.forward(tape, params, h)
            }
            Self::GroupedLinearNormActLinear { first, norm, second } => {
                let h = first.forward(tape, params, relation)?;
                let h = norm.forward(tape, params, h)?;
                let h = tape.relu(h);
                second.forward(tape, params, h)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Msa { .. } => 0,
            Self::Linear(l) => l.param_count(),
            Self::GroupedLinear(g) => g.param_count(),
            Self::LinearNormActLinear { first, norm, second } => {
                first.param_count() + norm.param_count() + second.param_count()
            }
            Self::GroupedLinearNormActLinear { first, norm, second } => {
                first.param_count() + norm.param_count() + second.param_count()
            }
        }
    }
}

/// Query, key and value projections `c → c`.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl QkvProjection {
    pub fn new(params: &mut Params, name: &str, in_dim: usize, channels: usize, rng: &mut Rng) -> Self {
        Self {
            query: Linear::new(params, &format!("{name}.q"), in_dim, channels, true, rng),
            key: Linear::new(params, &format!("{name}.k"), in_dim, channels, true, rng),
            value: Linear::new(params, &format!("{name}.v"), in_dim, channels, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.query.forward(tape, params, x)?,
            self.key.forward(tape, params, x)?,
            self.value.forward(tape, params, x)?,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count() + self.key.param_count() + self.value.param_count()
    }
}

/// Attention output together with the normalized weights, `E × w` where `w`
/// is 1 for scalar attention, the head count for multi-head attention, `c`
/// for vector attention and `g` for grouped vector attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

fn check_table(tape: &Tape, x: Var, neighbors: &NeighborTable) -> Result<()> {
    let n = tape.value(x).rows();
    if neighbors.num_queries() != n {
        return Err(Error::shape("attention", &[neighbors.num_queries()], &[n]));
    }
    neighbors.check_reference_size(n)?;
    if let Some(point) = neighbors.counts().iter().position(|&c| c == 0) {
        return Err(Error::EmptyReferenceSet { point });
    }
    Ok(())
}

/// Softmax over each reference set, independently per weight column.
pub fn masked_group_softmax(tape: &mut Tape, logits: Var, neighbors: &NeighborTable) -> Result<Var> {
    tape.segment_softmax(logits, neighbors.offsets().to_vec())
}

/// Scalar-attention core on already projected `q, k, v`: weights
/// `<q_i, k_j> / sqrt(c_h)` with `c_h` the width of `q`.
fn scalar_core(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    neighbors: &NeighborTable,
) -> Result<AttentionOutput> {
    let c_h = tape.value(q).cols() as f64;
    let qe = tape.gather_rows(q, neighbors.edge_queries())?;
    let ke = tape.gather_rows(k, neighbors.indices().to_vec())?;
    let dots = tape.row_dot(qe, ke)?;
    let logits = tape.scale(dots, 1.0 / c_h.sqrt());
    let weights = masked_group_softmax(tape, logits, neighbors)?;
    let ve = tape.gather_rows(v, neighbors.indices().to_vec())?;
    let weighted = tape.scale_rows(weights, ve)?;
    let output = tape.segment_sum(weighted, neighbors.offsets().to_vec())?;
    Ok(AttentionOutput { output, weights })
}

/// Single-head scaled dot-product attention over each reference set.
pub fn scalar_attention(
    tape: &mut Tape,
    params: &Params,
    x: Var,
    neighbors: &NeighborTable,
    qkv: &QkvProjection,
) -> Result<AttentionOutput> {
    check_table(tape, x, neighbors)?;
    let (q, k, v) = qkv.forward(tape, params, x)?;
    scalar_core(tape, q, k, v, neighbors)
}

/// Scalar attention run independently on `heads` equal channel slices, with
/// the per-head outputs concatenated.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &Params,
    x: Var,
    neighbors: &NeighborTable,
    qkv: &QkvProjection,
    heads: usize,
) -> Result<AttentionOutput> {
    check_table(tape, x, neighbors)?;
    let c = qkv.value.out_dim;
    check_groups(c, heads)?;
    let (q, k, v) = qkv.forward(tape, params, x)?;
    let width = c / heads;
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let span = (h * width, (h + 1) * width);
        let qh = tape.slice_cols(q, span.0, span.1)?;
        let kh = tape.slice_cols(k, span.0, span.1)?;
        let vh = tape.slice_cols(v, span.0, span.1)?;
        let head = scalar_core(tape, qh, kh, vh, neighbors)?;
        outputs.push(head.output);
        weights.push(head.weights);
    }
    Ok(AttentionOutput {
        output: tape.concat_cols(&outputs)?,
        weights: tape.concat_cols(&weights)?,
    })
}

fn relation(tape: &mut Tape, kind: Relation, qe: Var, ke: Var) -> Result<Var> {
    match kind {
        Relation::Subtract => tape.sub(qe, ke),
        Relation::Multiply => tape.mul(qe, ke),
    }
}

/// Per-edge relation vectors `γ(q_i, k_j)` and gathered values, optionally
/// composed with the relative-position encodings.
fn edge_relations(
    tape: &mut Tape,
    params: &Params,
    q: Var,
    k: Var,
    v: Var,
    neighbors: &NeighborTable,
    kind: Relation,
    position: Option<(&PositionEncoding, &[Point3], bool)>,
) -> Result<(Var, Var)> {
    let qe = tape.gather_rows(q, neighbors.edge_queries())?;
    let ke = tape.gather_rows(k, neighbors.indices().to_vec())?;
    let mut rel = relation(tape, kind, qe, ke)?;
    let mut ve = tape.gather_rows(v, neighbors.indices().to_vec())?;
    if let Some((pe, positions, value_position)) = position {
        if positions.len() != neighbors.num_queries() {
            return Err(Error::shape("attention positions", &[positions.len()], &[neighbors.num_queries()]));
        }
        let rp = relative_positions(positions, positions, neighbors);
        let rp = tape.leaf(rp);
        let (composed, bias) = pe.compose_relation(tape, params, rel, rp)?;
        rel = composed;
        if value_position {
            ve = tape.add(ve, bias)?;
        }
    }
    Ok((rel, ve))
}

/// Vector attention: `ω` maps each relation to a `c`-wide weight vector,
/// softmax runs per channel, and values are reweighted channel by channel.
pub fn vector_attention(
    tape: &mut Tape,
    params: &Params,
    x: Var,
    neighbors: &NeighborTable,
    qkv: &QkvProjection,
    encoding: &WeightEncoding,
    relation_kind: Relation,
) -> Result<AttentionOutput> {
    check_table(tape, x, neighbors)?;
    let c = qkv.value.out_dim;
    if encoding.out_dim() != c {
        return Err(Error::shape("vector_attention encoding", &[encoding.out_dim()], &[c]));
    }
    let (q, k, v) = qkv.forward(tape, params, x)?;
    let (rel, ve) = edge_relations(tape, params, q, k, v, neighbors, relation_kind, None)?;
    let logits = encoding.forward(tape, params, rel)?;
    let weights = masked_group_softmax(tape, logits, neighbors)?;
    let modulated = tape.mul(weights, ve)?;
    let output = tape.segment_sum(modulated, neighbors.offsets().to_vec())?;
    Ok(AttentionOutput { output, weights })
}

/// Grouped vector attention layer: projections, optional position encoding
/// and a weight encoding emitting one weight per channel group.
#[derive(Clone, Debug)]
pub struct GroupedVectorAttention {
    pub config: AttentionConfig,
    pub qkv: QkvProjection,
    pub encoding: WeightEncoding,
    pub position: Option<PositionEncoding>,
}

impl GroupedVectorAttention {
    pub fn new(
        params: &mut Params,
        name: &str,
        config: AttentionConfig,
        posenc: Option<PosEncConfig>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.value_position && posenc.is_none() {
            return Err(Error::InvalidConfig(
                "value position term requires a position encoding".into(),
            ));
        }
        let c = config.channels;
        let qkv = QkvProjection::new(params, &format!("{name}.qkv"), c, c, rng);
        let encoding = make_weight_encoding(
            params,
            &format!("{name}.we"),
            config.weight_encoding,
            c,
            config.groups,
            rng,
        )?;
        let position = posenc
            .map(|pc| {
                if pc.channels != c {
                    return Err(Error::shape("position encoding width", &[pc.channels], &[c]));
                }
                Ok(PositionEncoding::new(params, &format!("{name}.pe"), pc, rng))
            })
            .transpose()?;
        Ok(Self {
            config,
            qkv,
            encoding,
            position,
        })
    }

    /// `positions` are required when the layer has a position encoding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        positions: Option<&[Point3]>,
        neighbors: &NeighborTable,
    ) -> Result<AttentionOutput> {
        check_table(tape, x, neighbors)?;
        let (q, k, v) = self.qkv.forward(tape, params, x)?;
        let position = match (&self.position, positions) {
            (Some(pe), Some(p)) => Some((pe, p, self.config.value_position)),
            (Some(_), None) => {
                return Err(Error::InvalidConfig("position encoding needs positions".into()))
            }
            (None, _) => None,
        };
        let (rel, ve) = edge_relations(tape, params, q, k, v, neighbors, self.config.relation, position)?;
        grouped_aggregation(tape, params, &self.encoding, rel, ve, neighbors)
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count()
            + self.encoding.param_count()
            + self.position.as_ref().map_or(0, PositionEncoding::param_count)
    }
}

fn grouped_aggregation(
    tape: &mut Tape,
    params: &Params,
    encoding: &WeightEncoding,
    rel: Var,
    ve: Var,
    neighbors: &NeighborTable,
) -> Result<AttentionOutput> {
    let logits = encoding.forward(tape, params, rel)?;
    let weights = masked_group_softmax(tape, logits, neighbors)?;
    let output = tape.grouped_aggregate(weights, ve, neighbors.offsets().to_vec())?;
    Ok(AttentionOutput { output, weights })
}

/// Grouped vector attention with explicit projections and encoding, without
/// position terms.
pub fn gva(
    tape: &mut Tape,
    params: &Params,
    x: Var,
    neighbors: &NeighborTable,
    qkv: &QkvProjection,
    encoding: &WeightEncoding,
    relation_kind: Relation,
) -> Result<AttentionOutput> {
    check_table(tape, x, neighbors)?;
    let c = qkv.value.out_dim;
    check_groups(c, encoding.out_dim())?;
    let (q, k, v) = qkv.forward(tape, params, x)?;
    let (rel, ve) = edge_relations(tape, params, q, k, v, neighbors, relation_kind, None)?;
    grouped_aggregation(tape, params, encoding, rel, ve, neighbors)
}
