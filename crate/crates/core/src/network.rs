//! U-Net backbone built from attention blocks and grid pooling, plus the
//! segmentation and classification heads.
//!
//! Levels are numbered from the input resolution: level 0 is the stem output,
//! level `s + 1` is the output of encoder stage `s`. Each decoder stage
//! unpools from level `s + 1` to level `s`, fuses the level-`s` skip features
//! and runs its blocks at the level-`s` width.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, GroupedVectorAttention, ReferenceMode, Relation, WeightEncodingKind};
use crate::error::{Error, Result};
use crate::geom::{NeighborTable, PartitionMap, Point3, PointCloud};
use crate::numerics::layers::check_groups;
use crate::numerics::{BatchNorm, Linear, Mlp2, Params, Tape, Tensor, Var};
use crate::pooling;
use crate::posenc::{PosEncConfig, PosEncMode};
use crate::rng::{self, Rng};
use crate::spatial::{self, GridSpec, DEFAULT_BASE_GRID, DEFAULT_K};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    #[default]
    Knn,
    /// Grid-cell reference sets, alternating plain and half-shifted lattices.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub weight_encoding: WeightEncodingKind,
    pub relation: Relation,
    pub reference: ReferenceKind,
    /// Grid-cell window as a multiple of the stage grid size (grid reference
    /// sets only).
    pub window: f64,
    pub value_position: bool,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            weight_encoding: WeightEncodingKind::GroupedLinearNormActLinear,
            relation: Relation::Subtract,
            reference: ReferenceKind::Knn,
            window: 4.0,
            value_position: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosEncSection {
    pub enabled: bool,
    pub mode: PosEncMode,
}

impl Default for PosEncSection {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: PosEncMode::MultiplierAndBias,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMethod {
    #[default]
    Grid,
    FpsKnn,
    GridKnn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnpoolMethod {
    /// Copy each cell's feature back to its members; grid pooling only.
    #[default]
    Map,
    /// Inverse-distance interpolation from the 3 nearest pooled points.
    Interp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    #[default]
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingSection {
    pub method: PoolMethod,
    pub unpool: UnpoolMethod,
    pub skip: SkipFusion,
    /// Sampling ratio per stage for FPS-kNN pooling.
    pub fps_ratio: f64,
}

impl Default for PoolingSection {
    fn default() -> Self {
        Self {
            method: PoolMethod::Grid,
            unpool: UnpoolMethod::Map,
            skip: SkipFusion::Concat,
            fps_ratio: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub stem_dim: usize,
    pub stem_groups: usize,
    pub encoder_depths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub groups: Vec<usize>,
    pub grid_multipliers: Vec<f64>,
    pub base_grid: f64,
    pub k: usize,
    pub attention: AttentionSection,
    pub posenc: PosEncSection,
    pub pooling: PoolingSection,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            classes: 20,
            stem_dim: 48,
            stem_groups: 6,
            encoder_depths: vec![2, 2, 6, 2],
            decoder_depths: vec![1, 1, 1, 1],
            dims: vec![96, 192, 384, 384],
            groups: vec![12, 24, 48, 48],
            grid_multipliers: vec![3.0, 2.5, 2.5, 2.5],
            base_grid: DEFAULT_BASE_GRID,
            k: DEFAULT_K,
            attention: AttentionSection::default(),
            posenc: PosEncSection::default(),
            pooling: PoolingSection::default(),
        }
    }
}

impl BackboneConfig {
    /// Small model for tests: same stage structure, narrow widths, one block
    /// per stage.
    pub fn toy() -> Self {
        Self {
            stem_dim: 16,
            stem_groups: 4,
            encoder_depths: vec![1, 1, 1, 1],
            decoder_depths: vec![1, 1, 1, 1],
            dims: vec![16, 32, 32, 32],
            groups: vec![4, 8, 8, 8],
            classes: 13,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stages(&self) -> usize {
        self.dims.len()
    }

    /// Width of level `l` (0 = stem).
    pub fn level_dim(&self, level: usize) -> usize {
        if level == 0 {
            self.stem_dim
        } else {
            self.dims[level - 1]
        }
    }

    pub fn level_groups(&self, level: usize) -> usize {
        if level == 0 {
            self.stem_groups
        } else {
            self.groups[level - 1]
        }
    }

    /// Grid size used to pool into level `l`; level 0 uses the base grid.
    pub fn level_grid(&self, level: usize) -> f64 {
        self.grid_multipliers[..level]
            .iter()
            .fold(self.base_grid, |g, m| g * m)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.dims.len();
        let lens = [
            self.encoder_depths.len(),
            self.decoder_depths.len(),
            self.groups.len(),
            self.grid_multipliers.len(),
        ];
        if s == 0 || lens.iter().any(|&l| l != s) {
            return Err(Error::InvalidConfig(format!(
                "stage lists must have equal non-zero length: dims {s}, encoder_depths {}, decoder_depths {}, groups {}, grid_multipliers {}",
                lens[0], lens[1], lens[2], lens[3]
            )));
        }
        if self.in_channels == 0 || self.classes == 0 {
            return Err(Error::InvalidConfig("in_channels and classes must be positive".into()));
        }
        for level in 0..=s {
            check_groups(self.level_dim(level), self.level_groups(level))?;
        }
        if !(self.base_grid > 0.0) || self.grid_multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidGrid("grid sizes must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        if self.attention.reference == ReferenceKind::Grid && !(self.attention.window > 0.0) {
            return Err(Error::InvalidConfig("attention window must be positive".into()));
        }
        if self.pooling.method != PoolMethod::Grid && self.pooling.unpool == UnpoolMethod::Map {
            return Err(Error::InvalidConfig(
                "map unpooling needs grid pooling; use unpool = \"interp\"".into(),
            ));
        }
        if self.pooling.method == PoolMethod::FpsKnn
            && !(self.pooling.fps_ratio > 0.0 && self.pooling.fps_ratio <= 1.0)
        {
            return Err(Error::InvalidConfig("fps_ratio must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn attention_config(&self, level: usize) -> AttentionConfig {
        let reference_mode = match self.attention.reference {
            ReferenceKind::Knn => ReferenceMode::Knn { k: self.k },
            ReferenceKind::Grid => ReferenceMode::Grid {
                grid_size: self.level_grid(level) * self.attention.window,
            },
        };
        AttentionConfig {
            channels: self.level_dim(level),
            groups: self.level_groups(level),
            relation: self.attention.relation,
            weight_encoding: self.attention.weight_encoding,
            reference_mode,
            value_position: self.attention.value_position,
        }
    }

    fn posenc_config(&self, channels: usize) -> Option<PosEncConfig> {
        self.posenc
            .enabled
            .then(|| PosEncConfig::new(self.posenc.mode, channels))
    }
}

/// Pre-norm residual block: attention sub-layer then feed-forward sub-layer.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: BatchNorm,
    pub attention: GroupedVectorAttention,
    pub proj: Linear,
    pub norm2: BatchNorm,
    pub ffn: Mlp2,
}

impl Block {
    pub fn new(
        params: &mut Params,
        name: &str,
        config: AttentionConfig,
        posenc: Option<PosEncConfig>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = config.channels;
        Ok(Self {
            norm1: BatchNorm::new(params, &format!("{name}.norm1"), c),
            attention: GroupedVectorAttention::new(params, &format!("{name}.attn"), config, posenc, rng)?,
            proj: Linear::new(params, &format!("{name}.proj"), c, c, true, rng),
            norm2: BatchNorm::new(params, &format!("{name}.norm2"), c),
            ffn: Mlp2::new(params, &format!("{name}.ffn"), c, c, c, true, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.attention.config.channels
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        positions: &[Point3],
        neighbors: &NeighborTable,
    ) -> Result<Var> {
        let c = tape.value(x).cols();
        if c != self.channels() {
            return Err(Error::shape("block", tape.value(x).shape(), &[positions.len(), self.channels()]));
        }
        let h = self.norm1.forward(tape, params, x)?;
        let a = self.attention.forward(tape, params, h, Some(positions), neighbors)?;
        let a = self.proj.forward(tape, params, a.output)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, params, x)?;
        let h = self.ffn.forward(tape, params, h)?;
        tape.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.attention.param_count()
            + self.proj.param_count()
            + self.norm2.param_count()
            + self.ffn.param_count()
    }
}

/// Runs one block outside a larger graph and returns the updated cloud.
pub fn block_forward(
    block: &Block,
    params: &Params,
    cloud: &PointCloud,
    neighbors: &NeighborTable,
) -> Result<PointCloud> {
    let mut tape = Tape::new();
    let x = tape.leaf(cloud.features.clone());
    let y = block.forward(&mut tape, params, x, &cloud.positions, neighbors)?;
    PointCloud::new(cloud.positions.clone(), tape.value(y).clone())
}

/// Blocks sharing one resolution, with reference sets built once per parity.
#[derive(Clone, Debug)]
struct BlockStack {
    blocks: Vec<Block>,
    reference: ReferenceMode,
}

impl BlockStack {
    fn new(params: &mut Params, name: &str, cfg: &BackboneConfig, level: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        let attn = cfg.attention_config(level);
        let blocks = (0..depth)
            .map(|b| Block::new(params, &format!("{name}.block{b}"), attn, cfg.posenc_config(attn.channels), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            reference: attn.reference_mode,
        })
    }

    fn forward(&self, tape: &mut Tape, params: &Params, mut x: Var, positions: &[Point3]) -> Result<Var> {
        let mut tables: [Option<NeighborTable>; 2] = [None, None];
        for (b, block) in self.blocks.iter().enumerate() {
            let parity = match self.reference {
                ReferenceMode::Knn { .. } => 0,
                ReferenceMode::Grid { .. } => b % 2,
            };
            if tables[parity].is_none() {
                tables[parity] = Some(self.reference.build(positions, parity)?);
            }
            x = block.forward(tape, params, x, positions, tables[parity].as_ref().unwrap())?;
        }
        Ok(x)
    }

    fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }
}

#[derive(Clone, Debug)]
struct Stem {
    embed: Linear,
    norm: BatchNorm,
    stack: BlockStack,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    projection: crate::numerics::ParamId,
    norm: BatchNorm,
    stack: BlockStack,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    fuse: Linear,
    norm: BatchNorm,
    stack: BlockStack,
}

/// How a pooled level maps back to the level below it.
#[derive(Clone, Debug)]
enum Unpool {
    Map(PartitionMap),
    Interp { coarse: Vec<Point3> },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Stem,
    encoders: Vec<EncoderStage>,
    decoders: Vec<DecoderStage>,
}

/// Backbone outputs: per-point features at input resolution, the deepest
/// encoder features, and the point count of every level.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub features: Var,
    pub deepest: Var,
    pub level_sizes: Vec<usize>,
}

impl Backbone {
    pub fn new(params: &mut Params, config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let stem = Stem {
            embed: Linear::new(params, "stem.embed", cfg.in_channels, cfg.stem_dim, true, rng),
            norm: BatchNorm::new(params, "stem.norm", cfg.stem_dim),
            stack: BlockStack::new(params, "stem", cfg, 0, 1, rng)?,
        };
        let mut encoders = Vec::with_capacity(cfg.stages());
        for s in 0..cfg.stages() {
            let (in_dim, out_dim) = (cfg.level_dim(s), cfg.level_dim(s + 1));
            let name = format!("enc{s}");
            encoders.push(EncoderStage {
                projection: params.add_uniform(format!("{name}.pool.weight"), &[in_dim, out_dim], in_dim, rng),
                norm: BatchNorm::new(params, &format!("{name}.pool.norm"), out_dim),
                stack: BlockStack::new(params, &name, cfg, s + 1, cfg.encoder_depths[s], rng)?,
                in_dim,
                out_dim,
            });
        }
        let mut decoders = Vec::with_capacity(cfg.stages());
        for s in 0..cfg.stages() {
            let (upper, skip) = (cfg.level_dim(s + 1), cfg.level_dim(s));
            let name = format!("dec{s}");
            let fuse_in = match cfg.pooling.skip {
                SkipFusion::Concat => upper + skip,
                SkipFusion::Add => upper,
            };
            decoders.push(DecoderStage {
                fuse: Linear::new(params, &format!("{name}.fuse"), fuse_in, skip, true, rng),
                norm: BatchNorm::new(params, &format!("{name}.norm"), skip),
                stack: BlockStack::new(params, &name, cfg, s, cfg.decoder_depths[s], rng)?,
            });
        }
        Ok(Self {
            config,
            stem,
            encoders,
            decoders,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, cloud: &PointCloud) -> Result<BackboneOutput> {
        let cfg = &self.config;
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if cloud.channels() != cfg.in_channels {
            return Err(Error::shape("backbone input", cloud.features.shape(), &[cloud.len(), cfg.in_channels]));
        }
        let x = tape.leaf(cloud.features.clone());
        let x = self.stem.embed.forward(tape, params, x)?;
        let x = self.stem.norm.forward(tape, params, x)?;
        let x = tape.relu(x);
        let mut x = self.stem.stack.forward(tape, params, x, &cloud.positions)?;

        let mut positions = cloud.positions.clone();
        let mut skips: Vec<(Var, Vec<Point3>)> = Vec::with_capacity(cfg.stages());
        let mut unpools = Vec::with_capacity(cfg.stages());
        let mut level_sizes = vec![positions.len()];
        for (s, stage) in self.encoders.iter().enumerate() {
            let spec = GridSpec::new(cfg.level_grid(s + 1));
            let u = tape.param(params, stage.projection);
            let (pooled, coarse, unpool) = match cfg.pooling.method {
                PoolMethod::Grid => {
                    let (pooled, centroids, map) = pooling::grid_pool_on_tape(tape, x, &positions, &spec, u)?;
                    let unpool = match cfg.pooling.unpool {
                        UnpoolMethod::Map => Unpool::Map(map),
                        UnpoolMethod::Interp => Unpool::Interp { coarse: centroids.clone() },
                    };
                    (pooled, centroids, unpool)
                }
                PoolMethod::FpsKnn | PoolMethod::GridKnn => {
                    let fine = PointCloud::from_positions(positions.clone());
                    let centers = if cfg.pooling.method == PoolMethod::FpsKnn {
                        pooling::fps_centers(&fine, cfg.pooling.fps_ratio)?
                    } else {
                        pooling::grid_centers(&fine, &spec)?
                    };
                    let table = spatial::knn_positions(&centers, &positions, cfg.k.min(positions.len()))?;
                    let pooled = pooling::neighbor_pool_on_tape(tape, x, &table, u)?;
                    (pooled, centers.clone(), Unpool::Interp { coarse: centers })
                }
            };
            debug_assert_eq!(tape.value(pooled).cols(), stage.out_dim);
            let h = stage.norm.forward(tape, params, pooled)?;
            let h = tape.relu(h);
            skips.push((x, std::mem::replace(&mut positions, coarse)));
            unpools.push(unpool);
            level_sizes.push(positions.len());
            x = stage.stack.forward(tape, params, h, &positions)?;
        }
        let deepest = x;

        for s in (0..cfg.stages()).rev() {
            let stage = &self.decoders[s];
            let (skip, fine_positions) = &skips[s];
            let up = match &unpools[s] {
                Unpool::Map(map) => pooling::map_unpool_on_tape(tape, x, map)?,
                Unpool::Interp { coarse } => pooling::interp_unpool_on_tape(tape, x, coarse, fine_positions)?,
            };
            let fused = match cfg.pooling.skip {
                SkipFusion::Concat => {
                    let cat = tape.concat_cols(&[up, *skip])?;
                    let h = stage.fuse.forward(tape, params, cat)?;
                    let h = stage.norm.forward(tape, params, h)?;
                    tape.relu(h)
                }
                SkipFusion::Add => {
                    let h = stage.fuse.forward(tape, params, up)?;
                    let h = stage.norm.forward(tape, params, h)?;
                    let h = tape.relu(h);
                    tape.add(h, *skip)?
                }
            };
            x = stage.stack.forward(tape, params, fused, fine_positions)?;
        }
        Ok(BackboneOutput {
            features: x,
            deepest,
            level_sizes,
        })
    }

    pub fn param_count(&self) -> usize {
        let stem = self.stem.embed.param_count() + self.stem.norm.param_count() + self.stem.stack.param_count();
        let enc: usize = self
            .encoders
            .iter()
            .map(|e| e.in_dim * e.out_dim + e.norm.param_count() + e.stack.param_count())
            .sum();
        let dec: usize = self
            .decoders
            .iter()
            .map(|d| d.fuse.param_count() + d.norm.param_count() + d.stack.param_count())
            .sum();
        stem + enc + dec
    }
}

/// Per-point class logits: a two-layer perceptron applied to every row.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub mlp: Mlp2,
}

impl SegHead {
    pub fn new(params: &mut Params, in_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp2::new(params, "seg_head", in_dim, in_dim, classes, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, features: Var) -> Result<Var> {
        self.mlp.forward(tape, params, features)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

/// Global average pooling followed by a two-layer perceptron. The hidden
/// layer is not normalized: a single pooled row has no batch statistics.
#[derive(Clone, Debug)]
pub struct ClsHead {
    pub mlp: Mlp2,
}

impl ClsHead {
    pub fn new(params: &mut Params, in_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp2::new(params, "cls_head", in_dim, in_dim, classes, false, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, features: Var) -> Result<Var> {
        if tape.value(features).rows() == 0 {
            return Err(Error::EmptyCloud);
        }
        let pooled = tape.mean_rows(features)?;
        self.mlp.forward(tape, params, pooled)
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

/// Backbone plus segmentation head with parameters drawn from one seed.
#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub params: Params,
    pub backbone: Backbone,
    pub head: SegHead,
}

impl SegmentationModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut params = Params::new();
        let mut rng = rng::stream(seed, rng::STREAM_PARAMS);
        let (dim, classes) = (config.stem_dim, config.classes);
        let backbone = Backbone::new(&mut params, config, &mut rng)?;
        let head = SegHead::new(&mut params, dim, classes, &mut rng);
        Ok(Self { params, backbone, head })
    }

    /// `n × classes` logits.
    pub fn logits(&self, cloud: &PointCloud) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.backbone.forward(&mut tape, &self.params, cloud)?;
        let logits = self.head.forward(&mut tape, &self.params, out.features)?;
        Ok(tape.value(logits).clone())
    }
}

/// Backbone features (`n × stem_dim`) for a freshly initialized model.
pub fn unet_forward(cloud: &PointCloud, config: &BackboneConfig, seed: u64) -> Result<Tensor> {
    let mut params = Params::new();
    let mut rng = rng::stream(seed, rng::STREAM_PARAMS);
    let backbone = Backbone::new(&mut params, config.clone(), &mut rng)?;
    let mut tape = Tape::new();
    let out = backbone.forward(&mut tape, &params, cloud)?;
    Ok(tape.value(out.features).clone())
}

/// Learnable scalars of the backbone plus segmentation head.
pub fn count_params(config: &BackboneConfig) -> Result<usize> {
    Ok(SegmentationModel::new(config.clone(), 0)?.params.scalar_count())
}
