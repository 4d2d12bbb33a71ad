use pointgva_core::attention::{AttentionConfig, ReferenceMode};
use pointgva_core::bench::{self, synth_uniform, BenchSpec, PoolingMethod};
use pointgva_core::checks::oracles;
use pointgva_core::io::{decode, encode};
use pointgva_core::network::{block_forward, Backbone, BackboneConfig, Block, ClsHead, SegHead};
use pointgva_core::pooling::{self, interp_unpool};
use pointgva_core::posenc::{PosEncConfig, PosEncMode};
use pointgva_core::rng::{self, Rng};
use pointgva_core::spatial::{knn, GridSpec};
use pointgva_core::{Params, PointCloud, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn shuffled(n: usize, r: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    order
}

fn max_abs_unpermuted(a: &Tensor, b: &Tensor, order: &[usize]) -> f64 {
    // Row i of `b` belongs to original point order[i].
    let mut worst = 0.0f64;
    for (i, &src) in order.iter().enumerate() {
        for (x, y) in a.row(src).iter().zip(b.row(i)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

#[test]
fn block_is_permutation_equivariant_on_1k_points() {
    let mut r = rng::stream(11, rng::STREAM_CHECKS);
    let c = 16;
    let cloud = synth_uniform(1000, c, 11);
    let mut params = Params::new();
    let cfg = AttentionConfig::new(c, 4);
    let block = Block::new(&mut params, "b", cfg, Some(PosEncConfig::new(PosEncMode::MultiplierAndBias, c)), &mut r).unwrap();
    let base = block_forward(&block, &params, &cloud, &knn(&cloud, &cloud, 16).unwrap()).unwrap();

    let order = shuffled(cloud.len(), &mut r);
    let moved = cloud.permuted(&order);
    let out = block_forward(&block, &params, &moved, &knn(&moved, &moved, 16).unwrap()).unwrap();
    assert!(max_abs_unpermuted(&base.features, &out.features, &order) <= 1e-9);
}

#[test]
fn grid_reference_block_is_translation_invariant() {
    let mut r = rng::stream(12, rng::STREAM_CHECKS);
    let c = 8;
    let cloud = synth_uniform(600, c, 12);
    let mut params = Params::new();
    let mut cfg = AttentionConfig::new(c, 2);
    cfg.reference_mode = ReferenceMode::Grid { grid_size: 0.2 };
    let block = Block::new(&mut params, "b", cfg, None, &mut r).unwrap();
    let table = cfg.reference_mode.build(&cloud.positions, 1).unwrap();
    let base = block_forward(&block, &params, &cloud, &table).unwrap();
    let moved = cloud.translated([3.0, -7.5, 0.25]);
    let table = cfg.reference_mode.build(&moved.positions, 1).unwrap();
    let out = block_forward(&block, &params, &moved, &table).unwrap();
    let diff = base
        .features
        .data()
        .iter()
        .zip(out.features.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-9, "{diff}");
}

#[test]
fn grid_pool_matches_loop_oracle_on_10k_points() {
    let mut r = rng::stream(13, rng::STREAM_CHECKS);
    let (c, c_out) = (6, 5);
    let cloud = synth_uniform(10_000, c, 13);
    let u = Tensor::matrix(c, c_out, (0..c * c_out).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let grid = 0.08;
    let res = pooling::grid_pool(&cloud, &GridSpec::new(grid), &u).unwrap();
    let cells = oracles::grid_cells(&cloud.positions, grid);
    assert_eq!(res.pooled.len(), cells.len());
    for (k, members) in cells.iter().enumerate() {
        assert_eq!(res.map.members(k), members.as_slice());
        let centroid = oracles::centroid(&cloud.positions, members);
        for a in 0..3 {
            assert!((res.pooled.positions[k][a] - centroid[a]).abs() <= 1e-12);
        }
        for (x, y) in res.pooled.features.row(k).iter().zip(oracles::max_pool(&cloud.features, &u, members)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn synth_uniform_means_are_one_half() {
    let cloud = synth_uniform(100_000, 2, 99);
    for a in 0..3 {
        let mean = cloud.positions.iter().map(|p| p[a]).sum::<f64>() / cloud.len() as f64;
        assert!((mean - 0.5).abs() <= 0.01, "axis {a}: {mean}");
        assert!(cloud.positions.iter().all(|p| (0.0..1.0).contains(&p[a])));
    }
    let f = cloud.features.data();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f.len() as f64;
    assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.02);
    assert_eq!(synth_uniform(1, 2, 5).len(), 1);
}

#[test]
fn heads_respect_point_order() {
    let mut r = rng::stream(14, rng::STREAM_CHECKS);
    let (c, classes, n) = (12, 5, 40);
    let cloud = synth_uniform(n, c, 14);
    let order = shuffled(n, &mut r);
    let moved = cloud.permuted(&order);
    let mut params = Params::new();
    let seg = SegHead::new(&mut params, c, classes, &mut r);
    let cls = ClsHead::new(&mut params, c, classes, &mut r);
    let run = |x: &PointCloud| {
        let mut tape = Tape::new();
        let f = tape.leaf(x.features.clone());
        let s = seg.forward(&mut tape, &params, f).unwrap();
        let k = cls.forward(&mut tape, &params, f).unwrap();
        (tape.value(s).clone(), tape.value(k).clone())
    };
    let ((seg_a, cls_a), (seg_b, cls_b)) = (run(&cloud), run(&moved));
    assert_eq!(seg_a.shape(), &[n, classes]);
    assert_eq!(cls_a.shape(), &[1, classes]);
    assert!(max_abs_unpermuted(&seg_a, &seg_b, &order) <= 1e-12);
    for (a, b) in cls_a.data().iter().zip(cls_b.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn encoder_stage_counts_never_grow() {
    let mut params = Params::new();
    let mut r = rng::stream(15, rng::STREAM_PARAMS);
    let cfg = BackboneConfig::toy();
    let backbone = Backbone::new(&mut params, cfg.clone(), &mut r).unwrap();
    let cloud = synth_uniform(3000, cfg.in_channels, 15);
    let mut tape = Tape::new();
    let out = backbone.forward(&mut tape, &params, &cloud).unwrap();
    assert_eq!(out.level_sizes[0], 3000);
    assert_eq!(out.level_sizes.len(), cfg.stages() + 1);
    assert!(out.level_sizes.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.level_sizes);
    assert_eq!(tape.value(out.features).shape(), &[3000, cfg.stem_dim]);
}

#[test]
fn full_sweep_csv_has_one_row_per_cell() {
    let spec = BenchSpec {
        ns: vec![300, 600],
        ratios: vec![0.5, 0.25, 0.125],
        repeats: 3,
        seed: 3,
        ..BenchSpec::default()
    };
    let table = bench::bench_pooling(&spec).unwrap();
    assert_eq!(table.rows.len(), PoolingMethod::ALL.len() * 2 * 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    bench::emit_csv(&table, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2 + 18);
    assert_eq!(bench::read_csv(&path).unwrap(), table);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ptpc_round_trips_f32_values(
        rows in prop::collection::vec((prop::array::uniform3(-1e6f32..1e6), prop::collection::vec(-1e3f32..1e3, 3)), 0..40),
        with_labels in any::<bool>(),
    ) {
        let n = rows.len();
        let positions = rows.iter().map(|(p, _)| p.map(f64::from)).collect();
        let feats = rows.iter().flat_map(|(_, f)| f.iter().map(|&v| f64::from(v))).collect();
        let cloud = PointCloud::new(positions, Tensor::matrix(n, 3, feats).unwrap()).unwrap();
        let labels: Vec<u32> = (0..n as u32).map(|i| i * 7).collect();
        let bytes = encode(&cloud, with_labels.then_some(labels.as_slice())).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.cloud, cloud);
        prop_assert_eq!(back.labels, with_labels.then_some(labels));
    }

    #[test]
    fn interp_unpool_stays_inside_source_range(seed in any::<u64>(), m in 1usize..30, n in 1usize..60) {
        let pooled = synth_uniform(m, 4, seed);
        let targets = synth_uniform(n, 0, seed ^ 1);
        let out = interp_unpool(&pooled, &targets.positions, 3).unwrap();
        prop_assert_eq!(out.shape(), &[n, 4]);
        for j in 0..4 {
            let col: Vec<f64> = (0..m).map(|i| pooled.features.get(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let v = out.get(i, j);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn map_unpool_inverts_cell_assignment(seed in any::<u64>(), n in 1usize..200, grid in 0.05f64..0.6) {
        let cloud = synth_uniform(n, 2, seed);
        let res = pooling::grid_pool(&cloud, &GridSpec::new(grid), &Tensor::identity(2)).unwrap();
        let back = pooling::map_unpool(&res.pooled.features, &res.map).unwrap();
        prop_assert_eq!(back.rows(), n);
        for i in 0..n {
            prop_assert_eq!(back.row(i), res.pooled.features.row(res.map.cell_of()[i]));
        }
    }
}
