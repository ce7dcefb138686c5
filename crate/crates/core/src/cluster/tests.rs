use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::points::{partition_regions, ChannelLayout};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn blocks_split_tiles_evenly() {
    let b = center_blocks(GridMeta::new(4, 4).unwrap(), 4).unwrap();
    assert_eq!(b, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    let b = center_blocks(GridMeta::new(7, 7).unwrap(), 4).unwrap();
    let counts = (0..4).map(|j| b.iter().filter(|&&x| x == j).count()).collect::<Vec<_>>();
    assert_eq!(counts, vec![16, 12, 12, 9]);
    assert_eq!(center_blocks(GridMeta::new(4, 4).unwrap(), 1).unwrap(), vec![0; 16]);
    assert!(matches!(center_blocks(GridMeta::new(4, 4).unwrap(), 3), Err(Error::Config(_))));
    assert!(matches!(center_blocks(GridMeta::new(1, 1).unwrap(), 4), Err(Error::Config(_))));
}

#[test]
fn block_constant_features_give_those_centers() {
    let blocks = center_blocks(GridMeta::new(4, 4).unwrap(), 4).unwrap();
    let data: Vec<f64> = blocks.iter().flat_map(|&b| [b as f64, -2.0 * b as f64]).collect();
    let ps = PointSet::new(t(&[16, 2], &data), GridMeta::new(4, 4).unwrap(), ChannelLayout::Features).unwrap();
    let c = propose_centers(&ps, 4).unwrap();
    assert_eq!(c.data(), &[0., 0., 1., -2., 2., -4., 3., -6.]);
}

#[test]
fn fps_covers_all_points_and_skips_duplicates() {
    let pos = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]];
    let mut all = farthest_point_sampling(&pos, 5, FpsStart::First).unwrap();
    assert_eq!(all[0], 0);
    assert_eq!(all[1], 3);
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2, 3, 4]);

    let dup = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [2.0, 0.0]];
    assert_eq!(farthest_point_sampling(&dup, 2, FpsStart::First).unwrap(), vec![0, 3]);
    let full = farthest_point_sampling(&dup, 4, FpsStart::First).unwrap();
    assert_eq!(full, vec![0, 3, 1, 2]);

    let a = farthest_point_sampling(&pos, 3, FpsStart::Seeded(7)).unwrap();
    assert_eq!(a, farthest_point_sampling(&pos, 3, FpsStart::Seeded(7)).unwrap());
    assert!(farthest_point_sampling(&pos, 6, FpsStart::First).is_err());
}

#[test]
fn fps_centers_average_nearest_points() {
    let pos = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
    let f = t(&[4, 1], &[1., 3., 10., 20.]);
    let c = propose_centers_fps(&f, &pos, 2, 2, FpsStart::First).unwrap();
    assert_eq!(c.indices, vec![0, 3]);
    assert_eq!(c.features.data(), &[2.0, 15.0]);
}

#[test]
fn cosine_examples() {
    let p = t(&[3, 2], &[1., 0., 0., 1., 0., 0.]);
    let c = t(&[1, 2], &[2., 0.]);
    let s = cosine_similarity(&p, &c, COSINE_EPS).unwrap();
    assert_eq!(s.values.data(), &[1.0, 0.0, 0.0]);
    let neg = t(&[1, 2], &[-1e-3, 0.]);
    let s = cosine_similarity(&t(&[1, 2], &[3., 0.]), &neg, COSINE_EPS).unwrap();
    assert!((s.get(0, 0) + 1.0).abs() < 1e-12);
}

#[test]
fn assignment_breaks_ties_low() {
    let s = SimilarityMatrix::new(t(&[3, 2], &[0.5, 0.1, 0.5, 0.9, -1.0, 0.9])).unwrap();
    let a = assign_clusters(&s);
    assert_eq!(a.center_index, vec![0, 1]);
    assert_eq!(a.cluster_sizes, vec![1, 1, 0]);
    assert_eq!(a.members(1), vec![1]);
}

#[test]
fn empty_cluster_aggregates_to_center() {
    let vc = [0.3, -1.25, 7.0];
    let g = aggregate(&Tensor::<f64>::zeros(&[0, 3]), &vc, &[], 1.0, 0.0).unwrap();
    assert_eq!(g, vc.to_vec());
}

#[test]
fn aggregate_matches_hand_computation() {
    let v = t(&[2, 1], &[1.0, 3.0]);
    let g = aggregate(&v, &[0.0], &[0.0, 0.0], 1.0, 0.0).unwrap();
    assert!((g[0] - 2.0 / 2.0).abs() < 1e-12);
}

#[test]
fn dispatch_examples() {
    let eye = Tensor::<f64>::eye(3);
    let p = [1.0, 2.0, 3.0];
    let g = [4.0, -2.0, 0.5];
    let out = dispatch(&p, &g, 0.0, 1.0, 0.0, &eye, None).unwrap();
    assert_eq!(out, vec![3.0, 1.0, 3.25]);
    let out = dispatch(&p, &[0.0; 3], 0.8, 1.0, 0.0, &uniform(&mut ChaCha8Rng::seed_from_u64(1), &[3, 3], 1.0), Some(&[0.0; 3])).unwrap();
    assert_eq!(out, p.to_vec());
}

#[test]
fn center_updates_keep_empty_clusters() {
    let p = t(&[3, 2], &[1., 0., 0.9, 0.1, 0., 1.]);
    let c = t(&[3, 2], &[1., 0., 0., 1., -1., -1.]);
    let a = assign_clusters(&cosine_similarity(&p, &c, COSINE_EPS).unwrap());
    let (same, a0) = update_centers(&p, &a, &c, 0).unwrap();
    assert_eq!((same, a0), (c.clone(), a.clone()));
    let (moved, a1) = update_centers(&p, &a, &c, 1).unwrap();
    assert_eq!(&moved.data()[4..], &[-1., -1.]);
    assert!((moved.data()[0] - 0.95).abs() < 1e-12);
    assert_eq!(a1.center_index, vec![0, 0, 1]);
}

struct Weights {
    ws: Tensor<f64>,
    bs: Tensor<f64>,
    wv: Tensor<f64>,
    bv: Tensor<f64>,
    alpha: Tensor<f64>,
    beta: Tensor<f64>,
    wf: Tensor<f64>,
    bf: Tensor<f64>,
    wo: Tensor<f64>,
    bo: Tensor<f64>,
}

impl Weights {
    fn random(rng: &mut ChaCha8Rng, d: usize, h: usize, e: usize) -> Self {
        Self {
            ws: uniform(rng, &[d, h * e], 0.6),
            bs: uniform(rng, &[h * e], 0.2),
            wv: uniform(rng, &[d, h * e], 0.6),
            bv: uniform(rng, &[h * e], 0.2),
            alpha: Tensor::new(&[h], (0..h).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap(),
            beta: uniform(rng, &[h], 0.5),
            wf: uniform(rng, &[e, e], 0.6),
            bf: uniform(rng, &[e], 0.2),
            wo: uniform(rng, &[h * e, d], 0.6),
            bo: uniform(rng, &[d], 0.2),
        }
    }

    fn bind(&self, tape: &mut Tape<f64>) -> ClusterVars {
        ClusterVars {
            sim_weight: tape.param(self.ws.clone()),
            sim_bias: tape.param(self.bs.clone()),
            value_weight: tape.param(self.wv.clone()),
            value_bias: tape.param(self.bv.clone()),
            alpha: tape.param(self.alpha.clone()),
            beta: tape.param(self.beta.clone()),
            dispatch_weight: tape.param(self.wf.clone()),
            dispatch_bias: tape.param(self.bf.clone()),
            fuse_weight: tape.param(self.wo.clone()),
            fuse_bias: tape.param(self.bo.clone()),
        }
    }
}

fn spec(h: usize, e: usize, c: usize, regions: usize) -> ClusterSpec {
    ClusterSpec {
        heads: h,
        head_dim: e,
        local_centers: c,
        regions,
        center_update_iters: 0,
        force_partition: false,
    }
}

fn run(x: &Tensor<f64>, grid: GridMeta, batch: usize, spec: &ClusterSpec, w: &Weights) -> Tensor<f64> {
    let mut tape = Tape::new();
    let features = tape.constant(x.clone());
    let vars = w.bind(&mut tape);
    let pb = PointBatch { features, grid, batch };
    let out = context_cluster(&mut tape, &pb, spec, &vars, None).unwrap();
    tape.value(out).clone()
}

/// Straight-line single-image, single-region evaluation with explicit loops.
fn reference(x: &Tensor<f64>, block: &dyn Fn(usize) -> usize, c: usize, h: usize, e: usize, w: &Weights) -> Vec<f64> {
    let (n, d) = x.dims2().unwrap();
    let proj = |wt: &Tensor<f64>, b: &Tensor<f64>, i: usize, col: usize| {
        b.data()[col] + (0..d).map(|k| x.data()[i * d + k] * wt.data()[k * h * e + col]).sum::<f64>()
    };
    let mut cat = vec![0.0; n * h * e];
    for head in 0..h {
        let ps: Vec<Vec<f64>> = (0..n).map(|i| (0..e).map(|k| proj(&w.ws, &w.bs, i, head * e + k)).collect()).collect();
        let pv: Vec<Vec<f64>> = (0..n).map(|i| (0..e).map(|k| proj(&w.wv, &w.bv, i, head * e + k)).collect()).collect();
        let mean = |rows: &[Vec<f64>], j: usize| {
            let members: Vec<usize> = (0..n).filter(|&i| block(i) == j).collect();
            (0..e).map(|k| members.iter().map(|&i| rows[i][k]).sum::<f64>() / members.len() as f64).collect::<Vec<_>>()
        };
        let cs: Vec<Vec<f64>> = (0..c).map(|j| mean(&ps, j)).collect();
        let cv: Vec<Vec<f64>> = (0..c).map(|j| mean(&pv, j)).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-6);
        let mut best = vec![(0usize, f64::NEG_INFINITY); n];
        for i in 0..n {
            for j in 0..c {
                let s = ps[i].iter().zip(&cs[j]).map(|(a, b)| a * b).sum::<f64>() / (norm(&ps[i]) * norm(&cs[j]));
                if s > best[i].1 {
                    best[i] = (j, s);
                }
            }
        }
        let wgt: Vec<f64> = best.iter().map(|&(_, s)| sigma(w.alpha.data()[head] * s + w.beta.data()[head])).collect();
        for j in 0..c {
            let members: Vec<usize> = (0..n).filter(|&i| best[i].0 == j).collect();
            let den = 1.0 + members.iter().map(|&i| wgt[i]).sum::<f64>();
            let g: Vec<f64> = (0..e)
                .map(|k| (cv[j][k] + members.iter().map(|&i| wgt[i] * pv[i][k]).sum::<f64>()) / den)
                .collect();
            for &i in &members {
                for o in 0..e {
                    let fc = w.bf.data()[o] + (0..e).map(|k| wgt[i] * g[k] * w.wf.data()[k * e + o]).sum::<f64>();
                    cat[i * h * e + head * e + o] = pv[i][o] + fc;
                }
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for o in 0..d {
            out[i * d + o] = w.bo.data()[o] + (0..h * e).map(|k| cat[i * h * e + k] * w.wo.data()[k * d + o]).sum::<f64>();
        }
    }
    out
}

#[test]
fn batched_op_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, h, e) = (5, 2, 3);
    let w = Weights::random(&mut rng, d, h, e);
    let x = uniform(&mut rng, &[16, d], 1.0);
    let grid = GridMeta::new(4, 4).unwrap();
    let got = run(&x, grid, 1, &spec(h, e, 4, 1), &w);
    let quadrant = |i: usize| (i / 4 / 2) * 2 + (i % 4) / 2;
    let want = reference(&x, &quadrant, 4, h, e, &w);
    assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9), "{:?} vs {want:?}", got.data());
}

#[test]
fn regions_match_tile_by_tile_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, h, e) = (4, 2, 2);
    let w = Weights::random(&mut rng, d, h, e);
    let grid = GridMeta::new(8, 8).unwrap();
    let batch = 2;
    let x = uniform(&mut rng, &[batch * 64, d], 1.0);
    let got = run(&x, grid, batch, &spec(h, e, 4, 4), &w);
    for b in 0..batch {
        let img = Tensor::new(&[64, d], x.data()[b * 64 * d..(b + 1) * 64 * d].to_vec()).unwrap();
        let ps = PointSet::new(img, grid, ChannelLayout::Features).unwrap();
        let mut view = partition_regions(&ps, 4).unwrap();
        for tile in &mut view.tiles {
            let y = run(&tile.features, view.layout.tile, 1, &spec(h, e, 4, 1), &w);
            tile.features = y;
        }
        let merged = crate::points::merge_regions(&view).unwrap();
        let part = &got.data()[b * 64 * d..(b + 1) * 64 * d];
        assert!(merged.features.data().iter().zip(part).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn forced_partition_equals_direct_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Weights::random(&mut rng, 3, 2, 2);
    let grid = GridMeta::new(6, 6).unwrap();
    let x = uniform(&mut rng, &[72, 3], 1.0);
    let direct = run(&x, grid, 2, &spec(2, 2, 9, 1), &w);
    let forced = run(&x, grid, 2, &ClusterSpec { force_partition: true, ..spec(2, 2, 9, 1) }, &w);
    assert_eq!(direct, forced);
}

#[test]
fn trace_records_assignments_and_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, h, e, c) = (4, 3, 2, 4);
    let w = Weights::random(&mut rng, d, h, e);
    let grid = GridMeta::new(8, 8).unwrap();
    let mut tape = Tape::new();
    let features = tape.constant(uniform(&mut rng, &[128, d], 1.0));
    let vars = w.bind(&mut tape);
    let mut records = Vec::new();
    let pb = PointBatch { features, grid, batch: 2 };
    context_cluster(&mut tape, &pb, &spec(h, e, c, 4), &vars, Some(&mut records)).unwrap();
    let r = &records[0];
    assert_eq!((r.assignments.len(), r.assignments[0].len(), r.assignments[0][0].len()), (2, h, 64));
    assert!(r.assignments.iter().flatten().flatten().all(|&j| j < c));
    assert_eq!(r.cluster_sizes.len(), 2 * 4 * h * c);
    assert_eq!(r.cluster_sizes.iter().sum::<usize>(), 128 * h);
    assert_eq!(r.similarity_macs, (128 * h * c * e) as u64);
    assert!(r.similarity_min >= -1.0 && r.similarity_max <= 1.0);
    assert_eq!(r.region_of_point[0], 0);
    assert_eq!(r.region_of_point[63], 3);
}

#[test]
fn center_updates_run_on_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = Weights::random(&mut rng, 3, 1, 3);
    let grid = GridMeta::new(4, 4).unwrap();
    let x = uniform(&mut rng, &[16, 3], 1.0);
    let once = run(&x, grid, 1, &ClusterSpec { center_update_iters: 2, ..spec(1, 3, 4, 1) }, &w);
    assert!(once.is_finite());
    assert_eq!(once.shape(), &[16, 3]);
}

#[test]
fn block_with_zero_output_maps_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, h, e) = (4, 2, 2);
    let mut w = Weights::random(&mut rng, d, h, e);
    w.wo = Tensor::zeros(&[h * e, d]);
    w.bo = Tensor::zeros(&[d]);
    let mut tape = Tape::new();
    let x = uniform(&mut rng, &[16, d], 1.0);
    let features = tape.constant(x.clone());
    let mut ones = || tape.param(Tensor::full(&[d], 1.0));
    let (n1w, n2w) = (ones(), ones());
    let zero_d = |tape: &mut Tape<f64>| tape.param(Tensor::zeros(&[d]));
    let (n1b, n2b) = (zero_d(&mut tape), zero_d(&mut tape));
    let vars = BlockVars {
        norm1_weight: n1w,
        norm1_bias: n1b,
        cluster: w.bind(&mut tape),
        norm2_weight: n2w,
        norm2_bias: n2b,
        fc1_weight: tape.param(uniform(&mut rng, &[d, 2 * d], 1.0)),
        fc1_bias: tape.param(Tensor::zeros(&[2 * d])),
        fc2_weight: tape.param(Tensor::zeros(&[2 * d, d])),
        fc2_bias: tape.param(Tensor::zeros(&[d])),
    };
    let bs = BlockSpec {
        cluster: spec(h, e, 4, 1),
        mlp_ratio: 2,
        use_cluster: true,
    };
    let pb = PointBatch { features, grid: GridMeta::new(4, 4).unwrap(), batch: 1 };
    let y = coc_block(&mut tape, &pb, &bs, &vars, None).unwrap();
    assert_eq!(tape.value(y.features), &x);
}

#[test]
fn gradients_reach_every_cluster_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = Weights::random(&mut rng, 3, 2, 2);
    let mut tape = Tape::new();
    let features = tape.param(uniform(&mut rng, &[16, 3], 1.0));
    let vars = w.bind(&mut tape);
    let pb = PointBatch { features, grid: GridMeta::new(4, 4).unwrap(), batch: 1 };
    let out = context_cluster(&mut tape, &pb, &spec(2, 2, 4, 1), &vars, None).unwrap();
    let loss = tape.sum(out).unwrap();
    let g = tape.backward(loss).unwrap();
    for v in [vars.sim_weight, vars.value_weight, vars.alpha, vars.beta, vars.dispatch_weight, vars.fuse_weight, features] {
        assert!(g.wrt(v).norm() > 0.0, "zero gradient for {v:?}");
    }
}

/// Runs `aggregate_dispatch` on plain tensors.
fn mix(values: &Tensor<f64>, weights: &[f64], cluster: &[usize], vc: &Tensor<f64>, wf: &Tensor<f64>, bf: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(values.clone());
    let wt = tape.constant(Tensor::new(&[weights.len()], weights.to_vec()).unwrap());
    let c = tape.constant(vc.clone());
    let f = tape.constant(wf.clone());
    let b = tape.constant(bf.clone());
    let out = aggregate_dispatch(&mut tape, v, wt, cluster, vc.shape()[0], c, f, b).unwrap();
    tape.value(out).clone()
}

proptest! {
    #[test]
    fn aggregate_is_convex(seed in 0u64..1000, m in 0usize..8, alpha in 0.1f64..5.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = uniform(&mut rng, &[m, 3], 4.0);
        let vc = uniform(&mut rng, &[3], 4.0);
        let s: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = aggregate(&v, vc.data(), &s, alpha, beta).unwrap();
        for k in 0..3 {
            let col = (0..m).map(|i| v.data()[i * 3 + k]).chain([vc.data()[k]]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            prop_assert!(g[k] >= lo - 1e-12 && g[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn assignment_matches_brute_force(seed in 0u64..1000, c in 1usize..6, n in 1usize..12, levels in 1u32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..c * n).map(|_| rng.gen_range(0..=levels) as f64 / levels as f64).collect();
        let s = SimilarityMatrix::new(t(&[c, n], &vals)).unwrap();
        let a = assign_clusters(&s);
        for i in 0..n {
            let best = (0..c).map(|j| vals[j * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let first = (0..c).find(|&j| vals[j * n + i] == best).unwrap();
            prop_assert_eq!(a.center_index[i], first);
        }
        prop_assert_eq!(a.cluster_sizes.iter().sum::<usize>(), n);
    }

    #[test]
    fn cosine_is_bounded(seed in 0u64..1000, zero_row in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = uniform(&mut rng, &[6, 4], 3.0);
        if zero_row {
            p.data_mut()[..4].fill(0.0);
        }
        let c = uniform(&mut rng, &[3, 4], 3.0);
        let s = cosine_similarity(&p, &c, COSINE_EPS).unwrap();
        prop_assert!(s.values.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mixing_is_permutation_equivariant(seed in 0u64..1000, rows in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = 3;
        let values = uniform(&mut rng, &[rows, 4], 2.0);
        let weights: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cluster: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..clusters)).collect();
        let vc = uniform(&mut rng, &[clusters, 4], 2.0);
        let wf = uniform(&mut rng, &[4, 4], 1.0);
        let bf = uniform(&mut rng, &[4], 1.0);
        let base = mix(&values, &weights, &cluster, &vc, &wf, &bf);

        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pv: Vec<f64> = perm.iter().flat_map(|&i| values.row(i).to_vec()).collect();
        let pw: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
        let pc: Vec<usize> = perm.iter().map(|&i| cluster[i]).collect();
        let permuted = mix(&Tensor::new(&[rows, 4], pv).unwrap(), &pw, &pc, &vc, &wf, &bf);
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in permuted.row(r).iter().zip(base.row(i)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
