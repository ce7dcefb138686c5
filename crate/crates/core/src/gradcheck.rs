//! Central finite-difference checks of every differentiable operation.
//!
//! Each check builds a small graph from random double-precision inputs and
//! compares the tape's gradient of `sum(R ⊙ out)` (random `R`) with central
//! differences, per input element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{coc_block, context_cluster, BlockSpec, BlockVars, ClusterSpec, ClusterVars};
use crate::engine::{BinaryKind, ReduceKind, Tape, Tensor, Var};
use crate::error::Result;
use crate::points::{reduce_points, GridMeta, PointBatch, ReducerSpec, ReducerVars};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync;

/// A graph under test and the inputs it is differentiated against.
pub struct OpCheck {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    build: Box<Build>,
}

impl OpCheck {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    fn forward(&self, inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let loss = match weights {
            Some(r) => {
                let r = tape.constant(r.clone());
                let prod = tape.mul(out, r)?;
                tape.sum(prod)?
            }
            None => out,
        };
        Ok((tape, loss, vars))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and numeric gradients for every input element.
///
/// With `corrupt`, the analytic gradient is scaled by 1.01 first; a
/// working harness must then report a failure.
pub fn run_check(check: &OpCheck, seed: u64, corrupt: bool) -> Result<CheckResult> {
    let (tape, out, _) = check.forward(&check.inputs, None)?;
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let weights = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let (tape, loss, vars) = check.forward(&check.inputs, Some(&weights))?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    for (k, &v) in vars.iter().enumerate() {
        let mut analytic = grads.wrt(v);
        if corrupt {
            analytic = analytic.map(|g| g * 1.01);
        }
        for i in 0..check.inputs[k].numel() {
            let mut probe = check.inputs.clone();
            probe[k].data_mut()[i] += FD_STEP;
            let (t, l, _) = check.forward(&probe, Some(&weights))?;
            let plus = t.value(l).data()[0];
            probe[k].data_mut()[i] -= 2.0 * FD_STEP;
            let (t, l, _) = check.forward(&probe, Some(&weights))?;
            let minus = t.value(l).data()[0];
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
            elements += 1;
        }
    }
    Ok(CheckResult {
        name: check.name.to_string(),
        max_rel_error: worst,
        elements,
        passed: worst < TOLERANCE,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

fn cluster_inputs(rng: &mut ChaCha8Rng, d: usize, h: usize, e: usize) -> Vec<Tensor<f64>> {
    vec![
        uniform(rng, &[d, h * e], -0.8, 0.8),
        uniform(rng, &[h * e], -0.2, 0.2),
        uniform(rng, &[d, h * e], -0.8, 0.8),
        uniform(rng, &[h * e], -0.2, 0.2),
        uniform(rng, &[h], 0.5, 1.5),
        uniform(rng, &[h], -0.3, 0.3),
        uniform(rng, &[e, e], -0.8, 0.8),
        uniform(rng, &[e], -0.2, 0.2),
        uniform(rng, &[h * e, d], -0.8, 0.8),
        uniform(rng, &[d], -0.2, 0.2),
    ]
}

fn cluster_vars(v: &[Var]) -> ClusterVars {
    ClusterVars {
        sim_weight: v[0],
        sim_bias: v[1],
        value_weight: v[2],
        value_bias: v[3],
        alpha: v[4],
        beta: v[5],
        dispatch_weight: v[6],
        dispatch_bias: v[7],
        fuse_weight: v[8],
        fuse_bias: v[9],
    }
}

fn cluster_check(name: &'static str, rng: &mut ChaCha8Rng, side: usize, spec: ClusterSpec, d: usize) -> OpCheck {
    let mut inputs = vec![uniform(rng, &[side * side, d], -1.0, 1.0)];
    inputs.extend(cluster_inputs(rng, d, spec.heads, spec.head_dim));
    OpCheck::new(name, inputs, move |tape, v| {
        let grid = GridMeta::new(side, side)?;
        let pb = PointBatch {
            features: v[0],
            grid,
            batch: 1,
        };
        context_cluster(tape, &pb, &spec, &cluster_vars(&v[1..]), None)
    })
}

/// Every registered check, built from `seed`.
pub fn registry(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut checks = vec![
        OpCheck::new("matmul", vec![uniform(r, &[3, 4], -1., 1.), uniform(r, &[4, 2], -1., 1.)], |t, v| t.matmul(v[0], v[1])),
        OpCheck::new(
            "linear",
            vec![uniform(r, &[3, 4], -1., 1.), uniform(r, &[4, 5], -1., 1.), uniform(r, &[5], -1., 1.)],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
    ];
    for (name, kind) in [("add", BinaryKind::Add), ("sub", BinaryKind::Sub), ("mul", BinaryKind::Mul), ("div", BinaryKind::Div)] {
        checks.push(OpCheck::new(name, vec![uniform(r, &[2, 3], -1., 1.), uniform(r, &[2, 3], 0.5, 2.)], move |t, v| {
            t.binary(kind, v[0], v[1])
        }));
    }
    checks.extend([
        OpCheck::new("div_scalar_operand", vec![uniform(r, &[1], 0.5, 2.), uniform(r, &[2, 3], 0.5, 2.)], |t, v| t.div(v[0], v[1])),
        OpCheck::new("scale", vec![uniform(r, &[4], -1., 1.)], |t, v| t.scale(v[0], -1.7)),
        OpCheck::new("add_scalar", vec![uniform(r, &[4], -1., 1.)], |t, v| t.add_scalar(v[0], 0.3)),
        OpCheck::new("sigmoid", vec![uniform(r, &[6], -4., 4.)], |t, v| t.sigmoid(v[0])),
        OpCheck::new("gelu", vec![uniform(r, &[6], -4., 4.)], |t, v| t.gelu(v[0])),
        OpCheck::new("sum", vec![uniform(r, &[3, 4], -1., 1.)], |t, v| t.reduce(ReduceKind::Sum, v[0], Some(1))),
        OpCheck::new("mean", vec![uniform(r, &[3, 4], -1., 1.)], |t, v| t.reduce(ReduceKind::Mean, v[0], Some(0))),
        OpCheck::new("max_with_argmax", vec![uniform(r, &[4, 5], -1., 1.)], |t, v| Ok(t.max_with_argmax(v[0], 1)?.0)),
        OpCheck::new("concat", vec![uniform(r, &[2, 3], -1., 1.), uniform(r, &[2, 2], -1., 1.)], |t, v| t.concat(&[v[0], v[1]], 1)),
        OpCheck::new("slice", vec![uniform(r, &[4, 3], -1., 1.)], |t, v| t.slice(v[0], 0, 1, 2)),
        OpCheck::new("reshape", vec![uniform(r, &[4, 3], -1., 1.)], |t, v| {
            let a = t.reshape(v[0], &[2, 6])?;
            t.sigmoid(a)
        }),
        OpCheck::new("transpose", vec![uniform(r, &[4, 3], -1., 1.)], |t, v| t.transpose(v[0])),
        OpCheck::new("gather_rows", vec![uniform(r, &[4, 3], -1., 1.)], |t, v| t.gather_rows(v[0], &[3, 0, 0, 2])),
        OpCheck::new("scatter_rows", vec![uniform(r, &[5, 2], -1., 1.)], |t, v| t.scatter_rows(v[0], &[1, 0, 1, 2, 1], 3)),
        OpCheck::new("scale_rows", vec![uniform(r, &[4, 3], -1., 1.), uniform(r, &[4], -1., 1.)], |t, v| t.scale_rows(v[0], v[1])),
        OpCheck::new(
            "col_affine",
            vec![uniform(r, &[4, 3], -1., 1.), uniform(r, &[3], -1., 1.), uniform(r, &[3], -1., 1.)],
            |t, v| t.col_affine(v[0], v[1], v[2]),
        ),
        OpCheck::new(
            "group_norm",
            vec![uniform(r, &[3, 8], -1., 1.), uniform(r, &[8], 0.5, 1.5), uniform(r, &[8], -0.5, 0.5)],
            |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5),
        ),
        OpCheck::new("grouped_cosine", vec![uniform(r, &[5, 3], -1., 1.), uniform(r, &[4, 3], -1., 1.)], |t, v| {
            t.grouped_cosine(v[0], v[1], &[0, 1, 1, 0, 1], 2, 1e-6)
        }),
        OpCheck::new("cross_entropy", vec![uniform(r, &[3, 4], -2., 2.)], |t, v| t.cross_entropy(v[0], &[2, 0, 3])),
        OpCheck::new(
            "reduce_points",
            vec![uniform(r, &[2 * 16, 3], -1., 1.), uniform(r, &[27, 4], -0.5, 0.5), uniform(r, &[4], -0.2, 0.2), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.2, 0.2)],
            |t, v| {
                let pb = PointBatch {
                    features: v[0],
                    grid: GridMeta::new(4, 4)?,
                    batch: 2,
                };
                let spec = ReducerSpec {
                    k_neighbors: 9,
                    downsample_r: 4,
                };
                let rv = ReducerVars {
                    weight: v[1],
                    bias: v[2],
                    norm_weight: v[3],
                    norm_bias: v[4],
                };
                Ok(reduce_points(t, &pb, spec, &rv)?.features)
            },
        ),
    ]);
    let spec = |heads, head_dim, local_centers, regions, iters| ClusterSpec {
        heads,
        head_dim,
        local_centers,
        regions,
        center_update_iters: iters,
        force_partition: false,
    };
    checks.push(cluster_check("context_cluster", r, 4, spec(2, 3, 4, 1, 0), 5));
    checks.push(cluster_check("context_cluster_regions", r, 8, spec(2, 2, 4, 4, 0), 3));
    checks.push(cluster_check("context_cluster_center_updates", r, 4, spec(1, 3, 4, 1, 1), 4));

    let (d, h, e, ratio) = (8, 2, 4, 2);
    let mut inputs = vec![uniform(r, &[16, d], -1., 1.), uniform(r, &[d], 0.5, 1.5), uniform(r, &[d], -0.3, 0.3)];
    inputs.extend(cluster_inputs(r, d, h, e));
    inputs.extend([
        uniform(r, &[d], 0.5, 1.5),
        uniform(r, &[d], -0.3, 0.3),
        uniform(r, &[d, ratio * d], -0.5, 0.5),
        uniform(r, &[ratio * d], -0.2, 0.2),
        uniform(r, &[ratio * d, d], -0.5, 0.5),
        uniform(r, &[d], -0.2, 0.2),
    ]);
    checks.push(OpCheck::new("coc_block", inputs, move |t, v| {
        let pb = PointBatch {
            features: v[0],
            grid: GridMeta::new(4, 4)?,
            batch: 1,
        };
        let bs = BlockSpec {
            cluster: spec(h, e, 4, 1, 0),
            mlp_ratio: ratio,
            use_cluster: true,
        };
        let bv = BlockVars {
            norm1_weight: v[1],
            norm1_bias: v[2],
            cluster: cluster_vars(&v[3..13]),
            norm2_weight: v[13],
            norm2_bias: v[14],
            fc1_weight: v[15],
            fc1_bias: v[16],
            fc2_weight: v[17],
            fc2_bias: v[18],
        };
        Ok(coc_block(t, &pb, &bs, &bv, None)?.features)
    }));
    checks
}

/// Runs the whole registry; `inject_fault` adds a corrupted-gradient check.
pub fn run_gradcheck(seed: u64, inject_fault: bool) -> Result<GradcheckReport> {
    let checks = registry(seed);
    let mut results = checks
        .iter()
        .enumerate()
        .map(|(i, c)| run_check(c, seed.wrapping_add(i as u64), false))
        .collect::<Result<Vec<_>>>()?;
    if inject_fault {
        let mut r = run_check(&checks[0], seed, true)?;
        r.name = format!("injected_fault({})", r.name);
        results.push(r);
    }
    Ok(GradcheckReport {
        results,
        tolerance: TOLERANCE,
    })
}
