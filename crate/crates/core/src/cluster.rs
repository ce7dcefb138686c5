//! The context-cluster token mixer.
//!
//! Points are projected into a similarity space and a value space. Centers
//! are proposed on a uniform grid inside every region; each point joins the
//! center it is most cosine-similar to. Every cluster is aggregated into a
//! single feature `g`, which is then dispatched back to the cluster's points
//! weighted by their similarity.
//!
//! The plain-tensor functions here (`aggregate`, `dispatch`, ...) state the
//! math one cluster or one point at a time. [`context_cluster`] is the batched,
//! differentiable version used by the model.

use crate::engine::{sigmoid, Scalar, Tape, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::points::{GridMeta, PointBatch, PointSet, RegionLayout};

/// Zero-vector guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-6;

/// `c × n` cosine similarities between centers and points.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values })
    }

    pub fn centers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, center: usize, point: usize) -> T {
        self.values.data()[center * self.points() + point]
    }
}

/// Hard assignment of every point to one center.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub center_index: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_indices(center_index: Vec<usize>, centers: usize) -> Result<Self> {
        let mut cluster_sizes = vec![0; centers];
        for &j in &center_index {
            if j >= centers {
                return Err(Error::Index(format!("center {j} out of range for {centers}")));
            }
            cluster_sizes[j] += 1;
        }
        Ok(Self {
            center_index,
            cluster_sizes,
        })
    }

    /// Points assigned to center `j`, in point order.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.center_index
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c == j)
            .map(|(i, _)| i)
            .collect()
    }
}

fn square_side(c: usize) -> Result<usize> {
    let s = (c as f64).sqrt().round() as usize;
    if s == 0 || s * s != c {
        return Err(Error::Config(format!("{c} centers do not form a square grid")));
    }
    Ok(s)
}

/// Block boundaries splitting `len` cells into `parts` contiguous runs.
///
/// Run `k` covers `ceil(k·len/parts) .. ceil((k+1)·len/parts)`, so 7 cells in
/// 2 runs give 4 + 3.
fn split_bounds(len: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|k| (k * len).div_ceil(parts)).collect()
}

/// Center block of every cell of `tile` (row-major) for a `√c × √c` center grid.
pub fn center_blocks(tile: GridMeta, c: usize) -> Result<Vec<usize>> {
    let side = square_side(c)?;
    if tile.height < side || tile.width < side {
        return Err(Error::Config(format!(
            "a {tile} region cannot hold a {side}x{side} center grid"
        )));
    }
    let rows = split_bounds(tile.height, side);
    let cols = split_bounds(tile.width, side);
    let band = |bounds: &[usize], v: usize| bounds.windows(2).position(|w| v >= w[0] && v < w[1]).unwrap_or(0);
    let mut out = Vec::with_capacity(tile.len());
    for r in 0..tile.height {
        let br = band(&rows, r);
        for col in 0..tile.width {
            out.push(br * side + band(&cols, col));
        }
    }
    Ok(out)
}

/// Grid-proposed centers: each is the mean of the points in its block.
pub fn propose_centers<T: Scalar>(region: &PointSet<T>, c: usize) -> Result<Tensor<T>> {
    let blocks = center_blocks(region.grid, c)?;
    let d = region.dim();
    let mut sums = vec![T::zero(); c * d];
    let mut counts = vec![0usize; c];
    for (i, &b) in blocks.iter().enumerate() {
        counts[b] += 1;
        for (acc, &v) in sums[b * d..(b + 1) * d].iter_mut().zip(region.features.row(i)) {
            *acc += v;
        }
    }
    for (b, &n) in counts.iter().enumerate() {
        let inv = T::one() / T::of(n as f64);
        sums[b * d..(b + 1) * d].iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&[c, d], sums)
}

/// Where farthest-point sampling starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    First,
    Seeded(u64),
}

/// Farthest-point sampling on positions; ties go to the lowest index.
pub fn farthest_point_sampling(positions: &[[f64; 2]], c: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = positions.len();
    if c == 0 || n < c {
        return Err(Error::Domain(format!("cannot sample {c} centers from {n} points")));
    }
    let first = match start {
        FpsStart::First => 0,
        FpsStart::Seeded(seed) => {
            use rand::{Rng, SeedableRng};
            rand_chacha::ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)
        }
    };
    let dist2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut picked = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(c);
    let mut current = first;
    loop {
        picked[current] = true;
        out.push(current);
        if out.len() == c {
            break;
        }
        for i in 0..n {
            nearest[i] = nearest[i].min(dist2(positions[i], positions[current]));
        }
        current = (0..n)
            .filter(|&i| !picked[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if nearest[b] >= nearest[i] => Some(b),
                _ => Some(i),
            })
            .expect("fewer picks than points");
    }
    Ok(out)
}

/// Centers for point sets without a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FpsCenters<T> {
    pub indices: Vec<usize>,
    /// Mean feature of each center's `k` nearest points by position.
    pub features: Tensor<T>,
}

pub fn propose_centers_fps<T: Scalar>(
    features: &Tensor<T>,
    positions: &[[f64; 2]],
    c: usize,
    k: usize,
    start: FpsStart,
) -> Result<FpsCenters<T>> {
    let (n, d) = features.dims2()?;
    if positions.len() != n {
        return Err(Error::Dimension(format!("{} positions for {n} points", positions.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Domain(format!("cannot average {k} neighbors of {n} points")));
    }
    let indices = farthest_point_sampling(positions, c, start)?;
    let mut out = Vec::with_capacity(c * d);
    for &ci in &indices {
        let p = positions[ci];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let da = (positions[a][0] - p[0]).powi(2) + (positions[a][1] - p[1]).powi(2);
            let db = (positions[b][0] - p[0]).powi(2) + (positions[b][1] - p[1]).powi(2);
            da.total_cmp(&db).then(a.cmp(&b))
        });
        let mut mean = vec![T::zero(); d];
        for &i in &order[..k] {
            for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        let inv = T::one() / T::of(k as f64);
        out.extend(mean.into_iter().map(|v| v * inv));
    }
    Ok(FpsCenters {
        indices,
        features: Tensor::new(&[c, d], out)?,
    })
}

/// `S[j, i] = ⟨center_j, p_i⟩ / (max(‖center_j‖, ε)·max(‖p_i‖, ε))`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(points: &Tensor<T>, centers: &Tensor<T>, eps: T) -> Result<SimilarityMatrix<T>> {
    let (n, d) = points.dims2()?;
    let (c, d2) = centers.dims2()?;
    if d != d2 {
        return Err(Error::Dimension(format!("points have {d} channels, centers {d2}")));
    }
    let norm = |row: &[T]| row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
    let mut out = Vec::with_capacity(c * n);
    for j in 0..c {
        let cj = centers.row(j);
        let nc = norm(cj);
        for i in 0..n {
            let pi = points.row(i);
            let dot: T = cj.iter().zip(pi).map(|(&a, &b)| a * b).sum();
            let s = dot / (nc * norm(pi));
            out.push(s.max(-T::one()).min(T::one()));
        }
    }
    SimilarityMatrix::new(Tensor::new(&[c, n], out)?)
}

/// Each point goes to its most similar center; ties resolve to the lowest index.
pub fn assign_clusters<T: Scalar>(s: &SimilarityMatrix<T>) -> ClusterAssignment {
    let (c, n) = (s.centers(), s.points());
    let center_index = (0..n)
        .map(|i| {
            (1..c).fold(0, |best, j| if s.get(j, i) > s.get(best, i) { j } else { best })
        })
        .collect();
    ClusterAssignment::from_indices(center_index, c).expect("indices below c")
}

/// Similarity-to-weight map `sig(α·s + β)`.
pub fn similarity_weight<T: Scalar>(s: T, alpha: T, beta: T) -> T {
    sigmoid(alpha * s + beta)
}

/// Aggregated cluster feature
/// `g = (v_c + Σ sig(α·s_i + β)·v_i) / (1 + Σ sig(α·s_i + β))`.
///
/// `values` holds the `m` member points in value space (`m` may be zero).
pub fn aggregate<T: Scalar>(values: &Tensor<T>, value_center: &[T], s: &[T], alpha: T, beta: T) -> Result<Vec<T>> {
    let (m, d) = if values.numel() == 0 {
        (0, value_center.len())
    } else {
        values.dims2()?
    };
    if s.len() != m || d != value_center.len() {
        return Err(Error::Dimension(format!(
            "{m} members of width {d}, {} similarities, center width {}",
            s.len(),
            value_center.len()
        )));
    }
    let mut num = value_center.to_vec();
    let mut den = T::one();
    for (i, &si) in s.iter().enumerate() {
        let w = similarity_weight(si, alpha, beta);
        den += w;
        for (acc, &v) in num.iter_mut().zip(values.row(i)) {
            *acc += w * v;
        }
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// Dispatched point `p' = p + (sig(α·s + β)·g)·W_f + b_f`.
pub fn dispatch<T: Scalar>(
    point: &[T],
    g: &[T],
    s: T,
    alpha: T,
    beta: T,
    fc_weight: &Tensor<T>,
    fc_bias: Option<&[T]>,
) -> Result<Vec<T>> {
    let (din, dout) = fc_weight.dims2()?;
    if g.len() != din || point.len() != dout || fc_bias.is_some_and(|b| b.len() != dout) {
        return Err(Error::Dimension(format!(
            "dispatch of a {}-wide aggregate through a {din}x{dout} map onto a {}-wide point",
            g.len(),
            point.len()
        )));
    }
    let w = similarity_weight(s, alpha, beta);
    let mut out = point.to_vec();
    for (k, &gk) in g.iter().enumerate() {
        let scaled = w * gk;
        for (o, &wt) in out.iter_mut().zip(fc_weight.row(k)) {
            *o += scaled * wt;
        }
    }
    if let Some(b) = fc_bias {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Re-estimates centers as member means and re-assigns, `iters` times.
///
/// Empty clusters keep their previous center.
pub fn update_centers<T: Scalar>(
    points: &Tensor<T>,
    assignment: &ClusterAssignment,
    centers: &Tensor<T>,
    iters: usize,
) -> Result<(Tensor<T>, ClusterAssignment)> {
    let (n, d) = points.dims2()?;
    let (c, _) = centers.dims2()?;
    if assignment.center_index.len() != n {
        return Err(Error::Dimension(format!(
            "assignment covers {} of {n} points",
            assignment.center_index.len()
        )));
    }
    let mut centers = centers.clone();
    let mut assignment = assignment.clone();
    for _ in 0..iters {
        let mut sums = vec![T::zero(); c * d];
        for (i, &j) in assignment.center_index.iter().enumerate() {
            for (acc, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(points.row(i)) {
                *acc += v;
            }
        }
        let data = centers.data_mut();
        for (j, &m) in assignment.cluster_sizes.iter().enumerate() {
            if m > 0 {
                let inv = T::one() / T::of(m as f64);
                for (dst, &s) in data[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
        let s = cosine_similarity(points, &centers, T::of(COSINE_EPS))?;
        assignment = assign_clusters(&s);
    }
    Ok((centers, assignment))
}

// ----- batched, differentiable operator ---------------------------------------

/// Shape of one context-cluster operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClusterSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub local_centers: usize,
    pub regions: usize,
    pub center_update_iters: usize,
    /// Route through the partition/merge gathers even when `regions == 1`.
    pub force_partition: bool,
}

/// Context-cluster weights bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ClusterVars {
    /// `d × (heads·head_dim)` similarity projection and bias.
    pub sim_weight: Var,
    pub sim_bias: Var,
    /// `d × (heads·head_dim)` value projection and bias.
    pub value_weight: Var,
    pub value_bias: Var,
    /// One scale and one shift per head.
    pub alpha: Var,
    pub beta: Var,
    /// `head_dim × head_dim` dispatch map shared by all heads, plus bias.
    pub dispatch_weight: Var,
    pub dispatch_bias: Var,
    /// `(heads·head_dim) × d` head fusion and bias.
    pub fuse_weight: Var,
    pub fuse_bias: Var,
}

/// What one context-cluster call did, for visualization and accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRecord {
    pub grid: GridMeta,
    pub tile: GridMeta,
    pub regions: usize,
    pub local_centers: usize,
    pub heads: usize,
    pub batch: usize,
    /// `assignments[image][head][point]`: region-local center of every
    /// point, points in grid order.
    pub assignments: Vec<Vec<Vec<usize>>>,
    /// Region of every grid point.
    pub region_of_point: Vec<usize>,
    /// Members per `(image, region, head, center)`.
    pub cluster_sizes: Vec<usize>,
    pub similarity_min: f64,
    pub similarity_max: f64,
    pub similarity_mean: f64,
    pub similarity_macs: u64,
}

/// Precomputed row bookkeeping for one batched call.
struct ClusterLayout {
    region: RegionLayout,
    /// Present when rows are physically reordered into region-major order.
    order: Option<(Vec<usize>, Vec<usize>)>,
    /// Cosine group (`(image·regions + region)·heads + head`) of every head row.
    head_group: Vec<usize>,
    /// Center segment (`head_group·c + block`) of every head row.
    segment: Vec<usize>,
    /// `1 / |segment|` per segment.
    inv_count: Vec<f64>,
    groups: usize,
}

impl ClusterLayout {
    fn new(grid: GridMeta, batch: usize, spec: &ClusterSpec) -> Result<Self> {
        let region = RegionLayout::new(grid, spec.regions)?;
        let blocks = center_blocks(region.tile, spec.local_centers)?;
        let (n, tile_len, h, c) = (grid.len(), region.tile.len(), spec.heads, spec.local_centers);
        let groups = batch * spec.regions * h;
        let mut head_group = Vec::with_capacity(batch * n * h);
        let mut segment = Vec::with_capacity(batch * n * h);
        for p in 0..batch * n {
            let (img, local) = (p / n, p % n);
            let reg = local / tile_len;
            let block = blocks[local % tile_len];
            for head in 0..h {
                let g = ((img * spec.regions + reg) * h) + head;
                head_group.push(g);
                segment.push(g * c + block);
            }
        }
        let mut counts = vec![0usize; groups * c];
        for &s in &segment {
            counts[s] += 1;
        }
        let inv_count = counts.iter().map(|&k| 1.0 / k as f64).collect();
        let order = (spec.regions > 1 || spec.force_partition)
            .then(|| (region.batched_order(batch), region.batched_inverse(batch)));
        Ok(Self {
            region,
            order,
            head_group,
            segment,
            inv_count,
            groups,
        })
    }
}

/// Segment means of the rows of `x` (one row per head row).
fn segment_mean<T: Scalar>(tape: &mut Tape<T>, x: Var, segment: &[usize], inv_count: &[f64]) -> Result<Var> {
    let sums = tape.scatter_rows(x, segment, inv_count.len())?;
    let inv = tape.constant(Tensor::new(&[inv_count.len()], inv_count.iter().map(|&v| T::of(v)).collect())?);
    tape.scale_rows(sums, inv)
}

/// Cluster aggregation followed by dispatch for every head row.
///
/// `values` is `rows × d'`, `weights` the `rows` similarity weights
/// `sig(α·s + β)`, `cluster[r]` the cluster of row `r` and `value_centers`
/// the `clusters × d'` value-space centers. Returns
/// `values + ((weight·g[cluster])·W_f + b_f)` per row.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_dispatch<T: Scalar>(
    tape: &mut Tape<T>,
    values: Var,
    weights: Var,
    cluster: &[usize],
    clusters: usize,
    value_centers: Var,
    dispatch_weight: Var,
    dispatch_bias: Var,
) -> Result<Var> {
    let rows = cluster.len();
    let weighted = tape.scale_rows(values, weights)?;
    let num = tape.scatter_rows(weighted, cluster, clusters)?;
    let num = tape.add(num, value_centers)?;
    let w_col = tape.reshape(weights, &[rows, 1])?;
    let den = tape.scatter_rows(w_col, cluster, clusters)?;
    let den = tape.add_scalar(den, T::one())?;
    let one = tape.constant(Tensor::scalar(T::one()));
    let inv_den = tape.div(one, den)?;
    let g = tape.scale_rows(num, inv_den)?;
    let g_rows = tape.gather_rows(g, cluster)?;
    let scaled = tape.scale_rows(g_rows, weights)?;
    let fc = tape.linear(scaled, dispatch_weight, Some(dispatch_bias))?;
    tape.add(values, fc)
}

/// Batched multi-head context clustering of `x` (already normalized).
///
/// Returns the fused `(batch·n) × d` output in the input row order.
pub fn context_cluster<T: Scalar>(
    tape: &mut Tape<T>,
    x: &PointBatch,
    spec: &ClusterSpec,
    vars: &ClusterVars,
    trace: Option<&mut Vec<ClusterRecord>>,
) -> Result<Var> {
    let layout = ClusterLayout::new(x.grid, x.batch, spec)?;
    let rows = x.rows();
    let (h, e, c) = (spec.heads, spec.head_dim, spec.local_centers);
    let head_rows = rows * h;
    let clusters = layout.groups * c;
    let sim_macs_before = tape.counters().similarity;

    let input = match &layout.order {
        Some((order, _)) => tape.gather_rows(x.features, order)?,
        None => x.features,
    };
    let ps = tape.linear(input, vars.sim_weight, Some(vars.sim_bias))?;
    let pv = tape.linear(input, vars.value_weight, Some(vars.value_bias))?;
    let ps = tape.reshape(ps, &[head_rows, e])?;
    let pv = tape.reshape(pv, &[head_rows, e])?;

    let mut centers = segment_mean(tape, ps, &layout.segment, &layout.inv_count)?;
    let value_centers = segment_mean(tape, pv, &layout.segment, &layout.inv_count)?;

    let eps = T::of(COSINE_EPS);
    let sim = tape.grouped_cosine(ps, centers, &layout.head_group, c, eps)?;
    let (mut best, mut argmax) = tape.max_with_argmax(sim, 1)?;
    for _ in 0..spec.center_update_iters {
        let cluster: Vec<usize> = layout.head_group.iter().zip(&argmax).map(|(&g, &j)| g * c + j).collect();
        let mut counts = vec![0usize; clusters];
        for &k in &cluster {
            counts[k] += 1;
        }
        let sums = tape.scatter_rows(ps, &cluster, clusters)?;
        let inv: Vec<T> = counts.iter().map(|&k| if k > 0 { T::one() / T::of(k as f64) } else { T::zero() }).collect();
        let keep: Vec<T> = counts.iter().map(|&k| if k == 0 { T::one() } else { T::zero() }).collect();
        let inv = tape.constant(Tensor::new(&[clusters], inv)?);
        let keep = tape.constant(Tensor::new(&[clusters], keep)?);
        let means = tape.scale_rows(sums, inv)?;
        let kept = tape.scale_rows(centers, keep)?;
        centers = tape.add(means, kept)?;
        let sim = tape.grouped_cosine(ps, centers, &layout.head_group, c, eps)?;
        (best, argmax) = tape.max_with_argmax(sim, 1)?;
    }
    let cluster: Vec<usize> = layout.head_group.iter().zip(&argmax).map(|(&g, &j)| g * c + j).collect();

    let best_cols = tape.reshape(best, &[rows, h])?;
    let logits = tape.col_affine(best_cols, vars.alpha, vars.beta)?;
    let weights = tape.sigmoid(logits)?;
    let weights = tape.reshape(weights, &[head_rows])?;

    let mixed = aggregate_dispatch(
        tape,
        pv,
        weights,
        &cluster,
        clusters,
        value_centers,
        vars.dispatch_weight,
        vars.dispatch_bias,
    )?;
    let mixed = tape.reshape(mixed, &[rows, h * e])?;
    let fused = tape.linear(mixed, vars.fuse_weight, Some(vars.fuse_bias))?;
    let out = match &layout.order {
        Some((_, inverse)) => tape.gather_rows(fused, inverse)?,
        None => fused,
    };

    if let Some(records) = trace {
        let sim_macs = tape.counters().similarity - sim_macs_before;
        records.push(record(tape, x, spec, &layout, best, &argmax, &cluster, clusters, sim_macs));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn record<T: Scalar>(
    tape: &Tape<T>,
    x: &PointBatch,
    spec: &ClusterSpec,
    layout: &ClusterLayout,
    best: Var,
    argmax: &[usize],
    cluster: &[usize],
    clusters: usize,
    similarity_macs: u64,
) -> ClusterRecord {
    let (n, h) = (x.grid.len(), spec.heads);
    let mut assignments = vec![vec![vec![0; n]; h]; x.batch];
    for p in 0..x.rows() {
        let orig = match &layout.order {
            Some((order, _)) => order[p],
            None => p,
        };
        let (img, local) = (orig / n, orig % n);
        for head in 0..h {
            assignments[img][head][local] = argmax[p * h + head];
        }
    }
    let mut cluster_sizes = vec![0; clusters];
    for &k in cluster {
        cluster_sizes[k] += 1;
    }
    let s = tape.value(best).data();
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in s {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    ClusterRecord {
        grid: x.grid,
        tile: layout.region.tile,
        regions: spec.regions,
        local_centers: spec.local_centers,
        heads: h,
        batch: x.batch,
        assignments,
        region_of_point: (0..n).map(|i| layout.region.region_of(i)).collect(),
        cluster_sizes,
        similarity_min: lo,
        similarity_max: hi,
        similarity_mean: sum / s.len().max(1) as f64,
        similarity_macs,
    }
}

/// Pre-norm residual block: cluster mixing, then an MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub cluster: ClusterSpec,
    pub mlp_ratio: usize,
    /// When false the block keeps only its MLP path.
    pub use_cluster: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1_weight: Var,
    pub norm1_bias: Var,
    pub cluster: ClusterVars,
    pub norm2_weight: Var,
    pub norm2_bias: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// `x + cluster(norm(x))`, then `x + fc2(gelu(fc1(norm(x))))`.
pub fn coc_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: &PointBatch,
    spec: &BlockSpec,
    vars: &BlockVars,
    trace: Option<&mut Vec<ClusterRecord>>,
) -> Result<PointBatch> {
    let eps = T::of(NORM_EPS);
    let mut h = x.features;
    if spec.use_cluster {
        let normed = tape.group_norm(h, 1, vars.norm1_weight, vars.norm1_bias, eps)?;
        let nx = PointBatch { features: normed, ..*x };
        let mixed = context_cluster(tape, &nx, &spec.cluster, &vars.cluster, trace)?;
        h = tape.add(h, mixed)?;
    }
    let normed = tape.group_norm(h, 1, vars.norm2_weight, vars.norm2_bias, eps)?;
    let hidden = tape.linear(normed, vars.fc1_weight, Some(vars.fc1_bias))?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.linear(hidden, vars.fc2_weight, Some(vars.fc2_bias))?;
    let features = tape.add(h, out)?;
    Ok(PointBatch { features, ..*x })
}

#[cfg(test)]
mod tests;
