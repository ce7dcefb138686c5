//! The four-stage backbone: configs, parameters, forward pass and accounting.

mod checkpoint;
mod config;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointTensor};
pub use config::{Ablations, ModelConfig, StageConfig, PRESETS};

use crate::cluster::{coc_block, BlockSpec, BlockVars, ClusterRecord, ClusterSpec, ClusterVars};
use crate::engine::{MacCounters, Scalar, Tape, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::points::{image_to_points, GridMeta, Image, PointBatch, ReducerSpec, ReducerVars};

/// A named, trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Parameters in registration order, addressable by dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, name: String, value: Tensor<T>) {
        debug_assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.entries[i].value)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }
}

/// Cluster-op trace of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub stage: usize,
    pub block: usize,
    pub record: ClusterRecord,
}

enum Init {
    /// `U(±1/√fan_in)`
    Uniform(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model; the same seed gives identical weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut add = |name: String, shape: &[usize], init: Init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            params.push(name, Tensor::new(shape, data).expect("shape matches data"));
        };
        let stages = config.effective_stages();
        let mut d_in = 5;
        for (i, s) in stages.iter().enumerate() {
            let d = s.dim;
            let p = format!("stages.{i}.reducer");
            add(format!("{p}.weight"), &[s.k_neighbors * d_in, d], Init::Uniform(s.k_neighbors * d_in));
            add(format!("{p}.bias"), &[d], Init::Zeros);
            add(format!("{p}.norm.weight"), &[d], Init::Ones);
            add(format!("{p}.norm.bias"), &[d], Init::Zeros);
            let (h, e) = (s.heads, s.head_dim);
            for j in 0..s.depth {
                let p = block_prefix(i, j);
                if !config.ablate.no_cluster_op {
                    add(format!("{p}.norm1.weight"), &[d], Init::Ones);
                    add(format!("{p}.norm1.bias"), &[d], Init::Zeros);
                    for proj in ["sim", "value"] {
                        add(format!("{p}.cluster.{proj}.weight"), &[d, h * e], Init::Uniform(d));
                        add(format!("{p}.cluster.{proj}.bias"), &[h * e], Init::Zeros);
                    }
                    add(format!("{p}.cluster.alpha"), &[h], Init::Ones);
                    add(format!("{p}.cluster.beta"), &[h], Init::Zeros);
                    add(format!("{p}.cluster.dispatch.weight"), &[e, e], Init::Uniform(e));
                    add(format!("{p}.cluster.dispatch.bias"), &[e], Init::Zeros);
                    add(format!("{p}.cluster.fuse.weight"), &[h * e, d], Init::Uniform(h * e));
                    add(format!("{p}.cluster.fuse.bias"), &[d], Init::Zeros);
                }
                add(format!("{p}.norm2.weight"), &[d], Init::Ones);
                add(format!("{p}.norm2.bias"), &[d], Init::Zeros);
                let hidden = s.mlp_ratio * d;
                add(format!("{p}.mlp.fc1.weight"), &[d, hidden], Init::Uniform(d));
                add(format!("{p}.mlp.fc1.bias"), &[hidden], Init::Zeros);
                add(format!("{p}.mlp.fc2.weight"), &[hidden, d], Init::Uniform(hidden));
                add(format!("{p}.mlp.fc2.bias"), &[d], Init::Zeros);
            }
            d_in = d;
        }
        add("norm.weight".into(), &[d_in], Init::Ones);
        add("norm.bias".into(), &[d_in], Init::Zeros);
        add("head.weight".into(), &[d_in, config.num_classes], Init::Uniform(d_in));
        add("head.bias".into(), &[config.num_classes], Init::Zeros);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Exact number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::default();
        for p in self.params.iter() {
            params.push(p.name.clone(), p.value.cast());
        }
        Model {
            config: self.config.clone(),
            params,
        }
    }

    /// Places every parameter on `tape`, in registration order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Stacked `(batch·n) × 5` input points.
    fn input_points(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (h, w) = self.config.input_size;
        let n = h * w;
        let mut data = Vec::with_capacity(images.len() * n * 5);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Format(format!(
                    "image is {}x{}, model expects {h}x{w}",
                    img.height, img.width
                )));
            }
            let ps = image_to_points::<T>(img)?;
            if self.config.ablate.no_position {
                let mut order: Vec<usize> = (0..n).collect();
                let px = |i: usize| &img.data[i * 3..i * 3 + 3];
                order.sort_by(|&a, &b| {
                    px(a).iter()
                        .zip(px(b))
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                for &i in &order {
                    data.extend_from_slice(&ps.features.row(i)[..3]);
                    data.extend([T::zero(), T::zero()]);
                }
            } else {
                data.extend_from_slice(ps.features.data());
            }
        }
        Tensor::new(&[images.len() * n, 5], data)
    }

    /// Logits `batch × num_classes` for parameters bound as `vars`.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        images: &[&Image],
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Format("empty image batch".into()));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let var = |name: &str| -> Var { vars[self.params.index_of(name).expect("registered parameter")] };
        let batch = images.len();
        let input = tape.constant(self.input_points(images)?);
        let (h, w) = self.config.input_size;
        let mut x = PointBatch {
            features: input,
            grid: GridMeta::new(h, w)?,
            batch,
        };
        for (i, s) in self.config.effective_stages().iter().enumerate() {
            let p = format!("stages.{i}.reducer");
            let rv = ReducerVars {
                weight: var(&format!("{p}.weight")),
                bias: var(&format!("{p}.bias")),
                norm_weight: var(&format!("{p}.norm.weight")),
                norm_bias: var(&format!("{p}.norm.bias")),
            };
            let spec = ReducerSpec {
                k_neighbors: s.k_neighbors,
                downsample_r: s.downsample_r,
            };
            x = crate::points::reduce_points(tape, &x, spec, &rv)?;
            let use_cluster = !self.config.ablate.no_cluster_op;
            let bs = BlockSpec {
                cluster: ClusterSpec {
                    heads: s.heads,
                    head_dim: s.head_dim,
                    local_centers: s.local_centers,
                    regions: s.regions,
                    center_update_iters: self.config.ablate.center_update_iters,
                    force_partition: false,
                },
                mlp_ratio: s.mlp_ratio,
                use_cluster,
            };
            for j in 0..s.depth {
                let p = block_prefix(i, j);
                let v = |suffix: &str| var(&format!("{p}.{suffix}"));
                let placeholder = v("norm2.weight");
                let cv = |suffix: &str| if use_cluster { v(suffix) } else { placeholder };
                let vars = BlockVars {
                    norm1_weight: cv("norm1.weight"),
                    norm1_bias: cv("norm1.bias"),
                    cluster: ClusterVars {
                        sim_weight: cv("cluster.sim.weight"),
                        sim_bias: cv("cluster.sim.bias"),
                        value_weight: cv("cluster.value.weight"),
                        value_bias: cv("cluster.value.bias"),
                        alpha: cv("cluster.alpha"),
                        beta: cv("cluster.beta"),
                        dispatch_weight: cv("cluster.dispatch.weight"),
                        dispatch_bias: cv("cluster.dispatch.bias"),
                        fuse_weight: cv("cluster.fuse.weight"),
                        fuse_bias: cv("cluster.fuse.bias"),
                    },
                    norm2_weight: v("norm2.weight"),
                    norm2_bias: v("norm2.bias"),
                    fc1_weight: v("mlp.fc1.weight"),
                    fc1_bias: v("mlp.fc1.bias"),
                    fc2_weight: v("mlp.fc2.weight"),
                    fc2_bias: v("mlp.fc2.bias"),
                };
                let mut records = Vec::new();
                let sink = trace.as_ref().map(|_| &mut records);
                x = coc_block(tape, &x, &bs, &vars, sink)?;
                if let Some(out) = trace.as_deref_mut() {
                    out.extend(records.into_iter().map(|record| BlockTrace {
                        stage: i,
                        block: j,
                        record,
                    }));
                }
            }
        }
        let normed = tape.group_norm(x.features, 1, var("norm.weight"), var("norm.bias"), T::of(NORM_EPS))?;
        let n = x.grid.len();
        let owner: Vec<usize> = (0..batch * n).map(|r| r / n).collect();
        let pooled = tape.scatter_rows(normed, &owner, batch)?;
        let pooled = tape.scale(pooled, T::one() / T::of(n as f64))?;
        tape.linear(pooled, var("head.weight"), Some(var("head.bias")))
    }

    /// Logits for a batch of images, without gradients.
    pub fn forward(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward_bound(&mut tape, &vars, images, None)?;
        Ok(tape.value(out).clone())
    }

    /// Logits plus the cluster trace of every block, in execution order.
    pub fn forward_traced(&self, images: &[&Image]) -> Result<(Tensor<T>, Vec<BlockTrace>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut trace = Vec::new();
        let out = self.forward_bound(&mut tape, &vars, images, Some(&mut trace))?;
        Ok((tape.value(out).clone(), trace))
    }

    /// Multiply-accumulates of one forward pass on a single image.
    pub fn count_macs(&self) -> Result<MacCounters> {
        let (h, w) = self.config.input_size;
        let img = Image::new(h, w, 3, (0..h * w * 3).map(|i| (i % 7) as f32 / 7.0).collect())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        self.forward_bound(&mut tape, &vars, &[&img], None)?;
        Ok(tape.counters())
    }
}
