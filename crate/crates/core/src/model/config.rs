use std::fmt::Write as _;

use crate::cluster::center_blocks;
use crate::error::{Error, Result};
use crate::points::{GridMeta, ReducerSpec, RegionLayout};

/// One backbone stage: a point reducer followed by `depth` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub k_neighbors: usize,
    pub downsample_r: usize,
    pub dim: usize,
    pub regions: usize,
    pub local_centers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Drop coordinates and order points by color before the stem.
    pub no_position: bool,
    /// Blocks keep only their MLP path.
    pub no_cluster_op: bool,
    /// One head per block, `dim / 4` wide.
    pub single_head: bool,
    /// No regions; 16 centers in the first two stages, 4 in the last two.
    pub no_partition: bool,
    pub center_update_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stages: [StageConfig; 4],
    pub num_classes: usize,
    /// `(height, width)`
    pub input_size: (usize, usize),
    pub ablate: Ablations,
}

pub const PRESETS: [&str; 5] = ["tiny", "tiny-dagger", "small", "medium", "micro32"];

#[allow(clippy::too_many_arguments)]
fn stages(
    k: [usize; 4],
    r: [usize; 4],
    dims: [usize; 4],
    depths: [usize; 4],
    regions: [usize; 4],
    centers: [usize; 4],
    heads: [usize; 4],
    head_dim: usize,
    mlp: [usize; 4],
) -> [StageConfig; 4] {
    std::array::from_fn(|i| StageConfig {
        k_neighbors: k[i],
        downsample_r: r[i],
        dim: dims[i],
        regions: regions[i],
        local_centers: centers[i],
        heads: heads[i],
        head_dim,
        mlp_ratio: mlp[i],
        depth: depths[i],
    })
}

const K_224: [usize; 4] = [16, 9, 9, 9];
const R_224: [usize; 4] = [16, 4, 4, 4];
const MLP_224: [usize; 4] = [8, 8, 4, 4];

impl ModelConfig {
    fn imagenet(stages: [StageConfig; 4]) -> Self {
        Self {
            stages,
            num_classes: 1000,
            input_size: (224, 224),
            ablate: Ablations::default(),
        }
    }

    pub fn tiny() -> Self {
        Self::imagenet(stages(
            K_224,
            R_224,
            [32, 64, 196, 320],
            [3, 4, 5, 2],
            [64, 16, 4, 1],
            [4; 4],
            [4, 4, 8, 8],
            24,
            MLP_224,
        ))
    }

    /// TINY with regions `[49, 49, 1, 1]` and centers `[16, 4, 49, 16]`.
    pub fn tiny_dagger() -> Self {
        let mut cfg = Self::tiny();
        for (s, (r, c)) in cfg.stages.iter_mut().zip([(49, 16), (49, 4), (1, 49), (1, 16)]) {
            s.regions = r;
            s.local_centers = c;
        }
        cfg
    }

    pub fn small() -> Self {
        Self::imagenet(stages(
            K_224,
            R_224,
            [64, 128, 320, 512],
            [2, 2, 6, 2],
            [64, 16, 4, 1],
            [4; 4],
            [4, 4, 8, 8],
            32,
            MLP_224,
        ))
    }

    pub fn medium() -> Self {
        Self::imagenet(stages(
            K_224,
            R_224,
            [64, 128, 320, 512],
            [4, 4, 12, 4],
            [64, 16, 4, 1],
            [4; 4],
            [6, 6, 12, 12],
            32,
            MLP_224,
        ))
    }

    /// 32×32 inputs, grids 16² → 8² → 4² → 2², ten classes.
    pub fn micro32() -> Self {
        Self {
            stages: stages(
                [9; 4],
                [4; 4],
                [32, 64, 128, 256],
                [1, 1, 2, 1],
                [4, 4, 1, 1],
                [4; 4],
                [2, 2, 4, 4],
                16,
                [4; 4],
            ),
            num_classes: 10,
            input_size: (32, 32),
            ablate: Ablations::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "tiny" => Ok(Self::tiny()),
            "tiny-dagger" => Ok(Self::tiny_dagger()),
            "small" => Ok(Self::small()),
            "medium" => Ok(Self::medium()),
            "micro32" | "micro-32" => Ok(Self::micro32()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Stage settings after the structural ablations are applied.
    pub fn effective_stages(&self) -> [StageConfig; 4] {
        let mut out = self.stages;
        for (i, s) in out.iter_mut().enumerate() {
            if self.ablate.single_head {
                s.heads = 1;
                s.head_dim = (s.dim / 4).max(1);
            }
            if self.ablate.no_partition {
                s.regions = 1;
                s.local_centers = if i < 2 { 16 } else { 4 };
            }
        }
        out
    }

    /// Point grid entering each stage's blocks.
    pub fn stage_grids(&self) -> Result<[GridMeta; 4]> {
        let mut grid = GridMeta::new(self.input_size.0, self.input_size.1)?;
        let mut out = [grid; 4];
        for (i, s) in self.effective_stages().iter().enumerate() {
            let spec = ReducerSpec {
                k_neighbors: s.k_neighbors,
                downsample_r: s.downsample_r,
            };
            grid = spec
                .neighbors(grid)
                .map_err(|e| stage_error(i, e))?
                .0
                .grid;
            out[i] = grid;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let stages = self.effective_stages();
        for (i, s) in stages.iter().enumerate() {
            let fields = [
                ("k_neighbors", s.k_neighbors),
                ("downsample_r", s.downsample_r),
                ("dim", s.dim),
                ("regions", s.regions),
                ("local_centers", s.local_centers),
                ("heads", s.heads),
                ("head_dim", s.head_dim),
                ("mlp_ratio", s.mlp_ratio),
            ];
            if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
                return Err(stage_error(i, Error::Config(format!("{name} must be positive"))));
            }
        }
        let grids = self.stage_grids()?;
        for (i, (s, grid)) in stages.iter().zip(grids).enumerate() {
            if s.depth == 0 || self.ablate.no_cluster_op {
                continue;
            }
            let layout = RegionLayout::new(grid, s.regions).map_err(|e| stage_error(i, e))?;
            center_blocks(layout.tile, s.local_centers).map_err(|e| stage_error(i, e))?;
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of this config.
    ///
    /// Blank lines and `#` comments are ignored. Stage keys are
    /// `stage{1..4}.{field}`; ablations are `ablate.{flag}`.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Parses a config file: an optional `preset = name` base, then overrides.
    pub fn from_text(text: &str) -> Result<Self> {
        let preset = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "preset")
            .map(|(_, v)| v.trim().to_string());
        let mut cfg = match preset {
            Some(name) => Self::preset(&name)?,
            None => Self::micro32(),
        };
        cfg.apply_overrides(text)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: {value:?} is not a non-negative integer")))
        };
        let flag = || match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(Error::Config(format!("{key}: {value:?} is not a boolean"))),
        };
        match key {
            "preset" => {}
            "num_classes" => self.num_classes = int()?,
            "input_height" => self.input_size.0 = int()?,
            "input_width" => self.input_size.1 = int()?,
            "ablate.no_position" => self.ablate.no_position = flag()?,
            "ablate.no_cluster_op" => self.ablate.no_cluster_op = flag()?,
            "ablate.single_head" => self.ablate.single_head = flag()?,
            "ablate.no_partition" => self.ablate.no_partition = flag()?,
            "ablate.center_update_iters" => self.ablate.center_update_iters = int()?,
            _ => {
                let (stage, field) = key
                    .strip_prefix("stage")
                    .and_then(|rest| rest.split_once('.'))
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let i = stage
                    .parse::<usize>()
                    .ok()
                    .filter(|i| (1..=4).contains(i))
                    .ok_or_else(|| Error::Config(format!("{key}: stage must be 1..4")))?;
                let s = &mut self.stages[i - 1];
                let slot = match field {
                    "k_neighbors" => &mut s.k_neighbors,
                    "downsample_r" => &mut s.downsample_r,
                    "dim" => &mut s.dim,
                    "regions" => &mut s.regions,
                    "local_centers" => &mut s.local_centers,
                    "heads" => &mut s.heads,
                    "head_dim" => &mut s.head_dim,
                    "mlp_ratio" => &mut s.mlp_ratio,
                    "depth" => &mut s.depth,
                    _ => return Err(Error::Config(format!("unknown stage field {field:?}"))),
                };
                *slot = int()?;
            }
        }
        Ok(())
    }

    /// Every field as `key = value` lines, readable by [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        let _ = writeln!(out, "input_height = {}", self.input_size.0);
        let _ = writeln!(out, "input_width = {}", self.input_size.1);
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            for (field, v) in [
                ("k_neighbors", s.k_neighbors),
                ("downsample_r", s.downsample_r),
                ("dim", s.dim),
                ("regions", s.regions),
                ("local_centers", s.local_centers),
                ("heads", s.heads),
                ("head_dim", s.head_dim),
                ("mlp_ratio", s.mlp_ratio),
                ("depth", s.depth),
            ] {
                let _ = writeln!(out, "stage{n}.{field} = {v}");
            }
        }
        let a = &self.ablate;
        let _ = writeln!(out, "ablate.no_position = {}", a.no_position);
        let _ = writeln!(out, "ablate.no_cluster_op = {}", a.no_cluster_op);
        let _ = writeln!(out, "ablate.single_head = {}", a.single_head);
        let _ = writeln!(out, "ablate.no_partition = {}", a.no_partition);
        let _ = writeln!(out, "ablate.center_update_iters = {}", a.center_update_iters);
        out
    }

    /// Names of the ablations that are switched on.
    pub fn ablation_names(&self) -> Vec<String> {
        let a = &self.ablate;
        let mut out: Vec<String> = [
            ("no-position", a.no_position),
            ("no-cluster-op", a.no_cluster_op),
            ("single-head", a.single_head),
            ("no-partition", a.no_partition),
        ]
        .iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| n.to_string())
        .collect();
        if a.center_update_iters > 0 {
            out.push(format!("center-update-iters={}", a.center_update_iters));
        }
        out
    }

    /// Switches on an ablation by its dashed or underscored name.
    pub fn enable_ablation(&mut self, name: &str) -> Result<()> {
        match name.replace('_', "-").as_str() {
            "no-position" => self.ablate.no_position = true,
            "no-cluster-op" => self.ablate.no_cluster_op = true,
            "single-head" => self.ablate.single_head = true,
            "no-partition" => self.ablate.no_partition = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }
}

fn stage_error(i: usize, e: Error) -> Error {
    Error::Config(format!("stage {}: {e}", i + 1))
}
