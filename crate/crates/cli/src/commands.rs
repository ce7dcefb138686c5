use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use coc_core::cluster::{context_cluster, ClusterSpec, ClusterVars};
use coc_core::engine::{Tape, Tensor};
use coc_core::gradcheck::run_gradcheck;
use coc_core::model::{load_checkpoint, Model, ModelConfig};
use coc_core::points::{GridMeta, Image, PointBatch};
use coc_core::training::{
    evaluate, load_cifar10, read_cifar_batch, synthetic_quadrant_dataset, train, AdamWConfig, Dataset, TrainConfig,
};
use coc_core::viz::{capture_cluster_maps, read_ppm, render_cluster_map, write_ppm};
use coc_core::{Error, Result};

use crate::{Cli, Command, DataArgs, ModelArgs};

const DEFAULT_QUADRANT: usize = 4000;

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

fn model_config(args: &ModelArgs) -> Result<(ModelConfig, String)> {
    let (mut cfg, source) = match (&args.preset, &args.config) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            (ModelConfig::from_text(&text)?, path.display().to_string())
        }
        (Some(name), None) => (ModelConfig::preset(name)?, name.clone()),
        (None, None) => (ModelConfig::micro32(), "micro32".to_string()),
    };
    for a in &args.ablate {
        cfg.enable_ablation(a)?;
    }
    Ok((cfg, source))
}

enum Source {
    Quadrant(usize),
    Cifar(PathBuf),
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os("COC_DATA_DIR").map(PathBuf::from)
}

fn source(args: &DataArgs) -> Result<Source> {
    let spec = match &args.data {
        Some(s) => s.clone(),
        None => {
            return data_root()
                .map(Source::Cifar)
                .ok_or_else(|| Error::Config("no data source: pass --data or set COC_DATA_DIR".into()))
        }
    };
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        return match (parts.next(), parts.next(), parts.next()) {
            (Some("quadrant"), None, None) => Ok(Source::Quadrant(DEFAULT_QUADRANT)),
            (Some("quadrant"), Some(n), None) => n
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .map(Source::Quadrant)
                .ok_or_else(|| Error::Config(format!("bad example count in {spec:?}"))),
            _ => Err(Error::Config(format!("unknown synthetic data {spec:?}"))),
        };
    }
    if spec == "cifar10" {
        return data_root()
            .map(Source::Cifar)
            .ok_or_else(|| Error::Config("--data cifar10 needs COC_DATA_DIR".into()));
    }
    let root = PathBuf::from(spec);
    if !root.is_dir() {
        return Err(Error::Config(format!("data directory {} does not exist", root.display())));
    }
    Ok(Source::Cifar(root))
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("{what} {} not found", path.display())))
    }
}

fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn quadrant_side(cfg: &ModelConfig) -> Result<usize> {
    let (h, w) = cfg.input_size;
    if h != w {
        return Err(Error::Config(format!("synthetic quadrant images are square, model input is {h}x{w}")));
    }
    Ok(h)
}

/// Held-out quadrant images use the next seed.
fn quadrant_eval(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    synthetic_quadrant_dataset((n / 4).max(1), side, seed.wrapping_add(1))
}

fn load_train(src: &Source, cfg: &ModelConfig, seed: u64, subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    let (train, test) = match src {
        Source::Quadrant(n) => {
            let side = quadrant_side(cfg)?;
            (synthetic_quadrant_dataset(*n, side, seed)?, quadrant_eval(*n, side, seed)?)
        }
        Source::Cifar(root) => load_cifar10(&cifar_dir(root))?,
    };
    let train = match subset {
        Some(n) => train.take(n)?,
        None => train,
    };
    Ok((train, test))
}

fn load_eval(src: &Source, cfg: &ModelConfig, seed: u64) -> Result<Dataset> {
    match src {
        Source::Quadrant(n) => quadrant_eval(*n, quadrant_side(cfg)?, seed),
        Source::Cifar(root) => read_cifar_batch(&cifar_dir(root).join("test_batch.bin")),
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    let seed = cli.seed;
    match cli.command {
        Command::Train {
            model,
            data,
            epochs,
            batch_size,
            micro_batch,
            lr,
            weight_decay,
            warmup_epochs,
            target_accuracy,
            checkpoint_every,
            out,
        } => {
            let (mut cfg, cfg_source) = model_config(&model)?;
            let src = source(&data)?;
            let (train_set, test_set) = load_train(&src, &cfg, seed, data.subset)?;
            cfg.num_classes = train_set.classes;
            let mut net = Model::<f32>::build(cfg.clone(), seed)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            let tc = TrainConfig {
                epochs,
                batch_size,
                micro_batch,
                lr,
                warmup_epochs,
                optimizer: AdamWConfig {
                    weight_decay,
                    ..Default::default()
                },
                seed,
                target_accuracy,
                checkpoint_dir: Some(out.clone()),
                checkpoint_every,
            };
            let ablations = cfg.ablation_names();
            eprintln!(
                "training {cfg_source} ({} params) on {} examples, ablations: {}",
                net.count_parameters(),
                train_set.len(),
                if ablations.is_empty() { "none".to_string() } else { ablations.join(",") }
            );
            let mut log = train(&mut net, &train_set, Some(&test_set), &tc, |r| {
                eprintln!(
                    "epoch {:>3} {:<5} loss {:.4} acc {:.4} lr {:.2e} ({:.1}s)",
                    r.epoch, r.split, r.loss, r.accuracy, r.lr, r.seconds
                )
            })?;
            log.header = vec![
                ("model".into(), cfg_source),
                ("data".into(), data.data.clone().unwrap_or_else(|| "cifar10".into())),
                ("seed".into(), seed.to_string()),
                ("ablate".into(), if ablations.is_empty() { "none".into() } else { ablations.join(",") }),
                ("examples".into(), train_set.len().to_string()),
            ];
            let log_path = out.join("train_log.csv");
            std::fs::write(&log_path, log.to_csv())?;
            let last_train = log.last("train").expect("at least one epoch");
            let last_test = log.last("test");
            print_json(&json!({
                "epochs_run": last_train.epoch,
                "train_loss": last_train.loss,
                "train_accuracy": last_train.accuracy,
                "test_loss": last_test.map(|r| r.loss),
                "test_accuracy": last_test.map(|r| r.accuracy),
                "parameters": net.count_parameters(),
                "checkpoint": out.join("final.ckpt"),
                "config": out.join("config.txt"),
                "log": log_path,
            }));
            Ok(0)
        }
        Command::Eval {
            model,
            data,
            checkpoint,
            micro_batch,
        } => {
            let (mut cfg, _) = model_config(&model)?;
            let src = source(&data)?;
            let set = load_eval(&src, &cfg, seed)?;
            let set = match data.subset {
                Some(n) => set.take(n)?,
                None => set,
            };
            let net = match &checkpoint {
                Some(path) => {
                    existing(path, "checkpoint")?;
                    load_checkpoint(path, cfg)?
                }
                None => {
                    cfg.num_classes = set.classes;
                    Model::<f32>::build(cfg, seed)?
                }
            };
            if set.classes > net.config().num_classes {
                return Err(Error::Checkpoint(format!(
                    "model predicts {} classes, data has {}",
                    net.config().num_classes,
                    set.classes
                )));
            }
            let (loss, accuracy) = evaluate(&net, &set, micro_batch)?;
            print_json(&json!({
                "examples": set.len(),
                "classes": set.classes,
                "loss": loss,
                "accuracy": accuracy,
                "checkpoint": checkpoint,
            }));
            Ok(0)
        }
        Command::Viz {
            model,
            checkpoint,
            image,
            out,
            upscale,
            palette_seed,
            overlay,
            no_partition,
        } => {
            let (mut cfg, _) = model_config(&model)?;
            if no_partition {
                cfg.ablate.no_partition = true;
            }
            existing(&checkpoint, "checkpoint")?;
            let net = load_checkpoint(&checkpoint, cfg)?;
            let img = if image == "synthetic:quadrant" {
                let side = quadrant_side(net.config())?;
                synthetic_quadrant_dataset(1, side, seed)?.images.remove(0)
            } else {
                let path = Path::new(&image);
                if !path.is_file() {
                    return Err(Error::Format(format!("image {image} not found")));
                }
                let rgb = read_ppm(path)?;
                Image::new(rgb.height, rgb.width, 3, rgb.data.iter().map(|&b| b as f32 / 255.0).collect())?
            };
            let maps = capture_cluster_maps(&net, &img)?;
            std::fs::create_dir_all(&out)?;
            let mut files = Vec::with_capacity(maps.len());
            for m in &maps {
                let scale = upscale.unwrap_or((img.height / m.grid.height).max(1));
                let raster = render_cluster_map(m, scale, palette_seed, overlay.map(|a| (&img, a)))?;
                let path = out.join(m.file_name());
                write_ppm(&raster, &path)?;
                let colors_per_region = (0..m.regions)
                    .map(|r| {
                        let mut used: Vec<usize> =
                            (0..m.grid.len()).filter(|&i| m.region_of_point[i] == r).map(|i| m.assignment[i]).collect();
                        used.sort_unstable();
                        used.dedup();
                        used.len()
                    })
                    .max()
                    .unwrap_or(0);
                files.push(json!({
                    "file": path,
                    "stage": m.stage,
                    "block": m.block,
                    "head": m.head,
                    "grid": [m.grid.height, m.grid.width],
                    "regions": m.regions,
                    "local_centers": m.local_centers,
                    "max_clusters_per_region": colors_per_region,
                }));
            }
            eprintln!("wrote {} clustering maps to {}", files.len(), out.display());
            print_json(&json!({ "count": files.len(), "files": files }));
            Ok(0)
        }
        Command::Gradcheck { inject_fault } => {
            let report = run_gradcheck(seed, inject_fault)?;
            for r in &report.results {
                eprintln!(
                    "{:<32} max rel err {:.3e} over {:>4} elements  {}",
                    r.name,
                    r.max_rel_error,
                    r.elements,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            let ops: Vec<Value> = report
                .results
                .iter()
                .map(|r| json!({"name": r.name, "max_rel_error": r.max_rel_error, "elements": r.elements, "passed": r.passed}))
                .collect();
            print_json(&json!({ "tolerance": report.tolerance, "passed": report.passed(), "ops": ops }));
            Ok(if report.passed() { 0 } else { 4 })
        }
        Command::Params { model } => {
            let (cfg, source) = model_config(&model)?;
            let net = Model::<f32>::build(cfg.clone(), seed)?;
            let macs = net.count_macs()?;
            let total = net.count_parameters();
            let grids = cfg.stage_grids()?;
            let stages: Vec<Value> = cfg
                .effective_stages()
                .iter()
                .zip(grids)
                .enumerate()
                .map(|(i, (s, g))| {
                    let prefix = format!("stages.{i}.");
                    let params: usize =
                        net.params().iter().filter(|p| p.name.starts_with(&prefix)).map(|p| p.value.numel()).sum();
                    json!({"stage": i, "points": g.len(), "dim": s.dim, "depth": s.depth, "parameters": params})
                })
                .collect();
            eprintln!(
                "{source}: {total} parameters ({:.3}M, {:.3} x 2^20), {:.3} GMACs ({:.3} x 2^30)",
                total as f64 / 1e6,
                total as f64 / (1u64 << 20) as f64,
                macs.total() as f64 / 1e9,
                macs.total() as f64 / (1u64 << 30) as f64
            );
            print_json(&json!({
                "model": source,
                "input_size": [cfg.input_size.0, cfg.input_size.1],
                "parameters": total,
                "parameters_millions": total as f64 / 1e6,
                "parameters_mebi": total as f64 / (1u64 << 20) as f64,
                "macs": {
                    "matmul": macs.matmul,
                    "similarity": macs.similarity,
                    "weighting": macs.weighting,
                    "total": macs.total(),
                },
                "gmacs": macs.total() as f64 / 1e9,
                "gmacs_gibi": macs.total() as f64 / (1u64 << 30) as f64,
                "stages": stages,
            }));
            Ok(0)
        }
        Command::Bench { repeats } => {
            print_json(&bench(seed, repeats.max(1))?);
            Ok(0)
        }
    }
}

const BENCH_SIDE: usize = 64;
const BENCH_DIM: usize = 64;
const BENCH_HEADS: usize = 4;
const BENCH_HEAD_DIM: usize = 16;
const BENCH_CENTERS: usize = 256;

/// One context-cluster op on a 64×64 grid with 256 centers in total,
/// split over 1, 4, 16 and 64 regions.
fn bench(seed: u64, repeats: usize) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize], bound: f32| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
    };
    let (d, h, e) = (BENCH_DIM, BENCH_HEADS, BENCH_HEAD_DIM);
    let n = BENCH_SIDE * BENCH_SIDE;
    let x = uniform(&[n, d], 1.0)?;
    let weights = [
        uniform(&[d, h * e], 0.2)?,
        uniform(&[h * e], 0.1)?,
        uniform(&[d, h * e], 0.2)?,
        uniform(&[h * e], 0.1)?,
        Tensor::full(&[h], 1.0),
        Tensor::zeros(&[h]),
        uniform(&[e, e], 0.25)?,
        uniform(&[e], 0.1)?,
        uniform(&[h * e, d], 0.1)?,
        uniform(&[d], 0.1)?,
    ];
    let mut settings = Vec::new();
    let mut base_macs = None;
    for regions in [1usize, 4, 16, 64] {
        let spec = ClusterSpec {
            heads: h,
            head_dim: e,
            local_centers: BENCH_CENTERS / regions,
            regions,
            center_update_iters: 0,
            force_partition: false,
        };
        let mut best = f64::INFINITY;
        let mut counters = None;
        for _ in 0..repeats {
            let mut tape = Tape::<f32>::new();
            let features = tape.constant(x.clone());
            let v: Vec<_> = weights.iter().map(|w| tape.constant(w.clone())).collect();
            let vars = ClusterVars {
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
            };
            let pb = PointBatch {
                features,
                grid: GridMeta::new(BENCH_SIDE, BENCH_SIDE)?,
                batch: 1,
            };
            let started = Instant::now();
            context_cluster(&mut tape, &pb, &spec, &vars, None)?;
            best = best.min(started.elapsed().as_secs_f64());
            counters = Some(tape.counters());
        }
        let c = counters.expect("at least one repeat");
        let base = *base_macs.get_or_insert(c.similarity);
        eprintln!(
            "regions {regions:>2}: similarity MACs {:>10}  total MACs {:>10}  {:.4}s",
            c.similarity,
            c.total(),
            best
        );
        settings.push(json!({
            "regions": regions,
            "local_centers": spec.local_centers,
            "similarity_macs": c.similarity,
            "similarity_fraction": c.similarity as f64 / base as f64,
            "total_macs": c.total(),
            "seconds": best,
        }));
    }
    Ok(json!({
        "grid": [BENCH_SIDE, BENCH_SIDE],
        "dim": d,
        "heads": h,
        "head_dim": e,
        "total_centers": BENCH_CENTERS,
        "repeats": repeats,
        "settings": settings,
    }))
}
