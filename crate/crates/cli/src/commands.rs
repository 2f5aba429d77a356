use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use ctsynth_core::autodiff::Scalar;
use ctsynth_core::blindtest::export_blind_test;
use ctsynth_core::cgan::{
    infer_volume, load_checkpoint, load_generator, DiscriminatorConfig, GeneratorConfig, GeneratorLossMode, TrainConfig, Trainer,
};
use ctsynth_core::degrade::{
    build_training_set_with, load_training_set, plan_training_set, save_training_set, ConditionKind, PairKey, TrainingSetOptions,
    DEFAULT_PEAK,
};
use ctsynth_core::metrics::{evaluate_pair, format_report, save_report, EvalOptions, SsimMode, DEFAULT_WINDOW};
use ctsynth_core::seed::derive_seed;
use ctsynth_core::synth::{dataset_specs, generate_phantom};
use ctsynth_core::verify::{format_results, run_suite, SuiteOptions, MODEL_H, OP_H};
use ctsynth_core::volume::{load_meta, load_volume, preprocess, save_meta, save_volume, BlockGrid, VolumeMeta, DEFAULT_EDGE, DEFAULT_PAD};

use crate::config::{append_run_log, merge_globals, merge_section, FileConfig};
use crate::{Cli, CliError, Command, GlobalArgs, Precision, DEFAULT_RUN_LOG, EXIT_VERIFY};

/// Global options after defaults.
#[derive(Debug, Clone, Serialize)]
struct Globals {
    seed: u64,
    threads: Option<usize>,
    precision: Precision,
    config: Option<PathBuf>,
    run_log: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.global.config.as_deref())?;
    let g: GlobalArgs = merge_globals(&file, &cli.global)?;
    let globals = Globals {
        seed: g.seed.unwrap_or(0),
        threads: g.threads,
        precision: g.precision.unwrap_or(Precision::F32),
        config: cli.global.config.clone(),
        run_log: g.run_log.unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_LOG)),
    };
    if let Some(n) = globals.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))?;
    }
    let ctx = Ctx { file, globals };
    match cli.command {
        Command::Synth(a) => synth(&ctx, merge_section(&ctx.file, "synth", &a)?),
        Command::Prep(a) => prep(&ctx, merge_section(&ctx.file, "prep", &a)?),
        Command::Train(a) => {
            let a = merge_section(&ctx.file, "train", &a)?;
            match ctx.globals.precision {
                Precision::F32 => train::<f32>(&ctx, a),
                Precision::F64 => train::<f64>(&ctx, a),
            }
        }
        Command::Generate(a) => {
            let a = merge_section(&ctx.file, "generate", &a)?;
            match ctx.globals.precision {
                Precision::F32 => generate::<f32>(&ctx, a),
                Precision::F64 => generate::<f64>(&ctx, a),
            }
        }
        Command::Evaluate(a) => evaluate(&ctx, merge_section(&ctx.file, "evaluate", &a)?),
        Command::Blindtest(a) => blindtest(&ctx, merge_section(&ctx.file, "blindtest", &a)?),
        Command::Gradcheck(a) => gradcheck(&ctx, merge_section(&ctx.file, "gradcheck", &a)?),
    }
}

struct Ctx {
    file: FileConfig,
    globals: Globals,
}

impl Ctx {
    fn log(&self, command: &str, resolved: Value) -> Result<(), CliError> {
        append_run_log(&self.globals.run_log, command, &self.globals, &resolved)
    }
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::usage(format!("missing required option --{flag}")))
}

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::io(format!("{what} {}: {e}", path.display()))
}

fn parse_condition(s: &str) -> Result<ConditionKind, CliError> {
    s.parse().map_err(|e: ctsynth_core::Error| CliError::usage(e.to_string()))
}

/// `64` or `64,64,32`.
fn parse_dims(s: &str) -> Result<[usize; 3], CliError> {
    let bad = || CliError::usage(format!("invalid dims '{s}': expected N or X,Y,Z with positive integers"));
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    let dims = match parts[..] {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => return Err(bad()),
    };
    if dims.contains(&0) {
        return Err(bad());
    }
    Ok(dims)
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SynthArgs {
    /// Number of phantoms.
    #[arg(long)]
    pub count: Option<usize>,
    /// Volume size, `N` or `X,Y,Z` (each at least 16).
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<(), CliError> {
    let count = a.count.unwrap_or(1);
    let dims_text = a.dims.clone().unwrap_or_else(|| "64".into());
    let out_dir = required(&a.out_dir, "out-dir")?;
    let dims = parse_dims(&dims_text)?;
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let seed = ctx.globals.seed;
    let specs = dataset_specs(count, dims, seed);
    for s in &specs {
        s.validate()?;
    }
    ctx.log("synth", json!({ "count": count, "dims": dims, "out-dir": out_dir }))?;
    fs::create_dir_all(&out_dir).map_err(|e| io_err("cannot create", &out_dir, e))?;
    let names: Vec<String> = (0..count).map(|i| format!("phantom_{i:03}.ctv")).collect();
    specs.par_iter().zip(&names).try_for_each(|(spec, name)| -> Result<(), CliError> {
        let v = generate_phantom(spec)?;
        let path = out_dir.join(name);
        save_volume(&v, &path)?;
        save_meta(&path, &VolumeMeta { phantom: Some(spec.clone()), ..Default::default() })?;
        Ok(())
    })?;
    let mut manifest = format!("# seed {seed}\n# dims {},{},{}\n", dims[0], dims[1], dims[2]);
    for n in &names {
        manifest.push_str(n);
        manifest.push('\n');
    }
    let mpath = out_dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| io_err("cannot write", &mpath, e))?;
    println!("wrote {count} phantoms of {dims:?} to {}", out_dir.display());
    Ok(())
}

/// `.ctv` files of a directory in name order, or the single given file.
fn volume_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| io_err("cannot read", input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ctv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::io(format!("no .ctv volumes in {}", input.display())));
        }
        Ok(files)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PrepArgs {
    /// A CTV volume or a directory of them.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// auto, noisy or pixelated.
    #[arg(long)]
    pub condition: Option<String>,
    /// Block edge.
    #[arg(long)]
    pub edge: Option<usize>,
    /// Poisson peak count for noisy conditions.
    #[arg(long)]
    pub peak: Option<f64>,
    /// Keep a seeded random subset of this many pairs.
    #[arg(long)]
    pub sample: Option<usize>,
}

fn prep(ctx: &Ctx, a: PrepArgs) -> Result<(), CliError> {
    let input = required(&a.input, "in")?;
    let out_dir = required(&a.out_dir, "out-dir")?;
    let kind = parse_condition(a.condition.as_deref().unwrap_or("auto"))?;
    let edge = a.edge.unwrap_or(DEFAULT_EDGE);
    let peak = a.peak.unwrap_or(DEFAULT_PEAK);
    if edge < 2 {
        return Err(CliError::usage("--edge must be at least 2"));
    }
    let seed = ctx.globals.seed;
    ctx.log("prep", json!({ "in": input, "out-dir": out_dir, "condition": kind, "edge": edge, "peak": peak, "sample": a.sample }))?;
    let files = volume_inputs(&input)?;
    let params_dir = out_dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| io_err("cannot create", &params_dir, e))?;
    let mut normalized = Vec::with_capacity(files.len());
    let mut sources = String::new();
    for (i, f) in files.iter().enumerate() {
        let v = load_volume(f).map_err(|e| CliError::io(format!("cannot read volume {}: {e}", f.display())))?;
        let (n, params, bounds) = preprocess(&v)?;
        let grid = BlockGrid::new(v.dims(), edge, DEFAULT_PAD)?;
        let meta = VolumeMeta { preprocess: Some(params), bounds: Some(bounds), grid: Some(grid), phantom: None };
        save_meta(params_dir.join(format!("vol{i}.ctv")), &meta)?;
        sources.push_str(&format!("vol{i} {}\n", f.display()));
        normalized.push(n);
    }
    let spath = out_dir.join("sources.txt");
    fs::write(&spath, sources).map_err(|e| io_err("cannot write", &spath, e))?;

    let opts = TrainingSetOptions { kind, seed, edge, peak };
    let chosen: Option<HashSet<PairKey>> = match a.sample {
        Some(n) => {
            let dims: Vec<[usize; 3]> = normalized.iter().map(|v| v.dims()).collect();
            let all = plan_training_set(&dims, edge, None)?;
            if n == 0 || n > all.len() {
                return Err(CliError::usage(format!("--sample must be in 1..={}", all.len())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
            Some(sample(&mut rng, all.len(), n).into_iter().map(|i| all[i]).collect())
        }
        None => None,
    };
    let keep = |k: &PairKey| chosen.as_ref().is_none_or(|c| c.contains(k));
    let pairs = build_training_set_with(&normalized, &opts, Some(&keep))?;
    save_training_set(&out_dir, &pairs, &opts)?;
    println!("wrote {} {} pairs (edge {edge}) from {} volume(s) to {}", pairs.len(), kind, files.len(), out_dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// Directory written by `prep`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Weight of the L1 term.
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// saturating or non-saturating.
    #[arg(long)]
    pub loss_mode: Option<String>,
    /// Width of the first generator and discriminator level.
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Numbered checkpoint every N epochs (0 keeps only the latest).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    /// Continue from this checkpoint; only --epochs may change.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn train<T: Scalar>(ctx: &Ctx, a: TrainArgs) -> Result<(), CliError> {
    let pairs_dir = required(&a.pairs, "pairs")?;
    let ckpt_dir = a.ckpt_dir.clone().unwrap_or_else(|| PathBuf::from("checkpoints"));
    if a.epochs == Some(0) {
        return Err(CliError::usage("--epochs must be at least 1"));
    }
    let (set, pairs) = load_training_set(&pairs_dir)?;
    let mut trainer: Trainer<T> = match &a.resume {
        Some(path) => {
            let mut t: Trainer<T> = load_checkpoint(path)?;
            if t.edge() != set.edge {
                return Err(CliError::io(format!(
                    "checkpoint edge {} does not match pair edge {} in {}",
                    t.edge(),
                    set.edge,
                    pairs_dir.display()
                )));
            }
            if let Some(e) = a.epochs {
                t.cfg.epochs = e;
            }
            t
        }
        None => {
            let mode: GeneratorLossMode = match &a.loss_mode {
                Some(m) => m.parse().map_err(|e: ctsynth_core::Error| CliError::usage(e.to_string()))?,
                None => GeneratorLossMode::NonSaturating,
            };
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: a.epochs.unwrap_or(defaults.epochs),
                batch_size: a.batch.unwrap_or(defaults.batch_size),
                lambda_l1: a.lambda_l1.unwrap_or(defaults.lambda_l1),
                seed: ctx.globals.seed,
                generator_loss_mode: mode,
                adam: ctsynth_core::autodiff::AdamConfig { lr: a.lr.unwrap_or(defaults.adam.lr), ..defaults.adam },
                checkpoint_every: a.checkpoint_every.unwrap_or(defaults.checkpoint_every),
            };
            let mut gc = GeneratorConfig::for_edge(set.edge);
            let mut dc = DiscriminatorConfig::for_edge(set.edge);
            if let Some(b) = a.base_channels {
                gc.base_channels = b;
                dc.base_channels = b;
            }
            Trainer::new(gc, dc, cfg)?
        }
    };
    ctx.log(
        "train",
        json!({
            "pairs": pairs_dir,
            "pair-count": pairs.len(),
            "ckpt-dir": ckpt_dir,
            "resume": a.resume,
            "resume-epoch": trainer.epoch,
            "train": trainer.cfg,
            "generator": trainer.gen.config(),
            "discriminator": trainer.disc.config(),
        }),
    )?;
    if trainer.epoch >= trainer.cfg.epochs {
        println!("checkpoint already has {} of {} epochs; nothing to do", trainer.epoch, trainer.cfg.epochs);
        return Ok(());
    }
    println!(
        "training on {} pairs, {} steps per epoch, epochs {}..{}",
        pairs.len(),
        trainer.cfg.steps_per_epoch(pairs.len()),
        trainer.epoch + 1,
        trainer.cfg.epochs
    );
    trainer.train(&pairs, Some(&ckpt_dir), |e| {
        println!("epoch {:>4}  d_loss {:.5}  g_loss {:.5}  l1 {:.5}", e.epoch, e.d_loss, e.g_loss, e.g_l1);
    })?;
    println!("checkpoints in {}", ckpt_dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Input CTV volume.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    /// auto, noisy or pixelated.
    #[arg(long)]
    pub condition: Option<String>,
    /// Output CTV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub peak: Option<f64>,
    /// Expected block edge; must match the checkpoint.
    #[arg(long)]
    pub edge: Option<usize>,
}

fn generate<T: Scalar>(ctx: &Ctx, a: GenerateArgs) -> Result<(), CliError> {
    let ckpt = required(&a.ckpt, "ckpt")?;
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    let kind = parse_condition(a.condition.as_deref().unwrap_or("auto"))?;
    let peak = a.peak.unwrap_or(DEFAULT_PEAK);
    ctx.log("generate", json!({ "ckpt": ckpt, "in": input, "out": out, "condition": kind, "peak": peak, "edge": a.edge }))?;
    let gen = load_generator::<T>(&ckpt)?;
    let edge = gen.config().edge;
    if let Some(e) = a.edge {
        if e != edge {
            return Err(CliError::io(format!("shape mismatch: checkpoint {} has block edge {edge}, expected {e}", ckpt.display())));
        }
    }
    let v = load_volume(&input)?;
    // Reuse recorded preprocessing when the input carries it.
    let (params, bounds) = match load_meta(&input)? {
        Some(VolumeMeta { preprocess: Some(p), bounds: Some(b), .. }) => (p, b),
        _ => {
            let (_, p, b) = preprocess(&v)?;
            (p, b)
        }
    };
    let g = infer_volume(&gen, &v, &params, bounds, kind, ctx.globals.seed, peak)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
    }
    save_volume(&g, &out)?;
    println!("generated {:?} volume from {} into {}", g.dims(), input.display(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub real: Option<PathBuf>,
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// SSIM mode: windowed or global.
    #[arg(long)]
    pub mode: Option<String>,
    /// SSIM window edge (odd).
    #[arg(long)]
    pub window: Option<usize>,
    /// Dynamic range L; defaults to the real volume's range.
    #[arg(long)]
    pub data_range: Option<f64>,
    /// Report path; defaults to `<generated>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<(), CliError> {
    let real = required(&a.real, "real")?;
    let generated = required(&a.generated, "generated")?;
    let ssim_mode = match a.mode.as_deref().unwrap_or("windowed") {
        "windowed" => SsimMode::Windowed,
        "global" => SsimMode::Global,
        other => return Err(CliError::usage(format!("unknown SSIM mode '{other}' (expected windowed or global)"))),
    };
    let opts = EvalOptions { data_range: a.data_range, ssim_mode, window: a.window.unwrap_or(DEFAULT_WINDOW) };
    let report_path = a.report.clone().unwrap_or_else(|| {
        let stem = generated.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        generated.with_file_name(format!("{stem}.report.json"))
    });
    ctx.log("evaluate", json!({ "real": real, "generated": generated, "options": opts, "report": report_path }))?;
    let r = load_volume(&real)?;
    let g = load_volume(&generated)?;
    let report = evaluate_pair(&r, &g, &opts)?;
    print!("{}", format_report(&report));
    save_report(&report_path, &report)?;
    println!("report: {}", report_path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct BlindtestArgs {
    #[arg(long)]
    pub real_dir: Option<PathBuf>,
    #[arg(long)]
    pub gen_dir: Option<PathBuf>,
    /// Number of slice pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn blindtest(ctx: &Ctx, a: BlindtestArgs) -> Result<(), CliError> {
    let real_dir = required(&a.real_dir, "real-dir")?;
    let gen_dir = required(&a.gen_dir, "gen-dir")?;
    let out_dir = required(&a.out_dir, "out-dir")?;
    let n = a.pairs.unwrap_or(20);
    ctx.log("blindtest", json!({ "real-dir": real_dir, "gen-dir": gen_dir, "pairs": n, "out-dir": out_dir }))?;
    let pairs = export_blind_test(&real_dir, &gen_dir, &out_dir, n, ctx.globals.seed)?;
    println!("exported {} pairs ({} images) to {}", pairs.len(), 2 * pairs.len(), out_dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GradcheckArgs {
    /// Finite-difference step for single-op checks.
    #[arg(long)]
    pub h: Option<f64>,
    /// Step for the end-to-end model check.
    #[arg(long)]
    pub model_h: Option<f64>,
    /// Skip the end-to-end model check.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub skip_model: Option<bool>,
    /// Test hook: run with a deliberately wrong backward pass.
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "true")]
    pub corrupt_backward: Option<bool>,
}

fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<(), CliError> {
    let opts = SuiteOptions {
        op_h: a.h.unwrap_or(OP_H),
        model_h: a.model_h.unwrap_or(MODEL_H),
        seed: ctx.globals.seed,
        corrupt: a.corrupt_backward.unwrap_or(false),
        include_model: !a.skip_model.unwrap_or(false),
    };
    if !(opts.op_h > 0.0 && opts.model_h > 0.0) {
        return Err(CliError::usage("finite-difference steps must be positive"));
    }
    ctx.log("gradcheck", json!(opts))?;
    let results = run_suite(&opts)?;
    print!("{}", format_results(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError { code: EXIT_VERIFY, message: format!("{failed} gradient check(s) above threshold") });
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
