use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use ssc_core::checkpoint::Checkpoint;
use ssc_core::config::ModelConfig;
use ssc_core::dataset::{load_dataset, read_sample, write_sample};
use ssc_core::error::Error;
use ssc_core::gradcheck;
use ssc_core::metrics::{format_records, format_report, iou_miou, RANGES};
use ssc_core::model::Model;
use ssc_core::synth::{synth_sample, SynthConfig};
use ssc_core::tensor::{DType, Scalar};
use ssc_core::train::{evaluate, Trainer};
use ssc_core::vgrid::VGrid;

#[derive(Parser)]
#[command(name = "ssc", version, about = "Semantic scene completion from depth")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        count: u64,
        /// `desk`, `full`, or a key=value file.
        #[arg(long, default_value = "desk")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// key=value model config; defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train in f64 instead of f32.
        #[arg(long)]
        f64: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated ranges in metres.
        #[arg(long, value_delimiter = ',')]
        ranges: Option<Vec<f64>>,
    },
    /// Predict labels for one scene directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out_vgrid: PathBuf,
    },
    /// Check analytic gradients of every registered op against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time inference forward passes.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene directory; a synthetic scene matching the checkpoint is used otherwise.
        #[arg(long)]
        sample: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

enum Failure {
    Core(Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Res<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_format_error() { 2 } else { 1 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Res {
    match cmd {
        Cmd::Synth { seed, count, spec, out } => synth(seed, count, &spec, &out),
        Cmd::Train {
            config,
            data,
            out,
            set,
            steps,
            lr,
            seed,
            f64,
        } => {
            let mut cfg = match &config {
                Some(p) => ModelConfig::parse(&std::fs::read_to_string(p).map_err(Error::from)?)?,
                None => ModelConfig::desk(),
            };
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            if f64 {
                train::<f64>(cfg, &data, &out)
            } else {
                train::<f32>(cfg, &data, &out)
            }
        }
        Cmd::Eval { ckpt, data, ranges } => {
            let ranges = ranges.unwrap_or_else(|| RANGES.to_vec());
            match checkpoint_dtype(&ckpt)? {
                DType::F32 => eval::<f32>(&ckpt, &data, &ranges),
                DType::F64 => eval::<f64>(&ckpt, &data, &ranges),
            }
        }
        Cmd::Infer { ckpt, sample, out_vgrid } => match checkpoint_dtype(&ckpt)? {
            DType::F32 => infer::<f32>(&ckpt, &sample, &out_vgrid),
            DType::F64 => infer::<f64>(&ckpt, &sample, &out_vgrid),
        },
        Cmd::Gradcheck { tol, seed } => run_gradcheck(tol, seed),
        Cmd::Bench { ckpt, sample, runs } => match checkpoint_dtype(&ckpt)? {
            DType::F32 => bench::<f32>(&ckpt, sample.as_deref(), runs),
            DType::F64 => bench::<f64>(&ckpt, sample.as_deref(), runs),
        },
    }
}

fn synth(seed: u64, count: u64, spec: &str, out: &Path) -> Res {
    let text = match spec {
        "desk" | "full" => spec.to_string(),
        path => std::fs::read_to_string(path).map_err(Error::from)?,
    };
    let cfg = SynthConfig::parse(&text)?;
    for i in 0..count {
        let id = format!("scene_{i:04}");
        let s = synth_sample(seed.wrapping_add(i), &id, &cfg)?;
        let dir = write_sample(out, &s)?;
        info!("wrote {}", dir.display());
    }
    Ok(())
}

/// Element type recorded in a checkpoint header.
fn checkpoint_dtype(path: &Path) -> Res<DType> {
    let bytes = std::fs::read(path).map_err(Error::from)?;
    if bytes.len() < 12 || &bytes[..4] != b"SSCK" {
        return Err(Error::Format {
            offset: 0,
            detail: "not a checkpoint".into(),
        }
        .into());
    }
    let code = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    [DType::F32, DType::F64]
        .into_iter()
        .find(|d| d.code() == code)
        .ok_or_else(|| {
            Failure::Core(Error::Format {
                offset: 8,
                detail: format!("unknown dtype code {code}"),
            })
        })
}

fn train<T: Scalar>(cfg: ModelConfig, data: &Path, out: &Path) -> Res {
    let samples = load_dataset(data)?;
    info!("{} samples from {}", samples.len(), data.display());
    let (model, store) = Model::build::<T>(cfg)?;
    info!("{} parameters", store.num_scalars());
    let mut trainer = Trainer::new(model, store, &samples)?;
    let until = trainer.planned_steps();
    let start = Instant::now();
    trainer.run_until(until, |log| println!("{}", log.to_line()))?;
    info!("{until} steps in {:.1}s", start.elapsed().as_secs_f64());
    trainer.checkpoint().save(out)?;
    let ev = trainer.evaluate(&[])?;
    let m = ev.overall.metrics();
    println!("train IoU {:.6} mIoU {:.6}", m.iou, m.miou);
    Ok(())
}

fn eval<T: Scalar>(ckpt: &Path, data: &Path, ranges: &[f64]) -> Res {
    let ck = Checkpoint::<T>::load(ckpt)?;
    let model = ck.model()?;
    let samples = load_dataset(data)?;
    let prepared = samples.iter().map(|s| model.prepare::<T>(s)).collect::<Result<Vec<_>, _>>()?;
    let ev = evaluate(&model, &ck.store, &prepared, ranges)?;
    let names = &model.config.class_names;
    print!("{}", format_report(&ev.overall.metrics(), names));
    for (r, c) in &ev.ranges {
        print!("{}", format_records(*r, &c.metrics(), names));
    }
    for (id, c) in &ev.per_sample {
        let m = c.metrics();
        println!("sample={id} iou={:.6} miou={:.6}", m.iou, m.miou);
    }
    Ok(())
}

fn infer<T: Scalar>(ckpt: &Path, sample: &Path, out: &Path) -> Res {
    let ck = Checkpoint::<T>::load(ckpt)?;
    let model = ck.model()?;
    let s = read_sample(sample)?;
    let prep = model.prepare::<T>(&s)?;
    let store = model.without_training_heads(&ck.store);
    let (pred, _) = model.infer(&store, &prep)?;
    VGrid::from_labels(&pred).save(out)?;
    let m = iou_miou(&pred.values, &prep.labels_out.values, model.config.classes)?;
    info!("{}: IoU {:.4} mIoU {:.4} against stored labels", s.id, m.iou, m.miou);
    Ok(())
}

fn run_gradcheck(tol: f64, seed: u64) -> Res {
    let reports = gradcheck::run_suite(seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed(tol) { "ok" } else { "FAIL" };
        println!("{:<24} max_rel_err={:.3e} probes={} {verdict}", r.name, r.max_rel_err, r.probes);
        if !r.passed(tol) {
            failed.push(r.name.clone());
        }
    }
    let control = gradcheck::check_case(&gradcheck::negative_control(), seed)?;
    let caught = !control.passed(tol);
    println!(
        "{:<24} max_rel_err={:.3e} {}",
        control.name,
        control.max_rel_err,
        if caught { "detected" } else { "MISSED" }
    );
    println!("{} ops, {} failed, tol {tol:e}", reports.len(), failed.len());
    if !caught {
        failed.push(control.name);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

fn bench<T: Scalar>(ckpt: &Path, sample: Option<&Path>, runs: usize) -> Res {
    let ck = Checkpoint::<T>::load(ckpt)?;
    let model = ck.model()?;
    let s = match sample {
        Some(p) => read_sample(p)?,
        None => {
            let cfg = SynthConfig {
                spec: model.config.spec()?,
                frames: model.config.frames,
                ..SynthConfig::desk()
            };
            synth_sample(0, "bench", &cfg)?
        }
    };
    let prep = model.prepare::<T>(&s)?;
    model.infer(&ck.store, &prep)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        model.infer(&ck.store, &prep)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    println!(
        "forward ms: mean {mean:.2} median {:.2} min {:.2} ({} runs, {} seeds)",
        times[times.len() / 2],
        times[0],
        times.len(),
        infer_seeds(&model, &ck.store, &prep)?
    );
    Ok(())
}

fn infer_seeds<T: Scalar>(
    model: &Model,
    store: &ssc_core::params::ParamStore<T>,
    prep: &ssc_core::model::Prepared<T>,
) -> Result<usize, Error> {
    let mut g = ssc_core::autodiff::Graph::new();
    let out = model.forward(&mut g, store, prep, ssc_core::model::Mode::Infer)?;
    Ok(out.split.seeds.len())
}
