//! `hgd` command-line tool: gradient checks, cost reports, demos and
//! tensor dumps.
//!
//! Exit codes: 0 success, 1 failed verification or runtime error, 2 usage
//! error. `HGD_THREADS` caps the worker pool.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hgd::checks::{fpn_gradcheck, seg_gradcheck, SEG_CHECK_SIZE, SEG_CHECK_SIZE_WIDE};
use hgd::cost::{emit_report, named_spec, ArchOptions};
use hgd::efficientfcn::{evaluate, segment_forward, synth_dataset, train, write_log, SegParams};
use hgd::fpn::{fpn_decode_once, FpnConfig, FpnParams, Pyramid};
use hgd::io::{export_channel_pgms, load_tensor, save_checkpoint, save_pyramid, save_tensor, AnyTensor, TWO_STAGE_STRIDES};
use hgd::tensor::gradcheck::{GradcheckConfig, GradcheckReport};
use hgd::tensor::BackwardFault;
use hgd::{Graph, Real, Tensor};

use config::{Precision, RunConfig, TRAIN_IMAGES};

#[derive(Parser)]
#[command(name = "hgd", version, about = "Holistically-guided decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every parameter group of the tiny networks.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupt one backward kernel to show the check fails.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Per-layer MAC and parameter counts of a named architecture.
    Cost {
        arch: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        c: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// `S` for a square input or `HxW`.
        #[arg(long, value_parser = parse_extent)]
        input: Option<(usize, usize)>,
        /// Branch kernel of the pyramid decoder.
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Trains the segmentation network on the synthetic task.
    DemoSeg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decodes a random pyramid.
    DemoFpn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the header and statistics of a stored tensor.
    Dump {
        #[arg(long)]
        tensor: PathBuf,
        /// Also print every value.
        #[arg(long)]
        values: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

/// Bad input from the caller; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

/// A check ran and did not pass; exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct VerificationFailed(String);

fn parse_extent(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("HGD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("HGD_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).map_err(|e| UsageError(format!("{e:#}")))?;
    cfg.validate().map_err(|e| UsageError(format!("{e:#}")))?;
    Ok(cfg)
}

fn print_report(label: &str, report: &GradcheckReport) {
    for (group, err) in report.by_group() {
        println!("{label} {group} {err:.3e}");
    }
}

fn cmd_gradcheck(config: Option<&Path>, corrupt: bool) -> Result<()> {
    let cfg = load_config(config)?;
    if cfg.precision != Precision::F64 {
        return Err(UsageError("gradcheck needs 64-bit precision; set \"precision\": \"f64\"".into()).into());
    }
    let gc = GradcheckConfig {
        seed: cfg.seed,
        fault: corrupt.then_some(BackwardFault::Conv1x1WeightGrad),
        ..GradcheckConfig::default()
    };
    let reports = [
        (format!("seg{SEG_CHECK_SIZE}"), seg_gradcheck(SEG_CHECK_SIZE, &gc)?),
        (format!("seg{SEG_CHECK_SIZE_WIDE}"), seg_gradcheck(SEG_CHECK_SIZE_WIDE, &gc)?),
        ("fpn".to_string(), fpn_gradcheck(&FpnConfig::tiny(), &gc)?),
    ];
    for (label, r) in &reports {
        print_report(label, r);
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passed())
        .filter_map(|(label, r)| r.worst().map(|w| format!("{label} {} ({:.3e})", w.name, w.max_rel_error)))
        .collect();
    if failed.is_empty() {
        println!("gradcheck passed (tol {:.0e})", gc.tol);
        Ok(())
    } else {
        Err(VerificationFailed(format!("gradcheck failed; worst: {}", failed.join(", "))).into())
    }
}

fn cmd_cost(arch: &str, opts: &ArchOptions, format: Format) -> Result<()> {
    let spec = named_spec(arch, opts).map_err(|e| UsageError(e.to_string()))?;
    let report = emit_report(&spec)?;
    match format {
        Format::Csv => print!("{}", report.to_csv()?),
        Format::Text => print!("{}", report.to_text()),
    }
    Ok(())
}

#[derive(Serialize)]
struct SegMetrics {
    #[serde(rename = "pixAcc")]
    pix_acc: f64,
    #[serde(rename = "mIoU")]
    miou: f64,
    final_loss: f64,
    steps: usize,
    seed: u64,
    n_codewords: usize,
    precision: Precision,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn demo_seg<T: Real>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seg = cfg.seg();
    let tc = cfg.train();
    let data = synth_dataset(cfg.seed, TRAIN_IMAGES, cfg.input_size, cfg.num_classes)?;
    let mut params = SegParams::<f64>::init(&seg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?.cast::<T>();
    let log = train(&mut params, &seg, &data, &tc, |r| {
        if r.iter % 50 == 0 || r.iter + 1 == tc.max_iter {
            log::info!("iter {:>4}  lr {:.5}  loss {:.4}  pixAcc {:.4}", r.iter, r.lr, r.loss, r.pix_acc);
        }
    })?;
    let csv_path = out.join("train.csv");
    let file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_log(file, &log)?;

    let (pix_acc, miou) = evaluate(&params, &seg, &data)?;
    let metrics = SegMetrics {
        pix_acc,
        miou,
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
        steps: log.len(),
        seed: cfg.seed,
        n_codewords: seg.hgd.n_codewords,
        precision: cfg.precision,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    save_checkpoint(&out.join("checkpoint"), &params)?;

    let mut g = Graph::<T>::new();
    let vars = params.bind(&mut g);
    let image = g.input(data[0].image.cast());
    let fwd = segment_forward(&mut g, image, &vars, &seg)?;
    export_channel_pgms(out, "weighting", g.value(fwd.decoder.codewords.weights))?;
    println!("pixAcc {pix_acc:.4}  mIoU {miou:.4}  ({} steps)", log.len());
    Ok(())
}

fn demo_fpn<T: Real>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let fpn = cfg.fpn();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = FpnParams::<T>::init(&fpn, &mut rng)?;
    let side = cfg.input_size / 4;
    let pyramid = Pyramid::<f64>::random(fpn.output_channels, side, side, &mut rng);
    let pyramid = Pyramid::new(pyramid.levels.each_ref().map(|l| l.cast::<T>()))?;

    let mut g = Graph::<T>::new();
    let vars = params.bind(&mut g);
    let mut x = pyramid.bind_inputs(&mut g);
    let mut first_weights = None;
    for stage in 0..fpn.k_recurrence {
        let v = &vars.stages[if fpn.share_params { 0 } else { stage }];
        let s = fpn_decode_once(&mut g, &x, v, &fpn)?;
        first_weights.get_or_insert(s.weights);
        x = s.outputs;
    }
    save_pyramid(&out.join("input"), &pyramid, TWO_STAGE_STRIDES)?;
    save_pyramid(&out.join("output"), &Pyramid::from_graph(&g, x), TWO_STAGE_STRIDES)?;
    let weights = g.value(first_weights.expect("at least one stage"));
    save_tensor(&out.join("weighting.hgdt"), weights)?;
    export_channel_pgms(out, "weighting", weights)?;
    println!(
        "decoded {} levels with k={} ({} parameter records), {} weighting maps",
        pyramid.levels.len(),
        fpn.k_recurrence,
        params.stages.len(),
        fpn.n_codewords
    );
    Ok(())
}

fn cmd_demo(config: Option<&Path>, out: &Path, seg: bool) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg)?;
    match (seg, cfg.precision) {
        (true, Precision::F64) => demo_seg::<f64>(&cfg, out),
        (true, Precision::F32) => demo_seg::<f32>(&cfg, out),
        (false, Precision::F64) => demo_fpn::<f64>(&cfg, out),
        (false, Precision::F32) => demo_fpn::<f32>(&cfg, out),
    }
}

fn print_stats<T: Real>(t: &Tensor<T>, values: bool) {
    let data: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = data.iter().sum::<f64>() / data.len().max(1) as f64;
    println!("numel {}  min {min:.6e}  max {max:.6e}  mean {mean:.6e}", data.len());
    if values {
        for v in &data {
            println!("{v:e}");
        }
    }
}

fn cmd_dump(path: &Path, values: bool) -> Result<()> {
    let t = load_tensor(path)?;
    println!("dtype {:?}  dims {:?}", t.dtype(), t.dims());
    match &t {
        AnyTensor::F32(t) => print_stats(t, values),
        AnyTensor::F64(t) => print_stats(t, values),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gradcheck {
            config,
            corrupt_backward,
        } => cmd_gradcheck(config.as_deref(), corrupt_backward),
        Command::Cost {
            arch,
            n,
            c,
            k,
            input,
            kernel,
            format,
        } => cmd_cost(
            &arch,
            &ArchOptions {
                n,
                c,
                k,
                input,
                branch_kernel: kernel,
            },
            format,
        ),
        Command::DemoSeg { config, out } => cmd_demo(config.as_deref(), &out, true),
        Command::DemoFpn { config, out } => cmd_demo(config.as_deref(), &out, false),
        Command::Dump { tensor, values } => cmd_dump(&tensor, values),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        2
    } else if let Some(hgd::Error::UnknownArch(_) | hgd::Error::Config(_)) = err.downcast_ref::<hgd::Error>() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
