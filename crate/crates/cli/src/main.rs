use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dsvq::analyze::{compare_curves, disturbance_magnitude, expressiveness_curve};
use dsvq::calibrate::{calibrate_model, Activation, Increment, LrSchedule, TrainConfig, DEFAULT_LR_AUX, DEFAULT_LR_DESV};
use dsvq::desv::DEFAULT_DIAGONALS;
use dsvq::gradcheck::{run_suite, GradCheckConfig};
use dsvq::io::{
    batches_container, encode_plain, encode_quantized, load_model, matrices, read_container, records_csv, summary_csv,
    write_bundle, write_container, Model, QuantSection,
};
use dsvq::quantizer::{Axis, Granularity, QuantConfig};
use dsvq::{synth, Matrix};

#[derive(Parser)]
#[command(name = "dsvq", version, about = "Post-training quantization with learnable singular-value increments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a model and write the quantized bundle.
    Quantize(QuantizeArgs),
    /// Compare a quantized (or plain) bundle against the original model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        quantized: PathBuf,
        /// Container of input batches.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        head_seed: u64,
    },
    /// Weight disturbance and expressiveness curves.
    Analyze {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        quantized: PathBuf,
        /// Container of input batches; curves are then taken over block outputs.
        #[arg(long)]
        hidden: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write a seeded toy model bundle.
    GenModel {
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        /// Layer widths within a block, e.g. 64,128,64.
        #[arg(long, value_delimiter = ',', default_value = "64,128,64")]
        dims: Vec<usize>,
        #[arg(long, value_enum, default_value_t = ActArg::Relu)]
        activation: ActArg,
        /// Weight and bias std; 1/sqrt(fan_in) per layer when absent.
        #[arg(long)]
        weight_std: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded Gaussian activation batches.
    GenCalib {
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 128)]
        rows: usize,
        #[arg(long, default_value_t = 2)]
        batches: usize,
        /// Mix channels with a shared random matrix.
        #[arg(long)]
        correlated: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, value_parser = parse_bits)]
    bits_w: u32,
    /// Activation bits, or `fp` to keep activations in floating point.
    #[arg(long, value_parser = parse_act_bits)]
    bits_a: ActBits,
    /// Group size along the input dimension; per-output-channel when absent.
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_DIAGONALS)]
    diagonals: usize,
    /// Learning rate of the singular-value increments.
    #[arg(long, default_value_t = DEFAULT_LR_DESV)]
    lr: f64,
    /// Learning rate of smoothing and clipping parameters.
    #[arg(long, default_value_t = DEFAULT_LR_AUX)]
    lr_aux: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Rows per step; 0 uses every calibration row.
    #[arg(long, default_value_t = 0)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    schedule: ScheduleArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActArg {
    Relu,
    Gelu,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(Clone, Copy)]
struct ActBits(Option<u32>);

fn parse_bits(s: &str) -> std::result::Result<u32, String> {
    let b: u32 = s.parse().map_err(|_| format!("not an integer: {s}"))?;
    QuantConfig::per_tensor(b).map(|_| b).map_err(|e| e.to_string())
}

fn parse_act_bits(s: &str) -> std::result::Result<ActBits, String> {
    if s == "fp" {
        Ok(ActBits(None))
    } else {
        parse_bits(s).map(|b| ActBits(Some(b)))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DSVQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("DSVQ_THREADS={v} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Quantize(a) => quantize(a)?,
        Command::Eval { model, quantized, data, vocab, head_seed } => eval(&model, &quantized, &data, vocab, head_seed)?,
        Command::Analyze { orig, quantized, hidden, out } => analyze(&orig, &quantized, hidden.as_deref(), &out)?,
        Command::Gradcheck { seed } => return gradcheck(seed),
        Command::GenModel { blocks, dims, activation, weight_std, seed, out } => {
            let act = match activation {
                ActArg::Relu => Activation::Relu,
                ActArg::Gelu => Activation::Gelu,
                ActArg::None => Activation::None,
            };
            let model = synth::toy_model(blocks, &dims, act, weight_std, seed)?;
            let (m, c) = encode_plain(&model)?;
            write_bundle(&out, &m, &c)?;
        }
        Command::GenCalib { dim, rows, batches, correlated, seed, out } => {
            let b = synth::calib_batches(dim, rows, batches, correlated, seed)?;
            write_container(&out, &batches_container(&b)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn plain_model(path: &Path) -> Result<Vec<dsvq::calibrate::Block>> {
    match load_model(path).with_context(|| format!("loading {}", path.display()))? {
        Model::Plain(b) => Ok(b),
        Model::Quantized { .. } => bail!("{} is a quantized bundle; expected a full-precision model", path.display()),
    }
}

fn load_batches(path: &Path) -> Result<Vec<Matrix>> {
    let c = read_container(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(matrices(&c)?)
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = plain_model(&a.model)?;
    let calib = load_batches(&a.calib)?;
    let granularity = match a.group_size {
        Some(size) => Granularity::Group { size },
        None => Granularity::PerChannel { axis: Axis::Cols },
    };
    let mut cfg = TrainConfig::new(QuantConfig::new(a.bits_w, granularity)?, a.bits_a.0);
    cfg.increment = Increment::Band { n_diag: a.diagonals };
    cfg.lr_desv = a.lr;
    cfg.lr_aux = a.lr_aux;
    cfg.steps = a.steps;
    cfg.batch = a.batch;
    cfg.seed = a.seed;
    cfg.schedule = match a.schedule {
        ScheduleArg::Cosine => LrSchedule::Cosine,
        ScheduleArg::Constant => LrSchedule::Constant,
    };
    let result = calibrate_model(&model, &calib, &cfg)?;
    let section = QuantSection { n_diag: Some(a.diagonals), config: cfg };
    let (m, c) = encode_quantized(&result.blocks, section)?;
    write_bundle(&a.out, &m, &c)?;
    fs::write(a.out.join("calib_losses.csv"), records_csv(&result.records))?;
    fs::write(a.out.join("calib_summary.csv"), summary_csv(&result.records))?;
    for r in &result.records {
        println!(
            "block {}: rtn {:.6e} initial {:.6e} final {:.6e} ({} steps)",
            r.block, r.rtn_loss, r.initial_loss, r.final_loss, r.steps
        );
    }
    Ok(())
}

fn eval(model: &Path, quantized: &Path, data: &Path, vocab: usize, head_seed: u64) -> Result<()> {
    let plain = Model::Plain(plain_model(model)?);
    let quant = load_model(quantized).with_context(|| format!("loading {}", quantized.display()))?;
    let x = Matrix::vstack(&load_batches(data)?)?;
    let y = plain.forward(&x)?;
    let yq = quant.forward(&x)?;
    let mse = dsvq::calibrate::mse(&y, &yq)?;
    let head = synth::ToyHead::fit(&y, vocab, head_seed)?;
    let tokens = synth::reference_tokens(&y, &head)?;
    println!("mse {mse:e}");
    println!("ppl_plain {}", synth::toy_perplexity(&y, &head, &tokens)?);
    println!("ppl_quantized {}", synth::toy_perplexity(&yq, &head, &tokens)?);
    Ok(())
}

fn analyze(orig: &Path, quantized: &Path, hidden: Option<&Path>, out: &Path) -> Result<()> {
    let plain = Model::Plain(plain_model(orig)?);
    let quant = load_model(quantized).with_context(|| format!("loading {}", quantized.display()))?;
    fs::create_dir_all(out)?;
    let wo = plain.effective_weights()?;
    let wq = quant.effective_weights()?;
    if wo.len() != wq.len() {
        bail!("models have {} and {} layers", wo.len(), wq.len());
    }
    let mut dist = String::from("layer,disturbance\n");
    let mut pairs = Vec::new();
    for (k, ((name, a, _), (_, b, _))) in wo.iter().zip(&wq).enumerate() {
        let d = disturbance_magnitude(a, b)?;
        dist.push_str(&format!("{k}:{name},{d:e}\n"));
        println!("disturbance {k}:{name} {d:e}");
        pairs.push((format!("weight{k}_{name}"), a.clone(), b.clone()));
    }
    fs::write(out.join("disturbance.csv"), dist)?;
    if let Some(h) = hidden {
        let x = Matrix::vstack(&load_batches(h)?)?;
        pairs = plain
            .block_outputs(&x)?
            .into_iter()
            .zip(quant.block_outputs(&x)?)
            .enumerate()
            .map(|(k, (a, b))| (format!("hidden{k}"), a, b))
            .collect();
    }
    for (tag, a, b) in pairs {
        let ca = expressiveness_curve(&a)?;
        let cb = expressiveness_curve(&b)?;
        fs::write(out.join(format!("{tag}_orig.csv")), ca.to_csv())?;
        fs::write(out.join(format!("{tag}_quant.csv")), cb.to_csv())?;
        let cmp = compare_curves(&ca, &cb);
        println!("curve {tag} max_deviation {:e}{}", cmp.max_deviation, if cmp.padded { " (padded)" } else { "" });
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<ExitCode> {
    let reports = run_suite(&GradCheckConfig::new(seed))?;
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<16} {status:<4} coords {:>3} skipped {:>3} max_rel_err {:.3e}",
            r.name,
            r.checks.len(),
            r.skipped,
            r.max_rel_err()
        );
        ok &= r.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
