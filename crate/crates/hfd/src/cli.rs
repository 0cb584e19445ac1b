//! The `hfd` command line.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! data and I/O errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hfd_core::codec::Bitstream;
use hfd_core::denoise::GaussianOracleDenoiser;
use hfd_core::diffusion::sample;
use hfd_core::{Dims, SeededStream};

use crate::checkpoint::Checkpoint;
use crate::config::{Method, RunConfig};
use crate::error::{io_at, HfdError, Result};
use crate::imageio::{load_image, save_image};
use crate::parallel::Rayon;
use crate::pipeline::{compress, decompress, stage_one, RefineSettings};
use crate::report::{evaluate, write_csv};
use crate::training::{Dataset, TrainJob};

#[derive(Parser, Debug)]
#[command(name = "hfd", version, about = "Two-stage generative image codec")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command; they override the config file.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    /// Sampling steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub stages: Option<usize>,
    /// Residual-energy side channel.
    #[arg(long, global = true)]
    pub hfd_plus: bool,
    /// Stop after the stage-one reconstruction.
    #[arg(long, global = true)]
    pub no_refine: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode an image into a bitstream.
    Compress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Decode a bitstream and refine it.
    Decompress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the refinement network on a directory of images.
    Train {
        dataset: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss log (CSV: step,loss,lr).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        train_steps: Option<u64>,
    },
    /// Compare reconstructions against originals.
    Eval {
        originals: PathBuf,
        reconstructions: PathBuf,
        /// Directory with `<stem>.hfdc` bitstreams for bpp and stage-one PSNR.
        #[arg(long)]
        bitstreams: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Unconditional sampling of scalar Gaussian data with the exact
    /// denoiser; prints the sample mean and variance.
    Sample {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        mean: f64,
        #[arg(long, default_value_t = 1.0)]
        var: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn usage(msg: impl Into<String>) -> HfdError {
    HfdError::Usage(msg.into())
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HfdError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| HfdError::Config(e.to_string()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.method {
            c.method = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        if let Some(v) = self.stages {
            c.stages = v;
        }
        c.hfd_plus |= self.hfd_plus;
        c.validate()?;
        Ok(c)
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_at(path))
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = cli.common.resolve()?;
    let io = |e: std::io::Error| HfdError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    match &cli.command {
        Command::Compress { input, output } => {
            let img = load_image(input)?;
            let bs = compress(&img, &cfg.codec(), cfg.hfd_plus)?;
            write_out(output, &bs.to_bytes())?;
            writeln!(out, "{} bytes, {:.4} bpp", bs.byte_len(), bs.bpp()).map_err(io)?;
        }
        Command::Decompress { input, output, checkpoint } => {
            let bytes = std::fs::read(input).map_err(io_at(input))?;
            let bs = Bitstream::from_bytes(&bytes)?;
            let img = if cli.common.no_refine {
                stage_one(&bs)?
            } else {
                let path = checkpoint
                    .clone()
                    .or_else(|| cfg.checkpoint.as_ref().map(PathBuf::from))
                    .ok_or_else(|| usage("refinement needs --checkpoint (or --no-refine)"))?;
                let ck = Checkpoint::load(&path)?;
                let ctx = bs.channels as usize + (bs.side.is_some() && ck.net.context_channels > bs.channels as usize) as usize;
                ck.check_compatible(cfg.method.loss_kind(), &cfg.schedule()?, ctx)?;
                let net = ck.network()?;
                let t0 = Instant::now();
                let img = decompress(&bs, &net, &RefineSettings::from_config(&cfg)?, &Rayon)?;
                writeln!(err, "refined in {:.1} s", t0.elapsed().as_secs_f64()).ok();
                img
            };
            save_image(&img, output)?;
        }
        Command::Train { dataset, output, resume, log, train_steps } => {
            let ds = Dataset::load_dir(dataset, &cfg.codec(), cfg.hfd_plus)?;
            let job = TrainJob {
                kind: cfg.method.loss_kind(),
                net: cfg.net_config(ds.channels)?,
                train: cfg.train_config(),
                crop: cfg.crop,
                border: cfg.border,
                seed: cfg.seed,
                dataset: &ds,
            };
            let mut state = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    if ck.config_hash() != crate::checkpoint::config_hash(job.kind, &job.net, &job.train.sched) {
                        return Err(HfdError::Checkpoint("resume checkpoint was trained with a different configuration".into()));
                    }
                    let mut st = ck.resume_state()?;
                    st.config = job.train.clone();
                    st
                }
                None => job.init_state()?,
            };
            let until = state.step + train_steps.unwrap_or(cfg.train_steps);
            let mut logw = match log {
                Some(p) => {
                    let mut f = std::fs::File::create(p).map_err(io_at(p))?;
                    writeln!(f, "step,loss,lr").map_err(io_at(p))?;
                    Some((f, p.clone()))
                }
                None => None,
            };
            let mut werr = None;
            let (mut acc, mut n) = (0.0, 0u64);
            job.run(&mut state, until, &Rayon, |step, loss, lr| {
                if let Some((f, p)) = &mut logw {
                    if let Err(e) = writeln!(f, "{step},{loss:.6},{lr:.3e}") {
                        werr.get_or_insert(HfdError::Io { path: p.clone(), source: e });
                    }
                }
                acc += loss;
                n += 1;
                if (step + 1) % cfg.log_every == 0 {
                    writeln!(err, "step {} loss {:.5}", step + 1, acc / n as f64).ok();
                    acc = 0.0;
                    n = 0;
                }
            })?;
            if let Some(e) = werr {
                return Err(e);
            }
            Checkpoint::from_state(job.kind, job.net.clone(), &state, true).save(output)?;
            writeln!(out, "trained to step {}", state.step).map_err(io)?;
        }
        Command::Eval { originals, reconstructions, bitstreams, output } => {
            let report = evaluate(originals, reconstructions, bitstreams.as_deref())?;
            if report.skipped > 0 {
                writeln!(err, "warning: {} image(s) smaller than a patch skipped for the Fréchet distance", report.skipped).ok();
            }
            match output {
                Some(p) => {
                    let f = std::fs::File::create(p).map_err(io_at(p))?;
                    write_csv(&report, f)?;
                }
                None => write_csv(&report, &mut *out)?,
            }
        }
        Command::Sample { n, mean, var, output } => {
            if cfg.method == Method::Rectflow {
                return Err(usage("sample supports ddpm and ddim"));
            }
            if *n == 0 {
                return Err(usage("--n must be positive"));
            }
            let sched = cfg.schedule()?;
            let den = GaussianOracleDenoiser::isotropic(*n, *mean, *var)?.with_schedule(sched);
            let xs = sample(&den, Dims::flat(*n), &[], cfg.steps, cfg.sampler(), &sched, &SeededStream::new(cfg.seed), None)?;
            let m = xs.iter().sum::<f64>() / *n as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (*n as f64 - 1.0).max(1.0);
            writeln!(out, "n={n} mean={m:.6} var={v:.6}").map_err(io)?;
            if let Some(p) = output {
                let text: String = xs.iter().map(|x| format!("{x}\n")).collect();
                write_out(p, text.as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit
/// status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                out.write_all(text.as_bytes()).ok();
            } else {
                err.write_all(text.as_bytes()).ok();
            }
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            e.exit_code()
        }
    }
}
