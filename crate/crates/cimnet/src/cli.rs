//! The `cimnet` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cimnet_core::backend::{count_mvms, lower, simulate_graph, CostReport, CrossbarConfig};
use cimnet_core::model::graph_forward;
use cimnet_core::train::{add_awgn, denoise, model_input, psnr, train, LrSchedule, PatchSource, TrainConfig};
use cimnet_core::Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::load_model;
use crate::dataset::{build_dataset, DatasetSource, Split};
use crate::error::Error;
use crate::image::{read_pnm, to_rgb, write_pnm};
use crate::report::{cost_csv, cost_json, cost_table, fmt_db, metrics_csv, write_csv, write_file};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "cimnet", version, about = "CIM-CONV denoisers: MVM counting, training, crossbar simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count sliding windows and crossbar MVMs per layer.
    Count {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Reference model for the ratio row.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "cols")]
        rows: Option<usize>,
        #[arg(long, requires = "rows")]
        cols: Option<usize>,
        /// CSV report; a JSON copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop clean training patches from PGM/PPM images.
    Dataset {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 96)]
        patch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a patch dataset.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: u32,
        #[arg(long, default_value_t = 96)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path; metrics go to the same stem with `.metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt an image with AWGN and denoise it.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// The input is already noisy; skip corruption.
        #[arg(long)]
        no_noise: bool,
    },
    /// Run a checkpoint on the crossbar model.
    Simulate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 128)]
        rows: usize,
        #[arg(long, default_value_t = 128)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        wbits: u8,
        #[arg(long, default_value_t = 0)]
        ibits: u8,
        #[arg(long, default_value_t = 0)]
        adcbits: u8,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// PSNR between two images.
    Psnr { a: PathBuf, b: PathBuf },
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Config(_) => EXIT_CONFIG,
            Error::Core(cimnet_core::Error::Config(_) | cimnet_core::Error::Layer { .. } | cimnet_core::Error::EpochOutOfRange { .. }) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Failure { code, error }
    }
}

impl From<cimnet_core::Error> for Failure {
    fn from(e: cimnet_core::Error) -> Self {
        Error::from(e).into()
    }
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
}

impl<T, E: Into<Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_CONFIG, error: e.into() })
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Count { model, height, width, reference, rows, cols, out } => count(&model, height, width, reference.as_deref(), rows.zip(cols), &out),
        Command::Dataset { src, n, patch, seed, out } => {
            let s = build_dataset(&src, n, patch, seed, &out)?;
            for f in &s.skipped {
                eprintln!("warning: skipped {} (smaller than {patch}x{patch})", f.display());
            }
            println!(
                "wrote {} patches from {} images to {} (train {}, val {}, test {})",
                s.patches,
                s.sources,
                out.display(),
                s.splits.0,
                s.splits.1,
                s.splits.2
            );
            Ok(())
        }
        Command::Train { model, data, epochs, batch, seed, out } => train_cmd(&model, &data, epochs, batch, seed, &out),
        Command::Denoise { ckpt, input, sigma, seed, out, metrics, no_noise } => denoise_cmd(&ckpt, &input, sigma, seed, &out, metrics.as_deref(), no_noise),
        Command::Simulate { ckpt, input, rows, cols, wbits, ibits, adcbits, noise, seed, out, metrics } => {
            let cfg = CrossbarConfig { rows, cols, weight_bits: wbits, input_bits: ibits, adc_bits: adcbits, noise_sigma: noise }
                .validated()
                .config()?;
            simulate_cmd(&ckpt, &input, &cfg, seed, &out, &metrics)
        }
        Command::Psnr { a, b } => {
            let (a, b) = (read_pnm(&a)?, read_pnm(&b)?);
            if a.shape() != b.shape() {
                return Err(Failure {
                    code: EXIT_CONFIG,
                    error: Error::Config(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())),
                });
            }
            let db = psnr(&a, &b)?;
            println!("{}", if db == f64::INFINITY { "inf".into() } else { format!("{db:.2}") });
            Ok(())
        }
    }
}

fn count(model: &Path, h: usize, w: usize, reference: Option<&Path>, array: Option<(usize, usize)>, out: &Path) -> Result<(), Failure> {
    let g = load_model(model).config()?;
    let r = reference.map(load_model).transpose().config()?;
    let cfg = match array {
        Some((rows, cols)) => CrossbarConfig::exact(rows, cols).config()?,
        None => CrossbarConfig::ideal(),
    };
    let g = g.resized(h, w).config()?;
    let mut report = CostReport::from_schedule(&g, &lower(&g, &cfg, h, w).config()?);
    if let Some(r) = r {
        let r = r.resized(h, w).config()?;
        let rr = CostReport::from_schedule(&r, &lower(&r, &cfg, h, w).config()?);
        report = report.with_reference(&rr);
    }
    write_file(out, &cost_csv(&report)?)?;
    write_file(out.with_extension("json"), cost_json(&report).as_bytes())?;
    print!("{}", cost_table(&report));
    Ok(())
}

fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics.csv")
}

fn train_cmd(model: &Path, data: &Path, epochs: u32, batch: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let g = load_model(model).config()?;
    let train_set = DatasetSource::open(data, Split::Train).config()?;
    let val_set = DatasetSource::open(data, Split::Val).config()?;
    let patch = train_set
        .patch_size()?
        .ok_or_else(|| Failure { code: EXIT_CONFIG, error: Error::Config(format!("{} has no training patches", data.display())) })?;
    let cfg = TrainConfig { epochs, batch, patch, seed, schedule: LrSchedule::standard(epochs).config()?, ..TrainConfig::default() };
    cfg.validate().config()?;
    let g = g.resized(patch, patch).config()?;
    let params = g.init_params(seed);
    let val: Option<&dyn PatchSource> = if val_set.is_empty() { None } else { Some(&val_set) };
    let outcome = train(&g, params, &train_set, val, &cfg).config()?;
    for r in &outcome.log {
        println!(
            "epoch {:>3} step {:>7} lr {:e} loss {:.6} val_psnr {}",
            r.epoch,
            r.step,
            r.lr,
            r.loss,
            r.val_psnr.map(fmt_db).unwrap_or_else(|| "-".into())
        );
    }
    save_checkpoint(out, &g, &outcome.params)?;
    write_file(metrics_path(out), &metrics_csv(&outcome.log)?)?;
    println!("wrote {} and {}", out.display(), metrics_path(out).display());
    Ok(())
}

fn denoise_cmd(ckpt: &Path, input: &Path, sigma: f64, seed: u64, out: &Path, metrics: Option<&Path>, no_noise: bool) -> Result<(), Failure> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Failure { code: EXIT_CONFIG, error: Error::Config(format!("sigma {sigma} must be >= 0")) });
    }
    let (g, params) = load_checkpoint(ckpt)?;
    let clean = to_rgb(&read_pnm(input)?)?;
    let noisy = if no_noise { clean.clone() } else { add_awgn(&clean, sigma, &mut Rng::new(seed, "denoise")) };
    let result = denoise(&g, &params, &noisy, sigma).config()?;
    write_pnm(&result, out)?;
    let noisy_db = psnr(&clean, &noisy.clamp(0.0, 1.0))?;
    let out_db = psnr(&clean, &result)?;
    println!("noisy psnr {} dB, denoised psnr {} dB", fmt_db(noisy_db), fmt_db(out_db));
    if let Some(m) = metrics {
        let row = vec![input.display().to_string(), sigma.to_string(), fmt_db(noisy_db), fmt_db(out_db)];
        write_csv(m, &["image", "sigma", "noisy_psnr", "denoised_psnr"], &[row])?;
    }
    Ok(())
}

fn simulate_cmd(ckpt: &Path, input: &Path, cfg: &CrossbarConfig, seed: u64, out: &Path, metrics: &Path) -> Result<(), Failure> {
    let (g, params) = load_checkpoint(ckpt)?;
    let img = to_rgb(&read_pnm(input)?)?;
    let [n, _, h, w] = img.dims4()?;
    let g = g.resized(h, w).config()?;
    // Graphs with a noise-level channel see a zero map: the input is fed as is.
    let x = model_input(&g, &img, &vec![0.0; n])?;
    let exact = graph_forward(&g, &params, &x)?.clamp(0.0, 1.0);
    let sim = simulate_graph(&g, &params, &x, cfg, seed)?.clamp(0.0, 1.0);
    write_pnm(&sim, out)?;
    let fidelity = psnr(&exact, &sim)?;
    let mvms = count_mvms(&g, h, w)?.total_mvms;
    let tiled = lower(&g, cfg, h, w)?.total();
    println!("fidelity psnr (simulated vs exact) {} dB; {mvms} windows, {tiled} tiled mvms", fmt_db(fidelity));
    let row = vec![
        input.display().to_string(),
        cfg.rows.to_string(),
        cfg.cols.to_string(),
        cfg.weight_bits.to_string(),
        cfg.input_bits.to_string(),
        cfg.adc_bits.to_string(),
        cfg.noise_sigma.to_string(),
        tiled.to_string(),
        fmt_db(fidelity),
    ];
    write_csv(metrics, &["image", "rows", "cols", "wbits", "ibits", "adcbits", "noise", "mvms", "fidelity_psnr"], &[row])?;
    Ok(())
}
