use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evit_core::complexity;
use evit_core::evt1;
use evit_core::model::checkpoint;
use evit_core::train::{self, argmax_classes};
use evit_core::verify::{self, Scope};
use evit_core::{Error, EvitUnet, Mode, RunConfig, Tape, Tensor};

/// Segmentation toolkit: train, evaluate, and inspect the hybrid
/// convolution/attention U-shaped network on synthetic shape data.
#[derive(Parser)]
#[command(name = "evit", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full invariant suite; exit 0 iff every group passes.
    Selftest {
        /// Score a deliberately corrupted backward rule as if it were
        /// real; the run must then fail (negative control of the tester).
        #[arg(long)]
        corrupt_backward: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic shape dataset directory (EVT1 files + manifest).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the synthetic dataset; writes checkpoint.evck, history.csv,
    /// and resolved_config.txt into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an exported dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Where to write metrics.csv.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Run one image through a checkpoint: logits as EVT1 plus an argmax
    /// mask as binary PGM (P5) next to it.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification at op, block, or model scope.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::Op)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic parameter and MAC accounting for a configuration.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input extent as HxW (defaults to the config's input_hw).
        #[arg(long)]
        input_hw: Option<String>,
        #[arg(long, value_enum, default_value_t = FormatArg::Text)]
        format: FormatArg,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::CorruptFile(_) => 3,
        _ => 2,
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize), Error> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::InvalidArg(format!("expected HxW, got '{s}'")))?;
    Ok((
        h.trim()
            .parse()
            .map_err(|_| Error::InvalidArg(format!("bad height in '{s}'")))?,
        w.trim()
            .parse()
            .map_err(|_| Error::InvalidArg(format!("bad width in '{s}'")))?,
    ))
}

fn write_pgm(path: &Path, mask: &[u8], w: usize, h: usize, maxval: usize) -> Result<(), Error> {
    if maxval == 0 || maxval > 255 {
        return Err(Error::InvalidArg(format!(
            "PGM maxval {maxval} out of range 1..=255"
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    bytes.extend_from_slice(mask);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Selftest {
            corrupt_backward,
            seed,
        } => {
            let results = verify::selftest(corrupt_backward, seed);
            for r in &results {
                println!("{}", r.line());
            }
            let ok = verify::all_passed(&results);
            println!(
                "selftest: {}/{} groups passed",
                results.iter().filter(|r| r.passed).count(),
                results.len()
            );
            Ok(if ok { 0 } else { 1 })
        }
        Cmd::Synth { config, out } => {
            let cfg = load_run_config(config.as_deref())?;
            let (h, w) = cfg.model.input_hw;
            let samples = train::generate_synth_dataset::<f32>(
                cfg.dataset_size,
                h,
                w,
                cfg.model.num_classes,
                cfg.dataset_seed,
            )?;
            train::synth::export_dataset(&out, &samples)?;
            println!(
                "wrote {} samples ({}x{}, {} classes) to {}",
                samples.len(),
                h,
                w,
                cfg.model.num_classes,
                out.display()
            );
            Ok(0)
        }
        Cmd::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("resolved_config.txt"), cfg.resolved_text())?;
            let (h, w) = cfg.model.input_hw;
            let samples = train::generate_synth_dataset::<f32>(
                cfg.dataset_size,
                h,
                w,
                cfg.model.num_classes,
                cfg.dataset_seed,
            )?;
            let model = EvitUnet::<f32>::build(&cfg.model)?;
            let history = train::train_model(&model, &samples, &cfg.train_options(), |r| {
                println!(
                    "epoch {:>3}: train_loss {:.6} eval_dsc {:.6} eval_iou {:.6}",
                    r.epoch, r.train_loss, r.eval.mean_dsc, r.eval.mean_iou
                );
            })?;
            std::fs::write(out.join("history.csv"), train::history_csv(&history))?;
            checkpoint::save(&model, &out.join("checkpoint.evck"))?;
            println!("wrote checkpoint and history to {}", out.display());
            Ok(0)
        }
        Cmd::Eval {
            checkpoint: ckpt,
            dataset,
            out,
        } => {
            let cfg = checkpoint::read_config(&ckpt)?;
            let model = checkpoint::load::<f32>(&ckpt, &cfg)?;
            let samples = train::synth::import_dataset::<f32>(&dataset)?;
            let refs: Vec<&train::SynthSample<f32>> = samples.iter().collect();
            let report = train::evaluate(&model, &refs, 8, 0.5, 0.5)?;
            print!("{}", report.render_text());
            std::fs::write(&out, report.render_csv())?;
            println!("metrics written to {}", out.display());
            Ok(0)
        }
        Cmd::Predict {
            checkpoint: ckpt,
            input,
            out,
        } => {
            let cfg = checkpoint::read_config(&ckpt)?;
            let model = checkpoint::load::<f32>(&ckpt, &cfg)?;
            let img = evt1::read_tensor_from_path::<f32>(&input)?;
            let img = match img.rank() {
                3 => {
                    let s = img.shape().to_vec();
                    Tensor::from_vec(&[1, s[0], s[1], s[2]], img.to_vec())?
                }
                4 if img.shape()[0] == 1 => img,
                _ => {
                    return Err(Error::InvalidArg(format!(
                        "predict expects one [3,H,W] or [1,3,H,W] image, got {:?}",
                        img.shape()
                    )))
                }
            };
            let (h, w) = (img.shape()[2], img.shape()[3]);
            if img.shape()[1] != 3 || (h, w) != cfg.input_hw {
                return Err(Error::InvalidArg(format!(
                    "image {:?} does not match the checkpoint input 3x{}x{}",
                    img.shape(),
                    cfg.input_hw.0,
                    cfg.input_hw.1
                )));
            }
            let tape = Tape::disabled();
            let logits = model.forward(&tape, &img, Mode::Eval)?;
            evt1::write_tensor_to_path(&out, &logits)?;
            let mask = argmax_classes(&logits);
            let pgm = out.with_extension("pgm");
            write_pgm(&pgm, &mask, w, h, cfg.num_classes - 1)?;
            println!(
                "wrote logits to {} and mask to {}",
                out.display(),
                pgm.display()
            );
            Ok(0)
        }
        Cmd::Gradcheck { scope, seed } => {
            let scope = match scope {
                ScopeArg::Op => Scope::Op,
                ScopeArg::Block => Scope::Block,
                ScopeArg::Model => Scope::Model,
            };
            let seeds: Vec<u64> = (1..=5).map(|i| seed + i).collect();
            let results = verify::gradcheck_scope(scope, &seeds);
            for r in &results {
                println!("{}", r.line());
            }
            Ok(if verify::all_passed(&results) { 0 } else { 1 })
        }
        Cmd::Flops {
            config,
            input_hw,
            format,
        } => {
            let cfg = load_run_config(config.as_deref())?;
            let hw = match input_hw {
                Some(s) => parse_hw(&s)?,
                None => cfg.model.input_hw,
            };
            let report = complexity::count_macs(&cfg.model, hw, 1)?;
            match format {
                FormatArg::Text => print!("{}", report.render_text()),
                FormatArg::Csv => print!("{}", report.render_csv()),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
