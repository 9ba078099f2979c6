//! devgan command line: synthetic data generation, training, benchmarking,
//! inference, and gradient checking.
//!
//! Every command exits 0 on success; failures print a single
//! `error: ...` line on stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use devgan::bench::{run_bench, write_bench_csv};
use devgan::checkpoint::load_checkpoint;
use devgan::config;
use devgan::data::{generate_synthetic, SynthSpec, UnpairedDataset};
use devgan::gradcheck;
use devgan::infer::translate_dir;
use devgan::networks::ModelKind;
use devgan::training::{train_epochs, TrainConfig};

const USAGE: &str = "devgan <command> [flags]

commands:
  gen-data   --out DIR [--size N] [--count-a N] [--count-b N]
             [--test-count-a N] [--test-count-b N] [--seed N]
  train      --config FILE [--model proposed|baseline] [--resume CKPT]
  bench      --config FILE --epochs N --out REPORT.csv [--loss-threshold X]
  translate  --checkpoint CKPT --input DIR --output DIR [--pass-through-b]
  gradcheck  [--op NAME]

environment:
  DEVGAN_THREADS  worker threads for the large kernels (default 1)";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

/// Minimal strict flag parser: every flag must be known, valued flags take
/// the next argument, boolean flags stand alone.
struct Flags<'a> {
    valued: Vec<(&'a str, String)>,
    bools: Vec<&'a str>,
}

impl<'a> Flags<'a> {
    fn parse(
        args: &[String],
        valued_names: &[&'a str],
        bool_names: &[&'a str],
    ) -> Result<Self, String> {
        let mut valued = Vec::new();
        let mut bools = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = args[i].as_str();
            if let Some(&name) = valued_names.iter().find(|&&n| n == arg) {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| format!("flag {name} needs a value"))?;
                if valued.iter().any(|(n, _)| *n == name) {
                    return Err(format!("flag {name} given twice"));
                }
                valued.push((name, value.clone()));
                i += 2;
            } else if let Some(&name) = bool_names.iter().find(|&&n| n == arg) {
                bools.push(name);
                i += 1;
            } else {
                return Err(format!("unknown flag '{arg}'"));
            }
        }
        Ok(Flags { valued, bools })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.valued
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, String> {
        self.get(name)
            .ok_or_else(|| format!("missing required flag {name}"))
    }

    fn get_parsed<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, String> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("bad value '{v}' for {name}")),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.bools.contains(&name)
    }
}

fn run(args: &[String]) -> Result<(), String> {
    let Some(command) = args.first() else {
        return Err(format!("no command given\n{USAGE}"));
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train" => cmd_train(rest),
        "bench" => cmd_bench(rest),
        "translate" => cmd_translate(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(format!("unknown command '{other}'\n{USAGE}")),
    }
}

fn load_config(path: &str) -> Result<TrainConfig, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    config::from_kv_text(&text).map_err(|e| format!("{path}: {e}"))
}

fn cmd_gen_data(args: &[String]) -> Result<(), String> {
    let flags = Flags::parse(
        args,
        &[
            "--out",
            "--size",
            "--count-a",
            "--count-b",
            "--test-count-a",
            "--test-count-b",
            "--seed",
        ],
        &[],
    )?;
    let out = PathBuf::from(flags.require("--out")?);
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        image_size: flags.get_parsed("--size", defaults.image_size)?,
        count_a: flags.get_parsed("--count-a", defaults.count_a)?,
        count_b: flags.get_parsed("--count-b", defaults.count_b)?,
        test_count_a: flags.get_parsed("--test-count-a", defaults.test_count_a)?,
        test_count_b: flags.get_parsed("--test-count-b", defaults.test_count_b)?,
        seed: flags.get_parsed("--seed", defaults.seed)?,
        ..defaults
    };
    let manifest = generate_synthetic(&spec, &out).map_err(|e| e.to_string())?;
    println!("wrote {} images under {}", manifest.len(), out.display());
    Ok(())
}

fn parse_model(v: &str) -> Result<ModelKind, String> {
    match v {
        "proposed" => Ok(ModelKind::Proposed),
        "baseline" => Ok(ModelKind::Baseline),
        other => Err(format!("unknown model '{other}' (proposed|baseline)")),
    }
}

fn cmd_train(args: &[String]) -> Result<(), String> {
    let flags = Flags::parse(args, &["--config", "--model", "--resume"], &[])?;
    let mut cfg = load_config(flags.require("--config")?)?;
    if let Some(m) = flags.get("--model") {
        cfg.model = parse_model(m)?;
    }
    let resume_state = match flags.get("--resume") {
        Some(path) => {
            let (state, _ckpt_cfg) =
                load_checkpoint(PathBuf::from(path).as_path()).map_err(|e| e.to_string())?;
            Some(state)
        }
        None => None,
    };

    let dataset =
        UnpairedDataset::load(&cfg.data_root.join("trainA"), &cfg.data_root.join("trainB"))
            .map_err(|e| e.to_string())?;

    let outcome = train_epochs(&cfg, &dataset, resume_state, |s| {
        println!(
            "epoch {} ({:.1}s): cyclic {:.4} dev_a {:.4} dev_b {:.4} adv_g {:.4} adv_d {:.4}",
            s.epoch,
            s.seconds,
            s.mean_cyclic,
            s.mean_dev_a,
            s.mean_dev_b,
            s.mean_adv_gen,
            s.mean_adv_disc
        );
    })
    .map_err(|e| e.to_string())?;
    println!(
        "done: {} steps, checkpoint {}",
        outcome.steps.len(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_bench(args: &[String]) -> Result<(), String> {
    let flags = Flags::parse(
        args,
        &["--config", "--epochs", "--out", "--loss-threshold"],
        &[],
    )?;
    let cfg = load_config(flags.require("--config")?)?;
    let epochs: usize = flags
        .require("--epochs")?
        .parse()
        .map_err(|_| "bad value for --epochs".to_string())?;
    let out = PathBuf::from(flags.require("--out")?);
    let threshold: f64 = flags.get_parsed("--loss-threshold", 0.3)?;

    let dataset =
        UnpairedDataset::load(&cfg.data_root.join("trainA"), &cfg.data_root.join("trainB"))
            .map_err(|e| e.to_string())?;

    let report = run_bench(&cfg, &dataset, epochs, threshold, |model, s| {
        println!(
            "{} epoch {}: {:.1}s (cyclic {:.4})",
            model.as_str(),
            s.epoch,
            s.seconds,
            s.mean_cyclic
        );
    })
    .map_err(|e| e.to_string())?;
    write_bench_csv(&report, &out).map_err(|e| e.to_string())?;
    println!(
        "speedup {:.4}x (baseline {:.1}s / proposed {:.1}s), flop ratio {:.4}",
        report.speedup,
        report.baseline_total_seconds,
        report.proposed_total_seconds,
        report.flop_ratio
    );
    match (
        report.epochs_to_threshold_proposed,
        report.epochs_to_threshold_baseline,
    ) {
        (Some(p), Some(b)) => println!(
            "epochs to reconstruction loss <= {}: proposed {p}, baseline {b}",
            report.loss_threshold
        ),
        (p, b) => println!(
            "epochs to reconstruction loss <= {}: proposed {:?}, baseline {:?}",
            report.loss_threshold, p, b
        ),
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_translate(args: &[String]) -> Result<(), String> {
    let flags = Flags::parse(
        args,
        &["--checkpoint", "--input", "--output"],
        &["--pass-through-b"],
    )?;
    let ckpt = PathBuf::from(flags.require("--checkpoint")?);
    let input = PathBuf::from(flags.require("--input")?);
    let output = PathBuf::from(flags.require("--output")?);
    let pass_through = flags.has("--pass-through-b");

    let (state, _cfg) = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let suffix = if pass_through { "_passB" } else { "_fakeB" };
    let outcome =
        translate_dir(&state.model, &input, &output, suffix).map_err(|e| e.to_string())?;
    println!(
        "translated {} images into {}",
        outcome.count,
        output.display()
    );
    if pass_through {
        println!(
            "pass-through mean |output - input| = {:.5}",
            outcome.mean_l1_change
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> Result<(), String> {
    let flags = Flags::parse(args, &["--op"], &[])?;
    let reports = gradcheck::run(flags.get("--op"))?;
    let mut all_ok = true;
    println!(
        "{:<34} {:>12} {:>10} {:>6}",
        "op", "max_rel_err", "elements", "ok"
    );
    for r in &reports {
        println!(
            "{:<34} {:>12.3e} {:>10} {:>6}",
            r.op,
            r.max_rel_err,
            r.elements,
            if r.passed { "pass" } else { "FAIL" }
        );
        all_ok &= r.passed;
    }
    if all_ok {
        Ok(())
    } else {
        Err("gradient check failed".into())
    }
}
