//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data/config error, 3 numerical failure.

use std::path::PathBuf;

use super::checks;
use super::evals::evaluate_checkpoint;
use super::train::train;
use super::{load_config, HarnessError};
use crate::data::{generate_dataset, manifest_path, GenConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const USAGE: &str = "\
usage: cslr <command> [options]

commands:
  gen-data   --out DIR [--num-train N] [--num-dev N] [--seed N]
             [--duration-min N] [--duration-max N] [--label-min N] [--label-max N]
             [--frame-size N] [--noise X] [--displacement X]
  train      --data DIR --out DIR [--config PATH] [--seed N] [--KEY VALUE ...]
             (any run-config key can be overridden: --gamma2 10, --lma_context none, ...)
  eval       --ckpt DIR --data DIR [--split NAME] [--out DIR] [--threads N]
  gradcheck  [--module NAME]
";

fn usage_error(msg: &str) -> i32 {
    eprintln!("error: {msg}\n{USAGE}");
    EXIT_USAGE
}

fn error_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Pull `--key value` pairs out of an argument list.
struct Flags {
    pairs: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, String> {
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let Some(key) = args[i].strip_prefix("--") else {
                return Err(format!("unexpected argument `{}`", args[i]));
            };
            let Some(value) = args.get(i + 1) else {
                return Err(format!("flag --{key} needs a value"));
            };
            pairs.push((key.to_string(), value.clone()));
            i += 2;
        }
        Ok(Flags { pairs })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.pairs.iter().position(|(k, _)| k == key)?;
        Some(self.pairs.remove(pos).1)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, String> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("flag --{key}: cannot parse `{v}`")),
        }
    }

    fn rest(self) -> Vec<(String, String)> {
        self.pairs
    }
}

pub fn run(args: Vec<String>) -> i32 {
    let Some(command) = args.first() else {
        return usage_error("missing command");
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "gradcheck" => cmd_gradcheck(rest),
        other => usage_error(&format!("unknown command `{other}`")),
    }
}

fn cmd_gen_data(args: &[String]) -> i32 {
    let flags = match Flags::parse(args) {
        Ok(f) => f,
        Err(m) => return usage_error(&m),
    };
    let (out, num_train, num_dev, seed, gen) = match parse_gen_data(flags) {
        Ok(v) => v,
        Err(m) => return usage_error(&m),
    };
    match generate_dataset(seed, (num_train, num_dev), &out, &gen) {
        Ok(m) => {
            println!(
                "wrote {} samples ({} train, {} dev) -> {}",
                m.samples.len(),
                num_train,
                num_dev,
                manifest_path(&out).display()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

#[allow(clippy::type_complexity)]
fn parse_gen_data(mut flags: Flags) -> Result<(PathBuf, usize, usize, u64, GenConfig), String> {
    let out = flags.take("out").ok_or("gen-data requires --out")?;
    let num_train = flags.take_parsed("num-train")?.unwrap_or(200);
    let num_dev = flags.take_parsed("num-dev")?.unwrap_or(50);
    let seed = flags.take_parsed("seed")?.unwrap_or(1u64);
    let mut gen = GenConfig::default();
    if let Some(v) = flags.take_parsed("duration-min")? {
        gen.duration_min = v;
    }
    if let Some(v) = flags.take_parsed("duration-max")? {
        gen.duration_max = v;
    }
    if let Some(v) = flags.take_parsed("label-min")? {
        gen.label_min = v;
    }
    if let Some(v) = flags.take_parsed("label-max")? {
        gen.label_max = v;
    }
    if let Some(v) = flags.take_parsed("frame-size")? {
        gen.frame_height = v;
        gen.frame_width = v;
    }
    if let Some(v) = flags.take_parsed("noise")? {
        gen.noise = v;
    }
    if let Some(v) = flags.take_parsed("displacement")? {
        gen.displacement = v;
    }
    if gen.duration_min == 0 || gen.duration_min > gen.duration_max {
        return Err("duration bounds must satisfy 0 < min <= max".into());
    }
    if gen.label_min == 0 || gen.label_min > gen.label_max {
        return Err("label bounds must satisfy 0 < min <= max".into());
    }
    let leftover = flags.rest();
    if let Some((k, _)) = leftover.first() {
        return Err(format!("unknown flag --{k}"));
    }
    Ok((PathBuf::from(out), num_train, num_dev, seed, gen))
}

fn cmd_train(args: &[String]) -> i32 {
    let mut flags = match Flags::parse(args) {
        Ok(f) => f,
        Err(m) => return usage_error(&m),
    };
    let config_path = flags.take("config").map(PathBuf::from);
    let data_flag = flags.take("data").map(PathBuf::from);
    let out_flag = flags.take("out").map(PathBuf::from);
    let overrides = flags.rest();
    let cfg = match load_config(config_path.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_DATA;
        }
    };
    let Some(data_dir) = data_flag.or_else(|| cfg.data_dir.clone()) else {
        return usage_error("train requires --data (or data_dir in the config)");
    };
    let Some(out_dir) = out_flag.or_else(|| cfg.out_dir.clone()) else {
        return usage_error("train requires --out (or out_dir in the config)");
    };
    match train(&cfg, &data_dir, &out_dir, false) {
        Ok(outcome) => {
            println!(
                "best dev wer {:.4} at epoch {} ({} epochs run{})",
                outcome.best_wer,
                outcome.best_epoch,
                outcome.epochs_run,
                if outcome.stopped_early {
                    ", stopped early"
                } else {
                    ""
                }
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e)
        }
    }
}

fn cmd_eval(args: &[String]) -> i32 {
    let mut flags = match Flags::parse(args) {
        Ok(f) => f,
        Err(m) => return usage_error(&m),
    };
    let Some(ckpt) = flags.take("ckpt").map(PathBuf::from) else {
        return usage_error("eval requires --ckpt");
    };
    let Some(data) = flags.take("data").map(PathBuf::from) else {
        return usage_error("eval requires --data");
    };
    let split = flags.take("split").unwrap_or_else(|| "dev".to_string());
    let out = flags.take("out").map(PathBuf::from);
    let threads = match flags.take_parsed::<usize>("threads") {
        Ok(t) => t.unwrap_or(0),
        Err(m) => return usage_error(&m),
    };
    let leftover = flags.rest();
    if let Some((k, _)) = leftover.first() {
        return usage_error(&format!("unknown flag --{k}"));
    }
    let report_dir = out.clone().unwrap_or_else(|| ckpt.clone());
    match evaluate_checkpoint(&ckpt, &data, &split, Some(&report_dir), threads) {
        Ok((summary, rows)) => {
            println!(
                "{} samples: wer {:.4}  del {:.4}  ins {:.4}",
                rows.len(),
                summary.wer,
                summary.del_rate,
                summary.ins_rate
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e)
        }
    }
}

fn cmd_gradcheck(args: &[String]) -> i32 {
    let mut flags = match Flags::parse(args) {
        Ok(f) => f,
        Err(m) => return usage_error(&m),
    };
    let module = flags.take("module");
    let leftover = flags.rest();
    if let Some((k, _)) = leftover.first() {
        return usage_error(&format!("unknown flag --{k}"));
    }
    let results = checks::run_suite(module.as_deref());
    if results.is_empty() {
        return usage_error(&format!(
            "--module `{}` matches nothing",
            module.unwrap_or_default()
        ));
    }
    println!(
        "{:<22} {:>12}  {:>8}  status",
        "check", "max rel err", "time"
    );
    let mut failures = Vec::new();
    for r in &results {
        println!(
            "{:<22} {:>12.3e}  {:>7.2}s  {}",
            r.name,
            r.max_rel_err,
            r.seconds,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failures.push(r.name);
        }
    }
    if failures.is_empty() {
        println!(
            "all {} checks passed (tolerance {:.0e})",
            results.len(),
            checks::TOLERANCE
        );
        EXIT_OK
    } else {
        eprintln!("failing checks: {}", failures.join(", "));
        EXIT_NUMERIC
    }
}
