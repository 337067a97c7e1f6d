//! Flat `key = value` config files mirroring [`TrainConfig`] field names.

use crate::CliError;
use clap::Args;
use dkan_core::distill::{DistillWeights, Temperature};
use dkan_core::train::{FinetuneDataPolicy, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Config file with `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the `desk` (64 px, CPU-sized) or `full` (800 px) preset.
    #[arg(long)]
    pub preset: Option<String>,
    /// Input side length in pixels [default: 800]
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Images per step [default: 4]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fine-tuning steps [default: 2000]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Base pretraining steps [default: 2000]
    #[arg(long)]
    pub pretrain_iterations: Option<usize>,
    /// Learning rate [default: 0.02]
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Weight decay [default: 0.0001]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Distillation temperature [default: 5]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Feature alignment weight [default: 1]
    #[arg(long = "lambda1")]
    pub lambda_fka: Option<f64>,
    /// Logit alignment weight [default: 0.01]
    #[arg(long = "lambda2")]
    pub lambda_lka: Option<f64>,
    /// Cosine classifier scale [default: 20]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Use a plain linear classifier instead of the cosine one.
    #[arg(long)]
    pub linear_classifier: bool,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// novel_only or balanced_base_plus_novel [default: balanced_base_plus_novel]
    #[arg(long = "policy")]
    pub finetune_data_policy: Option<String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| usage(format!("invalid value {v:?} for {key}")))
}

fn preset(name: &str) -> Result<TrainConfig, CliError> {
    match name {
        "desk" => Ok(TrainConfig::desk()),
        "full" | "default" => Ok(TrainConfig::default()),
        _ => Err(usage(format!("unknown preset {name:?} (desk, full)"))),
    }
}

/// Applies one `key = value` setting.
pub fn apply_setting(config: &mut TrainConfig, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "preset" => *config = preset(value)?,
        "input_size" => config.input_size = parse(key, value)?,
        "batch_size" => config.batch_size = parse(key, value)?,
        "iterations" => config.iterations = parse(key, value)?,
        "pretrain_iterations" => config.pretrain_iterations = parse(key, value)?,
        "learning_rate" | "lr" => config.learning_rate = parse(key, value)?,
        "weight_decay" => config.weight_decay = parse(key, value)?,
        "momentum" => config.momentum = parse(key, value)?,
        "tau" => config.tau = Temperature::new(parse(key, value)?).map_err(|e| usage(e.to_string()))?,
        "lambda_fka" | "lambda1" => {
            config.distill = DistillWeights::new(parse(key, value)?, config.distill.lambda_lka).map_err(|e| usage(e.to_string()))?
        }
        "lambda_lka" | "lambda2" => {
            config.distill = DistillWeights::new(config.distill.lambda_fka, parse(key, value)?).map_err(|e| usage(e.to_string()))?
        }
        "alpha" => config.alpha = parse(key, value)?,
        "linear_classifier" => config.linear_classifier = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "finetune_data_policy" | "policy" => {
            config.finetune_data_policy = value.parse::<FinetuneDataPolicy>().map_err(usage)?
        }
        _ => return Err(usage(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

pub fn parse_config_text(text: &str, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let mut config = base;
    let lines: Vec<(usize, &str, &str)> = text
        .lines()
        .enumerate()
        .filter_map(|(n, l)| {
            let l = l.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                return None;
            }
            Some((n, l))
        })
        .map(|(n, l)| match l.split_once('=') {
            Some((k, v)) => Ok((n, k.trim(), v.trim())),
            None => Err(usage(format!("line {}: expected key = value", n + 1))),
        })
        .collect::<Result<_, _>>()?;
    for (_, k, v) in lines.iter().filter(|(_, k, _)| *k == "preset") {
        apply_setting(&mut config, k, v)?;
    }
    for (n, k, v) in lines.iter().filter(|(_, k, _)| *k != "preset") {
        apply_setting(&mut config, k, v).map_err(|e| usage(format!("line {}: {e}", n + 1)))?;
    }
    Ok(config)
}

pub fn read_config_file(path: &Path, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_config_text(&text, base)
}

/// Preset, then config file, then flags.
pub fn resolve(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config = match &args.preset {
        Some(p) => preset(p)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        config = read_config_file(path, config)?;
    }
    let flags: [(&str, Option<String>); 13] = [
        ("input_size", args.input_size.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("iterations", args.iterations.map(|v| v.to_string())),
        ("pretrain_iterations", args.pretrain_iterations.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(|v| v.to_string())),
        ("weight_decay", args.weight_decay.map(|v| v.to_string())),
        ("momentum", args.momentum.map(|v| v.to_string())),
        ("tau", args.tau.map(|v| v.to_string())),
        ("lambda_fka", args.lambda_fka.map(|v| v.to_string())),
        ("lambda_lka", args.lambda_lka.map(|v| v.to_string())),
        ("alpha", args.alpha.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("finetune_data_policy", args.finetune_data_policy.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            apply_setting(&mut config, k, &v)?;
        }
    }
    if args.linear_classifier {
        config.linear_classifier = true;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

/// The effective config as `key = value` lines, readable by
/// [`parse_config_text`].
pub fn render_config(c: &TrainConfig) -> String {
    let policy = match c.finetune_data_policy {
        FinetuneDataPolicy::NovelOnly => "novel_only",
        FinetuneDataPolicy::BalancedBasePlusNovel => "balanced_base_plus_novel",
    };
    format!(
        "input_size = {}\nbatch_size = {}\niterations = {}\npretrain_iterations = {}\nlearning_rate = {}\nweight_decay = {}\nmomentum = {}\ntau = {}\nlambda_fka = {}\nlambda_lka = {}\nalpha = {}\nlinear_classifier = {}\nseed = {}\nfinetune_data_policy = {}\n",
        c.input_size,
        c.batch_size,
        c.iterations,
        c.pretrain_iterations,
        c.learning_rate,
        c.weight_decay,
        c.momentum,
        c.tau.value(),
        c.distill.lambda_fka,
        c.distill.lambda_lka,
        c.alpha,
        c.linear_classifier,
        c.seed,
        policy
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_flags_gives_reference_defaults() {
        assert_eq!(resolve(&TrainArgs::default()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "preset = desk\n# comment\ntau = 3\nalpha = 10 # trailing\n").unwrap();
        let args = TrainArgs {
            config: Some(path),
            tau: Some(7.0),
            ..Default::default()
        };
        let c = resolve(&args).unwrap();
        assert_eq!(c.input_size, 64);
        assert_eq!(c.tau.value(), 7.0);
        assert_eq!(c.alpha, 10.0);
    }

    #[test]
    fn rendered_config_round_trips() {
        let mut c = TrainConfig::desk();
        c.tau = Temperature::new(3.5).unwrap();
        c.finetune_data_policy = FinetuneDataPolicy::NovelOnly;
        let back = parse_config_text(&render_config(&c), TrainConfig::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_keys_and_values_are_usage_errors() {
        assert!(matches!(parse_config_text("nope = 1", TrainConfig::default()), Err(CliError::Usage(_))));
        assert!(matches!(parse_config_text("tau = -1", TrainConfig::default()), Err(CliError::Usage(_))));
        assert!(matches!(parse_config_text("tau 3", TrainConfig::default()), Err(CliError::Usage(_))));
    }
}
