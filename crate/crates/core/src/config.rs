//! Command-line training configuration with dotted flags
//! (`--env.ndim 4`, `--logit_PB.module_name Uniform`, `--optim.lr 5e-3`).

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use crate::env::{DiscreteEbm, Env, HyperGrid, DEFAULT_ENUMERATION_LIMIT};
use crate::error::{Error, Result};
use crate::losses::{LossKind, DEFAULT_SUBTB_LAMBDA};
use crate::nn::{Activation, Algorithm, ModuleKind, NeuralNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    HyperGrid,
    DiscreteEbm,
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("HyperGrid") {
            Ok(EnvKind::HyperGrid)
        } else if s.eq_ignore_ascii_case("DiscreteEBM") {
            Ok(EnvKind::DiscreteEbm)
        } else {
            Err(Error::Config(format!("unknown environment {s:?}, expected HyperGrid or DiscreteEBM")))
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::HyperGrid => "HyperGrid",
            EnvKind::DiscreteEbm => "DiscreteEBM",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}, expected sgd or adam"))),
        }
    }
}

impl OptimKind {
    pub fn algorithm(self) -> Algorithm {
        match self {
            OptimKind::Sgd => Algorithm::Sgd,
            OptimKind::Adam => Algorithm::adam(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::Config(format!("unknown dtype {s:?}, expected f32 or f64"))),
        }
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s.to_ascii_lowercase().as_str() {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        _ => Err(Error::Config(format!("unknown activation {s:?}, expected relu or tanh"))),
    }
}

/// Train a GFlowNet on a discrete environment.
#[derive(Clone, Debug, PartialEq, Parser)]
#[command(name = "gfn-train", version)]
pub struct TrainConfig {
    /// Environment: HyperGrid or DiscreteEBM.
    #[arg(long = "env", default_value = "HyperGrid")]
    pub env: EnvKind,
    /// Dimension of the grid or number of EBM coordinates [default: 2 for HyperGrid, 4 for DiscreteEBM].
    #[arg(long = "env.ndim")]
    pub ndim: Option<usize>,
    /// Grid side length (HyperGrid only) [default: 8].
    #[arg(long = "env.height")]
    pub height: Option<usize>,
    /// Base reward (HyperGrid only) [default: 0.1].
    #[arg(long = "env.R0")]
    pub r0: Option<f64>,
    /// Outer plateau bonus (HyperGrid only) [default: 0.5].
    #[arg(long = "env.R1")]
    pub r1: Option<f64>,
    /// Inner plateau bonus (HyperGrid only) [default: 2.0].
    #[arg(long = "env.R2")]
    pub r2: Option<f64>,
    /// Inverse temperature of the energy (DiscreteEBM only) [default: 1.0].
    #[arg(long = "env.alpha")]
    pub alpha: Option<f64>,

    /// Training objective: FM, DB, ModifiedDB, TB, SubTB or ZVar.
    #[arg(long, default_value = "TB")]
    pub loss: LossKind,
    #[arg(long = "n_iterations", default_value_t = 1000)]
    pub n_iterations: usize,
    #[arg(long = "batch_size", default_value_t = 16)]
    pub batch_size: usize,
    /// Replay buffer capacity in trajectories; 0 disables replay.
    #[arg(long = "replay_buffer_size", default_value_t = 0)]
    pub replay_buffer_size: usize,

    /// Forward-policy module: NeuralNet, Uniform, Zero or Tabular.
    #[arg(long = "logit_PF.module_name", default_value = "NeuralNet")]
    pub pf_module: ModuleKind,
    /// Backward-policy module.
    #[arg(long = "logit_PB.module_name", default_value = "NeuralNet")]
    pub pb_module: ModuleKind,
    /// State-flow module (DB, SubTB).
    #[arg(long = "logF.module_name", default_value = "NeuralNet")]
    pub logf_module: ModuleKind,
    /// Edge-flow module (FM).
    #[arg(long = "log_edge_flow.module_name", default_value = "NeuralNet")]
    pub edge_flow_module: ModuleKind,
    #[arg(long = "hidden_dim", default_value_t = 256)]
    pub hidden_dim: usize,
    #[arg(long = "n_hidden_layers", default_value_t = 2)]
    pub n_hidden_layers: usize,
    /// Hidden activation: relu or tanh.
    #[arg(long, default_value = "relu", value_parser = parse_activation)]
    pub activation: Activation,
    /// NeuralNet backward policy and state flow reuse the forward policy's
    /// torso. No effect with FM.
    #[arg(long = "share_torso")]
    pub share_torso: bool,
    /// Parametrize log F(s) as log R(s) plus a learned correction.
    #[arg(long = "forward_looking")]
    pub forward_looking: bool,

    /// Sampling temperature applied to forward logits.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Probability mass mixed in uniformly over valid actions when sampling.
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    #[arg(long = "subtb_lambda", default_value_t = DEFAULT_SUBTB_LAMBDA)]
    pub subtb_lambda: f64,

    /// Optimizer: sgd or adam.
    #[arg(long = "optim", default_value = "adam")]
    pub optim: OptimKind,
    /// Learning rate of every parameter except logZ.
    #[arg(long = "optim.lr", default_value_t = 1e-3)]
    pub lr: f64,
    /// Learning rate of logZ.
    #[arg(long = "optim.logZ_lr", default_value_t = 0.1)]
    pub log_z_lr: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics file, one JSON object per line.
    #[arg(long, default_value = "./metrics.jsonl")]
    pub output: PathBuf,
    /// Iterations between metric records.
    #[arg(long = "eval_interval", default_value_t = 100)]
    pub eval_interval: usize,
    /// Largest state space evaluated exactly.
    #[arg(long = "enumeration_limit", default_value_t = DEFAULT_ENUMERATION_LIMIT)]
    pub enumeration_limit: usize,
    /// Record wall-clock time in the metrics (makes the file run-dependent).
    #[arg(long)]
    pub timing: bool,
    /// Floating-point precision: f32 or f64.
    #[arg(long, default_value = "f64")]
    pub dtype: Dtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::parse_from(["gfn-train"])
    }
}

/// Parses and validates command-line arguments; `argv[0]` is the program name.
pub fn parse_config<I, T>(argv: I) -> std::result::Result<TrainConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = TrainConfig::try_parse_from(argv)?;
    cfg.validate().map_err(|e| TrainConfig::command().error(ErrorKind::ArgumentConflict, e.to_string()))?;
    Ok(cfg)
}

impl TrainConfig {
    pub fn build_env(&self) -> Result<Box<dyn Env>> {
        Ok(match self.env {
            EnvKind::HyperGrid => {
                let ndim = self.ndim.unwrap_or(2);
                let height = self.height.unwrap_or(8);
                if ndim == 0 || height < 2 {
                    return Err(Error::Config(format!(
                        "--env.ndim must be positive and --env.height at least 2, got {ndim} and {height}"
                    )));
                }
                Box::new(HyperGrid::with_rewards(
                    ndim,
                    height,
                    self.r0.unwrap_or(HyperGrid::DEFAULT_R0),
                    self.r1.unwrap_or(HyperGrid::DEFAULT_R1),
                    self.r2.unwrap_or(HyperGrid::DEFAULT_R2),
                ))
            }
            EnvKind::DiscreteEbm => {
                let ndim = self.ndim.unwrap_or(4);
                if ndim == 0 {
                    return Err(Error::Config("--env.ndim must be positive".into()));
                }
                Box::new(DiscreteEbm::new(ndim, self.alpha.unwrap_or(1.0)))
            }
        })
    }

    pub fn network(&self) -> NeuralNetConfig {
        NeuralNetConfig { hidden: vec![self.hidden_dim; self.n_hidden_layers], activation: self.activation }
    }

    /// Checks flag combinations that parse individually but cannot train.
    pub fn validate(&self) -> Result<()> {
        let bad = |flag: &str, why: String| Err(Error::Config(format!("{flag}: {why}")));
        if self.env == EnvKind::DiscreteEbm {
            for (flag, set) in [
                ("--env.height", self.height.is_some()),
                ("--env.R0", self.r0.is_some()),
                ("--env.R1", self.r1.is_some()),
                ("--env.R2", self.r2.is_some()),
            ] {
                if set {
                    return bad(flag, "only applies to HyperGrid".into());
                }
            }
        }
        if self.env == EnvKind::HyperGrid && self.alpha.is_some() {
            return bad("--env.alpha", "only applies to DiscreteEBM".into());
        }
        for (flag, value) in [("--env.R0", self.r0), ("--env.R1", self.r1), ("--env.R2", self.r2)] {
            if let Some(v) = value {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(flag, format!("rewards must be nonnegative, got {v}"));
                }
            }
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() {
                return bad("--env.alpha", format!("must be finite, got {a}"));
            }
        }
        let env = self.build_env()?;
        if self.loss == LossKind::ModifiedDB && !env.all_states_terminating() {
            return bad("--loss", format!("ModifiedDB needs every state to be terminating, {} has non-terminating states", env.name()));
        }
        if self.forward_looking {
            if !env.all_states_terminating() {
                return bad(
                    "--forward_looking",
                    format!("needs every state to be terminating, {} has non-terminating states", env.name()),
                );
            }
            if !matches!(self.loss, LossKind::DB | LossKind::SubTB) {
                return bad("--forward_looking", format!("only applies to losses with a state flow (DB, SubTB), not {}", self.loss));
            }
        }
        if self.batch_size == 0 {
            return bad("--batch_size", "must be positive".into());
        }
        if self.loss == LossKind::ZVar && self.batch_size < 2 {
            return bad("--batch_size", "ZVar needs at least 2 trajectories per batch".into());
        }
        if self.replay_buffer_size > 0 && self.batch_size < 2 {
            return bad("--replay_buffer_size", "replay needs --batch_size of at least 2".into());
        }
        if self.eval_interval == 0 {
            return bad("--eval_interval", "must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("--temperature", format!("must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("--epsilon", format!("must lie in [0, 1], got {}", self.epsilon));
        }
        if !(self.subtb_lambda > 0.0 && self.subtb_lambda <= 1.0) {
            return bad("--subtb_lambda", format!("must lie in (0, 1], got {}", self.subtb_lambda));
        }
        for (flag, lr) in [("--optim.lr", self.lr), ("--optim.logZ_lr", self.log_z_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(flag, format!("must be nonnegative, got {lr}"));
            }
        }
        if self.share_torso && self.loss != LossKind::FM {
            if self.pf_module != ModuleKind::NeuralNet {
                return bad("--share_torso", "needs a NeuralNet forward policy".into());
            }
        }
        let uses_pf = self.loss != LossKind::FM;
        let kinds = [
            ("--logit_PF.module_name", self.pf_module, uses_pf),
            ("--logit_PB.module_name", self.pb_module, uses_pf),
            ("--logF.module_name", self.logf_module, matches!(self.loss, LossKind::DB | LossKind::SubTB)),
            ("--log_edge_flow.module_name", self.edge_flow_module, !uses_pf),
        ];
        for (flag, kind, used) in kinds {
            if used && kind == ModuleKind::Tabular && env.n_states().is_none() {
                return bad(flag, format!("Tabular needs an enumerable state space, {} is not", env.name()));
            }
            if used && kind == ModuleKind::NeuralNet && self.n_hidden_layers > 0 && self.hidden_dim == 0 {
                return bad("--hidden_dim", "must be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &str) -> std::result::Result<TrainConfig, clap::Error> {
        parse_config(std::iter::once("gfn-train").chain(args.split_whitespace()))
    }

    #[test]
    fn reference_command_lines() {
        let c = parse("--env HyperGrid --env.ndim 4 --env.height 8 --n_iterations 100000 --loss TB").unwrap();
        assert_eq!((c.env, c.ndim, c.height, c.loss, c.n_iterations), (EnvKind::HyperGrid, Some(4), Some(8), LossKind::TB, 100000));
        let env = c.build_env().unwrap();
        assert_eq!(env.name(), HyperGrid::new(4, 8, 0.1).name());

        let c = parse("--env DiscreteEBM --env.ndim 4 --env.alpha 0.5 --n_iterations 10000 --batch_size 64 --temperature 2.")
            .unwrap();
        assert_eq!((c.env, c.ndim, c.alpha, c.batch_size, c.temperature), (EnvKind::DiscreteEbm, Some(4), Some(0.5), 64, 2.0));

        let c = parse(
            "--env HyperGrid --env.ndim 2 --env.height 64 --n_iterations 100000 --loss DB --replay_buffer_size 1000 \
             --logit_PB.module_name Uniform --optim sgd --optim.lr 5e-3",
        )
        .unwrap();
        assert_eq!((c.loss, c.replay_buffer_size, c.pb_module, c.optim, c.lr), (LossKind::DB, 1000, ModuleKind::Uniform, OptimKind::Sgd, 5e-3));

        let c = parse("--env HyperGrid --env.ndim 4 --env.height 8 --env.R0 0.01 --loss FM --optim adam --optim.lr 1e-4").unwrap();
        assert_eq!((c.r0, c.loss, c.optim, c.lr), (Some(0.01), LossKind::FM, OptimKind::Adam, 1e-4));
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.lr, c.log_z_lr, c.subtb_lambda, c.eval_interval), (16, 1e-3, 0.1, 0.9, 100));
        assert_eq!(c.output, PathBuf::from("./metrics.jsonl"));
        assert_eq!(c.network(), NeuralNetConfig::default());
        assert!(!c.timing);
    }

    #[test]
    fn rejects_incompatible_combinations() {
        let e = parse("--loss ModifiedDB --env DiscreteEBM").unwrap_err();
        assert!(e.to_string().contains("--loss"), "{e}");
        let e = parse("--env DiscreteEBM --forward_looking --loss DB").unwrap_err();
        assert!(e.to_string().contains("--forward_looking"), "{e}");
        let e = parse("--env DiscreteEBM --env.height 4").unwrap_err();
        assert!(e.to_string().contains("--env.height"), "{e}");
        let e = parse("--loss ZVar --batch_size 1").unwrap_err();
        assert!(e.to_string().contains("--batch_size"), "{e}");
        assert!(parse("--loss ModifiedDB --env HyperGrid").is_ok());
        assert!(parse("--loss SubTB --forward_looking").is_ok());
    }

    #[test]
    fn rejects_unknown_flags_and_bad_values() {
        assert_eq!(parse("--env.width 3").unwrap_err().kind(), ErrorKind::UnknownArgument);
        let e = parse("--env.ndim four").unwrap_err();
        assert_eq!(e.kind(), ErrorKind::ValueValidation);
        assert!(e.to_string().contains("--env.ndim"), "{e}");
        let e = parse("--logit_PF.module_name Transformer").unwrap_err();
        assert!(e.to_string().contains("--logit_PF.module_name"), "{e}");
        assert!(parse("--epsilon 1.5").is_err());
        assert!(parse("--temperature 0").is_err());
    }

    #[test]
    fn help_lists_dotted_flags() {
        let help = TrainConfig::command().render_long_help().to_string();
        for flag in ["--env.ndim", "--logit_PB.module_name", "--optim.lr", "--replay_buffer_size", "--subtb_lambda"] {
            assert!(help.contains(flag), "{flag}");
        }
    }
}
