//! Experiment configuration as line-oriented `key = value` text.
//!
//! `#` starts a comment that runs to the end of the line. Blank lines are
//! ignored. Unknown keys, repeated keys, unparsable values and out-of-range
//! values are errors that name the offending key.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dp::{DpParams, NoiseScaling, DEFAULT_ALPHA_GRID};
use crate::error::{Error, Result};
use crate::he::FixedPointCodec;
use crate::model::TrainConfig;
use crate::protocol::{AggregationDivisor, ProtocolParams, ServerLr};
use crate::sensitivity::FisherMode;

/// Every recognized key with a one-line description, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for every random stream"),
    ("n_clients", "number of clients"),
    ("rounds", "number of global rounds T"),
    ("local_epochs", "local epochs per round"),
    ("batch_size", "local minibatch size"),
    ("lr", "local learning rate"),
    ("q", "per-round participation probability"),
    ("dirichlet_alpha", "Dirichlet concentration of the label split"),
    ("classes_per_client", "0 for a Dirichlet split; s > 0 gives client k classes k..k+s-1"),
    ("tau", "Fisher threshold for local masks"),
    ("rho", "consensus ratio for the encrypted zone"),
    ("clip_norm", "L2 clip bound C for the noise zone"),
    ("sigma", "noise multiplier"),
    ("delta", "target delta for the (eps, delta) report"),
    ("server_lr", "server step size: fedavg_equiv or a positive number"),
    ("aggregation_divisor", "participants or contributors"),
    ("fisher_mode", "per_sample_avg or whole_batch"),
    ("fisher_max_samples", "samples scored per client, 0 for all"),
    ("noise_scaling", "standard or paper_literal"),
    ("alpha_grid", "comma-separated Renyi orders"),
    ("data_path", "CSV dataset (label,f0,...); synthetic data when unset"),
    ("synth_classes", "synthetic classes"),
    ("synth_dim", "synthetic feature dimension"),
    ("synth_samples", "synthetic samples"),
    ("synth_separation", "minimum distance between synthetic class means"),
    ("test_fraction", "held-out fraction for accuracy"),
    ("hidden1", "first hidden layer width"),
    ("hidden2", "second hidden layer width"),
    ("key_bits", "encryption modulus bits"),
    ("frac_bits", "fixed-point fractional bits"),
    ("int_bits", "fixed-point integer bits"),
    ("guard_bits", "fixed-point guard bits"),
    ("attack", "run the label-restoration attack during `run`"),
    ("attack_noise", "keep the configured sigma in the attack command"),
    ("idlg_steps", "input-reconstruction steps per attacked client, 0 to skip"),
    ("dump_fisher", "write per-client Fisher scores during `run`"),
    ("message_log", "write the serialized uploads of every round"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub q: f64,
    pub dirichlet_alpha: f64,
    pub classes_per_client: usize,
    pub tau: f64,
    pub rho: f64,
    pub clip_norm: f64,
    pub sigma: f64,
    pub delta: f64,
    pub server_lr: ServerLr,
    pub aggregation_divisor: AggregationDivisor,
    pub fisher_mode: FisherMode,
    pub fisher_max_samples: usize,
    pub noise_scaling: NoiseScaling,
    pub alpha_grid: Vec<f64>,
    pub data_path: Option<String>,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_samples: usize,
    pub synth_separation: f64,
    pub test_fraction: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub key_bits: u32,
    pub frac_bits: u32,
    pub int_bits: u32,
    pub guard_bits: u32,
    pub attack: bool,
    pub attack_noise: bool,
    pub idlg_steps: usize,
    pub dump_fisher: bool,
    pub message_log: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            n_clients: 20,
            rounds: 10,
            local_epochs: 5,
            batch_size: 32,
            lr: 0.01,
            q: 1.0,
            dirichlet_alpha: 0.5,
            classes_per_client: 0,
            tau: 0.05,
            rho: 0.5,
            clip_norm: 1.0,
            sigma: 1.0,
            delta: 1e-5,
            server_lr: ServerLr::default(),
            aggregation_divisor: AggregationDivisor::default(),
            fisher_mode: FisherMode::default(),
            fisher_max_samples: 0,
            noise_scaling: NoiseScaling::default(),
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            data_path: None,
            synth_classes: 10,
            synth_dim: 20,
            synth_samples: 4000,
            synth_separation: 10.0,
            test_fraction: 0.2,
            hidden1: 256,
            hidden2: 128,
            key_bits: 2048,
            frac_bits: 30,
            int_bits: 16,
            guard_bits: 8,
            attack: false,
            attack_noise: false,
            idlg_steps: 0,
            dump_fisher: false,
            message_log: false,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn float(key: &str, raw: &str) -> Result<f64> {
    let v: f64 = value(key, raw)?;
    if v.is_nan() {
        return Err(Error::config(key, "must be a number"));
    }
    Ok(v)
}

fn floats(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',').map(|s| float(key, s.trim())).collect()
}

fn check(ok: bool, key: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected `key = value`"))?;
            let (key, raw) = (key.trim(), raw.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, raw)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its text form without range checks.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "seed" => self.seed = value(key, raw)?,
            "n_clients" => self.n_clients = value(key, raw)?,
            "rounds" => self.rounds = value(key, raw)?,
            "local_epochs" => self.local_epochs = value(key, raw)?,
            "batch_size" => self.batch_size = value(key, raw)?,
            "lr" => self.lr = float(key, raw)?,
            "q" => self.q = float(key, raw)?,
            "dirichlet_alpha" => self.dirichlet_alpha = float(key, raw)?,
            "classes_per_client" => self.classes_per_client = value(key, raw)?,
            "tau" => self.tau = float(key, raw)?,
            "rho" => self.rho = float(key, raw)?,
            "clip_norm" => self.clip_norm = float(key, raw)?,
            "sigma" => self.sigma = float(key, raw)?,
            "delta" => self.delta = float(key, raw)?,
            "server_lr" => self.server_lr = value(key, raw)?,
            "aggregation_divisor" => self.aggregation_divisor = value(key, raw)?,
            "fisher_mode" => self.fisher_mode = value(key, raw)?,
            "fisher_max_samples" => self.fisher_max_samples = value(key, raw)?,
            "noise_scaling" => self.noise_scaling = value(key, raw)?,
            "alpha_grid" => self.alpha_grid = floats(key, raw)?,
            "data_path" => self.data_path = (!raw.is_empty()).then(|| raw.to_string()),
            "synth_classes" => self.synth_classes = value(key, raw)?,
            "synth_dim" => self.synth_dim = value(key, raw)?,
            "synth_samples" => self.synth_samples = value(key, raw)?,
            "synth_separation" => self.synth_separation = float(key, raw)?,
            "test_fraction" => self.test_fraction = float(key, raw)?,
            "hidden1" => self.hidden1 = value(key, raw)?,
            "hidden2" => self.hidden2 = value(key, raw)?,
            "key_bits" => self.key_bits = value(key, raw)?,
            "frac_bits" => self.frac_bits = value(key, raw)?,
            "int_bits" => self.int_bits = value(key, raw)?,
            "guard_bits" => self.guard_bits = value(key, raw)?,
            "attack" => self.attack = value(key, raw)?,
            "attack_noise" => self.attack_noise = value(key, raw)?,
            "idlg_steps" => self.idlg_steps = value(key, raw)?,
            "dump_fisher" => self.dump_fisher = value(key, raw)?,
            "message_log" => self.message_log = value(key, raw)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        check(self.n_clients >= 1, "n_clients", "must be at least 1")?;
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.local_epochs >= 1, "local_epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.q > 0.0 && self.q <= 1.0, "q", "must be in (0, 1]")?;
        check(
            self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite(),
            "dirichlet_alpha",
            "must be positive",
        )?;
        check(self.rho > 0.0 && self.rho <= 1.0, "rho", "must be in (0, 1]")?;
        check(self.clip_norm > 0.0 && self.clip_norm.is_finite(), "clip_norm", "must be positive")?;
        check(self.sigma >= 0.0 && self.sigma.is_finite(), "sigma", "must be non-negative")?;
        check(self.delta > 0.0 && self.delta < 1.0, "delta", "must be in (0, 1)")?;
        if let ServerLr::Fixed(v) = self.server_lr {
            check(v > 0.0 && v.is_finite(), "server_lr", "must be positive")?;
        }
        self.dp_params()
            .validate()
            .map_err(|e| Error::config("alpha_grid", e.to_string()))?;
        check(self.synth_classes >= 2, "synth_classes", "must be at least 2")?;
        check(
            self.data_path.is_some() || self.classes_per_client <= self.synth_classes,
            "classes_per_client",
            "exceeds the number of classes",
        )?;
        check(self.synth_dim >= 1, "synth_dim", "must be at least 1")?;
        check(self.synth_samples >= 1, "synth_samples", "must be at least 1")?;
        check(
            self.synth_separation >= 0.0 && self.synth_separation.is_finite(),
            "synth_separation",
            "must be non-negative",
        )?;
        check(
            (0.0..1.0).contains(&self.test_fraction),
            "test_fraction",
            "must be in [0, 1)",
        )?;
        check(self.hidden1 >= 1, "hidden1", "must be at least 1")?;
        check(self.hidden2 >= 1, "hidden2", "must be at least 1")?;
        check(
            self.key_bits >= 512 && self.key_bits.is_multiple_of(2),
            "key_bits",
            "must be an even number of at least 512",
        )?;
        let codec = self.codec()?;
        check(
            self.n_clients as u64 <= codec.capacity(),
            "guard_bits",
            "too few guard bits for this many clients",
        )?;
        Ok(())
    }

    pub fn codec(&self) -> Result<FixedPointCodec> {
        FixedPointCodec::new(self.frac_bits, self.int_bits, self.guard_bits)
            .map_err(|e| Error::config("frac_bits", e.to_string()))
    }

    pub fn dp_params(&self) -> DpParams {
        DpParams {
            clip_norm: self.clip_norm,
            sigma: self.sigma,
            noise_scaling: self.noise_scaling,
            alpha_grid: self.alpha_grid.clone(),
        }
    }

    pub fn protocol_params(&self) -> Result<ProtocolParams> {
        Ok(ProtocolParams {
            train: TrainConfig {
                epochs: self.local_epochs,
                lr: self.lr,
                batch_size: self.batch_size,
            },
            participation: self.q,
            tau: self.tau,
            rho: self.rho,
            dp: self.dp_params(),
            delta: self.delta,
            server_lr: self.server_lr,
            divisor: self.aggregation_divisor,
            fisher_mode: self.fisher_mode,
            fisher_max_samples: self.fisher_max_samples,
            codec: self.codec()?,
            key_bits: self.key_bits,
            message_log: self.message_log,
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let grid: Vec<String> = self.alpha_grid.iter().map(f64::to_string).collect();
        let mut out = String::new();
        for &(key, _) in KEYS {
            let v = match key {
                "seed" => self.seed.to_string(),
                "n_clients" => self.n_clients.to_string(),
                "rounds" => self.rounds.to_string(),
                "local_epochs" => self.local_epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "q" => self.q.to_string(),
                "dirichlet_alpha" => self.dirichlet_alpha.to_string(),
                "classes_per_client" => self.classes_per_client.to_string(),
                "tau" => self.tau.to_string(),
                "rho" => self.rho.to_string(),
                "clip_norm" => self.clip_norm.to_string(),
                "sigma" => self.sigma.to_string(),
                "delta" => self.delta.to_string(),
                "server_lr" => self.server_lr.to_string(),
                "aggregation_divisor" => self.aggregation_divisor.as_str().to_string(),
                "fisher_mode" => self.fisher_mode.as_str().to_string(),
                "fisher_max_samples" => self.fisher_max_samples.to_string(),
                "noise_scaling" => self.noise_scaling.as_str().to_string(),
                "alpha_grid" => grid.join(", "),
                "data_path" => match &self.data_path {
                    Some(p) => p.clone(),
                    None => continue,
                },
                "synth_classes" => self.synth_classes.to_string(),
                "synth_dim" => self.synth_dim.to_string(),
                "synth_samples" => self.synth_samples.to_string(),
                "synth_separation" => self.synth_separation.to_string(),
                "test_fraction" => self.test_fraction.to_string(),
                "hidden1" => self.hidden1.to_string(),
                "hidden2" => self.hidden2.to_string(),
                "key_bits" => self.key_bits.to_string(),
                "frac_bits" => self.frac_bits.to_string(),
                "int_bits" => self.int_bits.to_string(),
                "guard_bits" => self.guard_bits.to_string(),
                "attack" => self.attack.to_string(),
                "attack_noise" => self.attack_noise.to_string(),
                "idlg_steps" => self.idlg_steps.to_string(),
                "dump_fisher" => self.dump_fisher.to_string(),
                "message_log" => self.message_log.to_string(),
                _ => unreachable!("every key in KEYS is serialized"),
            };
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    /// Every key with its default and description, for `--help`.
    pub fn reference() -> String {
        let defaults = ExperimentConfig::default().to_text();
        let mut out = String::new();
        for &(key, doc) in KEYS {
            let line = defaults
                .lines()
                .find(|l| l.split('=').next().map(str::trim) == Some(key))
                .map_or_else(|| format!("{key} ="), str::to_string);
            let _ = writeln!(out, "  {line:<32} # {doc}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let cfg = ExperimentConfig::parse("tau = 0.05\nrho=0.7 # consensus\nserver_lr = fedavg_equiv\nalpha_grid = 2, 4\n").unwrap();
        assert_eq!(cfg.tau, 0.05);
        assert_eq!(cfg.rho, 0.7);
        assert_eq!(cfg.server_lr, ServerLr::Participants);
        assert_eq!(cfg.alpha_grid, vec![2.0, 4.0]);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(ExperimentConfig::parse("tau = banana").unwrap_err()), "tau");
        assert_eq!(key_of(ExperimentConfig::parse("colour = red").unwrap_err()), "colour");
        assert_eq!(key_of(ExperimentConfig::parse("rho = 1.5").unwrap_err()), "rho");
        assert_eq!(key_of(ExperimentConfig::parse("seed = 1\nseed = 2").unwrap_err()), "seed");
        assert_eq!(key_of(ExperimentConfig::parse("n_clients = -3").unwrap_err()), "n_clients");
        assert_eq!(key_of(ExperimentConfig::parse("attack = yes").unwrap_err()), "attack");
        assert_eq!(key_of(ExperimentConfig::parse("n_clients = 300").unwrap_err()), "guard_bits");
        assert_eq!(key_of(ExperimentConfig::parse("key_bits = 256").unwrap_err()), "key_bits");
        assert_eq!(key_of(ExperimentConfig::parse("just words").unwrap_err()), "line 1");
        assert_eq!(key_of(ExperimentConfig::parse("classes_per_client = 11").unwrap_err()), "classes_per_client");
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig {
            tau: 0.1 + 0.2,
            server_lr: ServerLr::Fixed(0.75),
            data_path: Some("/tmp/data.csv".into()),
            attack: true,
            idlg_steps: 50,
            classes_per_client: 3,
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.data_path = None;
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn reference_lists_every_key() {
        let r = ExperimentConfig::reference();
        for &(key, _) in KEYS {
            assert!(r.contains(key), "{key} missing");
        }
        assert!(r.contains("n_clients = 20"));
    }
}
