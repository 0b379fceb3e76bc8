//! Experiment modes behind the command-line runner. Each mode builds a
//! simulation from an [`ExperimentConfig`] and streams CSV rows into an
//! output directory as rounds complete.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attack::{attack_round, ClientAttack, IdlgConfig};
use crate::config::ExperimentConfig;
use crate::data::{class_shard_partition, dirichlet_partition, load_csv, synth_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::protocol::{RoundReport, Simulation, SimulationSetup};
use crate::report::{self, CsvSink};
use crate::rng::{derive, Stream};
use crate::sensitivity::{compute_fisher, FisherScores};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const PRIVACY_FILE: &str = "privacy.csv";
pub const ATTACK_FILE: &str = "attack.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MESSAGE_LOG_FILE: &str = "messages.bin";

pub fn fisher_file(client: usize) -> String {
    format!("fisher_client{client}.csv")
}

/// Loads or synthesizes the data, holds out a test split, and deals the rest
/// across clients.
pub fn build_setup(cfg: &ExperimentConfig) -> Result<SimulationSetup> {
    cfg.validate()?;
    let dataset = match &cfg.data_path {
        Some(path) => load_csv(path)?,
        None => synth_dataset(
            cfg.synth_classes,
            cfg.synth_dim,
            cfg.synth_samples,
            cfg.synth_separation,
            &mut derive(cfg.seed, Stream::Data, 0, 0),
        )?,
    };
    let (train, test) = dataset.split(cfg.test_fraction, &mut derive(cfg.seed, Stream::Split, 0, 0))?;
    let mut rng = derive(cfg.seed, Stream::Partition, 0, 0);
    let plan = match cfg.classes_per_client {
        0 => dirichlet_partition(&train, cfg.n_clients, cfg.dirichlet_alpha, &mut rng)?,
        s => class_shard_partition(&train, cfg.n_clients, s, &mut rng)
            .map_err(|e| Error::config("classes_per_client", e.to_string()))?,
    };
    let clients: Vec<LabeledDataset> = plan.assignments.iter().map(|rows| train.subset(rows)).collect();
    let spec = ModelSpec::new(dataset.dim(), cfg.hidden1, cfg.hidden2, dataset.num_classes())?;
    Ok(SimulationSetup {
        seed: cfg.seed,
        spec,
        clients,
        test: (!test.is_empty()).then_some(test),
        params: cfg.protocol_params()?,
    })
}

fn append(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes each client's Fisher scores of the current global model.
pub fn write_fisher(sim: &Simulation, out: &Path) -> Result<Vec<PathBuf>> {
    let params = sim.params();
    let mut paths = Vec::with_capacity(sim.clients().len());
    for client in sim.clients() {
        let raw = compute_fisher(
            sim.model(),
            sim.global_model(),
            client.data.as_batch(),
            params.fisher_mode,
            params.fisher_max_samples,
        )?;
        let scores = FisherScores::from_raw(raw, sim.model().layout().clone())?;
        let path = out.join(fisher_file(client.id));
        scores.write_csv(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reports: Vec<RoundReport>,
    pub attacks: Vec<ClientAttack>,
}

impl RunSummary {
    pub fn final_accuracy(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.accuracy)
    }
}

fn idlg_config(cfg: &ExperimentConfig) -> Option<IdlgConfig> {
    (cfg.idlg_steps > 0).then(|| IdlgConfig {
        steps: cfg.idlg_steps,
        ..IdlgConfig::default()
    })
}

/// Runs `cfg.rounds` rounds, writing the round and privacy CSVs and, when
/// enabled, the attack CSV, the message log, and final Fisher dumps.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let mut sim = Simulation::new(build_setup(cfg)?)?;
    let mut rounds = CsvSink::create(out.join(ROUNDS_FILE), report::ROUND_HEADER)?;
    let mut privacy = CsvSink::create(out.join(PRIVACY_FILE), report::PRIVACY_HEADER)?;
    let mut attack_sink = if cfg.attack {
        Some(CsvSink::create(out.join(ATTACK_FILE), report::ATTACK_HEADER)?)
    } else {
        None
    };
    let log_path = out.join(MESSAGE_LOG_FILE);
    if cfg.message_log {
        fs::write(&log_path, [])?;
    }
    let idlg = idlg_config(cfg);

    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut attacks = Vec::new();
    for _ in 0..cfg.rounds {
        let outcome = sim.run_round()?;
        rounds.push(&report::round_row(&outcome.report))?;
        privacy.push(&report::privacy_row(&outcome.report.privacy))?;
        if let Some(sink) = attack_sink.as_mut() {
            for a in attack_round(&sim, &outcome, idlg.as_ref())? {
                sink.push(&report::attack_row(&a))?;
                attacks.push(a);
            }
        }
        if cfg.message_log {
            append(&log_path, &sim.take_message_log())?;
        }
        reports.push(outcome.report);
    }
    if cfg.dump_fisher {
        write_fisher(&sim, out)?;
    }
    Ok(RunSummary { reports, attacks })
}

/// Runs the protocol once per `(tau, rho)` cell and writes the final round of
/// each as one row. An empty list keeps the configured value; with both lists
/// empty this is [`run`].
pub fn sweep(cfg: &ExperimentConfig, taus: &[f64], rhos: &[f64], out: &Path) -> Result<Vec<(f64, f64, RoundReport)>> {
    if taus.is_empty() && rhos.is_empty() {
        let summary = run(cfg, out)?;
        return Ok(summary
            .reports
            .last()
            .map(|r| (cfg.tau, cfg.rho, r.clone()))
            .into_iter()
            .collect());
    }
    fs::create_dir_all(out)?;
    let taus = if taus.is_empty() { vec![cfg.tau] } else { taus.to_vec() };
    let rhos = if rhos.is_empty() { vec![cfg.rho] } else { rhos.to_vec() };
    let mut sink = CsvSink::create(out.join(SWEEP_FILE), report::SWEEP_HEADER)?;
    let mut cells = Vec::with_capacity(taus.len() * rhos.len());
    for &tau in &taus {
        for &rho in &rhos {
            let cell = ExperimentConfig {
                tau,
                rho,
                attack: false,
                dump_fisher: false,
                message_log: false,
                ..cfg.clone()
            };
            cell.validate()?;
            let mut sim = Simulation::new(build_setup(&cell)?)?;
            let last = sim
                .run(cell.rounds, |_, _| Ok(()))?
                .pop()
                .expect("validated configs run at least one round");
            sink.push(&report::sweep_row(tau, rho, &last))?;
            cells.push((tau, rho, last));
        }
    }
    Ok(cells)
}

/// Runs the protocol and attacks every upload. Noise is switched off unless
/// `attack_noise` is set, isolating what encryption and personalization
/// hide on their own.
pub fn attack(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ClientAttack>> {
    fs::create_dir_all(out)?;
    let mut cfg = cfg.clone();
    if !cfg.attack_noise {
        cfg.sigma = 0.0;
    }
    let mut sim = Simulation::new(build_setup(&cfg)?)?;
    let mut sink = CsvSink::create(out.join(ATTACK_FILE), report::ATTACK_HEADER)?;
    let idlg = idlg_config(&cfg);
    let mut all = Vec::new();
    sim.run(cfg.rounds, |sim, outcome| {
        for a in attack_round(sim, outcome, idlg.as_ref())? {
            sink.push(&report::attack_row(&a))?;
            all.push(a);
        }
        Ok(())
    })?;
    Ok(all)
}

/// Writes every client's Fisher scores of the initial global model.
pub fn dump_fisher(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let setup = build_setup(cfg)?;
    let sim = Simulation::new(setup)?;
    write_fisher(&sim, out)
}
