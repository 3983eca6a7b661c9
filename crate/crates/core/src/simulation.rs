//! End-to-end runs: data loading, preprocessing, the round loop with
//! concurrent participants, publication to a ledger, and malicious-count
//! sweeps against the plain-averaging baseline.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{Dyadic, FpVector};
use crate::ledger::{Clock, Ledger, LedgerError};
use crate::protocol::{
    participant_round, preprocess, AggregationMode, ClipRule, ProtocolError, RoundOutcome, Server,
    ServerFault, Submission, TaskParams,
};
use crate::randomness::{derive_seed, prvg, Purpose, Seed};
use crate::training::{
    evaluate, load_idx, local_gradient, partition, pretrain, synthetic_dataset, AdversaryKind,
    Architecture, Dataset, Model, TrainingError,
};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const LEDGER_FILE: &str = "ledger.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BASELINE_METRICS_FILE: &str = "baseline_metrics.csv";

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SimulationError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SimulationError + '_ {
    move |source| SimulationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One adversarial participant, written `id:kind` (for example
/// `5:label_flip` or `3:scale_amplify:10`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaliciousSpec {
    pub id: u32,
    pub kind: AdversaryKind,
}

impl FromStr for MaliciousSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (id, kind) = s
            .split_once(':')
            .ok_or_else(|| format!("malicious spec {s:?} is not id:kind"))?;
        Ok(Self {
            id: id
                .parse()
                .map_err(|_| format!("bad participant id in {s:?}"))?,
            kind: kind.parse().map_err(|e: TrainingError| e.to_string())?,
        })
    }
}

impl TryFrom<String> for MaliciousSpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<MaliciousSpec> for String {
    fn from(m: MaliciousSpec) -> String {
        m.to_string()
    }
}

impl fmt::Display for MaliciousSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.id, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// The four IDX files under `dir`, with their distribution names.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Seeded Gaussian blobs.
    Synthetic {
        samples: usize,
        test_samples: usize,
        features: usize,
        classes: usize,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Mnist {
            dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ModelKind,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: ModelKind::Logistic,
            hidden: 64,
        }
    }
}

/// A full run description. Defaults follow the reference experiment:
/// 20 participants, 500 rounds, learning rate 0.5, minibatch 64 and
/// security parameter 48.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub participants: u32,
    pub rounds: u32,
    /// Must be dyadic (`odd / 2^e`) with `e <= scale`.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub scale: u8,
    pub security_param: u32,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub malicious: Vec<MaliciousSpec>,
    pub clipping: bool,
    /// Must be dyadic, like the learning rate.
    pub clip_factor: f64,
    pub mask_min: i64,
    pub mask_max: i64,
    /// Gradient entries must satisfy `|g| < 2^gradient_bits`.
    pub gradient_bits: u8,
    /// Also run the plain-averaging baseline.
    pub baseline: bool,
    /// Evaluate on the test set every this many rounds (and after the last).
    pub eval_every: u32,
    pub ledger_timestamp: u64,
    /// Run sweep entries concurrently.
    pub parallel_sweep: bool,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            participants: 20,
            rounds: 500,
            learning_rate: 0.5,
            batch_size: 64,
            scale: crate::fixedpoint::DEFAULT_SCALE,
            security_param: 48,
            seed: 1,
            pretrain_steps: 10,
            malicious: Vec::new(),
            clipping: false,
            clip_factor: 3.0,
            mask_min: 1 << 8,
            mask_max: 1 << 15,
            gradient_bits: 10,
            baseline: false,
            eval_every: 1,
            ledger_timestamp: 0,
            parallel_sweep: false,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn dyadic_ratio(x: f64, what: &str) -> Result<(u32, u32)> {
    for exp in 0..=20u32 {
        let scaled = x * f64::from(1u32 << exp);
        if scaled.fract() == 0.0 && scaled > 0.0 && scaled <= f64::from(u32::MAX) {
            return Ok((scaled as u32, 1 << exp));
        }
    }
    Err(SimulationError::Config(format!(
        "{what} {x} must be a positive dyadic rational"
    )))
}

impl RunConfig {
    /// The laptop-scale preset: the reference settings with 100 rounds.
    pub fn desk() -> Self {
        Self {
            rounds: 100,
            ..Self::default()
        }
    }

    pub fn adversary(&self, id: u32) -> AdversaryKind {
        self.malicious
            .iter()
            .find(|m| m.id == id)
            .map_or(AdversaryKind::Honest, |m| m.kind)
    }

    pub fn architecture(&self, inputs: usize, classes: usize) -> Architecture {
        match self.model.architecture {
            ModelKind::Logistic => Architecture::Logistic { inputs, classes },
            ModelKind::Mlp => Architecture::Mlp {
                inputs,
                hidden: self.model.hidden,
                classes,
            },
        }
    }

    pub fn eta(&self) -> Result<Dyadic> {
        Dyadic::from_f64(self.learning_rate, self.scale).map_err(|e| {
            SimulationError::Config(format!("learning rate {}: {e}", self.learning_rate))
        })
    }

    /// Feature and class counts of the configured data.
    pub fn input_shape(&self) -> (usize, usize) {
        match &self.data {
            DataConfig::Mnist { .. } => (784, crate::training::IDX_CLASSES),
            DataConfig::Synthetic {
                features, classes, ..
            } => (*features, *classes),
        }
    }

    /// The public task for this configuration.
    pub fn task(&self, mode: AggregationMode) -> Result<TaskParams> {
        let (inputs, classes) = self.input_shape();
        let arch = self.architecture(inputs, classes);
        let clip = if self.clipping {
            let (numerator, denominator) = dyadic_ratio(self.clip_factor, "clip factor")?;
            Some(ClipRule {
                numerator,
                denominator,
            })
        } else {
            None
        };
        let task = TaskParams {
            participants: self.participants,
            rounds: self.rounds,
            eta: self.eta()?,
            scale: self.scale,
            dim: arch.param_count() as u64,
            architecture: arch.descriptor(),
            security_param: self.security_param,
            mask_lo: self.mask_min,
            mask_hi: self.mask_max,
            mode,
            clip,
            gradient_bits: self.gradient_bits,
        };
        task.validate()?;
        Ok(task)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SimulationError::Config(m));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        let mut seen = Vec::new();
        for m in &self.malicious {
            if m.id == 0 || m.id > self.participants {
                return fail(format!(
                    "malicious id {} is not a participant (1..={})",
                    m.id, self.participants
                ));
            }
            if seen.contains(&m.id) {
                return fail(format!("participant {} listed as malicious twice", m.id));
            }
            seen.push(m.id);
        }
        self.task(AggregationMode::Robust)?;
        Ok(())
    }
}

/// Training and test data plus the `participants + 1` shards (shard 0 is
/// the server's root dataset).
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Dataset>,
}

pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataConfig::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let train = load_idx(dir.join(MNIST_TRAIN_IMAGES), dir.join(MNIST_TRAIN_LABELS))?;
            let test = load_idx(dir.join(MNIST_TEST_IMAGES), dir.join(MNIST_TEST_LABELS))?;
            let limit = |d: Dataset, n: &Option<usize>| match n {
                Some(n) if *n < d.len() => d.take(*n),
                _ => d,
            };
            Ok((limit(train, train_limit), limit(test, test_limit)))
        }
        DataConfig::Synthetic {
            samples,
            test_samples,
            features,
            classes,
        } => {
            // Train and test share centroids; the test set is a suffix.
            let all = synthetic_dataset(
                derive_seed(config.seed, 0, Purpose::Partition, 2),
                samples + test_samples,
                *features,
                *classes,
            )?;
            let rows: Vec<usize> = (0..all.len()).collect();
            Ok((all.select(&rows[..*samples]), all.select(&rows[*samples..])))
        }
    }
}

pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let (train, test) = load_data(config)?;
    let shards = partition(
        &train,
        config.participants as usize + 1,
        derive_seed(config.seed, 0, Purpose::Partition, 0),
    )?;
    Ok(PreparedData {
        train,
        test,
        shards,
    })
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Mean cross-entropy of the updated model on the server's root data.
    pub train_loss: f64,
    /// Test accuracy of the updated model; empty between evaluations.
    pub test_accuracy: Option<f64>,
    /// `|P_r|`.
    pub benign_count: usize,
}

/// Measured costs, for information only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Timings {
    pub preprocess: Duration,
    pub rounds: Duration,
    /// Mean time for one participant to mask and sign its gradient.
    pub participant_masking: Duration,
    /// Mean time for one PRVG call at the model dimension.
    pub prvg: Duration,
    /// Bytes a participant uploads per round (gradient plus signatures).
    pub upload_bytes: u64,
    /// Mean training-record bytes per round.
    pub record_bytes_per_round: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: AggregationMode,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub metrics: Vec<RoundMetrics>,
    /// Per-round server state, kept when [`RunOptions::keep_outcomes`].
    pub outcomes: Vec<RoundOutcome>,
    pub final_model: FpVector,
    pub initial_model: FpVector,
    pub ledger: Option<PathBuf>,
    pub record_bytes: u64,
    pub timings: Timings,
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Ledger file to create; the record is discarded when `None`.
    pub ledger: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub keep_outcomes: bool,
    #[doc(hidden)]
    pub faults: Vec<ServerFault>,
}

struct CountingWriter<W> {
    inner: W,
    bytes: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn write_metrics(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut out = String::from("round,train_loss,test_accuracy,benign_count\n");
    for m in metrics {
        let acc = m
            .test_accuracy
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            m.round, m.train_loss, acc, m.benign_count
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Runs one training task in `mode` on prepared data.
pub fn run_with_data(
    config: &RunConfig,
    data: &PreparedData,
    mode: AggregationMode,
    options: &RunOptions,
) -> Result<RunSummary> {
    config.validate()?;
    let task = config.task(mode)?;
    let master = config.seed;
    let batch = config.batch_size;
    let root = &data.shards[0];
    let (inputs, classes) = (root.feature_dim(), root.classes());
    let arch = config.architecture(inputs, classes);
    let eta = task.eta;

    let started = Instant::now();
    let init = Model::initial(
        arch,
        derive_seed(master, 0, Purpose::Partition, 1),
        config.scale,
    )
    .map_err(TrainingError::from)?;
    let w0 = pretrain(
        &init,
        root,
        config.pretrain_steps,
        batch,
        eta,
        derive_seed(master, 0, Purpose::Batch, 0),
    )?
    .params;
    let pre = preprocess(&task, master, &w0)?;

    let shards: Vec<(AdversaryKind, Dataset)> = (1..=config.participants)
        .map(|id| {
            let kind = config.adversary(id);
            let shard = &data.shards[id as usize];
            (
                kind,
                kind.poison_shard(shard, derive_seed(master, id, Purpose::Adversary, 0)),
            )
        })
        .collect();

    let record_path = options.ledger.as_ref().map(|l| {
        let mut name = l.file_name().unwrap_or_default().to_os_string();
        name.push(".record.partial");
        l.with_file_name(name)
    });
    let mut ledger = match &options.ledger {
        Some(path) => Some(Ledger::create(
            path,
            &pre.genesis.to_bytes(),
            Clock::Fixed(config.ledger_timestamp),
        )?),
        None => None,
    };
    let sink: Box<dyn Write> = match &record_path {
        Some(p) => Box::new(BufWriter::with_capacity(
            1 << 20,
            File::create(p).map_err(io_err(p))?,
        )),
        None => Box::new(io::sink()),
    };
    let mut server = Server::new(
        task.clone(),
        pre.server.clone(),
        w0.clone(),
        CountingWriter {
            inner: sink,
            bytes: 0,
        },
    )?;
    for f in &options.faults {
        server.inject_fault(*f);
    }
    let preprocess_time = started.elapsed();

    let mut metrics = Vec::with_capacity(config.rounds as usize);
    let mut outcomes = Vec::new();
    let mut masking = Duration::ZERO;
    let rounds_started = Instant::now();
    let mut last_eval = None;
    for round in 1..=config.rounds {
        let model = Model::new(arch, server.model().clone());
        let g_s = local_gradient(
            &model,
            root,
            batch,
            derive_seed(master, 0, Purpose::Batch, round),
        )?;
        let results = pre
            .participants
            .par_iter()
            .zip(shards.par_iter())
            .map(
                |(secrets, (kind, shard))| -> Result<(Submission, Duration)> {
                    let g = local_gradient(
                        &model,
                        shard,
                        batch,
                        derive_seed(master, secrets.id, Purpose::Batch, round),
                    )?;
                    let g = kind.perturb_gradient(g)?;
                    let t = Instant::now();
                    let s = participant_round(secrets, &task, g, round)?;
                    Ok((s, t.elapsed()))
                },
            )
            .collect::<Result<Vec<_>>>()?;
        let submissions: Vec<Submission> = results
            .into_iter()
            .map(|(s, t)| {
                masking += t;
                s
            })
            .collect();
        let outcome = server.process_round(&g_s, &submissions)?;

        let updated = Model::new(arch, outcome.model.clone());
        let train_loss = evaluate(&updated, root)?.loss;
        let test_accuracy = if round % config.eval_every == 0 || round == config.rounds {
            let e = evaluate(&updated, &data.test)?;
            last_eval = Some(e);
            Some(e.accuracy)
        } else {
            None
        };
        metrics.push(RoundMetrics {
            round,
            train_loss,
            test_accuracy,
            benign_count: outcome.benign.len(),
        });
        if options.keep_outcomes {
            outcomes.push(outcome);
        }
    }
    let rounds_time = rounds_started.elapsed();

    let (sink, final_model, _masked) = server.finalize()?;
    let record_bytes = sink.bytes;
    drop(sink);
    if let (Some(ledger), Some(p)) = (ledger.as_mut(), &record_path) {
        let appended = ledger.append_file(p);
        let _ = fs::remove_file(p);
        appended?;
    }
    if let Some(path) = &options.metrics {
        write_metrics(path, &metrics)?;
    }

    let prvg_time = {
        let t = Instant::now();
        for i in 0..16u64 {
            let _ = prvg(Seed(i), 12345, task.dim());
        }
        t.elapsed() / 16
    };
    let participant_rounds = (config.rounds * config.participants).max(1);
    let final_eval = last_eval.expect("final round is evaluated");
    Ok(RunSummary {
        mode,
        final_accuracy: final_eval.accuracy,
        final_loss: final_eval.loss,
        metrics,
        outcomes,
        final_model,
        initial_model: w0,
        ledger: options.ledger.clone(),
        record_bytes,
        timings: Timings {
            preprocess: preprocess_time,
            rounds: rounds_time,
            participant_masking: masking / participant_rounds,
            prvg: prvg_time,
            upload_bytes: (crate::fixedpoint::HEADER_LEN + 8 * task.dim()) as u64
                + 2 * crate::crypto::SIGNATURE_LEN as u64,
            record_bytes_per_round: record_bytes / u64::from(config.rounds),
        },
    })
}

/// Result of [`run`]: the scheme and, if configured, the baseline.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scheme: RunSummary,
    pub baseline: Option<RunSummary>,
    pub ledger: PathBuf,
    pub metrics: PathBuf,
}

/// Runs the configured task into `config.output_dir`, replacing any ledger
/// left there by an earlier run.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ledger = dir.join(LEDGER_FILE);
    let metrics = dir.join(METRICS_FILE);
    if ledger.exists() {
        fs::remove_file(&ledger).map_err(io_err(&ledger))?;
    }
    let data = prepare_data(config)?;
    let scheme = run_with_data(
        config,
        &data,
        AggregationMode::Robust,
        &RunOptions {
            ledger: Some(ledger.clone()),
            metrics: Some(metrics.clone()),
            ..RunOptions::default()
        },
    )?;
    let baseline = if config.baseline {
        Some(run_with_data(
            config,
            &data,
            AggregationMode::Plain,
            &RunOptions {
                metrics: Some(dir.join(BASELINE_METRICS_FILE)),
                ..RunOptions::default()
            },
        )?)
    } else {
        None
    };
    Ok(RunReport {
        scheme,
        baseline,
        ledger,
        metrics,
    })
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub malicious: u32,
    pub scheme_accuracy: Option<f64>,
    pub fedavg_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Runs the scheme and the baseline for every malicious count in `counts`.
/// Participants `1..=m` take `kind`; any `malicious` entries of the
/// template are ignored. A failing entry is recorded and the sweep
/// continues.
pub fn sweep(
    template: &RunConfig,
    counts: std::ops::RangeInclusive<u32>,
    kind: AdversaryKind,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(SimulationError::Config(
            "empty malicious-count range".into(),
        ));
    }
    let mut base = template.clone();
    base.malicious.clear();
    base.validate()?;
    let data = prepare_data(&base)?;
    let entry = |m: u32| -> SweepRow {
        let mut config = base.clone();
        config.malicious = (1..=m).map(|id| MaliciousSpec { id, kind }).collect();
        let run_mode = |mode| {
            run_with_data(&config, &data, mode, &RunOptions::default()).map(|s| s.final_accuracy)
        };
        match run_mode(AggregationMode::Robust)
            .and_then(|a| Ok((a, run_mode(AggregationMode::Plain)?)))
        {
            Ok((scheme, fedavg)) => SweepRow {
                malicious: m,
                scheme_accuracy: Some(scheme),
                fedavg_accuracy: Some(fedavg),
                error: None,
            },
            Err(e) => SweepRow {
                malicious: m,
                scheme_accuracy: None,
                fedavg_accuracy: None,
                error: Some(e.to_string()),
            },
        }
    };
    let counts: Vec<u32> = counts.collect();
    Ok(if template.parallel_sweep {
        counts.into_par_iter().map(entry).collect()
    } else {
        counts.into_iter().map(entry).collect()
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("malicious,scheme_accuracy,fedavg_accuracy,error\n");
    let fmt = |a: Option<f64>| a.map(|a| format!("{a:.6}")).unwrap_or_default();
    for r in rows {
        let error = r.error.as_deref().unwrap_or("").replace(['\n', ','], " ");
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.malicious,
            fmt(r.scheme_accuracy),
            fmt(r.fedavg_accuracy),
            error
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}
