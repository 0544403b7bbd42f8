//! Command implementations behind the `dragon` binary. Each command is
//! a plain function over a flag struct so tests can drive it in
//! process; outputs are fully determined by (flags, config file, seed).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigLayer, ModeChoice, RunConfig, Setting, CONFIG_ENV};
use crate::dataset::{
    gen_synthetic, load_csv, write_csv, SyntheticSpec, TimeSeriesDataset, WindowAssembler,
};
use crate::detection::metrics::{detection_metrics, DetectionMetrics};
use crate::detection::pot::{SpotDetector, MIN_OBSERVATIONS};
use crate::detection::{fault_score, Normalizer};
use crate::engine::{lei_training_samples, run_experiment};
use crate::error::{Error, Result};
use crate::federation::FederationSpec;
use crate::gon::{train_minibatch, GonConfig, GonNetwork, GonOptimizer, GonSample};
use crate::report::{
    load_trace, slo_report, summarize, write_report, ReportPaths, SloReference, SloReport, Summary,
};
use crate::simulator::SimParams;

// Independent RNG streams per concern, derived from the user seed.
const NET_INIT_SALT: u64 = 0x6e65_7469;
const TRAIN_SALT: u64 = 0x7472_6169;
const DETECT_SALT: u64 = 0x6465_7465;
const PRETRAIN_RUN_SALT: u64 = 0x7072_6572;
const SYNTH_SALT: u64 = 0x73796e74;
const SPLIT_CAPACITY: usize = 500;

/// A trained model plus the input scaling it was fitted with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub net: GonNetwork,
    /// Min-max scaling fitted on the training rows; applied to rows
    /// before windowing at detection time. Absent for models trained on
    /// already unit-scaled inputs (simulation features).
    pub normalizer: Option<Normalizer>,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Streaming threshold pass over a score series: a score at or above
/// the current threshold is labeled and withheld from the fit, anything
/// below is absorbed. No labels fire during the warmup.
pub fn spot_stream(scores: &[f64], q_low: f64, q_risk: f64) -> Result<(Vec<bool>, f64)> {
    let mut spot = SpotDetector::new(q_low, q_risk, SPLIT_CAPACITY, false)?;
    let mut observed = 0usize;
    let active = |observed: usize, spot: &SpotDetector| {
        if observed < MIN_OBSERVATIONS {
            f64::INFINITY
        } else {
            spot.threshold().unwrap_or(f64::INFINITY)
        }
    };
    let mut labels = Vec::with_capacity(scores.len());
    for &s in scores {
        if s >= active(observed, &spot) {
            labels.push(true);
        } else {
            spot.observe(s)?;
            observed += 1;
            labels.push(false);
        }
    }
    Ok((labels, active(observed, &spot)))
}

/// Per-row anomaly scores for a dataset: every row extends the sliding
/// window, the model regenerates its normal version, and the one-sided
/// residual norm is the score.
pub fn score_dataset(
    net: &GonNetwork,
    ds: &TimeSeriesDataset,
    normalizer: Option<&Normalizer>,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = net.cfg();
    let mut asm = WindowAssembler::new(ds.dims, cfg.n_features, cfg.window_len)?;
    let schedule = asm.schedule(cfg.m_max)?;
    let graph = asm.graph()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ DETECT_SALT);
    let mut scores = Vec::with_capacity(ds.len());
    for row in &ds.features {
        match normalizer {
            Some(norm) => asm.push(&norm.normalize(row)?)?,
            None => asm.push(row)?,
        }
        let window = asm.window()?;
        let generated = net.generate(&window, &schedule, &graph, &mut rng)?;
        let (pooled, _) = fault_score(&window, &generated.z)?;
        scores.push(pooled);
    }
    Ok(scores)
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training CSV (timestamp, features, optional label column).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training-curve CSV; defaults to `<out>.curve.csv`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Continue from an existing checkpoint (keeps its dimensions and
    /// scaling; width/rounds/grouping flags are ignored).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Windows per optimizer step.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Optimizer steps per epoch.
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub rounds: usize,
    /// Dataset dimensions grouped per entity row.
    #[arg(long, default_value_t = 7)]
    pub n_per_entity: usize,
    #[arg(long, default_value_t = 10)]
    pub window_k: usize,
    /// Generation ascent iterations baked into the checkpoint.
    #[arg(long, default_value_t = 10)]
    pub gen_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub gen_lr: f64,
    /// Leading fraction of rows used for training; the tail is held out.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Stop after this many evaluations without held-out F1 improvement.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Evaluate the held-out split every this many epochs.
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0.07)]
    pub q_low: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub q_risk: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Epoch of the checkpointed weights (best held-out F1).
    pub best_epoch: Option<usize>,
    pub best_f1: Option<f64>,
    pub final_train_loss: f64,
    pub param_count: usize,
    pub train_windows: usize,
    pub test_rows: usize,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

/// Leading `ratio` of the rows, preserving time order. Windowed
/// training needs contiguous history, so the held-out split is the
/// tail rather than a random row subset.
fn split_temporal(ds: &TimeSeriesDataset, ratio: f64) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("split ratio must be in [0,1], got {ratio}")));
    }
    let n_train = (ds.len() as f64 * ratio).floor() as usize;
    let take = |range: std::ops::Range<usize>| TimeSeriesDataset {
        features: ds.features[range.clone()].to_vec(),
        labels: ds.labels.as_ref().map(|l| l[range.clone()].to_vec()),
        dims: ds.dims,
    };
    Ok((take(0..n_train), take(n_train..ds.len())))
}

/// Windows over `rows` whose span never touches a labeled-anomalous
/// row: the model learns the normal profile only. Unlabeled data keeps
/// every window.
fn clean_training_windows(
    ds: &TimeSeriesDataset,
    n_per_entity: usize,
    window_k: usize,
) -> Result<Vec<GonSample>> {
    let mut asm = WindowAssembler::new(ds.dims, n_per_entity, window_k)?;
    let schedule = asm.schedule(asm.entities())?;
    let graph = asm.graph()?;
    let mut samples = Vec::new();
    for (i, row) in ds.features.iter().enumerate() {
        asm.push(row)?;
        if let Some(labels) = &ds.labels {
            let start = (i + 1).saturating_sub(window_k);
            if labels[start..=i].iter().any(|&a| a) {
                continue;
            }
        }
        samples.push(GonSample {
            window: asm.window()?,
            schedule: schedule.clone(),
            graph: graph.clone(),
        });
    }
    Ok(samples)
}

/// Point-adjusted F1 of the model on a held-out split, with streaming
/// threshold labels.
fn holdout_f1(
    net: &GonNetwork,
    test: &TimeSeriesDataset,
    normalizer: Option<&Normalizer>,
    q_low: f64,
    q_risk: f64,
    seed: u64,
) -> Result<Option<DetectionMetrics>> {
    let truth = match &test.labels {
        Some(t) if !t.is_empty() => t.clone(),
        _ => return Ok(None),
    };
    let scores = score_dataset(net, test, normalizer, seed)?;
    let (labels, _) = spot_stream(&scores, q_low, q_risk)?;
    Ok(Some(detection_metrics(&scores, &labels, &truth)?))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let ds = load_csv(&args.data)?;
    if args.epochs == 0 || args.batch == 0 || args.steps == 0 || args.eval_every == 0 {
        return Err(Error::usage("epochs, batch, steps and eval-every must be >= 1"));
    }
    let (train, test) = split_temporal(&ds, args.split)?;
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }

    let resumed = args.resume.as_deref().map(ModelCheckpoint::load).transpose()?;
    let normalizer = match &resumed {
        Some(ckpt) => ckpt.normalizer.clone(),
        None => Some(Normalizer::fit(&train.features)?),
    };
    let scale = |part: &TimeSeriesDataset| -> Result<TimeSeriesDataset> {
        let features = match &normalizer {
            Some(norm) => part
                .features
                .iter()
                .map(|r| norm.normalize(r))
                .collect::<Result<Vec<_>>>()?,
            None => part.features.clone(),
        };
        Ok(TimeSeriesDataset { features, labels: part.labels.clone(), dims: part.dims })
    };
    let train = scale(&train)?;
    let test = scale(&test)?;

    let mut net = match resumed {
        Some(ckpt) => ckpt.net,
        None => {
            let mut cfg = GonConfig::new(args.n_per_entity, args.window_k, 0);
            cfg.m_max = train.dims.div_ceil(args.n_per_entity);
            cfg.width = args.width;
            cfg.rounds = args.rounds;
            cfg.gen_iters = args.gen_iters;
            cfg.gen_lr = args.gen_lr;
            GonNetwork::new(cfg, args.seed ^ NET_INIT_SALT)?
        }
    };
    let (n_per_entity, window_k) = (net.cfg().n_features, net.cfg().window_len);
    let samples = clean_training_windows(&train, n_per_entity, window_k)?;
    if samples.is_empty() {
        return Err(Error::data("no anomaly-free training windows available"));
    }

    let mut opt = GonOptimizer::new(&net, args.lr)?;
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed ^ TRAIN_SALT);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut curve = String::from("epoch,train_loss,test_f1\n");
    let mut best: Option<(usize, f64, GonNetwork)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut final_loss = f64::NAN;
    let mut epochs_run = 0usize;
    let mut last_loss_eval: Option<f64> = None;

    for epoch in 0..args.epochs {
        epochs_run = epoch + 1;
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut cursor = 0usize;
        for _ in 0..args.steps {
            let batch: Vec<GonSample> = (0..args.batch.min(order.len()))
                .map(|_| {
                    let s = samples[order[cursor % order.len()]].clone();
                    cursor += 1;
                    s
                })
                .collect();
            epoch_loss += train_minibatch(&mut net, &mut opt, &batch, &mut rng)?;
        }
        final_loss = epoch_loss / args.steps as f64;

        if (epoch + 1) % args.eval_every != 0 && epoch + 1 != args.epochs {
            let _ = writeln!(curve, "{epoch},{final_loss},");
            continue;
        }
        let metrics = holdout_f1(&net, &test, None, args.q_low, args.q_risk, args.seed)?;
        match metrics {
            Some(m) => {
                let _ = writeln!(curve, "{epoch},{final_loss},{}", m.f1);
                let improved = best.as_ref().is_none_or(|(_, f, _)| m.f1 > f + 1e-4);
                if improved {
                    best = Some((epoch, m.f1, net.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= args.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
            None => {
                // No held-out labels: converge on the training loss.
                let _ = writeln!(curve, "{epoch},{final_loss},");
                let improved = last_loss_eval.is_none_or(|prev| final_loss < prev - 1e-4);
                if improved {
                    last_loss_eval = Some(final_loss);
                    best = Some((epoch, f64::NAN, net.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= args.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }

    let (best_epoch, best_f1, best_net) = match best {
        Some((e, f, n)) => (Some(e), (!f.is_nan()).then_some(f), n),
        None => (None, None, net),
    };
    let param_count = best_net.param_count();
    ModelCheckpoint { net: best_net, normalizer }.save(&args.out)?;
    let curve_path = args
        .curve
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.curve.csv", args.out.display())));
    std::fs::write(&curve_path, curve)?;

    Ok(TrainOutcome {
        epochs_run,
        stopped_early,
        best_epoch,
        best_f1,
        final_train_loss: final_loss,
        param_count,
        train_windows: samples.len(),
        test_rows: test.len(),
        checkpoint: args.out.clone(),
        curve: curve_path,
    })
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional per-row scores CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 0.07)]
    pub q_low: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub q_risk: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectOutcome {
    pub rows: usize,
    pub dims: usize,
    pub entities: usize,
    /// Rows the streaming threshold flagged.
    pub labeled: usize,
    pub truth_anomalies: Option<usize>,
    pub final_threshold: f64,
    /// Absent when the dataset carries no ground-truth labels.
    pub detection: Option<DetectionMetrics>,
}

pub fn cmd_detect(args: &DetectArgs) -> Result<DetectOutcome> {
    let ckpt = ModelCheckpoint::load(&args.checkpoint)?;
    let ds = load_csv(&args.data)?;
    let scores = score_dataset(&ckpt.net, &ds, ckpt.normalizer.as_ref(), args.seed)?;
    let (labels, final_threshold) = spot_stream(&scores, args.q_low, args.q_risk)?;
    let detection = match &ds.labels {
        Some(truth) => Some(detection_metrics(&scores, &labels, truth)?),
        None => None,
    };

    if let Some(path) = &args.scores {
        let mut csv = String::from(match &ds.labels {
            Some(_) => "timestamp,score,label,truth\n",
            None => "timestamp,score,label\n",
        });
        for (i, (s, &l)) in scores.iter().zip(&labels).enumerate() {
            match &ds.labels {
                Some(truth) => {
                    let _ = writeln!(csv, "{i},{s},{},{}", u8::from(l), u8::from(truth[i]));
                }
                None => {
                    let _ = writeln!(csv, "{i},{s},{}", u8::from(l));
                }
            }
        }
        std::fs::write(path, csv)?;
    }

    let outcome = DetectOutcome {
        rows: ds.len(),
        dims: ds.dims,
        entities: ds.dims.div_ceil(ckpt.net.cfg().n_features),
        labeled: labels.iter().filter(|&&l| l).count(),
        truth_anomalies: ds.labels.as_ref().map(|t| t.iter().filter(|&&a| a).count()),
        final_threshold,
        detection,
    };
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&outcome)?)?;
    }
    Ok(outcome)
}

/// Settings shared by `simulate` and `compare`: the layered run config
/// plus model provisioning.
#[derive(Debug, Clone, Args)]
pub struct SimFlags {
    /// TOML config file; the DRAGON_CONFIG env var is consulted when
    /// omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub layer: LayerFlags,
    /// Baseline intervals used to pretrain a model when no checkpoint
    /// is given (0 makes a checkpoint mandatory for remediation modes).
    #[arg(long, default_value_t = 60)]
    pub pretrain_intervals: u64,
    #[arg(long, default_value_t = 30)]
    pub pretrain_epochs: usize,
    /// Persist the model used for this run.
    #[arg(long)]
    pub save_checkpoint: Option<PathBuf>,
}

/// Optional overrides mirroring the config file; unset flags fall
/// through to the file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct LayerFlags {
    /// Federation layout: 1|2|3 or a TOML file path.
    #[arg(long)]
    pub topology: Option<crate::config::Topology>,
    /// none|dragon|dragon_plus.
    #[arg(long)]
    pub mode: Option<ModeChoice>,
    /// Lookahead depth for dragon_plus.
    #[arg(short = 'N', long, visible_alias = "N")]
    pub lookahead: Option<usize>,
    /// Window length; defaults per mode (10 single-stage, 5 lookahead).
    #[arg(long)]
    pub window_k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub intervals: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub delta1: Option<f64>,
    #[arg(long)]
    pub delta2: Option<f64>,
    /// cost|paper.
    #[arg(long)]
    pub qos_mode: Option<crate::simulator::QosMode>,
    #[arg(long)]
    pub q_low: Option<f64>,
    #[arg(long)]
    pub q_risk: Option<f64>,
    /// Poisson arrivals per LEI per interval.
    #[arg(long)]
    pub arrival_rate: Option<f64>,
    /// Expected fault events per 100 intervals.
    #[arg(long)]
    pub fault_rate: Option<f64>,
    #[arg(long)]
    pub slo_multiplier: Option<f64>,
    #[arg(long)]
    pub initial_temp: Option<f64>,
    #[arg(long)]
    pub cooling: Option<f64>,
    #[arg(long)]
    pub anneal_iters: Option<usize>,
    /// least_util|random.
    #[arg(long)]
    pub scheduler: Option<crate::workload::SchedulerPolicy>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Model checkpoint for remediation modes.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl LayerFlags {
    pub fn into_layer(self) -> ConfigLayer {
        ConfigLayer {
            topology: self.topology,
            mode: self.mode,
            lookahead: self.lookahead,
            window_k: self.window_k,
            seed: self.seed,
            intervals: self.intervals,
            alpha: self.alpha,
            beta: self.beta,
            delta1: self.delta1,
            delta2: self.delta2,
            qos_mode: self.qos_mode,
            q_low: self.q_low,
            q_risk: self.q_risk,
            arrival_rate: self.arrival_rate,
            fault_rate: self.fault_rate,
            slo_multiplier: self.slo_multiplier,
            initial_temp: self.initial_temp,
            cooling: self.cooling,
            anneal_iters: self.anneal_iters,
            scheduler: self.scheduler,
            finetune_lr: self.finetune_lr,
            threads: self.threads,
            checkpoint: self.checkpoint,
            out_dir: self.out_dir,
        }
    }
}

/// Resolves the layered configuration and prints one provenance line
/// per setting to stderr.
pub fn resolve_run_config(config: Option<&Path>, layer: ConfigLayer) -> Result<RunConfig> {
    let file_path = match config {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    let file = file_path.as_deref().map(ConfigLayer::from_file).transpose()?;
    let (cfg, settings) = RunConfig::resolve(file.as_ref(), &layer);
    log_settings(&settings);
    cfg.validate()?;
    Ok(cfg)
}

pub fn log_settings(settings: &[Setting]) {
    for s in settings {
        eprintln!("config: {} = {} ({})", s.name, s.value, s.source);
    }
}

// Pretraining hyperparameters. The network is small on purpose: every
// broker carries a copy and regenerates windows every interval.
const PRETRAIN_WIDTH: usize = 32;
const PRETRAIN_GEN_ITERS: usize = 8;
const PRETRAIN_BATCH: usize = 16;
const PRETRAIN_STEPS: usize = 8;
const PRETRAIN_LR: f64 = 1e-3;

/// Trains a simulation-compatible model from scratch: runs a fault-free
/// baseline, rebuilds the per-LEI windows every broker would have seen,
/// and fits the network on those normal-profile samples.
pub fn pretrain_net(
    spec: &FederationSpec,
    params: &SimParams,
    run_cfg: &RunConfig,
    intervals: u64,
    epochs: usize,
) -> Result<GonNetwork> {
    if intervals == 0 || epochs == 0 {
        return Err(Error::usage(
            "remediation modes need either --checkpoint or --pretrain-intervals/epochs >= 1",
        ));
    }
    let mut base = run_cfg.experiment_config();
    base.mode = None;
    base.intervals = intervals;
    let clean = crate::workload::FaultModel { lambda_per_100: 0.0, ..run_cfg.fault_model() };
    let trace = run_experiment(spec, params, &clean, &base, None, run_cfg.seed ^ PRETRAIN_RUN_SALT)?;
    let samples = lei_training_samples(spec, params, &trace.host_rows, base.window_k)?;

    let mut cfg = GonConfig::new(params.features.len(), base.window_k, spec.max_lei_size());
    cfg.width = PRETRAIN_WIDTH;
    cfg.gen_iters = PRETRAIN_GEN_ITERS;
    let mut net = GonNetwork::new(cfg, run_cfg.seed ^ NET_INIT_SALT)?;
    let mut opt = GonOptimizer::new(&net, PRETRAIN_LR)?;
    let mut rng = ChaCha12Rng::seed_from_u64(run_cfg.seed ^ TRAIN_SALT);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut cursor = 0usize;
        for _ in 0..PRETRAIN_STEPS {
            let batch: Vec<GonSample> = (0..PRETRAIN_BATCH.min(order.len()))
                .map(|_| {
                    let s = samples[order[cursor % order.len()]].clone();
                    cursor += 1;
                    s
                })
                .collect();
            train_minibatch(&mut net, &mut opt, &batch, &mut rng)?;
        }
    }
    Ok(net)
}

/// The model for a remediation run: an explicit checkpoint when given,
/// otherwise a freshly pretrained network.
fn provision_net(
    spec: &FederationSpec,
    params: &SimParams,
    run_cfg: &RunConfig,
    flags: &SimFlags,
) -> Result<GonNetwork> {
    match &run_cfg.checkpoint {
        Some(path) => Ok(ModelCheckpoint::load(path)?.net),
        None => pretrain_net(spec, params, run_cfg, flags.pretrain_intervals, flags.pretrain_epochs),
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub flags: SimFlags,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimOutcome {
    pub summary: Summary,
    pub out_dir: PathBuf,
    pub trace_json: PathBuf,
}

pub fn cmd_simulate(args: SimArgs) -> Result<SimOutcome> {
    let run_cfg = resolve_run_config(args.flags.config.as_deref(), args.flags.layer.clone().into_layer())?;
    let spec = run_cfg.federation()?;
    let params = run_cfg.sim_params();
    let engine_cfg = run_cfg.experiment_config();

    let net = match run_cfg.mode {
        ModeChoice::None => None,
        _ => Some(provision_net(&spec, &params, &run_cfg, &args.flags)?),
    };
    if let (Some(n), Some(path)) = (&net, &args.flags.save_checkpoint) {
        ModelCheckpoint { net: n.clone(), normalizer: None }.save(path)?;
    }

    let trace =
        run_experiment(&spec, &params, &run_cfg.fault_model(), &engine_cfg, net.as_ref(), run_cfg.seed)?;
    let paths = write_report(&trace, &run_cfg.out_dir)?;
    SloReference::from_trace(&trace).save(&run_cfg.out_dir.join("slo_reference.json"))?;
    let summary = summarize(&trace)?;
    Ok(SimOutcome { summary, out_dir: run_cfg.out_dir.clone(), trace_json: paths.trace_json })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// A trace.json produced by simulate.
    #[arg(long)]
    pub trace: PathBuf,
    /// Rewrite the full report (CSVs and summary) into this directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Score SLO violations against this reference sidecar.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Write this trace's per-app response percentiles as a sidecar.
    #[arg(long)]
    pub write_reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub summary: Summary,
    pub slo_vs_reference: Option<SloReport>,
    pub report: Option<ReportPaths2>,
}

/// Serializable mirror of the written report paths.
#[derive(Debug, Clone, Serialize)]
pub struct ReportPaths2 {
    pub trace_json: PathBuf,
    pub trace_csv: PathBuf,
    pub series_csv: PathBuf,
    pub summary_json: PathBuf,
}

impl From<ReportPaths> for ReportPaths2 {
    fn from(p: ReportPaths) -> Self {
        ReportPaths2 {
            trace_json: p.trace_json,
            trace_csv: p.trace_csv,
            series_csv: p.series_csv,
            summary_json: p.summary_json,
        }
    }
}

pub fn cmd_evaluate(args: &EvalArgs) -> Result<EvalOutcome> {
    let trace = load_trace(&args.trace)?;
    let summary = summarize(&trace)?;
    if let Some(path) = &args.write_reference {
        SloReference::from_trace(&trace).save(path)?;
    }
    let slo_vs_reference = args
        .reference
        .as_deref()
        .map(|p| SloReference::load(p).map(|r| slo_report(&trace, &r)))
        .transpose()?;
    let report = args
        .out_dir
        .as_deref()
        .map(|d| write_report(&trace, d).map(ReportPaths2::from))
        .transpose()?;
    Ok(EvalOutcome { summary, slo_vs_reference, report })
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub rows: usize,
    #[arg(long, default_value_t = 55)]
    pub dims: usize,
    /// Fraction of rows labeled anomalous.
    #[arg(long, default_value_t = 0.1369)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub min_segment: Option<usize>,
    #[arg(long)]
    pub max_segment: Option<usize>,
    #[arg(long)]
    pub spike_min: Option<f64>,
    #[arg(long)]
    pub spike_max: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Fraction of dimensions each anomaly segment affects.
    #[arg(long)]
    pub affected: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenOutcome {
    pub rows: usize,
    pub dims: usize,
    pub anomalies: usize,
    pub path: PathBuf,
}

pub fn cmd_gen_synthetic(args: &GenArgs) -> Result<GenOutcome> {
    let mut spec = SyntheticSpec::new(args.rows, args.dims, args.fraction);
    if let Some(v) = args.min_segment {
        spec.min_segment = v;
    }
    if let Some(v) = args.max_segment {
        spec.max_segment = v;
    }
    if let Some(v) = args.spike_min {
        spec.spike_min = v;
    }
    if let Some(v) = args.spike_max {
        spec.spike_max = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.affected {
        spec.affected_fraction = v;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed ^ SYNTH_SALT);
    let ds = gen_synthetic(&spec, &mut rng)?;
    write_csv(&args.out, &ds)?;
    Ok(GenOutcome {
        rows: ds.len(),
        dims: ds.dims,
        anomalies: ds.anomaly_count(),
        path: args.out.clone(),
    })
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub flags: SimFlags,
    /// Modes to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "none,dragon,dragon_plus")]
    pub modes: Vec<ModeChoice>,
    /// Paired seeds: every mode runs each one.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Write per-cell summaries and the table here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareCell {
    pub mode: String,
    pub seed: u64,
    pub slo_violation_rate: f64,
    pub energy_kwh: f64,
    pub p90_response_s: f64,
    pub completed_tasks: usize,
    pub migrations: usize,
    pub detection_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub mode: String,
    pub mean_slo_violation_rate: f64,
    pub mean_energy_kwh: f64,
    pub mean_p90_response_s: f64,
    pub mean_migrations: f64,
    /// Mean per-seed relative change versus the paired baseline.
    pub rel_slo_vs_none: Option<f64>,
    pub rel_energy_vs_none: Option<f64>,
    /// Seeds where the SLO violation rate did not exceed the baseline.
    pub seeds_no_worse_slo: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareOutcome {
    pub seeds: Vec<u64>,
    pub cells: Vec<CompareCell>,
    pub rows: Vec<CompareRow>,
}

pub fn cmd_compare(args: CompareArgs) -> Result<CompareOutcome> {
    if args.modes.is_empty() || args.seeds.is_empty() {
        return Err(Error::usage("compare needs at least one mode and one seed"));
    }
    let base_cfg =
        resolve_run_config(args.flags.config.as_deref(), args.flags.layer.clone().into_layer())?;
    let spec = base_cfg.federation()?;
    let params = base_cfg.sim_params();

    let mut cells = Vec::new();
    for &seed in &args.seeds {
        // One pretrained net per (seed, window length); modes sharing a
        // window length share the exact same starting model.
        let mut nets: Vec<(usize, GonNetwork)> = Vec::new();
        for &mode in &args.modes {
            let mut cfg = base_cfg.clone();
            cfg.mode = mode;
            cfg.seed = seed;
            let engine_cfg = cfg.experiment_config();
            let net = match mode {
                ModeChoice::None => None,
                _ => {
                    let k = engine_cfg.window_k;
                    if let Some((_, n)) = nets.iter().find(|(nk, _)| *nk == k) {
                        Some(n.clone())
                    } else {
                        let n = provision_net(&spec, &params, &cfg, &args.flags)?;
                        nets.push((k, n.clone()));
                        Some(n)
                    }
                }
            };
            let trace = run_experiment(&spec, &params, &cfg.fault_model(), &engine_cfg, net.as_ref(), seed)?;
            let summary = summarize(&trace)?;
            cells.push(CompareCell {
                mode: mode.to_string(),
                seed,
                slo_violation_rate: summary.slo_violation_rate,
                energy_kwh: summary.energy_kwh,
                p90_response_s: summary.p90_response_s,
                completed_tasks: summary.completed_tasks,
                migrations: summary.migrations,
                detection_f1: summary.detection.f1,
            });
        }
    }

    let baseline: Vec<&CompareCell> = cells.iter().filter(|c| c.mode == "none").collect();
    let mut rows = Vec::new();
    for &mode in &args.modes {
        let name = mode.to_string();
        let mine: Vec<&CompareCell> = cells.iter().filter(|c| c.mode == name).collect();
        let mean = |f: &dyn Fn(&CompareCell) -> f64| {
            mine.iter().map(|c| f(c)).sum::<f64>() / mine.len() as f64
        };
        let paired: Vec<(&CompareCell, &CompareCell)> = mine
            .iter()
            .filter_map(|c| {
                baseline.iter().find(|b| b.seed == c.seed).map(|b| (*c, *b))
            })
            .collect();
        let rel = |f: &dyn Fn(&CompareCell) -> f64| -> Option<f64> {
            if paired.is_empty() || name == "none" {
                return None;
            }
            let rels: Vec<f64> = paired
                .iter()
                .filter(|(_, b)| f(b) > 0.0)
                .map(|(c, b)| (f(c) - f(b)) / f(b))
                .collect();
            (!rels.is_empty()).then(|| rels.iter().sum::<f64>() / rels.len() as f64)
        };
        rows.push(CompareRow {
            mode: name.clone(),
            mean_slo_violation_rate: mean(&|c| c.slo_violation_rate),
            mean_energy_kwh: mean(&|c| c.energy_kwh),
            mean_p90_response_s: mean(&|c| c.p90_response_s),
            mean_migrations: mean(&|c| c.migrations as f64),
            rel_slo_vs_none: rel(&|c| c.slo_violation_rate),
            rel_energy_vs_none: rel(&|c| c.energy_kwh),
            seeds_no_worse_slo: (name != "none" && !paired.is_empty()).then(|| {
                paired.iter().filter(|(c, b)| c.slo_violation_rate <= b.slo_violation_rate).count()
            }),
        });
    }

    let outcome = CompareOutcome { seeds: args.seeds.clone(), cells, rows };
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&outcome)?)?;
    }
    Ok(outcome)
}

/// Fixed-width text table over the compare rows.
pub fn compare_table(outcome: &CompareOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>10} {:>9} {:>12} {:>9} {:>8} {:>9} {:>10}",
        "mode", "slo_viol", "Δslo%", "energy_kWh", "Δen%", "p90_s", "migr", "slo_wins"
    );
    for r in &outcome.rows {
        let pct = |v: Option<f64>| match v {
            Some(x) => format!("{:+.1}", x * 100.0),
            None => "-".to_string(),
        };
        let wins = match r.seeds_no_worse_slo {
            Some(w) => format!("{w}/{}", outcome.seeds.len()),
            None => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<12} {:>10.4} {:>9} {:>12.4} {:>9} {:>8.1} {:>9.1} {:>10}",
            r.mode,
            r.mean_slo_violation_rate,
            pct(r.rel_slo_vs_none),
            r.mean_energy_kwh,
            pct(r.rel_energy_vs_none),
            r.mean_p90_response_s,
            r.mean_migrations,
            wins
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_stream_warms_up_before_labeling() {
        let mut scores = vec![1.0; MIN_OBSERVATIONS];
        scores.push(1e6);
        let (labels, threshold) = spot_stream(&scores, 0.07, 1e-4).unwrap();
        assert!(labels[..MIN_OBSERVATIONS].iter().all(|&l| !l));
        assert!(labels[MIN_OBSERVATIONS], "huge score after warmup is flagged");
        assert!(threshold.is_finite());
    }

    #[test]
    fn spot_stream_never_labels_during_warmup() {
        let scores: Vec<f64> = (0..MIN_OBSERVATIONS - 1).map(|i| i as f64 * 1e3).collect();
        let (labels, threshold) = spot_stream(&scores, 0.07, 1e-4).unwrap();
        assert!(labels.iter().all(|&l| !l));
        assert!(threshold.is_infinite());
    }

    #[test]
    fn temporal_split_keeps_order_and_ratio() {
        let ds = TimeSeriesDataset {
            features: (0..10).map(|i| vec![i as f64]).collect(),
            labels: Some((0..10).map(|i| i >= 8).collect()),
            dims: 1,
        };
        let (train, test) = split_temporal(&ds, 0.8).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert_eq!(train.features[7], vec![7.0]);
        assert_eq!(test.features[0], vec![8.0]);
        assert!(test.labels.unwrap().iter().all(|&a| a));
    }

    #[test]
    fn clean_windows_skip_anomalous_spans() {
        let ds = TimeSeriesDataset {
            features: (0..8).map(|i| vec![i as f64 / 8.0]).collect(),
            labels: Some(vec![false, false, false, true, false, false, false, false]),
            dims: 1,
        };
        let samples = clean_training_windows(&ds, 1, 2).unwrap();
        // Windows ending at rows 3 and 4 span the anomaly at row 3.
        assert_eq!(samples.len(), 6);
    }

    #[test]
    fn compare_table_is_stable_text() {
        let outcome = CompareOutcome {
            seeds: vec![0, 1],
            cells: vec![],
            rows: vec![CompareRow {
                mode: "none".into(),
                mean_slo_violation_rate: 0.25,
                mean_energy_kwh: 10.0,
                mean_p90_response_s: 350.0,
                mean_migrations: 0.0,
                rel_slo_vs_none: None,
                rel_energy_vs_none: None,
                seeds_no_worse_slo: None,
            }],
        };
        let table = compare_table(&outcome);
        assert!(table.contains("none"));
        assert!(table.contains("0.2500"));
    }
}
