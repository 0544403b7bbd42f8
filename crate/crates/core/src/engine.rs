//! Decentralized remediation engine: each broker watches its own LEI,
//! generates an expected-normal window, labels hosts through a streaming
//! tail threshold, and searches migrations by simulated annealing over
//! co-simulated futures. A lookahead variant folds several annealed
//! decisions into one plan; lookahead 1 is the base algorithm.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::detection::pot::{SpotDetector, MIN_OBSERVATIONS};
use crate::detection::{fault_score, SlidingWindowBuffer};
use crate::error::{Error, Result};
use crate::federation::{FederationSpec, HostId, LeiId};
use crate::gon::{finetune_with, GonNetwork, GonOptimizer, GonSample, HostGraph};
use crate::report::{ExperimentTrace, TraceRow};
use crate::simulator::{
    fitness_value, Feature, MigrationDecision, SimParams, SimState, Task, TaskId, TaskStatus,
};
use crate::tensor::Tensor;
use crate::workload::{
    default_profiles, generate_fault_events, sample_arrivals, schedule, FaultEvent, FaultModel,
    SchedulerPolicy,
};

/// Geometric-cooling annealer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealerConfig {
    pub initial_temp: f64,
    /// Multiplied into the temperature after every iteration; in (0, 1).
    pub cooling: f64,
    pub iterations: usize,
}

impl Default for AnnealerConfig {
    fn default() -> Self {
        AnnealerConfig { initial_temp: 1.0, cooling: 0.95, iterations: 100 }
    }
}

impl AnnealerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_temp > 0.0) || !self.initial_temp.is_finite() {
            return Err(Error::contract(format!(
                "annealer temperature must be positive, got {}",
                self.initial_temp
            )));
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return Err(Error::contract(format!(
                "annealer cooling must be in (0, 1), got {}",
                self.cooling
            )));
        }
        if self.iterations == 0 {
            return Err(Error::contract("annealer needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineVariant {
    Dragon,
    DragonPlus,
}

/// Remediation mode: the base algorithm is exactly the lookahead variant
/// pinned to a single stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineMode {
    pub variant: EngineVariant,
    pub lookahead: usize,
}

impl EngineMode {
    pub fn dragon() -> Self {
        EngineMode { variant: EngineVariant::Dragon, lookahead: 1 }
    }

    pub fn dragon_plus(lookahead: usize) -> Self {
        EngineMode { variant: EngineVariant::DragonPlus, lookahead }
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            EngineVariant::Dragon => "dragon",
            EngineVariant::DragonPlus => "dragon_plus",
        }
    }

    /// Window length each variant was tuned for.
    pub fn default_window_k(&self) -> usize {
        match self.variant {
            EngineVariant::Dragon => 10,
            EngineVariant::DragonPlus => 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookahead == 0 {
            return Err(Error::contract("lookahead must be >= 1"));
        }
        if self.variant == EngineVariant::Dragon && self.lookahead != 1 {
            return Err(Error::contract(format!(
                "base mode is single-stage, got lookahead {}",
                self.lookahead
            )));
        }
        Ok(())
    }
}

/// Full experiment settings around one simulator run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// None runs the simulator with no remediation at all.
    pub mode: Option<EngineMode>,
    pub intervals: u64,
    pub window_k: usize,
    /// Poisson arrival rate per LEI per interval.
    pub arrival_rate: f64,
    /// Deadline = multiplier x expected solo runtime.
    pub slo_multiplier: f64,
    pub scheduler: SchedulerPolicy,
    pub annealer: AnnealerConfig,
    pub finetune_lr: f64,
    /// Tail fraction fitted by each broker's threshold tracker.
    pub q_low: f64,
    /// Target exceedance risk of the fitted threshold.
    pub q_risk: f64,
    /// 1 is the deterministic reference; above 1 broker phases run on
    /// scoped threads (still deterministic: agents share no mutable state).
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: None,
            intervals: 100,
            window_k: 10,
            arrival_rate: 1.2,
            slo_multiplier: 2.0,
            scheduler: SchedulerPolicy::LeastUtil,
            annealer: AnnealerConfig::default(),
            finetune_lr: 1e-4,
            q_low: 0.07,
            q_risk: 1e-4,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(mode) = &self.mode {
            mode.validate()?;
        }
        if self.intervals == 0 {
            return Err(Error::contract("experiment needs at least one interval"));
        }
        if self.window_k == 0 {
            return Err(Error::contract("window length must be >= 1"));
        }
        if !(self.arrival_rate >= 0.0) || !self.arrival_rate.is_finite() {
            return Err(Error::contract(format!(
                "arrival rate must be >= 0, got {}",
                self.arrival_rate
            )));
        }
        if !(self.slo_multiplier > 0.0) || !self.slo_multiplier.is_finite() {
            return Err(Error::contract(format!(
                "slo multiplier must be > 0, got {}",
                self.slo_multiplier
            )));
        }
        if !(self.finetune_lr > 0.0) || !self.finetune_lr.is_finite() {
            return Err(Error::contract(format!(
                "finetune learning rate must be > 0, got {}",
                self.finetune_lr
            )));
        }
        for (name, q) in [("q_low", self.q_low), ("q_risk", self.q_risk)] {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::contract(format!("{name} must be in (0,1), got {q}")));
            }
        }
        if self.threads == 0 {
            return Err(Error::contract("threads must be >= 1"));
        }
        self.annealer.validate()
    }
}

/// Search space seen by the annealer: which tasks may move and the one
/// representative target per LEI (its least-utilized live host).
#[derive(Debug, Clone)]
pub struct NeighborContext {
    /// Movable (active) tasks with the LEI currently hosting them.
    pub tasks: Vec<(TaskId, LeiId)>,
    pub lei_targets: Vec<Option<HostId>>,
    pub lei_of_host: Vec<LeiId>,
}

impl NeighborContext {
    pub fn from_state(spec: &FederationSpec, state: &SimState) -> Self {
        let mut lei_targets: Vec<Option<(HostId, f64)>> = vec![None; spec.n_leis()];
        for l in state.host_loads(spec) {
            if !l.live {
                continue;
            }
            match lei_targets[l.lei] {
                Some((_, best)) if l.cpu_util >= best => {}
                _ => lei_targets[l.lei] = Some((l.host, l.cpu_util)),
            }
        }
        let tasks = state
            .tasks
            .iter()
            .filter(|(_, t)| t.is_active())
            .filter_map(|(&id, t)| t.host.map(|h| (id, spec.hosts[h].lei_id)))
            .collect();
        NeighborContext {
            tasks,
            lei_targets: lei_targets.into_iter().map(|o| o.map(|(h, _)| h)).collect(),
            lei_of_host: spec.hosts.iter().map(|h| h.lei_id).collect(),
        }
    }

    /// Target hosts a task homed in `home` may move to, optionally
    /// excluding one further LEI (the current target on a re-aim).
    fn target_choices(&self, home: LeiId, exclude: Option<LeiId>) -> Vec<HostId> {
        self.lei_targets
            .iter()
            .enumerate()
            .filter(|&(lei, t)| lei != home && Some(lei) != exclude && t.is_some())
            .map(|(_, t)| t.expect("filtered"))
            .collect()
    }
}

/// One uniformly random edit: add a move for an uncovered task, or re-aim
/// an existing move at a different LEI. Never removes a move, so the edit
/// distance to `m` is exactly one. None when no legal edit exists.
pub fn neighbor<R: Rng>(
    m: &MigrationDecision,
    ctx: &NeighborContext,
    rng: &mut R,
) -> Option<MigrationDecision> {
    let mut addable: Vec<(TaskId, LeiId)> = Vec::new();
    let mut retargetable: Vec<(TaskId, LeiId, LeiId)> = Vec::new();
    for &(task, home) in &ctx.tasks {
        match m.get(task) {
            None => {
                if !ctx.target_choices(home, None).is_empty() {
                    addable.push((task, home));
                }
            }
            Some(cur) => {
                let cur_lei = ctx.lei_of_host[cur];
                if !ctx.target_choices(home, Some(cur_lei)).is_empty() {
                    retargetable.push((task, home, cur_lei));
                }
            }
        }
    }
    let add = match (addable.is_empty(), retargetable.is_empty()) {
        (true, true) => return None,
        (false, true) => true,
        (true, false) => false,
        (false, false) => rng.random_range(0..2) == 0,
    };
    let mut next = m.clone();
    if add {
        let (task, home) = addable[rng.random_range(0..addable.len())];
        let choices = ctx.target_choices(home, None);
        next.set(task, choices[rng.random_range(0..choices.len())]);
    } else {
        let (task, home, cur_lei) = retargetable[rng.random_range(0..retargetable.len())];
        let choices = ctx.target_choices(home, Some(cur_lei));
        next.set(task, choices[rng.random_range(0..choices.len())]);
    }
    Some(next)
}

#[derive(Debug, Clone)]
pub struct AnnealOutcome {
    pub best: MigrationDecision,
    pub best_fitness: f64,
    /// Successful fitness evaluations, the initial decision included.
    pub evaluated: usize,
    /// Candidates whose fitness evaluation failed; they are discarded.
    pub skipped: usize,
}

/// Metropolis minimization under geometric cooling. The best decision seen
/// is returned, so a run that never improves yields the initial decision.
pub fn anneal<R: Rng, F>(
    m0: MigrationDecision,
    mut fitness: F,
    ctx: &NeighborContext,
    cfg: &AnnealerConfig,
    rng: &mut R,
) -> Result<AnnealOutcome>
where
    F: FnMut(&MigrationDecision) -> Result<f64>,
{
    cfg.validate()?;
    let f0 = fitness(&m0)?;
    if !f0.is_finite() {
        return Err(Error::numerical("anneal: initial fitness is not finite"));
    }
    let mut current = m0.clone();
    let mut f_current = f0;
    let mut best = m0;
    let mut best_fitness = f0;
    let mut evaluated = 1usize;
    let mut skipped = 0usize;
    let mut temp = cfg.initial_temp;
    for _ in 0..cfg.iterations {
        let Some(candidate) = neighbor(&current, ctx, rng) else { break };
        match fitness(&candidate) {
            Err(_) => skipped += 1,
            Ok(f) if !f.is_finite() => skipped += 1,
            Ok(f) => {
                evaluated += 1;
                let accept = if f < f_current {
                    true
                } else {
                    let p = (-(f - f_current) / temp.max(1e-300)).exp();
                    rng.random::<f64>() < p
                };
                if accept {
                    current = candidate;
                    f_current = f;
                    if f_current < best_fitness {
                        best = current.clone();
                        best_fitness = f_current;
                    }
                }
            }
        }
        temp *= cfg.cooling;
    }
    Ok(AnnealOutcome { best, best_fitness, evaluated, skipped })
}

/// Folds a newer stage decision over an accumulated one: a task decided in
/// both keeps the newer target.
pub fn fold_decision(acc: &mut MigrationDecision, next: &MigrationDecision) {
    for (task, target) in next.iter() {
        acc.set(task, target);
    }
}

/// Merges broker emissions in broker order; on conflict the earliest
/// broker keeps the task.
pub fn merge_emissions<'a, I>(per_broker: I) -> MigrationDecision
where
    I: IntoIterator<Item = &'a MigrationDecision>,
{
    let mut merged = MigrationDecision::new();
    for d in per_broker {
        for (task, target) in d.iter() {
            if merged.get(task).is_none() {
                merged.set(task, target);
            }
        }
    }
    merged
}

/// Measured feature rows for every host, restricted to the modeled subset.
fn host_rows(state: &SimState, params: &SimParams) -> Vec<Vec<f64>> {
    state
        .host_feats
        .iter()
        .map(|f| params.features.iter().map(|ft| f[ft.index()]).collect())
        .collect()
}

/// Per-task usage row in the same feature space as hosts. Disk traffic is
/// tied to execution share, network traffic to transfer pauses.
fn task_feature_row(
    t: &Task,
    exec: f64,
    spec: &FederationSpec,
    state: &SimState,
    params: &SimParams,
) -> Option<Vec<f64>> {
    let h = t.host?;
    let hs = &spec.hosts[h];
    let cpu = (exec / hs.cpu_capacity).clamp(0.0, 1.0);
    let ram = (t.ram_mb / hs.ram_mb as f64).clamp(0.0, 1.0);
    let swap = state.host_feats[h][Feature::Swap.index()];
    let pause = (t.pause_s / params.interval_s).clamp(0.0, 1.0);
    let full = [cpu, ram, swap, (0.08 * cpu).min(1.0), (0.06 * cpu).min(1.0), pause, pause];
    Some(params.features.iter().map(|f| full[f.index()]).collect())
}

/// Shifts one window row a step forward: each feature block drops its
/// oldest slot and appends the new value.
fn shift_row(row: &[f64], n: usize, k: usize, next: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for f in 0..n {
        out.extend_from_slice(&row[f * k + 1..(f + 1) * k]);
        out.push(next[f]);
    }
    out
}

fn shift_append_rows(window: &Tensor, n: usize, k: usize, next: &[Vec<f64>]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(window.numel());
    for (r, row_next) in next.iter().enumerate() {
        data.extend(shift_row(window.row(r), n, k, row_next));
    }
    Tensor::matrix(window.rows(), n * k, data)
}

/// One-sided deviation above the expected-normal row.
fn relu_residual_norm(observed: &[f64], anchor: &[f64]) -> f64 {
    observed
        .iter()
        .zip(anchor)
        .map(|(&o, &a)| (o - a).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Hosts a candidate future would push over the detection threshold.
fn predicted_faults(next: &Tensor, anchor: &Tensor, threshold: f64, state: &SimState) -> usize {
    (0..next.rows())
        .filter(|&h| state.host_live(h))
        .filter(|&h| relu_residual_norm(next.row(h), anchor.row(h)) >= threshold)
        .count()
}

/// Rolling feature history: hosts in a fixed-width buffer, tasks in
/// per-id rings that replicate their earliest row when short.
struct History {
    n: usize,
    k: usize,
    hosts: SlidingWindowBuffer,
    tasks: BTreeMap<TaskId, VecDeque<Vec<f64>>>,
}

impl History {
    fn new(n_hosts: usize, n: usize, k: usize) -> Result<Self> {
        Ok(History {
            n,
            k,
            hosts: SlidingWindowBuffer::new(n_hosts, n, k)?,
            tasks: BTreeMap::new(),
        })
    }

    fn push_hosts(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        self.hosts.push(rows.iter().flatten().copied().collect())
    }

    fn push_task(&mut self, id: TaskId, row: Vec<f64>) {
        let ring = self.tasks.entry(id).or_default();
        if ring.len() == self.k {
            ring.pop_front();
        }
        ring.push_back(row);
    }

    fn host_window(&self) -> Result<Tensor> {
        self.hosts.window()
    }

    /// Feature-major, time-fastest row for one task; all zeros when the
    /// task has no recorded history yet.
    fn task_row(&self, id: TaskId) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.k];
        if let Some(ring) = self.tasks.get(&id) {
            if ring.is_empty() {
                return out;
            }
            for f in 0..self.n {
                for j in 0..self.k {
                    let row = match (j + ring.len()).checked_sub(self.k) {
                        Some(i) => &ring[i],
                        None => &ring[0],
                    };
                    out[f * self.k + j] = row[f];
                }
            }
        }
        out
    }

    fn retain(&mut self, live: &BTreeSet<TaskId>) {
        self.tasks.retain(|id, _| live.contains(id));
    }
}

/// Where a task runs for windowing purposes: its host once active, its
/// pending placement while waiting.
fn effective_host(t: &Task, placement: &BTreeMap<TaskId, HostId>) -> Option<HostId> {
    match t.status {
        TaskStatus::Running | TaskStatus::Migrating => t.host,
        TaskStatus::New | TaskStatus::Failed => placement.get(&t.id).copied(),
        TaskStatus::Done => None,
    }
}

/// Broker-centered star over the LEI's hosts.
fn star_graph(hosts: &[HostId], broker: HostId) -> Result<HostGraph> {
    let m = hosts.len();
    let b = hosts.iter().position(|&h| h == broker).unwrap_or(0);
    let mut wb = vec![0.0; m * m];
    for i in 0..m {
        if i != b {
            wb[i * m + b] = 1.0;
            wb[b * m + i] = 1.0;
        }
    }
    HostGraph::new(Tensor::matrix(m, m, wb)?, Tensor::zeros(&[m, m]))
}

/// Everything one broker sees in one interval: its LEI's current window,
/// the co-simulated next window, and the schedule context.
struct LeiView {
    hosts: Vec<HostId>,
    task_ids: Vec<TaskId>,
    window: Tensor,
    sim_next: Tensor,
    schedule: Tensor,
    graph: HostGraph,
}

#[allow(clippy::too_many_arguments)]
fn build_view(
    spec: &FederationSpec,
    state: &SimState,
    placement: &BTreeMap<TaskId, HostId>,
    history: &History,
    lei: LeiId,
    m_max: usize,
    next_host_rows: &[Vec<f64>],
    next_task_rows: &BTreeMap<TaskId, Vec<f64>>,
) -> Result<LeiView> {
    let n = history.n;
    let k = history.k;
    let hosts = spec.leis[lei].hosts.clone();
    let m = hosts.len();
    let task_ids: Vec<TaskId> = state
        .tasks
        .values()
        .filter_map(|t| effective_host(t, placement).map(|h| (t.id, h)))
        .filter(|&(_, h)| spec.hosts[h].lei_id == lei)
        .map(|(id, _)| id)
        .collect();
    let p = task_ids.len();

    let host_win = history.host_window()?;
    let mut wdata = Vec::with_capacity((m + p) * n * k);
    for &h in &hosts {
        wdata.extend_from_slice(host_win.row(h));
    }
    for &id in &task_ids {
        wdata.extend(history.task_row(id));
    }
    let window = Tensor::matrix(m + p, n * k, wdata)?;

    let zero_next = vec![0.0; n];
    let mut ndata = Vec::with_capacity((m + p) * n * k);
    for (i, &h) in hosts.iter().enumerate() {
        ndata.extend(shift_row(window.row(i), n, k, &next_host_rows[h]));
    }
    for (j, &id) in task_ids.iter().enumerate() {
        let next = next_task_rows.get(&id).unwrap_or(&zero_next);
        ndata.extend(shift_row(window.row(m + j), n, k, next));
    }
    let sim_next = Tensor::matrix(m + p, n * k, ndata)?;

    let mut sdata = vec![0.0; (m + p) * m_max];
    for i in 0..m {
        sdata[i * m_max + i] = 1.0;
    }
    for (j, &id) in task_ids.iter().enumerate() {
        if let Some(h) = state.tasks.get(&id).and_then(|t| effective_host(t, placement)) {
            if let Some(pos) = hosts.iter().position(|&x| x == h) {
                sdata[(m + j) * m_max + pos] = 1.0;
            }
        }
    }
    let schedule = Tensor::matrix(m + p, m_max, sdata)?;
    let graph = star_graph(&hosts, state.brokers[lei])?;
    Ok(LeiView { hosts, task_ids, window, sim_next, schedule, graph })
}

/// Per-LEI agent: the generative model, its optimizer, a pooled tail
/// detector over its hosts' scores, and a private random stream.
pub struct BrokerAgent {
    lei: LeiId,
    net: GonNetwork,
    opt: GonOptimizer,
    spot: SpotDetector,
    observed: usize,
    rng: ChaCha12Rng,
}

struct Detection {
    scores: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
    w_hat: Tensor,
    degraded: bool,
}

impl BrokerAgent {
    fn new(
        lei: LeiId,
        net: GonNetwork,
        finetune_lr: f64,
        q_low: f64,
        q_risk: f64,
        seed: u64,
    ) -> Result<Self> {
        let opt = GonOptimizer::new(&net, finetune_lr)?;
        let spot = SpotDetector::new(q_low, q_risk, 500, false)?;
        let stream = (lei as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let rng = ChaCha12Rng::seed_from_u64(seed ^ 0xb2_0c_u64.rotate_left(27) ^ stream);
        Ok(BrokerAgent { lei, net, opt, spot, observed: 0, rng })
    }

    /// Infinite until enough clean scores were absorbed; labeling before
    /// that would fire on the very first observation.
    fn active_threshold(&self) -> f64 {
        if self.observed < MIN_OBSERVATIONS {
            f64::INFINITY
        } else {
            self.spot.threshold().unwrap_or(f64::INFINITY)
        }
    }

    /// Scores the co-simulated next window against the generated normal
    /// one. Scores at or above the running threshold are labeled and kept
    /// out of the tail fit; the rest update it.
    fn detect(&mut self, view: &LeiView) -> Result<Detection> {
        let generated = self.net.generate(&view.window, &view.schedule, &view.graph, &mut self.rng)?;
        let (_, per_entity) = fault_score(&view.sim_next, &generated.z)?;
        let m = view.hosts.len();
        let scores: Vec<f64> = per_entity[..m].to_vec();
        let mut labels = vec![false; m];
        for (i, &s) in scores.iter().enumerate() {
            if s >= self.active_threshold() {
                labels[i] = true;
            } else {
                self.spot.observe(s)?;
                self.observed += 1;
            }
        }
        Ok(Detection {
            scores,
            labels,
            threshold: self.active_threshold(),
            w_hat: generated.z,
            degraded: generated.degraded,
        })
    }
}

/// Inputs shared by every planning stage of one broker tick.
pub struct PlanInputs<'a> {
    pub spec: &'a FederationSpec,
    pub params: &'a SimParams,
    pub annealer: &'a AnnealerConfig,
    pub lookahead: usize,
    pub state: &'a SimState,
    pub placement: &'a BTreeMap<TaskId, HostId>,
    /// Current window of every host, (hosts, n*k).
    pub window: &'a Tensor,
    /// Expected-normal rows per host, same shape.
    pub anchor: &'a Tensor,
    pub threshold: f64,
}

#[derive(Debug)]
pub struct PlanOutcome {
    pub emitted: MigrationDecision,
    /// Hosts of this LEI flagged by later lookahead stages.
    pub predicted: Vec<bool>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Initial escape plan: each active task on a flagged host moves with
/// probability 1/2 to a uniformly chosen other LEI's representative host.
fn seed_escape_moves<R: Rng>(
    state: &SimState,
    ctx: &NeighborContext,
    omega: &[HostId],
    rng: &mut R,
) -> MigrationDecision {
    let mut m = MigrationDecision::new();
    for &(task, home) in &ctx.tasks {
        let on_flagged = state
            .tasks
            .get(&task)
            .and_then(|t| t.host)
            .is_some_and(|h| omega.contains(&h));
        if !on_flagged {
            continue;
        }
        if rng.random::<f64>() >= 0.5 {
            continue;
        }
        let choices = ctx.target_choices(home, None);
        if choices.is_empty() {
            continue;
        }
        m.set(task, choices[rng.random_range(0..choices.len())]);
    }
    m
}

/// Keeps only moves this broker may emit: its own LEI's tasks, aimed out
/// of the LEI, still legal against the live state.
fn filter_emission(
    spec: &FederationSpec,
    state: &SimState,
    lei: LeiId,
    folded: &MigrationDecision,
) -> MigrationDecision {
    let mut emitted = MigrationDecision::new();
    for (task, target) in folded.iter() {
        let Some(t) = state.tasks.get(&task) else { continue };
        if !t.is_active() {
            continue;
        }
        let Some(current) = t.host else { continue };
        if spec.hosts[current].lei_id != lei || spec.hosts[target].lei_id == lei {
            continue;
        }
        if target == current || !state.host_live(target) || !state.lei_live[spec.hosts[target].lei_id]
        {
            continue;
        }
        emitted.set(task, target);
    }
    emitted
}

/// One broker's remediation tick: anneal a decision per lookahead stage
/// against co-simulated futures, fold the stages, emit own cross-LEI
/// moves. Stages past the first also flag this LEI's hosts whose
/// simulated windows breach the threshold.
pub fn plan<R: Rng>(
    inp: &PlanInputs,
    lei: LeiId,
    omega: &[HostId],
    rng: &mut R,
) -> Result<PlanOutcome> {
    let spec = inp.spec;
    let params = inp.params;
    let n = params.n_features();
    let k = inp.window.cols() / n;
    let own_hosts = &spec.leis[lei].hosts;
    let mut predicted = vec![false; own_hosts.len()];
    if omega.is_empty() {
        return Ok(PlanOutcome {
            emitted: MigrationDecision::new(),
            predicted,
            evaluated: 0,
            skipped: 0,
        });
    }

    let empty_placement = BTreeMap::new();
    let mut folded = MigrationDecision::new();
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut sim = inp.state.clone();
    let mut window = inp.window.clone();
    for stage in 0..inp.lookahead {
        // New arrivals are only known for the first stage.
        let placement = if stage == 0 { inp.placement } else { &empty_placement };
        let ctx = NeighborContext::from_state(spec, &sim);
        let m0 = seed_escape_moves(&sim, &ctx, omega, rng);
        let outcome = {
            let fitness = |m: &MigrationDecision| -> Result<f64> {
                let mut probe = sim.clone();
                let out = probe.step(spec, params, placement, m, &[])?;
                let next = shift_append_rows(&window, n, k, &host_rows(&probe, params))?;
                let n_pred = predicted_faults(&next, inp.anchor, inp.threshold, &probe);
                Ok(fitness_value(
                    out.qos,
                    n_pred,
                    spec.n_hosts(),
                    out.o_t,
                    params.delta1,
                    params.delta2,
                ))
            };
            anneal(m0, fitness, &ctx, inp.annealer, rng)?
        };
        evaluated += outcome.evaluated;
        skipped += outcome.skipped;
        fold_decision(&mut folded, &outcome.best);
        sim.step(spec, params, placement, &outcome.best, &[])?;
        window = shift_append_rows(&window, n, k, &host_rows(&sim, params))?;
        if stage + 1 < inp.lookahead {
            for (i, &h) in own_hosts.iter().enumerate() {
                if !sim.host_live(h) {
                    continue;
                }
                if relu_residual_norm(window.row(h), inp.anchor.row(h)) >= inp.threshold {
                    predicted[i] = true;
                }
            }
        }
    }
    Ok(PlanOutcome {
        emitted: filter_emission(spec, inp.state, lei, &folded),
        predicted,
        evaluated,
        skipped,
    })
}

/// Runs `f` once per agent, index-ordered results. With more than one
/// thread each agent gets its own scoped worker; agents never share
/// mutable state, so the outcome is identical either way.
fn for_each_agent<T, F>(agents: &mut [BrokerAgent], threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut BrokerAgent) -> Result<T> + Sync,
{
    if threads <= 1 || agents.len() <= 1 {
        return agents.iter_mut().enumerate().map(|(i, a)| f(i, a)).collect();
    }
    std::thread::scope(|scope| {
        let fr = &f;
        let handles: Vec<_> = agents
            .iter_mut()
            .enumerate()
            .map(|(i, a)| scope.spawn(move || fr(i, a)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::contract("broker worker panicked"))))
            .collect()
    })
}

struct PendingFinetune {
    agent_idx: usize,
    hosts: Vec<HostId>,
    task_ids: Vec<TaskId>,
    schedule: Tensor,
    graph: HostGraph,
    w_hat: Tensor,
}

struct DecideOutcome {
    merged: MigrationDecision,
    labels: Vec<bool>,
    scores: Vec<f64>,
    evaluated: usize,
    skipped: usize,
    degraded: usize,
    pending: Vec<PendingFinetune>,
}

#[allow(clippy::too_many_arguments)]
fn decide(
    spec: &FederationSpec,
    params: &SimParams,
    cfg: &ExperimentConfig,
    m_max: usize,
    agents: &mut [BrokerAgent],
    state: &SimState,
    placement: &BTreeMap<TaskId, HostId>,
    history: &History,
) -> Result<DecideOutcome> {
    let n_hosts = spec.n_hosts();
    let lookahead = cfg.mode.as_ref().map_or(1, |m| m.lookahead);

    // One shared co-simulation of the next interval under no remediation.
    let mut cosim = state.clone();
    let cosim_out = cosim.step(spec, params, placement, &MigrationDecision::new(), &[])?;
    let next_host_rows = host_rows(&cosim, params);
    let mut next_task_rows: BTreeMap<TaskId, Vec<f64>> = BTreeMap::new();
    for (&id, t) in &cosim.tasks {
        let exec = cosim_out.task_exec.get(&id).copied().unwrap_or(0.0);
        if let Some(row) = task_feature_row(t, exec, spec, &cosim, params) {
            next_task_rows.insert(id, row);
        }
    }

    let views: Vec<Option<LeiView>> = (0..spec.n_leis())
        .map(|lei| {
            if !state.lei_live[lei] {
                return Ok(None);
            }
            build_view(spec, state, placement, history, lei, m_max, &next_host_rows, &next_task_rows)
                .map(Some)
        })
        .collect::<Result<_>>()?;

    let detections: Vec<Option<Detection>> = for_each_agent(agents, cfg.threads, |i, agent| {
        match &views[i] {
            Some(view) => agent.detect(view).map(Some),
            None => Ok(None),
        }
    })?;

    // Every broker's generated host rows form the shared expected-normal
    // anchor; hosts of dead LEIs keep their current window.
    let host_win = history.host_window()?;
    let nk = host_win.cols();
    let mut anchor = host_win.clone();
    for (view, det) in views.iter().zip(&detections) {
        if let (Some(v), Some(d)) = (view, det) {
            for (pos, &h) in v.hosts.iter().enumerate() {
                anchor.data_mut()[h * nk..(h + 1) * nk].copy_from_slice(d.w_hat.row(pos));
            }
        }
    }

    let plans: Vec<Option<PlanOutcome>> = for_each_agent(agents, cfg.threads, |i, agent| {
        let (Some(view), Some(det)) = (&views[i], &detections[i]) else { return Ok(None) };
        let omega: Vec<HostId> = view
            .hosts
            .iter()
            .zip(&det.labels)
            .filter(|&(_, &flag)| flag)
            .map(|(&h, _)| h)
            .collect();
        let inp = PlanInputs {
            spec,
            params,
            annealer: &cfg.annealer,
            lookahead,
            state,
            placement,
            window: &host_win,
            anchor: &anchor,
            threshold: det.threshold,
        };
        plan(&inp, agent.lei, &omega, &mut agent.rng).map(Some)
    })?;

    let merged = merge_emissions(plans.iter().flatten().map(|p| &p.emitted));
    state.validate_migration(spec, &merged)?;

    let mut labels = vec![false; n_hosts];
    let mut scores = vec![0.0; n_hosts];
    let mut evaluated = 0;
    let mut skipped = 0;
    let mut degraded = 0;
    let mut pending = Vec::new();
    for (i, view) in views.into_iter().enumerate() {
        let (Some(view), Some(det)) = (view, &detections[i]) else { continue };
        let plan_out = plans[i].as_ref();
        for (pos, &h) in view.hosts.iter().enumerate() {
            let ahead = plan_out.is_some_and(|p| p.predicted[pos]);
            labels[h] = det.labels[pos] || ahead;
            scores[h] = det.scores[pos];
        }
        if let Some(p) = plan_out {
            evaluated += p.evaluated;
            skipped += p.skipped;
        }
        if det.degraded {
            degraded += 1;
        }
        pending.push(PendingFinetune {
            agent_idx: i,
            hosts: view.hosts,
            task_ids: view.task_ids,
            schedule: view.schedule,
            graph: view.graph,
            w_hat: detections[i].as_ref().expect("matched above").w_hat.clone(),
        });
    }
    Ok(DecideOutcome { merged, labels, scores, evaluated, skipped, degraded, pending })
}

/// Runs one full experiment: workload arrivals, scheduling, optional
/// detection and remediation, and the live simulation, producing one
/// trace row per interval. The same seed always yields the same trace.
pub fn run_experiment(
    spec: &FederationSpec,
    params: &SimParams,
    fault_model: &FaultModel,
    cfg: &ExperimentConfig,
    base_net: Option<&GonNetwork>,
    seed: u64,
) -> Result<ExperimentTrace> {
    spec.validate()?;
    params.validate()?;
    cfg.validate()?;
    let n = params.n_features();
    let k = cfg.window_k;
    let n_hosts = spec.n_hosts();
    let m_max = spec.max_lei_size();
    let remediate = cfg.mode.is_some();
    if remediate {
        let net = base_net
            .ok_or_else(|| Error::contract("remediation mode needs a detector network"))?;
        let gc = net.cfg();
        if gc.n_features != n || gc.window_len != k || gc.m_max != m_max {
            return Err(Error::contract(format!(
                "network was built for ({}, {}, {}), run needs ({}, {}, {})",
                gc.n_features, gc.window_len, gc.m_max, n, k, m_max
            )));
        }
    }

    // Separate streams so paired-seed runs in different modes share the
    // same arrivals, faults, and scheduler draws.
    let mut workload_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x77_f0_u64.rotate_left(9));
    let mut fault_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x3a_21_u64.rotate_left(41));
    let mut sched_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x1b_45_u64.rotate_left(23));

    let profiles = default_profiles();
    let events = generate_fault_events(&mut fault_rng, n_hosts, cfg.intervals, fault_model)?;
    let mut state = SimState::new(spec, params, seed)?;
    let mut history = History::new(n_hosts, n, k)?;
    history.push_hosts(&host_rows(&state, params))?;

    let mut agents: Vec<BrokerAgent> = if remediate {
        let net = base_net.expect("checked above");
        (0..spec.n_leis())
            .map(|lei| {
                BrokerAgent::new(lei, net.clone(), cfg.finetune_lr, cfg.q_low, cfg.q_risk, seed)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut rows = Vec::with_capacity(cfg.intervals as usize);
    let mut trace_host_rows = Vec::with_capacity(cfg.intervals as usize);
    let mut decision_time_ms = Vec::with_capacity(cfg.intervals as usize);
    for t in 0..cfg.intervals {
        for lei in 0..spec.n_leis() {
            // Dead LEIs keep receiving arrivals (they pool until revival)
            // so the workload stream is mode-independent.
            for spawn in
                sample_arrivals(&mut workload_rng, &profiles, cfg.arrival_rate, cfg.slo_multiplier, params.interval_s)?
            {
                state.spawn(lei, &spawn);
            }
        }
        let unplaced = state.unplaced();
        let loads = state.host_loads(spec);
        let assignment = schedule(&unplaced, &loads, cfg.scheduler, &mut sched_rng);
        let placement: BTreeMap<TaskId, HostId> =
            assignment.into_iter().filter_map(|(id, h)| h.map(|h| (id, h))).collect();
        let starting: Vec<FaultEvent> = events.iter().filter(|e| e.start == t).cloned().collect();

        let clock = Instant::now();
        let decided = if remediate {
            Some(decide(spec, params, cfg, m_max, &mut agents, &state, &placement, &history)?)
        } else {
            None
        };
        decision_time_ms.push(clock.elapsed().as_secs_f64() * 1e3);

        let merged = decided.as_ref().map(|d| d.merged.clone()).unwrap_or_default();
        let outcome = state.step(spec, params, &placement, &merged, &starting)?;

        let fresh_host_rows = host_rows(&state, params);
        trace_host_rows.push(fresh_host_rows.concat());
        history.push_hosts(&fresh_host_rows)?;
        for (&id, task) in &state.tasks {
            let exec = outcome.task_exec.get(&id).copied().unwrap_or(0.0);
            if let Some(row) = task_feature_row(task, exec, spec, &state, params) {
                history.push_task(id, row);
            }
        }

        let mut finetune_loss = 0.0;
        let mut degraded_extra = 0;
        if let Some(d) = &decided {
            let mut sum = 0.0;
            let mut count = 0usize;
            for p in &d.pending {
                let host_win = history.host_window()?;
                let mut data = Vec::with_capacity((p.hosts.len() + p.task_ids.len()) * n * k);
                for &h in &p.hosts {
                    data.extend_from_slice(host_win.row(h));
                }
                for &id in &p.task_ids {
                    data.extend(history.task_row(id));
                }
                let window = Tensor::matrix(p.hosts.len() + p.task_ids.len(), n * k, data)?;
                let sample =
                    GonSample { window, schedule: p.schedule.clone(), graph: p.graph.clone() };
                let agent = &mut agents[p.agent_idx];
                match finetune_with(&mut agent.net, &mut agent.opt, &sample, &p.w_hat) {
                    Ok(loss) => {
                        sum += loss;
                        count += 1;
                    }
                    // A diverged update is dropped, not fatal.
                    Err(Error::Numerical(_)) => degraded_extra += 1,
                    Err(e) => return Err(e),
                }
            }
            if count > 0 {
                finetune_loss = sum / count as f64;
            }
        }

        let live: BTreeSet<TaskId> =
            state.tasks.values().filter(|t| t.is_active()).map(|t| t.id).collect();
        history.retain(&live);

        let truth: Vec<bool> = (0..n_hosts)
            .map(|h| events.iter().any(|e| e.host == h && e.active_at(t)))
            .collect();
        let labels = decided.as_ref().map(|d| d.labels.clone()).unwrap_or_else(|| vec![false; n_hosts]);
        let scores = decided.as_ref().map(|d| d.scores.clone()).unwrap_or_else(|| vec![0.0; n_hosts]);
        let labeled = labels.iter().filter(|&&b| b).count();
        let fitness = fitness_value(
            outcome.qos,
            labeled,
            n_hosts,
            outcome.o_t,
            params.delta1,
            params.delta2,
        );
        let cpu_util: Vec<f64> =
            state.host_feats.iter().map(|f| f[Feature::Cpu.index()]).collect();
        rows.push(TraceRow {
            t,
            labels,
            truth,
            scores,
            applied: merged.iter().collect(),
            cpu_util,
            energy_j: outcome.energy_j,
            art: outcome.art,
            aec: outcome.aec,
            qos: outcome.qos,
            o_t: outcome.o_t,
            fitness,
            completed: outcome.completed,
            n_migrations: outcome.n_migrations,
            migration_total_s: outcome.migration_total_s,
            task_restarts: outcome.task_restarts,
            crashed_hosts: outcome.crashed_hosts,
            placement_failures: outcome.placement_failures,
            active_tasks: state.tasks.values().filter(|t| t.is_active()).count(),
            anneal_evaluated: decided.as_ref().map_or(0, |d| d.evaluated),
            anneal_skipped: decided.as_ref().map_or(0, |d| d.skipped),
            finetune_loss,
            degraded_generates: decided.as_ref().map_or(0, |d| d.degraded) + degraded_extra,
        });
    }

    Ok(ExperimentTrace {
        mode: cfg.mode.as_ref().map_or("none", |m| m.name()).to_string(),
        seed,
        intervals: cfg.intervals,
        n_hosts,
        n_leis: spec.n_leis(),
        lei_sizes: spec.leis.iter().map(|l| l.hosts.len()).collect(),
        rows,
        events,
        host_rows: trace_host_rows,
        decision_time_ms,
    })
}

/// Rebuilds the per-LEI windows a broker would have seen over recorded
/// host feature rows, as training samples: one sample per (LEI,
/// interval) with the LEI's schedule one-hot and star topology.
pub fn lei_training_samples(
    spec: &FederationSpec,
    params: &SimParams,
    host_feature_rows: &[Vec<f64>],
    window_k: usize,
) -> Result<Vec<GonSample>> {
    let n = params.features.len();
    let n_hosts = spec.n_hosts();
    if window_k == 0 {
        return Err(Error::contract("window length must be >= 1"));
    }
    for (t, row) in host_feature_rows.iter().enumerate() {
        if row.len() != n_hosts * n {
            return Err(Error::shape(
                format!("{} features at interval {t}", n_hosts * n),
                format!("{}", row.len()),
            ));
        }
    }
    let m_max = spec.max_lei_size();
    let mut history = History::new(n_hosts, n, window_k)?;
    let mut samples = Vec::with_capacity(host_feature_rows.len() * spec.n_leis());
    for row in host_feature_rows {
        let per_host: Vec<Vec<f64>> = (0..n_hosts).map(|h| row[h * n..(h + 1) * n].to_vec()).collect();
        history.push_hosts(&per_host)?;
        let host_win = history.host_window()?;
        let nk = n * window_k;
        for lei in &spec.leis {
            let m = lei.hosts.len();
            let mut data = Vec::with_capacity(m * nk);
            for &h in &lei.hosts {
                data.extend_from_slice(&host_win.data()[h * nk..(h + 1) * nk]);
            }
            let window = Tensor::matrix(m, nk, data)?;
            let mut schedule = Tensor::zeros(&[m, m_max]);
            for slot in 0..m {
                schedule.data_mut()[slot * m_max + slot] = 1.0;
            }
            let graph = star_graph(&lei.hosts, lei.initial_broker)?;
            samples.push(GonSample { window, schedule, graph });
        }
    }
    Ok(samples)
}
