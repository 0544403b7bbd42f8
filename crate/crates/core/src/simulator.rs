//! Interval-stepped co-simulator of the federation.
//!
//! Each step advances one scheduling interval: migrations freeze and
//! move task state, new tasks are placed, faults reshape host capacity,
//! runnable tasks share processors, features and energy are recorded,
//! and hosts stuck in a crash-like state restart their tasks in place.
//!
//! Execution model per host and interval:
//! - capacity is scaled down by cpu hogs and I/O interference;
//! - RAM demand beyond physical memory runs from swap at the harmonic
//!   slowdown rate 1/(1 + (slowdown-1)*swap_fraction);
//! - runnable tasks share the effective rate equally (exact piecewise
//!   processor sharing, so completion times are closed-form);
//! - measured CPU shows productive cycles plus cpu hogs; swap and I/O
//!   stalls stay out of it and surface in the swap/disk/net features,
//!   which is exactly what a utilization-chasing scheduler sees;
//! - power follows gross occupancy: a thrashing host burns near max
//!   while reporting low CPU.

use crate::error::{Error, Result};
use crate::federation::{reassign_broker, BrokerReassignment, FederationSpec, HostId, LeiId};
use crate::workload::{FaultEvent, FaultType, HostLoad, TaskSpawn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type TaskId = u64;

pub const N_FEATURES: usize = 7;

/// Feature order inside windows and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Cpu,
    Ram,
    Swap,
    DiskRead,
    DiskWrite,
    NetRead,
    NetWrite,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Cpu,
        Feature::Ram,
        Feature::Swap,
        Feature::DiskRead,
        Feature::DiskWrite,
        Feature::NetRead,
        Feature::NetWrite,
    ];

    pub fn index(&self) -> usize {
        Feature::ALL.iter().position(|f| f == self).expect("feature in table")
    }

    pub fn name(&self) -> &'static str {
        match self {
            Feature::Cpu => "cpu",
            Feature::Ram => "ram",
            Feature::Swap => "swap",
            Feature::DiskRead => "disk_read",
            Feature::DiskWrite => "disk_write",
            Feature::NetRead => "net_read",
            Feature::NetWrite => "net_write",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QosMode {
    /// qos_term = alpha*ART + beta*AEC; minimizing it reduces both.
    Cost,
    /// The literal reward-style form alpha*ART - beta*AEC.
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimParams {
    pub interval_s: f64,
    /// Execution slowdown factor of a fully swapped working set.
    pub swap_slowdown: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub qos_mode: QosMode,
    /// Feature subset exposed in windows (order preserved).
    pub features: Vec<Feature>,
    /// Gaussian measurement noise sigma added to every feature.
    pub noise_sigma: f64,
    /// Consecutive unresponsive intervals before tasks crash-restart.
    pub unresponsive_after: u32,
    /// cpu hog intensity at or above this makes a host unresponsive.
    pub crash_intensity: f64,
    /// Capacity lost per unit of disk-attack intensity.
    pub disk_capacity_loss: f64,
    /// Capacity lost per unit of ddos intensity.
    pub ddos_capacity_loss: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            interval_s: 300.0,
            swap_slowdown: 10.0,
            alpha: 0.5,
            beta: 0.5,
            delta1: 0.5,
            delta2: 0.5,
            qos_mode: QosMode::Cost,
            features: Feature::ALL.to_vec(),
            noise_sigma: 0.01,
            unresponsive_after: 2,
            crash_intensity: 0.95,
            disk_capacity_loss: 0.6,
            ddos_capacity_loss: 0.4,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.interval_s <= 0.0 || self.swap_slowdown < 1.0 {
            return Err(Error::contract("interval must be positive and swap slowdown >= 1"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("disk_capacity_loss", self.disk_capacity_loss),
            ("ddos_capacity_loss", self.ddos_capacity_loss),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.features.is_empty() {
            return Err(Error::contract("feature set must be non-empty"));
        }
        if self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.crash_intensity) {
            return Err(Error::contract("invalid noise sigma or crash threshold"));
        }
        if self.unresponsive_after == 0 {
            return Err(Error::contract("unresponsive_after must be >= 1"));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    /// Spawned, awaiting first placement.
    New,
    Running,
    /// Frozen for part of this interval by a state transfer.
    Migrating,
    Done,
    /// Unplaceable (dead host or dead LEI); awaits re-placement.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub profile: usize,
    pub arrival_interval: u64,
    pub total_work: f64,
    pub remaining_work: f64,
    pub ram_mb: f64,
    pub state_mb: f64,
    pub slo_deadline_s: f64,
    pub host: Option<HostId>,
    pub status: TaskStatus,
    pub migrations: u32,
    pub restarts: u32,
    /// Seconds of the current interval already consumed by a transfer.
    pub pause_s: f64,
    pub response_s: Option<f64>,
}

impl Task {
    pub fn is_active(&self) -> bool {
        matches!(self.status, TaskStatus::Running | TaskStatus::Migrating)
    }
}

/// Set of (task, target host) moves; a task appears at most once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MigrationDecision {
    moves: BTreeMap<TaskId, HostId>,
}

impl MigrationDecision {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a move; a second move for the same task is a contract error.
    pub fn insert(&mut self, task: TaskId, target: HostId) -> Result<()> {
        if self.moves.contains_key(&task) {
            return Err(Error::contract(format!("task {task} already in migration decision")));
        }
        self.moves.insert(task, target);
        Ok(())
    }

    /// Adds or retargets a move.
    pub fn set(&mut self, task: TaskId, target: HostId) {
        self.moves.insert(task, target);
    }

    pub fn remove(&mut self, task: TaskId) -> Option<HostId> {
        self.moves.remove(&task)
    }

    pub fn get(&self, task: TaskId) -> Option<HostId> {
        self.moves.get(&task).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, HostId)> + '_ {
        self.moves.iter().map(|(&t, &h)| (t, h))
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosRecord {
    pub art: f64,
    pub aec: f64,
    pub qos: f64,
    pub o_t: f64,
    pub n_pred_anomalies: usize,
    pub fitness: f64,
}

/// The annealer's objective: qos_term + d1*N/H + d2*O_t, minimized.
pub fn fitness_value(
    qos_term: f64,
    n_pred: usize,
    n_hosts: usize,
    o_t: f64,
    delta1: f64,
    delta2: f64,
) -> f64 {
    qos_term + delta1 * n_pred as f64 / n_hosts as f64 + delta2 * o_t
}

/// Instantaneous power draw at a CPU utilization level.
pub fn energy_model(power_idle_w: f64, power_max_w: f64, cpu_util: f64) -> f64 {
    power_idle_w + (power_max_w - power_idle_w) * cpu_util.clamp(0.0, 1.0)
}

pub fn qos_record(
    outcome: &StepOutcome,
    params: &SimParams,
    n_pred: usize,
    n_hosts: usize,
) -> QosRecord {
    QosRecord {
        art: outcome.art,
        aec: outcome.aec,
        qos: outcome.qos,
        o_t: outcome.o_t,
        n_pred_anomalies: n_pred,
        fitness: fitness_value(
            outcome.qos,
            n_pred,
            n_hosts,
            outcome.o_t,
            params.delta1,
            params.delta2,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub task: TaskId,
    pub profile: usize,
    pub response_s: f64,
    pub slo_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Interval index this outcome describes.
    pub t: u64,
    pub completed: Vec<CompletionRecord>,
    pub energy_j: f64,
    pub art: f64,
    pub aec: f64,
    /// qos_term per the configured mode.
    pub qos: f64,
    pub o_t: f64,
    pub n_migrations: usize,
    pub migration_total_s: f64,
    pub task_restarts: usize,
    pub crashed_hosts: Vec<HostId>,
    pub placement_failures: usize,
    /// Work units each active task executed this interval.
    pub task_exec: BTreeMap<TaskId, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: u64,
    /// Last measured full feature rows per host.
    pub host_feats: Vec<[f64; N_FEATURES]>,
    pub unresponsive_streak: Vec<u32>,
    /// Current broker per LEI.
    pub brokers: Vec<HostId>,
    pub lei_live: Vec<bool>,
    pub tasks: BTreeMap<TaskId, Task>,
    pub next_task: TaskId,
    pub active_faults: Vec<FaultEvent>,
    /// Running maxima used to normalize ART and O_t into [0,1].
    pub max_response_s: f64,
    pub max_mig_total_s: f64,
    pub cumulative_energy_j: f64,
    /// LEI of tasks that are not placed yet.
    pending_lei: BTreeMap<TaskId, LeiId>,
    rng: ChaCha12Rng,
}

struct PsEntry {
    id: TaskId,
    remaining: f64,
    join_s: f64,
    executed: f64,
}

/// Exact piecewise equal-share execution of one host's interval.
/// Returns (busy seconds, completions as (task, second-in-interval)).
fn processor_share(
    entries: &mut [PsEntry],
    rate_units_per_s: f64,
    interval_s: f64,
) -> (f64, Vec<(TaskId, f64)>) {
    const EPS: f64 = 1e-12;
    entries.sort_by(|a, b| {
        a.join_s.partial_cmp(&b.join_s).expect("finite join").then(a.id.cmp(&b.id))
    });
    let mut tau = 0.0;
    let mut busy = 0.0;
    let mut next = 0;
    let mut active: Vec<usize> = Vec::new();
    let mut completions = Vec::new();
    loop {
        while next < entries.len() && entries[next].join_s <= tau + EPS {
            if entries[next].remaining > EPS {
                active.push(next);
            } else {
                completions.push((entries[next].id, tau.min(interval_s)));
            }
            next += 1;
        }
        if tau >= interval_s - EPS {
            break;
        }
        if active.is_empty() {
            match entries.get(next) {
                Some(e) => {
                    tau = e.join_s.min(interval_s);
                    continue;
                }
                None => break,
            }
        }
        let share = rate_units_per_s / active.len() as f64;
        let mut dt = interval_s - tau;
        if let Some(e) = entries.get(next) {
            dt = dt.min(e.join_s - tau);
        }
        if share > 0.0 {
            let min_rem =
                active.iter().map(|&i| entries[i].remaining).fold(f64::INFINITY, f64::min);
            dt = dt.min(min_rem / share);
        }
        debug_assert!(dt > 0.0, "processor sharing must advance");
        for &i in &active {
            entries[i].remaining -= share * dt;
            entries[i].executed += share * dt;
        }
        busy += dt;
        tau += dt;
        active.retain(|&i| {
            if entries[i].remaining <= EPS {
                entries[i].remaining = 0.0;
                completions.push((entries[i].id, tau));
                false
            } else {
                true
            }
        });
    }
    (busy.min(interval_s), completions)
}

impl SimState {
    pub fn new(spec: &FederationSpec, params: &SimParams, seed: u64) -> Result<Self> {
        spec.validate()?;
        params.validate()?;
        Ok(SimState {
            t: 0,
            host_feats: vec![[0.0; N_FEATURES]; spec.n_hosts()],
            unresponsive_streak: vec![0; spec.n_hosts()],
            brokers: spec.leis.iter().map(|l| l.initial_broker).collect(),
            lei_live: vec![true; spec.n_leis()],
            tasks: BTreeMap::new(),
            next_task: 0,
            active_faults: Vec::new(),
            max_response_s: params.interval_s,
            max_mig_total_s: params.interval_s,
            cumulative_energy_j: 0.0,
            pending_lei: BTreeMap::new(),
            rng: ChaCha12Rng::seed_from_u64(seed ^ 0x5149_u64.rotate_left(17)),
        })
    }

    /// A host is live if it was responsive at the last measurement.
    pub fn host_live(&self, h: HostId) -> bool {
        self.unresponsive_streak[h] == 0
    }

    /// Registers an arrival bound to a LEI; it awaits placement.
    pub fn spawn(&mut self, lei: LeiId, spawn: &TaskSpawn) -> TaskId {
        let id = self.next_task;
        self.next_task += 1;
        self.tasks.insert(
            id,
            Task {
                id,
                profile: spawn.profile,
                arrival_interval: self.t,
                total_work: spawn.work,
                remaining_work: spawn.work,
                ram_mb: spawn.ram_mb,
                state_mb: spawn.state_mb,
                slo_deadline_s: spawn.slo_deadline_s,
                host: None,
                status: TaskStatus::New,
                migrations: 0,
                restarts: 0,
                pause_s: 0.0,
                response_s: None,
            },
        );
        self.pending_lei.insert(id, lei);
        id
    }

    /// Tasks that need a placement decision this interval, with their LEI.
    pub fn unplaced(&self) -> Vec<(TaskId, LeiId)> {
        self.tasks
            .values()
            .filter(|t| matches!(t.status, TaskStatus::New | TaskStatus::Failed))
            .map(|t| (t.id, *self.pending_lei.get(&t.id).expect("unplaced task has a LEI")))
            .collect()
    }

    /// LEI a task belongs to right now: its host's LEI once placed.
    pub fn lei_of_task(&self, spec: &FederationSpec, id: TaskId) -> Option<LeiId> {
        let task = self.tasks.get(&id)?;
        match task.host {
            Some(h) => Some(spec.hosts[h].lei_id),
            None => self.pending_lei.get(&id).copied(),
        }
    }

    /// Scheduler view of every host.
    pub fn host_loads(&self, spec: &FederationSpec) -> Vec<HostLoad> {
        spec.hosts
            .iter()
            .map(|h| HostLoad {
                host: h.id,
                lei: h.lei_id,
                cpu_util: self.host_feats[h.id][Feature::Cpu.index()],
                live: self.host_live(h.id) && self.lei_live[h.lei_id],
            })
            .collect()
    }

    pub fn validate_migration(&self, spec: &FederationSpec, m: &MigrationDecision) -> Result<()> {
        for (task_id, target) in m.iter() {
            let task = self
                .tasks
                .get(&task_id)
                .ok_or_else(|| Error::contract(format!("migration of unknown task {task_id}")))?;
            if !task.is_active() {
                return Err(Error::contract(format!(
                    "task {task_id} is not running (status {:?})",
                    task.status
                )));
            }
            if target >= spec.n_hosts() {
                return Err(Error::contract(format!("migration target {target} out of range")));
            }
            if !self.host_live(target) {
                return Err(Error::contract(format!("migration target {target} is not live")));
            }
            if task.host == Some(target) {
                return Err(Error::contract(format!("task {task_id} already on host {target}")));
            }
        }
        Ok(())
    }

    /// Advances one interval. `placement` maps unplaced tasks to hosts
    /// (from the scheduler), `migration` is the remediation decision,
    /// `faults_starting` are this interval's new fault events.
    pub fn step(
        &mut self,
        spec: &FederationSpec,
        params: &SimParams,
        placement: &BTreeMap<TaskId, HostId>,
        migration: &MigrationDecision,
        faults_starting: &[FaultEvent],
    ) -> Result<StepOutcome> {
        let n_hosts = spec.n_hosts();
        let interval = params.interval_s;
        let t_now = self.t;
        self.validate_migration(spec, migration)?;

        self.active_faults.extend_from_slice(faults_starting);
        self.active_faults.retain(|f| f.start + f.duration > t_now);

        // Peak intensity per fault type and host over active events.
        let mut i_cpu = vec![0.0f64; n_hosts];
        let mut i_ram = vec![0.0f64; n_hosts];
        let mut i_disk = vec![0.0f64; n_hosts];
        let mut i_ddos = vec![0.0f64; n_hosts];
        for f in &self.active_faults {
            if !f.active_at(t_now) {
                continue;
            }
            let slot = match f.fault_type {
                FaultType::CpuOverload => &mut i_cpu,
                FaultType::RamContention => &mut i_ram,
                FaultType::DiskAttack => &mut i_disk,
                FaultType::DdosAttack => &mut i_ddos,
            };
            slot[f.host] = slot[f.host].max(f.intensity);
        }

        // Migrations move state first; transfer time freezes the task.
        let mut mig_in_mb = vec![0.0f64; n_hosts];
        let mut mig_out_mb = vec![0.0f64; n_hosts];
        let mut migration_total_s = 0.0;
        for (task_id, target) in migration.iter() {
            let task = self.tasks.get_mut(&task_id).expect("validated");
            let from = task.host.expect("validated as active");
            let bw_scale = ((1.0 - i_ddos[from]) * (1.0 - i_ddos[target])).max(0.05);
            let transfer_s = spec.migration_time_s(from, target, task.state_mb, bw_scale);
            task.pause_s += transfer_s;
            task.host = Some(target);
            task.status = TaskStatus::Migrating;
            task.migrations += 1;
            mig_out_mb[from] += task.state_mb;
            mig_in_mb[target] += task.state_mb;
            migration_total_s += transfer_s;
        }
        let n_migrations = migration.len();

        // Placement of new and pooled tasks.
        let host_alive: Vec<bool> = (0..n_hosts)
            .map(|h| self.unresponsive_streak[h] == 0 && self.lei_live[spec.hosts[h].lei_id])
            .collect();
        let mut placement_failures = 0;
        for (&task_id, &host) in placement {
            if host >= n_hosts {
                return Err(Error::contract(format!("placement host {host} out of range")));
            }
            let task = self
                .tasks
                .get_mut(&task_id)
                .ok_or_else(|| Error::contract(format!("placement of unknown task {task_id}")))?;
            if !matches!(task.status, TaskStatus::New | TaskStatus::Failed) {
                return Err(Error::contract(format!(
                    "task {task_id} is not awaiting placement (status {:?})",
                    task.status
                )));
            }
            if host_alive[host] {
                task.host = Some(host);
                task.status = TaskStatus::Running;
                self.pending_lei.remove(&task_id);
            } else {
                task.status = TaskStatus::Failed;
                placement_failures += 1;
            }
        }

        // Active tasks per host, in task-id order.
        let mut on_host: Vec<Vec<TaskId>> = vec![Vec::new(); n_hosts];
        for (&id, task) in &self.tasks {
            if task.is_active() {
                on_host[task.host.expect("active task is placed")].push(id);
            }
        }

        // Execution.
        let mut busy_frac = vec![0.0f64; n_hosts];
        let mut productive = vec![0.0f64; n_hosts];
        let mut ram_used_mb = vec![0.0f64; n_hosts];
        let mut swap_used_mb = vec![0.0f64; n_hosts];
        let mut swap_share = vec![0.0f64; n_hosts];
        let mut exhausted = vec![false; n_hosts];
        let mut completions_abs: Vec<(TaskId, f64)> = Vec::new();
        let mut task_exec: BTreeMap<TaskId, f64> = BTreeMap::new();
        for h in 0..n_hosts {
            let hs = &spec.hosts[h];
            let task_ram: f64 = on_host[h].iter().map(|id| self.tasks[id].ram_mb).sum();
            let used = task_ram + i_ram[h] * hs.ram_mb as f64;
            let ram = hs.ram_mb as f64;
            let swap = hs.swap_mb as f64;
            exhausted[h] = used > ram + swap;
            let swap_used = (used - ram).clamp(0.0, swap);
            let sf = if used > 0.0 { swap_used / used } else { 0.0 };
            let rate_factor = 1.0 / (1.0 + (params.swap_slowdown - 1.0) * sf);
            let cap_scale = ((1.0 - i_cpu[h])
                * (1.0 - params.disk_capacity_loss * i_disk[h])
                * (1.0 - params.ddos_capacity_loss * i_ddos[h]))
                .clamp(0.02, 1.0);
            let rate = hs.cpu_capacity * cap_scale * rate_factor / interval;
            let mut entries: Vec<PsEntry> = on_host[h]
                .iter()
                .map(|id| {
                    let t = &self.tasks[id];
                    PsEntry {
                        id: *id,
                        remaining: t.remaining_work,
                        join_s: t.pause_s.min(interval),
                        executed: 0.0,
                    }
                })
                .collect();
            let (busy_s, completions) = processor_share(&mut entries, rate, interval);
            busy_frac[h] = busy_s / interval;
            for e in &entries {
                self.tasks.get_mut(&e.id).expect("entry from task map").remaining_work =
                    e.remaining.max(0.0);
                if e.executed > 0.0 {
                    task_exec.insert(e.id, e.executed);
                }
                productive[h] += e.executed;
            }
            productive[h] /= hs.cpu_capacity;
            for (id, at_s) in completions {
                completions_abs.push((id, t_now as f64 * interval + at_s));
            }
            ram_used_mb[h] = used;
            swap_used_mb[h] = swap_used;
            swap_share[h] = sf;
        }

        // Completions, in completion-time order.
        completions_abs.sort_by(|a, b| {
            a.1.partial_cmp(&b.1).expect("finite completion time").then(a.0.cmp(&b.0))
        });
        let mut completed = Vec::with_capacity(completions_abs.len());
        for (id, at_s) in completions_abs {
            let task = self.tasks.get_mut(&id).expect("completed task exists");
            task.status = TaskStatus::Done;
            let response = at_s - task.arrival_interval as f64 * interval;
            task.response_s = Some(response);
            self.max_response_s = self.max_response_s.max(response);
            completed.push(CompletionRecord {
                task: id,
                profile: task.profile,
                response_s: response,
                slo_ok: response <= task.slo_deadline_s,
            });
        }

        // Crash-like hosts: after enough consecutive unresponsive
        // intervals their still-running tasks restart from scratch,
        // in place. The response clock keeps running.
        let mut crashed_hosts = Vec::new();
        let mut task_restarts = 0;
        for h in 0..n_hosts {
            let unresponsive = i_cpu[h] >= params.crash_intensity || exhausted[h];
            if unresponsive {
                self.unresponsive_streak[h] += 1;
            } else {
                self.unresponsive_streak[h] = 0;
            }
            if unresponsive && self.unresponsive_streak[h] >= params.unresponsive_after {
                crashed_hosts.push(h);
                for &id in &on_host[h] {
                    let task = self.tasks.get_mut(&id).expect("task on host");
                    if task.status == TaskStatus::Done {
                        continue;
                    }
                    task.remaining_work = task.total_work;
                    task.restarts += 1;
                    task_restarts += 1;
                }
            }
        }

        // Feature measurement (then noise, drawn in fixed host order).
        let noise = if params.noise_sigma > 0.0 {
            Some(Normal::new(0.0, params.noise_sigma).map_err(|e| {
                Error::contract(format!("invalid noise sigma {}: {e}", params.noise_sigma))
            })?)
        } else {
            None
        };
        let bw_mb_interval = spec.links.wan_gbps * 125.0 * interval;
        for h in 0..n_hosts {
            let hs = &spec.hosts[h];
            let n_tasks = on_host[h].len() as f64;
            let sf = swap_share[h];
            let cpu = (productive[h] + i_cpu[h]).min(1.0);
            let ram_f = (ram_used_mb[h] / hs.ram_mb as f64).min(1.0);
            let swap_f = if hs.swap_mb > 0 {
                (swap_used_mb[h] / hs.swap_mb as f64).min(1.0)
            } else {
                0.0
            };
            let disk_r = (0.08 * n_tasks + 0.7 * i_disk[h] + 0.5 * sf).min(1.0);
            let disk_w = (0.06 * n_tasks + 0.7 * i_disk[h] + 0.35 * sf).min(1.0);
            let net_r =
                (mig_in_mb[h] / bw_mb_interval + 0.75 * i_ddos[h] + 0.03 * n_tasks).min(1.0);
            let net_w =
                (mig_out_mb[h] / bw_mb_interval + 0.75 * i_ddos[h] + 0.03 * n_tasks).min(1.0);
            let mut row = [cpu, ram_f, swap_f, disk_r, disk_w, net_r, net_w];
            if let Some(n) = &noise {
                for v in &mut row {
                    *v = (*v + n.sample(&mut self.rng)).clamp(0.0, 1.0);
                }
            }
            self.host_feats[h] = row;
        }

        // Energy at gross occupancy: task busy time plus cpu hogs.
        let mut energy_j = 0.0;
        let mut max_energy_j = 0.0;
        for h in 0..n_hosts {
            let hs = &spec.hosts[h];
            let power_util = (busy_frac[h] + i_cpu[h]).min(1.0);
            energy_j += energy_model(hs.power_idle_w, hs.power_max_w, power_util) * interval;
            max_energy_j += hs.power_max_w * interval;
        }
        self.cumulative_energy_j += energy_j;
        let aec = energy_j / max_energy_j;

        // Broker upkeep from the fresh measurements.
        for lei in &spec.leis {
            if self.unresponsive_streak[self.brokers[lei.id]] == 0 {
                self.lei_live[lei.id] = true;
                continue;
            }
            let candidates: Vec<(HostId, f64)> = lei
                .hosts
                .iter()
                .filter(|&&h| self.unresponsive_streak[h] == 0)
                .map(|&h| (h, self.host_feats[h][Feature::Cpu.index()]))
                .collect();
            match reassign_broker(&candidates) {
                BrokerReassignment::Promoted(h) => {
                    self.brokers[lei.id] = h;
                    self.lei_live[lei.id] = true;
                }
                BrokerReassignment::LeiDead => {
                    self.lei_live[lei.id] = false;
                }
            }
        }

        let art = if completed.is_empty() {
            0.0
        } else {
            let mean_resp =
                completed.iter().map(|c| c.response_s).sum::<f64>() / completed.len() as f64;
            mean_resp / self.max_response_s
        };
        let qos = match params.qos_mode {
            QosMode::Cost => params.alpha * art + params.beta * aec,
            QosMode::Paper => params.alpha * art - params.beta * aec,
        };
        self.max_mig_total_s = self.max_mig_total_s.max(migration_total_s);
        let o_t = migration_total_s / self.max_mig_total_s;

        self.t += 1;
        for task in self.tasks.values_mut() {
            if task.status == TaskStatus::Migrating {
                task.status = TaskStatus::Running;
            }
            task.pause_s = (task.pause_s - interval).max(0.0);
        }

        Ok(StepOutcome {
            t: t_now,
            completed,
            energy_j,
            art,
            aec,
            qos,
            o_t,
            n_migrations,
            migration_total_s,
            task_restarts,
            crashed_hosts,
            placement_failures,
            task_exec,
        })
    }

    /// Evaluates a candidate decision one interval ahead on a cloned
    /// state: no new arrivals, placements, or fault events. `self` is
    /// untouched; the advanced clone is returned for window extraction.
    pub fn rollout(
        &self,
        spec: &FederationSpec,
        params: &SimParams,
        migration: &MigrationDecision,
    ) -> Result<(SimState, StepOutcome)> {
        let mut next = self.clone();
        let outcome = next.step(spec, params, &BTreeMap::new(), migration, &[])?;
        Ok((next, outcome))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::build_config;
    use approx::assert_abs_diff_eq;

    fn quiet_params() -> SimParams {
        SimParams { noise_sigma: 0.0, ..SimParams::default() }
    }

    fn spawn_of(work: f64, ram_mb: f64, state_mb: f64) -> TaskSpawn {
        TaskSpawn { profile: 0, work, ram_mb, state_mb, slo_deadline_s: 4.0 * 300.0 }
    }

    fn place(
        state: &mut SimState,
        spec: &FederationSpec,
        params: &SimParams,
        at: &[(TaskId, HostId)],
    ) -> StepOutcome {
        let placement: BTreeMap<TaskId, HostId> = at.iter().copied().collect();
        state.step(spec, params, &placement, &MigrationDecision::new(), &[]).unwrap()
    }

    #[test]
    fn single_task_completes_exactly() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let id = state.spawn(0, &spawn_of(0.5, 500.0, 50.0));
        let out = place(&mut state, &spec, &params, &[(id, 0)]);
        assert_eq!(out.completed.len(), 1);
        assert_abs_diff_eq!(out.completed[0].response_s, 150.0, epsilon = 1e-9);
        assert!(out.completed[0].slo_ok);
        assert_abs_diff_eq!(out.art, 0.5, epsilon = 1e-12);
        assert_eq!(state.tasks[&id].status, TaskStatus::Done);
        // Host 0 busy half the interval, everything else idle.
        let expected = (2.5 + 4.5 * 0.5) * 300.0 + 7.0 * 2.5 * 300.0 + 8.0 * 3.0 * 300.0;
        assert_abs_diff_eq!(out.energy_j, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(state.host_feats[0][0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn two_tasks_share_the_processor() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let a = state.spawn(0, &spawn_of(0.3, 400.0, 50.0));
        let b = state.spawn(0, &spawn_of(0.6, 400.0, 50.0));
        let out = place(&mut state, &spec, &params, &[(a, 0), (b, 0)]);
        // Equal shares: a finishes 0.3 units at half rate after 180 s,
        // then b runs alone and finishes its last 0.3 at 270 s.
        let responses: BTreeMap<TaskId, f64> =
            out.completed.iter().map(|c| (c.task, c.response_s)).collect();
        assert_abs_diff_eq!(responses[&a], 180.0, epsilon = 1e-9);
        assert_abs_diff_eq!(responses[&b], 270.0, epsilon = 1e-9);
        // Work conservation: total executed equals rate times busy time.
        let exec_sum: f64 = out.task_exec.values().sum();
        assert_abs_diff_eq!(exec_sum, 0.9, epsilon = 1e-9);
    }

    #[test]
    fn migration_freezes_then_resumes() {
        let spec = build_config(2).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let long = state.spawn(0, &spawn_of(1.5, 500.0, 100.0));
        place(&mut state, &spec, &params, &[(long, 0)]);
        let mut m = MigrationDecision::new();
        m.insert(long, 4).unwrap();
        let out = state.step(&spec, &params, &BTreeMap::new(), &m, &[]).unwrap();
        assert_eq!(out.n_migrations, 1);
        // 100 MB over the WAN: 0.8 s transfer + 50 ms latency.
        assert_abs_diff_eq!(out.migration_total_s, 0.85, epsilon = 1e-12);
        assert_eq!(state.tasks[&long].host, Some(4));
        assert_eq!(state.tasks[&long].migrations, 1);
        assert!(out.o_t > 0.0);
    }

    #[test]
    fn idle_federation_energy_fraction() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let out =
            state.step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[]).unwrap();
        // All idle: AEC = sum(idle)/sum(max) = 44/120.
        assert_abs_diff_eq!(out.aec, 44.0 / 120.0, epsilon = 1e-12);
        assert_eq!(out.art, 0.0);
    }

    #[test]
    fn fitness_and_energy_model_arithmetic() {
        assert_abs_diff_eq!(fitness_value(0.1, 2, 16, 0.3, 0.5, 0.5), 0.3125, epsilon = 1e-12);
        assert_abs_diff_eq!(energy_model(3.0, 8.0, 0.5), 5.5, epsilon = 1e-12);
        assert_abs_diff_eq!(energy_model(3.0, 8.0, 7.0), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn cpu_hog_burns_power_then_crashes_host() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let fault = FaultEvent {
            fault_type: FaultType::CpuOverload,
            host: 0,
            start: 0,
            duration: 5,
            intensity: 1.0,
        };
        let out = state
            .step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[fault])
            .unwrap();
        // Hog drives host 0 to max power with no tasks at all.
        let idle_rest = 7.0 * 2.5 * 300.0 + 8.0 * 3.0 * 300.0;
        assert_abs_diff_eq!(out.energy_j, 7.0 * 300.0 + idle_rest, epsilon = 1e-9);
        assert_abs_diff_eq!(state.host_feats[0][0], 1.0, epsilon = 1e-12);
        assert!(out.crashed_hosts.is_empty());
        assert!(!state.host_live(0));
        // Second unresponsive interval crosses the crash threshold.
        let out =
            state.step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[]).unwrap();
        assert_eq!(out.crashed_hosts, vec![0]);
        // Single-host LEI: its broker is gone, the LEI is dead.
        assert!(!state.lei_live[0]);
    }

    #[test]
    fn ram_hog_thrashes_low_cpu_high_power() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let id = state.spawn(0, &spawn_of(1.0, 900.0, 100.0));
        let fault = FaultEvent {
            fault_type: FaultType::RamContention,
            host: 0,
            start: 0,
            duration: 5,
            intensity: 1.0,
        };
        let placement: BTreeMap<TaskId, HostId> = [(id, 0)].into_iter().collect();
        let out =
            state.step(&spec, &params, &placement, &MigrationDecision::new(), &[fault]).unwrap();
        // Working set 4996 MB against 4096 RAM: 900 MB swapped.
        let sf = 900.0 / 4996.0;
        let expected_rate = 1.0 / (1.0 + 9.0 * sf);
        assert!(out.completed.is_empty());
        assert_abs_diff_eq!(out.task_exec[&id], expected_rate, epsilon = 1e-9);
        // Measured CPU shows only productive cycles (the honeypot):
        assert_abs_diff_eq!(state.host_feats[0][0], expected_rate, epsilon = 1e-9);
        // while the host occupies the whole interval at max power.
        let idle_rest = 7.0 * 2.5 * 300.0 + 8.0 * 3.0 * 300.0;
        assert_abs_diff_eq!(out.energy_j, 7.0 * 300.0 + idle_rest, epsilon = 1e-9);
        assert!(state.host_feats[0][2] > 0.0, "swap feature visible");
        assert!(state.host_live(0), "thrashing host still limps along");
    }

    #[test]
    fn exhausted_host_crash_restarts_tasks_in_place() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let ids: Vec<TaskId> =
            (0..3).map(|_| state.spawn(0, &spawn_of(5.0, 1400.0, 250.0))).collect();
        let fault = FaultEvent {
            fault_type: FaultType::RamContention,
            host: 0,
            start: 0,
            duration: 6,
            intensity: 1.0,
        };
        let placement: BTreeMap<TaskId, HostId> = ids.iter().map(|&id| (id, 0)).collect();
        state.step(&spec, &params, &placement, &MigrationDecision::new(), &[fault]).unwrap();
        // 4096 + 4200 MB demanded of 8192 total: beyond RAM plus swap.
        assert!(!state.host_live(0));
        let out =
            state.step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[]).unwrap();
        assert_eq!(out.crashed_hosts, vec![0]);
        assert_eq!(out.task_restarts, 3);
        for id in &ids {
            assert_eq!(state.tasks[id].remaining_work, state.tasks[id].total_work);
            assert_eq!(state.tasks[id].restarts, 1);
            assert_eq!(state.tasks[id].host, Some(0));
        }
    }

    #[test]
    fn dead_lei_pools_tasks_until_revival() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let fault = FaultEvent {
            fault_type: FaultType::CpuOverload,
            host: 0,
            start: 0,
            duration: 3,
            intensity: 1.0,
        };
        state
            .step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[fault])
            .unwrap();
        let id = state.spawn(0, &spawn_of(0.5, 500.0, 50.0));
        assert_eq!(state.unplaced(), vec![(id, 0)]);
        let loads = state.host_loads(&spec);
        assert!(!loads[0].live);
        // Placement onto the dead host is rejected into the pool.
        let placement: BTreeMap<TaskId, HostId> = [(id, 0)].into_iter().collect();
        let out =
            state.step(&spec, &params, &placement, &MigrationDecision::new(), &[]).unwrap();
        assert_eq!(out.placement_failures, 1);
        assert_eq!(state.tasks[&id].status, TaskStatus::Failed);
        assert_eq!(state.unplaced(), vec![(id, 0)]);
        // Fault expires after t=2; the host recovers and accepts work.
        state.step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[]).unwrap();
        state.step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[]).unwrap();
        assert!(state.host_live(0));
        assert!(state.lei_live[0]);
        let placement: BTreeMap<TaskId, HostId> = [(id, 0)].into_iter().collect();
        let out =
            state.step(&spec, &params, &placement, &MigrationDecision::new(), &[]).unwrap();
        assert_eq!(out.placement_failures, 0);
        assert_eq!(out.completed.len(), 1);
    }

    #[test]
    fn rollout_leaves_state_untouched() {
        let spec = build_config(2).unwrap();
        let params = SimParams::default();
        let mut state = SimState::new(&spec, &params, 11).unwrap();
        let a = state.spawn(0, &spawn_of(2.0, 900.0, 160.0));
        let b = state.spawn(1, &spawn_of(2.0, 900.0, 160.0));
        place(&mut state, &spec, &params, &[(a, 0), (b, 4)]);
        let before = state.clone();
        let mut m = MigrationDecision::new();
        m.insert(a, 5).unwrap();
        let (next1, out1) = state.rollout(&spec, &params, &m).unwrap();
        let (next2, out2) = state.rollout(&spec, &params, &m).unwrap();
        assert_eq!(state, before);
        assert_eq!(out1, out2);
        assert_eq!(next1, next2);
        assert_eq!(next1.tasks[&a].host, Some(5));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = |seed: u64| {
            let spec = build_config(3).unwrap();
            let params = SimParams::default();
            let mut state = SimState::new(&spec, &params, seed).unwrap();
            let mut outs = Vec::new();
            for k in 0..4 {
                let id = state.spawn((k % 4) as usize, &spawn_of(1.0, 700.0, 100.0));
                let host = spec.leis[(k % 4) as usize].hosts[0];
                let placement: BTreeMap<TaskId, HostId> = [(id, host)].into_iter().collect();
                outs.push(
                    state
                        .step(&spec, &params, &placement, &MigrationDecision::new(), &[])
                        .unwrap(),
                );
            }
            (state, outs)
        };
        let (s1, o1) = run(42);
        let (s2, o2) = run(42);
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
    }

    #[test]
    fn migration_decision_rejects_duplicates() {
        let mut m = MigrationDecision::new();
        m.insert(1, 2).unwrap();
        assert!(m.insert(1, 3).is_err());
        m.set(1, 3);
        assert_eq!(m.get(1), Some(3));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn migration_validation_rejects_bad_targets() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let id = state.spawn(0, &spawn_of(3.0, 500.0, 50.0));
        place(&mut state, &spec, &params, &[(id, 0)]);
        let mut m = MigrationDecision::new();
        m.insert(id, 0).unwrap();
        // Already on host 0.
        assert!(state.validate_migration(&spec, &m).is_err());
        let mut m = MigrationDecision::new();
        m.insert(id, 99).unwrap();
        assert!(state.validate_migration(&spec, &m).is_err());
        let mut m = MigrationDecision::new();
        m.insert(77, 1).unwrap();
        assert!(state.validate_migration(&spec, &m).is_err());
    }

    #[test]
    fn work_is_conserved_across_interval_boundaries() {
        let spec = build_config(1).unwrap();
        let params = quiet_params();
        let mut state = SimState::new(&spec, &params, 7).unwrap();
        let id = state.spawn(0, &spawn_of(2.5, 500.0, 50.0));
        let mut executed = 0.0;
        let out = place(&mut state, &spec, &params, &[(id, 0)]);
        executed += out.task_exec.get(&id).copied().unwrap_or(0.0);
        for _ in 0..3 {
            let out = state
                .step(&spec, &params, &BTreeMap::new(), &MigrationDecision::new(), &[])
                .unwrap();
            executed += out.task_exec.get(&id).copied().unwrap_or(0.0);
        }
        assert_eq!(state.tasks[&id].status, TaskStatus::Done);
        assert_abs_diff_eq!(executed, 2.5, epsilon = 1e-9);
        assert_abs_diff_eq!(state.tasks[&id].response_s.unwrap(), 750.0, epsilon = 1e-9);
    }
}
