//! Seeded workload generation: bag-of-tasks arrivals over seven
//! application profiles, fault event injection, and the pluggable
//! placement schedulers for new tasks.

use crate::error::{Error, Result};
use crate::federation::{HostId, LeiId};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub name: String,
    /// Expected work in host-interval units (a 1.0-capacity host alone
    /// finishes `mean_work` of it per interval).
    pub mean_work: f64,
    /// Uniform half-width around the mean, as a fraction.
    pub dispersion: f64,
    pub ram_mb: f64,
    pub state_mb: f64,
    pub heavy: bool,
}

fn profile(name: &str, mean_work: f64, ram_mb: f64, state_mb: f64, heavy: bool) -> AppProfile {
    AppProfile { name: name.to_string(), mean_work, dispersion: 0.2, ram_mb, state_mb, heavy }
}

/// The seven inference applications: three heavy, four light.
pub fn default_profiles() -> Vec<AppProfile> {
    vec![
        profile("ResNet18", 1.6, 900.0, 160.0, true),
        profile("ResNet34", 2.0, 1100.0, 200.0, true),
        profile("ResNext32x4d", 2.4, 1400.0, 250.0, true),
        profile("SqueezeNet", 0.35, 260.0, 45.0, false),
        profile("GoogleNet", 0.6, 420.0, 65.0, false),
        profile("MobileNetV2", 0.45, 330.0, 55.0, false),
        profile("MnasNet", 0.5, 360.0, 60.0, false),
    ]
}

/// Heavy profiles must strictly dominate light ones on work and RAM.
pub fn validate_profiles(profiles: &[AppProfile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::contract("profile table is empty"));
    }
    for p in profiles {
        if p.mean_work <= 0.0 || p.ram_mb <= 0.0 || p.state_mb <= 0.0 {
            return Err(Error::contract(format!("profile {} has non-positive fields", p.name)));
        }
        if !(0.0..1.0).contains(&p.dispersion) {
            return Err(Error::contract(format!("profile {} dispersion out of [0,1)", p.name)));
        }
    }
    let heavy: Vec<&AppProfile> = profiles.iter().filter(|p| p.heavy).collect();
    let light: Vec<&AppProfile> = profiles.iter().filter(|p| !p.heavy).collect();
    if !heavy.is_empty() && !light.is_empty() {
        let min_heavy_work = heavy.iter().map(|p| p.mean_work).fold(f64::INFINITY, f64::min);
        let max_light_work = light.iter().map(|p| p.mean_work).fold(0.0, f64::max);
        if min_heavy_work <= max_light_work {
            return Err(Error::contract(
                "heavy profiles must have strictly larger mean work than light ones",
            ));
        }
        let min_heavy_ram = heavy.iter().map(|p| p.ram_mb).fold(f64::INFINITY, f64::min);
        let max_light_ram = light.iter().map(|p| p.ram_mb).fold(0.0, f64::max);
        if min_heavy_ram <= max_light_ram {
            return Err(Error::contract(
                "heavy profiles must have strictly larger RAM demand than light ones",
            ));
        }
    }
    Ok(())
}

/// A sampled task before it enters the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpawn {
    pub profile: usize,
    pub work: f64,
    pub ram_mb: f64,
    pub state_mb: f64,
    pub slo_deadline_s: f64,
}

/// Draw one interval's arrivals: count ~ Poisson(rate), profile uniform,
/// work jittered by the profile dispersion, SLO deadline a multiple of
/// the profile's solo service time.
pub fn sample_arrivals<R: Rng>(
    rng: &mut R,
    profiles: &[AppProfile],
    rate: f64,
    slo_multiplier: f64,
    interval_s: f64,
) -> Result<Vec<TaskSpawn>> {
    if rate < 0.0 || !rate.is_finite() {
        return Err(Error::contract(format!("arrival rate must be >= 0, got {rate}")));
    }
    if profiles.is_empty() {
        return Err(Error::contract("no profiles to sample from"));
    }
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    let poisson = Poisson::new(rate)
        .map_err(|e| Error::contract(format!("poisson rate invalid: {e}")))?;
    let count = poisson.sample(rng) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = rng.random_range(0..profiles.len());
        let p = &profiles[idx];
        let jitter = 1.0 + p.dispersion * (2.0 * rng.random::<f64>() - 1.0);
        out.push(TaskSpawn {
            profile: idx,
            work: p.mean_work * jitter,
            ram_mb: p.ram_mb,
            state_mb: p.state_mb,
            slo_deadline_s: slo_multiplier * p.mean_work * interval_s,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    CpuOverload,
    RamContention,
    DiskAttack,
    DdosAttack,
}

impl FaultType {
    pub const ALL: [FaultType; 4] = [
        FaultType::CpuOverload,
        FaultType::RamContention,
        FaultType::DiskAttack,
        FaultType::DdosAttack,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FaultType::CpuOverload => "cpu_overload",
            FaultType::RamContention => "ram_contention",
            FaultType::DiskAttack => "disk_attack",
            FaultType::DdosAttack => "ddos_attack",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub fault_type: FaultType,
    pub host: HostId,
    pub start: u64,
    pub duration: u64,
    pub intensity: f64,
}

impl FaultEvent {
    pub fn active_at(&self, t: u64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultModel {
    /// Expected events per 100-interval run.
    pub lambda_per_100: f64,
    pub min_duration: u64,
    pub max_duration: u64,
    pub min_intensity: f64,
    pub max_intensity: f64,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel {
            lambda_per_100: 5.0,
            min_duration: 3,
            max_duration: 8,
            min_intensity: 0.9,
            max_intensity: 1.0,
        }
    }
}

/// Pre-draw the whole run's fault events, sorted by (start, host).
/// Ground truth is exactly the active extents of the returned events.
pub fn generate_fault_events<R: Rng>(
    rng: &mut R,
    n_hosts: usize,
    horizon: u64,
    model: &FaultModel,
) -> Result<Vec<FaultEvent>> {
    if n_hosts == 0 || horizon == 0 {
        return Err(Error::contract("fault generation needs hosts and a horizon"));
    }
    if model.lambda_per_100 < 0.0
        || model.min_duration == 0
        || model.max_duration < model.min_duration
        || !(0.0..=1.0).contains(&model.min_intensity)
        || model.max_intensity < model.min_intensity
        || model.max_intensity > 1.0
    {
        return Err(Error::contract("invalid fault model parameters"));
    }
    let expected = model.lambda_per_100 * horizon as f64 / 100.0;
    if expected == 0.0 {
        return Ok(Vec::new());
    }
    let poisson = Poisson::new(expected)
        .map_err(|e| Error::contract(format!("poisson rate invalid: {e}")))?;
    let count = poisson.sample(rng) as usize;
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let fault_type = FaultType::ALL[rng.random_range(0..FaultType::ALL.len())];
        let host = rng.random_range(0..n_hosts);
        let start = rng.random_range(0..horizon);
        let duration = rng.random_range(model.min_duration..=model.max_duration);
        let intensity = model.min_intensity
            + (model.max_intensity - model.min_intensity) * rng.random::<f64>();
        events.push(FaultEvent { fault_type, host, start, duration, intensity });
    }
    events.sort_by_key(|e| (e.start, e.host));
    Ok(events)
}

/// Ground-truth faulty (host, interval) pairs implied by an event list,
/// clipped to the horizon.
pub fn ground_truth_extents(events: &[FaultEvent], horizon: u64) -> Vec<(HostId, u64)> {
    let mut out = Vec::new();
    for e in events {
        for t in e.start..(e.start + e.duration).min(horizon) {
            out.push((e.host, t));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerPolicy {
    Random,
    LeastUtil,
}

/// A host eligible to receive new tasks, with its last measured CPU
/// utilization.
#[derive(Debug, Clone, Copy)]
pub struct HostLoad {
    pub host: HostId,
    pub lei: LeiId,
    pub cpu_util: f64,
    pub live: bool,
}

/// Place each task on a host of its LEI. `least_util` takes the minimal
/// measured CPU utilization (ties by lowest id); `random` draws
/// uniformly from the LEI's live hosts. Tasks whose LEI has no live host
/// are left unplaced (the caller pools them).
pub fn schedule<R: Rng>(
    to_place: &[(u64, LeiId)],
    hosts: &[HostLoad],
    policy: SchedulerPolicy,
    rng: &mut R,
) -> Vec<(u64, Option<HostId>)> {
    let mut out = Vec::with_capacity(to_place.len());
    for &(task, lei) in to_place {
        let candidates: Vec<&HostLoad> =
            hosts.iter().filter(|h| h.lei == lei && h.live).collect();
        let choice = match policy {
            SchedulerPolicy::LeastUtil => candidates
                .iter()
                .min_by(|a, b| {
                    a.cpu_util
                        .partial_cmp(&b.cpu_util)
                        .expect("finite utils")
                        .then(a.host.cmp(&b.host))
                })
                .map(|h| h.host),
            SchedulerPolicy::Random => {
                if candidates.is_empty() {
                    None
                } else {
                    Some(candidates[rng.random_range(0..candidates.len())].host)
                }
            }
        };
        out.push((task, choice));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn default_profiles_validate() {
        let p = default_profiles();
        assert_eq!(p.len(), 7);
        assert_eq!(p.iter().filter(|p| p.heavy).count(), 3);
        validate_profiles(&p).unwrap();
    }

    #[test]
    fn validate_rejects_inverted_ordering() {
        let mut p = default_profiles();
        p[0].mean_work = 0.1;
        assert!(validate_profiles(&p).is_err());
    }

    #[test]
    fn zero_rate_gives_no_arrivals() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let arr = sample_arrivals(&mut rng, &default_profiles(), 0.0, 4.0, 300.0).unwrap();
        assert!(arr.is_empty());
    }

    #[test]
    fn arrival_rate_matches_poisson_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let profiles = default_profiles();
        let n = 100_000;
        let mut total = 0usize;
        for _ in 0..n {
            total += sample_arrivals(&mut rng, &profiles, 1.2, 4.0, 300.0).unwrap().len();
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 1.2).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn profiles_drawn_uniformly() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let profiles = default_profiles();
        let mut counts = vec![0usize; profiles.len()];
        let mut total = 0usize;
        while total < 100_000 {
            for s in sample_arrivals(&mut rng, &profiles, 1.2, 4.0, 300.0).unwrap() {
                counts[s.profile] += 1;
                total += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / total as f64;
            assert!((freq - 1.0 / 7.0).abs() < 0.01, "profile {i} freq {freq}");
        }
    }

    #[test]
    fn fault_events_respect_model_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let model = FaultModel::default();
        let events = generate_fault_events(&mut rng, 16, 100, &model).unwrap();
        for e in &events {
            assert!(e.host < 16);
            assert!(e.start < 100);
            assert!((3..=8).contains(&e.duration));
            assert!((0.9..=1.0).contains(&e.intensity));
        }
    }

    #[test]
    fn zero_lambda_no_faults() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let model = FaultModel { lambda_per_100: 0.0, ..FaultModel::default() };
        assert!(generate_fault_events(&mut rng, 16, 100, &model).unwrap().is_empty());
    }

    #[test]
    fn ground_truth_matches_extents() {
        let events = vec![
            FaultEvent {
                fault_type: FaultType::DdosAttack,
                host: 3,
                start: 10,
                duration: 3,
                intensity: 0.95,
            },
            FaultEvent {
                fault_type: FaultType::CpuOverload,
                host: 3,
                start: 11,
                duration: 2,
                intensity: 0.92,
            },
        ];
        let truth = ground_truth_extents(&events, 100);
        assert_eq!(truth, vec![(3, 10), (3, 11), (3, 12)]);
        // Events are clipped at the horizon.
        let truth = ground_truth_extents(&events, 12);
        assert_eq!(truth, vec![(3, 10), (3, 11)]);
    }

    #[test]
    fn least_util_argmin_with_tie_rule() {
        let hosts = vec![
            HostLoad { host: 0, lei: 0, cpu_util: 0.9, live: true },
            HostLoad { host: 1, lei: 0, cpu_util: 0.1, live: true },
            HostLoad { host: 2, lei: 0, cpu_util: 0.1, live: true },
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let placed = schedule(&[(7, 0)], &hosts, SchedulerPolicy::LeastUtil, &mut rng);
        assert_eq!(placed, vec![(7, Some(1))]);
    }

    #[test]
    fn dead_hosts_excluded_and_random_deterministic() {
        let hosts = vec![
            HostLoad { host: 0, lei: 0, cpu_util: 0.0, live: false },
            HostLoad { host: 1, lei: 0, cpu_util: 0.5, live: true },
            HostLoad { host: 2, lei: 1, cpu_util: 0.5, live: true },
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let placed = schedule(&[(1, 0)], &hosts, SchedulerPolicy::LeastUtil, &mut rng);
        assert_eq!(placed, vec![(1, Some(1))]);

        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            schedule(&[(1, 0), (2, 1), (3, 0)], &hosts, SchedulerPolicy::Random, &mut rng)
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn lei_without_live_hosts_leaves_unplaced() {
        let hosts = vec![HostLoad { host: 0, lei: 0, cpu_util: 0.0, live: false }];
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let placed = schedule(&[(1, 0)], &hosts, SchedulerPolicy::LeastUtil, &mut rng);
        assert_eq!(placed, vec![(1, None)]);
    }
}
