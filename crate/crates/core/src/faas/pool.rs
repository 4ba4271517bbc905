use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::FaasError;
use crate::sim::Millis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Concurrent requests one container serves.
    pub concurrency: u32,
    pub cold_start_ms: Millis,
    pub vcpu_per_container: u32,
    /// Hard cap on containers (the vcpu budget of the hosting nodes).
    pub max_containers: u32,
    /// Requests that wait longer than this before starting fail with a timeout.
    pub deadline_ms: Millis,
    pub autoscale_tick_ms: Millis,
    /// Target busy fraction of slots the reactive scaler aims for.
    pub target_utilization: f64,
    /// Idle time after which a container above the floor is reclaimed.
    pub idle_timeout_ms: Millis,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            concurrency: 10,
            cold_start_ms: 500,
            vcpu_per_container: 1,
            max_containers: 64,
            deadline_ms: 30_000,
            autoscale_tick_ms: 2_000,
            target_utilization: 0.7,
            idle_timeout_ms: 30_000,
        }
    }
}

/// Warm containers needed so that requests arriving at `rate_rps`, each
/// occupying a slot for `service_ms`, never wait: `ceil(A × S / c)`.
pub fn warm_containers_for_rate(rate_rps: f64, service_ms: f64, concurrency: u32) -> u32 {
    if rate_rps <= 0.0 {
        return 0;
    }
    let slots = rate_rps * service_ms / 1000.0;
    // Guard against float noise pushing an exact ratio over an integer.
    (slots / concurrency as f64 - 1e-9).ceil().max(1.0) as u32
}

/// Integer service time of one request when `pods` containers share a
/// backend that slows each by `contention` per extra container.
pub fn contended_service_ms(service_ms: f64, contention: f64, pods: u32) -> f64 {
    let extra = pods.saturating_sub(1) as f64;
    (service_ms * (1.0 + contention * extra)).round().max(1.0)
}

/// Like [`warm_containers_for_rate`], but the service time grows with the
/// pool. Smallest `N ≤ limit` that keeps up; `limit + 1` when none does.
pub fn warm_containers_under_contention(
    rate_rps: f64,
    service_ms: f64,
    concurrency: u32,
    contention: f64,
    limit: u32,
) -> u32 {
    let base = warm_containers_for_rate(rate_rps, service_ms, concurrency);
    if contention <= 0.0 || base == 0 {
        return base;
    }
    (base..=limit)
        .find(|&n| {
            warm_containers_for_rate(
                rate_rps,
                contended_service_ms(service_ms, contention, n),
                concurrency,
            ) <= n
        })
        .unwrap_or(limit + 1)
}

pub type JobId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Job {
    id: JobId,
    arrival: Millis,
    service_ms: Millis,
}

#[derive(Debug, Clone)]
struct Container {
    ready_at: Millis,
    busy: u32,
    idle_since: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolEffect {
    /// The job occupies a slot from now until `done_at`; the owner must call
    /// [`ContainerPool::complete`] then.
    Started {
        job: JobId,
        done_at: Millis,
        waited_ms: Millis,
        cold: bool,
    },
    TimedOut {
        job: JobId,
        waited_ms: Millis,
    },
    /// A container finishes booting at this time; call [`ContainerPool::wake`].
    WakeAt(Millis),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub submitted: u64,
    pub started: u64,
    pub completed: u64,
    pub timed_out: u64,
    pub cold_starts: u64,
    pub containers_launched: u64,
    /// Integral of live containers over time, in container-milliseconds.
    pub container_ms: u64,
    pub peak_containers: u32,
}

/// Containers serving one function: a FIFO of waiting requests, warm and
/// booting containers, a reactive autoscaler and an optional warm floor set
/// from a rate guarantee.
#[derive(Debug, Clone)]
pub struct ContainerPool {
    cfg: PoolConfig,
    containers: Vec<Container>,
    queue: VecDeque<Job>,
    floor: u32,
    stats: PoolStats,
    last_account: Millis,
    load_integral: u128,
    window_start: Millis,
    last_activity: Millis,
    in_flight: u32,
}

impl ContainerPool {
    pub fn new(cfg: PoolConfig) -> Self {
        Self {
            cfg,
            containers: Vec::new(),
            queue: VecDeque::new(),
            floor: 0,
            stats: PoolStats::default(),
            last_account: 0,
            load_integral: 0,
            window_start: 0,
            last_activity: 0,
            in_flight: 0,
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &PoolStats {
        &self.stats
    }

    pub fn floor(&self) -> u32 {
        self.floor
    }

    pub fn containers(&self) -> u32 {
        self.containers.len() as u32
    }

    pub fn warm(&self, now: Millis) -> u32 {
        self.containers.iter().filter(|c| c.ready_at <= now).count() as u32
    }

    pub fn busy_slots(&self) -> u32 {
        self.in_flight
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    fn account(&mut self, now: Millis) {
        if now > self.last_account {
            let dt = (now - self.last_account) as u128;
            self.load_integral += dt * (self.in_flight as u128 + self.queue.len() as u128);
            self.stats.container_ms += (now - self.last_account) * self.containers.len() as u64;
            self.last_account = now;
        }
    }

    fn launch(&mut self, now: Millis, ready_at: Millis) -> Option<PoolEffect> {
        if self.containers.len() as u32 >= self.cfg.max_containers {
            return None;
        }
        self.containers.push(Container {
            ready_at,
            busy: 0,
            idle_since: ready_at,
        });
        self.stats.containers_launched += 1;
        self.stats.peak_containers = self.stats.peak_containers.max(self.containers.len() as u32);
        (ready_at > now).then_some(PoolEffect::WakeAt(ready_at))
    }

    /// Reserves warm capacity for a guaranteed rate. The containers are ready
    /// immediately and the autoscaler never goes below them.
    pub fn provision_for_rate(
        &mut self,
        now: Millis,
        rate_rps: f64,
        service_ms: f64,
    ) -> Result<u32, FaasError> {
        let need = warm_containers_for_rate(rate_rps, service_ms, self.cfg.concurrency);
        if need > self.cfg.max_containers {
            return Err(FaasError::CapacityExceeded {
                required_vcpu: need as u64 * self.cfg.vcpu_per_container as u64,
                available_vcpu: self.cfg.max_containers as u64 * self.cfg.vcpu_per_container as u64,
            });
        }
        self.account(now);
        self.floor = need;
        let have = self.containers.len() as u32;
        for _ in have..need {
            self.launch(now, now);
        }
        Ok(need)
    }

    /// Raises the floor by `extra` containers.
    pub fn raise_floor(&mut self, now: Millis, extra: u32) -> u32 {
        self.account(now);
        self.floor = (self.floor + extra).min(self.cfg.max_containers);
        let have = self.containers.len() as u32;
        for _ in have..self.floor {
            self.launch(now, now);
        }
        self.floor
    }

    fn free_slot(&self, now: Millis) -> Option<usize> {
        // Fill the most loaded ready container first so idle ones can drain.
        self.containers
            .iter()
            .enumerate()
            .filter(|(_, c)| c.ready_at <= now && c.busy < self.cfg.concurrency)
            .max_by_key(|(i, c)| (c.busy, std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
    }

    fn start(&mut self, now: Millis, slot: usize, job: Job) -> PoolEffect {
        let waited_ms = now - job.arrival;
        if waited_ms > self.cfg.deadline_ms {
            self.stats.timed_out += 1;
            return PoolEffect::TimedOut {
                job: job.id,
                waited_ms,
            };
        }
        let c = &mut self.containers[slot];
        let cold = waited_ms > 0 && c.ready_at > job.arrival;
        c.busy += 1;
        self.in_flight += 1;
        self.stats.started += 1;
        if cold {
            self.stats.cold_starts += 1;
        }
        self.last_activity = now;
        PoolEffect::Started {
            job: job.id,
            done_at: now + job.service_ms,
            waited_ms,
            cold,
        }
    }

    fn drain(&mut self, now: Millis, out: &mut Vec<PoolEffect>) {
        while let Some(&job) = self.queue.front() {
            if now - job.arrival > self.cfg.deadline_ms {
                self.queue.pop_front();
                self.stats.timed_out += 1;
                out.push(PoolEffect::TimedOut {
                    job: job.id,
                    waited_ms: now - job.arrival,
                });
                continue;
            }
            let Some(slot) = self.free_slot(now) else {
                break;
            };
            self.queue.pop_front();
            let eff = self.start(now, slot, job);
            out.push(eff);
        }
    }

    pub fn submit(&mut self, now: Millis, job: JobId, service_ms: Millis) -> Vec<PoolEffect> {
        self.account(now);
        self.stats.submitted += 1;
        self.last_activity = now;
        let job = Job {
            id: job,
            arrival: now,
            service_ms,
        };
        let mut out = Vec::new();
        if self.queue.is_empty() {
            if let Some(slot) = self.free_slot(now) {
                out.push(self.start(now, slot, job));
                return out;
            }
        }
        self.queue.push_back(job);
        // Scale from zero right away; otherwise wait for the autoscaler.
        if self.containers.is_empty() {
            if let Some(e) = self.launch(now, now + self.cfg.cold_start_ms) {
                out.push(e);
            }
        }
        out
    }

    /// Frees the slot held by a finished job and starts queued work.
    pub fn complete(&mut self, now: Millis, _job: JobId) -> Vec<PoolEffect> {
        self.account(now);
        self.stats.completed += 1;
        self.in_flight = self.in_flight.saturating_sub(1);
        // Slots are fungible; release from the busiest ready container.
        if let Some(c) = self
            .containers
            .iter_mut()
            .filter(|c| c.busy > 0)
            .max_by_key(|c| c.busy)
        {
            c.busy -= 1;
            if c.busy == 0 {
                c.idle_since = now;
            }
        }
        self.last_activity = now;
        let mut out = Vec::new();
        self.drain(now, &mut out);
        out
    }

    /// Drops a running job without completing it (its host crashed).
    pub fn abandon(&mut self, now: Millis, job: JobId) -> Vec<PoolEffect> {
        let out = self.complete(now, job);
        self.stats.completed -= 1;
        out
    }

    /// Called when a booting container becomes ready.
    pub fn wake(&mut self, now: Millis) -> Vec<PoolEffect> {
        self.account(now);
        let mut out = Vec::new();
        self.drain(now, &mut out);
        out
    }

    /// Reactive autoscaler step; call every `autoscale_tick_ms`.
    pub fn tick(&mut self, now: Millis) -> Vec<PoolEffect> {
        self.account(now);
        let window = now.saturating_sub(self.window_start).max(1);
        let avg_load = self.load_integral as f64 / window as f64;
        self.load_integral = 0;
        self.window_start = now;

        let per_container = self.cfg.concurrency as f64 * self.cfg.target_utilization;
        let load_now = (self.in_flight as usize + self.queue.len()) as f64;
        let desired = (avg_load.max(load_now) / per_container).ceil() as u32;
        let desired = desired.max(self.floor).min(self.cfg.max_containers);

        let mut out = Vec::new();
        let have = self.containers.len() as u32;
        if desired > have {
            for _ in have..desired {
                if let Some(e) = self.launch(now, now + self.cfg.cold_start_ms) {
                    out.push(e);
                }
            }
        } else if desired < have {
            let mut excess = have - desired;
            let idle_timeout = self.cfg.idle_timeout_ms;
            self.containers.retain(|c| {
                if excess > 0
                    && c.busy == 0
                    && c.ready_at <= now
                    && now - c.idle_since >= idle_timeout
                {
                    excess -= 1;
                    false
                } else {
                    true
                }
            });
        }
        self.drain(now, &mut out);
        out
    }

    /// Timeouts for work still queued at the end of a run.
    pub fn expire_all(&mut self, now: Millis) -> u64 {
        let expired = self
            .queue
            .iter()
            .filter(|j| now - j.arrival > self.cfg.deadline_ms)
            .count() as u64;
        self.stats.timed_out += expired;
        self.queue
            .retain(|j| now - j.arrival <= self.cfg.deadline_ms);
        expired
    }

    pub fn finish(&mut self, now: Millis) {
        self.account(now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PoolConfig {
        PoolConfig {
            concurrency: 10,
            cold_start_ms: 500,
            ..PoolConfig::default()
        }
    }

    #[test]
    fn rate_formula() {
        assert_eq!(warm_containers_for_rate(100.0, 50.0, 10), 1);
        assert_eq!(warm_containers_for_rate(4000.0, 5.0, 10), 2);
        assert_eq!(warm_containers_for_rate(0.0, 5.0, 10), 0);
        assert_eq!(warm_containers_for_rate(20.0, 500.0, 1), 10);
        assert_eq!(warm_containers_for_rate(21.0, 500.0, 1), 11);
    }

    #[test]
    fn contention_sizing() {
        // 13 pods: 31 ms each, 130 slots, ~4194 rps. 12 pods: 30.5 -> 31 ms,
        // 120 slots, ~3871 rps.
        assert_eq!(
            warm_containers_under_contention(4000.0, 25.0, 10, 0.02, 64),
            13
        );
        assert_eq!(
            warm_containers_under_contention(4000.0, 25.0, 10, 0.0, 64),
            10
        );
        // Capacity saturates near c/(S k) = 20000 rps.
        assert_eq!(
            warm_containers_under_contention(30_000.0, 25.0, 10, 0.02, 64),
            65
        );
    }

    #[test]
    fn warm_slot_starts_immediately() {
        let mut p = ContainerPool::new(cfg());
        p.provision_for_rate(0, 1.0, 10.0).unwrap();
        let eff = p.submit(0, 1, 10);
        assert_eq!(
            eff,
            vec![PoolEffect::Started {
                job: 1,
                done_at: 10,
                waited_ms: 0,
                cold: false
            }]
        );
    }

    #[test]
    fn cold_start_adds_boot_delay() {
        let mut p = ContainerPool::new(cfg());
        assert_eq!(p.submit(0, 1, 10), vec![PoolEffect::WakeAt(500)]);
        let eff = p.wake(500);
        assert_eq!(
            eff,
            vec![PoolEffect::Started {
                job: 1,
                done_at: 510,
                waited_ms: 500,
                cold: true
            }]
        );
        assert_eq!(p.stats().cold_starts, 1);
    }

    #[test]
    fn capacity_exceeded() {
        let mut p = ContainerPool::new(PoolConfig {
            max_containers: 2,
            ..cfg()
        });
        assert!(matches!(
            p.provision_for_rate(0, 1000.0, 100.0),
            Err(FaasError::CapacityExceeded { .. })
        ));
        assert_eq!(p.provision_for_rate(0, 0.0, 100.0).unwrap(), 0);
    }

    #[test]
    fn idle_pool_scales_to_zero_without_floor() {
        let mut p = ContainerPool::new(cfg());
        p.submit(0, 1, 10);
        p.wake(500);
        p.complete(510, 1);
        let mut t = 0;
        while t <= 60_000 {
            p.tick(t);
            t += 2_000;
        }
        assert_eq!(p.containers(), 0);
    }

    #[test]
    fn floor_survives_idle() {
        let mut p = ContainerPool::new(cfg());
        p.provision_for_rate(0, 4000.0, 5.0).unwrap();
        let mut t = 0;
        while t <= 120_000 {
            p.tick(t);
            t += 2_000;
        }
        assert_eq!(p.containers(), 2);
        assert_eq!(p.warm(t), 2);
    }

    #[test]
    fn accounting_conserves() {
        let mut p = ContainerPool::new(PoolConfig {
            concurrency: 1,
            max_containers: 2,
            deadline_ms: 50,
            ..cfg()
        });
        p.provision_for_rate(0, 1.0, 10.0).unwrap();
        let mut running = Vec::new();
        for id in 0..5 {
            for e in p.submit(0, id, 100) {
                if let PoolEffect::Started { job, .. } = e {
                    running.push(job)
                }
            }
        }
        let s = p.stats().clone();
        assert_eq!(s.submitted, s.started + s.timed_out + p.queued() as u64);
        for e in p.complete(100, running[0]) {
            assert!(matches!(
                e,
                PoolEffect::TimedOut { .. } | PoolEffect::Started { .. }
            ));
        }
        let s = p.stats().clone();
        assert_eq!(s.started, s.completed + p.busy_slots() as u64);
        assert_eq!(s.submitted, s.started + s.timed_out + p.queued() as u64);
        assert!(s.timed_out > 0);
    }
}
