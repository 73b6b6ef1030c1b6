// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{
    AbortReason, CCAction, CommitOutcome, Engine, EngineError, ExecStats, Key, OpOutcome, Tick, TxnId, TxnOp,
    TxnStatus, WorkloadGenerator, WorkloadSpec,
};
use crate::cc_adaptive::{observe, SystemState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyHeat {
    Hot,
    Cold,
}

/// Chooses the concurrency action for each operation.
pub trait ActionPolicy: Sync {
    fn action(&self, state: &SystemState, op: &TxnOp, heat: KeyHeat) -> CCAction;
}

impl ActionPolicy for CCAction {
    fn action(&self, _: &SystemState, _: &TxnOp, _: KeyHeat) -> CCAction {
        *self
    }
}

/// Monitor state carried across windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowContext {
    /// State the policy sees until the first monitor refresh.
    pub state: SystemState,
    pub hot: BTreeSet<Key>,
    /// Size of the hot-key set.
    pub hot_keys: usize,
    /// Ticks between monitor refreshes inside a window.
    pub monitor_interval: Tick,
}

impl WindowContext {
    pub fn new(hot_keys: usize, monitor_interval: Tick) -> WindowContext {
        WindowContext {
            state: SystemState::default(),
            hot: BTreeSet::new(),
            hot_keys,
            monitor_interval: monitor_interval.max(1),
        }
    }
}

impl Default for WindowContext {
    fn default() -> Self {
        WindowContext::new(8, 50)
    }
}

struct Running {
    id: TxnId,
    ops: Vec<TxnOp>,
    ready_at: Tick,
    conflicted: bool,
}

enum Slot {
    Idle { until: Tick },
    Busy(Running),
}

impl Engine {
    /// Drive a generated workload for `duration` ticks under `policy`.
    ///
    /// Aborted transactions restart after the configured backoff as new
    /// attempts. Transactions still in flight at the end are discarded
    /// without being counted.
    pub fn run_window(
        &mut self,
        workload: &WorkloadSpec,
        policy: &dyn ActionPolicy,
        duration: Tick,
        ctx: &mut WindowContext,
    ) -> Result<ExecStats, EngineError> {
        let active = self.active_count();
        if active > 0 {
            return Err(EngineError::NotQuiescent(active));
        }
        let mut generator = WorkloadGenerator::new(workload);
        let mut queue: VecDeque<Vec<TxnOp>> = VecDeque::new();
        let mut slots: Vec<Slot> = (0..workload.workers).map(|_| Slot::Idle { until: 0 }).collect();
        let mut stats = ExecStats::default();
        let mut interval = ExecStats::default();
        let mut access_counts: BTreeMap<Key, u64> = BTreeMap::new();
        let start = self.now;
        let backoff = self.config.restart_backoff;

        for step in 0..duration {
            let t = start + step;
            self.now = t;
            queue.extend(generator.arrivals(step));

            let n = slots.len();
            for i in 0..n {
                let w = (i + step as usize) % n;
                if let Slot::Idle { until } = slots[w] {
                    if until > t {
                        continue;
                    }
                    let Some(ops) = queue.pop_front() else { continue };
                    let id = self.begin(ops.clone());
                    interval.submitted_count += 1;
                    slots[w] = Slot::Busy(Running { id, ops, ready_at: t, conflicted: false });
                }
                let Slot::Busy(run) = &mut slots[w] else { unreachable!() };

                if let Some(TxnStatus::Aborted(_)) = self.status(run.id) {
                    // Killed as a deadlock victim by another worker.
                    interval.aborted_count += 1;
                    self.restart(run, t + backoff, &mut interval);
                    continue;
                }
                if run.ready_at > t {
                    continue;
                }

                let next = self.txn(run.id).and_then(|x| x.next_op().copied());
                match next {
                    Some(op) => {
                        let heat = if ctx.hot.contains(&op.key()) { KeyHeat::Hot } else { KeyHeat::Cold };
                        let action = policy.action(&ctx.state, &op, heat);
                        run.conflicted |= self.access_conflicts(run.id, &op);
                        match self.execute_op(run.id, action) {
                            Ok(OpOutcome::Blocked) => interval.total_lock_wait += 1,
                            Ok(_) => {
                                interval.op_count += 1;
                                if action == CCAction::LockImmediate {
                                    interval.locked_op_count += 1;
                                }
                                if std::mem::take(&mut run.conflicted) {
                                    interval.conflict_op_count += 1;
                                }
                                *access_counts.entry(op.key()).or_default() += 1;
                                let cost = self.config.op_ticks
                                    + if action == CCAction::LockImmediate { self.config.lock_overhead } else { 0 };
                                run.ready_at = t + cost;
                            }
                            Err(EngineError::Deadlock(_)) => {
                                interval.aborted_count += 1;
                                self.restart(run, t + backoff, &mut interval);
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    None => match self.validate_and_commit(run.id)? {
                        CommitOutcome::Committed => {
                            interval.committed_count += 1;
                            self.forget(run.id);
                            slots[w] = Slot::Idle { until: t + self.config.commit_ticks };
                        }
                        CommitOutcome::Aborted(_) => {
                            interval.aborted_count += 1;
                            self.restart(run, t + self.config.commit_ticks + backoff, &mut interval);
                        }
                    },
                }
            }

            if (step + 1) % ctx.monitor_interval == 0 {
                self.refresh_monitor(ctx, &interval, &mut access_counts);
                stats.merge(&interval);
                interval = ExecStats::default();
            }
        }
        stats.merge(&interval);
        self.now = start + duration;

        for slot in slots {
            if let Slot::Busy(run) = slot {
                if self.status(run.id) == Some(TxnStatus::Active) {
                    self.abort(run.id, AbortReason::WindowEnd)?;
                }
                self.forget(run.id);
            }
        }
        debug_assert!(self.locks.is_empty());
        Ok(stats)
    }

    fn restart(&mut self, run: &mut Running, ready_at: Tick, interval: &mut ExecStats) {
        if self.status(run.id) == Some(TxnStatus::Active) {
            // Only reachable for victims already marked; keep the table clean.
            let _ = self.abort(run.id, AbortReason::User);
        }
        self.forget(run.id);
        run.id = self.begin(run.ops.clone());
        run.ready_at = ready_at;
        run.conflicted = false;
        interval.submitted_count += 1;
    }

    fn refresh_monitor(&self, ctx: &mut WindowContext, interval: &ExecStats, access_counts: &mut BTreeMap<Key, u64>) {
        if let Ok(state) = observe(interval, ctx.monitor_interval as f64) {
            ctx.state = state;
        }
        let mut ranked: Vec<(Key, u64)> = std::mem::take(access_counts).into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ctx.hot = ranked.into_iter().take(ctx.hot_keys).map(|(k, _)| k).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineConfig;

    fn run(spec: &WorkloadSpec, action: CCAction, duration: Tick) -> ExecStats {
        let mut e = Engine::new(EngineConfig::default());
        let mut ctx = WindowContext::default();
        let stats = e.run_window(spec, &action, duration, &mut ctx).unwrap();
        assert!(e.locks().is_empty());
        assert_eq!(e.active_count(), 0);
        stats
    }

    #[test]
    fn empty_workload_is_all_zero() {
        let spec = WorkloadSpec { arrival_rate: 0.0, ..Default::default() };
        assert_eq!(run(&spec, CCAction::LockImmediate, 500), ExecStats::default());
        assert_eq!(run(&WorkloadSpec::default(), CCAction::LockImmediate, 0), ExecStats::default());
    }

    #[test]
    fn serial_workload_never_aborts() {
        let spec =
            WorkloadSpec { workers: 1, zipf_theta: 0.99, write_fraction: 0.9, key_space: 4, ..Default::default() };
        for action in [CCAction::LockImmediate, CCAction::OptimisticNoLock] {
            let s = run(&spec, action, 1000);
            assert!(s.committed_count > 50);
            assert_eq!(s.aborted_count, 0);
        }
    }

    #[test]
    fn window_is_deterministic() {
        let spec = WorkloadSpec { zipf_theta: 0.9, write_fraction: 0.5, seed: 11, ..Default::default() };
        assert_eq!(run(&spec, CCAction::OptimisticNoLock, 800), run(&spec, CCAction::OptimisticNoLock, 800));
    }

    #[test]
    fn counters_are_consistent() {
        let spec = WorkloadSpec { zipf_theta: 0.99, write_fraction: 0.7, key_space: 50, seed: 3, ..Default::default() };
        for action in [CCAction::LockImmediate, CCAction::OptimisticNoLock] {
            let s = run(&spec, action, 1000);
            assert!(s.committed_count + s.aborted_count <= s.submitted_count);
            assert!(s.conflict_op_count <= s.op_count);
        }
    }

    #[test]
    fn optimistic_aborts_more_under_skewed_writes() {
        let spec = WorkloadSpec { zipf_theta: 0.99, write_fraction: 0.8, seed: 5, ..Default::default() };
        let lock = run(&spec, CCAction::LockImmediate, 2000);
        let opt = run(&spec, CCAction::OptimisticNoLock, 2000);
        let rate = |s: &ExecStats| s.aborted_count as f64 / (s.committed_count + s.aborted_count) as f64;
        assert!(rate(&opt) > rate(&lock), "opt {:?} lock {:?}", opt, lock);
    }
}
