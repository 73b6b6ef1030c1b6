// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde_json::{json, Value};

use super::config::{GateSection, OptdSection, RecoverSection, SelectSection};
use super::feed::{channel, Closed};
use super::metrics::Metrics;
use super::HarnessError;
use crate::cc_adaptive::{ShiftRun, ShiftScenario};
use crate::engine::{CCAction, CommitOutcome, Engine, EngineConfig, Key, Record, TxnOp};
use crate::gate::{encode_query, gate, sliced_predict, ExpertSet, GateWeights, GatingNet, Predicate, Schema};
use crate::model_select::{select_with_hook, ModelSpace, Scorer, Trainer};
use crate::plan_opt::{
    gen_candidates, simulate_latency, true_cost, Catalog, MutationGrid, PlanSelector, SelectorState, UcbSelector,
};
use crate::recovery::{EnclaveSim, RecoveryLog};
use crate::rng::{derive_seed, mix_all, stream};

/// Metrics rows plus a JSON summary for one module run.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverOutput {
    pub metrics: Metrics,
    pub summary: Value,
}

/// One prepared block of training data handed from the loader thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataBatch {
    pub index: u64,
    pub checksum: u64,
}

fn runtime(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

/// Model selection with a background loader filling a bounded feed; each
/// training epoch consumes one batch.
pub fn run_select(cfg: &SelectSection, seed: u64) -> Result<DriverOutput, HarnessError> {
    const NAME: &str = "select";
    let space = ModelSpace::new(cfg.dims.clone(), derive_seed(seed, "select/space")).map_err(runtime)?;
    let scorer_seed = derive_seed(seed, "select/scorer");
    let scorer = if cfg.blended {
        Scorer::blended(cfg.rho, cfg.sigma, cfg.score_cost, scorer_seed)
    } else {
        Scorer::single(cfg.rho, cfg.sigma, cfg.score_cost, scorer_seed)
    };
    let trainer =
        Trainer { cost_per_epoch: cfg.epoch_cost, sigma: cfg.train_sigma, seed: derive_seed(seed, "select/trainer") };
    let data_seed = derive_seed(seed, "select/data");
    let mut rng = stream(seed, "select/search");

    let (producer, consumer) = channel::<DataBatch>(cfg.feed_capacity);
    let mut consumed = 0u64;
    let mut digest = 0u64;
    let outcome = std::thread::scope(|scope| {
        scope.spawn(move || {
            let mut index = 0;
            loop {
                let batch = DataBatch { index, checksum: mix_all(&[data_seed, index]) };
                if let Err(Closed(_)) = producer.produce(batch) {
                    break;
                }
                index += 1;
            }
        });
        let mut on_epochs = |_: &_, epochs: u64| {
            for _ in 0..epochs {
                let batch = consumer.consume().expect("loader runs until the feed closes");
                debug_assert_eq!(batch.index, consumed);
                digest = mix_all(&[digest, batch.checksum]);
                consumed += 1;
            }
        };
        let outcome = select_with_hook(&space, &scorer, &trainer, &cfg.request(), &mut rng, &mut on_epochs);
        drop(consumer);
        outcome
    })
    .map_err(runtime)?;

    let mut m = Metrics::default();
    for r in &outcome.refine.rounds {
        let t = r.round as u64;
        m.push(t, NAME, "entrants", r.entrants.len() as f64);
        m.push(t, NAME, "survivors", r.kept.len() as f64);
        m.push(t, NAME, "epochs_each", r.epochs_each as f64);
    }
    let chosen_quality = space.ground_truth(&outcome.genome);
    let last = outcome.refine.rounds.len() as u64;
    m.push(last, NAME, "filter_cost", outcome.filter_cost);
    m.push(last, NAME, "refine_cost", outcome.refine_cost);
    m.push(last, NAME, "elapsed", outcome.elapsed);
    m.push(last, NAME, "chosen_quality", chosen_quality);
    let oracle = cfg.oracle.then(|| space.oracle_best());
    if let Some((_, best)) = &oracle {
        m.push(last, NAME, "regret", best - chosen_quality);
    }
    let summary = json!({
        "chosen": outcome.genome,
        "chosen_quality": chosen_quality,
        "oracle": oracle.as_ref().map(|(g, q)| json!({"genome": g, "quality": q, "regret": q - chosen_quality})),
        "plan": outcome.plan,
        "scored": outcome.scored,
        "candidates": outcome.candidates,
        "cost": {
            "filter": outcome.filter_cost,
            "refine": outcome.refine_cost,
            "elapsed": outcome.elapsed,
            "budget": cfg.budget,
        },
        "rounds": outcome.refine.rounds,
        "total_epochs": outcome.refine.total_epochs,
        "feed": {"capacity": cfg.feed_capacity, "batches_consumed": consumed, "digest": format!("{digest:016x}")},
    });
    Ok(DriverOutput { metrics: m, summary })
}

pub fn run_cc_sim(cfg: &ShiftScenario, seed: u64) -> Result<DriverOutput, HarnessError> {
    const NAME: &str = "cc-sim";
    let run = cfg.run(derive_seed(seed, "cc-sim")).map_err(runtime)?;
    let mut m = Metrics::default();
    for (i, r) in run.adaptive.iter().enumerate() {
        let t = r.window as u64;
        m.push(t, NAME, "throughput", r.state.throughput);
        m.push(t, NAME, "abort_rate", r.state.abort_rate);
        m.push(t, NAME, "avg_lock_wait", r.state.avg_lock_wait);
        m.push(t, NAME, "contention_index", r.state.contention_index);
        m.push(t, NAME, "reward", r.reward);
        m.push(t, NAME, "shift", r.shift as u8 as f64);
        m.push(t, NAME, "adapted", r.adapted as u8 as f64);
        m.push(t, NAME, "lock_fraction", r.lock_fraction);
        if let (Some(l), Some(o)) = (run.all_lock.get(i), run.all_optimistic.get(i)) {
            m.push(t, NAME, "baseline_lock_throughput", l.throughput);
            m.push(t, NAME, "baseline_optimistic_throughput", o.throughput);
        }
    }
    let after = |states: &[crate::cc_adaptive::SystemState]| {
        ShiftRun::mean_throughput(states.iter().skip(cfg.shift_at).copied())
    };
    let adaptive_states: Vec<_> = run.adaptive.iter().map(|r| r.state).collect();
    let summary = json!({
        "windows": cfg.windows,
        "shift_at": cfg.shift_at,
        "shifts_detected": run.adaptive.iter().filter(|r| r.shift).map(|r| r.window).collect::<Vec<_>>(),
        "adaptations": run.adaptive.iter().filter(|r| r.adapted).map(|r| r.window).collect::<Vec<_>>(),
        "mean_throughput_after_shift": {
            "adaptive": after(&adaptive_states),
            "all_lock": cfg.baselines.then(|| after(&run.all_lock)),
            "all_optimistic": cfg.baselines.then(|| after(&run.all_optimistic)),
        },
    });
    Ok(DriverOutput { metrics: m, summary })
}

/// Commit a random history with logging on, persist the log, corrupt some
/// stored records, then detect and repair them from the reloaded log and
/// compare against a shadow copy taken before the damage.
pub fn run_recover_demo(cfg: &RecoverSection, seed: u64, out: &Path) -> Result<DriverOutput, HarnessError> {
    const NAME: &str = "recover-demo";
    let enclave_seed = derive_seed(seed, "recover-demo/enclave");
    let mut engine = Engine::new(EngineConfig {
        logging: true,
        anchor_interval: cfg.anchor_interval,
        enclave_seed,
        ..EngineConfig::default()
    });
    let mut rng = stream(seed, "recover-demo/history");
    let writes = cfg.writes_per_txn.min(cfg.key_space as usize);
    for _ in 0..cfg.txns {
        let ops = sample(&mut rng, cfg.key_space as usize, writes)
            .into_iter()
            .map(|k| TxnOp::Write { key: Key(k as u32), value: rng.random_range(-1_000_000..1_000_000) })
            .collect::<Vec<_>>();
        let id = engine.begin(ops);
        for _ in 0..writes {
            engine.execute_op(id, CCAction::LockImmediate).map_err(runtime)?;
        }
        if engine.validate_and_commit(id).map_err(runtime)? != CommitOutcome::Committed {
            return Err(runtime("serial transaction failed to commit"));
        }
        engine.forget(id);
    }
    let keys: Vec<Key> = (0..cfg.key_space).map(Key).collect();
    let shadow: Vec<Record> = keys.iter().map(|&k| engine.get(k)).collect();

    std::fs::create_dir_all(out).map_err(HarnessError::io)?;
    let log_path = out.join(&cfg.log_file);
    engine.log().ok_or_else(|| runtime("logging disabled"))?.write_to(&log_path).map_err(runtime)?;
    let log = RecoveryLog::read_from(&log_path, EnclaveSim::from_seed(enclave_seed)).map_err(runtime)?;
    let log_verified = log.verify_log();

    let mut tamper_rng = stream(seed, "recover-demo/tamper");
    let victims: BTreeSet<u32> =
        sample(&mut tamper_rng, cfg.key_space as usize, cfg.tampered_keys).into_iter().map(|k| k as u32).collect();
    let mut m = Metrics::default();
    for (i, &k) in victims.iter().enumerate() {
        let key = Key(k);
        let good = engine.get(key);
        let bad = match i % 3 {
            // Value edit with a recomputed checksum.
            0 => Record::new(key, good.value.wrapping_add(1 + tamper_rng.random_range(0..1000)), good.version),
            // Raw edit that leaves the checksum stale.
            1 => Record { value: good.value ^ 1, ..good },
            // Rollback to the never-written state.
            _ => Record::new(key, good.value.wrapping_sub(7), good.version.saturating_sub(1)),
        };
        engine.store_mut().insert(key, bad);
    }

    let detected: Vec<Key> = keys.iter().copied().filter(|&k| log.detect_tamper(k, &engine.get(k))).collect();
    let false_positives = detected.iter().filter(|k| !victims.contains(&k.0)).count();
    let mut repaired_ok = 0usize;
    let mut max_replayed = 0usize;
    for (i, &key) in detected.iter().enumerate() {
        let report = log.recover(key).map_err(runtime)?;
        engine.store_mut().insert(key, report.record);
        let matches = report.record == shadow[key.0 as usize];
        repaired_ok += matches as usize;
        max_replayed = max_replayed.max(report.replayed);
        let t = i as u64;
        m.push(t, NAME, "key", key.0 as f64);
        m.push(t, NAME, "replayed", report.replayed as f64);
        m.push(t, NAME, "matches_shadow", matches as u8 as f64);
    }
    let state_restored = keys.iter().zip(&shadow).all(|(&k, s)| engine.get(k) == *s);

    let bytes = std::fs::read(&log_path).map_err(HarnessError::io)?;
    let mut flip_rng = stream(seed, "recover-demo/bitflip");
    let mut flips_detected = 0usize;
    for _ in 0..cfg.log_bit_flips {
        let bit = flip_rng.random_range(0..bytes.len() * 8);
        let mut copy = bytes.clone();
        copy[bit / 8] ^= 1 << (bit % 8);
        let caught = match RecoveryLog::decode(&copy, EnclaveSim::from_seed(enclave_seed)) {
            Err(_) => true,
            Ok(l) => !l.verify_log(),
        };
        flips_detected += caught as usize;
    }

    let t = detected.len() as u64;
    m.push(t, NAME, "log_bytes", bytes.len() as f64);
    m.push(t, NAME, "tampered", victims.len() as f64);
    m.push(t, NAME, "detected", (detected.len() - false_positives) as f64);
    m.push(t, NAME, "false_positives", false_positives as f64);
    m.push(t, NAME, "repaired_matching_shadow", repaired_ok as f64);
    m.push(t, NAME, "bit_flips_detected", flips_detected as f64);
    let summary = json!({
        "txns": cfg.txns,
        "log_file": cfg.log_file,
        "log_bytes": bytes.len(),
        "log_records": log.records().len(),
        "log_verified": log_verified,
        "anchor_interval": cfg.anchor_interval,
        "tampered_keys": victims,
        "detected_keys": detected.iter().map(|k| k.0).collect::<Vec<_>>(),
        "false_positives": false_positives,
        "repaired_matching_shadow": repaired_ok,
        "max_replayed": max_replayed,
        "state_restored": state_restored,
        "bit_flips": {"injected": cfg.log_bit_flips, "detected": flips_detected},
    });
    Ok(DriverOutput { metrics: m, summary })
}

/// Candidate generation under the configured grid, then an online bandit
/// choosing among candidates episode by episode.
pub fn run_optd(cfg: &OptdSection, catalog: &Catalog, seed: u64) -> Result<DriverOutput, HarnessError> {
    const NAME: &str = "optd";
    let names: Vec<&str> = if cfg.query.is_empty() {
        catalog.relations.iter().map(|r| r.name.as_str()).collect()
    } else {
        cfg.query.iter().map(String::as_str).collect()
    };
    let query = catalog.query(&names).map_err(runtime)?;
    let grid = MutationGrid::new(cfg.grid.clone()).map_err(runtime)?;
    let candidates = gen_candidates(&query, catalog, cfg.n_plans, &grid, &mut stream(seed, "optd/mutate"));
    let expected: Vec<f64> = candidates.iter().map(|p| true_cost(p, catalog) * cfg.latency_unit).collect();
    let best = expected.iter().copied().fold(f64::INFINITY, f64::min);
    let template = catalog.template(&query);
    let selector = UcbSelector { c: cfg.ucb_c };
    let mut state = SelectorState::new();
    let mut latency_rng = stream(seed, "optd/latency");
    let mut m = Metrics::default();
    let mut picks = vec![0u64; candidates.len()];
    let mut total_regret = 0.0;
    for ep in 0..cfg.episodes {
        let i = selector.select_plan(&template, &candidates, &state);
        let latency = simulate_latency(&candidates[i], catalog, cfg.latency_unit, cfg.noise, &mut latency_rng);
        state.feedback(&template, &candidates[i], latency);
        picks[i] += 1;
        let regret = expected[i] - best;
        total_regret += regret;
        let t = ep as u64;
        m.push(t, NAME, "plan", i as f64);
        m.push(t, NAME, "latency", latency);
        m.push(t, NAME, "regret", regret);
    }
    let summary = json!({
        "template": template,
        "base_plan": candidates[0].signature(),
        "candidates": candidates.iter().zip(&expected).enumerate().map(|(i, (p, e))| json!({
            "id": i,
            "plan": p.signature(),
            "true_cost": true_cost(p, catalog),
            "expected_latency": e,
            "pulls": picks[i],
        })).collect::<Vec<_>>(),
        "best_expected_latency": best,
        "episodes": cfg.episodes,
        "total_regret": total_regret,
    });
    Ok(DriverOutput { metrics: m, summary })
}

/// Inputs to one gating call; the net and experts are rebuilt from the seed
/// when not supplied.
pub fn gate_net(cfg: &GateSection, schema: &Schema, net: Option<&GatingNet>, seed: u64) -> GatingNet {
    net.cloned().unwrap_or_else(|| {
        GatingNet::random(
            schema,
            cfg.embed_dim,
            cfg.hidden,
            cfg.experts,
            cfg.k_max,
            cfg.tau,
            &mut stream(seed, "gate/net"),
        )
    })
}

pub fn run_gate(
    cfg: &GateSection,
    schema: &Schema,
    net: Option<&GatingNet>,
    predicates: &[Predicate],
    seed: u64,
) -> Result<DriverOutput, HarnessError> {
    const NAME: &str = "gate";
    let net = gate_net(cfg, schema, net, seed);
    let experts = ExpertSet::random_linear(net.experts, cfg.features.len(), &mut stream(seed, "gate/experts"));
    let encoding = encode_query(predicates, schema).map_err(runtime)?;
    let weights: GateWeights = gate(&encoding, &net).map_err(runtime)?;
    let prediction = sliced_predict(&weights, &experts, &cfg.features).map_err(runtime)?;
    let counts = experts.counts();
    let mut m = Metrics::default();
    for (i, w) in weights.w.iter().enumerate() {
        m.push(i as u64, NAME, "weight", *w);
        m.push(i as u64, NAME, "evaluations", counts[i] as f64);
    }
    m.push(weights.w.len() as u64, NAME, "prediction", prediction);
    let summary = json!({
        "predicate": cfg.predicate,
        "tokens": encoding.tokens,
        "weights": weights.w,
        "active": weights.active(),
        "prediction": prediction,
        "expert_evaluations": counts,
    });
    Ok(DriverOutput { metrics: m, summary })
}
