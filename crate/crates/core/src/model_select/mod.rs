// SPDX-License-Identifier: Apache-2.0

//! Budgeted model selection: cheap proxy scoring over an evolutionary
//! search, then successive halving with real training on the shortlist.

mod space;

use std::collections::{HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use space::{ModelGenome, ModelSpace, Proxy, Scorer, Trainer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("budget {budget} cannot cover one score and one training epoch")]
    InfeasibleBudget { budget: f64 },
    #[error("invalid selection parameter: {0}")]
    InvalidParam(String),
    #[error("invalid model space: {0}")]
    InvalidSpace(String),
    #[error("asked for {wanted} candidates but only {available} were scored")]
    CandidateShortfall { wanted: usize, available: usize },
}

/// Split of a time budget between scoring and refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub budget: f64,
    /// Models to score.
    pub n_score: usize,
    /// Candidates entering refinement, a power of `eta`.
    pub k_candidates: usize,
    pub u_init: u64,
    pub eta: usize,
    pub phi: f64,
    pub c_score: f64,
    pub c_epoch: f64,
}

/// Halving rounds needed for `k` candidates; a single candidate still trains once.
pub fn halving_rounds(k: usize, eta: usize) -> u64 {
    let mut rounds = 0;
    let mut n = k;
    while n > 1 {
        n = n.div_ceil(eta);
        rounds += 1;
    }
    rounds.max(1)
}

impl SelectionPlan {
    pub fn filter_cost(&self) -> f64 {
        self.n_score as f64 * self.c_score
    }

    /// Upper bound on refinement cost used for planning.
    pub fn refine_cost_bound(&self) -> f64 {
        refine_bound(self.k_candidates, self.u_init, self.eta, self.c_epoch)
    }

    pub fn planned_cost(&self) -> f64 {
        self.filter_cost() + self.refine_cost_bound()
    }
}

fn refine_bound(k: usize, u_init: u64, eta: usize, c_epoch: f64) -> f64 {
    k as f64 * u_init as f64 * halving_rounds(k, eta) as f64 * c_epoch
}

/// Size the scoring and refinement phases to fit `budget`.
pub fn plan_budget(
    budget: f64,
    c_score: f64,
    c_epoch: f64,
    eta: usize,
    phi: f64,
    u_init: u64,
) -> Result<SelectionPlan, SelectError> {
    if !(c_score > 0.0 && c_epoch > 0.0) {
        return Err(SelectError::InvalidParam("costs must be positive".into()));
    }
    if eta < 2 {
        return Err(SelectError::InvalidParam("eta must be at least 2".into()));
    }
    if !(phi > 0.0 && phi < 1.0) {
        return Err(SelectError::InvalidParam("phi must lie in (0, 1)".into()));
    }
    if u_init == 0 {
        return Err(SelectError::InvalidParam("u_init must be positive".into()));
    }
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(SelectError::InfeasibleBudget { budget });
    }
    let filter_budget = phi * budget;
    let refine_budget = (1.0 - phi) * budget;
    let mut n_score = (filter_budget / c_score).floor() as usize;
    while n_score > 0 && n_score as f64 * c_score > filter_budget {
        n_score -= 1;
    }
    if n_score == 0 || refine_bound(1, u_init, eta, c_epoch) > refine_budget {
        return Err(SelectError::InfeasibleBudget { budget });
    }
    let mut k = 1usize;
    while let Some(next) = k.checked_mul(eta) {
        if next > n_score || refine_bound(next, u_init, eta, c_epoch) > refine_budget {
            break;
        }
        k = next;
    }
    let plan = SelectionPlan { budget, n_score, k_candidates: k, u_init, eta, phi, c_score, c_epoch };
    debug_assert!(plan.planned_cost() <= budget);
    Ok(plan)
}

/// Regularized-evolution settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionParams {
    pub population: usize,
    pub sample: usize,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        EvolutionParams { population: 16, sample: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredModel {
    pub genome: ModelGenome,
    pub score: f64,
}

fn better(a: &ScoredModel, b: &ScoredModel) -> bool {
    a.score > b.score || (a.score == b.score && a.genome.id < b.genome.id)
}

fn random_unseen<R: Rng + ?Sized>(space: &ModelSpace, seen: &HashSet<u64>, rng: &mut R) -> Option<ModelGenome> {
    for _ in 0..64 {
        let g = space.random_genome(rng);
        if !seen.contains(&g.id) {
            return Some(g);
        }
    }
    let start = rng.random_range(0..space.size());
    (0..space.size()).map(|i| (start + i) % space.size()).find(|id| !seen.contains(id)).map(|id| space.genome(id))
}

fn propose<R: Rng + ?Sized>(
    space: &ModelSpace,
    population: &VecDeque<ScoredModel>,
    evo: &EvolutionParams,
    seen: &HashSet<u64>,
    rng: &mut R,
) -> Option<ModelGenome> {
    if population.len() >= evo.population {
        for _ in 0..8 {
            let parent = (0..evo.sample)
                .map(|_| &population[rng.random_range(0..population.len())])
                .reduce(|a, b| if better(b, a) { b } else { a })
                .expect("sample is positive");
            let child = space.mutate(&parent.genome, rng);
            if !seen.contains(&child.id) {
                return Some(child);
            }
        }
    }
    random_unseen(space, seen, rng)
}

/// Score `n` distinct genomes (capped at the space size) found by
/// regularized evolution. Proposals are drawn in batches of `workers` and
/// each batch is scored in parallel, so a run is reproducible for a fixed
/// seed and worker count.
pub fn explore_and_score<R: Rng + ?Sized>(
    space: &ModelSpace,
    scorer: &Scorer,
    n: usize,
    workers: usize,
    evo: &EvolutionParams,
    rng: &mut R,
) -> Result<Vec<ScoredModel>, SelectError> {
    if workers == 0 || evo.population == 0 || evo.sample == 0 {
        return Err(SelectError::InvalidParam("workers, population and sample must be positive".into()));
    }
    let target = n.min(usize::try_from(space.size()).unwrap_or(usize::MAX));
    let run = |score: &dyn Fn(Vec<ModelGenome>) -> Vec<ScoredModel>, rng: &mut R| {
        let mut seen = HashSet::new();
        let mut population: VecDeque<ScoredModel> = VecDeque::new();
        let mut out = Vec::with_capacity(target);
        while out.len() < target {
            let want = workers.min(target - out.len());
            let mut batch = Vec::with_capacity(want);
            for _ in 0..want {
                match propose(space, &population, evo, &seen, rng) {
                    Some(g) => {
                        seen.insert(g.id);
                        batch.push(g);
                    }
                    None => break,
                }
            }
            if batch.is_empty() {
                break;
            }
            for s in score(batch) {
                population.push_back(s.clone());
                if population.len() > evo.population {
                    population.pop_front();
                }
                out.push(s);
            }
        }
        out
    };
    let score_one = |g: ModelGenome| {
        let score = scorer.score(space, &g);
        ScoredModel { genome: g, score }
    };
    if workers == 1 {
        return Ok(run(&|batch| batch.into_iter().map(score_one).collect(), rng));
    }
    let out = std::thread::scope(|scope| {
        let (job_tx, job_rx) = crossbeam_channel::unbounded::<(usize, ModelGenome)>();
        let (res_tx, res_rx) = crossbeam_channel::unbounded::<(usize, ScoredModel)>();
        for _ in 0..workers {
            let job_rx = job_rx.clone();
            let res_tx = res_tx.clone();
            let score_one = &score_one;
            scope.spawn(move || {
                for (i, g) in job_rx {
                    if res_tx.send((i, score_one(g))).is_err() {
                        break;
                    }
                }
            });
        }
        let score_batch = |batch: Vec<ModelGenome>| {
            let len = batch.len();
            for job in batch.into_iter().enumerate() {
                job_tx.send(job).expect("workers alive");
            }
            let mut slots: Vec<Option<ScoredModel>> = vec![None; len];
            for _ in 0..len {
                let (i, s) = res_rx.recv().expect("workers alive");
                slots[i] = Some(s);
            }
            slots.into_iter().map(|s| s.expect("every job answered")).collect()
        };
        let out = run(&score_batch, rng);
        drop(job_tx);
        out
    });
    Ok(out)
}

/// Top `k` by score, lower id first on ties.
pub fn take_candidates(scored: &[ScoredModel], k: usize) -> Result<Vec<ScoredModel>, SelectError> {
    if k == 0 || k > scored.len() {
        return Err(SelectError::CandidateShortfall { wanted: k, available: scored.len() });
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.genome.id.cmp(&b.genome.id)));
    sorted.truncate(k);
    Ok(sorted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalvingRound {
    pub round: u32,
    /// Epochs each survivor trained this round.
    pub epochs_each: u64,
    pub entrants: Vec<u64>,
    pub kept: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub winner: ModelGenome,
    pub rounds: Vec<HalvingRound>,
    pub total_epochs: u64,
}

/// Successive halving. Round `r` trains each survivor `u_init * eta^r`
/// further epochs and keeps the top `ceil(n / eta)` by observed accuracy.
/// `on_epochs` is told about every block of training before it happens.
pub fn refine(
    candidates: &[ModelGenome],
    u_init: u64,
    eta: usize,
    space: &ModelSpace,
    trainer: &Trainer,
    on_epochs: &mut dyn FnMut(&ModelGenome, u64),
) -> Result<RefineOutcome, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::CandidateShortfall { wanted: 1, available: 0 });
    }
    if eta < 2 || u_init == 0 {
        return Err(SelectError::InvalidParam("eta >= 2 and u_init >= 1 required".into()));
    }
    let mut alive: Vec<(ModelGenome, u64)> = candidates.iter().map(|g| (g.clone(), 0)).collect();
    let mut rounds = Vec::new();
    let mut total = 0;
    let mut r = 0u32;
    loop {
        let epochs_each = u_init * (eta as u64).pow(r);
        let entrants = alive.iter().map(|(g, _)| g.id).collect();
        let mut observed: Vec<(f64, ModelGenome, u64)> = alive
            .into_iter()
            .map(|(g, done)| {
                on_epochs(&g, epochs_each);
                let done = done + epochs_each;
                (trainer.accuracy(space, &g, done), g, done)
            })
            .collect();
        total += epochs_each * observed.len() as u64;
        observed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        let keep = observed.len().div_ceil(eta);
        observed.truncate(keep);
        let kept = observed.iter().map(|(_, g, _)| g.id).collect();
        rounds.push(HalvingRound { round: r, epochs_each, entrants, kept });
        alive = observed.into_iter().map(|(_, g, d)| (g, d)).collect();
        r += 1;
        if alive.len() == 1 {
            break;
        }
    }
    let winner = alive.pop().expect("one survivor").0;
    Ok(RefineOutcome { winner, rounds, total_epochs: total })
}

/// Everything a selection run needs besides the space, scorer and trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectRequest {
    pub budget: f64,
    pub phi: f64,
    pub eta: usize,
    pub u_init: u64,
    pub workers: usize,
    pub evolution: EvolutionParams,
}

impl Default for SelectRequest {
    fn default() -> Self {
        SelectRequest { budget: 600.0, phi: 0.2, eta: 2, u_init: 1, workers: 1, evolution: EvolutionParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub genome: ModelGenome,
    pub plan: SelectionPlan,
    pub scored: usize,
    pub candidates: Vec<u64>,
    pub filter_cost: f64,
    pub refine_cost: f64,
    /// Simulated wall time charged: scoring plus training.
    pub elapsed: f64,
    pub refine: RefineOutcome,
}

pub fn select<R: Rng + ?Sized>(
    space: &ModelSpace,
    scorer: &Scorer,
    trainer: &Trainer,
    request: &SelectRequest,
    rng: &mut R,
) -> Result<SelectionOutcome, SelectError> {
    select_with_hook(space, scorer, trainer, request, rng, &mut |_, _| {})
}

pub fn select_with_hook<R: Rng + ?Sized>(
    space: &ModelSpace,
    scorer: &Scorer,
    trainer: &Trainer,
    request: &SelectRequest,
    rng: &mut R,
    on_epochs: &mut dyn FnMut(&ModelGenome, u64),
) -> Result<SelectionOutcome, SelectError> {
    let mut plan =
        plan_budget(request.budget, scorer.cost, trainer.cost_per_epoch, request.eta, request.phi, request.u_init)?;
    let scored = explore_and_score(space, scorer, plan.n_score, request.workers, &request.evolution, rng)?;
    // A small space can hold fewer genomes than planned.
    while plan.k_candidates > scored.len() {
        plan.k_candidates /= plan.eta;
    }
    let candidates = take_candidates(&scored, plan.k_candidates)?;
    let genomes: Vec<ModelGenome> = candidates.iter().map(|s| s.genome.clone()).collect();
    let refine = refine(&genomes, plan.u_init, plan.eta, space, trainer, on_epochs)?;
    let filter_cost = scored.len() as f64 * scorer.cost;
    let refine_cost = refine.total_epochs as f64 * trainer.cost_per_epoch;
    Ok(SelectionOutcome {
        genome: refine.winner.clone(),
        scored: scored.len(),
        candidates: genomes.iter().map(|g| g.id).collect(),
        filter_cost,
        refine_cost,
        elapsed: filter_cost + refine_cost,
        plan,
        refine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimal_budget_gives_one_of_each() {
        let p = plan_budget(5.0, 1.0, 4.0, 2, 0.2, 1).unwrap();
        assert_eq!((p.n_score, p.k_candidates), (1, 1));
        assert!(p.planned_cost() <= 5.0);
    }

    #[test]
    fn too_small_budget_is_infeasible() {
        assert!(matches!(plan_budget(4.9, 1.0, 4.0, 2, 0.2, 1), Err(SelectError::InfeasibleBudget { .. })));
        assert!(matches!(plan_budget(0.0, 1.0, 1.0, 2, 0.2, 1), Err(SelectError::InfeasibleBudget { .. })));
    }

    #[test]
    fn bad_params_rejected() {
        assert!(plan_budget(100.0, 1.0, 1.0, 1, 0.2, 1).is_err());
        assert!(plan_budget(100.0, 1.0, 1.0, 2, 1.0, 1).is_err());
        assert!(plan_budget(100.0, 0.0, 1.0, 2, 0.2, 1).is_err());
        assert!(plan_budget(100.0, 1.0, 1.0, 2, 0.2, 0).is_err());
    }

    #[test]
    fn k_is_largest_fitting_power() {
        // refine budget 80; K=8 costs 8*1*3=24, K=16 costs 16*4=64, K=32 costs 160.
        let p = plan_budget(100.0, 0.1, 1.0, 2, 0.2, 1).unwrap();
        assert_eq!(p.n_score, 200);
        assert_eq!(p.k_candidates, 16);
    }

    #[test]
    fn halving_round_counts() {
        assert_eq!(halving_rounds(1, 2), 1);
        assert_eq!(halving_rounds(2, 2), 1);
        assert_eq!(halving_rounds(8, 2), 3);
        assert_eq!(halving_rounds(9, 3), 2);
    }

    #[test]
    fn single_score_returns_the_random_genome() {
        let space = ModelSpace::uniform(4, 4, 1).unwrap();
        let scorer = Scorer::single(0.5, 0.1, 1.0, 2);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let out = explore_and_score(&space, &scorer, 1, 1, &EvolutionParams::default(), &mut a).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].genome, space.random_genome(&mut b));
    }

    #[test]
    fn explore_is_distinct_and_capped() {
        let space = ModelSpace::uniform(2, 3, 1).unwrap();
        let scorer = Scorer::single(0.5, 0.1, 1.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = explore_and_score(&space, &scorer, 100, 1, &EvolutionParams::default(), &mut rng).unwrap();
        assert_eq!(out.len(), 9);
        let ids: HashSet<u64> = out.iter().map(|s| s.genome.id).collect();
        assert_eq!(ids.len(), 9);
    }

    #[test]
    fn parallel_scoring_is_reproducible() {
        let space = ModelSpace::uniform(5, 4, 3).unwrap();
        let scorer = Scorer::blended(0.6, 0.2, 1.0, 4);
        let evo = EvolutionParams::default();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let first = explore_and_score(&space, &scorer, 60, 4, &evo, &mut a).unwrap();
        let second = explore_and_score(&space, &scorer, 60, 4, &evo, &mut b).unwrap();
        assert_eq!(first, second);
        for s in &first {
            assert_eq!(s.score, scorer.score(&space, &s.genome));
        }
    }

    #[test]
    fn candidates_sorted_with_id_ties() {
        let space = ModelSpace::uniform(2, 4, 0).unwrap();
        let mk = |id, score| ScoredModel { genome: space.genome(id), score };
        let scored = vec![mk(5, 0.3), mk(2, 0.9), mk(1, 0.3), mk(7, 0.9)];
        let top = take_candidates(&scored, 3).unwrap();
        let ids: Vec<u64> = top.iter().map(|s| s.genome.id).collect();
        assert_eq!(ids, vec![2, 7, 1]);
        assert!(take_candidates(&scored, 5).is_err());
        assert!(take_candidates(&scored, 0).is_err());
    }

    #[test]
    fn noiseless_long_training_finds_best_candidate() {
        let space = ModelSpace::uniform(3, 4, 11).unwrap();
        let trainer = Trainer { cost_per_epoch: 1.0, sigma: 0.0, seed: 0 };
        let cands: Vec<ModelGenome> = (0..8).map(|i| space.genome(i * 7)).collect();
        let out = refine(&cands, 50, 2, &space, &trainer, &mut |_, _| {}).unwrap();
        let best = cands.iter().max_by(|a, b| space.ground_truth(a).total_cmp(&space.ground_truth(b))).unwrap();
        assert_eq!(out.winner.id, best.id);
        assert_eq!(out.rounds.len(), 3);
        assert_eq!(out.total_epochs, 8 * 50 + 4 * 100 + 2 * 200);
    }

    #[test]
    fn refine_reports_every_block() {
        let space = ModelSpace::uniform(3, 4, 11).unwrap();
        let trainer = Trainer { cost_per_epoch: 1.0, sigma: 0.01, seed: 0 };
        let cands: Vec<ModelGenome> = (0..4).map(|i| space.genome(i)).collect();
        let mut seen = 0;
        let out = refine(&cands, 2, 2, &space, &trainer, &mut |_, e| seen += e).unwrap();
        assert_eq!(seen, out.total_epochs);
    }

    #[test]
    fn select_respects_budget() {
        let space = ModelSpace::uniform(4, 4, 1).unwrap();
        let scorer = Scorer::blended(0.7, 0.2, 0.5, 2);
        let trainer = Trainer { cost_per_epoch: 1.0, sigma: 0.01, seed: 3 };
        for budget in [5.0, 20.0, 100.0, 600.0] {
            let req = SelectRequest { budget, ..SelectRequest::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(budget as u64);
            let out = select(&space, &scorer, &trainer, &req, &mut rng).unwrap();
            assert!(out.elapsed <= budget + 1e-9, "{} > {}", out.elapsed, budget);
            assert!(out.candidates.contains(&out.genome.id));
        }
    }
}
