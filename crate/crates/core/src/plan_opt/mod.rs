// SPDX-License-Identifier: Apache-2.0

//! Candidate plan generation by cardinality mutation over a small
//! cost-based join optimizer, and online plan selection from feedback.

mod selector;

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use selector::{ArmStats, PlanSelector, SelectorState, UcbSelector};

/// Largest query the optimizer accepts.
pub const MAX_RELATIONS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("relation `{0}` appears twice in the query")]
    DuplicateRelation(String),
    #[error("query joins {0} relations; at most {MAX_RELATIONS} supported")]
    TooManyRelations(usize),
    #[error("empty query")]
    EmptyQuery,
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("invalid mutation grid: {0}")]
    InvalidGrid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub true_rows: f64,
    pub est_rows: f64,
}

/// Join predicate between two relations, by catalog index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinEdge {
    pub left: usize,
    pub right: usize,
    pub true_sel: f64,
    pub est_sel: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub relations: Vec<Relation>,
    pub edges: Vec<JoinEdge>,
}

impl Catalog {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |what: &str| Err(PlanError::InvalidCatalog(what.into()));
        let mut names = HashSet::new();
        for r in &self.relations {
            if !(r.true_rows > 0.0 && r.est_rows > 0.0 && r.true_rows.is_finite() && r.est_rows.is_finite()) {
                return bad(&format!("row counts of `{}` must be positive", r.name));
            }
            if !names.insert(r.name.as_str()) {
                return bad(&format!("duplicate relation `{}`", r.name));
            }
        }
        let mut pairs = HashSet::new();
        for e in &self.edges {
            if e.left >= self.relations.len() || e.right >= self.relations.len() || e.left == e.right {
                return bad("edge endpoints must be two distinct relations");
            }
            if !(e.true_sel > 0.0 && e.est_sel > 0.0 && e.true_sel.is_finite() && e.est_sel.is_finite()) {
                return bad("selectivities must be positive");
            }
            if !pairs.insert((e.left.min(e.right), e.left.max(e.right))) {
                return bad("at most one edge per relation pair");
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize, PlanError> {
        self.relations.iter().position(|r| r.name == name).ok_or_else(|| PlanError::UnknownRelation(name.to_string()))
    }

    /// Resolve relation names to a query. Relations are kept in catalog order.
    pub fn query(&self, names: &[&str]) -> Result<Query, PlanError> {
        if names.is_empty() {
            return Err(PlanError::EmptyQuery);
        }
        let mut rels = Vec::with_capacity(names.len());
        for n in names {
            let i = self.index_of(n)?;
            if rels.contains(&i) {
                return Err(PlanError::DuplicateRelation(n.to_string()));
            }
            rels.push(i);
        }
        if rels.len() > MAX_RELATIONS {
            return Err(PlanError::TooManyRelations(rels.len()));
        }
        rels.sort_unstable();
        let edges = self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| rels.contains(&e.left) && rels.contains(&e.right))
            .map(|(i, _)| i)
            .collect();
        Ok(Query { rels, edges })
    }

    /// Template key: the sorted relation names. Unseen templates get a
    /// fresh selector row.
    pub fn template(&self, query: &Query) -> String {
        let mut names: Vec<&str> = query.rels.iter().map(|&r| self.relations[r].name.as_str()).collect();
        names.sort_unstable();
        names.join(",")
    }
}

/// A resolved join query: catalog relation and edge indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub rels: Vec<usize>,
    pub edges: Vec<usize>,
}

/// Row counts for each query relation followed by the selectivity of each
/// query edge, in query order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardinalityVector {
    pub values: Vec<f64>,
}

impl CardinalityVector {
    pub fn estimates(query: &Query, catalog: &Catalog) -> Self {
        Self::collect(query, catalog, |r| r.est_rows, |e| e.est_sel)
    }

    pub fn truth(query: &Query, catalog: &Catalog) -> Self {
        Self::collect(query, catalog, |r| r.true_rows, |e| e.true_sel)
    }

    fn collect(
        query: &Query,
        catalog: &Catalog,
        rows: impl Fn(&Relation) -> f64,
        sel: impl Fn(&JoinEdge) -> f64,
    ) -> Self {
        let values = query
            .rels
            .iter()
            .map(|&r| rows(&catalog.relations[r]))
            .chain(query.edges.iter().map(|&e| sel(&catalog.edges[e])))
            .collect();
        CardinalityVector { values }
    }
}

/// Subset cardinalities for one query under one cardinality vector.
struct CardModel {
    /// Catalog relation index of each query-local bit.
    rels: Vec<usize>,
    rows: Vec<f64>,
    /// (local bit mask of both endpoints, selectivity)
    sels: Vec<(u32, f64)>,
}

impl CardModel {
    fn new(query: &Query, catalog: &Catalog, cards: &CardinalityVector) -> Self {
        let n = query.rels.len();
        let local = |r: usize| query.rels.iter().position(|&q| q == r).expect("edge inside query");
        let sels = query
            .edges
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                let edge = &catalog.edges[e];
                ((1 << local(edge.left)) | (1 << local(edge.right)), cards.values[n + k])
            })
            .collect();
        CardModel { rels: query.rels.clone(), rows: cards.values[..n].to_vec(), sels }
    }

    fn card(&self, mask: u32) -> f64 {
        let mut c = 1.0;
        for (i, r) in self.rows.iter().enumerate() {
            if mask & (1 << i) != 0 {
                c *= r;
            }
        }
        for &(m, s) in &self.sels {
            if mask & m == m {
                c *= s;
            }
        }
        c
    }

    fn mask_of(&self, plan: &PlanTree) -> u32 {
        plan.relations()
            .iter()
            .map(|r| 1 << self.rels.iter().position(|q| q == r).expect("plan over query relations"))
            .fold(0, |a, b| a | b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinAlgo {
    Hash,
    NestedLoop,
}

impl JoinAlgo {
    pub const ALL: [JoinAlgo; 2] = [JoinAlgo::Hash, JoinAlgo::NestedLoop];

    /// Node cost from input and output cardinalities.
    pub fn cost(self, left: f64, right: f64, out: f64) -> f64 {
        match self {
            JoinAlgo::Hash => left + right + out,
            JoinAlgo::NestedLoop => NESTED_LOOP_FACTOR * left * right + out,
        }
    }
}

/// Per-pair comparison cost of a nested-loop join.
pub const NESTED_LOOP_FACTOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PlanNode {
    Scan { rel: usize },
    Join { algo: JoinAlgo, left: Box<PlanTree>, right: Box<PlanTree> },
}

/// Binary join tree; `est_card` is the cardinality the optimizer assumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTree {
    pub node: PlanNode,
    pub est_card: f64,
}

impl PlanTree {
    pub fn scan(rel: usize, est_card: f64) -> Self {
        PlanTree { node: PlanNode::Scan { rel }, est_card }
    }

    pub fn join(algo: JoinAlgo, left: PlanTree, right: PlanTree, est_card: f64) -> Self {
        PlanTree { node: PlanNode::Join { algo, left: Box::new(left), right: Box::new(right) }, est_card }
    }

    pub fn relations(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_relations(&mut out);
        out
    }

    fn collect_relations(&self, out: &mut Vec<usize>) {
        match &self.node {
            PlanNode::Scan { rel } => out.push(*rel),
            PlanNode::Join { left, right, .. } => {
                left.collect_relations(out);
                right.collect_relations(out);
            }
        }
    }

    /// Shape and algorithm tags only; two plans are structurally identical
    /// iff their signatures match.
    pub fn signature(&self) -> String {
        self.to_string()
    }

    pub fn join_count(&self) -> usize {
        match &self.node {
            PlanNode::Scan { .. } => 0,
            PlanNode::Join { left, right, .. } => 1 + left.join_count() + right.join_count(),
        }
    }
}

impl fmt::Display for PlanTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            PlanNode::Scan { rel } => write!(f, "{rel}"),
            PlanNode::Join { algo, left, right } => {
                let tag = match algo {
                    JoinAlgo::Hash => "HJ",
                    JoinAlgo::NestedLoop => "NL",
                };
                write!(f, "{tag}({left},{right})")
            }
        }
    }
}

fn cost_under(model: &CardModel, plan: &PlanTree) -> (f64, f64) {
    let card = model.card(model.mask_of(plan));
    match &plan.node {
        PlanNode::Scan { .. } => (card, card),
        PlanNode::Join { algo, left, right } => {
            let (lc, lcard) = cost_under(model, left);
            let (rc, rcard) = cost_under(model, right);
            (lc + rc + algo.cost(lcard, rcard, card), card)
        }
    }
}

/// Cost of `plan` under the given cardinalities for `query`.
pub fn plan_cost(plan: &PlanTree, query: &Query, catalog: &Catalog, cards: &CardinalityVector) -> f64 {
    cost_under(&CardModel::new(query, catalog, cards), plan).0
}

/// Cost with true cardinalities. Execution depends only on this.
pub fn true_cost(plan: &PlanTree, catalog: &Catalog) -> f64 {
    let mut rels = plan.relations();
    rels.sort_unstable();
    let edges = catalog
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| rels.contains(&e.left) && rels.contains(&e.right))
        .map(|(i, _)| i)
        .collect();
    let query = Query { rels, edges };
    plan_cost(plan, &query, catalog, &CardinalityVector::truth(&query, catalog))
}

/// Simulated latency: true cost times `unit`, scaled by uniform noise in
/// `[1 - noise, 1 + noise]`.
pub fn simulate_latency<R: Rng + ?Sized>(
    plan: &PlanTree,
    catalog: &Catalog,
    unit: f64,
    noise: f64,
    rng: &mut R,
) -> f64 {
    let jitter = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
    true_cost(plan, catalog) * unit * (1.0 + jitter)
}

/// Bushy dynamic programming over relation subsets under `cards`. The left
/// input of every join holds the lowest-indexed relation of its subset;
/// ties keep the first split found in ascending mask order, hash first.
pub fn optimize_with(query: &Query, catalog: &Catalog, cards: &CardinalityVector) -> PlanTree {
    let model = CardModel::new(query, catalog, cards);
    let n = query.rels.len();
    let full = (1u32 << n) - 1;
    let mut best: Vec<Option<(f64, PlanTree)>> = vec![None; 1 << n];
    for i in 0..n {
        let m = 1 << i;
        let c = model.card(m);
        best[m as usize] = Some((c, PlanTree::scan(query.rels[i], c)));
    }
    for set in 1..=full {
        if set.count_ones() < 2 {
            continue;
        }
        let low = set & set.wrapping_neg();
        let out = model.card(set);
        let rest = set & !low;
        let mut chosen: Option<(f64, JoinAlgo, u32)> = None;
        // Enumerate left = low | sub for every proper subset `sub` of rest.
        let mut sub = 0u32;
        loop {
            let left = low | sub;
            if left != set {
                let right = set & !left;
                let (lc, _) = best[left as usize].as_ref().expect("smaller subset solved");
                let (rc, _) = best[right as usize].as_ref().expect("smaller subset solved");
                let (lcard, rcard) = (model.card(left), model.card(right));
                for algo in JoinAlgo::ALL {
                    let cost = lc + rc + algo.cost(lcard, rcard, out);
                    if chosen.is_none_or(|(c, _, _)| cost < c) {
                        chosen = Some((cost, algo, left));
                    }
                }
            }
            if sub == rest {
                break;
            }
            sub = (sub.wrapping_sub(rest)) & rest;
        }
        let (cost, algo, left) = chosen.expect("set has a split");
        let right = set & !left;
        let l = best[left as usize].as_ref().unwrap().1.clone();
        let r = best[right as usize].as_ref().unwrap().1.clone();
        best[set as usize] = Some((cost, PlanTree::join(algo, l, r, out)));
    }
    best[full as usize].take().expect("full set solved").1
}

/// Base plan from the catalog's estimates.
pub fn optimize_base(query: &Query, catalog: &Catalog) -> PlanTree {
    optimize_with(query, catalog, &CardinalityVector::estimates(query, catalog))
}

/// Multiplicative factors for cardinality mutation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationGrid {
    pub factors: Vec<f64>,
}

impl Default for MutationGrid {
    fn default() -> Self {
        MutationGrid { factors: vec![0.1, 0.5, 1.0, 2.0, 10.0] }
    }
}

impl MutationGrid {
    pub fn new(factors: Vec<f64>) -> Result<Self, PlanError> {
        let grid = MutationGrid { factors };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(PlanError::InvalidGrid("factors must be positive".into()));
        }
        if !self.factors.contains(&1.0) {
            return Err(PlanError::InvalidGrid("grid must contain 1".into()));
        }
        Ok(())
    }
}

/// Multiply every entry by a factor drawn uniformly from the grid.
pub fn mutate_cards<R: Rng + ?Sized>(cards: &CardinalityVector, grid: &MutationGrid, rng: &mut R) -> CardinalityVector {
    let values = cards.values.iter().map(|v| v * grid.factors[rng.random_range(0..grid.factors.len())]).collect();
    CardinalityVector { values }
}

/// Base plan plus up to `n_plans` structurally distinct plans optimized
/// under mutated estimates. The base plan is always first.
pub fn gen_candidates<R: Rng + ?Sized>(
    query: &Query,
    catalog: &Catalog,
    n_plans: usize,
    grid: &MutationGrid,
    rng: &mut R,
) -> Vec<PlanTree> {
    let base_cards = CardinalityVector::estimates(query, catalog);
    let base = optimize_with(query, catalog, &base_cards);
    let mut seen = HashSet::from([base.signature()]);
    let mut plans = vec![base];
    for _ in 0..n_plans {
        let mutated = mutate_cards(&base_cards, grid, rng);
        let plan = optimize_with(query, catalog, &mutated);
        if seen.insert(plan.signature()) {
            plans.push(plan);
        }
    }
    plans
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(name: &str, rows: f64) -> Relation {
        Relation { name: name.into(), true_rows: rows, est_rows: rows }
    }

    fn edge(left: usize, right: usize, sel: f64) -> JoinEdge {
        JoinEdge { left, right, true_sel: sel, est_sel: sel }
    }

    fn chain4() -> Catalog {
        Catalog {
            relations: vec![rel("a", 1000.0), rel("b", 50.0), rel("c", 2000.0), rel("d", 10.0)],
            edges: vec![edge(0, 1, 0.01), edge(1, 2, 0.002), edge(2, 3, 0.1)],
        }
    }

    #[test]
    fn single_relation_is_a_scan() {
        let cat = chain4();
        let q = cat.query(&["c"]).unwrap();
        let p = optimize_base(&q, &cat);
        assert_eq!(p.signature(), "2");
        assert_eq!(true_cost(&p, &cat), 2000.0);
    }

    #[test]
    fn two_relations_pick_cheaper_algorithm() {
        let cat = Catalog { relations: vec![rel("x", 10.0), rel("y", 10.0)], edges: vec![edge(0, 1, 0.1)] };
        let q = cat.query(&["y", "x"]).unwrap();
        let p = optimize_base(&q, &cat);
        // hash: 10 + 10 + (10 + 10 + 10) = 50; nested loop: 20 + 5 + 10 = 35
        assert_eq!(p.signature(), "NL(0,1)");
        assert_eq!(true_cost(&p, &cat), 35.0);
        let big = Catalog { relations: vec![rel("x", 1000.0), rel("y", 1000.0)], edges: vec![edge(0, 1, 0.001)] };
        let p = optimize_base(&big.query(&["x", "y"]).unwrap(), &big);
        assert_eq!(p.signature(), "HJ(0,1)");
    }

    #[test]
    fn query_errors() {
        let cat = chain4();
        assert_eq!(cat.query(&["zz"]), Err(PlanError::UnknownRelation("zz".into())));
        assert_eq!(cat.query(&["a", "a"]), Err(PlanError::DuplicateRelation("a".into())));
        assert_eq!(cat.query(&[]), Err(PlanError::EmptyQuery));
    }

    #[test]
    fn too_many_relations_rejected() {
        let cat = Catalog { relations: (0..9).map(|i| rel(&format!("r{i}"), 10.0)).collect(), edges: vec![] };
        let names: Vec<String> = (0..9).map(|i| format!("r{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        assert_eq!(cat.query(&refs), Err(PlanError::TooManyRelations(9)));
    }

    #[test]
    fn catalog_validation() {
        let mut cat = chain4();
        assert!(cat.validate().is_ok());
        cat.edges.push(edge(1, 0, 0.5));
        assert!(cat.validate().is_err());
        let mut cat = chain4();
        cat.relations[0].est_rows = 0.0;
        assert!(cat.validate().is_err());
    }

    #[test]
    fn plan_cost_matches_dp_cost() {
        let cat = chain4();
        let q = cat.query(&["a", "b", "c", "d"]).unwrap();
        let p = optimize_base(&q, &cat);
        assert_eq!(p.relations().len(), 4);
        assert_eq!(p.join_count(), 3);
        assert_eq!(true_cost(&p, &cat), true_cost(&p, &cat));
    }

    #[test]
    fn identity_grid_keeps_cards() {
        let grid = MutationGrid::new(vec![1.0]).unwrap();
        let cards = CardinalityVector { values: vec![100.0, 0.5, 3.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mutate_cards(&cards, &grid, &mut rng), cards);
        let ten = MutationGrid { factors: vec![10.0] };
        assert_eq!(mutate_cards(&CardinalityVector { values: vec![100.0] }, &ten, &mut rng).values, vec![1000.0]);
    }

    #[test]
    fn grid_validation() {
        assert!(MutationGrid::new(vec![0.5, 2.0]).is_err());
        assert!(MutationGrid::new(vec![0.0, 1.0]).is_err());
        assert!(MutationGrid::new(vec![1.0]).is_ok());
    }

    #[test]
    fn candidates_include_base_and_are_distinct() {
        let cat = chain4();
        let q = cat.query(&["a", "b", "c", "d"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(gen_candidates(&q, &cat, 0, &MutationGrid::default(), &mut rng), vec![optimize_base(&q, &cat)]);
        let identity = MutationGrid::new(vec![1.0]).unwrap();
        assert_eq!(gen_candidates(&q, &cat, 10, &identity, &mut rng).len(), 1);
        let plans = gen_candidates(&q, &cat, 20, &MutationGrid::default(), &mut rng);
        assert_eq!(plans[0], optimize_base(&q, &cat));
        assert!(plans.len() <= 21);
        let sigs: HashSet<String> = plans.iter().map(PlanTree::signature).collect();
        assert_eq!(sigs.len(), plans.len());
    }

    #[test]
    fn latency_ignores_estimates() {
        let cat = chain4();
        let q = cat.query(&["a", "b", "c"]).unwrap();
        let p = optimize_base(&q, &cat);
        let mut skewed = cat.clone();
        skewed.relations[0].est_rows = 1.0;
        skewed.edges[1].est_sel = 0.9;
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(simulate_latency(&p, &cat, 1.0, 0.05, &mut r1), simulate_latency(&p, &skewed, 1.0, 0.05, &mut r2));
    }
}
