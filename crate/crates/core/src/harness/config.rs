// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::cc_adaptive::ShiftScenario;
use crate::gate::{parse_predicates, GatingNet, Predicate, Schema};
use crate::model_select::{EvolutionParams, ModelSpace, SelectRequest};
use crate::plan_opt::{Catalog, JoinEdge, MutationGrid, Relation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "select")]
    Select,
    #[serde(rename = "cc-sim")]
    CcSim,
    #[serde(rename = "recover-demo")]
    RecoverDemo,
    #[serde(rename = "optd")]
    Optd,
    #[serde(rename = "gate")]
    Gate,
    #[serde(rename = "full")]
    Full,
}

impl ScenarioKind {
    pub const MODULES: [ScenarioKind; 5] =
        [ScenarioKind::Select, ScenarioKind::CcSim, ScenarioKind::RecoverDemo, ScenarioKind::Optd, ScenarioKind::Gate];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Select => "select",
            ScenarioKind::CcSim => "cc-sim",
            ScenarioKind::RecoverDemo => "recover-demo",
            ScenarioKind::Optd => "optd",
            ScenarioKind::Gate => "gate",
            ScenarioKind::Full => "full",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        [ScenarioKind::Full]
            .into_iter()
            .chain(Self::MODULES)
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown scenario kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioHeader {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// Values per architecture dimension.
    pub dims: Vec<u32>,
    pub rho: f64,
    pub sigma: f64,
    /// Blend two proxies instead of one.
    pub blended: bool,
    pub score_cost: f64,
    pub epoch_cost: f64,
    /// Noise on observed training accuracy.
    pub train_sigma: f64,
    pub budget: f64,
    pub phi: f64,
    pub eta: usize,
    pub u_init: u64,
    pub workers: usize,
    pub evolution: EvolutionParams,
    /// Report regret against the brute-force best genome.
    pub oracle: bool,
    /// Slots in the training-data feed.
    pub feed_capacity: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        let req = SelectRequest::default();
        SelectSection {
            dims: vec![4, 4, 4, 4],
            rho: 0.8,
            sigma: 0.1,
            blended: true,
            score_cost: 1.0,
            epoch_cost: 4.0,
            train_sigma: 0.005,
            budget: req.budget,
            phi: req.phi,
            eta: req.eta,
            u_init: req.u_init,
            workers: req.workers,
            evolution: req.evolution,
            oracle: true,
            feed_capacity: 4,
        }
    }
}

impl SelectSection {
    pub fn request(&self) -> SelectRequest {
        SelectRequest {
            budget: self.budget,
            phi: self.phi,
            eta: self.eta,
            u_init: self.u_init,
            workers: self.workers,
            evolution: self.evolution,
        }
    }

    fn validate(&self) -> Result<(), String> {
        ModelSpace::new(self.dims.clone(), 0).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err("rho must lie in [0, 1]".into());
        }
        for (name, v) in [("sigma", self.sigma), ("train_sigma", self.train_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and non-negative"));
            }
        }
        for (name, v) in [("score_cost", self.score_cost), ("epoch_cost", self.epoch_cost), ("budget", self.budget)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and positive"));
            }
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err("phi must lie in (0, 1)".into());
        }
        if self.eta < 2 || self.u_init == 0 {
            return Err("eta >= 2 and u_init >= 1 required".into());
        }
        if self.workers == 0 || self.feed_capacity == 0 {
            return Err("workers and feed_capacity must be positive".into());
        }
        if self.evolution.population == 0 || self.evolution.sample == 0 {
            return Err("evolution population and sample must be positive".into());
        }
        if self.oracle && ModelSpace::new(self.dims.clone(), 0).map(|s| s.size()).unwrap_or(0) > 1 << 20 {
            return Err("oracle needs a space of at most 2^20 genomes".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverSection {
    pub txns: usize,
    pub key_space: u32,
    pub writes_per_txn: usize,
    pub anchor_interval: u64,
    /// Distinct stored records to corrupt.
    pub tampered_keys: usize,
    /// Single-bit flips applied, one at a time, to copies of the log file.
    pub log_bit_flips: usize,
    /// Log file name inside the output directory.
    pub log_file: String,
}

impl Default for RecoverSection {
    fn default() -> Self {
        RecoverSection {
            txns: 200,
            key_space: 32,
            writes_per_txn: 3,
            anchor_interval: 4,
            tampered_keys: 4,
            log_bit_flips: 64,
            log_file: "recovery.log".into(),
        }
    }
}

impl RecoverSection {
    fn validate(&self) -> Result<(), String> {
        if self.key_space == 0 || self.writes_per_txn == 0 || self.anchor_interval == 0 {
            return Err("key_space, writes_per_txn and anchor_interval must be positive".into());
        }
        if self.tampered_keys > self.key_space as usize {
            return Err("tampered_keys exceeds key_space".into());
        }
        let name = Path::new(&self.log_file);
        if self.log_file.is_empty() || name.components().count() != 1 || name.file_name().is_none() {
            return Err("log_file must be a plain file name".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptdSection {
    /// Catalog file (TOML or JSON), relative to the config file.
    pub catalog_file: Option<PathBuf>,
    /// Inline catalog, used when no file is given.
    pub catalog: Option<Catalog>,
    /// Relations to join; all catalog relations when empty.
    pub query: Vec<String>,
    pub n_plans: usize,
    pub grid: Vec<f64>,
    pub episodes: usize,
    /// Latency per unit of true cost.
    pub latency_unit: f64,
    /// Relative latency noise, uniform in [-noise, noise].
    pub noise: f64,
    pub ucb_c: f64,
}

impl Default for OptdSection {
    fn default() -> Self {
        OptdSection {
            catalog_file: None,
            catalog: None,
            query: Vec::new(),
            n_plans: 20,
            grid: MutationGrid::default().factors,
            episodes: 200,
            latency_unit: 0.001,
            noise: 0.05,
            ucb_c: 0.5,
        }
    }
}

/// Four-relation chain with one badly underestimated join.
pub fn demo_catalog() -> Catalog {
    let rel = |name: &str, rows: f64| Relation { name: name.into(), true_rows: rows, est_rows: rows };
    let edge = |left, right, true_sel, est_sel| JoinEdge { left, right, true_sel, est_sel };
    Catalog {
        relations: vec![
            rel("orders", 20_000.0),
            rel("customer", 2_000.0),
            rel("lineitem", 80_000.0),
            rel("nation", 25.0),
        ],
        edges: vec![
            edge(0, 1, 1.0 / 2_000.0, 1.0 / 2_000.0),
            edge(0, 2, 1.0 / 20_000.0, 1.0 / 2_000_000.0),
            edge(1, 3, 1.0 / 25.0, 1.0 / 25.0),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub schema_file: Option<PathBuf>,
    pub schema: Option<Schema>,
    /// JSON net weights; a seeded random net is built when absent.
    pub net_file: Option<PathBuf>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub experts: usize,
    pub k_max: usize,
    pub tau: f64,
    pub predicate: String,
    pub features: Vec<f64>,
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection {
            schema_file: None,
            schema: None,
            net_file: None,
            embed_dim: 4,
            hidden: 8,
            experts: 4,
            k_max: 2,
            tau: 0.05,
            predicate: "gender = Male AND age = 24".into(),
            features: vec![1.0, 0.5, -0.25],
        }
    }
}

/// Schema used when none is configured.
pub fn demo_schema() -> Schema {
    use crate::gate::{AttrKind, Attribute};
    let cat = |name: &str, vocab: &[&str]| Attribute {
        name: name.into(),
        kind: AttrKind::Categorical { vocabulary: vocab.iter().map(|s| s.to_string()).collect() },
    };
    Schema {
        attributes: vec![
            cat("gender", &["Female", "Male"]),
            Attribute { name: "age".into(), kind: AttrKind::Numeric { edges: vec![18.0, 30.0, 50.0] } },
            cat("city", &["a", "b", "c"]),
        ],
    }
}

/// Parsed scenario file. Sections absent from the file take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioHeader,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub cc_sim: ShiftScenario,
    #[serde(default)]
    pub recover: RecoverSection,
    #[serde(default)]
    pub optd: OptdSection,
    #[serde(default)]
    pub gate: GateSection,
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub kind: Option<ScenarioKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Gate inputs after loading files and parsing the predicate.
#[derive(Clone, Debug)]
pub struct GateInputs {
    pub schema: Schema,
    pub net: Option<GatingNet>,
    pub predicates: Vec<Predicate>,
}

/// A fully checked config: every referenced file read and every parameter
/// validated. Building one has no side effects.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub out: PathBuf,
    pub config: ScenarioConfig,
    pub catalog: Catalog,
    pub gate: GateInputs,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Resolve overrides and referenced files against `base` and validate
    /// the sections the chosen scenario will run.
    pub fn prepare(self, base: &Path, opts: &RunOptions) -> Result<Prepared, HarnessError> {
        let kind = opts.kind.unwrap_or(self.scenario.kind);
        let seed = opts.seed.unwrap_or(self.scenario.seed);
        let out = match (&opts.out, &self.scenario.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base.join(o),
            (None, None) => base.join("out"),
        };
        let runs = |k: ScenarioKind| kind == k || kind == ScenarioKind::Full;
        let cfg_err = |section: &str, e: String| HarnessError::Config(format!("[{section}] {e}"));
        if runs(ScenarioKind::Select) {
            self.select.validate().map_err(|e| cfg_err("select", e))?;
        }
        if runs(ScenarioKind::CcSim) {
            self.cc_sim.validate().map_err(|e| cfg_err("cc_sim", e))?;
        }
        if runs(ScenarioKind::RecoverDemo) {
            self.recover.validate().map_err(|e| cfg_err("recover", e))?;
        }
        let catalog = if runs(ScenarioKind::Optd) {
            self.load_optd(base).map_err(|e| cfg_err("optd", e))?
        } else {
            Catalog::default()
        };
        let gate = if runs(ScenarioKind::Gate) {
            self.load_gate(base).map_err(|e| cfg_err("gate", e))?
        } else {
            GateInputs { schema: Schema::default(), net: None, predicates: Vec::new() }
        };
        Ok(Prepared { kind, seed, out, config: self, catalog, gate })
    }

    fn load_optd(&self, base: &Path) -> Result<Catalog, String> {
        let o = &self.optd;
        let catalog = match (&o.catalog_file, &o.catalog) {
            (Some(_), Some(_)) => return Err("give catalog_file or catalog, not both".into()),
            (Some(f), None) => read_structured(&base.join(f))?,
            (None, Some(c)) => c.clone(),
            (None, None) => demo_catalog(),
        };
        catalog.validate().map_err(|e| e.to_string())?;
        let names: Vec<&str> = if o.query.is_empty() {
            catalog.relations.iter().map(|r| r.name.as_str()).collect()
        } else {
            o.query.iter().map(String::as_str).collect()
        };
        catalog.query(&names).map_err(|e| e.to_string())?;
        MutationGrid::new(o.grid.clone()).map_err(|e| e.to_string())?;
        if o.episodes == 0 {
            return Err("episodes must be positive".into());
        }
        if !(o.latency_unit > 0.0 && o.latency_unit.is_finite()) {
            return Err("latency_unit must be finite and positive".into());
        }
        if !(0.0..1.0).contains(&o.noise) {
            return Err("noise must lie in [0, 1)".into());
        }
        if !(o.ucb_c >= 0.0 && o.ucb_c.is_finite()) {
            return Err("ucb_c must be finite and non-negative".into());
        }
        Ok(catalog)
    }

    fn load_gate(&self, base: &Path) -> Result<GateInputs, String> {
        let g = &self.gate;
        let schema = match (&g.schema_file, &g.schema) {
            (Some(_), Some(_)) => return Err("give schema_file or schema, not both".into()),
            (Some(f), None) => read_structured(&base.join(f))?,
            (None, Some(s)) => s.clone(),
            (None, None) => demo_schema(),
        };
        schema.validate().map_err(|e| e.to_string())?;
        let net = match &g.net_file {
            Some(f) => {
                let net: GatingNet = read_structured(&base.join(f))?;
                net.validate().map_err(|e| e.to_string())?;
                net.check_schema(&schema).map_err(|e| e.to_string())?;
                Some(net)
            }
            None => {
                if g.experts == 0 || g.embed_dim == 0 || g.hidden == 0 || g.k_max == 0 {
                    return Err("experts, embed_dim, hidden and k_max must be positive".into());
                }
                if !(0.0..=1.0).contains(&g.tau) {
                    return Err("tau must lie in [0, 1]".into());
                }
                None
            }
        };
        if g.features.iter().any(|x| !x.is_finite()) {
            return Err("features must be finite".into());
        }
        let predicates = parse_predicates(&g.predicate).map_err(|e| e.to_string())?;
        crate::gate::encode_query(&predicates, &schema).map_err(|e| e.to_string())?;
        Ok(GateInputs { schema, net, predicates })
    }
}

/// Read a JSON file, or TOML for any other extension.
fn read_structured<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prep(text: &str) -> Result<Prepared, HarnessError> {
        ScenarioConfig::parse(text)?.prepare(Path::new("/nonexistent"), &RunOptions::default())
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let p = prep("[scenario]\nkind = \"full\"\nseed = 3\n").unwrap();
        assert_eq!(p.kind, ScenarioKind::Full);
        assert_eq!(p.seed, 3);
        assert_eq!(p.out, Path::new("/nonexistent/out"));
        assert_eq!(p.catalog, demo_catalog());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(prep("[scenario]\nkind = \"select\"\n[select]\nbudgett = 5\n").is_err());
        assert!(prep("[scenario]\nkind = \"bogus\"\n").is_err());
        assert!(prep("[scenario]\nkind = \"select\"\n[extra]\n").is_err());
    }

    #[test]
    fn only_selected_sections_validated() {
        let bad_select = "[scenario]\nkind = \"cc-sim\"\n[select]\neta = 1\n";
        assert!(prep(bad_select).is_ok());
        assert!(prep(&bad_select.replace("cc-sim", "select")).is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[scenario]\nkind = \"cc-sim\"\n[cc_sim]\nwindows = 2\nshift_at = 5\n",
            "[scenario]\nkind = \"optd\"\n[optd]\ngrid = [0.5, 2.0]\n",
            "[scenario]\nkind = \"optd\"\n[optd]\nquery = [\"missing\"]\n",
            "[scenario]\nkind = \"gate\"\n[gate]\npredicate = \"gender = Male OR age = 3\"\n",
            "[scenario]\nkind = \"gate\"\n[gate]\nnet_file = \"absent.json\"\n",
            "[scenario]\nkind = \"recover-demo\"\n[recover]\nlog_file = \"../x\"\n",
        ] {
            assert!(matches!(prep(text), Err(HarnessError::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides_win() {
        let opts = RunOptions { kind: Some(ScenarioKind::Gate), seed: Some(9), out: Some("elsewhere".into()) };
        let p = ScenarioConfig::parse("[scenario]\nkind = \"select\"\nout = \"o\"\n")
            .unwrap()
            .prepare(Path::new("base"), &opts)
            .unwrap();
        assert_eq!((p.kind, p.seed, p.out), (ScenarioKind::Gate, 9, PathBuf::from("elsewhere")));
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in ScenarioKind::MODULES {
            assert_eq!(k.name().parse::<ScenarioKind>().unwrap(), k);
        }
    }
}
