// SPDX-License-Identifier: Apache-2.0

//! Predicate-aware sparse gating: encode a conjunctive query into tokens,
//! compute sparse expert weights, and evaluate only the active experts.

mod experts;
mod net;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use experts::{sliced_predict, Expert, ExpertSet, LinearExpert};
pub use net::{gate, sparse_softmax, GateWeights, GatingNet, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("unsupported query: {0}")]
    UnsupportedQuery(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("value `{value}` is not valid for attribute `{attr}`")]
    InvalidValue { attr: String, value: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid gate parameter: {0}")]
    InvalidParam(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrKind {
    Categorical {
        vocabulary: Vec<String>,
    },
    /// Strictly increasing edges split the line into `edges.len() + 1` buckets.
    Numeric {
        edges: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
}

impl Attribute {
    /// Distinct tokens including the padding token 0.
    pub fn vocab_size(&self) -> usize {
        1 + match &self.kind {
            AttrKind::Categorical { vocabulary } => vocabulary.len(),
            AttrKind::Numeric { edges } => edges.len() + 1,
        }
    }

    fn bucket(edges: &[f64], v: f64) -> u32 {
        1 + edges.partition_point(|e| *e <= v) as u32
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<Attribute>,
}

impl Schema {
    pub fn validate(&self) -> Result<(), GateError> {
        let bad = |m: String| Err(GateError::InvalidSchema(m));
        if self.attributes.is_empty() {
            return bad("no attributes".into());
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return bad(format!("duplicate attribute `{}`", a.name));
            }
            match &a.kind {
                AttrKind::Categorical { vocabulary } => {
                    if vocabulary.is_empty() {
                        return bad(format!("`{}` has an empty vocabulary", a.name));
                    }
                    if vocabulary.iter().enumerate().any(|(j, v)| vocabulary[..j].contains(v)) {
                        return bad(format!("`{}` repeats a vocabulary entry", a.name));
                    }
                }
                AttrKind::Numeric { edges } => {
                    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                        return bad(format!("`{}` edges must be finite and strictly increasing", a.name));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.attributes.iter().map(Attribute::vocab_size).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Eq(String),
    /// Closed numeric range.
    Range(f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub attr: String,
    pub cond: Condition,
}

/// Parse `attr = v AND attr in [lo, hi] AND ...`. Disjunctions are rejected.
pub fn parse_predicates(text: &str) -> Result<Vec<Predicate>, GateError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let words: Vec<&str> = trimmed.split_whitespace().collect();
    if words.iter().any(|w| w.eq_ignore_ascii_case("or")) || trimmed.contains("||") {
        return Err(GateError::UnsupportedQuery("disjunction".into()));
    }
    let mut clauses = vec![Vec::new()];
    for w in words {
        if w.eq_ignore_ascii_case("and") || w == "&&" {
            clauses.push(Vec::new());
        } else {
            clauses.last_mut().expect("nonempty").push(w);
        }
    }
    clauses.into_iter().map(|c| parse_clause(&c.join(" "))).collect()
}

fn parse_clause(clause: &str) -> Result<Predicate, GateError> {
    let malformed = || GateError::UnsupportedQuery(format!("cannot parse `{clause}`"));
    if let Some((attr, value)) = clause.split_once('=') {
        let (attr, value) = (attr.trim(), value.trim().trim_matches(|c| c == '\'' || c == '"'));
        if attr.is_empty() || value.is_empty() {
            return Err(malformed());
        }
        return Ok(Predicate { attr: attr.into(), cond: Condition::Eq(value.into()) });
    }
    let lower = clause.to_ascii_lowercase();
    let at = lower.find(" in ").ok_or_else(malformed)?;
    let attr = clause[..at].trim();
    let body = clause[at + 4..].trim();
    let inner = body.strip_prefix('[').and_then(|b| b.strip_suffix(']')).ok_or_else(malformed)?;
    let (lo, hi) = inner.split_once(',').ok_or_else(malformed)?;
    let lo: f64 = lo.trim().parse().map_err(|_| malformed())?;
    let hi: f64 = hi.trim().parse().map_err(|_| malformed())?;
    if attr.is_empty() || lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(malformed());
    }
    Ok(Predicate { attr: attr.into(), cond: Condition::Range(lo, hi) })
}

/// One token per schema attribute; 0 marks an attribute without a predicate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEncoding {
    pub tokens: Vec<u32>,
}

pub fn encode_query(predicates: &[Predicate], schema: &Schema) -> Result<QueryEncoding, GateError> {
    let mut tokens = vec![0u32; schema.len()];
    let mut used = vec![false; schema.len()];
    for p in predicates {
        let i = schema
            .attributes
            .iter()
            .position(|a| a.name == p.attr)
            .ok_or_else(|| GateError::UnknownAttribute(p.attr.clone()))?;
        if std::mem::replace(&mut used[i], true) {
            return Err(GateError::UnsupportedQuery(format!("two predicates on `{}`", p.attr)));
        }
        let attr = &schema.attributes[i];
        let invalid = |value: String| GateError::InvalidValue { attr: attr.name.clone(), value };
        tokens[i] = match (&attr.kind, &p.cond) {
            (AttrKind::Categorical { vocabulary }, Condition::Eq(v)) => {
                1 + vocabulary.iter().position(|w| w == v).ok_or_else(|| invalid(v.clone()))? as u32
            }
            (AttrKind::Categorical { .. }, Condition::Range(lo, hi)) => {
                return Err(invalid(format!("[{lo}, {hi}]")));
            }
            (AttrKind::Numeric { edges }, Condition::Eq(v)) => {
                let x: f64 = v.parse().map_err(|_| invalid(v.clone()))?;
                Attribute::bucket(edges, x)
            }
            (AttrKind::Numeric { edges }, Condition::Range(lo, hi)) => {
                let (a, b) = (Attribute::bucket(edges, *lo), Attribute::bucket(edges, *hi));
                if a != b {
                    return Err(GateError::UnsupportedQuery(format!(
                        "range [{lo}, {hi}] on `{}` spans several buckets",
                        attr.name
                    )));
                }
                a
            }
        };
    }
    Ok(QueryEncoding { tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn people() -> Schema {
        Schema {
            attributes: vec![
                Attribute {
                    name: "gender".into(),
                    kind: AttrKind::Categorical { vocabulary: vec!["Female".into(), "Male".into()] },
                },
                Attribute { name: "age".into(), kind: AttrKind::Numeric { edges: vec![18.0, 30.0, 50.0] } },
                Attribute {
                    name: "city".into(),
                    kind: AttrKind::Categorical { vocabulary: vec!["a".into(), "b".into(), "c".into()] },
                },
            ],
        }
    }

    #[test]
    fn empty_query_is_all_padding() {
        let enc = encode_query(&parse_predicates("").unwrap(), &people()).unwrap();
        assert_eq!(enc.tokens, vec![0, 0, 0]);
    }

    #[test]
    fn categorical_and_numeric_tokens() {
        let enc = encode_query(&parse_predicates("gender = Male AND age = 24").unwrap(), &people()).unwrap();
        assert_eq!(enc.tokens, vec![2, 2, 0]);
    }

    #[test]
    fn same_bucket_same_encoding() {
        let s = people();
        let a = encode_query(&parse_predicates("age = 24").unwrap(), &s).unwrap();
        let b = encode_query(&parse_predicates("age = 25").unwrap(), &s).unwrap();
        let c = encode_query(&parse_predicates("age in [19, 29]").unwrap(), &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let low = encode_query(&parse_predicates("age = 3").unwrap(), &s).unwrap();
        let high = encode_query(&parse_predicates("age = 80").unwrap(), &s).unwrap();
        assert_eq!((low.tokens[1], high.tokens[1]), (1, 4));
    }

    #[test]
    fn unsupported_shapes() {
        let s = people();
        assert!(matches!(parse_predicates("age = 3 OR age = 4"), Err(GateError::UnsupportedQuery(_))));
        let two = parse_predicates("age = 3 and age = 4").unwrap();
        assert!(matches!(encode_query(&two, &s), Err(GateError::UnsupportedQuery(_))));
        let wide = parse_predicates("age in [10, 40]").unwrap();
        assert!(matches!(encode_query(&wide, &s), Err(GateError::UnsupportedQuery(_))));
        let unknown = parse_predicates("height = 3").unwrap();
        assert!(matches!(encode_query(&unknown, &s), Err(GateError::UnknownAttribute(_))));
        let bad = parse_predicates("gender = Other").unwrap();
        assert!(matches!(encode_query(&bad, &s), Err(GateError::InvalidValue { .. })));
        assert!(parse_predicates("age >> 3").is_err());
    }

    #[test]
    fn schema_validation() {
        assert!(people().validate().is_ok());
        let mut s = people();
        s.attributes[1].kind = AttrKind::Numeric { edges: vec![3.0, 3.0] };
        assert!(s.validate().is_err());
        let mut s = people();
        s.attributes[0].kind = AttrKind::Categorical { vocabulary: vec![] };
        assert!(s.validate().is_err());
        assert_eq!(people().vocab_sizes(), vec![3, 5, 4]);
    }

    #[test]
    fn schema_serde_roundtrip() {
        let s = people();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Schema>(&json).unwrap(), s);
    }
}
