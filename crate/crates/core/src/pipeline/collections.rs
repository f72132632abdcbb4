//! Named views over ingested records, with field-chain links between them.
//!
//! Rows are JSON objects. A link chain walks from each row through one or
//! more collections: hop `k` takes `field` from the row reached at hop
//! `k - 1` (the base row for the first hop) and finds the first row of the
//! target collection whose `target_field` equals it. Every reached row is
//! attached to the base row under the target collection's name; a row that
//! cannot be followed is kept, with `null` for the remaining hops, and
//! counted as a miss at the hop where the chain broke.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use serde_json::Value;

use crate::model::Dataset;

use super::config::{FieldFilter, LinkHop};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinkError {
    #[error("no row of `{collection}` has field `{field}`")]
    UnknownField { collection: String, field: String },
    #[error("unknown collection `{0}`")]
    UnknownCollection(String),
}

impl LinkError {
    pub fn code(&self) -> &'static str {
        match self {
            LinkError::UnknownField { .. } => "pipeline.UnknownField",
            LinkError::UnknownCollection(_) => "pipeline.UnknownCollection",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Collection {
    pub name: String,
    pub rows: Vec<Value>,
}

impl Collection {
    pub fn new(name: impl Into<String>, rows: Vec<Value>) -> Self {
        Collection {
            name: name.into(),
            rows,
        }
    }

    fn has_field(&self, field: &str) -> bool {
        self.rows.iter().any(|r| r.get(field).is_some())
    }

    /// One JSON row per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("JSON values serialize"));
            out.push('\n');
        }
        out
    }
}

/// Base collections, one per record kind, as JSON rows.
pub fn record_collections(ds: &Dataset) -> BTreeMap<String, Collection> {
    fn rows<T: Serialize>(items: &[T]) -> Vec<Value> {
        items
            .iter()
            .map(|t| serde_json::to_value(t).expect("records serialize"))
            .collect()
    }
    [
        ("tests", rows(&ds.tests)),
        ("runs", rows(&ds.runs)),
        ("bugs", rows(&ds.bugs)),
        ("commits", rows(&ds.commits)),
        ("telemetry", rows(&ds.telemetry)),
    ]
    .into_iter()
    .map(|(n, r)| (n.to_string(), Collection::new(n, r)))
    .collect()
}

pub fn filter_rows(rows: &[Value], filters: &[FieldFilter]) -> Vec<Value> {
    rows.iter()
        .filter(|r| filters.iter().all(|f| r.get(&f.field) == Some(&f.equals)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkedView {
    pub rows: Vec<Value>,
    /// Rows whose chain broke at each hop.
    pub misses: Vec<usize>,
}

impl LinkedView {
    pub fn total_misses(&self) -> usize {
        self.misses.iter().sum()
    }
}

/// Hashable form of a scalar join key; objects and arrays never match.
fn key_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(format!("s:{s}")),
        Value::Number(n) => Some(format!("n:{n}")),
        Value::Bool(b) => Some(format!("b:{b}")),
        _ => None,
    }
}

/// Left-joins `base` along `chain`.
pub fn link_collections(
    base: &Collection,
    chain: &[LinkHop],
    collections: &BTreeMap<String, Collection>,
) -> Result<LinkedView, LinkError> {
    let mut targets = Vec::with_capacity(chain.len());
    let mut prev = base;
    for hop in chain {
        let target = collections
            .get(&hop.target)
            .ok_or_else(|| LinkError::UnknownCollection(hop.target.clone()))?;
        let unknown = |c: &Collection, field: &str| LinkError::UnknownField {
            collection: c.name.clone(),
            field: field.to_string(),
        };
        if !prev.rows.is_empty() && !prev.has_field(&hop.field) {
            return Err(unknown(prev, &hop.field));
        }
        if !target.rows.is_empty() && !target.has_field(hop.target_field()) {
            return Err(unknown(target, hop.target_field()));
        }
        let mut index: HashMap<String, &Value> = HashMap::new();
        for r in &target.rows {
            if let Some(k) = r.get(hop.target_field()).and_then(key_of) {
                index.entry(k).or_insert(r);
            }
        }
        targets.push(index);
        prev = target;
    }

    let mut misses = vec![0; chain.len()];
    let rows = base
        .rows
        .iter()
        .map(|row| {
            let mut out = row.clone();
            let mut cur = Some(row);
            for (k, hop) in chain.iter().enumerate() {
                let next = cur
                    .and_then(|c| c.get(&hop.field))
                    .and_then(key_of)
                    .and_then(|key| targets[k].get(&key).copied());
                if cur.is_some() && next.is_none() {
                    misses[k] += 1;
                }
                if let Value::Object(m) = &mut out {
                    m.insert(hop.target.clone(), next.cloned().unwrap_or(Value::Null));
                }
                cur = next;
            }
            out
        })
        .collect();
    Ok(LinkedView { rows, misses })
}
