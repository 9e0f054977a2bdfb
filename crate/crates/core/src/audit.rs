// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain-wise and entity-wise cosine similarity between projected
//! anonymized activations and the true original activations.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::QARecord;
use crate::error::{NspuError, Result};
use crate::lm::ActivationMatrix;
use crate::numeric::{cosine, kahan_sum};
use crate::projector::{project, ProjectorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    ByDomain,
    /// Only records with exactly one entity, grouped by that entity.
    ByEntitySingle,
}

impl Grouping {
    pub fn scope(self) -> &'static str {
        match self {
            Grouping::ByDomain => "domain",
            Grouping::ByEntitySingle => "entity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub scope: String,
    pub group: String,
    pub mean_cosine: f64,
    pub n: usize,
    /// Mean inversion inner loss of the group, when per-row losses are given.
    pub mean_inversion_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub rows: Vec<SimilarityRow>,
    /// Rows dropped because they had no metadata or no group.
    pub skipped: usize,
}

impl SimilarityTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.n).sum()
    }

    /// `scope,group,mean_cosine,n` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,group,mean_cosine,n\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.scope, r.group, r.mean_cosine, r.n);
        }
        out
    }
}

fn group_of(record: &QARecord, grouping: Grouping) -> Option<String> {
    match grouping {
        Grouping::ByDomain => Some(record.domain.name().to_string()),
        Grouping::ByEntitySingle => match record.entities.as_slice() {
            [only] => Some(only.text.clone()),
            _ => None,
        },
    }
}

/// Groups rows of already projected activations against the originals.
pub fn audit_projected(
    projected: &ActivationMatrix,
    orig: &ActivationMatrix,
    records: &[QARecord],
    grouping: Grouping,
    inversion_losses: Option<&[f64]>,
) -> Result<SimilarityTable> {
    if projected.matrix.dim() != orig.matrix.dim() {
        return Err(NspuError::Shape(format!(
            "projected {:?} vs original {:?}",
            projected.matrix.dim(),
            orig.matrix.dim()
        )));
    }
    if projected.sample_ids != orig.sample_ids {
        return Err(NspuError::InvalidInput("activation sample ids do not match".into()));
    }
    if let Some(l) = inversion_losses {
        if l.len() != projected.rows() {
            return Err(NspuError::Shape(format!(
                "{} inversion losses for {} rows",
                l.len(),
                projected.rows()
            )));
        }
    }
    let by_id: HashMap<&str, &QARecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut skipped = 0;
    for (i, id) in projected.sample_ids.iter().enumerate() {
        let Some(group) = by_id.get(id.as_str()).and_then(|r| group_of(r, grouping)) else {
            skipped += 1;
            continue;
        };
        let entry = groups.entry(group).or_default();
        entry.0.push(cosine(projected.matrix.row(i), orig.matrix.row(i)));
        if let Some(l) = inversion_losses {
            entry.1.push(l[i]);
        }
    }
    let rows = groups
        .into_iter()
        .map(|(group, (cos, inv))| SimilarityRow {
            scope: grouping.scope().to_string(),
            group,
            mean_cosine: kahan_sum(cos.iter().copied()) / cos.len() as f64,
            n: cos.len(),
            mean_inversion_loss: inversion_losses.map(|_| kahan_sum(inv.iter().copied()) / inv.len() as f64),
        })
        .collect();
    Ok(SimilarityTable { rows, skipped })
}

/// Projects `anon` and compares each row with the matching row of `orig`.
pub fn audit(
    projector: &ProjectorModel,
    anon: &ActivationMatrix,
    orig: &ActivationMatrix,
    records: &[QARecord],
    grouping: Grouping,
) -> Result<SimilarityTable> {
    if anon.rows() != orig.rows() {
        return Err(NspuError::Shape(format!(
            "{} anonymized rows vs {} original rows",
            anon.rows(),
            orig.rows()
        )));
    }
    audit_projected(&project(projector, anon)?, orig, records, grouping, None)
}
