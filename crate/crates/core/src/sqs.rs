// SPDX-License-Identifier: MIT OR Apache-2.0

//! Membership-style evaluation: mean CLM losses on the retain, forget and
//! non-member sets, and SQS before and after unlearning.

use serde::{Deserialize, Serialize};

use crate::corpus::{QARecord, SplitSpec};
use crate::error::{NspuError, Result};
use crate::lm::LanguageModel;
use crate::metrics::sqs;
use crate::numeric::kahan_sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClmLosses {
    pub m_r: f64,
    pub m_f: f64,
    pub m_nm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqsResult {
    /// Losses of the unlearned model.
    pub m_r: f64,
    pub m_f: f64,
    pub m_nm: f64,
    pub target: ClmLosses,
    pub sqs_before: f64,
    pub sqs_after: f64,
}

/// Mean over records of the mean per-token NLL of `question answer`.
///
/// Per-record values are sorted before summation, so the result does not
/// depend on record order.
pub fn clm_loss(model: &LanguageModel, records: &[&QARecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(NspuError::EmptyDataset("no records for CLM loss".into()));
    }
    let texts: Vec<String> = records.iter().map(|r| r.full_text()).collect();
    let mut v = model.text_nll(&texts)?;
    v.sort_by(f64::total_cmp);
    Ok(kahan_sum(v.iter().copied()) / v.len() as f64)
}

pub fn clm_losses(model: &LanguageModel, split: &SplitSpec, corpus: &[QARecord]) -> Result<ClmLosses> {
    Ok(ClmLosses {
        m_r: clm_loss(model, &split.retain_records(corpus))?,
        m_f: clm_loss(model, &split.forget_records(corpus))?,
        m_nm: clm_loss(model, &split.non_member_records(corpus))?,
    })
}

/// CLM losses of both models on all three sets and the two SQS values.
pub fn run_sqs(
    target: &LanguageModel,
    unlearned: &LanguageModel,
    split: &SplitSpec,
    corpus: &[QARecord],
) -> Result<SqsResult> {
    if target.tokenizer != unlearned.tokenizer {
        return Err(NspuError::IncompatibleModels("models use different vocabularies".into()));
    }
    let before = clm_losses(target, split, corpus)?;
    let after = clm_losses(unlearned, split, corpus)?;
    Ok(SqsResult {
        m_r: after.m_r,
        m_f: after.m_f,
        m_nm: after.m_nm,
        target: before,
        sqs_before: sqs(before.m_r, before.m_f, before.m_nm)?,
        sqs_after: sqs(after.m_r, after.m_f, after.m_nm)?,
    })
}
