// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unlearning metrics: perplexity/HPS, truth ratio/CES, ROUGE-L/HRS,
//! CNLL/HCNLL, SQS and the aggregate score.
//!
//! ```text
//! G_F  = ln(ppl_unl_f / (ppl_ori_f + eps))       C_R  analogous on retain
//! HPS  = 2 G_F / (G_F C_R + 1)
//! CES  = TR_r^unl / TR_r^orig + 1 - TR_f^unl / TR_f^orig
//! HRS  = 2 RR / (FR RR + 1)
//! G_FL = ln(cnll_unl_f / (cnll_tgt_f + eps) + eps)
//! SQS  = |M_R - M_F| / (|M_R - M_F| + |M_NM - M_F|)
//! ```

use serde::{Deserialize, Serialize};

use crate::corpus::QARecord;
use crate::error::{NspuError, Result};
use crate::lm::tokenizer::split_words;
use crate::lm::LanguageModel;
use crate::numeric::KahanSum;

pub const DEFAULT_EPSILON: f64 = 1e-5;

// ----------------------------------------------------------------------------
// Scalar metrics
// ----------------------------------------------------------------------------

/// Token-weighted perplexity over rows of per-token log-probabilities.
pub fn perplexity(rows: &[Vec<f64>]) -> Result<f64> {
    check_rows(rows)?;
    let mut nll = KahanSum::default();
    let mut tokens = 0usize;
    for row in rows {
        for &lp in row {
            nll.add(-lp);
        }
        tokens += row.len();
    }
    Ok((nll.total() / tokens as f64).exp())
}

/// Sample-weighted mean of per-row mean negative log-probability.
pub fn cnll(rows: &[Vec<f64>]) -> Result<f64> {
    check_rows(rows)?;
    let mut total = KahanSum::default();
    for row in rows {
        let mut s = KahanSum::default();
        for &lp in row {
            s.add(-lp);
        }
        total.add(s.total() / row.len() as f64);
    }
    Ok(total.total() / rows.len() as f64)
}

fn check_rows(rows: &[Vec<f64>]) -> Result<()> {
    if rows.is_empty() {
        return Err(NspuError::EmptyDataset("no log-probability rows".into()));
    }
    if rows.iter().any(|r| r.is_empty()) {
        return Err(NspuError::EmptyDataset("empty log-probability row".into()));
    }
    Ok(())
}

/// `2 g / (g c + 1)`.
pub fn harmonic(gain: f64, cost: f64) -> f64 {
    2.0 * gain / (gain * cost + 1.0)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(NspuError::InvalidInput(format!(
            "{name} must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// Returns `(G_F, C_R, HPS)`.
pub fn hps(
    ppl_ori_f: f64,
    ppl_unl_f: f64,
    ppl_ori_r: f64,
    ppl_unl_r: f64,
    eps: f64,
) -> Result<(f64, f64, f64)> {
    for (n, v) in [
        ("ppl_ori_forget", ppl_ori_f),
        ("ppl_unl_forget", ppl_unl_f),
        ("ppl_ori_retain", ppl_ori_r),
        ("ppl_unl_retain", ppl_unl_r),
    ] {
        positive(n, v)?;
    }
    let g = (ppl_unl_f / (ppl_ori_f + eps)).ln();
    let c = (ppl_unl_r / (ppl_ori_r + eps)).ln();
    Ok((g, c, harmonic(g, c)))
}

/// Returns `(RS, FI, CES)`.
pub fn ces(tr_orig_r: f64, tr_unl_r: f64, tr_orig_f: f64, tr_unl_f: f64) -> Result<(f64, f64, f64)> {
    positive("tr_orig_retain", tr_orig_r)?;
    positive("tr_orig_forget", tr_orig_f)?;
    let rs = tr_unl_r / tr_orig_r;
    let fi = 1.0 - tr_unl_f / tr_orig_f;
    Ok((rs, fi, rs + fi))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(x: &[T], y: &[T]) -> usize {
    let mut prev = vec![0usize; y.len() + 1];
    let mut cur = vec![0usize; y.len() + 1];
    for a in x {
        for (j, b) in y.iter().enumerate() {
            cur[j + 1] = if a == b {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[y.len()]
}

/// `2 LCS / (m + n)`; zero for two empty sequences.
pub fn rouge_l<T: PartialEq>(reference: &[T], candidate: &[T]) -> f64 {
    let total = reference.len() + candidate.len();
    if total == 0 {
        return 0.0;
    }
    2.0 * lcs_len(reference, candidate) as f64 / total as f64
}

/// Word-level ROUGE-L between two strings.
pub fn rouge_l_text(reference: &str, candidate: &str) -> f64 {
    rouge_l(&split_words(reference), &split_words(candidate))
}

/// Returns `(RR, FR, HRS)`.
pub fn hrs(r_orig_r: f64, r_unl_r: f64, r_orig_f: f64, r_unl_f: f64) -> Result<(f64, f64, f64)> {
    positive("rouge_orig_retain", r_orig_r)?;
    positive("rouge_orig_forget", r_orig_f)?;
    let rr = r_unl_r / r_orig_r;
    let fr = r_unl_f / r_orig_f;
    Ok((rr, fr, harmonic(rr, fr)))
}

/// Returns `(G_FL, C_RL, HCNLL)`.
pub fn hcnll(
    cnll_tgt_f: f64,
    cnll_unl_f: f64,
    cnll_tgt_r: f64,
    cnll_unl_r: f64,
    eps: f64,
) -> Result<(f64, f64, f64)> {
    for (n, v) in [
        ("cnll_target_forget", cnll_tgt_f),
        ("cnll_unl_forget", cnll_unl_f),
        ("cnll_target_retain", cnll_tgt_r),
        ("cnll_unl_retain", cnll_unl_r),
    ] {
        positive(n, v)?;
    }
    let g = (cnll_unl_f / (cnll_tgt_f + eps) + eps).ln();
    let c = (cnll_unl_r / (cnll_tgt_r + eps) + eps).ln();
    Ok((g, c, harmonic(g, c)))
}

pub fn sqs(m_r: f64, m_f: f64, m_nm: f64) -> Result<f64> {
    if ![m_r, m_f, m_nm].iter().all(|v| v.is_finite()) {
        return Err(NspuError::InvalidInput("SQS losses must be finite".into()));
    }
    let a = (m_r - m_f).abs();
    let b = (m_nm - m_f).abs();
    if a + b == 0.0 {
        return Err(NspuError::DegenerateInput(
            "SQS undefined: retain, forget and non-member losses coincide".into(),
        ));
    }
    Ok(a / (a + b))
}

/// `HPS + CES + HRS + HCNLL`.
pub fn aggregate(hps: Option<f64>, ces: Option<f64>, hrs: Option<f64>, hcnll: Option<f64>) -> Result<f64> {
    Ok(hps.ok_or(NspuError::IncompleteReport("HPS"))?
        + ces.ok_or(NspuError::IncompleteReport("CES"))?
        + hrs.ok_or(NspuError::IncompleteReport("HRS"))?
        + hcnll.ok_or(NspuError::IncompleteReport("HCNLL"))?)
}

// ----------------------------------------------------------------------------
// Inputs and report
// ----------------------------------------------------------------------------

/// Per-set measurements of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMeasures {
    pub ppl: f64,
    pub truth_ratio: f64,
    pub rouge: f64,
    pub cnll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricInputs {
    pub ppl_ori_forget: f64,
    pub ppl_unl_forget: f64,
    pub ppl_ori_retain: f64,
    pub ppl_unl_retain: f64,
    pub tr_orig_forget: f64,
    pub tr_unl_forget: f64,
    pub tr_orig_retain: f64,
    pub tr_unl_retain: f64,
    pub rouge_orig_forget: f64,
    pub rouge_unl_forget: f64,
    pub rouge_orig_retain: f64,
    pub rouge_unl_retain: f64,
    pub cnll_target_forget: f64,
    pub cnll_unl_forget: f64,
    pub cnll_target_retain: f64,
    pub cnll_unl_retain: f64,
    pub clm_loss_retain: f64,
    pub clm_loss_forget: f64,
    pub clm_loss_nonmember: f64,
    pub epsilon: f64,
}

impl MetricInputs {
    pub fn from_measures(
        target_forget: &SetMeasures,
        target_retain: &SetMeasures,
        unl_forget: &SetMeasures,
        unl_retain: &SetMeasures,
        clm: (f64, f64, f64),
        epsilon: f64,
    ) -> Self {
        Self {
            ppl_ori_forget: target_forget.ppl,
            ppl_unl_forget: unl_forget.ppl,
            ppl_ori_retain: target_retain.ppl,
            ppl_unl_retain: unl_retain.ppl,
            tr_orig_forget: target_forget.truth_ratio,
            tr_unl_forget: unl_forget.truth_ratio,
            tr_orig_retain: target_retain.truth_ratio,
            tr_unl_retain: unl_retain.truth_ratio,
            rouge_orig_forget: target_forget.rouge,
            rouge_unl_forget: unl_forget.rouge,
            rouge_orig_retain: target_retain.rouge,
            rouge_unl_retain: unl_retain.rouge,
            cnll_target_forget: target_forget.cnll,
            cnll_unl_forget: unl_forget.cnll,
            cnll_target_retain: target_retain.cnll,
            cnll_unl_retain: unl_retain.cnll,
            clm_loss_retain: clm.0,
            clm_loss_forget: clm.1,
            clm_loss_nonmember: clm.2,
            epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MetricReport {
    pub G_F: f64,
    pub C_R: f64,
    pub HPS: f64,
    pub RS: f64,
    pub FI: f64,
    pub CES: f64,
    pub RR: f64,
    pub FR: f64,
    pub HRS: f64,
    pub G_FL: f64,
    pub C_RL: f64,
    pub HCNLL: f64,
    pub SQS: f64,
    pub aggregate: f64,
}

/// Derives every composite metric from `inputs`.
pub fn report(inputs: &MetricInputs) -> Result<MetricReport> {
    let i = inputs;
    if !(i.epsilon > 0.0) {
        return Err(NspuError::InvalidInput("epsilon must be positive".into()));
    }
    let (g_f, c_r, hps_v) = hps(
        i.ppl_ori_forget,
        i.ppl_unl_forget,
        i.ppl_ori_retain,
        i.ppl_unl_retain,
        i.epsilon,
    )?;
    let (rs, fi, ces_v) = ces(i.tr_orig_retain, i.tr_unl_retain, i.tr_orig_forget, i.tr_unl_forget)?;
    let (rr, fr, hrs_v) = hrs(
        i.rouge_orig_retain,
        i.rouge_unl_retain,
        i.rouge_orig_forget,
        i.rouge_unl_forget,
    )?;
    let (g_fl, c_rl, hcnll_v) = hcnll(
        i.cnll_target_forget,
        i.cnll_unl_forget,
        i.cnll_target_retain,
        i.cnll_unl_retain,
        i.epsilon,
    )?;
    let sqs_v = sqs(i.clm_loss_retain, i.clm_loss_forget, i.clm_loss_nonmember)?;
    Ok(MetricReport {
        G_F: g_f,
        C_R: c_r,
        HPS: hps_v,
        RS: rs,
        FI: fi,
        CES: ces_v,
        RR: rr,
        FR: fr,
        HRS: hrs_v,
        G_FL: g_fl,
        C_RL: c_rl,
        HCNLL: hcnll_v,
        SQS: sqs_v,
        aggregate: aggregate(Some(hps_v), Some(ces_v), Some(hrs_v), Some(hcnll_v))?,
    })
}

// ----------------------------------------------------------------------------
// Model-based measurements
// ----------------------------------------------------------------------------

fn qa_pairs(records: &[&QARecord]) -> Vec<(String, String)> {
    records
        .iter()
        .map(|r| (r.question.clone(), r.answer.clone()))
        .collect()
}

/// Length-normalised likelihood `exp(mean token logprob)`.
fn pnorm(logprobs: &[f64]) -> f64 {
    if logprobs.is_empty() {
        return 1.0;
    }
    (logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp()
}

/// `Pnorm(correct) / mean_i Pnorm(perturbed_i)`.
pub fn truth_ratio(model: &LanguageModel, record: &QARecord) -> Result<f64> {
    Ok(truth_ratios(model, &[record])?[0])
}

pub fn truth_ratios(model: &LanguageModel, records: &[&QARecord]) -> Result<Vec<f64>> {
    let mut pairs = Vec::new();
    for r in records {
        if r.perturbed_answers.is_empty() {
            return Err(NspuError::InvalidRecord {
                id: r.id.clone(),
                reason: "no perturbed answers".into(),
            });
        }
        pairs.push((r.question.clone(), r.answer.clone()));
        for p in &r.perturbed_answers {
            pairs.push((r.question.clone(), p.clone()));
        }
    }
    let lps = model.token_logprobs_batch(&pairs)?;
    let mut out = Vec::with_capacity(records.len());
    let mut at = 0;
    for r in records {
        let correct = pnorm(&lps[at]);
        let n = r.perturbed_answers.len();
        let mean_pert = lps[at + 1..at + 1 + n].iter().map(|lp| pnorm(lp)).sum::<f64>() / n as f64;
        out.push(correct / mean_pert);
        at += 1 + n;
    }
    Ok(out)
}

/// Greedy decoding length limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationBudget {
    Fixed(usize),
    /// Reference answer length in tokens plus a slack.
    AnswerPlus(usize),
}

impl GenerationBudget {
    fn tokens(self, model: &LanguageModel, record: &QARecord) -> usize {
        match self {
            GenerationBudget::Fixed(n) => n,
            GenerationBudget::AnswerPlus(slack) => model.tokenizer.encode(&record.answer).len() + slack,
        }
    }
}

/// Greedy-generation ROUGE-L against the gold answers, averaged.
pub fn mean_rouge(model: &LanguageModel, records: &[&QARecord], budget: GenerationBudget) -> Result<f64> {
    if records.is_empty() {
        return Err(NspuError::EmptyDataset("no records for ROUGE".into()));
    }
    let mut total = KahanSum::default();
    for r in records {
        let gen = model.generate(&r.question, budget.tokens(model, r))?;
        total.add(rouge_l_text(&r.answer, &gen));
    }
    Ok(total.total() / records.len() as f64)
}

/// Perplexity, mean truth ratio, ROUGE-L and CNLL of `model` on `records`.
pub fn measure_set(model: &LanguageModel, records: &[&QARecord], budget: GenerationBudget) -> Result<SetMeasures> {
    if records.is_empty() {
        return Err(NspuError::EmptyDataset("no records to measure".into()));
    }
    let rows = model.token_logprobs_batch(&qa_pairs(records))?;
    let trs = truth_ratios(model, records)?;
    Ok(SetMeasures {
        ppl: perplexity(&rows)?,
        truth_ratio: trs.iter().sum::<f64>() / trs.len() as f64,
        rouge: mean_rouge(model, records, budget)?,
        cnll: cnll(&rows)?,
    })
}
