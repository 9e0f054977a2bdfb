// SPDX-License-Identifier: MIT OR Apache-2.0

// The whole method in memory on a small corpus: train a target model,
// learn the anonymized-to-original aligner on public profiles, estimate
// the forget subspace from anonymized forget text only, install the filter
// and score the result.

use nspu::anonymizer::anonymize;
use nspu::audit::{audit, Grouping, SimilarityTable};
use nspu::corpus::{
    default_forget_slots, generate_corpus, generate_corpus_with, make_split, CorpusParams, ProfilePool, QARecord,
};
use nspu::forget::{build_forget_subspace, make_filter};
use nspu::lm::{train_lm_with, LmConfig, Tokenizer, TrainOptions};
use nspu::metrics::{measure_set, report, GenerationBudget, MetricInputs, MetricReport, DEFAULT_EPSILON};
use nspu::projector::{project, train_projector_with, ProjectorConfig};
use nspu::sqs::run_sqs;
use nspu::Result;

#[derive(Debug)]
pub struct ShadowSummary {
    pub k: usize,
    pub forget_ppl_ratio: f64,
    pub retain_ppl_ratio: f64,
    pub sqs_before: f64,
    pub sqs_after: f64,
    pub metrics: MetricReport,
    pub audit: SimilarityTable,
}

pub fn run_example() -> Result<ShadowSummary> {
    let seed = 4;
    let corpus = generate_corpus(seed, 2);
    let public = generate_corpus_with(&CorpusParams {
        seed,
        profiles_per_domain: 4,
        pool: ProfilePool::Public,
    });
    let split = make_split(&corpus, 0.25, default_forget_slots(&corpus, 0.25), seed)?;
    let forget = split.forget_records(&corpus);
    let retain = split.retain_records(&corpus);

    let train: Vec<String> = split.training_records(&corpus).iter().map(|r| r.full_text()).collect();
    let public_anon: Vec<_> = public.iter().map(|r| anonymize(r).split().0).collect();
    let forget_anon: Vec<_> = forget.iter().map(|r| anonymize(r).split().0).collect();
    let vocab = train
        .iter()
        .cloned()
        .chain(corpus.iter().flat_map(|r| r.perturbed_answers.iter().cloned()))
        .chain(public.iter().map(QARecord::full_text))
        .chain(public_anon.iter().map(|a| a.full_text()))
        .collect::<Vec<_>>();
    let tokenizer = Tokenizer::build(vocab.iter().map(String::as_str));
    let config = LmConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 96,
        max_seq_len: 64,
        dropout: 0.0,
        seed,
    };
    let (target, _) = train_lm_with(&config, tokenizer, &train, &TrainOptions::new(40, 5e-3))?;
    let layer = config.n_layers - 1;

    let pub_ids: Vec<String> = public.iter().map(|r| r.id.clone()).collect();
    let q_orig: Vec<String> = public.iter().map(|r| r.question.clone()).collect();
    let q_anon: Vec<String> = public_anon.iter().map(|a| a.anon_question.clone()).collect();
    let h_orig = target.extract_activations(&q_orig, &pub_ids, layer)?;
    let h_anon = target.extract_activations(&q_anon, &pub_ids, layer)?;
    let pcfg = ProjectorConfig {
        epochs: 60,
        lambda_inv: 0.0,
        seed,
        ..ProjectorConfig::for_dim(config.d_model)
    };
    let (projector, _) = train_projector_with(&h_anon.matrix, &h_orig.matrix, &pcfg, None)?;

    let f_ids: Vec<String> = forget_anon.iter().map(|a| a.original_id.clone()).collect();
    let f_texts: Vec<String> = forget_anon.iter().map(|a| a.anon_question.clone()).collect();
    let estimated = project(&projector, &target.extract_activations(&f_texts, &f_ids, layer)?)?;
    let subspace = build_forget_subspace(&estimated, 0.95)?;
    let unlearned = target.attach_filter(&make_filter(&subspace, 1.0)?, layer)?;

    let budget = GenerationBudget::AnswerPlus(4);
    let t_f = measure_set(&target, &forget, budget)?;
    let t_r = measure_set(&target, &retain, budget)?;
    let u_f = measure_set(&unlearned, &forget, budget)?;
    let u_r = measure_set(&unlearned, &retain, budget)?;
    let sqs = run_sqs(&target, &unlearned, &split, &corpus)?;
    let inputs = MetricInputs::from_measures(&t_f, &t_r, &u_f, &u_r, (sqs.m_r, sqs.m_f, sqs.m_nm), DEFAULT_EPSILON);
    Ok(ShadowSummary {
        k: subspace.k(),
        forget_ppl_ratio: u_f.ppl / t_f.ppl,
        retain_ppl_ratio: u_r.ppl / t_r.ppl,
        sqs_before: sqs.sqs_before,
        sqs_after: sqs.sqs_after,
        metrics: report(&inputs)?,
        audit: audit(&projector, &h_anon, &h_orig, &public, Grouping::ByDomain)?,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let s = run_example()?;
    println!("subspace rank {}", s.k);
    println!("PPL ratio forget {:.3}, retain {:.3}", s.forget_ppl_ratio, s.retain_ppl_ratio);
    println!("SQS {:.3} -> {:.3}", s.sqs_before, s.sqs_after);
    println!("HPS {:.3}, aggregate {:.3}", s.metrics.HPS, s.metrics.aggregate);
    print!("{}", s.audit.to_csv());
    Ok(())
}
