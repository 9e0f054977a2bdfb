// SPDX-License-Identifier: MIT OR Apache-2.0

// Generates the synthetic profile corpus, splits it into forget, retain and
// non-member sets and anonymizes the forget set.

use nspu::anonymizer::{anonymize, leaked_entities};
use nspu::corpus::{default_forget_slots, generate_corpus, make_split};
use nspu::Result;

#[derive(Debug)]
pub struct AnonSummary {
    pub records: usize,
    pub forget: usize,
    pub retain: usize,
    pub non_member: usize,
    pub leaked: usize,
    pub sample_original: String,
    pub sample_anonymized: String,
}

pub fn run_example() -> Result<AnonSummary> {
    let corpus = generate_corpus(3, 4);
    let split = make_split(&corpus, 0.25, default_forget_slots(&corpus, 0.25), 3)?;
    let forget = split.forget_records(&corpus);
    let anon: Vec<_> = forget.iter().map(|r| anonymize(r).split().0).collect();
    let leaked = anon.iter().map(|a| leaked_entities(&a.full_text()).len()).sum();
    Ok(AnonSummary {
        records: corpus.len(),
        forget: forget.len(),
        retain: split.retain.len(),
        non_member: split.non_member.len(),
        leaked,
        sample_original: forget[0].full_text(),
        sample_anonymized: anon[0].full_text(),
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let s = run_example()?;
    println!("{} records: forget {}, retain {}, non-member {}", s.records, s.forget, s.retain, s.non_member);
    println!("original:   {}", s.sample_original);
    println!("anonymized: {}", s.sample_anonymized);
    println!("pooled entity strings left in anonymized text: {}", s.leaked);
    Ok(())
}
