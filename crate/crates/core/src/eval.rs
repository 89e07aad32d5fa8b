//! Reliability, generality and locality of an edit, plus the control probe.
//!
//! An answer counts as correct only when the greedy decode, cut at EOS, is
//! exactly the target's token sequence.

use serde::{Deserialize, Serialize};

use crate::data::{EvalRecord, KnowledgeRecord, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ParamSet};

/// Default decode budget; every desk answer is far shorter.
pub const DEFAULT_MAX_NEW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub reliability: f64,
    pub generality: f64,
    pub locality: f64,
    pub control_accuracy_pre: f64,
    pub control_accuracy_post: f64,
    pub n_records: usize,
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Greedy answer to a natural-language prompt, as token ids.
pub fn answer_ids(params: &ParamSet, vocab: &Vocab, prompt: &str, max_new: usize) -> Result<Vec<u32>> {
    greedy_decode(params, &vocab.prompt_ids(prompt), max_new, EOS)
}

pub fn answer(params: &ParamSet, vocab: &Vocab, prompt: &str, max_new: usize) -> Result<String> {
    Ok(vocab.detokenize(&answer_ids(params, vocab, prompt, max_new)?))
}

pub fn is_correct(params: &ParamSet, vocab: &Vocab, prompt: &str, target: &str, max_new: usize) -> Result<bool> {
    Ok(answer_ids(params, vocab, prompt, max_new)? == vocab.ids(target))
}

/// Percentage of `(prompt, target)` pairs answered exactly.
pub fn exact_match<'a>(
    params: &ParamSet,
    vocab: &Vocab,
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    max_new: usize,
) -> Result<f64> {
    let (mut hits, mut total) = (0, 0);
    for (prompt, target) in pairs {
        total += 1;
        hits += is_correct(params, vocab, prompt, target, max_new)? as usize;
    }
    Ok(percent(hits, total))
}

/// Accuracy on instruction records, e.g. old facts or the control task.
pub fn record_accuracy(params: &ParamSet, vocab: &Vocab, records: &[KnowledgeRecord], max_new: usize) -> Result<f64> {
    let prompts: Vec<String> = records.iter().map(KnowledgeRecord::prompt).collect();
    exact_match(
        params,
        vocab,
        prompts.iter().map(String::as_str).zip(records.iter().map(|r| r.output.as_str())),
        max_new,
    )
}

pub fn evaluate(
    pre: &ParamSet,
    post: &ParamSet,
    records: &[EvalRecord],
    control: &[KnowledgeRecord],
    vocab: &Vocab,
    max_new: usize,
) -> Result<EditReport> {
    if records.is_empty() {
        return Err(Error::input("evaluation needs at least one record"));
    }
    if !pre.config().same_shape(post.config()) {
        return Err(Error::config("pre- and post-update models have different configurations"));
    }
    let (mut rel, mut gen, mut loc) = (0, 0, 0);
    for r in records {
        rel += is_correct(post, vocab, &r.prompt, &r.target, max_new)? as usize;
        gen += is_correct(post, vocab, &r.rephrase, &r.target, max_new)? as usize;
        let before = answer_ids(pre, vocab, &r.locality_prompt, max_new)?;
        let after = answer_ids(post, vocab, &r.locality_prompt, max_new)?;
        loc += (before == after) as usize;
    }
    let n = records.len();
    Ok(EditReport {
        reliability: percent(rel, n),
        generality: percent(gen, n),
        locality: percent(loc, n),
        control_accuracy_pre: record_accuracy(pre, vocab, control, max_new)?,
        control_accuracy_post: record_accuracy(post, vocab, control, max_new)?,
        n_records: n,
    })
}

/// Copies of `records` with `locality_answer_pre` filled from `pre`.
pub fn fill_locality_answers(
    pre: &ParamSet,
    records: &[EvalRecord],
    vocab: &Vocab,
    max_new: usize,
) -> Result<Vec<EvalRecord>> {
    records
        .iter()
        .map(|r| {
            Ok(EvalRecord {
                locality_answer_pre: Some(answer(pre, vocab, &r.locality_prompt, max_new)?),
                ..r.clone()
            })
        })
        .collect()
}
