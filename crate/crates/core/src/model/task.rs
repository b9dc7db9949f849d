//! Prompt/answer examples: a seeded synthetic addition task and a
//! tab-separated file format for external datasets.

use std::collections::HashSet;
use std::path::Path;

use super::vocab::{self, Token, BOS, EOS};
use super::ModelError;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub id: String,
    pub prompt: String,
    pub answer: String,
}

impl TaskExample {
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        answer: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let example = Self {
            id: id.into(),
            prompt: prompt.into(),
            answer: answer.into(),
        };
        if example.answer.trim().is_empty() {
            return Err(ModelError::InvalidData(format!("example {} has an empty answer", example.id)));
        }
        vocab::encode(&example.prompt)?;
        vocab::encode(&example.answer)?;
        Ok(example)
    }

    /// `BOS` followed by the prompt characters.
    pub fn prompt_tokens(&self) -> Vec<Token> {
        let mut tokens = vec![BOS];
        tokens.extend(vocab::encode(&self.prompt).expect("validated at construction"));
        tokens
    }

    /// Answer characters followed by `EOS`.
    pub fn answer_tokens(&self) -> Vec<Token> {
        let mut tokens = vocab::encode(&self.answer).expect("validated at construction");
        tokens.push(EOS);
        tokens
    }
}

/// Every problem `a+b=` with `0 ≤ a, b ≤ max_operand`, in lexicographic
/// order of `(a, b)`.
pub fn addition_problems(max_operand: u32) -> Vec<TaskExample> {
    let mut out = Vec::new();
    for a in 0..=max_operand {
        for b in 0..=max_operand {
            out.push(TaskExample {
                id: format!("add-{a}-{b}"),
                prompt: format!("{a}+{b}="),
                answer: (a + b).to_string(),
            });
        }
    }
    out
}

/// Seeded disjoint split of all addition problems: the first `sft_count`
/// of a shuffled order go to SFT, the rest to alignment.
pub fn addition_splits(
    max_operand: u32,
    sft_count: usize,
    seed: u64,
) -> Result<(Vec<TaskExample>, Vec<TaskExample>), ModelError> {
    let mut problems = addition_problems(max_operand);
    if sft_count >= problems.len() {
        return Err(ModelError::InvalidData(format!(
            "{sft_count} SFT examples requested from {} problems",
            problems.len()
        )));
    }
    rng::shuffle(&mut rng::keyed(seed, Domain::Task, 0, 0), &mut problems);
    let align = problems.split_off(sft_count);
    Ok((problems, align))
}

/// Fails with the first prompt that appears in both splits.
pub fn check_disjoint(sft: &[TaskExample], align: &[TaskExample]) -> Result<(), ModelError> {
    let prompts: HashSet<&str> = sft.iter().map(|e| e.prompt.as_str()).collect();
    match align.iter().find(|e| prompts.contains(e.prompt.as_str())) {
        Some(e) => Err(ModelError::SplitOverlap(e.prompt.clone())),
        None => Ok(()),
    }
}

/// One example per line: `prompt<TAB>answer`. Ids are `<name>-<line>`.
pub fn parse_tsv(text: &str, name: &str) -> Result<Vec<TaskExample>, ModelError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            let (prompt, answer) = line.split_once('\t').ok_or_else(|| {
                ModelError::InvalidData(format!("{name}:{}: expected prompt<TAB>answer", i + 1))
            })?;
            TaskExample::new(format!("{name}-{}", i + 1), prompt, answer)
        })
        .collect()
}

pub fn load_tsv(path: &Path) -> Result<Vec<TaskExample>, ModelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ModelError::InvalidData(format!("{}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    parse_tsv(&text, name)
}

pub fn to_tsv(examples: &[TaskExample]) -> String {
    examples
        .iter()
        .map(|e| format!("{}\t{}\n", e.prompt, e.answer))
        .collect()
}
