//! `sves sft`: supervised warm start of the adapters.

use serde::Serialize;
use sves_core::lowrank::{write_adapters, LowRankAdapter};
use sves_core::model::task::to_tsv;
use sves_core::model::{sft_train, SftConfig, SftReport};

use crate::artifacts::{self, ADAPTERS, ALIGN_DATA, MODEL, SFT_CONFIG, SFT_DATA, SFT_REPORT};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SftSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub min_singular: f64,
    pub max_singular: f64,
    pub min_top_singular: f64,
    pub degenerate: bool,
    pub sft_examples: usize,
    pub align_examples: usize,
    pub sft_accuracy: f64,
    pub align_accuracy: f64,
}

pub struct SftOutcome {
    pub summary: SftSummary,
    pub report: SftReport,
    pub adapters: Vec<LowRankAdapter>,
}

/// Trains, decomposes and writes the base model, adapters and splits to
/// the output directory. With `strict`, degenerate factors are an error
/// (after the artifacts are written).
pub fn cmd_sft(config: &RunConfig, strict: bool) -> Result<SftOutcome, CliError> {
    let dir = &config.output.dir;
    let data = pipeline::datasets(config)?;
    let model = pipeline::base_model(config)?;
    let init = model.init_adapters(config.lora.rank, config.seed)?;
    let sft_config = SftConfig {
        steps: config.sft.steps,
        learning_rate: config.sft.learning_rate,
    };
    log::info!(
        "supervised warm start: {} steps on {} examples, rank {}",
        sft_config.steps,
        data.sft.len(),
        config.lora.rank
    );
    let (adapters, report) = sft_train(&model, &init, &data.sft, sft_config)?;
    let bound = model.bind_adapters(&adapters)?;
    let summary = SftSummary {
        steps: config.sft.steps,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        min_singular: report.min_singular,
        max_singular: report.max_singular,
        min_top_singular: report.min_top_singular,
        degenerate: report.is_degenerate(),
        sft_examples: data.sft.len(),
        align_examples: data.align.len(),
        sft_accuracy: bound.accuracy(&data.sft)?,
        align_accuracy: bound.accuracy(&data.align)?,
    };

    artifacts::write_atomic(&dir.join(SFT_CONFIG), config.to_toml().as_bytes())?;
    artifacts::write_atomic(&dir.join(MODEL), &model.to_bytes())?;
    artifacts::write_atomic(&dir.join(ADAPTERS), &write_adapters(&adapters)?)?;
    artifacts::write_atomic(&dir.join(SFT_DATA), to_tsv(&data.sft).as_bytes())?;
    artifacts::write_atomic(&dir.join(ALIGN_DATA), to_tsv(&data.align).as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    artifacts::write_atomic(&dir.join(SFT_REPORT), json.as_bytes())?;

    if summary.degenerate && strict {
        return Err(CliError::Numerical(format!(
            "degenerate adapter factors: a top singular value is {:e}",
            summary.min_top_singular
        )));
    }
    Ok(SftOutcome {
        summary,
        report,
        adapters,
    })
}
