//! Shared setup: datasets, base model and the search objective.

use std::path::Path;

use sves_core::fitness::{AlignmentObjective, FitnessSpec};
use sves_core::lowrank::{build_layout, read_adapters};
use sves_core::model::task::{addition_splits, check_disjoint, load_tsv, parse_tsv};
use sves_core::model::{PolicyModel, Precision, TaskExample};
use sves_core::scheduler::CmaInit;

use crate::artifacts::{self, ADAPTERS, ALIGN_DATA, MODEL};
use crate::config::{RunConfig, TaskKind};
use crate::error::CliError;

pub struct Datasets {
    pub sft: Vec<TaskExample>,
    pub align: Vec<TaskExample>,
}

/// Builds (addition) or reads (tsv) the two splits and checks that no
/// prompt appears in both.
pub fn datasets(config: &RunConfig) -> Result<Datasets, CliError> {
    let (sft, align) = match config.task.kind {
        TaskKind::Addition => addition_splits(config.task.max_operand, config.task.sft_examples, config.seed)?,
        TaskKind::Tsv => {
            let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated");
            (load_tsv(&path(&config.task.sft_path))?, load_tsv(&path(&config.task.align_path))?)
        }
    };
    check_disjoint(&sft, &align)?;
    if sft.is_empty() || align.is_empty() {
        return Err(CliError::Config("both dataset splits must be non-empty".into()));
    }
    Ok(Datasets { sft, align })
}

pub fn base_model(config: &RunConfig) -> Result<PolicyModel, CliError> {
    Ok(PolicyModel::new(config.architecture(), config.seed)?.with_max_new_tokens(config.model.max_new_tokens))
}

/// The objective every worker and the coordinator must agree on, rebuilt
/// from the supervised stage's artifacts in `dir`.
pub fn load_objective(config: &RunConfig, dir: &Path) -> Result<AlignmentObjective, CliError> {
    let hint = "run `sves sft` with this configuration first";
    let model = PolicyModel::from_bytes(&artifacts::read_required(dir, MODEL, hint)?)?;
    if *model.architecture() != config.architecture() {
        return Err(CliError::Config(format!(
            "{} was built for {:?}, the configuration asks for {:?}",
            dir.join(MODEL).display(),
            model.architecture(),
            config.architecture()
        )));
    }
    let model = model.with_max_new_tokens(config.model.max_new_tokens);
    let model = match config.precision() {
        Precision::F32 => model,
        p => model.quantize_base(p)?,
    };
    let adapters = read_adapters(&artifacts::read_required(dir, ADAPTERS, hint)?)?;
    if let Some(a) = adapters.iter().find(|a| a.rank() != config.lora.rank) {
        return Err(CliError::Config(format!(
            "adapter {} has rank {}, the configuration asks for {}; rerun `sves sft`",
            a.name,
            a.rank(),
            config.lora.rank
        )));
    }
    let align_text = artifacts::read_required(dir, ALIGN_DATA, hint)?;
    let align = parse_tsv(&String::from_utf8_lossy(&align_text), ALIGN_DATA)?;
    let layout = build_layout(&adapters, config.lora.top_percent)?;
    let fitness = FitnessSpec::accuracy(align, config.subset_policy())?
        .with_per_candidate_resampling(config.es.per_candidate_resampling);
    Ok(AlignmentObjective::new(model, adapters, layout, fitness)?)
}

/// Zero-mean start: the search begins at the supervised adapters.
pub fn cma_init(config: &RunConfig, objective: &AlignmentObjective, population: usize) -> CmaInit {
    CmaInit::zero_mean(objective.dim(), config.es.sigma0, population, config.seed)
}
