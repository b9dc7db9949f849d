//! Run configuration, read from a TOML file.
//!
//! Every key is optional; missing keys take the defaults below. Only the
//! master seed (`SVES_SEED`) and the output directory (`SVES_OUTPUT_DIR`)
//! can be overridden from the environment.
//!
//! ```toml
//! seed = 1
//!
//! [task]
//! kind = "addition"        # "addition" or "tsv"
//! max_operand = 19         # addition: operands 0..=max_operand
//! sft_examples = 200       # addition: size of the supervised split
//! # sft_path = "sft.tsv"   # tsv: prompt<TAB>answer per line
//! # align_path = "align.tsv"
//!
//! [model]
//! architecture = "transformer"   # or "mlp"
//! layers = 2
//! d_model = 16
//! heads = 2
//! d_ff = 32
//! max_seq = 12
//! context = 6                    # mlp only
//! d_embed = 8                    # mlp only
//! hidden = 32                    # mlp only
//! max_new_tokens = 4
//! precision = "f32"              # "f32", "int8" or "int4" base weights
//!
//! [lora]
//! rank = 16
//! top_percent = 40.0
//!
//! [sft]
//! steps = 1000
//! learning_rate = 0.5
//! strict = false                 # degenerate factors fail the command
//!
//! [es]
//! sigma0 = 0.32
//! population = 192
//! generations = 200
//! subset = "dynamic"             # "fixed" or "dynamic"
//! subset_size = 100
//! per_candidate_resampling = false
//! checkpoint_every = 10
//! workers = 1
//!
//! [transport]
//! kind = "in-process"            # or "socket"
//! listen = "127.0.0.1:7070"
//! job_timeout_secs = 60
//! accept_timeout_secs = 120
//! connect_attempts = 8
//!
//! [output]
//! dir = "runs/desk"
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sves_core::fitness::SubsetPolicy;
use sves_core::model::{Architecture, MlpShape, Precision, TransformerShape};
use sves_core::scheduler::{ClusterConfig, TransportKind};

use crate::error::CliError;

pub const SEED_ENV: &str = "SVES_SEED";
pub const OUTPUT_DIR_ENV: &str = "SVES_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub sft: SftSection,
    pub es: EsConfig,
    pub transport: TransportConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Addition,
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub max_operand: u32,
    pub sft_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Transformer,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionName {
    F32,
    Int8,
    Int4,
}

impl From<PrecisionName> for Precision {
    fn from(p: PrecisionName) -> Precision {
        match p {
            PrecisionName::F32 => Precision::F32,
            PrecisionName::Int8 => Precision::SimInt8,
            PrecisionName::Int4 => Precision::SimInt4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: ArchKind,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub context: usize,
    pub d_embed: usize,
    pub hidden: usize,
    pub max_new_tokens: usize,
    pub precision: PrecisionName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub top_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetKind {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub sigma0: f64,
    pub population: usize,
    pub generations: u64,
    pub subset: SubsetKind,
    pub subset_size: usize,
    pub per_candidate_resampling: bool,
    pub checkpoint_every: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportName {
    InProcess,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub kind: TransportName,
    pub listen: String,
    pub job_timeout_secs: u64,
    pub accept_timeout_secs: u64,
    pub connect_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            sft: SftSection::default(),
            es: EsConfig::default(),
            transport: TransportConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Addition,
            max_operand: 19,
            sft_examples: 200,
            sft_path: None,
            align_path: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: ArchKind::Transformer,
            layers: 2,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            max_seq: 12,
            context: 6,
            d_embed: 8,
            hidden: 32,
            max_new_tokens: 4,
            precision: PrecisionName::F32,
        }
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            top_percent: 40.0,
        }
    }
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection {
            steps: 1000,
            learning_rate: 0.5,
            strict: false,
        }
    }
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            sigma0: 0.32,
            population: 192,
            generations: 200,
            subset: SubsetKind::Dynamic,
            subset_size: 100,
            per_candidate_resampling: false,
            checkpoint_every: 10,
            workers: 1,
        }
    }
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            kind: TransportName::InProcess,
            listen: "127.0.0.1:7070".into(),
            job_timeout_secs: 60,
            accept_timeout_secs: 120,
            connect_attempts: 8,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/desk"),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    /// Reads `path`, applies environment overrides and validates. Returns
    /// the configuration with any non-fatal warnings.
    pub fn load(path: &Path) -> Result<(RunConfig, Vec<String>), CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut config = RunConfig::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        config.apply_env(|key| std::env::var(key).ok())?;
        let warnings = config.validate()?;
        Ok((config, warnings))
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), CliError> {
        if let Some(seed) = get(SEED_ENV) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| invalid(format!("{SEED_ENV}={seed} is not an unsigned integer")))?;
        }
        if let Some(dir) = get(OUTPUT_DIR_ENV) {
            self.output.dir = PathBuf::from(dir);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn architecture(&self) -> Architecture {
        let m = &self.model;
        match m.architecture {
            ArchKind::Transformer => Architecture::Transformer(TransformerShape {
                layers: m.layers,
                d_model: m.d_model,
                heads: m.heads,
                d_ff: m.d_ff,
                max_seq: m.max_seq,
            }),
            ArchKind::Mlp => Architecture::Mlp(MlpShape {
                context: m.context,
                d_embed: m.d_embed,
                hidden: m.hidden,
            }),
        }
    }

    pub fn precision(&self) -> Precision {
        self.model.precision.into()
    }

    pub fn subset_policy(&self) -> SubsetPolicy {
        match self.es.subset {
            SubsetKind::Fixed => SubsetPolicy::Fixed {
                size: self.es.subset_size,
            },
            SubsetKind::Dynamic => SubsetPolicy::Dynamic {
                size: self.es.subset_size,
                seed: self.seed,
            },
        }
    }

    pub fn cluster(&self, population: usize) -> ClusterConfig {
        ClusterConfig {
            population,
            workers: self.es.workers,
            generations: self.es.generations,
            transport: match self.transport.kind {
                TransportName::InProcess => TransportKind::InProcess,
                TransportName::Socket => TransportKind::Socket,
            },
            job_timeout: Duration::from_secs(self.transport.job_timeout_secs),
        }
    }

    /// Checks every invariant that does not need the data on disk.
    pub fn validate(&self) -> Result<Vec<String>, CliError> {
        let mut warnings = Vec::new();
        self.cluster(self.es.population).validate()?;
        let es = &self.es;
        if !(es.sigma0.is_finite() && es.sigma0 > 0.0) {
            return Err(invalid(format!("es.sigma0 must be positive, got {}", es.sigma0)));
        }
        if es.checkpoint_every == 0 {
            return Err(invalid("es.checkpoint_every must be at least 1"));
        }
        if es.subset_size == 0 {
            return Err(invalid("es.subset_size must be at least 1"));
        }
        if es.checkpoint_every > es.generations {
            warnings.push(format!(
                "es.checkpoint_every = {} exceeds es.generations = {}; only the final state is checkpointed",
                es.checkpoint_every, es.generations
            ));
        }
        let lora = &self.lora;
        if !(lora.top_percent > 0.0 && lora.top_percent <= 100.0) {
            return Err(invalid(format!("lora.top_percent must be in (0, 100], got {}", lora.top_percent)));
        }
        let arch = self.architecture();
        arch.validate()?;
        let max_rank = arch.max_adapter_rank();
        if lora.rank == 0 || lora.rank > max_rank {
            return Err(invalid(format!("lora.rank must be in 1..={max_rank}, got {}", lora.rank)));
        }
        if self.model.max_new_tokens == 0 {
            return Err(invalid("model.max_new_tokens must be at least 1"));
        }
        if !(self.sft.learning_rate.is_finite() && self.sft.learning_rate > 0.0) {
            return Err(invalid(format!("sft.learning_rate must be positive, got {}", self.sft.learning_rate)));
        }
        if self.sft.steps == 0 {
            warnings.push("sft.steps = 0 leaves B = 0; the adapters will be degenerate".into());
        }
        match self.task.kind {
            TaskKind::Addition => {
                let pool = (self.task.max_operand as usize + 1).pow(2);
                if self.task.sft_examples >= pool {
                    return Err(invalid(format!(
                        "task.sft_examples = {} leaves no alignment data out of {pool} problems",
                        self.task.sft_examples
                    )));
                }
                if es.subset_size > pool - self.task.sft_examples {
                    return Err(invalid(format!(
                        "es.subset_size = {} exceeds the {} alignment examples",
                        es.subset_size,
                        pool - self.task.sft_examples
                    )));
                }
            }
            TaskKind::Tsv => {
                if self.task.sft_path.is_none() || self.task.align_path.is_none() {
                    return Err(invalid("task.kind = \"tsv\" needs task.sft_path and task.align_path"));
                }
            }
        }
        if self.transport.kind == TransportName::Socket && self.transport.listen.parse::<std::net::SocketAddr>().is_err() {
            return Err(invalid(format!("transport.listen = {:?} is not a socket address", self.transport.listen)));
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.es.sigma0, 0.32);
        assert_eq!(c.es.population, 192);
        assert_eq!(c.lora.top_percent, 40.0);
        assert_eq!(c.lora.rank, 16);
        assert_eq!(c.es.checkpoint_every, 10);
        assert_eq!(c.validate().unwrap(), Vec::<String>::new());
    }

    #[test]
    fn serialisation_round_trips() {
        let mut c = RunConfig::default();
        c.task.kind = TaskKind::Tsv;
        c.task.sft_path = Some("a.tsv".into());
        c.task.align_path = Some("b.tsv".into());
        c.model.precision = PrecisionName::Int4;
        c.transport.kind = TransportName::Socket;
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            "[es]\npopulation = 10\nworkers = 4",
            "[lora]\ntop_percent = 0.0",
            "[lora]\nrank = 17",
            "[es]\nsigma0 = -1.0",
            "[task]\nsft_examples = 400",
            "[model]\nprecision = \"bf16\"",
            "[es]\nunknown = 1",
            "[task]\nkind = \"tsv\"",
        ];
        for text in bad {
            let outcome = RunConfig::parse(text).and_then(|c| c.validate());
            assert!(matches!(outcome, Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn environment_overrides_seed_and_output_only() {
        let mut c = RunConfig::default();
        let env = |k: &str| match k {
            SEED_ENV => Some("77".to_string()),
            OUTPUT_DIR_ENV => Some("/tmp/elsewhere".to_string()),
            _ => Some("ignored".to_string()),
        };
        c.apply_env(env).unwrap();
        assert_eq!(c.seed, 77);
        assert_eq!(c.output.dir, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(c.es, EsConfig::default());
        assert!(c.apply_env(|k| (k == SEED_ENV).then(|| "x".to_string())).is_err());
    }

    #[test]
    fn warnings_are_reported() {
        let c = RunConfig::parse("[sft]\nsteps = 0\n[es]\ngenerations = 5").unwrap();
        assert_eq!(c.validate().unwrap().len(), 2);
    }
}
