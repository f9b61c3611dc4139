//! Experiment configuration: a strict TOML schema that fully determines
//! every artifact. Unknown keys are rejected; the SHA-256 of the effective
//! config is stamped into every output so stale pipelines are detected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::AtlantisPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    /// Output directory; `--out` overrides.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub world: WorldCfg,
    pub model: ModelCfg,
    pub pretrain: PretrainCfg,
    #[serde(default)]
    pub sweep: Vec<SweepCfg>,
    #[serde(default)]
    pub finetune: Option<FinetuneCfg>,
    #[serde(default)]
    pub eval: EvalCfg,
    #[serde(default)]
    pub analysis: AnalysisCfg,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldCfg {
    /// GeoNames-format TSV.
    pub source: PathBuf,
    pub min_population: i64,
    /// Defaults to the global seed.
    #[serde(default)]
    pub id_seed: Option<u64>,
    #[serde(default)]
    pub atlantis: Option<AtlantisCfg>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlantisCfg {
    pub count: usize,
    pub center_lon: f64,
    pub center_lat: f64,
    pub std_deg: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for AtlantisCfg {
    fn default() -> Self {
        AtlantisCfg {
            count: 100,
            center_lon: -35.0,
            center_lat: 35.0,
            std_deg: 3.0,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub intermediate: usize,
    pub max_seq: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.1
}

impl ModelCfg {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            intermediate: self.intermediate,
            vocab: crate::tokenizer::VOCAB_SIZE,
            max_seq: self.max_seq,
            init_std: self.init_std,
            rope_theta: 10_000.0,
            rms_eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainCfg {
    pub tasks: Vec<String>,
    pub rows_per_task: u64,
    pub total_rows: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_policy")]
    pub atlantis_policy: AtlantisPolicy,
    /// Model init + data + schedule seed; defaults to the global seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    128
}
fn default_warmup() -> u64 {
    50
}
fn default_wd() -> f64 {
    0.01
}
fn default_policy() -> AtlantisPolicy {
    AtlantisPolicy::Exclude
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCfg {
    pub name: String,
    pub task_sets: Vec<Vec<String>>,
    pub seeds: Vec<u64>,
    pub rows_per_task: u64,
    pub total_rows: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneCfg {
    /// Each recipe is a target task set; a one-task recipe fine-tunes on a
    /// single task, a two-task recipe on the union of both target datasets.
    pub recipes: Vec<Vec<String>>,
    pub rows_per_target: u64,
    pub replay_rows: u64,
    #[serde(default = "default_elicit")]
    pub elicit_rows_per_task: u64,
    #[serde(default = "default_ft_lr")]
    pub lr: f64,
    #[serde(default = "default_ft_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Epoch-boundary eval hook cadence; 0 disables.
    #[serde(default = "default_hook_every")]
    pub eval_every_epochs: u64,
    /// Relative degradation budget on standard-task metrics after
    /// fine-tuning before a warning is emitted.
    #[serde(default = "default_degradation")]
    pub degradation_budget: f64,
}

fn default_elicit() -> u64 {
    256
}
fn default_ft_lr() -> f64 {
    1e-5
}
fn default_ft_epochs() -> u64 {
    30
}
fn default_hook_every() -> u64 {
    10
}
fn default_degradation() -> f64 {
    0.10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCfg {
    #[serde(default = "default_eval_rows")]
    pub rows: u64,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

fn default_eval_rows() -> u64 {
    2048
}
fn default_eval_seed() -> u64 {
    7
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            rows: default_eval_rows(),
            seed: default_eval_seed(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisCfg {
    /// 1-indexed post-block layers to extract.
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default = "default_probe_seed")]
    pub probe_split_seed: u64,
    #[serde(default = "default_pca_k")]
    pub pca_components: usize,
    /// Cap on non-atlantis cities used to fit the transfer probe.
    #[serde(default = "default_transfer_cap")]
    pub transfer_train_cities: usize,
    #[serde(default)]
    pub cka_disjoint_only: bool,
}

fn default_probe_seed() -> u64 {
    42
}
fn default_pca_k() -> usize {
    3
}
fn default_transfer_cap() -> usize {
    4000
}

impl Default for AnalysisCfg {
    fn default() -> Self {
        AnalysisCfg {
            layers: Vec::new(),
            probe_split_seed: default_probe_seed(),
            pca_components: default_pca_k(),
            transfer_train_cities: default_transfer_cap(),
            cka_disjoint_only: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        let hash = config_hash(&text);
        Ok((cfg, hash))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.parse_tasks(&self.pretrain.tasks)?;
        for sw in &self.sweep {
            for ts in &sw.task_sets {
                self.parse_tasks(ts)?;
            }
            if sw.seeds.is_empty() {
                return Err(Error::Config(format!("sweep {} has no seeds", sw.name)));
            }
        }
        if let Some(ft) = &self.finetune {
            for r in &ft.recipes {
                self.parse_tasks(r)?;
            }
        }
        let mc = self.model.to_model_config();
        mc.validate()?;
        for &l in &self.analysis.layers {
            if l == 0 || l > self.model.layers {
                return Err(Error::Config(format!(
                    "analysis layer {l} out of range 1..={}",
                    self.model.layers
                )));
            }
        }
        Ok(())
    }

    pub fn parse_tasks(&self, names: &[String]) -> Result<Vec<TaskKind>> {
        if names.is_empty() {
            return Err(Error::Config("empty task list".into()));
        }
        names
            .iter()
            .map(|n| {
                TaskKind::from_name(n)
                    .ok_or_else(|| Error::Config(format!("unknown task {n:?}")))
            })
            .collect()
    }

    /// Deepest layer used by analysis (defaults to the last block).
    pub fn deepest_layer(&self) -> usize {
        self.analysis.layers.iter().copied().max().unwrap_or(self.model.layers)
    }

    pub fn analysis_layers(&self) -> Vec<usize> {
        if self.analysis.layers.is_empty() {
            vec![self.model.layers]
        } else {
            self.analysis.layers.clone()
        }
    }

    pub fn id_seed(&self) -> u64 {
        self.world.id_seed.unwrap_or(self.seed)
    }

    pub fn pretrain_seed(&self) -> u64 {
        self.pretrain.seed.unwrap_or(self.seed)
    }

    pub fn finetune_seeds(&self) -> Vec<u64> {
        match &self.finetune {
            Some(ft) if !ft.seeds.is_empty() => ft.seeds.clone(),
            _ => vec![self.seed],
        }
    }

    /// Applies the full-scale preset on top of the loaded config: the
    /// recipe sizes, model architecture and optimizer settings used at full
    /// scale. Desk scale leaves the file untouched.
    pub fn apply_scale(&mut self, scale: Scale) {
        if scale == Scale::Desk {
            return;
        }
        self.model = ModelCfg {
            hidden: 128,
            heads: 4,
            layers: 6,
            intermediate: 512,
            max_seq: 256,
            init_std: 0.1,
        };
        self.world.min_population = 100_000;
        if let Some(atl) = &mut self.world.atlantis {
            atl.count = 100;
            atl.center_lon = -35.0;
            atl.center_lat = 35.0;
            atl.std_deg = 3.0;
        }
        self.pretrain.rows_per_task = 1_000_000;
        self.pretrain.total_rows = 42_000_000;
        self.pretrain.lr = 3e-4;
        self.pretrain.batch = 128;
        self.pretrain.warmup_steps = 50;
        self.pretrain.weight_decay = 0.01;
        if let Some(ft) = &mut self.finetune {
            ft.rows_per_target = 100_000;
            ft.replay_rows = 20_000;
            ft.elicit_rows_per_task = 256;
            ft.lr = 1e-5;
            ft.epochs = 30;
            ft.batch = 128;
        }
        self.eval.rows = 2048;
        self.analysis.layers = vec![3, 4, 5, 6];
        self.analysis.transfer_train_cities = 4000;
    }
}

/// 16-hex-char digest of the effective config text (plus the scale preset
/// when one is applied); stamped into every artifact.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash_scaled(text: &str, scale: Scale) -> String {
    match scale {
        Scale::Desk => config_hash(text),
        Scale::Paper => config_hash(&format!("{text}\n#scale=paper")),
    }
}

/// Canonical label for a task set: names joined with `+` in sorted order.
pub fn task_set_label(tasks: &[TaskKind]) -> String {
    let mut names: Vec<&str> = tasks.iter().map(|t| t.name()).collect();
    names.sort_unstable();
    names.join("+")
}

/// Extraction prefix for a model: the alphabetically first task of its set.
pub fn extraction_prefix(tasks: &[TaskKind]) -> TaskKind {
    let mut sorted: Vec<TaskKind> = tasks.to_vec();
    sorted.sort_by_key(|t| t.name());
    sorted[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
seed = 42

[world]
source = "cities.tsv"
min_population = 0

[model]
hidden = 32
heads = 4
layers = 2
intermediate = 64
max_seq = 64

[pretrain]
tasks = ["compass"]
rows_per_task = 1000
total_rows = 1000
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, MINIMAL).unwrap();
        let (cfg, hash) = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.pretrain.lr, 3e-4);
        assert_eq!(cfg.pretrain.batch, 128);
        assert_eq!(cfg.eval.rows, 2048);
        assert_eq!(cfg.analysis_layers(), vec![2]);
        assert_eq!(hash.len(), 16);
        assert_eq!(hash, config_hash(MINIMAL));
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("[pretrain]", "[pretrain]\nfrobnicate = 3");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn bad_task_name_rejected() {
        let bad = MINIMAL.replace("\"compass\"", "\"frobnication\"");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, &bad).unwrap();
        assert!(ExperimentConfig::load(&p).is_err());
    }

    #[test]
    fn paper_scale_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, MINIMAL).unwrap();
        let (mut cfg, _) = ExperimentConfig::load(&p).unwrap();
        cfg.apply_scale(Scale::Paper);
        assert_eq!(cfg.model.hidden, 128);
        assert_eq!(cfg.model.layers, 6);
        assert_eq!(cfg.pretrain.rows_per_task, 1_000_000);
        assert_eq!(cfg.pretrain.total_rows, 42_000_000);
        assert_eq!(cfg.analysis.layers, vec![3, 4, 5, 6]);
        assert_ne!(
            config_hash_scaled(MINIMAL, Scale::Paper),
            config_hash_scaled(MINIMAL, Scale::Desk)
        );
    }

    #[test]
    fn labels_and_prefixes() {
        let ts = [TaskKind::Perimeter, TaskKind::TriArea];
        assert_eq!(task_set_label(&ts), "perimeter+triarea");
        assert_eq!(extraction_prefix(&ts), TaskKind::Perimeter);
        assert_eq!(extraction_prefix(&[TaskKind::Distance]), TaskKind::Distance);
    }

    #[test]
    fn hash_stability() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
    }
}
