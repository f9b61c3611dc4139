//! Pipeline stages behind the CLI subcommands: world, gen, pretrain,
//! finetune, eval, analyze, report.
//!
//! Every stage writes a stamp (stage name + config hash) under `stamps/`.
//! Rerunning with an unchanged config is a no-op; running a downstream stage
//! against upstream artifacts from a different config is a hard error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{extraction_prefix, task_set_label, ExperimentConfig};
use crate::datagen::{self, AtlantisPolicy, Condition, FinetuneSizes};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, MetricKind, NIRow, NITable};
use crate::model::{load_checkpoint, Model};
use crate::plots;
use crate::repr::{self, CkaEntry, ReprMatrix};
use crate::tasks::TaskKind;
use crate::tokenizer::Tokenizer;
use crate::trainer::{self, TrainConfig, TrainSession};
use crate::world::{self, World};

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum ModelRole {
    Main,
    Sweep,
    Finetune,
}

#[derive(Clone, Debug)]
struct ModelSpec {
    name: String,
    tasks: Vec<TaskKind>,
    seed: u64,
    rows_per_task: u64,
    total_rows: u64,
    role: ModelRole,
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    stage: String,
    config: String,
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    steps: u64,
    initial_loss: f64,
    final_loss: f64,
    final_val_loss: Option<f64>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, hash: String, out: PathBuf) -> Self {
        Pipeline { cfg, hash, out }
    }

    // ------------------------------------------------------------- paths

    fn world_path(&self) -> PathBuf {
        self.out.join("world/world.tsv")
    }

    fn world_prime_path(&self) -> PathBuf {
        self.out.join("world/world_prime.tsv")
    }

    fn dataset_path(&self, name: &str) -> PathBuf {
        self.out.join(format!("data/{name}.txt"))
    }

    fn eval_set_path(&self, task: TaskKind, cond: Condition) -> PathBuf {
        self.dataset_path(&format!("eval_{}_{}", task.name(), cond.name()))
    }

    fn model_dir(&self, name: &str) -> PathBuf {
        self.out.join(format!("models/{name}"))
    }

    fn ckpt_path(&self, name: &str) -> PathBuf {
        self.model_dir(name).join("ckpt_final.bin")
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.out.join(format!("stamps/{stage}.json"))
    }

    fn csv_tag(&self) -> String {
        format!("# config={} seed={}\n", self.hash, self.cfg.seed)
    }

    fn write_csv(&self, path: &Path, body: String) -> Result<()> {
        std::fs::write(path, self.csv_tag() + &body).map_err(|e| Error::io(path, e))
    }

    fn write_json_tagged<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value).map_err(|e| Error::Config(format!("{e}")))?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("config".into(), serde_json::Value::String(self.hash.clone()));
            obj.insert("seed".into(), serde_json::Value::from(self.cfg.seed));
        }
        std::fs::write(path, serde_json::to_string_pretty(&v).unwrap() + "\n")
            .map_err(|e| Error::io(path, e))
    }

    // ------------------------------------------------------------- stamps

    fn write_stamp(&self, stage: &str) -> Result<()> {
        let p = self.stamp_path(stage);
        std::fs::create_dir_all(p.parent().unwrap()).map_err(|e| Error::io(&p, e))?;
        let stamp = Stamp { stage: stage.into(), config: self.hash.clone() };
        std::fs::write(&p, serde_json::to_string_pretty(&stamp).unwrap() + "\n")
            .map_err(|e| Error::io(&p, e))
    }

    fn read_stamp(&self, stage: &str) -> Option<String> {
        let text = std::fs::read_to_string(self.stamp_path(stage)).ok()?;
        serde_json::from_str::<Stamp>(&text).ok().map(|s| s.config)
    }

    fn stage_up_to_date(&self, stage: &str, key_output: &Path) -> bool {
        self.read_stamp(stage).as_deref() == Some(self.hash.as_str()) && key_output.exists()
    }

    fn ensure_upstream(&self, stage: &str) -> Result<()> {
        match self.read_stamp(stage) {
            None => Err(Error::MissingArtifact(self.stamp_path(stage))),
            Some(found) if found != self.hash => Err(Error::StaleArtifact {
                stage: stage.into(),
                expected: self.hash.clone(),
                found,
            }),
            Some(_) => Ok(()),
        }
    }

    // ------------------------------------------------------------- specs

    fn main_spec(&self) -> Result<ModelSpec> {
        let tasks = self.cfg.parse_tasks(&self.cfg.pretrain.tasks)?;
        let seed = self.cfg.pretrain_seed();
        Ok(ModelSpec {
            name: format!("pt_{}_s{seed}", task_set_label(&tasks)),
            tasks,
            seed,
            rows_per_task: self.cfg.pretrain.rows_per_task,
            total_rows: self.cfg.pretrain.total_rows,
            role: ModelRole::Main,
        })
    }

    fn sweep_specs(&self) -> Result<Vec<ModelSpec>> {
        let mut out = Vec::new();
        for sw in &self.cfg.sweep {
            for ts in &sw.task_sets {
                let tasks = self.cfg.parse_tasks(ts)?;
                for &seed in &sw.seeds {
                    out.push(ModelSpec {
                        name: format!("sw_{}_{}_s{seed}", sw.name, task_set_label(&tasks)),
                        tasks: tasks.clone(),
                        seed,
                        rows_per_task: sw.rows_per_task,
                        total_rows: sw.total_rows,
                        role: ModelRole::Sweep,
                    });
                }
            }
        }
        Ok(out)
    }

    fn finetune_specs(&self) -> Result<Vec<ModelSpec>> {
        let Some(ft) = &self.cfg.finetune else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for recipe in &ft.recipes {
            let tasks = self.cfg.parse_tasks(recipe)?;
            for &seed in &self.cfg.finetune_seeds() {
                out.push(ModelSpec {
                    name: format!("ft_{}_s{seed}", task_set_label(&tasks)),
                    tasks: tasks.clone(),
                    seed,
                    rows_per_task: ft.rows_per_target,
                    total_rows: 0, // epochs-based; set when training
                    role: ModelRole::Finetune,
                });
            }
        }
        Ok(out)
    }

    fn eval_tasks(&self) -> Result<Vec<TaskKind>> {
        if self.cfg.finetune.is_some() {
            Ok(TaskKind::ALL.to_vec())
        } else {
            self.cfg.parse_tasks(&self.cfg.pretrain.tasks)
        }
    }

    fn conditions(&self) -> Vec<Condition> {
        if self.cfg.world.atlantis.is_some() {
            vec![Condition::Standard, Condition::Atlantis]
        } else {
            vec![Condition::Standard]
        }
    }

    fn load_active_world(&self) -> Result<World> {
        let prime = self.world_prime_path();
        if prime.exists() {
            world::load_world(&prime)
        } else {
            world::load_world(&self.world_path())
        }
    }

    // ------------------------------------------------------------- stages

    pub fn run_world(&self) -> Result<()> {
        if self.stage_up_to_date("world", &self.world_path()) {
            log::info!("world: up to date");
            return Ok(());
        }
        let dir = self.out.join("world");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (w, stats) =
            world::ingest_geonames(&self.cfg.world.source, self.cfg.world.min_population)?;
        log::info!(
            "ingested {} cities ({} filtered, {} malformed)",
            stats.kept,
            stats.filtered_out,
            stats.skipped_malformed
        );
        let w = world::assign_ids(&w, self.cfg.id_seed())?;
        let tag = [("config", self.hash.clone())];
        world::save_world_tagged(&w, &self.world_path(), &tag)?;
        if let Some(atl) = &self.cfg.world.atlantis {
            let update = world::generate_atlantis(
                &w,
                atl.count,
                atl.center_lon,
                atl.center_lat,
                atl.std_deg,
                atl.seed.unwrap_or(self.cfg.seed),
            )?;
            let prime = world::apply_update(&w, &update)?;
            world::save_world_tagged(&prime, &self.world_prime_path(), &tag)?;
        }
        self.write_stamp("world")
    }

    pub fn run_gen(&self) -> Result<()> {
        self.ensure_upstream("world")?;
        let main = self.main_spec()?;
        if self.stage_up_to_date("gen", &self.dataset_path(&main.name)) {
            log::info!("gen: up to date");
            return Ok(());
        }
        let dir = self.out.join("data");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let w = self.load_active_world()?;

        let tag_manifest = |path: &Path| -> Result<()> {
            let mp = datagen::manifest_path(path);
            let mut m = datagen::DatasetManifest::load(&mp)?;
            m.config_tag = Some(self.hash.clone());
            m.save(&mp)
        };

        // pretraining datasets (main + sweep members)
        let mut pretrain_sets: Vec<(ModelSpec, AtlantisPolicy)> = Vec::new();
        pretrain_sets.push((main.clone(), self.cfg.pretrain.atlantis_policy));
        for spec in self.sweep_specs()? {
            pretrain_sets.push((spec, AtlantisPolicy::Exclude));
        }
        for (spec, policy) in &pretrain_sets {
            let path = self.dataset_path(&spec.name);
            datagen::sample_pretrain(&w, &spec.tasks, spec.rows_per_task, spec.seed, *policy, &path)?;
            tag_manifest(&path)?;
            log::info!("gen: {}", path.display());
        }

        // fine-tuning mixtures
        if let Some(ft) = &self.cfg.finetune {
            let sizes = FinetuneSizes {
                rows_per_target: ft.rows_per_target,
                replay_rows: ft.replay_rows,
                elicit_rows_per_task: ft.elicit_rows_per_task,
            };
            let source = self.dataset_path(&main.name);
            for spec in self.finetune_specs()? {
                let path = self.dataset_path(&spec.name);
                datagen::sample_finetune(&w, &spec.tasks, spec.seed, &source, sizes, &path)?;
                tag_manifest(&path)?;
                log::info!("gen: {}", path.display());
            }
        }

        // eval sets
        for task in self.eval_tasks()? {
            for cond in self.conditions() {
                let path = self.eval_set_path(task, cond);
                datagen::sample_eval(&w, task, cond, self.cfg.eval.rows, self.cfg.eval.seed, &path)?;
                tag_manifest(&path)?;
            }
        }
        self.write_stamp("gen")
    }

    fn train_one<'a>(
        &self,
        spec: &ModelSpec,
        mut model: Model<f32>,
        lines: &[String],
        train_cfg: &TrainConfig,
        tok: &'a Tokenizer,
        hook: Option<trainer::EpochHook<'a>>,
    ) -> Result<TrainSummary> {
        let out_dir = self.model_dir(&spec.name);
        let mut session = TrainSession {
            tokenizer: tok,
            recipe_fingerprint: format!("{}/{}", self.hash, spec.name),
            out_dir: out_dir.clone(),
            epoch_hook: hook,
        };
        let outcome = trainer::train(&mut model, lines, train_cfg, &mut session)?;
        let summary = TrainSummary {
            steps: outcome.steps,
            initial_loss: outcome.initial_loss,
            final_loss: outcome.final_loss,
            final_val_loss: outcome.final_val_loss,
        };
        let sp = out_dir.join("train_summary.json");
        std::fs::write(&sp, serde_json::to_string_pretty(&summary).unwrap() + "\n")
            .map_err(|e| Error::io(&sp, e))?;
        Ok(summary)
    }

    pub fn run_pretrain(&self) -> Result<()> {
        self.ensure_upstream("gen")?;
        let main = self.main_spec()?;
        if self.stage_up_to_date("pretrain", &self.ckpt_path(&main.name)) {
            log::info!("pretrain: up to date");
            return Ok(());
        }
        let tok = Tokenizer::new();
        let mut specs = vec![main];
        specs.extend(self.sweep_specs()?);
        for spec in &specs {
            let lines = datagen::read_lines(&self.dataset_path(&spec.name))?;
            let model = Model::new(self.cfg.model.to_model_config(), spec.seed)?;
            let mut tc = TrainConfig::pretrain_defaults(spec.total_rows, spec.seed);
            tc.lr = self.cfg.pretrain.lr;
            tc.batch = self.cfg.pretrain.batch;
            tc.warmup_steps = self.cfg.pretrain.warmup_steps;
            tc.weight_decay = self.cfg.pretrain.weight_decay;
            tc.checkpoint_steps = trainer::log_spaced_checkpoints(tc.total_steps(lines.len()));
            let summary = self.train_one(spec, model, &lines, &tc, &tok, None)?;
            log::info!(
                "pretrained {}: loss {:.4} -> {:.4} over {} steps",
                spec.name,
                summary.initial_loss,
                summary.final_loss,
                summary.steps
            );
        }
        self.write_stamp("pretrain")
    }

    pub fn run_finetune(&self) -> Result<()> {
        self.ensure_upstream("pretrain")?;
        let Some(ft) = self.cfg.finetune.clone() else {
            log::info!("finetune: no recipes configured, skipping");
            return self.write_stamp("finetune");
        };
        let specs = self.finetune_specs()?;
        if let Some(last) = specs.last() {
            if self.stage_up_to_date("finetune", &self.ckpt_path(&last.name)) {
                log::info!("finetune: up to date");
                return Ok(());
            }
        }
        let tok = Tokenizer::new();
        let main = self.main_spec()?;
        for spec in &specs {
            let (model, _meta, _) = load_checkpoint(&self.ckpt_path(&main.name), Some(&tok.spec()))?;
            let lines = datagen::read_lines(&self.dataset_path(&spec.name))?;
            let mut tc = TrainConfig::finetune_defaults(ft.epochs * lines.len() as u64, spec.seed);
            tc.lr = ft.lr;
            tc.batch = ft.batch;
            tc.warmup_steps = self.cfg.pretrain.warmup_steps;
            tc.weight_decay = self.cfg.pretrain.weight_decay;
            tc.checkpoint_steps = trainer::log_spaced_checkpoints(tc.total_steps(lines.len()));

            // epoch-boundary eval hook on the target tasks, both conditions
            let mut hook_state = EpochEvalHook {
                pipeline: self,
                tok: &tok,
                tasks: spec.tasks.clone(),
                every: ft.eval_every_epochs,
                log_path: self.model_dir(&spec.name).join("epoch_eval.jsonl"),
            };
            let mut hook_fn = |epoch: u64, model: &Model<f32>| hook_state.run(epoch, model);
            let summary = self.train_one(spec, model, &lines, &tc, &tok, Some(&mut hook_fn))?;
            log::info!(
                "finetuned {}: loss {:.4} -> {:.4}",
                spec.name,
                summary.initial_loss,
                summary.final_loss
            );
        }
        self.write_stamp("finetune")
    }

    fn eval_lines(&self, task: TaskKind, cond: Condition) -> Result<Vec<String>> {
        let path = self.eval_set_path(task, cond);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        datagen::read_lines(&path)
    }

    pub fn run_eval(&self) -> Result<()> {
        self.ensure_upstream("pretrain")?;
        if self.cfg.finetune.is_some() {
            self.ensure_upstream("finetune")?;
        }
        let dir = self.out.join("eval");
        if self.stage_up_to_date("eval", &dir.join("reports.json")) {
            log::info!("eval: up to date");
            return Ok(());
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tok = Tokenizer::new();
        let tasks = self.eval_tasks()?;
        let conditions = self.conditions();

        let mut sets: Vec<(TaskKind, Condition, Vec<String>)> = Vec::new();
        for &task in &tasks {
            for &cond in &conditions {
                sets.push((task, cond, self.eval_lines(task, cond)?));
            }
        }

        // baselines: the pretrained lineage model on every set
        let main = self.main_spec()?;
        let (main_model, _, _) = load_checkpoint(&self.ckpt_path(&main.name), Some(&tok.spec()))?;
        let (baselines, mut reports) = eval::baseline_pass(&main_model, &tok, &sets)?;
        baselines.save(&dir.join("baselines.json"))?;
        let mut report_rows: Vec<(String, EvalReport)> = reports
            .drain(..)
            .map(|r| (main.name.clone(), r))
            .collect();

        // fine-tuned models
        let mut ni_table = NITable::default();
        let mut per_model_reports: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
        for spec in self.finetune_specs()? {
            let (model, _, _) = load_checkpoint(&self.ckpt_path(&spec.name), Some(&tok.spec()))?;
            let mut ni_row = NIRow { recipe: spec.name.clone(), ni: BTreeMap::new() };
            for (task, cond, lines) in &sets {
                let report = eval::evaluate(&model, &tok, lines, *cond)?;
                if *cond == Condition::Atlantis {
                    match baselines.ni_for(*task, report.value) {
                        Ok(ni) => {
                            ni_row.ni.insert(task.name().to_string(), ni);
                        }
                        Err(e) => log::warn!("NI undefined for {}/{}: {e}", spec.name, task.name()),
                    }
                }
                per_model_reports.entry(spec.name.clone()).or_default().push(report.clone());
                report_rows.push((spec.name.clone(), report));
            }
            if !ni_row.ni.is_empty() {
                ni_table.rows.push(ni_row);
            }
        }

        // standard-task degradation warnings against the configured budget
        if let Some(ft) = &self.cfg.finetune {
            let mut warnings = String::new();
            for (name, reps) in &per_model_reports {
                for r in reps.iter().filter(|r| r.condition == Condition::Standard) {
                    let Some(base) = baselines.get(r.task, Condition::Standard) else {
                        continue;
                    };
                    let degraded = match r.metric {
                        MetricKind::Accuracy => r.value < base * (1.0 - ft.degradation_budget),
                        MetricKind::AbsError => r.value > base * (1.0 + ft.degradation_budget),
                    };
                    if degraded {
                        let line = format!(
                            "{name}: standard {} {} vs baseline {:.4} exceeds the {:.0}% budget (got {:.4})\n",
                            r.task.name(),
                            match r.metric {
                                MetricKind::Accuracy => "accuracy",
                                MetricKind::AbsError => "abs error",
                            },
                            base,
                            ft.degradation_budget * 100.0,
                            r.value
                        );
                        log::warn!("{}", line.trim_end());
                        warnings.push_str(&line);
                    }
                }
            }
            if !warnings.is_empty() {
                let wp = dir.join("warnings.txt");
                std::fs::write(&wp, warnings).map_err(|e| Error::io(&wp, e))?;
            }
        }

        // exports
        let mut csv = String::from("model,task,condition,metric,value,parse_failures,n\n");
        for (name, r) in &report_rows {
            csv.push_str(&format!(
                "{name},{},{},{:?},{:.6},{},{}\n",
                r.task.name(),
                r.condition.name(),
                r.metric,
                r.value,
                r.parse_failures,
                r.n
            ));
        }
        self.write_csv(&dir.join("reports.csv"), csv)?;
        let json: Vec<serde_json::Value> = report_rows
            .iter()
            .map(|(name, r)| {
                let mut v = serde_json::to_value(r).unwrap();
                v["model"] = serde_json::Value::String(name.clone());
                v["config"] = serde_json::Value::String(self.hash.clone());
                v
            })
            .collect();
        std::fs::write(
            dir.join("reports.json"),
            serde_json::to_string_pretty(&json).unwrap() + "\n",
        )
        .map_err(|e| Error::io(&dir, e))?;

        if !self.finetune_specs()?.is_empty() {
            self.write_csv(&dir.join("ni_table.csv"), ni_table.to_csv())?;
            std::fs::write(
                dir.join("ni_table.json"),
                serde_json::to_string_pretty(&ni_table).unwrap() + "\n",
            )
            .map_err(|e| Error::io(&dir, e))?;
            self.export_deviations(&dir, &ni_table)?;
        }
        self.write_stamp("eval")
    }

    /// Best-teacher deviations for two-task recipes whose single-task
    /// recipes (same seed) are also present.
    fn export_deviations(&self, dir: &Path, ni_table: &NITable) -> Result<()> {
        let find = |recipe: &str| -> Option<&NIRow> {
            ni_table.rows.iter().find(|r| r.recipe == recipe)
        };
        let mut rows: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
        for spec in self.finetune_specs()? {
            if spec.tasks.len() != 2 {
                continue;
            }
            let pair = find(&spec.name);
            let sj = find(&format!("ft_{}_s{}", task_set_label(&spec.tasks[..1]), spec.seed));
            let sk = find(&format!("ft_{}_s{}", task_set_label(&spec.tasks[1..]), spec.seed));
            let (Some(pair), Some(sj), Some(sk)) = (pair, sj, sk) else {
                continue;
            };
            let mut devs = BTreeMap::new();
            for (task, &ni_pair) in &pair.ni {
                let (Some(&nj), Some(&nk)) = (sj.ni.get(task), sk.ni.get(task)) else {
                    continue;
                };
                devs.insert(task.clone(), eval::best_teacher_deviation(ni_pair, nj, nk));
            }
            rows.push((spec.name.clone(), devs));
        }
        let mut csv = String::from("recipe");
        let tasks: Vec<&str> = TaskKind::ALL.iter().map(|t| t.name()).collect();
        for t in &tasks {
            csv.push_str(&format!(",{t}"));
        }
        csv.push('\n');
        for (name, devs) in &rows {
            csv.push_str(name);
            for t in &tasks {
                csv.push(',');
                if let Some(v) = devs.get(*t) {
                    csv.push_str(&format!("{v:.6}"));
                }
            }
            csv.push('\n');
        }
        self.write_csv(&dir.join("deviations.csv"), csv)?;
        let json = serde_json::json!({
            "config": self.hash,
            "rows": rows.iter().map(|(n, d)| serde_json::json!({"recipe": n, "deviation": d})).collect::<Vec<_>>(),
        });
        std::fs::write(
            dir.join("deviations.json"),
            serde_json::to_string_pretty(&json).unwrap() + "\n",
        )
        .map_err(|e| Error::io(dir, e))
    }

    fn repr_path(&self, model: &str, layer: usize) -> PathBuf {
        self.out.join(format!("analysis/repr_{model}_L{layer}.bin"))
    }

    pub fn run_analyze(&self) -> Result<()> {
        self.ensure_upstream("pretrain")?;
        if self.cfg.finetune.is_some() {
            self.ensure_upstream("finetune")?;
        }
        let dir = self.out.join("analysis");
        if self.stage_up_to_date("analyze", &dir.join("probes.json")) {
            log::info!("analyze: up to date");
            return Ok(());
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tok = Tokenizer::new();
        let w = self.load_active_world()?;
        let has_atlantis = w.atlantis_count() > 0;
        let layers = self.cfg.analysis_layers();
        let deepest = self.cfg.deepest_layer();

        let mut specs = vec![self.main_spec()?];
        specs.extend(self.sweep_specs()?);
        specs.extend(self.finetune_specs()?);

        let mut probes_summary: Vec<serde_json::Value> = Vec::new();
        let mut cka_entries: Vec<CkaEntry> = Vec::new();
        let mut deep_mats: BTreeMap<String, ReprMatrix> = BTreeMap::new();

        for spec in &specs {
            let (model, _, _) = load_checkpoint(&self.ckpt_path(&spec.name), Some(&tok.spec()))?;
            let prefix = extraction_prefix(&spec.tasks);
            let source = format!("{}/{}", self.hash, spec.name);
            let mats = repr::extract_representations(
                &model, &tok, &w, prefix, &layers, has_atlantis, &source,
            )?;
            for mat in mats {
                let layer = mat.layer;
                mat.save(&self.repr_path(&spec.name, layer))?;
                let standard = mat.filter(|c| !c.is_atlantis);

                let probe = repr::probe_matrix(&standard, self.cfg.analysis.probe_split_seed)?;
                self.write_json_tagged(&dir.join(format!("probe_{}_L{layer}.json", spec.name)), &probe)?;
                probes_summary.push(serde_json::json!({
                    "model": spec.name,
                    "layer": layer,
                    "r2_x": probe.r2_x,
                    "r2_y": probe.r2_y,
                    "mae": probe.mae,
                    "config": self.hash,
                }));

                if layer == deepest {
                    self.export_pca(&dir, &spec.name, &mat)?;
                    if has_atlantis {
                        self.export_transfer(&dir, &spec.name, &mat)?;
                    }
                    if spec.role != ModelRole::Finetune {
                        cka_entries.push(CkaEntry {
                            label: task_set_label(&spec.tasks),
                            seed: spec.seed,
                            matrix: standard.clone(),
                        });
                    }
                    deep_mats.insert(spec.name.clone(), standard);
                }
            }
        }
        std::fs::write(
            dir.join("probes.json"),
            serde_json::to_string_pretty(&probes_summary).unwrap() + "\n",
        )
        .map_err(|e| Error::io(&dir, e))?;

        if cka_entries.len() >= 2 {
            let report = repr::cka_matrix(&cka_entries, deepest, self.cfg.analysis.cka_disjoint_only)?;
            self.write_json_tagged(&dir.join(format!("cka_L{deepest}.json")), &report)?;
            self.write_csv(&dir.join(format!("cka_L{deepest}.csv")), report.to_csv())?;
            self.export_cka_by_task_count(&dir, &cka_entries, deepest)?;
        }

        // prefix-insensitivity diagnostic on the lineage model
        let main = self.main_spec()?;
        if let Some(main_mat) = deep_mats.get(&main.name) {
            let (model, _, _) = load_checkpoint(&self.ckpt_path(&main.name), Some(&tok.spec()))?;
            let p1 = extraction_prefix(&main.tasks);
            let p2 = TaskKind::ALL
                .into_iter()
                .find(|t| *t != p1)
                .expect("more than one task exists");
            let alt = repr::extract_representations(
                &model,
                &tok,
                &w,
                p2,
                &[deepest],
                has_atlantis,
                &format!("{}/{}", self.hash, main.name),
            )?
            .remove(0)
            .filter(|c| !c.is_atlantis);
            let value = repr::cka(main_mat, &alt)?;
            let jp = dir.join("prefix_sensitivity.json");
            std::fs::write(
                &jp,
                serde_json::to_string_pretty(&serde_json::json!({
                    "model": main.name,
                    "layer": deepest,
                    "prefix_a": p1.name(),
                    "prefix_b": p2.name(),
                    "cka": value,
                    "config": self.hash,
                }))
                .unwrap()
                    + "\n",
            )
            .map_err(|e| Error::io(&jp, e))?;
        }
        self.write_stamp("analyze")
    }

    fn export_pca(&self, dir: &Path, name: &str, mat: &ReprMatrix) -> Result<()> {
        let k = self.cfg.analysis.pca_components.min(mat.data.dim().1).min(mat.data.dim().0);
        let p = repr::pca(&mat.data, k)?;
        let mut csv = String::from("id,x,y,atlantis");
        for j in 0..k {
            csv.push_str(&format!(",pc{}", j + 1));
        }
        csv.push('\n');
        for (i, c) in mat.cities.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{}", c.id, c.x, c.y, u8::from(c.is_atlantis)));
            for j in 0..k {
                csv.push_str(&format!(",{:.6}", p.scores[[i, j]]));
            }
            csv.push('\n');
        }
        let path = dir.join(format!("pca_{name}_L{}.csv", mat.layer));
        self.write_csv(&path, csv)?;
        let meta = dir.join(format!("pca_{name}_L{}.json", mat.layer));
        std::fs::write(
            &meta,
            serde_json::to_string_pretty(&serde_json::json!({
                "explained_variance": p.explained_variance,
                "explained_ratio": p.explained_ratio,
                "config": self.hash,
            }))
            .unwrap()
                + "\n",
        )
        .map_err(|e| Error::io(&meta, e))
    }

    /// Probe fitted on non-atlantis rows only (capped), applied to atlantis
    /// rows and to held-out standard rows for comparison.
    fn export_transfer(&self, dir: &Path, name: &str, mat: &ReprMatrix) -> Result<()> {
        let standard = mat.filter(|c| !c.is_atlantis);
        let atlantis = mat.filter(|c| c.is_atlantis);
        if atlantis.cities.is_empty() {
            return Ok(());
        }
        let n = standard.cities.len();
        let mut idx: Vec<usize> = (0..n).collect();
        crate::rng::keyed_shuffle(&mut idx, self.cfg.analysis.probe_split_seed, "transfer_split");
        let cap = self.cfg.analysis.transfer_train_cities.min(n.saturating_sub(n / 10).max(1));
        let split = repr::Split {
            train: idx[..cap].to_vec(),
            test: idx[cap..].to_vec(),
        };
        if split.test.is_empty() {
            return Ok(());
        }
        let coords: Vec<(f64, f64)> = standard
            .cities
            .iter()
            .map(|c| (c.x as f64, c.y as f64))
            .collect();
        let probe = repr::linear_probe(&standard.data, &coords, &split)?;
        let atl_errs = repr::probe_transfer(&probe, &atlantis)?;
        let mut csv = String::from("group,id,error\n");
        for (i, e) in atl_errs.iter().enumerate() {
            csv.push_str(&format!("atlantis,{},{e:.6}\n", atlantis.cities[i].id));
        }
        for &i in &split.test {
            let row: Vec<f32> = standard.data.row(i).to_vec();
            let (px, py) = probe.predict(&row);
            let c = &standard.cities[i];
            let err = ((px - c.x as f64).powi(2) + (py - c.y as f64).powi(2)).sqrt();
            csv.push_str(&format!("standard_heldout,{},{err:.6}\n", c.id));
        }
        let path = dir.join(format!("transfer_{name}_L{}.csv", mat.layer));
        self.write_csv(&path, csv)
    }

    /// Mean disjoint-pair CKA grouped by task count (models on both sides of
    /// a pair trained on the same number of tasks, sharing none).
    fn export_cka_by_task_count(
        &self,
        dir: &Path,
        entries: &[CkaEntry],
        layer: usize,
    ) -> Result<()> {
        let mut buckets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                let (a, b) = (&entries[i], &entries[j]);
                let ta: Vec<&str> = a.label.split('+').collect();
                let tb: Vec<&str> = b.label.split('+').collect();
                if ta.len() != tb.len() || ta.iter().any(|t| tb.contains(t)) {
                    continue;
                }
                buckets
                    .entry(ta.len())
                    .or_default()
                    .push(repr::cka(&a.matrix, &b.matrix)?);
            }
        }
        if buckets.is_empty() {
            return Ok(());
        }
        let mut csv = String::from("task_count,layer,mean_cka,sem,n_pairs\n");
        for (k, vals) in buckets {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let sem = if n > 1 {
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            csv.push_str(&format!("{k},{layer},{mean:.6},{sem:.6},{n}\n"));
        }
        let path = dir.join("cka_by_task_count.csv");
        self.write_csv(&path, csv)
    }

    pub fn run_report(&self) -> Result<()> {
        self.ensure_upstream("analyze")?;
        let dir = self.out.join("plots");
        if self.stage_up_to_date("report", &dir) {
            log::info!("report: up to date");
            return Ok(());
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tag = format!("config={} seed={}", self.hash, self.cfg.seed);
        let deepest = self.cfg.deepest_layer();

        let mut specs = vec![self.main_spec()?];
        specs.extend(self.sweep_specs()?);
        specs.extend(self.finetune_specs()?);

        for spec in &specs {
            // PCA scatter colored by geographic region buckets
            let mat = ReprMatrix::load(&self.repr_path(&spec.name, deepest))?;
            if mat.data.dim().1 < 2 {
                continue;
            }
            if let Ok(p) = repr::pca(&mat.data, 2) {
                let points: Vec<plots::ScatterPoint> = mat
                    .cities
                    .iter()
                    .enumerate()
                    .map(|(i, c)| plots::ScatterPoint {
                        x: p.scores[[i, 0]],
                        y: p.scores[[i, 1]],
                        class: region_bucket(c.x, c.y),
                        highlighted: c.is_atlantis,
                    })
                    .collect();
                plots::scatter(
                    &dir.join(format!("pca_{}.svg", spec.name)),
                    &format!("PCA layer {deepest}: {}", spec.name),
                    &tag,
                    &points,
                )?;
            }
            // probe reconstruction scatter
            let probe_path = self
                .out
                .join(format!("analysis/probe_{}_L{deepest}.json", spec.name));
            if let Ok(text) = std::fs::read_to_string(&probe_path) {
                if let Ok(probe) = serde_json::from_str::<repr::ProbeReport>(&text) {
                    let standard = mat.filter(|c| !c.is_atlantis);
                    let points: Vec<plots::ScatterPoint> = standard
                        .cities
                        .iter()
                        .enumerate()
                        .map(|(i, c)| {
                            let (px, py) = probe.predict(&standard.data.row(i).to_vec());
                            plots::ScatterPoint {
                                x: px,
                                y: py,
                                class: region_bucket(c.x, c.y),
                                highlighted: false,
                            }
                        })
                        .collect();
                    plots::scatter(
                        &dir.join(format!("probe_{}.svg", spec.name)),
                        &format!("Probe reconstruction layer {deepest}: {}", spec.name),
                        &tag,
                        &points,
                    )?;
                }
            }
            // loss curves
            let metrics = self.model_dir(&spec.name).join("metrics.jsonl");
            if let Ok(text) = std::fs::read_to_string(&metrics) {
                let mut train = Vec::new();
                let mut val = Vec::new();
                for line in text.lines() {
                    if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                        let step = v["step"].as_f64().unwrap_or(0.0);
                        if let Some(l) = v["train_loss"].as_f64() {
                            train.push((step, l));
                        }
                        if let Some(l) = v["val_loss"].as_f64() {
                            val.push((step, l));
                        }
                    }
                }
                let mut series = vec![("train".to_string(), train)];
                if !val.is_empty() {
                    series.push(("val".to_string(), val));
                }
                plots::step_series(
                    &dir.join(format!("loss_{}.svg", spec.name)),
                    &format!("Loss: {}", spec.name),
                    &tag,
                    &series,
                )?;
            }
            // transfer histogram
            let tpath = self
                .out
                .join(format!("analysis/transfer_{}_L{deepest}.csv", spec.name));
            if let Ok(text) = std::fs::read_to_string(&tpath) {
                let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
                    let mut cols = line.split(',');
                    if let (Some(g), Some(_), Some(e)) = (cols.next(), cols.next(), cols.next()) {
                        if let Ok(v) = e.parse::<f64>() {
                            groups.entry(g.to_string()).or_default().push(v);
                        }
                    }
                }
                let series: Vec<(String, Vec<f64>)> = groups.into_iter().collect();
                if !series.is_empty() {
                    plots::histogram(
                        &dir.join(format!("transfer_{}.svg", spec.name)),
                        &format!("Probe transfer error: {}", spec.name),
                        &tag,
                        &series,
                        24,
                    )?;
                }
            }
        }

        // CKA heatmap
        let cka_path = self.out.join(format!("analysis/cka_L{deepest}.json"));
        if let Ok(text) = std::fs::read_to_string(&cka_path) {
            if let Ok(report) = serde_json::from_str::<repr::CkaReport>(&text) {
                let mut labels: Vec<String> = Vec::new();
                for c in &report.cells {
                    for l in [&c.row, &c.col] {
                        if !labels.contains(l) {
                            labels.push(l.clone());
                        }
                    }
                }
                labels.sort();
                let values: Vec<Vec<Option<f64>>> = labels
                    .iter()
                    .map(|r| {
                        labels
                            .iter()
                            .map(|c| report.cell(r, c).map(|cell| cell.mean))
                            .collect()
                    })
                    .collect();
                plots::heatmap(
                    &dir.join(format!("cka_L{deepest}.svg")),
                    &format!("CKA layer {deepest}"),
                    &tag,
                    &labels,
                    &labels,
                    &values,
                    0.5,
                )?;
            }
        }

        // deviation heatmap
        let dev_path = self.out.join("eval/deviations.csv");
        if let Ok(text) = std::fs::read_to_string(&dev_path) {
            let mut lines = text.lines().filter(|l| !l.starts_with('#'));
            let cols: Vec<String> = lines
                .next()
                .map(|h| h.split(',').skip(1).map(String::from).collect())
                .unwrap_or_default();
            let mut rows = Vec::new();
            let mut values = Vec::new();
            for line in lines {
                let mut it = line.split(',');
                rows.push(it.next().unwrap_or("").to_string());
                values.push(it.map(|v| v.parse::<f64>().ok()).collect::<Vec<_>>());
            }
            if !rows.is_empty() {
                plots::heatmap(
                    &dir.join("deviation.svg"),
                    "Deviation from best-teacher expectation",
                    &tag,
                    &rows,
                    &cols,
                    &values,
                    0.0,
                )?;
            }
        }
        self.write_stamp("report")
    }

    pub fn run_all(&self) -> Result<()> {
        self.run_world()?;
        self.run_gen()?;
        self.run_pretrain()?;
        self.run_finetune()?;
        self.run_eval()?;
        self.run_analyze()?;
        self.run_report()
    }
}

/// Coarse geographic bucket (4 longitude x 2 latitude cells) for plot colors.
fn region_bucket(x: i64, y: i64) -> usize {
    let lon_band = (((x + 1800) / 900).clamp(0, 3)) as usize;
    let lat_band = usize::from(y >= 0);
    lat_band * 4 + lon_band
}

struct EpochEvalHook<'a> {
    pipeline: &'a Pipeline,
    tok: &'a Tokenizer,
    tasks: Vec<TaskKind>,
    every: u64,
    log_path: PathBuf,
}

impl EpochEvalHook<'_> {
    fn run(&mut self, epoch: u64, model: &Model<f32>) -> Result<()> {
        if self.every == 0 || epoch % self.every != 0 {
            return Ok(());
        }
        let mut records = Vec::new();
        for &task in &self.tasks {
            for cond in self.pipeline.conditions() {
                let lines = self.pipeline.eval_lines(task, cond)?;
                let sub = &lines[..lines.len().min(256)];
                let report = eval::evaluate(model, self.tok, sub, cond)?;
                records.push(serde_json::json!({
                    "epoch": epoch,
                    "task": task.name(),
                    "condition": cond.name(),
                    "value": report.value,
                    "parse_failures": report.parse_failures,
                }));
            }
        }
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(&r).unwrap());
            text.push('\n');
        }
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log_path)
            .map_err(|e| Error::io(&self.log_path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&self.log_path, e))
    }
}
