//! Deterministic dataset sampling.
//!
//! Row `i` of task `t` is a pure function of `(seed, label, i)`, so any row
//! can be regenerated in isolation and generation could be parallelized
//! without changing output. Files hold one rendered example per line (LF);
//! each dataset gets a JSON manifest with component counts, class frequencies
//! for categorical tasks, and a content hash.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tasks::{compute_answer, parse_example, Answer, TaskExample, TaskKind};
use crate::world::{City, World};

/// How atlantis cities participate in sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtlantisPolicy {
    /// Only non-atlantis cities (pretraining default).
    Exclude,
    /// Every example must mention at least one atlantis city (fine-tuning
    /// target data and atlantis eval sets); rejection-sampled.
    RequireAtLeastOne,
    /// All cities sampled uniformly, no special treatment.
    Uniform,
}

/// Eval-set condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Standard,
    Atlantis,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Standard => "standard",
            Condition::Atlantis => "atlantis",
        }
    }

    fn policy(self) -> AtlantisPolicy {
        match self {
            Condition::Standard => AtlantisPolicy::Exclude,
            Condition::Atlantis => AtlantisPolicy::RequireAtLeastOne,
        }
    }
}

/// Fine-tuning mixture sizes; defaults are the full-scale recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSizes {
    pub rows_per_target: u64,
    pub replay_rows: u64,
    pub elicit_rows_per_task: u64,
}

impl Default for FinetuneSizes {
    fn default() -> Self {
        FinetuneSizes {
            rows_per_target: 100_000,
            replay_rows: 20_000,
            elicit_rows_per_task: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpecInfo {
    pub kind: String,
    pub tasks: Vec<String>,
    pub rows_per_task: u64,
    pub seed: u64,
    pub atlantis_policy: AtlantisPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplayInfo>,
    #[serde(default)]
    pub elicitation_rows_per_task: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayInfo {
    pub source: PathBuf,
    pub rows: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub name: String,
    pub rows: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpecInfo,
    pub components: Vec<ComponentCount>,
    pub row_count: u64,
    /// task name -> class label -> count, for categorical tasks.
    pub class_freq: BTreeMap<String, BTreeMap<String, u64>>,
    /// SHA-256 of the dataset file bytes.
    pub content_hash: String,
    /// Config hash stamped by the pipeline, when run from a config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_tag: Option<String>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialize: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
    }
}

/// Path of the manifest that sits next to a dataset file.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

/// Recomputes the dataset file hash and compares with the manifest.
pub fn verify_manifest(dataset: &Path, manifest: &DatasetManifest) -> Result<bool> {
    let bytes = std::fs::read(dataset).map_err(|e| Error::io(dataset, e))?;
    Ok(hex(&Sha256::digest(&bytes)) == manifest.content_hash)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const ATTEMPT_LIMIT: u64 = 100_000;

fn max_cities_needed(tasks: &[TaskKind]) -> usize {
    tasks
        .iter()
        .map(|t| match t {
            TaskKind::Inside => 7,
            TaskKind::Perimeter => 5,
            TaskKind::Crossing => 4,
            TaskKind::TriArea | TaskKind::Angle => 3,
            TaskKind::Distance | TaskKind::Compass => 2,
        })
        .max()
        .unwrap_or(0)
}

fn build_pool<'a>(world: &'a World, policy: AtlantisPolicy) -> Result<Vec<&'a City>> {
    if !world.ids_assigned() {
        return Err(Error::UnassignedIds);
    }
    let pool: Vec<&City> = match policy {
        AtlantisPolicy::Exclude => world.cities.iter().filter(|c| !c.is_atlantis).collect(),
        _ => world.cities.iter().collect(),
    };
    if pool.is_empty() {
        return Err(Error::EmptyWorld);
    }
    if policy == AtlantisPolicy::RequireAtLeastOne && !pool.iter().any(|c| c.is_atlantis) {
        return Err(Error::DatasetSpec(
            "policy requires atlantis cities but the world has none".into(),
        ));
    }
    Ok(pool)
}

fn sample_distinct(pool_len: usize, k: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    while picked.len() < k {
        let c = r.random_range(0..pool_len);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// One example for `kind` from `pool`; all cities in an example are distinct,
/// and the geometric preconditions (distinct coordinates for angle vertex and
/// compass endpoints) are enforced by resampling within the row's stream.
fn sample_with_pool(
    pool: &[&City],
    kind: TaskKind,
    require_atlantis: bool,
    r: &mut impl Rng,
) -> Result<TaskExample> {
    let n = match kind {
        TaskKind::Distance | TaskKind::Compass => 2,
        TaskKind::TriArea | TaskKind::Angle => 3,
        TaskKind::Crossing => 4,
        TaskKind::Inside => 1 + r.random_range(3..=6usize),
        TaskKind::Perimeter => r.random_range(3..=5usize),
    };
    if pool.len() < n {
        return Err(Error::DatasetSpec(format!(
            "{} needs {n} cities but the eligible pool has {}",
            kind.name(),
            pool.len()
        )));
    }
    for attempt in 0..ATTEMPT_LIMIT {
        let picked = sample_distinct(pool.len(), n, r);
        let cities: Vec<&City> = picked.iter().map(|&i| pool[i]).collect();
        if require_atlantis && !cities.iter().any(|c| c.is_atlantis) {
            continue;
        }
        let ok = match kind {
            TaskKind::Angle => {
                cities[1].point() != cities[0].point() && cities[1].point() != cities[2].point()
            }
            TaskKind::Compass => cities[0].point() != cities[1].point(),
            _ => true,
        };
        if !ok {
            continue;
        }
        let pts: Vec<_> = cities.iter().map(|c| c.point()).collect();
        let answer = compute_answer(kind, &pts)?;
        let ids: Vec<u16> = cities.iter().map(|c| c.id.unwrap()).collect();
        let _ = attempt;
        return TaskExample::new(kind, ids, answer);
    }
    Err(Error::SamplingFailed {
        what: format!("{} example", kind.name()),
        attempts: ATTEMPT_LIMIT,
    })
}

/// Regenerates a single row in isolation; equals the corresponding row of the
/// full generation pass (before the file-level shuffle).
pub fn sample_row(
    world: &World,
    kind: TaskKind,
    policy: AtlantisPolicy,
    seed: u64,
    label_prefix: &str,
    index: u64,
) -> Result<TaskExample> {
    let pool = build_pool(world, policy)?;
    let mut r = rng::stream(seed, &format!("{label_prefix}/{}", kind.name()), index);
    sample_with_pool(&pool, kind, policy == AtlantisPolicy::RequireAtLeastOne, &mut r)
}

struct FreqTable(BTreeMap<String, BTreeMap<String, u64>>);

impl FreqTable {
    fn new() -> Self {
        FreqTable(BTreeMap::new())
    }

    fn record(&mut self, kind: TaskKind, answer: &Answer) {
        if !kind.is_categorical() {
            return;
        }
        let label = match answer {
            Answer::Dir(d) => d.as_str().to_string(),
            Answer::Flag(true) => "TRUE".into(),
            Answer::Flag(false) => "FALSE".into(),
            Answer::Num(_) => return,
        };
        *self
            .0
            .entry(kind.name().into())
            .or_default()
            .entry(label)
            .or_insert(0) += 1;
    }

    fn record_line(&mut self, line: &str) {
        if let Ok(p) = parse_example(line) {
            if let Some(a) = p.answer {
                self.record(p.kind, &a);
            }
        }
    }
}

fn generate_component(
    pool: &[&City],
    kind: TaskKind,
    rows: u64,
    seed: u64,
    label_prefix: &str,
    require_atlantis: bool,
    freq: &mut FreqTable,
) -> Result<Vec<String>> {
    let label = format!("{label_prefix}/{}", kind.name());
    let mut out = Vec::with_capacity(rows as usize);
    for i in 0..rows {
        let mut r = rng::stream(seed, &label, i);
        let ex = sample_with_pool(pool, kind, require_atlantis, &mut r)?;
        freq.record(kind, &ex.answer);
        out.push(ex.text);
    }
    Ok(out)
}

fn write_dataset(lines: &[String], path: &Path) -> Result<String> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(hex(&hasher.finalize()))
}

/// Samples `rows_per_task` examples per task, concatenates, shuffles with a
/// keyed shuffle, and writes the dataset plus its manifest.
pub fn sample_pretrain(
    world: &World,
    tasks: &[TaskKind],
    rows_per_task: u64,
    seed: u64,
    policy: AtlantisPolicy,
    out: &Path,
) -> Result<DatasetManifest> {
    if tasks.is_empty() || rows_per_task == 0 {
        return Err(Error::DatasetSpec("need at least one task and one row".into()));
    }
    if policy == AtlantisPolicy::RequireAtLeastOne {
        return Err(Error::DatasetSpec(
            "pretraining supports exclude or uniform atlantis policies".into(),
        ));
    }
    let pool = build_pool(world, policy)?;
    if pool.len() < max_cities_needed(tasks) {
        return Err(Error::DatasetSpec(format!(
            "world too small: {} eligible cities",
            pool.len()
        )));
    }
    let mut freq = FreqTable::new();
    let mut lines: Vec<String> = Vec::with_capacity(tasks.len() * rows_per_task as usize);
    let mut components = Vec::new();
    for &task in tasks {
        let rows = generate_component(&pool, task, rows_per_task, seed, "pretrain", false, &mut freq)?;
        components.push(ComponentCount {
            name: format!("pretrain/{}", task.name()),
            rows: rows.len() as u64,
        });
        lines.extend(rows);
    }
    rng::keyed_shuffle(&mut lines, seed, "pretrain/shuffle");
    let content_hash = write_dataset(&lines, out)?;
    let manifest = DatasetManifest {
        spec: DatasetSpecInfo {
            kind: "pretrain".into(),
            tasks: tasks.iter().map(|t| t.name().into()).collect(),
            rows_per_task,
            seed,
            atlantis_policy: policy,
            replay: None,
            elicitation_rows_per_task: 0,
        },
        components,
        row_count: lines.len() as u64,
        class_freq: freq.0,
        content_hash,
        config_tag: None,
    };
    manifest.save(&manifest_path(out))?;
    Ok(manifest)
}

/// Fine-tuning mixture: per target task, rows that each mention at least one
/// atlantis city; a replay slice drawn uniformly from the pretraining file;
/// and a small no-atlantis elicitation set for every task.
pub fn sample_finetune(
    world_prime: &World,
    target_tasks: &[TaskKind],
    seed: u64,
    pretrain_source: &Path,
    sizes: FinetuneSizes,
    out: &Path,
) -> Result<DatasetManifest> {
    if target_tasks.is_empty() {
        return Err(Error::DatasetSpec("need at least one target task".into()));
    }
    if world_prime.atlantis_count() == 0 {
        return Err(Error::DatasetSpec("fine-tuning requires atlantis cities".into()));
    }
    if !pretrain_source.exists() {
        return Err(Error::MissingArtifact(pretrain_source.into()));
    }

    let mut freq = FreqTable::new();
    let mut lines: Vec<String> = Vec::new();
    let mut components = Vec::new();

    // (1) target rows with >= 1 atlantis city
    let full_pool = build_pool(world_prime, AtlantisPolicy::RequireAtLeastOne)?;
    for &task in target_tasks {
        let rows = generate_component(
            &full_pool,
            task,
            sizes.rows_per_target,
            seed,
            "finetune",
            true,
            &mut freq,
        )?;
        components.push(ComponentCount {
            name: format!("finetune/{}", task.name()),
            rows: rows.len() as u64,
        });
        lines.extend(rows);
    }

    // (2) replay rows sampled uniformly without replacement from the source
    let file = std::fs::File::open(pretrain_source).map_err(|e| Error::io(pretrain_source, e))?;
    let source_lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(pretrain_source, e))?;
    if (sizes.replay_rows as usize) > source_lines.len() {
        return Err(Error::DatasetSpec(format!(
            "replay rows {} exceed pretrain source size {}",
            sizes.replay_rows,
            source_lines.len()
        )));
    }
    let idx = rng::sample_indices(source_lines.len(), sizes.replay_rows as usize, seed, "replay");
    for i in idx {
        freq.record_line(&source_lines[i]);
        lines.push(source_lines[i].clone());
    }
    components.push(ComponentCount {
        name: "replay".into(),
        rows: sizes.replay_rows,
    });

    // (3) elicitation rows for every task, no atlantis
    let std_pool = build_pool(world_prime, AtlantisPolicy::Exclude)?;
    for task in TaskKind::ALL {
        let rows = generate_component(
            &std_pool,
            task,
            sizes.elicit_rows_per_task,
            seed,
            "elicit",
            false,
            &mut freq,
        )?;
        components.push(ComponentCount {
            name: format!("elicit/{}", task.name()),
            rows: rows.len() as u64,
        });
        lines.extend(rows);
    }

    rng::keyed_shuffle(&mut lines, seed, "finetune/shuffle");
    let content_hash = write_dataset(&lines, out)?;
    let manifest = DatasetManifest {
        spec: DatasetSpecInfo {
            kind: "finetune".into(),
            tasks: target_tasks.iter().map(|t| t.name().into()).collect(),
            rows_per_task: sizes.rows_per_target,
            seed,
            atlantis_policy: AtlantisPolicy::RequireAtLeastOne,
            // file name only, so manifests are byte-identical across runs
            // rooted in different output directories
            replay: Some(ReplayInfo {
                source: pretrain_source.file_name().unwrap_or_default().into(),
                rows: sizes.replay_rows,
            }),
            elicitation_rows_per_task: sizes.elicit_rows_per_task,
        },
        components,
        row_count: lines.len() as u64,
        class_freq: freq.0,
        content_hash,
        config_tag: None,
    };
    manifest.save(&manifest_path(out))?;
    Ok(manifest)
}

/// Evaluation set for one `(task, condition)` pair. Uses RNG streams disjoint
/// from every training stream; rows are not shuffled (their order is already
/// the per-row stream order).
pub fn sample_eval(
    world_prime: &World,
    task: TaskKind,
    condition: Condition,
    n_rows: u64,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    if n_rows == 0 {
        return Err(Error::DatasetSpec("eval set needs at least one row".into()));
    }
    let policy = condition.policy();
    let pool = build_pool(world_prime, policy)?;
    let mut freq = FreqTable::new();
    let label_prefix = format!("eval/{}", condition.name());
    let lines = generate_component(
        &pool,
        task,
        n_rows,
        seed,
        &label_prefix,
        policy == AtlantisPolicy::RequireAtLeastOne,
        &mut freq,
    )?;
    let content_hash = write_dataset(&lines, out)?;
    let manifest = DatasetManifest {
        spec: DatasetSpecInfo {
            kind: format!("eval/{}", condition.name()),
            tasks: vec![task.name().into()],
            rows_per_task: n_rows,
            seed,
            atlantis_policy: policy,
            replay: None,
            elicitation_rows_per_task: 0,
        },
        components: vec![ComponentCount {
            name: format!("{label_prefix}/{}", task.name()),
            rows: n_rows,
        }],
        row_count: n_rows,
        class_freq: freq.0,
        content_hash,
        config_tag: None,
    };
    manifest.save(&manifest_path(out))?;
    Ok(manifest)
}

/// Reads a dataset file back as lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{apply_update, assign_ids, generate_atlantis, project};

    fn test_world(n: usize, with_atlantis: bool) -> World {
        let cities = (0..n)
            .map(|i| {
                let lat = ((i * 37) % 160) as f64 - 80.0 + 0.3;
                let lon = ((i * 91) % 340) as f64 - 170.0 + 0.7;
                let (x, y) = project(lon, lat);
                City {
                    id: None,
                    name: format!("c{i:04}"),
                    lat,
                    lon,
                    x,
                    y,
                    is_atlantis: false,
                }
            })
            .collect();
        let w = assign_ids(&World { cities, rng_seed: 0 }, 42).unwrap();
        if with_atlantis {
            let u = generate_atlantis(&w, 10, -35.0, 35.0, 3.0, 42).unwrap();
            apply_update(&w, &u).unwrap()
        } else {
            w
        }
    }

    #[test]
    fn pretrain_deterministic_and_sized() {
        let w = test_world(60, false);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.txt");
        let p2 = dir.path().join("b.txt");
        let tasks = [TaskKind::Distance, TaskKind::Compass];
        let m1 = sample_pretrain(&w, &tasks, 50, 42, AtlantisPolicy::Exclude, &p1).unwrap();
        let m2 = sample_pretrain(&w, &tasks, 50, 42, AtlantisPolicy::Exclude, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(m1.content_hash, m2.content_hash);
        assert_eq!(m1.row_count, 100);
        assert!(verify_manifest(&p1, &m1).unwrap());
        // categorical class frequencies cover all compass rows
        let compass_total: u64 = m1.class_freq["compass"].values().sum();
        assert_eq!(compass_total, 50);
    }

    #[test]
    fn pretrain_excludes_atlantis_ids() {
        let w = test_world(50, true);
        let atl_ids: std::collections::HashSet<u16> = w
            .cities
            .iter()
            .filter(|c| c.is_atlantis)
            .map(|c| c.id.unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        sample_pretrain(&w, &TaskKind::ALL, 20, 7, AtlantisPolicy::Exclude, &p).unwrap();
        for line in read_lines(&p).unwrap() {
            let parsed = parse_example(&line).unwrap();
            assert!(parsed.ids.iter().all(|id| !atl_ids.contains(id)), "{line}");
        }
    }

    #[test]
    fn per_row_isolation_matches_full_pass() {
        let w = test_world(40, false);
        let pool = build_pool(&w, AtlantisPolicy::Exclude).unwrap();
        let mut freq = FreqTable::new();
        let rows =
            generate_component(&pool, TaskKind::TriArea, 20, 5, "pretrain", false, &mut freq)
                .unwrap();
        for (i, row) in rows.iter().enumerate() {
            let solo = sample_row(&w, TaskKind::TriArea, AtlantisPolicy::Exclude, 5, "pretrain", i as u64)
                .unwrap();
            assert_eq!(&solo.text, row);
        }
    }

    #[test]
    fn finetune_component_sizes_and_atlantis_presence() {
        let w = test_world(60, true);
        let dir = tempfile::tempdir().unwrap();
        let pre = dir.path().join("pre.txt");
        sample_pretrain(&w, &[TaskKind::Distance], 200, 42, AtlantisPolicy::Exclude, &pre).unwrap();
        let ft = dir.path().join("ft.txt");
        let sizes = FinetuneSizes {
            rows_per_target: 100,
            replay_rows: 40,
            elicit_rows_per_task: 8,
        };
        let m = sample_finetune(&w, &[TaskKind::Angle], 42, &pre, sizes, &ft).unwrap();
        assert_eq!(m.row_count, 100 + 40 + 7 * 8);
        let by_name: BTreeMap<&str, u64> =
            m.components.iter().map(|c| (c.name.as_str(), c.rows)).collect();
        assert_eq!(by_name["finetune/angle"], 100);
        assert_eq!(by_name["replay"], 40);
        assert_eq!(by_name["elicit/crossing"], 8);

        // every target row mentions >= 1 atlantis id
        let atl_ids: std::collections::HashSet<u16> = w
            .cities
            .iter()
            .filter(|c| c.is_atlantis)
            .map(|c| c.id.unwrap())
            .collect();
        let mut target_rows = 0;
        for line in read_lines(&ft).unwrap() {
            let parsed = parse_example(&line).unwrap();
            if parsed.kind == TaskKind::Angle
                && parsed.ids.iter().any(|id| atl_ids.contains(id))
            {
                target_rows += 1;
            }
        }
        assert!(target_rows >= 100, "found {target_rows}");
    }

    #[test]
    fn finetune_two_targets_doubles_component_one() {
        let w = test_world(60, true);
        let dir = tempfile::tempdir().unwrap();
        let pre = dir.path().join("pre.txt");
        sample_pretrain(&w, &[TaskKind::Distance], 100, 1, AtlantisPolicy::Exclude, &pre).unwrap();
        let ft = dir.path().join("ft.txt");
        let sizes = FinetuneSizes {
            rows_per_target: 50,
            replay_rows: 10,
            elicit_rows_per_task: 4,
        };
        let m = sample_finetune(
            &w,
            &[TaskKind::Distance, TaskKind::Perimeter],
            1,
            &pre,
            sizes,
            &ft,
        )
        .unwrap();
        let target_total: u64 = m
            .components
            .iter()
            .filter(|c| c.name.starts_with("finetune/"))
            .map(|c| c.rows)
            .sum();
        assert_eq!(target_total, 100);
    }

    #[test]
    fn finetune_requires_atlantis_and_source() {
        let w = test_world(30, false);
        let dir = tempfile::tempdir().unwrap();
        let err = sample_finetune(
            &w,
            &[TaskKind::Angle],
            1,
            &dir.path().join("missing.txt"),
            FinetuneSizes::default(),
            &dir.path().join("ft.txt"),
        );
        assert!(err.is_err());
    }

    #[test]
    fn eval_conditions() {
        let w = test_world(50, true);
        let dir = tempfile::tempdir().unwrap();
        let atl_ids: std::collections::HashSet<u16> = w
            .cities
            .iter()
            .filter(|c| c.is_atlantis)
            .map(|c| c.id.unwrap())
            .collect();

        let std_path = dir.path().join("eval_std.txt");
        sample_eval(&w, TaskKind::Compass, Condition::Standard, 64, 7, &std_path).unwrap();
        for line in read_lines(&std_path).unwrap() {
            let p = parse_example(&line).unwrap();
            assert!(p.ids.iter().all(|id| !atl_ids.contains(id)));
        }

        let atl_path = dir.path().join("eval_atl.txt");
        sample_eval(&w, TaskKind::Distance, Condition::Atlantis, 64, 7, &atl_path).unwrap();
        for line in read_lines(&atl_path).unwrap() {
            let p = parse_example(&line).unwrap();
            assert!(p.ids.iter().any(|id| atl_ids.contains(id)));
        }

        // determinism
        let again = dir.path().join("eval_atl2.txt");
        sample_eval(&w, TaskKind::Distance, Condition::Atlantis, 64, 7, &again).unwrap();
        assert_eq!(
            std::fs::read(&atl_path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn eval_atlantis_without_atlantis_world_errors() {
        let w = test_world(30, false);
        let dir = tempfile::tempdir().unwrap();
        let err = sample_eval(
            &w,
            TaskKind::Distance,
            Condition::Atlantis,
            16,
            7,
            &dir.path().join("e.txt"),
        );
        assert!(err.is_err());
    }
}
