//! Representation extraction and analysis.
//!
//! Per-city vectors come from the residual stream after a transformer block:
//! the model reads `<bos> task( c _ d d d d ,` and the vectors at the last
//! id digit and at the trailing delimiter are concatenated into one
//! `2 * hidden` row. Cities whose 4-digit id starts with zero are excluded
//! (they cluster separately because a leading `0` never occurs in numeric
//! answers). Downstream: PCA via SVD, OLS probes for (x, y), probe transfer
//! onto atlantis cities, and linear-kernel CKA.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tasks::TaskKind;
use crate::tokenizer::Tokenizer;
use crate::world::World;

/// Full-scale probe split sizes; smaller worlds fall back to the same ratio.
pub const PROBE_TRAIN: usize = 3250;
pub const PROBE_TEST: usize = 1250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityMeta {
    pub id: u16,
    pub x: i64,
    pub y: i64,
    pub is_atlantis: bool,
}

/// Rows = cities (sorted by id), columns = `2 * hidden` features.
#[derive(Clone, Debug)]
pub struct ReprMatrix {
    pub data: Array2<f32>,
    pub cities: Vec<CityMeta>,
    pub layer: usize,
    pub prefix: TaskKind,
    /// Identifies the checkpoint the matrix came from.
    pub source: String,
}

/// Ids matching `^0[0-9]*$` on the zero-padded string, i.e. any id below
/// 1000, are excluded from representation analyses.
pub fn leading_zero_excluded(id: u16) -> bool {
    id < 1000
}

/// The extraction input for one city: `task(` + `c_` + 4-digit id + delimiter.
/// The delimiter is the one the grammar puts after the first id.
pub fn extraction_input(prefix: TaskKind, id: u16) -> String {
    let delim = if prefix == TaskKind::Inside { ';' } else { ',' };
    format!("{}(c_{id:04}{delim}", prefix.token())
}

/// Extracts one ReprMatrix per requested layer.
///
/// `include_atlantis` keeps atlantis cities in the row set (needed for probe
/// transfer); leading-zero ids are always dropped. Rows are sorted by city id
/// so matrices from different models align.
pub fn extract_representations(
    model: &Model<f32>,
    tok: &Tokenizer,
    world: &World,
    prefix: TaskKind,
    layers: &[usize],
    include_atlantis: bool,
    source: &str,
) -> Result<Vec<ReprMatrix>> {
    if !world.ids_assigned() {
        return Err(Error::UnassignedIds);
    }
    let mut cities: Vec<CityMeta> = world
        .cities
        .iter()
        .filter(|c| include_atlantis || !c.is_atlantis)
        .filter(|c| !leading_zero_excluded(c.id.unwrap()))
        .map(|c| CityMeta {
            id: c.id.unwrap(),
            x: c.x,
            y: c.y,
            is_atlantis: c.is_atlantis,
        })
        .collect();
    cities.sort_by_key(|c| c.id);
    if cities.is_empty() {
        return Err(Error::EmptyWorld);
    }

    let h = model.cfg.hidden;
    let n = cities.len();
    let mut mats: Vec<Array2<f32>> = layers.iter().map(|_| Array2::zeros((n, 2 * h))).collect();

    const BATCH: usize = 128;
    for (chunk_idx, chunk) in cities.chunks(BATCH).enumerate() {
        let rows: Vec<Vec<u32>> = chunk
            .iter()
            .map(|c| tok.encode_prefix(&extraction_input(prefix, c.id)))
            .collect::<Result<_>>()?;
        let t = rows[0].len();
        debug_assert!(rows.iter().all(|r| r.len() == t));
        let tokens = crate::model::pad_batch(&rows);
        let fwd = model.forward(&tokens, layers)?;
        // capture positions: last id digit and the trailing delimiter
        let digit_pos = t - 2;
        let delim_pos = t - 1;
        for (li, (_, cap)) in fwd.captures.iter().enumerate() {
            for b in 0..chunk.len() {
                let row = chunk_idx * BATCH + b;
                mats[li]
                    .slice_mut(s![row, ..h])
                    .assign(&cap.slice(s![b, digit_pos, ..]));
                mats[li]
                    .slice_mut(s![row, h..])
                    .assign(&cap.slice(s![b, delim_pos, ..]));
            }
        }
    }

    Ok(layers
        .iter()
        .zip(mats)
        .map(|(&layer, data)| ReprMatrix {
            data,
            cities: cities.clone(),
            layer,
            prefix,
            source: source.to_string(),
        })
        .collect())
}

impl ReprMatrix {
    /// Row subset by predicate, preserving order.
    pub fn filter(&self, keep: impl Fn(&CityMeta) -> bool) -> ReprMatrix {
        let idx: Vec<usize> = self
            .cities
            .iter()
            .enumerate()
            .filter(|(_, c)| keep(c))
            .map(|(i, _)| i)
            .collect();
        let mut data = Array2::zeros((idx.len(), self.data.dim().1));
        for (r, &i) in idx.iter().enumerate() {
            data.slice_mut(s![r, ..]).assign(&self.data.slice(s![i, ..]));
        }
        ReprMatrix {
            data,
            cities: idx.iter().map(|&i| self.cities[i].clone()).collect(),
            layer: self.layer,
            prefix: self.prefix,
            source: self.source.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ReprFileMeta {
            source: self.source.clone(),
            layer: self.layer,
            prefix: self.prefix,
            filter: "exclude ids matching ^0[0-9]*$".into(),
            rows: self.data.dim().0,
            cols: self.data.dim().1,
            cities: self.cities.clone(),
        };
        let header = serde_json::to_vec(&meta).map_err(|e| Error::Config(format!("repr meta: {e}")))?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(b"REPRMAT1").map_err(|e| Error::io(path, e))?;
        w.write_all(&(header.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(&header).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ReprMatrix> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let corrupt = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("too short"))?;
        if &magic != b"REPRMAT1" {
            return Err(corrupt("bad magic"));
        }
        let mut lenbuf = [0u8; 8];
        r.read_exact(&mut lenbuf).map_err(|_| corrupt("missing header"))?;
        let hlen = u64::from_le_bytes(lenbuf) as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
        let meta: ReprFileMeta =
            serde_json::from_slice(&header).map_err(|_| corrupt("unreadable header"))?;
        let mut buf = vec![0u8; meta.rows * meta.cols * 4];
        r.read_exact(&mut buf).map_err(|_| corrupt("truncated data"))?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ReprMatrix {
            data: Array2::from_shape_vec((meta.rows, meta.cols), values)
                .map_err(|_| corrupt("bad shape"))?,
            cities: meta.cities,
            layer: meta.layer,
            prefix: meta.prefix,
            source: meta.source,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ReprFileMeta {
    source: String,
    layer: usize,
    prefix: TaskKind,
    filter: String,
    rows: usize,
    cols: usize,
    cities: Vec<CityMeta>,
}

// ---------------------------------------------------------------- PCA

#[derive(Clone, Debug)]
pub struct Pca {
    /// (n, k) projected coordinates.
    pub scores: Array2<f64>,
    /// (d, k) components, sign-fixed so the largest-magnitude loading of
    /// each component is positive.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

/// Mean-centered PCA via SVD.
pub fn pca(data: &Array2<f32>, k: usize) -> Result<Pca> {
    let (n, d) = data.dim();
    if k > d || k > n {
        return Err(Error::Shape(format!("k={k} exceeds data dims ({n}, {d})")));
    }
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for j in 0..d {
        let mean = data.column(j).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[(i, j)] = data[[i, j]] as f64 - mean;
        }
    }
    let svd = centered.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with vt");
    let sv = &svd.singular_values;

    let total_var: f64 = sv.iter().map(|s| s * s).sum::<f64>() / (n.max(2) - 1) as f64;
    let mut scores = Array2::zeros((n, k));
    let mut components = Array2::zeros((d, k));
    let mut explained = Vec::with_capacity(k);
    for j in 0..k {
        // deterministic sign: largest-magnitude loading positive
        let mut flip = 1.0;
        let mut best = 0.0f64;
        for i in 0..d {
            let v = vt[(j, i)];
            if v.abs() > best {
                best = v.abs();
                flip = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..d {
            components[[i, j]] = flip * vt[(j, i)];
        }
        for i in 0..n {
            scores[[i, j]] = flip * u[(i, j)] * sv[j];
        }
        explained.push(sv[j] * sv[j] / (n.max(2) - 1) as f64);
    }
    let ratio = explained
        .iter()
        .map(|e| if total_var > 0.0 { e / total_var } else { 0.0 })
        .collect();
    Ok(Pca {
        scores,
        components,
        explained_variance: explained,
        explained_ratio: ratio,
    })
}

// ---------------------------------------------------------------- probing

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic keyed shuffle of `0..n`, then the first block trains and the
/// next tests. Full scale uses 3250/1250; smaller sets keep the 13:5 ratio.
pub fn probe_split(n: usize, split_seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    rng::keyed_shuffle(&mut idx, split_seed, "probe_split");
    let (n_train, n_test) = if n >= PROBE_TRAIN + PROBE_TEST {
        (PROBE_TRAIN, PROBE_TEST)
    } else {
        let t = (n * PROBE_TRAIN) / (PROBE_TRAIN + PROBE_TEST);
        (t, n - t)
    };
    Split {
        train: idx[..n_train].to_vec(),
        test: idx[n_train..n_train + n_test].to_vec(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub weights_x: Vec<f64>,
    pub intercept_x: f64,
    pub weights_y: Vec<f64>,
    pub intercept_y: f64,
    pub r2_x: f64,
    pub r2_y: f64,
    /// Mean absolute error over test cities, averaged over both coordinates,
    /// in scaled coordinate units.
    pub mae: f64,
    pub split: Split,
    /// Set when the design matrix was rank-deficient and the minimum-norm
    /// solution was used.
    pub rank_deficient: bool,
}

impl ProbeReport {
    pub fn predict(&self, features: &[f32]) -> (f64, f64) {
        let mut x = self.intercept_x;
        let mut y = self.intercept_y;
        for (i, &f) in features.iter().enumerate() {
            x += self.weights_x[i] * f as f64;
            y += self.weights_y[i] * f as f64;
        }
        (x, y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("probe report: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// OLS with intercept, fit separately for x and y on the train rows of
/// `split`, scored (R^2 per coordinate, joint MAE) on the test rows.
/// Rank-deficient systems fall back to the SVD minimum-norm solution and are
/// flagged.
pub fn linear_probe(
    data: &Array2<f32>,
    coords: &[(f64, f64)],
    split: &Split,
) -> Result<ProbeReport> {
    let (n, d) = data.dim();
    if coords.len() != n {
        return Err(Error::Shape(format!("{n} rows vs {} coords", coords.len())));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Shape("probe split has an empty side".into()));
    }
    let nt = split.train.len();
    let mut design = DMatrix::<f64>::zeros(nt, d + 1);
    let mut tx = DVector::<f64>::zeros(nt);
    let mut ty = DVector::<f64>::zeros(nt);
    for (r, &i) in split.train.iter().enumerate() {
        for j in 0..d {
            design[(r, j)] = data[[i, j]] as f64;
        }
        design[(r, d)] = 1.0;
        tx[r] = coords[i].0;
        ty[r] = coords[i].1;
    }
    let svd = design.svd(true, true);
    let eps = 1e-10 * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let rank_deficient = rank < (d + 1).min(nt);
    if rank_deficient {
        log::warn!("probe design matrix rank {rank} < {}; minimum-norm solution", d + 1);
    }
    let wx = svd
        .solve(&tx, eps)
        .map_err(|e| Error::Shape(format!("probe solve: {e}")))?;
    let wy = svd
        .solve(&ty, eps)
        .map_err(|e| Error::Shape(format!("probe solve: {e}")))?;

    let predict = |w: &DVector<f64>, i: usize| -> f64 {
        let mut acc = w[d];
        for j in 0..d {
            acc += w[j] * data[[i, j]] as f64;
        }
        acc
    };
    let r2 = |w: &DVector<f64>, pick: fn(&(f64, f64)) -> f64| -> f64 {
        let mean: f64 =
            split.test.iter().map(|&i| pick(&coords[i])).sum::<f64>() / split.test.len() as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for &i in &split.test {
            let truth = pick(&coords[i]);
            let pred = predict(w, i);
            ss_res += (truth - pred) * (truth - pred);
            ss_tot += (truth - mean) * (truth - mean);
        }
        if ss_tot == 0.0 {
            return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
        }
        1.0 - ss_res / ss_tot
    };
    let r2_x = r2(&wx, |c| c.0);
    let r2_y = r2(&wy, |c| c.1);
    let mut mae = 0.0;
    for &i in &split.test {
        mae += 0.5
            * ((predict(&wx, i) - coords[i].0).abs() + (predict(&wy, i) - coords[i].1).abs());
    }
    mae /= split.test.len() as f64;

    Ok(ProbeReport {
        weights_x: wx.iter().take(d).copied().collect(),
        intercept_x: wx[d],
        weights_y: wy.iter().take(d).copied().collect(),
        intercept_y: wy[d],
        r2_x,
        r2_y,
        mae,
        split: split.clone(),
        rank_deficient,
    })
}

/// Probes a ReprMatrix for its own cities' coordinates.
pub fn probe_matrix(matrix: &ReprMatrix, split_seed: u64) -> Result<ProbeReport> {
    let coords: Vec<(f64, f64)> = matrix
        .cities
        .iter()
        .map(|c| (c.x as f64, c.y as f64))
        .collect();
    let split = probe_split(matrix.cities.len(), split_seed);
    linear_probe(&matrix.data, &coords, &split)
}

/// Applies a probe trained on non-atlantis rows to atlantis rows, returning
/// per-city Euclidean reconstruction errors.
pub fn probe_transfer(probe: &ProbeReport, atlantis: &ReprMatrix) -> Result<Vec<f64>> {
    if atlantis.cities.is_empty() {
        return Err(Error::EmptyWorld);
    }
    if atlantis.cities.iter().any(|c| !c.is_atlantis) {
        return Err(Error::Misaligned("transfer rows must all be atlantis".into()));
    }
    Ok(atlantis
        .cities
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let row: Vec<f32> = atlantis.data.row(i).to_vec();
            let (px, py) = probe.predict(&row);
            ((px - c.x as f64).powi(2) + (py - c.y as f64).powi(2)).sqrt()
        })
        .collect())
}

// ---------------------------------------------------------------- CKA

/// Linear-kernel CKA between two representation matrices with identical row
/// sets. Computed in feature space: with column-centered X, Y,
/// `CKA = |Xc'Yc|_F^2 / (|Xc'Xc|_F |Yc'Yc|_F)`, which equals the
/// double-centered kernel formula `<K,L>_F / (|K|_F |L|_F)` without
/// materializing the n x n kernels.
pub fn cka_raw(x: &Array2<f32>, y: &Array2<f32>) -> Result<f64> {
    let (nx, dx) = x.dim();
    let (ny, dy) = y.dim();
    if nx != ny {
        return Err(Error::Misaligned(format!("{nx} vs {ny} rows")));
    }
    let center = |m: &Array2<f32>, d: usize| -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(m.dim());
        for j in 0..d {
            let mean = m.column(j).iter().map(|&v| v as f64).sum::<f64>() / nx as f64;
            for i in 0..nx {
                out[[i, j]] = m[[i, j]] as f64 - mean;
            }
        }
        out
    };
    let xc = center(x, dx);
    let yc = center(y, dy);
    let gxy = xc.t().dot(&yc);
    let gxx = xc.t().dot(&xc);
    let gyy = yc.t().dot(&yc);
    let fro = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = fro(&gxx) * fro(&gyy);
    if denom == 0.0 {
        return Err(Error::DegenerateGeometry("rank-0 representation matrix"));
    }
    Ok(gxy.iter().map(|v| v * v).sum::<f64>() / denom)
}

/// CKA between two extracted matrices; rows must be the same cities in the
/// same order.
pub fn cka(x: &ReprMatrix, y: &ReprMatrix) -> Result<f64> {
    if x.cities.len() != y.cities.len()
        || x.cities.iter().zip(&y.cities).any(|(a, b)| a.id != b.id)
    {
        return Err(Error::Misaligned("city rows differ between matrices".into()));
    }
    cka_raw(&x.data, &y.data)
}

/// A model entry in a CKA sweep.
pub struct CkaEntry {
    /// Canonical label for the task set, e.g. "angle+compass".
    pub label: String,
    pub seed: u64,
    pub matrix: ReprMatrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkaCell {
    pub row: String,
    pub col: String,
    pub mean: f64,
    pub sem: f64,
    pub n_pairs: usize,
}

/// All pairwise CKA values aggregated per (task-set, task-set) cell across
/// seed pairs. Same-seed self-comparisons are excluded on the diagonal. With
/// `disjoint_only`, only pairs whose labels share no task are kept.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkaReport {
    pub layer: usize,
    pub cells: Vec<CkaCell>,
}

impl CkaReport {
    pub fn cell(&self, row: &str, col: &str) -> Option<&CkaCell> {
        self.cells
            .iter()
            .find(|c| (c.row == row && c.col == col) || (c.row == col && c.col == row))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cka report: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,mean,sem,n_pairs\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                c.row, c.col, c.mean, c.sem, c.n_pairs
            ));
        }
        out
    }
}

fn tasks_of(label: &str) -> Vec<&str> {
    label.split('+').collect()
}

fn labels_disjoint(a: &str, b: &str) -> bool {
    let ta = tasks_of(a);
    tasks_of(b).iter().all(|t| !ta.contains(t))
}

pub fn cka_matrix(entries: &[CkaEntry], layer: usize, disjoint_only: bool) -> Result<CkaReport> {
    if entries.len() < 2 {
        return Err(Error::Misaligned("need at least two models for CKA".into()));
    }
    let mut buckets: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let (a, b) = (&entries[i], &entries[j]);
            if a.label == b.label && a.seed == b.seed {
                continue; // same-seed self-comparison
            }
            if disjoint_only && !labels_disjoint(&a.label, &b.label) {
                continue;
            }
            let key = if a.label <= b.label {
                (a.label.clone(), b.label.clone())
            } else {
                (b.label.clone(), a.label.clone())
            };
            buckets.entry(key).or_default().push(cka(&a.matrix, &b.matrix)?);
        }
    }
    let cells = buckets
        .into_iter()
        .map(|((row, col), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let sem = if n > 1 {
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            CkaCell { row, col, mean, sem, n_pairs: n }
        })
        .collect();
    Ok(CkaReport { layer, cells })
}
