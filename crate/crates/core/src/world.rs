//! The ground-truth world: cities with integer scaled coordinates.
//!
//! Cities come from a GeoNames-style tab-separated file, get projected with
//! `x = round(10*lon)`, `y = round(10*lat)` (half away from zero), and receive
//! random ids from `[0, 9999]`. A world update adds synthetic `atlantis`
//! cities sampled from a Gaussian in degree space; task answers on existing
//! cities are pure functions of coordinates and therefore unchanged.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;


use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tasks::Point;

/// Ids are drawn from `[0, ID_SPACE)`.
pub const ID_SPACE: usize = 10_000;

const WORLD_FORMAT: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct City {
    /// Assigned by [`assign_ids`]; `None` straight after ingestion.
    pub id: Option<u16>,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    /// `round(10 * lon)`, half away from zero.
    pub x: i64,
    /// `round(10 * lat)`, half away from zero.
    pub y: i64,
    pub is_atlantis: bool,
}

impl City {
    pub fn point(&self) -> Point {
        Point {
            x: self.x,
            y: self.y,
        }
    }

    pub fn id(&self) -> Result<u16> {
        self.id.ok_or(Error::UnassignedIds)
    }
}

/// Equirectangular projection onto the integer grid.
pub fn project(lon: f64, lat: f64) -> (i64, i64) {
    ((10.0 * lon).round() as i64, (10.0 * lat).round() as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub cities: Vec<City>,
    /// Seed used for id assignment; persisted in the world file.
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldUpdate {
    pub new_cities: Vec<City>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub total_rows: usize,
    pub kept: usize,
    pub skipped_malformed: usize,
    pub filtered_out: usize,
}

impl World {
    pub fn len(&self) -> usize {
        self.cities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cities.is_empty()
    }

    pub fn non_atlantis_count(&self) -> usize {
        self.cities.iter().filter(|c| !c.is_atlantis).count()
    }

    pub fn atlantis_count(&self) -> usize {
        self.cities.iter().filter(|c| c.is_atlantis).count()
    }

    pub fn ids_assigned(&self) -> bool {
        self.cities.iter().all(|c| c.id.is_some())
    }

    pub fn used_ids(&self) -> HashSet<u16> {
        self.cities.iter().filter_map(|c| c.id).collect()
    }

    pub fn city_by_id(&self, id: u16) -> Option<&City> {
        self.cities.iter().find(|c| c.id == Some(id))
    }
}

/// Reads a GeoNames `allCountries`/`cities1000`-style TSV and keeps rows with
/// population strictly greater than `min_population`. Malformed rows are
/// skipped and counted. Ids are not assigned yet.
pub fn ingest_geonames(path: &Path, min_population: i64) -> Result<(World, IngestStats)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut stats = IngestStats::default();
    let mut cities = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        stats.total_rows += 1;
        match parse_geonames_row(&line) {
            Some((name, lat, lon, population)) => {
                if population > min_population {
                    let (x, y) = project(lon, lat);
                    cities.push(City {
                        id: None,
                        name,
                        lat,
                        lon,
                        x,
                        y,
                        is_atlantis: false,
                    });
                    stats.kept += 1;
                } else {
                    stats.filtered_out += 1;
                }
            }
            None => stats.skipped_malformed += 1,
        }
    }
    if stats.skipped_malformed > 0 {
        log::warn!(
            "{}: skipped {} malformed rows",
            path.display(),
            stats.skipped_malformed
        );
    }
    if cities.is_empty() {
        return Err(Error::EmptyWorld);
    }
    Ok((World { cities, rng_seed: 0 }, stats))
}

/// GeoNames columns: 0 geonameid, 1 name, 2 asciiname, 3 altnames,
/// 4 latitude, 5 longitude, ..., 14 population. Empty population counts as 0.
fn parse_geonames_row(line: &str) -> Option<(String, f64, f64, i64)> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 15 {
        return None;
    }
    let name = cols[1].trim();
    if name.is_empty() {
        return None;
    }
    let lat: f64 = cols[4].trim().parse().ok()?;
    let lon: f64 = cols[5].trim().parse().ok()?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return None;
    }
    let pop_field = cols[14].trim();
    let population: i64 = if pop_field.is_empty() {
        0
    } else {
        pop_field.parse().ok()?
    };
    Some((name.to_string(), lat, lon, population))
}

/// Assigns each city a distinct random id from `[0, 9999]`.
///
/// The assignment is a pure function of the city multiset and the seed:
/// cities are ranked by a canonical key before ids are handed out, so input
/// order does not matter. Ids carry no geographic information.
pub fn assign_ids(world: &World, seed: u64) -> Result<World> {
    let n = world.cities.len();
    if n > ID_SPACE {
        return Err(Error::IdSpaceExhausted {
            cities: n,
            space: ID_SPACE,
        });
    }
    let mut ids: Vec<u16> = (0..ID_SPACE as u16).collect();
    rng::keyed_shuffle(&mut ids, seed, "assign_ids");

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| canonical_key(&world.cities[a]).cmp(&canonical_key(&world.cities[b])));

    let mut out = world.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.cities[idx].id = Some(ids[rank]);
    }
    out.rng_seed = seed;
    Ok(out)
}

fn canonical_key(c: &City) -> (String, u64, u64, i64, i64) {
    // total_cmp-compatible float keys: flip the bit pattern for negatives.
    fn fkey(v: f64) -> u64 {
        let b = v.to_bits();
        if b >> 63 == 1 {
            !b
        } else {
            b ^ (1 << 63)
        }
    }
    (c.name.clone(), fkey(c.lat), fkey(c.lon), c.x, c.y)
}

/// Samples `count` synthetic atlantis cities, Gaussian in degree space around
/// `(center_lon, center_lat)` with per-axis `std_deg`, projected like real
/// cities. Ids are drawn from the world's unused id space so the update is
/// disjoint by construction.
pub fn generate_atlantis(
    world: &World,
    count: usize,
    center_lon: f64,
    center_lat: f64,
    std_deg: f64,
    seed: u64,
) -> Result<WorldUpdate> {
    if count == 0 {
        return Err(Error::DatasetSpec("atlantis count must be > 0".into()));
    }
    if !world.ids_assigned() {
        return Err(Error::UnassignedIds);
    }
    let used = world.used_ids();
    let mut free: Vec<u16> = (0..ID_SPACE as u16).filter(|i| !used.contains(i)).collect();
    if free.len() < count {
        return Err(Error::IdSpaceExhausted {
            cities: world.len() + count,
            space: ID_SPACE,
        });
    }
    rng::keyed_shuffle(&mut free, seed, "atlantis_ids");

    let lon_dist = Normal::new(center_lon, std_deg)
        .map_err(|_| Error::DatasetSpec("atlantis std must be >= 0".into()))?;
    let lat_dist = Normal::new(center_lat, std_deg)
        .map_err(|_| Error::DatasetSpec("atlantis std must be >= 0".into()))?;

    let mut new_cities = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, "atlantis_city", i as u64);
        let lon = lon_dist.sample(&mut r);
        let lat = lat_dist.sample(&mut r);
        let (x, y) = project(lon, lat);
        new_cities.push(City {
            id: Some(free[i]),
            name: format!("atlantis_{i:03}"),
            lat,
            lon,
            x,
            y,
            is_atlantis: true,
        });
    }
    Ok(WorldUpdate { new_cities })
}

/// Union of a world and an update. Ids must stay disjoint; everything about
/// the existing cities is untouched.
pub fn apply_update(world: &World, update: &WorldUpdate) -> Result<World> {
    let mut used = world.used_ids();
    for c in &update.new_cities {
        let id = c.id()?;
        if !used.insert(id) {
            return Err(Error::IdCollision { id });
        }
    }
    let mut out = world.clone();
    out.cities.extend(update.new_cities.iter().cloned());
    Ok(out)
}

pub fn save_world(world: &World, path: &Path) -> Result<()> {
    save_world_tagged(world, path, &[])
}

/// Writes the world file. Format, one record per line, UTF-8, LF:
///
/// ```text
/// world\tv1\tseed=<u64>\tcities=<n>[\tkey=value ...]
/// <id>\t<name>\t<lat>\t<lon>\t<x>\t<y>\t<0|1>
/// ```
///
/// Extra `key=value` header fields (e.g. the pipeline's config hash) are
/// preserved on load but otherwise ignored. Output is byte-identical for
/// identical worlds.
pub fn save_world_tagged(world: &World, path: &Path, extra: &[(&str, String)]) -> Result<()> {
    if !world.ids_assigned() {
        return Err(Error::UnassignedIds);
    }
    let mut buf = String::new();
    write!(
        buf,
        "world\t{WORLD_FORMAT}\tseed={}\tcities={}",
        world.rng_seed,
        world.cities.len()
    )
    .unwrap();
    for (k, v) in extra {
        write!(buf, "\t{k}={v}").unwrap();
    }
    buf.push('\n');
    for c in &world.cities {
        debug_assert!(!c.name.contains('\t') && !c.name.contains('\n'));
        writeln!(
            buf,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.id.unwrap(),
            c.name,
            c.lat,
            c.lon,
            c.x,
            c.y,
            u8::from(c.is_atlantis)
        )
        .unwrap();
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    let mut text = String::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::MalformedWorldFile {
        path: path.into(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let mut fields = header.split('\t');
    let bad = |line: usize, reason: &str| Error::MalformedWorldFile {
        path: path.into(),
        line,
        reason: reason.into(),
    };
    if fields.next() != Some("world") {
        return Err(bad(1, "not a world file"));
    }
    let version = fields.next().unwrap_or("");
    if version != WORLD_FORMAT {
        return Err(Error::WorldVersion {
            expected: WORLD_FORMAT.into(),
            found: version.into(),
        });
    }
    let mut seed: Option<u64> = None;
    let mut count: Option<usize> = None;
    for kv in fields {
        match kv.split_once('=') {
            Some(("seed", v)) => seed = v.parse().ok(),
            Some(("cities", v)) => count = v.parse().ok(),
            Some(_) => {} // forward-compatible extra tags
            None => return Err(bad(1, "malformed header field")),
        }
    }
    let seed = seed.ok_or_else(|| bad(1, "missing seed"))?;
    let count = count.ok_or_else(|| bad(1, "missing city count"))?;

    let mut cities = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(bad(i + 1, "expected 7 tab-separated fields"));
        }
        let id: u16 = cols[0].parse().map_err(|_| bad(i + 1, "bad id"))?;
        if id as usize >= ID_SPACE {
            return Err(bad(i + 1, "id out of range"));
        }
        if !seen.insert(id) {
            return Err(bad(i + 1, "duplicate id"));
        }
        let lat: f64 = cols[2].parse().map_err(|_| bad(i + 1, "bad lat"))?;
        let lon: f64 = cols[3].parse().map_err(|_| bad(i + 1, "bad lon"))?;
        let x: i64 = cols[4].parse().map_err(|_| bad(i + 1, "bad x"))?;
        let y: i64 = cols[5].parse().map_err(|_| bad(i + 1, "bad y"))?;
        let is_atlantis = match cols[6] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(i + 1, "bad atlantis flag")),
        };
        cities.push(City {
            id: Some(id),
            name: cols[1].to_string(),
            lat,
            lon,
            x,
            y,
            is_atlantis,
        });
    }
    if cities.len() != count {
        return Err(bad(
            0,
            &format!("truncated: header says {count} cities, found {}", cities.len()),
        ));
    }
    Ok(World { cities, rng_seed: seed })
}
