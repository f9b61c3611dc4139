//! Shared fixtures for integration tests.

use std::path::Path;

use rand::Rng;
use worldrep::rng;

/// Writes a GeoNames-format TSV of `n` synthetic cities, all above the
/// population threshold, deterministically from `seed`.
pub fn write_geonames_fixture(path: &Path, n: usize, seed: u64) {
    let mut r = rng::stream(seed, "fixture_world", 0);
    let mut out = String::new();
    for i in 0..n {
        let lat: f64 = r.random_range(-65.0..72.0);
        let lon: f64 = r.random_range(-179.0..179.0);
        let pop: i64 = r.random_range(100_001..8_000_000);
        let name = format!("Fixture City {i:04}");
        let mut cols = vec![String::new(); 19];
        cols[0] = (1_000_000 + i).to_string();
        cols[1] = name.clone();
        cols[2] = name;
        cols[4] = format!("{lat:.5}");
        cols[5] = format!("{lon:.5}");
        cols[6] = "P".into();
        cols[7] = "PPL".into();
        cols[8] = "XX".into();
        cols[14] = pop.to_string();
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

/// Builds an id-assigned world of `n` cities directly.
#[allow(dead_code)]
pub fn fixture_world(n: usize, seed: u64) -> worldrep::world::World {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cities.tsv");
    write_geonames_fixture(&p, n, seed);
    let (w, _) = worldrep::world::ingest_geonames(&p, 0).unwrap();
    worldrep::world::assign_ids(&w, seed).unwrap()
}
