//! Shared fixtures for the benchmark targets: deterministic loss streams,
//! cross-sections, and panels sized like the workloads the CLI runs.

use aggfolio_core::data::Month;
use aggfolio_core::portfolio::{AssetRow, CrossSection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k` bounded loss streams of length `t`, plus matching targets.
pub fn loss_streams(k: usize, t: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streams = (0..k)
        .map(|_| (0..t).map(|_| rng.gen_range(-0.5..=0.5)).collect())
        .collect();
    let targets = (0..t).map(|_| rng.gen_range(-0.5..=0.5)).collect();
    (streams, targets)
}

/// One month of `n` assets with a single forecast column.
pub fn cross_section(n: usize, seed: u64) -> CrossSection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<AssetRow> = (0..n)
        .map(|i| AssetRow {
            id: format!("a{i:05}"),
            realized: rng.gen_range(-0.2..=0.2),
            cap: rng.gen_range(1.0..=1e4),
            forecasts: vec![rng.gen_range(-0.2..=0.2)],
        })
        .collect();
    CrossSection::new(Month::from_parts(2020, 6).unwrap(), rows).expect("non-empty section")
}
