//! Shared fixtures for integration tests.
#![allow(dead_code)]

use ndarray::Array3;
use oceancast::grid::{ChannelLayout, GridSpec, LandSeaMask};
use oceancast::net::{ContextSignals, ForecastNet, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct ToyNet {
    pub net: ForecastNet,
    pub grid: GridSpec,
    pub layout: ChannelLayout,
    pub mask: LandSeaMask,
    pub signals: ContextSignals,
}

/// Toy network on a 16x32 grid with 9 channels and a mask with some land.
pub fn toy_net() -> ToyNet {
    let grid = GridSpec::uniform(16, 32, vec![0.0, 50.0]).unwrap();
    let layout = ChannelLayout::ocean(2);
    let mask = oceancast::data::synthetic_mask(16, 32);
    let net = ForecastNet::new(NetConfig::toy(), layout.total_channels(), 16, 32).unwrap();
    let signals = ContextSignals::new(1, 40, &grid, &mask).unwrap();
    ToyNet {
        net,
        grid,
        layout,
        mask,
        signals,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_field(rng: &mut impl Rng, shape: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn masked_field(rng: &mut impl Rng, shape: (usize, usize, usize), mask: &LandSeaMask) -> Array3<f64> {
    let mut a = normal_field(rng, shape, 1.0);
    oceancast::grid::mask_in_place(&mut a, mask).unwrap();
    a
}

/// Parameters with every entry, including zero-initialized ones, drawn at
/// a scale that keeps all branches active.
pub fn generic_params(net: &ForecastNet, rng: &mut impl Rng) -> Vec<f64> {
    let mut p = net.init_params(rng);
    for e in net.registry().entries() {
        let scale = if e.name.ends_with("gamma") { 0.0 } else { 0.2 };
        for v in &mut p[e.range()] {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let den = a.abs().max(b.abs());
    if den < 1e-10 {
        0.0
    } else {
        (a - b).abs() / den
    }
}
