//! Counter-based random streams.
//!
//! Every Gaussian used by the simulator is a pure function of
//! `(seed, path, step, component)`: the ChaCha keystream is keyed by the seed,
//! the path selects the stream and the step fixes the word position. Paths can
//! therefore be generated in any order, on any number of workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain separation for auxiliary streams (mollifier replicates, probes).
const AUX_DOMAIN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    words_per_step: u128,
}

impl NoiseStream {
    /// Stream for one path, producing `width` normals per step.
    pub fn new(seed: u64, path: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        // Box-Muller consumes two u64 (four 32-bit words) per pair of normals.
        let pairs = width.div_ceil(2) as u128;
        Self {
            rng,
            words_per_step: 4 * pairs,
        }
    }

    /// Standard normals for `step`, written into `out`.
    pub fn fill_step(&mut self, step: usize, out: &mut [f64]) {
        self.rng.set_word_pos(step as u128 * self.words_per_step);
        for pair in out.chunks_mut(2) {
            let (a, b) = box_muller(&mut self.rng);
            pair[0] = a;
            if let Some(second) = pair.get_mut(1) {
                *second = b;
            }
        }
    }
}

fn box_muller(rng: &mut impl Rng) -> (f64, f64) {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let radius = (-2.0 * u1.ln()).sqrt();
    let angle = std::f64::consts::TAU * u2;
    (radius * angle.cos(), radius * angle.sin())
}

/// One standard normal from a sequential generator.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    box_muller(rng).0
}

/// Independent sequential stream keyed by `(seed, index)`, separated from the
/// Wiener streams.
pub fn aux_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUX_DOMAIN);
    rng.set_stream(index);
    rng
}
