//! Per-pixel random streams that do not depend on the thread schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for pixel `(ix, iy)` of stream `stream` under a campaign seed.
pub fn pixel_seed(seed: u64, stream: u64, ix: usize, iy: usize) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream);
    h = splitmix(h ^ ix as u64);
    splitmix(h ^ ((iy as u64) << 32 | 0x5eed))
}

pub fn pixel_rng(seed: u64, stream: u64, ix: usize, iy: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(pixel_seed(seed, stream, ix, iy))
}

/// Stable stream identifier for a text label.
pub fn label_stream(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
    })
}
