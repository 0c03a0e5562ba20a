use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type DamRng = ChaCha8Rng;

/// Root of every random stream in a run. Sub-streams are derived by label so
/// that adding a component never perturbs the draws of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> DamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn derive(self, label: &str) -> RngSeed {
        // FNV-1a over the label, folded into the seed with a splitmix64 finalizer.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        RngSeed(splitmix64(self.0 ^ h))
    }

    pub fn derive_index(self, label: &str, index: u64) -> RngSeed {
        RngSeed(splitmix64(self.derive(label).0.wrapping_add(index)))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
