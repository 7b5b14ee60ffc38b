//! Sub-seed derivation. One top-level seed fans out to per-purpose seeds by
//! XOR with fixed constants, so each component's randomness can be
//! reproduced independently of the others.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Network weight initialization.
    Init,
    /// Per-epoch minibatch order.
    Shuffle,
    /// Dropout masks.
    Dropout,
    /// Hyperparameter sampling.
    Sweep,
    /// Train/validation partition and dataset subsetting.
    Split,
}

impl Purpose {
    pub const fn salt(self) -> u64 {
        match self {
            Purpose::Init => 0x9E37_79B9_7F4A_7C15,
            Purpose::Shuffle => 0xBF58_476D_1CE4_E5B9,
            Purpose::Dropout => 0x94D0_49BB_1331_11EB,
            Purpose::Sweep => 0xD6E8_FEB8_6659_FD93,
            Purpose::Split => 0xA076_1D64_78BD_642F,
        }
    }
}

pub fn derive(seed: u64, purpose: Purpose) -> u64 {
    seed ^ purpose.salt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purposes_differ() {
        let all = [
            Purpose::Init,
            Purpose::Shuffle,
            Purpose::Dropout,
            Purpose::Sweep,
            Purpose::Split,
        ];
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                assert_ne!(derive(1, *a), derive(1, *b));
            }
            assert_eq!(derive(derive(5, *a), *a), 5);
        }
    }
}
