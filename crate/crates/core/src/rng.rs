use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seedable generator that can be split into independent child streams.
///
/// Every stochastic operation takes one of these explicitly, so a run is
/// reproducible from its root seed alone.
#[derive(Debug, Clone)]
pub struct SplitRng {
    inner: ChaCha8Rng,
}

impl SplitRng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives a child stream. The parent advances, so successive splits with
    /// the same label still differ.
    pub fn split(&mut self, label: u64) -> SplitRng {
        let s = self.inner.next_u64() ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        SplitRng::seed(s)
    }
}

impl RngCore for SplitRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
