//! Counter-based pseudo-random generator.
//!
//! The `n`-th raw output (`n` starting at 1) for a seed `s` is the SplitMix64
//! finalizer applied to `s + n * 0x9E3779B97F4A7C15` (wrapping):
//!
//! ```text
//! z = s + n * 0x9E3779B97F4A7C15
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! Derived samples:
//! - `uniform()`: `(out >> 11) * 2^-53`, in `[0, 1)`.
//! - `below(n)`: `(out * n) >> 64` using a 128-bit product.
//! - `normal()`: Box-Muller on two consecutive uniforms `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`. No spare value is cached.
//! - `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//!
//! The full state is `(seed, counter)`, which makes checkpointing trivial.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Restores a generator from a saved `(seed, counter)` pair.
    pub fn from_state(seed: u64, counter: u64) -> Self {
        Rng { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of raw outputs drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// An independent stream keyed on this generator's seed and `stream`.
    /// Does not advance `self`.
    pub fn substream(&self, stream: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(stream.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n` in random order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot sample {count} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates from the front
        for i in 0..count {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_vector() {
        // First outputs of SplitMix64 seeded with 0 (published reference values).
        let mut rng = Rng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn restore_from_state() {
        let mut a = Rng::new(7);
        for _ in 0..13 {
            a.normal();
        }
        let mut b = Rng::from_state(a.seed(), a.counter());
        assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut rng = Rng::new(3);
        let n = 200_000;
        let u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        assert!(u.iter().all(|&x| (0.0..1.0).contains(&x)));
        let mean = u.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005);
        let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let m = z.iter().sum::<f64>() / n as f64;
        let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.01 && (v - 1.0).abs() < 0.02, "{m} {v}");
    }

    #[test]
    fn shuffle_and_sample_are_permutations() {
        let mut rng = Rng::new(5);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let s = rng.sample_indices(10, 4);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|&i| i < 10));
        let mut d = s.clone();
        d.dedup();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 4);
    }

    #[test]
    fn substreams_do_not_advance_parent() {
        let rng = Rng::new(9);
        let mut s1 = rng.substream(1);
        let mut s2 = rng.substream(2);
        assert_eq!(rng.counter(), 0);
        assert_ne!(s1.next_u64(), s2.next_u64());
    }
}
