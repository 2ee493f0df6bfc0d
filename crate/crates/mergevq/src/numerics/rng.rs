use crate::numerics::{Matrix, Scalar};

/// Deterministic 64-bit random stream.
///
/// The generator is SplitMix64: the state is a counter advanced by the
/// constant `0x9E3779B97F4A7C15` per draw, and each output is the finalizer
/// hash of the counter. The algorithm is pinned here so that every derived
/// value in the test suites is reproducible bit-for-bit on all platforms:
///
/// ```text
/// state += 0x9E3779B97F4A7C15
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// out = z ^ (z >> 31)
/// ```
///
/// Normal draws use the Box-Muller transform on pairs of uniforms; see
/// [`RandomStream::normal_pair`] for the exact mapping.
#[derive(Debug, Clone)]
pub struct RandomStream {
    state: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform in `[0, bound)`; rejection sampling on the top range.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below: bound must be positive");
        let limit = u64::MAX - u64::MAX % bound;
        loop {
            let x = self.next_u64();
            if x < limit {
                return x % bound;
            }
        }
    }

    /// One Box-Muller pair. Consumes exactly two `u64` draws: the first
    /// yields `u1` in `(0, 1]` (shifted so the log is finite), the second
    /// `u2` in `[0, 1)`; the pair maps to
    /// `r = sqrt(-2 ln u1)`, `(r cos(2 pi u2), r sin(2 pi u2))`.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// `n` standard-normal draws. Pairs are generated in order and the
    /// trailing half of an odd pair is discarded.
    pub fn normal_vec<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (a, b) = self.normal_pair();
            out.push(T::from_f64(a).unwrap());
            if out.len() < n {
                out.push(T::from_f64(b).unwrap());
            }
        }
        out
    }

    /// Matrix of normal draws scaled by `scale`.
    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
        let data = self
            .normal_vec::<T>(rows * cols)
            .into_iter()
            .map(|v| v * T::from_f64(scale).unwrap())
            .collect();
        Matrix::from_vec(rows, cols, data).expect("normal draws are finite")
    }

    /// Uniform permutation of `0..n` by Fisher-Yates.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }
}

/// `n` standard-normal draws from `stream`; free-function form of
/// [`RandomStream::normal_vec`].
pub fn rng_normal<T: Scalar>(stream: &mut RandomStream, n: usize) -> Vec<T> {
    stream.normal_vec(n)
}
