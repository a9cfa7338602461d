//! Counter-based Gaussian noise.
//!
//! Sampling noise is keyed by `(seed, image index, element index)` so
//! the drawn values never depend on batch grouping, thread count, or
//! evaluation order. Internally this is splitmix64 mixing plus a
//! Box-Muller transform.

/// splitmix64 finalizer; full-period bijective mixing of a 64-bit state.
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn mix3(seed: u64, image: u64, element: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ image) ^ element)
}

#[inline]
fn unit_open(bits: u64) -> f64 {
    // 53 mantissa bits mapped to (0, 1]: never zero, so ln is finite.
    ((bits >> 11) + 1) as f64 / (1u64 << 53) as f64
}

/// Standard normal draw for one element of one image.
pub fn normal_at(seed: u64, image: u64, element: u64) -> f64 {
    let h1 = mix3(seed, image, element);
    let h2 = splitmix64(h1);
    let u1 = unit_open(h1);
    let u2 = unit_open(h2);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills a buffer with per-element keyed normals for one image.
pub fn fill_normal(seed: u64, image: u64, out: &mut [f64]) {
    for (i, v) in out.iter_mut().enumerate() {
        *v = normal_at(seed, image, i as u64);
    }
}
