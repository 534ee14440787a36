//! Non-learned constant tensors used by sequence models.

use ndarray::Array2;

/// Sinusoidal position table: row t holds interleaved sin/cos at geometric
/// wavelengths from 2*pi up to 10000*2*pi.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "position dim must be even, got {dim}");
    let mut p = Array2::zeros((len, dim));
    for t in 0..len {
        for i in 0..dim / 2 {
            let rate = (t as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            p[[t, 2 * i]] = rate.sin();
            p[[t, 2 * i + 1]] = rate.cos();
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_rows_are_unit_pairs() {
        let p = sinusoidal_positions(16, 8);
        assert_eq!(p.dim(), (16, 8));
        // Each (sin, cos) pair lies on the unit circle.
        for t in 0..16 {
            for i in 0..4 {
                let s = p[[t, 2 * i]];
                let c = p[[t, 2 * i + 1]];
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
        // Row 0 is (0, 1) repeated.
        for i in 0..4 {
            assert_eq!(p[[0, 2 * i]], 0.0);
            assert_eq!(p[[0, 2 * i + 1]], 1.0);
        }
    }
}
