//! Truncated real Fourier analysis/synthesis matrices.
//!
//! Analysis maps a row of grid values to `[Re X_k | Im X_k]` over the
//! retained modes; synthesis maps such a row back to grid values with
//! Hermitian doubling of the non-zero last-axis frequencies.

use std::f64::consts::PI;

use crate::autodiff::ConstMatrix;

#[derive(Debug, Clone)]
pub struct SpectralBases {
    pub analysis: ConstMatrix,
    pub synthesis: ConstMatrix,
    pub modes: usize,
}

/// Retained frequencies `0..modes` on an `n`-point periodic grid.
pub fn bases_1d(n: usize, modes: usize) -> SpectralBases {
    let mut fwd = vec![0.0; n * 2 * modes];
    let mut inv = vec![0.0; 2 * modes * n];
    for j in 0..n {
        for k in 0..modes {
            let th = 2.0 * PI * (k * j) as f64 / n as f64;
            fwd[j * 2 * modes + k] = th.cos();
            fwd[j * 2 * modes + modes + k] = -th.sin();
            let c = if k == 0 { 1.0 } else { 2.0 } / n as f64;
            inv[k * n + j] = c * th.cos();
            inv[(modes + k) * n + j] = -c * th.sin();
        }
    }
    SpectralBases {
        analysis: ConstMatrix::new(n, 2 * modes, fwd),
        synthesis: ConstMatrix::new(2 * modes, n, inv),
        modes,
    }
}

/// First-axis frequencies `0..m` and `-m..-1`, last-axis frequencies `0..m`;
/// grid functions are row-major `q + w * p`.
pub fn bases_2d(h: usize, w: usize, m: usize) -> SpectralBases {
    let kx: Vec<i64> = (0..m as i64).chain(-(m as i64)..0).collect();
    let modes = kx.len() * m;
    let n = h * w;
    let mut fwd = vec![0.0; n * 2 * modes];
    let mut inv = vec![0.0; 2 * modes * n];
    let norm = (h * w) as f64;
    for p in 0..h {
        for q in 0..w {
            let j = q + w * p;
            for (a, &fx) in kx.iter().enumerate() {
                for ky in 0..m {
                    let k = a * m + ky;
                    let th = 2.0 * PI * (fx as f64 * p as f64 / h as f64 + (ky * q) as f64 / w as f64);
                    fwd[j * 2 * modes + k] = th.cos();
                    fwd[j * 2 * modes + modes + k] = -th.sin();
                    let c = if ky == 0 { 1.0 } else { 2.0 } / norm;
                    inv[k * n + j] = c * th.cos();
                    inv[(modes + k) * n + j] = -c * th.sin();
                }
            }
        }
    }
    SpectralBases {
        analysis: ConstMatrix::new(n, 2 * modes, fwd),
        synthesis: ConstMatrix::new(2 * modes, n, inv),
        modes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(row: &[f64], m: &ConstMatrix) -> Vec<f64> {
        (0..m.cols)
            .map(|c| row.iter().enumerate().map(|(r, v)| v * m.data[r * m.cols + c]).sum())
            .collect()
    }

    #[test]
    fn low_modes_round_trip_1d() {
        let n = 32;
        let b = bases_1d(n, 6);
        let x: Vec<f64> = (0..n)
            .map(|j| {
                let t = 2.0 * PI * j as f64 / n as f64;
                0.3 + (2.0 * t).cos() - 0.5 * (5.0 * t).sin()
            })
            .collect();
        let back = apply(&apply(&x, &b.analysis), &b.synthesis);
        for (a, c) in x.iter().zip(&back) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn high_mode_is_invisible_1d() {
        let n = 128;
        let b = bases_1d(n, 12);
        let x: Vec<f64> = (0..n).map(|j| (2.0 * PI * 20.0 * j as f64 / n as f64).cos()).collect();
        assert!(apply(&x, &b.analysis).iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn low_modes_round_trip_2d() {
        let (h, w) = (17, 17);
        let b = bases_2d(h, w, 4);
        let x: Vec<f64> = (0..h * w)
            .map(|j| {
                let (p, q) = ((j / w) as f64, (j % w) as f64);
                let tx = 2.0 * PI * p / h as f64;
                let ty = 2.0 * PI * q / w as f64;
                1.0 + (tx + 2.0 * ty).cos() + (2.0 * tx - ty).sin()
            })
            .collect();
        let back = apply(&apply(&x, &b.analysis), &b.synthesis);
        for (a, c) in x.iter().zip(&back) {
            assert!((a - c).abs() < 1e-12, "{a} vs {c}");
        }
    }
}
