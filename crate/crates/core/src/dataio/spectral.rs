//! Exact evolution of periodic fields through their discrete Fourier modes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// One real Fourier mode `a·cos(θ) + b·sin(θ)`, `θ = 2π(kx·i/nx + ky·j/ny)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FourierMode {
    pub kx: i32,
    pub ky: i32,
    pub a: f64,
    pub b: f64,
}

/// A band-limited periodic field given by its mean and a few modes.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialField {
    pub nx: usize,
    pub ny: usize,
    pub mean: f64,
    pub modes: Vec<FourierMode>,
}

impl InitialField {
    pub fn constant(nx: usize, ny: usize, value: f64) -> Self {
        Self {
            nx,
            ny,
            mean: value,
            modes: Vec::new(),
        }
    }

    /// Random smooth field with every mode `|kx|, |ky| ≤ kmax` on one
    /// half-plane, amplitudes ~ N(0,1)/(1 + |k|²).
    pub fn random<R: Rng + ?Sized>(nx: usize, ny: usize, kmax: usize, rng: &mut R) -> Self {
        let k = kmax as i32;
        let mut modes = Vec::new();
        for kx in -k..=k {
            for ky in 0..=k {
                if ky == 0 && kx <= 0 {
                    continue;
                }
                let scale = 1.0 / (1.0 + (kx * kx + ky * ky) as f64);
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                modes.push(FourierMode {
                    kx,
                    ky,
                    a: a * scale,
                    b: b * scale,
                });
            }
        }
        let mean: f64 = StandardNormal.sample(rng);
        Self { nx, ny, mean, modes }
    }

    /// Grid values `[nx][ny]`.
    pub fn sample(&self) -> Vec<f64> {
        let mut out = vec![self.mean; self.nx * self.ny];
        for m in &self.modes {
            for i in 0..self.nx {
                for j in 0..self.ny {
                    let theta = std::f64::consts::TAU
                        * (m.kx as f64 * i as f64 / self.nx as f64 + m.ky as f64 * j as f64 / self.ny as f64);
                    out[i * self.ny + j] += m.a * theta.cos() + m.b * theta.sin();
                }
            }
        }
        out
    }
}

fn signed(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn fft2(data: &mut [Complex64], nx: usize, ny: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(ny), planner.plan_fft_inverse(nx))
    } else {
        (planner.plan_fft_forward(ny), planner.plan_fft_forward(nx))
    };
    row.process(data);
    let mut column = vec![Complex64::default(); nx];
    for j in 0..ny {
        for i in 0..nx {
            column[i] = data[i * ny + j];
        }
        col.process(&mut column);
        for i in 0..nx {
            data[i * ny + j] = column[i];
        }
    }
}

/// Multiplies every Fourier coefficient by `factor(kx, ky)` (signed integer
/// wavenumbers) and returns the real part of the result.
pub fn apply_fourier_multiplier(
    values: &[f64],
    nx: usize,
    ny: usize,
    factor: impl Fn(f64, f64) -> Complex64,
) -> Vec<f64> {
    let mut spec: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft2(&mut spec, nx, ny, false);
    for i in 0..nx {
        for j in 0..ny {
            spec[i * ny + j] *= factor(signed(i, nx), signed(j, ny));
        }
    }
    fft2(&mut spec, nx, ny, true);
    let norm = (nx * ny) as f64;
    spec.iter().map(|c| c.re / norm).collect()
}

/// Heat flow on the periodic square `[0, 2π)²` for time `tau`.
pub fn heat_evolve(values: &[f64], nx: usize, ny: usize, nu: f64, tau: f64) -> Vec<f64> {
    apply_fourier_multiplier(values, nx, ny, |kx, ky| {
        Complex64::new((-nu * (kx * kx + ky * ky) * tau).exp(), 0.0)
    })
}

/// Periodic translation by `(sx, sy)` cells: `out[i][j] = in[i − sx][j − sy]`.
/// Whole-cell shifts are exact rolls; fractional shifts use the Fourier
/// shift theorem.
pub fn shift(values: &[f64], nx: usize, ny: usize, sx: f64, sy: f64) -> Vec<f64> {
    let whole = |s: f64| (s - s.round()).abs() < 1e-9;
    if whole(sx) && whole(sy) {
        let rx = (sx.round() as i64).rem_euclid(nx as i64) as usize;
        let ry = (sy.round() as i64).rem_euclid(ny as i64) as usize;
        let mut out = vec![0.0; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                out[((i + rx) % nx) * ny + (j + ry) % ny] = values[i * ny + j];
            }
        }
        return out;
    }
    apply_fourier_multiplier(values, nx, ny, |kx, ky| {
        let phase = -std::f64::consts::TAU * (kx * sx / nx as f64 + ky * sy / ny as f64);
        Complex64::from_polar(1.0, phase)
    })
}
