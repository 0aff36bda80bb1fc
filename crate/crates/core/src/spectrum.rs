//! Mercer spectrum on `[0, 1]` with the sine eigenbasis.
//!
//! Mode `0` is the constant function with `λ_0 = 1`. It never carries signal:
//! latent draws set its coefficient to zero and the generalized norms sum over
//! modes `j >= 1` only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MercerSpectrum {
    alpha: f64,
    c: f64,
    modes: usize,
    grid: Vec<f64>,
}

impl MercerSpectrum {
    /// Spectrum with `modes` retained modes on the `grid_size`-point midpoint
    /// grid `x_t = (t - 1/2) / T`.
    pub fn new(alpha: f64, c: f64, modes: usize, grid_size: usize) -> Result<Self> {
        let grid = (1..=grid_size)
            .map(|t| (t as f64 - 0.5) / grid_size as f64)
            .collect();
        Self::with_grid(alpha, c, modes, grid)
    }

    pub fn with_grid(alpha: f64, c: f64, modes: usize, grid: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "c must be positive, got {c}"
            )));
        }
        if modes == 0 {
            return Err(Error::InvalidArgument(
                "at least one mode is required".into(),
            ));
        }
        if grid.len() < modes {
            return Err(Error::InvalidArgument(format!(
                "grid has {} points but {modes} modes were requested",
                grid.len()
            )));
        }
        if grid.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("grid must lie in [0, 1]".into()));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "grid must be strictly increasing".into(),
            ));
        }
        Ok(MercerSpectrum {
            alpha,
            c,
            modes,
            grid,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn check_mode(&self, j: usize) -> Result<()> {
        if j >= self.modes {
            Err(Error::ModeOutOfRange {
                index: j,
                modes: self.modes,
            })
        } else {
            Ok(())
        }
    }

    /// `λ_j = exp(-c j^α)` for `j >= 1`, `λ_0 = 1`.
    pub fn eigenvalue(&self, j: usize) -> Result<f64> {
        self.check_mode(j)?;
        Ok(self.eigenvalue_unchecked(j))
    }

    fn eigenvalue_unchecked(&self, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            (-self.c * (j as f64).powf(self.alpha)).exp()
        }
    }

    /// All retained eigenvalues `λ_0, ..., λ_{M-1}`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        (0..self.modes)
            .map(|j| self.eigenvalue_unchecked(j))
            .collect()
    }

    /// `e_0 = 1`, `e_j(x) = √2 sin(π j x)`.
    pub fn basis_eval(&self, j: usize, x: f64) -> Result<f64> {
        self.check_mode(j)?;
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::OutsideDomain(x));
        }
        Ok(sine_basis(j, x))
    }

    /// Clamped, normalised density on the grid:
    /// `p(t) ∝ max(Σ_j λ_j z_j e_j(x_t), clamp_eps)`.
    pub fn synth_density(&self, z: &[f64], clamp_eps: f64) -> Result<Vec<f64>> {
        if z.len() != self.modes {
            return Err(Error::dims(self.modes, z.len()));
        }
        if z[0] != 0.0 {
            return Err(Error::InvalidArgument(
                "the constant mode must have zero latent coefficient".into(),
            ));
        }
        if !(clamp_eps > 0.0) {
            return Err(Error::InvalidArgument("clamp_eps must be positive".into()));
        }
        let lambdas = self.eigenvalues();
        let clamped: Vec<f64> = self
            .grid
            .iter()
            .map(|&x| {
                let raw: f64 = (1..self.modes)
                    .map(|j| lambdas[j] * z[j] * sine_basis(j, x))
                    .sum();
                raw.max(clamp_eps)
            })
            .collect();
        let total: f64 = clamped.iter().sum();
        Ok(clamped.into_iter().map(|p| p / total).collect())
    }

    /// `Σ_{j>=1} λ_j^{-a} b_j²`.
    pub fn gen_norm_sq(&self, b: &DensityCoeffs, a: f64) -> f64 {
        b.0.iter()
            .enumerate()
            .skip(1)
            .take(self.modes - 1)
            .map(|(j, bj)| self.eigenvalue_unchecked(j).powf(-a) * bj * bj)
            .sum()
    }

    /// `λ_{D+1}^{(γ_b - γ_f)/2}`: bound on the `γ_f`-norm of everything beyond
    /// mode `D` for any element of the unit `γ_b`-ball.
    pub fn truncation_bound(&self, d: usize, gamma_f: f64, gamma_b: f64) -> Result<f64> {
        if !(gamma_f < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma_f must be negative, got {gamma_f}"
            )));
        }
        if !(gamma_b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma_b must be positive, got {gamma_b}"
            )));
        }
        if d == 0 {
            return Err(Error::InvalidArgument(
                "truncation dimension must be positive".into(),
            ));
        }
        let lambda = self.eigenvalue(d + 1)?;
        Ok(lambda.powf((gamma_b - gamma_f) / 2.0))
    }
}

fn sine_basis(j: usize, x: f64) -> f64 {
    if j == 0 {
        1.0
    } else {
        std::f64::consts::SQRT_2 * (std::f64::consts::PI * j as f64 * x).sin()
    }
}

/// Mercer coefficients `b_0, ..., b_{M-1}` of `f = Σ b_j e_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DensityCoeffs(pub Vec<f64>);

impl DensityCoeffs {
    pub fn new(spectrum: &MercerSpectrum, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != spectrum.modes() {
            return Err(Error::dims(spectrum.modes(), coeffs.len()));
        }
        Ok(DensityCoeffs(coeffs))
    }

    /// `b_j = λ_j z_j`, the coefficients of the unnormalised latent density.
    pub fn from_latent(spectrum: &MercerSpectrum, z: &[f64]) -> Result<Self> {
        if z.len() != spectrum.modes() {
            return Err(Error::dims(spectrum.modes(), z.len()));
        }
        let lambdas = spectrum.eigenvalues();
        Ok(DensityCoeffs(
            z.iter().zip(lambdas).map(|(z, l)| z * l).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Coefficient rescaling `b_j ↦ λ_j^{(to - from)/2} b_j`.
///
/// Maps the unit ball of `H^ball` with the `H^from` metric isometrically onto
/// the unit ball of `H^{ball - from + to}` with the `H^to` metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Isometry {
    pub ball: f64,
    pub from: f64,
    pub to: f64,
}

impl Isometry {
    pub fn new(ball: f64, from: f64, to: f64) -> Self {
        Isometry { ball, from, to }
    }

    pub fn target_ball(&self) -> f64 {
        self.ball - self.from + self.to
    }

    pub fn inverse(&self) -> Self {
        Isometry {
            ball: self.target_ball(),
            from: self.to,
            to: self.from,
        }
    }

    pub fn apply(&self, spectrum: &MercerSpectrum, b: &DensityCoeffs) -> DensityCoeffs {
        let exponent = (self.to - self.from) / 2.0;
        DensityCoeffs(
            b.0.iter()
                .enumerate()
                .map(|(j, bj)| {
                    if j == 0 || exponent == 0.0 {
                        *bj
                    } else {
                        spectrum.eigenvalue_unchecked(j).powf(exponent) * bj
                    }
                })
                .collect(),
        )
    }
}
