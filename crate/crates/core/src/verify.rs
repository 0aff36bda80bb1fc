//! Property suites for the spectral, attention and gradient machinery.
//!
//! Each suite returns named checks so callers can print a pass/fail table.
//! [`Faults`] injects known defects to show that a suite can fail.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{
    build_recall_params, lipschitz_probe_random, measure_attention, recall_star_density,
    recall_temperature, softmax_weights, ProbeInstanceSpec,
};
use crate::error::Result;
use crate::measures::{orthonormal_tags, DiscreteMeasure, MixtureContext};
use crate::model::{Activation, StudentConfig, StudentModel, WeightedTokens};
use crate::rng;
use crate::spectrum::{DensityCoeffs, Isometry, MercerSpectrum, DEFAULT_CLAMP_EPS};

pub const ORTHONORMALITY_TOL: f64 = 1e-9;
pub const ISOMETRY_REL_TOL: f64 = 1e-10;
pub const INVERSE_TOL: f64 = 1e-12;
pub const SELECTION_EPS2: f64 = 1e-4;
pub const SELECTION_FEATURES: usize = 8;
pub const STAR_DENSITY_TOL: f64 = 1e-10;
pub const LIPSCHITZ_TRIALS: usize = 1000;
pub const LIPSCHITZ_SLACK: f64 = 2.0;
pub const GRADIENT_COORDS: usize = 200;
pub const GRADIENT_SEEDS: u64 = 10;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_REL_TOL: f64 = 1e-4;
pub const TRUNCATION_DRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Orthonormality,
    Isometry,
    Truncation,
    Selection,
    Lipschitz,
    Gradient,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Orthonormality,
        Suite::Isometry,
        Suite::Truncation,
        Suite::Selection,
        Suite::Lipschitz,
        Suite::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Orthonormality => "orthonormality",
            Suite::Isometry => "isometry",
            Suite::Truncation => "truncation",
            Suite::Selection => "selection",
            Suite::Lipschitz => "lipschitz",
            Suite::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}`"))
    }
}

/// Deliberate defects for exercising the failure path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Scale `e_1` by `1 + 1e-3` inside the orthonormality suite.
    pub corrupt_basis: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_suite(suite: Suite, faults: Faults) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match suite {
        Suite::Orthonormality => orthonormality(faults)?,
        Suite::Isometry => isometry()?,
        Suite::Truncation => truncation()?,
        Suite::Selection => selection()?,
        Suite::Lipschitz => lipschitz()?,
        Suite::Gradient => gradient()?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        elapsed: start.elapsed(),
    })
}

pub fn run_all(faults: Faults) -> Result<Vec<SuiteReport>> {
    Suite::ALL
        .into_iter()
        .map(|s| run_suite(s, faults))
        .collect()
}

fn orthonormality(faults: Faults) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (modes, grid) in [(16, 32), (8, 16), (32, 64)] {
        let s = MercerSpectrum::new(1.0, 1.0, modes, grid)?;
        let eval = |j: usize, x: f64| -> Result<f64> {
            let v = s.basis_eval(j, x)?;
            Ok(if faults.corrupt_basis && j == 1 {
                v * (1.0 + 1e-3)
            } else {
                v
            })
        };
        let mut worst = (0.0f64, 0, 0);
        let mut e0 = 0.0;
        for &x in s.grid() {
            e0 += eval(0, x)?.powi(2);
        }
        checks.push(Check::new(
            format!("unit_constant[T={grid}]"),
            (e0 / grid as f64 - 1.0).abs() <= ORTHONORMALITY_TOL,
            format!("<e0, e0> = {}", e0 / grid as f64),
        ));
        // Sine block only: e_0 has nonzero overlap with odd sines.
        for j in 1..modes {
            for k in 1..modes {
                let mut ip = 0.0;
                for &x in s.grid() {
                    ip += eval(j, x)? * eval(k, x)?;
                }
                ip /= grid as f64;
                let err = (ip - if j == k { 1.0 } else { 0.0 }).abs();
                if err > worst.0 {
                    worst = (err, j, k);
                }
            }
        }
        checks.push(Check::new(
            format!("gram[M={modes},T={grid}]"),
            worst.0 <= ORTHONORMALITY_TOL,
            format!(
                "max |G - I| = {:.3e} at ({}, {})",
                worst.0, worst.1, worst.2
            ),
        ));
    }
    Ok(checks)
}

fn isometry() -> Result<Vec<Check>> {
    let mut rng = rng::stream(1, &[rng::label("verify_isometry")]);
    let mut checks = Vec::new();
    for alpha in [0.5, 1.0, 2.0] {
        let s = MercerSpectrum::new(alpha, 1.0, 16, 32)?;
        let (mut worst_norm, mut worst_inv) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let b = DensityCoeffs(
                (0..16)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let iso = Isometry::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let out = iso.apply(&s, &b);
            let lhs = s.gen_norm_sq(&out, iso.to);
            let rhs = s.gen_norm_sq(&b, iso.from);
            worst_norm = worst_norm.max((lhs - rhs).abs() / rhs.abs());
            let back = iso.inverse().apply(&s, &out);
            for (x, y) in back.0.iter().zip(&b.0) {
                worst_inv = worst_inv.max((x - y).abs() / y.abs().max(1.0));
            }
        }
        checks.push(Check::new(
            format!("norm_preserved[alpha={alpha}]"),
            worst_norm <= ISOMETRY_REL_TOL,
            format!("max rel err {worst_norm:.3e}"),
        ));
        checks.push(Check::new(
            format!("inverse[alpha={alpha}]"),
            worst_inv <= INVERSE_TOL,
            format!("max err {worst_inv:.3e}"),
        ));
    }
    Ok(checks)
}

/// Random element of the unit `γ_b`-ball: a Gaussian direction in the
/// whitened coordinates `λ_j^{-γ_b/2} b_j`, scaled to a uniform radius.
fn ball_draw(lambdas: &[f64], gamma_b: f64, rng: &mut rng::Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..lambdas.len())
        .map(|j| {
            if j == 0 {
                0.0
            } else {
                rng.sample(StandardNormal)
            }
        })
        .collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius: f64 = rng.random_range(0.0..=1.0);
    g.iter()
        .zip(lambdas)
        .map(|(gj, l)| gj / norm * radius * l.powf(gamma_b / 2.0))
        .collect()
}

fn truncation() -> Result<Vec<Check>> {
    let mut rng = rng::stream(2, &[rng::label("verify_truncation")]);
    let mut checks = Vec::new();
    for alpha in [0.5, 1.0, 2.0] {
        let s = MercerSpectrum::new(alpha, 1.0, 16, 32)?;
        let lambdas = s.eigenvalues();
        for d in [2usize, 4, 8] {
            for (gamma_f, gamma_b) in [(-1.0, 1.0), (-0.5, 0.25)] {
                let bound = s.truncation_bound(d, gamma_f, gamma_b)?;
                let mut worst: f64 = 0.0;
                for draw in 0..TRUNCATION_DRAWS {
                    let mut b = ball_draw(&lambdas, gamma_b, &mut rng);
                    if draw == 0 {
                        // Extremal element: all mass on mode D+1.
                        b.fill(0.0);
                        b[d + 1] = lambdas[d + 1].powf(gamma_b / 2.0);
                    }
                    let mut tail = 0.0;
                    for j in (d + 1)..lambdas.len() {
                        tail += lambdas[j].powf(-gamma_f) * b[j] * b[j];
                    }
                    worst = worst.max(tail.sqrt() / bound);
                }
                checks.push(Check::new(
                    format!("tail<=bound[alpha={alpha},D={d},gf={gamma_f},gb={gamma_b}]"),
                    worst <= 1.0 + 1e-12,
                    format!("max tail/bound {worst:.6}"),
                ));
            }
        }
    }
    Ok(checks)
}

/// Outcome of the recall construction on one random mixture.
#[derive(Clone, Debug)]
pub struct SelectionTrial {
    pub components: usize,
    pub c_squared: f64,
    /// `(|extracted_j - oracle_j|, allowed_j)` for `j = 1..=D`.
    pub coordinate_errors: Vec<(f64, f64)>,
    /// Softmax weight per unit token mass on starred tokens (all equal).
    pub star_density: Vec<f64>,
    pub star_mass: f64,
}

/// Builds `I` random clamped densities, tags them orthonormally, feature-maps
/// tokens to `(v, z, e_1(z), ..., e_D(z))` and runs the recall construction.
pub fn selection_trial(
    components: usize,
    c_squared: f64,
    features: usize,
    eps2: f64,
    seed: u64,
) -> Result<SelectionTrial> {
    let s = MercerSpectrum::new(1.0, 1.0, 16, 32)?;
    let mut rng = rng::stream(seed, &[rng::label("selection")]);
    let mut dens = Vec::new();
    for _ in 0..components {
        let mut z = vec![0.0; 16];
        for zj in &mut z[1..] {
            *zj = rng.sample(StandardNormal);
        }
        dens.push(DiscreteMeasure::on_grid(
            s.grid(),
            &s.synth_density(&z, DEFAULT_CLAMP_EPS)?,
        )?);
    }
    let star = rng.random_range(0..components);
    let (mixture, query) = MixtureContext::build(dens.clone(), orthonormal_tags(components), star)?;
    let d1 = components;
    let feature_map = |y: &[f64]| {
        let mut out = y.to_vec();
        out.extend((1..=features).map(|j| s.basis_eval(j, y[d1]).expect("grid point in [0,1]")));
        out
    };
    let tokens = mixture.flatten().pushforward(feature_map);
    let mut x = query;
    x.resize(d1 + 1 + features, 0.0);

    let params = build_recall_params(d1, 1, features, c_squared.sqrt())?;
    let out = measure_attention(&params, &tokens, &x)?;

    let mut coordinate_errors = Vec::new();
    for j in 1..=features {
        let mut oracle = 0.0;
        let mut scale: f64 = 0.0;
        for (pt, w) in dens[star].iter() {
            let e = std::f64::consts::SQRT_2 * (std::f64::consts::PI * j as f64 * pt[0]).sin();
            oracle += w * e;
            scale = scale.max(e.abs());
        }
        coordinate_errors.push(((out[d1 + j] - oracle).abs(), 5.0 * eps2 * scale));
    }

    let w = softmax_weights(&params.heads[0], &tokens, &x)?;
    let mut star_density = Vec::new();
    let mut star_mass = 0.0;
    for ((pt, mass), wt) in tokens.iter().zip(&w) {
        if pt[star] == 1.0 {
            star_density.push(wt / mass);
            star_mass += wt;
        }
    }
    Ok(SelectionTrial {
        components,
        c_squared,
        coordinate_errors,
        star_density,
        star_mass,
    })
}

fn selection() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for components in [2usize, 4] {
        let c = recall_temperature(components, SELECTION_EPS2)?;
        for seed in 0..5 {
            let t = selection_trial(components, c * c, SELECTION_FEATURES, SELECTION_EPS2, seed)?;
            let worst = t
                .coordinate_errors
                .iter()
                .map(|(e, a)| e / a)
                .fold(0.0, f64::max);
            checks.push(Check::new(
                format!("one_hot_recall[I={components},seed={seed}]"),
                worst <= 1.0,
                format!("max err / allowance = {worst:.3e}"),
            ));
        }
    }
    let c2 = 100f64.ln();
    let t = selection_trial(2, c2, SELECTION_FEATURES, SELECTION_EPS2, 11)?;
    let expected = 200.0 / 101.0;
    let worst = t
        .star_density
        .iter()
        .map(|d| (d - expected).abs())
        .fold(0.0, f64::max);
    checks.push(Check::new(
        "star_density[I=2,c2=ln100]",
        worst <= STAR_DENSITY_TOL
            && (recall_star_density(2, c2) - expected).abs() <= STAR_DENSITY_TOL,
        format!("max |density - 200/101| = {worst:.3e}"),
    ));
    let masses: Vec<f64> = [1.0, 4.0, 9.0, 1e4f64.ln()]
        .iter()
        .map(|&c2| selection_trial(2, c2, 2, SELECTION_EPS2, 12).map(|t| t.star_mass))
        .collect::<Result<_>>()?;
    let monotone = masses.windows(2).all(|w| w[1] > w[0]) && masses.iter().all(|m| *m < 1.0);
    checks.push(Check::new(
        "star_mass_monotone",
        monotone && *masses.last().unwrap() > 0.999,
        format!("{masses:?}"),
    ));
    Ok(checks)
}

fn lipschitz() -> Result<Vec<Check>> {
    let reports = lipschitz_probe_random(ProbeInstanceSpec::default(), LIPSCHITZ_TRIALS, 3)?;
    let evaluated = reports.iter().filter(|r| r.trials > 0).count();
    let raw = reports.iter().filter(|r| r.violated).count();
    let beyond = reports
        .iter()
        .filter(|r| r.violated_with_slack(LIPSCHITZ_SLACK))
        .count();
    let worst = reports
        .iter()
        .filter(|r| r.bound > 0.0)
        .map(|r| r.max_ratio / r.bound)
        .fold(0.0, f64::max);
    Ok(vec![
        Check::new(
            "instances_evaluated",
            evaluated >= LIPSCHITZ_TRIALS * 9 / 10,
            format!("{evaluated}/{LIPSCHITZ_TRIALS}"),
        ),
        Check::new(
            "no_violation_beyond_slack",
            beyond == 0,
            format!("{beyond} beyond {LIPSCHITZ_SLACK}x, {raw} raw, max ratio/bound {worst:.3e}"),
        ),
    ])
}

/// Result of a finite-difference gradient check on one model.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates redrawn because `±h` crossed a ReLU kink.
    pub kinks: usize,
    pub max_rel_err: f64,
    /// Worst relative error per parameter block.
    pub per_block: Vec<(&'static str, f64)>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences on `coords` random coordinates (at least one per
/// block) of a freshly initialised model on a random context.
pub fn gradient_check(
    config: StudentConfig,
    seed: u64,
    coords: usize,
    context_len: usize,
) -> Result<GradCheck> {
    let mut rng = rng::stream(seed, &[rng::label("gradcheck")]);
    let mut model = StudentModel::init(config.clone(), seed)?;
    // Perturb biases away from zero so their gradients are exercised.
    let biases: Vec<_> = model
        .layout()
        .blocks
        .iter()
        .filter(|b| b.is_bias)
        .map(|b| b.range())
        .collect();
    for r in biases {
        for p in &mut model.params_mut()[r] {
            *p = rng.random_range(-0.3..0.3);
        }
    }
    let tokens: Vec<Vec<f64>> = (0..context_len)
        .map(|_| {
            let mut t = vec![if rng.random_bool(0.5) { 1.0 } else { -1.0 }];
            t.extend((1..config.input_dim).map(|_| rng.random_range(0.0..1.0)));
            t
        })
        .collect();
    let ctx = WeightedTokens::from_tokens(&tokens)?;
    let mut query = vec![if rng.random_bool(0.5) { 1.0 } else { -1.0 }];
    query.resize(config.input_dim, 0.0);

    let (_, cache) = model.forward(&ctx, &query)?;
    let pattern = cache.activation_pattern();
    model.backward(&cache, 1.0)?;
    let analytic = model.grads().to_vec();

    let layout = model.layout().clone();
    let mut targets: Vec<usize> = layout
        .blocks
        .iter()
        .map(|b| b.offset + rng.random_range(0..b.len()))
        .collect();
    let mut per_block: Vec<(&'static str, f64)> =
        layout.blocks.iter().map(|b| (b.name, 0.0)).collect();
    let mut kinks = 0;
    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    while checked < coords.max(targets.len()) {
        let i = targets
            .pop()
            .unwrap_or_else(|| rng.random_range(0..model.n_params()));
        let orig = model.params()[i];
        model.params_mut()[i] = orig + GRADIENT_STEP;
        let (up, c_up) = model.forward(&ctx, &query)?;
        model.params_mut()[i] = orig - GRADIENT_STEP;
        let (down, c_down) = model.forward(&ctx, &query)?;
        model.params_mut()[i] = orig;
        if config.activation == Activation::Relu
            && (c_up.activation_pattern() != pattern || c_down.activation_pattern() != pattern)
        {
            kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * GRADIENT_STEP);
        let err = rel_err(analytic[i], numeric);
        max_rel_err = max_rel_err.max(err);
        let block = layout
            .blocks
            .iter()
            .position(|b| b.range().contains(&i))
            .expect("index in layout");
        per_block[block].1 = per_block[block].1.max(err);
        checked += 1;
    }
    Ok(GradCheck {
        checked,
        kinks,
        max_rel_err,
        per_block,
    })
}

fn gradient() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for activation in [Activation::Relu, Activation::Tanh] {
        let config = StudentConfig {
            activation,
            ..Default::default()
        };
        for seed in 0..GRADIENT_SEEDS {
            let g = gradient_check(config.clone(), seed, GRADIENT_COORDS, 24)?;
            let worst_block = g
                .per_block
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|b| b.0)
                .unwrap_or("-");
            checks.push(Check::new(
                format!("fd[{activation:?},seed={seed}]"),
                g.max_rel_err <= GRADIENT_REL_TOL,
                format!(
                    "{} coords, {} kinks skipped, max rel err {:.2e} ({worst_block})",
                    g.checked, g.kinks, g.max_rel_err
                ),
            ));
        }
    }
    Ok(checks)
}
