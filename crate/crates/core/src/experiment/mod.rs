//! Synthetic associative-recall task on `[0, 1] × {-1, +1}`.
//!
//! Each example mixes two clamped Mercer densities `μ₁, μ₂` tagged `v` and
//! `-v`, draws `n_tokens` context tokens from the mixture and asks for
//! `Y = v · Σ_{j>=1} λ_j Z_{1,j}²`, a functional of the `v`-tagged component
//! only. Tokens are `(tag, x)`; the query is `(v, 0)`.

mod sweep;

pub use sweep::{
    cell_key, fit_curves, load_attention_stats, load_risk_rows, risk_curves, sweep,
    write_scaling_axis, AttentionStatsRow, CellRecord, FailedCell, FitEntry, RiskRow, SweepBundle,
    SweepOptions, ATTENTION_STATS_FILE, CONFIG_FILE, FIT_FILE, RISK_CURVE_FILE, SCALING_AXIS_FILE,
    SUMMARY_FILE,
};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, MixtureContext};
use crate::model::{StudentConfig, StudentModel, WeightedTokens};
use crate::optim::{self, Sample, TrainConfig};
use crate::rng;
use crate::spectrum::{MercerSpectrum, DEFAULT_CLAMP_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub alpha_list: Vec<f64>,
    /// Eigenvalue scale `c` in `λ_j = exp(-c j^α)`.
    pub decay_scale: f64,
    pub modes: usize,
    pub grid_size: usize,
    pub n_tokens: usize,
    pub n_list: Vec<usize>,
    pub n_val: usize,
    /// Validation examples used for the attention statistics.
    pub n_stats: usize,
    pub clamp_eps: f64,
    pub seeds: Vec<u64>,
    /// Root seed mixed into every stream.
    pub seed: u64,
    pub student: StudentConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha_list: vec![0.5, 1.0, 2.0],
            decay_scale: 1.0,
            modes: 16,
            grid_size: 32,
            n_tokens: 5000,
            n_list: vec![4, 8, 16, 32, 64],
            n_val: 2000,
            n_stats: 1000,
            clamp_eps: DEFAULT_CLAMP_EPS,
            seeds: vec![0, 1, 2],
            seed: 0,
            student: StudentConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Smaller contexts and validation sets for quick runs.
    pub fn reduced() -> Self {
        ExperimentConfig {
            n_tokens: 1000,
            n_val: 500,
            n_stats: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::InvalidArgument("n_list is empty".into()));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) || self.n_list[0] == 0 {
            return Err(Error::InvalidArgument(
                "n_list must be positive and strictly increasing".into(),
            ));
        }
        if self.alpha_list.is_empty() {
            return Err(Error::InvalidArgument("alpha_list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one seed is required".into(),
            ));
        }
        if self.modes * 2 > self.grid_size {
            return Err(Error::InvalidArgument(format!(
                "need modes <= grid_size / 2, got {} and {}",
                self.modes, self.grid_size
            )));
        }
        if self.n_tokens == 0 || self.n_val == 0 {
            return Err(Error::InvalidArgument(
                "n_tokens and n_val must be positive".into(),
            ));
        }
        if self.student.input_dim != 2 {
            return Err(Error::InvalidArgument(
                "the recall task uses 2-dimensional (tag, x) tokens".into(),
            ));
        }
        self.student.validate()?;
        self.train.validate()
    }

    pub fn spectrum(&self, alpha: f64) -> Result<MercerSpectrum> {
        MercerSpectrum::new(alpha, self.decay_scale, self.modes, self.grid_size)
    }
}

/// Latent draw behind an example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hidden {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub v1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// Context histogram: distinct `(tag, x)` tokens with their counts.
    pub context: WeightedTokens,
    /// Draw order of the context, as indices into `context`.
    pub order: Vec<u16>,
    pub query: Vec<f64>,
    pub target: f64,
    pub hidden: Hidden,
}

impl Example {
    /// The context as drawn, one `(tag, x)` pair per token.
    pub fn context_tokens(&self) -> Vec<Vec<f64>> {
        self.order
            .iter()
            .map(|&i| self.context.token(i as usize).to_vec())
            .collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.order.len()
    }

    pub fn query_tag(&self) -> f64 {
        self.query[0]
    }
}

impl Sample for Example {
    fn context(&self) -> &WeightedTokens {
        &self.context
    }

    fn query(&self) -> &[f64] {
        &self.query
    }

    fn target(&self) -> f64 {
        self.target
    }
}

/// `v · Σ_{j>=1} λ_j z_j²`.
pub fn target_functional(spectrum: &MercerSpectrum, z1: &[f64], v1: f64) -> f64 {
    let lambdas = spectrum.eigenvalues();
    v1 * z1
        .iter()
        .zip(&lambdas)
        .skip(1)
        .map(|(z, l)| l * z * z)
        .sum::<f64>()
}

/// Builds an example from explicit latents; the context is drawn from `rng`.
pub fn example_from_latent(
    spectrum: &MercerSpectrum,
    cfg: &ExperimentConfig,
    hidden: Hidden,
    rng: &mut rng::Rng,
) -> Result<Example> {
    let p1 = spectrum.synth_density(&hidden.z1, cfg.clamp_eps)?;
    let p2 = spectrum.synth_density(&hidden.z2, cfg.clamp_eps)?;
    let grid = spectrum.grid();
    let (mixture, query) = MixtureContext::build(
        vec![
            DiscreteMeasure::on_grid(grid, &p1)?,
            DiscreteMeasure::on_grid(grid, &p2)?,
        ],
        vec![vec![hidden.v1], vec![-hidden.v1]],
        0,
    )?;
    let draws = mixture.sample_indices(cfg.n_tokens, rng);

    // Histogram over (component, grid index); entries in first-seen order.
    let t = grid.len();
    let mut slot = vec![u16::MAX; 2 * t];
    let mut tokens = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut order = Vec::with_capacity(draws.len());
    for (comp, idx) in draws {
        let cell = comp * t + idx;
        if slot[cell] == u16::MAX {
            slot[cell] = counts.len() as u16;
            tokens.push(mixture.tags()[comp][0]);
            tokens.push(grid[idx]);
            counts.push(0.0);
        }
        counts[slot[cell] as usize] += 1.0;
        order.push(slot[cell]);
    }
    let target = target_functional(spectrum, &hidden.z1, hidden.v1);
    Ok(Example {
        context: WeightedTokens::new(2, tokens, counts)?,
        order,
        query,
        target,
        hidden,
    })
}

/// Draws `v ∈ {±1}`, `Z₁, Z₂ ~ N(0, I_{M-1})` and the context tokens.
pub fn gen_example(
    spectrum: &MercerSpectrum,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Example> {
    let mut rng = rng::stream(seed, &[rng::label("example")]);
    let v1 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let m = spectrum.modes();
    let latent = |rng: &mut rng::Rng| {
        let mut z = vec![0.0; m];
        for zj in &mut z[1..] {
            *zj = rng.sample(StandardNormal);
        }
        z
    };
    let z1 = latent(&mut rng);
    let z2 = latent(&mut rng);
    example_from_latent(spectrum, cfg, Hidden { z1, z2, v1 }, &mut rng)
}

/// `count` independent examples; example `i` uses seed `derive(seed, [i])`.
pub fn gen_dataset(
    spectrum: &MercerSpectrum,
    cfg: &ExperimentConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    (0..count)
        .into_par_iter()
        .map(|i| gen_example(spectrum, cfg, rng::derive(seed, &[i as u64])))
        .collect()
}

/// Running first and second moments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        let m = self.mean();
        (self.sum_sq / self.count as f64 - m * m).max(0.0).sqrt()
    }
}

/// Per-head same-tag / different-tag attention statistics over examples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    /// Average per-token weight on tokens sharing the query tag.
    pub w_same: Moments,
    pub w_diff: Moments,
    /// Total mass on tokens sharing the query tag.
    pub m_same: Moments,
    pub m_diff: Moments,
    /// Mean of `|m_same - m_diff|` per example.
    pub m_gap: Moments,
}

impl HeadStats {
    pub fn merge(&mut self, other: &HeadStats) {
        self.w_same.merge(&other.w_same);
        self.w_diff.merge(&other.w_diff);
        self.m_same.merge(&other.m_same);
        self.m_diff.merge(&other.m_diff);
        self.m_gap.merge(&other.m_gap);
    }
}

/// Accumulates one example's attention masses into `stats`. `tags[t]` and
/// `counts[t]` describe context entry `t`; `masses[h][t]` is head `h`'s total
/// mass on that entry.
pub fn accumulate_head_stats(
    stats: &mut [HeadStats],
    masses: &[Vec<f64>],
    tags: &[f64],
    counts: &[f64],
    query_tag: f64,
) {
    let same_count: f64 = tags
        .iter()
        .zip(counts)
        .filter(|(t, _)| **t == query_tag)
        .map(|(_, c)| c)
        .sum();
    let diff_count: f64 = counts.iter().sum::<f64>() - same_count;
    for (s, row) in stats.iter_mut().zip(masses) {
        let m_same: f64 = row
            .iter()
            .zip(tags)
            .filter(|(_, t)| **t == query_tag)
            .map(|(m, _)| m)
            .sum();
        let m_diff: f64 = row
            .iter()
            .zip(tags)
            .filter(|(_, t)| **t != query_tag)
            .map(|(m, _)| m)
            .sum();
        if same_count > 0.0 {
            s.w_same.push(m_same / same_count);
            s.m_same.push(m_same);
        }
        if diff_count > 0.0 {
            s.w_diff.push(m_diff / diff_count);
            s.m_diff.push(m_diff);
        }
        s.m_gap.push((m_same - m_diff).abs());
    }
}

/// Same-tag vs different-tag attention statistics of `model` over `examples`.
pub fn attention_mass_stats(model: &StudentModel, examples: &[Example]) -> Result<Vec<HeadStats>> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "no examples for attention statistics".into(),
        ));
    }
    let mut stats = vec![HeadStats::default(); model.config().n_heads];
    for ex in examples {
        let (_, cache) = model.forward(&ex.context, &ex.query)?;
        let tags: Vec<f64> = (0..ex.context.len())
            .map(|i| ex.context.token(i)[0])
            .collect();
        accumulate_head_stats(
            &mut stats,
            &cache.attention_masses(),
            &tags,
            ex.context.counts(),
            ex.query_tag(),
        );
    }
    Ok(stats)
}

/// MSE when example `i` is paired with the query of example `perm[i]`.
pub fn mse_with_query_permutation(
    model: &StudentModel,
    examples: &[Example],
    perm: &[usize],
) -> Result<f64> {
    if perm.len() != examples.len() {
        return Err(Error::dims(examples.len(), perm.len()));
    }
    let total: f64 = examples
        .par_iter()
        .zip(perm)
        .map(|(ex, &j)| {
            model
                .predict(&ex.context, &examples[j].query)
                .map(|y| (y - ex.target).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / examples.len() as f64)
}

/// `(mse with original queries, mse with queries permuted across examples)`.
pub fn query_shuffle_eval(
    model: &StudentModel,
    examples: &[Example],
    seed: u64,
) -> Result<(f64, f64)> {
    if examples.len() < 2 {
        return Err(Error::InvalidArgument(
            "query shuffle needs at least two examples".into(),
        ));
    }
    let identity: Vec<usize> = (0..examples.len()).collect();
    let mut perm = identity.clone();
    perm.shuffle(&mut rng::stream(seed, &[rng::label("query_shuffle")]));
    Ok((
        mse_with_query_permutation(model, examples, &identity)?,
        mse_with_query_permutation(model, examples, &perm)?,
    ))
}

/// `(n, mean validation risk, std over seeds)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub alpha: f64,
    pub points: Vec<RiskPoint>,
}

impl RiskCurve {
    /// Groups per-seed risks by `n` (input order of first appearance).
    pub fn from_samples(alpha: f64, samples: &[(usize, f64)]) -> Self {
        let mut ns: Vec<usize> = Vec::new();
        for (n, _) in samples {
            if !ns.contains(n) {
                ns.push(*n);
            }
        }
        ns.sort_unstable();
        let points = ns
            .into_iter()
            .map(|n| {
                let mut m = Moments::default();
                for (_, l) in samples.iter().filter(|(k, _)| *k == n) {
                    m.push(*l);
                }
                RiskPoint {
                    n,
                    mean: m.mean(),
                    std: m.std(),
                    seeds: m.count as usize,
                }
            })
            .collect();
        RiskCurve { alpha, points }
    }
}

/// `log L ≈ A - C t` with `t = (log n)^{α/(α+1)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a: f64,
    pub c: f64,
    pub residual_rms: f64,
}

/// Transformed abscissa `(ln n)^{α/(α+1)}`.
pub fn scaling_axis(n: f64, alpha: f64) -> f64 {
    n.ln().powf(alpha / (alpha + 1.0))
}

/// Ordinary least squares of `ln L` on [`scaling_axis`].
pub fn fit_rate(curve: &RiskCurve, alpha: f64) -> Result<FitResult> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| {
            if p.mean > 0.0 && p.mean.is_finite() {
                Ok((scaling_axis(p.n as f64, alpha), p.mean.ln()))
            } else {
                Err(Error::DegenerateFit(format!(
                    "risk at n={} is {}",
                    p.n, p.mean
                )))
            }
        })
        .collect::<Result<_>>()?;
    fit_line(&pts)
}

/// Least-squares line through `(t, y)` pairs, reported as `y = A - C t`.
pub fn fit_line(pts: &[(f64, f64)]) -> Result<FitResult> {
    let k = pts.len() as f64;
    if pts.len() < 2 {
        return Err(Error::DegenerateFit("need at least two points".into()));
    }
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateFit("all abscissae are equal".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let slope = sxy / sxx;
    let a = ym - slope * tm;
    let rss: f64 = pts.iter().map(|p| (p.1 - (a + slope * p.0)).powi(2)).sum();
    Ok(FitResult {
        a,
        c: -slope,
        residual_rms: (rss / k).sqrt(),
    })
}

/// Outcome of one `(α, n, seed)` cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
    pub val_mse: f64,
    pub train_loss: Vec<f64>,
    pub head_stats: Vec<HeadStats>,
    pub model: StudentModel,
}

fn alpha_label(alpha: f64) -> u64 {
    alpha.to_bits()
}

/// Seed of the validation set for `(α, seed)`; shared by every `n`.
pub fn validation_seed(cfg: &ExperimentConfig, alpha: f64, seed: u64) -> u64 {
    rng::derive(cfg.seed, &[rng::label("val"), alpha_label(alpha), seed])
}

pub fn training_seed(cfg: &ExperimentConfig, alpha: f64, n: usize, seed: u64) -> u64 {
    rng::derive(
        cfg.seed,
        &[rng::label("train"), alpha_label(alpha), n as u64, seed],
    )
}

/// Trains a fresh student on `n` examples and returns it with its training
/// set. Initialisation, data and noise are all keyed by `(α, n, seed)`.
pub fn train_cell(
    alpha: f64,
    n: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(StudentModel, Vec<f64>)> {
    let spectrum = cfg.spectrum(alpha)?;
    let train_seed = training_seed(cfg, alpha, n, seed);
    let data = gen_dataset(
        &spectrum,
        cfg,
        n,
        rng::derive(train_seed, &[rng::label("data")]),
    )?;
    let mut model = StudentModel::init(
        cfg.student.clone(),
        rng::derive(train_seed, &[rng::label("init")]),
    )?;
    let tc = TrainConfig {
        seed: rng::derive(train_seed, &[rng::label("optim")]),
        ..cfg.train.clone()
    };
    let trace = optim::train(&mut model, &data, &tc)?;
    Ok((model, trace))
}

pub fn validation_set(alpha: f64, seed: u64, cfg: &ExperimentConfig) -> Result<Vec<Example>> {
    let spectrum = cfg.spectrum(alpha)?;
    gen_dataset(&spectrum, cfg, cfg.n_val, validation_seed(cfg, alpha, seed))
}

/// Trains, evaluates clean validation MSE and records attention statistics on
/// the first `n_stats` validation examples.
pub fn run_cell(alpha: f64, n: usize, seed: u64, cfg: &ExperimentConfig) -> Result<CellOutcome> {
    cfg.validate()?;
    let (model, train_loss) = train_cell(alpha, n, seed, cfg)?;
    let val = validation_set(alpha, seed, cfg)?;
    let val_mse = optim::evaluate(&model, &val)?;
    let head_stats = attention_mass_stats(&model, &val[..cfg.n_stats.min(val.len())])?;
    Ok(CellOutcome {
        alpha,
        n,
        seed,
        val_mse,
        train_loss,
        head_stats,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            n_tokens: 200,
            n_val: 20,
            n_stats: 10,
            ..Default::default()
        }
    }

    #[test]
    fn single_term_target() {
        let cfg = small_cfg();
        let s = cfg.spectrum(1.0).unwrap();
        let mut z1 = vec![0.0; 16];
        z1[1] = 1.0;
        let hidden = Hidden {
            z1: z1.clone(),
            z2: vec![0.0; 16],
            v1: 1.0,
        };
        let ex = example_from_latent(&s, &cfg, hidden, &mut rng::stream(1, &[])).unwrap();
        assert_relative_eq!(ex.target, (-1.0f64).exp(), max_relative = 1e-15);
        assert_eq!(ex.query, vec![1.0, 0.0]);

        let zero = Hidden {
            z1: vec![0.0; 16],
            z2: z1,
            v1: -1.0,
        };
        let ex = example_from_latent(&s, &cfg, zero, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(ex.target, 0.0);
    }

    #[test]
    fn target_is_odd_in_the_tag() {
        let cfg = small_cfg();
        let s = cfg.spectrum(1.0).unwrap();
        let ex = gen_example(&s, &cfg, 5).unwrap();
        let flipped = Hidden {
            v1: -ex.hidden.v1,
            ..ex.hidden.clone()
        };
        assert_eq!(target_functional(&s, &flipped.z1, flipped.v1), -ex.target);
    }

    #[test]
    fn example_structure() {
        let cfg = small_cfg();
        let s = cfg.spectrum(1.0).unwrap();
        let ex = gen_example(&s, &cfg, 9).unwrap();
        assert_eq!(ex, gen_example(&s, &cfg, 9).unwrap());
        let toks = ex.context_tokens();
        assert_eq!(toks.len(), 200);
        assert_eq!(ex.context.total(), 200.0);
        assert!(toks.iter().all(|t| t[0] == 1.0 || t[0] == -1.0));
        assert!(toks.iter().all(|t| s.grid().contains(&t[1])));
        assert!(ex.target.is_finite());
        assert_eq!(ex.hidden.z1[0], 0.0);
        assert_eq!(ex.query[1], 0.0);
        assert_eq!(ex.query[0], ex.hidden.v1);
    }

    #[test]
    fn fit_examples() {
        let exact: Vec<(f64, f64)> = [0.5, 1.0, 1.7, 2.2]
            .iter()
            .map(|&t| (t, 1.0 - 2.0 * t))
            .collect();
        let f = fit_line(&exact).unwrap();
        assert_relative_eq!(f.a, 1.0, max_relative = 1e-12);
        assert_relative_eq!(f.c, 2.0, max_relative = 1e-12);
        assert!(f.residual_rms < 1e-12);

        assert!(fit_line(&[(1.0, 0.0), (1.0, 2.0)]).is_err());
        let flat = RiskCurve {
            alpha: 1.0,
            points: vec![
                RiskPoint {
                    n: 4,
                    mean: 0.1,
                    std: 0.0,
                    seeds: 1
                };
                2
            ],
        };
        assert!(fit_rate(&flat, 1.0).is_err());

        // α → ∞: the abscissa becomes ln n.
        assert_relative_eq!(scaling_axis(64.0, 1e9), 64f64.ln(), max_relative = 1e-8);
    }

    #[test]
    fn fit_matches_grid_search() {
        let pts = [(1.0, 0.3), (1.5, -0.45), (2.1, -1.52)];
        let f = fit_line(&pts).unwrap();
        // Coarse-to-fine grid search on (intercept, slope).
        let sse = |a: f64, b: f64| {
            pts.iter()
                .map(|(t, y)| (y - a - b * t).powi(2))
                .sum::<f64>()
        };
        let (mut ca, mut cb, mut step) = (0.0, 0.0, 1.0);
        for _ in 0..40 {
            let mut best = (sse(ca, cb), ca, cb);
            for i in -10..=10 {
                for j in -10..=10 {
                    let (a, b) = (ca + i as f64 * step, cb + j as f64 * step);
                    let v = sse(a, b);
                    if v < best.0 {
                        best = (v, a, b);
                    }
                }
            }
            ca = best.1;
            cb = best.2;
            step *= 0.5;
        }
        assert!((f.a - ca).abs() < 1e-6, "{} vs {}", f.a, ca);
        assert!((f.c + cb).abs() < 1e-6, "{} vs {}", f.c, -cb);
    }

    #[test]
    fn fit_is_affine_equivariant() {
        let curve = RiskCurve::from_samples(1.0, &[(4, 0.5), (8, 0.31), (16, 0.2), (64, 0.09)]);
        let k = 3.7;
        let scaled = RiskCurve::from_samples(
            1.0,
            &[(4, 0.5 * k), (8, 0.31 * k), (16, 0.2 * k), (64, 0.09 * k)],
        );
        let a = fit_rate(&curve, 1.0).unwrap();
        let b = fit_rate(&scaled, 1.0).unwrap();
        assert_relative_eq!(b.a, a.a + k.ln(), max_relative = 1e-12);
        assert_relative_eq!(b.c, a.c, max_relative = 1e-10);
    }

    #[test]
    fn risk_curve_groups_seeds() {
        let c = RiskCurve::from_samples(0.5, &[(8, 0.2), (4, 1.0), (8, 0.4), (4, 3.0)]);
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.points[0].n, 4);
        assert_eq!(c.points[0].mean, 2.0);
        assert_eq!(c.points[0].std, 1.0);
        assert_relative_eq!(c.points[1].mean, 0.3, max_relative = 1e-15);
    }

    #[test]
    fn head_stats_examples() {
        // All mass on same-tag entries.
        let tags = [1.0, -1.0, 1.0, -1.0];
        let counts = [2.0, 2.0, 1.0, 1.0];
        let mut s = vec![HeadStats::default(); 2];
        let masses = vec![
            vec![0.5, 0.0, 0.5, 0.0],
            vec![1.0 / 6.0 * 2.0, 1.0 / 6.0 * 2.0, 1.0 / 6.0, 1.0 / 6.0],
        ];
        accumulate_head_stats(&mut s, &masses, &tags, &counts, 1.0);
        assert_eq!(s[0].m_same.mean(), 1.0);
        assert_eq!(s[0].m_diff.mean(), 0.0);
        assert_relative_eq!(s[0].w_same.mean(), 1.0 / 3.0);
        // Uniform rows, balanced tags: w = 1/T on both sides.
        assert_relative_eq!(s[1].w_same.mean(), 1.0 / 6.0, max_relative = 1e-15);
        assert_relative_eq!(s[1].w_diff.mean(), 1.0 / 6.0, max_relative = 1e-15);

        // Uniform over 5000 tokens, half per tag: the 2e-4 baseline; a head
        // focused on the same-tag half sits at 4e-4.
        let mut s = vec![HeadStats::default(); 2];
        let masses = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        accumulate_head_stats(&mut s, &masses, &[1.0, -1.0], &[2500.0, 2500.0], 1.0);
        assert_relative_eq!(s[0].w_same.mean(), 2e-4, max_relative = 1e-12);
        assert_relative_eq!(s[0].w_diff.mean(), 2e-4, max_relative = 1e-12);
        assert_relative_eq!(s[1].w_same.mean(), 4e-4, max_relative = 1e-12);
        assert_eq!(s[1].w_diff.mean(), 0.0);

        // Only one side present: the other side gets no sample.
        let mut s = vec![HeadStats::default()];
        accumulate_head_stats(&mut s, &[vec![1.0]], &[1.0], &[3.0], 1.0);
        assert_eq!(s[0].m_same.count, 1);
        assert_eq!(s[0].m_diff.count, 0);
    }

    #[test]
    fn query_shuffle_examples() {
        let cfg = small_cfg();
        let s = cfg.spectrum(1.0).unwrap();
        let data = gen_dataset(&s, &cfg, 6, 3).unwrap();
        let model = StudentModel::init(StudentConfig::default(), 1).unwrap();
        let identity: Vec<usize> = (0..6).collect();
        let base = optim::evaluate(&model, &data).unwrap();
        assert_relative_eq!(
            mse_with_query_permutation(&model, &data, &identity).unwrap(),
            base,
            max_relative = 1e-14
        );

        // A model with the query MLP output zeroed ignores the query.
        let mut blind = model.clone();
        let l = blind.layout().clone();
        let p = blind.params_mut();
        for name in ["qry.w2", "qry.b2"] {
            p[l.block(name).unwrap().range()].fill(0.0);
        }
        let (o, sh) = query_shuffle_eval(&blind, &data, 7).unwrap();
        assert_relative_eq!(o, sh, max_relative = 1e-14);
        assert!(query_shuffle_eval(&blind, &data[..1], 7).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig {
            n_list: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            n_list: vec![8, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            modes: 20,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn run_cell_is_reproducible() {
        let cfg = ExperimentConfig {
            n_tokens: 300,
            n_val: 40,
            n_stats: 20,
            train: TrainConfig {
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = run_cell(1.0, 4, 0, &cfg).unwrap();
        let b = run_cell(1.0, 4, 0, &cfg).unwrap();
        assert_eq!(a.val_mse, b.val_mse);
        assert!(a.val_mse >= 0.0);
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.head_stats.len(), 4);
        for h in &a.head_stats {
            assert_eq!(h.m_same.count, 20);
        }
    }
}
