//! Integral-form softmax attention over a discrete measure.
//!
//! `Attn(ν, x) = A x + Σ_h W^h ∫ softmax_ν(⟨Q^h x, K^h y⟩) V^h y dν(y)` where the
//! softmax normaliser is itself an integral against `ν`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::measures::{wasserstein1_1d, DiscreteMeasure};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl HeadParams {
    pub fn zeros(d: usize) -> Self {
        HeadParams {
            w: Matrix::zeros(d, d),
            q: Matrix::zeros(d, d),
            k: Matrix::zeros(d, d),
            v: Matrix::zeros(d, d),
        }
    }

    fn matrices(&self) -> [&Matrix; 4] {
        [&self.w, &self.q, &self.k, &self.v]
    }
}

/// Declared membership in the bounded class: every entry `|·| <= max_entry`
/// and at most `max_nonzeros` nonzero entries per matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBounds {
    pub max_entry: f64,
    pub max_nonzeros: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub heads: Vec<HeadParams>,
    pub skip: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<ClassBounds>,
}

impl AttnParams {
    pub fn new(heads: Vec<HeadParams>, skip: Matrix) -> Result<Self> {
        let d = skip.rows();
        let all = std::iter::once(&skip).chain(heads.iter().flat_map(|h| h.matrices()));
        for m in all {
            if !m.is_square() || m.rows() != d {
                return Err(Error::dims(
                    d,
                    if m.rows() != d { m.rows() } else { m.cols() },
                ));
            }
        }
        Ok(AttnParams {
            heads,
            skip,
            bounds: None,
        })
    }

    /// All-zero parameters with `n_heads` heads.
    pub fn zeros(d: usize, n_heads: usize) -> Self {
        AttnParams {
            heads: (0..n_heads).map(|_| HeadParams::zeros(d)).collect(),
            skip: Matrix::zeros(d, d),
            bounds: None,
        }
    }

    /// Tags the parameters as members of a bounded class, failing if the
    /// bounds do not hold.
    pub fn with_bounds(mut self, bounds: ClassBounds) -> Result<Self> {
        let observed = self.observed_bounds();
        if observed.max_entry > bounds.max_entry || observed.max_nonzeros > bounds.max_nonzeros {
            return Err(Error::InvalidArgument(format!(
                "parameters {observed:?} exceed declared class bounds {bounds:?}"
            )));
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    /// Tightest `(B_a, S_a)` satisfied by the current matrices.
    pub fn observed_bounds(&self) -> ClassBounds {
        let all = std::iter::once(&self.skip).chain(self.heads.iter().flat_map(|h| h.matrices()));
        all.fold(
            ClassBounds {
                max_entry: 0.0,
                max_nonzeros: 0,
            },
            |acc, m| ClassBounds {
                max_entry: acc.max_entry.max(m.max_abs()),
                max_nonzeros: acc.max_nonzeros.max(m.nonzeros()),
            },
        )
    }

    pub fn dim(&self) -> usize {
        self.skip.rows()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }
}

/// Weights `w_t ∝ p_t exp(⟨Q x, K y_t⟩)` of the softmax-tilted measure,
/// normalised to sum to one.
pub fn softmax_weights(head: &HeadParams, mu: &DiscreteMeasure, x: &[f64]) -> Result<Vec<f64>> {
    if mu.is_empty() {
        return Err(Error::EmptySupport);
    }
    let d = head.q.cols();
    if x.len() != d {
        return Err(Error::dims(d, x.len()));
    }
    if mu.dim() != head.k.cols() {
        return Err(Error::dims(head.k.cols(), mu.dim()));
    }
    let qx = head.q.matvec(x);
    let scores: Vec<f64> = mu
        .support()
        .iter()
        .map(|y| dot(&qx, &head.k.matvec(y)))
        .collect();
    Ok(tilt(&scores, mu.weights()))
}

/// `p_t exp(s_t - max s) / Σ_u p_u exp(s_u - max s)`.
pub(crate) fn tilt(scores: &[f64], masses: &[f64]) -> Vec<f64> {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = scores
        .iter()
        .zip(masses)
        .map(|(s, p)| p * (s - top).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact evaluation of the attention operator on a discrete measure.
pub fn measure_attention(params: &AttnParams, mu: &DiscreteMeasure, x: &[f64]) -> Result<Vec<f64>> {
    let d = params.dim();
    if x.len() != d {
        return Err(Error::dims(d, x.len()));
    }
    if mu.dim() != d {
        return Err(Error::dims(d, mu.dim()));
    }
    let mut out = params.skip.matvec(x);
    for head in &params.heads {
        let w = softmax_weights(head, mu, x)?;
        let mut pooled = vec![0.0; d];
        for (y, wt) in mu.support().iter().zip(&w) {
            for (acc, vy) in pooled.iter_mut().zip(head.v.matvec(y)) {
                *acc += wt * vy;
            }
        }
        for (o, v) in out.iter_mut().zip(head.w.matvec(&pooled)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Temperature `c = √(ln(I³/ε₂))` at which the recall construction puts all
/// but `O(ε₂/I)` of the attention mass on the starred component.
pub fn recall_temperature(components: usize, eps2: f64) -> Result<f64> {
    if components == 0 || !(eps2 > 0.0) {
        return Err(Error::InvalidArgument("need I >= 1 and eps2 > 0".into()));
    }
    let arg = (components as f64).powi(3) / eps2;
    if arg <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "I^3/eps2 = {arg} must exceed 1"
        )));
    }
    Ok(arg.ln().sqrt())
}

/// Recall construction on feature-mapped tokens `(v ‖ z ‖ e_1(z), ..., e_D(z))`.
///
/// Head `h` scores tokens by `c² ⟨v_query, v⟩` and copies feature coordinate
/// `d₁ + d₂ + h` into the same output coordinate. The skip keeps the first
/// `d₁ + d₂` coordinates.
pub fn build_recall_params(
    d1: usize,
    d2: usize,
    features: usize,
    temperature: f64,
) -> Result<AttnParams> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(
            "temperature must be positive".into(),
        ));
    }
    let d = d1 + d2 + features;
    let mut select = vec![0.0; d];
    select[..d1].fill(temperature);
    let qk = Matrix::diag(&select);
    let heads = (0..features)
        .map(|h| {
            let mut e = vec![0.0; d];
            e[d1 + d2 + h] = 1.0;
            let copy = Matrix::outer(&e, &e);
            HeadParams {
                w: copy.clone(),
                q: qk.clone(),
                k: qk.clone(),
                v: copy,
            }
        })
        .collect();
    let mut keep = vec![0.0; d];
    keep[..d1 + d2].fill(1.0);
    let params = AttnParams::new(heads, Matrix::diag(&keep))?;
    params.with_bounds(ClassBounds {
        max_entry: temperature.max(1.0),
        max_nonzeros: d1.max(d1 + d2).max(1),
    })
}

/// Softmax density (per unit of token mass) on starred tokens under the recall
/// construction with `I` equal-weight components: `e^{c²} / ((e^{c²} + I - 1) / I)`.
pub fn recall_star_density(components: usize, c_squared: f64) -> f64 {
    let i = components as f64;
    let e = c_squared.exp();
    e / ((e + i - 1.0) / i)
}

/// `Γ: (ν, x) ↦ Γ(ν, x)` with a fixed output dimension.
pub trait MeasureMap {
    fn apply(&self, mu: &DiscreteMeasure, x: &[f64]) -> Result<Vec<f64>>;

    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;
}

impl MeasureMap for AttnParams {
    fn apply(&self, mu: &DiscreteMeasure, x: &[f64]) -> Result<Vec<f64>> {
        measure_attention(self, mu, x)
    }

    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn output_dim(&self) -> usize {
        self.dim()
    }
}

/// A measure-independent map `x ↦ f(x)`, e.g. a token-wise MLP.
pub struct PointMap<F> {
    f: F,
    input_dim: usize,
    output_dim: usize,
}

impl<F: Fn(&[f64]) -> Vec<f64>> PointMap<F> {
    pub fn new(input_dim: usize, output_dim: usize, f: F) -> Self {
        PointMap {
            f,
            input_dim,
            output_dim,
        }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> MeasureMap for PointMap<F> {
    fn apply(&self, _mu: &DiscreteMeasure, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::dims(self.input_dim, x.len()));
        }
        let y = (self.f)(x);
        if y.len() != self.output_dim {
            return Err(Error::dims(self.output_dim, y.len()));
        }
        Ok(y)
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }
}

/// `(ν, x) ↦ ∫ y dν(y)`, ignoring the query.
pub struct MeanMap {
    pub dim: usize,
}

impl MeasureMap for MeanMap {
    fn apply(&self, mu: &DiscreteMeasure, _x: &[f64]) -> Result<Vec<f64>> {
        if mu.dim() != self.dim {
            return Err(Error::dims(self.dim, mu.dim()));
        }
        Ok(mu.mean())
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }
}

/// `(Γ₂ ⋄ Γ₁)(ν, x) = Γ₂(Γ₁(ν, ·)_♯ ν, Γ₁(ν, x))`.
pub struct Composed<G2, G1> {
    outer: G2,
    inner: G1,
}

pub fn compose<G2: MeasureMap, G1: MeasureMap>(outer: G2, inner: G1) -> Result<Composed<G2, G1>> {
    if inner.output_dim() != outer.input_dim() {
        return Err(Error::dims(outer.input_dim(), inner.output_dim()));
    }
    Ok(Composed { outer, inner })
}

impl<G2: MeasureMap, G1: MeasureMap> MeasureMap for Composed<G2, G1> {
    fn apply(&self, mu: &DiscreteMeasure, x: &[f64]) -> Result<Vec<f64>> {
        let head = self.inner.apply(mu, x)?;
        let mut failure = None;
        let pushed = mu.try_pushforward(|y| match self.inner.apply(mu, y) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                vec![0.0; self.inner.output_dim()]
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        self.outer.apply(&pushed, &head)
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.outer.output_dim()
    }
}

/// Domain bounds used by the Lipschitz estimate: `‖x‖_∞ <= B_x` for queries
/// and `‖y‖_∞ <= B_y` on the supports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub query: f64,
    pub support: f64,
}

/// `H S⁴B⁴ B_x B_y e^{4 S²B² B_x B_y} + H (1 + S²B² B_x B_y) S²B² e^{2 S²B² B_x B_y} + S B`.
pub fn lipschitz_bound(heads: usize, class: ClassBounds, domain: DomainBounds) -> f64 {
    let h = heads.max(1) as f64;
    let sb = class.max_nonzeros as f64 * class.max_entry;
    let sb2 = sb * sb;
    let kxy = sb2 * domain.query * domain.support;
    // The last term is the skip connection's share of the query part.
    h * sb2 * sb2 * domain.query * domain.support * (4.0 * kxy).exp()
        + h * (1.0 + kxy) * sb2 * (2.0 * kxy).exp()
        + sb
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Largest observed `‖ΔAttn‖_∞ / (W₁ + ‖Δx‖₂)`.
    pub max_ratio: f64,
    pub bound: f64,
    pub trials: usize,
    pub skipped: usize,
    /// `max_ratio > bound`.
    pub violated: bool,
}

impl LipschitzReport {
    pub fn violated_with_slack(&self, slack: f64) -> bool {
        self.max_ratio > slack * self.bound
    }
}

/// Measures the Lipschitz ratio between two input pairs and compares it with
/// [`lipschitz_bound`] at the declared (or observed) class bounds.
///
/// The ratio is deterministic in its inputs, so `trials` repeats the same
/// evaluation; [`lipschitz_probe_random`] varies the inputs per trial.
pub fn lipschitz_probe(
    params: &AttnParams,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    x1: &[f64],
    x2: &[f64],
    trials: usize,
) -> Result<LipschitzReport> {
    let class = params.bounds.unwrap_or_else(|| params.observed_bounds());
    let domain = DomainBounds {
        query: inf_norm(x1).max(inf_norm(x2)),
        support: mu1
            .support()
            .iter()
            .chain(mu2.support())
            .map(|y| inf_norm(y))
            .fold(0.0, f64::max),
    };
    let bound = lipschitz_bound(params.n_heads(), class, domain);
    let mut report = LipschitzReport {
        max_ratio: 0.0,
        bound,
        trials: 0,
        skipped: 0,
        violated: false,
    };
    for _ in 0..trials {
        match pair_ratio(params, mu1, mu2, x1, x2)? {
            Some(r) => {
                report.trials += 1;
                report.max_ratio = report.max_ratio.max(r);
            }
            None => report.skipped += 1,
        }
    }
    report.violated = report.max_ratio > bound;
    Ok(report)
}

fn pair_ratio(
    params: &AttnParams,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    x1: &[f64],
    x2: &[f64],
) -> Result<Option<f64>> {
    let dx: f64 = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let denom = wasserstein1_1d(mu1, mu2)? + dx;
    if denom <= 1e-300 {
        return Ok(None);
    }
    let a = measure_attention(params, mu1, x1)?;
    let b = measure_attention(params, mu2, x2)?;
    let num = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    Ok(Some(num / denom))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Size limits for randomly drawn probe instances.
#[derive(Clone, Copy, Debug)]
pub struct ProbeInstanceSpec {
    pub max_support: usize,
    pub max_dim: usize,
    pub max_heads: usize,
    pub max_entry: f64,
}

impl Default for ProbeInstanceSpec {
    fn default() -> Self {
        ProbeInstanceSpec {
            max_support: 8,
            max_dim: 4,
            max_heads: 2,
            max_entry: 1.0,
        }
    }
}

/// One report per random instance: random sparse parameters, two measures
/// varying along one shared coordinate, and two queries in `[-1, 1]^d`.
pub fn lipschitz_probe_random(
    spec: ProbeInstanceSpec,
    trials: usize,
    seed: u64,
) -> Result<Vec<LipschitzReport>> {
    let mut rng = rng::stream(seed, &[rng::label("lipschitz_probe")]);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let d = rng.random_range(1..=spec.max_dim);
        let n_heads = rng.random_range(1..=spec.max_heads);
        let b = spec.max_entry * rng.random_range(0.05..=1.0);
        let random_matrix = |rng: &mut rng::Rng| {
            let data = (0..d * d)
                .map(|_| {
                    if rng.random_bool(0.6) {
                        rng.random_range(-b..=b)
                    } else {
                        0.0
                    }
                })
                .collect();
            Matrix::from_row_major(d, d, data).expect("square")
        };
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                w: random_matrix(&mut rng),
                q: random_matrix(&mut rng),
                k: random_matrix(&mut rng),
                v: random_matrix(&mut rng),
            })
            .collect();
        let skip = random_matrix(&mut rng);
        let params = AttnParams::new(heads, skip)?;

        let axis = rng.random_range(0..d);
        let base: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let line_measure = |rng: &mut rng::Rng| {
            let n = rng.random_range(1..=spec.max_support);
            let pts = (0..n)
                .map(|_| {
                    let mut p = base.clone();
                    p[axis] = rng.random_range(-1.0..=1.0);
                    p
                })
                .collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            DiscreteMeasure::new(pts, raw.iter().map(|w| w / total).collect())
        };
        let mu1 = line_measure(&mut rng)?;
        let mu2 = line_measure(&mut rng)?;
        let x1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let x2: Vec<f64> = x1
            .iter()
            .map(|v| (v + rng.random_range(-0.5..=0.5)).clamp(-1.0, 1.0))
            .collect();
        out.push(lipschitz_probe(&params, &mu1, &mu2, &x1, &x2, 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn measure() -> DiscreteMeasure {
        DiscreteMeasure::new(
            vec![vec![0.2, -0.1], vec![0.9, 0.4], vec![-0.5, 0.3]],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap()
    }

    fn head(seed: f64) -> HeadParams {
        let m = |o: f64| Matrix::from_rows(&[vec![0.3 + o, -0.2 * o], vec![0.1, 0.7 - o]]).unwrap();
        HeadParams {
            w: m(seed),
            q: m(seed + 0.1),
            k: m(seed - 0.3),
            v: m(seed * 2.0),
        }
    }

    #[test]
    fn softmax_examples() {
        let mu = measure();
        let mut h = head(0.4);
        h.q = Matrix::zeros(2, 2);
        let w = softmax_weights(&h, &mu, &[1.0, 2.0]).unwrap();
        for (a, b) in w.iter().zip(mu.weights()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
        let dirac = DiscreteMeasure::dirac(vec![0.3, 0.3]);
        assert_eq!(
            softmax_weights(&head(0.1), &dirac, &[0.5, 0.5]).unwrap(),
            vec![1.0]
        );

        // scores (s, s + ln 3) on equal weights: scalar softmax oracle.
        let s = 0.7f64;
        let (e0, e1) = (s.exp(), (s + 3f64.ln()).exp());
        let oracle = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let two = DiscreteMeasure::new(vec![vec![s], vec![s + 3f64.ln()]], vec![0.5, 0.5]).unwrap();
        let id = HeadParams {
            w: Matrix::identity(1),
            q: Matrix::identity(1),
            k: Matrix::identity(1),
            v: Matrix::identity(1),
        };
        let w = softmax_weights(&id, &two, &[1.0]).unwrap();
        assert_relative_eq!(w[0], oracle[0], max_relative = 1e-14);
        assert_relative_eq!(w[1], 0.75, max_relative = 1e-14);
        assert!(softmax_weights(&id, &two, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn attention_examples() {
        let mu = measure();
        let mut p = AttnParams::zeros(2, 2);
        p.skip = Matrix::identity(2);
        assert_eq!(
            measure_attention(&p, &mu, &[0.3, -0.8]).unwrap(),
            vec![0.3, -0.8]
        );

        let y = vec![0.25, -0.75];
        let single = AttnParams::new(
            vec![HeadParams {
                w: Matrix::identity(2),
                v: Matrix::identity(2),
                ..head(0.9)
            }],
            Matrix::zeros(2, 2),
        )
        .unwrap();
        let out =
            measure_attention(&single, &DiscreteMeasure::dirac(y.clone()), &[4.0, 1.0]).unwrap();
        assert_relative_eq!(out[0], y[0], max_relative = 1e-15);
        assert_relative_eq!(out[1], y[1], max_relative = 1e-15);
        assert!(measure_attention(&single, &mu, &[1.0]).is_err());
    }

    #[test]
    fn skip_term_is_linear() {
        let mu = measure();
        let mut p = AttnParams::zeros(2, 1);
        p.skip = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let x = [0.4, -0.6];
        let once = measure_attention(&p, &mu, &x).unwrap();
        p.skip = p.skip.scale(2.0);
        let twice = measure_attention(&p, &mu, &x).unwrap();
        assert_eq!(twice, once.iter().map(|v| v * 2.0).collect::<Vec<_>>());
    }

    #[test]
    fn recall_params_shape_and_bounds() {
        let c = 100f64.ln().sqrt();
        let p = build_recall_params(2, 1, 3, c).unwrap();
        assert_eq!(p.dim(), 6);
        assert_eq!(p.n_heads(), 3);
        let b = p.bounds.unwrap();
        assert_eq!(b.max_entry, c.max(1.0));
        assert!(p
            .heads
            .iter()
            .all(|h| h.q.nonzeros() == 2 && h.q.max_abs() == c));
        assert_eq!(p.heads[1].w[(4, 4)], 1.0);
        assert_eq!(p.skip.as_slice().iter().sum::<f64>(), 3.0);
        assert!(build_recall_params(2, 1, 3, 0.0).is_err());
    }

    #[test]
    fn star_density_closed_form() {
        assert_relative_eq!(
            recall_star_density(2, 100f64.ln()),
            200.0 / 101.0,
            max_relative = 1e-14
        );
        let c = recall_temperature(2, 1e-4).unwrap();
        assert_relative_eq!(c * c, (8.0f64 / 1e-4).ln(), max_relative = 1e-14);
        assert!(recall_temperature(1, 2.0).is_err());
    }

    #[test]
    fn composition_examples() {
        let mu = measure();
        let id = || PointMap::new(2, 2, <[f64]>::to_vec);
        let both = compose(id(), id()).unwrap();
        assert_eq!(both.apply(&mu, &[0.1, 0.2]).unwrap(), vec![0.1, 0.2]);

        // projection then mean: mean of the projected measure.
        let proj = PointMap::new(2, 1, |x: &[f64]| vec![x[1]]);
        let g = compose(MeanMap { dim: 1 }, proj).unwrap();
        let manual: f64 = mu.iter().map(|(y, w)| w * y[1]).sum();
        assert_relative_eq!(
            g.apply(&mu, &[0.0, 0.0]).unwrap()[0],
            manual,
            max_relative = 1e-15
        );

        assert!(compose(
            MeanMap { dim: 3 },
            PointMap::new(2, 1, |x: &[f64]| vec![x[0]])
        )
        .is_err());

        // MLP ⋄ Attn and Attn ⋄ MLP unrolled by hand.
        let attn = AttnParams::new(vec![head(0.2)], Matrix::identity(2)).unwrap();
        let mlp = |x: &[f64]| vec![x[0].tanh(), (x[0] - x[1]).max(0.0)];
        let x = [0.3, -0.2];
        let g = compose(attn.clone(), PointMap::new(2, 2, mlp)).unwrap();
        let pushed = mu.pushforward(mlp);
        let want = measure_attention(&attn, &pushed, &mlp(&x)).unwrap();
        assert_eq!(g.apply(&mu, &x).unwrap(), want);

        let g = compose(attn.clone(), attn.clone()).unwrap();
        let first = |y: &[f64]| measure_attention(&attn, &mu, y).unwrap();
        let mu1 = mu.pushforward(first);
        let want = measure_attention(&attn, &mu1, &first(&x)).unwrap();
        assert_eq!(g.apply(&mu, &x).unwrap(), want);
    }

    #[test]
    fn probe_examples() {
        let mu = DiscreteMeasure::on_grid(&[0.1, 0.4], &[0.5, 0.5]).unwrap();
        let p = AttnParams::new(
            vec![HeadParams {
                w: Matrix::identity(1),
                q: Matrix::identity(1),
                k: Matrix::identity(1),
                v: Matrix::identity(1),
            }],
            Matrix::identity(1),
        )
        .unwrap();
        let same = lipschitz_probe(&p, &mu, &mu, &[0.2], &[0.2], 5).unwrap();
        assert_eq!(same.skipped, 5);
        assert!(!same.violated);

        let nu = DiscreteMeasure::on_grid(&[0.3, 0.9], &[0.25, 0.75]).unwrap();
        let zero = AttnParams::zeros(1, 1);
        let r = lipschitz_probe(&zero, &mu, &nu, &[0.2], &[0.5], 3).unwrap();
        assert_eq!(r.max_ratio, 0.0);
        assert!(!r.violated);

        let r = lipschitz_probe(&p, &mu, &nu, &[0.2], &[0.5], 1).unwrap();
        assert!(r.max_ratio > 0.0 && !r.violated, "{r:?}");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            scores in proptest::collection::vec(-30.0f64..30.0, 1..10),
            shift in -100.0f64..100.0,
        ) {
            let n = scores.len();
            let p = vec![1.0 / n as f64; n];
            let a = tilt(&scores, &p);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = tilt(&shifted, &p);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn attention_is_permutation_invariant(perm_seed in any::<u64>(), x0 in -1.0f64..1.0, x1 in -1.0f64..1.0) {
            use rand::seq::SliceRandom;
            let mu = measure();
            let mut idx: Vec<usize> = (0..mu.len()).collect();
            idx.shuffle(&mut rng::stream(perm_seed, &[]));
            let permuted = DiscreteMeasure::new(
                idx.iter().map(|&i| mu.support()[i].clone()).collect(),
                idx.iter().map(|&i| mu.weights()[i]).collect(),
            ).unwrap();
            let p = AttnParams::new(vec![head(0.3), head(-0.2)], Matrix::identity(2)).unwrap();
            let a = measure_attention(&p, &mu, &[x0, x1]).unwrap();
            let b = measure_attention(&p, &permuted, &[x0, x1]).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-13);
            }
        }
    }
}
