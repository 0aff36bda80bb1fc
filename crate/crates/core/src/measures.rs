//! Finite discrete measures on `ℝ^d` and tagged mixture contexts.
//!
//! Tokens are laid out tag first: a point of a mixture over `ℝ^{d₁+d₂}` is
//! `(v, z)` with the tag `v ∈ ℝ^{d₁}` followed by the content `z ∈ ℝ^{d₂}`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const MASS_TOL: f64 = 1e-9;
const SEPARATION_TOL: f64 = 1e-12;

/// Weighted finite support. Weights sum to one unless the measure was built
/// with [`DiscreteMeasure::unnormalized`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    support: Vec<Vec<f64>>,
    weights: Vec<f64>,
    #[serde(skip)]
    unnormalized: bool,
}

impl DiscreteMeasure {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = Self::unnormalized(support, weights)?;
        let total = m.total_mass();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(DiscreteMeasure {
            unnormalized: false,
            ..m
        })
    }

    pub fn unnormalized(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        if support.len() != weights.len() {
            return Err(Error::dims(support.len(), weights.len()));
        }
        let d = support[0].len();
        if let Some(bad) = support.iter().find(|p| p.len() != d) {
            return Err(Error::dims(d, bad.len()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(DiscreteMeasure {
            support,
            weights,
            unnormalized: true,
        })
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        DiscreteMeasure {
            support: vec![point],
            weights: vec![1.0],
            unnormalized: false,
        }
    }

    /// Uniform weights over the given points (an empirical measure).
    pub fn empirical(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    /// Measure on `ℝ¹` with mass `pmf[t]` at `grid[t]`.
    pub fn on_grid(grid: &[f64], pmf: &[f64]) -> Result<Self> {
        Self::new(grid.iter().map(|&x| vec![x]).collect(), pmf.to_vec())
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn is_normalized(&self) -> bool {
        !self.unnormalized
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.support
            .iter()
            .map(Vec::as_slice)
            .zip(self.weights.iter().copied())
    }

    /// `∫ f dμ` for a vector-valued `f`.
    pub fn integrate<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut acc: Vec<f64> = Vec::new();
        for (y, w) in self.iter() {
            let v = f(y);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            for (a, b) in acc.iter_mut().zip(v) {
                *a += w * b;
            }
        }
        acc
    }

    pub fn mean(&self) -> Vec<f64> {
        self.integrate(<[f64]>::to_vec)
    }

    /// `f_♯ μ`: maps every support point, keeps its weight. Images that
    /// coincide are not merged.
    pub fn pushforward<F>(&self, f: F) -> DiscreteMeasure
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        self.try_pushforward(f)
            .expect("pushforward map changed output dimension")
    }

    pub fn try_pushforward<F>(&self, mut f: F) -> Result<DiscreteMeasure>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let support: Vec<Vec<f64>> = self.support.iter().map(|y| f(y)).collect();
        let d = support[0].len();
        if let Some(bad) = support.iter().find(|p| p.len() != d) {
            return Err(Error::dims(d, bad.len()));
        }
        Ok(DiscreteMeasure {
            support,
            weights: self.weights.clone(),
            unnormalized: self.unnormalized,
        })
    }

    /// `δ_v ⊗ μ`: every point `z` becomes `(v, z)`.
    pub fn product_embed(&self, v: &[f64]) -> DiscreteMeasure {
        self.pushforward(|z| embed(v, z))
    }
}

fn embed(v: &[f64], z: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(v.len() + z.len());
    p.extend_from_slice(v);
    p.extend_from_slice(z);
    p
}

/// `ν = Σ_i π_i δ_{v_i} ⊗ μ_i` with pairwise separated tags and a marked
/// component `i⋆`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureContext {
    components: Vec<DiscreteMeasure>,
    tags: Vec<Vec<f64>>,
    mix_weights: Vec<f64>,
    star_index: usize,
}

impl MixtureContext {
    /// Equal-weight mixture plus the query `(v_{i⋆}, 0_{d₂})`.
    pub fn build(
        components: Vec<DiscreteMeasure>,
        tags: Vec<Vec<f64>>,
        star_index: usize,
    ) -> Result<(Self, Vec<f64>)> {
        let i = components.len();
        Self::with_weights(components, tags, vec![1.0 / i.max(1) as f64; i], star_index)
    }

    pub fn with_weights(
        components: Vec<DiscreteMeasure>,
        tags: Vec<Vec<f64>>,
        mix_weights: Vec<f64>,
        star_index: usize,
    ) -> Result<(Self, Vec<f64>)> {
        if components.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs at least one component".into(),
            ));
        }
        if tags.len() != components.len() {
            return Err(Error::dims(components.len(), tags.len()));
        }
        if mix_weights.len() != components.len() {
            return Err(Error::dims(components.len(), mix_weights.len()));
        }
        if star_index >= components.len() {
            return Err(Error::InvalidArgument(format!(
                "star index {star_index} out of range for {} components",
                components.len()
            )));
        }
        let d1 = tags[0].len();
        if let Some(bad) = tags.iter().find(|t| t.len() != d1) {
            return Err(Error::dims(d1, bad.len()));
        }
        let d2 = components[0].dim();
        if let Some(bad) = components.iter().find(|c| c.dim() != d2) {
            return Err(Error::dims(d2, bad.dim()));
        }
        if let Some(bad) = components.iter().find(|c| !c.is_normalized()) {
            return Err(Error::InvalidArgument(format!(
                "mixture components must be probability measures (mass {})",
                bad.total_mass()
            )));
        }
        if mix_weights.iter().any(|w| !(*w >= 0.0))
            || (mix_weights.iter().sum::<f64>() - 1.0).abs() > MASS_TOL
        {
            return Err(Error::InvalidArgument(
                "mixture weights must be a probability vector".into(),
            ));
        }
        for a in 0..tags.len() {
            for b in (a + 1)..tags.len() {
                let inner: f64 = tags[a].iter().zip(&tags[b]).map(|(x, y)| x * y).sum();
                if inner > SEPARATION_TOL {
                    return Err(Error::TagsNotSeparated { i: a, j: b, inner });
                }
            }
        }
        let mut query = tags[star_index].clone();
        query.resize(d1 + d2, 0.0);
        Ok((
            MixtureContext {
                components,
                tags,
                mix_weights,
                star_index,
            },
            query,
        ))
    }

    pub fn components(&self) -> &[DiscreteMeasure] {
        &self.components
    }

    pub fn tags(&self) -> &[Vec<f64>] {
        &self.tags
    }

    pub fn mix_weights(&self) -> &[f64] {
        &self.mix_weights
    }

    pub fn star_index(&self) -> usize {
        self.star_index
    }

    pub fn tag_dim(&self) -> usize {
        self.tags[0].len()
    }

    pub fn content_dim(&self) -> usize {
        self.components[0].dim()
    }

    /// The mixture as a single measure over `ℝ^{d₁+d₂}`, components in order.
    pub fn flatten(&self) -> DiscreteMeasure {
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for ((mu, tag), pi) in self
            .components
            .iter()
            .zip(&self.tags)
            .zip(&self.mix_weights)
        {
            for (z, w) in mu.iter() {
                support.push(embed(tag, z));
                weights.push(pi * w);
            }
        }
        DiscreteMeasure {
            support,
            weights,
            unnormalized: false,
        }
    }

    /// Draws `(component, support index)` pairs: a component with probability
    /// `π_i`, then a support point of that component.
    pub fn sample_indices(&self, n_tokens: usize, rng: &mut rng::Rng) -> Vec<(usize, usize)> {
        let pick = WeightedIndex::new(&self.mix_weights).expect("validated mixture weights");
        let within: Vec<WeightedIndex<f64>> = self
            .components
            .iter()
            .map(|c| WeightedIndex::new(c.weights()).expect("validated component weights"))
            .collect();
        (0..n_tokens)
            .map(|_| {
                let i = pick.sample(rng);
                (i, within[i].sample(rng))
            })
            .collect()
    }

    /// `n_tokens` i.i.d. points `(v_i, z)` from the mixture, determined by `seed`.
    pub fn sample_tokens(&self, n_tokens: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n_tokens == 0 {
            return Err(Error::InvalidArgument("n_tokens must be positive".into()));
        }
        let mut rng = rng::stream(seed, &[rng::label("sample_tokens")]);
        Ok(self
            .sample_indices(n_tokens, &mut rng)
            .into_iter()
            .map(|(i, t)| embed(&self.tags[i], &self.components[i].support()[t]))
            .collect())
    }
}

/// Pairwise orthonormal tags `e_1, ..., e_I` in `ℝ^I`.
pub fn orthonormal_tags(count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut v = vec![0.0; count];
            v[i] = 1.0;
            v
        })
        .collect()
}

/// The one-dimensional `{+1, -1}` tag pair.
pub fn signed_tags() -> Vec<Vec<f64>> {
    vec![vec![1.0], vec![-1.0]]
}

/// Index of the single coordinate along which the supports vary, `None` if
/// every point of both measures coincides.
fn varying_coordinate(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Option<usize>> {
    if mu.dim() != nu.dim() {
        return Err(Error::dims(mu.dim(), nu.dim()));
    }
    let reference = &mu.support()[0];
    let mut varying = None;
    for k in 0..mu.dim() {
        let moves = mu
            .support()
            .iter()
            .chain(nu.support())
            .any(|p| p[k] != reference[k]);
        if moves {
            if varying.is_some() {
                return Err(Error::Unsupported(
                    "W1 closed form needs supports varying in a single coordinate".into(),
                ));
            }
            varying = Some(k);
        }
    }
    Ok(varying)
}

/// `W₁(μ, ν) = ∫ |F_μ - F_ν|` for measures on a line.
pub fn wasserstein1_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    let Some(k) = varying_coordinate(mu, nu)? else {
        return Ok(0.0);
    };
    // Signed mass events: +w for μ, -w for ν, swept in coordinate order.
    let mut events: Vec<(f64, f64)> = mu
        .iter()
        .map(|(p, w)| (p[k], w))
        .chain(nu.iter().map(|(p, w)| (p[k], -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        cdf_gap += pair[0].1;
        total += cdf_gap.abs() * (pair[1].0 - pair[0].0);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn construction_validates() {
        assert!(matches!(
            DiscreteMeasure::new(vec![], vec![]),
            Err(Error::EmptySupport)
        ));
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(DiscreteMeasure::new(vec![vec![0.0]], vec![0.5]).is_err());
        let m = DiscreteMeasure::unnormalized(vec![vec![0.0]], vec![0.5]).unwrap();
        assert!(!m.is_normalized());
        assert!(DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn pushforward_examples() {
        let mu =
            DiscreteMeasure::new(vec![vec![0.1, 0.2], vec![0.7, -1.0]], vec![0.25, 0.75]).unwrap();
        assert_eq!(mu.pushforward(<[f64]>::to_vec), mu);
        let f = |p: &[f64]| vec![p[0] * p[1], p[0] + 1.0];
        let pushed = mu.pushforward(f);
        assert_eq!(pushed.weights(), mu.weights());
        let mean = pushed.mean();
        let oracle = [0.25 * (0.1 * 0.2) + 0.75 * -0.7, 0.25 * 1.1 + 0.75 * 1.7];
        assert_relative_eq!(mean[0], oracle[0], max_relative = 1e-15);
        assert_relative_eq!(mean[1], oracle[1], max_relative = 1e-15);
        // Colliding images stay as separate atoms.
        let collapsed = mu.pushforward(|_| vec![0.0]);
        assert_eq!(collapsed.len(), 2);
        assert_relative_eq!(collapsed.total_mass(), 1.0);
    }

    #[test]
    fn product_embed_examples() {
        let m = DiscreteMeasure::dirac(vec![0.0]).product_embed(&[1.0, 0.0]);
        assert_eq!(m.support(), &[vec![1.0, 0.0, 0.0]]);
        assert_eq!(m.weights(), &[1.0]);
        let mu = DiscreteMeasure::on_grid(&[0.1, 0.5, 0.9], &[0.2, 0.3, 0.5]).unwrap();
        let e = mu.product_embed(&[0.0, 1.0]);
        assert_eq!(e.weights(), mu.weights());
        assert!(e.support().iter().all(|p| p[..2] == [0.0, 1.0]));
    }

    #[test]
    fn build_mixture_examples() {
        let comps = vec![
            DiscreteMeasure::on_grid(&[0.25, 0.75], &[0.5, 0.5]).unwrap(),
            DiscreteMeasure::on_grid(&[0.25, 0.75], &[0.1, 0.9]).unwrap(),
        ];
        let (ctx, q) = MixtureContext::build(comps.clone(), signed_tags(), 0).unwrap();
        assert_eq!(q, vec![1.0, 0.0]);
        assert_eq!(ctx.mix_weights(), &[0.5, 0.5]);
        assert_relative_eq!(ctx.flatten().total_mass(), 1.0, max_relative = 1e-15);

        let (single, q1) =
            MixtureContext::build(vec![comps[1].clone()], vec![vec![0.0, 1.0]], 0).unwrap();
        assert_eq!(q1, vec![0.0, 1.0, 0.0]);
        assert_eq!(single.flatten(), comps[1].product_embed(&[0.0, 1.0]));

        let bad = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
        assert!(matches!(
            MixtureContext::build(comps.clone(), bad, 0),
            Err(Error::TagsNotSeparated { .. })
        ));
        assert!(MixtureContext::build(comps, orthonormal_tags(2), 2).is_err());
    }

    #[test]
    fn conditioning_flattened_mixture_recovers_components() {
        let comps = vec![
            DiscreteMeasure::on_grid(&[0.1, 0.2, 0.3], &[0.2, 0.3, 0.5]).unwrap(),
            DiscreteMeasure::on_grid(&[0.4, 0.6], &[0.125, 0.875]).unwrap(),
            DiscreteMeasure::on_grid(&[0.9], &[1.0]).unwrap(),
        ];
        let tags = orthonormal_tags(3);
        let (ctx, _) = MixtureContext::build(comps.clone(), tags.clone(), 1).unwrap();
        let flat = ctx.flatten();
        for (i, tag) in tags.iter().enumerate() {
            let (w, pts): (Vec<f64>, Vec<Vec<f64>>) = flat
                .iter()
                .filter(|(p, _)| p[..3] == tag[..])
                .map(|(p, w)| (w * 3.0, p[3..].to_vec()))
                .unzip();
            for (a, b) in w.iter().zip(comps[i].weights()) {
                assert!((a - b).abs() < 1e-15);
            }
            assert_eq!(pts, comps[i].support());
        }
    }

    #[test]
    fn sampling_is_seeded_and_balanced() {
        let comps = vec![
            DiscreteMeasure::dirac(vec![0.5]),
            DiscreteMeasure::dirac(vec![0.5]),
        ];
        let (ctx, _) = MixtureContext::build(comps, signed_tags(), 0).unwrap();
        let a = ctx.sample_tokens(10_000, 11).unwrap();
        assert_eq!(a, ctx.sample_tokens(10_000, 11).unwrap());
        assert_ne!(a, ctx.sample_tokens(10_000, 12).unwrap());
        let plus = a.iter().filter(|p| p[0] == 1.0).count() as f64 / 1e4;
        // Binomial(1e4, 1/2): 3σ = 0.015.
        assert!((0.47..=0.53).contains(&plus), "fraction {plus}");

        let (one, _) = MixtureContext::build(
            vec![DiscreteMeasure::dirac(vec![0.3, 0.4])],
            vec![vec![1.0]],
            0,
        )
        .unwrap();
        assert!(one
            .sample_tokens(50, 3)
            .unwrap()
            .iter()
            .all(|p| *p == vec![1.0, 0.3, 0.4]));
        assert!(one.sample_tokens(0, 3).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let d0 = DiscreteMeasure::dirac(vec![0.0]);
        let d1 = DiscreteMeasure::dirac(vec![1.0]);
        assert_relative_eq!(wasserstein1_1d(&d0, &d1).unwrap(), 1.0);
        assert_eq!(wasserstein1_1d(&d0, &d0).unwrap(), 0.0);

        // 2x1 support: the only coupling sends both halves to 0.5.
        let mu = DiscreteMeasure::on_grid(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        let nu = DiscreteMeasure::dirac(vec![0.5]);
        let plan_cost = 0.5 * (0.0f64 - 0.5).abs() + 0.5 * (1.0f64 - 0.5).abs();
        assert_relative_eq!(
            wasserstein1_1d(&mu, &nu).unwrap(),
            plan_cost,
            max_relative = 1e-15
        );

        // Embedded in a higher dimension with constant extra coordinates.
        let a = DiscreteMeasure::dirac(vec![2.0, 0.0, 5.0]);
        let b = DiscreteMeasure::dirac(vec![2.0, 0.75, 5.0]);
        assert_relative_eq!(wasserstein1_1d(&a, &b).unwrap(), 0.75);
        let c = DiscreteMeasure::dirac(vec![2.5, 0.75, 5.0]);
        assert!(matches!(
            wasserstein1_1d(&a, &c),
            Err(Error::Unsupported(_))
        ));
    }

    fn line_measure() -> impl Strategy<Value = DiscreteMeasure> {
        proptest::collection::vec((-3.0f64..3.0, 0.01f64..1.0), 1..6).prop_map(|pts| {
            let total: f64 = pts.iter().map(|p| p.1).sum();
            let (s, w): (Vec<_>, Vec<_>) =
                pts.into_iter().map(|(x, w)| (vec![x], w / total)).unzip();
            DiscreteMeasure::unnormalized(s, w).unwrap()
        })
    }

    proptest! {
        #[test]
        fn w1_is_a_metric(a in line_measure(), b in line_measure(), c in line_measure()) {
            let ab = wasserstein1_1d(&a, &b).unwrap();
            let ba = wasserstein1_1d(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(wasserstein1_1d(&a, &a).unwrap().abs() < 1e-12);
            let ac = wasserstein1_1d(&a, &c).unwrap();
            let cb = wasserstein1_1d(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn pushforward_preserves_mass(m in line_measure(), k in -2.0f64..2.0) {
            let p = m.pushforward(|x| vec![k * x[0], x[0] * x[0]]);
            prop_assert_eq!(p.total_mass(), m.total_mass());
        }
    }
}
