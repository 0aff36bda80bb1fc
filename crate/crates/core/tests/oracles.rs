use approx::assert_relative_eq;
use measure_attn::attention::{build_recall_params, measure_attention, recall_temperature};
use measure_attn::experiment::target_functional;
use measure_attn::measures::{orthonormal_tags, wasserstein1_1d};
use measure_attn::model::Activation;
use measure_attn::rng;
use measure_attn::{
    DiscreteMeasure, MercerSpectrum, MixtureContext, StudentConfig, StudentModel, WeightedTokens,
};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn smooth_model(seed: u64) -> StudentModel {
    let cfg = StudentConfig {
        activation: Activation::Tanh,
        ..StudentConfig::default()
    };
    let mut m = StudentModel::init(cfg, seed).unwrap();
    let mut r = rng::stream(seed, &[7]);
    for p in m.params_mut() {
        *p += r.random_range(-0.1..0.1);
    }
    m
}

fn loss(m: &StudentModel, ctx: &WeightedTokens, q: &[f64], y: f64) -> f64 {
    let p = m.predict(ctx, q).unwrap();
    0.5 * (p - y) * (p - y)
}

fn analytic(m: &StudentModel, ctx: &WeightedTokens, q: &[f64], y: f64) -> Vec<f64> {
    let (p, cache) = m.forward(ctx, q).unwrap();
    let mut g = vec![0.0; m.n_params()];
    m.backward_accumulate(&cache, p - y, &mut g).unwrap();
    g
}

fn central_difference(m: &StudentModel, ctx: &WeightedTokens, q: &[f64], y: f64, i: usize) -> f64 {
    let h = 1e-5;
    let mut plus = m.clone();
    plus.params_mut()[i] += h;
    let mut minus = m.clone();
    minus.params_mut()[i] -= h;
    (loss(&plus, ctx, q, y) - loss(&minus, ctx, q, y)) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_tokens(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[11]);
    (0..n)
        .map(|_| {
            vec![
                if r.random_bool(0.5) { 1.0 } else { -1.0 },
                r.random::<f64>(),
            ]
        })
        .collect()
}

#[test]
fn weighted_context_gradient_matches_finite_differences() {
    let m = smooth_model(3);
    let toks = random_tokens(3, 3);
    let ctx = WeightedTokens::new(2, toks.concat(), vec![3.0, 1.0, 2.0]).unwrap();
    let (q, y) = ([1.0, 0.0], 0.4);
    let g = analytic(&m, &ctx, &q, y);
    let mut worst: f64 = 0.0;
    for (i, &gi) in g.iter().enumerate() {
        worst = worst.max(rel_err(gi, central_difference(&m, &ctx, &q, y, i)));
    }
    assert!(worst <= 1e-4, "{worst:e}");
}

#[test]
fn duplicated_context_has_the_same_gradient() {
    let m = smooth_model(5);
    let toks = random_tokens(5, 6);
    let once = WeightedTokens::from_tokens(&toks).unwrap();
    let twice_tokens: Vec<f64> = toks.iter().chain(&toks).flatten().copied().collect();
    let twice = WeightedTokens::new(2, twice_tokens, vec![1.0; 12]).unwrap();
    let (q, y) = ([-1.0, 0.0], -0.3);

    assert_relative_eq!(
        m.predict(&once, &q).unwrap(),
        m.predict(&twice, &q).unwrap(),
        max_relative = 1e-12
    );
    let (g1, g2) = (analytic(&m, &once, &q, y), analytic(&m, &twice, &q, y));
    let mut r = rng::stream(5, &[13]);
    for _ in 0..40 {
        let i = r.random_range(0..m.n_params());
        assert!(
            (g1[i] - g2[i]).abs() <= 1e-12 * g1[i].abs().max(1.0),
            "coord {i}"
        );
        let (f1, f2) = (
            central_difference(&m, &once, &q, y, i),
            central_difference(&m, &twice, &q, y, i),
        );
        assert!(
            rel_err(g1[i], f1) <= 1e-4 && rel_err(g2[i], f2) <= 1e-4,
            "coord {i}"
        );
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let m = smooth_model(1);
    let ctx = WeightedTokens::from_tokens(&random_tokens(1, 4)).unwrap();
    let (_, cache) = m.forward(&ctx, &[1.0, 0.0]).unwrap();
    let mut g = vec![0.0; m.n_params()];
    m.backward_accumulate(&cache, 0.0, &mut g).unwrap();
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn target_mean_matches_eigenvalue_sum() {
    let draws = 100_000;
    for alpha in [0.5, 1.0, 2.0] {
        let s = MercerSpectrum::new(alpha, 1.0, 16, 64).unwrap();
        let lambdas = &s.eigenvalues()[1..];
        let mean: f64 = lambdas.iter().sum();
        // Var(Σ λ_j Z_j²) = 2 Σ λ_j² for standard normal Z_j.
        let sigma = (2.0 * lambdas.iter().map(|l| l * l).sum::<f64>() / draws as f64).sqrt();
        let mut r = rng::stream(17, &[alpha.to_bits()]);
        let mut total = 0.0;
        for _ in 0..draws {
            let mut z = vec![0.0; 16];
            for zj in &mut z[1..] {
                *zj = r.sample(StandardNormal);
            }
            total += target_functional(&s, &z, 1.0);
        }
        let got = total / draws as f64;
        assert!(
            (got - mean).abs() <= 3.0 * sigma,
            "alpha {alpha}: {got} vs {mean} ± {sigma}"
        );
    }
}

#[test]
fn split_mass_to_midpoint_costs_half() {
    // A single target point admits exactly one transport plan.
    let mu = DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
    let nu = DiscreteMeasure::dirac(vec![0.5]);
    let plan_cost: f64 = mu.iter().map(|(x, w)| w * (x[0] - 0.5).abs()).sum();
    assert_eq!(plan_cost, 0.5);
    assert_relative_eq!(
        wasserstein1_1d(&mu, &nu).unwrap(),
        plan_cost,
        max_relative = 1e-15
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Equal-weight measures with the same number of atoms: the optimal plan
    // matches sorted points.
    #[test]
    fn w1_matches_sorted_matching(mut xs in prop::collection::vec(-5.0f64..5.0, 1..12), seed in 0u64..1000) {
        let mut r = rng::stream(seed, &[19]);
        let mut ys: Vec<f64> = xs.iter().map(|_| r.random_range(-5.0..5.0)).collect();
        let mu = DiscreteMeasure::empirical(xs.iter().map(|&x| vec![x]).collect()).unwrap();
        let nu = DiscreteMeasure::empirical(ys.iter().map(|&y| vec![y]).collect()).unwrap();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let want = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum::<f64>() / xs.len() as f64;
        let got = wasserstein1_1d(&mu, &nu).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{} vs {}", got, want);
        prop_assert!((wasserstein1_1d(&nu, &mu).unwrap() - got).abs() <= 1e-12);
    }
}

/// Recall output against a hand-computed softmax over the flattened mixture
/// and against the star component's feature averages.
fn recall_errors(components: usize, c_squared: f64, seed: u64) -> (f64, f64, f64) {
    let features = 6;
    let s = MercerSpectrum::new(1.0, 1.0, 12, 24).unwrap();
    let mut r = rng::stream(seed, &[23]);
    let dens: Vec<DiscreteMeasure> = (0..components)
        .map(|_| {
            let mut z = vec![0.0; 12];
            for zj in &mut z[1..] {
                *zj = r.sample(StandardNormal);
            }
            DiscreteMeasure::on_grid(s.grid(), &s.synth_density(&z, 1e-3).unwrap()).unwrap()
        })
        .collect();
    let star = r.random_range(0..components);
    let (mixture, query) =
        MixtureContext::build(dens.clone(), orthonormal_tags(components), star).unwrap();
    let e =
        |h: usize, z: f64| std::f64::consts::SQRT_2 * (std::f64::consts::PI * h as f64 * z).sin();
    let tokens = mixture.flatten().pushforward(|y| {
        let mut out = y.to_vec();
        out.extend((1..=features).map(|h| e(h, y[components])));
        out
    });
    let mut x = query;
    x.resize(components + 1 + features, 0.0);
    let params = build_recall_params(components, 1, features, c_squared.sqrt()).unwrap();
    let out = measure_attention(&params, &tokens, &x).unwrap();

    let mut max_e: f64 = 0.0;
    let (mut against_softmax, mut against_star): (f64, f64) = (0.0, 0.0);
    for h in 1..=features {
        // Scores are c² on the star tag and 0 elsewhere.
        let (mut num, mut den) = (0.0, 0.0);
        for (i, d) in dens.iter().enumerate() {
            let k = if i == star { c_squared.exp() } else { 1.0 } / components as f64;
            for (pt, w) in d.iter() {
                num += k * w * e(h, pt[0]);
                den += k * w;
                max_e = max_e.max(e(h, pt[0]).abs());
            }
        }
        let star_mean: f64 = dens[star].iter().map(|(pt, w)| w * e(h, pt[0])).sum();
        let got = out[components + 1 + h - 1];
        against_softmax = against_softmax.max((got - num / den).abs());
        against_star = against_star.max((got - star_mean).abs());
    }
    (against_softmax, against_star, max_e)
}

#[test]
fn recall_output_matches_star_component() {
    for components in [2usize, 3, 4] {
        let c = recall_temperature(components, 1e-4).unwrap();
        for seed in 0..4 {
            let (softmax, star, max_e) = recall_errors(components, c * c, seed);
            assert!(softmax <= 1e-12, "I={components} seed {seed}: {softmax:e}");
            let budget = components as f64 * (-c * c).exp() * max_e;
            assert!(
                star <= budget,
                "I={components} seed {seed}: {star:e} > {budget:e}"
            );
        }
    }
}

#[test]
fn recall_error_shrinks_with_temperature() {
    let errs: Vec<f64> = [1.0, 3.0, 6.0, 12.0]
        .iter()
        .map(|&c2| recall_errors(3, c2, 9).1)
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}
