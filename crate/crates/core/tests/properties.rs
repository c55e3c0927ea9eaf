use cvar_idr::alternate::{alpha_update, classify_step, AltRule, ExhaustiveThreshold, WeightedClassificationProblem};
use cvar_idr::criteria::{evaluate_m0, evaluate_quantile, evaluate_value, RulePredictions};
use cvar_idr::data::{load_csv, Action, CsvSchema, PropensitySource, RandomSource, TrialDataset};
use cvar_idr::dca::{all_knot_objectives, objective_gj, KnotCoefficients, Target};
use cvar_idr::model::{DecisionFunction, Penalty, Rule};
use cvar_idr::pls::{kkt_violation, pls_fit, PlsOptions};
use cvar_idr::simlab::{ScenarioId, ScenarioSpec};
use cvar_idr::surrogate::SurrogateParams;
use proptest::prelude::*;

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![Just(Action::Plus), Just(Action::Minus)]
}

/// Data on one dummy covariate with the given outcomes, actions, propensities.
fn dataset(outcomes: Vec<f64>, actions: Vec<Action>, props: Vec<f64>) -> TrialDataset {
    let n = outcomes.len();
    TrialDataset::new(1, vec![0.0; n], actions, outcomes, props, 0.0).unwrap()
}

fn outcomes(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    // a mix of tied integers and continuous values
    prop::collection::vec(prop_oneof![(-3i32..=3).prop_map(f64::from), -5.0f64..5.0], n)
}

/// `max_α` of the matched-weighted CVaR objective on a step-1e-4 grid over
/// `[min R − 1, max R + 1]`, then refined by ternary search.
fn grid_m0(data: &TrialDataset, d: &[Action], gamma: f64) -> f64 {
    let n = data.len() as f64;
    let h = |a: f64| -> f64 {
        (0..data.len())
            .filter(|&i| data.actions()[i] == d[i])
            .map(|i| (a - (a - data.outcomes()[i]).max(0.0) / gamma) / data.propensities()[i])
            .sum::<f64>()
            / n
    };
    let lo = data.outcomes().iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = data.outcomes().iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let steps = ((hi - lo) / 1e-4).ceil() as usize;
    let at = |k: usize| lo + (hi - lo) * k as f64 / steps as f64;
    let mut best_k = 0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..=steps {
        let v = h(at(k));
        if v > best {
            best = v;
            best_k = k;
        }
    }
    let (mut a, mut b) = (at(best_k.saturating_sub(1)), at((best_k + 1).min(steps)));
    for _ in 0..100 {
        let (m1, m2) = (a + (b - a) / 3.0, b - (b - a) / 3.0);
        if h(m1) < h(m2) {
            a = m1;
        } else {
            b = m2;
        }
    }
    best.max(h(0.5 * (a + b)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn m0_is_translation_equivariant_and_homogeneous(r in outcomes(1..=30), c in -10.0f64..10.0, k in 0.01f64..10.0, gamma in 0.05f64..=1.0) {
        let n = r.len();
        let data = dataset(r.clone(), vec![Action::Plus; n], vec![1.0; n]);
        let d = RulePredictions::constant(Action::Plus, n);
        let base = evaluate_m0(&data, &d, gamma).unwrap().value;
        let shifted = evaluate_m0(&data.with_outcomes(r.iter().map(|x| x + c).collect()).unwrap(), &d, gamma).unwrap().value;
        let scaled = evaluate_m0(&data.with_outcomes(r.iter().map(|x| x * k).collect()).unwrap(), &d, gamma).unwrap().value;
        let tol = 1e-9 * (1.0 + base.abs() + c.abs() + k * base.abs());
        prop_assert!((shifted - base - c).abs() <= tol);
        prop_assert!((scaled - k * base).abs() <= tol);
    }

    #[test]
    fn m0_is_monotone_in_outcomes(
        rows in prop::collection::vec((-5.0f64..5.0, action(), action(), 0.05f64..0.95, 0.0f64..3.0), 1..30),
        gamma in 0.05f64..=1.0,
    ) {
        let r: Vec<f64> = rows.iter().map(|t| t.0).collect();
        let a: Vec<Action> = rows.iter().map(|t| t.1).collect();
        let mut d: Vec<Action> = rows.iter().map(|t| t.2).collect();
        d[0] = a[0];
        let p: Vec<f64> = rows.iter().map(|t| t.3).collect();
        let data = dataset(r.clone(), a, p);
        let raised = data.with_outcomes(r.iter().zip(&rows).map(|(x, t)| x + t.4).collect()).unwrap();
        let d = RulePredictions(d);
        prop_assert!(evaluate_m0(&raised, &d, gamma).unwrap().value >= evaluate_m0(&data, &d, gamma).unwrap().value - 1e-12);
    }

    #[test]
    fn m0_is_dominated_by_value_and_quantile(r in outcomes(1..=30), gamma in 0.05f64..0.95) {
        // π ≡ 1 with every record matched: the normalized setting
        let n = r.len();
        let data = dataset(r, vec![Action::Minus; n], vec![1.0; n]);
        let d = RulePredictions::constant(Action::Minus, n);
        let m0 = evaluate_m0(&data, &d, gamma).unwrap().value;
        prop_assert!(m0 <= evaluate_value(&data, &d).unwrap().value + 1e-12);
        prop_assert!(m0 <= evaluate_quantile(&data, &d, gamma).unwrap().value + 1e-12);
    }

    #[test]
    fn knot_search_matches_a_dense_alpha_grid(
        rows in prop::collection::vec((prop_oneof![(-3i32..=3).prop_map(f64::from), -3.0f64..3.0], action(), action(), 0.1f64..0.9), 1..=50),
        gamma in 0.1f64..=1.0,
    ) {
        let r: Vec<f64> = rows.iter().map(|t| t.0).collect();
        let a: Vec<Action> = rows.iter().map(|t| t.1).collect();
        let mut d: Vec<Action> = rows.iter().map(|t| t.2).collect();
        d[0] = a[0];
        let data = dataset(r, a, rows.iter().map(|t| t.3).collect());
        let knot = evaluate_m0(&data, &RulePredictions(d.clone()), gamma).unwrap().value;
        prop_assert!((knot - grid_m0(&data, &d, gamma)).abs() <= 1e-9);
    }

    #[test]
    fn m0_is_continuous_in_gamma(r in outcomes(2..=30)) {
        let n = r.len();
        let data = dataset(r.clone(), vec![Action::Plus; n], vec![1.0; n]);
        let d = RulePredictions::constant(Action::Plus, n);
        let spread = r.iter().copied().fold(f64::NEG_INFINITY, f64::max) - r.iter().copied().fold(f64::INFINITY, f64::min);
        let jump = |steps: usize| {
            let vals: Vec<f64> = (0..=steps).map(|k| evaluate_m0(&data, &d, 0.2 + 0.8 * k as f64 / steps as f64).unwrap().value).collect();
            vals.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
        };
        // |dM0/dγ| ≤ spread / γ², so the largest jump shrinks with the step
        prop_assert!(jump(400) <= spread / 0.04 * 0.8 / 400.0 + 1e-12);
        prop_assert!(jump(400) <= jump(50) + 1e-12);
    }

    #[test]
    fn surrogate_is_bounded_symmetric_and_split(u in -6.0f64..6.0, delta in 0.05f64..4.0) {
        let s = SurrogateParams::new(delta).unwrap();
        prop_assert!((0.0..=2.0).contains(&s.s(u)));
        prop_assert!((s.s(-u) - (2.0 - s.s(u))).abs() <= 1e-12);
        prop_assert!((s.s1(u) - s.s2(u) - s.s(u)).abs() <= 1e-12);
    }

    #[test]
    fn surrogate_parts_are_convex(a in -5.0f64..5.0, b in -5.0f64..5.0, t in 0.0f64..=1.0, delta in 0.05f64..4.0) {
        let s = SurrogateParams::new(delta).unwrap();
        let m = t * a + (1.0 - t) * b;
        prop_assert!(s.s1(m) <= t * s.s1(a) + (1.0 - t) * s.s1(b) + 1e-12);
        prop_assert!(s.s2(m) <= t * s.s2(a) + (1.0 - t) * s.s2(b) + 1e-12);
    }

    #[test]
    fn surrogate_derivatives_match_finite_differences(u in -4.0f64..4.0, delta in 0.2f64..3.0) {
        let s = SurrogateParams::new(delta).unwrap();
        let h = 1e-5;
        let fd = |f: &dyn Fn(f64) -> f64| (f(u + h) - f(u - h)) / (2.0 * h);
        prop_assert!((fd(&|x| s.s(x)) - s.s_prime(u)).abs() <= 1e-6 * (1.0 + 1.0 / delta));
        prop_assert!((fd(&|x| s.s1(x)) - s.s1_prime(u)).abs() <= 1e-6 * (1.0 + 1.0 / delta));
        prop_assert!((fd(&|x| s.s2(x)) - s.s2_prime(u)).abs() <= 1e-6 * (1.0 + 1.0 / delta));
    }

    #[test]
    fn fast_knot_objectives_match_the_direct_sum(seed in any::<u64>(), n in 1usize..25, gamma in 0.1f64..=1.0, m1 in any::<bool>()) {
        let spec = ScenarioSpec { id: ScenarioId::S3, n, p: 3 };
        let (data, _) = spec.generate(&mut RandomSource::new(seed).rng()).unwrap();
        let target = if m1 { Target::M1 } else { Target::M0 };
        let c = KnotCoefficients::new(&data, gamma, target).unwrap();
        let mut model = DecisionFunction::zeros_linear(3, Penalty::L2, 0.0);
        let mut rng = RandomSource::new(seed).substream(1).rng();
        use rand::Rng;
        model.weights = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        model.intercept = rng.gen_range(-1.0..1.0);
        let s = SurrogateParams::default();
        let fast = all_knot_objectives(&model, &data, &c, s);
        if target == Target::M0 {
            for (j, g) in fast.iter().enumerate() {
                let direct = objective_gj(&model, j, &data, gamma, s).unwrap();
                prop_assert!((g - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
            }
        }
        prop_assert!(fast.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn label_flip_preserves_the_threshold_argmax(
        rows in prop::collection::vec((0i32..4, action(), -2.0f64..2.0), 1..=10),
    ) {
        let problem = WeightedClassificationProblem {
            dim: 1,
            covariates: rows.iter().map(|t| f64::from(t.0)).collect(),
            labels: rows.iter().map(|t| t.1).collect(),
            weights: rows.iter().map(|t| t.2).collect(),
        };
        let (flipped, offset) = problem.flipped();
        let mut rules = vec![AltRule::Constant { action: Action::Plus }, AltRule::Constant { action: Action::Minus }];
        for c in 0..4 {
            for orientation in [Action::Plus, Action::Minus] {
                rules.push(AltRule::Threshold { feature: 0, cut: f64::from(c) + 0.5, orientation });
            }
        }
        let score = |p: &WeightedClassificationProblem, r: &AltRule| {
            let d: Vec<Action> = (0..p.len()).map(|i| r.decide_x(p.x(i))).collect();
            p.agreement(&d)
        };
        let best = rules.iter().map(|r| score(&problem, r)).fold(f64::NEG_INFINITY, f64::max);
        let best_flipped = rules.iter().map(|r| score(&flipped, r)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((best - (best_flipped + offset)).abs() <= 1e-12);
        for r in &rules {
            prop_assert!((score(&problem, r) - (score(&flipped, r) + offset)).abs() <= 1e-12);
        }
        if !problem.is_degenerate() {
            let (d, _) = classify_step(&problem, &ExhaustiveThreshold).unwrap();
            prop_assert!((problem.agreement(d.as_slice()) - best).abs() <= 1e-12);
        }
    }

    #[test]
    fn alpha_update_reproduces_the_m0_alpha(
        rows in prop::collection::vec((-3.0f64..3.0, action(), action(), 0.1f64..0.9), 1..30),
        gamma in 0.1f64..=1.0,
    ) {
        let a: Vec<Action> = rows.iter().map(|t| t.1).collect();
        let mut d: Vec<Action> = rows.iter().map(|t| t.2).collect();
        d[0] = a[0];
        let data = dataset(rows.iter().map(|t| t.0).collect(), a, rows.iter().map(|t| t.3).collect());
        let d = RulePredictions(d);
        prop_assert_eq!(Some(alpha_update(&data, &d, gamma).unwrap()), evaluate_m0(&data, &d, gamma).unwrap().alpha);
    }

    #[test]
    fn potential_outcomes_differ_by_twice_the_contrast(seed in any::<u64>(), which in 0usize..8) {
        let id = [ScenarioId::S1, ScenarioId::S2, ScenarioId::S3, ScenarioId::S4, ScenarioId::S5, ScenarioId::S6, ScenarioId::S7, ScenarioId::S8][which];
        let spec = ScenarioSpec { id, n: 20, p: 4 };
        let pop = spec.draw_population(20, &mut RandomSource::new(seed).rng()).unwrap();
        for i in 0..pop.len() {
            let delta = spec.delta(pop.x(i)).unwrap();
            let gap = pop.potential(i, Action::Plus) - pop.potential(i, Action::Minus);
            prop_assert!((gap - 2.0 * delta).abs() <= 1e-9 * (1.0 + pop.potential(i, Action::Plus).abs()));
        }
    }

    #[test]
    fn written_datasets_reload_bit_exactly(seed in any::<u64>(), n in 1usize..40) {
        let spec = ScenarioSpec { id: ScenarioId::S2, n, p: 3 };
        let (data, _) = spec.generate(&mut RandomSource::new(seed).rng()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        let schema = CsvSchema::new(vec!["x1".into(), "x2".into(), "x3".into()], "a", "r", PropensitySource::Column("propensity".into()));
        let back = load_csv(&path, &schema).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn pls_fits_satisfy_kkt(seed in any::<u64>(), lambda in 0.001f64..1.0) {
        let spec = ScenarioSpec { id: ScenarioId::S1, n: 60, p: 4 };
        let (data, _) = spec.generate(&mut RandomSource::new(seed).rng()).unwrap();
        let model = pls_fit(&data, lambda, &PlsOptions::default()).unwrap();
        prop_assert!(model.converged);
        prop_assert!(kkt_violation(&model, &data) <= 1e-6);
    }
}
