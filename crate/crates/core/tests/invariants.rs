mod common;

use common::curve_fixture;
use proptest::prelude::*;
use survmix::dataio::{simulate_cohort, FeatureDims, PreprocessSpec, SimulationConfig};
use survmix::metrics::{brier_at, censoring_km, ctd_index, kaplan_meier, PredictedCurves};
use survmix::numerics::SeededRng;
use survmix::pipeline::{prepare, PreparedData, DEFAULT_SPLIT};
use survmix::survival::{grid_for, train_head, HeadConfig, ModelConfig, PhaseConfig, SurvivalModel, TrainConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concordance_ignores_monotone_rescaling(seed in any::<u64>(), n in 5usize..80) {
        let fx = curve_fixture(&mut SeededRng::new(seed), n);
        let cubed = PredictedCurves::new(
            fx.curves.grid.clone(),
            fx.curves.values.iter().map(|v| v.iter().map(|s| s.powi(3)).collect()).collect(),
        ).unwrap();
        let a = ctd_index(&fx.curves, &fx.times, &fx.events).unwrap();
        let b = ctd_index(&cubed, &fx.times, &fx.events).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn reversed_ranking_complements_concordance(seed in any::<u64>(), n in 5usize..80) {
        let mut rng = SeededRng::new(seed);
        let fx = curve_fixture(&mut rng, n);
        let levels: Vec<f64> = (0..n).map(|_| rng.below(21) as f64 / 20.0).collect();
        let flat = |f: &dyn Fn(f64) -> f64| {
            let values = levels.iter().map(|&l| vec![f(l); fx.curves.grid.len()]).collect();
            PredictedCurves::new(fx.curves.grid.clone(), values).unwrap()
        };
        let a = ctd_index(&flat(&|l| l), &fx.times, &fx.events).unwrap();
        let b = ctd_index(&flat(&|l| 1.0 - l), &fx.times, &fx.events).unwrap();
        prop_assert_eq!(a.tied, b.tied);
        prop_assert_eq!(a.concordant + b.concordant + a.tied, a.comparable);
        prop_assert!((a.index + b.index - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kaplan_meier_is_a_survival_function(seed in any::<u64>(), n in 1usize..120) {
        let fx = curve_fixture(&mut SeededRng::new(seed), n.max(2));
        let km = kaplan_meier(&fx.times, &fx.events).unwrap();
        prop_assert!(km.survival.iter().all(|s| (0.0..=1.0).contains(s)));
        prop_assert!(km.survival.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(km.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn uncensored_brier_is_squared_error(
        times in prop::collection::vec(0.1f64..10.0, 2..60),
        p in 0.0f64..=1.0,
        t in 0.0f64..12.0,
    ) {
        let events = vec![true; times.len()];
        let censor = censoring_km(&times, &events).unwrap();
        let b = brier_at(t, &vec![p; times.len()], &times, &events, &censor).unwrap();
        let direct = times.iter().map(|&y| (f64::from(u8::from(y > t)) - p).powi(2)).sum::<f64>() / times.len() as f64;
        prop_assert!((b.brier - direct).abs() < 1e-12);
    }
}

fn dims() -> FeatureDims {
    FeatureDims {
        clinical: 3,
        paraclinical: 3,
        demographic: 2,
        omics: vec![10],
    }
}

#[test]
fn null_effect_leaves_arms_exchangeable() {
    let config = SimulationConfig {
        n: 4000,
        effect_betas: vec![0.0, 0.0],
        censor_rate: 0.0,
        seed: 5,
        dims: dims(),
        ..SimulationConfig::default()
    };
    let (cohort, _) = simulate_cohort(&config).unwrap();
    let arm = |a: u8| -> Vec<f64> {
        cohort
            .records
            .iter()
            .filter(|r| r.treatment == a)
            .map(|r| r.time)
            .collect()
    };
    let (control, treated) = (arm(0), arm(1));
    let km0 = kaplan_meier(&control, &vec![true; control.len()]).unwrap();
    let km1 = kaplan_meier(&treated, &vec![true; treated.len()]).unwrap();
    let sup = km0
        .times
        .iter()
        .chain(&km1.times)
        .map(|&t| (km0.at(t) - km1.at(t)).abs())
        .fold(0.0, f64::max);
    // Two-sample Kolmogorov–Smirnov critical value at the 0.1% level.
    let (n0, n1) = (control.len() as f64, treated.len() as f64);
    let critical = 1.95 * ((n0 + n1) / (n0 * n1)).sqrt();
    assert!(sup < critical, "arms differ by {sup} (critical {critical})");
}

#[test]
fn full_batch_head_fit_descends() {
    let sim = SimulationConfig {
        n: 500,
        seed: 9,
        dims: dims(),
        ..SimulationConfig::default()
    };
    let (cohort, _) = simulate_cohort(&sim).unwrap();
    let data: PreparedData<f64> = prepare(&cohort, &PreprocessSpec::default(), &DEFAULT_SPLIT, 9).unwrap();
    let mut config = ModelConfig::default();
    config.omics.d_pre = 6;
    config.head = HeadConfig {
        bins: 10,
        ..HeadConfig::default()
    };
    let (grid, rate) = grid_for(&data.splits[0], config.head.bins).unwrap();
    let mut model = SurvivalModel::new(data.splits[0].dims(), config, grid, rate, 9).unwrap();
    let train_config = TrainConfig {
        phase2: PhaseConfig {
            epochs: 5,
            batch_size: 0,
            ..PhaseConfig::head_default()
        },
        seed: 9,
        ..TrainConfig::default()
    };
    let losses = train_head(&mut model, &data.splits[0], &data.splits[1], &train_config).unwrap();
    let train: Vec<f64> = losses.iter().map(|l| l.train).collect();
    assert_eq!(train.len(), 5);
    assert!(train.windows(2).all(|w| w[1] < w[0]), "{train:?}");
}
