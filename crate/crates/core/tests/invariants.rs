use std::sync::Arc;

use proptest::prelude::*;
use proptest::strategy::Strategy as PStrategy;
use wash_core::coordination::{
    apply_shuffle, papa_all_step, papa_ema_step, sample_shuffle_plan, Schedule, Strategy,
    StrategyConfig,
};
use wash_core::nn::{Activation, NetSpec, SyntheticSpec};
use wash_core::optim::{OptHyper, OptState};
use wash_core::params::{consensus_distance, LayeredParams, Layout};
use wash_core::population::{
    train_population, DataSpec, Executor, InitMode, RunConfig, Sequential, Trainer,
};

fn layout() -> Arc<Layout> {
    Arc::new(Layout::new(&[(0, vec![3, 2]), (0, vec![2]), (1, vec![4]), (2, vec![5])]).unwrap())
}

fn population(values: &[Vec<f64>]) -> Vec<LayeredParams> {
    let l = layout();
    values
        .iter()
        .map(|v| LayeredParams::from_values(l.clone(), v.clone()).unwrap())
        .collect()
}

fn arb_population() -> impl PStrategy<Value = Vec<Vec<f64>>> {
    (1usize..6)
        .prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 17), n))
}

fn schedule() -> impl PStrategy<Value = Schedule> {
    prop_oneof![
        Just(Schedule::Decreasing),
        Just(Schedule::Constant),
        Just(Schedule::Increasing)
    ]
}

fn column(models: &[LayeredParams], i: usize) -> Vec<f64> {
    let mut c: Vec<f64> = models.iter().map(|m| m.values()[i]).collect();
    c.sort_by(f64::total_cmp);
    c
}

proptest! {
    #[test]
    fn shuffle_permutes_each_coordinate(vals in arb_population(), p in 0.0..=1.0f64, s in schedule(), seed: u64, step in 0usize..1000) {
        let before = population(&vals);
        let mut after = before.clone();
        let plan = sample_shuffle_plan(seed, &layout(), p, s, before.len(), step).unwrap();
        apply_shuffle(&mut after, None, &plan).unwrap();
        for i in 0..17 {
            prop_assert_eq!(column(&before, i), column(&after, i));
            if !plan.coords().contains(&i) {
                for (a, b) in before.iter().zip(&after) {
                    prop_assert_eq!(a.values()[i], b.values()[i]);
                }
            }
        }
    }

    #[test]
    fn momentum_follows_parameters(vals in arb_population(), seed: u64) {
        let mut models = population(&vals);
        let mut opt: Vec<OptState> = models.iter().map(OptState::new).collect();
        // momentum mirrors the parameters, so it must still mirror them afterwards
        for (o, m) in opt.iter_mut().zip(&models) {
            o.momentum.values_mut().copy_from_slice(m.values());
        }
        let plan = sample_shuffle_plan(seed, &layout(), 0.5, Schedule::Constant, models.len(), 3).unwrap();
        let delta = apply_shuffle(&mut models, Some(&mut opt), &plan).unwrap();
        for (o, m) in opt.iter().zip(&models) {
            prop_assert_eq!(o.momentum.values(), m.values());
        }
        prop_assert_eq!(delta.nominal, 2 * plan.nominal_scalars(false));
    }

    #[test]
    fn plans_are_pure_functions_of_their_key(seed: u64, step in 0usize..10_000, n in 1usize..8) {
        let a = sample_shuffle_plan(seed, &layout(), 0.3, Schedule::Decreasing, n, step).unwrap();
        let b = sample_shuffle_plan(seed, &layout(), 0.3, Schedule::Decreasing, n, step).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.coords().windows(2).all(|w| w[0] < w[1]));
        for e in a.entries() {
            let mut perm = e.perm.to_vec();
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..n as u32).collect::<Vec<_>>());
            prop_assert_eq!(e.layer, layout().layer_of(e.coord));
        }
    }

    #[test]
    fn ema_contracts_distance(vals in arb_population(), alpha in 0.01..=1.0f64) {
        let mut models = population(&vals);
        let before = consensus_distance(&models).unwrap();
        papa_ema_step(&mut models, alpha).unwrap();
        let after = consensus_distance(&models).unwrap();
        let want = alpha * alpha * before.sum_sq;
        prop_assert!((after.sum_sq - want).abs() <= 1e-9 * (1.0 + before.sum_sq));
    }

    #[test]
    fn full_average_reaches_consensus(vals in arb_population()) {
        let mut models = population(&vals);
        papa_all_step(&mut models).unwrap();
        prop_assert!(models.windows(2).all(|w| w[0] == w[1]));
        prop_assert_eq!(consensus_distance(&models).unwrap().sum_sq, 0.0);
    }
}

/// Visits workers in reverse to catch any dependence on scheduling order.
struct Reversed;

impl Executor for Reversed {
    fn for_each_worker<T: Send, F: Fn(usize, &mut T) + Sync>(&self, items: &mut [T], f: F) {
        for (i, item) in items.iter_mut().enumerate().rev() {
            f(i, item);
        }
    }
}

fn config(strategy: Strategy) -> RunConfig {
    RunConfig {
        net: NetSpec::new(vec![4, 8, 3], Activation::Tanh).unwrap(),
        data: DataSpec::Synthetic(SyntheticSpec {
            seed: 11,
            classes: 3,
            dim: 4,
            n_per_class: 30,
            n_test_per_class: 10,
            spread: 0.7,
            modes_per_class: 2,
        }),
        val_fraction: 0.2,
        n_models: 3,
        epochs: 3,
        batch_size: 8,
        opt: OptHyper::default(),
        strategy: StrategyConfig::new(strategy),
        init_seed: 1,
        data_seed: 2,
        shuffle_seed: 3,
        init_mode: InitMode::PerModel,
        hetero: true,
        telemetry_every: 4,
        eval: Default::default(),
    }
}

#[test]
fn execution_order_does_not_change_results() {
    for s in [
        Strategy::WashOpt {
            p: 0.2,
            schedule: Schedule::Increasing,
        },
        Strategy::Papa {
            alpha: 0.9,
            period: 3,
            lr_coupled: true,
        },
        Strategy::PapaAll { period: 5 },
    ] {
        let a = train_population(config(s), &Sequential).unwrap();
        let b = train_population(config(s), &Reversed).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.ledger, b.ledger);
    }
}

#[test]
fn checkpoint_resume_matches_at_every_boundary() {
    let cfg = config(Strategy::Wash {
        p: 0.3,
        schedule: Schedule::Decreasing,
    });
    let data = cfg.build_dataset().unwrap();
    let full = wash_core::population::train_on(cfg.clone(), &data, &Sequential).unwrap();
    let mut t = Trainer::new(cfg.clone(), &data).unwrap();
    for cut in [1, 5, 11] {
        t.run_until(cut, &Sequential).unwrap();
        let ck = t.checkpoint();
        let r = wash_core::population::resume(cfg.clone(), &data, &ck, &Sequential).unwrap();
        assert_eq!(r.state, full.state, "cut at {cut}");
        assert_eq!(r.metrics, full.metrics);
    }
}

#[test]
fn resume_refuses_other_config() {
    let cfg = config(Strategy::None);
    let data = cfg.build_dataset().unwrap();
    let ck = Trainer::new(cfg.clone(), &data).unwrap().checkpoint();
    let mut other = cfg;
    other.shuffle_seed += 1;
    assert!(Trainer::from_checkpoint(other, &data, &ck).is_err());
}
