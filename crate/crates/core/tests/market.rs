mod common;

use std::collections::BTreeSet;

use momineq::confset::{moment_summary, test_point};
use momineq::demand::{ContractionOptions, DemandSample, Draws};
use momineq::market::{
    profit_delta, synth_dgp, EventKind, MarketModel, MarketState, ProductState, SynthConfig,
};
use momineq::two_stage::{FirstStageEstimate, MomentModel};
use momineq::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn random_state(rng: &mut ChaCha8Rng, draws: &Draws) -> MarketState {
    let products = (0..rng.random_range(1..=6))
        .map(|j| {
            let x = [
                rng.random_range(0.5..2.0),
                rng.random_range(0..2) as f64,
                rng.random_range(0..2) as f64,
                0.0,
            ];
            let price = rng.random_range(1.0..4.0);
            ProductState {
                firm: rng.random_range(0..3),
                product: j,
                x,
                price,
                mc: price * rng.random_range(0.3..0.9),
                zeta: if rng.random::<bool>() {
                    Some(rng.random_range(-3.0..1.0))
                } else {
                    None
                },
                shift: draws.product_shift(&x, price),
            }
        })
        .collect();
    MarketState {
        market_size: rng.random_range(100.0..10_000.0),
        products,
    }
}

fn random_subset(rng: &mut ChaCha8Rng, state: &MarketState, firm: u32) -> Vec<u32> {
    state
        .products
        .iter()
        .filter(|p| p.firm == firm && rng.random::<bool>())
        .map(|p| p.product)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn profit_gap_is_antisymmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = Draws::new(rng.random_range(1..20), [0.3, 0.1, 0.1, 0.0, 0.2], seed).unwrap();
        let state = random_state(&mut rng, &draws);
        let firm = state.products[0].firm;
        let j1 = random_subset(&mut rng, &state, firm);
        let j2 = random_subset(&mut rng, &state, firm);
        let delta = DVector::from_vec(vec![1.0, -0.5, 0.4, 0.2, 0.8]);
        let a = profit_delta(&state, firm, &j1, &j2, &delta).unwrap();
        let b = profit_delta(&state, firm, &j2, &j1, &delta).unwrap();
        prop_assert_eq!(a, -b);
    }
}

fn fitted_model(cfg: &SynthConfig, seed: u64) -> (MarketModel, momineq::market::SynthDataset) {
    let ds = synth_dgp(cfg, seed).unwrap();
    let sample =
        DemandSample::from_data(&ds.demand, &ds.draws, &ContractionOptions::default()).unwrap();
    let model = MarketModel::new(&ds.demand, &sample.zeta, &ds.events, &ds.draws).unwrap();
    (model, ds)
}

fn truth_theta(ds: &momineq::market::SynthDataset) -> Vec<f64> {
    let mut t = vec![ds.truth.lambda];
    t.extend_from_slice(&ds.truth.eta);
    t
}

#[test]
fn row_count_equals_entry_plus_exit_cells() {
    for seed in [1, 2, 3] {
        let (model, ds) = fitted_model(&SynthConfig::default(), seed);
        let entries: BTreeSet<u32> = ds
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Entry)
            .map(|e| e.product)
            .collect();
        let exits: BTreeSet<u32> = ds
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Exit)
            .map(|e| e.product)
            .collect();
        let k = model.cells().len();
        assert_eq!(k, entries.len() + exits.len());
        let cons = model.constraints(&truth_theta(&ds)).unwrap();
        assert_eq!(cons.b.nrows(), k);
        assert_eq!(cons.c, DMatrix::identity(k, k));
        assert_eq!(cons.rho, DVector::zeros(k));
        assert_eq!(model.dim_n(), k);
    }
}

#[test]
fn constraints_are_linear_in_eta() {
    let (model, ds) = fitted_model(&SynthConfig::default(), 4);
    let theta = truth_theta(&ds);
    let mut doubled = theta.clone();
    for v in &mut doubled[1..] {
        *v *= 2.0;
    }
    let a = model.constraints(&theta).unwrap();
    let b = model.constraints(&doubled).unwrap();
    assert_eq!(b.b, &a.b * 2.0);
    assert_eq!(a.c, b.c);
    assert_eq!(a.rho, b.rho);
    let delta = DVector::from_vec(ds.truth.delta.clone());
    for i in 0..model.n_obs() {
        assert_eq!(
            model.moment(i, &theta, &delta).unwrap(),
            model.moment(i, &doubled, &delta).unwrap()
        );
    }
}

#[test]
fn statistic_vanishes_at_the_truth_without_noise() {
    let cfg = SynthConfig {
        xi_sd: 0.0,
        price_noise_sd: 0.0,
        slack: 0.0,
        ..SynthConfig::default()
    };
    for seed in [1, 2, 3, 42] {
        let (model, ds) = fitted_model(&cfg, seed);
        assert!(model.n_obs() > 0);
        let theta = truth_theta(&ds);
        let delta = DVector::from_vec(ds.truth.delta.clone());
        let first = FirstStageEstimate {
            delta_hat: delta.clone(),
            influence: vec![DVector::zeros(5); ds.demand.len()],
            g_matrix: DMatrix::identity(5, 5),
            converged: true,
            objective_value: 0.0,
            iterations: 0,
            gradient_norm: 0.0,
        };
        let summary = moment_summary(&model, &theta, &first, None).unwrap();
        let cons = model.constraints(&theta).unwrap();
        let slack = cons.a() * &summary.pbar - &cons.rho;
        assert!(
            slack.max() <= 1e-9,
            "seed {seed}: max slack {}",
            slack.max()
        );
        let r = test_point(&model, &theta, &summary, 0.05).unwrap();
        assert_eq!(r.statistic, 0.0, "seed {seed}");
        assert!(!r.reject);
    }
}

#[test]
fn degenerate_configuration_has_no_moments() {
    let cfg = SynthConfig {
        firms: 1,
        product_types: 1,
        periods: 1,
        initial_offer_prob: 1.0,
        ..SynthConfig::default()
    };
    let ds = synth_dgp(&cfg, 9).unwrap();
    assert!(ds.events.is_empty());
    let sample =
        DemandSample::from_data(&ds.demand, &ds.draws, &ContractionOptions::default()).unwrap();
    assert!(matches!(
        MarketModel::new(&ds.demand, &sample.zeta, &ds.events, &ds.draws),
        Err(Error::EmptyEvents)
    ));
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn default_dataset_checksums_are_stable() {
    let ds = synth_dgp(&SynthConfig::default(), 42).unwrap();
    let mut demand = Vec::new();
    ds.write_demand_csv(&mut demand).unwrap();
    let mut events = Vec::new();
    ds.write_events_csv(&mut events).unwrap();
    let (d, e) = (digest(&demand), digest(&events));
    assert_eq!((ds.events.len(), ds.demand.len()), (8, 1146));
    assert_eq!(
        d,
        "8e5bce44f134c8f9f97806f6aefabd42b8f36f05c9f26e1b8c970b2ded89712c"
    );
    assert_eq!(
        e,
        "bd434ace49409a7d69898046db7bb57448335ba52d025755cc7f8dbbad91e7d5"
    );
}
