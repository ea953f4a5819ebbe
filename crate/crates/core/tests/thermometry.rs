use ionswap::rng::child_rng;
use ionswap::thermometry::*;
use proptest::prelude::*;

const ETA: f64 = 0.1;
const OMEGA0: f64 = std::f64::consts::PI;

fn params() -> RabiParams {
    RabiParams {
        eta: ETA,
        omega0: OMEGA0,
        decay: 0.0,
    }
}

/// Sideband pulse areas from 0 to 8π.
fn times() -> Vec<f64> {
    let t_max = 8.0 * std::f64::consts::PI / (ETA * OMEGA0);
    (0..=40).map(|k| t_max * k as f64 / 40.0).collect()
}

fn sideband_pair(model: StateModel, n_bar: f64, shots: u32, seed: u64) -> Vec<RabiDataset> {
    let mut rng = child_rng(seed, "synthetic", 0);
    [Transition::Rsb, Transition::Bsb]
        .iter()
        .map(|tr| RabiDataset::synthesize(model, n_bar, *tr, &params(), Observable::SingleIon, &times(), shots, &mut rng))
        .collect()
}

fn fit(model: StateModel, data: &[RabiDataset], bootstrap: usize) -> FitResult {
    let opts = FitOptions {
        model,
        eta: ETA,
        omega0: OMEGA0 * 1.03,
        bootstrap,
        seed: 11,
        ..Default::default()
    };
    fit_phonon_number(data, &opts).unwrap()
}

#[test]
fn coherent_five_hundredths_recovered() {
    let r = fit(StateModel::Coherent, &sideband_pair(StateModel::Coherent, 0.05, 200, 1), 100);
    assert!((r.n_bar - 0.05).abs() < 0.02, "{r:?}");
    assert!(r.ci.0 <= r.n_bar && r.n_bar <= r.ci.1);
}

#[test]
fn ground_state_consistent_with_zero() {
    let r = fit(StateModel::Thermal, &sideband_pair(StateModel::Thermal, 0.0, 200, 2), 100);
    assert!(r.ci.0 <= 1e-12, "{r:?}");
}

#[test]
fn fit_is_deterministic() {
    let d = sideband_pair(StateModel::Thermal, 0.37, 200, 3);
    assert_eq!(fit(StateModel::Thermal, &d, 30), fit(StateModel::Thermal, &d, 30));
}

#[test]
fn error_shrinks_with_shots() {
    let err = |shots: u32| -> f64 {
        (0..8u64)
            .map(|s| (fit(StateModel::Thermal, &sideband_pair(StateModel::Thermal, 0.37, shots, 100 + s), 0).n_bar - 0.37).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (coarse, fine) = (err(200), err(20_000));
    assert!(fine < 0.3 * coarse, "{coarse} vs {fine}");
}

#[test]
fn two_ion_observable_exceeds_single_ion() {
    for t in times() {
        let one = rabi_model(StateModel::Thermal, 0.2, Transition::Bsb, &params(), Observable::SingleIon, t);
        let two = rabi_model(StateModel::Thermal, 0.2, Transition::Bsb, &params(), Observable::AtLeastOneOfTwo, t);
        assert!(two >= one - 1e-15);
    }
}

#[test]
fn csv_round_trip() {
    let d = &sideband_pair(StateModel::Coherent, 0.1, 200, 4)[1];
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let back = RabiDataset::read_csv(buf.as_slice(), Transition::Bsb, "").unwrap();
    assert_eq!(back.points, d.points);
}

proptest! {
    #[test]
    fn model_is_a_probability(n_bar in 0.0f64..20.0, eta in 0.01f64..0.29, t in 0.0f64..500.0, thermal: bool, two: bool) {
        let model = if thermal { StateModel::Thermal } else { StateModel::Coherent };
        let obs = if two { Observable::AtLeastOneOfTwo } else { Observable::SingleIon };
        let p = RabiParams { eta, omega0: OMEGA0, decay: 0.0 };
        for tr in [Transition::Carrier, Transition::Rsb, Transition::Bsb] {
            let v = rabi_model(model, n_bar, tr, &p, obs, t);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn red_below_blue_at_short_times(n_bar in 0.0f64..10.0, eta in 0.01f64..0.29) {
        let p = RabiParams { eta, omega0: OMEGA0, decay: 0.0 };
        let t = 0.05 / (eta * OMEGA0 * (n_bar + 1.0).sqrt());
        let red = rabi_model(StateModel::Thermal, n_bar, Transition::Rsb, &p, Observable::SingleIon, t);
        let blue = rabi_model(StateModel::Thermal, n_bar, Transition::Bsb, &p, Observable::SingleIon, t);
        prop_assert!(red <= blue);
    }
}
