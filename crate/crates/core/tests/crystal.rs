use std::sync::OnceLock;

use ionswap::dynamics::{
    find_equilibrium, integrate, normal_modes, project_onto_modes, simulate_swap, thermal_state, total_energy,
    total_gradient, CrystalState, IntegrateOptions, StaticField,
};
use ionswap::filter::FilterModel;
use ionswap::rng::child_rng;
use ionswap::trap::{calibrate, Channel, ElectrodeField, Potential, SecularTargets, TrapGeometry, TrapLayout, VoltageAssignment};
use ionswap::units::{COULOMB_EV_UM, HBAR_EV_US};
use ionswap::waveform::SwapRampParams;
use proptest::prelude::*;

fn geometry() -> &'static TrapGeometry {
    static G: OnceLock<TrapGeometry> = OnceLock::new();
    G.get_or_init(|| calibrate(&TrapLayout::default(), &SecularTargets::default(), -6.0).unwrap())
}

fn hold_field(u_d: f64) -> ElectrodeField {
    let g = geometry();
    let site = g.liz_index;
    let v = VoltageAssignment::new()
        .with(Channel::Segment(site - 1), 0.5)
        .with(Channel::Segment(site), -6.0)
        .with(Channel::Segment(site + 1), 1.5)
        .with(Channel::Diagonal(site), u_d);
    g.field(&v).unwrap()
}

fn two_ions(field: &ElectrodeField) -> Vec<[f64; 3]> {
    let x0 = geometry().liz_center();
    find_equilibrium(field, &[[x0 - 2.0, 0.0, 0.0], [x0 + 2.0, 0.0, 0.0]]).unwrap()
}

#[test]
fn two_ion_spacing_matches_force_balance() {
    let g = geometry();
    let field = g.field(&g.trapping_voltages(&[g.liz_index], -6.0)).unwrap();
    let eq = find_equilibrium(&field, &[[-2.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
    let w = 2.0 * std::f64::consts::PI * SecularTargets::default().axial_mhz;
    let kappa = g.ion_mass() * w * w;
    let oracle = (2.0 * COULOMB_EV_UM / kappa).cbrt();
    let d = (eq[1][0] - eq[0][0]).abs();
    assert!((d - oracle).abs() / oracle < 1e-3, "{d} vs {oracle}");
    assert!((4.0..4.7).contains(&d), "{d}");
}

#[test]
fn mode_vectors_are_orthonormal() {
    let field = hold_field(0.3);
    let modes = normal_modes(&field, &two_ions(&field), geometry().ion_mass()).unwrap();
    for a in 0..modes.len() {
        for b in 0..modes.len() {
            let dot: f64 = modes.eigenvectors[a].iter().zip(&modes.eigenvectors[b]).map(|(x, y)| x * y).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-10, "{a} {b} {dot}");
        }
    }
}

#[test]
fn relabeling_ions_changes_nothing() {
    let field = hold_field(0.2);
    let eq = two_ions(&field);
    let swapped = vec![eq[1], eq[0]];
    assert!((total_energy(&field, &eq) - total_energy(&field, &swapped)).abs() < 1e-12);
    let m = geometry().ion_mass();
    let a = normal_modes(&field, &eq, m).unwrap();
    let b = normal_modes(&field, &swapped, m).unwrap();
    for (x, y) in a.frequencies_mhz.iter().zip(&b.frequencies_mhz) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn phonon_number_is_energy_over_quantum() {
    let field = hold_field(0.0);
    let eq = two_ions(&field);
    let m = geometry().ion_mass();
    let modes = normal_modes(&field, &eq, m).unwrap();
    // A pure velocity kick along one mode carries energy p²/2 exactly.
    for k in 0..modes.len() {
        let p = 1e-3;
        let velocities = (0..2)
            .map(|i| [0, 1, 2].map(|a| p * modes.eigenvectors[k][3 * i + a] / m.sqrt()))
            .collect();
        let state = CrystalState::new(eq.clone(), velocities).unwrap();
        let energy = 0.5 * p * p;
        let n_bar = project_onto_modes(&state, &modes).unwrap()[k].n_bar;
        let want = energy / (HBAR_EV_US * modes.omega(k));
        assert!((n_bar - want).abs() < 1e-9 * want, "mode {k}: {n_bar} vs {want}");
    }
}

#[test]
fn free_axial_motion_conserves_momentum() {
    // With every segment grounded only the radial pseudopotential acts, so the
    // axial momentum of the pair is a constant of motion.
    let g = geometry();
    let mut field = StaticField(g.field(&VoltageAssignment::new()).unwrap());
    let x0 = g.liz_center();
    let v = vec![[0.4, 0.1, 0.0], [-0.1, 0.0, -0.2]];
    let state = CrystalState::new(vec![[x0 - 3.0, 0.5, 0.0], [x0 + 3.0, 0.0, 0.3]], v.clone()).unwrap();
    let traj = integrate(&mut field, g, &state, 0.0, 20.0, &IntegrateOptions::default()).unwrap();
    let before: f64 = v.iter().map(|u| u[0]).sum();
    let after: f64 = traj.final_state.velocities.iter().map(|u| u[0]).sum();
    assert!((after - before).abs() < 1e-10, "{before} -> {after}");
}

#[test]
fn thermal_cloud_conserves_energy_in_static_well() {
    let g = geometry();
    let field = hold_field(0.0);
    let eq = two_ions(&field);
    let modes = normal_modes(&field, &eq, g.ion_mass()).unwrap();
    let state = thermal_state(&modes, &vec![5.0; modes.len()], &mut child_rng(3, "thermal", 0)).unwrap();
    let opts = IntegrateOptions {
        record_energy: true,
        stride: 100,
        ..Default::default()
    };
    let traj = integrate(&mut StaticField(field.clone()), g, &state, 0.0, 50.0, &opts).unwrap();
    let e0 = traj.energies[0];
    let excess = e0 - total_energy(&field, &eq);
    let worst = traj.energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
    // Velocity Verlet oscillates by about (ω dt)²/8 of the excess energy.
    assert!(worst < 1e-3 * excess, "{worst} vs {excess}");
}

#[test]
fn swap_without_diagonal_drive_stays_on_axis() {
    let params = SwapRampParams {
        u_d_peak: 0.0,
        ..Default::default()
    };
    let s = simulate_swap(geometry(), &params, &FilterModel::default(), &IntegrateOptions::default()).unwrap();
    assert!(!s.swapped);
    assert!(s.max_abs_y < 1e-6, "{}", s.max_abs_y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_finite_differences(
        x in -300.0f64..300.0, y in -3.0f64..3.0, z in -3.0f64..3.0, u_d in -2.0f64..2.0,
    ) {
        let field = hold_field(u_d);
        let r = [geometry().liz_center() + x, y, z];
        let g = field.gradient(&r);
        for a in 0..3 {
            let h = 1e-4;
            let (mut p, mut m) = (r, r);
            p[a] += h;
            m[a] -= h;
            let fd = (field.energy(&p) - field.energy(&m)) / (2.0 * h);
            prop_assert!((g[a] - fd).abs() < 1e-7 * (1.0 + fd.abs()), "axis {}: {} vs {}", a, g[a], fd);
        }
    }

    #[test]
    fn radial_mirror_symmetry_without_diagonal(x in -300.0f64..300.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
        let field = hold_field(0.0);
        let x = geometry().liz_center() + x;
        let e = field.energy(&[x, y, z]);
        prop_assert!((e - field.energy(&[x, -y, z])).abs() < 1e-12 * (1.0 + e.abs()));
        prop_assert!((e - field.energy(&[x, y, -z])).abs() < 1e-12 * (1.0 + e.abs()));
    }

    #[test]
    fn crystal_gradient_is_translation_covariant(dx in -1.0f64..1.0, dy in -0.5f64..0.5) {
        // Coulomb forces cancel in the sum, so the total force equals the sum of
        // external forces on each ion.
        let field = hold_field(0.3);
        let x0 = geometry().liz_center();
        let pos = vec![[x0 - 2.0 + dx, dy, 0.1], [x0 + 2.5, -dy, -0.1]];
        let total: Vec<f64> = (0..3).map(|a| total_gradient(&field, &pos).iter().map(|g| g[a]).sum()).collect();
        for a in 0..3 {
            let external: f64 = pos.iter().map(|r| field.gradient(r)[a]).sum();
            prop_assert!((total[a] - external).abs() < 1e-9 * (1.0 + external.abs()));
        }
    }
}

