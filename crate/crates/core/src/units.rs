//! Physical constants expressed in the crate's working units.
//!
//! Lengths are in µm, times in µs, voltages in V and energies in eV (the
//! potential energy of a singly charged ion in a potential of 1 V). Masses are
//! given in atomic mass units at the API surface and converted to
//! eV·µs²/µm² internally so that `F = m a` holds without further factors.

/// Elementary charge (C), CODATA 2018 exact.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Atomic mass unit (kg), CODATA 2018.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Vacuum permittivity (F/m), CODATA 2018.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
/// Reduced Planck constant (J·s), CODATA 2018 exact.
pub const HBAR_SI: f64 = 1.054_571_817e-34;
/// Bohr magneton (J/T), CODATA 2018.
pub const BOHR_MAGNETON: f64 = 9.274_010_078_3e-24;
/// Electronic g-factor of the ⁴⁰Ca⁺ S₁/₂ ground state.
pub const G_J_CA40: f64 = 2.002_256_64;

/// Mass of a ⁴⁰Ca⁺ ion in atomic mass units.
pub const CA40_MASS_U: f64 = 40.0;

/// One eV/µm acting on one atomic mass unit, expressed in µm/µs².
pub const ACCEL_PER_EV_UM_U: f64 = (ELEMENTARY_CHARGE / 1e-6) / ATOMIC_MASS_UNIT * 1e-6;

/// Coulomb constant times e² in eV·µm: `e / (4π ε₀)` in V·µm.
pub const COULOMB_EV_UM: f64 =
    ELEMENTARY_CHARGE / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY) * 1e6;

/// ħ in eV·µs.
pub const HBAR_EV_US: f64 = HBAR_SI / ELEMENTARY_CHARGE * 1e6;

/// μ_B g_J / ħ for ⁴⁰Ca⁺ in rad/(µs·T).
pub const ZEEMAN_RAD_PER_US_PER_T: f64 = BOHR_MAGNETON * G_J_CA40 / HBAR_SI * 1e-6;

/// Converts a mass in atomic mass units to the internal eV·µs²/µm².
pub fn mass_internal(mass_u: f64) -> f64 {
    mass_u / ACCEL_PER_EV_UM_U
}

/// Angular frequency (rad/µs) for a frequency in MHz.
pub fn angular(freq_mhz: f64) -> f64 {
    2.0 * std::f64::consts::PI * freq_mhz
}

/// Frequency in MHz for an angular frequency in rad/µs.
pub fn cyclic(omega: f64) -> f64 {
    omega / (2.0 * std::f64::consts::PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coulomb_constant_matches_known_value() {
        // e²/(4πε₀) = 1.439964548 eV·nm
        assert!((COULOMB_EV_UM - 1.439_964_548e-3).abs() < 1e-11);
    }

    #[test]
    fn hbar_in_ev_us() {
        assert!((HBAR_EV_US / 6.582_119_569e-10 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn acceleration_unit() {
        assert!((ACCEL_PER_EV_UM_U / 9.648_533_212e7 - 1.0).abs() < 1e-9);
    }
}
