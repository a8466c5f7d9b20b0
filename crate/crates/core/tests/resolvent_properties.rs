//! Shape of the resolvent norms over the sector.

use twofluid::closure::ClosureParams;
use twofluid::grid::{DiffOps, Grid};
use twofluid::linear_core::LinearCoeffs;
use twofluid::spectra::{sweep_sector, SectorSpec};

fn ratio_bounds(cells: usize) -> (f64, f64) {
    let p = ClosureParams::new(3.0, 1.5, 1.0, 0.2).unwrap();
    let g = Grid::unit_interval(cells).unwrap();
    let ops = DiffOps::new(&g);
    let co = LinearCoeffs::around_constant(&ops, 1.0, 0.5, &p).unwrap();
    let spec = SectorSpec::grid(std::f64::consts::FRAC_PI_4, 1.0, 1e3, 8, 5).unwrap();
    assert!(spec.samples.iter().all(|l| spec.contains(*l)));
    let samples = sweep_sector(&ops, &co, &p, &spec).unwrap();
    assert!(samples.iter().all(|s| !s.failed));
    let r10 = samples.iter().map(|s| s.norm_j1 / s.norm_j0).fold(0.0, f64::max);
    let r21 = samples.iter().map(|s| s.norm_j2 / s.norm_j1).fold(0.0, f64::max);
    (r10, r21)
}

#[test]
fn norms_are_ordered_up_to_a_grid_independent_constant() {
    let (a10, a21) = ratio_bounds(12);
    let (b10, b21) = ratio_bounds(24);
    for r in [a10, a21, b10, b21] {
        assert!(r.is_finite() && r < 20.0, "{r}");
    }
    assert!(b10 < 1.5 * a10 && b21 < 1.5 * a21, "{a10} {a21} -> {b10} {b21}");
}

#[test]
fn samples_outside_the_sector_are_refused() {
    use num_complex::Complex64;
    let spec = SectorSpec { epsilon: 0.5, lambda0: 1.0, samples: vec![Complex64::new(0.5, 0.0)] };
    assert!(spec.check().is_err());
    let p = ClosureParams::new(3.0, 1.5, 1.0, 0.0).unwrap();
    let g = Grid::unit_interval(6).unwrap();
    let ops = DiffOps::new(&g);
    let co = LinearCoeffs::around_constant(&ops, 1.0, 1.0, &p).unwrap();
    assert!(sweep_sector(&ops, &co, &p, &spec).is_err());
}
