//! The stationary start is invariant for the discrete noise dynamics: per-mode
//! second moments of `Y` stay at their invariant values.

use std::f64::consts::PI;

use parakpz::enhanced_noise::{enhance, stationary_variance, EnhanceSpec, InitialKind, RenormMode};
use parakpz::polymer_sampler::mean_and_error;
use parakpz::spectral_core::{make_dyadic_partition, Grid};

#[test]
fn mode_second_moments_stay_at_the_invariant_law() {
    let g = Grid::new(2.0 * PI, 64).unwrap();
    let part = make_dyadic_partition(&g, 1.0).unwrap();
    let dt = 1.0 / 64.0;
    let v = stationary_variance(&g, dt);
    let modes = 1..=8usize;
    let (mut start, mut end) = (Vec::new(), Vec::new());
    for seed in 0..300u64 {
        let spec = EnhanceSpec {
            half_length: g.half_length,
            num_points: g.n(),
            t_end: 1.0,
            dt,
            seed,
            initial: InitialKind::Stationary,
            drift: 0.0,
            renorm: RenormMode::TimeDependent,
        };
        let d = enhance(&spec, None, &part).unwrap();
        // Normalized |Ŷ_m|² averaged over modes; mean one under the invariant law.
        let stat = |k: usize| modes.clone().map(|m| d.y.frame(k).coeffs()[m].norm_sqr() / v[m]).sum::<f64>() / modes.clone().count() as f64;
        start.push(stat(0));
        end.push(stat(d.mesh().len() - 1));
    }
    for (name, s) in [("t = 0", &start), ("t = 1", &end)] {
        let (m, se) = mean_and_error(s);
        assert!((m - 1.0).abs() < 3.0 * se, "{name}: normalized second moment {m:.4} ± {se:.4}");
    }
}
