use proptest::prelude::*;

use pstrat_core::estimands::{gelman_rubin, summarize, tau};
use pstrat_core::ppc::{
    discrepancy_si_no_sn, pppv, sppv, sppv_from_counts, Discrepancy, PredictiveCheck, SppvCounts,
};
use pstrat_core::simlab::{scenario_params, ScenarioId};
use pstrat_core::{Arm, Result, RngStream, Stratum, Theta};

fn scenario_theta() -> Theta {
    scenario_params(ScenarioId::I).theta
}

proptest! {
    #[test]
    fn tau_shifts_with_the_treated_mean(delta in -50.0..50.0f64, complier in any::<bool>()) {
        let s = if complier { Stratum::Complier } else { Stratum::NeverTaker };
        let theta = scenario_theta();
        let mut shifted = theta;
        shifted.cell_mut(s, Arm::Treated).mu[0] += delta;
        let expected = tau(&theta, s) + delta;
        prop_assert!((tau(&shifted, s) - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }

    #[test]
    fn quantiles_do_not_drop_when_a_high_draw_is_added(
        draws in prop::collection::vec(-100.0..100.0f64, 2..200),
        extra in 0.0..50.0f64,
    ) {
        let before = summarize(&draws).unwrap();
        let mut more = draws.clone();
        more.push(before.q975 + extra);
        let after = summarize(&more).unwrap();
        prop_assert!(after.q025 >= before.q025);
        prop_assert!(after.median >= before.median);
        prop_assert!(after.q975 >= before.q975);
    }

    #[test]
    fn psrf_is_at_least_one(
        chains in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 20), 2..5),
    ) {
        let r = gelman_rubin(&chains).unwrap();
        prop_assert!(r >= 1.0 - 1e-12, "{r}");
    }

    #[test]
    fn signal_to_noise_ignores_scale(
        values in prop::collection::vec(-5.0..5.0f64, 12),
        lambda in 0.01..100.0f64,
    ) {
        let arms: Vec<Arm> = (0..12).map(|i| Arm::from_treated(i % 2 == 0)).collect();
        let labels: Vec<Stratum> = (0..12).map(|i| if i % 4 < 2 { Stratum::Complier } else { Stratum::NeverTaker }).collect();
        let scaled: Vec<f64> = values.iter().map(|v| v * lambda).collect();
        for s in Stratum::ALL {
            let a = discrepancy_si_no_sn(&values, &arms, &labels, s).unwrap();
            let b = discrepancy_si_no_sn(&scaled, &arms, &labels, s).unwrap();
            prop_assert!((b.signal - lambda * a.signal).abs() <= 1e-12 * (1.0 + b.signal));
            prop_assert!((b.noise - lambda * a.noise).abs() <= 1e-12 * (1.0 + b.noise));
            if let (Some(x), Some(y)) = (a.signal_to_noise, b.signal_to_noise) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x));
            }
        }
    }

    #[test]
    fn sampled_p_values_are_proper(
        greater in 0usize..500,
        smaller in 0usize..500,
        ties in 0usize..500,
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed);
        let p = sppv_from_counts(SppvCounts { greater, smaller, ties, undefined: 0 }, &mut rng).unwrap();
        prop_assert!(p > 0.0 && p < 1.0, "{p}");
    }
}

/// Realized discrepancy 0; replicated discrepancy fixed at `rep`.
struct Rigged {
    measures: Vec<Discrepancy>,
    rep: f64,
}

impl PredictiveCheck for Rigged {
    fn measures(&self) -> &[Discrepancy] {
        &self.measures
    }

    fn realized(&self, _: &Theta, _: &mut RngStream) -> Result<Vec<Option<f64>>> {
        Ok(vec![Some(0.0); self.measures.len()])
    }

    fn replicated(&self, _: &Theta, _: &mut RngStream) -> Result<Vec<Option<f64>>> {
        Ok(vec![Some(self.rep); self.measures.len()])
    }
}

fn rigged(rep: f64) -> Rigged {
    Rigged { measures: vec![Discrepancy::Chi2, Discrepancy::Ks], rep }
}

#[test]
fn rigged_replicates_give_one_and_one_half() {
    let draws = vec![scenario_theta(); 40];
    for v in pppv(&draws, &rigged(1.0), 3).unwrap().values {
        assert_eq!(v.p, Some(1.0));
        assert_eq!(v.used, 40);
    }
    for v in pppv(&draws, &rigged(0.0), 3).unwrap().values {
        assert_eq!(v.p, Some(0.5));
    }
}

#[test]
fn rigged_sampled_p_values_stay_in_range() {
    let theta = scenario_theta();
    for rep in [-1.0, 0.0, 1.0] {
        for v in sppv(&theta, &rigged(rep), 50, 9).unwrap().values {
            let p = v.p.unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }
    let larger: f64 = (0..200)
        .map(|s| sppv(&theta, &rigged(1.0), 50, s).unwrap().values[0].p.unwrap())
        .sum::<f64>()
        / 200.0;
    assert!((larger - 51.0 / 52.0).abs() < 0.01, "{larger}");
}
