use proptest::prelude::*;

use pstrat_core::linalg::Sym2;
use pstrat_core::model::{
    apply_restriction, cell_log_density, complete_data_log_posterior, log_prior, observed_data_log_likelihood,
    AugmentedState, Outcome, ThetaKernels,
};
use pstrat_core::special::norm_cdf;
use pstrat_core::{Arm, CellParams, Family, ModelSpec, ObservedDataset, Restriction, Stratum, Theta, Unit};

const FAMILIES: [Family; 3] = [Family::Univariate, Family::ContinuousContinuous, Family::ContinuousBinary];

fn cell_strategy(family: Family) -> impl Strategy<Value = CellParams> {
    (-3.0..3.0f64, -1.5..1.5f64, 0.2..3.0f64, -0.85..0.85f64, 0.2..3.0f64).prop_map(move |(m1, m2, v1, r, v2)| {
        match family {
            Family::Univariate => CellParams::univariate(m1, v1),
            Family::ContinuousContinuous => {
                CellParams { mu: [m1, m2], sigma: Sym2::new(v1, r * (v1 * v2).sqrt(), v2) }
            }
            Family::ContinuousBinary => CellParams { mu: [m1, m2], sigma: Sym2::new(v1, r * v1.sqrt(), 1.0) },
        }
    })
}

fn theta_strategy(family: Family) -> impl Strategy<Value = Theta> {
    (0.05..0.95f64, prop::array::uniform4(cell_strategy(family))).prop_map(move |(pi_c, c)| Theta {
        family,
        pi_c,
        cells: [[c[0], c[1]], [c[2], c[3]]],
    })
}

fn unit_strategy(family: Family, z: Arm) -> impl Strategy<Value = Unit> {
    (any::<bool>(), -4.0..4.0f64, -2.0..2.0f64, any::<bool>()).prop_map(move |(d, y1, y2c, y2b)| Unit {
        z,
        d: d && z == Arm::Treated,
        y1,
        y2: match family {
            Family::Univariate => None,
            Family::ContinuousContinuous => Some(y2c),
            Family::ContinuousBinary => Some(if y2b { 1.0 } else { 0.0 }),
        },
    })
}

fn case_strategy() -> impl Strategy<Value = (Theta, ObservedDataset)> {
    prop::sample::select(FAMILIES.to_vec()).prop_flat_map(|family| {
        (
            theta_strategy(family),
            prop::collection::vec(unit_strategy(family, Arm::Control), 1..=12),
            prop::collection::vec(unit_strategy(family, Arm::Treated), 0..=6),
        )
            .prop_map(|(theta, control, treated)| {
                let mut units = treated;
                units.extend(control);
                (theta, ObservedDataset::new(units))
            })
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_marginalise_to_the_observed_posterior((theta, data) in case_strategy()) {
        let spec = ModelSpec::new(theta.family, Restriction::Unrestricted).unwrap();
        let latent: Vec<usize> = (0..data.n()).filter(|&i| data.units[i].z == Arm::Control).collect();
        let m = latent.len();
        let mut terms = Vec::with_capacity(1 << m);
        for mask in 0u32..(1 << m) {
            let mut labels: Vec<Stratum> = data
                .units
                .iter()
                .map(|u| u.observed_stratum().unwrap_or(Stratum::NeverTaker))
                .collect();
            for (bit, &i) in latent.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    labels[i] = Stratum::Complier;
                }
            }
            let aug = AugmentedState { labels, y2_star: None };
            terms.push(complete_data_log_posterior(&theta, &data, &aug, &spec).unwrap());
        }
        let marginal = log_sum_exp(&terms);
        let direct = log_prior(&theta, &spec) + observed_data_log_likelihood(&theta, &data).unwrap();
        prop_assert!((marginal - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{marginal} vs {direct}");
    }

    #[test]
    fn control_units_follow_the_mixture((theta, data) in case_strategy()) {
        let k = ThetaKernels::new(&theta).unwrap();
        for u in data.units.iter().filter(|u| u.z == Arm::Control) {
            let fc = cell_log_density(u.outcome(), theta.cell(Stratum::Complier, Arm::Control), theta.family).unwrap();
            let fn_ = cell_log_density(u.outcome(), theta.cell(Stratum::NeverTaker, Arm::Control), theta.family).unwrap();
            let expected = theta.pi_c * fc.exp() + (1.0 - theta.pi_c) * fn_.exp();
            let got = k.unit_log_likelihood(u).exp();
            prop_assert!((got - expected).abs() <= 1e-12 * expected, "{got} vs {expected}");
        }
    }

    #[test]
    fn probit_margin_is_phi_of_mu2(cell in cell_strategy(Family::ContinuousBinary)) {
        let sd = cell.sigma.s11.sqrt();
        let (lo, hi) = (cell.mu[0] - 12.0 * sd, cell.mu[0] + 12.0 * sd);
        let n = 4000;
        let h = (hi - lo) / n as f64;
        let f = |y1: f64| cell_log_density(Outcome { y1, y2: 1.0 }, &cell, Family::ContinuousBinary).unwrap().exp();
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        let p = acc * h / 3.0;
        prop_assert!((p - norm_cdf(cell.mu[1])).abs() < 1e-6, "{p} vs {}", norm_cdf(cell.mu[1]));
    }

    #[test]
    fn restriction_is_idempotent(
        theta in prop::sample::select(vec![Family::ContinuousContinuous, Family::ContinuousBinary]).prop_flat_map(theta_strategy),
        per in any::<bool>(),
    ) {
        let r = if per { Restriction::Per } else { Restriction::Er };
        let spec = ModelSpec::new(theta.family, r).unwrap();
        let once = apply_restriction(&theta, &spec).unwrap();
        prop_assert_eq!(apply_restriction(&once, &spec).unwrap(), once);
    }

    #[test]
    fn er_restriction_is_idempotent_univariate(theta in theta_strategy(Family::Univariate)) {
        let spec = ModelSpec::new(Family::Univariate, Restriction::Er).unwrap();
        let once = apply_restriction(&theta, &spec).unwrap();
        prop_assert_eq!(apply_restriction(&once, &spec).unwrap(), once);
    }
}
