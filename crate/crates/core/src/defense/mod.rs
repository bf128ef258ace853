//! Sampling-time defense. Phase I fits, per property, a hyperplane that
//! separates intermediate chain states by the property of the sample each
//! chain ends in. Phase II shifts every chain across the hyperplane toward a
//! pre-assigned side so that the generated proportions match chosen targets.
//! A drop-to-balance baseline and its worst-case cost are included.

pub mod baseline;
pub mod guided;
pub mod hyperplane;

pub use baseline::{drop_balance_baseline, worst_case_drop_bound, Balanced};
pub use guided::{
    assign_cells, cell_option, collect_paired_states, fit_defense, guided_sample, Assignment, ContinuousGenerator,
    DefenseConfig, FittedDefense, FittedProperty, Generated, Generator, Guided, PairedStates, PropertyDefense,
};
pub use hyperplane::{fit_hyperplane, orthogonalize, shift, FitDiagnostics, Hyperplane, SvmConfig};

use serde::{Deserialize, Serialize};

use crate::attack::abs_difference;
use crate::error::Result;

/// Defended proportion of one predicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub property: String,
    pub predicate: String,
    pub gamma: f64,
    pub inferred: f64,
    pub abs_difference: f64,
    pub m: usize,
    pub assigned: usize,
}

/// Evaluate every defended predicate on the guided samples.
pub fn defense_rows(generator: &dyn Generator, defense: &FittedDefense, guided: &Guided) -> Result<Vec<DefenseRow>> {
    let m = guided.generated.len();
    let mut rows = Vec::new();
    for (i, p) in defense.properties.iter().enumerate() {
        let counts = guided.side_counts(i);
        for (c, predicate) in p.classes.iter().enumerate() {
            let hits = generator.evaluate(&guided.generated, predicate)?;
            let inferred = hits.iter().filter(|&&h| h).count() as f64 / m.max(1) as f64;
            rows.push(DefenseRow {
                property: p.id.clone(),
                predicate: predicate.id.clone(),
                gamma: p.targets[c],
                inferred,
                abs_difference: abs_difference(inferred, p.targets[c]),
                m,
                assigned: counts[c],
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::PropertyPredicate;
    use crate::diffusion::{NoiseSchedule, ScheduleKind, TrainConfig};
    use crate::numerics::NetConfig;
    use crate::samplers::{GaussianOracle, SamplerConfig};
    use crate::tabular::synthetic::mixed_toy;
    use crate::tabular::{train_tabddpm, TabularModel};

    fn oracle() -> GaussianOracle {
        let schedule = NoiseSchedule::new(ScheduleKind::VpContinuous, 1000).unwrap();
        GaussianOracle::new(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], schedule).unwrap()
    }

    fn right() -> PropertyPredicate {
        PropertyPredicate::numeric_range("x0", 0.0, 1e9).unwrap()
    }

    fn up() -> PropertyPredicate {
        PropertyPredicate::numeric_range("x1", 0.0, 1e9).unwrap()
    }

    fn tabular() -> TabularModel {
        let data = mixed_toy().generate(2000, 3).unwrap();
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        let net = NetConfig {
            hidden: vec![32, 32],
            ..NetConfig::default()
        };
        train_tabddpm(&data, &net, Some(50), &cfg, 4).unwrap().0
    }

    #[test]
    fn stratified_counts_are_exact() {
        let cells = assign_cells(&[vec![0.5, 0.5]], 1000, Assignment::Stratified, 1);
        assert_eq!(cells.iter().filter(|&&c| c == 0).count(), 500);
        let targets = vec![vec![0.5, 0.5], vec![1.0 / 3.0; 3]];
        let cells = assign_cells(&targets, 999, Assignment::Stratified, 2);
        for (i, t) in targets.iter().enumerate() {
            for (o, g) in t.iter().enumerate() {
                let n = cells.iter().filter(|&&c| cell_option(&targets, c, i) == o).count();
                assert!((n as f64 - g * 999.0).abs() < t.len() as f64, "{i} {o} {n}");
            }
        }
        let coin = assign_cells(&[vec![0.5, 0.5]], 1000, Assignment::Independent, 1);
        assert!(coin.iter().filter(|&&c| c == 0).count().abs_diff(500) < 60);
    }

    #[test]
    fn stratified_binary_is_within_rounding() {
        for m in [1, 7, 1000, 1001] {
            for g in [0.5, 0.3, 0.2] {
                let cells = assign_cells(&[vec![g, 1.0 - g]], m, Assignment::Stratified, 3);
                let pos = cells.iter().filter(|&&c| c == 0).count() as f64;
                assert!((pos - g * m as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn paired_states_preconditions() {
        let o = oracle();
        let gen = ContinuousGenerator {
            model: &o,
            sampler: SamplerConfig::ode(100),
            classifier: None,
        };
        let p = right();
        assert!(collect_paired_states(&gen, 0, 10, &[&p], 1).is_err());
        assert!(collect_paired_states(&gen, 10, 10_000, &[&p], 1).is_err());
        let never = PropertyPredicate::numeric_range("x0", 1e8, 1e9).unwrap();
        let err = collect_paired_states(&gen, 100, 10, &[&never], 1).unwrap_err();
        assert!(err.to_string().contains("degenerate training set for SVM"));
    }

    #[test]
    fn tabular_step_zero_is_the_pre_decode_state() {
        let model = tabular();
        let flag = PropertyPredicate::categorical_equals("flag", "a", 2).unwrap();
        let paired = collect_paired_states(&model, 300, 0, &[&flag], 5).unwrap();
        let decoded = model.codec.decode_dataset(&model.schema, paired.states.view()).unwrap();
        let direct = model.sample(300, None, 5).unwrap();
        assert_eq!(decoded, direct);
    }

    #[test]
    fn oracle_defense_hits_target() {
        let o = oracle();
        let gen = ContinuousGenerator {
            model: &o,
            sampler: SamplerConfig::ode(100),
            classifier: None,
        };
        // The oracle is unimodal, so the margin is no guide to the distance
        // chains must travel; shift well past the bulk instead.
        let mut prop = PropertyDefense::binary("right", right());
        prop.gamma = Some(vec![0.3]);
        prop.alpha = Some(4.0);
        let config = DefenseConfig::new(vec![prop]);
        let fitted = fit_defense(&gen, &config, 9).unwrap();
        assert_eq!(fitted.properties[0].step, 30);
        let guided = guided_sample(&gen, &fitted, 2000, 10).unwrap();
        assert_eq!(guided.side_counts(0), vec![600, 1400]);
        let rows = defense_rows(&gen, &fitted, &guided).unwrap();
        assert!(rows[0].abs_difference <= 0.02, "{rows:?}");
    }

    #[test]
    fn joint_oracle_defense() {
        let o = oracle();
        let gen = ContinuousGenerator {
            model: &o,
            sampler: SamplerConfig::ode(100),
            classifier: None,
        };
        let mut a = PropertyDefense::binary("right", right());
        a.gamma = Some(vec![0.3]);
        a.alpha = Some(4.0);
        let mut b = PropertyDefense::binary("up", up());
        b.gamma = Some(vec![0.6]);
        b.alpha = Some(4.0);
        let fitted = fit_defense(&gen, &DefenseConfig::new(vec![a, b]), 9).unwrap();
        let guided = guided_sample(&gen, &fitted, 2000, 11).unwrap();
        for row in defense_rows(&gen, &fitted, &guided).unwrap() {
            assert!(row.abs_difference <= 0.04, "{row:?}");
        }
    }

    #[test]
    fn missing_hyperplane_is_a_config_error() {
        let o = oracle();
        let gen = ContinuousGenerator {
            model: &o,
            sampler: SamplerConfig::ode(100),
            classifier: None,
        };
        let fitted = fit_defense(&gen, &DefenseConfig::new(vec![PropertyDefense::binary("r", right())]), 1).unwrap();
        let mut broken = fitted.clone();
        broken.properties[0].hyperplanes.clear();
        assert!(matches!(guided_sample(&gen, &broken, 10, 1), Err(crate::Error::Config(_))));
        let mut moved = fitted;
        moved.properties[0].hyperplanes[0].normal.push(0.0);
        assert!(matches!(guided_sample(&gen, &moved, 10, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn tabular_defense_is_exact_at_step_zero() {
        let model = tabular();
        let flag = PropertyPredicate::categorical_equals("flag", "a", 2).unwrap();
        let mut config = DefenseConfig::new(vec![PropertyDefense::binary("flag", flag)]);
        config.pairs = 500;
        let fitted = fit_defense(&model, &config, 2).unwrap();
        let guided = guided_sample(&model, &fitted, 2000, 3).unwrap();
        let rows = defense_rows(&model, &fitted, &guided).unwrap();
        assert!(rows[0].abs_difference <= 0.005, "{rows:?}");
        assert_eq!(guided.generated.len(), 2000);
    }

    #[test]
    fn alpha_scales_with_reach_by_default() {
        let o = oracle();
        let gen = ContinuousGenerator {
            model: &o,
            sampler: SamplerConfig::ode(100),
            classifier: None,
        };
        let mut prop = PropertyDefense::binary("r", right());
        let fitted = fit_defense(&gen, &DefenseConfig::new(vec![prop.clone()]), 1).unwrap();
        let p = &fitted.properties[0];
        assert!((p.alphas[0] - p.hyperplanes[0].diagnostics.reach).abs() < 1e-12);
        prop.alpha = Some(0.0);
        assert!(DefenseConfig::new(vec![prop]).validate().is_err());
    }

    #[test]
    fn guided_and_drop_baseline_agree() {
        let model = tabular();
        let flag = PropertyPredicate::categorical_equals("flag", "a", 2).unwrap();
        let mut prop = PropertyDefense::binary("flag", flag.clone());
        prop.gamma = Some(vec![0.3]);
        let mut config = DefenseConfig::new(vec![prop]);
        config.pairs = 500;
        let fitted = fit_defense(&model, &config, 2).unwrap();
        let guided = guided_sample(&model, &fitted, 2000, 3).unwrap();
        assert_eq!(guided.generated.len(), 2000);
        let defended = defense_rows(&model, &fitted, &guided).unwrap()[0].inferred;

        let plain = model.generate(2000, None, 3).unwrap();
        let hits = model.evaluate(&plain, &flag).unwrap();
        let kept = drop_balance_baseline(std::slice::from_ref(&hits), &[0.3]).unwrap();
        let dropped = kept.retained.iter().filter(|&&r| hits[r]).count() as f64 / kept.retained.len() as f64;
        assert!(kept.drop_fraction > 0.0);
        assert!((defended - 0.3).abs() <= 0.005, "guided {defended}");
        assert!((dropped - 0.3).abs() <= 0.005, "drop {dropped}");
    }

    proptest::proptest! {
        #[test]
        fn stratified_cells_within_rounding(
            raw in proptest::collection::vec(proptest::collection::vec(0.05f64..1.0, 2..5), 1..4),
            m in 1usize..3000,
            seed in 0u64..1000,
        ) {
            let targets: Vec<Vec<f64>> = raw
                .iter()
                .map(|w| {
                    let t: f64 = w.iter().sum();
                    w.iter().map(|v| v / t).collect()
                })
                .collect();
            let cells = assign_cells(&targets, m, Assignment::Stratified, seed);
            proptest::prop_assert_eq!(cells.len(), m);
            let n_cells: usize = targets.iter().map(Vec::len).product();
            for cell in 0..n_cells {
                let share: f64 = (0..targets.len()).map(|i| targets[i][cell_option(&targets, cell, i)]).product();
                let n = cells.iter().filter(|&&c| c == cell).count() as f64;
                proptest::prop_assert!((n - share * m as f64).abs() < 1.0, "cell {} has {} for {}", cell, n, share * m as f64);
            }
        }
    }
}
