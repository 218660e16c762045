use std::collections::{BTreeMap, BTreeSet};

use dmlpanel_core::dml::{
    dml_estimate, dml_estimate_with, estimate_effect, fit_nuisances, DmlConfig, DmlSample, NuisanceKind,
    OracleNuisances,
};
use dmlpanel_core::linear::{ols_fit, ClusterSpec};
use dmlpanel_core::monte_carlo::{draw_dgp, DgpConfig, Link};
use dmlpanel_core::panel::{encode_fixed_effects, split_crossfit, ControlGroup, PanelDataset, PanelRow, RoleNames};
use dmlpanel_core::{seed, Error};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn linear_dgp(entities: usize, periods: usize, k: usize, noise: f64, seed_v: u64) -> DgpConfig {
    DgpConfig {
        k,
        entities,
        periods,
        noise_sd_u: noise,
        noise_sd_v: noise,
        link: Link::Linear,
        replications: 1,
        seed: seed_v,
        ..DgpConfig::desk()
    }
}

fn out_of_sample_r2(pred: &[f64], actual: &[f64]) -> f64 {
    let m = actual.iter().sum::<f64>() / actual.len() as f64;
    let tss: f64 = actual.iter().map(|a| (a - m).powi(2)).sum();
    let rss: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    1.0 - rss / tss
}

#[test]
fn ols_nuisances_fit_linear_designs() {
    let draw = draw_dgp(&linear_dgp(200, 10, 5, 0.1, 3), 0).unwrap();
    let sample = DmlSample::from_panel(&draw.panel).unwrap();
    let split = split_crossfit(sample.n_rows(), 1).unwrap();
    let models = fit_nuisances(&sample, &split.aux, &NuisanceKind::Ols, 1).unwrap();
    let l_hat = models.outcome.predict(&sample, &split.main).unwrap();
    let m_hat = models.treatment.predict(&sample, &split.main).unwrap();
    let at = |v: &[f64]| split.main.iter().map(|&i| v[i]).collect::<Vec<_>>();
    assert!(out_of_sample_r2(&l_hat, &at(&sample.outcome)) > 0.9);
    assert!(out_of_sample_r2(&m_hat, &at(&sample.treatment)) > 0.9);
}

#[test]
fn oracle_nuisances_land_within_three_se() {
    let draw = draw_dgp(&DgpConfig { seed: 77, ..DgpConfig::paper() }, 0).unwrap();
    let sample = DmlSample::from_panel(&draw.panel).unwrap();
    let oracle = OracleNuisances {
        g: draw.structural_g(),
        m: draw.structural_m(),
    };
    let r = dml_estimate_with(&sample, &oracle, 1, 5).unwrap();
    assert!((r.theta_median + 0.5).abs() < 3.0 * r.standard_error);
}

#[test]
fn ols_crossfit_covers_at_three_se() {
    let cfg = linear_dgp(200, 10, 5, 0.5, 41);
    let reps = 200;
    let mut hits = 0;
    for r in 0..reps {
        let draw = draw_dgp(&cfg, r).unwrap();
        let sample = DmlSample::from_panel(&draw.panel).unwrap();
        let est = dml_estimate_with(&sample, &NuisanceKind::Ols, 1, r as u64).unwrap();
        if (est.theta_median - cfg.theta0).abs() < 3.0 * est.standard_error {
            hits += 1;
        }
    }
    assert!(hits as f64 >= 0.95 * reps as f64, "{hits}/{reps}");
}

#[test]
fn fifty_one_repetitions_report_the_26th_order_statistic() {
    let draw = draw_dgp(&linear_dgp(30, 5, 3, 0.5, 2), 0).unwrap();
    let sample = DmlSample::from_panel(&draw.panel).unwrap();
    let r = dml_estimate(&sample, &DmlConfig::new(NuisanceKind::Ols, 51, 9)).unwrap();
    assert_eq!(r.per_repetition_thetas.len(), 51);
    assert_eq!(r.seeds, (10..=60).collect::<Vec<u64>>());
    let mut sorted = r.per_repetition_thetas.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(r.theta_median, sorted[25]);
    assert!(r.standard_error > 0.0);
}

/// Panel with two housing controls, one labor control and one standard
/// control, all linear in the outcome and treatment equations.
fn grouped_panel(seed_v: u64, shift: f64) -> PanelDataset {
    let mut rng = seed::rng(seed_v);
    let (j, t) = (40, 6);
    let e: Vec<String> = (0..j).map(|i| format!("m{i}")).collect();
    let p: Vec<String> = (0..t).map(|i| (2010 + i).to_string()).collect();
    let gamma: Vec<f64> = (0..j).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut rows = Vec::new();
    for i in 0..j * t {
        let x: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let tau = 0.4 * x[0] - 0.3 * x[2] + gamma[i / t] + 0.5 * rng.sample::<f64, _>(StandardNormal);
        let y = -0.5 * tau + 0.3 * x[0] + 0.2 * x[1] - 0.4 * x[2] + gamma[i / t]
            + 0.5 * rng.sample::<f64, _>(StandardNormal);
        rows.push((i, x, tau, y));
    }
    let groups = BTreeMap::from([
        ("sales".to_string(), ControlGroup::Housing),
        ("vacancy".to_string(), ControlGroup::Housing),
        ("jobs".to_string(), ControlGroup::Labor),
        ("pop".to_string(), ControlGroup::Standard),
    ]);
    PanelDataset::from_rows(
        rows.iter().map(|(i, x, tau, y)| PanelRow {
            entity: &e[i / t],
            period: &p[i % t],
            outcome: *y,
            treatment: *tau + shift,
            controls: x,
            class: None,
        }),
        vec!["sales".into(), "vacancy".into(), "jobs".into(), "pop".into()],
        groups,
        RoleNames {
            outcome: "price".into(),
            treatment: "tax".into(),
            ..RoleNames::default()
        },
    )
    .unwrap()
}

#[test]
fn group_selection_restricts_controls() {
    let d = grouped_panel(1, 0.0);
    let cfg = DmlConfig::new(NuisanceKind::Ols, 3, 0);
    let housing = BTreeSet::from([ControlGroup::Housing]);
    let est = estimate_effect(&d, "price", "tax", Some(&housing), &cfg).unwrap();
    assert_eq!(est.n_controls, 2);
    assert_eq!(est.control_groups, vec!["housing".to_string()]);
    let all = estimate_effect(&d, "price", "tax", None, &cfg).unwrap();
    assert_eq!(all.n_controls, 4);
    let missing = BTreeSet::from([ControlGroup::Schooling]);
    assert!(matches!(
        estimate_effect(&d, "price", "tax", Some(&missing), &cfg),
        Err(Error::Schema(_))
    ));
}

#[test]
fn shifting_the_treatment_leaves_the_effect_unchanged() {
    let d = grouped_panel(2, 0.0);
    let cfg = DmlConfig::new(NuisanceKind::Ols, 5, 3);
    let base = estimate_effect(&d, "price", "tax", None, &cfg).unwrap();
    let shifted = grouped_panel(2, 7.25);
    let moved = estimate_effect(&shifted, "price", "tax", None, &cfg).unwrap();
    assert!((base.result.theta_median - moved.result.theta_median).abs() < 1e-8);
}

#[test]
fn no_controls_agrees_with_fixed_effect_ols() {
    let d = grouped_panel(3, 0.0);
    let cfg = DmlConfig::new(NuisanceKind::Ols, 11, 4);
    let dml = estimate_effect(&d, "price", "tax", Some(&BTreeSet::new()), &cfg).unwrap();
    assert_eq!(dml.n_controls, 0);

    // Same standardization as estimate_effect applies.
    let z = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        v.iter().map(|x| (x - m) / sd).collect::<Vec<_>>()
    };
    let fe = encode_fixed_effects(&d).unwrap();
    let n = d.n_rows();
    let mut x = DMatrix::zeros(n, fe.ncols() + 1);
    x.column_mut(0).copy_from_slice(&z(d.treatment()));
    x.columns_mut(1, fe.ncols()).copy_from(&fe.matrix);
    let fit = ols_fit(&x, &DVector::from_vec(z(d.outcome())))
        .unwrap()
        .with_clustered_covariance(&x, &ClusterSpec::new(d.entity_index().to_vec()))
        .unwrap();
    let se_ols = fit.std_errors()[0];
    let gap = (fit.coefficients[0] - dml.result.theta_median).abs();
    let joint = (se_ols.powi(2) + dml.result.standard_error.powi(2)).sqrt();
    assert!(gap < 3.0 * joint, "gap {gap}, joint se {joint}");
}
