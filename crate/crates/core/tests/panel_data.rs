use std::collections::BTreeMap;
use std::io::Write;

use dmlpanel_core::monte_carlo::{draw_dgp, export_dgp_csv, DgpConfig, DgpTruth};
use dmlpanel_core::panel::{
    encode_fixed_effects, split_crossfit, split_train_val, standardize, Column, PanelDataset, PanelRow, RoleNames,
    Schema,
};
use dmlpanel_core::Error;
use nalgebra::DMatrix;

fn grid_panel(j: usize, t: usize) -> PanelDataset {
    let e: Vec<String> = (0..j).map(|i| format!("e{i:03}")).collect();
    let p: Vec<String> = (0..t).map(|i| (2010 + i).to_string()).collect();
    let empty: [f64; 0] = [];
    PanelDataset::from_rows(
        (0..j * t).map(|i| PanelRow {
            entity: &e[i / t],
            period: &p[i % t],
            outcome: i as f64,
            treatment: (i % 5) as f64,
            controls: &empty,
            class: None,
        }),
        vec![],
        BTreeMap::new(),
        RoleNames::default(),
    )
    .unwrap()
}

/// Rank by Gaussian elimination with partial pivoting; written separately
/// from the QR path used by the estimators.
fn elimination_rank(m: &DMatrix<f64>) -> usize {
    let mut a: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    let (rows, cols) = m.shape();
    let mut rank = 0;
    for c in 0..cols {
        let pivot = (rank..rows).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()));
        let Some(p) = pivot else { break };
        if a[p][c].abs() < 1e-9 {
            continue;
        }
        a.swap(rank, p);
        for r in rank + 1..rows {
            let f = a[r][c] / a[rank][c];
            if f != 0.0 {
                for k in c..cols {
                    a[r][k] -= f * a[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn fixed_effect_design_is_full_rank_at_full_scale() {
    let d = grid_panel(290, 7);
    let fe = encode_fixed_effects(&d).unwrap();
    assert_eq!(fe.matrix.nrows(), 2030);
    // 289 entity dummies and 6 period dummies next to the intercept.
    assert_eq!(fe.ncols() - 1, 295);
    assert_eq!(elimination_rank(&fe.matrix), fe.ncols());
}

#[test]
fn fixed_effect_rank_small_grids() {
    for (j, t) in [(2, 2), (3, 2), (2, 5), (7, 4), (11, 3)] {
        let fe = encode_fixed_effects(&grid_panel(j, t)).unwrap();
        assert_eq!(fe.ncols(), j + t - 1);
        assert_eq!(elimination_rank(&fe.matrix), j + t - 1, "J={j} T={t}");
        for i in 0..fe.matrix.nrows() {
            let s: f64 = fe.matrix.row(i).sum();
            assert!((1.0..=3.0).contains(&s));
        }
    }
}

#[test]
fn exported_dgp_round_trips() {
    let cfg = DgpConfig {
        k: 5,
        entities: 10,
        periods: 3,
        seed: 11,
        ..DgpConfig::desk()
    };
    let draw = draw_dgp(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = export_dgp_csv(&draw, dir.path().join("panel.csv")).unwrap();
    let schema = Schema::from_json_file(&paths.schema).unwrap();
    let (back, report) = PanelDataset::load_csv(&paths.csv, &schema).unwrap();
    assert!(report.rejected.is_empty());
    assert_eq!(back.n_rows(), 30);
    assert_eq!(back.n_controls(), 5);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    assert!(close(back.outcome(), draw.panel.outcome()));
    assert!(close(back.treatment(), draw.panel.treatment()));
    assert!(close(back.controls().as_slice(), draw.panel.controls().as_slice()));
    assert_eq!(back.entity_index(), draw.panel.entity_index());
    assert_eq!(back.period_index(), draw.panel.period_index());

    let truth: DgpTruth = serde_json::from_reader(std::fs::File::open(&paths.truth).unwrap()).unwrap();
    assert_eq!(truth.theta0, -0.5);
    assert_eq!(truth.u, draw.u);
}

fn write_csv(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
    path
}

fn basic_schema() -> Schema {
    Schema {
        entity: "muni".into(),
        period: "year".into(),
        outcome: "price".into(),
        treatment: "tax".into(),
        class_column: None,
        groups: BTreeMap::new(),
    }
}

#[test]
fn minimal_panel_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_csv(
        dir.path(),
        "a.csv",
        "muni,year,price,tax,pop\na,2010,1.0,0.5,3\na,2011,1.5,0.6,4\nb,2010,2.0,0.7,5\nb,2011,2.5,0.8,6\n",
    );
    let (d, report) = PanelDataset::load_csv(&p, &basic_schema()).unwrap();
    assert_eq!((d.n_rows(), d.n_controls()), (4, 1));
    assert_eq!(report.rows_read, 4);
}

#[test]
fn duplicate_rows_name_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_csv(
        dir.path(),
        "dup.csv",
        "muni,year,price,tax\na,2010,1,1\na,2010,2,2\nb,2010,1,1\nb,2011,1,1\n",
    );
    match PanelDataset::load_csv(&p, &basic_schema()) {
        Err(Error::DuplicateRow { entity, period }) => assert_eq!((entity.as_str(), period.as_str()), ("a", "2010")),
        other => panic!("expected duplicate error, got {other:?}"),
    }
}

#[test]
fn missing_fields_are_reported_not_imputed() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_csv(
        dir.path(),
        "na.csv",
        "muni,year,price,tax,pop\na,2010,1,1,1\na,2011,NA,1,2\nb,2010,1,1,3\nb,2011,1,2,4\nc,2010,1,3,\nc,2011,2,1,5\n",
    );
    let (d, report) = PanelDataset::load_csv(&p, &basic_schema()).unwrap();
    assert_eq!(d.n_rows(), 4);
    let lines: Vec<usize> = report.rejected.iter().map(|r| r.line).collect();
    assert_eq!(lines, vec![3, 6]);
    assert_eq!(report.rejected[0].missing, vec!["price".to_string()]);
}

#[test]
fn non_numeric_and_missing_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_csv(
        dir.path(),
        "bad.csv",
        "muni,year,price,tax\na,2010,1,1\na,2011,cheap,1\nb,2010,1,1\nb,2011,1,1\n",
    );
    assert!(matches!(
        PanelDataset::load_csv(&p, &basic_schema()),
        Err(Error::NonNumeric { .. })
    ));
    assert!(matches!(
        PanelDataset::load_csv(dir.path().join("nope.csv"), &basic_schema()),
        Err(Error::Io { .. })
    ));
}

#[test]
fn standardize_hand_values() {
    let e = ["a", "b", "c"];
    let d = PanelDataset::from_rows(
        (0..6).map(|i| PanelRow {
            entity: e[i / 2],
            period: if i % 2 == 0 { "1" } else { "2" },
            outcome: [1.0, 2.0, 3.0, 1.0, 2.0, 3.0][i],
            treatment: i as f64,
            controls: &[],
            class: None,
        }),
        vec![],
        BTreeMap::new(),
        RoleNames::default(),
    )
    .unwrap();
    let (s, stats) = standardize(&d, &[Column::Outcome]).unwrap();
    let st = stats.get(Column::Outcome).unwrap();
    assert!((st.mean - 2.0).abs() < 1e-15);
    // Sample sd of [1,2,3,1,2,3] with N-1 = 5.
    assert!((st.sd - (4.0f64 / 5.0).sqrt()).abs() < 1e-15);
    let (again, _) = standardize(&s, &[Column::Outcome]).unwrap();
    for (a, b) in again.outcome().iter().zip(s.outcome()) {
        assert!((a - b).abs() < 1e-10);
    }
    let back = stats.invert(&s);
    for (a, b) in back.outcome().iter().zip(d.outcome()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn split_sizes_follow_rounding_rules() {
    let s = split_crossfit(1764, 5).unwrap();
    assert_eq!((s.main.len(), s.aux.len()), (882, 882));
    let rows: Vec<usize> = (0..882).collect();
    let tv = split_train_val(&rows, 5).unwrap();
    assert_eq!((tv.train.len(), tv.validation.len()), (706, 176));
    let ten: Vec<usize> = (0..10).collect();
    let tv = split_train_val(&ten, 1).unwrap();
    assert_eq!((tv.train.len(), tv.validation.len()), (8, 2));
    assert!(split_train_val(&ten[..4], 1).is_err());
    assert!(split_crossfit(1, 0).is_err());
}

#[test]
fn different_seeds_give_different_splits() {
    let base = split_crossfit(100, 0).unwrap();
    let differing = (1..=100).filter(|&s| split_crossfit(100, s).unwrap() != base).count();
    assert!(differing >= 99);
}
