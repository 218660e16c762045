use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided p-value of `estimate / se` under a standard normal reference.
pub fn two_sided_p(estimate: f64, se: f64) -> f64 {
    if !(se > 0.0) {
        return f64::NAN;
    }
    let z = (estimate / se).abs();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(z))
}

/// `***` below 0.01, `**` below 0.05, `*` below 0.1.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableColumn {
    pub label: String,
    pub estimator: String,
    pub coefficient: f64,
    pub se: f64,
    pub p_value: f64,
    pub stars: String,
    pub n_obs: usize,
    /// "CL" for entity-clustered, "IF" for influence-function errors.
    pub se_kind: String,
    pub fixed_effects: bool,
    pub control_groups: Vec<String>,
}

impl TableColumn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: impl Into<String>,
        estimator: impl Into<String>,
        coefficient: f64,
        se: f64,
        n_obs: usize,
        se_kind: impl Into<String>,
        fixed_effects: bool,
        control_groups: Vec<String>,
    ) -> Self {
        let p_value = two_sided_p(coefficient, se);
        TableColumn {
            label: label.into(),
            estimator: estimator.into(),
            coefficient,
            se,
            p_value,
            stars: stars(p_value).to_owned(),
            n_obs,
            se_kind: se_kind.into(),
            fixed_effects,
            control_groups,
        }
    }
}

/// One coefficient of interest reported across several specifications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionTable {
    pub dependent: String,
    pub regressor: String,
    pub columns: Vec<TableColumn>,
}

impl RegressionTable {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut header = vec![String::new()];
        let mut est = vec![self.regressor.clone()];
        let mut se = vec![String::new()];
        let mut kind = vec!["SE".to_owned()];
        let mut fe = vec!["FE".to_owned()];
        let mut n = vec!["N".to_owned()];
        for (i, c) in self.columns.iter().enumerate() {
            header.push(format!("({}) {}", i + 1, c.label));
            est.push(format!("{:.4}{}", c.coefficient, c.stars));
            se.push(format!("({:.4})", c.se));
            kind.push(c.se_kind.clone());
            fe.push(if c.fixed_effects { "yes" } else { "no" }.to_owned());
            n.push(c.n_obs.to_string());
        }
        let rows = [header, est, se, kind, fe, n];
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("Dependent variable: {}\n", self.dependent);
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, w))| if j == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str("* p<.1, ** p<.05, *** p<.01\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_thresholds() {
        assert_eq!(stars(0.005), "***");
        assert_eq!(stars(0.03), "**");
        assert_eq!(stars(0.07), "*");
        assert_eq!(stars(0.2), "");
    }

    #[test]
    fn p_value_of_196_is_five_percent() {
        assert!((two_sided_p(1.959963984540054, 1.0) - 0.05).abs() < 1e-9);
        assert!(two_sided_p(1.0, 0.0).is_nan());
    }

    #[test]
    fn text_table_aligns_columns() {
        let t = RegressionTable {
            dependent: "price".into(),
            regressor: "tax".into(),
            columns: vec![
                TableColumn::new("OLS", "ols", -0.1145, 0.03, 1764, "CL", true, vec![]),
                TableColumn::new("DML-DW", "dml-dw", -0.2626, 0.2, 1764, "IF", true, vec!["housing".into()]),
            ],
        };
        let text = t.to_text();
        assert!(text.contains("-0.1145***"));
        assert!(text.contains("(0.2000)"));
        let lines: Vec<&str> = text.lines().skip(1).take(2).collect();
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
