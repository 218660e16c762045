//! Synthetic panels with a known treatment effect.
//!
//! ```text
//! outcome   = theta0 * treatment + lin_g(link(g . x)) + gamma_j + eta_t + u
//! treatment =                      lin_m(link(m . x)) + delta_j + xi_t  + v
//! ```
//!
//! `link` is the logistic sigmoid, or its tangent at zero for linear designs, and
//! `lin_*(s) = slope * s + intercept`. The coefficient pairs (g_i, m_i) and
//! the fixed-effect pairs (gamma_j, delta_j), (eta_t, xi_t) are bivariate
//! normal with the configured correlations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, PanelRow, RoleNames};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Sigmoid,
    /// `z / 4 + 1 / 2`, the sigmoid's tangent at zero. Keeps the default
    /// design's centering and index scale without the curvature.
    Linear,
}

impl Link {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Link::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Link::Linear => 0.25 * z + 0.5,
        }
    }
}

/// Outer linear map `slope * s + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterMap {
    pub slope: f64,
    pub intercept: f64,
}

impl OuterMap {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        self.slope * s + self.intercept
    }
}

impl Default for OuterMap {
    /// Maps the sigmoid range (0, 1) onto (-1, 1).
    fn default() -> Self {
        OuterMap {
            slope: 2.0,
            intercept: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Number of controls.
    pub k: usize,
    pub periods: usize,
    pub entities: usize,
    pub theta0: f64,
    /// Correlation of the (g_i, m_i) coefficient pairs.
    pub coef_corr: f64,
    /// Correlation of the fixed-effect pairs across the two equations.
    pub fe_corr: f64,
    pub replications: usize,
    pub noise_sd_u: f64,
    pub noise_sd_v: f64,
    /// Per-coordinate coefficient sd; `None` resolves to 1/sqrt(k).
    pub coef_sd: Option<f64>,
    pub fe_sd: f64,
    /// Multiplies the index g . x (and m . x) before the link.
    pub index_scale: f64,
    pub link: Link,
    pub outer_g: OuterMap,
    pub outer_m: OuterMap,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig::desk()
    }
}

impl DgpConfig {
    /// Reduced scale: 50 controls, 100 entities, 7 periods.
    pub fn desk() -> Self {
        DgpConfig {
            k: 50,
            periods: 7,
            entities: 100,
            theta0: -0.5,
            coef_corr: 0.25,
            fe_corr: 0.25,
            replications: 100,
            noise_sd_u: 0.5,
            noise_sd_v: 0.5,
            coef_sd: None,
            fe_sd: 0.5,
            index_scale: 1.0,
            link: Link::Sigmoid,
            outer_g: OuterMap::default(),
            outer_m: OuterMap::default(),
            seed: 0,
        }
    }

    /// Full scale: 947 controls, 290 entities, 7 periods.
    pub fn paper() -> Self {
        DgpConfig {
            k: 947,
            entities: 290,
            ..DgpConfig::desk()
        }
    }

    pub fn n_rows(&self) -> usize {
        self.entities * self.periods
    }

    pub fn resolved_coef_sd(&self) -> f64 {
        self.coef_sd.unwrap_or_else(|| 1.0 / (self.k.max(1) as f64).sqrt())
    }

    /// Copy with `coef_sd` filled in, for echoing.
    pub fn resolved(&self) -> Self {
        DgpConfig {
            coef_sd: Some(self.resolved_coef_sd()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.entities < 2 || self.periods < 2 {
            return bad("need at least 2 entities and 2 periods");
        }
        if self.replications == 0 {
            return bad("replications must be positive");
        }
        if !(self.coef_corr.abs() < 1.0) || !(self.fe_corr.abs() < 1.0) {
            return bad("correlations must lie strictly inside (-1, 1)");
        }
        // Zero noise is allowed for exact-recovery checks.
        let sds = [self.noise_sd_u, self.noise_sd_v, self.resolved_coef_sd(), self.fe_sd, self.index_scale];
        if sds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("standard deviations and index scale must be finite and nonnegative");
        }
        if !self.theta0.is_finite() {
            return bad("theta0 must be finite");
        }
        Ok(())
    }
}

/// One synthetic panel with every structural piece kept.
#[derive(Debug, Clone)]
pub struct DgpDraw {
    pub config: DgpConfig,
    pub replication: usize,
    pub panel: PanelDataset,
    pub g_coef: Vec<f64>,
    pub m_coef: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub xi: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// link(index_scale * g . x) per row.
    pub g_link: Vec<f64>,
    pub m_link: Vec<f64>,
}

fn bivariate(rng: &mut ChaCha8Rng, sd: f64, corr: f64) -> (f64, f64) {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    (sd * a, sd * (corr * a + (1.0 - corr * corr).sqrt() * b))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl DgpDraw {
    pub fn n_rows(&self) -> usize {
        self.u.len()
    }

    fn entity_period(&self, row: usize) -> (usize, usize) {
        (row / self.config.periods, row % self.config.periods)
    }

    /// Structural outcome nuisance g(x) including fixed effects, per row.
    pub fn structural_g(&self) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| {
                let (e, t) = self.entity_period(i);
                self.config.outer_g.apply(self.g_link[i]) + self.gamma[e] + self.eta[t]
            })
            .collect()
    }

    /// Treatment nuisance m(x) including fixed effects, per row.
    pub fn structural_m(&self) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| {
                let (e, t) = self.entity_period(i);
                self.config.outer_m.apply(self.m_link[i]) + self.delta[e] + self.xi[t]
            })
            .collect()
    }

    /// Rebuilds the outcome from the stored pieces.
    pub fn reassemble_outcome(&self) -> Vec<f64> {
        let tau = self.reassemble_treatment();
        self.structural_g()
            .iter()
            .zip(&tau)
            .zip(&self.u)
            .map(|((g, t), u)| self.config.theta0 * t + g + u)
            .collect()
    }

    pub fn reassemble_treatment(&self) -> Vec<f64> {
        self.structural_m().iter().zip(&self.v).map(|(m, v)| m + v).collect()
    }
}

/// Draws replication `replication` of `cfg`; a pure function of
/// (cfg.seed, replication).
pub fn draw_dgp(cfg: &DgpConfig, replication: usize) -> Result<DgpDraw> {
    cfg.validate()?;
    let mut rng = seed::rng_for(seed::derive(cfg.seed, replication as u64), seed::stream::DGP);
    let (k, j, t) = (cfg.k, cfg.entities, cfg.periods);
    let n = j * t;
    let coef_sd = cfg.resolved_coef_sd();

    let (g_coef, m_coef): (Vec<f64>, Vec<f64>) = (0..k).map(|_| bivariate(&mut rng, coef_sd, cfg.coef_corr)).unzip();
    let (gamma, delta): (Vec<f64>, Vec<f64>) = (0..j).map(|_| bivariate(&mut rng, cfg.fe_sd, cfg.fe_corr)).unzip();
    let (eta, xi): (Vec<f64>, Vec<f64>) = (0..t).map(|_| bivariate(&mut rng, cfg.fe_sd, cfg.fe_corr)).unzip();
    let x = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = normal_vec(&mut rng, n, cfg.noise_sd_u);
    let v = normal_vec(&mut rng, n, cfg.noise_sd_v);

    let mut g_link = Vec::with_capacity(n);
    let mut m_link = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let zg: f64 = row.iter().zip(&g_coef).map(|(a, b)| a * b).sum();
        let zm: f64 = row.iter().zip(&m_coef).map(|(a, b)| a * b).sum();
        g_link.push(cfg.link.apply(cfg.index_scale * zg));
        m_link.push(cfg.link.apply(cfg.index_scale * zm));
    }

    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        let (e, p) = (i / t, i % t);
        let tau = cfg.outer_m.apply(m_link[i]) + delta[e] + xi[p] + v[i];
        let g = cfg.outer_g.apply(g_link[i]) + gamma[e] + eta[p];
        treatment.push(tau);
        outcome.push(cfg.theta0 * tau + g + u[i]);
    }

    let entity_labels: Vec<String> = (1..=j).map(|e| e.to_string()).collect();
    let period_labels: Vec<String> = (1..=t).map(|p| p.to_string()).collect();
    let control_names: Vec<String> = (1..=k).map(|c| format!("x{c}")).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let panel = PanelDataset::from_rows(
        (0..n).map(|i| PanelRow {
            entity: &entity_labels[i / t],
            period: &period_labels[i % t],
            outcome: outcome[i],
            treatment: treatment[i],
            controls: &rows[i],
            class: None,
        }),
        control_names,
        BTreeMap::new(),
        RoleNames::default(),
    )?;
    let draw = DgpDraw {
        config: cfg.clone(),
        replication,
        panel,
        g_coef,
        m_coef,
        gamma,
        eta,
        delta,
        xi,
        u,
        v,
        g_link,
        m_link,
    };
    Ok(draw)
}

/// Known structural pieces written next to an exported panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    pub theta0: f64,
    pub replication: usize,
    pub config: DgpConfig,
    pub g_coef: Vec<f64>,
    pub m_coef: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub xi: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Paths written by [`export_dgp_csv`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportPaths {
    pub csv: PathBuf,
    pub schema: PathBuf,
    pub truth: PathBuf,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

/// Writes the panel CSV, a schema sidecar (`<stem>.schema.json`) and the
/// truth sidecar (`<stem>.truth.json`).
pub fn export_dgp_csv(draw: &DgpDraw, path: impl AsRef<Path>) -> Result<ExportPaths> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("export path is empty".into()));
    }
    draw.panel.write_csv(path)?;
    let schema_path = sidecar(path, "schema");
    draw.panel.schema().write_json_file(&schema_path)?;
    let truth = DgpTruth {
        theta0: draw.config.theta0,
        replication: draw.replication,
        config: draw.config.resolved(),
        g_coef: draw.g_coef.clone(),
        m_coef: draw.m_coef.clone(),
        gamma: draw.gamma.clone(),
        eta: draw.eta.clone(),
        delta: draw.delta.clone(),
        xi: draw.xi.clone(),
        u: draw.u.clone(),
        v: draw.v.clone(),
    };
    let truth_path = sidecar(path, "truth");
    let file = std::fs::File::create(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
    serde_json::to_writer_pretty(file, &truth)?;
    Ok(ExportPaths {
        csv: path.to_path_buf(),
        schema: schema_path,
        truth: truth_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DgpConfig {
        DgpConfig {
            k: 8,
            entities: 10,
            periods: 3,
            seed: 4,
            ..DgpConfig::desk()
        }
    }

    #[test]
    fn draws_are_deterministic_per_replication() {
        let a = draw_dgp(&small(), 2).unwrap();
        let b = draw_dgp(&small(), 2).unwrap();
        let c = draw_dgp(&small(), 3).unwrap();
        assert_eq!(a.panel, b.panel);
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn construction_identity_holds() {
        let d = draw_dgp(&small(), 0).unwrap();
        for (a, b) in d.reassemble_outcome().iter().zip(d.panel.outcome()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(d.panel.n_rows(), 30);
        assert_eq!(d.panel.n_controls(), 8);
        assert!(d.g_link.iter().chain(&d.m_link).all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn coefficient_correlation_near_target() {
        let cfg = DgpConfig { k: 947, ..small() };
        let d = draw_dgp(&cfg, 0).unwrap();
        let n = d.g_coef.len() as f64;
        let mg = d.g_coef.iter().sum::<f64>() / n;
        let mm = d.m_coef.iter().sum::<f64>() / n;
        let cov: f64 = d.g_coef.iter().zip(&d.m_coef).map(|(a, b)| (a - mg) * (b - mm)).sum();
        let vg: f64 = d.g_coef.iter().map(|a| (a - mg).powi(2)).sum();
        let vm: f64 = d.m_coef.iter().map(|b| (b - mm).powi(2)).sum();
        let r = cov / (vg * vm).sqrt();
        assert!((r - 0.25).abs() < 0.10, "corr {r}");
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(draw_dgp(&DgpConfig { coef_corr: 1.0, ..small() }, 0).is_err());
        assert!(draw_dgp(&DgpConfig { noise_sd_u: -1.0, ..small() }, 0).is_err());
        assert!(draw_dgp(&DgpConfig { entities: 1, ..small() }, 0).is_err());
    }

    #[test]
    fn empty_export_path_errors() {
        let d = draw_dgp(&small(), 0).unwrap();
        assert!(matches!(export_dgp_csv(&d, ""), Err(Error::InvalidArgument(_))));
    }
}
