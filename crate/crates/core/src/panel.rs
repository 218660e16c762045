//! Panel ingestion and preparation: loading, standardization, fixed-effect
//! encoding, subsetting and the random splits used by cross-fitting and
//! network training.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Thematic group of a control column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlGroup {
    Housing,
    Migration,
    Political,
    Labor,
    Demographic,
    Economic,
    PublicFinance,
    PsInputs,
    PsOutputs,
    Schooling,
    Standard,
}

impl ControlGroup {
    pub const ALL: [ControlGroup; 11] = [
        ControlGroup::Housing,
        ControlGroup::Migration,
        ControlGroup::Political,
        ControlGroup::Labor,
        ControlGroup::Demographic,
        ControlGroup::Economic,
        ControlGroup::PublicFinance,
        ControlGroup::PsInputs,
        ControlGroup::PsOutputs,
        ControlGroup::Schooling,
        ControlGroup::Standard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlGroup::Housing => "housing",
            ControlGroup::Migration => "migration",
            ControlGroup::Political => "political",
            ControlGroup::Labor => "labor",
            ControlGroup::Demographic => "demographic",
            ControlGroup::Economic => "economic",
            ControlGroup::PublicFinance => "public_finance",
            ControlGroup::PsInputs => "ps_inputs",
            ControlGroup::PsOutputs => "ps_outputs",
            ControlGroup::Schooling => "schooling",
            ControlGroup::Standard => "standard",
        }
    }
}

impl fmt::Display for ControlGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControlGroup::ALL
            .iter()
            .copied()
            .find(|g| g.as_str() == s.trim())
            .ok_or_else(|| Error::Schema(format!("unknown control group {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountyClass {
    Urban,
    Rural,
}

impl FromStr for CountyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "urban" => Ok(CountyClass::Urban),
            "rural" => Ok(CountyClass::Rural),
            other => Err(Error::Schema(format!("unknown county class {other:?}"))),
        }
    }
}

impl fmt::Display for CountyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountyClass::Urban => "urban",
            CountyClass::Rural => "rural",
        })
    }
}

/// Column roles for a panel CSV, read from the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub entity: String,
    pub period: String,
    pub outcome: String,
    pub treatment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_column: Option<String>,
    #[serde(default)]
    pub groups: BTreeMap<String, ControlGroup>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn write_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

/// Rectangular entity-by-period panel.
///
/// Rows keep their file order; `entity_index[i]` and `period_index[i]`
/// point into the ordinal level lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    entities: Vec<String>,
    periods: Vec<String>,
    entity_index: Vec<usize>,
    period_index: Vec<usize>,
    outcome: Vec<f64>,
    treatment: Vec<f64>,
    controls: DMatrix<f64>,
    control_names: Vec<String>,
    control_groups: BTreeMap<String, ControlGroup>,
    county_class: Option<Vec<CountyClass>>,
    names: RoleNames,
}

/// Column names used for the non-control roles when writing back to CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleNames {
    pub entity: String,
    pub period: String,
    pub outcome: String,
    pub treatment: String,
    pub class_column: Option<String>,
}

impl Default for RoleNames {
    fn default() -> Self {
        RoleNames {
            entity: "entity".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            treatment: "treatment".into(),
            class_column: None,
        }
    }
}

/// Row-level record of a CSV line dropped at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    /// 1-based line number in the file, header is line 1.
    pub line: usize,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rejected: Vec<RejectedRow>,
}

/// Per-row raw record used to build a dataset.
pub struct PanelRow<'a> {
    pub entity: &'a str,
    pub period: &'a str,
    pub outcome: f64,
    pub treatment: f64,
    pub controls: &'a [f64],
    pub class: Option<CountyClass>,
}

fn is_missing(field: &str) -> bool {
    matches!(
        field.trim(),
        "" | "NA" | "na" | "N/A" | "NaN" | "nan" | "null" | "NULL" | "."
    )
}

/// Orders labels numerically when every label parses as a number, otherwise
/// lexicographically.
fn ordinal_levels<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut levels: Vec<String> = labels
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_owned)
        .collect();
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.trim().parse().ok()).collect();
    if let Some(keys) = numeric {
        let mut paired: Vec<(f64, String)> = keys.into_iter().zip(levels).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        levels = paired.into_iter().map(|(_, l)| l).collect();
    }
    levels
}

impl PanelDataset {
    /// Builds and validates a panel from in-memory rows.
    pub fn from_rows<'a>(
        rows: impl IntoIterator<Item = PanelRow<'a>>,
        control_names: Vec<String>,
        control_groups: BTreeMap<String, ControlGroup>,
        names: RoleNames,
    ) -> Result<Self> {
        let rows: Vec<PanelRow<'a>> = rows.into_iter().collect();
        let k = control_names.len();
        let entities = ordinal_levels(rows.iter().map(|r| r.entity));
        let periods = ordinal_levels(rows.iter().map(|r| r.period));
        let entity_pos: HashMap<&str, usize> =
            entities.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let period_pos: HashMap<&str, usize> =
            periods.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();

        let n = rows.len();
        let mut seen = BTreeSet::new();
        let mut entity_index = Vec::with_capacity(n);
        let mut period_index = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        let mut treatment = Vec::with_capacity(n);
        let mut controls = DMatrix::zeros(n, k);
        let any_class = rows.iter().any(|r| r.class.is_some());
        let mut entity_class: Vec<Option<CountyClass>> = vec![None; entities.len()];

        for (i, row) in rows.iter().enumerate() {
            if row.controls.len() != k {
                return Err(Error::Dimension(format!(
                    "row {i} has {} controls, expected {k}",
                    row.controls.len()
                )));
            }
            let e = entity_pos[row.entity];
            let p = period_pos[row.period];
            if !seen.insert((e, p)) {
                return Err(Error::DuplicateRow {
                    entity: row.entity.to_owned(),
                    period: row.period.to_owned(),
                });
            }
            if !row.outcome.is_finite() || !row.treatment.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite outcome or treatment in row {i}"
                )));
            }
            for (j, &x) in row.controls.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite value in control {:?}, row {i}",
                        control_names[j]
                    )));
                }
                controls[(i, j)] = x;
            }
            if any_class {
                let class = row.class.ok_or_else(|| {
                    Error::Schema(format!("row {i} lacks a county class label"))
                })?;
                match entity_class[e] {
                    None => entity_class[e] = Some(class),
                    Some(c) if c != class => {
                        return Err(Error::Schema(format!(
                            "entity {:?} carries more than one county class",
                            row.entity
                        )))
                    }
                    Some(_) => {}
                }
            }
            entity_index.push(e);
            period_index.push(p);
            outcome.push(row.outcome);
            treatment.push(row.treatment);
        }

        let county_class = if any_class {
            Some(entity_class.into_iter().map(|c| c.expect("every entity has a row")).collect())
        } else {
            None
        };

        Ok(PanelDataset {
            entities,
            periods,
            entity_index,
            period_index,
            outcome,
            treatment,
            controls,
            control_names,
            control_groups,
            county_class,
            names,
        })
    }

    /// Reads a panel CSV with column roles given by `schema`.
    ///
    /// Rows with a missing required field are dropped and listed in the
    /// report. Every remaining non-role column becomes a control.
    pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<(Self, LoadReport)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = reader.headers()?.clone();

        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("column {name:?} not found in {}", path.display())))
        };
        let entity_col = find(&schema.entity)?;
        let period_col = find(&schema.period)?;
        let outcome_col = find(&schema.outcome)?;
        let treatment_col = find(&schema.treatment)?;
        let class_col = schema.class_column.as_deref().map(find).transpose()?;
        let role_cols: BTreeSet<usize> = [Some(entity_col), Some(period_col), Some(outcome_col), Some(treatment_col), class_col]
            .into_iter()
            .flatten()
            .collect();
        let control_cols: Vec<usize> = (0..headers.len()).filter(|c| !role_cols.contains(c)).collect();
        let control_names: Vec<String> = control_cols.iter().map(|&c| headers[c].to_owned()).collect();
        for col in schema.groups.keys() {
            if !control_names.contains(col) {
                return Err(Error::Schema(format!(
                    "group mapping names {col:?}, which is not a control column"
                )));
            }
        }

        struct Parsed {
            entity: String,
            period: String,
            outcome: f64,
            treatment: f64,
            controls: Vec<f64>,
            class: Option<CountyClass>,
        }

        let parse_num = |field: &str, column: &str, line: usize| -> Result<f64> {
            field.parse::<f64>().map_err(|_| Error::NonNumeric {
                column: column.to_owned(),
                line,
                value: field.to_owned(),
            })
        };

        let mut report = LoadReport::default();
        let mut parsed = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let line = record.position().map_or(i + 2, |p| p.line() as usize);
            report.rows_read += 1;
            let mut missing = Vec::new();
            let mut check = |col: usize| {
                let field = record.get(col).unwrap_or("");
                if is_missing(field) {
                    missing.push(headers[col].to_owned());
                }
            };
            for &c in role_cols.iter().chain(control_cols.iter()) {
                check(c);
            }
            if !missing.is_empty() {
                report.rejected.push(RejectedRow { line, missing });
                continue;
            }
            let outcome = parse_num(&record[outcome_col], &schema.outcome, line)?;
            let treatment = parse_num(&record[treatment_col], &schema.treatment, line)?;
            let controls = control_cols
                .iter()
                .zip(&control_names)
                .map(|(&c, name)| parse_num(&record[c], name, line))
                .collect::<Result<Vec<_>>>()?;
            let class = class_col.map(|c| record[c].parse()).transpose()?;
            parsed.push(Parsed {
                entity: record[entity_col].to_owned(),
                period: record[period_col].to_owned(),
                outcome,
                treatment,
                controls,
                class,
            });
        }

        let names = RoleNames {
            entity: schema.entity.clone(),
            period: schema.period.clone(),
            outcome: schema.outcome.clone(),
            treatment: schema.treatment.clone(),
            class_column: schema.class_column.clone(),
        };
        let dataset = PanelDataset::from_rows(
            parsed.iter().map(|p| PanelRow {
                entity: &p.entity,
                period: &p.period,
                outcome: p.outcome,
                treatment: p.treatment,
                controls: &p.controls,
                class: p.class,
            }),
            control_names,
            schema.groups.clone(),
            names,
        )?;
        if dataset.n_entities() < 2 || dataset.n_periods() < 2 {
            return Err(Error::TooSmall(format!(
                "need at least 2 entities and 2 periods, found {} and {}",
                dataset.n_entities(),
                dataset.n_periods()
            )));
        }
        Ok((dataset, report))
    }

    /// Writes the panel back to CSV using the role names it was built with.
    /// Values use the shortest representation that round-trips exactly.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec![
            self.names.entity.clone(),
            self.names.period.clone(),
            self.names.outcome.clone(),
            self.names.treatment.clone(),
        ];
        if let (Some(col), Some(_)) = (&self.names.class_column, &self.county_class) {
            header.push(col.clone());
        }
        header.extend(self.control_names.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            record.push(self.entities[self.entity_index[i]].clone());
            record.push(self.periods[self.period_index[i]].clone());
            record.push(self.outcome[i].to_string());
            record.push(self.treatment[i].to_string());
            if let (Some(_), Some(classes)) = (&self.names.class_column, &self.county_class) {
                record.push(classes[self.entity_index[i]].to_string());
            }
            record.extend(self.controls.row(i).iter().map(|x| x.to_string()));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Schema that reads back what [`write_csv`](Self::write_csv) emits.
    pub fn schema(&self) -> Schema {
        Schema {
            entity: self.names.entity.clone(),
            period: self.names.period.clone(),
            outcome: self.names.outcome.clone(),
            treatment: self.names.treatment.clone(),
            class_column: self.county_class.as_ref().and(self.names.class_column.clone()),
            groups: self.control_groups.clone(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.ncols()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    /// Entity level of each row.
    pub fn entity_index(&self) -> &[usize] {
        &self.entity_index
    }

    pub fn period_index(&self) -> &[usize] {
        &self.period_index
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treatment(&self) -> &[f64] {
        &self.treatment
    }

    pub fn controls(&self) -> &DMatrix<f64> {
        &self.controls
    }

    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }

    pub fn control_groups(&self) -> &BTreeMap<String, ControlGroup> {
        &self.control_groups
    }

    pub fn county_class(&self) -> Option<&[CountyClass]> {
        self.county_class.as_deref()
    }

    pub fn role_names(&self) -> &RoleNames {
        &self.names
    }

    /// Groups present among the control columns.
    pub fn groups_present(&self) -> BTreeSet<ControlGroup> {
        self.control_groups.values().copied().collect()
    }

    /// Resolves a column by name to a role.
    pub fn column(&self, name: &str) -> Option<Column> {
        if name == self.names.outcome {
            Some(Column::Outcome)
        } else if name == self.names.treatment {
            Some(Column::Treatment)
        } else {
            self.control_names.iter().position(|c| c == name).map(Column::Control)
        }
    }

    pub fn column_values(&self, column: Column) -> Vec<f64> {
        match column {
            Column::Outcome => self.outcome.clone(),
            Column::Treatment => self.treatment.clone(),
            Column::Control(j) => self.controls.column(j).iter().copied().collect(),
        }
    }

    fn column_name(&self, column: Column) -> String {
        match column {
            Column::Outcome => self.names.outcome.clone(),
            Column::Treatment => self.names.treatment.clone(),
            Column::Control(j) => self.control_names[j].clone(),
        }
    }

    fn set_column(&mut self, column: Column, values: &[f64]) {
        match column {
            Column::Outcome => self.outcome.copy_from_slice(values),
            Column::Treatment => self.treatment.copy_from_slice(values),
            Column::Control(j) => {
                for (dst, &v) in self.controls.column_mut(j).iter_mut().zip(values) {
                    *dst = v;
                }
            }
        }
    }

    /// Re-roles the panel: `outcome` and `treatment` name any two columns,
    /// and the controls become the columns listed in `keep_controls` (by
    /// name), excluding the two chosen columns. The previous outcome and
    /// treatment become ordinary (ungrouped) controls when kept.
    pub fn with_roles(&self, outcome: &str, treatment: &str, keep_controls: &[String]) -> Result<Self> {
        let y = self
            .column(outcome)
            .ok_or_else(|| Error::Schema(format!("unknown outcome column {outcome:?}")))?;
        let d = self
            .column(treatment)
            .ok_or_else(|| Error::Schema(format!("unknown treatment column {treatment:?}")))?;
        if y == d {
            return Err(Error::Schema("outcome and treatment must differ".into()));
        }
        let mut cols = Vec::with_capacity(keep_controls.len());
        for name in keep_controls {
            if name == outcome || name == treatment {
                continue;
            }
            let c = self
                .column(name)
                .ok_or_else(|| Error::Schema(format!("unknown control column {name:?}")))?;
            cols.push((name.clone(), c));
        }
        let n = self.n_rows();
        let mut controls = DMatrix::zeros(n, cols.len());
        for (j, (_, c)) in cols.iter().enumerate() {
            for (i, v) in self.column_values(*c).into_iter().enumerate() {
                controls[(i, j)] = v;
            }
        }
        let control_names: Vec<String> = cols.into_iter().map(|(n, _)| n).collect();
        let control_groups = self
            .control_groups
            .iter()
            .filter(|(k, _)| control_names.contains(k))
            .map(|(k, g)| (k.clone(), *g))
            .collect();
        let mut out = self.clone();
        out.outcome = self.column_values(y);
        out.treatment = self.column_values(d);
        out.controls = controls;
        out.control_names = control_names;
        out.control_groups = control_groups;
        out.names.outcome = outcome.to_owned();
        out.names.treatment = treatment.to_owned();
        Ok(out)
    }

    /// Keeps only the control columns whose group is in `groups`. Ungrouped
    /// columns are dropped.
    pub fn select_groups(&self, groups: &BTreeSet<ControlGroup>) -> Result<Self> {
        let present = self.groups_present();
        if let Some(g) = groups.iter().find(|g| !present.contains(g)) {
            return Err(Error::Schema(format!("control group {g} has no columns in this panel")));
        }
        let keep: Vec<usize> = self
            .control_names
            .iter()
            .enumerate()
            .filter(|(_, name)| self.control_groups.get(*name).is_some_and(|g| groups.contains(g)))
            .map(|(j, _)| j)
            .collect();
        let mut out = self.clone();
        out.controls = self.controls.select_columns(&keep);
        out.control_names = keep.iter().map(|&j| self.control_names[j].clone()).collect();
        out.control_groups.retain(|k, _| out.control_names.contains(k));
        Ok(out)
    }

    /// Rows `rows` of the panel, in the given order. Level lists are
    /// recomputed so they only contain levels that still occur.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyPanel("row selection is empty".into()));
        }
        let controls = self.controls.select_rows(rows);
        let controls_per_row: Vec<Vec<f64>> =
            (0..rows.len()).map(|i| controls.row(i).iter().copied().collect()).collect();
        let class = self.county_class.as_ref();
        PanelDataset::from_rows(
            rows.iter().zip(&controls_per_row).map(|(&i, c)| PanelRow {
                entity: &self.entities[self.entity_index[i]],
                period: &self.periods[self.period_index[i]],
                outcome: self.outcome[i],
                treatment: self.treatment[i],
                controls: c,
                class: class.map(|cl| cl[self.entity_index[i]]),
            }),
            self.control_names.clone(),
            self.control_groups.clone(),
            self.names.clone(),
        )
    }
}

/// A numeric column of a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Column {
    Outcome,
    Treatment,
    Control(usize),
}

impl Column {
    /// Outcome, treatment and every control of `d`.
    pub fn all(d: &PanelDataset) -> Vec<Column> {
        let mut cols = vec![Column::Outcome, Column::Treatment];
        cols.extend((0..d.n_controls()).map(Column::Control));
        cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Location and scale used to standardize each selected column.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub entries: Vec<(Column, ColumnStats)>,
}

impl StandardizationStats {
    /// Maps standardized columns back to their original units.
    pub fn invert(&self, d: &PanelDataset) -> PanelDataset {
        let mut out = d.clone();
        for (col, st) in &self.entries {
            let vals: Vec<f64> = d.column_values(*col).iter().map(|z| z * st.sd + st.mean).collect();
            out.set_column(*col, &vals);
        }
        out
    }

    pub fn get(&self, column: Column) -> Option<&ColumnStats> {
        self.entries.iter().find(|(c, _)| *c == column).map(|(_, s)| s)
    }
}

/// Mean and sample standard deviation (denominator n - 1).
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Centers and scales the selected columns to sample mean 0 and sample
/// standard deviation 1.
pub fn standardize(d: &PanelDataset, columns: &[Column]) -> Result<(PanelDataset, StandardizationStats)> {
    let mut out = d.clone();
    let mut entries = Vec::with_capacity(columns.len());
    for &col in columns {
        let vals = d.column_values(col);
        let (mean, sd) = mean_sd(&vals);
        let name = d.column_name(col);
        // Relative threshold: a column equal to a constant up to round-off.
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ZeroVariance(name));
        }
        let z: Vec<f64> = vals.iter().map(|v| (v - mean) / sd).collect();
        out.set_column(col, &z);
        entries.push((col, ColumnStats { name, mean, sd }));
    }
    Ok((out, StandardizationStats { entries }))
}

/// Intercept plus drop-first entity and period dummies.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffectDesign {
    /// N x (1 + (J-1) + (T-1)), columns ordered intercept, entities, periods.
    pub matrix: DMatrix<f64>,
    pub reference_entity: String,
    pub reference_period: String,
    pub column_names: Vec<String>,
}

impl FixedEffectDesign {
    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn rows(&self, rows: &[usize]) -> DMatrix<f64> {
        self.matrix.select_rows(rows)
    }
}

/// Encodes entity and period fixed effects with the first level of each
/// factor as reference.
pub fn encode_fixed_effects(d: &PanelDataset) -> Result<FixedEffectDesign> {
    encode_fixed_effects_with_reference(d, 0, 0)
}

/// As [`encode_fixed_effects`] with explicit reference levels.
pub fn encode_fixed_effects_with_reference(
    d: &PanelDataset,
    reference_entity: usize,
    reference_period: usize,
) -> Result<FixedEffectDesign> {
    let (j, t) = (d.n_entities(), d.n_periods());
    if j < 2 || t < 2 {
        return Err(Error::TooSmall(format!(
            "fixed effects need at least 2 entities and 2 periods, found {j} and {t}"
        )));
    }
    if reference_entity >= j || reference_period >= t {
        return Err(Error::InvalidArgument("reference level out of range".into()));
    }
    let n = d.n_rows();
    let p = 1 + (j - 1) + (t - 1);
    let mut m = DMatrix::zeros(n, p);
    let col_of = |level: usize, reference: usize| if level < reference { level } else { level - 1 };
    for i in 0..n {
        m[(i, 0)] = 1.0;
        let e = d.entity_index[i];
        if e != reference_entity {
            m[(i, 1 + col_of(e, reference_entity))] = 1.0;
        }
        let q = d.period_index[i];
        if q != reference_period {
            m[(i, j + col_of(q, reference_period))] = 1.0;
        }
    }
    let mut column_names = vec!["intercept".to_owned()];
    column_names.extend(
        d.entities
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != reference_entity)
            .map(|(_, e)| format!("entity[{e}]")),
    );
    column_names.extend(
        d.periods
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != reference_period)
            .map(|(_, q)| format!("period[{q}]")),
    );
    Ok(FixedEffectDesign {
        matrix: m,
        reference_entity: d.entities[reference_entity].clone(),
        reference_period: d.periods[reference_period].clone(),
        column_names,
    })
}

/// Main sample `main` (I) and auxiliary sample `aux` (I^c), both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CrossFitSplit {
    pub main: Vec<usize>,
    pub aux: Vec<usize>,
}

impl CrossFitSplit {
    /// The same partition with the two halves exchanged.
    pub fn swapped(&self) -> CrossFitSplit {
        CrossFitSplit {
            main: self.aux.clone(),
            aux: self.main.clone(),
        }
    }
}

/// Uniform random halving of `0..n`; `main` gets the extra row when `n` is
/// odd.
pub fn split_crossfit(n: usize, seed: u64) -> Result<CrossFitSplit> {
    if n < 2 {
        return Err(Error::TooSmall(format!("cross-fitting needs at least 2 rows, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_for(seed, seed::stream::CROSSFIT));
    let half = n.div_ceil(2);
    let mut main = idx[..half].to_vec();
    let mut aux = idx[half..].to_vec();
    main.sort_unstable();
    aux.sort_unstable();
    Ok(CrossFitSplit { main, aux })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainValSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Holds out `round(0.2 n)` of `rows` for validation.
pub fn split_train_val(rows: &[usize], seed: u64) -> Result<TrainValSplit> {
    if rows.len() < 5 {
        return Err(Error::TooSmall(format!(
            "train/validation split needs at least 5 rows, got {}",
            rows.len()
        )));
    }
    let mut idx = rows.to_vec();
    idx.shuffle(&mut seed::rng_for(seed, seed::stream::TRAIN_VAL));
    let n_val = (0.2 * rows.len() as f64).round() as usize;
    let validation = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok(TrainValSplit { train, validation })
}

/// Rows whose entity carries `class`.
pub fn subset_by_class(d: &PanelDataset, class: CountyClass) -> Result<PanelDataset> {
    let classes = d
        .county_class
        .as_ref()
        .ok_or_else(|| Error::Schema("panel has no county class labels".into()))?;
    let rows: Vec<usize> = (0..d.n_rows())
        .filter(|&i| classes[d.entity_index[i]] == class)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyPanel(format!("no {class} entities in panel")));
    }
    d.select_rows(&rows)
}
