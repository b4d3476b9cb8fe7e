//! Observation records, dataset validation, fold plans and run configuration.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreatmentKind {
    Binary,
    Continuous,
}

/// One unit: outcome, treatment, covariates and optional instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub a: f64,
    pub x: Vec<f64>,
    pub s: Option<f64>,
}

impl Observation {
    pub fn new(y: f64, a: f64) -> Self {
        Observation { y, a, x: Vec::new(), s: None }
    }

    pub fn with_x(mut self, x: Vec<f64>) -> Self {
        self.x = x;
        self
    }

    pub fn with_s(mut self, s: f64) -> Self {
        self.s = Some(s);
        self
    }

    /// Treated arm indicator; only meaningful for binary data.
    pub fn arm(&self) -> u8 {
        u8::from(self.a == 1.0)
    }
}

/// A validated, schema-homogeneous collection of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    rows: Vec<Observation>,
    treatment_kind: TreatmentKind,
    x_dim: usize,
    has_instrument: bool,
}

impl Dataset {
    /// Validates rows directly (same rules as [`validate_dataset`]).
    pub fn from_rows(rows: Vec<Observation>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        if rows.len() < 2 {
            return Err(Error::HeterogeneousSchema(
                "a dataset needs at least two rows".into(),
            ));
        }
        let x_dim = rows[0].x.len();
        let has_instrument = rows[0].s.is_some();
        for (i, r) in rows.iter().enumerate() {
            if r.x.len() != x_dim || r.s.is_some() != has_instrument {
                return Err(Error::HeterogeneousSchema(format!(
                    "row {i} differs from row 0 in covariate dimension or instrument presence"
                )));
            }
            check_finite("y", i, r.y)?;
            check_finite("a", i, r.a)?;
            for (j, v) in r.x.iter().enumerate() {
                check_finite(&format!("x{}", j + 1), i, *v)?;
            }
            if let Some(s) = r.s {
                check_finite("s", i, s)?;
            }
        }
        let binary = rows.iter().all(|r| r.a == 0.0 || r.a == 1.0);
        let treatment_kind = if binary {
            TreatmentKind::Binary
        } else {
            TreatmentKind::Continuous
        };
        Ok(Dataset { rows, treatment_kind, x_dim, has_instrument })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn treatment_kind(&self) -> TreatmentKind {
        self.treatment_kind
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn has_instrument(&self) -> bool {
        self.has_instrument
    }

    pub fn ys(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn treatments(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.a).collect()
    }

    pub fn covariates(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.x.clone()).collect()
    }

    pub fn instruments(&self) -> Result<Vec<f64>> {
        self.rows.iter().map(|r| r.s.ok_or(Error::MissingInstrument)).collect()
    }

    /// Rows at `idx`, keeping schema and treatment kind of the parent.
    ///
    /// Unlike [`Dataset::from_rows`] this accepts fewer than two rows, since
    /// cross-fitting folds may legitimately be tiny.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            treatment_kind: self.treatment_kind,
            x_dim: self.x_dim,
            has_instrument: self.has_instrument,
        }
    }

    /// Same outcomes, treatments and instruments with covariates replaced,
    /// e.g. by a learned latent score.
    pub fn with_covariates(&self, x: &[Vec<f64>]) -> Result<Dataset> {
        if x.len() != self.n() {
            return Err(Error::LengthMismatch(x.len(), self.n()));
        }
        let x_dim = x.first().map_or(0, Vec::len);
        let rows = self
            .rows
            .iter()
            .zip(x)
            .map(|(r, xi)| Observation { x: xi.clone(), ..r.clone() })
            .collect();
        Ok(Dataset { rows, treatment_kind: self.treatment_kind, x_dim, has_instrument: self.has_instrument })
    }

    /// Column-typed table view with canonical column names.
    pub fn to_table(&self) -> Table {
        let mut columns = vec!["y".to_string(), "a".to_string()];
        columns.extend((1..=self.x_dim).map(|j| format!("x{j}")));
        if self.has_instrument {
            columns.push("s".into());
        }
        let data = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![r.y, r.a];
                v.extend_from_slice(&r.x);
                if let Some(s) = r.s {
                    v.push(s);
                }
                v
            })
            .collect();
        Table { columns, data }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.to_table().write_csv(w)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        validate_dataset(&Table::read_csv(r)?)
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::read_csv(f)
    }
}

fn check_finite(column: &str, row: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteValue { column: column.to_string(), row })
    }
}

/// Raw numeric table: named columns, row-major values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), data: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        self.data.push(row);
    }

    fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.trim() == name)
    }

    /// Reads a headed CSV. Empty or unparsable cells become NaN so that
    /// validation reports them with their position.
    pub fn read_csv<R: Read>(r: R) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut data = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(Error::HeterogeneousSchema(format!(
                    "record has {} fields, header has {}",
                    rec.len(),
                    columns.len()
                )));
            }
            data.push(rec.iter().map(|f| f.parse::<f64>().unwrap_or(f64::NAN)).collect());
        }
        Ok(Table { columns, data })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.columns)?;
        for row in &self.data {
            wtr.write_record(row.iter().map(|v| format_float(*v)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal representation.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Builds a [`Dataset`] from a raw table with columns `y`, `a`, optional
/// `x1..xd` and optional `s`. Binary iff every treatment is exactly 0 or 1.
pub fn validate_dataset(table: &Table) -> Result<Dataset> {
    let iy = table.column_index("y").ok_or_else(|| Error::MissingColumn("y".into()))?;
    let ia = table.column_index("a").ok_or_else(|| Error::MissingColumn("a".into()))?;
    let is = table.column_index("s");
    let mut ix = Vec::new();
    for j in 1.. {
        match table.column_index(&format!("x{j}")) {
            Some(i) => ix.push(i),
            None => break,
        }
    }
    let stray = table
        .columns
        .iter()
        .filter(|c| {
            let c = c.trim();
            c.starts_with('x') && c[1..].parse::<usize>().is_ok_and(|j| j == 0 || j > ix.len())
        })
        .count();
    if stray > 0 {
        return Err(Error::HeterogeneousSchema("covariate columns must be numbered x1..xd without gaps".into()));
    }
    if table.data.is_empty() {
        return Err(Error::EmptyTable);
    }
    let rows = table
        .data
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != table.columns.len() {
                return Err(Error::HeterogeneousSchema(format!("row {i} has {} cells", r.len())));
            }
            Ok(Observation {
                y: r[iy],
                a: r[ia],
                x: ix.iter().map(|&j| r[j]).collect(),
                s: is.map(|j| r[j]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_rows(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldMode {
    Double,
    Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoldRole {
    Representation,
    Nuisance,
    Evaluation,
}

/// Random partition of rows into folds, plus the role each fold plays in
/// each cross-fitting rotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub mode: FoldMode,
    /// `role_of_fold[rotation][fold]`
    pub role_of_fold: Vec<Vec<FoldRole>>,
    /// `index_map[row]` is the fold of `row`.
    pub index_map: Vec<usize>,
}

impl FoldPlan {
    pub fn n_rotations(&self) -> usize {
        self.role_of_fold.len()
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.index_map.len()).filter(|&i| self.index_map[i] == fold).collect()
    }

    /// Rows whose fold plays `role` in `rotation`, in ascending row order.
    pub fn rows_with_role(&self, rotation: usize, role: FoldRole) -> Vec<usize> {
        let roles = &self.role_of_fold[rotation];
        (0..self.index_map.len()).filter(|&i| roles[self.index_map[i]] == role).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.index_map {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Partitions `0..n` into `k` folds via a seeded uniform permutation.
///
/// Double mode yields `k` rotations, each holding out one fold for
/// evaluation. Triple mode splits the folds into thirds and rotates the
/// (representation, nuisance, evaluation) roles so each fold serves every
/// role exactly once.
pub fn make_folds(n: usize, k: usize, mode: FoldMode, seed: u64) -> Result<FoldPlan> {
    match mode {
        FoldMode::Double if k < 2 => return Err(Error::BadFoldCount(format!("double cross-fitting needs k >= 2, got {k}"))),
        FoldMode::Triple if k < 3 || !k.is_multiple_of(3) => {
            return Err(Error::BadFoldCount(format!("triple cross-fitting needs k >= 3 divisible by 3, got {k}")))
        }
        _ => {}
    }
    if n < k {
        return Err(Error::BadFoldCount(format!("{k} folds over {n} rows leaves empty folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    let mut index_map = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        index_map[row] = pos % k;
    }
    let role_of_fold = match mode {
        FoldMode::Double => (0..k)
            .map(|r| (0..k).map(|f| if f == r { FoldRole::Evaluation } else { FoldRole::Nuisance }).collect())
            .collect(),
        FoldMode::Triple => {
            let group = k / 3;
            let cycle = [FoldRole::Representation, FoldRole::Nuisance, FoldRole::Evaluation];
            (0..3)
                .map(|r| (0..k).map(|f| cycle[(f / group + 3 - r) % 3]).collect())
                .collect()
        }
    };
    Ok(FoldPlan { k, mode, role_of_fold, index_map })
}

/// Which estimators a run computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorFlags {
    pub plugin: bool,
    pub dr_direct: bool,
    pub dr_smooth_upper: bool,
    pub dr_smooth_lower: bool,
    pub marginal: bool,
    pub outcome_regression: bool,
    pub ipw: bool,
    pub dr: bool,
    pub gps_ipw: bool,
    pub dr_density: bool,
    pub dr_kernel: bool,
    pub twosls: bool,
}

impl Default for EstimatorFlags {
    fn default() -> Self {
        EstimatorFlags {
            plugin: true,
            dr_direct: true,
            dr_smooth_upper: true,
            dr_smooth_lower: true,
            marginal: true,
            outcome_regression: true,
            ipw: true,
            dr: true,
            gps_ipw: true,
            dr_density: true,
            dr_kernel: true,
            twosls: true,
        }
    }
}

/// Evaluation grid: threshold pairs for bound estimators, doses for curves.
/// Empty lists mean "derive the default from the data".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalGrid {
    pub thresholds: Vec<(f64, f64)>,
    pub doses: Vec<f64>,
}

/// IV-VAE hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Treatment-decoder log-variance (standardized scale): learned, or
    /// held fixed. `Auto` fixes it at 2 for binary treatments, where a
    /// learnable or small variance lets the latent absorb the 0/1 treatment.
    pub treatment_logvar: LogvarMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogvarMode {
    #[default]
    Auto,
    Learned,
    Fixed(f64),
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 1,
            hidden: vec![32, 32],
            beta: 1.0,
            lambda: 10.0,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 300,
            treatment_logvar: LogvarMode::Auto,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("vae.latent_dim must be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("vae.hidden sizes must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("vae.beta and vae.lambda must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("vae.learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("vae.batch_size must be >= 2".into()));
        }
        if let LogvarMode::Fixed(v) = self.treatment_logvar {
            if !(v.abs() <= 10.0) {
                return Err(Error::InvalidConfig("vae.treatment_logvar must lie in [-10, 10]".into()));
            }
        }
        Ok(())
    }
}

/// Run-wide settings; serialized verbatim as the `--config` JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Folds for triple cross-fitting.
    pub k_folds: usize,
    /// Folds for double cross-fitting in the bound pipelines.
    pub bounds_folds: usize,
    pub smoothing_t: f64,
    pub clip_eps: f64,
    pub grid: EvalGrid,
    pub replications: usize,
    pub estimators: EstimatorFlags,
    pub vae: VaeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            k_folds: 6,
            bounds_folds: 5,
            smoothing_t: 50.0,
            clip_eps: 0.01,
            grid: EvalGrid::default(),
            replications: 100,
            estimators: EstimatorFlags::default(),
            vae: VaeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::InvalidConfig(format!("k_folds must be >= 2, got {}", self.k_folds)));
        }
        if self.bounds_folds < 2 {
            return Err(Error::InvalidConfig(format!("bounds_folds must be >= 2, got {}", self.bounds_folds)));
        }
        if !(self.smoothing_t > 0.0 && self.smoothing_t.is_finite()) {
            return Err(Error::InvalidConfig("smoothing_t must be a positive finite number".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(Error::InvalidConfig("clip_eps must lie in (0, 0.5)".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if self.grid.thresholds.iter().any(|(a, b)| !a.is_finite() || !b.is_finite())
            || self.grid.doses.iter().any(|d| !d.is_finite())
        {
            return Err(Error::InvalidConfig("grid values must be finite".into()));
        }
        self.vae.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
