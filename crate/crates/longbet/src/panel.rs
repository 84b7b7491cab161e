//! Panel data containers and ingestion.
//!
//! A [`PanelDataset`] is a complete (balanced) unit-by-time panel with a
//! binary staggered-adoption treatment: once a unit is treated it stays
//! treated. Covariates are static and measured pre-treatment. The
//! [`ExposureView`] derives per-observation exposure time `s_it` (periods
//! elapsed since adoption, cumulative sum of the treatment indicator) and
//! per-unit event times.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("incomplete panel: unit {unit} is missing time {time}")]
    MissingCell { unit: String, time: i64 },
    #[error("incomplete panel: duplicate row for unit {unit} at time {time} (line {line})")]
    DuplicateCell { unit: String, time: i64, line: u64 },
    #[error("staggered-adoption violation for unit {unit}: treatment switches off at time {time}")]
    StaggeredViolation { unit: String, time: i64 },
    #[error("invalid panel: {0}")]
    Invalid(String),
    #[error("bad schema sidecar {path}: {msg}")]
    Schema { path: PathBuf, msg: String },
}

/// Per-column covariate tag. Categorical columns carry an explicit level
/// set; levels are stored as small integers but treated as unordered by
/// the forests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Categorical { levels: Vec<i64> },
}

impl CovariateKind {
    pub fn is_categorical(&self) -> bool {
        matches!(self, CovariateKind::Categorical { .. })
    }
}

/// A validated, complete unit-by-time panel.
///
/// Immutable after construction; safe to share across concurrent readers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PanelJson", into = "PanelJson")]
pub struct PanelDataset {
    n_units: usize,
    t0: i64,
    t1: i64,
    y: Array2<f64>,
    z: Array2<u8>,
    x: Array2<f64>,
    covariate_kinds: Vec<CovariateKind>,
    unit_ids: Vec<String>,
}

/// Serialized form: the JSON panel format mirrors the dataset fields with
/// matrices as nested row-major arrays.
#[derive(Serialize, Deserialize)]
struct PanelJson {
    n_units: usize,
    t0: i64,
    t1: i64,
    y: Vec<Vec<f64>>,
    z: Vec<Vec<u8>>,
    x: Vec<Vec<f64>>,
    covariate_kinds: Vec<CovariateKind>,
    unit_ids: Vec<String>,
}

impl From<PanelDataset> for PanelJson {
    fn from(p: PanelDataset) -> Self {
        let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
        PanelJson {
            n_units: p.n_units,
            t0: p.t0,
            t1: p.t1,
            y: rows(&p.y),
            z: p.z.rows().into_iter().map(|r| r.to_vec()).collect(),
            x: rows(&p.x),
            covariate_kinds: p.covariate_kinds,
            unit_ids: p.unit_ids,
        }
    }
}

impl TryFrom<PanelJson> for PanelDataset {
    type Error = PanelError;

    fn try_from(j: PanelJson) -> Result<Self, PanelError> {
        let to_array = |rows: &[Vec<f64>], what: &str| -> Result<Array2<f64>, PanelError> {
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(PanelError::Invalid(format!("ragged rows in {what}")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Array2::from_shape_vec((rows.len(), ncols), flat)
                .map_err(|e| PanelError::Invalid(format!("{what}: {e}")))
        };
        let y = to_array(&j.y, "y")?;
        let x = to_array(&j.x, "x")?;
        let zcols = j.z.first().map_or(0, Vec::len);
        if j.z.iter().any(|r| r.len() != zcols) {
            return Err(PanelError::Invalid("ragged rows in z".into()));
        }
        let z = Array2::from_shape_vec(
            (j.z.len(), zcols),
            j.z.iter().flatten().copied().collect(),
        )
        .map_err(|e| PanelError::Invalid(format!("z: {e}")))?;
        PanelDataset::new(j.t0, j.t1, y, z, x, j.covariate_kinds, j.unit_ids)
    }
}

impl PanelDataset {
    /// Builds and validates a panel. `y`, `z` are `n x T`; `x` is `n x p`.
    pub fn new(
        t0: i64,
        t1: i64,
        y: Array2<f64>,
        z: Array2<u8>,
        x: Array2<f64>,
        covariate_kinds: Vec<CovariateKind>,
        unit_ids: Vec<String>,
    ) -> Result<Self, PanelError> {
        let n = y.nrows();
        let t_len = t1 - t0 + 1;
        if t_len < 2 {
            return Err(PanelError::Invalid(format!(
                "need at least 2 periods, got t0={t0}, t1={t1}"
            )));
        }
        let t_len = t_len as usize;
        if y.ncols() != t_len || z.nrows() != n || z.ncols() != t_len || x.nrows() != n {
            return Err(PanelError::Invalid(format!(
                "dimension mismatch: y {:?}, z {:?}, x {:?}, T={}",
                y.dim(),
                z.dim(),
                x.dim(),
                t_len
            )));
        }
        if covariate_kinds.len() != x.ncols() {
            return Err(PanelError::Invalid(format!(
                "{} covariate kinds for {} columns",
                covariate_kinds.len(),
                x.ncols()
            )));
        }
        if unit_ids.len() != n {
            return Err(PanelError::Invalid(format!(
                "{} unit ids for {} units",
                unit_ids.len(),
                n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::Invalid("non-finite value in y or x".into()));
        }
        for (i, row) in z.rows().into_iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(PanelError::Invalid(format!(
                        "z must be 0/1, got {v} for unit {} at time {}",
                        unit_ids[i],
                        t0 + k as i64
                    )));
                }
                if k > 0 && v < row[k - 1] {
                    return Err(PanelError::StaggeredViolation {
                        unit: unit_ids[i].clone(),
                        time: t0 + k as i64,
                    });
                }
            }
        }
        for (j, kind) in covariate_kinds.iter().enumerate() {
            if let CovariateKind::Categorical { levels } = kind {
                if levels.is_empty() {
                    return Err(PanelError::Invalid(format!(
                        "categorical column {j} has an empty level set"
                    )));
                }
                for i in 0..n {
                    let v = x[[i, j]];
                    if v.fract() != 0.0 || !levels.contains(&(v as i64)) {
                        return Err(PanelError::Invalid(format!(
                            "unit {} column {} value {} outside declared levels {:?}",
                            unit_ids[i], j, v, levels
                        )));
                    }
                }
            }
        }
        Ok(PanelDataset {
            n_units: n,
            t0,
            t1,
            y,
            z,
            x,
            covariate_kinds,
            unit_ids,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn t1(&self) -> i64 {
        self.t1
    }

    /// Number of observed periods, `t1 - t0 + 1`.
    pub fn n_periods(&self) -> usize {
        (self.t1 - self.t0 + 1) as usize
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn z(&self) -> &Array2<u8> {
        &self.z
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn covariate_kinds(&self) -> &[CovariateKind] {
        &self.covariate_kinds
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    /// Calendar time of column `k`.
    pub fn time_at(&self, k: usize) -> i64 {
        self.t0 + k as i64
    }
}

/// Exposure times `s_it` (cumulative treatment) and per-unit adoption
/// period. `event_time[i]` is absent for never-treated units.
#[derive(Debug, Clone)]
pub struct ExposureView {
    s: Array2<u32>,
    event_time: Vec<Option<i64>>,
}

impl ExposureView {
    pub fn s(&self) -> &Array2<u32> {
        &self.s
    }

    pub fn event_time(&self, unit: usize) -> Option<i64> {
        self.event_time[unit]
    }

    pub fn event_times(&self) -> &[Option<i64>] {
        &self.event_time
    }

    /// Largest observed exposure over the whole panel (0 when untreated).
    pub fn s_max(&self) -> u32 {
        self.s.iter().copied().max().unwrap_or(0)
    }
}

/// Computes the running cumulative sum of `z` per unit and the first
/// treated period. Deterministic and idempotent given the panel.
pub fn derive_exposure(panel: &PanelDataset) -> ExposureView {
    let n = panel.n_units();
    let t_len = panel.n_periods();
    let mut s = Array2::<u32>::zeros((n, t_len));
    let mut event_time = vec![None; n];
    for i in 0..n {
        let mut acc = 0u32;
        for k in 0..t_len {
            acc += u32::from(panel.z()[[i, k]]);
            s[[i, k]] = acc;
            if acc == 1 && event_time[i].is_none() {
                event_time[i] = Some(panel.time_at(k));
            }
        }
    }
    ExposureView { s, event_time }
}

/// Partitions treated units by adoption period. Never-treated units are
/// excluded; the map is ordered by event time.
pub fn cohorts(view: &ExposureView) -> BTreeMap<i64, Vec<usize>> {
    let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, e) in view.event_times().iter().enumerate() {
        if let Some(e) = e {
            map.entry(*e).or_default().push(i);
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelFormat {
    LongCsv,
    Json,
}

impl fmt::Display for PanelFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PanelFormat::LongCsv => write!(f, "long-csv"),
            PanelFormat::Json => write!(f, "json"),
        }
    }
}

/// Optional sidecar schema for long-CSV panels, holding categorical column
/// declarations. Lives next to the CSV as `<stem>.schema.json`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub levels: HashMap<String, Vec<i64>>,
}

/// Path of the sidecar schema for a CSV panel path.
pub fn schema_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("schema.json")
}

/// Loads a panel from a long CSV (`unit,time,y,z,x1..xp`) or from the JSON
/// mirror format. For CSV, a sidecar `<stem>.schema.json` is honored when
/// present.
pub fn load_panel(path: &Path, format: PanelFormat) -> Result<PanelDataset, PanelError> {
    match format {
        PanelFormat::Json => {
            let text = fs::read_to_string(path).map_err(|e| PanelError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| PanelError::Parse {
                line: e.line() as u64,
                msg: e.to_string(),
            })
        }
        PanelFormat::LongCsv => {
            let schema = schema_path(path);
            let schema = if schema.exists() {
                let text = fs::read_to_string(&schema).map_err(|e| PanelError::Io {
                    path: schema.clone(),
                    source: e,
                })?;
                Some(serde_json::from_str(&text).map_err(|e| PanelError::Schema {
                    path: schema.clone(),
                    msg: e.to_string(),
                })?)
            } else {
                None
            };
            load_long_csv(path, schema.as_ref())
        }
    }
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: u64) -> Result<T, PanelError> {
    raw.trim().parse().map_err(|_| PanelError::Parse {
        line,
        msg: format!("non-numeric {name} field: {raw:?}"),
    })
}

/// Loads the long CSV format. Units keep their order of first appearance;
/// the time index must be complete and contiguous for every unit.
pub fn load_long_csv(path: &Path, schema: Option<&CsvSchema>) -> Result<PanelDataset, PanelError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => PanelError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => PanelError::Header(e.to_string()),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| PanelError::Header(e.to_string()))?
        .clone();
    let cols: Vec<String> = headers.iter().map(str::to_string).collect();
    if cols.len() < 4 || cols[0] != "unit" || cols[1] != "time" || cols[2] != "y" || cols[3] != "z"
    {
        return Err(PanelError::Header(format!(
            "expected columns unit,time,y,z,x1..xp, got {:?}",
            cols
        )));
    }
    let x_names: Vec<String> = cols[4..].to_vec();
    let p = x_names.len();

    struct Cell {
        y: f64,
        z: u8,
        x: Vec<f64>,
        line: u64,
    }
    let mut unit_order: Vec<String> = Vec::new();
    let mut cells: HashMap<String, BTreeMap<i64, Cell>> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| PanelError::Parse {
            line: e.position().map_or(0, csv::Position::line),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        if record.len() != cols.len() {
            return Err(PanelError::Parse {
                line,
                msg: format!("expected {} fields, got {}", cols.len(), record.len()),
            });
        }
        let unit = record[0].to_string();
        let time: i64 = parse_field(&record[1], "time", line)?;
        let y: f64 = parse_field(&record[2], "y", line)?;
        let z_raw: i64 = parse_field(&record[3], "z", line)?;
        if z_raw != 0 && z_raw != 1 {
            return Err(PanelError::Parse {
                line,
                msg: format!("z must be 0 or 1, got {z_raw}"),
            });
        }
        let mut x = Vec::with_capacity(p);
        for (j, name) in x_names.iter().enumerate() {
            x.push(parse_field::<f64>(&record[4 + j], name, line)?);
        }
        let per_unit = cells.entry(unit.clone()).or_insert_with(|| {
            unit_order.push(unit.clone());
            BTreeMap::new()
        });
        if per_unit
            .insert(
                time,
                Cell {
                    y,
                    z: z_raw as u8,
                    x,
                    line,
                },
            )
            .is_some()
        {
            return Err(PanelError::DuplicateCell { unit, time, line });
        }
    }
    if unit_order.is_empty() {
        return Err(PanelError::Invalid("empty panel file".into()));
    }

    let t0 = cells.values().flat_map(|m| m.keys()).min().copied().unwrap();
    let t1 = cells.values().flat_map(|m| m.keys()).max().copied().unwrap();
    let t_len = (t1 - t0 + 1) as usize;

    let n = unit_order.len();
    let mut y = Array2::<f64>::zeros((n, t_len));
    let mut z = Array2::<u8>::zeros((n, t_len));
    let mut x = Array2::<f64>::zeros((n, p));
    for (i, unit) in unit_order.iter().enumerate() {
        let per_unit = &cells[unit];
        for k in 0..t_len {
            let t = t0 + k as i64;
            let cell = per_unit.get(&t).ok_or_else(|| PanelError::MissingCell {
                unit: unit.clone(),
                time: t,
            })?;
            y[[i, k]] = cell.y;
            z[[i, k]] = cell.z;
            if k == 0 {
                for (j, v) in cell.x.iter().enumerate() {
                    x[[i, j]] = *v;
                }
            } else if cell.x.iter().zip(x.row(i)).any(|(a, b)| a != b) {
                return Err(PanelError::Parse {
                    line: cell.line,
                    msg: format!("covariates for unit {unit} change over time"),
                });
            }
        }
    }

    let kinds = resolve_kinds(&x_names, &x, schema)?;
    check_staggered(&z, &unit_order, t0)?;
    PanelDataset::new(t0, t1, y, z, x, kinds, unit_order)
}

/// Reports the first treated-to-untreated transition with its unit id, so
/// the loader error names the offending unit rather than a matrix index.
fn check_staggered(z: &Array2<u8>, unit_ids: &[String], t0: i64) -> Result<(), PanelError> {
    for (i, row) in z.rows().into_iter().enumerate() {
        for k in 1..row.len() {
            if row[k] < row[k - 1] {
                return Err(PanelError::StaggeredViolation {
                    unit: unit_ids[i].clone(),
                    time: t0 + k as i64,
                });
            }
        }
    }
    Ok(())
}

fn resolve_kinds(
    names: &[String],
    x: &Array2<f64>,
    schema: Option<&CsvSchema>,
) -> Result<Vec<CovariateKind>, PanelError> {
    let Some(schema) = schema else {
        return Ok(vec![CovariateKind::Continuous; names.len()]);
    };
    for declared in schema.categorical.iter().chain(schema.levels.keys()) {
        if !names.contains(declared) {
            return Err(PanelError::Invalid(format!(
                "schema declares unknown column {declared:?}"
            )));
        }
    }
    let mut kinds = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        if schema.categorical.contains(name) || schema.levels.contains_key(name) {
            let levels = match schema.levels.get(name) {
                Some(levels) => levels.clone(),
                None => {
                    // Infer the level set from observed values.
                    let mut seen: Vec<i64> = Vec::new();
                    for i in 0..x.nrows() {
                        let v = x[[i, j]];
                        if v.fract() != 0.0 {
                            return Err(PanelError::Invalid(format!(
                                "categorical column {name} has non-integer value {v}"
                            )));
                        }
                        if !seen.contains(&(v as i64)) {
                            seen.push(v as i64);
                        }
                    }
                    seen.sort_unstable();
                    seen
                }
            };
            kinds.push(CovariateKind::Categorical { levels });
        } else {
            kinds.push(CovariateKind::Continuous);
        }
    }
    Ok(kinds)
}

/// Writes the long CSV plus, when any column is categorical, the sidecar
/// schema next to it.
pub fn write_long_csv(panel: &PanelDataset, path: &Path) -> Result<(), PanelError> {
    let io_err = |e: std::io::Error| PanelError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = String::new();
    out.push_str("unit,time,y,z");
    for j in 1..=panel.n_covariates() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for i in 0..panel.n_units() {
        for k in 0..panel.n_periods() {
            out.push_str(&format!(
                "{},{},{},{}",
                panel.unit_ids()[i],
                panel.time_at(k),
                panel.y()[[i, k]],
                panel.z()[[i, k]]
            ));
            for j in 0..panel.n_covariates() {
                out.push_str(&format!(",{}", panel.x()[[i, j]]));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_err)?;

    if panel.covariate_kinds().iter().any(CovariateKind::is_categorical) {
        let mut schema = CsvSchema::default();
        for (j, kind) in panel.covariate_kinds().iter().enumerate() {
            if let CovariateKind::Categorical { levels } = kind {
                let name = format!("x{}", j + 1);
                schema.categorical.push(name.clone());
                schema.levels.insert(name, levels.clone());
            }
        }
        let sp = schema_path(path);
        fs::write(&sp, serde_json::to_string_pretty(&schema).unwrap()).map_err(|e| {
            PanelError::Io {
                path: sp.clone(),
                source: e,
            }
        })?;
    }
    Ok(())
}

/// Writes the JSON mirror format.
pub fn write_json(panel: &PanelDataset, path: &Path) -> Result<(), PanelError> {
    let text = serde_json::to_string(panel).expect("panel serializes");
    fs::write(path, text).map_err(|e| PanelError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
