//! Domain types for candidates, datasets, learning curves, performance
//! matrices and policies, plus ingestion/validation of the on-disk formats.
//!
//! The JSON matrix schema is authoritative:
//!
//! ```json
//! {
//!   "datasets": [{"id": "d1", "n_samples": 100, "n_features": 4,
//!                 "loss_min": 0.0, "loss_max": 1.0}],
//!   "candidates": ["c1", "c2"],
//!   "entries": [
//!     {"candidate": "c1", "dataset": "d1",
//!      "curve": [[2, 0.5, 0.6, 1.0], [4, 0.4, 0.5, 2.0]]},
//!     {"candidate": "c2", "dataset": "d1", "status": "FAILED"}
//!   ]
//! }
//! ```
//!
//! Candidate order in the file is significant: it defines the
//! "evaluated first" order used for all tie-breaking, and it is preserved
//! by [`PerformanceMatrix::to_json_string`] so results are reproducible.
//!
//! A CSV shorthand with header `candidate,dataset,val_loss,test_loss,wall_time_s`
//! produces one-checkpoint curves with budget 1; per-dataset loss bounds are
//! then computed from the observed test losses.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Descriptor of one dataset: the two meta-features used by the policy
/// selector plus the per-dataset loss bounds used for normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: String,
    pub n_samples: u64,
    pub n_features: u64,
    /// Best observed test loss on this dataset.
    pub loss_min: f64,
    /// Worst observed test loss; also the loss assigned to failed runs.
    pub loss_max: f64,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 || self.n_features < 1 {
            return Err(Error::validation(format!(
                "dataset {}: n_samples and n_features must be >= 1",
                self.id
            )));
        }
        if !self.loss_min.is_finite() || !self.loss_max.is_finite() {
            return Err(Error::validation(format!(
                "dataset {}: loss bounds must be finite",
                self.id
            )));
        }
        if self.loss_min > self.loss_max {
            return Err(Error::validation(format!(
                "dataset {}: loss_min {} > loss_max {}",
                self.id, self.loss_min, self.loss_max
            )));
        }
        Ok(())
    }
}

/// One stored intermediate result of an iterative algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub budget: u64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub wall_time_s: f64,
}

/// Checkpointed learning curve of one candidate on one dataset.
///
/// Budgets are iteration counts and strictly increasing; wall time is
/// cumulative and nondecreasing. Lookups use step-function semantics:
/// between checkpoints only the last dumped model exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, f64, f64, f64)>", into = "Vec<(u64, f64, f64, f64)>")]
pub struct LearningCurve {
    checkpoints: Vec<Checkpoint>,
}

impl LearningCurve {
    pub fn new(checkpoints: Vec<Checkpoint>) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(Error::validation("learning curve must have >= 1 checkpoint"));
        }
        for pair in checkpoints.windows(2) {
            if pair[1].budget <= pair[0].budget {
                return Err(Error::validation(format!(
                    "checkpoint budgets must be strictly increasing ({} then {})",
                    pair[0].budget, pair[1].budget
                )));
            }
            if pair[1].wall_time_s < pair[0].wall_time_s {
                return Err(Error::validation(format!(
                    "wall times must be nondecreasing ({} then {})",
                    pair[0].wall_time_s, pair[1].wall_time_s
                )));
            }
        }
        for c in &checkpoints {
            for (name, v) in [
                ("val_loss", c.val_loss),
                ("test_loss", c.test_loss),
                ("wall_time_s", c.wall_time_s),
            ] {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::validation(format!(
                        "{name} must be finite and nonnegative, got {v}"
                    )));
                }
            }
        }
        Ok(LearningCurve { checkpoints })
    }

    /// Convenience constructor from `(budget, val_loss, test_loss, wall_time_s)` tuples.
    pub fn from_tuples(points: &[(u64, f64, f64, f64)]) -> Result<Self> {
        Self::new(
            points
                .iter()
                .map(|&(budget, val_loss, test_loss, wall_time_s)| Checkpoint {
                    budget,
                    val_loss,
                    test_loss,
                    wall_time_s,
                })
                .collect(),
        )
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    /// Losses of the last checkpoint with `checkpoint.budget <= budget`.
    ///
    /// Budgets below the first checkpoint yield [`Error::NoResultYet`]; the
    /// caller maps that to the worst loss.
    pub fn at_budget(&self, budget: u64) -> Result<(f64, f64)> {
        let first = self.checkpoints[0].budget;
        if budget < first {
            return Err(Error::NoResultYet { budget, first });
        }
        let idx = self.checkpoints.partition_point(|c| c.budget <= budget);
        let c = &self.checkpoints[idx - 1];
        Ok((c.val_loss, c.test_loss))
    }

    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("curve is nonempty")
    }

    /// Last checkpoint whose cumulative wall time fits within `cap` seconds.
    pub fn last_within_wall_time(&self, cap: f64) -> Option<&Checkpoint> {
        self.checkpoints.iter().rev().find(|c| c.wall_time_s <= cap)
    }
}

impl TryFrom<Vec<(u64, f64, f64, f64)>> for LearningCurve {
    type Error = Error;
    fn try_from(points: Vec<(u64, f64, f64, f64)>) -> Result<Self> {
        LearningCurve::from_tuples(&points)
    }
}

impl From<LearningCurve> for Vec<(u64, f64, f64, f64)> {
    fn from(curve: LearningCurve) -> Self {
        curve
            .checkpoints
            .into_iter()
            .map(|c| (c.budget, c.val_loss, c.test_loss, c.wall_time_s))
            .collect()
    }
}

/// One cell of the performance matrix: a recorded curve, or a run that
/// failed (timeout/memout) and is treated as the dataset's worst loss.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixEntry {
    Curve(LearningCurve),
    Failed,
}

/// Candidates x datasets grid of checkpointed learning curves.
///
/// Candidate order is the "evaluated first" order used for tie-breaking;
/// every (candidate, dataset) pair is either present or explicitly FAILED.
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceMatrix {
    datasets: Vec<DatasetMeta>,
    candidates: Vec<String>,
    entries: HashMap<(usize, usize), MatrixEntry>,
    candidate_index: HashMap<String, usize>,
    dataset_index: HashMap<String, usize>,
}

impl PerformanceMatrix {
    pub fn new(
        datasets: Vec<DatasetMeta>,
        candidates: Vec<String>,
        entries: Vec<(String, String, MatrixEntry)>,
    ) -> Result<Self> {
        let mut dataset_index = HashMap::new();
        for (i, d) in datasets.iter().enumerate() {
            d.validate()?;
            if dataset_index.insert(d.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate dataset id \"{}\"", d.id)));
            }
        }
        let mut candidate_index = HashMap::new();
        for (i, c) in candidates.iter().enumerate() {
            if candidate_index.insert(c.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate candidate id \"{c}\"")));
            }
        }
        let mut map = HashMap::new();
        for (record, (candidate, dataset, entry)) in entries.into_iter().enumerate() {
            let ci = *candidate_index.get(&candidate).ok_or_else(|| {
                Error::parse(format!("entry {record}: unknown candidate \"{candidate}\""))
            })?;
            let di = *dataset_index.get(&dataset).ok_or_else(|| {
                Error::parse(format!("entry {record}: unknown dataset \"{dataset}\""))
            })?;
            if map.insert((ci, di), entry).is_some() {
                return Err(Error::validation(format!(
                    "duplicate entry for candidate \"{candidate}\" on dataset \"{dataset}\""
                )));
            }
        }
        for (ci, c) in candidates.iter().enumerate() {
            for (di, d) in datasets.iter().enumerate() {
                if !map.contains_key(&(ci, di)) {
                    return Err(Error::validation(format!(
                        "missing entry for candidate \"{c}\" on dataset \"{}\" \
                         (mark failed runs with status FAILED)",
                        d.id
                    )));
                }
            }
        }
        Ok(PerformanceMatrix {
            datasets,
            candidates,
            entries: map,
            candidate_index,
            dataset_index,
        })
    }

    pub fn datasets(&self) -> &[DatasetMeta] {
        &self.datasets
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.id.clone()).collect()
    }

    /// Candidate ids in "evaluated first" order.
    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn candidate_position(&self, id: &str) -> Option<usize> {
        self.candidate_index.get(id).copied()
    }

    pub fn dataset(&self, id: &str) -> Result<&DatasetMeta> {
        self.dataset_index
            .get(id)
            .map(|&i| &self.datasets[i])
            .ok_or_else(|| Error::UnknownId { kind: "dataset", id: id.to_string() })
    }

    /// Entry for a (candidate, dataset) pair. `None` for candidates the
    /// matrix never saw; evaluators treat those like FAILED runs.
    pub fn entry(&self, candidate: &str, dataset: &str) -> Option<&MatrixEntry> {
        let ci = *self.candidate_index.get(candidate)?;
        let di = *self.dataset_index.get(dataset)?;
        self.entries.get(&(ci, di))
    }

    /// Worst loss of a dataset, assigned to failed and not-yet-available runs.
    pub fn worst_loss(&self, dataset: &str) -> Result<f64> {
        Ok(self.dataset(dataset)?.loss_max)
    }

    pub fn load_json(mut source: impl Read) -> Result<Self> {
        let mut buf = String::new();
        source.read_to_string(&mut buf)?;
        Self::from_json_str(&buf)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: MatrixFile = serde_json::from_str(text)?;
        let entries = file
            .entries
            .into_iter()
            .enumerate()
            .map(|(record, e)| {
                let entry = match (e.curve, e.status) {
                    (Some(points), None) => MatrixEntry::Curve(
                        LearningCurve::from_tuples(&points).map_err(|err| {
                            Error::parse(format!(
                                "entry {record} ({}, {}): {err}",
                                e.candidate, e.dataset
                            ))
                        })?,
                    ),
                    (None, Some(status)) if status == "FAILED" => MatrixEntry::Failed,
                    (None, Some(status)) => {
                        return Err(Error::parse(format!(
                            "entry {record}: unknown status \"{status}\""
                        )))
                    }
                    _ => {
                        return Err(Error::parse(format!(
                            "entry {record}: exactly one of \"curve\" or \"status\" required"
                        )))
                    }
                };
                Ok((e.candidate, e.dataset, entry))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.datasets, file.candidates, entries)
    }

    /// Canonical JSON serialization: entries ordered by (candidate, dataset)
    /// file order, so `save(load(x)) = x` for files this crate wrote.
    pub fn to_json_string(&self) -> String {
        let entries = self
            .candidates
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| {
                self.datasets.iter().enumerate().map(move |(di, d)| {
                    match &self.entries[&(ci, di)] {
                        MatrixEntry::Curve(curve) => EntryRecord {
                            candidate: c.clone(),
                            dataset: d.id.clone(),
                            curve: Some(curve.clone().into()),
                            status: None,
                        },
                        MatrixEntry::Failed => EntryRecord {
                            candidate: c.clone(),
                            dataset: d.id.clone(),
                            curve: None,
                            status: Some("FAILED".to_string()),
                        },
                    }
                })
            })
            .collect();
        let file = MatrixFile {
            datasets: self.datasets.clone(),
            candidates: self.candidates.clone(),
            entries,
        };
        let mut out = serde_json::to_string_pretty(&file).expect("matrix serialization");
        out.push('\n');
        out
    }

    /// CSV shorthand: `candidate,dataset,val_loss,test_loss,wall_time_s`,
    /// one checkpoint per row at budget 1. Candidate/dataset order follows
    /// first appearance; pairs without a row are marked FAILED; per-dataset
    /// loss bounds come from the observed test losses; meta-feature counts
    /// default to 1.
    pub fn load_csv(source: impl Read) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut candidates: Vec<String> = Vec::new();
        let mut dataset_ids: Vec<String> = Vec::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let mut rows: Vec<(String, String, LearningCurve)> = Vec::new();
        let mut bounds: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for (record, row) in reader.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| Error::parse(format!("csv record {record}: {e}")))?;
            if !seen.insert((row.candidate.clone(), row.dataset.clone())) {
                return Err(Error::validation(format!(
                    "csv record {record}: duplicate pair (\"{}\", \"{}\")",
                    row.candidate, row.dataset
                )));
            }
            if !candidates.contains(&row.candidate) {
                candidates.push(row.candidate.clone());
            }
            if !dataset_ids.contains(&row.dataset) {
                dataset_ids.push(row.dataset.clone());
            }
            let curve = LearningCurve::from_tuples(&[(
                1,
                row.val_loss,
                row.test_loss,
                row.wall_time_s,
            )])
            .map_err(|e| Error::parse(format!("csv record {record}: {e}")))?;
            let b = bounds.entry(row.dataset.clone()).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            b.0 = b.0.min(row.test_loss);
            b.1 = b.1.max(row.test_loss);
            rows.push((row.candidate, row.dataset, curve));
        }
        if rows.is_empty() {
            return Err(Error::parse("csv matrix has no data rows"));
        }
        let datasets = dataset_ids
            .iter()
            .map(|id| {
                let (lo, hi) = bounds[id];
                DatasetMeta {
                    id: id.clone(),
                    n_samples: 1,
                    n_features: 1,
                    loss_min: lo,
                    loss_max: hi,
                }
            })
            .collect::<Vec<_>>();
        let mut entries: Vec<(String, String, MatrixEntry)> = rows
            .into_iter()
            .map(|(c, d, curve)| (c, d, MatrixEntry::Curve(curve)))
            .collect();
        for c in &candidates {
            for d in &dataset_ids {
                if !seen.contains(&(c.clone(), d.clone())) {
                    entries.push((c.clone(), d.clone(), MatrixEntry::Failed));
                }
            }
        }
        Self::new(datasets, candidates, entries)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    datasets: Vec<DatasetMeta>,
    candidates: Vec<String>,
    entries: Vec<EntryRecord>,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    candidate: String,
    dataset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    curve: Option<Vec<(u64, f64, f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<String>,
}

#[derive(Deserialize)]
struct CsvRow {
    candidate: String,
    dataset: String,
    val_loss: f64,
    test_loss: f64,
    wall_time_s: f64,
}

/// Model selection scheme of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Validation {
    Holdout,
    Cv { folds: u32 },
}

/// Budget allocation scheme of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Allocation {
    FullBudget,
    Sh { eta: f64, b_min: u64, b_max: u64 },
}

/// Default successive-halving parameters: eta 4, budgets 32..512.
pub const DEFAULT_SH: Allocation = Allocation::Sh { eta: 4.0, b_min: 32, b_max: 512 };

/// A (validation scheme, budget allocation, portfolio) triple; the unit the
/// policy selector chooses among. The standard grid is
/// {holdout, 3-fold CV, 5-fold CV, 10-fold CV} x {full budget, SH}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub validation: Validation,
    pub allocation: Allocation,
    #[serde(default)]
    pub portfolio: Portfolio,
}

impl Policy {
    pub fn new(validation: Validation, allocation: Allocation) -> Result<Self> {
        if let Validation::Cv { folds } = validation {
            if folds < 2 {
                return Err(Error::validation("cross-validation needs folds >= 2"));
            }
        }
        if let Allocation::Sh { eta, b_min, b_max } = allocation {
            if eta <= 1.0 || !eta.is_finite() {
                return Err(Error::validation("successive halving needs eta > 1"));
            }
            if b_min < 1 || b_max < b_min {
                return Err(Error::validation("successive halving needs b_max >= b_min >= 1"));
            }
        }
        Ok(Policy { validation, allocation, portfolio: Portfolio::default() })
    }

    /// Stable identifier such as `holdout-sh` or `cv3-fb`.
    pub fn id(&self) -> String {
        let v = match self.validation {
            Validation::Holdout => "holdout".to_string(),
            Validation::Cv { folds } => format!("cv{folds}"),
        };
        let a = match self.allocation {
            Allocation::FullBudget => "fb",
            Allocation::Sh { .. } => "sh",
        };
        format!("{v}-{a}")
    }

    /// Parses an id produced by [`Policy::id`]; SH policies get the default
    /// eta-4, 32..512 schedule parameters.
    pub fn parse_id(id: &str) -> Result<Self> {
        let (v, a) = id
            .rsplit_once('-')
            .ok_or_else(|| Error::parse(format!("bad policy id \"{id}\"")))?;
        let validation = if v == "holdout" {
            Validation::Holdout
        } else if let Some(k) = v.strip_prefix("cv") {
            let folds: u32 =
                k.parse().map_err(|_| Error::parse(format!("bad policy id \"{id}\"")))?;
            Validation::Cv { folds }
        } else {
            return Err(Error::parse(format!("bad policy id \"{id}\"")));
        };
        let allocation = match a {
            "fb" => Allocation::FullBudget,
            "sh" => DEFAULT_SH,
            _ => return Err(Error::parse(format!("bad policy id \"{id}\""))),
        };
        Policy::new(validation, allocation)
    }

    /// The eight standard policies, in a fixed order.
    pub fn standard_eight() -> Vec<Policy> {
        let mut out = Vec::new();
        for validation in [
            Validation::Holdout,
            Validation::Cv { folds: 3 },
            Validation::Cv { folds: 5 },
            Validation::Cv { folds: 10 },
        ] {
            for allocation in [Allocation::FullBudget, DEFAULT_SH] {
                out.push(Policy::new(validation, allocation).expect("standard policy"));
            }
        }
        out
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Ordered list of candidate ids with construction provenance: the marginal
/// objective improvement recorded when each member was inserted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Portfolio {
    members: Vec<String>,
    provenance: Vec<f64>,
}

impl Portfolio {
    pub fn new(members: Vec<String>, provenance: Vec<f64>) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert(m.clone()) {
                return Err(Error::validation(format!("duplicate portfolio member \"{m}\"")));
            }
        }
        if !provenance.is_empty() && provenance.len() != members.len() {
            return Err(Error::validation("provenance length must match members"));
        }
        Ok(Portfolio { members, provenance })
    }

    pub fn from_members(members: Vec<String>) -> Result<Self> {
        Self::new(members, Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn provenance(&self) -> &[f64] {
        &self.provenance
    }

    pub(crate) fn push(&mut self, member: String, improvement: f64) {
        debug_assert!(!self.members.contains(&member));
        self.members.push(member);
        self.provenance.push(improvement);
    }
}
