//! Observed right-censored competing-risks data and the discrete time grid.
//!
//! A subject carries baseline covariates, a binary treatment, the observed
//! follow-up time and an event code (`0` for censoring, `1..=J` for the cause
//! observed). Follow-up beyond the horizon is administratively censored at the
//! horizon, since nothing past it enters the target parameter.
//!
//! All hazards, risks and integrals live on a [`TimeGrid`]: the sorted union of
//! the observed times and the requested target times. Interval `q` (0-based) is
//! `(s_q, s_{q+1}]` with `s_0 = 0`, and curves are indexed by grid point with
//! index `0` standing for time zero.

use std::collections::{BinaryHeap, HashMap};
use std::io::Read;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subject {
    pub id: String,
    pub covariates: Vec<f64>,
    pub treatment: u8,
    pub followup_time: f64,
    /// `0` is censored, `1..=J` is the observed cause.
    pub event_code: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    subjects: Vec<Subject>,
    num_causes: usize,
    horizon: f64,
}

impl Dataset {
    /// Validates the subjects and applies administrative censoring at `horizon`.
    pub fn new(mut subjects: Vec<Subject>, num_causes: usize, horizon: f64) -> Result<Self> {
        if num_causes == 0 {
            return Err(Error::InvalidDataset("at least one cause is required".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidDataset(format!("horizon must be positive, got {horizon}")));
        }
        if subjects.is_empty() {
            return Err(Error::InvalidDataset("no subjects".into()));
        }
        let p = subjects[0].covariates.len();
        for s in subjects.iter_mut() {
            if s.covariates.len() != p {
                return Err(Error::InvalidDataset(format!(
                    "subject {} has {} covariates, expected {p}",
                    s.id,
                    s.covariates.len()
                )));
            }
            if s.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset(format!("subject {} has a non-finite covariate", s.id)));
            }
            if !(s.followup_time.is_finite() && s.followup_time > 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "subject {} has non-positive follow-up time {}",
                    s.id, s.followup_time
                )));
            }
            if s.treatment > 1 {
                return Err(Error::InvalidDataset(format!("subject {} has treatment {}", s.id, s.treatment)));
            }
            if s.event_code > num_causes {
                return Err(Error::InvalidDataset(format!(
                    "subject {} has event code {} but only {num_causes} causes",
                    s.id, s.event_code
                )));
            }
            if s.followup_time > horizon {
                s.followup_time = horizon;
                s.event_code = 0;
            }
        }
        if !subjects.iter().any(|s| s.event_code >= 1) {
            return Err(Error::InvalidDataset("no events observed before the horizon".into()));
        }
        Ok(Self { subjects, num_causes, horizon })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn num_causes(&self) -> usize {
        self.num_causes
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_covariates(&self) -> usize {
        self.subjects[0].covariates.len()
    }

    /// Observed event times (any cause), sorted and deduplicated.
    pub fn event_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> =
            self.subjects.iter().filter(|s| s.event_code > 0).map(|s| s.followup_time).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

/// Column mapping for [`parse_dataset`].
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub event: String,
    pub treatment: String,
    /// Covariate columns; `None` takes every remaining column in header order.
    pub covariates: Option<Vec<String>>,
    /// Number of causes `J`; `None` infers it from the largest event code.
    pub num_causes: Option<usize>,
    pub horizon: f64,
}

impl CsvSchema {
    /// The `id,time,event,treatment,x1,…,xp` layout.
    pub fn standard(horizon: f64) -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            event: "event".into(),
            treatment: "treatment".into(),
            covariates: None,
            num_causes: None,
            horizon,
        }
    }
}

pub fn parse_dataset<R: Read>(source: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let column = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::MalformedRow { line: 1, message: format!("missing column `{name}`") })
    };
    let id_col = column(&schema.id)?;
    let time_col = column(&schema.time)?;
    let event_col = column(&schema.event)?;
    let treat_col = column(&schema.treatment)?;
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| column(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|i| ![id_col, time_col, event_col, treat_col].contains(i)).collect(),
    };

    let mut subjects = Vec::new();
    let mut max_event = 0usize;
    for (row, record) in reader.records().enumerate() {
        // header is line 1
        let line = record.as_ref().ok().and_then(|r| r.position()).map(|p| p.line() as usize).unwrap_or(row + 2);
        let record = record?;
        let field = |col: usize, what: &str| -> Result<&str> {
            match record.get(col) {
                Some(v) if !v.is_empty() && !v.eq_ignore_ascii_case("na") => Ok(v),
                _ => Err(Error::MalformedRow { line, message: format!("missing value for {what}") }),
            }
        };
        let number = |col: usize, what: &str| -> Result<f64> {
            let raw = field(col, what)?;
            raw.parse::<f64>()
                .map_err(|_| Error::MalformedRow { line, message: format!("{what} `{raw}` is not a number") })
        };
        let id = field(id_col, "id")?.to_string();
        let time = number(time_col, "time")?;
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::MalformedRow { line, message: format!("time must be positive, got {time}") });
        }
        let event_raw = field(event_col, "event")?;
        let event_code: usize = event_raw
            .parse()
            .map_err(|_| Error::MalformedRow { line, message: format!("event `{event_raw}` is not a cause code") })?;
        if let Some(j) = schema.num_causes {
            if event_code > j {
                return Err(Error::MalformedRow {
                    line,
                    message: format!("event code {event_code} outside 0..={j}"),
                });
            }
        }
        let treat_raw = field(treat_col, "treatment")?;
        let treatment = match treat_raw {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::MalformedRow { line, message: format!("treatment must be 0 or 1, got `{other}`") })
            }
        };
        let covariates = cov_cols
            .iter()
            .map(|&c| number(c, headers.get(c).unwrap_or("covariate")))
            .collect::<Result<Vec<_>>>()?;
        max_event = max_event.max(event_code);
        subjects.push(Subject { id, covariates, treatment, followup_time: time, event_code });
    }
    let num_causes = schema.num_causes.unwrap_or(max_event.max(1));
    Dataset::new(subjects, num_causes, schema.horizon)
}

/// Sorted grid `s_1 < … < s_M ≤ τ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    horizon: f64,
}

impl TimeGrid {
    pub fn from_times(mut times: Vec<f64>, horizon: f64) -> Result<Self> {
        times.sort_by(f64::total_cmp);
        times.dedup();
        if times.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if times[0] <= 0.0 || times[times.len() - 1] > horizon {
            return Err(Error::InvalidGrid(format!("grid points must lie in (0, {horizon}]")));
        }
        Ok(Self { times, horizon })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of grid points, equal to the number of intervals.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Curve index (1-based, `0` is time zero) of an exact grid point.
    pub fn point_index(&self, t: f64) -> Option<usize> {
        self.times.binary_search_by(|s| s.total_cmp(&t)).ok().map(|i| i + 1)
    }

    /// Curve index of the last grid point `≤ t` (0 when `t` precedes the grid).
    /// Step functions on the grid are constant between grid points.
    pub fn floor_index(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    /// Curve index of every subject's follow-up time; each must be a grid point.
    pub fn followup_indices(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        dataset
            .subjects()
            .iter()
            .map(|s| {
                self.point_index(s.followup_time).ok_or_else(|| {
                    Error::InvalidGrid(format!("follow-up time {} of subject {} is not a grid point", s.followup_time, s.id))
                })
            })
            .collect()
    }

    /// Largest gap between consecutive grid points, including `(0, s_1]`.
    pub fn mesh(&self) -> f64 {
        let mut prev = 0.0;
        let mut mesh: f64 = 0.0;
        for &t in &self.times {
            mesh = mesh.max(t - prev);
            prev = t;
        }
        mesh
    }
}

/// Union of distinct observed times, the target times, and an optional
/// refinement that bisects the widest gap until the grid holds at least
/// `extra_resolution` points.
pub fn build_time_grid(dataset: &Dataset, target_times: &[f64], extra_resolution: Option<usize>) -> Result<TimeGrid> {
    let tau = dataset.horizon();
    for &t in target_times {
        if !(t > 0.0 && t <= tau) {
            return Err(Error::TimeOutOfRange { time: t, horizon: tau });
        }
    }
    let mut times: Vec<f64> = dataset.subjects().iter().map(|s| s.followup_time).filter(|&t| t <= tau).collect();
    times.extend_from_slice(target_times);
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.is_empty() {
        return Err(Error::InvalidGrid("no observed or target times".into()));
    }
    if let Some(min_points) = extra_resolution {
        refine(&mut times, min_points);
    }
    TimeGrid::from_times(times, tau)
}

#[derive(PartialEq)]
struct Gap {
    width: f64,
    start: f64,
}

impl Eq for Gap {}

impl PartialOrd for Gap {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Gap {
    // widest first, earliest on ties
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.width.total_cmp(&other.width).then_with(|| other.start.total_cmp(&self.start))
    }
}

fn refine(times: &mut Vec<f64>, min_points: usize) {
    if times.len() >= min_points {
        return;
    }
    let mut heap = BinaryHeap::new();
    let mut prev = 0.0;
    for &t in times.iter() {
        heap.push(Gap { width: t - prev, start: prev });
        prev = t;
    }
    while times.len() < min_points {
        let Some(gap) = heap.pop() else { break };
        let mid = gap.start + gap.width / 2.0;
        if mid <= gap.start || mid >= gap.start + gap.width {
            break;
        }
        times.push(mid);
        heap.push(Gap { width: mid - gap.start, start: gap.start });
        heap.push(Gap { width: gap.start + gap.width - mid, start: mid });
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub arm_counts: [usize; 2],
    pub cause_event_counts: Vec<usize>,
    pub censored_count: usize,
    /// Per arm, the fraction of that arm still at risk at the check time.
    pub at_risk_fraction: [f64; 2],
    pub at_risk_count: [usize; 2],
    pub check_time: f64,
    pub warnings: Vec<String>,
}

/// Empirical positivity screens. `check_time` defaults to the horizon.
pub fn validate_dataset(dataset: &Dataset, check_time: Option<f64>) -> DiagnosticsReport {
    let check_time = check_time.unwrap_or(dataset.horizon());
    let mut arm_counts = [0usize; 2];
    let mut at_risk = [0usize; 2];
    let mut cause_event_counts = vec![0usize; dataset.num_causes()];
    let mut censored_count = 0;
    for s in dataset.subjects() {
        let a = s.treatment as usize;
        arm_counts[a] += 1;
        if s.followup_time >= check_time {
            at_risk[a] += 1;
        }
        match s.event_code {
            0 => censored_count += 1,
            j => cause_event_counts[j - 1] += 1,
        }
    }
    let mut warnings = Vec::new();
    let mut fraction = [0.0; 2];
    for a in 0..2 {
        if arm_counts[a] == 0 {
            warnings.push(format!("positivity: no subjects in arm {a}"));
            continue;
        }
        fraction[a] = at_risk[a] as f64 / arm_counts[a] as f64;
        if at_risk[a] < 10 {
            warnings.push(format!(
                "positivity: only {} subjects of arm {a} at risk at t = {check_time}",
                at_risk[a]
            ));
        }
    }
    for (j, &count) in cause_event_counts.iter().enumerate() {
        if count == 0 {
            warnings.push(format!("no events of cause {}: its absolute risk estimate is degenerate at zero", j + 1));
        }
    }
    DiagnosticsReport {
        arm_counts,
        cause_event_counts,
        censored_count,
        at_risk_fraction: fraction,
        at_risk_count: at_risk,
        check_time,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, t: f64, event: usize, a: u8) -> Subject {
        Subject { id: id.into(), covariates: vec![0.0], treatment: a, followup_time: t, event_code: event }
    }

    #[test]
    fn parses_three_rows() {
        let csv = "id,time,event,treatment,x1\na,1.0,1,0,0.5\nb,2.0,0,1,0.1\nc,3.0,2,1,-0.2\n";
        let ds = parse_dataset(csv.as_bytes(), &CsvSchema::standard(10.0)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_causes(), 2);
        assert_eq!(ds.subjects()[2].covariates, vec![-0.2]);
    }

    #[test]
    fn truncates_at_horizon() {
        let csv = "id,time,event,treatment,x1\na,5,1,0,0\nb,1,1,1,0\n";
        let ds = parse_dataset(csv.as_bytes(), &CsvSchema::standard(4.0)).unwrap();
        assert_eq!(ds.subjects()[0].followup_time, 4.0);
        assert_eq!(ds.subjects()[0].event_code, 0);
    }

    #[test]
    fn rejects_bad_treatment_with_line() {
        let csv = "id,time,event,treatment,x1\na,1,1,0,0\nb,1,1,2,0\n";
        let err = parse_dataset(csv.as_bytes(), &CsvSchema::standard(4.0)).unwrap_err();
        match err {
            Error::MalformedRow { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("treatment"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_event_code_beyond_causes() {
        let csv = "id,time,event,treatment\na,1,3,0\n";
        let mut schema = CsvSchema::standard(4.0);
        schema.num_causes = Some(2);
        assert!(matches!(parse_dataset(csv.as_bytes(), &schema), Err(Error::MalformedRow { line: 2, .. })));
    }

    #[test]
    fn rejects_missing_values() {
        let csv = "id,time,event,treatment,x1\na,1,1,0,\n";
        assert!(matches!(
            parse_dataset(csv.as_bytes(), &CsvSchema::standard(4.0)),
            Err(Error::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn grid_is_sorted_union() {
        let ds = Dataset::new(
            vec![subject("a", 1.0, 1, 0), subject("b", 2.0, 1, 1), subject("c", 2.0, 0, 1), subject("d", 3.0, 0, 0)],
            1,
            3.0,
        )
        .unwrap();
        let g = build_time_grid(&ds, &[2.5], None).unwrap();
        assert_eq!(g.times(), &[1.0, 2.0, 2.5, 3.0]);
        let g = build_time_grid(&ds, &[], Some(0)).unwrap();
        assert_eq!(g.times(), &[1.0, 2.0, 3.0]);
        assert!(matches!(build_time_grid(&ds, &[3.5], None), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn refinement_reaches_resolution() {
        let ds = Dataset::new(vec![subject("a", 1.0, 1, 0), subject("b", 3.0, 0, 1)], 1, 3.0).unwrap();
        let g = build_time_grid(&ds, &[], Some(5)).unwrap();
        assert!(g.len() >= 5);
        assert!(g.point_index(1.0).is_some() && g.point_index(3.0).is_some());
        let rebuilt = build_time_grid(&ds, g.times(), Some(5)).unwrap();
        assert_eq!(rebuilt, g);
    }

    #[test]
    fn index_lookups() {
        let g = TimeGrid::from_times(vec![1.0, 2.0, 3.0], 3.0).unwrap();
        assert_eq!(g.point_index(2.0), Some(2));
        assert_eq!(g.point_index(2.5), None);
        assert_eq!(g.floor_index(0.5), 0);
        assert_eq!(g.floor_index(2.5), 2);
        assert_eq!(g.floor_index(3.0), 3);
    }

    #[test]
    fn diagnostics_warn_on_missing_arm_and_cause() {
        let subjects: Vec<_> = (0..20).map(|i| subject(&i.to_string(), 1.0 + i as f64, 1, 1)).collect();
        let ds = Dataset::new(subjects, 2, 30.0).unwrap();
        let rep = validate_dataset(&ds, None);
        assert!(rep.warnings.iter().any(|w| w.contains("arm 0")));
        assert!(rep.warnings.iter().any(|w| w.contains("cause 2")));
    }

    #[test]
    fn diagnostics_quiet_on_balanced_data() {
        let subjects: Vec<_> = (0..100)
            .map(|i| subject(&i.to_string(), 1.0 + (i % 50) as f64 / 10.0, 1 + i % 2, (i % 2) as u8))
            .collect();
        let ds = Dataset::new(subjects, 2, 10.0).unwrap();
        let rep = validate_dataset(&ds, Some(2.0));
        assert!(rep.warnings.is_empty(), "{:?}", rep.warnings);
        assert_eq!(rep.arm_counts, [50, 50]);
    }
}
