//! Budgeted stitch-point selection.
//!
//! A stitch point `(i, j)` keeps front units `0..=i`, maps front unit `i`'s
//! output into the space of back unit `j`'s output through an adapter, and
//! continues with back units `j+1..`. Its cost is
//!
//! ```text
//! params(front[0..=i]) + params(adapter) + params(back[j+1..])
//! ```
//!
//! Candidates exclude the first and last unit of each model, so
//! `1 <= i <= k-2` and `1 <= j <= l-2`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::netgraph::NetworkSpec;
use crate::similarity::SimilarityMatrix;
use crate::stitcher::{synthesize_adapter, AdapterSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Params,
    Flops,
    TrainableParams,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Params => "params",
            Metric::Flops => "flops",
            Metric::TrainableParams => "trainable-params",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "params" => Ok(Metric::Params),
            "flops" => Ok(Metric::Flops),
            "trainable" | "trainable-params" => Ok(Metric::TrainableParams),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?}; expected params, flops or trainable"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Budget {
    pub metric: Metric,
    pub limit: u64,
}

impl Budget {
    pub fn new(metric: Metric, limit: u64) -> Result<Budget> {
        if limit == 0 {
            return Err(Error::Config("budget limit must be > 0".into()));
        }
        Ok(Budget { metric, limit })
    }

    pub fn params(limit: u64) -> Result<Budget> {
        Budget::new(Metric::Params, limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Large-model prefix into small-model suffix.
    #[default]
    SlowToFast,
    /// Small-model prefix into large-model suffix.
    FastToSlow,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::SlowToFast => "slow-to-fast",
            Direction::FastToSlow => "fast-to-slow",
        }
    }

    pub fn reversed(self) -> Direction {
        match self {
            Direction::SlowToFast => Direction::FastToSlow,
            Direction::FastToSlow => Direction::SlowToFast,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Direction> {
        match s {
            "slow-to-fast" => Ok(Direction::SlowToFast),
            "fast-to-slow" => Ok(Direction::FastToSlow),
            _ => Err(Error::Config(format!(
                "unknown direction {s:?}; expected slow-to-fast or fast-to-slow"
            ))),
        }
    }
}

/// Orders two parents for a direction. The model with more parameters is
/// the large one; on a tie `a` is treated as large and a warning is logged.
pub fn orient<'a>(
    a: &'a NetworkSpec,
    b: &'a NetworkSpec,
    direction: Direction,
) -> (&'a NetworkSpec, &'a NetworkSpec) {
    let (large, small) = if b.total_params() > a.total_params() {
        (b, a)
    } else {
        (a, b)
    };
    if a.total_params() == b.total_params() {
        log::warn!(
            "{} and {} have equal size ({} params); honoring {direction} as declared",
            a.model_id,
            b.model_id,
            a.total_params()
        );
    }
    match direction {
        Direction::SlowToFast => (large, small),
        Direction::FastToSlow => (small, large),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StitchPoint {
    pub i: usize,
    pub j: usize,
}

impl fmt::Display for StitchPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.i, self.j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub front_params: u64,
    pub adapter_params: u64,
    pub back_params: u64,
    pub total: u64,
    pub flops_total: u64,
}

impl Accounting {
    pub fn cost(&self, metric: Metric) -> u64 {
        match metric {
            Metric::Params => self.total,
            Metric::Flops => self.flops_total,
            Metric::TrainableParams => self.adapter_params,
        }
    }
}

/// Parameter and FLOP accounting of stitch point `(i, j)` with `adapter`.
/// `j` may be the back model's last unit, in which case nothing of the
/// back model remains.
pub fn plan_params(
    point: StitchPoint,
    front: &NetworkSpec,
    back: &NetworkSpec,
    adapter: &AdapterSpec,
) -> Result<Accounting> {
    let (k, l) = (front.len(), back.len());
    if point.i >= k || point.j >= l {
        return Err(Error::Range(format!(
            "stitch point {point} outside {k}x{l} unit grid"
        )));
    }
    let front_params = front.count_params(0..point.i + 1)?;
    let back_params = back.count_params(point.j + 1..l)?;
    let flops_total = front.estimate_flops(0..point.i + 1)?
        + adapter.flops
        + back.estimate_flops(point.j + 1..l)?;
    Ok(Accounting {
        front_params,
        adapter_params: adapter.param_count,
        back_params,
        total: front_params + adapter.param_count + back_params,
        flops_total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchPlan {
    pub front_model_id: String,
    pub back_model_id: String,
    pub direction: Direction,
    pub stitch_point: StitchPoint,
    pub similarity_at_point: f64,
    pub adapter: AdapterSpec,
    pub accounting: Accounting,
    pub budget: Budget,
}

impl StitchPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<StitchPlan> {
        let p: StitchPlan = io::read_json(path)?;
        let a = &p.accounting;
        if a.total != a.front_params + a.adapter_params + a.back_params {
            return Err(Error::format(
                path,
                "accounting total is not the sum of its parts",
            ));
        }
        Ok(p)
    }
}

/// Stitch candidates of a `k x l` grid: first and last units excluded.
pub fn candidate_points(k: usize, l: usize) -> Vec<StitchPoint> {
    let mut out = Vec::new();
    for i in 1..k.saturating_sub(1) {
        for j in 1..l.saturating_sub(1) {
            out.push(StitchPoint { i, j });
        }
    }
    out
}

/// A candidate with its adapter and accounting, or the reason it cannot be
/// built.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub point: StitchPoint,
    pub similarity: f64,
    pub built: std::result::Result<(AdapterSpec, Accounting), String>,
}

impl Candidate {
    pub fn cost(&self, metric: Metric) -> Option<u64> {
        self.built.as_ref().ok().map(|(_, a)| a.cost(metric))
    }
}

fn check_matrix(s: &SimilarityMatrix, front: &NetworkSpec, back: &NetworkSpec) -> Result<()> {
    if s.rows() != front.len() || s.cols() != back.len() {
        return Err(Error::Dimension(format!(
            "similarity matrix is {}x{} but the models have {}x{} units",
            s.rows(),
            s.cols(),
            front.len(),
            back.len()
        )));
    }
    if s.front_model_id != front.model_id || s.back_model_id != back.model_id {
        return Err(Error::Contract(format!(
            "similarity matrix compares {} -> {} but the plan needs {} -> {} (transpose it?)",
            s.front_model_id, s.back_model_id, front.model_id, back.model_id
        )));
    }
    Ok(())
}

/// Every candidate point with its synthesized adapter and accounting.
pub fn enumerate_candidates(
    s: &SimilarityMatrix,
    front: &NetworkSpec,
    back: &NetworkSpec,
) -> Result<Vec<Candidate>> {
    check_matrix(s, front, back)?;
    candidate_points(front.len(), back.len())
        .into_iter()
        .map(|p| {
            let built = match synthesize_adapter(
                front.units[p.i].out_signature,
                back.units[p.j].out_signature,
            ) {
                Ok(adapter) => {
                    let acc = plan_params(p, front, back, &adapter)?;
                    Ok((adapter, acc))
                }
                Err(e) => Err(e.to_string()),
            };
            Ok(Candidate {
                point: p,
                similarity: s.get(p.i, p.j),
                built,
            })
        })
        .collect()
}

/// Outcome of the masked argmax search over a score grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Found {
        i: usize,
        j: usize,
        score: f64,
    },
    /// No candidate fits; the cheapest buildable cost, if any.
    Infeasible {
        min_cost: Option<u64>,
    },
}

/// Repeatedly takes the argmax of `scores` (lowest `(i, j)` on ties) and
/// masks it to `-inf` while its cost exceeds `limit`. Cells that are not
/// candidates or whose cost is `None` are masked up front.
pub fn feasible_argmax(
    scores: &[Vec<f64>],
    is_candidate: impl Fn(usize, usize) -> bool,
    cost: impl Fn(usize, usize) -> Option<u64>,
    limit: u64,
) -> Selection {
    let mut work: Vec<Vec<f64>> = scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| {
                    if is_candidate(i, j) && cost(i, j).is_some() && !v.is_nan() {
                        v
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect()
        })
        .collect();
    let min_cost = (0..scores.len())
        .flat_map(|i| (0..scores[i].len()).map(move |j| (i, j)))
        .filter(|&(i, j)| is_candidate(i, j))
        .filter_map(|(i, j)| cost(i, j))
        .min();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in work.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > f64::NEG_INFINITY && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        let Some((i, j, v)) = best else {
            return Selection::Infeasible { min_cost };
        };
        if cost(i, j).is_some_and(|c| c <= limit) {
            return Selection::Found { i, j, score: v };
        }
        work[i][j] = f64::NEG_INFINITY;
    }
}

/// Picks the most similar candidate whose cost fits the budget.
pub fn select_stitch_point(
    s: &SimilarityMatrix,
    budget: Budget,
    front: &NetworkSpec,
    back: &NetworkSpec,
    direction: Direction,
) -> Result<StitchPlan> {
    let cands = enumerate_candidates(s, front, back)?;
    select_from_candidates(s, &cands, budget, front, back, direction)
}

/// Selection over precomputed candidates.
pub fn select_from_candidates(
    s: &SimilarityMatrix,
    cands: &[Candidate],
    budget: Budget,
    front: &NetworkSpec,
    back: &NetworkSpec,
    direction: Direction,
) -> Result<StitchPlan> {
    if budget.limit == 0 {
        return Err(Error::Config("budget limit must be > 0".into()));
    }
    let find = |i: usize, j: usize| cands.iter().find(|c| c.point == StitchPoint { i, j });
    let sel = feasible_argmax(
        &s.values,
        |i, j| find(i, j).is_some(),
        |i, j| find(i, j).and_then(|c| c.cost(budget.metric)),
        budget.limit,
    );
    match sel {
        Selection::Found { i, j, score } => {
            let c = find(i, j).expect("selected cell is a candidate");
            let (adapter, accounting) = c.built.clone().expect("selected cell is buildable");
            Ok(StitchPlan {
                front_model_id: front.model_id.clone(),
                back_model_id: back.model_id.clone(),
                direction,
                stitch_point: c.point,
                similarity_at_point: score,
                adapter,
                accounting,
                budget,
            })
        }
        Selection::Infeasible { min_cost } => Err(Error::Infeasible {
            metric: budget.metric.to_string(),
            limit: budget.limit,
            min_cost: min_cost
                .map_or_else(|| "none (no buildable candidate)".into(), |c| c.to_string()),
        }),
    }
}

/// One budget of a sweep: the emitted plan or the reason there is none.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub budget: Budget,
    pub plan: std::result::Result<StitchPlan, String>,
    pub accuracy: Option<f64>,
}

/// Runs selection once per budget. Failing budgets are flagged, not fatal.
/// Rows with a plan come first, ordered by total params; flagged rows
/// follow in input order.
pub fn sweep_candidates(
    s: &SimilarityMatrix,
    budgets: &[Budget],
    front: &NetworkSpec,
    back: &NetworkSpec,
    direction: Direction,
) -> Result<Vec<SweepRow>> {
    let cands = enumerate_candidates(s, front, back)?;
    let mut rows: Vec<SweepRow> = budgets
        .iter()
        .map(|&b| SweepRow {
            budget: b,
            plan: select_from_candidates(s, &cands, b, front, back, direction)
                .map_err(|e| e.to_string()),
            accuracy: None,
        })
        .collect();
    rows.sort_by_key(|r| match &r.plan {
        Ok(p) => (0, p.accounting.total),
        Err(_) => (1, 0),
    });
    Ok(rows)
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "i",
    "j",
    "similarity",
    "front_params",
    "adapter_params",
    "back_params",
    "total_params",
    "flops",
    "budget",
    "accuracy",
    "status",
];

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// Writes sweep rows as CSV.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(SWEEP_COLUMNS).map_err(err)?;
    for r in rows {
        let rec: Vec<String> = match &r.plan {
            Ok(p) => {
                let a = &p.accounting;
                vec![
                    p.stitch_point.i.to_string(),
                    p.stitch_point.j.to_string(),
                    format!("{:.6}", p.similarity_at_point),
                    a.front_params.to_string(),
                    a.adapter_params.to_string(),
                    a.back_params.to_string(),
                    a.total.to_string(),
                    a.flops_total.to_string(),
                    r.budget.limit.to_string(),
                    fmt_acc(r.accuracy),
                    "ok".into(),
                ]
            }
            Err(msg) => {
                let mut v = vec![String::new(); 8];
                v.push(r.budget.limit.to_string());
                v.push(String::new());
                v.push(format!("infeasible: {msg}"));
                v
            }
        };
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    io::write_bytes(path, &bytes)
}

/// Writes every candidate with its similarity, accounting and (optional)
/// accuracy as CSV, in candidate order.
pub fn write_candidates_csv(
    cands: &[Candidate],
    accuracy: &[Option<f64>],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(SWEEP_COLUMNS).map_err(err)?;
    for (n, c) in cands.iter().enumerate() {
        let acc = fmt_acc(accuracy.get(n).copied().flatten());
        let rec: Vec<String> = match &c.built {
            Ok((_, a)) => vec![
                c.point.i.to_string(),
                c.point.j.to_string(),
                format!("{:.6}", c.similarity),
                a.front_params.to_string(),
                a.adapter_params.to_string(),
                a.back_params.to_string(),
                a.total.to_string(),
                a.flops_total.to_string(),
                String::new(),
                acc,
                "ok".into(),
            ],
            Err(msg) => vec![
                c.point.i.to_string(),
                c.point.j.to_string(),
                format!("{:.6}", c.similarity),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                acc,
                format!("unbuildable: {msg}"),
            ],
        };
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    io::write_bytes(path, &bytes)
}
