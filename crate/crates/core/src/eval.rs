//! AUC, balanced evaluation splits, result tables and the training-cost ledger.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackKind, ScoreRecord};
use crate::data::SampleId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs at least one member and one nonmember score")]
    EmptyScores,
    #[error("score {0} is not a number")]
    NotANumber(f64),
    #[error("{missing} evaluation samples have no score record (first: {first})")]
    MissingRecords { missing: usize, first: SampleId },
    #[error("records mix attacks {0} and {1}")]
    MixedAttacks(AttackKind, AttackKind),
    #[error("evaluation split is not usable: {0}")]
    BadSplit(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Mann-Whitney statistic: fraction of (member, nonmember) pairs ranked
/// correctly, ties counted half.
pub fn auc(members: &[f64], nonmembers: &[f64]) -> Result<f64, EvalError> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    if let Some(&v) = members.iter().chain(nonmembers).find(|v| v.is_nan()) {
        return Err(EvalError::NotANumber(v));
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&v| (v, true))
        .chain(nonmembers.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Wins counted per tie group; stays exact in integer halves.
    let (mut twice_wins, mut below) = (0u128, 0u128);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut m, mut n) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                m += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += 2 * m * below + m * n;
        below += n;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * members.len() as f64 * nonmembers.len() as f64))
}

/// Equal-sized disjoint member and nonmember id sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub members: Vec<SampleId>,
    pub nonmembers: Vec<SampleId>,
}

impl EvalSplit {
    /// `min(|members|, |nonmembers|, cap)` ids drawn from each pool.
    pub fn balanced(members: &[SampleId], nonmembers: &[SampleId], cap: usize, seed: u64) -> Result<Self, EvalError> {
        let n = members.len().min(nonmembers.len()).min(cap);
        if n == 0 {
            return Err(EvalError::BadSplit("no samples on one side".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |pool: &[SampleId]| {
            let mut v: Vec<SampleId> = pool.choose_multiple(&mut rng, n).copied().collect();
            v.sort();
            v
        };
        let split = Self { members: pick(members), nonmembers: pick(nonmembers) };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.members.len() != self.nonmembers.len() {
            return Err(EvalError::BadSplit(format!(
                "{} members vs {} nonmembers",
                self.members.len(),
                self.nonmembers.len()
            )));
        }
        let m: HashSet<_> = self.members.iter().collect();
        if self.nonmembers.iter().any(|id| m.contains(id)) {
            return Err(EvalError::BadSplit("member and nonmember ids overlap".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members first, then nonmembers.
    pub fn ids(&self) -> Vec<SampleId> {
        self.members.iter().chain(&self.nonmembers).copied().collect()
    }

    pub fn is_member(&self, id: SampleId) -> Option<bool> {
        if self.members.contains(&id) {
            Some(true)
        } else if self.nonmembers.contains(&id) {
            Some(false)
        } else {
            None
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| EvalError::Io(e.into()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let s = serde_json::to_string_pretty(value).map_err(|e| EvalError::Io(e.into()))?;
    std::fs::write(path, s)?;
    Ok(())
}

/// Fills `is_member` from the split; records outside it stay `None`.
pub fn label_records(records: &mut [ScoreRecord], split: &EvalSplit) {
    let m: HashSet<_> = split.members.iter().collect();
    let n: HashSet<_> = split.nonmembers.iter().collect();
    for r in records {
        r.is_member = if m.contains(&r.sample_id) {
            Some(true)
        } else if n.contains(&r.sample_id) {
            Some(false)
        } else {
            None
        };
    }
}

/// Final-score counts over shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub edges: Vec<f64>,
    pub members: Vec<usize>,
    pub nonmembers: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn histograms(members: &[f64], nonmembers: &[f64], bins: usize) -> Histograms {
    let finite = || members.iter().chain(nonmembers).copied().filter(|v| v.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let count = |v: &[f64]| {
        let mut c = vec![0; bins];
        for &x in v.iter().filter(|x| x.is_finite()) {
            c[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
        c
    };
    Histograms { edges, members: count(members), nonmembers: count(nonmembers) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: AttackKind,
    pub dataset: String,
    pub model: String,
    pub auc: f64,
    pub accuracy: Option<f64>,
    pub histograms: Histograms,
    pub seed: u64,
    pub members: usize,
    pub nonmembers: usize,
}

impl AttackResult {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| EvalError::Io(e.into()))
    }
}

/// Scores covering the split, ordered members then nonmembers.
fn split_scores(records: &[ScoreRecord], split: &EvalSplit) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.attack != first.attack) {
            return Err(EvalError::MixedAttacks(first.attack, other.attack));
        }
    }
    let by_id: HashMap<_, _> = records.iter().map(|r| (r.sample_id, r.final_score)).collect();
    let missing: Vec<_> = split.ids().into_iter().filter(|id| !by_id.contains_key(id)).collect();
    if let Some(&first) = missing.first() {
        return Err(EvalError::MissingRecords { missing: missing.len(), first });
    }
    let pick = |ids: &[SampleId]| ids.iter().map(|id| by_id[id]).collect();
    Ok((pick(&split.members), pick(&split.nonmembers)))
}

/// What the run was about, for result rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel<'a> {
    pub dataset: &'a str,
    pub model: &'a str,
    pub seed: u64,
}

/// AUC over final scores. With `threshold`, also the accuracy of the rule
/// `final ≥ threshold ⇒ member`.
pub fn evaluate_attack(
    records: &[ScoreRecord],
    split: &EvalSplit,
    label: &RunLabel<'_>,
    threshold: Option<f64>,
) -> Result<AttackResult, EvalError> {
    split.validate()?;
    let (m, n) = split_scores(records, split)?;
    let attack = records.first().map(|r| r.attack).ok_or(EvalError::EmptyScores)?;
    let accuracy = threshold.map(|t| {
        let hits = m.iter().filter(|&&v| v >= t).count() + n.iter().filter(|&&v| v < t).count();
        hits as f64 / (m.len() + n.len()) as f64
    });
    Ok(AttackResult {
        attack,
        dataset: label.dataset.to_string(),
        model: label.model.to_string(),
        auc: auc(&m, &n)?,
        accuracy,
        histograms: histograms(&m, &n, HISTOGRAM_BINS),
        seed: label.seed,
        members: m.len(),
        nonmembers: n.len(),
    })
}

/// When a training cost is paid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostPhase {
    /// Paid once before any target is known.
    OneTime,
    /// Paid again for every batch of fresh targets.
    PerTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub attack: AttackKind,
    pub phase: CostPhase,
    /// Models trained by this call.
    pub models: usize,
    pub seconds: f64,
    /// Fresh targets served, for per-target entries.
    pub targets: usize,
    /// Unix time of recording.
    pub recorded_at: u64,
    pub note: String,
}

/// Append-only list of training costs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    entries: Vec<CostEntry>,
    pub host: String,
}

impl CostLedger {
    pub fn new(host: impl Into<String>) -> Self {
        Self { entries: Vec::new(), host: host.into() }
    }

    /// Describes this machine for the ledger header.
    pub fn local_host() -> String {
        let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
        format!("{} {} cpus={cpus}", std::env::consts::OS, std::env::consts::ARCH)
    }

    pub fn record(&mut self, attack: AttackKind, phase: CostPhase, models: usize, seconds: f64, targets: usize, note: &str) {
        let recorded_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.entries.push(CostEntry { attack, phase, models, seconds, targets, recorded_at, note: note.to_string() });
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    /// CSV with a `# host:` comment line first.
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut body = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut body);
            for e in &self.entries {
                w.serialize(e)?;
            }
            w.flush()?;
        }
        let mut out = format!("# host: {}\n", self.host).into_bytes();
        out.extend(body);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        let host = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# host: "))
            .unwrap_or_default()
            .to_string();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let entries = r.deserialize().collect::<Result<_, _>>()?;
        Ok(Self { entries, host })
    }
}

/// Aggregated costs of one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub attack: AttackKind,
    pub one_time_models: usize,
    pub one_time_seconds: f64,
    pub per_target_models: usize,
    pub per_target_seconds: f64,
    pub per_target_batches: usize,
    pub fresh_targets: usize,
}

impl CostRow {
    /// Mean models trained per fresh target batch; 0 when none were needed.
    pub fn models_per_batch(&self) -> f64 {
        if self.per_target_batches == 0 {
            0.0
        } else {
            self.per_target_models as f64 / self.per_target_batches as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub host: String,
    pub rows: Vec<CostRow>,
}

/// One row per attack, in report order. Attacks that never appear in the
/// ledger get an all-zero row only when `fill` lists them.
pub fn cost_report(ledger: &CostLedger, fill: &[AttackKind]) -> CostReport {
    let mut rows: BTreeMap<AttackKind, CostRow> = fill
        .iter()
        .map(|&attack| {
            (attack, CostRow {
                attack,
                one_time_models: 0,
                one_time_seconds: 0.0,
                per_target_models: 0,
                per_target_seconds: 0.0,
                per_target_batches: 0,
                fresh_targets: 0,
            })
        })
        .collect();
    for e in ledger.entries() {
        let row = rows.entry(e.attack).or_insert_with(|| CostRow {
            attack: e.attack,
            one_time_models: 0,
            one_time_seconds: 0.0,
            per_target_models: 0,
            per_target_seconds: 0.0,
            per_target_batches: 0,
            fresh_targets: 0,
        });
        match e.phase {
            CostPhase::OneTime => {
                row.one_time_models += e.models;
                row.one_time_seconds += e.seconds;
            }
            CostPhase::PerTarget => {
                row.per_target_models += e.models;
                row.per_target_seconds += e.seconds;
                row.per_target_batches += 1;
                row.fresh_targets += e.targets;
            }
        }
    }
    CostReport { host: ledger.host.clone(), rows: rows.into_values().collect() }
}

impl CostReport {
    pub fn row(&self, attack: AttackKind) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.attack == attack)
    }

    /// Violations of the expected cost structure; empty when it holds.
    pub fn structural_violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for r in &self.rows {
            let free = matches!(
                r.attack,
                AttackKind::Ours | AttackKind::OursBlackBox | AttackKind::OursNatural | AttackKind::Watson
            );
            if free && r.per_target_models != 0 {
                bad.push(format!("{} trained {} models for fresh targets", r.attack, r.per_target_models));
            }
            if r.attack == AttackKind::OursNatural && r.one_time_models != 0 {
                bad.push(format!("{} trained {} one-time models", r.attack, r.one_time_models));
            }
            if r.attack == AttackKind::Sablayrolles && r.fresh_targets > 0 && r.per_target_models == 0 {
                bad.push(format!("{} scored {} fresh targets without new models", r.attack, r.fresh_targets));
            }
        }
        bad
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("Training cost (host: {})\n\n", self.host);
        s.push_str("| Attack | One-time models | One-time min | Per-target models | Per-target batches | Per-target min |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {} | {} | {:.2} |",
                r.attack.title(),
                r.one_time_models,
                r.one_time_seconds / 60.0,
                r.per_target_models,
                r.per_target_batches,
                r.per_target_seconds / 60.0
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Victim accuracy for one (dataset, model) column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimRow {
    pub dataset: String,
    pub model: String,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// One cell of the long-format results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub table: String,
    pub row: String,
    pub dataset: String,
    pub model: String,
    /// Percent; `None` renders as absent.
    pub value: Option<f64>,
    pub runs: usize,
}

/// Cells of both tables. Columns follow first appearance; AUCs of repeated
/// runs are averaged.
pub fn report_cells(results: &[AttackResult], victims: &[VictimRow]) -> Vec<ReportCell> {
    let mut columns: Vec<(String, String)> = Vec::new();
    let mut push_col = |d: &str, m: &str| {
        if !columns.iter().any(|(a, b)| a == d && b == m) {
            columns.push((d.to_string(), m.to_string()));
        }
    };
    victims.iter().for_each(|v| push_col(&v.dataset, &v.model));
    results.iter().for_each(|r| push_col(&r.dataset, &r.model));
    let mut cells = Vec::new();
    for (row, pick) in [("Victim train Acc", 0), ("Victim test Acc", 1)] {
        for (d, m) in &columns {
            let v = victims.iter().find(|v| &v.dataset == d && &v.model == m);
            cells.push(ReportCell {
                table: "accuracy".into(),
                row: row.into(),
                dataset: d.clone(),
                model: m.clone(),
                value: v.map(|v| 100.0 * if pick == 0 { v.train_acc } else { v.test_acc }),
                runs: v.is_some() as usize,
            });
        }
    }
    for attack in AttackKind::ALL {
        for (d, m) in &columns {
            let hits: Vec<f64> = results
                .iter()
                .filter(|r| r.attack == attack && &r.dataset == d && &r.model == m)
                .map(|r| r.auc)
                .collect();
            cells.push(ReportCell {
                table: "auc".into(),
                row: attack.title().into(),
                dataset: d.clone(),
                model: m.clone(),
                value: (!hits.is_empty()).then(|| 100.0 * hits.iter().sum::<f64>() / hits.len() as f64),
                runs: hits.len(),
            });
        }
    }
    cells
}

/// Percent with two decimals, or `—` for an absent cell.
pub fn format_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_string(), |v| format!("{v:.2}%"))
}

pub fn render_markdown(cells: &[ReportCell]) -> String {
    let mut out = String::new();
    for (table, title) in [("accuracy", "Victim accuracy"), ("auc", "Attack AUC")] {
        let part: Vec<_> = cells.iter().filter(|c| c.table == table).collect();
        let mut cols: Vec<(&str, &str)> = Vec::new();
        let mut rows: Vec<&str> = Vec::new();
        for c in &part {
            if !cols.contains(&(&c.dataset, &c.model)) {
                cols.push((&c.dataset, &c.model));
            }
            if !rows.contains(&c.row.as_str()) {
                rows.push(&c.row);
            }
        }
        let _ = writeln!(out, "## {title}\n");
        let _ = writeln!(out, "| Dataset | {} |", cols.iter().map(|c| c.0).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(cols.len()));
        let _ = writeln!(out, "| Model | {} |", cols.iter().map(|c| c.1).collect::<Vec<_>>().join(" | "));
        for row in rows {
            let vals: Vec<String> = cols
                .iter()
                .map(|(d, m)| {
                    let c = part.iter().find(|c| c.row == row && c.dataset == *d && c.model == *m);
                    format_cell(c.and_then(|c| c.value))
                })
                .collect();
            let _ = writeln!(out, "| {row} | {} |", vals.join(" | "));
        }
        out.push('\n');
    }
    out
}

/// Writes `results.md` and `results.csv` into `dir`.
pub fn make_report(results: &[AttackResult], victims: &[VictimRow], dir: &Path) -> Result<Vec<ReportCell>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let cells = report_cells(results, victims);
    std::fs::write(dir.join("results.md"), render_markdown(&cells))?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for c in &cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(cells)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportCell>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[0.3; 7]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.2], &[0.5, 0.6]).unwrap(), 0.5);
        assert!(matches!(auc(&[], &[1.0]), Err(EvalError::EmptyScores)));
        assert!(matches!(auc(&[f64::NAN], &[1.0]), Err(EvalError::NotANumber(_))));
    }

    fn split(n: usize) -> EvalSplit {
        EvalSplit {
            members: (0..n).map(SampleId::train).collect(),
            nonmembers: (0..n).map(SampleId::test).collect(),
        }
    }

    fn records(split: &EvalSplit, f: impl Fn(usize, bool) -> f64) -> Vec<ScoreRecord> {
        let m = split.members.iter().enumerate().map(|(i, &id)| (id, f(i, true)));
        let n = split.nonmembers.iter().enumerate().map(|(i, &id)| (id, f(i, false)));
        m.chain(n).map(|(id, v)| ScoreRecord::uncalibrated(AttackKind::Yeom, id, v)).collect()
    }

    const LABEL: RunLabel<'static> = RunLabel { dataset: "mnist", model: "mlp5", seed: 0 };

    #[test]
    fn evaluate_is_rank_based() {
        let s = split(50);
        let recs = records(&s, |i, m| (i as f64 * 0.37).sin() + if m { 0.3 } else { 0.0 });
        let base = evaluate_attack(&recs, &s, &LABEL, None).unwrap().auc;
        let mut shuffled = recs.clone();
        shuffled.reverse();
        assert_eq!(evaluate_attack(&shuffled, &s, &LABEL, None).unwrap().auc, base);
        let exp: Vec<_> = recs.iter().map(|r| ScoreRecord { final_score: r.final_score.exp(), ..r.clone() }).collect();
        assert_eq!(evaluate_attack(&exp, &s, &LABEL, None).unwrap().auc, base);
        let zero = records(&s, |_, _| 0.0);
        assert_eq!(evaluate_attack(&zero, &s, &LABEL, None).unwrap().auc, 0.5);
    }

    #[test]
    fn evaluate_reports_missing_and_threshold_accuracy() {
        let s = split(4);
        let mut recs = records(&s, |_, m| if m { 1.0 } else { -1.0 });
        let r = evaluate_attack(&recs, &s, &LABEL, Some(0.0)).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.histograms.members.iter().sum::<usize>(), 4);
        recs.pop();
        assert!(matches!(
            evaluate_attack(&recs, &s, &LABEL, None),
            Err(EvalError::MissingRecords { missing: 1, .. })
        ));
    }

    #[test]
    fn balanced_split_is_capped_and_disjoint() {
        let m: Vec<_> = (0..100).map(SampleId::train).collect();
        let n: Vec<_> = (0..40).map(SampleId::test).collect();
        let s = EvalSplit::balanced(&m, &n, 5000, 1).unwrap();
        assert_eq!((s.members.len(), s.nonmembers.len()), (40, 40));
        let s = EvalSplit::balanced(&m, &n, 10, 1).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s, EvalSplit::balanced(&m, &n, 10, 1).unwrap());
        let bad = EvalSplit { members: vec![SampleId::train(0)], nonmembers: vec![SampleId::train(0)] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sablayrolles_per_target_arithmetic() {
        let mut l = CostLedger::new("test");
        for _ in 0..3 {
            l.record(AttackKind::Sablayrolles, CostPhase::PerTarget, 15, 1.0, 1, "");
        }
        let r = cost_report(&l, &[]);
        let row = r.row(AttackKind::Sablayrolles).unwrap();
        assert_eq!(row.per_target_models, 45);
        assert_eq!(row.models_per_batch(), 15.0);
        assert!(r.structural_violations().is_empty());
    }

    #[test]
    fn cost_structure_flags_violations() {
        let mut l = CostLedger::new("test");
        l.record(AttackKind::Ours, CostPhase::OneTime, 1, 10.0, 0, "bigan");
        l.record(AttackKind::Watson, CostPhase::OneTime, 30, 100.0, 0, "shadows");
        let r = cost_report(&l, &[AttackKind::OursNatural]);
        assert_eq!(r.row(AttackKind::OursNatural).unwrap().one_time_models, 0);
        assert_eq!(r.row(AttackKind::Ours).unwrap().per_target_models, 0);
        assert!(r.structural_violations().is_empty());
        l.record(AttackKind::Watson, CostPhase::PerTarget, 1, 1.0, 1, "");
        l.record(AttackKind::Sablayrolles, CostPhase::PerTarget, 0, 0.0, 2, "");
        assert_eq!(cost_report(&l, &[]).structural_violations().len(), 2);
    }

    #[test]
    fn ledger_round_trip_keeps_host() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cost_ledger.csv");
        let mut l = CostLedger::new("linux x86_64 cpus=1");
        l.record(AttackKind::Ours, CostPhase::OneTime, 1, 2.5, 0, "bigan, white box");
        l.save(&p).unwrap();
        assert_eq!(CostLedger::load(&p).unwrap(), l);
    }

    fn result(attack: AttackKind, auc: f64) -> AttackResult {
        AttackResult {
            attack,
            dataset: "fmnist".into(),
            model: "mlp5".into(),
            auc,
            accuracy: None,
            histograms: histograms(&[0.0], &[1.0], 2),
            seed: 0,
            members: 1,
            nonmembers: 1,
        }
    }

    #[test]
    fn report_orders_rows_and_marks_absent_cells() {
        let dir = tempfile::tempdir().unwrap();
        let results = [result(AttackKind::Ours, 0.6288), result(AttackKind::Yeom, 0.5484)];
        let victims = [VictimRow { dataset: "fmnist".into(), model: "mlp5".into(), train_acc: 1.0, test_acc: 0.8959 }];
        make_report(&results, &victims, dir.path()).unwrap();
        let md = std::fs::read_to_string(dir.path().join("results.md")).unwrap();
        let lines: Vec<&str> = md.lines().filter(|l| l.starts_with("| ")).collect();
        let order: Vec<usize> = AttackKind::ALL.iter().map(|k| lines.iter().position(|l| l.starts_with(&format!("| {} |", k.title()))).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert!(md.contains("| Shokri et al. | — |"));
        assert!(md.contains("| Ours | 62.88% |"));
        let csv = read_report_csv(&dir.path().join("results.csv")).unwrap();
        for c in &csv {
            let line = lines.iter().find(|l| l.starts_with(&format!("| {} |", c.row))).unwrap();
            assert!(line.contains(&format_cell(c.value)));
        }
        assert!(csv.iter().any(|c| c.row == "Shokri et al." && c.value.is_none()));
    }
}
