//! Evaluation metrics: pass@1 and pass@N, mean violation, energy gap,
//! Kendall tau-b, sigma-AUROC, expected calibration error, the
//! sigma-binned reliability table and selective-prediction sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pool::Label;
use crate::select::{pass_at_n, EnergyBreakdown};

/// Mean energy of incorrect items minus mean energy of correct items, or
/// `None` when either class is absent.
pub fn energy_gap(items: &[(f64, bool)]) -> Option<f64> {
    let (mut sc, mut nc, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for &(e, ok) in items {
        if ok {
            sc += e;
            nc += 1;
        } else {
            si += e;
            ni += 1;
        }
    }
    (nc > 0 && ni > 0).then(|| si / ni as f64 - sc / nc as f64)
}

/// Counts inversions of `v` while merge-sorting it.
fn sort_count_swaps(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid]) + sort_count_swaps(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            merged.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Number of tied pairs within runs of equal values of an already sorted key.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for x in sorted {
        if prev.as_ref() == Some(&x) {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
        }
        prev = Some(x);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Tie-corrected Kendall tau-b in `O(n log n)`. `None` when either variable
/// is constant or the input has fewer than two points.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "kendall_tau_b needs paired samples");
    let n = x.len() as u64;
    if n < 2 {
        return None;
    }
    let mut pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n0 = n * (n - 1) / 2;
    let n1 = tied_pairs(pts.iter().map(|p| p.0));
    let n3 = tied_pairs(pts.iter().map(|p| (p.0, p.1)));
    let mut ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let swaps = sort_count_swaps(&mut ys);
    let n2 = tied_pairs(ys.iter().copied());
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    let num = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    Some(num / denom)
}

/// Per-problem tau-b between negated total energy and label quality,
/// averaged over problems where it is defined.
pub fn kendall_tau<'a>(problems: impl IntoIterator<Item = (&'a [EnergyBreakdown], &'a [Label])>) -> Option<f64> {
    let taus: Vec<f64> = problems
        .into_iter()
        .filter_map(|(b, l)| {
            let x: Vec<f64> = b.iter().map(|e| -e.total).collect();
            let y: Vec<f64> = l.iter().map(|l| l.quality()).collect();
            kendall_tau_b(&x, &y)
        })
        .collect();
    (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64)
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

/// AUROC of `score` for detecting the positive class, ties counted half.
pub fn auroc(items: &[(f64, bool)]) -> Option<f64> {
    let n_pos = items.iter().filter(|i| i.1).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let scores: Vec<f64> = items.iter().map(|i| i.0).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = ranks.iter().zip(items).filter(|(_, i)| i.1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// AUROC of sigma as a predictor of an incorrect selection. Items are
/// `(sigma_selected, selected_is_correct)`.
pub fn sigma_auroc(items: &[(f64, bool)]) -> Option<f64> {
    let flipped: Vec<(f64, bool)> = items.iter().map(|&(s, ok)| (s, !ok)).collect();
    auroc(&flipped)
}

fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((x - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Expected calibration error over equal-width confidence bins on `[0, 1]`.
pub fn ece(items: &[(f64, bool)], bins: usize) -> f64 {
    assert!(bins > 0, "ece needs at least one bin");
    if items.is_empty() {
        return 0.0;
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for &(c, ok) in items {
        let b = bin_of(c, 0.0, 1.0, bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += f64::from(u8::from(ok));
    }
    let n = items.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] / m - conf[b] / m).abs()
        })
        .sum()
}

/// Probability mass of candidate `index` under `softmax(-total)` over the
/// pool. Infinite totals carry no mass; an all-infinite pool is uniform.
pub fn selection_confidence(breakdowns: &[EnergyBreakdown], index: usize) -> f64 {
    let finite: Vec<f64> = breakdowns.iter().map(|b| b.total).filter(|t| t.is_finite()).collect();
    if finite.is_empty() {
        return 1.0 / breakdowns.len() as f64;
    }
    let sel = breakdowns[index].total;
    if !sel.is_finite() {
        return 0.0;
    }
    let m = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let z: f64 = finite.iter().map(|t| (m - t).exp()).sum();
    (m - sel).exp() / z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub mean_sigma: Option<f64>,
}

/// Accuracy of selections within equal-width bins of sigma over
/// `[0, max sigma]`.
pub fn reliability_table(items: &[(f64, bool)], bins: usize) -> Vec<ReliabilityBin> {
    assert!(bins > 0, "reliability table needs at least one bin");
    let hi = items.iter().map(|i| i.0).fold(0.0, f64::max);
    let width = if hi > 0.0 { hi / bins as f64 } else { 0.0 };
    let mut rows: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); bins];
    for &(s, ok) in items {
        let r = &mut rows[bin_of(s, 0.0, hi, bins)];
        r.0 += 1;
        r.1 += f64::from(u8::from(ok));
        r.2 += s;
    }
    rows.into_iter()
        .enumerate()
        .map(|(b, (count, hits, ssum))| ReliabilityBin {
            sigma_lo: b as f64 * width,
            sigma_hi: (b + 1) as f64 * width,
            count,
            accuracy: (count > 0).then(|| hits / count as f64),
            mean_sigma: (count > 0).then(|| ssum / count as f64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveItem {
    pub problem_id: String,
    pub sigma: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivePoint {
    pub abstain_fraction: f64,
    pub retained: usize,
    /// `None` when every problem is dropped.
    pub pass_at_1: Option<f64>,
}

/// Drops the `ceil(f * n)` highest-sigma problems (ties by problem id) and
/// reports pass@1 on the remainder, for each fraction `f`.
pub fn selective_sweep(items: &[SelectiveItem], fractions: &[f64]) -> Vec<SelectivePoint> {
    let mut order: Vec<&SelectiveItem> = items.iter().collect();
    order.sort_by(|a, b| b.sigma.total_cmp(&a.sigma).then_with(|| a.problem_id.cmp(&b.problem_id)));
    let n = items.len();
    fractions
        .iter()
        .map(|&f| {
            let drop = ((f * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let kept = &order[drop.min(n)..];
            let hits = kept.iter().filter(|i| i.correct).count();
            SelectivePoint {
                abstain_fraction: f,
                retained: kept.len(),
                pass_at_1: (!kept.is_empty()).then(|| hits as f64 / kept.len() as f64),
            }
        })
        .collect()
}

/// Everything the report needs about one evaluated problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemEval {
    pub problem_id: String,
    pub breakdowns: Vec<EnergyBreakdown>,
    pub labels: Vec<Label>,
    /// Index of the selected candidate (before any abstention).
    pub selected: usize,
    pub violation_scored: bool,
}

impl ProblemEval {
    pub fn selected_correct(&self, threshold: f64) -> bool {
        self.labels[self.selected].is_correct(threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub violation_threshold: f64,
    pub ece_bins: usize,
    pub abstain_fractions: Vec<f64>,
}

pub const DEFAULT_ABSTAIN_FRACTIONS: &[f64] = &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            violation_threshold: 0.0,
            ece_bins: 10,
            abstain_fractions: DEFAULT_ABSTAIN_FRACTIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_problems: usize,
    pub pass_at_1: f64,
    /// `(n, fraction of problems solved within the n lowest energies)`.
    pub pass_at_n_curve: Vec<(usize, f64)>,
    pub mean_violation: Option<f64>,
    pub energy_gap: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub sigma_auroc: Option<f64>,
    pub ece: f64,
    pub selective_curve: Vec<SelectivePoint>,
    pub reliability: Vec<ReliabilityBin>,
}

/// Aggregates per-problem results into a report.
///
/// # Panics
/// If `problems` is empty.
pub fn build_report(problems: &[ProblemEval], settings: &EvalSettings) -> EvalReport {
    assert!(!problems.is_empty(), "cannot report on zero problems");
    let th = settings.violation_threshold;
    let n = problems.len() as f64;
    let correct: Vec<bool> = problems.iter().map(|p| p.selected_correct(th)).collect();
    let pass_at_1 = correct.iter().filter(|c| **c).count() as f64 / n;

    let max_n = problems.iter().map(|p| p.breakdowns.len()).max().unwrap_or(1);
    let ns: Vec<usize> = (1..=max_n).collect();
    let mut hits = vec![0usize; max_n];
    for p in problems {
        for (n, ok) in pass_at_n(&p.breakdowns, &p.labels, &ns, th) {
            hits[n - 1] += usize::from(ok);
        }
    }
    let pass_at_n_curve = ns.iter().map(|&k| (k, hits[k - 1] as f64 / n)).collect();

    let violations: Vec<f64> = problems
        .iter()
        .filter(|p| p.violation_scored)
        .map(|p| -p.labels[p.selected].quality())
        .collect();
    let mean_violation = (!violations.is_empty()).then(|| violations.iter().sum::<f64>() / violations.len() as f64);

    let gap_items: Vec<(f64, bool)> = problems
        .iter()
        .flat_map(|p| p.breakdowns.iter().zip(&p.labels).map(|(b, l)| (b.mu, l.is_correct(th))))
        .collect();

    let sigma_defined = problems.iter().all(|p| p.breakdowns[p.selected].sigma_defined);
    let sel_sigma: Vec<(f64, bool)> = problems
        .iter()
        .zip(&correct)
        .map(|(p, &ok)| (p.breakdowns[p.selected].sigma, ok))
        .collect();
    let conf: Vec<(f64, bool)> = problems
        .iter()
        .zip(&correct)
        .map(|(p, &ok)| (selection_confidence(&p.breakdowns, p.selected), ok))
        .collect();
    let selective: Vec<SelectiveItem> = problems
        .iter()
        .zip(&correct)
        .map(|(p, &ok)| SelectiveItem {
            problem_id: p.problem_id.clone(),
            sigma: p.breakdowns[p.selected].sigma,
            correct: ok,
        })
        .collect();

    EvalReport {
        n_problems: problems.len(),
        pass_at_1,
        pass_at_n_curve,
        mean_violation,
        energy_gap: energy_gap(&gap_items),
        kendall_tau: kendall_tau(problems.iter().map(|p| (p.breakdowns.as_slice(), p.labels.as_slice()))),
        sigma_auroc: if sigma_defined { sigma_auroc(&sel_sigma) } else { None },
        ece: ece(&conf, settings.ece_bins),
        selective_curve: selective_sweep(&selective, &settings.abstain_fractions),
        reliability: reliability_table(&sel_sigma, settings.ece_bins),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v}"))
}

impl EvalReport {
    /// Long-format CSV: `metric,key,value`, one row per scalar or curve point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        let mut row = |m: &str, k: &str, v: String| {
            let _ = writeln!(out, "{m},{k},{v}");
        };
        row("n_problems", "", self.n_problems.to_string());
        row("pass_at_1", "", format!("{}", self.pass_at_1));
        for (n, v) in &self.pass_at_n_curve {
            row("pass_at_n", &n.to_string(), format!("{v}"));
        }
        row("mean_violation", "", opt(self.mean_violation));
        row("energy_gap", "", opt(self.energy_gap));
        row("kendall_tau", "", opt(self.kendall_tau));
        row("sigma_auroc", "", opt(self.sigma_auroc));
        row("ece", "", format!("{}", self.ece));
        for p in &self.selective_curve {
            row("selective_pass_at_1", &format!("{}", p.abstain_fraction), opt(p.pass_at_1));
        }
        for b in &self.reliability {
            row("reliability_accuracy", &format!("{}-{}", b.sigma_lo, b.sigma_hi), opt(b.accuracy));
        }
        out
    }
}
