//! Command implementations behind the `ebrank` binary. Each command reads
//! its inputs from disk, writes self-describing outputs (artifact version and
//! configuration hash embedded), and returns a summary for printing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{self, AblationRow, AblationSpec, ScoredProblem};
use crate::constraints::{ConstraintContext, SandboxDB};
use crate::diagnostics::{self, DfrConfig, DiagnosticReport};
use crate::error::{Error, Result};
use crate::metrics::{build_report, EvalReport, EvalSettings, ProblemEval};
use crate::pool::{self, load_pools, save_pools, CandidatePool, PoolFormat, RunConfig, TaskKind};
use crate::scorer::{self, EnsembleScorer, TrainingData};
use crate::select::{baselines, score_pool, select_best, Baseline, EnergyBreakdown, Pick, PerfectScorer, QualityScorer};
use crate::synth;
use crate::theorysim::{self, SimRow};
use crate::triage::{self, GenerationBackend, NoBackend, ReplayBackend, SyntheticBackend, TriageConfig, TriageOutcome};
use crate::{seed, ARTIFACT_VERSION};

/// Provenance stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub artifact_version: String,
    pub config_hash: String,
}

impl Meta {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.into(),
            config_hash: cfg.hash(),
        }
    }
}

/// Where quality energies come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerSource {
    Checkpoint(PathBuf),
    /// Label-reading stub with `cfg.k` identical members.
    Perfect,
}

impl ScorerSource {
    fn load(&self, cfg: &RunConfig) -> Result<Box<dyn QualityScorer>> {
        Ok(match self {
            ScorerSource::Checkpoint(p) => Box::new(EnsembleScorer::load(p)?),
            ScorerSource::Perfect => Box::new(PerfectScorer { k: cfg.k }),
        })
    }

    fn name(&self) -> &'static str {
        match self {
            ScorerSource::Checkpoint(_) => "checkpoint",
            ScorerSource::Perfect => "perfect-stub",
        }
    }
}

/// Pool file plus the optional sandbox database for itinerary checking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolInput {
    pub path: PathBuf,
    pub format: PoolFormat,
    pub db: Option<PathBuf>,
}

impl PoolInput {
    pub fn jsonl(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            format: PoolFormat::Jsonl,
            db: None,
        }
    }

    pub fn with_db(mut self, db: impl Into<PathBuf>) -> Self {
        self.db = Some(db.into());
        self
    }

    fn load(&self) -> Result<Vec<CandidatePool>> {
        load_pools(&self.path, self.format)
    }

    fn context(&self, cfg: &RunConfig) -> Result<ConstraintContext> {
        let db = self.db.as_ref().map(SandboxDB::load).transpose()?;
        Ok(ConstraintContext {
            db,
            weights: cfg.constraint_weights.clone(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require_labels(pools: &[CandidatePool]) -> Result<Vec<Vec<pool::Label>>> {
    pools
        .iter()
        .map(|p| p.labels().ok_or_else(|| Error::MissingLabels(p.problem.id.clone())))
        .collect()
}

fn lambdas(cfg: &RunConfig, pools: &[CandidatePool]) -> BTreeMap<TaskKind, f64> {
    pools
        .iter()
        .map(|p| (p.problem.task_kind, cfg.effective_lambda(p.problem.task_kind)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub n_pools: usize,
    pub n_candidates: usize,
    pub n_labeled_pools: usize,
}

/// Validates pools and rewrites them as canonical JSON Lines, optionally
/// shuffling candidate order under the configured seed.
pub fn cmd_ingest(cfg: &RunConfig, input: &PoolInput, shuffle: bool, out: &Path) -> Result<IngestSummary> {
    let mut pools = input.load()?;
    if shuffle {
        pools = pools.iter().map(|p| pool::shuffle_pool(p, cfg.shuffle_seed)).collect();
    }
    save_pools(out, &pools)?;
    Ok(IngestSummary {
        n_pools: pools.len(),
        n_candidates: pools.iter().map(CandidatePool::len).sum(),
        n_labeled_pools: pools.iter().filter(|p| p.labels().is_some()).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_pools: usize,
    pub n_usable: usize,
    /// Final Bradley-Terry loss of each member on its own training pairs.
    pub member_losses: Vec<f64>,
}

/// Trains the ensemble described by `cfg` and writes the checkpoint.
pub fn cmd_train(cfg: &RunConfig, input: &PoolInput, out_checkpoint: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let pools = input.load()?;
    require_labels(&pools)?;
    let scorer = scorer::train_ensemble(&pools, cfg)?;
    scorer.save_tagged(out_checkpoint, Some(&cfg.hash()))?;
    let data = TrainingData::new(pools, &cfg.featurizer)?;
    let ids = data.problem_ids();
    let member_losses = scorer
        .members()
        .par_iter()
        .map(|m| {
            let bag = scorer::bag_problems(&ids, cfg.bag_fraction, m.config.bag_seed);
            let pairs = data.pairs_for(&bag, cfg.max_pairs_per_problem, m.config.bag_seed);
            scorer::train::pair_loss(&m.head, &pairs, &data, &m.config.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSummary {
        n_pools: data.pools.len(),
        n_usable: data.pools.iter().filter(|p| !scorer::train::admissible_pairs(p).is_empty()).count(),
        member_losses,
    })
}

/// Scored pool as written to JSON Lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPool {
    #[serde(flatten)]
    pub meta: Meta,
    pub problem_id: String,
    pub lambda: f64,
    pub selection: Pick,
    pub breakdowns: Vec<EnergyBreakdown>,
}

fn score_all(
    cfg: &RunConfig,
    pools: &[CandidatePool],
    scorer: &dyn QualityScorer,
    ctx: &ConstraintContext,
) -> Result<Vec<ScoredPool>> {
    let meta = Meta::new(cfg);
    pools
        .par_iter()
        .map(|p| {
            let lambda = cfg.effective_lambda(p.problem.task_kind);
            let breakdowns = score_pool(p, scorer, ctx, lambda)?;
            if breakdowns.iter().any(|b| b.mu.is_nan() || b.sigma.is_nan()) {
                return Err(Error::Internal(format!("non-finite energy in pool `{}`", p.problem.id)));
            }
            Ok(ScoredPool {
                meta: meta.clone(),
                problem_id: p.problem.id.clone(),
                lambda,
                selection: select_best(&breakdowns),
                breakdowns,
            })
        })
        .collect()
}

/// Writes one energy breakdown record per pool.
pub fn cmd_score(cfg: &RunConfig, input: &PoolInput, source: &ScorerSource, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let pools = input.load()?;
    let scorer = source.load(cfg)?;
    let scored = score_all(cfg, &pools, scorer.as_ref(), &input.context(cfg)?)?;
    pool::write_jsonl(out, &scored)?;
    Ok(scored.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    #[serde(flatten)]
    pub meta: Meta,
    pub problem_id: String,
    pub candidate_id: String,
    pub index: usize,
    pub degraded: bool,
    pub mu: f64,
    pub sigma: f64,
    #[serde(with = "crate::select::float_serde")]
    pub e_constraint: f64,
    #[serde(with = "crate::select::float_serde")]
    pub total: f64,
    pub decision: triage::Decision,
}

/// Writes the minimum-energy candidate of every pool with its triage action.
pub fn cmd_select(cfg: &RunConfig, input: &PoolInput, source: &ScorerSource, out: &Path) -> Result<Vec<SelectionRecord>> {
    cfg.validate()?;
    let pools = input.load()?;
    let scorer = source.load(cfg)?;
    let scored = score_all(cfg, &pools, scorer.as_ref(), &input.context(cfg)?)?;
    let records: Vec<SelectionRecord> = scored
        .into_iter()
        .zip(&pools)
        .map(|(s, p)| {
            let b = &s.breakdowns[s.selection.index];
            let tcfg = TriageConfig::from_run(cfg, p.problem.task_kind);
            SelectionRecord {
                meta: s.meta.clone(),
                problem_id: s.problem_id.clone(),
                candidate_id: s.selection.candidate_id.clone(),
                index: s.selection.index,
                degraded: s.selection.degraded,
                mu: b.mu,
                sigma: b.sigma,
                e_constraint: b.e_constraint,
                total: b.total,
                decision: triage::decide(b.sigma, b.e_constraint, &tcfg),
            }
        })
        .collect();
    pool::write_jsonl(out, &records)?;
    Ok(records)
}

/// Second-pass generation source.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    None,
    Replay(PathBuf),
    Synthetic { accuracy: f64 },
}

impl BackendSpec {
    fn build(&self, cfg: &RunConfig) -> Result<Box<dyn GenerationBackend>> {
        Ok(match self {
            BackendSpec::None => Box::new(NoBackend),
            BackendSpec::Replay(p) => Box::new(ReplayBackend::load(p)?),
            BackendSpec::Synthetic { accuracy } => {
                if !(0.0..=1.0).contains(accuracy) {
                    return Err(Error::InvalidConfig(format!("backend accuracy {accuracy} outside [0, 1]")));
                }
                Box::new(SyntheticBackend {
                    master_seed: cfg.master_seed,
                    accuracy: *accuracy,
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageRecord {
    #[serde(flatten)]
    pub meta: Meta,
    pub lambda: f64,
    pub theta_sigma: f64,
    pub theta_abstain: f64,
    #[serde(flatten)]
    pub outcome: TriageOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageSummary {
    pub n_problems: usize,
    pub n_triggered: usize,
    pub n_adopted: usize,
    pub n_abstained: usize,
    /// Over labeled problems: pass@1 of the pass-1 selection.
    pub single_pass_at_1: Option<f64>,
    /// Over labeled problems: pass@1 of the final selection, abstention ignored.
    pub two_pass_at_1: Option<f64>,
    pub backend_warnings: usize,
}

fn outcome_correct(pool: &CandidatePool, o: &TriageOutcome, final_pick: bool, threshold: f64) -> Option<bool> {
    let id = if final_pick { &o.selection.candidate_id } else { &o.pass1_selection.candidate_id };
    pool.candidates
        .iter()
        .chain(&o.pass2_candidates)
        .find(|c| &c.id == id)
        .and_then(|c| c.label)
        .map(|l| l.is_correct(threshold))
}

/// Runs select, regenerate and reselect over every pool.
pub fn cmd_triage(
    cfg: &RunConfig,
    input: &PoolInput,
    source: &ScorerSource,
    backend: &BackendSpec,
    out: &Path,
) -> Result<TriageSummary> {
    cfg.validate()?;
    let pools = input.load()?;
    let scorer = source.load(cfg)?;
    let ctx = input.context(cfg)?;
    let backend = backend.build(cfg)?;
    let meta = Meta::new(cfg);
    let records = pools
        .par_iter()
        .map(|p| {
            let tcfg = TriageConfig::from_run(cfg, p.problem.task_kind);
            let outcome = triage::run_two_pass(p, scorer.as_ref(), &ctx, backend.as_ref(), &tcfg)?;
            Ok(TriageRecord {
                meta: meta.clone(),
                lambda: tcfg.lambda,
                theta_sigma: tcfg.theta_sigma,
                theta_abstain: tcfg.theta_abstain,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pool::write_jsonl(out, &records)?;
    let th = cfg.pass_threshold;
    let rate = |final_pick: bool| {
        let v: Vec<bool> = pools
            .iter()
            .zip(&records)
            .filter_map(|(p, r)| outcome_correct(p, &r.outcome, final_pick, th))
            .collect();
        (!v.is_empty()).then(|| v.iter().filter(|x| **x).count() as f64 / v.len() as f64)
    };
    Ok(TriageSummary {
        n_problems: records.len(),
        n_triggered: records.iter().filter(|r| r.outcome.pass2_triggered).count(),
        n_adopted: records.iter().filter(|r| r.outcome.adopted_pass2).count(),
        n_abstained: records.iter().filter(|r| r.outcome.abstained_if_triggered).count(),
        single_pass_at_1: rate(false),
        two_pass_at_1: rate(true),
        backend_warnings: records.iter().filter(|r| r.outcome.backend_warning.is_some()).count(),
    })
}

/// Contents of `report.json` written by [`cmd_eval`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    pub scorer: String,
    pub lambda: BTreeMap<TaskKind, f64>,
    pub theta_sigma: f64,
    pub theta_abstain: f64,
    pub report: EvalReport,
    /// pass@1 of each reference selector; `None` when it cannot run (for
    /// example no greedy flags in the pools).
    pub baselines: BTreeMap<Baseline, Option<f64>>,
}

pub const SCORED_FILE: &str = "scored.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Scores labeled pools, writes `scored.jsonl`, `report.json` and
/// `report.csv` into `out_dir`, and returns the report.
pub fn cmd_eval(cfg: &RunConfig, input: &PoolInput, source: &ScorerSource, out_dir: &Path) -> Result<EvalArtifact> {
    cfg.validate()?;
    let pools = input.load()?;
    if pools.is_empty() {
        return Err(Error::DegenerateData("no pools to evaluate".into()));
    }
    let labels = require_labels(&pools)?;
    let scorer = source.load(cfg)?;
    let scored = score_all(cfg, &pools, scorer.as_ref(), &input.context(cfg)?)?;
    let th = cfg.pass_threshold;
    let problems: Vec<ProblemEval> = scored
        .iter()
        .zip(&pools)
        .zip(labels)
        .map(|((s, p), labels)| ProblemEval {
            problem_id: s.problem_id.clone(),
            breakdowns: s.breakdowns.clone(),
            labels,
            selected: s.selection.index,
            violation_scored: p.problem.task_kind.uses_violation_score(),
        })
        .collect();
    let settings = EvalSettings {
        violation_threshold: th,
        ..EvalSettings::default()
    };
    let report = build_report(&problems, &settings);

    let picks: Vec<Result<BTreeMap<Baseline, Pick>>> =
        pools.par_iter().map(|p| baselines(p, cfg.master_seed, th)).collect();
    let mut baseline_rates = BTreeMap::new();
    for b in Baseline::ALL {
        let mut hits = 0usize;
        let mut ok = true;
        for (pk, pe) in picks.iter().zip(&problems) {
            let pick = match (b, pk) {
                (_, Ok(m)) => Some(m[&b].index),
                (Baseline::Random, Err(_)) => pools
                    .iter()
                    .find(|p| p.problem.id == pe.problem_id)
                    .map(|p| crate::select::random_pick(p, cfg.master_seed).index),
                (Baseline::SelfConsistency, Err(_)) => pools
                    .iter()
                    .find(|p| p.problem.id == pe.problem_id)
                    .map(|p| crate::select::self_consistency_pick(p).index),
                (Baseline::Oracle, Err(_)) => pools
                    .iter()
                    .find(|p| p.problem.id == pe.problem_id)
                    .and_then(|p| crate::select::oracle_pick(p, th).ok())
                    .map(|k| k.index),
                (Baseline::Greedy, Err(_)) => None,
            };
            match pick {
                Some(i) => hits += usize::from(pe.labels[i].is_correct(th)),
                None => ok = false,
            }
        }
        baseline_rates.insert(b, ok.then(|| hits as f64 / problems.len() as f64));
    }

    let tcfg = TriageConfig::from_run(cfg, TaskKind::MathAnswer);
    let artifact = EvalArtifact {
        meta: Meta::new(cfg),
        scorer: source.name().into(),
        lambda: lambdas(cfg, &pools),
        theta_sigma: tcfg.theta_sigma,
        theta_abstain: tcfg.theta_abstain,
        report,
        baselines: baseline_rates,
    };
    create_dir(out_dir)?;
    pool::write_jsonl(out_dir.join(SCORED_FILE), &scored)?;
    write_json(&out_dir.join(REPORT_JSON), &artifact)?;
    let csv_path = out_dir.join(REPORT_CSV);
    fs::write(&csv_path, artifact.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(artifact)
}

impl EvalArtifact {
    /// The report's long-format CSV with provenance, λ/θ and baseline rows.
    pub fn to_csv(&self) -> String {
        let mut out = self.report.to_csv();
        let mut row = |m: &str, k: &str, v: String| {
            let _ = writeln!(out, "{m},{k},{v}");
        };
        row("meta", "artifact_version", self.meta.artifact_version.clone());
        row("meta", "config_hash", self.meta.config_hash.clone());
        row("meta", "scorer", self.scorer.clone());
        for (kind, l) in &self.lambda {
            row("lambda", &serde_json::to_value(kind).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default(), format!("{l}"));
        }
        row("theta_sigma", "", format!("{}", self.theta_sigma));
        row("theta_abstain", "", format!("{}", self.theta_abstain));
        for (b, v) in &self.baselines {
            row("baseline_pass_at_1", b.name(), v.map_or_else(|| "undefined".into(), |x| format!("{x}")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    #[serde(flatten)]
    pub report: DiagnosticReport,
}

/// Confounding screen of a trained scorer on labeled pools.
pub fn cmd_diagnose(cfg: &RunConfig, input: &PoolInput, checkpoint: &Path, out: &Path) -> Result<DiagnosticReport> {
    let pools = input.load()?;
    let scorer = EnsembleScorer::load(checkpoint)?;
    let pre = diagnostics::screen(&scorer, &pools, cfg.pass_threshold)?;
    let report = DiagnosticReport::new(pre, None);
    write_json(
        out,
        &DiagnosticArtifact {
            meta: Meta::new(cfg),
            report: report.clone(),
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArtifact {
    #[serde(flatten)]
    pub meta: Meta,
    pub scorer: String,
    pub spec: AblationSpec,
    pub rows: Vec<AblationRow>,
}

/// Ensemble-size, pool-size and pool-source ablations from one scoring pass.
pub fn cmd_ablate(
    cfg: &RunConfig,
    input: &PoolInput,
    source: &ScorerSource,
    spec: &AblationSpec,
    out: &Path,
) -> Result<AblationArtifact> {
    cfg.validate()?;
    let pools = input.load()?;
    let labels = require_labels(&pools)?;
    let scorer = source.load(cfg)?;
    let scored = score_all(cfg, &pools, scorer.as_ref(), &input.context(cfg)?)?;
    let problems: Vec<ScoredProblem> = scored
        .into_iter()
        .zip(labels)
        .map(|(s, labels)| ScoredProblem {
            problem_id: s.problem_id,
            lambda: s.lambda,
            breakdowns: s.breakdowns,
            labels,
        })
        .collect();
    let artifact = AblationArtifact {
        meta: Meta::new(cfg),
        scorer: source.name().into(),
        spec: spec.clone(),
        rows: ablation::ablate(&problems, spec, cfg.pass_threshold)?,
    };
    write_json(out, &artifact)?;
    Ok(artifact)
}

/// Arguments of [`cmd_dfr`].
#[derive(Debug, Clone, PartialEq)]
pub struct DfrJob {
    pub checkpoint: PathBuf,
    /// Pools the balanced retraining set is drawn from.
    pub balance: PoolInput,
    /// Pools for the before/after screen; the balance pools when absent.
    pub eval: Option<PoolInput>,
    pub cap_per_cell: usize,
    pub dfr: DfrConfig,
    pub out_checkpoint: PathBuf,
    pub out_report: PathBuf,
}

/// Retrains the heads on group-balanced data and screens before and after.
pub fn cmd_dfr(cfg: &RunConfig, job: &DfrJob) -> Result<DiagnosticReport> {
    let scorer = EnsembleScorer::load(&job.checkpoint)?;
    let source = job.balance.load()?;
    let balanced = diagnostics::group_balance(
        &source,
        job.cap_per_cell,
        seed::derive(cfg.master_seed, 0, "group-balance"),
        cfg.pass_threshold,
    )?;
    let eval = match &job.eval {
        Some(e) => e.load()?,
        None => source,
    };
    let retrained = diagnostics::dfr_retrain(&scorer, &balanced, &job.dfr)?;
    retrained.save_tagged(&job.out_checkpoint, Some(&cfg.hash()))?;
    let pre = diagnostics::screen(&scorer, &eval, cfg.pass_threshold)?;
    let post = diagnostics::screen(&retrained, &eval, cfg.pass_threshold)?;
    let report = DiagnosticReport::new(pre, Some(post));
    write_json(
        &job.out_report,
        &DiagnosticArtifact {
            meta: Meta::new(cfg),
            report: report.clone(),
        },
    )?;
    Ok(report)
}

/// Grid for the voting-model simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub ks: Vec<usize>,
    pub qs: Vec<f64>,
    pub rhos: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SimGrid {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 5, 7, 9],
            qs: vec![0.55, 0.6, 0.7, 0.8, 0.9],
            rhos: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            trials: 100_000,
            seed: 42,
        }
    }
}

/// Closed-form, exact and Monte Carlo ensemble accuracy over a grid, as CSV.
pub fn cmd_simulate(grid: &SimGrid, out: &Path) -> Result<Vec<SimRow>> {
    let rows = theorysim::simulate_grid(&grid.ks, &grid.qs, &grid.rhos, grid.trials, grid.seed)?;
    let mut text = format!("{}\n", theorysim::SIM_CSV_HEADER);
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(rows)
}

/// Which synthetic corpus to emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    Separable(synth::SeparableParams),
    Confounded(synth::ConfoundedParams),
    KkPuzzles(synth::KkParams),
    Itineraries(synth::ItineraryParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub artifact_version: String,
    pub spec: SyntheticSpec,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the generated pools (and database, for itineraries) into
/// `out_dir` with a manifest recording the parameters.
pub fn cmd_generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticManifest> {
    create_dir(out_dir)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, pools: &[CandidatePool]| -> Result<()> {
        save_pools(out_dir.join(name), pools)?;
        files.push(name.to_string());
        Ok(())
    };
    match spec {
        SyntheticSpec::Separable(p) => emit("pools.jsonl", &synth::separable(p)?)?,
        SyntheticSpec::Confounded(p) => {
            let s = synth::confounded(p)?;
            emit("train.jsonl", &s.train)?;
            emit("dfr.jsonl", &s.dfr)?;
            emit("eval.jsonl", &s.eval)?;
        }
        SyntheticSpec::KkPuzzles(p) => emit("pools.jsonl", &synth::kk_pools(p)?)?,
        SyntheticSpec::Itineraries(p) => {
            let (db, pools) = synth::itineraries(p)?;
            emit("pools.jsonl", &pools)?;
            write_json(&out_dir.join("db.json"), db.tables())?;
            files.push("db.json".into());
        }
    }
    let manifest = SyntheticManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        spec: spec.clone(),
        files,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// Plain-text side-by-side summary of one or more `report.json` files.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::InvalidConfig("no report files given".into()));
    }
    let arts = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<EvalArtifact>(&text).map_err(|e| Error::schema(e.line(), format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("config".into(), arts.iter().map(|a| a.meta.config_hash[..12].to_string()).collect()),
        ("scorer".into(), arts.iter().map(|a| a.scorer.clone()).collect()),
        ("problems".into(), arts.iter().map(|a| a.report.n_problems.to_string()).collect()),
        ("pass@1".into(), arts.iter().map(|a| format!("{:.4}", a.report.pass_at_1)).collect()),
        ("mean violation".into(), arts.iter().map(|a| fmt_opt(a.report.mean_violation)).collect()),
        ("energy gap".into(), arts.iter().map(|a| fmt_opt(a.report.energy_gap)).collect()),
        ("kendall tau".into(), arts.iter().map(|a| fmt_opt(a.report.kendall_tau)).collect()),
        ("sigma AUROC".into(), arts.iter().map(|a| fmt_opt(a.report.sigma_auroc)).collect()),
        ("ECE".into(), arts.iter().map(|a| format!("{:.4}", a.report.ece)).collect()),
        ("theta sigma/abstain".into(), arts.iter().map(|a| format!("{}/{}", a.theta_sigma, a.theta_abstain)).collect()),
    ];
    for b in Baseline::ALL {
        rows.push((
            format!("{} pass@1", b.name()),
            arts.iter().map(|a| fmt_opt(a.baselines.get(&b).copied().flatten())).collect(),
        ));
    }
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let col_w = rows.iter().flat_map(|r| r.1.iter().map(String::len)).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for p in paths {
        let name = p.parent().and_then(|d| d.file_name()).unwrap_or(p.as_os_str()).to_string_lossy();
        let _ = write!(out, "  {name:>col_w$}");
    }
    out.push('\n');
    for (label, vals) in rows {
        let _ = write!(out, "{label:label_w$}");
        for v in vals {
            let _ = write!(out, "  {v:>col_w$}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(Error::DegenerateData("x".into()).exit_code(), 3);
        assert_eq!(Error::InvalidConfig("x".into()).exit_code(), 2);
        assert_eq!(Error::MissingLabels("p".into()).exit_code(), 2);
        assert_eq!(Error::Internal("x".into()).exit_code(), 4);
    }

    #[test]
    fn perfect_stub_eval_matches_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::Separable(synth::SeparableParams {
            n_problems: 40,
            ..Default::default()
        });
        cmd_generate_synthetic(&spec, dir.path()).unwrap();
        let cfg = RunConfig::default();
        let art = cmd_eval(&cfg, &PoolInput::jsonl(dir.path().join("pools.jsonl")), &ScorerSource::Perfect, &dir.path().join("eval"))
            .unwrap();
        assert_eq!(Some(art.report.pass_at_1), art.baselines[&Baseline::Oracle]);
        assert!(art.baselines[&Baseline::Greedy].is_some());
        let csv = fs::read_to_string(dir.path().join("eval").join(REPORT_CSV)).unwrap();
        assert!(csv.contains(&format!("meta,config_hash,{}", cfg.hash())));
        let summary = cmd_report(&[dir.path().join("eval").join(REPORT_JSON)]).unwrap();
        assert!(summary.contains("pass@1"));
    }
}
