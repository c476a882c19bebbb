//! The distributional quality scorer: `K` independently trained energy heads
//! over a shared featurizer, aggregated into a mean energy `mu` and a
//! population standard deviation `sigma`.

pub mod head;
pub mod train;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{featurize_sparse, FeaturizerConfig, MaskIndex, MemberMask};
use crate::pool::{Candidate, CandidatePool, Problem, RunConfig};
use crate::seed;
use crate::select::QualityScorer;

pub use head::EnergyHead;
pub use train::{bag_problems, bt_loss, sample_pairs, train_member, ContrastivePair, MemberConfig, TrainingData};

/// Head widths of the default five-member ensemble, cycled for larger `K`.
pub const DEFAULT_HIDDEN: [usize; 5] = [64, 64, 128, 32, 64];
/// Feature keep fractions of the default five-member ensemble.
pub const DEFAULT_KEEP: [f64; 5] = [0.5, 0.75, 0.5, 0.5, 0.75];

pub const CHECKPOINT_FORMAT: &str = "ebrank-scorer";

/// Heterogeneous member configurations for member `k` of an ensemble with
/// seeds derived from the run's master seed.
pub fn default_member_configs(cfg: &RunConfig) -> Vec<MemberConfig> {
    (0..cfg.k)
        .map(|k| MemberConfig {
            hidden_dim: DEFAULT_HIDDEN[k % DEFAULT_HIDDEN.len()],
            mask: MemberMask {
                mask_seed: seed::derive(cfg.master_seed, k as u64, "mask"),
                keep_fraction: DEFAULT_KEEP[k % DEFAULT_KEEP.len()],
            },
            dropout: cfg.dropout,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            init_seed: seed::derive(cfg.master_seed, k as u64, "init"),
            bag_seed: seed::derive(cfg.master_seed, k as u64, "bag"),
            batch_size: cfg.batch_size,
            patience: cfg.patience,
            validation_fraction: cfg.validation_fraction,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub config: MemberConfig,
    pub head: EnergyHead,
}

/// Member state derived from the stored weights, rebuilt on construction.
#[derive(Debug, Clone)]
struct Prepared {
    mask: MaskIndex,
    offsets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleScorer {
    featurizer: FeaturizerConfig,
    members: Vec<Member>,
    prepared: Vec<Prepared>,
}

impl PartialEq for EnsembleScorer {
    fn eq(&self, other: &Self) -> bool {
        self.featurizer == other.featurizer && self.members == other.members
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleScore {
    pub member_energies: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// False for a single-member ensemble, where `sigma` is reported as 0.
    pub sigma_defined: bool,
}

/// Mean and population standard deviation.
pub fn summarize(energies: &[f64]) -> EnsembleScore {
    let k = energies.len() as f64;
    let mu = energies.iter().sum::<f64>() / k;
    let var = energies.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / k;
    EnsembleScore {
        member_energies: energies.to_vec(),
        mu,
        sigma: var.sqrt(),
        sigma_defined: energies.len() > 1,
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    featurizer: FeaturizerConfig,
    members: Vec<Member>,
}

impl EnsembleScorer {
    pub fn new(featurizer: FeaturizerConfig, members: Vec<Member>) -> Result<Self> {
        featurizer.validate()?;
        if members.is_empty() {
            return Err(Error::InvalidConfig("an ensemble needs at least one member".into()));
        }
        let prepared = members
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mask = m.config.mask.index(featurizer.dim);
                let h = &m.head;
                let shapes_ok = h.input_dim == mask.len()
                    && h.shift.len() == h.input_dim
                    && h.scale.len() == h.input_dim
                    && h.w1.len() == h.input_dim * h.hidden_dim
                    && h.b1.len() == h.hidden_dim
                    && h.w2.len() == h.hidden_dim;
                if !shapes_ok {
                    return Err(Error::Checkpoint(format!("member {k} has inconsistent head dimensions")));
                }
                Ok(Prepared {
                    offsets: h.offsets(),
                    mask,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            featurizer,
            members,
            prepared,
        })
    }

    pub fn featurizer(&self) -> &FeaturizerConfig {
        &self.featurizer
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Energies of every member for one (problem text, candidate text) pair.
    pub fn member_energies_text(&self, x: &str, y: &str) -> Vec<f64> {
        let v = featurize_sparse(x, y, &self.featurizer);
        self.members
            .iter()
            .zip(&self.prepared)
            .map(|(m, p)| m.head.energy(&p.mask.project(&v), &p.offsets))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_tagged(path, None)
    }

    /// Saves with the hash of the run configuration that produced it.
    pub fn save_tagged(&self, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: crate::ARTIFACT_VERSION.into(),
            config_hash: config_hash.map(str::to_string),
            featurizer: self.featurizer.clone(),
            members: self.members.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag `{}`", ck.format)));
        }
        Self::new(ck.featurizer, ck.members)
    }
}

/// Scores one (problem text, candidate text) pair with every member.
pub fn ensemble_score(scorer: &EnsembleScorer, x: &str, y: &str) -> EnsembleScore {
    summarize(&scorer.member_energies_text(x, y))
}

/// Energy of a single member for one pair.
pub fn score_member(head: &EnergyHead, cfg: &MemberConfig, featurizer: &FeaturizerConfig, x: &str, y: &str) -> f64 {
    let mask = cfg.mask.index(featurizer.dim);
    let v = mask.project(&featurize_sparse(x, y, featurizer));
    head.energy(&v, &head.offsets())
}

impl QualityScorer for EnsembleScorer {
    fn member_count(&self) -> usize {
        self.k()
    }

    fn member_energies(&self, problem: &Problem, candidate: &Candidate) -> Vec<f64> {
        self.member_energies_text(&problem.statement, &candidate.body)
    }
}

/// Trains one member: bag problems, sample capped pairs, then descend.
pub fn train_one(data: &TrainingData, cfg: &MemberConfig, bag_fraction: f64, cap: usize) -> Result<Member> {
    let bag = bag_problems(&data.problem_ids(), bag_fraction, cfg.bag_seed);
    let pairs = data.pairs_for(&bag, cap, cfg.bag_seed);
    let head = train_member(&pairs, data, cfg)?;
    Ok(Member {
        config: cfg.clone(),
        head,
    })
}

/// Trains the given members in parallel on shared training data.
pub fn train_ensemble_with(
    data: &TrainingData,
    configs: &[MemberConfig],
    bag_fraction: f64,
    cap: usize,
) -> Result<EnsembleScorer> {
    let members = configs
        .par_iter()
        .map(|c| train_one(data, c, bag_fraction, cap))
        .collect::<Result<Vec<_>>>()?;
    EnsembleScorer::new(data.featurizer.clone(), members)
}

/// Trains the default heterogeneous ensemble described by a run config.
pub fn train_ensemble(pools: &[CandidatePool], cfg: &RunConfig) -> Result<EnsembleScorer> {
    cfg.validate()?;
    let usable = pools.iter().filter(|p| !train::admissible_pairs(p).is_empty()).count();
    if usable == 0 {
        return Err(Error::DegenerateData(
            "no contrastive pairs: no pool has both a positive and a negative candidate".into(),
        ));
    }
    let data = TrainingData::new(pools.to_vec(), &cfg.featurizer)?;
    train_ensemble_with(&data, &default_member_configs(cfg), cfg.bag_fraction, cfg.max_pairs_per_problem)
}
