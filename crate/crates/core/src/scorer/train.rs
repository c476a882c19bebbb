//! Pair construction, problem bagging and Bradley-Terry training of one
//! ensemble member.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{softplus, sigmoid, EnergyHead, HeadGrad};
use crate::error::{Error, Result};
use crate::featurize::{featurize_sparse, FeaturizerConfig, MaskIndex, MemberMask, SparseVec};
use crate::pool::CandidatePool;
use crate::seed;

/// Fraction of a violation-scored pool that counts as positive.
pub const VIOLATION_POSITIVE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub problem_id: String,
    pub positive: String,
    pub negative: String,
}

/// `log(1 + exp(e_pos - e_neg))`.
pub fn bt_loss(e_pos: f64, e_neg: f64) -> f64 {
    softplus(e_pos - e_neg)
}

/// All admissible `(positive, negative)` index pairs of a pool, in
/// positive-major order.
///
/// Binary pools pair every correct candidate with every incorrect one.
/// Violation-scored pools take the lowest-violation quarter as positives
/// and pair each with every strictly worse remaining candidate.
pub fn admissible_pairs(pool: &CandidatePool) -> Vec<(usize, usize)> {
    let labeled: Vec<(usize, f64)> = pool
        .candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.label.map(|l| (i, l.quality())))
        .collect();
    if pool.problem.task_kind.uses_violation_score() {
        let mut order = labeled;
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let m = ((order.len() as f64 * VIOLATION_POSITIVE_FRACTION).ceil() as usize).max(1).min(order.len());
        let (pos, neg) = order.split_at(m);
        pos.iter()
            .flat_map(|p| neg.iter().filter(move |n| p.1 > n.1).map(move |n| (p.0, n.0)))
            .collect()
    } else {
        let pos: Vec<usize> = labeled.iter().filter(|l| l.1 > 0.5).map(|l| l.0).collect();
        let neg: Vec<usize> = labeled.iter().filter(|l| l.1 <= 0.5).map(|l| l.0).collect();
        pos.iter().flat_map(|&p| neg.iter().map(move |&n| (p, n))).collect()
    }
}

/// Draws `min(cap, |admissible|)` distinct pairs uniformly without replacement.
pub fn sample_pairs(pool: &CandidatePool, cap: usize, seed: u64) -> Vec<ContrastivePair> {
    let all = admissible_pairs(pool);
    let k = cap.min(all.len());
    let mut rng = seed::rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), k).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let (p, n) = all[i];
            ContrastivePair {
                problem_id: pool.problem.id.clone(),
                positive: pool.candidates[p].id.clone(),
                negative: pool.candidates[n].id.clone(),
            }
        })
        .collect()
}

/// Seeded subset of `round(fraction * n)` ids, returned in input order.
pub fn bag_problems(problem_ids: &[String], fraction: f64, seed: u64) -> Vec<String> {
    let n = problem_ids.len();
    let k = ((fraction * n as f64).round() as usize).clamp(usize::from(n > 0), n);
    let mut rng = seed::rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| problem_ids[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberConfig {
    pub hidden_dim: usize,
    pub mask: MemberMask,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_seed: u64,
    pub bag_seed: u64,
    /// Pairs per minibatch; 0 means full batch.
    pub batch_size: usize,
    /// Epochs without held-out improvement before stopping; 0 disables.
    pub patience: usize,
    /// Fraction of training problems held out for early stopping; 0 disables.
    pub validation_fraction: f64,
}

impl MemberConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.mask.keep_fraction > 0.0 && self.mask.keep_fraction <= 1.0) {
            return bad("keep_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Labeled pools with their full-dimension features computed once.
pub struct TrainingData {
    pub featurizer: FeaturizerConfig,
    pub pools: Vec<CandidatePool>,
    pub features: Vec<Vec<SparseVec>>,
    pool_index: HashMap<String, usize>,
    candidate_index: Vec<HashMap<String, usize>>,
}

impl TrainingData {
    pub fn new(pools: Vec<CandidatePool>, featurizer: &FeaturizerConfig) -> Result<Self> {
        featurizer.validate()?;
        let mut pool_index = HashMap::new();
        for (i, p) in pools.iter().enumerate() {
            if pool_index.insert(p.problem.id.clone(), i).is_some() {
                return Err(Error::DuplicateProblemId(p.problem.id.clone()));
            }
        }
        let features = pools
            .par_iter()
            .map(|p| {
                p.candidates
                    .iter()
                    .map(|c| featurize_sparse(&p.problem.statement, &c.body, featurizer))
                    .collect()
            })
            .collect();
        let candidate_index = pools
            .iter()
            .map(|p| p.candidates.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect())
            .collect();
        Ok(Self {
            featurizer: featurizer.clone(),
            pools,
            features,
            pool_index,
            candidate_index,
        })
    }

    pub fn problem_ids(&self) -> Vec<String> {
        self.pools.iter().map(|p| p.problem.id.clone()).collect()
    }

    pub fn pool(&self, problem_id: &str) -> Option<&CandidatePool> {
        self.pool_index.get(problem_id).map(|&i| &self.pools[i])
    }

    fn resolve(&self, pair: &ContrastivePair) -> Result<Resolved> {
        let missing = |what: &str, id: &str| Error::DegenerateData(format!("pair refers to unknown {what} `{id}`"));
        let pool = *self.pool_index.get(&pair.problem_id).ok_or_else(|| missing("problem", &pair.problem_id))?;
        let idx = &self.candidate_index[pool];
        let pos = *idx.get(&pair.positive).ok_or_else(|| missing("candidate", &pair.positive))?;
        let neg = *idx.get(&pair.negative).ok_or_else(|| missing("candidate", &pair.negative))?;
        Ok(Resolved { pool, pos, neg })
    }

    /// Pairs for every problem in `problem_ids`, each capped at `cap`.
    pub fn pairs_for(&self, problem_ids: &[String], cap: usize, seed: u64) -> Vec<ContrastivePair> {
        problem_ids
            .iter()
            .filter_map(|id| self.pool_index.get(id))
            .flat_map(|&i| {
                let p = &self.pools[i];
                sample_pairs(p, cap, seed::derive(seed, seed::text_key(&p.problem.id), "pairs"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Resolved {
    pub pool: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Training pairs resolved to indices, with member-projected features.
pub(crate) struct MemberView {
    pub pairs: Vec<Resolved>,
    pub features: BTreeMap<usize, Vec<SparseVec>>,
    pub mask: MaskIndex,
}

impl MemberView {
    pub fn new(pairs: &[ContrastivePair], data: &TrainingData, mask: &MemberMask) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::DegenerateData("no contrastive pairs to train on".into()));
        }
        let mask = mask.index(data.featurizer.dim);
        let pairs: Vec<Resolved> = pairs.iter().map(|p| data.resolve(p)).collect::<Result<_>>()?;
        let mut features = BTreeMap::new();
        for r in &pairs {
            features
                .entry(r.pool)
                .or_insert_with(|| data.features[r.pool].iter().map(|v| mask.project(v)).collect::<Vec<_>>());
        }
        Ok(Self { pairs, features, mask })
    }

    fn x(&self, pool: usize, cand: usize) -> &SparseVec {
        &self.features[&pool][cand]
    }

    /// Normalization statistics over every candidate of the paired problems.
    fn normalization(&self) -> (Vec<f64>, Vec<f64>) {
        let rows: Vec<&SparseVec> = self.features.values().flatten().collect();
        EnergyHead::normalization(&rows, self.mask.len())
    }
}

/// Two-level mean of the pair losses: within each problem, then across
/// problems. Returns the loss and, when `grad` is set, accumulates its
/// gradient. Dropout multipliers come from `rng` when `dropout > 0`.
pub(crate) fn batch_objective(
    head: &EnergyHead,
    view: &MemberView,
    batch: &[Resolved],
    dropout: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
    mut grad: Option<&mut HeadGrad>,
) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in batch {
        *counts.entry(r.pool).or_default() += 1;
    }
    let groups = counts.len() as f64;
    let offsets = head.offsets();
    let mut shift_acc = vec![0.0; head.hidden_dim];
    let mut loss = 0.0;
    for r in batch {
        let w = 1.0 / (groups * counts[&r.pool] as f64);
        let xp = view.x(r.pool, r.pos);
        let xn = view.x(r.pool, r.neg);
        let (ep, tp) = head.forward_train(xp, &offsets, dropout, rng);
        let (en, tn) = head.forward_train(xn, &offsets, dropout, rng);
        loss += w * bt_loss(ep, en);
        if let Some(g) = grad.as_deref_mut() {
            let s = w * sigmoid(ep - en);
            head.backward(xp, &tp, s, g, &mut shift_acc);
            head.backward(xn, &tn, -s, g, &mut shift_acc);
        }
    }
    if let Some(g) = grad {
        head.finish_grad(g, &shift_acc);
    }
    loss
}

/// Splits resolved pairs into (train, held-out) by problem.
fn split_by_problem(pairs: &[Resolved], fraction: f64, seed: u64) -> (Vec<Resolved>, Vec<Resolved>) {
    let mut problems: Vec<usize> = pairs.iter().map(|r| r.pool).collect();
    problems.sort_unstable();
    problems.dedup();
    let n_val = (fraction * problems.len() as f64).round() as usize;
    if fraction <= 0.0 || n_val == 0 || n_val >= problems.len() {
        return (pairs.to_vec(), Vec::new());
    }
    problems.shuffle(&mut seed::rng(seed::derive(seed, 0, "validation")));
    let held: std::collections::BTreeSet<usize> = problems[..n_val].iter().copied().collect();
    pairs.iter().partition(|r| !held.contains(&r.pool))
}

/// The member's head before any descent step: normalization from the
/// training pairs' problems and seeded weights.
pub fn init_head(pairs: &[ContrastivePair], data: &TrainingData, cfg: &MemberConfig) -> Result<EnergyHead> {
    cfg.validate()?;
    let view = MemberView::new(pairs, data, &cfg.mask)?;
    let (shift, scale) = view.normalization();
    Ok(EnergyHead::init(shift, scale, cfg.hidden_dim, cfg.init_seed))
}

/// Trains one member from its seeded initialization.
pub fn train_member(pairs: &[ContrastivePair], data: &TrainingData, cfg: &MemberConfig) -> Result<EnergyHead> {
    let head = init_head(pairs, data, cfg)?;
    fit(head, pairs, data, cfg)
}

/// Continues descent on an existing head. Normalization parameters are left
/// untouched; only the layer weights and biases change.
pub fn fit(mut head: EnergyHead, pairs: &[ContrastivePair], data: &TrainingData, cfg: &MemberConfig) -> Result<EnergyHead> {
    cfg.validate()?;
    let view = MemberView::new(pairs, data, &cfg.mask)?;
    if view.mask.len() != head.input_dim {
        return Err(Error::InvalidConfig(format!(
            "head expects {} inputs but the mask keeps {}",
            head.input_dim,
            view.mask.len()
        )));
    }
    if cfg.epochs == 0 {
        return Ok(head);
    }
    let (mut train, val) = split_by_problem(&view.pairs, cfg.validation_fraction, cfg.bag_seed);
    let batch = if cfg.batch_size == 0 { train.len() } else { cfg.batch_size.min(train.len()) };
    let batches_per_epoch = train.len().div_ceil(batch);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut dropout_rng = seed::rng(seed::derive(cfg.init_seed, 0, "dropout"));
    let mut eval_rng = seed::rng(0);
    let early_stop = cfg.patience > 0 && !val.is_empty();
    let mut best = (f64::INFINITY, head.clone());
    let mut stale = 0;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        if cfg.batch_size != 0 {
            train.shuffle(&mut seed::rng(seed::derive(cfg.init_seed, epoch as u64, "order")));
        }
        for chunk in train.chunks(batch) {
            let mut grad = HeadGrad::zeros(&head);
            batch_objective(&head, &view, chunk, cfg.dropout, &mut dropout_rng, Some(&mut grad));
            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            head.descend(&grad, lr);
            step += 1;
        }
        if !head.is_finite() {
            return Err(Error::DegenerateData("training diverged to non-finite weights".into()));
        }
        if early_stop {
            let v = batch_objective(&head, &view, &val, 0.0, &mut eval_rng, None);
            if v < best.0 {
                best = (v, head.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(if early_stop { best.1 } else { head })
}

/// Mean two-level Bradley-Terry loss of `head` on `pairs` (no dropout).
pub fn pair_loss(head: &EnergyHead, pairs: &[ContrastivePair], data: &TrainingData, mask: &MemberMask) -> Result<f64> {
    let view = MemberView::new(pairs, data, mask)?;
    Ok(batch_objective(head, &view, &view.pairs, 0.0, &mut seed::rng(0), None))
}

/// Same loss as [`pair_loss`] together with its analytic gradient with
/// respect to the head's trainable weights.
pub fn loss_and_gradient(
    head: &EnergyHead,
    pairs: &[ContrastivePair],
    data: &TrainingData,
    mask: &MemberMask,
) -> Result<(f64, HeadGrad)> {
    let view = MemberView::new(pairs, data, mask)?;
    let mut grad = HeadGrad::zeros(head);
    let loss = batch_objective(head, &view, &view.pairs, 0.0, &mut seed::rng(0), Some(&mut grad));
    Ok((loss, grad))
}
