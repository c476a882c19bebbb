use ebrank::diagnostics::{dfr_retrain, group_balance, DfrConfig};
use ebrank::featurize::{FeaturizerConfig, MemberMask};
use ebrank::metrics::kendall_tau_b;
use ebrank::scorer::{
    bt_loss, default_member_configs, score_member, train_ensemble, train_ensemble_with, EnsembleScorer, MemberConfig,
    TrainingData,
};
use ebrank::synth::{self, ConfoundedParams, SeparableParams};
use ebrank::{seed, CandidatePool, RunConfig};

fn small_cfg() -> RunConfig {
    RunConfig {
        epochs: 4,
        featurizer: FeaturizerConfig {
            dim: 1024,
            ..FeaturizerConfig::default()
        },
        ..RunConfig::default()
    }
}

fn separable(n: usize, seed: u64) -> Vec<CandidatePool> {
    synth::separable(&SeparableParams {
        n_problems: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn well_separated_pair_is_confidently_ranked() {
    // The preference probability for the positive is exp(-loss).
    for gap in [10.0, 12.5, 40.0] {
        assert!((-bt_loss(0.0, gap)).exp() >= 1.0 - 1e-4, "{gap}");
    }
    assert_eq!(bt_loss(1.5, 1.5), std::f64::consts::LN_2);
}

#[test]
fn members_do_not_depend_on_training_order() {
    let cfg = small_cfg();
    let data = TrainingData::new(separable(40, 3), &cfg.featurizer).unwrap();
    let configs = default_member_configs(&cfg);
    let forward = train_ensemble_with(&data, &configs, cfg.bag_fraction, cfg.max_pairs_per_problem).unwrap();
    let mut reversed_cfgs = configs.clone();
    reversed_cfgs.reverse();
    let reversed = train_ensemble_with(&data, &reversed_cfgs, cfg.bag_fraction, cfg.max_pairs_per_problem).unwrap();
    for (a, b) in forward.members().iter().zip(reversed.members().iter().rev()) {
        assert_eq!(a, b);
    }
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let cfg = small_cfg();
    let pools = separable(30, 4);
    let scorer = train_ensemble(&pools, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    scorer.save(&path).unwrap();
    let loaded = EnsembleScorer::load(&path).unwrap();
    assert_eq!(loaded, scorer);
    for p in &pools {
        for c in &p.candidates {
            let a = scorer.member_energies_text(&p.problem.statement, &c.body);
            let b = loaded.member_energies_text(&p.problem.statement, &c.body);
            assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
    std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
    assert!(EnsembleScorer::load(&path).is_err());
}

fn rank_correlation(data: &TrainingData, a: &MemberConfig, b: &MemberConfig, eval: &[CandidatePool]) -> f64 {
    let scorer = train_ensemble_with(data, &[a.clone(), b.clone()], 0.8, 16).unwrap();
    let m = scorer.members();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for p in eval {
        for c in &p.candidates {
            x.push(score_member(&m[0].head, &m[0].config, scorer.featurizer(), &p.problem.statement, &c.body));
            y.push(score_member(&m[1].head, &m[1].config, scorer.featurizer(), &p.problem.statement, &c.body));
        }
    }
    kendall_tau_b(&x, &y).unwrap()
}

#[test]
fn feature_masks_lower_member_correlation() {
    let cfg = small_cfg();
    let data = TrainingData::new(separable(80, 5), &cfg.featurizer).unwrap();
    let eval = separable(30, 6);
    let base = default_member_configs(&cfg)[0].clone();
    let with = |mask_seed: u64, keep: f64, init: u64| MemberConfig {
        mask: MemberMask {
            mask_seed,
            keep_fraction: keep,
        },
        init_seed: init,
        ..base.clone()
    };
    let init_only = rank_correlation(&data, &with(1, 1.0, 10), &with(1, 1.0, 11), &eval);
    let masked = rank_correlation(&data, &with(1, 0.5, 10), &with(2, 0.5, 11), &eval);
    assert!(masked < init_only, "masked {masked} vs init-only {init_only}");
}

#[test]
fn retraining_touches_only_head_weights() {
    let cfg = RunConfig {
        epochs: 3,
        ..small_cfg()
    };
    let splits = synth::confounded(&ConfoundedParams {
        n_train: 40,
        n_dfr: 30,
        n_eval: 10,
        ..Default::default()
    })
    .unwrap();
    let scorer = train_ensemble(&splits.train, &cfg).unwrap();
    let balanced = group_balance(&splits.dfr, 20, seed::derive(1, 0, "b"), 0.0).unwrap();
    let mut cells = std::collections::BTreeMap::new();
    for c in balanced.iter().flat_map(|p| &p.candidates) {
        *cells.entry((c.generator_id.clone(), c.label.unwrap().is_correct(0.0))).or_insert(0) += 1;
    }
    assert_eq!(cells.len(), 8);
    assert!(cells.values().all(|&n| n <= 20));

    let dfr = DfrConfig {
        epochs: 2,
        ..DfrConfig::from_run(&cfg)
    };
    let retrained = dfr_retrain(&scorer, &balanced, &dfr).unwrap();
    assert_eq!(retrained.featurizer(), scorer.featurizer());
    for (a, b) in scorer.members().iter().zip(retrained.members()) {
        assert_eq!(a.config, b.config);
        assert_eq!(a.head.shift.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.head.shift.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.head.scale.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.head.scale.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_ne!(a.head.w1, b.head.w1);
    }

    let unchanged = dfr_retrain(&scorer, &balanced, &DfrConfig { epochs: 0, ..dfr }).unwrap();
    assert_eq!(unchanged, scorer);
    let one_class: Vec<CandidatePool> = balanced
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.candidates.retain(|c| c.label.unwrap().is_correct(0.0));
            p
        })
        .collect();
    assert!(dfr_retrain(&scorer, &one_class, &dfr).is_err());
}
