use mcml::adaption::select_alpha;
use mcml::corpus::{Corpus, DomainBlock, Sentence, SyntheticSpec};
use mcml::harness::pipeline::{evaluate_cell, evaluate_episodes, test_episodes, train, validation_episodes};
use mcml::harness::{checkpoint_hash, choose_alpha, run_ablation, Dataset, Mode, RunConfig};
use mcml::protonet::SimilarityMetric;

fn desk() -> Dataset {
    Dataset::from_synthetic(&SyntheticSpec::desk_default()).unwrap()
}

fn quick() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.episode.train_episodes = 20;
    cfg.episode.test_episodes = 4;
    cfg.episode.validation_episodes = 3;
    cfg.validate_every = 0;
    cfg
}

#[test]
fn memory_is_filled_only_when_a_mode_needs_it() {
    let (cfg, data) = (quick(), desk());
    let base = train(&cfg, &data, 1, Mode::Baseline, 1).unwrap();
    assert!(base.memory.is_empty());
    assert!(base.log.iter().all(|e| e.memory_loss.is_none()));
    let a = train(&cfg, &data, 1, Mode::A, 1).unwrap();
    assert_eq!(a.memory.episodes_seen(), 20);
    // the memory loss is not part of the objective in A, so parameters match baseline
    assert_eq!(a.model.params, base.model.params);
}

#[test]
fn first_memory_loss_is_zero() {
    let (cfg, data) = (quick(), desk());
    let t = train(&cfg, &data, 2, Mode::M, 1).unwrap();
    assert_eq!(t.log[0].memory_loss, Some(0.0));
    assert_eq!(t.log[0].memory_terms, 0);
    assert!(t.log[1..].iter().any(|e| e.memory_terms > 0));
}

#[test]
fn evaluation_leaves_model_and_memory_untouched() {
    let (cfg, data) = (quick(), desk());
    let t = train(&cfg, &data, 3, Mode::AM, 1).unwrap();
    let before = checkpoint_hash(&t.model.params, &t.memory);
    let val = validation_episodes(&cfg, &data, 3, 1).unwrap();
    let alpha = choose_alpha(&t.model, &t.memory, &val, &cfg).unwrap();
    let eps = test_episodes(&cfg, &data, 3, 1, &data.target[0]).unwrap();
    evaluate_cell(&t.model, &t.memory, &eps, &cfg, Mode::AM, Some(alpha)).unwrap();
    assert_eq!(checkpoint_hash(&t.model.params, &t.memory), before);
}

#[test]
fn training_is_deterministic_per_seed() {
    let (cfg, data) = (quick(), desk());
    let a = train(&cfg, &data, 4, Mode::AM, 1).unwrap();
    let b = train(&cfg, &data, 4, Mode::AM, 1).unwrap();
    assert_eq!(a, b);
    let c = train(&cfg, &data, 5, Mode::AM, 1).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn early_stopping_restores_the_best_probe() {
    let mut cfg = quick();
    cfg.validate_every = 5;
    let data = desk();
    let t = train(&cfg, &data, 6, Mode::Baseline, 1).unwrap();
    assert_eq!(t.validation.iter().map(|v| v.0).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    let best = t.validation.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let val = validation_episodes(&cfg, &data, 6, 1).unwrap();
    let r = evaluate_episodes(&t.model, &t.memory, &val, &cfg, Mode::Baseline, 1.0).unwrap();
    let f1 = r.iter().map(|e| e.f1).sum::<f64>() / r.len() as f64;
    assert_eq!(f1, best);
}

/// Slot words never occur outside their slot and context words never inside one.
fn toy_corpus() -> Dataset {
    let a = ["apple", "pear", "plum"];
    let b = ["paris", "rome", "oslo"];
    let o = ["the", "to", "from", "a"];
    let mut sentences = Vec::new();
    for i in 0..60 {
        let pairs = [
            (o[i % 4], "O"),
            (a[i % 3], "B-fruit"),
            (o[(i / 4) % 4], "O"),
            (b[(i / 3) % 3], "B-city"),
        ];
        let cut = if i % 5 == 0 { 2 } else { 4 };
        sentences.push(Sentence::from_pairs(&pairs[..cut], "toy").unwrap());
    }
    let corpus = Corpus::from_domains(vec![DomainBlock {
        name: "toy".into(),
        sentences,
    }])
    .unwrap();
    Dataset {
        corpus,
        train: vec!["toy".into()],
        validation: vec![],
        target: vec!["toy".into()],
    }
}

#[test]
fn separable_toy_corpus_is_learned_perfectly() {
    let data = toy_corpus();
    let mut cfg = quick();
    cfg.metric = SimilarityMetric::NegSqEuclidean;
    cfg.episode.train_episodes = 150;
    cfg.episode.query_size = 5;
    let t = train(&cfg, &data, 7, Mode::Baseline, 1).unwrap();
    let eps = test_episodes(&cfg, &data, 7, 1, "toy").unwrap();
    let cell = evaluate_cell(&t.model, &t.memory, &eps, &cfg, Mode::Baseline, None).unwrap();
    assert_eq!(cell.counts.scores().f1, 1.0, "{:?}", cell.counts);
}

#[test]
fn alpha_selection_prefers_the_most_adapted_when_adaption_helps() {
    // validation F1 that strictly falls with alpha
    let (alpha, scores) = select_alpha(&[0.1, 0.3, 0.5, 0.7, 0.9], |a| Ok(1.0 - a)).unwrap();
    assert_eq!(alpha, 0.1);
    assert_eq!(scores.len(), 5);
    let (alpha, _) = select_alpha(&[0.1, 0.3, 0.5], |_| Ok(0.4)).unwrap();
    assert_eq!(alpha, 0.5);
}

#[test]
fn single_mode_ablation_has_one_column() {
    let mut cfg = quick();
    cfg.seeds = vec![1, 2];
    cfg.modes = vec![Mode::Baseline];
    let data = desk();
    let table = run_ablation(&cfg, &data).unwrap();
    assert_eq!(table.records.len(), 2 * data.target.len());
    assert!(table.records.iter().all(|r| r.mode == "baseline"));
    let header = table.render().lines().nth(1).unwrap().to_string();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), vec!["domain", "baseline"]);
}

#[test]
fn ablation_needs_two_seeds() {
    let mut cfg = quick();
    cfg.seeds = vec![1];
    assert!(run_ablation(&cfg, &desk()).is_err());
}
