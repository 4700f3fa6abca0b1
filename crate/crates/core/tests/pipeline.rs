use eeglang::config::RunConfig;
use eeglang::eval::{datasets_of, dump_embeddings, prepare_corpus};
use eeglang::instruct::{Catalog, InstructionLevel, TaskSet, TextSource};
use eeglang::textembed::{EmbeddingStore, Embedder};
use eeglang::train::{run_pretrain, run_tune, RunOptions};

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.train.seed = seed;
    cfg.train.batch_size = 8;
    cfg.train.pretrain_epochs = 1;
    cfg.train.tune_epochs = 1;
    cfg.data.subjects = 4;
    cfg.data.trials_per_subject_per_class = 2;
    cfg.data.test_subjects = 1;
    cfg
}

#[test]
fn losses_stay_finite_across_seeds() {
    for seed in 0..10 {
        let cfg = small(seed);
        let data = prepare_corpus(&cfg, seed).unwrap();
        let pre = run_pretrain(&data.train, &data.val, &cfg, RunOptions::default()).unwrap();
        let tasks = TaskSet::build(
            &datasets_of(&data.train),
            &Catalog::bundled(),
            &Embedder::pseudo(cfg.train.text_seed, cfg.instruct.text_dim),
        )
        .unwrap();
        let tuned = run_tune(&data.train, &data.val, Some(&pre), &tasks, &cfg, RunOptions::default()).unwrap();
        for row in pre.curve.rows.iter().chain(&tuned.curve.rows) {
            assert!(row.loss.is_finite(), "seed {seed}: {row:?}");
        }
        assert!(tuned.store.iter().all(|(_, p)| p.value.all_finite()), "seed {seed}");
    }
}

#[test]
fn dump_has_a_row_per_trial_and_prototype() {
    let cfg = small(1);
    let data = prepare_corpus(&cfg, 1).unwrap();
    let model = eeglang::model::Model::new(&cfg, 1).unwrap();
    let tasks = TaskSet::build(
        &datasets_of(&data.train),
        &Catalog::bundled(),
        &Embedder::pseudo(cfg.train.text_seed, cfg.instruct.text_dim),
    )
    .unwrap();
    let trials: Vec<_> = data.train.iter().take(10).cloned().collect();
    assert_eq!(trials.len(), 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    dump_embeddings(&model, &tasks, &trials, &[InstructionLevel::TaskAndTargets], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let classes = tasks.get(&datasets_of(&trials)[0]).unwrap().bank.len();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 10 + classes);
    let width = lines[0].split(',').count();
    assert_eq!(width, 3 + cfg.instruct.text_dim);
    for l in &lines[1..] {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells.len(), width);
        let v: Vec<f64> = cells[3..].iter().map(|c| c.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite()));
    }
    assert_eq!(lines.iter().filter(|l| l.starts_with("prototype:")).count(), classes);
}

#[test]
fn exporter_store_resolves_every_catalog_text() {
    let catalog = Catalog::bundled();
    let dim = 12;
    // written the way the exporter does: quoted text, tab, space-separated floats
    let mut file = format!("dim={dim} encoder=sentence-encoder@0123abcd\n");
    for (i, text) in catalog.all_texts().iter().enumerate() {
        let v: Vec<String> = (0..dim).map(|j| format!("{:.6}", ((i * 7 + j * 3) % 11) as f64 - 4.5)).collect();
        file.push_str(&format!("{}\t{}\n", serde_json::to_string(text).unwrap(), v.join(" ")));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.embtxt");
    std::fs::write(&path, &file).unwrap();

    let store = EmbeddingStore::load(&path).unwrap();
    assert_eq!(store.dim(), dim);
    assert_eq!(store.len(), catalog.all_texts().len());
    for text in catalog.all_texts() {
        let v = store.get(&text).unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() <= 1e-5);
    }
    let source = TextSource {
        encoder_tag: Some("sentence-encoder@0123abcd".into()),
        fallback_seed: None,
        dim,
    };
    let embedder = source.embedder(Some(store.clone())).unwrap();
    let datasets: Vec<String> = catalog.entries().iter().map(|e| e.name.clone()).collect();
    let tasks = TaskSet::build(&datasets, &catalog, &embedder).unwrap();
    for d in &datasets {
        let b = tasks.get(d).unwrap();
        for level in InstructionLevel::ALL {
            assert_eq!(b.instruction(level).len(), dim);
        }
    }
    // a store from another encoder is refused
    let other = TextSource {
        encoder_tag: Some("other".into()),
        ..source
    };
    assert!(other.embedder(Some(store)).is_err());
    // a truncated row names its line
    let mut lines: Vec<String> = file.lines().map(String::from).collect();
    let cut = lines[1].rfind(' ').unwrap();
    lines[1].truncate(cut);
    let broken = lines.join("\n");
    let err = EmbeddingStore::parse(&broken, &path).unwrap_err().to_string();
    assert!(err.contains(":2:"), "{err}");
}
