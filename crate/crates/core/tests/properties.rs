use eeglang::autograd::Tape;
use eeglang::data::{split_corpus, SplitMode, SplitPlan};
use eeglang::eval::{balanced_accuracy, cohens_kappa, ConfusionMatrix};
use eeglang::instruct::{alignment_loss, predict, PrototypeBank};
use eeglang::params::{ParamGroup, ParamStore};
use eeglang::signal::fft::{round_trip, zero_band, SpectralPlan};
use eeglang::signal::montage::idw_weights;
use eeglang::signal::{segment, spectral_mask, BandMask, RawTrial, Segment};
use eeglang::tensor::Matrix;
use eeglang::textembed::{pseudo_embed, EmbeddingStore};
use eeglang::tokenizer::TokenizerConfig;
use eeglang::train::{cosine_lr, AdamW, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

fn seg(rows: usize, x: &[f64]) -> Segment {
    let cols = x.len() / rows;
    Segment {
        trial_id: "p".into(),
        index: 0,
        sample_rate: 200.0,
        data: Array2::from_shape_fn((rows, cols), |(r, c)| x[r * cols + c] as f32),
    }
}

fn band() -> impl Strategy<Value = BandMask> {
    (0.5f64..90.0, 1.0f64..10.0).prop_map(|(lo, w)| BandMask { f_min: lo, f_max: lo + w })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fft_round_trip(x in (1usize..300).prop_flat_map(signal)) {
        let y = round_trip(&x);
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        for (a, b) in xf.iter().zip(round_trip(&xf)) {
            prop_assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0));
        }
    }

    #[test]
    fn band_zeroing_is_idempotent(x in (8usize..400).prop_flat_map(signal), b in band()) {
        let plan = SpectralPlan::<f64>::new(x.len());
        let mut once = x.clone();
        zero_band(&plan, &mut once, 200.0, b.f_min, b.f_max);
        let mut twice = once.clone();
        zero_band(&plan, &mut twice, 200.0, b.f_min, b.f_max);
        for (a, c) in once.iter().zip(&twice) {
            prop_assert!((a - c).abs() <= 1e-9);
        }
        // the f32 segment path agrees up to single precision
        let s = seg(1, &x);
        let m1 = spectral_mask(&s, b).unwrap();
        let m2 = spectral_mask(&m1, b).unwrap();
        for ((p, q), r) in m1.data.iter().zip(m2.data.iter()).zip(&once) {
            prop_assert!((p - q).abs() <= 1e-3 && (*p as f64 - r).abs() <= 1e-3);
        }
    }

    #[test]
    fn band_zeroing_is_linear(
        (x, y) in (8usize..400).prop_flat_map(|n| (signal(n), signal(n))),
        a in -2.0f64..2.0,
        c in -2.0f64..2.0,
        b in band(),
    ) {
        let plan = SpectralPlan::<f64>::new(x.len());
        let mask = |v: &[f64]| {
            let mut v = v.to_vec();
            zero_band(&plan, &mut v, 200.0, b.f_min, b.f_max);
            v
        };
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + c * q).collect();
        let (l, mx, my) = (mask(&mix), mask(&x), mask(&y));
        for i in 0..l.len() {
            prop_assert!((l[i] - (a * mx[i] + c * my[i])).abs() <= 1e-6);
        }
    }

    #[test]
    fn segments_concatenate_to_kept_prefix(t in 1usize..700, window in 1usize..150) {
        let names: Vec<String> = eeglang::signal::Montage65::standard().names().to_vec();
        let data = Array2::from_shape_fn((65, t), |(r, c)| (r * 1000 + c) as f32);
        let trial = RawTrial::new("t", "s", None, names, 200.0, data.clone()).unwrap();
        let segs = segment(&trial, window).unwrap();
        prop_assert_eq!(segs.len(), t / window);
        let kept = segs.len() * window;
        let views: Vec<_> = segs.iter().map(|s| s.data.view()).collect();
        if kept > 0 {
            let joined = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
            prop_assert_eq!(joined, data.slice(ndarray::s![.., ..kept]).to_owned());
        }
        for (i, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.index, i);
        }
    }

    #[test]
    fn idw_weights_sum_to_one(
        target in prop::array::uniform3(-1.0f64..1.0),
        sources in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..12),
    ) {
        let w = idw_weights(&target, &sources, 3);
        prop_assert!(!w.is_empty() && w.len() <= 3);
        prop_assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|p| p.1 >= 0.0 && p.0 < sources.len()));
    }

    #[test]
    fn tokenizer_shape_law(t in 40usize..2000) {
        let cfg = TokenizerConfig::default();
        prop_assert_eq!(cfg.tokens_per_segment(t), (t + 2 * 20 - 40 + 1) / 10);
    }

    #[test]
    fn cosine_lr_nonincreasing(total in 1usize..500, peak in 1e-5f64..1e-1, frac in 0.0f64..1.0) {
        let min = peak * frac;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, peak, min).unwrap();
            prop_assert!(lr <= prev && lr >= min && lr <= peak);
            prev = lr;
        }
    }

    #[test]
    fn adamw_update_is_bounded(
        theta in prop::collection::vec(-3.0f64..3.0, 6),
        coef in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..8),
        lr in 1e-5f64..1e-1,
        wd in 0.0f64..0.1,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Head, Matrix::row_vector(theta));
        let cfg = TrainConfig { weight_decay: wd, ..TrainConfig::default() };
        let mut opt = AdamW::new(&cfg, store.len());
        // each step uses a different linear loss sum(c ⊙ w), gradient c
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (t, c) in coef.iter().enumerate().map(|(i, c)| (i as i32 + 1, c)) {
            let grads = {
                let mut tape = Tape::new(&store);
                let w = tape.param(id);
                let k = tape.constant(Matrix::row_vector(c.clone()));
                let prod = tape.mul(w, k);
                let ones = tape.constant(Matrix::filled(6, 1, 1.0));
                let loss = tape.matmul(prod, ones);
                tape.backward(loss)
            };
            let before = store.value(id).clone();
            opt.step(&mut store, &grads, lr, |_| 1.0).unwrap();
            // Cauchy-Schwarz bound on |m̂/√v̂| after t steps; equals 1 at t = 1
            let geo: f64 = (0..t).map(|j| (b1 * b1 / b2).powi(j)).sum();
            let cap = (1.0 - b1) / (1.0 - b1.powi(t)) * ((1.0 - b2.powi(t)) / (1.0 - b2)).sqrt() * geo.sqrt();
            for (a, b) in before.data().iter().zip(store.value(id).data()) {
                let step = (b - a * (1.0 - lr * wd)).abs();
                prop_assert!(step <= lr * cap * (1.0 + 1e-9), "step {t}: {step} > {}", lr * cap);
            }
        }
    }

    #[test]
    fn adamw_first_step_is_at_most_lr(theta in -3.0f64..3.0, g in -5.0f64..5.0, lr in 1e-5f64..1e-1) {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Head, Matrix::scalar(theta));
        let mut opt = AdamW::new(&TrainConfig { weight_decay: 0.0, ..TrainConfig::default() }, 1);
        let grads = {
            let mut tape = Tape::new(&store);
            let w = tape.param(id);
            let loss = tape.scale(w, g);
            tape.backward(loss)
        };
        opt.step(&mut store, &grads, lr, |_| 1.0).unwrap();
        prop_assert!((store.value(id).item() - theta).abs() <= lr * (1.0 + 1e-9));
    }

    #[test]
    fn balanced_accuracy_ignores_relabeling((t, p) in labels(40, 4), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        let classes = names(4);
        let map = |v: &[usize], f: &dyn Fn(usize) -> usize| v.iter().map(|&i| classes[f(i)].clone()).collect::<Vec<_>>();
        let base = balanced_accuracy(&map(&t, &|i| i), &map(&p, &|i| i), &classes).unwrap();
        let relabeled = balanced_accuracy(&map(&t, &|i| perm[i]), &map(&p, &|i| perm[i]), &classes).unwrap();
        prop_assert!((base - relabeled).abs() <= 1e-12);
    }

    #[test]
    fn kappa_at_most_one_and_recomputable((t, p) in labels(30, 3)) {
        let classes = names(3);
        let yt: Vec<String> = t.iter().map(|&i| classes[i].clone()).collect();
        let yp: Vec<String> = p.iter().map(|&i| classes[i].clone()).collect();
        let k = cohens_kappa(&yt, &yp, &classes).unwrap();
        prop_assert!(k.value <= 1.0 + 1e-12);
        let cm = ConfusionMatrix::new(&yt, &yp, &classes).unwrap();
        prop_assert_eq!(cm.kappa(), k);
        prop_assert_eq!(cm.balanced_accuracy(), balanced_accuracy(&yt, &yp, &classes).unwrap());
        for c in 0..3 {
            prop_assert_eq!(cm.support(c), t.iter().filter(|&&i| i == c).count());
        }
        let perfect = cohens_kappa(&yt, &yt, &classes).unwrap();
        let observed = t.iter().collect::<std::collections::HashSet<_>>().len();
        prop_assert_eq!(perfect.value == 1.0, observed >= 2);
    }

    #[test]
    fn binary_balanced_kappa_identity(half in 1usize..30, flips in prop::collection::vec(any::<bool>(), 60)) {
        let classes = names(2);
        let yt: Vec<String> = (0..2 * half).map(|i| classes[i % 2].clone()).collect();
        let yp: Vec<String> = yt.iter().zip(&flips).map(|(y, &f)| if f { classes[(y == &classes[0]) as usize].clone() } else { y.clone() }).collect();
        let b = balanced_accuracy(&yt, &yp, &classes).unwrap();
        let k = cohens_kappa(&yt, &yp, &classes).unwrap();
        prop_assert!((k.value - (2.0 * b - 1.0)).abs() <= 1e-12);
    }

    #[test]
    fn alignment_loss_range(h in prop::collection::vec(-5.0f64..5.0, 8), k in 2usize..6, label in 0usize..6, seed in 0u64..1000) {
        prop_assume!(norm(&h) > 1e-6);
        let classes = names(k);
        let vectors: Vec<Vec<f64>> = classes.iter().map(|c| pseudo_embed(c, seed, 8).unwrap().vector).collect();
        let bank = PrototypeBank::new(classes.clone(), vectors).unwrap();
        let label = &classes[label % k];
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let hv = tape.constant(Matrix::row_vector(h.clone()));
        let l = alignment_loss(&mut tape, hv, label, &bank).unwrap();
        let l = tape.value(l).item();
        prop_assert!((-1e-15..=2.0 / k as f64 + 1e-15).contains(&l));
        // positive multiple of the prototype gives zero
        let proto: Vec<f64> = bank.prototype(label).unwrap().iter().map(|x| x * 3.7).collect();
        let pv = tape.constant(Matrix::row_vector(proto));
        let z = alignment_loss(&mut tape, pv, label, &bank).unwrap();
        prop_assert!(tape.value(z).item().abs() <= 1e-14);
    }

    #[test]
    fn predict_scale_invariant(h in prop::collection::vec(-5.0f64..5.0, 8), s in 1e-3f64..1e3, seed in 0u64..1000) {
        prop_assume!(norm(&h) > 1e-6);
        let classes = names(4);
        let vectors: Vec<Vec<f64>> = classes.iter().map(|c| pseudo_embed(c, seed, 8).unwrap().vector).collect();
        let bank = PrototypeBank::new(classes, vectors).unwrap();
        let scaled: Vec<f64> = h.iter().map(|x| x * s).collect();
        prop_assert_eq!(predict(&h, &bank).unwrap().index, predict(&scaled, &bank).unwrap().index);
    }

    #[test]
    fn pseudo_embeddings_are_unit_and_pure(text in "\\PC{1,40}", seed in any::<u64>(), dim in 1usize..64) {
        let a = pseudo_embed(&text, seed, dim).unwrap();
        prop_assert!((norm(&a.vector) - 1.0).abs() <= 1e-5);
        prop_assert_eq!(&a, &pseudo_embed(&text, seed, dim).unwrap());
    }

    #[test]
    fn store_round_trip(
        entries in prop::collection::btree_map("[^\\x00-\\x1f]{1,20}", prop::collection::vec(-10.0f64..10.0, 5), 1..6),
    ) {
        let mut store = EmbeddingStore::new(5, "enc-rev1").unwrap();
        for (t, v) in &entries {
            prop_assume!(norm(v) > 1e-6);
            store.insert(t.clone(), v.clone()).unwrap();
        }
        let text = store.to_text();
        let back = EmbeddingStore::parse(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), store.len());
        prop_assert_eq!(back.encoder_tag(), "enc-rev1");
        for t in entries.keys() {
            let (v, w) = (back.get(t).unwrap(), store.get(t).unwrap());
            prop_assert!((norm(v) - 1.0).abs() <= 1e-5);
            prop_assert!(v.iter().zip(w).all(|(p, q)| (p - q).abs() <= 1e-15));
        }
        // a second pass is stable once values are normalized
        let again = EmbeddingStore::parse(&back.to_text(), std::path::Path::new("mem")).unwrap();
        for t in entries.keys() {
            prop_assert!(again.get(t).unwrap().iter().zip(back.get(t).unwrap()).all(|(p, q)| (p - q).abs() <= 1e-15));
        }
    }

    #[test]
    fn splits_partition_the_corpus(subjects in 3usize..9, per in 2usize..4, test in 1usize..3, multi in any::<bool>()) {
        prop_assume!(test < subjects - 1);
        let names: Vec<String> = eeglang::signal::Montage65::standard().names()[..2].to_vec();
        let corpus: Vec<RawTrial> = (0..subjects)
            .flat_map(|s| (0..per * 2).map(move |i| (s, i)))
            .map(|(s, i)| {
                let label = Some(if i % 2 == 0 { "a" } else { "b" }.to_string());
                RawTrial::new(format!("s{s}-t{i}"), format!("S{s}"), label, names.clone(), 200.0, Array2::zeros((2, 4))).unwrap()
            })
            .collect();
        let plan = SplitPlan {
            mode: if multi { SplitMode::MultiSubject } else { SplitMode::CrossSubject },
            test_subjects: Some(test),
            ..SplitPlan::default()
        };
        let s = split_corpus(&corpus, &plan).unwrap();
        prop_assert_eq!(&s, &split_corpus(&corpus, &plan).unwrap());
        let mut ids: Vec<&str> = s.train.iter().chain(&s.val).chain(&s.test).map(|t| t.trial_id.as_str()).collect();
        ids.sort();
        let mut all: Vec<&str> = corpus.iter().map(|t| t.trial_id.as_str()).collect();
        all.sort();
        prop_assert_eq!(ids, all);
        if !multi {
            let test_subjects: std::collections::HashSet<_> = s.test.iter().map(|t| &t.subject_id).collect();
            prop_assert!(s.train.iter().chain(&s.val).all(|t| !test_subjects.contains(&t.subject_id)));
        }
    }
}
