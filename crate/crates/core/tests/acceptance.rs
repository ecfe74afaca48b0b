//! Acceptance checks, one line per criterion.
//!
//! `cargo test --release --test acceptance` runs all of them; pass criterion
//! numbers after `--` to run a subset. Lines go to stdout, training progress
//! to stderr. The process exits 0 unless `MUMT_ACCEPTANCE_STRICT` is set and
//! a criterion failed.

mod common;
mod support;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use mumtaffect::config::{DataConfig, Holdout, Partition};
use mumtaffect::data::split::share;
use mumtaffect::data::synth::{generate, SynthConfig};
use mumtaffect::data::{preprocess, split_by_user, Modality, ProcessedTrial, Split};
use mumtaffect::eval::{argmax, evaluate_model, f1_scores, r2_score, run_cell, Cell, EvalError, GridData, MetricsReport};
use mumtaffect::layers::Ctx;
use mumtaffect::model::{Batch, ModelConfig, MuMTAffect};
use mumtaffect::params::Group;
use mumtaffect::tensor::gradcheck::{check_many, check_store, CheckOptions};
use mumtaffect::tensor::{Graph, Tensor};
use mumtaffect::train::{class_weights, predict, train_phase, train_phases, Checkpoint, EpochRecord, Phase, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn progress(tag: &'static str, start: Instant) -> impl FnMut(&EpochRecord, &MuMTAffect) -> bool {
    move |r, _| {
        eprintln!(
            "  [{tag}] {} epoch {:3}  train {:.4}  val {:.4} (pers {:.4})  {:.0}s",
            r.phase,
            r.epoch,
            r.train.total,
            r.val.total,
            r.val.personality,
            start.elapsed().as_secs_f64()
        );
        false
    }
}

fn processed(cfg: &SynthConfig) -> Vec<ProcessedTrial> {
    generate(cfg).iter().map(|r| preprocess(r).expect("synthetic trial")).collect()
}

fn pick<'a>(trials: &'a [ProcessedTrial], idx: &[usize]) -> Vec<&'a ProcessedTrial> {
    idx.iter().map(|&i| &trials[i]).collect()
}

// 1

fn parameter_count() -> Verdict {
    let start = Instant::now();
    let model = MuMTAffect::new(ModelConfig::default(), 0).expect("default config");
    let count = model.count_parameters();
    let took = start.elapsed();
    let target = 3.43e6;
    let dev = (count.total as f64 - target) / target;
    let groups: Vec<String> = count.by_group.iter().map(|(g, n)| format!("{g} {n}")).collect();
    verdict(
        dev.abs() <= 0.10 && took < Duration::from_secs(1),
        format!(
            "{} parameters ({:+.1}% vs 3.43M; {}), {:.2}s",
            count.total,
            dev * 100.0,
            groups.join(", "),
            secs(took)
        ),
    )
}

// 2

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut checked = 0;
    for case in common::primitive_cases() {
        for seed in 0..5 {
            let r = check_many(&case.f, &common::random_inputs(&case, seed), None, CheckOptions::default()).expect("check");
            checked += r.checked;
            if !r.passed() {
                failures.push(format!("{} (rel {:.1e})", case.name, r.max_rel_err));
            }
        }
    }
    for case in common::layer_cases() {
        let r = check_store(&case.store, &case.f, None, CheckOptions::default()).expect("check");
        checked += r.checked;
        if !r.passed() {
            failures.push(format!("{} (rel {:.1e})", case.name, r.max_rel_err));
        }
    }
    let data = processed(&SynthConfig::new(3, 1, 5));
    let refs: Vec<&ProcessedTrial> = data.iter().collect();
    let e2e = common::model_gradcheck(&ModelConfig::default(), &refs, 40, 1).expect("check");
    if !e2e.passed() {
        failures.push(format!("model (rel {:.1e})", e2e.max_rel_err));
    }
    let took = start.elapsed();
    verdict(
        failures.is_empty() && took < Duration::from_secs(300),
        format!(
            "{checked} primitive/layer entries at 1e-4, {} sampled model entries at 1e-3 (worst {:.1e}); failures: [{}]; {:.0}s",
            e2e.checked,
            e2e.max_rel_err,
            failures.join(", "),
            secs(took)
        ),
    )
}

// 3

fn shapes() -> Verdict {
    let cfg = ModelConfig::default();
    let model = MuMTAffect::new(cfg.clone(), 3).expect("default config");
    let mut problems = Vec::new();
    for (seed, b) in [(0u64, 2usize), (1, 3), (2, 5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-2.0f32..2.0));
        let batch = Batch {
            size: b,
            seqs: Modality::ALL.map(|m| Some(t(&[b, 400, cfg.modality_dims.get(m)]))),
            summary: Some(t(&[b, cfg.summary_dim])),
            stim_emo: Some(t(&[b, 2])),
        };
        let g = Graph::new();
        let p = model.params.bind(&g, true);
        let mut ctx = Ctx::train(seed).tracing();
        let mut reduced = Vec::new();
        for m in Modality::ALL {
            let h = model
                .encode_modality(&p, &mut ctx, m, batch.seqs[m.index()].as_ref().unwrap())
                .expect("encode");
            if h.shape() != [b, 16, 64] {
                problems.push(format!("{m} encoded {:?}", h.shape()));
            }
            reduced.push((m, h));
        }
        let (ps, es, _) = model.fuse_and_route(&p, &mut ctx, &reduced, batch.stim_emo.as_ref()).expect("fuse");
        model.branch_embeddings(&p, &mut ctx, ps, es, batch.summary.as_ref().unwrap()).expect("branches");
        let shapes = ctx.shapes.take().unwrap();
        let lengths = |prefix: &str| -> Vec<usize> {
            shapes.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, s)| s[2]).collect()
        };
        if lengths("personality.") != [16, 16, 8] {
            problems.push(format!("personality {:?}", lengths("personality.")));
        }
        if lengths("emotion.") != [16, 8, 4, 2] {
            problems.push(format!("emotion {:?}", lengths("emotion.")));
        }
        let out = model.forward(&p, &mut Ctx::eval(), &batch).expect("forward");
        if out.valence_logits.shape() != [b, 3] || out.personality.shape() != [b, 5] {
            problems.push("output shapes".into());
        }
    }
    verdict(
        problems.is_empty(),
        format!("batches of 2/3/5: 400 -> 16 per modality, branches 16/16/8 and 16/8/4/2; problems: [{}]", problems.join(", ")),
    )
}

// 4

fn brute_f1(p: &[usize], l: &[usize]) -> Vec<f64> {
    (0..3)
        .map(|c| {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fneg = 0.0;
            for i in 0..p.len() {
                match (p[i] == c, l[i] == c) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fneg += 1.0,
                    _ => {}
                }
            }
            if tp + fp + fneg == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            }
        })
        .collect()
}

fn brute_r2(p: &[f64], y: &[f64]) -> Option<f64> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let res: f64 = p.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    (tot > 0.0).then(|| 1.0 - res / tot)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..25);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let s = f1_scores(&p, &l, 3).expect("f1");
        let b = brute_f1(&p, &l);
        let macro_b = b.iter().sum::<f64>() / 3.0;
        let err = s.per_class.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold((s.macro_f1 - macro_b).abs(), f64::max);
        worst = worst.max(err);
        bad += usize::from(err > 1e-9);
    }
    for _ in 0..1000 {
        let n = rng.random_range(2..25);
        let y: Vec<f64> = if rng.random_bool(0.05) {
            vec![rng.random_range(-3.0..3.0); n]
        } else {
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        match (r2_score(&p, &y), brute_r2(&p, &y)) {
            (Ok(a), Some(b)) => {
                let err = (a - b).abs();
                worst = worst.max(err);
                bad += usize::from(err > 1e-9);
            }
            (Err(EvalError::UndefinedVariance), None) => {}
            _ => bad += 1,
        }
    }
    verdict(bad == 0, format!("2000 random instances, {bad} mismatches, max abs diff {worst:.1e}"))
}

// 5

fn accuracy(scores: &Tensor<f32>, labels: impl Iterator<Item = usize>) -> f64 {
    let mut hits = 0;
    let mut n = 0;
    for (row, l) in scores.data().chunks(3).zip(labels) {
        hits += usize::from(argmax(row) == l);
        n += 1;
    }
    hits as f64 / n as f64
}

fn overfit() -> Verdict {
    let start = Instant::now();
    let data = processed(&SynthConfig::new(4, 8, 42));
    let refs: Vec<&ProcessedTrial> = data.iter().collect();
    let mut model = MuMTAffect::new(ModelConfig::default(), 42).expect("default config");
    model.fit_normalizer(&refs);
    let mut cfg = TrainConfig::default();
    cfg.multitask.epochs = 200;
    // validation is the training set itself; never stop on it
    cfg.patience = 200;
    let weights = class_weights(&refs);
    let eps = cfg.epsilon;
    let measure = |m: &MuMTAffect| {
        let [v, a, p] = predict(m, &refs, 32).expect("predict");
        let acc_v = accuracy(&v, refs.iter().map(|t| t.valence));
        let acc_a = accuracy(&a, refs.iter().map(|t| t.arousal));
        let g = Graph::<f32>::new();
        let target = mumtaffect::train::Labels::from_trials(&refs).personality;
        let loss = mumtaffect::train::epsilon_insensitive_loss(g.constant(p), &target, eps)
            .expect("loss")
            .item() as f64;
        (acc_v, acc_a, loss)
    };
    let mut hook = |r: &EpochRecord, m: &MuMTAffect| {
        let (v, a, pl) = measure(m);
        eprintln!(
            "  [5] epoch {:3}  train {:.4}  acc v {v:.3} a {a:.3}  pers eps-loss {pl:.4}  {:.0}s",
            r.epoch,
            r.train.total,
            start.elapsed().as_secs_f64()
        );
        v >= 0.95 && a >= 0.95 && pl < 0.01
    };
    let out = train_phase(&mut model, &refs, &refs, Phase::Multitask, &cfg, &weights, &mut hook).expect("training");
    let (v, a, pl) = measure(&model);
    let took = start.elapsed();
    let emotion_ok = v >= 0.95 && a >= 0.95;
    verdict(
        emotion_ok && pl < 0.01 && took < Duration::from_secs(600),
        format!(
            "{} epochs; train accuracy valence {v:.3} arousal {a:.3} ({}), personality eps-loss {pl:.4} ({}); {:.0}s",
            out.history.len(),
            if emotion_ok { "ok" } else { "below 0.95" },
            if pl < 0.01 { "ok" } else { "not below 0.01" },
            secs(took)
        ),
    )
}

// 6 and 7

struct Planted {
    trials: Vec<ProcessedTrial>,
    part: Partition,
}

impl Planted {
    fn new() -> Self {
        let trials = processed(&SynthConfig::new(12, 60, 42));
        let cfg = DataConfig {
            holdout: Holdout::Trial,
            ..DataConfig::default()
        };
        let part = cfg.partition(&trials).expect("partition");
        Self { trials, part }
    }
}

fn train_cell(data: &Planted, cell: &Cell, tag: &'static str) -> (MetricsReport, Duration) {
    let start = Instant::now();
    let (tr, va, te) = (
        pick(&data.trials, &data.part.train),
        pick(&data.trials, &data.part.val),
        pick(&data.trials, &data.part.test),
    );
    let grid = GridData {
        train: &tr,
        val: &va,
        test: &te,
    };
    let mut hook = progress(tag, start);
    let (_, report) = run_cell(&grid, &ModelConfig::default(), &TrainConfig::default(), cell, 42, &mut hook).expect("training");
    (report, start.elapsed())
}

fn full_cell() -> Cell {
    Cell {
        modalities: Modality::ALL.to_vec(),
        stim_emo: true,
        emotion_only: false,
    }
}

fn learnability(full: &(MetricsReport, Duration), n_test: usize) -> Verdict {
    let (r, took) = full;
    let r2_ok = r.r2.values().all(|v| v.is_some_and(|v| v >= 0.90));
    let r2: Vec<String> = r
        .r2
        .iter()
        .map(|(k, v)| format!("{k} {}", v.map_or("NA".into(), |v| format!("{v:.3}"))))
        .collect();
    verdict(
        r.arousal.macro_f1 >= 0.80 && r.valence.macro_f1 >= 0.70 && r2_ok && *took < Duration::from_secs(3600),
        format!(
            "{n_test} held-out trials: arousal F1 {:.3}, valence F1 {:.3}, R2 [{}]; {:.0}s",
            r.arousal.macro_f1,
            r.valence.macro_f1,
            r2.join(", "),
            secs(*took)
        ),
    )
}

fn ablation_echoes(data: &Planted, full: &(MetricsReport, Duration)) -> Verdict {
    let no_gsr = Cell {
        modalities: vec![Modality::Eye, Modality::Pupil, Modality::Au],
        ..full_cell()
    };
    let no_stim = Cell {
        stim_emo: false,
        ..full_cell()
    };
    let (g, tg) = train_cell(data, &no_gsr, "7 no gsr");
    let (s, ts) = train_cell(data, &no_stim, "7 no stim");
    let gap = full.0.arousal.macro_f1 - g.arousal.macro_f1;
    let stim_gain = full.0.avg_f1 - s.avg_f1;
    verdict(
        gap > 0.0 && stim_gain >= 0.0,
        format!(
            "(a) arousal F1 full {:.3} vs no-GSR {:.3} (gap {gap:+.3}); (b) avg F1 stim on {:.3} vs off {:.3} ({stim_gain:+.3}); {:.0}s",
            full.0.arousal.macro_f1,
            g.arousal.macro_f1,
            full.0.avg_f1,
            s.avg_f1,
            secs(tg + ts)
        ),
    )
}

// 8

fn schedule() -> Verdict {
    let data = support::trials(3, 4, 8);
    let refs: Vec<&ProcessedTrial> = data.iter().collect();
    let mut model = MuMTAffect::new(support::tiny_config(), 8).expect("config");
    model.fit_normalizer(&refs);
    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 6;
    cfg.multitask.epochs = 6;
    cfg.finetune.epochs = 6;
    cfg.patience = 100;
    cfg.batch_size = 4;
    let out = train_phases(&mut model, &refs[..8], &refs[8..], &Phase::ALL, &cfg, &mut |_, _| false).expect("training");
    // base rates and decay of each phase, by parameter group
    let expected = |p: Phase| -> ([f64; 3], f64) {
        match p {
            Phase::Pretrain => ([1e-4, 1e-4, 1e-4], 0.99),
            Phase::Multitask => ([8e-4, 5e-5, 5e-4], 0.95),
            Phase::Finetune => ([8e-5, 5e-6, 5e-5], 0.95),
        }
    };
    let mut worst = 0f64;
    let mut records = 0;
    for o in &out {
        let (base, gamma) = expected(o.phase);
        for r in &o.history {
            for (i, g) in Group::ALL.into_iter().enumerate() {
                assert_eq!(g.as_str(), ["base", "personality", "emotion"][i]);
                let want = base[i] * gamma.powi(r.epoch as i32);
                worst = worst.max(((r.lr[i] - want) / want).abs());
            }
            records += 1;
        }
    }
    verdict(
        worst <= 1e-12 && records == 18,
        format!("{records} epoch records x 3 groups, max relative deviation {worst:.1e}"),
    )
}

// 9

fn split_hygiene() -> Verdict {
    let mut bad = Vec::new();
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n = rng.random_range(3..=120);
        let ids: Vec<String> = (0..n).map(|i| format!("p{:04}", rng.random_range(0..10_000) * 1000 + i)).collect();
        let s = split_by_user(&ids, seed, 0.15, 0.15).expect("split");
        let (tr, va, te) = (s.members(Split::Train), s.members(Split::Val), s.members(Split::Test));
        let union: BTreeSet<&str> = tr.iter().chain(&va).chain(&te).copied().collect();
        let disjoint = tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te);
        let complete = union.len() == n && tr.len() + va.len() + te.len() == n;
        let test_ok = (te.len() as f64 - 0.15 * n as f64).abs() <= 1.0;
        let val_ok = (va.len() as f64 - 0.15 * (n - te.len()) as f64).abs() <= 1.0;
        let rule = te.len() == share(0.15, n).min(n - 2);
        if !(disjoint && complete && test_ok && val_ok && rule) {
            bad.push(seed);
        }
    }
    verdict(bad.is_empty(), format!("10000 seeds, 3-120 users, failing seeds: {:?}", &bad[..bad.len().min(10)]))
}

// 10

fn round_trip() -> Verdict {
    let data = support::trials(3, 6, 10);
    let refs: Vec<&ProcessedTrial> = data.iter().collect();
    let (train, val, test) = (&refs[..12], &refs[12..15], &refs[15..]);
    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 2;
    cfg.multitask.epochs = 2;
    cfg.finetune.epochs = 2;
    cfg.batch_size = 4;
    let train_once = || {
        let mut m = MuMTAffect::new(ModelConfig::default(), 10).expect("config");
        m.fit_normalizer(train);
        train_phases(&mut m, train, val, &Phase::ALL, &cfg, &mut |_, _| false).expect("training");
        m
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));

    let first = train_once();
    let report = |m: &MuMTAffect| evaluate_model(m, test, 4).expect("eval");
    let original = report(&first);
    Checkpoint::capture(&first, Some(Phase::Finetune), 0, 10, None).save(&a).expect("save");
    let loaded = Checkpoint::load(&a).expect("load");
    loaded.save(&b).expect("save");
    let bytes_a = std::fs::read(&a).unwrap();
    let same_bytes = bytes_a == std::fs::read(&b).unwrap();
    let restored = report(&loaded.to_model().expect("model"));

    let second = train_once();
    let retrained = report(&second);
    let retrained_bytes = Checkpoint::capture(&second, Some(Phase::Finetune), 0, 10, None).to_bytes().unwrap();
    let bits = |r: &MetricsReport| serde_json::to_string(r).unwrap();
    let same_metrics = bits(&original) == bits(&restored) && bits(&restored) == bits(&retrained);
    verdict(
        same_bytes && same_metrics && retrained_bytes == bytes_a,
        format!(
            "save-load-save identical: {same_bytes}; loaded vs retrained metrics identical: {same_metrics}; retrained checkpoint identical: {}",
            retrained_bytes == bytes_a
        ),
    )
}

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n:2} {name}: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    if run(1) {
        report(1, "parameter count", parameter_count());
    }
    if run(2) {
        report(2, "gradient correctness", gradients());
    }
    if run(3) {
        report(3, "pipeline shapes", shapes());
    }
    if run(4) {
        report(4, "metric oracles", metric_oracles());
    }
    if run(5) {
        report(5, "overfit check", overfit());
    }
    if run(6) || run(7) {
        let data = Planted::new();
        let full = train_cell(&data, &full_cell(), "6 full");
        if run(6) {
            report(6, "planted-signal learnability", learnability(&full, data.part.test.len()));
        }
        if run(7) {
            report(7, "directional ablations", ablation_echoes(&data, &full));
        }
    }
    if run(8) {
        report(8, "schedule fidelity", schedule());
    }
    if run(9) {
        report(9, "split hygiene", split_hygiene());
    }
    if run(10) {
        report(10, "checkpoint round trip", round_trip());
    }
    if run(11) {
        println!("criterion 11 external-data grid: SKIP - needs the external dataset; run `mumt ablate --data <dir>`");
    }

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        if std::env::var_os("MUMT_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
