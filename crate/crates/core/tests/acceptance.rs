//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::sync::Arc;
use std::time::Instant;

use hmem_core::autograd::{finite_diff_check, FdOptions, Graph, Tensor, Var};
use hmem_core::compressor::{build_hierarchy, build_hierarchy_vars, compress_level};
use hmem_core::data::{gen_icl_dataset, VocabSpec};
use hmem_core::eval::{evaluate, random_match_probability, EvalOptions};
use hmem_core::memstore::HierDatabase;
use hmem_core::model::{ModelConfig, Transformer};
use hmem_core::retriever::{
    dense_retrieve, encode_retrieval, retrieve, sparse_retrieve, top_c_indices, GraphDatabase,
    RetrievalConfig,
};
use hmem_core::session::{ImmediateScheduler, Session, SessionConfig, TriggerMode, Turn};
use hmem_core::trainer::{answer_forward, instrumented_forwards, pipeline_forward, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tiny(vocab: usize, d: usize, layers: usize, max_positions: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        max_positions,
        ..ModelConfig::default()
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(6..vocab)).collect()
}

/// Levels by repeated ceiling division, independent of the depth formula.
fn ceil_div_levels(n: usize, k: usize) -> Vec<usize> {
    let mut lens = vec![n];
    while *lens.last().unwrap() > 1 {
        lens.push(lens.last().unwrap().div_ceil(k));
    }
    lens
}

fn depth_law() -> Outcome {
    let model = Transformer::new(tiny(32, 8, 1, 10_000), 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases: Vec<(usize, usize)> = vec![(4096, 4)];
    while cases.len() < 200 {
        cases.push((rng.random_range(2..=10_000), [2, 4, 8][rng.random_range(0..3)]));
    }
    for &(n, k) in &cases {
        let h = build_hierarchy(&model, &random_tokens(&mut rng, n, 32), k).map_err(|e| e.to_string())?;
        let lens: Vec<usize> = (0..h.levels.len()).map(|l| h.level_len(l)).collect();
        ensure(lens == ceil_div_levels(n, k), || format!("n={n} k={k}: level lengths {lens:?}"))?;
    }
    let h = build_hierarchy(&model, &random_tokens(&mut rng, 4096, 32), 4).map_err(|e| e.to_string())?;
    ensure(h.depth() == 6, || format!("n=4096 k=4 gave {} levels", h.depth()))?;
    Ok(format!("{} cases, n=4096 k=4 -> 6 levels", cases.len()))
}

fn segment_locality() -> Outcome {
    let model = Transformer::new(tiny(32, 16, 2, 256), 2).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checks = 0;
    for _ in 0..50 {
        let k = rng.random_range(2..=4);
        let n = rng.random_range(k + 1..=60);
        let tokens = random_tokens(&mut rng, n, 32);
        let base = build_hierarchy(&model, &tokens, k).map_err(|e| e.to_string())?;

        // Token perturbation: only the ancestors of the changed position move.
        let p = rng.random_range(0..n);
        let mut changed = tokens.clone();
        changed[p] = 6 + (changed[p] - 6 + 1) % 26;
        let other = build_hierarchy(&model, &changed, k).map_err(|e| e.to_string())?;
        for l in 1..base.levels.len() {
            let ancestor = p / k.pow(l as u32);
            for j in 0..base.level_len(l) {
                let same = base.levels[l].row(j) == other.levels[l].row(j);
                ensure(same == (j != ancestor), || {
                    format!("n={n} k={k} token {p}: level {l} row {j} same={same}")
                })?;
                checks += 1;
            }
        }

        // Embedding perturbation of one segment at every level.
        for l in 0..base.depth() {
            let len = base.level_len(l);
            let j = rng.random_range(0..len.div_ceil(k));
            let mut bumped = base.levels[l].clone();
            let d = bumped.shape()[1];
            bumped.data_mut()[(k * j) * d] += 0.5;
            let g = Graph::new();
            let bm = model.bind_frozen(&g);
            let a = g.value(compress_level(&bm, g.constant(&base.levels[l]), k).map_err(|e| e.to_string())?);
            let b = g.value(compress_level(&bm, g.constant(&bumped), k).map_err(|e| e.to_string())?);
            for i in 0..a.shape()[0] {
                let same = a.row(i) == b.row(i);
                ensure(same == (i != j), || format!("n={n} k={k} level {l} segment {j}: mem {i} same={same}"))?;
                checks += 1;
            }
        }
    }
    Ok(format!("50 chunks, {checks} exact row checks"))
}

fn pipeline_gradient() -> Outcome {
    let spec = VocabSpec {
        n_families: 3,
        tasks_per_family: 2,
        n_keys: 3,
        n_values: 3,
    };
    let ds = gen_icl_dataset(1, 2, 0, &spec).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        n_layers: 1,
        ..tiny(spec.vocab_size(), 8, 1, 16)
    };
    let model = Transformer::new(cfg, 0).map_err(|e| e.to_string())?;
    let sample = ds.train[0].clone();
    let rc = RetrievalConfig {
        top_c: 1,
        ..RetrievalConfig::default()
    };
    let weights: Vec<Tensor> = model.weights().iter().map(|w| w.clone().with_requires_grad(true)).collect();
    let total: usize = weights.iter().map(|w| w.numel()).sum();
    let report = finite_diff_check(
        move |g: &Graph, p: &[Var]| {
            let bm = model.bind_vars(g, p).expect("shapes match");
            Ok(pipeline_forward(&bm, &sample, 2, &rc).expect("pipeline runs").loss)
        },
        &weights,
        &FdOptions {
            max_coords: total,
            ..FdOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(report.checked == total, || format!("checked {} of {total}", report.checked))?;
    ensure(report.max_rel_error < 1e-4, || format!("max relative error {:e}", report.max_rel_error))?;
    Ok(format!("{total} coordinates, max relative error {:.2e}", report.max_rel_error))
}

fn forward_count() -> Outcome {
    let model = Transformer::new(tiny(32, 8, 1, 256), 3).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    for n in [4, 16, 64, 256] {
        let c = instrumented_forwards(&model, n, 4).map_err(|e| e.to_string())?;
        let l = ceil_div_levels(n, 4).len() - 1;
        let total = c.retrieval_total();
        ensure(total == 2 * l + 2, || format!("n={n}: {total} forwards ({c:?}), expected {}", 2 * l + 2))?;
        seen.push(format!("n={n}:{total}"));
    }
    Ok(seen.join(" "))
}

/// A database of 1 to 5 chunks with lengths 1..=40 and a shared k.
fn random_db(model: &Transformer, rng: &mut ChaCha8Rng) -> Result<HierDatabase, String> {
    let k = rng.random_range(2..=4);
    let fp = model.fingerprint().map_err(|e| e.to_string())?;
    let mut db = HierDatabase::new(k, model.config().d_model, fp);
    for _ in 0..rng.random_range(1..=5) {
        let n = rng.random_range(1..=40);
        let h = build_hierarchy(model, &random_tokens(rng, n, 32), k).map_err(|e| e.to_string())?;
        db.put_chunk(h).map_err(|e| e.to_string())?;
    }
    // Deleting keeps ids sparse, which the format must preserve.
    if db.len() > 2 && rng.random_bool(0.5) {
        let id = db.ids().next().expect("non-empty");
        db.delete_chunk(id).map_err(|e| e.to_string())?;
    }
    Ok(db)
}

fn max_width(db: &HierDatabase) -> usize {
    let depth = db.iter().map(|(_, h)| h.depth()).max().unwrap_or(0);
    (0..=depth)
        .map(|s| {
            db.iter()
                .map(|(_, h)| h.level_len(h.depth().saturating_sub(s)))
                .sum::<usize>()
        })
        .max()
        .unwrap_or(0)
}

fn sparse_dense() -> Outcome {
    let model = Transformer::new(tiny(32, 8, 2, 256), 4).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..20 {
        let db = random_db(&model, &mut rng)?;
        let g = Graph::new();
        let bm = model.bind_frozen(&g);
        let gdb = GraphDatabase::from_db(&g, &db);
        let context = random_tokens(&mut rng, 5, 32);
        let cfg = RetrievalConfig {
            top_c: max_width(&db),
            ..RetrievalConfig::default()
        };
        let state = encode_retrieval(&bm, &context, 1).map_err(|e| e.to_string())?.remove(0);
        let start = state.embedding;
        let sparse = sparse_retrieve(&bm, &gdb, state, &cfg).map_err(|e| e.to_string())?;
        let dense = dense_retrieve(&bm, &gdb, start).map_err(|e| e.to_string())?;
        let (a, b) = (g.value(sparse.embedding), g.value(dense));
        ensure(a.bit_eq(&b), || format!("database {i}: sparse and dense differ"))?;
    }
    Ok("20 databases bit-identical".into())
}

/// Selection by repeated scanning for the first maximum.
fn brute_top_c(xs: &[f64], c: usize) -> Vec<usize> {
    let mut taken = vec![false; xs.len()];
    for _ in 0..c.min(xs.len()) {
        let mut best: Option<usize> = None;
        for (i, &x) in xs.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| x > xs[b]) {
                best = Some(i);
            }
        }
        taken[best.expect("remaining entries")] = true;
    }
    (0..xs.len()).filter(|&i| taken[i]).collect()
}

fn top_c_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for t in 0..1000 {
        let len = rng.random_range(1..=40);
        // Few distinct values so ties are common.
        let levels = rng.random_range(1..=6);
        let xs: Vec<f64> = (0..len).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect();
        let c = rng.random_range(1..=45);
        let got = top_c_indices(&xs, c);
        let want = brute_top_c(&xs, c);
        ensure(got == want, || format!("vector {t}: {got:?} vs {want:?}"))?;
    }
    Ok("1000 vectors".into())
}

fn persistence() -> Outcome {
    let model = Transformer::new(tiny(32, 8, 1, 64), 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..20 {
        let db = random_db(&model, &mut rng)?;
        let (p1, p2) = (dir.path().join(format!("{i}a.hmdb")), dir.path().join(format!("{i}b.hmdb")));
        db.save(&p1).map_err(|e| e.to_string())?;
        HierDatabase::load(&p1).map_err(|e| e.to_string())?.save(&p2).map_err(|e| e.to_string())?;
        let (a, b) = (std::fs::read(&p1).map_err(|e| e.to_string())?, std::fs::read(&p2).map_err(|e| e.to_string())?);
        ensure(a == b, || format!("database {i}: files differ"))?;
    }
    Ok("20 databases byte-identical".into())
}

/// The desk-scale run used for the ICL criteria.
fn icl_run() -> Result<(hmem_core::eval::EvalReport, f64), String> {
    let spec = VocabSpec::default();
    let ds = gen_icl_dataset(7, ICL_TRAIN, 400, &spec).map_err(|e| e.to_string())?;
    let cfg = icl_config(&spec);
    let start = Instant::now();
    let out = train(&cfg, None, &ds.train, &ds.test, |_| {}).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    if let Some(d) = out.diverged {
        return Err(format!("training diverged at step {}", d.step));
    }
    let report = evaluate(
        &out.model,
        &ds.test,
        &EvalOptions {
            k: cfg.k,
            retrieval: cfg.retrieval.clone(),
            baselines: true,
            keep_samples: false,
        },
    )
    .map_err(|e| e.to_string())?;
    Ok((report, minutes))
}

const ICL_TRAIN: usize = 8000;

fn icl_config(spec: &VocabSpec) -> TrainConfig {
    TrainConfig {
        eval_samples: 0,
        ..TrainConfig::icl_recipe(spec.vocab_size())
    }
}

fn icl_bracketing(r: &hmem_core::eval::EvalReport, minutes: f64) -> Outcome {
    let chance = 1.0 / VocabSpec::default().n_values as f64;
    let zero = r.zero_shot_accuracy.ok_or("zero-shot baseline missing")?;
    let full = r.full_context_accuracy.ok_or("full-context baseline missing")?;
    let line = format!(
        "zero-shot {:.3} (chance {chance:.3}), full-context {:.3}, compressor-retriever {:.3}, {minutes:.1} min",
        zero, full, r.accuracy
    );
    ensure(minutes <= 30.0, || format!("{line}: training over 30 min"))?;
    ensure((zero - chance).abs() <= 0.05, || format!("{line}: zero-shot off chance"))?;
    ensure(full >= 0.95, || format!("{line}: full-context below 0.95"))?;
    ensure(r.accuracy > 0.6 * full, || format!("{line}: below 0.6x full-context"))?;
    Ok(line)
}

fn icl_match_rate(r: &hmem_core::eval::EvalReport) -> Outcome {
    let baseline = random_match_probability(6, 2, 2);
    let line = format!("match rate {:.3} vs random {baseline:.3}", r.match_rate);
    ensure(r.match_rate >= 0.5, || line.clone())?;
    Ok(line)
}

/// Compress three 8-token chunks with k=2 (three levels), retrieve, predict.
fn l3_gradients(model: &Transformer, checkpointing: bool) -> Result<(Vec<Vec<f64>>, usize), String> {
    let g = Graph::new();
    let mut bm = model.bind(&g);
    bm.set_checkpointing(checkpointing);
    let chunks: [Vec<u32>; 3] = [
        vec![6, 7, 8, 9, 10, 11, 12, 13],
        vec![14, 15, 16, 17, 18, 19, 20, 21],
        vec![22, 23, 24, 25, 26, 27, 28, 29],
    ];
    let hs = chunks
        .iter()
        .map(|c| build_hierarchy_vars(&bm, c, 2))
        .collect::<hmem_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    if hs[0].depth() != 3 {
        return Err(format!("expected L=3, got {}", hs[0].depth()));
    }
    let db = GraphDatabase::from_hierarchies(&g, 2, &hs).map_err(|e| e.to_string())?;
    let r = retrieve(&bm, &db, &[9, 10, 11], &RetrievalConfig::default()).map_err(|e| e.to_string())?;
    let (loss, _) = answer_forward(&bm, Some(r.prefix), &[9, 10, 11], &[12]).map_err(|e| e.to_string())?;
    let retained = g.retained_elements();
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let per = bm
        .params()
        .iter()
        .zip(model.weights())
        .map(|(&p, w)| grads.get_or_zeros(p, w.numel()))
        .collect();
    Ok((per, retained))
}

fn checkpointing() -> Outcome {
    let model = Transformer::new(tiny(32, 16, 2, 32), 6).map_err(|e| e.to_string())?;
    let (plain, plain_retained) = l3_gradients(&model, false)?;
    let (ckpt, ckpt_retained) = l3_gradients(&model, true)?;
    let identical = plain
        .iter()
        .zip(&ckpt)
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(identical, || "gradients differ".into())?;
    ensure(ckpt_retained < plain_retained, || {
        format!("retained {ckpt_retained} with checkpointing vs {plain_retained} without")
    })?;
    Ok(format!("bit-identical, retained {ckpt_retained} vs {plain_retained}"))
}

fn async_sessions() -> Outcome {
    let model = Arc::new(Transformer::new(tiny(32, 16, 2, 64), 7).map_err(|e| e.to_string())?);
    let fp = model.fingerprint().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut merges = 0;
    for s in 0..10 {
        let trigger = if s % 2 == 0 { TriggerMode::Always } else { TriggerMode::Token };
        let config = SessionConfig {
            window_size: 24,
            retrieval_slots: 2,
            k: 2,
            retrieval: RetrievalConfig::default(),
            trigger,
            max_new_tokens: rng.random_range(1..=5),
        };
        let turns: Vec<Turn> = (0..rng.random_range(3..=8))
            .map(|_| Turn {
                tokens: {
                    let len = rng.random_range(1..=12);
                    random_tokens(&mut rng, len, 32)
                },
                trigger_at: rng.random_bool(0.5).then(|| rng.random_range(0..config.max_new_tokens)),
            })
            .collect();
        let run = |sched: Option<Box<dyn hmem_core::session::Scheduler>>| {
            let db = HierDatabase::new(2, model.config().d_model, fp);
            let mut session = Session::new(Arc::clone(&model), db, config.clone(), sched)?;
            session.run(&turns)?;
            Ok::<_, hmem_core::Error>(session.transcript().to_vec())
        };
        let sync = run(None).map_err(|e| e.to_string())?;
        let asy = run(Some(Box::new(ImmediateScheduler::default()))).map_err(|e| e.to_string())?;
        ensure(sync == asy, || format!("session {s}: transcripts differ"))?;
        merges += sync
            .iter()
            .filter(|e| matches!(e, hmem_core::session::SessionEvent::PrefixMerged { .. }))
            .count();
    }
    ensure(merges > 0, || "no retrieval was merged in any session".into())?;
    Ok(format!("10 sessions identical, {merges} merged prefixes"))
}

fn main() {
    // `ACCEPTANCE_ONLY=1,5` runs a subset while iterating.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        if !selected(id) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    };
    report(1, "depth law", &depth_law);
    report(2, "segment locality", &segment_locality);
    report(3, "pipeline gradient", &pipeline_gradient);
    report(4, "forward count", &forward_count);
    report(5, "sparse/dense equivalence", &sparse_dense);
    report(6, "TopC oracle", &top_c_oracle);
    report(7, "persistence", &persistence);
    let icl = if selected(8) || selected(9) {
        icl_run()
    } else {
        Err("not run".into())
    };
    report(8, "ICL bracketing", &|| match &icl {
        Ok((r, minutes)) => icl_bracketing(r, *minutes),
        Err(e) => Err(e.clone()),
    });
    report(9, "match rate", &|| match &icl {
        Ok((r, _)) => icl_match_rate(r),
        Err(e) => Err(e.clone()),
    });
    report(10, "checkpointing", &checkpointing);
    report(11, "async sessions", &async_sessions);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
