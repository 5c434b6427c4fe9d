//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 2 9`.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gose_core::ablation::{ablate, run_arm, sweep_k, ArmSummary, Benchmark};
use gose_core::docmodel::{load_funsd, parse_funsd, to_funsd_json, Document, Entity, FunsdOptions};
use gose_core::geometry::BBox;
use gose_core::model::head::{loss, prefix_kv, project_relations, spatial_prefix, spls_layer, RelationFeatureMap};
use gose_core::model::{
    forward_graph, load_checkpoint, save_checkpoint, DocInputs, GoseParams, ModelConfig, ParamVars, Variant,
};
use gose_core::synthgen::{generate, GenConfig, Pattern};
use gose_core::tensor::{gradcheck, Graph, Tensor, Var};
use gose_core::training::{evaluate_params, train, TrainConfig, TrainOptions, CHECKPOINT_DIR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Training epochs per benchmark run.
const EPOCHS: usize = 20;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_doc(rng: &mut ChaCha8Rng, n: usize) -> Document {
    let entities = (0..n)
        .map(|id| {
            let x = rng.gen_range(0.0..0.8);
            let y = rng.gen_range(0.0..0.8);
            Entity {
                id,
                tokens: vec![format!("t{}", rng.gen_range(0..7)), format!("u{id}")],
                bbox: BBox::new(x, y, x + rng.gen_range(0.01..0.2), y + rng.gen_range(0.01..0.2)).unwrap(),
                kind: None,
            }
        })
        .collect();
    let links: BTreeSet<_> = (0..n)
        .map(|i| (i, rng.gen_range(0..n)))
        .filter(|(i, j)| i != j)
        .collect();
    Document::new("acc", 1.0, 1.0, entities, links).unwrap()
}

fn loud_params(cfg: &ModelConfig, seed: u64, scale: f64) -> GoseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GoseParams::from_tensors(GoseParams::shapes(cfg).iter().map(|s| rand_tensor(&mut rng, s, scale)).collect())
        .unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Softmax attention of one query over the listed keys, computed directly.
fn attend(q: &[f64], keys: &[&[f64]], vals: &[&[f64]], scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys.iter().map(|k| q.iter().zip(*k).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; vals[0].len()];
    for (ei, v) in e.iter().zip(vals) {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += ei / z * x;
        }
    }
    out
}

fn refs(m: &[Vec<f64>]) -> Vec<&[f64]> {
    m.iter().map(Vec::as_slice).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct SplsCase {
    g: Graph,
    rel: RelationFeatureMap,
    proj: gose_core::model::head::RelationProjections,
    prefix: gose_core::model::head::PrefixKv,
    d: usize,
}

fn spls_case(n: usize, s: usize, d: usize, seed: u64) -> SplsCase {
    let cfg = ModelConfig { d_h: d, window: s, global_tokens: 1, rounds: 1, vocab_size: 16, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = loud_params(&cfg, seed + 1, 1.0);
    let doc = random_doc(&mut rng, n);
    let inputs = DocInputs::new(&doc, &cfg).unwrap();
    let mut g = Graph::new();
    let p = params.register(&mut g);
    let r = g.constant(rand_tensor(&mut rng, &[n * n, d], 2.0));
    let rel = RelationFeatureMap { values: r, layout: inputs.layout.clone() };
    let proj = project_relations(&mut g, &p, &rel).unwrap();
    let sp = spatial_prefix(&mut g, &p, &inputs).unwrap();
    let prefix = prefix_kv(&mut g, &p, sp).unwrap();
    SplsCase { g, rel, proj, prefix, d }
}

fn c1_gradient() -> Outcome {
    let started = Instant::now();
    let cfg = ModelConfig { d_h: 12, window: 2, global_tokens: 2, rounds: 2, vocab_size: 16, ..ModelConfig::default() };
    let params = GoseParams::init(&cfg, 1).unwrap();
    let doc = random_doc(&mut ChaCha8Rng::seed_from_u64(2), 6);
    let inputs = DocInputs::new(&doc, &cfg).unwrap();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let report = gradcheck(
        |g: &mut Graph, vars: &[Var]| {
            let p = ParamVars::from_vars(vars)?;
            let (logits, _) = forward_graph(g, &p, &inputs, &cfg)?;
            loss(g, logits, &doc.links)
        },
        &tensors,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    check(
        report.max_rel_err < 1e-4 && report.coords_checked == params.num_scalars() && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {:.2e} over {} coordinates in {:.1} s",
            report.max_rel_err,
            report.coords_checked,
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_decomposition() -> Outcome {
    let scale_of = |d: usize| 1.0 / (d as f64).sqrt();
    let (mut windows, mut worst, mut lambda_ok) = (0, 0.0f64, true);
    let mut seed = 0u64;
    while windows < 100 {
        let n = 2 + (seed as usize % 6);
        let s = 2 + (seed as usize % 3);
        let mut c = spls_case(n, s, 12, seed);
        seed += 1;
        let out = spls_layer(&mut c.g, &c.rel, &c.proj, Some(&c.prefix)).map_err(|e| e.to_string())?;
        let layout = &c.rel.layout;
        let (q, k, v) = (rows(c.g.value(c.proj.q)), rows(c.g.value(c.proj.k)), rows(c.g.value(c.proj.v)));
        let (pk, pv) = (rows(c.g.value(c.prefix.keys)), rows(c.g.value(c.prefix.values)));
        let local = rows(c.g.value(out.local));
        lambda_ok &= out.lambda.data().iter().all(|l| (0.0..=1.0).contains(l));
        for w in 0..layout.n_windows() {
            let cells: Vec<usize> = (0..layout.cells_per_window()).filter_map(|p| layout.pair_index(w, p)).collect();
            if cells.is_empty() {
                continue;
            }
            let pick = |m: &[Vec<f64>]| cells.iter().map(|&i| m[i].clone()).collect::<Vec<_>>();
            let (kc, vc, ks, vs) = (pick(&k), pick(&v), pick(&pk), pick(&pv));
            for pos in 0..layout.cells_per_window() {
                let Some(cell) = layout.pair_index(w, pos) else { continue };
                let lambda = out.lambda.data()[w * layout.cells_per_window() + pos];
                let content = attend(&q[cell], &refs(&kc), &refs(&vc), scale_of(c.d));
                let prefix = attend(&q[cell], &refs(&ks), &refs(&vs), scale_of(c.d));
                let mixed: Vec<f64> = content.iter().zip(&prefix).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
                worst = worst.max(max_diff(&mixed, &local[cell]));
            }
            windows += 1;
        }
    }
    check(
        worst < 1e-10 && lambda_ok,
        format!("{windows} windows, max |mixed - hybrid| {worst:.2e}, lambda in [0,1]: {lambda_ok}"),
    )
}

fn c3_windowing() -> Outcome {
    let mut worst = 0.0f64;
    let mut reproducible = true;
    for (i, (n, s)) in [(1, 2), (2, 2), (3, 4), (4, 4), (2, 5), (5, 5)].into_iter().enumerate() {
        let mut c = spls_case(n, s, 12, 100 + i as u64);
        let out = spls_layer(&mut c.g, &c.rel, &c.proj, Some(&c.prefix)).map_err(|e| e.to_string())?;
        let again = spls_layer(&mut c.g, &c.rel, &c.proj, Some(&c.prefix)).map_err(|e| e.to_string())?;
        reproducible &= c.g.value(out.local) == c.g.value(again.local);
        let (q, k, v) = (rows(c.g.value(c.proj.q)), rows(c.g.value(c.proj.k)), rows(c.g.value(c.proj.v)));
        let (pk, pv) = (rows(c.g.value(c.prefix.keys)), rows(c.g.value(c.prefix.values)));
        let keys: Vec<&[f64]> = pk.iter().chain(&k).map(Vec::as_slice).collect();
        let vals: Vec<&[f64]> = pv.iter().chain(&v).map(Vec::as_slice).collect();
        let local = rows(c.g.value(out.local));
        for cell in 0..n * n {
            let want = attend(&q[cell], &keys, &vals, 1.0 / (c.d as f64).sqrt());
            worst = worst.max(max_diff(&want, &local[cell]));
        }
    }
    check(
        worst < 1e-12 && reproducible,
        format!("max deviation from full-grid attention {worst:.2e}, repeat bit-identical: {reproducible}"),
    )
}

fn spls_seconds(n: usize) -> f64 {
    let mut c = spls_case(n, 4, 12, n as u64);
    (0..5)
        .map(|_| {
            let t = Instant::now();
            spls_layer(&mut c.g, &c.rel, &c.proj, Some(&c.prefix)).unwrap();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn c4_complexity() -> Outcome {
    let (s, m) = (4usize, 3usize);
    let mut counts_ok = true;
    let mut lines = Vec::new();
    for n in [8usize, 16, 32] {
        let cfg = ModelConfig { d_h: 12, window: s, global_tokens: m, vocab_size: 16, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let params = loud_params(&cfg, 1, 0.1);
        let inputs = DocInputs::new(&random_doc(&mut rng, n), &cfg).unwrap();
        let mut g = Graph::new();
        let p = params.register(&mut g);
        let r = g.constant(rand_tensor(&mut rng, &[n * n, 12], 1.0));
        let rel = RelationFeatureMap { values: r, layout: inputs.layout.clone() };
        let proj = project_relations(&mut g, &p, &rel).unwrap();
        let sp = spatial_prefix(&mut g, &p, &inputs).unwrap();
        let pkv = prefix_kv(&mut g, &p, sp).unwrap();
        let before = g.score_evals();
        spls_layer(&mut g, &rel, &proj, Some(&pkv)).unwrap();
        gose_core::model::head::global_interaction(&mut g, &p, &proj).unwrap();
        let counted = g.score_evals() - before;
        let padded = n.div_ceil(s) * s;
        let expected = ((padded / s).pow(2) * s * s * 2 * s * s + 2 * m * n * n) as u64;
        counts_ok &= counted == expected;
        lines.push(format!("N={n}: {counted}/{expected}"));
    }
    let ns = [32usize, 64, 128];
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = ns.iter().map(|&n| spls_seconds(n).ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    check(
        counts_ok && (slope - 2.0).abs() <= 0.4,
        format!("counter {}; wall-time log-log slope {slope:.2}", lines.join(", ")),
    )
}

fn bench(pattern: Pattern) -> Benchmark {
    Benchmark { gen: GenConfig { pattern, ..GenConfig::default() }, n_train: 100, n_test: 20 }
}

fn train_cfg() -> TrainConfig {
    TrainConfig { epochs: EPOCHS, ..TrainConfig::default() }
}

fn summary(a: &ArmSummary) -> String {
    let far = a.mean_far_recall.map_or("n/a".into(), |r| format!("{r:.4}"));
    format!("{}: f1 {:.4} crossing {:.4} far-recall {far}", a.label, a.mean_f1, a.mean_crossing_rate)
}

/// Training runs shared between criteria.
#[derive(Default)]
struct Runs {
    mixed: Option<Vec<ArmSummary>>,
}

impl Runs {
    fn mixed(&mut self) -> Result<&[ArmSummary], String> {
        if self.mixed.is_none() {
            let arms = ablate(&ModelConfig::default(), &train_cfg(), &bench(Pattern::Mixed), &SEEDS)
                .map_err(|e| e.to_string())?;
            self.mixed = Some(arms);
        }
        Ok(self.mixed.as_deref().unwrap())
    }
}

fn arm(pattern: Pattern, v: Variant) -> Result<ArmSummary, String> {
    run_arm(v.name(), &v.apply(&ModelConfig::default()), &train_cfg(), &bench(pattern), &SEEDS)
        .map_err(|e| e.to_string())
}

fn c5_conflicts() -> Outcome {
    let started = Instant::now();
    let full = arm(Pattern::Crossing, Variant::Full)?;
    let ablated = arm(Pattern::Crossing, Variant::NoGskm)?;
    let elapsed = started.elapsed();
    check(
        full.mean_f1 > ablated.mean_f1
            && full.mean_crossing_rate < ablated.mean_crossing_rate
            && elapsed < Duration::from_secs(30 * 60),
        format!("{}; {}; {:.0} s", summary(&full), summary(&ablated), elapsed.as_secs_f64()),
    )
}

fn c6_long_range() -> Outcome {
    let full = arm(Pattern::Column, Variant::Full)?;
    let ablated = arm(Pattern::Column, Variant::NoGskm)?;
    let margin = match (full.mean_far_recall, ablated.mean_far_recall) {
        (Some(a), Some(b)) => a - b,
        _ => return Err(format!("far bucket empty: {}; {}", summary(&full), summary(&ablated))),
    };
    check(margin > 0.0, format!("margin {margin:.4}; {}; {}", summary(&full), summary(&ablated)))
}

fn c7_ablation(runs: &mut Runs) -> Outcome {
    let arms = runs.mixed()?;
    let f1 = |v: Variant| arms.iter().find(|a| a.label == v.name()).map(|a| a.mean_f1).unwrap();
    let (full, noprefix, nogskm, noiter) =
        (f1(Variant::Full), f1(Variant::NoSpatialPrefix), f1(Variant::NoGskm), f1(Variant::NoIteration));
    let noiter_trace: Vec<String> = arms
        .iter()
        .find(|a| a.label == Variant::NoIteration.name())
        .unwrap()
        .runs
        .iter()
        .map(|r| format!("seed {} f1 {:.3} loss {:.3}", r.seed, r.test.f1, r.final_loss))
        .collect();
    check(
        full >= noprefix && noprefix >= nogskm && full > noiter,
        format!(
            "{}; w/o iteration runs [{}]",
            arms.iter().map(summary).collect::<Vec<_>>().join("; "),
            noiter_trace.join(", ")
        ),
    )
}

fn c8_sweep(runs: &mut Runs) -> Outcome {
    let k3 = runs.mixed()?.iter().find(|a| a.label == Variant::Full.name()).unwrap().clone();
    let others = sweep_k(&ModelConfig::default(), &[1, 2, 4, 5], &train_cfg(), &bench(Pattern::Mixed), &SEEDS)
        .map_err(|e| e.to_string())?;
    let mut curve: Vec<(usize, f64)> = others.iter().map(|a| (a.model.rounds, a.mean_f1)).collect();
    curve.push((k3.model.rounds, k3.mean_f1));
    curve.sort_by_key(|c| c.0);
    let at = |k: usize| curve.iter().find(|c| c.0 == k).unwrap().1;
    check(
        k3.model.rounds == 3 && at(3) >= at(1),
        format!(
            "f1 by K: {}",
            curve.iter().map(|(k, f)| format!("K={k} {f:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn c9_determinism() -> Outcome {
    let gen = GenConfig { n_docs: 6, ..GenConfig::default() };
    let docs = generate(&gen).map_err(|e| e.to_string())?;
    let (tr, te) = docs.split_at(4);
    let model = ModelConfig { d_h: 24, ..ModelConfig::default() };
    let tc = TrainConfig { epochs: 3, seed: 9, ..TrainConfig::default() };
    let mut outputs = Vec::new();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let (params, _) = train(tr, &model, &tc, TrainOptions { eval_set: Some(te), out_dir: Some(&dir) })
            .map_err(|e| e.to_string())?;
        let metrics = serde_json::to_string(&evaluate_params(te, &params, &model).map_err(|e| e.to_string())?).unwrap();
        outputs.push((dir_bytes(&dir.join(CHECKPOINT_DIR)), metrics, dir));
    }
    let same_ckpt = outputs[0].0 == outputs[1].0;
    let same_metrics = outputs[0].1 == outputs[1].1;

    let ckpt = outputs[0].2.join(CHECKPOINT_DIR);
    let (params, cfg) = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let resaved = tmp.path().join("resaved");
    save_checkpoint(&resaved, &params, &cfg).map_err(|e| e.to_string())?;
    let roundtrip = dir_bytes(&resaved) == outputs[0].0;

    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/funsd_form.json");
    let first = load_funsd(&fixture, FunsdOptions::default()).map_err(|e| e.to_string())?.document;
    let text = to_funsd_json(&first).map_err(|e| e.to_string())?;
    let opts = FunsdOptions { page_size: Some((first.page_w, first.page_h)) };
    let second = parse_funsd(&text, &first.doc_id, opts).map_err(|e| e.to_string())?.document;
    let funsd = first.len() == 10
        && first.links.len() == 5
        && second.links == first.links
        && to_funsd_json(&second).map_err(|e| e.to_string())? == text;
    check(
        same_ckpt && same_metrics && roundtrip && funsd,
        format!(
            "identical checkpoints {same_ckpt}, identical metrics JSON {same_metrics}, \
             checkpoint round-trip {roundtrip}, FUNSD fixture round-trip {funsd}"
        ),
    )
}

fn c10_capacity() -> Outcome {
    let docs = generate(&GenConfig { n_docs: 2, ..GenConfig::default() }).map_err(|e| e.to_string())?;
    let tc = TrainConfig { epochs: 300, eval_every: 10, ..TrainConfig::default() };
    let (_, record) =
        train(&docs, &ModelConfig::default(), &tc, TrainOptions { eval_set: Some(&docs), out_dir: None })
            .map_err(|e| e.to_string())?;
    let first = record.epochs.iter().find(|e| e.eval.as_ref().is_some_and(|m| m.f1 == 1.0)).map(|e| e.epoch);
    let last = record.epochs.last().and_then(|e| e.eval.as_ref()).map_or(0.0, |m| m.f1);
    check(
        first.is_some(),
        format!("training f1 first 1.0 at epoch {first:?}; final training f1 {last:.4}"),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut runs = Runs::default();
    let names = [
        "gradient correctness",
        "decomposition identity",
        "windowing equivalence",
        "complexity",
        "conflicted-links direction",
        "long-range direction",
        "ablation ordering",
        "iteration sweep",
        "determinism and serialization",
        "capacity sanity",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match id {
            1 => c1_gradient(),
            2 => c2_decomposition(),
            3 => c3_windowing(),
            4 => c4_complexity(),
            5 => c5_conflicts(),
            6 => c6_long_range(),
            7 => c7_ablation(&mut runs),
            8 => c8_sweep(&mut runs),
            9 => c9_determinism(),
            _ => c10_capacity(),
        }))
        .unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
