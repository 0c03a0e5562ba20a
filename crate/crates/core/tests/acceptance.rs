//! Acceptance gate: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the terminal. Set
//! `DAM_ACCEPTANCE_ONLY=1,2,8` to run a subset.

use std::collections::BTreeMap;
use std::time::Instant;

use dam::adapters::{fusion_forward, FusionStack, TASK_ADAPTER_GROUP};
use dam::cli::{base_model, generate_data, params, prepare_data, Layout, PreparedData};
use dam::compute::{finite_diff_grad, Graph, ParamStore, RngSeed, Var};
use dam::config::ExperimentConfig;
use dam::data::SyntheticSpec;
use dam::encoder::ENCODER_GROUP;
use dam::eval::{balanced_accuracy, evaluate_run, majority_rate, mean_std, RunMetrics};
use dam::inlp::{inlp_fit, linear_probe_accuracy, InlpConfig};
use dam::objectives::{debias_head_group, debias_loss, fused_loss, task_loss, ClassifierHead, DebiasConfig};
use dam::persistence::{load_bundle, save_bundle, Component};
use dam::training::{prepare_stage, train_stage, DamModel, Recipe, Route, TrainPlan};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn bits(m: &DamModel, group: &str) -> Vec<u32> {
    m.store
        .group(group)
        .unwrap()
        .tensors
        .iter()
        .flat_map(|t| t.value.iter().map(|v| v.to_bits()))
        .collect()
}

// ---------------------------------------------------------------------------

/// Loss downstream of the reversal: a tanh layer, a linear layer and
/// cross-entropy, all in f64.
fn grl_case(x: &Array2<f64>, w1: &Array2<f64>, w2: &Array2<f64>, labels: &[usize], gamma: Option<f64>) -> (f64, Array2<f64>) {
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone());
    let h: Var = match gamma {
        Some(gm) => g.grad_reverse(xv, gm).unwrap(),
        None => xv,
    };
    let (a, b) = (g.input(w1.clone()), g.input(w2.clone()));
    let t = g.matmul(h, a).unwrap();
    let t = g.tanh(t);
    let logits = g.matmul(t, b).unwrap();
    let loss = g.cross_entropy(logits, labels).unwrap();
    g.backward(loss).unwrap();
    (g.scalar(loss), g.grad(xv).unwrap().clone())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = RngSeed(101).rng();
    let mut worst_exact = 0.0f64;
    let mut worst_fd = 0.0f64;
    for _ in 0..100 {
        let (n, d, k) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(2..4));
        let x = randn(n, d, &mut rng);
        let w1 = randn(d, 4, &mut rng);
        let w2 = randn(4, k, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let gamma = rng.random_range(0.0..3.0);
        let (_, plain) = grl_case(&x, &w1, &w2, &labels, None);
        let (_, reversed) = grl_case(&x, &w1, &w2, &labels, Some(gamma));
        let expected = &plain * -gamma;
        worst_exact = worst_exact.max((&reversed - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let fd = finite_diff_grad(|p| grl_case(p, &w1, &w2, &labels, None).0, &x, 1e-4).unwrap() * -gamma;
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale > 0.0 {
            let err = (&reversed - &fd).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
            worst_fd = worst_fd.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_exact == 0.0 && worst_fd <= 1e-5 && secs < 10.0,
        format!(
            "100 cases: max |grad - (-gamma * plain grad)| = {worst_exact:.1e}, max relative error vs finite differences {worst_fd:.1e} (tol 1e-5), {secs:.2}s (< 10s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = RngSeed(202).rng();
    let mut worst_sum = 0.0f64;
    let mut in_range = true;
    for c in 0..20 {
        let hidden = rng.random_range(1..33);
        let adapters = rng.random_range(1..6);
        let rows = rng.random_range(1..40);
        let scale = [0.01f32, 1.0, 10.0, 50.0][c % 4];
        let mut store = ParamStore::new();
        let stack = FusionStack::new(&mut store, hidden, 1, RngSeed(c as u64)).unwrap();
        let f = &stack.layers[0];
        for id in [f.query, f.key, f.value] {
            *store.get_mut(id) = randn(hidden, hidden, &mut rng).mapv(|v| v as f32 * scale);
        }
        let u = randn(rows, hidden, &mut rng).mapv(|v| v as f32 * scale);
        let outs: Vec<Array2<f32>> = (0..adapters)
            .map(|_| randn(rows, hidden, &mut rng).mapv(|v| v as f32 * scale))
            .collect();
        let (_, w) = fusion_forward(&store, f, &u, &outs).unwrap();
        for row in w.rows() {
            in_range &= row.iter().all(|&v| (0.0..=1.0).contains(&v));
            worst_sum = worst_sum.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    outcome(
        in_range && worst_sum <= 1e-6,
        format!("20 configurations: weights in [0,1] = {in_range}, max |sum - 1| = {worst_sum:.1e} (tol 1e-6)"),
    )
}

// ---------------------------------------------------------------------------
// desk-scale experiments

struct Desk {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    data: PreparedData,
    base: DamModel,
}

fn desk(spec: SyntheticSpec) -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.data.synthetic = spec;
    let layout = Layout {
        root: dir.path().to_path_buf(),
    };
    generate_data(&cfg, &layout, false).unwrap();
    let data = prepare_data(&cfg, &layout, true).unwrap();
    let base = base_model(&cfg, &layout, &data).unwrap();
    Desk {
        _dir: dir,
        cfg,
        data,
        base,
    }
}

/// Trains the remaining DAM stages for `attributes` on top of a stage-1
/// model.
fn finish_dam(d: &Desk, stage1: &DamModel, attributes: &[String], seed: u64) -> DamModel {
    let mut m = stage1.clone();
    let plans = d.cfg.training.plans(Recipe::Dam, &d.data.schema, attributes, seed).unwrap();
    for p in &plans[1..] {
        run_plan(d, &mut m, p);
    }
    m
}

fn run_plan(d: &Desk, m: &mut DamModel, p: &TrainPlan) {
    prepare_stage(m, p).unwrap();
    train_stage(m, p, &d.data.encoded.train, &d.data.encoded.val).unwrap();
}

fn stage1(d: &Desk, seed: u64) -> DamModel {
    let mut m = d.base.clone();
    run_plan(d, &mut m, &d.cfg.training.task_adapter_plan(seed));
    m
}

fn eval(d: &Desk, m: &DamModel, route: Route, attack: &[String], seed: u64) -> RunMetrics {
    evaluate_run(m, &route, &d.data.encoded, attack, &d.cfg.attackers, seed).unwrap()
}

fn bacc(r: &RunMetrics, a: &str) -> f64 {
    r.attackers[a].balanced_accuracy
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

struct SingleAttribute {
    c3: Outcome,
    c4: Outcome,
    c5: Outcome,
}

fn criteria_3_4_5() -> SingleAttribute {
    let start = Instant::now();
    let d = desk(SyntheticSpec::default());
    let attack = vec!["gender".to_string()];
    let enc0 = bits(&d.base, ENCODER_GROUP);
    let (mut adp_b, mut dam_b, mut dtask) = (Vec::new(), Vec::new(), Vec::new());
    let mut c3 = None;
    let mut frozen_ok = true;
    let mut frozen_notes = Vec::new();
    // Time spent on the criterion 3 and 4 extras, excluded from the
    // criterion 5 budget.
    let mut extra = 0.0;
    for seed in 0..3u64 {
        let adp = stage1(&d, seed);
        frozen_ok &= bits(&adp, ENCODER_GROUP) == enc0;
        let task0 = bits(&adp, TASK_ADAPTER_GROUP);
        let dam = finish_dam(&d, &adp, &attack, seed);
        frozen_ok &= bits(&dam, ENCODER_GROUP) == enc0 && bits(&dam, TASK_ADAPTER_GROUP) == task0;
        if seed == 0 {
            let t = Instant::now();
            let toks = &d.data.encoded.test.tokens;
            let a = adp.task_logits(toks, &Route::TaskAdapter).unwrap();
            let b = dam.task_logits(toks, &Route::TaskAdapter).unwrap();
            let za = adp.embed(toks, &Route::TaskAdapter).unwrap();
            let zb = dam.embed(toks, &Route::TaskAdapter).unwrap();
            let zf = dam.embed(toks, &Route::Fused).unwrap();
            let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
                && za.iter().zip(zb.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            let differs = za.iter().zip(zf.iter()).filter(|(x, y)| x != y).count();
            let t4 = Instant::now();
            let secs = t.elapsed().as_secs_f64();
            c3 = Some(outcome(
                same && differs > 0 && secs < 60.0,
                format!(
                    "{} test examples: task_only logits and z bitwise equal to stage-1 Adp = {same}; fused z differs in {differs} entries; {secs:.1}s (< 60s)",
                    toks.len()
                ),
            ));

            // Remaining adapter recipes keep the encoder frozen too.
            for recipe in [Recipe::AdpDebias] {
                let mut m = d.base.clone();
                for p in d.cfg.training.plans(recipe, &d.data.schema, &attack, seed).unwrap() {
                    prepare_stage(&mut m, &p).unwrap();
                    train_stage(&mut m, &p, &d.data.encoded.train, &d.data.encoded.val).unwrap();
                }
                let ok = bits(&m, ENCODER_GROUP) == enc0;
                frozen_ok &= ok;
                frozen_notes.push(format!("{recipe} encoder unchanged = {ok}"));
            }
            extra += secs + t4.elapsed().as_secs_f64();
        }
        let ra = eval(&d, &adp, Route::TaskAdapter, &attack, seed);
        let rd = eval(&d, &dam, Route::Fused, &attack, seed);
        adp_b.push(bacc(&ra, "gender"));
        dam_b.push(bacc(&rd, "gender"));
        dtask.push((rd.task_accuracy - ra.task_accuracy) * 100.0);
    }
    let secs = start.elapsed().as_secs_f64() - extra;
    let (ma, md) = (mean_std(&adp_b).mean, mean_std(&dam_b).mean);
    let mt = mean_std(&dtask).mean;
    let c5 = outcome(
        ma >= 0.80 && md <= 0.65 && mt.abs() <= 2.0 && secs <= 900.0,
        format!(
            "gender BAcc Adp {} (mean {ma:.3} >= 0.80), DAM fused {} (mean {md:.3} <= 0.65), task acc DAM - Adp {} pts (mean {mt:+.2}, |.| <= 2), {secs:.0}s (<= 900s)",
            fmt(&adp_b),
            fmt(&dam_b),
            dtask.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>().join("/"),
        ),
    );
    frozen_notes.insert(0, "Adp/DAM encoder and stage-1 adapter unchanged over 3 seeds".into());
    SingleAttribute {
        c3: c3.unwrap(),
        c4: outcome(frozen_ok, format!("{}: {frozen_ok}", frozen_notes.join("; "))),
        c5,
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let d = desk(SyntheticSpec::two_attribute());
    let attrs = ["gender", "age"];
    let attack: Vec<String> = attrs.iter().map(|s| s.to_string()).collect();
    // (variant, attribute) -> per-seed balanced accuracy.
    let mut res: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let s1 = stage1(&d, seed);
        let r = eval(&d, &s1, Route::TaskAdapter, &attack, seed);
        for a in attrs {
            res.entry(("Adp", a)).or_default().push(bacc(&r, a));
        }
        let debias = |a: &str| {
            let mut m = s1.clone();
            let p = d.cfg.training.debias_adapter_plan(&d.data.schema, a, seed).unwrap();
            run_plan(&d, &mut m, &p);
            m
        };
        let (gender, age) = (debias("gender"), debias("age"));
        // Debiasing adapters train independently of each other, so plugging
        // the age adapter and its adversary into the gender model is the
        // same as training both in sequence.
        let shared = tempfile::tempdir().unwrap();
        let parts = [
            Component::DebiasAdapter {
                attribute: "age".into(),
            },
            Component::Head {
                group: debias_head_group("age"),
            },
        ];
        save_bundle(&age, &parts, shared.path(), "acceptance", d.cfg.encoder_seed).unwrap();
        let mut both = gender.clone();
        load_bundle(&mut both, shared.path()).unwrap();
        for (variant, mut m, set) in [("G", gender, vec!["gender"]), ("A", age, vec!["age"]), ("G+A", both, vec!["gender", "age"])] {
            let set: Vec<String> = set.into_iter().map(String::from).collect();
            let p = d.cfg.training.fusion_plan(&d.data.schema, &set, seed).unwrap();
            run_plan(&d, &mut m, &p);
            let r = eval(&d, &m, Route::Fused, &attack, seed);
            for a in attrs {
                res.entry((variant, a)).or_default().push(bacc(&r, a));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |v: &str, a: &str| mean_std(&res[&(v, a)]).mean;
    let mut pass = secs <= 1500.0;
    let mut parts = Vec::new();
    for (a, single) in [("gender", "G"), ("age", "A")] {
        let (adp, s, m) = (mean("Adp", a), mean(single, a), mean("G+A", a));
        let ok = (m - s).abs() <= 0.03 && adp - s >= 0.10 && adp - m >= 0.10;
        pass &= ok;
        parts.push(format!(
            "{a}: Adp {} DAM_{single} {} DAM_G+A {} (means {adp:.3}/{s:.3}/{m:.3}; |G+A - single| {:.3} <= 0.03, drops {:.3}/{:.3} >= 0.10)",
            fmt(&res[&("Adp", a)]),
            fmt(&res[&(single, a)]),
            fmt(&res[&("G+A", a)]),
            (m - s).abs(),
            adp - s,
            adp - m
        ));
    }
    parts.push(format!("{secs:.0}s (<= 1500s)"));
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let mut rng = RngSeed(707).rng();
    let planted = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let z = randn(n, 8, rng).mapv(|v| v as f32);
        let y: Vec<usize> = z.rows().into_iter().map(|r| usize::from(r[0] - 0.5 * r[3] > 0.0)).collect();
        (z, y)
    };
    let (z, y) = planted(600, &mut rng);
    let (zt, yt) = planted(600, &mut rng);
    let cfg = InlpConfig::default();
    let p = inlp_fit(&z, &y, 2, &cfg).unwrap();
    let sym = (&p.p - &p.p.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let idem = (p.p.dot(&p.p) - &p.p).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let before = linear_probe_accuracy((&z, &y), (&zt, &yt), 2, &cfg).unwrap();
    let acc = linear_probe_accuracy((&p.apply(&z), &y), (&p.apply(&zt), &yt), 2, &cfg).unwrap();
    let majority = majority_rate(&yt);
    outcome(
        sym <= 1e-5 && idem <= 1e-5 && acc <= majority + 0.05,
        format!(
            "|P - P^T| {sym:.1e}, |PP - P| {idem:.1e} (tol 1e-5); probe accuracy {before:.3} before, {acc:.3} after <= majority {majority:.3} + 0.05"
        ),
    )
}

fn criterion_8() -> Outcome {
    let perfect = balanced_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
    let majority = balanced_accuracy(&[0; 100], &labels, 2).unwrap();
    // Class 0 recall 8/10, class 1 recall 5/10.
    let l: Vec<usize> = [vec![0; 10], vec![1; 10]].concat();
    let p: Vec<usize> = [vec![0; 8], vec![1; 2], vec![1; 5], vec![0; 5]].concat();
    let hand = balanced_accuracy(&p, &l, 2).unwrap();
    let ok = (perfect - 1.0).abs() <= 1e-12 && (majority - 0.5).abs() <= 1e-12 && (hand - 0.65).abs() <= 1e-12;
    outcome(ok, format!("perfect {perfect}, majority on 90/10 {majority}, hand case {hand} (want 1, 0.5, 0.65 to 1e-12)"))
}

/// Parameter counts written out from the layer shapes.
fn enumerate(cfg: &ExperimentConfig) -> BTreeMap<Recipe, usize> {
    let e = &cfg.encoder;
    let (h, f, l) = (e.hidden_dim, e.ffn_dim, e.num_layers);
    let encoder = e.vocab_size * h + e.max_seq_len * h + 2 * h + l * (4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h);
    let b = h / cfg.adapter.reduction_factor;
    let adapter = l * (h * b + b + b * h + h);
    let fusion = l * 3 * h * h;
    let head = |c: usize| h * h + h + h * c + c;
    let syn = &cfg.data.synthetic;
    let task = head(syn.num_task_classes);
    let debias_heads: usize = syn
        .attributes
        .iter()
        .filter(|a| cfg.recipe.attributes.contains(&a.id))
        .map(|a| head(a.num_classes))
        .sum();
    let k = cfg.recipe.attributes.len();
    BTreeMap::from([
        (Recipe::Ft, encoder + task),
        (Recipe::FtDebias, encoder + task + debias_heads),
        (Recipe::Adp, adapter + task),
        (Recipe::AdpDebias, adapter + task + debias_heads),
        (Recipe::Dam, adapter + task + k * adapter + debias_heads + fusion + task),
    ])
}

fn criterion_9() -> Outcome {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let rows = params(
        &cfg,
        &Layout {
            root: dir.path().to_path_buf(),
        },
    )
    .unwrap();
    let counted: BTreeMap<Recipe, usize> = rows.iter().map(|r| (r.recipe, r.trainable)).collect();
    let oracle = enumerate(&cfg);
    let n = |r: Recipe| counted[&r];
    let order = n(Recipe::Adp) < n(Recipe::AdpDebias) && n(Recipe::AdpDebias) < n(Recipe::Dam) && n(Recipe::Dam) < n(Recipe::Ft);
    let ft_debias_above_ft = n(Recipe::FtDebias) > n(Recipe::Ft);
    outcome(
        counted == oracle && order && ft_debias_above_ft,
        format!(
            "{}; equal to enumeration = {}; Adp < Adp-Debias < DAM < FT = {order}; FT-Debias > FT = {ft_debias_above_ft}",
            Recipe::ALL.iter().map(|r| format!("{r} {}", n(*r))).collect::<Vec<_>>().join(", "),
            counted == oracle
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = RngSeed(1010).rng();
    let mut worst_value = 0.0f64;
    let mut worst_grad = 0.0f64;
    for case in 0..100u64 {
        let hidden = rng.random_range(2..10);
        let rows = rng.random_range(1..12);
        let n_attr = rng.random_range(0..4);
        let gamma = rng.random_range(0.0..3.0);
        let mut store = ParamStore::new();
        let th = ClassifierHead::new(&mut store, "head.task", hidden, 3, RngSeed(case)).unwrap();
        let heads: Vec<(DebiasConfig, ClassifierHead)> = (0..n_attr)
            .map(|a| {
                let cfg = DebiasConfig {
                    attribute_id: format!("a{a}"),
                    gamma,
                    num_classes: 2 + a,
                };
                let h = ClassifierHead::new(&mut store, &format!("head.debias.a{a}"), hidden, 2 + a, RngSeed(case * 7 + a as u64)).unwrap();
                (cfg, h)
            })
            .collect();
        let z = randn(rows, hidden, &mut rng).mapv(|v| v as f32);
        let yt: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let ya: Vec<Vec<usize>> = (0..n_attr).map(|a| (0..rows).map(|_| rng.random_range(0..2 + a)).collect()).collect();

        let mut sum_value = 0.0f64;
        let mut sum_grad = Array2::<f64>::zeros((rows, hidden));
        for term in 0..=n_attr {
            let mut g = Graph::<f32>::new();
            let zv = g.leaf(z.clone());
            let l = match term {
                0 => task_loss(&mut g, &store, &th, zv, &yt).unwrap(),
                t => debias_loss(&mut g, &store, &heads[t - 1].0, &heads[t - 1].1, zv, &ya[t - 1]).unwrap(),
            };
            g.backward(l).unwrap();
            sum_value += g.scalar(l) as f64;
            sum_grad = sum_grad + g.grad(zv).unwrap().mapv(|v| v as f64);
        }
        let mut g = Graph::<f32>::new();
        let zv = g.leaf(z.clone());
        let t = task_loss(&mut g, &store, &th, zv, &yt).unwrap();
        let ds: Vec<Var> = heads
            .iter()
            .zip(&ya)
            .map(|((c, h), y)| debias_loss(&mut g, &store, c, h, zv, y).unwrap())
            .collect();
        let (total, _) = fused_loss(&mut g, t, &ds).unwrap();
        g.backward(total).unwrap();
        worst_value = worst_value.max((g.scalar(total) as f64 - sum_value).abs() / sum_value.abs().max(1.0));
        let fused = g.grad(zv).unwrap().mapv(|v| v as f64);
        let scale = sum_grad.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst_grad = worst_grad.max((&fused - &sum_grad).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale);
    }
    outcome(
        worst_value <= 1e-6 && worst_grad <= 1e-6,
        format!("100 cases: max relative value error {worst_value:.1e}, gradient error {worst_grad:.1e} (tol 1e-6)"),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("DAM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |i: u32| only.as_ref().is_none_or(|o| o.contains(&i));
    let names: BTreeMap<u32, &str> = BTreeMap::from([
        (1, "GRL correctness"),
        (2, "fusion simplex"),
        (3, "plug-out exactness"),
        (4, "freeze discipline"),
        (5, "single-attribute leakage drop"),
        (6, "multi-attribute no-forgetting"),
        (7, "INLP sanity"),
        (8, "balanced accuracy suite"),
        (9, "parameter accounting"),
        (10, "fused loss additivity"),
    ]);
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |i: u32, o: Outcome| {
        println!("{} criterion {i:>2} ({}): {}", if o.pass { "PASS" } else { "FAIL" }, names[&i], o.detail);
        results.push((i, o));
    };
    for (i, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (7, criterion_7), (8, criterion_8), (9, criterion_9), (10, criterion_10)] {
        if want(i) {
            report(i, f());
        }
    }
    if want(3) || want(4) || want(5) {
        let s = criteria_3_4_5();
        for (i, o) in [(3, s.c3), (4, s.c4), (5, s.c5)] {
            if want(i) {
                report(i, o);
            }
        }
    }
    if want(6) {
        report(6, criterion_6());
    }
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
