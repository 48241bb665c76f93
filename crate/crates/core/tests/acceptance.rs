//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use psmm::cli::{dispatch, run_ablation, AblationPlan, RunRecord, RUN_RECORD};
use psmm::datasyn::{synth_dataset, synth_manifest, SynthConfig};
use psmm::diffcore::{Graph, NodeId, ParamStore, Sampling, Tensor};
use psmm::dynimg::{prefix_mean, rank_pool_fit, rank_pool_oracle, RankPoolConfig};
use psmm::metrics::{aggregate, rates_at, roc, tpr_at_fpr, Label, Rates, ScoredSet};
use psmm::netgraph::{BackboneSpec, BranchMode, FusionVariant, InitConfig, NetConfig, Network, SampleInput};
use psmm::protocols::{build_split, validate_split, Counts, SplitOptions, Subset};
use psmm::trainer::{train, Dataset, Model, SlotMap, TrainConfig, TrainOutput};
use psmm::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(started: Instant, limit: Duration, detail: String) -> Outcome {
    let took = started.elapsed();
    ensure!(took <= limit, "{detail}; took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs());
    Ok(format!("{detail}; {:.1}s", took.as_secs_f64()))
}

fn random_frames(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Tensor> {
    (0..k)
        .map(|_| Tensor::vector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

fn fit(frames: &[Tensor]) -> Result<psmm::dynimg::DynamicImage, String> {
    let v = prefix_mean(frames).map_err(|e| e.to_string())?;
    rank_pool_fit(&v, &RankPoolConfig::new(frames.len()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let instances = 60;
    for i in 0..instances {
        let k = [3, 5, 7][i % 3];
        let dim = 1 + (i / 3) % 2;
        let v = prefix_mean(&random_frames(&mut rng, k, dim)).map_err(|e| e.to_string())?;
        let d = rank_pool_fit(&v, &RankPoolConfig::new(k).unwrap()).map_err(|e| e.to_string())?.d;
        let oracle = rank_pool_oracle(&v).map_err(|e| e.to_string())?.d;
        worst = worst.max(max_diff(&d, &oracle));
    }
    ensure!(worst <= 1e-3, "max solver/oracle deviation {worst:.2e}");
    let hand: Vec<Tensor> = [0.0, 0.5, 1.0].iter().map(|&x| Tensor::vector(vec![x])).collect();
    let d = rank_pool_fit(&hand, &RankPoolConfig::new(3).unwrap()).map_err(|e| e.to_string())?.d.data()[0];
    ensure!((d - 2.0 / 3.0).abs() <= 1e-3, "V=[0,0.5,1] gave d={d}");
    within(
        started,
        Duration::from_secs(10),
        format!("{instances} instances, max deviation {worst:.1e}; V=[0,0.5,1] -> d={d:.9}"),
    )
}

fn symmetry_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut neg_worst, mut shift_worst): (f64, f64) = (0.0, 0.0);
    let trials = 1000;
    for _ in 0..trials {
        let k = [3, 5, 7][rng.gen_range(0..3)];
        let dim = rng.gen_range(1..=16);
        let frames = random_frames(&mut rng, k, dim);
        let base = fit(&frames)?;
        let neg = fit(&frames.iter().map(|t| t.map(|x| -x)).collect::<Vec<_>>())?;
        neg_worst = neg_worst.max(max_diff(&base.d, &neg.d.map(|x| -x)));
        let c = rng.gen_range(-5.0..5.0);
        let shifted = fit(&frames.iter().map(|t| t.map(|x| x + c)).collect::<Vec<_>>())?;
        shift_worst = shift_worst.max(max_diff(&base.d, &shifted.d));
        ensure!(
            base.history.windows(2).all(|w| w[1] <= w[0]),
            "objective increased: {:?}",
            base.history
        );
        let constant = fit(&vec![frames[0].clone(); k])?;
        ensure!(constant.d.data().iter().all(|&x| x == 0.0), "constant window gave {:?}", constant.d);
    }
    ensure!(neg_worst <= 1e-6, "negation deviation {neg_worst:.2e}");
    ensure!(shift_worst <= 1e-8, "shift deviation {shift_worst:.2e}");
    within(
        started,
        Duration::from_secs(30),
        format!("{trials} trials; negation {neg_worst:.1e}, shift {shift_worst:.1e}, constant 0, monotone history"),
    )
}

fn random_input(net: &Network, seed: u64) -> SampleInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = net.spec().input_size;
    let mut inp = SampleInput::new();
    for &m in &net.config().modalities {
        let n = m.channels() * s * s;
        let mut t = || Tensor::new(vec![m.channels(), s, s], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (a, b) = (t(), t());
        inp.insert(m, a, b);
    }
    inp
}

fn net(spec: BackboneSpec, variant: FusionVariant, modalities: &[Modality]) -> Network {
    Network::new(NetConfig {
        spec,
        variant,
        modalities: modalities.to_vec(),
        branches: BranchMode::Both,
    })
    .unwrap()
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let sd_modality = Modality::ALL[seed as usize];
        for (network, per_param) in [
            (net(BackboneSpec::desk(), FusionVariant::SdnetOnly, &[sd_modality]), 16),
            (net(BackboneSpec::desk(), FusionVariant::Psmm, &Modality::ALL), 4),
        ] {
            let params = network.init_params(InitConfig::generic(seed));
            let input = random_input(&network, 100 + seed);
            let sampling = Sampling { per_param, seed };
            let rep = network
                .grad_check_sampled(&params, &input, (seed % 2) as usize, 1e-5, sampling)
                .map_err(|e| e.to_string())?;
            ensure!(
                rep.max_rel_error <= 1e-4,
                "{} seed {seed}: error {:.2e} at {}[{}]",
                network.config().variant,
                rep.max_rel_error,
                rep.param,
                rep.coordinate
            );
            lines.push(format!(
                "{} seed {seed} {:.1e} over {} coords of {} tensors ({} refined)",
                network.config().variant,
                rep.max_rel_error,
                rep.coordinates_checked,
                params.len(),
                rep.refined
            ));
        }
    }
    within(started, Duration::from_secs(300), lines.join(", "))
}

fn sdnet_params_from(psmm_params: &ParamStore, sd: &Network) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, _) in sd.param_shapes() {
        out.insert(name.clone(), psmm_params.get(&name).unwrap().clone()).unwrap();
    }
    out
}

fn topology_identities() -> Outcome {
    let spec = BackboneSpec::desk();
    let psmm = net(spec.clone(), FusionVariant::Psmm, &Modality::ALL);
    let input = random_input(&psmm, 7);

    // (a) additivity, exact
    let params = psmm.init_params(InitConfig::generic(3));
    let (bundle, _) = psmm.loss_and_grads(&params, &input, 0).map_err(|e| e.to_string())?;
    ensure!(bundle.groups.len() == 3 && bundle.whole.is_some(), "unexpected loss layout");
    for g in &bundle.groups {
        let parts = [g.s, g.d, g.f, g.sdf].map(|x| x.unwrap());
        ensure!(g.total == parts[0] + parts[1] + parts[2] + parts[3], "group sum mismatch");
        ensure!(parts.iter().all(|&x| x >= 0.0), "negative cross-entropy");
    }
    let expect = bundle.whole.unwrap() + bundle.groups[0].total + bundle.groups[1].total + bundle.groups[2].total;
    ensure!(bundle.total == expect, "total {} != {expect}", bundle.total);

    // (b) first shared map identically zero
    let mut g = Graph::new(&params);
    let fwd = psmm.forward(&mut g, &input).map_err(|e| e.to_string())?;
    ensure!(g.value(fwd.state.s[0]).data().iter().all(|&v| v == 0.0), "S[1] is not zero");

    // (d) no static-dynamic fused feature reaches a fusion sum
    let xf: Vec<NodeId> = fwd.state.x_f.values().flatten().copied().collect();
    let fused: Vec<NodeId> = fwd
        .state
        .s_tilde
        .iter()
        .chain(fwd.state.xt_s.values().flatten())
        .chain(fwd.state.xt_d.values().flatten())
        .copied()
        .collect();
    for &n in &fused {
        let anc = g.ancestors(n);
        ensure!(xf.iter().all(|f| !anc.contains(f)), "{} depends on a fused static-dynamic map", g.label(n));
    }

    // (c) zero shared branch reduces to standalone SD-Nets, logits bitwise
    let mut zeroed = psmm.init_params(InitConfig::generic(21));
    for (name, t) in zeroed.iter_mut() {
        if name.starts_with("shared.") {
            t.data_mut().fill(0.0);
        }
    }
    let mut g = Graph::new(&zeroed);
    let fwd = psmm.forward(&mut g, &input).map_err(|e| e.to_string())?;
    for m in Modality::ALL {
        let sd = Network::build_sdnet(spec.clone(), m).map_err(|e| e.to_string())?;
        let sd_params = sdnet_params_from(&zeroed, &sd);
        let mut sg = Graph::new(&sd_params);
        let (st, dy) = input.get(m).unwrap();
        let sfwd = sd
            .forward(&mut sg, &SampleInput::new().with(m, st.clone(), dy.clone()))
            .map_err(|e| e.to_string())?;
        let a = fwd.heads.iter().find(|h| h.modality == Some(m)).unwrap();
        let b = &sfwd.heads[0];
        for (x, y) in [(a.s, b.s), (a.d, b.d), (a.f, b.f), (a.sdf, b.sdf)] {
            ensure!(g.value(x.unwrap()) == sg.value(y.unwrap()), "{m} logits differ");
        }
    }

    // (e) uniform heads
    let zero = psmm.init_params(InitConfig::new(4));
    let (b, _) = psmm.loss_and_grads(&zero, &input, 1).map_err(|e| e.to_string())?;
    ensure!((b.total - 13.0 * LN_2).abs() <= 1e-12, "PSMM zero-head loss {}", b.total);
    let sd = net(spec, FusionVariant::SdnetOnly, &[Modality::Depth]);
    let zero = sd.init_params(InitConfig::new(4));
    let (b, _) = sd
        .loss_and_grads(&zero, &random_input(&sd, 8), 0)
        .map_err(|e| e.to_string())?;
    ensure!((b.total - 4.0 * LN_2).abs() <= 1e-12, "SD-Net zero-head loss {}", b.total);
    Ok(format!(
        "(a) additivity exact, (b) S[1]=0, (c) zero-shared logits bitwise, (d) {} fusion sums free of fused maps, (e) 13ln2 / 4ln2",
        fused.len()
    ))
}

/// Sub-protocol, train real/fake, valid real/fake on the 2D subset.
const TABLE: [(&str, [usize; 4]); 11] = [
    ("1_1", [600, 1800, 300, 900]),
    ("1_2", [600, 1800, 300, 900]),
    ("1_3", [600, 1800, 300, 900]),
    ("2_1", [1800, 3600, 900, 1800]),
    ("2_2", [1800, 1800, 900, 900]),
    ("3_1", [600, 1800, 300, 900]),
    ("3_2", [600, 1800, 300, 900]),
    ("3_3", [600, 1800, 300, 900]),
    ("4_1", [600, 600, 300, 300]),
    ("4_2", [600, 600, 300, 300]),
    ("4_3", [600, 600, 300, 300]),
];

fn protocol_fixtures() -> Outcome {
    let started = Instant::now();
    let manifest = synth_manifest(&SynthConfig::canonical());
    for (id, row) in TABLE {
        let split = build_split(&manifest, id.parse().unwrap(), SplitOptions::default()).map_err(|e| e.to_string())?;
        let train = split.counts_2d(Subset::Train);
        let valid = split.counts_2d(Subset::Valid);
        ensure!(train == Counts { real: row[0], fake: row[1] }, "{id} train {train:?}");
        ensure!(valid == Counts { real: row[2], fake: row[3] }, "{id} valid {valid:?}");
        let report = validate_split(&split);
        ensure!(report.is_ok(), "{id}: {:?}", report.violations);
    }
    within(
        started,
        Duration::from_secs(10),
        format!("{} entries, 11 sub-protocols match and are subject-disjoint", manifest.len()),
    )
}

fn sweep_tpr(set: &ScoredSet, target: f64) -> f64 {
    let n = |l| set.count(l) as f64;
    let mut thresholds: Vec<f64> = set.entries.iter().map(|e| e.score).collect();
    thresholds.push(f64::INFINITY);
    let mut best: f64 = 0.0;
    for t in thresholds {
        let above = |l| set.entries.iter().filter(|e| e.label == l && e.score >= t).count() as f64;
        if above(Label::Attack) / n(Label::Attack) <= target {
            best = best.max(above(Label::BonaFide) / n(Label::BonaFide));
        }
    }
    best
}

fn metrics_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sets = 1000;
    for _ in 0..sets {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(0..40) as f64 / 40.0).collect::<Vec<_>>();
        let (nb, na) = (1 + (draw(1)[0] * 40.0) as usize, 1 + (draw(1)[0] * 40.0) as usize);
        let set = ScoredSet::from_scores(&draw(nb), &draw(na));
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let r = rates_at(&set, t).map_err(|e| e.to_string())?;
            ensure!(r.acer == (r.apcer + r.bpcer) / 2.0, "ACER identity broken");
        }
        let curve = roc(&set).map_err(|e| e.to_string())?;
        let (first, last) = (curve.points[0], *curve.points.last().unwrap());
        ensure!((first.fpr, first.tpr) == (0.0, 0.0), "ROC does not start at the origin");
        ensure!((last.fpr, last.tpr) == (1.0, 1.0), "ROC does not end at (1,1)");
        ensure!(
            curve.points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr),
            "ROC not monotone"
        );
        for target in [0.0, 0.01, 0.1, 0.3, 1.0] {
            ensure!(tpr_at_fpr(&curve, target) == sweep_tpr(&set, target), "tpr_at_fpr({target}) off the sweep");
        }
    }
    let big = ScoredSet::from_scores(
        &(0..5000).map(|_| rng.gen_range(0.2..1.0f64)).collect::<Vec<_>>(),
        &(0..5000).map(|_| rng.gen_range(0.0..0.8f64)).collect::<Vec<_>>(),
    );
    let curve = roc(&big).map_err(|e| e.to_string())?;
    for target in [1e-4, 1e-3, 1e-2, 0.1] {
        ensure!(tpr_at_fpr(&curve, target) == sweep_tpr(&big, target), "10^4 set off the sweep at {target}");
    }
    let reports: Vec<Rates> = [0.6, 4.4, 1.5].iter().map(|&a| Rates::new(a, a)).collect();
    let agg = aggregate(&reports).map_err(|e| e.to_string())?;
    let row = format!("{:.1}±{:.1}", agg.acer.mean, agg.acer.std);
    ensure!(row == "2.2±2.0", "aggregate row {row}");
    within(
        started,
        Duration::from_secs(30),
        format!("{sets} random sets + 10^4 sweep; Protocol 1 average {row}"),
    )
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        subjects_per_ethnicity: 60,
        ..SynthConfig::default()
    };
    let manifest = synth_dataset(&synth, dir.path(), false, None).map_err(|e| e.to_string())?;
    let split = build_split(&manifest, "1_1".parse().unwrap(), SplitOptions::default()).map_err(|e| e.to_string())?;
    let size = synth.frame_size;
    let slots = SlotMap::identity(&Modality::ALL);
    let load = |entries| Dataset::load(dir.path(), entries, &slots, size, 7).map_err(|e| e.to_string());
    let (train_set, test_set) = (load(&split.train)?, load(&split.test)?);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 8,
        decay_epochs: vec![15],
        ..TrainConfig::default()
    };
    let base = NetConfig {
        spec: BackboneSpec {
            input_size: size,
            ..BackboneSpec::desk()
        },
        variant: FusionVariant::Psmm,
        modalities: Modality::ALL.to_vec(),
        branches: BranchMode::Both,
    };
    let model = Model::init(base.clone(), cfg.seed).map_err(|e| e.to_string())?;
    let outcome = train(model, &train_set, None, &cfg, &TrainOutput::default()).map_err(|e| e.to_string())?;
    let scores = outcome.model.score_dataset(&test_set, None).map_err(|e| e.to_string())?;
    let psmm = rates_at(&scores, 0.5).map_err(|e| e.to_string())?;
    ensure!(psmm.acer <= 0.10, "PSMM-Net test ACER {:.4}", psmm.acer);

    let plan = AblationPlan {
        branches: vec![BranchMode::Static, BranchMode::Dynamic, BranchMode::Both],
        modalities: vec![vec![Modality::Color]],
        variants: vec![FusionVariant::Psmm],
    };
    let rows = run_ablation(&plan.runs(&base), &train_set, &test_set, &cfg, 0.5);
    let mut acer = BTreeMap::new();
    for row in &rows {
        let r = row.result.as_ref().map_err(|e| format!("{} run failed: {e}", row.config.branches))?;
        acer.insert(row.config.branches.to_string(), r.acer);
    }
    let (s, d, sd) = (acer["static"], acer["dynamic"], acer["both"]);
    ensure!(sd <= s.min(d), "SD {sd:.4} > min(S {s:.4}, D {d:.4})");
    within(
        started,
        Duration::from_secs(1800),
        format!(
            "{} train / {} test recordings; PSMM ACER {:.4}; colour S {s:.4}, D {d:.4}, SD {sd:.4}",
            train_set.len(),
            test_set.len(),
            psmm.acer
        ),
    )
}

fn call(args: &[&str]) -> Result<String, String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = dispatch(std::iter::once("psmm").chain(args.iter().copied()), &mut out, &mut err);
    let out = String::from_utf8_lossy(&out).into_owned();
    ensure!(code == 0, "{args:?} exited {code}: {}", String::from_utf8_lossy(&err));
    Ok(out)
}

/// Every file under `root` except run records, which carry wall-clock time.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with(RUN_RECORD) {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn records(root: &Path) -> Vec<(String, String, Vec<String>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.to_string_lossy().ends_with(RUN_RECORD) {
                let rec: RunRecord = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
                let hashes = rec.outputs.iter().map(|a| a.sha256.clone()).collect();
                out.push((rec.run_id, rec.config_hash, hashes));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(base: &Path) -> Result<String, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = base.join("data");
    call(&["synth", "--subjects", "5", "--set", "frame_size=16", "--set", "clip_len=8", "--seed", "3", "--out", &s(&data)])?;
    let split = base.join("split");
    let manifest = s(&data.join("manifest.csv"));
    let mut log = call(&["split", "--manifest", &manifest, "--protocol", "1_1", "--out", &s(&split)])?;
    let clip = std::fs::read_dir(data.join("2d/A/0001")).unwrap().next().unwrap().unwrap().path();
    call(&["dynimg", "--video", &s(&clip), "--index", "5", "--out", &s(&base.join("dyn.png"))])?;
    let net = [
        "--set", "input_size=16", "--set", "stem_width=2", "--set", "widths=2,3,3,4", "--set", "batch=4", "--set",
        "decay_epochs=",
    ];
    let (train, valid, test) = (s(&split.join("train.csv")), s(&split.join("valid.csv")), s(&split.join("test.csv")));
    let (model, data) = (s(&base.join("model")), s(&data));
    let mut args = vec!["train", "--data", &data, "--train", &train, "--valid", &valid, "--out", &model, "--epochs", "2"];
    args.extend(net);
    call(&args)?;
    let scores = s(&base.join("scores.csv"));
    log += &call(&["eval", "--model", &model, "--data", &data, "--entries", &test, "--out", &scores, "--subprotocol", "1_1"])?;
    log += &call(&["report", &scores, "--format", "records"])?;
    let ablate = s(&base.join("ablate"));
    let mut args = vec![
        "ablate", "--data", &data, "--train", &train, "--test", &test, "--out", &ablate, "--branches", "s,d,sd",
        "--modalities", "r", "--variants", "psmm", "--set", "epochs=1",
    ];
    args.extend(net);
    log += &call(&args)?;
    Ok(log)
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let (log_a, log_b) = (pipeline(&a)?, pipeline(&b)?);
    ensure!(log_a == log_b, "command output differs");
    let (ta, tb) = (tree(&a), tree(&b));
    ensure!(
        ta.keys().eq(tb.keys()),
        "file sets differ: {:?} vs {:?}",
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &ta {
        ensure!(&tb[name] == bytes, "{name} differs between runs");
    }
    let (ra, rb) = (records(&a), records(&b));
    ensure!(ra == rb, "run records differ: {:?}", ra.iter().zip(&rb).find(|(x, y)| x != y));
    ensure!(ra.len() >= 6, "only {} run records", ra.len());
    Ok(format!(
        "synth, split, dynimg, train, eval, report, ablate: {} files and {} run records bitwise equal",
        ta.len(),
        ra.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("rank-pooling oracle equivalence", oracle_equivalence),
        ("rank-pooling symmetry suite", symmetry_suite),
        ("gradient correctness", gradient_correctness),
        ("fusion-topology identities", topology_identities),
        ("protocol fixtures", protocol_fixtures),
        ("metrics suite", metrics_suite),
        ("end-to-end learning", end_to_end),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
