//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use dmg_core::data::{bayes_oracle_accuracy, generate, DomainSuite, SyntheticSpec};
use dmg_core::eval::{evaluate, lambda_sweep, predict, EvalConfig, EvalReport, InferenceMode, SweepParam};
use dmg_core::gradcheck::GradCheck;
use dmg_core::mask::{sigmoid, siou_pair, MaskBank, MaskInit};
use dmg_core::network::{HeadSel, LayerMask, Network, NetworkSpec};
use dmg_core::ops::dense_forward;
use dmg_core::rng::Rng;
use dmg_core::train::{train, Batch, Method, TrainConfig};
use dmg_core::Tensor;

type Outcome = (bool, String);

fn specificity_suite(seed: u64) -> DomainSuite {
    generate(&SyntheticSpec {
        n_per_domain: 1000,
        shared_sep: 1.0,
        specific_sep: 1.0,
        noise_sigma: 1.0,
        seed,
        ..Default::default()
    })
    .expect("suite")
}

fn dmg_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 30,
        lambda_o: 0.1,
        ..Default::default()
    }
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
    t
}

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(101);
    let spec = NetworkSpec {
        input_dim: 5,
        feature_widths: vec![8],
        task_widths: vec![6, 4],
        heads: 0,
        final_init_std: 0.5,
    };
    let net = Network::new(&spec, &mut rng).unwrap();
    let bank = MaskBank::new(
        vec!["a".into(), "b".into(), "c".into()],
        net.mask_specs(),
        MaskInit::Uniform { lo: -2.0, hi: 2.0 },
        &mut rng,
    )
    .unwrap();
    let batch = Batch {
        x: random_tensor(&mut rng, &[9, 5]),
        y: (0..9).map(|i| i % 4).collect(),
        domains: (0..9).map(|i| i % 3).collect(),
    };
    let check = GradCheck { step: 1e-6, rtol: 1e-3, atol: 1e-6 };
    let (mut checked, mut failures, mut worst, mut worst_abs) = (0, Vec::new(), 0.0f64, 0.0f64);
    for (lo, ls) in [(0.0, 0.0), (0.1, 0.0), (1.0, 0.0), (0.0, 0.01)] {
        let r = check.run(&net, Some(&bank), &batch, lo, ls).unwrap();
        checked += r.checked;
        worst = worst.max(r.max_rel_err);
        worst_abs = worst_abs.max(r.max_abs_err);
        failures.extend(r.failures);
    }
    let secs = started.elapsed().as_secs_f64();
    (
        failures.is_empty() && secs < 5.0,
        format!(
            "{checked} entries over 2 masked layers x 3 domains, {} outside rtol 1e-3/atol 1e-6, max abs err {worst_abs:.1e}, max rel err {worst:.1e}, {secs:.2}s (< 5s)",
            failures.len()
        ),
    )
}

fn siou_algebra() -> Outcome {
    let mut rng = Rng::new(202);
    let (mut asym, mut out_of_range) = (0, 0);
    for _ in 0..10_000 {
        let k = 1 + (rng.uniform() * 32.0) as usize;
        let a: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let ab = siou_pair(&a, &b).unwrap();
        if ab != siou_pair(&b, &a).unwrap() {
            asym += 1;
        }
        if !(0.0..=1.0).contains(&ab) {
            out_of_range += 1;
        }
    }
    let mut identity_err = 0.0f64;
    let mut disjoint_max = 0.0f64;
    for k in 1..=64 {
        let m: Vec<f64> = (0..k).map(|i| if (i * 7 + k) % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let m = if m.iter().all(|&v| v == 0.0) { vec![1.0; k] } else { m };
        identity_err = identity_err.max((siou_pair(&m, &m).unwrap() - 1.0).abs());
        let comp: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
        disjoint_max = disjoint_max.max(siou_pair(&m, &comp).unwrap());
    }
    let third = (siou_pair(&[0.5], &[0.5]).unwrap() - 1.0 / 3.0).abs();
    (
        asym == 0 && out_of_range == 0 && identity_err == 0.0 && disjoint_max == 0.0 && third <= 1e-12,
        format!(
            "10000 pairs: {asym} asymmetric, {out_of_range} outside [0,1]; identical binary -> 1 (max err {identity_err:e}); disjoint -> {disjoint_max}; |sIoU(0.5,0.5) - 1/3| = {third:.1e} (<= 1e-12)"
        ),
    )
}

fn reduction_equivalence() -> Outcome {
    let suite = generate(&SyntheticSpec {
        n_per_domain: 300,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let base = TrainConfig {
        epochs: 8,
        lambda_o: 0.0,
        seed: 17,
        ..Default::default()
    };
    let agg = TrainConfig { method: Method::Aggregate, ..base.clone() };
    let dmg = TrainConfig {
        mask_init: MaskInit::Constant { value: 1e3 },
        ..base
    };
    let (ca, ra) = train(&agg, &suite).unwrap();
    let (cd, rd) = train(&dmg, &suite).unwrap();

    let x = suite.domain("src1").unwrap().x.clone();
    let ones: Vec<LayerMask> = ca.network.mask_specs().iter().map(|s| LayerMask::Shared(vec![1.0; s.k])).collect();
    let identity = vec![LayerMask::Identity; ca.network.task.len()];
    let forward_same = ca.network.forward(&x, &ones, HeadSel::Single).unwrap().0.data()
        == ca.network.forward(&x, &identity, HeadSel::Single).unwrap().0.data();

    let epochs_same = ra
        .epochs
        .iter()
        .zip(&rd.epochs)
        .all(|(a, d)| a.class_loss.to_bits() == d.class_loss.to_bits() && a.val_acc == d.val_acc);
    let params_same = ca
        .network
        .tensors()
        .iter()
        .zip(cd.network.tensors())
        .all(|(a, d)| a.data() == d.data());
    (
        forward_same && epochs_same && params_same && ca.epoch == cd.epoch,
        format!(
            "all-ones forward bit-identical: {forward_same}; 8-epoch trajectories bit-identical: {epochs_same}; final parameters identical: {params_same}"
        ),
    )
}

fn expectation_consistency() -> Outcome {
    let mut rng = Rng::new(404);
    let (k, c) = (12, 5);
    let a = random_tensor(&mut rng, &[1, k]);
    let w = random_tensor(&mut rng, &[k, c]);
    let b = random_tensor(&mut rng, &[c]);
    let probs: Vec<f64> = (0..k).map(|_| sigmoid(rng.uniform_range(-3.0, 3.0))).collect();
    let soft_in = Tensor::new(vec![1, k], a.data().iter().zip(&probs).map(|(x, p)| x * p).collect()).unwrap();
    let soft = dense_forward(&soft_in, &w, &b).unwrap();

    let n = 100_000;
    let (mut sum, mut sq) = (vec![0.0; c], vec![0.0; c]);
    let mut m = vec![0.0; k];
    let mut x = Tensor::zeros(&[1, k]);
    for _ in 0..n {
        rng.bernoulli_into(&probs, &mut m);
        for ((xi, ai), mi) in x.data_mut().iter_mut().zip(a.data()).zip(&m) {
            *xi = ai * mi;
        }
        let y = dense_forward(&x, &w, &b).unwrap();
        for (j, v) in y.data().iter().enumerate() {
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let worst = (0..c)
        .map(|j| {
            let mean = sum[j] / n as f64;
            let se = ((sq[j] / n as f64 - mean * mean) / n as f64).sqrt();
            (mean - soft.data()[j]).abs() / se
        })
        .fold(0.0, f64::max);
    (worst <= 3.0, format!("1e5 sampled masks, {c} outputs: max |MC mean - soft output| = {worst:.2} SE (<= 3)"))
}

fn linear_ensemble_identity() -> Outcome {
    let mut rng = Rng::new(505);
    let spec = NetworkSpec {
        input_dim: 6,
        feature_widths: vec![10],
        task_widths: vec![4],
        heads: 0,
        final_init_std: 1.0,
    };
    let net = Network::new(&spec, &mut rng).unwrap();
    let bank = MaskBank::new(
        (0..3).map(|d| format!("d{d}")).collect(),
        net.mask_specs(),
        MaskInit::Uniform { lo: -3.0, hi: 3.0 },
        &mut rng,
    )
    .unwrap();
    let x = random_tensor(&mut rng, &[50, 6]);
    let pe = predict(&net, Some(&bank), &x, &InferenceMode::PredEns, None, true).unwrap();
    let me = predict(&net, Some(&bank), &x, &InferenceMode::MaskEns, None, false).unwrap();
    let worst = pe.data().iter().zip(me.data()).map(|(p, m)| (p - m).abs()).fold(0.0, f64::max);
    (
        worst <= 1e-10,
        format!("one masked layer into a linear classifier, 50 rows: max |pred-ens - mask-ens| = {worst:.1e} (<= 1e-10, logit averaging)"),
    )
}

struct SpecializationRuns {
    reports: Vec<EvalReport>,
    secs: f64,
}

fn specialization_runs() -> SpecializationRuns {
    let started = Instant::now();
    let reports = (0..5u64)
        .map(|seed| {
            let suite = specificity_suite(seed);
            let (ckpt, _) = train(&dmg_config(seed), &suite).unwrap();
            evaluate(&ckpt, &suite, &EvalConfig::default()).unwrap()
        })
        .collect();
    SpecializationRuns {
        reports,
        secs: started.elapsed().as_secs_f64(),
    }
}

fn specialization_emergence(runs: &SpecializationRuns) -> Outcome {
    let (mut matched, mut mismatched, mut n) = (0.0, 0.0, 0.0);
    for r in &runs.reports {
        for (_, m, o) in r.specialization_matrix.as_ref().unwrap().diagonal_gaps() {
            matched += m;
            mismatched += o;
            n += 1.0;
        }
    }
    let gap = 100.0 * (matched - mismatched) / n;
    (
        gap >= 2.0 && runs.secs < 300.0,
        format!(
            "5 seeds, p=3 q=1, lambda_O=0.1: matched {:.2}% vs best mismatched {:.2}%, gap {gap:.2} points (>= 2); {:.0}s (< 300s)",
            100.0 * matched / n,
            100.0 * mismatched / n,
            runs.secs
        ),
    )
}

fn mask_vs_pred_ensemble(runs: &SpecializationRuns) -> Outcome {
    let (mut total, mut n) = (0.0, 0.0);
    for r in &runs.reports {
        for d in r.per_domain.values() {
            total += (d.per_mode["pred-ens"] - d.per_mode["mask-ens"]).abs();
            n += 1.0;
        }
    }
    let gap = 100.0 * total / n;
    (gap <= 2.0, format!("mean |pred-ens - mask-ens| over 5 seeds x 4 domains = {gap:.2} points (<= 2)"))
}

fn lambda_o_robustness() -> Outcome {
    let suite = specificity_suite(0);
    let values = dmg_core::eval::default_lambda_grid();
    let runs = lambda_sweep(&dmg_config(0), SweepParam::LambdaO, &values, &suite, &EvalConfig::default(), 1).unwrap();
    let acc: Vec<f64> = runs.iter().map(|r| r.row.in_acc.unwrap()).collect();
    let spread = 100.0 * (acc.iter().cloned().fold(f64::MIN, f64::max) - acc.iter().cloned().fold(f64::MAX, f64::min));
    let iou0 = runs[0].row.mean_iou.unwrap();
    let iou1 = runs.last().unwrap().row.mean_iou.unwrap();
    let accs: Vec<String> = acc.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
    (
        spread <= 5.0 && iou0 - iou1 >= 0.05,
        format!(
            "in-domain acc over 7-value grid [{}]: spread {spread:.2} points (<= 5); mean IoU {iou0:.3} at 0 -> {iou1:.3} at 1, drop {:.3} (>= 0.05)",
            accs.join(", "),
            iou0 - iou1
        ),
    )
}

fn sparsity_contrast() -> Outcome {
    let suite = specificity_suite(0);
    let base = TrainConfig {
        mask_lr_scale: 30.0,
        ..dmg_config(0)
    };
    let values = [1e-5, 1e-3, 1e-1, 1.0];
    let runs = lambda_sweep(&base, SweepParam::LambdaS, &values, &suite, &EvalConfig::default(), 1).unwrap();
    let acc_lo = runs[0].row.in_acc.unwrap();
    let acc_hi = runs[3].row.in_acc.unwrap();
    let on_hi = runs[3].row.on_fraction.unwrap();
    let drop = 100.0 * (acc_lo - acc_hi);
    let on: Vec<String> = runs.iter().map(|r| format!("{:.2}", r.row.on_fraction.unwrap())).collect();
    (
        drop >= 10.0 && on_hi < 0.2,
        format!(
            "in-domain acc {:.1}% at lambda_S=1e-5 vs {:.1}% at 1: drop {drop:.1} points (>= 10); on-fraction [{}], {on_hi:.3} at 1 (< 0.2)",
            100.0 * acc_lo,
            100.0 * acc_hi,
            on.join(", ")
        ),
    )
}

fn strip_wall_time(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"wall_time_s\"")).collect::<Vec<_>>().join("\n")
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = "[data]\nn_per_domain = 150\n[train]\nepochs = 3\n[sweep]\nvalues = [0.0, 0.1]\n";
    fs::write(tmp.path().join("run.toml"), config).unwrap();
    let run = |args: &[&str], jobs_env: bool| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dmg-lab"));
        cmd.args(args).current_dir(tmp.path());
        if jobs_env {
            cmd.env("DMG_LAB_DETERMINISTIC", "1");
        } else {
            cmd.env_remove("DMG_LAB_DETERMINISTIC");
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    for out in ["a", "b"] {
        run(&["report", "--config", "run.toml", "--out", out, "--seed", "4"], false);
        run(&["eval", "--config", "run.toml", "--out", out, "--modes", "kd,mask-ens"], false);
    }
    run(&["sweep", "--config", "run.toml", "--out", "a", "--jobs", "2"], false);
    run(&["sweep", "--config", "run.toml", "--out", "b", "--jobs", "2"], true);

    let files = [
        "data/manifest.json",
        "data/src0.csv",
        "data/tgt0.csv",
        "checkpoint.json",
        "train_report.json",
        "eval_report.json",
        "sweep.json",
        "runs/lambda_O=1e-1/train_report.json",
        "runs/lambda_O=1e-1/eval_report.json",
        "runs/lambda_O=0e0/checkpoint.json",
    ];
    let read = |root: &str, f: &str| strip_wall_time(&fs::read_to_string(tmp.path().join(root).join(f)).unwrap());
    let differing: Vec<&str> = files.iter().copied().filter(|f| read("a", f) != read("b", f)).collect();
    (
        differing.is_empty(),
        format!(
            "generate/train/eval/sweep repeated via the CLI: {} of {} artifacts byte-identical outside wall_time_s{}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {})", differing.join(", ")) }
        ),
    )
}

fn oracle_ceiling() -> Outcome {
    let suite = generate(&SyntheticSpec {
        noise_sigma: 0.0,
        n_per_domain: 400,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let oracle_min = suite
        .source_ids()
        .iter()
        .map(|d| bayes_oracle_accuracy(&suite, d).unwrap())
        .fold(f64::MAX, f64::min);
    let cfg = TrainConfig {
        method: Method::Aggregate,
        epochs: 50,
        ..Default::default()
    };
    let (ckpt, _) = train(&cfg, &suite).unwrap();
    let report = evaluate(&ckpt, &suite, &EvalConfig::default()).unwrap();
    let agg_min = report
        .per_domain
        .values()
        .filter_map(|d| d.in_acc)
        .fold(f64::MAX, f64::min);
    (
        oracle_min == 1.0 && agg_min >= 0.99,
        format!("noiseless blobs: Bayes oracle min {oracle_min:.3} (= 1.0); Aggregate min in-domain {agg_min:.3} within 50 epochs (>= 0.99)"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        let (ok, detail) = outcome;
        if !ok {
            failed += 1;
        }
        println!("{} [{id:>2}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    };

    report(1, "gradient integrity", guarded(gradient_integrity));
    report(2, "sIoU algebra", guarded(siou_algebra));
    report(3, "reduction equivalence", guarded(reduction_equivalence));
    report(4, "expectation consistency", guarded(expectation_consistency));
    report(5, "linear-path ensemble identity", guarded(linear_ensemble_identity));
    match catch_unwind(specialization_runs) {
        Ok(runs) => {
            report(6, "specialization emergence", guarded(|| specialization_emergence(&runs)));
            report(7, "lambda_O robustness and IoU trend", guarded(lambda_o_robustness));
            report(8, "sparsity-incentive contrast", guarded(sparsity_contrast));
            report(9, "mask-ens vs pred-ens gap", guarded(|| mask_vs_pred_ensemble(&runs)));
        }
        Err(_) => {
            report(6, "specialization emergence", (false, "training runs panicked".into()));
            report(7, "lambda_O robustness and IoU trend", guarded(lambda_o_robustness));
            report(8, "sparsity-incentive contrast", guarded(sparsity_contrast));
            report(9, "mask-ens vs pred-ens gap", (false, "training runs panicked".into()));
        }
    }
    report(10, "determinism", guarded(determinism));
    report(11, "oracle ceiling", guarded(oracle_ceiling));

    println!(
        "acceptance: {} of 11 criteria passed in {:.0}s",
        11 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
