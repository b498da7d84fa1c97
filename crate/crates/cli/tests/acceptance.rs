//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and exits
//! non-zero if any failed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mafr_core::evaluation::{aupro, auroc, AblationReport, EvalReport};
use mafr_core::feature_store::{load_feature_map, save_feature_map, FeatureMap, Modality};
use mafr_core::gradcheck::{run_gradcheck, GradcheckConfig};
use mafr_core::losses::{census, smoothness, znssd};
use mafr_core::training::TrainLog;
use ndarray::{array, Array2, Array3};
use rand::Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn mafr(workdir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mafr"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("MAFR_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("mafr {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn gradients() -> Outcome {
    let report = run_gradcheck(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let failing: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    check!(report.passed && failing.is_empty(), "failing checks: {failing:?}\n{}", report.to_text());
    let worst_layer = report.checks.iter().filter(|c| c.tolerance <= 1e-5).map(|c| c.max_rel_error).fold(0.0, f64::max);
    let e2e = report.checks.iter().filter(|c| c.tolerance > 1e-5).map(|c| c.max_rel_error).fold(0.0, f64::max);
    check!(worst_layer <= 1e-5 && e2e <= 1e-4, "tolerance exceeded: layer {worst_layer:e}, end-to-end {e2e:e}");
    Ok(format!("{} checks, worst layer {worst_layer:.1e}, end-to-end {e2e:.1e}", report.checks.len()))
}

fn loss_identities() -> Outcome {
    let v12 = Array2::from_elem((1, 2), true);
    let z = znssd(array![[[1.0f64], [3.0]]].view(), array![[[3.0f64], [1.0]]].view(), 1e-12, &v12).map_err(|e| e.to_string())?;
    check!((z - 4.0).abs() <= 1e-6, "znssd hand value {z}");
    let c = census(array![[[0.0f64], [3.0]]].view(), array![[[3.0f64], [0.0]]].view(), 3, &v12).map_err(|e| e.to_string())?;
    check!((c - 1.0).abs() <= 1e-12, "census hand value {c}");
    let s = smoothness(Array3::<f64>::zeros((2, 2, 1)).view(), array![[[0.0], [1.0]], [[0.0], [1.0]]].view(), &Array2::from_elem((2, 2), true))
        .map_err(|e| e.to_string())?;
    check!((s - 0.5).abs() <= 1e-12, "smoothness hand value {s}");

    let mut rng = mafr_core::seed::rng(21);
    let valid = Array2::from_elem((5, 6), true);
    for trial in 0..200 {
        let e = Array3::from_shape_fn((5, 6, 4), |_| rng.gen_range(-2.0..2.0f64));
        let e_q = e.mapv(|v| (v * 1024.0).round() / 1024.0);
        check!(znssd(e.view(), e.view(), 1e-8, &valid).unwrap() == 0.0, "znssd(E,E) != 0 at {trial}");
        check!(census(e.view(), e.view(), 3, &valid).unwrap() == 0.0, "census(E,E) != 0 at {trial}");
        check!(smoothness(e.view(), e.view(), &valid).unwrap() == 0.0, "smoothness(E,E) != 0 at {trial}");
        let offset = f64::from(rng.gen_range(-4096i32..4096)) / 1024.0;
        let shifted = e_q.mapv(|v| v + offset);
        check!(smoothness(e_q.view(), shifted.view(), &valid).unwrap() == 0.0, "smoothness(E,E+c) != 0 at {trial}");
        let (a, b) = (rng.gen_range(0.2..5.0), rng.gen_range(-3.0..3.0));
        let z = znssd(e.view(), e.mapv(|v| a * v + b).view(), 1e-8, &valid).unwrap();
        check!(z <= 1e-6, "znssd(E, aE+b) = {z:e} at {trial}");
    }
    Ok("hand values 4.0 / 1.0 / 0.5, 200 random identity trials".into())
}

fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (s, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (t, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            pairs += 1.0;
            wins += if s > t { 1.0 } else if s == t { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

fn flood_regions(mask: &Array2<bool>) -> Vec<Option<usize>> {
    let (h, w) = mask.dim();
    let mut ids = vec![None; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if !mask[[start / w, start % w]] || ids[start].is_some() {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([start]);
        ids[start] = Some(next);
        while let Some(k) = queue.pop_front() {
            let (i, j) = ((k / w) as isize, (k % w) as isize);
            for (a, b) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                    let n = a as usize * w + b as usize;
                    if mask[[a as usize, b as usize]] && ids[n].is_none() {
                        ids[n] = Some(next);
                        queue.push_back(n);
                    }
                }
            }
        }
        next += 1;
    }
    ids
}

fn sweep_aupro(maps: &[Array2<f64>], masks: &[Array2<bool>], limit: f64) -> f64 {
    let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let regions: Vec<_> = masks.iter().map(flood_regions).collect();
    let curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (mut fp, mut neg) = (0, 0);
            let mut overlap: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
            for (k, (m, ids)) in maps.iter().zip(&regions).enumerate() {
                for (s, id) in m.iter().zip(ids) {
                    match id {
                        None => {
                            neg += 1;
                            fp += usize::from(*s >= t);
                        }
                        Some(r) => {
                            let e = overlap.entry((k, *r)).or_default();
                            e.0 += usize::from(*s >= t);
                            e.1 += 1;
                        }
                    }
                }
            }
            let pro = overlap.values().map(|(a, b)| *a as f64 / *b as f64).sum::<f64>() / overlap.len() as f64;
            (fp as f64 / neg as f64, pro)
        })
        .collect();
    let at = |x: f64| {
        let mut prev = (0.0, curve[0].1);
        for &(cx, cy) in &curve {
            if cx > x {
                return if cx > prev.0 { prev.1 + (cy - prev.1) * (x - prev.0) / (cx - prev.0) } else { cy };
            }
            prev = (cx, cy);
        }
        prev.1
    };
    let steps = 20_000;
    let dx = limit / steps as f64;
    (0..steps).map(|i| at((i as f64 + 0.5) * dx)).sum::<f64>() * dx / limit
}

fn metrics() -> Outcome {
    let mut rng = mafr_core::seed::rng(31);
    let mut worst_auroc: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.gen_range(2..=80);
        let levels = if trial % 4 == 0 { 5 } else { 1 << 30 };
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels))).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let diff = (auroc(&scores, &labels).unwrap() - pair_count_auroc(&scores, &labels)).abs();
        worst_auroc = worst_auroc.max(diff);
    }
    check!(worst_auroc <= 1e-9, "AUROC deviates from pair counting by {worst_auroc:e}");
    let example = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    check!((example - 0.75).abs() <= 1e-12, "AUROC worked example {example}");

    let mut worst_aupro: f64 = 0.0;
    for _ in 0..200 {
        let count = rng.gen_range(1..=3);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..count {
            let density = rng.gen_range(0.05..0.4);
            let mask = Array2::from_shape_fn((8, 8), |_| rng.gen_bool(density));
            maps.push(Array2::from_shape_fn((8, 8), |(i, j)| rng.gen::<f64>() + if mask[[i, j]] { rng.gen_range(0.0..0.6) } else { 0.0 }));
            masks.push(mask);
        }
        masks[0][[0, 0]] = true;
        masks[0][[7, 7]] = false;
        for limit in [0.3, 0.01] {
            let diff = (aupro(&maps, &masks, limit).unwrap() - sweep_aupro(&maps, &masks, limit)).abs();
            worst_aupro = worst_aupro.max(diff);
        }
    }
    check!(worst_aupro <= 1e-3, "AUPRO deviates from exhaustive sweep by {worst_aupro:e}");
    let example = aupro(&[array![[0.9, 0.1], [0.2, 0.8]]], &[array![[true, false], [false, true]]], 0.3).unwrap();
    check!((example - 1.0).abs() <= 1e-12, "AUPRO worked example {example}");
    Ok(format!("AUROC max diff {worst_auroc:.1e} over 1000, AUPRO max diff {worst_aupro:.1e} over 200"))
}

fn end_to_end(work: &Path) -> Outcome {
    mafr(work, &["synth"])?;
    mafr(work, &["train"])?;
    mafr(work, &["eval"])?;
    let report: EvalReport = read_json(&work.join("out/report.json"))?;
    let p = report.p_auroc.ok_or("pixel metrics skipped")?;
    check!(report.i_auroc >= 0.90 && p >= 0.90, "I-AUROC {:.4}, P-AUROC {p:.4}", report.i_auroc);
    Ok(format!("I-AUROC {:.4}, P-AUROC {p:.4}", report.i_auroc))
}

fn ablation(work: &Path) -> Outcome {
    if !work.join("data/train.json").exists() {
        mafr(work, &["synth"])?;
    }
    mafr(work, &["ablate"])?;
    let report: AblationReport = read_json(&work.join("out/ablation.json"))?;
    let i = |name: &str| report.row(name).map(|r| r.report.i_auroc).ok_or(format!("missing row {name}"));
    let (mul, add, d2, d3) = (i("multiply")?, i("add")?, i("2d")?, i("3d")?);
    let (all, census_only) = (i("all-three")?, i("census-only")?);
    let summary = format!("multiply {mul:.4}, add {add:.4}, 2d {d2:.4}, 3d {d3:.4}, all-three {all:.4}, census-only {census_only:.4}");
    check!(mul >= add && add >= d2.max(d3), "fusion ordering violated: {summary}");
    check!(all >= census_only - 0.02, "three-term loss below census-only: {summary}");
    Ok(summary)
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let runs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for (dir, threads) in runs.iter().zip(["4", "1"]) {
        let w = dir.path();
        mafr(w, &["--threads", threads, "synth", "--train-count", "6", "--test-normal", "4", "--test-anomalous", "4"])?;
        mafr(w, &["--threads", threads, "train", "--epochs", "5", "--batch-size", "2"])?;
        mafr(w, &["--threads", threads, "infer", "--png"])?;
        mafr(w, &["--threads", threads, "eval"])?;
    }
    // the runs differ only in thread count, which the recorded run config includes
    let [a, b] = [0, 1].map(|k| {
        let mut t = tree(runs[k].path());
        t.remove("model/train_log.json");
        let mut cfg: serde_json::Value = serde_json::from_slice(&t["out/run_config.json"]).unwrap();
        cfg["threads"] = serde_json::Value::Null;
        t.insert("out/run_config.json".into(), cfg.to_string().into_bytes());
        t
    });
    check!(a.len() > 30, "unexpectedly few outputs: {}", a.len());
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect();
    check!(differing.is_empty() && a.len() == b.len(), "outputs differ: {differing:?}");
    let logs: Vec<TrainLog> = runs.iter().map(|d| read_json(&d.path().join("model/train_log.json"))).collect::<Result<_, _>>()?;
    check!(logs[0].without_timing() == logs[1].without_timing(), "training logs differ beyond timing");
    Ok(format!("{} files byte-identical across runs and thread counts", a.len()))
}

fn round_trip() -> Outcome {
    let dir = TempDir::new().unwrap();
    let mut rng = mafr_core::seed::rng(71);
    for trial in 0..1000 {
        let (h, w, d) = (rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=9));
        let modality = if rng.gen_bool(0.5) { Modality::TwoD } else { Modality::ThreeD };
        let data = Array3::from_shape_fn((h, w, d), |_| loop {
            let v = f32::from_bits(rng.gen());
            if v.is_finite() {
                break v;
            }
        });
        // only 3D maps may carry invalid pixels
        let mut validity = Array2::from_shape_fn((h, w), |_| modality == Modality::TwoD || rng.gen_bool(0.7));
        validity[[0, 0]] = true;
        let map = FeatureMap::new(modality, data, validity).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{trial}.mafr"));
        save_feature_map(&map, &path).map_err(|e| e.to_string())?;
        let back = load_feature_map(&path).map_err(|e| e.to_string())?;
        let bits = |m: &FeatureMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        check!(
            back.modality() == map.modality()
                && back.data().dim() == map.data().dim()
                && bits(&back) == bits(&map)
                && back.validity() == map.validity(),
            "round trip {trial} changed the map"
        );
    }
    Ok("1000 maps bit-exact".into())
}

fn few_shot() -> Outcome {
    let dir = TempDir::new().unwrap();
    let w = dir.path();
    mafr(w, &["synth", "--train-count", "50"])?;
    let mut i_auroc = BTreeMap::new();
    for n in [5usize, 10, 50] {
        let ckpt = format!("model_{n}");
        let out = format!("out_{n}");
        mafr(w, &["train", "--shots", &n.to_string(), "--checkpoint", &ckpt])?;
        let log: TrainLog = read_json(&w.join(&ckpt).join("train_log.json"))?;
        check!(log.sample_ids.len() == n, "{n}-shot run trained on {} samples", log.sample_ids.len());
        let text = mafr(w, &["eval", "--checkpoint", &ckpt, "--out", &out])?;
        for column in ["I-AUROC", "P-AUROC", "AUPRO@30%", "AUPRO@1%"] {
            check!(text.lines().any(|l| l.starts_with(&format!("{column}: "))), "{n}-shot report lacks {column}");
        }
        let report: EvalReport = read_json(&w.join(&out).join("report.json"))?;
        check!(report.p_auroc.is_some() && report.aupro.iter().all(|a| a.value.is_some()), "{n}-shot pixel metrics missing");
        i_auroc.insert(n, report.i_auroc);
    }
    let summary = format!("5-shot {:.4}, 10-shot {:.4}, 50-shot {:.4}", i_auroc[&5], i_auroc[&10], i_auroc[&50]);
    check!(i_auroc[&50] >= i_auroc[&5], "50-shot below 5-shot: {summary}");
    Ok(summary)
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let shared = TempDir::new().expect("tempdir");
    let work = shared.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        ("1 gradients", Box::new(gradients)),
        ("2 loss identities", Box::new(loss_identities)),
        ("3 metric oracles", Box::new(metrics)),
        ("4 end-to-end synthetic", Box::new({
            let w = work.clone();
            move || end_to_end(&w)
        })),
        ("5 ablation ordering", Box::new({
            let w = work.clone();
            move || ablation(&w)
        })),
        ("6 determinism", Box::new(determinism)),
        ("7 feature map round trip", Box::new(round_trip)),
        ("8 few-shot", Box::new(few_shot)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
