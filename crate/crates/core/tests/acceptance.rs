//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bindkit::encoders::{EncoderHandle, Modality, Record};
use bindkit::experiment::{initial_encoders, modality_data, patch_task, pretrain_stage, run_experiment, ExperimentConfig, Run};
use bindkit::inference::{parse_pgm16, parse_range_csv, random_unit_embeddings, range_map, recall_curve, score_to_level, Gallery, GridSpec, RangeGrid};
use bindkit::numcore::{ParamVector, SeededRng};
use bindkit::objective::{gradcheck_suite, random_unit_batch, supcon_clip_value, ContrastiveBatch, LossConfig, GRADCHECK_TEMPERATURES};
use bindkit::patching::{interpolate, sequential_patch, ModalityData, PatchPlan};
use bindkit::synthdata::World;
use bindkit::training::{locked_tune, Checkpoint};

const TREND_SEEDS: [u64; 3] = [0, 1, 2];

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

fn report(n: usize, v: &Verdict, failed: &mut Vec<usize>) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2}: {tag}  {}", v.detail);
    if !v.pass {
        failed.push(n);
    }
}

// ---------- 1: gradient exactness ----------

fn gradient_exactness() -> Verdict {
    let t = Instant::now();
    let cases = match gradcheck_suite(0, 100) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("gradcheck error: {e}")),
    };
    let elapsed = t.elapsed();
    let shapes_ok = cases.iter().all(|c| c.n <= 8 && c.d <= 16 && GRADCHECK_TEMPERATURES.contains(&c.temperature));
    let temps_covered = GRADCHECK_TEMPERATURES.iter().all(|t| cases.iter().any(|c| c.temperature == *t));
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let finite = cases.iter().all(|c| c.max_rel_error.is_finite());
    verdict(
        cases.len() == 100 && shapes_ok && temps_covered && finite && worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{} batches, max relative error {worst:.3e}, {:.2}s", cases.len(), elapsed.as_secs_f64()),
    )
}

// ---------- 2: loss reductions ----------

fn sim(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Symmetric InfoNCE with diagonal positives, summed over anchors.
fn info_nce(z: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> f64 {
    let one_way = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for i in 0..a.len() {
            let logits: Vec<f64> = b.iter().map(|bj| sim(&a[i], bj) / tau).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[i];
        }
        total
    };
    0.5 * (one_way(z, y) + one_way(y, z))
}

fn loss_reductions() -> Verdict {
    let mut worst_nce: f64 = 0.0;
    let mut worst_swap: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    let mut single_zero = true;
    for case in 0..60u64 {
        let mut rng = SeededRng::new(case).fork_named("acceptance.loss");
        let n = 2 + rng.below(7);
        let d = 2 + rng.below(15);
        let tau = GRADCHECK_TEMPERATURES[case as usize % 3];
        let cfg = LossConfig::with_temperature(tau);

        let mut distinct = random_unit_batch(&mut rng, n, d, 1, 0);
        distinct.labels = (0..n).collect();
        let got = supcon_clip_value(&distinct, &cfg).unwrap();
        worst_nce = worst_nce.max((got - info_nce(&distinct.z, &distinct.y, tau)).abs());

        let single = random_unit_batch(&mut rng, 1, d, 1, 0);
        single_zero &= supcon_clip_value(&single, &cfg).unwrap() == 0.0;

        let classes = 1 + rng.below(n);
        let b = random_unit_batch(&mut rng, n, d, classes, 0);
        let swapped = ContrastiveBatch::new(b.y.clone(), b.z.clone(), b.labels.clone());
        let base = supcon_clip_value(&b, &cfg).unwrap();
        worst_swap = worst_swap.max((base - supcon_clip_value(&swapped, &cfg).unwrap()).abs());

        let classes = 1 + rng.below(n);
        let with_pn = random_unit_batch(&mut rng, n, d, classes, 3);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut pn = with_pn.pseudo_negatives.clone();
        pn.reverse();
        let permuted = ContrastiveBatch {
            z: order.iter().map(|&i| with_pn.z[i].clone()).collect(),
            y: order.iter().map(|&i| with_pn.y[i].clone()).collect(),
            labels: order.iter().map(|&i| with_pn.labels[i]).collect(),
            pseudo_negatives: pn,
        };
        let a = supcon_clip_value(&with_pn, &cfg).unwrap();
        worst_perm = worst_perm.max((a - supcon_clip_value(&permuted, &cfg).unwrap()).abs());
    }
    verdict(
        worst_nce <= 1e-9 && single_zero && worst_swap <= 1e-12 && worst_perm <= 1e-12,
        format!(
            "InfoNCE gap {worst_nce:.2e}, N=1 exactly zero: {single_zero}, swap gap {worst_swap:.2e}, permutation gap {worst_perm:.2e}"
        ),
    )
}

// ---------- 3: interpolation identities ----------

fn bits(p: &ParamVector) -> Vec<u64> {
    p.values().iter().map(|v| v.to_bits()).collect()
}

fn interpolation_identities() -> Verdict {
    let cfg = common::small_config(11);
    let (ds, splits) = common::world_data(&cfg);
    let mut endpoints = true;
    for (k, m) in [Modality::Location, Modality::Satellite, Modality::Env, Modality::Audio].into_iter().enumerate() {
        let a = cfg.model.modality_encoder(m, &ds.dims, &mut SeededRng::new(k as u64)).unwrap();
        let b = cfg.model.modality_encoder(m, &ds.dims, &mut SeededRng::new(100 + k as u64)).unwrap();
        endpoints &= bits(&interpolate(a.params(), b.params(), 0.0).unwrap()) == bits(a.params());
        endpoints &= bits(&interpolate(a.params(), b.params(), 1.0).unwrap()) == bits(b.params());
    }

    let pre = pretrain_stage(&cfg, &ds, &splits).unwrap();
    let f = pre.image.clone();
    let plan = PatchPlan {
        alpha_grid: vec![0.0],
        beta_grid: vec![0.0],
        ..cfg.plan.clone()
    };
    let data: BTreeMap<Modality, ModalityData> = plan.order.iter().map(|&m| (m, modality_data(&ds, &splits, m))).collect();
    let initial = initial_encoders(&cfg, &ds.dims).unwrap();
    let task = patch_task(&ds, &splits, &pre.prototypes).unwrap();
    let result = sequential_patch(&f, &initial, &data, &plan, &task, &cfg.tune).unwrap();

    // Locked-only baseline built independently of the patching code.
    let baseline: Vec<EncoderHandle> = plan
        .order
        .iter()
        .map(|m| locked_tune(&f, initial[m].clone(), &data[m].train, &data[m].val, &cfg.tune).unwrap().0)
        .collect();
    let ckpt = |binding: &EncoderHandle, hs: &[EncoderHandle]| {
        let mut all = vec![binding.clone()];
        all.extend(hs.iter().cloned());
        Checkpoint::new(all, Some(pre.prototypes.clone()), cfg.tune.config_hash(), Vec::new()).unwrap().encode()
    };
    let binding_same = bits(result.binding.params()) == bits(f.params());
    let encoders_same = result.encoders.len() == baseline.len()
        && result.encoders.iter().zip(&baseline).all(|(a, b)| bits(a.params()) == bits(b.params()));
    let ckpt_same = ckpt(&result.binding, &result.encoders) == ckpt(&f, &baseline);
    verdict(
        endpoints && binding_same && encoders_same && ckpt_same,
        format!("endpoints bitwise: {endpoints}, grids {{0}} binding/encoders/checkpoint identical: {binding_same}/{encoders_same}/{ckpt_same}"),
    )
}

// ---------- 4-8: shared trend runs ----------

struct Trends {
    runs: Vec<Run>,
    elapsed: Duration,
}

fn trend_runs() -> Trends {
    let t = Instant::now();
    let base = ExperimentConfig::default();
    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = TREND_SEEDS
            .iter()
            .map(|&seed| {
                let cfg = base.with_seed(seed);
                s.spawn(move || run_experiment(&cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    });
    let elapsed = t.elapsed();
    let runs = runs
        .into_iter()
        .map(|r| r.unwrap_or_else(|e| panic!("trend run failed: {e}")))
        .collect();
    Trends { runs, elapsed }
}

fn argmax_dominance(tr: &Trends) -> Verdict {
    let mut ok = true;
    let mut steps = 0;
    for r in &tr.runs {
        let mut prev = None;
        for s in &r.patch.steps {
            ok &= s.accuracy_after >= s.accuracy_before;
            if let Some(p) = prev {
                ok &= s.accuracy_before == p;
            }
            prev = Some(s.accuracy_after);
            steps += 1;
        }
    }
    let traces: Vec<String> = tr
        .runs
        .iter()
        .map(|r| r.outcome.task_accuracy.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(">"))
        .collect();
    verdict(ok && steps > 0, format!("{steps} steps non-decreasing: {ok}; task accuracy {}", traces.join(" | ")))
}

fn patching_beats_locked(tr: &Trends) -> Verdict {
    let gains: Vec<f64> = tr.runs.iter().map(|r| r.outcome.sequential - r.outcome.locked_only).collect();
    let wins = gains.iter().filter(|g| **g >= 0.0).count();
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let per: Vec<String> = tr
        .runs
        .iter()
        .map(|r| format!("{:.3}->{:.3}", r.outcome.locked_only, r.outcome.sequential))
        .collect();
    verdict(
        wins >= 2 && mean > 0.0 && tr.elapsed < Duration::from_secs(600),
        format!(
            "seq >= locked in {wins}/3, mean gain {mean:+.4}, runtime {:.1}s [{}]",
            tr.elapsed.as_secs_f64(),
            per.join(", ")
        ),
    )
}

fn sequential_beats_parallel_and_single(tr: &Trends) -> Verdict {
    let mut wins = 0;
    let mut per = Vec::new();
    for r in &tr.runs {
        let o = &r.outcome;
        let ok = o.sequential >= o.parallel && o.single.iter().all(|s| o.sequential >= s.1);
        wins += ok as usize;
        per.push(format!("seq {:.3} par {:.3} best single {:.3}", o.sequential, o.parallel, o.best_single()));
    }
    verdict(wins >= 2, format!("{wins}/3 seeds [{}]", per.join("; ")))
}

fn addition_helps(tr: &Trends) -> Verdict {
    let mut wins = 0;
    let mut per = Vec::new();
    for r in &tr.runs {
        let o = &r.outcome;
        wins += (o.image_location >= o.image_only && o.image_satellite >= o.image_only) as usize;
        per.push(format!("img {:.3} +loc {:.3} +sat {:.3}", o.image_only, o.image_location, o.image_satellite));
    }
    verdict(wins >= 2, format!("{wins}/3 seeds [{}]", per.join("; ")))
}

fn random_recall(g: usize, dim: usize) -> (bool, String) {
    let root = SeededRng::new(g as u64).fork_named("acceptance.random");
    let q = random_unit_embeddings(g, dim, &mut root.fork(0));
    let gallery = Gallery::indexed(random_unit_embeddings(g, dim, &mut root.fork(1))).unwrap();
    let gt: Vec<Option<u64>> = (0..g as u64).map(Some).collect();
    let ks = [1, 5, 10];
    let r = recall_curve(&q, &gallery, &gt, &ks).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, got) in ks.iter().zip(&r) {
        let p = *k as f64 / g as f64;
        let sigma = (p * (1.0 - p) / g as f64).sqrt();
        ok &= (got - p).abs() <= 3.0 * sigma;
        parts.push(format!("R@{k} {got:.5} (k/G {p:.5})"));
    }
    (ok, format!("G={g}: {}", parts.join(" ")))
}

fn retrieval_calibration(tr: &Trends) -> Verdict {
    let dim = ExperimentConfig::default().model.embed_dim;
    let (ok100, d100) = random_recall(100, dim);
    let (ok8813, d8813) = random_recall(8813, dim);
    let mut wins = 0;
    let mut per = Vec::new();
    for r in &tr.runs {
        let o = &r.outcome;
        wins += (o.sat_env_recall[0] >= 5.0 * o.random_r1()) as usize;
        per.push(format!("{:.3} vs {:.4}", o.sat_env_recall[0], o.random_r1()));
    }
    verdict(
        ok100 && ok8813 && wins >= 2,
        format!("{d100}; {d8813}; sat->env R@1 >= 5x random in {wins}/3 [{}]", per.join(", ")),
    )
}

// ---------- 9: range map ----------

fn range_map_checks(tr: &Trends) -> Verdict {
    let (grid, enc, query) = common::golden_grid();
    let (sr, sc) = common::GOLDEN_SELF_CELL;
    let self_ok = (grid.score(sr, sc) - 1.0).abs() <= 1e-9;

    let mut oracle_ok = true;
    for r in 0..4 {
        for c in 0..4 {
            let lat = 90.0 - (r as f64 + 0.5) * 45.0;
            let lon = -180.0 + (c as f64 + 0.5) * 90.0;
            let e = enc.encode(&Record::Location { lat, lon }).unwrap();
            let want = sim(&query, &e).clamp(-1.0, 1.0);
            oracle_ok &= grid.score(r, c).to_bits() == want.to_bits();
        }
    }

    // Trained location + satellite encoders on a finer grid.
    let run = &tr.runs[0];
    let world = World::new(&ExperimentConfig::default().with_seed(TREND_SEEDS[0]).world).unwrap();
    let find = |m: Modality| run.patch.encoders.iter().find(|e| e.modality() == m).unwrap();
    let img = run.patch.binding.encode(&run.dataset.samples[run.splits.test[0]].record(Modality::Image).unwrap()).unwrap();
    let spec = GridSpec::global(18, 36);
    let loc_only = range_map(&img, &spec, find(Modality::Location), None, false).unwrap();
    let combined = range_map(&img, &spec, find(Modality::Location), Some((find(Modality::Satellite), &world)), true).unwrap();
    let in_range = |g: &RangeGrid| g.scores.iter().all(|v| v.is_nan() || (-1.0..=1.0).contains(v));
    let range_ok = in_range(&grid) && in_range(&loc_only) && in_range(&combined);

    let dir = common::golden_dir();
    let golden_csv = std::fs::read(dir.join("range_4x4.csv")).unwrap_or_default();
    let golden_pgm = std::fs::read(dir.join("range_4x4.pgm")).unwrap_or_default();
    let golden_side = std::fs::read(dir.join("range_4x4.pgm.txt")).unwrap_or_default();
    let bytes_ok = grid.to_csv().as_bytes() == golden_csv && grid.to_pgm() == golden_pgm && grid.pgm_sidecar().as_bytes() == golden_side;
    let round_trip = match (parse_range_csv(&String::from_utf8_lossy(&golden_csv)), parse_pgm16(&golden_pgm)) {
        (Ok(cells), Ok((4, 4, levels))) => {
            let back = RangeGrid {
                spec: grid.spec,
                scores: cells.iter().map(|c| c.2.unwrap_or(f64::NAN)).collect(),
            };
            back.to_csv().as_bytes() == golden_csv
                && back.to_pgm() == golden_pgm
                && levels == back.scores.iter().map(|&v| score_to_level(v)).collect::<Vec<_>>()
        }
        _ => false,
    };
    verdict(
        self_ok && oracle_ok && range_ok && bytes_ok && round_trip,
        format!(
            "self cell {:.12}, oracle exact: {oracle_ok}, scores in [-1,1]: {range_ok}, golden bytes: {bytes_ok}, round trip: {round_trip}",
            grid.score(sr, sc)
        ),
    )
}

// ---------- 10: CLI reproducibility ----------

fn cli_pipeline(dir: &Path, threads: Option<&str>) -> Result<Vec<String>, String> {
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    let ds = p("data/dataset.bin");
    let pre = p("pre/pretrain.ckpt");
    let ls = p("ls/locked.ckpt");
    let le = p("le/locked.ckpt");
    let patched = p("seq/patched.ckpt");
    let steps: Vec<Vec<String>> = [
        vec!["gen-data", "--out", &p("data")],
        vec!["pretrain", "--data", &ds, "--out", &p("pre")],
        vec!["bind-locked", "--data", &ds, "--ckpt", &pre, "--modality", "sat", "--out", &p("ls")],
        vec!["bind-locked", "--data", &ds, "--ckpt", &ls, "--modality", "env", "--out", &p("le")],
        vec!["bind-unlocked", "--data", &ds, "--ckpt", &ls, "--modality", "sat", "--out", &p("us")],
        vec!["patch-sequential", "--data", &ds, "--ckpt", &pre, "--out", &p("seq")],
        vec!["patch-parallel", "--data", &ds, "--ckpt", &pre, "--out", &p("par")],
        vec!["eval-zeroshot", "--data", &ds, "--ckpt", &patched, "--out", &p("zs")],
        vec!["eval-retrieval", "--data", &ds, "--ckpt", &le, "--query", "sat", "--gallery", "env", "--out", &p("ret")],
        vec!["eval-retrieval", "--random-baseline", "--out", &p("rnd")],
        vec!["range-map", "--data", &ds, "--ckpt", &patched, "--out", &p("rm"), "--set", "range.combine=true"],
        vec!["gradcheck", "--out", &p("gc")],
    ]
    .iter()
    .map(|v| v.iter().map(|s| s.to_string()).collect())
    .collect();
    let mut stdout = Vec::new();
    for args in steps {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bindkit"));
        cmd.args(&args).args(common::FAST).env("RUST_LOG", "off");
        match threads {
            Some(t) => cmd.env("BINDKIT_THREADS", t),
            None => cmd.env_remove("BINDKIT_THREADS"),
        };
        let out = cmd.output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        stdout.push(String::from_utf8_lossy(&out.stdout).into_owned());
    }
    Ok(stdout)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn cli_reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let (sa, sb) = match (cli_pipeline(&a, None), cli_pipeline(&b, Some("1"))) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return verdict(false, format!("command failed: {e}")),
    };
    let fa = files_under(&a);
    let fb = files_under(&b);
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let ok = fa == fb && differing.is_empty() && sa == sb && !fa.is_empty();
    verdict(
        ok,
        format!(
            "{} commands, {} output files, stdout identical: {}, differing files: {:?}",
            sa.len(),
            fa.len(),
            sa == sb,
            differing
        ),
    )
}

fn main() {
    // Ignore harness flags such as --nocapture or test filters.
    let started = Instant::now();
    let mut failed = Vec::new();
    report(1, &gradient_exactness(), &mut failed);
    report(2, &loss_reductions(), &mut failed);
    report(3, &interpolation_identities(), &mut failed);
    let trends = trend_runs();
    report(4, &argmax_dominance(&trends), &mut failed);
    report(5, &patching_beats_locked(&trends), &mut failed);
    report(6, &sequential_beats_parallel_and_single(&trends), &mut failed);
    report(7, &addition_helps(&trends), &mut failed);
    report(8, &retrieval_calibration(&trends), &mut failed);
    report(9, &range_map_checks(&trends), &mut failed);
    report(10, &cli_reproducibility(), &mut failed);
    println!(
        "acceptance: {}/10 passed in {:.1}s",
        10 - failed.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
