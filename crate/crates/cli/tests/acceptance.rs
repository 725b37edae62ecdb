//! Acceptance suite. Each criterion prints one PASS/FAIL line with the
//! measured value, its pinned tolerance and its runtime budget; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use ctxpaste::augment::{ranked_placements, select_placements, AugmentationConfig};
use ctxpaste::bank::{feasible_scale_interval, MatchQuery};
use ctxpaste::blend::{poisson_blend, PoissonResult};
use ctxpaste::context::{background_context, build_context_dataset, dataset_histogram, ContextGenParams, ContextualSample};
use ctxpaste::dataset_io::{write_labeled, LabeledImage};
use ctxpaste::geometry::BoundingBox;
use ctxpaste::raster::Mask;
use ctxpaste::scorer::{accuracy_on, loss_and_gradient, train_builtin, ContextScorer, FeatureSet, ScoreVector, TrainParams};
use ctxpaste::synth::{generate_heldout_scenes, generate_synthetic_dataset, run_benchmark, BenchConfig, SynthSpec, BENCH_SEEDS};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IOU_GRID_TOL: f64 = 2e-3;
const IOU_GRID_STEP: f64 = 0.002;
const BG_IOU_MAX: f64 = 0.3;
const MATCH_STEP: f64 = 0.001;
const MATCH_ENDPOINT_TOL: f64 = 1e-3;
const SCORE_THRESHOLD: f64 = 0.8;
const GRAD_REL_TOL: f64 = 1e-4;
const INTENSITY_ACC_MIN: f64 = 0.99;
const POISSON_TOL: f64 = 1e-3;
const DENSE_TOL: f64 = 1e-6;
const CONSISTENCY_MIN: f64 = 0.90;
const CHANCE_BAND: f64 = 0.1;

/// Outcome of one criterion: whether it held and what was measured.
type Verdict = (bool, String);

type Criterion = (&'static str, fn() -> Verdict, Duration);

fn fixture_spec(n_images: usize) -> SynthSpec {
    SynthSpec {
        n_images,
        n_heldout: 2,
        ..Default::default()
    }
}

/// Continuous IoU written out from coordinates, independent of the crate.
fn iou_direct(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    inter / union
}

/// Grid cells of side `IOU_GRID_STEP` whose centers fall in `[a, b)`.
fn cells(a: f64, b: f64, n: usize) -> usize {
    (0..n)
        .filter(|&k| {
            let c = (k as f64 + 0.5) * IOU_GRID_STEP;
            a <= c && c < b
        })
        .count()
}

fn grid_iou(a: &BoundingBox, b: &BoundingBox, n: usize) -> f64 {
    let area = |x0, y0, x1, y1| (cells(x0, x1, n) * cells(y0, y1, n)) as f64;
    let ia = area(a.x0.max(b.x0), a.y0.max(b.y0), a.x1.min(b.x1), a.y1.min(b.y1));
    let ua = area(a.x0, a.y0, a.x1, a.y1) + area(b.x0, b.y0, b.x1, b.y1) - ia;
    ia / ua
}

fn iou_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let extent = 64.0;
    let n = (extent / IOU_GRID_STEP) as usize;
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x0 = rng.random_range(0.0..extent - 4.0);
        let y0 = rng.random_range(0.0..extent - 4.0);
        let x1 = rng.random_range(x0 + 4.0..=extent);
        let y1 = rng.random_range(y0 + 4.0..=extent);
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = rand_box(&mut rng);
        // half the pairs overlap by construction
        let b = if rng.random_bool(0.5) {
            let d = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let b = BoundingBox::new(a.x0 + d.0, a.y0 + d.1, a.x1 + d.0, a.y1 + d.1).unwrap();
            b.clip(64, 64).filter(|c| c.width() >= 4.0 && c.height() >= 4.0).unwrap_or(a)
        } else {
            rand_box(&mut rng)
        };
        worst = worst.max((a.iou(&b) - grid_iou(&a, &b, n)).abs());
    }
    let x = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let shifted = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    let apart = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
    let examples = x.iou(&x) == 1.0 && x.iou(&apart) == 0.0 && x.iou(&shifted) == 1.0 / 3.0;
    (
        worst <= IOU_GRID_TOL && examples,
        format!("max |iou - grid| = {worst:.2e} (tol {IOU_GRID_TOL:.0e}), worked examples exact: {examples}"),
    )
}

fn background_validity() -> Verdict {
    let images = generate_synthetic_dataset(&fixture_spec(6)).unwrap();
    let classes = fixture_spec(6).class_names();
    let hist = dataset_histogram(images.iter().map(|r| &r.annotation)).unwrap();
    let params = ContextGenParams {
        out_size: 48,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    let mut labels_ok = true;
    for i in 0..500 {
        let rec = &images[i % images.len()];
        let gt: Vec<BoundingBox> = rec.annotation.boxes().copied().collect();
        let s = background_context(&rec.image, &gt, &hist, classes.len(), &params, &mut rng).unwrap();
        labels_ok &= s.label == classes.len();
        for g in &gt {
            worst = worst.max(iou_direct(g, &s.source_box));
        }
    }
    let samples = build_context_dataset(&images, &classes, &hist, &params, 12).unwrap();
    let bg = samples.iter().filter(|s| s.label == classes.len()).count();
    let pos = samples.len() - bg;
    let boxes: usize = images.iter().map(|r| r.annotation.objects.len()).sum();
    let ratio_ok = bg == 3 * pos && pos == params.contexts_per_box * boxes;
    (
        worst <= BG_IOU_MAX && labels_ok && ratio_ok,
        format!("500 backgrounds max IoU {worst:.4} (max {BG_IOU_MAX}); dataset {bg} background : {pos} positive"),
    )
}

fn matching() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let steps = ((1.5 - 0.5) / MATCH_STEP).round() as usize;
    let mut disagreements = 0;
    let mut feasible_pairs = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(8.0..160.0), rng.random_range(8.0..160.0));
        // half the candidates are near the instance's size, so many pairs are feasible
        let (cw, ch) = if rng.random_bool(0.5) {
            let f = rng.random_range(0.6..1.6);
            (w * f * rng.random_range(0.9..1.1), h * f * rng.random_range(0.9..1.1))
        } else {
            (rng.random_range(8.0..160.0), rng.random_range(8.0..160.0))
        };
        let q = MatchQuery::new(BoundingBox::new(0.0, 0.0, cw, ch).unwrap());
        let interval = feasible_scale_interval(w, h, &q);
        feasible_pairs += interval.is_some() as usize;
        for i in 0..=steps {
            let s = (500 + i) as f64 * MATCH_STEP;
            let brute = s * w <= cw && s * h <= ch && s * s * w * h >= 0.8 * cw * ch;
            let claimed = interval.is_some_and(|(lo, hi)| lo <= s && s <= hi);
            disagreements += (brute != claimed) as usize;
        }
    }
    let q = MatchQuery::new(BoundingBox::new(0.0, 0.0, 100.0, 100.0).unwrap());
    let (lo, hi) = feasible_scale_interval(60.0, 60.0, &q).unwrap_or((f64::NAN, f64::NAN));
    let endpoints = (lo - 1.4907).abs() <= MATCH_ENDPOINT_TOL && (hi - 1.5).abs() <= MATCH_ENDPOINT_TOL;
    (
        disagreements == 0 && endpoints,
        format!(
            "{disagreements} grid disagreements over 1000 pairs ({feasible_pairs} feasible); 60x60 in 100x100 -> [{lo:.4}, {hi:.4}] (±{MATCH_ENDPOINT_TOL:.0e})"
        ),
    )
}

/// Deterministic pseudo-scores spread around the threshold, with some
/// candidates landing exactly on it.
struct StubScorer {
    classes: Vec<String>,
    calls: AtomicUsize,
}

impl ContextScorer for StubScorer {
    fn class_names(&self) -> &[String] {
        &self.classes
    }

    fn score(&self, s: &ContextualSample) -> ctxpaste::Result<ScoreVector> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let b = s.source_box;
        let k = ((b.x0 * 7.0 + b.y0 * 13.0 + b.x1) as u64) % 5;
        let p = [0.5, 0.8, 0.81, 0.9, 0.99][k as usize];
        ScoreVector::new(vec![p, (1.0 - p) / 2.0, (1.0 - p) / 2.0])
    }
}

fn candidate_filter() -> Verdict {
    let spec = fixture_spec(6);
    let images = generate_synthetic_dataset(&spec).unwrap();
    let hist = dataset_histogram(images.iter().map(|r| &r.annotation)).unwrap();
    let scene = &generate_heldout_scenes(&spec).unwrap()[0];
    let scorer = StubScorer {
        classes: spec.class_names(),
        calls: AtomicUsize::new(0),
    };
    let cfg = AugmentationConfig {
        context: ContextGenParams {
            out_size: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut ok = cfg.candidates_per_image == 200 && cfg.score_threshold == SCORE_THRESHOLD && cfg.max_instances == 2;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let before = scorer.calls.load(Ordering::Relaxed);
        let (cands, ranked) = ranked_placements(&scene.image, &[], &hist, &scorer, &cfg, &mut rng).unwrap();
        let scored = scorer.calls.load(Ordering::Relaxed) - before;
        ok &= cands.len() == 200 && scored == 200;
        ok &= ranked.iter().all(|p| p.score > SCORE_THRESHOLD);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen = select_placements(&scene.image, &[], &hist, &scorer, &cfg, &mut rng).unwrap();
        ok &= !chosen.is_empty() && chosen.len() <= 2;
        for (i, a) in chosen.iter().enumerate() {
            ok &= a.score > SCORE_THRESHOLD;
            for b in &chosen[i + 1..] {
                ok &= iou_direct(&a.bbox, &b.bbox) <= 0.3;
            }
        }
        if seed == 0 {
            detail.push(format!("{} of 200 candidates above {SCORE_THRESHOLD}", ranked.len()));
        }
    }
    detail.push("10 seeds: 200 drawn and scored, <= 2 kept, all > 0.8, pairwise IoU <= 0.3".into());
    (ok, detail.join("; "))
}

fn scorer_training() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (dim, k) = (20, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut data = FeatureSet::new(dim);
        for i in 0..5 {
            data.push((0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(), i % k);
        }
        let weights: Vec<f64> = (0..(dim + 1) * k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let batch: Vec<usize> = (0..5).collect();
        let (_, grad) = loss_and_gradient(&weights, &data, &batch, k, 1e-4);
        let eps = 1e-4;
        for j in 0..weights.len() {
            let mut wp = weights.clone();
            wp[j] += eps;
            let mut wm = weights.clone();
            wm[j] -= eps;
            let fd = (loss_and_gradient(&wp, &data, &batch, k, 1e-4).0 - loss_and_gradient(&wm, &data, &batch, k, 1e-4).0)
                / (2.0 * eps);
            worst = worst.max((fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-8));
        }
    }

    // 500 samples labeled by mean intensity > 0.5
    let samples: Vec<ContextualSample> = (0..500)
        .map(|_| {
            let level: f64 = rng.random_range(0.05..0.95);
            let img = RgbImage::from_fn(48, 48, |_, _| {
                let v = (level * 255.0 + rng.random_range(-30.0..30.0)).clamp(0.0, 255.0) as u8;
                Rgb([v, v, v])
            });
            let mean = img.pixels().map(|p| p.0[0] as f64).sum::<f64>() / (48.0 * 48.0 * 255.0);
            let r = BoundingBox::from_pixels(0, 0, 48, 48);
            ContextualSample {
                pixels: img,
                masked_region: r,
                label: (mean > 0.5) as usize,
                source_box: r,
            }
        })
        .collect();
    let out = train_builtin(&samples, vec!["bright".into()], &TrainParams::default()).unwrap();
    let data = FeatureSet::from_samples(&samples, out.scorer.feature_size);
    let acc = accuracy_on(&out.scorer, &data, &out.train_indices);
    (
        worst <= GRAD_REL_TOL && acc >= INTENSITY_ACC_MIN,
        format!(
            "gradient max rel err {worst:.2e} (tol {GRAD_REL_TOL:.0e}); intensity-rule train accuracy {acc:.4} (min {INTENSITY_ACC_MIN})"
        ),
    )
}

/// Residual of the discrete Poisson equation recomputed from the images.
fn poisson_residual(bg: &RgbImage, src: &RgbImage, r: &PoissonResult, c: usize) -> f64 {
    let (w, h) = bg.dimensions();
    let solved: BTreeMap<(u32, u32), f64> = r.domain.iter().copied().zip(r.solution[c].iter().copied()).collect();
    let f = |x: u32, y: u32| solved.get(&(x, y)).copied().unwrap_or(bg.get_pixel(x, y).0[c] as f64);
    let g = |x: u32, y: u32| src.get_pixel(x, y).0[c] as f64;
    let mut worst: f64 = 0.0;
    for &(x, y) in &r.domain {
        let (mut lhs, mut rhs) = (4.0 * f(x, y), 4.0 * g(x, y));
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                lhs -= bg.get_pixel(x, y).0[c] as f64;
                rhs -= g(x, y);
            } else {
                lhs -= f(nx as u32, ny as u32);
                rhs -= g(nx as u32, ny as u32);
            }
        }
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let m = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= m * a[k][j];
            }
            b[i] -= m * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

fn poisson() -> Verdict {
    // constant source: the interior takes the boundary constant
    let bg = RgbImage::from_pixel(24, 24, Rgb([90, 140, 30]));
    let src = RgbImage::from_pixel(24, 24, Rgb([10, 200, 250]));
    let mask = Mask::from_fn(24, 24, |x, y| (4..20).contains(&x) && (3..21).contains(&y));
    let r = poisson_blend(&bg, &src, &mask, POISSON_TOL, 5000).unwrap();
    let consts = [90.0, 140.0, 30.0];
    let mut const_err: f64 = 0.0;
    for (c, sol) in r.solution.iter().enumerate() {
        for v in sol {
            const_err = const_err.max((v - consts[c]).abs());
        }
    }
    let const_ok = r.converged && const_err <= POISSON_TOL;

    // random scenes: converged solutions satisfy the equation to tol
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst_res: f64 = 0.0;
    let mut all_converged = true;
    for t in 0..4 {
        let bg = RgbImage::from_fn(20, 20, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let src = RgbImage::from_fn(20, 20, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let mask = Mask::from_fn(20, 20, |x, y| t == 3 || ((2..18).contains(&x) && (3..17).contains(&y) && (x * y) % 5 != 1));
        let r = poisson_blend(&bg, &src, &mask, POISSON_TOL, 10_000).unwrap();
        all_converged &= r.converged;
        if r.converged {
            for c in 0..3 {
                worst_res = worst_res.max(poisson_residual(&bg, &src, &r, c));
            }
        }
    }

    // one masked row against a dense direct solve
    let (w, h) = (16u32, 3u32);
    let src = RgbImage::from_fn(w, h, |x, _| Rgb([(12 + 14 * x) as u8; 3]));
    let bg = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let mask = Mask::from_fn(w, h, |x, y| y == 1 && (1..w - 1).contains(&x));
    let r = poisson_blend(&bg, &src, &mask, 1e-10, 1000).unwrap();
    let mut dense_err: f64 = 0.0;
    for c in 0..3 {
        let n = (w - 2) as usize;
        let px = |x: u32, y: u32| bg.get_pixel(x, y).0[c] as f64;
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            let x = i as u32 + 1;
            a[i][i] = 4.0;
            b[i] = px(x, 0) + px(x, 2);
            if i > 0 {
                a[i][i - 1] = -1.0;
            } else {
                b[i] += px(0, 1);
            }
            if i + 1 < n {
                a[i][i + 1] = -1.0;
            } else {
                b[i] += px(w - 1, 1);
            }
        }
        for (v, e) in r.solution[c].iter().zip(dense_solve(a, b)) {
            dense_err = dense_err.max((v - e).abs());
        }
    }
    (
        const_ok && all_converged && worst_res <= POISSON_TOL && dense_err <= DENSE_TOL,
        format!(
            "constant case err {const_err:.1e}; residual {worst_res:.1e} (tol {POISSON_TOL:.0e}); row vs dense {dense_err:.1e} (tol {DENSE_TOL:.0e})"
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn ctxpaste(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_ctxpaste"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "ctxpaste {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let images: Vec<LabeledImage> = generate_synthetic_dataset(&fixture_spec(8)).unwrap();
    for rec in &images {
        write_labeled(rec, Path::new(&p("data"))).unwrap();
    }
    ctxpaste(&["build-bank", "--dataset", &p("data"), "--out", &p("bank")]);
    ctxpaste(&["gen-contexts", "--dataset", &p("data"), "--out", &p("ctx"), "--size", "32", "--seed", "7"]);
    ctxpaste(&["train-scorer", "--contexts", &p("ctx"), "--out", &p("scorer.bin"), "--seed", "7"]);
    let augment = |out: &str, jobs: &str| {
        ctxpaste(&[
            "augment", "--dataset", &p("data"), "--bank", &p("bank"), "--contexts", &p("ctx"), "--scorer",
            &p("scorer.bin"), "--mode", "context", "--seed", "7", "--paste-prob", "1", "--jobs", jobs, "--out", &p(out),
        ])
    };
    let summary = augment("o1", "0");
    augment("o2", "0");
    augment("o3", "1");
    let (a, b, c) = (tree(Path::new(&p("o1"))), tree(Path::new(&p("o2"))), tree(Path::new(&p("o3"))));
    let pasted = serde_json::from_str::<serde_json::Value>(&summary).unwrap()["objects_pasted"]
        .as_u64()
        .unwrap_or(0);
    (
        !a.is_empty() && a == b && a == c && pasted > 0,
        format!("{} files identical across two runs and --jobs 1 ({pasted} objects pasted)", a.len()),
    )
}

fn synthetic_benchmark() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in BENCH_SEEDS {
        let spec = SynthSpec {
            seed,
            ..Default::default()
        };
        let r = run_benchmark(&spec, &BenchConfig::default()).unwrap();
        ok &= r.context_consistency >= CONSISTENCY_MIN
            && (r.random_consistency - r.random_chance).abs() <= CHANCE_BAND
            && r.context_consistency > r.random_consistency
            && r.context_pastes > 0
            && r.random_pastes > 0;
        parts.push(format!(
            "seed {seed}: context {:.3} (n={}), random {:.3} vs chance {:.3} (n={})",
            r.context_consistency, r.context_pastes, r.random_consistency, r.random_chance, r.random_pastes
        ));
    }
    parts.push(format!("need context >= {CONSISTENCY_MIN}, |random - chance| <= {CHANCE_BAND}"));
    (ok, parts.join("; "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("iou-oracle", iou_oracle, Duration::from_secs(5)),
        ("background-validity", background_validity, Duration::from_secs(30)),
        ("matching", matching, Duration::from_secs(10)),
        ("candidate-filter", candidate_filter, Duration::from_secs(5)),
        ("scorer-gradient-and-training", scorer_training, Duration::from_secs(60)),
        ("poisson", poisson, Duration::from_secs(30)),
        ("determinism", determinism, Duration::from_secs(60)),
        ("synthetic-benchmark", synthetic_benchmark, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok((ok, detail)) => (ok && elapsed <= budget, detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += !ok as usize;
        println!(
            "{} {name}: {detail} [{:.2}s, budget {}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
