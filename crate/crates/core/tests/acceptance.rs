//! Acceptance criteria, each at its pinned tolerance. Every test prints one
//! `PASS`/`FAIL` line before asserting.
//!
//! Criteria 4 and 6 to 8 need a labeled dataset. When
//! `SUPERDIFF_MSRA10K_SUBSET` points at a dataset root in the standard
//! layout its first 200 images are used; otherwise a procedurally generated
//! 200-image dataset stands in. The printed lines say which.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use image::GrayImage;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superdiff::dataset::{Dataset, PreparedImage, Split};
use superdiff::eval::experiments::{ablate, cose, promote, AblationReport, MatrixChoice};
use superdiff::eval::omp::{adapted_omp, DEFAULT_BIN_THRESHOLD, OMP_MAX_ITERATIONS};
use superdiff::graph::{SaliencyGraph, DAMPING};
use superdiff::refine::{normalize_for_seed, refine_matrix, RefineParams};
use superdiff::spectral::{decompose, diffusion_apply, neumann_check};
use superdiff::synth::{generate_dataset, noisy_seed_map, SynthConfig, NOISY_SEED_METHOD};
use superdiff::train::{fit_weights, training_loss, ColumnBank, GridSettings};

/// Written straight to stdout so the line shows even when output is captured.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").and_then(|_| out.flush()).expect("stdout");
}

fn report(criterion: u32, name: &str, ok: bool, detail: &str) {
    emit(&format!(
        "criterion {criterion} ({name}): {} | {detail}",
        if ok { "PASS" } else { "FAIL" }
    ));
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> SaliencyGraph {
    let density = rng.random_range(0.2..0.8);
    let mut w = DMatrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            // A path keeps the graph connected.
            if j == i + 1 || rng.random::<f64>() < density {
                let v = rng.random_range(0.05..1.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
    }
    SaliencyGraph::from_weights(w).unwrap()
}

fn column_distance_up_to_sign(a: &DMatrix<f64>, b: &DMatrix<f64>, l: usize) -> f64 {
    let (x, y) = (a.column(l), b.column(l));
    (x - y).amax().min((x + y).amax())
}

#[test]
fn criterion_1_spectral_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut shift_err, mut vec_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(3..=30);
        let g = random_graph(&mut rng, n);
        let plain = decompose(&g.damped_rw_laplacian(1.0), Some(g.degree())).unwrap();
        let damped = decompose(&g.damped_rw_laplacian(DAMPING), Some(g.degree())).unwrap();
        for l in 0..n {
            shift_err = shift_err.max((damped.eigenvalues()[l] - (0.99 * plain.eigenvalues()[l] + 0.01)).abs());
            vec_err = vec_err.max(column_distance_up_to_sign(
                plain.eigenvectors(),
                damped.eigenvectors(),
                l,
            ));
        }
    }

    let mut neumann_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(3..=30);
        let g = random_graph(&mut rng, n);
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let direct = g.damped_rw_laplacian(DAMPING).lu().solve(&x).unwrap();
        neumann_err = neumann_err.max((neumann_check(&g, &x, 5000) - direct).amax());
    }

    let mut inverse_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(3..=30);
        let g = random_graph(&mut rng, n);
        let l_tilde = g.damped_laplacian(DAMPING);
        let dec = decompose(&l_tilde, None).unwrap();
        let s = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let direct = l_tilde.clone().cholesky().unwrap().solve(&s);
        inverse_err = inverse_err.max((diffusion_apply(&dec, &s).unwrap() - direct).amax());
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = shift_err <= 1e-8 && vec_err <= 1e-8 && neumann_err <= 1e-6 && inverse_err <= 1e-8 && secs < 10.0;
    report(
        1,
        "spectral identities",
        ok,
        &format!(
            "eigenvalue shift {shift_err:.2e}, eigenvectors {vec_err:.2e} (tol 1e-8); Neumann {neumann_err:.2e} (tol 1e-6); \
             symmetric inverse {inverse_err:.2e} (tol 1e-8); {secs:.2}s (limit 10s)"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_2_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut form_err, mut range_err) = (0.0f64, 0.0f64);
    let mut cases = 0;
    while cases < 100 {
        let n = rng.random_range(5..=30);
        let g = random_graph(&mut rng, n);
        let dec = decompose(&g.damped_rw_laplacian(DAMPING), Some(g.degree())).unwrap();
        let params = RefineParams {
            var_threshold: rng.random_range(0.0..0.3),
            ..RefineParams::default()
        };
        let refined = refine_matrix(&dec, &params).unwrap();
        let s = DVector::from_fn(n, |_, _| {
            if rng.random::<f64>() < 0.3 {
                0.0
            } else {
                rng.random::<f64>()
            }
        });
        if s.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (nd, y_hat) = normalize_for_seed(&refined, &s).unwrap();
        let y_bar = refined.apply(&s);
        let (p, q) = (y_bar.min(), y_bar.max());
        let Some(m) = nd.matrix() else {
            continue;
        };
        let oracle = y_bar.map(|v| (v - p) / (q - p));
        form_err = form_err.max((&m * &s - &oracle).amax());
        form_err = form_err.max((&y_hat - &oracle).amax());
        range_err = range_err.max(y_hat.min().abs()).max((y_hat.max() - 1.0).abs());
        cases += 1;
    }
    let ok = form_err <= 1e-10 && range_err <= 1e-9;
    report(
        2,
        "normalization",
        ok,
        &format!(
            "{cases} cases: matrix form vs min-max {form_err:.2e} (tol 1e-10), endpoints {range_err:.2e} (tol 1e-9)"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_3_closed_form_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (n, c, l) = (10, 5, 3);
    let layout = GridSettings {
        sigma2_list: (0..c).map(|k| 10.0 + k as f64).collect(),
        spaces: vec![superdiff::ingest::ColorSpace::Lab],
        gaussian_variances: vec![1.0],
        absorbed_time: false,
        ..GridSettings::default()
    }
    .layout();
    let (mut oracle_err, mut worst_gap) = (0.0f64, f64::INFINITY);
    for _ in 0..20 {
        let banks: Vec<ColumnBank> = (0..l)
            .map(|_| ColumnBank {
                columns: DMatrix::from_fn(n, c, |_, _| rng.random::<f64>()),
                labels: layout.clone(),
            })
            .collect();
        let gts: Vec<DVector<f64>> = (0..l)
            .map(|_| DVector::from_fn(n, |_, _| f64::from(u8::from(rng.random::<bool>()))))
            .collect();
        let w = fit_weights(&banks, &gts).unwrap();

        // Oracle: SVD least squares on the stacked system.
        let mut a = DMatrix::zeros(n * l, c);
        let mut b = DVector::zeros(n * l);
        for (i, (bank, gt)) in banks.iter().zip(&gts).enumerate() {
            a.rows_mut(i * n, n).copy_from(&bank.columns);
            b.rows_mut(i * n, n).copy_from(gt);
        }
        let oracle = a.svd(true, true).solve(&b, 1e-14).unwrap();
        oracle_err = oracle_err.max((DVector::from_column_slice(&w.w) - oracle).amax());

        let j_star = training_loss(&banks, &gts, &w.w).unwrap();
        for _ in 0..100 {
            let scale = 10f64.powi(rng.random_range(-4..1));
            let perturbed: Vec<f64> = w.w.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
            worst_gap = worst_gap.min(training_loss(&banks, &gts, &perturbed).unwrap() - j_star);
        }
    }
    let ok = oracle_err <= 1e-6 && worst_gap >= 0.0;
    report(
        3,
        "closed-form training",
        ok,
        &format!("max |w - w_oracle| {oracle_err:.2e} (tol 1e-6); min J(w*+d) - J(w*) over 2000 perturbations {worst_gap:.2e} (must be >= 0)"),
    );
    assert!(ok);
}

#[test]
fn criterion_5_adapted_omp() {
    let m = 4usize;
    let mut gt = DVector::zeros(10);
    for i in [1, 4, 6, 9] {
        gt[i] = 1.0;
    }
    let r = adapted_omp(&DMatrix::identity(10, 10), &gt, 0.0, DEFAULT_BIN_THRESHOLD).unwrap();
    let mut closed_err = if r.trace.len() == m + 1 { 0.0f64 } else { f64::INFINITY };
    for (i, &(_, a)) in r.trace.iter().enumerate() {
        let mf = m as f64;
        let i = i as f64;
        closed_err = closed_err.max((a - (mf.sqrt() - (mf - i).max(0.0).sqrt()) / mf.sqrt()).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut violations = Vec::new();
    for case in 0..40 {
        let n = if case % 4 == 0 {
            rng.random_range(120..160)
        } else {
            rng.random_range(5..40)
        };
        let dict = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0 + rng.random::<f64>()
            } else {
                rng.random_range(-0.3..0.6)
            }
        });
        let gt = DVector::from_fn(n, |_, _| f64::from(u8::from(rng.random::<f64>() < 0.7)));
        if gt.sum() == 0.0 {
            continue;
        }
        let res = adapted_omp(&dict, &gt, 0.0, DEFAULT_BIN_THRESHOLD).unwrap();
        let n_fg = gt.sum() as usize;
        if res.seed.iter().any(|&v| v < 0.0) {
            violations.push(format!("case {case}: negative seed"));
        }
        if res.seed.iter().enumerate().any(|(i, &v)| v != 0.0 && gt[i] == 0.0) {
            violations.push(format!("case {case}: seed outside foreground"));
        }
        if res.selected.iter().any(|&i| gt[i] == 0.0) {
            violations.push(format!("case {case}: selected background node"));
        }
        if res.selected.len() > OMP_MAX_ITERATIONS.min(n_fg) {
            violations.push(format!("case {case}: {} iterations", res.selected.len()));
        }
        if res.ls_residuals.windows(2).any(|w| w[1] > w[0] + 1e-9 * w[0].max(1.0)) {
            violations.push(format!("case {case}: least-squares residual increased"));
        }
    }
    let ok = closed_err <= 1e-12 && violations.is_empty();
    report(
        5,
        "adapted OMP",
        ok,
        &format!(
            "identity m=4 trace error {closed_err:.2e} (tol 1e-12); random dictionaries: {}",
            if violations.is_empty() {
                "all invariants hold".to_string()
            } else {
                violations.join("; ")
            }
        ),
    );
    assert!(ok);
}

struct Shared {
    // Keeps a generated dataset on disk for the test run.
    _dir: Option<tempfile::TempDir>,
    label: String,
    dataset: Dataset,
    settings: GridSettings,
    images: Vec<PreparedImage>,
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let settings = GridSettings {
            use_features: true,
            ..GridSettings::default()
        };
        let (dir, label, dataset) = match std::env::var_os("SUPERDIFF_MSRA10K_SUBSET") {
            Some(root) => {
                let ds = Dataset::open(PathBuf::from(&root)).unwrap().truncated(200);
                (
                    None,
                    format!("dataset {} ({} images)", PathBuf::from(root).display(), ds.len()),
                    ds,
                )
            }
            None => {
                let dir = tempfile::tempdir().unwrap();
                let cfg = SynthConfig {
                    slic: settings.slic,
                    ..SynthConfig::default()
                };
                let ds = generate_dataset(dir.path(), &cfg).unwrap();
                let label = format!(
                    "synthetic stand-in, MSRA10K not available ({} images, {}x{})",
                    ds.len(),
                    cfg.width,
                    cfg.height
                );
                (Some(dir), label, ds)
            }
        };
        let images = dataset
            .ids()
            .iter()
            .map(|id| match dataset.prepare(id, &settings.slic, true) {
                Ok(im) => im,
                Err(superdiff::Error::FeatureMissing(_)) => dataset.prepare(id, &settings.slic, false).unwrap(),
                Err(e) => panic!("{id}: {e}"),
            })
            .collect();
        Shared {
            _dir: dir,
            label,
            dataset,
            settings,
            images,
        }
    })
}

fn split(images: &[PreparedImage]) -> (Vec<PreparedImage>, Vec<PreparedImage>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, im) in images.iter().enumerate() {
        if i % 2 == 0 {
            train.push(im.clone());
        } else {
            test.push(im.clone());
        }
    }
    (train, test)
}

fn ablation_report(images: &[PreparedImage], settings: &GridSettings) -> AblationReport {
    let (train, test) = split(images);
    ablate(&train, &test, settings).unwrap()
}

#[test]
fn criterion_4_nested_monotonicity() {
    let sh = shared();
    let subset = &sh.images[..50.min(sh.images.len())];
    let rep = ablation_report(subset, &sh.settings);
    let losses: Vec<(String, f64)> = ["S4", "S5", "S6", "S7"]
        .iter()
        .filter_map(|s| rep.stage(s).and_then(|r| r.training_loss.map(|j| (s.to_string(), j))))
        .collect();
    let monotone = losses.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9 * w[0].1.max(1.0));
    let ok = losses.len() == 4 && monotone;
    let detail: Vec<String> = losses.iter().map(|(s, j)| format!("J({s})={j:.6}")).collect();
    report(
        4,
        "nested-model monotonicity",
        ok,
        &format!("{}; {} images; {}", sh.label, subset.len(), detail.join(", ")),
    );
    assert!(ok, "skipped stages: {:?}", rep.skipped);
}

#[test]
fn criterion_6_ablation_trend() {
    let sh = shared();
    let start = Instant::now();
    let rep = ablation_report(&sh.images, &sh.settings);
    let f = |s: &str| rep.stage(s).map(|r| r.report.f_measure);
    let all: Vec<String> = rep
        .stages
        .iter()
        .map(|s| format!("{}={:.4}", s.stage, s.report.f_measure))
        .collect();
    let ok = match (f("S7"), f("S6"), f("S3"), f("S0")) {
        (Some(s7), Some(s6), Some(s3), Some(s0)) => s7 >= s6 - 0.01 && s6 >= s3 - 0.01 && s3 >= s0 - 0.01,
        _ => false,
    };
    report(
        6,
        "ablation trend",
        ok,
        &format!(
            "{}; test F: {} (need S7 >= S6 >= S3 >= S0, slack 0.01); skipped {:?}; {:.0}s",
            sh.label,
            all.join(" "),
            rep.skipped,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

fn noisy_maps(sh: &Shared) -> Vec<GrayImage> {
    sh.images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let path = sh.dataset.seedmap_path(NOISY_SEED_METHOD, im.id());
            if path.exists() {
                superdiff::ingest::load_gray(&path).unwrap()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(7000 + i as u64);
                noisy_seed_map(im.mask().unwrap(), &mut rng, 3.0, 0.2)
            }
        })
        .collect()
}

#[test]
fn criterion_7_promotion() {
    let sh = shared();
    let maps = noisy_maps(sh);
    let refined = promote(&sh.images, &maps, MatrixChoice::Refined, &sh.settings).unwrap();
    let l_tilde = promote(&sh.images, &maps, MatrixChoice::LTilde, &sh.settings).unwrap();
    let before = refined.before_report.f_measure;
    let after = refined.after_report.f_measure;
    let baseline = l_tilde.after_report.f_measure;
    let ok = after >= before + 0.05 && after > baseline;
    report(
        7,
        "promotion effect",
        ok,
        &format!(
            "{}; F before {before:.4}, after refined {after:.4} (need >= before + 0.05), after L-tilde {baseline:.4}",
            sh.label
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_cose_ceiling() {
    let sh = shared();
    let refined = cose(&sh.images, MatrixChoice::Refined, &sh.settings, DEFAULT_BIN_THRESHOLD).unwrap();
    let rw = cose(&sh.images, MatrixChoice::LRwTilde, &sh.settings, DEFAULT_BIN_THRESHOLD).unwrap();
    let (a, b) = (refined.y_at(100.0).unwrap(), rw.y_at(100.0).unwrap());
    let ok = a > b;
    report(
        8,
        "COSE ceiling",
        ok,
        &format!(
            "{}; mean COSE at r=100%: refined {a:.4}, L-rw-tilde {b:.4} ({} images)",
            sh.label, refined.n_samples_averaged
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_9_full_scale_is_informational() {
    let sh = shared();
    let n_train = sh.dataset.split_ids(Split::Train).len();
    emit(&format!(
        "criterion 9 (absolute full-dataset scores): INFO | not reproducible at desk scale; the harness runs on full datasets \
         via the CLI ({} here, {} training images)",
        sh.label, n_train
    ));
}
