// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria 1-12. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr (outside the test harness capture) and then
//! asserts the same verdict.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use nspu::anonymizer::{anonymize, leaked_entities};
use nspu::corpus::{generate_corpus, generate_corpus_with, load_jsonl, CorpusParams, ProfilePool, SplitSpec, DOMAINS};
use nspu::drift::{centroid_distance, mmd2_biased, Bandwidth, DriftRow, SetLabel};
use nspu::flops::{method_flops, nspu_flops, render_sig, Arithmetic, FlopsSpec, Method};
use nspu::forget::{apply_filter, make_filter, ForgetSubspace};
use nspu::lm::kernel::{loss, loss_and_grad, Packed};
use nspu::lm::{LanguageModel, LmConfig, LmParams, Tokenizer};
use nspu::metrics::{ces, cnll, hcnll, hps, hrs, perplexity, rouge_l, sqs};
use nspu::numeric::pca_adaptive;
use nspu::pipeline::{paths, EvalReport, Pipeline, RunConfig, Stage};
use nspu::projector::{evaluate_projector, rows, surrogate_objective, train_projector_with, ProjectorConfig, ProjectorModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// ----------------------------------------------------------------------------
// Reporting
// ----------------------------------------------------------------------------

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Orthonormal `d x k` basis by modified Gram-Schmidt on Gaussian columns.
fn random_basis(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Array2<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Array2::from_shape_fn((d, k), |(i, j)| cols[j][i])
}

fn subspace_of(basis: Array2<f64>) -> ForgetSubspace {
    let (d, k) = basis.dim();
    ForgetSubspace {
        basis,
        eigenvalues: vec![1.0; k],
        tau: 1.0,
        mean: Array1::zeros(d),
        n_samples: k,
    }
}

// ----------------------------------------------------------------------------
// 1. Filter algebra
// ----------------------------------------------------------------------------

#[test]
fn criterion_01_filter_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_op, mut worst_idem, mut worst_norm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.random_range(2..=64);
        let k = rng.random_range(1..=8.min(d - 1));
        let alpha: f64 = rng.random_range(0.0..=1.0);
        let u = random_basis(&mut rng, d, k);
        let v: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let sub = subspace_of(u.clone());
        let filter = make_filter(&sub, alpha).unwrap();
        let out = apply_filter(&filter, Array1::from(v.clone()).view()).unwrap();

        // dense (I - a U U^T) v with explicit loops
        let mut dense = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                let uu: f64 = (0..k).map(|c| u[[i, c]] * u[[j, c]]).sum();
                let op = if i == j { 1.0 } else { 0.0 } - alpha * uu;
                dense[i] += op * v[j];
            }
        }
        for i in 0..d {
            worst_op = worst_op.max((out[i] - dense[i]).abs());
        }

        let proj = make_filter(&sub, 1.0).unwrap();
        let once = apply_filter(&proj, Array1::from(v.clone()).view()).unwrap();
        let twice = apply_filter(&proj, once.view()).unwrap();
        worst_idem = worst_idem.max((&once - &twice).iter().fold(0.0, |m, x| m.max(x.abs())));

        let coeff: Vec<f64> = (0..k).map(|c| (0..d).map(|i| u[[i, c]] * v[i]).sum()).collect();
        let forget: Vec<f64> = (0..d).map(|i| (0..k).map(|c| u[[i, c]] * coeff[c]).sum()).collect();
        let safe_sq: f64 = (0..d).map(|i| (v[i] - forget[i]).powi(2)).sum();
        let forget_sq: f64 = forget.iter().map(|x| x * x).sum();
        let out_sq: f64 = out.iter().map(|x| x * x).sum();
        let expect = safe_sq + (1.0 - alpha).powi(2) * forget_sq;
        worst_norm = worst_norm.max((out_sq - expect).abs() / expect.max(1.0));
    }
    let elapsed = start.elapsed();
    let pass = worst_op < 1e-12 && worst_idem < 1e-10 && worst_norm < 1e-10 && within(elapsed, 5.0);
    verdict(
        1,
        pass,
        &format!(
            "max |filter - dense| {worst_op:.2e}, idempotence {worst_idem:.2e}, norm identity {worst_norm:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------------------
// 2. Adaptive rank
// ----------------------------------------------------------------------------

fn brute_force_rank(h: &Array2<f64>, tau: f64) -> (usize, Vec<f64>) {
    let (n, d) = h.dim();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| h[[i, j]]).sum::<f64>() / n as f64).collect();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        (0..n).map(|i| (h[[i, a]] - mean[a]) * (h[[i, b]] - mean[b])).sum::<f64>() / (n - 1) as f64
    });
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|&e| e.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let mut running = 0.0;
    for (i, e) in eig.iter().enumerate() {
        running += e;
        if running >= tau * total {
            return (i + 1, eig);
        }
    }
    (eig.len(), eig)
}

#[test]
fn criterion_02_adaptive_rank() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let mut monotone = true;
    let mut worst_eig = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(12..60);
        let d = rng.random_range(2..10);
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..5.0)).collect();
        let h = Array2::from_shape_fn((n, d), |(_, j)| scales[j] * gauss(&mut rng));
        let pca = pca_adaptive(&h, 0.95).unwrap();
        let (k, eig) = brute_force_rank(&h, 0.95);
        if pca.k != k {
            mismatches += 1;
        }
        for (a, b) in pca.spectrum.eigenvalues.iter().zip(&eig) {
            worst_eig = worst_eig.max((a - b).abs() / eig[0]);
        }
        let ks: Vec<usize> = [0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0]
            .iter()
            .map(|&t| pca_adaptive(&h, t).unwrap().k)
            .collect();
        monotone &= ks.windows(2).all(|w| w[0] <= w[1]);
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && monotone && worst_eig < 1e-9 && within(elapsed, 10.0);
    verdict(
        2,
        pass,
        &format!(
            "{mismatches}/100 rank mismatches, eigenvalue rel err {worst_eig:.2e}, monotone {monotone}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------------------
// 3. FLOPs golden values
// ----------------------------------------------------------------------------

#[test]
fn criterion_03_flops_golden_values() {
    let start = Instant::now();
    let spec = FlopsSpec::llama_7b();
    let mode = Arithmetic::AsPrinted;
    let f = |m| method_flops(m, &spec, mode).unwrap();
    let nspu = nspu_flops(&spec, mode).unwrap();
    let retrain_formula = 6.0 * (2e12 + 3600.0 * 512.0) * 7e9;
    let mut checks = vec![
        ("GA", render_sig(f(Method::GA), 6) == "1.29024e17"),
        ("GD", render_sig(f(Method::GD), 6) == "5.16096e17"),
        ("KLM=GA", f(Method::KLM) == f(Method::GA)),
        ("DPO=GD", f(Method::DPO) == f(Method::GD)),
        ("NPO=GD", f(Method::NPO) == f(Method::GD)),
        ("NSPU", render_sig(f(Method::NSPU), 8) == "7.6305918e16"),
        ("MLP forward", nspu.mlp_forward_per_sample == 268_435_456.0),
        ("retrain formula", rel_close(f(Method::Retrain), retrain_formula, 1e-15)),
        ("retrain printed", render_sig(f(Method::Retrain), 10) == "8.400007741e22"),
    ];
    // the constant 8.4000000774144e22 quoted alongside the formula is a digit slip
    checks.push(("slipped constant differs", !rel_close(f(Method::Retrain), 8.4000000774144e22, 1e-9)));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let elapsed = start.elapsed();
    let pass = failed.is_empty() && within(elapsed, 1.0);
    verdict(
        3,
        pass,
        &format!(
            "GA {} GD {} NSPU {} retrain {} (formula {:e}); failed checks {failed:?}, {:.3}s",
            render_sig(f(Method::GA), 8),
            render_sig(f(Method::GD), 8),
            render_sig(f(Method::NSPU), 8),
            render_sig(f(Method::Retrain), 12),
            retrain_formula,
            elapsed.as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------------------
// 4. Metric oracles
// ----------------------------------------------------------------------------

fn brute_lcs(x: &[u8], y: &[u8]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << x.len()) {
        let sub: Vec<u8> = (0..x.len()).filter(|i| mask & (1 << i) != 0).map(|i| x[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = y.iter();
        if sub.iter().all(|c| it.any(|d| d == c)) {
            best = sub.len();
        }
    }
    best
}

#[test]
fn criterion_04_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let eps = 1e-5;
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok && !failures.contains(&name) {
            failures.push(name);
        }
    };
    for _ in 0..200 {
        let p: Vec<f64> = (0..4).map(|_| rng.random_range(1.0..50.0)).collect();
        let g = (p[1] / (p[0] + eps)).ln();
        let c = (p[3] / (p[2] + eps)).ln();
        check("HPS", rel_close(hps(p[0], p[1], p[2], p[3], eps).unwrap().2, 2.0 * g / (g * c + 1.0), 1e-12));

        let t: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..2.0)).collect();
        check("CES", rel_close(ces(t[0], t[1], t[2], t[3]).unwrap().2, t[1] / t[0] + 1.0 - t[3] / t[2], 1e-12));

        let r: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
        let (rr, fr) = (r[1] / r[0], r[3] / r[2]);
        check("HRS", rel_close(hrs(r[0], r[1], r[2], r[3]).unwrap().2, 2.0 * rr / (fr * rr + 1.0), 1e-12));

        let n: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..6.0)).collect();
        let gl = (n[1] / (n[0] + eps) + eps).ln();
        let cl = (n[3] / (n[2] + eps) + eps).ln();
        check("HCNLL", rel_close(hcnll(n[0], n[1], n[2], n[3], eps).unwrap().2, 2.0 * gl / (gl * cl + 1.0), 1e-12));

        let m: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..8.0)).collect();
        let (a, b) = ((m[0] - m[1]).abs(), (m[2] - m[1]).abs());
        check("SQS", rel_close(sqs(m[0], m[1], m[2]).unwrap(), a / (a + b), 1e-12));

        let rows: Vec<Vec<f64>> = (0..rng.random_range(1..8))
            .map(|_| (0..rng.random_range(1..12)).map(|_| -rng.random_range(0.0..6.0)).collect())
            .collect();
        let mut tot = 0.0;
        let mut cnt = 0.0;
        let mut per = 0.0;
        for row in &rows {
            let s: f64 = row.iter().map(|x| -x).sum();
            tot += s;
            cnt += row.len() as f64;
            per += s / row.len() as f64;
        }
        check("perplexity", rel_close(perplexity(&rows).unwrap(), (tot / cnt).exp(), 1e-12));
        check("cnll", rel_close(cnll(&rows).unwrap(), per / rows.len() as f64, 1e-12));

        let x: Vec<u8> = (0..rng.random_range(0..11)).map(|_| rng.random_range(0..4)).collect();
        let y: Vec<u8> = (0..rng.random_range(0..11)).map(|_| rng.random_range(0..4)).collect();
        let expect = if x.is_empty() && y.is_empty() {
            0.0
        } else {
            2.0 * brute_lcs(&x, &y) as f64 / (x.len() + y.len()) as f64
        };
        check("rouge_l", (rouge_l(&x, &y) - expect).abs() < 1e-12);
    }
    // token-weighted perplexity vs sample-weighted cnll
    let rows = vec![vec![-1.0], vec![-3.0, -3.0, -3.0]];
    check("disambiguation cnll", cnll(&rows).unwrap() == 2.0);
    check("disambiguation ppl", rel_close(perplexity(&rows).unwrap(), 2.5f64.exp(), 1e-15));
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && within(elapsed, 10.0);
    verdict(
        4,
        pass,
        &format!("200 random cases per metric, failures {failures:?}, {:.2}s", elapsed.as_secs_f64()),
    );
}

// ----------------------------------------------------------------------------
// 5. MMD and centroid distance
// ----------------------------------------------------------------------------

#[test]
fn criterion_05_mmd_and_centroid() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..60 {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=16);
        let sigma = rng.random_range(0.3..4.0);
        let a = Array2::from_shape_fn((n, d), |_| gauss(&mut rng));
        let b = Array2::from_shape_fn((n, d), |_| gauss(&mut rng) + 0.5);
        let k = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
            let sq: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum();
            (-sq / (2.0 * sigma * sigma)).exp()
        };
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                xx += k(a.row(i), a.row(j));
                yy += k(b.row(i), b.row(j));
                xy += k(a.row(i), b.row(j));
            }
        }
        let nn = (n * n) as f64;
        let oracle = xx / nn + yy / nn - 2.0 * xy / nn;
        worst = worst.max((mmd2_biased(&a, &b, Bandwidth::Fixed(sigma)).unwrap() - oracle).abs());
        worst_self = worst_self.max(mmd2_biased(&a, &a, Bandwidth::MedianHeuristic).unwrap().abs());
    }
    let a = ndarray::array![[0.0, 0.0], [2.0, 0.0]];
    let b = &a + &ndarray::array![3.0, 4.0];
    let translation = centroid_distance(&a, &b).unwrap();
    let elapsed = start.elapsed();
    let pass = worst < 1e-10 && worst_self < 1e-10 && translation == 5.0 && within(elapsed, 10.0);
    verdict(
        5,
        pass,
        &format!(
            "max |mmd2 - triple sum| {worst:.2e}, self {worst_self:.2e}, translation {translation}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------------------
// 6. Gradient checks
// ----------------------------------------------------------------------------

fn lm_gradient_check() -> (usize, f64) {
    let texts = [
        "where does nora work ? nora works at the harbor",
        "what is the code ? the code is seven four",
        "who owns the boat ? the boat belongs to ivan",
    ];
    let tok = Tokenizer::build(texts);
    let cfg = LmConfig {
        vocab_size: tok.vocab_size(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        dropout: 0.0,
        seed: 6,
    };
    let model = LanguageModel::init(&cfg, tok).unwrap();
    let mut batch = Packed::default();
    for t in texts {
        batch.push(&model.encode_text(t).unwrap(), 1);
    }
    let p32 = LmParams::<f32>::init(&cfg).map(|x| x * 4.0);
    let p64: LmParams<f64> = p32.cast();
    let (_, g32) = loss_and_grad(&p32, &cfg, None, &batch, 1.0, None);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 30 {
        let idx = rng.random_range(0..p64.len());
        let h = 1e-5;
        let mut p = p64.clone();
        let x = p.get_flat(idx);
        p.set_flat(idx, x + h);
        let up = loss(&p, &cfg, None, &batch);
        p.set_flat(idx, x - h);
        let down = loss(&p, &cfg, None, &batch);
        let fd = (up - down) / (2.0 * h);
        if fd.abs() < 1e-4 {
            continue;
        }
        let g = g32.get_flat(idx) as f64;
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()));
        checked += 1;
    }
    (checked, worst)
}

fn projector_gradient_check() -> (usize, f64) {
    let cfg = ProjectorConfig {
        dropout: 0.0,
        lambda_inv: 0.2,
        seed: 9,
        ..ProjectorConfig::for_dim(8)
    };
    let model = ProjectorModel::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let mut m = |r: usize| Array2::from_shape_fn((r, 8), |_| gauss(&mut rng));
    let (x, y, xa, pa) = (m(10), m(10), m(4), m(4));
    let (_, grad) = surrogate_objective(&model, &x, &y, Some((&xa, &pa)));
    let base = model.flat_params();
    let (mut checked, mut worst) = (0, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(68);
    while checked < 30 {
        let idx = rng.random_range(0..base.len());
        let h = 1e-6;
        let mut p = model.clone();
        p.set_flat_param(idx, base[idx] + h);
        let up = surrogate_objective(&p, &x, &y, Some((&xa, &pa))).0;
        p.set_flat_param(idx, base[idx] - h);
        let down = surrogate_objective(&p, &x, &y, Some((&xa, &pa))).0;
        let fd = (up - down) / (2.0 * h);
        if fd.abs() < 1e-6 {
            continue;
        }
        worst = worst.max((grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()));
        checked += 1;
    }
    (checked, worst)
}

#[test]
fn criterion_06_gradient_checks() {
    let start = Instant::now();
    let (n_lm, lm) = lm_gradient_check();
    let (n_proj, proj) = projector_gradient_check();
    let elapsed = start.elapsed();
    let pass = n_lm >= 20 && n_proj >= 20 && lm < 1e-3 && proj < 1e-3 && within(elapsed, 60.0);
    verdict(
        6,
        pass,
        &format!(
            "LM f32 max rel err {lm:.2e} over {n_lm} params, projector {proj:.2e} over {n_proj} params, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------------------
// 7. Projector learnability
// ----------------------------------------------------------------------------

#[test]
fn criterion_07_projector_learnability() {
    let start = Instant::now();
    let (n, d) = (2000, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let x = Array2::from_shape_fn((n, d), |_| gauss(&mut rng));
    let w = Array2::from_shape_fn((d, d), |_| gauss(&mut rng) / (d as f64).sqrt());
    let y = x.dot(&w);
    let cfg = ProjectorConfig {
        epochs: 200,
        seed: 7,
        ..ProjectorConfig::for_dim(d)
    };
    let (model, report) = train_projector_with(&x, &y, &cfg, None).unwrap();
    let held = evaluate_projector(&model, &rows(&x, &report.val_indices), &rows(&y, &report.val_indices)).unwrap();
    let elapsed = start.elapsed();
    let pass = held.r2 >= 0.9 && held.cosine_mean >= 0.95 && within(elapsed, 120.0);
    verdict(
        7,
        pass,
        &format!(
            "held-out R² {:.4}, mean cosine {:.4} on {} pairs, {:.1}s",
            held.r2,
            held.cosine_mean,
            report.val_indices.len(),
            elapsed.as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------------------
// 8-12. Desk-scale end-to-end runs
// ----------------------------------------------------------------------------

const SEEDS: [u64; 3] = [1, 2, 3];

struct SeedRun {
    dir: PathBuf,
    config: RunConfig,
    report: EvalReport,
    drift: Vec<DriftRow>,
}

struct Runs {
    seeds: Vec<SeedRun>,
    elapsed: Duration,
}

fn runs_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = runs_root();
        let _ = std::fs::remove_dir_all(&root);
        let start = Instant::now();
        let seeds = SEEDS
            .iter()
            .map(|&seed| {
                let config = RunConfig {
                    seed,
                    output_dir: root.join(format!("seed{seed}")),
                    ..RunConfig::default()
                };
                let p = Pipeline::new(config.clone()).unwrap();
                p.run(Stage::RunAll).unwrap();
                SeedRun {
                    dir: config.output_dir.clone(),
                    report: p.read_report().unwrap(),
                    drift: p.read_drift().unwrap(),
                    config,
                }
            })
            .collect();
        Runs {
            seeds,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_08_desk_scale_unlearning() {
    let r = runs();
    let mut lines = Vec::new();
    let (mut fr, mut rr, mut hps_v, mut agg_gap, mut cnll_gap) = (vec![], vec![], vec![], vec![], vec![]);
    let mut memorized = true;
    let mut small = true;
    let mut corpus_ok = true;
    for s in &r.seeds {
        let rep = &s.report;
        let nspu = rep.method("NSPU").unwrap();
        let ga = rep.method("GA").unwrap();
        let target = LanguageModel::load(&s.dir.join(paths::TARGET)).unwrap();
        let corpus = load_jsonl(&s.dir.join(paths::CORPUS)).unwrap();
        let domains: std::collections::BTreeSet<_> = corpus.iter().map(|c| c.domain).collect();
        corpus_ok &= corpus.len() >= 200 && domains.len() == DOMAINS.len();
        small &= target.config.param_count() <= 1_000_000;
        memorized &= rep.target_forget.ppl < 1.5 && rep.target_retain.ppl < 1.5;
        fr.push(nspu.forget.ppl / rep.target_forget.ppl);
        rr.push(nspu.retain.ppl / rep.target_retain.ppl);
        hps_v.push(nspu.metrics.HPS);
        agg_gap.push(nspu.metrics.aggregate - ga.metrics.aggregate);
        cnll_gap.push((ga.retain.cnll - rep.target_retain.cnll) - (nspu.retain.cnll - rep.target_retain.cnll));
        lines.push(format!(
            "seed {}: params {}, target ppl {:.3}/{:.3}, alpha {:.3}, k {}, forget ratio {:.3}, retain ratio {:.3}, HPS {:.3}, aggregate NSPU {:.3} GA {:.3}",
            s.config.seed,
            target.config.param_count(),
            rep.target_forget.ppl,
            rep.target_retain.ppl,
            rep.alpha,
            rep.k,
            fr.last().unwrap(),
            rr.last().unwrap(),
            nspu.metrics.HPS,
            nspu.metrics.aggregate,
            ga.metrics.aggregate
        ));
    }
    for l in &lines {
        let _ = std::io::stderr().write_all(format!("             {l}\n").as_bytes());
    }
    let (mfr, mrr, mhps, magg, mcnll) = (median(fr), median(rr), median(hps_v), median(agg_gap), median(cnll_gap));
    let checks = [
        ("corpus", corpus_ok),
        ("params", small),
        ("memorized", memorized),
        ("forget ratio", mfr >= 1.5),
        ("retain ratio", mrr <= 1.2),
        ("HPS", mhps > 0.0),
        ("aggregate vs GA", magg > 0.0),
        ("GA retain damage", mcnll > 0.0),
        ("runtime", within(r.elapsed, 900.0)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        8,
        failed.is_empty(),
        &format!(
            "medians: forget ratio {mfr:.3}, retain ratio {mrr:.3}, HPS {mhps:.3}, aggregate gap {magg:.3}, retain CNLL gap {mcnll:.3}; {:.0}s; failed {failed:?}",
            r.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_drift_placement() {
    let r = runs();
    let mut pre_max = 0.0f64;
    let (mut c_gap, mut m_gap) = (vec![], vec![]);
    for s in &r.seeds {
        let layer = s.report.layer;
        for row in s.drift.iter().filter(|d| d.layer < layer) {
            pre_max = pre_max.max(row.centroid_distance).max(row.mmd2);
        }
        let at = |label| s.drift.iter().find(|d| d.layer == layer && d.set_label == label).unwrap();
        let (f, t) = (at(SetLabel::Forget), at(SetLabel::Retain));
        c_gap.push(f.centroid_distance - t.centroid_distance);
        m_gap.push(f.mmd2 - t.mmd2);
    }
    let (mc, mm) = (median(c_gap), median(m_gap));
    verdict(
        9,
        pre_max <= 1e-8 && mc > 0.0 && mm > 0.0,
        &format!("pre-filter max drift {pre_max:.1e}; median forget-minus-retain at filter layer: centroid {mc:.4}, MMD² {mm:.5}"),
    );
}

#[test]
fn criterion_10_sqs_improvement() {
    let r = runs();
    let gaps: Vec<f64> = r
        .seeds
        .iter()
        .map(|s| {
            let q = &s.report.method("NSPU").unwrap().sqs;
            q.sqs_after - q.sqs_before
        })
        .collect();
    let detail: Vec<String> = r
        .seeds
        .iter()
        .map(|s| {
            let q = &s.report.method("NSPU").unwrap().sqs;
            format!("{:.4}->{:.4}", q.sqs_before, q.sqs_after)
        })
        .collect();
    let m = median(gaps);
    verdict(10, m > 0.0, &format!("median SQS gain {m:.4} ({})", detail.join(", ")));
}

#[test]
fn criterion_11_privacy_wiring() {
    let originals = [paths::CORPUS, paths::SPLIT, paths::FORGET_PLACEHOLDERS, paths::PUBLIC];
    let subspace_inputs = Stage::BuildSubspace.inputs();
    let static_ok = originals.iter().all(|o| !subspace_inputs.contains(o))
        && subspace_inputs.contains(&paths::FORGET_ANON)
        && ![paths::CORPUS, paths::SPLIT, paths::FORGET_ANON].iter().any(|o| Stage::TrainProjector.inputs().contains(o));

    // rebuild the subspace in a directory holding only the declared inputs
    let r = runs();
    let src = &r.seeds[0];
    let isolated = runs_root().join("isolated");
    let _ = std::fs::remove_dir_all(&isolated);
    for rel in subspace_inputs {
        let to = isolated.join(rel);
        std::fs::create_dir_all(to.parent().unwrap()).unwrap();
        std::fs::copy(src.dir.join(rel), to).unwrap();
    }
    let cfg = RunConfig {
        output_dir: isolated.clone(),
        ..src.config.clone()
    };
    Pipeline::new(cfg).unwrap().run_stage(Stage::BuildSubspace).unwrap();
    let same = Stage::BuildSubspace
        .outputs(&src.config)
        .iter()
        .all(|rel| std::fs::read(src.dir.join(rel)).unwrap() == std::fs::read(isolated.join(rel)).unwrap());
    let forget_ids: Vec<String> = {
        let split: SplitSpec = serde_json::from_slice(&std::fs::read(src.dir.join(paths::SPLIT)).unwrap()).unwrap();
        split.forget.into_iter().collect()
    };
    let sidecar: Vec<String> =
        serde_json::from_slice(&std::fs::read(src.dir.join(paths::sidecar(paths::FORGET_EST_ACTS))).unwrap()).unwrap();
    let ids_match = {
        let mut s = sidecar.clone();
        s.sort();
        s == forget_ids
    };

    // full-corpus scan of anonymized output
    let mut scanned = 0;
    let mut leaks = 0;
    for &seed in &SEEDS {
        let main = generate_corpus(seed, 10);
        let public = generate_corpus_with(&CorpusParams {
            seed,
            profiles_per_domain: 20,
            pool: ProfilePool::Public,
        });
        for rec in main.iter().chain(&public) {
            let (text, _) = anonymize(rec).split();
            leaks += leaked_entities(&text.full_text()).len();
            scanned += 1;
        }
    }
    verdict(
        11,
        static_ok && same && ids_match && leaks == 0,
        &format!(
            "stage wiring {static_ok}, isolated rebuild identical {same}, estimated rows cover the forget ids {ids_match}, {leaks} leaked entities in {scanned} anonymized records"
        ),
    );
}

#[test]
fn criterion_12_determinism() {
    let r = runs();
    let src = &r.seeds[0];
    let again = runs_root().join("repeat");
    let _ = std::fs::remove_dir_all(&again);
    let cfg = RunConfig {
        output_dir: again.clone(),
        ..src.config.clone()
    };
    Pipeline::new(cfg).unwrap().run(Stage::RunAll).unwrap();
    let outputs: Vec<String> = Stage::ORDER.iter().flat_map(|s| s.outputs(&src.config)).collect();
    let differing: Vec<&String> = outputs
        .iter()
        .filter(|rel| std::fs::read(src.dir.join(rel)).unwrap() != std::fs::read(again.join(rel)).unwrap())
        .collect();
    verdict(
        12,
        differing.is_empty(),
        &format!("{} artifacts compared byte for byte, differing {differing:?}", outputs.len()),
    );
}
