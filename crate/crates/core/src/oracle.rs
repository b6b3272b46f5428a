// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small-instance oracle suites.
//!
//! Each check compares a production kernel with an independent route to the
//! same number. Engine outputs are checked against the f64 loop reference;
//! statistics against closed-form hand formulas.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::reference::reference_forward;
use crate::engine::synthetic::{random_weights, tiny_config};
use crate::engine::weights::QkvPart;
use crate::engine::{forward_ids, CaptureSpec};
use crate::probes::{composite_index, CompositeInputs, HeadId};
use crate::stats;

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct OracleSuite {
    pub name: &'static str,
    pub checks: Vec<OracleCheck>,
    pub elapsed: Duration,
}

impl OracleSuite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&OracleCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

struct Recorder {
    checks: Vec<OracleCheck>,
}

impl Recorder {
    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(OracleCheck {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        let err = (got - want).abs();
        self.check(
            name,
            err <= tol,
            format!("got {got:.15e}, want {want:.15e}, |err| {err:.3e} (tol {tol:e})"),
        );
    }
}

/// Maximum absolute error relative to the largest reference magnitude.
fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter()
        .zip(want)
        .map(|(g, w)| (*g as f64 - w).abs())
        .fold(0.0, f64::max)
        / scale
}

pub const ENGINE_REL_TOL: f64 = 1e-5;

/// Optimized forward vs the f64 reference on `n_models` random tiny
/// models, plus exact uniform rows for heads whose query is zeroed.
pub fn engine_suite(n_models: usize, seed: u64) -> OracleSuite {
    let start = Instant::now();
    let mut rec = Recorder { checks: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in 0..n_models {
        let n_layers = rng.gen_range(1..=2);
        let n_heads = rng.gen_range(1..=2);
        let d_model = [4, 8][rng.gen_range(0..2)];
        let t_len = rng.gen_range(1..=8);
        let vocab = rng.gen_range(8..=32);
        let mut cfg = tiny_config(n_layers, n_heads, d_model, vocab);
        cfg.parallel_residual = rng.gen_bool(0.5);
        cfg.rotary_pct = if rng.gen_bool(0.5) { 1.0 } else { 0.5 };
        if cfg.rotary_dims() % 2 == 1 {
            cfg.rotary_pct = 1.0;
        }
        let mut w = random_weights(&cfg, rng.gen(), rng.gen_range(0.2..1.5));
        // zero the query of one head per model; its rows must be uniform
        let zl = rng.gen_range(0..n_layers);
        let zh = rng.gen_range(0..n_heads);
        w.layers[zl].head_weight_mut(cfg.d_head, zh, QkvPart::Query).fill(0.0);
        w.layers[zl].head_bias_mut(cfg.d_head, zh, QkvPart::Query).fill(0.0);
        let ids: Vec<u32> = (0..t_len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let label = format!("model {m} (L{n_layers} H{n_heads} d{d_model} T{t_len})");

        let got = match forward_ids(&cfg, &w, &ids, &CaptureSpec::everything()) {
            Ok(t) => t,
            Err(e) => {
                rec.check(format!("{label} forward"), false, e.to_string());
                continue;
            }
        };
        let want = reference_forward(&cfg, &w, &ids);
        let mut worst = 0.0f64;
        for l in 0..=n_layers {
            let e: Vec<f64> = want.hidden[l].iter().flatten().copied().collect();
            worst = worst.max(rel_err(&got.hidden(l).map(|h| h.data.clone()).unwrap_or_default(), &e));
        }
        for l in 0..n_layers {
            let e: Vec<f64> = want.attention[l].iter().flatten().flatten().copied().collect();
            worst = worst.max(rel_err(
                &got.attention(l + 1).map(|a| a.data.clone()).unwrap_or_default(),
                &e,
            ));
        }
        let e: Vec<f64> = want.logits.iter().flatten().copied().collect();
        worst = worst.max(rel_err(
            got.logits.as_ref().map(|x| x.data.as_slice()).unwrap_or_default(),
            &e,
        ));
        rec.check(
            format!("{label} parity"),
            worst <= ENGINE_REL_TOL,
            format!("max relative error {worst:.3e}"),
        );

        let pattern = got.attention(zl + 1).expect("captured");
        let uniform = (0..t_len).all(|q| {
            let row = pattern.row(zh, q);
            row[..=q].iter().all(|v| *v == 1.0 / (q + 1) as f32) && row[q + 1..].iter().all(|v| *v == 0.0)
        });
        rec.check(
            format!("{label} zero-QK head ({},{}) uniform", zl + 1, zh + 1),
            uniform,
            "",
        );
    }
    OracleSuite {
        name: "engine",
        checks: rec.checks,
        elapsed: start.elapsed(),
    }
}

/// Upper tail of Student t with 3 degrees of freedom, in closed form.
fn t3_sf(t: f64) -> f64 {
    let s3 = 3f64.sqrt();
    let cdf = 0.5 + (t / (s3 * (1.0 + t * t / 3.0)) + (t / s3).atan()) / std::f64::consts::PI;
    1.0 - cdf
}

/// Library statistics vs hand formulas on the documented examples, and BH
/// invariants under `permutations` random reorderings.
pub fn stats_suite(permutations: usize, seed: u64) -> OracleSuite {
    let start = Instant::now();
    let mut rec = Recorder { checks: Vec::new() };

    // simple regression through the normal equations
    let x: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
    let y: [f64; 4] = [1.0, 3.0, 2.0, 5.0];
    let n = 4.0;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let sst: f64 = y.iter().map(|b| (b - sy / n).powi(2)).sum();
    let se_slope = (sse / (n - 2.0) / (sxx - sx * sx / n)).sqrt();
    match stats::ols(&x, &y, None) {
        Ok(fit) => {
            rec.close("ols slope", fit.slope, slope, 1e-9);
            rec.close("ols intercept", fit.intercept, intercept, 1e-9);
            rec.close("ols r2", fit.r2, 1.0 - sse / sst, 1e-9);
            rec.close("ols se_slope", fit.se_slope, se_slope, 1e-9);
            rec.close("ols aic", fit.aic, n * (sse / n).ln() + 4.0, 1e-9);
        }
        Err(e) => rec.check("ols", false, e.to_string()),
    }
    match stats::ols(&[1.0, 2.0, 3.0, 4.0, 5.0], &[3.0, 5.0, 7.0, 9.0, 11.0], None) {
        Ok(fit) => {
            rec.close("ols exact line slope", fit.slope, 2.0, 1e-12);
            rec.close("ols exact line intercept", fit.intercept, 1.0, 1e-12);
            rec.close("ols exact line r2", fit.r2, 1.0, 1e-12);
        }
        Err(e) => rec.check("ols exact line", false, e.to_string()),
    }

    // paired t on d = [1, 1, 1, -1]
    let d: [f64; 4] = [1.0, 1.0, 1.0, -1.0];
    let md = d.iter().sum::<f64>() / 4.0;
    let sd = (d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / 3.0).sqrt();
    let t = md / (sd / 2.0);
    match stats::paired_t_one_tailed(&d, &[0.0; 4]) {
        Ok(r) => {
            rec.close("paired t statistic", r.t, t, 1e-12);
            rec.close("paired t p (closed-form t3)", r.p_one_tailed, t3_sf(t), 1e-10);
            rec.check("paired t df", r.df == 3, format!("df {}", r.df));
        }
        Err(e) => rec.check("paired t", false, e.to_string()),
    }
    match stats::paired_t_one_tailed(&[0.3, 0.7], &[0.3, 0.7]) {
        Ok(r) => rec.check("paired t a == b", r.t == 0.0 && r.p_one_tailed == 0.5, format!("{r:?}")),
        Err(e) => rec.check("paired t a == b", false, e.to_string()),
    }

    // BH step-up on the documented vector
    let p: [f64; 4] = [0.01, 0.04, 0.03, 0.005];
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut hand = vec![0.0; m];
    for (rank, &i) in idx.iter().enumerate() {
        hand[i] = (rank..m)
            .map(|j| p[idx[j]] * m as f64 / (j + 1) as f64)
            .fold(1.0, f64::min);
    }
    match stats::bh_fdr(&p) {
        Ok(q) => {
            for (i, (a, b)) in q.iter().zip(&hand).enumerate() {
                rec.close(&format!("bh_fdr[{i}]"), *a, *b, 1e-12);
            }
            for (i, (a, b)) in q.iter().zip([0.02, 0.04, 0.04, 0.02]).enumerate() {
                rec.close(&format!("bh_fdr[{i}] frozen"), *a, b, 1e-12);
            }
        }
        Err(e) => rec.check("bh_fdr", false, e.to_string()),
    }

    // BH invariants under permutation
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0usize;
    let mut first_bad = String::new();
    for k in 0..permutations {
        let len = rng.gen_range(1..=40);
        let base: Vec<f64> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    1.0
                } else {
                    rng.gen::<f64>().powi(3)
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        let perm: Vec<f64> = order.iter().map(|&i| base[i]).collect();
        let (Ok(qb), Ok(qp)) = (stats::bh_fdr(&base), stats::bh_fdr(&perm)) else {
            bad += 1;
            continue;
        };
        let equivariant = order.iter().enumerate().all(|(j, &i)| qp[j] == qb[i]);
        let bounded = qb.iter().zip(&base).all(|(q, p)| *q >= *p && *q <= 1.0);
        let monotone = (0..len).all(|i| (0..len).all(|j| !(base[i] < base[j]) || qb[i] <= qb[j]));
        if !(equivariant && bounded && monotone) {
            bad += 1;
            if first_bad.is_empty() {
                first_bad =
                    format!("permutation {k}: equivariant {equivariant}, bounded {bounded}, monotone {monotone}");
            }
        }
    }
    rec.check(
        format!("bh_fdr invariants over {permutations} permutations"),
        bad == 0,
        first_bad,
    );

    // zscore, population sd
    let v: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
    let mv = 2.5;
    let psd = ((1.5f64.powi(2) * 2.0 + 0.5f64.powi(2) * 2.0) / 4.0).sqrt();
    match stats::zscore(&v) {
        Ok(z) => {
            for (i, (a, x)) in z.iter().zip(v).enumerate() {
                rec.close(&format!("zscore[{i}]"), *a, (x - mv) / psd, 1e-12);
            }
        }
        Err(e) => rec.check("zscore", false, e.to_string()),
    }
    match stats::zscore(&[0.0, 1.0]) {
        Ok(z) => rec.check("zscore [0,1] -> [-1,1]", z == vec![-1.0, 1.0], format!("{z:?}")),
        Err(e) => rec.check("zscore [0,1]", false, e.to_string()),
    }

    // pearson via the raw-sum covariance formula
    let xs: Vec<f64> = (0..25).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.4 * x + rng.gen_range(-1.0..1.0)).collect();
    let k = xs.len() as f64;
    let (a, b) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let ab: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let aa: f64 = xs.iter().map(|x| x * x).sum();
    let bb: f64 = ys.iter().map(|y| y * y).sum();
    let r = (k * ab - a * b) / ((k * aa - a * a).sqrt() * (k * bb - b * b).sqrt());
    match stats::pearson(&xs, &ys) {
        Ok(got) => rec.close("pearson", got, r, 1e-12),
        Err(e) => rec.check("pearson", false, e.to_string()),
    }
    match (stats::pearson(&xs, &ys), stats::ols(&xs, &ys, None)) {
        (Ok(r), Ok(fit)) => rec.close("pearson^2 = ols r2", r * r, fit.r2, 1e-12),
        _ => rec.check("pearson^2 = ols r2", false, "kernel error"),
    }

    OracleSuite {
        name: "stats",
        checks: rec.checks,
        elapsed: start.elapsed(),
    }
}

pub const COMPOSITE_TOL: f64 = 1e-9;

/// Composite values and ranking under per-variable positive-affine
/// rescaling, over `trials` random head sets.
pub fn composite_suite(trials: usize, seed: u64) -> OracleSuite {
    let start = Instant::now();
    let mut rec = Recorder { checks: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let n = rng.gen_range(3..=24);
        let inputs: Vec<CompositeInputs> = (0..n)
            .map(|i| CompositeInputs {
                head: HeadId::new(1 + i / 4, 1 + i % 4),
                coef: Some(rng.gen_range(-0.2..0.2)),
                noun_attn: Some(rng.gen_range(0.0..1.0)),
                verb_attn: Some(rng.gen_range(0.0..1.0)),
                oneback_t: Some(rng.gen_range(-4.0..8.0)),
                positional_attn: Some(rng.gen_range(0.0..1.0)),
            })
            .collect();
        let mut ab = [(0.0, 0.0); 5];
        for s in &mut ab {
            *s = (rng.gen_range(0.01..100.0), rng.gen_range(-50.0..50.0));
        }
        let f = |v: Option<f64>, (a, b): (f64, f64)| v.map(|x| a * x + b);
        let scaled: Vec<CompositeInputs> = inputs
            .iter()
            .map(|r| CompositeInputs {
                head: r.head,
                coef: f(r.coef, ab[0]),
                noun_attn: f(r.noun_attn, ab[1]),
                verb_attn: f(r.verb_attn, ab[2]),
                oneback_t: f(r.oneback_t, ab[3]),
                positional_attn: f(r.positional_attn, ab[4]),
            })
            .collect();
        match (composite_index(&inputs), composite_index(&scaled)) {
            (Ok(x), Ok(y)) => {
                let worst = x
                    .iter()
                    .map(|r| {
                        let other = y
                            .iter()
                            .find(|s| s.head == r.head)
                            .map_or(f64::INFINITY, |s| s.composite);
                        (r.composite - other).abs()
                    })
                    .fold(0.0, f64::max);
                // ranking: order by the unscaled composite, ties within tolerance are interchangeable
                let ranked = x.iter().zip(&y).all(|(a, b)| {
                    a.head == b.head
                        || (a.composite - x.iter().find(|r| r.head == b.head).expect("same heads").composite).abs()
                            <= COMPOSITE_TOL
                });
                rec.check(
                    format!("trial {trial} ({n} heads)"),
                    worst <= COMPOSITE_TOL && ranked,
                    format!("max |Δcomposite| {worst:.3e}, ranking preserved {ranked}"),
                );
            }
            (Err(e), _) | (_, Err(e)) => rec.check(format!("trial {trial}"), false, e.to_string()),
        }
    }
    OracleSuite {
        name: "composite",
        checks: rec.checks,
        elapsed: start.elapsed(),
    }
}

/// Two runs of the synthetic demo config with 1 and 3 workers must write
/// byte-identical tables.
pub fn pipeline_suite(root: &Path, seed: u64) -> OracleSuite {
    use crate::pipeline::{run, RunConfig, RunOptions};
    let start = Instant::now();
    let mut rec = Recorder { checks: Vec::new() };
    let outcome = (|| -> crate::Result<Vec<(String, bool)>> {
        let path = crate::demo::write_workspace(root, seed)?;
        let mut dirs = Vec::new();
        for workers in [1usize, 3] {
            let mut cfg = RunConfig::load(&path)?;
            cfg.workers = workers;
            cfg.output_dir = root.join(format!("out-w{workers}"));
            let s = run(&cfg, &RunOptions::default())?;
            if s.exit_code() != 0 {
                return Err(crate::ProbeError::Argument(format!(
                    "{workers}-worker run had failed cells"
                )));
            }
            dirs.push((cfg.output_dir, s.manifest.tables));
        }
        Ok(dirs[0]
            .1
            .iter()
            .map(|t| {
                let a = std::fs::read(dirs[0].0.join(&t.file)).ok();
                let b = std::fs::read(dirs[1].0.join(&t.file)).ok();
                (t.file.clone(), a.is_some() && a == b)
            })
            .collect())
    })();
    match outcome {
        Ok(files) => {
            rec.check("tables written", files.len() == 7, format!("{} tables", files.len()));
            for (f, same) in files {
                rec.check(format!("{f} identical across 1 and 3 workers"), same, "");
            }
        }
        Err(e) => rec.check("pipeline runs", false, e.to_string()),
    }
    OracleSuite {
        name: "pipeline",
        checks: rec.checks,
        elapsed: start.elapsed(),
    }
}
