//! Acceptance suite: one PASS/FAIL line per criterion, all checked against
//! oracles written here rather than against library helpers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lexmap::alignment::alignment_score;
use lexmap::anchored::{normalized_score, normalized_scores};
use lexmap::corpus::{extract_act_citations, ingest_dir, segment_text};
use lexmap::pipeline::{embedded_seed_bank, map_corpus};
use lexmap::trend::{fit_logit, standardize_coefficients, LogitOptions};
use lexmap::{
    ActCatalog, CaseProfile, Category, CoefficientSurface, DistanceKind, Embedder, FactorId, GlmFit,
    ProviderConfig, ScoreMatrix, Thresholds, YearBucket,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn parser_exactness() -> Outcome {
    let dir = fixtures().join("parser");
    let manifest: BTreeMap<String, Value> =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    check(manifest.len() == 5, || format!("{} fixture documents", manifest.len()))?;
    let docs: Vec<(String, String, Value)> = manifest
        .into_iter()
        .map(|(name, want)| {
            let raw = fs::read_to_string(dir.join(&name)).expect("fixture document");
            (name, raw, want)
        })
        .collect();
    let start = Instant::now();
    let parsed: Vec<_> = docs.iter().map(|(_, raw, _)| segment_text(raw)).collect();
    let elapsed = start.elapsed();
    let mut max_markers = 0;
    for ((name, _, want), seg) in docs.iter().zip(&parsed) {
        let got: Vec<u64> = seg.segments.iter().map(|s| u64::from(s.index)).collect();
        let indices: Vec<u64> = want["indices"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        check(want["segments"].as_u64() == Some(got.len() as u64), || {
            format!("{name}: {} segments", got.len())
        })?;
        check(got == indices, || format!("{name}: indices differ"))?;
        max_markers = max_markers.max(got.len());
    }
    check(max_markers >= 400, || "no 400-marker document".into())?;
    check(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("5 documents exact, {elapsed:?}"))
}

fn act_extraction() -> Outcome {
    let got: Vec<String> = extract_act_citations("Sections 5(a) and 5(c) of the Securities Act")
        .into_iter()
        .map(|c| c.canonical_id)
        .collect();
    check(
        got == ["Section 5(a) of the Securities Act", "Section 5(c) of the Securities Act"],
        || format!("got {got:?}"),
    )?;
    let cases: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(fixtures().join("citations.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let mut hits = 0;
    for c in &cases {
        let want: Vec<&str> = c["expected"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let got: Vec<String> = extract_act_citations(c["sentence"].as_str().unwrap())
            .into_iter()
            .map(|a| a.canonical_id)
            .collect();
        if got == want {
            hits += 1;
        }
    }
    check(cases.len() == 30 && hits == 30, || format!("{hits}/{} exact", cases.len()))?;
    Ok("30/30 exact".into())
}

fn mapping_identity() -> Outcome {
    let dir = fixtures().join("synthetic");
    let corpus = ingest_dir(&dir.join("corpus"), &ActCatalog::default()).map_err(|e| e.to_string())?;
    let embedder = Embedder::from_config(&ProviderConfig::deterministic("hashing-256", 256)).map_err(|e| e.to_string())?;
    let bank = embedded_seed_bank(&dir.join("seeds.json"), 106, &embedder).map_err(|e| e.to_string())?;
    let (assignments, _) = map_corpus(&corpus, &bank, &embedder, DistanceKind::Cosine).map_err(|e| e.to_string())?;

    let truth: HashMap<(String, u32), usize> = fs::read_to_string(dir.join("truth.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            (
                (v["case_id"].as_str().unwrap().to_string(), v["segment_index"].as_u64().unwrap() as u32),
                v["factor_id"].as_u64().unwrap() as usize,
            )
        })
        .collect();
    check(assignments.len() == truth.len(), || {
        format!("{} assignments for {} segments", assignments.len(), truth.len())
    })?;
    let correct = assignments
        .iter()
        .filter(|a| truth.get(&(a.case_id.clone(), a.segment_index)) == Some(&a.factor.index()))
        .count();
    check(correct == truth.len(), || format!("{correct}/{} on construction factor", truth.len()))?;

    let seeds: HashMap<&str, FactorId> = bank.seeds.iter().map(|s| (s.text.as_str(), s.factor)).collect();
    let by_key: HashMap<(&str, u32), _> = assignments
        .iter()
        .map(|a| ((a.case_id.as_str(), a.segment_index), a))
        .collect();
    let mut copies = 0;
    for c in &corpus {
        for s in &c.segments {
            if let Some(&f) = seeds.get(s.text.as_str()) {
                copies += 1;
                let a = by_key[&(c.case_id.as_str(), s.index)];
                check(a.factor == f && a.distance == 0.0, || {
                    format!("{}#{} copy mapped to {:?} at {}", c.case_id, s.index, a.factor, a.distance)
                })?;
            }
        }
    }
    check(copies > 0, || "no verbatim seed copies in corpus".into())?;
    Ok(format!("{correct}/{} segments, {copies} verbatim copies at distance 0", truth.len()))
}

fn brute_force_r(row: &[f64; 6], i: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..6 {
        for j in 0..6 {
            if k != j && row[k] > row[j] {
                den += row[k] - row[j];
                if k == i {
                    num += row[k] - row[j];
                }
            }
        }
    }
    if den == 0.0 { 0.0 } else { num / den }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for n in 0..1000 {
        let mut sc = [[0.0; 6]; 6];
        for row in &mut sc {
            for v in row.iter_mut() {
                *v = match n % 3 {
                    0 => rng.random::<f64>(),
                    1 => f64::from(rng.random_range(0..4u8)) / 3.0,
                    _ => rng.random::<f64>() * 10f64.powi(rng.random_range(-3..3)),
                };
            }
        }
        let m = ScoreMatrix { sc, segment_counts: [1; 6] };
        let r = normalized_scores(&m);
        for i in 0..6 {
            check((0.0..=1.0).contains(&r[i]), || format!("R_{i} = {} out of range", r[i]))?;
            worst = worst.max((r[i] - brute_force_r(&sc[i], i)).abs());
        }
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let dominant = normalized_score(&[0.9, 0.2, 0.2, 0.2, 0.2, 0.2], 0);
    check(dominant == 1.0, || format!("dominance row gave {dominant}"))?;
    let uniform = normalized_score(&[0.3; 6], 2);
    check(uniform == 0.0, || format!("uniform row gave {uniform}"))?;
    Ok(format!("1000 matrices, max deviation {worst:e}"))
}

/// Nesterov-accelerated gradient ascent on the ridge-penalized likelihood,
/// written independently of the library.
fn gradient_oracle(rows: &[[f64; 6]], y: &[f64], ridge: f64) -> [f64; 7] {
    let grad = |b: &[f64; 7]| -> [f64; 7] {
        let mut g = [0.0; 7];
        for (x, &yi) in rows.iter().zip(y) {
            let eta = b[0] + (0..6).map(|j| x[j] * b[j + 1]).sum::<f64>();
            let r = yi - 1.0 / (1.0 + (-eta).exp());
            g[0] += r;
            for j in 0..6 {
                g[j + 1] += x[j] * r;
            }
        }
        for j in 0..7 {
            g[j] -= ridge * b[j];
        }
        g
    };
    // The Hessian is bounded by n/4 · (1 + Σx²) + ridge ≤ n/2 + ridge.
    let lipschitz = rows.len() as f64 * 0.5 + ridge;
    let step = 1.0 / lipschitz;
    let mut b = [0.0; 7];
    let mut prev = b;
    for t in 0..2_000_000u64 {
        let mom = t as f64 / (t as f64 + 3.0);
        let mut look = [0.0; 7];
        for j in 0..7 {
            look[j] = b[j] + mom * (b[j] - prev[j]);
        }
        let g = grad(&look);
        prev = b;
        for j in 0..7 {
            b[j] = look[j] + step * g[j];
        }
        if t % 100 == 0 && grad(&b).iter().all(|v| v.abs() < 1e-11) {
            break;
        }
    }
    b
}

fn oracle_ll(rows: &[[f64; 6]], y: &[f64], b: &[f64], ridge: f64) -> f64 {
    let mut ll = 0.0;
    for (x, &yi) in rows.iter().zip(y) {
        let eta = b[0] + (0..6).map(|j| x[j] * b[j + 1]).sum::<f64>();
        ll += yi * eta - (1.0 + eta.exp()).ln();
    }
    ll - 0.5 * ridge * b.iter().map(|v| v * v).sum::<f64>()
}

fn glm_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ridge = 0.05;
    let opts = LogitOptions {
        ridge,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for inst in 0..50 {
        let n = rng.random_range(8..=30);
        let truth: [f64; 6] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        while rows.len() < n {
            let w: [f64; 6] = std::array::from_fn(|_| -rng.random::<f64>().ln());
            let s: f64 = w.iter().sum();
            let x = w.map(|v| v / s);
            let eta: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            rows.push(x);
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = DMatrix::from_row_slice(n, 6, &flat);
        let fit = fit_logit(&x, &y, &opts).map_err(|e| e.to_string())?;
        check(fit.converged && fit.ridge == ridge, || {
            format!("instance {inst}: converged={} ridge={}", fit.converged, fit.ridge)
        })?;
        let oracle = gradient_oracle(&rows, &y, ridge);
        let ours = [&[fit.beta0][..], &fit.betas[..]].concat();
        for (a, b) in ours.iter().zip(oracle) {
            worst = worst.max((a - b).abs());
        }
        for w in fit.ll_trace.windows(2) {
            check(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0), || {
                format!("instance {inst}: likelihood fell {} -> {}", w[0], w[1])
            })?;
        }
        let last = *fit.ll_trace.last().unwrap();
        let exact = oracle_ll(&rows, &y, &ours, ridge);
        check((last - exact).abs() <= 1e-9 * exact.abs().max(1.0), || {
            format!("instance {inst}: trace ends at {last}, objective {exact}")
        })?;
    }
    check(worst <= 1e-6, || format!("max coefficient deviation {worst:e}"))?;

    let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let fit = fit_logit(&DMatrix::zeros(8, 6), &y, &LogitOptions::default()).map_err(|e| e.to_string())?;
    let logit = (3.0f64 / 5.0).ln();
    check((fit.beta0 - logit).abs() <= 1e-6 && fit.betas.iter().all(|b| b.abs() <= 1e-6), || {
        format!("null model beta0 {} vs {logit}", fit.beta0)
    })?;
    let balanced = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let fit = fit_logit(&DMatrix::from_element(6, 6, 1.0 / 6.0), &balanced, &LogitOptions::default())
        .map_err(|e| e.to_string())?;
    check(fit.beta0.abs() <= 1e-6 && fit.betas.iter().all(|b| b.abs() <= 1e-6), || {
        format!("balanced constant design beta0 {}", fit.beta0)
    })?;
    Ok(format!("50 instances, max deviation {worst:e}; null models exact"))
}

fn standardization() -> Outcome {
    let bucket = YearBucket::for_year(2020);
    let fit = GlmFit {
        act: "a".into(),
        bucket,
        beta0: 0.0,
        betas: [1.0, 2.0, 3.0, 1.0, 2.0, 3.0],
        converged: true,
        iterations: 1,
        n_obs: 10,
        ridge: 0.0,
    };
    let cells = standardize_coefficients(&[fit], &Thresholds::default());
    for (c, want) in cells.iter().zip([-1.2247, 0.0, 1.2247]) {
        let z = c.standardized.unwrap();
        check((z - want).abs() <= 1e-4, || format!("z {z} vs {want}"))?;
    }

    use Category::*;
    let table: [(f64, Category); 20] = [
        (-3.0, ExcludedNegative),
        (-1.0, ExcludedNegative),
        (-0.2, ExcludedNegative),
        (-1e-9, ExcludedNegative),
        (0.0, Low),
        (1e-9, Low),
        (0.25, Low),
        (0.4999, Low),
        (0.5, Low),
        (0.5000001, Moderate),
        (0.6, Moderate),
        (0.75, Moderate),
        (0.9999, Moderate),
        (1.0, High),
        (1.0000001, High),
        (1.067, High),
        (1.5, High),
        (1.899, High),
        (2.5, High),
        (10.0, High),
    ];
    let t = Thresholds::default();
    for (z, want) in table {
        check(t.categorize(z) == want, || format!("{z} -> {:?}, want {want:?}", t.categorize(z)))?;
    }

    let printed = [
        1.899, 1.970, 1.408, 1.550, 1.156, 1.156, 1.678, 1.067, 1.851, 1.816, 1.816, 1.582, 1.330, 1.408, 1.876,
        1.904, 1.178, 1.270,
    ];
    for v in printed {
        check(t.categorize(v) == High, || format!("printed max {v} not high"))?;
    }
    Ok("z-scores, 20 thresholds, 18 printed maxima high".into())
}

fn alignment_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bucket_year = 2021;
    let mut worst_uniform: f64 = 0.0;
    let mut worst_scaled: f64 = 0.0;
    let mut scored = 0;
    for s in 0..100 {
        let acts: Vec<String> = (0..rng.random_range(1..5)).map(|a| format!("Act {a}")).collect();
        let mut surface = CoefficientSurface::default();
        let mut scaled: Vec<(f64, CoefficientSurface)> = vec![(0.1, Default::default()), (10.0, Default::default())];
        for act in &acts {
            let coefs: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..5.0));
            surface.insert(act, YearBucket::for_year(bucket_year), coefs);
            for (k, sf) in &mut scaled {
                sf.insert(act, YearBucket::for_year(bucket_year), coefs.map(|c| c * *k));
            }
        }
        let uniform = CaseProfile {
            case_id: format!("u{s}"),
            year: bucket_year,
            category: None,
            acts: acts.clone(),
            p: [1.0 / 6.0; 6],
        };
        let score = alignment_score(&uniform, &surface).map_err(|e| format!("surface {s}: {e:?}"))?;
        worst_uniform = worst_uniform.max((score.score - 1.0).abs());

        let w: [f64; 6] = std::array::from_fn(|_| rng.random::<f64>());
        let total: f64 = w.iter().sum();
        let skewed = CaseProfile {
            p: w.map(|v| v / total),
            ..uniform
        };
        let base = alignment_score(&skewed, &surface).map_err(|e| format!("surface {s}: {e:?}"))?.score;
        for (k, sf) in &scaled {
            let moved = alignment_score(&skewed, sf).map_err(|e| format!("surface {s}, k={k}: {e:?}"))?.score;
            worst_scaled = worst_scaled.max((moved - base).abs() / base.abs().max(1.0));
        }
        scored += 1;
    }
    check(worst_uniform <= 1e-12, || format!("uniform deviation {worst_uniform:e}"))?;
    check(worst_scaled <= 1e-12, || format!("scaling deviation {worst_scaled:e}"))?;
    Ok(format!("{scored} surfaces, uniform dev {worst_uniform:e}, scaling dev {worst_scaled:e}"))
}

fn run_cli(config: &Path, out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_lexmap"))
        .arg("run")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    check(status.status.success(), || {
        format!("lexmap run failed: {}", String::from_utf8_lossy(&status.stderr))
    })?;
    Ok(start.elapsed())
}

fn compare_golden(out: &Path, golden: &Path) -> Result<usize, String> {
    let mut n = 0;
    for entry in fs::read_dir(golden).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name();
        let want = fs::read(entry.path()).map_err(|e| e.to_string())?;
        let got = fs::read(out.join(&name)).map_err(|e| format!("{}: {e}", name.to_string_lossy()))?;
        check(got == want, || format!("{} differs from golden", name.to_string_lossy()))?;
        n += 1;
    }
    Ok(n)
}

fn end_to_end() -> Outcome {
    let config = fixtures().join("synthetic/config.json");
    let golden = fixtures().join("golden");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cold = run_cli(&config, tmp.path())?;
    check(cold < Duration::from_secs(10), || format!("cold run took {cold:?}"))?;
    let files = compare_golden(tmp.path(), &golden)?;
    let warm = run_cli(&config, tmp.path())?;
    compare_golden(tmp.path(), &golden)?;
    check(files >= 10, || format!("only {files} golden files"))?;
    Ok(format!("{files} files byte-identical; cold {cold:?}, warm {warm:?}"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("parser exactness", parser_exactness),
        ("act extraction", act_extraction),
        ("mapping identity", mapping_identity),
        ("evaluation metric oracle", metric_oracle),
        ("GLM correctness", glm_correctness),
        ("standardization and categorization", standardization),
        ("alignment identity", alignment_identity),
        ("end-to-end determinism", end_to_end),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} [PRIMARY] {name}: PASS ({detail})", i + 1),
            Err(why) => {
                println!("criterion {} [PRIMARY] {name}: FAIL ({why})", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
