// Acceptance checks, one PASS/FAIL line per criterion. Runs with its own
// harness so the lines appear in `cargo test` output unbuffered.

mod common;

use std::collections::BTreeSet;
use std::panic;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use factcal::applications::{retain_claims, selective_qa, SelectivePolicy};
use factcal::calibration::{self, aggregate_macro};
use factcal::corpus::{AtomicClaim, ClaimConfidence, Method, ResponseScore};
use factcal::elicit::discriminative::{extract_p_true, PTrueMode};
use factcal::elicit::generative::{gen_binary_confidence, gen_multi_confidence, SupportTally};
use factcal::elicit::ElicitError;
use factcal::fusion::{fuse_one, FusionConfig, FusionInput, Strategy};
use factcal::gateway::{GatewayMode, TokenAlternative};
use factcal::orchestrator::{self, RunOptions};
use factcal::prompts;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

const METRIC_TOL: f64 = 1e-12;
const METRIC_BUDGET: Duration = Duration::from_secs(30);
const REPLAY_BUDGET: Duration = Duration::from_secs(60);
const FUSION_SLACK: f64 = 0.02;
const SPEC_EXAMPLE_TOL: f64 = 1e-15;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{name}: got {got}, oracle {want}")
    })
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    // Mix of continuous confidences, values snapped to bin edges (ties and
    // boundary cases), binary and continuous labels.
    let snap = rng.random_bool(0.5);
    let binary = rng.random_bool(0.7);
    (0..n)
        .map(|_| {
            let c = if snap {
                f64::from(rng.random_range(0..=20u32)) / 20.0
            } else {
                rng.random::<f64>()
            };
            let y = if binary {
                f64::from(u8::from(rng.random_bool(0.5)))
            } else {
                rng.random::<f64>()
            };
            (c, y)
        })
        .collect()
}

fn metric_oracles() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = [0usize; 4];
    for n in [2usize, 10, 500] {
        for _ in 0..1000 {
            let pairs = random_instance(&mut rng, n);
            let (e, _) = calibration::ece(&pairs, 10).map_err(|e| e.to_string())?;
            close("ece", e, common::ece(&pairs, 10), METRIC_TOL)?;
            let b = calibration::brier(&pairs).map_err(|e| e.to_string())?;
            close("brier", b, common::brier(&pairs), METRIC_TOL)?;
            checked[0] += 1;
            checked[1] += 1;
            let binary = pairs.iter().all(|p| p.1 == 0.0 || p.1 == 1.0);
            match (binary, common::auroc(&pairs), calibration::auroc(&pairs)) {
                (true, Some(want), Ok(got)) => {
                    close("auroc", got, want, METRIC_TOL)?;
                    checked[2] += 1;
                }
                (true, None, Err(_)) | (false, _, Err(_)) => {}
                (_, want, got) => return Err(format!("auroc definedness: oracle {want:?}, library {got:?}")),
            }
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            match (common::spearman(&x, &y), calibration::spearman(&x, &y)) {
                (Some(want), Ok(got)) => {
                    close("spearman", got, want, METRIC_TOL)?;
                    checked[3] += 1;
                }
                (None, Err(_)) => {}
                (want, got) => return Err(format!("spearman definedness: oracle {want:?}, library {got:?}")),
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < METRIC_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "ece {} brier {} auroc {} spearman {} instances within {METRIC_TOL:e} in {:.2}s",
        checked[0],
        checked[1],
        checked[2],
        checked[3],
        elapsed.as_secs_f64()
    ))
}

fn formula_exactness() -> Result<String, String> {
    let mut tallies = 0;
    for total in 0..=20u32 {
        for s in 0..=total {
            if total > 0 {
                let got = gen_binary_confidence(&SupportTally::binary(s, total)).map_err(|e| e.to_string())?;
                ensure(got == f64::from(s) / f64::from(total), || {
                    format!("gen_binary {s}/{total} = {got}")
                })?;
            }
            for c in 0..=total - s {
                let t = SupportTally::multi(s, c, total - s - c);
                let got = gen_multi_confidence(&t, 0.0);
                let want = if s + c == 0 {
                    0.0
                } else {
                    f64::from(s) / f64::from(s + c)
                };
                ensure(got == want, || format!("gen_multi {t:?} = {got}, want {want}"))?;
                tallies += 1;
            }
        }
    }
    ensure(gen_binary_confidence(&SupportTally::binary(0, 0)).is_err(), || {
        "empty tally accepted".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let (a, b, alpha): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let input = FusionInput::new(a, b).map_err(|e| e.to_string())?;
        let base = FusionConfig {
            alpha,
            gamma_a: rng.random_range(0.0..1.0),
            k: rng.random(),
            ..FusionConfig::new(Strategy::Wavg)
        };
        let wavg = fuse_one(input, &base);
        let adj0 = fuse_one(
            input,
            &FusionConfig {
                strategy: Strategy::AdjustedAlpha,
                gamma_a: 0.0,
                ..base
            },
        );
        let damp0 = fuse_one(
            input,
            &FusionConfig {
                strategy: Strategy::DampedFusion,
                k: 0.0,
                ..base
            },
        );
        ensure(adj0 == wavg, || {
            format!("gamma_a=0: {adj0} != {wavg} at {a},{b},{alpha}")
        })?;
        ensure(damp0 == wavg, || format!("k=0: {damp0} != {wavg} at {a},{b},{alpha}"))?;
        for strategy in Strategy::ALL {
            let v = fuse_one(input, &FusionConfig { strategy, ..base });
            ensure((0.0..=1.0).contains(&v), || {
                format!("{strategy} = {v} at {a},{b},{alpha}")
            })?;
        }
    }
    Ok(format!("{tallies} tallies exact; 10000 fusion triples"))
}

fn macro_vs_atomic() -> Result<String, String> {
    let mut claims = Vec::new();
    let mut confs = Vec::new();
    for q in ["r1", "r2"] {
        for (pos, (conf, label)) in [(0.0, 1u8), (1.0, 0u8)].into_iter().enumerate() {
            let mut c = AtomicClaim::new(q, 0, pos as u32, format!("claim {pos} of {q}"));
            c.label = Some(label);
            confs.push(ClaimConfidence {
                claim_id: c.claim_id.clone(),
                method: Method::DisRating,
                score: conf,
            });
            claims.push(c);
        }
    }
    let atomic = calibration::atomic_pairs(&claims, &confs).map_err(|e| e.to_string())?;
    let responses = aggregate_macro(&claims, &confs).map_err(|e| e.to_string())?;
    let macro_pairs: Vec<(f64, f64)> = responses.iter().map(|r| (r.confidence, r.factuality)).collect();
    let m = calibration::ece(&macro_pairs, 10).map_err(|e| e.to_string())?.0;
    let a = calibration::ece(&atomic, 10).map_err(|e| e.to_string())?.0;
    close("macro ece", m, common::ece(&macro_pairs, 10), METRIC_TOL)?;
    close("atomic ece", a, common::ece(&atomic, 10), METRIC_TOL)?;
    ensure(m == 0.0, || format!("macro ECE {m}"))?;
    ensure(a >= 0.5, || format!("atomic ECE {a}"))?;
    Ok(format!("macro ECE {m}, atomic ECE {a}"))
}

fn prompt_goldens() -> Result<String, String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prompts");
    let claim = "Ines Varga was born in Bergen.";
    let context = "Ines Varga";
    let sample = "Ines Varga was born in Bergen. Ines Varga worked as a chemist.";
    let methods = [
        Method::GenBinary,
        Method::GenMulti,
        Method::DisSingle,
        Method::DisContext,
        Method::DisRating,
    ];
    for method in methods {
        let rendered = prompts::render_for_method(method, claim, context, sample).map_err(|e| e.to_string())?;
        let path = dir.join(format!("{}.txt", method.file_stem()));
        let golden = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(rendered.as_bytes() == golden.as_slice(), || {
            format!("{method} differs from {}", path.display())
        })?;
    }
    Ok("5 templates byte-identical".into())
}

fn e2e_replay() -> Result<String, String> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e");
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = RunOptions {
        out_dir: out.path().to_path_buf(),
        mode: Some(GatewayMode::Replay),
        ..Default::default()
    };
    let start = Instant::now();
    let outcome = orchestrator::run(&fixture.join("config.toml"), &opts).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(elapsed < REPLAY_BUDGET, || format!("replay took {elapsed:?}"))?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let manifest = read(&outcome.run_dir.join("manifest.json"))?;
    ensure(manifest == read(&fixture.join("golden/manifest.json"))?, || {
        "manifest differs from golden".into()
    })?;
    let report = orchestrator::report(&outcome.run_dir).map_err(|e| e.to_string())?;
    ensure(report.as_bytes() == read(&fixture.join("golden/report.txt"))?, || {
        "report differs from golden".into()
    })?;
    // The manifest pins output digests; make sure they describe the files on disk.
    outcome.manifest.verify(&outcome.run_dir).map_err(|e| e.to_string())?;
    let files: usize = outcome.manifest.stages.iter().map(|s| s.outputs.len()).sum();
    Ok(format!(
        "{} stages, {files} output digests match golden in {:.2}s",
        outcome.manifest.stages.len(),
        elapsed.as_secs_f64()
    ))
}

fn fusion_direction() -> Result<String, String> {
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let truth = Beta::new(2.0, 2.0).map_err(|e| e.to_string())?;
    let noise = Normal::new(0.0, 0.15).map_err(|e| e.to_string())?;
    let bias = 0.05;
    let (mut a, mut b, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let p: f64 = truth.sample(&mut rng);
        y.push(f64::from(u8::from(rng.random_bool(p))));
        a.push((p + bias + noise.sample(&mut rng)).clamp(0.0, 1.0));
        b.push((p + bias + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    let ece_of = |scores: &[f64]| -> Result<f64, String> {
        let pairs: Vec<(f64, f64)> = scores.iter().copied().zip(y.iter().copied()).collect();
        let got = calibration::ece(&pairs, 10).map_err(|e| e.to_string())?.0;
        let want = common::ece(&pairs, 10);
        close("ece", got, want, 1e-9)?;
        Ok(want)
    };
    let fused = |strategy| -> Vec<f64> {
        let cfg = FusionConfig::new(strategy);
        a.iter()
            .zip(&b)
            .map(|(&x, &z)| fuse_one(FusionInput { a: x, b: z }, &cfg))
            .collect()
    };
    let single = ece_of(&a)?.min(ece_of(&b)?);
    let w = ece_of(&fused(Strategy::Wavg))?;
    let adj = ece_of(&fused(Strategy::AdjustedAlpha))?;
    let damp = ece_of(&fused(Strategy::DampedFusion))?;
    let summary = format!("adjusted {adj:.4} damped {damp:.4} wavg {w:.4} best single {single:.4}");
    ensure(adj <= w && damp <= w && w <= single + FUSION_SLACK, || summary.clone())?;
    Ok(summary)
}

fn application_monotonicity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let responses: Vec<ResponseScore> = (0..400)
        .map(|i| {
            let confidence = f64::from(rng.random_range(0..=40u32)) / 40.0;
            ResponseScore {
                query_id: format!("q{i:03}"),
                method: "dis_rating".into(),
                confidence,
                // Comonotone: factuality is a non-decreasing function of confidence.
                factuality: confidence.powi(2),
            }
        })
        .collect();
    let mut means = Vec::new();
    for rate in [0.0, 0.05, 0.075, 0.10] {
        let out = selective_qa(&responses, SelectivePolicy::RejectFraction(rate)).map_err(|e| e.to_string())?;
        means.push(out.mean_factuality_kept.ok_or("nothing kept")?);
    }
    ensure(means.windows(2).all(|w| w[0] <= w[1]), || {
        format!("kept factuality {means:?}")
    })?;

    let mut claims = Vec::new();
    let mut confs = Vec::new();
    let pool = ["Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta", "Eta", "Theta"];
    for sample in 0..=6u32 {
        for pos in 0..8u32 {
            let word = pool.choose(&mut rng).expect("pool");
            let text = if rng.random_bool(0.5) {
                format!("{word} is a fact.")
            } else {
                format!("  {} IS A FACT. ", word)
            };
            let c = AtomicClaim::new("q1", sample, pos, text);
            confs.push(ClaimConfidence {
                claim_id: c.claim_id.clone(),
                method: Method::DisRating,
                score: f64::from(rng.random_range(0..=10u32)) / 10.0,
            });
            claims.push(c);
        }
    }
    let mut prev: Option<BTreeSet<String>> = None;
    let mut sizes = Vec::new();
    for step in 0..=10 {
        let tau = f64::from(step) / 10.0;
        let kept = retain_claims(&claims, &confs, tau, 5).map_err(|e| e.to_string())?;
        let texts: BTreeSet<String> = kept
            .iter()
            .map(|r| r.text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
            .collect();
        if let Some(p) = &prev {
            ensure(texts.is_subset(p), || format!("retained set grew at tau {tau}"))?;
        }
        sizes.push(kept.len());
        prev = Some(texts);
    }
    ensure(sizes.windows(2).all(|w| w[0] >= w[1]), || format!("sizes {sizes:?}"))?;
    Ok(format!("kept factuality {means:.4?}; reunion sizes {sizes:?}"))
}

fn alt(token: &str, probability: f64) -> TokenAlternative {
    TokenAlternative {
        token: token.to_string(),
        probability,
    }
}

fn p_true_extraction() -> Result<String, String> {
    // Hand classification: T counts toward "true", F toward "false", - neither.
    let pool: [(&str, char); 10] = [
        ("True", 'T'),
        (" true", 'T'),
        ("TRUE.", 'T'),
        ("False", 'F'),
        (" false\n", 'F'),
        ("FALSE,", 'F'),
        ("Yes", '-'),
        ("untrue", '-'),
        ("Tru", '-'),
        ("falsehood", '-'),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut errors = 0;
    for mask in 0u32..1024 {
        let mut alts = Vec::new();
        let (mut t, mut f) = (0.0f64, 0.0f64);
        for (i, (token, class)) in pool.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            // Dyadic probabilities keep every partial sum exact.
            let p = 0.5f64.powi(i as i32 + 1);
            alts.push(alt(token, p));
            match class {
                'T' => t += p,
                'F' => f += p,
                _ => {}
            }
        }
        alts.shuffle(&mut rng);
        let got = extract_p_true(&alts, PTrueMode::Normalized);
        if t + f == 0.0 {
            ensure(matches!(got, Err(ElicitError::NoTruthToken)), || {
                format!("mask {mask:#b}: {got:?}")
            })?;
            errors += 1;
        } else {
            let want = t / (t + f);
            ensure(matches!(got, Ok(v) if v == want), || {
                format!("mask {mask:#b}: {got:?}, want {want}")
            })?;
            let raw = extract_p_true(&alts, PTrueMode::Raw);
            ensure(matches!(raw, Ok(v) if v == t), || {
                format!("mask {mask:#b} raw: {raw:?}, want {t}")
            })?;
        }
    }
    let examples: [(&[TokenAlternative], f64); 2] = [
        (&[alt("True", 0.8), alt("False", 0.2)], 0.8),
        (&[alt(" true", 0.45), alt("True", 0.25), alt("False", 0.3)], 0.7),
    ];
    for (alts, want) in examples {
        let got = extract_p_true(alts, PTrueMode::Normalized).map_err(|e| e.to_string())?;
        close("p_true example", got, want, SPEC_EXAMPLE_TOL)?;
    }
    ensure(
        extract_p_true(&[alt("Maybe", 0.9)], PTrueMode::Normalized).is_err(),
        || "Maybe accepted".into(),
    )?;
    Ok(format!("1024 subsets exact, {errors} missing-token errors"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 8] = [
        ("metric oracle equivalence", metric_oracles),
        ("formula exactness", formula_exactness),
        ("macro vs atomic", macro_vs_atomic),
        ("prompt bit-exactness", prompt_goldens),
        ("end-to-end replay", e2e_replay),
        ("fusion direction", fusion_direction),
        ("application monotonicity", application_monotonicity),
        ("p(true) extraction", p_true_extraction),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
