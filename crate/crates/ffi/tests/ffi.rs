use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use factcal_ffi::*;

fn last_error() -> String {
    let p = factcal_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    factcal_string_free(s);
    out
}

#[test]
fn pairs_metrics() {
    unsafe {
        let p = factcal_pairs_new();
        for (c, y) in [(0.9, 1.0), (0.8, 1.0), (0.3, 0.0), (0.8, 0.0)] {
            assert_eq!(factcal_pairs_push(p, c, y), FactcalStatus::Ok);
        }
        assert_eq!(factcal_pairs_push(p, f64::NAN, 0.0), FactcalStatus::InvalidArgument);
        assert!(last_error().contains("NaN"));
        assert_eq!(factcal_pairs_len(p), 4);

        let mut v = 0.0;
        assert_eq!(factcal_pairs_auroc(p, &mut v), FactcalStatus::Ok);
        // Positives {0.9, 0.8} vs negatives {0.3, 0.8}: 1 + 1 + 1 + 0.5 of 4.
        assert_eq!(v, 0.875);
        assert_eq!(factcal_pairs_brier(p, &mut v), FactcalStatus::Ok);
        assert!((v - (0.01 + 0.04 + 0.09 + 0.64) / 4.0).abs() < 1e-15);
        assert_eq!(factcal_pairs_ece(p, 10, &mut v), FactcalStatus::Ok);
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(factcal_pairs_ece(p, 0, &mut v), FactcalStatus::InvalidArgument);
        assert_eq!(factcal_pairs_spearman(p, &mut v), FactcalStatus::Ok);
        assert_eq!(factcal_pairs_ece(p, 10, ptr::null_mut()), FactcalStatus::NullPointer);
        factcal_pairs_free(p);

        let empty = factcal_pairs_new();
        assert_eq!(factcal_pairs_brier(empty, &mut v), FactcalStatus::InvalidArgument);
        factcal_pairs_free(empty);
        assert_eq!(factcal_pairs_brier(ptr::null(), &mut v), FactcalStatus::NullPointer);
    }
}

#[test]
fn spearman_arrays() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [10.0, 20.0, 30.0, 40.0];
    let c = [5.0; 4];
    let mut v = 0.0;
    unsafe {
        assert_eq!(factcal_spearman(x.as_ptr(), y.as_ptr(), 4, &mut v), FactcalStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(
            factcal_spearman(x.as_ptr(), c.as_ptr(), 4, &mut v),
            FactcalStatus::Undefined
        );
        assert_eq!(
            factcal_spearman(ptr::null(), y.as_ptr(), 4, &mut v),
            FactcalStatus::NullPointer
        );
    }
}

#[test]
fn fusion_and_generative_scores() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(
            factcal_fuse(0.4, 0.6, FactcalStrategy::AdjustedAlpha, 0.5, 0.1, 0.02, &mut v),
            FactcalStatus::Ok
        );
        assert!((v - 0.496).abs() < 1e-15);
        assert_eq!(
            factcal_fuse(0.0, 0.7, FactcalStrategy::Hmean, 0.5, 0.1, 0.02, &mut v),
            FactcalStatus::Ok
        );
        assert_eq!(v, 0.0);
        assert_eq!(
            factcal_fuse(1.2, 0.7, FactcalStrategy::Wavg, 0.5, 0.1, 0.02, &mut v),
            FactcalStatus::InvalidArgument
        );
        assert_eq!(
            factcal_fuse(0.2, 0.7, FactcalStrategy::Wavg, 1.5, 0.1, 0.02, &mut v),
            FactcalStatus::InvalidArgument
        );

        assert_eq!(factcal_gen_binary(3, 4, &mut v), FactcalStatus::Ok);
        assert_eq!(v, 0.75);
        assert_eq!(factcal_gen_binary(0, 0, &mut v), FactcalStatus::InvalidArgument);
        assert_eq!(factcal_gen_binary(5, 4, &mut v), FactcalStatus::InvalidArgument);
        assert_eq!(factcal_gen_multi(1, 3, 0.0, &mut v), FactcalStatus::Ok);
        assert_eq!(v, 0.25);
        assert_eq!(factcal_gen_multi(0, 0, 0.5, &mut v), FactcalStatus::Ok);
        assert_eq!(v, 0.5);
    }
}

#[test]
fn p_true_and_rating() {
    let tokens: Vec<CString> = [" true", "True", "False", "Maybe"]
        .iter()
        .map(|t| CString::new(*t).unwrap())
        .collect();
    let ptrs: Vec<*const c_char> = tokens.iter().map(|t| t.as_ptr()).collect();
    let probs = [0.45, 0.25, 0.3, 0.9];
    let mut v = 0.0;
    unsafe {
        assert_eq!(
            factcal_extract_p_true(ptrs.as_ptr(), probs.as_ptr(), 3, false, &mut v),
            FactcalStatus::Ok
        );
        assert!((v - 0.7).abs() < 1e-15);
        assert_eq!(
            factcal_extract_p_true(ptrs.as_ptr(), probs.as_ptr(), 3, true, &mut v),
            FactcalStatus::Ok
        );
        assert!((v - 0.7).abs() < 1e-15);
        assert_eq!(
            factcal_extract_p_true(ptrs[3..].as_ptr(), probs[3..].as_ptr(), 1, false, &mut v),
            FactcalStatus::Undefined
        );

        let mut value = 0u8;
        let mut clamped = false;
        let text = CString::new("I'd say $7$.").unwrap();
        assert_eq!(
            factcal_parse_rating(text.as_ptr(), &mut value, &mut clamped),
            FactcalStatus::Ok
        );
        assert_eq!((value, clamped), (7, false));
        let text = CString::new("$12$").unwrap();
        assert_eq!(
            factcal_parse_rating(text.as_ptr(), &mut value, &mut clamped),
            FactcalStatus::Ok
        );
        assert_eq!((value, clamped), (10, true));
        let text = CString::new("seven").unwrap();
        assert_eq!(
            factcal_parse_rating(text.as_ptr(), &mut value, &mut clamped),
            FactcalStatus::Undefined
        );
    }
}

#[test]
fn prompts_match_goldens() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/prompts");
    let claim = CString::new("Ines Varga was born in Bergen.").unwrap();
    let context = CString::new("Ines Varga").unwrap();
    let sample = CString::new("Ines Varga was born in Bergen. Ines Varga worked as a chemist.").unwrap();
    let cases = [
        (FactcalMethod::GenBinary, "gen_binary"),
        (FactcalMethod::GenMulti, "gen_multi"),
        (FactcalMethod::DisSingle, "dis_single"),
        (FactcalMethod::DisContext, "dis_context"),
        (FactcalMethod::DisRating, "dis_rating"),
    ];
    for (method, stem) in cases {
        let mut out = ptr::null_mut();
        let status =
            unsafe { factcal_render_prompt(method, claim.as_ptr(), context.as_ptr(), sample.as_ptr(), &mut out) };
        assert_eq!(status, FactcalStatus::Ok);
        let rendered = unsafe { take(out) };
        assert_eq!(
            rendered,
            std::fs::read_to_string(golden.join(format!("{stem}.txt"))).unwrap()
        );
    }
    let mut out = ptr::null_mut();
    let status = unsafe {
        factcal_render_prompt(
            FactcalMethod::GenBinary,
            claim.as_ptr(),
            ptr::null(),
            ptr::null(),
            &mut out,
        )
    };
    assert_eq!(status, FactcalStatus::InvalidArgument);
    assert!(out.is_null());
}

#[test]
fn cassette_lookup() {
    let path = CString::new(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../core/tests/fixtures/e2e/cassette.jsonl")
            .to_str()
            .unwrap(),
    )
    .unwrap();
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(factcal_cassette_open(path.as_ptr(), &mut c), FactcalStatus::Ok);
        assert!(factcal_cassette_len(c) > 0);

        // Look up a recorded entry by its key.
        let first = std::fs::read_to_string(path.to_str().unwrap()).unwrap();
        let entry: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        let fp = CString::new(entry["fingerprint"].as_str().unwrap()).unwrap();
        let mut text = ptr::null_mut();
        assert_eq!(factcal_cassette_lookup(c, fp.as_ptr(), &mut text), FactcalStatus::Ok);
        assert_eq!(take(text), entry["result"]["text"].as_str().unwrap());

        let model = CString::new("nobody").unwrap();
        let prompt = CString::new("never asked").unwrap();
        let mut fp = ptr::null_mut();
        assert_eq!(
            factcal_fingerprint(model.as_ptr(), prompt.as_ptr(), 0.0, 0.95, 512, 0, 0, &mut fp),
            FactcalStatus::Ok
        );
        let mut text = ptr::null_mut();
        assert_eq!(factcal_cassette_lookup(c, fp, &mut text), FactcalStatus::CassetteMiss);
        assert_eq!(take(fp).len(), 64);
        factcal_cassette_free(c);

        let missing = CString::new("/nonexistent/cassette.jsonl").unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(factcal_cassette_open(missing.as_ptr(), &mut c), FactcalStatus::Io);
        assert!(c.is_null());
    }
}

fn target_profile_dir() -> PathBuf {
    // <target>/<profile>/deps/<test binary>
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let lib = target_profile_dir().join("libfactcal_ffi.a");
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = tempfile::tempdir().unwrap();
    let bin = exe.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compile failed"),
        Err(e) => {
            eprintln!("skipping: no C compiler ({cc}): {e}");
            return;
        }
    }
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
