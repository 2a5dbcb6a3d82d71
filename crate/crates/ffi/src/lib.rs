//! C ABI over the factcal metrics, fusion, elicitation parsers, prompt
//! rendering and cassette lookup.
//!
//! Every fallible function returns a [`FactcalStatus`] and writes its result
//! through an out-pointer. On failure a message is kept per thread and can be
//! read with [`factcal_last_error`]. Handles are opaque and must be released
//! with their `_free` function; strings returned by the library are released
//! with [`factcal_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use factcal::calibration;
use factcal::corpus::Method;
use factcal::elicit::discriminative::{extract_p_true, parse_rating, PTrueMode};
use factcal::elicit::generative::{gen_binary_confidence, gen_multi_confidence, SupportTally};
use factcal::elicit::ElicitError;
use factcal::fusion::{fuse_one, FusionConfig, FusionInput, Strategy};
use factcal::gateway::{fingerprint, Cassette, SamplingParams, TokenAlternative};
use factcal::prompts;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The quantity is not defined for this input (single-class AUROC,
    /// constant Spearman input, no truth token, no rating).
    Undefined = 3,
    Io = 4,
    CassetteMiss = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactcalStrategy {
    Wavg = 0,
    AdjustedAlpha = 1,
    DampedFusion = 2,
    MinConf = 3,
    Hmean = 4,
    ProdConf = 5,
}

impl From<FactcalStrategy> for Strategy {
    fn from(s: FactcalStrategy) -> Self {
        match s {
            FactcalStrategy::Wavg => Strategy::Wavg,
            FactcalStrategy::AdjustedAlpha => Strategy::AdjustedAlpha,
            FactcalStrategy::DampedFusion => Strategy::DampedFusion,
            FactcalStrategy::MinConf => Strategy::MinConf,
            FactcalStrategy::Hmean => Strategy::Hmean,
            FactcalStrategy::ProdConf => Strategy::ProdConf,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactcalMethod {
    GenBinary = 0,
    GenMulti = 1,
    DisSingle = 2,
    DisContext = 3,
    DisRating = 4,
}

impl From<FactcalMethod> for Method {
    fn from(m: FactcalMethod) -> Self {
        match m {
            FactcalMethod::GenBinary => Method::GenBinary,
            FactcalMethod::GenMulti => Method::GenMulti,
            FactcalMethod::DisSingle => Method::DisSingle,
            FactcalMethod::DisContext => Method::DisContext,
            FactcalMethod::DisRating => Method::DisRating,
        }
    }
}

/// Growable list of (confidence, label) pairs.
pub struct FactcalPairs {
    pairs: Vec<(f64, f64)>,
}

/// A cassette loaded into memory.
pub struct FactcalCassette {
    cassette: Cassette,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FactcalStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(FactcalStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(e: impl ToString) -> Self {
        Failure(FactcalStatus::InvalidArgument, e.to_string())
    }

    fn undefined(e: impl ToString) -> Self {
        Failure(FactcalStatus::Undefined, e.to_string())
    }
}

fn metric_failure(e: calibration::MetricError) -> Failure {
    use calibration::MetricError::*;
    match e {
        SingleClass | Constant | TooShort => Failure::undefined(e),
        _ => Failure::invalid(e),
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FactcalStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FactcalStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FactcalStatus::Internal
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::invalid("result contains a NUL byte"))
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next factcal call on the same thread.
#[no_mangle]
pub extern "C" fn factcal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn factcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn factcal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn factcal_pairs_new() -> *mut FactcalPairs {
    Box::into_raw(Box::new(FactcalPairs { pairs: Vec::new() }))
}

/// # Safety
/// `pairs` must come from [`factcal_pairs_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn factcal_pairs_free(pairs: *mut FactcalPairs) {
    if !pairs.is_null() {
        drop(Box::from_raw(pairs));
    }
}

/// Appends one pair. Confidence and label must lie in [0, 1].
///
/// # Safety
/// `pairs` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn factcal_pairs_push(pairs: *mut FactcalPairs, confidence: f64, label: f64) -> FactcalStatus {
    guard(|| {
        let p = out(pairs, "pairs")?;
        for v in [confidence, label] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Failure::invalid(format!("{v} outside [0, 1]")));
            }
        }
        p.pairs.push((confidence, label));
        Ok(())
    })
}

/// Number of pairs, 0 for NULL.
///
/// # Safety
/// `pairs` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn factcal_pairs_len(pairs: *const FactcalPairs) -> usize {
    pairs.as_ref().map_or(0, |p| p.pairs.len())
}

unsafe fn with_pairs(
    pairs: *const FactcalPairs,
    result: *mut f64,
    f: impl FnOnce(&[(f64, f64)]) -> Result<f64, calibration::MetricError>,
) -> FactcalStatus {
    guard(|| {
        let p = pairs.as_ref().ok_or_else(|| Failure::null("pairs"))?;
        let r = out(result, "out")?;
        *r = f(&p.pairs).map_err(metric_failure)?;
        Ok(())
    })
}

/// Expected calibration error with `bins` equal-width bins.
///
/// # Safety
/// `pairs` must be a live handle and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_pairs_ece(pairs: *const FactcalPairs, bins: usize, result: *mut f64) -> FactcalStatus {
    with_pairs(pairs, result, |p| calibration::ece(p, bins).map(|(e, _)| e))
}

/// # Safety
/// `pairs` must be a live handle and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_pairs_brier(pairs: *const FactcalPairs, result: *mut f64) -> FactcalStatus {
    with_pairs(pairs, result, calibration::brier)
}

/// Needs binary labels with both classes present; otherwise `Undefined` or
/// `InvalidArgument`.
///
/// # Safety
/// `pairs` must be a live handle and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_pairs_auroc(pairs: *const FactcalPairs, result: *mut f64) -> FactcalStatus {
    with_pairs(pairs, result, calibration::auroc)
}

/// Spearman correlation between the confidences and labels of the list.
///
/// # Safety
/// `pairs` must be a live handle and `result` writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_pairs_spearman(pairs: *const FactcalPairs, result: *mut f64) -> FactcalStatus {
    with_pairs(pairs, result, |p| {
        let (x, y): (Vec<f64>, Vec<f64>) = p.iter().copied().unzip();
        calibration::spearman(&x, &y)
    })
}

/// Spearman correlation of two arrays of length `n`.
///
/// # Safety
/// `x` and `y` must point to `n` readable values and `result` be writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_spearman(x: *const f64, y: *const f64, n: usize, result: *mut f64) -> FactcalStatus {
    guard(|| {
        let x = slice(x, n, "x")?;
        let y = slice(y, n, "y")?;
        *out(result, "out")? = calibration::spearman(x, y).map_err(metric_failure)?;
        Ok(())
    })
}

/// Fuses two confidences `a` (generative) and `b` (discriminative).
///
/// # Safety
/// `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_fuse(
    a: f64,
    b: f64,
    strategy: FactcalStrategy,
    alpha: f64,
    gamma_a: f64,
    k: f64,
    result: *mut f64,
) -> FactcalStatus {
    guard(|| {
        let r = out(result, "out")?;
        let cfg = FusionConfig {
            strategy: strategy.into(),
            alpha,
            gamma_a,
            k,
        };
        cfg.validate().map_err(Failure::invalid)?;
        let input = FusionInput::new(a, b).map_err(Failure::invalid)?;
        *r = fuse_one(input, &cfg);
        Ok(())
    })
}

/// `supported / total`.
///
/// # Safety
/// `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_gen_binary(supported: u32, total: u32, result: *mut f64) -> FactcalStatus {
    guard(|| {
        let r = out(result, "out")?;
        if supported > total {
            return Err(Failure::invalid(format!("{supported} supported of {total}")));
        }
        *r = gen_binary_confidence(&SupportTally::binary(supported, total)).map_err(Failure::invalid)?;
        Ok(())
    })
}

/// `supported / (supported + conflicting)`, or `fallback` when both are 0.
///
/// # Safety
/// `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_gen_multi(
    supported: u32,
    conflicting: u32,
    fallback: f64,
    result: *mut f64,
) -> FactcalStatus {
    guard(|| {
        let r = out(result, "out")?;
        if !(0.0..=1.0).contains(&fallback) {
            return Err(Failure::invalid(format!("fallback {fallback} outside [0, 1]")));
        }
        *r = gen_multi_confidence(&SupportTally::multi(supported, conflicting, 0), fallback);
        Ok(())
    })
}

/// P(true) from `n` first-token alternatives. With `raw` false the mass on
/// "true" is normalized by the mass on "true" and "false". `Undefined` when
/// neither token is present.
///
/// # Safety
/// `tokens` must hold `n` NUL-terminated strings and `probabilities` `n`
/// values; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_extract_p_true(
    tokens: *const *const c_char,
    probabilities: *const f64,
    n: usize,
    raw: bool,
    result: *mut f64,
) -> FactcalStatus {
    guard(|| {
        let r = out(result, "out")?;
        let tokens = slice(tokens, n, "tokens")?;
        let probs = slice(probabilities, n, "probabilities")?;
        let mut alts = Vec::with_capacity(n);
        for (&t, &p) in tokens.iter().zip(probs) {
            alts.push(TokenAlternative {
                token: text(t, "token")?.to_string(),
                probability: p,
            });
        }
        let mode = if raw { PTrueMode::Raw } else { PTrueMode::Normalized };
        *r = extract_p_true(&alts, mode).map_err(|e| match e {
            ElicitError::NoTruthToken => Failure::undefined(e),
            other => Failure::invalid(other),
        })?;
        Ok(())
    })
}

/// Parses a `$n$` rating. Writes the 0-10 value and whether the model's
/// number had to be clamped. `Undefined` when no rating is found.
///
/// # Safety
/// `response` must be a NUL-terminated string; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_parse_rating(
    response: *const c_char,
    value: *mut u8,
    clamped: *mut bool,
) -> FactcalStatus {
    guard(|| {
        let s = text(response, "response")?;
        let v = out(value, "value")?;
        let c = out(clamped, "clamped")?;
        let rating = parse_rating(s).ok_or_else(|| Failure::undefined("no $n$ rating in response"))?;
        *v = rating.value;
        *c = rating.clamped;
        Ok(())
    })
}

/// Renders the elicitation prompt for one claim. `context` is used by
/// Dis-Context and Dis-Rating, `sample` by the generative methods; unused
/// arguments may be NULL. The result is freed with [`factcal_string_free`].
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `result` writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_render_prompt(
    method: FactcalMethod,
    claim: *const c_char,
    context: *const c_char,
    sample: *const c_char,
    result: *mut *mut c_char,
) -> FactcalStatus {
    guard(|| {
        let r = out(result, "out")?;
        let optional = |p: *const c_char, what| if p.is_null() { Ok("") } else { text(p, what) };
        let claim = text(claim, "claim")?;
        let context = optional(context, "context")?;
        let sample = optional(sample, "sample")?;
        let m = Method::from(method);
        if m.is_generative() && sample.is_empty() {
            return Err(Failure::invalid(format!("{m} needs a sample")));
        }
        if matches!(method, FactcalMethod::DisContext | FactcalMethod::DisRating) && context.is_empty() {
            return Err(Failure::invalid(format!("{m} needs a context")));
        }
        let rendered = prompts::render_for_method(m, claim, context, sample).map_err(Failure::invalid)?;
        *r = owned_string(rendered)?;
        Ok(())
    })
}

/// Request fingerprint as used for cassette keys (64 hex characters).
///
/// # Safety
/// `model` and `prompt` must be NUL-terminated; `result` writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn factcal_fingerprint(
    model: *const c_char,
    prompt: *const c_char,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    logprobs_top_k: u32,
    sample_index: u32,
    result: *mut *mut c_char,
) -> FactcalStatus {
    guard(|| {
        let r = out(result, "out")?;
        let params = SamplingParams {
            temperature,
            top_p,
            max_tokens,
            logprobs_top_k,
        };
        params.validate().map_err(Failure::invalid)?;
        let fp = fingerprint(text(model, "model")?, text(prompt, "prompt")?, &params, sample_index);
        *r = owned_string(fp)?;
        Ok(())
    })
}

/// Loads a cassette file.
///
/// # Safety
/// `path` must be NUL-terminated; `result` writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_cassette_open(
    path: *const c_char,
    result: *mut *mut FactcalCassette,
) -> FactcalStatus {
    guard(|| {
        let r = out(result, "out")?;
        let p = text(path, "path")?;
        let cassette = Cassette::load(Path::new(p)).map_err(|e| Failure(FactcalStatus::Io, e.to_string()))?;
        *r = Box::into_raw(Box::new(FactcalCassette { cassette }));
        Ok(())
    })
}

/// # Safety
/// `cassette` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn factcal_cassette_len(cassette: *const FactcalCassette) -> usize {
    cassette.as_ref().map_or(0, |c| c.cassette.len())
}

/// Completion text recorded under `fingerprint`, or `CassetteMiss`. The
/// result is freed with [`factcal_string_free`].
///
/// # Safety
/// `cassette` must be a live handle, `fingerprint` NUL-terminated and
/// `result` writable.
#[no_mangle]
pub unsafe extern "C" fn factcal_cassette_lookup(
    cassette: *const FactcalCassette,
    fingerprint: *const c_char,
    result: *mut *mut c_char,
) -> FactcalStatus {
    guard(|| {
        let c = cassette.as_ref().ok_or_else(|| Failure::null("cassette"))?;
        let r = out(result, "out")?;
        let fp = text(fingerprint, "fingerprint")?;
        let hit = c
            .cassette
            .get(fp)
            .ok_or_else(|| Failure(FactcalStatus::CassetteMiss, format!("no recording for {fp}")))?;
        *r = owned_string(hit.text.clone())?;
        Ok(())
    })
}

/// # Safety
/// `cassette` must come from [`factcal_cassette_open`] and not have been
/// freed.
#[no_mangle]
pub unsafe extern "C" fn factcal_cassette_free(cassette: *mut FactcalCassette) {
    if !cassette.is_null() {
        drop(Box::from_raw(cassette));
    }
}
