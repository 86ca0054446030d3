//! C ABI over the pure-compute parts of `seqdistill`.
//!
//! Every fallible function returns an [`SdStatus`]; on failure the message is
//! available from [`sd_last_error`] on the same thread. Objects returned
//! through `out` pointers are owned by the caller and released with the
//! matching `*_free` function. Character offsets count Unicode scalar values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use seqdistill::das;
use seqdistill::divergence::{self, SentenceTriple, SentenceType};
use seqdistill::filters::{self, MarkerTable, RejectReason, RepetitionConfig};
use seqdistill::segmenter::{self, SegmenterConfig};
use seqdistill::seqkl::{self, SeqDistribution, ToyLm};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// The input was evaluated and rejected; see the reason output.
    Rejected = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdSentenceType {
    Teacher = 0,
    Student = 1,
    Shared = 2,
    Boosted = 3,
}

impl From<SentenceType> for SdSentenceType {
    fn from(t: SentenceType) -> Self {
        match t {
            SentenceType::Teacher => SdSentenceType::Teacher,
            SentenceType::Student => SdSentenceType::Student,
            SentenceType::Shared => SdSentenceType::Shared,
            SentenceType::Boosted => SdSentenceType::Boosted,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdRejectReason {
    None = 0,
    TooLong = 1,
    FunctionCall = 2,
    MissingThink = 3,
    MissingAnswer = 4,
    RepetitionNgram = 5,
    RepetitionParagraph = 6,
    MalformedMarkup = 7,
    Error = 8,
}

impl From<RejectReason> for SdRejectReason {
    fn from(r: RejectReason) -> Self {
        match r {
            RejectReason::TooLong => SdRejectReason::TooLong,
            RejectReason::FunctionCall => SdRejectReason::FunctionCall,
            RejectReason::MissingThink => SdRejectReason::MissingThink,
            RejectReason::MissingAnswer => SdRejectReason::MissingAnswer,
            RejectReason::RepetitionNgram => SdRejectReason::RepetitionNgram,
            RejectReason::RepetitionParagraph => SdRejectReason::RepetitionParagraph,
            RejectReason::MalformedMarkup => SdRejectReason::MalformedMarkup,
            RejectReason::Error => SdRejectReason::Error,
        }
    }
}

/// Sentence segmenter configuration.
pub struct SdSegmenter {
    cfg: SegmenterConfig,
}

/// Sentence spans produced by [`sd_segment`].
pub struct SdSpans {
    spans: Vec<(usize, usize)>,
}

/// Toy autoregressive model over a finite vocabulary.
pub struct SdToyLm {
    lm: ToyLm,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message of the last failed call on this thread, or null.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

type Failure = (SdStatus, String);

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> SdStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SdStatus::Ok,
        Ok(Err((status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SdStatus::Panic
        }
    }
}

fn invalid(e: impl ToString) -> Failure {
    (SdStatus::InvalidArgument, e.to_string())
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((SdStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (SdStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| (SdStatus::NullPointer, format!("{name} is null")))
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (SdStatus::NullPointer, format!("{name} is null")))
}

unsafe fn array<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err((SdStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Creates a segmenter. `punctuation` may be null for the default set.
///
/// # Safety
/// `punctuation` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_segmenter_new(
    min_chars: usize,
    punctuation: *const c_char,
    out_segmenter: *mut *mut SdSegmenter,
) -> SdStatus {
    guard(|| {
        let slot = out(out_segmenter, "out_segmenter")?;
        let mut cfg = SegmenterConfig {
            min_chars,
            ..SegmenterConfig::default()
        };
        if !punctuation.is_null() {
            cfg.punctuation = c_str(punctuation, "punctuation")?.to_owned();
        }
        if min_chars == 0 {
            return Err(invalid("min_chars must be >= 1"));
        }
        *slot = Box::into_raw(Box::new(SdSegmenter { cfg }));
        Ok(())
    })
}

/// # Safety
/// `segmenter` must be null or come from [`sd_segmenter_new`], and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sd_segmenter_free(segmenter: *mut SdSegmenter) {
    if !segmenter.is_null() {
        drop(Box::from_raw(segmenter));
    }
}

/// Splits `text` into sentence spans that partition it.
///
/// # Safety
/// Pointers must be valid; `text` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sd_segment(
    segmenter: *const SdSegmenter,
    text: *const c_char,
    out_spans: *mut *mut SdSpans,
) -> SdStatus {
    guard(|| {
        let seg = get(segmenter, "segmenter")?;
        let slot = out(out_spans, "out_spans")?;
        let spans = segmenter::segment(c_str(text, "text")?, &seg.cfg).map_err(invalid)?;
        let spans = spans.iter().map(|s| (s.char_start, s.char_end)).collect();
        *slot = Box::into_raw(Box::new(SdSpans { spans }));
        Ok(())
    })
}

/// Number of spans; 0 for null.
///
/// # Safety
/// `spans` must be null or come from [`sd_segment`].
#[no_mangle]
pub unsafe extern "C" fn sd_spans_len(spans: *const SdSpans) -> usize {
    spans.as_ref().map_or(0, |s| s.spans.len())
}

/// Character range `[start, end)` of span `index`.
///
/// # Safety
/// `spans` must come from [`sd_segment`]; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_spans_get(
    spans: *const SdSpans,
    index: usize,
    out_start: *mut usize,
    out_end: *mut usize,
) -> SdStatus {
    guard(|| {
        let s = get(spans, "spans")?;
        let (start, end) = *s
            .spans
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range for {} spans", s.spans.len())))?;
        *out(out_start, "out_start")? = start;
        *out(out_end, "out_end")? = end;
        Ok(())
    })
}

/// # Safety
/// `spans` must be null or come from [`sd_segment`], and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sd_spans_free(spans: *mut SdSpans) {
    if !spans.is_null() {
        drop(Box::from_raw(spans));
    }
}

/// Source type of one sentence. Fails with `InvalidArgument` when
/// `has_distilled` is false, since the boosted rule needs the distilled logprob.
///
/// # Safety
/// `out_type` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_classify_sentence(
    mean_lp_teacher: f64,
    mean_lp_student: f64,
    mean_lp_distilled: f64,
    has_distilled: bool,
    tau: f64,
    out_type: *mut SdSentenceType,
) -> SdStatus {
    guard(|| {
        let slot = out(out_type, "out_type")?;
        let triple = SentenceTriple {
            sentence_index: 0,
            mean_lp_teacher,
            mean_lp_student,
            mean_lp_distilled: has_distilled.then_some(mean_lp_distilled),
        };
        *slot = divergence::classify_sentence(&triple, tau).map_err(invalid)?.into();
        Ok(())
    })
}

/// Token-weighted fraction of sentences whose teacher gap reaches `tau`.
///
/// # Safety
/// The three arrays must each hold `len` elements; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_das_score(
    teacher_lps: *const f64,
    student_lps: *const f64,
    token_counts: *const usize,
    len: usize,
    tau: f64,
    out_score: *mut f64,
) -> SdStatus {
    guard(|| {
        let slot = out(out_score, "out_score")?;
        let t = array(teacher_lps, len, "teacher_lps")?;
        let s = array(student_lps, len, "student_lps")?;
        let c = array(token_counts, len, "token_counts")?;
        *slot = das::das_score(t, s, c, tau).map_err(invalid)?;
        Ok(())
    })
}

/// Repetition gate. `out_reason` is `None` when the text is kept, otherwise
/// the first reason (n-gram before paragraph).
///
/// # Safety
/// `text` is NUL-terminated; `out_reason` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_repetition_check(
    text: *const c_char,
    ngram_len: usize,
    min_repeats: usize,
    paragraph_repeats: usize,
    out_reason: *mut SdRejectReason,
) -> SdStatus {
    guard(|| {
        let slot = out(out_reason, "out_reason")?;
        let cfg = RepetitionConfig {
            ngram_len,
            min_repeats,
            paragraph_repeats,
        };
        cfg.validate().map_err(invalid)?;
        let verdict = filters::repetition_filter(c_str(text, "text")?, &cfg);
        *slot = verdict.reasons.first().map_or(SdRejectReason::None, |&r| r.into());
        Ok(())
    })
}

/// Rewrites channel-delimited markup to the `<think>` layout with the default markers.
///
/// On success `out_text` receives a new string (free with [`sd_string_free`])
/// and `out_reason` is `None`. A rejected text returns [`SdStatus::Rejected`],
/// sets `out_reason` and leaves `out_text` null; the diagnostic is in
/// [`sd_last_error`].
///
/// # Safety
/// `text` is NUL-terminated; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_structure_normalize(
    text: *const c_char,
    out_text: *mut *mut c_char,
    out_reason: *mut SdRejectReason,
) -> SdStatus {
    guard(|| {
        let text_slot = out(out_text, "out_text")?;
        let reason_slot = out(out_reason, "out_reason")?;
        *text_slot = ptr::null_mut();
        match filters::structure_filter(c_str(text, "text")?, &MarkerTable::default()) {
            Ok(normalized) => {
                let c = CString::new(normalized).map_err(invalid)?;
                *text_slot = c.into_raw();
                *reason_slot = SdRejectReason::None;
                Ok(())
            }
            Err(verdict) => {
                *reason_slot = verdict.reasons.first().map_or(SdRejectReason::Error, |&r| r.into());
                Err((SdStatus::Rejected, verdict.diagnostics.unwrap_or_default()))
            }
        }
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn store_lm(slot: &mut *mut SdToyLm, lm: ToyLm) {
    *slot = Box::into_raw(Box::new(SdToyLm { lm }));
}

/// Parses a toy model from its line-record text.
///
/// # Safety
/// `text` is NUL-terminated; `out_lm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_toylm_parse(text: *const c_char, out_lm: *mut *mut SdToyLm) -> SdStatus {
    guard(|| {
        let slot = out(out_lm, "out_lm")?;
        store_lm(slot, ToyLm::from_lines(c_str(text, "text")?).map_err(invalid)?);
        Ok(())
    })
}

/// Model that ends immediately with probability `p_eot`, otherwise emits one symbol first.
///
/// # Safety
/// `out_lm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_toylm_two_sequence(p_eot: f64, out_lm: *mut *mut SdToyLm) -> SdStatus {
    guard(|| {
        let slot = out(out_lm, "out_lm")?;
        store_lm(slot, seqkl::two_sequence(p_eot).map_err(invalid)?);
        Ok(())
    })
}

/// New model whose every conditional is tempered by `temperature`.
///
/// # Safety
/// `lm` must come from this library; `out_lm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_toylm_with_temperature(
    lm: *const SdToyLm,
    temperature: f64,
    out_lm: *mut *mut SdToyLm,
) -> SdStatus {
    guard(|| {
        let lm = get(lm, "lm")?;
        let slot = out(out_lm, "out_lm")?;
        store_lm(slot, lm.lm.apply_temperature(temperature).map_err(invalid)?);
        Ok(())
    })
}

/// # Safety
/// `lm` must be null or come from this library, and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sd_toylm_free(lm: *mut SdToyLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

unsafe fn distributions(
    p: *const SdToyLm,
    q: *const SdToyLm,
) -> Result<(SeqDistribution, SeqDistribution), Failure> {
    let p = seqkl::enumerate_distribution(&get(p, "p")?.lm).map_err(invalid)?;
    let q = seqkl::enumerate_distribution(&get(q, "q")?.lm).map_err(invalid)?;
    Ok((p, q))
}

/// Exact sequence-level KL(p || q) in nats.
///
/// # Safety
/// `p` and `q` must come from this library; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_seq_kl(p: *const SdToyLm, q: *const SdToyLm, out_value: *mut f64) -> SdStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let (p, q) = distributions(p, q)?;
        *slot = seqkl::seq_kl(&p, &q).map_err(invalid)?;
        Ok(())
    })
}

/// Exact sequence-level cross-entropy of q under samples from p.
///
/// # Safety
/// `p` and `q` must come from this library; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_seq_ce(p: *const SdToyLm, q: *const SdToyLm, out_value: *mut f64) -> SdStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let (p, q) = distributions(p, q)?;
        *slot = seqkl::seq_ce(&p, &q).map_err(invalid)?;
        Ok(())
    })
}

/// Exact sequence-level entropy.
///
/// # Safety
/// `p` must come from this library; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_seq_entropy(p: *const SdToyLm, out_value: *mut f64) -> SdStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let p = seqkl::enumerate_distribution(&get(p, "p")?.lm).map_err(invalid)?;
        *slot = seqkl::entropy(&p);
        Ok(())
    })
}
