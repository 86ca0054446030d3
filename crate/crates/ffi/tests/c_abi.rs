use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use seqdistill_ffi::*;

fn last_error() -> String {
    let p = sd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn segment_spans_partition_text() {
    let text = "First sentence here. Second one follows! And a third?";
    let c = CString::new(text).unwrap();
    unsafe {
        let mut seg = ptr::null_mut();
        assert_eq!(sd_segmenter_new(12, ptr::null(), &mut seg), SdStatus::Ok);
        let mut spans = ptr::null_mut();
        assert_eq!(sd_segment(seg, c.as_ptr(), &mut spans), SdStatus::Ok);
        let n = sd_spans_len(spans);
        assert_eq!(n, 3);
        let mut expected_start = 0;
        for i in 0..n {
            let (mut s, mut e) = (0, 0);
            assert_eq!(sd_spans_get(spans, i, &mut s, &mut e), SdStatus::Ok);
            assert_eq!(s, expected_start);
            expected_start = e;
        }
        assert_eq!(expected_start, text.chars().count());
        let (mut s, mut e) = (0, 0);
        assert_eq!(sd_spans_get(spans, n, &mut s, &mut e), SdStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        sd_spans_free(spans);
        sd_segmenter_free(seg);
    }
}

#[test]
fn null_and_bad_arguments_report_status() {
    unsafe {
        let mut spans = ptr::null_mut();
        assert_eq!(sd_segment(ptr::null(), ptr::null(), &mut spans), SdStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut seg = ptr::null_mut();
        assert_eq!(sd_segmenter_new(0, ptr::null(), &mut seg), SdStatus::InvalidArgument);
        let bad = [0xffu8 as std::ffi::c_char, 0];
        assert_eq!(sd_toylm_parse(bad.as_ptr(), &mut ptr::null_mut()), SdStatus::InvalidUtf8);
        // freeing null is a no-op
        sd_spans_free(ptr::null_mut());
        sd_toylm_free(ptr::null_mut());
        sd_string_free(ptr::null_mut());
    }
}

#[test]
fn classify_sentence_labels() {
    let tau = std::f64::consts::LN_2;
    let mut ty = SdSentenceType::Shared;
    unsafe {
        assert_eq!(sd_classify_sentence(-1.0, -2.0, -1.5, true, tau, &mut ty), SdStatus::Ok);
        assert_eq!(ty, SdSentenceType::Teacher);
        assert_eq!(sd_classify_sentence(-2.0, -1.0, -1.5, true, tau, &mut ty), SdStatus::Ok);
        assert_eq!(ty, SdSentenceType::Student);
        assert_eq!(sd_classify_sentence(-2.0, -2.1, -0.5, true, tau, &mut ty), SdStatus::Ok);
        assert_eq!(ty, SdSentenceType::Boosted);
        assert_eq!(sd_classify_sentence(-2.0, -2.1, -2.05, true, tau, &mut ty), SdStatus::Ok);
        assert_eq!(ty, SdSentenceType::Shared);
        assert_eq!(sd_classify_sentence(-2.0, -2.1, -2.05, true, 0.0, &mut ty), SdStatus::InvalidArgument);
        assert_eq!(sd_classify_sentence(-1.0, -2.0, 0.0, false, tau, &mut ty), SdStatus::InvalidArgument);
        assert!(last_error().contains("distilled"));
    }
}

#[test]
fn das_score_weights_by_tokens() {
    // gaps 1.0, 0.1, 0.9 against tau = 0.5: sentences 1 and 3 count
    let teacher = [-1.0, -1.0, -1.0];
    let student = [-2.0, -1.1, -1.9];
    let counts = [10usize, 5, 5];
    let mut score = f64::NAN;
    unsafe {
        assert_eq!(
            sd_das_score(teacher.as_ptr(), student.as_ptr(), counts.as_ptr(), 3, 0.5, &mut score),
            SdStatus::Ok
        );
        assert!((score - 0.75).abs() < 1e-12);
        assert_eq!(
            sd_das_score(teacher.as_ptr(), student.as_ptr(), counts.as_ptr(), 0, 0.5, &mut score),
            SdStatus::InvalidArgument
        );
    }
}

#[test]
fn repetition_check_reports_first_reason() {
    let looped = CString::new("one two three four five six seven eight ".repeat(3)).unwrap();
    let clean = CString::new("every word here is different from the others").unwrap();
    let mut reason = SdRejectReason::Error;
    unsafe {
        assert_eq!(sd_repetition_check(looped.as_ptr(), 8, 3, 2, &mut reason), SdStatus::Ok);
        assert_eq!(reason, SdRejectReason::RepetitionNgram);
        assert_eq!(sd_repetition_check(clean.as_ptr(), 8, 3, 2, &mut reason), SdStatus::Ok);
        assert_eq!(reason, SdRejectReason::None);
        assert_eq!(sd_repetition_check(clean.as_ptr(), 0, 3, 2, &mut reason), SdStatus::InvalidArgument);
    }
}

#[test]
fn structure_normalize_rewrites_and_rejects() {
    let harmony = CString::new(
        "<|channel|>analysis<|message|>Let me think.<|end|><|start|>assistant<|channel|>final<|message|>42<|return|>",
    )
    .unwrap();
    let mut text = ptr::null_mut();
    let mut reason = SdRejectReason::Error;
    unsafe {
        assert_eq!(sd_structure_normalize(harmony.as_ptr(), &mut text, &mut reason), SdStatus::Ok);
        assert_eq!(reason, SdRejectReason::None);
        assert_eq!(CStr::from_ptr(text).to_str().unwrap(), "<think>Let me think.</think>42");
        sd_string_free(text);

        let plain = CString::new("no reasoning at all").unwrap();
        assert_eq!(sd_structure_normalize(plain.as_ptr(), &mut text, &mut reason), SdStatus::Rejected);
        assert!(text.is_null());
        assert_eq!(reason, SdRejectReason::MissingThink);
    }
}

#[test]
fn toy_model_divergences() {
    unsafe {
        let (mut p, mut q) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(sd_toylm_two_sequence(0.75, &mut p), SdStatus::Ok);
        assert_eq!(sd_toylm_two_sequence(0.5, &mut q), SdStatus::Ok);
        let (mut kl, mut ce, mut h) = (0.0, 0.0, 0.0);
        assert_eq!(sd_seq_kl(p, q, &mut kl), SdStatus::Ok);
        assert_eq!(sd_seq_ce(p, q, &mut ce), SdStatus::Ok);
        assert_eq!(sd_seq_entropy(p, &mut h), SdStatus::Ok);
        let expected = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.130812).abs() < 1e-6);
        assert!((kl - (ce - h)).abs() < 1e-12);

        let mut cold = ptr::null_mut();
        assert_eq!(sd_toylm_with_temperature(p, 0.5, &mut cold), SdStatus::Ok);
        let mut h_cold = 0.0;
        assert_eq!(sd_seq_entropy(cold, &mut h_cold), SdStatus::Ok);
        assert!(h_cold < h);
        assert_eq!(sd_toylm_with_temperature(p, 0.0, &mut cold), SdStatus::InvalidArgument);

        sd_toylm_free(cold);
        sd_toylm_free(p);
        sd_toylm_free(q);
    }
}

#[test]
fn toy_model_parses_line_records() {
    let lm = seqdistill::seqkl::two_sequence(0.3).unwrap();
    let text = CString::new(lm.to_lines().unwrap()).unwrap();
    unsafe {
        let mut parsed = ptr::null_mut();
        assert_eq!(sd_toylm_parse(text.as_ptr(), &mut parsed), SdStatus::Ok);
        let mut h = 0.0;
        assert_eq!(sd_seq_entropy(parsed, &mut h), SdStatus::Ok);
        let expected = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((h - expected).abs() < 1e-12);
        sd_toylm_free(parsed);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/seqdistill.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["sd_segment", "sd_das_score", "sd_seq_kl", "sd_last_error", "SD_STATUS_OK"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-xc", "-std=c99", "-Wall", "-Werror"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}
