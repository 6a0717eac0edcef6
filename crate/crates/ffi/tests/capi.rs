use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use opdeob::corpus::{build_program, CorpusConfig, CorpusProgram};
use opdeob::mir::{emit_asm, parse_asm};
use opdeob::obfuscator::Recipe;
use opdeob_ffi::*;

fn obfuscated_program() -> CorpusProgram {
    let cfg = CorpusConfig::new(3, 1000, vec!["AddOpaque(Arithmetic,4)".parse::<Recipe>().unwrap()]);
    (0..64).find_map(|i| build_program(&cfg, 2 * i + 1).0.ok()).expect("some program passes the gate")
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(opdeob_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn parse_round_trips_through_asm() {
    let cp = obfuscated_program();
    let text = CString::new(emit_asm(&cp.program)).unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(opdeob_program_parse(text.as_ptr(), &mut p), OpdeobStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(opdeob_program_to_asm(p, &mut s), OpdeobStatus::Ok);
        assert_eq!(CStr::from_ptr(s).to_str().unwrap(), text.to_str().unwrap());
        opdeob_string_free(s);
        opdeob_program_free(p);
    }
}

#[test]
fn oracle_mode_strips_every_injected_predicate() {
    let cp = obfuscated_program();
    let text = CString::new(emit_asm(&cp.program)).unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(opdeob_program_parse(text.as_ptr(), &mut p), OpdeobStatus::Ok);
        let (mut q, mut r) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(opdeob_deobfuscate(p, ptr::null(), ptr::null(), 7, &mut q, &mut r), OpdeobStatus::Ok);
        let mut stats = OpdeobStats::default();
        assert_eq!(opdeob_report_stats(r, &mut stats), OpdeobStatus::Ok);
        assert_eq!(stats.equivalent, 1);
        assert_eq!(stats.errors, 0);
        assert_eq!(stats.removed as usize, cp.log.opaque().count());

        let mut csv = ptr::null_mut();
        assert_eq!(opdeob_report_csv(r, &mut csv), OpdeobStatus::Ok);
        let table = CStr::from_ptr(csv).to_str().unwrap().to_string();
        assert!(table.starts_with("predicate,truth,predicted,action\n"));
        assert_eq!(table.lines().count() as u64, stats.predicates + 1);
        opdeob_string_free(csv);

        let mut s = ptr::null_mut();
        assert_eq!(opdeob_program_to_asm(q, &mut s), OpdeobStatus::Ok);
        let out = parse_asm(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        let remaining: usize = out.functions.iter().map(|f| opdeob::mir::enumerate_predicates(f).len()).sum();
        assert_eq!(remaining as u64, stats.predicates - stats.removed);
        opdeob_string_free(s);
        opdeob_report_free(r);
        opdeob_program_free(q);
        opdeob_program_free(p);
    }
}

#[test]
fn errors_are_reported_with_codes() {
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(opdeob_program_parse(ptr::null(), &mut p), OpdeobStatus::NullArgument);
        assert!(p.is_null());

        let bad = CString::new("func main(\n  nonsense\n").unwrap();
        assert_eq!(opdeob_program_parse(bad.as_ptr(), &mut p), OpdeobStatus::Parse);
        assert!(!last_error().is_empty());

        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(opdeob_program_parse(invalid.as_ptr().cast(), &mut p), OpdeobStatus::InvalidUtf8);

        let mut m = ptr::null_mut();
        let junk = CString::new("not a model").unwrap();
        assert_eq!(opdeob_model_load(junk.as_ptr(), &mut m), OpdeobStatus::BadModel);
        assert!(m.is_null());

        let mut stats = OpdeobStats::default();
        assert_eq!(opdeob_report_stats(ptr::null(), &mut stats), OpdeobStatus::NullArgument);

        opdeob_program_free(ptr::null_mut());
        opdeob_model_free(ptr::null_mut());
        opdeob_report_free(ptr::null_mut());
        opdeob_string_free(ptr::null_mut());
    }
}

#[test]
fn one_model_without_the_other_is_rejected() {
    let cp = obfuscated_program();
    let text = CString::new(emit_asm(&cp.program)).unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(opdeob_program_parse(text.as_ptr(), &mut p), OpdeobStatus::Ok);
        let fake = ptr::NonNull::<OpdeobModel>::dangling().as_ptr();
        let mut q = ptr::null_mut();
        assert_eq!(opdeob_deobfuscate(p, fake, ptr::null(), 0, &mut q, ptr::null_mut()), OpdeobStatus::NullArgument);
        assert!(q.is_null());
        opdeob_program_free(p);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("opdeob.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["opdeob_program_parse", "opdeob_deobfuscate", "opdeob_last_error", "OPDEOB_STATUS_OK", "OpdeobStats"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"opdeob.h\"\nint f(void) { OpdeobProgram *p = 0; OpdeobStatus s = opdeob_program_parse(\"\", &p); opdeob_program_free(p); return s == OPDEOB_STATUS_OK; }\n",
    )
    .unwrap();
    let status = match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(header.parent().unwrap()).arg(&src).status() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("no C compiler available ({e}); header compile check not run");
            return;
        }
    };
    assert!(status.success());
}

#[test]
fn saved_models_drive_model_mode() {
    use opdeob::features::{FeatureKind, TermCounts};
    use opdeob::learn::{ModelKind, ModelParams, Task, TrainedModel};
    use opdeob::obfuscator::Label;

    let docs: Vec<TermCounts> = ["a b", "a c", "x y", "x z", "x y q", "x z q"].iter().map(|d| TermCounts::from_doc(d)).collect();
    let labels = [Label::Normal, Label::Normal, Label::OpTrue, Label::OpFalse, Label::OpTrue, Label::OpFalse];
    let save = |task| {
        let m = TrainedModel::train(&docs, &labels, task, ModelKind::Tree, &ModelParams::default(), FeatureKind::Tf, false).unwrap();
        CString::new(m.to_text().unwrap()).unwrap()
    };
    let (det_text, res_text) = (save(Task::Detection), save(Task::Deobfuscation));
    let cp = obfuscated_program();
    let text = CString::new(emit_asm(&cp.program)).unwrap();
    unsafe {
        let (mut det, mut res, mut p) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
        assert_eq!(opdeob_model_load(det_text.as_ptr(), &mut det), OpdeobStatus::Ok);
        assert_eq!(opdeob_model_load(res_text.as_ptr(), &mut res), OpdeobStatus::Ok);
        assert_eq!(opdeob_program_parse(text.as_ptr(), &mut p), OpdeobStatus::Ok);

        let mut q = ptr::null_mut();
        assert_eq!(opdeob_deobfuscate(p, res, det, 1, &mut q, ptr::null_mut()), OpdeobStatus::BadModel);
        assert!(last_error().contains("detection"));

        let mut r = ptr::null_mut();
        assert_eq!(opdeob_deobfuscate(p, det, res, 1, &mut q, &mut r), OpdeobStatus::Ok);
        let mut stats = OpdeobStats::default();
        assert_eq!(opdeob_report_stats(r, &mut stats), OpdeobStatus::Ok);
        assert_eq!(stats.equivalent, 1);
        opdeob_report_free(r);
        opdeob_program_free(q);
        opdeob_program_free(p);
        opdeob_model_free(det);
        opdeob_model_free(res);
    }
}
