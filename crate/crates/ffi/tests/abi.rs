use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dagi::baselines::{fit_linear, LinearScope};
use dagi::datagen::{generate, SynthConfig};
use dagi::graph::RoiGraph;
use dagi::model::{train, TrainConfig};
use dagi_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    dagi: PathBuf,
    linear: PathBuf,
    model: dagi::model::DagiModel,
    data: dagi::dataio::Dataset,
}

fn fixture() -> Fixture {
    let graph = RoiGraph::default_desikan_killiany();
    let cfg = SynthConfig {
        n_source: 48,
        n_target: 8,
        seed: 5,
        ..Default::default()
    };
    let syn = generate(&cfg, &graph).unwrap();
    let tcfg = TrainConfig {
        epochs: 3,
        seed: 5,
        ..Default::default()
    };
    let (model, _) = train(&syn.source, &graph, &tcfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dagi = dir.path().join("dagi.ckpt");
    let linear = dir.path().join("linear.ckpt");
    model.save(&dagi).unwrap();
    fit_linear(&syn.source, LinearScope::PerRoi)
        .unwrap()
        .save(&linear)
        .unwrap();
    Fixture {
        _dir: dir,
        dagi,
        linear,
        model,
        data: syn.source,
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dagi_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn load(p: &Path) -> *mut DagiModel {
    let mut h = ptr::null_mut();
    let st = unsafe { dagi_model_load(cpath(p).as_ptr(), &mut h) };
    assert_eq!(st, DagiStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    h
}

#[test]
fn imputes_and_classifies_like_the_library() {
    let f = fixture();
    let h = load(&f.dagi);
    let (mut v, mut p, mut q) = (0usize, 0usize, 0usize);
    unsafe {
        assert_eq!(dagi_model_dims(h, &mut v, &mut p, &mut q), DagiStatus::Ok);
        assert_eq!((v, p, q), (34, 3, 2));
        assert_eq!(dagi_model_has_classifier(h), 1);
        let first = CStr::from_ptr(dagi_model_roi_name(h, 0)).to_str().unwrap();
        assert_eq!(first, f.model.schema().roi_names[0]);
        assert!(dagi_model_roi_name(h, v).is_null());
        assert!(!dagi_model_target_name(h, q - 1).is_null());
    }
    for s in f.data.subjects.iter().take(4) {
        let mut out = vec![0.0; v * q];
        let mut prob = -1.0;
        unsafe {
            let x = s.shared.as_slice();
            assert_eq!(
                dagi_model_impute(h, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len()),
                DagiStatus::Ok
            );
            assert_eq!(
                dagi_model_label_probability(h, x.as_ptr(), x.len(), &mut prob),
                DagiStatus::Ok
            );
        }
        let want = f.model.forward(&s.shared).unwrap();
        assert_eq!(out.as_slice(), want.imputed.as_slice());
        assert_eq!(prob, f.model.sex_probability(&s.shared).unwrap());
    }
    unsafe { dagi_model_free(h) };
}

#[test]
fn baseline_checkpoints_load_without_a_classifier() {
    let f = fixture();
    let h = load(&f.linear);
    let x = f.data.subjects[0].shared.as_slice();
    let mut out = vec![0.0; 68];
    let mut prob = 0.0;
    unsafe {
        assert_eq!(dagi_model_has_classifier(h), 0);
        assert_eq!(
            dagi_model_impute(h, x.as_ptr(), x.len(), out.as_mut_ptr(), out.len()),
            DagiStatus::Ok
        );
        assert_eq!(
            dagi_model_label_probability(h, x.as_ptr(), x.len(), &mut prob),
            DagiStatus::Unsupported
        );
        dagi_model_free(h);
    }
    assert!(out.iter().all(|v| v.is_finite()));
    assert!(last_error().contains("classifier"));
}

#[test]
fn errors_map_to_status_codes() {
    let f = fixture();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(
            dagi_model_load(ptr::null(), &mut h),
            DagiStatus::NullPointer
        );
        let missing = cpath(&f.dagi.with_extension("missing"));
        assert_eq!(dagi_model_load(missing.as_ptr(), &mut h), DagiStatus::Io);
        assert!(h.is_null());
        assert!(!last_error().is_empty());

        let junk = f.dagi.with_extension("junk");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert_eq!(
            dagi_model_load(cpath(&junk).as_ptr(), &mut h),
            DagiStatus::Checkpoint
        );

        let h = load(&f.dagi);
        assert!(last_error().is_empty());
        let x = f.data.subjects[0].shared.as_slice();
        let mut small = vec![0.0; 10];
        assert_eq!(
            dagi_model_impute(h, x.as_ptr(), x.len(), small.as_mut_ptr(), small.len()),
            DagiStatus::BufferTooSmall
        );
        assert_eq!(
            dagi_model_impute(h, x.as_ptr(), x.len() - 1, small.as_mut_ptr(), 68),
            DagiStatus::InvalidArgument
        );
        assert_eq!(
            dagi_model_impute(ptr::null(), x.as_ptr(), x.len(), small.as_mut_ptr(), 68),
            DagiStatus::NullPointer
        );
        dagi_model_free(h);
        dagi_model_free(ptr::null_mut());
    }
}

#[test]
fn header_is_current_and_c_client_runs() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(crate_dir.join("include/dagi.h")).unwrap();
    for sym in [
        "dagi_model_load",
        "dagi_model_impute",
        "dagi_model_free",
        "DAGI_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    // Cargo leaves the cdylib beside this test binary in deps/ (and a copy
    // one level up after a plain build).
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let Some(profile_dir) = [deps, deps.parent().unwrap()]
        .into_iter()
        .find(|d| d.join("libdagi_ffi.so").exists())
    else {
        eprintln!("skipping C client: libdagi_ffi.so not built");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C client: no C compiler");
        return;
    }
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("client");
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/client.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg("-L")
        .arg(profile_dir)
        .arg(format!("-Wl,-rpath,{}", profile_dir.display()))
        .args(["-ldagi_ffi", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let x: Vec<String> = f.data.subjects[0]
        .shared
        .as_slice()
        .iter()
        .map(|v| format!("{v:.17e}"))
        .collect();
    let out = Command::new(&bin).arg(&f.dagi).args(&x).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let want = f.model.forward(&f.data.subjects[0].shared).unwrap().imputed;
    let got: Vec<f64> = stdout
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(got.len(), want.as_slice().len());
    for (g, w) in got.iter().zip(want.as_slice()) {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
    }
}
