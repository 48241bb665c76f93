use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use psmm::netgraph::{BackboneSpec, BranchMode, FusionVariant, NetConfig};
use psmm::trainer::Model;
use psmm::Modality;
use psmm_ffi::*;

fn last_error() -> String {
    let p = psmm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn rank_pool_through_the_abi() {
    unsafe {
        let mut pool = ptr::null_mut();
        assert_eq!(psmm_rank_pool_new(1, &mut pool), PsmmStatus::InvalidArgument);
        assert!(pool.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(psmm_rank_pool_new(3, &mut pool), PsmmStatus::Ok);

        // prefix means of 0, 1, 2 are 0, 0.5, 1
        let frames = [0.0, 1.0, 2.0];
        let mut d = [f64::NAN];
        let mut obj = f64::NAN;
        assert_eq!(psmm_rank_pool_fit(pool, frames.as_ptr(), 1, d.as_mut_ptr(), &mut obj), PsmmStatus::Ok);
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-9, "{d:?}");
        assert!(obj.is_finite() && obj > 0.0);

        // two pixels, second one constant
        let frames = [0.0, 5.0, 1.0, 5.0, 2.0, 5.0];
        let mut d2 = [f64::NAN; 2];
        assert_eq!(
            psmm_rank_pool_fit(pool, frames.as_ptr(), 2, d2.as_mut_ptr(), ptr::null_mut()),
            PsmmStatus::Ok
        );
        assert!(d2.iter().all(|v| v.is_finite()));

        assert_eq!(psmm_rank_pool_fit(pool, ptr::null(), 1, d.as_mut_ptr(), ptr::null_mut()), PsmmStatus::NullPointer);
        assert!(last_error().contains("frames"));
        let nan = [0.0, f64::NAN, 1.0];
        assert_eq!(psmm_rank_pool_fit(pool, nan.as_ptr(), 1, d.as_mut_ptr(), ptr::null_mut()), PsmmStatus::Numeric);
        psmm_rank_pool_free(pool);
        psmm_rank_pool_free(ptr::null_mut());
    }
}

#[test]
fn scored_set_metrics() {
    unsafe {
        let set = psmm_scored_set_new();
        let mut r = PsmmRates::default();
        assert_ne!(psmm_scored_set_rates(set, 0.5, &mut r), PsmmStatus::Ok);
        for s in [0.9, 0.8, 0.3] {
            assert_eq!(psmm_scored_set_push(set, s, 1), PsmmStatus::Ok);
        }
        for s in [0.1, 0.6, 0.2, 0.4] {
            assert_eq!(psmm_scored_set_push(set, s, 0), PsmmStatus::Ok);
        }
        assert_eq!(psmm_scored_set_push(set, f64::INFINITY, 0), PsmmStatus::Numeric);
        assert_eq!(psmm_scored_set_len(set), 7);
        assert_eq!(psmm_scored_set_rates(set, 0.5, &mut r), PsmmStatus::Ok);
        assert!((r.apcer - 0.25).abs() < 1e-12);
        assert!((r.bpcer - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.acer - (0.25 + 1.0 / 3.0) / 2.0).abs() < 1e-12);

        // 10 of 12 (bona fide, attack) pairs are ordered correctly
        let mut auc = 0.0;
        assert_eq!(psmm_scored_set_auc(set, &mut auc), PsmmStatus::Ok);
        assert!((auc - 10.0 / 12.0).abs() < 1e-12, "{auc}");
        let mut tpr = 0.0;
        assert_eq!(psmm_scored_set_tpr_at_fpr(set, 0.0, &mut tpr), PsmmStatus::Ok);
        assert!((tpr - 2.0 / 3.0).abs() < 1e-12, "{tpr}");
        assert_eq!(psmm_scored_set_tpr_at_fpr(set, 1.5, &mut tpr), PsmmStatus::InvalidArgument);
        assert_eq!(psmm_scored_set_auc(ptr::null(), &mut auc), PsmmStatus::NullPointer);
        assert_eq!(psmm_scored_set_len(ptr::null()), 0);
        psmm_scored_set_free(set);
    }
}

#[test]
fn model_load_and_score_match_rust() {
    let dir = tempfile::tempdir().unwrap();
    let config = NetConfig {
        spec: BackboneSpec::tiny(),
        variant: FusionVariant::Psmm,
        modalities: vec![Modality::Color, Modality::Ir],
        branches: BranchMode::Both,
    };
    let model = Model::init(config, 2).unwrap();
    model.save(dir.path()).unwrap();
    let size = BackboneSpec::tiny().input_size;

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut handle = ptr::null_mut();
        assert_eq!(psmm_model_load(path.as_ptr(), &mut handle), PsmmStatus::Ok);
        assert_eq!(psmm_model_input_size(handle), size);
        assert_eq!(psmm_model_num_modalities(handle), 2);
        assert_eq!(psmm_model_channels(handle, 0), 3);
        assert_eq!(psmm_model_channels(handle, 1), 1);
        assert_eq!(psmm_model_channels(handle, 2), 0);

        let plane = size * size;
        let img = |c: usize, k: f64| (0..c * plane).map(|i| ((i as f64) * k).sin()).collect::<Vec<f64>>();
        let (cs, cd, is, id) = (img(3, 0.1), img(3, 0.2), img(1, 0.3), img(1, 0.4));
        let statics = [cs.as_ptr(), is.as_ptr()];
        let dynamics = [cd.as_ptr(), id.as_ptr()];
        let mut score = f64::NAN;
        assert_eq!(
            psmm_model_score(handle, statics.as_ptr(), dynamics.as_ptr(), 2, &mut score),
            PsmmStatus::Ok
        );
        let shape = |c| vec![c, size, size];
        let t = |c, v: &Vec<f64>| psmm::diffcore::Tensor::new(shape(c), v.clone()).unwrap();
        let input = psmm::netgraph::SampleInput::new()
            .with(Modality::Color, t(3, &cs), t(3, &cd))
            .with(Modality::Ir, t(1, &is), t(1, &id));
        assert_eq!(score, model.score(&input).unwrap());

        assert_eq!(
            psmm_model_score(handle, statics.as_ptr(), dynamics.as_ptr(), 1, &mut score),
            PsmmStatus::InvalidArgument
        );
        assert!(last_error().contains("expected 2"));
        let with_null = [cs.as_ptr(), ptr::null()];
        assert_eq!(
            psmm_model_score(handle, with_null.as_ptr(), dynamics.as_ptr(), 2, &mut score),
            PsmmStatus::NullPointer
        );
        psmm_model_free(handle);

        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_ne!(psmm_model_load(missing.as_ptr(), &mut none), PsmmStatus::Ok);
        assert!(none.is_null());
        assert_eq!(psmm_model_load(ptr::null(), &mut none), PsmmStatus::NullPointer);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(psmm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_the_api_and_compiles() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{dir}/include/psmm_ffi.h")).unwrap();
    for name in [
        "psmm_last_error",
        "psmm_rank_pool_new",
        "psmm_rank_pool_fit",
        "psmm_scored_set_rates",
        "psmm_model_load",
        "psmm_model_score",
        "PSMM_STATUS_NULL_POINTER",
        "typedef struct PsmmModel PsmmModel",
    ] {
        assert!(header.contains(name), "{name}");
    }
    // syntax check with the system C compiler when one is available
    let src = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(src.path(), "#include \"psmm_ffi.h\"\nint main(void) { return PSMM_STATUS_OK; }\n").unwrap();
    match Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(format!("{dir}/include"))
        .arg(src.path())
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler found; skipped syntax check"),
    }
}
