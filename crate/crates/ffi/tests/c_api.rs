use std::ffi::{CStr, CString};
use std::ptr;

use resattnet_ffi::*;

fn last_error() -> String {
    let p = vnet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn build(name: &str, use_f64: bool) -> *mut VnetModel {
    let mut m = ptr::null_mut();
    let st = unsafe { vnet_model_build(cstr(name).as_ptr(), 0.125, 16, 16, 16, 3, use_f64, &mut m) };
    assert_eq!(st, VnetStatus::Ok);
    assert!(vnet_last_error().is_null());
    m
}

fn ramp_volume() -> *mut VnetVolume {
    let data: Vec<f32> = (0..16 * 16 * 16).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
    let mut v = ptr::null_mut();
    assert_eq!(unsafe { vnet_volume_from_data(data.as_ptr(), 16, 16, 16, true, &mut v) }, VnetStatus::Ok);
    v
}

#[test]
fn predict_and_explain_through_handles() {
    let m = build("micro-resattnet", true);
    let v = ramp_volume();
    unsafe {
        let mut dims = [0usize; 3];
        assert_eq!(vnet_volume_dims(v, dims.as_mut_ptr()), VnetStatus::Ok);
        assert_eq!(dims, [16, 16, 16]);
        assert_eq!(vnet_model_input_dims(m, dims.as_mut_ptr()), VnetStatus::Ok);
        assert_eq!(dims, [16, 16, 16]);

        let mut count = 0usize;
        assert_eq!(vnet_model_param_count(m, &mut count), VnetStatus::Ok);
        assert!(count > 0);

        let mut probs = [0f64; 2];
        assert_eq!(vnet_predict(m, v, probs.as_mut_ptr(), 2), VnetStatus::Ok);
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);

        let mut heat = vec![-1f32; 16 * 16 * 16];
        assert_eq!(vnet_gradcam(m, v, 1, ptr::null(), heat.as_mut_ptr(), heat.len()), VnetStatus::Ok);
        assert!(heat.iter().all(|&h| h >= 0.0));
        let layer = cstr("stage2.block0");
        assert_eq!(vnet_gradcam(m, v, 0, layer.as_ptr(), heat.as_mut_ptr(), heat.len()), VnetStatus::Ok);
        vnet_volume_free(v);
        vnet_model_free(m);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = build("micro-resnet", false);
    let v = ramp_volume();
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(vnet_model_build(cstr("resnet99").as_ptr(), 1.0, 16, 16, 16, 0, false, &mut out), VnetStatus::InvalidArgument);
        assert!(last_error().contains("resnet99"));
        assert_eq!(vnet_model_build(ptr::null(), 1.0, 16, 16, 16, 0, false, &mut out), VnetStatus::NullPointer);
        assert!(out.is_null());

        let mut probs = [0f64; 1];
        assert_eq!(vnet_predict(m, v, probs.as_mut_ptr(), 1), VnetStatus::BufferTooSmall);
        assert!(last_error().contains("2 needed"));
        assert_eq!(vnet_predict(ptr::null(), v, probs.as_mut_ptr(), 1), VnetStatus::NullPointer);

        let bad = cstr("stage9");
        let mut heat = vec![0f32; 4096];
        assert_eq!(vnet_gradcam(m, v, 1, bad.as_ptr(), heat.as_mut_ptr(), heat.len()), VnetStatus::UnknownLayer);
        assert!(last_error().contains("stage9"));

        assert_eq!(vnet_model_load(cstr("/nonexistent/m.vnet").as_ptr(), &mut out), VnetStatus::Io);

        let small: Vec<f32> = vec![0.0; 8];
        let mut sv = ptr::null_mut();
        assert_eq!(vnet_volume_from_data(small.as_ptr(), 2, 2, 2, false, &mut sv), VnetStatus::Ok);
        assert_eq!(vnet_predict(m, sv, [0f64; 2].as_mut_ptr(), 2), VnetStatus::Shape);
        vnet_volume_free(sv);

        // a successful call clears the previous message
        let mut count = 0usize;
        assert_eq!(vnet_model_param_count(m, &mut count), VnetStatus::Ok);
        assert!(vnet_last_error().is_null());

        vnet_model_free(ptr::null_mut());
        vnet_volume_free(ptr::null_mut());
        vnet_volume_free(v);
        vnet_model_free(m);
    }
}

#[test]
fn saved_models_reload_with_same_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("m.vnet").to_str().unwrap());
    for use_f64 in [false, true] {
        let m = build("micro-vgg", use_f64);
        let v = ramp_volume();
        unsafe {
            assert_eq!(vnet_model_save(m, path.as_ptr()), VnetStatus::Ok);
            let mut back = ptr::null_mut();
            assert_eq!(vnet_model_load(path.as_ptr(), &mut back), VnetStatus::Ok);
            let (mut a, mut b) = ([0f64; 2], [0f64; 2]);
            assert_eq!(vnet_predict(m, v, a.as_mut_ptr(), 2), VnetStatus::Ok);
            assert_eq!(vnet_predict(back, v, b.as_mut_ptr(), 2), VnetStatus::Ok);
            assert_eq!(a, b);
            vnet_model_free(back);
            vnet_model_free(m);
            vnet_volume_free(v);
        }
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/resattnet.h")).unwrap();
    for name in [
        "vnet_model_build", "vnet_model_load", "vnet_model_save", "vnet_model_free", "vnet_predict",
        "vnet_gradcam", "vnet_volume_read", "vnet_volume_from_data", "vnet_last_error", "VNET_STATUS_OK",
        "typedef struct VnetModel VnetModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vnet_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
