use std::ffi::{CStr, CString};
use std::ptr;

use sbseg_ffi::*;

fn last_error() -> String {
    let p = sbseg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn tensor(c: usize, h: usize, w: usize, data: &[f32]) -> *mut SbsegTensor {
    let mut t = ptr::null_mut();
    assert_eq!(sbseg_tensor_new(c, h, w, data.as_ptr(), &mut t), SbsegStatus::Ok);
    t
}

unsafe fn values(t: *const SbsegTensor) -> ((usize, usize, usize), Vec<f32>) {
    let (mut c, mut h, mut w) = (0, 0, 0);
    assert_eq!(sbseg_tensor_shape(t, &mut c, &mut h, &mut w), SbsegStatus::Ok);
    let mut data = ptr::null();
    assert_eq!(sbseg_tensor_data(t, &mut data), SbsegStatus::Ok);
    ((c, h, w), std::slice::from_raw_parts(data, c * h * w).to_vec())
}

unsafe fn label_map(w: usize, h: usize, data: &[u32]) -> *mut SbsegLabelMap {
    let mut m = ptr::null_mut();
    assert_eq!(sbseg_label_map_new(w, h, data.as_ptr(), &mut m), SbsegStatus::Ok);
    m
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(sbseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn tensor_round_trips_through_a_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.smt").to_str().unwrap()).unwrap();
    let name = CString::new("cam").unwrap();
    let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    unsafe {
        let t = tensor(2, 3, 4, &data);
        assert_eq!(sbseg_write_tensor(path.as_ptr(), name.as_ptr(), t), SbsegStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sbseg_read_tensor(path.as_ptr(), ptr::null(), &mut back), SbsegStatus::Ok);
        assert_eq!(values(back), ((2, 3, 4), data));
        let missing = CString::new("guide").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(sbseg_read_tensor(path.as_ptr(), missing.as_ptr(), &mut none), SbsegStatus::InvalidArgument);
        assert!(none.is_null());
        sbseg_tensor_free(t);
        sbseg_tensor_free(back);
    }
}

#[test]
fn error_codes_cover_bad_input() {
    unsafe {
        let mut t = ptr::null_mut();
        let data = [0.0f32; 4];
        assert_eq!(sbseg_tensor_new(1, 2, 2, data.as_ptr(), ptr::null_mut()), SbsegStatus::NullPointer);
        assert!(last_error().contains("out"));
        assert_eq!(sbseg_tensor_new(1, 2, 2, ptr::null(), &mut t), SbsegStatus::NullPointer);
        assert!(last_error().contains("data"));
        assert!(t.is_null());

        let dir = tempfile::tempdir().unwrap();
        let missing = CString::new(dir.path().join("none.smt").to_str().unwrap()).unwrap();
        assert_eq!(sbseg_read_tensor(missing.as_ptr(), ptr::null(), &mut t), SbsegStatus::Io);
        let junk = dir.path().join("junk.smt");
        std::fs::write(&junk, b"NOPE").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(sbseg_read_tensor(junk.as_ptr(), ptr::null(), &mut t), SbsegStatus::Format);
        assert!(t.is_null());

        let a = tensor(1, 2, 2, &data);
        let b = tensor(1, 3, 2, &[0.0; 6]);
        let flags = [1u8];
        let mut out = ptr::null_mut();
        let status = sbseg_refine(a, b, flags.as_ptr(), 0, ptr::null(), &mut out);
        assert_ne!(status, SbsegStatus::Ok);
        assert!(out.is_null());
        assert!(!last_error().is_empty());
        sbseg_tensor_free(a);
        sbseg_tensor_free(b);
        sbseg_tensor_free(ptr::null_mut());
        sbseg_label_map_free(ptr::null_mut());
    }
}

#[test]
fn canny_finds_a_vertical_step() {
    let (w, h) = (16usize, 16usize);
    let gray: Vec<u8> = (0..w * h).map(|i| if i % w < 8 { 0 } else { 255 }).collect();
    unsafe {
        let mut edges = ptr::null_mut();
        assert_eq!(sbseg_canny(gray.as_ptr(), w, h, ptr::null(), &mut edges), SbsegStatus::Ok);
        let ((c, eh, ew), v) = values(edges);
        assert_eq!((c, eh, ew), (1, h, w));
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), h);
        let bad = SbsegCannyOptions { low_threshold: 0.5, high_threshold: 0.1, ..sbseg_canny_options_default() };
        let mut none = ptr::null_mut();
        assert_eq!(sbseg_canny(gray.as_ptr(), w, h, &bad, &mut none), SbsegStatus::InvalidArgument);
        sbseg_tensor_free(edges);
    }
}

#[test]
fn refine_pseudo_label_and_miou_compose() {
    let (w, h) = (8usize, 8usize);
    let truth: Vec<u32> = (0..w * h).map(|i| (i % w >= 4) as u32).collect();
    unsafe {
        let labels = label_map(w, h, &truth);
        let mut guide = ptr::null_mut();
        assert_eq!(sbseg_label_to_boundary(labels, 2, 1, &mut guide), SbsegStatus::Ok);
        let cam_data: Vec<f32> = [vec![0.0; w * h], truth.iter().map(|&t| 0.3 + 0.5 * t as f32).collect()].concat();
        let cam = tensor(2, h, w, &cam_data);
        let flags = [1u8];

        let mut value = f64::NAN;
        let mut grad = ptr::null_mut();
        let opts = sbseg_loss_options_default();
        assert_eq!(sbseg_smoothness_loss(cam, guide, flags.as_ptr(), 1, 1, &opts, &mut value, &mut grad), SbsegStatus::Ok);
        assert!(value.is_finite() && value >= 0.0);
        assert_eq!(values(grad).0, (2, h, w));
        assert_eq!(
            sbseg_smoothness_loss(cam, guide, flags.as_ptr(), 1, 3, &opts, &mut value, ptr::null_mut()),
            SbsegStatus::InvalidArgument
        );

        let options = SbsegRefineOptions { steps: 20, ..sbseg_refine_options_default() };
        let mut refined = ptr::null_mut();
        assert_eq!(sbseg_refine(cam, guide, flags.as_ptr(), 1, &options, &mut refined), SbsegStatus::Ok);
        let mut pseudo = ptr::null_mut();
        assert_eq!(sbseg_pseudo_label(refined, flags.as_ptr(), 1, 0.5, &mut pseudo), SbsegStatus::Ok);
        let (mut pw, mut ph) = (0, 0);
        assert_eq!(sbseg_label_map_shape(pseudo, &mut pw, &mut ph), SbsegStatus::Ok);
        assert_eq!((pw, ph), (w, h));

        let mut miou = 0.0;
        let preds = [pseudo as *const SbsegLabelMap];
        let truths = [labels as *const SbsegLabelMap];
        assert_eq!(sbseg_miou(preds.as_ptr(), truths.as_ptr(), 1, 2, &mut miou), SbsegStatus::Ok);
        assert_eq!(miou, 1.0);
        let nulls = [ptr::null::<SbsegLabelMap>()];
        assert_eq!(sbseg_miou(nulls.as_ptr(), truths.as_ptr(), 1, 2, &mut miou), SbsegStatus::NullPointer);

        for t in [guide, cam, grad, refined] {
            sbseg_tensor_free(t);
        }
        sbseg_label_map_free(labels);
        sbseg_label_map_free(pseudo);
    }
}

#[test]
fn random_walk_keeps_shape() {
    let (w, h) = (6usize, 5usize);
    let rgb: Vec<u8> = (0..3 * w * h).map(|i| (i * 37 % 251) as u8).collect();
    unsafe {
        let cam = tensor(2, h, w, &(0..2 * w * h).map(|i| (i % 7) as f32 / 7.0).collect::<Vec<_>>());
        let mut out = ptr::null_mut();
        assert_eq!(sbseg_random_walk(cam, rgb.as_ptr(), w, h, ptr::null(), &mut out), SbsegStatus::Ok);
        let (shape, v) = values(out);
        assert_eq!(shape, (2, h, w));
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        let mut none = ptr::null_mut();
        assert_eq!(sbseg_random_walk(cam, rgb.as_ptr(), w + 1, h, ptr::null(), &mut none), SbsegStatus::ShapeMismatch);
        sbseg_tensor_free(cam);
        sbseg_tensor_free(out);
    }
}
