use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mtdsm::checkpoint;
use mtdsm::network::{Depth, EncoderSpec, Generator, ModelSpec};
use mtdsm::objectives::{ObjectiveSet, WeightState};
use mtdsm_ffi::*;

fn make(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> *mut MtdsmHeightMap {
    let values: Vec<f64> = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
    let mut out = ptr::null_mut();
    let st = unsafe { mtdsm_heightmap_new(rows, cols, 0.5, values.as_ptr(), &mut out) };
    assert_eq!(st, MtdsmStatus::Ok);
    out
}

fn values(map: *const MtdsmHeightMap) -> Vec<f64> {
    let (mut rows, mut cols) = (0, 0);
    unsafe {
        assert_eq!(mtdsm_heightmap_shape(map, &mut rows, &mut cols), MtdsmStatus::Ok);
        let mut buf = vec![0.0; rows * cols];
        assert_eq!(mtdsm_heightmap_values(map, buf.as_mut_ptr(), buf.len()), MtdsmStatus::Ok);
        buf
    }
}

fn last_error() -> String {
    let p = mtdsm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn heightmap_round_trip_and_rmse() {
    let a = make(4, 5, |r, c| (r * 5 + c) as f64);
    let b = make(4, 5, |r, c| (r * 5 + c) as f64 + 2.0);
    assert_eq!(values(a), (0..20).map(|v| v as f64).collect::<Vec<_>>());
    let mut err = 0.0;
    assert_eq!(unsafe { mtdsm_rmse(a, b, &mut err) }, MtdsmStatus::Ok);
    assert!((err - 2.0).abs() < 1e-12);
    unsafe {
        mtdsm_heightmap_free(a);
        mtdsm_heightmap_free(b);
        mtdsm_heightmap_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes() {
    let a = make(4, 4, |_, _| 1.0);
    let b = make(3, 4, |_, _| 1.0);
    let mut err = 0.0;
    unsafe {
        assert_eq!(mtdsm_rmse(a, b, &mut err), MtdsmStatus::ShapeMismatch);
        assert!(last_error().contains("shape"));
        assert_eq!(mtdsm_rmse(a, ptr::null(), &mut err), MtdsmStatus::NullPointer);
        let mut buf = [0.0; 3];
        assert_eq!(mtdsm_heightmap_values(a, buf.as_mut_ptr(), 3), MtdsmStatus::InvalidArgument);
        let path = CString::new("/nonexistent/x.tif").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(mtdsm_heightmap_load(path.as_ptr(), &mut out), MtdsmStatus::Io);
        assert!(out.is_null());
        let mut model = ptr::null_mut();
        assert_eq!(mtdsm_model_load(path.as_ptr(), &mut model), MtdsmStatus::Io);
        let bad = [f64::NAN];
        assert_eq!(mtdsm_heightmap_new(1, 1, 0.5, bad.as_ptr(), &mut out), MtdsmStatus::InvalidArgument);
        mtdsm_heightmap_free(a);
        mtdsm_heightmap_free(b);
    }
}

#[test]
fn save_load_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.tif").to_str().unwrap()).unwrap();
    let spike = make(21, 21, |r, c| if (r, c) == (10, 10) { 30.0 } else { 5.0 });
    unsafe {
        assert_eq!(mtdsm_heightmap_save(spike, path.as_ptr()), MtdsmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mtdsm_heightmap_load(path.as_ptr(), &mut back), MtdsmStatus::Ok);
        assert_eq!(values(back), values(spike));
        let mut filtered = ptr::null_mut();
        assert_eq!(mtdsm_baseline_filter(spike, 3, 0.01, 0, 0, 5, &mut filtered), MtdsmStatus::Ok);
        assert!(values(filtered).iter().all(|&v| v == 5.0));
        assert_eq!(mtdsm_baseline_filter(spike, 4, 0.1, 1, 2, 15, &mut filtered), MtdsmStatus::InvalidArgument);
        mtdsm_heightmap_free(filtered);
        mtdsm_heightmap_free(back);
        mtdsm_heightmap_free(spike);
    }
}

#[test]
fn model_predicts_through_the_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec { encoder: EncoderSpec { depth: Depth::Resnet26, width: 0.0625, output_stride: 8 }, ..ModelSpec::default() }
        .with_objectives(ObjectiveSet::ALL);
    let gen = Generator::new(&spec, 3).unwrap();
    let ck = dir.path().join("g.safetensors");
    checkpoint::save(&ck, &gen, &WeightState::default(), 1).unwrap();
    let path = CString::new(ck.to_str().unwrap()).unwrap();
    let input = make(48, 40, |r, c| ((r as f64) * 0.3).sin() * 4.0 + c as f64 * 0.1);
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(mtdsm_model_load(path.as_ptr(), &mut model), MtdsmStatus::Ok);
        let mut out = ptr::null_mut();
        let mut roof = vec![9u8; 48 * 40];
        let st = mtdsm_model_predict(model, input, 32, 16, &mut out, roof.as_mut_ptr(), roof.len());
        assert_eq!(st, MtdsmStatus::Ok, "{}", last_error());
        // the residual head starts at zero, so a fresh model returns its input
        let (a, b) = (values(out), values(input));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-4));
        assert!(roof.iter().all(|&l| l < 3));
        let st = mtdsm_model_predict(model, input, 32, 16, &mut out, roof.as_mut_ptr(), 7);
        assert_eq!(st, MtdsmStatus::InvalidArgument);
        mtdsm_heightmap_free(out);
        mtdsm_heightmap_free(input);
        mtdsm_model_free(model);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mtdsm.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["mtdsm_heightmap_new", "mtdsm_model_predict", "MTDSM_STATUS_OK", "typedef struct MtdsmModel MtdsmModel"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).status() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
