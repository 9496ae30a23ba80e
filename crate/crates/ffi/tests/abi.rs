use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use gmparse::dataset::{Fold, NormalizationStats};
use gmparse::experiment::{save_parser, ParseConfig, TrainedParser};
use gmparse::parser::{ClassWeights, StepLosses};
use gmparse_ffi::*;

const SIDE: usize = 16;

fn saved_parser(dir: &Path) {
    let cfg = ParseConfig::desk([1, SIDE, SIDE], 7);
    let model = cfg.model().unwrap();
    let trained = TrainedParser {
        weights: model.init(7),
        stats: NormalizationStats {
            min: [0.0; 9],
            max: [10.0; 9],
        },
        class_weights: ClassWeights::uniform(),
        first: StepLosses::default(),
        last: StepLosses::default(),
    };
    let fold = Fold {
        test: vec!["gm00".into()],
        train: vec!["gm01".into()],
    };
    save_parser(dir, 0, &fold, &trained, &cfg, 7).unwrap();
}

fn last_error() -> String {
    let p = gmparse_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(dir: &Path) -> *mut GmparseParser {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gmparse_parser_load(path.as_ptr(), 0, &mut h) }, GmparseStatus::Ok);
    assert!(!h.is_null());
    h
}

fn pixels(n: usize) -> Vec<f32> {
    (0..n * SIDE * SIDE).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()
}

#[test]
fn load_predict_and_free() {
    let dir = tempfile::tempdir().unwrap();
    saved_parser(dir.path());
    let h = load(dir.path());

    let mut shape = [0usize; 3];
    assert_eq!(unsafe { gmparse_parser_input_shape(h, shape.as_mut_ptr()) }, GmparseStatus::Ok);
    assert_eq!(shape, [1, SIDE, SIDE]);

    let x = pixels(3);
    let mut out = vec![
        GmparsePrediction {
            continuous: [0.0; 9],
            continuous_normalized: [0.0; 9],
            discrete: [0; 6],
            coarse: [0.0; 3],
            fine: [0.0; 8],
        };
        3
    ];
    let st = unsafe { gmparse_parser_predict(h, x.as_ptr(), 3, x.len(), out.as_mut_ptr()) };
    assert_eq!(st, GmparseStatus::Ok);
    let cards = gmparse::labels::DISCRETE_CARDINALITIES;
    for p in &out {
        for j in 0..9 {
            assert!((0.0..=1.0).contains(&p.continuous_normalized[j]));
            assert!((p.continuous[j] - 10.0 * p.continuous_normalized[j]).abs() < 1e-9);
        }
        for (k, &d) in p.discrete.iter().enumerate() {
            assert!((d as usize) < cards[k]);
        }
        assert!(p.coarse.iter().chain(&p.fine).all(|v| (0.0..=1.0).contains(v)));
    }

    let mut f = vec![0f32; x.len()];
    let st = unsafe { gmparse_parser_fingerprint(h, x.as_ptr(), 3, x.len(), f.as_mut_ptr()) };
    assert_eq!(st, GmparseStatus::Ok);
    assert!(f.iter().all(|v| v.is_finite()));
    assert!(f.iter().any(|&v| v != 0.0));

    unsafe { gmparse_parser_free(h) };
    unsafe { gmparse_parser_free(ptr::null_mut()) };
}

#[test]
fn errors_map_to_status_codes() {
    let missing = CString::new("/nonexistent/run").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gmparse_parser_load(missing.as_ptr(), 0, &mut h) }, GmparseStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("missing file"), "{}", last_error());

    assert_eq!(unsafe { gmparse_parser_load(ptr::null(), 0, &mut h) }, GmparseStatus::NullPointer);
    assert!(last_error().contains("run_dir"));

    let dir = tempfile::tempdir().unwrap();
    saved_parser(dir.path());
    let h = load(dir.path());
    let x = pixels(1);
    let mut f = vec![0f32; x.len()];
    // two images declared, one supplied
    let st = unsafe { gmparse_parser_fingerprint(h, x.as_ptr(), 2, x.len(), f.as_mut_ptr()) };
    assert_eq!(st, GmparseStatus::Shape);
    let st = unsafe { gmparse_parser_fingerprint(h, x.as_ptr(), 1, x.len(), ptr::null_mut()) };
    assert_eq!(st, GmparseStatus::NullPointer);
    unsafe { gmparse_parser_free(h) };

    std::fs::write(dir.path().join("fold0.json"), "{").unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gmparse_parser_load(path.as_ptr(), 0, &mut h) }, GmparseStatus::Format);
}

#[test]
fn auc_and_spectrum() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut a = 0.0;
    assert_eq!(unsafe { gmparse_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut a) }, GmparseStatus::Ok);
    assert!((a - 0.75).abs() < 1e-12);
    let one = [1u8; 2];
    let st = unsafe { gmparse_auc(scores.as_ptr(), one.as_ptr(), 2, &mut a) };
    assert_eq!(st, GmparseStatus::InvalidArgument);

    // a constant image has all its energy at DC, which sits at the centre
    let img = [1.0f64; 16];
    let mut m = vec![0.0f64; 16];
    let st = unsafe { gmparse_spectrum_magnitude(img.as_ptr(), 4, 4, false, m.as_mut_ptr()) };
    assert_eq!(st, GmparseStatus::Ok);
    assert!((m[2 * 4 + 2] - 1.0).abs() < 1e-12);
    assert!(m.iter().enumerate().all(|(i, &v)| i == 10 || v.abs() < 1e-12));
    let st = unsafe { gmparse_spectrum_magnitude(img.as_ptr(), 0, 4, false, m.as_mut_ptr()) };
    assert_eq!(st, GmparseStatus::InvalidArgument);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(gmparse_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
