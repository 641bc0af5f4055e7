use std::ffi::CString;
use std::ptr;

use gsun_ffi::*;

const THETA: [f64; 7] = [1.0, 0.15, 1.0, 0.1, 0.5, 0.55, -0.3];

fn grid(n: usize) -> (Vec<f64>, Vec<f64>) {
    let k = (n as f64).sqrt().ceil() as usize;
    let xs = (0..n).map(|i| (i % k) as f64 / k as f64 + 0.05).collect();
    let ys = (0..n).map(|i| (i / k) as f64 / k as f64 + 0.05).collect();
    (xs, ys)
}

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let len = unsafe { gsun_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(len.min(255));
    String::from_utf8(buf).unwrap()
}

#[test]
fn simulate_read_back_and_free() {
    let (xs, ys) = grid(16);
    let mut s = ptr::null_mut();
    let st = unsafe { gsun_simulate(THETA.as_ptr(), xs.as_ptr(), ys.as_ptr(), 16, 3, 5, &mut s) };
    assert_eq!(st, GsunStatus::Ok);
    let (mut n, mut reps) = (0, 0);
    assert_eq!(unsafe { gsun_sample_dims(s, &mut n, &mut reps) }, GsunStatus::Ok);
    assert_eq!((n, reps), (16, 3));
    let mut v = vec![0.0; 48];
    assert_eq!(unsafe { gsun_sample_values(s, v.as_mut_ptr(), 47) }, GsunStatus::BufferTooSmall);
    assert_eq!(unsafe { gsun_sample_values(s, v.as_mut_ptr(), 48) }, GsunStatus::Ok);
    assert!(v.iter().all(|x| x.is_finite()));

    let mut again = ptr::null_mut();
    unsafe { gsun_simulate(THETA.as_ptr(), xs.as_ptr(), ys.as_ptr(), 16, 3, 5, &mut again) };
    let mut w = vec![0.0; 48];
    unsafe { gsun_sample_values(again, w.as_mut_ptr(), 48) };
    assert_eq!(v, w);
    unsafe {
        gsun_sample_free(s);
        gsun_sample_free(again);
        gsun_sample_free(ptr::null_mut());
    }
}

#[test]
fn csv_round_trip() {
    let (xs, ys) = grid(9);
    let vals: Vec<f64> = (0..18).map(|i| i as f64 * 0.1 - 0.7).collect();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { gsun_sample_new(xs.as_ptr(), ys.as_ptr(), 9, vals.as_ptr(), 2, &mut s) }, GsunStatus::Ok);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("s.csv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gsun_sample_write_csv(s, path.as_ptr()) }, GsunStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { gsun_sample_read_csv(path.as_ptr(), &mut back) }, GsunStatus::Ok);
    let mut got = vec![0.0; 18];
    unsafe { gsun_sample_values(back, got.as_mut_ptr(), 18) };
    assert_eq!(got, vals);
    unsafe {
        gsun_sample_free(s);
        gsun_sample_free(back);
    }
}

#[test]
fn errors_map_to_codes() {
    let (xs, ys) = grid(4);
    let mut s = ptr::null_mut();
    let mut bad = THETA;
    bad[0] = -1.0;
    assert_eq!(unsafe { gsun_simulate(bad.as_ptr(), xs.as_ptr(), ys.as_ptr(), 4, 1, 1, &mut s) }, GsunStatus::InvalidInput);
    assert!(last_error().starts_with("InvalidParameter"));
    assert!(s.is_null());
    assert_eq!(unsafe { gsun_simulate(ptr::null(), xs.as_ptr(), ys.as_ptr(), 4, 1, 1, &mut s) }, GsunStatus::NullPointer);
    assert_eq!(unsafe { gsun_simulate(THETA.as_ptr(), xs.as_ptr(), ys.as_ptr(), 4, 1, 1, ptr::null_mut()) }, GsunStatus::NullPointer);
    let dup = [0.5, 0.5];
    assert_eq!(unsafe { gsun_simulate(THETA.as_ptr(), dup.as_ptr(), dup.as_ptr(), 2, 1, 1, &mut s) }, GsunStatus::InvalidInput);
    assert!(last_error().starts_with("DuplicateLocation"));
    let missing = CString::new("/nonexistent/weights.bin").unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { gsun_estimator_load(missing.as_ptr(), &mut e) }, GsunStatus::InvalidInput);
    assert_eq!(unsafe { gsun_last_error_message(ptr::null_mut(), 0) }, last_error().len());
}

#[test]
fn pit_matches_gaussian_closed_form() {
    let (xs, ys) = grid(25);
    let vals: Vec<f64> = (0..25).map(|i| (i as f64 - 12.0) / 6.0).collect();
    let mut s = ptr::null_mut();
    unsafe { gsun_sample_new(xs.as_ptr(), ys.as_ptr(), 25, vals.as_ptr(), 1, &mut s) };
    let model = CString::new("gaussian").unwrap();
    let params = [4.0, 0.1, 0.5];
    let mut u = vec![0.0; 25];
    let (mut ks, mut p) = (0.0, 0.0);
    let st = unsafe { gsun_pit(model.as_ptr(), params.as_ptr(), 3, s, u.as_mut_ptr(), 25, &mut ks, &mut p) };
    assert_eq!(st, GsunStatus::Ok);
    assert!((u[12] - 0.5).abs() < 1e-15);
    assert!(u.windows(2).all(|w| w[0] < w[1]));
    assert!(ks > 0.0 && (0.0..=1.0).contains(&p));
    let unknown = CString::new("cauchy").unwrap();
    assert_eq!(unsafe { gsun_pit(unknown.as_ptr(), params.as_ptr(), 3, s, u.as_mut_ptr(), 25, &mut ks, &mut p) }, GsunStatus::InvalidInput);
    unsafe { gsun_sample_free(s) };
}

#[test]
fn krige_returns_finite_moments() {
    let (xs, ys) = grid(9);
    let mut s = ptr::null_mut();
    unsafe { gsun_simulate(THETA.as_ptr(), xs.as_ptr(), ys.as_ptr(), 9, 1, 2, &mut s) };
    let (px, py) = ([0.4, 0.8], [0.3, 0.9]);
    let (mut mean, mut var) = ([0.0; 2], [0.0; 2]);
    let st = unsafe { gsun_krige(THETA.as_ptr(), s, px.as_ptr(), py.as_ptr(), 2, 10_000, 3, mean.as_mut_ptr(), var.as_mut_ptr()) };
    assert_eq!(st, GsunStatus::Ok, "{}", last_error());
    assert!(mean.iter().all(|m| m.is_finite()));
    assert!(var.iter().all(|v| *v > 0.0));
    unsafe { gsun_sample_free(s) };
}

#[test]
fn estimator_round_trip_through_file() {
    use gsun::neural::{write_weights, EstimatorConfig, EstimatorWeights};
    use gsun::numcore::RngStream;
    let w = EstimatorWeights::init(&EstimatorConfig::desk(), &mut RngStream::new(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("w.bin");
    write_weights(&w, std::fs::File::create(&file).unwrap()).unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { gsun_estimator_load(path.as_ptr(), &mut e) }, GsunStatus::Ok);

    let (xs, ys) = grid(30);
    let mut s = ptr::null_mut();
    unsafe { gsun_simulate(THETA.as_ptr(), xs.as_ptr(), ys.as_ptr(), 30, 2, 8, &mut s) };
    let mut theta = [0.0; 7];
    assert_eq!(unsafe { gsun_estimate(e, s, 0.0, theta.as_mut_ptr()) }, GsunStatus::Ok);
    assert!(w.config.prior.contains(&theta));
    let mut again = [0.0; 7];
    unsafe { gsun_estimate(e, s, 0.0, again.as_mut_ptr()) };
    assert_eq!(theta, again);
    unsafe {
        gsun_sample_free(s);
        gsun_estimator_free(e);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { std::ffi::CStr::from_ptr(gsun_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
