use std::ffi::{CStr, CString};
use std::ptr;

use mixlab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mixlab_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn field_and_period_round_trip() {
    unsafe {
        let spec = CString::new("cellular").unwrap();
        let mut f = ptr::null_mut();
        assert_eq!(mixlab_field_new(spec.as_ptr(), &mut f), MixlabStatus::Ok);
        let (mut h, mut v) = (0.0, [0.0; 2]);
        assert_eq!(mixlab_field_eval(f, 1.0, 0.5, &mut h, v.as_mut_ptr()), MixlabStatus::Ok);
        assert!((h - 1f64.sin() * 0.5f64.sin()).abs() < 1e-15);
        assert!((v[0] + 1f64.sin() * 0.5f64.cos()).abs() < 1e-15 && (v[1] - 1f64.cos() * 0.5f64.sin()).abs() < 1e-15);
        mixlab_field_free(f);

        let (mut a, mut q) = (0.0, 0.0);
        assert_eq!(mixlab_period(0.5, 0, &mut a), MixlabStatus::Ok);
        assert_eq!(mixlab_period(0.5, 1, &mut q), MixlabStatus::Ok);
        assert!((a - q).abs() < 1e-9 * a);
        assert_eq!(mixlab_period(1.5, 0, &mut a), MixlabStatus::LevelOutOfRange);
        assert!(last_error().contains("1.5"));
        assert_eq!(mixlab_period(0.5, 7, &mut a), MixlabStatus::InvalidArgument);
    }
}

#[test]
fn errors_and_null_handles() {
    unsafe {
        let bad = CString::new("nonsense").unwrap();
        let mut f = ptr::null_mut();
        assert_eq!(mixlab_field_new(bad.as_ptr(), &mut f), MixlabStatus::InvalidArgument);
        assert!(f.is_null());
        let bad = CString::new("expr:sin(x1").unwrap();
        assert_eq!(mixlab_field_new(bad.as_ptr(), &mut f), MixlabStatus::Parse);
        assert_eq!(mixlab_field_new(ptr::null(), &mut f), MixlabStatus::NullPointer);
        let mut out = 0.0;
        assert_eq!(mixlab_chart_jacobian_error(ptr::null(), &mut out), MixlabStatus::NullPointer);
        mixlab_field_free(ptr::null_mut());
        mixlab_solver_free(ptr::null_mut());
        assert!(!CStr::from_ptr(mixlab_version()).to_bytes().is_empty());
    }
}

#[test]
fn solver_conserves_transported_l2() {
    unsafe {
        let n = 32;
        let vals: Vec<f64> = (0..n * n)
            .map(|p| {
                let (i, j) = (p % n, p / n);
                let (x, y) = (2.0 * std::f64::consts::PI * i as f64 / n as f64, 2.0 * std::f64::consts::PI * j as f64 / n as f64);
                x.cos() * (2.0 * y).sin()
            })
            .collect();
        let mut rho = ptr::null_mut();
        assert_eq!(mixlab_scalar_new(n, vals.as_ptr(), &mut rho), MixlabStatus::Ok);
        let mut size = 0;
        mixlab_scalar_size(rho, &mut size);
        assert_eq!(size, n);
        let mut l2 = 0.0;
        assert_eq!(mixlab_scalar_norm(rho, 0, &mut l2), MixlabStatus::Ok);
        let spec = CString::new("cellular").unwrap();
        let mut f = ptr::null_mut();
        mixlab_field_new(spec.as_ptr(), &mut f);
        let mut s = ptr::null_mut();
        assert_eq!(mixlab_solver_new(f, rho, 0.0, &mut s), MixlabStatus::Ok);
        assert_eq!(mixlab_solver_advance(s, 0.5), MixlabStatus::Ok);
        let (mut t, mut l) = (0.0, 0.0);
        mixlab_solver_status(s, &mut t, &mut l);
        assert!((t - 0.5).abs() < 1e-12);
        assert!((l - l2).abs() < 1e-6 * l2);
        let mut st = ptr::null_mut();
        assert_eq!(mixlab_solver_state(s, &mut st), MixlabStatus::Ok);
        let mut buf = vec![0.0; n * n];
        assert_eq!(mixlab_scalar_values(st, buf.as_mut_ptr(), buf.len()), MixlabStatus::Ok);
        assert_eq!(mixlab_scalar_values(st, buf.as_mut_ptr(), 3), MixlabStatus::InvalidArgument);
        mixlab_scalar_free(st);
        mixlab_solver_free(s);
        mixlab_scalar_free(rho);
        mixlab_field_free(f);
    }
}

#[test]
fn chart_and_envelope() {
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(mixlab_chart_cellular(0.4, 0.8, 16, 4, &mut c), MixlabStatus::Ok);
        let mut xy = [0.0; 2];
        assert_eq!(mixlab_chart_eval(c, 0.0, 0.6, xy.as_mut_ptr()), MixlabStatus::Ok);
        assert!((xy[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-9 && (xy[1] - 0.6).abs() < 1e-9);
        let mut err = 1.0;
        mixlab_chart_jacobian_error(c, &mut err);
        assert!(err < 1e-3);
        mixlab_chart_free(c);
        assert_eq!(mixlab_chart_cellular(0.8, 0.4, 16, 4, &mut c), MixlabStatus::InvalidArgument);

        let mut e = 0.0;
        assert_eq!(mixlab_mixing_envelope(100.0, 0.0, MixlabRegime::Interior, &mut e), MixlabStatus::Ok);
        assert!((e - 0.1f64.ln().powi(2) / 0.01 / 100.0).abs() < 1e-12 * e);
    }
}

#[test]
fn run_config_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "experiment = \"period-table\"\nperiod_table.n_levels = 5\n").unwrap();
    let path = CString::new(cfg.to_str().unwrap()).unwrap();
    let out = CString::new(dir.path().join("out").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(mixlab_run_config(path.as_ptr(), out.as_ptr(), 1), MixlabStatus::Ok);
    }
    let text = std::fs::read_to_string(dir.path().join("out/period_table.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
    std::fs::write(&cfg, "experiment = \"warp\"\n").unwrap();
    unsafe {
        assert_eq!(mixlab_run_config(path.as_ptr(), out.as_ptr(), 1), MixlabStatus::UnknownExperiment);
    }
}
