use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use tcontrol_ffi::*;

fn last_error() -> String {
    let p = tc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn fixture(name: &str) -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn bank_handle_loads_and_grades() {
    unsafe {
        let mut bank = ptr::null_mut();
        assert_eq!(tc_bank_load(fixture("bank.csv").as_ptr(), &mut bank), TcStatus::Ok);
        let mut n = 0;
        assert_eq!(tc_bank_len(bank, &mut n), TcStatus::Ok);
        assert_eq!(n, 1812);
        assert_eq!(tc_bank_year_len(bank, 2023, &mut n), TcStatus::Ok);
        assert!(n >= 58);

        let text = std::fs::read_to_string(fixture("bank.csv").to_str().unwrap()).unwrap();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let headers = rdr.headers().unwrap().clone();
        let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
        let row = rdr.records().next().unwrap().unwrap();
        let id = CString::new(&row[col("id")]).unwrap();
        let answer = CString::new(row[col("answers")].split('|').next().unwrap()).unwrap();

        let mut correct = -1;
        assert_eq!(tc_bank_grade(bank, id.as_ptr(), answer.as_ptr(), &mut correct), TcStatus::Ok);
        assert_eq!(correct, 1);
        let junk = CString::new("no idea").unwrap();
        assert_eq!(tc_bank_grade(bank, id.as_ptr(), junk.as_ptr(), &mut correct), TcStatus::Ok);
        assert_eq!(correct, 0);

        let missing = CString::new("nope").unwrap();
        assert_eq!(tc_bank_grade(bank, missing.as_ptr(), junk.as_ptr(), &mut correct), TcStatus::NotFound);
        assert!(last_error().contains("nope"));
        tc_bank_free(bank);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut bank = ptr::null_mut();
        let bad = CString::new("/definitely/not/here.csv").unwrap();
        assert_eq!(tc_bank_load(bad.as_ptr(), &mut bank), TcStatus::BankError);
        assert!(bank.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(tc_bank_load(ptr::null(), &mut bank), TcStatus::NullPointer);
        assert_eq!(tc_bank_len(ptr::null(), ptr::null_mut()), TcStatus::NullPointer);
        tc_bank_free(ptr::null_mut());
        tc_panel_free(ptr::null_mut());
        tc_estimate_free(ptr::null_mut());
    }
}

#[test]
fn concordance_round_trip() {
    let old = [400.0, 500.0, 600.0, 700.0];
    let new: Vec<f64> = old.iter().map(|x| 0.9 * x + 66.0).collect();
    let mut c = TcConcordance {
        slope: 0.0,
        intercept: 0.0,
        max_abs_residual: 0.0,
        points: 0,
    };
    unsafe {
        assert_eq!(tc_concordance_fit(old.as_ptr(), new.as_ptr(), 4, &mut c), TcStatus::Ok);
        assert!((c.slope - 0.9).abs() < 1e-12 && (c.intercept - 66.0).abs() < 1e-9);
        assert_eq!(c.points, 4);
        let mut mapped = 0.0;
        assert_eq!(tc_concordance_map(&c, 514.0, &mut mapped), TcStatus::Ok);
        assert!((mapped - 528.6).abs() < 1e-9);
        assert_eq!(tc_concordance_map(&c, 900.0, &mut mapped), TcStatus::ScaleError);
        assert_eq!(tc_concordance_fit(old.as_ptr(), new.as_ptr(), 1, &mut c), TcStatus::ScaleError);
    }
}

#[test]
fn panel_estimates_match_the_library() {
    use transformed_control::estimator::{ads_ols, DeltaObservation, Role};
    let mut rows = Vec::new();
    for year in 2009..=2012u16 {
        for u in 0..5 {
            let d = -3.0 * (year - 2008) as f64 + u as f64 * 0.7 - 1.0;
            rows.push((format!("s{u}"), Role::Student, year, d));
            rows.push((format!("a{u}"), Role::Agent, year, 0.5 * u as f64 - (year % 3) as f64));
        }
    }
    unsafe {
        let panel = tc_panel_new();
        for (id, role, year, d) in &rows {
            let id = CString::new(id.as_str()).unwrap();
            let r = if *role == Role::Student { TcRole::Student } else { TcRole::Agent };
            assert_eq!(tc_panel_add(panel, id.as_ptr(), r, *year, *d), TcStatus::Ok);
        }
        let id = CString::new("x").unwrap();
        assert_eq!(tc_panel_add(panel, id.as_ptr(), TcRole::Agent, 1990, 0.0), TcStatus::InvalidArgument);
        assert_eq!(tc_panel_add(panel, id.as_ptr(), TcRole::Agent, 2010, f64::NAN), TcStatus::InvalidArgument);
        let mut n = 0;
        tc_panel_len(panel, &mut n);
        assert_eq!(n, rows.len());

        let mut est = ptr::null_mut();
        assert_eq!(tc_panel_estimate(panel, TcMethod::Ols, &mut est), TcStatus::Ok);
        let expected = ads_ols(
            &rows
                .iter()
                .map(|(id, role, year, d)| DeltaObservation {
                    unit_id: id.clone(),
                    role: *role,
                    year: *year,
                    delta: *d,
                    level: transformed_control::bank::Level::State,
                    group: transformed_control::bank::Group::All,
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        tc_estimate_len(est, &mut n);
        assert_eq!(n, expected.years.len());
        let mut y = std::mem::zeroed::<TcYearEstimate>();
        for (i, want) in expected.years.iter().enumerate() {
            assert_eq!(tc_estimate_year(est, i, &mut y), TcStatus::Ok);
            assert_eq!(y.year, want.year);
            assert_eq!(y.beta, want.beta);
            assert_eq!(y.has_se, 1);
            assert_eq!(y.se, want.se.unwrap());
        }
        assert_eq!(tc_estimate_year(est, n, &mut y), TcStatus::InvalidArgument);
        tc_estimate_free(est);

        assert_eq!(tc_panel_estimate(panel, TcMethod::MeanDiff, &mut est), TcStatus::Ok);
        tc_estimate_free(est);
        tc_panel_free(panel);

        let empty = tc_panel_new();
        assert_eq!(tc_panel_estimate(empty, TcMethod::Ols, &mut est), TcStatus::EstimatorError);
        tc_panel_free(empty);
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/tcontrol.h")).unwrap();
    for sym in ["tc_last_error", "tc_bank_load", "tc_panel_estimate", "TcYearEstimate", "TC_STATUS_OK"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"tcontrol.h\"\nint main(void) { TcStatus s = TC_STATUS_OK; TcPanel *p = tc_panel_new(); (void)p; return (int)s; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let Ok(out) = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler ({cc}); skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
