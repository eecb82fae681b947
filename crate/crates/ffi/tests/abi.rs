use std::ffi::{CStr, CString};
use std::ptr;

use narrablend::{Engine, RunConfig};
use narrablend_ffi::*;

const SCRIPT: &str = r#"{"story_id":"ffi","segments":[
 {"scene":"a quiet street at dawn","action":"Tom Cruise is walking"},
 {"scene":"a quiet street at dawn","action":"Tom Cruise is running"},
 {"scene":"a crowded market","action":"Tom Cruise is running"}]}"#;

const CONFIG: &str = r#"{"dipw":{"total_steps":10},"backbone":{"steps":10,"seed":3},"embedding":{"seed":3}}"#;

fn last_error() -> String {
    let p = nb_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn config() -> *mut NbConfig {
    let json = CString::new(CONFIG).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(nb_config_from_json(json.as_ptr(), &mut c), NbStatus::Ok);
    c
}

unsafe fn script() -> *mut NbScript {
    let mut s = ptr::null_mut();
    assert_eq!(nb_script_parse(SCRIPT.as_ptr(), SCRIPT.len(), &mut s), NbStatus::Ok);
    s
}

#[test]
fn generate_matches_the_rust_engine() {
    unsafe {
        let (c, s) = (config(), script());
        assert_eq!(nb_script_len(s), 3);
        let mut run = ptr::null_mut();
        assert_eq!(nb_generate(c, s, &mut run), NbStatus::Ok);

        let cfg = RunConfig::from_json(CONFIG).unwrap();
        let reference = Engine::toy(cfg)
            .unwrap()
            .generate_story(&narrablend::parse_script(SCRIPT.as_bytes()).unwrap())
            .unwrap();

        assert_eq!(nb_run_segment_count(run), 3);
        for k in 1..=3 {
            assert_eq!(nb_run_step_count(run, k), 10);
            for step in 1..=10 {
                let (mut a_s, mut a_a) = (0.0, 0.0);
                assert_eq!(nb_run_weights(run, k, step, &mut a_s, &mut a_a), NbStatus::Ok);
                let rec = &reference.schedules[k - 1].records[step - 1];
                assert_eq!((a_s, a_a), (rec.alpha_scene, rec.alpha_action));
            }

            let mut needed = 0usize;
            assert_eq!(
                nb_run_latents(run, k, ptr::null_mut(), 0, &mut needed),
                NbStatus::BufferTooSmall
            );
            let mut buf = vec![0.0f64; needed];
            assert_eq!(nb_run_latents(run, k, buf.as_mut_ptr(), buf.len(), &mut needed), NbStatus::Ok);
            let want: Vec<f64> = reference.segments[k - 1]
                .frames
                .iter()
                .flat_map(|f| f.values().iter().copied())
                .collect();
            assert_eq!(buf, want);
        }
        for b in 0..2 {
            let mut d = 0.0;
            assert_eq!(nb_run_boundary_discontinuity(run, b, &mut d), NbStatus::Ok);
            assert_eq!(d, reference.metrics.boundary_discontinuity[b]);
        }

        let mut json = ptr::null_mut();
        assert_eq!(nb_run_metrics_json(run, &mut json), NbStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        nb_string_free(json);
        assert_eq!(text, serde_json::to_string(&reference.metrics).unwrap());

        nb_run_free(run);
        nb_script_free(s);
        nb_config_free(c);
    }
}

#[test]
fn out_of_range_and_null_arguments_report_errors() {
    unsafe {
        let (c, s) = (config(), script());
        let mut run = ptr::null_mut();
        assert_eq!(nb_generate(c, s, &mut run), NbStatus::Ok);
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(nb_run_weights(run, 0, 1, &mut a, &mut b), NbStatus::OutOfRange);
        assert_eq!(nb_run_weights(run, 4, 1, &mut a, &mut b), NbStatus::OutOfRange);
        assert!(last_error().contains("segment 4"));
        assert_eq!(nb_run_weights(run, 1, 11, &mut a, &mut b), NbStatus::OutOfRange);
        assert_eq!(nb_run_boundary_discontinuity(run, 2, &mut a), NbStatus::OutOfRange);
        assert_eq!(nb_run_weights(run, 1, 1, ptr::null_mut(), &mut b), NbStatus::NullArgument);
        assert_eq!(nb_generate(ptr::null(), s, &mut run), NbStatus::NullArgument);
        assert!(last_error().contains("config"));
        assert_eq!(nb_run_segment_count(ptr::null()), 0);
        assert_eq!(nb_run_step_count(run, 9), 0);

        // A successful call clears the previous message.
        assert_eq!(nb_run_weights(run, 1, 1, &mut a, &mut b), NbStatus::Ok);
        assert!(nb_last_error_message().is_null());

        nb_run_free(run);
        nb_script_free(s);
        nb_config_free(c);
    }
}

#[test]
fn parse_and_config_errors_map_to_status_codes() {
    unsafe {
        let mut s = ptr::null_mut();
        let bad = b"{\"story_id\":\"x\",\"segments\":[";
        assert_eq!(nb_script_parse(bad.as_ptr(), bad.len(), &mut s), NbStatus::Parse);
        assert!(s.is_null());
        let empty = br#"{"story_id":"x","segments":[{"scene":" ","action":"a"}]}"#;
        assert_eq!(nb_script_parse(empty.as_ptr(), empty.len(), &mut s), NbStatus::Validation);

        let mut c = ptr::null_mut();
        let unknown = CString::new(r#"{"dipw":{"nope":1}}"#).unwrap();
        assert_eq!(nb_config_from_json(unknown.as_ptr(), &mut c), NbStatus::Config);
        assert!(last_error().contains("nope"));

        assert_eq!(nb_config_default(&mut c), NbStatus::Ok);
        assert_eq!(nb_config_set_steps(c, 0), NbStatus::Config);
        assert_eq!(nb_config_set_seed(c, 11), NbStatus::Ok);
        assert_eq!(nb_config_set_mechanisms(c, 1, 0, 1), NbStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(nb_config_to_json(c, &mut json), NbStatus::Ok);
        let cfg = RunConfig::from_json(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        nb_string_free(json);
        assert_eq!((cfg.backbone.seed, cfg.embedding.seed), (11, 11));
        assert!(cfg.dipw.enabled && !cfg.blend.enabled && cfg.sar.enabled);
        nb_config_free(c);

        let ep = CString::new("127.0.0.1:1").unwrap();
        let (c, s) = (config(), script());
        let mut run = ptr::null_mut();
        assert_eq!(nb_generate_bridge(c, s, ep.as_ptr(), &mut run), NbStatus::Transport);
        assert!(run.is_null());
        nb_script_free(s);
        nb_config_free(c);
    }
}

#[test]
fn write_dir_produces_run_files() {
    unsafe {
        let (c, s) = (config(), script());
        let mut run = ptr::null_mut();
        assert_eq!(nb_generate(c, s, &mut run), NbStatus::Ok);
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let p = CString::new(dir.to_str().unwrap()).unwrap();
        assert_eq!(nb_run_write_dir(run, p.as_ptr()), NbStatus::Ok);
        for f in ["run.json", "weights.csv", "blend_plans.json", "metrics.json", "segment_3.f32le", "segment_3.json"] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        nb_run_free(run);
        nb_script_free(s);
        nb_config_free(c);
    }
}

#[test]
fn stateless_helpers() {
    unsafe {
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(nb_dipw_weights(1.0, 0.0, 0.5, &mut a, &mut b), NbStatus::Ok);
        assert!((a - 0.8807970779778823).abs() < 1e-12 && (a + b - 1.0).abs() < 1e-15);
        assert_eq!(nb_dipw_weights(1.0, 0.0, 0.0, &mut a, &mut b), NbStatus::Argument);

        let mut w = [0.0; 3];
        assert_eq!(nb_decay_weights(3, 0.5, w.as_mut_ptr(), 3), NbStatus::Ok);
        let want = [0.25 / 1.75, 0.5 / 1.75, 1.0 / 1.75];
        for (x, y) in w.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(nb_decay_weights(3, 0.5, w.as_mut_ptr(), 2), NbStatus::BufferTooSmall);

        let mut out = 0.0;
        assert_eq!(nb_sar_modulate(0.3, 0.5, 0.5, &mut out), NbStatus::Ok);
        assert!((out - 0.15).abs() < 1e-15);
        assert_eq!(nb_sar_modulate(0.3, 1.0, 0.5, &mut out), NbStatus::Ok);
        assert_eq!(out, 0.0);
    }
}
