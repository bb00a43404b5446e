//! File formats as documented in docs/formats.md, checked through real runs.

use riskmon::corruption::{CorruptionKind, CorruptionSpec, FrameWindow, RunSpec};
use riskmon::io::{self, ExperimentConfig, FrameLog, RISK_COLUMNS};
use riskmon::pipeline;

fn short_run(raw_dim: usize) -> pipeline::RunOutput {
    let mut config = ExperimentConfig::default();
    config.scenario.num_frames = 30;
    config.log.raw_hessian_max_dim = raw_dim;
    let run = RunSpec {
        scenario_seed: 4,
        corruption: CorruptionSpec { kind: CorruptionKind::SaltPepper, severity: 2, window: Some(FrameWindow { start: 10, end: 30 }), seed: 4, ramp_frames: 0 },
    };
    pipeline::run_one(&config, &run, Some(1.0)).unwrap()
}

#[test]
fn frame_log_layout() {
    let out = short_run(0);
    let dir = tempfile::tempdir().unwrap();
    pipeline::write_run(dir.path(), &out).unwrap();
    let text = std::fs::read_to_string(pipeline::frame_log_path(dir.path(), "salt_pepper-s2-seed4")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["type"], "header");
    assert_eq!(lines[0]["schema"], "riskmon.framelog");
    assert_eq!(lines[0]["version"], "1.0");
    assert_eq!(lines[0]["corruption"]["kind"], "salt_pepper");
    assert_eq!(lines.last().unwrap()["type"], "end");
    assert_eq!(lines.last().unwrap()["status"], "completed");
    let frames: Vec<&serde_json::Value> = lines.iter().filter(|l| l["type"] == "frame").collect();
    assert_eq!(frames.len(), 30);
    assert_eq!(frames[0]["status"], "initializing");
    let f = &frames[15];
    assert_eq!(f["status"], "tracking");
    let feature = &f["features"][0];
    assert_eq!(feature["residual"].as_array().unwrap().len(), 2);
    assert_eq!(feature["j_pi"].as_array().unwrap().len(), 6);
    assert_eq!(feature["s_ii"].as_array().unwrap().len(), 9);
    assert_eq!(f["summary"]["n_features"].as_u64().unwrap() as usize, f["features"].as_array().unwrap().len());

    let reloaded = FrameLog::load(&pipeline::frame_log_path(dir.path(), "salt_pepper-s2-seed4")).unwrap();
    assert_eq!(reloaded, out.log);
}

#[test]
fn risk_csv_layout() {
    let out = short_run(0);
    let mut buf = Vec::new();
    io::write_risk_csv(&mut buf, &out.rows()).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# schema=riskmon.risk version=1.0");
    assert_eq!(lines.next().unwrap(), RISK_COLUMNS.join(","));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 12);
    assert_eq!(first[0], "0");
    assert!(first[10] == "true" || first[10] == "false");
    assert_eq!(io::read_risk_csv(text.as_bytes()).unwrap(), out.rows());
}

#[test]
fn raw_hessian_records_match_logged_marginals() {
    let out = short_run(100_000);
    assert!(!out.log.raw_hessians.is_empty());
    let raw = out.log.raw_hessians.last().unwrap();
    let frame = out.log.frames.iter().find(|f| f.frame_id == raw.frame_id).unwrap();
    let h = raw.to_hessian().unwrap();
    let dense_inverse = h.to_dense(true).try_inverse().unwrap();
    let np = 6 * h.num_poses;
    // Each logged block inverts to the landmark's block of the full inverse.
    for feature in &frame.features {
        let cov = feature.information().try_inverse().unwrap();
        let matched = (0..h.num_landmarks()).any(|i| {
            let block = dense_inverse.fixed_view::<3, 3>(np + 3 * i, np + 3 * i);
            (cov - block).norm() <= 1e-8 * block.norm()
        });
        assert!(matched, "feature {} has no matching marginal block", feature.feature_id);
    }
}

#[test]
fn unsupported_versions_are_rejected() {
    let bad = "{\"type\":\"header\",\"schema\":\"riskmon.framelog\",\"version\":\"2.0\",\"run_tag\":\"x\",\"frame_interval_s\":0.05}\n";
    assert!(matches!(io::read_frame_log(bad.as_bytes()), Err(riskmon::Error::UnsupportedSchema { .. })));
    let minor = "{\"type\":\"header\",\"schema\":\"riskmon.framelog\",\"version\":\"1.7\",\"run_tag\":\"x\",\"frame_interval_s\":0.05}\n";
    assert!(io::read_frame_log(minor.as_bytes()).is_ok());
    assert!(matches!(io::read_risk_csv("# schema=riskmon.risk version=3.0\n".as_bytes()), Err(riskmon::Error::UnsupportedSchema { .. })));
}
