use std::path::Path;
use std::process::{Command, Output};

fn fastgsc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastgsc")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn bad_config_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), r#"{"replicates": 1, "no_such_field": 3}"#).unwrap();
    let o = fastgsc(&["run", "--config", "c.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fastgsc(&["run", "--mode", "sideways"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fastgsc(&["run", "--tau-e", "5", "--segment", "7"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifact_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fastgsc(&["run", "--out", "r", "--mode", "pgsc_random"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let o = fastgsc(&["report", "nowhere"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn full_pipeline_on_a_tiny_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    ok(&fastgsc(&["train-denoiser", "--out", "art", "--steps", "40"], cwd));
    assert!(cwd.join("art/denoiser.ckpt").exists());
    assert!(cwd.join("art/denoiser.loss.csv").exists());
    assert!(cwd.join("art/world.json").exists());

    let den = ["--denoiser", "art/denoiser.ckpt"];
    ok(&fastgsc(&[&["train-policy", "--out", "art", "--iterations", "2"], &den[..]].concat(), cwd));
    assert!(cwd.join("art/policy/policy.ckpt").exists());
    assert!(cwd.join("art/policy/training_curve.csv").exists());

    // a config file sets values, flags override them
    std::fs::write(cwd.join("c.json"), r#"{"replicates": 3, "episodes_per_replicate": 6, "seed": 5}"#).unwrap();
    let run = |mode: &str, out: &str| {
        let args = [
            &["run", "--config", "c.json", "--replicates", "2", "--mode", mode, "--out", out, "--policy-dir", "art/policy"][..],
            &den[..],
        ]
        .concat();
        ok(&fastgsc(&args, cwd));
    };
    run("conventional", "conv");
    run("fast_gsc", "fast");
    for d in ["conv", "fast"] {
        let m = metrics(&cwd.join(d));
        assert_eq!(m["schema_version"], 1);
        assert_eq!(m["replicates"].as_array().unwrap().len(), 2);
        let score = m["score"]["mean"].as_f64().unwrap();
        let resid = m["residual_latency"]["mean"].as_f64().unwrap();
        assert!((m["efficiency"].as_f64().unwrap() - score / resid).abs() < 1e-9);
        for f in ["config.json", "episodes.csv", "timeline.csv", "trace.csv"] {
            assert!(cwd.join(d).join(f).exists(), "{d}/{f}");
        }
        let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cwd.join(d).join("config.json")).unwrap()).unwrap();
        assert_eq!(cfg["seed"], 5);
    }
    let episodes = std::fs::read_to_string(cwd.join("fast/episodes.csv")).unwrap();
    assert_eq!(episodes.lines().next().unwrap(), "replicate,episode,units,score,residual_latency,discarded");
    assert_eq!(episodes.lines().count(), 1 + 2 * 6);
    let trace = std::fs::read_to_string(cwd.join("fast/trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,arrivals,guidance_mode,score_of_x0hat");
    assert_eq!(trace.lines().count(), 1 + 60);

    let o = fastgsc(&["report", "conv", "fast", "--csv", "report.csv"], cwd);
    ok(&o);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("conventional") && table.contains("fast_gsc"));
    assert_eq!(std::fs::read_to_string(cwd.join("report.csv")).unwrap().lines().count(), 3);

    let sweep = [
        &["sweep-alpha", "--out", "sw", "--episodes", "3", "--replicates", "1", "--alphas", "0,4"][..],
        &["--tau-e-list", "2.5,5", "--segment-list", "5,10"][..],
        &den[..],
    ]
    .concat();
    ok(&fastgsc(&sweep, cwd));
    let csv = std::fs::read_to_string(cwd.join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "tau_e,segment,alpha,mean_score,se_score");
    assert_eq!(csv.lines().count(), 1 + 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cwd.join("sw/sweep.json")).unwrap()).unwrap();
    assert_eq!(json["best_alpha"].as_object().unwrap().len(), 2);

    // a policy trained at τ_e = 5 is refused at another latency
    let o = fastgsc(
        &[&["run", "--mode", "fast_gsc", "--tau-e", "7.5", "--segment", "15", "--out", "x", "--policy-dir", "art/policy"][..], &den[..]].concat(),
        cwd,
    );
    assert_eq!(o.status.code(), Some(2));
}
