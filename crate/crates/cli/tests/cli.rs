use std::path::Path;
use std::process::Command;

fn daisi(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_daisi"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_key_exits_with_config_error() {
    let dir = scratch("unknown_key");
    std::fs::write(dir.join("c.toml"), "[gmm]\nparticle = 10\n").unwrap();
    let (code, text) = daisi(&dir, &["ablate", "--config", "c.toml"]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("particle"), "{text}");
}

#[test]
fn guided_zero_t_min_is_rejected_before_running() {
    let dir = scratch("zero_t_min");
    std::fs::write(dir.join("c.toml"), "[grid]\nt_min = [0.0]\neps = [0.1]\n").unwrap();
    let (code, text) = daisi(&dir, &["ablate", "--config", "c.toml"]);
    assert_eq!(code, 2, "{text}");
    assert!(!dir.join("out").exists());
}

#[test]
fn missing_model_is_a_config_error() {
    let dir = scratch("missing_model");
    let (code, text) = daisi(&dir, &["filter"]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("model.bin"), "{text}");
}

#[test]
fn small_ablation_writes_heatmap() {
    let dir = scratch("ablation");
    let cfg = "repeats = 2\ntag = \"t\"\n[gmm]\nparticles = 300\npool = 300\nsteps = 30\n[grid]\nt_min = [0.2, 0.6]\neps = [0.0, 0.5, 1.0]\n";
    std::fs::write(dir.join("c.toml"), cfg).unwrap();
    let (code, text) = daisi(&dir, &["ablate", "--config", "c.toml", "--seed", "4", "--threads", "2"]);
    assert_eq!(code, 0, "{text}");
    let run = dir.join("out/gmm_ablation/t");
    let csv = std::fs::read_to_string(run.join("heatmap.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t_min,eps,mmd,seed");
    assert_eq!(lines.len(), 1 + 6 * 2);
    assert!(lines[1].starts_with("0.2,0,") && lines[1].ends_with(",4"));
    assert!(lines[12].ends_with(",5"));
    let echo = std::fs::read_to_string(run.join("config_echo.toml")).unwrap();
    assert!(echo.contains("experiment = \"gmm_ablation\"") && echo.contains("seed = 4"));
}

#[test]
fn failing_check_exits_with_code_four() {
    let dir = scratch("check");
    // Two samples cannot pin the posterior variance to 10%.
    let cfg = "[check]\nsamples = 2\nsteps = 2\nmembers = 4\nparticles = 4\nreplicates = 2\nsde_steps = 5\n";
    std::fs::write(dir.join("c.toml"), cfg).unwrap();
    let (code, text) = daisi(&dir, &["check", "--config", "c.toml"]);
    assert_eq!(code, 4, "{text}");
    assert!(text.contains("FAIL"), "{text}");
    assert!(dir.join("out/linear_gaussian_check/seed0/check.csv").is_file());
}
