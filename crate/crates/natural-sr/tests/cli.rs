//! End-to-end runs of the compiled binary: exit codes, file outputs,
//! config echo, and cross-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use natural_sr::config::parse_config;
use natural_sr::checkpoint::{save_checkpoint, Checkpoint};
use natural_sr::data::toy_images;
use natural_sr::networks::{FrlConfig, Generator, RdBlockConfig};
use natural_sr::pngio::{load_image, save_image};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_natural-sr"))
}

fn fresh_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("natsr-cli-{}-{}", tag, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_toy_data(dir: &Path, count: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, img) in toy_images(count, size, size, &mut rng).iter().enumerate() {
        save_image(img, &dir.join(format!("img{:02}.png", i))).unwrap();
    }
}

/// Tiny x2 run: every training command finishes in seconds even in a
/// debug build.
const TINY_CONFIG: &str = r#"
seed = 3
scale = 2

[nmd]
widths = [3, 4]
patch = 16

[nmd_train]
steps = 6
batch = 4
lr = 1e-3
val_every = 3
val_samples = 2

[generator]
features = 4
depth = 1

[generator.block]
convs = 2
growth = 3

[gan]
widths = [3, 4]

[train]
lr_patch = 8
batch = 2
steps = 4
lr = 1e-3
eval_every = 2
eval_images = 2
"#;

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2_with_usage_text() {
    let no_args = bin().output().unwrap();
    assert_eq!(no_args.status.code(), Some(2));
    assert!(stderr_of(&no_args).contains("Usage"));

    let bad_sub = bin().arg("transmogrify").output().unwrap();
    assert_eq!(bad_sub.status.code(), Some(2));

    let bad_flag = bin().args(["grad-check", "--frobnicate"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(2));
    assert!(stderr_of(&bad_flag).contains("Usage") || stderr_of(&bad_flag).contains("usage"));
}

#[test]
fn grad_check_passes_and_reports_single_op() {
    let all = bin().arg("grad-check").output().unwrap();
    assert_eq!(all.status.code(), Some(0), "stderr: {}", stderr_of(&all));
    let text = stdout_of(&all);
    assert!(text.contains("conv2d"));
    assert!(text.contains("ok"));
    assert!(!text.contains("FAIL"));

    let one = bin().args(["grad-check", "--op", "sigmoid"]).output().unwrap();
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(stdout_of(&one).lines().count(), 2, "header plus one row");

    let unknown = bin().args(["grad-check", "--op", "bogus"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn missing_data_dir_is_a_clean_failure() {
    let dir = fresh_dir("nodata");
    let out = bin()
        .args(["synthesize", "--out"])
        .arg(dir.join("out"))
        .env_remove("NATURAL_SR_DATA_DIR")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("NATURAL_SR_DATA_DIR"));
}

#[test]
fn synthesize_writes_triples_manifest_and_loadable_echo() {
    let dir = fresh_dir("synth");
    let data = dir.join("data");
    write_toy_data(&data, 3, 32, 100);
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out_dir = dir.join("out");
    let out = bin()
        .args(["synthesize", "--count", "2", "--seed", "11"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    for name in [
        "sample0_hr.png",
        "sample0_blurry.png",
        "sample0_noisy.png",
        "sample1_hr.png",
        "manifest.toml",
    ] {
        assert!(out_dir.join(name).exists(), "missing {}", name);
    }
    let manifest: toml::Value =
        toml::from_str(&std::fs::read_to_string(out_dir.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["alpha"].as_float(), Some(0.5));
    assert_eq!(manifest["seed"].as_integer(), Some(11));
    let samples = manifest["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 2);
    for s in samples {
        assert!(s["blurry_membership_db"].as_float().unwrap() > 20.0);
        assert!(s["noisy_membership_db"].as_float().unwrap() > 20.0);
    }

    // The echoed config block parses back to the resolved run config.
    let text = stdout_of(&out);
    let after = text.split("# resolved config\n").nth(1).expect("echo marker");
    let echo: String = after
        .lines()
        .take_while(|l| !l.starts_with("wrote "))
        .map(|l| format!("{}\n", l))
        .collect();
    let cfg = parse_config(&echo).expect("echo must be loadable");
    assert_eq!(cfg.seed, 11, "--seed override must appear in the echo");
    assert_eq!(cfg.scale, 2);
    assert_eq!(cfg.nmd.patch, 16);
}

#[test]
fn training_pipeline_roundtrips_through_all_subcommands() {
    let dir = fresh_dir("pipeline");
    let data = dir.join("data");
    write_toy_data(&data, 6, 24, 200);
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();

    let nmd_ckpt = dir.join("nmd.ckpt");
    let nmd_trace = dir.join("nmd.csv");
    let out = bin()
        .args(["train-nmd", "--pool", "10"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&nmd_ckpt)
        .arg("--trace")
        .arg(&nmd_trace)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(nmd_ckpt.exists());
    let trace = std::fs::read_to_string(&nmd_trace).unwrap();
    assert!(trace.starts_with("step,loss,alpha,sigma"));

    let frsr_ckpt = dir.join("frsr.ckpt");
    let frsr_trace = dir.join("frsr.csv");
    let out = bin()
        .arg("train-frsr")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&frsr_ckpt)
        .arg("--trace")
        .arg(&frsr_trace)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("baseline"));
    assert!(std::fs::read_to_string(&frsr_trace)
        .unwrap()
        .starts_with("step,loss,lr,val_psnr"));

    let natsr_ckpt = dir.join("natsr.ckpt");
    let natsr_trace = dir.join("natsr.csv");
    let out = bin()
        .arg("train-natsr")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--nmd")
        .arg(&nmd_ckpt)
        .arg("--warm")
        .arg(&frsr_ckpt)
        .arg("--out")
        .arg(&natsr_ckpt)
        .arg("--trace")
        .arg(&natsr_trace)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(std::fs::read_to_string(&natsr_trace)
        .unwrap()
        .contains("plausibility"));

    // super-resolve doubles both extents of an arbitrary PNG.
    let lr_path = data.join("img00.png");
    let sr_path = dir.join("sr.png");
    let out = bin()
        .args(["super-resolve"])
        .arg("--ckpt")
        .arg(&natsr_ckpt)
        .arg("--in")
        .arg(&lr_path)
        .arg("--out")
        .arg(&sr_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let sr = load_image(&sr_path).unwrap();
    assert_eq!((sr.height(), sr.width()), (48, 48));

    let out = bin()
        .arg("check-plausibility")
        .arg("--sr")
        .arg(&sr_path)
        .arg("--lr")
        .arg(&lr_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("plausibility"));
    assert!(stdout_of(&out).contains("dB"));

    let out = bin()
        .arg("score-nmd")
        .arg("--ckpt")
        .arg(&nmd_ckpt)
        .arg(&sr_path)
        .arg(&lr_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("mean"));

    let eval_csv = dir.join("eval.csv");
    let out = bin()
        .arg("evaluate")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .arg("--ckpt")
        .arg(&natsr_ckpt)
        .arg("--nmd")
        .arg(&nmd_ckpt)
        .arg("--out")
        .arg(&eval_csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let table = stdout_of(&out);
    assert!(table.contains("psnr") && table.contains("plausibility") && table.contains("nmd"));
    let csv = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(csv.starts_with("name,psnr,psnr_y,ssim,plausibility,nmd"));
    assert_eq!(csv.lines().count(), 1 + 6 + 2, "header, six rows, mean, std");

    // Evaluating without a checkpoint scores plain interpolation.
    let out = bin()
        .arg("evaluate")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("interpolate"));

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn identical_seeded_runs_write_identical_checkpoints() {
    let dir = fresh_dir("determinism");
    let data = dir.join("data");
    write_toy_data(&data, 5, 24, 300);
    let cfg_path = dir.join("cfg.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let run = |name: &str| -> Vec<u8> {
        let ckpt = dir.join(name);
        let out = bin()
            .args(["train-frsr", "--seed", "5", "--threads", "1"])
            .arg("--config")
            .arg(&cfg_path)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&ckpt)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
        std::fs::read(&ckpt).unwrap()
    };
    let a = run("a.ckpt");
    let b = run("b.ckpt");
    assert_eq!(a, b, "same seed and threads must reproduce every byte");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn super_resolve_scales_by_four_and_rejects_wrong_kind() {
    let dir = fresh_dir("sr4");
    let frl = FrlConfig {
        features: 4,
        depth: 1,
        block: RdBlockConfig { convs: 2, growth: 3, fusion_width: None, residual_scale: 0.1 },
    };
    let gen = Generator::init(frl, 4, 77).unwrap();
    let ckpt = dir.join("g4.ckpt");
    save_checkpoint(&Checkpoint::from_generator(&gen, None), &ckpt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lr_path = dir.join("lr.png");
    save_image(&toy_images(1, 10, 14, &mut rng).remove(0), &lr_path).unwrap();
    let sr_path = dir.join("sr.png");
    let out = bin()
        .arg("super-resolve")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--in")
        .arg(&lr_path)
        .arg("--out")
        .arg(&sr_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let sr = load_image(&sr_path).unwrap();
    assert_eq!((sr.height(), sr.width()), (40, 56));

    // A naturalness checkpoint is not a generator.
    let nmd = natural_sr::nmd::NmdNet::init(
        natural_sr::nmd::NmdConfig { widths: vec![3], patch: 8 },
        1,
    )
    .unwrap();
    let nmd_ckpt = dir.join("nmd.ckpt");
    save_checkpoint(&Checkpoint::from_nmd(&nmd, None, None), &nmd_ckpt).unwrap();
    let out = bin()
        .arg("super-resolve")
        .arg("--ckpt")
        .arg(&nmd_ckpt)
        .arg("--in")
        .arg(&lr_path)
        .arg("--out")
        .arg(&sr_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("kind mismatch"));
    let _ = std::fs::remove_dir_all(&dir);
}
