use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use linglo_core::backbone::{Backbone, BackboneConfig, Variant};

fn linglo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linglo"))
        .args(args)
        .env_remove("LINGLO_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value of the first `key=value` line.
fn field(o: &Output, key: &str) -> String {
    let prefix = format!("{key}=");
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&prefix).map(str::to_string))
        .unwrap_or_else(|| panic!("no `{key}=` line in:\n{}", stdout(o)))
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

mod usage {
    use super::*;

    #[test]
    fn unknown_subcommand_prints_usage_and_exits_2() {
        let o = linglo(&["frobnicate"]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }

    #[test]
    fn unknown_flag_exits_2() {
        let o = linglo(&["params", "--colour"]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("Usage"));
    }

    #[test]
    fn bad_config_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "variant = \"b0\"\n[stages]\nheads = [1, 2, 3, 8]\n").unwrap();
        let o = linglo(&["params", "--config", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("stages.heads[2]"), "{}", stderr(&o));
    }

    #[test]
    fn bad_layout_exits_2() {
        let o = linglo(&["params", "--config", "b0", "--layout", "H-X-H-H"]);
        assert_eq!(o.status.code(), Some(2));
    }

    #[test]
    fn missing_weights_exit_2() {
        let o = linglo(&["merge", "--weights", "/nonexistent/w.lglo", "--out", "/tmp/never.lglo"]);
        assert_eq!(o.status.code(), Some(2));
    }
}

mod params {
    use super::*;

    #[test]
    fn b0_total_matches_library_and_echoes_config() {
        let o = linglo(&["params", "--config", &config("b0.toml")]);
        assert!(o.status.success(), "{}", stderr(&o));
        let total: usize = field(&o, "total_params").parse().unwrap();
        assert_eq!(total, 3_778_312);
        assert!(stdout(&o).contains("#   variant = \"b0\""));
        let merged: usize = field(&o, "merged_params").parse().unwrap();
        assert!(merged < total);
    }

    #[test]
    fn c_layout_override_stays_within_three_percent() {
        let base: f64 = field(&linglo(&["params", "--config", "b0"]), "total_params").parse().unwrap();
        for layout in ["C-C-H-H", "C-H-H-H"] {
            let o = linglo(&["params", "--config", &config("b0.toml"), "--layout", layout]);
            assert_eq!(field(&o, "layout"), layout);
            let n: f64 = field(&o, "total_params").parse().unwrap();
            assert!((n / base - 1.0).abs() <= 0.03, "{layout}: {n}");
        }
    }

    #[test]
    fn micro_agrees_with_library_count() {
        let o = linglo(&["params", "--config", &config("micro.toml")]);
        let want = Backbone::new(BackboneConfig::from_variant(Variant::Micro).unwrap()).unwrap();
        assert_eq!(field(&o, "total_params"), want.param_count().to_string());
    }
}

mod checks {
    use super::*;

    #[test]
    fn softmax_op_check_passes() {
        let o = linglo(&["gradcheck", "--scope", "op", "--op", "softmax"]);
        assert!(o.status.success(), "{}", stdout(&o));
        assert_eq!(field(&o, "gradcheck"), "pass");
    }

    #[test]
    fn micro_model_check_passes() {
        let o = linglo(&["gradcheck", "--scope", "model"]);
        assert!(o.status.success(), "{}", stdout(&o));
    }

    #[test]
    fn corrupted_gradient_fails_with_tensor_name() {
        let o = linglo(&["gradcheck", "--scope", "block", "--op", "encoder", "--inject-fault", "blk.ffn.fc1.weight"]);
        assert_eq!(o.status.code(), Some(1));
        assert_eq!(field(&o, "worst_tensor"), "block/encoder_block:blk.ffn.fc1.weight");
        assert!(stderr(&o).contains("blk.ffn.fc1.weight"));
    }

    #[test]
    fn fault_on_unknown_tensor_is_a_usage_error() {
        let o = linglo(&["gradcheck", "--op", "softmax", "--inject-fault", "nope"]);
        assert_eq!(o.status.code(), Some(2));
    }

    #[test]
    fn oracle_check_passes() {
        let o = linglo(&["oracle-check", "--instances", "50"]);
        assert!(o.status.success());
        assert_eq!(field(&o, "oracle_check"), "pass");
    }
}

mod weights {
    use super::*;

    fn init_micro(dir: &Path) -> String {
        let path = dir.join("micro.lglo");
        let o = linglo(&["init", "--config", "micro", "--out", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn merge_drops_branches_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = init_micro(dir.path());
        let once = dir.path().join("once.lglo");
        let twice = dir.path().join("twice.lglo");

        let o = linglo(&["merge", "--weights", &raw, "--out", once.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let model = Backbone::new(BackboneConfig::from_variant(Variant::Micro).unwrap()).unwrap();
        let removed: usize = field(&o, "scalars_removed").parse().unwrap();
        assert_eq!(removed, model.param_count() - model.merged_param_count());
        let diff: f64 = field(&o, "max_logit_diff").parse().unwrap();
        assert!(diff <= 1e-4);

        let o = linglo(&["merge", "--weights", once.to_str().unwrap(), "--out", twice.to_str().unwrap()]);
        assert!(o.status.success());
        assert_eq!(field(&o, "scalars_removed"), "0");
        assert_eq!(fs::read(&once).unwrap(), fs::read(&twice).unwrap());
    }

    #[test]
    fn failed_verification_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let raw = init_micro(dir.path());
        let out = dir.path().join("merged.lglo");
        // Float reassociation leaves a nonzero difference, which a zero
        // tolerance rejects.
        let o = linglo(&["merge", "--weights", &raw, "--out", out.to_str().unwrap(), "--tolerance", "0"]);
        assert_eq!(o.status.code(), Some(1));
        assert_eq!(field(&o, "merge"), "fail");
        assert!(!out.exists());
    }

    #[test]
    fn seed_comes_from_environment() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.lglo");
        let b = dir.path().join("b.lglo");
        let c = dir.path().join("c.lglo");
        linglo(&["init", "--config", "micro", "--seed", "7", "--out", a.to_str().unwrap()]);
        let o = Command::new(env!("CARGO_BIN_EXE_linglo"))
            .args(["init", "--config", "micro", "--out", b.to_str().unwrap()])
            .env("LINGLO_SEED", "7")
            .output()
            .unwrap();
        assert!(o.status.success());
        linglo(&["init", "--config", "micro", "--out", c.to_str().unwrap()]);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    }
}

mod wrappers {
    use super::*;

    #[test]
    fn b1_shapes_at_224() {
        let o = linglo(&["shapes", "--config", &config("b1.toml"), "--input", "224"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(field(&o, "stage1_shape"), "1x64x56x56");
        assert_eq!(field(&o, "stage2_shape"), "1x128x28x28");
        assert_eq!(field(&o, "stage3_shape"), "1x320x14x14");
        assert_eq!(field(&o, "stage4_shape"), "1x512x7x7");
    }

    #[test]
    fn indivisible_input_exits_2() {
        let o = linglo(&["shapes", "--config", "micro", "--input", "100"]);
        assert_eq!(o.status.code(), Some(2));
    }

    #[test]
    fn bench_writes_csv_and_exponents() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sweep.csv");
        let o = linglo(&[
            "bench", "--kinds", "key_only,dot_product", "--N", "16,32,64,128", "--dim", "16", "--in-dim", "16", "--batch", "2",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let csv = fs::read_to_string(&out).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "kind,N,batch,wall_time_ms,peak_bytes,flops");
        assert_eq!(csv.lines().count(), 9);
        let exponents = stdout(&o).lines().filter(|l| l.starts_with("exponent ")).count();
        assert_eq!(exponents, 6);
        assert!(dir.path().join("sweep.fits.json").exists());
    }

    #[test]
    fn bench_rejects_short_grid() {
        let o = linglo(&["bench", "--N", "16,32", "--out", "/tmp/unused.csv"]);
        assert_eq!(o.status.code(), Some(2));
    }

    #[test]
    fn toy_training_overfits() {
        let o = linglo(&["train-toy", "--config", "micro", "--steps", "500", "--overfit", "16"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let loss: f64 = field(&o, "final_loss").parse().unwrap();
        assert!(loss < 0.1);
    }

    #[test]
    fn too_short_training_exits_1() {
        let o = linglo(&["train-toy", "--config", "micro", "--steps", "2"]);
        assert_eq!(o.status.code(), Some(1));
    }
}
