use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wavegan::RunConfig;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Synthetic 6-class set with a tiny network config; `split` already run.
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let mut cfg = RunConfig::default();
        cfg.generator.image_size = 16;
        cfg.generator.encoder_channels = vec![4, 6, 8, 8, 8];
        cfg.discriminator.stem_channels = 4;
        cfg.discriminator.block_channels = vec![4, 6, 8, 8];
        cfg.train.batch_episodes = 2;
        cfg.train.iterations = 6;
        cfg.train.checkpoint_interval = 3;
        cfg.eval.n_per_class = 4;
        cfg.eval.generation_batch = 4;
        cfg.data.root = Some(ws.path("data"));
        cfg.data.seen_count = Some(4);
        cfg.data.unseen_count = Some(2);
        fs::write(ws.path("tiny.toml"), cfg.to_toml().unwrap()).unwrap();
        ws.ok(&["synth", "--root", ws.path("data").to_str().unwrap(), "--classes", "6", "--per-class", "16", "--size", "16"]);
        ws.ok(&["split", "--run-id", "split"]);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let manifest = format!("data.manifest={}", self.path("runs/split/manifest.json").display());
        Command::new(env!("CARGO_BIN_EXE_wavegan"))
            .args(args)
            .args(["--config", self.path("tiny.toml").to_str().unwrap(), "--set", &manifest])
            .arg("--out")
            .arg(self.path("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(out.status.success(), "wavegan {args:?} failed:\n{stderr}");
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn end_to_end_pipeline() {
    let ws = Workspace::new();
    ws.ok(&["train", "--run-id", "t"]);
    let run = ws.path("runs/t");
    assert!(run.join("6.ckpt").exists() && run.join("checkpoints.json").exists());
    assert!(!run.join("INCOMPLETE").exists());
    assert!(read(&run.join("run.json")).contains("\"command\": \"train\""));
    assert_eq!(read(&run.join("metrics.csv")).lines().count(), 7);

    let ckpt = run.join("6.ckpt");
    ws.ok(&["generate", "--run-id", "g", "--checkpoint", ckpt.to_str().unwrap()]);
    let generated = ws.path("runs/g/generated");
    assert!(generated.join("generation.json").exists());

    let stdout = ws.ok(&["evaluate", "--run-id", "e", "--generated", generated.to_str().unwrap()]);
    assert!(stdout.contains("proxy FID"));
    let csv = read(&ws.path("runs/e/metrics.csv"));
    assert!(csv.lines().count() >= 2);

    let img = fs::read_dir(ws.path("data")).unwrap().next().unwrap().unwrap().path();
    let img = fs::read_dir(img).unwrap().next().unwrap().unwrap().path();
    ws.ok(&["decompose", "--run-id", "d", img.to_str().unwrap()]);
    assert!(ws.path("runs/d/bands.png").exists() && ws.path("runs/d/bands.json").exists());

    // Same seeds, same files.
    ws.ok(&["train", "--run-id", "t2"]);
    assert_eq!(read(&run.join("metrics.csv")), read(&ws.path("runs/t2/metrics.csv")));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(ws.path("runs/t2/6.ckpt")).unwrap());
}

#[test]
fn ablate_writes_a_table() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["ablate", "--run-id", "a", "--conditions", "full,wo_hl", "--seeds", "0,1"]);
    let header = stdout.lines().next().unwrap();
    assert_eq!(header, "condition,fid,lpips_proxy,fid_seed0,fid_seed1");
    assert_eq!(stdout.lines().count(), 3);
}

#[test]
fn failures_are_reported() {
    let ws = Workspace::new();
    let out = ws.run(&["generate", "--run-id", "x", "--checkpoint", "/nonexistent/1.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    let out = ws.run(&["train", "--run-id", "y", "--set", "train.no_such_key=1"]);
    assert!(!out.status.success());

    // An existing run directory is never overwritten.
    let out = ws.run(&["split", "--run-id", "split"]);
    assert!(!out.status.success());
}
