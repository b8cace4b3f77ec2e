use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use injectdiff::backbone::{checkpoint, Architecture, ToyBackbone};
use injectdiff::diffmath::ScheduleKind;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_injectdiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn injectdiff")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// A 16×16 dataset, a briefly trained checkpoint and a two-pair benchmark,
/// shared by every test in this binary.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ckpt(&self) -> String {
        s(&self.path("toy.ckpt")).to_string()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        ok(&["make-shapes", "--count", "12", "--size", "16", "--seed", "3", "--out", s(&f.path("shapes"))]);
        ok(&[
            "train-toy",
            "--dataset",
            s(&f.path("shapes")),
            "--steps",
            "6",
            "--set",
            "train.batch_size=4",
            "--set",
            "train.validation_size=2",
            "--set",
            "train.learning_rate=0.01",
            "--out",
            s(&f.path("toy.ckpt")),
        ]);
        let captions = fs::read_to_string(f.path("shapes/captions.tsv")).unwrap();
        let mut manifest = String::from("# split\tguidance\tsource_prompt\ttarget_prompt\tclass\trendition\n");
        for line in captions.lines().filter(|l| !l.starts_with('#')).take(2) {
            let (file, caption) = line.split_once('\t').unwrap();
            let shape = caption.rsplit(' ').next().unwrap();
            manifest.push_str(&format!("wild-real\tshapes/{file}\t{caption}\ta red {shape}\t{shape}\t-\n"));
        }
        manifest.push_str("wild-generated\tseed:4\ta blue ring\ta green ring\tring\t-\n");
        fs::write(f.path("bench.tsv"), manifest).unwrap();
        f
    })
}

fn translate_config(f: &Fixture, name: &str, extra: &str) -> PathBuf {
    let captions = fs::read_to_string(f.path("shapes/captions.tsv")).unwrap();
    let line = captions.lines().find(|l| !l.starts_with('#')).unwrap();
    let (file, caption) = line.split_once('\t').unwrap();
    let cfg = f.path(name);
    fs::write(
        &cfg,
        format!(
            "# translation of the first dataset image\nguidance.image=shapes/{file}\nprompt.source={caption}\nprompt.target=a yellow square\ninversion.steps=5\ninjection.n_steps=6\n{extra}"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn unknown_command_prints_usage() {
    let out = run(&["frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(!run(&[]).status.success());
}

#[test]
fn training_requires_a_dataset() {
    let out = run(&["train-toy"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dataset"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = fixture();
    let out = run(&["train-toy", "--dataset", s(&f.path("shapes")), "--set", "train.nope=1", "--out", s(&f.path("x.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.nope"));
    let cfg = translate_config(f, "bad.cfg", "injection.taus=3\n");
    let out = run(&["translate", "--checkpoint", &f.ckpt(), "--config", s(&cfg), "--out", s(&f.path("bad"))]);
    assert!(!out.status.success());
    assert!(!f.path("bad/output.png").exists());
}

#[test]
fn training_is_reproducible_and_zero_steps_is_initialisation() {
    let f = fixture();
    let a = f.path("again.ckpt");
    let args = |out: &Path, steps: &str| {
        ok(&[
            "train-toy", "--dataset", s(&f.path("shapes")), "--steps", steps, "--set", "train.batch_size=4",
            "--set", "train.validation_size=2", "--set", "train.learning_rate=0.01", "--out", s(out),
        ])
    };
    args(&a, "6");
    assert_eq!(fs::read(&a).unwrap(), fs::read(f.path("toy.ckpt")).unwrap());
    assert!(f.path("toy.log.tsv").exists());

    let z = f.path("zero.ckpt");
    args(&z, "0");
    let arch = Architecture { resolution: 16, ..Architecture::default() };
    let init = ToyBackbone::new(&arch, ScheduleKind::Linear, 1000, 0).unwrap();
    assert_eq!(fs::read(&z).unwrap(), checkpoint::to_bytes(&init));
}

#[test]
fn translate_applies_presets_and_is_deterministic() {
    let f = fixture();
    let cfg = translate_config(f, "t.cfg", "");
    let out1 = f.path("t1");
    let out2 = f.path("t2");
    for out in [&out1, &out2] {
        ok(&["translate", "--checkpoint", &f.ckpt(), "--config", s(&cfg), "--preset", "default_real", "--out", s(out)]);
    }
    for file in ["output.png", "guidance_reconstruction.png", "steps.log", "request.txt"] {
        assert_eq!(fs::read(out1.join(file)).unwrap(), fs::read(out2.join(file)).unwrap(), "{file}");
    }
    let req = fs::read_to_string(out1.join("request.txt")).unwrap();
    for kv in ["cfg.scale=15", "injection.tau_f=6", "injection.tau_a=6", "negprompt.alpha0=1"] {
        assert!(req.lines().any(|l| l == kv), "{kv} missing from\n{req}");
    }
    // With the default 50 steps the preset thresholds are used unchanged.
    let cfg50 = translate_config(f, "t50.cfg", "injection.n_steps=50\n");
    let out = f.path("t50");
    ok(&["translate", "--checkpoint", &f.ckpt(), "--config", s(&cfg50), "--preset", "default_real", "--out", s(&out)]);
    let req = fs::read_to_string(out.join("request.txt")).unwrap();
    assert!(req.lines().any(|l| l == "injection.tau_f=40") && req.lines().any(|l| l == "injection.tau_a=25"));
    let log = fs::read_to_string(out.join("steps.log")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.contains("features=-")).count(), 10);
    assert_eq!(log.lines().filter(|l| !l.contains("attention=-")).count(), 25);
}

#[test]
fn no_negative_prompt_is_the_constant_schedule() {
    let f = fixture();
    let cfg = translate_config(f, "n.cfg", "");
    let a = f.path("neg_flag");
    let b = f.path("neg_const");
    ok(&["translate", "--checkpoint", &f.ckpt(), "--config", s(&cfg), "--no-negative-prompt", "--out", s(&a)]);
    ok(&[
        "translate", "--checkpoint", &f.ckpt(), "--config", s(&cfg), "--set", "negprompt.schedule=constant",
        "--set", "negprompt.alpha0=1", "--out", s(&b),
    ]);
    assert_eq!(fs::read(a.join("output.png")).unwrap(), fs::read(b.join("output.png")).unwrap());
}

#[test]
fn analysis_commands_write_artifacts() {
    let f = fixture();
    let img = f.path("shapes/00000.png");
    let img = if img.exists() {
        img
    } else {
        fs::read_dir(f.path("shapes")).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|e| e == "png")).unwrap()
    };
    let ck = f.ckpt();
    ok(&["invert", "--checkpoint", &ck, "--image", s(&img), "--set", "inversion.steps=5", "--steps", "5", "--out", s(&f.path("inv"))]);
    let latent = injectdiff::imageio::load_latent(&f.path("inv/latent.bin")).unwrap();
    assert_eq!(latent.shape(), &[3, 16, 16]);
    assert!(f.path("inv/reconstruction.png").exists());

    ok(&["sdedit", "--checkpoint", &ck, "--image", s(&img), "--prompt", "a red ring", "--fraction", "0.4", "--steps", "5", "--out", s(&f.path("sd.png"))]);
    assert!(f.path("sd.png").exists());

    ok(&["pca", "--checkpoint", &ck, "--images", s(&img), s(&img), "--steps", "4", "--set", "inversion.steps=4", "--out", s(&f.path("pca"))]);
    assert_eq!(fs::read_to_string(f.path("pca/explained.tsv")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_dir(f.path("pca")).unwrap().count(), 3);

    ok(&["attention-pca", "--checkpoint", &ck, "--image", s(&img), "--layers", "6,7", "--steps", "4", "--set", "inversion.steps=4", "--out", s(&f.path("apca"))]);
    assert!(f.path("apca/decoder_6.png").exists() && f.path("apca/decoder_7.png").exists());

    ok(&["variance", "--checkpoint", &ck, "--seeds", "3", "--prompts", "a red ring,a blue square,a green circle", "--out", s(&f.path("var.tsv"))]);
    let tsv = fs::read_to_string(f.path("var.tsv")).unwrap();
    assert!(tsv.starts_with("layer\t") && tsv.lines().count() > 1);
}

#[test]
fn bench_build_produces_150_pairs() {
    let f = fixture();
    let out = f.path("bench150.tsv");
    ok(&["bench-build", "--classes", s(&repo().join("data/imagenet_r_classes.tsv")), "--seed", "0", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 150);
    let again = f.path("bench150b.tsv");
    ok(&["bench-build", "--classes", s(&repo().join("data/imagenet_r_classes.tsv")), "--seed", "0", "--out", s(&again)]);
    assert_eq!(text, fs::read_to_string(&again).unwrap());
    let gen = f.path("bench150g.tsv");
    ok(&["bench-build", "--classes", s(&repo().join("data/imagenet_r_classes.tsv")), "--mode", "generated-imagenet-r", "--out", s(&gen)]);
    assert!(fs::read_to_string(&gen).unwrap().lines().filter(|l| !l.starts_with('#')).all(|l| l.contains("seed:")));
}

#[test]
fn bench_eval_and_ablate_reports() {
    let f = fixture();
    let ck = f.ckpt();
    let common = ["--steps", "4", "--set", "inversion.steps=4", "--workers", "2"];
    let mut args = vec!["bench-eval", "--checkpoint", &ck, "--manifest"];
    let manifest = f.path("bench.tsv");
    args.push(s(&manifest));
    let out = f.path("eval");
    args.extend(["--out", s(&out)]);
    args.extend(common);
    ok(&args);
    let summary = fs::read_to_string(out.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 4, "{summary}");
    assert_eq!(fs::read_to_string(out.join("pairs.tsv")).unwrap().lines().count(), 3 + 2);

    let sd = f.path("eval_sd");
    ok(&["bench-eval", "--checkpoint", &ck, "--manifest", s(&manifest), "--method", "sdedit:0.5", "--steps", "4", "--out", s(&sd)]);
    assert!(sd.join("summary.tsv").exists());
    assert!(!run(&["bench-eval", "--checkpoint", &ck, "--manifest", s(&manifest), "--metrics", "clip", "--out", s(&f.path("clip"))]).status.success());

    let ab = f.path("ablation.tsv");
    let mut args = vec!["ablate", "--checkpoint", &ck, "--manifest", s(&manifest), "--out", s(&ab)];
    args.extend(common);
    ok(&args);
    let table = fs::read_to_string(&ab).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6, "{table}");
    assert!(lines.iter().all(|l| l.split('\t').count() == 4), "{table}");
    assert!(lines[1].starts_with("w/ encoder-feat-7"));
}
