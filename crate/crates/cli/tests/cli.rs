use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use casemil::casedata::{read_gray, write_gray16, Grid};

const TINY: &str = "\
dataset.synthetic = true
dataset.n_cases = 24
model.image_height = 32
model.image_width = 24
model.global_channels = 4,8
model.local_channels = 4
model.local_embed = 8
model.k = 3
model.patch_height = 8
model.patch_width = 8
model.attention_hidden = 8
model.t_fraction = 0.1
training.max_epochs = 2
training.lr = 0.001
seeds.data = 5
";

fn casemil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casemil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_is_deterministic_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "syn.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = casemil(&["generate", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let ta = tree(&a);
    assert!(ta.contains_key(Path::new("manifest.csv")));
    assert!(ta.contains_key(Path::new("provenance.cfg")));
    assert!(ta.keys().any(|k| k.extension().is_some_and(|e| e == "pgm")));
    assert_eq!(ta, tree(&b));
    assert!(String::from_utf8_lossy(&ta[Path::new("provenance.cfg")]).contains("seeds.data = 5"));

    let o = casemil(&["generate", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--force"));
    let o = casemil(&["generate", "--config", s(&cfg), "--out", s(&a), "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&a), ta);
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", &format!("{TINY}dataset.lesion_kontrast = 0.5\n"));
    let o = casemil(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dataset.lesion_kontrast"), "{}", stderr(&o));

    let cfg = write_cfg(dir.path(), "spec.cfg", &format!("{TINY}model.spec = es-sideways\n"));
    let o = casemil(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for spec in ["is-mean", "is-max", "is-att", "is-gatt", "is-att-side", "es-mean", "es-att-side"] {
        assert!(err.contains(spec), "{err}");
    }
}

#[test]
fn train_then_eval_with_visualization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("{TINY}model.spec = es-att-side\n"));
    let run = dir.path().join("run");
    let o = casemil(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch=1 split=train"));
    for f in ["best.ckpt", "best.ckpt.index", "best.ckpt.meta", "train.log", "config.cfg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.contains("epoch=2 split=val"));

    let ckpt = run.join("best.ckpt");
    let eval = |tag: &str| {
        let metrics = dir.path().join(format!("{tag}.txt"));
        let viz = dir.path().join(format!("viz_{tag}"));
        let o = casemil(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--config",
            s(&cfg),
            "--out",
            s(&metrics),
            "--visualize",
            "3",
            "--viz-dir",
            s(&viz),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (fs::read_to_string(&metrics).unwrap(), tree(&viz))
    };
    let (m1, v1) = eval("one");
    assert!(m1.contains("case.auc = "));
    assert!(m1.contains("confusion_with_roi:"));
    let case_dirs: std::collections::BTreeSet<_> = v1.keys().map(|k| k.components().next().unwrap()).collect();
    assert_eq!(case_dirs.len(), 3);
    let sidecars: Vec<_> = v1.iter().filter(|(k, _)| k.ends_with("attention.txt")).collect();
    assert_eq!(sidecars.len(), 3);
    let text = String::from_utf8_lossy(sidecars[0].1);
    assert!(text.contains("a_m = ") && text.contains("a_j = "), "{text}");
    let pgm = v1.keys().find(|k| k.extension().is_some_and(|e| e == "pgm")).unwrap();
    let montage = read_gray(&dir.path().join("viz_one").join(pgm)).unwrap();
    assert_eq!((montage.height(), montage.width()), (32, 3 * 24 + 4));

    let (m2, v2) = eval("two");
    assert_eq!(m1, m2);
    assert_eq!(v1, v2);

    // spec mismatch between checkpoint and config
    let other = write_cfg(dir.path(), "other.cfg", &format!("{TINY}model.spec = is-mean\n"));
    let o = casemil(&["eval", "--ckpt", s(&ckpt), "--config", s(&other), "--out", s(&dir.path().join("x.txt"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("spec"), "{}", stderr(&o));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("{}model.spec = is-gatt\n", TINY.replace("training.max_epochs = 2", "training.max_epochs = 1")));
    let mut ckpts = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.path().join(tag);
        let o = casemil(&["train", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        ckpts.push(tree(&out));
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn scheme_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "mixed.cfg",
        &format!("{TINY}training.scheme = dynamic\ntraining.batching = mixed\n"),
    );
    let o = casemil(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let cfg = write_cfg(
        dir.path(),
        "fixed.cfg",
        &format!("{TINY}training.scheme = fixed-image\ndataset.view_counts = 1,0,0,0,0\n"),
    );
    let o = casemil(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("empty training split"), "{}", stderr(&o));
}

fn generate(dir: &Path) -> PathBuf {
    let cfg = write_cfg(dir, "syn.cfg", TINY);
    let data = dir.join("data");
    let o = casemil(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

#[test]
fn manifest_training_and_roi_free_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let body = TINY
        .replace("dataset.synthetic = true\ndataset.n_cases = 24\n", "")
        .replace("training.max_epochs = 2", "training.max_epochs = 1");
    let cfg = write_cfg(
        &data,
        "run.cfg",
        &format!("dataset.manifest = train.csv\ndataset.val_manifest = val.csv\n{body}"),
    );
    let run = dir.path().join("run");
    let o = casemil(&["train", "--config", s(&cfg), "--out", s(&run), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // drop the groundtruth columns
    let text = fs::read_to_string(data.join("test.csv")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(data.join("test_nogt.csv"), stripped).unwrap();
    let metrics = dir.path().join("m.txt");
    let o = casemil(&[
        "eval",
        "--ckpt",
        s(&run.join("best.ckpt")),
        "--data",
        s(&data.join("test_nogt.csv")),
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = fs::read_to_string(&metrics).unwrap();
    assert!(m.contains("iou.all.best_of_topk.iou = n/a"), "{m}");
    assert!(m.contains("iou.malignant.top_attention.dsc = n/a"), "{m}");
    assert!(m.contains("proxy.attention.f1 = n/a"), "{m}");
}

#[test]
fn wrong_extents_point_to_preprocess() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let body = TINY
        .replace("dataset.synthetic = true\ndataset.n_cases = 24\n", "")
        .replace("model.image_height = 32", "model.image_height = 40");
    let cfg = write_cfg(&data, "run.cfg", &format!("dataset.manifest = train.csv\n{body}"));
    let o = casemil(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("preprocess"), "{}", stderr(&o));
}

#[test]
fn preprocess_crops_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir_all(&raw).unwrap();
    // breast blob against the right edge of a wide canvas, plus a label tag
    let img = Grid::from_fn(60, 80, |y, x| {
        let (dy, dx) = (y as f64 - 30.0, x as f64 - 79.0);
        if dy * dy / 625.0 + dx * dx / 900.0 <= 1.0 {
            0.6
        } else if y < 3 && x < 3 {
            0.9
        } else {
            0.0
        }
    });
    write_gray16(&raw.join("c1_R_CC.pgm"), &img).unwrap();
    write_gray16(&raw.join("c1_R_MLO.pgm"), &img).unwrap();
    fs::write(
        raw.join("manifest.csv"),
        "case_id,side,view,path,case_label,image_label,roi_boxes\n\
         c1,R,CC,c1_R_CC.pgm,malignant,malignant,60:25:70:35:mass:malignant\n\
         c1,R,MLO,c1_R_MLO.pgm,malignant,benign,\n",
    )
    .unwrap();
    let out = dir.path().join("pre");
    let o = casemil(&[
        "preprocess",
        "--manifest",
        s(&raw.join("manifest.csv")),
        "--out",
        s(&out),
        "--height",
        "32",
        "--width",
        "24",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cases = casemil::casedata::load_manifest(&out.join("manifest.csv")).unwrap();
    assert_eq!(cases.len(), 1);
    for img in &cases[0].images {
        assert_eq!((img.pixels.height(), img.pixels.width()), (32, 24));
        // flipped right side: chest wall now on the left edge
        assert!(img.pixels.get(16, 0) > 0.5);
        assert_eq!(img.pixels.get(0, 23), 0.0);
    }
    let cc = cases[0].images.iter().find(|i| !i.roi_boxes.is_empty()).unwrap();
    assert!(cc.roi_boxes[0].rect.x0 < 12);

    let o = casemil(&["preprocess", "--manifest", s(&raw.join("manifest.csv")), "--out", s(&raw)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_and_unknown_flags() {
    let o = casemil(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let h = stdout(&o);
    assert!(h.contains("--config") && h.contains("--out") && h.contains("--quiet"));
    let o = casemil(&["eval", "--help"]);
    let h = stdout(&o);
    for flag in ["--ckpt", "--data", "--config", "--out", "--visualize", "--viz-dir"] {
        assert!(h.contains(flag), "{flag}");
    }
    assert!(!stdout(&casemil(&["gradcheck", "--help"])).contains("inject"));
    let o = casemil(&["train", "--config", "x", "--bogus"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_command() {
    let o = casemil(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("op conv2d "));
    assert!(out.contains("path spec:es-att-side "));
    assert!(out.contains("path head:local:benign "));
    assert!(out.contains("path saliency_l1 "));
    assert!(out.trim_end().ends_with("PASS"));

    let o = casemil(&["gradcheck", "--trials", "3", "--inject-grad-error", "sigmoid"]);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn shipped_reference_config_describes_reference_dataset() {
    use casemil::casedata::SyntheticConfig;
    use casemil_cli::{DataSource, RunConfig};
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.cfg");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.dataset, DataSource::Synthetic(SyntheticConfig::reference()));
    assert_eq!(cfg.model.features.window(), (1, 1));
}
