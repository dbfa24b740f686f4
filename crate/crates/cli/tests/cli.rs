use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rtda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtda")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn count_reports_exact_parameters() {
    for (variant, count, short) in [
        ("FCD", "2781121", "2.781M"),
        ("FCD-Light", "191364", "191.364K"),
        ("FCD-Light&Thin", "13316", "13.316K"),
    ] {
        let o = rtda(&["count", variant]);
        assert!(o.status.success());
        let text = stdout(&o);
        assert!(text.contains(count), "{text}");
        assert!(text.contains(short), "{text}");
    }
}

#[test]
fn flops_csv_totals() {
    for (variant, published) in [("FCD", 30.883e9), ("FCD-Light", 2.14e9), ("FCD-Light&Thin", 1.038e9)] {
        let o = rtda(&["flops", variant, "--h", "512", "--w", "1024", "--csv"]);
        assert!(o.status.success());
        let text = stdout(&o);
        assert!(text.starts_with("layer,params,macs,flops\n"));
        let total = text.lines().find(|l| l.starts_with("total,")).expect("total row");
        let fields: Vec<u64> = total.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields[2], 2 * fields[1]);
        assert!((fields[2] as f64 - published).abs() / published < 0.005, "{variant}: {total}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rtda(&["count", "FCD-Heavy"]).status.code(), Some(1));
    assert_eq!(rtda(&["flops", "FCD", "--h", "100", "--w", "64"]).status.code(), Some(1));
    assert_eq!(rtda(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rtda(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes() {
    let o = rtda(&["gradcheck", "--instances", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.ends_with("ok")));
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let o = rtda(&["gen-data", "--root", path(&root), "--seeds", "0..4", "--size", "32x32"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = rtda(&["gen-data", "--root", path(&root), "--seeds", "100,101", "--size", "32x32", "--split", "val"]);
    assert!(o.status.success());
    for (split, n) in [("train", 4), ("val", 2)] {
        for domain in ["source", "target"] {
            let d = root.join(split).join(domain);
            assert_eq!(fs::read_dir(&d).unwrap().count(), 2 * n, "{}", d.display());
        }
    }

    let out = dir.path().join("run");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny run\nheight = 32\nwidth = 32\nbatch = 2\nwidth_multiplier = 0.25\nmax_iter = 3\ndata_root = {}\nout_dir = {}\n",
            path(&root),
            path(&out)
        ),
    )
    .unwrap();
    let o = rtda(&["train", "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("final.rtda").exists());

    let ckpt = out.join("final.rtda");
    let split = root.join("val").join("target");
    let o = rtda(&["eval", "--ckpt", path(&ckpt), "--split", path(&split)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("class,iou\n"), "{text}");
    assert!(text.lines().last().unwrap().starts_with("mIoU,"));
    let o = rtda(&["eval", "--ckpt", path(&ckpt), "--split", path(&split), "--classes", "1,2"]);
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = rtda(&["train", "--config", path(&cfg), "--set", "lr_seg=1e30", "--set", "max_iter=20"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = rtda(&["train", "--config", path(&cfg), "--set", "learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(1));

    let other = dir.path().join("other");
    let o = rtda(&["gen-data", "--root", path(&other), "--seeds", "0", "--size", "32x32", "--num-classes", "7"]);
    assert!(o.status.success());
    let o = rtda(&["eval", "--ckpt", path(&ckpt), "--split", path(&other.join("train").join("source"))]);
    assert_eq!(o.status.code(), Some(1));
}
