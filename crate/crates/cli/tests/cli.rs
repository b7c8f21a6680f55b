use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_defxattn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("DEFXATTN_THREADS", "2").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small but complete run: 8³ volumes, two pairs for training, one for
/// validation, two epochs.
fn write_tiny_config(dir: &Path) -> String {
    let cfg = dir.join("tiny.cfg");
    let data = dir.join("data");
    fs::write(
        &cfg,
        format!(
            "# tiny run\nimage = 8,8,8\nn_train = 2\nn_val = 1\nn_labels = 2\nn_blobs = 3\nmax_warp = 1.0\n\
             smoothing = 2.0\nepochs = 2\nlr = 1e-3\ndata_dir = {}\n",
            data.display()
        ),
    )
    .unwrap();
    cfg.display().to_string()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = run(&["synth", "--config", &cfg, "--seed", "5", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 1 + 3 * 10);
    assert_eq!(fa, fb);
    let c = tmp.path().join("c");
    run(&["synth", "--config", &cfg, "--seed", "6", "--out", c.to_str().unwrap()]);
    assert_ne!(files(&c), fa);
}

#[test]
fn train_eval_dump_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let o = run(&["synth", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = tmp.path().join("run");
    let o = run(&["train", "--config", &cfg, "--out", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        header(&run_dir.join("loss.csv")),
        "epoch,iterations,loss,ncc,dice,diffusion,val_dice"
    );
    assert_eq!(fs::read_to_string(run_dir.join("loss.csv")).unwrap().lines().count(), 4);

    let ck = run_dir.join("checkpoint.dcax");
    let eval_dir = tmp.path().join("eval");
    let o = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        header(&eval_dir.join("metrics.csv")),
        "pair_id,dice_mean,dice_l1,dice_l2,hd95,sdlogj,pct_nonpositive,pct_ndv"
    );
    assert_eq!(
        header(&eval_dir.join("registration.csv")),
        "pair_id,dice_pre,dice_post,field_rmse,mse_pre,mse_post"
    );
    assert_eq!(
        fs::read_to_string(eval_dir.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    for suffix in ["warped", "diff", "field"] {
        for ext in ["raw", "hdr"] {
            assert!(eval_dir.join(format!("warped/pair_002_{suffix}.{ext}")).exists());
        }
    }
    let grids: Vec<_> = fs::read_dir(eval_dir.join("grids/pair_000")).unwrap().collect();
    assert_eq!(grids.len(), 8);

    let grid_dir = tmp.path().join("grids");
    let o = run(&[
        "dump-grid",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--pair",
        "1",
        "--out",
        grid_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = grid_dir.join("stage0_block0_pathA.csv");
    assert_eq!(header(&csv), "window_id,slot_id,head,x,y,z");
}

#[test]
fn bench_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = run(&["bench", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("complexity.csv")).unwrap();
    let expanded = csv.lines().find(|l| l.starts_with("full,expanded_window,")).unwrap();
    let cols: Vec<&str> = expanded.split(',').collect();
    assert_eq!(cols[14], "27.000000");
    assert!(stdout(&o).contains("dw_mca"));

    let o = run(&["bench", "--configs", "desk", "--instrument", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("complexity.csv")).unwrap();
    for mech in ["fixed_window", "dw_mca"] {
        let line = csv.lines().find(|l| l.starts_with(&format!("desk,{mech},"))).unwrap();
        assert!(line.ends_with(",true"), "{line}");
    }

    let o = run(&["bench", "--configs", "", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("complexity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

fn assert_single_line_error(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("{code}: ")), "{err}");
}

#[test]
fn errors_are_single_line_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_single_line_error(&run(&["train", "--set", "bogus=1", "--out", out]), "E_CONFIG");
    assert_single_line_error(&run(&["train", "--set", "patch_size=3", "--out", out]), "E_CONFIG");
    assert_single_line_error(&run(&["no-such-command"]), "E_USAGE");
    let missing = tmp.path().join("missing.dcax");
    assert_single_line_error(
        &run(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", out]),
        "E_IO",
    );
    let bad = tmp.path().join("bad.dcax");
    fs::write(&bad, b"DCAX\x02\x00\x00\x00").unwrap();
    assert_single_line_error(
        &run(&["eval", "--checkpoint", bad.to_str().unwrap(), "--out", out]),
        "E_FORMAT",
    );
    let data = tmp.path().join("nodata");
    assert_single_line_error(
        &run(&["train", "--set", &format!("data_dir={}", data.display()), "--out", out]),
        "E_IO",
    );
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("pass ")).count(), 3);
}
