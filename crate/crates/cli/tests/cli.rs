use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn personmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_personmae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
}

fn synth(dir: &Path, identities: &str, per: &str, seed: &str) -> Output {
    personmae(&[
        "synth",
        "--out",
        path(dir),
        "--identities",
        identities,
        "--per-identity",
        per,
        "--seed",
        seed,
    ])
}

fn write_config(dir: &Path, train_dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "model = tiny\ntrain_dir = {}\noutput_dir = {}\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 4\nmax_shift = 16\n{extra}",
        train_dir.display(),
        dir.join("run").display()
    );
    let config = dir.join("run.cfg");
    std::fs::write(&config, text).unwrap();
    config
}

#[test]
fn synth_count_determinism_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&synth(&a, "4", "3", "5")), 0);
    assert_eq!(code(&synth(&b, "4", "3", "5")), 0);
    let files = sorted_files(&a);
    assert_eq!(files.len(), 12);
    assert_eq!(files[0].file_name().unwrap(), "0000_c1_000.png");
    for (fa, fb) in files.iter().zip(sorted_files(&b)) {
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
    }
    assert_eq!(code(&synth(&tmp.path().join("c"), "0", "3", "5")), 2);

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(&synth(&blocker.join("sub"), "1", "1", "0")), 2);
}

#[test]
fn pretrain_logs_resume_guard_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, "4", "2", "1")), 0);
    let config = write_config(tmp.path(), &data, "");

    let out = personmae(&["pretrain", "--config", path(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    let log = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let ckpt = run.join("checkpoint_epoch0002.ckpt");
    assert!(ckpt.exists());

    // Resuming a finished run with more epochs appends to the same log.
    let longer = write_config(tmp.path(), &data, "").with_file_name("longer.cfg");
    std::fs::write(
        &longer,
        std::fs::read_to_string(&config)
            .unwrap()
            .replace("epochs = 2", "epochs = 3"),
    )
    .unwrap();
    let out = personmae(&[
        "pretrain",
        "--config",
        path(&longer),
        "--resume",
        path(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(run.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let wider = tmp.path().join("wider.cfg");
    std::fs::write(
        &wider,
        std::fs::read_to_string(&config).unwrap() + "embed_dim = 32\n",
    )
    .unwrap();
    assert_eq!(
        code(&personmae(&[
            "pretrain",
            "--config",
            path(&wider),
            "--resume",
            path(&ckpt)
        ])),
        2
    );

    let typo = tmp.path().join("typo.cfg");
    std::fs::write(
        &typo,
        std::fs::read_to_string(&config).unwrap() + "mask_ration = 0.5\n",
    )
    .unwrap();
    let out = personmae(&["pretrain", "--config", path(&typo)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask_ration"));

    assert_eq!(
        code(&personmae(&[
            "pretrain",
            "--config",
            path(&tmp.path().join("missing.cfg"))
        ])),
        2
    );
    assert_eq!(code(&personmae(&["pretrain"])), 2);

    let blowup = tmp.path().join("blowup.cfg");
    std::fs::write(
        &blowup,
        std::fs::read_to_string(&config).unwrap() + "base_lr = 1e300\n",
    )
    .unwrap();
    let out = personmae(&["pretrain", "--config", path(&blowup)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn eval_self_retrieval_prints_contract_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, "2", "2", "3")), 0);
    let config = write_config(tmp.path(), &data, "");
    std::fs::write(
        &config,
        std::fs::read_to_string(&config)
            .unwrap()
            .replace("epochs = 2", "epochs = 1"),
    )
    .unwrap();
    assert_eq!(
        code(&personmae(&["pretrain", "--config", path(&config)])),
        0
    );
    let ckpt = tmp.path().join("run").join("checkpoint_epoch0001.ckpt");

    // Gallery holds the query images under other camera ids.
    let (query, gallery) = (tmp.path().join("query"), tmp.path().join("gallery"));
    std::fs::create_dir_all(&query).unwrap();
    std::fs::create_dir_all(&gallery).unwrap();
    for (i, file) in sorted_files(&data).iter().enumerate() {
        let bytes = std::fs::read(file).unwrap();
        std::fs::write(query.join(format!("{:04}_c1_{i}.png", i)), &bytes).unwrap();
        std::fs::write(gallery.join(format!("{:04}_c2_{i}.png", i)), &bytes).unwrap();
    }
    let report_dir = tmp.path().join("report");
    let out = personmae(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--query",
        path(&query),
        "--gallery",
        path(&gallery),
        "--out",
        path(&report_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "mAP=1.000000 rank1=1.000000\n"
    );
    let kv = std::fs::read_to_string(report_dir.join("report.kv")).unwrap();
    assert!(kv.starts_with("mAP=1\nrank1=1\n"));
    let features = std::fs::read_to_string(report_dir.join("query_features.txt")).unwrap();
    assert!(features.starts_with("4 64\n0 1 "));

    let dump = tmp.path().join("dump");
    let image = sorted_files(&data).remove(0);
    let out = personmae(&[
        "inspect",
        "--config",
        path(&config),
        "--image",
        path(&image),
        "--out",
        path(&dump),
        "--checkpoint",
        path(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dump.join("reconstruction.png").exists());

    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = personmae(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--query",
        path(&empty),
        "--gallery",
        path(&gallery),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn inspect_dumps_regions_mask_and_coords() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, "1", "1", "0")), 0);
    let image = sorted_files(&data).remove(0);
    let config = tmp.path().join("inspect.cfg");
    std::fs::write(&config, "model = tiny\nmax_shift = 0\nmask_ratio = 0.75\n").unwrap();
    let out_dir = tmp.path().join("dump");
    let run = |out: &Path| {
        personmae(&[
            "inspect",
            "--config",
            path(&config),
            "--image",
            path(&image),
            "--seed",
            "3",
            "--out",
            path(out),
        ])
    };
    assert_eq!(code(&run(&out_dir)), 0);
    let read = |name: &str| std::fs::read(out_dir.join(name)).unwrap();
    assert_eq!(read("region_a.png"), read("region_b.png"));
    let mask = String::from_utf8(read("mask.txt")).unwrap();
    assert_eq!(mask.matches('#').count(), 96);
    assert_eq!(mask.lines().count(), 16);
    let coords = String::from_utf8(read("coords.txt")).unwrap();
    assert_eq!(coords.lines().count(), 128);
    assert_eq!(coords.lines().nth(9), Some("1 1"));

    let again = tmp.path().join("again");
    assert_eq!(code(&run(&again)), 0);
    for name in ["region_a.png", "mask.txt", "coords.txt", "shift.txt"] {
        assert_eq!(read(name), std::fs::read(again.join(name)).unwrap());
    }
    assert!(!out_dir.join("reconstruction.png").exists());

    let shifted = tmp.path().join("shifted.cfg");
    std::fs::write(&shifted, "model = tiny\nmax_shift = 64\n").unwrap();
    let sdir = tmp.path().join("shifted");
    let out = personmae(&[
        "inspect",
        "--config",
        path(&shifted),
        "--image",
        path(&image),
        "--seed",
        "11",
        "--out",
        path(&sdir),
    ]);
    assert_eq!(code(&out), 0);
    let shift = std::fs::read_to_string(sdir.join("shift.txt")).unwrap();
    let parts: Vec<f64> = shift
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    let first = std::fs::read_to_string(sdir.join("coords.txt")).unwrap();
    assert_eq!(
        first.lines().next().unwrap(),
        format!("{} {}", parts[1] / 16.0, parts[2] / 16.0)
    );
}
