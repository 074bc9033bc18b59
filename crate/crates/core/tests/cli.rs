use std::io::Write;
use std::process::{Command, Output, Stdio};

fn rgdesk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgdesk"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field(text: &str, key: &str) -> u64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap()
}

#[test]
fn count_params_presets() {
    let o = rgdesk(&["count-params", "--preset", "rg2b"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(field(&text, "embedding "), 655_360_000);
    let total = field(&text, "total ");
    assert!((total as f64 / 2.68e9 - 1.0).abs() < 0.15);

    let text = stdout(&rgdesk(&["count-params", "--preset", "rg9b"]));
    assert_eq!(field(&text, "embedding "), 1_048_576_000);
    assert!((field(&text, "total ") as f64 / 8.58e9 - 1.0).abs() < 0.15);
}

#[test]
fn exit_codes() {
    assert_eq!(rgdesk(&["count-params"]).status.code(), Some(2));
    assert_eq!(rgdesk(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        rgdesk(&["state-bytes", "--preset", "desk", "--tokens", "x"])
            .status
            .code(),
        Some(2)
    );
    let o = rgdesk(&["count-params", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(
        rgdesk(&["generate", "--ckpt", "/nonexistent", "--prompt", "a"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(rgdesk(&["--help"]).status.code(), Some(0));
}

#[test]
fn state_bytes_bounded_for_recurrent() {
    let at = |arch: &str, t: &str| {
        stdout(&rgdesk(&[
            "state-bytes",
            "--preset",
            "desk",
            "--arch",
            arch,
            "--tokens",
            t,
        ]))
        .trim()
        .parse::<u64>()
        .unwrap()
    };
    assert_eq!(at("recurrent", "100"), at("recurrent", "100000"));
    assert!(at("baseline", "100") < at("baseline", "100000"));
}

#[test]
fn chat_format_from_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_rgdesk"))
        .args(["chat-format", "--in", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"user:\tKnock knock.\nmodel:\tWho's there?\nuser:\tGemma.\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "<start_of_turn>user\nKnock knock.<end_of_turn>\n<start_of_turn>model\nWho's there?<end_of_turn>\n\
         <start_of_turn>user\nGemma.<end_of_turn>\n<start_of_turn>model\n"
    );
}

#[test]
fn train_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus.txt");
    let ckpt = dir.path().join("toy.rgck");
    std::fs::write(
        &data,
        "the quick brown fox jumps over the lazy dog. ".repeat(20),
    )
    .unwrap();
    let o = rgdesk(&[
        "train-toy",
        "--data",
        data.to_str().unwrap(),
        "--steps",
        "3",
        "--out",
        ckpt.to_str().unwrap(),
        "--seq-len",
        "16",
        "--batch",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("step "))
            .count(),
        3
    );

    let ck = ckpt.to_str().unwrap();
    let gen = |extra: &[&str]| {
        let mut args = vec!["generate", "--ckpt", ck, "--prompt", "the "];
        args.extend_from_slice(extra);
        rgdesk(&args)
    };
    let a = gen(&[
        "--max-new",
        "12",
        "--sampler",
        "temperature:1.0",
        "--seed",
        "4",
    ]);
    let b = gen(&[
        "--max-new",
        "12",
        "--sampler",
        "temperature:1.0",
        "--seed",
        "4",
    ]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(!a.stdout.is_empty());

    let empty = gen(&["--max-new", "0"]);
    assert_eq!(empty.status.code(), Some(0));
    assert!(empty.stdout.is_empty());
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    let csv = dir.path().join("out.csv");
    std::fs::write(
        &spec,
        "preset = desk\nprompt_len = 8\ngen_lens = 4, 16\nprompt_lens = 8\nbatch = 2\nrepeats = 3\nwarmup = 1\n",
    )
    .unwrap();
    let o = rgdesk(&[
        "bench",
        "--spec",
        spec.to_str().unwrap(),
        "--csv-out",
        csv.to_str().unwrap(),
        "--plot",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text, stdout(&o));
    // Header plus two archs × (two decode rows + one prompt row).
    assert_eq!(text.lines().count(), 7);
    assert!(std::fs::read_to_string(csv.with_extension("svg"))
        .unwrap()
        .starts_with("<svg"));

    std::fs::write(&spec, "repeats = 1\n").unwrap();
    let o = rgdesk(&[
        "bench",
        "--spec",
        spec.to_str().unwrap(),
        "--csv-out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
