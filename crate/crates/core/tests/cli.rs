use std::path::Path;

use gesture_tokens::cli::main_with_args;

fn gtk(args: &[&str]) -> i32 {
    let tiny = ["--desk", "--set", "corpus.sequences=2", "--set", "corpus.frames=200", "--set", "stage1.epochs=1"];
    main_with_args(["gtk"].iter().chain(&tiny).chain(args).copied())
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn corpus_generation_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gtk(&["gen-corpus", "--out", &p(dir.path(), "c")]), 0);
    let manifest = std::fs::read_to_string(dir.path().join("c/manifest.toml")).unwrap();
    assert!(manifest.contains("sequences = 2"), "{manifest}");
    let files: Vec<_> = std::fs::read_dir(dir.path().join("c"))
        .unwrap()
        .flatten()
        .filter(|e| e.path().extension().is_some_and(|x| x == "gtkm"))
        .collect();
    assert_eq!(files.len(), 2);
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(main_with_args(["gtk", "--help"]), 0);
    assert_eq!(main_with_args(["gtk", "frobnicate"]), 1);
    assert_eq!(gtk(&["--set", "vae.quantizer.dept=2", "gen-corpus", "--out", &p(d, "x")]), 1);
    assert_eq!(gtk(&["inspect", "--vae", &p(d, "absent.gtkc"), "--out", &p(d, "i")]), 3);

    assert_eq!(gtk(&["gen-corpus", "--out", &p(d, "c")]), 0);
    assert_eq!(gtk(&["train", "1", "--corpus", &p(d, "c"), "--out", &p(d, "no/such/dir/vae.gtkc")]), 2);
    // 2 × 14 windows is too few for the feature autoencoder
    assert_eq!(gtk(&["train", "feat", "--corpus", &p(d, "c"), "--out", &p(d, "f.gtkc")]), 5);

    assert_eq!(gtk(&["train", "1", "--corpus", &p(d, "c"), "--out", &p(d, "vae.gtkc")]), 0);
    std::fs::write(d.join("junk.gtkc"), b"GTKC not really").unwrap();
    assert_eq!(gtk(&["inspect", "--vae", &p(d, "junk.gtkc"), "--out", &p(d, "i")]), 4);
    assert_eq!(gtk(&["train", "2", "--corpus", &p(d, "c"), "--vae", &p(d, "absent.gtkc"), "--out", &p(d, "pr.gtkc")]), 3);

    assert_eq!(gtk(&["inspect", "--vae", &p(d, "vae.gtkc"), "--out", &p(d, "i")]), 0);
    for f in ["snippets.gtkm", "padding.gtkm", "usage.tsv", "config.toml"] {
        assert!(d.join("i").join(f).exists(), "{f}");
    }
}
