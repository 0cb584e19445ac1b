use std::path::{Path, PathBuf};

use hfd::cli;
use hfd::imageio::{load_image, save_image};
use hfd::synth::synthetic_image;
use hfd_core::codec::Bitstream;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<String> = std::iter::once("hfd").chain(args.iter().copied()).map(String::from).collect();
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path, size: usize) -> PathBuf {
    let p = dir.join("in.png");
    save_image(&synthetic_image(size, size, 5), &p).unwrap();
    p
}

#[test]
fn compress_is_deterministic_and_stage_one_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), 96);
    let (a, b) = (dir.path().join("a.hfdc"), dir.path().join("b.hfdc"));
    let (code, out, _) = run(&["compress", s(&input), "-o", s(&a)]);
    assert_eq!(code, 0);
    assert!(out.contains("bpp"), "{out}");
    assert_eq!(run(&["compress", s(&input), "-o", s(&b)]).0, 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let recon = dir.path().join("r.png");
    assert_eq!(run(&["--no-refine", "decompress", s(&a), "-o", s(&recon)]).0, 0);
    let bs = Bitstream::from_bytes(&std::fs::read(&a).unwrap()).unwrap();
    let img = load_image(&recon).unwrap();
    assert_eq!((img.width(), img.height()), (bs.width as usize, bs.height as usize));
}

#[test]
fn side_channel_only_adds_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), 64);
    let (a, b) = (dir.path().join("a.hfdc"), dir.path().join("b.hfdc"));
    assert_eq!(run(&["compress", s(&input), "-o", s(&a)]).0, 0);
    assert_eq!(run(&["--hfd-plus", "compress", s(&input), "-o", s(&b)]).0, 0);
    let (pa, pb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (ba, bb) = (Bitstream::from_bytes(&pa).unwrap(), Bitstream::from_bytes(&pb).unwrap());
    assert!(ba.side.is_none() && bb.side.is_some());
    assert_eq!(ba.latents().unwrap(), bb.latents().unwrap());
    assert!(pb.len() > pa.len());
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture(dir.path(), 32);
    let bs = dir.path().join("a.hfdc");
    assert_eq!(run(&["compress", s(&input), "-o", s(&bs)]).0, 0);

    let (code, _, err) = run(&["decompress", s(&bs), "-o", s(&dir.path().join("x.png"))]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("checkpoint"), "{err}");

    assert_eq!(run(&["--steps", "0", "compress", s(&input), "-o", s(&bs)]).0, 1);
    assert_eq!(run(&["frobnicate"]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    assert_eq!(run(&["--config", s(&bad), "compress", s(&input), "-o", s(&bs)]).0, 1);

    let (code, _, _) = run(&["compress", s(&dir.path().join("missing.png")), "-o", s(&bs)]);
    assert_eq!(code, 2);

    let mut bytes = std::fs::read(&bs).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&bs, &bytes).unwrap();
    let (code, _, _) = run(&["--no-refine", "decompress", s(&bs), "-o", s(&dir.path().join("x.png"))]);
    assert_eq!(code, 2);
}

#[test]
fn sample_command_reports_gaussian_moments() {
    let (code, out, err) = run(&["--steps", "50", "sample", "--n", "4000", "--mean", "1", "--var", "0.25"]);
    assert_eq!(code, 0, "{err}");
    let field = |k: &str| -> f64 {
        let tok = out.split_whitespace().find_map(|t| t.strip_prefix(k)).unwrap();
        tok.parse().unwrap()
    };
    assert!((field("mean=") - 1.0).abs() < 0.05, "{out}");
    assert!((field("var=") - 0.25).abs() < 0.03, "{out}");
    assert_eq!(run(&["--method", "rectflow", "sample"]).0, 1);
}
