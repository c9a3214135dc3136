//! End-to-end runs of the `fedmark` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use fedmark::io::{self, KeyFile};
use fedmark::nn::{Architecture, ParamKey, Role, Tensor};
use fedmark::watermark::{EmbedMode, ExtractionKey, Extractor, FeatureKey, RegLoss, SignatureBits, WatermarkKey};
use tempfile::TempDir;

const MINIMAL: &str = "\
seed = 3
clients = 2
rounds = 5
client.0.bits = 16
client.0.triggers = 5
";

fn fedmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmark"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_manifest(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, text: &str) -> PathBuf {
    let m = write_manifest(dir, "run.manifest", text);
    let o = fedmark(&["train", m.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("out")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_three_artifacts_quickly_and_deterministically() {
    let a = TempDir::new().unwrap();
    let start = Instant::now();
    let out = train(a.path(), MINIMAL);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let mut files: Vec<String> = walk(&out);
    files.sort();
    assert_eq!(files, ["keys/client_0.fwky", "model.fwck", "rounds.csv"]);

    let b = TempDir::new().unwrap();
    let again = train(b.path(), MINIMAL);
    for f in &files {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = fs::metadata(out.join("keys/client_0.fwky"))
            .unwrap()
            .permissions()
            .mode();
        assert_eq!(mode & 0o777, 0o600);
    }
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            out.extend(walk(&p).into_iter().map(|f| format!("{name}/{f}")));
        } else {
            out.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    out
}

#[test]
fn verification_accepts_the_owner_and_rejects_others() {
    let dir = TempDir::new().unwrap();
    let out = train(dir.path(), MINIMAL);
    let ck = out.join("model.fwck");
    let key = out.join("keys/client_0.fwky");

    let o = fedmark(&["verify", "--checkpoint", s(&ck), "--key", s(&key), "--mode", "white"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("eta 1.0000"), "{}", stdout(&o));
    assert_eq!(code(&fedmark(&["verify", "--checkpoint", s(&ck), "--key", s(&key)])), 0);

    // A key drawn under another seed reads at chance level.
    let other = TempDir::new().unwrap();
    let foreign = train(other.path(), &MINIMAL.replace("seed = 3", "seed = 4")).join("keys/client_0.fwky");
    let o = fedmark(&[
        "verify",
        "--checkpoint",
        s(&ck),
        "--key",
        s(&foreign),
        "--mode",
        "white",
    ]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));

    // Corrupted header.
    let mut bytes = fs::read(&ck).unwrap();
    bytes[1] = b'?';
    let bad = dir.path().join("bad.fwck");
    fs::write(&bad, bytes).unwrap();
    assert_eq!(
        code(&fedmark(&["verify", "--checkpoint", s(&bad), "--key", s(&key)])),
        2
    );

    // Keyfile for a different model.
    let cnn = Architecture::mini_cnn(1, 8, 8, 10).unwrap();
    let wrong = dir.path().join("cnn.fwky");
    io::write_keyfile(&wrong, &scale_key(&cnn, 0, vec![0, 1], vec![1, 1])).unwrap();
    assert_eq!(
        code(&fedmark(&["verify", "--checkpoint", s(&ck), "--key", s(&wrong)])),
        4
    );

    let o = fedmark(&["info", s(&ck)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("checkpoint: in=20;"));
}

#[test]
fn missing_watermark_spec_is_reported() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path(), "bad.manifest", "clients = 2\nclient.1.beta = 0.5\n");
    let o = fedmark(&["train", s(&m)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing watermark spec"));
    let m = write_manifest(dir.path(), "typo.manifest", "roundz = 2\n");
    let o = fedmark(&["train", s(&m)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("roundz"));
}

fn scale_key(arch: &Architecture, client: usize, coords: Vec<usize>, bits: Vec<i8>) -> KeyFile {
    let selector = vec![ParamKey::new(1, Role::Scale)];
    let feature = FeatureKey::new(
        SignatureBits::from_signs(bits).unwrap(),
        ExtractionKey::new(selector, Extractor::Coordinates(coords)).unwrap(),
        EmbedMode::ScaleNorm,
        RegLoss::Hinge,
        0.1,
    )
    .unwrap();
    KeyFile {
        arch: arch.clone(),
        key: WatermarkKey {
            client_id: client,
            seed: 0,
            feature: Some(feature),
            triggers: None,
        },
    }
}

#[test]
fn feasibility_verdicts() {
    let dir = TempDir::new().unwrap();
    let arch = Architecture::mlp(4, &[8, 8], 3).unwrap();
    let write = |name: &str, k: KeyFile| {
        let p = dir.path().join(name);
        io::write_keyfile(&p, &k).unwrap();
        p
    };
    let a = write("a.fwky", scale_key(&arch, 0, vec![0, 1, 2], vec![1, -1, 1]));
    let b = write("b.fwky", scale_key(&arch, 1, vec![3, 4], vec![-1, -1]));
    let clash = write("c.fwky", scale_key(&arch, 2, vec![1], vec![1]));

    let o = fedmark(&["feasibility", s(&a), s(&b)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("status: feasible"));
    let csv = dir.path().join("f.csv");
    let o = fedmark(&["feasibility", s(&a), s(&clash), "--csv", s(&csv)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("status: infeasible"));
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .contains(",infeasible,"));

    // One client with an orthonormal dense extractor.
    let e = Tensor::new(
        vec![8, 2],
        (0..16).map(|i| if i == 0 || i == 3 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let mut k = scale_key(&arch, 3, vec![0, 1], vec![1, -1]);
    k.key.feature.as_mut().unwrap().extraction.extractor = Extractor::Dense(e);
    let single = write("d.fwky", k);
    assert_eq!(code(&fedmark(&["feasibility", s(&single)])), 0);

    let mut k = scale_key(&arch, 4, vec![0], vec![1]);
    k.key.feature.as_mut().unwrap().extraction.selector = vec![ParamKey::new(4, Role::Scale)];
    let other_layer = write("e.fwky", k);
    assert_eq!(code(&fedmark(&["feasibility", s(&a), s(&other_layer)])), 2);
}

#[test]
fn attack_and_sweep_outputs() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{MINIMAL}attack.prune = 0.0\nattack.finetune =\nsweep.axis = sigma\nsweep.values = 0,0.1\nsweep.seeds = 2\n"
    );
    let out = train(dir.path(), &text);
    let m = dir.path().join("run.manifest");
    assert_eq!(code(&fedmark(&["attack", s(&m)])), 0);
    let csv = fs::read_to_string(out.join("attacks.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "prune");
    assert_eq!(row[2], row[3], "pruning nothing keeps accuracy");

    assert_eq!(code(&fedmark(&["sweep", s(&m)])), 0);
    let raw = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 2 * 2);

    let empty = TempDir::new().unwrap();
    let m = write_manifest(empty.path(), "run.manifest", MINIMAL);
    assert_eq!(code(&fedmark(&["attack", s(&m)])), 2);
}
