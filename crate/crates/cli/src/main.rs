//! `fedmark` command-line driver.
//!
//! Exit codes: 0 success or verified, 1 verification failed or signatures
//! infeasible, 2 input, manifest or file-format error, 3 internal error,
//! 4 keyfile does not match the model.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedmark::attacks::{run_attack_suite, write_attack_csv};
use fedmark::experiment::run_scenario;
use fedmark::feasibility::{decide, report_csv_row, stack, Status, DEFAULT_MAX_ITERS, FEASIBILITY_CSV_HEADER};
use fedmark::federation::write_rounds_csv;
use fedmark::io::{self, Checkpoint, KeyFile};
use fedmark::manifest::load_manifest;
use fedmark::metrics::{run_sweep, write_raw_csv, write_summary_csv, Metric};
use fedmark::nn::Network;
use fedmark::watermark::{
    default_eps_h, verify_aggregated, verify_black, verify_white, VerificationResult, DEFAULT_EPS_Y,
};
use fedmark::Error;

const CHECKPOINT_NAME: &str = "model.fwck";
const KEY_DIR: &str = "keys";

#[derive(Parser)]
#[command(
    name = "fedmark",
    version,
    about = "Federated learning with per-client ownership signatures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federated model; writes the checkpoint, one keyfile per
    /// embedding client and the per-round CSV into the manifest's output.
    Train { manifest: PathBuf },
    /// Verify a checkpoint against one client's keyfile.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Both)]
        mode: Mode,
        /// Hamming tolerance; defaults to ceil(0.05 N).
        #[arg(long)]
        eps_h: Option<usize>,
        /// Trigger error tolerance.
        #[arg(long, default_value_t = DEFAULT_EPS_Y)]
        eps_y: f64,
    },
    /// Check whether the feature signatures in the keyfiles can coexist.
    Feasibility {
        #[arg(required = true)]
        keys: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
        max_iters: usize,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Prune and fine-tune a trained model and re-verify every key.
    Attack {
        manifest: PathBuf,
        /// Defaults to the checkpoint in the manifest's output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the manifest's sweep over its seeds; writes raw and summary CSVs.
    Sweep { manifest: PathBuf },
    /// Describe a checkpoint, keyfile, trigger set or dataset file.
    Info { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    White,
    Black,
    Both,
}

enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Key(_) => 4,
        Error::State(_) => 3,
        _ => 2,
    }
}

fn run(cmd: Command) -> fedmark::Result<Outcome> {
    match cmd {
        Command::Train { manifest } => train(&manifest),
        Command::Verify {
            checkpoint,
            key,
            mode,
            eps_h,
            eps_y,
        } => verify(&checkpoint, &key, mode, eps_h, eps_y),
        Command::Feasibility { keys, max_iters, csv } => feasibility(&keys, max_iters, csv.as_deref()),
        Command::Attack { manifest, checkpoint } => attack(&manifest, checkpoint),
        Command::Sweep { manifest } => sweep(&manifest),
        Command::Info { file } => info(&file),
    }
}

fn key_path(dir: &Path, client: usize) -> PathBuf {
    dir.join(KEY_DIR).join(format!("client_{client}.fwky"))
}

fn train(manifest: &Path) -> fedmark::Result<Outcome> {
    let m = load_manifest(manifest)?;
    let out = run_scenario(&m.scenario)?;
    fs::create_dir_all(m.output.join(KEY_DIR))?;
    io::write_checkpoint(
        &m.output.join(CHECKPOINT_NAME),
        &Checkpoint {
            arch: out.arch.clone(),
            seed: m.scenario.fed.seed,
            params: out.params.clone(),
        },
    )?;
    for key in &out.keys {
        io::write_keyfile(
            &key_path(&m.output, key.client_id),
            &KeyFile {
                arch: out.arch.clone(),
                key: key.clone(),
            },
        )?;
    }
    let mut csv = BufWriter::new(File::create(m.output.join("rounds.csv"))?);
    write_rounds_csv(&out.logs, &mut csv)?;
    println!("test accuracy {:.4}", out.test_accuracy());
    let net = out.network();
    let result = verify_aggregated(&net, &out.keys, None, DEFAULT_EPS_Y)?;
    for c in &result.components {
        print_result(c);
    }
    println!(
        "wrote {} and {} keyfiles to {}",
        CHECKPOINT_NAME,
        out.keys.len(),
        m.output.display()
    );
    Ok(Outcome::Ok)
}

fn print_result(r: &VerificationResult) {
    let who = r.client_id.map(|c| format!("client {c} ")).unwrap_or_default();
    let detail = match (r.hamming, r.bits, r.trigger_error) {
        (Some(h), Some(n), _) => format!("hamming {h}/{n}"),
        (_, _, Some(e)) => format!("trigger error {e:.4}"),
        _ => String::new(),
    };
    let verdict = if r.verdict { "PASS" } else { "FAIL" };
    println!("{who}{} eta {:.4} {detail} {verdict}", r.mode.name(), r.eta);
}

fn verify(checkpoint: &Path, key: &Path, mode: Mode, eps_h: Option<usize>, eps_y: f64) -> fedmark::Result<Outcome> {
    let ck = io::read_checkpoint(checkpoint)?;
    let kf = io::read_keyfile(key)?;
    if kf.arch != ck.arch {
        return Err(Error::Key(format!(
            "keyfile is for architecture {} but the checkpoint is {}",
            kf.arch.descriptor(),
            ck.arch.descriptor()
        )));
    }
    let net = Network::with_params(ck.arch, ck.params)?;
    let missing = |part: &str| Error::Input(format!("keyfile for client {} has no {part}", kf.key.client_id));
    let result = match mode {
        Mode::White => {
            let f = kf.key.feature.as_ref().ok_or_else(|| missing("feature signature"))?;
            verify_white(net.params(), f, eps_h.unwrap_or_else(|| default_eps_h(f.n_bits())))?
        }
        Mode::Black => verify_black(
            &net,
            kf.key.triggers.as_ref().ok_or_else(|| missing("trigger set"))?,
            eps_y,
        )?,
        Mode::Both => {
            let r = verify_aggregated(&net, std::slice::from_ref(&kf.key), eps_h, eps_y)?;
            for c in &r.components {
                print_result(c);
            }
            r
        }
    };
    let mut result = result;
    result.client_id = Some(kf.key.client_id);
    print_result(&result);
    Ok(if result.verdict { Outcome::Ok } else { Outcome::Failed })
}

fn feasibility(paths: &[PathBuf], max_iters: usize, csv: Option<&Path>) -> fedmark::Result<Outcome> {
    let files = paths
        .iter()
        .map(|p| io::read_keyfile(p))
        .collect::<fedmark::Result<Vec<_>>>()?;
    let arch = files[0].arch.clone();
    if files.iter().any(|f| f.arch != arch) {
        return Err(Error::Input(
            "keyfiles were generated for different architectures".into(),
        ));
    }
    let keys: Vec<_> = files.into_iter().map(|f| f.key).collect();
    let se = stack(&keys, &arch).map_err(|e| match e {
        Error::Key(msg) => Error::Input(msg),
        e => e,
    })?;
    let r = decide(&se, max_iters);
    let signers = keys.iter().filter(|k| k.feature.is_some()).count();
    println!("U: {} x {} ({signers} signatures)", se.rows(), se.cols());
    println!("condition rank(U) = KN: {}", r.conditions.rank);
    println!("condition positive row: {}", r.conditions.positive_row);
    println!("condition positive Gram: {}", r.conditions.gram_positive);
    println!("status: {}", r.status.name());
    match &r.status {
        Status::Feasible { w } => println!(
            "certificate: w with relative margin {:.3e} (|w| = {:.3e}, {} perceptron updates)",
            r.margin.unwrap_or(0.0),
            w.norm(),
            r.perceptron_updates
        ),
        Status::Infeasible { y } => println!(
            "certificate: y on the simplex with support {} and |U~y| = {:.3e}",
            y.iter().filter(|v| **v > 0.0).count(),
            r.hull_distance
        ),
        Status::Unknown => println!("no certificate after {max_iters} iterations"),
    }
    if let Some(path) = csv {
        fs::write(path, format!("{FEASIBILITY_CSV_HEADER}\n{}\n", report_csv_row(&r)))?;
    }
    Ok(match r.status {
        Status::Infeasible { .. } => Outcome::Failed,
        _ => Outcome::Ok,
    })
}

fn attack(manifest: &Path, checkpoint: Option<PathBuf>) -> fedmark::Result<Outcome> {
    let m = load_manifest(manifest)?;
    let path = checkpoint.unwrap_or_else(|| m.output.join(CHECKPOINT_NAME));
    if !path.exists() {
        return Err(Error::Input(format!(
            "checkpoint {} not found; run train first",
            path.display()
        )));
    }
    let ck = io::read_checkpoint(&path)?;
    let mut keys = Vec::new();
    for id in 0..m.scenario.fed.clients {
        let p = key_path(&m.output, id);
        if p.exists() {
            let kf = io::read_keyfile(&p)?;
            if kf.arch != ck.arch {
                return Err(Error::Key(format!(
                    "{} does not match the checkpoint architecture",
                    p.display()
                )));
            }
            keys.push(kf.key);
        }
    }
    let (train, test) = m.scenario.datasets()?;
    let reports = run_attack_suite(&ck.arch, &ck.params, &keys, &train, &test, &m.attack)?;
    fs::create_dir_all(&m.output)?;
    let mut csv = BufWriter::new(File::create(m.output.join("attacks.csv"))?);
    write_attack_csv(&reports, &mut csv)?;
    for r in &reports {
        println!(
            "{} {}: accuracy {:.4} -> {:.4}",
            r.attack.name(),
            r.attack.param(),
            r.before.accuracy,
            r.after.accuracy
        );
    }
    Ok(Outcome::Ok)
}

fn sweep(manifest: &Path) -> fedmark::Result<Outcome> {
    let m = load_manifest(manifest)?;
    let (spec, settings) = m.sweep_spec()?;
    let result = run_sweep(&spec, settings.axis, &settings.values)?;
    fs::create_dir_all(&m.output)?;
    write_raw_csv(&result.rows, File::create(m.output.join("sweep.csv"))?)?;
    let summaries: Vec<_> = Metric::ALL
        .into_iter()
        .map(|metric| result.summary(metric))
        .filter(|s| !s.points.is_empty())
        .collect();
    write_summary_csv(&summaries, File::create(m.output.join("sweep_summary.csv"))?)?;
    if let Some(c) = result.capacity {
        println!("scale-norm capacity {c} bits");
    }
    for s in &summaries {
        for p in &s.points {
            println!(
                "{} {} {}: {:.4} +- {:.4} (n={})",
                s.axis.name(),
                p.value,
                s.metric.name(),
                p.mean,
                p.std,
                p.n
            );
        }
    }
    Ok(Outcome::Ok)
}

fn info(path: &Path) -> fedmark::Result<Outcome> {
    let bytes = fs::read(path)?;
    let magic = bytes.get(..4).unwrap_or_default();
    if magic == io::CHECKPOINT_MAGIC {
        let c = io::decode_checkpoint(&bytes)?;
        println!("checkpoint: {}", c.arch.descriptor());
        println!(
            "seed {}, {} tensors, {} values",
            c.seed,
            c.params.len(),
            c.params.numel()
        );
    } else if magic == io::KEYFILE_MAGIC {
        let k = io::decode_keyfile(&bytes)?;
        println!("keyfile: client {} for {}", k.key.client_id, k.arch.descriptor());
        if let Some(f) = &k.key.feature {
            println!(
                "signature: {} bits, {} mode, {} loss, margin {}",
                f.n_bits(),
                f.mode.name(),
                f.loss.name(),
                f.margin
            );
        }
        if let Some(t) = &k.key.triggers {
            println!("trigger set: {} samples, provenance {:?}", t.len(), t.provenance());
        }
    } else if magic == io::TRIGGER_MAGIC {
        let t = io::decode_trigger_file(&bytes)?;
        println!("trigger set: {} samples, provenance {:?}", t.len(), t.provenance());
    } else if magic == io::DATASET_MAGIC {
        let d = io::decode_dataset(&bytes)?;
        println!(
            "dataset: {} samples of shape {:?}, {} classes",
            d.len(),
            d.sample_shape(),
            d.classes()
        );
    } else {
        return Err(Error::Format(format!("{} is not a fedmark file", path.display())));
    }
    Ok(Outcome::Ok)
}
