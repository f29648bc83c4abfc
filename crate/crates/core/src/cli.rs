//! Command-line front end. All commands run in single precision.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalkit::{diversity, reports_to_csv, EvalReport};
use crate::features::{make_synthetic_corpus, read_features, write_features, FeatureSequence};
use crate::rng::{Purpose, Stream};
use crate::schedule::{forward_marginal_sample, forward_step_sample, DiffusionSchedule};
use crate::tensor::Tensor;
use crate::trainer::{train_loop, Converter, Direction, RunOptions};

pub const CONFIG_ECHO: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";
pub const LOG_ENV: &str = "DGVC_LOG";

#[derive(Debug, Parser)]
#[command(name = "dgvc", version, about = "Diffusion-GAN voice conversion on feature sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the two-speaker corpus with its parallel test references.
    MakeCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train both directions; resumes from --checkpoint when given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides train.iterations.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Convert a feature file or every feature file in a directory.
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "x2y")]
        direction: Direction,
        #[arg(long, default_value_t = 1)]
        n_samples: usize,
    },
    /// MCD of converted files against references with the same name.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        converted: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Unconverted sources, reported as an extra row.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Label for the report rows.
        #[arg(long, default_value = "x2y")]
        direction: Direction,
    },
    /// Check the schedule invariants and its sampling oracles.
    DiffusionDiag {
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Lib(Error),
    DiagFailed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::DiagFailed(_) => "diagnostic",
            CliError::Lib(e) => match e {
                Error::Config(_) => "config",
                Error::Io { .. } => "io",
                Error::Checkpoint(_) => "checkpoint",
                Error::Format { .. } | Error::Decode(_) => "format",
                Error::Diverged { .. } => "diverged",
                Error::Adapter(_) => "adapter",
                Error::Corpus(_) | Error::Stats(_) => "data",
                Error::Shape(_) | Error::Spec(_) => "shape",
                Error::Schedule(_) | Error::StepOutOfRange { .. } | Error::Numerical(_) | Error::NonFinite(_) => "numeric",
                Error::Eval(_) => "eval",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "config" => 3,
            "io" => 4,
            "checkpoint" => 5,
            "format" => 6,
            "diverged" => 7,
            "numeric" => 8,
            "diagnostic" => 9,
            "adapter" => 10,
            "data" => 11,
            "shape" => 12,
            _ => 1,
        }
    }

    /// `error[class]: detail` on one line.
    pub fn line(&self) -> String {
        let detail = match self {
            CliError::Lib(e) => {
                let mut s = e.to_string();
                let mut src = std::error::Error::source(e);
                while let Some(inner) = src {
                    let m = inner.to_string();
                    if !s.contains(&m) {
                        let _ = write!(s, ": {m}");
                    }
                    src = inner.source();
                }
                s
            }
            CliError::DiagFailed(m) => m.clone(),
        };
        format!("error[{}]: {}", self.class(), detail.replace('\n', " "))
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.finish()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_toml())
}

/// Feature files directly under `dir`, sorted by name.
pub fn list_features(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "dgvc") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_all(dir: &Path) -> Result<Vec<FeatureSequence<f32>>> {
    let files = list_features(dir)?;
    if files.is_empty() {
        return Err(Error::Corpus(format!("no feature files in {}", dir.display())));
    }
    files.iter().map(|p| read_features(p)).collect()
}

/// Corpus layout below the corpus directory.
pub fn corpus_subdir(root: &Path, speaker: &str, split: &str) -> PathBuf {
    root.join(speaker).join(split)
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    speaker: &'static str,
    split: &'static str,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    seed: u64,
    /// The test files of the two speakers are parallel renditions, so each
    /// is the oracle conversion of the other.
    oracle: &'static str,
    files: Vec<ManifestEntry>,
}

pub fn cmd_make_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let corpus = make_synthetic_corpus::<f32>(&cfg.corpus, &mut Stream::new(cfg.seed, Purpose::Corpus))?;
    let mut files = Vec::new();
    let sets = [
        ("x", "train", &corpus.train_x),
        ("y", "train", &corpus.train_y),
        ("x", "test", &corpus.test_x),
        ("y", "test", &corpus.test_y),
    ];
    for (speaker, split, seqs) in sets {
        let dir = corpus_subdir(out, speaker, split);
        create_dir(&dir)?;
        for (i, seq) in seqs.iter().enumerate() {
            let rel = format!("{speaker}/{split}/{i:03}.dgvc");
            let path = out.join(&rel);
            write_features(seq, &path)?;
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            files.push(ManifestEntry { path: rel, speaker, split, sha256: hex::encode(Sha256::digest(&bytes)) });
        }
    }
    let manifest = Manifest { seed: cfg.seed, oracle: "x/test/NNN.dgvc <-> y/test/NNN.dgvc", files };
    write_text(&out.join(MANIFEST), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    echo_config(out, cfg)?;
    log::info!("wrote {} feature files to {}", manifest.files.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let root = &cfg.paths.corpus_dir;
    let xs = read_all(&corpus_subdir(root, "x", "train"))?;
    let ys = read_all(&corpus_subdir(root, "y", "train"))?;
    echo_config(out, cfg)?;
    if let Some(path) = resume {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
        }
    }
    let opts = RunOptions { out_dir: Some(out.to_path_buf()), resume: resume.map(Path::to_path_buf) };
    let outcome = train_loop(&cfg.train, &cfg.schedule, &cfg.model_spec(), &xs, &ys, &opts)?;
    log::info!("trained to step {} in {:.1}s", outcome.state.step, outcome.seconds);
    Ok(outcome.final_checkpoint.expect("out_dir was set"))
}

fn output_name(input: &Path, sample: usize, n_samples: usize) -> String {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    if n_samples == 1 {
        format!("{stem}.dgvc")
    } else {
        format!("{stem}.s{sample}.dgvc")
    }
}

pub fn cmd_convert(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    input: &Path,
    direction: Direction,
    n_samples: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if n_samples == 0 {
        return Err(Error::Config("--n-samples must be at least 1".into()));
    }
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", checkpoint.display())));
    }
    let conv = Converter::<f32>::load(checkpoint, direction, &cfg.schedule)?;
    let inputs = if input.is_dir() { list_features(input)? } else { vec![input.to_path_buf()] };
    echo_config(out, cfg)?;
    let mut rng = Stream::new(cfg.seed, Purpose::Convert);
    let mut written = Vec::new();
    for path in &inputs {
        let seq = read_features::<f32>(path)?;
        for (k, o) in conv.convert(&seq, n_samples, &mut rng)?.iter().enumerate() {
            let dst = out.join(output_name(path, k, n_samples));
            write_features(o, &dst)?;
            written.push(dst);
        }
    }
    Ok(written)
}

/// Converted files for `stem`: `stem.dgvc` or `stem.s<k>.dgvc` in sample order.
fn converted_group(dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let single = dir.join(format!("{stem}.dgvc"));
    if single.exists() {
        return Ok(vec![single]);
    }
    let group: Vec<PathBuf> = (0..).map(|k| dir.join(format!("{stem}.s{k}.dgvc"))).take_while(|p| p.exists()).collect();
    if group.is_empty() {
        return Err(Error::Eval(format!("no conversion of {stem} in {}", dir.display())));
    }
    Ok(group)
}

pub fn cmd_evaluate(
    converted: &Path,
    reference: &Path,
    source: Option<&Path>,
    direction: Direction,
    out: &Path,
) -> Result<Vec<EvalReport>> {
    let refs_paths = list_features(reference)?;
    if refs_paths.is_empty() {
        return Err(Error::Eval(format!("no reference files in {}", reference.display())));
    }
    let (mut refs, mut convs, mut srcs, mut divs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rp in &refs_paths {
        let stem = rp.file_stem().expect("listed file").to_string_lossy().into_owned();
        refs.push(read_features::<f32>(rp)?);
        let group = converted_group(converted, &stem)?
            .iter()
            .map(|p| read_features::<f32>(p))
            .collect::<Result<Vec<_>>>()?;
        if group.len() > 1 {
            divs.push(diversity(&group)?);
        }
        convs.push(group.into_iter().next().expect("non-empty group"));
        if let Some(dir) = source {
            srcs.push(read_features::<f32>(&dir.join(format!("{stem}.dgvc")))?);
        }
    }
    let div = (!divs.is_empty()).then(|| divs.iter().sum::<f64>() / divs.len() as f64);
    let mut reports = vec![EvalReport::new("dgvc", direction.as_str(), &refs, &convs, div)?];
    if source.is_some() {
        reports.push(EvalReport::new("source", direction.as_str(), &refs, &srcs, None)?);
    }
    create_dir(out)?;
    let text: String = reports.iter().map(|r| r.to_text() + "\n").collect();
    write_text(&out.join("eval.txt"), &text)?;
    write_text(&out.join("eval.csv"), &reports_to_csv(&reports))?;
    write_text(&out.join("eval.json"), &serde_json::to_string_pretty(&reports).expect("reports serialize"))?;
    print!("{text}");
    Ok(reports)
}

/// One line of the diffusion diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct DiagCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: String) -> DiagCheck {
    DiagCheck { name: name.into(), pass, detail }
}

/// Posterior moments of `x_{t-1}` given scalar `x0` and `xt`, by direct
/// numerical integration of prior times likelihood on a grid.
fn grid_posterior(sched: &DiffusionSchedule, t: usize, x0: f64, xt: f64) -> (f64, f64) {
    let (ab, a, b) = (sched.alpha_bar(t - 1), sched.alpha(t), sched.beta(t));
    let (pm, pv) = (ab.sqrt() * x0, 1.0 - ab);
    let sd = pv.sqrt().min(b.sqrt() / a.sqrt());
    let (lo, hi, n) = (pm.min(xt) - 12.0 * sd - 12.0 * pv.sqrt(), pm.max(xt) + 12.0 * pv.sqrt() + 12.0 * sd, 400_000);
    let h = (hi - lo) / n as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = (-(x - pm).powi(2) / (2.0 * pv) - (xt - a.sqrt() * x).powi(2) / (2.0 * b)).exp();
        z += w;
        m1 += w * x;
        m2 += w * x * x;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

/// Schedule invariants, marginal equivalence over 10^5 draws and the
/// grid-Bayes posterior check.
pub fn diffusion_diag(sched: &DiffusionSchedule, seed: u64) -> Result<Vec<DiagCheck>> {
    let mut out = Vec::new();
    let ab = sched.alpha_bars();
    let monotone = ab.windows(2).all(|w| w[1] < w[0]) && ab.iter().all(|&v| v > 0.0 && v < 1.0);
    out.push(check("alpha_bar_monotone", monotone, format!("{ab:?}")));
    let term = sched.one_minus_alpha_bar(sched.steps());
    out.push(check("terminal_noise", term >= crate::schedule::TERMINAL_NOISE_MIN, format!("1 - alpha_bar_T = {term:.6}")));

    let n = 100_000;
    let x0v = 1.5;
    let x0 = Tensor::<f64>::full(&[n], x0v);
    let mut rng = Stream::new(seed, Purpose::Noise);
    let mut x = x0.clone();
    for t in 1..=sched.steps() {
        x = forward_step_sample(&x, t, sched, &mut rng)?;
        let closed = forward_marginal_sample(&x0, t, sched, &mut rng)?;
        let (mean, var) = (sched.alpha_bar(t).sqrt() * x0v, sched.one_minus_alpha_bar(t));
        for (label, sample) in [("iterated", &x), ("closed_form", &closed)] {
            let m = sample.data().iter().sum::<f64>() / n as f64;
            let v = sample.data().iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let (se_m, se_v) = ((var / n as f64).sqrt(), var * (2.0 / (n - 1) as f64).sqrt());
            let pass = (m - mean).abs() <= 3.0 * se_m && (v - var).abs() <= 3.0 * se_v;
            out.push(check(
                format!("marginal_{label}_t{t}"),
                pass,
                format!("mean {m:.5} vs {mean:.5}, var {v:.5} vs {var:.5}"),
            ));
        }
    }

    for t in 1..=sched.steps() {
        let (c0, ct, var) = sched.posterior_coefs(t)?;
        let mut worst: f64 = 0.0;
        if t == 1 {
            worst = (c0 - 1.0).abs().max(ct.abs()).max(var.abs());
        } else {
            for &(x0, xt) in &[(0.7, -0.4), (-1.2, 0.9), (2.0, 2.5)] {
                let (gm, gv) = grid_posterior(sched, t, x0, xt);
                worst = worst.max((c0 * x0 + ct * xt - gm).abs()).max((var - gv).abs());
            }
        }
        out.push(check(format!("posterior_t{t}"), worst <= 1e-3, format!("max abs error {worst:.2e}")));
    }
    Ok(out)
}

pub fn cmd_diffusion_diag(cfg: &ExperimentConfig, out: Option<&Path>) -> std::result::Result<Vec<DiagCheck>, CliError> {
    let sched = cfg.schedule.build()?;
    let checks = diffusion_diag(&sched, cfg.seed)?;
    let mut text = String::new();
    for c in &checks {
        let _ = writeln!(text, "{} {} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    print!("{text}");
    if let Some(dir) = out {
        echo_config(dir, cfg)?;
        write_text(&dir.join("diffusion_diag.txt"), &text)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::DiagFailed(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(checks)
}

/// Parses arguments and runs one command.
pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::MakeCorpus { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.paths.corpus_dir.clone());
            cmd_make_corpus(&cfg, &out)?;
        }
        Command::Train { common, checkpoint, iterations } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let out = common.out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let path = cmd_train(&cfg, &out, checkpoint.as_deref())?;
            println!("{}", path.display());
        }
        Command::Convert { common, checkpoint, input, direction, n_samples } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.paths.out_dir.join("converted").join(direction.as_str()));
            for p in cmd_convert(&cfg, &checkpoint, &input, direction, n_samples, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { common, converted, reference, source, direction } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.paths.out_dir.join("eval").join(direction.as_str()));
            cmd_evaluate(&converted, &reference, source.as_deref(), direction, &out)?;
            echo_config(&out, &cfg)?;
        }
        Command::DiffusionDiag { common } => {
            let cfg = load_config(&common)?;
            cmd_diffusion_diag(&cfg, common.out.as_deref())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_passes_diag() {
        let sched = DiffusionSchedule::linear(4, 0.1, 0.95).unwrap();
        let checks = diffusion_diag(&sched, 0).unwrap();
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    }

    #[test]
    fn error_lines_and_codes() {
        let e = CliError::Lib(Error::Config("unknown field `sed`".into()));
        assert_eq!(e.exit_code(), 3);
        assert!(e.line().starts_with("error[config]: "));
        assert_ne!(CliError::Lib(Error::Checkpoint("x".into())).exit_code(), e.exit_code());
    }

    #[test]
    fn help_lists_every_flag() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        let mut help = String::new();
        for sub in cmd.get_subcommands_mut() {
            help.push_str(&sub.render_long_help().to_string());
        }
        for flag in ["--config", "--seed", "--out", "--checkpoint", "--direction", "--n-samples", "--iterations"] {
            assert!(help.contains(flag), "{flag}");
        }
    }
}
