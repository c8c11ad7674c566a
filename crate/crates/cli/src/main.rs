use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use advbin::codespace::{embed_f32_into, load_codes, normalization_factor, sample_codes, save_codes, CodePrior, LambdaMode};
use advbin::config::ExperimentConfig;
use advbin::dataset::{generate_synthetic, load_features, save_features, split_query_gallery};
use advbin::error::{Error, Result};
use advbin::matrix::Matrix;
use advbin::nn::{load_model, save_model};
use advbin::retrieval::{benchmark, build_index, evaluate_codes, evaluate_features, write_metrics_csv, RealIndex};
use advbin::trainer::{encode_dataset, extract_features, pretrain, train_joint_with};
use clap::{Parser, Subcommand};

/// Adversarially regularized binary codes: synthesize data, train, encode, evaluate and benchmark.
#[derive(Parser, Debug)]
#[command(name = "advbin", version)]
struct Cli {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis, splitting, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Code length m.
    #[arg(long, global = true)]
    bits: Option<usize>,
    /// Normalization factor for the code prior.
    #[arg(long, global = true, value_parser = ["norm-matching", "paper-literal"])]
    lambda_mode: Option<String>,
    /// Skip l2 normalization of extractor outputs.
    #[arg(long, global = true)]
    no_l2norm: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic identity/view dataset (dataset.abcf).
    Synth,
    /// Cross-entropy pretraining of a fresh extractor (extractor.abcm, pretrain_report.csv).
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Joint triplet + adversarial training (extractor.abcm, critic.abcm, train_report.csv).
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Starting extractor, e.g. the pretraining output; a fresh one otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Starting critic, e.g. a checkpoint; a fresh one otherwise.
        #[arg(long)]
        critic: Option<PathBuf>,
    },
    /// Binarize extractor outputs for every record (codes.abcb).
    Encode {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Cross-view CMC/mAP of codes (eval_cmc.csv, eval_metrics.csv).
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        /// Also score real-valued extractor outputs and report the rank-1 drop.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Binary vs float32 linear-scan timing and memory (bench_report.csv).
    Bench {
        /// Gallery codes; random prior samples of `bench_bits` otherwise.
        #[arg(long)]
        codes: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Encode { .. } => "encode",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => at(p, ExperimentConfig::load(p))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(bits) = cli.bits {
        cfg.set_code_length(bits);
    }
    if let Some(mode) = &cli.lambda_mode {
        cfg.train.lambda_mode = mode.parse::<LambdaMode>()?;
    }
    if cli.no_l2norm {
        cfg.train.l2_normalize_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Manifest {
    path: PathBuf,
    header: Vec<(String, String)>,
    config: String,
}

impl Manifest {
    fn new(out: &Path, command: &str, cfg: &ExperimentConfig) -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let argv: Vec<String> = std::env::args().collect();
        let header = vec![
            ("tool".into(), format!("advbin {}", env!("CARGO_PKG_VERSION"))),
            ("command".into(), command.into()),
            ("argv".into(), argv.join(" ")),
            ("seed".into(), cfg.seed.to_string()),
            ("started_unix".into(), now.to_string()),
        ];
        Self { path: out.join("manifest.txt"), header, config: cfg.to_text() }
    }

    fn add(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    /// Header lines are comments, so the manifest itself loads as a config file.
    fn write(&self) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.header {
            text.push_str(&format!("# {k}: {v}\n"));
        }
        text.push_str(&self.config);
        write_atomic(&self.path, text.as_bytes())
    }
}

/// Names the offending path in I/O failures.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_csv(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    let mut manifest = Manifest::new(out, cli.command.name(), &cfg);
    let planned: &[&str] = match &cli.command {
        Command::Synth => &["dataset.abcf"],
        Command::Pretrain { .. } => &["extractor.abcm", "pretrain_report.csv"],
        Command::Train { .. } => &["extractor.abcm", "critic.abcm", "train_report.csv"],
        Command::Encode { .. } => &["codes.abcb"],
        Command::Eval { .. } => &["eval_cmc.csv", "eval_metrics.csv"],
        Command::Bench { .. } => &["bench_report.csv"],
    };
    for a in planned {
        manifest.add("artifact", out.join(a).display());
    }
    for (name, input) in inputs(&cli.command) {
        manifest.add(&format!("input.{name}"), input.display());
    }
    manifest.write()?;

    let t = &cfg.train;
    match &cli.command {
        Command::Synth => {
            let ds = generate_synthetic(&cfg.synth)?;
            save_features(out.join("dataset.abcf"), &ds)?;
        }
        Command::Pretrain { dataset } => {
            let ds = at(dataset, load_features(dataset))?;
            let ext = t.new_extractor(ds.dim())?;
            let (ext, report) = pretrain(&ext, &ds, t)?;
            save_model(out.join("extractor.abcm"), &ext)?;
            write_csv(&out.join("pretrain_report.csv"), |w| report.write_csv(w))?;
        }
        Command::Train { dataset, model, critic } => {
            let ds = at(dataset, load_features(dataset))?;
            let ext = match model {
                Some(p) => at(p, load_model(p))?,
                None => t.new_extractor(ds.dim())?,
            };
            let critic = match critic {
                Some(p) => at(p, load_model(p))?,
                None => t.new_critic()?,
            };
            let ckpt_dir = out.join("checkpoints");
            let (ext, critic, report) = train_joint_with(&ext, &critic, &ds, t, &mut |it, e, c| {
                fs::create_dir_all(&ckpt_dir)?;
                save_model(ckpt_dir.join(format!("extractor_{it:06}.abcm")), e)?;
                save_model(ckpt_dir.join(format!("critic_{it:06}.abcm")), c)
            })?;
            save_model(out.join("extractor.abcm"), &ext)?;
            save_model(out.join("critic.abcm"), &critic)?;
            write_csv(&out.join("train_report.csv"), |w| report.write_csv(w))?;
            manifest.add("critic_updates", report.critic_updates);
            manifest.add("gan_generator_updates", report.gan_generator_updates);
            manifest.add("bit_mean", report.bit_balance.mean);
        }
        Command::Encode { dataset, model } => {
            let ds = at(dataset, load_features(dataset))?;
            let ext = at(model, load_model(model))?;
            let lambda = t.lambda_for(ext.spec.output_dim())?;
            let (codes, _) = encode_dataset(&ext, &ds, lambda)?;
            save_codes(out.join("codes.abcb"), &codes)?;
        }
        Command::Eval { dataset, codes, model } => {
            let ds = at(dataset, load_features(dataset))?;
            let codes = at(codes, load_codes(codes))?;
            let labels = ds.labels();
            let split = split_query_gallery(&ds, &cfg.split, cfg.seed)?;
            let report = evaluate_codes(&codes, &labels, &split, cfg.eval.cmc_depth)?;
            let mut rows = report.metric_rows("");
            if let Some(model) = model {
                let ext = at(model, load_model(model))?;
                let z = extract_features(&ext, &ds)?;
                let real = evaluate_features(&z, &labels, &split, cfg.eval.cmc_depth)?;
                rows.extend(real.metric_rows("real_"));
                rows.push(("rank1_drop".into(), real.rank1() - report.rank1()));
            }
            write_csv(&out.join("eval_cmc.csv"), |w| report.write_cmc_csv(w))?;
            write_csv(&out.join("eval_metrics.csv"), |w| write_metrics_csv(w, &rows))?;
        }
        Command::Bench { codes } => {
            let b = &cfg.bench;
            let (gallery, bits) = match codes {
                Some(p) => {
                    let g = at(p, load_codes(p))?;
                    let bits = g.bits();
                    (g, bits)
                }
                None => {
                    let bits = if b.bits == 0 { t.code_length } else { b.bits };
                    let prior = CodePrior::balanced(bits, t.lambda_mode)?;
                    (sample_codes(&prior, b.gallery_size, cfg.seed)?, bits)
                }
            };
            let prior = CodePrior::balanced(bits, t.lambda_mode)?;
            let lambda = normalization_factor(&prior)?;
            let queries = sample_codes(&prior, b.queries, cfg.seed.wrapping_add(1))?;
            let labels = vec![advbin::Label { identity: 0, view: 0 }; gallery.len()];
            let real = if b.real_baseline {
                let mut data = vec![0f32; gallery.len() * bits];
                for (i, row) in data.chunks_exact_mut(bits).enumerate() {
                    embed_f32_into(gallery.row(i), lambda, row);
                }
                let mut q = Matrix::zeros(queries.len(), bits);
                for i in 0..queries.len() {
                    for (j, v) in q.row_mut(i).iter_mut().enumerate() {
                        *v = if queries.get(i).get(j) { 1.0 / lambda } else { 0.0 };
                    }
                }
                Some((RealIndex::from_f32(bits, data, labels.clone())?, q))
            } else {
                None
            };
            let index = build_index(gallery, labels)?;
            let report = benchmark(&index, &queries, real.as_ref().map(|(r, q)| (r, q)), b.repetitions, b.top_k)?;
            write_csv(&out.join("bench_report.csv"), |w| report.write_csv(w))?;
        }
    }
    let done = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    manifest.add("finished_unix", done);
    manifest.write()
}

fn inputs(cmd: &Command) -> Vec<(&'static str, &Path)> {
    let mut v: Vec<(&'static str, &Path)> = Vec::new();
    match cmd {
        Command::Synth => {}
        Command::Pretrain { dataset } => v.push(("dataset", dataset)),
        Command::Train { dataset, model, critic } => {
            v.push(("dataset", dataset));
            if let Some(m) = model {
                v.push(("model", m));
            }
            if let Some(c) = critic {
                v.push(("critic", c));
            }
        }
        Command::Encode { dataset, model } => {
            v.push(("dataset", dataset));
            v.push(("model", model));
        }
        Command::Eval { dataset, codes, model } => {
            v.push(("dataset", dataset));
            v.push(("codes", codes));
            if let Some(m) = model {
                v.push(("model", m));
            }
        }
        Command::Bench { codes } => {
            if let Some(c) = codes {
                v.push(("codes", c));
            }
        }
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                Error::Io(io) => format!("i/o error: {io}"),
                other => other.to_string(),
            };
            eprintln!("advbin: {}", msg.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
