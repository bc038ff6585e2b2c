mod config;
mod manifest;
mod visualize;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use vmfcomp_core::autograd::Tensor;
use vmfcomp_core::data::{load_dataset, make_split, save_dataset, verify_dataset, Dataset, Sample};
use vmfcomp_core::eval::{evaluate, run_probes};
use vmfcomp_core::losses::hard_labels;
use vmfcomp_core::trainers::{load_checkpoint, save_checkpoint, train, Setting, TrainData, TrainState};
use vmfcomp_core::Error;

use config::{parse_domain, RunConfig};
use manifest::{file_hash, now_unix, sha256_hex, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "vmfcomp", version, about = "Compositional vMF representations for domain-generalised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory. Nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `data.seed` for gen and `train.seed` for train.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-domain dataset into --out.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one setting on the source domains of a leave-one-domain-out split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        setting: Option<Setting>,
        /// Labeled fraction of each source domain.
        #[arg(long)]
        labels: Option<f64>,
        /// Held-out domain, as an id or a letter (A = 0).
        #[arg(long)]
        target: Option<String>,
    },
    /// Score a checkpoint on the target domain and run the probes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(value_name = "CKPT")]
        ckpt_pos: Option<PathBuf>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Run only the channel-matching and equivariance probes.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(value_name = "CKPT")]
        ckpt_pos: Option<PathBuf>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Render activation grids for target-domain samples.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: Option<String>,
        /// Sample indices within the target domain.
        ids: Vec<usize>,
    },
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
    files: Vec<String>,
}

impl Run {
    fn start(name: &str, common: &Common, edit: impl FnOnce(&mut RunConfig) -> anyhow::Result<()>) -> anyhow::Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        edit(&mut cfg)?;
        cfg.validate()?;
        std::fs::create_dir_all(&common.out)
            .with_context(|| format!("creating {}", common.out.display()))?;
        let echo = cfg.to_toml();
        std::fs::write(common.out.join("config.toml"), &echo)?;
        let seed = if name == "gen" { cfg.data.seed } else { cfg.train.seed };
        Ok(Self {
            manifest: RunManifest {
                command: name.into(),
                args: std::env::args().skip(1).collect(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                config_path: common.config.as_ref().map(|p| p.display().to_string()),
                config_hash: sha256_hex(echo.as_bytes()),
                seed,
                dataset_hash: None,
                checkpoint_hash: None,
                output_dir: common.out.display().to_string(),
                started_unix: now_unix(),
                finished_unix: 0,
                outputs: Default::default(),
            },
            cfg,
            out: common.out.clone(),
            files: vec!["config.toml".into()],
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
        std::fs::write(self.out.join(name), bytes)?;
        self.files.push(name.into());
        Ok(())
    }

    fn dataset(&mut self) -> anyhow::Result<Dataset> {
        let d = &self.cfg.data;
        let data = match &d.dir {
            Some(dir) => {
                verify_dataset(dir).with_context(|| format!("verifying {}", dir.display()))?;
                load_dataset(dir)?
            }
            None => Dataset::generate(&d.domains, &d.synth, d.per_domain, d.seed)?,
        };
        self.manifest.dataset_hash = Some(data.content_hash()?);
        Ok(data)
    }

    fn finish(self) -> anyhow::Result<()> {
        self.manifest.finish(&self.out, &self.files)?;
        Ok(())
    }
}

fn pick_ckpt(flag: Option<PathBuf>, pos: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match (flag, pos) {
        (Some(a), Some(b)) if a != b => bail!(Error::config("ckpt", "given twice with different paths")),
        (Some(a), _) | (None, Some(a)) => Ok(a),
        (None, None) => bail!(Error::config("ckpt", "a checkpoint path is required")),
    }
}

fn check_image_size(data: &Dataset, size: (usize, usize)) -> anyhow::Result<()> {
    if let Some(s) = data.samples.values().flatten().find(|s| (s.height, s.width) != size) {
        bail!(Error::config(
            "train.arch.input_size",
            format!("{size:?} differs from the dataset's {}x{} images", s.height, s.width)
        ));
    }
    Ok(())
}

fn cmd_gen(common: &Common) -> anyhow::Result<()> {
    let mut run = Run::start("gen", common, |c| {
        if let Some(s) = common.seed {
            c.data.seed = s;
        }
        c.data.dir = None;
        Ok(())
    })?;
    let data = run.dataset()?;
    let out = run.out.clone();
    if out.join("manifest.json").exists() {
        let existing = verify_dataset(&out)?;
        let (mut a, mut b) = (existing.clone(), data.manifest.clone());
        a.files.clear();
        b.files.clear();
        let on_disk = load_dataset(&out)?;
        if a != b || on_disk.content_hash()? != data.content_hash()? {
            bail!("{} holds a different dataset; choose another --out", out.display());
        }
        println!("verified, unchanged: {}", out.display());
    } else {
        save_dataset(&out, &data)?;
        println!(
            "wrote {} domains x {} samples to {}",
            data.samples.len(),
            run.cfg.data.per_domain,
            out.display()
        );
    }
    run.files.push("manifest.json".into());
    run.finish()
}

fn cmd_train(common: &Common, setting: Option<Setting>, labels: Option<f64>, target: Option<&str>) -> anyhow::Result<()> {
    let mut run = Run::start("train", common, |c| {
        if let Some(s) = common.seed {
            c.train.seed = s;
        }
        if let Some(s) = setting {
            c.train.setting = s;
        }
        if let Some(f) = labels {
            c.split.label_fraction = f;
        }
        if let Some(t) = target {
            c.split.target = parse_domain(t)?;
        }
        Ok(())
    })?;
    let data = run.dataset()?;
    check_image_size(&data, run.cfg.train.arch.input_size)?;
    let s = &run.cfg.split;
    let plan = make_split(&data.counts(), s.target, s.label_fraction, s.seed)?;
    let td = TrainData::from_split(&data, &plan)?;
    log::info!(
        "{}: target {}, {} labeled and {} unlabeled training samples",
        run.cfg.train.setting,
        plan.target_domain,
        td.labeled.len(),
        td.unlabeled.len()
    );
    let (state, log) = train(&run.cfg.train, &td)?;
    let ckpt = run.out.join("checkpoint.vmfc");
    save_checkpoint(&state, &ckpt)?;
    run.files.push("checkpoint.vmfc".into());
    run.manifest.checkpoint_hash = Some(file_hash(&ckpt)?);
    run.write("loss_log.csv", log.to_csv())?;
    run.write("split.json", serde_json::to_vec_pretty(&plan)?)?;
    println!("trained {} for {} iterations: {}", state.cfg.setting, state.iteration, ckpt.display());
    run.finish()
}

fn open_checkpoint(run: &mut Run, path: &Path) -> anyhow::Result<TrainState> {
    let state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    run.manifest.checkpoint_hash = Some(file_hash(path)?);
    run.manifest.seed = state.cfg.seed;
    Ok(state)
}

fn eval_target(run: &Run, flag: Option<&str>) -> anyhow::Result<u32> {
    Ok(match flag {
        Some(t) => parse_domain(t)?,
        None => run.cfg.split.target,
    })
}

fn cmd_eval(common: &Common, ckpt: PathBuf, target: Option<&str>, probes_only: bool) -> anyhow::Result<()> {
    let mut run = Run::start(if probes_only { "probe" } else { "eval" }, common, |_| Ok(()))?;
    let state = open_checkpoint(&mut run, &ckpt)?;
    let target = eval_target(&run, target)?;
    let data = run.dataset()?;
    let opts = run.cfg.eval.options();
    if probes_only {
        let report = run_probes(&state.model, &data, target, &opts)?;
        run.write("probes.json", serde_json::to_vec_pretty(&report)?)?;
        if let Some((j, score)) = report.heart_channel.zip(report.heart_score) {
            println!("heart channel {j}: matching Dice {score:.3}");
        }
    } else {
        let report = evaluate(&state.model, &data, target, &opts)?;
        report.write(&run.out)?;
        run.files.push("report.json".into());
        run.files.push("metrics.csv".into());
        if report.probes.is_some() {
            run.files.push("channels.csv".into());
        }
        for d in &report.domains {
            println!(
                "domain {}: Dice {} HD {}",
                d.domain,
                d.mean_dice.map_or("n/a".into(), |v| format!("{v:.2}")),
                d.mean_hd.map_or("n/a".into(), |v| format!("{v:.2}"))
            );
        }
    }
    run.finish()
}

fn cmd_visualize(common: &Common, ckpt: &Path, target: Option<&str>, ids: &[usize]) -> anyhow::Result<()> {
    let mut run = Run::start("visualize", common, |_| Ok(()))?;
    let state = open_checkpoint(&mut run, ckpt)?;
    let target = eval_target(&run, target)?;
    let data = run.dataset()?;
    let ids = if ids.is_empty() { run.cfg.eval.visualize.clone() } else { ids.to_vec() };
    let domain = data
        .samples
        .get(&target)
        .ok_or_else(|| Error::MissingSample(format!("domain {target}")))?;
    let samples: Vec<&Sample> = ids
        .iter()
        .map(|&i| {
            domain
                .get(i)
                .ok_or_else(|| Error::MissingSample(format!("{target}/{i}")))
        })
        .collect::<Result<_, _>>()?;
    let images: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| Tensor::from_vec(&[1, s.height, s.width], s.image.clone()))
        .collect();
    let pred = state.model.predict(&Tensor::stack(&images))?;
    let labels = pred.seg.as_ref().map(hard_labels);
    let mut legend = None;
    for (k, (&i, s)) in ids.iter().zip(&samples).enumerate() {
        let hw = s.height * s.width;
        let outputs = visualize::SampleOutputs {
            labels: labels.as_ref().map(|l| l[k * hw..(k + 1) * hw].to_vec()),
            reconstruction: pred.reconstruction.as_ref().map(|r| r.select(k).into_data()),
            activations: pred.activations.as_ref().map(|a| a.select(k)),
        };
        let (img, lg) = visualize::render(s, &outputs);
        let name = format!("figure_{target}_{i}.png");
        img.save(run.out.join(&name))?;
        run.files.push(name);
        legend = Some(lg);
    }
    if let Some(lg) = legend {
        run.write("legend.json", serde_json::to_vec_pretty(&lg)?)?;
    }
    println!("wrote {} figures to {}", ids.len(), run.out.display());
    run.finish()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFiniteLoss { .. } => 2,
                Error::Config { .. } | Error::InvalidFraction(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen { common } => cmd_gen(&common),
        Command::Train {
            common,
            setting,
            labels,
            target,
        } => cmd_train(&common, setting, labels, target.as_deref()),
        Command::Eval {
            common,
            ckpt,
            ckpt_pos,
            target,
        } => pick_ckpt(ckpt, ckpt_pos).and_then(|c| cmd_eval(&common, c, target.as_deref(), false)),
        Command::Probe {
            common,
            ckpt,
            ckpt_pos,
            target,
        } => pick_ckpt(ckpt, ckpt_pos).and_then(|c| cmd_eval(&common, c, target.as_deref(), true)),
        Command::Visualize {
            common,
            ckpt,
            target,
            ids,
        } => cmd_visualize(&common, &ckpt, target.as_deref(), &ids),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
