use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kbdm::classifier::{Fusion, PromptComponents, TokenClassifier};
use kbdm::codebook;
use kbdm::diffusion::{train_diffusion, Denoiser, DiffusionConfig, DEFAULT_SAMPLE_STEPS};
use kbdm::dynmask::{compute_gate, TimestepEmbedding};
use kbdm::harness::ablation::{self, training_corpus, training_items, Prepared};
use kbdm::harness::io::{csv, loss_csv, read_pgm, write_corpus, write_pgm};
use kbdm::harness::kb::{build_classifier, build_codebook, kb_corpus};
use kbdm::harness::{run_ablation, DiffusionBundle, ExperimentConfig, KnowledgeBase};
use kbdm::numerics::{checkpoint, RngState};
use kbdm::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "kbdm", version, about = "Knowledge-base and dynamic-mask diffusion on synthetic pose data")]
struct Cli {
    /// Overrides the `seed` key of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus as PGM images plus CSV labels and keypoints.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the codebook on the synthetic corpus.
    TrainCodebook {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the text-to-index classifier against a frozen codebook.
    TrainClassifier {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoiser with the adapters enabled in the config.
    TrainDiffusion(TrainDiffusionArgs),
    /// Generate one image.
    Sample(SampleArgs),
    /// Evaluate a trained denoiser on held-out conditions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run the adapter ablation and write the table.
    Ablate,
    /// Print the gate value for every timestep.
    InspectGate {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print the retrieved codebook indices for a prompt.
    QueryKb {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "mean")]
        fusion: String,
    },
}

#[derive(Args, Debug)]
struct TrainDiffusionArgs {
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_kb: bool,
    #[arg(long)]
    no_dm: bool,
    #[arg(long)]
    no_dc: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_STEPS)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Classifier-free guidance scale; 1 disables guidance.
    #[arg(long, default_value_t = 1.0)]
    cfg: f64,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.synth.seed = seed;
    }
    Ok(config)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn or_default(path: &Option<PathBuf>, out_dir: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out_dir.join(name))
}

fn load_kb(codebook_path: &Path, classifier_path: &Path) -> Result<KnowledgeBase> {
    let (codebook, extractor) = codebook::from_checkpoint(&checkpoint::load(codebook_path)?)?;
    let classifier = TokenClassifier::from_checkpoint(&checkpoint::load(classifier_path)?)?;
    let mut tensors = codebook::to_checkpoint(&codebook, &extractor);
    tensors.extend(classifier.to_checkpoint());
    KnowledgeBase::from_checkpoint(&tensors)
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let seed = config.seed;
    match &cli.command {
        Command::GenData { out } => {
            let dir = or_default(out, &cli.out_dir, "data");
            let samples = training_corpus(&config, seed)?;
            write_corpus(&dir, &samples)?;
            println!("wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::TrainCodebook { out } => {
            let path = or_default(out, &cli.out_dir, "codebook.kbdm");
            let samples = training_corpus(&config, seed)?;
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            let (cb, fx, report) = build_codebook(&config, &images, seed)?;
            ensure_parent(&path)?;
            checkpoint::save(&path, &codebook::to_checkpoint(&cb, &fx))?;
            fs::create_dir_all(&cli.out_dir)?;
            fs::write(cli.out_dir.join("codebook_loss.csv"), loss_csv(&report.epoch_losses))?;
            println!(
                "codebook K={} C={} final loss {:.6}, {} entries reseeded",
                cb.size(),
                cb.dim(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.reseeded
            );
        }
        Command::TrainClassifier { codebook: cb_path, out } => {
            let path = or_default(out, &cli.out_dir, "classifier.kbdm");
            let (cb, fx) = codebook::from_checkpoint(&checkpoint::load(cb_path)?)?;
            let samples = kb_corpus(&config, seed)?;
            let (clf, report) = build_classifier(&config, &fx, &cb, &samples, seed)?;
            ensure_parent(&path)?;
            checkpoint::save(&path, &clf.to_checkpoint())?;
            fs::create_dir_all(&cli.out_dir)?;
            fs::write(cli.out_dir.join("classifier_loss.csv"), loss_csv(&report.epoch_losses))?;
            println!(
                "classifier final loss {:.6}, index accuracy {:.4}",
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.epoch_accuracy.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainDiffusion(args) => {
            let path = or_default(&args.out, &cli.out_dir, "diffusion.kbdm");
            let mut flags = config.flags;
            flags.kb &= !args.no_kb;
            flags.dm &= !args.no_dm;
            flags.dc &= !args.no_dc && flags.kb;
            let kb = if flags.kb {
                match (&args.codebook, &args.classifier) {
                    (Some(c), Some(k)) => Some(load_kb(c, k)?),
                    _ => {
                        return Err(Error::Config(
                            "KB conditioning needs --codebook and --classifier (or pass --no-kb)".into(),
                        ))
                    }
                }
            } else {
                None
            };
            let samples = training_corpus(&config, seed)?;
            let items = training_items(&samples, kb.as_ref(), flags, &config)?;
            let mut rng = RngState::new(seed).fork("denoiser-init");
            let mut model = Denoiser::init(config.denoiser_config(), &mut rng);
            let dcfg = DiffusionConfig {
                seed,
                ..config.diffusion.clone()
            };
            let sched = dcfg.schedule()?;
            let report = train_diffusion(&items, &mut model, &sched, &dcfg)?;
            let bundle = DiffusionBundle {
                model,
                flags,
                fusion: config.fusion,
                timesteps: dcfg.timesteps,
                beta_start: dcfg.beta_start,
                beta_end: dcfg.beta_end,
                kb,
            };
            ensure_parent(&path)?;
            bundle.save(&path)?;
            fs::create_dir_all(&cli.out_dir)?;
            fs::write(cli.out_dir.join("diffusion_loss.csv"), loss_csv(&report.epoch_losses))?;
            println!(
                "trained {} denoiser, loss {:.6} -> {:.6}",
                flags.label(),
                report.epoch_losses.first().copied().unwrap_or(f64::NAN),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Sample(args) => {
            let bundle = DiffusionBundle::load(&args.ckpt)?;
            let prompt = args.prompt.as_deref().map(PromptComponents::parse).transpose()?;
            let pose = args.pose.as_deref().map(read_pgm).transpose()?;
            let image = bundle.sample(prompt.as_ref(), pose.as_ref(), args.steps, seed, args.cfg)?;
            ensure_parent(&args.out)?;
            write_pgm(&args.out, &image)?;
            println!("wrote {}", args.out.display());
        }
        Command::Eval { ckpt } => {
            let bundle = DiffusionBundle::load(ckpt)?;
            let kb = match &bundle.kb {
                Some(kb) => kb.clone(),
                None => {
                    return Err(Error::Config(
                        "evaluation needs a knowledge base; the checkpoint was trained with --no-kb".into(),
                    ))
                }
            };
            let prepared = Prepared {
                seed,
                train: Vec::new(),
                eval: ablation::eval_corpus(&config, seed)?,
                kb,
            };
            let sched = bundle.schedule()?;
            let images = ablation::generate_eval_images(&config, &prepared, bundle.flags, &bundle.model, &sched)?;
            let report = ablation::evaluate_images(&config, &prepared, &images)?;
            print!(
                "{}",
                csv(
                    "config,pose_pck,frechet_proxy,label_consistency",
                    [format!("{},{}", bundle.flags.label(), report.csv_fields())]
                )
            );
        }
        Command::Ablate => {
            let table = run_ablation(&config)?;
            fs::create_dir_all(&cli.out_dir)?;
            fs::write(cli.out_dir.join("ablation.csv"), table.to_csv()?)?;
            fs::write(cli.out_dir.join("ablation_per_seed.csv"), table.to_csv_per_seed())?;
            print!("{}", table.report()?);
        }
        Command::InspectGate { ckpt } => {
            let bundle = DiffusionBundle::load(ckpt)?;
            let dim = bundle.model.config.time_dim;
            let mut rows = Vec::with_capacity(bundle.timesteps);
            for t in 0..bundle.timesteps {
                let g = compute_gate(&TimestepEmbedding::new(t, dim), &bundle.model.gate)?;
                rows.push(format!("{t},{g}"));
            }
            print!("{}", csv("timestep,g", rows));
        }
        Command::QueryKb {
            codebook: cb_path,
            classifier,
            prompt,
            fusion,
        } => {
            let kb = load_kb(cb_path, classifier)?;
            let fusion: Fusion = fusion.parse()?;
            let prompt = PromptComponents::parse(prompt)?;
            let per_component = prompt
                .components()
                .iter()
                .map(|c| kb.prompt_indices(&PromptComponents::new(vec![c.clone()])?))
                .collect::<Result<Vec<_>>>()?;
            let fused = kb.query(&prompt, true, fusion)?;
            let fused_idx = kb
                .codebook
                .encode(&codebook::ImageFeatureGrid::from_rows(fused)?)?
                .0;
            let header = std::iter::once("position".to_string())
                .chain(prompt.components().iter().cloned())
                .chain(std::iter::once(format!("fused_{fusion}")))
                .collect::<Vec<_>>()
                .join(",");
            let rows = (0..fused_idx.len()).map(|i| {
                let mut line = i.to_string();
                for c in &per_component {
                    line.push_str(&format!(",{}", c.0[i]));
                }
                line.push_str(&format!(",{}", fused_idx.0[i]));
                line
            });
            print!("{}", csv(&header, rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
