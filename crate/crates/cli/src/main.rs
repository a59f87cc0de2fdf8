use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lammvit::checkpoint::load_checkpoint;
use lammvit::data_synth::{gen_face, gen_fake, make_dataset, PerturbOptions, PerturbationKind};
use lammvit::imageio::{read_ppm, write_pgm};
use lammvit::mask::{parse_landmarks, project_to_patches, region_groups, render_gaussian_masks};
use lammvit::model::{classify, export_attention_maps, Model, ModelConfig};
use lammvit::numerics::{Stencil, Tensor};
use lammvit::par::Execution;
use lammvit::training::{check_model_gradients, evaluate, train_to_dir, RunConfig};
use lammvit::{Error, Result};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "lammvit", version, about = "Region-guided ViT forgery detector")]
struct Cli {
    /// Run batch maps on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic face corpus with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 0.5)]
        fake_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train a model; writes model.ckpt and history.jsonl under --out.
    Train {
        /// Training manifest or the directory holding manifest.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// JSON file with model and training fields; missing fields take toy defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint, optionally under a perturbation.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "none")]
        perturb: PerturbationKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the metrics JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Pin the JPEG quality instead of drawing it.
        #[arg(long)]
        jpeg_quality: Option<u32>,
    },
    /// Render region masks (pixel and patch level) as PGM files.
    Masks {
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        sigma_scale: f64,
    },
    /// Export gate maps and per-layer modulation diagnostics for one image.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full objective.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates checked per parameter tensor; 0 checks all.
        #[arg(long, default_value_t = 6)]
        coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, value_enum, default_value_t = StencilArg::Richardson)]
        stencil: StencilArg,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StencilArg {
    Central,
    Richardson,
}

impl From<StencilArg> for Stencil {
    fn from(s: StencilArg) -> Self {
        match s {
            StencilArg::Central => Stencil::Central,
            StencilArg::Richardson => Stencil::Richardson,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Tiny,
    Toy,
    Base,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Toy => ModelConfig::toy(),
            Preset::Base => ModelConfig::default(),
        }
    }
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}

fn echo(resolved: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(&resolved)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::toy())?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let overrides: serde_json::Value = serde_json::from_str(&text)?;
        let obj = overrides
            .as_object()
            .ok_or_else(|| Error::Config(format!("{}: expected a JSON object", path.display())))?;
        for (k, v) in obj {
            if value.get(k).is_none() {
                return Err(Error::Config(format!("{}: unknown field {k}", path.display())));
            }
            value[k] = v.clone();
        }
    }
    let mut cfg: RunConfig = serde_json::from_value(value)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let mut resolved = serde_json::to_value(&cli.command)?;
    match cli.command {
        Command::GenData {
            out,
            count,
            fake_ratio,
            seed,
            image_size,
        } => {
            echo(resolved)?;
            let ds = make_dataset(count, fake_ratio, seed, image_size, &out)?;
            let fakes = ds.entries.iter().filter(|e| e.label == 1).count();
            eprintln!("wrote {} samples ({fakes} fake) to {}", ds.len(), out.display());
        }
        Command::Train {
            data,
            val,
            config,
            out,
            seed,
        } => {
            let cfg = load_run_config(config.as_deref(), seed)?;
            resolved["config"] = serde_json::to_value(&cfg)?;
            echo(resolved)?;
            let outcome = train_to_dir(&cfg, &manifest_path(&data), &manifest_path(&val), &out, exec)?;
            let last = outcome.history.last().expect("at least one epoch");
            println!(
                "{}",
                json!({
                    "best_epoch": outcome.best_epoch,
                    "best_val_acc": outcome.best_val_acc,
                    "epochs": outcome.history.len(),
                    "final_train_loss": last.train_loss,
                })
            );
        }
        Command::Eval {
            ckpt,
            data,
            perturb,
            seed,
            report,
            jpeg_quality,
        } => {
            echo(resolved)?;
            let opts = PerturbOptions { jpeg_quality };
            let metrics = evaluate(&ckpt, &manifest_path(&data), perturb, seed, opts, exec)?;
            println!("{}", serde_json::to_string(&metrics)?);
            if let Some(path) = report {
                write_json(&path, &metrics)?;
            }
        }
        Command::Masks {
            landmarks,
            size,
            patch,
            out,
            sigma_scale,
        } => {
            echo(resolved)?;
            let lm = parse_landmarks(&landmarks, (size, size))?;
            let spec = region_groups();
            let stack = render_gaussian_masks(&lm, &spec, sigma_scale);
            let patches = project_to_patches(&stack, patch)?;
            let grid = size / patch;
            create_dir(&out)?;
            for (k, region) in spec.regions.iter().enumerate() {
                write_pgm(&out.join(format!("region_{k:02}_{}.pgm", region.name)), &stack.channel_tensor(k))?;
                let row = patches.row_slice(k).to_vec();
                write_pgm(&out.join(format!("patch_{k:02}_{}.pgm", region.name)), &Tensor::new(vec![grid, grid], row)?)?;
            }
            eprintln!("wrote {} region masks to {}", spec.len(), out.display());
        }
        Command::Attn {
            ckpt,
            image,
            landmarks,
            layer,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?;
            resolved["config"] = serde_json::to_value(model.config())?;
            echo(resolved)?;
            let img = read_ppm(&image)?;
            let lm = parse_landmarks(&landmarks, (img.shape()[0], img.shape()[1]))?;
            create_dir(&out)?;
            let (files, _) = export_attention_maps(&model, &img, &lm, layer, &out)?;
            let forward = model.forward(&img, &lm)?;
            let diagnostics = json!({
                "classification": classify(forward.logit),
                "logit": forward.logit,
                "layers": forward.layers,
                "maps": files,
            });
            write_json(&out.join("diagnostics.json"), &diagnostics)?;
            eprintln!("wrote {} maps and diagnostics.json to {}", files.len(), out.display());
        }
        Command::Gradcheck {
            preset,
            seed,
            coords,
            eps,
            stencil,
            tolerance,
        } => {
            let config = preset.config();
            resolved["config"] = serde_json::to_value(&config)?;
            echo(resolved)?;
            let size = config.image_size;
            let model = Model::new(config, seed)?;
            let real = gen_face(seed, size)?;
            let fake = gen_fake(seed.wrapping_add(1), size)?;
            let samples = vec![
                model.prepare(&real.image, &real.landmarks)?,
                model.prepare(&fake.image, &fake.landmarks)?,
            ];
            let sample = (coords > 0).then_some((coords, seed));
            let report = check_model_gradients(&model, &samples, &[false, true], eps, sample, stencil.into())?;
            eprint!("{report}");
            let max = report.max_rel_error();
            println!("{}", json!({"max_rel_error": max, "tolerance": tolerance, "tensors": report.params.len()}));
            if !(max <= tolerance) {
                return Err(Error::Training(format!("gradient check failed: max relative error {max:.3e} > {tolerance:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
