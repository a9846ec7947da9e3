use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use m2cd::checkpoint;
use m2cd::datakit::{
    build_synthetic_dataset, load_dataset, read_optical, read_sar, tta_predict, write_gray,
    write_mask, write_rgb, write_split, ImagePair, Split, SyntheticSceneConfig,
};
use m2cd::gatelog::gate_stats;
use m2cd::ndarray::{s, Array2, Array3, Axis};
use m2cd::network::ChangePredictor;
use m2cd::speckle::{optical_to_sar, LuminanceMode, SpeckleConfig};
use m2cd::trainer::{self, AblationTable, TrainConfig};
use m2cd::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "m2cd", version, about = "Optical-SAR change detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic optical/SAR dataset split 3:1:1.
    GenData(GenDataArgs),
    /// Apply multiplicative speckle to an optical image.
    SimulateSpeckle(SpeckleArgs),
    /// Train a model, then score the best checkpoint on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Predict a change mask for one image pair.
    Infer(InferArgs),
    /// Train and test the four MoE/O2SP variants.
    Ablate(AblateArgs),
    /// Summarise expert utilisation from a gate log.
    GateStats(GateStatsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 4.0)]
    pub looks: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SpeckleArgs {
    /// Optical image, or a directory of PNG images.
    #[arg(long = "in", alias = "input")]
    pub input: PathBuf,
    /// Output image, or a directory receiving same-named PNG files.
    #[arg(long = "out", alias = "output")]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub looks: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Speckle every channel independently instead of the luminance.
    #[arg(long)]
    pub per_channel: bool,
}

/// Flags mirroring `TrainConfig` keys; each overrides the config file.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub val_interval: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_iterations: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, action = ArgAction::Set)]
    pub moe_enabled: Option<bool>,
    #[arg(long, action = ArgAction::Set)]
    pub o2sp_enabled: Option<bool>,
    #[arg(long, action = ArgAction::Set)]
    pub test_tta: Option<bool>,
    /// `loss.lambda_sd`
    #[arg(long)]
    pub lambda_sd: Option<f64>,
    /// `speckle.looks` of the bridge path.
    #[arg(long)]
    pub looks: Option<f64>,
    /// `data.root`
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// `data.synthetic_pairs`
    #[arg(long)]
    pub synthetic_pairs: Option<usize>,
    /// `data.scene.size`, square.
    #[arg(long)]
    pub image_size: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(max_iterations => max_iterations);
        set!(val_interval => val_interval);
        set!(batch_size => batch_size);
        set!(lr => lr);
        set!(warmup_iterations => warmup_iterations);
        set!(weight_decay => weight_decay);
        set!(moe_enabled => moe_enabled);
        set!(o2sp_enabled => o2sp_enabled);
        set!(test_tta => test_tta);
        set!(lambda_sd => loss.lambda_sd);
        set!(looks => speckle.looks);
        set!(synthetic_pairs => data.synthetic_pairs);
        if let Some(root) = &self.data_root {
            c.data.root = Some(root.clone());
        }
        if let Some(s) = self.image_size {
            c.data.scene.size = (s, s);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "runs/train")]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root in the standard layout.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Run config whose data section provides the evaluation data.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub tta: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Key-value metrics output; defaults to `eval_metrics.toml` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pre: PathBuf,
    #[arg(long)]
    pub post: PathBuf,
    /// Output 0/255 change mask.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional 8-bit probability map.
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
    #[arg(long)]
    pub tta: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated training seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "runs/ablate")]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GateStatsArgs {
    #[arg(long)]
    pub log: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::SimulateSpeckle(a) => simulate_speckle(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Infer(a) => infer(&a),
        Command::Ablate(a) => ablate(&a),
        Command::GateStats(a) => {
            let stats = gate_stats(&a.log)?;
            print!("{}", stats.to_table());
            Ok(())
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let scene = SyntheticSceneConfig {
        size: (a.size, a.size),
        looks: a.looks,
        ..Default::default()
    };
    let data = build_synthetic_dataset(a.pairs, &scene, a.seed)?;
    for split in Split::ALL {
        write_split(&a.out, split, data.get(split))?;
    }
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {})",
        data.len(),
        a.out.display(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(())
}

fn simulate_speckle(a: &SpeckleArgs) -> Result<()> {
    let cfg = SpeckleConfig {
        looks: a.looks,
        seed: a.seed,
        luminance_mode: if a.per_channel {
            LuminanceMode::PerChannel
        } else {
            LuminanceMode::LuminanceThenReplicate
        },
        clamp_negative: true,
    };
    cfg.validate()?;
    if !a.input.is_dir() {
        return speckle_file(&a.input, &a.output, &cfg, a.per_channel);
    }
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(&a.input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    inputs.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    inputs.sort();
    std::fs::create_dir_all(&a.output)?;
    for (i, input) in inputs.iter().enumerate() {
        let name = input.file_name().expect("directory entries have names");
        // Each image gets its own seed so that no two share a speckle field.
        let cfg = cfg.with_seed(m2cd::derive_seed(a.seed, &[i as u64]));
        speckle_file(input, &a.output.join(name), &cfg, a.per_channel)?;
    }
    println!("wrote {} images to {}", inputs.len(), a.output.display());
    Ok(())
}

fn speckle_file(input: &Path, output: &Path, cfg: &SpeckleConfig, per_channel: bool) -> Result<()> {
    let image = read_optical(input)?;
    let sar = optical_to_sar(&image, cfg)?;
    if per_channel {
        write_rgb(output, &sar.pixels)
    } else {
        write_gray(output, &sar.pixels.index_axis(Axis(0), 0).to_owned())
    }
}

fn metrics_to(path: &Path, report: &m2cd::metrics::MetricReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, report.to_key_values()?)?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    std::fs::create_dir_all(&a.run_dir)?;
    std::fs::write(a.run_dir.join(trainer::CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    let data = cfg.data.materialize()?;
    log::info!(
        "data: {} train, {} val, {} test pairs",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let state = trainer::train(&cfg, &data.train, &data.val, &a.run_dir)?;
    println!(
        "best validation mIoU {:.4} at iteration {} ({})",
        state.best_val_miou,
        state.best_iteration,
        state.best_checkpoint_path.display()
    );
    if !data.test.is_empty() {
        let report = trainer::evaluate(
            &state.best_checkpoint_path,
            &data.test,
            cfg.test_tta,
            cfg.threshold,
            Some(&cfg.model),
        )?;
        metrics_to(&a.run_dir.join("test_metrics.toml"), &report)?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn eval_data(a: &EvalArgs) -> Result<Vec<ImagePair>> {
    if let Some(root) = &a.data_root {
        return load_dataset(root, a.split);
    }
    if let Some(path) = &a.config {
        let cfg = TrainConfig::load(path)?;
        let data = cfg.data.materialize()?;
        return Ok(data.get(a.split).to_vec());
    }
    Err(Error::Argument("eval needs --data-root or --config".into()))
}

fn eval(a: &EvalArgs) -> Result<()> {
    checkpoint::read_header(&a.checkpoint)?;
    let data = eval_data(a)?;
    let report = trainer::evaluate(&a.checkpoint, &data, a.tta, a.threshold, None)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval_metrics.toml")
    });
    metrics_to(&out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Argument(format!(
            "threshold must lie in [0, 1], got {}",
            a.threshold
        )));
    }
    let loaded = checkpoint::load(&a.checkpoint, m2cd::DType::F32)?;
    let pre = read_optical(&a.pre)?;
    let post = read_sar(&a.post)?;
    if pre.dim() != post.dim() {
        return Err(Error::Shape(format!(
            "{} is {}x{} but {} is {}x{}",
            a.pre.display(),
            pre.dim().2,
            pre.dim().1,
            a.post.display(),
            post.dim().2,
            post.dim().1
        )));
    }
    let (_, h, w) = pre.dim();
    let stride = loaded.model.config().backbone.total_stride();
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    let label = Array2::zeros((ph, pw));
    let pair = ImagePair::new(pad_edge(&pre, ph, pw), pad_edge(&post, ph, pw), label, "input")?;
    let mut map = if a.tta {
        tta_predict(&pair, &loaded.model)?
    } else {
        loaded.model.predict(std::slice::from_ref(&pair))?.remove(0)
    };
    map.probabilities = map.probabilities.slice(s![..h, ..w]).to_owned();
    let mask = map.threshold(a.threshold);
    write_mask(&a.out, &mask)?;
    if let Some(p) = &a.prob_out {
        write_gray(p, &map.probabilities)?;
    }
    let positive = mask.iter().filter(|v| **v == 1).count();
    println!(
        "wrote {} ({}x{}, {:.2}% changed)",
        a.out.display(),
        w,
        h,
        100.0 * positive as f64 / (h * w) as f64
    );
    Ok(())
}

/// Grows an image to `h x w` by repeating its last row and column.
fn pad_edge(img: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, ih, iw) = img.dim();
    Array3::from_shape_fn((c, h, w), |(k, y, x)| img[[k, y.min(ih - 1), x.min(iw - 1)]])
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = a.config.resolve()?;
    std::fs::create_dir_all(&a.run_dir)?;
    std::fs::write(a.run_dir.join(trainer::CONFIG_SNAPSHOT), base.to_toml()?)?;
    let data = base.data.materialize()?;
    let seeds = if a.seeds.is_empty() {
        vec![base.seed]
    } else {
        a.seeds.clone()
    };
    let mut table = AblationTable::default();
    for seed in seeds {
        log::info!("ablation grid for seed {seed}");
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        let grid = trainer::run_ablation_grid(&cfg, &data, &a.run_dir)?;
        table.rows.extend(grid.rows);
    }
    let text = table.to_table();
    std::fs::write(a.run_dir.join("ablation.txt"), &text)?;
    std::fs::write(
        a.run_dir.join("ablation.json"),
        serde_json::to_vec_pretty(&table)?,
    )?;
    print!("{text}");
    Ok(())
}
