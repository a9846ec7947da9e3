//! Training, validation, best-checkpoint selection, evaluation and the
//! MoE/O2SP ablation grid.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datakit::{
    build_synthetic_dataset, load_dataset, tta_predict_batch, AugmentDraw, AugmentationConfig,
    ImagePair, Split, SplitDataset, SyntheticSceneConfig,
};
use crate::gatelog::GateLogWriter;
use crate::losses::{objective, LossConfig, LossReport};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::moe::load_balance_stats;
use crate::network::{
    labels_to_tensor, ChangeDetector, ChangeMap, ChangePredictor, ForwardOptions, Mode,
    ModelConfig, ThreePathOutput,
};
use crate::speckle::SpeckleConfig;
use crate::{derive_seed, Error, Result};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_log.jsonl";
pub const GATE_LOG: &str = "gate_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const NAN_DUMP: &str = "nan_dump.json";

/// Where training data comes from: a directory in the standard layout, or
/// scenes synthesised on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Total synthetic pairs, split 3:1:1.
    pub synthetic_pairs: usize,
    pub synthetic_seed: u64,
    pub scene: SyntheticSceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic_pairs: 1000,
            synthetic_seed: 0,
            scene: SyntheticSceneConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn materialize(&self) -> Result<SplitDataset> {
        match &self.root {
            Some(root) => Ok(SplitDataset {
                train: load_dataset(root, Split::Train)?,
                val: load_dataset(root, Split::Val)?,
                test: load_dataset(root, Split::Test)?,
            }),
            None => build_synthetic_dataset(self.synthetic_pairs, &self.scene, self.synthetic_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iterations: u64,
    pub val_interval: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up length; the rate then decays polynomially to `min_lr`.
    pub warmup_iterations: u64,
    pub poly_power: f64,
    pub min_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub moe_enabled: bool,
    pub o2sp_enabled: bool,
    /// Decision threshold used for validation and testing.
    pub threshold: f32,
    pub test_tta: bool,
    /// Routing decisions are logged every this many iterations (0 disables).
    pub gate_log_interval: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub speckle: SpeckleConfig,
    pub model: ModelConfig,
    pub augmentation: AugmentationConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            val_interval: 200,
            batch_size: 8,
            lr: 6e-5,
            warmup_iterations: 500,
            poly_power: 1.0,
            min_lr: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            moe_enabled: true,
            o2sp_enabled: true,
            threshold: 0.5,
            test_tta: true,
            gate_log_interval: 10,
            seed: 0,
            loss: LossConfig::default(),
            speckle: SpeckleConfig::default(),
            model: ModelConfig::default(),
            augmentation: AugmentationConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 200k iterations, validation every 1k.
    pub fn full_scale() -> Self {
        Self {
            max_iterations: 200_000,
            val_interval: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.val_interval == 0 {
            return bad("val_interval must be positive".into());
        }
        if self.max_iterations > 0 && self.max_iterations < self.val_interval {
            return bad(format!(
                "max_iterations {} is shorter than val_interval {}",
                self.max_iterations, self.val_interval
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!("min_lr must lie in [0, lr], got {}", self.min_lr));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return bad(format!("poly_power must be nonnegative, got {}", self.poly_power));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        self.loss.validate()?;
        self.speckle.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Learning rate used for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_iterations {
            return self.lr * (step + 1) as f64 / self.warmup_iterations as f64;
        }
        let span = self.max_iterations.saturating_sub(self.warmup_iterations).max(1);
        let progress = ((step - self.warmup_iterations) as f64 / span as f64).min(1.0);
        (self.lr - self.min_lr) * (1.0 - progress).powf(self.poly_power) + self.min_lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub ce: f64,
    pub sd: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iteration: u64,
    pub miou: f64,
    pub best_miou: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub iteration: u64,
    pub best_val_miou: f64,
    pub best_iteration: u64,
    pub best_checkpoint_path: PathBuf,
    pub last_checkpoint_path: PathBuf,
    pub run_dir: PathBuf,
    pub history: Vec<LossRecord>,
    pub validations: Vec<ValRecord>,
    pub gate_log_path: Option<PathBuf>,
}

struct JsonLines {
    out: std::io::BufWriter<std::fs::File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains from scratch, writing logs and checkpoints into `run_dir`.
pub fn train(
    config: &TrainConfig,
    train_data: &[ImagePair],
    val_data: &[ImagePair],
    run_dir: &Path,
) -> Result<RunState> {
    config.validate()?;
    let mut model = ChangeDetector::new(config.model.clone(), config.seed, DType::F32)?;
    model.set_moe_enabled(config.moe_enabled);
    train_model(config, &mut model, train_data, val_data, run_dir)
}

/// Trains an existing model in place.
pub fn train_model(
    config: &TrainConfig,
    model: &mut ChangeDetector,
    train_data: &[ImagePair],
    val_data: &[ImagePair],
    run_dir: &Path,
) -> Result<RunState> {
    config.validate()?;
    if val_data.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    if config.max_iterations > 0 && train_data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join(CONFIG_SNAPSHOT), config.to_toml()?)?;
    model.set_moe_enabled(config.moe_enabled);

    let mut train_log = JsonLines::create(&run_dir.join(TRAIN_LOG))?;
    let mut val_log = JsonLines::create(&run_dir.join(VAL_LOG))?;
    let gate_log_path = (config.gate_log_interval > 0 && config.moe_enabled).then(|| run_dir.join(GATE_LOG));
    let mut gate_log = gate_log_path.as_deref().map(GateLogWriter::create).transpose()?;

    let mut state = RunState {
        iteration: 0,
        best_val_miou: f64::NEG_INFINITY,
        best_iteration: 0,
        best_checkpoint_path: run_dir.join(BEST_CHECKPOINT),
        last_checkpoint_path: run_dir.join(LAST_CHECKPOINT),
        run_dir: run_dir.to_path_buf(),
        history: Vec::new(),
        validations: Vec::new(),
        gate_log_path,
    };

    let mut optimizer = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: config.lr_at(0),
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        },
    )?;
    let mut sampler = Sampler::new(train_data.len(), derive_seed(config.seed, &[0x5a3]));
    let num_experts = config.model.moe.num_experts;

    if config.max_iterations == 0 {
        validate_and_checkpoint(config, model, val_data, &mut state, &mut val_log)?;
    }
    for step in 0..config.max_iterations {
        let iteration = step + 1;
        let ids = sampler.next_batch(config.batch_size);
        let batch: Vec<ImagePair> = ids
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let seed = derive_seed(config.seed, &[0xa06, iteration, slot as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                AugmentDraw::sample(&config.augmentation, &mut rng).apply(&train_data[i])
            })
            .collect();
        let opts = ForwardOptions {
            moe_enabled: config.moe_enabled,
            o2sp_enabled: config.o2sp_enabled,
            mode: Mode::Train,
            speckle: config
                .speckle
                .with_seed(derive_seed(config.speckle.seed, &[config.seed, iteration])),
        };
        let out = model.forward_three_path(&batch, &opts)?;
        let labels = labels_to_tensor(&batch, model.dtype())?;
        let lr = config.lr_at(step);
        let obj = match objective(&out.change, &labels, &out.op, &out.sp, out.o2sp.as_ref(), &config.loss) {
            Ok(obj) if obj.report.total.is_finite() => obj,
            Ok(obj) => return Err(nan_abort(run_dir, iteration, &batch, Some(&obj.report), &out, num_experts)),
            Err(Error::Unstable(_)) => {
                return Err(nan_abort(run_dir, iteration, &batch, None, &out, num_experts))
            }
            Err(e) => return Err(e),
        };
        let grads = obj.loss.backward()?;
        optimizer.set_learning_rate(lr);
        optimizer.step(&grads)?;

        let record = LossRecord {
            iteration,
            ce: obj.report.ce,
            sd: obj.report.sd,
            total: obj.report.total,
            lr,
        };
        train_log.write(&record)?;
        state.history.push(record.clone());
        state.iteration = iteration;

        if let Some(log) = gate_log.as_mut() {
            if iteration % config.gate_log_interval == 0 {
                for pyr in [Some(&out.op), Some(&out.sp), out.o2sp.as_ref()].into_iter().flatten() {
                    log.write_pyramid(iteration, pyr, num_experts)?;
                }
                log.flush()?;
            }
        }
        if iteration % config.val_interval == 0 || iteration == config.max_iterations {
            validate_and_checkpoint(config, model, val_data, &mut state, &mut val_log)?;
            log::info!(
                "iteration {iteration}: ce {:.4} sd {:.4} val mIoU {:.4} (best {:.4})",
                record.ce,
                record.sd,
                state.validations.last().map_or(f64::NAN, |v| v.miou),
                state.best_val_miou
            );
        }
    }
    checkpoint::save(&state.last_checkpoint_path, model, state.iteration, state.best_val_miou)?;
    Ok(state)
}

fn validate_and_checkpoint(
    config: &TrainConfig,
    model: &ChangeDetector,
    val_data: &[ImagePair],
    state: &mut RunState,
    val_log: &mut JsonLines,
) -> Result<()> {
    let report = evaluate_predictor(model, val_data, false, config.threshold)?;
    let improved = report.m_iou > state.best_val_miou;
    if improved {
        state.best_val_miou = report.m_iou;
        state.best_iteration = state.iteration;
        checkpoint::save(&state.best_checkpoint_path, model, state.iteration, report.m_iou)?;
    }
    let record = ValRecord {
        iteration: state.iteration,
        miou: report.m_iou,
        best_miou: state.best_val_miou,
        improved,
    };
    val_log.write(&record)?;
    state.validations.push(record);
    Ok(())
}

#[derive(Serialize)]
struct NanDump<'a> {
    iteration: u64,
    batch_ids: Vec<&'a str>,
    ce: Option<f64>,
    sd: Option<f64>,
    total: Option<f64>,
    /// `[path][stage]` expert selection frequencies of the failing batch.
    gate_frequencies: Vec<(String, Vec<Vec<f64>>)>,
}

fn nan_abort(
    run_dir: &Path,
    iteration: u64,
    batch: &[ImagePair],
    report: Option<&LossReport>,
    out: &ThreePathOutput,
    num_experts: usize,
) -> Error {
    let gate_frequencies = [Some(&out.op), Some(&out.sp), out.o2sp.as_ref()]
        .into_iter()
        .flatten()
        .map(|p| {
            let per_stage = p.decisions.iter().map(|d| load_balance_stats(d, num_experts)).collect();
            (p.path.to_string(), per_stage)
        })
        .collect();
    let dump = NanDump {
        iteration,
        batch_ids: batch.iter().map(|p| p.id.as_str()).collect(),
        ce: report.map(|r| r.ce),
        sd: report.map(|r| r.sd),
        total: report.map(|r| r.total),
        gate_frequencies,
    };
    let path = run_dir.join(NAN_DUMP);
    if let Err(e) = serde_json::to_vec_pretty(&dump)
        .map_err(Error::from)
        .and_then(|b| std::fs::write(&path, b).map_err(Error::from))
    {
        log::error!("could not write {}: {e}", path.display());
    }
    Error::Unstable(format!(
        "non-finite loss at iteration {iteration}; diagnostics in {}",
        path.display()
    ))
}

/// Number of pairs predicted per call during evaluation.
const EVAL_CHUNK: usize = 8;

/// Thresholds the predictor's maps and accumulates one confusion matrix
/// over the whole set.
pub fn confusion_for(
    predictor: &dyn ChangePredictor,
    data: &[ImagePair],
    use_tta: bool,
    threshold: f32,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for chunk in data.chunks(EVAL_CHUNK) {
        let maps: Vec<ChangeMap> = if use_tta {
            tta_predict_batch(chunk, predictor)?
        } else {
            predictor.predict(chunk)?
        };
        if maps.len() != chunk.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} maps for {} pairs",
                maps.len(),
                chunk.len()
            )));
        }
        for (map, pair) in maps.iter().zip(chunk) {
            cm.accumulate(map.threshold(threshold).view(), pair.label.view())?;
        }
    }
    Ok(cm)
}

pub fn evaluate_predictor(
    predictor: &dyn ChangePredictor,
    data: &[ImagePair],
    use_tta: bool,
    threshold: f32,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    confusion_for(predictor, data, use_tta, threshold)?.compute()
}

/// Evaluates a checkpoint. If `expected` is given, the checkpoint must have
/// been trained with exactly that model configuration.
pub fn evaluate(
    checkpoint_path: &Path,
    test_data: &[ImagePair],
    use_tta: bool,
    threshold: f32,
    expected: Option<&ModelConfig>,
) -> Result<MetricReport> {
    let header = checkpoint::read_header(checkpoint_path)?;
    if let Some(cfg) = expected {
        if header.model.backbone != cfg.backbone {
            return Err(Error::CheckpointIncompatible(format!(
                "checkpoint backbone {:?} does not match the requested {:?}",
                header.model.backbone, cfg.backbone
            )));
        }
        if header.model != *cfg {
            return Err(Error::CheckpointIncompatible(
                "checkpoint model configuration does not match the requested one".into(),
            ));
        }
    }
    let loaded = checkpoint::load(checkpoint_path, DType::F32)?;
    evaluate_predictor(&loaded.model, test_data, use_tta, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub moe: bool,
    pub o2sp: bool,
    pub seed: u64,
    pub best_val_miou: f64,
    pub report: MetricReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let sign = |b: bool| if b { '+' } else { '-' };
        format!("{}MoE {}O2SP", sign(self.moe), sign(self.o2sp))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn find(&self, moe: bool, o2sp: bool) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.moe == moe && r.o2sp == o2sp).collect()
    }

    /// Columns mF1, mPrec, mRec, mIoU in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "seed", "mF1", "mPrec", "mRec", "mIoU"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                r.label(),
                r.seed,
                100.0 * r.report.m_f1,
                100.0 * r.report.m_prec,
                100.0 * r.report.m_rec,
                100.0 * r.report.m_iou
            ));
        }
        s
    }
}

/// The grid order: bare baseline, +O2SP, +MoE, full model.
pub const ABLATION_GRID: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

/// Trains every `{±MoE} × {±O2SP}` variant from the same seed on the same
/// data and scores each best checkpoint on `data.test`.
pub fn run_ablation_grid(base: &TrainConfig, data: &SplitDataset, run_dir: &Path) -> Result<AblationTable> {
    base.validate()?;
    if data.test.is_empty() {
        return Err(Error::Data("ablation needs a nonempty test split".into()));
    }
    let mut table = AblationTable::default();
    for (moe, o2sp) in ABLATION_GRID {
        let cfg = TrainConfig {
            moe_enabled: moe,
            o2sp_enabled: o2sp,
            ..base.clone()
        };
        let dir = run_dir.join(format!(
            "seed{}_{}moe_{}o2sp",
            base.seed,
            if moe { "+" } else { "-" },
            if o2sp { "+" } else { "-" }
        ));
        let state = train(&cfg, &data.train, &data.val, &dir)?;
        let report = evaluate(&state.best_checkpoint_path, &data.test, cfg.test_tta, cfg.threshold, None)?;
        std::fs::write(dir.join("test_metrics.toml"), report.to_key_values()?)?;
        table.rows.push(AblationRow {
            moe,
            o2sp,
            seed: base.seed,
            best_val_miou: state.best_val_miou,
            report,
        });
    }
    Ok(table)
}
