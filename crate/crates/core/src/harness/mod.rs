//! Training/evaluation harness: run configuration, the training loop, the
//! evaluation reports, the gradient-check suite, and the CLI front end.

pub mod checks;
pub mod cli;
pub mod evals;
pub mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kvfile::{self, KvEntry, KvError, KvWriter};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, ModelError};
use crate::tensor::OptimConfig;

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("{file}: {source}")]
    Config {
        file: String,
        #[source]
        source: KvError,
    },
    #[error("invalid run configuration: {0}")]
    BadRun(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::CheckpointError),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss in epoch {epoch}, batch {batch} (sample {sample}): training aborted")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sample: String,
    },
    #[error("dataset vocabulary size {data} does not match the model's {model}")]
    VocabMismatch { data: usize, model: usize },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Everything one run needs; assembled from defaults, an optional config
/// file, then CLI overrides (later wins).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of temporal-scale jitter per training sample per epoch.
    pub jitter_prob: f64,
    /// Maximum relative temporal stretch/shrink of the jitter.
    pub jitter_scale: f64,
    /// Stop once dev WER reaches this value (checked after each epoch).
    pub stop_wer: Option<f64>,
    /// Worker threads; 0 picks from the machine (results are identical
    /// regardless).
    pub threads: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 30,
            lr_milestones: vec![15, 24],
            lr_factor: 0.3,
            batch_size: 2,
            seed: 1,
            jitter_prob: 0.2,
            jitter_scale: 0.2,
            stop_wer: None,
            threads: 0,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Learning rate in effect at a 1-based epoch: the base rate scaled by
    /// the factor once per milestone already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.optim.lr * self.lr_factor.powi(hits as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::BadRun(m));
        self.model.validate()?;
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return fail("lr_milestones must be strictly increasing".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return fail("lr_factor must lie in (0, 1]".into());
        }
        if self.loss.gamma1 < 0.0 || self.loss.gamma2 < 0.0 {
            return fail("gamma1 and gamma2 must be nonnegative".into());
        }
        if self.loss.tau <= 0.0 {
            return fail("tau must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.jitter_prob) || !(0.0..1.0).contains(&self.jitter_scale) {
            return fail("jitter_prob in [0,1] and jitter_scale in [0,1) required".into());
        }
        Ok(())
    }

    /// Apply one key; unknown keys are reported, never ignored.
    pub fn apply_entry(&mut self, e: &KvEntry) -> std::result::Result<(), KvError> {
        if self.model.apply_entry(e)? {
            return Ok(());
        }
        match e.key.as_str() {
            "gamma1" => self.loss.gamma1 = kvfile::parse_f64(e)?,
            "gamma2" => self.loss.gamma2 = kvfile::parse_f64(e)?,
            "tau" => self.loss.tau = kvfile::parse_f64(e)?,
            "lr" => self.optim.lr = kvfile::parse_f64(e)?,
            "beta1" => self.optim.beta1 = kvfile::parse_f64(e)?,
            "beta2" => self.optim.beta2 = kvfile::parse_f64(e)?,
            "eps" => self.optim.eps = kvfile::parse_f64(e)?,
            "weight_decay" => self.optim.weight_decay = kvfile::parse_f64(e)?,
            "epochs" => self.epochs = kvfile::parse_usize(e)?,
            "lr_milestones" => self.lr_milestones = kvfile::parse_usize_list(e)?,
            "lr_factor" => self.lr_factor = kvfile::parse_f64(e)?,
            "batch_size" => self.batch_size = kvfile::parse_usize(e)?,
            "seed" => self.seed = kvfile::parse_u64(e)?,
            "jitter_prob" => self.jitter_prob = kvfile::parse_f64(e)?,
            "jitter_scale" => self.jitter_scale = kvfile::parse_f64(e)?,
            "stop_wer" => {
                self.stop_wer = if e.value == "none" {
                    None
                } else {
                    Some(kvfile::parse_f64(e)?)
                }
            }
            "threads" => self.threads = kvfile::parse_usize(e)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(&e.value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(&e.value)),
            _ => {
                return Err(KvError::UnknownKey {
                    key: e.key.clone(),
                    line: e.line,
                })
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.comment("effective run configuration");
        self.model.write_kv(w);
        w.put("gamma1", self.loss.gamma1)
            .put("gamma2", self.loss.gamma2)
            .put("tau", self.loss.tau)
            .put("lr", self.optim.lr)
            .put("beta1", self.optim.beta1)
            .put("beta2", self.optim.beta2)
            .put("eps", self.optim.eps)
            .put("weight_decay", self.optim.weight_decay)
            .put("epochs", self.epochs)
            .put_list("lr_milestones", &self.lr_milestones)
            .put("lr_factor", self.lr_factor)
            .put("batch_size", self.batch_size)
            .put("seed", self.seed)
            .put("jitter_prob", self.jitter_prob)
            .put("jitter_scale", self.jitter_scale)
            .put(
                "stop_wer",
                self.stop_wer
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "none".into()),
            )
            .put("threads", self.threads);
        if let Some(d) = &self.data_dir {
            w.put("data_dir", d.display());
        }
        if let Some(d) = &self.out_dir {
            w.put("out_dir", d.display());
        }
    }
}

/// Defaults, then file values, then CLI overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let entries = kvfile::parse(&text).map_err(|e| HarnessError::Config {
            file: p.display().to_string(),
            source: e,
        })?;
        for entry in entries {
            cfg.apply_entry(&entry).map_err(|e| HarnessError::Config {
                file: p.display().to_string(),
                source: e,
            })?;
        }
    }
    for (key, value) in overrides {
        let entry = KvEntry {
            line: 0,
            key: key.clone(),
            value: value.clone(),
        };
        cfg.apply_entry(&entry).map_err(|e| HarnessError::Config {
            file: "<command line>".to_string(),
            source: e,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Forward one video and attach the combined objective.
pub fn total_loss_of<F: crate::tensor::Scalar>(
    model: &crate::model::Model<F>,
    s: &mut crate::tensor::Session<'_, F>,
    video: &crate::tensor::TensorData<F>,
    target: &crate::loss::GlossSequence,
    cfg: &LossConfig,
) -> Result<crate::tensor::Var> {
    let out = model.forward(s, video)?;
    Ok(crate::loss::total_loss(
        &mut s.graph,
        out.logits_local1,
        out.logits_local2,
        out.logits_global,
        target,
        cfg,
    )?)
}

/// Number of worker threads to use for a given configured value.
pub(crate) fn thread_count(configured: usize, work_items: usize) -> usize {
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let n = if configured == 0 {
        avail.min(8)
    } else {
        configured
    };
    n.clamp(1, work_items.max(1))
}

/// Map `f` over items on `threads` workers; output order matches input
/// order, so results are identical no matter the thread count.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ref = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots_ref.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}
