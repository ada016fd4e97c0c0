use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Fwd, Model, ModelConfig, TrainNoise};
use crate::policy::EncoderMode;
use crate::tensor::Tape;

use super::data::{Dataset, PairedExample, SyntheticTaskSpec};
use super::evaluate::{evaluate_quality, Branch};
use super::loss::{joint_loss, LossTerms, LossWeights, TermMask};
use super::optim::{clip_grad_norm, Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub name: String,
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub weights: LossWeights,
    pub optim: AdamConfig,
    /// Target tokens per batch (whole examples are added until reached).
    pub batch_tokens: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    /// Latency weights for the finetuning phase; each yields one
    /// checkpoint.
    pub lambdas: Vec<f64>,
    pub eval_every: usize,
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            name: "dar".into(),
            model: ModelConfig::default(),
            task: SyntheticTaskSpec::default(),
            weights: LossWeights::full(),
            optim: AdamConfig::default(),
            batch_tokens: 120,
            phase1_steps: 3000,
            phase2_steps: 1000,
            lambdas: vec![],
            eval_every: 500,
            eval_examples: 50,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Settings of the desk-scale pair-swap experiment: a 32-wide model,
    /// noisy monotonic energies, a higher peak learning rate and one
    /// latency finetune at λ = 0.05.
    pub fn desk(name: &str, weights: LossWeights, seed: u64) -> Self {
        TrainConfig {
            name: name.to_string(),
            model: ModelConfig {
                embed_dim: 32,
                ffn_dim: 64,
                dropout: 0.0,
                energy_init_bias: 0.0,
                energy_noise: 2.0,
                ..ModelConfig::default()
            },
            weights,
            optim: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            lambdas: vec![0.05],
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.weights.validate()?;
        if self.batch_tokens == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_tokens and eval_every must be positive".into()));
        }
        if self.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("finetuning lambdas must be positive".into()));
        }
        if self.task.src_vocab > self.model.vocab_src
            || self.task.tgt_vocab > self.model.vocab_tgt
            || self.task.feat_dim != self.model.feat_dim
        {
            return Err(Error::Config("model vocabularies or feat_dim do not fit the task".into()));
        }
        Ok(())
    }

    /// Checkpoint file name for a latency weight.
    pub fn checkpoint_name(&self, lambda: f64) -> String {
        format!("{}-lambda{}.json", self.name, lambda)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: usize,
    pub step: usize,
    pub seed: u64,
    pub lambda: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: f64,
    pub terms: LossTerms,
    pub dev_token_accuracy: f64,
    pub dev_bleu: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LogRecord>,
}

fn param_offsets(model: &Model) -> Vec<usize> {
    let mut acc = 0;
    model
        .params
        .tensors()
        .iter()
        .map(|t| {
            let o = acc;
            acc += t.numel();
            o
        })
        .collect()
}

/// Loss terms and the flat gradient of one example's joint loss.
pub fn example_gradient(
    model: &Model,
    ex: &PairedExample,
    weights: &LossWeights,
    noise_rng: Option<ChaCha8Rng>,
) -> Result<(f64, LossTerms, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let mut noise = noise_rng.map(|rng| TrainNoise {
        rng,
        dropout: model.cfg.dropout,
        energy_noise: model.cfg.energy_noise,
    });
    let mut f = Fwd {
        t: &mut tape,
        p: &p,
        noise: noise.as_mut(),
        heads: model.cfg.heads,
    };
    let jl = joint_loss(&mut f, model, ex, weights, TermMask::default())?;
    let total = tape.item(jl.total);
    tape.backward(jl.total)?;
    let offsets = param_offsets(model);
    let mut g = vec![0.0; model.params.numel()];
    for (id, grad) in tape.param_grads() {
        g[offsets[id]..offsets[id] + grad.len()].copy_from_slice(grad);
    }
    Ok((total, jl.terms, g))
}

fn sample_batch(rng: &mut ChaCha8Rng, train: &[PairedExample], tokens: usize) -> Vec<usize> {
    let mut batch = Vec::new();
    let mut n = 0;
    while n < tokens {
        let i = rng.gen_range(0..train.len());
        n += train[i].target.len() + 1;
        batch.push(i);
    }
    batch
}

/// Runs one optimization phase in place. Checkpoints are written to
/// `checkpoint` at each evaluation so a divergence leaves the last good
/// state on disk.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    weights: &LossWeights,
    phase: usize,
    steps: usize,
    checkpoint: &Path,
    log: &mut dyn Write,
) -> Result<Vec<LogRecord>> {
    if data.train.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    let stream = (phase as u64) << 40;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(stream);
    let mut opt = Adam::new(cfg.optim, model.params.numel());
    let mut records = Vec::new();
    let mut acc_terms = LossTerms::default();
    let (mut acc_loss, mut acc_norm, mut acc_n) = (0.0, 0.0, 0usize);
    let meta = |step: usize| CheckpointMeta {
        name: cfg.name.clone(),
        lambda: weights.lambda,
        seed: cfg.seed,
        step,
        task_hash: data.spec.hash(),
    };
    for step in 1..=steps {
        let batch = sample_batch(&mut batch_rng, &data.train, cfg.batch_tokens);
        let frozen: &Model = model;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream | ((step as u64) << 12) | k as u64);
                example_gradient(frozen, &data.train[i], weights, Some(rng))
            })
            .collect::<Vec<_>>();
        let mut g = vec![0.0; model.params.numel()];
        let mut step_loss = 0.0;
        let n = results.len() as f64;
        for r in results {
            let (loss, terms, eg) = r?;
            step_loss += loss / n;
            let mut t = terms;
            t.scale(1.0 / n);
            acc_terms.add(&t);
            g.iter_mut().zip(&eg).for_each(|(a, b)| *a += b / n);
        }
        if !step_loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("total"));
        }
        let norm = clip_grad_norm(&mut g, cfg.optim.clip_norm);
        let lr = opt.update(model.params.tensors_mut(), &g);
        acc_loss += step_loss;
        acc_norm += norm;
        acc_n += 1;

        if step % cfg.eval_every == 0 || step == steps {
            let dev = &data.dev[..cfg.eval_examples.min(data.dev.len())];
            let eval = evaluate_quality(model, dev, None, EncoderMode::CausalIncremental, Branch::Speech)?;
            let k = acc_n as f64;
            acc_terms.scale(1.0 / k);
            let rec = LogRecord {
                phase,
                step,
                seed: cfg.seed,
                lambda: weights.lambda,
                lr,
                grad_norm: acc_norm / k,
                loss: acc_loss / k,
                terms: acc_terms,
                dev_token_accuracy: eval.report.token_accuracy,
                dev_bleu: eval.report.bleu,
            };
            log::info!(
                "phase {phase} step {step}: loss {:.4} dev acc {:.3} bleu {:.2}",
                rec.loss,
                rec.dev_token_accuracy,
                rec.dev_bleu
            );
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            records.push(rec);
            save_checkpoint(checkpoint, model, meta(step))?;
            acc_terms = LossTerms::default();
            acc_loss = 0.0;
            acc_norm = 0.0;
            acc_n = 0;
        }
    }
    if steps == 0 {
        save_checkpoint(checkpoint, model, meta(0))?;
    }
    Ok(records)
}

/// Phase 1 at λ = 0, then one latency finetuning run per configured λ,
/// each starting from the saved phase-1 checkpoint. Writes checkpoints and
/// `<name>-log.jsonl` under `out`.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut log_file = BufWriter::new(File::create(out.join(format!("{}-log.jsonl", cfg.name)))?);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let base_weights = cfg.weights.with_lambda(0.0);
    let base_path = out.join(cfg.checkpoint_name(0.0));
    let mut log = train_phase(&mut model, data, cfg, &base_weights, 1, cfg.phase1_steps, &base_path, &mut log_file)?;
    let mut checkpoints = vec![base_path.clone()];
    for (k, &lambda) in cfg.lambdas.iter().enumerate() {
        let (mut tuned, _) = load_checkpoint(&base_path)?;
        let path = out.join(cfg.checkpoint_name(lambda));
        let w = cfg.weights.with_lambda(lambda);
        log.extend(train_phase(&mut tuned, data, cfg, &w, 2 + k, cfg.phase2_steps, &path, &mut log_file)?);
        checkpoints.push(path);
        model = tuned;
    }
    log_file.flush()?;
    Ok(TrainOutcome {
        model,
        checkpoints,
        log,
    })
}
