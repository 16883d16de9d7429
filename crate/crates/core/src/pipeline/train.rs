//! Stage-1 codec training and stage-2 adapter training.

use std::collections::BTreeMap;
use std::path::Path;

use diffcore::{AdamW, AdamWConfig, DiffError, ParamSet, SeededRng, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::biasreg::{self, zipf_target};
use crate::codec::{self, Codec, Geometry};
use crate::error::{CoreError, Result};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;
use crate::poincare;
use crate::recognizer::{
    self, answer_loss, attach_lora, build_corpus, build_instruction, verify_base_frozen, BaseLm,
    Instruction, LoraAdapters, PretrainReport,
};
use crate::skeldata::{
    self, load_skeletons, synth_generate, ActionSignal, Protocol, SkeletonDataset, Split,
};

/// Loss components of one stage-1 step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecStepMetrics {
    pub step: usize,
    pub reconstruction: f64,
    pub embed: f64,
    pub commit: f64,
    pub zipf: f64,
    pub context: f64,
    pub mmd: f64,
    /// Sum of the enabled regularizer terms.
    pub human: f64,
    pub total: f64,
}

impl CodecStepMetrics {
    /// The composite loss rebuilt from the logged components.
    pub fn recomposed(&self, omega1: f64, omega2: f64) -> f64 {
        self.reconstruction + self.embed + omega1 * self.commit + omega2 * self.human
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraStepMetrics {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct CodecRun {
    pub codec: Codec,
    pub metrics: Vec<CodecStepMetrics>,
    /// Reconstruction loss over the training set before the first step.
    pub initial_reconstruction: f64,
    pub final_reconstruction: f64,
}

#[derive(Debug, Clone)]
pub struct LoraRun {
    pub adapters: LoraAdapters,
    /// The language model after training; differs from the input only with
    /// all-tuning.
    pub base: BaseLm,
    pub metrics: Vec<LoraStepMetrics>,
    pub base_frozen: bool,
    pub adapter_params: usize,
    pub base_params: usize,
}

/// The configured dataset, normalized if requested.
pub fn load_dataset(cfg: &RunConfig) -> Result<SkeletonDataset> {
    let ds = if cfg.data_source == "synth" {
        synth_generate(&cfg.synth_spec())?
    } else {
        load_skeletons(Path::new(&cfg.data_source))?
    };
    if cfg.normalize {
        ds.normalized()
    } else {
        Ok(ds)
    }
}

pub fn prepare_split(cfg: &RunConfig) -> Result<Split> {
    skeldata::split(&load_dataset(cfg)?, cfg.protocol, cfg.seed)
}

/// Draws equal-length batches, cycling through shuffled per-length queues.
struct Batcher {
    buckets: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
    rng: SeededRng,
}

impl Batcher {
    fn new(samples: &[ActionSignal], rng: SeededRng) -> Self {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_len.entry(s.len()).or_default().push(i);
        }
        let buckets: Vec<Vec<usize>> = by_len.into_values().collect();
        let queues = vec![Vec::new(); buckets.len()];
        Self {
            buckets,
            queues,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let total: usize = self.buckets.iter().map(Vec::len).sum();
        let mut pick = self.rng.below(total);
        let mut k = 0;
        while pick >= self.buckets[k].len() {
            pick -= self.buckets[k].len();
            k += 1;
        }
        let n = size.min(self.buckets[k].len());
        (0..n)
            .map(|_| {
                if self.queues[k].is_empty() {
                    self.queues[k] = self.buckets[k].clone();
                    self.rng.shuffle(&mut self.queues[k]);
                }
                self.queues[k].pop().expect("refilled")
            })
            .collect()
    }
}

/// Mean reconstruction loss of the full autoencoding pass over `samples`.
pub fn reconstruction_loss(codec: &Codec, samples: &[ActionSignal]) -> Result<f64> {
    let mut by_len: BTreeMap<usize, Vec<&ActionSignal>> = BTreeMap::new();
    for s in samples {
        by_len.entry(s.len()).or_default().push(s);
    }
    let mut total = 0.0;
    for group in by_len.values() {
        for chunk in group.chunks(64) {
            let mut tape = Tape::new();
            let bound = codec.params.bind(&mut tape);
            let fw = codec.forward(&mut tape, &bound, chunk)?;
            let l = tape.smooth_l1(fw.target, fw.reconstruction)?;
            total += tape.value(l).item() * chunk.len() as f64;
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Up to `n` distinct rows of `table`, chosen at random.
fn sample_rows(table: &Tensor, n: usize, rng: &mut SeededRng) -> Tensor {
    let mut ids: Vec<usize> = (0..table.rows()).collect();
    rng.shuffle(&mut ids);
    ids.truncate(n.min(table.rows()));
    Tensor::from_rows(
        &ids.iter()
            .map(|&i| table.row(i).to_vec())
            .collect::<Vec<_>>(),
    )
}

fn codec_checkpoint(codec: &Codec, class_names: &[String]) -> Checkpoint {
    let extra = serde_json::json!({
        "pairing": codec.pairing(),
        "class_names": class_names,
    });
    Checkpoint::new("codec", codec.config(), extra, &codec.params)
}

/// Rebuilds a codec from a checkpoint.
pub fn codec_from_checkpoint(ck: &Checkpoint) -> Result<Codec> {
    ck.expect_kind("codec")?;
    let cfg = serde_json::from_value(ck.config.clone())?;
    let mut codec = Codec::new(cfg, &mut SeededRng::new(0))?;
    ck.load_into(&mut codec.params, "")?;
    Ok(codec)
}

pub fn save_codec(codec: &Codec, class_names: &[String], path: &Path) -> Result<()> {
    codec_checkpoint(codec, class_names).save(path)
}

enum StepOutcome {
    Finite(CodecStepMetrics, Vec<Option<Tensor>>),
    NonFinite(String),
}

/// Forward and backward pass of one stage-1 batch.
#[allow(clippy::too_many_arguments)]
fn codec_step(
    cfg: &RunConfig,
    codec: &Codec,
    batch: &[&ActionSignal],
    target: &biasreg::ZipfTarget,
    gumbel: &mut SeededRng,
    lm_rng: &mut SeededRng,
    lm_embeddings: &Tensor,
    step: usize,
) -> Result<StepOutcome> {
    let ccfg = codec.config();
    let ball = ccfg.ball();
    let seq_len = batch[0].len() / codec::COMPRESSION;
    let mut tape = Tape::new();
    let bound = codec.params.bind(&mut tape);
    let fw = codec.forward(&mut tape, &bound, batch)?;
    let vq = codec::vq_losses(
        &mut tape,
        fw.target,
        fw.reconstruction,
        fw.latents,
        fw.discrete,
    )?;
    let usage_dist = if cfg.usage_hyperbolic || ccfg.geometry == Geometry::Euclidean {
        fw.distances
    } else {
        let pts = poincare::exp_map0_rows(&mut tape, fw.latents, &ball)?;
        poincare::euclid_dist_matrix_rows(&mut tape, pts, fw.codebook)?
    };
    let usage = biasreg::soft_usage_graph(
        &mut tape,
        usage_dist,
        batch.len(),
        cfg.tau,
        cfg.gumbel_noise.then_some(gumbel),
    )?;
    let tokens = match ccfg.geometry {
        Geometry::Hyperbolic => poincare::log_map0_rows(&mut tape, fw.codebook, &ball)?,
        Geometry::Euclidean => fw.codebook,
    };
    let lm_sample = tape.constant(sample_rows(lm_embeddings, ccfg.codebook_size, lm_rng));
    let human = biasreg::human_loss(
        &mut tape,
        usage,
        seq_len,
        target,
        tokens,
        lm_sample,
        cfg.term_switches(),
    )?;
    let commit = tape.scale(vq.commit, cfg.omega1);
    let weighted_human = tape.scale(human.total, cfg.omega2);
    let mut total = tape.add(vq.reconstruction, vq.embed)?;
    total = tape.add(total, commit)?;
    total = tape.add(total, weighted_human)?;

    let v = |x| tape.value(x).item();
    let m = CodecStepMetrics {
        step,
        reconstruction: v(vq.reconstruction),
        embed: v(vq.embed),
        commit: v(vq.commit),
        zipf: v(human.zipf),
        context: v(human.context),
        mmd: v(human.mmd),
        human: v(human.total),
        total: v(total),
    };
    if !m.total.is_finite() {
        return Ok(StepOutcome::NonFinite(format!(
            "non-finite stage-1 loss {m:?}"
        )));
    }
    let mut grads = tape.backward(total)?;
    let g = bound.collect(&mut grads);
    Ok(StepOutcome::Finite(m, g))
}

/// Trains encoder, decoder and codebook with the composite objective.
///
/// `lm_embeddings` are the word embeddings the codebook is aligned to.
/// `on_step` sees every logged step. On a non-finite loss the last good
/// codec is written to `divergence_path` (if given) and the run aborts.
pub fn train_codec(
    cfg: &RunConfig,
    train: &SkeletonDataset,
    lm_embeddings: &Tensor,
    divergence_path: Option<&Path>,
    mut on_step: impl FnMut(&CodecStepMetrics),
) -> Result<CodecRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Config("stage 1 needs training samples".into()));
    }
    let joints = train.samples[0].joints();
    let ccfg = cfg.codec_config_for(joints);
    if lm_embeddings.cols() != ccfg.latent_dim {
        return Err(CoreError::Config(format!(
            "word embeddings have width {}, the codec uses {}",
            lm_embeddings.cols(),
            ccfg.latent_dim
        )));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut codec = Codec::new(ccfg.clone(), &mut rng.fork(1))?;
    let mut batcher = Batcher::new(&train.samples, rng.fork(2));
    let mut gumbel = rng.fork(3);
    let mut lm_rng = rng.fork(4);
    let target = zipf_target(ccfg.codebook_size, cfg.zipf_alpha, cfg.zipf_beta)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.codec_lr,
        weight_decay: 0.0,
        clip_norm: (cfg.gradient_clip > 0.0).then_some(cfg.gradient_clip),
        ..Default::default()
    });
    let initial_reconstruction = reconstruction_loss(&codec, &train.samples)?;
    let mut metrics = Vec::new();
    let mut last_good: Option<ParamSet> = None;
    for step in 0..cfg.codec_steps {
        let idx = batcher.next(cfg.batch_size);
        let batch: Vec<&ActionSignal> = idx.iter().map(|&i| &train.samples[i]).collect();
        let outcome = codec_step(
            cfg,
            &codec,
            &batch,
            &target,
            &mut gumbel,
            &mut lm_rng,
            lm_embeddings,
            step,
        );
        let (m, mut g) = match outcome {
            Ok(StepOutcome::Finite(m, g)) => (m, g),
            Ok(StepOutcome::NonFinite(msg)) | Err(CoreError::Diff(DiffError::NonFinite(msg))) => {
                if let Some(p) = divergence_path {
                    let mut good = codec.clone();
                    if let Some(params) = last_good {
                        good.params = params;
                    }
                    save_codec(&good, &train.class_names, p)?;
                }
                return Err(CoreError::Diverged { step, msg });
            }
            Err(e) => return Err(e),
        };
        if divergence_path.is_some() {
            last_good = Some(codec.params.clone());
        }
        if cfg.riemannian_scaling && ccfg.geometry == Geometry::Hyperbolic {
            let book = codec.params.get(codec.codebook_id());
            if let Some(gb) = g[codec.codebook_id().index()].as_mut() {
                for u in 0..book.rows() {
                    let s = (1.0 - ccfg.curvature * poincare::sq_norm(book.row(u))) / 2.0;
                    gb.row_mut(u).iter_mut().for_each(|x| *x *= s * s);
                }
            }
        }
        opt.step(&mut codec.params, &g);
        codec.project_codebook();
        let last = step + 1 == cfg.codec_steps;
        if step == 0 || last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            on_step(&m);
            metrics.push(m);
        }
    }
    let final_reconstruction = reconstruction_loss(&codec, &train.samples)?;
    Ok(CodecRun {
        codec,
        metrics,
        initial_reconstruction,
        final_reconstruction,
    })
}

/// Pre-trains the stand-in language model on a corpus about `class_names`.
pub fn pretrain(cfg: &RunConfig, class_names: &[String]) -> Result<(BaseLm, PretrainReport)> {
    let mut rng = SeededRng::new(cfg.seed).fork(10);
    let corpus = build_corpus(class_names, &cfg.corpus_config(), &mut rng.fork(1))?;
    recognizer::pretrain_base(
        &corpus,
        cfg.lm_config(),
        &cfg.pretrain_settings(),
        &mut rng.fork(2),
    )
}

pub fn save_base(base: &BaseLm, class_names: &[String], path: &Path) -> Result<()> {
    let extra = serde_json::json!({ "vocab": base.vocab.words(), "class_names": class_names });
    Checkpoint::new("base-lm", &base.cfg, extra, &base.params).save(path)
}

fn strings(v: &serde_json::Value, key: &str) -> Result<Vec<String>> {
    serde_json::from_value(v[key].clone())
        .map_err(|e| CoreError::Checkpoint(format!("extra '{key}': {e}")))
}

/// Rebuilds a frozen language model and its class names from a checkpoint.
pub fn base_from_checkpoint(ck: &Checkpoint) -> Result<(BaseLm, Vec<String>)> {
    ck.expect_kind("base-lm")?;
    let cfg = serde_json::from_value(ck.config.clone())?;
    let vocab = recognizer::Vocab::new(strings(&ck.extra, "vocab")?);
    let mut base = BaseLm::new(cfg, vocab, &mut SeededRng::new(0))?;
    ck.load_into(&mut base.params, "")?;
    base.set_frozen(true);
    Ok((base, strings(&ck.extra, "class_names")?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    alpha: f64,
    all_tuning: bool,
    no_discretization: bool,
}

/// Saves adapters; with all-tuning the tuned base tensors are included
/// under a `base.` prefix.
pub fn save_adapters(run: &LoraRun, cfg: &RunConfig, path: &Path) -> Result<()> {
    let meta = AdapterMeta {
        rank: run.adapters.rank,
        alpha: run.adapters.alpha,
        all_tuning: cfg.all_tuning,
        no_discretization: cfg.no_discretization,
    };
    let mut ck = Checkpoint::new(
        "adapters",
        &meta,
        serde_json::Value::Null,
        &run.adapters.params,
    );
    if cfg.all_tuning {
        ck.tensors.extend(
            run.base
                .params
                .iter()
                .map(|(n, t)| (format!("base.{n}"), t.clone())),
        );
    }
    ck.save(path)
}

/// Restores adapters onto `base`, replacing its weights when the
/// checkpoint came from an all-tuning run.
pub fn adapters_from_checkpoint(ck: &Checkpoint, base: &mut BaseLm) -> Result<LoraAdapters> {
    ck.expect_kind("adapters")?;
    let meta: AdapterMeta = serde_json::from_value(ck.config.clone())?;
    let mut lora = attach_lora(base, meta.rank, meta.alpha, &mut SeededRng::new(0))?;
    ck.load_into(&mut lora.params, "")?;
    if meta.all_tuning {
        ck.load_into(&mut base.params, "base.")?;
    }
    Ok(lora)
}

/// The recognizer input for one signal: discrete latents, or the raw
/// encoder features when discretization is disabled.
pub fn recognizer_latents(
    codec: &Codec,
    signal: &ActionSignal,
    no_discretization: bool,
) -> Result<Tensor> {
    if no_discretization {
        Ok(codec.encode(signal)?.features)
    } else {
        Ok(codec.tokenize(signal)?.discrete_latents)
    }
}

/// Word ids of a class name followed by end-of-sequence.
pub fn answer_ids(base: &BaseLm, name: &str) -> Result<Vec<usize>> {
    let mut ids = base.vocab.encode(name)?;
    ids.push(base.vocab.eos());
    Ok(ids)
}

/// Up to three classes from `pool` in random order, always containing
/// `truth`.
pub fn candidate_list(truth: usize, pool: &[usize], rng: &mut SeededRng) -> Vec<usize> {
    let mut others: Vec<usize> = pool.iter().copied().filter(|&c| c != truth).collect();
    rng.shuffle(&mut others);
    others.truncate(skeldata::UNSEEN_CLASS_COUNT - 1);
    others.push(truth);
    rng.shuffle(&mut others);
    others
}

/// Trains adapters (and, with all-tuning, the base itself) to name the
/// action of each training sample.
pub fn train_lora(
    cfg: &RunConfig,
    codec: &Codec,
    base: &BaseLm,
    train: &SkeletonDataset,
    mut on_step: impl FnMut(&LoraStepMetrics),
) -> Result<LoraRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Config("stage 2 needs training samples".into()));
    }
    let mut rng = SeededRng::new(cfg.seed).fork(20);
    let mut base = base.clone();
    let snapshot: ParamSet = base.params.clone();
    base.set_frozen(!cfg.all_tuning);
    let mut adapters = attach_lora(&base, cfg.lora_rank, cfg.lora_alpha, &mut rng.fork(1))?;
    let latents: Vec<Tensor> = train
        .samples
        .iter()
        .map(|s| recognizer_latents(codec, s, cfg.no_discretization))
        .collect::<Result<_>>()?;
    let labels = train.labels();
    let answers: Vec<Vec<usize>> = labels
        .iter()
        .map(|&k| answer_ids(&base, &train.class_names[k]))
        .collect::<Result<_>>()?;
    let seen: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let with_list = cfg.protocol == Protocol::UnseenClass;
    let opt_cfg = AdamWConfig {
        lr: cfg.lora_lr,
        weight_decay: 0.0,
        clip_norm: Some(1.0),
        ..Default::default()
    };
    let mut opt = AdamW::new(opt_cfg);
    let mut base_opt = AdamW::new(opt_cfg);
    let mut order_rng = rng.fork(2);
    let mut list_rng = rng.fork(3);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::new();
    for step in 0..cfg.lora_steps {
        let mut instructions: Vec<Instruction> = Vec::with_capacity(cfg.lora_batch);
        let mut batch_answers = Vec::with_capacity(cfg.lora_batch);
        for _ in 0..cfg.lora_batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order_rng.shuffle(&mut order);
            }
            let i = order.pop().expect("refilled");
            let list: Vec<String> = if with_list {
                candidate_list(labels[i], &seen, &mut list_rng)
                    .into_iter()
                    .map(|k| train.class_names[k].clone())
                    .collect()
            } else {
                Vec::new()
            };
            instructions.push(build_instruction(
                &latents[i],
                &base,
                &cfg.template,
                &cfg.list_template,
                &list,
            )?);
            batch_answers.push(answers[i].clone());
        }
        let mut tape = Tape::new();
        let bb = base.params.bind(&mut tape);
        let lb = adapters.params.bind(&mut tape);
        let loss = answer_loss(
            &mut tape,
            &base,
            &bb,
            Some((&adapters, &lb)),
            &instructions,
            &batch_answers,
        )?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(CoreError::Diverged {
                step,
                msg: "non-finite stage-2 loss".into(),
            });
        }
        let mut grads = tape.backward(loss)?;
        let g = lb.collect(&mut grads);
        opt.step(&mut adapters.params, &g);
        if cfg.all_tuning {
            let gb = bb.collect(&mut grads);
            base_opt.step(&mut base.params, &gb);
        }
        let m = LoraStepMetrics { step, loss: lv };
        if step == 0
            || step + 1 == cfg.lora_steps
            || (cfg.log_every > 0 && step % cfg.log_every == 0)
        {
            on_step(&m);
            metrics.push(m);
        }
    }
    base.set_frozen(true);
    let base_frozen = verify_base_frozen(&base, &snapshot);
    if !base_frozen && !cfg.all_tuning {
        return Err(CoreError::FrozenViolation(
            "base weights changed during adapter-only training".into(),
        ));
    }
    Ok(LoraRun {
        adapter_params: adapters.param_count(),
        base_params: base.param_count(),
        adapters,
        base,
        metrics,
        base_frozen,
    })
}
