//! Loss assembly, Adam, the pre-training and adaptation loops, and
//! evaluation reports.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align;
use crate::config::{AdaptConfig, LossWeights, ModelConfig, PeftConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::metrics;
use crate::model::{
    self, Fwd, Model, ModelMeta, Synthesis, ADAPTED_REFERENCE_MEL, MIX_LOGITS,
};
use crate::params::{ParamSet, TensorKind, TrainableSet};
use crate::peft::{self, Delta, DeltaMeta};
use crate::speaker::{self, Se2Mode, SpeakerSource};
use crate::synth::{Corpus, CorpusSpeaker, SpeakerRole, Utterance};
use crate::tensor::{Mat, Scalar};

/// Mean-squared-error node between two same-shape nodes.
fn mse_node<T: Scalar>(f: &mut Fwd<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = f.graph.sub(a, b);
    let sq = f.graph.mul(d, d);
    f.graph.mean_all(sq)
}

/// Combined loss over given tensors:
/// `‖ŷ−y‖² + α‖p̂−p‖² + β‖d̂−log d‖² + γ·L_align`, every MSE a mean over
/// elements. The training graph assembles the same algebra node by node.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    mel_hat: &Mat<T>,
    mel: &Mat<T>,
    pitch_hat: &[T],
    pitch: &[T],
    dur_hat_log: &[T],
    dur_log: &[T],
    align_matrix: Option<&Mat<T>>,
    w: &LossWeights,
) -> Result<f64> {
    if mel_hat.shape() != mel.shape() {
        return Err(Error::Input(format!(
            "mel shapes differ: {:?} vs {:?}",
            mel_hat.shape(),
            mel.shape()
        )));
    }
    if pitch_hat.len() != pitch.len() || dur_hat_log.len() != dur_log.len() {
        return Err(Error::Input("per-token target lengths differ".into()));
    }
    let mut loss = metrics::mse(mel_hat.as_slice(), mel.as_slice())
        + w.alpha * metrics::mse(pitch_hat, pitch)
        + w.beta * metrics::mse(dur_hat_log, dur_log);
    if w.gamma > 0.0 {
        let m = align_matrix
            .ok_or_else(|| Error::Input("gamma > 0 requires an alignment matrix".into()))?;
        loss += w.gamma * align::forward_sum_loss(m)?.as_f64();
    }
    Ok(loss)
}

/// Pieces of one training-mode forward pass.
pub struct TrainForward<T: Scalar> {
    pub loss: NodeId,
    pub mel_mse: f64,
    pub pitch_mse: f64,
    pub dur_mse: f64,
    pub align_loss: Option<f64>,
    pub predicted_pitch: Vec<T>,
    pub predicted_log_dur: Vec<T>,
}

/// Speaker conditioning used by a training pass.
pub enum TrainSpeaker<'a, T: Scalar> {
    /// Pretraining: table row + style embedding of the utterance's own mel.
    Table(usize),
    /// Adaptation: weighted-mean SE₁ + SE₂ from the stored reference
    /// (possibly precomputed while the reference encoder is frozen).
    Adapted(Option<&'a Mat<T>>),
}

/// Teacher-forced training pass over one utterance:
/// `L = ‖ŷ−y‖² + α‖p̂−p‖² + β‖d̂−log d‖² + γ·L_align`.
pub fn training_forward<'m, T: Scalar>(
    f: &mut Fwd<'m, T>,
    utt: &Utterance<T>,
    spk: &TrainSpeaker<'_, T>,
    weights: &LossWeights,
    with_align: bool,
) -> Result<TrainForward<T>> {
    let stats = f.model.meta.pitch_stats;
    let spk_node = match spk {
        TrainSpeaker::Table(id) => {
            speaker::speaker_embedding_with(f, &SpeakerSource::Pretrained(*id), Se2Mode::Own(&utt.mel))?
        }
        TrainSpeaker::Adapted(Some(se2)) => {
            speaker::speaker_embedding_with(f, &SpeakerSource::Adapted, Se2Mode::Precomputed(se2))?
        }
        TrainSpeaker::Adapted(None) => {
            speaker::speaker_embedding_with(f, &SpeakerSource::Adapted, Se2Mode::Stored)?
        }
    };

    let h = model::encode(f, &utt.tokens, spk_node)?;
    let pitch_hat = model::predict_pitch(f, h, spk_node);
    let dur_hat = model::predict_duration(f, h, spk_node);

    let pitch_norm = stats.normalize(&utt.pitch);
    let pitch_target = f.konst(Mat::col_vec(&pitch_norm));
    let log_dur: Vec<T> = utt
        .durations
        .iter()
        .map(|&d| T::from_f64((d as f64).ln()))
        .collect();
    let dur_target = f.konst(Mat::col_vec(&log_dur));

    // decoder runs teacher-forced on ground-truth pitch and durations
    let pe = model::pitch_embed(f, pitch_target);
    let hp = f.graph.add(h, pe);
    let up = model::length_regulate(f, hp, &utt.durations)?;
    let mel_hat = model::decode(f, up, spk_node)?;
    let mel_target = f.konst(utt.mel.clone());

    let mel_mse = mse_node(f, mel_hat, mel_target);
    let pitch_mse = mse_node(f, pitch_hat, pitch_target);
    let dur_mse = mse_node(f, dur_hat, dur_target);

    let alpha = T::from_f64(weights.alpha);
    let beta = T::from_f64(weights.beta);
    let mut loss = mel_mse;
    {
        let term = f.graph.scale(pitch_mse, alpha);
        loss = f.graph.add(loss, term);
        let term = f.graph.scale(dur_mse, beta);
        loss = f.graph.add(loss, term);
    }

    let mut align_value = None;
    if with_align && weights.gamma > 0.0 {
        let log_probs = model::aligner_log_probs(f, &utt.mel, &utt.tokens, spk_node)?;
        let prior = align::beta_binomial_prior(
            utt.mel.rows(),
            utt.tokens.len(),
            f.model.cfg.prior_omega,
        )?;
        let prior_node = f.konst(prior.cast::<T>());
        let with_prior = f.graph.add(log_probs, prior_node);
        let fs = f.graph.forward_sum(with_prior);
        align_value = Some(f.graph.val(fs).get(0, 0).as_f64());
        let term = f.graph.scale(fs, T::from_f64(weights.gamma));
        loss = f.graph.add(loss, term);
    }

    Ok(TrainForward {
        loss,
        mel_mse: f.graph.val(mel_mse).get(0, 0).as_f64(),
        pitch_mse: f.graph.val(pitch_mse).get(0, 0).as_f64(),
        dur_mse: f.graph.val(dur_mse).get(0, 0).as_f64(),
        align_loss: align_value,
        predicted_pitch: f.graph.val(pitch_hat).as_slice().to_vec(),
        predicted_log_dur: f.graph.val(dur_hat).as_slice().to_vec(),
    })
}

/// Adam with bias correction over the trainable subset only; every other
/// tensor is untouched bit-exactly.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Mat<T>, Mat<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, trainable: &TrainableSet, params: &ParamSet<T>) -> Self {
        let mut moments = BTreeMap::new();
        for name in trainable.iter() {
            if let Ok(p) = params.get(name) {
                let (r, c) = p.shape();
                moments.insert(name.clone(), (Mat::zeros(r, c), Mat::zeros(r, c)));
            }
        }
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            moments,
        }
    }

    /// Apply one update. Gradients for non-trainable names are ignored;
    /// missing gradients for trainable names count as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Mat<T>>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, (m, v)) in self.moments.iter_mut() {
            let p = params.get_mut(name).expect("trainable tensor exists");
            let g = grads.get(name);
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    let gv = g.map(|g| g.get(i, j).as_f64()).unwrap_or(0.0);
                    let mv = self.beta1 * m.get(i, j).as_f64() + (1.0 - self.beta1) * gv;
                    let vv = self.beta2 * v.get(i, j).as_f64() + (1.0 - self.beta2) * gv * gv;
                    m.set(i, j, T::from_f64(mv));
                    v.set(i, j, T::from_f64(vv));
                    let m_hat = mv / bc1;
                    let v_hat = vv / bc2;
                    let upd = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    p.set(i, j, T::from_f64(p.get(i, j).as_f64() - upd));
                }
            }
        }
    }
}

/// Loss curve plus wall time for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub loss_curve: Vec<f64>,
    pub wall_ms: u64,
}

impl TrainRun {
    /// Trailing-window mean must undercut the leading-window mean.
    pub fn loss_decreased(&self) -> bool {
        let n = self.loss_curve.len();
        if n < 2 {
            return false;
        }
        let w = 100.min(n / 2).max(1);
        let head: f64 = self.loss_curve[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = self.loss_curve[n - w..].iter().sum::<f64>() / w as f64;
        tail < head
    }
}

fn accumulate_grads<T: Scalar>(
    total: &mut BTreeMap<String, Mat<T>>,
    part: BTreeMap<String, Mat<T>>,
) {
    for (name, g) in part {
        match total.get_mut(&name) {
            Some(t) => t.add_assign(&g),
            None => {
                total.insert(name, g);
            }
        }
    }
}

fn scale_grads<T: Scalar>(grads: &mut BTreeMap<String, Mat<T>>, s: f64) {
    for g in grads.values_mut() {
        g.scale_assign(T::from_f64(s));
    }
}

/// Pre-train every parameter (model, speaker table, style encoder, aligner)
/// on a corpus' train split.
pub fn pretrain<T: Scalar>(
    corpus: &Corpus<T>,
    cfg: &ModelConfig,
    opts: &PretrainConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<(Model<T>, TrainRun)> {
    let start = Instant::now();
    let n_speakers = corpus
        .speakers
        .iter()
        .filter(|s| s.role == SpeakerRole::Pretrain)
        .count();
    if n_speakers == 0 {
        return Err(Error::Input("corpus has no pretraining speakers".into()));
    }
    let mut model = Model::new(cfg.clone(), n_speakers, seed)?;
    model.meta = ModelMeta {
        pitch_stats: corpus.stats,
        speaker_seeds: corpus
            .speakers
            .iter()
            .filter(|s| s.role == SpeakerRole::Pretrain)
            .map(|s| s.latent.seed)
            .collect(),
        template_seed: corpus.template_seed,
    };

    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (si, sp) in corpus.speakers.iter().enumerate() {
        if sp.role == SpeakerRole::Pretrain {
            for ui in 0..sp.train.len() {
                samples.push((si, ui));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Input("corpus train split is empty".into()));
    }

    let trainable = TrainableSet::from_names(model.params.param_names().cloned());
    let mut adam = Adam::new(opts.lr, &trainable, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_4654_5052_4554);
    let mut curve = Vec::new();

    for _epoch in 0..opts.epochs {
        let mut order = samples.clone();
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(opts.batch_size) {
            let mut grads: BTreeMap<String, Mat<T>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &(si, ui) in batch {
                // table index among pretrain speakers == corpus index here
                let utt = &corpus.speakers[si].train[ui];
                let mut f = Fwd::training(&model, rng.random());
                let out = training_forward(&mut f, utt, &TrainSpeaker::Table(si), weights, opts.align_loss)?;
                batch_loss += f.graph.val(out.loss).get(0, 0).as_f64();
                let g = f.graph.backward(out.loss);
                accumulate_grads(&mut grads, f.grad_map(&g));
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads);
            curve.push(batch_loss / batch.len() as f64);
        }
    }

    // store a fixed reference utterance per speaker for inference
    for (si, sp) in corpus.speakers.iter().enumerate() {
        if sp.role == SpeakerRole::Pretrain {
            model.set_reference_mel(si, sp.train[0].mel.clone());
        }
    }

    Ok((
        model,
        TrainRun {
            loss_curve: curve,
            wall_ms: start.elapsed().as_millis() as u64,
        },
    ))
}

fn shuffle<R: Rng>(items: &mut [(usize, usize)], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Adapt a frozen base to one new speaker: inject the strategy's tensors,
/// train only the trainable subset, and return the adapted view. The base
/// model is never mutated.
pub fn adapt<T: Scalar>(
    base: &Model<T>,
    peft_cfg: &PeftConfig,
    data: &CorpusSpeaker<T>,
    opts: &AdaptConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<(Model<T>, TrainableSet, TrainRun)> {
    let start = Instant::now();
    if data.adapt.is_empty() {
        return Err(Error::Input("empty adaptation set".into()));
    }
    if base.meta.speaker_seeds.contains(&data.latent.seed) {
        return Err(Error::Input(format!(
            "speaker seed {} is already in the base table",
            data.latent.seed
        )));
    }
    peft_cfg.validate()?;

    let mut work = base.clone();
    work.peft = peft_cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_4654_4144_4150);
    peft::init_peft_tensors(&mut work, &mut rng)?;
    work.params.overlay(
        MIX_LOGITS,
        Mat::zeros(1, base.n_speakers()),
        TensorKind::Parameter,
    );
    work.params.overlay(
        ADAPTED_REFERENCE_MEL,
        data.adapt[0].mel.clone(),
        TensorKind::Buffer,
    );

    let trainable = peft::build_trainable_set(peft_cfg, &work)?;

    // with the reference encoder frozen, SE₂ of the fixed reference is a
    // constant across steps
    let gst_trains = trainable.iter().any(|n| n.starts_with("gst."));
    let se2_const = if gst_trains {
        None
    } else {
        let mut f = Fwd::new(&work);
        let ref_mel = work.params.get(ADAPTED_REFERENCE_MEL)?.clone();
        let se2 = speaker::gst_encode(&mut f, &ref_mel)?;
        Some(f.graph.val(se2).clone())
    };

    let mut adam = Adam::new(opts.lr, &trainable, &work.params);
    let mut curve = Vec::new();
    let use_viterbi = opts.viterbi_durations;
    let mut adapt_data: Vec<Utterance<T>> = data.adapt.clone();
    if use_viterbi {
        adapt_data = relabel_durations(&work, &adapt_data)?;
    }

    for _step in 0..opts.steps {
        let mut grads: BTreeMap<String, Mat<T>> = BTreeMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..opts.batch_size {
            let ui = rng.random_range(0..adapt_data.len());
            let utt = &adapt_data[ui];
            let mut f = Fwd::training(&work, rng.random());
            let spk = TrainSpeaker::Adapted(se2_const.as_ref());
            let out = training_forward(&mut f, utt, &spk, weights, opts.align_loss)?;
            batch_loss += f.graph.val(out.loss).get(0, 0).as_f64();
            let g = f.graph.backward(out.loss);
            accumulate_grads(&mut grads, f.grad_map(&g));
        }
        scale_grads(&mut grads, 1.0 / opts.batch_size as f64);
        adam.step(&mut work.params, &grads);
        curve.push(batch_loss / opts.batch_size as f64);
    }

    Ok((
        work,
        trainable,
        TrainRun {
            loss_curve: curve,
            wall_ms: start.elapsed().as_millis() as u64,
        },
    ))
}

/// Replace corpus durations with Viterbi durations from the aligner.
fn relabel_durations<T: Scalar>(
    model: &Model<T>,
    utterances: &[Utterance<T>],
) -> Result<Vec<Utterance<T>>> {
    let mut out = Vec::with_capacity(utterances.len());
    for utt in utterances {
        let mut f = Fwd::new(model);
        let spk = speaker::speaker_embedding_with(&mut f, &SpeakerSource::Adapted, Se2Mode::Stored)?;
        let lp = model::aligner_log_probs(&mut f, &utt.mel, &utt.tokens, spk)?;
        let prior = align::beta_binomial_prior(utt.mel.rows(), utt.tokens.len(), model.cfg.prior_omega)?;
        let prior_node = f.konst(prior.cast::<T>());
        let m = f.graph.add(lp, prior_node);
        let durations = align::viterbi_durations(f.graph.val(m))?;
        let mut relabeled = utt.clone();
        relabeled.durations = durations;
        out.push(relabeled);
    }
    Ok(out)
}

/// Export the per-speaker delta of an adapted model.
pub fn export_adapted_delta<T: Scalar>(
    adapted: &Model<T>,
    trainable: &TrainableSet,
    speaker_seed: u64,
    steps: usize,
) -> Result<Delta<T>> {
    peft::export_delta(
        adapted,
        trainable,
        DeltaMeta {
            speaker_seed,
            steps,
        },
    )
}

/// Per-speaker metric block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerEval {
    pub speaker_seed: u64,
    pub secs: f64,
    pub cfsd: f64,
    pub mse_p: f64,
    pub mse_d: f64,
    pub mel_mse: f64,
}

/// Evaluation and adaptation report. `wall_ms` is the only field that is
/// not a pure function of (seed, inputs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub secs: f64,
    pub cfsd: f64,
    pub mse_p: f64,
    pub mse_d: f64,
    pub mel_mse: f64,
    pub params_total: usize,
    pub params_trainable: usize,
    pub steps: usize,
    pub wall_ms: u64,
    pub per_speaker: Vec<SpeakerEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<Vec<f64>>,
}

impl EvalReport {
    /// Aggregate per-speaker entries; every top-level metric is the mean of
    /// the corresponding per-speaker values.
    pub fn from_speakers(per_speaker: Vec<SpeakerEval>) -> EvalReport {
        let n = per_speaker.len().max(1) as f64;
        let mean = |f: &dyn Fn(&SpeakerEval) -> f64| per_speaker.iter().map(f).sum::<f64>() / n;
        EvalReport {
            secs: mean(&|s| s.secs),
            cfsd: mean(&|s| s.cfsd),
            mse_p: mean(&|s| s.mse_p),
            mse_d: mean(&|s| s.mse_d),
            mel_mse: mean(&|s| s.mel_mse),
            params_total: 0,
            params_trainable: 0,
            steps: 0,
            wall_ms: 0,
            per_speaker,
            loss_curve: None,
        }
    }
}

/// Evaluate one speaker's held-out utterances: teacher-forced errors plus
/// similarity metrics over freely synthesized outputs.
pub fn evaluate_speaker<T: Scalar>(
    model: &Model<T>,
    source: &SpeakerSource,
    data: &CorpusSpeaker<T>,
    weights: &LossWeights,
) -> Result<SpeakerEval> {
    if data.test.is_empty() {
        return Err(Error::Input("speaker has no test utterances".into()));
    }
    let stats = model.meta.pitch_stats;
    let mut mel_mse = 0.0;
    let mut mse_p = 0.0;
    let mut mse_d = 0.0;
    let mut generated: Vec<Synthesis<T>> = Vec::new();
    for utt in &data.test {
        let mut f = Fwd::new(model);
        let spk = match source {
            SpeakerSource::Pretrained(_) => TrainSpeaker::Table(match source {
                SpeakerSource::Pretrained(i) => *i,
                _ => unreachable!(),
            }),
            SpeakerSource::Adapted => TrainSpeaker::Adapted(None),
        };
        let out = training_forward(&mut f, utt, &spk, weights, false)?;
        mel_mse += out.mel_mse;
        mse_p += out.pitch_mse;
        mse_d += out.dur_mse;
        generated.push(model::synthesize(model, &utt.tokens, source)?);
    }
    let n = data.test.len() as f64;

    let gen_pairs: Vec<(&Mat<T>, &[T])> = generated
        .iter()
        .map(|s| (&s.mel, s.pitch.as_slice()))
        .collect();
    let ref_pitch: Vec<Vec<T>> = data.test.iter().map(|u| stats.normalize(&u.pitch)).collect();
    let ref_pairs: Vec<(&Mat<T>, &[T])> = data
        .test
        .iter()
        .zip(ref_pitch.iter())
        .map(|(u, p)| (&u.mel, p.as_slice()))
        .collect();
    let secs = metrics::secs_proxy(&gen_pairs, &ref_pairs);

    let gen_mels: Vec<&Mat<T>> = generated.iter().map(|s| &s.mel).collect();
    let ref_mels: Vec<&Mat<T>> = data.test.iter().map(|u| &u.mel).collect();
    let cfsd = metrics::cfsd_single(&gen_mels, &ref_mels);

    Ok(SpeakerEval {
        speaker_seed: data.latent.seed,
        secs,
        cfsd,
        mse_p: mse_p / n,
        mse_d: mse_d / n,
        mel_mse: mel_mse / n,
    })
}

/// Zero-step adaptation view of a base model for one speaker: uniform mix
/// weights and the reference mel from the speaker's adaptation split.
pub fn unadapted_view<T: Scalar>(base: &Model<T>, data: &CorpusSpeaker<T>) -> Result<Model<T>> {
    if data.adapt.is_empty() {
        return Err(Error::Input("speaker has no adaptation data".into()));
    }
    let mut view = base.clone();
    view.params.overlay(
        MIX_LOGITS,
        Mat::zeros(1, base.n_speakers()),
        TensorKind::Parameter,
    );
    view.params.overlay(
        ADAPTED_REFERENCE_MEL,
        data.adapt[0].mel.clone(),
        TensorKind::Buffer,
    );
    Ok(view)
}
