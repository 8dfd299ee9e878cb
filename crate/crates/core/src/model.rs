//! The multi-speaker non-autoregressive acoustic model: phoneme encoder and
//! mel decoder built from feed-forward transformer (FFT) layers, conditional
//! layer normalization, convolutional pitch/duration predictors, a length
//! regulator, and the aligner projections.
//!
//! Forward passes are expressed on the autodiff [`Graph`] through a [`Fwd`]
//! context that lazily registers named parameters as leaves, so the same
//! code serves training, inference and gradient checking.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PeftConfig};
use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, NodeId};
use crate::params::{ParamSet, TensorKind};
use crate::peft;
use crate::speaker::{self, SpeakerSource};
use crate::synth::PitchStats;
use crate::tensor::{Mat, Scalar};

/// Metadata carried with a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub pitch_stats: PitchStats,
    /// Latent seeds of the pretraining speakers, by table row.
    pub speaker_seeds: Vec<u64>,
    pub template_seed: u64,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta {
            pitch_stats: PitchStats { mean: 0.0, std: 1.0 },
            speaker_seeds: Vec::new(),
            template_seed: crate::synth::DEFAULT_TEMPLATE_SEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub peft: PeftConfig,
    pub params: ParamSet<T>,
    pub meta: ModelMeta,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded initialization and `n_speakers` table rows.
    pub fn new(cfg: ModelConfig, n_speakers: usize, seed: u64) -> Result<Model<T>> {
        cfg.validate()?;
        if n_speakers == 0 {
            return Err(Error::Config("need at least one speaker".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_4654_494e_4954);
        let mut params = ParamSet::new();
        init_base_params(&mut params, &cfg, n_speakers, &mut rng);
        Ok(Model {
            cfg,
            peft: PeftConfig::default(),
            params,
            meta: ModelMeta::default(),
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.params
            .get("speaker.table")
            .map(|t| t.rows())
            .unwrap_or(0)
    }

    /// Store the fixed reference mel used for a pretrained speaker's style
    /// embedding at inference.
    pub fn set_reference_mel(&mut self, speaker_id: usize, mel: Mat<T>) {
        self.params
            .overlay(&reference_mel_name(speaker_id), mel, TensorKind::Buffer);
    }

    pub fn reference_mel(&self, speaker_id: usize) -> Result<&Mat<T>> {
        self.params.get(&reference_mel_name(speaker_id))
    }
}

pub fn reference_mel_name(speaker_id: usize) -> String {
    format!("speaker.{speaker_id}.reference_mel")
}

/// Name of the per-speaker reference mel carried inside a delta.
pub const ADAPTED_REFERENCE_MEL: &str = "speaker.reference_mel";
/// Mixing logits over the pretrained speaker table.
pub const MIX_LOGITS: &str = "mix.logits";

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| T::from_f64(rng.random_range(-bound..bound)))
}

fn normal_mat<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Mat<T> {
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    Mat::from_fn(rows, cols, |_, _| T::from_f64(dist.sample(rng)))
}

fn init_linear<T: Scalar>(
    p: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) {
    p.insert_param(format!("{name}.weight"), kaiming(rng, d_in, d_out, d_in));
    p.insert_param(format!("{name}.bias"), Mat::zeros(1, d_out));
}

fn init_conv<T: Scalar>(
    p: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    kernel: usize,
    c_in: usize,
    c_out: usize,
) {
    p.insert_param(
        format!("{name}.weight"),
        kaiming(rng, kernel * c_in, c_out, kernel * c_in),
    );
    p.insert_param(format!("{name}.bias"), Mat::zeros(1, c_out));
}

/// CLN conditional projections: zero weights, gain bias at ones, so the
/// module starts as an unconditional layer norm.
fn init_cln<T: Scalar>(p: &mut ParamSet<T>, name: &str, d_spk: usize, d: usize) {
    p.insert_param(format!("{name}.gain.weight"), Mat::zeros(d_spk, d));
    p.insert_param(format!("{name}.gain.bias"), Mat::filled(1, d, T::one()));
    p.insert_param(format!("{name}.shift.weight"), Mat::zeros(d_spk, d));
    p.insert_param(format!("{name}.shift.bias"), Mat::zeros(1, d));
}

fn init_fft_layer<T: Scalar>(
    p: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    site: &str,
    cfg: &ModelConfig,
) {
    let d = cfg.d_model;
    for proj in ["q", "k", "v", "o"] {
        init_linear(p, rng, &format!("{site}.attn.{proj}"), d, d);
    }
    init_cln(p, &format!("{site}.cln1"), cfg.d_spk, d);
    init_conv(p, rng, &format!("{site}.ff.conv1"), cfg.conv_kernel, d, cfg.d_ff);
    init_conv(p, rng, &format!("{site}.ff.conv2"), cfg.conv_kernel, cfg.d_ff, d);
    init_cln(p, &format!("{site}.cln2"), cfg.d_spk, d);
}

fn init_base_params<T: Scalar>(
    p: &mut ParamSet<T>,
    cfg: &ModelConfig,
    n_speakers: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d_model;
    let ds = cfg.d_spk;
    let k = cfg.conv_kernel;

    p.insert_param("encoder.embed.weight", normal_mat(rng, cfg.vocab_size, d, 0.5));
    init_linear(p, rng, "encoder.in_proj", d + ds, d);
    for i in 0..cfg.n_enc_layers {
        init_fft_layer(p, rng, &format!("encoder.layer{i}"), cfg);
    }

    init_linear(p, rng, "decoder.in_proj", d + ds, d);
    for i in 0..cfg.n_dec_layers {
        init_fft_layer(p, rng, &format!("decoder.layer{i}"), cfg);
    }
    init_linear(p, rng, "decoder.out", d, cfg.mel_dim);

    init_linear(p, rng, "pitch_embed", 1, d);

    for name in ["pitch_pred", "dur_pred"] {
        init_linear(p, rng, &format!("{name}.in_proj"), d + ds, d);
        init_conv(p, rng, &format!("{name}.conv1"), k, d, d);
        init_cln(p, &format!("{name}.cln1"), ds, d);
        init_conv(p, rng, &format!("{name}.conv2"), k, d, d);
        init_cln(p, &format!("{name}.cln2"), ds, d);
        init_linear(p, rng, &format!("{name}.head"), d, 1);
    }

    let ad = cfg.aligner_dim;
    p.insert_param("aligner.embed.weight", normal_mat(rng, cfg.vocab_size, ad, 0.5));
    init_linear(p, rng, "aligner.mel_proj", cfg.mel_dim + ds, ad);
    init_conv(p, rng, "aligner.mel_conv1", k, ad, ad);
    init_conv(p, rng, "aligner.mel_conv2", k, ad, ad);
    init_linear(p, rng, "aligner.txt_proj", ad + ds, ad);
    init_conv(p, rng, "aligner.txt_conv1", k, ad, ad);
    init_conv(p, rng, "aligner.txt_conv2", k, ad, ad);

    p.insert_param("speaker.table", normal_mat(rng, n_speakers, ds, 0.5));

    let gc = cfg.gst_channels;
    init_conv(p, rng, "gst.ref_conv1", k, cfg.mel_dim, gc);
    init_conv(p, rng, "gst.ref_conv2", k, gc, gc);
    for gate in ["z", "r", "h"] {
        p.insert_param(format!("gst.gru.w{gate}"), kaiming(rng, gc, ds, gc));
        p.insert_param(format!("gst.gru.u{gate}"), kaiming(rng, ds, ds, ds));
        p.insert_param(format!("gst.gru.b{gate}"), Mat::zeros(1, ds));
    }
    p.insert_param("gst.tokens", normal_mat(rng, cfg.gst_tokens, ds, 0.5));
    for proj in ["q", "k", "v", "o"] {
        init_linear(p, rng, &format!("gst.attn.{proj}"), ds, ds);
    }
}

/// One forward pass under construction: the graph plus the leaf cache.
pub struct Fwd<'m, T: Scalar> {
    pub graph: Graph<T>,
    pub model: &'m Model<T>,
    leaves: BTreeMap<String, NodeId>,
    pub train_mode: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'m, T: Scalar> Fwd<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Fwd {
            graph: Graph::new(),
            model,
            leaves: BTreeMap::new(),
            train_mode: false,
            dropout_rng: None,
        }
    }

    /// Training-mode pass; `dropout_seed` drives any dropout masks.
    pub fn training(model: &'m Model<T>, dropout_seed: u64) -> Self {
        Fwd {
            graph: Graph::new(),
            model,
            leaves: BTreeMap::new(),
            train_mode: true,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    /// Leaf node for a named tensor, created on first use.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let mat = self
            .model
            .params
            .get(name)
            .unwrap_or_else(|_| panic!("model has no tensor named {name}"))
            .clone();
        let id = self.graph.leaf(mat);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn konst(&mut self, mat: Mat<T>) -> NodeId {
        self.graph.leaf(mat)
    }

    /// Inverted-dropout mask, or None outside train mode.
    pub fn dropout_mask(&mut self, rows: usize, cols: usize, p: f64) -> Option<Mat<T>> {
        if !self.train_mode || p <= 0.0 {
            return None;
        }
        let rng = self.dropout_rng.as_mut()?;
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        Some(Mat::from_fn(rows, cols, |_, _| {
            if rng.random_range(0.0..1.0) < keep {
                T::from_f64(scale)
            } else {
                T::zero()
            }
        }))
    }

    /// Collect gradients for named leaves after a backward pass.
    pub fn grad_map(&self, grads: &Grads<T>) -> BTreeMap<String, Mat<T>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.leaves {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }
}

/// `x · W + b` for a named linear layer.
pub fn linear<T: Scalar>(f: &mut Fwd<T>, x: NodeId, name: &str) -> NodeId {
    let w = f.param(&format!("{name}.weight"));
    let b = f.param(&format!("{name}.bias"));
    let y = f.graph.matmul(x, w);
    f.graph.add_row(y, b)
}

fn named_conv<T: Scalar>(f: &mut Fwd<T>, x: NodeId, name: &str, stride: usize) -> NodeId {
    let w = f.param(&format!("{name}.weight"));
    let b = f.param(&format!("{name}.bias"));
    let kernel = f.model.cfg.conv_kernel;
    f.graph.conv1d(x, w, b, kernel, stride)
}

/// Conditional layer norm: `g(spk) ⊙ normalize(x) + b(spk)` with the gain
/// and shift produced by affine maps from the speaker embedding.
pub fn conditional_layer_norm<T: Scalar>(
    f: &mut Fwd<T>,
    x: NodeId,
    spk: NodeId,
    name: &str,
) -> NodeId {
    let eps = T::from_f64(f.model.cfg.ln_eps);
    let gain_w = f.param(&format!("{name}.gain.weight"));
    let gain_b = f.param(&format!("{name}.gain.bias"));
    let shift_w = f.param(&format!("{name}.shift.weight"));
    let shift_b = f.param(&format!("{name}.shift.bias"));
    let gain = {
        let p = f.graph.matmul(spk, gain_w);
        f.graph.add(p, gain_b)
    };
    let shift = {
        let p = f.graph.matmul(spk, shift_w);
        f.graph.add(p, shift_b)
    };
    let normed = f.graph.normalize_rows(x, eps);
    let scaled = f.graph.mul_row(normed, gain);
    f.graph.add_row(scaled, shift)
}

/// Multi-head scaled dot-product attention with optional prefix key/value
/// extension. Queries are never extended, so the output keeps `q`'s rows.
pub fn multi_head_attend<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    prefix: Option<(NodeId, NodeId)>,
    n_heads: usize,
) -> NodeId {
    let d = g.val(q).cols();
    assert_eq!(d % n_heads, 0, "head split");
    let dh = d / n_heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let mut kh = g.slice_cols(k, lo, hi);
        let mut vh = g.slice_cols(v, lo, hi);
        if let Some((pk, pv)) = prefix {
            if g.val(pk).rows() > 0 {
                let pkh = g.slice_cols(pk, lo, hi);
                let pvh = g.slice_cols(pv, lo, hi);
                kh = g.concat_rows(pkh, kh);
                vh = g.concat_rows(pvh, vh);
            }
        }
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        heads.push(g.matmul(weights, vh));
    }
    let mut cat = heads[0];
    for &h in &heads[1..] {
        cat = g.concat_cols(cat, h);
    }
    cat
}

fn qkv_projection<T: Scalar>(f: &mut Fwd<T>, x: NodeId, site: &str, which: &str) -> NodeId {
    let mut y = linear(f, x, &format!("{site}.attn.{which}"));
    if let Some(delta) = peft::lora_delta(f, x, site, which) {
        y = f.graph.add(y, delta);
    }
    y
}

fn self_attention<T: Scalar>(f: &mut Fwd<T>, x: NodeId, site: &str) -> NodeId {
    let q = qkv_projection(f, x, site, "q");
    let k = qkv_projection(f, x, site, "k");
    let v = qkv_projection(f, x, site, "v");
    let prefix = peft::prefix_nodes(f, site);
    let n_heads = f.model.cfg.n_heads;
    let cat = multi_head_attend(&mut f.graph, q, k, v, prefix, n_heads);
    linear(f, cat, &format!("{site}.attn.o"))
}

/// One FFT layer: self-attention → residual → CLN → convolutional
/// feed-forward → residual → CLN, then the optional output adapter.
pub fn fft_layer<T: Scalar>(f: &mut Fwd<T>, x: NodeId, spk: NodeId, site: &str) -> NodeId {
    let attn = self_attention(f, x, site);
    let x1 = f.graph.add(x, attn);
    let x1 = conditional_layer_norm(f, x1, spk, &format!("{site}.cln1"));
    let h = named_conv(f, x1, &format!("{site}.ff.conv1"), 1);
    let h = f.graph.relu(h);
    let h = named_conv(f, h, &format!("{site}.ff.conv2"), 1);
    let x2 = f.graph.add(x1, h);
    let x2 = conditional_layer_norm(f, x2, spk, &format!("{site}.cln2"));
    peft::maybe_adapter(f, x2, site)
}

/// Fixed sinusoidal position encodings.
pub fn sinusoid<T: Scalar>(n: usize, d: usize) -> Mat<T> {
    Mat::from_fn(n, d, |t, j| {
        let i = (j / 2) as f64;
        let rate = (10_000f64).powf(-2.0 * i / d as f64);
        let angle = t as f64 * rate;
        if j % 2 == 0 {
            T::from_f64(angle.sin())
        } else {
            T::from_f64(angle.cos())
        }
    })
}

fn validate_tokens<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty phoneme sequence".into()));
    }
    for &t in tokens {
        if t >= model.cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {t} out of range (vocab {})",
                model.cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Concatenate a broadcast speaker row and re-project to `d_out`.
fn concat_speaker_proj<T: Scalar>(
    f: &mut Fwd<T>,
    x: NodeId,
    spk: NodeId,
    proj_name: &str,
) -> NodeId {
    let n = f.graph.val(x).rows();
    let rep = f.graph.repeat_row(spk, n);
    let cat = f.graph.concat_cols(x, rep);
    linear(f, cat, proj_name)
}

/// Phoneme encoder: embeddings + positions, speaker concat + projection,
/// then the FFT stack.
pub fn encode<T: Scalar>(f: &mut Fwd<T>, tokens: &[usize], spk: NodeId) -> Result<NodeId> {
    validate_tokens(f.model, tokens)?;
    let emb_table = f.param("encoder.embed.weight");
    let emb = f.graph.gather_rows(emb_table, tokens.to_vec());
    let pos = sinusoid::<T>(tokens.len(), f.model.cfg.d_model);
    let pos = f.konst(pos);
    let x = f.graph.add(emb, pos);
    let mut x = concat_speaker_proj(f, x, spk, "encoder.in_proj");
    for i in 0..f.model.cfg.n_enc_layers {
        x = fft_layer(f, x, spk, &format!("encoder.layer{i}"));
    }
    Ok(x)
}

fn predictor<T: Scalar>(f: &mut Fwd<T>, h: NodeId, spk: NodeId, name: &str) -> NodeId {
    let x = concat_speaker_proj(f, h, spk, &format!("{name}.in_proj"));
    let x = named_conv(f, x, &format!("{name}.conv1"), 1);
    let x = f.graph.relu(x);
    let x = conditional_layer_norm(f, x, spk, &format!("{name}.cln1"));
    let x = peft::maybe_adapter(f, x, &format!("{name}.block1"));
    let x = named_conv(f, x, &format!("{name}.conv2"), 1);
    let x = f.graph.relu(x);
    let x = conditional_layer_norm(f, x, spk, &format!("{name}.cln2"));
    let x = peft::maybe_adapter(f, x, &format!("{name}.block2"));
    linear(f, x, &format!("{name}.head"))
}

/// Per-token normalized pitch, N×1.
pub fn predict_pitch<T: Scalar>(f: &mut Fwd<T>, h: NodeId, spk: NodeId) -> NodeId {
    predictor(f, h, spk, "pitch_pred")
}

/// Per-token log-domain durations, N×1.
pub fn predict_duration<T: Scalar>(f: &mut Fwd<T>, h: NodeId, spk: NodeId) -> NodeId {
    predictor(f, h, spk, "dur_pred")
}

/// Scalar per-token pitch to d_model via a width-1 convolution.
pub fn pitch_embed<T: Scalar>(f: &mut Fwd<T>, pitch: NodeId) -> NodeId {
    linear(f, pitch, "pitch_embed")
}

/// Indices repeating row `n` exactly `durations[n]` times.
pub fn length_regulate_indices(durations: &[usize]) -> Result<Vec<usize>> {
    if durations.is_empty() {
        return Err(Error::Input("empty duration sequence".into()));
    }
    let mut idx = Vec::with_capacity(durations.iter().sum());
    for (n, &d) in durations.iter().enumerate() {
        if d < 1 {
            return Err(Error::Input(format!("duration {d} at token {n} must be >= 1")));
        }
        idx.extend(std::iter::repeat_n(n, d));
    }
    Ok(idx)
}

/// Repeat hidden rows by their durations; output row count is Σd.
pub fn length_regulate<T: Scalar>(
    f: &mut Fwd<T>,
    h: NodeId,
    durations: &[usize],
) -> Result<NodeId> {
    let idx = length_regulate_indices(durations)?;
    assert_eq!(f.graph.val(h).rows(), durations.len(), "one duration per row");
    Ok(f.graph.gather_rows(h, idx))
}

/// Mel decoder over length-regulated input.
pub fn decode<T: Scalar>(f: &mut Fwd<T>, upsampled: NodeId, spk: NodeId) -> Result<NodeId> {
    let t = f.graph.val(upsampled).rows();
    if t > f.model.cfg.max_frames {
        return Err(Error::Capacity(format!(
            "{t} frames exceed max_frames {}",
            f.model.cfg.max_frames
        )));
    }
    let pos = sinusoid::<T>(t, f.model.cfg.d_model);
    let pos = f.konst(pos);
    let x = f.graph.add(upsampled, pos);
    let mut x = concat_speaker_proj(f, x, spk, "decoder.in_proj");
    for i in 0..f.model.cfg.n_dec_layers {
        x = fft_layer(f, x, spk, &format!("decoder.layer{i}"));
    }
    Ok(linear(f, x, "decoder.out"))
}

/// Frame-to-token log-probabilities from the aligner branches:
/// log-softmax over tokens of the negative squared distance between
/// projected mel frames and projected token embeddings.
pub fn aligner_log_probs<T: Scalar>(
    f: &mut Fwd<T>,
    mel: &Mat<T>,
    tokens: &[usize],
    spk: NodeId,
) -> Result<NodeId> {
    validate_tokens(f.model, tokens)?;
    if mel.rows() == 0 {
        return Err(Error::Input("empty mel for alignment".into()));
    }
    let mel_node = f.konst(mel.clone());
    let mx = concat_speaker_proj(f, mel_node, spk, "aligner.mel_proj");
    let mx = named_conv(f, mx, "aligner.mel_conv1", 1);
    let mx = f.graph.relu(mx);
    let mx = named_conv(f, mx, "aligner.mel_conv2", 1);
    let mx = peft::maybe_adapter(f, mx, "aligner.mel");

    let emb_table = f.param("aligner.embed.weight");
    let emb = f.graph.gather_rows(emb_table, tokens.to_vec());
    let tx = concat_speaker_proj(f, emb, spk, "aligner.txt_proj");
    let tx = named_conv(f, tx, "aligner.txt_conv1", 1);
    let tx = f.graph.relu(tx);
    let tx = named_conv(f, tx, "aligner.txt_conv2", 1);
    let tx = peft::maybe_adapter(f, tx, "aligner.txt");

    // −‖m_t − x_n‖² = 2·m·xᵀ − ‖m‖² − ‖x‖²
    let txt = f.graph.transpose(tx);
    let cross = f.graph.matmul(mx, txt);
    let two = T::from_f64(2.0);
    let m = f.graph.scale(cross, two);
    let sq_m = f.graph.sumsq_rows(mx);
    let neg_sq_m = f.graph.scale(sq_m, -T::one());
    let m = f.graph.add_col(m, neg_sq_m);
    let sq_t = f.graph.sumsq_rows(tx);
    let neg_sq_t = f.graph.scale(sq_t, -T::one());
    let neg_sq_t_row = f.graph.transpose(neg_sq_t);
    let m = f.graph.add_row(m, neg_sq_t_row);
    Ok(f.graph.log_softmax_rows(m))
}

/// Exponentiate, round and clamp log-domain duration predictions.
pub fn durations_from_log<T: Scalar>(log_d: &[T], max_frames: usize) -> Vec<usize> {
    log_d
        .iter()
        .map(|v| {
            let frames = v.as_f64().exp().round();
            (frames as usize).clamp(1, max_frames)
        })
        .collect()
}

/// Full inference output.
#[derive(Debug, Clone)]
pub struct Synthesis<T: Scalar> {
    pub mel: Mat<T>,
    /// Predicted normalized per-token pitch.
    pub pitch: Vec<T>,
    /// Rounded per-token durations actually used for length regulation.
    pub durations: Vec<usize>,
}

/// Full inference: encode → predict pitch and durations → length-regulate →
/// decode. With an adapted model the PEFT and speaker tensors that came from
/// the delta are active; a plain base model runs the pure base path.
pub fn synthesize<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    source: &SpeakerSource,
) -> Result<Synthesis<T>> {
    let mut f = Fwd::new(model);
    let spk = speaker::speaker_embedding(&mut f, source)?;
    let h = encode(&mut f, tokens, spk)?;
    let pitch = predict_pitch(&mut f, h, spk);
    let dlog = predict_duration(&mut f, h, spk);
    let pitch_values: Vec<T> = f.graph.val(pitch).as_slice().to_vec();
    let dlog_values: Vec<T> = f.graph.val(dlog).as_slice().to_vec();
    let durations = durations_from_log(&dlog_values, model.cfg.max_frames);

    let pe = pitch_embed(&mut f, pitch);
    let hp = f.graph.add(h, pe);
    let up = length_regulate(&mut f, hp, &durations)?;
    let mel_node = decode(&mut f, up, spk)?;
    Ok(Synthesis {
        mel: f.graph.val(mel_node).clone(),
        pitch: pitch_values,
        durations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Strategy;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            d_spk: 8,
            mel_dim: 6,
            vocab_size: 11,
            gst_channels: 6,
            gst_tokens: 4,
            gst_heads: 2,
            aligner_dim: 8,
            max_frames: 128,
            ..ModelConfig::default()
        }
    }

    fn tiny_model() -> Model<f64> {
        let mut m = Model::new(tiny_cfg(), 3, 42).unwrap();
        for i in 0..3 {
            let mel = Mat::from_fn(6, 6, |a, b| 0.1 * (a as f64) - 0.2 * (b as f64) + i as f64);
            m.set_reference_mel(i, mel);
        }
        m
    }

    #[test]
    fn fft_layer_preserves_shape() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let x = f.konst(Mat::from_fn(5, 16, |i, j| (i as f64 - j as f64) * 0.1));
        let spk = f.konst(Mat::from_fn(1, 8, |_, j| j as f64 * 0.1));
        let y = fft_layer(&mut f, x, spk, "encoder.layer0");
        let v = f.graph.val(y);
        assert_eq!(v.shape(), (5, 16));
        assert!(v.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cln_at_init_equals_plain_layer_norm() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let x = f.konst(Mat::from_fn(3, 16, |i, j| (i * 16 + j) as f64 * 0.07 - 1.0));
        let spk = f.konst(Mat::from_fn(1, 8, |_, j| (j as f64) - 3.0));
        let eps = model.cfg.ln_eps;
        let y = conditional_layer_norm(&mut f, x, spk, "encoder.layer0.cln1");
        let plain = f.graph.normalize_rows(x, eps);
        assert!(f.graph.val(y).bits_eq(f.graph.val(plain)));
    }

    #[test]
    fn cln_on_constant_row_returns_shift() {
        // normalize(constant) = 0, so the output is b(spk) exactly
        let mut model = tiny_model();
        // perturb the shift projection so b(spk) is nonzero
        *model
            .params
            .get_mut("encoder.layer0.cln1.shift.weight")
            .unwrap() = Mat::from_fn(8, 16, |i, j| 0.01 * (i + j) as f64);
        let mut f = Fwd::new(&model);
        let x = f.konst(Mat::filled(2, 16, 3.25));
        let spk_mat = Mat::from_fn(1, 8, |_, j| j as f64 * 0.3 - 1.0);
        let spk = f.konst(spk_mat.clone());
        let y = conditional_layer_norm(&mut f, x, spk, "encoder.layer0.cln1");
        let shift_w = model.params.get("encoder.layer0.cln1.shift.weight").unwrap();
        let expect = spk_mat.matmul(shift_w);
        for j in 0..16 {
            for i in 0..2 {
                assert!((f.graph.val(y).get(i, j) - expect.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cln_distinguishes_speakers_after_perturbation() {
        let mut model = tiny_model();
        *model
            .params
            .get_mut("encoder.layer0.cln1.gain.weight")
            .unwrap() = Mat::from_fn(8, 16, |i, j| 0.05 * ((i * 17 + j) % 5) as f64);
        let mut f = Fwd::new(&model);
        let x_mat = Mat::from_fn(2, 16, |i, j| (i + j) as f64 * 0.2);
        let x1 = f.konst(x_mat.clone());
        let s1 = f.konst(Mat::from_fn(1, 8, |_, j| j as f64));
        let y1 = conditional_layer_norm(&mut f, x1, s1, "encoder.layer0.cln1");
        let x2 = f.konst(x_mat);
        let s2 = f.konst(Mat::from_fn(1, 8, |_, j| -(j as f64)));
        let y2 = conditional_layer_norm(&mut f, x2, s2, "encoder.layer0.cln1");
        assert!(!f.graph.val(y1).bits_eq(f.graph.val(y2)));
    }

    #[test]
    fn single_token_single_head_attention_is_value_projection() {
        let cfg = ModelConfig {
            n_heads: 1,
            ..tiny_cfg()
        };
        let model = Model::<f64>::new(cfg, 1, 7).unwrap();
        let mut f = Fwd::new(&model);
        let x = f.konst(Mat::from_fn(1, 16, |_, j| j as f64 * 0.11 - 0.5));
        let y = self_attention(&mut f, x, "encoder.layer0");
        // softmax over one key is 1, so attention output = v, and the layer
        // output is o(v(x))
        let v = linear(&mut f, x, "encoder.layer0.attn.v");
        let expect = linear(&mut f, v, "encoder.layer0.attn.o");
        assert!(f.graph.val(y).bits_eq(f.graph.val(expect)));
    }

    #[test]
    fn encode_shapes_and_errors() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let spk = f.konst(Mat::zeros(1, 8));
        let h = encode(&mut f, &[3], spk).unwrap();
        assert_eq!(f.graph.val(h).shape(), (1, 16));

        assert!(matches!(
            encode(&mut f, &[], spk),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            encode(&mut f, &[99], spk),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn encode_is_deterministic() {
        let model = tiny_model();
        let run = || {
            let mut f = Fwd::new(&model);
            let spk = f.konst(Mat::from_fn(1, 8, |_, j| j as f64 * 0.01));
            let h = encode(&mut f, &[1, 2, 3, 4], spk).unwrap();
            f.graph.val(h).clone()
        };
        assert!(run().bits_eq(&run()));
    }

    #[test]
    fn encode_depends_on_speaker() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let s1 = f.konst(Mat::filled(1, 8, 0.5));
        let h1 = encode(&mut f, &[1, 2], s1).unwrap();
        let s2 = f.konst(Mat::filled(1, 8, -0.5));
        let h2 = encode(&mut f, &[1, 2], s2).unwrap();
        assert!(!f.graph.val(h1).bits_eq(f.graph.val(h2)));
    }

    #[test]
    fn predictor_output_lengths() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let spk = f.konst(Mat::zeros(1, 8));
        let h = encode(&mut f, &[0, 1, 2, 3, 4], spk).unwrap();
        let p = predict_pitch(&mut f, h, spk);
        let d = predict_duration(&mut f, h, spk);
        assert_eq!(f.graph.val(p).shape(), (5, 1));
        assert_eq!(f.graph.val(d).shape(), (5, 1));
    }

    #[test]
    fn duration_rounding_at_zero_log_is_one_frame() {
        assert_eq!(durations_from_log(&[0.0f64], 512), vec![1]);
        assert_eq!(durations_from_log(&[-5.0f64, 1.0], 512), vec![1, 3]);
        // saturation stays within the frame cap
        assert_eq!(durations_from_log(&[1e6f64], 512), vec![512]);
    }

    #[test]
    fn length_regulator_repeats_rows_in_order() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let h = f.konst(Mat::from_fn(3, 4, |i, _| i as f64));
        let y = length_regulate(&mut f, h, &[2, 3, 1]).unwrap();
        let v = f.graph.val(y);
        assert_eq!(v.rows(), 6);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(0)[0], 0.0);
        assert_eq!(v.row(5)[0], 2.0);

        // all-ones durations are the identity on rows
        let y1 = length_regulate(&mut f, h, &[1, 1, 1]).unwrap();
        assert!(f.graph.val(y1).bits_eq(f.graph.val(h)));

        assert!(matches!(
            length_regulate(&mut f, h, &[1, 0, 1]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn decode_enforces_frame_capacity() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let spk = f.konst(Mat::zeros(1, 8));
        let up = f.konst(Mat::zeros(129, 16));
        assert!(matches!(decode(&mut f, up, spk), Err(Error::Capacity(_))));
        let ok = f.konst(Mat::zeros(12, 16));
        let mel = decode(&mut f, ok, spk).unwrap();
        assert_eq!(f.graph.val(mel).shape(), (12, 6));
    }

    #[test]
    fn aligner_rows_are_log_distributions() {
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let spk = f.konst(Mat::zeros(1, 8));
        let mel = Mat::from_fn(9, 6, |i, j| ((i * 3 + j) % 7) as f64 * 0.2 - 0.5);
        let lp = aligner_log_probs(&mut f, &mel, &[1, 2, 3], spk).unwrap();
        let v = f.graph.val(lp);
        assert_eq!(v.shape(), (9, 3));
        for t in 0..9 {
            let sum: f64 = v.row(t).iter().map(|x| x.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synthesize_end_to_end() {
        let model = tiny_model();
        let out = synthesize(&model, &[1, 2, 3], &SpeakerSource::Pretrained(0)).unwrap();
        assert_eq!(out.mel.cols(), 6);
        assert_eq!(out.pitch.len(), 3);
        assert_eq!(out.durations.len(), 3);
        assert_eq!(out.durations.iter().sum::<usize>(), out.mel.rows());

        // deterministic across calls
        let again = synthesize(&model, &[1, 2, 3], &SpeakerSource::Pretrained(0)).unwrap();
        assert!(out.mel.bits_eq(&again.mel));

        // out-of-range speaker id
        assert!(matches!(
            synthesize(&model, &[1], &SpeakerSource::Pretrained(9)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn synthesize_varies_with_pitch_input() {
        // feeding a different pitch vector into the decoder changes the mel
        let model = tiny_model();
        let mut f = Fwd::new(&model);
        let spk = f.konst(Mat::zeros(1, 8));
        let h = encode(&mut f, &[1, 2], spk).unwrap();
        let p1 = f.konst(Mat::col_vec(&[0.0, 0.0]));
        let p2 = f.konst(Mat::col_vec(&[1.0, -1.0]));
        let e1 = pitch_embed(&mut f, p1);
        let e2 = pitch_embed(&mut f, p2);
        let h1 = f.graph.add(h, e1);
        let h2 = f.graph.add(h, e2);
        let u1 = length_regulate(&mut f, h1, &[2, 2]).unwrap();
        let u2 = length_regulate(&mut f, h2, &[2, 2]).unwrap();
        let m1 = decode(&mut f, u1, spk).unwrap();
        let m2 = decode(&mut f, u2, spk).unwrap();
        assert!(!f.graph.val(m1).bits_eq(f.graph.val(m2)));
    }

    #[test]
    fn model_is_shareable_across_threads() {
        fn assert_send_sync<S: Send + Sync>() {}
        assert_send_sync::<Model<f32>>();
        assert_send_sync::<Model<f64>>();
    }

    #[test]
    fn length_regulator_conserves_frame_counts() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(
                &proptest::collection::vec(1usize..6, 1..12),
                |durations| {
                    let model = tiny_model();
                    let mut f = Fwd::new(&model);
                    let h = f.konst(Mat::from_fn(durations.len(), 4, |i, j| {
                        (i * 4 + j) as f64
                    }));
                    let y = length_regulate(&mut f, h, &durations).unwrap();
                    prop_assert_eq!(
                        f.graph.val(y).rows(),
                        durations.iter().sum::<usize>()
                    );
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn peft_none_matches_adapter_at_zero_init() {
        let base = tiny_model();
        let mut adapted = base.clone();
        adapted.peft = PeftConfig::with_strategy(Strategy::Adapter);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        peft::init_peft_tensors(&mut adapted, &mut rng).unwrap();

        let tokens = [1usize, 5, 2, 8];
        let a = synthesize(&base, &tokens, &SpeakerSource::Pretrained(1)).unwrap();
        let b = synthesize(&adapted, &tokens, &SpeakerSource::Pretrained(1)).unwrap();
        assert!(a.mel.bits_eq(&b.mel));
        assert_eq!(a.durations, b.durations);
    }
}
