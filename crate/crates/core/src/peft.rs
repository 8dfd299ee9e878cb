//! Parameter-efficient strategies: adapter, LoRA, prefix tuning and BitFit.
//! Injection points, identity-preserving initialization, trainable-set
//! construction, and delta export/apply over a frozen base.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PeftConfig, Strategy};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::{linear, Fwd, Model, ADAPTED_REFERENCE_MEL, MIX_LOGITS};
use crate::params::{ParamSet, TensorKind, TrainableSet};
use crate::tensor::{Mat, Scalar};

/// Adapter insertion sites and their widths for a configuration.
pub fn adapter_sites(cfg: &ModelConfig, peft: &PeftConfig) -> Vec<(String, usize)> {
    let mut sites = Vec::new();
    for i in 0..cfg.n_enc_layers {
        sites.push((format!("encoder.layer{i}"), cfg.d_model));
    }
    for i in 0..cfg.n_dec_layers {
        sites.push((format!("decoder.layer{i}"), cfg.d_model));
    }
    if peft.adapt_predictors {
        for name in ["pitch_pred", "dur_pred"] {
            sites.push((format!("{name}.block1"), cfg.d_model));
            sites.push((format!("{name}.block2"), cfg.d_model));
        }
    }
    if peft.adapt_aligner {
        sites.push(("aligner.mel".to_string(), cfg.aligner_dim));
        sites.push(("aligner.txt".to_string(), cfg.aligner_dim));
    }
    sites
}

fn fft_sites(cfg: &ModelConfig) -> Vec<String> {
    let mut sites = Vec::new();
    for i in 0..cfg.n_enc_layers {
        sites.push(format!("encoder.layer{i}"));
    }
    for i in 0..cfg.n_dec_layers {
        sites.push(format!("decoder.layer{i}"));
    }
    sites
}

fn lora_targets(peft: &PeftConfig) -> Vec<&'static str> {
    if peft.lora_include_value {
        vec!["q", "k", "v"]
    } else {
        vec!["q", "k"]
    }
}

/// Create the strategy's trainable tensors on a work model. Adapter up
/// projections and LoRA B matrices start at zero so composition is exactly
/// the identity; prefix vectors start at small Gaussian noise and are not
/// identity-preserving.
pub fn init_peft_tensors<T: Scalar>(model: &mut Model<T>, rng: &mut ChaCha8Rng) -> Result<()> {
    let peft = model.peft.clone();
    peft.validate()?;
    let cfg = model.cfg.clone();
    match peft.strategy {
        Strategy::Adapter => {
            let r = peft.adapter_bottleneck;
            for (site, width) in adapter_sites(&cfg, &peft) {
                let bound = (1.0 / width as f64).sqrt();
                let down = Mat::from_fn(width, r, |_, _| T::from_f64(rng.random_range(-bound..bound)));
                let p = &mut model.params;
                p.insert_param(format!("peft.adapter.{site}.down.weight"), down);
                p.insert_param(format!("peft.adapter.{site}.down.bias"), Mat::zeros(1, r));
                p.insert_param(format!("peft.adapter.{site}.up.weight"), Mat::zeros(r, width));
                p.insert_param(format!("peft.adapter.{site}.up.bias"), Mat::zeros(1, width));
                if peft.adapter_layernorm {
                    p.insert_param(
                        format!("peft.adapter.{site}.ln.gain"),
                        Mat::filled(1, width, T::one()),
                    );
                    p.insert_param(format!("peft.adapter.{site}.ln.shift"), Mat::zeros(1, width));
                }
            }
        }
        Strategy::Lora => {
            let r = peft.lora_rank;
            let sigma = 1.0 / (r as f64).sqrt();
            let dist = Normal::new(0.0, sigma).expect("valid sigma");
            for site in fft_sites(&cfg) {
                for target in lora_targets(&peft) {
                    let a = Mat::from_fn(r, cfg.d_model, |_, _| T::from_f64(dist.sample(rng)));
                    let p = &mut model.params;
                    p.insert_param(format!("peft.lora.{site}.{target}.a"), a);
                    p.insert_param(
                        format!("peft.lora.{site}.{target}.b"),
                        Mat::zeros(cfg.d_model, r),
                    );
                }
            }
        }
        Strategy::Prefix => {
            let dist = Normal::new(0.0, 0.01).expect("valid sigma");
            for site in fft_sites(&cfg) {
                let mk = |rng: &mut ChaCha8Rng| {
                    Mat::from_fn(peft.prefix_len, cfg.d_model, |_, _| T::from_f64(dist.sample(rng)))
                };
                let pk = mk(rng);
                let pv = mk(rng);
                model.params.insert_param(format!("peft.prefix.{site}.pk"), pk);
                model.params.insert_param(format!("peft.prefix.{site}.pv"), pv);
            }
        }
        Strategy::Bitfit | Strategy::Full | Strategy::None => {}
    }
    Ok(())
}

/// Expected PEFT tensor names (with shapes) for validation of deltas.
fn peft_registry(cfg: &ModelConfig, peft: &PeftConfig) -> Vec<(String, (usize, usize))> {
    let mut names = Vec::new();
    match peft.strategy {
        Strategy::Adapter => {
            let r = peft.adapter_bottleneck;
            for (site, width) in adapter_sites(cfg, peft) {
                names.push((format!("peft.adapter.{site}.down.weight"), (width, r)));
                names.push((format!("peft.adapter.{site}.down.bias"), (1, r)));
                names.push((format!("peft.adapter.{site}.up.weight"), (r, width)));
                names.push((format!("peft.adapter.{site}.up.bias"), (1, width)));
                if peft.adapter_layernorm {
                    names.push((format!("peft.adapter.{site}.ln.gain"), (1, width)));
                    names.push((format!("peft.adapter.{site}.ln.shift"), (1, width)));
                }
            }
        }
        Strategy::Lora => {
            for site in fft_sites(cfg) {
                for target in lora_targets(peft) {
                    names.push((
                        format!("peft.lora.{site}.{target}.a"),
                        (peft.lora_rank, cfg.d_model),
                    ));
                    names.push((
                        format!("peft.lora.{site}.{target}.b"),
                        (cfg.d_model, peft.lora_rank),
                    ));
                }
            }
        }
        Strategy::Prefix => {
            for site in fft_sites(cfg) {
                names.push((format!("peft.prefix.{site}.pk"), (peft.prefix_len, cfg.d_model)));
                names.push((format!("peft.prefix.{site}.pv"), (peft.prefix_len, cfg.d_model)));
            }
        }
        Strategy::Bitfit | Strategy::Full | Strategy::None => {}
    }
    names
}

/// Adapter with internal skip connection:
/// `x + FF_up(ReLU(FF_down(LN(x))))`, dropout after the nonlinearity in
/// train mode. Zero-initialized FF_up makes this the identity at init.
pub fn adapter_forward<T: Scalar>(f: &mut Fwd<T>, x: NodeId, site: &str) -> NodeId {
    let peft = &f.model.peft;
    let dropout = peft.adapter_dropout;
    let use_ln = peft.adapter_layernorm;
    let eps = T::from_f64(f.model.cfg.ln_eps);
    let mut h = x;
    if use_ln {
        let gain = f.param(&format!("peft.adapter.{site}.ln.gain"));
        let shift = f.param(&format!("peft.adapter.{site}.ln.shift"));
        h = f.graph.normalize_rows(h, eps);
        h = f.graph.mul_row(h, gain);
        h = f.graph.add_row(h, shift);
    }
    h = linear(f, h, &format!("peft.adapter.{site}.down"));
    h = f.graph.relu(h);
    let shape = f.graph.val(h).shape();
    if let Some(mask) = f.dropout_mask(shape.0, shape.1, dropout) {
        let mask = f.konst(mask);
        h = f.graph.mul(h, mask);
    }
    h = linear(f, h, &format!("peft.adapter.{site}.up"));
    f.graph.add(x, h)
}

/// Apply an adapter when the strategy is active and the site has tensors.
pub fn maybe_adapter<T: Scalar>(f: &mut Fwd<T>, x: NodeId, site: &str) -> NodeId {
    if f.model.peft.strategy == Strategy::Adapter
        && f.model.params.contains(&format!("peft.adapter.{site}.up.weight"))
    {
        adapter_forward(f, x, site)
    } else {
        x
    }
}

/// Low-rank update `(α_s/r)·(x·Aᵀ)·Bᵀ` for an attention projection, when the
/// strategy is active.
pub fn lora_delta<T: Scalar>(f: &mut Fwd<T>, x: NodeId, site: &str, target: &str) -> Option<NodeId> {
    if f.model.peft.strategy != Strategy::Lora {
        return None;
    }
    let a_name = format!("peft.lora.{site}.{target}.a");
    if !f.model.params.contains(&a_name) {
        return None;
    }
    let scale = T::from_f64(f.model.peft.lora_scale / f.model.peft.lora_rank as f64);
    let a = f.param(&a_name);
    let b = f.param(&format!("peft.lora.{site}.{target}.b"));
    let at = f.graph.transpose(a);
    let bt = f.graph.transpose(b);
    let xa = f.graph.matmul(x, at);
    let xab = f.graph.matmul(xa, bt);
    Some(f.graph.scale(xab, scale))
}

/// Prefix key/value leaves for an attention site, when the strategy is
/// active.
pub fn prefix_nodes<T: Scalar>(f: &mut Fwd<T>, site: &str) -> Option<(NodeId, NodeId)> {
    if f.model.peft.strategy != Strategy::Prefix {
        return None;
    }
    let pk_name = format!("peft.prefix.{site}.pk");
    if !f.model.params.contains(&pk_name) {
        return None;
    }
    let pk = f.param(&pk_name);
    let pv = f.param(&format!("peft.prefix.{site}.pv"));
    Some((pk, pv))
}

/// Build the trainable subset for a strategy. The style-token bank and the
/// reference encoder stay frozen under every parameter-efficient strategy;
/// the full-fine-tuning baseline trains the entire parameter registry.
pub fn build_trainable_set<T: Scalar>(peft: &PeftConfig, model: &Model<T>) -> Result<TrainableSet> {
    peft.validate()?;
    let mut set = TrainableSet::new();
    let params = &model.params;
    match peft.strategy {
        Strategy::Adapter => {
            for name in params.param_names() {
                if name.starts_with("peft.adapter.") {
                    set.insert(name.clone());
                }
            }
        }
        Strategy::Lora => {
            for name in params.param_names() {
                if name.starts_with("peft.lora.") {
                    set.insert(name.clone());
                }
            }
        }
        Strategy::Prefix => {
            for name in params.param_names() {
                if name.starts_with("peft.prefix.") {
                    set.insert(name.clone());
                }
            }
        }
        Strategy::Bitfit => {
            for name in params.param_names() {
                if name.ends_with(".bias") && !name.starts_with("gst.") {
                    set.insert(name.clone());
                }
            }
        }
        Strategy::Full => {
            for name in params.param_names() {
                set.insert(name.clone());
            }
        }
        Strategy::None => {}
    }
    if peft.train_mix_weights && params.contains(MIX_LOGITS) {
        set.insert(MIX_LOGITS);
    }
    if peft.train_cln {
        for name in params.param_names() {
            if name.contains(".cln") && !name.starts_with("gst.") {
                set.insert(name.clone());
            }
        }
    }
    Ok(set)
}

/// Per-speaker delta: the trainable tensors plus the reference mel, tied to
/// a base checkpoint by its content hash.
#[derive(Debug, Clone)]
pub struct Delta<T: Scalar> {
    pub peft: PeftConfig,
    pub meta: DeltaMeta,
    pub tensors: ParamSet<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaMeta {
    /// Latent seed of the adapted speaker.
    pub speaker_seed: u64,
    pub steps: usize,
}

/// Collect the per-speaker tensors; base tensors outside the trainable set
/// are never copied.
pub fn export_delta<T: Scalar>(
    model: &Model<T>,
    trainable: &TrainableSet,
    meta: DeltaMeta,
) -> Result<Delta<T>> {
    let mut tensors = ParamSet::new();
    for name in trainable.iter() {
        tensors.insert_param(name.clone(), model.params.get(name)?.clone());
    }
    if !trainable.contains(MIX_LOGITS) && model.params.contains(MIX_LOGITS) {
        tensors.insert_param(MIX_LOGITS, model.params.get(MIX_LOGITS)?.clone());
    }
    tensors.insert_buffer(
        ADAPTED_REFERENCE_MEL,
        model.params.get(ADAPTED_REFERENCE_MEL)?.clone(),
    );
    Ok(Delta {
        peft: model.peft.clone(),
        meta,
        tensors,
    })
}

/// Compose a delta over a base model. Every delta tensor must match a name
/// the registry knows — a base parameter, an expected PEFT tensor for the
/// delta's strategy, the mixing logits, or the reference mel.
pub fn apply_delta<T: Scalar>(base: &Model<T>, delta: &Delta<T>) -> Result<Model<T>> {
    let expected: std::collections::BTreeMap<String, (usize, usize)> =
        peft_registry(&base.cfg, &delta.peft).into_iter().collect();
    let mut composed = base.clone();
    composed.peft = delta.peft.clone();
    for (name, entry) in delta.tensors.iter() {
        let shape = entry.mat.shape();
        if name == ADAPTED_REFERENCE_MEL {
            if shape.1 != base.cfg.mel_dim {
                return Err(Error::Format(format!(
                    "reference mel has {} channels, model expects {}",
                    shape.1,
                    base.cfg.mel_dim
                )));
            }
            composed.params.overlay(name, entry.mat.clone(), TensorKind::Buffer);
        } else if name == MIX_LOGITS {
            if shape != (1, base.n_speakers()) {
                return Err(Error::Format(format!(
                    "mixing logits shaped {shape:?}, expected (1, {})",
                    base.n_speakers()
                )));
            }
            composed.params.overlay(name, entry.mat.clone(), TensorKind::Parameter);
        } else if let Some(&want) = expected.get(name.as_str()) {
            if shape != want {
                return Err(Error::Format(format!(
                    "delta tensor {name} shaped {shape:?}, expected {want:?}"
                )));
            }
            composed.params.overlay(name, entry.mat.clone(), TensorKind::Parameter);
        } else if composed.params.contains(name) {
            let want = composed.params.get(name)?.shape();
            if shape != want {
                return Err(Error::Format(format!(
                    "delta tensor {name} shaped {shape:?}, expected {want:?}"
                )));
            }
            composed.params.overlay(name, entry.mat.clone(), TensorKind::Parameter);
        } else {
            return Err(Error::UnknownTensor(name.clone()));
        }
    }
    Ok(composed)
}
