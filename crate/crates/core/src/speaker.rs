//! Speaker identity representation: lookup embedding (SE₁), style-token
//! reference encoder (SE₂), their sum, and the weighted-mean embedding used
//! when adapting to speakers outside the pretrained table.

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::{linear, multi_head_attend, Fwd, ADAPTED_REFERENCE_MEL, MIX_LOGITS};
use crate::tensor::{Mat, Scalar};

/// Where a forward pass takes its speaker identity from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerSource {
    /// Row of the pretrained lookup table; SE₂ comes from the speaker's
    /// stored reference mel.
    Pretrained(usize),
    /// Adapted state: SE₁ is the softmax-weighted mean of the table and SE₂
    /// comes from the reference mel recorded in the delta.
    Adapted,
}

/// How SE₂ is produced for one pass.
pub enum Se2Mode<'a, T: Scalar> {
    /// Run the reference encoder on the stored reference mel.
    Stored,
    /// Run the reference encoder on a given mel (pretraining uses the
    /// utterance's own target).
    Own(&'a Mat<T>),
    /// Use an already-computed SE₂ row (reference encoder frozen).
    Precomputed(&'a Mat<T>),
}

/// SE₁ lookup: copy of one table row.
pub fn lookup<T: Scalar>(f: &mut Fwd<T>, speaker_id: usize) -> Result<NodeId> {
    let rows = f.model.n_speakers();
    if speaker_id >= rows {
        return Err(Error::Input(format!(
            "speaker id {speaker_id} out of range ({rows} speakers)"
        )));
    }
    let table = f.param("speaker.table");
    Ok(f.graph.gather_rows(table, vec![speaker_id]))
}

/// SE₁ for a new speaker: softmax(logits)ᵀ · table.
pub fn weighted_mean_se1<T: Scalar>(f: &mut Fwd<T>) -> Result<NodeId> {
    if !f.model.params.contains(MIX_LOGITS) {
        return Err(Error::Input(
            "model has no mixing logits; not an adapted model".into(),
        ));
    }
    let logits = f.param(MIX_LOGITS);
    let table = f.param("speaker.table");
    let weights = f.graph.softmax_rows(logits);
    Ok(f.graph.matmul(weights, table))
}

/// SE₂ from a reference spectrogram: two strided convolutions, a GRU whose
/// final state is the query, then multi-head attention over the style
/// tokens.
pub fn gst_encode<T: Scalar>(f: &mut Fwd<T>, ref_mel: &Mat<T>) -> Result<NodeId> {
    if ref_mel.rows() == 0 {
        return Err(Error::Input("empty reference spectrogram".into()));
    }
    if ref_mel.cols() != f.model.cfg.mel_dim {
        return Err(Error::Config(format!(
            "reference mel has {} channels, model expects {}",
            ref_mel.cols(),
            f.model.cfg.mel_dim
        )));
    }
    let kernel = f.model.cfg.conv_kernel;
    let x = f.konst(ref_mel.clone());
    let w1 = f.param("gst.ref_conv1.weight");
    let b1 = f.param("gst.ref_conv1.bias");
    let x = f.graph.conv1d(x, w1, b1, kernel, 2);
    let x = f.graph.relu(x);
    let w2 = f.param("gst.ref_conv2.weight");
    let b2 = f.param("gst.ref_conv2.bias");
    let x = f.graph.conv1d(x, w2, b2, kernel, 2);
    let x = f.graph.relu(x);

    let ds = f.model.cfg.d_spk;
    let wz = f.param("gst.gru.wz");
    let uz = f.param("gst.gru.uz");
    let bz = f.param("gst.gru.bz");
    let wr = f.param("gst.gru.wr");
    let ur = f.param("gst.gru.ur");
    let br = f.param("gst.gru.br");
    let wh = f.param("gst.gru.wh");
    let uh = f.param("gst.gru.uh");
    let bh = f.param("gst.gru.bh");

    let steps = f.graph.val(x).rows();
    let mut h = f.konst(Mat::zeros(1, ds));
    for t in 0..steps {
        let xt = f.graph.gather_rows(x, vec![t]);
        let z = {
            let a = f.graph.matmul(xt, wz);
            let b = f.graph.matmul(h, uz);
            let s = f.graph.add(a, b);
            let s = f.graph.add(s, bz);
            f.graph.sigmoid(s)
        };
        let r = {
            let a = f.graph.matmul(xt, wr);
            let b = f.graph.matmul(h, ur);
            let s = f.graph.add(a, b);
            let s = f.graph.add(s, br);
            f.graph.sigmoid(s)
        };
        let cand = {
            let gated = f.graph.mul(r, h);
            let a = f.graph.matmul(xt, wh);
            let b = f.graph.matmul(gated, uh);
            let s = f.graph.add(a, b);
            let s = f.graph.add(s, bh);
            f.graph.tanh(s)
        };
        let keep = f.graph.affine(z, -T::one(), T::one()); // 1 − z
        let a = f.graph.mul(keep, h);
        let b = f.graph.mul(z, cand);
        h = f.graph.add(a, b);
    }

    let tokens = f.param("gst.tokens");
    let q = linear(f, h, "gst.attn.q");
    let k = linear(f, tokens, "gst.attn.k");
    let v = linear(f, tokens, "gst.attn.v");
    let heads = f.model.cfg.gst_heads;
    let cat = multi_head_attend(&mut f.graph, q, k, v, None, heads);
    Ok(linear(f, cat, "gst.attn.o"))
}

/// SE_final = SE₁ + SE₂.
pub fn combine<T: Scalar>(f: &mut Fwd<T>, se1: NodeId, se2: NodeId) -> NodeId {
    f.graph.add(se1, se2)
}

/// Full speaker embedding for one pass.
pub fn speaker_embedding_with<T: Scalar>(
    f: &mut Fwd<T>,
    source: &SpeakerSource,
    se2: Se2Mode<'_, T>,
) -> Result<NodeId> {
    let se1 = match source {
        SpeakerSource::Pretrained(id) => lookup(f, *id)?,
        SpeakerSource::Adapted => weighted_mean_se1(f)?,
    };
    let se2 = match se2 {
        Se2Mode::Stored => {
            let mel = match source {
                SpeakerSource::Pretrained(id) => f.model.reference_mel(*id)?.clone(),
                SpeakerSource::Adapted => f.model.params.get(ADAPTED_REFERENCE_MEL)?.clone(),
            };
            gst_encode(f, &mel)?
        }
        Se2Mode::Own(mel) => gst_encode(f, mel)?,
        Se2Mode::Precomputed(v) => f.konst(v.clone()),
    };
    Ok(combine(f, se1, se2))
}

/// Speaker embedding from stored reference data (inference path).
pub fn speaker_embedding<T: Scalar>(f: &mut Fwd<T>, source: &SpeakerSource) -> Result<NodeId> {
    speaker_embedding_with(f, source, Se2Mode::Stored)
}
