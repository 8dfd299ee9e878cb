//! Deterministic synthetic multi-speaker corpus generator.
//!
//! Every utterance is a (phoneme tokens, mel, per-token pitch, durations)
//! tuple rendered from a speaker latent and two seeds. Phoneme spectral
//! templates are drawn once from a fixed inventory seed so that corpora
//! generated for different speakers stay mutually compatible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

/// Inventory seed for the phoneme templates; shared by default so separately
/// generated corpora describe the same phoneme space.
pub const DEFAULT_TEMPLATE_SEED: u64 = 40;

/// Duration cap per token, in frames.
pub const MAX_TOKEN_FRAMES: usize = 20;

/// Latent description of a synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerLatent {
    pub seed: u64,
    pub base_pitch: f64,
    /// Pitch contour amplitude, > 0.
    pub pitch_range: f64,
    /// Duration multiplier in [0.5, 2.0].
    pub rate: f64,
    /// Per-channel additive mel offset.
    pub spectral_tilt: Vec<f64>,
    /// Circular channel shift applied to phoneme templates.
    pub formant_shift: i32,
}

/// Deterministic speaker latent from a seed.
pub fn make_speaker(seed: u64, mel_dim: usize) -> SpeakerLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_4654_5350_4b52);
    let tilt_dist = Normal::new(0.0, 0.4).expect("valid sigma");
    SpeakerLatent {
        seed,
        base_pitch: rng.random_range(-1.0..1.0),
        pitch_range: rng.random_range(0.3..1.0),
        rate: rng.random_range(0.6..1.8),
        spectral_tilt: (0..mel_dim).map(|_| tilt_dist.sample(&mut rng)).collect(),
        formant_shift: rng.random_range(-2..=2),
    }
}

/// One training sample: tokens with aligned mel, pitch and durations.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<T: Scalar> {
    pub tokens: Vec<usize>,
    /// T × mel_dim target spectrogram.
    pub mel: Mat<T>,
    /// Raw (un-normalized) per-token pitch.
    pub pitch: Vec<T>,
    /// Per-token frame counts, each ≥ 1, summing to the mel frame count.
    pub durations: Vec<usize>,
}

impl<T: Scalar> Utterance<T> {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }
}

/// Fixed per-phoneme spectral templates and base durations.
#[derive(Debug, Clone)]
pub struct PhonemeInventory {
    pub seed: u64,
    pub templates: Mat<f64>,
    pub base_durations: Vec<f64>,
}

impl PhonemeInventory {
    /// Templates are smooth across mel channels (a few low-order harmonics,
    /// standardized per phoneme) the way real spectra are, so channel shifts
    /// perturb them proportionally to the shift.
    pub fn new(seed: u64, vocab_size: usize, mel_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_4654_5456_4f43);
        let normal = Normal::new(0.0, 1.0).expect("valid sigma");
        let mut templates = Mat::zeros(vocab_size, mel_dim);
        for p in 0..vocab_size {
            let mut curve = vec![0.0f64; mel_dim];
            for k in 1..=3usize {
                let amp: f64 = normal.sample(&mut rng) / (k * k) as f64;
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                for (c, v) in curve.iter_mut().enumerate() {
                    *v += amp
                        * (std::f64::consts::TAU * k as f64 * c as f64 / mel_dim as f64 + phase)
                            .cos();
                }
            }
            let mean = curve.iter().sum::<f64>() / mel_dim as f64;
            let var = curve.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / mel_dim as f64;
            let inv = 1.0 / var.sqrt().max(1e-6);
            for (c, v) in curve.iter().enumerate() {
                templates.set(p, c, (v - mean) * inv);
            }
        }
        let base_durations = (0..vocab_size).map(|_| rng.random_range(2.0..6.0)).collect();
        PhonemeInventory {
            seed,
            templates,
            base_durations,
        }
    }
}

fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix-style mixing keeps independent streams collision-free enough
    let mut x = base
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Render one utterance. Duration jitter depends only on `utt_seed`, so two
/// speakers with the same phonemes and seed differ in durations only through
/// their rate.
pub fn render_utterance<T: Scalar>(
    tokens: &[usize],
    speaker: &SpeakerLatent,
    inventory: &PhonemeInventory,
    utt_seed: u64,
    noise_sigma: f64,
) -> Utterance<T> {
    assert!(!tokens.is_empty(), "utterance needs at least one token");
    let n = tokens.len();
    let mel_dim = inventory.templates.cols();

    let mut jitter_rng = ChaCha8Rng::seed_from_u64(mix_seed(utt_seed, 1, 0));
    let jitter_dist = Normal::new(0.0, 0.1).expect("valid sigma");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(utt_seed, 2, speaker.seed));
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");

    let mut durations = Vec::with_capacity(n);
    for &tok in tokens {
        let jitter = f64::exp(jitter_dist.sample(&mut jitter_rng));
        let frames = (speaker.rate * inventory.base_durations[tok] * jitter).round();
        durations.push((frames as usize).clamp(1, MAX_TOKEN_FRAMES));
    }

    let mut pitch = Vec::with_capacity(n);
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        let contour = (std::f64::consts::PI * u).sin();
        let noise = 0.05 * unit.sample(&mut noise_rng);
        pitch.push(speaker.base_pitch + speaker.pitch_range * contour + noise);
    }

    let total: usize = durations.iter().sum();
    let mut mel = Mat::zeros(total, mel_dim);
    let mut frame = 0;
    for (i, &tok) in tokens.iter().enumerate() {
        let template = inventory.templates.row(tok);
        for _ in 0..durations[i] {
            let row = mel.row_mut(frame);
            for (c, slot) in row.iter_mut().enumerate() {
                // circular channel shift stands in for a formant shift
                let src = (c as i64 - speaker.formant_shift as i64)
                    .rem_euclid(mel_dim as i64) as usize;
                let ripple = 0.2
                    * pitch[i]
                    * (2.0 * std::f64::consts::PI * c as f64 / mel_dim as f64).sin();
                let noise = noise_sigma * unit.sample(&mut noise_rng);
                *slot = T::from_f64(
                    template[src] + speaker.spectral_tilt[c] + ripple + noise,
                );
            }
            frame += 1;
        }
    }

    Utterance {
        tokens: tokens.to_vec(),
        mel,
        pitch: pitch.into_iter().map(T::from_f64).collect(),
        durations,
    }
}

/// Which stage a speaker's data serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Pretrain,
    Adapt,
}

#[derive(Debug, Clone)]
pub struct CorpusSpeaker<T: Scalar> {
    pub latent: SpeakerLatent,
    pub role: SpeakerRole,
    pub train: Vec<Utterance<T>>,
    pub adapt: Vec<Utterance<T>>,
    pub test: Vec<Utterance<T>>,
}

/// Pitch normalization statistics over a corpus' training-stage utterances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchStats {
    pub mean: f64,
    pub std: f64,
}

impl PitchStats {
    pub fn normalize<T: Scalar>(&self, raw: &[T]) -> Vec<T> {
        raw.iter()
            .map(|v| T::from_f64((v.as_f64() - self.mean) / self.std))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus<T: Scalar> {
    pub seed: u64,
    pub template_seed: u64,
    pub noise_sigma: f64,
    pub speakers: Vec<CorpusSpeaker<T>>,
    pub stats: PitchStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub role: SpeakerRole,
    /// Held-out utterances per adapt-role speaker.
    pub test_utts: usize,
    pub vocab_size: usize,
    pub mel_dim: usize,
    pub template_seed: u64,
    pub noise_sigma: f64,
}

impl CorpusParams {
    pub fn pretrain(n_speakers: usize, utts_per_speaker: usize, seed: u64) -> Self {
        CorpusParams {
            n_speakers,
            utts_per_speaker,
            seed,
            role: SpeakerRole::Pretrain,
            test_utts: 0,
            vocab_size: 40,
            mel_dim: 20,
            template_seed: DEFAULT_TEMPLATE_SEED,
            noise_sigma: 0.05,
        }
    }

    pub fn adapt(n_speakers: usize, utts_per_speaker: usize, seed: u64) -> Self {
        CorpusParams {
            role: SpeakerRole::Adapt,
            test_utts: 20,
            ..CorpusParams::pretrain(n_speakers, utts_per_speaker, seed)
        }
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab_size: usize) -> Vec<usize> {
    let len = rng.random_range(6..=12usize);
    (0..len).map(|_| rng.random_range(0..vocab_size)).collect()
}

/// Deterministic corpus from a parameter block.
pub fn make_corpus<T: Scalar>(p: &CorpusParams) -> Result<Corpus<T>> {
    if p.n_speakers < 1 || p.utts_per_speaker < 1 {
        return Err(Error::Input(
            "corpus needs at least one speaker and one utterance".into(),
        ));
    }
    let inventory = PhonemeInventory::new(p.template_seed, p.vocab_size, p.mel_dim);
    let mut speakers = Vec::with_capacity(p.n_speakers);
    for si in 0..p.n_speakers {
        let speaker_seed = mix_seed(p.seed, 3, si as u64);
        let latent = make_speaker(speaker_seed, p.mel_dim);
        let render = |ui: u64, stage: u64| -> Utterance<T> {
            let utt_seed = mix_seed(p.seed, 100 + stage, (si as u64) << 24 | ui);
            let mut trng = ChaCha8Rng::seed_from_u64(mix_seed(utt_seed, 4, 0));
            let tokens = random_tokens(&mut trng, p.vocab_size);
            render_utterance(&tokens, &latent, &inventory, utt_seed, p.noise_sigma)
        };
        let main: Vec<Utterance<T>> = (0..p.utts_per_speaker as u64).map(|ui| render(ui, 0)).collect();
        let test: Vec<Utterance<T>> = (0..p.test_utts as u64).map(|ui| render(ui, 1)).collect();
        let (train, adapt) = match p.role {
            SpeakerRole::Pretrain => (main, Vec::new()),
            SpeakerRole::Adapt => (Vec::new(), main),
        };
        speakers.push(CorpusSpeaker {
            latent,
            role: p.role,
            train,
            adapt,
            test,
        });
    }

    let stats = pitch_stats(&speakers);
    Ok(Corpus {
        seed: p.seed,
        template_seed: p.template_seed,
        noise_sigma: p.noise_sigma,
        speakers,
        stats,
    })
}

/// Pitch mean/std over the training-stage split only (train for pretrain
/// corpora, adapt for adaptation corpora); held-out test utterances never
/// contribute.
pub fn pitch_stats<T: Scalar>(speakers: &[CorpusSpeaker<T>]) -> PitchStats {
    let mut values = Vec::new();
    for sp in speakers {
        let split = match sp.role {
            SpeakerRole::Pretrain => &sp.train,
            SpeakerRole::Adapt => &sp.adapt,
        };
        for utt in split {
            values.extend(utt.pitch.iter().map(|v| v.as_f64()));
        }
    }
    if values.is_empty() {
        return PitchStats { mean: 0.0, std: 1.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    PitchStats {
        mean,
        std: var.sqrt().max(1e-6),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inventory() -> PhonemeInventory {
        PhonemeInventory::new(DEFAULT_TEMPLATE_SEED, 40, 20)
    }

    #[test]
    fn same_seed_gives_identical_latent() {
        assert_eq!(make_speaker(5, 20), make_speaker(5, 20));
    }

    #[test]
    fn different_seeds_give_different_latents() {
        let a = make_speaker(1, 20);
        let b = make_speaker(2, 20);
        assert_ne!(a, b);
    }

    #[test]
    fn rate_stays_in_bounds_over_seed_sweep() {
        for seed in 0..1000 {
            let s = make_speaker(seed, 20);
            assert!((0.5..=2.0).contains(&s.rate), "rate {} at seed {seed}", s.rate);
            assert!(s.pitch_range > 0.0);
        }
    }

    #[test]
    fn durations_sum_to_frame_count() {
        let inv = inventory();
        let spk = make_speaker(7, 20);
        let u: Utterance<f64> = render_utterance(&[1, 5, 9, 30], &spk, &inv, 99, 0.05);
        assert_eq!(u.durations.iter().sum::<usize>(), u.frames());
        assert!(u.durations.iter().all(|&d| d >= 1));
        assert_eq!(u.pitch.len(), 4);
    }

    #[test]
    fn doubling_rate_roughly_doubles_durations() {
        let inv = inventory();
        let mut slow = make_speaker(3, 20);
        slow.rate = 1.0;
        let mut fast = slow.clone();
        fast.rate = 2.0;
        let tokens = [2usize, 11, 19, 33, 8];
        let a: Utterance<f64> = render_utterance(&tokens, &slow, &inv, 42, 0.0);
        let b: Utterance<f64> = render_utterance(&tokens, &fast, &inv, 42, 0.0);
        for (da, db) in a.durations.iter().zip(b.durations.iter()) {
            let expect = 2 * da;
            assert!(
                (expect as i64 - *db as i64).abs() <= 1,
                "slow {da} fast {db}"
            );
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let inv = inventory();
        let spk = make_speaker(11, 20);
        for sigma in [0.0, 0.05] {
            let a: Utterance<f32> = render_utterance(&[4, 4, 17], &spk, &inv, 5, sigma);
            let b: Utterance<f32> = render_utterance(&[4, 4, 17], &spk, &inv, 5, sigma);
            assert!(a.mel.bits_eq(&b.mel));
            assert_eq!(a.pitch, b.pitch);
            assert_eq!(a.durations, b.durations);
        }
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let p = CorpusParams::pretrain(8, 50, 7);
        let c: Corpus<f32> = make_corpus(&p).unwrap();
        assert_eq!(c.speakers.len(), 8);
        let total: usize = c.speakers.iter().map(|s| s.train.len()).sum();
        assert_eq!(total, 400);

        let c2: Corpus<f32> = make_corpus(&p).unwrap();
        for (a, b) in c.speakers.iter().zip(c2.speakers.iter()) {
            assert_eq!(a.latent, b.latent);
            assert_eq!(a.train.len(), b.train.len());
            for (ua, ub) in a.train.iter().zip(b.train.iter()) {
                assert!(ua.mel.bits_eq(&ub.mel));
                assert_eq!(ua.tokens, ub.tokens);
            }
        }
    }

    #[test]
    fn adapt_corpus_has_held_out_split() {
        let p = CorpusParams::adapt(2, 25, 500);
        let c: Corpus<f32> = make_corpus(&p).unwrap();
        for sp in &c.speakers {
            assert_eq!(sp.adapt.len(), 25);
            assert_eq!(sp.test.len(), 20);
            assert!(sp.train.is_empty());
        }
        // adapt and test utterances come from distinct seeds
        assert_ne!(c.speakers[0].adapt[0].tokens, c.speakers[0].test[0].tokens);
    }

    #[test]
    fn stats_recompute_matches_train_split_only() {
        let p = CorpusParams::adapt(2, 10, 123);
        let c: Corpus<f64> = make_corpus(&p).unwrap();
        let mut values = Vec::new();
        for sp in &c.speakers {
            for utt in &sp.adapt {
                values.extend(utt.pitch.iter().cloned());
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        assert!((mean - c.stats.mean).abs() < 1e-12);
        // adding test-split pitch shifts the mean, proving they are excluded
        let mut with_test = values.clone();
        for sp in &c.speakers {
            for utt in &sp.test {
                with_test.extend(utt.pitch.iter().cloned());
            }
        }
        let mean_all = with_test.iter().sum::<f64>() / with_test.len() as f64;
        assert!((mean_all - c.stats.mean).abs() > 1e-9);
    }
}
