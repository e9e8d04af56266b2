//! Synthetic utterance generation and the feature frontend.
//!
//! Each vocabulary token owns a fixed d-frame prototype pattern (drawn once
//! from `prototype_seed`); an utterance is the concatenation of its tokens'
//! prototypes plus Gaussian noise. With zero noise and distinct prototypes
//! the token sequence is recoverable by nearest-prototype matching, so the
//! task is learnable by construction. Frame stacking (`subsample`) shortens
//! the time axis for the encoder and keeps loss lattices small.

use crate::container::{Blob, Container};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const BLANK_ID: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// T x F feature matrix.
    pub features: Tensor,
    /// Label ids in [1, V-1]; blank (0) never appears.
    pub tokens: Vec<usize>,
}

impl Utterance {
    /// 10 ms hop: T frames last exactly T/100 seconds.
    pub fn duration_seconds(&self) -> f64 {
        self.features.rows() as f64 / 100.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthTaskSpec {
    /// Vocabulary size including blank id 0.
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Frames emitted per token.
    pub frames_per_token: usize,
    pub noise_std: f64,
    /// Fixes the per-token prototype patterns.
    pub prototype_seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            vocab_size: 16,
            feat_dim: 80,
            frames_per_token: 4,
            noise_std: 0.1,
            prototype_seed: 7,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::usage("vocab_size must be >= 2 (blank plus at least one label)"));
        }
        if self.frames_per_token < 1 {
            return Err(Error::usage("frames_per_token must be >= 1"));
        }
        if self.feat_dim < 1 {
            return Err(Error::usage("feat_dim must be >= 1"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::usage("noise_std must be >= 0"));
        }
        Ok(())
    }

    /// Prototype block for one label: frames_per_token x feat_dim.
    /// Unit-ish scale keeps features comparable to the noise floor.
    pub fn prototype(&self, token: usize) -> Tensor {
        let mut rng = Rng::new(derive_seed(self.prototype_seed, token as u64));
        Tensor::randn(vec![self.frames_per_token, self.feat_dim], 1.0, &mut rng)
    }
}

/// Deterministically synthesize one utterance.
pub fn generate_utterance(spec: &SynthTaskSpec, num_tokens: usize, seed: u64) -> Result<Utterance> {
    spec.validate()?;
    if num_tokens < 1 {
        return Err(Error::usage("num_tokens must be >= 1"));
    }
    let mut rng = Rng::new(seed);
    let tokens: Vec<usize> = (0..num_tokens)
        .map(|_| rng.uniform_range(1, spec.vocab_size as u64 - 1) as usize)
        .collect();
    let t_total = num_tokens * spec.frames_per_token;
    let mut features = Tensor::zeros(vec![t_total, spec.feat_dim]);
    for (i, &tok) in tokens.iter().enumerate() {
        let proto = spec.prototype(tok);
        let off = i * spec.frames_per_token * spec.feat_dim;
        features.data[off..off + proto.numel()].copy_from_slice(&proto.data);
    }
    if spec.noise_std > 0.0 {
        for v in features.data.iter_mut() {
            *v += (rng.gaussian() * spec.noise_std) as f32;
        }
    }
    Ok(Utterance { id: format!("utt-{seed:016x}"), features, tokens })
}

/// Zero out `time_masks` random time spans of width `time_width` and
/// `freq_masks` random frequency bands of width `freq_width`.
pub fn spec_augment(
    features: &Tensor,
    time_masks: usize,
    time_width: usize,
    freq_masks: usize,
    freq_width: usize,
    seed: u64,
) -> Result<Tensor> {
    let (t, f) = (features.rows(), features.cols());
    if time_width > t {
        return Err(Error::usage(format!("time_width {time_width} exceeds T {t}")));
    }
    if freq_width > f {
        return Err(Error::usage(format!("freq_width {freq_width} exceeds F {f}")));
    }
    let mut out = features.clone();
    let mut rng = Rng::new(seed);
    for _ in 0..time_masks {
        if time_width == 0 {
            continue;
        }
        let start = rng.uniform_range(0, (t - time_width) as u64) as usize;
        for row in start..start + time_width {
            for c in 0..f {
                out.data[row * f + c] = 0.0;
            }
        }
    }
    for _ in 0..freq_masks {
        if freq_width == 0 {
            continue;
        }
        let start = rng.uniform_range(0, (f - freq_width) as u64) as usize;
        for row in 0..t {
            for c in start..start + freq_width {
                out.data[row * f + c] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Frame stacking: output row j concatenates input rows j*factor ..
/// j*factor+factor-1, zero-padded past the end; T' = ceil(T/factor).
pub fn subsample(features: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::usage("subsample factor must be >= 1"));
    }
    let (t, f) = (features.rows(), features.cols());
    let t_out = t.div_ceil(factor);
    let mut out = Tensor::zeros(vec![t_out, f * factor]);
    for j in 0..t_out {
        for k in 0..factor {
            let src = j * factor + k;
            if src < t {
                let dst = j * f * factor + k * f;
                out.data[dst..dst + f].copy_from_slice(&features.data[src * f..(src + 1) * f]);
            }
        }
    }
    Ok(out)
}

// ---- dataset persistence ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Feature-container path, relative to the manifest file.
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub utterances: Vec<ManifestEntry>,
}

/// In-memory dataset: manifest plus loaded feature matrices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Synthesize a dataset in memory (used by tests and as the backing
    /// generator for `write_dataset`). Utterance u gets seed
    /// derive_seed(seed, u); lengths are uniform in [min_tokens, max_tokens].
    pub fn synth(
        spec: &SynthTaskSpec,
        count: usize,
        min_tokens: usize,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::usage("dataset must contain at least one utterance"));
        }
        if min_tokens < 1 || max_tokens < min_tokens {
            return Err(Error::usage("need 1 <= min_tokens <= max_tokens"));
        }
        let mut len_rng = Rng::new(derive_seed(seed, u64::MAX));
        let mut utterances = Vec::with_capacity(count);
        for u in 0..count {
            let n = len_rng.uniform_range(min_tokens as u64, max_tokens as u64) as usize;
            let mut utt = generate_utterance(spec, n, derive_seed(seed, u as u64))?;
            utt.id = format!("utt-{u:05}");
            utterances.push(utt);
        }
        Ok(Dataset { vocab_size: spec.vocab_size, feat_dim: spec.feat_dim, utterances })
    }

    /// Flip each transcript token with probability `rate` to a uniformly
    /// random *different* label, leaving features untouched. Models noisy /
    /// pseudo-labelled training transcripts; references for evaluation should
    /// come from an uncorrupted dataset. Returns the number of flipped tokens.
    pub fn corrupt_transcripts(&mut self, rate: f64, seed: u64) -> Result<usize> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::usage(format!("label-noise rate {rate} outside [0, 1]")));
        }
        if self.vocab_size < 3 && rate > 0.0 {
            return Err(Error::usage(
                "label noise needs at least two distinct labels to swap between",
            ));
        }
        let mut rng = Rng::new(seed);
        let mut flipped = 0;
        for utt in &mut self.utterances {
            for tok in &mut utt.tokens {
                if rng.uniform() < rate {
                    let mut repl = *tok;
                    while repl == *tok {
                        repl = rng.uniform_range(1, self.vocab_size as u64 - 1) as usize;
                    }
                    *tok = repl;
                    flipped += 1;
                }
            }
        }
        Ok(flipped)
    }
}

/// Write a dataset to disk: `manifest.json` plus one feature container per
/// utterance under `feats/`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let feat_dir = dir.join("feats");
    std::fs::create_dir_all(&feat_dir)?;
    let mut entries = Vec::with_capacity(dataset.len());
    for utt in &dataset.utterances {
        let rel = format!("feats/{}.feat", utt.id);
        let mut c = Container::new(serde_json::json!({"kind": "features", "id": utt.id}));
        c.push("features", Blob::from_tensor(&utt.features));
        c.push(
            "tokens",
            Blob::I32 {
                shape: vec![utt.tokens.len()],
                data: utt.tokens.iter().map(|&t| t as i32).collect(),
            },
        );
        c.save(dir.join(&rel))?;
        entries.push(ManifestEntry { id: utt.id.clone(), tokens: utt.tokens.clone(), path: rel });
    }
    let manifest = Manifest {
        version: 1,
        vocab_size: dataset.vocab_size,
        feat_dim: dataset.feat_dim,
        utterances: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialize: {e}")))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Load a dataset from a manifest path written by `write_dataset`.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Config(format!("unsupported manifest version {}", manifest.version)));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for e in &manifest.utterances {
        let c = Container::load(base.join(&e.path))?;
        let features = c
            .get("features")
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing features blob", e.path)))?
            .to_tensor()?;
        for &t in &e.tokens {
            if t == BLANK_ID || t >= manifest.vocab_size {
                return Err(Error::Config(format!(
                    "utterance {}: token {t} out of range for vocab {}",
                    e.id, manifest.vocab_size
                )));
            }
        }
        utterances.push(Utterance { id: e.id.clone(), features, tokens: e.tokens.clone() });
    }
    Ok(Dataset {
        vocab_size: manifest.vocab_size,
        feat_dim: manifest.feat_dim,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthTaskSpec {
        SynthTaskSpec { vocab_size: 8, feat_dim: 6, frames_per_token: 4, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec();
        let a = generate_utterance(&s, 5, 42).unwrap();
        let b = generate_utterance(&s, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_utterance(&s, 5, 43).unwrap();
        assert_ne!(a.features.data, c.features.data);
    }

    #[test]
    fn shape_and_duration() {
        let s = spec();
        let u = generate_utterance(&s, 3, 1).unwrap();
        assert_eq!(u.features.shape, vec![12, 6]); // 3 tokens x 4 frames
        assert!((u.duration_seconds() - 0.12).abs() < 1e-12);
        assert!(u.tokens.iter().all(|&t| t >= 1 && t < s.vocab_size));
    }

    #[test]
    fn zero_noise_same_tokens_same_features() {
        let s = SynthTaskSpec { noise_std: 0.0, ..spec() };
        // find two seeds with identical token sequences
        let a = generate_utterance(&s, 2, 10).unwrap();
        for seed in 11..500 {
            let b = generate_utterance(&s, 2, seed).unwrap();
            if b.tokens == a.tokens {
                assert_eq!(a.features.data, b.features.data);
                return;
            }
        }
        panic!("no seed with matching token sequence found");
    }

    #[test]
    fn zero_noise_nearest_prototype_recovers_tokens() {
        let s = SynthTaskSpec { noise_std: 0.0, ..spec() };
        let u = generate_utterance(&s, 6, 3).unwrap();
        let d = s.frames_per_token;
        for (i, &tok) in u.tokens.iter().enumerate() {
            let block = &u.features.data[i * d * s.feat_dim..(i + 1) * d * s.feat_dim];
            let mut best = (f64::INFINITY, 0);
            for cand in 1..s.vocab_size {
                let proto = s.prototype(cand);
                let dist: f64 = proto
                    .data
                    .iter()
                    .zip(block)
                    .map(|(p, x)| ((p - x) as f64).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, cand);
                }
            }
            assert_eq!(best.1, tok, "block {i}");
        }
    }

    #[test]
    fn augment_identity_full_mask_and_determinism() {
        let s = spec();
        let u = generate_utterance(&s, 3, 5).unwrap();
        let same = spec_augment(&u.features, 0, 0, 0, 0, 9).unwrap();
        assert_eq!(same, u.features);

        let t = u.features.rows();
        let zeroed = spec_augment(&u.features, 1, t, 0, 0, 9).unwrap();
        assert!(zeroed.data.iter().all(|v| *v == 0.0));

        let m1 = spec_augment(&u.features, 2, 3, 1, 2, 77).unwrap();
        let m2 = spec_augment(&u.features, 2, 3, 1, 2, 77).unwrap();
        assert_eq!(m1, m2);

        assert!(spec_augment(&u.features, 1, t + 1, 0, 0, 9).is_err());
    }

    #[test]
    fn augment_masked_cell_budget() {
        let s = spec();
        let u = generate_utterance(&s, 4, 6).unwrap();
        let (t, f) = (u.features.rows(), u.features.cols());
        let (tm, tw, fm, fw) = (2usize, 3usize, 1usize, 2usize);
        let masked = spec_augment(&u.features, tm, tw, fm, fw, 5).unwrap();
        let changed = masked
            .data
            .iter()
            .zip(&u.features.data)
            .filter(|(a, b)| a != b)
            .count();
        assert!(changed <= tm * tw * f + fm * fw * t);
    }

    #[test]
    fn subsample_shapes_and_roundtrip() {
        let s = spec();
        let u = generate_utterance(&s, 3, 4).unwrap();

        let id = subsample(&u.features, 1).unwrap();
        assert_eq!(id, u.features);

        // T=12, factor=5 -> T'=3, last row padded by 3 frames
        let st = subsample(&u.features, 5).unwrap();
        assert_eq!(st.shape, vec![3, 30]);
        let f = u.features.cols();
        // un-stack and compare against originals (ignore padding)
        for j in 0..st.rows() {
            for k in 0..5 {
                let src = j * 5 + k;
                let stacked = &st.data[j * f * 5 + k * f..j * f * 5 + (k + 1) * f];
                if src < u.features.rows() {
                    assert_eq!(stacked, u.features.row(src), "row {src}");
                } else {
                    assert!(stacked.iter().all(|v| *v == 0.0));
                }
            }
        }

        assert!(subsample(&u.features, 0).is_err());
    }

    #[test]
    fn odd_length_subsample_shape() {
        // T=5, factor=2 -> T'=3 with one padded frame
        let feats = Tensor::randn(vec![5, 3], 1.0, &mut Rng::new(2));
        let st = subsample(&feats, 2).unwrap();
        assert_eq!(st.shape, vec![3, 6]);
        assert!(st.data[st.numel() - 3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dataset_write_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let ds = Dataset::synth(&s, 4, 2, 5, 11).unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.vocab_size, ds.vocab_size);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.utterances.iter().zip(&back.utterances) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn dataset_synth_reproducible() {
        let s = spec();
        let a = Dataset::synth(&s, 6, 2, 4, 3).unwrap();
        let b = Dataset::synth(&s, 6, 2, 4, 3).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn bad_args_rejected() {
        let s = spec();
        assert!(generate_utterance(&s, 0, 1).is_err());
        let bad = SynthTaskSpec { vocab_size: 1, ..spec() };
        assert!(generate_utterance(&bad, 3, 1).is_err());
        assert!(Dataset::synth(&s, 0, 1, 2, 1).is_err());
        assert!(Dataset::synth(&s, 3, 3, 2, 1).is_err());
    }

    #[test]
    fn label_noise_flips_expected_fraction_and_nothing_else() {
        let s = spec();
        let clean = Dataset::synth(&s, 64, 2, 5, 17).unwrap();
        let mut noisy = clean.clone();
        let flipped = noisy.corrupt_transcripts(0.25, 99).unwrap();

        let total: usize = clean.utterances.iter().map(|u| u.tokens.len()).sum();
        let diffs: usize = clean
            .utterances
            .iter()
            .zip(&noisy.utterances)
            .map(|(a, b)| a.tokens.iter().zip(&b.tokens).filter(|(x, y)| x != y).count())
            .sum();
        assert_eq!(diffs, flipped);
        // binomial(total, 0.25): stay within ~4 sigma of the mean
        let (mean, sd) = (0.25 * total as f64, (0.25f64 * 0.75 * total as f64).sqrt());
        assert!(
            (flipped as f64 - mean).abs() < 4.0 * sd,
            "flipped {flipped}/{total}, expected near {mean:.1}"
        );
        for (a, b) in clean.utterances.iter().zip(&noisy.utterances) {
            assert_eq!(a.features, b.features, "features must be untouched");
            assert!(b.tokens.iter().all(|&t| t >= 1 && t < s.vocab_size));
        }
    }

    #[test]
    fn label_noise_deterministic_and_degenerate_cases() {
        let s = spec();
        let base = Dataset::synth(&s, 8, 2, 4, 5).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        a.corrupt_transcripts(0.4, 7).unwrap();
        b.corrupt_transcripts(0.4, 7).unwrap();
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.tokens, y.tokens);
        }

        let mut zero = base.clone();
        assert_eq!(zero.corrupt_transcripts(0.0, 7).unwrap(), 0);
        for (x, y) in zero.utterances.iter().zip(&base.utterances) {
            assert_eq!(x.tokens, y.tokens);
        }

        let mut bad = base.clone();
        assert!(bad.corrupt_transcripts(1.5, 7).is_err());
        assert!(bad.corrupt_transcripts(-0.1, 7).is_err());
    }
}
