//! Wall-clock latency benchmark for the two decoding passes.
//!
//! One repetition decodes the whole dataset and records, per pass, the total
//! time spent: the streaming pass covers frame stacking, the causal encoder,
//! and greedy decoding; the refinement pass covers the non-causal encoder
//! and the beam search, reusing the streaming pass's tape. Medians over
//! repetitions tame scheduler noise; dispersion is reported as the median
//! absolute deviation.

use std::time::Instant;

use serde::Serialize;

use crate::data::Dataset;
use crate::decode::{first_pass, second_pass};
use crate::error::{Error, Result};
use crate::model::CascadedModel;

pub const MIN_REPETITIONS: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    /// Median over repetitions of the per-repetition total, in milliseconds.
    pub median_ms: f64,
    /// Median absolute deviation of the same totals.
    pub mad_ms: f64,
    /// Real-time factor: median processing seconds per second of audio.
    pub xrt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub machine: String,
    pub repetitions: usize,
    pub beam: usize,
    pub utterances: usize,
    pub audio_seconds: f64,
    pub first_pass: LatencyStats,
    pub second_pass: LatencyStats,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_abs_deviation(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// CPU model and logical core count, from /proc/cpuinfo where available.
pub fn machine_descriptor() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{cpu} ({cores} cores)")
}

fn stats(totals_secs: &[f64], audio_seconds: f64) -> LatencyStats {
    let secs: Vec<f64> = totals_secs.to_vec();
    let med = median(&secs);
    LatencyStats {
        median_ms: med * 1e3,
        mad_ms: median_abs_deviation(&secs) * 1e3,
        xrt: med / audio_seconds,
    }
}

pub fn benchmark_latency(
    model: &CascadedModel,
    dataset: &Dataset,
    repetitions: usize,
    beam: usize,
) -> Result<BenchReport> {
    if dataset.utterances.is_empty() {
        return Err(Error::usage("cannot benchmark an empty dataset"));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(Error::usage(format!(
            "need at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let audio_seconds: f64 = dataset.utterances.iter().map(|u| u.duration_seconds()).sum();

    let mut first_totals = Vec::with_capacity(repetitions);
    let mut second_totals = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let (mut t_first, mut t_second) = (0.0f64, 0.0f64);
        for utt in &dataset.utterances {
            let start = Instant::now();
            let fp = first_pass(model, &utt.features)?;
            t_first += start.elapsed().as_secs_f64();

            let start = Instant::now();
            let _refined = second_pass(fp, beam)?;
            t_second += start.elapsed().as_secs_f64();
        }
        first_totals.push(t_first);
        second_totals.push(t_second);
    }

    Ok(BenchReport {
        machine: machine_descriptor(),
        repetitions,
        beam,
        utterances: dataset.utterances.len(),
        audio_seconds,
        first_pass: stats(&first_totals, audio_seconds),
        second_pass: stats(&second_totals, audio_seconds),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderConfig, ModelConfig};
    use crate::data::SynthTaskSpec;

    fn tiny_model() -> CascadedModel {
        let cfg = ModelConfig {
            feat_dim: 8,
            subsample_factor: 2,
            d_model: 8,
            num_heads: 2,
            conv_kernel: 3,
            ffn_expansion: 2,
            causal_layers: 1,
            noncausal_layers: 1,
            vocab_size: 8,
            decoder: DecoderConfig::Tar { embed_dim: 8, context: 5, heads: 2, tied: true },
        };
        CascadedModel::new(&cfg, 2).unwrap()
    }

    fn tiny_dataset() -> Dataset {
        let spec = SynthTaskSpec {
            vocab_size: 8,
            feat_dim: 8,
            frames_per_token: 4,
            noise_std: 0.05,
            prototype_seed: 7,
        };
        Dataset::synth(&spec, 3, 2, 4, 41).unwrap()
    }

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median_abs_deviation(&[1.0, 1.0, 4.0]), 0.0);
        assert_eq!(median_abs_deviation(&[1.0, 2.0, 9.0]), 1.0);
    }

    #[test]
    fn report_has_positive_finite_stats() {
        let report = benchmark_latency(&tiny_model(), &tiny_dataset(), 3, 2).unwrap();
        assert_eq!(report.repetitions, 3);
        assert_eq!(report.utterances, 3);
        assert!(report.audio_seconds > 0.0);
        for s in [&report.first_pass, &report.second_pass] {
            assert!(s.median_ms > 0.0 && s.median_ms.is_finite());
            assert!(s.mad_ms >= 0.0 && s.mad_ms.is_finite());
            assert!(s.xrt > 0.0 && s.xrt.is_finite());
        }
        assert!(!report.machine.is_empty());
    }

    #[test]
    fn too_few_repetitions_rejected() {
        match benchmark_latency(&tiny_model(), &tiny_dataset(), 2, 2) {
            Err(Error::Usage(msg)) => assert!(msg.contains("repetitions"), "{msg}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = Dataset { vocab_size: 8, feat_dim: 8, utterances: Vec::new() };
        assert!(matches!(
            benchmark_latency(&tiny_model(), &ds, 3, 2),
            Err(Error::Usage(_))
        ));
    }
}
