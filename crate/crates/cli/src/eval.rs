//! Evaluation command: sweeps sampler settings over a held-out dataset and
//! reports exact-match accuracy with bootstrap confidence intervals plus
//! the mean unigram entropy of the generated positions.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use sphereflow_core::analysis::{bootstrap_ci, unigram_entropy};
use sphereflow_core::checkpoint::Checkpoint;
use sphereflow_core::codebook::Codebook;
use sphereflow_core::denoiser::Denoiser;
use sphereflow_core::sampler::{
    sample, Conditioning, DenoiserPosterior, PosteriorModel, SamplerConfig, Velocity,
};
use sphereflow_core::schedule::Schedule;
use sphereflow_core::tasks::{decode, read_dataset, EncodedSequence, SudokuSpec};

use crate::config::Config;
use crate::plot::{line_chart, Series};
use crate::{
    build_schedule, ckpt_read_err, io_err, mix_seed, parse_velocity, sampler_err, task_err,
    velocity_name, CliError,
};

pub const RESULTS_FILE: &str = "eval_results.csv";
pub const ACCURACY_PLOT: &str = "accuracy_vs_nfe.svg";

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub nfe: usize,
    pub velocity: Velocity,
    pub temperature: f64,
    pub n: usize,
    pub accuracy: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub mean_entropy: f64,
}

/// Runs one sweep cell. Each sequence is sampled with its clean positions
/// pinned and judged by exact token match against the reference; entropy is
/// the unigram entropy of the generated positions.
pub fn eval_cell<M: PosteriorModel + Sync>(
    model: &M,
    codebook: &Codebook,
    schedule: &Schedule,
    sequences: &[EncodedSequence],
    nfe: usize,
    velocity: Velocity,
    temperature: f64,
    bootstrap: usize,
    seed: u64,
) -> Result<EvalRow, CliError> {
    if nfe < 2 {
        return Err(CliError::Config(format!(
            "nfe {nfe} is too small: one integration step plus the decode pass needs 2"
        )));
    }
    if sequences.is_empty() {
        return Err(CliError::Config("evaluation dataset is empty".into()));
    }
    let vocab = model.vocab_size();
    let results: Vec<(bool, f64)> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| -> Result<(bool, f64), CliError> {
            // Reference tokens at free positions must not leak into the
            // sampler, so they are blanked in the conditioning.
            let cond_tokens: Vec<usize> = seq
                .tokens
                .iter()
                .zip(&seq.clean_mask)
                .map(|(&t, &c)| if c { t } else { 0 })
                .collect();
            let cfg = SamplerConfig {
                steps: nfe - 1,
                velocity,
                temperature,
                schedule: schedule.clone(),
                length: seq.tokens.len(),
                conditioning: Some(Conditioning {
                    tokens: cond_tokens,
                    clean: seq.clean_mask.clone(),
                }),
                seed: mix_seed(seed, i as u64),
            };
            let report = sample(model, codebook, &cfg).map_err(sampler_err)?;
            let exact = report.tokens == seq.tokens;
            let generated: Vec<usize> = report
                .tokens
                .iter()
                .zip(&seq.clean_mask)
                .filter(|(_, &c)| !c)
                .map(|(&t, _)| t)
                .collect();
            let entropy = unigram_entropy(&generated, vocab)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok((exact, entropy))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let outcomes: Vec<bool> = results.iter().map(|r| r.0).collect();
    let accuracy = outcomes.iter().filter(|&&b| b).count() as f64 / outcomes.len() as f64;
    let (_, ci_lo, ci_hi) = bootstrap_ci(&outcomes, bootstrap, 0.95, mix_seed(seed, 0xC1))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mean_entropy = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    Ok(EvalRow {
        nfe,
        velocity,
        temperature,
        n: sequences.len(),
        accuracy,
        ci_lo,
        ci_hi,
        mean_entropy,
    })
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut csv = String::from("nfe,velocity,temperature,n,accuracy,ci_lo,ci_hi,mean_entropy\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.nfe,
            velocity_name(r.velocity),
            r.temperature,
            r.n,
            r.accuracy,
            r.ci_lo,
            r.ci_hi,
            r.mean_entropy
        ));
    }
    csv
}

fn accuracy_plot(rows: &[EvalRow]) -> String {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = format!("{} T={}", velocity_name(r.velocity), r.temperature);
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((r.nfe as f64, r.accuracy)),
            None => series
                .push(Series { label, points: vec![(r.nfe as f64, r.accuracy)] }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    line_chart("Exact match vs forward passes", "forward passes", "accuracy", &series)
}

pub fn cmd_eval(cfg: &Config, checkpoint: &Path, dataset: &Path) -> Result<(), CliError> {
    let out = PathBuf::from(cfg.str_("out"));
    fs::create_dir_all(&out).map_err(|e| io_err("cannot create output directory", e))?;

    let ckpt = Checkpoint::read(checkpoint).map_err(|e| ckpt_read_err(checkpoint, e))?;
    let model = Denoiser::new(ckpt.model.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let (params, codebook) = if cfg.bool_("eval.use_ema") {
        ckpt.state.ema_weights()
    } else {
        (&ckpt.state.params, &ckpt.state.codebook)
    };

    let (mut sequences, meta) = read_dataset(dataset).map_err(task_err)?;
    if meta.vocab_size != ckpt.model.vocab_size {
        return Err(CliError::Config(format!(
            "incompatible checkpoint: model vocabulary {} but dataset uses {}",
            ckpt.model.vocab_size, meta.vocab_size
        )));
    }
    if meta.clean_prefix_len >= meta.seq_len {
        return Err(CliError::Config(
            "dataset conditions on every position; there is nothing to evaluate".into(),
        ));
    }
    // Board datasets must carry complete answers to score against.
    if meta.box_n >= 2 {
        let spec = SudokuSpec::new(meta.box_n).map_err(task_err)?;
        for (i, seq) in sequences.iter().enumerate() {
            let (_, solution) = decode(&spec, &seq.tokens).map_err(|e| {
                CliError::Config(format!("dataset sequence {i}: {e}"))
            })?;
            if solution.contains(&0) {
                return Err(CliError::Config(format!(
                    "dataset sequence {i} is missing ground truth (blank answer cells)"
                )));
            }
        }
    }
    let limit = cfg.usize_("eval.max_sequences");
    if limit > 0 && sequences.len() > limit {
        sequences.truncate(limit);
    }

    let schedule = match cfg.str_("eval.schedule") {
        "config" => build_schedule(cfg)?,
        _ => ckpt.state.schedule.clone(),
    };
    let bootstrap = cfg.usize_("eval.bootstrap");
    let seed = cfg.u64_("seed");
    let topk = cfg.usize_("sample.topk");

    let posterior = DenoiserPosterior { model: &model, params };
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for &nfe in &cfg.list_usize("eval.nfe") {
        for vname in cfg.list_str("eval.velocity") {
            for &temperature in &cfg.list_f64("eval.temperature") {
                let velocity = parse_velocity(&vname, topk)?;
                rows.push(eval_cell(
                    &posterior,
                    codebook,
                    &schedule,
                    &sequences,
                    nfe,
                    velocity,
                    temperature,
                    bootstrap,
                    mix_seed(seed, cell),
                )?);
                cell += 1;
            }
        }
    }

    fs::write(out.join(RESULTS_FILE), rows_to_csv(&rows))
        .map_err(|e| io_err("cannot write results", e))?;
    fs::write(out.join(ACCURACY_PLOT), accuracy_plot(&rows))
        .map_err(|e| io_err("cannot write plot", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sphereflow_core::sampler::SamplerError;

    /// Posterior that always points at a stored target sequence, regardless
    /// of the latent state.
    struct OracleModel {
        target: Vec<usize>,
        vocab: usize,
        dim: usize,
    }

    impl PosteriorModel for OracleModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn logits(
            &self,
            z: &sphereflow_core::denoiser::math::SeqMat,
            _t: f64,
        ) -> Result<sphereflow_core::denoiser::math::SeqMat, SamplerError> {
            let mut out = sphereflow_core::denoiser::math::SeqMat::zeros(z.rows, self.vocab);
            for l in 0..z.rows {
                out.row_mut(l)[self.target[l]] = 40.0;
            }
            Ok(out)
        }
    }

    fn unit_codebook(vocab: usize, dim: usize) -> Codebook {
        let mut raw = vec![0.0; vocab * dim];
        for v in 0..vocab {
            raw[v * dim + (v % dim)] = 1.0;
        }
        Codebook::from_raw(vocab, dim, raw).unwrap()
    }

    fn dataset(target: &[usize], n: usize) -> Vec<EncodedSequence> {
        (0..n)
            .map(|_| EncodedSequence {
                tokens: target.to_vec(),
                clean_mask: target.iter().map(|_| false).collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_model_scores_one_with_degenerate_interval() {
        let target = vec![3, 1, 4, 1, 5];
        let model = OracleModel { target: target.clone(), vocab: 6, dim: 8 };
        let codebook = unit_codebook(6, 8);
        let schedule = Schedule::linear(1.0).unwrap();
        let seqs = dataset(&target, 12);
        let row = eval_cell(
            &model,
            &codebook,
            &schedule,
            &seqs,
            8,
            Velocity::Exact,
            1.0,
            200,
            7,
        )
        .unwrap();
        assert_eq!(row.accuracy, 1.0);
        assert_eq!((row.ci_lo, row.ci_hi), (1.0, 1.0));
        assert_eq!(row.n, 12);
        // Entropy of the fixed output tokens: 1 appears twice in 5 draws.
        let expected = unigram_entropy(&target, 6).unwrap();
        assert!((row.mean_entropy - expected).abs() < 1e-12);
    }

    #[test]
    fn nfe_below_two_is_rejected() {
        let target = vec![0, 1];
        let model = OracleModel { target: target.clone(), vocab: 3, dim: 4 };
        let codebook = unit_codebook(3, 4);
        let schedule = Schedule::linear(1.0).unwrap();
        let seqs = dataset(&target, 2);
        let err = eval_cell(
            &model,
            &codebook,
            &schedule,
            &seqs,
            1,
            Velocity::Exact,
            1.0,
            50,
            7,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn csv_layout_has_one_row_per_cell() {
        let rows = vec![
            EvalRow {
                nfe: 2,
                velocity: Velocity::Exact,
                temperature: 1.0,
                n: 4,
                accuracy: 0.5,
                ci_lo: 0.25,
                ci_hi: 0.75,
                mean_entropy: 1.0,
            },
            EvalRow {
                nfe: 2,
                velocity: Velocity::TopK { k: 3 },
                temperature: 0.5,
                n: 4,
                accuracy: 0.25,
                ci_lo: 0.0,
                ci_hi: 0.5,
                mean_entropy: 0.5,
            },
        ];
        let csv = rows_to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "nfe,velocity,temperature,n,accuracy,ci_lo,ci_hi,mean_entropy");
        assert!(lines[1].starts_with("2,exact,1,4,0.5,"));
        assert!(lines[2].starts_with("2,topk3,0.5,4,"));
    }

    #[test]
    fn free_positions_do_not_leak_reference_tokens() {
        // A model that ignores its input but differs from the reference:
        // accuracy must be 0, proving the reference is not copied through.
        let target = vec![2, 2, 2, 2];
        let reference = vec![1, 1, 1, 1];
        let model = OracleModel { target, vocab: 3, dim: 4 };
        let codebook = unit_codebook(3, 4);
        let schedule = Schedule::linear(1.0).unwrap();
        let seqs = dataset(&reference, 5);
        let row = eval_cell(
            &model,
            &codebook,
            &schedule,
            &seqs,
            4,
            Velocity::Exact,
            1.0,
            100,
            3,
        )
        .unwrap();
        assert_eq!(row.accuracy, 0.0);
        assert_eq!((row.ci_lo, row.ci_hi), (0.0, 0.0));
    }

}
