//! Sampling command: loads a checkpoint, runs the geodesic Euler sampler,
//! and writes one JSON report with tokens, decoded boards where the task
//! applies, and the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sphereflow_core::checkpoint::Checkpoint;
use sphereflow_core::denoiser::Denoiser;
use sphereflow_core::sampler::{sample, Conditioning, DenoiserPosterior, SamplerConfig};
use sphereflow_core::tasks::{decode, encode, generate_puzzle, is_valid_solution, SudokuSpec};

use crate::config::Config;
use crate::train::parse_difficulty;
use crate::{build_schedule, ckpt_read_err, io_err, parse_velocity, sampler_err, task_err, CliError};

pub const SAMPLES_FILE: &str = "samples.json";

pub fn cmd_sample(cfg: &Config, checkpoint: &Path) -> Result<(), CliError> {
    let out = PathBuf::from(cfg.str_("out"));
    fs::create_dir_all(&out).map_err(|e| io_err("cannot create output directory", e))?;

    let ckpt = Checkpoint::read(checkpoint).map_err(|e| ckpt_read_err(checkpoint, e))?;
    let model = Denoiser::new(ckpt.model.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let (params, codebook) = if cfg.bool_("sample.use_ema") {
        ckpt.state.ema_weights()
    } else {
        (&ckpt.state.params, &ckpt.state.codebook)
    };
    if codebook.vocab_size() != ckpt.model.vocab_size || codebook.dim() != ckpt.model.dim {
        return Err(CliError::Config(format!(
            "incompatible checkpoint: codebook {}x{} does not match model vocabulary {} width {}",
            codebook.vocab_size(),
            codebook.dim(),
            ckpt.model.vocab_size,
            ckpt.model.dim
        )));
    }

    let velocity = parse_velocity(cfg.str_("sample.velocity"), cfg.usize_("sample.topk"))?;
    let schedule = match cfg.str_("sample.schedule") {
        "config" => build_schedule(cfg)?,
        _ => ckpt.state.schedule.clone(),
    };
    let seed = cfg.u64_("seed");
    let steps = cfg.usize_("sample.steps");
    let temperature = cfg.f64_("sample.temperature");
    let count = cfg.usize_("sample.count");
    let sudoku_mode = cfg.str_("sample.mode") == "sudoku";

    let board = if sudoku_mode {
        let spec = SudokuSpec::new(cfg.usize_("task.box_n")).map_err(task_err)?;
        if ckpt.model.vocab_size != spec.vocab_size() {
            return Err(CliError::Config(format!(
                "incompatible checkpoint: vocabulary {} does not fit a {}x{} board (needs {})",
                ckpt.model.vocab_size,
                spec.side(),
                spec.side(),
                spec.vocab_size()
            )));
        }
        Some(spec)
    } else {
        None
    };
    let visible = board
        .as_ref()
        .map(|spec| parse_difficulty(cfg.str_("task.difficulty")).visible_cells(spec));

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let (length, conditioning, reference) = match &board {
            Some(spec) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1000 + i as u64);
                let puzzle =
                    generate_puzzle(spec, visible.unwrap(), &mut rng).map_err(task_err)?;
                let enc = encode(spec, &puzzle);
                (
                    spec.seq_len(),
                    Some(Conditioning { tokens: enc.tokens, clean: enc.clean_mask }),
                    Some(puzzle),
                )
            }
            None => (cfg.usize_("sample.length"), None, None),
        };
        let scfg = SamplerConfig {
            steps,
            velocity,
            temperature,
            schedule: schedule.clone(),
            length,
            conditioning,
            seed: seed.wrapping_add(i as u64),
        };
        let report = sample(&DenoiserPosterior { model: &model, params }, codebook, &scfg)
            .map_err(sampler_err)?;

        let mut entry = json!({
            "tokens": report.tokens,
            "nfe": report.nfe,
            "seed": report.seed,
            "step_entropy": report.step_entropy,
            "antipodal_dropped": report.antipodal_dropped,
            "max_norm_drift": report.max_norm_drift,
        });
        if let (Some(spec), Some(puzzle)) = (&board, reference) {
            // The separators inside the answer section are generated, so an
            // undertrained model can emit a malformed layout; that counts as
            // a miss rather than an error.
            entry["sudoku"] = match decode(spec, &report.tokens) {
                Ok((grid, solution)) => {
                    let valid = !solution.contains(&0)
                        && is_valid_solution(spec, &solution, &grid).map_err(task_err)?;
                    json!({
                        "well_formed": true,
                        "puzzle": grid,
                        "predicted": solution,
                        "reference": puzzle.solution,
                        "valid": valid,
                        "exact": solution == puzzle.solution,
                    })
                }
                Err(_) => json!({
                    "well_formed": false,
                    "reference": puzzle.solution,
                    "valid": false,
                    "exact": false,
                }),
            };
        }
        samples.push(entry);
    }

    let doc = json!({
        "seed": seed,
        "nfe": steps + 1,
        "config": cfg.entries(),
        "samples": samples,
    });
    let path = out.join(SAMPLES_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc).expect("json encoding") + "\n")
        .map_err(|e| io_err("cannot write samples", e))?;
    Ok(())
}
