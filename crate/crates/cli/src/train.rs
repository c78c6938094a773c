//! Training command: builds (or reloads) a dataset, runs the optimizer
//! loop, streams per-step metrics, and writes checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sphereflow_core::checkpoint::Checkpoint;
use sphereflow_core::tasks::{
    copy_task, encode, generate_disjoint_splits, read_dataset, write_dataset, DatasetMeta,
    Difficulty, EncodedSequence, SudokuSpec,
};
use sphereflow_core::trainer::{TrainSequence, TrainState, Trainer};

use crate::config::Config;
use crate::{build_model_config, build_train_config, ckpt_read_err, io_err, task_err, CliError};

pub const DATASET_TRAIN: &str = "dataset_train.txt";
pub const DATASET_EVAL: &str = "dataset_eval.txt";
pub const METRICS_FILE: &str = "train_metrics.csv";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final.bin";
pub const CHECKPOINT_EMA: &str = "checkpoint_ema.bin";
pub const SCHEDULE_FINAL: &str = "schedule_final.json";

pub fn parse_difficulty(name: &str) -> Difficulty {
    match name {
        "hard" => Difficulty::Hard,
        "medium" => Difficulty::Medium,
        _ => Difficulty::Easy,
    }
}

fn to_train_sequences(encoded: &[EncodedSequence]) -> Vec<TrainSequence> {
    encoded
        .iter()
        .map(|e| TrainSequence { tokens: e.tokens.clone(), clean: e.clean_mask.clone() })
        .collect()
}

/// Generates the training corpus, writes it (plus a held-out split for the
/// board task) under `out`, and returns the sequences with the vocabulary.
fn build_dataset(
    cfg: &Config,
    out: &Path,
    seed: u64,
) -> Result<(Vec<TrainSequence>, usize), CliError> {
    match cfg.str_("task.kind") {
        "sudoku" => {
            let spec = SudokuSpec::new(cfg.usize_("task.box_n")).map_err(task_err)?;
            let visible = parse_difficulty(cfg.str_("task.difficulty")).visible_cells(&spec);
            let sizes = [cfg.usize_("task.train_size"), cfg.usize_("task.eval_size")];
            let splits = generate_disjoint_splits(&spec, &sizes, visible, seed)
                .map_err(task_err)?;
            let meta = DatasetMeta::for_spec(&spec);
            let mut encoded_splits = Vec::new();
            for split in &splits {
                let encoded: Vec<EncodedSequence> =
                    split.iter().map(|p| encode(&spec, p)).collect();
                encoded_splits.push(encoded);
            }
            for (name, encoded) in [(DATASET_TRAIN, &encoded_splits[0]),
                (DATASET_EVAL, &encoded_splits[1])]
            {
                let refs: Vec<&EncodedSequence> = encoded.iter().collect();
                write_dataset(&out.join(name), &refs, &meta).map_err(task_err)?;
            }
            Ok((to_train_sequences(&encoded_splits[0]), spec.vocab_size()))
        }
        _ => {
            let length = cfg.usize_("task.copy_length");
            let vocab = cfg.usize_("task.copy_vocab");
            let n = cfg.usize_("task.train_size");
            // Stream 7 keeps dataset draws independent of the trainer's
            // master RNG, which uses the same seed on stream 0.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(7);
            let mut encoded = Vec::with_capacity(n);
            for _ in 0..n {
                let (tokens, clean) = copy_task(length, vocab, &mut rng).map_err(task_err)?;
                encoded.push(EncodedSequence { tokens, clean_mask: clean });
            }
            let meta = DatasetMeta {
                box_n: 0,
                side: 0,
                vocab_size: vocab,
                seq_len: length,
                clean_prefix_len: length / 2,
                blank: 0,
                bos: vocab,
                sep: vocab,
                pad: vocab,
            };
            let refs: Vec<&EncodedSequence> = encoded.iter().collect();
            write_dataset(&out.join(DATASET_TRAIN), &refs, &meta).map_err(task_err)?;
            Ok((to_train_sequences(&encoded), vocab))
        }
    }
}

fn write_checkpoint(path: &Path, trainer: &Trainer, state: &TrainState) -> Result<(), CliError> {
    let ckpt = Checkpoint {
        model: trainer.model().config().clone(),
        train: trainer.config().clone(),
        state: state.clone(),
    };
    ckpt.write(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn run_loop(
    trainer: &Trainer,
    state: &mut TrainState,
    data: &[TrainSequence],
    out: &Path,
    checkpoint_every: u64,
    append_metrics: bool,
) -> Result<(), CliError> {
    if data.is_empty() {
        return Err(CliError::Config("training dataset is empty".into()));
    }
    let metrics_path = out.join(METRICS_FILE);
    let file = if append_metrics && metrics_path.exists() {
        fs::OpenOptions::new().append(true).open(&metrics_path)
    } else {
        fs::File::create(&metrics_path)
    }
    .map_err(|e| io_err("cannot open metrics file", e))?;
    let fresh = !append_metrics || file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut csv = BufWriter::new(file);
    if fresh {
        writeln!(csv, "step,t,loss,wallclock").map_err(|e| io_err("metrics write", e))?;
    }

    let total = trainer.config().steps as u64;
    let batch_size = trainer.config().batch_size;
    let started = Instant::now();
    while state.step < total {
        // Batch indices come from the checkpointed RNG so a resumed run
        // replays the exact same data order.
        let batch: Vec<TrainSequence> = (0..batch_size)
            .map(|_| data[state.rng.gen_range(0..data.len())].clone())
            .collect();
        let rec = trainer.train_step(state, &batch).map_err(crate::trainer_err)?;
        writeln!(
            csv,
            "{},{},{},{}",
            rec.step,
            rec.mean_t,
            rec.loss,
            started.elapsed().as_secs_f64()
        )
        .map_err(|e| io_err("metrics write", e))?;
        if checkpoint_every > 0 && rec.step % checkpoint_every == 0 {
            csv.flush().map_err(|e| io_err("metrics flush", e))?;
            let name = format!("checkpoint_step{:06}.bin", rec.step);
            write_checkpoint(&out.join(name), trainer, state)?;
        }
    }
    csv.flush().map_err(|e| io_err("metrics flush", e))?;

    write_checkpoint(&out.join(CHECKPOINT_FINAL), trainer, state)?;
    let mut ema_state = state.clone();
    ema_state.params = state.ema.clone();
    ema_state.codebook = state.ema_codebook.clone();
    write_checkpoint(&out.join(CHECKPOINT_EMA), trainer, &ema_state)?;

    let schedule_json = serde_json::to_string_pretty(&state.schedule)
        .map_err(|e| CliError::Runtime(format!("schedule serialization: {e}")))?;
    fs::write(out.join(SCHEDULE_FINAL), schedule_json)
        .map_err(|e| io_err("schedule write", e))?;
    Ok(())
}

pub fn cmd_train(cfg: &Config, resume: Option<&Path>) -> Result<(), CliError> {
    let out = PathBuf::from(cfg.str_("out"));
    let seed = cfg.u64_("seed");
    let checkpoint_every = cfg.u64_("train.checkpoint_every");

    if let Some(path) = resume {
        let ckpt = Checkpoint::read(path).map_err(|e| ckpt_read_err(path, e))?;
        let mut train_cfg = ckpt.train;
        // The step target is the one knob that may change on resume, so an
        // interrupted run can be extended.
        train_cfg.steps = cfg.usize_("train.steps").max(ckpt.state.step as usize);
        let trainer = Trainer::new(ckpt.model, train_cfg).map_err(crate::trainer_err)?;
        let dataset_path = out.join(DATASET_TRAIN);
        let (encoded, _meta) = read_dataset(&dataset_path).map_err(|e| {
            CliError::Config(format!(
                "resume needs the original dataset at {}: {e}",
                dataset_path.display()
            ))
        })?;
        let data = to_train_sequences(&encoded);
        let mut state = ckpt.state;
        run_loop(&trainer, &mut state, &data, &out, checkpoint_every, true)
    } else {
        fs::create_dir_all(&out).map_err(|e| io_err("cannot create output directory", e))?;
        let (data, task_vocab) = build_dataset(cfg, &out, seed)?;
        let explicit = cfg.usize_("model.vocab_size");
        let vocab = if explicit > 0 { explicit } else { task_vocab };
        if vocab < task_vocab {
            return Err(CliError::Config(format!(
                "model.vocab_size {vocab} is smaller than the task vocabulary {task_vocab}"
            )));
        }
        let model_cfg = build_model_config(cfg, vocab)?;
        let train_cfg = build_train_config(cfg)?;
        let trainer = Trainer::new(model_cfg, train_cfg).map_err(crate::trainer_err)?;
        let mut state = trainer.init_state(seed);
        run_loop(&trainer, &mut state, &data, &out, checkpoint_every, false)
    }
}
