//! Verifiable toy datasets: box-Sudoku puzzles with exact uniqueness
//! checking and a copy task for trainer smoke runs.

pub mod copy;
pub mod sudoku;

use thiserror::Error;

pub use copy::copy_task;
pub use sudoku::{
    decode, encode, exact_match, generate_disjoint_splits, generate_puzzle, is_valid_solution,
    read_dataset, write_dataset, DatasetMeta, Difficulty, EncodedSequence, Puzzle, SudokuSpec,
};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("could not keep a unique solution at {visible} visible cells after {attempts} attempts")]
    UnreachableDifficulty { visible: usize, attempts: usize },
    #[error("malformed sequence: {reason}")]
    MalformedSequence { reason: String },
    #[error("incomplete grid: blank cell at index {index}")]
    IncompleteGrid { index: usize },
    #[error("{name} out of range: {value}")]
    ParameterOutOfRange { name: &'static str, value: f64 },
    #[error("shape mismatch: {reason}")]
    ShapeMismatch { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
