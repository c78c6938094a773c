//! Box-Sudoku generation and sequence encoding. The primary configuration
//! is the 4x4 board (2x2 boxes), where complete-grid enumeration and
//! uniqueness checking are exact and fast; 9x9 boards work through the same
//! code paths with a randomized-backtracking grid draw.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;

/// Board shape: boxes are `box_n` x `box_n`, the side is `box_n^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SudokuSpec {
    box_n: usize,
}

impl SudokuSpec {
    pub fn new(box_n: usize) -> Result<Self, TaskError> {
        if !(2..=3).contains(&box_n) {
            return Err(TaskError::ParameterOutOfRange { name: "box_n", value: box_n as f64 });
        }
        Ok(Self { box_n })
    }

    pub fn box_n(&self) -> usize {
        self.box_n
    }

    pub fn side(&self) -> usize {
        self.box_n * self.box_n
    }

    pub fn cells(&self) -> usize {
        self.side() * self.side()
    }

    /// Tokens: 0 = blank, 1..=side digits, then BOS, SEP, PAD.
    pub fn vocab_size(&self) -> usize {
        self.side() + 4
    }

    pub fn bos(&self) -> usize {
        self.side() + 1
    }

    pub fn sep(&self) -> usize {
        self.side() + 2
    }

    pub fn pad(&self) -> usize {
        self.side() + 3
    }

    /// One grid section: all cells with a SEP between consecutive rows.
    pub fn section_len(&self) -> usize {
        self.cells() + self.side() - 1
    }

    /// puzzle section, BOS, solution section.
    pub fn seq_len(&self) -> usize {
        2 * self.section_len() + 1
    }

    /// Positions before the BOS marker, i.e. the given puzzle.
    pub fn clean_prefix_len(&self) -> usize {
        self.section_len()
    }

    fn box_index(&self, cell: usize) -> usize {
        let side = self.side();
        let (r, c) = (cell / side, cell % side);
        (r / self.box_n) * self.box_n + c / self.box_n
    }
}

/// Visible-cell presets, proportional to common full-scale clue counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn visible_cells(&self, spec: &SudokuSpec) -> usize {
        match (spec.box_n(), self) {
            (2, Difficulty::Easy) => 12,
            (2, Difficulty::Medium) => 10,
            (2, Difficulty::Hard) => 8,
            (_, Difficulty::Easy) => 40,
            (_, Difficulty::Medium) => 35,
            (_, Difficulty::Hard) => 30,
        }
    }
}

/// A puzzle grid (0 = blank) together with its unique solution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Puzzle {
    pub grid: Vec<u8>,
    pub solution: Vec<u8>,
    pub visible: usize,
}

/// Token sequence plus the conditioning mask used for training/sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub tokens: Vec<usize>,
    pub clean_mask: Vec<bool>,
}

/// Counts completions of `grid` by backtracking, stopping at `cap`.
fn count_solutions(spec: &SudokuSpec, grid: &mut [u8], cap: usize) -> usize {
    let side = spec.side();
    let cell = match grid.iter().position(|&v| v == 0) {
        Some(i) => i,
        None => return 1,
    };
    let (r, c) = (cell / side, cell % side);
    let b = spec.box_index(cell);
    let mut used = 0u16;
    for i in 0..spec.cells() {
        let v = grid[i];
        if v == 0 {
            continue;
        }
        if i / side == r || i % side == c || spec.box_index(i) == b {
            used |= 1 << v;
        }
    }
    let mut count = 0;
    for v in 1..=side as u8 {
        if used & (1 << v) != 0 {
            continue;
        }
        grid[cell] = v;
        count += count_solutions(spec, grid, cap - count);
        grid[cell] = 0;
        if count >= cap {
            break;
        }
    }
    count
}

/// All complete grids, in lexicographic backtracking order. Only intended
/// for the 4x4 board, where there are exactly 288.
fn enumerate_complete(spec: &SudokuSpec) -> Vec<Vec<u8>> {
    fn recurse(spec: &SudokuSpec, grid: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        let side = spec.side();
        let cell = match grid.iter().position(|&v| v == 0) {
            Some(i) => i,
            None => {
                out.push(grid.clone());
                return;
            }
        };
        let (r, c) = (cell / side, cell % side);
        let b = spec.box_index(cell);
        for v in 1..=side as u8 {
            let ok = (0..spec.cells()).all(|i| {
                grid[i] != v || !(i / side == r || i % side == c || spec.box_index(i) == b)
            });
            if ok {
                grid[cell] = v;
                recurse(spec, grid, out);
                grid[cell] = 0;
            }
        }
    }
    let mut grid = vec![0u8; spec.cells()];
    let mut out = Vec::new();
    recurse(spec, &mut grid, &mut out);
    out
}

/// One complete grid by backtracking with shuffled digit order per cell.
fn random_complete<R: Rng + ?Sized>(spec: &SudokuSpec, rng: &mut R) -> Vec<u8> {
    fn fill<R: Rng + ?Sized>(spec: &SudokuSpec, grid: &mut [u8], rng: &mut R) -> bool {
        let side = spec.side();
        let cell = match grid.iter().position(|&v| v == 0) {
            Some(i) => i,
            None => return true,
        };
        let (r, c) = (cell / side, cell % side);
        let b = spec.box_index(cell);
        let mut digits: Vec<u8> = (1..=side as u8).collect();
        digits.shuffle(rng);
        for v in digits {
            let ok = (0..spec.cells()).all(|i| {
                grid[i] != v || !(i / side == r || i % side == c || spec.box_index(i) == b)
            });
            if ok {
                grid[cell] = v;
                if fill(spec, grid, rng) {
                    return true;
                }
                grid[cell] = 0;
            }
        }
        false
    }
    let mut grid = vec![0u8; spec.cells()];
    let filled = fill(spec, &mut grid, rng);
    debug_assert!(filled, "an empty board always completes");
    grid
}

const GENERATION_RETRIES: usize = 16;

/// Draws a complete grid (uniform over all 288 grids on the 4x4 board),
/// then removes cells in random order while the exhaustive solver confirms
/// a unique solution, until only `visible` givens remain.
pub fn generate_puzzle<R: Rng + ?Sized>(
    spec: &SudokuSpec,
    visible: usize,
    rng: &mut R,
) -> Result<Puzzle, TaskError> {
    generate_puzzle_attempts(spec, visible, GENERATION_RETRIES, rng)
}

fn generate_puzzle_attempts<R: Rng + ?Sized>(
    spec: &SudokuSpec,
    visible: usize,
    attempts: usize,
    rng: &mut R,
) -> Result<Puzzle, TaskError> {
    let cells = spec.cells();
    if visible < cells / 4 || visible > cells {
        return Err(TaskError::ParameterOutOfRange { name: "visible", value: visible as f64 });
    }
    for _ in 0..attempts {
        let solution = if spec.box_n() == 2 {
            let all = enumerate_complete(spec);
            all[rng.gen_range(0..all.len())].clone()
        } else {
            random_complete(spec, rng)
        };
        let mut grid = solution.clone();
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(rng);
        let mut remaining = cells;
        for &idx in &order {
            if remaining == visible {
                break;
            }
            let saved = grid[idx];
            grid[idx] = 0;
            // A removal that breaks uniqueness can never become legal after
            // further removals, so a single pass per order is exhaustive.
            if count_solutions(spec, &mut grid, 2) == 1 {
                remaining -= 1;
            } else {
                grid[idx] = saved;
            }
        }
        if remaining == visible {
            return Ok(Puzzle { grid, solution, visible });
        }
    }
    Err(TaskError::UnreachableDifficulty { visible, attempts })
}

/// Lays out one grid section: cells row by row with SEP between rows.
fn push_section(spec: &SudokuSpec, grid: &[u8], tokens: &mut Vec<usize>) {
    let side = spec.side();
    for r in 0..side {
        if r > 0 {
            tokens.push(spec.sep());
        }
        for c in 0..side {
            tokens.push(grid[r * side + c] as usize);
        }
    }
}

/// puzzle section, BOS, solution section; the clean mask covers exactly the
/// positions before BOS.
pub fn encode(spec: &SudokuSpec, puzzle: &Puzzle) -> EncodedSequence {
    let mut tokens = Vec::with_capacity(spec.seq_len());
    push_section(spec, &puzzle.grid, &mut tokens);
    tokens.push(spec.bos());
    push_section(spec, &puzzle.solution, &mut tokens);
    let prefix = spec.clean_prefix_len();
    let clean_mask = (0..tokens.len()).map(|i| i < prefix).collect();
    EncodedSequence { tokens, clean_mask }
}

fn read_section(
    spec: &SudokuSpec,
    tokens: &[usize],
    offset: usize,
) -> Result<Vec<u8>, TaskError> {
    let side = spec.side();
    let mut grid = Vec::with_capacity(spec.cells());
    let mut pos = offset;
    for r in 0..side {
        if r > 0 {
            if tokens[pos] != spec.sep() {
                return Err(TaskError::MalformedSequence {
                    reason: format!("expected SEP at position {pos}, found {}", tokens[pos]),
                });
            }
            pos += 1;
        }
        for _ in 0..side {
            let tok = tokens[pos];
            if tok > side {
                return Err(TaskError::MalformedSequence {
                    reason: format!("token {tok} at position {pos} is not a cell value"),
                });
            }
            grid.push(tok as u8);
            pos += 1;
        }
    }
    Ok(grid)
}

/// Inverse of `encode`: validates the separator/BOS layout and returns the
/// (puzzle grid, solution grid) pair. Cells may be blank.
pub fn decode(spec: &SudokuSpec, tokens: &[usize]) -> Result<(Vec<u8>, Vec<u8>), TaskError> {
    if tokens.len() != spec.seq_len() {
        return Err(TaskError::MalformedSequence {
            reason: format!("length {} != expected {}", tokens.len(), spec.seq_len()),
        });
    }
    let section = spec.section_len();
    let puzzle = read_section(spec, tokens, 0)?;
    if tokens[section] != spec.bos() {
        return Err(TaskError::MalformedSequence {
            reason: format!("expected BOS at position {section}, found {}", tokens[section]),
        });
    }
    let solution = read_section(spec, tokens, section + 1)?;
    Ok((puzzle, solution))
}

fn check_complete(cells: usize, grid: &[u8]) -> Result<(), TaskError> {
    if grid.len() != cells {
        return Err(TaskError::ShapeMismatch {
            reason: format!("grid has {} cells, expected {cells}", grid.len()),
        });
    }
    if let Some(index) = grid.iter().position(|&v| v == 0) {
        return Err(TaskError::IncompleteGrid { index });
    }
    Ok(())
}

/// Cellwise equality of two complete grids.
pub fn exact_match(spec: &SudokuSpec, predicted: &[u8], truth: &[u8]) -> Result<bool, TaskError> {
    check_complete(spec.cells(), predicted)?;
    check_complete(spec.cells(), truth)?;
    Ok(predicted == truth)
}

/// Row/column/box constraints plus consistency with the given cells.
pub fn is_valid_solution(
    spec: &SudokuSpec,
    grid: &[u8],
    puzzle: &[u8],
) -> Result<bool, TaskError> {
    check_complete(spec.cells(), grid)?;
    if puzzle.len() != spec.cells() {
        return Err(TaskError::ShapeMismatch {
            reason: format!("puzzle has {} cells, expected {}", puzzle.len(), spec.cells()),
        });
    }
    let side = spec.side();
    for i in 0..spec.cells() {
        if grid[i] as usize > side {
            return Ok(false);
        }
        if puzzle[i] != 0 && grid[i] != puzzle[i] {
            return Ok(false);
        }
    }
    let mut rows = vec![0u16; side];
    let mut cols = vec![0u16; side];
    let mut boxes = vec![0u16; side];
    for i in 0..spec.cells() {
        let bit = 1u16 << grid[i];
        let (r, c, b) = (i / side, i % side, spec.box_index(i));
        if rows[r] & bit != 0 || cols[c] & bit != 0 || boxes[b] & bit != 0 {
            return Ok(false);
        }
        rows[r] |= bit;
        cols[c] |= bit;
        boxes[b] |= bit;
    }
    Ok(true)
}

/// Generates splits that share no puzzle grid, in order, from one seed.
pub fn generate_disjoint_splits(
    spec: &SudokuSpec,
    sizes: &[usize],
    visible: usize,
    seed: u64,
) -> Result<Vec<Vec<Puzzle>>, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut splits = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut split = Vec::with_capacity(size);
        let mut attempts = 0usize;
        let max_attempts = 200 * size.max(1);
        while split.len() < size {
            attempts += 1;
            if attempts > max_attempts {
                return Err(TaskError::UnreachableDifficulty { visible, attempts });
            }
            let puzzle = match generate_puzzle(spec, visible, &mut rng) {
                Ok(p) => p,
                Err(TaskError::UnreachableDifficulty { .. }) => continue,
                Err(e) => return Err(e),
            };
            if seen.insert(puzzle.grid.clone()) {
                split.push(puzzle);
            }
        }
        splits.push(split);
    }
    Ok(splits)
}

/// Sidecar metadata describing the token layout of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub box_n: usize,
    pub side: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub clean_prefix_len: usize,
    pub blank: usize,
    pub bos: usize,
    pub sep: usize,
    pub pad: usize,
}

impl DatasetMeta {
    pub fn for_spec(spec: &SudokuSpec) -> Self {
        Self {
            box_n: spec.box_n(),
            side: spec.side(),
            vocab_size: spec.vocab_size(),
            seq_len: spec.seq_len(),
            clean_prefix_len: spec.clean_prefix_len(),
            blank: 0,
            bos: spec.bos(),
            sep: spec.sep(),
            pad: spec.pad(),
        }
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// One sequence per line, tokens space-separated, plus a JSON sidecar at
/// `<path>.meta.json` describing the layout.
pub fn write_dataset(
    path: &Path,
    sequences: &[&EncodedSequence],
    meta: &DatasetMeta,
) -> Result<(), TaskError> {
    let mut body = String::new();
    for seq in sequences {
        let line: Vec<String> = seq.tokens.iter().map(|t| t.to_string()).collect();
        body.push_str(&line.join(" "));
        body.push('\n');
    }
    fs::write(path, body)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Reads a dataset file and rebuilds clean masks from the sidecar layout.
pub fn read_dataset(path: &Path) -> Result<(Vec<EncodedSequence>, DatasetMeta), TaskError> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let body = fs::read_to_string(path)?;
    let mut sequences = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<usize> = line
            .split_whitespace()
            .map(|w| {
                w.parse::<usize>().map_err(|_| TaskError::MalformedSequence {
                    reason: format!("line {}: bad token {w:?}", lineno + 1),
                })
            })
            .collect::<Result<_, _>>()?;
        if tokens.len() != meta.seq_len {
            return Err(TaskError::MalformedSequence {
                reason: format!(
                    "line {}: length {} != expected {}",
                    lineno + 1,
                    tokens.len(),
                    meta.seq_len
                ),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= meta.vocab_size) {
            return Err(TaskError::MalformedSequence {
                reason: format!("line {}: token {bad} outside vocabulary", lineno + 1),
            });
        }
        let clean_mask = (0..tokens.len()).map(|i| i < meta.clean_prefix_len).collect();
        sequences.push(EncodedSequence { tokens, clean_mask });
    }
    Ok((sequences, meta))
}
