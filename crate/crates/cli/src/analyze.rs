//! Analysis command: self-contained Monte-Carlo reproduction of the
//! geometric claims. Emits CSV tables plus SVG charts, all deterministic
//! for a fixed seed.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use sphereflow_core::analysis::{isotonic_fit, mc_lockin, tail_bound_check};
use sphereflow_core::schedule::alpha_star;

use crate::config::Config;
use crate::plot::{line_chart, Series};
use crate::{io_err, mix_seed, schedule_err, CliError};

pub const ALPHA_STAR_FILE: &str = "alpha_star.csv";
pub const LOCKIN_FILE: &str = "lockin.csv";
pub const LOCKIN_PLOT: &str = "lockin.svg";
pub const TAIL_FILE: &str = "tail_bounds.csv";
pub const TAIL_PLOT: &str = "tail_bounds.svg";

const TABLE_VOCABS: [usize; 3] = [12, 50_000, 100_000];
const TABLE_DIMS: [usize; 5] = [256, 512, 768, 1024, 4096];
const TABLE_DELTAS: [f64; 2] = [0.1, 0.01];

const TAIL_DIMS: [usize; 2] = [64, 256];
const TAIL_EPS: [f64; 3] = [0.1, 0.2, 0.3];

pub fn alpha_star_csv() -> Result<String, CliError> {
    let mut csv = String::from("vocab,dim,delta,alpha_star\n");
    for vocab in TABLE_VOCABS {
        for dim in TABLE_DIMS {
            for delta in TABLE_DELTAS {
                let a = alpha_star(delta, vocab, dim).map_err(schedule_err)?;
                let _ = writeln!(csv, "{vocab},{dim},{delta},{a}");
            }
        }
    }
    Ok(csv)
}

pub fn cmd_analyze(cfg: &Config) -> Result<(), CliError> {
    let out = PathBuf::from(cfg.str_("out"));
    fs::create_dir_all(&out).map_err(|e| io_err("cannot create output directory", e))?;
    let seed = cfg.u64_("seed");

    fs::write(out.join(ALPHA_STAR_FILE), alpha_star_csv()?)
        .map_err(|e| io_err("cannot write table", e))?;

    // Lock-in success against interpolation progress.
    let vocab = cfg.usize_("analyze.lockin_vocab");
    let dim = cfg.usize_("analyze.lockin_dim");
    let trials = cfg.usize_("analyze.lockin_trials");
    let alpha_grid: Vec<f64> = (0..=30).map(|i| i as f64 / 100.0).collect();
    let estimate = mc_lockin(vocab, dim, &alpha_grid, trials, mix_seed(seed, 1))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let smoothed = isotonic_fit(&estimate.success_rate);
    let mut lockin_csv = String::from("alpha,success,smoothed\n");
    for i in 0..alpha_grid.len() {
        let _ = writeln!(
            lockin_csv,
            "{},{},{}",
            alpha_grid[i], estimate.success_rate[i], smoothed[i]
        );
    }
    fs::write(out.join(LOCKIN_FILE), lockin_csv)
        .map_err(|e| io_err("cannot write table", e))?;
    let lockin_svg = line_chart(
        &format!("Nearest-embedding recovery, |V|={vocab}, d={dim}"),
        "interpolation progress",
        "recovery rate",
        &[
            Series {
                label: "empirical".into(),
                points: alpha_grid
                    .iter()
                    .copied()
                    .zip(estimate.success_rate.iter().copied())
                    .collect(),
            },
            Series {
                label: "isotonic".into(),
                points: alpha_grid.iter().copied().zip(smoothed.iter().copied()).collect(),
            },
        ],
    );
    fs::write(out.join(LOCKIN_PLOT), lockin_svg).map_err(|e| io_err("cannot write plot", e))?;

    // Inner-product tail probabilities against the analytic envelope.
    let tail_trials = cfg.usize_("analyze.tail_trials");
    let mut tail_csv = String::from("dim,epsilon,empirical,bound,margin,holds\n");
    let mut tail_series = Vec::new();
    for (i, &d) in TAIL_DIMS.iter().enumerate() {
        let rows = tail_bound_check(d, &TAIL_EPS, tail_trials, mix_seed(seed, 2 + i as u64))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut empirical = Vec::new();
        let mut bound = Vec::new();
        for row in &rows {
            let _ = writeln!(
                tail_csv,
                "{},{},{},{},{},{}",
                d, row.epsilon, row.empirical, row.bound, row.margin, row.holds
            );
            empirical.push((row.epsilon, row.empirical));
            bound.push((row.epsilon, row.bound));
        }
        tail_series.push(Series { label: format!("empirical d={d}"), points: empirical });
        tail_series.push(Series { label: format!("bound d={d}"), points: bound });
    }
    fs::write(out.join(TAIL_FILE), tail_csv).map_err(|e| io_err("cannot write table", e))?;
    let tail_svg = line_chart(
        "Inner-product tail mass vs analytic envelope",
        "threshold",
        "probability",
        &tail_series,
    );
    fs::write(out.join(TAIL_PLOT), tail_svg).map_err(|e| io_err("cannot write plot", e))?;
    Ok(())
}
