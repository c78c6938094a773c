//! Flat key=value configuration with typed parsing. Precedence, lowest to
//! highest: built-in defaults, config file, environment variables, command
//! line overrides. Every key is declared up front so typos fail instead of
//! being silently ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    U64,
    Usize,
    F64,
    Bool,
    Str,
    Enum(&'static [&'static str]),
    ListUsize,
    ListF64,
    ListEnum(&'static [&'static str]),
}

struct KeySpec {
    name: &'static str,
    kind: Kind,
    default: &'static str,
}

const ARCHES: &[&str] = &["standard", "s_arch"];
const TASKS: &[&str] = &["sudoku", "copy"];
const DIFFICULTIES: &[&str] = &["easy", "medium", "hard"];
const MASKS: &[&str] = &["exclude_clean", "all"];
const SCHEDULES: &[&str] = &["linear", "cosine2"];
const VELOCITIES: &[&str] = &["exact", "stochastic", "topk"];
const MODES: &[&str] = &["free", "sudoku"];
const SCHEDULE_SOURCES: &[&str] = &["checkpoint", "config"];

const REGISTRY: &[KeySpec] = &[
    KeySpec { name: "seed", kind: Kind::U64, default: "0" },
    KeySpec { name: "out", kind: Kind::Str, default: "out" },
    KeySpec { name: "model.arch", kind: Kind::Enum(ARCHES), default: "standard" },
    KeySpec { name: "model.dim", kind: Kind::Usize, default: "64" },
    KeySpec { name: "model.layers", kind: Kind::Usize, default: "4" },
    KeySpec { name: "model.heads", kind: Kind::Usize, default: "4" },
    KeySpec { name: "model.cond_dim", kind: Kind::Usize, default: "64" },
    KeySpec { name: "model.dropout", kind: Kind::F64, default: "0.0" },
    // 0 means "derive from the task" (board vocabulary or copy alphabet).
    KeySpec { name: "model.vocab_size", kind: Kind::Usize, default: "0" },
    KeySpec { name: "task.kind", kind: Kind::Enum(TASKS), default: "sudoku" },
    KeySpec { name: "task.box_n", kind: Kind::Usize, default: "2" },
    KeySpec { name: "task.difficulty", kind: Kind::Enum(DIFFICULTIES), default: "easy" },
    KeySpec { name: "task.train_size", kind: Kind::Usize, default: "2000" },
    KeySpec { name: "task.eval_size", kind: Kind::Usize, default: "256" },
    KeySpec { name: "task.copy_length", kind: Kind::Usize, default: "16" },
    KeySpec { name: "task.copy_vocab", kind: Kind::Usize, default: "16" },
    KeySpec { name: "train.steps", kind: Kind::Usize, default: "1000" },
    KeySpec { name: "train.batch_size", kind: Kind::Usize, default: "16" },
    KeySpec { name: "train.lr", kind: Kind::F64, default: "0.0003" },
    KeySpec { name: "train.beta1", kind: Kind::F64, default: "0.9" },
    KeySpec { name: "train.beta2", kind: Kind::F64, default: "0.999" },
    KeySpec { name: "train.weight_decay", kind: Kind::F64, default: "0.0" },
    KeySpec { name: "train.ema_rate", kind: Kind::F64, default: "0.9999" },
    KeySpec { name: "train.loss_mask", kind: Kind::Enum(MASKS), default: "exclude_clean" },
    // 0 disables periodic checkpoints; the final ones are always written.
    KeySpec { name: "train.checkpoint_every", kind: Kind::U64, default: "0" },
    KeySpec { name: "schedule.kind", kind: Kind::Enum(SCHEDULES), default: "linear" },
    KeySpec { name: "schedule.a_max", kind: Kind::F64, default: "1.0" },
    KeySpec { name: "refit.enabled", kind: Kind::Bool, default: "false" },
    KeySpec { name: "refit.interval", kind: Kind::Usize, default: "50" },
    KeySpec { name: "refit.warmup", kind: Kind::Usize, default: "1000" },
    KeySpec { name: "refit.ema_beta", kind: Kind::F64, default: "0.9" },
    KeySpec { name: "refit.floor_mu", kind: Kind::F64, default: "0.001" },
    KeySpec { name: "refit.ridge_lambda", kind: Kind::F64, default: "0.000001" },
    KeySpec { name: "refit.grid_size", kind: Kind::Usize, default: "64" },
    KeySpec { name: "refit.spline_knots", kind: Kind::Usize, default: "8" },
    KeySpec { name: "sample.mode", kind: Kind::Enum(MODES), default: "sudoku" },
    KeySpec { name: "sample.steps", kind: Kind::Usize, default: "64" },
    KeySpec { name: "sample.velocity", kind: Kind::Enum(VELOCITIES), default: "exact" },
    KeySpec { name: "sample.topk", kind: Kind::Usize, default: "4" },
    KeySpec { name: "sample.temperature", kind: Kind::F64, default: "1.0" },
    KeySpec { name: "sample.count", kind: Kind::Usize, default: "1" },
    KeySpec { name: "sample.length", kind: Kind::Usize, default: "39" },
    KeySpec { name: "sample.use_ema", kind: Kind::Bool, default: "true" },
    KeySpec {
        name: "sample.schedule",
        kind: Kind::Enum(SCHEDULE_SOURCES),
        default: "checkpoint",
    },
    // NFE per cell: forward passes including the final decode, so the
    // sampler runs nfe - 1 integration steps.
    KeySpec { name: "eval.nfe", kind: Kind::ListUsize, default: "64" },
    KeySpec { name: "eval.velocity", kind: Kind::ListEnum(VELOCITIES), default: "exact" },
    KeySpec { name: "eval.temperature", kind: Kind::ListF64, default: "1.0" },
    KeySpec { name: "eval.bootstrap", kind: Kind::Usize, default: "1000" },
    KeySpec { name: "eval.use_ema", kind: Kind::Bool, default: "true" },
    // 0 means "evaluate the whole dataset".
    KeySpec { name: "eval.max_sequences", kind: Kind::Usize, default: "0" },
    KeySpec { name: "eval.schedule", kind: Kind::Enum(SCHEDULE_SOURCES), default: "checkpoint" },
    KeySpec { name: "analyze.lockin_trials", kind: Kind::Usize, default: "2000" },
    KeySpec { name: "analyze.lockin_vocab", kind: Kind::Usize, default: "12" },
    KeySpec { name: "analyze.lockin_dim", kind: Kind::Usize, default: "512" },
    KeySpec { name: "analyze.tail_trials", kind: Kind::Usize, default: "100000" },
];

fn spec_for(key: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|s| s.name == key)
}

fn check_value(spec: &KeySpec, value: &str) -> Result<(), String> {
    let scalar = |kind: &Kind, v: &str| -> Result<(), String> {
        match kind {
            Kind::U64 => v.parse::<u64>().map(|_| ()).map_err(|e| e.to_string()),
            Kind::Usize => v.parse::<usize>().map(|_| ()).map_err(|e| e.to_string()),
            Kind::F64 => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(()),
                Ok(x) => Err(format!("{x} is not finite")),
                Err(e) => Err(e.to_string()),
            },
            Kind::Bool => match v {
                "true" | "false" => Ok(()),
                _ => Err("expected true or false".into()),
            },
            Kind::Str => Ok(()),
            Kind::Enum(options) => {
                if options.contains(&v) {
                    Ok(())
                } else {
                    Err(format!("expected one of {}", options.join(", ")))
                }
            }
            Kind::ListUsize | Kind::ListF64 | Kind::ListEnum(_) => unreachable!(),
        }
    };
    let element_kind = match spec.kind {
        Kind::ListUsize => Some(Kind::Usize),
        Kind::ListF64 => Some(Kind::F64),
        Kind::ListEnum(options) => Some(Kind::Enum(options)),
        _ => None,
    };
    match element_kind {
        Some(kind) => {
            if value.trim().is_empty() {
                return Err("list must not be empty".into());
            }
            for part in value.split(',') {
                scalar(&kind, part.trim())?;
            }
            Ok(())
        }
        None => scalar(&spec.kind, value),
    }
}

/// Resolved configuration: every registered key has a value.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Config {
    pub fn defaults() -> Self {
        let values = REGISTRY.iter().map(|s| (s.name, s.default.to_string())).collect();
        Self { values }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let spec = spec_for(key)
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        let value = value.trim();
        check_value(spec, value)
            .map_err(|msg| CliError::Config(format!("config key {key:?}: {msg}")))?;
        self.values.insert(spec.name, value.to_string());
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment; blank lines are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v).map_err(|e| {
                CliError::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), CliError> {
        let seed = std::env::var("SPHEREFLOW_SEED").ok();
        let out = std::env::var("SPHEREFLOW_OUT").ok();
        self.apply_env_values(seed.as_deref(), out.as_deref())
    }

    /// Split out from `apply_env` so precedence is testable without touching
    /// process-global environment state.
    pub fn apply_env_values(
        &mut self,
        seed: Option<&str>,
        out: Option<&str>,
    ) -> Result<(), CliError> {
        if let Some(v) = seed {
            self.set("seed", v)
                .map_err(|e| CliError::Config(format!("SPHEREFLOW_SEED: {e}")))?;
        }
        if let Some(v) = out {
            self.set("out", v).map_err(|e| CliError::Config(format!("SPHEREFLOW_OUT: {e}")))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            CliError::Config(format!("override {pair:?} is not of the form key=value"))
        })?;
        self.set(k.trim(), v)
    }

    pub fn str_(&self, key: &str) -> &str {
        &self.values[key]
    }

    pub fn u64_(&self, key: &str) -> u64 {
        self.values[key].parse().expect("validated at set time")
    }

    pub fn usize_(&self, key: &str) -> usize {
        self.values[key].parse().expect("validated at set time")
    }

    pub fn f64_(&self, key: &str) -> f64 {
        self.values[key].parse().expect("validated at set time")
    }

    pub fn bool_(&self, key: &str) -> bool {
        self.values[key] == "true"
    }

    pub fn list_usize(&self, key: &str) -> Vec<usize> {
        self.values[key]
            .split(',')
            .map(|p| p.trim().parse().expect("validated at set time"))
            .collect()
    }

    pub fn list_f64(&self, key: &str) -> Vec<f64> {
        self.values[key]
            .split(',')
            .map(|p| p.trim().parse().expect("validated at set time"))
            .collect()
    }

    pub fn list_str(&self, key: &str) -> Vec<String> {
        self.values[key].split(',').map(|p| p.trim().to_string()).collect()
    }

    /// Sorted key-value view, echoed into output artifacts.
    pub fn entries(&self) -> &BTreeMap<&'static str, String> {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn every_default_passes_its_own_validation() {
        for spec in REGISTRY {
            check_value(spec, spec.default)
                .unwrap_or_else(|e| panic!("default for {} invalid: {e}", spec.name));
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = Config::defaults();
        assert!(cfg.set("train.sneed", "1").is_err());
        assert!(cfg.set("train.lr", "fast").is_err());
        assert!(cfg.set("train.lr", "inf").is_err());
        assert!(cfg.set("model.arch", "transformer").is_err());
        assert!(cfg.set("eval.nfe", "1,2,x").is_err());
        assert!(cfg.set("eval.nfe", "").is_err());
        assert!(cfg.set("refit.enabled", "yes").is_err());
        assert!(cfg.apply_override("no_equals_sign").is_err());
    }

    #[test]
    fn precedence_is_defaults_file_env_cli() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment line").unwrap();
        writeln!(f, "seed = 10").unwrap();
        writeln!(f, "out = from_file").unwrap();
        writeln!(f, "train.lr = 0.01  # inline comment").unwrap();
        drop(f);

        // Each row: (env seed, env out, overrides, expected seed, expected out).
        let table: &[(Option<&str>, Option<&str>, &[&str], u64, &str)] = &[
            (None, None, &[], 10, "from_file"),
            (Some("20"), None, &[], 20, "from_file"),
            (Some("20"), Some("from_env"), &[], 20, "from_env"),
            (Some("20"), Some("from_env"), &["seed=30"], 30, "from_env"),
            (Some("20"), Some("from_env"), &["seed=30", "out=from_cli"], 30, "from_cli"),
        ];
        for (env_seed, env_out, overrides, want_seed, want_out) in table {
            let mut cfg = Config::defaults();
            assert_eq!(cfg.u64_("seed"), 0, "default seed");
            cfg.apply_file(&path).unwrap();
            cfg.apply_env_values(*env_seed, *env_out).unwrap();
            for kv in *overrides {
                cfg.apply_override(kv).unwrap();
            }
            assert_eq!(cfg.u64_("seed"), *want_seed);
            assert_eq!(cfg.str_("out"), *want_out);
            assert_eq!(cfg.f64_("train.lr"), 0.01, "file value survives");
        }
    }

    #[test]
    fn malformed_file_lines_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "seed 7\n").unwrap();
        let err = Config::defaults().apply_file(&path).unwrap_err();
        assert!(err.to_string().contains("bad.conf:1"), "got: {err}");
    }

    #[test]
    fn list_getters_split_and_parse() {
        let mut cfg = Config::defaults();
        cfg.set("eval.nfe", "2, 4,64").unwrap();
        cfg.set("eval.temperature", "0.5,1.0").unwrap();
        cfg.set("eval.velocity", "exact, topk").unwrap();
        assert_eq!(cfg.list_usize("eval.nfe"), vec![2, 4, 64]);
        assert_eq!(cfg.list_f64("eval.temperature"), vec![0.5, 1.0]);
        assert_eq!(cfg.list_str("eval.velocity"), vec!["exact", "topk"]);
    }
}
