//! Run configuration: a flat tree of dotted keys with typed values.
//!
//! Syntax is line-oriented: `dotted.key = value`, `#` comment lines, and
//! `[section]` headers that prefix the keys below them. The default
//! configuration defines the full key universe; merging rejects unknown
//! user keys (a silent trick-flag typo is exactly the reproducibility
//! hazard this guards against) and type mismatches, with user values
//! winning otherwise. Integer literals coerce to float-typed keys.
//!
//! `dump` emits sorted `key = value` lines; re-parsing and re-merging a
//! dump is a fixed point, which is what lets `run_tester` reload the
//! `config.final` of a finished run.

use std::collections::BTreeMap;

use crate::backbone::Activation;
use crate::error::{Error, Result};
use crate::methods::{MamlConfig, MethodSettings};
use crate::optim::{OptimKind, OptimizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Bool(_) => "bool",
            Value::Str(_) => "string",
        }
    }

    fn render(&self) -> String {
        match self {
            Value::Int(v) => v.to_string(),
            Value::Float(v) => format!("{v:?}"),
            Value::Bool(v) => v.to_string(),
            Value::Str(v) => format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\"")),
        }
    }
}

fn parse_literal(raw: &str) -> Result<Value> {
    let raw = raw.trim();
    if raw.starts_with('"') {
        if raw.len() < 2 || !raw.ends_with('"') {
            return Err(Error::Config(format!("unterminated string literal {raw}")));
        }
        let inner = &raw[1..raw.len() - 1];
        let mut out = String::new();
        let mut chars = inner.chars();
        while let Some(c) = chars.next() {
            if c == '\\' {
                match chars.next() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    other => {
                        return Err(Error::Config(format!(
                            "bad escape '\\{}' in string literal",
                            other.map(String::from).unwrap_or_default()
                        )))
                    }
                }
            } else {
                out.push(c);
            }
        }
        return Ok(Value::Str(out));
    }
    match raw {
        "true" => return Ok(Value::Bool(true)),
        "false" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if !raw.is_empty()
        && raw
            .strip_prefix(['+', '-'])
            .unwrap_or(raw)
            .chars()
            .all(|c| c.is_ascii_digit())
    {
        if let Ok(v) = raw.parse::<i64>() {
            return Ok(Value::Int(v));
        }
    }
    if let Ok(v) = raw.parse::<f64>() {
        if v.is_finite() {
            return Ok(Value::Float(v));
        }
    }
    Ok(Value::Str(raw.to_string()))
}

/// Merged key/value tree controlling method, backbone, data, optimizer,
/// and protocol.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    map: BTreeMap<String, Value>,
}

impl RunConfig {
    /// Parse configuration text. Duplicate keys within one file are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut map = BTreeMap::new();
        let mut prefix = String::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(section) = line.strip_prefix('[') {
                let section = section
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::Config(format!("line {}: unterminated section", lineno + 1))
                    })?
                    .trim();
                prefix = section.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            let full = if prefix.is_empty() {
                key.to_string()
            } else {
                format!("{prefix}.{key}")
            };
            if map.contains_key(&full) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{full}`",
                    lineno + 1
                )));
            }
            map.insert(full, parse_literal(value)?);
        }
        Ok(RunConfig { map })
    }

    pub fn parse_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {} unreadable: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Deep merge: user values replace defaults; keys absent from the user
    /// config fall back to the default; unknown user keys are rejected.
    pub fn merge(default: &RunConfig, user: &RunConfig) -> Result<RunConfig> {
        let mut out = default.clone();
        for (k, v) in &user.map {
            let Some(base) = out.map.get(k) else {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            };
            let coerced = coerce(base, v)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "key `{k}`: expected {}, got {}",
                        base.kind(),
                        v.kind()
                    ))
                })?;
            out.map.insert(k.clone(), coerced);
        }
        Ok(out)
    }

    /// Apply `key=value` override strings (highest precedence).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((k, v)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "override '{item}' is not of the form key=value"
                )));
            };
            let k = k.trim();
            let Some(base) = self.map.get(k) else {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            };
            let lit = parse_literal(v.trim())?;
            let coerced = coerce(base, &lit).ok_or_else(|| {
                Error::Config(format!(
                    "key `{k}`: expected {}, got {}",
                    base.kind(),
                    lit.kind()
                ))
            })?;
            self.map.insert(k.to_string(), coerced);
        }
        Ok(())
    }

    /// Sorted `key = value` lines; parse(dump) then merge(default, .) is a
    /// fixed point.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {}\n", v.render()));
        }
        out
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        match self.map.get(key) {
            Some(Value::Str(s)) => Ok(s),
            Some(v) => Err(Error::Config(format!(
                "key `{key}`: expected string, found {}",
                v.kind()
            ))),
            None => Err(Error::Config(format!("missing configuration key `{key}`"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.map.get(key) {
            Some(Value::Bool(b)) => Ok(*b),
            Some(v) => Err(Error::Config(format!(
                "key `{key}`: expected bool, found {}",
                v.kind()
            ))),
            None => Err(Error::Config(format!("missing configuration key `{key}`"))),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        match self.map.get(key) {
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Int(v)) => Ok(*v as f64),
            Some(v) => Err(Error::Config(format!(
                "key `{key}`: expected float, found {}",
                v.kind()
            ))),
            None => Err(Error::Config(format!("missing configuration key `{key}`"))),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        match self.map.get(key) {
            Some(Value::Int(v)) if *v >= 0 => Ok(*v as usize),
            Some(Value::Int(v)) => Err(Error::Config(format!(
                "key `{key}`: expected a non-negative integer, got {v}"
            ))),
            Some(v) => Err(Error::Config(format!(
                "key `{key}`: expected int, found {}",
                v.kind()
            ))),
            None => Err(Error::Config(format!("missing configuration key `{key}`"))),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        Ok(self.get_usize(key)? as u64)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.map.insert(key.to_string(), value);
    }

    // ----- domain views -------------------------------------------------

    pub fn method_settings(&self) -> Result<MethodSettings> {
        Ok(MethodSettings {
            head_steps: self.get_usize("head.steps")?,
            head_lr: self.get_f64("head.lr")?,
            tau: self.get_f64("head.tau")?,
            logistic_max_steps: self.get_usize("logistic.max_steps")?,
            logistic_tol: self.get_f64("logistic.tol")?,
            nn_min_over_shots: self.get_bool("nn.min_over_shots")?,
            maml: MamlConfig {
                inner_lr: self.get_f64("maml.inner_lr")?,
                inner_steps: self.get_usize("maml.inner_steps")?,
                head_only: false,
                second_order: self.get_bool("maml.second_order")?,
            },
            r2d2_lambda: self.get_f64("r2d2.lambda")?,
            dn4_k: self.get_usize("dn4.k")?,
            dn4_frobenius: self.get_bool("dn4.frobenius")?,
        })
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        Ok(OptimizerConfig {
            kind: OptimKind::parse(self.get_str("optimizer.kind")?)?,
            lr: self.get_f64("optimizer.lr")?,
            momentum: self.get_f64("optimizer.momentum")?,
            cosine_decay: self.get_bool("optimizer.cosine_decay")?,
            total_epochs: self.get_usize("train.epochs")?.max(1),
        })
    }

    pub fn widths(&self) -> Result<Vec<usize>> {
        parse_usize_list(self.get_str("backbone.widths")?, "backbone.widths")
    }

    pub fn filters(&self) -> Result<Vec<usize>> {
        parse_usize_list(self.get_str("backbone.filters")?, "backbone.filters")
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(self.get_str("backbone.activation")?)
    }

    /// Cross-key checks run before training or evaluation.
    pub fn validate(&self) -> Result<()> {
        if self.get_str("data.root")?.is_empty() {
            return Err(Error::Config(
                "missing dataset root: set `data.root`".into(),
            ));
        }
        let method = self.get_str("method")?;
        if !crate::methods::METHOD_IDS.contains(&method) {
            return Err(Error::Registry(format!(
                "unknown method '{method}' (known: {})",
                crate::methods::METHOD_IDS.join(", ")
            )));
        }
        for k in [
            "train.way",
            "train.shot",
            "train.query",
            "eval.way",
            "eval.shot",
            "eval.query",
            "protocol.tasks",
            "protocol.repetitions",
        ] {
            if self.get_usize(k)? == 0 {
                return Err(Error::Config(format!("key `{k}` must be >= 1")));
            }
        }
        if matches!(method, "maml" | "anil")
            && self.get_usize("train.way")? != self.get_usize("eval.way")?
        {
            return Err(Error::Config(format!(
                "method '{method}' fixes the head width at training way; \
                 train.way and eval.way must match"
            )));
        }
        if method == "dn4" && self.get_str("backbone.arch")? != "tinyconv-2" {
            return Err(Error::Config(
                "dn4 needs the spatial backbone: set backbone.arch = tinyconv-2".into(),
            ));
        }
        Ok(())
    }
}

fn coerce(base: &Value, user: &Value) -> Option<Value> {
    match (base, user) {
        (Value::Int(_), Value::Int(_))
        | (Value::Float(_), Value::Float(_))
        | (Value::Bool(_), Value::Bool(_))
        | (Value::Str(_), Value::Str(_)) => Some(user.clone()),
        (Value::Float(_), Value::Int(v)) => Some(Value::Float(*v as f64)),
        _ => None,
    }
}

fn parse_usize_list(s: &str, key: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("key `{key}`: bad integer '{t}'")))
        })
        .collect()
}

/// The full key universe with its documented defaults.
pub fn default_config() -> RunConfig {
    let mut c = RunConfig::default();
    let mut s = |k: &str, v: Value| c.set(k, v);
    s("method", Value::Str("protonet".into()));
    s("seed", Value::Int(42));
    s("output.dir", Value::Str("".into()));
    s("data.root", Value::Str("".into()));
    s("backbone.arch", Value::Str("mlp-2".into()));
    s("backbone.widths", Value::Str("64,32".into()));
    s("backbone.filters", Value::Str("8,8".into()));
    s("backbone.activation", Value::Str("tanh".into()));
    s("train.way", Value::Int(5));
    s("train.shot", Value::Int(1));
    s("train.query", Value::Int(15));
    s("train.epochs", Value::Int(10));
    s("train.episodes_per_epoch", Value::Int(100));
    s("train.episode_size", Value::Int(1));
    s("train.batch_size", Value::Int(64));
    s("train.jitter_sigma", Value::Float(0.0));
    s("train.init_checkpoint", Value::Str("".into()));
    s("eval.way", Value::Int(5));
    s("eval.shot", Value::Int(1));
    s("eval.query", Value::Int(15));
    s("val.tasks", Value::Int(50));
    s("optimizer.kind", Value::Str("sgd".into()));
    s("optimizer.lr", Value::Float(0.1));
    s("optimizer.momentum", Value::Float(0.9));
    s("optimizer.cosine_decay", Value::Bool(true));
    s("protocol.tasks", Value::Int(2000));
    s("protocol.repetitions", Value::Int(5));
    s("protocol.workers", Value::Int(0));
    s("protocol.dump_tasks", Value::Bool(false));
    s("head.steps", Value::Int(100));
    s("head.lr", Value::Float(0.5));
    s("head.tau", Value::Float(0.1));
    s("logistic.max_steps", Value::Int(1000));
    s("logistic.tol", Value::Float(1e-6));
    s("nn.min_over_shots", Value::Bool(false));
    s("maml.inner_lr", Value::Float(0.1));
    s("maml.inner_steps", Value::Int(3));
    s("maml.second_order", Value::Bool(true));
    s("r2d2.lambda", Value::Float(50.0));
    s("dn4.k", Value::Int(3));
    s("dn4.frobenius", Value::Bool(false));
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_wins_over_default() {
        let d = default_config();
        let u = RunConfig::parse("optimizer.lr = 0.01\n").unwrap();
        let m = RunConfig::merge(&d, &u).unwrap();
        assert_eq!(m.get_f64("optimizer.lr").unwrap(), 0.01);
        assert_eq!(m.get_f64("optimizer.momentum").unwrap(), 0.9);
    }

    #[test]
    fn empty_user_config_returns_default() {
        let d = default_config();
        let u = RunConfig::parse("").unwrap();
        let m = RunConfig::merge(&d, &u).unwrap();
        assert_eq!(m, d);
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let d = default_config();
        let u = RunConfig::parse("[optimizer]\ncosine_decay = false\n").unwrap();
        let m = RunConfig::merge(&d, &u).unwrap();
        assert!(!m.get_bool("optimizer.cosine_decay").unwrap());
        assert_eq!(m.get_f64("optimizer.lr").unwrap(), 0.1);
        assert_eq!(m.get_str("optimizer.kind").unwrap(), "sgd");
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let d = default_config();
        let u = RunConfig::parse("optimzer.lr = 0.2\n").unwrap();
        let err = RunConfig::merge(&d, &u).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("optimzer.lr")));
    }

    #[test]
    fn type_mismatch_is_rejected_with_path() {
        let d = default_config();
        let u = RunConfig::parse("train.epochs = fast\n").unwrap();
        let err = RunConfig::merge(&d, &u).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("train.epochs")));
    }

    #[test]
    fn int_coerces_to_float_keys() {
        let d = default_config();
        let u = RunConfig::parse("optimizer.lr = 1\n").unwrap();
        let m = RunConfig::merge(&d, &u).unwrap();
        assert_eq!(m.get_f64("optimizer.lr").unwrap(), 1.0);
    }

    #[test]
    fn merge_is_idempotent() {
        let d = default_config();
        let u = RunConfig::parse("method = \"r2d2\"\nseed = 7\ntrain.shot = 5\n").unwrap();
        let once = RunConfig::merge(&d, &u).unwrap();
        let twice = RunConfig::merge(&d, &once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn dump_reparse_is_a_fixed_point() {
        let d = default_config();
        let u = RunConfig::parse("method = \"dn4\"\nbackbone.arch = tinyconv-2\n").unwrap();
        let m = RunConfig::merge(&d, &u).unwrap();
        let re = RunConfig::parse(&m.dump()).unwrap();
        let re_merged = RunConfig::merge(&d, &re).unwrap();
        assert_eq!(m, re_merged);
    }

    #[test]
    fn cli_overrides_have_highest_precedence() {
        let d = default_config();
        let u = RunConfig::parse("seed = 7\n").unwrap();
        let mut m = RunConfig::merge(&d, &u).unwrap();
        m.apply_overrides(&["seed=9".into()]).unwrap();
        assert_eq!(m.get_usize("seed").unwrap(), 9);
        assert!(m.apply_overrides(&["bogus.key=1".into()]).is_err());
    }

    #[test]
    fn missing_data_root_names_the_key() {
        let d = default_config();
        let err = d.validate().unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("data.root")));
    }

    #[test]
    fn maml_way_mismatch_rejected() {
        let d = default_config();
        let u = RunConfig::parse(
            "method = maml\ndata.root = x\ntrain.way = 5\neval.way = 10\n",
        )
        .unwrap();
        let m = RunConfig::merge(&d, &u).unwrap();
        assert!(m.validate().is_err());
    }

    #[test]
    fn quoted_strings_roundtrip() {
        let u = RunConfig::parse("output.dir = \"runs/a b\\\\c\"\n").unwrap();
        assert_eq!(u.get_str("output.dir").unwrap(), "runs/a b\\c");
    }
}
