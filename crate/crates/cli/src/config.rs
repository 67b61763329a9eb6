//! Line-oriented `key = value` configuration with `[section]` headers and `#` comments.
//!
//! Keys live in one flat namespace. A key may be written at top level or
//! inside its own section; `render` always writes the sectioned form.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::recipes::{self, RecipeDef};

/// Parse or validation failure; `line` is 1-based, `None` for command-line overrides.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

fn err(line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError { line, message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            // Debug formatting is the shortest representation that round-trips.
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    /// Real in `lo..hi`; the flags say whether each end is excluded.
    Float { lo: f64, hi: f64, lo_open: bool, hi_open: bool },
    Int { lo: i64, hi: i64 },
    Bool,
    Choice(&'static [&'static str]),
    Text,
}

impl Kind {
    pub const fn closed(lo: f64, hi: f64) -> Self {
        Kind::Float { lo, hi, lo_open: false, hi_open: false }
    }

    pub const fn open(lo: f64, hi: f64) -> Self {
        Kind::Float { lo, hi, lo_open: true, hi_open: true }
    }

    pub const fn positive() -> Self {
        Kind::Float { lo: 0.0, hi: f64::INFINITY, lo_open: true, hi_open: true }
    }

    pub const fn nonnegative() -> Self {
        Kind::Float { lo: 0.0, hi: f64::INFINITY, lo_open: false, hi_open: true }
    }

    fn range_text(&self) -> String {
        match *self {
            Kind::Float { lo, hi, lo_open, hi_open } => {
                let l = if lo_open { '(' } else { '[' };
                let r = if hi_open { ')' } else { ']' };
                let hi = if hi.is_infinite() { "∞".to_string() } else { hi.to_string() };
                format!("{l}{lo}, {hi}{r}")
            }
            Kind::Int { lo, hi } => format!("[{lo}, {hi}]"),
            Kind::Bool => "{true, false}".into(),
            Kind::Choice(c) => format!("{{{}}}", c.join(", ")),
            Kind::Text => "any text".into(),
        }
    }

    fn parse(&self, key: &str, raw: &str, line: Option<usize>) -> Result<Value, ConfigError> {
        let bad_type = |what: &str| err(line, format!("`{key}` expects {what}, got `{raw}`"));
        let out_of_range = || err(line, format!("`{key}` = {raw} is out of range: {key} ∈ {}", self.range_text()));
        match *self {
            Kind::Float { lo, hi, lo_open, hi_open } => {
                let v: f64 = raw.parse().map_err(|_| bad_type("a number"))?;
                let above = if lo_open { v > lo } else { v >= lo };
                let below = if hi_open { v < hi } else { v <= hi };
                if !v.is_finite() || !above || !below {
                    return Err(out_of_range());
                }
                Ok(Value::Float(v))
            }
            Kind::Int { lo, hi } => {
                let v: i64 = raw.replace('_', "").parse().map_err(|_| bad_type("an integer"))?;
                if v < lo || v > hi {
                    return Err(out_of_range());
                }
                Ok(Value::Int(v))
            }
            Kind::Bool => match raw {
                "true" => Ok(Value::Bool(true)),
                "false" => Ok(Value::Bool(false)),
                _ => Err(bad_type("true or false")),
            },
            Kind::Choice(opts) => {
                if opts.contains(&raw) {
                    Ok(Value::Str(raw.to_string()))
                } else {
                    Err(err(line, format!("`{key}` must be one of {}, got `{raw}`", self.range_text())))
                }
            }
            Kind::Text => {
                // Anything the lexer would strip or split cannot round-trip.
                if raw.is_empty() || raw.trim() != raw || raw.contains('#') || raw.chars().any(char::is_control) {
                    Err(bad_type("non-empty text without `#`, control characters or surrounding spaces"))
                } else {
                    Ok(Value::Str(raw.to_string()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Top,
    Grid,
    Space,
    Params,
    Tolerance,
}

impl Section {
    pub fn name(self) -> &'static str {
        match self {
            Section::Top => "",
            Section::Grid => "grid",
            Section::Space => "space",
            Section::Params => "params",
            Section::Tolerance => "tolerance",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        [Section::Grid, Section::Space, Section::Params, Section::Tolerance].into_iter().find(|x| x.name() == s)
    }
}

/// Declared parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub key: &'static str,
    pub section: Section,
    pub kind: Kind,
    pub default: Value,
    pub help: &'static str,
}

/// Validated experiment configuration with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub recipe: String,
    values: BTreeMap<String, Value>,
}

impl ExperimentConfig {
    /// Defaults of `recipe`.
    pub fn defaults(recipe: &str) -> Result<Self, ConfigError> {
        let def = recipes::find(recipe).ok_or_else(|| err(None, format!("unknown recipe `{recipe}`")))?;
        let values = def.params().into_iter().map(|p| (p.key.to_string(), p.default)).collect();
        Ok(Self { recipe: recipe.to_string(), values })
    }

    pub fn def(&self) -> &'static RecipeDef {
        recipes::find(&self.recipe).expect("validated recipe")
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("recipe `{}` has no parameter `{key}`", self.recipe))
    }

    pub fn f64(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            Value::Int(v) => *v as f64,
            other => panic!("`{key}` is not numeric: {other:?}"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        match self.get(key) {
            Value::Int(v) => *v as usize,
            other => panic!("`{key}` is not an integer: {other:?}"),
        }
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.usize(key) as u64
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(v) => *v,
            other => panic!("`{key}` is not a flag: {other:?}"),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Str(v) => v,
            other => panic!("`{key}` is not text: {other:?}"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn out(&self) -> &str {
        self.str("out")
    }

    /// Applies a `key=value` override, validated like a config line.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let spec = self
            .def()
            .params()
            .into_iter()
            .find(|p| p.key == key)
            .ok_or_else(|| err(None, format!("unknown key `{key}` for recipe `{}`", self.recipe)))?;
        let v = spec.kind.parse(key, raw, None)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// All `(key, value)` pairs in declaration order.
    pub fn entries(&self) -> Vec<(&'static str, Section, &Value)> {
        self.def().params().into_iter().map(|p| (p.key, p.section, &self.values[p.key])).collect()
    }
}

struct Line<'a> {
    no: usize,
    section: Section,
    key: &'a str,
    value: &'a str,
}

fn lex(text: &str) -> Result<Vec<Line<'_>>, ConfigError> {
    let mut section = Section::Top;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| err(Some(no), format!("unterminated section header `{line}`")))?;
            section = Section::from_name(name.trim()).ok_or_else(|| err(Some(no), format!("unknown section `[{}]`", name.trim())))?;
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err(Some(no), format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err(Some(no), "missing key before `=`"));
        }
        out.push(Line { no, section, key, value });
    }
    Ok(out)
}

/// Parses a config whose `recipe` key names the recipe.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    parse_config_for(text, None)
}

/// Parses a config; `recipe` (e.g. from a subcommand) is used when the text has no `recipe` key
/// and must agree with it otherwise.
pub fn parse_config_for(text: &str, recipe: Option<&str>) -> Result<ExperimentConfig, ConfigError> {
    let lines = lex(text)?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for l in &lines {
        if let Some(first) = seen.insert(l.key, l.no) {
            return Err(err(Some(l.no), format!("duplicate key `{}` on lines {first} and {}", l.key, l.no)));
        }
    }
    let named = lines.iter().find(|l| l.key == "recipe");
    if let Some(l) = named {
        if l.section != Section::Top {
            return Err(err(Some(l.no), "`recipe` must be set at top level"));
        }
    }
    let name = match (named, recipe) {
        (Some(l), Some(r)) if l.value != r => {
            return Err(err(Some(l.no), format!("config names recipe `{}` but `{r}` was requested", l.value)));
        }
        (Some(l), _) => l.value,
        (None, Some(r)) => r,
        (None, None) => return Err(err(None, "missing `recipe` key")),
    };
    let mut cfg = ExperimentConfig::defaults(name).map_err(|e| err(named.map(|l| l.no), e.message))?;
    let params = cfg.def().params();
    for l in lines.iter().filter(|l| l.key != "recipe") {
        let spec = params
            .iter()
            .find(|p| p.key == l.key)
            .ok_or_else(|| err(Some(l.no), format!("unknown key `{}` for recipe `{name}`", l.key)))?;
        if l.section != Section::Top && l.section != spec.section {
            return Err(err(
                Some(l.no),
                format!("`{}` belongs in [{}], not [{}]", l.key, spec.section.name(), l.section.name()),
            ));
        }
        let v = spec.kind.parse(l.key, l.value, Some(l.no))?;
        cfg.values.insert(l.key.to_string(), v);
    }
    Ok(cfg)
}

/// Canonical text of a config; `parse_config(render(c)) == c`.
pub fn render(cfg: &ExperimentConfig) -> String {
    let mut out = format!("recipe = {}\n", cfg.recipe);
    let entries = cfg.entries();
    for section in [Section::Top, Section::Grid, Section::Space, Section::Params, Section::Tolerance] {
        let here: Vec<_> = entries.iter().filter(|e| e.1 == section).collect();
        if here.is_empty() {
            continue;
        }
        if section != Section::Top {
            out.push_str(&format!("\n[{}]\n", section.name()));
        }
        for (k, _, v) in here {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}
