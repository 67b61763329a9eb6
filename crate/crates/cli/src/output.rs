//! CSV tables, acceptance checks and the result manifest.
//!
//! Numbers are written with 17 significant digits so that identical runs
//! produce identical bytes and the FNV-1a checksums in the manifest agree.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fnv::FnvHasher;

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

/// Renders a float with 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_num(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

/// Fixed-column table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(Cell::render).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

/// 64-bit FNV-1a of `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Recipe-declared acceptance check `value ≤ bound` (`<` when strict).
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub strict: bool,
}

impl Check {
    pub fn passed(&self) -> bool {
        if self.strict {
            self.value < self.bound
        } else {
            self.value <= self.bound
        }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "pass" } else { "fail" };
        let op = if self.strict { "<" } else { "<=" };
        format!("{verdict} ({} {op} {})", fmt_num(self.value), fmt_num(self.bound))
    }
}

/// Collects the files and checks of one recipe run.
#[derive(Debug)]
pub struct RunOutputs {
    recipe: String,
    files: Vec<(String, String)>,
    checks: Vec<Check>,
}

fn valid_suffix(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

impl RunOutputs {
    pub fn new(recipe: &str) -> Self {
        Self { recipe: recipe.to_string(), files: Vec::new(), checks: Vec::new() }
    }

    /// Stores `<recipe>.csv` (`suffix = None`) or `<recipe>-<suffix>.csv`.
    ///
    /// Suffixes are restricted to `[a-z0-9-]` so nothing escapes the output prefix.
    pub fn table(&mut self, suffix: Option<&str>, table: &Table) -> anyhow::Result<()> {
        self.text(suffix, table.render())
    }

    /// Stores raw CSV text under the same naming rule as [`RunOutputs::table`].
    pub fn text(&mut self, suffix: Option<&str>, body: String) -> anyhow::Result<()> {
        let name = match suffix {
            None => format!("{}.csv", self.recipe),
            Some(s) if valid_suffix(s) => format!("{}-{s}.csv", self.recipe),
            Some(s) => bail!("invalid output name `{s}`"),
        };
        if self.files.iter().any(|(n, _)| *n == name) {
            bail!("output `{name}` written twice");
        }
        self.files.push((name, body));
        Ok(())
    }

    pub fn check(&mut self, name: &str, value: f64, bound: f64) {
        // NaN compares false and therefore fails, which is what we want.
        self.checks.push(Check { name: name.to_string(), value, bound, strict: false });
    }

    pub fn check_strict(&mut self, name: &str, value: f64, bound: f64) {
        self.checks.push(Check { name: name.to_string(), value, bound, strict: true });
    }

    /// Boolean check recorded as `0 ≤ 0` or `1 ≤ 0`.
    pub fn check_flag(&mut self, name: &str, ok: bool) {
        self.check(name, if ok { 0.0 } else { 1.0 }, 0.0);
    }

    pub fn files(&self) -> &[(String, String)] {
        &self.files
    }

    pub fn checks(&self) -> &[Check] {
        &self.checks
    }
}

/// Everything a run reports; written next to the data as `<recipe>.manifest`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultManifest {
    pub version: String,
    pub recipe: String,
    pub config: Vec<(String, String)>,
    pub wall_clock: f64,
    /// `(file name, checksum)`.
    pub files: Vec<(String, u64)>,
    pub checks: Vec<Check>,
    /// Directory the files were written to.
    pub out_dir: PathBuf,
}

impl ResultManifest {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn checksum(&self, file: &str) -> Option<u64> {
        self.files.iter().find(|(n, _)| n == file).map(|(_, h)| *h)
    }

    pub fn path_of(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "artifact_version = {}", self.version);
        let _ = writeln!(out, "recipe = {}", self.recipe);
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k} = {v}");
        }
        let _ = writeln!(out, "wall_clock_seconds = {:.3}", self.wall_clock);
        for (name, h) in &self.files {
            let _ = writeln!(out, "file.{name} = {h:016x}");
        }
        for c in &self.checks {
            let _ = writeln!(out, "check.{} = {}", c.name, c.line());
        }
        let _ = writeln!(out, "status = {}", if self.passed() { "pass" } else { "fail" });
        out
    }
}

/// Writes the collected files and the manifest under `dir`.
pub fn write_all(dir: &Path, outputs: &RunOutputs, mut manifest: ResultManifest) -> anyhow::Result<ResultManifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    for (name, body) in &outputs.files {
        let path = dir.join(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        manifest.files.push((name.clone(), fnv1a64(body.as_bytes())));
    }
    manifest.checks = outputs.checks.clone();
    manifest.out_dir = dir.to_path_buf();
    let path = dir.join(format!("{}.manifest", outputs.recipe));
    std::fs::write(&path, manifest.render()).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn numbers_keep_seventeen_digits() {
        let s = fmt_num(0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_num(4.0 / 3.0).parse::<f64>().unwrap(), 4.0 / 3.0);
    }

    #[test]
    fn suffixes_cannot_leave_the_prefix() {
        let mut o = RunOutputs::new("x");
        assert!(o.text(Some("../evil"), String::new()).is_err());
        assert!(o.text(Some("a/b"), String::new()).is_err());
        assert!(o.text(Some("ok-1"), String::new()).is_ok());
        assert!(o.text(Some("ok-1"), String::new()).is_err());
    }

    #[test]
    fn nan_checks_fail() {
        assert!(!Check { name: "x".into(), value: f64::NAN, bound: 1.0, strict: false }.passed());
    }
}
