//! Run configuration: sectioned `key = value` text.
//!
//! ```text
//! scenario = offset-cylinder     # top-level keys come before any section
//! case = 2
//! mu = 0.81
//!
//! [mesh]
//! kind = annulus
//! n_rings = 28
//!
//! [time]
//! dt = 0.01
//! final = 5
//! bootstrap = ensemble           # or member: first step per member
//!
//! [output]
//! dir = case2
//!
//! [member.1]
//! nu = 0.019
//! ```
//!
//! Unknown keys and sections are errors. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ensemble::Bootstrap;
use crate::error::{Error, Result};
use crate::mesh::AnnulusParams;
use crate::scenarios::{CYLINDER_CASES, DEFAULT_BLOWUP_THRESHOLD, GREEN_TAYLOR_PERTURBATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    GreenTaylor,
    OffsetCylinder,
}

impl Scenario {
    pub const ALL: [(&'static str, Scenario); 2] = [
        ("green-taylor", Scenario::GreenTaylor),
        ("offset-cylinder", Scenario::OffsetCylinder),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, s)| *s == self).unwrap().0
    }

    fn parse(v: &str) -> Option<Self> {
        Self::ALL.iter().find(|(n, _)| *n == v).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSpec {
    Square { n: usize },
    Annulus(AnnulusParams),
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberConfig {
    pub nu: f64,
    /// Amplitude perturbation of manufactured members; unused otherwise.
    pub perturbation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    /// Preset viscosity set of the cylinder scenario (1-based).
    pub case: Option<usize>,
    pub mesh: MeshSpec,
    pub dt: f64,
    pub final_time: f64,
    pub bootstrap: Bootstrap,
    pub members: Vec<MemberConfig>,
    pub threads: usize,
    /// Serial execution, so outputs do not depend on the thread count.
    pub reproducible: bool,
    /// Analysis parameter of the viscosity condition and energy bound.
    pub mu: f64,
    pub epsilon: f64,
    /// Evaluate the energy bound every step (costs one extra solve).
    pub energy_bound: bool,
    pub blowup_threshold: f64,
    pub cfl_warning: Option<f64>,
    pub levels: usize,
    pub independent: bool,
    pub output_dir: PathBuf,
    pub snapshot_times: Vec<f64>,
}

impl RunConfig {
    pub fn defaults(scenario: Scenario) -> Self {
        let (mesh, dt, final_time, members, case) = match scenario {
            Scenario::GreenTaylor => (
                MeshSpec::Square { n: 10 },
                0.05,
                1.0,
                vec![
                    MemberConfig {
                        nu: 0.2,
                        perturbation: GREEN_TAYLOR_PERTURBATION,
                    },
                    MemberConfig {
                        nu: 0.3,
                        perturbation: -GREEN_TAYLOR_PERTURBATION,
                    },
                ],
                None,
            ),
            Scenario::OffsetCylinder => (
                MeshSpec::Annulus(AnnulusParams::default()),
                0.01,
                5.0,
                case_members(1),
                Some(1),
            ),
        };
        RunConfig {
            scenario,
            case,
            mesh,
            dt,
            final_time,
            bootstrap: Bootstrap::Ensemble,
            members,
            threads: 1,
            reproducible: true,
            mu: 0.81,
            epsilon: 0.1,
            energy_bound: false,
            blowup_threshold: DEFAULT_BLOWUP_THRESHOLD,
            cfl_warning: None,
            levels: 4,
            independent: false,
            output_dir: PathBuf::from("out"),
            snapshot_times: Vec::new(),
        }
    }

    pub fn nus(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.nu).collect()
    }

    /// Thread count actually used.
    pub fn effective_threads(&self) -> usize {
        if self.reproducible {
            1
        } else {
            self.threads
        }
    }

    /// Resolved configuration in the input syntax.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario = {}", self.scenario.name());
        if let Some(c) = self.case {
            let _ = writeln!(s, "case = {c}");
        }
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "reproducible = {}", self.reproducible);
        let _ = writeln!(s, "mu = {:e}", self.mu);
        let _ = writeln!(s, "epsilon = {:e}", self.epsilon);
        let _ = writeln!(s, "energy_bound = {}", self.energy_bound);
        let _ = writeln!(s, "blowup_threshold = {:e}", self.blowup_threshold);
        if let Some(w) = self.cfl_warning {
            let _ = writeln!(s, "cfl_warning = {w:e}");
        }
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "independent = {}", self.independent);
        s.push_str("\n[mesh]\n");
        match &self.mesh {
            MeshSpec::Square { n } => {
                let _ = writeln!(s, "kind = square\nn = {n}");
            }
            MeshSpec::Annulus(p) => {
                let _ = writeln!(
                    s,
                    "kind = annulus\nn_outer = {}\nn_inner = {}\nn_rings = {}\ngrading = {:e}",
                    p.n_outer, p.n_inner, p.n_rings, p.grading
                );
            }
            MeshSpec::File(p) => {
                let _ = writeln!(s, "kind = file\npath = {}", p.display());
            }
        }
        let _ = writeln!(
            s,
            "\n[time]\ndt = {:e}\nfinal = {:e}",
            self.dt, self.final_time
        );
        let _ = writeln!(s, "bootstrap = {}", bootstrap_name(self.bootstrap));
        let _ = writeln!(s, "\n[output]\ndir = {}", self.output_dir.display());
        if !self.snapshot_times.is_empty() {
            let list: Vec<String> = self
                .snapshot_times
                .iter()
                .map(|t| format!("{t:e}"))
                .collect();
            let _ = writeln!(s, "snapshots = {}", list.join(", "));
        }
        for (j, m) in self.members.iter().enumerate() {
            if self.case.is_some() {
                let _ = writeln!(s, "# member {}: nu = {:e}", j + 1, m.nu);
                continue;
            }
            let _ = writeln!(s, "\n[member.{}]\nnu = {:e}", j + 1, m.nu);
            if self.scenario == Scenario::GreenTaylor {
                let _ = writeln!(s, "perturbation = {:e}", m.perturbation);
            }
        }
        let _ = writeln!(
            s,
            "\n# nu_bar = {:e}",
            crate::ensemble::mean_viscosity(&self.nus())
        );
        s
    }
}

pub fn case_members(case: usize) -> Vec<MemberConfig> {
    CYLINDER_CASES[case - 1]
        .iter()
        .map(|&nu| MemberConfig {
            nu,
            perturbation: 0.0,
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
}

type Section = BTreeMap<String, Entry>;

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

fn number(e: &Entry, key: &str) -> Result<f64> {
    e.value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            cfg_err(
                e.line,
                format!("{key}: expected a number, got '{}'", e.value),
            )
        })
}

fn integer(e: &Entry, key: &str) -> Result<usize> {
    e.value.parse::<usize>().map_err(|_| {
        cfg_err(
            e.line,
            format!("{key}: expected a non-negative integer, got '{}'", e.value),
        )
    })
}

fn boolean(e: &Entry, key: &str) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(cfg_err(
            e.line,
            format!("{key}: expected true or false, got '{v}'"),
        )),
    }
}

fn bootstrap_name(b: Bootstrap) -> &'static str {
    match b {
        Bootstrap::Ensemble => "ensemble",
        Bootstrap::PerMember => "member",
    }
}

fn list(e: &Entry, key: &str) -> Result<Vec<f64>> {
    if e.value.trim().is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| cfg_err(e.line, format!("{key}: bad list entry '{}'", s.trim())))
        })
        .collect()
}

fn check_keys(section: &str, entries: &Section, allowed: &[&str]) -> Result<()> {
    for (k, e) in entries {
        if !allowed.contains(&k.as_str()) {
            return Err(cfg_err(
                e.line,
                format!(
                    "unknown key '{k}' in {section} (allowed: {})",
                    allowed.join(", ")
                ),
            ));
        }
    }
    Ok(())
}

const TOP_KEYS: &[&str] = &[
    "scenario",
    "case",
    "threads",
    "reproducible",
    "mu",
    "epsilon",
    "energy_bound",
    "blowup_threshold",
    "cfl_warning",
    "levels",
    "independent",
];
const MESH_KEYS: &[&str] = &[
    "kind", "n", "n_outer", "n_inner", "n_rings", "grading", "path",
];
const TIME_KEYS: &[&str] = &["dt", "final", "bootstrap"];
const OUTPUT_KEYS: &[&str] = &["dir", "snapshots"];
const MEMBER_KEYS: &[&str] = &["nu", "perturbation"];

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut top = Section::new();
    let mut sections: BTreeMap<String, (usize, Section)> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let l = raw.split('#').next().unwrap().trim();
        if l.is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(line, "unterminated section header"))?
                .trim()
                .to_string();
            let known = matches!(name.as_str(), "mesh" | "time" | "output")
                || name
                    .strip_prefix("member.")
                    .is_some_and(|k| k.parse::<usize>().is_ok_and(|k| k >= 1));
            if !known {
                return Err(cfg_err(
                    line,
                    format!("unknown section [{name}] (allowed: mesh, time, output, member.<k>)"),
                ));
            }
            if sections.contains_key(&name) {
                return Err(cfg_err(line, format!("duplicate section [{name}]")));
            }
            sections.insert(name.clone(), (line, Section::new()));
            current = Some(name);
            continue;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected 'key = value', got '{l}'")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(cfg_err(line, "empty key"));
        }
        let target = match &current {
            Some(s) => &mut sections.get_mut(s).unwrap().1,
            None => &mut top,
        };
        if target.contains_key(&k) {
            return Err(cfg_err(line, format!("duplicate key '{k}'")));
        }
        target.insert(k, Entry { line, value: v });
    }

    check_keys("the preamble", &top, TOP_KEYS)?;
    let scenario = match top.get("scenario") {
        Some(e) => Scenario::parse(&e.value).ok_or_else(|| {
            let names: Vec<&str> = Scenario::ALL.iter().map(|(n, _)| *n).collect();
            cfg_err(
                e.line,
                format!(
                    "unknown scenario '{}' (available: {})",
                    e.value,
                    names.join(", ")
                ),
            )
        })?,
        None => return Err(cfg_err(last_line.max(1), "missing 'scenario'")),
    };
    let mut c = RunConfig::defaults(scenario);

    if let Some(e) = top.get("case") {
        let k = integer(e, "case")?;
        if scenario != Scenario::OffsetCylinder || !(1..=CYLINDER_CASES.len()).contains(&k) {
            return Err(cfg_err(
                e.line,
                "case must be 1, 2 or 3 with scenario offset-cylinder",
            ));
        }
        c.case = Some(k);
        c.members = case_members(k);
    }
    if let Some(e) = top.get("threads") {
        c.threads = integer(e, "threads")?;
        if c.threads == 0 {
            return Err(cfg_err(e.line, "threads must be at least 1"));
        }
    }
    if let Some(e) = top.get("reproducible") {
        c.reproducible = boolean(e, "reproducible")?;
    }
    if let Some(e) = top.get("mu") {
        c.mu = number(e, "mu")?;
        if !(0.0..1.0).contains(&c.mu) {
            return Err(cfg_err(e.line, "mu must lie in [0, 1)"));
        }
    }
    if let Some(e) = top.get("epsilon") {
        c.epsilon = number(e, "epsilon")?;
    }
    if !(c.epsilon > 0.0 && c.epsilon <= 2.0 - 2.0 * c.mu.sqrt() + 1e-12) {
        let line = top.get("epsilon").or(top.get("mu")).map_or(1, |e| e.line);
        return Err(cfg_err(line, "epsilon must lie in (0, 2 - 2 sqrt(mu)]"));
    }
    if let Some(e) = top.get("energy_bound") {
        c.energy_bound = boolean(e, "energy_bound")?;
    }
    if let Some(e) = top.get("blowup_threshold") {
        c.blowup_threshold = number(e, "blowup_threshold")?;
        if c.blowup_threshold <= 0.0 {
            return Err(cfg_err(e.line, "blowup_threshold must be positive"));
        }
    }
    if let Some(e) = top.get("cfl_warning") {
        c.cfl_warning = Some(number(e, "cfl_warning")?);
    }
    if let Some(e) = top.get("levels") {
        c.levels = integer(e, "levels")?;
        if c.levels == 0 {
            return Err(cfg_err(e.line, "levels must be at least 1"));
        }
    }
    if let Some(e) = top.get("independent") {
        c.independent = boolean(e, "independent")?;
    }

    if let Some((hdr, s)) = sections.get("mesh") {
        check_keys("[mesh]", s, MESH_KEYS)?;
        let kind = s.get("kind").map(|e| e.value.as_str());
        let base = match kind {
            Some("square") => MeshSpec::Square { n: 10 },
            Some("annulus") => MeshSpec::Annulus(AnnulusParams::default()),
            Some("file") => MeshSpec::File(PathBuf::new()),
            None => c.mesh.clone(),
            Some(k) => {
                return Err(cfg_err(
                    s["kind"].line,
                    format!("unknown mesh kind '{k}' (square, annulus, file)"),
                ))
            }
        };
        c.mesh = match base {
            MeshSpec::Square { mut n } => {
                if let Some(e) = s.get("n") {
                    n = integer(e, "n")?;
                    if n == 0 {
                        return Err(cfg_err(e.line, "n must be at least 1"));
                    }
                }
                reject(
                    s,
                    &["n_outer", "n_inner", "n_rings", "grading", "path"],
                    "square",
                )?;
                MeshSpec::Square { n }
            }
            MeshSpec::Annulus(mut p) => {
                if let Some(e) = s.get("n_outer") {
                    p.n_outer = integer(e, "n_outer")?;
                }
                if let Some(e) = s.get("n_inner") {
                    p.n_inner = integer(e, "n_inner")?;
                }
                if let Some(e) = s.get("n_rings") {
                    p.n_rings = integer(e, "n_rings")?;
                }
                if let Some(e) = s.get("grading") {
                    p.grading = number(e, "grading")?;
                }
                reject(s, &["n", "path"], "annulus")?;
                MeshSpec::Annulus(p)
            }
            MeshSpec::File(_) => {
                let e = s
                    .get("path")
                    .ok_or_else(|| cfg_err(*hdr, "mesh kind 'file' needs 'path'"))?;
                reject(
                    s,
                    &["n", "n_outer", "n_inner", "n_rings", "grading"],
                    "file",
                )?;
                MeshSpec::File(PathBuf::from(&e.value))
            }
        };
    }

    if let Some((_, s)) = sections.get("time") {
        check_keys("[time]", s, TIME_KEYS)?;
        if let Some(e) = s.get("dt") {
            c.dt = number(e, "dt")?;
            if c.dt <= 0.0 {
                return Err(cfg_err(e.line, "dt must be positive"));
            }
        }
        if let Some(e) = s.get("final") {
            c.final_time = number(e, "final")?;
        }
        if let Some(e) = s.get("bootstrap") {
            c.bootstrap = match e.value.as_str() {
                "ensemble" => Bootstrap::Ensemble,
                "member" => Bootstrap::PerMember,
                v => {
                    return Err(cfg_err(
                        e.line,
                        format!("bootstrap: expected ensemble or member, got '{v}'"),
                    ))
                }
            };
        }
        if c.final_time < c.dt {
            let line = s.get("final").or(s.get("dt")).unwrap().line;
            return Err(cfg_err(line, "final time must be at least dt"));
        }
    }

    if let Some((_, s)) = sections.get("output") {
        check_keys("[output]", s, OUTPUT_KEYS)?;
        if let Some(e) = s.get("dir") {
            c.output_dir = PathBuf::from(&e.value);
        }
        if let Some(e) = s.get("snapshots") {
            c.snapshot_times = list(e, "snapshots")?;
            if let Some(t) = c.snapshot_times.iter().find(|t| **t < 0.0) {
                return Err(cfg_err(e.line, format!("negative snapshot time {t}")));
            }
        }
    }

    let members: Vec<(usize, usize, &Section)> = sections
        .iter()
        .filter_map(|(name, (line, s))| {
            name.strip_prefix("member.")
                .map(|k| (k.parse::<usize>().unwrap(), *line, s))
        })
        .collect();
    if !members.is_empty() {
        let mut sorted = members.clone();
        sorted.sort_by_key(|m| m.0);
        for (pos, (k, line, _)) in sorted.iter().enumerate() {
            if *k != pos + 1 {
                return Err(cfg_err(
                    *line,
                    format!("member sections must be numbered 1..J; found member.{k}"),
                ));
            }
        }
        let mut out = Vec::with_capacity(sorted.len());
        for (k, line, s) in sorted {
            check_keys(&format!("[member.{k}]"), s, MEMBER_KEYS)?;
            let e = s
                .get("nu")
                .ok_or_else(|| cfg_err(line, format!("[member.{k}] needs 'nu'")))?;
            let nu = number(e, "nu")?;
            if nu <= 0.0 {
                return Err(cfg_err(e.line, "nu must be positive"));
            }
            let perturbation = match s.get("perturbation") {
                Some(e) if scenario == Scenario::GreenTaylor => number(e, "perturbation")?,
                Some(e) => {
                    return Err(cfg_err(
                        e.line,
                        "perturbation applies to green-taylor members only",
                    ))
                }
                None => 0.0,
            };
            out.push(MemberConfig { nu, perturbation });
        }
        if let Some(e) = top.get("case") {
            return Err(cfg_err(
                e.line,
                "give either 'case' or member sections, not both",
            ));
        }
        c.case = None;
        c.members = out;
    }
    Ok(c)
}

fn reject(s: &Section, keys: &[&str], kind: &str) -> Result<()> {
    for k in keys {
        if let Some(e) = s.get(*k) {
            return Err(cfg_err(
                e.line,
                format!("'{k}' does not apply to mesh kind '{kind}'"),
            ));
        }
    }
    Ok(())
}

pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
