//! Command-line front end: `ensnse mesh|run|converge|check`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::assembly::{Assembler, ASSEMBLY_QUADRATURE_DEGREE};
use crate::config::{read_config, MeshSpec, RunConfig, Scenario};
use crate::ensemble::{
    check_viscosity_condition, DualNorm, EnsembleStepper, StabilityBound, ViscosityReport,
};
use crate::error::{Error, Result};
use crate::fe::TaylorHood;
use crate::mesh::{
    gen_offset_annulus, gen_unit_square, read_mesh, write_mesh, AnnulusParams, Mesh,
};
use crate::scenarios::{
    convergence_study, green_taylor_member, offset_cylinder_problem, run_monitored, step_count,
    Blowup, ConvergenceSettings, StudyMember, ERROR_QUADRATURE_DEGREE,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_BLOWUP: u8 = 2;

pub const ENERGY_HEADER: &str = "step,time,member,energy,cfl_monitor,blowup_flag";
pub const DIAGNOSTICS_HEADER: &str =
    "step,time,member,cfl_monitor,cfl_warning,div_residual,pressure_multiplier,\
deviation_ratio,pass_mu,pass_third,bound_lhs,bound_rhs,bound_holds";
pub const CONVERGE_HEADER: &str =
    "level,inv_h,member,err_linf_l2,rate_linf,err_l2_grad,rate_grad,err_l2_l2,rate_l2l2";
const CONVERGE_HEADER_NO_RATES: &str = "level,inv_h,member,err_linf_l2,err_l2_grad,err_l2_l2";

#[derive(Debug, Parser)]
#[command(
    name = "ensnse",
    version,
    about = "Ensemble Navier-Stokes simulations with one shared matrix per step"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a generated mesh
    Mesh(MeshArgs),
    /// Run an ensemble and record energies and diagnostics
    Run(RunArgs),
    /// Convergence study of the manufactured solution
    Converge(RunArgs),
    /// Check the viscosity deviation condition
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MeshKind {
    Square,
    Annulus,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    pub kind: MeshKind,
    /// Output file
    #[arg(short, long)]
    pub out: PathBuf,
    /// Cells per side (square)
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = AnnulusParams::default().n_outer)]
    pub n_outer: usize,
    #[arg(long, default_value_t = AnnulusParams::default().n_inner)]
    pub n_inner: usize,
    #[arg(long, default_value_t = AnnulusParams::default().n_rings)]
    pub n_rings: usize,
    /// Ring spacing ratio in (0, 1]; smaller packs rings at the inner circle
    #[arg(long, default_value_t = AnnulusParams::default().grading)]
    pub grading: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Output directory, overriding the config
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub config: Option<PathBuf>,
    /// Viscosities, comma separated, instead of a config
    #[arg(long, value_delimiter = ',', conflicts_with = "config")]
    pub nu: Vec<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
}

/// Parses `args` (program name first), runs the command, returns the exit
/// code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Mesh(a) => cmd_mesh(&a).map(|_| EXIT_OK),
        Command::Run(a) => load(&a).and_then(|c| cmd_run(&c)).map(|s| {
            if s.blowup.is_some() {
                EXIT_BLOWUP
            } else {
                EXIT_OK
            }
        }),
        Command::Converge(a) => load(&a).and_then(|c| cmd_converge(&c)).map(|_| EXIT_OK),
        Command::Check(a) => cmd_check(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn load(a: &RunArgs) -> Result<RunConfig> {
    let mut c = read_config(&a.config)?;
    // mesh files are looked up next to the config
    if let MeshSpec::File(p) = &c.mesh {
        if p.is_relative() {
            if let Some(dir) = a.config.parent() {
                c.mesh = MeshSpec::File(dir.join(p));
            }
        }
    }
    if let Some(o) = &a.out {
        c.output_dir = o.clone();
    }
    Ok(c)
}

pub fn cmd_mesh(a: &MeshArgs) -> Result<Mesh> {
    let mesh = match a.kind {
        MeshKind::Square => gen_unit_square(a.n)?,
        MeshKind::Annulus => gen_offset_annulus(a.n_outer, a.n_inner, a.n_rings, a.grading)?,
    };
    write_mesh(&mesh, &a.out)?;
    let s = mesh.stats();
    println!(
        "{}: {} vertices, {} triangles, {} boundary edges, h_max {:.6}, min angle {:.3} deg",
        a.out.display(),
        s.n_vertices,
        s.n_triangles,
        s.n_boundary_edges,
        s.h_max,
        s.min_angle
    );
    Ok(mesh)
}

pub fn build_mesh(spec: &MeshSpec) -> Result<Mesh> {
    match spec {
        MeshSpec::Square { n } => gen_unit_square(*n),
        MeshSpec::Annulus(p) => gen_offset_annulus(p.n_outer, p.n_inner, p.n_rings, p.grading),
        MeshSpec::File(p) => read_mesh(p),
    }
}

fn viscosity_table(r: &ViscosityReport, nus: &[f64]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "nu_bar = {}", r.nu_bar);
    let _ = writeln!(s, "mu = {}, sqrt(mu)/3 = {}", r.mu, r.bound);
    let _ = writeln!(
        s,
        "member  nu        deviation         ratio             sqrt(mu)/3  1/3"
    );
    for j in 0..nus.len() {
        let mark = |p: bool| if p { "pass" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{:<7} {:<9} {:<+17.14} {:<17.14} {:<11} {}",
            j + 1,
            nus[j],
            r.deviation[j],
            r.ratio[j],
            mark(r.pass_mu[j]),
            mark(r.pass_third[j])
        );
    }
    s
}

pub fn cmd_check(a: &CheckArgs) -> Result<u8> {
    let (nus, mu) = match &a.config {
        Some(p) => {
            let c = read_config(p)?;
            (c.nus(), a.mu.unwrap_or(c.mu))
        }
        None if !a.nu.is_empty() => (a.nu.clone(), a.mu.unwrap_or(0.81)),
        None => return Err(Error::invalid("check needs a config file or --nu")),
    };
    let r = check_viscosity_condition(&nus, mu)?;
    print!("{}", viscosity_table(&r, &nus));
    let flagged = r.flagged();
    if flagged.is_empty() {
        println!("all members satisfy the 1/3 bound");
        Ok(EXIT_OK)
    } else {
        let list: Vec<String> = flagged.iter().map(|k| k.to_string()).collect();
        println!("members exceeding 1/3: {}", list.join(", "));
        Ok(EXIT_ERROR)
    }
}

/// Outcome of `run`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: usize,
    pub factorizations: usize,
    pub blowup: Option<Blowup>,
    pub velocity_dofs: usize,
    pub pressure_dofs: usize,
    pub output_dir: PathBuf,
}

struct Phases(Vec<(&'static str, f64)>);

impl Phases {
    fn time<T>(&mut self, name: &'static str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let r = f();
        self.0.push((name, t.elapsed().as_secs_f64()));
        r
    }
}

fn csv(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

fn write_snapshot(path: &Path, stepper: &EnsembleStepper) -> Result<()> {
    let st = stepper.state();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "esnap 1")?;
    writeln!(w, "mesh mesh.emesh")?;
    writeln!(w, "step {}", st.step)?;
    writeln!(w, "time {:e}", st.time())?;
    writeln!(w, "members {}", st.n_members())?;
    for j in 0..st.n_members() {
        writeln!(w, "member {} velocity {}", j + 1, st.current[j].len())?;
        for v in st.current[j].iter() {
            writeln!(w, "{v:e}")?;
        }
        writeln!(w, "member {} pressure {}", j + 1, st.pressure[j].len())?;
        for v in st.pressure[j].iter() {
            writeln!(w, "{v:e}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_run(c: &RunConfig) -> Result<RunSummary> {
    let mut phases = Phases(Vec::new());
    let out = &c.output_dir;
    fs::create_dir_all(out)?;
    let steps = step_count(c.final_time, c.dt)?;
    let threads = c.effective_threads();

    let mesh = phases.time("mesh", || build_mesh(&c.mesh))?;
    write_mesh(&mesh, out.join("mesh.emesh"))?;
    let mesh_stats = mesh.stats();
    let (asm, ops) = phases.time("assembly", || {
        let asm = Assembler::with_threads(TaylorHood::new(mesh), threads);
        let ops = asm.operators();
        (asm, ops)
    });
    let nus = c.nus();
    let members = phases.time("initial data", || -> Result<_> {
        match c.scenario {
            Scenario::GreenTaylor => c
                .members
                .iter()
                .map(|m| Ok(green_taylor_member(m.perturbation, m.nu)?.member()))
                .collect::<Result<Vec<_>>>(),
            Scenario::OffsetCylinder => offset_cylinder_problem(&asm, &ops, &nus),
        }
    })?;
    let (nv, np) = (asm.space().n_velocity(), asm.space().n_pressure());
    let mut stepper =
        EnsembleStepper::with_operators(asm, ops, members, c.dt)?.with_bootstrap(c.bootstrap);
    let condition = check_viscosity_condition(&nus, c.mu)?;
    let mut bound = if c.energy_bound {
        let dual = DualNorm::new(&stepper.operators().stiffness, stepper.constrained())?;
        Some((dual, StabilityBound::new(&nus, c.dt, c.mu, c.epsilon)?))
    } else {
        None
    };

    let mut energy = csv(&out.join("energy.csv"), ENERGY_HEADER)?;
    let mut diag = csv(&out.join("diagnostics.csv"), DIAGNOSTICS_HEADER)?;
    let threshold = c.blowup_threshold;
    for (j, u) in stepper.state().current.iter().enumerate() {
        let e = crate::ensemble::kinetic_energy(&stepper.operators().mass, u);
        writeln!(
            energy,
            "0,0e0,{},{e:e},0e0,{}",
            j + 1,
            flag(!e.is_finite() || e > threshold)
        )?;
    }
    let mut pending: Vec<f64> = c.snapshot_times.clone();
    pending.sort_by(f64::total_cmp);
    let snap = |s: &EnsembleStepper, pending: &mut Vec<f64>| -> Result<()> {
        let t = s.state().time();
        let due = pending
            .iter()
            .take_while(|&&ts| ts <= t + 0.5 * c.dt)
            .count();
        if due > 0 {
            pending.drain(..due);
            write_snapshot(&out.join(format!("snapshot_{:06}.txt", s.state().step)), s)?;
        }
        Ok(())
    };
    snap(&stepper, &mut pending)?;
    let mut warned = vec![false; nus.len()];

    let stepping = Instant::now();
    let (_, blowup) = run_monitored(&mut stepper, steps, threshold, |s, r| {
        let points = match &mut bound {
            Some((dual, b)) => b.observe(s, dual)?,
            None => None,
        };
        for (j, m) in r.members.iter().enumerate() {
            let over = !m.energy.is_finite() || m.energy > threshold;
            writeln!(
                energy,
                "{},{:e},{},{:e},{:e},{}",
                r.step,
                r.time,
                j + 1,
                m.energy,
                m.cfl_monitor,
                flag(over)
            )?;
            let warn = c.cfl_warning.is_some_and(|w| m.cfl_monitor > w);
            if warn && !warned[j] {
                warned[j] = true;
                eprintln!(
                    "warning: member {} fluctuation monitor {:e} exceeds {:e} at t = {}",
                    j + 1,
                    m.cfl_monitor,
                    c.cfl_warning.unwrap(),
                    r.time
                );
            }
            let (lhs, rhs, holds) = match &points {
                Some(p) => (
                    format!("{:e}", p[j].lhs),
                    format!("{:e}", p[j].rhs),
                    flag(p[j].holds()).to_string(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            writeln!(
                diag,
                "{},{:e},{},{:e},{},{:e},{:e},{:e},{},{},{lhs},{rhs},{holds}",
                r.step,
                r.time,
                j + 1,
                m.cfl_monitor,
                flag(warn),
                m.divergence_residual,
                m.multiplier,
                condition.ratio[j],
                flag(condition.pass_mu[j]),
                flag(condition.pass_third[j]),
            )?;
        }
        snap(s, &mut pending)
    })?;
    let stepping = stepping.elapsed().as_secs_f64();
    phases.0.push(("stepping", stepping));
    let done = stepper.state().step;
    if let Some(b) = blowup {
        if b.step > done {
            writeln!(energy, "{},{:e},{},NaN,NaN,1", b.step, b.time, b.member)?;
        }
        eprintln!(
            "blow-up: member {} at step {} (t = {})",
            b.member, b.step, b.time
        );
    }
    energy.flush()?;
    diag.flush()?;

    let summary = RunSummary {
        steps: done,
        factorizations: stepper.factorization_count(),
        blowup,
        velocity_dofs: nv,
        pressure_dofs: np,
        output_dir: out.clone(),
    };
    let mut meta = String::new();
    let _ = writeln!(meta, "ensnse {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(meta, "command run");
    let _ = writeln!(meta, "\n[config]\n{}", c.echo().trim_end());
    let _ = writeln!(meta, "\n[discretization]");
    let _ = writeln!(
        meta,
        "vertices {}\ntriangles {}\nboundary_edges {}\nh_max {:e}\nmin_angle_deg {:e}",
        mesh_stats.n_vertices,
        mesh_stats.n_triangles,
        mesh_stats.n_boundary_edges,
        mesh_stats.h_max,
        mesh_stats.min_angle
    );
    let _ = writeln!(
        meta,
        "velocity_dofs {nv}\npressure_dofs {np}\ntotal_dofs {}",
        nv + np
    );
    let _ = writeln!(
        meta,
        "constrained_velocity_dofs {}",
        stepper.constrained().len()
    );
    let _ = writeln!(meta, "quadrature_degree {ASSEMBLY_QUADRATURE_DEGREE}");
    let _ = writeln!(meta, "threads {threads}");
    let _ = writeln!(meta, "\n[result]");
    let _ = writeln!(
        meta,
        "steps {done}\nfactorizations {}",
        summary.factorizations
    );
    match blowup {
        Some(b) => {
            let _ = writeln!(
                meta,
                "outcome blowup member {} step {} time {:e}",
                b.member, b.step, b.time
            );
        }
        None => {
            let _ = writeln!(meta, "outcome completed");
        }
    }
    let _ = writeln!(
        meta,
        "viscosity_condition_third {}",
        if condition.all_pass_third() {
            "pass"
        } else {
            "fail"
        }
    );
    let _ = writeln!(
        meta,
        "viscosity_condition_mu {}",
        if condition.all_pass_mu() {
            "pass"
        } else {
            "fail"
        }
    );
    let _ = writeln!(meta, "\n[wall_time_s]");
    for (name, t) in &phases.0 {
        let _ = writeln!(meta, "{name} {t:.6}");
    }
    if done > 0 {
        let _ = writeln!(meta, "per_step {:.6}", stepping / done as f64);
    }
    fs::write(out.join("meta.txt"), meta)?;
    Ok(summary)
}

fn study_settings(c: &RunConfig) -> Result<ConvergenceSettings> {
    if c.scenario != Scenario::GreenTaylor {
        return Err(Error::invalid("converge needs scenario = green-taylor"));
    }
    let MeshSpec::Square { n } = c.mesh else {
        return Err(Error::invalid("converge needs a square mesh"));
    };
    Ok(ConvergenceSettings {
        inv_h0: n,
        dt0: c.dt,
        levels: c.levels,
        final_time: c.final_time,
        members: c
            .members
            .iter()
            .map(|m| StudyMember {
                nu: m.nu,
                perturbation: m.perturbation,
            })
            .collect(),
        independent: c.independent,
        bootstrap: c.bootstrap,
        threads: c.effective_threads(),
    })
}

pub fn cmd_converge(c: &RunConfig) -> Result<PathBuf> {
    let settings = study_settings(c)?;
    fs::create_dir_all(&c.output_dir)?;
    let t = Instant::now();
    let rows = convergence_study(&settings)?;
    let wall = t.elapsed().as_secs_f64();
    let path = c.output_dir.join("converge.csv");
    let with_rates = settings.levels > 1;
    let mut w = csv(
        &path,
        if with_rates {
            CONVERGE_HEADER
        } else {
            CONVERGE_HEADER_NO_RATES
        },
    )?;
    for r in &rows {
        let e = &r.errors;
        if with_rates {
            let rate = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
            let rt = r.rates;
            writeln!(
                w,
                "{},{},{},{:e},{},{:e},{},{:e},{}",
                r.level,
                r.inv_h,
                r.member,
                e.linf_l2,
                rate(rt.map(|x| x.linf_l2)),
                e.l2_grad,
                rate(rt.map(|x| x.l2_grad)),
                e.l2_l2,
                rate(rt.map(|x| x.l2_l2)),
            )?;
        } else {
            writeln!(
                w,
                "{},{},{},{:e},{:e},{:e}",
                r.level, r.inv_h, r.member, e.linf_l2, e.l2_grad, e.l2_l2
            )?;
        }
    }
    w.flush()?;
    for r in &rows {
        println!(
            "1/h = {:>3}  member {}  |E|inf,0 = {:.3e}  |grad E|2,0 = {:.3e}{}",
            r.inv_h,
            r.member,
            r.errors.linf_l2,
            r.errors.l2_grad,
            r.rates.map_or(String::new(), |x| format!(
                "  rates {:.2} {:.2}",
                x.linf_l2, x.l2_grad
            ))
        );
    }
    let mut meta = String::new();
    let _ = writeln!(meta, "ensnse {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(meta, "command converge");
    let _ = writeln!(meta, "\n[config]\n{}", c.echo().trim_end());
    let _ = writeln!(meta, "\n[discretization]");
    for level in 0..settings.levels {
        let n = settings.inv_h0 << level;
        let (v, e) = ((n + 1) * (n + 1), 3 * n * n + 2 * n);
        let _ = writeln!(
            meta,
            "level {level} inv_h {n} dt {:e} velocity_dofs {} pressure_dofs {v}",
            settings.dt0 / (1u64 << level) as f64,
            2 * (v + e)
        );
    }
    let _ = writeln!(meta, "quadrature_degree {ASSEMBLY_QUADRATURE_DEGREE}");
    let _ = writeln!(meta, "error_quadrature_degree {ERROR_QUADRATURE_DEGREE}");
    let _ = writeln!(
        meta,
        "mode {}",
        if settings.independent {
            "independent"
        } else {
            "ensemble"
        }
    );
    let _ = writeln!(meta, "\n[wall_time_s]\nstudy {wall:.6}");
    fs::write(c.output_dir.join("meta.txt"), meta)?;
    Ok(path)
}
