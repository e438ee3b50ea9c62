//! Browser bindings: annulus mesh view, viscosity condition check, and an
//! incremental offset-cylinder ensemble run.

use ensnse::assembly::Assembler;
use ensnse::ensemble::{check_viscosity_condition, EnsembleStepper, ViscosityReport};
use ensnse::fe::TaylorHood;
use ensnse::mesh::{gen_offset_annulus, Mesh};
use ensnse::scenarios::{offset_cylinder_problem, CYLINDER_CASES, DEFAULT_BLOWUP_THRESHOLD};
use ensnse::{Error, Result};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn flat_vertices(mesh: &Mesh) -> Vec<f64> {
    mesh.vertices().iter().flat_map(|p| [p[0], p[1]]).collect()
}

fn flat_triangles(mesh: &Mesh) -> Vec<u32> {
    mesh.triangles()
        .iter()
        .flat_map(|t| t.map(|v| v as u32))
        .collect()
}

/// Triangulation in flat arrays for drawing.
#[wasm_bindgen]
pub struct MeshView {
    vertices: Vec<f64>,
    triangles: Vec<u32>,
    h_max: f64,
    min_angle: f64,
}

#[wasm_bindgen]
impl MeshView {
    /// `x0, y0, x1, y1, ...`
    pub fn vertices(&self) -> Vec<f64> {
        self.vertices.clone()
    }

    /// Three vertex indices per triangle.
    pub fn triangles(&self) -> Vec<u32> {
        self.triangles.clone()
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn min_angle(&self) -> f64 {
        self.min_angle
    }
}

fn mesh_view(n_outer: usize, n_inner: usize, n_rings: usize, grading: f64) -> Result<MeshView> {
    let mesh = gen_offset_annulus(n_outer, n_inner, n_rings, grading)?;
    Ok(MeshView {
        vertices: flat_vertices(&mesh),
        triangles: flat_triangles(&mesh),
        h_max: mesh.h_max(),
        min_angle: mesh.min_angle(),
    })
}

#[wasm_bindgen]
pub fn annulus_mesh(
    n_outer: usize,
    n_inner: usize,
    n_rings: usize,
    grading: f64,
) -> std::result::Result<MeshView, JsError> {
    mesh_view(n_outer, n_inner, n_rings, grading).map_err(js)
}

fn report_text(nus: &[f64], r: &ViscosityReport) -> String {
    let mut s = format!("nu_bar = {:.6}, sqrt(mu)/3 = {:.6}\n", r.nu_bar, r.bound);
    for (j, nu) in nus.iter().enumerate() {
        s.push_str(&format!(
            "member {}: nu = {nu}, |nu - nu_bar|/nu_bar = {:.6}  {}\n",
            j + 1,
            r.ratio[j],
            if r.pass_third[j] { "ok" } else { "exceeds 1/3" }
        ));
    }
    s
}

/// Text report of the viscosity deviation condition for `nus`.
#[wasm_bindgen]
pub fn check_viscosities(nus: &[f64], mu: f64) -> std::result::Result<String, JsError> {
    let r = check_viscosity_condition(nus, mu).map_err(js)?;
    Ok(report_text(nus, &r))
}

/// Offset-cylinder ensemble advanced a few steps at a time.
#[wasm_bindgen]
pub struct CylinderRun {
    stepper: EnsembleStepper,
    energies: Vec<f64>,
    blowup: Option<usize>,
}

impl CylinderRun {
    fn build(
        case: usize,
        n_outer: usize,
        n_inner: usize,
        n_rings: usize,
        grading: f64,
        dt: f64,
    ) -> Result<Self> {
        if !(1..=CYLINDER_CASES.len()).contains(&case) {
            return Err(Error::InvalidArgument(format!(
                "case must be 1..={}",
                CYLINDER_CASES.len()
            )));
        }
        let mesh = gen_offset_annulus(n_outer, n_inner, n_rings, grading)?;
        let asm = Assembler::new(TaylorHood::new(mesh));
        let ops = asm.operators();
        let members = offset_cylinder_problem(&asm, &ops, &CYLINDER_CASES[case - 1])?;
        let stepper = EnsembleStepper::with_operators(asm, ops, members, dt)?;
        Ok(CylinderRun {
            stepper,
            energies: Vec::new(),
            blowup: None,
        })
    }

    fn advance(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            if self.blowup.is_some() {
                break;
            }
            match self.stepper.advance() {
                Ok(r) => {
                    for (j, m) in r.members.iter().enumerate() {
                        self.energies.push(m.energy);
                        if self.blowup.is_none()
                            && (m.energy.is_nan() || m.energy > DEFAULT_BLOWUP_THRESHOLD)
                        {
                            self.blowup = Some(j + 1);
                        }
                    }
                }
                Err(Error::Divergence { member, .. }) => self.blowup = Some(member),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

#[wasm_bindgen]
impl CylinderRun {
    /// Case 1..=3 of the preset viscosity sets on a coarse annulus.
    #[wasm_bindgen(constructor)]
    pub fn new(
        case: usize,
        n_outer: usize,
        n_inner: usize,
        n_rings: usize,
        grading: f64,
        dt: f64,
    ) -> std::result::Result<CylinderRun, JsError> {
        Self::build(case, n_outer, n_inner, n_rings, grading, dt).map_err(js)
    }

    pub fn step(&mut self, steps: usize) -> std::result::Result<(), JsError> {
        self.advance(steps).map_err(js)
    }

    pub fn time(&self) -> f64 {
        self.stepper.state().time()
    }

    pub fn members(&self) -> usize {
        self.stepper.members().len()
    }

    /// Energies of every completed step, member-fastest.
    pub fn energies(&self) -> Vec<f64> {
        self.energies.clone()
    }

    /// 1-based member that blew up, 0 while all are bounded.
    pub fn blown_up(&self) -> usize {
        self.blowup.unwrap_or(0)
    }

    pub fn vertices(&self) -> Vec<f64> {
        flat_vertices(self.stepper.space().mesh())
    }

    pub fn triangles(&self) -> Vec<u32> {
        flat_triangles(self.stepper.space().mesh())
    }

    /// Speed of `member` (1-based) at the mesh vertices.
    pub fn speed(&self, member: usize) -> Vec<f64> {
        let st = self.stepper.state();
        let Some(u) = member.checked_sub(1).and_then(|j| st.current.get(j)) else {
            return Vec::new();
        };
        let nn = self.stepper.space().n_nodes();
        (0..self.stepper.space().mesh().n_vertices())
            .map(|v| u[v].hypot(u[nn + v]))
            .collect()
    }
}
