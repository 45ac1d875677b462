//! Desk-scale quasi-static phase-field fracture solver.
//!
//! Minimizes the second-order energy functional
//!
//! ```text
//! Pi = Int [ (phi^2 + eta) W(eps(u)) + Gc/2 ( (1 - phi)^2 / d + d |grad phi|^2 ) ] dV
//! ```
//!
//! by alternating minimization: a linear elastic solve at fixed crack field,
//! then a bound-constrained crack solve at fixed displacement with
//! irreversibility phi <= phi_prev. phi is 1 in bulk material and 0 inside
//! the crack. Discretization is bilinear quadrilaterals on the quadtree
//! leaves with hanging-node constraint averaging; the linear systems are
//! solved by a direct skyline Cholesky factorization.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::graph::{AppliedLoad, PhysicalState, SimFrame};
use crate::mesh::{Cell, DomainSpec, MeshError, RefineCriterion, RefinedMesh};

/// Linear elastic isotropic brittle material constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Young's modulus in Pa.
    pub youngs_modulus: f64,
    /// Poisson's ratio.
    pub poisson_ratio: f64,
    /// Fracture energy density Gc in N/m^2.
    pub fracture_energy: f64,
    /// Crack regularization length d in meters.
    pub crack_width: f64,
    /// Residual stiffness floor of the degradation g(phi) = phi^2 + eta.
    pub residual_stiffness: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            youngs_modulus: 210e9,
            poisson_ratio: 0.3,
            fracture_energy: 2.7,
            crack_width: 0.0125,
            residual_stiffness: 1e-6,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<(), PfError> {
        let ok = self.youngs_modulus > 0.0
            && self.poisson_ratio > -1.0
            && self.poisson_ratio < 0.5
            && self.fracture_energy > 0.0
            && self.crack_width > 0.0
            && self.residual_stiffness > 0.0
            && self.residual_stiffness < 1e-2;
        if ok {
            Ok(())
        } else {
            Err(PfError::InvalidConfig("material constants out of range"))
        }
    }

    /// Plane-strain Lame constants (lambda, mu).
    pub fn lame(&self) -> (f64, f64) {
        let e = self.youngs_modulus;
        let nu = self.poisson_ratio;
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        (lambda, mu)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrackKind {
    LeftEdge,
    Center,
    RightEdge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadingMode {
    /// Displacement applied to the top edge in y; bottom edge on rollers
    /// (v = 0) with horizontal translation pinned at the bottom-center
    /// vertex.
    Tension,
    /// Displacement applied to the top edge in x with v = 0 there; bottom
    /// edge fully fixed.
    Shear,
}

/// Initial crack geometry and loading schedule of one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: CrackKind,
    pub mode: LoadingMode,
    /// Crack length C_L in meters; zero means no initial crack.
    pub crack_length: f64,
    /// Edge position C_P: the y-coordinate of the crack mouth (edge cracks)
    /// or of the crack center (center cracks).
    pub edge_position: f64,
    /// Crack angle C_theta in radians, measured from the +x axis.
    pub crack_angle: f64,
    /// Boundary displacement increment per load step, meters.
    pub load_increment: f64,
    /// Number of load steps.
    pub steps: u32,
}

impl ScenarioConfig {
    /// The applied-load node features of this scenario: tension drives the
    /// top edge in y, shear in x.
    pub fn load_features(&self) -> AppliedLoad {
        match self.mode {
            LoadingMode::Tension => AppliedLoad {
                u0: 0.0,
                v0: self.load_increment,
            },
            LoadingMode::Shear => AppliedLoad {
                u0: self.load_increment,
                v0: 0.0,
            },
        }
    }

    /// Crack segment endpoints in meters; `None` when crack_length is zero.
    /// Right-edge cracks are the exact mirror image of the left-edge
    /// construction.
    pub fn crack_segment(&self, side: f64) -> Option<((f64, f64), (f64, f64))> {
        if self.crack_length == 0.0 {
            return None;
        }
        let (cos, sin) = (fmath::cos(self.crack_angle), fmath::sin(self.crack_angle));
        let seg = match self.kind {
            CrackKind::LeftEdge => (
                (0.0, self.edge_position),
                (
                    self.crack_length * cos,
                    self.edge_position + self.crack_length * sin,
                ),
            ),
            CrackKind::RightEdge => (
                (side, self.edge_position),
                (
                    side - self.crack_length * cos,
                    self.edge_position + self.crack_length * sin,
                ),
            ),
            CrackKind::Center => {
                let (cx, cy) = (side / 2.0, self.edge_position);
                let (dx, dy) = (
                    0.5 * self.crack_length * cos,
                    0.5 * self.crack_length * sin,
                );
                ((cx - dx, cy - dy), (cx + dx, cy + dy))
            }
        };
        Some(seg)
    }

    pub fn validate(&self, spec: &DomainSpec) -> Result<(), PfError> {
        if !(self.load_increment > 0.0) {
            return Err(PfError::InvalidConfig("load increment must be positive"));
        }
        if self.crack_length < 0.0 {
            return Err(PfError::InvalidConfig("crack length must be non-negative"));
        }
        if let Some((a, b)) = self.crack_segment(spec.side_length) {
            let inside = |p: (f64, f64)| {
                p.0 >= -1e-12
                    && p.0 <= spec.side_length + 1e-12
                    && p.1 >= -1e-12
                    && p.1 <= spec.side_length + 1e-12
            };
            if !inside(a) || !inside(b) {
                return Err(PfError::CrackOutsideDomain);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PfError {
    InvalidConfig(&'static str),
    CrackOutsideDomain,
    SolverDiverged { step: u32, detail: &'static str },
    Mesh(MeshError),
}

impl fmt::Display for PfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PfError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            PfError::CrackOutsideDomain => write!(f, "initial crack lies outside the domain"),
            PfError::SolverDiverged { step, detail } => {
                write!(f, "solver diverged at load step {step}: {detail}")
            }
            PfError::Mesh(e) => write!(f, "{e}"),
        }
    }
}

impl From<MeshError> for PfError {
    fn from(e: MeshError) -> Self {
        PfError::Mesh(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PfError {}

/// Solver state between load steps.
#[derive(Clone, Debug)]
pub struct PfState {
    pub mesh: RefinedMesh,
    pub phi: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Cumulative applied boundary displacement.
    pub applied: f64,
    /// Total energy of the current state.
    pub energy: f64,
}

/// Per-frame scalar diagnostics of a simulation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub step: u32,
    pub energy: f64,
    /// x-coordinate of the rightmost vertex with phi below 0.05, if any.
    pub tip_x: Option<f64>,
    pub max_displacement: f64,
    pub staggered_iterations: u32,
}

/// A finished oracle run: one frame per recorded step plus diagnostics.
#[derive(Clone, Debug)]
pub struct PfRun {
    pub frames: Vec<SimFrame>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

// ---------------------------------------------------------------------------
// Finite element scaffolding
// ---------------------------------------------------------------------------

/// 2x2 Gauss quadrature on the reference square, ordered so that x-mirrored
/// points form adjacent pairs; summing contributions pairwise keeps mirrored
/// assemblies bit-stable.
const GAUSS: [(f64, f64); 4] = [
    (-0.577_350_269_189_625_8, -0.577_350_269_189_625_8),
    (0.577_350_269_189_625_8, -0.577_350_269_189_625_8),
    (-0.577_350_269_189_625_8, 0.577_350_269_189_625_8),
    (0.577_350_269_189_625_8, 0.577_350_269_189_625_8),
];

fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ]
}

/// Reference-space gradients; physical gradients carry a factor 2/h.
fn shape_grad(xi: f64, eta: f64) -> [(f64, f64); 4] {
    [
        (-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)),
        (0.25 * (1.0 - eta), -0.25 * (1.0 + xi)),
        (0.25 * (1.0 + eta), 0.25 * (1.0 + xi)),
        (-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)),
    ]
}

/// Corner vertex indices of a cell in [LL, LR, UR, UL] order.
fn cell_corners(mesh: &RefinedMesh, cell: &Cell) -> [usize; 4] {
    let spec = mesh.spec();
    let span = spec.cell_span(cell.level);
    let points = spec.lattice_points();
    let (x0, y0) = (cell.ix as u64 * span, cell.iy as u64 * span);
    let at = |x: u64, y: u64| {
        mesh.vertex_index(crate::mesh::VertexId(y * points + x))
            .expect("cell corner is a mesh vertex")
    };
    [
        at(x0, y0),
        at(x0 + span, y0),
        at(x0 + span, y0 + span),
        at(x0, y0 + span),
    ]
}

/// Symmetric system assembled as lower-triangle entries (row >= col) plus a
/// right-hand side.
struct SymSystem {
    n: usize,
    entries: BTreeMap<(u32, u32), f64>,
    rhs: Vec<f64>,
}

impl SymSystem {
    fn new(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
            rhs: alloc::vec![0.0; n],
        }
    }

    #[inline]
    fn add(&mut self, i: u32, j: u32, v: f64) {
        let key = if i >= j { (i, j) } else { (j, i) };
        *self.entries.entry(key).or_insert(0.0) += v;
    }

    /// Eliminates Dirichlet constraints, factorizes, and solves.
    fn solve(mut self, constraints: &[(u32, f64)]) -> Result<Vec<f64>, &'static str> {
        let mut fixed = alloc::vec![None; self.n];
        for &(dof, value) in constraints {
            fixed[dof as usize] = Some(value);
        }
        let mut cleaned: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for (&(i, j), &v) in &self.entries {
            match (fixed[i as usize], fixed[j as usize]) {
                (None, None) => {
                    cleaned.insert((i, j), v);
                }
                (None, Some(g)) => self.rhs[i as usize] -= v * g,
                (Some(g), None) => self.rhs[j as usize] -= v * g,
                (Some(_), Some(_)) => {}
            }
        }
        for &(dof, value) in constraints {
            cleaned.insert((dof, dof), 1.0);
            self.rhs[dof as usize] = value;
        }
        skyline_solve(self.n, &cleaned, &self.rhs)
    }
}

/// Direct Cholesky solve of a sparse SPD system given as lower-triangle
/// entries, using row-profile (skyline) storage.
fn skyline_solve(
    n: usize,
    lower: &BTreeMap<(u32, u32), f64>,
    rhs: &[f64],
) -> Result<Vec<f64>, &'static str> {
    let mut first: Vec<usize> = (0..n).collect();
    for &(i, j) in lower.keys() {
        let (i, j) = (i as usize, j as usize);
        if j < first[i] {
            first[i] = j;
        }
    }
    let mut ptr = alloc::vec![0usize; n + 1];
    for i in 0..n {
        ptr[i + 1] = ptr[i] + (i - first[i] + 1);
    }
    let mut data = alloc::vec![0.0; ptr[n]];
    for (&(i, j), &v) in lower {
        let (i, j) = (i as usize, j as usize);
        data[ptr[i] + (j - first[i])] = v;
    }

    for i in 0..n {
        let fi = first[i];
        for j in fi..i {
            let fj = first[j];
            let start = fi.max(fj);
            let mut s = data[ptr[i] + (j - fi)];
            for k in start..j {
                s -= data[ptr[i] + (k - fi)] * data[ptr[j] + (k - fj)];
            }
            data[ptr[i] + (j - fi)] = s / data[ptr[j] + (j - fj)];
        }
        let mut d = data[ptr[i] + (i - fi)];
        for k in fi..i {
            let l = data[ptr[i] + (k - fi)];
            d -= l * l;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err("matrix not positive definite");
        }
        data[ptr[i] + (i - fi)] = fmath::sqrt(d);
    }

    let mut x = rhs.to_vec();
    for i in 0..n {
        let fi = first[i];
        let mut s = x[i];
        for k in fi..i {
            s -= data[ptr[i] + (k - fi)] * x[k];
        }
        x[i] = s / data[ptr[i] + (i - fi)];
    }
    for i in (0..n).rev() {
        let fi = first[i];
        x[i] /= data[ptr[i] + (i - fi)];
        let xi = x[i];
        for k in fi..i {
            x[k] -= data[ptr[i] + (k - fi)] * xi;
        }
    }
    Ok(x)
}

/// Constraint expansion onto master (non-hanging) vertices and their dense
/// dof ranks.
struct DofMap {
    expansion: Vec<Vec<(u32, f64)>>,
    master_rank: BTreeMap<u32, u32>,
    masters: Vec<u32>,
}

impl DofMap {
    fn build(mesh: &RefinedMesh) -> Self {
        let expansion = mesh.resolved_constraints();
        let hanging = mesh.hanging_vertices();
        let mut masters = Vec::new();
        let mut master_rank = BTreeMap::new();
        for i in 0..mesh.vertices().len() as u32 {
            if !hanging.contains_key(&i) {
                master_rank.insert(i, masters.len() as u32);
                masters.push(i);
            }
        }
        Self {
            expansion,
            master_rank,
            masters,
        }
    }

    fn master_count(&self) -> usize {
        self.masters.len()
    }

    /// Expands a master-valued field to all vertices, filling hanging ones
    /// from their constraints.
    fn complete_field(&self, master_values: &[f64], out: &mut [f64]) {
        for (i, expansion) in self.expansion.iter().enumerate() {
            let mut acc = 0.0;
            for &(m, w) in expansion {
                acc += w * master_values[self.master_rank[&m] as usize];
            }
            out[i] = acc;
        }
    }
}

/// Unit-degradation elastic element stiffness per quadrature point, plus
/// shape values for interpolating phi.
struct ElasticElement {
    ke: [[[f64; 8]; 8]; 4],
    n: [[f64; 4]; 4],
}

fn elastic_element(h: f64, lambda: f64, mu: f64) -> ElasticElement {
    let mut ke = [[[0.0; 8]; 8]; 4];
    let mut nq = [[0.0; 4]; 4];
    let scale = 2.0 / h;
    let det_w = (h / 2.0) * (h / 2.0);
    for (q, &(xi, eta)) in GAUSS.iter().enumerate() {
        nq[q] = shape(xi, eta);
        let grads = shape_grad(xi, eta);
        for a in 0..4 {
            let (gxa, gya) = (grads[a].0 * scale, grads[a].1 * scale);
            for b in 0..4 {
                let (gxb, gyb) = (grads[b].0 * scale, grads[b].1 * scale);
                let kuu = (lambda + 2.0 * mu) * gxa * gxb + mu * gya * gyb;
                let kuv = lambda * gxa * gyb + mu * gya * gxb;
                let kvu = lambda * gya * gxb + mu * gxa * gyb;
                let kvv = (lambda + 2.0 * mu) * gya * gyb + mu * gxa * gxb;
                ke[q][2 * a][2 * b] = kuu * det_w;
                ke[q][2 * a][2 * b + 1] = kuv * det_w;
                ke[q][2 * a + 1][2 * b] = kvu * det_w;
                ke[q][2 * a + 1][2 * b + 1] = kvv * det_w;
            }
        }
    }
    ElasticElement { ke, n: nq }
}

/// Strain (eps_xx, eps_yy, gamma_xy) at a quadrature point from corner
/// displacements.
fn strain_at(
    grads: &[(f64, f64); 4],
    scale: f64,
    corners: &[usize; 4],
    u: &[f64],
    v: &[f64],
) -> (f64, f64, f64) {
    let mut exx = 0.0;
    let mut eyy = 0.0;
    let mut gxy = 0.0;
    for a in 0..4 {
        let gx = grads[a].0 * scale;
        let gy = grads[a].1 * scale;
        let (ua, va) = (u[corners[a]], v[corners[a]]);
        exx += gx * ua;
        eyy += gy * va;
        gxy += gy * ua + gx * va;
    }
    (exx, eyy, gxy)
}

fn strain_energy_density(lambda: f64, mu: f64, e: (f64, f64, f64)) -> f64 {
    let (exx, eyy, gxy) = e;
    let tr = exx + eyy;
    0.5 * lambda * tr * tr + mu * (exx * exx + eyy * eyy + 0.5 * gxy * gxy)
}

struct BoundaryInfo {
    bottom: Vec<u32>,
    top: Vec<u32>,
    /// Bottom vertex closest to the centerline (ties toward +x); pins
    /// horizontal translation under tension.
    bottom_center: u32,
}

fn boundary_info(mesh: &RefinedMesh) -> BoundaryInfo {
    let n = mesh.spec().lattice_intervals();
    let mut bottom = Vec::new();
    let mut top = Vec::new();
    for (i, v) in mesh.vertices().iter().enumerate() {
        if v.iy == 0 {
            bottom.push(i as u32);
        }
        if v.iy == n {
            top.push(i as u32);
        }
    }
    let bottom_center = *bottom
        .iter()
        .min_by_key(|&&i| {
            let ix2 = 2 * mesh.vertices()[i as usize].ix;
            (ix2.abs_diff(n), u64::MAX - ix2)
        })
        .expect("bottom edge has vertices");
    BoundaryInfo {
        bottom,
        top,
        bottom_center,
    }
}

/// Minimizes the degraded elastic energy at fixed crack field under the
/// loading mode's boundary conditions. Returns full (u, v) nodal fields.
pub fn solve_elastic(
    mesh: &RefinedMesh,
    phi: &[f64],
    mode: LoadingMode,
    applied: f64,
    mat: &MaterialParams,
) -> Result<(Vec<f64>, Vec<f64>), PfError> {
    let dofs = DofMap::build(mesh);
    let nm = dofs.master_count();
    let (lambda, mu) = mat.lame();
    let mut sys = SymSystem::new(2 * nm);

    let mut per_level: BTreeMap<u8, ElasticElement> = BTreeMap::new();
    for cell in mesh.cells() {
        let h = mesh.spec().cell_span(cell.level) as f64 * mesh.spec().lattice_spacing();
        let elem = per_level
            .entry(cell.level)
            .or_insert_with(|| elastic_element(h, lambda, mu));
        let corners = cell_corners(mesh, cell);
        let mut kq = [[[0.0f64; 8]; 8]; 4];
        for q in 0..4 {
            let mut phi_q = 0.0;
            for a in 0..4 {
                phi_q += elem.n[q][a] * phi[corners[a]];
            }
            let g = phi_q * phi_q + mat.residual_stiffness;
            for r in 0..8 {
                for c in 0..=r {
                    kq[q][r][c] = g * elem.ke[q][r][c];
                }
            }
        }
        let mut keff = [[0.0f64; 8]; 8];
        for r in 0..8 {
            for c in 0..=r {
                keff[r][c] = (kq[0][r][c] + kq[1][r][c]) + (kq[2][r][c] + kq[3][r][c]);
            }
        }
        // Distribute through hanging constraints into master dofs. The
        // folded map stores the lower triangle once, so ordered pairs only
        // land when row >= col; the transposed contribution arrives from the
        // transposed element pair.
        for ra in 0..8 {
            let (a, ca) = (ra / 2, ra % 2);
            let full = &keff;
            for rb in 0..8 {
                let (b, cb) = (rb / 2, rb % 2);
                let k = if rb <= ra { full[ra][rb] } else { full[rb][ra] };
                if k == 0.0 {
                    continue;
                }
                for &(ma, wa) in &dofs.expansion[corners[a]] {
                    for &(mb, wb) in &dofs.expansion[corners[b]] {
                        let di = 2 * dofs.master_rank[&ma] + ca as u32;
                        let dj = 2 * dofs.master_rank[&mb] + cb as u32;
                        if di >= dj {
                            sys.add(di, dj, wa * wb * k);
                        }
                    }
                }
            }
        }
    }

    let boundary = boundary_info(mesh);
    let mut constraints: Vec<(u32, f64)> = Vec::new();
    let rank = |vertex: u32| dofs.master_rank[&vertex];
    match mode {
        LoadingMode::Tension => {
            for &b in &boundary.bottom {
                constraints.push((2 * rank(b) + 1, 0.0));
            }
            for &t in &boundary.top {
                constraints.push((2 * rank(t) + 1, applied));
            }
            constraints.push((2 * rank(boundary.bottom_center), 0.0));
        }
        LoadingMode::Shear => {
            for &b in &boundary.bottom {
                constraints.push((2 * rank(b), 0.0));
                constraints.push((2 * rank(b) + 1, 0.0));
            }
            for &t in &boundary.top {
                constraints.push((2 * rank(t), applied));
                constraints.push((2 * rank(t) + 1, 0.0));
            }
        }
    }

    let solution = sys
        .solve(&constraints)
        .map_err(|detail| PfError::SolverDiverged { step: 0, detail })?;
    let mut master_u = alloc::vec![0.0; nm];
    let mut master_v = alloc::vec![0.0; nm];
    for m in 0..nm {
        master_u[m] = solution[2 * m];
        master_v[m] = solution[2 * m + 1];
    }
    let nv = mesh.vertices().len();
    let mut u = alloc::vec![0.0; nv];
    let mut v = alloc::vec![0.0; nv];
    dofs.complete_field(&master_u, &mut u);
    dofs.complete_field(&master_v, &mut v);
    Ok((u, v))
}

/// Minimizes the crack energy at fixed displacement, subject to bounds
/// 0 <= phi <= phi_prev (irreversibility). Solved as a box-constrained SPD
/// system by primal active sets with exact inner solves.
pub fn solve_crack(
    mesh: &RefinedMesh,
    u: &[f64],
    v: &[f64],
    phi_prev: &[f64],
    mat: &MaterialParams,
) -> Result<Vec<f64>, PfError> {
    let dofs = DofMap::build(mesh);
    let nm = dofs.master_count();
    let (lambda, mu) = mat.lame();
    let gc = mat.fracture_energy;
    let d = mat.crack_width;

    let mut sys = SymSystem::new(nm);
    for cell in mesh.cells() {
        let h = mesh.spec().cell_span(cell.level) as f64 * mesh.spec().lattice_spacing();
        let scale = 2.0 / h;
        let det_w = (h / 2.0) * (h / 2.0);
        let corners = cell_corners(mesh, cell);
        let mut kq = [[[0.0f64; 4]; 4]; 4];
        let mut fq = [[0.0f64; 4]; 4];
        for (q, &(xi, eta)) in GAUSS.iter().enumerate() {
            let n = shape(xi, eta);
            let grads = shape_grad(xi, eta);
            let w_density =
                strain_energy_density(lambda, mu, strain_at(&grads, scale, &corners, u, v));
            let mass = 2.0 * w_density + gc / d;
            for a in 0..4 {
                let (gxa, gya) = (grads[a].0 * scale, grads[a].1 * scale);
                for b in 0..=a {
                    let (gxb, gyb) = (grads[b].0 * scale, grads[b].1 * scale);
                    kq[q][a][b] = (mass * n[a] * n[b] + gc * d * (gxa * gxb + gya * gyb)) * det_w;
                }
                fq[q][a] = (gc / d) * n[a] * det_w;
            }
        }
        let mut ke = [[0.0f64; 4]; 4];
        let mut fe = [0.0f64; 4];
        for a in 0..4 {
            for b in 0..=a {
                ke[a][b] = (kq[0][a][b] + kq[1][a][b]) + (kq[2][a][b] + kq[3][a][b]);
            }
            fe[a] = (fq[0][a] + fq[1][a]) + (fq[2][a] + fq[3][a]);
        }
        for a in 0..4 {
            for b in 0..4 {
                let k = if b <= a { ke[a][b] } else { ke[b][a] };
                if k == 0.0 {
                    continue;
                }
                for &(ma, wa) in &dofs.expansion[corners[a]] {
                    for &(mb, wb) in &dofs.expansion[corners[b]] {
                        let di = dofs.master_rank[&ma];
                        let dj = dofs.master_rank[&mb];
                        if di >= dj {
                            sys.add(di, dj, wa * wb * k);
                        }
                    }
                }
            }
            for &(ma, wa) in &dofs.expansion[corners[a]] {
                sys.rhs[dofs.master_rank[&ma] as usize] += wa * fe[a];
            }
        }
    }

    // Bounds per master dof: 0 <= phi <= min(1, phi_prev).
    let upper: Vec<f64> = dofs
        .masters
        .iter()
        .map(|&vtx| phi_prev[vtx as usize].min(1.0))
        .collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Bound {
        Free,
        Lower,
        Upper,
    }
    let mut active = alloc::vec![Bound::Free; nm];
    let entries = sys.entries;
    let base_rhs = sys.rhs;
    let mut phi_master: Vec<f64>;
    let mut iteration = 0;
    loop {
        let mut constraints: Vec<(u32, f64)> = Vec::new();
        for (i, &a) in active.iter().enumerate() {
            match a {
                Bound::Free => {}
                Bound::Lower => constraints.push((i as u32, 0.0)),
                Bound::Upper => constraints.push((i as u32, upper[i])),
            }
        }
        let sys_iter = SymSystem {
            n: nm,
            entries: entries.clone(),
            rhs: base_rhs.clone(),
        };
        let solution = sys_iter
            .solve(&constraints)
            .map_err(|detail| PfError::SolverDiverged { step: 0, detail })?;

        // residual = f - K phi; stationarity K phi - f + lam - mu = 0 gives
        // lam_i = residual_i at upper bounds, mu_i = -residual_i at lower.
        let mut residual = base_rhs.clone();
        for (&(i, j), &k) in &entries {
            residual[i as usize] -= k * solution[j as usize];
            if i != j {
                residual[j as usize] -= k * solution[i as usize];
            }
        }
        let mut changed = false;
        let slack = 1e-12;
        for i in 0..nm {
            match active[i] {
                Bound::Free => {
                    if solution[i] > upper[i] + slack {
                        active[i] = Bound::Upper;
                        changed = true;
                    } else if solution[i] < -slack {
                        active[i] = Bound::Lower;
                        changed = true;
                    }
                }
                Bound::Upper => {
                    if residual[i] < -slack {
                        active[i] = Bound::Free;
                        changed = true;
                    }
                }
                Bound::Lower => {
                    if -residual[i] < -slack {
                        active[i] = Bound::Free;
                        changed = true;
                    }
                }
            }
        }
        phi_master = solution;
        if !changed {
            break;
        }
        iteration += 1;
        if iteration >= 60 {
            return Err(PfError::SolverDiverged {
                step: 0,
                detail: "active set did not settle",
            });
        }
    }
    for (i, p) in phi_master.iter_mut().enumerate() {
        *p = p.clamp(0.0, upper[i]);
    }

    let mut phi = alloc::vec![0.0; mesh.vertices().len()];
    dofs.complete_field(&phi_master, &mut phi);
    Ok(phi)
}

/// Total energy: degraded elastic energy plus crack energy.
pub fn total_energy(
    mesh: &RefinedMesh,
    phi: &[f64],
    u: &[f64],
    v: &[f64],
    mat: &MaterialParams,
) -> f64 {
    let (lambda, mu) = mat.lame();
    let gc = mat.fracture_energy;
    let d = mat.crack_width;
    let mut total = 0.0;
    for cell in mesh.cells() {
        let h = mesh.spec().cell_span(cell.level) as f64 * mesh.spec().lattice_spacing();
        let scale = 2.0 / h;
        let det_w = (h / 2.0) * (h / 2.0);
        let corners = cell_corners(mesh, cell);
        let mut parts = [0.0f64; 4];
        for (q, &(xi, eta)) in GAUSS.iter().enumerate() {
            let n = shape(xi, eta);
            let grads = shape_grad(xi, eta);
            let w_density =
                strain_energy_density(lambda, mu, strain_at(&grads, scale, &corners, u, v));
            let mut phi_q = 0.0;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for a in 0..4 {
                phi_q += n[a] * phi[corners[a]];
                gx += grads[a].0 * scale * phi[corners[a]];
                gy += grads[a].1 * scale * phi[corners[a]];
            }
            let g = phi_q * phi_q + mat.residual_stiffness;
            let one = 1.0 - phi_q;
            parts[q] =
                (g * w_density + 0.5 * gc * (one * one / d + d * (gx * gx + gy * gy))) * det_w;
        }
        total += (parts[0] + parts[1]) + (parts[2] + parts[3]);
    }
    total
}

/// Initial state of a scenario: the crack seeded through the phase field
/// (zero within d/2 of the segment, exponentially ramping to one outside)
/// and the mesh refined around it to a fixed point.
pub fn init_state(
    spec: &DomainSpec,
    scen: &ScenarioConfig,
    mat: &MaterialParams,
) -> Result<PfState, PfError> {
    spec.validate()?;
    mat.validate()?;
    scen.validate(spec)?;
    let segment = scen.crack_segment(spec.side_length);
    let profile = |x: f64, y: f64| -> f64 {
        match segment {
            None => 1.0,
            Some((a, b)) => {
                let dist = point_segment_distance((x, y), a, b);
                let half = mat.crack_width / 2.0;
                if dist <= half {
                    0.0
                } else {
                    1.0 - fmath::exp(-(dist - half) / mat.crack_width)
                }
            }
        }
    };
    let crit = RefineCriterion::for_crack_width(mat.crack_width);
    let mut mesh = RefinedMesh::base_mesh(*spec)?;
    for _ in 0..usize::from(spec.max_level) + 2 {
        let phi: Vec<f64> = mesh
            .vertices()
            .iter()
            .map(|v| {
                let (x, y) = mesh.position(v);
                profile(x, y)
            })
            .collect();
        let next = mesh.regrid(&phi, &crit)?;
        if next == mesh {
            break;
        }
        mesh = next;
    }
    let phi: Vec<f64> = mesh
        .vertices()
        .iter()
        .map(|v| {
            let (x, y) = mesh.position(v);
            profile(x, y)
        })
        .collect();
    let n = mesh.vertices().len();
    let u = alloc::vec![0.0; n];
    let v = alloc::vec![0.0; n];
    let energy = total_energy(&mesh, &phi, &u, &v, mat);
    Ok(PfState {
        mesh,
        phi,
        u,
        v,
        applied: 0.0,
        energy,
    })
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return fmath::hypot(p.0 - a.0, p.1 - a.1);
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    fmath::hypot(p.0 - cx, p.1 - cy)
}

/// Rightmost vertex with phi below 0.05, if the crack exists.
pub fn crack_tip_x(mesh: &RefinedMesh, phi: &[f64]) -> Option<f64> {
    let mut tip: Option<f64> = None;
    for (i, v) in mesh.vertices().iter().enumerate() {
        if phi[i] < 0.05 {
            let (x, _) = mesh.position(v);
            tip = Some(tip.map_or(x, |t: f64| t.max(x)));
        }
    }
    tip
}

/// True when a cracked vertex sits on a domain boundary other than the
/// scenario's seeded edge (complete material failure).
fn crack_reached_far_boundary(mesh: &RefinedMesh, phi: &[f64], kind: CrackKind) -> bool {
    let n = mesh.spec().lattice_intervals();
    for (i, v) in mesh.vertices().iter().enumerate() {
        if phi[i] >= 0.05 {
            continue;
        }
        let far = match kind {
            CrackKind::LeftEdge => v.ix == n || v.iy == 0 || v.iy == n,
            CrackKind::RightEdge => v.ix == 0 || v.iy == 0 || v.iy == n,
            CrackKind::Center => v.ix == 0 || v.ix == n || v.iy == 0 || v.iy == n,
        };
        if far {
            return true;
        }
    }
    false
}

/// Staggered solver parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StaggerConfig {
    /// Convergence threshold on the max-norm of the phi update.
    pub tolerance: f64,
    pub max_iterations: u32,
}

impl Default for StaggerConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_iterations: 100,
        }
    }
}

/// Runs a full quasi-static simulation: per load step, increment the
/// boundary displacement, alternate elastic and crack solves to the
/// staggered tolerance, regrid around the moving crack, and record a frame.
/// Terminates early on complete material failure.
pub fn run_simulation(
    spec: &DomainSpec,
    scen: &ScenarioConfig,
    mat: &MaterialParams,
    crit: &RefineCriterion,
    stagger: &StaggerConfig,
) -> Result<PfRun, PfError> {
    let mut state = init_state(spec, scen, mat)?;
    let load = scen.load_features();
    let mut frames = alloc::vec![SimFrame {
        mesh: state.mesh.clone(),
        state: PhysicalState {
            phi: state.phi.clone(),
            u: state.u.clone(),
            v: state.v.clone(),
        },
        load,
    }];
    let mut diagnostics = alloc::vec![FrameDiagnostics {
        step: 0,
        energy: state.energy,
        tip_x: crack_tip_x(&state.mesh, &state.phi),
        max_displacement: 0.0,
        staggered_iterations: 0,
    }];

    for step in 1..=scen.steps {
        state.applied += scen.load_increment;
        let mut iterations = 0;
        loop {
            iterations += 1;
            let (u, v) = solve_elastic(&state.mesh, &state.phi, scen.mode, state.applied, mat)
                .map_err(|e| at_step(e, step))?;
            let phi = solve_crack(&state.mesh, &u, &v, &state.phi, mat)
                .map_err(|e| at_step(e, step))?;
            let delta = phi
                .iter()
                .zip(&state.phi)
                .map(|(a, b)| fmath::abs(a - b))
                .fold(0.0, f64::max);
            state.u = u;
            state.v = v;
            state.phi = phi;
            if delta < stagger.tolerance {
                break;
            }
            if iterations >= stagger.max_iterations {
                return Err(PfError::SolverDiverged {
                    step,
                    detail: "staggered iteration did not converge",
                });
            }
        }
        state.energy = total_energy(&state.mesh, &state.phi, &state.u, &state.v, mat);

        // Regrid around the moved crack and carry all fields over.
        let new_mesh = state.mesh.regrid(&state.phi, crit)?;
        if new_mesh != state.mesh {
            let nv = new_mesh.vertices().len();
            let mut phi = Vec::with_capacity(nv);
            let mut u = Vec::with_capacity(nv);
            let mut v = Vec::with_capacity(nv);
            for vert in new_mesh.vertices() {
                phi.push(
                    state
                        .mesh
                        .sample_bilinear(&state.phi, vert.ix, vert.iy)
                        .clamp(0.0, 1.0),
                );
                u.push(state.mesh.sample_bilinear(&state.u, vert.ix, vert.iy));
                v.push(state.mesh.sample_bilinear(&state.v, vert.ix, vert.iy));
            }
            state.mesh = new_mesh;
            state.phi = phi;
            state.u = u;
            state.v = v;
        }

        let max_disp = state
            .u
            .iter()
            .chain(&state.v)
            .fold(0.0f64, |m, &x| m.max(fmath::abs(x)));
        frames.push(SimFrame {
            mesh: state.mesh.clone(),
            state: PhysicalState {
                phi: state.phi.clone(),
                u: state.u.clone(),
                v: state.v.clone(),
            },
            load,
        });
        diagnostics.push(FrameDiagnostics {
            step,
            energy: state.energy,
            tip_x: crack_tip_x(&state.mesh, &state.phi),
            max_displacement: max_disp,
            staggered_iterations: iterations,
        });

        if crack_reached_far_boundary(&state.mesh, &state.phi, scen.kind) {
            break;
        }
    }
    Ok(PfRun {
        frames,
        diagnostics,
    })
}

fn at_step(e: PfError, step: u32) -> PfError {
    match e {
        PfError::SolverDiverged { detail, .. } => PfError::SolverDiverged { step, detail },
        other => other,
    }
}
