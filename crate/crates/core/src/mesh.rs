//! Block-structured quadtree meshes over a square domain.
//!
//! A [`RefinedMesh`] is a set of quadtree leaf cells that tile the domain,
//! kept 2:1 balanced: side-adjacent leaves differ by at most one refinement
//! level. Vertices are deduplicated cell corners addressed on the finest
//! lattice, which gives every vertex a stable global [`VertexId`] shared by
//! all meshes built from the same [`DomainSpec`]. Hanging vertices (corners
//! of fine cells sitting on the side of a coarser cell) are real vertices
//! here; the solver in [`crate::pf`] constrains them, the graph extraction in
//! [`crate::graph`] keeps them as ordinary nodes.
//!
//! Meshes are immutable once built; every operation returns a new mesh.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::fmath;

/// Square-domain discretization parameters shared by every mesh of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Side length of the square domain in meters.
    pub side_length: f64,
    /// Cells per side of the uniform level-0 grid.
    pub base_resolution: u32,
    /// Maximum refinement level (level 0 = base grid).
    pub max_level: u8,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            side_length: 0.5,
            base_resolution: 16,
            max_level: 4,
        }
    }
}

impl DomainSpec {
    pub fn new(side_length: f64, base_resolution: u32, max_level: u8) -> Result<Self, MeshError> {
        let spec = Self {
            side_length,
            base_resolution,
            max_level,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.side_length > 0.0) || !self.side_length.is_finite() {
            return Err(MeshError::InvalidSpec("side_length must be positive"));
        }
        if self.base_resolution < 2 {
            return Err(MeshError::InvalidSpec("base_resolution must be at least 2"));
        }
        if self.max_level > 12 {
            return Err(MeshError::InvalidSpec("max_level above 12 is unsupported"));
        }
        Ok(())
    }

    /// Number of finest-lattice intervals per side.
    pub fn lattice_intervals(&self) -> u64 {
        (self.base_resolution as u64) << self.max_level
    }

    /// Lattice points per side (intervals + 1).
    pub fn lattice_points(&self) -> u64 {
        self.lattice_intervals() + 1
    }

    /// Lattice units spanned by one cell of the given level.
    pub fn cell_span(&self, level: u8) -> u64 {
        1u64 << (self.max_level - level)
    }

    /// Cells per side at the given level.
    pub fn cells_per_side(&self, level: u8) -> u64 {
        (self.base_resolution as u64) << level
    }

    /// Physical spacing of the finest lattice in meters.
    pub fn lattice_spacing(&self) -> f64 {
        self.side_length / self.lattice_intervals() as f64
    }

    /// Physical coordinates of a lattice point.
    pub fn lattice_to_point(&self, ix: u64, iy: u64) -> (f64, f64) {
        let h = self.side_length / self.lattice_intervals() as f64;
        (ix as f64 * h, iy as f64 * h)
    }
}

/// Stable global vertex identifier: the row-major index of the vertex on the
/// finest lattice of its [`DomainSpec`]. Identifiers are comparable across
/// meshes sharing a spec, which is what makes level-restricted vertex sets
/// nested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId(pub u64);

/// A quadtree leaf cell, addressed by its level and column/row index at that
/// level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub level: u8,
    pub ix: u32,
    pub iy: u32,
}

impl Cell {
    /// Lower-left corner and span in finest-lattice units.
    fn lattice_box(&self, spec: &DomainSpec) -> LatticeBox {
        let span = spec.cell_span(self.level);
        LatticeBox {
            x0: self.ix as u64 * span,
            y0: self.iy as u64 * span,
            x1: (self.ix as u64 + 1) * span,
            y1: (self.iy as u64 + 1) * span,
        }
    }

    fn children(&self) -> [Cell; 4] {
        let (l, x, y) = (self.level + 1, self.ix * 2, self.iy * 2);
        [
            Cell { level: l, ix: x, iy: y },
            Cell { level: l, ix: x + 1, iy: y },
            Cell { level: l, ix: x, iy: y + 1 },
            Cell { level: l, ix: x + 1, iy: y + 1 },
        ]
    }

    fn ancestor(&self, level: u8) -> Cell {
        debug_assert!(level <= self.level);
        let shift = self.level - level;
        Cell {
            level,
            ix: self.ix >> shift,
            iy: self.iy >> shift,
        }
    }
}

/// Axis-aligned box in finest-lattice units, closed on all sides.
#[derive(Clone, Copy, Debug)]
struct LatticeBox {
    x0: u64,
    y0: u64,
    x1: u64,
    y1: u64,
}

impl LatticeBox {
    fn intersects(&self, other: &LatticeBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    fn inflate(&self, by: u64, max: u64) -> LatticeBox {
        LatticeBox {
            x0: self.x0.saturating_sub(by),
            y0: self.y0.saturating_sub(by),
            x1: (self.x1 + by).min(max),
            y1: (self.y1 + by).min(max),
        }
    }
}

/// A mesh vertex: a deduplicated cell corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: VertexId,
    /// Finest-lattice coordinates.
    pub ix: u64,
    pub iy: u64,
    /// Maximum level over the leaf cells this vertex is a corner of.
    pub level: u8,
}

/// Crack-driven refinement rule: refine to `max_level` wherever the crack
/// field dips below `threshold`, padded by `band_width` meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineCriterion {
    pub threshold: f64,
    pub band_width: f64,
}

impl RefineCriterion {
    pub fn new(threshold: f64, band_width: f64) -> Result<Self, MeshError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(MeshError::InvalidSpec("threshold must lie in (0, 1)"));
        }
        if !(band_width > 0.0) {
            return Err(MeshError::InvalidSpec("band_width must be positive"));
        }
        Ok(Self {
            threshold,
            band_width,
        })
    }

    /// Default rule for a crack regularization length `d`: threshold 0.95,
    /// band two regularization lengths wide.
    pub fn for_crack_width(d: f64) -> Self {
        Self {
            threshold: 0.95,
            band_width: 2.0 * d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeshError {
    InvalidSpec(&'static str),
    LevelOutOfRange { level: u8, max_level: u8 },
    FieldLength { expected: usize, got: usize },
    InvalidCells(&'static str),
}

impl fmt::Display for MeshError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeshError::InvalidSpec(msg) => write!(f, "invalid domain spec: {msg}"),
            MeshError::LevelOutOfRange { level, max_level } => {
                write!(f, "level {level} out of range 0..={max_level}")
            }
            MeshError::FieldLength { expected, got } => {
                write!(f, "field has {got} values, mesh has {expected} vertices")
            }
            MeshError::InvalidCells(msg) => write!(f, "invalid cell set: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MeshError {}

/// Immutable 2:1-balanced quadtree mesh snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MeshRepr", into = "MeshRepr")]
pub struct RefinedMesh {
    spec: DomainSpec,
    cells: Vec<Cell>,
    cell_set: BTreeSet<Cell>,
    vertices: Vec<Vertex>,
    edges: Vec<(u32, u32)>,
    /// Hanging vertex -> the two endpoints of the coarse side it sits on,
    /// as local vertex indices.
    hanging: BTreeMap<u32, (u32, u32)>,
}

/// Serialized form: the leaf cells fully determine the mesh.
#[derive(Serialize, Deserialize)]
struct MeshRepr {
    spec: DomainSpec,
    cells: Vec<Cell>,
}

impl From<RefinedMesh> for MeshRepr {
    fn from(m: RefinedMesh) -> Self {
        MeshRepr {
            spec: m.spec,
            cells: m.cells,
        }
    }
}

impl TryFrom<MeshRepr> for RefinedMesh {
    type Error = MeshError;

    fn try_from(repr: MeshRepr) -> Result<Self, MeshError> {
        repr.spec.validate()?;
        RefinedMesh::from_cells(repr.spec, repr.cells)
    }
}

impl PartialEq for RefinedMesh {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.cells == other.cells
    }
}

impl RefinedMesh {
    /// Uniform level-0 mesh.
    pub fn base_mesh(spec: DomainSpec) -> Result<Self, MeshError> {
        spec.validate()?;
        let n = spec.base_resolution;
        let mut cells = Vec::with_capacity((n * n) as usize);
        for iy in 0..n {
            for ix in 0..n {
                cells.push(Cell { level: 0, ix, iy });
            }
        }
        Ok(Self::assemble(spec, cells))
    }

    /// Builds a mesh from an explicit leaf set, validating that the leaves
    /// tile the domain and are 2:1 balanced.
    pub fn from_cells(spec: DomainSpec, cells: Vec<Cell>) -> Result<Self, MeshError> {
        spec.validate()?;
        let mut area = 0u128;
        let full = (spec.lattice_intervals() as u128) * (spec.lattice_intervals() as u128);
        let set: BTreeSet<Cell> = cells.iter().copied().collect();
        if set.len() != cells.len() {
            return Err(MeshError::InvalidCells("duplicate leaf cells"));
        }
        for c in &cells {
            if c.level > spec.max_level {
                return Err(MeshError::InvalidCells("cell level exceeds max_level"));
            }
            if c.ix as u64 >= spec.cells_per_side(c.level) || c.iy as u64 >= spec.cells_per_side(c.level)
            {
                return Err(MeshError::InvalidCells("cell index outside domain"));
            }
            // Any strict ancestor present would overlap this cell.
            for l in 0..c.level {
                if set.contains(&c.ancestor(l)) {
                    return Err(MeshError::InvalidCells("overlapping cells"));
                }
            }
            let span = spec.cell_span(c.level) as u128;
            area += span * span;
        }
        if area != full {
            return Err(MeshError::InvalidCells("cells do not tile the domain"));
        }
        let mesh = Self::assemble(spec, set.into_iter().collect());
        if !mesh.is_balanced() {
            return Err(MeshError::InvalidCells("cell set is not 2:1 balanced"));
        }
        Ok(mesh)
    }

    /// Rebuilds derived structure (vertices, edges, hanging map) from a leaf
    /// set that is already known to tile the domain.
    fn assemble(spec: DomainSpec, mut cells: Vec<Cell>) -> Self {
        cells.sort_unstable();
        let cell_set: BTreeSet<Cell> = cells.iter().copied().collect();

        // Vertex level = max level over incident leaves.
        let mut level_of: BTreeMap<VertexId, u8> = BTreeMap::new();
        let points = spec.lattice_points();
        let vid = |ix: u64, iy: u64| VertexId(iy * points + ix);
        for c in &cells {
            let b = c.lattice_box(&spec);
            for (x, y) in [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)] {
                let e = level_of.entry(vid(x, y)).or_insert(c.level);
                *e = (*e).max(c.level);
            }
        }
        let vertices: Vec<Vertex> = level_of
            .iter()
            .map(|(&id, &level)| {
                let ix = id.0 % points;
                let iy = id.0 / points;
                Vertex { id, ix, iy, level }
            })
            .collect();
        let index_of: BTreeMap<VertexId, u32> = vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id, i as u32))
            .collect();

        // Edges run between consecutive vertices along each leaf side. Under
        // 2:1 balance the only possible interior vertex of a side is its
        // midpoint, and such a midpoint is a hanging vertex.
        let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
        let mut hanging: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
        let mut side = |a: VertexId, m: Option<VertexId>, b: VertexId| {
            let ia = index_of[&a];
            let ib = index_of[&b];
            match m.and_then(|m| index_of.get(&m).copied()) {
                Some(im) => {
                    edges.insert((ia.min(im), ia.max(im)));
                    edges.insert((im.min(ib), im.max(ib)));
                    hanging.insert(im, (ia, ib));
                }
                None => {
                    edges.insert((ia.min(ib), ia.max(ib)));
                }
            }
        };
        for c in &cells {
            let b = c.lattice_box(&spec);
            // Sides of finest-level cells have no integer midpoint and can
            // carry no hanging vertex.
            let splittable = b.x1 - b.x0 >= 2;
            let mx = (b.x0 + b.x1) / 2;
            let my = (b.y0 + b.y1) / 2;
            let hx = |y: u64| splittable.then(|| vid(mx, y));
            let hy = |x: u64| splittable.then(|| vid(x, my));
            side(vid(b.x0, b.y0), hx(b.y0), vid(b.x1, b.y0));
            side(vid(b.x0, b.y1), hx(b.y1), vid(b.x1, b.y1));
            side(vid(b.x0, b.y0), hy(b.x0), vid(b.x0, b.y1));
            side(vid(b.x1, b.y0), hy(b.x1), vid(b.x1, b.y1));
        }

        Self {
            spec,
            cells,
            cell_set,
            vertices,
            edges: edges.into_iter().collect(),
            hanging,
        }
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    /// Undirected edges as pairs of local vertex indices, lexicographically
    /// sorted.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Local index of a vertex id, if present in this mesh.
    pub fn vertex_index(&self, id: VertexId) -> Option<usize> {
        self.vertices.binary_search_by_key(&id, |v| v.id).ok()
    }

    /// Physical coordinates of a vertex.
    pub fn position(&self, v: &Vertex) -> (f64, f64) {
        self.spec.lattice_to_point(v.ix, v.iy)
    }

    /// Hanging vertices with the two endpoints of the coarse side carrying
    /// them (local indices). Endpoints may themselves be hanging; see
    /// [`RefinedMesh::resolved_constraints`].
    pub fn hanging_vertices(&self) -> &BTreeMap<u32, (u32, u32)> {
        &self.hanging
    }

    /// Per-vertex constraint expansion onto non-hanging vertices: a regular
    /// vertex maps to itself with weight 1, a hanging vertex to its side
    /// endpoints (recursively resolved) with weights summing to 1.
    pub fn resolved_constraints(&self) -> Vec<Vec<(u32, f64)>> {
        let n = self.vertices.len();
        let mut out: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n);
        for i in 0..n as u32 {
            let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
            self.resolve_into(i, 1.0, &mut acc, 0);
            out.push(acc.into_iter().collect());
        }
        out
    }

    fn resolve_into(&self, v: u32, w: f64, acc: &mut BTreeMap<u32, f64>, depth: u8) {
        debug_assert!(depth <= self.spec.max_level + 1);
        match self.hanging.get(&v) {
            Some(&(a, b)) => {
                self.resolve_into(a, w * 0.5, acc, depth + 1);
                self.resolve_into(b, w * 0.5, acc, depth + 1);
            }
            None => *acc.entry(v).or_insert(0.0) += w,
        }
    }

    /// Highest level among the leaf cells.
    pub fn finest_level(&self) -> u8 {
        self.cells.iter().map(|c| c.level).max().unwrap_or(0)
    }

    /// Checks 2:1 balance: side-adjacent leaves differ by at most one level.
    pub fn is_balanced(&self) -> bool {
        for c in &self.cells {
            if c.level + 2 <= self.spec.max_level && self.has_finer_side_neighbor(c) {
                return false;
            }
        }
        true
    }

    /// True when some leaf more than one level finer than `c` shares a side
    /// segment with `c`.
    fn has_finer_side_neighbor(&self, c: &Cell) -> bool {
        for l in (c.level + 2)..=self.spec.max_level {
            let shift = l - c.level;
            let n = 1u32 << shift;
            let per_side = self.spec.cells_per_side(l);
            let (cx, cy) = (c.ix << shift, c.iy << shift);
            for k in 0..n {
                // (dx, dy) pairs walk the four sides of `c` at level `l`.
                let probes = [
                    (cx.wrapping_sub(1), cy + k),
                    (cx + n, cy + k),
                    (cx + k, cy.wrapping_sub(1)),
                    (cx + k, cy + n),
                ];
                for (px, py) in probes {
                    if (px as u64) < per_side
                        && (py as u64) < per_side
                        && self.cell_set.contains(&Cell {
                            level: l,
                            ix: px,
                            iy: py,
                        })
                    {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Crack-driven regridding. Cells of this mesh whose minimum corner value
    /// of `phi` falls below the criterion threshold define the crack region;
    /// the new mesh is refined to `max_level` on that region inflated by
    /// `band_width` and coarsened to level 0 away from it, then rebalanced.
    ///
    /// `phi` must align with [`RefinedMesh::vertices`].
    pub fn regrid(&self, phi: &[f64], crit: &RefineCriterion) -> Result<RefinedMesh, MeshError> {
        if phi.len() != self.vertices.len() {
            return Err(MeshError::FieldLength {
                expected: self.vertices.len(),
                got: phi.len(),
            });
        }
        let by_id: BTreeMap<VertexId, f64> = self
            .vertices
            .iter()
            .zip(phi)
            .map(|(v, &p)| (v.id, p))
            .collect();
        self.regrid_by_id(&by_id, crit)
    }

    /// [`RefinedMesh::regrid`] with the crack field keyed by vertex id.
    /// Corners absent from the map are ignored when taking the per-cell
    /// minimum, which makes re-applying a regrid with the unchanged map a
    /// fixed point: `m.regrid_by_id(phi, c)?.regrid_by_id(phi, c)` returns
    /// the same mesh.
    pub fn regrid_by_id(
        &self,
        phi: &BTreeMap<VertexId, f64>,
        crit: &RefineCriterion,
    ) -> Result<RefinedMesh, MeshError> {
        if phi.is_empty() {
            return Err(MeshError::FieldLength {
                expected: self.vertices.len(),
                got: 0,
            });
        }
        let points = self.spec.lattice_points();
        // The crack region is quantized to base cells: the refinement target
        // then depends only on which base cells hold a sub-threshold corner,
        // not on how finely the input mesh sampled them.
        let mut flagged_base: BTreeSet<(u32, u32)> = BTreeSet::new();
        for c in &self.cells {
            let b = c.lattice_box(&self.spec);
            let flagged = [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)]
                .into_iter()
                .filter_map(|(x, y)| phi.get(&VertexId(y * points + x)))
                .any(|&p| p < crit.threshold);
            if flagged {
                let base = c.ancestor(0);
                flagged_base.insert((base.ix, base.iy));
            }
        }
        let band = fmath::ceil(crit.band_width / self.spec.lattice_spacing()) as u64;
        let max = self.spec.lattice_intervals();
        let region: Vec<LatticeBox> = flagged_base
            .into_iter()
            .map(|(ix, iy)| {
                Cell { level: 0, ix, iy }
                    .lattice_box(&self.spec)
                    .inflate(band, max)
            })
            .collect();
        Ok(Self::build_refined(self.spec, &region))
    }

    /// Builds the mesh refined to `max_level` on every cell intersecting the
    /// region, then restores 2:1 balance.
    fn build_refined(spec: DomainSpec, region: &[LatticeBox]) -> RefinedMesh {
        let mut leaves: Vec<Cell> = Vec::new();
        let mut stack: Vec<Cell> = Vec::new();
        let n = spec.base_resolution;
        for iy in 0..n {
            for ix in 0..n {
                stack.push(Cell { level: 0, ix, iy });
            }
        }
        while let Some(c) = stack.pop() {
            let b = c.lattice_box(&spec);
            if c.level < spec.max_level && region.iter().any(|r| r.intersects(&b)) {
                stack.extend(c.children());
            } else {
                leaves.push(c);
            }
        }
        Self::balance(spec, leaves)
    }

    /// Refines leaves until 2:1 side balance holds.
    fn balance(spec: DomainSpec, leaves: Vec<Cell>) -> RefinedMesh {
        let mut mesh = Self::assemble(spec, leaves);
        loop {
            let mut split: Vec<Cell> = Vec::new();
            for c in &mesh.cells {
                if c.level + 2 <= spec.max_level && mesh.has_finer_side_neighbor(c) {
                    split.push(*c);
                }
            }
            if split.is_empty() {
                return mesh;
            }
            let mut leaves = mesh.cells;
            let marked: BTreeSet<Cell> = split.iter().copied().collect();
            leaves.retain(|c| !marked.contains(c));
            for c in split {
                leaves.extend(c.children());
            }
            mesh = Self::assemble(spec, leaves);
        }
    }

    /// Replaces every cell finer than `k` by its level-`k` ancestor. `k`
    /// equal to `max_level` returns the identical mesh; `k = 0` returns the
    /// uniform base grid.
    pub fn restrict_to_levels(&self, k: u8) -> Result<RefinedMesh, MeshError> {
        if k > self.spec.max_level {
            return Err(MeshError::LevelOutOfRange {
                level: k,
                max_level: self.spec.max_level,
            });
        }
        let truncated: BTreeSet<Cell> = self
            .cells
            .iter()
            .map(|c| if c.level > k { c.ancestor(k) } else { *c })
            .collect();
        Ok(Self::assemble(self.spec, truncated.into_iter().collect()))
    }

    /// Bilinear parent weights for every vertex present at levels `0..=k` but
    /// absent at levels `0..=k-1`: each maps to the corners of its containing
    /// cell in the level-restricted coarse mesh, with non-negative weights
    /// summing to one. Zero-weight corners are dropped, so a side midpoint
    /// has two parents and a cell center four.
    pub fn vertex_parents(
        &self,
        k: u8,
    ) -> Result<BTreeMap<VertexId, Vec<(VertexId, f64)>>, MeshError> {
        if k == 0 || k > self.spec.max_level {
            return Err(MeshError::LevelOutOfRange {
                level: k,
                max_level: self.spec.max_level,
            });
        }
        let fine = self.restrict_to_levels(k)?;
        let coarse = self.restrict_to_levels(k - 1)?;
        Ok(parent_map(&fine, &coarse))
    }

    /// Leaf cell containing the lattice point; points on cell boundaries
    /// resolve to the cell on their upper-right side where one exists.
    pub fn locate_leaf(&self, ix: u64, iy: u64) -> Cell {
        let span0 = self.spec.cell_span(0);
        let per_side = self.spec.base_resolution as u64;
        let bx = (ix / span0).min(per_side - 1);
        let by = (iy / span0).min(per_side - 1);
        let mut c = Cell {
            level: 0,
            ix: bx as u32,
            iy: by as u32,
        };
        while !self.cell_set.contains(&c) {
            debug_assert!(c.level < self.spec.max_level, "leaf lookup fell off the tree");
            let b = c.lattice_box(&self.spec);
            let half = (b.x1 - b.x0) / 2;
            let cx = u32::from(ix >= b.x0 + half);
            let cy = u32::from(iy >= b.y0 + half);
            c = Cell {
                level: c.level + 1,
                ix: c.ix * 2 + cx,
                iy: c.iy * 2 + cy,
            };
        }
        c
    }

    /// Bilinear sample of a nodal field (aligned with this mesh's vertices)
    /// at an arbitrary lattice point. Exact at the mesh's own vertices,
    /// including hanging ones.
    pub fn sample_bilinear(&self, field: &[f64], ix: u64, iy: u64) -> f64 {
        debug_assert_eq!(field.len(), self.vertices.len());
        let points = self.spec.lattice_points();
        if let Some(idx) = self.vertex_index(VertexId(iy * points + ix)) {
            return field[idx];
        }
        let c = self.locate_leaf(ix, iy);
        let b = c.lattice_box(&self.spec);
        let span = (b.x1 - b.x0) as f64;
        let xi = (ix - b.x0) as f64 / span;
        let eta = (iy - b.y0) as f64 / span;
        let corner = |x: u64, y: u64| -> f64 {
            let idx = self
                .vertex_index(VertexId(y * points + x))
                .expect("cell corner is a mesh vertex");
            field[idx]
        };
        (1.0 - xi) * (1.0 - eta) * corner(b.x0, b.y0)
            + xi * (1.0 - eta) * corner(b.x1, b.y0)
            + (1.0 - xi) * eta * corner(b.x0, b.y1)
            + xi * eta * corner(b.x1, b.y1)
    }

    /// Mirror image of the mesh about the vertical centerline x = side/2.
    pub fn mirror_x(&self) -> RefinedMesh {
        let cells: Vec<Cell> = self
            .cells
            .iter()
            .map(|c| {
                let per_side = self.spec.cells_per_side(c.level) as u32;
                Cell {
                    level: c.level,
                    ix: per_side - 1 - c.ix,
                    iy: c.iy,
                }
            })
            .collect();
        Self::assemble(self.spec, cells)
    }

    /// Id of the vertex at the mirrored lattice position.
    pub fn mirror_vertex_id(&self, id: VertexId) -> VertexId {
        let points = self.spec.lattice_points();
        let ix = id.0 % points;
        let iy = id.0 / points;
        VertexId(iy * points + (points - 1 - ix))
    }
}

/// Bilinear parents of every vertex of `fine` that is absent from `coarse`.
pub(crate) fn parent_map(
    fine: &RefinedMesh,
    coarse: &RefinedMesh,
) -> BTreeMap<VertexId, Vec<(VertexId, f64)>> {
    let points = fine.spec.lattice_points();
    let mut map = BTreeMap::new();
    for v in fine.vertices() {
        if coarse.vertex_index(v.id).is_some() {
            continue;
        }
        let c = coarse.locate_leaf(v.ix, v.iy);
        let b = c.lattice_box(&coarse.spec);
        let span = (b.x1 - b.x0) as f64;
        let xi = (v.ix - b.x0) as f64 / span;
        let eta = (v.iy - b.y0) as f64 / span;
        let mut parents = Vec::with_capacity(4);
        for (x, y, w) in [
            (b.x0, b.y0, (1.0 - xi) * (1.0 - eta)),
            (b.x1, b.y0, xi * (1.0 - eta)),
            (b.x0, b.y1, (1.0 - xi) * eta),
            (b.x1, b.y1, xi * eta),
        ] {
            if w > 0.0 {
                parents.push((VertexId(y * points + x), w));
            }
        }
        map.insert(v.id, parents);
    }
    map
}
