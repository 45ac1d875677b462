//! Feature graphs extracted from (level-restricted) meshes, and the
//! cross-level transfer maps consumed by the downscale/upscale operators.
//!
//! A node carries seven features: position (x, y), displacement (u, v), the
//! crack field value, and the applied load increment (u0, v0) broadcast to
//! every node so the network can tell loading modes apart. Edges are
//! directed, carry the binary connectivity value (1 for every edge present,
//! including one self-loop per node), and are ordered by (receiver, sender)
//! so extraction is fully deterministic.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::mesh::{MeshError, RefinedMesh, VertexId};

/// Features stored per node, in row order: x, y, u, v, phi, u0, v0.
pub const NODE_FEATURES: usize = 7;

/// Nodal physical fields aligned with a mesh's vertex order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalState {
    pub phi: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhysicalState {
    /// All-intact state (phi = 1, zero displacement) for a mesh with `n`
    /// vertices.
    pub fn intact(n: usize) -> Self {
        Self {
            phi: alloc::vec![1.0; n],
            u: alloc::vec![0.0; n],
            v: alloc::vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Per-step applied boundary displacement increment, broadcast to all nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedLoad {
    pub u0: f64,
    pub v0: f64,
}

/// One time frame of a simulation: the instantaneous mesh, nodal fields
/// aligned with its vertices, and the applied load increment that produced
/// the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimFrame {
    pub mesh: RefinedMesh,
    pub state: PhysicalState,
    pub load: AppliedLoad,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphError {
    MissingField { expected: usize, got: usize },
    Mesh(MeshError),
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::MissingField { expected, got } => {
                write!(f, "state holds {got} values for a mesh of {expected} vertices")
            }
            GraphError::Mesh(e) => write!(f, "{e}"),
        }
    }
}

impl From<MeshError> for GraphError {
    fn from(e: MeshError) -> Self {
        GraphError::Mesh(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GraphError {}

/// The node/edge feature graph of a mesh restricted to levels `0..=level`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGraph {
    pub level: u8,
    /// Stable global vertex ids, ascending; row i of every per-node array
    /// belongs to `node_ids[i]`.
    pub node_ids: Vec<VertexId>,
    /// Node positions in meters.
    pub positions: Vec<(f64, f64)>,
    /// Raw node features, `n x NODE_FEATURES`, row-major.
    pub features: Vec<f64>,
    /// Directed edges (sender, receiver) sorted by (receiver, sender), with
    /// one self-loop per node.
    pub edges: Vec<(u32, u32)>,
    /// Relative position receiver - sender per edge, in meters.
    pub edge_rel: Vec<(f64, f64)>,
}

impl LevelGraph {
    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Extracts the level-`k` graph of `mesh` with physical state `state`
/// (aligned with `mesh`'s vertices) and load broadcast to every node.
pub fn extract_graph(
    mesh: &RefinedMesh,
    state: &PhysicalState,
    load: AppliedLoad,
    k: u8,
) -> Result<LevelGraph, GraphError> {
    let n_full = mesh.vertices().len();
    if state.phi.len() != n_full || state.u.len() != n_full || state.v.len() != n_full {
        return Err(GraphError::MissingField {
            expected: n_full,
            got: state.phi.len().min(state.u.len()).min(state.v.len()),
        });
    }
    let restricted = mesh.restrict_to_levels(k)?;
    let n = restricted.vertices().len();
    let mut node_ids = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * NODE_FEATURES);
    for v in restricted.vertices() {
        let full_idx = mesh
            .vertex_index(v.id)
            .expect("restricted vertex exists in the full mesh");
        let (x, y) = restricted.position(v);
        node_ids.push(v.id);
        positions.push((x, y));
        features.extend_from_slice(&[
            x,
            y,
            state.u[full_idx],
            state.v[full_idx],
            state.phi[full_idx],
            load.u0,
            load.v0,
        ]);
    }

    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(restricted.edges().len() * 2 + n);
    for i in 0..n as u32 {
        edges.push((i, i));
    }
    for &(a, b) in restricted.edges() {
        edges.push((a, b));
        edges.push((b, a));
    }
    edges.sort_unstable_by_key(|&(s, r)| (r, s));
    let edge_rel = edges
        .iter()
        .map(|&(s, r)| {
            let (xs, ys) = positions[s as usize];
            let (xr, yr) = positions[r as usize];
            (xr - xs, yr - ys)
        })
        .collect();

    Ok(LevelGraph {
        level: k,
        node_ids,
        positions,
        features,
        edges,
        edge_rel,
    })
}

/// Bilinear correspondence between the level-`k` and level-`k-1` restricted
/// vertex sets of one mesh. The same map serves both directions: downscale
/// aggregates fine-only rows into their parents, upscale interpolates them
/// back.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMap {
    /// Fine side spans levels `0..=level`, coarse side `0..=level-1`.
    pub level: u8,
    pub fine_ids: Vec<VertexId>,
    pub coarse_ids: Vec<VertexId>,
    /// `(fine index, coarse index)` per vertex present on both sides,
    /// ascending in fine index.
    pub shared: Vec<(u32, u32)>,
    /// Per fine-only vertex: its fine index and bilinear parents as coarse
    /// indices with non-negative weights summing to one.
    pub fine_only: Vec<(u32, Vec<(u32, f64)>)>,
}

impl TransferMap {
    pub fn fine_count(&self) -> usize {
        self.fine_ids.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_ids.len()
    }
}

/// Builds the single-level transfer maps of `mesh` for every populated
/// refinement level, finest first (the order downscale operations consume
/// them). A uniform level-0 mesh yields an empty list.
pub fn build_transfer_maps(mesh: &RefinedMesh) -> Vec<TransferMap> {
    let finest = mesh.finest_level();
    let mut maps = Vec::with_capacity(finest as usize);
    for k in (1..=finest).rev() {
        let fine = mesh
            .restrict_to_levels(k)
            .expect("level below finest is valid");
        let coarse = mesh
            .restrict_to_levels(k - 1)
            .expect("level below finest is valid");
        let parents = crate::mesh::parent_map(&fine, &coarse);
        let fine_ids: Vec<VertexId> = fine.vertices().iter().map(|v| v.id).collect();
        let coarse_ids: Vec<VertexId> = coarse.vertices().iter().map(|v| v.id).collect();
        let coarse_index = |id: VertexId| -> u32 {
            coarse_ids
                .binary_search(&id)
                .expect("parent id is a coarse vertex") as u32
        };
        let mut shared = Vec::with_capacity(coarse_ids.len());
        let mut fine_only = Vec::with_capacity(parents.len());
        for (i, id) in fine_ids.iter().enumerate() {
            match parents.get(id) {
                Some(ps) => fine_only.push((
                    i as u32,
                    ps.iter().map(|(pid, w)| (coarse_index(*pid), *w)).collect(),
                )),
                None => shared.push((i as u32, coarse_index(*id))),
            }
        }
        maps.push(TransferMap {
            level: k,
            fine_ids,
            coarse_ids,
            shared,
            fine_only,
        });
    }
    maps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{DomainSpec, RefineCriterion, RefinedMesh};
    use alloc::collections::BTreeSet;

    fn refined_fixture() -> RefinedMesh {
        let spec = DomainSpec::new(0.5, 4, 2).unwrap();
        let m = RefinedMesh::base_mesh(spec).unwrap();
        let mut phi = alloc::vec![1.0; m.vertices().len()];
        phi[12] = 0.0;
        m.regrid(&phi, &RefineCriterion::new(0.9, 0.02).unwrap())
            .unwrap()
    }

    #[test]
    fn level0_grid_edge_counts() {
        // Hand enumeration: 2x2 grid has 9 nodes, 12 undirected edges, so 24
        // directed edges plus 9 self-loops.
        let spec = DomainSpec::new(0.5, 2, 1).unwrap();
        let m = RefinedMesh::base_mesh(spec).unwrap();
        let g = extract_graph(&m, &PhysicalState::intact(9), AppliedLoad { u0: 0.0, v0: 0.0 }, 0)
            .unwrap();
        assert_eq!(g.node_count(), 9);
        assert_eq!(g.edge_count(), 24 + 9);
        for i in 0..9u32 {
            assert!(g.edges.contains(&(i, i)));
        }
    }

    #[test]
    fn tension_load_broadcast_and_intact_phi() {
        let spec = DomainSpec::new(0.5, 2, 1).unwrap();
        let m = RefinedMesh::base_mesh(spec).unwrap();
        let dv = 2.5e-5;
        let g = extract_graph(&m, &PhysicalState::intact(9), AppliedLoad { u0: 0.0, v0: dv }, 1)
            .unwrap();
        for row in 0..g.node_count() {
            let f = &g.features[row * NODE_FEATURES..(row + 1) * NODE_FEATURES];
            assert_eq!(f[4], 1.0);
            assert_eq!(f[5], 0.0);
            assert_eq!(f[6], dv);
        }
    }

    #[test]
    fn missing_field_rejected() {
        let spec = DomainSpec::new(0.5, 2, 1).unwrap();
        let m = RefinedMesh::base_mesh(spec).unwrap();
        let bad = PhysicalState::intact(4);
        assert!(matches!(
            extract_graph(&m, &bad, AppliedLoad { u0: 0.0, v0: 0.0 }, 0),
            Err(GraphError::MissingField { .. })
        ));
    }

    #[test]
    fn extraction_is_deterministic() {
        let mesh = refined_fixture();
        let state = PhysicalState::intact(mesh.vertices().len());
        let load = AppliedLoad { u0: 0.0, v0: 1e-5 };
        let a = extract_graph(&mesh, &state, load, 2).unwrap();
        let b = extract_graph(&mesh, &state, load, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn level_nesting_matches_fine_only_sets() {
        let mesh = refined_fixture();
        let state = PhysicalState::intact(mesh.vertices().len());
        let load = AppliedLoad { u0: 0.0, v0: 0.0 };
        let maps = build_transfer_maps(&mesh);
        assert_eq!(maps.len(), mesh.finest_level() as usize);
        for map in &maps {
            let fine = extract_graph(&mesh, &state, load, map.level).unwrap();
            let coarse = extract_graph(&mesh, &state, load, map.level - 1).unwrap();
            assert_eq!(fine.node_ids, map.fine_ids);
            assert_eq!(coarse.node_ids, map.coarse_ids);
            // Set-difference oracle for the fine-only count.
            let coarse_set: BTreeSet<VertexId> = coarse.node_ids.iter().copied().collect();
            let fine_only_direct: Vec<VertexId> = fine
                .node_ids
                .iter()
                .copied()
                .filter(|id| !coarse_set.contains(id))
                .collect();
            assert_eq!(map.fine_only.len(), fine_only_direct.len());
            assert_eq!(
                map.fine_only.len(),
                fine.node_count() - coarse.node_count()
            );
            // Down followed by up touches exactly the original id set.
            let mut rebuilt: BTreeSet<VertexId> =
                map.shared.iter().map(|&(f, _)| map.fine_ids[f as usize]).collect();
            rebuilt.extend(map.fine_only.iter().map(|&(f, _)| map.fine_ids[f as usize]));
            let original: BTreeSet<VertexId> = fine.node_ids.iter().copied().collect();
            assert_eq!(rebuilt, original);
            for (_, parents) in &map.fine_only {
                let total: f64 = parents.iter().map(|(_, w)| w).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uniform_mesh_has_no_transfer_maps() {
        let spec = DomainSpec::new(0.5, 4, 3).unwrap();
        let m = RefinedMesh::base_mesh(spec).unwrap();
        assert!(build_transfer_maps(&m).is_empty());
    }
}
