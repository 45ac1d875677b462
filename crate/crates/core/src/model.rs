//! The multiscale message-passing pipeline: encoder, per-stage
//! message-passing + downscale, coarsest-level block with skip, per-stage
//! upscale + message-passing with skips, decoder.
//!
//! Three architectures traverse the same refinement hierarchy differently:
//! four-stage (one level per coarsening), two-stage (two levels per
//! coarsening) and single-stage (all levels at once). The multi-level jumps
//! compose single-level transfer maps, so all three agree on shared nodes.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    graph_transformer_forward, mlp_forward, skip_aggregate, AdError, EdgeSet,
    GraphTransformerParams, MlpParams, RowMapPlan, Tape, Tensor, TensorId,
};
use crate::graph::{
    build_transfer_maps, extract_graph, AppliedLoad, GraphError, LevelGraph, PhysicalState,
    SimFrame, TransferMap, NODE_FEATURES,
};
use crate::mesh::{MeshError, RefineCriterion, RefinedMesh};

/// Architecture family: how many coarsening stages traverse the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Four-stage refinement: one level per downscale.
    Fsr,
    /// Two-stage refinement: two levels per downscale.
    Tsr,
    /// Single-stage refinement: all levels in one downscale.
    Ssr,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Fsr => "fsr",
            Family::Tsr => "tsr",
            Family::Ssr => "ssr",
        };
        f.write_str(s)
    }
}

/// Architecture hyperparameters; `max_level` is the domain's refinement
/// depth the stage schedule is built for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub family: Family,
    pub max_level: u8,
    pub model_dim: usize,
    pub heads: usize,
}

impl ArchitectureConfig {
    pub fn new(family: Family, max_level: u8, model_dim: usize, heads: usize) -> Self {
        Self {
            family,
            max_level,
            model_dim,
            heads,
        }
    }

    /// Paper-default dimensions: four attention heads, hidden node dimension
    /// 128.
    pub fn with_default_dims(family: Family, max_level: u8) -> Self {
        Self::new(family, max_level, 128, 4)
    }

    /// Levels removed per downscale stage, finest first. The upscale path is
    /// the exact reverse.
    pub fn stages(&self) -> Vec<Vec<u8>> {
        let levels: Vec<u8> = (1..=self.max_level).rev().collect();
        let chunk = match self.family {
            Family::Fsr => 1,
            Family::Tsr => 2,
            Family::Ssr => levels.len().max(1),
        };
        levels.chunks(chunk).map(|c| c.to_vec()).collect()
    }

    /// Graph levels visited, from the full mesh down to the coarsest.
    pub fn stage_levels(&self) -> Vec<u8> {
        let mut out = alloc::vec![self.max_level];
        for stage in self.stages() {
            out.push(stage.last().unwrap() - 1);
        }
        out
    }

    /// Message-passing blocks per forward: one per stage on each side plus
    /// one at the coarsest level.
    pub fn mp_block_count(&self) -> usize {
        2 * self.stages().len() + 1
    }
}

/// Feature scaling constants stored with the model so inference is
/// self-contained: positions scale by 1/length, displacements and loads by
/// 1/displacement, the crack field is already dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub length_scale: f64,
    pub displacement_scale: f64,
}

impl Normalization {
    pub fn new(length_scale: f64, displacement_scale: f64) -> Self {
        Self {
            length_scale,
            displacement_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    Ad(AdError),
    Graph(GraphError),
    Mesh(MeshError),
    HierarchyMismatch(&'static str),
    NonFiniteOutput { step: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Ad(e) => write!(f, "{e}"),
            ModelError::Graph(e) => write!(f, "{e}"),
            ModelError::Mesh(e) => write!(f, "{e}"),
            ModelError::HierarchyMismatch(msg) => write!(f, "hierarchy mismatch: {msg}"),
            ModelError::NonFiniteOutput { step } => {
                write!(f, "non-finite prediction at rollout step {step}")
            }
        }
    }
}

impl From<AdError> for ModelError {
    fn from(e: AdError) -> Self {
        ModelError::Ad(e)
    }
}

impl From<GraphError> for ModelError {
    fn from(e: GraphError) -> Self {
        ModelError::Graph(e)
    }
}

impl From<MeshError> for ModelError {
    fn from(e: MeshError) -> Self {
        ModelError::Mesh(e)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

/// Everything a forward pass needs about one frame: the level graphs the
/// architecture visits and the feature-transfer plans between consecutive
/// stages.
#[derive(Clone, Debug)]
pub struct GraphHierarchy {
    pub levels: Vec<u8>,
    pub graphs: Vec<LevelGraph>,
    pub edge_sets: Vec<EdgeSet>,
    /// Per stage: single-level downscale plans applied in order.
    pub down_plans: Vec<Vec<Rc<RowMapPlan>>>,
    /// Per stage: single-level upscale plans in the order the upscale path
    /// applies them (coarse to fine).
    pub up_plans: Vec<Vec<Rc<RowMapPlan>>>,
}

/// Downscale plan of a transfer map: shared nodes copy their embedding, and
/// every coarse node additionally receives the parent-weighted sum of the
/// fine-only nodes mapping to it, divided by the node's incoming count.
pub fn down_plan(map: &TransferMap) -> RowMapPlan {
    let mut incoming = alloc::vec![0u32; map.coarse_count()];
    for (_, parents) in &map.fine_only {
        for &(c, _) in parents {
            incoming[c as usize] += 1;
        }
    }
    let mut triples: Vec<(u32, u32, f64)> = Vec::new();
    for &(f, c) in &map.shared {
        triples.push((c, f, 1.0));
    }
    for (f, parents) in &map.fine_only {
        for &(c, w) in parents {
            triples.push((c, *f, w / incoming[c as usize].max(1) as f64));
        }
    }
    triples.sort_unstable_by_key(|&(dst, src, _)| (dst, src));
    RowMapPlan {
        in_rows: map.fine_count(),
        out_rows: map.coarse_count(),
        triples,
    }
}

/// Upscale plan: shared nodes copy, recreated fine nodes take the bilinear
/// interpolation of their coarse parents.
pub fn up_plan(map: &TransferMap) -> RowMapPlan {
    let mut triples: Vec<(u32, u32, f64)> = Vec::new();
    for &(f, c) in &map.shared {
        triples.push((f, c, 1.0));
    }
    for (f, parents) in &map.fine_only {
        for &(c, w) in parents {
            triples.push((*f, c, w));
        }
    }
    triples.sort_unstable_by_key(|&(dst, src, _)| (dst, src));
    RowMapPlan {
        in_rows: map.coarse_count(),
        out_rows: map.fine_count(),
        triples,
    }
}

/// Builds the hierarchy of one frame for the given architecture.
pub fn build_hierarchy(
    mesh: &RefinedMesh,
    state: &PhysicalState,
    load: AppliedLoad,
    config: &ArchitectureConfig,
    normalization: &Normalization,
) -> Result<GraphHierarchy, ModelError> {
    if config.max_level != mesh.spec().max_level {
        return Err(ModelError::HierarchyMismatch(
            "architecture max_level differs from the mesh's",
        ));
    }
    let levels = config.stage_levels();
    let inv_length = 1.0 / normalization.length_scale;
    let mut graphs = Vec::with_capacity(levels.len());
    let mut edge_sets = Vec::with_capacity(levels.len());
    for &k in &levels {
        let g = extract_graph(mesh, state, load, k)?;
        edge_sets.push(EdgeSet::from_graph(&g, inv_length));
        graphs.push(g);
    }
    let maps = build_transfer_maps(mesh);
    let map_for = |level: u8| maps.iter().find(|m| m.level == level);
    let mut down_plans = Vec::new();
    let mut up_plans = Vec::new();
    for stage in config.stages() {
        let mut down = Vec::new();
        let mut up = Vec::new();
        for &level in &stage {
            if let Some(m) = map_for(level) {
                down.push(Rc::new(down_plan(m)));
                up.push(Rc::new(up_plan(m)));
            }
        }
        up.reverse();
        down_plans.push(down);
        up_plans.push(up);
    }
    Ok(GraphHierarchy {
        levels,
        graphs,
        edge_sets,
        down_plans,
        up_plans,
    })
}

/// Parameters of the full pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleModel {
    pub config: ArchitectureConfig,
    pub normalization: Normalization,
    pub encoder: MlpParams,
    pub down_blocks: Vec<GraphTransformerParams>,
    pub coarsest: GraphTransformerParams,
    pub up_blocks: Vec<GraphTransformerParams>,
    pub decoder: MlpParams,
}

impl MultiscaleModel {
    /// Fresh Glorot-initialized model; the parameter layout and RNG
    /// consumption order are fixed, so equal seeds give equal models.
    pub fn init(config: ArchitectureConfig, normalization: Normalization, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dm = config.model_dim;
        let stages = config.stages().len();
        let encoder = MlpParams::init(&[NODE_FEATURES, dm, dm, dm], &mut rng);
        let down_blocks = (0..stages)
            .map(|_| GraphTransformerParams::init(dm, config.heads, &mut rng))
            .collect();
        let coarsest = GraphTransformerParams::init(dm, config.heads, &mut rng);
        let up_blocks = (0..stages)
            .map(|_| GraphTransformerParams::init(dm, config.heads, &mut rng))
            .collect();
        let decoder = MlpParams::init(&[dm, dm, dm, 3], &mut rng);
        Self {
            config,
            normalization,
            encoder,
            down_blocks,
            coarsest,
            up_blocks,
            decoder,
        }
    }

    /// All parameter tensors in canonical (training/checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.tensors("encoder");
        for (i, b) in self.down_blocks.iter().enumerate() {
            out.extend(b.tensors(&alloc::format!("down{i}")));
        }
        out.extend(self.coarsest.tensors("coarsest"));
        for (i, b) in self.up_blocks.iter().enumerate() {
            out.extend(b.tensors(&alloc::format!("up{i}")));
        }
        out.extend(self.decoder.tensors("decoder"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.tensors_mut("encoder");
        for (i, b) in self.down_blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut(&alloc::format!("down{i}")));
        }
        out.extend(self.coarsest.tensors_mut("coarsest"));
        for (i, b) in self.up_blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut(&alloc::format!("up{i}")));
        }
        out.extend(self.decoder.tensors_mut("decoder"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Normalized feature tensor of a level graph.
    pub fn normalized_features(&self, graph: &LevelGraph) -> Tensor {
        let inv_len = 1.0 / self.normalization.length_scale;
        let inv_disp = 1.0 / self.normalization.displacement_scale;
        let n = graph.node_count();
        let mut data = Vec::with_capacity(n * NODE_FEATURES);
        for row in 0..n {
            let f = &graph.features[row * NODE_FEATURES..(row + 1) * NODE_FEATURES];
            data.extend_from_slice(&[
                f[0] * inv_len,
                f[1] * inv_len,
                f[2] * inv_disp,
                f[3] * inv_disp,
                f[4],
                f[5] * inv_disp,
                f[6] * inv_disp,
            ]);
        }
        Tensor::from_vec(n, NODE_FEATURES, data)
    }
}

/// A forward pass recorded on a tape, for training.
pub struct TapedForward {
    pub tape: Tape,
    /// Final n x 3 prediction (phi, u, v) in normalized units, rows aligned
    /// with the full mesh's vertex ids.
    pub output: TensorId,
    /// Registered parameter ids, aligned with [`MultiscaleModel::tensors`].
    pub param_ids: Vec<(String, TensorId)>,
    pub mp_blocks_applied: usize,
}

/// Runs the pipeline on a tape. The output stays in normalized units
/// (displacement columns scaled by 1/displacement_scale); [`predict`]
/// converts back to physical units.
pub fn forward_on_tape(
    model: &MultiscaleModel,
    hierarchy: &GraphHierarchy,
) -> Result<TapedForward, ModelError> {
    let stages = model.config.stages().len();
    if hierarchy.levels.len() != stages + 1 {
        return Err(ModelError::HierarchyMismatch(
            "hierarchy stage count differs from the architecture's",
        ));
    }
    let mut tape = Tape::new();
    let mut param_ids: Vec<(String, TensorId)> = Vec::new();

    let encoder_ids = model.encoder.register(&mut tape);
    push_mlp_ids(&mut param_ids, &model.encoder, &encoder_ids, "encoder");
    let down_ids: Vec<_> = model
        .down_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let ids = b.register(&mut tape);
            push_block_ids(&mut param_ids, b, &ids, &alloc::format!("down{i}"));
            ids
        })
        .collect();
    let coarsest_ids = model.coarsest.register(&mut tape);
    push_block_ids(&mut param_ids, &model.coarsest, &coarsest_ids, "coarsest");
    let up_ids: Vec<_> = model
        .up_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let ids = b.register(&mut tape);
            push_block_ids(&mut param_ids, b, &ids, &alloc::format!("up{i}"));
            ids
        })
        .collect();
    let decoder_ids = model.decoder.register(&mut tape);
    push_mlp_ids(&mut param_ids, &model.decoder, &decoder_ids, "decoder");
    debug_assert_eq!(param_ids.len(), model.tensors().len());

    let mut mp_blocks = 0usize;
    let input = tape.input(model.normalized_features(&hierarchy.graphs[0]));
    let mut x = mlp_forward(&mut tape, &encoder_ids, input)?;

    let mut caches: Vec<TensorId> = Vec::with_capacity(stages);
    for i in 0..stages {
        x = graph_transformer_forward(&mut tape, &down_ids[i], &hierarchy.edge_sets[i], x)?;
        mp_blocks += 1;
        caches.push(x);
        for plan in &hierarchy.down_plans[i] {
            x = tape.row_map(x, plan.clone())?;
        }
    }

    // Coarsest block aggregates with its own (pre message passing) input.
    let coarse_input = x;
    let processed = graph_transformer_forward(
        &mut tape,
        &coarsest_ids,
        &hierarchy.edge_sets[stages],
        coarse_input,
    )?;
    mp_blocks += 1;
    x = skip_aggregate(&mut tape, coarse_input, processed)?;

    for i in (0..stages).rev() {
        for plan in &hierarchy.up_plans[i] {
            x = tape.row_map(x, plan.clone())?;
        }
        let y = graph_transformer_forward(
            &mut tape,
            &up_ids[stages - 1 - i],
            &hierarchy.edge_sets[i],
            x,
        )?;
        mp_blocks += 1;
        x = skip_aggregate(&mut tape, caches[i], y)?;
    }

    let decoded = mlp_forward(&mut tape, &decoder_ids, x)?;
    let output = tape.sigmoid_col(decoded, 0)?;
    debug_assert_eq!(mp_blocks, model.config.mp_block_count());
    Ok(TapedForward {
        tape,
        output,
        param_ids,
        mp_blocks_applied: mp_blocks,
    })
}

fn push_mlp_ids(
    param_ids: &mut Vec<(String, TensorId)>,
    mlp: &MlpParams,
    ids: &crate::autodiff::MlpIds,
    path: &str,
) {
    for i in 0..mlp.weights.len() {
        param_ids.push((alloc::format!("{path}/layer{i}/weight"), ids.weights[i]));
        param_ids.push((alloc::format!("{path}/layer{i}/bias"), ids.biases[i]));
    }
}

fn push_block_ids(
    param_ids: &mut Vec<(String, TensorId)>,
    block: &GraphTransformerParams,
    ids: &crate::autodiff::GraphTransformerIds,
    path: &str,
) {
    for h in 0..block.heads {
        param_ids.push((alloc::format!("{path}/head{h}/query"), ids.query[h]));
        param_ids.push((alloc::format!("{path}/head{h}/key"), ids.key[h]));
        param_ids.push((alloc::format!("{path}/head{h}/value"), ids.value[h]));
        param_ids.push((alloc::format!("{path}/head{h}/edge_bias"), ids.edge_bias[h]));
    }
    param_ids.push((alloc::format!("{path}/out"), ids.out));
}

/// Model prediction for one frame, in physical units.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub phi: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub mp_blocks_applied: usize,
}

/// Inference entry point: builds the hierarchy, runs forward, rescales the
/// displacement columns back to meters.
pub fn predict(model: &MultiscaleModel, frame: &SimFrame) -> Result<Prediction, ModelError> {
    let hierarchy = build_hierarchy(
        &frame.mesh,
        &frame.state,
        frame.load,
        &model.config,
        &model.normalization,
    )?;
    let fwd = forward_on_tape(model, &hierarchy)?;
    let out = fwd.tape.value(fwd.output);
    let n = out.rows();
    let disp = model.normalization.displacement_scale;
    let mut phi = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let row = out.row(i);
        phi.push(row[0]);
        u.push(row[1] * disp);
        v.push(row[2] * disp);
    }
    Ok(Prediction {
        phi,
        u,
        v,
        mp_blocks_applied: fwd.mp_blocks_applied,
    })
}

/// Autoregressive rollout: each prediction becomes the next frame's state,
/// the mesh is regridded from the predicted crack field, and fields carry
/// over to the new mesh by bilinear interpolation. `loads[t]` is the applied
/// increment recorded on frame `t + 1`.
pub fn rollout(
    model: &MultiscaleModel,
    initial: &SimFrame,
    steps: usize,
    loads: &[AppliedLoad],
    crit: &RefineCriterion,
) -> Result<Vec<SimFrame>, ModelError> {
    assert!(loads.len() >= steps, "rollout needs one load per step");
    let mut frames = alloc::vec![initial.clone()];
    for t in 0..steps {
        let current = &frames[t];
        let pred = predict(model, current)?;
        if !pred.phi.iter().all(|p| p.is_finite())
            || !pred.u.iter().all(|p| p.is_finite())
            || !pred.v.iter().all(|p| p.is_finite())
        {
            return Err(ModelError::NonFiniteOutput { step: t });
        }
        let new_mesh = current.mesh.regrid(&pred.phi, crit)?;
        let nv = new_mesh.vertices().len();
        let mut state = PhysicalState {
            phi: Vec::with_capacity(nv),
            u: Vec::with_capacity(nv),
            v: Vec::with_capacity(nv),
        };
        for vert in new_mesh.vertices() {
            let phi = current
                .mesh
                .sample_bilinear(&pred.phi, vert.ix, vert.iy)
                .clamp(0.0, 1.0);
            state.phi.push(phi);
            state
                .u
                .push(current.mesh.sample_bilinear(&pred.u, vert.ix, vert.iy));
            state
                .v
                .push(current.mesh.sample_bilinear(&pred.v, vert.ix, vert.iy));
        }
        frames.push(SimFrame {
            mesh: new_mesh,
            state,
            load: loads[t],
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::DomainSpec;

    fn toy_frame(base: u32, max_level: u8, cracked: bool) -> SimFrame {
        let spec = DomainSpec::new(0.5, base, max_level).unwrap();
        let mesh = RefinedMesh::base_mesh(spec).unwrap();
        let mesh = if cracked {
            let mut phi = alloc::vec![1.0; mesh.vertices().len()];
            let mid = mesh.vertices().len() / 2;
            phi[mid] = 0.0;
            mesh.regrid(&phi, &RefineCriterion::new(0.9, 0.02).unwrap())
                .unwrap()
        } else {
            mesh
        };
        let n = mesh.vertices().len();
        let mut state = PhysicalState::intact(n);
        for (i, v) in mesh.vertices().iter().enumerate() {
            let (x, y) = mesh.position(v);
            let r2 = (x - 0.25) * (x - 0.25) + (y - 0.25) * (y - 0.25);
            state.phi[i] = 1.0 - 0.8 * crate::fmath::exp(-r2 / 0.002);
            state.u[i] = 1e-5 * x;
            state.v[i] = 2e-5 * y;
        }
        SimFrame {
            mesh,
            state,
            load: AppliedLoad { u0: 0.0, v0: 1e-5 },
        }
    }

    fn tiny_config(family: Family, max_level: u8) -> ArchitectureConfig {
        ArchitectureConfig::new(family, max_level, 8, 2)
    }

    fn norm() -> Normalization {
        Normalization::new(0.5, 1e-4)
    }

    #[test]
    fn stage_schedules() {
        let fsr = ArchitectureConfig::with_default_dims(Family::Fsr, 4);
        assert_eq!(
            fsr.stages(),
            alloc::vec![
                alloc::vec![4],
                alloc::vec![3],
                alloc::vec![2],
                alloc::vec![1]
            ]
        );
        assert_eq!(fsr.stage_levels(), alloc::vec![4, 3, 2, 1, 0]);
        assert_eq!(fsr.mp_block_count(), 9);

        let tsr = ArchitectureConfig::with_default_dims(Family::Tsr, 4);
        assert_eq!(
            tsr.stages(),
            alloc::vec![alloc::vec![4, 3], alloc::vec![2, 1]]
        );
        assert_eq!(tsr.stage_levels(), alloc::vec![4, 2, 0]);
        assert_eq!(tsr.mp_block_count(), 5);

        let ssr = ArchitectureConfig::with_default_dims(Family::Ssr, 4);
        assert_eq!(ssr.stages(), alloc::vec![alloc::vec![4, 3, 2, 1]]);
        assert_eq!(ssr.stage_levels(), alloc::vec![4, 0]);
        assert_eq!(ssr.mp_block_count(), 3);
    }

    #[test]
    fn fsr_on_five_level_mesh_applies_nine_blocks() {
        let spec = DomainSpec::new(0.5, 8, 4).unwrap();
        let mesh = RefinedMesh::base_mesh(spec).unwrap();
        let mut phi = alloc::vec![1.0; mesh.vertices().len()];
        let mid = mesh.vertices().len() / 2;
        phi[mid] = 0.0;
        let mesh = mesh
            .regrid(&phi, &RefineCriterion::new(0.9, 0.03).unwrap())
            .unwrap();
        assert_eq!(mesh.finest_level(), 4);
        let n = mesh.vertices().len();
        let frame = SimFrame {
            mesh,
            state: PhysicalState::intact(n),
            load: AppliedLoad { u0: 0.0, v0: 1e-5 },
        };
        let model = MultiscaleModel::init(tiny_config(Family::Fsr, 4), norm(), 3);
        let pred = predict(&model, &frame).unwrap();
        assert_eq!(pred.mp_blocks_applied, 9);
    }

    #[test]
    fn ssr_runs_on_unrefined_mesh() {
        // Degenerate hierarchy: downscale/upscale are identities but the
        // block structure stays encoder -> MP -> MP(+skip) -> MP(+skip) ->
        // decoder.
        let frame = toy_frame(4, 2, false);
        let model = MultiscaleModel::init(tiny_config(Family::Ssr, 2), norm(), 5);
        let pred = predict(&model, &frame).unwrap();
        assert_eq!(pred.mp_blocks_applied, 3);
        assert_eq!(pred.phi.len(), frame.mesh.vertices().len());
        assert!(pred.phi.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn forward_is_deterministic() {
        let frame = toy_frame(4, 2, true);
        let model = MultiscaleModel::init(tiny_config(Family::Tsr, 2), norm(), 9);
        let a = predict(&model, &frame).unwrap();
        let b = predict(&model, &frame).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn output_rows_align_with_full_mesh_ids() {
        let frame = toy_frame(4, 2, true);
        let model = MultiscaleModel::init(tiny_config(Family::Ssr, 2), norm(), 2);
        let hierarchy = build_hierarchy(
            &frame.mesh,
            &frame.state,
            frame.load,
            &model.config,
            &model.normalization,
        )
        .unwrap();
        let ids: Vec<_> = frame.mesh.vertices().iter().map(|v| v.id).collect();
        assert_eq!(hierarchy.graphs[0].node_ids, ids);
        let fwd = forward_on_tape(&model, &hierarchy).unwrap();
        assert_eq!(fwd.tape.value(fwd.output).rows(), ids.len());
    }

    #[test]
    fn downscale_and_upscale_hand_case() {
        // Coarse nodes {0, 1} shared with fine rows {0, 1}; one fine-only
        // row 2 with parents (0, 0.5), (1, 0.5).
        let map = TransferMap {
            level: 1,
            fine_ids: alloc::vec![
                crate::mesh::VertexId(0),
                crate::mesh::VertexId(2),
                crate::mesh::VertexId(1)
            ],
            coarse_ids: alloc::vec![crate::mesh::VertexId(0), crate::mesh::VertexId(2)],
            shared: alloc::vec![(0, 0), (1, 1)],
            fine_only: alloc::vec![(2, alloc::vec![(0, 0.5), (1, 0.5)])],
        };
        let plan = Rc::new(down_plan(&map));
        let mut tape = Tape::new();
        let emb = tape.input(Tensor::from_vec(
            3,
            2,
            alloc::vec![1.0, 10.0, 2.0, 20.0, 4.0, 40.0],
        ));
        let out = tape.row_map(emb, plan).unwrap();
        // Each parent gains 0.5 * e divided by its incoming count of 1.
        assert_eq!(tape.value(out).row(0), &[1.0 + 2.0, 10.0 + 20.0]);
        assert_eq!(tape.value(out).row(1), &[2.0 + 2.0, 20.0 + 20.0]);

        // Zero embeddings map to zero (linearity).
        let zero = tape.input(Tensor::zeros(3, 2));
        let zout = tape.row_map(zero, Rc::new(down_plan(&map))).unwrap();
        assert!(tape.value(zout).iter().all(|&v| v == 0.0));

        // Upscale: shared copy exactly, edge-midpoint node averages its two
        // parents.
        let uplan = Rc::new(up_plan(&map));
        let coarse = tape.input(Tensor::from_vec(2, 2, alloc::vec![3.0, 30.0, 5.0, 50.0]));
        let up = tape.row_map(coarse, uplan).unwrap();
        assert_eq!(tape.value(up).row(0), &[3.0, 30.0]);
        assert_eq!(tape.value(up).row(1), &[5.0, 50.0]);
        assert_eq!(tape.value(up).row(2), &[4.0, 40.0]);
    }

    #[test]
    fn up_after_down_preserves_shared_rows() {
        let frame = toy_frame(4, 2, true);
        let maps = build_transfer_maps(&frame.mesh);
        assert!(!maps.is_empty());
        let map = &maps[0];
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let emb = tape.input(Tensor::glorot(map.fine_count(), 3, &mut rng));
        let down = tape.row_map(emb, Rc::new(down_plan(map))).unwrap();
        let up = tape.row_map(down, Rc::new(up_plan(map))).unwrap();
        // Shared fine rows reproduce the coarse embedding bit-exactly
        // (weight-1 copies); fine-only rows generally differ from their
        // original values.
        for &(f, c) in &map.shared {
            assert_eq!(
                tape.value(up).row(f as usize),
                tape.value(down).row(c as usize)
            );
        }
    }

    #[test]
    fn transfer_ops_are_linear() {
        let frame = toy_frame(4, 2, true);
        let maps = build_transfer_maps(&frame.mesh);
        let map = &maps[0];
        for plan in [Rc::new(down_plan(map)), Rc::new(up_plan(map))] {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
            let a = Tensor::glorot(plan.in_rows, 2, &mut rng);
            let b = Tensor::glorot(plan.in_rows, 2, &mut rng);
            let (alpha, beta) = (0.7, -1.3);
            let apply = |t: &Tensor| -> Tensor {
                let mut tape = Tape::new();
                let x = tape.input(t.clone());
                let y = tape.row_map(x, plan.clone()).unwrap();
                tape.value(y).clone()
            };
            let mut combo = a.clone();
            for (c, (&av, &bv)) in combo
                .data_mut()
                .iter_mut()
                .zip(a.data().iter().zip(b.data()))
            {
                *c = alpha * av + beta * bv;
            }
            let left = apply(&combo);
            let (ra, rb) = (apply(&a), apply(&b));
            for ((l, &x), &y) in left.iter().zip(ra.data()).zip(rb.data()) {
                assert!((l - (alpha * x + beta * y)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zeroing_skip_caches_changes_output() {
        let frame = toy_frame(4, 2, true);
        let model = MultiscaleModel::init(tiny_config(Family::Ssr, 2), norm(), 13);
        let hierarchy = build_hierarchy(
            &frame.mesh,
            &frame.state,
            frame.load,
            &model.config,
            &model.normalization,
        )
        .unwrap();
        let normal = forward_on_tape(&model, &hierarchy).unwrap();

        // Same pipeline with both skip sources replaced by zeros.
        let mut tape = Tape::new();
        let enc = model.encoder.register(&mut tape);
        let down = model.down_blocks[0].register(&mut tape);
        let coarse = model.coarsest.register(&mut tape);
        let up = model.up_blocks[0].register(&mut tape);
        let dec = model.decoder.register(&mut tape);
        let input = tape.input(model.normalized_features(&hierarchy.graphs[0]));
        let mut x = mlp_forward(&mut tape, &enc, input).unwrap();
        x = graph_transformer_forward(&mut tape, &down, &hierarchy.edge_sets[0], x).unwrap();
        let cache_shape = tape.shape(x);
        for plan in &hierarchy.down_plans[0] {
            x = tape.row_map(x, plan.clone()).unwrap();
        }
        let x0 = x;
        let y = graph_transformer_forward(&mut tape, &coarse, &hierarchy.edge_sets[1], x0).unwrap();
        let (r0, c0) = tape.shape(x0);
        let zero0 = tape.input(Tensor::zeros(r0, c0));
        x = tape.add(zero0, y).unwrap();
        for plan in &hierarchy.up_plans[0] {
            x = tape.row_map(x, plan.clone()).unwrap();
        }
        let y = graph_transformer_forward(&mut tape, &up, &hierarchy.edge_sets[0], x).unwrap();
        let zero1 = tape.input(Tensor::zeros(cache_shape.0, cache_shape.1));
        x = tape.add(zero1, y).unwrap();
        let decoded = mlp_forward(&mut tape, &dec, x).unwrap();
        let zeroed_out = tape.sigmoid_col(decoded, 0).unwrap();

        assert_ne!(
            normal.tape.value(normal.output).data(),
            tape.value(zeroed_out).data()
        );
    }

    #[test]
    fn full_forward_gradients_match_finite_differences() {
        use crate::autodiff::gradcheck::finite_difference_check;
        let frame = toy_frame(2, 1, true);
        assert!(frame.mesh.vertices().len() <= 50);
        for seed in [101u64, 102, 103] {
            let model = MultiscaleModel::init(tiny_config(Family::Ssr, 1), norm(), seed);
            let hierarchy = build_hierarchy(
                &frame.mesh,
                &frame.state,
                frame.load,
                &model.config,
                &model.normalization,
            )
            .unwrap();
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1000);
            let target = Tensor::glorot(frame.mesh.vertices().len(), 3, &mut rng);

            let eval = |m: &MultiscaleModel| -> (f64, Vec<Tensor>) {
                let mut fwd = forward_on_tape(m, &hierarchy).unwrap();
                let t = fwd.tape.input(target.clone());
                let diff = fwd.tape.sub(fwd.output, t).unwrap();
                let sq = fwd.tape.mul(diff, diff).unwrap();
                let loss = fwd.tape.sum(sq);
                fwd.tape.backward(loss).unwrap();
                let grads = fwd
                    .param_ids
                    .iter()
                    .map(|(_, id)| fwd.tape.grad(*id))
                    .collect();
                (fwd.tape.value(loss).item(), grads)
            };

            let params: Vec<(String, Tensor)> = model
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            let (_, analytic) = eval(&model);
            let report = finite_difference_check(&params, &analytic, 1e-5, |ps| {
                let mut m = model.clone();
                for ((_, dst), (_, src)) in m.tensors_mut().into_iter().zip(ps) {
                    *dst = src.clone();
                }
                eval(&m).0
            });
            assert!(
                report.passes(1e-5),
                "seed {seed}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn rollout_zero_and_one_step() {
        let frame = toy_frame(4, 2, true);
        let model = MultiscaleModel::init(tiny_config(Family::Ssr, 2), norm(), 4);
        let crit = RefineCriterion::new(0.95, 0.05).unwrap();
        let none = rollout(&model, &frame, 0, &[], &crit).unwrap();
        assert_eq!(none.len(), 1);
        assert_eq!(none[0].mesh, frame.mesh);

        let loads = [AppliedLoad { u0: 0.0, v0: 2e-5 }];
        let one = rollout(&model, &frame, 1, &loads, &crit).unwrap();
        assert_eq!(one.len(), 2);
        // One rollout step embeds a single forward call's outputs: values
        // agree at vertices shared by both meshes.
        let pred = predict(&model, &frame).unwrap();
        for (i, vert) in one[1].mesh.vertices().iter().enumerate() {
            if let Some(old) = frame.mesh.vertex_index(vert.id) {
                assert_eq!(one[1].state.phi[i], pred.phi[old].clamp(0.0, 1.0));
                assert_eq!(one[1].state.u[i], pred.u[old]);
            }
        }
        assert_eq!(one[1].load, loads[0]);
    }
}
