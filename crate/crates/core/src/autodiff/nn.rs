//! Learned kernels: multilayer perceptrons, multi-head graph-transformer
//! message passing, and the skip-connector aggregation.
//!
//! Parameters live outside tapes as plain tensors; `register` installs them
//! on a tape for one forward/backward pass and returns the id handles the
//! forward functions consume.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::fmath;

use super::tape::{AdError, Tape, TensorId};
use super::tensor::Tensor;

/// Hidden activation used between MLP layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
}

/// Fully-connected network; the activation is applied after every layer but
/// the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub activation: Activation,
}

impl MlpParams {
    /// Glorot-initialized MLP with the given layer widths
    /// (input, hidden..., output).
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            weights.push(Tensor::glorot(w[0], w[1], rng));
            biases.push(Tensor::zeros(1, w[1]));
        }
        Self {
            weights,
            biases,
            activation: Activation::Relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    /// Named views of every parameter tensor, prefixed by `path`.
    pub fn tensors(&self, path: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{path}/layer{i}/weight"), w));
            out.push((format!("{path}/layer{i}/bias"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self, path: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter_mut().zip(&mut self.biases).enumerate() {
            out.push((format!("{path}/layer{i}/weight"), w));
            out.push((format!("{path}/layer{i}/bias"), b));
        }
        out
    }

    pub fn register(&self, tape: &mut Tape) -> MlpIds {
        MlpIds {
            weights: self.weights.iter().map(|w| tape.input(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.input(b.clone())).collect(),
        }
    }
}

/// Tape handles of a registered [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpIds {
    pub weights: Vec<TensorId>,
    pub biases: Vec<TensorId>,
}

/// Row-wise affine + activation stack.
pub fn mlp_forward(tape: &mut Tape, ids: &MlpIds, x: TensorId) -> Result<TensorId, AdError> {
    let mut h = x;
    let last = ids.weights.len() - 1;
    for (i, (w, b)) in ids.weights.iter().zip(&ids.biases).enumerate() {
        h = tape.matmul(h, *w)?;
        h = tape.add_row_broadcast(h, *b)?;
        if i != last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Directed adjacency with per-edge scalars, shared by all heads of all
/// blocks operating on one graph. Edges must be sorted by receiver (the
/// segment-softmax contract) and include a self-loop per node.
#[derive(Clone, Debug)]
pub struct EdgeSet {
    pub node_count: usize,
    pub senders: Rc<Vec<u32>>,
    pub receivers: Rc<Vec<u32>>,
    /// Per-edge attention-bias inputs: connectivity (always 1 for an edge
    /// that exists, including self-loops) and the normalized relative
    /// position of receiver minus sender.
    pub edge_scalars: Tensor,
}

impl EdgeSet {
    /// Builds the edge set of a level graph; relative positions are scaled
    /// by `inv_length` to keep bias inputs dimensionless.
    pub fn from_graph(graph: &crate::graph::LevelGraph, inv_length: f64) -> Self {
        let e = graph.edges.len();
        let mut senders = Vec::with_capacity(e);
        let mut receivers = Vec::with_capacity(e);
        let mut scalars = Vec::with_capacity(e * 3);
        for (&(s, r), &(dx, dy)) in graph.edges.iter().zip(&graph.edge_rel) {
            senders.push(s);
            receivers.push(r);
            scalars.extend_from_slice(&[1.0, dx * inv_length, dy * inv_length]);
        }
        debug_assert!(receivers.windows(2).all(|w| w[0] <= w[1]));
        Self {
            node_count: graph.node_count(),
            senders: Rc::new(senders),
            receivers: Rc::new(receivers),
            edge_scalars: Tensor::from_vec(e, 3, scalars),
        }
    }
}

/// Multi-head graph-transformer message-passing block.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTransformerParams {
    pub heads: usize,
    pub model_dim: usize,
    /// Per head: query, key, value projections (dm x dm/H).
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    /// Per head: edge-bias projection (3 x 1) over [b_sr, dx, dy].
    pub edge_bias: Vec<Tensor>,
    /// Output projection dm x dm applied to the concatenated heads.
    pub out: Tensor,
}

impl GraphTransformerParams {
    pub fn init<R: Rng>(model_dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && model_dim % heads == 0, "model_dim must divide by heads");
        let dh = model_dim / heads;
        let mut per_head = |r: usize, c: usize| -> Vec<Tensor> {
            (0..heads).map(|_| Tensor::glorot(r, c, rng)).collect()
        };
        let query = per_head(model_dim, dh);
        let key = per_head(model_dim, dh);
        let value = per_head(model_dim, dh);
        let edge_bias = per_head(3, 1);
        Self {
            heads,
            model_dim,
            query,
            key,
            value,
            edge_bias,
            out: Tensor::glorot(model_dim, model_dim, rng),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn tensors(&self, path: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for h in 0..self.heads {
            out.push((format!("{path}/head{h}/query"), &self.query[h]));
            out.push((format!("{path}/head{h}/key"), &self.key[h]));
            out.push((format!("{path}/head{h}/value"), &self.value[h]));
            out.push((format!("{path}/head{h}/edge_bias"), &self.edge_bias[h]));
        }
        out.push((format!("{path}/out"), &self.out));
        out
    }

    pub fn tensors_mut(&mut self, path: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (h, ((q, k), (v, e))) in self
            .query
            .iter_mut()
            .zip(&mut self.key)
            .zip(self.value.iter_mut().zip(&mut self.edge_bias))
            .enumerate()
        {
            out.push((format!("{path}/head{h}/query"), q));
            out.push((format!("{path}/head{h}/key"), k));
            out.push((format!("{path}/head{h}/value"), v));
            out.push((format!("{path}/head{h}/edge_bias"), e));
        }
        out.push((format!("{path}/out"), &mut self.out));
        out
    }

    pub fn register(&self, tape: &mut Tape) -> GraphTransformerIds {
        GraphTransformerIds {
            heads: self.heads,
            head_dim: self.head_dim(),
            query: self.query.iter().map(|t| tape.input(t.clone())).collect(),
            key: self.key.iter().map(|t| tape.input(t.clone())).collect(),
            value: self.value.iter().map(|t| tape.input(t.clone())).collect(),
            edge_bias: self
                .edge_bias
                .iter()
                .map(|t| tape.input(t.clone()))
                .collect(),
            out: tape.input(self.out.clone()),
        }
    }
}

/// Tape handles of a registered [`GraphTransformerParams`].
#[derive(Clone, Debug)]
pub struct GraphTransformerIds {
    pub heads: usize,
    pub head_dim: usize,
    pub query: Vec<TensorId>,
    pub key: Vec<TensorId>,
    pub value: Vec<TensorId>,
    pub edge_bias: Vec<TensorId>,
    pub out: TensorId,
}

/// One message-passing step: per node r and head, attention over the
/// in-neighborhood {s : (s, r) an edge} with scores
/// (q_r . k_s + bias(edge)) / sqrt(dm/H), value-weighted sum, heads
/// concatenated, output-projected, and residual-added.
pub fn graph_transformer_forward(
    tape: &mut Tape,
    ids: &GraphTransformerIds,
    edges: &EdgeSet,
    node_emb: TensorId,
) -> Result<TensorId, AdError> {
    let n = tape.shape(node_emb).0;
    assert_eq!(
        n, edges.node_count,
        "embedding rows must match the edge set's node count"
    );
    // Self-loops guarantee every node attends to a non-empty neighborhood.
    debug_assert!({
        let mut covered = alloc::vec![false; n];
        for &r in edges.receivers.iter() {
            covered[r as usize] = true;
        }
        covered.into_iter().all(|c| c)
    });
    let scale = 1.0 / fmath::sqrt(ids.head_dim as f64);
    let edge_scalars = tape.input(edges.edge_scalars.clone());
    let mut head_outputs = Vec::with_capacity(ids.heads);
    for h in 0..ids.heads {
        let q = tape.matmul(node_emb, ids.query[h])?;
        let k = tape.matmul(node_emb, ids.key[h])?;
        let v = tape.matmul(node_emb, ids.value[h])?;
        let q_r = tape.gather_rows(q, edges.receivers.clone())?;
        let k_s = tape.gather_rows(k, edges.senders.clone())?;
        let qk = tape.mul(q_r, k_s)?;
        let dots = tape.row_sum(qk);
        let bias = tape.matmul(edge_scalars, ids.edge_bias[h])?;
        let raw = tape.add(dots, bias)?;
        let scores = tape.scale(raw, scale);
        let attn = tape.segment_softmax(scores, edges.receivers.clone())?;
        let v_s = tape.gather_rows(v, edges.senders.clone())?;
        let weighted = tape.mul_col_broadcast(v_s, attn)?;
        let pooled = tape.scatter_add_rows(weighted, edges.receivers.clone(), n)?;
        head_outputs.push(pooled);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let projected = tape.matmul(concat, ids.out)?;
    tape.add(projected, node_emb)
}

/// Skip-connector aggregation: elementwise sum of the cached and the current
/// embedding.
pub fn skip_aggregate(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId, AdError> {
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{extract_graph, AppliedLoad, PhysicalState};
    use crate::mesh::{DomainSpec, RefinedMesh};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_mlp_is_identity() {
        let mut p = MlpParams::init(&[3, 3], &mut ChaCha8Rng::seed_from_u64(0));
        p.weights[0] = Tensor::from_vec(
            3,
            3,
            alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        p.biases[0] = Tensor::zeros(1, 3);
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = tape.input(Tensor::from_vec(2, 3, alloc::vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let y = mlp_forward(&mut tape, &ids, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_weight_mlp_yields_activated_bias() {
        let mut p = MlpParams::init(&[2, 2, 2], &mut ChaCha8Rng::seed_from_u64(0));
        for w in &mut p.weights {
            *w = Tensor::zeros(w.rows(), w.cols());
        }
        p.biases[0] = Tensor::from_vec(1, 2, alloc::vec![-1.0, 2.0]);
        p.biases[1] = Tensor::from_vec(1, 2, alloc::vec![0.5, -0.5]);
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = tape.input(Tensor::from_vec(3, 2, alloc::vec![9.0; 6]));
        let y = mlp_forward(&mut tape, &ids, x).unwrap();
        // Hidden = relu(bias0), output = hidden @ 0 + bias1 = bias1.
        for row in 0..3 {
            assert_eq!(tape.value(y).row(row), &[0.5, -0.5]);
        }
    }

    #[test]
    fn mlp_shape_mismatch_rejected() {
        let p = MlpParams::init(&[3, 4], &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = tape.input(Tensor::zeros(2, 5));
        assert!(matches!(
            mlp_forward(&mut tape, &ids, x),
            Err(AdError::ShapeMismatch { .. })
        ));
    }

    fn single_node_edges() -> EdgeSet {
        EdgeSet {
            node_count: 1,
            senders: Rc::new(alloc::vec![0]),
            receivers: Rc::new(alloc::vec![0]),
            edge_scalars: Tensor::from_vec(1, 3, alloc::vec![1.0, 0.0, 0.0]),
        }
    }

    #[test]
    fn single_node_attention_reduces_to_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = GraphTransformerParams::init(4, 2, &mut rng);
        let edges = single_node_edges();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let x = tape.input(Tensor::from_vec(1, 4, alloc::vec![0.3, -0.7, 1.1, 0.2]));
        let y = graph_transformer_forward(&mut tape, &ids, &edges, x).unwrap();
        // Softmax over a single element is 1, so the output is
        // out_proj(concat_h v_h(x)) + x.
        let xv = tape.value(x).clone();
        let mut concat = Vec::new();
        for h in 0..2 {
            let vh = super::super::tensor::matmul(&xv, &p.value[h]);
            concat.extend_from_slice(vh.data());
        }
        let proj = super::super::tensor::matmul(&Tensor::from_vec(1, 4, concat), &p.out);
        for (got, want) in tape
            .value(y)
            .data()
            .iter()
            .zip(proj.data().iter().zip(xv.data()).map(|(a, b)| a + b))
        {
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Independent dense attention oracle: explicit per-node loops over the
    /// adjacency, no gather/scatter machinery.
    fn dense_attention_oracle(
        p: &GraphTransformerParams,
        edges: &EdgeSet,
        x: &Tensor,
    ) -> Tensor {
        use super::super::tensor::matmul as mm;
        let n = x.rows();
        let dh = p.head_dim();
        let mut concat = Tensor::zeros(n, p.model_dim);
        for h in 0..p.heads {
            let q = mm(x, &p.query[h]);
            let k = mm(x, &p.key[h]);
            let v = mm(x, &p.value[h]);
            for r in 0..n {
                // Collect incoming edges of r in edge order.
                let mut scores = Vec::new();
                let mut senders = Vec::new();
                for (e, (&s, &rr)) in edges.senders.iter().zip(edges.receivers.iter()).enumerate()
                {
                    if rr as usize == r {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q.get(r, c) * k.get(s as usize, c);
                        }
                        let es = edges.edge_scalars.row(e);
                        let bias = es[0] * p.edge_bias[h].get(0, 0)
                            + es[1] * p.edge_bias[h].get(1, 0)
                            + es[2] * p.edge_bias[h].get(2, 0);
                        scores.push((dot + bias) / fmath::sqrt(dh as f64));
                        senders.push(s as usize);
                    }
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ws: Vec<f64> = scores.iter().map(|s| fmath::exp(s - max)).collect();
                let total: f64 = ws.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for (w, &s) in ws.iter().zip(&senders) {
                        acc += (w / total) * v.get(s, c);
                    }
                    concat.set(r, h * dh + c, acc);
                }
            }
        }
        let mut out = mm(&concat, &p.out);
        for i in 0..n {
            for j in 0..p.model_dim {
                let v = out.get(i, j) + x.get(i, j);
                out.set(i, j, v);
            }
        }
        out
    }

    fn path_graph_edges(n: usize) -> EdgeSet {
        let spec = DomainSpec::new(0.5, 2, 1).unwrap();
        let _ = spec;
        let mut pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, i)).collect();
        for i in 0..(n - 1) as u32 {
            pairs.push((i, i + 1));
            pairs.push((i + 1, i));
        }
        pairs.sort_unstable_by_key(|&(s, r)| (r, s));
        let scalars: Vec<f64> = pairs
            .iter()
            .flat_map(|&(s, r)| [1.0, (r as f64 - s as f64) * 0.1, 0.0])
            .collect();
        EdgeSet {
            node_count: n,
            senders: Rc::new(pairs.iter().map(|&(s, _)| s).collect()),
            receivers: Rc::new(pairs.iter().map(|&(_, r)| r).collect()),
            edge_scalars: Tensor::from_vec(pairs.len(), 3, scalars),
        }
    }

    #[test]
    fn path_graph_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = GraphTransformerParams::init(6, 3, &mut rng);
        let edges = path_graph_edges(3);
        let x = Tensor::glorot(3, 6, &mut rng);
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let xid = tape.input(x.clone());
        let y = graph_transformer_forward(&mut tape, &ids, &edges, xid).unwrap();
        let oracle = dense_attention_oracle(&p, &edges, &x);
        for (a, b) in tape.value(y).iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GraphTransformerParams::init(4, 4, &mut rng);
        let edges = path_graph_edges(4);
        let x = Tensor::glorot(4, 4, &mut rng);

        let run = |edges: &EdgeSet, x: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let ids = p.register(&mut tape);
            let xid = tape.input(x.clone());
            let y = graph_transformer_forward(&mut tape, &ids, edges, xid).unwrap();
            tape.value(y).clone()
        };
        let base = run(&edges, &x);

        // Relabel endpoints in place; edge positions stay fixed.
        let perm = [2u32, 0, 3, 1]; // old -> new
        let edges_p = EdgeSet {
            node_count: 4,
            senders: Rc::new(edges.senders.iter().map(|&s| perm[s as usize]).collect()),
            receivers: Rc::new(edges.receivers.iter().map(|&r| perm[r as usize]).collect()),
            edge_scalars: edges.edge_scalars.clone(),
        };
        let mut xp = Tensor::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                xp.set(perm[i] as usize, j, x.get(i, j));
            }
        }
        let permuted = run(&edges_p, &xp);
        // Bit-exact row correspondence after reordering.
        for i in 0..4 {
            assert_eq!(permuted.row(perm[i] as usize), base.row(i));
        }
    }

    #[test]
    fn skip_aggregate_identities() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_vec(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]));
        let zero = tape.input(Tensor::zeros(2, 2));
        let same = skip_aggregate(&mut tape, a, zero).unwrap();
        assert_eq!(tape.value(same), tape.value(a));
        let double = skip_aggregate(&mut tape, a, a).unwrap();
        assert_eq!(
            tape.value(double).data(),
            &[2.0, 4.0, 6.0, 8.0]
        );
    }

    fn collect_params(
        mlp: &MlpParams,
        gt: &GraphTransformerParams,
    ) -> Vec<(alloc::string::String, Tensor)> {
        let mut out: Vec<(alloc::string::String, Tensor)> = Vec::new();
        for (name, t) in mlp.tensors("mlp") {
            out.push((name, t.clone()));
        }
        for (name, t) in gt.tensors("gt") {
            out.push((name, t.clone()));
        }
        out
    }

    fn rebuild(params: &[(alloc::string::String, Tensor)]) -> (MlpParams, GraphTransformerParams) {
        let mut mlp = MlpParams {
            weights: alloc::vec![params[0].1.clone(), params[2].1.clone()],
            biases: alloc::vec![params[1].1.clone(), params[3].1.clone()],
            activation: Activation::Relu,
        };
        mlp.activation = Activation::Relu;
        let gt = GraphTransformerParams {
            heads: 2,
            model_dim: 4,
            query: alloc::vec![params[4].1.clone(), params[8].1.clone()],
            key: alloc::vec![params[5].1.clone(), params[9].1.clone()],
            value: alloc::vec![params[6].1.clone(), params[10].1.clone()],
            edge_bias: alloc::vec![params[7].1.clone(), params[11].1.clone()],
            out: params[12].1.clone(),
        };
        (mlp, gt)
    }

    /// Composite MLP + attention loss matches central finite differences on
    /// several seeds.
    #[test]
    fn composite_gradients_match_finite_differences() {
        use crate::autodiff::gradcheck::finite_difference_check;
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = MlpParams::init(&[3, 4, 4], &mut rng);
            let gt = GraphTransformerParams::init(4, 2, &mut rng);
            let edges = path_graph_edges(3);
            let x = Tensor::glorot(3, 3, &mut rng);
            // Offset target keeps gradients non-trivial.
            let target = Tensor::glorot(3, 4, &mut rng);

            let eval = |mlp: &MlpParams, gt: &GraphTransformerParams| -> (f64, Vec<Tensor>) {
                let mut tape = Tape::new();
                let mids = mlp.register(&mut tape);
                let gids = gt.register(&mut tape);
                let xid = tape.input(x.clone());
                let h = mlp_forward(&mut tape, &mids, xid).unwrap();
                let mp = graph_transformer_forward(&mut tape, &gids, &edges, h).unwrap();
                let fused = skip_aggregate(&mut tape, h, mp).unwrap();
                let t = tape.input(target.clone());
                let diff = tape.sub(fused, t).unwrap();
                let sq = tape.mul(diff, diff).unwrap();
                let loss = tape.sum(sq);
                tape.backward(loss).unwrap();
                let mut grads = Vec::new();
                for id in mids.weights.iter().chain(&mids.biases) {
                    grads.push(tape.grad(*id));
                }
                // Reorder to match collect_params: w0, b0, w1, b1.
                let ordered = alloc::vec![
                    grads[0].clone(),
                    grads[2].clone(),
                    grads[1].clone(),
                    grads[3].clone(),
                ];
                let mut all = ordered;
                for h in 0..gids.heads {
                    for id in [
                        gids.query[h],
                        gids.key[h],
                        gids.value[h],
                        gids.edge_bias[h],
                    ] {
                        all.push(tape.grad(id));
                    }
                }
                all.push(tape.grad(gids.out));
                (tape.value(loss).item(), all)
            };

            let params = collect_params(&mlp, &gt);
            let (_, analytic) = eval(&mlp, &gt);
            let report = finite_difference_check(&params, &analytic, 1e-4, |ps| {
                let (m, g) = rebuild(ps);
                eval(&m, &g).0
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
    fn skip_aggregate_gradient_splits_equally() {
        use crate::autodiff::gradcheck::finite_difference_check;
        let a = Tensor::from_vec(2, 2, alloc::vec![0.3, -0.2, 1.0, 0.7]);
        let b = Tensor::from_vec(2, 2, alloc::vec![-0.5, 0.4, 0.1, -0.9]);
        let eval = |av: &Tensor, bv: &Tensor| -> (f64, Tensor, Tensor) {
            let mut tape = Tape::new();
            let ai = tape.input(av.clone());
            let bi = tape.input(bv.clone());
            let s = skip_aggregate(&mut tape, ai, bi).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            (tape.value(loss).item(), tape.grad(ai), tape.grad(bi))
        };
        let (_, ga, gb) = eval(&a, &b);
        assert_eq!(ga.data(), gb.data());
        let params = alloc::vec![
            (alloc::string::String::from("a"), a.clone()),
            (alloc::string::String::from("b"), b.clone()),
        ];
        let report = finite_difference_check(&params, &[ga, gb], 1e-4, |ps| {
            eval(&ps[0].1, &ps[1].1).0
        });
        assert!(report.passes(1e-7), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        use crate::autodiff::gradcheck::finite_difference_check;
        for seed in [11u64, 12, 13] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mlp = MlpParams::init(&[2, 5, 3], &mut rng);
            let x = Tensor::glorot(4, 2, &mut rng);
            let eval = |m: &MlpParams| -> (f64, Vec<Tensor>) {
                let mut tape = Tape::new();
                let ids = m.register(&mut tape);
                let xid = tape.input(x.clone());
                let y = mlp_forward(&mut tape, &ids, xid).unwrap();
                let loss = tape.sum(y);
                tape.backward(loss).unwrap();
                let grads = alloc::vec![
                    tape.grad(ids.weights[0]),
                    tape.grad(ids.biases[0]),
                    tape.grad(ids.weights[1]),
                    tape.grad(ids.biases[1]),
                ];
                (tape.value(loss).item(), grads)
            };
            let params: Vec<(alloc::string::String, Tensor)> = mlp
                .tensors("mlp")
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            let (_, analytic) = eval(&mlp);
            let report = finite_difference_check(&params, &analytic, 1e-4, |ps| {
                let m = MlpParams {
                    weights: alloc::vec![ps[0].1.clone(), ps[2].1.clone()],
                    biases: alloc::vec![ps[1].1.clone(), ps[3].1.clone()],
                    activation: Activation::Relu,
                };
                eval(&m).0
            });
            assert!(
                report.passes(1e-5),
                "seed {seed}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn edge_set_from_level_graph_has_sorted_receivers() {
        let spec = DomainSpec::new(0.5, 2, 1).unwrap();
        let m = RefinedMesh::base_mesh(spec).unwrap();
        let g = extract_graph(
            &m,
            &PhysicalState::intact(m.vertices().len()),
            AppliedLoad { u0: 0.0, v0: 0.0 },
            0,
        )
        .unwrap();
        let edges = EdgeSet::from_graph(&g, 2.0);
        assert_eq!(edges.node_count, 9);
        assert!(edges.receivers.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(edges.edge_scalars.rows(), g.edge_count());
    }
}
