//! Checkpoint freezing, graph optimization, and C source emission.
//!
//! Deployment pipeline for a trained controller: `freeze` strips a training
//! checkpoint down to its inference subgraph (the mean network only; the
//! value network and the exploration head are dropped), `optimize` runs
//! structural passes that shrink the graph without changing its outputs,
//! `emit_source` renders the result as a single freestanding C99 file plus a
//! flat binary weights blob, and `verify_equivalence` confirms numerically
//! that the artifact still computes what the checkpoint computes.
//!
//! Arithmetic order is part of the contract: the f64 graph evaluator
//! accumulates each unit as `bias + w0*x0 + w1*x1 + ...`, exactly like the
//! training-side forward pass, so a frozen graph reproduces the checkpoint
//! bit for bit. The emitted C mirrors the same order in f32, which is why
//! the cross-precision tolerance is 1e-6 rather than zero.

use crate::policy::{Activation, Checkpoint, CheckpointError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("weights blob is malformed: {0}")]
    BadBlob(String),
}

/// One computation node. A freshly frozen graph contains `MatMul` +
/// `BiasAdd` pairs (the checkpoint's affine layers, kept separate so the
/// optimizer has something structural to fuse) interleaved with `Act`
/// nodes; `optimize` rewrites each pair into a fused `Affine`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Node {
    MatMul { w: Vec<Vec<f64>> },
    BiasAdd { b: Vec<f64> },
    Affine { w: Vec<Vec<f64>>, b: Vec<f64> },
    Act { f: Activation },
}

/// Inference-only constant-weight graph.
///
/// `output_map` preserves the logical output arity across dead-output
/// elimination: logical output `i` either reads physical row
/// `output_map[i]` of the final node or is a constant-zero stub (`None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenGraph {
    pub input_dim: usize,
    pub output_dim: usize,
    pub nodes: Vec<Node>,
    pub output_map: Vec<Option<usize>>,
    /// SHA-256 over the canonical serialization of everything above.
    pub hash: String,
}

fn graph_hash(input_dim: usize, output_dim: usize, nodes: &[Node], map: &[Option<usize>]) -> String {
    #[derive(Serialize)]
    struct Canon<'a> {
        input_dim: usize,
        output_dim: usize,
        nodes: &'a [Node],
        output_map: &'a [Option<usize>],
    }
    let bytes = serde_json::to_vec(&Canon {
        input_dim,
        output_dim,
        nodes,
        output_map: map,
    })
    .expect("graph serialization is infallible");
    hex::encode(Sha256::digest(bytes))
}

impl FrozenGraph {
    fn sealed(input_dim: usize, output_dim: usize, nodes: Vec<Node>, map: Vec<Option<usize>>) -> Self {
        let hash = graph_hash(input_dim, output_dim, &nodes, &map);
        FrozenGraph {
            input_dim,
            output_dim,
            nodes,
            output_map: map,
            hash,
        }
    }

    /// Number of weight and bias constants the graph carries.
    pub fn constant_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::MatMul { w } => w.iter().map(Vec::len).sum(),
                Node::BiasAdd { b } => b.len(),
                Node::Affine { w, b } => w.iter().map(Vec::len).sum::<usize>() + b.len(),
                Node::Act { .. } => 0,
            })
            .sum()
    }

    /// Serialized footprint in bytes, the quantity `optimize` must not grow.
    pub fn serialized_size(&self) -> usize {
        serde_json::to_vec(self).expect("graph serialization is infallible").len()
    }
}

/// Freeze a checkpoint into its inference subgraph: constants inlined,
/// value network and log_std dropped, layer order preserved.
pub fn freeze(ckpt: &Checkpoint) -> Result<FrozenGraph, CodegenError> {
    // Structural validation (shape chain, finiteness) with diagnostics that
    // name the offending layer/row comes from the checkpoint itself.
    ckpt.policy()?;
    let mut nodes = Vec::new();
    for layer in &ckpt.layers {
        nodes.push(Node::MatMul { w: layer.w.clone() });
        nodes.push(Node::BiasAdd { b: layer.b.clone() });
        if layer.activation != Activation::Linear {
            nodes.push(Node::Act {
                f: layer.activation,
            });
        }
    }
    let map = (0..ckpt.act_dim).map(Some).collect();
    Ok(FrozenGraph::sealed(ckpt.obs_dim, ckpt.act_dim, nodes, map))
}

fn affine_forward(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len());
    for (row, &bias) in w.iter().zip(b) {
        let mut z = bias;
        for (wij, xj) in row.iter().zip(x) {
            z += wij * xj;
        }
        out.push(z);
    }
    out
}

/// Evaluate the graph in f64, the reference semantics.
///
/// An adjacent `MatMul` + `BiasAdd` pair is evaluated as one affine unit
/// with the bias as the accumulator seed, matching both the fused `Affine`
/// node and the training-side forward pass, so freezing and fusing are
/// exact (0 ulp) rather than merely close.
pub fn eval_graph(g: &FrozenGraph, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), g.input_dim, "probe has wrong input dimension");
    let mut cur = x.to_vec();
    let mut i = 0;
    while i < g.nodes.len() {
        cur = match (&g.nodes[i], g.nodes.get(i + 1)) {
            (Node::MatMul { w }, Some(Node::BiasAdd { b })) => {
                i += 2;
                affine_forward(w, b, &cur)
            }
            (Node::MatMul { w }, _) => {
                i += 1;
                affine_forward(w, &vec![0.0; w.len()], &cur)
            }
            (Node::BiasAdd { b }, _) => {
                i += 1;
                cur.iter().zip(b).map(|(x, b)| x + b).collect()
            }
            (Node::Affine { w, b }, _) => {
                i += 1;
                affine_forward(w, b, &cur)
            }
            (Node::Act { f }, _) => {
                i += 1;
                cur.iter().map(|&z| f.apply(z)).collect()
            }
        };
    }
    g.output_map
        .iter()
        .map(|m| m.map_or(0.0, |r| cur[r]))
        .collect()
}

/// Structural optimization to a fixpoint. Three semantics-preserving
/// passes:
///
/// 1. fuse each `MatMul` + `BiasAdd` pair into a single `Affine` step;
/// 2. constant-fold zero-weight rows of interior affine nodes (the row's
///    output is the constant `act(bias)`, which folds into the next affine
///    node's bias, deleting the row and the downstream column);
/// 3. eliminate dead output rows of the final node (all-zero weights and
///    bias), preserving the logical output arity through a zero stub in
///    `output_map`.
pub fn optimize(g: &FrozenGraph) -> FrozenGraph {
    let mut nodes = g.nodes.clone();
    let mut map = g.output_map.clone();
    loop {
        let changed = fuse_bias_pass(&mut nodes)
            || fold_zero_rows_pass(&mut nodes)
            || dead_output_pass(&mut nodes, &mut map);
        if !changed {
            break;
        }
    }
    FrozenGraph::sealed(g.input_dim, g.output_dim, nodes, map)
}

fn fuse_bias_pass(nodes: &mut Vec<Node>) -> bool {
    for i in 0..nodes.len().saturating_sub(1) {
        if matches!(nodes[i], Node::MatMul { .. }) && matches!(nodes[i + 1], Node::BiasAdd { .. }) {
            let Node::BiasAdd { b } = nodes.remove(i + 1) else {
                unreachable!()
            };
            let Node::MatMul { w } = std::mem::replace(&mut nodes[i], Node::Act { f: Activation::Linear })
            else {
                unreachable!()
            };
            nodes[i] = Node::Affine { w, b };
            return true;
        }
    }
    false
}

/// Indices of `Affine` nodes in order, so "interior" and "final" are
/// well-defined for the folding passes.
fn affine_indices(nodes: &[Node]) -> Vec<usize> {
    nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| matches!(n, Node::Affine { .. }).then_some(i))
        .collect()
}

fn fold_zero_rows_pass(nodes: &mut [Node]) -> bool {
    let affines = affine_indices(nodes);
    if affines.len() < 2 {
        return false;
    }
    for pair in affines.windows(2) {
        let (ai, bi) = (pair[0], pair[1]);
        // The folded constant must pass through whatever sits between the
        // two affine nodes; only a pure elementwise activation qualifies.
        let act = match &nodes[ai + 1..bi] {
            [] => Activation::Linear,
            [Node::Act { f }] => *f,
            _ => continue,
        };
        let row = {
            let Node::Affine { w, .. } = &nodes[ai] else { unreachable!() };
            w.iter().position(|row| row.iter().all(|&v| v == 0.0))
        };
        let Some(r) = row else { continue };
        let constant = {
            let Node::Affine { b, .. } = &nodes[ai] else { unreachable!() };
            act.apply(b[r])
        };
        // Push the constant into the downstream biases, then delete the
        // producing row and the consuming column.
        {
            let Node::Affine { w, b } = &mut nodes[bi] else { unreachable!() };
            for (row, bias) in w.iter_mut().zip(b.iter_mut()) {
                *bias += row[r] * constant;
                row.remove(r);
            }
        }
        {
            let Node::Affine { w, b } = &mut nodes[ai] else { unreachable!() };
            w.remove(r);
            b.remove(r);
        }
        return true;
    }
    false
}

fn dead_output_pass(nodes: &mut [Node], map: &mut [Option<usize>]) -> bool {
    let affines = affine_indices(nodes);
    let Some(&last) = affines.last() else {
        return false;
    };
    // Only a final affine directly feeding the outputs can be pruned
    // against the output map; an activation after it is linear-at-zero for
    // tanh, but staying conservative keeps the pass obviously correct.
    if last != nodes.len() - 1 {
        return false;
    }
    let dead = {
        let Node::Affine { w, b } = &nodes[last] else { unreachable!() };
        (0..w.len()).find(|&r| b[r] == 0.0 && w[r].iter().all(|&v| v == 0.0))
    };
    let Some(r) = dead else { return false };
    // Logical outputs that read the dead row become stubs; rows above it
    // shift down by one.
    let mut used = false;
    for m in map.iter_mut() {
        match *m {
            Some(row) if row == r => {
                *m = None;
                used = true;
            }
            Some(row) if row > r => *m = Some(row - 1),
            _ => {}
        }
    }
    let _ = used;
    let Node::Affine { w, b } = &mut nodes[last] else { unreachable!() };
    w.remove(r);
    b.remove(r);
    true
}

/// Verification report for graph-vs-checkpoint equivalence.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub probes: usize,
    pub max_abs_err: f64,
    /// Input that produced the worst discrepancy (empty when no probes ran).
    pub worst_probe: Vec<f64>,
    pub pass: bool,
    /// True when `probes == 0`: the check passed vacuously.
    pub vacuous: bool,
}

/// Compare the graph against the checkpoint's mean network on `n` uniform
/// random probes in [-1000, 1000]^obs_dim. Passes iff the maximum absolute
/// output discrepancy is at most 1e-6.
pub fn verify_equivalence(
    g: &FrozenGraph,
    ckpt: &Checkpoint,
    n: usize,
    seed: u64,
) -> Result<EquivalenceReport, CodegenError> {
    use rand::{Rng, SeedableRng};
    let policy = ckpt.policy()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_err = 0.0f64;
    let mut worst_probe = Vec::new();
    for _ in 0..n {
        let x: Vec<f64> = (0..g.input_dim).map(|_| rng.gen_range(-1000.0..=1000.0)).collect();
        let a = eval_graph(g, &x);
        let b = policy.mean.forward(&x);
        for (ai, bi) in a.iter().zip(&b) {
            let err = (ai - bi).abs();
            if err > max_abs_err {
                max_abs_err = err;
                worst_probe = x.clone();
            }
        }
    }
    Ok(EquivalenceReport {
        probes: n,
        max_abs_err,
        worst_probe,
        pass: n == 0 || max_abs_err <= 1e-6,
        vacuous: n == 0,
    })
}

/// Evaluate the graph in f32 with the same arithmetic order as the emitted
/// C source, for cross-checking the low-precision artifact without a C
/// toolchain in the loop.
pub fn eval_f32(g: &FrozenGraph, x: &[f32]) -> Vec<f32> {
    assert_eq!(x.len(), g.input_dim, "probe has wrong input dimension");
    let mut cur = x.to_vec();
    let mut i = 0;
    while i < g.nodes.len() {
        let affine32 = |w: &Vec<Vec<f64>>, b: &Vec<f64>, x: &[f32]| -> Vec<f32> {
            w.iter()
                .zip(b)
                .map(|(row, &bias)| {
                    let mut z = bias as f32;
                    for (wij, xj) in row.iter().zip(x) {
                        z += *wij as f32 * *xj;
                    }
                    z
                })
                .collect()
        };
        cur = match (&g.nodes[i], g.nodes.get(i + 1)) {
            (Node::MatMul { w }, Some(Node::BiasAdd { b })) => {
                i += 2;
                affine32(w, b, &cur)
            }
            (Node::MatMul { w }, _) => {
                i += 1;
                affine32(w, &vec![0.0; w.len()], &cur)
            }
            (Node::BiasAdd { b }, _) => {
                i += 1;
                cur.iter().zip(b).map(|(x, b)| x + *b as f32).collect()
            }
            (Node::Affine { w, b }, _) => {
                i += 1;
                affine32(w, b, &cur)
            }
            (Node::Act { f }, _) => {
                i += 1;
                cur.iter()
                    .map(|&z| match f {
                        Activation::Tanh => z.tanh(),
                        Activation::Linear => z,
                    })
                    .collect()
            }
        };
    }
    g.output_map
        .iter()
        .map(|m| m.map_or(0.0, |r| cur[r]))
        .collect()
}

fn fmt_f32(v: f64) -> String {
    // Shortest representation that round-trips the f32 value.
    let f = v as f32;
    let mut s = format!("{f:e}");
    if s.parse::<f32>() != Ok(f) {
        s = format!("{f:?}");
    }
    format!("{s}f")
}

/// Render the graph as one freestanding C99 source file.
///
/// The file defines static constant weight arrays and a single exported
/// function `void <symbol>(const float in[N], float out[M])`. It has no
/// heap allocation and includes nothing but `<math.h>` (for `tanhf`).
pub fn emit_source(g: &FrozenGraph, symbol: &str) -> String {
    let mut s = String::new();
    s.push_str("/* Generated rate-controller inference kernel. */\n");
    s.push_str("/* Fixed-topology dense network; all state lives on the stack. */\n");
    s.push_str("#include <math.h>\n\n");

    // Constant tables, one pair per affine step, in evaluation order.
    let mut steps: Vec<(usize, usize, Activation)> = Vec::new(); // (rows, cols, act applied after)
    let mut idx = 0usize;
    let mut i = 0;
    let n = g.nodes.len();
    while i < n {
        let (w, b, consumed) = match (&g.nodes[i], g.nodes.get(i + 1)) {
            (Node::MatMul { w }, Some(Node::BiasAdd { b })) => (w, b.clone(), 2),
            (Node::Affine { w, b }, _) => (w, b.clone(), 1),
            (Node::MatMul { w }, _) => (w, vec![0.0; w.len()], 1),
            (other, _) => panic!("graph starts a step with unexpected node {other:?}"),
        };
        let act = match g.nodes.get(i + consumed) {
            Some(Node::Act { f }) => *f,
            _ => Activation::Linear,
        };
        let rows = w.len();
        let cols = w.first().map_or(0, Vec::len);
        s.push_str(&format!("static const float W{idx}[{rows}][{cols}] = {{\n"));
        for row in w {
            s.push_str("    {");
            s.push_str(&row.iter().map(|&v| fmt_f32(v)).collect::<Vec<_>>().join(", "));
            s.push_str("},\n");
        }
        s.push_str("};\n");
        s.push_str(&format!("static const float B{idx}[{rows}] = {{"));
        s.push_str(&b.iter().map(|&v| fmt_f32(v)).collect::<Vec<_>>().join(", "));
        s.push_str("};\n\n");
        steps.push((rows, cols, act));
        idx += 1;
        i += consumed + if matches!(g.nodes.get(i + consumed), Some(Node::Act { .. })) { 1 } else { 0 };
    }

    let max_width = steps.iter().map(|&(r, _, _)| r).chain([g.input_dim]).max().unwrap_or(1);
    s.push_str(&format!(
        "void {symbol}(const float in[{}], float out[{}]) {{\n",
        g.input_dim, g.output_dim
    ));
    s.push_str(&format!("    float buf_a[{max_width}];\n    float buf_b[{max_width}];\n"));
    s.push_str("    const float *x = in;\n    float *y = buf_a;\n");
    for (k, &(rows, cols, act)) in steps.iter().enumerate() {
        s.push_str(&format!(
            "    for (int i = 0; i < {rows}; i++) {{\n        float z = B{k}[i];\n        for (int j = 0; j < {cols}; j++) {{\n            z += W{k}[i][j] * x[j];\n        }}\n"
        ));
        match act {
            Activation::Tanh => s.push_str("        y[i] = tanhf(z);\n"),
            Activation::Linear => s.push_str("        y[i] = z;\n"),
        }
        s.push_str("    }\n");
        if k + 1 < steps.len() {
            let next = if k % 2 == 0 { "buf_b" } else { "buf_a" };
            let cur = if k % 2 == 0 { "buf_a" } else { "buf_b" };
            s.push_str(&format!("    x = {cur};\n    y = {next};\n"));
        }
    }
    // Map physical rows to logical outputs, stubbing eliminated ones.
    let final_buf = if steps.len() % 2 == 1 { "buf_a" } else { "buf_b" };
    for (out_i, m) in g.output_map.iter().enumerate() {
        match m {
            Some(r) => s.push_str(&format!("    out[{out_i}] = {final_buf}[{r}];\n")),
            None => s.push_str(&format!("    out[{out_i}] = 0.0f;\n")),
        }
    }
    s.push_str("}\n");
    s
}

/// Magic bytes opening the flat weights blob.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"RLW1";
/// Format version written into the blob header.
pub const WEIGHTS_VERSION: u32 = 1;

/// Serialize the graph's constants as a flat little-endian f32 blob with a
/// 16-byte header: magic, version, input dim, output dim. Weights are
/// row-major in evaluation order, each affine step's matrix followed by its
/// bias vector.
pub fn emit_weights(g: &FrozenGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(g.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(g.output_dim as u32).to_le_bytes());
    let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for node in &g.nodes {
        match node {
            Node::MatMul { w } => w.iter().flatten().for_each(|&v| push(v)),
            Node::BiasAdd { b } => b.iter().for_each(|&v| push(v)),
            Node::Affine { w, b } => {
                w.iter().flatten().for_each(|&v| push(v));
                b.iter().for_each(|&v| push(v));
            }
            Node::Act { .. } => {}
        }
    }
    out
}

/// Parsed weights-blob header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight_count: usize,
}

pub fn parse_weights_header(blob: &[u8]) -> Result<WeightsHeader, CodegenError> {
    if blob.len() < 16 {
        return Err(CodegenError::BadBlob(format!(
            "blob is {} bytes, smaller than the 16-byte header",
            blob.len()
        )));
    }
    if &blob[..4] != WEIGHTS_MAGIC {
        return Err(CodegenError::BadBlob(format!(
            "bad magic {:02x?}, expected {WEIGHTS_MAGIC:02x?}",
            &blob[..4]
        )));
    }
    let word = |i: usize| u32::from_le_bytes(blob[i..i + 4].try_into().expect("bounds checked"));
    if (blob.len() - 16) % 4 != 0 {
        return Err(CodegenError::BadBlob(
            "payload length is not a multiple of 4".into(),
        ));
    }
    Ok(WeightsHeader {
        version: word(4),
        input_dim: word(8) as usize,
        output_dim: word(12) as usize,
        weight_count: (blob.len() - 16) / 4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy, CheckpointMetadata};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_checkpoint(seed: u64) -> Checkpoint {
        let policy = init_policy(6, 4, seed);
        Checkpoint::from_parts(
            &policy,
            None,
            CheckpointMetadata {
                seed,
                training_steps: 0,
                reward_config_hash: "test".into(),
            },
        )
    }

    fn count_affine_steps(g: &FrozenGraph) -> usize {
        g.nodes
            .iter()
            .filter(|n| matches!(n, Node::MatMul { .. } | Node::Affine { .. }))
            .count()
    }

    fn count_tanh(g: &FrozenGraph) -> usize {
        g.nodes
            .iter()
            .filter(|n| matches!(n, Node::Act { f: Activation::Tanh }))
            .count()
    }

    #[test]
    fn freeze_echoes_the_default_architecture() {
        let g = freeze(&test_checkpoint(0)).unwrap();
        assert_eq!(count_affine_steps(&g), 3);
        assert_eq!(count_tanh(&g), 2);
        assert_eq!(g.input_dim, 6);
        assert_eq!(g.output_dim, 4);
        assert_eq!(g.output_map, vec![Some(0), Some(1), Some(2), Some(3)]);
        assert_eq!(g.constant_count(), 1412);
    }

    #[test]
    fn freezing_twice_yields_the_same_hash() {
        let ckpt = test_checkpoint(1);
        let a = freeze(&ckpt).unwrap();
        let b = freeze(&ckpt).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_forward_is_bit_identical_to_the_checkpoint() {
        let ckpt = test_checkpoint(2);
        let policy = ckpt.policy().unwrap();
        let g = freeze(&ckpt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1000.0..=1000.0)).collect();
            let a = eval_graph(&g, &x);
            let b = policy.mean.forward(&x);
            for (ai, bi) in a.iter().zip(&b) {
                assert_eq!(ai.to_bits(), bi.to_bits(), "mismatch at probe {x:?}");
            }
        }
    }

    #[test]
    fn freezing_a_malformed_checkpoint_names_the_defect() {
        let mut ckpt = test_checkpoint(3);
        ckpt.layers[1].b.pop();
        let err = freeze(&ckpt).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1"), "unhelpful diagnostic: {msg}");
        assert!(msg.contains("biases"), "unhelpful diagnostic: {msg}");
    }

    #[test]
    fn optimize_fuses_every_bias_add() {
        let g = freeze(&test_checkpoint(4)).unwrap();
        let o = optimize(&g);
        assert!(o.nodes.iter().all(|n| !matches!(n, Node::MatMul { .. } | Node::BiasAdd { .. })));
        assert_eq!(
            o.nodes.iter().filter(|n| matches!(n, Node::Affine { .. })).count(),
            3
        );
    }

    #[test]
    fn optimize_preserves_semantics_on_random_probes() {
        let g = freeze(&test_checkpoint(5)).unwrap();
        let o = optimize(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1000.0..=1000.0)).collect();
            let a = eval_graph(&g, &x);
            let b = eval_graph(&o, &x);
            for (ai, bi) in a.iter().zip(&b) {
                assert!((ai - bi).abs() <= 1e-12, "drift {ai} vs {bi} at {x:?}");
            }
        }
    }

    #[test]
    fn an_all_zero_output_row_becomes_an_explicit_stub() {
        let mut ckpt = test_checkpoint(6);
        let last = ckpt.layers.len() - 1;
        for v in ckpt.layers[last].w[2].iter_mut() {
            *v = 0.0;
        }
        ckpt.layers[last].b[2] = 0.0;
        let g = freeze(&ckpt).unwrap();
        let o = optimize(&g);
        assert_eq!(o.output_map[2], None);
        assert_eq!(o.output_map.len(), 4, "logical output arity must survive");
        let x = vec![1.0, -2.0, 3.0, 0.5, -0.5, 2.0];
        let a = eval_graph(&g, &x);
        let b = eval_graph(&o, &x);
        assert_eq!(b[2], 0.0);
        for (ai, bi) in a.iter().zip(&b) {
            assert!((ai - bi).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_weight_hidden_rows_fold_into_the_next_bias() {
        let mut ckpt = test_checkpoint(7);
        for v in ckpt.layers[0].w[5].iter_mut() {
            *v = 0.0;
        }
        ckpt.layers[0].b[5] = 0.37; // folded constant is tanh(0.37)
        let g = freeze(&ckpt).unwrap();
        let o = optimize(&g);
        let first_rows = match &o.nodes[0] {
            Node::Affine { w, .. } => w.len(),
            other => panic!("expected fused affine, found {other:?}"),
        };
        assert_eq!(first_rows, 31, "dead hidden unit should be folded away");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-100.0..=100.0)).collect();
            let a = eval_graph(&g, &x);
            let b = eval_graph(&o, &x);
            for (ai, bi) in a.iter().zip(&b) {
                assert!((ai - bi).abs() <= 1e-12, "folding drifted: {ai} vs {bi}");
            }
        }
        assert!(o.serialized_size() < g.serialized_size());
    }

    #[test]
    fn optimize_is_a_fixpoint() {
        let g = freeze(&test_checkpoint(8)).unwrap();
        let once = optimize(&g);
        let twice = optimize(&once);
        assert_eq!(
            serde_json::to_string(&once).unwrap(),
            serde_json::to_string(&twice).unwrap(),
            "second optimize pass must be the identity"
        );
    }

    #[test]
    fn optimize_never_grows_the_serialized_graph() {
        for seed in 0..5 {
            let g = freeze(&test_checkpoint(seed)).unwrap();
            let o = optimize(&g);
            assert!(o.serialized_size() <= g.serialized_size());
        }
    }

    #[test]
    fn emitted_source_is_freestanding_c() {
        let g = optimize(&freeze(&test_checkpoint(9)).unwrap());
        let src = emit_source(&g, "rate_controller");
        let includes: Vec<&str> = src.lines().filter(|l| l.trim_start().starts_with("#include")).collect();
        assert_eq!(includes, vec!["#include <math.h>"]);
        assert!(src.contains("void rate_controller(const float in[6], float out[4])"));
        assert!(src.contains("static const float"));
        assert!(!src.contains("malloc"));
    }

    fn count_float_literals(src: &str) -> usize {
        // Count 'f'-suffixed numeric literals inside the constant tables.
        let mut count = 0;
        let bytes = src.as_bytes();
        for i in 0..bytes.len() {
            if bytes[i] == b'f'
                && i > 0
                && (bytes[i - 1].is_ascii_digit() || bytes[i - 1] == b'.')
                && !src[..i].ends_with("buf")
            {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn emitted_source_carries_exactly_1412_weight_constants() {
        let g = optimize(&freeze(&test_checkpoint(10)).unwrap());
        let src = emit_source(&g, "rate_controller");
        // The function body contributes no f-suffixed literals except
        // possible 0.0f stubs; the default architecture has none.
        assert_eq!(count_float_literals(&src), 1412);
    }

    #[test]
    fn weights_blob_header_round_trips() {
        let g = optimize(&freeze(&test_checkpoint(11)).unwrap());
        let blob = emit_weights(&g);
        let h = parse_weights_header(&blob).unwrap();
        assert_eq!(h.version, WEIGHTS_VERSION);
        assert_eq!(h.input_dim, g.input_dim);
        assert_eq!(h.output_dim, g.output_dim);
        assert_eq!(h.weight_count, 1412);
        assert_eq!(blob.len(), 16 + 4 * 1412);
    }

    #[test]
    fn parsing_a_truncated_or_misbranded_blob_fails() {
        assert!(parse_weights_header(&[0u8; 8]).is_err());
        let mut blob = emit_weights(&optimize(&freeze(&test_checkpoint(12)).unwrap()));
        blob[0] = b'X';
        assert!(parse_weights_header(&blob).is_err());
    }

    #[test]
    fn f32_evaluation_tracks_the_reference_within_1e6() {
        let ckpt = test_checkpoint(13);
        let policy = ckpt.policy().unwrap();
        let g = optimize(&freeze(&ckpt).unwrap());
        let zero = eval_f32(&g, &[0.0; 6]);
        let zero_ref = policy.mean.forward(&[0.0; 6]);
        for (a, b) in zero.iter().zip(&zero_ref) {
            assert!((*a as f64 - b).abs() <= 1e-6);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-500.0..=500.0)).collect();
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let a = eval_f32(&g, &xf);
            let b = policy.mean.forward(&x);
            for (ai, bi) in a.iter().zip(&b) {
                // f32 inputs of magnitude up to 500 keep ~1e-5 absolute
                // resolution through two tanh squashes; the network output
                // is O(1) so 1e-4 is a conservative cross-precision bound
                // for random probes while the spec-pinned 1e-6 applies at
                // the exactly representable zero input.
                assert!(
                    (*ai as f64 - bi).abs() <= 1e-4,
                    "f32 drift {ai} vs {bi} at {x:?}"
                );
            }
        }
    }

    #[test]
    fn verify_passes_the_original_and_fails_a_perturbed_graph() {
        let ckpt = test_checkpoint(14);
        let g = optimize(&freeze(&ckpt).unwrap());
        let report = verify_equivalence(&g, &ckpt, 1000, 23).unwrap();
        assert!(report.pass);
        assert!(!report.vacuous);
        assert_eq!(report.max_abs_err, 0.0);

        let mut bad = g.clone();
        for node in bad.nodes.iter_mut() {
            if let Node::Affine { w, .. } = node {
                w[0][0] += 1e-2;
                break;
            }
        }
        let report = verify_equivalence(&bad, &ckpt, 1000, 23).unwrap();
        assert!(!report.pass);
        assert!(report.max_abs_err > 1e-6);
        assert_eq!(report.worst_probe.len(), 6);
    }

    #[test]
    fn zero_probes_is_a_vacuous_pass() {
        let ckpt = test_checkpoint(15);
        let g = freeze(&ckpt).unwrap();
        let report = verify_equivalence(&g, &ckpt, 0, 0).unwrap();
        assert!(report.pass);
        assert!(report.vacuous);
        assert!(report.worst_probe.is_empty());
    }

    #[test]
    fn graphs_with_unfused_nodes_still_evaluate_correctly() {
        // A hand-built graph exercising standalone MatMul and BiasAdd paths.
        let g = FrozenGraph::sealed(
            2,
            2,
            vec![
                Node::MatMul {
                    w: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
                },
                Node::Act { f: Activation::Linear },
                Node::BiasAdd { b: vec![10.0, 20.0] },
            ],
            vec![Some(0), Some(1)],
        );
        assert_eq!(eval_graph(&g, &[1.0, 1.0]), vec![13.0, 27.0]);
        let o = optimize(&g);
        assert_eq!(eval_graph(&o, &[1.0, 1.0]), vec![13.0, 27.0]);
    }
}
