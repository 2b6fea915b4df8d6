//! The searched recurrent cell.
//!
//! A cell is a chain of `N` nodes over a shared weight bank. Node 0 mixes the
//! step input with the fed-back state; every later node `l` reads exactly one
//! earlier node `j` through the bank entry for edge `(l, j)`:
//!
//! ```text
//! node 0:  c = σ(x·Wxcᵀ + h·Whcᵀ)         h₀ = c ⊙ f₀(x·Wxhᵀ + h·Whhᵀ) + (1 − c) ⊙ h
//! node l:  c = σ(h_j·Wc[l,j]ᵀ)            h_l = c ⊙ f_l(h_j·Wh[l,j]ᵀ) + (1 − c) ⊙ h_j
//! ```
//!
//! The cell output is the mean of the loose ends (nodes no other node reads).
//! Node indices are 0-based here and 1-based in the JSON and DOT formats.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Identity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::autodiff::sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// A sampled cell structure. `prev[l - 1]` is the input node of node `l` (0-based).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellDag {
    acts: Vec<Activation>,
    prev: Vec<usize>,
}

impl CellDag {
    pub fn new(acts: Vec<Activation>, prev: Vec<usize>) -> Result<Self> {
        if acts.is_empty() {
            return Err(Error::contract("a cell needs at least one node"));
        }
        if prev.len() + 1 != acts.len() {
            return Err(Error::contract(format!(
                "{} nodes need {} prev indices, got {}",
                acts.len(),
                acts.len() - 1,
                prev.len()
            )));
        }
        for (i, &j) in prev.iter().enumerate() {
            if j > i {
                return Err(Error::contract(format!(
                    "node {} reads node {}, which is not earlier",
                    i + 2,
                    j + 1
                )));
            }
        }
        Ok(Self { acts, prev })
    }

    /// All nodes share one activation and each reads its predecessor.
    pub fn chain(n: usize, act: Activation) -> Self {
        Self::new(vec![act; n], (0..n.saturating_sub(1)).collect()).expect("chain is valid")
    }

    /// Uniformly random structure.
    pub fn random(n: usize, rng: &mut Rng) -> Self {
        assert!(n >= 1, "a cell needs at least one node");
        let acts = (0..n).map(|_| Activation::ALL[rng.gen_range(0..4)]).collect();
        let prev = (1..n).map(|l| rng.gen_range(0..l)).collect();
        Self { acts, prev }
    }

    pub fn num_nodes(&self) -> usize {
        self.acts.len()
    }

    pub fn activation(&self, node: usize) -> Activation {
        self.acts[node]
    }

    pub fn activations(&self) -> &[Activation] {
        &self.acts
    }

    /// Input node of `node` (`node ≥ 1`).
    pub fn prev(&self, node: usize) -> usize {
        self.prev[node - 1]
    }

    /// Nodes whose state no other node reads, ascending. Always contains the last node.
    pub fn loose_ends(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self.prev.iter().copied().collect();
        (0..self.num_nodes()).filter(|n| !used.contains(n)).collect()
    }

    /// Decision vector in sampling order: `act₀, prev₁, act₁, …, prev_{N-1}, act_{N-1}`.
    pub fn decisions(&self) -> Vec<usize> {
        let mut d = vec![self.acts[0].index()];
        for l in 1..self.num_nodes() {
            d.push(self.prev[l - 1]);
            d.push(self.acts[l].index());
        }
        d
    }

    pub fn from_decisions(d: &[usize]) -> Result<Self> {
        if d.len() % 2 == 0 {
            return Err(Error::contract(format!("decision vector has even length {}", d.len())));
        }
        let act = |i: usize| {
            Activation::from_index(i)
                .ok_or_else(|| Error::contract(format!("activation index {i} out of range")))
        };
        let mut acts = vec![act(d[0])?];
        let mut prev = Vec::new();
        for pair in d[1..].chunks(2) {
            prev.push(pair[0]);
            acts.push(act(pair[1])?);
        }
        Self::new(acts, prev)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<DagNodeJson> = (0..self.num_nodes())
            .map(|l| DagNodeJson {
                index: l + 1,
                prev: (l > 0).then(|| self.prev[l - 1] + 1),
                activation: self.acts[l],
            })
            .collect();
        serde_json::to_value(DagJson {
            version: 1,
            num_nodes: self.num_nodes(),
            nodes,
        })
        .expect("dag json")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let doc: DagJson = serde_json::from_value(v.clone())?;
        if doc.version != 1 {
            return Err(Error::contract(format!("unsupported dag version {}", doc.version)));
        }
        if doc.nodes.len() != doc.num_nodes {
            return Err(Error::contract("num_nodes does not match the node list"));
        }
        let mut acts = Vec::new();
        let mut prev = Vec::new();
        for (i, node) in doc.nodes.iter().enumerate() {
            if node.index != i + 1 {
                return Err(Error::contract(format!("node {} listed at position {}", node.index, i + 1)));
            }
            match (i, node.prev) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::contract("node 1 has no prev")),
                (_, None) => return Err(Error::contract(format!("node {} is missing prev", i + 1))),
                (_, Some(0)) => return Err(Error::contract("prev indices are 1-based")),
                (_, Some(p)) => prev.push(p - 1),
            }
            acts.push(node.activation);
        }
        Self::new(acts, prev)
    }

    /// Graphviz rendering: one line per node, plus the header, the source
    /// declarations and the closing brace.
    pub fn to_dot(&self) -> String {
        let loose = self.loose_ends();
        let mut s = String::from("digraph cell {\n");
        s.push_str("  x [shape=box]; h_prev [shape=box]; avg [shape=box, label=\"avg\"];\n");
        for l in 0..self.num_nodes() {
            let _ = write!(s, "  n{} [label=\"{}: {}\"];", l + 1, l + 1, self.acts[l].name());
            if l == 0 {
                s.push_str(" x -> n1; h_prev -> n1;");
            } else {
                let _ = write!(s, " n{} -> n{};", self.prev[l - 1] + 1, l + 1);
            }
            if loose.contains(&l) {
                let _ = write!(s, " n{} -> avg;", l + 1);
            }
            s.push('\n');
        }
        s.push_str("}\n");
        s
    }
}

impl std::fmt::Display for CellDag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "1:{}", self.acts[0].name())?;
        for l in 1..self.num_nodes() {
            write!(f, " {}<-{}:{}", l + 1, self.prev[l - 1] + 1, self.acts[l].name())?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DagJson {
    version: u32,
    num_nodes: usize,
    nodes: Vec<DagNodeJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DagNodeJson {
    index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prev: Option<usize>,
    activation: Activation,
}

/// Every structure with `n` nodes, in lexicographic decision order.
/// There are `4^n · (n−1)!` of them; refuses `n > 4`.
pub fn enumerate_dags(n: usize) -> Result<Vec<CellDag>> {
    if n == 0 || n > 4 {
        return Err(Error::contract(format!(
            "enumerate_dags supports 1..=4 nodes, got {n}"
        )));
    }
    let mut out = Vec::new();
    let mut d = Vec::with_capacity(2 * n - 1);
    fn rec(n: usize, d: &mut Vec<usize>, out: &mut Vec<CellDag>) {
        let pos = d.len();
        if pos == 2 * n - 1 {
            out.push(CellDag::from_decisions(d).expect("enumerated decisions are valid"));
            return;
        }
        // Odd positions are prev choices for node (pos + 1) / 2.
        let choices = if pos % 2 == 1 { (pos + 1) / 2 } else { 4 };
        for c in 0..choices {
            d.push(c);
            rec(n, d, out);
            d.pop();
        }
    }
    rec(n, &mut d, &mut out);
    Ok(out)
}

/// What the cell feeds back as `h_prev` at the next step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    #[default]
    LooseEndAvg,
    LastNode,
}

/// Ids of the weight bank for one cell: input and feedback projections for
/// node 0, plus a gate and candidate matrix for every possible edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCellParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_nodes: usize,
    pub x_c: ParamId,
    pub x_h: ParamId,
    pub h_c: ParamId,
    pub h_h: ParamId,
    edges: Vec<(ParamId, ParamId)>,
}

fn edge_index(l: usize, j: usize) -> usize {
    l * (l - 1) / 2 + j
}

impl SharedCellParams {
    /// Registers the bank under `prefix` with entries uniform in `(-scale, scale)`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        num_nodes: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(num_nodes >= 1, "a cell needs at least one node");
        let mut add = |name: String, rows: usize, cols: usize| {
            store.add(name, Tensor::uniform(rows, cols, scale, rng))
        };
        let x_c = add(format!("{prefix}.x_c"), hidden, input_dim);
        let x_h = add(format!("{prefix}.x_h"), hidden, input_dim);
        let h_c = add(format!("{prefix}.h_c0"), hidden, hidden);
        let h_h = add(format!("{prefix}.h_h1"), hidden, hidden);
        let mut edges = Vec::new();
        for l in 1..num_nodes {
            for j in 0..l {
                let c = add(format!("{prefix}.edge.{}.{}.c", l + 1, j + 1), hidden, hidden);
                let h = add(format!("{prefix}.edge.{}.{}.h", l + 1, j + 1), hidden, hidden);
                edges.push((c, h));
            }
        }
        Self {
            input_dim,
            hidden,
            num_nodes,
            x_c,
            x_h,
            h_c,
            h_h,
            edges,
        }
    }

    /// `(gate, candidate)` weights of edge `j → l` (0-based, `j < l`).
    pub fn edge(&self, l: usize, j: usize) -> (ParamId, ParamId) {
        assert!(j < l && l < self.num_nodes, "edge ({l}, {j}) out of range");
        self.edges[edge_index(l, j)]
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.x_c, self.x_h, self.h_c, self.h_h];
        for &(c, h) in &self.edges {
            ids.push(c);
            ids.push(h);
        }
        ids
    }

    /// Ids read when running `dag`.
    pub fn active_ids(&self, dag: &CellDag) -> Vec<ParamId> {
        let mut ids = vec![self.x_c, self.x_h, self.h_c, self.h_h];
        for l in 1..dag.num_nodes() {
            let (c, h) = self.edge(l, dag.prev(l));
            ids.push(c);
            ids.push(h);
        }
        ids
    }

    fn check(&self, dag: &CellDag) -> Result<()> {
        if dag.num_nodes() > self.num_nodes {
            return Err(Error::contract(format!(
                "dag has {} nodes but the weight bank was built for {}",
                dag.num_nodes(),
                self.num_nodes
            )));
        }
        Ok(())
    }
}

/// One step's result: `output` is the loose-end mean, `feedback` the state
/// carried to the next step (identical under [`Feedback::LooseEndAvg`]).
#[derive(Clone, Copy, Debug)]
pub struct CellOut {
    pub output: Var,
    pub feedback: Var,
}

/// Runs one step of `dag` on a batch: `x` is `B x input_dim`, `h_prev` is `B x hidden`.
pub fn cell_step(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SharedCellParams,
    dag: &CellDag,
    feedback: Feedback,
    x: Var,
    h_prev: Var,
) -> Result<CellOut> {
    cell_step_with_gate_bias(tape, store, params, dag, feedback, x, h_prev, &[])
}

/// [`cell_step`] with a constant added to each node's gate pre-activation
/// (`gate_bias[l]`, missing entries are 0). A bias of `-1e30` closes a gate.
#[allow(clippy::too_many_arguments)]
pub fn cell_step_with_gate_bias(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SharedCellParams,
    dag: &CellDag,
    feedback: Feedback,
    x: Var,
    h_prev: Var,
    gate_bias: &[f64],
) -> Result<CellOut> {
    params.check(dag)?;
    let bias_gate = |tape: &mut Tape, l: usize, pre: Var| -> Var {
        match gate_bias.get(l) {
            Some(&b) if b != 0.0 => {
                let shape = tape.shape(pre);
                let k = tape.constant(Tensor::filled(shape.0, shape.1, b));
                tape.add(pre, k)
            }
            _ => pre,
        }
    };

    let mut states = Vec::with_capacity(dag.num_nodes());
    {
        let wxc = tape.param(store, params.x_c);
        let wxh = tape.param(store, params.x_h);
        let whc = tape.param(store, params.h_c);
        let whh = tape.param(store, params.h_h);
        let a = tape.matmul_t(x, wxc);
        let b = tape.matmul_t(h_prev, whc);
        let pre_c = tape.add(a, b);
        let pre_c = bias_gate(tape, 0, pre_c);
        let c = tape.sigmoid(pre_c);
        let a = tape.matmul_t(x, wxh);
        let b = tape.matmul_t(h_prev, whh);
        let pre_h = tape.add(a, b);
        let cand = dag.activation(0).on_tape(tape, pre_h);
        states.push(tape.highway(c, cand, h_prev));
    }
    for l in 1..dag.num_nodes() {
        let j = dag.prev(l);
        let (wc, wh) = params.edge(l, j);
        let wc = tape.param(store, wc);
        let wh = tape.param(store, wh);
        let hj = states[j];
        let pre_c = tape.matmul_t(hj, wc);
        let pre_c = bias_gate(tape, l, pre_c);
        let c = tape.sigmoid(pre_c);
        let pre_h = tape.matmul_t(hj, wh);
        let cand = dag.activation(l).on_tape(tape, pre_h);
        states.push(tape.highway(c, cand, hj));
    }
    let ends: Vec<Var> = dag.loose_ends().into_iter().map(|l| states[l]).collect();
    let output = tape.mean(&ends);
    let feedback = match feedback {
        Feedback::LooseEndAvg => output,
        Feedback::LastNode => states[dag.num_nodes() - 1],
    };
    Ok(CellOut { output, feedback })
}

/// Runs the cell left to right over `xs` starting from `h0`, returning every
/// step's output. With `mask`, row `b` at step `t` only advances when
/// `mask[t][b] == 1.0`; padded steps carry the previous state through.
#[allow(clippy::too_many_arguments)]
pub fn unroll(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SharedCellParams,
    dag: &CellDag,
    feedback: Feedback,
    xs: &[Var],
    h0: Var,
    mask: Option<&[Vec<f64>]>,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::contract("unroll over an empty sequence"));
    }
    let mut out = Vec::with_capacity(xs.len());
    let mut h = h0;
    let mut prev_out = h0;
    for (t, &x) in xs.iter().enumerate() {
        let step = cell_step(tape, store, params, dag, feedback, x, h)?;
        match mask {
            Some(m) => {
                h = tape.blend(step.feedback, h, &m[t]);
                prev_out = tape.blend(step.output, prev_out, &m[t]);
            }
            None => {
                h = step.feedback;
                prev_out = step.output;
            }
        }
        out.push(prev_out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_store;
    use crate::rng::seeded;

    fn act(i: usize) -> Activation {
        Activation::ALL[i]
    }

    /// Straight-line single-example reimplementation of the cell equations.
    fn oracle_step(
        store: &ParamStore,
        p: &SharedCellParams,
        dag: &CellDag,
        x: &[f64],
        h: &[f64],
    ) -> Vec<f64> {
        let mv = |id: ParamId, v: &[f64]| -> Vec<f64> {
            let w = store.get(id).effective();
            (0..w.rows())
                .map(|r| (0..w.cols()).map(|c| w.get(r, c) * v[c]).sum())
                .collect()
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut states: Vec<Vec<f64>> = Vec::new();
        let (a, b) = (mv(p.x_c, x), mv(p.h_c, h));
        let (e, f) = (mv(p.x_h, x), mv(p.h_h, h));
        states.push(
            (0..h.len())
                .map(|k| {
                    let c = sig(a[k] + b[k]);
                    c * dag.activation(0).apply(e[k] + f[k]) + (1.0 - c) * h[k]
                })
                .collect(),
        );
        for l in 1..dag.num_nodes() {
            let j = dag.prev(l);
            let (wc, wh) = p.edge(l, j);
            let hj = states[j].clone();
            let (pc, ph) = (mv(wc, &hj), mv(wh, &hj));
            states.push(
                (0..h.len())
                    .map(|k| {
                        let c = sig(pc[k]);
                        c * dag.activation(l).apply(ph[k]) + (1.0 - c) * hj[k]
                    })
                    .collect(),
            );
        }
        let ends = dag.loose_ends();
        (0..h.len())
            .map(|k| ends.iter().map(|&e| states[e][k]).sum::<f64>() / ends.len() as f64)
            .collect()
    }

    fn bank(input: usize, hidden: usize, n: usize, seed: u64) -> (ParamStore, SharedCellParams) {
        let mut store = ParamStore::new();
        let p = SharedCellParams::register(&mut store, "cell", input, hidden, n, 0.5, &mut seeded(seed));
        (store, p)
    }

    fn run_step(store: &ParamStore, p: &SharedCellParams, dag: &CellDag, x: &Tensor, h: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h.clone());
        let out = cell_step(&mut tape, store, p, dag, Feedback::LooseEndAvg, xv, hv).unwrap();
        tape.value(out.output).clone()
    }

    #[test]
    fn zero_weights_identity_chain_halves_twice() {
        let (mut store, p) = bank(2, 3, 2, 0);
        for id in p.all_ids() {
            let (r, c) = store.value(id).shape();
            store.set_value(id, Tensor::zeros(r, c));
        }
        let dag = CellDag::chain(2, Activation::Identity);
        let v = Tensor::row_vector(&[1.0, -2.0, 4.0]);
        let out = run_step(&store, &p, &dag, &Tensor::zeros(1, 2), &v);
        assert_eq!(out, v.scale(0.25));

        // Unrolled: (0.25)^T v.
        let mut tape = Tape::new();
        let xs: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::zeros(1, 2))).collect();
        let h0 = tape.constant(v.clone());
        let hs = unroll(&mut tape, &store, &p, &dag, Feedback::LooseEndAvg, &xs, h0, None).unwrap();
        for (t, &h) in hs.iter().enumerate() {
            let want = v.scale(0.25f64.powi(t as i32 + 1));
            assert!(tape.value(h).zip_map(&want, |a, b| (a - b).abs()).max_abs() < 1e-15);
        }
    }

    #[test]
    fn closed_gate_passes_the_input_node_through() {
        let (store, p) = bank(2, 3, 3, 1);
        let dag = CellDag::new(vec![act(1), act(0), act(2)], vec![0, 1]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[0.3, -0.7]));
        let h = tape.constant(Tensor::row_vector(&[0.2, 0.1, -0.5]));
        let open = cell_step(&mut tape, &store, &p, &dag, Feedback::LastNode, x, h).unwrap();
        let closed =
            cell_step_with_gate_bias(&mut tape, &store, &p, &dag, Feedback::LastNode, x, h, &[0.0, 0.0, -1e30])
                .unwrap();
        // With node 3's gate shut, node 3 equals node 2, which is unchanged by the bias.
        let mut t2 = Tape::new();
        let x2 = t2.constant(Tensor::row_vector(&[0.3, -0.7]));
        let h2 = t2.constant(Tensor::row_vector(&[0.2, 0.1, -0.5]));
        let two = CellDag::new(vec![act(1), act(0)], vec![0]).unwrap();
        let node2 = cell_step(&mut t2, &store, &p, &two, Feedback::LastNode, x2, h2).unwrap();
        assert_eq!(tape.value(closed.output), t2.value(node2.output));
        assert_ne!(tape.value(open.output), tape.value(closed.output));
    }

    #[test]
    fn step_and_unroll_match_the_oracle() {
        let mut rng = seeded(11);
        for seed in 0..10 {
            let (store, p) = bank(4, 5, 3, seed);
            let dag = CellDag::random(3, &mut rng);
            let x = Tensor::uniform(1, 4, 1.0, &mut rng);
            let h = Tensor::uniform(1, 5, 1.0, &mut rng);
            let got = run_step(&store, &p, &dag, &x, &h);
            let want = oracle_step(&store, &p, &dag, x.data(), h.data());
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{dag}: {a} vs {b}");
            }

            let xs_t: Vec<Tensor> = (0..5).map(|_| Tensor::uniform(1, 4, 1.0, &mut rng)).collect();
            let mut tape = Tape::new();
            let xs: Vec<Var> = xs_t.iter().map(|x| tape.constant(x.clone())).collect();
            let h0 = tape.constant(h.clone());
            let hs = unroll(&mut tape, &store, &p, &dag, Feedback::LooseEndAvg, &xs, h0, None).unwrap();
            let mut hv = h.data().to_vec();
            for (t, x) in xs_t.iter().enumerate() {
                hv = oracle_step(&store, &p, &dag, x.data(), &hv);
                for (a, b) in tape.value(hs[t]).data().iter().zip(&hv) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn length_one_unroll_is_one_step() {
        let (store, p) = bank(2, 3, 3, 4);
        let dag = CellDag::random(3, &mut seeded(2));
        let x = Tensor::row_vector(&[0.5, 0.1]);
        let h = Tensor::row_vector(&[0.1, 0.2, 0.3]);
        let step = run_step(&store, &p, &dag, &x, &h);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let hv = tape.constant(h);
        let hs = unroll(&mut tape, &store, &p, &dag, Feedback::LooseEndAvg, &[xv], hv, None).unwrap();
        assert_eq!(tape.value(hs[0]), &step);
    }

    #[test]
    fn batched_rows_match_single_rows_and_masking_holds_state() {
        let (store, p) = bank(3, 4, 4, 5);
        let mut rng = seeded(9);
        let dag = CellDag::random(4, &mut rng);
        let xs_t: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(2, 3, 1.0, &mut rng)).collect();
        let mask = vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let mut tape = Tape::new();
        let xs: Vec<Var> = xs_t.iter().map(|x| tape.constant(x.clone())).collect();
        let h0 = tape.constant(Tensor::zeros(2, 4));
        let hs = unroll(&mut tape, &store, &p, &dag, Feedback::LooseEndAvg, &xs, h0, Some(&mask)).unwrap();
        for row in 0..2 {
            let len = if row == 0 { 3 } else { 1 };
            let mut h = vec![0.0; 4];
            for x in xs_t.iter().take(len) {
                h = oracle_step(&store, &p, &dag, x.row(row), &h);
            }
            for (a, b) in tape.value(hs[2]).row(row).iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gates_stay_inside_the_unit_interval() {
        let (store, p) = bank(3, 4, 2, 6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(1, 3, 3.0));
        let w = tape.param(&store, p.x_c);
        let pre = tape.matmul_t(x, w);
        let c = tape.sigmoid(pre);
        assert!(tape.value(c).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn only_active_edges_receive_gradient() {
        let (mut store, p) = bank(3, 4, 4, 7);
        let mut rng = seeded(3);
        for _ in 0..10 {
            let dag = CellDag::random(4, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::uniform(2, 3, 1.0, &mut rng));
            let h = tape.constant(Tensor::uniform(2, 4, 1.0, &mut rng));
            let out = cell_step(&mut tape, &store, &p, &dag, Feedback::LooseEndAvg, x, h).unwrap();
            let loss = tape.sum_all(out.output);
            let g = tape.backward(loss).unwrap();
            let active = p.active_ids(&dag);
            for id in p.all_ids() {
                let norm = g.get_or_zero(&store, id).max_abs();
                if active.contains(&id) {
                    assert!(norm > 0.0, "{} should have gradient", store.get(id).name);
                } else {
                    assert_eq!(norm, 0.0, "{} should have none", store.get(id).name);
                }
            }
        }
        let dag = CellDag::random(4, &mut rng);
        let x = Tensor::uniform(2, 3, 1.0, &mut rng);
        let h = Tensor::uniform(2, 4, 1.0, &mut rng);
        let errs = grad_check_store(&mut store, |tape, store| {
            let xv = tape.constant(x.clone());
            let hv = tape.constant(h.clone());
            let out = cell_step(tape, store, &p, &dag, Feedback::LastNode, xv, hv).unwrap();
            let sq = tape.mul(out.output, out.output);
            tape.sum_all(sq)
        });
        for (id, e) in errs {
            assert!(e < 1e-4, "{}: {e}", store.get(id).name);
        }
    }

    #[test]
    fn shared_edges_are_the_same_parameter() {
        let (_, p) = bank(2, 2, 3, 0);
        let a = CellDag::new(vec![act(0), act(1), act(2)], vec![0, 0]).unwrap();
        let b = CellDag::new(vec![act(3), act(3), act(3)], vec![0, 1]).unwrap();
        let ia = p.active_ids(&a);
        let ib = p.active_ids(&b);
        assert_eq!(ia[4], ib[4]); // edge 2<-1 in both
        assert_ne!(ia[6], ib[6]); // 3<-1 vs 3<-2
    }

    #[test]
    fn dag_too_large_for_the_bank_is_rejected() {
        let (store, p) = bank(2, 2, 2, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        let h = tape.constant(Tensor::zeros(1, 2));
        let dag = CellDag::chain(3, Activation::Tanh);
        assert!(cell_step(&mut tape, &store, &p, &dag, Feedback::LooseEndAvg, x, h).is_err());
        assert!(CellDag::new(vec![act(0), act(0)], vec![1]).is_err());
    }

    #[test]
    fn enumeration_counts() {
        // Independent count: nested loops over the choices.
        let brute = |n: usize| -> usize {
            let mut total = 4;
            for l in 1..n {
                total *= l * 4;
            }
            total
        };
        for n in 1..=4 {
            let all = enumerate_dags(n).unwrap();
            assert_eq!(all.len(), brute(n));
            let distinct: BTreeSet<_> = all.iter().collect();
            assert_eq!(distinct.len(), all.len());
        }
        assert_eq!(enumerate_dags(1).unwrap().len(), 4);
        assert_eq!(enumerate_dags(2).unwrap().len(), 16);
        assert_eq!(enumerate_dags(3).unwrap().len(), 128);
        assert!(enumerate_dags(5).is_err());
        assert!(enumerate_dags(0).is_err());
    }

    #[test]
    fn decisions_and_json_roundtrip() {
        for dag in enumerate_dags(3).unwrap() {
            assert_eq!(CellDag::from_decisions(&dag.decisions()).unwrap(), dag);
            assert_eq!(CellDag::from_json(&dag.to_json()).unwrap(), dag);
        }
        let v: serde_json::Value = serde_json::from_str(
            r#"{"version":1,"num_nodes":2,"nodes":[{"index":1,"activation":"tanh"},{"index":2,"prev":1,"activation":"relu"}]}"#,
        )
        .unwrap();
        let dag = CellDag::from_json(&v).unwrap();
        assert_eq!(dag.activations(), &[Activation::Tanh, Activation::Relu]);
        assert_eq!(dag.to_json(), v);
        let bad: serde_json::Value = serde_json::from_str(
            r#"{"version":1,"num_nodes":2,"nodes":[{"index":1,"activation":"tanh"},{"index":2,"prev":2,"activation":"relu"}]}"#,
        )
        .unwrap();
        assert!(CellDag::from_json(&bad).is_err());
    }

    #[test]
    fn dot_for_a_single_identity_node() {
        let dag = CellDag::chain(1, Activation::Identity);
        let dot = dag.to_dot();
        assert_eq!(dot.lines().count(), 4);
        assert!(dot.contains("identity"));
        assert_eq!(dot, dag.to_dot());
    }
}
