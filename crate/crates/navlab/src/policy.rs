//! Dual-scale action scorer over a topological map.
//!
//! A single cross-modal attention layer scores local candidates (stop token,
//! navigable views, visible objects) against instruction tokens, a single
//! graph-aware self-attention (GASA) layer scores every mapped node with a
//! distance-biased attention, local scores are lifted into the global action
//! space, and a learned sigmoid gate fuses the two score vectors.
//!
//! All scoring runs on the autodiff tape so the same code path serves
//! evaluation, imitation training, and finite-difference checks. Score
//! vectors are aligned as `[stop, map nodes in insertion order]`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Params, Tape, Var};
use crate::util::{seeded_rng, stable_hash64};
use crate::world::{
    bearing_degrees, demonstrator_action, Action, Episode, NodeId, ObjectId, Panorama, World,
    WorldError,
};

pub const DEFAULT_WIDTH: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("topological map is empty")]
    EmptyMap,
    #[error("no visible object to ground")]
    Ungroundable,
    #[error("map bookkeeping inconsistency: {0}")]
    Bookkeeping(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDims {
    /// Model width; FFN hidden size is `2 * d`.
    pub d: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims { d: DEFAULT_WIDTH }
    }
}

/// Learnable weights: shared attention projections, the distance-bias affine
/// `(w_e, b_e)`, four two-layer FFN heads, and the back score `s_back`.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    /// Seed of the fixed token/feature embedder this policy was trained with.
    pub embed_seed: u64,
    pub tensors: Params,
}

const FFN_HEADS: [(&str, usize); 4] = [("fine", 1), ("coarse", 1), ("obj", 1), ("fuse", 2)];

impl PolicyParams {
    pub fn init(seed: u64, dims: PolicyDims, embed_seed: u64) -> Self {
        let d = dims.d;
        let mut rng = seeded_rng(seed, "policy-init");
        let mut tensors = Params::new();
        let scale = 1.0 / (d as f64).sqrt();
        for name in ["w_q", "w_k", "w_v"] {
            tensors.insert(name, randn(&mut rng, d, d, scale));
        }
        tensors.insert("w_e", Array2::from_elem((1, 1), -0.05));
        tensors.insert("b_e", Array2::zeros((1, 1)));
        tensors.insert("s_back", Array2::zeros((1, 1)));
        for (head, in_mult) in FFN_HEADS {
            let input = in_mult * d;
            let hidden = 2 * d;
            let w_scale = 1.0 / (input as f64).sqrt();
            tensors.insert(&format!("{head}_w1"), randn(&mut rng, input, hidden, w_scale));
            tensors.insert(&format!("{head}_b1"), Array2::zeros((1, hidden)));
            tensors.insert(
                &format!("{head}_w2"),
                randn(&mut rng, hidden, 1, 1.0 / (hidden as f64).sqrt()),
            );
            tensors.insert(&format!("{head}_b2"), Array2::zeros((1, 1)));
        }
        PolicyParams { dims, embed_seed, tensors }
    }

    /// All-zero weights; every score collapses to the biases, so action
    /// selection is decided purely by the tie-break.
    pub fn zeroed(dims: PolicyDims, embed_seed: u64) -> Self {
        let mut p = PolicyParams::init(0, dims, embed_seed);
        let names: Vec<String> = p.tensors.names().map(|s| s.to_string()).collect();
        for name in names {
            p.tensors.get_mut(&name).fill(0.0);
        }
        p
    }

    pub fn vars(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars(self.tensors.to_vars(tape))
    }

    fn expected_shapes(dims: PolicyDims) -> BTreeMap<String, (usize, usize)> {
        let d = dims.d;
        let mut shapes = BTreeMap::new();
        for name in ["w_q", "w_k", "w_v"] {
            shapes.insert(name.to_string(), (d, d));
        }
        for name in ["w_e", "b_e", "s_back"] {
            shapes.insert(name.to_string(), (1, 1));
        }
        for (head, in_mult) in FFN_HEADS {
            shapes.insert(format!("{head}_w1"), (in_mult * d, 2 * d));
            shapes.insert(format!("{head}_b1"), (1, 2 * d));
            shapes.insert(format!("{head}_w2"), (2 * d, 1));
            shapes.insert(format!("{head}_b2"), (1, 1));
        }
        shapes
    }

    pub fn validate_shapes(&self) -> Result<(), PolicyError> {
        let expected = Self::expected_shapes(self.dims);
        for (name, (r, c)) in &expected {
            if !self.tensors.contains(name) {
                return Err(PolicyError::Checkpoint(format!("missing tensor {name:?}")));
            }
            let t = self.tensors.get(name);
            if t.nrows() != *r || t.ncols() != *c {
                return Err(PolicyError::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected ({r}, {c})",
                    (t.nrows(), t.ncols())
                )));
            }
        }
        if self.tensors.len() != expected.len() {
            return Err(PolicyError::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let doc = PolicyCheckpoint {
            format_version: 1,
            kind: "policy".into(),
            d: self.dims.d,
            embed_seed: self.embed_seed,
            tensors: self.tensors.clone(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let doc: PolicyCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.kind != "policy" || doc.format_version != 1 {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported checkpoint kind {:?} version {}",
                doc.kind, doc.format_version
            )));
        }
        let params = PolicyParams {
            dims: PolicyDims { d: doc.d },
            embed_seed: doc.embed_seed,
            tensors: doc.tensors,
        };
        params.validate_shapes()?;
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    format_version: u32,
    kind: String,
    d: usize,
    embed_seed: u64,
    tensors: Params,
}

fn randn(rng: &mut impl rand::Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for x in out.iter_mut() {
        // Box-Muller
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        *x = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale;
    }
    out
}

// ---------------------------------------------------------------------------
// Fixed feature embedder
// ---------------------------------------------------------------------------

/// Deterministic word/feature embedder; not trained, fixed per seed.
#[derive(Debug, Clone, Copy)]
pub struct TextEmbedder {
    pub d: usize,
    pub seed: u64,
}

impl TextEmbedder {
    pub fn new(d: usize, seed: u64) -> Self {
        TextEmbedder { d, seed }
    }

    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect()
    }

    pub fn word(&self, word: &str) -> Vec<f64> {
        seeded_vec(self.d, self.seed, &format!("word:{word}"))
    }

    /// Mean of the word vectors of a phrase ("living room" etc.).
    pub fn phrase(&self, phrase: &str) -> Vec<f64> {
        let words = Self::tokenize(phrase);
        let mut acc = vec![0.0; self.d];
        if words.is_empty() {
            return acc;
        }
        for w in &words {
            add_into(&mut acc, &self.word(w), 1.0 / words.len() as f64);
        }
        acc
    }

    pub fn tag(&self, tag: &str) -> Vec<f64> {
        seeded_vec(self.d, self.seed, &format!("tag:{tag}"))
    }

    /// Token matrix `L x d` with a light positional component.
    pub fn embed_text(&self, text: &str) -> Array2<f64> {
        let words = Self::tokenize(text);
        let len = words.len().max(1);
        let mut out = Array2::zeros((len, self.d));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut v = if i < words.len() { self.word(&words[i]) } else { vec![0.0; self.d] };
            add_into(&mut v, &scalar_enc(i as f64, self.d), 0.1);
            for (slot, x) in row.iter_mut().zip(&v) {
                *slot = *x;
            }
        }
        out
    }
}

fn seeded_vec(d: usize, seed: u64, salt: &str) -> Vec<f64> {
    let mut rng = seeded_rng(seed ^ stable_hash64(salt), "feature");
    let mut v = Vec::with_capacity(d);
    for _ in 0..d {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        v.push((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    v
}

fn add_into(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Periodic encoding of a heading angle.
pub fn heading_enc(theta_deg: f64, d: usize) -> Vec<f64> {
    let theta = theta_deg.to_radians();
    let mut v = Vec::with_capacity(d);
    let pairs = d / 2;
    let scale = (1.0 / pairs as f64).sqrt();
    for k in 0..pairs {
        let arg = theta * (k + 1) as f64;
        v.push(arg.sin() * scale);
        v.push(arg.cos() * scale);
    }
    while v.len() < d {
        v.push(0.0);
    }
    v
}

/// Sinusoidal encoding of an unbounded scalar (distances, step counts).
pub fn scalar_enc(x: f64, d: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(d);
    let pairs = d / 2;
    let scale = (1.0 / pairs as f64).sqrt();
    for k in 0..pairs {
        let freq = 1.0 / 40f64.powf(2.0 * k as f64 / d as f64);
        v.push((x * freq).sin() * scale);
        v.push((x * freq).cos() * scale);
    }
    while v.len() < d {
        v.push(0.0);
    }
    v
}

// ---------------------------------------------------------------------------
// Local visual tokens
// ---------------------------------------------------------------------------

/// Token rows `[stop; views; objects]` plus the ids backing them.
#[derive(Debug, Clone)]
pub struct LocalTokens {
    pub matrix: Array2<f64>,
    /// Navigable neighbors in slot order; `matrix` row `1 + i`.
    pub nav_nodes: Vec<NodeId>,
    /// Visible objects in (slot, id) order; `matrix` row `1 + K + j`.
    pub object_ids: Vec<ObjectId>,
}

impl LocalTokens {
    pub fn n_nav(&self) -> usize {
        self.nav_nodes.len()
    }
    pub fn n_obj(&self) -> usize {
        self.object_ids.len()
    }
}

/// Featurize the current panorama.
///
/// The stop token mixes a fixed tag with the current room and the visible
/// object labels so stopping is predictable from local context; view tokens
/// carry their destination room, bearing, and distances; object tokens carry
/// their label and slot bearing.
pub fn build_local_tokens(
    world: &World,
    pano: &Panorama,
    start: NodeId,
    embedder: &TextEmbedder,
) -> Result<LocalTokens, PolicyError> {
    let d = embedder.d;
    let graph = world.graph();
    let here = pano.node;
    let start_dist = graph.euclidean(here, start)?;
    let room_here = &graph.node(here)?.room_label;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut nav_nodes = Vec::new();
    let mut object_ids = Vec::new();

    let mut stop = embedder.tag("stop-token");
    for x in stop.iter_mut() {
        *x *= 0.5;
    }
    add_into(&mut stop, &embedder.phrase(room_here), 1.0);
    add_into(&mut stop, &scalar_enc(start_dist, d), 0.3);

    let mut object_rows: Vec<Vec<f64>> = Vec::new();
    for slot in &pano.slots {
        if let Some(nbr) = slot.navigable_to {
            let mut v = embedder.phrase(&graph.node(nbr)?.room_label);
            add_into(&mut v, &heading_enc(slot.heading_deg, d), 0.5);
            add_into(&mut v, &scalar_enc(graph.euclidean(here, nbr)?, d), 0.3);
            add_into(&mut v, &scalar_enc(graph.euclidean(start, nbr)?, d), 0.3);
            nav_nodes.push(nbr);
            rows.push(v);
        }
        for &obj_id in &slot.visible_object_ids {
            let obj = world.object(obj_id)?;
            let mut v = embedder.phrase(&obj.label);
            add_into(&mut v, &heading_enc(slot.heading_deg, d), 0.5);
            // Surface visible labels in the stop token as well.
            add_into(&mut stop, &embedder.phrase(&obj.label), 0.5);
            object_ids.push(obj_id);
            object_rows.push(v);
        }
    }
    let mut all = vec![stop];
    all.extend(rows);
    all.extend(object_rows);
    let mut matrix = Array2::zeros((all.len(), d));
    for (i, row) in all.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            matrix[[i, j]] = *x;
        }
    }
    Ok(LocalTokens { matrix, nav_nodes, object_ids })
}

// ---------------------------------------------------------------------------
// Topological map
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Current,
    Visited,
    Frontier,
}

/// On-the-fly topological map. Node order is insertion order; score vectors
/// align to `[stop, order...]`.
#[derive(Debug, Clone)]
pub struct TopoMap {
    order: Vec<NodeId>,
    status: BTreeMap<NodeId, NodeStatus>,
    first_seen: BTreeMap<NodeId, usize>,
    current: NodeId,
}

impl TopoMap {
    pub fn new(start: NodeId) -> Self {
        TopoMap {
            order: vec![start],
            status: [(start, NodeStatus::Current)].into_iter().collect(),
            first_seen: [(start, 0)].into_iter().collect(),
            current: start,
        }
    }

    /// Fold one observation into the map: the observed node becomes current,
    /// unseen navigable neighbors join as frontier.
    pub fn integrate_observation(&mut self, pano: &Panorama, step: usize) {
        let node = pano.node;
        if let Some(s) = self.status.get_mut(&self.current) {
            *s = NodeStatus::Visited;
        }
        if !self.status.contains_key(&node) {
            self.order.push(node);
            self.first_seen.insert(node, step);
        }
        self.status.insert(node, NodeStatus::Current);
        self.current = node;
        for (_, nbr) in pano.navigable() {
            if !self.status.contains_key(&nbr) {
                self.order.push(nbr);
                self.status.insert(nbr, NodeStatus::Frontier);
                self.first_seen.insert(nbr, step);
            }
        }
    }

    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn current(&self) -> NodeId {
        self.current
    }

    pub fn status(&self, node: NodeId) -> Option<NodeStatus> {
        self.status.get(&node).copied()
    }

    pub fn first_seen_step(&self, node: NodeId) -> Option<usize> {
        self.first_seen.get(&node).copied()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.status.contains_key(&node)
    }

    /// Nodes with known incident edges (visited or current).
    pub fn explored(&self) -> Vec<NodeId> {
        self.order
            .iter()
            .copied()
            .filter(|n| !matches!(self.status[n], NodeStatus::Frontier))
            .collect()
    }

    /// Replay a walk, observing every node in order.
    pub fn from_history(world: &World, history: &[NodeId]) -> Result<Self, PolicyError> {
        let first = *history
            .first()
            .ok_or_else(|| PolicyError::Bookkeeping("empty history".into()))?;
        let mut map = TopoMap::new(first);
        for (step, &node) in history.iter().enumerate() {
            map.integrate_observation(&world.observe(node)?, step);
        }
        Ok(map)
    }
}

/// Node features and distance matrix for the coarse branch. Row/column 0 is
/// the stop pseudo-node.
pub struct CoarseInputs {
    pub x_aug: Array2<f64>,
    pub e_aug: Array2<f64>,
}

pub fn build_coarse_inputs(
    world: &World,
    map: &TopoMap,
    embedder: &TextEmbedder,
) -> Result<CoarseInputs, PolicyError> {
    if map.is_empty() {
        return Err(PolicyError::EmptyMap);
    }
    let d = embedder.d;
    let graph = world.graph();
    let n = map.len();
    let current = map.current();
    let current_pos = graph.position(current)?;

    let mut x_aug = Array2::zeros((n + 1, d));
    let mut stop = embedder.tag("stop-node");
    for x in stop.iter_mut() {
        *x *= 0.5;
    }
    add_into(&mut stop, &embedder.phrase(&graph.node(current)?.room_label), 1.0);
    for (j, v) in stop.iter().enumerate() {
        x_aug[[0, j]] = *v;
    }
    for (i, &node) in map.order().iter().enumerate() {
        let mut v = embedder.phrase(&graph.node(node)?.room_label);
        let pos = graph.position(node)?;
        add_into(&mut v, &heading_enc(bearing_degrees(current_pos, pos), d), 0.5);
        add_into(&mut v, &scalar_enc(graph.euclidean(current, node)?, d), 0.3);
        add_into(&mut v, &scalar_enc(map.first_seen[&node] as f64, d), 0.3);
        let tag = match map.status(node).unwrap() {
            NodeStatus::Current => "status-current",
            NodeStatus::Visited => "status-visited",
            NodeStatus::Frontier => "status-frontier",
        };
        add_into(&mut v, &embedder.tag(tag), 0.3);
        for (j, x) in v.iter().enumerate() {
            x_aug[[i + 1, j]] = *x;
        }
    }

    let mut e_aug = Array2::zeros((n + 1, n + 1));
    for (i, &a) in map.order().iter().enumerate() {
        for (j, &b) in map.order().iter().enumerate() {
            e_aug[[i + 1, j + 1]] = graph.euclidean(a, b)?;
        }
    }
    Ok(CoarseInputs { x_aug, e_aug })
}

// ---------------------------------------------------------------------------
// Tape-level scoring blocks
// ---------------------------------------------------------------------------

pub struct PolicyVars(pub BTreeMap<String, Var>);

impl PolicyVars {
    pub fn get(&self, name: &str) -> Var {
        self.0[name]
    }
}

fn ffn_t(tape: &mut Tape, vars: &PolicyVars, head: &str, x: Var) -> Var {
    let h = tape.matmul(x, vars.get(&format!("{head}_w1")));
    let h = tape.add_row(h, vars.get(&format!("{head}_b1")));
    let h = tape.tanh(h);
    let out = tape.matmul(h, vars.get(&format!("{head}_w2")));
    tape.add_row(out, vars.get(&format!("{head}_b2")))
}

pub struct FineVars {
    /// `(1 + K) x 1` navigation scores, stop first.
    pub s_fine: Var,
    /// `m x 1` object scores (`None` when no objects are visible).
    pub s_obj: Option<Var>,
    /// Post-attention stop embedding, `1 x d`.
    pub stop_embed: Var,
}

/// Cross-modal scoring of local tokens (visual queries, text keys/values)
/// followed by per-token FFN heads.
pub fn fine_scores_t(
    tape: &mut Tape,
    vars: &PolicyVars,
    text: Var,
    visual: Var,
    n_nav: usize,
    n_obj: usize,
    d: usize,
) -> FineVars {
    let q = tape.matmul(visual, vars.get("w_q"));
    let k = tape.matmul(text, vars.get("w_k"));
    let v = tape.matmul(text, vars.get("w_v"));
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt);
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.row_softmax(scaled);
    let embedded = tape.matmul(attn, v);
    let nav_rows: Vec<usize> = (0..1 + n_nav).collect();
    let nav = tape.gather_rows(embedded, &nav_rows);
    let s_fine = ffn_t(tape, vars, "fine", nav);
    let s_obj = if n_obj > 0 {
        let obj_rows: Vec<usize> = (1 + n_nav..1 + n_nav + n_obj).collect();
        let obj = tape.gather_rows(embedded, &obj_rows);
        Some(ffn_t(tape, vars, "obj", obj))
    } else {
        None
    };
    let stop_embed = tape.gather_rows(embedded, &[0]);
    FineVars { s_fine, s_obj, stop_embed }
}

/// Graph-aware self-attention: `Softmax(X Wq (X Wk)^T / sqrt(d) + M) X Wv`
/// with `M = E * w_e + b_e`.
pub fn gasa_t(tape: &mut Tape, vars: &PolicyVars, x: Var, e: &Array2<f64>, d: usize) -> Var {
    let q = tape.matmul(x, vars.get("w_q"));
    let k = tape.matmul(x, vars.get("w_k"));
    let v = tape.matmul(x, vars.get("w_v"));
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt);
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let m = tape.scale_const_by_var(e.clone(), vars.get("w_e"));
    let m = tape.add_scalar_var(m, vars.get("b_e"));
    let biased = tape.add(scaled, m);
    let attn = tape.row_softmax(biased);
    tape.matmul(attn, v)
}

pub struct CoarseVars {
    /// `(1 + N) x 1` scores, stop first.
    pub s_coarse: Var,
    /// GASA-refined stop embedding, `1 x d`.
    pub stop_embed: Var,
}

/// Coarse scores over the augmented map: instruction context is mixed in
/// additively, GASA refines node embeddings, a FFN scores each row.
pub fn coarse_scores_t(
    tape: &mut Tape,
    vars: &PolicyVars,
    text: Var,
    x_aug: Var,
    e_aug: &Array2<f64>,
    d: usize,
) -> CoarseVars {
    let l = tape.value(text).nrows();
    let pool = tape.leaf(Array2::from_elem((1, l), 1.0 / l as f64));
    let text_mean = tape.matmul(pool, text);
    let x_cond = tape.add_row(x_aug, text_mean);
    let refined = gasa_t(tape, vars, x_cond, e_aug, d);
    let s_coarse = ffn_t(tape, vars, "coarse", refined);
    let stop_embed = tape.gather_rows(refined, &[0]);
    CoarseVars { s_coarse, stop_embed }
}

/// Where each global slot draws its converted local score from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalSource {
    /// Copy row `i` of the local navigation scores (0 is stop).
    Local(usize),
    /// Not adjacent to the current node: use `s_back`.
    Back,
}

/// Assignment `[stop, map nodes...] -> local score rows` for conversion into
/// the global action space.
pub fn global_assignment(map: &TopoMap, nav_nodes: &[NodeId]) -> Vec<GlobalSource> {
    let mut out = vec![GlobalSource::Local(0)];
    for node in map.order() {
        match nav_nodes.iter().position(|n| n == node) {
            Some(i) => out.push(GlobalSource::Local(1 + i)),
            None => out.push(GlobalSource::Back),
        }
    }
    out
}

pub fn convert_local_to_global_t(
    tape: &mut Tape,
    vars: &PolicyVars,
    s_fine: Var,
    assignment: &[GlobalSource],
) -> Var {
    let parts: Vec<Var> = assignment
        .iter()
        .map(|src| match src {
            GlobalSource::Local(i) => tape.gather_rows(s_fine, &[*i]),
            GlobalSource::Back => vars.get("s_back"),
        })
        .collect();
    tape.concat_rows(&parts)
}

/// Plain-value conversion; same semantics as [`convert_local_to_global_t`].
pub fn convert_local_to_global(
    s_fine: &[f64],
    s_back: f64,
    assignment: &[GlobalSource],
) -> Vec<f64> {
    assignment
        .iter()
        .map(|src| match src {
            GlobalSource::Local(i) => s_fine[*i],
            GlobalSource::Back => s_back,
        })
        .collect()
}

/// Dynamic fusion: `sigma = Sigmoid(FFN([v0_hat; r0_hat]))`,
/// `s = sigma * s_coarse + (1 - sigma) * s_fine_global`.
pub fn fuse_t(
    tape: &mut Tape,
    vars: &PolicyVars,
    s_coarse: Var,
    s_fine_global: Var,
    coarse_stop: Var,
    fine_stop: Var,
) -> (Var, Var) {
    let coarse_t = tape.transpose(coarse_stop);
    let fine_t = tape.transpose(fine_stop);
    let stacked = tape.concat_rows(&[coarse_t, fine_t]);
    let joint = tape.transpose(stacked);
    let logit = ffn_t(tape, vars, "fuse", joint);
    let sigma = tape.sigmoid(logit);
    let weighted_coarse = tape.mul_scalar_var(s_coarse, sigma);
    let one = tape.leaf(Array2::from_elem((1, 1), 1.0));
    let inv = tape.sub(one, sigma);
    let weighted_fine = tape.mul_scalar_var(s_fine_global, inv);
    let s_final = tape.add(weighted_coarse, weighted_fine);
    (sigma, s_final)
}

// ---------------------------------------------------------------------------
// Whole-step scoring
// ---------------------------------------------------------------------------

pub struct StepVars {
    /// Alignment of `s_final` rows: `[Stop, map nodes in insertion order]`.
    pub ordering: Vec<Action>,
    pub s_fine: Var,
    pub s_coarse: Var,
    pub s_fine_global: Var,
    pub sigma: Var,
    pub s_final: Var,
    pub s_obj: Option<Var>,
    pub object_ids: Vec<ObjectId>,
}

/// Run the full pipeline on the tape for one step.
#[allow(clippy::too_many_arguments)]
pub fn score_step_t(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &PolicyVars,
    world: &World,
    map: &TopoMap,
    pano: &Panorama,
    start: NodeId,
    instruction: &str,
) -> Result<StepVars, PolicyError> {
    let d = params.dims.d;
    let embedder = TextEmbedder::new(d, params.embed_seed);
    let text_matrix = embedder.embed_text(instruction);
    let local = build_local_tokens(world, pano, start, &embedder)?;
    let coarse_in = build_coarse_inputs(world, map, &embedder)?;

    let text = tape.leaf(text_matrix);
    let visual = tape.leaf(local.matrix.clone());
    let fine = fine_scores_t(tape, vars, text, visual, local.n_nav(), local.n_obj(), d);
    let x_aug = tape.leaf(coarse_in.x_aug.clone());
    let coarse = coarse_scores_t(tape, vars, text, x_aug, &coarse_in.e_aug, d);
    let assignment = global_assignment(map, &local.nav_nodes);
    let s_fine_global = convert_local_to_global_t(tape, vars, fine.s_fine, &assignment);
    let (sigma, s_final) =
        fuse_t(tape, vars, coarse.s_coarse, s_fine_global, coarse.stop_embed, fine.stop_embed);

    let mut ordering = vec![Action::Stop];
    ordering.extend(map.order().iter().map(|&n| Action::MoveTo(n)));
    Ok(StepVars {
        ordering,
        s_fine: fine.s_fine,
        s_coarse: coarse.s_coarse,
        s_fine_global,
        sigma,
        s_final,
        s_obj: fine.s_obj,
        object_ids: local.object_ids,
    })
}

/// Plain-value scores for one step.
pub struct StepScores {
    pub ordering: Vec<Action>,
    pub s_fine: Vec<f64>,
    pub s_coarse: Vec<f64>,
    pub s_fine_global: Vec<f64>,
    pub sigma: f64,
    pub s_final: Vec<f64>,
    pub objects: Vec<(ObjectId, f64)>,
}

pub fn score_step(
    params: &PolicyParams,
    world: &World,
    map: &TopoMap,
    pano: &Panorama,
    start: NodeId,
    instruction: &str,
) -> Result<StepScores, PolicyError> {
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape);
    let step = score_step_t(&mut tape, params, &vars, world, map, pano, start, instruction)?;
    let column = |v: Var| -> Vec<f64> { tape.value(v).column(0).to_vec() };
    let objects = match step.s_obj {
        Some(v) => step.object_ids.iter().copied().zip(column(v)).collect(),
        None => Vec::new(),
    };
    Ok(StepScores {
        ordering: step.ordering,
        s_fine: column(step.s_fine),
        s_coarse: column(step.s_coarse),
        s_fine_global: column(step.s_fine_global),
        sigma: tape.scalar(step.sigma),
        s_final: column(step.s_final),
        objects,
    })
}

/// Standalone GASA evaluation for `X: N x d`, `E: N x N`.
pub fn gasa_attention(
    params: &PolicyParams,
    x: &Array2<f64>,
    e: &Array2<f64>,
) -> Result<Array2<f64>, PolicyError> {
    if x.ncols() != params.dims.d {
        return Err(PolicyError::ShapeMismatch(format!(
            "X has width {}, model width is {}",
            x.ncols(),
            params.dims.d
        )));
    }
    if e.nrows() != x.nrows() || e.ncols() != x.nrows() {
        return Err(PolicyError::ShapeMismatch(format!(
            "E is {:?}, expected ({n}, {n})",
            (e.nrows(), e.ncols()),
            n = x.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || e.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite("gasa input".into()));
    }
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = gasa_t(&mut tape, &vars, xv, e, params.dims.d);
    Ok(tape.value(out).clone())
}

/// GASA attention weights (row-stochastic), for diagnostics and tests.
pub fn gasa_attention_weights(
    params: &PolicyParams,
    x: &Array2<f64>,
    e: &Array2<f64>,
) -> Result<Array2<f64>, PolicyError> {
    let d = params.dims.d;
    let q = x.dot(params.tensors.get("w_q"));
    let k = x.dot(params.tensors.get("w_k"));
    let mut logits = q.dot(&k.t()) / (d as f64).sqrt();
    let w_e = params.tensors.scalar("w_e");
    let b_e = params.tensors.scalar("b_e");
    logits.zip_mut_with(e, |l, &dist| *l += dist * w_e + b_e);
    let mut out = logits;
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Action selection, grounding, SAP
// ---------------------------------------------------------------------------

/// Greedy argmax with a deterministic tie-break: stop wins ties, then the
/// smallest node id. Invariant under adding a constant to every score.
pub fn select_action(entries: &[(Action, f64)]) -> Option<Action> {
    let mut best: Option<(Action, f64)> = None;
    for &(action, score) in entries {
        best = Some(match best {
            None => (action, score),
            Some((ba, bs)) => {
                if score > bs || (score == bs && prefer(action, ba)) {
                    (action, score)
                } else {
                    (ba, bs)
                }
            }
        });
    }
    best.map(|(a, _)| a)
}

fn prefer(a: Action, over: Action) -> bool {
    match (a, over) {
        (Action::Stop, Action::MoveTo(_)) => true,
        (Action::MoveTo(x), Action::MoveTo(y)) => x < y,
        _ => false,
    }
}

/// Argmax object with a smallest-id tie-break; errors when nothing is
/// visible.
pub fn ground_object(scores: &[(ObjectId, f64)]) -> Result<ObjectId, PolicyError> {
    scores
        .iter()
        .copied()
        .reduce(|best, cand| {
            if cand.1 > best.1 || (cand.1 == best.1 && cand.0 < best.0) {
                cand
            } else {
                best
            }
        })
        .map(|(id, _)| id)
        .ok_or(PolicyError::Ungroundable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SapOutcome {
    pub predicted: Action,
    pub expert: Action,
    pub is_correct: bool,
}

/// Single-step action prediction against the demonstrator, with frozen
/// parameters. The map is rebuilt by replaying `history`; the current node
/// itself is excluded from the candidate set.
pub fn sap_predict(
    params: &PolicyParams,
    world: &World,
    episode: &Episode,
    instruction: &str,
    history: &[NodeId],
) -> Result<SapOutcome, PolicyError> {
    let map = TopoMap::from_history(world, history)?;
    let current = map.current();
    let pano = world.observe(current)?;
    let scores = score_step(params, world, &map, &pano, episode.start_node, instruction)?;
    let entries: Vec<(Action, f64)> = scores
        .ordering
        .iter()
        .copied()
        .zip(scores.s_final.iter().copied())
        .filter(|(a, _)| *a != Action::MoveTo(current))
        .collect();
    let predicted = select_action(&entries).ok_or(PolicyError::EmptyMap)?;
    let goal = world.goal_node(episode)?;
    let expert = demonstrator_action(world.graph(), current, goal)?;
    Ok(SapOutcome { predicted, expert, is_correct: predicted == expert })
}

/// Negative log-likelihood of one action index under softmaxed scores
/// (`scores` is `n x 1`).
pub fn action_nll_t(tape: &mut Tape, scores: Var, target: usize) -> Var {
    let row = tape.transpose(scores);
    let logp = tape.row_log_softmax(row);
    let picked = tape.pick(logp, 0, target);
    tape.neg(picked)
}
