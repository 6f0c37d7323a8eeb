//! Procedural graph worlds: metric navigation graphs, labeled objects,
//! panoramic observations, episodes, and a shortest-path demonstrator.
//!
//! Worlds stand in for scanned indoor environments: nodes carry 3D positions
//! and room labels, edges are navigable connections weighted by Euclidean
//! distance, and objects sit on nodes inside one of 36 panorama slots.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::IndexedRandom;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{seeded_rng, wrap_degrees};

pub type NodeId = u32;
pub type ObjectId = u32;

/// The closed room list used for room labels and goal extraction.
pub const ROOMS: [&str; 27] = [
    "bathroom",
    "bedroom",
    "closet",
    "dining room",
    "entryway",
    "family room",
    "garage",
    "hallway",
    "library",
    "laundry room",
    "kitchen",
    "living room",
    "meeting room",
    "lounge",
    "office room",
    "porch",
    "rec room",
    "stairs",
    "toilet",
    "utility room",
    "gym",
    "outdoor",
    "workout room",
    "bar",
    "classroom",
    "dining booth",
    "spa",
];

/// A navigation action: stop in place or move to a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Stop,
    MoveTo(NodeId),
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown object id {0}")]
    UnknownObject(ObjectId),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("could not place {requested} nodes with min separation {min_separation} m")]
    Placement { requested: usize, min_separation: f64 },
    #[error("could not connect the graph under slot/degree constraints")]
    Connectivity,
    #[error("no (start, target) pair admits a {min_hops}-{max_hops} hop expert path")]
    HopRange { min_hops: usize, max_hops: usize },
    #[error("neighbors {a} and {b} of node {node} fall in the same heading slot")]
    SlotCollision { node: NodeId, a: NodeId, b: NodeId },
    #[error("world invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavNode {
    pub id: NodeId,
    /// Position in meters, `[x, y, z]`.
    pub position: [f64; 3],
    pub room_label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    /// Euclidean length in meters.
    pub weight: f64,
}

/// Undirected navigation graph with symmetric adjacency.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NavGraph {
    pub nodes: Vec<NavNode>,
    pub edges: Vec<Edge>,
    #[serde(skip)]
    adjacency: BTreeMap<NodeId, Vec<(NodeId, f64)>>,
}

impl NavGraph {
    pub fn new(nodes: Vec<NavNode>, edges: Vec<Edge>) -> Result<Self, WorldError> {
        let mut graph = NavGraph { nodes, edges, adjacency: BTreeMap::new() };
        graph.rebuild_adjacency()?;
        Ok(graph)
    }

    /// Rebuilds the adjacency index; required after deserialization.
    pub fn rebuild_adjacency(&mut self) -> Result<(), WorldError> {
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id) {
                return Err(WorldError::Invariant(format!("duplicate node id {}", node.id)));
            }
        }
        let mut adjacency: BTreeMap<NodeId, Vec<(NodeId, f64)>> =
            ids.iter().map(|&id| (id, Vec::new())).collect();
        for edge in &self.edges {
            if edge.weight <= 0.0 || !edge.weight.is_finite() {
                return Err(WorldError::Invariant(format!(
                    "edge {}-{} has non-positive weight {}",
                    edge.a, edge.b, edge.weight
                )));
            }
            if !ids.contains(&edge.a) || !ids.contains(&edge.b) {
                return Err(WorldError::Invariant(format!(
                    "edge {}-{} references a missing node",
                    edge.a, edge.b
                )));
            }
            adjacency.get_mut(&edge.a).unwrap().push((edge.b, edge.weight));
            adjacency.get_mut(&edge.b).unwrap().push((edge.a, edge.weight));
        }
        for list in adjacency.values_mut() {
            list.sort_by(|x, y| x.0.cmp(&y.0));
        }
        self.adjacency = adjacency;
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Result<&NavNode, WorldError> {
        self.nodes.iter().find(|n| n.id == id).ok_or(WorldError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.adjacency.contains_key(&id)
    }

    /// Neighbors of `id` sorted by node id.
    pub fn neighbors(&self, id: NodeId) -> Result<&[(NodeId, f64)], WorldError> {
        self.adjacency
            .get(&id)
            .map(|v| v.as_slice())
            .ok_or(WorldError::UnknownNode(id))
    }

    pub fn position(&self, id: NodeId) -> Result<[f64; 3], WorldError> {
        Ok(self.node(id)?.position)
    }

    /// Straight-line distance between two nodes in meters.
    pub fn euclidean(&self, a: NodeId, b: NodeId) -> Result<f64, WorldError> {
        let pa = self.position(a)?;
        let pb = self.position(b)?;
        Ok(dist3(pa, pb))
    }

    pub fn is_connected(&self) -> bool {
        let Some(&start) = self.adjacency.keys().next() else { return true };
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        seen.insert(start);
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[&u] {
                if seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// Minimal-weight distances from `source` to every node.
    ///
    /// Plain O(n^2) scan; worlds are small and the unvisited-min tie-break
    /// (smallest node id) keeps the result fully deterministic.
    pub fn dijkstra(&self, source: NodeId) -> Result<BTreeMap<NodeId, f64>, WorldError> {
        if !self.contains(source) {
            return Err(WorldError::UnknownNode(source));
        }
        let mut dist: BTreeMap<NodeId, f64> =
            self.adjacency.keys().map(|&id| (id, f64::INFINITY)).collect();
        dist.insert(source, 0.0);
        let mut done: BTreeSet<NodeId> = BTreeSet::new();
        while done.len() < dist.len() {
            let u = match dist
                .iter()
                .filter(|(id, _)| !done.contains(id))
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(b.0)))
            {
                Some((&id, &d)) if d.is_finite() => id,
                _ => break,
            };
            done.insert(u);
            let du = dist[&u];
            for &(v, w) in &self.adjacency[&u] {
                if du + w < dist[&v] {
                    dist.insert(v, du + w);
                }
            }
        }
        Ok(dist)
    }

    /// Minimal-weight path from `a` to `b` with its total length in meters.
    ///
    /// Among equal-cost paths the lexicographically smallest node sequence is
    /// returned (ties broken by the smallest next node id).
    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Result<(Vec<NodeId>, f64), WorldError> {
        if !self.contains(a) {
            return Err(WorldError::UnknownNode(a));
        }
        if !self.contains(b) {
            return Err(WorldError::UnknownNode(b));
        }
        if a == b {
            return Ok((vec![a], 0.0));
        }
        let dist_to_goal = self.dijkstra(b)?;
        let total = dist_to_goal[&a];
        if !total.is_finite() {
            return Err(WorldError::Invariant(format!("nodes {a} and {b} are disconnected")));
        }
        let mut path = vec![a];
        let mut current = a;
        while current != b {
            let mut best: Option<(NodeId, f64)> = None;
            for &(v, w) in &self.adjacency[&current] {
                let through = w + dist_to_goal[&v];
                match best {
                    None => best = Some((v, through)),
                    Some((bv, bt)) => {
                        if through < bt - 1e-9 || (through <= bt + 1e-9 && v < bv) {
                            best = Some((v, through.min(bt)));
                        }
                    }
                }
            }
            let (next, _) = best.ok_or_else(|| {
                WorldError::Invariant(format!("node {current} has no neighbors"))
            })?;
            path.push(next);
            current = next;
        }
        Ok((path, total))
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Compass bearing from `from` to `to` in degrees, `0 = +y`, `90 = +x`.
pub fn bearing_degrees(from: [f64; 3], to: [f64; 3]) -> f64 {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    wrap_degrees(dx.atan2(dy).to_degrees())
}

/// Expert next action: stop at the goal, otherwise the first hop of the
/// minimal-weight path toward it.
pub fn demonstrator_action(
    graph: &NavGraph,
    current: NodeId,
    goal: NodeId,
) -> Result<Action, WorldError> {
    if current == goal {
        return Ok(Action::Stop);
    }
    let (path, _) = graph.shortest_path(current, goal)?;
    Ok(Action::MoveTo(path[1]))
}

// ---------------------------------------------------------------------------
// Objects, panoramas, episodes
// ---------------------------------------------------------------------------

pub const PANORAMA_SLOTS: usize = 36;
pub const HEADING_BINS: usize = 12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: ObjectId,
    pub label: String,
    pub host_node: NodeId,
    /// Panorama slot (0..36) the object occupies when its host is observed.
    pub view_slot: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaSlot {
    pub slot_index: u8,
    pub heading_deg: f64,
    pub elevation_deg: f64,
    pub visible_object_ids: Vec<ObjectId>,
    pub navigable_to: Option<NodeId>,
}

/// Egocentric observation at a node: 36 slots over 12 headings x 3 elevations.
///
/// Slots 0..12 look down (-30 deg), 12..24 level, 24..36 up (+30 deg);
/// heading of slot `i` is `(i % 12) * 30` degrees. Navigable neighbors occupy
/// level-row slots chosen by their bearing.
#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub node: NodeId,
    pub slots: Vec<PanoramaSlot>,
}

impl Panorama {
    /// Slots with a navigable neighbor, in slot order.
    pub fn navigable(&self) -> impl Iterator<Item = (&PanoramaSlot, NodeId)> {
        self.slots.iter().filter_map(|s| s.navigable_to.map(|n| (s, n)))
    }

    pub fn visible_object_ids(&self) -> Vec<ObjectId> {
        let mut ids: Vec<ObjectId> =
            self.slots.iter().flat_map(|s| s.visible_object_ids.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }
}

pub fn heading_bin(bearing_deg: f64) -> usize {
    ((bearing_deg / 30.0).round() as usize) % HEADING_BINS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub id: u32,
    pub instruction: String,
    pub target_object: ObjectId,
    pub target_room: String,
    pub start_node: NodeId,
    pub gt_path: Vec<NodeId>,
    pub success_radius: f64,
}

// ---------------------------------------------------------------------------
// Object lexicon
// ---------------------------------------------------------------------------

/// One lexicon entry: an object label and the rooms it typically occupies.
/// `rooms` is a multiset; repeats raise a room's prior weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub label: String,
    pub rooms: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
}

impl Lexicon {
    pub fn labels(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    pub fn entry(&self, label: &str) -> Option<&LexiconEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// Most frequent room for a label; ties resolve to the earliest listed.
    pub fn room_prior(&self, label: &str) -> Option<&str> {
        let entry = self.entry(label)?;
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for room in &entry.rooms {
            match counts.iter_mut().find(|(r, _)| r == room) {
                Some((_, c)) => *c += 1,
                None => counts.push((room, 1)),
            }
        }
        counts.iter().max_by_key(|(_, c)| *c).map(|(r, _)| *r)
    }
}

pub fn default_lexicon() -> Lexicon {
    let table: &[(&str, &[&str])] = &[
        ("armchair", &["living room", "library", "lounge"]),
        ("basket", &["laundry room", "laundry room", "closet", "utility room"]),
        ("bathtub", &["bathroom"]),
        ("bed", &["bedroom"]),
        ("bench", &["gym", "entryway", "porch", "outdoor"]),
        ("bookshelf", &["library", "library", "office room", "living room"]),
        ("cabinet", &["kitchen", "bathroom", "utility room"]),
        ("case", &["entryway", "library", "closet"]),
        ("chair", &["dining room", "office room", "living room", "classroom"]),
        ("clock", &["kitchen", "office room", "classroom"]),
        ("coat rack", &["entryway", "entryway", "hallway", "closet"]),
        ("counter", &["kitchen", "bar", "utility room"]),
        ("curtain", &["bedroom", "living room", "dining room"]),
        ("cushion", &["living room", "family room", "lounge"]),
        ("desk", &["office room", "office room", "classroom", "library"]),
        ("dresser", &["bedroom", "closet"]),
        ("dumbbell", &["gym", "workout room"]),
        ("fireplace", &["living room", "family room", "lounge"]),
        ("fridge", &["kitchen", "kitchen", "garage", "bar"]),
        ("heater", &["garage", "utility room", "workout room"]),
        ("lamp", &["bedroom", "living room", "office room"]),
        ("massage table", &["spa"]),
        ("microwave", &["kitchen", "utility room"]),
        ("mirror", &["bathroom", "bathroom", "bedroom", "entryway"]),
        ("nightstand", &["bedroom"]),
        ("oven", &["kitchen"]),
        ("painting", &["hallway", "library", "dining room"]),
        ("picture", &["hallway", "living room", "bedroom"]),
        ("pillow", &["bedroom", "bedroom", "living room"]),
        ("plant", &["porch", "living room", "entryway", "outdoor"]),
        ("pool table", &["rec room", "lounge", "bar"]),
        ("projector", &["meeting room", "classroom", "rec room"]),
        ("rug", &["living room", "bedroom", "hallway"]),
        ("shelf", &["library", "living room", "closet"]),
        ("sofa", &["living room", "living room", "family room", "lounge"]),
        ("stool", &["bar", "kitchen", "workout room"]),
        ("table", &["dining room", "kitchen", "meeting room"]),
        ("towel", &["bathroom", "bathroom", "spa", "gym"]),
        ("trash can", &["bathroom", "bathroom", "kitchen", "office room"]),
        ("treadmill", &["gym", "workout room", "rec room"]),
        ("vase", &["dining room", "entryway", "living room"]),
        ("wardrobe", &["bedroom", "closet"]),
        ("wash basin", &["bathroom", "bathroom", "toilet"]),
        ("washing machine", &["laundry room", "utility room"]),
        ("whiteboard", &["meeting room", "classroom", "office room"]),
        ("wine rack", &["bar", "dining booth", "kitchen"]),
    ];
    Lexicon {
        entries: table
            .iter()
            .map(|(label, rooms)| LexiconEntry {
                label: label.to_string(),
                rooms: rooms.iter().map(|r| r.to_string()).collect(),
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

/// A generated world: graph, objects, episodes, and the vocabularies they
/// draw from. Serializes to the documented JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub nodes: Vec<NavNode>,
    pub edges: Vec<Edge>,
    pub objects: Vec<WorldObject>,
    pub episodes: Vec<Episode>,
    pub room_list: Vec<String>,
    pub object_lexicon: Lexicon,
    pub seed: u64,
    #[serde(skip)]
    graph: NavGraph,
}

impl World {
    fn assemble(
        nodes: Vec<NavNode>,
        edges: Vec<Edge>,
        objects: Vec<WorldObject>,
        episodes: Vec<Episode>,
        lexicon: Lexicon,
        seed: u64,
    ) -> Result<Self, WorldError> {
        let graph = NavGraph::new(nodes.clone(), edges.clone())?;
        Ok(World {
            nodes,
            edges,
            objects,
            episodes,
            room_list: ROOMS.iter().map(|r| r.to_string()).collect(),
            object_lexicon: lexicon,
            seed,
            graph,
        })
    }

    pub fn graph(&self) -> &NavGraph {
        &self.graph
    }

    pub fn object(&self, id: ObjectId) -> Result<&WorldObject, WorldError> {
        self.objects.iter().find(|o| o.id == id).ok_or(WorldError::UnknownObject(id))
    }

    /// Objects hosted at `node`, sorted by id.
    pub fn objects_at(&self, node: NodeId) -> Vec<&WorldObject> {
        let mut v: Vec<&WorldObject> =
            self.objects.iter().filter(|o| o.host_node == node).collect();
        v.sort_by_key(|o| o.id);
        v
    }

    pub fn episode(&self, id: u32) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id == id)
    }

    /// Node hosting an episode's target object.
    pub fn goal_node(&self, episode: &Episode) -> Result<NodeId, WorldError> {
        Ok(self.object(episode.target_object)?.host_node)
    }

    /// Panoramic observation at `node`.
    ///
    /// Pure function of the world: neighbors occupy the level-elevation slot
    /// matching their bearing, objects sit in their stored slots.
    pub fn observe(&self, node: NodeId) -> Result<Panorama, WorldError> {
        let origin = self.graph.position(node)?;
        let mut slots: Vec<PanoramaSlot> = (0..PANORAMA_SLOTS)
            .map(|i| PanoramaSlot {
                slot_index: i as u8,
                heading_deg: ((i % HEADING_BINS) * 30) as f64,
                elevation_deg: [-30.0, 0.0, 30.0][i / HEADING_BINS],
                visible_object_ids: Vec::new(),
                navigable_to: None,
            })
            .collect();
        for &(nbr, _) in self.graph.neighbors(node)? {
            let bin = heading_bin(bearing_degrees(origin, self.graph.position(nbr)?));
            let slot = HEADING_BINS + bin;
            if let Some(prev) = slots[slot].navigable_to {
                return Err(WorldError::SlotCollision { node, a: prev, b: nbr });
            }
            slots[slot].navigable_to = Some(nbr);
        }
        for obj in self.objects_at(node) {
            slots[obj.view_slot as usize].visible_object_ids.push(obj.id);
        }
        Ok(Panorama { node, slots })
    }

    /// Checks every structural invariant; used after load and in tests.
    pub fn validate(&self) -> Result<(), WorldError> {
        if !self.graph.is_connected() {
            return Err(WorldError::Invariant("graph is not connected".into()));
        }
        for node in &self.nodes {
            if !self.room_list.iter().any(|r| r == &node.room_label) {
                return Err(WorldError::Invariant(format!(
                    "node {} has unknown room label {:?}",
                    node.id, node.room_label
                )));
            }
        }
        for obj in &self.objects {
            if !self.graph.contains(obj.host_node) {
                return Err(WorldError::Invariant(format!(
                    "object {} hosted on missing node {}",
                    obj.id, obj.host_node
                )));
            }
            if usize::from(obj.view_slot) >= PANORAMA_SLOTS {
                return Err(WorldError::Invariant(format!(
                    "object {} view slot {} out of range",
                    obj.id, obj.view_slot
                )));
            }
            if !self.object_lexicon.contains(&obj.label) {
                return Err(WorldError::Invariant(format!(
                    "object {} label {:?} not in lexicon",
                    obj.id, obj.label
                )));
            }
        }
        for ep in &self.episodes {
            let goal = self.goal_node(ep)?;
            if ep.gt_path.first() != Some(&ep.start_node) {
                return Err(WorldError::Invariant(format!(
                    "episode {} path does not start at start node",
                    ep.id
                )));
            }
            if ep.gt_path.last() != Some(&goal) {
                return Err(WorldError::Invariant(format!(
                    "episode {} path does not end at the target's host node",
                    ep.id
                )));
            }
            for pair in ep.gt_path.windows(2) {
                if !self.graph.neighbors(pair[0])?.iter().any(|&(n, _)| n == pair[1]) {
                    return Err(WorldError::Invariant(format!(
                        "episode {} path uses missing edge {}-{}",
                        ep.id, pair[0], pair[1]
                    )));
                }
            }
            if !self.room_list.iter().any(|r| r == &ep.target_room) {
                return Err(WorldError::Invariant(format!(
                    "episode {} target room {:?} not in room list",
                    ep.id, ep.target_room
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String, WorldError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)?;
        let mut world: World = serde_json::from_str(&text)?;
        world.graph = NavGraph::new(world.nodes.clone(), world.edges.clone())?;
        world.validate()?;
        Ok(world)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldGenConfig {
    /// Expert paths must have this many hops, inclusive.
    pub min_hops: usize,
    pub max_hops: usize,
    /// Use the long instruction pool (~18 words with distractor clauses).
    pub long_templates: bool,
    /// Minimum pairwise node separation in meters.
    pub min_separation: f64,
    /// Target mean node spacing in meters; the layout box scales with it.
    pub spacing: f64,
    /// Edges requested per node before connectivity repair.
    pub neighbors_per_node: usize,
    pub degree_cap: usize,
    pub success_radius: f64,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        WorldGenConfig {
            min_hops: 4,
            max_hops: 7,
            long_templates: true,
            min_separation: 4.0,
            spacing: 6.0,
            neighbors_per_node: 3,
            degree_cap: 5,
            success_radius: 3.0,
        }
    }
}

/// Generate a world with default configuration. Deterministic per seed.
pub fn generate_world(
    seed: u64,
    n_nodes: usize,
    n_objects: usize,
    n_episodes: usize,
) -> Result<World, WorldError> {
    generate_world_with(&WorldGenConfig::default(), seed, n_nodes, n_objects, n_episodes)
}

pub fn generate_world_with(
    config: &WorldGenConfig,
    seed: u64,
    n_nodes: usize,
    n_objects: usize,
    n_episodes: usize,
) -> Result<World, WorldError> {
    if n_nodes < 2 {
        return Err(WorldError::InvalidParams("n_nodes must be at least 2".into()));
    }
    if n_objects < 1 {
        return Err(WorldError::InvalidParams("n_objects must be at least 1".into()));
    }
    if config.min_hops == 0 || config.max_hops < config.min_hops {
        return Err(WorldError::InvalidParams("invalid hop range".into()));
    }
    let lexicon = default_lexicon();
    let mut rng = seeded_rng(seed, "world-gen");

    // Node layout: dart throwing with a minimum separation.
    let side = config.spacing * (n_nodes as f64).sqrt();
    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(n_nodes);
    let mut attempts = 0usize;
    while positions.len() < n_nodes {
        attempts += 1;
        if attempts > 1000 * n_nodes {
            return Err(WorldError::Placement {
                requested: n_nodes,
                min_separation: config.min_separation,
            });
        }
        let p = [rng.random_range(0.0..side), rng.random_range(0.0..side), 0.0];
        if positions.iter().all(|q| dist3(p, *q) >= config.min_separation) {
            positions.push(p);
        }
    }

    // Room regions: a handful of seeded centers, nodes take the nearest.
    let n_regions = (n_nodes / 3).clamp(2, ROOMS.len());
    let mut room_pool: Vec<&str> = ROOMS.to_vec();
    room_pool.shuffle(&mut rng);
    let centers: Vec<([f64; 3], &str)> = (0..n_regions)
        .map(|i| {
            ([rng.random_range(0.0..side), rng.random_range(0.0..side), 0.0], room_pool[i])
        })
        .collect();
    let nodes: Vec<NavNode> = positions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let room = centers
                .iter()
                .min_by(|a, b| dist3(p, a.0).partial_cmp(&dist3(p, b.0)).unwrap())
                .unwrap()
                .1;
            NavNode { id: i as NodeId, position: p, room_label: room.to_string() }
        })
        .collect();

    // Edges: nearest neighbors under distinct-heading-slot and degree limits.
    let mut edge_set: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    let mut degree = vec![0usize; n_nodes];
    let mut bins_used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_nodes];
    let try_add = |i: usize,
                       j: usize,
                       edge_set: &mut BTreeSet<(NodeId, NodeId)>,
                       degree: &mut Vec<usize>,
                       bins_used: &mut Vec<BTreeSet<usize>>|
     -> bool {
        let key = (i.min(j) as NodeId, i.max(j) as NodeId);
        if i == j || edge_set.contains(&key) {
            return false;
        }
        if degree[i] >= config.degree_cap || degree[j] >= config.degree_cap {
            return false;
        }
        let bin_ij = heading_bin(bearing_degrees(positions[i], positions[j]));
        let bin_ji = heading_bin(bearing_degrees(positions[j], positions[i]));
        if bins_used[i].contains(&bin_ij) || bins_used[j].contains(&bin_ji) {
            return false;
        }
        edge_set.insert(key);
        degree[i] += 1;
        degree[j] += 1;
        bins_used[i].insert(bin_ij);
        bins_used[j].insert(bin_ji);
        true
    };
    for i in 0..n_nodes {
        let mut order: Vec<usize> = (0..n_nodes).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist3(positions[i], positions[a])
                .partial_cmp(&dist3(positions[i], positions[b]))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in &order {
            if degree[i] >= config.neighbors_per_node {
                break;
            }
            try_add(i, j, &mut edge_set, &mut degree, &mut bins_used);
        }
    }

    // Connectivity repair: join the closest valid cross-component pair.
    loop {
        let comps = components(n_nodes, &edge_set);
        if comps.iter().max().copied().unwrap_or(0) == 0 && n_nodes > 0 {
            // single component labeled 0 everywhere
        }
        let n_comps = comps.iter().copied().max().unwrap_or(0) + 1;
        if n_comps <= 1 {
            break;
        }
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for i in 0..n_nodes {
            for j in (i + 1)..n_nodes {
                if comps[i] != comps[j] {
                    candidates.push((i, j));
                }
            }
        }
        candidates.sort_by(|&(a1, b1), &(a2, b2)| {
            dist3(positions[a1], positions[b1])
                .partial_cmp(&dist3(positions[a2], positions[b2]))
                .unwrap()
                .then((a1, b1).cmp(&(a2, b2)))
        });
        let mut joined = false;
        for &(i, j) in &candidates {
            if try_add(i, j, &mut edge_set, &mut degree, &mut bins_used) {
                joined = true;
                break;
            }
        }
        if !joined {
            return Err(WorldError::Connectivity);
        }
    }
    let edges: Vec<Edge> = edge_set
        .iter()
        .map(|&(a, b)| Edge {
            a,
            b,
            weight: dist3(positions[a as usize], positions[b as usize]),
        })
        .collect();
    let graph = NavGraph::new(nodes.clone(), edges.clone())?;

    // Objects: labels drawn from the lexicon, hosts biased to prior rooms.
    let mut objects: Vec<WorldObject> = Vec::with_capacity(n_objects);
    let mut label_order: Vec<usize> = (0..lexicon.entries.len()).collect();
    label_order.shuffle(&mut rng);
    for k in 0..n_objects {
        let entry = &lexicon.entries[label_order[k % label_order.len()]];
        let matching: Vec<NodeId> = nodes
            .iter()
            .filter(|n| entry.rooms.iter().any(|r| r == &n.room_label))
            .map(|n| n.id)
            .collect();
        let host = if matching.is_empty() {
            nodes[rng.random_range(0..n_nodes)].id
        } else {
            *matching.choose(&mut rng).unwrap()
        };
        objects.push(WorldObject {
            id: k as ObjectId,
            label: entry.label.clone(),
            host_node: host,
            view_slot: rng.random_range(0..PANORAMA_SLOTS) as u8,
        });
    }

    // Episodes: starts chosen so the expert path length lands in the hop range.
    let mut episodes: Vec<Episode> = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let mut chosen: Option<(ObjectId, NodeId, Vec<NodeId>)> = None;
        let offset = rng.random_range(0..objects.len());
        for t in 0..objects.len() {
            let obj = &objects[(offset + t) % objects.len()];
            let mut candidates: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
            for node in &nodes {
                if node.id == obj.host_node {
                    continue;
                }
                let (path, _) = graph.shortest_path(node.id, obj.host_node)?;
                let hops = path.len() - 1;
                if hops >= config.min_hops && hops <= config.max_hops {
                    candidates.push((node.id, path));
                }
            }
            if !candidates.is_empty() {
                let pick = rng.random_range(0..candidates.len());
                let (start, path) = candidates.swap_remove(pick);
                chosen = Some((obj.id, start, path));
                break;
            }
        }
        let Some((target_object, start_node, gt_path)) = chosen else {
            return Err(WorldError::HopRange {
                min_hops: config.min_hops,
                max_hops: config.max_hops,
            });
        };
        let target = objects.iter().find(|o| o.id == target_object).unwrap();
        let target_room = nodes.iter().find(|n| n.id == target.host_node).unwrap().room_label.clone();
        let present_labels: Vec<&str> = objects
            .iter()
            .map(|o| o.label.as_str())
            .filter(|l| *l != target.label)
            .collect();
        let distractor = if present_labels.is_empty() {
            "plant"
        } else {
            present_labels[rng.random_range(0..present_labels.len())]
        };
        let instruction = render_instruction(
            &mut rng,
            config.long_templates,
            &target.label,
            &target_room,
            distractor,
        );
        episodes.push(Episode {
            id: e as u32,
            instruction,
            target_object,
            target_room,
            start_node,
            gt_path,
            success_radius: config.success_radius,
        });
    }

    let world = World::assemble(nodes, edges, objects, episodes, lexicon, seed)?;
    world.validate()?;
    Ok(world)
}

fn components(n: usize, edges: &BTreeSet<(NodeId, NodeId)>) -> Vec<usize> {
    let mut comp = vec![usize::MAX; n];
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a as usize].push(b as usize);
        adj[b as usize].push(a as usize);
    }
    let mut next = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = next;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

pub(crate) const SHORT_TEMPLATES: [&str; 3] = [
    "Find the {obj} in the {room}.",
    "Bring me the {obj} from the {room}.",
    "Clean the {obj} in the {room}.",
];

pub(crate) const LONG_TEMPLATES: [&str; 5] = [
    "Go to the {room} and find the {obj} that is sitting close to the {other} near the doorway.",
    "Bring me the {obj} from the {room}, the one next to the {other}, and please hurry back.",
    "Walk over to the {room} on this floor and clean the {obj} that stands beside the {other}.",
    "Find the {obj} that is kept in the {room} right by the {other} and bring it to me.",
    "Please fetch the {obj} from the {room}; it should be standing somewhere near the {other} by the wall.",
];

fn render_instruction(
    rng: &mut impl Rng,
    long_pool: bool,
    object: &str,
    room: &str,
    distractor: &str,
) -> String {
    let template = if long_pool {
        LONG_TEMPLATES[rng.random_range(0..LONG_TEMPLATES.len())]
    } else {
        SHORT_TEMPLATES[rng.random_range(0..SHORT_TEMPLATES.len())]
    };
    template
        .replace("{obj}", object)
        .replace("{room}", room)
        .replace("{other}", distractor)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unit-weight line graph A-B-C-D-E with ids 0..5.
    fn line_graph() -> NavGraph {
        let nodes: Vec<NavNode> = (0..5)
            .map(|i| NavNode {
                id: i,
                position: [i as f64, 0.0, 0.0],
                room_label: "hallway".into(),
            })
            .collect();
        let edges: Vec<Edge> =
            (0..4).map(|i| Edge { a: i, b: i + 1, weight: 1.0 }).collect();
        NavGraph::new(nodes, edges).unwrap()
    }

    /// Exhaustive simple-path enumeration oracle for small graphs.
    fn enumerate_paths(
        graph: &NavGraph,
        from: NodeId,
        to: NodeId,
    ) -> Vec<(Vec<NodeId>, f64)> {
        fn rec(
            graph: &NavGraph,
            current: NodeId,
            to: NodeId,
            visited: &mut Vec<NodeId>,
            cost: f64,
            out: &mut Vec<(Vec<NodeId>, f64)>,
        ) {
            if current == to {
                out.push((visited.clone(), cost));
                return;
            }
            for &(next, w) in graph.neighbors(current).unwrap() {
                if !visited.contains(&next) {
                    visited.push(next);
                    rec(graph, next, to, visited, cost + w, out);
                    visited.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(graph, from, to, &mut vec![from], 0.0, &mut out);
        out
    }

    #[test]
    fn shortest_path_same_node() {
        let g = line_graph();
        let (path, meters) = g.shortest_path(2, 2).unwrap();
        assert_eq!(path, vec![2]);
        assert_eq!(meters, 0.0);
    }

    #[test]
    fn shortest_path_line_matches_enumeration_oracle() {
        let g = line_graph();
        let (path, meters) = g.shortest_path(0, 4).unwrap();
        let all = enumerate_paths(&g, 0, 4);
        let best = all
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(path, best.0);
        assert_eq!(path, vec![0, 1, 2, 3, 4]);
        assert!((meters - 4.0).abs() < 1e-12);
    }

    #[test]
    fn shortest_path_diamond_breaks_ties_toward_smaller_id() {
        // 0 -> {1, 2} -> 3 with equal branch costs.
        let nodes: Vec<NavNode> = vec![
            NavNode { id: 0, position: [0.0, 0.0, 0.0], room_label: "hallway".into() },
            NavNode { id: 1, position: [1.0, 1.0, 0.0], room_label: "hallway".into() },
            NavNode { id: 2, position: [1.0, -1.0, 0.0], room_label: "hallway".into() },
            NavNode { id: 3, position: [2.0, 0.0, 0.0], room_label: "hallway".into() },
        ];
        let w = 2f64.sqrt();
        let edges = vec![
            Edge { a: 0, b: 1, weight: w },
            Edge { a: 0, b: 2, weight: w },
            Edge { a: 1, b: 3, weight: w },
            Edge { a: 2, b: 3, weight: w },
        ];
        let g = NavGraph::new(nodes, edges).unwrap();
        let (path, meters) = g.shortest_path(0, 3).unwrap();
        // Enumeration oracle: both branches cost the same; tie-break picks 1.
        let all = enumerate_paths(&g, 0, 3);
        let best_cost =
            all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert!((meters - best_cost).abs() < 1e-12);
        assert_eq!(path, vec![0, 1, 3]);
    }

    #[test]
    fn demonstrator_follows_shortest_path() {
        let g = line_graph();
        assert_eq!(demonstrator_action(&g, 3, 3).unwrap(), Action::Stop);
        assert_eq!(demonstrator_action(&g, 0, 4).unwrap(), Action::MoveTo(1));
        assert_eq!(demonstrator_action(&g, 2, 0).unwrap(), Action::MoveTo(1));
    }

    #[test]
    fn demonstrator_reaches_goal_in_shortest_hop_count() {
        let world = generate_world(11, 24, 8, 0).unwrap();
        let g = world.graph();
        for start in [0u32, 3, 7, 11] {
            for goal in [1u32, 5, 13, 23] {
                let (path, _) = g.shortest_path(start, goal).unwrap();
                let mut current = start;
                let mut hops = 0;
                loop {
                    match demonstrator_action(g, current, goal).unwrap() {
                        Action::Stop => break,
                        Action::MoveTo(next) => {
                            current = next;
                            hops += 1;
                            assert!(hops <= path.len(), "demonstrator looped");
                        }
                    }
                }
                assert_eq!(current, goal);
                assert_eq!(hops, path.len() - 1);
            }
        }
    }

    #[test]
    fn generate_world_is_deterministic() {
        let a = generate_world(7, 20, 6, 4).unwrap();
        let b = generate_world(7, 20, 6, 4).unwrap();
        assert_eq!(a.to_json_string().unwrap(), b.to_json_string().unwrap());
        let c = generate_world(8, 20, 6, 4).unwrap();
        assert_ne!(a.to_json_string().unwrap(), c.to_json_string().unwrap());
    }

    #[test]
    fn generated_episodes_stay_in_hop_range() {
        let world = generate_world(3, 30, 10, 12).unwrap();
        for ep in &world.episodes {
            let hops = ep.gt_path.len() - 1;
            assert!((4..=7).contains(&hops), "episode {} has {hops} hops", ep.id);
        }
        world.validate().unwrap();
    }

    #[test]
    fn two_node_world_matches_enumerated_shape() {
        // All valid 2-node worlds: two nodes, the single connecting edge,
        // weight equal to their separation. Episode generation is impossible
        // in the default 4..7 hop range and must be rejected.
        let world = generate_world(5, 2, 1, 0).unwrap();
        assert_eq!(world.nodes.len(), 2);
        assert_eq!(world.edges.len(), 1);
        let e = &world.edges[0];
        let expect = world.graph().euclidean(e.a, e.b).unwrap();
        assert!((e.weight - expect).abs() < 1e-12);
        assert!(e.weight > 0.0);
        assert!(world.graph().is_connected());

        match generate_world(5, 2, 1, 1) {
            Err(WorldError::HopRange { .. }) => {}
            other => panic!("expected hop-range rejection, got {other:?}"),
        }

        // Relaxed configuration admits 1-hop episodes instead.
        let mut cfg = WorldGenConfig::default();
        cfg.min_hops = 1;
        cfg.max_hops = 1;
        let relaxed = generate_world_with(&cfg, 5, 2, 1, 1).unwrap();
        assert_eq!(relaxed.episodes[0].gt_path.len(), 2);
    }

    #[test]
    fn observe_assigns_neighbors_and_objects() {
        let world = generate_world(9, 20, 6, 0).unwrap();
        for node in &world.nodes {
            let pano = world.observe(node.id).unwrap();
            assert_eq!(pano.slots.len(), 36);
            let navigable: Vec<NodeId> = pano.navigable().map(|(_, n)| n).collect();
            assert_eq!(navigable.len(), world.graph().neighbors(node.id).unwrap().len());
            // No two neighbors share a slot, and each appears exactly once.
            let unique: BTreeSet<NodeId> = navigable.iter().copied().collect();
            assert_eq!(unique.len(), navigable.len());
            // Pure: repeated observation is identical.
            assert_eq!(pano, world.observe(node.id).unwrap());
        }
        let hosted: usize = world.nodes.iter().map(|n| world.objects_at(n.id).len()).sum();
        assert_eq!(hosted, world.objects.len());
    }

    #[test]
    fn observe_puts_due_north_neighbor_in_slot_nearest_zero() {
        // Recompute the heading with the two-argument arctangent oracle.
        let nodes = vec![
            NavNode { id: 0, position: [0.0, 0.0, 0.0], room_label: "hallway".into() },
            NavNode { id: 1, position: [0.0, 5.0, 0.0], room_label: "hallway".into() },
        ];
        let edges = vec![Edge { a: 0, b: 1, weight: 5.0 }];
        let world = World::assemble(nodes, edges, vec![WorldObject {
            id: 0,
            label: "plant".into(),
            host_node: 0,
            view_slot: 2,
        }], vec![], default_lexicon(), 0).unwrap();
        let pano = world.observe(0).unwrap();
        let (slot, nbr) = pano.navigable().next().unwrap();
        assert_eq!(nbr, 1);
        let oracle = f64::atan2(0.0 - 0.0, 5.0 - 0.0).to_degrees();
        assert_eq!(heading_bin(wrap_degrees(oracle)), 0);
        assert_eq!(slot.heading_deg, 0.0);
        assert_eq!(slot.elevation_deg, 0.0);
        // Object with no heading constraint sits in its stored slot.
        assert_eq!(pano.slots[2].visible_object_ids, vec![0]);
    }

    #[test]
    fn node_without_objects_sees_none() {
        let world = generate_world(13, 12, 1, 0).unwrap();
        let host = world.objects[0].host_node;
        let empty_node = world.nodes.iter().find(|n| n.id != host).unwrap();
        let pano = world.observe(empty_node.id).unwrap();
        if world.objects_at(empty_node.id).is_empty() {
            assert!(pano.visible_object_ids().is_empty());
        }
    }

    #[test]
    fn long_instruction_pool_averages_near_18_words() {
        let world = generate_world(21, 40, 12, 40).unwrap();
        let mean = world
            .episodes
            .iter()
            .map(|e| e.instruction.split_whitespace().count() as f64)
            .sum::<f64>()
            / world.episodes.len() as f64;
        assert!((16.0..=21.0).contains(&mean), "mean instruction length {mean}");
    }

    #[test]
    fn world_roundtrips_through_json() {
        let world = generate_world(17, 15, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        world.save(&path).unwrap();
        let loaded = World::load(&path).unwrap();
        assert_eq!(world.to_json_string().unwrap(), loaded.to_json_string().unwrap());
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["nodes", "edges", "objects", "episodes", "room_list", "object_lexicon", "seed"] {
            assert!(text.contains(&format!("\"{key}\"")), "missing key {key}");
        }
    }

    #[test]
    fn room_prior_is_the_mode_of_the_entry() {
        let lex = default_lexicon();
        // Frequency-count oracle over the lexicon table.
        for entry in &lex.entries {
            let prior = lex.room_prior(&entry.label).unwrap();
            let count = |room: &str| entry.rooms.iter().filter(|r| *r == room).count();
            let best = entry.rooms.iter().map(|r| count(r)).max().unwrap();
            assert_eq!(count(prior), best, "label {}", entry.label);
        }
        assert_eq!(lex.room_prior("trash can"), Some("bathroom"));
        assert_eq!(lex.room_prior("no such thing"), None);
    }

    #[test]
    fn unknown_node_errors() {
        let g = line_graph();
        assert!(matches!(g.shortest_path(0, 99), Err(WorldError::UnknownNode(99))));
        assert!(matches!(g.neighbors(99), Err(WorldError::UnknownNode(99))));
    }
}
