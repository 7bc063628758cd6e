//! Three-level dependency graph over a scene's Gaussians.
//!
//! Level 1 holds one prunable node per Gaussian. Level 2 holds one node per
//! attribute (mean, scale, rotation, opacity and an SH parent). Level 3 splits
//! the SH parent into one node per degree. Rendering-order edges between
//! level-1 nodes carry the transmittance-weighted contribution a Gaussian
//! makes while another one sits in front of it.
//!
//! Node ids are `i` for level 1, `N + 5i + a` for level 2 and
//! `6N + (l+1)i + k` for level 3.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::render::{for_each_band, prepare_splats, RenderOptions};
use crate::scene::{AttributeClass, Camera, GaussianScene};

/// Only the front-most splats of a pixel take part in pair accumulation.
pub const MAX_PAIR_DEPTH: usize = 32;
/// Order edges lighter than this are dropped.
pub const MIN_EDGE_WEIGHT: f64 = 1e-6;

/// Attribute carried by each level-2 node, in slot order.
pub const L2_SLOTS: [L2Slot; 5] = [L2Slot::Mean, L2Slot::Scale, L2Slot::Rotation, L2Slot::Opacity, L2Slot::Sh];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Slot {
    Mean,
    Scale,
    Rotation,
    Opacity,
    /// Parent of the per-degree SH nodes.
    Sh,
}

impl L2Slot {
    /// Quantizer class for the slot; the SH parent delegates to its children.
    pub fn binding(self) -> Option<AttributeClass> {
        match self {
            L2Slot::Mean => Some(AttributeClass::Means),
            L2Slot::Scale => Some(AttributeClass::Scales),
            L2Slot::Rotation => Some(AttributeClass::Quats),
            L2Slot::Opacity => Some(AttributeClass::Opacities),
            L2Slot::Sh => None,
        }
    }
}

/// Quantizer class for an SH degree node.
pub fn l3_binding(degree: usize) -> AttributeClass {
    if degree == 0 {
        AttributeClass::ShDc
    } else {
        AttributeClass::ShAc
    }
}

/// Directed edge from a rear Gaussian to one composited in front of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderEdge {
    pub rear: usize,
    pub front: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pub n: usize,
    pub sh_degree: usize,
    pub alive: Vec<bool>,
    /// Sorted by `(rear, front)`.
    pub order_edges: Vec<OrderEdge>,
    pub view_indices: Vec<usize>,
}

impl DependencyGraph {
    /// Graph with nodes and containment edges only.
    pub fn structural(scene: &GaussianScene) -> Self {
        Self {
            n: scene.len(),
            sh_degree: scene.sh_degree,
            alive: scene.alive.clone(),
            order_edges: Vec::new(),
            view_indices: Vec::new(),
        }
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn l1_count(&self) -> usize {
        self.alive_count()
    }

    pub fn l2_count(&self) -> usize {
        5 * self.alive_count()
    }

    pub fn l3_count(&self) -> usize {
        (self.sh_degree + 1) * self.alive_count()
    }

    pub fn node_count(&self) -> usize {
        self.l1_count() + self.l2_count() + self.l3_count()
    }

    pub fn containment_edge_count(&self) -> usize {
        (5 + self.sh_degree + 1) * self.alive_count()
    }

    pub fn l2_id(&self, i: usize, slot: usize) -> usize {
        self.n + 5 * i + slot
    }

    pub fn l3_id(&self, i: usize, degree: usize) -> usize {
        6 * self.n + (self.sh_degree + 1) * i + degree
    }

    /// Node ids owned by Gaussian `i`: itself, then its level-2 and level-3 nodes.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut ids = vec![i];
        ids.extend((0..5).map(|a| self.l2_id(i, a)));
        ids.extend((0..=self.sh_degree).map(|k| self.l3_id(i, k)));
        ids
    }

    /// Removes Gaussian `i` with all its sub-nodes and incident order edges.
    pub fn propagate_prune(&mut self, i: usize) -> Result<Vec<usize>> {
        if i >= self.n || !self.alive[i] {
            return Err(Error::PruneIndex { index: i });
        }
        self.alive[i] = false;
        self.order_edges.retain(|e| e.rear != i && e.front != i);
        Ok(self.descendants(i))
    }

    /// Drops dead Gaussians and renumbers the survivors in index order, the
    /// same way [`GaussianScene::compact`] does.
    pub fn compacted(&self) -> DependencyGraph {
        let mut new_id = vec![usize::MAX; self.n];
        let mut next = 0;
        for (i, a) in self.alive.iter().enumerate() {
            if *a {
                new_id[i] = next;
                next += 1;
            }
        }
        let order_edges = self
            .order_edges
            .iter()
            .filter(|e| self.alive[e.rear] && self.alive[e.front])
            .map(|e| OrderEdge { rear: new_id[e.rear], front: new_id[e.front], weight: e.weight })
            .collect();
        DependencyGraph {
            n: next,
            sh_degree: self.sh_degree,
            alive: vec![true; next],
            order_edges,
            view_indices: self.view_indices.clone(),
        }
    }

    pub fn edge_weight(&self, rear: usize, front: usize) -> f64 {
        self.order_edges
            .binary_search_by(|e| (e.rear, e.front).cmp(&(rear, front)))
            .map(|k| self.order_edges[k].weight)
            .unwrap_or(0.0)
    }

    /// Inspection dump: counts, quantizer bindings and the heaviest edges.
    pub fn to_json(&self, top_k: usize) -> serde_json::Value {
        let mut edges = self.order_edges.clone();
        edges.sort_by(|a, b| b.weight.total_cmp(&a.weight).then((a.rear, a.front).cmp(&(b.rear, b.front))));
        edges.truncate(top_k);
        let l2: Vec<_> = L2_SLOTS
            .iter()
            .map(|s| serde_json::json!({"slot": s, "quantizer": s.binding().map(|a| a.name())}))
            .collect();
        let l3: Vec<_> = (0..=self.sh_degree)
            .map(|k| serde_json::json!({"degree": k, "quantizer": l3_binding(k).name()}))
            .collect();
        serde_json::json!({
            "gaussians": self.n,
            "alive": self.alive_count(),
            "sh_degree": self.sh_degree,
            "nodes": {"l1": self.l1_count(), "l2": self.l2_count(), "l3": self.l3_count()},
            "containment_edges": self.containment_edge_count(),
            "order_edges": self.order_edges.len(),
            "bindings": {"l2": l2, "l3": l3},
            "top_order_edges": edges,
            "views": self.view_indices,
        })
    }
}

/// Draws `k` distinct camera indices.
pub fn sample_views(n_cameras: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k_views must be at least 1".into()));
    }
    if k > n_cameras {
        return Err(Error::InvalidArgument(format!("k_views {k} exceeds {n_cameras} cameras")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n_cameras, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn build_qadg(
    scene: &GaussianScene,
    cameras: &[Camera],
    k_views: usize,
    seed: u64,
) -> Result<DependencyGraph> {
    if scene.alive_count() == 0 {
        return Err(Error::InvalidArgument("dependency graph needs at least one alive gaussian".into()));
    }
    let views = sample_views(cameras.len(), k_views, seed)?;
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let opts = RenderOptions::default();
    for &v in &views {
        let cam = &cameras[v];
        let splats = prepare_splats(scene, cam, &opts)?;
        let bands = for_each_band(&splats, cam.height, |band| {
            let m = band.cands.len();
            let mut acc = vec![0.0; m * m];
            let mut hits = Vec::new();
            for y in band.y0..band.y1 {
                for x in 0..cam.width {
                    band.composite(x, y, &mut hits, None);
                    let depth = hits.len().min(MAX_PAIR_DEPTH);
                    for b in 1..depth {
                        let rear = &hits[b];
                        let w = rear.trans * rear.alpha;
                        let row = rear.cand * m;
                        for front in &hits[..b] {
                            acc[row + front.cand] += w;
                        }
                    }
                }
            }
            let mut pairs = Vec::new();
            for r in 0..m {
                for f in 0..m {
                    let w = acc[r * m + f];
                    if w != 0.0 {
                        pairs.push((splats[band.cands[r]].gaussian, splats[band.cands[f]].gaussian, w));
                    }
                }
            }
            pairs
        });
        for (rear, front, w) in bands.into_iter().flatten() {
            *weights.entry((rear, front)).or_insert(0.0) += w;
        }
    }
    let k = views.len() as f64;
    let order_edges = weights
        .into_iter()
        .map(|((rear, front), w)| OrderEdge { rear, front, weight: w / k })
        .filter(|e| e.weight >= MIN_EDGE_WEIGHT)
        .collect();
    Ok(DependencyGraph { order_edges, view_indices: views, ..DependencyGraph::structural(scene) })
}
