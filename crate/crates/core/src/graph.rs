//! Whole-slide spatial graphs over patch centroids.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_str, write_str, PatchRecord, SlidePatches};
use crate::nn::DenseMatrix;

pub const DEFAULT_K: usize = 8;

/// Above this many nodes the grid-bucket search replaces the full pairwise scan.
pub const DEFAULT_GRID_THRESHOLD: usize = 10_000;

/// Undirected spatial graph of one slide. Each edge is stored once as
/// `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsiGraph {
    pub slide_id: String,
    /// Neighbour count used at construction.
    pub k: usize,
    pub node_features: DenseMatrix,
    pub node_centroids: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
}

impl WsiGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn neighbourhoods(&self) -> Neighbourhoods {
        Neighbourhoods::from_edges(self.num_nodes(), &self.edges)
    }

    /// The same graph with nodes reordered: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> WsiGraph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (inverse[a], inverse[b]);
                (x.min(y), x.max(y))
            })
            .collect();
        edges.sort_unstable();
        WsiGraph {
            slide_id: self.slide_id.clone(),
            k: self.k,
            node_features: self.node_features.select_rows(perm),
            node_centroids: perm.iter().map(|&i| self.node_centroids[i]).collect(),
            edges,
        }
    }

    /// Disjoint union of the graph with `copies - 1` further copies of itself.
    pub fn replicated(&self, copies: usize) -> WsiGraph {
        let n = self.num_nodes();
        let idx: Vec<usize> = (0..copies).flat_map(|_| 0..n).collect();
        WsiGraph {
            slide_id: self.slide_id.clone(),
            k: self.k,
            node_features: self.node_features.select_rows(&idx),
            node_centroids: idx.iter().map(|&i| self.node_centroids[i]).collect(),
            edges: (0..copies)
                .flat_map(|c| self.edges.iter().map(move |&(a, b)| (a + c * n, b + c * n)))
                .collect(),
        }
    }
}

/// Compressed neighbour lists with a self-loop on every node.
///
/// Node `i` owns entries `range(i)`; its first entry is `i` itself, followed
/// by its graph neighbours in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbourhoods {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Neighbourhoods {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut lists: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            lists[a].push(b);
            lists[b].push(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::with_capacity(n + 2 * edges.len());
        offsets.push(0);
        for mut l in lists {
            l[1..].sort_unstable();
            l.dedup();
            targets.extend(l);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of (node, neighbour) entries including self-loops.
    pub fn entries(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    #[inline]
    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.targets[self.range(i)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnOptions {
    pub k: usize,
    /// Node count above which the grid-bucket search is used.
    pub grid_threshold: usize,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            grid_threshold: DEFAULT_GRID_THRESHOLD,
        }
    }
}

/// Symmetrised k-nearest-neighbour graph on patch centroids.
///
/// Distance ties are broken by ascending node index, so the result does not
/// depend on which search strategy runs.
pub fn build_knn_graph(slide_id: &str, patches: &[PatchRecord], options: KnnOptions) -> Result<WsiGraph> {
    if patches.is_empty() {
        return Err(Error::EmptyInput(format!("slide {slide_id}")));
    }
    if options.k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let d = patches[0].features.len();
    let mut features = Vec::with_capacity(patches.len() * d);
    let mut centroids = Vec::with_capacity(patches.len());
    for p in patches {
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::NonFinite(format!("centroid of patch {} in slide {slide_id}", p.patch_id)));
        }
        if p.features.len() != d {
            return Err(Error::DimensionMismatch {
                slide: slide_id.to_string(),
                expected: d,
                found: p.features.len(),
            });
        }
        features.extend_from_slice(&p.features);
        centroids.push([p.x, p.y]);
    }
    let lists = if patches.len() > options.grid_threshold {
        knn_grid(&centroids, options.k)
    } else {
        knn_brute_force(&centroids, options.k)
    };
    Ok(WsiGraph {
        slide_id: slide_id.to_string(),
        k: options.k,
        node_features: DenseMatrix::from_vec(patches.len(), d, features)?,
        node_centroids: centroids,
        edges: symmetrize(&lists),
    })
}

pub fn build_slide_graph(slide: &SlidePatches, options: KnnOptions) -> Result<WsiGraph> {
    build_knn_graph(&slide.slide_id, &slide.patches, options)
}

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d.total_cmp(&other.d).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// k nearest neighbours of every node by full pairwise scan.
pub fn knn_brute_force(points: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut cands = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            cands.clear();
            cands.extend((0..n).filter(|&j| j != i).map(|j| Candidate {
                d: dist2(points[i], points[j]),
                idx: j,
            }));
            let take = k.min(cands.len());
            if take < cands.len() {
                cands.select_nth_unstable(take);
            }
            let mut best: Vec<Candidate> = cands[..take].to_vec();
            best.sort_unstable();
            best.into_iter().map(|c| c.idx).collect()
        })
        .collect()
}

/// k nearest neighbours by expanding rings of square grid buckets.
pub fn knn_grid(points: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let area = ((max_x - min_x) * (max_y - min_y)).max(0.0);
    let mut cell = (area * (k + 1) as f64 / n as f64).sqrt();
    if !(cell > 0.0) {
        cell = ((max_x - min_x).max(max_y - min_y) / n as f64).max(1.0);
    }
    let gx = (((max_x - min_x) / cell).floor() as usize + 1).max(1);
    let gy = (((max_y - min_y) / cell).floor() as usize + 1).max(1);
    let cell_of = |p: [f64; 2]| {
        let cx = (((p[0] - min_x) / cell).floor() as usize).min(gx - 1);
        let cy = (((p[1] - min_y) / cell).floor() as usize).min(gy - 1);
        (cx, cy)
    };
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); gx * gy];
    for (i, &p) in points.iter().enumerate() {
        let (cx, cy) = cell_of(p);
        buckets[cy * gx + cx].push(i);
    }
    let max_ring = gx.max(gy);
    let k = k.min(n.saturating_sub(1));

    (0..n)
        .map(|i| {
            if k == 0 {
                return Vec::new();
            }
            let (cx, cy) = cell_of(points[i]);
            let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
            let visit = |bx: usize, by: usize, heap: &mut BinaryHeap<Candidate>| {
                for &j in &buckets[by * gx + bx] {
                    if j == i {
                        continue;
                    }
                    let c = Candidate {
                        d: dist2(points[i], points[j]),
                        idx: j,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            };
            for r in 0..=max_ring {
                let (x0, x1) = (cx as isize - r as isize, cx as isize + r as isize);
                let (y0, y1) = (cy as isize - r as isize, cy as isize + r as isize);
                for by in y0..=y1 {
                    if by < 0 || by as usize >= gy {
                        continue;
                    }
                    let on_edge_row = by == y0 || by == y1;
                    let mut bx = x0;
                    while bx <= x1 {
                        if bx >= 0 && (bx as usize) < gx {
                            visit(bx as usize, by as usize, &mut heap);
                        }
                        // interior rows only touch the two side columns
                        bx = if on_edge_row || bx == x1 { bx + 1 } else { x1 };
                    }
                }
                // Unvisited points lie strictly farther than r cells.
                if heap.len() == k {
                    let bound = r as f64 * cell;
                    if heap.peek().expect("non-empty").d < bound * bound * (1.0 - 1e-9) {
                        break;
                    }
                }
            }
            let mut best = heap.into_vec();
            best.sort_unstable();
            best.into_iter().map(|c| c.idx).collect()
        })
        .collect()
}

/// Union of directed neighbour lists as sorted `(i < j)` pairs.
pub fn symmetrize(lists: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = lists
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&j| (i.min(j), i.max(j))))
        .filter(|(a, b)| a != b)
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n: usize,
    pub m: usize,
    pub mean_degree: f64,
    pub connected_components: usize,
}

pub fn graph_stats(g: &WsiGraph) -> GraphStats {
    let n = g.num_nodes();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for &(a, b) in &g.edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    GraphStats {
        n,
        m: g.edges.len(),
        mean_degree: if n == 0 { 0.0 } else { 2.0 * g.edges.len() as f64 / n as f64 },
        connected_components: components,
    }
}

const GRAPH_MAGIC: &[u8; 4] = b"WSIG";
const GRAPH_VERSION: u32 = 1;

/// Writes graphs to a binary cache.
///
/// Layout (little endian): magic `WSIG`, `u32` version, `u64` graph count;
/// per graph: string slide id, `u64` n, `u64` d, `u64` k, n·d `f64`
/// features (row-major), n·2 `f64` centroids, `u64` m, m × (`u64`, `u64`)
/// edges.
pub fn save_graph_cache(path: &Path, graphs: &[WsiGraph]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GRAPH_MAGIC)?;
    w.write_u32::<LittleEndian>(GRAPH_VERSION)?;
    w.write_u64::<LittleEndian>(graphs.len() as u64)?;
    for g in graphs {
        write_str(&mut w, &g.slide_id)?;
        w.write_u64::<LittleEndian>(g.num_nodes() as u64)?;
        w.write_u64::<LittleEndian>(g.dim() as u64)?;
        w.write_u64::<LittleEndian>(g.k as u64)?;
        for &v in g.node_features.values() {
            w.write_f64::<LittleEndian>(v)?;
        }
        for c in &g.node_centroids {
            w.write_f64::<LittleEndian>(c[0])?;
            w.write_f64::<LittleEndian>(c[1])?;
        }
        w.write_u64::<LittleEndian>(g.edges.len() as u64)?;
        for &(a, b) in &g.edges {
            w.write_u64::<LittleEndian>(a as u64)?;
            w.write_u64::<LittleEndian>(b as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_graph_cache(path: &Path) -> Result<Vec<WsiGraph>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRAPH_MAGIC {
        return Err(Error::Format(format!("{} is not a graph cache", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != GRAPH_VERSION {
        return Err(Error::Format(format!("unsupported graph cache version {version}")));
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut graphs = Vec::with_capacity(count);
    for _ in 0..count {
        let slide_id = read_str(&mut r)?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let d = r.read_u64::<LittleEndian>()? as usize;
        let k = r.read_u64::<LittleEndian>()? as usize;
        let mut features = vec![0.0; n * d];
        r.read_f64_into::<LittleEndian>(&mut features)?;
        let mut flat = vec![0.0; n * 2];
        r.read_f64_into::<LittleEndian>(&mut flat)?;
        let m = r.read_u64::<LittleEndian>()? as usize;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let a = r.read_u64::<LittleEndian>()? as usize;
            let b = r.read_u64::<LittleEndian>()? as usize;
            if a >= b || b >= n {
                return Err(Error::Format(format!("invalid edge ({a}, {b}) in slide {slide_id}")));
            }
            edges.push((a, b));
        }
        graphs.push(WsiGraph {
            slide_id,
            k,
            node_features: DenseMatrix::from_vec(n, d, features)?,
            node_centroids: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            edges,
        });
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patches(points: &[[f64; 2]]) -> Vec<PatchRecord> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| PatchRecord {
                patch_id: format!("p{i}"),
                x: p[0],
                y: p[1],
                features: vec![i as f64],
            })
            .collect()
    }

    fn knn(points: &[[f64; 2]], k: usize) -> WsiGraph {
        build_knn_graph("s", &patches(points), KnnOptions { k, ..KnnOptions::default() }).unwrap()
    }

    #[test]
    fn single_node_has_no_edges() {
        let g = knn(&[[5.0, 5.0]], 8);
        assert!(g.edges.is_empty());
        let s = graph_stats(&g);
        assert_eq!((s.n, s.m, s.mean_degree, s.connected_components), (1, 0, 0.0, 1));
    }

    #[test]
    fn collinear_points_k1() {
        // d(0,1)=1, d(1,2)=2, d(0,2)=3: 0→1, 1→0, 2→1.
        let g = knn(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], 1);
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn unit_square_k2_links_sides() {
        // Sides have length 1, diagonals √2: each corner picks its two side neighbours.
        let g = knn(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], 2);
        assert_eq!(g.edges, vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn small_graph_is_complete() {
        let g = knn(&[[0.0, 0.0], [1.0, 0.0], [7.0, 1.0], [0.0, 4.0]], 8);
        let s = graph_stats(&g);
        assert_eq!((s.n, s.m, s.mean_degree, s.connected_components), (4, 6, 3.0, 1));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // Node 0 is equidistant from 1, 2, 3, 4.
        let g = knn(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], 1);
        assert!(g.edges.contains(&(0, 1)));
        let lists = knn_brute_force(&g.node_centroids, 2);
        assert_eq!(lists[0], vec![1, 2]);
        assert_eq!(knn_grid(&g.node_centroids, 2)[0], vec![1, 2]);
    }

    #[test]
    fn components_of_two_pairs() {
        let g = knn(&[[0.0, 0.0], [1.0, 0.0], [100.0, 0.0], [101.0, 0.0]], 1);
        assert_eq!(graph_stats(&g).connected_components, 2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_knn_graph("s", &[], KnnOptions::default()).is_err());
        let mut p = patches(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(build_knn_graph("s", &p, KnnOptions { k: 0, ..KnnOptions::default() }).is_err());
        p[1].x = f64::NAN;
        assert!(matches!(build_knn_graph("s", &p, KnnOptions::default()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_centroids_are_deterministic() {
        let pts = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        assert_eq!(knn_brute_force(&pts, 1), knn_grid(&pts, 1));
        assert_eq!(knn_brute_force(&pts, 1)[3], vec![0]);
    }

    #[test]
    fn neighbourhoods_put_self_first() {
        let nb = Neighbourhoods::from_edges(3, &[(0, 2), (1, 2)]);
        assert_eq!(nb.neighbours(0), &[0, 2]);
        assert_eq!(nb.neighbours(2), &[2, 0, 1]);
        assert_eq!(nb.entries(), 7);
    }

    #[test]
    fn cache_round_trip() {
        let g = knn(&[[0.0, 0.5], [1.0, 0.25], [3.0, 2.0]], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        save_graph_cache(&path, &[g.clone(), g.replicated(2)]).unwrap();
        let loaded = load_graph_cache(&path).unwrap();
        assert_eq!(loaded, vec![g.clone(), g.replicated(2)]);
    }
}
