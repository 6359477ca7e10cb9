//! Masked patch nearest-neighbour search, template similarity and top-K
//! viewpoint retrieval.
//!
//! [`nearest_patch`] and [`template_similarity`] are the reference path:
//! f64-accumulated dot products over one query/template pair.
//! [`TemplateIndex`] packs every template of an object into one row-major
//! matrix and scores a query against all of them with f32 GEMM blocks, one
//! block per template, so per-template results do not depend on how the
//! blocks are scheduled. For wide descriptors the index also keeps a
//! low-rank projection; [`TemplateIndex::retrieve_topk`] uses it to bound
//! each template's similarity and scores exactly only the templates whose
//! bound can still reach the top K. The result equals the exhaustive ranking.

use log::warn;

use crate::error::{invalid, Error, Result};
use crate::featuregrid::{dot, FeatureGrid, PatchIndex};
use crate::par::{self, Execution};

mod bound;

use bound::{gemm, Operand, Projection, BOUND_SLACK};

/// Descriptor width from which the index builds a pruning projection.
pub const PRUNE_MIN_DIM: usize = 256;
/// Rank of the pruning projection.
pub const PROJECTION_RANK: usize = 64;

/// Default minimum cosine similarity for a correspondence to be kept.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.5;

/// A query patch matched to its nearest template patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub query_index: PatchIndex,
    pub template_index: PatchIndex,
    pub score: f64,
}

/// Similarity of one query/template pair with the retained matches, sorted by
/// descending score (ties by query position).
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMatch {
    pub similarity: f64,
    pub correspondences: Vec<Correspondence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub template_id: usize,
    pub similarity: f64,
    pub correspondences: Vec<Correspondence>,
}

/// Ranked retrieval output. `clamped` is set when `k` exceeded the number
/// of templates.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub results: Vec<RetrievalResult>,
    pub clamped: bool,
}

fn check_dims(query: &FeatureGrid, template: &FeatureGrid) -> Result<()> {
    if query.dim() != template.dim() {
        return Err(invalid(format!(
            "descriptor dims differ: query {} vs template {}",
            query.dim(),
            template.dim()
        )));
    }
    Ok(())
}

/// Most similar masked template patch for query patch `i`; ties go to the
/// smallest row-major index.
pub fn nearest_patch(query: &FeatureGrid, i: PatchIndex, template: &FeatureGrid) -> Result<(PatchIndex, f64)> {
    check_dims(query, template)?;
    if !query.is_masked(i) {
        return Err(invalid(format!("query patch ({}, {}) is not masked", i.row, i.col)));
    }
    let q = query.descriptor(i);
    let mut best: Option<(usize, f64)> = None;
    for cell in template.masked_cells() {
        let s = dot(q, template.cell_descriptor(cell));
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((cell, s));
        }
    }
    let (cell, score) = best.ok_or_else(|| Error::NoCandidates("template mask is empty".into()))?;
    Ok((template.index_of(cell), score.clamp(-1.0, 1.0)))
}

/// Scores are finite; `partial_cmp` keeps 0.0 and -0.0 tied.
fn sort_correspondences(corrs: &mut [Correspondence]) {
    corrs.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.query_index.cmp(&b.query_index))
    });
}

/// Mean over masked query patches of the nearest-neighbour score, with
/// matches below `threshold` contributing zero.
pub fn template_similarity(query: &FeatureGrid, template: &FeatureGrid, threshold: f64) -> Result<TemplateMatch> {
    check_dims(query, template)?;
    let n = query.mask_count();
    if n == 0 {
        return Err(Error::NoCandidates("query mask is empty".into()));
    }
    let mut corrs = Vec::new();
    let mut total = 0.0;
    for cell in query.masked_cells() {
        let qi = query.index_of(cell);
        let (ti, score) = nearest_patch(query, qi, template)?;
        if score >= threshold {
            total += score;
            corrs.push(Correspondence {
                query_index: qi,
                template_index: ti,
                score,
            });
        }
    }
    sort_correspondences(&mut corrs);
    Ok(TemplateMatch {
        similarity: total / n as f64,
        correspondences: corrs,
    })
}

/// All templates of one object packed for batched scoring.
#[derive(Clone, Debug)]
pub struct TemplateIndex {
    dim: usize,
    width: usize,
    /// Row-major `(sum of template mask sizes) x dim`.
    packed: Vec<f32>,
    /// Start row of each template; one extra entry closes the last segment.
    offsets: Vec<usize>,
    /// Grid cell of every packed row.
    cells: Vec<u32>,
    projection: Option<Projection>,
}

impl TemplateIndex {
    pub fn build<'a>(grids: impl IntoIterator<Item = &'a FeatureGrid>) -> Result<Self> {
        let mut dim = None;
        let mut width = None;
        let mut packed = Vec::new();
        let mut offsets = vec![0];
        let mut cells = Vec::new();
        for (id, g) in grids.into_iter().enumerate() {
            if *dim.get_or_insert(g.dim()) != g.dim() || *width.get_or_insert(g.width()) != g.width() {
                return Err(invalid(format!("template {id} shape differs from template 0")));
            }
            if g.mask_count() == 0 {
                return Err(Error::NoCandidates(format!("template {id} has an empty mask")));
            }
            for cell in g.masked_cells() {
                packed.extend_from_slice(g.cell_descriptor(cell));
                cells.push(cell as u32);
            }
            offsets.push(cells.len());
        }
        let dim = dim.ok_or_else(|| Error::NoCandidates("no templates".into()))?;
        let projection =
            (dim >= PRUNE_MIN_DIM).then(|| Projection::fit(&packed, cells.len(), dim, PROJECTION_RANK));
        Ok(Self {
            dim,
            width: width.unwrap_or(0),
            packed,
            offsets,
            cells,
            projection,
        })
    }

    /// Drops the pruning projection so every query scores all templates.
    pub fn exhaustive(mut self) -> Self {
        self.projection = None;
        self
    }

    pub fn is_pruned(&self) -> bool {
        self.projection.is_some()
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Packed rows across all templates.
    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    fn score_template(&self, query_rows: &[f32], query_cells: &[PatchIndex], id: usize, threshold: f64) -> TemplateMatch {
        let m = query_cells.len();
        let (start, end) = (self.offsets[id], self.offsets[id + 1]);
        let n = end - start;
        let k = self.dim;
        let mut scores = vec![0f32; m * n];
        let block = &self.packed[start * k..end * k];
        gemm(m, k, n, Operand::plain(query_rows), Operand::transposed(block), &mut scores);
        let mut corrs = Vec::new();
        let mut total = 0.0;
        for (qi, row) in scores.chunks_exact(n).enumerate() {
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let score = (row[best] as f64).clamp(-1.0, 1.0);
            if score >= threshold {
                total += score;
                let cell = self.cells[start + best] as usize;
                corrs.push(Correspondence {
                    query_index: query_cells[qi],
                    template_index: PatchIndex::new(cell / self.width, cell % self.width),
                    score,
                });
            }
        }
        sort_correspondences(&mut corrs);
        TemplateMatch {
            similarity: total / m as f64,
            correspondences: corrs,
        }
    }

    fn query_rows(&self, query: &FeatureGrid) -> Result<(Vec<f32>, Vec<PatchIndex>)> {
        if query.dim() != self.dim {
            return Err(invalid(format!(
                "query dim {} does not match index dim {}",
                query.dim(),
                self.dim
            )));
        }
        if query.width() != self.width {
            return Err(invalid("query grid width does not match templates"));
        }
        let query_cells: Vec<PatchIndex> = query.masked_cells().map(|c| query.index_of(c)).collect();
        if query_cells.is_empty() {
            return Err(Error::NoCandidates("query mask is empty".into()));
        }
        let mut rows = Vec::with_capacity(query_cells.len() * self.dim);
        for &qi in &query_cells {
            rows.extend_from_slice(query.descriptor(qi));
        }
        Ok((rows, query_cells))
    }

    /// Scores the query against every template, in template order.
    pub fn score_all(&self, query: &FeatureGrid, threshold: f64, exec: Execution) -> Result<Vec<TemplateMatch>> {
        let (rows, query_cells) = self.query_rows(query)?;
        Ok(par::map_range(exec, self.len(), |id| {
            self.score_template(&rows, &query_cells, id, threshold)
        }))
    }

    /// Upper bound on every template's similarity from the projection.
    fn similarity_bounds(&self, projection: &Projection, rows: &[f32], threshold: f64, exec: Execution) -> Vec<f64> {
        let (q_proj, q_res) = projection.project(rows, self.dim);
        let m = q_res.len();
        let rank = projection.rank;
        par::map_range(exec, self.len(), |id| {
            let (start, end) = (self.offsets[id], self.offsets[id + 1]);
            let n = end - start;
            let mut scores = vec![0f32; m * n];
            gemm(
                m,
                rank,
                n,
                Operand::plain(&q_proj),
                Operand::transposed(&projection.packed[start * rank..end * rank]),
                &mut scores,
            );
            let t_res = &projection.residual[start..end];
            let mut total = 0.0;
            for (row, &rq) in scores.chunks_exact(n).zip(&q_res) {
                let best = row
                    .iter()
                    .zip(t_res)
                    .map(|(&s, &rt)| s + rq * rt)
                    .fold(f32::NEG_INFINITY, f32::max);
                let ub = ((best + BOUND_SLACK) as f64).min(1.0);
                if ub >= threshold && ub > 0.0 {
                    total += ub;
                }
            }
            total / m as f64
        })
    }

    /// The `k` most similar templates, descending, ties by smaller id.
    pub fn retrieve_topk(&self, query: &FeatureGrid, k: usize, threshold: f64, exec: Execution) -> Result<Retrieval> {
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        let Some(projection) = &self.projection else {
            let scored = self.score_all(query, threshold, exec)?;
            return Ok(rank(scored.into_iter().enumerate().collect(), k, self.len()));
        };
        let (rows, query_cells) = self.query_rows(query)?;
        let bounds = self.similarity_bounds(projection, &rows, threshold, exec);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| bounds[b].total_cmp(&bounds[a]).then(a.cmp(&b)));
        let batch = if exec.is_parallel() { k.max(rayon_threads()) } else { 1 };
        let mut scored: Vec<(usize, TemplateMatch)> = Vec::new();
        let mut next = 0;
        while next < order.len() {
            if scored.len() >= k {
                let mut sims: Vec<f64> = scored.iter().map(|(_, m)| m.similarity).collect();
                sims.sort_by(|a, b| b.total_cmp(a));
                if bounds[order[next]] < sims[k - 1] {
                    break;
                }
            }
            let ids = &order[next..(next + batch).min(order.len())];
            let matches = par::map_slice(exec, ids, |&id| self.score_template(&rows, &query_cells, id, threshold));
            scored.extend(ids.iter().copied().zip(matches));
            next += ids.len();
        }
        Ok(rank(scored, k, self.len()))
    }
}

#[cfg(feature = "parallel")]
fn rayon_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn rayon_threads() -> usize {
    1
}

/// Ranks scored `(template id, match)` pairs out of `total` templates.
fn rank(scored: Vec<(usize, TemplateMatch)>, k: usize, total: usize) -> Retrieval {
    let clamped = k > total;
    if clamped {
        warn!("top-k {k} exceeds {total} templates; clamping");
    }
    let mut results: Vec<RetrievalResult> = scored
        .into_iter()
        .map(|(template_id, m)| RetrievalResult {
            template_id,
            similarity: m.similarity,
            correspondences: m.correspondences,
        })
        .collect();
    results.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.template_id.cmp(&b.template_id))
    });
    results.truncate(k);
    Retrieval { results, clamped }
}

/// Top-K over a template collection using the reference scoring path.
pub fn retrieve_topk(query: &FeatureGrid, templates: &[FeatureGrid], k: usize, threshold: f64) -> Result<Retrieval> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if templates.is_empty() {
        return Err(Error::NoCandidates("template collection is empty".into()));
    }
    let scored = templates
        .iter()
        .map(|t| template_similarity(query, t, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(scored.into_iter().enumerate().collect(), k, templates.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Grid whose masked cells hold distinct basis vectors.
    fn basis_grid(n: usize) -> FeatureGrid {
        let cells = n * n;
        let mut data = vec![0f32; cells * cells];
        for c in 0..cells {
            data[c * cells + c] = 1.0;
        }
        FeatureGrid::from_parts(n, n, cells, data, vec![true; cells]).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureGrid {
        let data: Vec<f32> = (0..n * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut mask: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        FeatureGrid::from_unnormalized(n, n, d, data, mask).unwrap()
    }

    #[test]
    fn self_match_on_orthogonal_descriptors() {
        let g = basis_grid(3);
        for cell in 0..9 {
            let i = g.index_of(cell);
            assert_eq!(nearest_patch(&g, i, &g).unwrap(), (i, 1.0));
        }
        let m = template_similarity(&g, &g, 0.5).unwrap();
        assert_eq!(m.similarity, 1.0);
        assert_eq!(m.correspondences.len(), 9);
    }

    #[test]
    fn single_masked_template_cell_wins() {
        let q = basis_grid(2);
        let mut data = vec![0f32; 4 * 4];
        data[3 * 4] = -1.0;
        let mut mask = vec![false; 4];
        mask[3] = true;
        let t = FeatureGrid::from_parts(2, 2, 4, data, mask).unwrap();
        let (idx, score) = nearest_patch(&q, PatchIndex::new(0, 0), &t).unwrap();
        assert_eq!(idx, PatchIndex::new(1, 1));
        assert_eq!(score, -1.0);
    }

    #[test]
    fn empty_masks_are_errors() {
        let q = basis_grid(2);
        let t = FeatureGrid::from_parts(2, 2, 4, vec![0.0; 16], vec![false; 4]).unwrap();
        assert!(matches!(nearest_patch(&q, PatchIndex::new(0, 0), &t), Err(Error::NoCandidates(_))));
        assert!(matches!(template_similarity(&t, &q, 0.5), Err(Error::NoCandidates(_))));
        assert!(matches!(TemplateIndex::build([&t]), Err(Error::NoCandidates(_))));
    }

    #[test]
    fn all_negative_filtered() {
        let q = basis_grid(2);
        let data: Vec<f32> = q.data().iter().map(|v| -v).collect();
        let t = FeatureGrid::from_parts(2, 2, 4, data, vec![true; 4]).unwrap();
        let m = template_similarity(&q, &t, 0.5).unwrap();
        assert_eq!(m.similarity, 0.0);
        assert!(m.correspondences.is_empty());
    }

    #[test]
    fn half_high_half_low_gives_point_four() {
        // 4x4, descriptors in 2D planes: cosine 0.8 for half the cells, 0.3
        // for the other half; templates are orthogonal so each query sees
        // exactly one non-zero partner
        let n = 4;
        let cells = n * n;
        let d = 2 * cells;
        let mut qd = vec![0f32; cells * d];
        let mut td = vec![0f32; cells * d];
        for c in 0..cells {
            let cos: f32 = if c % 2 == 0 { 0.8 } else { 0.3 };
            td[c * d + 2 * c] = 1.0;
            qd[c * d + 2 * c] = cos;
            qd[c * d + 2 * c + 1] = (1.0 - cos * cos).sqrt();
        }
        let q = FeatureGrid::from_unnormalized(n, n, d, qd, vec![true; cells]).unwrap();
        let t = FeatureGrid::from_parts(n, n, d, td, vec![true; cells]).unwrap();
        let m = template_similarity(&q, &t, 0.5).unwrap();
        assert!((m.similarity - 0.4).abs() < 1e-6, "{}", m.similarity);
        assert_eq!(m.correspondences.len(), 8);
        let index = TemplateIndex::build([&t]).unwrap();
        let b = &index.score_all(&q, 0.5, Execution::Sequential).unwrap()[0];
        assert!((b.similarity - 0.4).abs() < 1e-6);
    }

    #[test]
    fn batched_agrees_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let templates: Vec<FeatureGrid> = (0..20).map(|_| random_grid(&mut rng, 6, 24)).collect();
        let index = TemplateIndex::build(&templates).unwrap();
        for _ in 0..10 {
            let q = random_grid(&mut rng, 6, 24);
            let fast = index.score_all(&q, 0.0, Execution::Parallel).unwrap();
            for (t, f) in templates.iter().zip(&fast) {
                let r = template_similarity(&q, t, 0.0).unwrap();
                assert!((r.similarity - f.similarity).abs() < 1e-5);
                assert_eq!(r.correspondences.len(), f.correspondences.len());
            }
        }
    }

    #[test]
    fn topk_ranking_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let templates: Vec<FeatureGrid> = (0..8).map(|_| random_grid(&mut rng, 5, 16)).collect();
        let index = TemplateIndex::build(&templates).unwrap();
        let r = index.retrieve_topk(&templates[3], 1, 0.5, Execution::Sequential).unwrap();
        assert_eq!(r.results[0].template_id, 3);
        assert!((r.results[0].similarity - 1.0).abs() < 1e-6);
        let all = index.retrieve_topk(&templates[3], 8, 0.5, Execution::Sequential).unwrap();
        let mut ids: Vec<usize> = all.results.iter().map(|r| r.template_id).collect();
        assert!(!all.clamped);
        ids.sort();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        let over = index.retrieve_topk(&templates[3], 20, 0.5, Execution::Sequential).unwrap();
        assert!(over.clamped);
        assert_eq!(over.results.len(), 8);
        assert!(index.retrieve_topk(&templates[3], 0, 0.5, Execution::Sequential).is_err());
        let slow = retrieve_topk(&templates[3], &templates, 8, 0.5).unwrap();
        assert_eq!(slow.results[0].template_id, 3);
    }

    #[test]
    fn pruned_topk_equals_exhaustive() {
        // low-rank descriptors plus a little noise so the bound prunes
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = PRUNE_MIN_DIM;
        let factors: Vec<Vec<f32>> = (0..8).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let grid = |rng: &mut ChaCha8Rng| {
            let n = 6;
            let mut data = vec![0f32; n * n * d];
            for cell in data.chunks_exact_mut(d) {
                let w: Vec<f32> = (0..factors.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for (j, v) in cell.iter_mut().enumerate() {
                    *v = factors.iter().zip(&w).map(|(f, w)| f[j] * w).sum::<f32>() + rng.gen_range(-0.01..0.01);
                }
            }
            FeatureGrid::from_unnormalized(n, n, d, data, vec![true; n * n]).unwrap()
        };
        let templates: Vec<FeatureGrid> = (0..30).map(|_| grid(&mut rng)).collect();
        let index = TemplateIndex::build(&templates).unwrap();
        assert!(index.is_pruned());
        let full = index.clone().exhaustive();
        for _ in 0..10 {
            let q = grid(&mut rng);
            for k in [1, 5, 30] {
                for exec in [Execution::Sequential, Execution::Parallel] {
                    assert_eq!(
                        index.retrieve_topk(&q, k, 0.2, exec).unwrap(),
                        full.retrieve_topk(&q, k, 0.2, Execution::Sequential).unwrap()
                    );
                }
            }
        }
    }
}
