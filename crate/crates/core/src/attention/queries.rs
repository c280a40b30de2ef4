use crate::attention::normalize_pixel;
use crate::attention::ops::{multi_view_mean_sample, MapView};
use crate::error::{shape_err, Result};
use crate::geometry::{make_anchor_grid, CameraParams, PlaneRole, SceneConfig};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Projected image features: `views[v][l]` is level `l` of view `v`, finest
/// level first.
#[derive(Clone, Debug)]
pub struct ImageFeatureSet {
    pub views: Vec<Vec<MapView>>,
    pub channels: usize,
}

impl ImageFeatureSet {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_levels(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }
}

/// Floor and ceiling query planes of all slabs.
///
/// Each plane is a `[S * W * L, D]` tape value; slab `i` occupies rows
/// `i * W * L ..`, and token `iy * W + ix` sits at cell `(ix, iy)`.
#[derive(Clone, Copy, Debug)]
pub struct SliceQuerySet {
    pub floor: Var,
    pub ceiling: Var,
    pub num_slices: usize,
    pub tokens: usize,
}

impl SliceQuerySet {
    pub fn plane(&self, role: PlaneRole) -> Var {
        match role {
            PlaneRole::Floor => self.floor,
            PlaneRole::Ceiling => self.ceiling,
        }
    }

    pub fn with_plane(mut self, role: PlaneRole, v: Var) -> Self {
        match role {
            PlaneRole::Floor => self.floor = v,
            PlaneRole::Ceiling => self.ceiling = v,
        }
        self
    }

    /// Values of one plane as a `[W * L, D]` tensor (slice is 0-based).
    pub fn plane_tensor(&self, g: &Graph<'_>, slice: usize, role: PlaneRole) -> Result<Tensor> {
        let v = self.plane(role);
        let d = g.tape.shape(v)[1];
        let rows = &g.tape.data(v)[slice * self.tokens * d..(slice + 1) * self.tokens * d];
        Tensor::new(vec![self.tokens, d], rows.to_vec())
    }
}

/// Learnable per-slab height embedding shared by both planes of a slab.
#[derive(Clone, Copy, Debug)]
pub struct QueryEmbedding {
    pub height: ParamId,
}

impl QueryEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, num_slices: usize, d_model: usize) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        Self {
            height: store.add("query.height_embedding", rng.tensor_uniform(&[num_slices, d_model], bound)),
        }
    }
}

/// Normalized projections of the slab anchors into every view.
#[derive(Clone, Debug)]
pub struct AnchorSampling {
    /// `[S * W * L, V, 2]`.
    pub points: Vec<f64>,
    /// `[S * W * L, V]`.
    pub hits: Vec<bool>,
    pub num_views: usize,
}

/// Projects the cell-center, mid-slab anchors of every slab into each camera.
pub fn anchor_sampling(cfg: &SceneConfig, cams: &[CameraParams]) -> Result<AnchorSampling> {
    let grids = make_anchor_grid(cfg)?;
    let nv = cams.len();
    let na = cfg.num_slices * cfg.tokens_per_plane();
    let mut points = Vec::with_capacity(na * nv * 2);
    let mut hits = Vec::with_capacity(na * nv);
    for grid in &grids {
        for a in grid.data().chunks_exact(3) {
            for cam in cams {
                let pr = cam.project_point([a[0], a[1], a[2]]);
                let p = if pr.hit { normalize_pixel(pr.pixel, cam.image_size) } else { [0.0, 0.0] };
                points.extend_from_slice(&p);
                hits.push(pr.hit);
            }
        }
    }
    Ok(AnchorSampling {
        points,
        hits,
        num_views: nv,
    })
}

/// Builds the initial query planes: content sampled from the finest image
/// level and averaged over the views that see the anchor (zero otherwise),
/// plus the slab height embedding. Floor and ceiling start identical.
///
/// Returns the queries and the number of anchors no view sees.
pub fn init_queries(
    g: &mut Graph<'_>,
    cfg: &SceneConfig,
    embedding: &QueryEmbedding,
    feats: &ImageFeatureSet,
    anchors: &AnchorSampling,
) -> Result<(SliceQuerySet, usize)> {
    if anchors.num_views != feats.num_views() {
        return Err(shape_err("init_queries", feats.num_views(), anchors.num_views));
    }
    let np = cfg.tokens_per_plane();
    let maps: Vec<MapView> = feats.views.iter().map(|levels| levels[0]).collect();
    let (content, misses) = multi_view_mean_sample(&mut g.tape, maps, anchors.points.clone(), anchors.hits.clone())?;
    let e = g.param(embedding.height)?;
    if g.tape.shape(e) != [cfg.num_slices, feats.channels] {
        return Err(shape_err("init_queries", format!("[{}, {}]", cfg.num_slices, feats.channels), format!("{:?}", g.tape.shape(e))));
    }
    let rep = g.tape.repeat_rows(e, np)?;
    let q = g.tape.add(content, rep)?;
    Ok((
        SliceQuerySet {
            floor: q,
            ceiling: q,
            num_slices: cfg.num_slices,
            tokens: np,
        },
        misses,
    ))
}
