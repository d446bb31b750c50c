//! Ray generation from graph cameras, ray-box intersection, composite
//! proposal sampling, and volumetric integration of color and depth.

mod pipeline;
pub use pipeline::{render_rays, BatchNodes, PoseMode, ProposalTrace, RenderSettings};

use crate::autodiff::{ParamStore, Real, Tape};
use crate::fields::FieldSet;
use crate::imgio::RgbImage;
use crate::geom::Vec3;
use crate::graph::{GraphError, SceneGraph};
use crate::lie::BoundingBox3D;
use serde::{Deserialize, Serialize};

/// One camera ray with provenance.
#[derive(Clone, Debug)]
pub struct Ray {
    pub origin: Vec3<f64>,
    /// Unit direction.
    pub dir: Vec3<f64>,
    pub sequence: usize,
    pub time: f64,
    pub camera: usize,
    pub pixel: (u32, u32),
    pub near: f64,
    pub far: f64,
}

/// Entry/exit of a ray through one object's oriented box, clipped to
/// `[near, far]`.
#[derive(Clone, Debug)]
pub struct BoxHit {
    pub object: usize,
    pub u_in: f64,
    pub u_out: f64,
    pub bbox: BoundingBox3D,
}

/// Quadrature bins along one ray plus per-bin box ownership.
#[derive(Clone, Debug)]
pub struct SampleSet {
    /// `n + 1` strictly increasing edges in ray units.
    pub edges: Vec<f64>,
    pub midpoints: Vec<f64>,
    pub widths: Vec<f64>,
    /// Per bin: indices into `hits` whose interval contains the midpoint.
    pub owners: Vec<Vec<usize>>,
    pub hits: Vec<BoxHit>,
}

/// Result of integrating one ray.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub expected_depth: f64,
    pub weights: Vec<f64>,
    pub accumulated_opacity: f64,
    /// `Σ w_i σ_ψ,i / σ_i`: how much of the rendered mass is dynamic.
    pub dynamic_weight_fraction: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub near: f64,
    pub far: f64,
    /// Proposal iteration sizes and the final bin count.
    pub n_initial: usize,
    pub n_refined: usize,
    pub n_final: usize,
    /// Dense uniform sampling baseline: disables both proposal
    /// iterations and places this many uniform bins.
    pub dense_uniform: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            near: 0.05,
            far: 400.0,
            n_initial: 128,
            n_refined: 64,
            n_final: 32,
            dense_uniform: None,
        }
    }
}

/// Isotropic world-to-normalized-scene map derived from the scene bounds.
#[derive(Clone, Copy, Debug)]
pub struct SceneNorm {
    pub center: Vec3<f64>,
    pub inv_radius: f64,
}

impl SceneNorm {
    pub fn from_bounds(bounds: &crate::geom::Aabb) -> Self {
        let he = bounds.half_extents();
        let r = he.0.iter().cloned().fold(1e-6, f64::max);
        SceneNorm {
            center: bounds.center(),
            inv_radius: 1.0 / r,
        }
    }

    pub fn normalize(&self, x: &Vec3<f64>) -> Vec3<f64> {
        (*x - self.center).scale(self.inv_radius)
    }

    pub fn radius(&self) -> f64 {
        1.0 / self.inv_radius
    }
}

/// Bijection between ray distance `u` and normalized sample coordinate
/// `s ∈ [0, 1]`: linear inside the scene radius, linear in disparity
/// beyond it. Pairs with the ∞-norm contraction.
#[derive(Clone, Copy, Debug)]
pub struct Spacing {
    u_near: f64,
    u_mid: f64,
    u_far: f64,
    s_mid: f64,
}

impl Spacing {
    pub fn new(near: f64, far: f64, scene_radius: f64) -> Self {
        let u_mid = scene_radius.clamp(near * 2.0, far * 0.5);
        Spacing {
            u_near: near,
            u_mid,
            u_far: far,
            s_mid: 0.5,
        }
    }

    pub fn s_of_u(&self, u: f64) -> f64 {
        let u = u.clamp(self.u_near, self.u_far);
        if u <= self.u_mid {
            self.s_mid * (u - self.u_near) / (self.u_mid - self.u_near)
        } else {
            let inv_span = 1.0 / self.u_mid - 1.0 / self.u_far;
            self.s_mid + (1.0 - self.s_mid) * (1.0 / self.u_mid - 1.0 / u) / inv_span
        }
    }

    pub fn u_of_s(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        if s <= self.s_mid {
            self.u_near + (s / self.s_mid) * (self.u_mid - self.u_near)
        } else {
            let inv_span = 1.0 / self.u_mid - 1.0 / self.u_far;
            let inv = 1.0 / self.u_mid - (s - self.s_mid) / (1.0 - self.s_mid) * inv_span;
            1.0 / inv
        }
    }
}

/// Pixel-center camera ray through `(px, py)` using the refined ego pose:
/// `o = R t_c + t`, `d = R R_c K⁻¹ (px+0.5, py+0.5, 1)ᵀ`, normalized.
pub fn generate_rays<F: Real>(
    graph: &SceneGraph,
    store: &ParamStore<F>,
    sequence: usize,
    t: f64,
    camera: usize,
    pixels: &[(u32, u32)],
    sampler: &SamplerConfig,
) -> Result<Vec<Ray>, GraphError> {
    if camera >= graph.cameras.len() {
        return Err(GraphError::UnknownCamera(format!("#{camera}")));
    }
    let cam = &graph.cameras[camera];
    let ego = graph.refined_ego_pose(store, sequence, t)?;
    let rot = ego.rotation.mul_mat(&cam.extrinsic.rotation);
    let origin = ego.rotation.mul_vec(&cam.extrinsic.translation) + ego.translation;
    let mut rays = Vec::with_capacity(pixels.len());
    for &(px, py) in pixels {
        if cam.is_masked(px as usize, py as usize) {
            continue;
        }
        let p = Vec3::new(px as f64 + 0.5, py as f64 + 0.5, 1.0);
        let dir = rot.mul_vec(&cam.intrinsics_inv.mul_vec(&p)).normalized();
        rays.push(Ray {
            origin,
            dir,
            sequence,
            time: t,
            camera,
            pixel: (px, py),
            near: sampler.near,
            far: sampler.far,
        });
    }
    Ok(rays)
}

/// Slab test in the box-local frame; axis-parallel rays use infinite slab
/// bounds instead of a division-by-zero branch.
pub fn ray_box_intersect(ray: &Ray, object: usize, bbox: &BoundingBox3D) -> Option<BoxHit> {
    let rt = bbox.pose.rotation.transpose();
    let p = rt.mul_vec(&(ray.origin - bbox.pose.translation));
    let q = rt.mul_vec(&ray.dir);
    let mut t0 = ray.near;
    let mut t1 = ray.far;
    for a in 0..3 {
        let h = bbox.size.0[a] * 0.5;
        if q.0[a].abs() < 1e-12 {
            if p.0[a].abs() > h {
                return None;
            }
            continue;
        }
        let inv = 1.0 / q.0[a];
        let mut ta = (-h - p.0[a]) * inv;
        let mut tb = (h - p.0[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some(BoxHit {
        object,
        u_in: t0,
        u_out: t1,
        bbox: *bbox,
    })
}

/// Box hits for a ray against every active object of its frame.
pub fn ray_hits<F: Real>(
    graph: &SceneGraph,
    store: &ParamStore<F>,
    ray: &Ray,
) -> Vec<BoxHit> {
    graph
        .active_objects(store, ray.sequence, ray.time)
        .into_iter()
        .filter_map(|(o, bbox)| ray_box_intersect(ray, o, &bbox))
        .collect()
}

/// Inverse-transform sampling of a piecewise-constant histogram: returns
/// edges at the requested quantiles. `padding` is added to every bin mass
/// to keep the CDF strictly increasing; zero total mass degenerates to
/// uniform spacing.
pub fn invert_cdf(edges: &[f64], weights: &[f64], quantiles: &[f64], padding: f64) -> Vec<f64> {
    let n = weights.len();
    debug_assert_eq!(edges.len(), n + 1);
    let mut cum = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for w in weights {
        acc += w.max(0.0) + padding;
        cum.push(acc);
    }
    let total = acc;
    let mut out = Vec::with_capacity(quantiles.len());
    if total <= 0.0 {
        let (lo, hi) = (edges[0], edges[n]);
        for q in quantiles {
            out.push(lo + q * (hi - lo));
        }
        return out;
    }
    let mut bin = 0usize;
    for q in quantiles {
        let target = q.clamp(0.0, 1.0) * total;
        while bin + 1 < n && cum[bin + 1] < target {
            bin += 1;
        }
        // allow backward seeks for unsorted quantiles
        while bin > 0 && cum[bin] > target {
            bin -= 1;
        }
        let mass = cum[bin + 1] - cum[bin];
        let frac = if mass > 0.0 { (target - cum[bin]) / mass } else { 0.0 };
        out.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    out
}

/// Runs the composite sampler for a single ray and returns its quadrature
/// bins, hits, and per-bin ownership. Deterministic (midpoint) evaluation.
pub fn composite_sample<F: Real>(
    graph: &SceneGraph,
    fields: &FieldSet,
    store: &ParamStore<F>,
    ray: &Ray,
    sampler: &SamplerConfig,
) -> SampleSet {
    let mut tape = Tape::new(store);
    let settings = RenderSettings::frozen(*sampler);
    let nodes = render_rays(
        &mut tape,
        graph,
        fields,
        store,
        std::slice::from_ref(ray),
        &settings,
    );
    let spacing = Spacing::new(
        sampler.near,
        sampler.far,
        SceneNorm::from_bounds(&graph.scene_bounds).radius(),
    );
    let nf = nodes.n_final;
    let edges: Vec<f64> = nodes.edges_s[..=nf].iter().map(|s| spacing.u_of_s(*s)).collect();
    let hits = ray_hits(graph, store, ray);
    let mut owners = Vec::with_capacity(nf);
    let mut midpoints = Vec::with_capacity(nf);
    let mut widths = Vec::with_capacity(nf);
    for b in 0..nf {
        let mid = nodes.u_eval[b];
        midpoints.push(mid);
        widths.push(edges[b + 1] - edges[b]);
        owners.push(
            hits.iter()
                .enumerate()
                .filter(|(_, h)| mid >= h.u_in && mid <= h.u_out)
                .map(|(i, _)| i)
                .collect(),
        );
    }
    SampleSet {
        edges,
        midpoints,
        widths,
        owners,
        hits,
    }
}

/// Volumetric integration of one ray over externally supplied bins.
pub fn render_ray<F: Real>(
    graph: &SceneGraph,
    fields: &FieldSet,
    store: &ParamStore<F>,
    ray: &Ray,
    samples: &SampleSet,
) -> RenderOutput {
    let mut tape = Tape::new(store);
    let sampler = SamplerConfig {
        near: ray.near,
        far: ray.far,
        ..SamplerConfig::default()
    };
    let mut settings = RenderSettings::frozen(sampler);
    settings.preset_edges_u = Some(samples.edges.clone());
    let nodes = render_rays(
        &mut tape,
        graph,
        fields,
        store,
        std::slice::from_ref(ray),
        &settings,
    );
    let out = nodes.extract(&tape, 0);
    RenderOutput {
        color: out.color,
        expected_depth: out.expected_depth,
        weights: out.weights,
        accumulated_opacity: out.accumulated_opacity,
        dynamic_weight_fraction: out.dynamic_weight_fraction,
    }
}

/// Full-frame render in row tiles, parallel across the current rayon
/// pool. Masked pixels render black with a zero-depth sentinel. With an
/// override, the given `(sequence, time)` latent conditions the static
/// field, the proposal fields, and the dynamic color head everywhere.
pub fn render_image<F: Real>(
    graph: &SceneGraph,
    fields: &FieldSet,
    store: &ParamStore<F>,
    sequence: usize,
    t: f64,
    camera: usize,
    sampler: &SamplerConfig,
    latent_override: Option<(usize, f64)>,
) -> Result<(RgbImage, Vec<f32>), GraphError> {
    use rayon::prelude::*;
    if camera >= graph.cameras.len() {
        return Err(GraphError::UnknownCamera(format!("#{camera}")));
    }
    let cam = &graph.cameras[camera];
    let (w, h) = (cam.width, cam.height);
    graph.timestamp_index(sequence, t)?;
    let rows: Vec<usize> = (0..h).collect();
    let results: Vec<(Vec<f32>, Vec<f32>)> = rows
        .par_iter()
        .map(|y| {
            let pixels: Vec<(u32, u32)> = (0..w).map(|x| (x as u32, *y as u32)).collect();
            let rays = generate_rays(graph, store, sequence, t, camera, &pixels, sampler)
                .expect("validated ids");
            let mut color_row = vec![0.0f32; w * 3];
            let mut depth_row = vec![0.0f32; w];
            if !rays.is_empty() {
                let mut tape = Tape::new(store);
                let mut settings = RenderSettings::frozen(*sampler);
                settings.latent_override = latent_override;
                let nodes = render_rays(&mut tape, graph, fields, store, &rays, &settings);
                for (i, ray) in rays.iter().enumerate() {
                    let out = nodes.extract(&tape, i);
                    let x = ray.pixel.0 as usize;
                    for c in 0..3 {
                        color_row[x * 3 + c] = out.color[c].clamp(0.0, 1.0) as f32;
                    }
                    depth_row[x] = out.expected_depth as f32;
                }
            }
            (color_row, depth_row)
        })
        .collect();
    let mut img = RgbImage::new(w, h);
    let mut depth = vec![0.0f32; w * h];
    for (y, (c, d)) in results.into_iter().enumerate() {
        img.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&c);
        depth[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    Ok((img, depth))
}
