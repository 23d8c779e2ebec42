//! Cross-attention alignment of a pillar feature with its camera features.
//!
//! For a pillar feature `l` and camera features `c_1..c_N`:
//!
//! ```text
//! q   = Wq l + bq          k_i = Wk c_i + bk       v_i = Wv c_i + bv
//! a_i = s (q . k_i)        w   = softmax(a)        o   = sum_i w_i v_i
//! m   = Wmlp o + bmlp      out = Wsq [l; m] + bsq
//! ```
//!
//! `s` is 1, or `1/sqrt(embed_dim)` when `scale_affinity` is set. With no
//! camera features `m = 0` and only the squeeze layer runs. The backward pass
//! below is written by hand and checked against central differences by
//! [`align_grad_check`].

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{inverse_aug, AugRecord};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, project_to_image, CameraModel, FeatureMap, Vec3};
use crate::linalg::{dot, uniform_vec, Matrix};

pub const EMBED_DIM: usize = 256;
pub const MLP_DIM: usize = 192;
pub const DROPOUT_RATE: f64 = 0.3;
pub const DEFAULT_MAX_N: usize = 32;

/// Where the dropout mask acts on the attention row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    /// Zero entries of the normalized weights and rescale by `1/(1-rate)`.
    #[default]
    PostSoftmax,
    /// Exclude entries from the softmax (affinity set to minus infinity).
    PreSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    pub w_mlp: Matrix,
    pub b_mlp: Vec<f64>,
    pub w_squeeze: Matrix,
    pub b_squeeze: Vec<f64>,
    pub dropout_rate: f64,
    #[serde(default)]
    pub scale_affinity: bool,
    #[serde(default)]
    pub dropout_placement: DropoutPlacement,
}

const PARAM_BLOCKS: [&str; 10] = [
    "w_q",
    "b_q",
    "w_k",
    "b_k",
    "w_v",
    "b_v",
    "w_mlp",
    "b_mlp",
    "w_squeeze",
    "b_squeeze",
];

impl AlignParams {
    /// Random weights with the default 256-wide embeddings and 192-wide MLP.
    pub fn random<R: Rng + ?Sized>(lidar_dim: usize, camera_dim: usize, rng: &mut R) -> Self {
        Self::random_with_dims(lidar_dim, camera_dim, EMBED_DIM, MLP_DIM, rng)
    }

    pub fn random_with_dims<R: Rng + ?Sized>(
        lidar_dim: usize,
        camera_dim: usize,
        embed_dim: usize,
        mlp_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bias = |n: usize, fan_in: usize, rng: &mut R| {
            uniform_vec(n, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
        };
        Self {
            w_q: Matrix::glorot(embed_dim, lidar_dim, rng),
            b_q: bias(embed_dim, lidar_dim, rng),
            w_k: Matrix::glorot(embed_dim, camera_dim, rng),
            b_k: bias(embed_dim, camera_dim, rng),
            w_v: Matrix::glorot(embed_dim, camera_dim, rng),
            b_v: bias(embed_dim, camera_dim, rng),
            w_mlp: Matrix::glorot(mlp_dim, embed_dim, rng),
            b_mlp: bias(mlp_dim, embed_dim, rng),
            w_squeeze: Matrix::glorot(lidar_dim, lidar_dim + mlp_dim, rng),
            b_squeeze: bias(lidar_dim, lidar_dim + mlp_dim, rng),
            dropout_rate: DROPOUT_RATE,
            scale_affinity: false,
            dropout_placement: DropoutPlacement::PostSoftmax,
        }
    }

    pub fn lidar_dim(&self) -> usize {
        self.w_q.cols
    }

    pub fn camera_dim(&self) -> usize {
        self.w_k.cols
    }

    pub fn embed_dim(&self) -> usize {
        self.w_q.rows
    }

    pub fn mlp_dim(&self) -> usize {
        self.w_mlp.rows
    }

    fn affinity_scale(&self) -> f64 {
        if self.scale_affinity {
            1.0 / (self.embed_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dl, dc, e, m) = (
            self.lidar_dim(),
            self.camera_dim(),
            self.embed_dim(),
            self.mlp_dim(),
        );
        let shapes = [
            ("w_q", &self.w_q, e, dl),
            ("w_k", &self.w_k, e, dc),
            ("w_v", &self.w_v, e, dc),
            ("w_mlp", &self.w_mlp, m, e),
            ("w_squeeze", &self.w_squeeze, dl, dl + m),
        ];
        for (name, w, rows, cols) in shapes {
            if w.rows != rows || w.cols != cols || w.data.len() != rows * cols {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    w.rows, w.cols
                )));
            }
        }
        let biases = [
            ("b_q", self.b_q.len(), e),
            ("b_k", self.b_k.len(), e),
            ("b_v", self.b_v.len(), e),
            ("b_mlp", self.b_mlp.len(), m),
            ("b_squeeze", self.b_squeeze.len(), dl),
        ];
        for (name, got, want) in biases {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout_rate outside [0, 1)".into()));
        }
        Ok(())
    }

    fn blocks(&self) -> [&[f64]; 10] {
        [
            &self.w_q.data,
            &self.b_q,
            &self.w_k.data,
            &self.b_k,
            &self.w_v.data,
            &self.b_v,
            &self.w_mlp.data,
            &self.b_mlp,
            &self.w_squeeze.data,
            &self.b_squeeze,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 10] {
        [
            &mut self.w_q.data,
            &mut self.b_q,
            &mut self.w_k.data,
            &mut self.b_k,
            &mut self.w_v.data,
            &mut self.b_v,
            &mut self.w_mlp.data,
            &mut self.b_mlp,
            &mut self.w_squeeze.data,
            &mut self.b_squeeze,
        ]
    }
}

/// Camera features gathered for one pillar and the pixels they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraFeatureSet {
    pub features: Vec<Vec<f64>>,
    pub pixels: Vec<(f64, f64)>,
}

impl CameraFeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn from_features(features: Vec<Vec<f64>>) -> Self {
        let pixels = vec![(0.0, 0.0); features.len()];
        Self { features, pixels }
    }
}

/// Keep flags over the attention row with inverted-dropout scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn new(keep: Vec<bool>, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig("dropout rate outside [0, 1)".into()));
        }
        Ok(Self {
            keep,
            scale: 1.0 / (1.0 - rate),
        })
    }

    pub fn sample<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Self> {
        let keep = (0..n).map(|_| rng.gen::<f64>() >= rate).collect();
        Self::new(keep, rate)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTrace {
    pub query: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub affinities: Vec<f64>,
    /// Softmax weights before dropout.
    pub weights: Vec<f64>,
    /// Weights actually used to mix the values.
    pub mixing: Vec<f64>,
    pub attended: Vec<f64>,
    pub mlp_out: Vec<f64>,
    pub output: Vec<f64>,
}

/// Numerically stable softmax over the entries where `active` is true;
/// inactive entries get weight 0.
pub fn masked_softmax(logits: &[f64], active: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| active(i))
        .map(|(_, &a)| a)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let exps: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &a)| if active(i) { (a - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    masked_softmax(logits, |_| true)
}

enum Mixing<'a> {
    Attention(Option<&'a DropoutMask>),
    Uniform,
}

fn check_inputs(
    lidar: &[f64],
    cams: &CameraFeatureSet,
    params: &AlignParams,
    mask: Option<&DropoutMask>,
) -> Result<()> {
    params.validate()?;
    if lidar.len() != params.lidar_dim() {
        return Err(Error::DimensionMismatch(format!(
            "lidar feature has {} channels, params expect {}",
            lidar.len(),
            params.lidar_dim()
        )));
    }
    if let Some(bad) = cams
        .features
        .iter()
        .position(|c| c.len() != params.camera_dim())
    {
        return Err(Error::DimensionMismatch(format!(
            "camera feature {bad} has {} channels, params expect {}",
            cams.features[bad].len(),
            params.camera_dim()
        )));
    }
    if let Some(m) = mask {
        if m.keep.len() != cams.len() {
            return Err(Error::DimensionMismatch(format!(
                "dropout mask covers {} entries for {} camera features",
                m.keep.len(),
                cams.len()
            )));
        }
    }
    Ok(())
}

fn forward(
    lidar: &[f64],
    cams: &CameraFeatureSet,
    params: &AlignParams,
    mix: Mixing,
) -> AlignTrace {
    let n = cams.len();
    let query = params.w_q.affine(lidar, &params.b_q);
    let keys: Vec<Vec<f64>> = cams
        .features
        .iter()
        .map(|c| params.w_k.affine(c, &params.b_k))
        .collect();
    let values: Vec<Vec<f64>> = cams
        .features
        .iter()
        .map(|c| params.w_v.affine(c, &params.b_v))
        .collect();
    let s = params.affinity_scale();
    let affinities: Vec<f64> = keys.iter().map(|k| s * dot(&query, k)).collect();

    let (weights, mixing) = match mix {
        Mixing::Uniform => {
            let w = vec![1.0 / n.max(1) as f64; n];
            (w.clone(), w)
        }
        Mixing::Attention(None) => {
            let w = softmax(&affinities);
            (w.clone(), w)
        }
        Mixing::Attention(Some(mask)) => match params.dropout_placement {
            DropoutPlacement::PostSoftmax => {
                let w = softmax(&affinities);
                let mixed = w
                    .iter()
                    .zip(&mask.keep)
                    .map(|(&wi, &k)| if k { wi * mask.scale } else { 0.0 })
                    .collect();
                (w, mixed)
            }
            DropoutPlacement::PreSoftmax => {
                let w = masked_softmax(&affinities, |i| mask.keep[i]);
                (w.clone(), w)
            }
        },
    };

    let embed = params.embed_dim();
    let mut attended = vec![0.0; embed];
    for (v, &w) in values.iter().zip(&mixing) {
        for (o, vi) in attended.iter_mut().zip(v) {
            *o += w * vi;
        }
    }
    let mlp_out = if n == 0 {
        vec![0.0; params.mlp_dim()]
    } else {
        params.w_mlp.affine(&attended, &params.b_mlp)
    };
    let concat: Vec<f64> = lidar.iter().chain(&mlp_out).copied().collect();
    let output = params.w_squeeze.affine(&concat, &params.b_squeeze);

    AlignTrace {
        query,
        keys,
        values,
        affinities,
        weights,
        mixing,
        attended,
        mlp_out,
        output,
    }
}

/// Attention-weighted fusion; returns the full forward trace.
pub fn learnable_align_trace(
    lidar: &[f64],
    cams: &CameraFeatureSet,
    params: &AlignParams,
    mask: Option<&DropoutMask>,
) -> Result<AlignTrace> {
    check_inputs(lidar, cams, params, mask)?;
    Ok(forward(lidar, cams, params, Mixing::Attention(mask)))
}

pub fn learnable_align(
    lidar: &[f64],
    cams: &CameraFeatureSet,
    params: &AlignParams,
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>> {
    Ok(learnable_align_trace(lidar, cams, params, mask)?.output)
}

/// Same path as [`learnable_align`] with uniform `1/N` weights.
pub fn mean_pool_align(
    lidar: &[f64],
    cams: &CameraFeatureSet,
    params: &AlignParams,
) -> Result<Vec<f64>> {
    check_inputs(lidar, cams, params, None)?;
    Ok(forward(lidar, cams, params, Mixing::Uniform).output)
}

/// Gradients with the same layout as [`AlignParams`] plus input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignGrads {
    pub params: AlignParams,
    pub lidar: Vec<f64>,
    pub cams: Vec<Vec<f64>>,
}

/// Backpropagate `grad_output` (dLoss/dOutput) through [`learnable_align`].
pub fn learnable_align_backward(
    lidar: &[f64],
    cams: &CameraFeatureSet,
    params: &AlignParams,
    mask: Option<&DropoutMask>,
    grad_output: &[f64],
) -> Result<AlignGrads> {
    check_inputs(lidar, cams, params, mask)?;
    if grad_output.len() != params.lidar_dim() {
        return Err(Error::DimensionMismatch(format!(
            "output gradient has {} entries, expected {}",
            grad_output.len(),
            params.lidar_dim()
        )));
    }
    let trace = forward(lidar, cams, params, Mixing::Attention(mask));
    let n = cams.len();
    let dl = params.lidar_dim();
    let (e, m) = (params.embed_dim(), params.mlp_dim());

    let mut g = AlignParams {
        w_q: Matrix::zeros(e, dl),
        b_q: vec![0.0; e],
        w_k: Matrix::zeros(e, params.camera_dim()),
        b_k: vec![0.0; e],
        w_v: Matrix::zeros(e, params.camera_dim()),
        b_v: vec![0.0; e],
        w_mlp: Matrix::zeros(m, e),
        b_mlp: vec![0.0; m],
        w_squeeze: Matrix::zeros(dl, dl + m),
        b_squeeze: vec![0.0; dl],
        dropout_rate: params.dropout_rate,
        scale_affinity: params.scale_affinity,
        dropout_placement: params.dropout_placement,
    };

    // out = Wsq [l; m] + bsq
    let concat: Vec<f64> = lidar.iter().chain(&trace.mlp_out).copied().collect();
    g.w_squeeze.add_outer(grad_output, &concat, 1.0);
    g.b_squeeze.copy_from_slice(grad_output);
    let g_concat = params.w_squeeze.transpose_mul(grad_output);
    let mut g_lidar = g_concat[..dl].to_vec();
    let mut g_cams = vec![vec![0.0; params.camera_dim()]; n];

    if n > 0 {
        let g_mlp = &g_concat[dl..];
        // m = Wmlp o + bmlp
        g.w_mlp.add_outer(g_mlp, &trace.attended, 1.0);
        g.b_mlp.copy_from_slice(g_mlp);
        let g_attended = params.w_mlp.transpose_mul(g_mlp);

        // o = sum_i mix_i v_i
        let g_mix: Vec<f64> = trace.values.iter().map(|v| dot(v, &g_attended)).collect();
        let g_values: Vec<Vec<f64>> = trace
            .mixing
            .iter()
            .map(|&w| g_attended.iter().map(|g| g * w).collect())
            .collect();

        // Back through dropout to the softmax output.
        let g_weights: Vec<f64> = match (mask, params.dropout_placement) {
            (Some(mask), DropoutPlacement::PostSoftmax) => g_mix
                .iter()
                .zip(&mask.keep)
                .map(|(&gm, &k)| if k { gm * mask.scale } else { 0.0 })
                .collect(),
            _ => g_mix,
        };

        // Softmax Jacobian: g_a_i = w_i (g_w_i - sum_j w_j g_w_j). Entries
        // excluded by a pre-softmax mask have w_i = 0 and get no gradient.
        let w = &trace.weights;
        let inner: f64 = w.iter().zip(&g_weights).map(|(a, b)| a * b).sum();
        let g_aff: Vec<f64> = w
            .iter()
            .zip(&g_weights)
            .map(|(&wi, &gw)| wi * (gw - inner))
            .collect();

        // a_i = s q . k_i
        let s = params.affinity_scale();
        let mut g_query = vec![0.0; e];
        for ((k, &ga), c) in trace.keys.iter().zip(&g_aff).zip(&cams.features) {
            for (gq, ki) in g_query.iter_mut().zip(k) {
                *gq += s * ga * ki;
            }
            let g_key: Vec<f64> = trace.query.iter().map(|q| s * ga * q).collect();
            g.w_k.add_outer(&g_key, c, 1.0);
            g.b_k.iter_mut().zip(&g_key).for_each(|(b, gk)| *b += gk);
        }
        for (i, c) in cams.features.iter().enumerate() {
            let g_key: Vec<f64> = trace.query.iter().map(|q| s * g_aff[i] * q).collect();
            let from_key = params.w_k.transpose_mul(&g_key);
            let from_value = params.w_v.transpose_mul(&g_values[i]);
            g.w_v.add_outer(&g_values[i], c, 1.0);
            g.b_v
                .iter_mut()
                .zip(&g_values[i])
                .for_each(|(b, gv)| *b += gv);
            for ((gc, a), b) in g_cams[i].iter_mut().zip(from_key).zip(from_value) {
                *gc = a + b;
            }
        }

        // q = Wq l + bq
        g.w_q.add_outer(&g_query, lidar, 1.0);
        g.b_q.copy_from_slice(&g_query);
        for (gl, extra) in g_lidar.iter_mut().zip(params.w_q.transpose_mul(&g_query)) {
            *gl += extra;
        }
    }

    Ok(AlignGrads {
        params: g,
        lidar: g_lidar,
        cams: g_cams,
    })
}

/// Worst disagreement found by [`align_grad_check`] and where it occurred.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_block: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn summed_output(lidar: &[f64], cams: &CameraFeatureSet, params: &AlignParams) -> f64 {
    forward(lidar, cams, params, Mixing::Attention(None))
        .output
        .iter()
        .sum()
}

/// Compare the analytic gradient of `sum(learnable_align(..))` against central
/// differences for every parameter and both inputs. Returns the max of
/// `|g_analytic - g_fd| / max(1, |g_fd|)`.
pub fn align_grad_check(
    params: &AlignParams,
    lidar: &[f64],
    cams: &CameraFeatureSet,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let ones = vec![1.0; params.lidar_dim()];
    let grads = learnable_align_backward(lidar, cams, params, None, &ones)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_block: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut record = |block: &str, idx: usize, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_block.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_block = block.to_string();
            report.worst_index = idx;
        }
    };

    let mut probe = params.clone();
    let analytic_blocks = grads.params.blocks();
    for (b, (name, analytic)) in PARAM_BLOCKS.iter().zip(&analytic_blocks).enumerate() {
        for (i, &g) in analytic.iter().enumerate() {
            let original = probe.blocks_mut()[b][i];
            probe.blocks_mut()[b][i] = original + eps;
            let plus = summed_output(lidar, cams, &probe);
            probe.blocks_mut()[b][i] = original - eps;
            let minus = summed_output(lidar, cams, &probe);
            probe.blocks_mut()[b][i] = original;
            record(name, i, g, (plus - minus) / (2.0 * eps));
        }
    }

    let mut l = lidar.to_vec();
    for i in 0..l.len() {
        let original = l[i];
        l[i] = original + eps;
        let plus = summed_output(&l, cams, params);
        l[i] = original - eps;
        let minus = summed_output(&l, cams, params);
        l[i] = original;
        record("lidar", i, grads.lidar[i], (plus - minus) / (2.0 * eps));
    }

    let mut c = cams.clone();
    let dc = params.camera_dim();
    for j in 0..c.len() {
        for i in 0..dc {
            let original = c.features[j][i];
            c.features[j][i] = original + eps;
            let plus = summed_output(lidar, &c, params);
            c.features[j][i] = original - eps;
            let minus = summed_output(lidar, &c, params);
            c.features[j][i] = original;
            record(
                "camera",
                j * dc + i,
                grads.cams[j][i],
                (plus - minus) / (2.0 * eps),
            );
        }
    }
    Ok(report)
}

/// Seed for a pillar's subsampling RNG.
fn pillar_seed(pillar_index: usize) -> u64 {
    (pillar_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED
}

/// Collect the camera features a pillar's key points project onto.
///
/// Key points are given in the augmented frame and mapped back through
/// `record` before projection. Samples falling in an already-used feature-map
/// cell are skipped; if more than `max_n` remain, a uniform subset seeded by
/// `pillar_index` is kept in original order.
pub fn gather_camera_features(
    key_points: &[Vec3],
    record: &AugRecord,
    cam: &CameraModel,
    fm: &FeatureMap,
    max_n: usize,
    pillar_index: usize,
) -> Result<CameraFeatureSet> {
    if max_n == 0 {
        return Err(Error::InvalidConfig("max_n must be at least 1".into()));
    }
    let (fm_w, fm_h) = fm.pixel_extent();
    let mut seen = HashSet::new();
    let mut set = CameraFeatureSet::default();
    for &p in key_points {
        let original = inverse_aug(p, record);
        let Some((u, v)) = project_to_image(original, cam) else {
            continue;
        };
        // The feature map may cover less than the full image.
        if u >= fm_w || v >= fm_h {
            continue;
        }
        if !seen.insert(fm.cell_of(u, v)) {
            continue;
        }
        set.features.push(bilinear_sample(fm, u, v)?);
        set.pixels.push((u, v));
    }
    if set.len() > max_n {
        let mut rng = ChaCha8Rng::seed_from_u64(pillar_seed(pillar_index));
        let mut keep = index::sample(&mut rng, set.len(), max_n).into_vec();
        keep.sort_unstable();
        set = CameraFeatureSet {
            features: keep.iter().map(|&i| set.features[i].clone()).collect(),
            pixels: keep.iter().map(|&i| set.pixels[i]).collect(),
        };
    }
    Ok(set)
}
