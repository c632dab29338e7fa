//! A small multi-branch network with hand-written backprop.
//!
//! The backbone is a per-cell dense layer (a 1x1 convolution) followed by
//! ReLU, optionally stacked twice. Its output `F` feeds one main head on
//! `GAP(F)` and up to five auxiliary heads on `GAP(F * M_i)`, where `M_i` are
//! Maskout masks. Heads are plain affine maps `o = W f + b` with `W` stored
//! `D x C_out` row-major.
//!
//! # Checkpoint layout
//!
//! ```text
//! "OENC1"                                  5 bytes
//! C_in, C_out, H, W, D, n_heads            u32 little-endian each
//! backbone layer 1: W (C_out x C_in), b    f64 little-endian, row-major
//! backbone layer 2: W (C_out x C_out), b   only for depth-2 backbones
//! head 0 .. n_heads-1: W (D x C_out), b
//! ```
//!
//! The backbone depth is not stored; it follows from the payload length.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskout::{apply_mask, global_average_pool, FeatureMap, Mask};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OENC1";
/// One main branch plus five Maskout branches.
pub const DEFAULT_HEADS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    /// Output width of every head.
    pub d: usize,
    pub n_heads: usize,
    /// Number of stacked per-cell layers in the backbone (1 or 2).
    pub depth: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c_in, self.c_out, self.height, self.width, self.d, self.n_heads];
        if all.contains(&0) {
            return Err(Error::InvalidConfig(format!("model dims must be positive: {self:?}")));
        }
        if !(1..=2).contains(&self.depth) {
            return Err(Error::InvalidConfig(format!(
                "backbone depth must be 1 or 2, got {}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b`, `W` stored `rows x cols` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Dense {
        Dense {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dense {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Dense {
            rows,
            cols,
            weight: (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub backbone: Vec<Dense>,
    /// Head 0 is the main branch; 1.. are auxiliary.
    pub heads: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<ModelParams> {
        dims.validate()?;
        let mut backbone = vec![Dense::zeros(dims.c_out, dims.c_in)];
        if dims.depth == 2 {
            backbone.push(Dense::zeros(dims.c_out, dims.c_out));
        }
        Ok(ModelParams {
            dims,
            backbone,
            heads: vec![Dense::zeros(dims.d, dims.c_out); dims.n_heads],
        })
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams::zeros(self.dims).expect("dims were validated at construction")
    }

    /// Every parameter block in checkpoint order.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.backbone
            .iter()
            .chain(&self.heads)
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), flat.len()));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= alpha;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(5 + 24 + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [d.c_in, d.c_out, d.height, d.width, d.d, d.n_heads] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in self.slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
        let bad = |reason: &str| Error::Format {
            path: "<checkpoint>".into(),
            reason: reason.to_string(),
        };
        if bytes.len() < 29 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing OENC1 magic"));
        }
        let header: Vec<usize> = bytes[5..29]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let payload = &bytes[29..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let (c_in, c_out, d, n_heads) = (header[0], header[1], header[4], header[5]);
        let heads_len = n_heads * (d * c_out + d);
        let layer1 = c_out * c_in + c_out;
        let layer2 = c_out * c_out + c_out;
        let n = payload.len() / 8;
        let depth = if n == layer1 + heads_len {
            1
        } else if n == layer1 + layer2 + heads_len {
            2
        } else {
            return Err(bad("payload length does not match header dims"));
        };
        let dims = ModelDims {
            c_in,
            c_out,
            height: header[2],
            width: header[3],
            d,
            n_heads,
            depth,
        };
        let mut params = ModelParams::zeros(dims).map_err(|e| bad(&e.to_string()))?;
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.set_flat(&flat)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelParams::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(seed: u64, dims: ModelDims) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = vec![Dense::glorot(dims.c_out, dims.c_in, &mut rng)];
    if dims.depth == 2 {
        backbone.push(Dense::glorot(dims.c_out, dims.c_out, &mut rng));
    }
    let heads = (0..dims.n_heads)
        .map(|_| Dense::glorot(dims.d, dims.c_out, &mut rng))
        .collect();
    Ok(ModelParams {
        dims,
        backbone,
        heads,
    })
}

/// Copies head `from` onto head `to`.
pub fn clone_head(params: &mut ModelParams, from: usize, to: usize) -> Result<()> {
    let n = params.heads.len();
    if from >= n || to >= n {
        return Err(Error::Contract(format!(
            "head index out of range: {from} -> {to} with {n} heads"
        )));
    }
    if from != to {
        params.heads[to] = params.heads[from].clone();
    }
    Ok(())
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Inputs to each backbone layer, channel-major over cells.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of each backbone layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// Backbone output `F`.
    pub features: FeatureMap,
    /// Mask of each active branch (`None` for the unmasked main branch).
    pub masks: Vec<Option<Mask>>,
    /// Pooled features `f` for each active branch.
    pub pooled: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

fn check_input(params: &ModelParams, x: &FeatureMap) -> Result<()> {
    let d = &params.dims;
    if x.channels() != d.c_in || x.height() != d.height || x.width() != d.width {
        return Err(Error::shape(
            format!("{}x{}x{} input", d.c_in, d.height, d.width),
            format!("{}x{}x{}", x.channels(), x.height(), x.width()),
        ));
    }
    Ok(())
}

/// Runs the backbone and every active head. With `aux_active` the returned
/// logits hold the main branch followed by one entry per mask.
pub fn forward(
    params: &ModelParams,
    x: &FeatureMap,
    masks: &[Mask],
    aux_active: bool,
) -> Result<(Vec<Vec<f64>>, ForwardTrace)> {
    check_input(params, x)?;
    let dims = params.dims;
    let cells = dims.height * dims.width;
    let active_masks: &[Mask] = if aux_active { masks } else { &[] };
    if active_masks.len() + 1 > params.heads.len() {
        return Err(Error::Contract(format!(
            "{} masks but only {} auxiliary heads",
            active_masks.len(),
            params.heads.len() - 1
        )));
    }
    for m in active_masks {
        if m.height() != dims.height || m.width() != dims.width {
            return Err(Error::shape(
                format!("{}x{} mask", dims.height, dims.width),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
    }

    let mut layer_inputs = Vec::with_capacity(params.backbone.len());
    let mut pre_activations = Vec::with_capacity(params.backbone.len());
    let mut act = x.data().to_vec();
    for layer in &params.backbone {
        let mut z = vec![0.0; layer.rows * cells];
        for (o, zrow) in z.chunks_exact_mut(cells).enumerate() {
            zrow.fill(layer.bias[o]);
            let wrow = &layer.weight[o * layer.cols..(o + 1) * layer.cols];
            for (i, &w) in wrow.iter().enumerate() {
                let xin = &act[i * cells..(i + 1) * cells];
                for (zv, xv) in zrow.iter_mut().zip(xin) {
                    *zv += w * xv;
                }
            }
        }
        let next: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        layer_inputs.push(std::mem::replace(&mut act, next));
        pre_activations.push(z);
    }
    let features = FeatureMap::new(dims.c_out, dims.height, dims.width, act)?;

    let mut branch_masks: Vec<Option<Mask>> = vec![None];
    branch_masks.extend(active_masks.iter().cloned().map(Some));
    let mut pooled = Vec::with_capacity(branch_masks.len());
    let mut logits = Vec::with_capacity(branch_masks.len());
    for (b, mask) in branch_masks.iter().enumerate() {
        let f = match mask {
            None => global_average_pool(&features),
            Some(m) => global_average_pool(&apply_mask(&features, m)?),
        };
        logits.push(params.heads[b].apply(&f));
        pooled.push(f);
    }
    let trace = ForwardTrace {
        layer_inputs,
        pre_activations,
        features,
        masks: branch_masks,
        pooled,
        logits: logits.clone(),
    };
    Ok((logits, trace))
}

/// Gradients of a scalar loss w.r.t. every parameter, given the loss
/// gradients w.r.t. each active branch's logits.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_logits: &[Vec<f64>],
) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, grad_logits, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_logits: &[Vec<f64>],
    grads: &mut ModelParams,
) -> Result<()> {
    let dims = params.dims;
    if grads.dims != dims {
        return Err(Error::Contract("gradient buffer dims differ from params".into()));
    }
    if grad_logits.len() != trace.logits.len() {
        return Err(Error::shape(
            format!("{} branch gradients", trace.logits.len()),
            grad_logits.len(),
        ));
    }
    if trace.layer_inputs.len() != params.backbone.len()
        || trace.features.channels() != dims.c_out
        || trace.features.cells() != dims.height * dims.width
    {
        return Err(Error::Contract("trace does not match params".into()));
    }
    let cells = dims.height * dims.width;
    let inv_cells = 1.0 / cells as f64;

    // dL/dF accumulated over branches.
    let mut d_feat = vec![0.0; dims.c_out * cells];
    for (b, g) in grad_logits.iter().enumerate() {
        if g.len() != dims.d {
            return Err(Error::shape(dims.d, g.len()));
        }
        let head = &params.heads[b];
        let gh = &mut grads.heads[b];
        let f = &trace.pooled[b];
        let mut d_pooled = vec![0.0; dims.c_out];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            gh.bias[r] += gr;
            let row = r * dims.c_out;
            for c in 0..dims.c_out {
                gh.weight[row + c] += gr * f[c];
                d_pooled[c] += gr * head.weight[row + c];
            }
        }
        for (c, &dp) in d_pooled.iter().enumerate() {
            let dst = &mut d_feat[c * cells..(c + 1) * cells];
            let v = dp * inv_cells;
            match &trace.masks[b] {
                None => dst.iter_mut().for_each(|d| *d += v),
                Some(m) => {
                    for (d, &mv) in dst.iter_mut().zip(m.grid()) {
                        if mv != 0 {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    let mut upstream = d_feat;
    for (l, layer) in params.backbone.iter().enumerate().rev() {
        let z = &trace.pre_activations[l];
        let input = &trace.layer_inputs[l];
        for (u, &zv) in upstream.iter_mut().zip(z) {
            if zv <= 0.0 {
                *u = 0.0;
            }
        }
        let gl = &mut grads.backbone[l];
        let mut d_input = if l > 0 {
            vec![0.0; layer.cols * cells]
        } else {
            Vec::new()
        };
        for o in 0..layer.rows {
            let dz = &upstream[o * cells..(o + 1) * cells];
            gl.bias[o] += dz.iter().sum::<f64>();
            for i in 0..layer.cols {
                let xin = &input[i * cells..(i + 1) * cells];
                gl.weight[o * layer.cols + i] += dz.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                if l > 0 {
                    let w = layer.weight[o * layer.cols + i];
                    for (dx, dzv) in d_input[i * cells..(i + 1) * cells].iter_mut().zip(dz) {
                        *dx += w * dzv;
                    }
                }
            }
        }
        upstream = d_input;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskout::default_landmark_masks;

    fn dims(depth: usize) -> ModelDims {
        ModelDims {
            c_in: 3,
            c_out: 5,
            height: 7,
            width: 7,
            d: 4,
            n_heads: 6,
            depth,
        }
    }

    fn input(seed: u64, d: &ModelDims) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..d.c_in * d.height * d.width)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        FeatureMap::new(d.c_in, d.height, d.width, data).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let d = ModelDims {
            c_in: 4,
            c_out: 8,
            height: 7,
            width: 7,
            d: 10,
            n_heads: 6,
            depth: 1,
        };
        let p = init_params(7, d).unwrap();
        assert_eq!(p.backbone[0].weight.len(), 32);
        assert_eq!(p.backbone[0].bias.len(), 8);
        for h in &p.heads {
            assert_eq!((h.weight.len(), h.bias.len()), (80, 10));
        }
        assert_eq!(p, init_params(7, d).unwrap());
        assert_ne!(p, init_params(8, d).unwrap());
    }

    #[test]
    fn zero_backbone_gives_head_biases() {
        let d = dims(1);
        let mut p = init_params(1, d).unwrap();
        p.backbone[0].weight.fill(0.0);
        for (i, h) in p.heads.iter_mut().enumerate() {
            h.bias = vec![i as f64 + 0.5; d.d];
        }
        let masks = default_landmark_masks(7, 7, 2).unwrap();
        let (logits, _) = forward(&p, &input(3, &d), &masks, true).unwrap();
        assert_eq!(logits.len(), 6);
        for (i, l) in logits.iter().enumerate() {
            assert_eq!(l, &vec![i as f64 + 0.5; d.d]);
        }
    }

    #[test]
    fn identity_backbone_pools_input() {
        let d = ModelDims {
            c_in: 3,
            c_out: 3,
            ..dims(1)
        };
        let mut p = init_params(1, d).unwrap();
        p.backbone[0].weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = input(5, &d);
        let x = FeatureMap::new(3, 7, 7, x.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        let (_, trace) = forward(&p, &x, &[], false).unwrap();
        let gap = global_average_pool(&x);
        for (a, b) in trace.pooled[0].iter().zip(&gap) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_repeatable() {
        let d = dims(2);
        let p = init_params(11, d).unwrap();
        let masks = default_landmark_masks(7, 7, 2).unwrap();
        let x = input(4, &d);
        let (a, _) = forward(&p, &x, &masks, true).unwrap();
        let (b, _) = forward(&p, &x, &masks, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aux_heads_inert_when_inactive() {
        let d = dims(1);
        let mut p = init_params(2, d).unwrap();
        let masks = default_landmark_masks(7, 7, 2).unwrap();
        let x = input(9, &d);
        let (a, _) = forward(&p, &x, &masks, false).unwrap();
        for h in p.heads.iter_mut().skip(1) {
            h.weight.iter_mut().for_each(|w| *w += 3.0);
        }
        let (b, _) = forward(&p, &x, &masks, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let d = dims(2);
        let p = init_params(3, d).unwrap();
        let masks = default_landmark_masks(7, 7, 2).unwrap();
        let (logits, trace) = forward(&p, &input(1, &d), &masks, true).unwrap();
        let zeros: Vec<Vec<f64>> = logits.iter().map(|l| vec![0.0; l.len()]).collect();
        let g = backward(&p, &trace, &zeros).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_gradient_is_outer_product() {
        let d = ModelDims {
            height: 1,
            width: 1,
            n_heads: 1,
            ..dims(1)
        };
        let p = init_params(3, d).unwrap();
        let x = input(2, &d);
        let (_, trace) = forward(&p, &x, &[], false).unwrap();
        let up = vec![vec![0.5, -1.0, 2.0, 0.25]];
        let g = backward(&p, &trace, &up).unwrap();
        let f = &trace.pooled[0];
        for r in 0..d.d {
            for c in 0..d.c_out {
                assert_eq!(g.heads[0].weight[r * d.c_out + c], up[0][r] * f[c]);
            }
        }
        assert_eq!(g.heads[0].bias, up[0]);
    }

    #[test]
    fn dead_relu_cells_get_no_backbone_gradient() {
        let d = ModelDims {
            n_heads: 1,
            ..dims(1)
        };
        let mut p = init_params(3, d).unwrap();
        // every pre-activation negative
        p.backbone[0].weight.fill(0.0);
        p.backbone[0].bias.fill(-1.0);
        let (_, trace) = forward(&p, &input(2, &d), &[], false).unwrap();
        let g = backward(&p, &trace, &[vec![1.0; d.d]]).unwrap();
        assert!(g.backbone[0].weight.iter().all(|&v| v == 0.0));
        assert!(g.backbone[0].bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clone_head_copies_without_aliasing() {
        let mut p = init_params(5, dims(1)).unwrap();
        clone_head(&mut p, 0, 1).unwrap();
        assert_eq!(p.heads[0], p.heads[1]);
        p.heads[1].weight[0] += 1.0;
        assert_ne!(p.heads[0], p.heads[1]);
        assert!(clone_head(&mut p, 0, 6).is_err());
        for i in 1..6 {
            clone_head(&mut p, 0, i).unwrap();
        }
        assert!(p.heads.iter().all(|h| *h == p.heads[0]));
    }

    #[test]
    fn checkpoint_round_trip() {
        for depth in [1, 2] {
            let p = init_params(9, dims(depth)).unwrap();
            let bytes = p.to_bytes();
            assert_eq!(&bytes[..5], b"OENC1");
            assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
            let back = ModelParams::from_bytes(&bytes).unwrap();
            assert_eq!(back.dims.depth, depth);
            assert_eq!(back.to_bytes(), bytes);
        }
        assert!(ModelParams::from_bytes(b"OENC2xxxxxxxxxxxxxxxxxxxxxxxxxxxx").is_err());
        let mut truncated = init_params(9, dims(1)).unwrap().to_bytes();
        truncated.truncate(truncated.len() - 8);
        assert!(ModelParams::from_bytes(&truncated).is_err());
    }

    #[test]
    fn shape_errors() {
        let p = init_params(1, dims(1)).unwrap();
        let wrong = FeatureMap::zeros(2, 7, 7);
        assert!(forward(&p, &wrong, &[], false).is_err());
        let masks = default_landmark_masks(6, 6, 2).unwrap();
        assert!(forward(&p, &input(1, &p.dims), &masks, true).is_err());
        let (_, trace) = forward(&p, &input(1, &p.dims), &[], false).unwrap();
        assert!(backward(&p, &trace, &[vec![0.0; 3]]).is_err());
        assert!(backward(&p, &trace, &[vec![0.0; 4], vec![0.0; 4]]).is_err());
    }
}
