use super::heads::head_logits;
use super::layers::{
    adaptive_adjacency, dilated_block, effective_adjacency, fuse, gcn_layer, spatial_recurrence,
};
use super::params::BoundParams;
use super::{ModelConfig, ModelParams};
use crate::autograd::{softmax_in_place, Tape, Var};
use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::geometry::GeometrySequence;
use crate::tensor::Matrix;

/// Model-ready tensors for one clip. Geometry does not depend on learned
/// parameters, so it is computed once per clip.
#[derive(Debug, Clone)]
pub struct ClipInputs {
    pub num_frames: usize,
    pub num_objects: usize,
    /// `[T*N, F]`
    pub obj_feat: Matrix,
    /// `[T, F]`
    pub frame_feat: Matrix,
    /// `[T*N, N]` `exp(-D_ij)` on present pairs, else 0.
    pub exp_neg_dist: Matrix,
    /// `[T*N, N]` transformed relative velocity on present pairs, else 0.
    pub velocity: Matrix,
    /// `[T*N, N]` 1 where both slots are present.
    pub pair_mask: Matrix,
    /// `[T*N]` masked-mean pooling weights.
    pub pool_weights: Vec<f64>,
}

impl ClipInputs {
    pub fn from_bundle(bundle: &FeatureBundle, cfg: &ModelConfig) -> Result<Self> {
        bundle.check_shapes()?;
        if bundle.num_objects != cfg.num_objects || bundle.feature_dim != cfg.feature_dim {
            return Err(Error::Shape(format!(
                "bundle has {} slots x {} features, model expects {} x {}",
                bundle.num_objects, bundle.feature_dim, cfg.num_objects, cfg.feature_dim
            )));
        }
        if bundle.num_frames == 0 {
            return Err(Error::Shape("bundle has no frames".into()));
        }
        let (t, n, f) = (bundle.num_frames, bundle.num_objects, bundle.feature_dim);
        let geo = GeometrySequence::from_bundle(bundle, &cfg.geometry);
        let mask: Vec<f64> = geo
            .pair_mask()
            .iter()
            .map(|&m| f64::from(u8::from(m)))
            .collect();
        let exp_neg: Vec<f64> = geo
            .dist3d
            .iter()
            .zip(&mask)
            .map(|(&d, &m)| m * (-d).exp())
            .collect();
        let vel: Vec<f64> = geo
            .relvel
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| m * cfg.geometry.vel_mode.apply(v))
            .collect();
        let mut pool_weights = vec![0.0; t * n];
        for ti in 0..t {
            let count = (0..n).filter(|&i| geo.is_present(ti, i)).count();
            if count > 0 {
                for i in 0..n {
                    if geo.is_present(ti, i) {
                        pool_weights[ti * n + i] = 1.0 / count as f64;
                    }
                }
            }
        }
        Ok(ClipInputs {
            num_frames: t,
            num_objects: n,
            obj_feat: Matrix::from_vec(
                t * n,
                f,
                bundle.obj_feat.iter().map(|&v| v as f64).collect(),
            ),
            frame_feat: Matrix::from_vec(
                t,
                f,
                bundle.frame_feat.iter().map(|&v| v as f64).collect(),
            ),
            exp_neg_dist: Matrix::from_vec(t * n, n, exp_neg),
            velocity: Matrix::from_vec(t * n, n, vel),
            pair_mask: Matrix::from_vec(t * n, n, mask),
            pool_weights,
        })
    }
}

/// Builds the forward graph and returns the `[T, 2]` logits node.
fn build(tape: &mut Tape, x: &ClipInputs, p: &BoundParams, cfg: &ModelConfig) -> Var {
    let n = cfg.num_objects;
    let ab = cfg.ablation;
    let obj = tape.constant(x.obj_feat.clone());

    let adjacency = if ab.use_dgcn {
        let base = if ab.use_adaptive_adj {
            adaptive_adjacency(tape, p.var("adj.v1"), p.var("adj.v2"))
        } else {
            tape.constant(Matrix::filled(n, n, 1.0 / n as f64))
        };
        let tiled = tape.tile_rows(base, x.num_frames);
        // Weight = a/(a+1) e^{-D} + 1/(a+1) Vel with a = softplus(raw)
        let a = tape.softplus(p.var("edge.a_raw"));
        let a_plus_one = tape.add_scalar(a, 1.0);
        let beta = tape.recip(a_plus_one);
        let alpha = tape.mul(a, beta);
        let e = tape.constant(x.exp_neg_dist.clone());
        let v = tape.constant(x.velocity.clone());
        let dist_term = tape.scale_by(e, alpha);
        let vel_term = tape.scale_by(v, beta);
        let weights = tape.add(dist_term, vel_term);
        let mask = tape.constant(x.pair_mask.clone());
        Some(effective_adjacency(tape, tiled, weights, mask))
    } else {
        None
    };

    let mut h = obj;
    for l in 0..cfg.gcn_layers {
        h = gcn_layer(tape, h, adjacency, p.var(&format!("gcn.{l}.w")));
    }
    let graph_hidden = spatial_recurrence(
        tape,
        h,
        x.pool_weights.clone(),
        n,
        p.var("spatial_lstm.wx"),
        p.var("spatial_lstm.wh"),
        p.var("spatial_lstm.b"),
    );
    let frame = tape.constant(x.frame_feat.clone());
    let fused = fuse(tape, graph_hidden, frame, p.var("fuse.w"), p.var("fuse.b"));

    let z = if ab.use_dilated {
        let kernels: Vec<Vec<Var>> = (0..cfg.dilations.len())
            .map(|i| {
                (0..cfg.kernel_size)
                    .map(|k| p.var(&format!("dilated.{i}.k{k}")))
                    .collect()
            })
            .collect();
        dilated_block(
            tape,
            fused,
            &kernels,
            &cfg.dilations,
            p.var("dilated.ln_gain"),
            p.var("dilated.ln_bias"),
        )
    } else {
        fused
    };
    head_logits(tape, z, cfg.temporal_head, ab.use_gru_head, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[T, 2]` (no-accident, accident)
    pub logits: Matrix,
    /// Per-frame accident-class probability.
    pub probs: Vec<f64>,
}

fn accident_probs(logits: &Matrix) -> Vec<f64> {
    (0..logits.rows)
        .map(|t| {
            let mut row = logits.row(t).to_vec();
            softmax_in_place(&mut row);
            row[1]
        })
        .collect()
}

/// Per-frame accident probabilities for one clip.
pub fn forward(
    bundle: &FeatureBundle,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Prediction> {
    let inputs = ClipInputs::from_bundle(bundle, cfg)?;
    forward_inputs(&inputs, params, cfg)
}

pub fn forward_inputs(
    inputs: &ClipInputs,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Prediction> {
    params.check_against(cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits = build(&mut tape, inputs, &bound, cfg);
    let logits = tape.value(logits).clone();
    let probs = accident_probs(&logits);
    Ok(Prediction { logits, probs })
}

/// Per-frame class targets and loss weights for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget {
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Mean weighted cross entropy over frames and its gradient with respect to
/// every parameter array (declaration order).
pub fn forward_loss(
    inputs: &ClipInputs,
    target: &LossTarget,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<Matrix>)> {
    if target.targets.len() != inputs.num_frames || target.weights.len() != inputs.num_frames {
        return Err(Error::Shape(format!(
            "loss target covers {} frames, clip has {}",
            target.targets.len(),
            inputs.num_frames
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logits = build(&mut tape, inputs, &bound, cfg);
    let loss = tape.weighted_ce(
        logits,
        target.targets.clone(),
        target.weights.clone(),
        inputs.num_frames as f64,
    );
    let value = tape.value(loss).data[0];
    let grads = tape.backward(loss);
    let out = bound
        .vars
        .iter()
        .zip(&params.values)
        .map(|(&v, m)| grads.get_or_zeros(v, m))
        .collect();
    Ok((value, out))
}
