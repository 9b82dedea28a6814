//! Toy segmentation network: a shared 3-layer convolutional encoder, the
//! affinity branches, and a 1×1 classifier, with hand-written backward
//! passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::affinity::{
    merge_and_residual, merge_backward, pair_backward, pair_forward, residual_backward,
    AffinityParams, FeatureMap, MergeMode, MergeRoute, PairState,
};
use crate::error::{CianError, Result};
use crate::losses::{argmax, branch_loss, ImageLabelSet, LossTerms, SeedMask};
use crate::tensor::{conv2d_backward, conv2d_cached, gemm, ConvCache, Mat, Real, Tensor};

/// Encoder channel widths: RGB in, `D = 32` out.
pub const DEFAULT_WIDTHS: [usize; 4] = [3, 16, 32, 32];

/// Fixed input standardization `(v − mean) · scale` applied by the encoder.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;

/// Standard deviation for the classifier. The affinity projections use
/// `sqrt(1/D)`.
pub const NEW_LAYER_STD: f64 = 0.01;

fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let n = Normal::new(0.0, std).map_err(|e| CianError::invalid(e.to_string()))?;
    Ok(Tensor::from_fn(shape, |_| T::lit(n.sample(rng))))
}

/// 3×3, stride 1, pad 1 convolution followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    conv: ConvCache<T>,
    output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    layers: Vec<LayerCache<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> Encoder<T> {
    /// Fan-in scaled normal weights, zero biases.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(CianError::invalid("encoder needs at least one layer"));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = (2.0 / (9 * w[0]) as f64).sqrt();
                Ok(ConvLayer {
                    weight: normal_tensor(&[3, 3, w[0], w[1]], std, rng)?,
                    bias: Tensor::zeros(&[w[1]]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        self.forward_cached(image).map(|(x, _)| x)
    }

    pub fn forward_cached(&self, image: &Tensor<T>) -> Result<(FeatureMap<T>, EncoderCache<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let (mean, scale) = (T::lit(INPUT_MEAN), T::lit(INPUT_SCALE));
        let mut x = image.map(|v| (v - mean) * scale);
        for layer in &self.layers {
            let (mut out, conv) = conv2d_cached(&x, &layer.weight, 1, 1)?;
            let c = layer.bias.len();
            let bias = layer.bias.data();
            for px in out.data_mut().chunks_mut(c) {
                for (v, &b) in px.iter_mut().zip(bias) {
                    *v = (*v + b).max(T::zero());
                }
            }
            caches.push(LayerCache {
                conv,
                output: out.clone(),
            });
            x = out;
        }
        Ok((x, EncoderCache { layers: caches }))
    }

    /// Accumulate parameter gradients for `grad_out` into `grads`.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut Encoder<T>,
    ) -> Result<()> {
        let mut g = grad_out.clone();
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            for (gv, &o) in g.data_mut().iter_mut().zip(lc.output.data()) {
                if o <= T::zero() {
                    *gv = T::zero();
                }
            }
            let c = layer.bias.len();
            let gb = grads.layers[i].bias.data_mut();
            for px in g.data().chunks(c) {
                for (b, &v) in gb.iter_mut().zip(px) {
                    *b += v;
                }
            }
            let (gi, gw) = conv2d_backward(&lc.conv, &layer.weight, &g, i > 0)?;
            grads.layers[i].weight.add_scaled(&gw, T::one())?;
            match gi {
                Some(gi) => g = gi,
                None => break,
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }
}

/// Per-pixel linear classifier (1×1 convolution with bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    /// `D × K`
    pub weight: Tensor<T>,
    /// `K`
    pub bias: Tensor<T>,
}

impl<T: Real> Classifier<T> {
    pub fn init(dim: usize, classes: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Classifier {
            weight: normal_tensor(&[dim, classes], std, rng)?,
            bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn num_outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<Tensor<T>> {
        let (h, w, d) = x.dims3()?;
        if d != self.weight.shape()[0] {
            return Err(CianError::shape(
                "classifier",
                x.shape(),
                self.weight.shape(),
            ));
        }
        let k = self.num_outputs();
        let mut out = vec![T::zero(); h * w * k];
        gemm(
            Mat::new(x.data(), h * w, d),
            Mat::new(self.weight.data(), d, k),
            &mut out,
            false,
        );
        for px in out.chunks_mut(k) {
            for (v, &b) in px.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Tensor::new(&[h, w, k], out)?.ensure_finite("classifier")
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        grad_logits: &Tensor<T>,
        grads: &mut Classifier<T>,
    ) -> Result<Tensor<T>> {
        let (h, w, d) = x.dims3()?;
        let k = self.num_outputs();
        let n = h * w;
        gemm(
            Mat::t(x.data(), n, d),
            Mat::new(grad_logits.data(), n, k),
            grads.weight.data_mut(),
            true,
        );
        let gb = grads.bias.data_mut();
        for px in grad_logits.data().chunks(k) {
            for (b, &v) in gb.iter_mut().zip(px) {
                *b += v;
            }
        }
        let mut gx = vec![T::zero(); n * d];
        gemm(
            Mat::new(grad_logits.data(), n, k),
            Mat::t(self.weight.data(), d, k),
            &mut gx,
            false,
        );
        Ok(Tensor::from_parts(x.shape().to_vec(), gx))
    }

    pub fn zeros_like(&self) -> Self {
        Classifier {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// All trainable parameters of the segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Encoder<T>,
    pub classifier: Classifier<T>,
    pub affinity: AffinityParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// `num_classes` counts foreground classes; the classifier has one more
    /// output for background.
    pub fn init(widths: &[usize], num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::init(widths, rng)?;
        let dim = encoder.out_dim();
        let classifier = Classifier::init(dim, num_classes + 1, NEW_LAYER_STD, rng)?;
        let affinity = AffinityParams::init(dim, (1.0 / dim as f64).sqrt(), rng)?;
        Ok(ModelParams {
            encoder,
            classifier,
            affinity,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_outputs() - 1
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            classifier: self.classifier.zeros_like(),
            affinity: self.affinity.zeros_like(),
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn groups(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        for (name, t) in self.affinity.groups() {
            out.push((format!("affinity.{name}"), t));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut l.weight));
            out.push((format!("encoder.{i}.bias"), &mut l.bias));
        }
        out.push(("classifier.weight".into(), &mut self.classifier.weight));
        out.push(("classifier.bias".into(), &mut self.classifier.bias));
        for (name, t) in self.affinity.groups_mut() {
            out.push((format!("affinity.{name}"), t));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            a.add_scaled(b, T::one())?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            encoder: Encoder {
                layers: self
                    .encoder
                    .layers
                    .iter()
                    .map(|l| ConvLayer {
                        weight: l.weight.cast(),
                        bias: l.bias.cast(),
                    })
                    .collect(),
            },
            classifier: Classifier {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
            affinity: AffinityParams {
                w_q: self.affinity.w_q.cast(),
                w_r: self.affinity.w_r.cast(),
                w_c: self.affinity.w_c.cast(),
                w_o: self.affinity.w_o.cast(),
                gamma: self.affinity.gamma.cast(),
                beta: self.affinity.beta.cast(),
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, t)| t.is_finite())
    }
}

/// Outputs of one forward step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub x_cross: FeatureMap<T>,
    pub x_self: FeatureMap<T>,
    pub logits_cross: Tensor<T>,
    pub logits_self: Tensor<T>,
}

/// Encode the query and references with the shared encoder, run the cross
/// branch (self pair plus every reference) and the self branch, classify
/// both.
pub fn forward_step<T: Real>(
    params: &ModelParams<T>,
    query: &Tensor<T>,
    references: &[&Tensor<T>],
) -> Result<StepOutput<T>> {
    let xq = params.encoder.forward(query)?;
    let xr: Vec<FeatureMap<T>> = references
        .iter()
        .map(|r| params.encoder.forward(r))
        .collect::<Result<_>>()?;
    let self_pair = pair_forward(&xq, &xq, &params.affinity)?;
    let (x_self, ..) = merge_and_residual(&xq, &[&self_pair], &params.affinity, MergeMode::Max)?;
    let mut cross_pairs = vec![self_pair];
    for r in &xr {
        cross_pairs.push(pair_forward(&xq, r, &params.affinity)?);
    }
    let refs: Vec<&PairState<T>> = cross_pairs.iter().collect();
    let (x_cross, ..) = merge_and_residual(&xq, &refs, &params.affinity, MergeMode::Max)?;
    Ok(StepOutput {
        logits_cross: params.classifier.forward(&x_cross)?,
        logits_self: params.classifier.forward(&x_self)?,
        x_cross,
        x_self,
    })
}

/// Self-affinity logits only (the test-time path).
pub fn self_logits<T: Real>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let x = params.encoder.forward(image)?;
    let pair = pair_forward(&x, &x, &params.affinity)?;
    let (xs, ..) = merge_and_residual(&x, &[&pair], &params.affinity, MergeMode::Max)?;
    params.classifier.forward(&xs)
}

/// Dense test-time labels from the self branch: per-pixel argmax, ties to
/// the lowest class.
pub fn predict<T: Real>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<SeedMask> {
    let logits = self_logits(params, image)?;
    let (h, w, k) = logits.dims3()?;
    SeedMask::new(
        h,
        w,
        logits
            .data()
            .chunks(k)
            .map(|row| argmax(row) as u8)
            .collect(),
    )
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSwitches {
    /// When false the cross-branch terms are replaced by a second copy of
    /// the self-branch terms.
    pub cross: bool,
    pub completion: bool,
    pub merge: MergeMode,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            cross: true,
            completion: true,
            merge: MergeMode::Max,
        }
    }
}

struct BranchFwd<T> {
    x: FeatureMap<T>,
    route: MergeRoute,
    merged: Tensor<T>,
    projected: Tensor<T>,
    logits: Tensor<T>,
}

fn branch_fwd<T: Real>(
    params: &ModelParams<T>,
    xq: &FeatureMap<T>,
    pairs: &[&PairState<T>],
    merge: MergeMode,
) -> Result<BranchFwd<T>> {
    let (x, route, merged, projected) = merge_and_residual(xq, pairs, &params.affinity, merge)?;
    let logits = params.classifier.forward(&x)?;
    Ok(BranchFwd {
        x,
        route,
        merged,
        projected,
        logits,
    })
}

/// Backward of one branch from its logits gradient. Adds the gradient
/// reaching the query features to `grad_xq` and returns per-pair message
/// gradients.
fn branch_bwd<T: Real>(
    params: &ModelParams<T>,
    b: &BranchFwd<T>,
    grad_logits: &Tensor<T>,
    grads: &mut ModelParams<T>,
    grad_xq: &mut Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let gx = params
        .classifier
        .backward(&b.x, grad_logits, &mut grads.classifier)?;
    grad_xq.add_scaled(&gx, T::one())?;
    let gm = residual_backward(
        &gx,
        &b.merged,
        &b.projected,
        &params.affinity,
        &mut grads.affinity,
    )?;
    Ok(merge_backward(&b.route, &gm))
}

/// Objective value (all four terms) and gradients w.r.t. every parameter
/// for one query with its references. Losses are taken on the query only.
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    query: &Tensor<T>,
    seeds: &SeedMask,
    labels: &ImageLabelSet,
    references: &[&Tensor<T>],
    switches: LossSwitches,
) -> Result<(LossTerms<T>, ModelParams<T>)> {
    let mut grads = params.zeros_like();
    let (xq, cache_q) = params.encoder.forward_cached(query)?;
    let self_pair = pair_forward(&xq, &xq, &params.affinity)?;
    let self_branch = branch_fwd(params, &xq, &[&self_pair], switches.merge)?;
    let (ce_s, cp_s, mut g_self) =
        branch_loss(&self_branch.logits, seeds, labels, switches.completion)?;

    let mut grad_xq = Tensor::zeros(xq.shape());
    let mut grad_self_msg;
    let terms;
    let mut ref_state = Vec::new();
    if switches.cross && !references.is_empty() {
        let mut cross_pairs = Vec::with_capacity(references.len());
        for r in references {
            let (xr, cache_r) = params.encoder.forward_cached(r)?;
            cross_pairs.push(pair_forward(&xq, &xr, &params.affinity)?);
            ref_state.push(cache_r);
        }
        let mut all: Vec<&PairState<T>> = vec![&self_pair];
        all.extend(cross_pairs.iter());
        let cross_branch = branch_fwd(params, &xq, &all, switches.merge)?;
        let (ce_c, cp_c, g_cross) =
            branch_loss(&cross_branch.logits, seeds, labels, switches.completion)?;
        terms = LossTerms {
            ce_cross: ce_c,
            ce_self: ce_s,
            cp_cross: cp_c,
            cp_self: cp_s,
        };
        let mut per_pair = branch_bwd(params, &cross_branch, &g_cross, &mut grads, &mut grad_xq)?;
        per_pair.resize(all.len(), Tensor::zeros(xq.shape()));
        grad_self_msg = per_pair[0].clone();
        for ((pair, g), cache_r) in cross_pairs.iter().zip(&per_pair[1..]).zip(&ref_state) {
            let pg = pair_backward(pair, g, &params.affinity)?;
            grad_xq.add_scaled(&pg.query, T::one())?;
            grads.affinity.w_q.add_scaled(&pg.w_q, T::one())?;
            grads.affinity.w_r.add_scaled(&pg.w_r, T::one())?;
            grads.affinity.w_c.add_scaled(&pg.w_c, T::one())?;
            params
                .encoder
                .backward(cache_r, &pg.reference, &mut grads.encoder)?;
        }
    } else {
        // cross terms replaced by a second self term
        terms = LossTerms {
            ce_cross: ce_s,
            ce_self: ce_s,
            cp_cross: cp_s,
            cp_self: cp_s,
        };
        g_self = g_self.scale(T::lit(2.0));
        grad_self_msg = Tensor::zeros(xq.shape());
    }
    let per_pair = branch_bwd(params, &self_branch, &g_self, &mut grads, &mut grad_xq)?;
    if let Some(g) = per_pair.first() {
        grad_self_msg.add_scaled(g, T::one())?;
    }
    let pg = pair_backward(&self_pair, &grad_self_msg, &params.affinity)?;
    grad_xq.add_scaled(&pg.query, T::one())?;
    grad_xq.add_scaled(&pg.reference, T::one())?;
    grads.affinity.w_q.add_scaled(&pg.w_q, T::one())?;
    grads.affinity.w_r.add_scaled(&pg.w_r, T::one())?;
    grads.affinity.w_c.add_scaled(&pg.w_c, T::one())?;
    params
        .encoder
        .backward(&cache_q, &grad_xq, &mut grads.encoder)?;

    if !terms.total().is_finite() {
        return Err(CianError::NonFinite("training loss".into()));
    }
    Ok((terms, grads))
}

/// Objective value only, matching [`loss_and_grad`].
pub fn loss_value<T: Real>(
    params: &ModelParams<T>,
    query: &Tensor<T>,
    seeds: &SeedMask,
    labels: &ImageLabelSet,
    references: &[&Tensor<T>],
    switches: LossSwitches,
) -> Result<LossTerms<T>> {
    let xq = params.encoder.forward(query)?;
    let self_pair = pair_forward(&xq, &xq, &params.affinity)?;
    let s = branch_fwd(params, &xq, &[&self_pair], switches.merge)?;
    let (ce_s, cp_s, _) = branch_loss(&s.logits, seeds, labels, switches.completion)?;
    if !(switches.cross && !references.is_empty()) {
        return Ok(LossTerms {
            ce_cross: ce_s,
            ce_self: ce_s,
            cp_cross: cp_s,
            cp_self: cp_s,
        });
    }
    let mut pairs = vec![self_pair];
    for r in references {
        let xr = params.encoder.forward(r)?;
        pairs.push(pair_forward(&xq, &xr, &params.affinity)?);
    }
    let refs: Vec<&PairState<T>> = pairs.iter().collect();
    let c = branch_fwd(params, &xq, &refs, switches.merge)?;
    let (ce_c, cp_c, _) = branch_loss(&c.logits, seeds, labels, switches.completion)?;
    Ok(LossTerms {
        ce_cross: ce_c,
        ce_self: ce_s,
        cp_cross: cp_c,
        cp_self: cp_s,
    })
}
