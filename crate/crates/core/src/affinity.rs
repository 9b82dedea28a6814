//! Cross-image affinity module.
//!
//! For a query map `x_q` and a reference map `x_r` (both `H×W×D`):
//!
//! * `k̄ = softmax_j(φ_q(x_i) · φ_r(x_j))` over the reference pixels,
//! * `m_i = Σ_j k̄_ij φ_c(x_j)`,
//! * messages from several references are merged element-wise (max by
//!   default), and
//! * `x̂ = x + γ ⊙ φ_o(m) + β`, with the gate `γ, β` starting at zero.
//!
//! `φ_q, φ_r` halve the channel count, `φ_c, φ_o` keep it. `φ_r(x_r)` and
//! `φ_c(x_r)` are max-pooled 2×2 / stride 2 before use; the query side stays
//! at full resolution. A branch always includes the query paired with itself
//! as reference 0, so a branch without external references is the
//! self-affinity branch used at test time.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CianError, Result};
use crate::tensor::{
    gemm, maxpool2d_backward, maxpool2d_with_argmax, softmax_row, Mat, Pooled, Real, Tensor,
};

/// `H×W×D` per-pixel embeddings.
pub type FeatureMap<T> = Tensor<T>;

/// `H×W×D` summed messages, one per query pixel.
pub type MessageMap<T> = Tensor<T>;

/// Learnable parameters of the module. The projections are 1×1
/// convolutions stored as `in×out` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityParams<T> {
    /// `D × D/2`
    pub w_q: Tensor<T>,
    /// `D × D/2`
    pub w_r: Tensor<T>,
    /// `D × D`
    pub w_c: Tensor<T>,
    /// `D × D`
    pub w_o: Tensor<T>,
    /// Per-channel gate on `φ_o(m)`, length `D`.
    pub gamma: Tensor<T>,
    /// Per-channel bias of the gate, length `D`.
    pub beta: Tensor<T>,
}

impl<T: Real> AffinityParams<T> {
    /// All-zero parameters (also the gradient accumulator layout).
    pub fn zeros(dim: usize) -> Result<Self> {
        Self::check_dim(dim)?;
        let half = dim / 2;
        Ok(AffinityParams {
            w_q: Tensor::zeros(&[dim, half]),
            w_r: Tensor::zeros(&[dim, half]),
            w_c: Tensor::zeros(&[dim, dim]),
            w_o: Tensor::zeros(&[dim, dim]),
            gamma: Tensor::zeros(&[dim]),
            beta: Tensor::zeros(&[dim]),
        })
    }

    /// Projections drawn from `N(0, std²)`, gate zero.
    pub fn init(dim: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(dim)?;
        let normal = Normal::new(0.0, std).map_err(|e| CianError::invalid(e.to_string()))?;
        for t in [&mut p.w_q, &mut p.w_r, &mut p.w_c, &mut p.w_o] {
            for v in t.data_mut() {
                *v = T::lit(normal.sample(rng));
            }
        }
        Ok(p)
    }

    fn check_dim(dim: usize) -> Result<()> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(CianError::invalid(format!(
                "affinity feature dimension must be even and positive, got {dim}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim()).expect("dimension already validated")
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("w_q", &self.w_q),
            ("w_r", &self.w_r),
            ("w_c", &self.w_c),
            ("w_o", &self.w_o),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 6] {
        [
            ("w_q", &mut self.w_q),
            ("w_r", &mut self.w_r),
            ("w_c", &mut self.w_c),
            ("w_o", &mut self.w_o),
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
        ]
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            a.add_scaled(b, T::one())?;
        }
        Ok(())
    }
}

/// Row-normalized affinities between query pixels and (pooled) reference
/// pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T> {
    /// `|S_q| × |S_r'|`, rows sum to one.
    pub weights: Tensor<T>,
    /// Spatial size of the pooled reference grid.
    pub reference_grid: (usize, usize),
}

/// How merged message elements map back to the per-reference messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MergeMode {
    #[default]
    Max,
    Avg,
}

impl std::str::FromStr for MergeMode {
    type Err = CianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(MergeMode::Max),
            "avg" => Ok(MergeMode::Avg),
            other => Err(CianError::invalid(format!("unknown merge mode {other:?}"))),
        }
    }
}

/// Saved forward state of one query/reference pair.
#[derive(Clone, Debug)]
pub struct PairState<T> {
    query: Tensor<T>,
    reference: Tensor<T>,
    /// `φ_q(x_q)`, `Nq × D/2`
    q: Vec<T>,
    keys: Pooled<T>,
    values: Pooled<T>,
    attention: Vec<T>,
    message: Tensor<T>,
    grid: (usize, usize),
}

impl<T: Real> PairState<T> {
    pub fn message(&self) -> &MessageMap<T> {
        &self.message
    }

    pub fn affinity(&self) -> AffinityMatrix<T> {
        let (h, w, _) = self.query.dims3().expect("validated in forward");
        let nr = self.grid.0 * self.grid.1;
        AffinityMatrix {
            weights: Tensor::from_parts(vec![h * w, nr], self.attention.clone()),
            reference_grid: self.grid,
        }
    }
}

/// Gradients of one pair w.r.t. its inputs and the three projections it uses.
#[derive(Clone, Debug)]
pub struct PairGrads<T> {
    pub query: Tensor<T>,
    pub reference: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_c: Tensor<T>,
}

fn project<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (h, wd, d) = x.dims3().expect("validated by caller");
    let out_c = w.shape()[1];
    let mut out = vec![T::zero(); h * wd * out_c];
    gemm(
        Mat::new(x.data(), h * wd, d),
        Mat::new(w.data(), d, out_c),
        &mut out,
        false,
    );
    Tensor::from_parts(vec![h, wd, out_c], out)
}

/// Pool 2×2/2 unless a spatial dimension is below 2, in which case the map
/// passes through with identity routing.
fn pool_reference<T: Real>(x: Tensor<T>) -> Result<Pooled<T>> {
    let (h, w, _) = x.dims3()?;
    if h < 2 || w < 2 {
        let argmax = (0..x.len()).collect();
        let input_shape = x.shape().to_vec();
        return Ok(Pooled {
            output: x,
            argmax,
            input_shape,
        });
    }
    maxpool2d_with_argmax(&x, 2, 2)
}

fn check_features<T: Real>(x: &Tensor<T>, dim: usize, what: &str) -> Result<(usize, usize)> {
    let (h, w, d) = x.dims3()?;
    if d != dim {
        return Err(CianError::invalid(format!(
            "{what} has {d} channels but the affinity module expects {dim} (shape {:?})",
            x.shape()
        )));
    }
    Ok((h, w))
}

/// Forward pass of a single query/reference pair, keeping the state needed
/// for [`pair_backward`].
pub fn pair_forward<T: Real>(
    query: &FeatureMap<T>,
    reference: &FeatureMap<T>,
    params: &AffinityParams<T>,
) -> Result<PairState<T>> {
    let dim = params.dim();
    let half = dim / 2;
    let (qh, qw) = check_features(query, dim, "query")?;
    check_features(reference, dim, "reference")?;
    let nq = qh * qw;

    let q = project(query, &params.w_q).into_data();
    let keys = pool_reference(project(reference, &params.w_r))?;
    let values = pool_reference(project(reference, &params.w_c))?;
    let grid = (keys.output.shape()[0], keys.output.shape()[1]);
    let nr = grid.0 * grid.1;

    let mut attention = vec![T::zero(); nq * nr];
    gemm(
        Mat::new(&q, nq, half),
        Mat::t(keys.output.data(), nr, half),
        &mut attention,
        false,
    );
    for row in attention.chunks_mut(nr) {
        if !softmax_row(row) {
            return Err(CianError::NonFinite("affinity dot product".into()));
        }
    }

    let mut message = vec![T::zero(); nq * dim];
    gemm(
        Mat::new(&attention, nq, nr),
        Mat::new(values.output.data(), nr, dim),
        &mut message,
        false,
    );
    let message =
        Tensor::from_parts(vec![qh, qw, dim], message).ensure_finite("affinity message")?;
    Ok(PairState {
        query: query.clone(),
        reference: reference.clone(),
        q,
        keys,
        values,
        attention,
        message,
        grid,
    })
}

/// Backward pass of [`pair_forward`] given the gradient w.r.t. its message.
pub fn pair_backward<T: Real>(
    state: &PairState<T>,
    grad_message: &Tensor<T>,
    params: &AffinityParams<T>,
) -> Result<PairGrads<T>> {
    if grad_message.shape() != state.message.shape() {
        return Err(CianError::shape(
            "affinity_backward",
            grad_message.shape(),
            state.message.shape(),
        ));
    }
    let dim = params.dim();
    let half = dim / 2;
    let (qh, qw, _) = state.query.dims3()?;
    let (rh, rw, _) = state.reference.dims3()?;
    let nq = qh * qw;
    let nf = rh * rw;
    let nr = state.grid.0 * state.grid.1;
    let dm = grad_message.data();
    let a = &state.attention;

    // dV = Aᵀ dM
    let mut grad_values = vec![T::zero(); nr * dim];
    gemm(
        Mat::t(a, nq, nr),
        Mat::new(dm, nq, dim),
        &mut grad_values,
        false,
    );

    // dA = dM Vᵀ, then through the row softmax in place
    let mut ds = vec![T::zero(); nq * nr];
    gemm(
        Mat::new(dm, nq, dim),
        Mat::t(state.values.output.data(), nr, dim),
        &mut ds,
        false,
    );
    for (g_row, a_row) in ds.chunks_mut(nr).zip(a.chunks(nr)) {
        let dot = g_row
            .iter()
            .zip(a_row)
            .fold(T::zero(), |acc, (&g, &p)| acc + g * p);
        for (g, &p) in g_row.iter_mut().zip(a_row) {
            *g = p * (*g - dot);
        }
    }

    // dQ = dS K, dK = dSᵀ Q
    let mut grad_q = vec![T::zero(); nq * half];
    gemm(
        Mat::new(&ds, nq, nr),
        Mat::new(state.keys.output.data(), nr, half),
        &mut grad_q,
        false,
    );
    let mut grad_keys = vec![T::zero(); nr * half];
    gemm(
        Mat::t(&ds, nq, nr),
        Mat::new(&state.q, nq, half),
        &mut grad_keys,
        false,
    );

    let grad_keys = maxpool2d_backward(
        &state.keys,
        &Tensor::from_parts(state.keys.output.shape().to_vec(), grad_keys),
    )?;
    let grad_values = maxpool2d_backward(
        &state.values,
        &Tensor::from_parts(state.values.output.shape().to_vec(), grad_values),
    )?;

    let xq = state.query.data();
    let xr = state.reference.data();
    let mut w_q = vec![T::zero(); dim * half];
    gemm(
        Mat::t(xq, nq, dim),
        Mat::new(&grad_q, nq, half),
        &mut w_q,
        false,
    );
    let mut w_r = vec![T::zero(); dim * half];
    gemm(
        Mat::t(xr, nf, dim),
        Mat::new(grad_keys.data(), nf, half),
        &mut w_r,
        false,
    );
    let mut w_c = vec![T::zero(); dim * dim];
    gemm(
        Mat::t(xr, nf, dim),
        Mat::new(grad_values.data(), nf, dim),
        &mut w_c,
        false,
    );

    let mut query = vec![T::zero(); nq * dim];
    gemm(
        Mat::new(&grad_q, nq, half),
        Mat::t(params.w_q.data(), dim, half),
        &mut query,
        false,
    );
    let mut reference = vec![T::zero(); nf * dim];
    gemm(
        Mat::new(grad_keys.data(), nf, half),
        Mat::t(params.w_r.data(), dim, half),
        &mut reference,
        false,
    );
    gemm(
        Mat::new(grad_values.data(), nf, dim),
        Mat::t(params.w_c.data(), dim, dim),
        &mut reference,
        true,
    );

    Ok(PairGrads {
        query: Tensor::from_parts(state.query.shape().to_vec(), query),
        reference: Tensor::from_parts(state.reference.shape().to_vec(), reference),
        w_q: Tensor::from_parts(vec![dim, half], w_q),
        w_r: Tensor::from_parts(vec![dim, half], w_r),
        w_c: Tensor::from_parts(vec![dim, dim], w_c),
    })
}

/// Affinity matrix and message for one query/reference pair.
pub fn affinity_forward<T: Real>(
    query: &FeatureMap<T>,
    reference: &FeatureMap<T>,
    params: &AffinityParams<T>,
) -> Result<(AffinityMatrix<T>, MessageMap<T>)> {
    let state = pair_forward(query, reference, params)?;
    Ok((state.affinity(), state.message))
}

/// Routing of the merged message back to its inputs.
#[derive(Clone, Debug)]
pub enum MergeRoute {
    /// Winning input per element (lowest index on ties).
    Max(Vec<u16>),
    Avg(usize),
}

pub fn merge_messages<T: Real>(
    messages: &[&MessageMap<T>],
    mode: MergeMode,
) -> Result<MessageMap<T>> {
    merge_messages_routed(messages, mode).map(|(m, _)| m)
}

pub fn merge_messages_routed<T: Real>(
    messages: &[&MessageMap<T>],
    mode: MergeMode,
) -> Result<(MessageMap<T>, MergeRoute)> {
    let first = *messages
        .first()
        .ok_or_else(|| CianError::invalid("merge_messages needs at least one message"))?;
    if messages.len() > u16::MAX as usize {
        return Err(CianError::invalid("too many messages to merge"));
    }
    for m in &messages[1..] {
        if m.shape() != first.shape() {
            return Err(CianError::shape("merge_messages", first.shape(), m.shape()));
        }
    }
    match mode {
        MergeMode::Max => {
            let mut out = first.data().to_vec();
            let mut winner = vec![0u16; out.len()];
            for (h, m) in messages.iter().enumerate().skip(1) {
                for ((o, w), &v) in out.iter_mut().zip(winner.iter_mut()).zip(m.data()) {
                    if v > *o {
                        *o = v;
                        *w = h as u16;
                    }
                }
            }
            Ok((
                Tensor::from_parts(first.shape().to_vec(), out),
                MergeRoute::Max(winner),
            ))
        }
        MergeMode::Avg => {
            let mut out = first.data().to_vec();
            for m in &messages[1..] {
                for (o, &v) in out.iter_mut().zip(m.data()) {
                    *o += v;
                }
            }
            let inv = T::one() / T::lit(messages.len() as f64);
            out.iter_mut().for_each(|v| *v *= inv);
            Ok((
                Tensor::from_parts(first.shape().to_vec(), out),
                MergeRoute::Avg(messages.len()),
            ))
        }
    }
}

/// Split the gradient of a merged message into per-input gradients.
pub fn merge_backward<T: Real>(route: &MergeRoute, grad: &Tensor<T>) -> Vec<Tensor<T>> {
    match route {
        MergeRoute::Max(winner) => {
            let n = winner.iter().copied().max().map_or(1, |m| m as usize + 1);
            let n = n.max(1);
            let mut grads = vec![Tensor::zeros(grad.shape()); n];
            for (i, (&w, &g)) in winner.iter().zip(grad.data()).enumerate() {
                grads[w as usize].data_mut()[i] = g;
            }
            grads
        }
        MergeRoute::Avg(n) => {
            let g = grad.scale(T::one() / T::lit(*n as f64));
            vec![g; *n]
        }
    }
}

/// `x̂ = x + γ ⊙ (m W_o) + β`, returning `x̂` and `m W_o`.
///
/// Channels whose gate and bias are both zero are copied from `x`, so a
/// freshly initialized module is an exact identity.
pub fn residual_merge_with_projection<T: Real>(
    x: &FeatureMap<T>,
    m: &MessageMap<T>,
    params: &AffinityParams<T>,
) -> Result<(FeatureMap<T>, Tensor<T>)> {
    if x.shape() != m.shape() {
        return Err(CianError::shape("residual_merge", x.shape(), m.shape()));
    }
    let (h, w) = check_features(x, params.dim(), "residual input")?;
    let d = params.dim();
    let mut proj = vec![T::zero(); h * w * d];
    gemm(
        Mat::new(m.data(), h * w, d),
        Mat::new(params.w_o.data(), d, d),
        &mut proj,
        false,
    );
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut out = x.data().to_vec();
    for (o_row, p_row) in out.chunks_mut(d).zip(proj.chunks(d)) {
        for c in 0..d {
            if gamma[c] != T::zero() || beta[c] != T::zero() {
                o_row[c] += gamma[c] * p_row[c] + beta[c];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out).ensure_finite("residual_merge")?,
        Tensor::from_parts(x.shape().to_vec(), proj),
    ))
}

pub fn residual_merge<T: Real>(
    x: &FeatureMap<T>,
    m: &MessageMap<T>,
    params: &AffinityParams<T>,
) -> Result<FeatureMap<T>> {
    residual_merge_with_projection(x, m, params).map(|(out, _)| out)
}

/// Saved state of a whole branch: pairs, merge routing and the residual.
#[derive(Clone, Debug)]
pub struct BranchState<T> {
    pairs: Vec<PairState<T>>,
    route: MergeRoute,
    merged: Tensor<T>,
    projected: Tensor<T>,
}

impl<T: Real> BranchState<T> {
    /// Pair states, the self pair first.
    pub fn pairs(&self) -> &[PairState<T>] {
        &self.pairs
    }

    pub fn merged_message(&self) -> &MessageMap<T> {
        &self.merged
    }
}

/// Gradients of a branch output w.r.t. the query, each external reference
/// and the parameters.
#[derive(Clone, Debug)]
pub struct BranchGrads<T> {
    pub query: Tensor<T>,
    pub references: Vec<Tensor<T>>,
    pub params: AffinityParams<T>,
}

/// Branch output, merge routing, merged message and its `W_o` projection.
pub type MergedBranch<T> = (FeatureMap<T>, MergeRoute, MessageMap<T>, Tensor<T>);

/// Merge, gate and add the messages of already-computed pairs. Also used by
/// the model to share one self pair between the cross and self branches.
pub fn merge_and_residual<T: Real>(
    query: &FeatureMap<T>,
    pairs: &[&PairState<T>],
    params: &AffinityParams<T>,
    mode: MergeMode,
) -> Result<MergedBranch<T>> {
    let messages: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.message).collect();
    let (merged, route) = merge_messages_routed(&messages, mode)?;
    let (out, projected) = residual_merge_with_projection(query, &merged, params)?;
    Ok((out, route, merged, projected))
}

/// Backward of the gate: returns the gradient w.r.t. the merged message
/// and accumulates `W_o, γ, β` gradients into `grads`.
pub fn residual_backward<T: Real>(
    upstream: &Tensor<T>,
    merged: &Tensor<T>,
    projected: &Tensor<T>,
    params: &AffinityParams<T>,
    grads: &mut AffinityParams<T>,
) -> Result<Tensor<T>> {
    if upstream.shape() != merged.shape() {
        return Err(CianError::shape(
            "residual_backward",
            upstream.shape(),
            merged.shape(),
        ));
    }
    let d = params.dim();
    let n = upstream.len() / d;
    let gamma = params.gamma.data();
    let up = upstream.data();
    let mut grad_proj = vec![T::zero(); up.len()];
    {
        let dg = grads.gamma.data_mut();
        for (i, (u_row, p_row)) in up.chunks(d).zip(projected.data().chunks(d)).enumerate() {
            let gp = &mut grad_proj[i * d..(i + 1) * d];
            for c in 0..d {
                dg[c] += u_row[c] * p_row[c];
                gp[c] = u_row[c] * gamma[c];
            }
        }
        let db = grads.beta.data_mut();
        for u_row in up.chunks(d) {
            for c in 0..d {
                db[c] += u_row[c];
            }
        }
    }
    gemm(
        Mat::t(merged.data(), n, d),
        Mat::new(&grad_proj, n, d),
        grads.w_o.data_mut(),
        true,
    );
    let mut grad_merged = vec![T::zero(); n * d];
    gemm(
        Mat::new(&grad_proj, n, d),
        Mat::t(params.w_o.data(), d, d),
        &mut grad_merged,
        false,
    );
    Ok(Tensor::from_parts(upstream.shape().to_vec(), grad_merged))
}

/// Full branch: the query paired with itself plus each reference, merged by
/// `mode`, then gated into the query.
pub fn cian_branch_forward<T: Real>(
    query: &FeatureMap<T>,
    references: &[&FeatureMap<T>],
    params: &AffinityParams<T>,
    mode: MergeMode,
) -> Result<(FeatureMap<T>, BranchState<T>)> {
    let mut pairs = Vec::with_capacity(references.len() + 1);
    pairs.push(pair_forward(query, query, params)?);
    for r in references {
        pairs.push(pair_forward(query, r, params)?);
    }
    let refs: Vec<&PairState<T>> = pairs.iter().collect();
    let (out, route, merged, projected) = merge_and_residual(query, &refs, params, mode)?;
    Ok((
        out,
        BranchState {
            pairs,
            route,
            merged,
            projected,
        },
    ))
}

/// [`cian_branch_forward`] with max merging, output only.
pub fn cian_branch<T: Real>(
    query: &FeatureMap<T>,
    references: &[&FeatureMap<T>],
    params: &AffinityParams<T>,
) -> Result<FeatureMap<T>> {
    cian_branch_forward(query, references, params, MergeMode::Max).map(|(out, _)| out)
}

/// Exact gradients of a branch output given the upstream gradient.
pub fn affinity_backward<T: Real>(
    upstream: &FeatureMap<T>,
    state: &BranchState<T>,
    params: &AffinityParams<T>,
) -> Result<BranchGrads<T>> {
    let query_shape = state.pairs[0].query.shape();
    if upstream.shape() != query_shape {
        return Err(CianError::shape(
            "affinity_backward",
            upstream.shape(),
            query_shape,
        ));
    }
    let mut grads = params.zeros_like();
    let grad_merged = residual_backward(
        upstream,
        &state.merged,
        &state.projected,
        params,
        &mut grads,
    )?;
    let per_pair = merge_backward(&state.route, &grad_merged);
    let mut query = upstream.clone();
    let mut references = Vec::with_capacity(state.pairs.len() - 1);
    for (h, pair) in state.pairs.iter().enumerate() {
        let g = match per_pair.get(h) {
            Some(g) => pair_backward(pair, g, params)?,
            None => {
                if h > 0 {
                    references.push(Tensor::zeros(pair.reference.shape()));
                }
                continue;
            }
        };
        query.add_scaled(&g.query, T::one())?;
        grads.w_q.add_scaled(&g.w_q, T::one())?;
        grads.w_r.add_scaled(&g.w_r, T::one())?;
        grads.w_c.add_scaled(&g.w_c, T::one())?;
        if h == 0 {
            query.add_scaled(&g.reference, T::one())?;
        } else {
            references.push(g.reference);
        }
    }
    Ok(BranchGrads {
        query,
        references,
        params: grads,
    })
}
