//! Gated cross-modal fusion network.
//!
//! Pipeline for one video (rows are utterances, `d = 2h`):
//!
//! ```text
//! H_M   = BiGRU_M(X_M)                             per modality
//! S_M   = softmax(H_M W_M H_Mᵀ) H_M                self attention
//! C_PQ  = rowsoftmax(H_P W_PQ H_Qᵀ) H_Q            cross attention, both ways
//! F     = G·tanh(W_F Z + b_F) + (1 − G)·Q,         Z = [P, Q, P−Q, P∘Q]
//! Deep_M = BiGRU([S_M, F_·M, F_·M])                deep fusion
//! p     = softmax(W_2 relu(W_1 [Deep_T, Deep_A, Deep_V]))
//! ```
//!
//! [`AblationConfig`] switches stages off to obtain the B1–B5 variants.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{bigru_forward, dense_forward, dropout_forward, Activation, BiGruParams, DenseParams, Mode};
use crate::params::{Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{SoftmaxMask, Var};
use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Audio => 'A',
            Modality::Video => 'V',
        }
    }
}

/// Unordered modality pairs `(P, Q)` that get one cross-attention map each.
pub const PAIRS: [(Modality, Modality); 3] = [
    (Modality::Text, Modality::Video),
    (Modality::Text, Modality::Audio),
    (Modality::Audio, Modality::Video),
];

/// An ordered fusion `F_{source target} = fusion(C_{source target}, H_target)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fusion {
    pub source: Modality,
    pub target: Modality,
}

impl Fusion {
    const fn new(source: Modality, target: Modality) -> Self {
        Self { source, target }
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.source.letter(), self.target.letter())
    }
}

/// The six ordered fusions, grouped by target modality: VT, AT, TA, VA, TV, AV.
pub const FUSIONS: [Fusion; 6] = [
    Fusion::new(Modality::Video, Modality::Text),
    Fusion::new(Modality::Audio, Modality::Text),
    Fusion::new(Modality::Text, Modality::Audio),
    Fusion::new(Modality::Video, Modality::Audio),
    Fusion::new(Modality::Text, Modality::Video),
    Fusion::new(Modality::Audio, Modality::Video),
];

fn fusion_index(source: Modality, target: Modality) -> usize {
    FUSIONS
        .iter()
        .position(|f| f.source == source && f.target == target)
        .expect("every ordered pair of distinct modalities is listed")
}

/// Stage switches. Serialized as its ladder name (`"b1"`..`"b6"`) when it
/// is one, otherwise as the flag object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "AblationRepr", into = "AblationRepr")]
pub struct AblationConfig {
    pub use_self_attention: bool,
    pub use_cross_interaction: bool,
    pub use_gating: bool,
    pub use_deep_fusion: bool,
}

impl AblationConfig {
    pub const B1: Self = Self::flags(false, false, false, false);
    pub const B2: Self = Self::flags(true, false, false, false);
    pub const B3: Self = Self::flags(false, true, false, false);
    pub const B4: Self = Self::flags(false, true, true, false);
    pub const B5: Self = Self::flags(true, true, true, false);
    pub const B6: Self = Self::flags(true, true, true, true);

    pub const LADDER: [(&'static str, Self); 6] = [
        ("b1", Self::B1),
        ("b2", Self::B2),
        ("b3", Self::B3),
        ("b4", Self::B4),
        ("b5", Self::B5),
        ("b6", Self::B6),
    ];

    const fn flags(self_attn: bool, cross: bool, gating: bool, deep: bool) -> Self {
        Self {
            use_self_attention: self_attn,
            use_cross_interaction: cross,
            use_gating: gating,
            use_deep_fusion: deep,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        Self::LADDER.iter().find(|(n, _)| *n == lower).map(|(_, c)| *c)
    }

    pub fn name(&self) -> Option<&'static str> {
        Self::LADDER.iter().find(|(_, c)| c == self).map(|(n, _)| *n)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.use_gating && !self.use_cross_interaction {
            return Err(ModelError::Config("use_gating requires use_cross_interaction".into()));
        }
        if self.use_deep_fusion && !self.use_cross_interaction {
            return Err(ModelError::Config(
                "use_deep_fusion requires use_cross_interaction".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AblationRepr {
    Name(String),
    Flags {
        use_self_attention: bool,
        use_cross_interaction: bool,
        use_gating: bool,
        use_deep_fusion: bool,
    },
}

impl TryFrom<AblationRepr> for AblationConfig {
    type Error = String;

    fn try_from(r: AblationRepr) -> Result<Self, String> {
        let cfg = match r {
            AblationRepr::Name(n) => {
                Self::from_name(&n).ok_or_else(|| format!("unknown ablation {n:?}; expected b1..b6"))?
            }
            AblationRepr::Flags {
                use_self_attention,
                use_cross_interaction,
                use_gating,
                use_deep_fusion,
            } => Self::flags(use_self_attention, use_cross_interaction, use_gating, use_deep_fusion),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

impl From<AblationConfig> for AblationRepr {
    fn from(c: AblationConfig) -> Self {
        match c.name() {
            Some(n) => AblationRepr::Name(n.to_string()),
            None => AblationRepr::Flags {
                use_self_attention: c.use_self_attention,
                use_cross_interaction: c.use_cross_interaction,
                use_gating: c.use_gating,
                use_deep_fusion: c.use_deep_fusion,
            },
        }
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::B6
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(
                f,
                "custom(self={}, cross={}, gate={}, deep={})",
                self.use_self_attention, self.use_cross_interaction, self.use_gating, self.use_deep_fusion
            ),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

/// Input widths per modality and the per-direction GRU hidden size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub text: usize,
    pub audio: usize,
    pub video: usize,
    pub hidden: usize,
    /// Width of the ReLU layer in the prediction head; defaults to `2 * hidden`.
    #[serde(default)]
    pub head_hidden: Option<usize>,
}

impl ModelDims {
    pub fn new(text: usize, audio: usize, video: usize, hidden: usize) -> Self {
        Self {
            text,
            audio,
            video,
            hidden,
            head_hidden: None,
        }
    }

    pub fn input(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }

    /// Width of every contextual representation.
    pub fn d(&self) -> usize {
        2 * self.hidden
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.d())
    }

    pub fn head_input(&self, ablation: &AblationConfig) -> usize {
        let d = self.d();
        if ablation.use_deep_fusion {
            3 * d
        } else if ablation.use_cross_interaction {
            9 * d
        } else {
            3 * d
        }
    }
}

/// Fusion kernel for one ordered pair: `W_F [d x 4d]`, `b_F [1 x d]`,
/// `W_G [4d x 1]`, `b_G [1 x 1]`. The gate is one scalar per utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionKernelParams {
    pub width: usize,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
}

impl FusionKernelParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            width,
            w_f: store.add_glorot(format!("{prefix}.w_f"), width, 4 * width, rng),
            b_f: store.add_zeros(format!("{prefix}.b_f"), 1, width),
            w_g: store.add_glorot(format!("{prefix}.w_g"), 4 * width, 1, rng),
            b_g: store.add_zeros(format!("{prefix}.b_g"), 1, 1),
        }
    }
}

/// All trainable weights plus the layout describing where each block lives.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub store: ParamStore<T>,
    pub dims: ModelDims,
    pub ablation: AblationConfig,
    pub encoders: [BiGruParams; 3],
    /// Bilinear self-attention maps, one per modality.
    pub self_attn: [ParamId; 3],
    /// Bilinear cross-attention maps, one per entry of [`PAIRS`].
    pub cross_attn: [ParamId; 3],
    /// Fusion kernels, one per entry of [`FUSIONS`].
    pub fusion: [FusionKernelParams; 6],
    pub deep: [BiGruParams; 3],
    pub head_hidden: DenseParams,
    pub head_out: DenseParams,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-initialised parameters drawn from a seeded generator.
    ///
    /// Every block is allocated regardless of the ablation so that parameter
    /// names are stable; only the head width depends on it.
    pub fn new(dims: ModelDims, ablation: AblationConfig, seed: u64) -> Result<Self, ModelError> {
        ablation.validate()?;
        if dims.hidden == 0 || dims.text == 0 || dims.audio == 0 || dims.video == 0 {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dims.d();
        let h = dims.hidden;
        let encoders = Modality::ALL
            .map(|m| BiGruParams::new(&mut store, &format!("enc.{}", m.letter()), dims.input(m), h, &mut rng));
        let self_attn = Modality::ALL.map(|m| store.add_glorot(format!("self.{}", m.letter()), d, d, &mut rng));
        let cross_attn =
            PAIRS.map(|(p, q)| store.add_glorot(format!("cross.{}{}", p.letter(), q.letter()), d, d, &mut rng));
        let fusion = FUSIONS.map(|f| FusionKernelParams::new(&mut store, &format!("fuse.{}", f.label()), d, &mut rng));
        let deep =
            Modality::ALL.map(|m| BiGruParams::new(&mut store, &format!("deep.{}", m.letter()), 3 * d, h, &mut rng));
        let head_in = dims.head_input(&ablation);
        let head_hidden = DenseParams::new(&mut store, "head.hidden", head_in, dims.head_hidden(), &mut rng);
        let head_out = DenseParams::new(&mut store, "head.out", dims.head_hidden(), 2, &mut rng);
        Ok(Self {
            store,
            dims,
            ablation,
            encoders,
            self_attn,
            cross_attn,
            fusion,
            deep,
            head_hidden,
            head_out,
        })
    }

    /// Rebuilds the layout for `(dims, ablation)` around stored tensors,
    /// checking that every name and shape agrees.
    pub fn from_store(dims: ModelDims, ablation: AblationConfig, store: ParamStore<T>) -> Result<Self, ModelError> {
        let mut model = Self::new(dims, ablation, 0)?;
        if model.store.len() != store.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((name, want), (got_name, got)) in model.store.iter().zip(store.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {name} {}, found {got_name} {}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }
}

/// One video: per-modality `u x d_M` features and the real-utterance mask.
#[derive(Debug, Clone, Copy)]
pub struct VideoInput<'a, T> {
    pub features: [&'a Tensor<T>; 3],
    pub mask: &'a [bool],
}

/// How the fusion kernel uses its gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gating {
    /// `F = G·X + (1 − G)·Q` with the learned gate.
    Learned,
    /// `F = X`; no gate.
    Off,
    /// Gate replaced by a constant, for analysis.
    Forced(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout: f64,
    /// Overrides every learned gate with this constant.
    pub gate_override: Option<f64>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: 0.0,
            gate_override: None,
        }
    }

    pub fn train(dropout: f64) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            gate_override: None,
        }
    }
}

/// Both attention maps of one modality pair. `a_qp_t` is the transpose of
/// the column-softmax map, so both matrices are row-stochastic.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub c_qp: Var,
    pub c_pq: Var,
    pub a_pq: Var,
    pub a_qp_t: Var,
}

fn expect_width<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(TensorError::Shape {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

fn expect_square<T: Scalar>(g: &Graph<T>, op: &'static str, w: Var, d: usize) -> Result<(), TensorError> {
    let s = g.shape(w);
    if s.rows != d || s.cols != d {
        return Err(TensorError::Shape {
            op,
            left: s,
            right: Shape::new(d, d),
        });
    }
    Ok(())
}

/// `M = H W Hᵀ`, `A = masked row-softmax(M)`, `S = A H`. Returns `(S, A)`.
pub fn self_attention<T: Scalar>(g: &mut Graph<T>, w: Var, h: Var, mask: &[bool]) -> Result<(Var, Var), TensorError> {
    let s = g.shape(h);
    expect_square(g, "self_attention", w, s.cols)?;
    check_mask(s.rows, mask, "self_attention")?;
    let hw = g.matmul(h, w)?;
    let ht = g.transpose(h)?;
    let m = g.matmul(hw, ht)?;
    let a = g.softmax_rows(m, Some(&SoftmaxMask::outer(mask, mask)))?;
    let out = g.matmul(a, h)?;
    Ok((out, a))
}

fn check_mask(rows: usize, mask: &[bool], op: &'static str) -> Result<(), TensorError> {
    if mask.len() != rows {
        return Err(TensorError::Contract {
            op,
            reason: format!("mask length {} for {rows} rows", mask.len()),
        });
    }
    Ok(())
}

/// `M = H_P W H_Qᵀ`; `C_PQ = rowsoftmax(M) H_Q` and `C_QP = colsoftmax(M)ᵀ H_P`.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    hp: Var,
    hq: Var,
    mask: &[bool],
) -> Result<CrossAttention, TensorError> {
    expect_width(g, "cross_attention", hp, hq)?;
    let s = g.shape(hp);
    expect_square(g, "cross_attention", w, s.cols)?;
    check_mask(s.rows, mask, "cross_attention")?;
    let sm = SoftmaxMask::outer(mask, mask);
    let pw = g.matmul(hp, w)?;
    let qt = g.transpose(hq)?;
    let m = g.matmul(pw, qt)?;
    let a_pq = g.softmax_rows(m, Some(&sm))?;
    let c_pq = g.matmul(a_pq, hq)?;
    let mt = g.transpose(m)?;
    let a_qp_t = g.softmax_rows(mt, Some(&sm.transpose()))?;
    let c_qp = g.matmul(a_qp_t, hp)?;
    Ok(CrossAttention {
        c_qp,
        c_pq,
        a_pq,
        a_qp_t,
    })
}

/// Fusion of a cross-attended `P` with the contextual `Q`:
///
/// ```text
/// Z = [P, Q, P − Q, P ∘ Q]
/// X = tanh(Z W_Fᵀ + b_F)
/// G = σ(Z W_G + b_G)          one scalar per row
/// F = G·X + (1 − G)·Q
/// ```
///
/// Returns `F` and the `u x 1` gate (absent when gating is off).
pub fn fusion_kernel<T: Scalar>(
    g: &mut Graph<T>,
    k: &FusionKernelParams,
    p: Var,
    q: Var,
    gating: Gating,
) -> Result<(Var, Option<Var>), TensorError> {
    expect_width(g, "fusion_kernel", p, q)?;
    if g.shape(p).cols != k.width {
        return Err(TensorError::Shape {
            op: "fusion_kernel",
            left: g.shape(p),
            right: Shape::new(g.shape(p).rows, k.width),
        });
    }
    let diff = g.sub(p, q)?;
    let prod = g.hadamard(p, q)?;
    let z = g.concat_cols(&[p, q, diff, prod])?;
    let wf = g.param_t(k.w_f)?;
    let zf = g.matmul(z, wf)?;
    let bf = g.param(k.b_f);
    let xf = g.add_row(zf, bf)?;
    let x = g.tanh(xf)?;
    let gate = match gating {
        Gating::Off => return Ok((x, None)),
        Gating::Forced(value) => {
            let rows = g.shape(p).rows;
            g.constant(Tensor::full(rows, 1, T::of(value)))
        }
        Gating::Learned => {
            let wg = g.param(k.w_g);
            let zg = g.matmul(z, wg)?;
            let bg = g.param(k.b_g);
            let pre = g.add_row(zg, bg)?;
            g.sigmoid(pre)?
        }
    };
    let open = g.scale_rows(x, gate)?;
    let closed = g.affine(gate, -T::one(), T::one())?;
    let kept = g.scale_rows(q, closed)?;
    let f = g.add(open, kept)?;
    Ok((f, Some(gate)))
}

/// Output of the six-way gated cross fusion.
#[derive(Debug, Clone)]
pub struct CrossFusion {
    /// Fused tensors in [`FUSIONS`] order.
    pub fused: [Var; 6],
    pub gates: [Option<Var>; 6],
    /// Attention maps in [`PAIRS`] order.
    pub attention: [CrossAttention; 3],
}

/// Zeroes padded rows of `x`.
fn mask_rows<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let s = g.shape(x);
    let factor = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, s.cols))
        .collect();
    g.mul_const(x, Tensor::from_vec(s.rows, s.cols, factor)?)
}

/// Cross attention for every pair followed by the two fusion kernels that
/// consume it: `F_QP = fusion(C_QP, H_P)` and `F_PQ = fusion(C_PQ, H_Q)`.
pub fn gated_cross_fuse<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelParams<T>,
    h: &[Var; 3],
    mask: &[bool],
    gating: Gating,
) -> Result<CrossFusion, TensorError> {
    let mut fused = [None; 6];
    let mut gates = [None; 6];
    let mut attention = Vec::with_capacity(3);
    for (pair, &(pm, qm)) in PAIRS.iter().enumerate() {
        let w = g.param(model.cross_attn[pair]);
        let (hp, hq) = (h[pm.index()], h[qm.index()]);
        let ca = cross_attention(g, w, hp, hq, mask)?;
        for (source, target, c, ctx) in [(qm, pm, ca.c_qp, hp), (pm, qm, ca.c_pq, hq)] {
            let i = fusion_index(source, target);
            let (f, gate) = fusion_kernel(g, &model.fusion[i], c, ctx, gating)?;
            fused[i] = Some(mask_rows(g, f, mask)?);
            gates[i] = gate;
        }
        attention.push(ca);
    }
    Ok(CrossFusion {
        fused: fused.map(|f| f.expect("all six fusions computed")),
        gates,
        attention: attention.try_into().expect("three pairs"),
    })
}

/// Bi-GRU over the per-utterance concatenation `[S_i, F1_i, F2_i]`.
pub fn deep_fusion<T: Scalar>(
    g: &mut Graph<T>,
    p: &BiGruParams,
    s: Var,
    f1: Var,
    f2: Var,
    mask: &[bool],
) -> Result<Var, TensorError> {
    expect_width(g, "deep_fusion", s, f1)?;
    expect_width(g, "deep_fusion", s, f2)?;
    let joined = g.concat_cols(&[s, f1, f2])?;
    bigru_forward(g, p, joined, mask)
}

/// Prediction head over the column concatenation of `features`:
/// dense + ReLU, dropout, dense(2), softmax. Returns `u x 2` probabilities.
pub fn predict<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelParams<T>,
    features: &[Var],
    opts: &ForwardOptions,
    rng: &mut impl Rng,
) -> Result<Var, TensorError> {
    let x = g.concat_cols(features)?;
    let hidden = dense_forward(g, &model.head_hidden, x, Activation::Relu)?;
    let hidden = dropout_forward(g, hidden, opts.dropout, opts.mode, rng)?;
    let logits = dense_forward(g, &model.head_out, hidden, Activation::None)?;
    g.softmax_rows(logits, None)
}

/// Per-video diagnostics recorded during [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub mask: Vec<bool>,
    /// `u x u` self-attention map per modality, when self attention is on.
    pub self_attention: [Option<Tensor<T>>; 3],
    /// `(A_PQ, A_QPᵀ)` per entry of [`PAIRS`], when cross interaction is on.
    pub cross_attention: [Option<(Tensor<T>, Tensor<T>)>; 3],
    /// Gate value per utterance for each entry of [`FUSIONS`], when gated.
    pub gates: [Option<Vec<T>>; 6],
}

impl<T: Scalar> ForwardTrace<T> {
    fn empty(mask: &[bool]) -> Self {
        Self {
            mask: mask.to_vec(),
            self_attention: [None, None, None],
            cross_attention: [None, None, None],
            gates: [None, None, None, None, None, None],
        }
    }

    /// Diagonal self-attention score `A_M[u, u]` for each utterance.
    pub fn self_scores_diagonal(&self, m: Modality) -> Option<Vec<T>> {
        let a = self.self_attention[m.index()].as_ref()?;
        Some((0..a.rows()).map(|i| a.get(i, i)).collect())
    }

    /// Mean attention each utterance receives, averaged over real query rows.
    pub fn self_scores_column_mean(&self, m: Modality) -> Option<Vec<T>> {
        let a = self.self_attention[m.index()].as_ref()?;
        let real: Vec<usize> = (0..a.rows()).filter(|&i| self.mask[i]).collect();
        let n = T::of(real.len().max(1) as f64);
        Some(
            (0..a.cols())
                .map(|j| real.iter().map(|&i| a.get(i, j)).sum::<T>() / n)
                .collect(),
        )
    }

    /// Mean gate over real utterances for one fusion.
    pub fn mean_gate(&self, fusion: usize) -> Option<T> {
        let gates = self.gates[fusion].as_ref()?;
        let real: Vec<T> = gates
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        if real.is_empty() {
            return None;
        }
        let n = T::of(real.len() as f64);
        Some(real.into_iter().sum::<T>() / n)
    }

    /// Every recorded attention matrix, labelled.
    pub fn attention_matrices(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            if let Some(a) = &self.self_attention[m.index()] {
                out.push((format!("self.{}", m.letter()), a));
            }
        }
        for (i, (p, q)) in PAIRS.iter().enumerate() {
            if let Some((apq, aqp)) = &self.cross_attention[i] {
                out.push((format!("cross.{}{}", p.letter(), q.letter()), apq));
                out.push((format!("cross.{}{}", q.letter(), p.letter()), aqp));
            }
        }
        out
    }
}

/// Records the full network for one (possibly padded) video and returns the
/// `u x 2` probability node with its trace. Padded rows carry meaningless
/// probabilities and must be excluded downstream.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelParams<T>,
    input: &VideoInput<'_, T>,
    opts: &ForwardOptions,
    rng: &mut impl Rng,
) -> Result<(Var, ForwardTrace<T>), TensorError> {
    let cfg = model.ablation;
    let mask = input.mask;
    let mut trace = ForwardTrace::empty(mask);

    let mut h = [None; 3];
    for m in Modality::ALL {
        let x = g.constant(input.features[m.index()].clone());
        let enc = bigru_forward(g, &model.encoders[m.index()], x, mask)?;
        h[m.index()] = Some(dropout_forward(g, enc, opts.dropout, opts.mode, rng)?);
    }
    let h = h.map(|v| v.expect("encoded"));

    let mut unimodal = h;
    if cfg.use_self_attention {
        for m in Modality::ALL {
            let w = g.param(model.self_attn[m.index()]);
            let (s, a) = self_attention(g, w, h[m.index()], mask)?;
            unimodal[m.index()] = s;
            trace.self_attention[m.index()] = Some(g.value(a).clone());
        }
    }

    if !cfg.use_cross_interaction {
        let probs = predict(g, model, &unimodal, opts, rng)?;
        return Ok((probs, trace));
    }

    let gating = match (cfg.use_gating, opts.gate_override) {
        (false, _) => Gating::Off,
        (true, Some(v)) => Gating::Forced(v),
        (true, None) => Gating::Learned,
    };
    let cross = gated_cross_fuse(g, model, &h, mask, gating)?;
    for (i, ca) in cross.attention.iter().enumerate() {
        trace.cross_attention[i] = Some((g.value(ca.a_pq).clone(), g.value(ca.a_qp_t).clone()));
    }
    for (i, gate) in cross.gates.iter().enumerate() {
        trace.gates[i] = gate.map(|v| g.value(v).data().to_vec());
    }

    let features: Vec<Var> = if cfg.use_deep_fusion {
        let mut deep = Vec::with_capacity(3);
        for m in Modality::ALL {
            let k = m.index();
            // FUSIONS is grouped by target: entries 2k and 2k + 1 end in m.
            let out = deep_fusion(
                g,
                &model.deep[k],
                unimodal[k],
                cross.fused[2 * k],
                cross.fused[2 * k + 1],
                mask,
            )?;
            deep.push(out);
        }
        deep
    } else {
        unimodal.iter().chain(cross.fused.iter()).copied().collect()
    };
    let probs = predict(g, model, &features, opts, rng)?;
    Ok((probs, trace))
}

/// Convenience wrapper: forward on a fresh graph, returning values only.
pub fn infer<T: Scalar>(
    model: &ModelParams<T>,
    input: &VideoInput<'_, T>,
    opts: &ForwardOptions,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, ForwardTrace<T>), TensorError> {
    let mut g = Graph::new(&model.store);
    let (probs, trace) = forward(&mut g, model, input, opts, rng)?;
    Ok((g.value(probs).clone(), trace))
}
