//! Triple-resolution CNN front end with adaptive feature recalibration.
//!
//! Three parallel convolutional branches read the same 30-second epoch at
//! different temporal grains — first-layer kernels of 50, 100, and 400
//! samples (0.5 s, 1 s, 4 s at 100 Hz) — so transient events and slow
//! rhythms land in different channels. Each branch is three units of
//! conv → batch-norm → GELU → max-pool (the first unit also applies
//! dropout), and all branches are engineered to finish at the same output
//! length so their channels concatenate into one `[batch, channels, time]`
//! map.
//!
//! The concatenated map then passes through adaptive recalibration: a
//! squeeze (global average over time), an excitation bottleneck
//! (linear → ReLU → linear → sigmoid) producing a per-channel gate in
//! (0, 1), and a scale step `x * gate + x` whose additive shortcut keeps a
//! closed gate from erasing a channel.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::nn::gradcheck::{grad_check, GradCheckReport};
use crate::nn::{conv_output_len, init, Activation, BnState, Mode};

/// Batch-norm momentum used by every unit.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Geometry of one convolutional branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// First-unit kernel length in samples.
    pub kernel_size: usize,
    /// First-unit stride.
    pub stride: usize,
    /// First-unit symmetric zero padding.
    pub padding: usize,
    /// Output channels of the three conv units.
    pub channel_plan: [usize; 3],
    /// Kernel length of the two inner units (stride 1).
    pub inner_kernel: usize,
    /// Symmetric padding of the two inner units.
    pub inner_padding: usize,
    /// `(window, stride)` of the max-pool after each unit.
    pub pool_windows: [(usize, usize); 3],
    /// Dropout probability after the first pool.
    pub dropout_p: f64,
}

impl BranchConfig {
    /// Kernel/stride/padding of unit `i`.
    fn unit_geometry(&self, unit: usize) -> (usize, usize, usize) {
        if unit == 0 {
            (self.kernel_size, self.stride, self.padding)
        } else {
            (self.inner_kernel, 1, self.inner_padding)
        }
    }

    /// Length after each of the six stages (conv, pool, conv, pool, conv,
    /// pool), or `None` if some stage does not fit.
    pub fn stage_lengths(&self, input: usize) -> Option<Vec<usize>> {
        let mut lens = Vec::with_capacity(6);
        let mut l = input;
        for unit in 0..3 {
            let (k, s, p) = self.unit_geometry(unit);
            l = conv_output_len(l, k, s, p)?;
            lens.push(l);
            let (pw, ps) = self.pool_windows[unit];
            l = conv_output_len(l, pw, ps, 0)?;
            lens.push(l);
        }
        Some(lens)
    }

    /// Final output length for the given input length.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        self.stage_lengths(input).map(|v| *v.last().unwrap())
    }

    /// Channels the branch emits.
    pub fn out_channels(&self) -> usize {
        self.channel_plan[2]
    }
}

/// The full front-end configuration: three branches plus the excitation
/// bottleneck reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrcnnConfig {
    pub branches: [BranchConfig; 3],
    /// Excitation bottleneck divisor: hidden width = channels / reduction.
    pub reduction: usize,
}

fn branch(
    kernel_size: usize,
    stride: usize,
    padding: usize,
    channel_plan: [usize; 3],
    inner_kernel: usize,
    inner_padding: usize,
    pool_windows: [(usize, usize); 3],
    dropout_p: f64,
) -> BranchConfig {
    BranchConfig {
        kernel_size,
        stride,
        padding,
        channel_plan,
        inner_kernel,
        inner_padding,
        pool_windows,
        dropout_p,
    }
}

impl TrcnnConfig {
    /// Workstation-scale geometry: small channel counts, output length 13.
    pub fn desk() -> Self {
        Self::desk_with(ChannelScale::Desk)
    }

    /// Full-scale geometry (64/128 channels per branch), output length 13.
    pub fn paper() -> Self {
        Self::desk_with(ChannelScale::Paper)
    }

    /// Tiny geometry for gradient checking: output length 12.
    pub fn toy() -> Self {
        let plan = [2, 3, 3];
        let p = 0.0;
        TrcnnConfig {
            branches: [
                branch(50, 6, 0, plan, 8, 0, [(8, 2), (4, 4), (8, 4)], p),
                branch(100, 12, 0, plan, 8, 0, [(8, 2), (4, 4), (9, 1)], p),
                branch(400, 50, 150, plan, 7, 0, [(4, 2), (2, 1), (4, 1)], p),
            ],
            reduction: 3,
        }
    }

    /// Reversal-aligned geometry: at every conv and pool the stride divides
    /// `padded_length - window` exactly, so flipping the input time axis
    /// flips the output time axis (given symmetric kernels). Used by the
    /// direction-equivalence checks.
    pub fn reversal_aligned(plan: [usize; 3]) -> Self {
        TrcnnConfig {
            branches: [
                branch(50, 6, 1, plan, 8, 0, [(9, 2), (4, 4), (4, 4)], 0.0),
                branch(100, 12, 2, plan, 8, 0, [(9, 2), (3, 4), (9, 1)], 0.0),
                branch(400, 50, 0, plan, 7, 3, [(5, 2), (3, 1), (11, 1)], 0.0),
            ],
            reduction: 3,
        }
    }

    fn desk_with(scale: ChannelScale) -> Self {
        let plan = match scale {
            ChannelScale::Desk => [4, 8, 8],
            ChannelScale::Paper => [64, 128, 128],
        };
        let p = 0.5;
        TrcnnConfig {
            branches: [
                branch(50, 6, 0, plan, 8, 0, [(8, 2), (4, 4), (4, 4)], p),
                branch(100, 12, 0, plan, 8, 0, [(8, 2), (4, 4), (8, 1)], p),
                branch(400, 50, 150, plan, 7, 0, [(4, 2), (2, 1), (3, 1)], p),
            ],
            reduction: match scale {
                ChannelScale::Desk => 4,
                ChannelScale::Paper => 16,
            },
        }
    }

    /// Check geometry consistency for the given input length.
    pub fn validate(&self, input_len: usize) -> Result<()> {
        let kernels: Vec<usize> = self.branches.iter().map(|b| b.kernel_size).collect();
        if kernels != [50, 100, 400] {
            return Err(Error::Config(format!(
                "branch kernel sizes must be [50, 100, 400] (0.5 s / 1 s / 4 s), found {kernels:?}"
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("excitation reduction must be >= 1".into()));
        }
        let mut out_len = None;
        for (i, b) in self.branches.iter().enumerate() {
            if b.channel_plan.contains(&0) {
                return Err(Error::Config(format!("branch {i} has a zero-channel unit")));
            }
            if !(0.0..1.0).contains(&b.dropout_p) {
                return Err(Error::Config(format!(
                    "branch {i} dropout {} outside [0, 1)",
                    b.dropout_p
                )));
            }
            let l = b.output_len(input_len).ok_or_else(|| {
                Error::Config(format!("branch {i} geometry does not fit input length {input_len}"))
            })?;
            match out_len {
                None => out_len = Some(l),
                Some(prev) if prev != l => {
                    return Err(Error::Config(format!(
                        "branch output lengths disagree: {prev} vs {l} — channels cannot concatenate"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Common output length of the three branches.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        self.branches[0].output_len(input_len)
    }

    /// Channels after concatenation.
    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(BranchConfig::out_channels).sum()
    }
}

enum ChannelScale {
    Desk,
    Paper,
}

/// Parameter handles of one conv unit.
#[derive(Debug, Clone)]
struct ConvUnit {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Parameter handles of one branch.
#[derive(Debug, Clone)]
struct BranchParams {
    units: [ConvUnit; 3],
}

/// Excitation bottleneck parameters.
#[derive(Debug, Clone)]
pub struct AfmParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// All front-end parameter handles.
#[derive(Debug, Clone)]
pub struct TrcnnParams {
    branches: Vec<BranchParams>,
    pub afm: AfmParams,
}

/// Mutable batch-norm state, one entry per conv unit (branch-major).
#[derive(Debug, Clone)]
pub struct TrcnnStates {
    bn: Vec<BnState>,
}

impl TrcnnParams {
    /// Register all front-end tensors in `store`.
    pub fn new(store: &mut ParamStore, cfg: &TrcnnConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut branches = Vec::with_capacity(3);
        for (bi, bcfg) in cfg.branches.iter().enumerate() {
            let mut units = Vec::with_capacity(3);
            let mut cin = 1;
            for unit in 0..3 {
                let cout = bcfg.channel_plan[unit];
                let (k, _, _) = bcfg.unit_geometry(unit);
                let prefix = format!("trcnn.b{bi}.u{unit}");
                units.push(ConvUnit {
                    w: store.add(format!("{prefix}.conv.w"), init::conv_weight(rng, cout, cin, k)),
                    b: store.add(format!("{prefix}.conv.b"), init::bias(rng, cout, cin * k)),
                    gamma: store.add(
                        format!("{prefix}.bn.gamma"),
                        crate::tensor::NdArray::full(&[cout], 1.0),
                    ),
                    beta: store
                        .add(format!("{prefix}.bn.beta"), crate::tensor::NdArray::zeros(&[cout])),
                });
                cin = cout;
            }
            branches.push(BranchParams { units: units.try_into().expect("three units") });
        }
        let c = cfg.out_channels();
        let hidden = (c / cfg.reduction).max(1);
        let afm = AfmParams {
            w1: store.add("afm.w1", init::linear_weight(rng, hidden, c)),
            b1: store.add("afm.b1", init::bias(rng, hidden, c)),
            w2: store.add("afm.w2", init::linear_weight(rng, c, hidden)),
            b2: store.add("afm.b2", init::bias(rng, c, hidden)),
        };
        TrcnnParams { branches, afm }
    }

    /// Fresh batch-norm states matching this front end.
    pub fn fresh_states(&self, cfg: &TrcnnConfig) -> TrcnnStates {
        let mut bn = Vec::with_capacity(9);
        for bcfg in &cfg.branches {
            for unit in 0..3 {
                bn.push(BnState::new(bcfg.channel_plan[unit]));
            }
        }
        TrcnnStates { bn }
    }
}

impl TrcnnStates {
    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }
}

/// One branch: three units of conv → BN → GELU → pool, dropout after the
/// first pool.
#[allow(clippy::too_many_arguments)]
fn branch_forward(
    g: &Graph,
    bcfg: &BranchConfig,
    params: &BranchParams,
    bn: &mut [BnState],
    store: &ParamStore,
    x: &Var,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut h = x.clone();
    for unit in 0..3 {
        let (k, s, p) = bcfg.unit_geometry(unit);
        debug_assert_eq!(store.value(params.units[unit].w).shape()[2], k);
        let w = g.param(store, params.units[unit].w);
        let b = g.param(store, params.units[unit].b);
        let gamma = g.param(store, params.units[unit].gamma);
        let beta = g.param(store, params.units[unit].beta);
        h = g.conv1d(&h, &w, &b, s, p)?;
        h = g.batch_norm1d(&h, &gamma, &beta, &mut bn[unit], mode, BN_MOMENTUM, BN_EPS)?;
        h = g.activation(&h, Activation::Gelu)?;
        let (pw, ps) = bcfg.pool_windows[unit];
        h = g.max_pool1d(&h, pw, ps)?;
        if unit == 0 {
            h = g.dropout(&h, bcfg.dropout_p, mode, rng)?;
        }
    }
    Ok(h)
}

/// Squeeze: global average over time, `[b, c, t]` to `[b, c]`.
pub fn feature_squeeze(g: &Graph, x: &Var) -> Result<Var> {
    g.mean_last(x)
}

/// Excite: two-layer bottleneck ending in a sigmoid gate in (0, 1).
pub fn feature_excite(g: &Graph, z: &Var, w1: &Var, b1: &Var, w2: &Var, b2: &Var) -> Result<Var> {
    let h = g.activation(&g.linear(z, w1, b1)?, Activation::Relu)?;
    g.activation(&g.linear(&h, w2, b2)?, Activation::Sigmoid)
}

/// Scale: per-channel gate with an additive identity shortcut,
/// `y = x * s + x`.
pub fn feature_scale(g: &Graph, x: &Var, s: &Var) -> Result<Var> {
    let gated = g.mul_channel(x, s)?;
    g.add(&gated, x)
}

/// Full recalibration block over a `[batch, channels, time]` map.
pub fn afm_forward(
    g: &Graph,
    afm: &AfmParams,
    store: &ParamStore,
    x: &Var,
) -> Result<Var> {
    let w1 = g.param(store, afm.w1);
    let b1 = g.param(store, afm.b1);
    let w2 = g.param(store, afm.w2);
    let b2 = g.param(store, afm.b2);
    let z = feature_squeeze(g, x)?;
    let s = feature_excite(g, &z, &w1, &b1, &w2, &b2)?;
    feature_scale(g, x, &s)
}

/// Front-end forward pass: `[batch, 1, length]` in, recalibrated
/// `[batch, channels, out_len]` out.
#[allow(clippy::too_many_arguments)]
pub fn trcnn_forward(
    g: &Graph,
    cfg: &TrcnnConfig,
    params: &TrcnnParams,
    states: &mut TrcnnStates,
    store: &ParamStore,
    x: &Var,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(3);
    for (bi, (bcfg, bp)) in cfg.branches.iter().zip(&params.branches).enumerate() {
        let bn = &mut states.bn[bi * 3..(bi + 1) * 3];
        outs.push(branch_forward(g, bcfg, bp, bn, store, x, mode, rng)?);
    }
    let refs: Vec<&Var> = outs.iter().collect();
    let cat = g.concat_channels(&refs)?;
    afm_forward(g, &params.afm, store, &cat)
}

/// Finite-difference reports for the recalibration block and a compact
/// branch wiring (the full-scale branches are covered by the primitive
/// suite plus the end-to-end model check).
pub fn grad_check_reports(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(0xafa);
    let mut out = Vec::new();

    // Recalibration block over a 6-channel map, all tensors as inputs.
    let c = 6;
    let hidden = 2;
    let mk = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        crate::tensor::NdArray::from_vec(
            shape,
            (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let inputs = [
        mk(&mut rng, &[2, c, 4]),
        mk(&mut rng, &[hidden, c]),
        mk(&mut rng, &[hidden]),
        mk(&mut rng, &[c, hidden]),
        mk(&mut rng, &[c]),
    ];
    out.push(grad_check("afm_block", &inputs, tolerance, |g, v| {
        let z = feature_squeeze(g, &v[0])?;
        let s = feature_excite(g, &z, &v[1], &v[2], &v[3], &v[4])?;
        feature_scale(g, &v[0], &s)
    })?);

    // One miniature branch: conv(4, stride 2) -> BN -> GELU -> pool(2, 2),
    // exercising the exact unit wiring on a checkable input size.
    let inputs = [
        mk(&mut rng, &[2, 1, 24]),
        mk(&mut rng, &[3, 1, 4]),
        mk(&mut rng, &[3]),
        mk(&mut rng, &[3]),
        mk(&mut rng, &[3]),
    ];
    out.push(grad_check("cnn_unit", &inputs, tolerance, |g, v| {
        let mut state = BnState::new(3);
        let h = g.conv1d(&v[0], &v[1], &v[2], 2, 0)?;
        let h = g.batch_norm1d(&h, &v[3], &v[4], &mut state, Mode::Train, BN_MOMENTUM, BN_EPS)?;
        let h = g.activation(&h, Activation::Gelu)?;
        g.max_pool1d(&h, 2, 2)
    })?);

    Ok(out)
}
