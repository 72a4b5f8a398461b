//! Model inversion and model stealing by coordinate descent.
//!
//! The attacker holds the smashed data `f1(θ1, x)` and the client layer
//! layout. It alternates between moving the input estimate `x̃` (MSE plus a
//! TV penalty, clone frozen) and moving the clone parameters `θ̃1` (MSE only,
//! input frozen).

use crate::autograd::{Graph, TV_EPS};
use crate::error::{Error, Result};
use crate::model::LayerStack;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind, Param};
use crate::protocol::TapEntry;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How the TV sum is weighted against the (mean) smashed-data MSE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TvScale {
    /// `λ · TV(x̃) / numel(x̃)`: TV per input element, on the same footing as the MSE.
    #[default]
    PerPixel,
    /// `λ · TV(x̃)`, the raw sum.
    Sum,
}

impl std::str::FromStr for TvScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-pixel" => Ok(TvScale::PerPixel),
            "sum" => Ok(TvScale::Sum),
            other => Err(Error::Config(format!("unknown tv scale '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    /// TV coefficient.
    pub lambda: f32,
    pub tv_scale: TvScale,
    pub input_steps: usize,
    pub model_steps: usize,
    /// Upper bound on rounds; see `plateau_tol`. The objective keeps falling
    /// long after the estimate stops improving, as the clone co-adapts.
    pub rounds: usize,
    pub input_lr: f32,
    pub model_lr: f32,
    pub input_optimizer: OptimizerKind,
    pub model_optimizer: OptimizerKind,
    pub clamp: (f32, f32),
    /// Stop once the best objective improved by less than this fraction over
    /// the last `plateau_window` rounds. Zero disables the rule.
    pub plateau_tol: f32,
    pub plateau_window: usize,
    pub seed: u64,
}

/// TV weight used for a cut at `depth`: light for the first three layers,
/// stronger past that where the smashed data says less about the pixels.
pub fn default_lambda(depth: usize) -> f32 {
    if depth <= 3 {
        0.1
    } else {
        1.0
    }
}

impl InversionConfig {
    pub fn for_depth(depth: usize) -> Self {
        InversionConfig {
            lambda: default_lambda(depth),
            ..Self::default()
        }
    }

    /// Multiplier applied to the raw TV sum of an estimate with `numel` elements.
    pub fn tv_weight(&self, numel: usize) -> f32 {
        match self.tv_scale {
            TvScale::PerPixel => self.lambda / numel.max(1) as f32,
            TvScale::Sum => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if self.input_steps == 0 || self.model_steps == 0 || self.rounds == 0 {
            return bad("input_steps, model_steps and rounds must be >= 1");
        }
        if !(self.input_lr > 0.0 && self.model_lr > 0.0) {
            return bad("attack learning rates must be positive");
        }
        if self.clamp.0 >= self.clamp.1 {
            return bad("clamp range is empty");
        }
        Ok(())
    }
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            lambda: 0.1,
            tv_scale: TvScale::PerPixel,
            input_steps: 100,
            model_steps: 100,
            rounds: 40,
            input_lr: 0.001,
            model_lr: 0.001,
            input_optimizer: OptimizerKind::Adam,
            model_optimizer: OptimizerKind::Adam,
            clamp: (0.0, 1.0),
            plateau_tol: 1e-4,
            plateau_window: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// MSE plus the weighted TV at the end of the round.
    pub objective: f32,
    /// Against the true inputs, when the caller supplied them.
    pub mse_to_truth: Option<f32>,
    pub tv: f32,
}

/// The attacker's estimates: `x̃` and the clone `f̃1`.
pub struct AttackState {
    pub x: Param,
    pub clone: LayerStack,
    pub history: Vec<RoundMetrics>,
    x_opt: Optimizer,
    model_opt: Optimizer,
}

impl AttackState {
    /// Uniform-noise input estimate and a freshly initialised clone with the
    /// layout of `client`. `input_shape` is `[n, c, h, w]`.
    pub fn new(client: &LayerStack, input_shape: &[usize], cfg: &InversionConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let x = Tensor::uniform(input_shape, cfg.clamp.0, cfg.clamp.1, &mut rng);
        let clone = LayerStack::init_like(&client.layers, cfg.seed.wrapping_add(1));
        Self::with_estimates(x, clone, cfg)
    }

    pub fn with_estimates(x: Tensor, clone: LayerStack, cfg: &InversionConfig) -> Self {
        AttackState {
            x: Param::new(x),
            clone,
            history: Vec::new(),
            x_opt: Optimizer::new(OptimizerConfig::new(cfg.input_optimizer, cfg.input_lr)),
            model_opt: Optimizer::new(OptimizerConfig::new(cfg.model_optimizer, cfg.model_lr)),
        }
    }

    /// Current objective and the raw TV sum, no gradients.
    pub fn objective(&self, target: &Tensor, cfg: &InversionConfig) -> Result<(f32, f32)> {
        let mut g = Graph::new();
        let x = g.leaf(self.x.value.clone(), false);
        let out = self.clone.forward(&mut g, x, false)?.output;
        let t = g.leaf(target.clone(), false);
        let mse = g.mse(out, t)?;
        let tv = g.tv(x, TV_EPS)?;
        let (m, tv) = (g.value(mse).item(), g.value(tv).item());
        Ok((m + cfg.tv_weight(self.x.value.len()) * tv, tv))
    }
}

/// One step on `x̃` with the clone frozen; returns the objective before the
/// step. `x̃` is clamped afterwards.
pub fn input_update_step(state: &mut AttackState, target: &Tensor, cfg: &InversionConfig) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.leaf(state.x.value.clone(), true);
    let out = state.clone.forward(&mut g, x, false)?.output;
    let t = g.leaf(target.clone(), false);
    let mut obj = g.mse(out, t)?;
    if cfg.lambda > 0.0 {
        let tv = g.tv(x, TV_EPS)?;
        let tv = g.scale(tv, cfg.tv_weight(state.x.value.len()))?;
        obj = g.add(obj, tv)?;
    }
    let value = g.value(obj).item();
    let mut grads = g.backward(obj)?;
    state.x.grad = Some(grads.take(x).ok_or(Error::MissingGradient(x.index()))?);
    state.x_opt.step(&mut [&mut state.x])?;
    state.x.value.clamp_in_place(cfg.clamp.0, cfg.clamp.1);
    Ok(value)
}

/// One step on `θ̃1` with `x̃` frozen; returns the MSE before the step.
pub fn model_update_step(state: &mut AttackState, target: &Tensor, _cfg: &InversionConfig) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.leaf(state.x.value.clone(), false);
    let fwd = state.clone.forward(&mut g, x, true)?;
    let t = g.leaf(target.clone(), false);
    let mse = g.mse(fwd.output, t)?;
    let value = g.value(mse).item();
    let mut grads = g.backward(mse)?;
    state.clone.store_grads(&mut grads, &fwd)?;
    state.model_opt.step(&mut state.clone.params_mut())?;
    Ok(value)
}

/// Result of [`unsplit_invert`].
pub struct Inversion {
    /// Best-objective input estimates, one per tap entry row.
    pub x: Tensor,
    /// Clone at the end of the last round.
    pub clone: LayerStack,
    pub history: Vec<RoundMetrics>,
}

/// Runs the alternating attack over every captured smashed tensor jointly
/// (one `x̃` per example, one shared clone).
///
/// `client` supplies only the layer layout; its weights are never read.
/// `input_shape` is the per-example `[c, h, w]`. `truth`, when given, only
/// feeds the logged metrics.
pub fn unsplit_invert(
    entries: &[TapEntry],
    client: &LayerStack,
    input_shape: [usize; 3],
    cfg: &InversionConfig,
    truth: Option<&Tensor>,
) -> Result<Inversion> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("inversion needs at least one tap entry".into()));
    }
    let smashed: Vec<Tensor> = entries.iter().map(|e| e.smashed.clone()).collect();
    invert_targets(&Tensor::concat_batch(&smashed)?, client, input_shape, cfg, truth)
}

/// [`unsplit_invert`] on an already stacked target batch.
pub fn invert_targets(
    target: &Tensor,
    client: &LayerStack,
    input_shape: [usize; 3],
    cfg: &InversionConfig,
    truth: Option<&Tensor>,
) -> Result<Inversion> {
    cfg.validate()?;
    let [c, h, w] = input_shape;
    let mut state = AttackState::new(client, &[target.batch(), c, h, w], cfg);
    let mut best = (f32::INFINITY, state.x.value.clone());
    let mut best_per_round = Vec::new();
    for round in 0..cfg.rounds {
        for _ in 0..cfg.input_steps {
            input_update_step(&mut state, target, cfg)?;
        }
        for _ in 0..cfg.model_steps {
            model_update_step(&mut state, target, cfg)?;
        }
        let (objective, tv) = state.objective(target, cfg)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite("inversion objective"));
        }
        if objective < best.0 {
            best = (objective, state.x.value.clone());
        }
        state.history.push(RoundMetrics {
            round,
            objective,
            mse_to_truth: truth.map(|t| crate::eval::mse_images(&state.x.value, t)).transpose()?,
            tv,
        });
        log::debug!("round {round}: objective {objective:.6} tv {tv:.3}");
        best_per_round.push(best.0);
        let w = cfg.plateau_window;
        if cfg.plateau_tol > 0.0 && w > 0 && best_per_round.len() > w {
            let then = best_per_round[best_per_round.len() - 1 - w];
            if then - best.0 < cfg.plateau_tol * then.abs() {
                break;
            }
        }
    }
    Ok(Inversion {
        x: best.1,
        clone: state.clone,
        history: state.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, SplitModel};

    fn depth1() -> LayerStack {
        let m = SplitModel::build(Arch::Tiny, 3);
        m.into_parts(&[1]).unwrap().remove(0)
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let client = depth1();
        let x = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let target = client.predict(&x).unwrap();
        let cfg = InversionConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let mut s = AttackState::with_estimates(x.clone(), client.clone(), &cfg);
        assert_eq!(input_update_step(&mut s, &target, &cfg).unwrap(), 0.0);
        assert!(s.x.value.bits_eq(&x));
        assert_eq!(model_update_step(&mut s, &target, &cfg).unwrap(), 0.0);
        assert_eq!(s.clone, client);
    }

    #[test]
    fn steps_touch_disjoint_blocks() {
        let client = depth1();
        let x = Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let target = client.predict(&x).unwrap();
        let cfg = InversionConfig::default();
        let mut s = AttackState::new(&client, &[1, 1, 8, 8], &cfg);
        let (clone0, x0) = (s.clone.clone(), s.x.value.clone());
        input_update_step(&mut s, &target, &cfg).unwrap();
        assert_eq!(s.clone, clone0);
        assert!(!s.x.value.bits_eq(&x0));
        let x1 = s.x.value.clone();
        model_update_step(&mut s, &target, &cfg).unwrap();
        assert!(s.x.value.bits_eq(&x1));
        assert_ne!(s.clone, clone0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let client = depth1();
        let cfg = InversionConfig::default();
        let mut s = AttackState::new(&client, &[1, 1, 8, 8], &cfg);
        assert!(input_update_step(&mut s, &Tensor::zeros(&[1, 4, 4, 4]), &cfg).is_err());
    }

    #[test]
    fn default_lambda_schedule() {
        assert_eq!(default_lambda(1), 0.1);
        assert_eq!(default_lambda(3), 0.1);
        assert_eq!(default_lambda(4), 1.0);
    }
}
