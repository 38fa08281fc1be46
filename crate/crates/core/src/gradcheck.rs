//! Central finite-difference checks in f64 for every differentiable tape
//! operator, the residual blocks, ASPP and a whole reduced model.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::layers::ParamBuilder;
use crate::model::{Aspp, Block, BlockKind, BlockSpec, DecoderKind, ForwardCtx, ModelConfig, SegmentationModel};
use crate::tensor::{BatchNormParams, ConvParams, ParamId, ParamStore, PoolParams, Tape, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`]. Central differences at this step
/// carry roundoff of about `1e-10` in absolute terms, so gradients below the
/// floor are compared absolutely (error below `TOLERANCE * 1e-4`).
pub const DENOMINATOR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, DENOMINATOR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    /// Scalar coordinates compared across all instances.
    pub coordinates: usize,
    /// Coordinates left out because the stencil straddled a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<OpCheck>,
    pub step: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OpCheck::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<26} {:>9} {:>11} {:>7} {:>14}  status\n",
            "op", "instances", "coordinates", "skipped", "max rel error"
        );
        for c in &self.checks {
            s.push_str(&format!(
                "{:<26} {:>9} {:>11} {:>7} {:>14.3e}  {}\n",
                c.op,
                c.instances,
                c.coordinates,
                c.skipped,
                c.max_rel_error,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "step {:e}, tolerance {:e}, {:.1} s\n",
            self.step,
            self.tolerance,
            self.elapsed.as_secs_f64()
        ));
        s
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Also check blocks, ASPP and the reduced model.
    pub composites: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { instances: 20, seed: 0, composites: true }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Weighted sum of `out` so that every output element reaches the scalar.
fn project(tape: &mut Tape<f64>, out: &Var<f64>, weights: &Tensor<f64>) -> Result<Var<f64>> {
    if out.value().numel() == 1 {
        Ok(out.clone())
    } else {
        tape.weighted_sum(out, weights)
    }
}

type OpFn<'a> = dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'a;

/// Outcome of comparing analytic and numeric gradients over a set of coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Agreement {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±STEP` stencil changed a relu sign or a max-pool
    /// argmax; the function is not differentiable across such a stencil.
    pub skipped: usize,
}

impl Agreement {
    fn merge(&mut self, other: Agreement) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    /// Records one central difference; `evals` are the (value, fingerprint)
    /// pairs at `+STEP` and `-STEP`.
    fn record(&mut self, analytic: f64, base: u64, plus: (f64, u64), minus: (f64, u64)) {
        if plus.1 != base || minus.1 != base {
            self.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * STEP);
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.checked += 1;
    }
}

fn fingerprinted(tape: &Tape<f64>, value: f64) -> (f64, u64) {
    (value, tape.kink_fingerprint().unwrap_or(0))
}

/// Compares tape gradients of `f(inputs)` (projected with random weights)
/// against central differences over every input coordinate.
pub fn check_op(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, f: &OpFn<'_>) -> Result<Agreement> {
    let mut tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let weights = randn(rng, out.shape());
    let loss = project(&mut tape, &out, &weights)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::inference().with_kink_fingerprint();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = project(&mut tape, &out, &weights)?.value().item();
        Ok(fingerprinted(&tape, value))
    };
    let base = eval(inputs)?.1;
    let mut agreement = Agreement::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            agreement.record(analytic[i].data()[j], base, plus, minus);
        }
    }
    Ok(agreement)
}

/// A network piece whose parameters live in a store, reduced to a scalar.
trait Scalarized {
    fn store(&self) -> &ParamStore<f64>;
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
    fn loss(&self, tape: &mut Tape<f64>, x: &Var<f64>) -> Result<Var<f64>>;
}

/// Checks the gradient of a scalarized network with respect to a random
/// sample of `input_coords` coordinates of `x` and `per_tensor` coordinates
/// of every trainable tensor.
fn check_network<N: Scalarized>(
    net: &mut N,
    x: &Tensor<f64>,
    per_tensor: usize,
    input_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Agreement> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = net.loss(&mut tape, &xv)?;
    let grads = tape.backward(&loss)?;
    let x_grad = grads.get(&xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    net.store_mut().zero_grad();
    net.store_mut().accumulate_grads(&tape, &grads)?;
    drop((tape, grads, loss, xv));

    let eval = |net: &N, x: &Tensor<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::inference().with_kink_fingerprint();
        let xv = tape.constant(x.clone());
        let value = net.loss(&mut tape, &xv)?.value().item();
        Ok(fingerprinted(&tape, value))
    };
    let base = eval(net, x)?.1;
    let mut agreement = Agreement::default();

    let mut xw = x.clone();
    let mut idx: Vec<usize> = (0..x.numel()).collect();
    idx.shuffle(rng);
    for &j in idx.iter().take(input_coords) {
        let v = x.data()[j];
        xw.data_mut()[j] = v + STEP;
        let plus = eval(net, &xw)?;
        xw.data_mut()[j] = v - STEP;
        let minus = eval(net, &xw)?;
        xw.data_mut()[j] = v;
        agreement.record(x_grad.data()[j], base, plus, minus);
    }

    let ids: Vec<(ParamId, usize)> =
        net.store().iter().filter(|(_, p)| p.kind.is_trainable()).map(|(id, p)| (id, p.numel())).collect();
    for (id, n) in ids {
        let analytic = net.store().get(id).grad.clone().unwrap_or_else(|| Tensor::zeros(net.store().value(id).shape()));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        for &j in idx.iter().take(per_tensor) {
            let v = net.store().value(id).data()[j];
            net.store_mut().get_mut(id).value_mut().data_mut()[j] = v + STEP;
            let plus = eval(net, x)?;
            net.store_mut().get_mut(id).value_mut().data_mut()[j] = v - STEP;
            let minus = eval(net, x)?;
            net.store_mut().get_mut(id).value_mut().data_mut()[j] = v;
            agreement.record(analytic.data()[j], base, plus, minus);
        }
    }
    Ok(agreement)
}

type PieceForward =
    Box<dyn Fn(&ParamStore<f64>, &mut Tape<f64>, &Var<f64>, &mut ForwardCtx<'_, f64>) -> Result<Var<f64>>>;

/// Block or ASPP in training mode, projected with fixed random weights.
struct Piece {
    store: ParamStore<f64>,
    forward: PieceForward,
    weights: Tensor<f64>,
    dropout_seed: u64,
}

impl Scalarized for Piece {
    fn store(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn loss(&self, tape: &mut Tape<f64>, x: &Var<f64>) -> Result<Var<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let mut ctx = ForwardCtx::train(&mut rng);
        let out = (self.forward)(&self.store, tape, x, &mut ctx)?;
        tape.weighted_sum(&out, &self.weights)
    }
}

/// Whole model in training mode (batch statistics, a fixed dropout mask)
/// under cross-entropy against fixed random targets.
struct ModelCase {
    model: SegmentationModel<f64>,
    targets: Vec<u8>,
    dropout_seed: u64,
}

impl Scalarized for ModelCase {
    fn store(&self) -> &ParamStore<f64> {
        self.model.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self.model.params_mut()
    }

    fn loss(&self, tape: &mut Tape<f64>, x: &Var<f64>) -> Result<Var<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let mut ctx = ForwardCtx::train(&mut rng);
        let logits = self.model.forward(tape, x, &mut ctx)?;
        tape.cross_entropy(&logits, &self.targets)
    }
}

/// Values bounded away from the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        v.signum() * (0.05 + v.abs())
    })
}

/// Distinct values with gaps far larger than the step, so no max-pool
/// window has a near tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.01 - n as f64 * 0.005)
}

type Case = (Vec<Tensor<f64>>, Box<OpFn<'static>>);

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
    Ok(match op {
        "conv2d" => {
            let groups = [1, 1, 2, 3][rng.random_range(0..4)];
            let cin = groups * rng.random_range(1..=2);
            let cout = groups * rng.random_range(1..=2);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let dilation = rng.random_range(1..=2);
            let padding = rng.random_range(0..=dilation * (k / 2));
            let bias = rng.random_bool(0.5);
            let params = ConvParams::new(stride, padding, dilation, groups);
            let (h, w) = (h + 2, w + 2);
            let mut inputs = vec![randn(rng, &[n, cin, h, w]), randn(rng, &[cout, cin / groups, k, k])];
            if bias {
                inputs.push(randn(rng, &[cout]));
            }
            (inputs, Box::new(move |t, v| t.conv2d(&v[0], &v[1], v.get(2), params)))
        }
        "batch_norm2d (train)" | "batch_norm2d (eval)" => {
            let training = op.ends_with("(train)");
            let c = rng.random_range(1..=3);
            let n = if training { 2 } else { n };
            let mean = randn(rng, &[c]);
            let var = Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0));
            let params = BatchNormParams { training, ..Default::default() };
            let inputs = vec![randn(rng, &[n, c, h, w]), randn(rng, &[c]), randn(rng, &[c])];
            (inputs, Box::new(move |t, v| Ok(t.batch_norm2d(&v[0], &v[1], &v[2], &mean, &var, params)?.0)))
        }
        "relu" => (vec![away_from_zero(rng, &[n, 2, h, w])], Box::new(|t, v| t.relu(&v[0]))),
        "max_pool2d" => {
            let params = if rng.random_bool(0.5) { PoolParams::new(3, 2, 1) } else { PoolParams::new(2, 2, 0) };
            (vec![distinct(rng, &[n, 2, h + 1, w + 1])], Box::new(move |t, v| t.max_pool2d(&v[0], params)))
        }
        "global_avg_pool2d" => (vec![randn(rng, &[n, 3, h, w])], Box::new(|t, v| t.global_avg_pool2d(&v[0]))),
        "bilinear_upsample" => {
            let (oh, ow) = (rng.random_range(2..=10), rng.random_range(2..=10));
            let align = rng.random_bool(0.5);
            (vec![randn(rng, &[n, 2, h, w])], Box::new(move |t, v| t.bilinear_upsample(&v[0], oh, ow, align)))
        }
        "softmax" => (vec![randn(rng, &[n, 4, h, w])], Box::new(|t, v| t.softmax(&v[0]))),
        "dropout" => {
            let seed: u64 = rng.random();
            (
                vec![randn(rng, &[n, 2, h, w])],
                Box::new(move |t, v| t.dropout(&v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(seed))),
            )
        }
        "add" => (vec![randn(rng, &[n, 2, h, w]), randn(rng, &[n, 2, h, w])], Box::new(|t, v| t.add(&v[0], &v[1]))),
        "concat" => {
            let parts = rng.random_range(2..=3);
            let inputs = (0..parts).map(|_| {
                let c = rng.random_range(1..=3);
                randn(rng, &[n, c, h, w])
            });
            (inputs.collect(), Box::new(|t, v| t.concat(&v.iter().collect::<Vec<_>>())))
        }
        "cross_entropy" => {
            let k = rng.random_range(2..=5);
            let targets: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..k as u8)).collect();
            (vec![randn(rng, &[n, k, h, w])], Box::new(move |t, v| t.cross_entropy(&v[0], &targets)))
        }
        "sum" => (vec![randn(rng, &[n, 2, h, w])], Box::new(|t, v| t.sum(&v[0]))),
        "weighted_sum" => {
            let weights = randn(rng, &[n, 2, h, w]);
            (vec![randn(rng, &[n, 2, h, w])], Box::new(move |t, v| t.weighted_sum(&v[0], &weights)))
        }
        _ => return Err(Error::InvalidArgument(format!("no gradient check for op '{op}'"))),
    })
}

/// Every differentiable operator on the tape.
pub const OPS: [&str; 14] = [
    "conv2d",
    "batch_norm2d (train)",
    "batch_norm2d (eval)",
    "relu",
    "max_pool2d",
    "global_avg_pool2d",
    "bilinear_upsample",
    "softmax",
    "dropout",
    "add",
    "concat",
    "cross_entropy",
    "sum",
    "weighted_sum",
];

fn block_piece(kind: BlockKind, rng: &mut ChaCha8Rng) -> Result<(Piece, Tensor<f64>)> {
    let cin = rng.random_range(2..=4);
    let stride = rng.random_range(1..=2);
    let cout = if rng.random_bool(0.5) { cin } else { rng.random_range(2..=4) };
    let cout = if kind == BlockKind::Bottleneck { 4 * rng.random_range(1..=2) } else { cout };
    let mut spec = BlockSpec::new(kind, cin, cout, stride);
    if matches!(kind, BlockKind::MbConv | BlockKind::FusedMbConv) {
        spec = spec.with_expansion(rng.random_range(1..=3));
    }
    if stride == 1 && rng.random_bool(0.5) {
        spec = spec.with_dilation(2);
    }
    let (block, store) = Block::new::<f64>(spec, rng.random())?;
    let x = randn(rng, &[2, cin, 6, 6]);
    let out_hw = 6usize.div_ceil(stride);
    let weights = randn(rng, &[2, cout, out_hw, out_hw]);
    let forward = Box::new(move |s: &ParamStore<f64>, t: &mut Tape<f64>, x: &Var<f64>, c: &mut ForwardCtx<'_, f64>| {
        block.forward(s, t, x, c)
    });
    Ok((Piece { store, forward, weights, dropout_seed: 0 }, x))
}

fn aspp_piece(rng: &mut ChaCha8Rng) -> Result<(Piece, Tensor<f64>)> {
    let (cin, cout) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let mut store = ParamStore::new();
    let aspp = Aspp::build(&mut ParamBuilder::new(&mut store, rng.random()), cin, cout, &[1, 2, 3, 4], 0.1)?;
    let x = randn(rng, &[2, cin, 5, 5]);
    let weights = randn(rng, &[2, cout, 5, 5]);
    let forward = Box::new(move |s: &ParamStore<f64>, t: &mut Tape<f64>, x: &Var<f64>, c: &mut ForwardCtx<'_, f64>| {
        aspp.forward(s, t, x, c)
    });
    Ok((Piece { store, forward, weights, dropout_seed: rng.random() }, x))
}

/// The reduced DeepLabV3+ used by the model check: two one-block stages,
/// ASPP and the full decoder head.
pub fn gradcheck_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        width: 4,
        aspp_channels: 4,
        low_level_channels: 4,
        decoder_channels: 4,
        seed,
        ..ModelConfig::tiny(DecoderKind::Deeplabv3plus)
    }
}

/// Shape of the model-check input.
pub const MODEL_INPUT: [usize; 4] = [1, 3, 32, 32];

fn model_case(rng: &mut ChaCha8Rng) -> Result<(ModelCase, Tensor<f64>)> {
    let model = SegmentationModel::new(gradcheck_model_config(rng.random()))?;
    let k = model.config().num_classes as u8;
    let [n, _, h, w] = MODEL_INPUT;
    let targets = (0..n * h * w).map(|_| rng.random_range(0..k)).collect();
    let x = randn(rng, &MODEL_INPUT);
    Ok((ModelCase { model, targets, dropout_seed: rng.random() }, x))
}

fn run_case(name: &str, instances: usize, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut total = Agreement::default();
    for _ in 0..instances {
        let agreement = match name {
            "block: basic" => {
                let (mut p, x) = block_piece(BlockKind::Basic, rng)?;
                check_network(&mut p, &x, 4, 12, rng)?
            }
            "block: bottleneck" => {
                let (mut p, x) = block_piece(BlockKind::Bottleneck, rng)?;
                check_network(&mut p, &x, 4, 12, rng)?
            }
            "block: mbconv" => {
                let (mut p, x) = block_piece(BlockKind::MbConv, rng)?;
                check_network(&mut p, &x, 4, 12, rng)?
            }
            "block: fused mbconv" => {
                let (mut p, x) = block_piece(BlockKind::FusedMbConv, rng)?;
                check_network(&mut p, &x, 4, 12, rng)?
            }
            "aspp" => {
                let (mut p, x) = aspp_piece(rng)?;
                check_network(&mut p, &x, 4, 12, rng)?
            }
            "model: deeplabv3+ tiny" => {
                let (mut m, x) = model_case(rng)?;
                check_network(&mut m, &x, 2, 8, rng)?
            }
            op => {
                let (inputs, f) = op_case(op, rng)?;
                check_op(&inputs, rng, f.as_ref())?
            }
        };
        total.merge(agreement);
    }
    Ok(OpCheck {
        op: name.to_string(),
        instances,
        coordinates: total.checked,
        skipped: total.skipped,
        max_rel_error: total.max_rel_error,
    })
}

/// Composite checks run after the operators.
pub const COMPOSITES: [&str; 6] =
    ["block: basic", "block: bottleneck", "block: mbconv", "block: fused mbconv", "aspp", "model: deeplabv3+ tiny"];

/// Runs the whole suite. Each check draws its instances from its own stream
/// of `seed`, so adding a check does not change the others.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut names: Vec<&str> = OPS.to_vec();
    if opts.composites {
        names.extend(COMPOSITES);
    }
    let mut checks = Vec::with_capacity(names.len());
    for (i, name) in names.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let check = run_case(name, opts.instances, &mut rng)?;
        log::debug!("gradcheck {}: max rel error {:.3e}", check.op, check.max_rel_error);
        checks.push(check);
    }
    Ok(GradcheckReport { checks, step: STEP, tolerance: TOLERANCE, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The recorded function is 2x, the evaluated one x.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, &[1, 1, 2, 2]);
        let agreement = check_op(&[x], &mut rng, &|t, v| {
            if t.is_recording() {
                t.add(&v[0], &v[0])
            } else {
                Ok(v[0].clone())
            }
        })
        .unwrap();
        assert!(agreement.max_rel_error > 0.3);
        assert_eq!(agreement.skipped, 0);
    }

    #[test]
    fn every_op_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for op in OPS {
            let (inputs, _) = op_case(op, &mut rng).unwrap();
            assert!(!inputs.is_empty());
        }
        assert!(op_case("nope", &mut rng).is_err());
    }
}
