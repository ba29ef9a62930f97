use std::sync::Arc;

use serde::Serialize;

use crate::arch::{ArchitectureSpec, Block, DecoupledModel, Head, UnitSpec};
use crate::autodiff::{
    backward, compare_gradients, grad_check, GradCheckConfig, GradCheckReport, Tape, Var,
};
use crate::error::Result;
use crate::nn::{
    batchnorm_train, conv2d, dense, global_avg_pool, maxpool2d, softmax_cross_entropy,
    Conv2dGeometry, Mode, Padding, Param, Pass, BN_EPS,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckCase {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

impl GradCheckCase {
    fn new(name: impl Into<String>, report: GradCheckReport) -> Self {
        Self {
            name: name.into(),
            coordinates: report.checked,
            max_rel_error: report.max_rel_error,
            passed: report.passed,
            failure: report.failure,
        }
    }
}

/// Forward in training mode with parameters held as constants, for the
/// perturbed evaluations.
const PROBE: Pass = Pass {
    mode: Mode::Train,
    trainable: false,
};

/// A scalar loss over a set of model parameters.
trait Objective {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
    fn loss(&mut self, tape: &mut Tape<f64>, pass: Pass) -> Result<Var<f64>>;
}

/// Compares reverse-mode parameter gradients of `obj` with central
/// differences taken by perturbing the parameters in place.
fn check_objective(obj: &mut impl Objective, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = obj.loss(&mut tape, Pass::TRAIN)?;
    let grads = backward(&tape, &loss)?;
    drop((tape, loss));
    let analytic: Vec<Tensor<f64>> = obj
        .params_mut()
        .iter()
        .map(|p| {
            grads
                .param(p.id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for (p, a) in analytic.iter().enumerate() {
        let mut g = Tensor::zeros(a.shape());
        for i in 0..a.len() {
            let orig = obj.params_mut()[p].value.data()[i];
            obj.params_mut()[p].value_mut().data_mut()[i] = orig + cfg.step;
            let plus = probe_value(obj)?;
            obj.params_mut()[p].value_mut().data_mut()[i] = orig - cfg.step;
            let minus = probe_value(obj)?;
            obj.params_mut()[p].value_mut().data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * cfg.step);
        }
        numeric.push(g);
    }
    Ok(compare_gradients(&analytic, &numeric, cfg))
}

fn probe_value(obj: &mut impl Objective) -> Result<f64> {
    obj.loss(&mut Tape::new(), PROBE)?.value().item()
}

struct LocalLoss<'a> {
    block: Block<f64>,
    input: Arc<Tensor<f64>>,
    labels: &'a [usize],
}

impl Objective for LocalLoss<'_> {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.block.params_mut()
    }

    fn loss(&mut self, tape: &mut Tape<f64>, pass: Pass) -> Result<Var<f64>> {
        let h = self
            .block
            .forward(tape, &Var::from_arc(Arc::clone(&self.input)), pass)?;
        Ok(self.block.head_mut().loss(tape, &h, self.labels, pass)?.0)
    }
}

struct GlobalLoss<'a> {
    head: Head<f64>,
    input: Arc<Tensor<f64>>,
    labels: &'a [usize],
}

impl Objective for GlobalLoss<'_> {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.head.params_mut()
    }

    fn loss(&mut self, tape: &mut Tape<f64>, pass: Pass) -> Result<Var<f64>> {
        let x = Var::from_arc(Arc::clone(&self.input));
        Ok(self.head.loss(tape, &x, self.labels, pass)?.0)
    }
}

/// Three-block model mixing plain and residual units, under 5k parameters.
pub fn gradcheck_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        name: "gradcheck".into(),
        in_channels: 2,
        input_size: 6,
        num_classes: 4,
        stem: None,
        units: vec![
            UnitSpec::Plain {
                out_channels: 4,
                pool: false,
            },
            UnitSpec::Basic {
                out_channels: 4,
                stride: 1,
            },
            UnitSpec::Basic {
                out_channels: 6,
                stride: 2,
            },
        ],
    }
}

/// Each local loss against its own block and head, and the output-layer
/// loss against the output layer, every block fed the detached output of
/// the block before it.
pub fn model_cases(seed: u64, cfg: &GradCheckConfig) -> Result<(usize, Vec<GradCheckCase>)> {
    let spec = gradcheck_spec();
    let model = DecoupledModel::<f64>::build(&spec, 3, seed)?;
    let count = model.param_count();
    let mut rng = Rng::with_stream(seed, 0x6c);
    let batch = 4;
    let x: Tensor<f64> = rng.normal(
        &[batch, spec.in_channels, spec.input_size, spec.input_size],
        0.0,
        1.0,
    )?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(spec.num_classes)).collect();

    let mut cases = Vec::new();
    let mut input = Arc::new(x);
    for block in model.blocks() {
        let mut obj = LocalLoss {
            block: block.clone(),
            input: Arc::clone(&input),
            labels: &labels,
        };
        let report = check_objective(&mut obj, cfg)?;
        cases.push(GradCheckCase::new(
            format!("model: local loss {}", block.index() + 1),
            report,
        ));
        let mut tape = Tape::new();
        input = Arc::clone(
            block
                .clone()
                .forward(&mut tape, &Var::from_arc(input), Pass::TRAIN)?
                .value_arc(),
        );
    }
    let mut obj = GlobalLoss {
        head: model.classifier().clone(),
        input,
        labels: &labels,
    };
    cases.push(GradCheckCase::new(
        "model: output-layer loss",
        check_objective(&mut obj, cfg)?,
    ));
    Ok((count, cases))
}

/// Every layer kind on random inputs; outputs are reduced against a fixed
/// random probe so each output coordinate matters.
pub fn layer_cases(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<GradCheckCase>> {
    let mut rng = Rng::with_stream(seed, 0x1a);
    let mut n = |shape: &[usize]| rng.normal::<f64>(shape, 0.0, 1.0);
    let probed = |tape: &mut Tape<f64>, y: Var<f64>, probe: &Tensor<f64>| -> Result<Var<f64>> {
        let y = tape.mul(&y, &Var::constant(probe.clone()))?;
        tape.sum(&y)
    };
    let mut cases = Vec::new();

    for (name, geom, out) in [
        ("conv 3x3 same", Conv2dGeometry::new(3, 1, Padding::Same), 5),
        (
            "conv 3x3 stride 2",
            Conv2dGeometry::new(3, 2, Padding::Same),
            3,
        ),
        (
            "conv 1x1 valid",
            Conv2dGeometry::new(1, 1, Padding::Valid),
            5,
        ),
    ] {
        let (x, w, b) = (
            n(&[2, 2, 5, 5])?,
            n(&[3, 2, geom.kernel, geom.kernel])?,
            n(&[3])?,
        );
        let probe = n(&[2, 3, out, out])?;
        let r = grad_check(
            |t, p| {
                let y = conv2d(t, &p[0], &p[1], Some(&p[2]), geom)?;
                probed(t, y, &probe)
            },
            &[x, w, b],
            cfg,
        );
        cases.push(GradCheckCase::new(name, r));
    }

    let (x, w, b, probe) = (n(&[3, 4])?, n(&[5, 4])?, n(&[5])?, n(&[3, 5])?);
    let r = grad_check(
        |t, p| {
            let y = dense(t, &p[0], &p[1], &p[2])?;
            probed(t, y, &probe)
        },
        &[x, w, b],
        cfg,
    );
    cases.push(GradCheckCase::new("dense", r));

    let (x, g, b, probe) = (n(&[3, 2, 3, 3])?, n(&[2])?, n(&[2])?, n(&[3, 2, 3, 3])?);
    let r = grad_check(
        |t, p| {
            let (y, _) = batchnorm_train(t, &p[0], &p[1], &p[2], BN_EPS)?;
            probed(t, y, &probe)
        },
        &[x, g, b],
        cfg,
    );
    cases.push(GradCheckCase::new("batch norm", r));

    let (x, probe) = (n(&[2, 3, 4, 4])?, n(&[2, 3, 4, 4])?);
    let r = grad_check(
        |t, p| {
            let y = t.relu(&p[0])?;
            probed(t, y, &probe)
        },
        &[x],
        cfg,
    );
    cases.push(GradCheckCase::new("relu", r));

    let (x, probe) = (n(&[2, 2, 4, 4])?, n(&[2, 2, 2, 2])?);
    let r = grad_check(
        |t, p| {
            let y = maxpool2d(t, &p[0], 2, 2)?;
            probed(t, y, &probe)
        },
        &[x],
        cfg,
    );
    cases.push(GradCheckCase::new("max pool", r));

    let (x, probe) = (n(&[2, 3, 3, 3])?, n(&[2, 3])?);
    let r = grad_check(
        |t, p| {
            let y = global_avg_pool(t, &p[0])?;
            probed(t, y, &probe)
        },
        &[x],
        cfg,
    );
    cases.push(GradCheckCase::new("global average pool", r));

    let (a, b, probe) = (n(&[2, 2, 3, 3])?, n(&[2, 2, 3, 3])?, n(&[2, 2, 3, 3])?);
    let r = grad_check(
        |t, p| {
            let y = t.add(&p[0], &p[1])?;
            let y = t.relu(&y)?;
            probed(t, y, &probe)
        },
        &[a, b],
        cfg,
    );
    cases.push(GradCheckCase::new("residual add", r));

    let logits = n(&[4, 5])?;
    let labels = [0, 3, 4, 3];
    let r = grad_check(
        |t, p| Ok(softmax_cross_entropy(t, &p[0], &labels)?.0),
        &[logits],
        cfg,
    );
    cases.push(GradCheckCase::new("softmax cross-entropy", r));
    Ok(cases)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSuite {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub model_params: usize,
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Layer and model gradient checks at `h = 1e-5`, tolerance `1e-4`.
pub fn run_gradcheck(seed: u64) -> Result<GradCheckSuite> {
    let cfg = GradCheckConfig::default();
    let mut cases = layer_cases(seed, &cfg)?;
    let (model_params, model) = model_cases(seed, &cfg)?;
    cases.extend(model);
    Ok(GradCheckSuite {
        seed,
        step: cfg.step,
        tolerance: cfg.tol,
        model_params,
        cases,
    })
}
