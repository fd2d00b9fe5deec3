//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NormMode, Var};
use crate::deform::{deform_conv2d, DeformConvVars, DEFORM_KERNEL};
use crate::error::Result;
use crate::loss::LossConfig;
use crate::rng::{substream, Stream};
use crate::simam::{simam_attend, SimamConfig};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-6;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the autodiff gradient of the scalar `f(point)` with central
/// differences of step [`FD_STEP`] in every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g.backward(y)?.take(x).expect("leaf gradient");

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
        passed: true,
    };
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradReport,
}

type Case = fn(&mut ChaCha8Rng, f64) -> Result<GradReport>;

/// Every differentiable op with respect to each of its differentiable
/// inputs. Kinked ops get inputs kept away from their kinks.
pub const CASES: &[(&str, Case)] = &[
    ("conv2d/input", conv2d_input),
    ("conv2d/weight", conv2d_weight),
    ("conv2d/bias", conv2d_bias),
    ("conv2d/stride2", conv2d_stride2),
    ("conv_transpose2d/input", convt_input),
    ("conv_transpose2d/weight", convt_weight),
    ("conv_transpose2d/bias", convt_bias),
    ("max_pool2d", maxpool),
    ("batch_norm2d/train/input", bn_train_input),
    ("batch_norm2d/train/gamma_beta", bn_train_affine),
    ("batch_norm2d/eval/input", bn_eval_input),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("mul", mul_same),
    ("mul/broadcast", mul_broadcast),
    ("concat_narrow_add", plumbing),
    ("conv2d+relu", conv_relu),
    ("deform_conv2d/input", deform_input),
    ("deform_conv2d/main_weight", deform_main_weight),
    ("deform_conv2d/branch_weight", deform_branch_weight),
    ("deform_conv2d/branch_bias", deform_branch_bias),
    ("simam_attend", simam),
    ("dice_loss", dice),
    ("weighted_bce_loss", bce),
    ("hybrid_loss", hybrid),
];

pub fn run_suite(seeds: &[u64]) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(CASES.len() * seeds.len());
    for &seed in seeds {
        for (i, &(name, case)) in CASES.iter().enumerate() {
            let mut rng = substream(seed, Stream::Init, i as u64);
            out.push(CaseResult {
                name,
                seed,
                report: case(&mut rng, SUITE_TOLERANCE)?,
            });
        }
    }
    Ok(out)
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(dims, rng)
}

/// Values with magnitude in `[margin, 1]` and random sign.
fn away_from_zero(dims: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Probe `f` through a random linear functional of its output.
fn probe(
    rng: &mut ChaCha8Rng,
    out_dims: &[usize],
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    let r = randn(out_dims, rng);
    move |g, x| {
        let y = f(g, x)?;
        g.dot_const(y, &r)
    }
}

fn conv2d_input(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let w = randn(&[3, 2, 3, 3], rng);
    let b = randn(&[3], rng);
    let x = randn(&[2, 2, 5, 5], rng);
    let f = probe(rng, &[2, 3, 5, 5], move |g, x| {
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        g.conv2d(x, w, Some(b), 1, 1)
    });
    finite_diff_check(f, &x, tol)
}

fn conv2d_weight(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[2, 2, 5, 5], rng);
    let w = randn(&[3, 2, 3, 3], rng);
    let f = probe(rng, &[2, 3, 5, 5], move |g, w| {
        let x = g.constant(x.clone());
        g.conv2d(x, w, None, 1, 1)
    });
    finite_diff_check(f, &w, tol)
}

fn conv2d_bias(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[2, 2, 4, 4], rng);
    let w = randn(&[3, 2, 1, 1], rng);
    let b = randn(&[3], rng);
    let f = probe(rng, &[2, 3, 4, 4], move |g, b| {
        let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
        g.conv2d(x, w, Some(b), 1, 0)
    });
    finite_diff_check(f, &b, tol)
}

fn conv2d_stride2(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let w = randn(&[2, 2, 3, 3], rng);
    let x = randn(&[1, 2, 6, 6], rng);
    let f = probe(rng, &[1, 2, 3, 3], move |g, x| {
        let w = g.constant(w.clone());
        g.conv2d(x, w, None, 2, 1)
    });
    finite_diff_check(f, &x, tol)
}

fn convt_input(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let w = randn(&[3, 2, 2, 2], rng);
    let b = randn(&[2], rng);
    let x = randn(&[2, 3, 3, 3], rng);
    let f = probe(rng, &[2, 2, 6, 6], move |g, x| {
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        g.conv_transpose2d(x, w, Some(b), 2, 0)
    });
    finite_diff_check(f, &x, tol)
}

fn convt_weight(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[2, 3, 3, 3], rng);
    let w = randn(&[3, 2, 2, 2], rng);
    let f = probe(rng, &[2, 2, 6, 6], move |g, w| {
        let x = g.constant(x.clone());
        g.conv_transpose2d(x, w, None, 2, 0)
    });
    finite_diff_check(f, &w, tol)
}

fn convt_bias(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[1, 3, 2, 2], rng);
    let w = randn(&[3, 2, 2, 2], rng);
    let b = randn(&[2], rng);
    let f = probe(rng, &[1, 2, 4, 4], move |g, b| {
        let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
        g.conv_transpose2d(x, w, Some(b), 2, 0)
    });
    finite_diff_check(f, &b, tol)
}

fn maxpool(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    // A shuffled ladder: every pair of values is at least 0.05 apart, so no
    // window maximum changes under a finite-difference step.
    let dims = [2, 2, 4, 4];
    let n: usize = dims.iter().product();
    let mut ladder: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        ladder.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(&dims, ladder)?;
    let f = probe(rng, &[2, 2, 2, 2], |g, x| g.max_pool2d(x));
    finite_diff_check(f, &x, tol)
}

fn bn_train_input(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[2, 3, 4, 4], rng);
    let gamma = randn(&[3], rng);
    let beta = randn(&[3], rng);
    let f = probe(rng, &[2, 3, 4, 4], move |g, x| {
        let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        Ok(g.batch_norm2d(x, gm, bt, NormMode::Train)?.0)
    });
    finite_diff_check(f, &x, tol)
}

fn bn_train_affine(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[2, 3, 3, 3], rng);
    // gamma and beta packed into one point: [gamma; beta]
    let p = randn(&[6], rng);
    let f = probe(rng, &[2, 3, 3, 3], move |g, p| {
        let x = g.constant(x.clone());
        let gm = g.narrow_flat(p, 0, 3)?;
        let bt = g.narrow_flat(p, 3, 3)?;
        Ok(g.batch_norm2d(x, gm, bt, NormMode::Train)?.0)
    });
    finite_diff_check(f, &p, tol)
}

fn bn_eval_input(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[2, 3, 3, 3], rng);
    let gamma = randn(&[3], rng);
    let beta = randn(&[3], rng);
    let rm: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
    let f = probe(rng, &[2, 3, 3, 3], move |g, x| {
        let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let mode = NormMode::Eval {
            running_mean: &rm,
            running_var: &rv,
        };
        Ok(g.batch_norm2d(x, gm, bt, mode)?.0)
    });
    finite_diff_check(f, &x, tol)
}

fn relu(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = away_from_zero(&[1, 2, 3, 3], 0.05, rng);
    let f = probe(rng, &[1, 2, 3, 3], |g, x| Ok(g.relu(x)));
    finite_diff_check(f, &x, tol)
}

fn sigmoid(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[1, 2, 3, 3], rng).map(|v| 3.0 * v);
    let f = probe(rng, &[1, 2, 3, 3], |g, x| Ok(g.sigmoid(x)));
    finite_diff_check(f, &x, tol)
}

fn mul_same(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let other = randn(&[1, 2, 3, 3], rng);
    let x = randn(&[1, 2, 3, 3], rng);
    // x appears on both sides so both operand rules are exercised.
    let f = probe(rng, &[1, 2, 3, 3], move |g, x| {
        let o = g.constant(other.clone());
        let a = g.mul(x, o)?;
        g.mul(a, x)
    });
    finite_diff_check(f, &x, tol)
}

fn mul_broadcast(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let a = randn(&[2, 3, 3, 3], rng);
    let b = randn(&[2, 1, 3, 3], rng);
    let f = probe(rng, &[2, 3, 3, 3], move |g, b| {
        let a = g.constant(a.clone());
        g.mul(a, b)
    });
    finite_diff_check(f, &b, tol)
}

fn plumbing(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let other = randn(&[1, 2, 3, 3], rng);
    let x = randn(&[1, 3, 3, 3], rng).map(|v| v.abs() + 0.5);
    let f = probe(rng, &[1, 2, 3, 3], move |g, x| {
        let o = g.constant(other.clone());
        let cat = g.concat_channels(o, x)?;
        let head = g.narrow_channels(cat, 1, 2)?;
        let tail = g.narrow_channels(cat, 3, 2)?;
        let inv = g.reciprocal(tail);
        let shifted = g.add_scalar(inv, 0.25);
        g.add(head, shifted)
    });
    finite_diff_check(f, &x, tol)
}

fn conv_relu(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let w = randn(&[2, 2, 3, 3], rng);
    // Redraw until no pre-activation sits near the kink.
    let x = loop {
        let x = randn(&[1, 2, 4, 4], rng);
        let pre = crate::autograd::Conv2dParams::new(w.clone(), None, 1, 1).forward(&x)?;
        if pre.data().iter().all(|v| v.abs() > 1e-3) {
            break x;
        }
    };
    let f = probe(rng, &[1, 2, 4, 4], move |g, x| {
        let w = g.constant(w.clone());
        let y = g.conv2d(x, w, None, 1, 1)?;
        Ok(g.relu(y))
    });
    finite_diff_check(f, &x, tol)
}

/// Random deformable-layer parameters whose sampling points stay at least
/// `1e-3` from the integer lattice for input `x`.
struct DeformSetup {
    x: Tensor,
    main_w: Tensor,
    main_b: Tensor,
    branch_w: Tensor,
    branch_b: Tensor,
}

const DEFORM_IN: usize = 2;
const DEFORM_OUT: usize = 2;
const DEFORM_HW: usize = 5;

impl DeformSetup {
    fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        let k2 = DEFORM_KERNEL * DEFORM_KERNEL;
        loop {
            let x = randn(&[1, DEFORM_IN, DEFORM_HW, DEFORM_HW], rng);
            let main_w = randn(&[DEFORM_OUT, DEFORM_IN, 3, 3], rng);
            let main_b = randn(&[DEFORM_OUT], rng);
            let branch_w = randn(&[3 * k2, DEFORM_IN, 3, 3], rng).map(|v| 0.1 * v);
            let branch_b = Tensor::from_fn(&[3 * k2], |i| {
                if i < 2 * k2 {
                    rng.gen_range(-1.5..1.5)
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            });
            let s = DeformSetup {
                x,
                main_w,
                main_b,
                branch_w,
                branch_b,
            };
            let mut g = Graph::new();
            let xv = g.constant(s.x.clone());
            let vars = s.bind(&mut g, None);
            let out = deform_conv2d(&mut g, xv, &vars)?;
            let clear = g
                .value(out.offsets)
                .data()
                .iter()
                .all(|v| (v - v.round()).abs() > 1e-3);
            if clear {
                return Ok(s);
            }
        }
    }

    /// Binds everything as constants except the slot named by `free`.
    fn bind(&self, g: &mut Graph, free: Option<(&str, Var)>) -> DeformConvVars {
        let mut pick = |name: &str, t: &Tensor| match free {
            Some((n, v)) if n == name => v,
            _ => g.constant(t.clone()),
        };
        DeformConvVars {
            main_weight: pick("main_weight", &self.main_w),
            main_bias: Some(pick("main_bias", &self.main_b)),
            branch_weight: pick("branch_weight", &self.branch_w),
            branch_bias: pick("branch_bias", &self.branch_b),
        }
    }

    fn check(self, rng: &mut ChaCha8Rng, slot: &'static str, tol: f64) -> Result<GradReport> {
        let point = match slot {
            "input" => self.x.clone(),
            "main_weight" => self.main_w.clone(),
            "branch_weight" => self.branch_w.clone(),
            "branch_bias" => self.branch_b.clone(),
            _ => unreachable!("unknown deform slot {slot}"),
        };
        let f = probe(rng, &[1, DEFORM_OUT, DEFORM_HW, DEFORM_HW], move |g, v| {
            let x = if slot == "input" {
                v
            } else {
                g.constant(self.x.clone())
            };
            let vars = self.bind(g, Some((slot, v)));
            Ok(deform_conv2d(g, x, &vars)?.output)
        });
        finite_diff_check(f, &point, tol)
    }
}

fn deform_input(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    DeformSetup::new(rng)?.check(rng, "input", tol)
}

fn deform_main_weight(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    DeformSetup::new(rng)?.check(rng, "main_weight", tol)
}

fn deform_branch_weight(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    DeformSetup::new(rng)?.check(rng, "branch_weight", tol)
}

fn deform_branch_bias(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    DeformSetup::new(rng)?.check(rng, "branch_bias", tol)
}

fn simam(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let x = randn(&[1, 2, 3, 3], rng);
    let cfg = SimamConfig::default();
    let f = probe(rng, &[1, 2, 3, 3], move |g, x| simam_attend(g, x, &cfg));
    finite_diff_check(f, &x, tol)
}

fn binary_target(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
}

fn dice(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let dims = [2, 2, 4, 4];
    let z = randn(&dims, rng).map(|v| 2.0 * v);
    let t = binary_target(&dims, rng);
    let cfg = LossConfig {
        class_weights: vec![1.0, 2.5],
        ..Default::default()
    };
    finite_diff_check(move |g, z| g.dice_loss(z, &t, &cfg), &z, tol)
}

fn bce(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let dims = [2, 2, 4, 4];
    let z = randn(&dims, rng).map(|v| 2.0 * v);
    let t = binary_target(&dims, rng);
    let cfg = LossConfig {
        class_weights: vec![0.5, 1.5],
        ..Default::default()
    };
    finite_diff_check(move |g, z| g.weighted_bce_loss(z, &t, &cfg), &z, tol)
}

fn hybrid(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradReport> {
    let dims = [1, 2, 4, 4];
    let z = randn(&dims, rng);
    let t = binary_target(&dims, rng);
    let cfg = LossConfig {
        bce_pos_weight: Some(3.0),
        ..Default::default()
    };
    finite_diff_check(move |g, z| g.hybrid_loss(z, &t, &cfg), &z, tol)
}
