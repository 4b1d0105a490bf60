//! Finite-difference verification of every differentiable op.
//!
//! Each registered case builds a scalar loss from one or more input
//! tensors, compares the tape's analytic input gradients against central
//! differences, and reports the worst relative error over a deterministic
//! sample of coordinates. Inputs are constructed to keep FD probes away
//! from kinks (relu/abs at zero, clamp edges, pooling ties).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{NodeId, PadMode, Tape};
use crate::losses::{natural_loss, ragan_losses, recon_loss};
use crate::nmd::{nmd_bce_loss, NmdConfig, NmdNet};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Cap on probed coordinates per input tensor.
const MAX_COORDS: usize = 48;

type BuildFn = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    inputs: Vec<Tensor>,
    build: BuildFn,
}

impl GradCase {
    pub fn sizes(&self) -> String {
        let dims: Vec<String> = self
            .inputs
            .iter()
            .map(|t| {
                let d: Vec<String> = t.shape().iter().map(|x| x.to_string()).collect();
                format!("[{}]", d.join(","))
            })
            .collect();
        dims.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub sizes: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn probe_coords(numel: usize) -> Vec<usize> {
    if numel <= MAX_COORDS {
        (0..numel).collect()
    } else {
        let stride = numel.div_ceil(MAX_COORDS);
        (0..numel).step_by(stride).collect()
    }
}

/// Worst relative error between tape gradients and central differences
/// over every input of the case.
pub fn run_case(case: &GradCase, eps: f64) -> Result<f64> {
    let mut tape = Tape::new(1);
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = (case.build)(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::invalid(format!("case '{}' loss is not scalar", case.name)));
    }
    let grads = tape.backward(loss)?;
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new(1);
        let ids: Vec<NodeId> = inputs.iter().map(|x| t.var(x.clone())).collect();
        let l = (case.build)(&mut t, &ids)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    for (k, input) in case.inputs.iter().enumerate() {
        let analytic = match grads.of(ids[k]) {
            Some(g) => g.clone(),
            None => Tensor::zeros(input.shape()),
        };
        for i in probe_coords(input.numel()) {
            let x = input.data()[i];
            let mut probe = case.inputs.to_vec();
            probe[k].data_mut()[i] = x + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x - eps;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Runs one registered op by name.
pub fn grad_check(opname: &str, eps: f64) -> Result<GradReport> {
    let case = registry()
        .into_iter()
        .find(|c| c.name == opname)
        .ok_or_else(|| Error::invalid(format!("no gradient-check case named '{}'", opname)))?;
    let max_rel_err = run_case(&case, eps)?;
    Ok(GradReport {
        name: case.name.to_string(),
        sizes: case.sizes(),
        max_rel_err,
        tolerance: case.tolerance,
    })
}

pub fn run_all(eps: f64) -> Result<Vec<GradReport>> {
    registry()
        .iter()
        .map(|case| {
            Ok(GradReport {
                name: case.name.to_string(),
                sizes: case.sizes(),
                max_rel_err: run_case(case, eps)?,
                tolerance: case.tolerance,
            })
        })
        .collect()
}

pub fn report_table(reports: &[GradReport]) -> String {
    let name_w = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let size_w = reports.iter().map(|r| r.sizes.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:name_w$}  {:size_w$}  {:>12}  {:>8}  status\n",
        "op", "inputs", "max rel err", "tol"
    );
    for r in reports {
        out.push_str(&format!(
            "{:name_w$}  {:size_w$}  {:>12.3e}  {:>8.0e}  {}\n",
            r.name,
            r.sizes,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}

// ── Input construction ──────────────────────────────────────────────────

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values bounded away from zero on both sides, for relu/abs kinks.
fn signed_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(0.1..0.9) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values clustered at 0.05, 0.5 and 0.95 so clamp(0.2, 0.8) sees both
/// saturated and interior coordinates, none near an edge.
fn clamp_probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|i| [0.05, 0.5, 0.95][i % 3] + rng.gen_range(-0.02..0.02))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// All-distinct values with gaps far wider than any FD step, so pooling
/// argmaxes cannot flip under perturbation.
fn distinct(shape: &[usize]) -> Tensor {
    let n = shape.iter().product::<usize>();
    assert!(n < 101, "distinct() supports fewer than 101 elements");
    let data = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Reduces an op's tensor output to a scalar through a fixed random
/// linear functional, so every output coordinate carries distinct weight.
fn weighted_mean(tape: &mut Tape, out: NodeId) -> Result<NodeId> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(uniform(&shape, 0.25, 1.75, 0xC0FFEE));
    let prod = tape.mul(out, w)?;
    Ok(tape.mean_all(prod))
}

// ── Registry ────────────────────────────────────────────────────────────

pub fn registry() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = Vec::new();
    let mut push = |name: &'static str, tolerance: f64, inputs: Vec<Tensor>, build: BuildFn| {
        cases.push(GradCase { name, tolerance, inputs, build });
    };

    let x4 = || uniform(&[2, 4, 4, 3], 0.1, 0.9, 1);
    let y4 = || uniform(&[2, 4, 4, 3], 0.1, 0.9, 2);

    push("add", 1e-6, vec![x4(), y4()], Box::new(|t, ids| {
        let o = t.add(ids[0], ids[1])?;
        weighted_mean(t, o)
    }));
    push("sub", 1e-6, vec![x4(), y4()], Box::new(|t, ids| {
        let o = t.sub(ids[0], ids[1])?;
        weighted_mean(t, o)
    }));
    push("mul", 1e-6, vec![x4(), y4()], Box::new(|t, ids| {
        let o = t.mul(ids[0], ids[1])?;
        weighted_mean(t, o)
    }));
    push("scale", 1e-6, vec![x4()], Box::new(|t, ids| {
        let o = t.scale(ids[0], -1.7);
        weighted_mean(t, o)
    }));
    push("add_const", 1e-6, vec![x4()], Box::new(|t, ids| {
        let o = t.add_const(ids[0], 0.37);
        weighted_mean(t, o)
    }));
    push("sub_scalar", 1e-6, vec![x4(), uniform(&[1], 0.1, 0.5, 3)], Box::new(|t, ids| {
        let o = t.sub_scalar(ids[0], ids[1])?;
        weighted_mean(t, o)
    }));
    push("relu", 1e-6, vec![signed_away_from_zero(&[2, 4, 4, 3], 4)], Box::new(|t, ids| {
        let o = t.relu(ids[0]);
        weighted_mean(t, o)
    }));
    push("sigmoid", 1e-6, vec![uniform(&[2, 4, 4, 3], -3.0, 3.0, 5)], Box::new(|t, ids| {
        let o = t.sigmoid(ids[0]);
        weighted_mean(t, o)
    }));
    push("ln", 1e-6, vec![uniform(&[2, 4, 4, 3], 0.2, 1.5, 6)], Box::new(|t, ids| {
        let o = t.ln(ids[0]);
        weighted_mean(t, o)
    }));
    push("clamp", 1e-6, vec![clamp_probe(&[2, 4, 4, 3], 7)], Box::new(|t, ids| {
        let o = t.clamp(ids[0], 0.2, 0.8);
        weighted_mean(t, o)
    }));
    push("abs", 1e-6, vec![signed_away_from_zero(&[2, 4, 4, 3], 8)], Box::new(|t, ids| {
        let o = t.abs(ids[0]);
        weighted_mean(t, o)
    }));
    push("mean_all", 1e-6, vec![x4()], Box::new(|t, ids| Ok(t.mean_all(ids[0]))));
    push("reshape", 1e-6, vec![x4()], Box::new(|t, ids| {
        let o = t.reshape(ids[0], &[2, 4, 12, 1])?;
        weighted_mean(t, o)
    }));
    push("pad_zero", 1e-4, vec![uniform(&[1, 4, 4, 2], 0.1, 0.9, 9)], Box::new(|t, ids| {
        let o = t.pad(ids[0], PadMode::Zero, [1, 2, 1, 2])?;
        weighted_mean(t, o)
    }));
    push("pad_reflect", 1e-4, vec![uniform(&[1, 4, 4, 2], 0.1, 0.9, 10)], Box::new(|t, ids| {
        let o = t.pad(ids[0], PadMode::Reflect, [1, 2, 1, 2])?;
        weighted_mean(t, o)
    }));
    push(
        "conv2d",
        1e-4,
        vec![uniform(&[1, 5, 5, 2], 0.1, 0.9, 11), uniform(&[3, 3, 2, 3], -0.5, 0.5, 12), uniform(&[3], -0.3, 0.3, 13)],
        Box::new(|t, ids| {
            let o = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, PadMode::Zero, Tape::same_pad(3, 3))?;
            weighted_mean(t, o)
        }),
    );
    push(
        "conv2d_stride2",
        1e-4,
        vec![uniform(&[1, 6, 6, 2], 0.1, 0.9, 14), uniform(&[3, 3, 2, 3], -0.5, 0.5, 15)],
        Box::new(|t, ids| {
            let o = t.conv2d(ids[0], ids[1], None, 2, PadMode::Zero, Tape::same_pad(3, 3))?;
            weighted_mean(t, o)
        }),
    );
    push(
        "conv2d_valid",
        1e-4,
        vec![uniform(&[1, 5, 5, 2], 0.1, 0.9, 16), uniform(&[2, 2, 2, 2], -0.5, 0.5, 17)],
        Box::new(|t, ids| {
            let o = t.conv2d_valid(ids[0], ids[1], 1)?;
            weighted_mean(t, o)
        }),
    );
    push("bias_add", 1e-6, vec![uniform(&[2, 3, 3, 4], 0.1, 0.9, 18), uniform(&[4], -0.4, 0.4, 19)], Box::new(|t, ids| {
        let o = t.bias_add(ids[0], ids[1])?;
        weighted_mean(t, o)
    }));
    push("max_pool2", 1e-4, vec![distinct(&[2, 4, 4, 3])], Box::new(|t, ids| {
        let o = t.max_pool2(ids[0])?;
        weighted_mean(t, o)
    }));
    push("global_avg_pool", 1e-6, vec![uniform(&[2, 5, 5, 3], 0.1, 0.9, 20)], Box::new(|t, ids| {
        let o = t.global_avg_pool(ids[0])?;
        weighted_mean(t, o)
    }));
    push("depth_to_space", 1e-6, vec![uniform(&[1, 3, 3, 8], 0.1, 0.9, 21)], Box::new(|t, ids| {
        let o = t.depth_to_space(ids[0], 2)?;
        weighted_mean(t, o)
    }));
    push("space_to_depth", 1e-6, vec![uniform(&[1, 6, 6, 2], 0.1, 0.9, 22)], Box::new(|t, ids| {
        let o = t.space_to_depth(ids[0], 2)?;
        weighted_mean(t, o)
    }));
    push(
        "concat_channels",
        1e-6,
        vec![uniform(&[1, 4, 4, 2], 0.1, 0.9, 23), uniform(&[1, 4, 4, 3], 0.1, 0.9, 24)],
        Box::new(|t, ids| {
            let o = t.concat_channels(&[ids[0], ids[1]])?;
            weighted_mean(t, o)
        }),
    );
    push("slice_batch", 1e-6, vec![uniform(&[4, 3, 3, 2], 0.1, 0.9, 25)], Box::new(|t, ids| {
        let o = t.slice_batch(ids[0], 1, 3)?;
        weighted_mean(t, o)
    }));

    // Composite: one power iteration from a well-converged start vector,
    // restarted identically for every evaluation. Gradients treat u and v
    // as constants, hence the looser tolerance.
    let w0 = uniform(&[3, 3, 2, 3], -0.7, 0.7, 26);
    let warm_u = {
        let mut tape = Tape::new(1);
        let w = tape.constant(w0.clone());
        let mut u: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(27);
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.iter().map(|v| v / norm).collect()
        };
        tape.spectral_norm(w, &mut u, 60).unwrap();
        u
    };
    push("spectral_norm", 1e-3, vec![w0], Box::new(move |t, ids| {
        let mut u = warm_u.clone();
        let o = t.spectral_norm(ids[0], &mut u, 1)?;
        weighted_mean(t, o)
    }));

    // Loss compositions.
    let sr = uniform(&[2, 4, 4, 3], 0.2, 0.8, 28);
    let hr = {
        let mut t = sr.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for v in t.data_mut() {
            *v += rng.gen_range(0.1..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        t
    };
    push("recon_loss", 1e-4, vec![sr, hr], Box::new(|t, ids| recon_loss(t, ids[0], ids[1])));

    push("bce_loss", 1e-4, vec![uniform(&[4, 1, 1, 1], -2.0, 2.0, 30)], Box::new(|t, ids| {
        let p = t.sigmoid(ids[0]);
        nmd_bce_loss(t, p, &[1.0, 1.0, 0.0, 0.0])
    }));

    let real = uniform(&[3, 1, 1, 1], -1.5, 1.5, 31);
    let fake = uniform(&[3, 1, 1, 1], -1.5, 1.5, 32);
    push("ragan_generator", 1e-4, vec![real.clone(), fake.clone()], Box::new(|t, ids| {
        let (l_g, _) = ragan_losses(t, ids[0], ids[1])?;
        Ok(l_g)
    }));
    push("ragan_discriminator", 1e-4, vec![real, fake], Box::new(|t, ids| {
        let (_, l_d) = ragan_losses(t, ids[0], ids[1])?;
        Ok(l_d)
    }));

    let nmd = NmdNet::init(NmdConfig { widths: vec![2, 3], patch: 8 }, 33).unwrap();
    push(
        "natural_loss",
        1e-4,
        vec![uniform(&[1, 8, 8, 3], 0.2, 0.8, 34)],
        Box::new(move |t, ids| natural_loss(t, &nmd, ids[0])),
    );

    cases
}
