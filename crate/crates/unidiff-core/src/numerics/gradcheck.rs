//! Central finite-difference validation of analytic gradients.
//!
//! Two layers: a per-kernel harness over tiny random tensors (64-bit,
//! tolerance 1e-6) and a per-parameter checker for whole losses
//! (deterministic coordinate subsample, tolerance supplied by the caller).

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::graph::{Graph, Kernel, Var};
use super::params::{forward_backward, BoundParams, ParameterStore};
use super::rng::RngState;
use super::tensor::Tensor;

const REL_FLOOR: f64 = 1e-4;
const SUBSAMPLE_SEED: u64 = 0x9D5C_17A3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked_coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.pass)
    }
}

fn eval_loss<F>(params: &ParameterStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let loss = loss_fn(&mut g, &bound)?;
    Ok(g.value(loss).item())
}

/// Deterministic subsample of `want` distinct coordinates of a tensor.
fn sample_coords(name: &str, numel: usize, want: usize) -> Vec<usize> {
    if numel <= want {
        return (0..numel).collect();
    }
    let mut rng = RngState::new(SUBSAMPLE_SEED).substream(name);
    let mut perm = rng.permutation(numel);
    perm.truncate(want);
    perm.sort_unstable();
    perm
}

/// Compare analytic gradients of `loss_fn` against central differences on a
/// deterministic subsample of at least `coords_per_param` coordinates per
/// parameter. 64-bit only; `step` must lie in [1e-6, 1e-4].
pub fn finite_diff_gradcheck<F>(
    params: &ParameterStore<f64>,
    loss_fn: F,
    step: f64,
    tolerance: f64,
    coords_per_param: usize,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var> + Sync,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::config("gradcheck.step", "step must be in [1e-6, 1e-4]"));
    }
    let (_, grads) = forward_backward(params, |g, b| loss_fn(g, b))?;
    let names: Vec<String> = params.names().cloned().collect();
    let checks: Vec<Result<ParamCheck>> = names
        .par_iter()
        .map(|name| {
            let analytic = grads.get(name).expect("forward_backward covers all params");
            let coords = sample_coords(name, analytic.numel(), coords_per_param);
            let mut workspace = params.clone();
            let mut max_rel = 0.0f64;
            let mut worst = 0usize;
            for &c in &coords {
                let original = workspace.get(name)?.data()[c];
                workspace.get_mut(name)?.data_mut()[c] = original + step;
                let plus = eval_loss(&workspace, &loss_fn)?;
                workspace.get_mut(name)?.data_mut()[c] = original - step;
                let minus = eval_loss(&workspace, &loss_fn)?;
                workspace.get_mut(name)?.data_mut()[c] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let r = rel_err(analytic.data()[c], numeric);
                if r > max_rel {
                    max_rel = r;
                    worst = c;
                }
            }
            Ok(ParamCheck {
                name: name.clone(),
                checked_coords: coords.len(),
                max_rel_err: max_rel,
                worst_coord: worst,
                pass: max_rel <= tolerance,
            })
        })
        .collect();
    let params_checked: Vec<ParamCheck> = checks.into_iter().collect::<Result<_>>()?;
    let pass = params_checked.iter().all(|p| p.pass);
    Ok(GradcheckReport { step, tolerance, params: params_checked, pass })
}

// ---- per-kernel harness ------------------------------------------------

#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Kernels with differentiable inputs, in checking order.
pub const CHECKED_KERNELS: &[Kernel] = &[
    Kernel::Add,
    Kernel::Sub,
    Kernel::Mul,
    Kernel::Neg,
    Kernel::Scale,
    Kernel::AddBias,
    Kernel::MulRow,
    Kernel::Matmul,
    Kernel::Transpose,
    Kernel::Gelu,
    Kernel::Exp,
    Kernel::Log,
    Kernel::LayerNorm,
    Kernel::Softmax,
    Kernel::LogSoftmax,
    Kernel::Sdpa,
    Kernel::SplitHeads,
    Kernel::MergeHeads,
    Kernel::Embedding,
    Kernel::GatherRows,
    Kernel::ConcatRows,
    Kernel::SliceRows,
    Kernel::Reshape,
    Kernel::SumAll,
    Kernel::MeanAll,
    Kernel::MeanRows,
    Kernel::CosineRows,
    Kernel::L2NormRows,
];

fn kernel_inputs(kernel: Kernel) -> ParameterStore<f64> {
    let mut rng = RngState::new(0xBEEF).substream(kernel.name());
    let mut store = ParameterStore::new();
    let randn = |shape: Vec<usize>, rng: &mut RngState| {
        Tensor::from_fn(shape, |_| rng.normal_f64() * 0.5)
    };
    match kernel {
        Kernel::Add | Kernel::Sub | Kernel::Mul => {
            store.insert("a", randn(vec![3, 4], &mut rng));
            store.insert("b", randn(vec![3, 4], &mut rng));
        }
        Kernel::Neg | Kernel::Scale | Kernel::Gelu | Kernel::Exp | Kernel::Transpose
        | Kernel::Reshape | Kernel::SumAll | Kernel::MeanAll | Kernel::MeanRows
        | Kernel::LayerNorm | Kernel::Softmax | Kernel::LogSoftmax | Kernel::L2NormRows
        | Kernel::SliceRows | Kernel::GatherRows => {
            store.insert("a", randn(vec![4, 5], &mut rng));
        }
        Kernel::Log => {
            store.insert("a", Tensor::from_fn(vec![4, 5], |_| 0.5 + rng.uniform_f64()));
        }
        Kernel::AddBias | Kernel::MulRow => {
            store.insert("a", randn(vec![3, 4], &mut rng));
            store.insert("b", randn(vec![4], &mut rng));
        }
        Kernel::Matmul => {
            store.insert("a", randn(vec![3, 4], &mut rng));
            store.insert("b", randn(vec![4, 2], &mut rng));
        }
        Kernel::Sdpa => {
            store.insert("q", randn(vec![2, 5, 3], &mut rng));
            store.insert("k", randn(vec![2, 5, 3], &mut rng));
            store.insert("v", randn(vec![2, 5, 3], &mut rng));
        }
        Kernel::SplitHeads | Kernel::MergeHeads => {
            store.insert("a", randn(vec![4, 6], &mut rng));
        }
        Kernel::Embedding => {
            store.insert("table", randn(vec![7, 4], &mut rng));
        }
        Kernel::ConcatRows => {
            store.insert("a", randn(vec![2, 3], &mut rng));
            store.insert("b", randn(vec![3, 3], &mut rng));
        }
        Kernel::CosineRows => {
            store.insert("a", randn(vec![3, 4], &mut rng));
            store.insert("b", randn(vec![3, 4], &mut rng));
        }
        Kernel::Leaf => {}
    }
    store
}

fn kernel_output(kernel: Kernel, g: &mut Graph<f64>, b: &BoundParams) -> Result<Var> {
    match kernel {
        Kernel::Add => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            g.add(a, bb)
        }
        Kernel::Sub => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            g.sub(a, bb)
        }
        Kernel::Mul => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            g.mul(a, bb)
        }
        Kernel::Neg => g.neg(b.var("a")?),
        Kernel::Scale => g.scale(b.var("a")?, 1.7),
        Kernel::AddBias => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            g.add_bias(a, bb)
        }
        Kernel::MulRow => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            g.mul_row(a, bb)
        }
        Kernel::Matmul => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            g.matmul(a, bb)
        }
        Kernel::Transpose => g.transpose(b.var("a")?),
        Kernel::Gelu => g.gelu(b.var("a")?),
        Kernel::Exp => g.exp(b.var("a")?),
        Kernel::Log => g.log(b.var("a")?),
        Kernel::LayerNorm => g.layer_norm(b.var("a")?),
        Kernel::Softmax => g.softmax(b.var("a")?),
        Kernel::LogSoftmax => g.log_softmax(b.var("a")?),
        Kernel::Sdpa => {
            let (q, k, v) = (b.var("q")?, b.var("k")?, b.var("v")?);
            let o = g.sdpa(q, k, v)?;
            g.reshape(o, vec![10, 3])
        }
        Kernel::SplitHeads => {
            let s = g.split_heads(b.var("a")?, 3)?;
            g.reshape(s, vec![12, 2])
        }
        Kernel::MergeHeads => {
            let s = g.split_heads(b.var("a")?, 3)?;
            g.merge_heads(s)
        }
        Kernel::Embedding => g.embedding(b.var("table")?, &[0, 3, 6, 3]),
        Kernel::GatherRows => {
            let picked = g.gather_rows(b.var("a")?, &[1, 0, 4, 2])?;
            g.reshape(picked, vec![4, 1])
        }
        Kernel::ConcatRows => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            g.concat_rows(&[a, bb])
        }
        Kernel::SliceRows => g.slice_rows(b.var("a")?, 1, 2),
        Kernel::Reshape => g.reshape(b.var("a")?, vec![5, 4]),
        Kernel::SumAll => {
            let s = g.sum_all(b.var("a")?)?;
            g.reshape(s, vec![1, 1])
        }
        Kernel::MeanAll => {
            let s = g.mean_all(b.var("a")?)?;
            g.reshape(s, vec![1, 1])
        }
        Kernel::MeanRows => {
            let s = g.mean_rows(b.var("a")?)?;
            g.reshape(s, vec![1, 5])
        }
        Kernel::CosineRows => {
            let (a, bb) = (b.var("a")?, b.var("b")?);
            let c = g.cosine_rows(a, bb)?;
            g.reshape(c, vec![3, 1])
        }
        Kernel::L2NormRows => g.l2_normalize_rows(b.var("a")?),
        Kernel::Leaf => unreachable!("leaf is not checked"),
    }
}

/// Finite-difference check of one kernel, optionally with a fault injected
/// into some kernel's backward rule (to validate the checker itself).
pub fn check_kernel(kernel: Kernel, fault: Option<Kernel>) -> Result<KernelCheck> {
    let store = kernel_inputs(kernel);
    // weight the output with a fixed random tensor so every coordinate matters
    let loss_fn = move |g: &mut Graph<f64>, b: &BoundParams| -> Result<Var> {
        if let Some(f) = fault {
            g.inject_backward_fault(f);
        }
        let out = kernel_output(kernel, g, b)?;
        let w = Tensor::from_fn(g.value(out).shape().to_vec(), |i| {
            let mut r = RngState::new(0xA11CE ^ i as u64);
            r.normal_f64()
        });
        let wv = g.constant(w);
        let prod = g.mul(out, wv)?;
        g.sum_all(prod)
    };
    let report = finite_diff_gradcheck(&store, loss_fn, 1e-5, 1e-6, 256)?;
    Ok(KernelCheck {
        kernel: kernel.name(),
        max_rel_err: report.max_rel_err(),
        pass: report.pass,
    })
}

/// Run the whole kernel suite.
pub fn check_all_kernels() -> Result<Vec<KernelCheck>> {
    CHECKED_KERNELS.iter().map(|&k| check_kernel(k, None)).collect()
}
