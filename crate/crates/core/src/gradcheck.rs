//! Central-difference gradient checking against the tape.

use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{AttentionConfig, AttentionKind, AttentionLayer, MsaConfig, MsaLayer};
use crate::model::{kl_l2_loss, ConvBlockSpec, LossConfig, Model, ModelSpec};
use crate::params::{Bound, ParamSet};
use crate::rng::{RngKey, SeededRng};
use crate::tape::{Padding, ReduceMode};
use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|ad - fd| / max(|ad|, |fd|, 1e-8)` per checked coordinate.
    pub errors: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.errors.len()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.errors.is_empty() {
            return 1.0;
        }
        self.errors.iter().filter(|&&e| e <= self.tol).count() as f64 / self.errors.len() as f64
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self, min_fraction: f64) -> bool {
        self.pass_fraction() >= min_fraction
    }
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

/// Checks the gradient of scalar `f` with respect to a single input.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), core::slice::from_ref(x), h, tol, None)
}

/// Checks the gradient of scalar `f` with respect to every input.
///
/// With `max_coords = Some(k)`, at most `k` coordinates are probed, spread
/// evenly over the concatenation of all inputs.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, tol: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();

    let eval = |values: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|(t, v)| tape.leaf_f64(t.shape(), v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::NonScalarRoot(out.shape()));
        }
        let value = out.value_f64()[0];
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(v, vals)| {
                grads
                    .get_f64(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| alloc::vec![0.0; vals.len()])
            })
            .collect();
        Ok((value, g))
    };

    let (_, ad) = eval(&base)?;
    let total: usize = base.iter().map(Vec::len).sum();
    let stride = match max_coords {
        Some(k) if k > 0 && k < total => total.div_ceil(k),
        _ => 1,
    };

    let mut report = GradCheckReport {
        analytic: Vec::new(),
        numeric: Vec::new(),
        errors: Vec::new(),
        tol,
    };
    let mut values = base.clone();
    let mut flat = 0usize;
    for (ti, t) in base.iter().enumerate() {
        for i in 0..t.len() {
            if flat.is_multiple_of(stride) {
                let orig = values[ti][i];
                values[ti][i] = orig + h;
                let (fp, _) = eval(&values)?;
                values[ti][i] = orig - h;
                let (fm, _) = eval(&values)?;
                values[ti][i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let a = ad[ti][i];
                report.analytic.push(a);
                report.numeric.push(fd);
                report.errors.push(relative_error(a, fd));
            }
            flat += 1;
        }
    }
    Ok(report)
}

/// One named case of [`suite`].
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Scalar probe `Σ y ⊙ r` with fixed random `r`, so every output element
/// carries a distinct weight.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = RngKey::new(seed).rng();
    let r = uniform(&y.shape(), &mut rng);
    Ok(y.mul(y.tape().constant(&r))?.sum_all())
}

fn attention_case(kind: AttentionKind, feature: [usize; 3], h: f64, tol: f64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let mut rng = RngKey::new(11).derive_tag(kind.name()).rng();
    let mut ps = ParamSet::new();
    let layer = AttentionLayer::build(kind, feature, &AttentionConfig::default(), &mut ps, "g", &mut rng)?;
    let mut inputs = alloc::vec![uniform(&[2, feature[0], feature[1], feature[2]], &mut rng)];
    inputs.extend(ps.iter().map(|p| p.tensor.clone()));
    grad_check_many(
        |_, v| probe(layer.forward(v[0], &Bound::from_vars(v[1..].to_vec()))?, 1),
        &inputs,
        h,
        tol,
        max_coords,
    )
}

/// Gradient checks over every primitive, every attention layer and the
/// loss of a two-block tri-axis model. `max_coords` caps the coordinates
/// probed per case.
pub fn suite(h: f64, tol: f64, max_coords: Option<usize>) -> Result<Vec<SuiteCase>> {
    let mut rng = RngKey::new(7).rng();
    let mut cases = Vec::new();
    let mut push = |name, report| cases.push(SuiteCase { name, report });

    let x = uniform(&[2, 5, 5, 3], &mut rng);
    let w = uniform(&[3, 3, 3, 4], &mut rng);
    let b = uniform(&[4], &mut rng);
    for (name, stride, pad) in [("conv2d_same_s2", 2, Padding::Same), ("conv2d_valid_s1", 1, Padding::Valid)] {
        let inputs = [x.clone(), w.clone(), b.clone()];
        push(
            name,
            grad_check_many(|_, v| probe(v[0].conv2d(v[1], v[2], stride, pad)?, 2), &inputs, h, tol, max_coords)?,
        );
    }

    let a = uniform(&[3, 4], &mut rng);
    let m = uniform(&[4, 5], &mut rng);
    push(
        "matmul",
        grad_check_many(|_, v| probe(v[0].matmul(v[1])?, 3), &[a.clone(), m.clone()], h, tol, max_coords)?,
    );
    let ab = uniform(&[2, 3, 4], &mut rng);
    let mb = uniform(&[2, 4, 5], &mut rng);
    push(
        "matmul_batched",
        grad_check_many(|_, v| probe(v[0].matmul(v[1])?, 4), &[ab, mb], h, tol, max_coords)?,
    );

    let p = uniform(&[2, 3, 4], &mut rng);
    let q = Tensor::from_fn([3, 4], |i| 1.5 + (i % 5) as f32 * 0.1);
    push(
        "elementwise_broadcast",
        grad_check_many(
            |_, v| {
                let y = v[0].add(v[1])?.mul(v[0])?.sub(v[1])?.div(v[1])?;
                probe(y.add_scalar(0.5).mul_scalar(-1.5), 5)
            },
            &[p.clone(), q],
            h,
            tol,
            max_coords,
        )?,
    );
    push("relu", grad_check(|_, v| probe(v.relu(), 6), &p, h, tol)?);
    push("sigmoid", grad_check(|_, v| probe(v.sigmoid(), 7), &p, h, tol)?);
    push("exp", grad_check(|_, v| probe(v.exp(), 8), &p, h, tol)?);
    let pos = Tensor::from_fn([2, 3, 4], |i| 0.2 + (i * 7 % 11) as f32 * 0.1);
    push("log", grad_check(|_, v| probe(v.log(), 9), &pos, h, tol)?);
    push("softmax", grad_check(|_, v| probe(v.softmax(2)?, 10), &p, h, tol)?);
    for (name, mode) in [
        ("reduce_sum", ReduceMode::Sum),
        ("reduce_mean", ReduceMode::Mean),
        ("reduce_max", ReduceMode::Max),
    ] {
        push(name, grad_check(|_, v| probe(v.reduce(&[0, 2], mode, false)?, 11), &p, h, tol)?);
    }
    push(
        "permute_reshape_concat",
        grad_check(
            |t, v| {
                let y = v.permute(&[2, 0, 1])?.reshape(&[4, 6])?;
                probe(t.concat(&[y, y.mul_scalar(2.0)], 1)?, 12)
            },
            &p,
            h,
            tol,
        )?,
    );
    push(
        "dropout_fixed_mask",
        grad_check(|_, v| probe(v.dropout(0.3, true, &mut RngKey::new(3).rng())?, 13), &p, h, tol)?,
    );

    let feature = [4, 3, 6];
    for kind in AttentionKind::ALL {
        let name = match kind {
            AttentionKind::Se => "attention_se",
            AttentionKind::Ca => "attention_ca",
            AttentionKind::Sa => "attention_sa",
            AttentionKind::Cbam => "attention_cbam",
            AttentionKind::TriAxis => "attention_triaxis",
        };
        push(name, attention_case(kind, feature, h, tol, max_coords)?);
    }
    {
        let mut ps = ParamSet::new();
        let layer = MsaLayer::new(
            &mut ps,
            "g",
            MsaConfig {
                num_heads: 32,
                key_dim: 8,
                token_dim: 5,
            },
            &mut rng,
        )?;
        let mut inputs = alloc::vec![uniform(&[4, 5], &mut rng)];
        inputs.extend(ps.iter().map(|p| p.tensor.clone()));
        push(
            "attention_msa",
            grad_check_many(
                |_, v| probe(layer.forward(v[0], &Bound::from_vars(v[1..].to_vec()))?, 14),
                &inputs,
                h,
                tol,
                max_coords,
            )?,
        );
    }

    {
        let spec = ModelSpec {
            input_size: [8, 8],
            input_channels: 3,
            blocks: alloc::vec![ConvBlockSpec::new(4), ConvBlockSpec::new(6)],
            taps: alloc::vec![1, 2],
            attention: Some(AttentionKind::TriAxis),
            attention_config: AttentionConfig::default(),
            head_hidden: 16,
            dropout_rate: 0.3,
            num_classes: 3,
        };
        let model = Model::new(spec, 5)?;
        let images = Tensor::from_fn([3, 8, 8, 3], |_| rng.random_range(0.0f32..1.0));
        let target = Tensor::new([3, 3], alloc::vec![1.0, 0.0, 0.0, 0.2, 0.8, 0.0, 0.0, 0.3, 0.7])?;
        let cfg = LossConfig::default();
        let mut inputs = alloc::vec![images];
        inputs.extend(model.params().iter().map(|p| p.tensor.clone()));
        push(
            "model_two_block_loss",
            grad_check_many(
                |_, v| {
                    let bound = Bound::from_vars(v[1..].to_vec());
                    let pred = model.forward(v[0], &bound, true, &mut RngKey::new(9).rng())?;
                    kl_l2_loss(pred, &target, &v[1..], &cfg)
                },
                &inputs,
                h,
                tol,
                max_coords,
            )?,
        );
    }
    Ok(cases)
}
