use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::{Tape, TvVariant, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::operators::{Geometry, ImageGrid, ProjectionOperator};
use crate::seed::rng_from;

pub const FD_STEP: f64 = 1e-5;

pub const GRADCHECK_OPS: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "maxpool2",
    "group_norm",
    "leaky_relu",
    "softplus",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "div",
    "square",
    "sqrt",
    "log",
    "scale",
    "add_scalar",
    "sum",
    "mean",
    "relu_project",
    "project",
    "backproject",
    "tv_isotropic",
    "tv_anisotropic",
    "reshape",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of `sum(f(inputs) * r)` for a fixed random `r`
/// against central differences, over every input element.
pub fn check_function(name: &str, inputs: &[Tensor<f64>], f: &Build<'_>, seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from(seed ^ 0x5151);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let r = normal(&mut rng, &out_shape);
    let eval = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    let mut n_checked = 0;
    for (k, x) in inputs.iter().enumerate() {
        let g = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (tp, _, lp) = eval(&plus)?;
            let (tm, _, lm) = eval(&minus)?;
            let fd = (tp.value(lp).item()? - tm.value(lm).item()?) / (2.0 * FD_STEP);
            max_diff = max_diff.max((g[i] - fd).abs());
            max_ref = max_ref.max(fd.abs()).max(g[i].abs());
            n_checked += 1;
        }
    }
    Ok(GradcheckReport {
        op: name.to_string(),
        max_rel_err: if max_ref > 0.0 { max_diff / max_ref } else { max_diff },
        n_checked,
    })
}

fn normal<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Normal samples with `|x| ≥ 0.05`, away from the kink at zero.
fn off_kink<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v) + *v;
        }
    }
    t
}

/// Distinct values in random order, spaced 0.01 apart, so pooling has no near-ties.
fn distinct<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.01 * i as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape")
}

fn small_operator() -> Arc<ProjectionOperator> {
    let grid = ImageGrid::new(6, 5, 1.0).expect("grid");
    Arc::new(ProjectionOperator::new(grid, Geometry::parallel(7, 9, 0.8).expect("geometry")).expect("operator"))
}

/// Finite-difference check of one engine op on seeded random inputs (double precision).
pub fn gradcheck(op_name: &str, seed: u64) -> Result<GradcheckReport> {
    let mut rng = rng_from(seed);
    let rng = &mut rng;
    let (inputs, f): (Vec<Tensor<f64>>, Box<Build<'static>>) = match op_name {
        "conv2d" => (
            vec![
                normal(rng, &[2, 3, 5, 4]),
                normal(rng, &[4, 3, 3, 3]),
                normal(rng, &[4]),
            ],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
        ),
        "conv_transpose2d" => (
            vec![
                normal(rng, &[2, 3, 3, 2]),
                normal(rng, &[3, 2, 2, 2]),
                normal(rng, &[2]),
            ],
            Box::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]))),
        ),
        "maxpool2" => (vec![distinct(rng, &[1, 2, 4, 6])], Box::new(|t, v| t.maxpool2(v[0]))),
        "group_norm" => (
            vec![
                normal(rng, &[2, 4, 3, 3]),
                uniform(rng, &[4], 0.5, 1.5),
                normal(rng, &[4]),
            ],
            Box::new(|t, v| t.group_norm(v[0], 2, v[1], v[2])),
        ),
        "leaky_relu" => (
            vec![off_kink(rng, &[3, 5])],
            Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2))),
        ),
        "softplus" => (
            vec![uniform(rng, &[3, 5], -4.0, 4.0)],
            Box::new(|t, v| Ok(t.softplus(v[0]))),
        ),
        "concat_channels" => (
            vec![normal(rng, &[2, 2, 3, 3]), normal(rng, &[2, 3, 3, 3])],
            Box::new(|t, v| t.concat_channels(v[0], v[1])),
        ),
        "add" => (
            vec![normal(rng, &[4, 3]), normal(rng, &[4, 3])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "sub" => (
            vec![normal(rng, &[4, 3]), normal(rng, &[4, 3])],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        "mul" => (
            vec![normal(rng, &[4, 3]), normal(rng, &[4, 3])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        "div" => (
            vec![normal(rng, &[4, 3]), uniform(rng, &[4, 3], 0.5, 2.0)],
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        "square" => (vec![normal(rng, &[4, 3])], Box::new(|t, v| Ok(t.square(v[0])))),
        "sqrt" => (vec![uniform(rng, &[4, 3], 0.2, 2.0)], Box::new(|t, v| Ok(t.sqrt(v[0])))),
        "log" => (vec![uniform(rng, &[4, 3], 0.2, 2.0)], Box::new(|t, v| Ok(t.log(v[0])))),
        "scale" => (vec![normal(rng, &[4, 3])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        "add_scalar" => (vec![normal(rng, &[4, 3])], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        "sum" => (vec![normal(rng, &[4, 3])], Box::new(|t, v| Ok(t.sum(v[0])))),
        "mean" => (vec![normal(rng, &[4, 3])], Box::new(|t, v| Ok(t.mean(v[0])))),
        "relu_project" => (vec![off_kink(rng, &[4, 3])], Box::new(|t, v| Ok(t.relu_project(v[0])))),
        "project" => {
            let op = small_operator();
            (vec![normal(rng, &[5, 6])], Box::new(move |t, v| t.project(v[0], &op)))
        }
        "backproject" => {
            let op = small_operator();
            (
                vec![normal(rng, &[7, 9])],
                Box::new(move |t, v| t.backproject(v[0], &op)),
            )
        }
        "tv_isotropic" => (
            vec![normal(rng, &[5, 6])],
            Box::new(|t, v| t.tv(v[0], TvVariant::Isotropic, 1e-2)),
        ),
        "tv_anisotropic" => (
            vec![distinct(rng, &[5, 6])],
            Box::new(|t, v| t.tv(v[0], TvVariant::Anisotropic, 0.0)),
        ),
        "reshape" => (vec![normal(rng, &[4, 3])], Box::new(|t, v| t.reshape(v[0], &[2, 1, 6]))),
        other => return Err(Error::InvalidArgument(format!("gradcheck: unknown op {other:?}"))),
    };
    check_function(op_name, &inputs, f.as_ref(), seed)
}
