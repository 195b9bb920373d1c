//! Finite-difference checks of every tape primitive, at a number of random
//! points each. Shared by the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradient;
use super::tape::BATCH_NORM_EPS;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Step of the central differences.
pub const EPS: f64 = 1e-5;

/// Reduces `v` to a scalar through a fixed random projection so that every
/// output entry carries a distinct weight.
pub fn project(t: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = Tensor::randn(t.shape(v), 1.0, &mut rng);
    let p = t.mul_const(v, w).unwrap();
    t.sum(p)
}

fn normal(s: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(s, 1.0, rng)
}

fn positive(s: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(s, 0.2, 2.0, rng)
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x0 = rng.random_range(0.0..0.6);
    let y0 = rng.random_range(0.0..0.6);
    [x0, y0, x0 + rng.random_range(0.2..0.4), y0 + rng.random_range(0.2..0.4)]
}

struct Suite {
    points: u64,
    worst: Vec<(&'static str, f64)>,
}

impl Suite {
    fn check<F>(&mut self, name: &'static str, shapes: &[&[usize]], gen: impl Fn(&[usize], &mut ChaCha8Rng) -> Tensor, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var + Copy,
    {
        let mut worst: f64 = 0.0;
        for point in 0..self.points {
            let mut rng = ChaCha8Rng::seed_from_u64(point * 7919 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| gen(s, &mut rng)).collect();
            let r = check_gradient(|t, v| { let out = f(t, v); project(t, out, point) }, &inputs, EPS, None);
            worst = worst.max(r.max_rel_error);
        }
        self.worst.push((name, worst));
    }
}

/// Worst relative gradient error of each primitive over `points` random
/// inputs.
pub fn primitive_checks(points: u64) -> Vec<(&'static str, f64)> {
    let mut s = Suite { points, worst: Vec::new() };
    s.check("add", &[&[3, 4], &[3, 4]], normal, |t, v| t.add(v[0], v[1]).unwrap());
    s.check("sub", &[&[3, 4], &[3, 4]], normal, |t, v| t.sub(v[0], v[1]).unwrap());
    s.check("mul", &[&[3, 4], &[3, 4]], normal, |t, v| t.mul(v[0], v[1]).unwrap());
    s.check("mul_self", &[&[5]], normal, |t, v| t.mul(v[0], v[0]).unwrap());
    s.check("mul_const", &[&[2, 3]], normal, |t, v| {
        t.mul_const(v[0], Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]).unwrap()).unwrap()
    });
    s.check("scale", &[&[6]], normal, |t, v| t.scale(v[0], -2.5));
    s.check("add_scalar", &[&[6]], normal, |t, v| {
        let a = t.add_scalar(v[0], 0.7);
        t.square(a)
    });
    s.check("leaky_relu", &[&[4, 5]], normal, |t, v| t.leaky_relu(v[0], 0.2));
    s.check("relu", &[&[4, 5]], normal, |t, v| t.relu(v[0]));
    s.check("sigmoid", &[&[4, 5]], normal, |t, v| t.sigmoid(v[0]));
    s.check("tanh", &[&[4, 5]], normal, |t, v| t.tanh(v[0]));
    s.check("abs", &[&[4, 5]], normal, |t, v| t.abs(v[0]));
    s.check("square", &[&[4, 5]], normal, |t, v| t.square(v[0]));
    s.check("ln", &[&[4, 5]], positive, |t, v| t.ln(v[0]));
    s.check("clamp", &[&[4, 5]], normal, |t, v| t.clamp(v[0], -0.5, 0.8));

    s.check("matmul", &[&[3, 4], &[4, 2]], normal, |t, v| t.matmul(v[0], v[1]).unwrap());
    s.check("transpose", &[&[3, 4]], normal, |t, v| t.transpose(v[0]).unwrap());
    s.check("add_row_bias", &[&[3, 4], &[4]], normal, |t, v| t.add_row_bias(v[0], v[1]).unwrap());
    s.check("linear", &[&[2, 3], &[3, 5], &[5]], normal, |t, v| t.linear(v[0], v[1], v[2]).unwrap());

    s.check("conv3x3", &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], normal, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2])).unwrap()
    });
    s.check("conv1x1", &[&[2, 3, 4, 4], &[2, 3, 1, 1]], normal, |t, v| t.conv2d(v[0], v[1], None).unwrap());
    s.check("conv5x5", &[&[1, 2, 6, 6], &[1, 2, 5, 5]], normal, |t, v| t.conv2d(v[0], v[1], None).unwrap());

    s.check("batch_norm_4d", &[&[3, 2, 3, 3], &[2], &[2]], normal, |t, v| {
        t.batch_norm(v[0], v[1], v[2], BATCH_NORM_EPS).unwrap()
    });
    s.check("batch_norm_2d", &[&[4, 3], &[3], &[3]], normal, |t, v| {
        t.batch_norm(v[0], v[1], v[2], BATCH_NORM_EPS).unwrap()
    });
    s.check("upsample2", &[&[2, 2, 3, 2]], normal, |t, v| t.upsample2(v[0]).unwrap());
    s.check("avg_pool2", &[&[2, 2, 4, 6]], normal, |t, v| t.avg_pool2(v[0]).unwrap());
    s.check("tile_spatial", &[&[2, 3]], normal, |t, v| t.tile_spatial(v[0], 3, 2).unwrap());

    s.check("sum_axis0", &[&[3, 4, 2]], normal, |t, v| t.sum_axis(v[0], 0).unwrap());
    s.check("sum_axis1", &[&[3, 4, 2]], normal, |t, v| t.sum_axis(v[0], 1).unwrap());
    s.check("sum_axis2", &[&[3, 4, 2]], normal, |t, v| t.sum_axis(v[0], 2).unwrap());
    s.check("sum", &[&[3, 4]], normal, |t, v| {
        let s = t.sum(v[0]);
        t.square(s)
    });
    s.check("mean", &[&[3, 4]], normal, |t, v| {
        let s = t.mean(v[0]);
        t.square(s)
    });
    s.check("concat0", &[&[2, 3], &[1, 3]], normal, |t, v| t.concat(&[v[0], v[1]], 0).unwrap());
    s.check("concat1", &[&[2, 3, 2], &[2, 1, 2], &[2, 2, 2]], normal, |t, v| t.concat(&[v[0], v[1], v[2]], 1).unwrap());
    s.check("slice", &[&[3, 5, 2]], normal, |t, v| t.slice(v[0], 1, 1, 3).unwrap());
    s.check("gather_rows", &[&[4, 3]], normal, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap());
    s.check("embedding", &[&[5, 2]], normal, |t, v| t.embedding(v[0], &[4, 4, 1]).unwrap());
    s.check("scatter_add_rows", &[&[5, 2]], normal, |t, v| t.scatter_add_rows(v[0], &[1, 0, 1, 2, 1], 3).unwrap());
    s.check("reshape", &[&[2, 6]], normal, |t, v| t.reshape(v[0], &[3, 4]).unwrap());


    s.check("grid_sample", &[&[2, 2, 4, 4]], normal, |t, v| {
        t.grid_sample(v[0], &[[0.1, 0.2, 0.7, 0.9], [0.0, 0.0, 1.0, 0.5]], 8, 8).unwrap()
    });
    s.check("crop_resize", &[&[2, 3, 8, 8]], normal, |t, v| {
        t.crop_resize(v[0], &[(0, [0.1, 0.2, 0.7, 0.9]), (1, [0.0, 0.0, 1.0, 1.0]), (1, [0.3, 0.3, 0.45, 0.5])], 4)
            .unwrap()
    });
    s.check("softmax_cross_entropy", &[&[4, 5]], normal, |t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap());
    let points = s.points;
    let mut worst: f64 = 0.0;
    for point in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(point + 100);
        let src = Tensor::randn(&[2, 1, 5, 5], 1.0, &mut rng);
        let boxes: Vec<f64> = (0..2).flat_map(|_| random_box(&mut rng)).collect();
        let boxes = Tensor::new(&[2, 4], boxes).unwrap();
        let r = check_gradient(
            |t, v| {
                let out = t.grid_sample_with_box_grad(v[0], v[1], 8, 8).unwrap();
                project(t, out, point)
            },
            &[src, boxes],
            EPS,
            None,
        );
        worst = worst.max(r.max_rel_error);
    }
    s.worst.push(("grid_sample_with_box_grad", worst));
    s.worst
}
