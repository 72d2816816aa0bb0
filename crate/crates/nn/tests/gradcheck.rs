//! Central finite-difference checks of every backward rule, in f64.

use ggograde_nn::{Conv2dGeometry, Pool2d, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Checks d(sum(f(params) * weights))/d(params) against central differences.
fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let values: Vec<Vec<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let params: Vec<Tensor<f64>> = values.iter().zip(shapes).map(|(v, s)| Tensor::param(v.clone(), s)).collect();
    let out = f(&params);
    let weights = random(out.shape(), &mut rng);
    out.backward_with(weights.clone());

    let objective = |vals: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor<f64>> = vals.iter().zip(shapes).map(|(v, s)| Tensor::new(v.clone(), s)).collect();
        f(&ts).to_vec().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    for (pi, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for i in 0..p.numel() {
            let mut plus = values.clone();
            plus[pi][i] += H;
            let mut minus = values.clone();
            minus[pi][i] -= H;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * H);
            let err = (analytic[i] - numeric).abs() / (1.0f64).max(numeric.abs());
            assert!(err < TOL, "{name}: param {pi} elem {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }
}

#[test]
fn linear_and_bias() {
    check("linear", &[&[3, 5], &[4, 5], &[4]], |p| p[0].linear(&p[1], Some(&p[2])));
    check("linear3d", &[&[2, 3, 5], &[4, 5]], |p| p[0].linear(&p[1], None));
}

#[test]
fn batched_matmul() {
    check("bmm", &[&[2, 3, 4], &[2, 4, 5]], |p| p[0].bmm(&p[1], false));
    check("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |p| p[0].bmm(&p[1], true));
}

#[test]
fn convolution_geometries() {
    let geoms = [
        (vec![2, 3, 6, 5], vec![4, 3, 3, 3], Conv2dGeometry::new(1, 1)),
        (vec![1, 2, 7, 7], vec![3, 2, 3, 3], Conv2dGeometry::new(2, 0)),
        (vec![2, 3, 4, 4], vec![2, 3, 1, 1], Conv2dGeometry::new(1, 0)),
        (vec![1, 2, 5, 6], vec![2, 2, 1, 3], Conv2dGeometry { stride: (1, 1), padding: (0, 1) }),
        (vec![1, 2, 9, 8], vec![2, 2, 4, 2], Conv2dGeometry { stride: (3, 2), padding: (2, 1) }),
    ];
    for (i, (xs, ws, g)) in geoms.into_iter().enumerate() {
        let bias_shape = [ws[0]];
        check(&format!("conv{i}"), &[&xs, &ws, &bias_shape], move |p| p[0].conv2d(&p[1], Some(&p[2]), g));
    }
}

#[test]
fn pooling() {
    check("maxpool", &[&[1, 2, 7, 7]], |p| p[0].max_pool2d(Pool2d::new(3, 2).ceil()));
    check("maxpool_pad", &[&[2, 1, 6, 6]], |p| p[0].max_pool2d(Pool2d::new(3, 2).padded(1)));
    check("avgpool", &[&[1, 2, 5, 5]], |p| p[0].avg_pool2d(Pool2d::new(3, 1).padded(1), true));
    check("avgpool_nopad", &[&[1, 2, 6, 6]], |p| p[0].avg_pool2d(Pool2d::new(2, 2), false));
    check("adaptive", &[&[1, 2, 5, 7]], |p| p[0].adaptive_avg_pool2d(3, 2));
}

#[test]
fn normalisation() {
    check("bn_train", &[&[3, 2, 3, 3], &[2], &[2]], |p| {
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::full(&[2], 1.0);
        p[0].batch_norm2d(&p[1], &p[2], &rm, &rv, true, 0.1, 1e-5)
    });
    check("bn_eval", &[&[2, 2, 2, 2], &[2], &[2]], |p| {
        let rm = Tensor::new(vec![0.1, -0.2], &[2]);
        let rv = Tensor::new(vec![0.5, 2.0], &[2]);
        p[0].batch_norm2d(&p[1], &p[2], &rm, &rv, false, 0.1, 1e-5)
    });
    check("layernorm", &[&[2, 3, 6], &[6], &[6]], |p| p[0].layer_norm(&p[1], &p[2], 1e-6));
}

#[test]
fn activations_and_softmax() {
    check("gelu", &[&[3, 4]], |p| p[0].gelu());
    check("softmax", &[&[3, 5]], |p| p[0].softmax_last());
    check("relu", &[&[4, 4]], |p| p[0].scale(3.0).relu());
    check("dropout", &[&[4, 6]], |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p[0].dropout(0.3, &mut rng)
    });
}

#[test]
fn shape_ops() {
    check("permute", &[&[2, 3, 4]], |p| p[0].permute(&[1, 2, 0]).scale(2.0));
    check("narrow", &[&[2, 5, 3]], |p| p[0].narrow(1, 1, 3));
    check("concat", &[&[2, 2, 3], &[2, 1, 3], &[2, 3, 3]], |p| Tensor::concat(&[&p[0], &p[1], &p[2]], 1));
    check("repeat", &[&[1, 2, 3]], |p| p[0].repeat_leading(4));
    check("broadcast", &[&[3, 2, 2], &[1, 2, 2]], |p| p[0].add_leading_broadcast(&p[1]));
    check("reshape_add", &[&[2, 6], &[3, 4]], |p| p[0].reshape(&[3, 4]).add(&p[1]));
}

#[test]
fn cross_entropy_loss() {
    check("ce", &[&[4, 4]], |p| p[0].cross_entropy(&[0, 3, 1, 1]));
}

#[test]
fn attention_block_composition() {
    // q, k, v projections sharing one input, as in a transformer layer
    check("attention", &[&[1, 3, 4], &[12, 4]], |p| {
        let qkv = p[0].linear(&p[1], None);
        let q = qkv.narrow(2, 0, 4);
        let k = qkv.narrow(2, 4, 4);
        let v = qkv.narrow(2, 8, 4);
        q.bmm(&k, true).scale(0.5).softmax_last().bmm(&v, false)
    });
}
