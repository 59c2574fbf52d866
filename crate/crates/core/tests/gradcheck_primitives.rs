//! Finite-difference checks for every differentiable primitive.

use cslab_core::autodiff::{grad_check, Graph, Tensor, Var};
use cslab_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Contracts an arbitrary-shaped output with a fixed random tensor so the
/// check sees a generic linear functional rather than a plain sum.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_t(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, params: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = grad_check(f, &params, 1e-5).unwrap();
    assert!(r.max_rel_error <= TOL, "{name}: {r:?}");
    assert!(r.checked > 0, "{name}: nothing checked");
}

#[test]
fn every_primitive_passes_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..6u64 {
        let m = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=8);
        let n = rng.gen_range(2..=8);
        let s = 100 + trial;

        check("matmul", vec![rand_t(&mut rng, &[m, k]), rand_t(&mut rng, &[k, n])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        });
        check("transpose", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, s)
        });
        check("add", vec![rand_t(&mut rng, &[m, n]), rand_t(&mut rng, &[m, n])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, s)
        });
        check("add_row", vec![rand_t(&mut rng, &[m, n]), rand_t(&mut rng, &[n])], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, s)
        });
        check("sub_scalar", vec![rand_t(&mut rng, &[m, n]), rand_t(&mut rng, &[1])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, s)
        });
        check("mul", vec![rand_t(&mut rng, &[m, n]), rand_t(&mut rng, &[m, n])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, s)
        });
        check("mul_row", vec![rand_t(&mut rng, &[m, n]), rand_t(&mut rng, &[n])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, s)
        });
        check("scale", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, s)
        });
        check("relu", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, s)
        });
        check("softmax", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, s)
        });
        check(
            "layer_norm",
            vec![rand_t(&mut rng, &[m, n]), rand_t(&mut rng, &[n]), rand_t(&mut rng, &[n])],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, s)
            },
        );
        let idx: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..m)).collect();
        check("gather_rows", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            let y = g.gather_rows(v[0], &idx)?;
            project(g, y, s)
        });
        check("mean", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean(sq))
        });
        check("sum", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        });
        let targets: Vec<Option<usize>> =
            (0..m).map(|r| if r % 3 == 2 { None } else { Some(rng.gen_range(0..n)) }).collect();
        check("cross_entropy_with_logits", vec![rand_t(&mut rng, &[m, n])], |g, v| {
            g.cross_entropy_with_logits(v[0], &targets)
        });
    }
}

#[test]
fn causal_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (batch, seq, heads, dh) in [(1, 1, 1, 2), (2, 4, 2, 3), (1, 6, 1, 4), (3, 3, 2, 2)] {
        let d = heads * dh;
        let qkv = rand_t(&mut rng, &[batch * seq, 3 * d]);
        check("causal_attention", vec![qkv], |g, v| {
            let y = g.causal_attention(v[0], batch, seq, heads)?;
            project(g, y, 9)
        });
    }
}

#[test]
fn accumulation_is_linear_in_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_t(&mut rng, &[4, 5]);
    let build = |g: &mut Graph<f64>, w: Var, which: u8| -> Var {
        let a = g.softmax(w).unwrap();
        let pa = project(g, a, 1).unwrap();
        let b = g.relu(w);
        let pb = project(g, b, 2).unwrap();
        match which {
            0 => pa,
            1 => pb,
            _ => g.add(pa, pb).unwrap(),
        }
    };
    let mut grads = Vec::new();
    for which in 0..3u8 {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(x.clone());
        let l = build(&mut g, w, which);
        g.backward(l).unwrap();
        grads.push(g.grad(w));
    }
    for j in 0..x.len() {
        let sum = grads[0].data()[j] + grads[1].data()[j];
        assert!((sum - grads[2].data()[j]).abs() < 1e-12);
    }
}
