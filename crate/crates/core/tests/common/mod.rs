//! Helpers shared by the integration test binaries.

use jobgen_core::tensor::finite_difference_check;
use jobgen_core::{GradTape, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = Box<dyn Fn(&mut GradTape, &[NodeId]) -> NodeId>;

struct Case {
    label: &'static str,
    shapes: Vec<Vec<usize>>,
    points: Vec<Vec<f64>>,
    build: Build,
}

fn rand_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Reduces any node to a scalar through a fixed, sign-alternating
/// weighted sum. Non-uniform weights make the incoming cotangent
/// non-constant, which catches transposition mistakes that a plain sum
/// would mask.
fn wsum(tape: &mut GradTape, x: NodeId) -> NodeId {
    let (shape, n) = {
        let v = tape.value(x);
        (v.shape().to_vec(), v.numel())
    };
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.35 + 0.07 * (i % 7) as f64)
        })
        .collect();
    let w = tape.constant(Tensor::new(shape, weights).unwrap());
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod).unwrap()
}

fn cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let mut case = |label: &'static str,
                    shapes: Vec<Vec<usize>>,
                    points: Vec<Vec<f64>>,
                    build: Build| {
        cases.push(Case {
            label,
            shapes,
            points,
            build,
        });
    };

    case(
        "matmul",
        vec![vec![3, 4], vec![4, 2]],
        vec![rand_vec(11, 12, -1.5, 1.5), rand_vec(12, 8, -1.5, 1.5)],
        Box::new(|t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "matmul_tb",
        vec![vec![3, 4], vec![2, 4]],
        vec![rand_vec(13, 12, -1.5, 1.5), rand_vec(14, 8, -1.5, 1.5)],
        Box::new(|t, ids| {
            let c = t.matmul_tb(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "add",
        vec![vec![2, 3], vec![2, 3]],
        vec![rand_vec(15, 6, -1.0, 1.0), rand_vec(16, 6, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.add(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "add_broadcast",
        vec![vec![2, 3], vec![3]],
        vec![rand_vec(17, 6, -1.0, 1.0), rand_vec(18, 3, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.add(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "sub",
        vec![vec![2, 3], vec![2, 3]],
        vec![rand_vec(19, 6, -1.0, 1.0), rand_vec(20, 6, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.sub(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "sub_broadcast",
        vec![vec![2, 3], vec![3]],
        vec![rand_vec(21, 6, -1.0, 1.0), rand_vec(22, 3, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.sub(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "mul",
        vec![vec![2, 3], vec![2, 3]],
        vec![rand_vec(23, 6, -1.0, 1.0), rand_vec(24, 6, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.mul(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "mul_broadcast",
        vec![vec![2, 3], vec![3]],
        vec![rand_vec(25, 6, -1.0, 1.0), rand_vec(26, 3, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.mul(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "scale",
        vec![vec![5]],
        vec![rand_vec(27, 5, -2.0, 2.0)],
        Box::new(|t, ids| {
            let c = t.scale(ids[0], -0.7).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "concat_vectors",
        vec![vec![2], vec![3]],
        vec![rand_vec(28, 2, -1.0, 1.0), rand_vec(29, 3, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.concat(ids).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "concat_matrices",
        vec![vec![2, 2], vec![2, 3]],
        vec![rand_vec(30, 4, -1.0, 1.0), rand_vec(31, 6, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t.concat(ids).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "row_gather",
        vec![vec![4, 3]],
        vec![rand_vec(32, 12, -1.0, 1.0)],
        Box::new(|t, ids| {
            // Row 2 twice: duplicates must accumulate.
            let c = t.row_gather(ids[0], vec![2, 0, 2]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "select_entries",
        vec![vec![3, 4]],
        vec![rand_vec(33, 12, -1.0, 1.0)],
        Box::new(|t, ids| {
            let c = t
                .select_entries(ids[0], vec![(0, 1), (2, 3), (0, 1), (1, 0)])
                .unwrap();
            wsum(t, c)
        }),
    );
    case(
        "softmax",
        vec![vec![2, 4]],
        vec![rand_vec(34, 8, -2.0, 2.0)],
        Box::new(|t, ids| {
            let c = t.softmax(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "log_softmax",
        vec![vec![2, 4]],
        vec![rand_vec(35, 8, -2.0, 2.0)],
        Box::new(|t, ids| {
            let c = t.log_softmax(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "layer_norm",
        vec![vec![2, 4], vec![4], vec![4]],
        vec![
            rand_vec(36, 8, -2.0, 2.0),
            rand_vec(37, 4, 0.5, 1.5),
            rand_vec(38, 4, -0.5, 0.5),
        ],
        Box::new(|t, ids| {
            let c = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "relu",
        vec![vec![6]],
        // Keep probes away from the kink at zero.
        vec![vec![-1.3, -0.4, 0.6, 1.8, -2.0, 0.9]],
        Box::new(|t, ids| {
            let c = t.relu(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "gelu",
        vec![vec![6]],
        vec![rand_vec(39, 6, -2.5, 2.5)],
        Box::new(|t, ids| {
            let c = t.gelu(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "sigmoid",
        vec![vec![6]],
        vec![rand_vec(40, 6, -3.0, 3.0)],
        Box::new(|t, ids| {
            let c = t.sigmoid(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "softplus",
        vec![vec![6]],
        vec![rand_vec(41, 6, -3.0, 3.0)],
        Box::new(|t, ids| {
            let c = t.softplus(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "ln",
        vec![vec![5]],
        vec![rand_vec(42, 5, 0.3, 3.0)],
        Box::new(|t, ids| {
            let c = t.ln(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "exp",
        vec![vec![5]],
        vec![rand_vec(43, 5, -2.0, 2.0)],
        Box::new(|t, ids| {
            let c = t.exp(ids[0]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "mean",
        vec![vec![2, 3]],
        vec![rand_vec(44, 6, -1.0, 1.0)],
        Box::new(|t, ids| t.mean(ids[0]).unwrap()),
    );
    case(
        "sum",
        vec![vec![4]],
        vec![rand_vec(45, 4, -1.0, 1.0)],
        Box::new(|t, ids| t.sum(ids[0]).unwrap()),
    );
    case(
        "causal_mask_fill",
        vec![vec![3, 3]],
        vec![rand_vec(46, 9, -1.5, 1.5)],
        Box::new(|t, ids| {
            let m = t.causal_mask_fill(ids[0]).unwrap();
            let p = t.softmax(m).unwrap();
            wsum(t, p)
        }),
    );
    case(
        "clamp",
        vec![vec![6]],
        // Values on both sides of each bound, none exactly on a bound.
        vec![vec![0.3, 0.95, 1.5, 0.79, 1.21, 1.05]],
        Box::new(|t, ids| {
            let c = t.clamp(ids[0], 0.8, 1.2).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "minimum",
        vec![vec![5], vec![5]],
        // Interleaved so each operand wins somewhere; no ties.
        vec![
            vec![0.1, 0.9, -0.3, 0.7, -1.2],
            vec![0.5, 0.2, -0.8, 1.4, -0.6],
        ],
        Box::new(|t, ids| {
            let c = t.minimum(ids[0], ids[1]).unwrap();
            wsum(t, c)
        }),
    );
    case(
        "mlp_composite",
        vec![vec![2, 3], vec![3, 4], vec![4], vec![4, 2], vec![2]],
        vec![
            rand_vec(47, 6, -1.0, 1.0),
            rand_vec(48, 12, -0.8, 0.8),
            rand_vec(49, 4, -0.3, 0.3),
            rand_vec(50, 8, -0.8, 0.8),
            rand_vec(51, 2, -0.3, 0.3),
        ],
        Box::new(|t, ids| {
            let h = t.matmul(ids[0], ids[1]).unwrap();
            let h = t.add(h, ids[2]).unwrap();
            let h = t.gelu(h).unwrap();
            let o = t.matmul(h, ids[3]).unwrap();
            let o = t.add(o, ids[4]).unwrap();
            let s = t.softplus(o).unwrap();
            t.mean(s).unwrap()
        }),
    );

    cases
}

/// Runs the finite-difference check over the whole op catalogue, testing
/// each input of each case separately. Returns `(label, input index,
/// worst relative error)` rows.
pub fn gradient_sweep() -> Vec<(&'static str, usize, f64)> {
    let mut results = Vec::new();
    for case in cases() {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = case
            .shapes
            .iter()
            .zip(case.points.iter())
            .map(|(s, p)| tape.param(Tensor::new(s.clone(), p.clone()).unwrap()))
            .collect();
        let root = (case.build)(&mut tape, &ids);
        assert_eq!(tape.value(root).numel(), 1, "{}: root must be scalar", case.label);
        let grads = tape.backward(root).unwrap();
        for i in 0..ids.len() {
            let analytic = grads.get_or_zeros(&tape, ids[i]);
            let mut f = |vals: &[f64]| -> f64 {
                let mut t = GradTape::new();
                let ids2: Vec<NodeId> = case
                    .shapes
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let data = if j == i {
                            vals.to_vec()
                        } else {
                            case.points[j].clone()
                        };
                        t.param(Tensor::new(s.clone(), data).unwrap())
                    })
                    .collect();
                let root2 = (case.build)(&mut t, &ids2);
                t.value(root2).item().unwrap()
            };
            let err = finite_difference_check(&mut f, &case.points[i], 1e-5, analytic.data());
            results.push((case.label, i, err));
        }
    }
    results
}
