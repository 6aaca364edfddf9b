//! Shared test oracles: float64 reference implementations of every
//! primitive, central finite differences over them, and workspace fuzzing.
//! The reference path never touches the library's tensor ops, so it stays
//! an independent check.

#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tabula::{Tensor, VarStore, Workspace};

// ---- float64 reference implementations ----

pub mod refops {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    pub fn softmax(x: &[f64], row: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..x.len() / row {
            let chunk = &x[r * row..(r + 1) * row];
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..row {
                let e = (chunk[c] - max).exp();
                out[r * row + c] = e;
                sum += e;
            }
            for c in 0..row {
                out[r * row + c] /= sum;
            }
        }
        out
    }

    pub fn cross_entropy(logits: &[f64], targets: &[usize], classes: usize) -> f64 {
        let rows = targets.len();
        let mut total = 0.0;
        for r in 0..rows {
            let chunk = &logits[r * classes..(r + 1) * classes];
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + chunk.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - chunk[targets[r]];
        }
        total / rows as f64
    }

    pub fn mse(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
    }

    /// Column broadcast matching the implementation's one supported pattern.
    pub fn broadcast_col(col: &[f64], cols: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(col.len() * cols);
        for &v in col {
            for _ in 0..cols {
                out.push(v);
            }
        }
        out
    }
}

// ---- finite differences ----

pub struct FdTolerance {
    pub h: f64,
    pub rtol: f64,
    pub floor: f64,
}

impl Default for FdTolerance {
    fn default() -> Self {
        FdTolerance {
            h: 1e-3,
            rtol: 1e-3,
            floor: 1e-5,
        }
    }
}

/// Compares implementation gradients against central finite differences of
/// an f64 reference loss. `diff[i]` marks which inputs carry gradients.
pub fn check_gradients(
    label: &str,
    inputs: &[(Vec<usize>, Vec<f32>)],
    diff: &[bool],
    impl_loss: &dyn Fn(&[Tensor]) -> Tensor,
    ref_loss: &dyn Fn(&[Vec<f64>]) -> f64,
    tol: &FdTolerance,
) {
    let tensors: Vec<Tensor> = inputs
        .iter()
        .zip(diff)
        .map(|((shape, data), &d)| {
            let t = Tensor::from_vec(shape.clone(), data.clone());
            if d {
                t.requires_grad_()
            } else {
                t
            }
        })
        .collect();
    let loss = impl_loss(&tensors);
    loss.backward()
        .unwrap_or_else(|e| panic!("{label}: backward failed: {e}"));

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(_, data)| data.iter().map(|&v| v as f64).collect())
        .collect();

    for (i, tensor) in tensors.iter().enumerate() {
        if !diff[i] {
            continue;
        }
        let grad = tensor
            .grad()
            .unwrap_or_else(|| panic!("{label}: input {i} missing grad"))
            .to_vec();
        for j in 0..grad.len() {
            let mut plus = base.clone();
            plus[i][j] += tol.h;
            let mut minus = base.clone();
            minus[i][j] -= tol.h;
            let fd = (ref_loss(&plus) - ref_loss(&minus)) / (2.0 * tol.h);
            let got = grad[j] as f64;
            let bound = (tol.rtol * fd.abs()).max(tol.floor);
            assert!(
                (got - fd).abs() <= bound,
                "{label}: input {i} element {j}: impl {got} vs fd {fd} (|diff| {} > {bound})",
                (got - fd).abs()
            );
        }
    }
}

pub fn uniform_data(rng: &mut StdRng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform draws bounded away from zero (for kinked or singular ops).
pub fn offset_data(rng: &mut StdRng, n: usize, min_abs: f32, max_abs: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..max_abs)
        })
        .collect()
}

// ---- the per-op gradient suite ----

/// Runs finite-difference checks for every primitive op over `rounds`
/// random shapes each. Panics on the first violation.
pub fn op_gradient_suite(rounds: usize, seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let tol = FdTolerance::default();

    for round in 0..rounds {
        let b = rng.gen_range(1..=4usize);
        let n = rng.gen_range(2..=5usize);
        let m = rng.gen_range(1..=4usize);
        let k = rng.gen_range(1..=4usize);

        // Elementwise binaries on matching shapes plus both column
        // broadcast orientations; weights densify the output.
        for (op_name, kind) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
            for mode in 0..3u8 {
                let (sa, sb) = match mode {
                    0 => (vec![b, n], vec![b, n]),
                    1 => (vec![b, 1], vec![b, n]),
                    _ => (vec![b, n], vec![b, 1]),
                };
                let na: usize = sa.iter().product();
                let nb: usize = sb.iter().product();
                let a_data = uniform_data(&mut rng, na, -2.0, 2.0);
                let b_data = uniform_data(&mut rng, nb, -2.0, 2.0);
                let weights = uniform_data(&mut rng, b * n, -1.0, 1.0);
                let w_shape = vec![b, n];
                let label = format!("{op_name} mode {mode} round {round}");
                let cols = n;
                check_gradients(
                    &label,
                    &[(sa.clone(), a_data), (sb.clone(), b_data), (w_shape, weights)],
                    &[true, true, false],
                    &|ts| {
                        let out = match kind {
                            0 => ts[0].add(&ts[1]).unwrap(),
                            1 => ts[0].sub(&ts[1]).unwrap(),
                            _ => ts[0].mul(&ts[1]).unwrap(),
                        };
                        out.mul(&ts[2]).unwrap().sum()
                    },
                    &|vs| {
                        let expand = |v: &Vec<f64>, shape: &Vec<usize>| -> Vec<f64> {
                            if shape[1] == 1 && n > 1 {
                                refops::broadcast_col(v, cols)
                            } else {
                                v.clone()
                            }
                        };
                        let a = expand(&vs[0], &sa);
                        let bb = expand(&vs[1], &sb);
                        let mut total = 0.0;
                        for i in 0..a.len() {
                            let v = match kind {
                                0 => a[i] + bb[i],
                                1 => a[i] - bb[i],
                                _ => a[i] * bb[i],
                            };
                            total += v * vs[2][i];
                        }
                        total
                    },
                    &tol,
                );
            }
        }

        // Scalar multiplication.
        {
            let factor = rng.gen_range(-2.0..2.0f32);
            let data = uniform_data(&mut rng, b * n, -2.0, 2.0);
            let weights = uniform_data(&mut rng, b * n, -1.0, 1.0);
            check_gradients(
                &format!("scalar_mul round {round}"),
                &[(vec![b, n], data), (vec![b, n], weights)],
                &[true, false],
                &|ts| ts[0].mul_scalar(factor).mul(&ts[1]).unwrap().sum(),
                &|vs| {
                    vs[0]
                        .iter()
                        .zip(&vs[1])
                        .map(|(x, w)| x * factor as f64 * w)
                        .sum()
                },
                &tol,
            );
        }

        // Matrix product.
        {
            let a_data = uniform_data(&mut rng, m * k, -1.5, 1.5);
            let b_data = uniform_data(&mut rng, k * n, -1.5, 1.5);
            let weights = uniform_data(&mut rng, m * n, -1.0, 1.0);
            check_gradients(
                &format!("matmul round {round}"),
                &[(vec![m, k], a_data), (vec![k, n], b_data), (vec![m, n], weights)],
                &[true, true, false],
                &|ts| ts[0].matmul(&ts[1]).unwrap().mul(&ts[2]).unwrap().sum(),
                &|vs| {
                    refops::matmul(&vs[0], &vs[1], m, k, n)
                        .iter()
                        .zip(&vs[2])
                        .map(|(x, w)| x * w)
                        .sum()
                },
                &tol,
            );
        }

        // Unary maps; inputs avoid kinks and singularities.
        {
            let count = b * n;
            let weights = uniform_data(&mut rng, count, -1.0, 1.0);
            let relu_in = offset_data(&mut rng, count, 0.05, 2.0);
            check_gradients(
                &format!("relu round {round}"),
                &[(vec![b, n], relu_in), (vec![b, n], weights.clone())],
                &[true, false],
                &|ts| ts[0].relu().mul(&ts[1]).unwrap().sum(),
                &|vs| {
                    vs[0]
                        .iter()
                        .zip(&vs[1])
                        .map(|(&x, w)| x.max(0.0) * w)
                        .sum()
                },
                &tol,
            );

            let tanh_in = uniform_data(&mut rng, count, -2.0, 2.0);
            check_gradients(
                &format!("tanh round {round}"),
                &[(vec![b, n], tanh_in), (vec![b, n], weights.clone())],
                &[true, false],
                &|ts| ts[0].tanh().mul(&ts[1]).unwrap().sum(),
                &|vs| vs[0].iter().zip(&vs[1]).map(|(x, w)| x.tanh() * w).sum(),
                &tol,
            );

            let exp_in = uniform_data(&mut rng, count, -2.0, 2.0);
            check_gradients(
                &format!("exp round {round}"),
                &[(vec![b, n], exp_in), (vec![b, n], weights.clone())],
                &[true, false],
                &|ts| ts[0].exp().mul(&ts[1]).unwrap().sum(),
                &|vs| vs[0].iter().zip(&vs[1]).map(|(x, w)| x.exp() * w).sum(),
                &tol,
            );

            let log_in = uniform_data(&mut rng, count, 0.2, 3.0);
            check_gradients(
                &format!("log round {round}"),
                &[(vec![b, n], log_in), (vec![b, n], weights)],
                &[true, false],
                &|ts| ts[0].log().mul(&ts[1]).unwrap().sum(),
                &|vs| vs[0].iter().zip(&vs[1]).map(|(x, w)| x.ln() * w).sum(),
                &tol,
            );
        }

        // Softmax over the last axis.
        {
            let data = uniform_data(&mut rng, b * n, -2.0, 2.0);
            let weights = uniform_data(&mut rng, b * n, -1.0, 1.0);
            check_gradients(
                &format!("softmax round {round}"),
                &[(vec![b, n], data), (vec![b, n], weights)],
                &[true, false],
                &|ts| ts[0].softmax().unwrap().mul(&ts[1]).unwrap().sum(),
                &|vs| {
                    refops::softmax(&vs[0], n)
                        .iter()
                        .zip(&vs[1])
                        .map(|(x, w)| x * w)
                        .sum()
                },
                &tol,
            );
        }

        // Gather along the last axis (indices constant).
        {
            let data = uniform_data(&mut rng, b * n, -2.0, 2.0);
            let indices: Vec<f32> = (0..b).map(|_| rng.gen_range(0..n) as f32).collect();
            let weights = uniform_data(&mut rng, b, -1.0, 1.0);
            let idx_ref: Vec<usize> = indices.iter().map(|&v| v as usize).collect();
            check_gradients(
                &format!("gather round {round}"),
                &[(vec![b, n], data), (vec![b], indices), (vec![b], weights)],
                &[true, false, false],
                &|ts| ts[0].gather(&ts[1]).unwrap().mul(&ts[2]).unwrap().sum(),
                &|vs| {
                    idx_ref
                        .iter()
                        .enumerate()
                        .map(|(r, &i)| vs[0][r * n + i] * vs[2][r])
                        .sum()
                },
                &tol,
            );
        }

        // Concat along axis 1, stack, slice and reshape plumbing.
        {
            let left = uniform_data(&mut rng, b * n, -2.0, 2.0);
            let right = uniform_data(&mut rng, b * m, -2.0, 2.0);
            let weights = uniform_data(&mut rng, b * (n + m), -1.0, 1.0);
            check_gradients(
                &format!("concat round {round}"),
                &[
                    (vec![b, n], left),
                    (vec![b, m], right),
                    (vec![b, n + m], weights),
                ],
                &[true, true, false],
                &|ts| {
                    Tensor::concat(&[ts[0].clone(), ts[1].clone()], 1)
                        .unwrap()
                        .mul(&ts[2])
                        .unwrap()
                        .sum()
                },
                &|vs| {
                    let mut total = 0.0;
                    for r in 0..b {
                        for c in 0..n {
                            total += vs[0][r * n + c] * vs[2][r * (n + m) + c];
                        }
                        for c in 0..m {
                            total += vs[1][r * m + c] * vs[2][r * (n + m) + n + c];
                        }
                    }
                    total
                },
                &tol,
            );

            let a = uniform_data(&mut rng, n, -2.0, 2.0);
            let c = uniform_data(&mut rng, n, -2.0, 2.0);
            let weights = uniform_data(&mut rng, n, -1.0, 1.0);
            check_gradients(
                &format!("stack/slice round {round}"),
                &[(vec![n], a), (vec![n], c), (vec![n], weights)],
                &[true, true, false],
                &|ts| {
                    let stacked = Tensor::stack(&[ts[0].clone(), ts[1].clone()]).unwrap();
                    // Pick the second row back out and reshape for weighting.
                    stacked
                        .slice0(1)
                        .unwrap()
                        .add(&stacked.slice0(0).unwrap())
                        .unwrap()
                        .reshape(vec![n])
                        .unwrap()
                        .mul(&ts[2])
                        .unwrap()
                        .sum()
                },
                &|vs| {
                    (0..n)
                        .map(|i| (vs[0][i] + vs[1][i]) * vs[2][i])
                        .sum()
                },
                &tol,
            );
        }

        // Reductions and losses.
        {
            let data = uniform_data(&mut rng, b * n, -2.0, 2.0);
            check_gradients(
                &format!("sum round {round}"),
                &[(vec![b, n], data.clone())],
                &[true],
                &|ts| ts[0].sum(),
                &|vs| vs[0].iter().sum(),
                &tol,
            );
            check_gradients(
                &format!("mean round {round}"),
                &[(vec![b, n], data)],
                &[true],
                &|ts| ts[0].mean().unwrap(),
                &|vs| vs[0].iter().sum::<f64>() / (b * n) as f64,
                &tol,
            );

            let a = uniform_data(&mut rng, b * n, -2.0, 2.0);
            let target = uniform_data(&mut rng, b * n, -2.0, 2.0);
            check_gradients(
                &format!("mse round {round}"),
                &[(vec![b, n], a), (vec![b, n], target)],
                &[true, true],
                &|ts| ts[0].mse_loss(&ts[1]).unwrap(),
                &|vs| refops::mse(&vs[0], &vs[1]),
                &tol,
            );

            let logits = uniform_data(&mut rng, b * n, -2.0, 2.0);
            let targets: Vec<f32> = (0..b).map(|_| rng.gen_range(0..n) as f32).collect();
            let t_ref: Vec<usize> = targets.iter().map(|&v| v as usize).collect();
            check_gradients(
                &format!("cross_entropy round {round}"),
                &[(vec![b, n], logits), (vec![b], targets)],
                &[true, false],
                &|ts| ts[0].cross_entropy(&ts[1]).unwrap(),
                &|vs| refops::cross_entropy(&vs[0], &t_ref, n),
                &tol,
            );
        }
    }
}

/// Two-layer tanh MLP gradient check at the tighter tolerance the
/// end-to-end case calls for.
pub fn mlp_gradient_check(seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let (input, hidden, out) = (5, 8, 3);
    let x = uniform_data(&mut rng, input, -1.0, 1.0);
    let w1 = uniform_data(&mut rng, input * hidden, -0.7, 0.7);
    let w2 = uniform_data(&mut rng, hidden * out, -0.7, 0.7);
    let target = uniform_data(&mut rng, out, -1.0, 1.0);

    let tol = FdTolerance {
        h: 1e-3,
        rtol: 1e-4,
        floor: 1e-6,
    };
    check_gradients(
        "two-layer tanh mlp",
        &[
            (vec![1, input], x),
            (vec![input, hidden], w1),
            (vec![hidden, out], w2),
            (vec![1, out], target),
        ],
        &[true, true, true, false],
        &|ts| {
            let h = ts[0].matmul(&ts[1]).unwrap().tanh();
            let y = h.matmul(&ts[2]).unwrap();
            y.mse_loss(&ts[3]).unwrap()
        },
        &|vs| {
            let h: Vec<f64> = refops::matmul(&vs[0], &vs[1], 1, input, hidden)
                .iter()
                .map(|v| v.tanh())
                .collect();
            let y = refops::matmul(&h, &vs[2], 1, hidden, out);
            refops::mse(&y, &vs[3])
        },
        &tol,
    );
}

// ---- workspace fuzzing ----

/// Random workspace: fuzzed names, up to 16 timesteps, batch up to 8,
/// per-item rank up to 3.
pub fn fuzz_workspace(rng: &mut StdRng) -> Workspace {
    let mut ws = Workspace::new();
    let batch = rng.gen_range(1..=8);
    let n_vars = rng.gen_range(1..=6);
    for v in 0..n_vars {
        let steps = rng.gen_range(1..=16);
        let rank = rng.gen_range(0..=3);
        let item_shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=3)).collect();
        let item: usize = item_shape.iter().product();
        let name = match rng.gen_range(0..4) {
            0 => format!("env/fuzz_{v}"),
            1 => format!("ns/deep/fuzz_{v}"),
            2 => format!("fuzz_{v}"),
            _ => format!("agent_{v}/value"),
        };
        for t in 0..steps {
            // Arbitrary bit patterns with bit 23 cleared: signs and
            // denormals included, NaN/Inf excluded.
            let data: Vec<f32> = (0..batch * item)
                .map(|_| f32::from_bits(rng.gen::<u32>() & 0xFF7F_FFFF))
                .collect();
            let mut shape = vec![batch];
            shape.extend_from_slice(&item_shape);
            ws.set(&name, t, Tensor::from_vec(shape, data)).unwrap();
        }
    }
    ws
}

pub fn workspaces_bit_equal(a: &Workspace, b: &Workspace) -> bool {
    if a.variable_names() != b.variable_names() || a.batch_size() != b.batch_size() {
        return false;
    }
    a.variable_names().iter().all(|name| {
        let fa = a.full(name).unwrap();
        let fb = b.full(name).unwrap();
        fa.shape() == fb.shape()
            && fa
                .data()
                .iter()
                .zip(fb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}
