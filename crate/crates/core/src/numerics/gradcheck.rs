//! Central finite-difference gradient checking.
//!
//! [`grad_check`] compares the reverse-mode gradient of a scalar
//! function against central differences, coordinate by coordinate.
//! [`check_registered_ops`] runs it over every differentiable op on
//! randomized shapes.

use super::tape::{attention, attention_biased, AttnMask, Tape, Var};
use super::tensor::Tensor;
use super::{CounterRng, Real};
use crate::error::Result;

/// Default relative-error tolerance for the active element mode.
pub fn default_tolerance() -> Real {
    if super::DTYPE == "f64" {
        1e-4
    } else {
        1e-2
    }
}

/// Central-difference step sized to the element precision.
pub fn default_fd_step() -> Real {
    if super::DTYPE == "f64" {
        1e-5
    } else {
        3e-2
    }
}

fn rel_err(a: Real, n: Real) -> Real {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error between the reverse-mode gradient of `f` at
/// `theta` and central differences (f(t+h) - f(t-h)) / 2h.
pub fn grad_check<F>(f: &F, theta: &Tensor, h: Real) -> Result<Real>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let var = tape.leaf(theta.clone());
    let loss = f(&tape, &var)?;
    loss.backward();
    let analytic = var.grad();

    let eval = |t: &Tensor| -> Result<Real> {
        let tape = Tape::new();
        let v = tape.leaf(t.clone());
        Ok(f(&tape, &v)?.scalar())
    };

    let mut max_rel: Real = 0.0;
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        tp.data_mut()[i] += h;
        let mut tm = theta.clone();
        tm.data_mut()[i] -= h;
        let numeric = (eval(&tp)? - eval(&tm)?) / (2.0 * h);
        let rel = rel_err(analytic.data()[i], numeric);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: Real,
    pub pass: bool,
}

fn dims(rng: &mut CounterRng, lo: u64, hi: u64) -> usize {
    (lo + rng.below(hi - lo + 1)) as usize
}

fn randn(rng: &mut CounterRng, r: usize, c: usize) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

/// Runs `cases` randomized gradient checks per registered op and input
/// slot; an op passes when its worst case stays within `tol`.
pub fn check_registered_ops(seed: u64, cases: usize, tol: Real) -> Result<Vec<OpCheck>> {
    let h: Real = default_fd_step();
    let mut out = Vec::new();

    let mut run = |name: &'static str,
                   f: &mut dyn FnMut(&mut CounterRng) -> Result<Real>|
     -> Result<()> {
        let mut rng = CounterRng::new(seed, name);
        let mut worst: Real = 0.0;
        for _ in 0..cases {
            let e = f(&mut rng)?;
            if e > worst {
                worst = e;
            }
        }
        out.push(OpCheck {
            name,
            cases,
            max_rel_err: worst,
            pass: worst <= tol,
        });
        Ok(())
    };

    run("add", &mut |rng| {
        let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
        let other = randn(rng, r, c);
        let w = randn(rng, r, c);
        let theta = randn(rng, r, c);
        grad_check(
            &|tape: &Tape, v: &Var| v.add(&tape.constant(other.clone()))?.weighted_sum(&w),
            &theta,
            h,
        )
    })?;

    run("scale", &mut |rng| {
        let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
        let s = rng.normal();
        let w = randn(rng, r, c);
        let theta = randn(rng, r, c);
        grad_check(&|_: &Tape, v: &Var| v.scale(s).weighted_sum(&w), &theta, h)
    })?;

    run("add_row_broadcast", &mut |rng| {
        let (r, c) = (dims(rng, 2, 5), dims(rng, 1, 5));
        let x = randn(rng, r, c);
        let row = randn(rng, 1, c);
        let w = randn(rng, r, c);
        // Both summands in turn.
        let e1 = grad_check(
            &|tape: &Tape, v: &Var| {
                v.add_row_broadcast(&tape.constant(row.clone()))?.weighted_sum(&w)
            },
            &x,
            h,
        )?;
        let e2 = grad_check(
            &|tape: &Tape, v: &Var| {
                tape.constant(x.clone()).add_row_broadcast(v)?.weighted_sum(&w)
            },
            &row,
            h,
        )?;
        Ok(e1.max(e2))
    })?;

    run("matmul", &mut |rng| {
        let (r, k, c) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let a = randn(rng, r, k);
        let b = randn(rng, k, c);
        let w = randn(rng, r, c);
        let e1 = grad_check(
            &|tape: &Tape, v: &Var| v.matmul(&tape.constant(b.clone()))?.weighted_sum(&w),
            &a,
            h,
        )?;
        let e2 = grad_check(
            &|tape: &Tape, v: &Var| tape.constant(a.clone()).matmul(v)?.weighted_sum(&w),
            &b,
            h,
        )?;
        Ok(e1.max(e2))
    })?;

    run("matmul_nt", &mut |rng| {
        let (r, k, c) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let a = randn(rng, r, k);
        let b = randn(rng, c, k);
        let w = randn(rng, r, c);
        let e1 = grad_check(
            &|tape: &Tape, v: &Var| v.matmul_nt(&tape.constant(b.clone()))?.weighted_sum(&w),
            &a,
            h,
        )?;
        let e2 = grad_check(
            &|tape: &Tape, v: &Var| tape.constant(a.clone()).matmul_nt(v)?.weighted_sum(&w),
            &b,
            h,
        )?;
        Ok(e1.max(e2))
    })?;

    run("embedding", &mut |rng| {
        let (rows, c, n) = (dims(rng, 2, 6), dims(rng, 1, 4), dims(rng, 1, 6));
        let ids: Vec<usize> = (0..n).map(|_| rng.below(rows as u64) as usize).collect();
        let w = randn(rng, n, c);
        let table = randn(rng, rows, c);
        grad_check(
            &|_: &Tape, v: &Var| v.embedding(&ids)?.weighted_sum(&w),
            &table,
            h,
        )
    })?;

    run("repeat_rows", &mut |rng| {
        let (r, c, times) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let w = randn(rng, r * times, c);
        let theta = randn(rng, r, c);
        grad_check(
            &|_: &Tape, v: &Var| v.repeat_rows(times).weighted_sum(&w),
            &theta,
            h,
        )
    })?;

    run("concat_rows", &mut |rng| {
        let (r1, r2, c) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 4));
        let other = randn(rng, r2, c);
        let w = randn(rng, r1 + r2, c);
        let theta = randn(rng, r1, c);
        grad_check(
            &|tape: &Tape, v: &Var| {
                tape.concat_rows(&[v, &tape.constant(other.clone())])?.weighted_sum(&w)
            },
            &theta,
            h,
        )
    })?;

    run("concat_cols", &mut |rng| {
        let (r, c1, c2) = (dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3));
        let other = randn(rng, r, c2);
        let w = randn(rng, r, c1 + c2);
        let theta = randn(rng, r, c1);
        grad_check(
            &|tape: &Tape, v: &Var| {
                tape.concat_cols(&[&tape.constant(other.clone()), v])?.weighted_sum(&w)
            },
            &theta,
            h,
        )
    })?;

    run("slice_rows", &mut |rng| {
        let (r, c) = (dims(rng, 2, 6), dims(rng, 1, 4));
        let lo = rng.below(r as u64 - 1) as usize;
        let hi = lo + 1 + rng.below((r - lo) as u64) as usize;
        let w = randn(rng, hi - lo, c);
        let theta = randn(rng, r, c);
        grad_check(
            &|_: &Tape, v: &Var| v.slice_rows(lo, hi)?.weighted_sum(&w),
            &theta,
            h,
        )
    })?;

    run("slice_cols", &mut |rng| {
        let (r, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
        let lo = rng.below(c as u64 - 1) as usize;
        let hi = lo + 1 + rng.below((c - lo) as u64) as usize;
        let w = randn(rng, r, hi - lo);
        let theta = randn(rng, r, c);
        grad_check(
            &|_: &Tape, v: &Var| v.slice_cols(lo, hi)?.weighted_sum(&w),
            &theta,
            h,
        )
    })?;

    run("softmax_rows", &mut |rng| {
        let (r, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
        let w = randn(rng, r, c);
        let theta = randn(rng, r, c);
        grad_check(
            &|_: &Tape, v: &Var| Ok(v.softmax_rows().weighted_sum(&w)?),
            &theta,
            h,
        )
    })?;

    run("softmax_ce", &mut |rng| {
        let (r, vocab) = (dims(rng, 1, 4), dims(rng, 2, 8));
        let targets: Vec<usize> = (0..r).map(|_| rng.below(vocab as u64) as usize).collect();
        let theta = randn(rng, r, vocab);
        grad_check(&|_: &Tape, v: &Var| v.softmax_ce(&targets), &theta, h)
    })?;

    run("layer_norm", &mut |rng| {
        // Rows of four or more keep the row variance away from zero,
        // where finite differences degenerate.
        let (r, c) = (dims(rng, 1, 4), dims(rng, 4, 8));
        let x = randn(rng, r, c);
        let gamma = randn(rng, 1, c);
        let beta = randn(rng, 1, c);
        let w = randn(rng, r, c);
        let eps: Real = crate::numerics::LN_EPS;
        let e1 = grad_check(
            &|tape: &Tape, v: &Var| {
                v.layer_norm(&tape.leaf(gamma.clone()), &tape.leaf(beta.clone()), eps)?
                    .weighted_sum(&w)
            },
            &x,
            h,
        )?;
        let e2 = grad_check(
            &|tape: &Tape, v: &Var| {
                tape.leaf(x.clone())
                    .layer_norm(v, &tape.leaf(beta.clone()), eps)?
                    .weighted_sum(&w)
            },
            &gamma,
            h,
        )?;
        let e3 = grad_check(
            &|tape: &Tape, v: &Var| {
                tape.leaf(x.clone())
                    .layer_norm(&tape.leaf(gamma.clone()), v, eps)?
                    .weighted_sum(&w)
            },
            &beta,
            h,
        )?;
        Ok(e1.max(e2).max(e3))
    })?;

    run("gelu", &mut |rng| {
        let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 6));
        let w = randn(rng, r, c);
        let theta = randn(rng, r, c);
        grad_check(&|_: &Tape, v: &Var| v.gelu().weighted_sum(&w), &theta, h)
    })?;

    run("add_patch_bias", &mut |rng| {
        let (r, blocks, block) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let scores = randn(rng, r, blocks * block);
        let bias = randn(rng, blocks, 1);
        let w = randn(rng, r, blocks * block);
        let e1 = grad_check(
            &|tape: &Tape, v: &Var| {
                v.add_patch_bias(&tape.constant(bias.clone()), block)?.weighted_sum(&w)
            },
            &scores,
            h,
        )?;
        let e2 = grad_check(
            &|tape: &Tape, v: &Var| {
                tape.constant(scores.clone())
                    .add_patch_bias(v, block)?
                    .weighted_sum(&w)
            },
            &bias,
            h,
        )?;
        Ok(e1.max(e2))
    })?;

    run("weighted_sum", &mut |rng| {
        let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
        let w = randn(rng, r, c);
        let theta = randn(rng, r, c);
        grad_check(&|_: &Tape, v: &Var| v.weighted_sum(&w), &theta, h)
    })?;

    run("attention", &mut |rng| {
        let (q_len, k_len, dh) = (dims(rng, 1, 4), dims(rng, 2, 6), dims(rng, 2, 8));
        let q = randn(rng, q_len, dh);
        let k = randn(rng, k_len, dh);
        let v = randn(rng, k_len, dh);
        let mut mask = vec![true; q_len * k_len];
        for bit in mask.iter_mut() {
            *bit = rng.below(4) > 0;
        }
        let mask = AttnMask::from_fn(q_len, k_len, |qi, ki| {
            // Keep the first key visible everywhere so no row degenerates.
            ki == 0 || mask[qi * k_len + ki]
        });
        let w = randn(rng, q_len, dh);
        let e1 = grad_check(
            &|tape: &Tape, var: &Var| {
                attention(
                    tape,
                    var,
                    &tape.constant(k.clone()),
                    &tape.constant(v.clone()),
                    &mask,
                )?
                .weighted_sum(&w)
            },
            &q,
            h,
        )?;
        let e2 = grad_check(
            &|tape: &Tape, var: &Var| {
                attention(
                    tape,
                    &tape.constant(q.clone()),
                    var,
                    &tape.constant(v.clone()),
                    &mask,
                )?
                .weighted_sum(&w)
            },
            &k,
            h,
        )?;
        let e3 = grad_check(
            &|tape: &Tape, var: &Var| {
                attention(
                    tape,
                    &tape.constant(q.clone()),
                    &tape.constant(k.clone()),
                    var,
                    &mask,
                )?
                .weighted_sum(&w)
            },
            &v,
            h,
        )?;
        Ok(e1.max(e2).max(e3))
    })?;

    run("attention_post_bias", &mut |rng| {
        let (blocks, block, dh) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 6));
        let k_len = blocks * block;
        let q = randn(rng, block, dh);
        let k = randn(rng, k_len, dh);
        let v = randn(rng, k_len, dh);
        let bias = randn(rng, blocks, 1);
        let mask = AttnMask::full(block, k_len);
        let w = randn(rng, block, dh);
        grad_check(
            &|tape: &Tape, var: &Var| {
                attention_biased(
                    tape,
                    &tape.constant(q.clone()),
                    &tape.constant(k.clone()),
                    &tape.constant(v.clone()),
                    &mask,
                    Some((var, block)),
                )?
                .weighted_sum(&w)
            },
            &bias,
            h,
        )
    })?;

    Ok(out)
}
