//! Shared fixtures for integration tests.
#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tavit_core::tensor::{BatchNormState, NormMode, Tape, Tensor, Var};
use tavit_core::Result;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn randn32(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    randn(rng, shape).cast()
}

/// `sum(w ⊙ y)` with fixed random `w`, which avoids the degenerate zero
/// gradients that a plain sum produces for normalizing ops.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(&mut rng(seed ^ 0x5eed), tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Check = Box<dyn Fn(&mut ChaCha8Rng, usize) -> Result<f64>>;

/// One gradient check per input of every differentiable tensor op, each at
/// three random shapes. Returns `(case name, max relative error)`.
pub fn tensor_gradient_suite() -> Vec<(String, f64)> {
    let mut cases: Vec<(&str, Check)> = Vec::new();

    macro_rules! case {
        ($name:expr, |$r:ident, $s:ident| $body:expr) => {
            cases.push(($name, Box::new(move |$r: &mut ChaCha8Rng, $s: usize| $body)));
        };
    }

    fn fd<F>(x: &Tensor<f64>, f: F) -> Result<f64>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        tavit_core::tensor::finite_diff_check(f, x, FD_STEP)
    }

    fn shape_of(s: usize) -> Vec<usize> {
        [vec![5], vec![3, 4], vec![2, 3, 4]][s].clone()
    }

    for (name, which, kind) in [
        ("add/a", 0, 0),
        ("add/b", 1, 0),
        ("sub/a", 0, 1),
        ("sub/b", 1, 1),
        ("mul/a", 0, 2),
        ("mul/b", 1, 2),
    ] {
        case!(name, |r, s| {
            let shape = shape_of(s);
            let a = randn(r, &shape);
            let b = randn(r, &shape);
            let (x, other) = if which == 0 { (a, b) } else { (b, a) };
            fd(&x, |t, v| {
                let o = t.constant(other.clone());
                let (l, rr) = if which == 0 { (v, o) } else { (o, v) };
                let y = match kind {
                    0 => t.add(l, rr)?,
                    1 => t.sub(l, rr)?,
                    _ => t.mul(l, rr)?,
                };
                weighted_sum(t, y, 1)
            })
        });
    }
    case!("mul/scalar-broadcast", |r, s| {
        let x = randn(r, &[1]);
        let other = randn(r, &shape_of(s));
        fd(&x, |t, v| {
            let o = t.constant(other.clone());
            let y = t.mul(o, v)?;
            weighted_sum(t, y, 2)
        })
    });
    case!("scale", |r, s| {
        let x = randn(r, &shape_of(s));
        fd(&x, |t, v| {
            let y = t.scale(v, -1.7)?;
            weighted_sum(t, y, 3)
        })
    });
    case!("add_suffix/b", |r, s| {
        let shape = shape_of(s);
        let a = randn(r, &[3, shape.iter().product()]);
        let x = randn(r, &[shape.iter().product()]);
        fd(&x, |t, v| {
            let o = t.constant(a.clone());
            let y = t.add_suffix(o, v)?;
            weighted_sum(t, y, 4)
        })
    });
    case!("add_channel_bias/b", |r, s| {
        let c = 2 + s;
        let a = randn(r, &[2, c, 3, 2]);
        let x = randn(r, &[c]);
        fd(&x, |t, v| {
            let o = t.constant(a.clone());
            let y = t.add_channel_bias(o, v)?;
            weighted_sum(t, y, 5)
        })
    });
    for which in 0..2 {
        case!(["matmul/a", "matmul/b"][which], |r, s| {
            let (sa, sb): (Vec<usize>, Vec<usize>) = [
                (vec![3, 4], vec![4, 2]),
                (vec![2, 3, 4], vec![4, 5]),
                (vec![2, 1, 2, 3], vec![3, 3, 2]),
            ][s]
                .clone();
            let a = randn(r, &sa);
            let b = randn(r, &sb);
            let (x, other) = if which == 0 { (a, b) } else { (b, a) };
            fd(&x, |t, v| {
                let o = t.constant(other.clone());
                let y = if which == 0 { t.matmul(v, o)? } else { t.matmul(o, v)? };
                weighted_sum(t, y, 6)
            })
        });
    }
    for which in 0..3 {
        case!(["linear/x", "linear/w", "linear/b"][which], |r, s| {
            let (rows, din, dout) = [(3, 4, 2), (5, 3, 3), (2, 6, 4)][s];
            let xs = [randn(r, &[2, rows, din]), randn(r, &[din, dout]), randn(r, &[dout])];
            let target = xs[which].clone();
            fd(&target, |t, v| {
                let vars: Vec<Var> = (0..3)
                    .map(|i| if i == which { v } else { t.constant(xs[i].clone()) })
                    .collect();
                let y = t.linear(vars[0], vars[1], Some(vars[2]))?;
                weighted_sum(t, y, 7)
            })
        });
    }
    for which in 0..2 {
        case!(["conv2d/x", "conv2d/w"][which], |r, s| {
            let (n, cin, h, cout, k, stride) = [(1, 2, 5, 3, 3, 1), (2, 1, 6, 2, 3, 2), (1, 2, 7, 2, 7, 1)][s];
            let pad = k / 2;
            let xs = [randn(r, &[n, cin, h, h]), randn(r, &[cout, cin, k, k])];
            let target = xs[which].clone();
            fd(&target, |t, v| {
                let o = t.constant(xs[1 - which].clone());
                let (x, w) = if which == 0 { (v, o) } else { (o, v) };
                let y = t.conv2d(x, w, stride, pad)?;
                weighted_sum(t, y, 8)
            })
        });
        case!(["conv_transpose2d/x", "conv_transpose2d/w"][which], |r, s| {
            let (n, cin, h, cout, k) = [(1, 2, 3, 2, 3), (2, 1, 2, 3, 2), (1, 2, 3, 1, 4)][s];
            let xs = [randn(r, &[n, cin, h, h]), randn(r, &[cin, cout, k, k])];
            let target = xs[which].clone();
            fd(&target, |t, v| {
                let o = t.constant(xs[1 - which].clone());
                let (x, w) = if which == 0 { (v, o) } else { (o, v) };
                let y = t.conv_transpose2d(x, w, 2)?;
                weighted_sum(t, y, 9)
            })
        });
    }
    for (mode_name, mode) in [("train", NormMode::Train), ("eval", NormMode::Eval)] {
        for which in 0..3 {
            let name: &'static str =
                Box::leak(format!("batch_norm2d[{mode_name}]/{}", ["x", "gamma", "beta"][which]).into_boxed_str());
            case!(name, |r, s| {
                let (n, c, h) = [(2, 2, 3), (3, 1, 2), (1, 3, 4)][s];
                let xs = [randn(r, &[n, c, h, h]), randn(r, &[c]), randn(r, &[c])];
                let rm: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
                let rv: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..1.5)).collect();
                let target = xs[which].clone();
                fd(&target, |t, v| {
                    let vars: Vec<Var> = (0..3)
                        .map(|i| if i == which { v } else { t.constant(xs[i].clone()) })
                        .collect();
                    let (mut m, mut va) = (rm.clone(), rv.clone());
                    let st = BatchNormState {
                        running_mean: &mut m,
                        running_var: &mut va,
                        momentum: 0.1,
                        eps: 1e-5,
                    };
                    let y = t.batch_norm2d(vars[0], vars[1], vars[2], st, mode)?;
                    weighted_sum(t, y, 10)
                })
            });
        }
    }
    for sqrt in [false, true] {
        for which in 0..3 {
            let name: &'static str = Box::leak(
                format!(
                    "layer_norm[{}]/{}",
                    if sqrt { "sqrt" } else { "var" },
                    ["x", "gamma", "beta"][which]
                )
                .into_boxed_str(),
            );
            case!(name, |r, s| {
                let (rows, d) = [(3, 4), (2, 6), (5, 3)][s];
                let xs = [randn(r, &[rows, d]), randn(r, &[d]), randn(r, &[d])];
                let target = xs[which].clone();
                fd(&target, |t, v| {
                    let vars: Vec<Var> = (0..3)
                        .map(|i| if i == which { v } else { t.constant(xs[i].clone()) })
                        .collect();
                    let y = t.layer_norm(vars[0], Some(vars[1]), Some(vars[2]), 1e-5, sqrt)?;
                    weighted_sum(t, y, 11)
                })
            });
        }
    }
    case!("relu", |r, s| {
        let x = randn(r, &shape_of(s));
        fd(&x, |t, v| {
            let y = t.relu(v)?;
            weighted_sum(t, y, 12)
        })
    });
    case!("tanh", |r, s| {
        let x = randn(r, &shape_of(s));
        fd(&x, |t, v| {
            let y = t.tanh(v)?;
            weighted_sum(t, y, 13)
        })
    });
    case!("gelu", |r, s| {
        let x = randn(r, &shape_of(s));
        fd(&x, |t, v| {
            let y = t.activation(v, tavit_core::tensor::Activation::Gelu)?;
            weighted_sum(t, y, 14)
        })
    });
    case!("softmax", |r, s| {
        let x = randn(r, &shape_of(s));
        fd(&x, |t, v| {
            let y = t.softmax(v)?;
            weighted_sum(t, y, 15)
        })
    });
    case!("sum", |r, s| {
        let x = randn(r, &shape_of(s));
        fd(&x, |t, v| t.sum(v))
    });
    case!("mean", |r, s| {
        let x = randn(r, &shape_of(s));
        fd(&x, |t, v| t.mean(v))
    });
    case!("l1_loss/pred", |r, s| {
        let x = randn(r, &shape_of(s));
        let target = randn(r, &shape_of(s));
        fd(&x, |t, v| {
            let tg = t.constant(target.clone());
            t.l1_loss(v, tg)
        })
    });
    case!("reshape", |r, s| {
        let x = randn(r, &[2, 6]);
        let to = [vec![12], vec![3, 4], vec![2, 2, 3]][s].clone();
        fd(&x, |t, v| {
            let y = t.reshape(v, &to)?;
            weighted_sum(t, y, 16)
        })
    });
    case!("transpose_last2", |r, s| {
        let x = randn(r, &[vec![2, 3], vec![4, 2], vec![2, 3, 4]][s]);
        fd(&x, |t, v| {
            let y = t.transpose_last2(v)?;
            weighted_sum(t, y, 17)
        })
    });
    case!("split_merge_heads", |r, s| {
        let (b, tk, heads, dh) = [(1, 3, 2, 2), (2, 2, 3, 1), (2, 4, 1, 3)][s];
        let x = randn(r, &[b, tk, heads * dh]);
        fd(&x, |t, v| {
            let h = t.split_heads(v, heads)?;
            let w = weighted_sum(t, h, 18)?;
            let m = t.merge_heads(h)?;
            let m2 = t.scale(m, 0.5)?;
            let w2 = weighted_sum(t, m2, 19)?;
            t.add(w, w2)
        })
    });
    case!("patchify_unpatchify", |r, s| {
        let (n, c, h, w, p) = [(1, 2, 4, 4, 2), (2, 1, 3, 6, 3), (1, 3, 2, 2, 1)][s];
        let x = randn(r, &[n, c, h, w]);
        fd(&x, |t, v| {
            let tok = t.patchify(v, p)?;
            let a = weighted_sum(t, tok, 20)?;
            let img = t.unpatchify(tok, p, c, h, w)?;
            let img2 = t.mul(img, img)?;
            let b = weighted_sum(t, img2, 21)?;
            t.add(a, b)
        })
    });
    case!("slice_last", |r, s| {
        let x = randn(r, &[3, 6]);
        let (start, len) = [(0, 2), (2, 3), (5, 1)][s];
        fd(&x, |t, v| {
            let y = t.slice_last(v, start, len)?;
            weighted_sum(t, y, 22)
        })
    });
    for tiled in [false, true] {
        for which in 0..3 {
            let name: &'static str = Box::leak(
                format!(
                    "attention_{}/{}",
                    if tiled { "tiled" } else { "naive" },
                    ["q", "k", "v"][which]
                )
                .into_boxed_str(),
            );
            case!(name, |r, s| {
                let (b, h, tk, dh, tile) = [(1, 1, 5, 3, 2), (2, 2, 4, 2, 3), (1, 2, 7, 4, 4)][s];
                let xs = [
                    randn(r, &[b, h, tk, dh]),
                    randn(r, &[b, h, tk, dh]),
                    randn(r, &[b, h, tk, dh]),
                ];
                let target = xs[which].clone();
                fd(&target, |t, v| {
                    let vars: Vec<Var> = (0..3)
                        .map(|i| if i == which { v } else { t.constant(xs[i].clone()) })
                        .collect();
                    let y = if tiled {
                        t.attention_tiled(vars[0], vars[1], vars[2], tile)?
                    } else {
                        t.attention_naive(vars[0], vars[1], vars[2])?
                    };
                    weighted_sum(t, y, 23)
                })
            });
        }
    }

    let mut out = Vec::new();
    for (i, (name, check)) in cases.iter().enumerate() {
        for s in 0..3 {
            let mut r = rng(1000 + 10 * i as u64 + s as u64);
            let err = check(&mut r, s).unwrap_or_else(|e| panic!("{name} shape {s}: {e}"));
            out.push((format!("{name}#{s}"), err));
        }
    }
    out
}
