//! Analytic gradients vs central finite differences, per layer kind.
//!
//! The finite differences are taken on straightforward f64 reference
//! implementations written here (direct convolution loops, explicit pooling
//! windows), not on the engine itself, so a shared bug cannot cancel out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};

const H: f64 = 1e-3;

/// Worst relative error of one layer kind over `cases` random draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Max relative error between `analytic[i]` and the central difference of
/// `loss` over `inputs[i]`, for every input index listed in `check`.
fn fd_max_error(inputs: &[Vec<f64>], analytic: &[Vec<f32>], check: &[usize], loss: &dyn Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for &i in check {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i][j];
            probe[i][j] = x0 + H;
            let lp = loss(&probe);
            probe[i][j] = x0 - H;
            let lm = loss(&probe);
            probe[i][j] = x0;
            let numeric = (lp - lm) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i][j] as f64, numeric));
        }
    }
    worst
}

// ---- f64 reference forwards ------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn conv_ref(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], b: &[f64], o: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * o * h * w];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = y as isize + ki as isize - p;
                                let ix = xx as isize + kj as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((oc * c + ic) * k + ki) * k + kj]
                                    * x[((s * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((s * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn pool_ref(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

/// Smallest gap between the winner and runner-up of any pooling window.
fn pool_margin(x: &[f32], planes: usize, h: usize, w: usize) -> f32 {
    let mut margin = f32::INFINITY;
    for p in 0..planes {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let mut v = [
                    x[(p * h + 2 * y) * w + 2 * xx],
                    x[(p * h + 2 * y) * w + 2 * xx + 1],
                    x[(p * h + 2 * y + 1) * w + 2 * xx],
                    x[(p * h + 2 * y + 1) * w + 2 * xx + 1],
                ];
                v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                margin = margin.min(v[0] - v[1]);
            }
        }
    }
    margin
}

fn dense_ref(x: &[f64], n: usize, din: usize, wt: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for s in 0..n {
        for j in 0..dout {
            out[s * dout + j] = b[j] + (0..din).map(|i| wt[j * din + i] * x[s * din + i]).sum::<f64>();
        }
    }
    out
}

fn logistic64(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reduces `out` to a scalar with constant random weights so every output
/// element contributes a distinct amount.
fn project(g: &mut Graph, out: Var, r: &[f32]) -> Var {
    let rows = g.weighted_row_sum(out, r.to_vec()).unwrap();
    g.sum(rows)
}

fn grads_of(g: &Graph, vars: &[Var]) -> Vec<Vec<f32>> {
    vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect()
}

pub fn check_conv2d(cases: usize, seed: u64) -> LayerCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let wt = rand_vec(&mut rng, o * c * k * k, -1.0, 1.0);
        let b = rand_vec(&mut rng, o, -1.0, 1.0);
        let r = rand_vec(&mut rng, n * o * h * w, -1.0, 1.0);

        let mut g = Graph::new();
        let xv = g.variable(vec![n, c, h, w], x.clone()).unwrap();
        let wv = g.variable(vec![o, c, k, k], wt.clone()).unwrap();
        let bv = g.variable(vec![o], b.clone()).unwrap();
        let y = g.conv2d(xv, wv, bv).unwrap();
        debug_assert_eq!(g.shape(y), &[n, o, h, w], "same padding keeps spatial dims");
        let l = project(&mut g, y, &r);
        g.backward(l).unwrap();
        let analytic = grads_of(&g, &[xv, wv, bv]);

        let r64 = to64(&r);
        let loss = |p: &[Vec<f64>]| dot(&conv_ref(&p[0], n, c, h, w, &p[1], &p[2], o, k), &r64);
        let e = fd_max_error(&[to64(&x), to64(&wt), to64(&b)], &analytic, &[0, 1, 2], &loss);
        worst = worst.max(e);
    }
    LayerCheck {
        layer: "conv2d",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_maxpool2d(cases: usize, seed: u64) -> LayerCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        if pool_margin(&x, n * c, h, w) < 4.0 * H as f32 {
            continue;
        }
        done += 1;
        let r = rand_vec(&mut rng, n * c * (h / 2) * (w / 2), -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.variable(vec![n, c, h, w], x.clone()).unwrap();
        let y = g.maxpool2d(xv).unwrap();
        let l = project(&mut g, y, &r);
        g.backward(l).unwrap();
        let r64 = to64(&r);
        let loss = |p: &[Vec<f64>]| dot(&pool_ref(&p[0], n * c, h, w), &r64);
        worst = worst.max(fd_max_error(&[to64(&x)], &grads_of(&g, &[xv]), &[0], &loss));
    }
    LayerCheck {
        layer: "maxpool2d",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_upsample2d(cases: usize, seed: u64) -> LayerCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (planes, h, w) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
        let x = rand_vec(&mut rng, planes * h * w, -1.0, 1.0);
        let r = rand_vec(&mut rng, planes * 4 * h * w, -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.variable(vec![1, planes, h, w], x.clone()).unwrap();
        let y = g.upsample2d(xv).unwrap();
        let l = project(&mut g, y, &r);
        g.backward(l).unwrap();
        let r64 = to64(&r);
        let loss = |p: &[Vec<f64>]| {
            let mut out = Vec::new();
            for pl in 0..planes {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out.push(p[0][(pl * h + y / 2) * w + x / 2]);
                    }
                }
            }
            dot(&out, &r64)
        };
        worst = worst.max(fd_max_error(&[to64(&x)], &grads_of(&g, &[xv]), &[0], &loss));
    }
    LayerCheck {
        layer: "upsample2d",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_dense(cases: usize, seed: u64) -> LayerCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, c, h, w) = (
            rng.gen_range(1..4),
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let din = c * h * w;
        let dout = rng.gen_range(1..6);
        let x = rand_vec(&mut rng, n * din, -1.0, 1.0);
        let wt = rand_vec(&mut rng, dout * din, -1.0, 1.0);
        let b = rand_vec(&mut rng, dout, -1.0, 1.0);
        let r = rand_vec(&mut rng, n * dout, -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.variable(vec![n, c, h, w], x.clone()).unwrap();
        let flat = g.flatten(xv).unwrap();
        debug_assert_eq!(g.shape(flat), &[n, din]);
        let wv = g.variable(vec![dout, din], wt.clone()).unwrap();
        let bv = g.variable(vec![dout], b.clone()).unwrap();
        let y = g.dense(flat, wv, bv).unwrap();
        let l = project(&mut g, y, &r);
        g.backward(l).unwrap();
        let r64 = to64(&r);
        let loss = |p: &[Vec<f64>]| dot(&dense_ref(&p[0], n, din, &p[1], &p[2], dout), &r64);
        let e = fd_max_error(
            &[to64(&x), to64(&wt), to64(&b)],
            &grads_of(&g, &[xv, wv, bv]),
            &[0, 1, 2],
            &loss,
        );
        worst = worst.max(e);
    }
    LayerCheck {
        layer: "dense+flatten",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_activations(cases: usize, seed: u64) -> [LayerCheck; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_relu = 0.0f64;
    let mut worst_logistic = 0.0f64;
    for _ in 0..cases {
        let len = rng.gen_range(1..40);
        // keep relu inputs away from the kink
        let x: Vec<f32> = (0..len)
            .map(|_| {
                let v: f32 = rng.gen_range(0.01..3.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let r = rand_vec(&mut rng, len, -1.0, 1.0);
        let r64 = to64(&r);

        let mut g = Graph::new();
        let xv = g.variable(vec![1, len], x.clone()).unwrap();
        let y = g.relu(xv);
        let l = project(&mut g, y, &r);
        g.backward(l).unwrap();
        let loss = |p: &[Vec<f64>]| dot(&p[0].iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), &r64);
        worst_relu = worst_relu.max(fd_max_error(&[to64(&x)], &grads_of(&g, &[xv]), &[0], &loss));

        let mut g = Graph::new();
        let xv = g.variable(vec![1, len], x.clone()).unwrap();
        let y = g.logistic(xv);
        let l = project(&mut g, y, &r);
        g.backward(l).unwrap();
        let loss = |p: &[Vec<f64>]| dot(&p[0].iter().map(|&v| logistic64(v)).collect::<Vec<_>>(), &r64);
        worst_logistic = worst_logistic.max(fd_max_error(&[to64(&x)], &grads_of(&g, &[xv]), &[0], &loss));
    }
    [
        LayerCheck {
            layer: "relu",
            cases,
            max_rel_err: worst_relu,
        },
        LayerCheck {
            layer: "logistic",
            cases,
            max_rel_err: worst_logistic,
        },
    ]
}

pub fn check_elementwise(cases: usize, seed: u64) -> LayerCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, c, h, w) = (
            rng.gen_range(1..3),
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let len = n * c * h * w;
        let a = rand_vec(&mut rng, len, 0.5, 2.0);
        let b = rand_vec(&mut rng, len, -1.0, 1.0);
        let k = rand_vec(&mut rng, len, -1.0, 1.0);
        let s = rand_vec(&mut rng, n, 0.5, 2.0);
        let r = rand_vec(&mut rng, n * (2 * c + 1) * h * w, -1.0, 1.0);

        // concat[ ln(a)·b + k·(1/a), broadcast(s) , 3a+1 ] then mean + weighted sums
        let mut g = Graph::new();
        let av = g.variable(vec![n, c, h, w], a.clone()).unwrap();
        let bv = g.variable(vec![n, c, h, w], b.clone()).unwrap();
        let sv = g.variable(vec![n, 1], s.clone()).unwrap();
        let la = g.ln(av);
        let p1 = g.mul(la, bv).unwrap();
        let ra = g.recip(av);
        let p2 = g.mul_const(ra, k.clone()).unwrap();
        let e1 = g.add(p1, p2).unwrap();
        let bs = g.broadcast_spatial(sv, h, w).unwrap();
        let a3 = g.scale(av, 3.0);
        let a3 = g.add_scalar(a3, 1.0);
        let a3 = g.reshape(a3, vec![n, c, h, w]).unwrap();
        let cat = g.concat_channels(&[e1, bs, a3]).unwrap();
        let rows = g.weighted_row_sum(cat, r.clone()).unwrap();
        let m = g.mean(rows);
        g.backward(m).unwrap();

        let r64 = to64(&r);
        let k64 = to64(&k);
        let loss = |p: &[Vec<f64>]| {
            let (a, b, s) = (&p[0], &p[1], &p[2]);
            let per = c * h * w;
            let mut total = 0.0;
            for smp in 0..n {
                let mut cat = Vec::new();
                for i in 0..per {
                    let j = smp * per + i;
                    cat.push(a[j].ln() * b[j] + k64[j] / a[j]);
                }
                cat.extend(std::iter::repeat_n(s[smp], h * w));
                for i in 0..per {
                    cat.push(3.0 * a[smp * per + i] + 1.0);
                }
                let rr = &r64[smp * (2 * c + 1) * h * w..(smp + 1) * (2 * c + 1) * h * w];
                total += dot(&cat, rr);
            }
            total / n as f64
        };
        let e = fd_max_error(
            &[to64(&a), to64(&b), to64(&s)],
            &grads_of(&g, &[av, bv, sv]),
            &[0, 1, 2],
            &loss,
        );
        worst = worst.max(e);
    }
    LayerCheck {
        layer: "elementwise+reductions",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_losses(cases: usize, seed: u64) -> LayerCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, k) = (rng.gen_range(1..5), rng.gen_range(1..4));
        let p = rand_vec(&mut rng, n * k, 0.05, 0.95);
        let t: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let q: Vec<f32> = rand_vec(&mut rng, n, 0.0, 1.0);
        let col = rng.gen_range(0..k);

        let mut g = Graph::new();
        let pv = g.variable(vec![n, k], p.clone()).unwrap();
        let sel = g.select_column(pv, col).unwrap();
        let b = g.bce(sel, t.clone()).unwrap();
        let se = g
            .squared_error(pv, {
                let mut full = Vec::new();
                for &qq in &q {
                    full.extend(std::iter::repeat_n(qq, k));
                }
                full
            })
            .unwrap();
        let both = g.add(b, se).unwrap();
        g.backward(both).unwrap();

        let (t64, q64) = (to64(&t), to64(&q));
        let loss = |pp: &[Vec<f64>]| {
            let p = &pp[0];
            let bce: f64 = (0..n)
                .map(|s| {
                    let v = p[s * k + col];
                    -(t64[s] * v.ln() + (1.0 - t64[s]) * (1.0 - v).ln())
                })
                .sum::<f64>()
                / n as f64;
            let se: f64 = (0..n * k).map(|i| (p[i] - q64[i / k]).powi(2)).sum::<f64>() / (n * k) as f64;
            bce + se
        };
        worst = worst.max(fd_max_error(&[to64(&p)], &grads_of(&g, &[pv]), &[0], &loss));
    }
    LayerCheck {
        layer: "bce+squared_error",
        cases,
        max_rel_err: worst,
    }
}

pub fn check_network(cases: usize, seed: u64) -> LayerCheck {
    // conv(1→3, 3×3) → relu → maxpool → flatten → dense(→2) → logistic → bce
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c1, dout) = (6, 6, 3, 2);
    let din = c1 * (h / 2) * (w / 2);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let x = rand_vec(&mut rng, h * w, -1.0, 1.0);
        let w1 = rand_vec(&mut rng, c1 * 9, -0.6, 0.6);
        let b1 = rand_vec(&mut rng, c1, -0.2, 0.2);
        let w2 = rand_vec(&mut rng, dout * din, -0.5, 0.5);
        let b2 = rand_vec(&mut rng, dout, -0.2, 0.2);
        let t = vec![1.0f32, 0.0];

        // reject draws where a finite-difference probe could cross a relu or pooling kink
        let z = conv_ref(&to64(&x), 1, 1, h, w, &to64(&w1), &to64(&b1), c1, 3);
        let a: Vec<f32> = z.iter().map(|&v| v.max(0.0) as f32).collect();
        if z.iter().any(|v| v.abs() < 0.01) || pool_margin(&a, c1, h, w) < 0.01 {
            continue;
        }
        done += 1;

        let mut g = Graph::new();
        let xv = g.variable(vec![1, 1, h, w], x.clone()).unwrap();
        let w1v = g.variable(vec![c1, 1, 3, 3], w1.clone()).unwrap();
        let b1v = g.variable(vec![c1], b1.clone()).unwrap();
        let w2v = g.variable(vec![dout, din], w2.clone()).unwrap();
        let b2v = g.variable(vec![dout], b2.clone()).unwrap();
        let y = g.conv2d(xv, w1v, b1v).unwrap();
        let y = g.relu(y);
        let y = g.maxpool2d(y).unwrap();
        let y = g.flatten(y).unwrap();
        let y = g.dense(y, w2v, b2v).unwrap();
        let y = g.logistic(y);
        let l = g.bce(y, t.clone()).unwrap();
        g.backward(l).unwrap();

        let t64 = to64(&t);
        let loss = |p: &[Vec<f64>]| {
            let z = conv_ref(&p[0], 1, 1, h, w, &p[1], &p[2], c1, 3);
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let pooled = pool_ref(&a, c1, h, w);
            let o = dense_ref(&pooled, 1, din, &p[3], &p[4], dout);
            o.iter()
                .zip(&t64)
                .map(|(&v, &tt)| {
                    let q = logistic64(v);
                    -(tt * q.ln() + (1.0 - tt) * (1.0 - q).ln())
                })
                .sum::<f64>()
                / dout as f64
        };
        let e = fd_max_error(
            &[to64(&x), to64(&w1), to64(&b1), to64(&w2), to64(&b2)],
            &grads_of(&g, &[xv, w1v, b1v, w2v, b2v]),
            &[0, 1, 2, 3, 4],
            &loss,
        );
        worst = worst.max(e);
    }
    LayerCheck {
        layer: "conv-pool-dense network",
        cases,
        max_rel_err: worst,
    }
}

/// Every check with `cases` draws each, seeded from `seed`.
pub fn check_all(cases: usize, seed: u64) -> Vec<LayerCheck> {
    let mut out = vec![
        check_conv2d(cases, seed),
        check_maxpool2d(cases, seed + 1),
        check_upsample2d(cases, seed + 2),
        check_dense(cases, seed + 3),
    ];
    out.extend(check_activations(cases, seed + 4));
    out.push(check_elementwise(cases, seed + 5));
    out.push(check_losses(cases, seed + 6));
    out.push(check_network(cases, seed + 7));
    out
}
