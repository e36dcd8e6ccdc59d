//! Brute-force oracle equivalence.
//!
//! Each oracle is a straight-line re-implementation from the defining
//! equations (nested loops, no im2col/gemm, no shared code with the library
//! kernels). Integer counts must match bitwise; real-valued results must
//! agree within 1e-12 relative error in double precision.

use fdnet::convlstm::{convlstm_step, ConvLstmParams, ConvLstmSpec, ConvLstmState};
use fdnet::loss::WeightScheme;
use fdnet::metrics::{balanced_errors, confusion, skill_scores};
use fdnet::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 120;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

// --- corr ------------------------------------------------------------------

fn corr_oracle(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    d: usize,
    s: usize,
) -> Vec<f64> {
    let [n, c, h, w] = a.shape()[..] else { panic!("rank 4") };
    let r = (d / s) as isize;
    let side = (2 * r + 1) as usize;
    let mut out = vec![0.0; n * side * side * h * w];
    let at = |t: &Tensor<f64>, ni: usize, ci: usize, y: isize, x: isize| -> f64 {
        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
            0.0
        } else {
            t.data()[((ni * c + ci) * h + y as usize) * w + x as usize]
        }
    };
    for ni in 0..n {
        for ky in -r..=r {
            for kx in -r..=r {
                let k_idx = ((ky + r) as usize) * side + (kx + r) as usize;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        // Out-of-bounds displaced points contribute zero.
                        let mut acc = 0.0;
                        let yy = y + ky * s as isize;
                        let xx = x + kx * s as isize;
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            for ci in 0..c {
                                acc += at(a, ni, ci, y, x) * at(b, ni, ci, yy, xx);
                            }
                        }
                        out[((ni * side * side + k_idx) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn corr_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2001);
    for i in 0..INSTANCES {
        let c = rng.gen_range(1..=4);
        let h = rng.gen_range(2..=8);
        let w = rng.gen_range(2..=8);
        let d = rng.gen_range(0..=2usize);
        let s = rng.gen_range(1..=2usize);
        let a = rand_tensor(&mut rng, &[1, c, h, w], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[1, c, h, w], -2.0, 2.0);
        let g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let cv = fdnet::flowdef::corr(&g, av, bv, d, s, false).unwrap();
        let got = g.value(cv);
        let want = corr_oracle(&a, &b, d, s);
        assert_eq!(got.numel(), want.len(), "instance {i}");
        for (x, y) in got.data().iter().zip(&want) {
            assert!(close(*x, *y), "instance {i}: {x} vs {y}");
        }
    }
}

// --- warp ------------------------------------------------------------------

/// Direct evaluation of the bilinear gather:
/// `out[c,i,j] = sum_m sum_n src[c,m,n] * max(0,1-|i+v-m|) * max(0,1-|j+u-n|)`.
fn warp_oracle(src: &Tensor<f64>, u: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = src.shape()[..] else { panic!("rank 4") };
    let mut out = vec![0.0; src.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let vv = v.data()[(ni * h + i) * w + j];
                    let uu = u.data()[(ni * h + i) * w + j];
                    let mut acc = 0.0;
                    for m in 0..h {
                        let wy = (1.0 - (i as f64 + vv - m as f64).abs()).max(0.0);
                        if wy == 0.0 {
                            continue;
                        }
                        for nn in 0..w {
                            let wx = (1.0 - (j as f64 + uu - nn as f64).abs()).max(0.0);
                            if wx > 0.0 {
                                acc += src.data()[((ni * c + ci) * h + m) * w + nn] * wy * wx;
                            }
                        }
                    }
                    out[((ni * c + ci) * h + i) * w + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn warp_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    for i in 0..INSTANCES {
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(2..=6);
        let w = rng.gen_range(2..=6);
        let src = rand_tensor(&mut rng, &[1, c, h, w], -2.0, 2.0);
        let u = rand_tensor(&mut rng, &[1, 1, h, w], -3.0, 3.0);
        let v = rand_tensor(&mut rng, &[1, 1, h, w], -3.0, 3.0);
        let g = Graph::new();
        let sv = g.constant(src.clone());
        let flow = fdnet::flowdef::FlowField {
            u: g.constant(u.clone()),
            v: g.constant(v.clone()),
        };
        let warped = fdnet::flowdef::warp(&g, sv, flow).unwrap();
        let got = g.value(warped);
        let want = warp_oracle(&src, &u, &v);
        for (x, y) in got.data().iter().zip(&want) {
            assert!(close(*x, *y), "instance {i}: {x} vs {y}");
        }
    }
}

#[test]
fn warp_integer_flow_equals_index_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(2003);
    for _ in 0..INSTANCES {
        let h = rng.gen_range(2..=6);
        let w = rng.gen_range(2..=6);
        let src = rand_tensor(&mut rng, &[1, 1, h, w], 0.0, 1.0);
        let du = rng.gen_range(-2i64..=2) as f64;
        let dv = rng.gen_range(-2i64..=2) as f64;
        let g = Graph::new();
        let sv = g.constant(src.clone());
        let flow = fdnet::flowdef::FlowField {
            u: g.constant(Tensor::full(&[1, 1, h, w], du)),
            v: g.constant(Tensor::full(&[1, 1, h, w], dv)),
        };
        let got = g.value(fdnet::flowdef::warp(&g, sv, flow).unwrap());
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let (si, sj) = (i + dv as i64, j + du as i64);
                let want = if si >= 0 && si < h as i64 && sj >= 0 && sj < w as i64 {
                    src.data()[(si * w as i64 + sj) as usize]
                } else {
                    0.0
                };
                assert_eq!(got.data()[(i * w as i64 + j) as usize], want);
            }
        }
    }
}

// --- convlstm ----------------------------------------------------------------

/// Straight-line evaluation of the six gate equations with naive convolution
/// loops (spatial-preserving padding, odd kernel).
struct LstmOracle<'a> {
    p: &'a ConvLstmParams<f64>,
    n: usize,
    cin: usize,
    hidden: usize,
    h: usize,
    w: usize,
}

impl LstmOracle<'_> {
    fn conv(&self, x: &[f64], cin: usize, kernel: &Tensor<f64>) -> Vec<f64> {
        let k = self.p.spec.kernel;
        let d = self.p.spec.dilation;
        let pad = (d * (k - 1) / 2) as isize;
        let (h, w) = (self.h, self.w);
        let mut out = vec![0.0; self.n * self.hidden * h * w];
        for ni in 0..self.n {
            for co in 0..self.hidden {
                for y in 0..h as isize {
                    for x_pos in 0..w as isize {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let iy = y + ky * d as isize - pad;
                                    let ix = x_pos + kx * d as isize - pad;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let xv = x[((ni * cin + ci) * h + iy as usize) * w
                                            + ix as usize];
                                        let wv = kernel.data()[((co * cin + ci) * k
                                            + ky as usize)
                                            * k
                                            + kx as usize];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((ni * self.hidden + co) * h + y as usize) * w + x_pos as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn step(&self, x: &Tensor<f64>, state: &ConvLstmState<f64>) -> (Vec<f64>, Vec<f64>) {
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let plane = self.h * self.w;
        let per = self.hidden * plane;
        let peep = |wt: &Option<Tensor<f64>>, c: &[f64], ni: usize, i: usize| match wt {
            Some(t) => t.data()[i] * c[ni * per + i],
            None => 0.0,
        };
        let gate = |xk: &Tensor<f64>, hk: &Tensor<f64>, b: &Tensor<f64>| {
            let xc = self.conv(x.data(), self.cin, xk);
            let hc = self.conv(state.h.data(), self.hidden, hk);
            (xc, hc, b.clone())
        };

        let (g_x, g_h, g_b) = gate(&self.p.w_xg, &self.p.w_hg, &self.p.b_g);
        let (i_x, i_h, i_b) = gate(&self.p.w_xi, &self.p.w_hi, &self.p.b_i);
        let (f_x, f_h, f_b) = gate(&self.p.w_xf, &self.p.w_hf, &self.p.b_f);
        let (o_x, o_h, o_b) = gate(&self.p.w_xo, &self.p.w_ho, &self.p.b_o);

        let mut c_new = vec![0.0; self.n * per];
        let mut h_new = vec![0.0; self.n * per];
        for ni in 0..self.n {
            for idx in 0..per {
                let ch = idx / plane;
                let flat = ni * per + idx;
                let g_t = (g_x[flat] + g_h[flat] + g_b.data()[ch]).tanh();
                let i_t = sigmoid(
                    i_x[flat] + i_h[flat] + peep(&self.p.w_ci, state.c.data(), ni, idx) + i_b.data()[ch],
                );
                let f_t = sigmoid(
                    f_x[flat] + f_h[flat] + peep(&self.p.w_cf, state.c.data(), ni, idx) + f_b.data()[ch],
                );
                let c_t = f_t * state.c.data()[flat] + i_t * g_t;
                let o_t = sigmoid(
                    o_x[flat] + o_h[flat] + {
                        match &self.p.w_co {
                            Some(t) => t.data()[idx] * c_t,
                            None => 0.0,
                        }
                    } + o_b.data()[ch],
                );
                c_new[flat] = c_t;
                h_new[flat] = o_t * c_t.tanh();
            }
        }
        (h_new, c_new)
    }
}

#[test]
fn convlstm_step_matches_six_equation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2004);
    for i in 0..INSTANCES {
        let cin = rng.gen_range(1..=3);
        let hidden = rng.gen_range(1..=3);
        let h = rng.gen_range(2..=5);
        let w = rng.gen_range(2..=5);
        let peepholes = rng.gen_bool(0.5);
        let dilation = rng.gen_range(1..=2);
        let spec = ConvLstmSpec::new(cin, hidden, h, w)
            .with_dilation(dilation)
            .with_peepholes(peepholes);
        let mut params = {
            let mut seed_rng = fdnet::init::seeded_rng(5000 + i as u64);
            ConvLstmParams::<f64>::init(spec, &mut seed_rng)
        };
        // Random biases and peepholes too (init leaves them zero).
        for b in [&mut params.b_g, &mut params.b_i, &mut params.b_f, &mut params.b_o] {
            *b = rand_tensor(&mut rng, &[hidden], -1.0, 1.0);
        }
        for p in [&mut params.w_ci, &mut params.w_cf, &mut params.w_co] {
            if let Some(t) = p {
                *t = rand_tensor(&mut rng, &[hidden, h, w], -0.5, 0.5);
            }
        }
        let x = rand_tensor(&mut rng, &[1, cin, h, w], -1.0, 1.0);
        let state = ConvLstmState {
            h: rand_tensor(&mut rng, &[1, hidden, h, w], -1.0, 1.0),
            c: rand_tensor(&mut rng, &[1, hidden, h, w], -1.0, 1.0),
        };
        let next = convlstm_step(&params, &x, &state).unwrap();
        let oracle = LstmOracle {
            p: &params,
            n: 1,
            cin,
            hidden,
            h,
            w,
        };
        let (want_h, want_c) = oracle.step(&x, &state);
        for (a, b) in next.h.data().iter().zip(&want_h) {
            assert!(close(*a, *b), "instance {i} hidden: {a} vs {b}");
        }
        for (a, b) in next.c.data().iter().zip(&want_c) {
            assert!(close(*a, *b), "instance {i} cell: {a} vs {b}");
        }
    }
}

// --- skill scores and balanced errors -----------------------------------------

#[test]
fn skill_scores_match_pixel_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2005);
    for i in 0..INSTANCES {
        let pred = rand_tensor(&mut rng, &[8, 8], 0.0, 1.0);
        let target = rand_tensor(&mut rng, &[8, 8], 0.0, 1.0);
        let tau = rng.gen_range(0.1..0.9);
        let counts = confusion(&pred, &target, tau).unwrap();
        // Independent enumeration.
        let (mut tp, mut fp, mut tn, mut fneg) = (0u64, 0u64, 0u64, 0u64);
        for p in 0..64 {
            let pe = pred.data()[p] >= tau;
            let te = target.data()[p] >= tau;
            match (pe, te) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        assert_eq!(
            (counts.true_pos, counts.false_pos, counts.true_neg, counts.false_neg),
            (tp, fp, tn, fneg),
            "instance {i}"
        );
        let (csi, hss) = skill_scores(&counts);
        let csi_want = if tp + fneg + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fneg + fp) as f64
        };
        let hss_den = ((tp + fneg) * (fneg + tn) + (tp + fp) * (fp + tn)) as f64;
        let hss_want = if hss_den == 0.0 {
            0.0
        } else {
            (tp as f64 * tn as f64 - fneg as f64 * fp as f64) / hss_den
        };
        assert!(close(csi, csi_want), "instance {i} csi");
        assert!(close(hss, hss_want), "instance {i} hss");
    }
}

#[test]
fn balanced_errors_match_pixel_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2006);
    let scheme = WeightScheme::normalized_default();
    for i in 0..INSTANCES {
        let frames = rng.gen_range(1..=4);
        let pred = rand_tensor(&mut rng, &[frames, 8, 8], 0.0, 1.0);
        let target = rand_tensor(&mut rng, &[frames, 8, 8], 0.0, 1.0);
        let (bmse, bmae) = balanced_errors(&pred, &target, &scheme).unwrap();
        let mut se = 0.0;
        let mut ae = 0.0;
        for p in 0..pred.numel() {
            let t = target.data()[p];
            let w = scheme.pixel_weight(t);
            let d = t - pred.data()[p];
            se += w * d * d;
            ae += w * d.abs();
        }
        assert!(close(bmse, se / frames as f64), "instance {i} bmse");
        assert!(close(bmae, ae / frames as f64), "instance {i} bmae");
    }
}
