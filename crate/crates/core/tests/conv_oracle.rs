use atnf_core::rng::RngKey;
use atnf_core::tape::Padding;
use atnf_core::{Tape, Tensor};
use rand::Rng;

/// Direct seven-loop convolution over an NHWC input and HWIO kernel.
fn conv_loops(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, same: bool) -> (Vec<usize>, Vec<f64>) {
    let [n, h, wd, cin] = x.shape()[..] else { panic!() };
    let [kh, kw, _, cout] = w.shape()[..] else { panic!() };
    let (oh, ow, pt, pl) = if same {
        let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
    };
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0f64; n * oh * ow * cout];
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co] as f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = xd[((bi * h + iy as usize) * wd + ix as usize) * cin + ci] as f64;
                                acc += xv * wdat[((ky * kw + kx) * cin + ci) * cout + co] as f64;
                            }
                        }
                    }
                    out[((bi * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    (vec![n, oh, ow, cout], out)
}

#[test]
fn conv_matches_loop_reference() {
    let mut rng = RngKey::new(21).rng();
    for case in 0..60u64 {
        let n = rng.random_range(1..3);
        let h = rng.random_range(3..12);
        let wd = rng.random_range(3..12);
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..6);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..4);
        let same = case % 2 == 0;
        if !same && (k > h || k > wd) {
            continue;
        }
        let mut u = |s: &[usize]| Tensor::from_fn(s.to_vec(), |_| rng.random_range(-1.0f32..1.0));
        let (x, w, b) = (u(&[n, h, wd, cin]), u(&[k, k, cin, cout]), u(&[cout]));
        let tape = Tape::new();
        let pad = if same { Padding::Same } else { Padding::Valid };
        let y = tape
            .constant(&x)
            .conv2d(tape.constant(&w), tape.constant(&b), stride, pad)
            .unwrap()
            .value();
        let (shape, want) = conv_loops(&x, &w, &b, stride, same);
        assert_eq!(y.shape(), &shape[..], "case {case}");
        for (a, e) in y.data().iter().zip(&want) {
            assert!((*a as f64 - e).abs() < 1e-5, "case {case}: {a} vs {e}");
        }
    }
}
