mod support;

use ldrpm_core::autodiff::{BatchNormConfig, Conv1dOptions, Mode, RunningStats, Tape};
use ldrpm_core::Tensor;
use rand::Rng;

fn conv(x: Tensor, w: Tensor, b: Option<Tensor>, opts: Conv1dOptions) -> Tensor {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x), t.constant(w));
    let bv = b.map(|b| t.constant(b));
    let y = t.conv1d(xv, wv, bv, opts).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_identity_and_box_sum() {
    let x = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let y = conv(x, w, None, Conv1dOptions { stride: 1, padding: 1, groups: 1 });
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    let y = conv(Tensor::full(&[1, 1, 3], 1.0), Tensor::full(&[1, 1, 3], 1.0), None, Conv1dOptions::default());
    assert_eq!(y.data(), &[3.0]);
}

#[test]
fn conv_exhaustive_small_sweep() {
    let mut r = support::rng(17);
    for cin in 1..=4 {
        for cout in 1..=4 {
            for k in 1..=7 {
                for n in (k..=32).step_by(3) {
                    let x = support::random(&mut r, &[1, cin, n]);
                    let w = support::random(&mut r, &[cout, cin, k]);
                    let want = support::conv1d(&x, &w, None, 1, 0, 1);
                    let got = conv(x, w, None, Conv1dOptions::default());
                    assert!(support::max_abs_diff(got.data(), want.data()) <= 1e-12, "{cin} {cout} {k} {n}");
                }
            }
        }
    }
}

#[test]
fn depthwise_equals_per_channel_convs() {
    let mut r = support::rng(5);
    for _ in 0..20 {
        let c = r.random_range(1..=5);
        let k = 2 * r.random_range(0..=3) + 1;
        let n = r.random_range(k..=24);
        let x = support::random(&mut r, &[2, c, n]);
        let w = support::random(&mut r, &[c, 1, k]);
        let pad = (k - 1) / 2;
        let got = conv(x.clone(), w.clone(), None, Conv1dOptions { stride: 1, padding: pad, groups: c });
        let mut want = vec![0.0; got.numel()];
        for ch in 0..c {
            for b in 0..2 {
                let xs = Tensor::new(&[1, 1, n], x.data()[(b * c + ch) * n..(b * c + ch + 1) * n].to_vec()).unwrap();
                let ws = Tensor::new(&[1, 1, k], w.data()[ch * k..(ch + 1) * k].to_vec()).unwrap();
                let y = support::conv1d(&xs, &ws, None, 1, pad, 1);
                want[(b * c + ch) * n..(b * c + ch + 1) * n].copy_from_slice(y.data());
            }
        }
        assert!(support::max_abs_diff(got.data(), &want) <= 1e-12);
    }
}

#[test]
fn conv_reference_case() {
    let mut r = support::rng(99);
    let x = support::random(&mut r, &[1, 3, 16]);
    let w = support::random(&mut r, &[4, 3, 5]);
    let b = support::random(&mut r, &[4]);
    let want = support::conv1d(&x, &w, Some(&b), 1, 0, 1);
    let got = conv(x, w, Some(b), Conv1dOptions::default());
    assert!(support::max_abs_diff(got.data(), want.data()) <= 1e-12);
}

#[test]
fn gelu_matches_extended_precision() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[3], vec![0.0, 1.0, 10.0]).unwrap());
    let y = t.gelu(x).unwrap();
    let v = t.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.841_344_746_068_542_9).abs() <= 1e-15);
    assert!((v[2] - 10.0).abs() <= 1e-9);
}

#[test]
fn softmax_matches_extended_precision() {
    let x = [0.737, 1.451, 1.771, 2.655, 1.439, 2.534, -2.826];
    let want = [
        0.048_217_333_257_932_64,
        0.098_466_714_535_580_43,
        0.135_601_246_449_890_76,
        0.328_231_308_135_562_1,
        0.097_292_175_291_057_71,
        0.290_824_085_609_701_36,
        0.001_367_136_720_274_967,
    ];
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(&[1, 7], x.to_vec()).unwrap());
    let y = t.softmax(v, 1).unwrap();
    assert!(support::max_abs_diff(t.value(y).data(), &want) <= 1e-12);

    let v = t.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
    let y = t.softmax(v, 0).unwrap();
    assert!((t.value(y).data()[0] - 1.0).abs() <= 1e-12 && t.value(y).data()[1] <= 1e-12);
}

#[test]
fn cross_entropy_matches_extended_precision() {
    let logits = vec![
        0.3, -1.7, 2.25, 0.0, -0.4, 1.1, 3.05, -2.2, 0.75, 0.5, //
        -0.6, 0.15, -3.0, 1.9, 2.4, -0.05, 0.8, 1.35, -1.25, 0.2, //
        12.5, 11.75, -4.0, 3.3, 0.0, 7.1, 12.0, -8.5, 5.5, 9.25,
    ];
    let mut t = Tape::new();
    let z = t.constant(Tensor::new(&[3, 10], logits).unwrap());
    let l = ldrpm_core::train::cross_entropy(&mut t, z, &[7, 5, 2]).unwrap();
    assert!((t.value(l).data()[0] - 1.030_481_729_292_876).abs() <= 1e-12);

    let mut sat = vec![0.0; 10];
    sat[3] = 1000.0;
    let z = t.constant(Tensor::new(&[1, 10], sat).unwrap());
    let l = ldrpm_core::train::cross_entropy(&mut t, z, &[4]).unwrap();
    assert!(t.value(l).data()[0] <= 1e-9);
}

fn channel_stats(y: &[f64], b: usize, c: usize, n: usize, ch: usize) -> (f64, f64) {
    let vals: Vec<f64> =
        (0..b).flat_map(|bi| (0..n).map(move |t| (bi, t))).map(|(bi, t)| y[(bi * c + ch) * n + t]).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var)
}

#[test]
fn batchnorm_train_statistics() {
    let mut r = support::rng(8);
    let x = support::random(&mut r, &[4, 2, 8]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));

    let mut stats = RunningStats::new(2);
    let cfg = BatchNormConfig { mode: Mode::Train, momentum: 0.1, eps: 1e-12 };
    let y = t.batch_norm(xv, g, b, &mut stats, cfg).unwrap();
    for ch in 0..2 {
        let (m, v) = channel_stats(t.value(y).data(), 4, 2, 8, ch);
        assert!(m.abs() <= 1e-10);
        assert!((v - 1.0).abs() <= 1e-6);
    }

    let mut stats = RunningStats::new(2);
    let y = t.batch_norm(xv, g, b, &mut stats, BatchNormConfig::default()).unwrap();
    for ch in 0..2 {
        let (_, raw) = channel_stats(x.data(), 4, 2, 8, ch);
        let (m, v) = channel_stats(t.value(y).data(), 4, 2, 8, ch);
        assert!(m.abs() <= 1e-10);
        assert!((v - raw / (raw + 1e-5)).abs() <= 1e-12);
        // running stats moved 10% of the way from (0, 1)
        let (bm, _) = channel_stats(x.data(), 4, 2, 8, ch);
        assert!((stats.mean[ch] - 0.1 * bm).abs() <= 1e-15);
        assert!((stats.var[ch] - (0.9 + 0.1 * raw * 32.0 / 31.0)).abs() <= 1e-15);
    }
}

#[test]
fn layer_norm_statistics() {
    let mut r = support::rng(3);
    let x = support::random(&mut r, &[1, 64]);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let g = t.constant(Tensor::full(&[64], 1.0));
    let b = t.constant(Tensor::zeros(&[64]));
    let y = t.layer_norm(xv, g, b, 1e-12).unwrap();
    let (m, v) = channel_stats(t.value(y).data(), 1, 1, 64, 0);
    assert!(m.abs() <= 1e-10);
    assert!((v - 1.0).abs() <= 1e-6);
}

#[test]
fn identical_sequences_are_bit_identical() {
    let run = || {
        let mut r = support::rng(21);
        let x = support::random(&mut r, &[3, 4, 40]);
        let w = support::random(&mut r, &[6, 2, 5]);
        let mut t = Tape::new();
        let (xv, wv) = (t.leaf(x, true), t.leaf(w, true));
        let y = t.conv1d(xv, wv, None, Conv1dOptions { stride: 2, padding: 2, groups: 2 }).unwrap();
        let y = t.gelu(y).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn worker_count_does_not_change_results() {
    let run = |threads| {
        ldrpm_core::par::with_threads(threads, || {
            let mut r = support::rng(30);
            let x = support::random(&mut r, &[8, 16, 300]);
            let w = support::random(&mut r, &[32, 16, 7]);
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x, true), t.leaf(w, true));
            let y = t.conv1d(xv, wv, None, Conv1dOptions { stride: 1, padding: 3, groups: 1 }).unwrap();
            let s = t.sum(y).unwrap();
            let g = t.backward(s).unwrap();
            (t.value(y).clone(), g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
        })
    };
    assert_eq!(run(1), run(4));
}
