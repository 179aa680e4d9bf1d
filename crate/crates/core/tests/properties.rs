use approx::{assert_abs_diff_eq, assert_relative_eq};
use freqscan::autodiff::Tape;
use freqscan::checkpoint::{read_checkpoint, write_checkpoint};
use freqscan::detect::{box_iou, BBox};
use freqscan::eval::nms;
use freqscan::freq::lh_separate;
use freqscan::hilbert::{apply_scan, hilbert_d2xy, hilbert_xy2d, inverse_scan, ScanOrder, ScanVariant};
use freqscan::kernels::{dct2_planes, ConvGeom};
use freqscan::nn::ParamStore;
use freqscan::ssm::{apply_kernel, discretize_zoh, ssm_conv_kernel, ssm_recurrence, SsmDiscrete};
use freqscan::Tensor4;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    Tensor4::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn variant() -> impl Strategy<Value = ScanVariant> {
    proptest::sample::select(ScanVariant::ALL.to_vec())
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64, 0usize..2)
        .prop_map(|(x, y, w, h, c)| BBox::new(x, y, x + w, y + h, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_round_trip_is_exact(v in variant(), n in 0u32..5, seed in any::<u64>()) {
        let side = 1usize << n;
        let order = ScanOrder::build(v, side, side).unwrap();
        let x = tensor([2, 3, side, side], seed);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        for p in 0..order.paths.len() {
            let seq = apply_scan(xv, &order, p).unwrap();
            prop_assert_eq!(seq.shape(), [2, 3, 1, side * side]);
            prop_assert_eq!(&*inverse_scan(seq, &order, p).unwrap().value(), &x);
        }
    }

    #[test]
    fn hilbert_rank_round_trip(n in 1u32..10, frac in 0.0..1.0f64) {
        let d = ((1u64 << (2 * n)) as f64 * frac) as u64;
        let (x, y) = hilbert_d2xy(n, d).unwrap();
        prop_assert!(x < (1 << n) && y < (1 << n));
        prop_assert_eq!(hilbert_xy2d(n, x, y).unwrap(), d);
    }

    #[test]
    fn dct_round_trip_and_energy(h in 1usize..=32, w in 1usize..=32, seed in any::<u64>()) {
        let shape = [1, 2, h, w];
        let x = tensor(shape, seed);
        let y = dct2_planes(x.data(), shape, false);
        let back = dct2_planes(&y, shape, true);
        for (a, b) in x.data().iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let ey: f64 = y.iter().map(|v| v * v).sum();
        assert_relative_eq!(ex, ey, max_relative = 1e-12);
    }

    #[test]
    fn bands_reconstruct_input(hh in 1usize..=8, hw in 1usize..=8, c in 1usize..=3, seed in any::<u64>()) {
        let x = tensor([1, c, 2 * hh, 2 * hw], seed);
        let tape = Tape::new();
        let b = lh_separate(tape.constant(x.clone())).unwrap();
        prop_assert_eq!(b.low.shape(), [1, c, hh, hw]);
        let r = b.high.add(b.low.upsample_bilinear(2).unwrap()).unwrap().value();
        prop_assert!(r.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn conv_is_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, groups in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
        let (x, y, w) = (tensor([1, 4, 5, 5], seed), tensor([1, 4, 5, 5], seed ^ 1), tensor([4, 4 / groups, 3, 3], seed ^ 2));
        let tape = Tape::new();
        let geom = ConvGeom::new(1, 1, groups);
        let conv = |t: Tensor4<f64>| tape.constant(t).conv2d(tape.constant(w.clone()), None, geom).unwrap();
        let combo = Tensor4::from_fn(x.shape(), |i| a * x.at(i) + b * y.at(i));
        let lhs = conv(combo).value();
        let rhs = conv(x).scale(a).add(conv(y).scale(b)).unwrap().value();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn layer_norm_ignores_positive_scale(s in 0.1..10.0f64, seed in any::<u64>()) {
        let x = tensor([1, 6, 3, 3], seed);
        let tape = Tape::new();
        let a = tape.constant(x.clone()).layer_norm(None, None, 1e-12).unwrap().value();
        let b = tape.constant(x.map(|v| v * s)).layer_norm(None, None, 1e-12).unwrap().value();
        prop_assert!(a.max_abs_diff(&b) <= 1e-8);
    }

    #[test]
    fn pool_then_upsample_keeps_constants(c in -5.0..5.0f64, h in 1usize..6, w in 1usize..6) {
        let tape = Tape::new();
        let out = tape.constant(Tensor4::full([1, 2, 2 * h, 2 * w], c)).avg_pool2().unwrap().upsample_bilinear(2).unwrap();
        for v in out.value().data() {
            assert_abs_diff_eq!(*v, c, epsilon = 1e-14);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (box_iou(&a, &b), box_iou(&b, &a));
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab));
        assert_relative_eq!(box_iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_is_idempotent(boxes in prop::collection::vec((bbox(), 0.0..1.0f64), 0..12)) {
        let scored: Vec<BBox> = boxes.into_iter().map(|(b, s)| b.with_score(s)).collect();
        let once = nms(&scored, 0.5);
        prop_assert_eq!(nms(&once, 0.5), once.clone());
        for (i, p) in once.iter().enumerate() {
            for q in &once[i + 1..] {
                prop_assert!(p.class_id != q.class_id || box_iou(p, q) <= 0.5);
            }
        }
    }

    #[test]
    fn recurrence_matches_kernel(n in 1usize..=8, len in 1usize..=64, delta in 0.001..1.0f64, seed in any::<u64>()) {
        let v = tensor([4, 1, 1, 64], seed);
        let a: Vec<f64> = v.data()[..n].iter().map(|x| -0.01 - 2.0 * x.abs()).collect();
        let b = v.data()[64..64 + n].to_vec();
        let c = v.data()[128..128 + n].to_vec();
        let u = v.data()[192..192 + len].to_vec();
        let (abar, bbar) = discretize_zoh(delta, &a, &b).unwrap();
        let sys = SsmDiscrete::time_invariant(abar, bbar, c, len).unwrap();
        let rec = ssm_recurrence(&sys, &u).unwrap();
        let conv = apply_kernel(&ssm_conv_kernel(&sys).unwrap(), &u).unwrap();
        for (x, y) in rec.iter().zip(&conv) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn zoh_is_continuous_at_zero(delta in 0.01..2.0f64, b in -3.0..3.0f64, a in 1e-7..1e-5f64) {
        let (_, at_zero) = discretize_zoh(delta, &[0.0], &[b]).unwrap();
        let (_, near) = discretize_zoh(delta, &[-a], &[b]).unwrap();
        prop_assert_eq!(at_zero[0], delta * b);
        assert_relative_eq!(near[0], at_zero[0], max_relative = 1e-4);
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec([1usize..4, 1usize..4, 1usize..4, 1usize..4], 1..6), seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        for (i, s) in shapes.iter().enumerate() {
            store.insert(format!("p{i}.weight"), tensor(*s, seed.wrapping_add(i as u64)));
        }
        let mut bytes = Vec::new();
        write_checkpoint(&store, &mut bytes).unwrap();
        let back: ParamStore<f64> = read_checkpoint(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (name, t) in store.iter() {
            prop_assert_eq!(back.get(name), Some(t));
        }
    }
}
