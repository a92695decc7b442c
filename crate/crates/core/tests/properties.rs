mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use vismem::checkpoint::{params_from_archive, params_to_archive, Archive};
use vismem::dataio::{flow_to_angle, generate_dataset, read_flo, read_pgm, window_starts, write_flo, SynthOptions};
use vismem::metrics::{iou, prf};
use vismem::model::{ForwardOptions, ModelConfig, ModelInput, ModelParams, Variant};
use vismem::params::ParamSet;
use vismem::recurrent::{gru_step, ConvGruParams, GruState};
use vismem::tensor::channel_softmax2;
use vismem::training::{augment_static_start, augment_stop, make_batch, TrainConfig};
use vismem::visualize::{render_gates, GateSignal, HeatmapSpec};
use vismem::Tensor;

fn tiny(stride: usize) -> ModelConfig {
    ModelConfig {
        d_app: 3,
        d_mid: 2,
        d_h: 3,
        kernel: 3,
        stride,
        ..ModelConfig::desk()
    }
}

fn clip(n: usize, h: usize, w: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut r = rng(seed);
    let frames = (0..n).map(|_| random_tensor(&[3, h, w], 1.0, &mut r).map(|v| v.abs()).cast()).collect();
    let angle = (0..n).map(|_| random_tensor(&[2, h, w], 1.0, &mut r).cast()).collect();
    (frames, angle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gates_and_state_stay_bounded(seed in 0u64..1000, scale in 0.1f64..8.0) {
        let mut r = rng(seed);
        let mut p = ConvGruParams::<f64>::zeros(2, 3, 3);
        for (_, t) in p.named_mut() {
            *t = random_tensor(t.shape(), scale, &mut r);
        }
        let mut s = GruState::zeros(3, 4, 4);
        for _ in 0..50 {
            let x = random_tensor(&[2, 4, 4], 5.0, &mut r);
            let (next, rec) = gru_step(&x, &s, &p).unwrap();
            prop_assert!(rec.z.data().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(rec.r.data().iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(next.h.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            s = next;
        }
    }

    #[test]
    fn softmax_is_normalised(seed in 0u64..1000, scale in 0.1f64..60.0) {
        let l: Tensor<f32> = random_tensor(&[2, 5, 7], scale, &mut rng(seed)).cast();
        let p = channel_softmax2(&l).unwrap();
        for i in 0..35 {
            let s = p.data()[i] + p.data()[35 + i];
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn shapes_follow_the_grid(hq in 1usize..=24, wq in 1usize..=24, s in prop::sample::select(vec![1usize, 2, 4])) {
        let (h, w) = (hq * s, wq * s);
        prop_assume!(h <= 96 && w <= 96);
        let p = ModelParams::<f32>::init(&tiny(s), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (frames, angle) = clip(2, h, w, 3);
        let input = ModelInput { frames: &frames, flow_angle: &angle, motion_override: None };
        let pass = p.forward(input, ForwardOptions::default()).unwrap();
        for prob in &pass.probs {
            prop_assert_eq!(prob.shape(), &[2, hq, wq]);
        }
        prop_assert_eq!(pass.inputs[0].shape(), &[4, hq, wq]);
    }

    #[test]
    fn head_shift_keeps_segmentation(shift in -30.0f32..30.0, seed in 0u64..100) {
        let mut p = ModelParams::<f32>::init(&tiny(2), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (frames, angle) = clip(3, 8, 8, seed);
        let input = ModelInput { frames: &frames, flow_angle: &angle, motion_override: None };
        let a = p.forward(input, ForwardOptions::default()).unwrap();
        for b in p.head.b.data_mut() {
            *b += shift;
        }
        let b = p.forward(input, ForwardOptions::default()).unwrap();
        for (x, y) in a.object_probs().iter().zip(b.object_probs()) {
            for (&u, &v) in x.data().iter().zip(y.data()) {
                // away from the decision boundary the argmax cannot move
                if (u - 0.5).abs() > 1e-4 {
                    prop_assert_eq!(u > 0.5, v > 0.5);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise(seed in 0u64..1000, v in 0usize..8) {
        let cfg = tiny(2).with_variant(Variant::ALL[v]);
        let mut p = ModelParams::<f32>::zeros(&cfg).unwrap();
        let mut r = rng(seed);
        for (_, t) in p.named_mut() {
            *t = random_tensor(t.shape(), 1e3, &mut r).cast();
        }
        let bytes = params_to_archive(&p, &[]).to_bytes().unwrap();
        let back: ModelParams<f32> = params_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        for ((_, a), (_, b)) in p.named().iter().zip(back.named()) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back.config, p.config);
    }

    #[test]
    fn windows_cover_every_frame(len in 1usize..400, window in 1usize..150, step in 1usize..150) {
        prop_assume!(step <= window);
        let starts = window_starts(len, window, step);
        let mut cover = vec![0usize; len];
        for &s in &starts {
            prop_assert!(s + window.min(len) <= len);
            for c in &mut cover[s..s + window.min(len)] {
                *c += 1;
            }
        }
        prop_assert!(cover.iter().all(|&c| c >= 1));
        prop_assert!(starts.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= step));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a: Tensor<f32> = random_tensor(&[1, 6, 5], 1.0, &mut r).map(|v| (v > 0.2) as u8 as f64).cast();
        let b: Tensor<f32> = random_tensor(&[1, 6, 5], 1.0, &mut r).map(|v| (v > -0.1) as u8 as f64).cast();
        let j = iou(&a, &b).unwrap();
        prop_assert_eq!(j, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let (p, rc, _) = prf(&a, &b).unwrap();
        let (p2, rc2, _) = prf(&b, &a).unwrap();
        prop_assert_eq!((p, rc), (rc2, p2));
    }

    #[test]
    fn flo_roundtrip_is_bitwise(seed in 0u64..1000, h in 1usize..9, w in 1usize..9) {
        let f: Tensor<f32> = random_tensor(&[2, h, w], 40.0, &mut rng(seed)).cast();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        write_flo(&path, &f).unwrap();
        prop_assert_eq!(read_flo(&path).unwrap(), f);
    }

    #[test]
    fn angle_ignores_flow_magnitude(seed in 0u64..1000, k in 0.01f32..100.0) {
        let f: Tensor<f32> = random_tensor(&[2, 5, 6], 3.0, &mut rng(seed)).cast();
        let a = flow_to_angle(&f);
        let b = flow_to_angle(&f.scale(k));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn heatmaps_decode_within_one_level(seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut gate = |lo: f64| -> Tensor<f32> { random_tensor(&[2, 3, 4], 1.0, &mut r).map(|v| lo + (1.0 - lo) * v.abs()).cast() };
        let rec = vismem::recurrent::GateRecord { z: gate(0.0), r: gate(0.0), h_cand: gate(-1.0), h_new: gate(-1.0) };
        let dir = tempfile::tempdir().unwrap();
        let spec = HeatmapSpec { channels: vec![0, 1], signals: GateSignal::ALL.to_vec(), scale: 1 };
        let paths = render_gates(std::slice::from_ref(&rec), &spec, dir.path()).unwrap();
        prop_assert_eq!(paths.len(), 6);
        for path in &paths {
            let img = read_pgm(path).unwrap();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let c = if name.contains("_c1_") { 1 } else { 0 };
            let want = match () {
                _ if name.starts_with("gate_r_") => rec.r.clone(),
                _ if name.starts_with("gate_inv_z_") => rec.z.map(|z| 1.0 - z),
                _ => rec.h_new.map(|h| (h + 1.0) / 2.0),
            }
            .slice_channels(c, c + 1)
            .unwrap();
            for (a, b) in img.data().iter().zip(want.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let p = ModelParams::<f32>::init(&tiny(2), &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (frames, angle) = clip(4, 8, 8, 6);
    let input = ModelInput {
        frames: &frames,
        flow_angle: &angle,
        motion_override: None,
    };
    let opts = ForwardOptions {
        record_gates: true,
        keep_caches: false,
    };
    let (a, b) = (p.forward(input, opts).unwrap(), p.forward(input, opts).unwrap());
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.gates.unwrap().forward, b.gates.unwrap().forward);
}

#[test]
fn override_lands_in_the_last_channel() {
    let p = ModelParams::<f32>::init(&tiny(2), &mut rand_chacha::ChaCha8Rng::seed_from_u64(7)).unwrap();
    let (frames, angle) = clip(3, 8, 8, 8);
    let over: Vec<Tensor> = (0..3).map(|t| Tensor::from_fn(&[1, 4, 4], |i| ((i + t) % 3) as f32 / 2.0)).collect();
    let input = ModelInput {
        frames: &frames,
        flow_angle: &angle,
        motion_override: Some(&over),
    };
    let pass = p.forward(input, ForwardOptions::default()).unwrap();
    for (x, o) in pass.inputs.iter().zip(&over) {
        assert_eq!(&x.slice_channels(3, 4).unwrap(), o);
    }
}

#[test]
fn augmentations_freeze_and_override() {
    let data = generate_dataset(&SynthOptions::default(), 2, 11).unwrap();
    let cfg = TrainConfig::default();
    let mut r = rng(12);
    let b = make_batch(&data, &cfg, 4, &mut r).unwrap();
    let n = b.len();

    let s = augment_stop(&b, 5).unwrap();
    assert_eq!(s.len(), n);
    let over = s.motion_override.as_ref().unwrap();
    for t in n - 5..n {
        assert_eq!(s.frames[t], b.frames[n - 6]);
        assert_eq!(s.masks[t], b.masks[n - 6]);
        assert_eq!(over[t].max_abs(), 0.0);
    }
    for t in 0..n - 5 {
        assert_eq!(s.frames[t], b.frames[t]);
        assert_eq!(over[t], vismem::dataio::downsample_nearest(&b.masks[t], 4).unwrap());
    }

    let h = augment_static_start(&b, 5).unwrap();
    assert_eq!(h.len(), n);
    let over = h.motion_override.as_ref().unwrap();
    for t in 0..5 {
        assert_eq!(h.frames[t], b.frames[5]);
        assert_eq!(over[t].max_abs(), 0.0);
    }
    assert_eq!(augment_stop(&h, 5).unwrap().len(), n);

    let all = TrainConfig {
        aug_fraction: 1.0,
        ..cfg
    };
    for _ in 0..10 {
        assert!(vismem::training::sample_batch(&data, &all, 4, &mut r)
            .unwrap()
            .motion_override
            .is_some());
    }
}
