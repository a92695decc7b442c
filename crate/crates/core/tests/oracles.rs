mod common;

use common::*;
use rand::Rng;
use vismem::dataio::{flow_to_angle, generate_video, ObjectSpec, ShapeKind, SynthConfig, SynthOptions};
use vismem::metrics::{boundary, boundary_f_radius, j_statistics};
use vismem::params::ParamSet;
use vismem::recurrent::ConvGruParams;
use vismem::tensor::channel_softmax2;
use vismem::training::{
    bce_loss, clip_gradients, lr_schedule, make_batch, rmsprop_update, xavier_init, OptimizerState, TrainConfig,
};
use vismem::Tensor;

#[test]
fn rmsprop_matches_scalar_loop() {
    let mut r = rng(21);
    let mut p = ConvGruParams::<f64>::zeros(2, 2, 3);
    for (_, t) in p.named_mut() {
        *t = random_tensor(t.shape(), 1.0, &mut r);
    }
    let (rho, eps, wd) = (0.9, 1e-8, 0.005);
    let mut state = OptimizerState::new(&p, rho, eps);
    let mut flat: Vec<f64> = p.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let mut acc = vec![0.0; flat.len()];
    for step in 0..100 {
        let lr = 1e-3 * 0.97f64.powi(step);
        let mut g = p.clone();
        for (_, t) in g.named_mut() {
            *t = random_tensor(t.shape(), 3.0, &mut r);
        }
        let gflat: Vec<f64> = g.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        rmsprop_update(&mut p, &g, &mut state, lr, wd).unwrap();
        for i in 0..flat.len() {
            acc[i] = rho * acc[i] + (1.0 - rho) * gflat[i] * gflat[i];
            flat[i] -= lr * gflat[i] / (acc[i] + eps).sqrt() + lr * wd * flat[i];
        }
    }
    let got: Vec<f64> = p.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    for (a, b) in got.iter().zip(&flat) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn xavier_bounds_and_moments() {
    let mut r = rng(22);
    let shape = [32, 24, 3, 3];
    let t: Tensor<f64> = xavier_init(&shape, &mut r).unwrap();
    let bound = (6.0f64 / ((24 + 32) * 9) as f64).sqrt();
    let n = t.len() as f64;
    let mean = t.sum() / n;
    let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(t.data().iter().all(|v| v.abs() <= bound));
    assert!(mean.abs() < 0.02 * bound, "mean {mean}");
    // uniform variance b^2 / 3, i.e. 2 / (fan_in + fan_out)
    let expect = bound * bound / 3.0;
    assert!((var - expect).abs() < 0.05 * expect, "var {var} vs {expect}");
    assert!(xavier_init::<f64, _>(&[3, 3], &mut r).is_err());
}

#[test]
fn schedule_and_clipping() {
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        lr_decay: 0.5,
        ..TrainConfig::default()
    };
    assert_eq!(lr_schedule(&cfg, 0), 2e-3);
    assert_eq!(lr_schedule(&cfg, 3), 2.5e-4);

    let mut g = ConvGruParams::<f32>::zeros(1, 1, 1);
    g.w_xz.data_mut()[0] = 120.0;
    g.w_hz.data_mut()[0] = -75.5;
    g.b_r.data_mut()[0] = 49.0;
    clip_gradients(&mut g, 50.0);
    assert_eq!((g.w_xz.data()[0], g.w_hz.data()[0], g.b_r.data()[0]), (50.0, -50.0, 49.0));
}

#[test]
fn bce_gradient_through_softmax() {
    let mut r = rng(23);
    let logits = random_tensor(&[2, 3, 4], 2.0, &mut r);
    let mask = Tensor::from_fn(&[1, 3, 4], |i| (i % 3 == 0) as u8 as f64);
    let loss = |l: &Tensor<f64>| bce_loss(&[channel_softmax2(l).unwrap()], &[mask.clone()]).unwrap().0;
    let (_, g) = bce_loss(&[channel_softmax2(&logits).unwrap()], &[mask.clone()]).unwrap();
    assert!(max_rel(&g[0], &numeric_input_grad(&logits, loss)) < 1e-6);
}

#[test]
fn boundary_against_brute_force() {
    let mut r = rng(24);
    for _ in 0..300 {
        let (h, w) = (r.gen_range(1..8), r.gen_range(1..8));
        let density = r.gen_range(0.1..0.9);
        let p: Vec<bool> = (0..h * w).map(|_| r.gen_bool(density)).collect();
        let g: Vec<bool> = (0..h * w).map(|_| r.gen_bool(density)).collect();
        let b = boundary(&p, h, w);
        let expect = brute_boundary(&p, h, w);
        let got: Vec<(i64, i64)> = (0..h * w).filter(|&i| b[i]).map(|i| ((i / w) as i64, (i % w) as i64)).collect();
        assert_eq!(got, expect);
        let to_t = |m: &[bool]| Tensor::from_fn(&[1, h, w], |i| m[i] as u8 as f32);
        for radius in 0..3 {
            assert_eq!(
                boundary_f_radius(&to_t(&p), &to_t(&g), radius).unwrap(),
                brute_boundary_f(&p, &g, h, w, radius)
            );
        }
    }
}

#[test]
fn decay_uses_quartile_bins() {
    let ious = [1.0, 1.0, 0.8, 0.6, 0.6, 0.4, 0.2, 0.0];
    let (mean, recall, decay) = j_statistics(&ious).unwrap();
    assert!((mean - 0.575).abs() < 1e-12);
    assert_eq!(recall, 0.625);
    assert!((decay - 0.9).abs() < 1e-12);
    // 10 frames: bins of 3, 3, 2, 2
    let ious: Vec<f64> = (0..10).map(|i| 1.0 - 0.1 * i as f64).collect();
    let (_, _, decay) = j_statistics(&ious).unwrap();
    assert!((decay - (0.9 - 0.15)).abs() < 1e-12);
}

#[test]
fn flip_is_an_involution_and_mirrors_angles() {
    let data = vismem::dataio::generate_dataset(&SynthOptions::default(), 2, 3).unwrap();
    let mut r = rng(25);
    let cfg = TrainConfig::default();
    for _ in 0..6 {
        let b = make_batch(&data, &cfg, 4, &mut r).unwrap();
        assert_eq!(b.flipped().unwrap().flipped().unwrap(), b);
        let f = b.flipped().unwrap();
        let (n, w) = (48 * 48, 48);
        for t in 0..b.len() {
            let (a, m) = (b.flow_angle[t].data(), f.flow_angle[t].data());
            for i in 0..n {
                let j = (i / w) * w + (w - 1 - i % w);
                assert_eq!(m[j], a[i], "sin unchanged");
                assert_eq!(m[n + j], -a[n + i], "cos negated");
            }
        }
    }
}

#[test]
fn batch_crop_is_shared_by_all_frames() {
    let data = vismem::dataio::generate_dataset(&SynthOptions::default(), 3, 4).unwrap();
    let mut r = rng(26);
    for _ in 0..5 {
        let b = make_batch(&data, &TrainConfig::default(), 4, &mut r).unwrap();
        let v = &data[b.video];
        let (y0, x0) = b.crop;
        for t in 0..b.len() {
            let mut src = v.frames[b.start + t].crop(y0, x0, 48, 48).unwrap();
            let mut mask = v.masks[b.start + t].crop(y0, x0, 48, 48).unwrap();
            if b.flipped {
                src = src.flip_horizontal().unwrap();
                mask = mask.flip_horizontal().unwrap();
            }
            assert_eq!(b.frames[t], src);
            assert_eq!(b.masks[t], mask);
        }
    }
}

fn single_object(velocity: (f32, f32), camera: (f32, f32)) -> SynthConfig {
    SynthConfig {
        name: "probe".into(),
        height: 48,
        width: 48,
        frames: 8,
        camera_velocity: camera,
        background_seed: 5,
        objects: vec![ObjectSpec {
            shape: ShapeKind::Disk { radius: 6.0 },
            start: (16.0, 20.0),
            velocity,
            stop: None,
            texture_seed: 9,
        }],
    }
}

fn centroid(m: &Tensor) -> (f64, f64) {
    let w = m.shape()[2];
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, &v) in m.data().iter().enumerate() {
        if v > 0.5 {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
            n += 1.0;
        }
    }
    (sx / n, sy / n)
}

#[test]
fn synthetic_motion_is_consistent() {
    let v = generate_video(&single_object((1.0, 0.0), (1.0, -1.0))).unwrap();
    // mask centroid follows object plus camera velocity
    let (x0, y0) = centroid(&v.masks[0]);
    let (x7, y7) = centroid(&v.masks[7]);
    assert!(((x7 - x0) / 7.0 - 2.0).abs() < 0.05, "{}", (x7 - x0) / 7.0);
    assert!(((y7 - y0) / 7.0 + 1.0).abs() < 0.05, "{}", (y7 - y0) / 7.0);

    // flow at the object centre is the total displacement; background
    // flow is the camera velocity
    let n = 48 * 48;
    let at = |f: &Tensor, x: usize, y: usize| (f.data()[y * 48 + x], f.data()[n + y * 48 + x]);
    let (cx, cy) = centroid(&v.masks[2]);
    assert_eq!(at(&v.flow[2], cx.round() as usize, cy.round() as usize), (2.0, -1.0));
    assert_eq!(at(&v.flow[2], 45, 2), (1.0, -1.0));

    // warping the object interior by its flow lands on matching colours
    for t in 0..7 {
        let (cx, cy) = centroid(&v.masks[t]);
        let (fx, fy) = at(&v.flow[t], cx.round() as usize, cy.round() as usize);
        let (x, y) = (cx.round(), cy.round());
        let (nx, ny) = (x + fx as f64, y + fy as f64);
        for c in 0..3 {
            let a = v.frames[t].data()[c * n + y as usize * 48 + x as usize];
            let b = v.frames[t + 1].data()[c * n + ny as usize * 48 + nx as usize];
            assert!((a - b).abs() < 1e-4, "frame {t} channel {c}: {a} vs {b}");
        }
    }

    let angle = flow_to_angle(&v.flow[0]);
    let (s, c) = (angle.data()[2], angle.data()[n + 2]);
    let half = std::f32::consts::FRAC_1_SQRT_2;
    assert!((s + half).abs() < 1e-6 && (c - half).abs() < 1e-6);
}

#[test]
fn still_scene_has_no_moving_pixels() {
    let v = generate_video(&single_object((0.0, 0.0), (0.0, 0.0))).unwrap();
    assert!(v.masks.iter().all(|m| m.sum() == 0.0));
    assert!(v.flow.iter().all(|f| f.max_abs() == 0.0));
    assert!(v.flow_angles().iter().all(|a| a.max_abs() == 0.0));
}
