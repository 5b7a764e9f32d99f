use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::covariance_2d;
use crate::scene::{logit, transform_scene, Gaussian};

fn k16() -> Intrinsics {
    Intrinsics::new(16.0, 16.0, 7.5, 7.5, 16, 16).unwrap()
}

fn random_scene(n: usize, rng: &mut impl Rng, k: &Intrinsics) -> GaussianScene {
    let mut s = GaussianScene::new();
    for _ in 0..n {
        let z = rng.gen_range(2.0..4.0);
        let u = rng.gen_range(-2.0..k.width as f64 + 2.0);
        let v = rng.gen_range(-2.0..k.height as f64 + 2.0);
        let pos = k.ray(u, v) * z;
        let sc = rng.gen_range(0.06..0.3) * z / k.fx * 4.0;
        s.push(&Gaussian {
            position: pos,
            color: [rng.gen(), rng.gen(), rng.gen()],
            rotation: Quaternion::new(rng.gen_range(-1.0..1.0), rng.gen(), rng.gen(), rng.gen()).normalized(),
            scale: Vector3::new(sc, sc * rng.gen_range(0.3..1.0), sc * rng.gen_range(0.3..1.0)),
            opacity: rng.gen_range(0.2..0.95),
        });
    }
    s
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn empty_scene_renders_background() {
    let k = k16();
    for out in [
        render(&GaussianScene::new(), &Pose::identity(), &k),
        render_reference(&GaussianScene::new(), &Pose::identity(), &k),
    ] {
        assert!(out.color.data.iter().all(|v| *v == 0.0));
        assert!(out.alpha.iter().all(|v| *v == 0.0));
        assert!(out.depth.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn opaque_gaussian_on_principal_ray() {
    let k = k16();
    let mut s = GaussianScene::new();
    s.push(&Gaussian {
        position: Vector3::new(0.0, 0.0, 3.0),
        color: [0.2, 0.7, 0.4],
        rotation: Quaternion::identity(),
        scale: Vector3::new(1.0, 1.0, 1.0),
        opacity: 0.999,
    });
    // principal point sits between pixels; pixel (8, 8) is half a pixel off-axis
    let k = Intrinsics { cx: 8.0, cy: 8.0, ..k };
    let out = render(&s, &Pose::identity(), &k);
    let c = out.color.pixel(8, 8);
    for (got, want) in c.iter().zip([0.2, 0.7, 0.4]) {
        assert!((got - want).abs() <= 0.01 * want + 1e-12, "{got} vs {want}");
    }
    assert!((out.depth[8 * 16 + 8] - 3.0).abs() <= 0.01 * 3.0 + 1e-9);
}

#[test]
fn single_gaussian_matches_hand_evaluation() {
    let k = k16();
    let g = Gaussian {
        position: Vector3::new(0.1, -0.05, 2.5),
        color: [0.9, 0.3, 0.1],
        rotation: Quaternion::new(0.9, 0.2, 0.1, -0.3).normalized(),
        scale: Vector3::new(0.15, 0.08, 0.05),
        opacity: 0.6,
    };
    let mut s = GaussianScene::new();
    s.push(&g);
    let out = render_reference(&s, &Pose::identity(), &k);

    let sigma = crate::geometry::covariance_3d(&g.rotation, &g.scale).unwrap();
    let cov = covariance_2d(&sigma, &Pose::identity(), &k, &g.position).unwrap();
    let inv = cov.try_inverse().unwrap();
    let u = k.cx + k.fx * g.position.x / g.position.z;
    let v = k.cy + k.fy * g.position.y / g.position.z;
    let (px, py) = (9usize, 7usize);
    let d = nalgebra::Vector2::new(px as f64 - u, py as f64 - v);
    let m2 = (d.transpose() * inv * d)[0];
    assert!(m2 < 9.0);
    let a = 0.6 * (-0.5 * m2).exp();
    let got = out.color.pixel(px, py);
    for ch in 0..3 {
        assert!((got[ch] - g.color[ch] * a).abs() < 1e-12);
    }
    assert!((out.depth[py * 16 + px] - 2.5 * a).abs() < 1e-12);
    assert!((out.alpha[py * 16 + px] - a).abs() < 1e-12);
}

#[test]
fn tiled_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let k = Intrinsics::new(40.0, 40.0, 23.5, 19.5, 48, 40).unwrap();
    for _ in 0..5 {
        let s = random_scene(80, &mut rng, &k);
        let a = render(&s, &Pose::identity(), &k);
        let b = render_reference(&s, &Pose::identity(), &k);
        assert!(max_abs(&a.color.data, &b.color.data) < 1e-12);
        assert!(max_abs(&a.depth, &b.depth) < 1e-12);
        assert!(max_abs(&a.alpha, &b.alpha) < 1e-12);
    }
}

#[test]
fn outputs_respect_ranges_and_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let k = k16();
    let s = random_scene(60, &mut rng, &k);
    let out = render(&s, &Pose::identity(), &k);
    for i in 0..k.num_pixels() {
        let a = out.alpha[i];
        assert!((0.0..=1.0).contains(&a));
        assert!(out.depth[i] >= 0.0);
        for ch in 0..3 {
            let c = out.color.data[3 * i + ch];
            assert!((0.0..=1.0).contains(&c));
            assert!(c <= a + 1e-12);
        }
    }
}

#[test]
fn permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let k = k16();
    let s = random_scene(40, &mut rng, &k);
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.reverse();
    idx.swap(3, 17);
    let p = s.subset(&idx);
    let a = render(&s, &Pose::identity(), &k);
    let b = render(&p, &Pose::identity(), &k);
    assert!(max_abs(&a.color.data, &b.color.data) < 1e-12);
}

#[test]
fn transform_then_identity_equals_pose() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let k = k16();
    let s = random_scene(50, &mut rng, &k);
    let a = Pose::new(
        Quaternion::from_axis_angle(&Vector3::new(0.05, -0.03, 0.02)),
        Vector3::new(0.1, -0.05, 0.2),
    );
    let r1 = render(&transform_scene(&s, &a), &Pose::identity(), &k);
    let r2 = render(&s, &a, &k);
    assert!(max_abs(&r1.color.data, &r2.color.data) < 1e-5);
    assert!(max_abs(&r1.depth, &r2.depth) < 1e-5);
}

#[test]
fn zero_cotangent_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let k = k16();
    let s = random_scene(20, &mut rng, &k);
    let out = render(&s, &Pose::identity(), &k);
    let g = render_backward(&s, &Pose::identity(), &k, &out, &vec![0.0; 768], &vec![0.0; 256]).unwrap();
    assert_eq!(g, ParamGrads::zeros(s.len()));
}

#[test]
fn unordered_reduction_agrees_with_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let k = Intrinsics::new(40.0, 40.0, 23.5, 19.5, 48, 40).unwrap();
    let s = random_scene(60, &mut rng, &k);
    let out = render(&s, &Pose::identity(), &k);
    let dc: Vec<f64> = (0..48 * 40 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dd: Vec<f64> = (0..48 * 40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = render_backward_with(&s, &Pose::identity(), &k, &out, &dc, &dd, Reduction::Ordered).unwrap();
    let b = render_backward_with(&s, &Pose::identity(), &k, &out, &dc, &dd, Reduction::Unordered).unwrap();
    let flat = |g: &ParamGrads| -> Vec<f64> {
        g.d_positions.iter().flatten().chain(g.d_log_scales.iter().flatten()).chain(&g.d_logit_opacities).chain(&g.d_pose).copied().collect()
    };
    let (fa, fb) = (flat(&a), flat(&b));
    let scale = fa.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    assert!(max_abs(&fa, &fb) < 1e-12 * scale);
}

#[test]
fn replay_mismatch_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let k = k16();
    let s = random_scene(5, &mut rng, &k);
    let out = render(&s, &Pose::identity(), &k);
    let mut other = s.clone();
    other.colors[0][0] += 0.1;
    let err = render_backward(&other, &Pose::identity(), &k, &out, &vec![0.0; 768], &vec![0.0; 256]);
    assert!(matches!(err, Err(crate::Error::ReplayMismatch)));
    let err = render_backward(&s, &Pose::from_translation(Vector3::x()), &k, &out, &vec![0.0; 768], &vec![0.0; 256]);
    assert!(matches!(err, Err(crate::Error::ReplayMismatch)));
}

#[test]
fn non_contributing_gaussians_have_zero_gradient() {
    let k = k16();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut s = random_scene(10, &mut rng, &k);
    // behind the camera
    s.positions[3] = [0.0, 0.0, -1.0];
    s.logit_opacities[4] = logit(1e-4);
    let out = render(&s, &Pose::identity(), &k);
    let dc: Vec<f64> = out.color.data.iter().map(|c| 2.0 * c).collect();
    let g = render_backward(&s, &Pose::identity(), &k, &out, &dc, &vec![0.0; 256]).unwrap();
    for i in [3, 4] {
        assert_eq!(g.d_positions[i], [0.0; 3]);
        assert_eq!(g.d_logit_opacities[i], 0.0);
    }
    assert!(g.all_finite());
}

/// Loss `Σ color² + w_d Σ depth²` and the renderer's analytic gradients.
fn loss_of(s: &GaussianScene, pose: &Pose, k: &Intrinsics, depth_w: f64) -> (f64, RenderOutput) {
    let out = render(s, pose, k);
    let l = out.color.data.iter().map(|c| c * c).sum::<f64>() + depth_w * out.depth.iter().map(|d| d * d).sum::<f64>();
    (l, out)
}

#[test]
fn gradients_match_finite_differences() {
    let k = k16();
    let pose = Pose::new(
        Quaternion::from_axis_angle(&Vector3::new(0.02, 0.01, -0.03)),
        Vector3::new(0.05, 0.02, -0.1),
    );
    let h = 1e-4;
    let mut checked = 0;
    let mut skipped = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = random_scene(15, &mut rng, &k);
        let depth_w = 0.05;
        let (_, out) = loss_of(&s, &pose, &k, depth_w);
        let sig = out.branch_signature();
        let dc: Vec<f64> = out.color.data.iter().map(|c| 2.0 * c).collect();
        let dd: Vec<f64> = out.depth.iter().map(|d| 2.0 * depth_w * d).collect();
        let g = render_backward(&s, &pose, &k, &out, &dc, &dd).unwrap();

        let mut check = |an: f64, perturb: &dyn Fn(&mut GaussianScene, f64)| {
            let mut p = s.clone();
            perturb(&mut p, h);
            let (lp, op) = loss_of(&p, &pose, &k, depth_w);
            let mut m = s.clone();
            perturb(&mut m, -h);
            let (lm, om) = loss_of(&m, &pose, &k, depth_w);
            if op.branch_signature() != sig || om.branch_signature() != sig {
                skipped += 1;
                return;
            }
            let fd = (lp - lm) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "analytic {an} fd {fd}");
            checked += 1;
        };
        for i in 0..s.len() {
            for c in 0..3 {
                check(g.d_positions[i][c], &|sc, d| sc.positions[i][c] += d);
                check(g.d_colors[i][c], &|sc, d| sc.colors[i][c] += d);
                check(g.d_log_scales[i][c], &|sc, d| sc.log_scales[i][c] += d);
            }
            for c in 0..4 {
                check(g.d_rotations[i][c], &|sc, d| sc.rotations[i][c] += d);
            }
            check(g.d_logit_opacities[i], &|sc, d| sc.logit_opacities[i] += d);
        }

        for c in 0..6 {
            let mut xi = [0.0; 6];
            xi[c] = h;
            let (lp, op) = loss_of(&s, &pose.retract(&xi), &k, depth_w);
            xi[c] = -h;
            let (lm, om) = loss_of(&s, &pose.retract(&xi), &k, depth_w);
            if op.branch_signature() != sig || om.branch_signature() != sig {
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let an = g.d_pose[c];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "pose[{c}] analytic {an} fd {fd}");
            checked += 1;
        }
    }
    assert!(skipped * 10 < checked, "checked {checked}, skipped {skipped}");
}
