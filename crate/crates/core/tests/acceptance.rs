//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line to stderr
//! (uncaptured) and then asserts the same verdict, including its runtime
//! budget. Tests hold a global lock so wall-clock budgets are not inflated by
//! sibling tests sharing the CPU.

use std::f64::consts::{LN_2, PI};
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use defront::augmentation::{calibrate_threshold, decide_epoch, AugmentationDecision, AugmentationPolicy, Defrontalizer};
use defront::config::ExperimentConfig;
use defront::data::GalleryEntry;
use defront::evaluation::{identify_top1, verify_scores, Embeddings};
use defront::geometry::{
    align_frontal, align_profile, alignment_error, default_template, profile_mouth_corner, solve_affine_exact,
    solve_similarity, HalfSide, LandmarkName, LandmarkSet, LandmarkSource, Point2D, ARCFACE_TEMPLATE_112,
};
use defront::image::Image;
use defront::losses::*;
use defront::nets::*;
use defront::pipeline::{self, bench_models, RunDir, DEFRONT_EMBED, EMBED_ONLY};
use defront::training::*;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, checks: &[(&str, bool)], detail: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let in_budget = elapsed <= budget;
    let pass = failed.is_empty() && in_budget;
    let mut line = format!(
        "[{}] {name}: {detail} | {:.1} s of {:.0} s budget",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    if !failed.is_empty() {
        line.push_str(&format!(" | failed: {}", failed.join(", ")));
    }
    if !in_budget {
        line.push_str(" | over budget");
    }
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn cpu() -> Device {
    Device::Cpu
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------- geometry

/// Least-squares similarity in complex form: `dst ≈ a·src + b`.
fn similarity_oracle(src: &[Point2D], dst: &[Point2D]) -> [[f64; 3]; 2] {
    let n = src.len() as f64;
    let (msx, msy) = (src.iter().map(|p| p.x).sum::<f64>() / n, src.iter().map(|p| p.y).sum::<f64>() / n);
    let (mdx, mdy) = (dst.iter().map(|p| p.x).sum::<f64>() / n, dst.iter().map(|p| p.y).sum::<f64>() / n);
    let (mut re, mut im, mut den) = (0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (sx, sy, dx, dy) = (s.x - msx, s.y - msy, d.x - mdx, d.y - mdy);
        re += dx * sx + dy * sy;
        im += dy * sx - dx * sy;
        den += sx * sx + sy * sy;
    }
    let (a, b) = (re / den, im / den);
    [[a, -b, mdx - (a * msx - b * msy)], [b, a, mdy - (b * msx + a * msy)]]
}

fn affine_oracle(src: &[Point2D; 3], dst: &[Point2D; 3]) -> [[f64; 3]; 2] {
    let m = nalgebra::Matrix3::from_fn(|r, c| [src[r].x, src[r].y, 1.0][c]);
    let inv = m.try_inverse().expect("non-collinear");
    let bx = inv * nalgebra::Vector3::new(dst[0].x, dst[1].x, dst[2].x);
    let by = inv * nalgebra::Vector3::new(dst[0].y, dst[1].y, dst[2].y);
    [[bx[0], bx[1], bx[2]], [by[0], by[1], by[2]]]
}

fn max_matrix_diff(a: &[[f64; 3]; 2], b: &[[f64; 3]; 2]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Point2D {
    Point2D::new(rng.random_range(lo..hi), rng.random_range(lo..hi))
}

#[test]
fn geometry_oracles() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut sim_worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let src: Vec<Point2D> = (0..n).map(|_| random_point(&mut rng, -100.0, 200.0)).collect();
        let (s, r) = (rng.random_range(0.2..3.0), rng.random_range(-PI..PI));
        let (tx, ty) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let noise = if n > 2 { rng.random_range(0.0..2.0) } else { 0.0 };
        let dst: Vec<Point2D> = src
            .iter()
            .map(|p| {
                let (sn, cs) = r.sin_cos();
                Point2D::new(
                    s * (cs * p.x - sn * p.y) + tx + noise * rng.random_range(-1.0..1.0),
                    s * (sn * p.x + cs * p.y) + ty + noise * rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let t = solve_similarity(&src, &dst).unwrap();
        sim_worst = sim_worst.max(max_matrix_diff(t.matrix(), &similarity_oracle(&src, &dst)));
    }

    let mut aff_worst = 0.0f64;
    let mut solved = 0;
    while solved < 1000 {
        let src = [0, 1, 2].map(|_| random_point(&mut rng, -100.0, 200.0));
        let area = (src[1].x - src[0].x) * (src[2].y - src[0].y) - (src[2].x - src[0].x) * (src[1].y - src[0].y);
        if area.abs() < 100.0 {
            continue;
        }
        let dst = [0, 1, 2].map(|_| random_point(&mut rng, -100.0, 200.0));
        let t = solve_affine_exact(&src, &dst).unwrap();
        let oracle = affine_oracle(&src, &dst);
        // Relative to the coefficient magnitude: ill-conditioned triangles
        // legitimately produce large entries.
        let scale = oracle.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        aff_worst = aff_worst.max(max_matrix_diff(t.matrix(), &oracle) / scale);
        solved += 1;
    }

    let template = default_template();
    let blank = Image::zeros(160, 160, 3);
    let mut post_worst = 0.0f64;
    for _ in 0..1000 {
        // A frontal reference from jittered template landmarks.
        let (s, r): (f64, f64) = (rng.random_range(0.8..1.4), rng.random_range(-0.3..0.3));
        let (sn, cs) = r.sin_cos();
        let pts = ARCFACE_TEMPLATE_112.map(|p| {
            Point2D::new(
                s * (cs * p.x - sn * p.y) + 10.0 + rng.random_range(-3.0..3.0),
                s * (sn * p.x + cs * p.y) + 10.0 + rng.random_range(-3.0..3.0),
            )
        });
        let frontal = align_frontal(&blank, &LandmarkSet::from_frontal(pts, LandmarkSource::Synthetic), &template)
            .unwrap();

        // A random profile facing either way.
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let nose = random_point(&mut rng, 60.0, 100.0);
        let mouth = Point2D::new(nose.x + dir * rng.random_range(-8.0..8.0), nose.y + rng.random_range(15.0..40.0));
        let ear = Point2D::new(nose.x - dir * rng.random_range(25.0..60.0), nose.y + rng.random_range(-15.0..15.0));
        let mut lms = LandmarkSet::new(LandmarkSource::Synthetic)
            .with(LandmarkName::NoseTop, nose)
            .with(LandmarkName::EarPoint, ear);
        let corner = if rng.random_bool(0.5) { LandmarkName::MouthLeft } else { LandmarkName::MouthRight };
        lms = lms.with(corner, mouth);
        if rng.random_bool(0.3) {
            let other = if corner == LandmarkName::MouthLeft { LandmarkName::MouthRight } else { LandmarkName::MouthLeft };
            lms = lms.with(other, Point2D::new(mouth.x - dir * rng.random_range(2.0..10.0), mouth.y));
        }
        let used = profile_mouth_corner(&lms).unwrap();
        let aligned = align_profile(&blank, &lms, &frontal).unwrap();
        let a = &aligned.landmarks;
        let f = &frontal.landmarks;
        let errs = [
            (a.get(LandmarkName::NoseTop).unwrap().x - 56.0).abs(),
            (a.get(used).unwrap().x - 56.0).abs(),
            (a.get(LandmarkName::NoseTop).unwrap().y - f.get(LandmarkName::NoseTop).unwrap().y).abs(),
            (a.get(used).unwrap().y - f.get(used).unwrap().y).abs(),
            a.get(LandmarkName::EarPoint).unwrap().x.abs(),
        ];
        post_worst = errs.iter().fold(post_worst, |m, e| m.max(*e));
    }

    verdict(
        "geometry oracles",
        &[
            ("similarity vs closed form < 1e-6", sim_worst < 1e-6),
            ("affine vs linear solve < 1e-6", aff_worst < 1e-6),
            ("profile postconditions within 0.5 px", post_worst <= 0.5),
        ],
        &format!("similarity {sim_worst:.2e}, affine {aff_worst:.2e}, profile {post_worst:.2e} px"),
        started,
        Duration::from_secs(10),
    );
}

// ---------------------------------------------------------------- losses

fn pyramid8(x: &Tensor) -> Vec<Tensor> {
    let x4 = x.avg_pool2d(2).unwrap();
    let x2 = x4.avg_pool2d(2).unwrap();
    vec![x2, x4, x.clone()]
}

#[test]
fn loss_identities() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let xs = pyramid8(&x);
    let perceptual = PerceptualNet::new(&FeatureNetConfig::desk(), DType::F64, &cpu()).unwrap();
    let identity = IdentityNet::new(&FeatureNetConfig::desk(), DType::F64, &cpu()).unwrap();
    let red = Reduction::Mean;

    let zeros = [
        scalar(&pixel_loss(&xs, &xs, red).unwrap()),
        scalar(&perceptual_loss(&perceptual, &x, &x, &PERCEPTUAL_LAYER_WEIGHTS, red).unwrap()),
        scalar(&illumination_preserving_loss(&xs, &xs, red).unwrap()),
        scalar(&identity_preserving_loss(&identity, &x, &x, red).unwrap()),
    ];
    let masks: Vec<Tensor> = [2usize, 4, 8]
        .iter()
        .map(|&s| uniform(&mut rng, &[2, 1, s, s], 0.0, 1.0).ge(0.5).unwrap().to_dtype(DType::F64).unwrap())
        .collect();
    let mask_at_gt = scalar(&mask_loss(&masks, &masks).unwrap());

    let half = Tensor::full(0.5f64, (2, 1, 4, 4), &cpu()).unwrap();
    let disc_half = scalar(&adversarial_loss(&half, &half, GeneratorObjective::NonSaturating).unwrap().0);
    let eps = 1e-9;
    let disc_opt = scalar(
        &adversarial_loss(
            &Tensor::full(1.0 - eps, (2, 1, 4, 4), &cpu()).unwrap(),
            &Tensor::full(eps, (2, 1, 4, 4), &cpu()).unwrap(),
            GeneratorObjective::NonSaturating,
        )
        .unwrap()
        .0,
    );
    let half_masks: Vec<Tensor> = masks.iter().map(|m| m.ones_like().unwrap().affine(0.5, 0.0).unwrap()).collect();
    let mask_half = scalar(&mask_loss(&half_masks, &masks).unwrap());
    let offset: Vec<Tensor> = xs.iter().map(|t| t.affine(1.0, 0.5).unwrap()).collect();
    let illum_offset = scalar(&illumination_preserving_loss(&offset, &xs, red).unwrap());

    let weights = LossWeights::default();
    let vals = [0.7, 1.3, 0.2, 2.9, 0.05, 0.4];
    let comps: Vec<Tensor> = vals.iter().map(|v| Tensor::new(*v, &cpu()).unwrap()).collect();
    let c = LossComponents {
        pixel: comps[0].clone(),
        perceptual: comps[1].clone(),
        adversarial: comps[2].clone(),
        illumination: comps[3].clone(),
        identity: comps[4].clone(),
        mask: comps[5].clone(),
    };
    let total = scalar(&total_loss(&weights, &c).unwrap());
    let expected = weights.as_array().iter().zip(vals).fold(0.0, |acc, (w, v)| acc + w * v);
    let all_zero = LossComponents {
        pixel: comps[0].zeros_like().unwrap(),
        perceptual: comps[0].zeros_like().unwrap(),
        adversarial: comps[0].zeros_like().unwrap(),
        illumination: comps[0].zeros_like().unwrap(),
        identity: comps[0].zeros_like().unwrap(),
        mask: comps[0].zeros_like().unwrap(),
    };
    let total_zero = scalar(&total_loss(&weights, &all_zero).unwrap());

    verdict(
        "loss identities",
        &[
            ("pixel/perceptual/illumination/identity vanish at identity", zeros.iter().all(|z| *z == 0.0)),
            ("mask vanishes at identity to clamp tolerance", mask_at_gt.abs() < 3.0 * 1e-6),
            ("adversarial at 0.5 = 2 ln 2", (disc_half - 2.0 * LN_2).abs() < 1e-9),
            ("adversarial at optimum -> 0", disc_opt >= 0.0 && disc_opt < 1e-6),
            ("mask at 0.5 = 3 ln 2", (mask_half - 3.0 * LN_2).abs() < 1e-9),
            ("illumination offset 0.5 = 1.5", (illum_offset - 1.5).abs() < 1e-12),
            ("total is the exact weighted sum", total == expected),
            ("total of zeros is zero", total_zero == 0.0),
        ],
        &format!(
            "adv(0.5) {disc_half:.12}, mask(0.5) {mask_half:.12}, mask(gt) {mask_at_gt:.1e}, total {total} vs {expected}"
        ),
        started,
        Duration::from_secs(5),
    );
}

/// Relative L2 error between the autograd gradient of `f` at `x` and its
/// central finite difference.
fn gradient_error(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let v = Var::from_tensor(x).unwrap();
    let grads = f(v.as_tensor()).backward().unwrap();
    let analytic = flat(&grads.get(v.as_tensor()).expect("input reached"));
    let base = flat(x);
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let mut m = base.clone();
        m[i] -= h;
        let fp = scalar(&f(&Tensor::from_vec(p, x.dims(), &cpu()).unwrap()));
        let fm = scalar(&f(&Tensor::from_vec(m, x.dims(), &cpu()).unwrap()));
        numeric.push((fp - fm) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

#[test]
fn gradient_checks() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let red = Reduction::Mean;
    let perceptual = PerceptualNet::new(&FeatureNetConfig::desk(), DType::F64, &cpu()).unwrap();
    let identity = IdentityNet::new(&FeatureNetConfig::desk(), DType::F64, &cpu()).unwrap();
    let x = uniform(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    let gt = uniform(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
    let gts = pyramid8(&gt);
    let flows: Vec<Tensor> = [2usize, 4, 8]
        .iter()
        .map(|&s| uniform(&mut rng, &[1, 2, s, s], -1.3, 1.3))
        .collect();
    let masks: Vec<Tensor> = [2usize, 4, 8]
        .iter()
        .map(|&s| uniform(&mut rng, &[1, 1, s, s], 0.0, 1.0).ge(0.5).unwrap().to_dtype(DType::F64).unwrap())
        .collect();
    let d_real = uniform(&mut rng, &[1, 1, 4, 4], 0.05, 0.95);
    let d_fake = uniform(&mut rng, &[1, 1, 4, 4], 0.05, 0.95);
    let weights = LossWeights::default();

    let warp_all = |xs: &[Tensor]| -> Vec<Tensor> { xs.iter().zip(&flows).map(|(t, f)| warp(t, f).unwrap()).collect() };
    let masks_of = |x: &Tensor| -> Vec<Tensor> {
        let m = candle_nn::ops::sigmoid(&x.narrow(1, 0, 1).unwrap()).unwrap();
        pyramid8(&m)
    };
    let d_of = |x: &Tensor| -> Tensor {
        candle_nn::ops::sigmoid(&x.mean_keepdim(1).unwrap().avg_pool2d(2).unwrap()).unwrap()
    };
    let components = |x: &Tensor| -> LossComponents {
        let xs = pyramid8(x);
        LossComponents {
            pixel: pixel_loss(&xs, &gts, red).unwrap(),
            perceptual: perceptual_loss(&perceptual, x, &gt, &PERCEPTUAL_LAYER_WEIGHTS, red).unwrap(),
            adversarial: adversarial_loss(&d_real, &d_of(x), GeneratorObjective::NonSaturating).unwrap().1,
            illumination: illumination_preserving_loss(&warp_all(&xs), &gts, red).unwrap(),
            identity: identity_preserving_loss(&identity, x, &gt, red).unwrap(),
            mask: mask_loss(&masks_of(x), &masks).unwrap(),
        }
    };

    let k = 5;
    let w = l2_normalize(&randn(&mut rng, &[k, 6], 1.0)).unwrap();
    let labels = [0usize, 3, 1, 4];
    let emb = randn(&mut rng, &[4, 6], 1.0);
    let margin = MarginConfig {
        scale: 16.0,
        ..MarginConfig::new(k)
    };

    let cases: Vec<(&str, f64)> = vec![
        ("pixel", gradient_error(&x, &|x| pixel_loss(&pyramid8(x), &gts, red).unwrap())),
        (
            "perceptual",
            gradient_error(&x, &|x| perceptual_loss(&perceptual, x, &gt, &PERCEPTUAL_LAYER_WEIGHTS, red).unwrap()),
        ),
        (
            "adversarial (discriminator, real)",
            gradient_error(&d_real, &|d| adversarial_loss(d, &d_fake, GeneratorObjective::NonSaturating).unwrap().0),
        ),
        (
            "adversarial (discriminator, fake)",
            gradient_error(&d_fake, &|d| adversarial_loss(&d_real, d, GeneratorObjective::NonSaturating).unwrap().0),
        ),
        (
            "adversarial (generator, non-saturating)",
            gradient_error(&d_fake, &|d| adversarial_loss(&d_real, d, GeneratorObjective::NonSaturating).unwrap().1),
        ),
        (
            "adversarial (generator, saturating)",
            gradient_error(&d_fake, &|d| adversarial_loss(&d_real, d, GeneratorObjective::Saturating).unwrap().1),
        ),
        (
            "illumination (through warp)",
            gradient_error(&x, &|x| illumination_preserving_loss(&warp_all(&pyramid8(x)), &gts, red).unwrap()),
        ),
        (
            "illumination (flow)",
            gradient_error(&flows[2], &|f| {
                illumination_preserving_loss(&[warp(&x, f).unwrap()], &[gt.clone()], red).unwrap()
            }),
        ),
        ("identity", gradient_error(&x, &|x| identity_preserving_loss(&identity, x, &gt, red).unwrap())),
        ("mask", gradient_error(&x, &|x| mask_loss(&masks_of(x), &masks).unwrap())),
        ("total", gradient_error(&x, &|x| total_loss(&weights, &components(x)).unwrap())),
        (
            "margin (embeddings)",
            gradient_error(&emb, &|e| margin_softmax_loss(&l2_normalize(e).unwrap(), &w, &labels, &margin).unwrap()),
        ),
        (
            "margin (class centers)",
            gradient_error(&w, &|c| {
                margin_softmax_loss(&l2_normalize(&emb).unwrap(), &l2_normalize(c).unwrap(), &labels, &margin).unwrap()
            }),
        ),
    ];
    let worst = cases.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let checks: Vec<(&str, bool)> = cases.iter().map(|(n, e)| (*n, *e < 1e-4)).collect();
    let detail = cases.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(
        "gradient checks",
        &checks,
        &format!("worst {worst:.1e}; {detail}"),
        started,
        Duration::from_secs(60),
    );
}

#[test]
fn margin_properties() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 7;
    let emb = l2_normalize(&randn(&mut rng, &[16, 8], 1.0)).unwrap();
    let w = l2_normalize(&randn(&mut rng, &[k, 8], 1.0)).unwrap();
    let labels: Vec<usize> = (0..16).map(|i| i % k).collect();
    let zero = MarginConfig {
        margin: 0.0,
        ..MarginConfig::new(k)
    };
    let with_margin = scalar(&margin_softmax_loss(&emb, &w, &labels, &zero).unwrap());
    let logits = emb.matmul(&w.t().unwrap()).unwrap().clamp(-1.0, 1.0).unwrap().affine(64.0, 0.0).unwrap();
    let plain = scalar(&cross_entropy(&logits, &labels).unwrap());

    // Unit embedding at angle θ to its class center; a second center at a
    // fixed angle keeps the loss away from underflow.
    let centers = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &cpu()).unwrap();
    let margins = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    let mut loss_monotone = true;
    let mut logit_monotone = true;
    for i in 0..50 {
        let theta = PI * i as f64 / 49.0;
        let e = Tensor::new(&[[theta.cos(), theta.sin()]], &cpu()).unwrap();
        let mut prev: Option<(f64, f64)> = None;
        for &m in &margins {
            let cfg = MarginConfig {
                scale: 64.0,
                margin: m,
                num_classes: 2,
            };
            let loss = scalar(&margin_softmax_loss(&e, &centers, &[0], &cfg).unwrap());
            let logit = margin_logits(&e, &centers, &[0], &cfg).unwrap().get(0).unwrap().get(0).unwrap();
            let logit = scalar(&logit);
            if let Some((pl, pz)) = prev {
                // Losses below 1e-12 underflow the softmax and tie.
                loss_monotone &= loss > pl || (loss >= pl && pl < 1e-12);
                logit_monotone &= logit < pz;
            }
            prev = Some((loss, logit));
        }
    }
    verdict(
        "margin properties",
        &[
            ("m = 0 equals scaled softmax exactly", with_margin == plain),
            ("loss increases with m on 50 angles", loss_monotone),
            ("target logit decreases with m on 50 angles", logit_monotone),
        ],
        &format!("m=0 loss {with_margin} vs softmax {plain}"),
        started,
        Duration::from_secs(5),
    );
}

// ---------------------------------------------------------------- augmentation

#[test]
fn augmentation_statistics() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let template = default_template();
    // 10^4 landmark sets: random similarity placements of the template with
    // per-image landmark noise of varying strength.
    let errors: Vec<f64> = (0..10_000)
        .map(|_| {
            let (s, r): (f64, f64) = (rng.random_range(0.6..1.6), rng.random_range(-0.5..0.5));
            let (sn, cs) = r.sin_cos();
            let noise = rng.random_range(0.0..6.0);
            let pts = ARCFACE_TEMPLATE_112.map(|p| {
                Point2D::new(
                    s * (cs * p.x - sn * p.y) + 20.0 + noise * rng.random_range(-1.0..1.0),
                    s * (sn * p.x + cs * p.y) + 20.0 + noise * rng.random_range(-1.0..1.0),
                )
            });
            alignment_error(&LandmarkSet::from_frontal(pts, LandmarkSource::Synthetic), &template).unwrap()
        })
        .collect();

    let mut checks = Vec::new();
    let mut details = Vec::new();
    for p in [1.0, 0.5] {
        let threshold = calibrate_threshold(&errors, 0.2, p).unwrap();
        let policy = AugmentationPolicy {
            error_threshold: Some(threshold),
            apply_probability: p,
            target_fraction: 0.2,
            rng_seed: 11,
        };
        let (mut applied, mut left, mut gate_violations) = (0usize, 0usize, 0usize);
        for (e, d) in errors.iter().zip(decide_epoch(&errors, &policy, 0).unwrap()) {
            if let AugmentationDecision::Defrontalize(side) = d {
                applied += 1;
                left += usize::from(side == HalfSide::Left);
                if *e >= threshold {
                    gate_violations += 1;
                }
            }
        }
        let realized = applied as f64 / errors.len() as f64;
        let split = left as f64 / applied.max(1) as f64;
        checks.push((realized - 0.2).abs() <= 0.02);
        checks.push((split - 0.5).abs() <= 0.02);
        checks.push(gate_violations == 0);
        details.push(format!(
            "p={p}: threshold {threshold:.3}, realized {realized:.4}, left share {split:.4}, gate violations {gate_violations}"
        ));
    }
    verdict(
        "augmentation statistics",
        &[
            ("p=1 realized 0.20 +- 0.02", checks[0]),
            ("p=1 side split 0.50 +- 0.02", checks[1]),
            ("p=1 gate never fires above threshold", checks[2]),
            ("p=0.5 realized 0.20 +- 0.02", checks[3]),
            ("p=0.5 side split 0.50 +- 0.02", checks[4]),
            ("p=0.5 gate never fires above threshold", checks[5]),
        ],
        &details.join("; "),
        started,
        Duration::from_secs(30),
    );
}

// ---------------------------------------------------------------- warp

/// Per-pixel bilinear sampling with edge clamping, written independently of
/// the tensor operator.
fn warp_oracle(img: &[f64], flow: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let at = |ch: usize, y: usize, x: usize| img[(ch * h + y) * w + x];
    let mut out = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let sx = (j as f64 + flow[i * w + j]).clamp(0.0, (w - 1) as f64);
            let sy = (i as f64 + flow[h * w + i * w + j]).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                out[(ch * h + i) * w + j] = (1.0 - ay) * ((1.0 - ax) * at(ch, y0, x0) + ax * at(ch, y0, x1))
                    + ay * ((1.0 - ax) * at(ch, y1, x0) + ax * at(ch, y1, x1));
            }
        }
    }
    out
}

#[test]
fn warp_operator() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = uniform(&mut rng, &[2, 3, 16, 16], -1.0, 1.0);
    let zero = Tensor::zeros((2, 2, 16, 16), DType::F64, &cpu()).unwrap();
    let identity_exact = flat(&warp(&x, &zero).unwrap()) == flat(&x);

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = [4usize, 8, 16, 28][rng.random_range(0..4)];
        let c = rng.random_range(1..=3);
        let img = uniform(&mut rng, &[1, c, s, s], -1.0, 1.0);
        let reach = rng.random_range(0.1..(s as f64));
        let flow = uniform(&mut rng, &[1, 2, s, s], -reach, reach);
        let got = flat(&warp(&img, &flow).unwrap());
        let want = warp_oracle(&flat(&img), &flat(&flow), c, s, s);
        worst = got.iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    verdict(
        "warp operator",
        &[("zero flow is exact identity", identity_exact), ("matches bilinear oracle < 1e-6", worst < 1e-6)],
        &format!("worst deviation {worst:.2e} over 100 random flows"),
        started,
        Duration::from_secs(10),
    );
}

// ---------------------------------------------------------------- accumulation

#[test]
fn gradient_accumulation() {
    let _g = serial();
    let started = Instant::now();
    let cfg = BackboneConfig {
        width: 4,
        blocks: vec![1],
        stem_stride: 2,
        embedding_dim: 16,
        input_size: 16,
    };
    let k = 10;
    let model = EmbedModel::new(&cfg, k, DType::F64, &cpu(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, &[1024, 3, 16, 16], -1.0, 1.0);
    let labels: Vec<usize> = (0..1024).map(|_| rng.random_range(0..k)).collect();
    let margin = MarginConfig {
        scale: 16.0,
        ..MarginConfig::new(k)
    };
    let (full, full_loss) =
        accumulated_gradients(&model, &[(x.clone(), labels.clone())], &margin, Mode::Eval).unwrap();
    let micro: Vec<(Tensor, Vec<usize>)> = (0..32)
        .map(|i| (x.narrow(0, i * 32, 32).unwrap(), labels[i * 32..(i + 1) * 32].to_vec()))
        .collect();
    let (acc, acc_loss) = accumulated_gradients(&model, &micro, &margin, Mode::Eval).unwrap();

    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (name, g) in &full {
        let a = flat(g);
        let b = flat(&acc[name]);
        diff += a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        norm += a.iter().map(|p| p * p).sum::<f64>();
    }
    let rel = (diff / norm).sqrt();
    verdict(
        "gradient accumulation",
        &[
            ("same parameter set", full.len() == acc.len() && full.keys().all(|k| acc.contains_key(k))),
            ("32x32 equals 1024 relative error < 1e-5", rel < 1e-5),
            ("losses agree", (full_loss - acc_loss).abs() < 1e-9 * full_loss.abs().max(1.0)),
        ],
        &format!("relative gradient error {rel:.2e} over {} tensors, loss {full_loss:.6} vs {acc_loss:.6}", full.len()),
        started,
        Duration::from_secs(60),
    );
}

// ---------------------------------------------------------------- end to end

#[test]
fn desk_end_to_end() {
    let _g = serial();
    let started = Instant::now();
    let root = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("desk_end_to_end");
    let _ = std::fs::remove_dir_all(&root);
    let run = RunDir::new(&root);
    let cfg = ExperimentConfig::desk();
    let device = cpu();

    pipeline::synth(&cfg, &run).unwrap();
    pipeline::align(&cfg, &run).unwrap();
    let calibration = pipeline::calibrate(&cfg, &run).unwrap();
    let defront = pipeline::train_defront(&cfg, &run, &device).unwrap();
    let embed = pipeline::train_embed(&cfg, &run, &device).unwrap();
    let eval = pipeline::evaluate(&cfg, &run, &device).unwrap();

    let flow_drop = 1.0 - defront.flows.final_photometric / defront.flows.initial_photometric;
    let pixel_drop = 1.0 - defront.defront.final_pixel / defront.defront.initial_pixel;
    let acc = eval.verification.mean_accuracy;
    let acc90 = eval.verification_by_yaw.get(&90).map(|v| v.mean_accuracy).unwrap_or(0.0);
    let augmented: Vec<String> = embed.epochs.iter().map(|e| format!("{:.2}", e.augmented_fraction)).collect();
    verdict(
        "desk end-to-end",
        &[
            ("flow photometric loss drops >= 30%", flow_drop >= 0.30),
            ("pixel loss drops >= 50% within 3 epochs", defront.defront.epochs <= 3 && pixel_drop >= 0.50),
            ("augmentation was active", calibration.threshold > 0.0 && embed.epochs.iter().all(|e| e.augmented_fraction > 0.0)),
            ("verification accuracy >= 0.60", acc >= 0.60),
            ("90-degree verification above chance", acc90 > 0.5),
        ],
        &format!(
            "flow photometric {:.4} -> {:.4} ({:.1}%), pixel {:.4} -> {:.4} ({:.1}%), augmented per epoch [{}], \
             verification {acc:.4}, 90-degree {acc90:.4}, identification average {:.4}",
            defront.flows.initial_photometric,
            defront.flows.final_photometric,
            100.0 * flow_drop,
            defront.defront.initial_pixel,
            defront.defront.final_pixel,
            100.0 * pixel_drop,
            augmented.join(", "),
            eval.identification.average,
        ),
        started,
        Duration::from_secs(2 * 3600),
    );
}

// ---------------------------------------------------------------- evaluation

#[test]
fn evaluation_oracles() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let n = 6000;
    let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let separated: Vec<f64> = same.iter().map(|s| if *s { 1.0 } else { -1.0 }).collect();
    let sep = verify_scores(&separated, &same).unwrap().mean_accuracy;
    let random_scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    // Labels permuted within each fold: folds stay balanced, as the
    // protocol lays them out, and scores carry no information.
    let mut shuffled = same.clone();
    use rand::seq::SliceRandom;
    for fold in shuffled.chunks_mut(n / 10) {
        fold.shuffle(&mut rng);
    }
    let shuf = verify_scores(&random_scores, &shuffled).unwrap().mean_accuracy;

    // Identification: 137 identities, 50 probes each at 90 degrees.
    let ids = 137;
    let per = 50;
    let dim = 64;
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let mut emb = Embeddings::new();
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut twins = Vec::new();
    for i in 0..ids {
        let g = std::path::PathBuf::from(format!("g{i}"));
        emb.insert(g.clone(), unit(&mut rng));
        gallery.push(GalleryEntry {
            id: format!("id{i}"),
            path: g.clone(),
            yaw_deg: 0,
        });
        twins.push(GalleryEntry {
            id: format!("id{i}"),
            path: g,
            yaw_deg: 90,
        });
        for k in 0..per {
            let p = std::path::PathBuf::from(format!("p{i}_{k}"));
            emb.insert(p.clone(), unit(&mut rng));
            probes.push(GalleryEntry {
                id: format!("id{i}"),
                path: p,
                yaw_deg: 90,
            });
        }
    }
    let identical = identify_top1(&gallery, &twins, &emb).unwrap().average;
    let random = identify_top1(&gallery, &probes, &emb).unwrap().average;
    let chance = 1.0 / ids as f64;
    let sigma = (chance * (1.0 - chance) / probes.len() as f64).sqrt();
    verdict(
        "evaluation oracles",
        &[
            ("separable scores give 1.0", sep == 1.0),
            ("shuffled labels give 0.5 +- 0.02", (shuf - 0.5).abs() <= 0.02),
            ("gallery == probe gives 1.0", identical == 1.0),
            ("random embeddings near 1/137 (99.9% binomial band)", (random - chance).abs() <= 3.29 * sigma),
        ],
        &format!(
            "separable {sep}, shuffled {shuf:.4}, identical {identical}, random {random:.5} vs 1/137 = {chance:.5} (sigma {sigma:.5})"
        ),
        started,
        Duration::from_secs(30),
    );
}

// ---------------------------------------------------------------- benchmark

#[test]
fn benchmark_ordering() {
    let _g = serial();
    let started = Instant::now();
    let net = NetConfig::desk();
    let embed = EmbedModel::new(&net.backbone, 8, DType::F32, &cpu(), 1).unwrap();
    let defront = Defrontalizer::new(DefrontModel::new(&net, DType::F32, &cpu(), 2).unwrap());
    let pts = ARCFACE_TEMPLATE_112;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f32> = (0..112 * 112 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = Image::from_vec(112, 112, 3, data).unwrap();
    let face = FaceSample {
        path: "bench.png".into(),
        label: 0,
        face: align_frontal(&img, &LandmarkSet::from_frontal(pts, LandmarkSource::Synthetic), &default_template())
            .unwrap(),
        error: 0.0,
    };
    let mut ordered = true;
    let mut ratios = Vec::new();
    for _ in 0..2 {
        let r = bench_models(&face, &embed, &defront, 10, 100, "cpu").unwrap();
        let e = r.pipelines.iter().find(|p| p.name == EMBED_ONLY).unwrap();
        let d = r.pipelines.iter().find(|p| p.name == DEFRONT_EMBED).unwrap();
        ordered &= d.mean_ms > e.mean_ms && e.mean_ms > 0.0 && e.std_ms.is_finite();
        ratios.push(format!("{:.2} ms vs {:.2} ms (x{:.2})", d.mean_ms, e.mean_ms, r.ratio(DEFRONT_EMBED, EMBED_ONLY).unwrap()));
    }
    verdict(
        "benchmark ordering",
        &[("defront+embed slower than embed on every run", ordered)],
        &ratios.join("; "),
        started,
        Duration::from_secs(60),
    );
}

// ---------------------------------------------------------------- audit

#[test]
fn frozen_model_audit() {
    let _g = serial();
    let started = Instant::now();
    let net = NetConfig::desk();
    let model = DefrontModel::new(&net, DType::F32, &cpu(), 3).unwrap();
    let snapshot = |m: &DefrontModel| {
        Checkpoint::new("audit", 0, "")
            .with_store(DefrontModel::FLOW_SECTION, &m.flow_store)
            .with_store(DefrontModel::GEN_SECTION, &m.gen_store)
            .to_bytes()
            .unwrap()
    };
    let before = snapshot(&model);
    let defront = Defrontalizer::new(model);

    // Tiny faces set: every face is eligible and most are augmented.
    let template = default_template();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let faces: Vec<FaceSample> = (0..32)
        .map(|i| {
            let data: Vec<f32> = (0..112 * 112 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let img = Image::from_vec(112, 112, 3, data).unwrap();
            let lms = LandmarkSet::from_frontal(ARCFACE_TEMPLATE_112, LandmarkSource::Synthetic);
            FaceSample {
                path: format!("face{i}.png").into(),
                label: i % 4,
                face: align_frontal(&img, &lms, &template).unwrap(),
                error: 0.1,
            }
        })
        .collect();
    let policy = AugmentationPolicy {
        error_threshold: Some(1.0),
        apply_probability: 1.0,
        target_fraction: 0.2,
        rng_seed: 0,
    };
    let cfg = EmbedTrainConfig {
        epochs: 1,
        batch_size: 8,
        accumulation_steps: 2,
        margin_scale: 16.0,
        policy,
        ..EmbedTrainConfig::default()
    };
    let backbone = BackboneConfig {
        width: 4,
        blocks: vec![1, 1],
        stem_stride: 4,
        embedding_dim: 16,
        input_size: 112,
    };
    let result = train_embeddings(
        &faces,
        &cfg,
        &backbone,
        &defront,
        &["held_out.png".into()],
        DType::F32,
        &cpu(),
        &mut MetricsLog::in_memory(),
    )
    .unwrap();
    let after = snapshot(defront.model().unwrap());
    let augmented = result.epochs[0].augmented_fraction;

    let full = flow_param_count(&NetConfig::full().flow).unwrap();
    let ratio = full as f64 / FLOW_PARAM_BUDGET as f64;
    verdict(
        "frozen model audit",
        &[
            ("augmentation exercised the model", augmented > 0.0),
            ("defrontalization weights byte-identical", before == after),
            ("full-preset flow parameters within 20% of budget", (0.8..=1.2).contains(&ratio)),
        ],
        &format!(
            "augmented fraction {augmented:.2}, checkpoint {} bytes unchanged: {}, full flow net {full} params ({:.1}% of budget)",
            before.len(),
            before == after,
            100.0 * ratio
        ),
        started,
        Duration::from_secs(60),
    );
}
