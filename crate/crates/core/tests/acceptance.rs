//! Acceptance suite. Each test covers one criterion at its stated tolerance
//! and prints a `ACCEPT <nn> <name>: PASS` line (visible with --nocapture).
//!
//! The training-based criteria (08-10) run miniature experiments sized for a
//! laptop; the numeric criteria pin exact tolerances.

mod common;

use std::time::Instant;

use ndarray::{s, Array2};
use rand::Rng;

use worldrep::datagen::{self, AtlantisPolicy, Condition};
use worldrep::eval::{self, MetricKind};
use worldrep::model::{next_token_loss_value, Gradients, Model, ModelConfig};
use worldrep::repr;
use worldrep::rng;
use worldrep::tasks::{self, Answer, CompassDir, Point, TaskKind};
use worldrep::tokenizer::Tokenizer;
use worldrep::trainer::{self, TrainConfig, TrainSession};

/// Exact reference implementations, independent of the production routes.
mod oracle {
    use super::*;

    pub fn isqrt(n: u128) -> u128 {
        if n == 0 {
            return 0;
        }
        let mut x = (n as f64).sqrt() as u128;
        while x > 0 && x * x > n {
            x -= 1;
        }
        while (x + 1) * (x + 1) <= n {
            x += 1;
        }
        x
    }

    /// round(sqrt(d2)) with exact integer arithmetic: the half boundary
    /// r + 0.5 is crossed exactly when 4*d2 >= (2r+1)^2.
    pub fn distance(a: Point, b: Point) -> i64 {
        let dx = (a.x - b.x) as i128;
        let dy = (a.y - b.y) as i128;
        let d2 = (dx * dx + dy * dy) as u128;
        let r = isqrt(d2);
        if 4 * d2 >= (2 * r + 1) * (2 * r + 1) {
            (r + 1) as i64
        } else {
            r as i64
        }
    }

    /// Shoelace with the three-term expansion (the implementation anchors
    /// at vertex a instead).
    pub fn tri_area(a: Point, b: Point, c: Point) -> i64 {
        let twice = (a.x as i128 * (b.y - c.y) as i128
            + b.x as i128 * (c.y - a.y) as i128
            + c.x as i128 * (a.y - b.y) as i128)
            .unsigned_abs();
        ((twice + 1) / 2) as i64
    }

    /// atan2 of (|cross|, dot): a different formula from the production
    /// acos(normalized dot), same rounding rule.
    pub fn angle(a: Point, b: Point, c: Point) -> i64 {
        let ux = (a.x - b.x) as f64;
        let uy = (a.y - b.y) as f64;
        let vx = (c.x - b.x) as f64;
        let vy = (c.y - b.y) as f64;
        let cross = (ux * vy - uy * vx).abs();
        let dot = ux * vx + uy * vy;
        cross.atan2(dot).to_degrees().round() as i64
    }

    /// f64 bearing sectors (the implementation uses exact integer
    /// comparisons on the squared direction).
    pub fn compass(a: Point, b: Point) -> CompassDir {
        let dx = (b.x - a.x) as f64;
        let dy = (b.y - a.y) as f64;
        let bearing = dx.atan2(dy).to_degrees().rem_euclid(360.0);
        let k = ((bearing + 22.5).rem_euclid(360.0) / 45.0).floor() as usize % 8;
        CompassDir::ALL[k]
    }

    fn orient(a: Point, b: Point, c: Point) -> i128 {
        ((b.x - a.x) as i128 * (c.y - a.y) as i128
            - (b.y - a.y) as i128 * (c.x - a.x) as i128)
            .signum()
    }

    fn on_segment(a: Point, b: Point, p: Point) -> bool {
        orient(a, b, p) == 0
            && p.x >= a.x.min(b.x)
            && p.x <= a.x.max(b.x)
            && p.y >= a.y.min(b.y)
            && p.y <= a.y.max(b.y)
    }

    fn in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
        if orient(a, b, c) == 0 {
            return on_segment(a, b, p) || on_segment(b, c, p) || on_segment(c, a, p);
        }
        let o1 = orient(a, b, p);
        let o2 = orient(b, c, p);
        let o3 = orient(c, a, p);
        (o1 >= 0 && o2 >= 0 && o3 >= 0) || (o1 <= 0 && o2 <= 0 && o3 <= 0)
    }

    /// Caratheodory: p is in the hull iff it lies in some triangle (possibly
    /// degenerate) over the points. Independent of the monotone-chain route.
    pub fn inside(p: Point, pts: &[Point]) -> bool {
        let n = pts.len();
        (0..n).any(|i| {
            (i + 1..n).any(|j| (j + 1..n).any(|k| in_triangle(p, pts[i], pts[j], pts[k])))
        })
    }

    /// Edge lengths via scaled integer square roots (12 fractional decimal
    /// digits), summed exactly, rounded once.
    pub fn perimeter(pts: &[Point]) -> i64 {
        const SCALE: u128 = 1_000_000_000_000;
        let mut sum: u128 = 0;
        for i in 0..pts.len() {
            let a = pts[i];
            let b = pts[(i + 1) % pts.len()];
            let dx = (a.x - b.x) as i128;
            let dy = (a.y - b.y) as i128;
            let d2 = (dx * dx + dy * dy) as u128;
            sum += isqrt(d2 * SCALE * SCALE);
        }
        ((sum + SCALE / 2) / SCALE) as i64
    }

    /// Parametric solve over exact integer fractions (the implementation
    /// uses the four-orientation method).
    pub fn crossing(a: Point, b: Point, c: Point, d: Point) -> bool {
        if a == b && c == d {
            return a == c;
        }
        if a == b {
            return orient(c, d, a) == 0 && on_segment(c, d, a);
        }
        if c == d {
            return orient(a, b, c) == 0 && on_segment(a, b, c);
        }
        let r = ((b.x - a.x) as i128, (b.y - a.y) as i128);
        let s_ = ((d.x - c.x) as i128, (d.y - c.y) as i128);
        let qp = ((c.x - a.x) as i128, (c.y - a.y) as i128);
        let den = r.0 * s_.1 - r.1 * s_.0;
        let t_num = qp.0 * s_.1 - qp.1 * s_.0;
        let u_num = qp.0 * r.1 - qp.1 * r.0;
        if den != 0 {
            // t = t_num/den and u = u_num/den must both lie in [0, 1]
            let in_unit = |num: i128, den: i128| -> bool {
                let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
                num >= 0 && num <= den
            };
            return in_unit(t_num, den) && in_unit(u_num, den);
        }
        if u_num != 0 {
            return false; // parallel, not collinear
        }
        // collinear: interval overlap componentwise
        let overlap = |a0: i64, a1: i64, b0: i64, b1: i64| -> bool {
            a0.max(b0).max(a0.min(a1).max(b0.min(b1))) <= a1.max(a0).min(b1.max(b0))
        };
        let ox = overlap(a.x, b.x, c.x, d.x);
        let oy = overlap(a.y, b.y, c.y, d.y);
        ox && oy
    }
}

fn rand_point(r: &mut impl Rng) -> Point {
    Point {
        x: r.random_range(-1800..=1800),
        y: r.random_range(-900..=900),
    }
}

#[test]
fn accept_01_geometry_oracle_equivalence() {
    let started = Instant::now();
    const N: usize = 10_000;
    for task in TaskKind::ALL {
        let mut mismatches = 0usize;
        for i in 0..N {
            let mut r = rng::stream(7, &format!("accept1/{}", task.name()), i as u64);
            match task {
                TaskKind::Distance => {
                    let (a, b) = (rand_point(&mut r), rand_point(&mut r));
                    if tasks::distance(a, b) != oracle::distance(a, b) {
                        mismatches += 1;
                    }
                }
                TaskKind::TriArea => {
                    let (a, b, c) = (rand_point(&mut r), rand_point(&mut r), rand_point(&mut r));
                    if tasks::tri_area(a, b, c) != oracle::tri_area(a, b, c) {
                        mismatches += 1;
                    }
                }
                TaskKind::Angle => {
                    let (a, b, c) = loop {
                        let (a, b, c) =
                            (rand_point(&mut r), rand_point(&mut r), rand_point(&mut r));
                        if b != a && b != c {
                            break (a, b, c);
                        }
                    };
                    if tasks::angle(a, b, c).unwrap() != oracle::angle(a, b, c) {
                        mismatches += 1;
                    }
                }
                TaskKind::Compass => {
                    let (a, b) = loop {
                        let (a, b) = (rand_point(&mut r), rand_point(&mut r));
                        if a != b {
                            break (a, b);
                        }
                    };
                    if tasks::compass(a, b).unwrap() != oracle::compass(a, b) {
                        mismatches += 1;
                    }
                }
                TaskKind::Inside => {
                    let n = r.random_range(3..=6usize);
                    let hull: Vec<Point> = (0..n).map(|_| rand_point(&mut r)).collect();
                    let p = rand_point(&mut r);
                    if tasks::inside(p, &hull).unwrap() != oracle::inside(p, &hull) {
                        mismatches += 1;
                    }
                }
                TaskKind::Perimeter => {
                    let n = r.random_range(3..=5usize);
                    let pts: Vec<Point> = (0..n).map(|_| rand_point(&mut r)).collect();
                    if tasks::perimeter(&pts).unwrap() != oracle::perimeter(&pts) {
                        mismatches += 1;
                    }
                }
                TaskKind::Crossing => {
                    let (a, b, c, d) = (
                        rand_point(&mut r),
                        rand_point(&mut r),
                        rand_point(&mut r),
                        rand_point(&mut r),
                    );
                    if tasks::crossing(a, b, c, d) != oracle::crossing(a, b, c, d) {
                        mismatches += 1;
                    }
                }
            }
        }
        assert_eq!(mismatches, 0, "{}: {mismatches} oracle mismatches", task.name());
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "oracle pass took {elapsed:?}");
    println!(
        "ACCEPT 01 geometry-oracle: PASS ({} tuples, 0 mismatches, {:.1}s)",
        7 * N,
        elapsed.as_secs_f64()
    );
}

#[test]
fn accept_02_grammar_round_trip() {
    assert_eq!(
        tasks::render_example(TaskKind::Distance, &[865, 4879], Answer::Num(769)).unwrap(),
        "dist(c_0865,c_4879)=769"
    );
    assert_eq!(
        tasks::render_example(TaskKind::Crossing, &[2345, 6789, 123, 4567], Answer::Flag(true))
            .unwrap(),
        "cross(c_2345,c_6789;c_0123,c_4567)=TRUE"
    );
    const N: usize = 10_000;
    for task in TaskKind::ALL {
        let mut r = rng::stream(11, &format!("accept2/{}", task.name()), 0);
        for _ in 0..N {
            let n = match task {
                TaskKind::Distance | TaskKind::Compass => 2,
                TaskKind::TriArea | TaskKind::Angle => 3,
                TaskKind::Crossing => 4,
                TaskKind::Inside => 1 + r.random_range(3..=6),
                TaskKind::Perimeter => r.random_range(3..=5),
            };
            let ids: Vec<u16> = (0..n).map(|_| r.random_range(0..10000)).collect();
            let answer = match task {
                TaskKind::Compass => Answer::Dir(CompassDir::ALL[r.random_range(0..8)]),
                TaskKind::Inside | TaskKind::Crossing => Answer::Flag(r.random_bool(0.5)),
                _ => Answer::Num(r.random_range(0..10_000_000)),
            };
            let text = tasks::render_example(task, &ids, answer).unwrap();
            let parsed = tasks::parse_example(&text).unwrap();
            assert_eq!(parsed.kind, task);
            assert_eq!(parsed.ids, ids);
            assert_eq!(parsed.answer, Some(answer));
        }
    }
    println!("ACCEPT 02 grammar-round-trip: PASS ({} examples)", 7 * N);
}

#[test]
fn accept_03_tokenizer_round_trip_on_dataset() {
    let world = common::fixture_world(120, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    datagen::sample_pretrain(&world, &TaskKind::ALL, 1429, 5, AtlantisPolicy::Exclude, &path)
        .unwrap();
    let lines = datagen::read_lines(&path).unwrap();
    assert!(lines.len() >= 10_000);
    let tok = Tokenizer::new();
    for line in &lines {
        let ids = tok.encode(line).unwrap();
        assert_eq!(ids.len(), line.chars().count() + 2);
        assert_eq!(tok.decode(&ids).unwrap(), *line);
    }
    println!("ACCEPT 03 tokenizer: PASS ({} dataset lines)", lines.len());
}

#[test]
fn accept_04_model_numerics() {
    // (a) finite-difference gradient check on a tiny config, in f64
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        layers: 1,
        intermediate: 16,
        vocab: 12,
        max_seq: 8,
        init_std: 0.1,
        rope_theta: 10_000.0,
        rms_eps: 1e-6,
    };
    let model: Model<f64> = Model::new(cfg.clone(), 3).unwrap();
    let mut r = rng::stream(4, "accept4/tokens", 0);
    let tokens = Array2::from_shape_fn((2, 6), |_| r.random_range(0u32..12));
    let mut grads = Gradients::zeros(&cfg);
    model.loss_and_grad(&tokens, &mut grads).unwrap();
    let mut scratch: Model<f64> = Model::new(cfg.clone(), 3).unwrap();
    let eps = 1e-5;
    let mut max_rel = 0.0f64;
    let names: Vec<String> = model.params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let len = model.params.named_tensors()[ti].1.len();
        let mut rr = rng::stream(5, &format!("accept4/{name}"), 0);
        for _ in 0..4 {
            let idx = rr.random_range(0..len);
            let orig = model.params.named_tensors()[ti].1.as_slice().unwrap()[idx];
            let analytic = grads.named_tensors()[ti].1.as_slice().unwrap()[idx];
            let mut eval_at = |v: f64| -> f64 {
                scratch.params.named_tensors_mut()[ti].1.as_slice_mut().unwrap()[idx] = v;
                let f = scratch.forward(&tokens, &[]).unwrap();
                next_token_loss_value(&f.logits, &tokens).unwrap()
            };
            let fd = (eval_at(orig + eps) - eval_at(orig - eps)) / (2.0 * eps);
            eval_at(orig);
            // denominator floored at the finite-difference noise level
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    assert!(max_rel <= 1e-3, "gradient check max rel err {max_rel}");

    // (b) random-init loss near ln(101): the logit variance contributes about
    // hidden * init_std^2 / 2, so a 32-wide config keeps it inside +-0.2
    let cfg32 = ModelConfig {
        hidden: 32,
        heads: 4,
        layers: 2,
        intermediate: 64,
        vocab: 101,
        max_seq: 40,
        init_std: 0.1,
        rope_theta: 10_000.0,
        rms_eps: 1e-6,
    };
    let m32: Model<f32> = Model::new(cfg32.clone(), 11).unwrap();
    let mut r = rng::stream(4, "accept4/loss_tokens", 0);
    let tokens = Array2::from_shape_fn((8, 24), |_| r.random_range(0u32..98));
    let fwd = m32.forward(&tokens, &[]).unwrap();
    let loss = next_token_loss_value(&fwd.logits, &tokens).unwrap();
    assert!(
        (loss - (101f64).ln()).abs() <= 0.2,
        "init loss {loss} vs ln(101) = {:.4}",
        (101f64).ln()
    );

    // (c) causality on 100 random prompts: bit-identical prefix logits
    for trial in 0..100 {
        let mut r = rng::stream(6, "accept4/causal", trial);
        let t_len = r.random_range(4..32usize);
        let tokens = Array2::from_shape_fn((1, t_len), |_| r.random_range(0u32..101));
        let t_edit = r.random_range(1..t_len);
        let mut edited = tokens.clone();
        edited[[0, t_edit]] = (edited[[0, t_edit]] + 1 + r.random_range(0u32..99)) % 101;
        let base = m32.forward(&tokens, &[]).unwrap().logits;
        let out = m32.forward(&edited, &[]).unwrap().logits;
        for i in 0..t_edit {
            assert_eq!(
                base.slice(s![0, i, ..]),
                out.slice(s![0, i, ..]),
                "trial {trial}: logits at {i} changed by edit at {t_edit}"
            );
        }
    }
    println!(
        "ACCEPT 04 model-numerics: PASS (gradcheck rel err {max_rel:.2e}, init loss {loss:.3}, 100 causality prompts)"
    );
}

#[test]
fn accept_05_ni_formulas() {
    let ni = eval::normalized_improvement(100.0, 1000.0, 10.0, MetricKind::AbsError).unwrap();
    assert!((ni - 0.5).abs() < 1e-15, "NI(100;1000,10) = {ni}");
    for (ba, bs) in [(1000.0, 10.0), (500.0, 2.0), (77.0, 3.5)] {
        let at_atl = eval::normalized_improvement(ba, ba, bs, MetricKind::AbsError).unwrap();
        let at_std = eval::normalized_improvement(bs, ba, bs, MetricKind::AbsError).unwrap();
        assert!(at_atl.abs() <= 1e-12, "error-kind NI at atlantis baseline: {at_atl}");
        assert!((at_std - 1.0).abs() <= 1e-12, "error-kind NI at standard baseline: {at_std}");
    }
    for (ba, bs) in [(0.125, 0.9), (0.01, 0.99), (0.3, 0.65)] {
        let at_atl = eval::normalized_improvement(ba, ba, bs, MetricKind::Accuracy).unwrap();
        let at_std = eval::normalized_improvement(bs, ba, bs, MetricKind::Accuracy).unwrap();
        assert!(at_atl.abs() <= 1e-12);
        assert!((at_std - 1.0).abs() <= 1e-12);
    }
    println!("ACCEPT 05 ni-formulas: PASS (0.5 exact, endpoints to 1e-12)");
}

#[test]
fn accept_06_cka_properties() {
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let (n, d) = (500usize, 64usize);
    let mut identity_worst = 0.0f64;
    let mut invariance_worst = 0.0f64;
    let mut shear_moved = 0usize;
    const TRIALS: u64 = 20;
    for trial in 0..TRIALS {
        let mut r = rng::stream(12, "accept6/x", trial);
        let x = Array2::<f32>::from_shape_fn((n, d), |_| normal.sample(&mut r) as f32);

        let v = repr::cka_raw(&x, &x).unwrap();
        identity_worst = identity_worst.max((v - 1.0).abs());

        // random orthogonal Q (QR of a Gaussian) and isotropic scale
        let mut rq = rng::stream(12, "accept6/q", trial);
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| normal.sample(&mut rq));
        let q = g.qr().q();
        let scale = 0.25 + 3.0 * (trial as f64 / TRIALS as f64);
        let mut y = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0f64;
                for k in 0..d {
                    acc += x[[i, k]] as f64 * q[(k, j)];
                }
                y[[i, j]] = (scale * acc) as f32;
            }
        }
        let v = repr::cka_raw(&x, &y).unwrap();
        invariance_worst = invariance_worst.max((v - 1.0).abs());

        // negative control: a non-orthogonal shear must move CKA
        let mut sheared = x.clone();
        for i in 0..n {
            let v = sheared[[i, 1]] + 2.0 * sheared[[i, 0]];
            sheared[[i, 1]] = v;
        }
        if (repr::cka_raw(&x, &sheared).unwrap() - 1.0).abs() > 1e-3 {
            shear_moved += 1;
        }
    }
    assert!(identity_worst <= 1e-10, "CKA(X,X) off by {identity_worst}");
    assert!(invariance_worst <= 1e-8, "invariance off by {invariance_worst}");
    assert!(shear_moved >= 18, "shear moved CKA in only {shear_moved}/20 trials");
    println!(
        "ACCEPT 06 cka-properties: PASS (identity {identity_worst:.1e}, invariance {invariance_worst:.1e}, shear {shear_moved}/20)"
    );
}

#[test]
fn accept_07_probe_sanity() {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let n = 4500usize;
    let d = 256usize;
    let mut r = rng::stream(13, "accept7", 0);
    // R = A (x, y) + eps with |eps| / |A z| = 0.01
    let a: Vec<(f64, f64)> = (0..d).map(|_| (normal.sample(&mut r), normal.sample(&mut r))).collect();
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (r.random_range(-1800.0..1800.0), r.random_range(-900.0..900.0)))
        .collect();
    let mut signal = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            signal[[i, j]] = a[j].0 * coords[i].0 + a[j].1 * coords[i].1;
        }
    }
    let mut noise = Array2::<f64>::zeros((n, d));
    for v in noise.iter_mut() {
        *v = normal.sample(&mut r);
    }
    let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let lambda = 0.01 * norm(&signal) / norm(&noise);
    let data = Array2::<f32>::from_shape_fn((n, d), |(i, j)| {
        (signal[[i, j]] + lambda * noise[[i, j]]) as f32
    });
    let split = repr::probe_split(n, 1);
    assert_eq!(split.train.len(), 3250);
    assert_eq!(split.test.len(), 1250);
    let report = repr::linear_probe(&data, &coords, &split).unwrap();
    assert!(report.r2_x >= 0.99, "signal r2_x = {}", report.r2_x);
    assert!(report.r2_y >= 0.99, "signal r2_y = {}", report.r2_y);

    // pure-noise representations
    let noise_data = Array2::<f32>::from_shape_fn((n, d), |_| normal.sample(&mut r) as f32);
    let noise_report = repr::linear_probe(&noise_data, &coords, &split).unwrap();
    assert!(noise_report.r2_x <= 0.1, "noise r2_x = {}", noise_report.r2_x);
    assert!(noise_report.r2_y <= 0.1, "noise r2_y = {}", noise_report.r2_y);
    println!(
        "ACCEPT 07 probe-sanity: PASS (signal R2 {:.4}/{:.4}, noise R2 {:.3}/{:.3})",
        report.r2_x, report.r2_y, noise_report.r2_x, noise_report.r2_y
    );
}

#[test]
fn accept_08_desk_scale_training_smoke() {
    let started = Instant::now();
    let world = common::fixture_world(500, 42);
    let dir = tempfile::tempdir().unwrap();

    let data_path = dir.path().join("compass.txt");
    datagen::sample_pretrain(
        &world,
        &[TaskKind::Compass],
        200_000,
        42,
        AtlantisPolicy::Exclude,
        &data_path,
    )
    .unwrap();
    let lines = datagen::read_lines(&data_path).unwrap();

    let cfg = ModelConfig {
        hidden: 64,
        heads: 4,
        layers: 2,
        intermediate: 256,
        vocab: 101,
        max_seq: 32,
        init_std: 0.1,
        rope_theta: 10_000.0,
        rms_eps: 1e-6,
    };
    let mut model: Model<f32> = Model::new(cfg, 42).unwrap();
    let tok = Tokenizer::new();
    let mut tc = TrainConfig::pretrain_defaults(200_000, 42);
    tc.log_every = 100;
    let mut session = TrainSession {
        tokenizer: &tok,
        recipe_fingerprint: "accept8".into(),
        out_dir: dir.path().join("model"),
        epoch_hook: None,
    };
    let outcome = trainer::train(&mut model, &lines, &tc, &mut session).unwrap();
    println!(
        "ACCEPT 08 trajectory: steps={} initial={:.4} final={:.4} val={:?} ({:.1} min)",
        outcome.steps,
        outcome.initial_loss,
        outcome.final_loss,
        outcome.final_val_loss,
        started.elapsed().as_secs_f64() / 60.0
    );
    assert!(
        outcome.final_loss <= 0.5 * outcome.initial_loss,
        "final loss {} vs initial {}",
        outcome.final_loss,
        outcome.initial_loss
    );

    // compass eval accuracy (chance 0.125)
    let eval_path = dir.path().join("eval.txt");
    datagen::sample_eval(&world, TaskKind::Compass, Condition::Standard, 2048, 7, &eval_path)
        .unwrap();
    let eval_lines = datagen::read_lines(&eval_path).unwrap();
    let report = eval::evaluate(&model, &tok, &eval_lines, Condition::Standard).unwrap();
    assert!(
        report.value >= 0.5,
        "compass accuracy {} below 0.5 (parse failures {})",
        report.value,
        report.parse_failures
    );

    // linear probe on layer-2 representations
    let mats = repr::extract_representations(
        &model,
        &tok,
        &world,
        TaskKind::Compass,
        &[2],
        false,
        "accept8",
    )
    .unwrap();
    let probe = repr::probe_matrix(&mats[0], 42).unwrap();
    let r2 = 0.5 * (probe.r2_x + probe.r2_y);
    assert!(r2 >= 0.3, "probe R2 {r2} below 0.3 ({} rows)", mats[0].cities.len());

    let mins = started.elapsed().as_secs_f64() / 60.0;
    assert!(mins <= 60.0, "smoke run took {mins:.1} min");
    println!(
        "ACCEPT 08 desk-smoke: PASS (loss {:.3}->{:.3}, accuracy {:.3}, probe R2 {:.3}, {:.1} min)",
        outcome.initial_loss, outcome.final_loss, report.value, r2, mins
    );
}

#[test]
fn accept_09_directional_multitask_convergence() {
    let started = Instant::now();
    let world = common::fixture_world(400, 42);
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::new();
    let cfg = ModelConfig {
        hidden: 32,
        heads: 4,
        layers: 2,
        intermediate: 128,
        vocab: 101,
        max_seq: 64,
        init_std: 0.1,
        rope_theta: 10_000.0,
        rms_eps: 1e-6,
    };

    let singles: [&[TaskKind]; 4] = [
        &[TaskKind::Angle],
        &[TaskKind::Compass],
        &[TaskKind::TriArea],
        &[TaskKind::Perimeter],
    ];
    let pairs: [&[TaskKind]; 2] = [
        &[TaskKind::Angle, TaskKind::Compass],
        &[TaskKind::TriArea, TaskKind::Perimeter],
    ];
    const ROWS_TOTAL: u64 = 40_000;
    let seeds = [1u64, 2];

    let mut entries: Vec<repr::CkaEntry> = Vec::new();
    for (task_sets, group) in [(&singles[..], "single"), (&pairs[..], "pair")] {
        for &tasks in task_sets {
            let label = worldrep::config::task_set_label(tasks);
            for &seed in &seeds {
                let data_path = dir.path().join(format!("{label}_s{seed}.txt"));
                datagen::sample_pretrain(
                    &world,
                    tasks,
                    ROWS_TOTAL / tasks.len() as u64,
                    seed,
                    AtlantisPolicy::Exclude,
                    &data_path,
                )
                .unwrap();
                let lines = datagen::read_lines(&data_path).unwrap();
                let mut model: Model<f32> = Model::new(cfg.clone(), seed).unwrap();
                let mut tc = TrainConfig::pretrain_defaults(ROWS_TOTAL, seed);
                tc.log_every = 200;
                let mut session = TrainSession {
                    tokenizer: &tok,
                    recipe_fingerprint: format!("accept9/{group}/{label}/s{seed}"),
                    out_dir: dir.path().join(format!("m_{label}_s{seed}")),
                    epoch_hook: None,
                };
                trainer::train(&mut model, &lines, &tc, &mut session).unwrap();
                let prefix = worldrep::config::extraction_prefix(tasks);
                let mat = repr::extract_representations(
                    &model, &tok, &world, prefix, &[2], false, &label,
                )
                .unwrap()
                .remove(0);
                entries.push(repr::CkaEntry { label: label.clone(), seed, matrix: mat });
            }
        }
    }

    // deepest layer: mean disjoint-pair CKA of the two-task models vs mean
    // cross-task CKA of the single-task models
    let mut two_task = Vec::new();
    let mut single_cross = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let (a, b) = (&entries[i], &entries[j]);
            if a.label == b.label {
                continue;
            }
            let ta: Vec<&str> = a.label.split('+').collect();
            let tb: Vec<&str> = b.label.split('+').collect();
            if ta.iter().any(|t| tb.contains(t)) {
                continue; // only disjoint task sets enter either mean
            }
            let v = repr::cka(&a.matrix, &b.matrix).unwrap();
            assert!(v.is_finite() && (0.0..=1.0 + 1e-9).contains(&v), "cka {v}");
            match (ta.len(), tb.len()) {
                (2, 2) => two_task.push(v),
                (1, 1) => single_cross.push(v),
                _ => {}
            }
        }
    }
    assert_eq!(two_task.len(), 4, "2 seeds x 2 disjoint two-task models");
    assert_eq!(single_cross.len(), 24, "6 task pairs x 4 seed combos");
    let mean_two: f64 = two_task.iter().sum::<f64>() / two_task.len() as f64;
    let mean_single: f64 = single_cross.iter().sum::<f64>() / single_cross.len() as f64;
    let verdict = if mean_two >= mean_single { "PASS" } else { "WARN (seed noise)" };
    println!(
        "ACCEPT 09 multitask-convergence: {verdict} (two-task mean CKA {mean_two:.4} vs single-task {mean_single:.4}, layer 2, {:.1} min)",
        started.elapsed().as_secs_f64() / 60.0
    );
}

#[test]
fn accept_10_pipeline_determinism() {
    use worldrep::config::{config_hash, ExperimentConfig};
    use worldrep::pipeline::Pipeline;

    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("cities.tsv");
    common::write_geonames_fixture(&source, 150, 10);
    // `out` comes from --out so the config text (and hash) is shared
    let text = format!(
        r#"
version = 1
seed = 42

[world]
source = "{source}"
min_population = 0

[world.atlantis]
count = 12
center_lon = -35.0
center_lat = 35.0
std_deg = 3.0

[model]
hidden = 16
heads = 2
layers = 2
intermediate = 32
max_seq = 64

[pretrain]
tasks = ["compass", "distance"]
rows_per_task = 800
total_rows = 1600
batch = 32
warmup_steps = 10

[finetune]
recipes = [["angle"]]
rows_per_target = 80
replay_rows = 40
elicit_rows_per_task = 4
epochs = 2
batch = 32
eval_every_epochs = 0

[eval]
rows = 64
seed = 7

[analysis]
layers = [2]
"#,
        source = source.display()
    );
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, &text).unwrap();

    let run = |out: &std::path::Path| {
        let (cfg, _) = ExperimentConfig::load(&cfg_path).unwrap();
        let p = Pipeline::new(cfg, config_hash(&text), out.to_path_buf());
        p.run_all().unwrap();
    };
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    run(&out1);
    run(&out2);

    // byte-identical datasets and manifests
    let data_dir = out1.join("data");
    let mut compared = 0usize;
    for entry in std::fs::read_dir(&data_dir).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(data_dir.join(&name)).unwrap();
        let b = std::fs::read(out2.join("data").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between runs");
        compared += 1;
    }
    assert!(compared >= 10, "compared only {compared} files");

    // final eval metrics agree within 1e-5
    let load_reports = |out: &std::path::Path| -> Vec<(String, f64)> {
        let text = std::fs::read_to_string(out.join("eval/reports.csv")).unwrap();
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                (
                    format!("{}/{}/{}", cols[0], cols[1], cols[2]),
                    cols[4].parse::<f64>().unwrap(),
                )
            })
            .collect()
    };
    let r1 = load_reports(&out1);
    let r2 = load_reports(&out2);
    assert_eq!(r1.len(), r2.len());
    for ((k1, v1), (k2, v2)) in r1.iter().zip(&r2) {
        assert_eq!(k1, k2);
        assert!((v1 - v2).abs() <= 1e-5, "{k1}: {v1} vs {v2}");
    }
    println!(
        "ACCEPT 10 pipeline-determinism: PASS ({compared} byte-identical files, {} metrics within 1e-5)",
        r1.len()
    );
}
