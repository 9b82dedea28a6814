//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Criteria can be selected by number:
//! `cargo test -p cian-core --test acceptance -- 1 3`.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cian_core::affinity::{affinity_forward, cian_branch, AffinityParams};
use cian_core::dataset::{generate_dataset, read_dataset, write_dataset, Split};
use cian_core::formats::{
    decode_gray, decode_pgm, decode_ppm, encode_affinity, encode_gray, encode_pgm, encode_ppm,
    read_mask, read_tensor, write_mask, write_tensor,
};
use cian_core::losses::{branch_loss, completion_loss, online_pseudo_label, seeded_ce};
use cian_core::model::{
    forward_step, loss_and_grad, loss_value, LossSwitches, ModelParams, DEFAULT_WIDTHS,
};
use cian_core::pairing::PairMode;
use cian_core::seeds::{cam_to_seeds, substitute_seeds, CamMap};
use cian_core::tensor::{grad_check, softmax_row};
use cian_core::train::{
    evaluate_model, load_checkpoint, load_encoder, prepare, run_phase, run_phases, save_checkpoint,
    save_encoder, Phase, PipelineConfig, Prepared, TrainConfig,
};
use cian_core::{ImageLabelSet, SeedMask, Tensor, IGNORE};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_fill(t: &mut Tensor<f64>, std: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, std).unwrap();
    for v in t.data_mut() {
        *v = n.sample(rng);
    }
}

fn random_map(h: usize, w: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[h, w, d]);
    normal_fill(&mut t, 1.0, rng);
    t
}

fn random_affinity(d: usize, rng: &mut ChaCha8Rng) -> AffinityParams<f64> {
    let mut p = AffinityParams::<f64>::zeros(d).unwrap();
    for (_, t) in p.groups_mut() {
        normal_fill(t, 1.0, rng);
    }
    p
}

// ---------------------------------------------------------------------------
// Double-loop oracle of the affinity branch, straight from the definitions.

fn proj(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|o| (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum())
        .collect()
}

fn pixels(x: &Tensor<f64>) -> Vec<&[f64]> {
    x.data().chunks(x.shape()[2]).collect()
}

/// Project every reference pixel, then take 2×2 stride-2 window maxima
/// (no pooling when a side is below 2).
fn pooled_projection(r: &Tensor<f64>, w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (h, wd) = (r.shape()[0], r.shape()[1]);
    let px: Vec<Vec<f64>> = pixels(r).iter().map(|p| proj(p, w)).collect();
    if h < 2 || wd < 2 {
        return px;
    }
    let mut out = Vec::new();
    for oy in 0..h / 2 {
        for ox in 0..wd / 2 {
            let mut best = vec![f64::NEG_INFINITY; w.shape()[1]];
            for dy in 0..2 {
                for dx in 0..2 {
                    let v = &px[(2 * oy + dy) * wd + 2 * ox + dx];
                    for (b, &x) in best.iter_mut().zip(v) {
                        *b = b.max(x);
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

struct OraclePair {
    weights: Vec<Vec<f64>>,
    message: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

fn oracle_pair(q: &Tensor<f64>, r: &Tensor<f64>, p: &AffinityParams<f64>) -> OraclePair {
    let keys = pooled_projection(r, &p.w_r);
    let values = pooled_projection(r, &p.w_c);
    let mut weights = Vec::new();
    let mut message = Vec::new();
    for x in pixels(q) {
        let qi = proj(x, &p.w_q);
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let row: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut m = vec![0.0; values[0].len()];
        for (a, v) in row.iter().zip(&values) {
            for (mc, vc) in m.iter_mut().zip(v) {
                *mc += a * vc;
            }
        }
        weights.push(row);
        message.push(m);
    }
    OraclePair {
        weights,
        message,
        values,
    }
}

fn oracle_branch(q: &Tensor<f64>, refs: &[&Tensor<f64>], p: &AffinityParams<f64>) -> Vec<f64> {
    let mut merged = oracle_pair(q, q, p).message;
    for r in refs {
        for (row, other) in merged.iter_mut().zip(oracle_pair(q, r, p).message) {
            for (a, b) in row.iter_mut().zip(other) {
                *a = a.max(b);
            }
        }
    }
    let mut out = Vec::new();
    for (x, m) in pixels(q).into_iter().zip(&merged) {
        let o = proj(m, &p.w_o);
        for c in 0..x.len() {
            out.push(x[c] + p.gamma.data()[c] * o[c] + p.beta.data()[c]);
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Gradients of the full objective w.r.t. every parameter group.

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut params = ModelParams::<f64>::init(&DEFAULT_WIDTHS, 3, &mut rng).unwrap();
    for (_, t) in params.affinity.groups_mut() {
        normal_fill(t, 0.3, &mut rng);
    }
    normal_fill(&mut params.classifier.weight, 0.5, &mut rng);
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[8, 8, 3], |_| rng.random::<f64>());
    let query = image(&mut rng);
    let refs = [image(&mut rng), image(&mut rng)];
    let refs: Vec<&Tensor<f64>> = refs.iter().collect();
    let seeds = SeedMask::new(
        8,
        8,
        (0..64)
            .map(|_| [0, 1, 2, IGNORE][rng.random_range(0..4)])
            .collect(),
    )
    .unwrap();
    let labels = ImageLabelSet::new([1, 2]);
    let switches = LossSwitches::default();
    check(params.encoder.out_dim() == 32, || {
        "feature dim is not 32".into()
    })?;

    let (_, grads) = loss_and_grad(&params, &query, &seeds, &labels, &refs, switches)
        .map_err(|e| e.to_string())?;
    let names: Vec<String> = params.groups().iter().map(|(n, _)| n.clone()).collect();
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    for (gi, name) in names.iter().enumerate() {
        let base = params.groups()[gi].1.clone();
        let analytic = grads.groups()[gi].1.clone();
        coords += base.len();
        let rep = grad_check(
            |t| {
                let mut p = params.clone();
                *p.groups_mut()[gi].1 = t.clone();
                loss_value(&p, &query, &seeds, &labels, &refs, switches)
                    .unwrap()
                    .total()
            },
            &base,
            &analytic,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        if rep.max_rel_error >= worst.0 {
            worst = (rep.max_rel_error, name.clone());
        }
        check(rep.max_rel_error < 1e-4, || {
            format!(
                "{name}: max rel error {:.3e} at {} ({} vs {})",
                rep.max_rel_error, rep.worst_index, rep.analytic, rep.numeric
            )
        })?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(120), || {
        format!("took {elapsed:.1?}")
    })?;
    Ok(format!(
        "{} groups, {coords} coordinates, max rel error {:.2e} ({}), {elapsed:.1?}",
        names.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// 2. Vectorized branch against the oracle; losses against closed forms.

fn criterion_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d = 2 * rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let p = random_affinity(d, &mut rng);
        let q = random_map(h, w, d, &mut rng);
        let refs: Vec<Tensor<f64>> = (0..rng.random_range(0..=2))
            .map(|_| {
                let (rh, rw) = (rng.random_range(1..=4), rng.random_range(1..=4));
                random_map(rh, rw, d, &mut rng)
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = refs.iter().collect();
        for r in std::iter::once(&q).chain(refs.iter().copied()) {
            let (aff, msg) = affinity_forward(&q, r, &p).map_err(|e| e.to_string())?;
            let o = oracle_pair(&q, r, &p);
            worst = worst
                .max(max_diff(aff.weights.data(), &o.weights.concat()))
                .max(max_diff(msg.data(), &o.message.concat()));
        }
        let out = cian_branch(&q, &refs, &p).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(out.data(), &oracle_branch(&q, &refs, &p)));
        check(worst < 1e-6, || {
            format!("instance {case}: deviation {worst:.3e}")
        })?;
    }

    // hand-computed losses
    let mut loss_worst = 0.0f64;
    let mut close = |got: f64, want: f64, what: &str| -> Result<(), String> {
        loss_worst = loss_worst.max((got - want).abs());
        check((got - want).abs() < 1e-10, || {
            format!("{what}: {got} vs {want}")
        })
    };
    let ln = f64::ln;
    let t = |h: usize, w: usize, v: Vec<f64>| Tensor::new(&[h, w, v.len() / (h * w)], v).unwrap();
    let m = |h: usize, w: usize, v: Vec<u8>| SeedMask::new(h, w, v).unwrap();

    let (l, _) = seeded_ce(&t(1, 1, vec![0.0, ln(2.0), ln(3.0)]), &m(1, 1, vec![2])).unwrap();
    close(l, ln(2.0), "ce of [0, ln2, ln3] at class 2")?;
    let (l, g) = seeded_ce(&t(1, 2, vec![0.0; 8]), &m(1, 2, vec![0, 3])).unwrap();
    close(l, ln(4.0), "uniform ce over 4 classes")?;
    close(
        g.data()[0],
        (0.25 - 1.0) / 2.0,
        "uniform ce gradient at the target",
    )?;
    close(g.data()[1], 0.25 / 2.0, "uniform ce gradient off target")?;
    let (l, _) = seeded_ce(
        &t(1, 3, vec![0.0, 0.0, 5.0, 1.0, 1.0, 3.0]),
        &m(1, 3, vec![0, IGNORE, 1]),
    )
    .unwrap();
    close(
        l,
        (ln(2.0) + ln(1f64.exp() + 3f64.exp()) - 3.0) / 2.0,
        "ce skipping IGNORE",
    )?;
    let (l, g) = seeded_ce(&t(1, 1, vec![1.0, 2.0]), &m(1, 1, vec![IGNORE])).unwrap();
    close(l, 0.0, "all-IGNORE ce")?;
    close(g.sum(), 0.0, "all-IGNORE gradient")?;

    let logits = t(1, 2, vec![2.0, 1.0, 0.0, 0.0, 3.0, 1.0]);
    let labels = ImageLabelSet::new([2]);
    let pseudo = online_pseudo_label(&logits, &labels).unwrap();
    check(pseudo.labels() == [0, IGNORE], || {
        format!("pseudo labels {:?}", pseudo.labels())
    })?;
    let (cp, _) = completion_loss(&logits, &pseudo).unwrap();
    close(
        cp,
        ln(2f64.exp() + 1f64.exp() + 1.0) - 2.0,
        "completion loss",
    )?;
    let seeds = m(1, 2, vec![IGNORE, 2]);
    let (ce, cp2, _) = branch_loss(&logits, &seeds, &labels, true).unwrap();
    close(ce, ln(1.0 + 3f64.exp() + 1f64.exp()) - 1.0, "branch ce")?;
    close(cp2, cp, "branch completion")?;

    // closed form on random instances
    for _ in 0..100 {
        let (h, w, k) = (
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(2..=4),
        );
        let z: Vec<f64> = (0..h * w * k)
            .map(|_| rng.random_range(-4.0..4.0))
            .collect();
        let y: Vec<u8> = (0..h * w)
            .map(|_| {
                if rng.random_bool(0.3) {
                    IGNORE
                } else {
                    rng.random_range(0..k as u8)
                }
            })
            .collect();
        let (l, g) = seeded_ce(&t(h, w, z.clone()), &m(h, w, y.clone())).unwrap();
        let valid = y.iter().filter(|&&v| v != IGNORE).count();
        let mut want = 0.0;
        for (row, &lab) in z.chunks(k).zip(&y) {
            if lab != IGNORE {
                want += ln(row.iter().map(|v| v.exp()).sum::<f64>()) - row[lab as usize];
            }
        }
        let want = if valid == 0 { 0.0 } else { want / valid as f64 };
        close(l, want, "random ce")?;
        for ((row, grow), &lab) in z.chunks(k).zip(g.data().chunks(k)).zip(&y) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..k {
                let want = if lab == IGNORE {
                    0.0
                } else {
                    (row[c].exp() / s - f64::from(c == lab as usize)) / valid as f64
                };
                close(grow[c], want, "random ce gradient")?;
            }
        }
    }
    Ok(format!(
        "100 branch instances, max deviation {worst:.2e}; loss closed forms within {loss_worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Invariants.

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        failure_persistence: None,
        ..Config::with_cases(cases)
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn prop(
    name: &str,
    r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>,
) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn criterion_invariants() -> Verdict {
    let instance = (
        1usize..=8,
        1usize..=8,
        1usize..=8,
        1usize..=8,
        1usize..=4,
        0usize..=2,
        any::<u64>(),
    );

    prop(
        "row-stochasticity",
        runner(64).run(&instance, |(h, w, rh, rw, half, _, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 2 * half;
            let p = AffinityParams::<f32>::init(d, 1.0, &mut rng).unwrap();
            let q = random_map(h, w, d, &mut rng).cast::<f32>();
            let r = random_map(rh, rw, d, &mut rng).cast::<f32>();
            let (aff, _) = affinity_forward(&q, &r, &p).unwrap();
            let nr = aff.weights.shape()[1];
            for row in aff.weights.data().chunks(nr) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                    return Err(fail(format!("row sums to {s}")));
                }
            }
            Ok(())
        }),
    )?;

    prop(
        "softmax shift invariance",
        runner(256).run(
            &(prop::collection::vec(-50.0f64..50.0, 1..32), -1e3f64..1e3),
            |(v, c)| {
                let mut a = v.clone();
                let mut b: Vec<f64> = v.iter().map(|x| x + c).collect();
                softmax_row(&mut a);
                softmax_row(&mut b);
                let d = max_diff(&a, &b);
                if d > 1e-6 {
                    return Err(fail(format!("shift {c} moved softmax by {d}")));
                }
                Ok(())
            },
        ),
    )?;

    prop(
        "zero-init identity",
        runner(64).run(&instance, |(h, w, rh, rw, half, n_refs, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 2 * half;
            let p = AffinityParams::<f32>::init(d, 0.5, &mut rng).unwrap();
            let q = random_map(h, w, d, &mut rng).cast::<f32>();
            let refs: Vec<Tensor<f32>> = (0..n_refs)
                .map(|_| random_map(rh, rw, d, &mut rng).cast())
                .collect();
            let refs: Vec<&Tensor<f32>> = refs.iter().collect();
            let out = cian_branch(&q, &refs, &p).unwrap();
            let same = out
                .data()
                .iter()
                .zip(q.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(fail("fresh branch changed its input".into()));
            }
            Ok(())
        }),
    )?;

    prop(
        "self-pair consistency",
        runner(32).run(&(1usize..=6, 1usize..=6, any::<u64>()), |(h, w, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let p = random_affinity(d, &mut rng);
            let q = random_map(h, w, d, &mut rng);
            let alone = cian_branch(&q, &[], &p).unwrap();
            let paired = cian_branch(&q, &[&q], &p).unwrap();
            if alone != paired {
                return Err(fail("branch with itself as reference differs".into()));
            }
            let mut model = ModelParams::<f64>::init(&[3, 4, 6], 2, &mut rng).unwrap();
            model.affinity = p;
            let img = Tensor::from_fn(&[h, w, 3], |_| rng.random::<f64>());
            let step = forward_step(&model, &img, &[&img]).unwrap();
            if step.logits_cross != step.logits_self {
                return Err(fail(
                    "cross logits with self reference differ from self logits".into(),
                ));
            }
            Ok(())
        }),
    )?;

    prop(
        "message convexity",
        runner(64).run(&instance, |(h, w, rh, rw, half, _, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 2 * half;
            let p = random_affinity(d, &mut rng);
            let q = random_map(h, w, d, &mut rng);
            let r = random_map(rh, rw, d, &mut rng);
            let (_, msg) = affinity_forward(&q, &r, &p).unwrap();
            let values = oracle_pair(&q, &r, &p).values;
            for row in msg.data().chunks(d) {
                for (c, &v) in row.iter().enumerate() {
                    let lo = values.iter().map(|x| x[c]).fold(f64::INFINITY, f64::min);
                    let hi = values
                        .iter()
                        .map(|x| x[c])
                        .fold(f64::NEG_INFINITY, f64::max);
                    if v < lo - 1e-6 || v > hi + 1e-6 {
                        return Err(fail(format!("message {v} outside [{lo}, {hi}]")));
                    }
                }
            }
            Ok(())
        }),
    )?;

    prop(
        "pseudo-label class membership",
        runner(256).run(
            &(
                1usize..=5,
                1usize..=5,
                1usize..=4,
                prop::collection::btree_set(1u8..=4, 0..=4),
                any::<u64>(),
            ),
            |(h, w, c, labels, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let labels = ImageLabelSet::new(labels.into_iter().filter(|&l| l as usize <= c));
                let k = c + 1;
                let logits = Tensor::from_fn(&[h, w, k], |_| rng.random_range(-3.0..3.0f64));
                let pseudo = online_pseudo_label(&logits, &labels).unwrap();
                for (row, &v) in logits.data().chunks(k).zip(pseudo.labels()) {
                    let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b }) as u8;
                    let want = if best == 0 || labels.contains(best) {
                        best
                    } else {
                        IGNORE
                    };
                    if v != want {
                        return Err(fail(format!("pseudo {v}, expected {want}")));
                    }
                }
                Ok(())
            },
        ),
    )?;

    prop(
        "seed soundness and threshold monotonicity",
        runner(256).run(
            &(
                1usize..=6,
                1usize..=6,
                1usize..=3,
                prop::collection::btree_set(1u8..=3, 0..=3),
                0.0f64..1.0,
                0.0f64..1.0,
                0.0f64..1.0,
                0.0f64..1.0,
                any::<u64>(),
            ),
            |(h, w, c, labels, fa, fb, ba, bb, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let labels = ImageLabelSet::new(labels.into_iter().filter(|&l| l as usize <= c));
                let scores =
                    Tensor::from_fn(&[h, w, c], |_| (rng.random_range(0..8u8) as f32) / 8.0);
                let cam = CamMap { scores };
                let sal = Tensor::from_fn(&[h, w], |_| (rng.random_range(0..8u8) as f32) / 8.0);
                let (f_lo, f_hi) = (fa.min(fb), fa.max(fb));
                let (b_lo, b_hi) = (ba.min(bb), ba.max(bb));
                let seeds = |f: f64, b: f64| cam_to_seeds(&cam, &sal, &labels, f, b).unwrap();
                let base = seeds(f_lo, b_lo);
                for (i, &v) in base.labels().iter().enumerate() {
                    let row = &cam.scores.data()[i * c..(i + 1) * c];
                    let top = labels
                        .iter()
                        .map(|l| row[l as usize - 1])
                        .fold(f32::NEG_INFINITY, f32::max);
                    let ok = match v {
                        IGNORE => true,
                        0 => sal.data()[i] < b_lo as f32 && top <= f_lo as f32,
                        l => labels.contains(l) && row[l as usize - 1] == top && top > f_lo as f32,
                    };
                    if !ok {
                        return Err(fail(format!("seed {v} at pixel {i} is unsound")));
                    }
                }
                let raised_fg = seeds(f_hi, b_lo);
                let raised_bg = seeds(f_lo, b_hi);
                for ((&a, &f), &b) in base
                    .labels()
                    .iter()
                    .zip(raised_fg.labels())
                    .zip(raised_bg.labels())
                {
                    let fg = |v: u8| v != 0 && v != IGNORE;
                    if fg(f) && f != a {
                        return Err(fail(format!(
                            "raising fg_thresh added foreground {f} over {a}"
                        )));
                    }
                    if a == 0 && b != 0 {
                        return Err(fail("raising bg_thresh removed background".into()));
                    }
                }
                Ok(())
            },
        ),
    )?;

    Ok("row-stochasticity, shift invariance, zero-init identity, self-pair consistency, message convexity, pseudo-label membership, seed soundness and monotonicity".into())
}

// ---------------------------------------------------------------------------
// 4–6. Training trends. All three share one data set and CAM stage.

fn miou(cfg: &PipelineConfig, data: &Prepared, phase: Phase) -> Result<f64, String> {
    let out = run_phase(phase, cfg, data).map_err(|e| e.to_string())?;
    if let Some(why) = out.aborted {
        return Err(format!("{} aborted: {why}", phase.label()));
    }
    let cm = evaluate_model(&out.params, &data.val).map_err(|e| e.to_string())?;
    Ok(100.0 * cm.miou().1)
}

/// Shorter schedule at a smaller crop for the multi-seed sweeps.
fn sweep_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train = TrainConfig {
        epochs: 10,
        crop: 32,
        seed,
        ..cfg.train
    };
    cfg
}

fn criterion_ablation(data: &Prepared, prep_time: Duration) -> Verdict {
    let cfg = PipelineConfig::default();
    let start = Instant::now();
    let (report, _) = run_phases(&cfg, data, &Phase::ALL).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed() + prep_time;
    let get = |p: Phase| report.rows.iter().find(|r| r.phase == p).unwrap().miou * 100.0;
    let (b, ce, cp, rt) = (
        get(Phase::Baseline),
        get(Phase::Ce),
        get(Phase::Cp),
        get(Phase::Rt),
    );
    let summary =
        format!("Baseline {b:.2}, +CE {ce:.2}, +CP {cp:.2}, +RT {rt:.2} mIoU in {elapsed:.0?}");
    check(elapsed < Duration::from_secs(30 * 60), || {
        format!("{summary}: over 30 min")
    })?;
    check(cp >= b + 2.0, || {
        format!("{summary}: +CP - Baseline = {:.2} < 2.0", cp - b)
    })?;
    check(ce >= b, || {
        format!("{summary}: +CE - Baseline = {:.2} < 0", ce - b)
    })?;
    Ok(summary)
}

fn criterion_pairing(data: &Prepared) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let mut cfg = sweep_config(seed);
        cfg.train.pair_mode = PairMode::Common;
        let common = miou(&cfg, data, Phase::Cp)?;
        cfg.train.pair_mode = PairMode::Random;
        let random = miou(&cfg, data, Phase::Cp)?;
        wins += usize::from(common >= random);
        lines.push(format!(
            "seed {seed}: common {common:.2} / random {random:.2}"
        ));
    }
    let summary = format!("{} ({wins}/3 common >= random)", lines.join("; "));
    check(wins >= 2, || summary.clone())?;
    Ok(summary)
}

fn criterion_substitution(data: &Prepared) -> Verdict {
    let ratios = [0.0, 0.05, 0.10];
    let truth: Vec<SeedMask> = data.train.iter().map(|i| i.gt.clone()).collect();
    let cfg0 = PipelineConfig::default();
    let variants: Vec<Prepared> = ratios
        .iter()
        .map(|&r| {
            let seeds = substitute_seeds(&data.seeds, &truth, r, cfg0.data_seed).unwrap();
            Prepared {
                seeds,
                ..data.clone()
            }
        })
        .collect();
    let (mut mono_base, mut mono_cian, mut widen) = (0, 0, 0);
    let mut lines = Vec::new();
    for seed in 0..3 {
        let cfg = sweep_config(seed);
        let mut base = Vec::new();
        let mut cian = Vec::new();
        for v in &variants {
            base.push(miou(&cfg, v, Phase::Baseline)?);
            cian.push(miou(&cfg, v, Phase::Cp)?);
        }
        let mono = |m: &[f64]| m.windows(2).all(|w| w[1] >= w[0]);
        mono_base += usize::from(mono(&base));
        mono_cian += usize::from(mono(&cian));
        widen += usize::from(cian[2] - base[2] >= cian[0] - base[0]);
        let fmt = |m: &[f64]| {
            m.iter()
                .map(|v| format!("{v:.2}"))
                .collect::<Vec<_>>()
                .join("/")
        };
        lines.push(format!(
            "seed {seed}: Baseline {} CIAN {}",
            fmt(&base),
            fmt(&cian)
        ));
    }
    let summary = format!(
        "{}; non-decreasing Baseline {mono_base}/3, CIAN {mono_cian}/3; gap widens {widen}/3",
        lines.join("; ")
    );
    check(mono_base >= 2 && mono_cian >= 2 && widen >= 2, || {
        summary.clone()
    })?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 7. Determinism.

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        n_train: 12,
        n_val: 4,
        image_size: 32,
        ..PipelineConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch = 4;
    cfg.train.crop = 32;
    cfg.cam.epochs = 2;
    cfg
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn criterion_determinism() -> Verdict {
    let cfg = tiny_config();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for run in 0..2 {
        let data = prepare(&cfg).map_err(|e| e.to_string())?;
        let (report, outcomes) = run_phases(&cfg, &data, &Phase::ALL).map_err(|e| e.to_string())?;
        let mut ckpts = Vec::new();
        for (phase, o) in Phase::ALL.iter().zip(&outcomes) {
            let dir = tmp.path().join(format!("{run}-{}", phase.label()));
            save_checkpoint(&dir, &o.params).map_err(|e| e.to_string())?;
            ckpts.push(dir_bytes(&dir));
        }
        runs.push((report.to_csv(), ckpts, data.seeds));
    }
    check(runs[0].0 == runs[1].0, || "reports differ".into())?;
    check(runs[0].2 == runs[1].2, || "seeds differ".into())?;
    for (phase, (a, b)) in Phase::ALL.iter().zip(runs[0].1.iter().zip(&runs[1].1)) {
        check(a == b, || format!("{} checkpoints differ", phase.label()))?;
    }
    let files: usize = runs[0].1.iter().map(Vec::len).sum();
    Ok(format!(
        "4 phases, {files} checkpoint files and the report byte-identical across two runs"
    ))
}

// ---------------------------------------------------------------------------
// 8. Format round-trips.

fn same_bits32(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_formats() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = |e: cian_core::CianError| e.to_string();

    let specials = [
        0.0,
        -0.0,
        f64::MIN_POSITIVE / 2.0,
        1e300,
        -1.5,
        f64::INFINITY,
        f64::NAN,
    ];
    let t64 = Tensor::from_fn(&[3, 5, 2], |i| {
        specials
            .get(i)
            .copied()
            .unwrap_or_else(|| rng.random::<f64>())
    });
    write_tensor(&dir.join("a.cian"), &t64).map_err(e)?;
    let back: Tensor<f64> = read_tensor(&dir.join("a.cian")).map_err(e)?;
    check(
        back.shape() == t64.shape()
            && back
                .data()
                .iter()
                .zip(t64.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
        || "f64 tensor changed".into(),
    )?;
    let t32 = Tensor::from_fn(&[4, 4, 3], |i| {
        if i == 0 {
            f32::NAN
        } else {
            rng.random::<f32>() - 0.5
        }
    });
    write_tensor(&dir.join("b.cian"), &t32).map_err(e)?;
    check(
        same_bits32(&read_tensor(&dir.join("b.cian")).map_err(e)?, &t32),
        || "f32 tensor changed".into(),
    )?;

    let mask = SeedMask::new(5, 7, (0..35).map(|i| [0, 1, 2, 3, IGNORE][i % 5]).collect()).unwrap();
    write_mask(&dir.join("m.pgm"), &mask).map_err(e)?;
    check(read_mask(&dir.join("m.pgm")).map_err(e)? == mask, || {
        "mask changed".into()
    })?;

    let raster: Vec<u8> = (0..6 * 4).map(|_| rng.random()).collect();
    let bytes = encode_pgm(6, 4, &raster).map_err(e)?;
    check(decode_pgm(&bytes).map_err(e)? == (6, 4, raster), || {
        "pgm raster changed".into()
    })?;

    // written images are quantized; what is read back must survive another cycle unchanged
    let img = Tensor::from_fn(&[6, 5, 3], |_| rng.random::<f32>());
    let once = decode_ppm(&encode_ppm(&img).map_err(e)?).map_err(e)?;
    let again = decode_ppm(&encode_ppm(&once).map_err(e)?).map_err(e)?;
    check(same_bits32(&once, &again), || "ppm not stable".into())?;
    let gray = Tensor::from_fn(&[6, 5], |_| rng.random::<f32>());
    let once = decode_gray(&encode_gray(&gray).map_err(e)?).map_err(e)?;
    check(
        same_bits32(
            &once,
            &decode_gray(&encode_gray(&once).map_err(e)?).map_err(e)?,
        ),
        || "gray pgm not stable".into(),
    )?;
    let weights: Vec<f64> = (0..12).map(|_| rng.random()).collect();
    let aff = encode_affinity(&weights, 3, 4).map_err(e)?;
    let (w, h, px) = decode_pgm(&aff).map_err(e)?;
    check(encode_pgm(w, h, &px).map_err(e)? == aff, || {
        "affinity pgm not stable".into()
    })?;

    let images = generate_dataset(5, 32, 3, 4, Split::Val).map_err(e)?;
    write_dataset(&dir.join("data"), &images).map_err(e)?;
    let read = read_dataset(&dir.join("data")).map_err(e)?;
    check(
        read.len() == images.len()
            && read.iter().zip(&images).all(|(a, b)| {
                a.id == b.id
                    && a.labels == b.labels
                    && a.gt == b.gt
                    && same_bits32(&a.pixels, &b.pixels)
            }),
        || "dataset changed".into(),
    )?;

    let params = ModelParams::<f32>::init(&DEFAULT_WIDTHS, 3, &mut rng).map_err(e)?;
    save_checkpoint(&dir.join("ckpt"), &params).map_err(e)?;
    check(
        load_checkpoint(&dir.join("ckpt")).map_err(e)? == params,
        || "checkpoint changed".into(),
    )?;
    save_encoder(&dir.join("enc"), &params.encoder).map_err(e)?;
    check(
        load_encoder(&dir.join("enc")).map_err(e)? == params.encoder,
        || "encoder changed".into(),
    )?;
    Ok(
        "CIAN1 f32/f64 tensors, masks, PGM, PPM, gray and affinity maps, datasets and checkpoints"
            .into(),
    )
}

// ---------------------------------------------------------------------------

fn run(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &verdict {
        Ok(d) => println!("criterion {n} {name}: PASS [{secs:.1}s] {d}"),
        Err(d) => println!("criterion {n} {name}: FAIL [{secs:.1}s] {d}"),
    }
    verdict.is_ok()
}

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |n: usize| picked.is_empty() || picked.contains(&n);
    panic::set_hook(Box::new(|_| {}));

    let mut results = Vec::new();
    if want(1) {
        results.push(run(1, "gradient check", criterion_gradients));
    }
    if want(2) {
        results.push(run(2, "oracle equivalence", criterion_oracle));
    }
    if want(3) {
        results.push(run(3, "invariants", criterion_invariants));
    }
    if want(4) || want(5) || want(6) {
        let start = Instant::now();
        match prepare(&PipelineConfig::default()) {
            Ok(data) => {
                let prep = start.elapsed();
                if want(4) {
                    results.push(run(4, "ablation trend", || criterion_ablation(&data, prep)));
                }
                if want(5) {
                    results.push(run(5, "pairing trend", || criterion_pairing(&data)));
                }
                if want(6) {
                    results.push(run(6, "substitution trend", || {
                        criterion_substitution(&data)
                    }));
                }
            }
            Err(err) => {
                for (n, name) in [
                    (4, "ablation trend"),
                    (5, "pairing trend"),
                    (6, "substitution trend"),
                ] {
                    if want(n) {
                        println!("criterion {n} {name}: FAIL data preparation: {err}");
                        results.push(false);
                    }
                }
            }
        }
    }
    if want(7) {
        results.push(run(7, "determinism", criterion_determinism));
    }
    if want(8) {
        results.push(run(8, "format round-trip", criterion_formats));
    }
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
