//! Randomised finite-difference checks for every tape primitive.
//!
//! Each case builds `sum(op(inputs) ∘ W)` for a random constant `W`, with one
//! input varied at a time and the rest held constant.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::Result;
use crate::tape::{finite_diff_check, Tape, Var};

/// Central-difference step used by the suite.
pub const STEP: f64 = 1e-5;

/// Worst relative error seen for one primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveReport {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    /// `|x| ≥ 0.1`, away from a kink at zero.
    AwayFromZero,
    Positive,
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-2.0..2.0),
            Domain::AwayFromZero => {
                let m: f64 = rng.random_range(0.1..2.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            }
            Domain::Positive => rng.random_range(0.5..2.0),
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=5))
}

/// `sum(y ∘ W)` with a fixed random `W` drawn from `seed`.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = sample(&mut rng, &shape, Domain::Any);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Builder = dyn Fn(&mut Tape, Var) -> Result<Var>;

fn check(build: &Builder, x: &Array, seed: u64) -> Result<f64> {
    finite_diff_check(
        |t: &mut Tape, v| {
            let y = build(t, v)?;
            project(t, y, seed)
        },
        x,
        STEP,
    )
}

/// Run `cases` random checks for every primitive. Deterministic per `seed`.
pub fn check_primitives(cases: usize, seed: u64) -> Result<Vec<PrimitiveReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |name: &str, rng: &mut ChaCha8Rng, one: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            worst = worst.max(one(rng)?);
        }
        reports.push(PrimitiveReport {
            name: name.into(),
            cases,
            worst,
        });
        Ok(())
    };

    run("matmul", &mut rng, &mut |r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..=4);
        let a = sample(r, &[m, k], Domain::Any);
        let b = sample(r, &[k, n], Domain::Any);
        let s = r.random();
        let (bc, ac) = (b.clone(), a.clone());
        let e1 = check(&move |t, x| { let c = t.constant(bc.clone()); t.matmul(x, c) }, &a, s)?;
        let e2 = check(&move |t, x| { let c = t.constant(ac.clone()); t.matmul(c, x) }, &b, s)?;
        Ok(e1.max(e2))
    })?;
    for (name, kind) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        run(name, &mut rng, &mut |r| {
            let (m, n) = dims(r);
            let a = sample(r, &[m, n], Domain::Any);
            let b = sample(r, &[m, n], Domain::Any);
            let s = r.random();
            let op = move |t: &mut Tape, x: Var, y: Var| match kind {
                0 => t.add(x, y),
                1 => t.sub(x, y),
                _ => t.mul(x, y),
            };
            let (bc, ac) = (b.clone(), a.clone());
            let e1 = check(&move |t, x| { let c = t.constant(bc.clone()); op(t, x, c) }, &a, s)?;
            let e2 = check(&move |t, x| { let c = t.constant(ac.clone()); op(t, c, x) }, &b, s)?;
            Ok(e1.max(e2))
        })?;
    }
    let unary: [(&str, Domain, fn(&mut Tape, Var) -> Result<Var>); 8] = [
        ("scale", Domain::Any, |t, x| t.scale(x, -1.7)),
        ("relu", Domain::AwayFromZero, |t, x| t.relu(x)),
        ("sigmoid", Domain::Any, |t, x| t.sigmoid(x)),
        ("log", Domain::Positive, |t, x| t.log(x)),
        ("exp", Domain::Any, |t, x| t.exp(x)),
        ("softmax_rows", Domain::Any, |t, x| t.softmax_rows(x)),
        ("log_softmax_rows", Domain::Any, |t, x| t.log_softmax_rows(x)),
        ("transpose", Domain::Any, |t, x| t.transpose(x)),
    ];
    for (name, domain, f) in unary {
        run(name, &mut rng, &mut |r| {
            let (m, n) = dims(r);
            let a = sample(r, &[m, n], domain);
            check(&f, &a, r.random())
        })?;
    }
    for (name, mean) in [("mean", true), ("sum", false)] {
        run(name, &mut rng, &mut |r| {
            let (m, n) = dims(r);
            let a = sample(r, &[m, n], Domain::Any);
            check(&move |t, x| if mean { t.mean(x) } else { t.sum(x) }, &a, r.random())
        })?;
    }
    run("gather_rows", &mut rng, &mut |r| {
        let (v, d) = dims(r);
        let table = sample(r, &[v, d], Domain::Any);
        let idx: Vec<usize> = (0..r.random_range(1..=6)).map(|_| r.random_range(0..v)).collect();
        check(&move |t, x| t.gather_rows(x, &idx), &table, r.random())
    })?;
    run("concat", &mut rng, &mut |r| {
        let (m, n) = dims(r);
        let axis = r.random_range(0..2);
        let other_shape = if axis == 0 { [r.random_range(1..=3), n] } else { [m, r.random_range(1..=3)] };
        let a = sample(r, &[m, n], Domain::Any);
        let b = sample(r, &other_shape, Domain::Any);
        let s = r.random();
        let (bc, ac) = (b.clone(), a.clone());
        let e1 = check(&move |t, x| { let c = t.constant(bc.clone()); t.concat(&[x, c], axis) }, &a, s)?;
        let e2 = check(&move |t, x| { let c = t.constant(ac.clone()); t.concat(&[c, x], axis) }, &b, s)?;
        Ok(e1.max(e2))
    })?;
    run("slice", &mut rng, &mut |r| {
        let (m, n) = dims(r);
        let axis = r.random_range(0..2);
        let extent = if axis == 0 { m } else { n };
        let start = r.random_range(0..extent);
        let len = r.random_range(1..=extent - start);
        let a = sample(r, &[m, n], Domain::Any);
        check(&move |t, x| t.slice(x, axis, start, len), &a, r.random())
    })?;
    run("detach", &mut rng, &mut |r| {
        // A detached branch contributes no gradient, so it is zeroed in value
        // too and the numeric derivative must match the plain path.
        let (m, n) = dims(r);
        let a = sample(r, &[m, n], Domain::Any);
        check(
            &|t, x| {
                let d = t.detach(x)?;
                let z = t.scale(d, 0.0)?;
                t.add(x, z)
            },
            &a,
            r.random(),
        )
    })?;
    run("expand", &mut rng, &mut |r| {
        let (m, n) = dims(r);
        let a = sample(r, &[1], Domain::Any);
        check(&move |t, x| t.expand(x, &[m, n]), &a, r.random())
    })?;
    run("weighted_sum", &mut rng, &mut |r| {
        let (m, n) = dims(r);
        let k = r.random_range(1..=4);
        let w = sample(r, &[k], Domain::Any);
        let terms: Vec<Array> = (0..k).map(|_| sample(r, &[m, n], Domain::Any)).collect();
        let which: Vec<usize> = (0..k).map(|_| r.random_range(0..k)).collect();
        let s = r.random();
        let x0 = terms[0].clone();
        let (tc, wc, wh) = (terms.clone(), w.clone(), which.clone());
        let e1 = check(
            &move |t, x| {
                let vs: Vec<(usize, Var)> = tc.iter().zip(&wh).map(|(a, &i)| (i, t.constant(a.clone()))).collect();
                t.weighted_sum(x, &vs, &[m, n])
            },
            &w,
            s,
        )?;
        let e2 = check(
            &move |t, x| {
                let wv = t.constant(wc.clone());
                let mut vs: Vec<(usize, Var)> = terms[1..].iter().zip(&which[1..]).map(|(a, &i)| (i, t.constant(a.clone()))).collect();
                vs.push((which[0], x));
                t.weighted_sum(wv, &vs, &[m, n])
            },
            &x0,
            s,
        )?;
        Ok(e1.max(e2))
    })?;
    run("causal_attention", &mut rng, &mut |r| {
        let mut lens: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=4)).collect();
        lens.shuffle(r);
        let mut segs = Vec::new();
        let mut start = 0;
        for l in lens {
            segs.push((start, l));
            start += l;
        }
        let dk = r.random_range(1..=4);
        let dv = r.random_range(1..=4);
        let q = sample(r, &[start, dk], Domain::Any);
        let k = sample(r, &[start, dk], Domain::Any);
        let v = sample(r, &[start, dv], Domain::Any);
        let scale = 1.0 / libm::sqrt(dk as f64);
        let s = r.random();
        let mut worst = 0.0f64;
        for slot in 0..3 {
            let (qc, kc, vc, sg) = (q.clone(), k.clone(), v.clone(), segs.clone());
            let x = [&q, &k, &v][slot].clone();
            let e = check(
                &move |t, x| {
                    let mut parts = [t.constant(qc.clone()), t.constant(kc.clone()), t.constant(vc.clone())];
                    parts[slot] = x;
                    t.causal_attention(parts[0], parts[1], parts[2], &sg, scale)
                },
                &x,
                s,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })?;
    Ok(reports)
}
