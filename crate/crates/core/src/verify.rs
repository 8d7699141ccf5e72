//! Self-check suite behind `iprompt verify`: gradient checks, loop oracles
//! for the matching operations, and the training invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_split, Split, SyntheticSpec};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::harness::{
    auc_acc, avg_acc, build_schedule, iprompt_logits, last_acc, Learner, LearnerConfig, Method,
    OffsetMode,
};
use crate::head::{
    importance_weights, masked_loss_on_tape, BoundHead, HeadParams, ImportanceSource, LogitMask,
};
use crate::numerics::{grad_check_many, Tensor, DEFAULT_STEP};
use crate::prompts::{
    attention_select, compose_prompt, querykey_select, semantic_match, BaselineMatcher,
    BoundLayerPool, BoundPool, Insertion, PoolConfig, PromptPool, SelectorKind,
};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Toy backbone: 8×8 single-channel images in 4×4 patches, `d = 16`, two
/// layers, both prompted.
pub fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 16,
        num_heads: 2,
        num_layers: 2,
        mlp_ratio: 2.0,
        prompted_layers: vec![0, 1],
    }
}

/// Largest relative error between tape gradients and central differences of
/// the masked I-Prompt loss, taken over every active key, prompt, `W_s`
/// entry and classifier weight of a toy model (`S = 4`, `L_p = 1`, two tasks
/// started so frozen and live chunks both contribute).
pub fn iprompt_gradient_check(seed: u64) -> Result<f64> {
    let cfg = toy_encoder_config();
    let d = cfg.embed_dim;
    let mut encoder = Encoder::new(cfg.clone(), seed)?;
    encoder.freeze();
    let pool_cfg = PoolConfig {
        pool_size: 4,
        prompt_length: 1,
        shared: false,
    };
    let mut pool = PromptPool::new(pool_cfg, d, &cfg.prompted_layers, 2)?;
    pool.start_task(0, seed)?;
    pool.start_task(1, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    let classes = 5;
    let head = HeadParams::new(classes, d, 4, seed)?;
    let images = Tensor::uniform(&[2, 1, 8, 8], 1.0, &mut rng);
    let mask = LogitMask::from_classes(classes, &[0, 2, 3])?;
    let labels = [2, 3];

    let mut inputs = Vec::new();
    for i in 0..pool.num_pools() {
        inputs.push(pool.active_keys(i)?);
        // larger than the init scale so the offsets actually move the output
        inputs.push(Tensor::uniform(
            pool.active_prompts(i)?.shape(),
            0.5,
            &mut rng,
        ));
    }
    inputs.push(Tensor::uniform(&[4], 1.0, &mut rng));
    inputs.push(head.weight.detached());
    inputs.push(Tensor::uniform(&[classes], 0.1, &mut rng));
    let n_pools = pool.num_pools();
    grad_check_many(
        |tape, vars| {
            let bound = BoundPool {
                pools: (0..n_pools)
                    .map(|i| Some(BoundLayerPool::from_vars(vars[2 * i], vars[2 * i + 1])))
                    .collect(),
            };
            let bh = BoundHead {
                importance: vars[2 * n_pools],
                weight: vars[2 * n_pools + 1],
                bias: vars[2 * n_pools + 2],
            };
            let (logits, _) = iprompt_logits(
                tape,
                &encoder,
                &pool,
                &bound,
                &bh,
                ImportanceSource::LastPrompted,
                OffsetMode::KeyValue,
                &images,
            )?;
            masked_loss_on_tape(tape, logits, &mask, &labels)
        },
        &inputs,
        DEFAULT_STEP,
    )
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

/// Worst absolute deviation of each matching operation from a plain-loop
/// oracle over `instances` random problems, in the order: semantic_match,
/// compose_prompt, querykey_select (count of disagreements), attention_select,
/// importance_weights.
pub fn matching_oracle_errors(instances: usize, seed: u64) -> Result<[(&'static str, f64); 5]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for inst in 0..instances {
        let d = rng.random_range(2..7);
        let lp = rng.random_range(1..3);
        let tasks = rng.random_range(1..4);
        let pool_size = rng.random_range(tasks..tasks + 5);
        let tokens = rng.random_range(2..6);
        let cfg = PoolConfig {
            pool_size,
            prompt_length: lp,
            shared: false,
        };
        let mut pool = PromptPool::new(cfg, d, &[0, 1], tasks)?;
        let upto = rng.random_range(0..tasks);
        for t in 0..=upto {
            pool.start_task(t, seed ^ inst as u64)?;
        }
        let layer = rng.random_range(0..2);
        let keys = pool.active_keys(layer)?;
        let prompts = pool.active_prompts(layer)?;
        let n = keys.shape()[0];
        let hk = Tensor::normal(&[tokens, d], 1.0, &mut rng);

        let w = semantic_match(&hk, &pool, layer)?;
        for r in 0..tokens {
            for i in 0..n {
                worst[0] = worst[0].max((w.at(&[r, i]) - cos(hk.row(r), keys.row(i))).abs());
            }
        }

        let weights = Tensor::normal(&[tokens, n], 1.0, &mut rng);
        let (k, v) = compose_prompt(&weights, &pool, layer, upto)?;
        for r in 0..tokens {
            for c in 0..d {
                let (mut ek, mut ev) = (0.0, 0.0);
                if r != 0 {
                    for i in 0..n {
                        for j in 0..lp {
                            ek += weights.at(&[r, i]) * prompts.at(&[i, j * d + c]);
                            ev += weights.at(&[r, i]) * prompts.at(&[i, (lp + j) * d + c]);
                        }
                    }
                }
                worst[1] = worst[1]
                    .max((k.at(&[r, c]) - ek).abs())
                    .max((v.at(&[r, c]) - ev).abs());
            }
        }

        let seen = upto + 1;
        let mut qk = BaselineMatcher::new(
            SelectorKind::QueryKey,
            Insertion::Prefix,
            d,
            lp,
            &[0, 1],
            tasks,
        )?;
        let mut att = BaselineMatcher::new(
            SelectorKind::Attention,
            Insertion::Prefix,
            d,
            lp,
            &[0, 1],
            tasks,
        )?;
        for t in 0..seen {
            qk.start_task(t, inst as u64)?;
            att.start_task(t, inst as u64)?;
        }
        for t in 0..seen {
            att.attention[t] = Tensor::normal(&[d], 1.0, &mut rng);
        }
        // duplicate a key now and then to exercise tie-breaking
        if seen > 1 && inst % 3 == 0 {
            qk.keys[seen - 1] = qk.keys[0].clone();
        }
        let q = Tensor::normal(&[d], 1.0, &mut rng);
        let picked = querykey_select(&q, &qk, seen)?;
        let mut best = 0;
        for i in 1..seen {
            if cos(q.data(), qk.keys[i].data()) > cos(q.data(), qk.keys[best].data()) {
                best = i;
            }
        }
        worst[2] += (picked != best) as usize as f64;

        let mixed = attention_select(&q, &att, seen)?;
        for (slot, m) in mixed.iter().enumerate() {
            for r in 0..2 * lp {
                for c in 0..d {
                    let mut e = 0.0;
                    for i in 0..seen {
                        let qa: Vec<f64> = q
                            .data()
                            .iter()
                            .zip(att.attention[i].data())
                            .map(|(a, b)| a * b)
                            .collect();
                        e += cos(&qa, att.keys[i].data()) * att.blocks[i][slot].at(&[r, c]);
                    }
                    worst[3] = worst[3].max((m.at(&[r, c]) - e).abs());
                }
            }
        }

        let w_s = Tensor::normal(&[n], 1.0, &mut rng);
        let s = importance_weights(&hk, &keys, &w_s)?;
        let scores: Vec<f64> = (1..tokens)
            .map(|t| {
                (0..n)
                    .map(|j| w_s.data()[j] * cos(hk.row(t), keys.row(j)))
                    .sum()
            })
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
        for (t, sc) in scores.iter().enumerate() {
            worst[4] = worst[4].max((s.data()[t] - (sc - m).exp() / z).abs());
        }
    }
    Ok([
        ("semantic_match", worst[0]),
        ("compose_prompt", worst[1]),
        ("querykey_select", worst[2]),
        ("attention_select", worst[3]),
        ("importance_weights", worst[4]),
    ])
}

fn toy_batch(seed: u64, classes: usize) -> Result<(crate::data::Dataset, Encoder)> {
    let cfg = toy_encoder_config();
    let spec = SyntheticSpec {
        num_classes: classes,
        per_class_count: 4,
        image_size: cfg.image_size,
        channels: cfg.channels,
        seed,
        ..SyntheticSpec::default()
    };
    Ok((
        generate_split(&spec, Split::Train)?,
        Encoder::new(cfg, seed)?,
    ))
}

/// One training step of `method` on a toy model; returns the encoder
/// invocations it cost and the largest gradient on a masked-out classifier
/// row.
pub fn probe_step(method: Method, seed: u64) -> Result<(u64, f64)> {
    let (data, encoder) = toy_batch(seed, 4)?;
    let lc = LearnerConfig {
        method,
        pool: PoolConfig {
            pool_size: 4,
            prompt_length: 1,
            shared: false,
        },
        ..LearnerConfig::default()
    };
    let mut learner = Learner::new(lc, encoder, 4, 2, seed)?;
    learner.start_task(0)?;
    learner.encoder.reset_forward_passes();
    let mask = LogitMask::from_classes(4, &[0, 1])?;
    let idx: Vec<usize> = (0..8).collect();
    let (x, y) = data.batch(&idx)?;
    learner.accumulate_step(&x, &y, &mask)?;
    let passes = learner.encoder.forward_passes();
    let g = learner
        .head
        .weight
        .grad()
        .ok_or_else(|| Error::State("classifier has no gradient buffer".into()))?;
    let d = learner.head.weight.shape()[1];
    let leak = (2..4)
        .flat_map(|c| g[c * d..(c + 1) * d].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((passes, leak))
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check {
            name,
            passed,
            detail,
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check; the suite passes when all do.
pub fn run_suite() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(check("gradients", || {
        let err = iprompt_gradient_check(7)?;
        Ok((err < 1e-4, format!("max relative error {err:.2e}")))
    }));
    out.push(check("matching oracles", || {
        let errs = matching_oracle_errors(20, 11)?;
        let ok = errs.iter().all(|&(_, e)| e <= 1e-12);
        let detail = errs
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((ok, detail))
    }));
    out.push(check("forward passes", || {
        let (ip, _) = probe_step(Method::IPrompt, 3)?;
        let (qk, _) = probe_step(Method::QueryKey, 3)?;
        Ok((
            ip == 1 && qk == 2,
            format!("iprompt {ip}, querykey {qk} per step"),
        ))
    }));
    out.push(check("logit mask", || {
        let mut worst: f64 = 0.0;
        for m in Method::ALL {
            worst = worst.max(probe_step(m, 5)?.1);
        }
        Ok((
            worst == 0.0,
            format!("largest masked-row gradient {worst:e}"),
        ))
    }));
    out.push(check("metrics", || {
        let ok = avg_acc(&[0.8, 0.7])? == 0.75
            && last_acc(&[0.8, 0.7])? == 0.7
            && (auc_acc(&[(10, 0.42), (20, 0.42), (35, 0.42)])? - 0.42).abs() < 1e-12;
        Ok((ok, "avg, last and flat-curve AUC".into()))
    }));
    out.push(check("parameter counts", || {
        let (_, encoder) = toy_batch(1, 4)?;
        let lc = LearnerConfig {
            pool: PoolConfig {
                pool_size: 4,
                prompt_length: 1,
                shared: false,
            },
            ..LearnerConfig::default()
        };
        let l = Learner::new(lc, encoder.clone(), 4, 2, 0)?;
        let d = 16;
        let want = 4 * 3 * d * 2 + 4 * d + 4 + 4;
        let pc = l.param_counts();
        let ok = pc.learnable == want && pc.total == want + encoder.params().param_count();
        Ok((ok, format!("learnable {} (expected {want})", pc.learnable)))
    }));
    out.push(check("schedules", || {
        for seed in 0..100 {
            for spec in ["B0-Inc3", "uniform", "fluctuating", "random-increase"] {
                let s = build_schedule(spec, 20, seed)?;
                let mut all: Vec<usize> = s.tasks.concat();
                all.sort_unstable();
                if all != (0..20).collect::<Vec<_>>() {
                    return Ok((false, format!("{spec} seed {seed} is not a partition")));
                }
            }
        }
        Ok((true, "partitions over 100 seeds".into()))
    }));
    out.push(check("snapshot round trip", || {
        let (data, encoder) = toy_batch(2, 3)?;
        let mut pool = PromptPool::new(PoolConfig::default(), 16, &[0, 1], 2)?;
        pool.start_task(0, 1)?;
        let bytes = crate::snapshot::to_bytes(&encoder, Some(&pool))?;
        let (e2, p2) = crate::snapshot::from_bytes(&bytes)?;
        let ds = crate::data::from_bytes(&crate::data::to_bytes(&data)?)?;
        let ok = e2.params().fingerprint() == encoder.params().fingerprint()
            && p2.as_ref() == Some(&pool)
            && ds.pixels() == data.pixels();
        Ok((ok, "backbone, pool and dataset".into()))
    }));
    out
}
