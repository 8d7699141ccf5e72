use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{mhsa, Encoder, EncoderConfig, LayerPrompt};
use crate::error::Error;
use crate::numerics::{grad_check_many, Tape, Tensor, Var, DEFAULT_STEP};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

fn pool(s: usize, lp: usize, d: usize, tasks: usize) -> PromptPool {
    let cfg = PoolConfig {
        pool_size: s,
        prompt_length: lp,
        shared: false,
    };
    PromptPool::new(cfg, d, &[0, 1], tasks).unwrap()
}

#[test]
fn chunks_split_evenly_with_remainder_last() {
    assert_eq!(chunk_sizes(100, 10), vec![10; 10]);
    assert_eq!(chunk_sizes(10, 3), vec![3, 3, 4]);
    let p = pool(100, 2, 4, 10);
    assert!(p.chunks().iter().all(|c| c.len() == 10));
    let covered: Vec<usize> = p.chunks().iter().flat_map(|c| c.clone()).collect();
    assert_eq!(covered, (0..100).collect::<Vec<_>>());
    assert_eq!(p.chunk_of(57), Some(5));
}

#[test]
fn start_task_enforces_order() {
    let mut p = pool(8, 1, 4, 4);
    assert!(matches!(p.start_task(1, 0), Err(Error::Protocol(_))));
    p.start_task(0, 0).unwrap();
    p.start_task(1, 0).unwrap();
    assert!(matches!(p.start_task(3, 0), Err(Error::Protocol(_))));
    assert!(matches!(p.start_task(1, 0), Err(Error::Protocol(_))));
    p.start_task(2, 0).unwrap();
    p.start_task(3, 0).unwrap();
    assert!(matches!(p.start_task(4, 0), Err(Error::Protocol(_))));
}

#[test]
fn start_task_initializes_small_prompts_and_unit_keys() {
    let mut p = pool(8, 2, 5, 2);
    p.start_task(0, 11).unwrap();
    let lp = &p.pools()[0];
    assert!(lp.prompts[0].data().iter().all(|v| v.abs() <= PROMPT_INIT));
    for r in 0..4 {
        let n: f64 = lp.keys[0].row(r).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
    assert!(lp.keys[1].data().iter().all(|&v| v == 0.0));
    assert!(lp.keys[0].requires_grad());
    p.start_task(1, 11).unwrap();
    assert!(!p.pools()[0].keys[0].requires_grad());
    assert!(!p.pools()[1].prompts[0].requires_grad());
    assert!(p.pools()[1].prompts[1].requires_grad());
}

#[test]
fn shared_pool_serves_every_layer() {
    let cfg = PoolConfig {
        pool_size: 4,
        prompt_length: 1,
        shared: true,
    };
    let p = PromptPool::new(cfg, 3, &[0, 2], 2).unwrap();
    assert_eq!(p.num_pools(), 1);
    assert_eq!(p.pool_index(2).unwrap(), 0);
    assert!(p.pool_index(1).is_err());
    assert_eq!(p.learnable_count(), 4 * 3 * 3);
}

#[test]
fn semantic_match_one_hot_and_scale_invariant() {
    let d = 4;
    let mut p = pool(4, 1, d, 1);
    p.start_task(0, 0).unwrap();
    let keys = Tensor::eye(4);
    p.pools_mut()[0].keys[0] = keys;
    let hk = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.3, -1.0, 2.0, 0.5]]).unwrap();
    let w = semantic_match(&hk, &p, 0).unwrap();
    assert_eq!(w.row(0), &[0.0, 1.0, 0.0, 0.0]);
    let scaled = Tensor::from_rows(&[vec![0.0, 3.0, 0.0, 0.0], vec![0.9, -3.0, 6.0, 1.5]]).unwrap();
    let ws = semantic_match(&scaled, &p, 0).unwrap();
    assert!(w.max_abs_diff(&ws) < 1e-15);
    assert!(matches!(semantic_match(&hk, &p, 5), Err(Error::Usage(_))));
}

#[test]
fn semantic_match_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 6;
    let mut p = pool(4, 1, d, 1);
    p.start_task(0, 3).unwrap();
    let hk = Tensor::normal(&[5, d], 1.0, &mut rng);
    let w = semantic_match(&hk, &p, 1).unwrap();
    let keys = &p.pools()[1].keys[0];
    for t in 0..5 {
        for i in 0..4 {
            assert!((w.at(&[t, i]) - cos(hk.row(t), keys.row(i))).abs() < 1e-12);
        }
    }
}

#[test]
fn compose_single_prompt_reproduces_its_rows() {
    let d = 3;
    let mut p = pool(1, 1, d, 1);
    p.start_task(0, 0).unwrap();
    let prompt = p.pools()[0].prompts[0].clone();
    let w = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
    let (k, v) = compose_prompt(&w, &p, 0, 0).unwrap();
    assert_eq!(k.row(0), &[0.0; 3]);
    assert_eq!(v.row(0), &[0.0; 3]);
    assert_eq!(k.row(1), &prompt.data()[..3]);
    assert_eq!(v.row(1), &prompt.data()[3..]);
}

#[test]
fn compose_two_prompts_hand_sum() {
    let d = 2;
    let lp = 2;
    let mut p = pool(2, lp, d, 1);
    p.start_task(0, 9).unwrap();
    let pr = p.pools()[0].prompts[0].clone();
    let w = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    let (k, v) = compose_prompt(&w, &p, 0, 0).unwrap();
    for c in 0..d {
        // prompt i row layout: [k0, k1, v0, v1] blocks of width d
        let key: f64 = (0..2)
            .map(|i| 0.5 * (pr.at(&[i, c]) + pr.at(&[i, d + c])))
            .sum();
        let val: f64 = (0..2)
            .map(|i| 0.5 * (pr.at(&[i, 2 * d + c]) + pr.at(&[i, 3 * d + c])))
            .sum();
        assert!((k.at(&[1, c]) - key).abs() < 1e-12);
        assert!((v.at(&[1, c]) - val).abs() < 1e-12);
    }
}

#[test]
fn compose_requires_current_task() {
    let mut p = pool(4, 1, 2, 2);
    let w = Tensor::zeros(&[2, 2]);
    assert!(matches!(compose_prompt(&w, &p, 0, 0), Err(Error::State(_))));
    p.start_task(0, 0).unwrap();
    p.start_task(1, 0).unwrap();
    assert!(matches!(
        compose_prompt(&Tensor::zeros(&[2, 4]), &p, 0, 0),
        Err(Error::State(_))
    ));
    assert!(compose_prompt(&Tensor::zeros(&[2, 4]), &p, 0, 1).is_ok());
}

#[test]
fn zero_weights_leave_encoder_unchanged() {
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        mlp_ratio: 2.0,
        prompted_layers: vec![0, 1],
    };
    let enc = Encoder::new(cfg.clone(), 0).unwrap();
    let mut p = pool(4, 2, 8, 1);
    p.start_task(0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imgs = Tensor::uniform(&[2, 1, 8, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let plain = enc.forward(&mut tape, &imgs, None, None).unwrap();
    let bound = p.bind(&mut tape).unwrap();
    let tokens = cfg.num_tokens();
    let mut hook = |t: &mut Tape, _l: usize, _hk: Var| -> crate::Result<Option<LayerPrompt>> {
        let b = bound.get(0).unwrap();
        let w = t.constant(&Tensor::zeros(&[2 * tokens, 4]));
        let (key, value) = compose_offsets(t, w, b.prompts, 2, 8, tokens)?;
        Ok(Some(LayerPrompt::Additive { key, value }))
    };
    let prompted = enc
        .forward(&mut tape, &imgs, None, Some(&mut hook))
        .unwrap();
    assert_eq!(tape.value(plain.output), tape.value(prompted.output));
}

#[test]
fn compose_is_invariant_to_chunk_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, lp, n) = (3, 2, 6);
    let w = Tensor::normal(&[4, n], 1.0, &mut rng);
    let prompts = Tensor::normal(&[n, 2 * lp * d], 1.0, &mut rng);
    let perm = [3, 4, 5, 0, 1, 2];
    let wp = Tensor::new(
        &[4, n],
        (0..4)
            .flat_map(|r| perm.iter().map(move |&c| (r, c)))
            .map(|(r, c)| w.at(&[r, c]))
            .collect(),
    )
    .unwrap();
    let pp = Tensor::new(
        &[n, 2 * lp * d],
        perm.iter().flat_map(|&i| prompts.row(i).to_vec()).collect(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let run = |tape: &mut Tape, w: &Tensor, p: &Tensor| {
        let (w, p) = (tape.constant(w), tape.constant(p));
        let (k, v) = compose_offsets(tape, w, p, lp, d, 2).unwrap();
        (tape.tensor(k), tape.tensor(v))
    };
    let (k1, v1) = run(&mut tape, &w, &prompts);
    let (k2, v2) = run(&mut tape, &wp, &pp);
    assert!(k1.max_abs_diff(&k2) < 1e-12);
    assert!(v1.max_abs_diff(&v2) < 1e-12);
}

#[test]
fn matching_gradients_reach_keys_prompts_and_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, lp, n, rows) = (4, 2, 3, 6);
    let inputs = vec![
        Tensor::normal(&[rows, d], 1.0, &mut rng),
        Tensor::normal(&[n, d], 1.0, &mut rng),
        Tensor::normal(&[n, 2 * lp * d], 1.0, &mut rng),
    ];
    let probe = Tensor::normal(&[rows, d], 1.0, &mut rng);
    let err = grad_check_many(
        |t, v| {
            let w = semantic_weights(t, v[0], v[1])?;
            let (k, val) = compose_offsets(t, w, v[2], lp, d, 3)?;
            let s = t.add(k, val)?;
            let pr = t.constant(&probe);
            let m = t.mul(s, pr)?;
            t.sum(m)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn frozen_chunks_get_no_gradient() {
    let mut p = pool(4, 1, 3, 2);
    p.start_task(0, 0).unwrap();
    p.start_task(1, 0).unwrap();
    let before = p.chunk_bytes(0);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape).unwrap();
    let b = bound.get(0).unwrap().clone();
    let s = tape.sum(b.prompts).unwrap();
    let s2 = tape.sum(b.keys).unwrap();
    let tot = tape.add(s, s2).unwrap();
    tape.backward(tot).unwrap();
    p.accumulate_grads(&tape, &bound).unwrap();
    assert!(p.pools()[0].prompts[0].grad().is_none());
    assert!(p.pools()[0].prompts[1]
        .grad()
        .unwrap()
        .iter()
        .all(|&g| g == 1.0));
    assert_eq!(p.chunk_bytes(0), before);
}

fn matcher(kind: SelectorKind, d: usize, tasks: usize, seed: u64) -> BaselineMatcher {
    let mut m = BaselineMatcher::new(kind, Insertion::Prefix, d, 1, &[0, 1], tasks).unwrap();
    for t in 0..tasks {
        m.start_task(t, seed).unwrap();
    }
    m
}

#[test]
fn querykey_picks_matching_key() {
    let m = matcher(SelectorKind::QueryKey, 5, 4, 1);
    assert_eq!(querykey_select(&m.keys[2], &m, 4).unwrap(), 2);
    let scaled = Tensor::vector(m.keys[2].data().iter().map(|v| v * 10.0).collect());
    assert_eq!(querykey_select(&scaled, &m, 4).unwrap(), 2);
    assert!(matches!(
        querykey_select(&m.keys[2], &m, 0),
        Err(Error::Usage(_))
    ));
    // restricted to seen tasks
    assert!(querykey_select(&m.keys[3], &m, 2).unwrap() < 2);
}

#[test]
fn querykey_ties_go_to_lowest_index() {
    let mut m = matcher(SelectorKind::QueryKey, 3, 3, 1);
    m.keys[1] = m.keys[0].clone();
    m.keys[2] = m.keys[0].clone();
    assert_eq!(querykey_select(&m.keys[0], &m, 3).unwrap(), 0);
}

#[test]
fn querykey_matches_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for s in 0..20 {
        let m = matcher(SelectorKind::QueryKey, 6, 4, s);
        let q = Tensor::normal(&[6], 1.0, &mut rng);
        let scores: Vec<f64> = m.keys.iter().map(|k| cos(q.data(), k.data())).collect();
        let mut best = 0;
        for i in 1..4 {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        assert_eq!(querykey_select(&q, &m, 4).unwrap(), best);
    }
}

#[test]
fn attention_select_reductions() {
    let m = matcher(SelectorKind::Attention, 4, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = Tensor::normal(&[4], 1.0, &mut rng);
    // all-ones attention: plain cosine weights
    let mixed = attention_select(&q, &m, 1).unwrap();
    let g = cos(q.data(), m.keys[0].data());
    for (slot, block) in mixed.iter().enumerate() {
        for (a, b) in block.data().iter().zip(m.blocks[0][slot].data()) {
            assert!((a - g * b).abs() < 1e-12);
        }
    }
    let qk = matcher(SelectorKind::QueryKey, 4, 1, 0);
    assert!(attention_select(&q, &qk, 1).is_err());
}

#[test]
fn attention_select_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = matcher(SelectorKind::Attention, 5, 3, 4);
    for a in &mut m.attention {
        *a = Tensor::normal(&[5], 1.0, &mut rng);
    }
    let q = Tensor::normal(&[5], 1.0, &mut rng);
    let mixed = attention_select(&q, &m, 3).unwrap();
    for slot in 0..2 {
        let mut expect = vec![0.0; 10];
        for i in 0..3 {
            let qa: Vec<f64> = q
                .data()
                .iter()
                .zip(m.attention[i].data())
                .map(|(a, b)| a * b)
                .collect();
            let g = cos(&qa, m.keys[i].data());
            for (e, p) in expect.iter_mut().zip(m.blocks[i][slot].data()) {
                *e += g * p;
            }
        }
        for (a, b) in mixed[slot].data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn baseline_freezes_earlier_tasks() {
    let m = matcher(SelectorKind::Attention, 4, 3, 2);
    assert!(!m.keys[0].requires_grad());
    assert!(!m.blocks[1][0].requires_grad());
    assert!(m.attention[2].requires_grad());
    assert_eq!(m.learnable_count(), 3 * (4 + 4 + 2 * 2 * 4));
}

#[test]
fn gathered_blocks_follow_selected_tasks() {
    let m = matcher(SelectorKind::QueryKey, 2, 3, 5);
    let mut tape = Tape::new();
    let b = m.bind(&mut tape).unwrap();
    let g = gather_blocks(&mut tape, b.stacked[1], &[2, 0], 1).unwrap();
    let prefix = prefix_prompt(&mut tape, g, 2, 1).unwrap();
    let LayerPrompt::Prefix { key, value, rows } = prefix else {
        panic!("expected prefix");
    };
    assert_eq!(rows, 1);
    assert_eq!(
        tape.value(key),
        [m.blocks[2][1].row(0), m.blocks[0][1].row(0)].concat()
    );
    assert_eq!(
        tape.value(value),
        [m.blocks[2][1].row(1), m.blocks[0][1].row(1)].concat()
    );
}

#[test]
fn prompt_tuning_shape_law() {
    let mut tape = Tape::new();
    let h = tape.constant(&Tensor::zeros(&[2 * 17, 4]));
    let p = tape.constant(&Tensor::zeros(&[2, 4]));
    let out = insert_prompt_tuning(&mut tape, h, p, 2, 17, 2).unwrap();
    assert_eq!(tape.shape(out), &[2 * 19, 4]);
}

fn identity_layer(d: usize) -> Encoder {
    let cfg = EncoderConfig {
        image_size: 4,
        patch_size: 4,
        channels: 1,
        embed_dim: d,
        num_heads: 1,
        num_layers: 1,
        mlp_ratio: 1.0,
        prompted_layers: vec![0],
    };
    let mut enc = Encoder::new(cfg, 0).unwrap();
    let l = &mut enc.params_mut().layers[0];
    for w in [&mut l.w_q, &mut l.w_k, &mut l.w_v, &mut l.w_o] {
        *w = Tensor::eye(d);
    }
    enc
}

#[test]
fn prefix_attention_matches_hand_computation() {
    let d = 2;
    let enc = identity_layer(d);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::normal(&[2, d], 1.0, &mut rng);
    let pk = Tensor::normal(&[1, d], 1.0, &mut rng);
    let pv = Tensor::normal(&[1, d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let lp = enc.params().bind(&mut tape).layers[0].clone();
    let h = tape.constant(&x);
    let (kv, vv) = (tape.constant(&pk), tape.constant(&pv));
    let (out, _) = mhsa(&mut tape, h, &lp, 1, 1, &mut |_, _| {
        Ok(Some(LayerPrompt::Prefix {
            key: kv,
            value: vv,
            rows: 1,
        }))
    })
    .unwrap();
    assert_eq!(tape.shape(out), &[2, d]);

    let ln = |r: &[f64]| -> Vec<f64> {
        let m = (r[0] + r[1]) / 2.0;
        let var = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
        r.iter().map(|v| (v - m) / (var + 1e-6).sqrt()).collect()
    };
    let n: Vec<Vec<f64>> = (0..2).map(|i| ln(x.row(i))).collect();
    let keys = [n[0].clone(), n[1].clone(), pk.row(0).to_vec()];
    let vals = [n[0].clone(), n[1].clone(), pv.row(0).to_vec()];
    for i in 0..2 {
        let s: Vec<f64> = keys
            .iter()
            .map(|k| (n[i][0] * k[0] + n[i][1] * k[1]) / (d as f64).sqrt())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for c in 0..d {
            let e: f64 = (0..3).map(|j| s[j].exp() / z * vals[j][c]).sum();
            assert!((tape.value(out)[i * d + c] - e).abs() < 1e-10);
        }
    }

    // zero prefix rows still take softmax mass
    let zero = tape.constant(&Tensor::zeros(&[1, d]));
    let (with_zero, _) = mhsa(&mut tape, h, &lp, 1, 1, &mut |_, _| {
        Ok(Some(LayerPrompt::Prefix {
            key: zero,
            value: zero,
            rows: 1,
        }))
    })
    .unwrap();
    let (plain, _) = mhsa(&mut tape, h, &lp, 1, 1, &mut |_, _| Ok(None)).unwrap();
    assert_ne!(tape.value(with_zero), tape.value(plain));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_stay_in_unit_interval(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = pool(6, 1, 4, 2);
        p.start_task(0, seed).unwrap();
        p.start_task(1, seed).unwrap();
        let hk = Tensor::normal(&[5, 4], scale, &mut rng);
        let w = semantic_match(&hk, &p, 0).unwrap();
        prop_assert!(w.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn querykey_invariant_to_key_scaling(seed in any::<u64>(), c in 1e-3f64..1e3, which in 0usize..4) {
        let mut m = matcher(SelectorKind::QueryKey, 5, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::normal(&[5], 1.0, &mut rng);
        let before = querykey_select(&q, &m, 4).unwrap();
        m.keys[which].data_mut().iter_mut().for_each(|v| *v *= c);
        prop_assert_eq!(querykey_select(&q, &m, 4).unwrap(), before);
    }
}
