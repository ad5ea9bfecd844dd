use infomask::encoders::{attend, patchify, EncoderConfig, Forward, GateMode, ModelParams, EOS_ID, SOS_ID};
use infomask::masking::{
    sample_tube, spatial_interaction_mask, temporal_interaction_mask, InteractionMask, MaskLevel, TokenFlag,
};
use infomask::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> EncoderConfig {
    EncoderConfig {
        image_height: 8,
        image_width: 8,
        patch_size: 4,
        d_model: 16,
        n_heads: 2,
        embed_dim: 16,
        temporal_heads: 2,
        n_frames: 4,
        disc_hidden: 8,
        ..Default::default()
    }
}

fn frames(g: usize, c: &EncoderConfig, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn([g, c.image_height, c.image_width, 3], |_| rng.gen::<f64>()).unwrap()
}

fn flags(bits: &[bool]) -> Vec<TokenFlag> {
    bits.iter().map(|&m| if m { TokenFlag::Masked } else { TokenFlag::Unmasked }).collect()
}

fn spatial_tokens(p: &ModelParams, x: &Tensor, masks: Option<&[InteractionMask]>) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let fw = Forward::new(&tape, p, false);
    let out = fw.spatial_encode(&p.spatial, x, masks).unwrap();
    ((*out.tokens.value()).clone(), (*out.embeddings.value()).clone())
}

#[test]
fn sequence_length_for_small_grid() {
    let c = small();
    let p = ModelParams::init(&c, 0).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, &p, false);
    let x = infomask::encoders::patch_embed(&fw, &p.spatial, &Tensor::zeros([1, 8, 8, 3])).unwrap();
    assert_eq!(x.shape(), vec![1, 5, 16]);
}

#[test]
fn zero_frame_gives_positional_tokens() {
    let c = small();
    let p = ModelParams::init(&c, 1).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, &p, false);
    let x = infomask::encoders::patch_embed(&fw, &p.spatial, &Tensor::zeros([1, 8, 8, 3])).unwrap().value();
    let pos = p.store.get(p.spatial.pos);
    for t in 1..5 {
        for j in 0..16 {
            assert_eq!(x.at(&[0, t, j]), pos.at(&[t, j]));
        }
    }
}

#[test]
fn patch_permutation_moves_projected_tokens() {
    let c = small();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = frames(1, &c, &mut rng);
    // swap patch 0 (top-left) with patch 3 (bottom-right)
    let mut swapped = x.clone().into_data();
    for y in 0..4 {
        for xx in 0..4 {
            for ch in 0..3 {
                let a = (y * 8 + xx) * 3 + ch;
                let b = ((y + 4) * 8 + xx + 4) * 3 + ch;
                swapped.swap(a, b);
            }
        }
    }
    let swapped = Tensor::new([1, 8, 8, 3], swapped).unwrap();
    let (pa, pb) = (patchify(&x, 4).unwrap(), patchify(&swapped, 4).unwrap());
    let pd = 48;
    assert_eq!(pa.data()[..pd], pb.data()[3 * pd..]);
    assert_eq!(pa.data()[pd..3 * pd], pb.data()[pd..3 * pd]);

    let p = ModelParams::init(&c, 0).unwrap();
    let proj = |t: &Tensor| {
        let tape = Tape::new();
        let fw = Forward::new(&tape, &p, false);
        (*fw.linear(tape.constant(t.clone()), p.spatial.patch).unwrap().value()).clone()
    };
    let (ta, tb) = (proj(&pa), proj(&pb));
    let d = 16;
    assert_eq!(ta.data()[..d], tb.data()[3 * d..4 * d]);
    assert_eq!(ta.data()[3 * d..4 * d], tb.data()[..d]);
}

#[test]
fn identical_frames_identical_embeddings() {
    let c = small();
    let p = ModelParams::init(&c, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let one = frames(1, &c, &mut rng);
    let two = Tensor::new([2, 8, 8, 3], [one.data(), one.data()].concat()).unwrap();
    let (_, e) = spatial_tokens(&p, &two, None);
    assert_eq!(e.data()[..16], e.data()[16..]);
    let (_, single) = spatial_tokens(&p, &one, None);
    assert_eq!(single.data(), &e.data()[..16]);
}

#[test]
fn all_ones_gate_matches_ungated() {
    for renorm in [false, true] {
        let c = EncoderConfig { renormalize_gated_attention: renorm, ..small() };
        let p = ModelParams::init(&c, 4).unwrap();
        let x = frames(3, &c, &mut ChaCha8Rng::seed_from_u64(4));
        let ones: Vec<_> = (0..3).map(|_| InteractionMask::all_ones(MaskLevel::Spatial, 5)).collect();
        let (a, ea) = spatial_tokens(&p, &x, None);
        let (b, eb) = spatial_tokens(&p, &x, Some(&ones));
        assert_eq!(a, b);
        assert_eq!(ea, eb);
    }
}

#[test]
fn spatial_isolation_under_interaction_mask() {
    let c = small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let p = ModelParams::init(&c, trial).unwrap();
        let x = frames(1, &c, &mut rng);
        let bits: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.5)).collect();
        let mut f = vec![TokenFlag::Unmasked];
        f.extend(flags(&bits));
        let mask = [spatial_interaction_mask(&f).unwrap()];
        let mut perturbed = x.clone().into_data();
        for (pi, &m) in bits.iter().enumerate() {
            if !m {
                continue;
            }
            let (py, px) = (pi / 2 * 4, pi % 2 * 4);
            for y in py..py + 4 {
                for xx in px..px + 4 {
                    for ch in 0..3 {
                        perturbed[(y * 8 + xx) * 3 + ch] = rng.gen();
                    }
                }
            }
        }
        let perturbed = Tensor::new(x.shape().to_vec(), perturbed).unwrap();
        let (a, ea) = spatial_tokens(&p, &x, Some(&mask));
        let (b, eb) = spatial_tokens(&p, &perturbed, Some(&mask));
        for t in 0..5 {
            if f[t].is_masked() {
                continue;
            }
            for j in 0..16 {
                assert!((a.at(&[0, t, j]) - b.at(&[0, t, j])).abs() <= 1e-9);
            }
        }
        assert!(ea.max_abs_diff(&eb) <= 1e-9);
    }
}

#[test]
fn literal_gate_leaks_through_normalizer() {
    let c = EncoderConfig { renormalize_gated_attention: false, ..small() };
    let p = ModelParams::init(&c, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = frames(1, &c, &mut rng);
    let f = flags(&[false, true, false, false, false]);
    let mask = [spatial_interaction_mask(&f).unwrap()];
    let mut perturbed = x.clone().into_data();
    for y in 0..4 {
        for xx in 4..8 {
            for ch in 0..3 {
                perturbed[(y * 8 + xx) * 3 + ch] = 1.0 - perturbed[(y * 8 + xx) * 3 + ch];
            }
        }
    }
    let perturbed = Tensor::new(x.shape().to_vec(), perturbed).unwrap();
    let (_, ea) = spatial_tokens(&p, &x, Some(&mask));
    let (_, eb) = spatial_tokens(&p, &perturbed, Some(&mask));
    assert!(ea.max_abs_diff(&eb) > 1e-9);
}

#[test]
fn diagonal_gate_keeps_self_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let (t, dh) = (3, 2);
    let mk = |rng: &mut ChaCha8Rng| tape.constant(Tensor::from_fn([1, t, dh], |_| rng.gen::<f64>() - 0.5).unwrap());
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let (_, plain) = attend(q, k, v, 1, None, None, GateMode::Literal).unwrap();
    let eye = Tensor::new([1, t, t], Tensor::eye(t).into_data()).unwrap();
    let (ctx, _) = attend(q, k, v, 1, None, Some(&eye), GateMode::Literal).unwrap();
    let (a, vv, cv) = (plain.value(), v.value(), ctx.value());
    for i in 0..t {
        for j in 0..dh {
            let want = a.at(&[0, i, i]) * vv.at(&[0, i, j]);
            assert!((cv.at(&[0, i, j]) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn renormalized_gate_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::new();
    let mk = |rng: &mut ChaCha8Rng| tape.constant(Tensor::from_fn([2, 4, 3], |_| rng.gen::<f64>()).unwrap());
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let u = temporal_interaction_mask(&flags(&[false, true, true, false])).unwrap();
    let gate = Tensor::new([1, 4, 4], u.matrix().data().to_vec()).unwrap();
    let (_, a) = attend(q, k, v, 2, None, Some(&gate), GateMode::Renormalized).unwrap();
    let a = a.value();
    for row in a.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(a.at(&[0, 0, 1]), 0.0);
    assert_eq!(a.at(&[1, 3, 2]), 0.0);
}

fn cap(mid: &[usize]) -> Vec<usize> {
    let mut v = vec![SOS_ID];
    v.extend_from_slice(mid);
    v.push(EOS_ID);
    v
}

#[test]
fn text_shapes_and_validation() {
    let c = small();
    let p = ModelParams::init(&c, 0).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, &p, false);
    assert_eq!(fw.text_encode(&[vec![SOS_ID, EOS_ID]]).unwrap().shape(), vec![1, 2, 16]);
    let out = fw.text_encode(&[cap(&[5, 9, 12]), cap(&[5, 9, 12])]).unwrap().value();
    assert_eq!(out.data()[..80], out.data()[80..]);
    assert!(matches!(fw.text_encode(&[vec![SOS_ID, 5, 6]]), Err(infomask::Error::Input(_))));
    assert!(fw.text_encode(&[vec![7, 5, EOS_ID]]).is_err());
    assert!(fw.text_encode(&[vec![SOS_ID, 99, EOS_ID]]).is_err());
    assert!(fw.text_encode(&[cap(&[2, 3, 4, 5, 6, 7])]).is_err());
}

#[test]
fn causal_swap_affects_only_later_positions() {
    let c = small();
    let p = ModelParams::init(&c, 9).unwrap();
    let enc = |ids: Vec<usize>| {
        let tape = Tape::new();
        let fw = Forward::new(&tape, &p, false);
        (*fw.text_encode(&[ids]).unwrap().value()).clone()
    };
    let a = enc(cap(&[4, 8, 11, 15, 17]));
    let b = enc(cap(&[4, 11, 8, 15, 17]));
    let e = 16;
    for pos in 0..7 {
        let diff: f64 = (0..e).map(|j| (a.at(&[0, pos, j]) - b.at(&[0, pos, j])).abs()).fold(0.0, f64::max);
        if pos < 2 {
            assert_eq!(diff, 0.0, "position {pos}");
        } else {
            assert!(diff > 1e-9, "position {pos}");
        }
    }
}

#[test]
fn temporal_singleton_and_equivariance() {
    let c = EncoderConfig { n_frames: 1, ..small() };
    let p = ModelParams::init(&c, 0).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, &p, false);
    let x = tape.constant(Tensor::from_fn([1, 1, 16], |i| i as f64 / 16.0).unwrap());
    let pos = fw.var(p.temporal.pos);
    let h = x.add(pos.repeat_axis(0, 1).unwrap()).unwrap();
    let (_, a) = fw.block(&p.temporal.blocks[0], h, None, None).unwrap();
    assert!(a.value().data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    assert_eq!(fw.temporal_encode(x).unwrap().shape(), vec![1, 1, 16]);

    let c = small();
    let mut p = ModelParams::init(&c, 3).unwrap();
    p.store.set(p.temporal.pos, Tensor::zeros([4, 16])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::from_fn([1, 4, 16], |_| rng.gen::<f64>()).unwrap();
    let rev = Tensor::new([1, 4, 16], x.data().chunks(16).rev().flatten().copied().collect()).unwrap();
    let run = |t: &Tensor| {
        let tape = Tape::new();
        let fw = Forward::new(&tape, &p, false);
        (*fw.temporal_encode(tape.constant(t.clone())).unwrap().value()).clone()
    };
    let (a, b) = (run(&x), run(&rev));
    for f in 0..4 {
        for j in 0..16 {
            assert!((a.at(&[0, f, j]) - b.at(&[0, 3 - f, j])).abs() < 1e-12);
        }
    }
    assert_eq!(run(&x), run(&x));
}

#[test]
fn reconstructor_information_flow() {
    let c = small();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let p = ModelParams::init(&c, 100 + trial).unwrap();
        let (a_s, a_e) = sample_tube(4, &mut rng);
        let bits: Vec<bool> = (0..4).map(|f| (a_s..=a_e).contains(&f)).collect();
        let mask = [temporal_interaction_mask(&flags(&bits)).unwrap()];
        let x = Tensor::from_fn([1, 4, 16], |_| rng.gen::<f64>()).unwrap();
        let mut y = x.clone().into_data();
        y[a_s * 16..(a_s + 1) * 16].iter_mut().for_each(|v| *v = rng.gen());
        let y = Tensor::new([1, 4, 16], y).unwrap();
        let run = |t: &Tensor| {
            let tape = Tape::new();
            let fw = Forward::new(&tape, &p, false);
            (*fw.reconstruct(tape.constant(t.clone()), &mask).unwrap().value()).clone()
        };
        let (ra, rb) = (run(&x), run(&y));
        for f in 0..4 {
            let diff = (0..16).map(|j| (ra.at(&[0, f, j]) - rb.at(&[0, f, j])).abs()).fold(0.0, f64::max);
            if bits[f] {
                assert!(diff > 1e-9, "masked frame {f} should see masked changes");
            } else {
                assert!(diff <= 1e-9, "unmasked frame {f} changed by {diff}");
            }
        }
    }
}

#[test]
fn reconstructor_rejects_wrong_mask() {
    let c = small();
    let p = ModelParams::init(&c, 0).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, &p, false);
    let x = tape.constant(Tensor::zeros([1, 4, 16]));
    let wrong = [InteractionMask::all_ones(MaskLevel::Temporal, 3)];
    assert!(matches!(fw.reconstruct(x, &wrong), Err(infomask::Error::Contract(_))));
}

#[test]
fn zero_head_discriminator_is_uniform() {
    let c = small();
    let mut p = ModelParams::init(&c, 0).unwrap();
    p.store.set(p.discriminator.fc2.weight, Tensor::zeros([8, 2])).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, &p, false);
    let x = tape.constant(Tensor::from_fn([3, 4, 16], |i| (i as f64).sin()).unwrap());
    let d = fw.discriminate(x).unwrap().value();
    assert_eq!(d.shape(), &[3, 2]);
    assert!(d.data().iter().all(|&v| v == 0.5));

    let p = ModelParams::init(&c, 1).unwrap();
    let tape = Tape::new();
    let fw = Forward::new(&tape, &p, false);
    let d = fw.discriminate(x_tape(&tape)).unwrap().value();
    for row in d.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
    }
}

fn x_tape(tape: &Tape) -> infomask::numerics::Var<'_> {
    tape.constant(Tensor::from_fn([2, 4, 16], |i| (i as f64 * 0.37).cos()).unwrap())
}

#[test]
fn discriminator_grl_flips_encoder_gradient() {
    let c = small();
    let p = ModelParams::init(&c, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = frames(4, &c, &mut rng);
    let grads = |grl: bool| {
        let tape = Tape::new();
        let fw = Forward::new(&tape, &p, true);
        let e = fw.spatial_encode(&p.spatial, &x, None).unwrap().embeddings.reshape([1, 4, 16]).unwrap();
        let v = fw.temporal_encode(e).unwrap();
        let v = if grl { v.grl(1.0).unwrap() } else { v };
        let d = fw.discriminate(v).unwrap();
        let loss = d.select(1, 0).unwrap().log_clamped(1e-12).unwrap().sum_all().unwrap().neg().unwrap();
        let g = tape.backward(loss).unwrap();
        fw.param_grads(&g)
    };
    let (plain, rev) = (grads(false), grads(true));
    let disc: Vec<usize> = p
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.name.starts_with("discriminator"))
        .map(|(i, _)| i)
        .collect();
    for (i, (a, b)) in plain.iter().zip(&rev).enumerate() {
        for (x, y) in a.data().iter().zip(b.data()) {
            if disc.contains(&i) {
                assert_eq!(x, y);
            } else {
                assert!((x + y).abs() <= 1e-10 * x.abs().max(1.0));
            }
        }
    }
    let wp = p.spatial.patch.weight.index();
    assert!(plain[wp].data().iter().any(|v| v.abs() > 0.0));
}

#[test]
fn shared_spatial_leaf_accumulates_both_paths() {
    let c = small();
    let p = ModelParams::init(&c, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (x, y) = (frames(2, &c, &mut rng), frames(2, &c, &mut rng));
    let run = |which: u8| {
        let tape = Tape::new();
        let fw = Forward::new(&tape, &p, true);
        let mut loss = None;
        if which & 1 != 0 {
            loss = Some(fw.spatial_encode(&p.spatial, &x, None).unwrap().embeddings.sum_all().unwrap());
        }
        if which & 2 != 0 {
            let l = fw.spatial_encode(p.co_encoder(), &y, None).unwrap().embeddings.sum_all().unwrap();
            loss = Some(match loss {
                Some(a) => a.add(l).unwrap(),
                None => l,
            });
        }
        let g = tape.backward(loss.unwrap()).unwrap();
        fw.param_grads(&g)
    };
    let (a, b, both) = (run(1), run(2), run(3));
    for i in 0..a.len() {
        for ((x, y), z) in a[i].data().iter().zip(b[i].data()).zip(both[i].data()) {
            assert!((x + y - z).abs() < 1e-12);
        }
    }
}
