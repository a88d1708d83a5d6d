use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::vq::VqConfig;

fn small(vq: &VqModel) -> VarConfig {
    VarConfig {
        blocks: 2,
        width: 32,
        heads: 4,
        mlp_ratio: 2,
        ..VarConfig::for_vq(vq)
    }
}

fn random_maps(schedule: &ScaleSchedule, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<TokenMap> {
    schedule
        .scales()
        .iter()
        .enumerate()
        .map(|(k, &(h, w))| TokenMap::new(k, h, w, (0..h * w).map(|_| rng.random_range(0..vocab)).collect()).unwrap())
        .collect()
}

fn setup(seed: u64) -> (VqModel, VarModel, ChaCha8Rng) {
    let vq = VqModel::new(VqConfig::default(), seed).unwrap();
    let var = VarModel::new(small(&vq), seed + 1).unwrap();
    (vq, var, ChaCha8Rng::seed_from_u64(seed + 2))
}

#[test]
fn mask_is_block_causal() {
    let s = ScaleSchedule::geometric(8).unwrap();
    let m = sequence_mask(&s, 4).unwrap();
    assert_eq!(m.size(), 170);
    for q in 0..170 {
        for k in 0..170 {
            let want = if k < 85 {
                true
            } else if q < 85 {
                false
            } else {
                let scale = |i: usize| [0usize, 1, 5, 21, 85].iter().rposition(|&o| i - 85 >= o).unwrap();
                scale(k) <= scale(q)
            };
            assert_eq!(m.allows(q, k), want, "{q} {k}");
        }
    }
    assert_eq!(sequence_mask(&s, 2).unwrap().size(), 90);
}

#[test]
fn first_scale_input_is_the_start_embedding() {
    let (vq, var, mut rng) = setup(1);
    let img = random_maps(vq.schedule(), 64, &mut rng);
    let inputs = build_inputs(&[], &img, &vq).unwrap();
    assert!(inputs.depth.is_empty());
    let mut g = Graph::new();
    let p = var.params().bind(&mut g, false);
    let content = var.content_on(&mut g, &p, &inputs).unwrap();
    let v = g.value(content);
    assert_eq!(v.shape(), &[86, 32]);
    assert_eq!(&v.data()[85 * 32..], var.start_embedding().data());
}

#[test]
fn build_inputs_is_deterministic_and_validates() {
    let (vq, _, mut rng) = setup(2);
    let img = random_maps(vq.schedule(), 64, &mut rng);
    let z = random_maps(vq.schedule(), 64, &mut rng);
    let a = build_inputs(&z[..3], &img, &vq).unwrap();
    let b = build_inputs(&z[..3], &img, &vq).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.digest(), b.digest());
    assert_eq!(
        a.depth.iter().map(|t| t.shape()[0]).collect::<Vec<_>>(),
        vec![4, 16, 64]
    );
    assert!(matches!(build_inputs(&z, &img, &vq), Err(Error::Schedule(_))));
    assert!(matches!(build_inputs(&z[1..2], &img, &vq), Err(Error::Schedule(_))));
    assert!(build_inputs(&[], &img[..3], &vq).is_err());
}

#[test]
fn scale_input_ignores_maps_at_its_own_and_later_scales() {
    let (vq, _, mut rng) = setup(3);
    let img = random_maps(vq.schedule(), 64, &mut rng);
    let z = random_maps(vq.schedule(), 64, &mut rng);
    for k in 0..3 {
        let mut z2 = z.clone();
        for m in &mut z2[k..] {
            for i in m.indices.iter_mut() {
                *i = (*i + 1 + rng.random_range(0..63)) % 64;
            }
        }
        let a = build_inputs(&z[..3], &img, &vq).unwrap();
        let b = build_inputs(&z2[..3], &img, &vq).unwrap();
        // depth[j] is the input for scale j + 1, built from maps 0..=j.
        for j in 0..k {
            assert_eq!(a.depth[j], b.depth[j], "k={k} j={j}");
        }
        assert_ne!(a.depth[k], b.depth[k]);
    }
}

#[test]
fn later_scales_do_not_change_earlier_logits() {
    let (vq, var, mut rng) = setup(4);
    let img = random_maps(vq.schedule(), 64, &mut rng);
    let z = random_maps(vq.schedule(), 64, &mut rng);
    let base = var.forward(&[build_inputs(&z[..3], &img, &vq).unwrap()]).unwrap();
    for k in 0..3 {
        let mut z2 = z.clone();
        for m in &mut z2[k..] {
            for i in m.indices.iter_mut() {
                *i = rng.random_range(0..64);
            }
        }
        let out = var.forward(&[build_inputs(&z2[..3], &img, &vq).unwrap()]).unwrap();
        // Scales 0..=k consume inputs from maps < k only.
        let n = var.config().depth_len(k + 1) * 64;
        assert_eq!(&base.data()[..n], &out.data()[..n], "k={k}");
    }
}

#[test]
fn image_tokens_reach_every_scale_and_rows_normalise() {
    let (vq, var, mut rng) = setup(5);
    let img = random_maps(vq.schedule(), 64, &mut rng);
    let img2 = random_maps(vq.schedule(), 64, &mut rng);
    let z = random_maps(vq.schedule(), 64, &mut rng);
    let a = var.forward(&[build_inputs(&z[..3], &img, &vq).unwrap()]).unwrap();
    let b = var.forward(&[build_inputs(&z[..3], &img2, &vq).unwrap()]).unwrap();
    for k in 0..4 {
        let (off, n) = (vq.schedule().offset(k), vq.schedule().tokens(k));
        let rows = off * 64..(off + n) * 64;
        assert_ne!(&a.data()[rows.clone()], &b.data()[rows]);
    }
    for row in a.data().chunks(64) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let s: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
        let total: f64 = row.iter().map(|&v| ((v - m) as f64).exp() / s).sum();
        assert!((total - 1.0).abs() < 1e-5);
    }
}

#[test]
fn batched_forward_matches_single_samples() {
    let (vq, var, mut rng) = setup(6);
    let inputs: Vec<SampleInputs> = (0..3)
        .map(|_| {
            let img = random_maps(vq.schedule(), 64, &mut rng);
            let z = random_maps(vq.schedule(), 64, &mut rng);
            build_inputs(&z[..2], &img, &vq).unwrap()
        })
        .collect();
    let all = var.forward(&inputs).unwrap();
    let n = var.config().depth_len(3) * 64;
    for (i, s) in inputs.iter().enumerate() {
        let one = var.forward(std::slice::from_ref(s)).unwrap();
        let diff = one
            .data()
            .iter()
            .zip(&all.data()[i * n..(i + 1) * n])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(diff < 1e-5);
    }
}

#[test]
fn infer_is_deterministic_and_takes_one_pass_per_scale() {
    let (vq, var, mut rng) = setup(7);
    let imgs: Vec<Vec<TokenMap>> = (0..2).map(|_| random_maps(vq.schedule(), 64, &mut rng)).collect();
    let before = var.forward_count();
    let a = var.infer(&imgs, &vq).unwrap();
    assert_eq!(var.forward_count() - before, 4);
    let b = var.infer(&imgs, &vq).unwrap();
    assert_eq!(a.maps, b.maps);
    for maps in &a.maps {
        vq.schedule().check_maps(maps, false).unwrap();
    }
    for ((maps, inp), img) in a.maps.iter().zip(&a.final_inputs).zip(&imgs) {
        assert_eq!(inp, &build_inputs(&maps[..3], img, &vq).unwrap());
    }
}

#[test]
fn cached_infer_matches_full_prefix_decoding() {
    for seed in 20..23 {
        let (vq, mut var, mut rng) = setup(seed);
        // Larger weights than at init so the argmax is decided by the content.
        for id in var.params().ids().collect::<Vec<_>>() {
            for x in var.params_mut().get_mut(id).data_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
        let imgs: Vec<Vec<TokenMap>> = (0..3).map(|_| random_maps(vq.schedule(), 64, &mut rng)).collect();
        let got = var.infer(&imgs, &vq).unwrap().maps;
        for (maps, img) in got.iter().zip(&imgs) {
            for k in 0..4 {
                let logits = var.forward(&[build_inputs(&maps[..k], img, &vq).unwrap()]).unwrap();
                let off = vq.schedule().offset(k);
                let want: Vec<usize> = (0..vq.schedule().tokens(k))
                    .map(|i| argmax(&logits.data()[(off + i) * 64..][..64]))
                    .collect();
                assert_eq!(maps[k].indices, want, "seed {seed} scale {k}");
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (vq, var, mut rng) = setup(8);
    let inputs: Vec<SampleInputs> = (0..2)
        .map(|_| {
            let img = random_maps(vq.schedule(), 64, &mut rng);
            let z = random_maps(vq.schedule(), 64, &mut rng);
            build_inputs(&z[..3], &img, &vq).unwrap()
        })
        .collect();
    let targets: Vec<usize> = (0..170).map(|_| rng.random_range(0..64)).collect();
    let mut g = Graph::new();
    let p = var.params().bind(&mut g, true);
    let logits = var.forward_on(&mut g, &p, &inputs).unwrap();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in var.params().ids() {
        let gr = grads
            .get(p[id])
            .unwrap_or_else(|| panic!("{} has no gradient", var.params().name(id)));
        let norm: f32 = gr.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{} has zero gradient", var.params().name(id));
    }
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    assert_eq!(argmax(&[3.0]), 0);
}

#[test]
fn checkpoint_round_trip_and_vq_compatibility() {
    let (vq, var, _) = setup(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("var.dart");
    var.save(&path).unwrap();
    let back = VarModel::load(&path).unwrap();
    assert_eq!(back.config(), var.config());
    assert_eq!(back.params(), var.params());
    back.check_vq(&vq).unwrap();
    let other = VqModel::new(
        VqConfig {
            image_size: 16,
            schedule: ScaleSchedule::new(vec![(1, 1), (4, 4)]).unwrap(),
            ..VqConfig::default()
        },
        0,
    )
    .unwrap();
    let err = back.check_vq(&other).unwrap_err().to_string();
    assert!(err.contains("[1x1,2x2,4x4,8x8]") && err.contains("[1x1,4x4]"), "{err}");
}
