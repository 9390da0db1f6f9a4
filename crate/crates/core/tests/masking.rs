//! Content stored at masked positions never reaches the conditioner or the loss.

use sadm_core::attention::AttnConfig;
use sadm_core::datagen::make_dataset;
use sadm_core::ndcore::{Rng, Tape, Tensor};
use sadm_core::network::{DenoiserConfig, ModelConfig, Sadm};
use sadm_core::sequence::{build_masked_sequence, IndexPartition, LongitudinalVolume};
use sadm_core::training::loss_step;

fn model() -> Sadm {
    let cfg = ModelConfig {
        extents: [8, 8, 4],
        attention: AttnConfig {
            blocks: 1,
            dim: 8,
            heads: 2,
            window: [4, 4, 2],
            max_len: 6,
            mlp_ratio: 2,
        },
        denoiser: DenoiserConfig {
            base: 4,
            depth: 1,
            emb_width: 8,
        },
        ..ModelConfig::default()
    };
    Sadm::new(cfg, 9).unwrap()
}

fn subject() -> LongitudinalVolume {
    make_dataset(5, 6, [8, 8, 4], 1).unwrap().train[0].volume.clone()
}

/// Replace the stored frames at `positions` with fresh noise.
fn perturb(v: &LongitudinalVolume, positions: &[usize], seed: u64) -> LongitudinalVolume {
    let mut rng = Rng::new(seed);
    let frames = (1..=v.len())
        .map(|i| {
            if positions.contains(&i) {
                Tensor::rand_uniform(&v.extents(), 0.0, 1.0, &mut rng)
            } else {
                v.frame(i).clone()
            }
        })
        .collect();
    LongitudinalVolume::new(frames).unwrap()
}

fn partitions() -> Vec<IndexPartition> {
    vec![
        IndexPartition::new(vec![1, 3, 5], vec![2, 4], vec![6]),
        IndexPartition::new(vec![1], vec![], vec![2, 3, 4, 5, 6]),
        IndexPartition::new(vec![1, 2], vec![3], vec![4, 5, 6]),
        IndexPartition::new(vec![1, 4], vec![2, 3], vec![5, 6]),
    ]
}

#[test]
fn masked_positions_are_exact_zeros() {
    let v = subject();
    for p in partitions() {
        let noisy = perturb(&v, &p.targets(), 5);
        for upto in 2..=6 {
            let (a, mask) = build_masked_sequence(&v, &p, upto).unwrap();
            let (b, _) = build_masked_sequence(&noisy, &p, upto).unwrap();
            assert_eq!(a, b);
            for (k, present) in mask.iter().enumerate() {
                if !present {
                    assert!(a[k].is_zero());
                }
            }
        }
    }
}

#[test]
fn conditioning_signal_ignores_masked_content() {
    let m = model();
    let v = subject();
    for p in partitions() {
        let noisy = perturb(&v, &p.targets(), 6);
        for upto in 2..=6 {
            let (a, _) = build_masked_sequence(&v, &p, upto).unwrap();
            let (b, _) = build_masked_sequence(&noisy, &p, upto).unwrap();
            let ca = m.conditioner.condition_value(&m.store, &a).unwrap();
            let cb = m.conditioner.condition_value(&m.store, &b).unwrap();
            assert_eq!(ca.data(), cb.data());
        }
    }
}

#[test]
fn loss_ignores_masked_content_but_not_the_target() {
    let m = model();
    let v = subject();
    for (k, p) in partitions().into_iter().enumerate() {
        for seed in 0..4 {
            let run = |subject: &LongitudinalVolume| {
                let mut tape = Tape::new();
                let out = loss_step(&mut tape, &m, subject, &p, 0.0, &mut Rng::new(seed)).unwrap();
                (tape.value(out.loss).item(), out.target)
            };
            let (base, target) = run(&v);
            // every unobserved frame except the one being predicted
            let others: Vec<usize> = p.targets().into_iter().filter(|&i| i != target).collect();
            let (same, _) = run(&perturb(&v, &others, 100 + k as u64));
            assert_eq!(base.to_bits(), same.to_bits());
            let (moved, _) = run(&perturb(&v, &[target], 200 + k as u64));
            assert_ne!(base, moved);
        }
    }
}

#[test]
fn absent_frames_are_stored_as_zero() {
    let v = subject();
    let w = LongitudinalVolume::with_mask(v.frames().to_vec(), vec![true, false, true, false, false, false]).unwrap();
    for i in [2, 4, 5, 6] {
        assert!(w.frame(i).is_zero());
    }
    assert_eq!(w.frame(3), v.frame(3));
}
