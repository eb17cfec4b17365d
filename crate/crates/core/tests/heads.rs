use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxocc::heads::{ffn_head_forward, HeadConfig, HeadKind, OccupancyHead, UnetHead};
use voxocc::losses::{multiscale_loss, ClassWeights, LossWeights, ScaleTargets};
use voxocc::nn::{ParamInit, Tensor};
use voxocc::synth::{generate_scene, SceneConfig};
use voxocc::voxel::LabelSpace;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn config() -> HeadConfig {
    HeadConfig {
        in_channels: 8,
        num_classes: 6,
        depth: 1,
        base_channels: 4,
        aux_scales: vec![2],
    }
}

/// Runs the multiscale loss through the UNet head and returns it with gradients filled in.
fn backprop(aux_weight: f64) -> OccupancyHead<f64> {
    let space = LabelSpace::reduced();
    let scene = SceneConfig {
        geometry: SceneConfig::desk().geometry.with_dims([8, 8, 4]).unwrap(),
        object_counts: vec![1, 1, 1, 1, 1, 0],
        imbalance_ratio: 10.0,
        ..SceneConfig::desk()
    };
    let (x, gt) = generate_scene(&scene).unwrap();
    let mut head = OccupancyHead::new(HeadKind::Unet, &config(), &mut ParamInit::new(4)).unwrap();
    let targets = ScaleTargets::new(&gt, &[2], &space).unwrap();
    let (out, cache) = head.forward(&x).unwrap();
    let (_, grads) =
        multiscale_loss(&out, &targets, &ClassWeights::uniform(6), &LossWeights::default(), aux_weight).unwrap();
    head.backward(&cache, &grads).unwrap();
    head
}

#[test]
fn every_parameter_receives_gradient() {
    let head = backprop(0.5);
    for (name, t) in head.named_params() {
        let g = t.grad().expect("gradient buffer");
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn aux_branch_is_silent_without_aux_weight() {
    let head = backprop(0.0);
    for (name, t) in head.named_params() {
        let zero = t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0));
        assert_eq!(zero, name.starts_with("aux"), "{name}");
    }
}

#[test]
fn skip_connection_changes_output() {
    let mut init = ParamInit::new(11);
    let head: UnetHead<f64> = UnetHead::new(&config(), &mut init).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(1), &[8, 4, 8, 8]);
    let with = head.forward(&x).unwrap().0.full;
    let without = head.forward_without_skips(&x).unwrap();
    assert_eq!(with.shape(), without.shape());
    let diff: f64 = with.data().iter().zip(without.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "skip contributes nothing: {diff}");
}

#[test]
fn ffn_head_matches_per_voxel_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (c, k) = (rng.gen_range(1..6), rng.gen_range(2..8));
        let [z, h, w] = [rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..9)];
        let vol = random(&mut rng, &[c, z, h, w]);
        let weight = random(&mut rng, &[k, c]);
        let bias = random(&mut rng, &[k]);
        let out = ffn_head_forward(&vol, &weight, &bias).unwrap();
        assert_eq!(out.shape(), &[k, z, h, w]);
        let n = z * h * w;
        for j in 0..k {
            for v in 0..n {
                let mut expect = bias.data()[j];
                for i in 0..c {
                    expect += weight.data()[j * c + i] * vol.data()[i * n + v];
                }
                let got = out.data()[j * n + v];
                assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{got} vs {expect}");
            }
        }
    }
}

#[test]
fn f32_and_f64_heads_agree() {
    let mut init = ParamInit::new(2);
    let head: OccupancyHead<f64> = OccupancyHead::new(HeadKind::Unet, &config(), &mut init).unwrap();
    let mut head32: OccupancyHead<f32> = OccupancyHead::new(HeadKind::Unet, &config(), &mut ParamInit::new(0)).unwrap();
    let params: Vec<_> = head
        .named_params()
        .into_iter()
        .map(|(name, t)| voxocc::nn::NamedTensor { name, tensor: t.clone() })
        .collect();
    head32.load_params(&params).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(8), &[8, 4, 8, 8]);
    let a = head.forward(&x).unwrap().0.full;
    let b = head32.forward(&x.cast()).unwrap().0.full;
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - f64::from(*q)).abs() < 1e-4);
    }
}
