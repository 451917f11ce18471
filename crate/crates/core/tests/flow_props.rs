use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use stegflow_core::flow::{init_model, FlowConfig, FlowNet};
use stegflow_core::latent::{decode_latent, encode_bits};

fn random_net(k: usize, hidden: usize, seed: u64) -> FlowNet {
    let config = FlowConfig {
        coupling_layers: k,
        hidden_width: hidden,
        cond_width: 4,
        height: 8,
        width: 8,
        scale_clamp: 2.0,
    };
    let mut net = init_model(&config, seed).unwrap().net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    for p in net.params_mut() {
        *p += noise.sample(&mut rng);
    }
    net
}

fn image(side: usize) -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1..=side / 2).prop_flat_map(|half| {
        let n = 4 * half * half;
        (
            Just(2 * half),
            prop::collection::vec(-0.8f64..0.8, 2 * n),
            prop::collection::vec(0.0f64..1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flow_is_invertible(k in 1usize..6, seed in any::<u64>(), (side, c, l) in image(12)) {
        let net = random_net(k, 8, seed);
        let (z, logdet) = net.forward(&c, &l, side, side).unwrap();
        prop_assert!(logdet.is_finite());
        let back = net.inverse(&z, &l, side, side).unwrap();
        for (a, b) in c.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn latent_signs_carry_bits(bits in prop::collection::vec(any::<bool>(), 8), seed in any::<u64>(), alpha in 0.0f64..0.9) {
        let bits: Vec<bool> = bits.iter().cycle().take(2 * 4 * 6).copied().collect();
        let z = encode_bits(&bits, 4, 6, alpha, seed).unwrap();
        prop_assert!(z.values().iter().all(|v| v.abs() > alpha));
        prop_assert_eq!(decode_latent(z.values()), bits);
    }
}
