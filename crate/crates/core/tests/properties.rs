mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphere_core::io::{self, Checkpoint};
use sphere_core::linalg::Matrix;
use sphere_core::moe::{self, init_model, Activation, MoeConfig};
use sphere_core::spectral::SpsdMatrix;
use sphere_core::sphere;

fn spd(seed: u64, n: usize) -> (Dense, SpsdMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = random_spd(&mut rng, n, 0.1);
    (d.clone(), SpsdMatrix::new(matrix(&d).symmetrized()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effective_rank_lies_between_one_and_dim(seed in any::<u64>(), n in 1usize..12) {
        let (d, m) = spd(seed, n);
        let r = m.effective_rank().unwrap();
        prop_assert!(r >= 1.0 - 1e-12 && r <= n as f64 + 1e-9);
        prop_assert!((r - effrank_of(&d)).abs() <= 1e-9 * r);
    }

    #[test]
    fn contraction_keeps_trace_and_never_worsens_conditioning(seed in any::<u64>(), n in 2usize..10, eta in 0.0f64..=0.5) {
        let (d, m) = spd(seed, n);
        let next = sphere::gram_gradient_step(&m, eta).unwrap();
        prop_assert!((next.trace() - trace(&d)).abs() <= 1e-12 * trace(&d));
        let (before, after) = (condition(&jacobi_eigenvalues(&d)), condition(&jacobi_eigenvalues(&dense(next.matrix()))));
        prop_assert!(after <= before * (1.0 + 1e-10));
    }

    #[test]
    fn single_expert_model_is_a_plain_mlp(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..8, 0..3),
        input in 1usize..5,
        output in 1usize..3,
        tanh in any::<bool>(),
    ) {
        let cfg = MoeConfig {
            num_experts: 1,
            top_k: 1,
            expert_widths: widths,
            gate_widths: vec![3],
            activation: if tanh { Activation::Tanh } else { Activation::Relu },
            seed,
            ..MoeConfig::new(input, output)
        };
        let model = init_model(&cfg).unwrap();
        let x = Matrix::from_fn(5, input, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let (y, _) = moe::forward(&model, &x).unwrap();
        let reference = plain_mlp(&model, &x);
        for i in 0..5 {
            for o in 0..output {
                prop_assert!((y[(i, o)] - reference[i][o]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_json_round_trips_exactly(seed in any::<u64>(), experts in 1usize..5) {
        let cfg = MoeConfig { num_experts: experts, top_k: experts.min(2), expert_widths: vec![4], gate_widths: vec![3], seed, ..MoeConfig::new(3, 2) };
        let model = init_model(&cfg).unwrap();
        let text = serde_json::to_string(&Checkpoint::from_model(&model)).unwrap();
        let back = serde_json::from_str::<Checkpoint>(&text).unwrap().to_model().unwrap();
        prop_assert_eq!(back.flat_params(), model.flat_params());
    }

    #[test]
    fn tensor_json_is_shape_plus_row_major_data(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let m = Matrix::from_fn(rows, cols, |i, j| (seed % 97) as f64 + (i * cols + j) as f64 * 0.25);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        prop_assert_eq!(&v["shape"], &serde_json::json!([rows, cols]));
        let data: Vec<f64> = serde_json::from_value(v["data"].clone()).unwrap();
        prop_assert_eq!(data.as_slice(), m.data());
        let back: Matrix = serde_json::from_value(v).unwrap();
        prop_assert_eq!(back, m);
    }
}

#[test]
fn metrics_csv_carries_a_version_header() {
    let mut buf = Vec::new();
    io::write_metrics_csv(&mut buf, &[]).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(io::METRICS_CSV_HEADER));
    assert!(io::read_metrics_csv(&buf[..]).unwrap().is_empty());
    assert!(io::read_metrics_csv(&b"step,loss\n"[..]).is_err());
}
