mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdrsr_core::diff::{grad_check, DiffError, Graph, Tensor};
use rdrsr_core::encoder::encode;
use rdrsr_core::interest::{
    draw_gumbel, gumbel_noise, interest_logits, log_normalize, relaxed_node, relaxed_probs, sample_count,
    sample_count_log,
};
use rdrsr_core::model::Model;

fn zero_param(m: &mut Model, name: &str) {
    let id = m.store.id(name).unwrap();
    m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn head_values(m: &Model, window: &[usize], user: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Mat) {
    let mut g = Graph::new(&m.store);
    let enc = encode(&mut g, m, window, user).unwrap();
    let head = interest_logits(&mut g, &m.params.count, enc.f, enc.user, enc.key_mask).unwrap();
    let f: Vec<f64> = g.value(head.log_f).data().iter().map(|l| l.exp()).collect();
    let fm = g.value(enc.f);
    let rows = (0..fm.rows()).map(|r| fm.row_slice(r).to_vec()).collect();
    (f, g.value(head.weights).data().to_vec(), g.value(head.pooled).data().to_vec(), rows)
}

#[test]
fn zero_position_scorer_pools_the_mean() {
    let mut m = small_model(small_dims(9, 2, 4, 4, 3), 1);
    zero_param(&mut m, "did.w_f2");
    let (_, w, pooled, f) = head_values(&m, &[0, 3, 5, 7], 1);
    assert_eq!(w[0], 0.0);
    for &a in &w[1..] {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }
    for c in 0..4 {
        let mean = (f[1][c] + f[2][c] + f[3][c]) / 3.0;
        assert!((pooled[c] - mean).abs() < 1e-12);
    }
}

#[test]
fn zero_count_weights_give_uniform_counts() {
    let mut m = small_model(small_dims(9, 2, 4, 4, 3), 2);
    zero_param(&mut m, "did.w_count");
    let (f, ..) = head_values(&m, &[1, 2, 3, 4], 0);
    for p in f {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn count_head_matches_oracle() {
    let m = small_model(small_dims(9, 3, 5, 4, 4), 3);
    for window in [[0, 0, 4, 2], [9, 8, 7, 6], [0, 0, 0, 0]] {
        let (f, ..) = head_values(&m, &window, 2);
        let oracle = count_probs(&m, &common::encode(&m, &window, 2));
        for (a, b) in f.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{window:?}");
        }
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(f.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn gumbel_mean_is_euler_mascheroni() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let mean = (0..n).map(|_| draw_gumbel(&mut rng, 1)[0]).sum::<f64>() / n as f64;
    assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
}

#[test]
fn gumbel_max_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = [0.7, 0.3];
    let n = 100_000;
    let ones = (0..n).filter(|_| sample_count(&f, &draw_gumbel(&mut rng, 2)) == 1).count();
    let freq = ones as f64 / n as f64;
    assert!((freq - 0.7).abs() < 0.01, "freq {freq}");
}

#[test]
fn low_temperature_limit_matches_the_sample() {
    let lf = log_normalize(&[0.6, 0.4]);
    let g = [-0.5, 0.3];
    assert_eq!(sample_count_log(&lf, &g), 2);
    let z = relaxed_probs(&lf, &g, 1e-4);
    assert!((z[1] - 1.0).abs() < 1e-12);
}

#[test]
fn relaxed_gradient_into_encoder_matches_finite_differences() {
    let m = small_model(small_dims(6, 2, 3, 3, 3), 4);
    let window = [0, 2, 5];
    let noise = [0.3, -0.7, 1.1];
    let weights = [0.2, -1.3, 0.9];
    let run = |mm: &Model| -> (f64, Vec<f64>) {
        let mut g = Graph::new(&mm.store);
        let enc = encode(&mut g, mm, &window, 1).unwrap();
        let head = interest_logits(&mut g, &mm.params.count, enc.f, enc.user, enc.key_mask).unwrap();
        let z = relaxed_node(&mut g, head.log_f, &noise, 0.5).unwrap();
        let w = g.constant(Tensor::row(weights.to_vec()));
        let l = g.dot(z, w).unwrap();
        let v = g.value(l).item();
        (v, g.backward(l).unwrap().flatten(&mm.store))
    };
    let mut probe = m.clone();
    let report = grad_check::<_, DiffError>(
        |p| {
            probe.store.assign_flat(p.data())?;
            Ok(run(&probe))
        },
        &Tensor::row(m.store.flatten()),
        1e-5,
    )
    .unwrap();
    let (pid, off) = m.store.locate(report.worst_coord).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "{} at {}[{}]: analytic {} numeric {}",
        report.max_rel_error,
        m.store.name(pid),
        off,
        report.analytic[report.worst_coord],
        report.numeric[report.worst_coord]
    );
    // the encoder's first block receives gradient through z
    let (_, grad) = run(&m);
    let (id, _) = m.store.locate(0).unwrap();
    assert_eq!(m.store.name(id), "item_emb");
    assert!(grad.iter().any(|&v| v != 0.0));
}

proptest! {
    #[test]
    fn relaxed_argmax_is_the_sample(
        logits in proptest::collection::vec(-5.0f64..5.0, 2..7),
        us in proptest::collection::vec(0.0f64..1.0, 7),
        temp in prop_oneof![Just(0.1), Just(1.0), Just(10.0)],
    ) {
        let lf = log_normalize(&softmax(&logits));
        let g: Vec<f64> = us[..lf.len()].iter().map(|&u| gumbel_noise(u)).collect();
        let h = sample_count_log(&lf, &g);
        let z = relaxed_probs(&lf, &g, temp);
        let mut best = 0;
        for i in 1..z.len() {
            if z[i] > z[best] {
                best = i;
            }
        }
        prop_assert_eq!(best + 1, h);
        prop_assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(z.iter().all(|&p| p > 0.0));
    }
}
