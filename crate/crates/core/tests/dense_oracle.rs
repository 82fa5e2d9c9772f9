//! Federated LMS against a literal dense-matrix transcription of the update
//! equations, sharing only the random draws with the library.

use prism_fcp::attacks::{training_perturbation, TrainingAttackConfig};
use prism_fcp::datagen::{
    draw_client_profiles, generate_true_weights, SampleSource, SyntheticConfig, SyntheticStreams,
};
use prism_fcp::seed;
use prism_fcp::training::{
    init_clients, run_training, sample_mask, schedule_participants, TrainingConfig,
};

type Mat = Vec<Vec<f64>>;

fn selection(dim: usize, idx: &[usize]) -> Mat {
    let mut s = vec![vec![0.0; dim]; dim];
    for &i in idx {
        s[i][i] = 1.0;
    }
    s
}

fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

fn complement(s: &Mat) -> Mat {
    s.iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, &v)| if i == j { 1.0 - v } else { -v }).collect())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn streams(cfg: &SyntheticConfig, k: usize, s: u64) -> SyntheticStreams<seed::SimRng> {
    let w = generate_true_weights(cfg, &mut seed::rng(s, &[1]));
    let profiles = draw_client_profiles(cfg, k, &mut seed::rng(s, &[2]));
    let rngs = (0..k).map(|c| seed::rng(s, &[3, c as u64])).collect();
    SyntheticStreams::new(w, profiles, rngs)
}

fn check(dim: usize, shared: usize, byz_every: usize, p_a: f64) {
    let syn = SyntheticConfig::new(dim, (0.2, 1.2), (0.005, 0.025), 1.0).unwrap();
    let k = 12;
    let tcfg = TrainingConfig {
        dim,
        shared,
        step_size: 0.05,
        n_iterations: 60,
        participants_per_round: 4,
        n_clients: k,
        divergence_factor: 1e9,
    };
    let attack = TrainingAttackConfig {
        attack_probability: p_a,
        perturbation_variance: 0.1,
    };
    let byz: Vec<bool> = (0..k).map(|c| byz_every > 0 && c % byz_every == 0).collect();
    let w_star = generate_true_weights(&syn, &mut seed::rng(9, &[1]));

    let mut rng = seed::rng(9, &[4]);
    let mut clients = init_clients(&tcfg, &byz, &mut rng).unwrap();
    let mut data = streams(&syn, k, 9);
    let lib = run_training(&tcfg, &mut clients, &mut data, &attack, &w_star, &mut rng).unwrap();

    let mut rng = seed::rng(9, &[4]);
    let mut data = streams(&syn, k, 9);
    let mut s_prev: Vec<Mat> = (0..k)
        .map(|_| selection(dim, sample_mask(dim, shared, &mut rng).unwrap().indices()))
        .collect();
    let mut local = vec![vec![0.0; dim]; k];
    let mut w = vec![0.0; dim];
    for n in 0..tcfg.n_iterations {
        let part = schedule_participants(k, 4, &mut rng).unwrap();
        let mut acc = vec![0.0; dim];
        for &c in &part {
            let smp = data.next_sample(c);
            let m = add(&matvec(&s_prev[c], &w), &matvec(&complement(&s_prev[c]), &local[c]));
            let e = smp.target - m.iter().zip(smp.features.iter()).map(|(a, b)| a * b).sum::<f64>();
            local[c] = m.iter().zip(smp.features.iter()).map(|(a, x)| a + 0.05 * x * e).collect();
            let s_new = selection(dim, sample_mask(dim, shared, &mut rng).unwrap().indices());
            let mut sent = matvec(&s_new, &local[c]);
            if byz[c] {
                if let Some(delta) = training_perturbation(&attack, dim, &mut rng) {
                    sent = add(&sent, &matvec(&s_new, &delta));
                }
            }
            acc = add(&acc, &add(&sent, &matvec(&complement(&s_new), &w)));
            s_prev[c] = s_new;
        }
        w = acc.iter().map(|v| v / part.len() as f64).collect();
        let mse: f64 = w.iter().zip(w_star.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((mse - lib.mse[n]).abs() < 1e-12 * (1.0 + mse), "round {n}");
    }
    for (a, b) in w.iter().zip(lib.global.model.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn partial_sharing_benign() {
    check(8, 3, 0, 0.0);
}

#[test]
fn partial_sharing_under_attack() {
    check(8, 3, 3, 0.5);
}

#[test]
fn full_sharing_under_attack() {
    check(6, 6, 4, 1.0);
}
