use nalgebra::DMatrix;
use proptest::prelude::*;
use tsmnet::gradcheck::tiny_model;
use tsmnet::matfun::{spd_map, ScalarFun};
use tsmnet::net::layers::log_eig_forward;
use tsmnet::net::{Architecture, EpochBatch, ModelConfig, NetTape, Network, TsmNetConfig};
use tsmnet::optim::{stiefel_defect, Adam, AdamConfig, ParamKind, ParamSlot};
use tsmnet::sampling::{gaussian_matrix, random_spd, random_stiefel, rng};
use tsmnet::spdbn::DomainId;
use tsmnet::synthdata::{generate, DomainRole, GenConfig};

fn randomize_classifier(net: &mut Network, seed: u64) {
    let mut r = rng(seed);
    for p in net.params_mut() {
        if p.name == "classifier" {
            *p.value = gaussian_matrix(&mut r, p.value.nrows(), p.value.ncols(), 2.0);
        }
    }
}

fn features(pass: &tsmnet::net::ForwardPass<NetTape>) -> DMatrix<f64> {
    match &pass.tape {
        NetTape::Spd(t) => t.features().clone(),
        NetTape::Euclidean(_) => panic!("expected the SPD architecture"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn probabilities_are_distributions_and_loss_nonnegative(seed in any::<u64>(), spd in any::<bool>()) {
        let arch = if spd { Architecture::Spd } else { Architecture::Euclidean };
        let (mut net, batch) = tiny_model(arch, &mut rng(seed)).unwrap();
        randomize_classifier(&mut net, seed);
        let pass = net.forward_eval(&batch).unwrap();
        for i in 0..pass.probs.nrows() {
            let s: f64 = pass.probs.row(i).sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
            prop_assert!(pass.probs.row(i).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(pass.loss >= 0.0);
    }

    #[test]
    fn eval_commutes_with_batch_permutation(seed in any::<u64>(), spd in any::<bool>()) {
        let arch = if spd { Architecture::Spd } else { Architecture::Euclidean };
        let (mut net, batch) = tiny_model(arch, &mut rng(seed)).unwrap();
        randomize_classifier(&mut net, seed);
        let n = batch.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p == (0..n).collect::<Vec<_>>() });
        let permuted = EpochBatch {
            data: perm.iter().map(|&i| batch.data[i].clone()).collect(),
            labels: perm.iter().map(|&i| batch.labels[i]).collect(),
            domains: perm.iter().map(|&i| batch.domains[i]).collect(),
        };
        let a = net.forward_eval(&batch).unwrap().probs;
        let b = net.forward_eval(&permuted).unwrap().probs;
        for (row, &i) in perm.iter().enumerate() {
            prop_assert!((b.row(row) - a.row(i)).norm() < 1e-12);
        }
    }

    #[test]
    fn log_eig_distances_are_log_euclidean(seed in any::<u64>(), dim in 2usize..=8) {
        let mut r = rng(seed);
        let (z1, z2) = (random_spd(&mut r, dim, 2.0), random_spd(&mut r, dim, 2.0));
        let d_vec = (log_eig_forward(&z1) - log_eig_forward(&z2)).norm();
        let l1 = spd_map(z1.as_sym(), ScalarFun::Log).unwrap();
        let l2 = spd_map(z2.as_sym(), ScalarFun::Log).unwrap();
        let d_le = (l1.matrix() - l2.matrix()).norm();
        prop_assert!((d_vec - d_le).abs() <= 1e-10 * d_le.max(1.0), "{d_vec} vs {d_le}");
    }

    #[test]
    fn stiefel_parameters_stay_orthonormal(seed in any::<u64>(), rows in 3usize..10, steps in 1usize..30) {
        let mut r = rng(seed);
        let cols = 1 + (seed as usize) % rows;
        let mut w = random_stiefel(&mut r, rows, cols);
        let mut log_nu = DMatrix::from_element(1, 1, 0.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..steps {
            let gw = gaussian_matrix(&mut r, rows, cols, 10.0);
            let gn = DMatrix::from_element(1, 1, 1e6);
            adam.step(&mut [
                ParamSlot { name: "w", kind: ParamKind::Stiefel, weight_decay: false, value: &mut w, grad: &gw },
                ParamSlot { name: "log_nu", kind: ParamKind::Euclidean, weight_decay: false, value: &mut log_nu, grad: &gn },
            ]).unwrap();
            prop_assert!(stiefel_defect(&w) < 1e-8);
            prop_assert!(log_nu[(0, 0)].exp() > 0.0);
        }
    }
}

#[test]
fn untrained_model_is_at_chance_and_eval_is_deterministic() {
    let ds = generate(&GenConfig { trials_per_domain: 20, ..GenConfig::default() }).unwrap();
    let ids = ds.ids(DomainRole::Target);
    let refs: Vec<_> = ids.iter().flat_map(|&id| (0..20).map(move |j| (id, j))).collect();
    let batch = ds.batch(&refs).unwrap();
    let net = Network::new(ModelConfig::default(), &mut rng(0)).unwrap();
    let a = net.forward_eval(&batch).unwrap();
    assert!(a.probs.iter().all(|&p| (p - 0.5).abs() < 1e-12), "a zero classifier predicts uniformly");
    assert!((a.loss - 2f64.ln()).abs() < 1e-12);
    let b = net.forward_eval(&batch).unwrap();
    assert_eq!(a.probs, b.probs);
    let p = net.predict(&batch.data, &batch.domains).unwrap();
    assert_eq!(p.probs, a.probs);
}

/// Mixing every channel of a domain by a fixed invertible `A` and refitting
/// that domain's statistics leaves its tangent vectors unchanged up to one
/// orthogonal map, so their Gram matrix is invariant.
#[test]
fn channel_mixing_is_absorbed_by_domain_statistics() {
    let p = 6;
    let config = ModelConfig {
        net: TsmNetConfig {
            temporal_filters: 1,
            temporal_kernel: 5,
            spatio_spectral_filters: p,
            subspace_dim: p,
            channels: p,
            time: 120,
            classes: 2,
            ..TsmNetConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut r = rng(3);
    let mut net = Network::new(config, &mut r).unwrap();
    let trials: Vec<DMatrix<f64>> = (0..30).map(|_| gaussian_matrix(&mut r, p, 120, 1.0)).collect();
    let mix = DMatrix::identity(p, p) + gaussian_matrix(&mut r, p, p, 0.3);
    let mixed: Vec<DMatrix<f64>> = trials.iter().map(|x| &mix * x).collect();
    let (d0, d1) = (DomainId(0), DomainId(1));
    net.adapt(d0, &trials).unwrap();
    net.adapt(d1, &mixed).unwrap();
    let batch = |data: &[DMatrix<f64>], d| EpochBatch { data: data.to_vec(), labels: vec![0; data.len()], domains: vec![d; data.len()] };
    let f0 = features(&net.forward_eval(&batch(&trials, d0)).unwrap());
    let f1 = features(&net.forward_eval(&batch(&mixed, d1)).unwrap());
    let g0 = &f0 * f0.transpose();
    let g1 = &f1 * f1.transpose();
    let err = (&g1 - &g0).norm() / g0.norm();
    assert!(err < 1e-5, "Gram matrices differ by {err:e}");
    // Without refitting, the mixed domain is normalized with the wrong statistics.
    let stale = features(&net.forward_eval(&batch(&mixed, d0)).unwrap());
    assert!((&stale * stale.transpose() - &g0).norm() / g0.norm() > 1e-2);
}
