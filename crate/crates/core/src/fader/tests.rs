use super::*;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini_arch() -> FaderArch {
    FaderArch::for_side(8, 2, 2).unwrap()
}

fn random_batch(arch: &FaderArch, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cube = arch.side.pow(3);
    let x = Array2::from_shape_fn((n * cube, 1), |_| rng.gen_range(-1.0..1.0));
    let sites = (0..n).map(|i| i % arch.n_sites).collect();
    (x, sites)
}

fn random_series(seed: u64, t: usize, s: usize, subject: &str) -> VolumeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array4::from_shape_fn((t, s, s, s), |_| rng.gen_range(-1.0f32..1.0));
    VolumeSeries::new(subject, 2.0, data).unwrap()
}

#[test]
fn arch_ladder_and_latent_dim() {
    let arch = FaderArch {
        side: 16,
        n_blocks: 4,
        base_channels: 32,
        n_sites: 2,
        disc_widths: vec![256, 64],
        disc_dropout: 0.3,
        leaky_slope: 0.2,
    };
    arch.validate().unwrap();
    assert_eq!(arch.latent_dim(), 256);
    assert_eq!(arch.channel_ladder(), vec![32, 64, 128, 256]);
}

#[test]
fn full_scale_latent_is_1024() {
    let arch = FaderArch::full_scale(4);
    assert_eq!(arch.latent_dim(), 1024);
    assert_eq!(arch.n_blocks, 6);
    assert_eq!(arch.side, 64);
    assert_eq!(arch.disc_widths, vec![1024, 256, 64]);
}

#[test]
fn init_rejects_side_mismatch() {
    let mut arch = mini_arch();
    arch.side = 16; // 2^3 != 16
    assert!(init_model(&arch, 0).is_err());
}

#[test]
fn init_is_deterministic() {
    let arch = mini_arch();
    let mut a = init_model(&arch, 7).unwrap();
    let mut b = init_model(&arch, 7).unwrap();
    for (pa, pb) in a.all_params_mut().iter().zip(b.all_params_mut().iter()) {
        assert_eq!(pa.name, pb.name);
        for (x, y) in pa.data.iter().zip(pb.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "param {}", pa.name);
        }
    }
    let mut c = init_model(&arch, 8).unwrap();
    let differs = a
        .all_params_mut()
        .iter()
        .zip(c.all_params_mut().iter())
        .any(|(pa, pc)| pa.data != pc.data);
    assert!(differs);
}

#[test]
fn encode_zero_volume_is_finite() {
    let arch = mini_arch();
    let model = init_model(&arch, 1).unwrap();
    let frame = ndarray::Array3::<f32>::zeros((8, 8, 8));
    let z = encode(&model, frame.view()).unwrap();
    assert_eq!(z.len(), arch.latent_dim());
    assert!(z.iter().all(|v| v.is_finite()));
}

#[test]
fn encode_batch_of_identical_frames_gives_identical_latents() {
    let arch = mini_arch();
    let model = init_model(&arch, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cube = arch.side.pow(3);
    let one: Vec<f64> = (0..cube).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut x = Array2::<f64>::zeros((3 * cube, 1));
    for b in 0..3 {
        for i in 0..cube {
            x[[b * cube + i, 0]] = one[i];
        }
    }
    let z = model.encode_batch(&x).unwrap();
    for b in 1..3 {
        for j in 0..arch.latent_dim() {
            assert_eq!(z[[0, j]].to_bits(), z[[b, j]].to_bits());
        }
    }
}

#[test]
fn batch_permutation_gives_same_latent_multiset() {
    let arch = mini_arch();
    let model = init_model(&arch, 4).unwrap();
    let (x, _) = random_batch(&arch, 2, 5);
    let cube = arch.side.pow(3);
    // Swap the two frames.
    let mut swapped = Array2::<f64>::zeros(x.raw_dim());
    for i in 0..cube {
        swapped[[i, 0]] = x[[cube + i, 0]];
        swapped[[cube + i, 0]] = x[[i, 0]];
    }
    let z1 = model.encode_batch(&x).unwrap();
    let z2 = model.encode_batch(&swapped).unwrap();
    let rows = |z: &Array2<f64>| {
        let mut v: Vec<Vec<u64>> = (0..z.nrows())
            .map(|i| z.row(i).iter().map(|f| f.to_bits()).collect())
            .collect();
        v.sort();
        v
    };
    assert_eq!(rows(&z1), rows(&z2));
}

#[test]
fn decode_shape_round_trip() {
    for side in [8usize, 16] {
        let arch = FaderArch::for_side(side, 2, 3).unwrap();
        let model = init_model(&arch, 5).unwrap();
        let z = vec![0.0; arch.latent_dim()];
        let mut y = vec![0.0; 3];
        y[1] = 1.0;
        let vol = decode(&model, &z, &y).unwrap();
        assert_eq!(vol.dim(), (side, side, side));
        assert!(vol.iter().all(|v| v.is_finite()));
        // Deterministic.
        let vol2 = decode(&model, &z, &y).unwrap();
        assert_eq!(vol, vol2);
    }
}

#[test]
fn decode_rejects_non_one_hot() {
    let arch = mini_arch();
    let model = init_model(&arch, 6).unwrap();
    let z = vec![0.0; arch.latent_dim()];
    let err = decode(&model, &z, &[0.5, 0.5]).unwrap_err();
    assert!(matches!(err, Error::Domain(_)), "{err}");
    let err = decode(&model, &z, &[1.0, 1.0]).unwrap_err();
    assert!(matches!(err, Error::Domain(_)), "{err}");
}

#[test]
fn discriminate_sums_to_one() {
    let arch = mini_arch();
    let model = init_model(&arch, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let z: Vec<f64> = (0..arch.latent_dim())
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let p = discriminate(&model, &z).unwrap();
        assert_eq!(p.len(), arch.n_sites);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn losses_match_composed_parts() {
    let arch = mini_arch();
    let mut model = init_model(&arch, 9).unwrap();
    let (x, sites) = random_batch(&arch, 2, 10);
    let losses = model.losses(&x, &sites, None).unwrap();
    assert!(losses.rec >= 0.0 && losses.disc >= 0.0 && losses.adv >= 0.0);
    assert!(losses.rec.is_finite());
    // With an untrained model, the reconstruction mismatch is the dominant
    // term; sanity-check against a direct recomputation of the MSE part.
    let (z, _) = model.encoder.forward_train(&x, false);
    let y = one_hot_rows(&sites, arch.n_sites);
    let (xhat, _) = model.decoder.forward_train(&z, &y, false);
    let (rec, _) = crate::nn::mse_loss(&xhat, &x);
    assert!((rec - losses.rec).abs() < 1e-12);
}

#[test]
fn adv_loss_at_uniform_discriminator_output_is_ln_n_sites() {
    // Zeroing the head weights makes the discriminator output exactly
    // uniform, so the adversarial term sits at its target value ln(n).
    let arch = mini_arch();
    let mut model = init_model(&arch, 11).unwrap();
    for p in model.discriminator_params_mut() {
        if p.name == "disc.head.w" || p.name == "disc.head.b" {
            p.data.fill(0.0);
        }
    }
    let (x, sites) = random_batch(&arch, 2, 12);
    let losses = model.losses(&x, &sites, None).unwrap();
    assert!((losses.adv - (arch.n_sites as f64).ln()).abs() < 1e-12);
    assert!((losses.disc - (arch.n_sites as f64).ln()).abs() < 1e-12);
}

#[test]
fn single_site_losses_are_zero() {
    let arch = FaderArch::for_side(8, 2, 1).unwrap();
    let mut model = init_model(&arch, 13).unwrap();
    let (x, _) = random_batch(&arch, 2, 14);
    let sites = vec![0usize, 0];
    let losses = model.losses(&x, &sites, None).unwrap();
    assert_eq!(losses.disc, 0.0);
    assert_eq!(losses.adv, 0.0);
}

/// Central finite differences over sampled coordinates of each parameter
/// tensor in the loss's own training group.
fn gradient_check(which: FaderLoss, prefixes: &[&str], seed: u64, draws: usize) {
    let arch = mini_arch();
    for draw in 0..draws {
        let mut model = init_model(&arch, seed + draw as u64).unwrap();
        let (x, sites) = random_batch(&arch, 2, seed + 1000 + draw as u64);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed + 2000 + draw as u64);
        let masks = model.sample_disc_masks(2, &mut mask_rng);

        model.loss_backward(which, &x, &sites, &masks).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = model
            .all_params_mut()
            .iter()
            .map(|p| (p.name.clone(), p.grad.clone()))
            .collect();

        let mut pick_rng = ChaCha8Rng::seed_from_u64(seed + 3000 + draw as u64);
        for (name, grad) in &analytic {
            if !prefixes.iter().any(|pre| name.starts_with(pre)) {
                continue;
            }
            let len = grad.len();
            for _ in 0..3.min(len) {
                let idx = pick_rng.gen_range(0..len);
                let h = 1e-5;
                let bump = |model: &mut FaderModel, delta: f64| {
                    for p in model.all_params_mut() {
                        if p.name == *name {
                            p.data[idx] += delta;
                        }
                    }
                };
                bump(&mut model, h);
                let plus = model.loss_value(which, &x, &sites, &masks).unwrap();
                bump(&mut model, -2.0 * h);
                let minus = model.loss_value(which, &x, &sites, &masks).unwrap();
                bump(&mut model, h);
                let fd = (plus - minus) / (2.0 * h);
                let a = grad[idx];
                if a.abs() < 1e-10 && fd.abs() < 1e-10 {
                    continue;
                }
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel < 1e-3,
                    "{name}[{idx}] loss {which:?}: analytic {a:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
                );
            }
        }
    }
}

#[test]
fn gradient_check_reconstruction() {
    gradient_check(FaderLoss::Rec, &["enc.", "dec."], 100, 2);
}

#[test]
fn gradient_check_discriminator() {
    gradient_check(FaderLoss::Disc, &["disc."], 200, 2);
}

#[test]
fn gradient_check_adversarial() {
    gradient_check(FaderLoss::Adv, &["enc."], 300, 2);
}

fn tiny_training_set(n_subjects: usize, t: usize, side: usize) -> TrainingSet {
    let subjects = (0..n_subjects)
        .map(|i| {
            (
                i % 2,
                random_series(40 + i as u64, t, side, &format!("s{i}")),
            )
        })
        .collect();
    TrainingSet::from_subjects(subjects).unwrap()
}

#[test]
fn lambda_zero_matches_dedicated_autoencoder_trajectory() {
    let arch = mini_arch();
    let set = tiny_training_set(4, 3, 8);
    let mut cfg = FaderTrainConfig::new(0.0, 25, 77);
    cfg.batch_size = 2;
    let (mut fader_model, _) = train_fader(&set, &arch, &cfg).unwrap();
    let (mut ae_model, _) = train_autoencoder(&set, &arch, &cfg).unwrap();
    let fp = fader_model.encoder_params_mut();
    let ap = ae_model.encoder_params_mut();
    for (a, b) in fp.iter().zip(ap.iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "encoder param {} drifted", a.name);
        }
    }
    let fp = fader_model.decoder_params_mut();
    let ap = ae_model.decoder_params_mut();
    for (a, b) in fp.iter().zip(ap.iter()) {
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "decoder param {} drifted", a.name);
        }
    }
}

#[test]
fn training_is_deterministic_given_seed() {
    let arch = mini_arch();
    let set = tiny_training_set(4, 3, 8);
    let mut cfg = FaderTrainConfig::new(0.1, 10, 5);
    cfg.batch_size = 2;
    let (mut m1, h1) = train_fader(&set, &arch, &cfg).unwrap();
    let (mut m2, h2) = train_fader(&set, &arch, &cfg).unwrap();
    assert_eq!(h1, h2);
    for (a, b) in m1.all_params_mut().iter().zip(m2.all_params_mut().iter()) {
        assert_eq!(a.data, b.data, "param {}", a.name);
    }
}

#[test]
fn divergence_reports_step_and_history() {
    let arch = mini_arch();
    let set = tiny_training_set(4, 3, 8);
    let mut cfg = FaderTrainConfig::new(0.0, 50, 5);
    cfg.batch_size = 2;
    cfg.lr = 1e200; // force overflow to non-finite
    match train_fader(&set, &arch, &cfg) {
        Err(Error::Diverged { step, history, .. }) => {
            assert_eq!(history.rows.len(), step + 1);
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn encode_series_single_frame_matches_encode() {
    let arch = mini_arch();
    let model = init_model(&arch, 15).unwrap();
    let series = random_series(16, 1, 8, "one");
    let seq = encode_series(&model, &series).unwrap();
    assert_eq!(seq.len_t(), 1);
    let direct = encode(&model, series.frame(0)).unwrap();
    for j in 0..arch.latent_dim() {
        assert_eq!(seq.vectors[[0, j]], direct[j] as f32);
    }
}

#[test]
fn encode_series_constant_series_gives_identical_rows() {
    let arch = mini_arch();
    let model = init_model(&arch, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let frame: Vec<f32> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = Array4::<f32>::zeros((4, 8, 8, 8));
    for t in 0..4 {
        for (i, v) in frame.iter().enumerate() {
            data[[t, i / 64, (i / 8) % 8, i % 8]] = *v;
        }
    }
    let series = VolumeSeries::new("c", 2.0, data).unwrap();
    let seq = encode_series(&model, &series).unwrap();
    for t in 1..4 {
        for j in 0..arch.latent_dim() {
            assert_eq!(seq.vectors[[0, j]], seq.vectors[[t, j]]);
        }
    }
}

#[test]
fn encode_series_rejects_side_mismatch() {
    let arch = FaderArch::for_side(16, 2, 2).unwrap();
    let model = init_model(&arch, 19).unwrap();
    let series = random_series(20, 2, 8, "bad");
    assert!(matches!(
        encode_series(&model, &series),
        Err(Error::Shape(_))
    ));
}

#[test]
fn checkpoint_round_trip_preserves_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fader.ckpt");
    let arch = mini_arch();
    let set = tiny_training_set(4, 2, 8);
    let mut cfg = FaderTrainConfig::new(0.05, 8, 21);
    cfg.batch_size = 2;
    let (model, _) = train_fader(&set, &arch, &cfg).unwrap();
    model.save(&path).unwrap();
    let loaded = FaderModel::load(&path).unwrap();
    assert_eq!(loaded.arch, model.arch);
    let series = random_series(22, 1, 8, "probe");
    let a = encode(&model, series.frame(0)).unwrap();
    let b = encode(&loaded, series.frame(0)).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        // Checkpoints store f32; allow the conversion loss.
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn history_csv_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hist.csv");
    let arch = mini_arch();
    let set = tiny_training_set(4, 2, 8);
    let mut cfg = FaderTrainConfig::new(0.0, 3, 23);
    cfg.batch_size = 2;
    let (_, history) = train_fader(&set, &arch, &cfg).unwrap();
    history.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,L_rec,L_disc,L_adv,disc_acc,lambda_t"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn lambda_ramp_is_linear() {
    let cfg = FaderTrainConfig {
        lambda: 0.4,
        lambda_ramp_steps: 100,
        ..FaderTrainConfig::new(0.4, 1000, 0)
    };
    assert_eq!(cfg.lambda_at(0), 0.0);
    assert!((cfg.lambda_at(50) - 0.2).abs() < 1e-12);
    assert!((cfg.lambda_at(100) - 0.4).abs() < 1e-12);
    assert!((cfg.lambda_at(500) - 0.4).abs() < 1e-12);
}

#[test]
fn gradient_reversal_mode_runs_and_is_finite() {
    let arch = mini_arch();
    let set = tiny_training_set(4, 3, 8);
    let mut cfg = FaderTrainConfig::new(0.1, 10, 31);
    cfg.mode = TrainMode::GradientReversal;
    cfg.batch_size = 2;
    let (_, history) = train_fader(&set, &arch, &cfg).unwrap();
    assert_eq!(history.rows.len(), 10);
    assert!(history.rows.iter().all(|r| r.l_rec.is_finite()
        && r.l_disc.is_finite()
        && r.l_adv.is_finite()
        && r.disc_acc.is_finite()));
}
