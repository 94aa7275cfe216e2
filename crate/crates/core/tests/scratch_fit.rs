use lcb_core::mixture::{MixtureDiffusion, MixtureSpec, NoiseSchedule};
use lcb_core::reward::RewardSpec;
use lcb_core::value::{analytic_value, fit_regression_values, RegressionConfig, ValueModel};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_value_fit() {
    let md = MixtureDiffusion::new(
        MixtureSpec::two_cluster_default(),
        NoiseSchedule::linear_beta(20, 0.02, 0.30).unwrap(),
    )
    .unwrap();
    let reward = RewardSpec::left_tail_indicator(0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let t = 5;
    let probes: Vec<DVector<f64>> = (0..2000)
        .map(|_| md.sample_trajectory(&mut rng).state_at_level(t).clone())
        .collect();
    for lr in [0.01] {
        for epochs in [20usize] {
            let cfg = RegressionConfig {
                n_trajectories: 70_000,
                epochs,
                learning_rate: lr,
                hidden: vec![64, 64],
                batch_size: 256,
                grad_clip: 20.0,
                seed: 5,
            };
            let model = fit_regression_values(&md, &reward, &cfg, 23).unwrap();
            let mut mse = 0.0;
            let mut worst: f64 = 0.0;
            for x in &probes {
                let e = analytic_value(&md, &reward, x, t).unwrap();
                let f = model.evaluate(&md, &reward, x, t, &mut rng).unwrap();
                mse += (e - f) * (e - f);
                worst = worst.max((e - f).abs());
            }
            mse /= probes.len() as f64;
            println!("lr={lr} epochs={epochs}: v-MSE {mse:.4} worst {worst:.3}");
            // Reward-relevant strip: left-cluster states.
            let mut strip_mse = 0.0;
            let mut strip_n = 0;
            for x in &probes {
                if x[0] < -3.0 {
                    let e = analytic_value(&md, &reward, x, t).unwrap();
                    let f = model.evaluate(&md, &reward, x, t, &mut rng).unwrap();
                    strip_mse += (e - f) * (e - f);
                    strip_n += 1;
                }
            }
            println!("  strip (x1 < -3, n={strip_n}): v-MSE {:.4}", strip_mse / strip_n.max(1) as f64);
            for x in probes.iter().filter(|x| x[0] < -4.0).take(8) {
                let e = analytic_value(&md, &reward, x, t).unwrap();
                let f = model.evaluate(&md, &reward, x, t, &mut rng).unwrap();
                println!("  x=({:7.3},{:7.3})  v={e:8.4}  vhat={f:8.4}", x[0], x[1]);
            }
        }
    }
}
