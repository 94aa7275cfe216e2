// Temporary probe for the headline experiment numbers; removed once the
// acceptance suite pins them.

use std::sync::Arc;

use lcb_core::diagnostics::{effective_n, marginal_tv, reward_stats};
use lcb_core::mixture::{MixtureDiffusion, MixtureSpec, NoiseSchedule};
use lcb_core::reward::RewardSpec;
use lcb_core::sampler::{build_policy, sample_batch, PolicyConfig, SampleContext};
use lcb_core::trainer::{train_two_pass, TrainConfig};
use lcb_core::value::ValueModel;

#[test]
#[ignore]
fn probe_headline_numbers() {
    let md = MixtureDiffusion::new(
        MixtureSpec::two_cluster_default(),
        NoiseSchedule::linear_beta(20, 0.02, 0.30).unwrap(),
    )
    .unwrap();
    let reward = RewardSpec::left_tail_indicator(0.2).unwrap();
    let tv0 = std::time::Instant::now();
    let value = lcb_core::value::fit_regression_values(
        &md,
        &reward,
        &lcb_core::value::RegressionConfig::default(),
        4242,
    )
    .unwrap();
    println!("value fit took {:.1}s", tv0.elapsed().as_secs_f64());

    let t0 = std::time::Instant::now();
    let cfg = TrainConfig::default();
    let (lcbs, report) = train_two_pass(&md, &reward, &value, &cfg, 42).unwrap();
    println!("training took {:.1}s", t0.elapsed().as_secs_f64());
    for rep in &report.per_timestep {
        println!(
            "t+1={:2} lambda={:6.3} tau={:7.4} J={:7.4} J1={:7.4} exceed={:.4} adv={} forced={}",
            rep.t_plus_1,
            rep.lambda_hat,
            rep.tau_hat,
            rep.j_final,
            rep.j_at_lambda1,
            rep.holdout_exceedance,
            rep.advance_proposals,
            rep.forced_advances
        );
    }

    let ctx = SampleContext {
        md: Arc::new(
            MixtureDiffusion::new(
                MixtureSpec::two_cluster_default(),
                NoiseSchedule::linear_beta(20, 0.02, 0.30).unwrap(),
            )
            .unwrap(),
        ),
        reward: Arc::new(reward.clone()),
        value: Arc::new(value.clone()),
    };

    let t1 = std::time::Instant::now();
    let lcb_policy =
        build_policy(&PolicyConfig::Lcb { cap: 1_000 }, Some(Arc::new(lcbs))).unwrap();
    let lcb_samples = sample_batch(lcb_policy.as_ref(), &ctx, 7_000, 1001).unwrap();
    println!("lcb sampling took {:.1}s", t1.elapsed().as_secs_f64());

    let t2 = std::time::Instant::now();
    let rs_policy = build_policy(&PolicyConfig::Rs { cap: 10_000 }, None).unwrap();
    let rs_samples = sample_batch(rs_policy.as_ref(), &ctx, 7_000, 1002).unwrap();
    println!("rs sampling took {:.1}s", t2.elapsed().as_secs_f64());

    let lcb_en = effective_n(&lcb_samples, 20).unwrap();
    let rs_en = effective_n(&rs_samples, 20).unwrap();
    let lcb_stats = reward_stats(&lcb_samples, &reward).unwrap();
    let rs_stats = reward_stats(&rs_samples, &reward).unwrap();
    let xa: Vec<_> = lcb_samples.iter().map(|r| r.x0.clone()).collect();
    let xb: Vec<_> = rs_samples.iter().map(|r| r.x0.clone()).collect();
    let tv = marginal_tv(&xa, &xb, 0, 100, (-10.0, 10.0)).unwrap();
    let forced: u64 = lcb_samples.iter().map(|r| r.forced_acceptances).sum();

    println!("LCB effective N: {lcb_en:.2}  RS effective N: {rs_en:.2}  ratio {:.2}", rs_en / lcb_en);
    println!("LCB reward mass: {:.4}  RS reward mass: {:.4}", lcb_stats.top_mass, rs_stats.top_mass);
    println!("TV(LCB, RS) = {tv:.4}  forced acceptances: {forced}");
}
