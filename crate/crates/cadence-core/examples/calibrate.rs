//! Desk-scale calibration sweep used while tuning generator and training
//! defaults. Not part of the public pipeline; run with
//! `cargo run --release -p cadence-core --example calibrate -- <stage>`.

use std::collections::BTreeMap;
use std::time::Instant;

use cadence_core::datagen::{generate_world, GeneratorConfig};
use cadence_core::eval;
use cadence_core::history::Token;
use cadence_core::numerics::rng::seeded;
use cadence_core::policy::{
    build_preference_pairs, train_copycat, train_dpo, DpoConfig, EmbeddingPolicy, GreedyPolicy,
    PairMiningConfig, PolicyConfig, RandomPolicy, RecommendPolicy,
};
use cadence_core::rollout::{rollout_suite, UtilityWeights};
use cadence_core::worldmodel::{
    build_sequences, evaluate_world_model, make_split_plan, train_world_model, AblationSpec,
    Signal, WorldModelConfig,
};

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "world".into());
    let cfg = GeneratorConfig { seed: 7, ..GeneratorConfig::default() };
    let t0 = Instant::now();
    let world = generate_world(&cfg).unwrap();
    let summary = world.dataset.summary(cfg.n_songs);
    println!("== dataset ({:?}) ==\n{}", t0.elapsed(), summary);

    let user_ids = world.dataset.user_ids();
    let plan = make_split_plan(&user_ids, 3, 11);

    match stage.as_str() {
        "world" => world_stage(&world, &plan, AblationSpec::none()),
        "ablate" => {
            println!("-- base --");
            world_stage(&world, &plan, AblationSpec::none());
            println!("-- drop_history --");
            world_stage(&world, &plan, AblationSpec { drop_history: true, ..AblationSpec::none() });
            println!("-- drop_feedback --");
            world_stage(&world, &plan, AblationSpec { drop_feedback: true, ..AblationSpec::none() });
        }
        "policy" => policy_stage(&world, &plan),
        other => panic!("unknown stage {other}"),
    }
}

fn world_stage(
    world: &cadence_core::datagen::SyntheticWorld,
    plan: &cadence_core::worldmodel::SplitPlan,
    ablation: AblationSpec,
) {
    for (k, split) in plan.splits.iter().enumerate() {
        let mut cfg = WorldModelConfig::desk_default(world.catalogue.embed_dim());
        cfg.seed = 100 + k as u64;
        cfg.ablation = ablation;
        let t = Instant::now();
        let trained = train_world_model(&world.dataset, &world.catalogue, &cfg, split).unwrap();
        let train_time = t.elapsed();
        let eval = evaluate_world_model(&trained, &world.dataset, &world.catalogue, split).unwrap();
        let e = eval.per_signal[Signal::Engagement.index()];
        let r = eval.per_signal[Signal::Rating.index()];
        let v = eval.per_signal[Signal::Valence.index()];
        let a = eval.per_signal[Signal::Arousal.index()];
        println!(
            "split={} time={:.1?} e_r2={:.3} r_auc={:.3} v_r2={:.3} a_r2={:.3} (obs e={} r={} v={} a={}) first_loss={:.4} last_loss={:.4}",
            k,
            train_time,
            e.r2.unwrap_or(f64::NAN),
            r.auc.unwrap_or(f64::NAN),
            v.r2.unwrap_or(f64::NAN),
            a.r2.unwrap_or(f64::NAN),
            e.observed,
            r.observed,
            v.observed,
            a.observed,
            trained.epochs.first().unwrap().train_loss,
            trained.epochs.last().unwrap().train_loss,
        );
    }
}

fn policy_stage(
    world: &cadence_core::datagen::SyntheticWorld,
    plan: &cadence_core::worldmodel::SplitPlan,
) {
    let split = &plan.splits[0];
    let embed_dim = world.catalogue.embed_dim();

    // World model for scoring (single split).
    let mut wm_cfg = WorldModelConfig::desk_default(embed_dim);
    wm_cfg.seed = 100;
    let t = Instant::now();
    let wm = train_world_model(&world.dataset, &world.catalogue, &wm_cfg, split).unwrap();
    println!("world model trained in {:.1?}", t.elapsed());
    let wm_params = &wm.best[Signal::Valence.index()].params;

    let weights = UtilityWeights::default();
    let window_seed = 4242;

    // Copycat per seed.
    let mut pol_cfg = PolicyConfig::desk_default(embed_dim);
    let seeds = [1u64, 2, 3];
    let mut copycats = Vec::new();
    for s in seeds {
        pol_cfg.seed = s;
        let t = Instant::now();
        let tp = train_copycat(&world.dataset, &world.catalogue, split, &pol_cfg, window_seed).unwrap();
        println!(
            "copycat seed={} time={:.1?} best_epoch={} val={:.3} first={:.3} last={:.3}",
            s,
            t.elapsed(),
            tp.best_epoch,
            tp.best_val_loss,
            tp.epochs.first().unwrap().train_loss,
            tp.epochs.last().unwrap().train_loss
        );
        copycats.push(tp);
    }

    // Pairs from train-user windows.
    let train_seqs = build_sequences(&world.dataset, &world.catalogue, &split.train).unwrap();
    let train_windows = cadence_core::policy::user_windows(
        &train_seqs,
        &split.train,
        pol_cfg.windows_per_user,
        pol_cfg.window_len_range,
        window_seed,
    );
    let t = Instant::now();
    let pairs = build_preference_pairs(
        &train_seqs,
        &train_windows,
        &world.catalogue,
        wm_params,
        &wm_cfg,
        &weights,
        &PairMiningConfig::default(),
        &mut seeded(5),
    )
    .unwrap();
    println!("pairs={} in {:.1?}", pairs.len(), t.elapsed());

    // DPO per seed.
    let mut dpos = Vec::new();
    for (i, s) in seeds.iter().enumerate() {
        let dpo_cfg = DpoConfig { seed: *s, ..DpoConfig::default() };
        let t = Instant::now();
        let tuned = train_dpo(
            &copycats[i].params,
            &pol_cfg,
            &dpo_cfg,
            &pairs,
            &train_seqs,
            &world.catalogue,
        )
        .unwrap();
        println!("dpo seed={} time={:.1?} last_loss={:.4}", s, t.elapsed(), tuned.epochs.last().unwrap().train_loss);
        dpos.push(tuned);
    }

    // Rollout seed windows from test users.
    let test_seqs = build_sequences(&world.dataset, &world.catalogue, &split.test).unwrap();
    let test_windows = cadence_core::policy::user_windows(
        &test_seqs,
        &split.test,
        pol_cfg.windows_per_user,
        pol_cfg.window_len_range,
        window_seed,
    );
    let windows: Vec<_> = test_windows
        .iter()
        .map(|w| (*w, w.slice(&test_seqs[&w.user_id]).to_vec()))
        .collect();

    let mut report = |name: &str, metrics: Vec<cadence_core::rollout::SeedRolloutMetrics>| {
        let vals = |f: &dyn Fn(&cadence_core::rollout::SeedRolloutMetrics) -> f64| {
            let v: Vec<f64> = metrics.iter().map(f).collect();
            eval::mean_sd(&v)
        };
        let (ut, _) = vals(&|m| m.mean_utility);
        let (v, _) = vals(&|m| m.mean_valence);
        let (a, _) = vals(&|m| m.mean_arousal);
        let (cov, _) = vals(&|m| m.diversity.coverage);
        let (ent, _) = vals(&|m| m.diversity.normalized_entropy);
        let (ild, _) = vals(&|m| m.diversity.ild);
        let (gini, _) = vals(&|m| m.diversity.gini);
        println!(
            "{name:8} utility={ut:.4} v={v:.3} a={a:.3} cov={cov:.4} ent={ent:.3} ild={ild:.3} gini={gini:.4}"
        );
    };

    let t = Instant::now();
    let mut metrics = Vec::new();
    for (i, s) in seeds.iter().enumerate() {
        let policy = EmbeddingPolicy { label: "copycat", params: &copycats[i].params, cfg: &pol_cfg };
        let (_, m) = rollout_suite(&policy, wm_params, &wm_cfg, &windows, &world.catalogue, 5, &weights, *s).unwrap();
        metrics.push(m);
    }
    report("copycat", metrics);

    let mut metrics = Vec::new();
    for (i, s) in seeds.iter().enumerate() {
        let policy = EmbeddingPolicy { label: "dpo", params: &dpos[i].params, cfg: &pol_cfg };
        let (_, m) = rollout_suite(&policy, wm_params, &wm_cfg, &windows, &world.catalogue, 5, &weights, *s).unwrap();
        metrics.push(m);
    }
    report("dpo", metrics);

    let mut metrics = Vec::new();
    for s in seeds {
        let (_, m) = rollout_suite(&RandomPolicy, wm_params, &wm_cfg, &windows, &world.catalogue, 5, &weights, s).unwrap();
        metrics.push(m);
    }
    report("random", metrics);

    let mut metrics = Vec::new();
    for s in seeds {
        let policy = GreedyPolicy { wm_params, wm_cfg: &wm_cfg, weights };
        let (_, m) = rollout_suite(&policy, wm_params, &wm_cfg, &windows, &world.catalogue, 5, &weights, s).unwrap();
        metrics.push(m);
    }
    report("greedy", metrics);
    println!("rollouts in {:.1?}", t.elapsed());

    // Adherence.
    let full_history_songs: BTreeMap<usize, std::collections::BTreeSet<usize>> = world
        .dataset
        .users
        .iter()
        .map(|u| {
            let songs = u
                .sessions
                .iter()
                .flat_map(|s| s.interactions.iter().map(|i| i.song_id))
                .collect();
            (u.user_id, songs)
        })
        .collect();

    let eval_windows: Vec<(usize, Vec<Token>)> =
        windows.iter().map(|(w, t)| (w.user_id, t.clone())).collect();
    let train_eval_windows: Vec<(usize, Vec<Token>)> = train_windows
        .iter()
        .map(|w| (w.user_id, w.slice(&train_seqs[&w.user_id]).to_vec()))
        .collect();

    let t = Instant::now();
    let mut rng = seeded(8);
    {
        let policy = EmbeddingPolicy { label: "copycat", params: &copycats[0].params, cfg: &pol_cfg };
        let rank = |h: &[Token]| policy.rank_catalogue(h, &world.catalogue, &mut seeded(1));
        let l2_test = eval::adherence_level2(&rank, &eval_windows, &full_history_songs).unwrap();
        let l2_train = eval::adherence_level2(&rank, &train_eval_windows, &full_history_songs).unwrap();
        let l3_test = eval::adherence_level3(&rank, &eval_windows).unwrap();
        println!(
            "copycat adherence: train_hit10={:.3} test_hit10={:.3} ratio={:.2} l3_hit10={:.4} l3_acc={:.4}",
            l2_train.hit_at_10,
            l2_test.hit_at_10,
            l2_train.hit_at_10 / l2_test.hit_at_10.max(1e-9),
            l3_test.hit_at_10,
            l3_test.accuracy.unwrap()
        );
    }
    {
        let policy = EmbeddingPolicy { label: "dpo", params: &dpos[0].params, cfg: &pol_cfg };
        let rank = |h: &[Token]| policy.rank_catalogue(h, &world.catalogue, &mut seeded(1));
        let l2 = eval::adherence_level2(&rank, &eval_windows, &full_history_songs).unwrap();
        let l3 = eval::adherence_level3(&rank, &eval_windows).unwrap();
        println!("dpo adherence: test_hit10={:.3} l3_hit10={:.4}", l2.hit_at_10, l3.hit_at_10);
    }
    {
        let rank = |h: &[Token]| RandomPolicy.rank_catalogue(h, &world.catalogue, &mut rng);
        let l2 = eval::adherence_level2(&rank, &eval_windows, &full_history_songs).unwrap();
        println!("random adherence: test_hit10={:.3}", l2.hit_at_10);
    }
    {
        let policy = GreedyPolicy { wm_params, wm_cfg: &wm_cfg, weights };
        let rank = |h: &[Token]| policy.rank_catalogue(h, &world.catalogue, &mut seeded(1));
        let l2 = eval::adherence_level2(&rank, &eval_windows, &full_history_songs).unwrap();
        println!("greedy adherence: test_hit10={:.3}", l2.hit_at_10);
    }
    println!("adherence in {:.1?}", t.elapsed());
}
